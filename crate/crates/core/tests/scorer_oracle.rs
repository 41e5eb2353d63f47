//! Difficulty scores against exact oracles and a straight-loop reference.

use d2c_core::datagen::gen_gauss2d;
use d2c_core::model::{ConditionBundle, Denoiser, DenoiserModel, ModelDims, PredictionKind};
use d2c_core::rng::{self, rng_from_seed};
use d2c_core::schedule::NoiseSchedule;
use d2c_core::score::{score_dataset, score_rows, score_sample, McConfig};
use d2c_core::{Result, Tensor};

/// Knows the clean sample, so it recovers the noise exactly.
struct Memorizer {
    x0: Vec<f64>,
    sched: NoiseSchedule,
    kind: PredictionKind,
}

impl Denoiser for Memorizer {
    fn prediction_kind(&self) -> PredictionKind {
        self.kind
    }

    fn predict(&self, x_t: &Tensor, times: &[f64], _: &[ConditionBundle<'_>]) -> Result<Tensor> {
        let d = self.x0.len();
        let mut out = Vec::new();
        for (row, &t) in x_t.data().chunks(d).zip(times) {
            let (a, s) = self.sched.alpha_sigma(t)?;
            for (x, x0) in row.iter().zip(&self.x0) {
                let eps = (x - a * x0) / s;
                out.push(match self.kind {
                    PredictionKind::Epsilon => eps,
                    PredictionKind::Velocity => eps - x0,
                });
            }
        }
        Tensor::new(x_t.shape().to_vec(), out)
    }
}

#[test]
fn perfect_predictor_scores_zero() {
    for (sched, kind) in [
        (NoiseSchedule::vp(), PredictionKind::Epsilon),
        (NoiseSchedule::LinearFlow, PredictionKind::Velocity),
    ] {
        let x0 = vec![0.7, -1.3, 2.0];
        let m = Memorizer {
            x0: x0.clone(),
            sched: sched.clone(),
            kind,
        };
        let s = score_sample(
            &m,
            &sched,
            &x0,
            &ConditionBundle::class_only(0),
            &McConfig::default(),
            5,
        )
        .unwrap();
        assert!(s < 1e-18, "{sched:?}: {s}");
    }
}

fn model(seed: u64) -> DenoiserModel {
    let dims = ModelDims {
        classes: 3,
        sample_dim: 2,
        d_model: 4,
        d_text: 4,
        d_feat: 2,
        blocks: 2,
        tokens: 2,
        align_layer: 1,
    };
    let mut m = DenoiserModel::new(dims, PredictionKind::Epsilon, seed).unwrap();
    let mut r = rng_from_seed(seed + 7);
    for p in m.params_mut() {
        for x in p.data_mut() {
            *x = 0.2 * rng::normal(&mut r);
        }
    }
    m
}

#[test]
fn batched_scores_equal_a_straight_loop_bitwise() {
    let data = gen_gauss2d(3, 20, 0.5, 4).unwrap();
    let m = model(1);
    let sched = NoiseSchedule::vp();
    let mc = McConfig {
        base_seed: 11,
        ..McConfig::default()
    };
    let table = score_dataset(&m, &sched, &data, &mc).unwrap();
    for i in 0..data.len() {
        let cond = ConditionBundle::class_only(data.labels[i]);
        let s = score_sample(&m, &sched, data.sample(i), &cond, &mc, mc.sample_seed(i)).unwrap();
        assert_eq!(s.to_bits(), table.scores[i].to_bits(), "row {i}");
    }
}

#[test]
fn scores_do_not_depend_on_row_order_or_chunking() {
    let data = gen_gauss2d(3, 20, 0.5, 5).unwrap();
    let m = model(2);
    let sched = NoiseSchedule::vp();
    let mc = McConfig::default();
    let rows: Vec<usize> = (0..data.len()).collect();
    let whole = score_rows(&m, &sched, &data, &mc, &rows).unwrap();
    let mut perm = rows.clone();
    perm.reverse();
    perm.rotate_left(7);
    let permuted = score_rows(&m, &sched, &data, &mc, &perm).unwrap();
    for (p, s) in perm.iter().zip(&permuted) {
        assert_eq!(s.to_bits(), whole[*p].to_bits());
    }
    let mut pieces = Vec::new();
    for c in rows.chunks(5) {
        pieces.extend(score_rows(&m, &sched, &data, &mc, c).unwrap());
    }
    assert_eq!(pieces, whole);
}

#[test]
fn untrained_model_scores_near_dimension_and_warns() {
    // A fresh model's output head is zero, so each score is the mean squared
    // norm of the drawn noise, whose expectation is D.
    let data = gen_gauss2d(2, 200, 0.5, 6).unwrap();
    let dims = ModelDims {
        classes: 2,
        sample_dim: 2,
        d_model: 4,
        d_text: 4,
        d_feat: 2,
        blocks: 1,
        tokens: 2,
        align_layer: 1,
    };
    let m = DenoiserModel::new(dims, PredictionKind::Epsilon, 0).unwrap();
    let t = score_dataset(&m, &NoiseSchedule::vp(), &data, &McConfig::default()).unwrap();
    let mean = t.scores.iter().sum::<f64>() / t.len() as f64;
    // 400 samples x 32 draws of a chi-square(2) variable: standard error 0.025.
    assert!((mean - 2.0).abs() < 0.1, "{mean}");
    assert_eq!(t.warnings.len(), 1);
}
