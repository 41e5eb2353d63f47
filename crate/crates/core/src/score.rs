//! Diffusion difficulty scores: the Monte-Carlo expected denoising loss of
//! each sample under a reference model. Low score means easy.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::model::{ConditionBundle, Denoiser, DenoiserModel, PredictionKind};
use crate::rng::{self, derive_seed};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    /// Number of time strata; one draw at each stratum midpoint.
    pub t_strata: usize,
    /// Noise draws per stratum.
    pub eps_draws: usize,
    pub base_seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            t_strata: 8,
            eps_draws: 4,
            base_seed: 0,
        }
    }
}

impl McConfig {
    pub fn draws(&self) -> usize {
        self.t_strata * self.eps_draws
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_strata == 0 || self.eps_draws == 0 {
            return Err(invalid("mc config needs t_strata >= 1 and eps_draws >= 1"));
        }
        Ok(())
    }

    /// Seed of the noise stream for dataset row `index`.
    pub fn sample_seed(&self, index: usize) -> u64 {
        derive_seed(self.base_seed, index as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub scores: Vec<f64>,
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub mc: McConfig,
    pub model_fingerprint: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Score of dataset row `index`, if present.
    pub fn score_of(&self, index: usize) -> Option<f64> {
        self.indices.iter().position(|&i| i == index).map(|p| self.scores[p])
    }

    /// Records a warning when `fingerprint` is not the model that produced
    /// these scores. Returns whether they matched.
    pub fn verify_model(&mut self, fingerprint: u64) -> bool {
        let ok = fingerprint == self.model_fingerprint;
        if !ok {
            self.warnings.push(format!(
                "reference model fingerprint {fingerprint:016x} differs from scoring model {:016x}",
                self.model_fingerprint
            ));
        }
        ok
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.scores.len() || self.labels.len() != self.scores.len() {
            return Err(invalid("score table columns differ in length"));
        }
        if let Some(s) = self.scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::Range {
                what: "score",
                value: *s,
                range: "[0, inf)",
            });
        }
        Ok(())
    }
}

fn condition_for(label: usize) -> ConditionBundle<'static> {
    ConditionBundle::class_only(label)
}

fn target_row(kind: PredictionKind, x0: &[f64], eps: &[f64]) -> Vec<f64> {
    match kind {
        PredictionKind::Epsilon => eps.to_vec(),
        PredictionKind::Velocity => eps.iter().zip(x0).map(|(e, x)| e - x).collect(),
    }
}

struct Draws {
    x_t: Vec<f64>,
    times: Vec<f64>,
    targets: Vec<f64>,
}

/// Perturbed inputs for one sample. Noise is drawn stratum-major from the
/// sample's own stream.
fn draws_for(sched: &NoiseSchedule, kind: PredictionKind, x0: &[f64], mc: &McConfig, seed: u64) -> Result<Draws> {
    let mut r = rng::rng_from_seed(seed);
    let d = x0.len();
    let n = mc.draws();
    let mut out = Draws {
        x_t: Vec::with_capacity(n * d),
        times: Vec::with_capacity(n),
        targets: Vec::with_capacity(n * d),
    };
    for t in sched.stratum_midpoints(mc.t_strata) {
        let (a, s) = sched.alpha_sigma(t)?;
        for _ in 0..mc.eps_draws {
            let eps = rng::normals(&mut r, d);
            out.x_t.extend(x0.iter().zip(&eps).map(|(x, e)| a * x + s * e));
            out.times.push(sched.model_time(t));
            out.targets.extend(target_row(kind, x0, &eps));
        }
    }
    Ok(out)
}

fn mean_sq_error(pred: &[f64], target: &[f64], d: usize) -> f64 {
    let n = pred.len() / d;
    let mut total = 0.0;
    for r in 0..n {
        let mut row = 0.0;
        for j in r * d..(r + 1) * d {
            let diff = target[j] - pred[j];
            row += diff * diff;
        }
        total += row;
    }
    total / n as f64
}

/// Expected squared prediction error for one sample under `cond`, averaged
/// over `t_strata x eps_draws` draws from the stream `sample_seed`.
pub fn score_sample<M: Denoiser + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    x: &[f64],
    cond: &ConditionBundle<'_>,
    mc: &McConfig,
    sample_seed: u64,
) -> Result<f64> {
    mc.validate()?;
    let d = x.len();
    let dr = draws_for(sched, model.prediction_kind(), x, mc, sample_seed)?;
    let n = mc.draws();
    let conds: Vec<ConditionBundle<'_>> = (0..n).map(|_| *cond).collect();
    let pred = model.predict(&Tensor::new(alloc::vec![n, d], dr.x_t)?, &dr.times, &conds)?;
    let s = mean_sq_error(pred.data(), &dr.targets, d);
    if !s.is_finite() {
        return Err(Error::NonFinite(String::from("difficulty score")));
    }
    Ok(s)
}

/// Samples scored per forward pass in [`score_rows`].
const SCORE_CHUNK: usize = 16;

/// Scores the listed dataset rows with class-only conditioning. Each row
/// uses its own seed, so any partition of the rows gives identical values.
pub fn score_rows<M: Denoiser + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    data: &LabeledDataset,
    mc: &McConfig,
    rows: &[usize],
) -> Result<Vec<f64>> {
    mc.validate()?;
    let d = data.dim();
    let n = mc.draws();
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(SCORE_CHUNK) {
        let mut x_t = Vec::with_capacity(chunk.len() * n * d);
        let mut times = Vec::with_capacity(chunk.len() * n);
        let mut targets = Vec::with_capacity(chunk.len() * n * d);
        let mut conds = Vec::with_capacity(chunk.len() * n);
        for &i in chunk {
            let dr = draws_for(sched, model.prediction_kind(), data.sample(i), mc, mc.sample_seed(i))?;
            x_t.extend(dr.x_t);
            times.extend(dr.times);
            targets.extend(dr.targets);
            conds.extend((0..n).map(|_| condition_for(data.labels[i])));
        }
        let pred = model.predict(&Tensor::new(alloc::vec![chunk.len() * n, d], x_t)?, &times, &conds)?;
        for (k, &i) in chunk.iter().enumerate() {
            let span = k * n * d..(k + 1) * n * d;
            let s = mean_sq_error(&pred.data()[span.clone()], &targets[span], d);
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("difficulty score of sample {i}")));
            }
            out.push(s);
        }
    }
    Ok(out)
}

/// Assembles a table from per-row scores, attaching warnings for an
/// untrained reference model.
pub fn table_from_scores(model: &DenoiserModel, data: &LabeledDataset, mc: McConfig, scores: Vec<f64>) -> ScoreTable {
    let mut warnings = Vec::new();
    if model.output_head_is_zero() {
        warnings.push(String::from(
            "reference model output head is all zeros; scores reflect an untrained model",
        ));
    }
    ScoreTable {
        scores,
        indices: (0..data.len()).collect(),
        labels: data.labels.clone(),
        mc,
        model_fingerprint: model.fingerprint(),
        warnings,
    }
}

/// Scores every row of `data` sequentially.
pub fn score_dataset(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    data: &LabeledDataset,
    mc: &McConfig,
) -> Result<ScoreTable> {
    let rows: Vec<usize> = (0..data.len()).collect();
    let scores = score_rows(model, sched, data, mc, &rows)?;
    Ok(table_from_scores(model, data, *mc, scores))
}
