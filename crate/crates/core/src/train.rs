//! Denoiser training with the alignment objective, and guided sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::attach::CondensedDataset;
use crate::datagen::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::model::{Bound, ConditionBundle, Denoiser, DenoiserModel, PredictionKind};
use crate::rng::{self, derive_seed, Rng};
use crate::schedule::{ancestral_step, euler_flow_step, NoiseSchedule, ScheduleKind};
use crate::tensor::{AdamConfig, AdamState, Graph, ReduceOp, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Weight of the alignment loss.
    pub lambda: f64,
    pub prediction: PredictionKind,
    pub schedule: ScheduleKind,
    /// Probability of replacing an item's condition by the null condition.
    pub p_null: f64,
    /// EMA decay; 0 tracks the raw weights, 1 freezes the initial ones.
    pub ema_decay: f64,
    pub seed: u64,
    pub alignment: bool,
    pub text_branch: bool,
    pub class_branch: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 64,
            lambda: 0.5,
            prediction: PredictionKind::Epsilon,
            schedule: ScheduleKind::VpContinuous,
            p_null: 0.1,
            ema_decay: 0.999,
            seed: 0,
            alignment: true,
            text_branch: true,
            class_branch: true,
            adam: AdamConfig::default(),
        }
    }
}

/// Velocity targets are only defined against the linear path, and the
/// linear path is only integrated with velocities.
pub fn check_pairing(kind: PredictionKind, schedule: ScheduleKind) -> Result<()> {
    let flow = schedule == ScheduleKind::LinearFlow;
    if flow != (kind == PredictionKind::Velocity) {
        return Err(invalid(format!(
            "prediction kind {kind:?} cannot be paired with schedule {schedule:?}; velocity goes with linear-flow only"
        )));
    }
    Ok(())
}

impl TrainConfig {
    /// Alignment weight actually applied.
    pub fn effective_lambda(&self) -> f64 {
        if self.alignment {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Range {
                what: "lambda",
                value: self.lambda,
                range: "[0, inf)",
            });
        }
        if !(0.0..1.0).contains(&self.p_null) {
            return Err(Error::Range {
                what: "p_null",
                value: self.p_null,
                range: "[0, 1)",
            });
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Range {
                what: "ema_decay",
                value: self.ema_decay,
                range: "[0, 1]",
            });
        }
        if self.batch == 0 {
            return Err(invalid("batch must be >= 1"));
        }
        if !self.text_branch && !self.class_branch {
            return Err(invalid("at least one of the text and class branches must be on"));
        }
        check_pairing(self.prediction, self.schedule)
    }
}

/// One training batch in schedule time.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    /// `[B, D]`
    pub x0: Tensor,
    pub times: Vec<f64>,
    /// `[B, D]`
    pub eps: Tensor,
    pub conds: Vec<ConditionBundle<'a>>,
    /// `[B * h, d_feat]`, needed when the alignment term is evaluated.
    pub visual: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub diff: Var,
    pub proj: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub total: f64,
    pub diff: f64,
    pub proj: f64,
}

/// Regression target for each prediction kind.
pub fn target(kind: PredictionKind, x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    match kind {
        PredictionKind::Epsilon => Ok(eps.clone()),
        PredictionKind::Velocity => {
            let d = eps.data().iter().zip(x0.data()).map(|(e, x)| e - x).collect();
            Tensor::new(eps.shape().to_vec(), d)
        }
    }
}

/// `-mean_i cos(projected_i, visual_i)`; both sides are normalized.
pub fn alignment_loss(g: &mut Graph, projected: Var, visual: &Tensor) -> Result<Var> {
    if g.shape(projected) != visual.shape() {
        return Err(Error::Shape {
            op: "alignment",
            lhs: g.shape(projected).to_vec(),
            rhs: visual.shape().to_vec(),
        });
    }
    let rows = visual.rows();
    let p = g.normalize_rows(projected);
    let v = g.constant(visual.clone());
    let v = g.normalize_rows(v);
    let prod = g.mul(p, v)?;
    let s = g.sum(prod)?;
    Ok(g.scale(s, -1.0 / rows as f64))
}

/// Builds `L_total = L_diff + lambda * L_proj` on `g`. A single draw of
/// `(t, eps)` per item feeds both terms. The alignment term is evaluated
/// whenever `batch.visual` is present, and only enters the total when
/// `lambda > 0`.
pub fn loss_graph(
    model: &DenoiserModel,
    g: &mut Graph,
    b: &Bound,
    sched: &NoiseSchedule,
    batch: &Batch<'_>,
    lambda: f64,
) -> Result<LossVars> {
    let n = batch.times.len();
    let d = model.dims.sample_dim;
    if batch.x0.shape() != [n, d] || batch.eps.shape() != [n, d] || batch.conds.len() != n {
        return Err(Error::Shape {
            op: "loss batch",
            lhs: batch.x0.shape().to_vec(),
            rhs: vec![n, d],
        });
    }
    let mut xt = Vec::with_capacity(n * d);
    let mut mt = Vec::with_capacity(n);
    for (i, &t) in batch.times.iter().enumerate() {
        let (a, s) = sched.alpha_sigma(t)?;
        xt.extend(batch.x0.row(i).iter().zip(batch.eps.row(i)).map(|(x, e)| a * x + s * e));
        mt.push(sched.model_time(t));
    }
    let x = g.constant(Tensor::new(vec![n, d], xt)?);
    let cond = model.fuse_batch(g, b, &batch.conds)?;
    let out = model.forward_batch(g, b, x, &mt, cond)?;
    let tgt = g.constant(target(model.prediction, &batch.x0, &batch.eps)?);
    let r = g.sub(out.prediction, tgt)?;
    let sq = g.mul(r, r)?;
    // Squared norm per sample, averaged over the batch.
    let per = g.reduce(ReduceOp::Sum, sq, Some(1))?;
    let diff = g.mean(per)?;
    let proj = match &batch.visual {
        Some(v) => {
            let p = model.project(g, b, out.features)?;
            Some(alignment_loss(g, p, v)?)
        }
        None => None,
    };
    let total = match proj {
        Some(p) if lambda > 0.0 => {
            let w = g.scale(p, lambda);
            g.add(diff, w)?
        }
        _ => diff,
    };
    Ok(LossVars { total, diff, proj })
}

/// Loss values without gradients.
pub fn compute_loss(model: &DenoiserModel, sched: &NoiseSchedule, batch: &Batch<'_>, lambda: f64) -> Result<Losses> {
    let mut g = Graph::new(model.precision);
    let b = model.bind(&mut g, false);
    let v = loss_graph(model, &mut g, &b, sched, batch, lambda)?;
    Ok(Losses {
        total: g.value(v.total).data()[0],
        diff: g.value(v.diff).data()[0],
        proj: v.proj.map_or(0.0, |p| g.value(p).data()[0]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub l_diff: f64,
    pub l_proj: f64,
    pub l_total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub p_null: f64,
}

impl TrainLog {
    /// Mean `L_diff` over the first or last `window` rows.
    pub fn smoothed_diff(&self, window: usize, tail: bool) -> Option<f64> {
        let w = window.min(self.rows.len());
        if w == 0 {
            return None;
        }
        let rows = if tail {
            &self.rows[self.rows.len() - w..]
        } else {
            &self.rows[..w]
        };
        Some(rows.iter().map(|r| r.l_diff).sum::<f64>() / w as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: DenoiserModel,
    pub ema: DenoiserModel,
    pub log: TrainLog,
}

/// Rows the trainer can draw from.
pub trait TrainSource {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn sample(&self, i: usize) -> &[f64];
    fn condition(&self, i: usize, class: bool, text: bool) -> ConditionBundle<'_>;
    /// `[h, d_feat]` tokens of row `i`, if attached.
    fn visual(&self, i: usize) -> Option<&Tensor>;
    fn check_model(&self, model: &DenoiserModel) -> Result<()>;
}

impl TrainSource for CondensedDataset {
    fn len(&self) -> usize {
        CondensedDataset::len(self)
    }

    fn dim(&self) -> usize {
        CondensedDataset::dim(self)
    }

    fn sample(&self, i: usize) -> &[f64] {
        CondensedDataset::sample(self, i)
    }

    fn condition(&self, i: usize, class: bool, text: bool) -> ConditionBundle<'_> {
        CondensedDataset::condition(self, i, class, text)
    }

    fn visual(&self, i: usize) -> Option<&Tensor> {
        Some(&self.visual[i].tokens)
    }

    fn check_model(&self, model: &DenoiserModel) -> Result<()> {
        CondensedDataset::check_model(self, &model.dims)
    }
}

/// Full labelled data with class conditioning only; used for the reference
/// model.
impl TrainSource for LabeledDataset {
    fn len(&self) -> usize {
        LabeledDataset::len(self)
    }

    fn dim(&self) -> usize {
        LabeledDataset::dim(self)
    }

    fn sample(&self, i: usize) -> &[f64] {
        LabeledDataset::sample(self, i)
    }

    fn condition(&self, i: usize, _class: bool, _text: bool) -> ConditionBundle<'_> {
        ConditionBundle::class_only(self.labels[i])
    }

    fn visual(&self, _i: usize) -> Option<&Tensor> {
        None
    }

    fn check_model(&self, model: &DenoiserModel) -> Result<()> {
        if model.dims.sample_dim != self.dim() || model.dims.classes != self.classes {
            return Err(invalid(format!(
                "model expects D = {}, C = {}; dataset has D = {}, C = {}",
                model.dims.sample_dim,
                model.dims.classes,
                self.dim(),
                self.classes
            )));
        }
        Ok(())
    }
}

/// Draws the batch for one step. Items are sampled without replacement,
/// times are stratified across the batch, and each item is dropped to the
/// null condition with probability `p_null`.
pub fn draw_batch<'a, S: TrainSource + ?Sized>(
    src: &'a S,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<Batch<'a>> {
    let n = src.len();
    let d = src.dim();
    let bsz = cfg.batch;
    let rows: Vec<usize> = rand::seq::index::sample(rng, n, bsz).into_vec();
    let times = sched.stratified_times(bsz, rng);
    let eps = rng::normals(rng, bsz * d);
    let mut x0 = Vec::with_capacity(bsz * d);
    let mut conds = Vec::with_capacity(bsz);
    let mut visual: Option<Vec<f64>> = cfg.alignment.then(Vec::new);
    let mut vis_shape = (0, 0);
    for &i in &rows {
        x0.extend_from_slice(src.sample(i));
        let drop = rng::uniform(rng) < cfg.p_null;
        conds.push(src.condition(i, cfg.class_branch, cfg.text_branch).with_null(drop));
        match (visual.as_mut(), src.visual(i)) {
            (Some(buf), Some(v)) => {
                buf.extend_from_slice(v.data());
                vis_shape = (v.rows(), v.cols());
            }
            _ => visual = None,
        }
    }
    let visual = match visual {
        Some(buf) => Some(Tensor::new(vec![bsz * vis_shape.0, vis_shape.1], buf)?),
        None => None,
    };
    Ok(Batch {
        x0: Tensor::new(vec![bsz, d], x0)?,
        times,
        eps: Tensor::new(vec![bsz, d], eps)?,
        conds,
        visual,
    })
}

fn ema_update(ema: &mut DenoiserModel, model: &DenoiserModel, decay: f64) {
    let prec = model.precision;
    for (e, p) in ema.params_mut().iter_mut().zip(model.params()) {
        for (a, b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = prec.round(decay * *a + (1.0 - decay) * b);
        }
    }
}

/// Runs `cfg.steps` Adam updates of `model` on `src`. Returns the trained
/// model, its EMA copy and the per-step log. All compatibility checks run
/// before the first step.
pub fn train<S: TrainSource + ?Sized>(model: &DenoiserModel, src: &S, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    src.check_model(model)?;
    if model.prediction != cfg.prediction {
        return Err(invalid(format!(
            "model predicts {:?} but training config asks for {:?}",
            model.prediction, cfg.prediction
        )));
    }
    if cfg.batch > src.len() {
        return Err(invalid(format!(
            "batch {} exceeds dataset size {}",
            cfg.batch,
            src.len()
        )));
    }
    if cfg.alignment && src.len() > 0 && src.visual(0).is_none() {
        return Err(invalid(
            "alignment needs visual tokens; train on a condensed dataset or disable alignment",
        ));
    }
    let sched = NoiseSchedule::from_kind(cfg.schedule);
    let lambda = cfg.effective_lambda();
    let mut model = model.clone();
    let mut ema = model.clone();
    let mut adam = AdamState::new(cfg.adam, model.params());
    let names: Vec<String> = model.param_names().to_vec();
    let mut rng = rng::rng_from_seed(derive_seed(cfg.seed, 0x7472_6169_6e));
    let mut log = TrainLog {
        rows: Vec::with_capacity(cfg.steps),
        p_null: cfg.p_null,
    };
    for step in 0..cfg.steps {
        let batch = draw_batch(src, &sched, cfg, &mut rng)?;
        let mut g = Graph::new(model.precision);
        let b = model.bind(&mut g, true);
        let v = loss_graph(&model, &mut g, &b, &sched, &batch, lambda)?;
        let l_total = g.value(v.total).data()[0];
        let l_diff = g.value(v.diff).data()[0];
        let l_proj = v.proj.map_or(0.0, |p| g.value(p).data()[0]);
        if !(l_total.is_finite() && l_diff.is_finite() && l_proj.is_finite()) {
            return Err(Error::NonFinite(format!(
                "loss at step {step}: L_diff={l_diff}, L_proj={l_proj}, L_total={l_total}"
            )));
        }
        g.backward(v.total)?;
        let grads: Vec<&[f64]> = b.vars().iter().map(|&p| g.grad(p).expect("parameter grad")).collect();
        let grad_norm = libm::sqrt(grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum());
        adam.step(model.params_mut(), &grads, &names)
            .map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
        let prec = model.precision;
        for p in model.params_mut() {
            p.round_to(prec);
        }
        ema_update(&mut ema, &model, cfg.ema_decay);
        log.rows.push(LogRow {
            step,
            l_diff,
            l_proj,
            l_total,
            grad_norm,
        });
    }
    Ok(TrainOutput { model, ema, log })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 100,
            cfg_scale: 1.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// `[n, D]`
    pub samples: Tensor,
    pub warnings: Vec<String>,
}

/// `null + scale * (cond - null)`; at `scale == 1` the conditional
/// prediction is returned as is.
pub fn guided_prediction<M: Denoiser + ?Sized>(
    model: &M,
    x_t: &Tensor,
    times: &[f64],
    cond: &ConditionBundle<'_>,
    scale: f64,
) -> Result<Tensor> {
    let n = times.len();
    if scale == 1.0 {
        let conds = vec![*cond; n];
        return model.predict(x_t, times, &conds);
    }
    let mut x2 = x_t.data().to_vec();
    x2.extend_from_slice(x_t.data());
    let mut t2 = times.to_vec();
    t2.extend_from_slice(times);
    let mut conds = vec![*cond; n];
    conds.extend(core::iter::repeat_n(ConditionBundle::null(), n));
    let both = model.predict(&Tensor::new(vec![2 * n, x_t.cols()], x2)?, &t2, &conds)?;
    let half = n * x_t.cols();
    let (c, u) = both.data().split_at(half);
    let data = c.iter().zip(u).map(|(c, u)| u + scale * (c - u)).collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Draws `n` samples for one condition by reverse integration from pure
/// noise. Continuous VP and strided DDPM use the ancestral step between
/// grid levels; the linear path uses Euler steps on the velocity.
/// `trained_p_null` is the dropout rate the model was trained with, if known.
pub fn sample<M: Denoiser + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    cond: &ConditionBundle<'_>,
    n: usize,
    cfg: &SampleConfig,
    trained_p_null: Option<f64>,
    dim: usize,
) -> Result<SampleOutput> {
    if !(cfg.cfg_scale >= 1.0 && cfg.cfg_scale.is_finite()) {
        return Err(Error::Range {
            what: "cfg_scale",
            value: cfg.cfg_scale,
            range: "[1, inf)",
        });
    }
    if n == 0 {
        return Err(invalid("sample count must be >= 1"));
    }
    check_pairing(model.prediction_kind(), sched.kind())?;
    let mut warnings = Vec::new();
    if cfg.cfg_scale > 1.0 && trained_p_null == Some(0.0) {
        warnings.push(format!(
            "cfg_scale {} > 1 but the model was trained with p_null = 0; the null branch is untrained",
            cfg.cfg_scale
        ));
    }
    let mut r = rng::rng_from_seed(cfg.seed);
    let mut x = Tensor::new(vec![n, dim], rng::normals(&mut r, n * dim))?;
    for (t, s) in sched.sampling_grid(cfg.steps)? {
        let times = vec![sched.model_time(t); n];
        let pred = guided_prediction(model, &x, &times, cond, cfg.cfg_scale)?;
        x = match sched {
            NoiseSchedule::LinearFlow => euler_flow_step(&x, t, &pred, t - s)?,
            _ => {
                let noise = (s > 0.0).then(|| rng::normals(&mut r, n * dim));
                ancestral_step(&x, &pred, sched.alpha_bar(t)?, sched.alpha_bar(s)?, noise.as_deref())?
            }
        };
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("sampler state at t = {t}")));
        }
    }
    Ok(SampleOutput { samples: x, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attach::{build_condensed, EncoderConfig};
    use crate::datagen::gen_gauss2d;
    use crate::model::ModelDims;
    use crate::select::random_select;
    use crate::tensor::Precision;

    fn setup() -> (CondensedDataset, DenoiserModel) {
        let ds = gen_gauss2d(3, 12, 0.5, 1).unwrap();
        let sel = random_select(&ds, 6, 0).unwrap();
        let enc = EncoderConfig {
            text_len: 8,
            d_text: 6,
            d_feat: 3,
            tokens: 2,
            seed: 0,
        };
        let c = build_condensed(&ds, &sel, &enc, None).unwrap();
        let dims = ModelDims {
            d_model: 4,
            ..c.model_dims(4, 2, 1)
        };
        let m = DenoiserModel::new(dims, PredictionKind::Epsilon, 5).unwrap();
        (c, m)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            steps: 5,
            batch: 4,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn identical_projection_gives_minus_one() {
        let mut g = Graph::new(Precision::F64);
        let v = Tensor::new(vec![3, 2], vec![0.6, 0.8, -1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = g.constant(v.clone());
        let l = alignment_loss(&mut g, p, &v).unwrap();
        assert_eq!(g.value(l).data()[0], -1.0);
        let neg = g.constant(Tensor::new(vec![3, 2], v.data().iter().map(|x| -2.0 * x).collect()).unwrap());
        let l = alignment_loss(&mut g, neg, &v).unwrap();
        assert_eq!(g.value(l).data()[0], 1.0);
    }

    #[test]
    fn lambda_zero_total_is_diff() {
        let (c, m) = setup();
        let sched = NoiseSchedule::vp();
        let mut r = rng::rng_from_seed(3);
        let batch = draw_batch(&c, &sched, &small_cfg(), &mut r).unwrap();
        let full = compute_loss(&m, &sched, &batch, 0.5).unwrap();
        let off = compute_loss(&m, &sched, &batch, 0.0).unwrap();
        assert_eq!(off.total, off.diff);
        assert_eq!(off.diff, full.diff);
        assert_eq!(off.proj, full.proj);
        assert!((full.total - (full.diff + 0.5 * full.proj)).abs() < 1e-6);
        assert!((-1.0..=1.0).contains(&full.proj));
    }

    #[test]
    fn pairing_enforced() {
        assert!(check_pairing(PredictionKind::Velocity, ScheduleKind::LinearFlow).is_ok());
        assert!(check_pairing(PredictionKind::Epsilon, ScheduleKind::DdpmDiscrete).is_ok());
        assert!(check_pairing(PredictionKind::Velocity, ScheduleKind::VpContinuous).is_err());
        assert!(check_pairing(PredictionKind::Epsilon, ScheduleKind::LinearFlow).is_err());
    }

    #[test]
    fn zero_steps_is_identity() {
        let (c, m) = setup();
        let cfg = TrainConfig {
            steps: 0,
            ..small_cfg()
        };
        let out = train(&m, &c, &cfg).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.ema, m);
        assert!(out.log.rows.is_empty());
    }

    #[test]
    fn ema_endpoints() {
        let (c, m) = setup();
        let raw = train(
            &m,
            &c,
            &TrainConfig {
                ema_decay: 0.0,
                ..small_cfg()
            },
        )
        .unwrap();
        assert_eq!(raw.ema.params(), raw.model.params());
        assert_ne!(raw.model.params(), m.params());
        let one = train(
            &m,
            &c,
            &TrainConfig {
                ema_decay: 1.0,
                ..small_cfg()
            },
        )
        .unwrap();
        assert_eq!(one.ema, m);
        assert_ne!(one.model.params(), m.params());
    }

    #[test]
    fn training_is_deterministic_and_logs_steps() {
        let (c, m) = setup();
        let a = train(&m, &c, &small_cfg()).unwrap();
        let b = train(&m, &c, &small_cfg()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        let steps: Vec<usize> = a.log.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 1, 2, 3, 4]);
        for p in a.model.params() {
            assert!(p.data().iter().all(|&x| x as f32 as f64 == x));
        }
    }

    #[test]
    fn mismatched_dims_fail_before_training() {
        let (c, m) = setup();
        let mut dims = m.dims;
        dims.tokens = 1;
        let bad = DenoiserModel::new(dims, PredictionKind::Epsilon, 0).unwrap();
        assert!(train(&bad, &c, &small_cfg()).is_err());
        let big = TrainConfig {
            batch: 100,
            ..small_cfg()
        };
        assert!(train(&m, &c, &big).is_err());
    }

    #[test]
    fn cfg_scale_one_is_conditional() {
        let (c, m) = setup();
        let trained = train(&m, &c, &small_cfg()).unwrap().model;
        let x = Tensor::new(vec![2, 2], vec![0.1, -0.3, 1.0, 0.4]).unwrap();
        let cond = c.condition(0, true, true);
        let direct = trained.predict(&x, &[0.3, 0.7], &[cond, cond]).unwrap();
        let guided = guided_prediction(&trained, &x, &[0.3, 0.7], &cond, 1.0).unwrap();
        assert_eq!(direct, guided);
    }

    #[test]
    fn sampling_deterministic_and_warns() {
        let (c, m) = setup();
        let cond = c.condition(0, true, true);
        let cfg = SampleConfig {
            steps: 5,
            cfg_scale: 2.0,
            seed: 1,
        };
        let sched = NoiseSchedule::vp();
        let a = sample(&m, &sched, &cond, 3, &cfg, Some(0.0), 2).unwrap();
        let b = sample(&m, &sched, &cond, 3, &cfg, Some(0.1), 2).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.warnings.len(), 1);
        assert!(b.warnings.is_empty());
        let low = SampleConfig { cfg_scale: 0.5, ..cfg };
        assert!(sample(&m, &sched, &cond, 3, &low, None, 2).is_err());
    }
}
