//! In-memory pipeline stages. The command line and the comparison harness
//! both call these, so a chained CLI run and a harness cell produce the
//! same bytes.

use rayon::prelude::*;

use d2c_core::attach::{build_condensed, CondensedDataset};
use d2c_core::datagen::{gen_gauss2d, gen_shapes8x8, DatasetKind, LabeledDataset};
use d2c_core::eval::{evaluate, MetricReport};
use d2c_core::model::{ConditionBundle, DenoiserModel};
use d2c_core::rng::derive_seed;
use d2c_core::schedule::NoiseSchedule;
use d2c_core::score::{score_rows, table_from_scores, ScoreTable};
use d2c_core::select::{select, SelectionResult, SelectionSpec};
use d2c_core::tensor::{Precision, Tensor};
use d2c_core::train::{sample, train, SampleConfig, TrainOutput};

use crate::config::RunConfig;
use crate::error::Result;

/// Stream ids for model initialisation.
const REFERENCE_INIT: u64 = 1;
const CONDENSED_INIT: u64 = 2;

impl RunConfig {
    /// Config for run seed `s`: every seeded stage draws from a stream
    /// derived from its configured seed and `s`. Encoder seeds stay fixed.
    pub fn seeded(&self, s: u64) -> RunConfig {
        let mut c = self.clone();
        c.data.seed = derive_seed(self.data.seed, s);
        c.model.seed = derive_seed(self.model.seed, s);
        c.score.base_seed = derive_seed(self.score.base_seed, s);
        c.select.seed = derive_seed(self.select.seed, s);
        c.train.seed = derive_seed(self.train.seed, s);
        c.eval.seed = derive_seed(self.eval.seed, s);
        c
    }
}

/// Worker count from `D2C_THREADS`, defaulting to the logical core count.
pub fn thread_count() -> usize {
    std::env::var("D2C_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn pool() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .expect("thread pool")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: LabeledDataset,
    pub held: LabeledDataset,
}

/// Generates twice the per-class count and splits by index parity.
pub fn generate_data(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    let n = 2 * d.n_per_class;
    let full = match d.kind {
        DatasetKind::Gauss2d => gen_gauss2d(d.classes, n, d.clutter_max, d.seed)?,
        DatasetKind::Shapes8x8 => gen_shapes8x8(d.classes, n, d.clutter_max, d.jitter, d.seed)?,
    };
    let (train, held) = full.split_parity();
    Ok(Splits { train, held })
}

pub fn train_reference(cfg: &RunConfig, data: &LabeledDataset) -> Result<TrainOutput> {
    let init = DenoiserModel::new(
        cfg.dims(),
        cfg.schedule.prediction,
        derive_seed(cfg.model.seed, REFERENCE_INIT),
    )?;
    Ok(train(&init, data, &cfg.reference_train_config())?)
}

/// Scores every row on up to `D2C_THREADS` workers. Each row has its own
/// noise stream, so the result does not depend on the thread count.
pub fn score(cfg: &RunConfig, model: &DenoiserModel, data: &LabeledDataset) -> Result<ScoreTable> {
    let mc = cfg.score.mc();
    let sched = NoiseSchedule::from_kind(cfg.schedule.kind);
    let rows: Vec<usize> = (0..data.len()).collect();
    let chunk = rows.len().div_ceil(4 * thread_count()).max(1);
    let parts: Vec<d2c_core::Result<Vec<f64>>> = pool().install(|| {
        rows.par_chunks(chunk)
            .map(|c| score_rows(model, &sched, data, &mc, c))
            .collect()
    });
    let mut scores = Vec::with_capacity(rows.len());
    for p in parts {
        scores.extend(p?);
    }
    Ok(table_from_scores(model, data, mc, scores))
}

pub fn selection_spec(cfg: &RunConfig, data: &LabeledDataset) -> SelectionSpec {
    let n_y = data.class_counts().into_iter().min().unwrap_or(0);
    SelectionSpec {
        strategy: cfg.select.strategy,
        k: cfg.select.stride(n_y),
        budget: cfg.select.budget,
        seed: cfg.select.seed,
    }
}

pub fn select_subset(cfg: &RunConfig, data: &LabeledDataset, table: Option<&ScoreTable>) -> Result<SelectionResult> {
    Ok(select(&selection_spec(cfg, data), data, table)?)
}

pub fn attach(
    cfg: &RunConfig,
    data: &LabeledDataset,
    selection: &SelectionResult,
    table: Option<&ScoreTable>,
) -> Result<CondensedDataset> {
    Ok(build_condensed(data, selection, &cfg.attach, table)?)
}

pub fn train_condensed(cfg: &RunConfig, data: &CondensedDataset) -> Result<TrainOutput> {
    let init = DenoiserModel::new(
        data.model_dims(cfg.model.d_model, cfg.model.blocks, cfg.model.align_layer()),
        cfg.schedule.prediction,
        derive_seed(cfg.model.seed, CONDENSED_INIT),
    )?;
    Ok(train(&init, data, &cfg.train_config())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// One `[n_eval, D]` set per class, rounded to f32.
    pub per_class: Vec<Tensor>,
    pub warnings: Vec<String>,
}

/// Samples `n_eval` points per class with the conditioning branches the
/// model was trained with.
pub fn generate(
    cfg: &RunConfig,
    model: &DenoiserModel,
    data: &CondensedDataset,
    trained_p_null: Option<f64>,
) -> Result<Generated> {
    let sched = NoiseSchedule::from_kind(cfg.schedule.kind);
    let sc = |y: usize| SampleConfig {
        steps: cfg.eval.sample_steps,
        cfg_scale: cfg.eval.cfg_scale,
        seed: derive_seed(cfg.eval.seed, y as u64),
    };
    let mut out = Generated {
        per_class: Vec::new(),
        warnings: Vec::new(),
    };
    for y in 0..data.classes {
        let cond = ConditionBundle {
            label: cfg.train.class_branch.then_some(y),
            text: cfg.train.text_branch.then(|| data.text[y].condition()),
            null: false,
        };
        let s = sample(
            model,
            &sched,
            &cond,
            cfg.eval.n_eval,
            &sc(y),
            trained_p_null,
            data.dim(),
        )?;
        let mut x = s.samples;
        x.round_to(Precision::F32);
        out.per_class.push(x);
        for w in s.warnings {
            if !out.warnings.contains(&w) {
                out.warnings.push(w);
            }
        }
    }
    Ok(out)
}

pub fn held_per_class(held: &LabeledDataset) -> Vec<Tensor> {
    (0..held.classes)
        .map(|y| held.samples.select_rows(&held.class_indices(y)))
        .collect()
}

pub fn evaluate_generated(
    cfg: &RunConfig,
    generated: &[Tensor],
    held: &LabeledDataset,
    seed: u64,
) -> Result<MetricReport> {
    Ok(evaluate(
        generated,
        &held_per_class(held),
        cfg.eval.bandwidth,
        vec![seed],
    )?)
}

/// Model used for evaluation.
pub fn eval_model<'a>(cfg: &RunConfig, out: &'a TrainOutput) -> &'a DenoiserModel {
    if cfg.eval.use_ema {
        &out.ema
    } else {
        &out.model
    }
}
