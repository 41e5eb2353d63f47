//! Comparison harness: a factorial grid of (seed, budget, strategy, recipe,
//! stride) cells, each running select, attach, train, sample and evaluate.
//!
//! Cache layout under the cache directory, one file per intermediate, named
//! by the xxh3 of its inputs' content:
//!
//! ```text
//! ref-<hash>.d2cm     reference model (EMA weights); hash of data bytes and reference settings
//! scores-<hash>.d2cs  score table; hash of reference model bytes and MC settings
//! cell-<hash>.json    cell metrics and training log; hash of inputs and cell config
//! ```
//!
//! A rerun of a completed grid loads everything from the cache and trains
//! nothing. Failed cells are reported as rows and are not cached.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use xxhash_rust::xxh3::xxh3_64;

use d2c_core::datagen::LabeledDataset;
use d2c_core::model::DenoiserModel;
use d2c_core::score::ScoreTable;
use d2c_core::select::Strategy;

use crate::config::{Recipe, RunConfig};
use crate::error::{CliError, Result};
use crate::format;
use crate::pipeline::{self, Splits};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    pub budget: usize,
    pub strategy: Strategy,
    pub recipe: Recipe,
    /// Explicit interval stride; `None` uses the configured default.
    pub k: Option<usize>,
}

impl Cell {
    /// The run config this cell trains with.
    pub fn config(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.seeded(self.seed);
        c.select.strategy = self.strategy;
        c.select.budget = self.budget;
        c.select.k = if self.strategy == Strategy::Interval {
            self.k.or(base.select.k)
        } else {
            None
        };
        self.recipe.apply(&mut c.train);
        c
    }
}

/// Expands the configured grid: seeds, then budgets, then grid entries,
/// then strides.
pub fn cells(cfg: &RunConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &seed in &cfg.eval.seeds {
        for &budget in &cfg.eval.budgets {
            for e in &cfg.eval.grid {
                let ks: Vec<Option<usize>> = match (&e.k, e.strategy) {
                    (Some(ks), Strategy::Interval) => ks.iter().map(|&k| Some(k)).collect(),
                    _ => vec![None],
                };
                for k in ks {
                    out.push(Cell {
                        seed,
                        budget,
                        strategy: e.strategy,
                        recipe: e.recipe,
                        k,
                    });
                }
            }
        }
    }
    out
}

/// Largest stride for which interval selection of `m` out of `n_y` fits.
pub fn max_feasible_k(n_y: usize, m: usize) -> usize {
    if m <= 1 {
        n_y.max(1)
    } else {
        (n_y.saturating_sub(1) / (m - 1)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub strategy: Strategy,
    pub recipe: Recipe,
    pub budget: usize,
    /// Effective interval stride; empty for other strategies.
    pub k: Option<usize>,
    pub seed: u64,
    /// Training steps of the evaluated model.
    pub step: usize,
    pub frechet: Option<f64>,
    pub mean_class_frechet: Option<f64>,
    pub mmd: Option<f64>,
    pub status: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellRecord {
    row: Row,
    /// `(step, L_diff, L_proj, L_total, grad_norm)`
    log: Vec<(usize, f64, f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComparisonTable {
    pub rows: Vec<Row>,
    /// Training curves of successful cells, aligned with `rows`.
    pub logs: Vec<Vec<(usize, f64, f64, f64, f64)>>,
}

pub const TABLE_HEADER: [&str; 11] = [
    "strategy",
    "recipe",
    "budget",
    "k",
    "seed",
    "step",
    "frechet",
    "mean_class_frechet",
    "mmd",
    "status",
    "error",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TABLE_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.strategy.name().to_string(),
                r.recipe.name().to_string(),
                r.budget.to_string(),
                opt(r.k),
                r.seed.to_string(),
                r.step.to_string(),
                opt(r.frechet),
                opt(r.mean_class_frechet),
                opt(r.mmd),
                r.status.clone(),
                r.error.clone(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    /// Mean per-class Fréchet distance over seeds of the successful rows
    /// matching the filter, or `None` when there are none.
    pub fn mean_over_seeds(&self, f: impl Fn(&Row) -> bool) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| f(r))
            .filter_map(|r| r.mean_class_frechet)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Per-figure CSV files for external plotting: the stride sweep, the
    /// strategy means and training curves.
    pub fn plot_data(&self) -> Vec<(&'static str, String)> {
        let mut groups: Vec<(Strategy, Recipe, usize, Option<usize>)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.status == "ok") {
            let key = (r.strategy, r.recipe, r.budget, r.k);
            if !groups.contains(&key) {
                groups.push(key);
            }
        }
        let mean = |g: &(Strategy, Recipe, usize, Option<usize>)| {
            self.mean_over_seeds(|r| (r.strategy, r.recipe, r.budget, r.k) == *g)
                .unwrap_or(f64::NAN)
        };
        let mut k_sweep = String::from("budget,k,mean_class_frechet\n");
        let mut strategies = String::from("strategy,recipe,budget,k,mean_class_frechet\n");
        for g in &groups {
            if g.0 == Strategy::Interval && g.1 == Recipe::Full {
                k_sweep += &format!("{},{},{}\n", g.2, opt(g.3), mean(g));
            }
            strategies += &format!("{},{},{},{},{}\n", g.0.name(), g.1.name(), g.2, opt(g.3), mean(g));
        }
        let mut curves = String::from("strategy,recipe,budget,k,seed,step,L_diff,L_proj,L_total\n");
        for (r, log) in self.rows.iter().zip(&self.logs) {
            for &(step, d, p, t, _) in log {
                curves += &format!(
                    "{},{},{},{},{},{step},{d},{p},{t}\n",
                    r.strategy.name(),
                    r.recipe.name(),
                    r.budget,
                    opt(r.k),
                    r.seed
                );
            }
        }
        vec![
            ("k_sweep.csv", k_sweep),
            ("strategies.csv", strategies),
            ("train_curves.csv", curves),
        ]
    }
}

#[derive(Debug, Default)]
pub struct CacheStats {
    pub hits: AtomicUsize,
    pub reference_trainings: AtomicUsize,
    pub scorings: AtomicUsize,
    pub cell_trainings: AtomicUsize,
}

impl CacheStats {
    pub fn trainings(&self) -> usize {
        self.reference_trainings.load(Ordering::Relaxed) + self.cell_trainings.load(Ordering::Relaxed)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn summary(&self) -> String {
        format!(
            "cache hits={} reference_trainings={} scorings={} cell_trainings={}",
            self.hits(),
            self.reference_trainings.load(Ordering::Relaxed),
            self.scorings.load(Ordering::Relaxed),
            self.cell_trainings.load(Ordering::Relaxed)
        )
    }
}

fn key(parts: &[&[u8]]) -> String {
    let mut buf = Vec::new();
    for p in parts {
        buf.extend_from_slice(&(p.len() as u64).to_le_bytes());
        buf.extend_from_slice(p);
    }
    format!("{:016x}", xxh3_64(&buf))
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("config serializes")
}

pub struct Harness {
    pub cache_dir: Option<PathBuf>,
    pub stats: CacheStats,
}

/// Per-seed shared inputs: data splits and, when any cell needs them, the
/// score table.
struct SeedInputs {
    splits: Splits,
    scores: Option<(ScoreTable, String)>,
    data_hash: String,
}

impl Harness {
    pub fn new(cache_dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &cache_dir {
            std::fs::create_dir_all(d).map_err(|e| CliError::io(d, e))?;
        }
        Ok(Harness {
            cache_dir,
            stats: CacheStats::default(),
        })
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(name))
    }

    /// Loads a cached artifact; unreadable entries count as misses.
    fn cached<T>(&self, name: &str, read: impl Fn(&Path) -> Option<T>) -> Option<T> {
        let p = self.path(name)?;
        let v = read(&p)?;
        self.stats.hits.fetch_add(1, Ordering::Relaxed);
        Some(v)
    }

    fn store(&self, name: &str, bytes: &[u8]) -> Result<()> {
        if let Some(p) = self.path(name) {
            let tmp = p.with_extension("tmp");
            std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
            std::fs::rename(&tmp, &p).map_err(|e| CliError::io(&p, e))?;
        }
        Ok(())
    }

    pub fn reference(
        &self,
        cfg: &RunConfig,
        data: &LabeledDataset,
        data_hash: &str,
    ) -> Result<(DenoiserModel, String)> {
        let spec = (&cfg.model, cfg.dims(), cfg.reference_train_config());
        let name = format!("ref-{}.d2cm", key(&[data_hash.as_bytes(), &json(&spec)]));
        let model = match self.cached(&name, |p| format::read_model(p).ok()) {
            Some(m) => m,
            None => {
                self.stats.reference_trainings.fetch_add(1, Ordering::Relaxed);
                let m = pipeline::train_reference(cfg, data)?.ema;
                self.store(&name, &format::encode_model(&m)?)?;
                m
            }
        };
        let model_hash = format!("{:016x}", xxh3_64(&format::encode_model(&model)?));
        Ok((model, model_hash))
    }

    pub fn scores(&self, cfg: &RunConfig, data: &LabeledDataset, data_hash: &str) -> Result<(ScoreTable, String)> {
        let (model, model_hash) = self.reference(cfg, data, data_hash)?;
        let name = format!(
            "scores-{}.d2cs",
            key(&[model_hash.as_bytes(), data_hash.as_bytes(), &json(&cfg.score.mc())])
        );
        let table = match self.cached(&name, |p| format::read_scores(p).ok()) {
            Some(t) => t,
            None => {
                self.stats.scorings.fetch_add(1, Ordering::Relaxed);
                let t = pipeline::score(cfg, &model, data)?;
                self.store(&name, &format::encode_scores(&t))?;
                t
            }
        };
        let h = format!("{:016x}", xxh3_64(&format::encode_scores(&table)));
        Ok((table, h))
    }

    fn seed_inputs(&self, base: &RunConfig, seed: u64, need_scores: bool) -> Result<SeedInputs> {
        let cfg = base.seeded(seed);
        let splits = pipeline::generate_data(&cfg)?;
        let mut bytes = format::encode_dataset(&splits.train)?;
        bytes.extend(format::encode_dataset(&splits.held)?);
        let data_hash = format!("{:016x}", xxh3_64(&bytes));
        let scores = if need_scores {
            Some(self.scores(&cfg, &splits.train, &data_hash)?)
        } else {
            None
        };
        Ok(SeedInputs {
            splits,
            scores,
            data_hash,
        })
    }

    fn run_cell(&self, base: &RunConfig, cell: &Cell, inputs: &SeedInputs) -> Result<CellRecord> {
        let cfg = cell.config(base);
        let spec = pipeline::selection_spec(&cfg, &inputs.splits.train);
        let table = inputs.scores.as_ref().map(|(t, _)| t);
        let scores_hash = inputs.scores.as_ref().map_or("", |(_, h)| h.as_str());
        let cell_cfg = (&cfg.model, &cfg.attach, cfg.train_config(), cfg.eval_cell_json());
        let name = format!(
            "cell-{}.json",
            key(&[
                inputs.data_hash.as_bytes(),
                scores_hash.as_bytes(),
                &json(&spec),
                &json(&cell_cfg)
            ])
        );
        if let Some(rec) = self.cached(&name, |p| {
            serde_json::from_slice::<CellRecord>(&std::fs::read(p).ok()?).ok()
        }) {
            return Ok(rec);
        }
        let sel = pipeline::select_subset(&cfg, &inputs.splits.train, table)?;
        let cd = pipeline::attach(&cfg, &inputs.splits.train, &sel, table)?;
        self.stats.cell_trainings.fetch_add(1, Ordering::Relaxed);
        let out = pipeline::train_condensed(&cfg, &cd)?;
        let g = pipeline::generate(&cfg, pipeline::eval_model(&cfg, &out), &cd, Some(cfg.train.p_null))?;
        let rep = pipeline::evaluate_generated(&cfg, &g.per_class, &inputs.splits.held, cell.seed)?;
        let rec = CellRecord {
            row: Row {
                strategy: cell.strategy,
                recipe: cell.recipe,
                budget: cell.budget,
                k: (cell.strategy == Strategy::Interval).then_some(spec.k),
                seed: cell.seed,
                step: cfg.train.steps,
                frechet: Some(rep.frechet),
                mean_class_frechet: Some(rep.mean_class_frechet),
                mmd: Some(rep.mmd),
                status: "ok".into(),
                error: String::new(),
            },
            log: out
                .log
                .rows
                .iter()
                .map(|r| (r.step, r.l_diff, r.l_proj, r.l_total, r.grad_norm))
                .collect(),
        };
        self.store(&name, &serde_json::to_vec(&rec).expect("record serializes"))?;
        Ok(rec)
    }

    fn failure(cell: &Cell, base: &RunConfig, e: &CliError) -> CellRecord {
        CellRecord {
            row: Row {
                strategy: cell.strategy,
                recipe: cell.recipe,
                budget: cell.budget,
                k: cell.k,
                seed: cell.seed,
                step: base.train.steps,
                frechet: None,
                mean_class_frechet: None,
                mmd: None,
                status: "failed".into(),
                error: e.to_string(),
            },
            log: Vec::new(),
        }
    }

    /// Runs every cell of the configured grid. Cell failures become rows;
    /// only failures of shared per-seed inputs abort the run.
    pub fn run_comparison(&self, base: &RunConfig) -> Result<ComparisonTable> {
        base.validate()?;
        let all = cells(base);
        let need_scores = base.eval.grid.iter().any(|e| e.strategy.needs_scores());
        let mut table = ComparisonTable::default();
        for &seed in &base.eval.seeds {
            let inputs = self.seed_inputs(base, seed, need_scores)?;
            let mine: Vec<&Cell> = all.iter().filter(|c| c.seed == seed).collect();
            let recs: Vec<CellRecord> = pipeline::pool().install(|| {
                mine.par_iter()
                    .map(|c| {
                        self.run_cell(base, c, &inputs)
                            .unwrap_or_else(|e| Self::failure(c, base, &e))
                    })
                    .collect()
            });
            for r in recs {
                table.rows.push(r.row);
                table.logs.push(r.log);
            }
        }
        Ok(table)
    }
}

impl RunConfig {
    /// Evaluation settings that affect a single cell's result.
    fn eval_cell_json(&self) -> serde_json::Value {
        let e = &self.eval;
        serde_json::json!({
            "n_eval": e.n_eval,
            "sample_steps": e.sample_steps,
            "cfg_scale": e.cfg_scale,
            "seed": e.seed,
            "use_ema": e.use_ema,
            "bandwidth": e.bandwidth,
        })
    }
}
