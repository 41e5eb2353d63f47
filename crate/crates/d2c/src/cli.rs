//! Subcommands, one per pipeline stage plus `compare`.
//!
//! Every stage reads upstream artifacts from `--input` (default: the output
//! directory) and writes into `--out`, together with `<stage>.config.json`
//! (the effective config) and `<stage>.manifest.json` (xxh3 checksums of the
//! files read and written).

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};
use xxhash_rust::xxh3::xxh3_64;

use d2c_core::attach::CondensedDataset;
use d2c_core::datagen::LabeledDataset;
use d2c_core::eval::MetricReport;
use d2c_core::score::ScoreTable;
use d2c_core::select::{SelectionResult, Strategy};
use d2c_core::train::TrainLog;
use d2c_core::Tensor;

use crate::config::{Recipe, RunConfig};
use crate::error::{CliError, Result};
use crate::format::{self, FormatError};
use crate::harness::{ComparisonTable, Harness, Row};
use crate::pipeline;

pub const TRAIN: &str = "train.d2cd";
pub const HELD: &str = "held.d2cd";
pub const REFERENCE: &str = "reference.d2cm";
pub const REFERENCE_LOG: &str = "reference_log.csv";
pub const SCORES: &str = "scores.d2cs";
pub const SELECTION_CSV: &str = "selection.csv";
pub const SELECTION_JSON: &str = "selection.json";
pub const CONDENSED: &str = "condensed.d2cd";
pub const MODEL: &str = "model.d2cm";
pub const MODEL_EMA: &str = "model_ema.d2cm";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const TRAIN_META: &str = "train_meta.json";
pub const SAMPLES: &str = "samples.d2cd";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const COMPARISON: &str = "comparison.csv";

#[derive(Debug, Parser)]
#[command(name = "d2c", version, about = "Diffusion dataset condensation on toy data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training split and the held-out split
    GenData(Common),
    /// Train the reference model on the full training split
    TrainRef(TrainRefArgs),
    /// Score every training sample with the reference model
    Score(Common),
    /// Select a per-class subset
    Select(SelectArgs),
    /// Attach text embeddings and visual tokens to the selection
    Attach(Common),
    /// Train a denoiser on the condensed set
    Train(TrainArgs),
    /// Sample from the trained denoiser, per class
    Sample(SampleArgs),
    /// Compare generated samples with the held-out split
    Eval(Common),
    /// Run the comparison grid with a content-hash cache
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run config (JSON); missing fields take their defaults [default: none]
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run seed; every stage seed is derived from it as in `compare` [default: none, config seeds used as is]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "run")]
    pub out: PathBuf,
    /// Directory holding upstream artifacts [default: the output directory]
    #[arg(long, value_name = "DIR")]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainRefArgs {
    #[command(flatten)]
    pub common: Common,
    /// Reference training steps [default: config score.reference_steps]
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Selection strategy: interval, min, max, random, herding or kcenter [default: config select.strategy]
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    /// Interval stride [default: config select.k, else floor(n_y / budget)]
    #[arg(long)]
    pub k: Option<usize>,
    /// Samples per class [default: config select.budget]
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training steps [default: config train.steps]
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    /// Guidance scale, at least 1 [default: config eval.cfg_scale]
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    /// Sampling steps [default: config eval.sample_steps]
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run config (JSON); missing fields take their defaults [default: none]
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run only this seed [default: config eval.seeds]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "compare")]
    pub out: PathBuf,
    /// Cache directory [default: <out>/cache]
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
    /// Keep only grid entries with this strategy [default: all entries]
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    /// Sweep only this interval stride [default: config grid strides]
    #[arg(long)]
    pub k: Option<usize>,
    /// Run only this budget [default: config eval.budgets]
    #[arg(long)]
    pub budget: Option<usize>,
    /// Training steps per cell [default: config train.steps]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Guidance scale [default: config eval.cfg_scale]
    #[arg(long)]
    pub cfg_scale: Option<f64>,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
        format!("unknown strategy {s:?}; expected one of {}", names.join(", "))
    })
}

/// Files read and written by one stage.
#[derive(Debug, Default, Serialize)]
struct Manifest {
    stage: &'static str,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
}

struct Stage {
    name: &'static str,
    cfg: RunConfig,
    input: PathBuf,
    out: PathBuf,
    manifest: Manifest,
}

fn checksum(bytes: &[u8]) -> String {
    format!("{:016x}", xxh3_64(bytes))
}

impl Stage {
    fn open(name: &'static str, c: &Common, edit: impl FnOnce(&mut RunConfig)) -> Result<Stage> {
        let mut cfg = match &c.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        edit(&mut cfg);
        if let Some(s) = c.seed {
            cfg = cfg.seeded(s);
        }
        cfg.validate()?;
        std::fs::create_dir_all(&c.out).map_err(|e| CliError::io(&c.out, e))?;
        Ok(Stage {
            name,
            cfg,
            input: c.input.clone().unwrap_or_else(|| c.out.clone()),
            out: c.out.clone(),
            manifest: Manifest {
                stage: name,
                ..Manifest::default()
            },
        })
    }

    fn read<T>(&mut self, file: &str, decode: fn(&[u8]) -> std::result::Result<T, FormatError>) -> Result<T> {
        let path = self.input.join(file);
        if !path.is_file() {
            return Err(CliError::Missing(path));
        }
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        self.manifest.inputs.push((file.to_string(), checksum(&bytes)));
        decode(&bytes).map_err(|source| CliError::Artifact { path, source })
    }

    fn read_json<T: serde::de::DeserializeOwned>(&mut self, file: &str) -> Result<T> {
        self.read(file, |b| {
            serde_json::from_slice(b).map_err(|e| FormatError::Manifest(e.to_string()))
        })
    }

    fn has(&self, file: &str) -> bool {
        self.input.join(file).is_file()
    }

    fn write(&mut self, file: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(file);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.manifest.outputs.push((file.to_string(), checksum(bytes)));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, file: &str, v: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v).expect("value serializes");
        s.push('\n');
        self.write(file, s.as_bytes())
    }

    fn finish(mut self) -> Result<()> {
        let cfg = self.cfg.to_json();
        self.write(&format!("{}.config.json", self.name), cfg.as_bytes())?;
        let m = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        let path = self.out.join(format!("{}.manifest.json", self.name));
        std::fs::write(&path, m).map_err(|e| CliError::io(&path, e))
    }
}

fn log_csv(log: &TrainLog) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "L_diff", "L_proj", "L_total", "grad_norm"])
        .expect("in-memory write");
    for r in &log.rows {
        w.write_record([
            r.step.to_string(),
            r.l_diff.to_string(),
            r.l_proj.to_string(),
            r.l_total.to_string(),
            r.grad_norm.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

/// `class,global_index,rank_in_class,score`; the rank is the position in the
/// class's ascending score order and is empty without scores.
pub fn selection_csv(sel: &SelectionResult, table: Option<&ScoreTable>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "global_index", "rank_in_class", "score"])
        .expect("in-memory write");
    for cs in &sel.per_class {
        let order: Option<Vec<usize>> = table.map(|t| {
            let mut o: Vec<usize> = (0..t.len()).filter(|&i| t.labels[i] == cs.class).collect();
            o.sort_by(|&a, &b| {
                t.scores[a]
                    .total_cmp(&t.scores[b])
                    .then(t.indices[a].cmp(&t.indices[b]))
            });
            o.into_iter().map(|i| t.indices[i]).collect()
        });
        for &g in &cs.indices {
            let (rank, score) = match (table, &order) {
                (Some(t), Some(o)) => {
                    let r = o.iter().position(|&x| x == g);
                    let s = t.indices.iter().position(|&x| x == g).map(|i| t.scores[i]);
                    (opt(r), opt(s))
                }
                _ => (String::new(), String::new()),
            };
            w.write_record([cs.class.to_string(), g.to_string(), rank, score])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Serialize, serde::Deserialize)]
struct TrainMeta {
    steps: usize,
    p_null: f64,
    alignment: bool,
    text_branch: bool,
    class_branch: bool,
}

/// Recipe matching the conditioning flags, if any does.
pub fn recipe_of(alignment: bool, text: bool) -> Recipe {
    match (alignment, text) {
        (true, true) => Recipe::Full,
        (false, true) => Recipe::NoAlign,
        (true, false) => Recipe::NoText,
        (false, false) => Recipe::Plain,
    }
}

/// Generated sets are stored as datasets with zero difficulty.
fn generated_dataset(cfg: &RunConfig, per_class: &[Tensor], class_names: &[String]) -> Result<LabeledDataset> {
    let dim = per_class.first().map_or(0, |t| t.cols());
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (y, t) in per_class.iter().enumerate() {
        data.extend_from_slice(t.data());
        labels.extend(std::iter::repeat_n(y, t.rows()));
    }
    let n = labels.len();
    let d = LabeledDataset {
        kind: cfg.data.kind,
        samples: Tensor::new(vec![n, dim], data)?,
        labels,
        classes: per_class.len(),
        difficulty: vec![0.0; n],
        class_names: class_names.to_vec(),
        seed: cfg.eval.seed,
    };
    d.validate()?;
    Ok(d)
}

fn per_class(d: &LabeledDataset) -> Vec<Tensor> {
    (0..d.classes)
        .map(|y| d.samples.select_rows(&d.class_indices(y)))
        .collect()
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let mut st = Stage::open("gen-data", &c, |_| {})?;
            let sp = pipeline::generate_data(&st.cfg)?;
            st.write(TRAIN, &format::encode_dataset(&sp.train)?)?;
            st.write(HELD, &format::encode_dataset(&sp.held)?)?;
            st.finish()
        }
        Command::TrainRef(a) => {
            let mut st = Stage::open("train-ref", &a.common, |c| {
                if let Some(s) = a.steps {
                    c.score.reference_steps = s;
                }
            })?;
            let data = st.read(TRAIN, format::decode_dataset)?;
            let out = pipeline::train_reference(&st.cfg, &data)?;
            st.write(REFERENCE, &format::encode_model(&out.ema)?)?;
            st.write(REFERENCE_LOG, log_csv(&out.log).as_bytes())?;
            st.finish()
        }
        Command::Score(c) => {
            let mut st = Stage::open("score", &c, |_| {})?;
            let data = st.read(TRAIN, format::decode_dataset)?;
            let model = st.read(REFERENCE, format::decode_model)?;
            let table = pipeline::score(&st.cfg, &model, &data)?;
            for w in &table.warnings {
                eprintln!("warning: {w}");
            }
            st.write(SCORES, &format::encode_scores(&table))?;
            st.finish()
        }
        Command::Select(a) => {
            let mut st = Stage::open("select", &a.common, |c| {
                if let Some(s) = a.strategy {
                    c.select.strategy = s;
                }
                if a.k.is_some() {
                    c.select.k = a.k;
                }
                if let Some(b) = a.budget {
                    c.select.budget = b;
                }
            })?;
            let data = st.read(TRAIN, format::decode_dataset)?;
            let table = if st.cfg.select.strategy.needs_scores() || st.has(SCORES) {
                Some(st.read(SCORES, format::decode_scores)?)
            } else {
                None
            };
            let sel = pipeline::select_subset(&st.cfg, &data, table.as_ref())?;
            st.write(SELECTION_CSV, selection_csv(&sel, table.as_ref()).as_bytes())?;
            st.write_json(SELECTION_JSON, &sel)?;
            st.finish()
        }
        Command::Attach(c) => {
            let mut st = Stage::open("attach", &c, |_| {})?;
            let data = st.read(TRAIN, format::decode_dataset)?;
            let sel: SelectionResult = st.read_json(SELECTION_JSON)?;
            sel.validate(&data.labels)?;
            let table = if st.has(SCORES) {
                Some(st.read(SCORES, format::decode_scores)?)
            } else {
                None
            };
            let cd = pipeline::attach(&st.cfg, &data, &sel, table.as_ref())?;
            st.write(CONDENSED, &format::encode_condensed(&cd)?)?;
            st.finish()
        }
        Command::Train(a) => {
            let mut st = Stage::open("train", &a.common, |c| {
                if let Some(s) = a.steps {
                    c.train.steps = s;
                }
            })?;
            let cd: CondensedDataset = st.read(CONDENSED, format::decode_condensed)?;
            let out = pipeline::train_condensed(&st.cfg, &cd)?;
            st.write(MODEL, &format::encode_model(&out.model)?)?;
            st.write(MODEL_EMA, &format::encode_model(&out.ema)?)?;
            st.write(TRAIN_LOG, log_csv(&out.log).as_bytes())?;
            let t = &st.cfg.train;
            let meta = TrainMeta {
                steps: t.steps,
                p_null: t.p_null,
                alignment: t.alignment,
                text_branch: t.text_branch,
                class_branch: t.class_branch,
            };
            st.write_json(TRAIN_META, &meta)?;
            st.finish()
        }
        Command::Sample(a) => {
            let mut st = Stage::open("sample", &a.common, |c| {
                if let Some(s) = a.cfg_scale {
                    c.eval.cfg_scale = s;
                }
                if let Some(s) = a.steps {
                    c.eval.sample_steps = s;
                }
            })?;
            let cd = st.read(CONDENSED, format::decode_condensed)?;
            let model = st.read(
                if st.cfg.eval.use_ema { MODEL_EMA } else { MODEL },
                format::decode_model,
            )?;
            let meta: TrainMeta = st.read_json(TRAIN_META)?;
            // Sample with the conditioning the model was trained with.
            st.cfg.train.alignment = meta.alignment;
            st.cfg.train.text_branch = meta.text_branch;
            st.cfg.train.class_branch = meta.class_branch;
            let g = pipeline::generate(&st.cfg, &model, &cd, Some(meta.p_null))?;
            for w in &g.warnings {
                eprintln!("warning: {w}");
            }
            let d = generated_dataset(&st.cfg, &g.per_class, &cd.class_names)?;
            st.write(SAMPLES, &format::encode_dataset(&d)?)?;
            st.finish()
        }
        Command::Eval(c) => {
            let seed = c.seed.unwrap_or(0);
            let mut st = Stage::open("eval", &c, |_| {})?;
            let gen = st.read(SAMPLES, format::decode_dataset)?;
            let held = st.read(HELD, format::decode_dataset)?;
            let sel: SelectionResult = st.read_json(SELECTION_JSON)?;
            let meta: TrainMeta = st.read_json(TRAIN_META)?;
            let rep: MetricReport = pipeline::evaluate_generated(&st.cfg, &per_class(&gen), &held, seed)?;
            let row = Row {
                strategy: sel.spec.strategy,
                recipe: recipe_of(meta.alignment, meta.text_branch),
                budget: sel.spec.budget,
                k: (sel.spec.strategy == Strategy::Interval).then_some(sel.spec.k),
                seed,
                step: meta.steps,
                frechet: Some(rep.frechet),
                mean_class_frechet: Some(rep.mean_class_frechet),
                mmd: Some(rep.mmd),
                status: "ok".into(),
                error: String::new(),
            };
            let table = ComparisonTable {
                rows: vec![row],
                logs: vec![Vec::new()],
            };
            st.write_json(METRICS_JSON, &rep)?;
            st.write(METRICS_CSV, table.to_csv().as_bytes())?;
            st.finish()
        }
        Command::Compare(a) => compare(a),
    }
}

fn compare(a: CompareArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.eval.seeds = vec![s];
    }
    if let Some(b) = a.budget {
        cfg.eval.budgets = vec![b];
    }
    if let Some(s) = a.strategy {
        cfg.eval.grid.retain(|e| e.strategy == s);
    }
    if let Some(k) = a.k {
        for e in cfg.eval.grid.iter_mut().filter(|e| e.strategy == Strategy::Interval) {
            e.k = Some(vec![k]);
        }
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.cfg_scale {
        cfg.eval.cfg_scale = s;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let harness = Harness::new(Some(a.cache.clone().unwrap_or_else(|| a.out.join("cache"))))?;
    let table = harness.run_comparison(&cfg)?;
    let write = |p: &Path, s: &str| std::fs::write(p, s).map_err(|e| CliError::io(p, e));
    write(&a.out.join("compare.config.json"), &cfg.to_json())?;
    write(&a.out.join(COMPARISON), &table.to_csv())?;
    let plot = a.out.join("plot");
    std::fs::create_dir_all(&plot).map_err(|e| CliError::io(&plot, e))?;
    for (name, body) in table.plot_data() {
        write(&plot.join(name), &body)?;
    }
    let failed = table.rows.iter().filter(|r| r.status != "ok").count();
    eprintln!(
        "{} rows ({failed} failed); {}",
        table.rows.len(),
        harness.stats.summary()
    );
    Ok(())
}
