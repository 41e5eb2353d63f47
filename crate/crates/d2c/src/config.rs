//! Run configuration: one JSON document with sections
//! `data, schedule, model, score, select, attach, train, eval`.
//!
//! Every field has a default and unknown keys are rejected. Errors carry
//! the JSON pointer of the offending field.

use serde::{Deserialize, Serialize};
use std::path::Path;

use d2c_core::attach::EncoderConfig;
use d2c_core::datagen::DatasetKind;
use d2c_core::model::{ModelDims, PredictionKind};
use d2c_core::schedule::ScheduleKind;
use d2c_core::score::McConfig;
use d2c_core::select::Strategy;
use d2c_core::tensor::AdamConfig;
use d2c_core::train::{check_pairing, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DatasetKind,
    pub classes: usize,
    /// Training samples per class; the same number again is held out.
    pub n_per_class: usize,
    pub clutter_max: f64,
    /// Shift jitter for `shapes8x8`.
    pub jitter: bool,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DatasetKind::Shapes8x8,
            classes: 8,
            n_per_class: 100,
            clutter_max: 0.5,
            jitter: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub prediction: PredictionKind,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: ScheduleKind::VpContinuous,
            prediction: PredictionKind::Epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub blocks: usize,
    /// 1-based; `null` means the middle block.
    pub align_layer: Option<usize>,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 32,
            blocks: 4,
            align_layer: None,
            seed: 0,
        }
    }
}

impl ModelSection {
    pub fn align_layer(&self) -> usize {
        self.align_layer.unwrap_or((self.blocks / 2).max(1))
    }
}

/// Scoring and the reference model it needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreSection {
    pub t_strata: usize,
    pub eps_draws: usize,
    pub base_seed: u64,
    pub reference_steps: usize,
    pub reference_batch: usize,
    pub reference_lr: f64,
    /// EMA decay of the reference run; its EMA weights do the scoring.
    pub reference_ema_decay: f64,
}

impl Default for ScoreSection {
    fn default() -> Self {
        let mc = McConfig::default();
        ScoreSection {
            t_strata: mc.t_strata,
            eps_draws: mc.eps_draws,
            base_seed: mc.base_seed,
            reference_steps: 2000,
            reference_batch: 64,
            reference_lr: 1e-3,
            reference_ema_decay: 0.99,
        }
    }
}

impl ScoreSection {
    pub fn mc(&self) -> McConfig {
        McConfig {
            t_strata: self.t_strata,
            eps_draws: self.eps_draws,
            base_seed: self.base_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectSection {
    pub strategy: Strategy,
    /// Interval stride; `null` means `floor(n_y / budget)`.
    pub k: Option<usize>,
    pub budget: usize,
    pub seed: u64,
}

impl Default for SelectSection {
    fn default() -> Self {
        SelectSection {
            strategy: Strategy::Interval,
            k: None,
            budget: 10,
            seed: 0,
        }
    }
}

impl SelectSection {
    /// Stride used for a class of `n_y` samples.
    pub fn stride(&self, n_y: usize) -> usize {
        self.k.unwrap_or((n_y / self.budget.max(1)).max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lambda: f64,
    pub p_null: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub alignment: bool,
    pub text_branch: bool,
    pub class_branch: bool,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.steps,
            batch: t.batch,
            lambda: t.lambda,
            p_null: t.p_null,
            ema_decay: t.ema_decay,
            seed: t.seed,
            alignment: t.alignment,
            text_branch: t.text_branch,
            class_branch: t.class_branch,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
        }
    }
}

/// Which recipe a comparison cell trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    /// Text and class conditioning with the alignment loss.
    Full,
    /// Full conditioning, alignment off.
    NoAlign,
    /// Class conditioning with alignment, no text branch.
    NoText,
    /// Class conditioning only, no alignment.
    Plain,
}

impl Recipe {
    pub fn name(self) -> &'static str {
        match self {
            Recipe::Full => "full",
            Recipe::NoAlign => "no-align",
            Recipe::NoText => "no-text",
            Recipe::Plain => "plain",
        }
    }

    pub fn apply(self, t: &mut TrainSection) {
        match self {
            Recipe::Full => {}
            Recipe::NoAlign => t.alignment = false,
            Recipe::NoText => t.text_branch = false,
            Recipe::Plain => {
                t.alignment = false;
                t.text_branch = false;
            }
        }
    }
}

/// One row family of the comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub strategy: Strategy,
    pub recipe: Recipe,
    /// Interval strides to sweep; ignored for other strategies. `null` or
    /// missing means the configured default stride.
    #[serde(default)]
    pub k: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Generated samples per class.
    pub n_eval: usize,
    pub sample_steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    /// Evaluate the EMA weights (otherwise the raw weights).
    pub use_ema: bool,
    /// MMD bandwidth; `null` means the median heuristic on held-out data.
    pub bandwidth: Option<f64>,
    pub seeds: Vec<u64>,
    pub budgets: Vec<usize>,
    pub grid: Vec<GridEntry>,
}

impl Default for EvalSection {
    fn default() -> Self {
        use Recipe::*;
        use Strategy::*;
        let e = |strategy, recipe| GridEntry {
            strategy,
            recipe,
            k: None,
        };
        EvalSection {
            n_eval: 500,
            sample_steps: 100,
            cfg_scale: 1.5,
            seed: 0,
            use_ema: true,
            bandwidth: None,
            seeds: vec![0, 1, 2],
            budgets: vec![10],
            grid: vec![
                e(Interval, Full),
                e(Random, Plain),
                e(Herding, Plain),
                e(Kcenter, Plain),
                e(Min, Full),
                e(Max, Full),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub score: ScoreSection,
    pub select: SelectSection,
    pub attach: EncoderConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let pointer = if path == "." {
                String::from("/")
            } else {
                format!("/{}", path.replace('.', "/"))
            };
            CliError::Config {
                pointer,
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| CliError::Missing(path.to_path_buf()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |pointer: &str, message: String| {
            Err(CliError::Config {
                pointer: pointer.into(),
                message,
            })
        };
        if self.data.classes < 2 {
            return bad("/data/classes", "need at least 2 classes".into());
        }
        if self.data.n_per_class < 4 {
            return bad("/data/n_per_class", "need at least 4 samples per class".into());
        }
        if let Err(e) = check_pairing(self.schedule.prediction, self.schedule.kind) {
            return bad("/schedule/prediction", e.to_string());
        }
        if self.model.d_model == 0 || self.model.blocks == 0 {
            return bad("/model", "d_model and blocks must be positive".into());
        }
        if let Err(e) = self.dims().validate() {
            return bad("/model/align_layer", e.to_string());
        }
        if let Err(e) = self.score.mc().validate() {
            return bad("/score", e.to_string());
        }
        if self.select.budget == 0 {
            return bad("/select/budget", "budget must be >= 1".into());
        }
        if self.select.k == Some(0) {
            return bad("/select/k", "k must be >= 1".into());
        }
        if let Err(e) = self.attach.validate() {
            return bad("/attach", e.to_string());
        }
        let dim = self.sample_dim();
        if dim % self.attach.tokens != 0 {
            return bad(
                "/attach/tokens",
                format!("sample dim {dim} is not divisible by {} tokens", self.attach.tokens),
            );
        }
        if let Err(e) = self.train_config().validate() {
            return bad("/train", e.to_string());
        }
        if let Err(e) = self.reference_train_config().validate() {
            return bad("/score", e.to_string());
        }
        if self.eval.n_eval == 0 || self.eval.sample_steps == 0 {
            return bad("/eval", "n_eval and sample_steps must be positive".into());
        }
        if !(self.eval.cfg_scale >= 1.0) {
            return bad("/eval/cfg_scale", "cfg_scale must be >= 1".into());
        }
        if self.eval.seeds.is_empty() || self.eval.budgets.is_empty() {
            return bad("/eval", "seeds and budgets must be non-empty".into());
        }
        Ok(())
    }

    pub fn sample_dim(&self) -> usize {
        match self.data.kind {
            DatasetKind::Gauss2d => 2,
            DatasetKind::Shapes8x8 => d2c_core::datagen::SHAPE_DIM,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            classes: self.data.classes,
            sample_dim: self.sample_dim(),
            d_model: self.model.d_model,
            d_text: self.attach.d_text,
            d_feat: self.attach.d_feat,
            blocks: self.model.blocks,
            tokens: self.attach.tokens,
            align_layer: self.model.align_layer(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch: t.batch,
            lambda: t.lambda,
            prediction: self.schedule.prediction,
            schedule: self.schedule.kind,
            p_null: t.p_null,
            ema_decay: t.ema_decay,
            seed: t.seed,
            alignment: t.alignment,
            text_branch: t.text_branch,
            class_branch: t.class_branch,
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
        }
    }

    /// Training settings for the reference model: class conditioning only,
    /// no alignment, no condition dropout.
    pub fn reference_train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.score.reference_steps,
            batch: self.score.reference_batch,
            p_null: 0.0,
            ema_decay: self.score.reference_ema_decay,
            alignment: false,
            text_branch: false,
            class_branch: true,
            adam: AdamConfig {
                lr: self.score.reference_lr,
                ..self.train_config().adam
            },
            ..self.train_config()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_reports_pointer() {
        let e = RunConfig::from_json(r#"{"train": {"stepz": 3}}"#).unwrap_err();
        match e {
            CliError::Config { pointer, .. } => assert_eq!(pointer, "/train/stepz"),
            other => panic!("{other:?}"),
        }
        let e = RunConfig::from_json(r#"{"select": {"budget": "x"}}"#).unwrap_err();
        match e {
            CliError::Config { pointer, .. } => assert_eq!(pointer, "/select/budget"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        let e = RunConfig::from_json(r#"{"schedule": {"kind": "linear-flow"}}"#).unwrap_err();
        assert!(matches!(e, CliError::Config { .. }));
        let e = RunConfig::from_json(r#"{"attach": {"tokens": 3}}"#).unwrap_err();
        assert!(matches!(e, CliError::Config { ref pointer, .. } if pointer == "/attach/tokens"));
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
