//! Attach phase: per-class text tokens, per-sample visual tokens and the
//! enriched condensed dataset.
//!
//! Both encoders are hash-seeded surrogates. They are pure functions of
//! their inputs and seed, accumulate in f64 and store f32-representable
//! values, so artifacts round-trip bit-exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::datagen::{DatasetKind, LabeledDataset};
use crate::error::{invalid, Error, Result};
use crate::model::{ConditionBundle, ModelDims, TextCondition};
use crate::rng;
use crate::score::ScoreTable;
use crate::select::{SelectionResult, SelectionSpec};
use crate::tensor::Tensor;

pub const PROMPT_PREFIX: &str = "a photo of a";

/// Encoder sizes at paper scale, kept for provenance only.
pub const PAPER_TEXT_LEN: usize = 16;
pub const PAPER_D_TEXT: usize = 2048;
pub const PAPER_TOKENS: usize = 256;
pub const PAPER_D_FEAT: usize = 768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Padded prompt length `L`.
    pub text_len: usize,
    pub d_text: usize,
    pub d_feat: usize,
    /// Visual tokens per sample `h`.
    pub tokens: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            text_len: 8,
            d_text: 32,
            d_feat: 16,
            tokens: 4,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_len == 0 || self.d_text == 0 || self.d_feat == 0 || self.tokens == 0 {
            return Err(invalid("encoder sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub class: usize,
    pub prompt: String,
    /// `[L, d_text]`; padding rows are zero.
    pub tokens: Tensor,
    pub mask: Vec<bool>,
}

impl TextEmbedding {
    pub fn condition(&self) -> TextCondition<'_> {
        TextCondition {
            tokens: &self.tokens,
            mask: &self.mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualTokens {
    /// Row index in the source dataset.
    pub sample: usize,
    /// `[h, d_feat]`, unit rows.
    pub tokens: Tensor,
}

pub fn prompt_for(class_name: &str) -> String {
    format!("{PROMPT_PREFIX} {class_name}")
}

fn unit_f32(mut v: Vec<f64>) -> Vec<f64> {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n < 1e-12 {
        v.iter_mut().for_each(|x| *x = 0.0);
        v[0] = 1.0;
    } else {
        v.iter_mut().for_each(|x| *x = (*x / n) as f32 as f64);
    }
    v
}

/// Unit vector for one word; equal words map to equal rows everywhere.
pub fn token_vector(word: &str, d_text: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::rng_from_seed(xxh3_64_with_seed(word.as_bytes(), seed));
    unit_f32(rng::normals(&mut r, d_text))
}

pub fn text_encode(class: usize, class_name: &str, d_text: usize, l: usize, seed: u64) -> Result<TextEmbedding> {
    if class_name.trim().is_empty() {
        return Err(invalid(format!("class {class} has an empty name")));
    }
    let prompt = prompt_for(class_name);
    let words: Vec<&str> = prompt.split_whitespace().collect();
    if words.len() > l {
        return Err(invalid(format!(
            "prompt \"{prompt}\" has {} tokens, more than L = {l}",
            words.len()
        )));
    }
    let mut data = vec![0.0; l * d_text];
    for (i, w) in words.iter().enumerate() {
        data[i * d_text..(i + 1) * d_text].copy_from_slice(&token_vector(w, d_text, seed));
    }
    let count = words.len();
    Ok(TextEmbedding {
        class,
        prompt,
        tokens: Tensor::new(vec![l, d_text], data)?,
        mask: (0..l).map(|i| i < count).collect(),
    })
}

/// Seeded projection `[D/h, d_feat]` shared by every patch of every sample.
pub fn visual_projection(patch: usize, d_feat: usize, seed: u64) -> Tensor {
    let mut r = rng::substream(seed, u64::from_le_bytes(*b"visualpj"));
    let s = 1.0 / libm::sqrt(patch as f64);
    let data = rng::normals(&mut r, patch * d_feat)
        .into_iter()
        .map(|z| (z * s) as f32 as f64)
        .collect();
    Tensor::new(vec![patch, d_feat], data).expect("consistent")
}

fn encode_with(x: &[f64], h: usize, proj: &Tensor) -> Tensor {
    let (w, f) = (proj.rows(), proj.cols());
    let mut out = Vec::with_capacity(h * f);
    for p in 0..h {
        let patch = &x[p * w..(p + 1) * w];
        let mut v = vec![0.0; f];
        for (i, xi) in patch.iter().enumerate() {
            for (vj, pj) in v.iter_mut().zip(proj.row(i)) {
                *vj += xi * pj;
            }
        }
        // A zero patch falls back to the first basis vector.
        out.extend(unit_f32(v));
    }
    Tensor::new(vec![h, f], out).expect("consistent")
}

fn check_patches(d: usize, h: usize) -> Result<()> {
    if h == 0 || d % h != 0 {
        return Err(invalid(format!("sample dim {d} is not divisible by h = {h}")));
    }
    Ok(())
}

pub fn visual_encode(sample: usize, x: &[f64], h: usize, d_feat: usize, seed: u64) -> Result<VisualTokens> {
    check_patches(x.len(), h)?;
    let proj = visual_projection(x.len() / h, d_feat, seed);
    Ok(VisualTokens {
        sample,
        tokens: encode_with(x, h, &proj),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl ScoreStats {
    pub fn of(table: &ScoreTable) -> Option<Self> {
        if table.is_empty() {
            return None;
        }
        let s = &table.scores;
        Some(ScoreStats {
            min: s.iter().copied().fold(f64::INFINITY, f64::min),
            max: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: s.iter().sum::<f64>() / s.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub selection: SelectionSpec,
    pub dataset_kind: DatasetKind,
    pub dataset_seed: u64,
    pub score_stats: Option<ScoreStats>,
    pub scorer_fingerprint: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedDataset {
    /// `[N, D]`, class-major then selection order.
    pub samples: Tensor,
    pub labels: Vec<usize>,
    /// Source row of each record.
    pub indices: Vec<usize>,
    pub classes: usize,
    pub class_names: Vec<String>,
    /// One per class, indexed by class id.
    pub text: Vec<TextEmbedding>,
    /// One per record, in record order.
    pub visual: Vec<VisualTokens>,
    pub encoders: EncoderConfig,
    pub provenance: Provenance,
}

impl CondensedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.samples.row(i)
    }

    /// Conditioning for record `i` with the requested branches switched on.
    pub fn condition(&self, i: usize, class: bool, text: bool) -> ConditionBundle<'_> {
        let y = self.labels[i];
        ConditionBundle {
            label: class.then_some(y),
            text: text.then(|| self.text[y].condition()),
            null: false,
        }
    }

    /// Model dimensions compatible with this dataset for the given widths.
    pub fn model_dims(&self, d_model: usize, blocks: usize, align_layer: usize) -> ModelDims {
        ModelDims {
            classes: self.classes,
            sample_dim: self.dim(),
            d_model,
            d_text: self.encoders.d_text,
            d_feat: self.encoders.d_feat,
            blocks,
            tokens: self.encoders.tokens,
            align_layer,
        }
    }

    pub fn check_model(&self, dims: &ModelDims) -> Result<()> {
        let want = [
            ("classes", self.classes, dims.classes),
            ("sample_dim", self.dim(), dims.sample_dim),
            ("d_text", self.encoders.d_text, dims.d_text),
            ("d_feat", self.encoders.d_feat, dims.d_feat),
            ("tokens", self.encoders.tokens, dims.tokens),
        ];
        for (name, data, model) in want {
            if data != model {
                return Err(invalid(format!(
                    "model {name} = {model} does not match condensed dataset {name} = {data}"
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        let e = &self.encoders;
        if self.samples.rank() != 2 || self.samples.rows() != n || self.indices.len() != n || self.visual.len() != n {
            return Err(invalid("condensed dataset record counts disagree"));
        }
        if self.text.len() != self.classes || self.class_names.len() != self.classes {
            return Err(invalid("condensed dataset needs one text embedding and name per class"));
        }
        for (c, t) in self.text.iter().enumerate() {
            if t.class != c || t.tokens.shape() != [e.text_len, e.d_text] || t.mask.len() != e.text_len {
                return Err(Error::Shape {
                    op: "text embedding",
                    lhs: t.tokens.shape().to_vec(),
                    rhs: vec![e.text_len, e.d_text],
                });
            }
        }
        for (i, v) in self.visual.iter().enumerate() {
            if v.sample != self.indices[i] || v.tokens.shape() != [e.tokens, e.d_feat] {
                return Err(invalid(format!("visual tokens of record {i} do not match the record")));
            }
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Range {
                what: "label",
                value: y as f64,
                range: "[0, C)",
            });
        }
        Ok(())
    }
}

/// Assembles the enriched dataset for `selection`. Records keep the
/// selection's class-major order.
pub fn build_condensed(
    data: &LabeledDataset,
    selection: &SelectionResult,
    encoders: &EncoderConfig,
    scores: Option<&ScoreTable>,
) -> Result<CondensedDataset> {
    encoders.validate()?;
    selection.validate(&data.labels)?;
    if data.class_names.len() != data.classes {
        return Err(invalid(format!(
            "class name table has {} entries for {} classes",
            data.class_names.len(),
            data.classes
        )));
    }
    check_patches(data.dim(), encoders.tokens)?;
    let text = data
        .class_names
        .iter()
        .enumerate()
        .map(|(c, name)| text_encode(c, name, encoders.d_text, encoders.text_len, encoders.seed))
        .collect::<Result<Vec<_>>>()?;
    let indices = selection.all_indices();
    let proj = visual_projection(data.dim() / encoders.tokens, encoders.d_feat, encoders.seed);
    let visual = indices
        .iter()
        .map(|&i| VisualTokens {
            sample: i,
            tokens: encode_with(data.sample(i), encoders.tokens, &proj),
        })
        .collect();
    let out = CondensedDataset {
        samples: data.samples.select_rows(&indices),
        labels: indices.iter().map(|&i| data.labels[i]).collect(),
        indices,
        classes: data.classes,
        class_names: data.class_names.clone(),
        text,
        visual,
        encoders: *encoders,
        provenance: Provenance {
            selection: selection.spec,
            dataset_kind: data.kind,
            dataset_seed: data.seed,
            score_stats: scores.and_then(ScoreStats::of),
            scorer_fingerprint: scores.map(|s| s.model_fingerprint),
        },
    };
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_gauss2d;
    use crate::select::random_select;

    #[test]
    fn prompt_tokens_and_mask() {
        let e = text_encode(0, "red blob", 8, 8, 3).unwrap();
        assert_eq!(e.prompt, "a photo of a red blob");
        assert_eq!(e.mask.iter().filter(|&&m| m).count(), 6);
        assert_eq!(e.mask, vec![true, true, true, true, true, true, false, false]);
        assert!(e.tokens.row(6).iter().all(|&x| x == 0.0));
        for r in 0..6 {
            let n: f64 = e.tokens.row(r).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
        // "a" appears twice in the prompt.
        assert_eq!(e.tokens.row(0), e.tokens.row(3));
    }

    #[test]
    fn shared_words_share_rows() {
        let a = text_encode(0, "square", 16, 8, 1).unwrap();
        let b = text_encode(1, "ring", 16, 8, 1).unwrap();
        assert_eq!(a.tokens.row(1), b.tokens.row(1));
        assert_ne!(a.tokens.row(4), b.tokens.row(4));
        assert_eq!(a, text_encode(0, "square", 16, 8, 1).unwrap());
    }

    #[test]
    fn long_prompt_and_empty_name_rejected() {
        assert!(text_encode(0, "a very long class name indeed", 4, 8, 0).is_err());
        assert!(text_encode(0, "  ", 4, 8, 0).is_err());
    }

    #[test]
    fn visual_tokens_unit_local_and_zero_fallback() {
        let x = [1.0, 2.0, -1.0, 0.5, 3.0, 3.0, 0.0, 0.0];
        let v = visual_encode(0, &x, 4, 5, 2).unwrap();
        assert_eq!(v.tokens.shape(), &[4, 5]);
        for r in 0..3 {
            let n: f64 = v.tokens.row(r).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(v.tokens.row(3), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        let y = [1.0, 2.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0];
        let w = visual_encode(1, &y, 4, 5, 2).unwrap();
        assert_eq!(v.tokens.row(0), w.tokens.row(0));
        assert!(visual_encode(0, &x, 3, 5, 2).is_err());
    }

    #[test]
    fn condensed_is_class_major_and_deterministic() {
        let ds = gen_gauss2d(3, 10, 1.0, 4).unwrap();
        let sel = random_select(&ds, 3, 0).unwrap();
        let enc = EncoderConfig {
            tokens: 2,
            ..EncoderConfig::default()
        };
        let c = build_condensed(&ds, &sel, &enc, None).unwrap();
        assert_eq!(c.len(), 9);
        assert_eq!(c.labels, vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
        assert_eq!(c.indices, sel.all_indices());
        assert_eq!(c, build_condensed(&ds, &sel, &enc, None).unwrap());
        let dims = c.model_dims(8, 2, 1);
        c.check_model(&dims).unwrap();
        let mut bad = dims;
        bad.tokens = 3;
        assert!(c.check_model(&bad).is_err());
    }

    #[test]
    fn missing_names_rejected() {
        let mut ds = gen_gauss2d(2, 4, 1.0, 0).unwrap();
        let sel = random_select(&ds, 2, 0).unwrap();
        ds.class_names.pop();
        let enc = EncoderConfig {
            tokens: 1,
            ..EncoderConfig::default()
        };
        assert!(build_condensed(&ds, &sel, &enc, None).is_err());
    }
}
