//! Binary artifact formats. All integers and floats are little-endian and
//! every payload section carries an xxh3 64-bit checksum.
//!
//! * `D2CD`: magic, version `u32`, manifest length `u32`, JSON manifest,
//!   manifest checksum `u64`, then `f32` sections in manifest order, each
//!   followed by its checksum, then a checksum of all preceding bytes, so a
//!   damaged length field is also caught. Two profiles: `condensed` (sections
//!   `samples`, `text`, `visual`) and `samples` (sections `samples`,
//!   `difficulty`) for plain datasets.
//! * `D2CM`: magic, version `u32`, prediction kind `u8`, dims
//!   `C, D, d_model, d_text, d_feat, B, h, align_layer` as `u32`, then
//!   every parameter as `f32` in declaration order, then a checksum of all
//!   preceding bytes.
//! * `D2CS`: magic, version `u32`, `n u32`, `t_strata u32`, `eps_draws u32`,
//!   `base_seed u64`, model fingerprint `u64`, `n` records of
//!   `(index u32, label u32, score f64)`, then a checksum of all preceding
//!   bytes.

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64;

use d2c_core::attach::{CondensedDataset, EncoderConfig, Provenance, TextEmbedding, VisualTokens};
use d2c_core::datagen::{DatasetKind, LabeledDataset};
use d2c_core::model::{DenoiserModel, ModelDims, PredictionKind};
use d2c_core::score::{McConfig, ScoreTable};
use d2c_core::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 4] = b"D2CD";
pub const MODEL_MAGIC: &[u8; 4] = b"D2CM";
pub const SCORE_MAGIC: &[u8; 4] = b"D2CS";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated file while reading {section}")]
    Truncated { section: String },
    #[error("checksum mismatch in {section}")]
    Checksum { section: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("value {value} in {section} is not representable as f32")]
    NotF32 { section: String, value: f64 },
    #[error("trailing bytes after the last section")]
    Trailing,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type FResult<T> = std::result::Result<T, FormatError>;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&VERSION.to_le_bytes());
        Writer { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, section: &str, xs: &[f64]) -> FResult<()> {
        for &x in xs {
            let f = x as f32;
            if f as f64 != x && !x.is_nan() {
                return Err(FormatError::NotF32 {
                    section: section.into(),
                    value: x,
                });
            }
            self.buf.extend_from_slice(&f.to_le_bytes());
        }
        Ok(())
    }

    /// `f32` section followed by the checksum of its bytes.
    fn section(&mut self, name: &str, xs: &[f64]) -> FResult<()> {
        let start = self.buf.len();
        self.f32s(name, xs)?;
        let sum = xxh3_64(&self.buf[start..]);
        self.u64(sum);
        Ok(())
    }

    fn finish_with_checksum(mut self) -> Vec<u8> {
        let sum = xxh3_64(&self.buf);
        self.u64(sum);
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], magic: &[u8; 4]) -> FResult<Self> {
        if buf.len() < 4 {
            return Err(FormatError::Truncated {
                section: "header".into(),
            });
        }
        if &buf[..4] != magic {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(magic).into(),
                found: String::from_utf8_lossy(&buf[..4]).into(),
            });
        }
        let mut r = Reader { buf, pos: 4 };
        let v = r.u32("header")? as u32;
        if v != VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: v,
                supported: VERSION,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, section: &str) -> FResult<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated {
                section: section.into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, section: &str) -> FResult<u8> {
        Ok(self.take(1, section)?[0])
    }

    fn u32(&mut self, section: &str) -> FResult<usize> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, section: &str) -> FResult<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    fn f64(&mut self, section: &str) -> FResult<f64> {
        Ok(f64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, section: &str) -> FResult<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| FormatError::Manifest("section too large".into()))?,
            section,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn section(&mut self, n: usize, name: &str) -> FResult<Vec<f64>> {
        let start = self.pos;
        let xs = self.f32s(n, name)?;
        let expect = xxh3_64(&self.buf[start..self.pos]);
        if self.u64(name)? != expect {
            return Err(FormatError::Checksum { section: name.into() });
        }
        Ok(xs)
    }

    /// Verifies a trailing checksum over everything before it.
    fn finish_with_checksum(mut self) -> FResult<()> {
        let body = self.pos;
        let sum = self.u64("checksum")?;
        if sum != xxh3_64(&self.buf[..body]) {
            return Err(FormatError::Checksum { section: "file".into() });
        }
        self.done()
    }

    fn done(self) -> FResult<()> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Trailing);
        }
        Ok(())
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> FResult<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Checksummed payloads can only be verified after the whole header is
/// read, so trailing-checksum formats verify before parsing fields.
fn verify_trailing(buf: &[u8], magic: &[u8; 4]) -> FResult<()> {
    Reader::open(buf, magic)?;
    if buf.len() < 16 {
        return Err(FormatError::Truncated {
            section: "checksum".into(),
        });
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    if u64::from_le_bytes(tail.try_into().unwrap()) != xxh3_64(body) {
        return Err(FormatError::Checksum { section: "file".into() });
    }
    Ok(())
}

// ---------------------------------------------------------------- D2CD

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SectionInfo {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "lowercase", deny_unknown_fields)]
enum Manifest {
    Samples {
        kind: DatasetKind,
        n: usize,
        dim: usize,
        classes: usize,
        labels: Vec<usize>,
        class_names: Vec<String>,
        seed: u64,
        sections: Vec<SectionInfo>,
    },
    Condensed {
        n: usize,
        dim: usize,
        classes: usize,
        labels: Vec<usize>,
        indices: Vec<usize>,
        class_names: Vec<String>,
        prompts: Vec<String>,
        masks: Vec<Vec<bool>>,
        encoders: EncoderConfig,
        provenance: Provenance,
        sections: Vec<SectionInfo>,
    },
}

fn write_container(manifest: &Manifest, sections: &[(&str, &[f64])]) -> FResult<Vec<u8>> {
    let json = serde_json::to_vec(manifest).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let mut w = Writer::new(DATA_MAGIC);
    w.u32(json.len());
    w.buf.extend_from_slice(&json);
    w.u64(xxh3_64(&json));
    for (name, xs) in sections {
        w.section(name, xs)?;
    }
    Ok(w.finish_with_checksum())
}

fn read_container(buf: &[u8]) -> FResult<(Manifest, Vec<Vec<f64>>)> {
    verify_trailing(buf, DATA_MAGIC)?;
    let mut r = Reader::open(&buf[..buf.len() - 8], DATA_MAGIC)?;
    let len = r.u32("manifest")?;
    let json = r.take(len, "manifest")?;
    if r.u64("manifest")? != xxh3_64(json) {
        return Err(FormatError::Checksum {
            section: "manifest".into(),
        });
    }
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let infos = match &manifest {
        Manifest::Samples { sections, .. } | Manifest::Condensed { sections, .. } => sections.clone(),
    };
    let mut out = Vec::with_capacity(infos.len());
    for s in &infos {
        out.push(r.section(s.len, &s.name)?);
    }
    r.done()?;
    Ok((manifest, out))
}

fn expect_sections(got: &[SectionInfo], want: &[(&str, usize)]) -> FResult<()> {
    let ok = got.len() == want.len() && got.iter().zip(want).all(|(g, (n, l))| g.name == *n && g.len == *l);
    if !ok {
        return Err(FormatError::Manifest(format!(
            "section table {got:?} does not match the declared dimensions"
        )));
    }
    Ok(())
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> FResult<Tensor> {
    Tensor::new(shape, data).map_err(|e| FormatError::Manifest(e.to_string()))
}

pub fn encode_dataset(d: &LabeledDataset) -> FResult<Vec<u8>> {
    let (n, dim) = (d.len(), d.dim());
    let manifest = Manifest::Samples {
        kind: d.kind,
        n,
        dim,
        classes: d.classes,
        labels: d.labels.clone(),
        class_names: d.class_names.clone(),
        seed: d.seed,
        sections: vec![
            SectionInfo {
                name: "samples".into(),
                len: n * dim,
            },
            SectionInfo {
                name: "difficulty".into(),
                len: n,
            },
        ],
    };
    write_container(
        &manifest,
        &[("samples", d.samples.data()), ("difficulty", &d.difficulty)],
    )
}

pub fn decode_dataset(buf: &[u8]) -> FResult<LabeledDataset> {
    let (m, mut secs) = read_container(buf)?;
    let Manifest::Samples {
        kind,
        n,
        dim,
        classes,
        labels,
        class_names,
        seed,
        sections,
    } = m
    else {
        return Err(FormatError::Manifest("expected the samples profile".into()));
    };
    expect_sections(&sections, &[("samples", n * dim), ("difficulty", n)])?;
    let difficulty = secs.pop().unwrap();
    let samples = tensor(vec![n, dim], secs.pop().unwrap())?;
    let d = LabeledDataset {
        kind,
        samples,
        labels,
        classes,
        difficulty,
        class_names,
        seed,
    };
    d.validate().map_err(|e| FormatError::Manifest(e.to_string()))?;
    Ok(d)
}

pub fn encode_condensed(c: &CondensedDataset) -> FResult<Vec<u8>> {
    let (n, dim) = (c.len(), c.dim());
    let e = &c.encoders;
    let text: Vec<f64> = c.text.iter().flat_map(|t| t.tokens.data().iter().copied()).collect();
    let visual: Vec<f64> = c.visual.iter().flat_map(|v| v.tokens.data().iter().copied()).collect();
    let manifest = Manifest::Condensed {
        n,
        dim,
        classes: c.classes,
        labels: c.labels.clone(),
        indices: c.indices.clone(),
        class_names: c.class_names.clone(),
        prompts: c.text.iter().map(|t| t.prompt.clone()).collect(),
        masks: c.text.iter().map(|t| t.mask.clone()).collect(),
        encoders: *e,
        provenance: c.provenance.clone(),
        sections: vec![
            SectionInfo {
                name: "samples".into(),
                len: n * dim,
            },
            SectionInfo {
                name: "text".into(),
                len: text.len(),
            },
            SectionInfo {
                name: "visual".into(),
                len: visual.len(),
            },
        ],
    };
    write_container(
        &manifest,
        &[("samples", c.samples.data()), ("text", &text), ("visual", &visual)],
    )
}

pub fn decode_condensed(buf: &[u8]) -> FResult<CondensedDataset> {
    let (m, mut secs) = read_container(buf)?;
    let Manifest::Condensed {
        n,
        dim,
        classes,
        labels,
        indices,
        class_names,
        prompts,
        masks,
        encoders: e,
        provenance,
        sections,
    } = m
    else {
        return Err(FormatError::Manifest("expected the condensed profile".into()));
    };
    let tl = e.text_len * e.d_text;
    let vl = e.tokens * e.d_feat;
    expect_sections(
        &sections,
        &[("samples", n * dim), ("text", classes * tl), ("visual", n * vl)],
    )?;
    if prompts.len() != classes || masks.len() != classes || indices.len() != n {
        return Err(FormatError::Manifest(
            "per-class or per-record tables have the wrong length".into(),
        ));
    }
    let visual = secs.pop().unwrap();
    let text = secs.pop().unwrap();
    let samples = tensor(vec![n, dim], secs.pop().unwrap())?;
    let text = prompts
        .into_iter()
        .zip(masks)
        .enumerate()
        .map(|(c, (prompt, mask))| {
            Ok(TextEmbedding {
                class: c,
                prompt,
                tokens: tensor(vec![e.text_len, e.d_text], text[c * tl..(c + 1) * tl].to_vec())?,
                mask,
            })
        })
        .collect::<FResult<Vec<_>>>()?;
    let visual = indices
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            Ok(VisualTokens {
                sample: s,
                tokens: tensor(vec![e.tokens, e.d_feat], visual[i * vl..(i + 1) * vl].to_vec())?,
            })
        })
        .collect::<FResult<Vec<_>>>()?;
    let c = CondensedDataset {
        samples,
        labels,
        indices,
        classes,
        class_names,
        text,
        visual,
        encoders: e,
        provenance,
    };
    c.validate().map_err(|e| FormatError::Manifest(e.to_string()))?;
    Ok(c)
}

// ---------------------------------------------------------------- D2CM

pub fn encode_model(m: &DenoiserModel) -> FResult<Vec<u8>> {
    let d = &m.dims;
    let mut w = Writer::new(MODEL_MAGIC);
    w.u8(m.prediction.code());
    for v in [
        d.classes,
        d.sample_dim,
        d.d_model,
        d.d_text,
        d.d_feat,
        d.blocks,
        d.tokens,
        d.align_layer,
    ] {
        w.u32(v);
    }
    for (p, name) in m.params().iter().zip(m.param_names()) {
        w.f32s(name, p.data())?;
    }
    Ok(w.finish_with_checksum())
}

pub fn decode_model(buf: &[u8]) -> FResult<DenoiserModel> {
    verify_trailing(buf, MODEL_MAGIC)?;
    let mut r = Reader::open(buf, MODEL_MAGIC)?;
    let code = r.u8("header")?;
    let prediction = PredictionKind::from_code(code)
        .ok_or_else(|| FormatError::Manifest(format!("unknown prediction kind {code}")))?;
    let mut v = [0usize; 8];
    for x in &mut v {
        *x = r.u32("dims")?;
    }
    let dims = ModelDims {
        classes: v[0],
        sample_dim: v[1],
        d_model: v[2],
        d_text: v[3],
        d_feat: v[4],
        blocks: v[5],
        tokens: v[6],
        align_layer: v[7],
    };
    dims.validate().map_err(|e| FormatError::Manifest(e.to_string()))?;
    let mut params = Vec::new();
    for shape in DenoiserModel::param_shapes(&dims) {
        let n = shape.iter().product();
        params.push(tensor(shape, r.f32s(n, "parameters")?)?);
    }
    r.finish_with_checksum()?;
    DenoiserModel::from_params(dims, prediction, params).map_err(|e| FormatError::Manifest(e.to_string()))
}

// ---------------------------------------------------------------- D2CS

pub fn encode_scores(t: &ScoreTable) -> Vec<u8> {
    let mut w = Writer::new(SCORE_MAGIC);
    w.u32(t.len());
    w.u32(t.mc.t_strata);
    w.u32(t.mc.eps_draws);
    w.u64(t.mc.base_seed);
    w.u64(t.model_fingerprint);
    for i in 0..t.len() {
        w.u32(t.indices[i]);
        w.u32(t.labels[i]);
        w.f64(t.scores[i]);
    }
    w.finish_with_checksum()
}

pub fn decode_scores(buf: &[u8]) -> FResult<ScoreTable> {
    verify_trailing(buf, SCORE_MAGIC)?;
    let mut r = Reader::open(buf, SCORE_MAGIC)?;
    let n = r.u32("header")?;
    let mc = McConfig {
        t_strata: r.u32("header")?,
        eps_draws: r.u32("header")?,
        base_seed: r.u64("header")?,
    };
    let model_fingerprint = r.u64("header")?;
    let (mut indices, mut labels, mut scores) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        indices.push(r.u32("records")?);
        labels.push(r.u32("records")?);
        scores.push(r.f64("records")?);
    }
    r.finish_with_checksum()?;
    let t = ScoreTable {
        scores,
        indices,
        labels,
        mc,
        model_fingerprint,
        warnings: Vec::new(),
    };
    t.validate().map_err(|e| FormatError::Manifest(e.to_string()))?;
    Ok(t)
}

// ---------------------------------------------------------------- files

macro_rules! file_io {
    ($write:ident, $read:ident, $ty:ty, $enc:expr, $dec:expr) => {
        pub fn $write(path: &Path, v: &$ty) -> FResult<()> {
            let bytes = $enc(v)?;
            write_bytes(path, &bytes)
        }

        pub fn $read(path: &Path) -> FResult<$ty> {
            $dec(&std::fs::read(path)?)
        }
    };
}

file_io!(
    write_dataset,
    read_dataset,
    LabeledDataset,
    encode_dataset,
    decode_dataset
);
file_io!(
    write_condensed,
    read_condensed,
    CondensedDataset,
    encode_condensed,
    decode_condensed
);
file_io!(write_model, read_model, DenoiserModel, encode_model, decode_model);
file_io!(
    write_scores,
    read_scores,
    ScoreTable,
    |t: &ScoreTable| -> FResult<Vec<u8>> { Ok(encode_scores(t)) },
    decode_scores
);

/// Byte size of a condensed file is linear in the record count; this is
/// the per-record part.
pub fn condensed_bytes_per_record(dim: usize, e: &EncoderConfig) -> usize {
    4 * dim + 8 + 4 * e.tokens * e.d_feat
}
