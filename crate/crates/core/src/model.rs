//! Conditional denoiser: residual MLP blocks with zero-initialised adaptive
//! scale/shift modulation, a text+class condition fusion, and a per-token
//! projection head used by the alignment loss.
//!
//! The hidden state has width `tokens * d_model`; the alignment features are
//! that state after block `align_layer`, cut into `tokens` contiguous chunks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Precision, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    Epsilon,
    Velocity,
}

impl PredictionKind {
    pub fn code(self) -> u8 {
        match self {
            PredictionKind::Epsilon => 0,
            PredictionKind::Velocity => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(PredictionKind::Epsilon),
            1 => Some(PredictionKind::Velocity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub classes: usize,
    pub sample_dim: usize,
    pub d_model: usize,
    pub d_text: usize,
    pub d_feat: usize,
    pub blocks: usize,
    pub tokens: usize,
    /// 1-based index of the block whose output feeds the alignment loss.
    pub align_layer: usize,
}

impl ModelDims {
    pub fn hidden(&self) -> usize {
        self.tokens * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("classes", self.classes),
            ("sample_dim", self.sample_dim),
            ("d_model", self.d_model),
            ("d_text", self.d_text),
            ("d_feat", self.d_feat),
            ("blocks", self.blocks),
            ("tokens", self.tokens),
        ];
        if let Some((name, _)) = all.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("model dimension `{name}` must be positive")));
        }
        if self.align_layer == 0 || self.align_layer > self.blocks {
            return Err(Error::Range {
                what: "align_layer",
                value: self.align_layer as f64,
                range: "[1, blocks]",
            });
        }
        Ok(())
    }
}

/// Sinusoid pairs in the time embedding.
pub const TIME_FREQS: usize = 8;
pub const CONV_KERNEL: usize = 3;

const IN_W: usize = 0;
const IN_B: usize = 1;
const T_W1: usize = 2;
const T_B1: usize = 3;
const T_W2: usize = 4;
const T_B2: usize = 5;
const CLASS_TABLE: usize = 6;
const NULL_EMBED: usize = 7;
const CONV_W: usize = 8;
const CONV_B: usize = 9;
const FUSE_W1: usize = 10;
const FUSE_B1: usize = 11;
const FUSE_W2: usize = 12;
const FUSE_B2: usize = 13;
const BLOCK_BASE: usize = 14;
const PER_BLOCK: usize = 8;

#[derive(Debug, Clone, Copy)]
enum Init {
    Zero,
    Xavier,
    Embed,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn param_specs(d: &ModelDims) -> Vec<ParamSpec> {
    let h = d.hidden();
    let m = d.d_model;
    let p = |name: &str, shape: &[usize], init| ParamSpec {
        name: String::from(name),
        shape: shape.to_vec(),
        init,
    };
    let mut v = vec![
        p("input.w", &[d.sample_dim, h], Init::Xavier),
        p("input.b", &[h], Init::Zero),
        p("time.w1", &[2 * TIME_FREQS, m], Init::Xavier),
        p("time.b1", &[m], Init::Zero),
        p("time.w2", &[m, m], Init::Xavier),
        p("time.b2", &[m], Init::Zero),
        p("class.table", &[d.classes, m], Init::Embed),
        p("null.embed", &[m], Init::Embed),
        p("text.conv.w", &[CONV_KERNEL * d.d_text, m], Init::Xavier),
        p("text.conv.b", &[m], Init::Zero),
        p("text.mlp.w1", &[m, m], Init::Xavier),
        p("text.mlp.b1", &[m], Init::Zero),
        p("text.mlp.w2", &[m, m], Init::Zero),
        p("text.mlp.b2", &[m], Init::Zero),
    ];
    for b in 0..d.blocks {
        let n = |s: &str| format!("block{b}.{s}");
        v.push(p(&n("mod.scale.w"), &[m, h], Init::Zero));
        v.push(p(&n("mod.scale.b"), &[h], Init::Zero));
        v.push(p(&n("mod.shift.w"), &[m, h], Init::Zero));
        v.push(p(&n("mod.shift.b"), &[h], Init::Zero));
        v.push(p(&n("mlp.w1"), &[h, h], Init::Xavier));
        v.push(p(&n("mlp.b1"), &[h], Init::Zero));
        v.push(p(&n("mlp.w2"), &[h, h], Init::Xavier));
        v.push(p(&n("mlp.b2"), &[h], Init::Zero));
    }
    v.push(p("output.w", &[h, d.sample_dim], Init::Zero));
    v.push(p("output.b", &[d.sample_dim], Init::Zero));
    v.push(p("phi.a", &[m, d.d_feat], Init::Xavier));
    v.push(p("phi.b", &[d.d_feat], Init::Zero));
    v.push(p("phi.w1", &[m, m], Init::Xavier));
    v.push(p("phi.b1", &[m], Init::Zero));
    v.push(p("phi.w2", &[m, d.d_feat], Init::Xavier));
    v
}

/// Text half of a condition: `L x d_text` tokens and their mask.
#[derive(Debug, Clone, Copy)]
pub struct TextCondition<'a> {
    pub tokens: &'a Tensor,
    pub mask: &'a [bool],
}

/// One item's conditioning. A missing `label` or `text` switches that
/// branch off; `null` replaces the whole condition with the learned null
/// embedding.
#[derive(Debug, Clone, Copy)]
pub struct ConditionBundle<'a> {
    pub label: Option<usize>,
    pub text: Option<TextCondition<'a>>,
    pub null: bool,
}

impl<'a> ConditionBundle<'a> {
    pub fn null() -> Self {
        ConditionBundle {
            label: None,
            text: None,
            null: true,
        }
    }

    pub fn class_only(label: usize) -> Self {
        ConditionBundle {
            label: Some(label),
            text: None,
            null: false,
        }
    }

    pub fn with_null(mut self, null: bool) -> Self {
        self.null = null;
        self
    }
}

/// Anything that maps noisy inputs to predictions. The scorer and sampler
/// are written against this so tests can inject analytic denoisers.
pub trait Denoiser {
    fn prediction_kind(&self) -> PredictionKind;

    /// Predictions `[B, D]` for rows of `x_t` at model times `times`.
    fn predict(&self, x_t: &Tensor, times: &[f64], conds: &[ConditionBundle<'_>]) -> Result<Tensor>;
}

impl Denoiser for DenoiserModel {
    fn prediction_kind(&self) -> PredictionKind {
        self.prediction
    }

    fn predict(&self, x_t: &Tensor, times: &[f64], conds: &[ConditionBundle<'_>]) -> Result<Tensor> {
        DenoiserModel::predict(self, x_t, times, conds)
    }
}

/// Parameters bound to a graph for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    /// `[B, D]`
    pub prediction: Var,
    /// `[B * tokens, d_model]`
    pub features: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub dims: ModelDims,
    pub prediction: PredictionKind,
    pub precision: Precision,
    params: Vec<Tensor>,
    names: Vec<String>,
}

impl DenoiserModel {
    /// Fresh model. Modulation layers, the fusion MLP output layer and the
    /// output head start at zero, so modulation is the identity and the
    /// prediction is the zero vector.
    pub fn new(dims: ModelDims, prediction: PredictionKind, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut r = rng::rng_from_seed(seed);
        let mut params = Vec::new();
        let mut names = Vec::new();
        for spec in param_specs(&dims) {
            params.push(init_tensor(&spec, &mut r));
            names.push(spec.name);
        }
        Ok(DenoiserModel {
            dims,
            prediction,
            precision: Precision::F32,
            params,
            names,
        })
    }

    /// Model with explicit parameters in declaration order (checkpoint loading).
    pub fn from_params(dims: ModelDims, prediction: PredictionKind, params: Vec<Tensor>) -> Result<Self> {
        dims.validate()?;
        let specs = param_specs(&dims);
        if specs.len() != params.len() {
            return Err(invalid(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(Error::Shape {
                    op: "from_params",
                    lhs: s.shape.clone(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        Ok(DenoiserModel {
            dims,
            prediction,
            precision: Precision::F32,
            params,
            names: specs.into_iter().map(|s| s.name).collect(),
        })
    }

    /// Parameter shapes in declaration order.
    pub fn param_shapes(dims: &ModelDims) -> Vec<Vec<usize>> {
        param_specs(dims).into_iter().map(|s| s.shape).collect()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    fn block_param(&self, b: usize, k: usize) -> usize {
        BLOCK_BASE + b * PER_BLOCK + k
    }

    fn tail(&self) -> usize {
        BLOCK_BASE + self.dims.blocks * PER_BLOCK
    }

    pub fn output_head_is_zero(&self) -> bool {
        let t = self.tail();
        self.params[t].data().iter().all(|&x| x == 0.0) && self.params[t + 1].data().iter().all(|&x| x == 0.0)
    }

    /// Configures the projection head as the identity map (requires
    /// `d_model == d_feat`).
    pub fn set_identity_projection(&mut self) -> Result<()> {
        if self.dims.d_model != self.dims.d_feat {
            return Err(invalid("identity projection needs d_model == d_feat"));
        }
        let t = self.tail();
        self.params[t + 2] = Tensor::identity(self.dims.d_model);
        self.params[t + 3] = Tensor::zeros(&[self.dims.d_feat]);
        self.params[t + 6] = Tensor::zeros(&[self.dims.d_model, self.dims.d_feat]);
        Ok(())
    }

    /// Zeroes the output layer of the text-fusion MLP.
    pub fn zero_fusion_output(&mut self) {
        let m = self.dims.d_model;
        self.params[FUSE_W2] = Tensor::zeros(&[m, m]);
        self.params[FUSE_B2] = Tensor::zeros(&[m]);
    }

    /// Stable content hash over dims, prediction kind and `f32` parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = xxhash_rust::xxh3::Xxh3::new();
        let d = &self.dims;
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
            h.update(&(v as u32).to_le_bytes());
        }
        h.update(&[self.prediction.code()]);
        for p in &self.params {
            for &x in p.data() {
                h.update(&(x as f32).to_le_bytes());
            }
        }
        h.digest()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn check_bundle(&self, c: &ConditionBundle<'_>) -> Result<()> {
        if c.null {
            return Ok(());
        }
        if let Some(y) = c.label {
            if y >= self.dims.classes {
                return Err(Error::Range {
                    what: "label",
                    value: y as f64,
                    range: "[0, C)",
                });
            }
        }
        if let Some(t) = &c.text {
            let s = t.tokens.shape();
            if s.len() != 2 || s[1] != self.dims.d_text || s[0] != t.mask.len() {
                return Err(Error::Shape {
                    op: "text condition",
                    lhs: s.to_vec(),
                    rhs: vec![t.mask.len(), self.dims.d_text],
                });
            }
            if !t.mask.iter().any(|&m| m) {
                return Err(invalid("text mask is all false (empty prompt)"));
            }
        }
        if c.label.is_none() && c.text.is_none() {
            return Err(invalid("condition has neither class nor text and is not null"));
        }
        Ok(())
    }

    /// Condition vectors `[B, d_model]`:
    /// `MLP(conv_pool(t_c * t_mask)) + conv_pool(...) + e_c[y]`, or the null
    /// embedding for null items.
    pub fn fuse_batch(&self, g: &mut Graph, b: &Bound, conds: &[ConditionBundle<'_>]) -> Result<Var> {
        if conds.is_empty() {
            return Err(invalid("empty condition batch"));
        }
        for c in conds {
            self.check_bundle(c)?;
        }
        let m = self.dims.d_model;
        let n = conds.len();
        let p = &b.vars;
        let mut terms: Vec<Var> = Vec::new();

        let uses_text: Vec<bool> = conds.iter().map(|c| !c.null && c.text.is_some()).collect();
        if uses_text.iter().any(|&u| u) {
            // Unique prompts are convolved once and gathered per row.
            let mut uniq: Vec<TextCondition<'_>> = Vec::new();
            let mut row_of: Vec<usize> = Vec::with_capacity(n);
            for (c, &u) in conds.iter().zip(&uses_text) {
                if !u {
                    row_of.push(0);
                    continue;
                }
                let t = c.text.unwrap();
                let pos = uniq
                    .iter()
                    .position(|q| core::ptr::eq(q.tokens, t.tokens) && core::ptr::eq(q.mask, t.mask));
                row_of.push(match pos {
                    Some(i) => i,
                    None => {
                        uniq.push(t);
                        uniq.len() - 1
                    }
                });
            }
            let pooled = self.conv_pool(g, b, &uniq)?;
            let hid = g.linear(pooled, p[FUSE_W1], p[FUSE_B1])?;
            let hid = g.silu(hid);
            let mlp = g.linear(hid, p[FUSE_W2], p[FUSE_B2])?;
            let table = g.add(mlp, pooled)?;
            let rows = g.gather_rows(table, &row_of)?;
            terms.push(mask_rows(g, rows, &uses_text, m)?);
        }

        let uses_class: Vec<bool> = conds.iter().map(|c| !c.null && c.label.is_some()).collect();
        if uses_class.iter().any(|&u| u) {
            let labels: Vec<usize> = conds.iter().map(|c| c.label.unwrap_or(0)).collect();
            let rows = g.gather_rows(p[CLASS_TABLE], &labels)?;
            terms.push(mask_rows(g, rows, &uses_class, m)?);
        }

        let is_null: Vec<bool> = conds.iter().map(|c| c.null).collect();
        if is_null.iter().any(|&u| u) {
            let keep = g.constant(indicator(&is_null, m));
            terms.push(g.mul(keep, p[NULL_EMBED])?);
        }

        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Kernel-3 same-padded convolution over masked tokens, then a mean over
    /// the unmasked positions. Returns `[prompts, d_model]`.
    fn conv_pool(&self, g: &mut Graph, b: &Bound, prompts: &[TextCondition<'_>]) -> Result<Var> {
        let dt = self.dims.d_text;
        let total: usize = prompts.iter().map(|t| t.mask.len()).sum();
        let mut cols = vec![0.0; total * CONV_KERNEL * dt];
        let mut pool = vec![0.0; prompts.len() * total];
        let mut row = 0;
        for (pi, t) in prompts.iter().enumerate() {
            let l = t.mask.len();
            let count = t.mask.iter().filter(|&&m| m).count() as f64;
            for pos in 0..l {
                for k in 0..CONV_KERNEL {
                    let src = pos as isize + k as isize - (CONV_KERNEL as isize / 2);
                    if src < 0 || src >= l as isize || !t.mask[src as usize] {
                        continue;
                    }
                    let dst = (row * CONV_KERNEL + k) * dt;
                    cols[dst..dst + dt].copy_from_slice(t.tokens.row(src as usize));
                }
                if t.mask[pos] {
                    pool[pi * total + row] = 1.0 / count;
                }
                row += 1;
            }
        }
        let x = g.constant(Tensor::new(vec![total, CONV_KERNEL * dt], cols)?);
        let conv = g.linear(x, b.vars[CONV_W], b.vars[CONV_B])?;
        let pool = g.constant(Tensor::new(vec![prompts.len(), total], pool)?);
        g.matmul(pool, conv)
    }

    /// Sinusoidal time features `[B, 2 * TIME_FREQS]` for model times in `[0, 1]`.
    pub fn time_features(times: &[f64]) -> Tensor {
        let mut data = Vec::with_capacity(times.len() * 2 * TIME_FREQS);
        let span = libm::log(1000.0);
        for &t in times {
            for f in 0..TIME_FREQS {
                let w = libm::exp(span * f as f64 / (TIME_FREQS - 1) as f64);
                data.push(libm::sin(w * t));
                data.push(libm::cos(w * t));
            }
        }
        Tensor::new(vec![times.len(), 2 * TIME_FREQS], data).expect("consistent")
    }

    /// Denoiser pass on `x_t: [B, D]` with model times and condition vectors
    /// `[B, d_model]`.
    pub fn forward_batch(&self, g: &mut Graph, b: &Bound, x_t: Var, times: &[f64], cond: Var) -> Result<ForwardOut> {
        let d = &self.dims;
        let bsz = g.shape(x_t)[0];
        if g.shape(x_t) != [bsz, d.sample_dim] || times.len() != bsz {
            return Err(Error::Shape {
                op: "forward",
                lhs: g.shape(x_t).to_vec(),
                rhs: vec![times.len(), d.sample_dim],
            });
        }
        if g.shape(cond) != [bsz, d.d_model] {
            return Err(Error::Shape {
                op: "forward condition",
                lhs: g.shape(cond).to_vec(),
                rhs: vec![bsz, d.d_model],
            });
        }
        let p = &b.vars;
        let tf = g.constant(Self::time_features(times));
        let te = g.linear(tf, p[T_W1], p[T_B1])?;
        let te = g.silu(te);
        let te = g.linear(te, p[T_W2], p[T_B2])?;
        let c = g.add(cond, te)?;
        let c = g.silu(c);

        let one = g.constant(Tensor::scalar(1.0));
        let mut h = g.linear(x_t, p[IN_W], p[IN_B])?;
        let mut features = None;
        for blk in 0..d.blocks {
            let q = |k| p[self.block_param(blk, k)];
            let scale = g.linear(c, q(0), q(1))?;
            let shift = g.linear(c, q(2), q(3))?;
            let gain = g.add(scale, one)?;
            let u = g.mul(h, gain)?;
            let u = g.add(u, shift)?;
            let z = g.linear(u, q(4), q(5))?;
            let z = g.silu(z);
            let z = g.linear(z, q(6), q(7))?;
            h = g.add(h, z)?;
            if blk + 1 == d.align_layer {
                features = Some(g.reshape(h, &[bsz * d.tokens, d.d_model])?);
            }
        }
        let t = self.tail();
        let a = g.silu(h);
        let prediction = g.linear(a, p[t], p[t + 1])?;
        Ok(ForwardOut {
            prediction,
            features: features.expect("align_layer validated"),
        })
    }

    /// Per-token head `phi(h) = h A + b + silu(h W1 + b1) W2`.
    pub fn project(&self, g: &mut Graph, b: &Bound, features: Var) -> Result<Var> {
        let t = self.tail();
        let p = &b.vars;
        let lin = g.linear(features, p[t + 2], p[t + 3])?;
        let hid = g.linear(features, p[t + 4], p[t + 5])?;
        let hid = g.silu(hid);
        let nl = g.matmul(hid, p[t + 6])?;
        g.add(lin, nl)
    }

    /// Condition vector for a single bundle.
    pub fn fuse_conditions(&self, bundle: &ConditionBundle<'_>) -> Result<Tensor> {
        let mut g = Graph::new(self.precision);
        let b = self.bind(&mut g, false);
        let v = self.fuse_batch(&mut g, &b, core::slice::from_ref(bundle))?;
        g.value(v).clone().reshape(vec![self.dims.d_model])
    }

    /// Single-sample pass: returns the `[D]` prediction and `[tokens, d_model]`
    /// alignment features. `t` is the model time in `[0, 1]`.
    pub fn forward(&self, x_t: &Tensor, t: f64, y_text: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(self.precision);
        let b = self.bind(&mut g, false);
        let x = g.constant(x_t.clone().reshape(vec![1, self.dims.sample_dim])?);
        let c = g.constant(y_text.clone().reshape(vec![1, self.dims.d_model])?);
        let out = self.forward_batch(&mut g, &b, x, &[t], c)?;
        Ok((
            g.value(out.prediction).clone().reshape(vec![self.dims.sample_dim])?,
            g.value(out.features).clone(),
        ))
    }

    pub fn project_features(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(self.precision);
        let b = self.bind(&mut g, false);
        let f = g.constant(features.clone());
        let out = self.project(&mut g, &b, f)?;
        Ok(g.value(out).clone())
    }

    /// Batched inference: predictions `[B, D]` for rows of `x_t`.
    pub fn predict(&self, x_t: &Tensor, times: &[f64], conds: &[ConditionBundle<'_>]) -> Result<Tensor> {
        let mut g = Graph::new(self.precision);
        let b = self.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let c = self.fuse_batch(&mut g, &b, conds)?;
        let out = self.forward_batch(&mut g, &b, x, times, c)?;
        Ok(g.value(out.prediction).clone())
    }
}

fn indicator(rows: &[bool], width: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        data.extend(core::iter::repeat_n(if r { 1.0 } else { 0.0 }, width));
    }
    Tensor::new(vec![rows.len(), width], data).expect("consistent")
}

fn mask_rows(g: &mut Graph, v: Var, keep: &[bool], width: usize) -> Result<Var> {
    if keep.iter().all(|&k| k) {
        return Ok(v);
    }
    let m = g.constant(indicator(keep, width));
    g.mul(v, m)
}

fn init_tensor(spec: &ParamSpec, r: &mut Rng) -> Tensor {
    let n: usize = spec.shape.iter().product();
    let data = match spec.init {
        Init::Zero => vec![0.0; n],
        Init::Xavier => {
            let fan_in = spec.shape[0] as f64;
            let fan_out = *spec.shape.last().unwrap() as f64;
            let a = libm::sqrt(6.0 / (fan_in + fan_out));
            (0..n)
                .map(|_| ((2.0 * rng::uniform(r) - 1.0) * a) as f32 as f64)
                .collect()
        }
        Init::Embed => (0..n).map(|_| (0.02 * rng::normal(r)) as f32 as f64).collect(),
    };
    Tensor::new(spec.shape.clone(), data).expect("spec shape")
}
