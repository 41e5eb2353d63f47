//! Procedural class-conditional datasets with a known per-sample
//! difficulty factor.
//!
//! Every sample is drawn from its own hashed RNG stream, so a dataset is a
//! pure function of its arguments. Values are rounded to `f32` at generation
//! time so that the binary export round-trips without loss.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, substream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Gauss2d,
    Shapes8x8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub kind: DatasetKind,
    /// `n x D` sample matrix.
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Generation-time clutter level in `[0, 1]`. Hidden ground truth used
    /// only to validate scoring; never fed to training.
    pub difficulty: Vec<f64>,
    pub class_names: Vec<String>,
    pub seed: u64,
}

impl LabeledDataset {
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

    /// Global indices of the samples in class `y`, ascending.
    pub fn class_indices(&self, y: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == y).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.rank() != 2 || self.samples.rows() != self.labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: self.samples.shape().to_vec(),
                rhs: vec![self.labels.len()],
            });
        }
        if self.difficulty.len() != self.labels.len() {
            return Err(invalid("difficulty length differs from sample count"));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Range {
                what: "label",
                value: y as f64,
                range: "[0, C)",
            });
        }
        if self.difficulty.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(invalid("difficulty factor outside [0, 1]"));
        }
        if let Some(y) = self.class_counts().iter().position(|&c| c == 0) {
            return Err(invalid(format!("class {y} has no samples")));
        }
        Ok(())
    }

    /// Keeps the listed rows in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            kind: self.kind,
            samples: self.samples.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            difficulty: indices.iter().map(|&i| self.difficulty[i]).collect(),
            class_names: self.class_names.clone(),
            seed: self.seed,
        }
    }

    /// Splits by index parity: even rows train, odd rows are held out.
    pub fn split_parity(&self) -> (LabeledDataset, LabeledDataset) {
        let even: Vec<usize> = (0..self.len()).step_by(2).collect();
        let odd: Vec<usize> = (1..self.len()).step_by(2).collect();
        (self.subset(&even), self.subset(&odd))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Gauss2dParams {
    /// Radius of the circle the class centers sit on.
    pub radius: f64,
    /// Standard deviation of the clean class Gaussian.
    pub spread: f64,
}

impl Default for Gauss2dParams {
    fn default() -> Self {
        Gauss2dParams {
            radius: 3.0,
            spread: 0.3,
        }
    }
}

const COLORS: [&str; 8] = ["red", "orange", "yellow", "green", "blue", "indigo", "violet", "white"];

fn gauss_class_name(y: usize) -> String {
    match COLORS.get(y) {
        Some(c) => format!("{c} blob"),
        None => format!("blob number {y}"),
    }
}

pub fn gauss2d_center(y: usize, classes: usize, radius: f64) -> [f64; 2] {
    let ang = 2.0 * core::f64::consts::PI * y as f64 / classes as f64;
    [radius * libm::cos(ang), radius * libm::sin(ang)]
}

/// Class `y` is centred on a circle point; each sample is
/// `center + N(0, spread^2 I) + clutter N(0, I)` with
/// `clutter = difficulty * clutter_max` and `difficulty ~ U[0, 1]`.
pub fn gen_gauss2d(classes: usize, n_per_class: usize, clutter_max: f64, seed: u64) -> Result<LabeledDataset> {
    gen_gauss2d_with(Gauss2dParams::default(), classes, n_per_class, clutter_max, seed)
}

pub fn gen_gauss2d_with(
    params: Gauss2dParams,
    classes: usize,
    n_per_class: usize,
    clutter_max: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(invalid("gauss2d needs at least 2 classes"));
    }
    if n_per_class < 4 {
        return Err(invalid("gauss2d needs at least 4 samples per class"));
    }
    if !(clutter_max >= 0.0) {
        return Err(Error::Range {
            what: "clutter_max",
            value: clutter_max,
            range: "[0, inf)",
        });
    }
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    let mut difficulty = Vec::with_capacity(n);
    for i in 0..n {
        let y = i / n_per_class;
        let mut r = substream(seed, i as u64);
        let df = round32(rng::uniform(&mut r));
        let clutter = df * clutter_max;
        let c = gauss2d_center(y, classes, params.radius);
        for &cj in &c {
            let clean = rng::normal(&mut r);
            let noise = rng::normal(&mut r);
            data.push(round32(cj + params.spread * clean + clutter * noise));
        }
        labels.push(y);
        difficulty.push(df);
    }
    Ok(LabeledDataset {
        kind: DatasetKind::Gauss2d,
        samples: Tensor::new(vec![n, 2], data)?,
        labels,
        classes,
        difficulty,
        class_names: (0..classes).map(gauss_class_name).collect(),
        seed,
    })
}

pub const SHAPE_SIDE: usize = 8;
pub const SHAPE_DIM: usize = SHAPE_SIDE * SHAPE_SIDE;
pub const SHAPE_NAMES: [&str; 8] = ["square", "frame", "plus", "cross", "bar", "pillar", "ring", "triangle"];

/// Binary 8x8 template for shape `y`.
pub fn shape_template(y: usize) -> Option<[f64; SHAPE_DIM]> {
    let mut t = [0.0; SHAPE_DIM];
    let mut set = |r: usize, c: usize| t[r * SHAPE_SIDE + c] = 1.0;
    match y {
        0 => (2..6).for_each(|r| (2..6).for_each(|c| set(r, c))),
        1 => (1..7).for_each(|r| {
            (1..7).for_each(|c| {
                if r == 1 || r == 6 || c == 1 || c == 6 {
                    set(r, c)
                }
            })
        }),
        2 => (1..7).for_each(|i| {
            set(i, 3);
            set(i, 4);
            set(3, i);
            set(4, i);
        }),
        3 => (1..7).for_each(|i| {
            set(i, i);
            set(i, 7 - i);
        }),
        4 => (1..7).for_each(|c| {
            set(3, c);
            set(4, c);
        }),
        5 => (1..7).for_each(|r| {
            set(r, 3);
            set(r, 4);
        }),
        6 => {
            for r in 0..SHAPE_SIDE {
                for c in 0..SHAPE_SIDE {
                    let (dr, dc) = (r as f64 - 3.5, c as f64 - 3.5);
                    let d = libm::sqrt(dr * dr + dc * dc);
                    if (1.8..=3.2).contains(&d) {
                        set(r, c);
                    }
                }
            }
        }
        7 => (1..7).for_each(|r| {
            let half = (r - 1) / 2;
            let (lo, hi) = (3 - half.min(3), 4 + half.min(3));
            (lo..=hi).for_each(|c| set(r, c));
        }),
        _ => return None,
    }
    Some(t)
}

fn shift(t: &[f64; SHAPE_DIM], dr: isize, dc: isize) -> [f64; SHAPE_DIM] {
    let mut out = [0.0; SHAPE_DIM];
    let side = SHAPE_SIDE as isize;
    for r in 0..side {
        for c in 0..side {
            let (sr, sc) = (r - dr, c - dc);
            if (0..side).contains(&sr) && (0..side).contains(&sc) {
                out[(r * side + c) as usize] = t[(sr * side + sc) as usize];
            }
        }
    }
    out
}

/// Shape templates with an optional one-pixel translation jitter plus
/// clutter: each pixel independently receives `U[0, 1]` extra intensity with
/// probability `difficulty * clutter_max` (capped at 1), then clamps to `[0, 1]`.
pub fn gen_shapes8x8(
    classes: usize,
    n_per_class: usize,
    clutter_max: f64,
    jitter: bool,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes > SHAPE_NAMES.len() {
        return Err(invalid(format!(
            "shapes8x8 has {} templates, {classes} classes requested",
            SHAPE_NAMES.len()
        )));
    }
    if classes < 2 || n_per_class < 4 {
        return Err(invalid("shapes8x8 needs C >= 2 and n_per_class >= 4"));
    }
    if !(clutter_max >= 0.0) {
        return Err(Error::Range {
            what: "clutter_max",
            value: clutter_max,
            range: "[0, inf)",
        });
    }
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * SHAPE_DIM);
    let mut labels = Vec::with_capacity(n);
    let mut difficulty = Vec::with_capacity(n);
    for i in 0..n {
        let y = i / n_per_class;
        let mut r = substream(seed, i as u64);
        let df = round32(rng::uniform(&mut r));
        let template = shape_template(y).expect("checked class count");
        let base = if jitter {
            let dr = (rng::uniform(&mut r) * 3.0) as isize - 1;
            let dc = (rng::uniform(&mut r) * 3.0) as isize - 1;
            shift(&template, dr, dc)
        } else {
            template
        };
        let p = (df * clutter_max).min(1.0);
        for &px in &base {
            let hit = rng::uniform(&mut r) < p;
            let extra = rng::uniform(&mut r);
            let v = if hit { px + extra } else { px };
            data.push(round32(v.clamp(0.0, 1.0)));
        }
        labels.push(y);
        difficulty.push(df);
    }
    Ok(LabeledDataset {
        kind: DatasetKind::Shapes8x8,
        samples: Tensor::new(vec![n, SHAPE_DIM], data)?,
        labels,
        classes,
        difficulty,
        class_names: SHAPE_NAMES[..classes].iter().map(|s| String::from(*s)).collect(),
        seed,
    })
}

fn round32(x: f64) -> f64 {
    x as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::spearman;

    #[test]
    fn gauss_is_deterministic_and_valid() {
        let a = gen_gauss2d(4, 16, 1.0, 7).unwrap();
        let b = gen_gauss2d(4, 16, 1.0, 7).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.class_counts(), vec![16; 4]);
        assert_ne!(a, gen_gauss2d(4, 16, 1.0, 8).unwrap());
    }

    #[test]
    fn gauss_rejects_bad_args() {
        assert!(gen_gauss2d(1, 16, 1.0, 0).is_err());
        assert!(gen_gauss2d(3, 3, 1.0, 0).is_err());
        assert!(gen_gauss2d(3, 8, -0.1, 0).is_err());
    }

    #[test]
    fn gauss_zero_clutter_is_pure_gaussian() {
        // With clutter_max = 0 the difficulty factor cannot move a sample.
        let a = gen_gauss2d(3, 8, 0.0, 1).unwrap();
        let mut b = a.clone();
        b.difficulty.iter_mut().for_each(|d| *d = 0.0);
        assert_eq!(a.samples, b.samples);
        assert!(a.difficulty.iter().any(|&d| d > 0.0));
    }

    #[test]
    fn gauss_class_means_near_centers() {
        let n = 4000;
        let p = Gauss2dParams::default();
        let ds = gen_gauss2d(3, n, 0.0, 11).unwrap();
        for y in 0..3 {
            let c = gauss2d_center(y, 3, p.radius);
            for j in 0..2 {
                let m: f64 = ds.class_indices(y).iter().map(|&i| ds.sample(i)[j]).sum::<f64>() / n as f64;
                assert!((m - c[j]).abs() < 4.0 * p.spread / libm::sqrt(n as f64));
            }
        }
    }

    #[test]
    fn gauss_distance_grows_with_difficulty() {
        let p = Gauss2dParams::default();
        let ds = gen_gauss2d(2, 5000, 2.0, 3).unwrap();
        let mut sums = [0.0; 10];
        let mut counts = [0usize; 10];
        for i in 0..ds.len() {
            let c = gauss2d_center(ds.labels[i], 2, p.radius);
            let x = ds.sample(i);
            let d = libm::sqrt((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2));
            let b = ((ds.difficulty[i] * 10.0) as usize).min(9);
            sums[b] += d;
            counts[b] += 1;
        }
        let means: Vec<f64> = (0..10).map(|b| sums[b] / counts[b] as f64).collect();
        let idx: Vec<f64> = (0..10).map(|b| b as f64).collect();
        assert!(spearman(&idx, &means).unwrap() > 0.9);
    }

    #[test]
    fn shapes_without_clutter_or_jitter_match_templates() {
        let ds = gen_shapes8x8(8, 4, 0.0, false, 2).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.sample(i), &shape_template(ds.labels[i]).unwrap()[..]);
        }
        assert!(gen_shapes8x8(9, 4, 0.0, false, 2).is_err());
    }

    #[test]
    fn shapes_templates_are_distinct() {
        for a in 0..8 {
            for b in a + 1..8 {
                assert_ne!(shape_template(a), shape_template(b), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shapes_pixels_clamped() {
        let ds = gen_shapes8x8(4, 50, 3.0, true, 5).unwrap();
        assert!(ds.samples.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn shapes_energy_monotone_in_difficulty() {
        let ds = gen_shapes8x8(4, 500, 0.8, true, 9).unwrap();
        let mut sums = [0.0; 10];
        let mut counts = [0usize; 10];
        for i in 0..ds.len() {
            let e: f64 = ds.sample(i).iter().sum::<f64>() / SHAPE_DIM as f64;
            let b = ((ds.difficulty[i] * 10.0) as usize).min(9);
            sums[b] += e;
            counts[b] += 1;
        }
        let means: Vec<f64> = (0..10).map(|b| sums[b] / counts[b] as f64).collect();
        let idx: Vec<f64> = (0..10).map(|b| b as f64).collect();
        assert!(spearman(&idx, &means).unwrap() > 0.95);
    }

    #[test]
    fn parity_split_balances_classes() {
        let ds = gen_gauss2d(3, 10, 1.0, 0).unwrap();
        let (tr, ho) = ds.split_parity();
        assert_eq!(tr.class_counts(), vec![5; 3]);
        assert_eq!(ho.class_counts(), vec![5; 3]);
        assert_eq!(tr.sample(1), ds.sample(2));
    }
}
