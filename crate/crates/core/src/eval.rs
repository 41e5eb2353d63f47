//! Distribution metrics on raw sample coordinates: Fréchet distance between
//! Gaussian fits and the unbiased RBF-kernel MMD.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stats;
use crate::tensor::Tensor;

/// Negative traces down to this magnitude are treated as rounding noise.
pub const FD_DUST: f64 = 1e-10;

fn check_set(name: &str, x: &Tensor, min_rows: usize) -> Result<()> {
    if x.rank() != 2 {
        return Err(invalid(format!("{name} must be a [n, d] matrix")));
    }
    if x.rows() < min_rows {
        return Err(invalid(format!(
            "{name} has {} samples, need at least {min_rows}",
            x.rows()
        )));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite(format!("{name} samples")));
    }
    Ok(())
}

/// Mean and unbiased covariance of the rows of `x`.
pub fn gaussian_fit(x: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mu = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// from rounding are clipped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = sym(m).symmetric_eigen();
    let root = e.eigenvalues.map(|l| libm::sqrt(l.max(0.0)));
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

/// `Tr((Sa Sb)^(1/2))` computed as the trace of the root of the symmetric
/// `Sa^(1/2) Sb Sa^(1/2)`.
pub fn trace_sqrt_product(sa: &DMatrix<f64>, sb: &DMatrix<f64>) -> f64 {
    let ra = sqrtm_psd(sa);
    let inner = sym(&(&ra * sb * &ra));
    inner
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| libm::sqrt(l.max(0.0)))
        .sum()
}

pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> f64 {
    let dm = (mu_a - mu_b).norm_squared();
    let tr = cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt_product(cov_a, cov_b);
    (dm + tr).max(0.0)
}

/// `||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))` between Gaussian fits
/// of the two sample sets. Each set needs at least `d + 1` rows.
pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() == 2 && b.rank() == 2 && a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "frechet_distance",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let d = a.cols();
    check_set("first set", a, d + 1)?;
    check_set("second set", b, d + 1)?;
    let (ma, ca) = gaussian_fit(a);
    let (mb, cb) = gaussian_fit(b);
    Ok(frechet_from_moments(&ma, &ca, &mb, &cb))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased estimate of squared MMD with `k(x, y) = exp(-|x - y|^2 / (2 bw^2))`.
/// The estimate can dip slightly below zero for matching distributions.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0) {
        return Err(Error::Range {
            what: "bandwidth",
            value: bandwidth,
            range: "(0, inf]",
        });
    }
    check_set("first set", a, 2)?;
    check_set("second set", b, 2)?;
    if a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "mmd_rbf",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let gamma = if bandwidth.is_infinite() {
        0.0
    } else {
        1.0 / (2.0 * bandwidth * bandwidth)
    };
    let k = |x: &[f64], y: &[f64]| libm::exp(-gamma * sq_dist(x, y));
    let within = |x: &Tensor| {
        let n = x.rows();
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += k(x.row(i), x.row(j));
            }
        }
        2.0 * s / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            cross += k(a.row(i), b.row(j));
        }
    }
    cross /= (a.rows() * b.rows()) as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

/// Rows used by [`median_bandwidth`] at most; larger sets are strided.
pub const BANDWIDTH_ROWS: usize = 2000;

/// Median pairwise Euclidean distance, over an evenly strided subset when
/// `x` has more than [`BANDWIDTH_ROWS`] rows.
pub fn median_bandwidth(x: &Tensor) -> Result<f64> {
    check_set("bandwidth set", x, 2)?;
    let n = x.rows();
    let rows: Vec<usize> = if n <= BANDWIDTH_ROWS {
        (0..n).collect()
    } else {
        (0..BANDWIDTH_ROWS).map(|i| i * n / BANDWIDTH_ROWS).collect()
    };
    let mut d = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for (p, &i) in rows.iter().enumerate() {
        for &j in &rows[p + 1..] {
            d.push(libm::sqrt(sq_dist(x.row(i), x.row(j))));
        }
    }
    let m = stats::median(&d);
    if m > 0.0 {
        Ok(m)
    } else {
        Err(invalid("median pairwise distance is zero; bandwidth undefined"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Fréchet distance of the pooled generated set against the pooled reference.
    pub frechet: f64,
    /// Mean of `per_class_frechet`; the headline number.
    pub mean_class_frechet: f64,
    pub per_class_frechet: Vec<f64>,
    /// Unbiased MMD^2, clipped at zero.
    pub mmd: f64,
    pub bandwidth: f64,
    pub generated_counts: Vec<usize>,
    pub reference_counts: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// Compares generated samples per class against reference samples per
/// class. The MMD bandwidth defaults to the median heuristic on the pooled
/// reference set.
pub fn evaluate(
    generated: &[Tensor],
    reference: &[Tensor],
    bandwidth: Option<f64>,
    seeds: Vec<u64>,
) -> Result<MetricReport> {
    if generated.len() != reference.len() || generated.is_empty() {
        return Err(invalid(format!(
            "need one generated and one reference set per class, got {} and {}",
            generated.len(),
            reference.len()
        )));
    }
    let per_class_frechet = generated
        .iter()
        .zip(reference)
        .map(|(g, r)| frechet_distance(g, r))
        .collect::<Result<Vec<_>>>()?;
    let pool = |sets: &[Tensor]| -> Result<Tensor> {
        let d = sets[0].cols();
        let data: Vec<f64> = sets.iter().flat_map(|s| s.data().iter().copied()).collect();
        Tensor::new(alloc::vec![data.len() / d, d], data)
    };
    let (pg, pr) = (pool(generated)?, pool(reference)?);
    let bandwidth = match bandwidth {
        Some(b) => b,
        None => median_bandwidth(&pr)?,
    };
    Ok(MetricReport {
        frechet: frechet_distance(&pg, &pr)?,
        mean_class_frechet: stats::mean(&per_class_frechet),
        per_class_frechet,
        mmd: mmd_rbf(&pg, &pr, bandwidth)?.max(0.0),
        bandwidth,
        generated_counts: generated.iter().map(|g| g.rows()).collect(),
        reference_counts: reference.iter().map(|r| r.rows()).collect(),
        seeds,
    })
}
