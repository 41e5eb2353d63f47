//! Noise schedules, forward perturbation, and single reverse steps.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    VpContinuous,
    LinearFlow,
    DdpmDiscrete,
}

/// Variance-preserving continuous schedule with
/// `alpha_bar(t) = exp(-t^2 (beta_max - beta_min) / 2 - t beta_min)`.
pub const VP_BETA_MIN: f64 = 0.1;
pub const VP_BETA_MAX: f64 = 20.0;
pub const DDPM_STEPS: usize = 100;
pub const DDPM_BETA_START: f64 = 1e-4;
pub const DDPM_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct DdpmTable {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DdpmTable {
    /// Linear beta ramp over `steps` entries.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("ddpm schedule needs at least one step"));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if let Some(&b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Range {
                what: "beta",
                value: b,
                range: "(0, 1)",
            });
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(DdpmTable {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Values at step `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0) = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSchedule {
    VpContinuous { beta_min: f64, beta_max: f64 },
    LinearFlow,
    DdpmDiscrete(DdpmTable),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedSample {
    pub x_t: Tensor,
    pub t: f64,
    pub epsilon: Tensor,
}

impl NoiseSchedule {
    pub fn vp() -> Self {
        NoiseSchedule::VpContinuous {
            beta_min: VP_BETA_MIN,
            beta_max: VP_BETA_MAX,
        }
    }

    pub fn ddpm() -> Self {
        NoiseSchedule::DdpmDiscrete(
            DdpmTable::linear(DDPM_STEPS, DDPM_BETA_START, DDPM_BETA_END).expect("valid defaults"),
        )
    }

    pub fn from_kind(kind: ScheduleKind) -> Self {
        match kind {
            ScheduleKind::VpContinuous => Self::vp(),
            ScheduleKind::LinearFlow => NoiseSchedule::LinearFlow,
            ScheduleKind::DdpmDiscrete => Self::ddpm(),
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        match self {
            NoiseSchedule::VpContinuous { .. } => ScheduleKind::VpContinuous,
            NoiseSchedule::LinearFlow => ScheduleKind::LinearFlow,
            NoiseSchedule::DdpmDiscrete(_) => ScheduleKind::DdpmDiscrete,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, NoiseSchedule::DdpmDiscrete(_))
    }

    fn check_time(&self, t: f64) -> Result<()> {
        match self {
            NoiseSchedule::DdpmDiscrete(tab) => {
                if !(t >= 1.0 && t <= tab.steps() as f64 && libm::trunc(t) == t) {
                    return Err(Error::Range {
                        what: "t",
                        value: t,
                        range: "{1..T}",
                    });
                }
            }
            _ => {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::Range {
                        what: "t",
                        value: t,
                        range: "[0, 1]",
                    });
                }
            }
        }
        Ok(())
    }

    /// Cumulative signal level; only defined for the variance-preserving kinds.
    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        // The discrete chain's clean endpoint, reached by the last reverse step.
        if t == 0.0 && matches!(self, NoiseSchedule::DdpmDiscrete(_)) {
            return Ok(1.0);
        }
        self.check_time(t)?;
        match self {
            NoiseSchedule::VpContinuous { beta_min, beta_max } => {
                Ok(libm::exp(-0.5 * t * t * (beta_max - beta_min) - t * beta_min))
            }
            NoiseSchedule::DdpmDiscrete(tab) => Ok(tab.alpha_bar(t as usize)),
            NoiseSchedule::LinearFlow => Err(invalid("linear-flow has no alpha_bar")),
        }
    }

    /// The `(alpha_t, sigma_t)` pair at time `t`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        match self {
            NoiseSchedule::LinearFlow => Ok((1.0 - t, t)),
            _ => {
                let ab = self.alpha_bar(t)?;
                Ok((libm::sqrt(ab), libm::sqrt(1.0 - ab)))
            }
        }
    }

    /// Time fed to the network, always in `[0, 1]`.
    pub fn model_time(&self, t: f64) -> f64 {
        match self {
            NoiseSchedule::DdpmDiscrete(tab) => t / tab.steps() as f64,
            _ => t,
        }
    }

    /// Draws `epsilon` and forms `x_t = alpha_t x0 + sigma_t epsilon`.
    pub fn perturb(&self, x0: &Tensor, t: f64, rng: &mut Rng) -> Result<PerturbedSample> {
        let eps = rng::normals(rng, x0.len());
        let epsilon = Tensor::new(x0.shape().to_vec(), eps)?;
        let x_t = self.perturb_with(x0, t, &epsilon)?;
        Ok(PerturbedSample { x_t, t, epsilon })
    }

    /// Deterministic form of [`NoiseSchedule::perturb`] with caller-supplied noise.
    pub fn perturb_with(&self, x0: &Tensor, t: f64, epsilon: &Tensor) -> Result<Tensor> {
        if x0.shape() != epsilon.shape() {
            return Err(Error::Shape {
                op: "perturb",
                lhs: x0.shape().to_vec(),
                rhs: epsilon.shape().to_vec(),
            });
        }
        let (a, s) = self.alpha_sigma(t)?;
        let data = x0
            .data()
            .iter()
            .zip(epsilon.data())
            .map(|(x, e)| a * x + s * e)
            .collect();
        Tensor::new(x0.shape().to_vec(), data)
    }

    /// Midpoints of `strata` equal-width strata, mapped into the time domain.
    pub fn stratum_midpoints(&self, strata: usize) -> Vec<f64> {
        (0..strata)
            .map(|j| self.from_unit((j as f64 + 0.5) / strata as f64))
            .collect()
    }

    /// Maps `u` in `[0, 1)` to a valid time. Continuous kinds keep `u`
    /// (clamped away from zero); the discrete kind picks step `1 + floor(u T)`.
    pub fn from_unit(&self, u: f64) -> f64 {
        match self {
            NoiseSchedule::DdpmDiscrete(tab) => {
                let t = tab.steps();
                (1 + ((u * t as f64) as usize).min(t - 1)) as f64
            }
            _ => u.clamp(1e-5, 1.0),
        }
    }

    /// One stratified time per batch item (a Latin-hypercube draw over `[0, 1)`).
    pub fn stratified_times(&self, n: usize, rng: &mut Rng) -> Vec<f64> {
        let mut slots: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = (rng::uniform(rng) * (i + 1) as f64) as usize;
            slots.swap(i, j.min(i));
        }
        slots
            .into_iter()
            .map(|k| self.from_unit((k as f64 + rng::uniform(rng)) / n as f64))
            .collect()
    }

    /// Reverse-time grid as `(t, s)` pairs from the noisiest time down to zero.
    pub fn sampling_grid(&self, steps: usize) -> Result<Vec<(f64, f64)>> {
        if steps == 0 {
            return Err(invalid("sampling needs at least one step"));
        }
        let times: Vec<f64> = match self {
            NoiseSchedule::DdpmDiscrete(tab) => {
                let t_max = tab.steps();
                let steps = steps.min(t_max);
                let mut ts: Vec<f64> = (0..=steps)
                    .map(|j| libm::round(j as f64 * t_max as f64 / steps as f64))
                    .collect();
                ts.dedup();
                ts
            }
            _ => (0..=steps).map(|j| j as f64 / steps as f64).collect(),
        };
        Ok(times.windows(2).rev().map(|w| (w[1], w[0])).collect())
    }
}

/// Ancestral step between cumulative levels `alpha_bar_t > alpha_bar_s`,
/// treating the pair as one DDPM transition with
/// `alpha = alpha_bar_t / alpha_bar_s` and variance `beta = 1 - alpha`.
/// Noise is added only when `noise` is given.
pub fn ancestral_step(
    x_t: &Tensor,
    eps_pred: &Tensor,
    alpha_bar_t: f64,
    alpha_bar_s: f64,
    noise: Option<&[f64]>,
) -> Result<Tensor> {
    if x_t.shape() != eps_pred.shape() {
        return Err(Error::Shape {
            op: "reverse_step",
            lhs: x_t.shape().to_vec(),
            rhs: eps_pred.shape().to_vec(),
        });
    }
    let alpha = alpha_bar_t / alpha_bar_s;
    let beta = 1.0 - alpha;
    let coef = beta / libm::sqrt(1.0 - alpha_bar_t);
    let inv = 1.0 / libm::sqrt(alpha);
    let sd = libm::sqrt(beta);
    let data = x_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .enumerate()
        .map(|(i, (x, e))| {
            let mean = inv * (x - coef * e);
            match noise {
                Some(z) => mean + sd * z[i],
                None => mean,
            }
        })
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// DDPM reverse transition `x_t -> x_{t-1}` with `sigma_t^2 = beta_t`;
/// the step from `t = 1` adds no noise.
pub fn ddpm_reverse_step(
    sched: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    let NoiseSchedule::DdpmDiscrete(tab) = sched else {
        return Err(invalid("ddpm_reverse_step needs a ddpm-discrete schedule"));
    };
    if t == 0 || t > tab.steps() {
        return Err(Error::Range {
            what: "t",
            value: t as f64,
            range: "{1..T}",
        });
    }
    let noise = (t > 1).then(|| rng::normals(rng, x_t.len()));
    ancestral_step(x_t, eps_pred, tab.alpha_bar(t), tab.alpha_bar(t - 1), noise.as_deref())
}

/// Euler step of the probability-flow ODE on the linear path:
/// `x_{t - dt} = x_t - dt * v`.
pub fn euler_flow_step(x_t: &Tensor, t: f64, v_pred: &Tensor, dt: f64) -> Result<Tensor> {
    if !(dt >= 0.0 && dt <= t) {
        return Err(Error::Range {
            what: "dt",
            value: dt,
            range: "[0, t]",
        });
    }
    if x_t.shape() != v_pred.shape() {
        return Err(Error::Shape {
            op: "euler_flow_step",
            lhs: x_t.shape().to_vec(),
            rhs: v_pred.shape().to_vec(),
        });
    }
    let data = x_t.data().iter().zip(v_pred.data()).map(|(x, v)| x - dt * v).collect();
    Tensor::new(x_t.shape().to_vec(), data)
}
