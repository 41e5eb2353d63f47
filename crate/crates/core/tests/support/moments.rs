//! Empirical moments of the forward process against `(alpha_t x0, sigma_t^2)`:
//! the mean within four standard errors and the variance within 2%. Shared
//! by the core tests and the acceptance suite.

use d2c_core::rng::{self, rng_from_seed};
use d2c_core::schedule::NoiseSchedule;
use d2c_core::Tensor;

pub const DRAWS: usize = 100_000;

#[derive(Debug, Default)]
pub struct Report {
    pub checks: usize,
    pub failures: Vec<String>,
}

impl Report {
    fn moments(&mut self, name: &str, x0: &[f64], xs: &[f64], alpha: f64, sigma: f64) {
        let d = x0.len();
        let n = xs.len() / d;
        for j in 0..d {
            let col: Vec<f64> = xs.iter().skip(j).step_by(d).copied().collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            let se = sigma / (n as f64).sqrt();
            self.checks += 1;
            if !((mean - alpha * x0[j]).abs() < 4.0 * se) {
                self.failures.push(format!(
                    "{name}: mean {mean} vs {} (4 se = {})",
                    alpha * x0[j],
                    4.0 * se
                ));
            }
            if !((var / (sigma * sigma) - 1.0).abs() < 0.02) {
                self.failures.push(format!("{name}: var {var} vs {}", sigma * sigma));
            }
        }
    }
}

/// `perturb` at five times per schedule.
pub fn marginals() -> Report {
    let mut rep = Report::default();
    let x0 = [1.5, -0.5];
    let rows: Vec<f64> = (0..DRAWS).flat_map(|_| x0).collect();
    let x = Tensor::new(vec![DRAWS, 2], rows).unwrap();
    let cases = [
        (NoiseSchedule::vp(), [0.05, 0.25, 0.5, 0.75, 0.95]),
        (NoiseSchedule::LinearFlow, [0.05, 0.25, 0.5, 0.75, 0.95]),
        (NoiseSchedule::ddpm(), [1.0, 10.0, 40.0, 70.0, 100.0]),
    ];
    for (sched, ts) in cases {
        for (i, t) in ts.into_iter().enumerate() {
            let p = sched.perturb(&x, t, &mut rng_from_seed(i as u64)).unwrap();
            let (a, s) = sched.alpha_sigma(t).unwrap();
            rep.moments(&format!("{sched:?} t={t}"), &x0, p.x_t.data(), a, s);
        }
    }
    rep
}

/// Running `q(x_t | x_{t-1})` step by step reaches the closed-form marginal.
pub fn discrete_chain() -> Report {
    let mut rep = Report::default();
    let sched = NoiseSchedule::ddpm();
    let x0 = [2.0, -1.0];
    let mut r = rng_from_seed(9);
    let mut xs: Vec<f64> = (0..DRAWS).flat_map(|_| x0).collect();
    let mut prev = 1.0;
    for t in 1..=100 {
        let ab = sched.alpha_bar(t as f64).unwrap();
        let alpha = ab / prev;
        prev = ab;
        for x in &mut xs {
            *x = alpha.sqrt() * *x + (1.0 - alpha).sqrt() * rng::normal(&mut r);
        }
        if t % 25 == 0 {
            let (a, s) = sched.alpha_sigma(t as f64).unwrap();
            rep.moments(&format!("chain t={t}"), &x0, &xs, a, s);
        }
    }
    rep
}
