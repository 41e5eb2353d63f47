//! Finite-difference gradient checks in 64-bit precision for every
//! differentiable operation and for the full training objective. Shared by
//! the core tests and the acceptance suite.

use d2c_core::attach::{build_condensed, EncoderConfig};
use d2c_core::datagen::gen_gauss2d;
use d2c_core::model::{DenoiserModel, PredictionKind};
use d2c_core::rng::{self, rng_from_seed, Rng};
use d2c_core::schedule::{NoiseSchedule, ScheduleKind};
use d2c_core::select::random_select;
use d2c_core::train::{compute_loss, draw_batch, loss_graph, TrainConfig};
use d2c_core::{Graph, Precision, Result, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Uniform entries in [-1, 1].
fn rand_in(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| 2.0 * rng::uniform(r) - 1.0).collect()).unwrap()
}

/// Relative error between two gradient vectors, `|a - n| / max(|a|, |n|)`
/// in the L2 norm, with a floor for all-zero gradients.
fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(1e-8)
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Scalar objective `sum(build(inputs) * w)` with fixed random weights `w`.
fn objective(build: &Build, inputs: &[Tensor], weights_seed: u64) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars).unwrap();
    let shape = g.shape(y).to_vec();
    let w = g.constant(rand_in(&mut rng_from_seed(weights_seed), &shape));
    let z = g.mul(y, w).unwrap();
    let s = g.sum(z).unwrap();
    (g, s, vars)
}

/// Largest relative error over all inputs of one op instance.
fn check_op(build: &Build, inputs: Vec<Tensor>, seed: u64) -> f64 {
    let (mut g, s, vars) = objective(build, &inputs, seed);
    g.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut xs = inputs.clone();
                xs[k].data_mut()[j] += delta;
                let (g, s, _) = objective(build, &xs, seed);
                g.value(s).data()[0]
            };
            *num = (eval(H) - eval(-H)) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

#[derive(Debug, Default)]
pub struct Tally {
    pub cases: usize,
    pub worst: f64,
    /// Cases at or above [`TOL`], with their error.
    pub failures: Vec<String>,
}

impl Tally {
    fn record(&mut self, name: &str, err: f64) {
        if !(err < TOL) {
            self.failures.push(format!("{name}: relative error {err:e}"));
        }
        self.cases += 1;
        self.worst = self.worst.max(err);
    }
}

fn op_cases(t: &mut Tally) {
    for seed in 0..6u64 {
        let mut r = rng_from_seed(100 + seed);
        let (m, k, n) = (
            1 + seed as usize % 3,
            2 + seed as usize % 4,
            1 + (seed as usize * 7) % 5,
        );
        let a = rand_in(&mut r, &[m, k]);
        let b = rand_in(&mut r, &[k, n]);
        t.record(
            "matmul",
            check_op(&|g, v| g.matmul(v[0], v[1]), vec![a.clone(), b.clone()], seed),
        );
        let bias = rand_in(&mut r, &[n]);
        t.record(
            "linear",
            check_op(&|g, v| g.linear(v[0], v[1], v[2]), vec![a, b, bias], seed),
        );

        let x = rand_in(&mut r, &[3, 2, 4]);
        let y = rand_in(&mut r, &[3, 2, 4]);
        let row = rand_in(&mut r, &[4]);
        let mat = rand_in(&mut r, &[2, 4]);
        let scalar = rand_in(&mut r, &[]);
        for (name, other) in [("same", y), ("row", row), ("matrix", mat), ("scalar", scalar)] {
            t.record(
                &format!("add/{name}"),
                check_op(&|g, v| g.add(v[0], v[1]), vec![x.clone(), other.clone()], seed),
            );
            t.record(
                &format!("sub/{name}"),
                check_op(&|g, v| g.sub(v[1], v[0]), vec![x.clone(), other.clone()], seed),
            );
            t.record(
                &format!("mul/{name}"),
                check_op(&|g, v| g.mul(v[0], v[1]), vec![x.clone(), other.clone()], seed),
            );
        }
        let c = 0.5 + seed as f64;
        t.record(
            "scale",
            check_op(&move |g, v| Ok(g.scale(v[0], c)), vec![x.clone()], seed),
        );
        t.record("silu", check_op(&|g, v| Ok(g.silu(v[0])), vec![x.clone()], seed));
        t.record("tanh", check_op(&|g, v| Ok(g.tanh(v[0])), vec![x.clone()], seed));
        t.record("sum", check_op(&|g, v| g.sum(v[0]), vec![x.clone()], seed));
        t.record("mean", check_op(&|g, v| g.mean(v[0]), vec![x.clone()], seed));
        for axis in 0..3 {
            t.record(
                "sum/axis",
                check_op(
                    &move |g, v| g.reduce(d2c_core::tensor::ReduceOp::Sum, v[0], Some(axis)),
                    vec![x.clone()],
                    seed,
                ),
            );
            t.record(
                "mean/axis",
                check_op(
                    &move |g, v| g.reduce(d2c_core::tensor::ReduceOp::Mean, v[0], Some(axis)),
                    vec![x.clone()],
                    seed,
                ),
            );
        }
        t.record(
            "reshape",
            check_op(&|g, v| g.reshape(v[0], &[6, 4]), vec![x.clone()], seed),
        );
        t.record(
            "normalize_rows",
            check_op(&|g, v| Ok(g.normalize_rows(v[0])), vec![x.clone()], seed),
        );
        let table = rand_in(&mut r, &[5, 3]);
        t.record(
            "gather_rows",
            check_op(&|g, v| g.gather_rows(v[0], &[4, 0, 4, 2]), vec![table], seed),
        );
        // A composite chain exercising fan-out.
        t.record(
            "chain",
            check_op(
                &|g, v| {
                    let h = g.silu(v[0]);
                    let s = g.mul(h, v[0])?;
                    let n = g.normalize_rows(s);
                    let u = g.tanh(n);
                    g.add(u, h)
                },
                vec![x],
                seed,
            ),
        );
    }
}

/// Randomises every parameter so no gradient path is trivially zero.
fn randomized(model: &DenoiserModel, seed: u64) -> DenoiserModel {
    let mut m = model.clone();
    m.precision = Precision::F64;
    let mut r = rng_from_seed(seed);
    for p in m.params_mut() {
        for x in p.data_mut() {
            *x = 0.3 * rng::normal(&mut r);
        }
    }
    m
}

fn loss_case(seed: u64, kind: ScheduleKind, alignment: bool, text: bool, class: bool, lambda: f64) -> f64 {
    let ds = gen_gauss2d(3, 10, 0.5, seed).unwrap();
    let sel = random_select(&ds, 4, seed).unwrap();
    let enc = EncoderConfig {
        text_len: 8,
        d_text: 5,
        d_feat: 3,
        tokens: 2,
        seed,
    };
    let c = build_condensed(&ds, &sel, &enc, None).unwrap();
    let prediction = if kind == ScheduleKind::LinearFlow {
        PredictionKind::Velocity
    } else {
        PredictionKind::Epsilon
    };
    let dims = c.model_dims(3, 2, 1 + seed as usize % 2);
    let model = randomized(&DenoiserModel::new(dims, prediction, seed).unwrap(), seed + 1);
    let sched = NoiseSchedule::from_kind(kind);
    let cfg = TrainConfig {
        batch: 3,
        schedule: kind,
        prediction,
        alignment,
        text_branch: text,
        class_branch: class,
        lambda,
        p_null: 0.3,
        seed,
        ..TrainConfig::default()
    };
    let batch = draw_batch(&c, &sched, &cfg, &mut rng_from_seed(seed + 2)).unwrap();

    let mut g = Graph::new(Precision::F64);
    let b = model.bind(&mut g, true);
    let v = loss_graph(&model, &mut g, &b, &sched, &batch, lambda).unwrap();
    g.backward(v.total).unwrap();
    let mut analytic = Vec::new();
    for &p in b.vars() {
        analytic.extend_from_slice(g.grad(p).unwrap());
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..model.params().len() {
        for j in 0..model.params()[k].len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut()[k].data_mut()[j] += delta;
                compute_loss(&m, &sched, &batch, lambda).unwrap().total
            };
            numeric.push((eval(H) - eval(-H)) / (2.0 * H));
        }
    }
    rel_err(&analytic, &numeric)
}

fn loss_cases(t: &mut Tally) {
    let kinds = [
        ScheduleKind::VpContinuous,
        ScheduleKind::LinearFlow,
        ScheduleKind::DdpmDiscrete,
    ];
    let flags = [
        (true, true, true),
        (false, true, true),
        (true, false, true),
        (true, true, false),
        (false, false, true),
    ];
    let mut seed = 0;
    for kind in kinds {
        for (alignment, text, class) in flags {
            seed += 1;
            t.record(
                &format!("L_total {kind:?} align={alignment} text={text} class={class}"),
                loss_case(seed, kind, alignment, text, class, 0.5),
            );
        }
    }
    t.record(
        "L_total lambda=0",
        loss_case(99, ScheduleKind::VpContinuous, true, true, true, 0.0),
    );
    t.record(
        "L_total lambda=2",
        loss_case(98, ScheduleKind::VpContinuous, true, true, true, 2.0),
    );
}

/// Every op case followed by every objective case.
pub fn run() -> Tally {
    let mut t = Tally::default();
    op_cases(&mut t);
    loss_cases(&mut t);
    t
}
