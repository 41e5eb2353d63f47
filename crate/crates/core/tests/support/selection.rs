//! Brute-force reimplementations of every selection strategy, checked on
//! small random instances. Shared by the core tests and the acceptance suite.

use d2c_core::datagen::{DatasetKind, LabeledDataset};
use d2c_core::rng::{rng_from_seed, Rng};
use d2c_core::score::{McConfig, ScoreTable};
use d2c_core::select::{extreme_select, herding_select, interval_select, kcenter_select, Extreme};
use d2c_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;

pub struct Instance {
    pub data: LabeledDataset,
    pub table: ScoreTable,
}

/// Up to three classes of at most ten samples, labels interleaved, integer
/// coordinates and coarse scores so exact ties are common. Table rows are
/// stored in a shuffled order.
pub fn instance(r: &mut Rng) -> Instance {
    let classes = r.random_range(1..=3);
    let mut labels = Vec::new();
    for c in 0..classes {
        labels.extend(std::iter::repeat_n(c, r.random_range(1..=10)));
    }
    labels.shuffle(r);
    let n = labels.len();
    let dim = r.random_range(1..=3);
    let samples: Vec<f64> = (0..n * dim).map(|_| r.random_range(-3..=3) as f64).collect();
    let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..5) as f64 / 10.0).collect();
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(r);
    let data = LabeledDataset {
        kind: DatasetKind::Gauss2d,
        samples: Tensor::new(vec![n, dim], samples).unwrap(),
        labels: labels.clone(),
        classes,
        difficulty: vec![0.0; n],
        class_names: (0..classes).map(|c| format!("c{c}")).collect(),
        seed: 0,
    };
    let table = ScoreTable {
        scores: rows.iter().map(|&i| scores[i]).collect(),
        indices: rows.clone(),
        labels: rows.iter().map(|&i| labels[i]).collect(),
        mc: McConfig::default(),
        model_fingerprint: 0,
        warnings: Vec::new(),
    };
    Instance { data, table }
}

fn score_of(t: &ScoreTable, g: usize) -> f64 {
    t.scores[t.indices.iter().position(|&x| x == g).unwrap()]
}

fn members(d: &LabeledDataset, c: usize) -> Vec<usize> {
    (0..d.labels.len()).filter(|&i| d.labels[i] == c).collect()
}

/// Rank of `g` in its class under ascending score, ties by index; computed
/// by counting the members that precede it.
fn ascending_rank(inst: &Instance, c: usize, g: usize) -> usize {
    let s = score_of(&inst.table, g);
    members(&inst.data, c)
        .into_iter()
        .filter(|&o| {
            let so = score_of(&inst.table, o);
            so < s || (so == s && o < g)
        })
        .count()
}

fn descending_rank(inst: &Instance, c: usize, g: usize) -> usize {
    let s = score_of(&inst.table, g);
    members(&inst.data, c)
        .into_iter()
        .filter(|&o| {
            let so = score_of(&inst.table, o);
            so > s || (so == s && o < g)
        })
        .count()
}

/// Members whose rank lands on the given positions, in position order.
fn by_ranks(inst: &Instance, c: usize, ranks: &[usize], rank: fn(&Instance, usize, usize) -> usize) -> Vec<usize> {
    ranks
        .iter()
        .map(|&q| {
            members(&inst.data, c)
                .into_iter()
                .find(|&g| rank(inst, c, g) == q)
                .unwrap()
        })
        .collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of(d: &LabeledDataset, rows: &[usize]) -> Vec<f64> {
    let mut mu = vec![0.0; d.dim()];
    for &i in rows {
        for (m, x) in mu.iter_mut().zip(d.sample(i)) {
            *m += x;
        }
    }
    mu.iter().map(|m| m / rows.len() as f64).collect()
}

/// Index of the first minimum.
fn argmin(xs: &[(usize, f64)]) -> usize {
    let best = xs.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    xs.iter().find(|x| x.1 == best).unwrap().0
}

fn herding_oracle(d: &LabeledDataset, c: usize, m: usize) -> Vec<usize> {
    let pool = members(d, c);
    let mu = mean_of(d, &pool);
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < m {
        let cands: Vec<(usize, f64)> = pool
            .iter()
            .filter(|g| !chosen.contains(g))
            .map(|&g| {
                let mut with = chosen.clone();
                with.push(g);
                (g, sq(&mean_of(d, &with), &mu))
            })
            .collect();
        chosen.push(argmin(&cands));
    }
    chosen
}

fn kcenter_oracle(d: &LabeledDataset, c: usize, m: usize) -> Vec<usize> {
    let pool = members(d, c);
    let mu = mean_of(d, &pool);
    let first: Vec<(usize, f64)> = pool.iter().map(|&g| (g, sq(d.sample(g), &mu))).collect();
    let mut chosen = vec![argmin(&first)];
    while chosen.len() < m {
        // Farthest point: first maximum of the distance to the chosen set.
        let cands: Vec<(usize, f64)> = pool
            .iter()
            .filter(|g| !chosen.contains(g))
            .map(|&g| {
                let near = chosen
                    .iter()
                    .map(|&s| sq(d.sample(s), d.sample(g)))
                    .fold(f64::INFINITY, f64::min);
                (g, -near)
            })
            .collect();
        chosen.push(argmin(&cands));
    }
    chosen
}

/// Strategy name, instance seed and class of every mismatch over
/// `instances` random instances.
pub fn mismatches(instances: u64) -> Vec<String> {
    let mut bad = Vec::new();
    for seed in 0..instances {
        let inst = instance(&mut rng_from_seed(seed));
        let n_min = inst.data.class_counts().into_iter().min().unwrap();
        let mut r = rng_from_seed(1000 + seed);
        let m = r.random_range(1..=n_min);
        let k_max = if m == 1 { n_min } else { (n_min - 1) / (m - 1) };
        let k = r.random_range(1..=k_max);
        let iv = interval_select(&inst.table, k, m).unwrap();
        let lo = extreme_select(&inst.table, Extreme::Min, m).unwrap();
        let hi = extreme_select(&inst.table, Extreme::Max, m).unwrap();
        let h = herding_select(&inst.data, m).unwrap();
        let kc = kcenter_select(&inst.data, m).unwrap();
        for c in 0..inst.data.classes {
            let pos: Vec<usize> = (0..m).map(|j| j * k).collect();
            let first: Vec<usize> = (0..m).collect();
            let checks = [
                ("interval", &iv, by_ranks(&inst, c, &pos, ascending_rank)),
                ("min", &lo, by_ranks(&inst, c, &first, ascending_rank)),
                ("max", &hi, by_ranks(&inst, c, &first, descending_rank)),
                ("herding", &h, herding_oracle(&inst.data, c, m)),
                ("kcenter", &kc, kcenter_oracle(&inst.data, c, m)),
            ];
            for (name, got, want) in checks {
                if got.per_class[c].indices != want {
                    bad.push(format!("{name} instance {seed} class {c}"));
                }
            }
        }
    }
    bad
}
