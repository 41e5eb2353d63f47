//! Budgeted per-class subset selection.
//!
//! Ties are always broken by ascending global index.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::rng::substream;
use crate::score::ScoreTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Interval,
    Min,
    Max,
    Random,
    Herding,
    Kcenter,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Interval,
        Strategy::Min,
        Strategy::Max,
        Strategy::Random,
        Strategy::Herding,
        Strategy::Kcenter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Interval => "interval",
            Strategy::Min => "min",
            Strategy::Max => "max",
            Strategy::Random => "random",
            Strategy::Herding => "herding",
            Strategy::Kcenter => "kcenter",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn needs_scores(self) -> bool {
        matches!(self, Strategy::Interval | Strategy::Min | Strategy::Max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSpec {
    pub strategy: Strategy,
    /// Stride through the difficulty ranking (interval only).
    pub k: usize,
    /// Samples per class.
    pub budget: usize,
    /// Used by `random` only.
    pub seed: u64,
}

impl SelectionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("interval k must be >= 1"));
        }
        if self.budget == 0 {
            return Err(invalid("budget must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class: usize,
    /// Global indices in selection order.
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub spec: SelectionSpec,
    pub per_class: Vec<ClassSelection>,
}

impl SelectionResult {
    /// Class-major, selection-order list of global indices.
    pub fn all_indices(&self) -> Vec<usize> {
        self.per_class.iter().flat_map(|c| c.indices.iter().copied()).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.per_class.iter().map(|c| c.indices.len()).collect()
    }

    pub fn len(&self) -> usize {
        self.per_class.iter().map(|c| c.indices.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks uniqueness, label agreement and exact per-class counts.
    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        let mut seen = vec![false; labels.len()];
        for cs in &self.per_class {
            if cs.indices.len() != self.spec.budget {
                return Err(invalid(format!(
                    "class {} has {} selected, budget {}",
                    cs.class,
                    cs.indices.len(),
                    self.spec.budget
                )));
            }
            for &i in &cs.indices {
                if i >= labels.len() {
                    return Err(Error::Range {
                        what: "selected index",
                        value: i as f64,
                        range: "[0, n)",
                    });
                }
                if seen[i] {
                    return Err(invalid(format!("index {i} selected twice")));
                }
                seen[i] = true;
                if labels[i] != cs.class {
                    return Err(invalid(format!(
                        "index {i} has label {} but sits in class {}",
                        labels[i], cs.class
                    )));
                }
            }
        }
        Ok(())
    }
}

fn buckets(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut b = vec![Vec::new(); classes];
    for (pos, &y) in labels.iter().enumerate() {
        b[y].push(pos);
    }
    b
}

fn table_buckets(table: &ScoreTable) -> Vec<Vec<(f64, usize)>> {
    let mut b = vec![Vec::new(); table.classes()];
    for p in 0..table.len() {
        b[table.labels[p]].push((table.scores[p], table.indices[p]));
    }
    b
}

fn ascending(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn check_budget(class: usize, required: usize, available: usize) -> Result<()> {
    if required > available {
        return Err(Error::Budget {
            class,
            required,
            available,
        });
    }
    Ok(())
}

/// Per class: sort ascending by score and keep ranks `0, k, 2k, ..., (m-1)k`.
pub fn interval_select(table: &ScoreTable, k: usize, m: usize) -> Result<SelectionResult> {
    let spec = SelectionSpec {
        strategy: Strategy::Interval,
        k,
        budget: m,
        seed: 0,
    };
    spec.validate()?;
    let mut per_class = Vec::new();
    for (class, mut items) in table_buckets(table).into_iter().enumerate() {
        check_budget(class, (m - 1) * k + 1, items.len())?;
        items.sort_by(ascending);
        let indices = (0..m).map(|j| items[j * k].1).collect();
        per_class.push(ClassSelection { class, indices });
    }
    Ok(SelectionResult { spec, per_class })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extreme {
    Min,
    Max,
}

/// Lowest or highest `m` scores per class. Ties resolve to the lower index
/// in both modes.
pub fn extreme_select(table: &ScoreTable, mode: Extreme, m: usize) -> Result<SelectionResult> {
    let spec = SelectionSpec {
        strategy: match mode {
            Extreme::Min => Strategy::Min,
            Extreme::Max => Strategy::Max,
        },
        k: 1,
        budget: m,
        seed: 0,
    };
    spec.validate()?;
    let mut per_class = Vec::new();
    for (class, mut items) in table_buckets(table).into_iter().enumerate() {
        check_budget(class, m, items.len())?;
        match mode {
            Extreme::Min => items.sort_by(ascending),
            Extreme::Max => items.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))),
        }
        let indices = items[..m].iter().map(|x| x.1).collect();
        per_class.push(ClassSelection { class, indices });
    }
    Ok(SelectionResult { spec, per_class })
}

/// Uniform sample without replacement per class; class `y` draws from its
/// own stream of `seed`.
pub fn random_select(data: &LabeledDataset, m: usize, seed: u64) -> Result<SelectionResult> {
    let spec = SelectionSpec {
        strategy: Strategy::Random,
        k: 1,
        budget: m,
        seed,
    };
    spec.validate()?;
    let mut per_class = Vec::new();
    for (class, members) in buckets(&data.labels, data.classes).into_iter().enumerate() {
        check_budget(class, m, members.len())?;
        let mut r = substream(seed, class as u64);
        let picks = rand::seq::index::sample(&mut r, members.len(), m);
        let indices = picks.into_iter().map(|p| members[p]).collect();
        per_class.push(ClassSelection { class, indices });
    }
    Ok(SelectionResult { spec, per_class })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroid(data: &LabeledDataset, members: &[usize]) -> Vec<f64> {
    let d = data.dim();
    let mut mu = vec![0.0; d];
    for &i in members {
        for (m, x) in mu.iter_mut().zip(data.sample(i)) {
            *m += x;
        }
    }
    for m in &mut mu {
        *m /= members.len() as f64;
    }
    mu
}

/// Greedy herding in sample space: each step adds the sample that brings the
/// running mean of the selection closest to the class mean.
pub fn herding_select(data: &LabeledDataset, m: usize) -> Result<SelectionResult> {
    let spec = SelectionSpec {
        strategy: Strategy::Herding,
        k: 1,
        budget: m,
        seed: 0,
    };
    spec.validate()?;
    let d = data.dim();
    let mut per_class = Vec::new();
    for (class, members) in buckets(&data.labels, data.classes).into_iter().enumerate() {
        check_budget(class, m, members.len())?;
        let mu = centroid(data, &members);
        let mut sum = vec![0.0; d];
        let mut taken = vec![false; members.len()];
        let mut indices = Vec::with_capacity(m);
        let mut cand = vec![0.0; d];
        for step in 0..m {
            let denom = (step + 1) as f64;
            let mut best: Option<(f64, usize)> = None;
            for (p, &i) in members.iter().enumerate() {
                if taken[p] {
                    continue;
                }
                for ((c, s), x) in cand.iter_mut().zip(&sum).zip(data.sample(i)) {
                    *c = (s + x) / denom;
                }
                let dist = sq_dist(&mu, &cand);
                if best.is_none_or(|(b, _)| dist < b) {
                    best = Some((dist, p));
                }
            }
            let (_, p) = best.expect("budget checked");
            taken[p] = true;
            for (s, x) in sum.iter_mut().zip(data.sample(members[p])) {
                *s += x;
            }
            indices.push(members[p]);
        }
        per_class.push(ClassSelection { class, indices });
    }
    Ok(SelectionResult { spec, per_class })
}

/// Farthest-point greedy seeded at the sample nearest the class mean.
pub fn kcenter_select(data: &LabeledDataset, m: usize) -> Result<SelectionResult> {
    let spec = SelectionSpec {
        strategy: Strategy::Kcenter,
        k: 1,
        budget: m,
        seed: 0,
    };
    spec.validate()?;
    let mut per_class = Vec::new();
    for (class, members) in buckets(&data.labels, data.classes).into_iter().enumerate() {
        check_budget(class, m, members.len())?;
        let mu = centroid(data, &members);
        let mut first = 0;
        let mut first_d = f64::INFINITY;
        for (p, &i) in members.iter().enumerate() {
            let dist = sq_dist(&mu, data.sample(i));
            if dist < first_d {
                first_d = dist;
                first = p;
            }
        }
        let mut taken = vec![false; members.len()];
        let mut near = vec![f64::INFINITY; members.len()];
        let mut indices = Vec::with_capacity(m);
        let mut newest = first;
        loop {
            taken[newest] = true;
            indices.push(members[newest]);
            if indices.len() == m {
                break;
            }
            let c = data.sample(members[newest]);
            let mut best: Option<(f64, usize)> = None;
            for (p, &i) in members.iter().enumerate() {
                if taken[p] {
                    continue;
                }
                near[p] = near[p].min(sq_dist(c, data.sample(i)));
                if best.is_none_or(|(b, _)| near[p] > b) {
                    best = Some((near[p], p));
                }
            }
            newest = best.expect("budget checked").1;
        }
        per_class.push(ClassSelection { class, indices });
    }
    Ok(SelectionResult { spec, per_class })
}

/// Dispatches on `spec.strategy`. Score-based strategies need `table`.
pub fn select(spec: &SelectionSpec, data: &LabeledDataset, table: Option<&ScoreTable>) -> Result<SelectionResult> {
    spec.validate()?;
    let need = || table.ok_or_else(|| invalid(format!("strategy {} needs a score table", spec.strategy.name())));
    let mut out = match spec.strategy {
        Strategy::Interval => interval_select(need()?, spec.k, spec.budget)?,
        Strategy::Min => extreme_select(need()?, Extreme::Min, spec.budget)?,
        Strategy::Max => extreme_select(need()?, Extreme::Max, spec.budget)?,
        Strategy::Random => random_select(data, spec.budget, spec.seed)?,
        Strategy::Herding => herding_select(data, spec.budget)?,
        Strategy::Kcenter => kcenter_select(data, spec.budget)?,
    };
    out.spec = *spec;
    out.validate(&data.labels)?;
    Ok(out)
}
