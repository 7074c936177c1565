//! Synthetic task generators, group-label budgets and group statistics.
//!
//! Every row carries a class label and a group label. Groups are nested in
//! classes (`class_of_group[z] == y`). Ground-truth group labels are always
//! stored; which of them a method may read is decided by a [`LabelMask`].

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `len() x dim` feature matrix.
    pub features: Vec<f64>,
    pub dim: usize,
    pub class_labels: Vec<usize>,
    pub group_labels: Vec<usize>,
    pub class_of_group: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        class_labels: Vec<usize>,
        group_labels: Vec<usize>,
        class_of_group: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let n = class_labels.len();
        if group_labels.len() != n || features.len() != n * dim {
            return Err(Error::Shape(format!(
                "{} class labels, {} group labels, {} feature values for dim {}",
                n,
                group_labels.len(),
                features.len(),
                dim
            )));
        }
        if let Some(&c) = class_of_group.iter().find(|&&c| c >= num_classes) {
            return Err(Error::LabelRange {
                label: c,
                groups: num_classes,
            });
        }
        for (&y, &z) in class_labels.iter().zip(&group_labels) {
            if z >= class_of_group.len() {
                return Err(Error::LabelRange {
                    label: z,
                    groups: class_of_group.len(),
                });
            }
            if class_of_group[z] != y {
                return Err(Error::Parameter(format!(
                    "group {z} belongs to class {} but row has class {y}",
                    class_of_group[z]
                )));
            }
        }
        Ok(Self {
            features,
            dim,
            class_labels,
            group_labels,
            class_of_group,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.class_of_group.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn groups_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.num_groups())
            .filter(|&g| self.class_of_group[g] == class)
            .collect()
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_groups()];
        for &z in &self.group_labels {
            counts[z] += 1;
        }
        counts
    }

    /// Row indices of each group.
    pub fn group_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_groups()];
        for (i, &z) in self.group_labels.iter().enumerate() {
            out[z].push(i);
        }
        out
    }

    /// Rows `idx` (in that order) as a new dataset.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            dim: self.dim,
            class_labels: idx.iter().map(|&i| self.class_labels[i]).collect(),
            group_labels: idx.iter().map(|&i| self.group_labels[i]).collect(),
            class_of_group: self.class_of_group.clone(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

// ---------------------------------------------------------------------------
// Generators

/// Two classes crossed with two environments; the environment agrees with the
/// class with probability `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpuriousTask {
    pub rho: f64,
    pub mu_core: f64,
    pub mu_spur: f64,
    pub noise_dims: usize,
    /// P(y = 0).
    pub class0_prior: f64,
}

impl Default for SpuriousTask {
    fn default() -> Self {
        Self {
            rho: 0.95,
            mu_core: 1.0,
            mu_spur: 2.0,
            noise_dims: 8,
            class0_prior: 0.5,
        }
    }
}

/// Gaussian blobs on a circle, one per group; the lower half of the group
/// indices is class 0. One group is thinned to `rare_frac` of its mass.
#[derive(Debug, Clone, PartialEq)]
pub struct RareGroupTask {
    pub num_groups: usize,
    pub rare_group: usize,
    pub rare_frac: f64,
    pub radius: f64,
    pub noise_dims: usize,
}

impl Default for RareGroupTask {
    fn default() -> Self {
        Self {
            num_groups: 10,
            rare_group: 8,
            rare_frac: 0.05,
            radius: 3.0,
            noise_dims: 2,
        }
    }
}

impl RareGroupTask {
    /// Circle slot of each group. Class-0 groups fill the first half of the
    /// circle and class-1 groups the second; the rare group is placed in the
    /// slot next to the class boundary.
    pub fn slots(&self) -> Vec<usize> {
        let half = self.num_groups / 2;
        let mut order0: Vec<usize> = (0..half).collect();
        let mut order1: Vec<usize> = (half..self.num_groups).collect();
        if self.rare_group < half {
            order0.retain(|&g| g != self.rare_group);
            order0.push(self.rare_group);
        } else if self.rare_group < self.num_groups {
            order1.retain(|&g| g != self.rare_group);
            order1.insert(0, self.rare_group);
        }
        let mut slot = vec![0; self.num_groups];
        for (s, &g) in order0.iter().chain(order1.iter()).enumerate() {
            slot[g] = s;
        }
        slot
    }

    /// Mean of each group in the two leading feature dimensions.
    pub fn means(&self) -> Vec<[f64; 2]> {
        let g = self.num_groups as f64;
        self.slots()
            .into_iter()
            .map(|s| {
                let angle = 2.0 * PI * (s as f64 + 0.5) / g;
                [self.radius * angle.cos(), self.radius * angle.sin()]
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        2 + self.noise_dims
    }

    fn validate(&self) -> Result<()> {
        if self.num_groups < 2 || self.num_groups % 2 != 0 {
            return Err(Error::Parameter(format!(
                "num_groups must be even and >= 2, got {}",
                self.num_groups
            )));
        }
        if self.rare_group >= self.num_groups {
            return Err(Error::Parameter(format!(
                "rare_group {} out of range",
                self.rare_group
            )));
        }
        if !(self.rare_frac > 0.0 && self.rare_frac <= 1.0) {
            return Err(Error::Parameter(format!(
                "rare_frac must lie in (0, 1], got {}",
                self.rare_frac
            )));
        }
        Ok(())
    }
}

/// Spurious-correlation task. Group index is `2y + e`. Rows are drawn i.i.d.
pub fn gen_spurious(n: usize, task: &SpuriousTask, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&task.rho) {
        return Err(Error::Parameter(format!(
            "rho must lie in [0, 1), got {}",
            task.rho
        )));
    }
    if !(task.class0_prior > 0.0 && task.class0_prior < 1.0) {
        return Err(Error::Parameter(format!(
            "class0_prior must lie in (0, 1), got {}",
            task.class0_prior
        )));
    }
    let dim = 2 + task.noise_dims;
    let mut r = rng::stream(seed, 0);
    let mut features = Vec::with_capacity(n * dim);
    let mut classes = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        let y = usize::from(r.random::<f64>() >= task.class0_prior);
        let e = if r.random::<f64>() < task.rho { y } else { 1 - y };
        let sign = |b: usize| if b == 1 { 1.0 } else { -1.0 };
        let core: f64 = StandardNormal.sample(&mut r);
        let spur: f64 = StandardNormal.sample(&mut r);
        features.push(sign(y) * task.mu_core + core);
        features.push(sign(e) * task.mu_spur + spur);
        for _ in 0..task.noise_dims {
            features.push(StandardNormal.sample(&mut r));
        }
        classes.push(y);
        groups.push(2 * y + e);
    }
    Dataset::new(features, dim, classes, groups, vec![0, 0, 1, 1], 2, Split::Train)
}

/// Rare-group task. `n` is the number of draws before thinning, so the
/// returned dataset has fewer rows whenever `rare_frac < 1`.
pub fn gen_rare_group(n: usize, task: &RareGroupTask, seed: u64) -> Result<Dataset> {
    task.validate()?;
    let g_count = task.num_groups;
    let half = g_count / 2;
    let means = task.means();
    let dim = task.dim();
    let mut r = rng::stream(seed, 0);
    let mut features = Vec::with_capacity(n * dim);
    let mut classes = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        let g = r.random_range(0..g_count);
        let keep = r.random::<f64>();
        let mut row = Vec::with_capacity(dim);
        for k in 0..2 {
            let eps: f64 = StandardNormal.sample(&mut r);
            row.push(means[g][k] + eps);
        }
        for _ in 0..task.noise_dims {
            row.push(StandardNormal.sample(&mut r));
        }
        if g == task.rare_group && keep >= task.rare_frac {
            continue;
        }
        features.extend(row);
        classes.push(usize::from(g >= half));
        groups.push(g);
    }
    let class_of_group = (0..g_count).map(|g| usize::from(g >= half)).collect();
    Dataset::new(features, dim, classes, groups, class_of_group, 2, Split::Train)
}

/// Point-mass construction: every row is the single zero feature, classes
/// equal groups and are drawn from `priors`.
pub fn gen_pointmass(priors: &[f64], n: usize, seed: u64) -> Result<Dataset> {
    validate_priors(priors)?;
    let k = priors.len();
    let mut r = rng::stream(seed, 0);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = r.random();
        let mut acc = 0.0;
        let mut label = k - 1;
        for (c, &p) in priors.iter().enumerate() {
            acc += p;
            if u < acc {
                label = c;
                break;
            }
        }
        labels.push(label);
    }
    Dataset::new(
        vec![0.0; n],
        1,
        labels.clone(),
        labels,
        (0..k).collect(),
        k,
        Split::Train,
    )
}

pub(crate) fn validate_priors(priors: &[f64]) -> Result<()> {
    if priors.is_empty() {
        return Err(Error::Parameter("empty prior vector".into()));
    }
    if let Some(p) = priors.iter().find(|&&p| !(p > 0.0)) {
        return Err(Error::Parameter(format!("prior {p} is not positive")));
    }
    let total: f64 = priors.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("priors sum to {total}, not 1")));
    }
    Ok(())
}

/// A generator family plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Task {
    Spurious(SpuriousTask),
    RareGroup(RareGroupTask),
    PointMass { priors: Vec<f64> },
}

impl Task {
    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        match self {
            Task::Spurious(t) => gen_spurious(n, t, seed),
            Task::RareGroup(t) => gen_rare_group(n, t, seed),
            Task::PointMass { priors } => gen_pointmass(priors, n, seed),
        }
    }

    /// Same group-conditional distributions with uniform group proportions;
    /// used for validation and test splits.
    pub fn balanced(&self) -> Task {
        match self {
            Task::Spurious(t) => Task::Spurious(SpuriousTask {
                rho: 0.5,
                class0_prior: 0.5,
                ..t.clone()
            }),
            Task::RareGroup(t) => Task::RareGroup(RareGroupTask {
                rare_frac: 1.0,
                ..t.clone()
            }),
            Task::PointMass { priors } => Task::PointMass {
                priors: vec![1.0 / priors.len() as f64; priors.len()],
            },
        }
    }

    pub fn num_groups(&self) -> usize {
        match self {
            Task::Spurious(_) => 4,
            Task::RareGroup(t) => t.num_groups,
            Task::PointMass { priors } => priors.len(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Task::PointMass { priors } => priors.len(),
            _ => 2,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Task::Spurious(t) => 2 + t.noise_dims,
            Task::RareGroup(t) => t.dim(),
            Task::PointMass { .. } => 1,
        }
    }

    /// Population group proportions of the (unbalanced) training law.
    pub fn group_proportions(&self) -> Vec<f64> {
        match self {
            Task::Spurious(t) => {
                let p0 = t.class0_prior;
                vec![p0 * t.rho, p0 * (1.0 - t.rho), (1.0 - p0) * (1.0 - t.rho), (1.0 - p0) * t.rho]
            }
            Task::RareGroup(t) => {
                let g = t.num_groups as f64;
                let total = (g - 1.0) + t.rare_frac;
                (0..t.num_groups)
                    .map(|k| if k == t.rare_group { t.rare_frac / total } else { 1.0 / total })
                    .collect()
            }
            Task::PointMass { priors } => priors.clone(),
        }
    }
}

/// Train/val/test draws of one task. Validation and test are group-balanced.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn generate_splits(
    task: &Task,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<Splits> {
    let balanced = task.balanced();
    Ok(Splits {
        train: task
            .generate(n_train, rng::child_seed(seed, substream::DATA_TRAIN))?
            .with_split(Split::Train),
        val: balanced
            .generate(n_val, rng::child_seed(seed, substream::DATA_VAL))?
            .with_split(Split::Val),
        test: balanced
            .generate(n_test, rng::child_seed(seed, substream::DATA_TEST))?
            .with_split(Split::Test),
    })
}

// ---------------------------------------------------------------------------
// Group-label budgets

/// Which rows have a visible group label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    /// D1: group-labeled training rows (sorted).
    pub labeled_train_idx: Vec<usize>,
    /// D2: the remaining training rows (sorted).
    pub unlabeled_train_idx: Vec<usize>,
    /// Group-labeled validation rows (sorted).
    pub labeled_val_idx: Vec<usize>,
}

impl LabelMask {
    /// Every training and validation label visible.
    pub fn full(train: &Dataset, val: &Dataset) -> Self {
        Self {
            labeled_train_idx: (0..train.len()).collect(),
            unlabeled_train_idx: Vec::new(),
            labeled_val_idx: (0..val.len()).collect(),
        }
    }

    pub fn is_labeled_train(&self, i: usize) -> bool {
        self.labeled_train_idx.binary_search(&i).is_ok()
    }
}

/// Draws `budget` rows per group, without replacement, in both train and
/// validation. The two draws use independent streams of `seed`.
pub fn sample_group_budget(
    train: &Dataset,
    val: &Dataset,
    budget: usize,
    seed: u64,
) -> Result<LabelMask> {
    let draw = |ds: &Dataset, stream_id: u64| -> Result<Vec<usize>> {
        let mut r = rng::stream(seed, stream_id);
        let mut chosen = Vec::with_capacity(budget * ds.num_groups());
        for (g, members) in ds.group_indices().into_iter().enumerate() {
            if members.len() < budget {
                return Err(Error::BudgetInfeasible {
                    group: g,
                    available: members.len(),
                    budget,
                });
            }
            chosen.extend(
                index::sample(&mut r, members.len(), budget)
                    .into_iter()
                    .map(|k| members[k]),
            );
        }
        chosen.sort_unstable();
        Ok(chosen)
    };
    let labeled_train_idx = draw(train, substream::MASK_TRAIN)?;
    let labeled_val_idx = draw(val, substream::MASK_VAL)?;
    let unlabeled_train_idx = (0..train.len())
        .filter(|i| labeled_train_idx.binary_search(i).is_err())
        .collect();
    Ok(LabelMask {
        labeled_train_idx,
        unlabeled_train_idx,
        labeled_val_idx,
    })
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub counts: Vec<usize>,
    pub proportions: Vec<f64>,
    pub q_min: f64,
}

pub fn group_stats(ds: &Dataset) -> Result<GroupStats> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(stats_from_counts(ds.group_counts()))
}

pub fn stats_from_counts(counts: Vec<usize>) -> GroupStats {
    let total: usize = counts.iter().sum();
    let proportions: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect();
    let q_min = proportions.iter().cloned().fold(f64::INFINITY, f64::min);
    GroupStats {
        counts,
        proportions,
        q_min,
    }
}

/// Proportion-weighted average of per-group values.
pub fn reweighted_metric(per_group_values: &[f64], train_proportions: &[f64]) -> Result<f64> {
    if per_group_values.len() != train_proportions.len() {
        return Err(Error::Shape(format!(
            "{} values against {} proportions",
            per_group_values.len(),
            train_proportions.len()
        )));
    }
    Ok(per_group_values
        .iter()
        .zip(train_proportions)
        .map(|(v, p)| v * p)
        .sum())
}

// ---------------------------------------------------------------------------
// Text format
//
//   n d C G
//   f_0 ... f_{d-1} y z        (one line per row)
//   class_of_group g_0 ... g_{G-1}

pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> std::io::Result<()> {
    writeln!(
        w,
        "{} {} {} {}",
        ds.len(),
        ds.dim,
        ds.num_classes,
        ds.num_groups()
    )?;
    let mut line = String::new();
    for i in 0..ds.len() {
        line.clear();
        for v in ds.row(i) {
            line.push_str(&format_f64(*v));
            line.push(' ');
        }
        line.push_str(&format!("{} {}", ds.class_labels[i], ds.group_labels[i]));
        writeln!(w, "{line}")?;
    }
    write!(w, "class_of_group")?;
    for c in &ds.class_of_group {
        write!(w, " {c}")?;
    }
    writeln!(w)
}

/// 17 significant digits, enough for an exact f64 round trip.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn read_dataset<R: BufRead>(r: R, split: Split) -> Result<Dataset> {
    let mut lines = r.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse("unexpected end of file".into()))?
            .map_err(|e| Error::Parse(e.to_string()))
    };
    let header = parse_usizes(&next()?)?;
    let [n, d, c, g] = header[..] else {
        return Err(Error::Parse("header must be `n d C G`".into()));
    };
    let mut features = Vec::with_capacity(n * d);
    let mut classes = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for row in 0..n {
        let line = next()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != d + 2 {
            return Err(Error::Parse(format!(
                "row {row}: expected {} fields, found {}",
                d + 2,
                fields.len()
            )));
        }
        for f in &fields[..d] {
            features.push(
                f.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {row}: {e}")))?,
            );
        }
        classes.push(parse_usize(fields[d])?);
        groups.push(parse_usize(fields[d + 1])?);
    }
    let map_line = next()?;
    let mut fields = map_line.split_whitespace();
    if fields.next() != Some("class_of_group") {
        return Err(Error::Parse("missing class_of_group line".into()));
    }
    let class_of_group = fields.map(parse_usize).collect::<Result<Vec<_>>>()?;
    if class_of_group.len() != g {
        return Err(Error::Parse(format!(
            "class_of_group has {} entries, header says {g}",
            class_of_group.len()
        )));
    }
    Dataset::new(features, d, classes, groups, class_of_group, c, split)
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|e| Error::Parse(format!("`{s}`: {e}")))
}

fn parse_usizes(line: &str) -> Result<Vec<usize>> {
    line.split_whitespace().map(parse_usize).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binomial_band(n: usize, p: f64) -> (f64, f64) {
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        (mean - 3.0 * sd, mean + 3.0 * sd)
    }

    #[test]
    fn spurious_group_counts_follow_generative_law() {
        // chi-square of group counts against the generative law, 10 seeds,
        // 3 degrees of freedom; 99.9% quantile is 16.27.
        let task = SpuriousTask::default();
        let probs = Task::Spurious(task.clone()).group_proportions();
        for seed in 0..10 {
            let ds = gen_spurious(4795, &task, seed).unwrap();
            let counts = ds.group_counts();
            let chi2: f64 = counts
                .iter()
                .zip(&probs)
                .map(|(&c, &p)| {
                    let e = 4795.0 * p;
                    (c as f64 - e).powi(2) / e
                })
                .sum();
            assert!(chi2 < 16.27, "seed {seed}: chi2 {chi2}, counts {counts:?}");
            for (&c, &p) in counts.iter().zip(&probs) {
                let (lo, hi) = binomial_band(4795, p);
                assert!((c as f64) >= lo && (c as f64) <= hi, "{counts:?}");
            }
        }
    }

    #[test]
    fn spurious_minority_fraction_converges() {
        let task = SpuriousTask::default();
        let ds = gen_spurious(100_000, &task, 3).unwrap();
        let c = ds.group_counts();
        for (minority, class_total) in [(c[1], c[0] + c[1]), (c[2], c[2] + c[3])] {
            let (lo, hi) = binomial_band(class_total, 0.05);
            assert!((minority as f64) > lo && (minority as f64) < hi);
        }
    }

    #[test]
    fn waterbirds_profile_is_reachable() {
        let task = SpuriousTask {
            class0_prior: 0.768,
            ..SpuriousTask::default()
        };
        let expected = [3498.0, 184.0, 56.0, 1057.0];
        let probs = Task::Spurious(task.clone()).group_proportions();
        for (p, e) in probs.iter().zip(expected) {
            // structural match of the split sizes, within 1.5% of each count
            assert!((p * 4795.0 - e).abs() / e < 0.015, "{p} vs {e}");
        }
        let ds = gen_spurious(4795, &task, 0).unwrap();
        for (&c, &p) in ds.group_counts().iter().zip(&probs) {
            let (lo, hi) = binomial_band(4795, p);
            assert!((c as f64) >= lo && (c as f64) <= hi);
        }
    }

    #[test]
    fn empty_spurious_dataset_keeps_group_map() {
        let ds = gen_spurious(0, &SpuriousTask::default(), 1).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.class_of_group, vec![0, 0, 1, 1]);
    }

    #[test]
    fn spurious_rejects_rho_one() {
        let task = SpuriousTask {
            rho: 1.0,
            ..SpuriousTask::default()
        };
        assert!(matches!(gen_spurious(10, &task, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn rare_group_thinning_law() {
        let task = RareGroupTask::default();
        let ds = gen_rare_group(10_000, &task, 1).unwrap();
        let c = ds.group_counts();
        let (lo, hi) = binomial_band(10_000, 0.1 * 0.05);
        assert!((c[8] as f64) >= lo && (c[8] as f64) <= hi, "{c:?}");
        for (g, &count) in c.iter().enumerate().filter(|(g, _)| *g != 8) {
            let (lo, hi) = binomial_band(10_000, 0.1);
            assert!((count as f64) >= lo && (count as f64) <= hi, "group {g}: {c:?}");
        }
    }

    #[test]
    fn rare_group_without_thinning_is_uniform() {
        let task = RareGroupTask {
            rare_frac: 1.0,
            ..RareGroupTask::default()
        };
        let ds = gen_rare_group(10_000, &task, 2).unwrap();
        assert_eq!(ds.len(), 10_000);
        let chi2: f64 = ds
            .group_counts()
            .iter()
            .map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0)
            .sum();
        // 9 dof, 99.9% quantile 27.88
        assert!(chi2 < 27.88);
    }

    #[test]
    fn rare_group_profile_ratio() {
        // U-MNIST-like profile: rare group at ~5% of the others.
        let ratio = 234.0 / 4720.0;
        assert!((ratio - 0.05_f64).abs() < 0.002);
        let ds = gen_rare_group(50_000, &RareGroupTask::default(), 4).unwrap();
        let c = ds.group_counts();
        let others = c.iter().enumerate().filter(|(g, _)| *g != 8).map(|(_, &v)| v as f64).sum::<f64>() / 9.0;
        assert!((c[8] as f64 / others - 0.05).abs() < 0.01);
    }

    #[test]
    fn rare_group_sits_next_to_class_boundary() {
        let task = RareGroupTask::default();
        assert_eq!(task.slots()[8], 5);
        let task0 = RareGroupTask {
            rare_group: 1,
            ..RareGroupTask::default()
        };
        assert_eq!(task0.slots()[1], 4);
    }

    #[test]
    fn rare_group_rejects_bad_params() {
        let bad = RareGroupTask {
            rare_frac: 0.0,
            ..RareGroupTask::default()
        };
        assert!(gen_rare_group(10, &bad, 0).is_err());
        let odd = RareGroupTask {
            num_groups: 5,
            rare_group: 1,
            ..RareGroupTask::default()
        };
        assert!(gen_rare_group(10, &odd, 0).is_err());
    }

    #[test]
    fn pointmass_frequencies_and_identical_rows() {
        let priors = [0.7, 0.1, 0.1, 0.1];
        let ds = gen_pointmass(&priors, 10_000, 0).unwrap();
        for (c, &p) in ds.group_counts().iter().zip(&priors) {
            let (lo, hi) = binomial_band(10_000, p);
            assert!((*c as f64) >= lo && (*c as f64) <= hi);
        }
        let first = ds.row(0).to_vec();
        assert!((0..ds.len()).all(|i| ds.row(i) == first.as_slice()));
        assert_eq!(ds.class_labels, ds.group_labels);
    }

    #[test]
    fn pointmass_single_class() {
        let ds = gen_pointmass(&[1.0], 5, 9).unwrap();
        assert!(ds.class_labels.iter().all(|&y| y == 0));
        assert_eq!(group_stats(&ds).unwrap().q_min, 1.0);
        assert!(gen_pointmass(&[0.5, 0.5, 0.0], 3, 0).is_err());
    }

    #[test]
    fn pointmass_q_min_concentrates() {
        let ds = gen_pointmass(&[0.7, 0.1, 0.1, 0.1], 200_000, 5).unwrap();
        assert!((group_stats(&ds).unwrap().q_min - 0.1).abs() < 0.003);
    }

    #[test]
    fn generators_are_bit_deterministic() {
        let a = gen_spurious(500, &SpuriousTask::default(), 42).unwrap();
        let b = gen_spurious(500, &SpuriousTask::default(), 42).unwrap();
        assert_eq!(a, b);
        let c = gen_rare_group(500, &RareGroupTask::default(), 42).unwrap();
        let d = gen_rare_group(500, &RareGroupTask::default(), 42).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn budget_mask_counts_and_partition() {
        let train = gen_spurious(4000, &SpuriousTask::default(), 1).unwrap();
        let val = Task::Spurious(SpuriousTask::default()).balanced().generate(800, 2).unwrap();
        let mask = sample_group_budget(&train, &val, 8, 0).unwrap();
        assert_eq!(mask.labeled_train_idx.len(), 32);
        assert_eq!(mask.labeled_val_idx.len(), 32);
        let mut all: Vec<usize> = mask
            .labeled_train_idx
            .iter()
            .chain(&mask.unlabeled_train_idx)
            .cloned()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..train.len()).collect::<Vec<_>>());
        for g in 0..4 {
            let n = mask
                .labeled_train_idx
                .iter()
                .filter(|&&i| train.group_labels[i] == g)
                .count();
            assert_eq!(n, 8);
        }
        let other = sample_group_budget(&train, &val, 8, 1).unwrap();
        assert_ne!(mask.labeled_train_idx, other.labeled_train_idx);
    }

    #[test]
    fn budget_zero_and_infeasible() {
        let train = gen_spurious(400, &SpuriousTask::default(), 1).unwrap();
        let val = train.clone();
        let mask = sample_group_budget(&train, &val, 0, 0).unwrap();
        assert!(mask.labeled_train_idx.is_empty());
        let minority = train.group_counts()[1];
        match sample_group_budget(&train, &val, minority + 1, 0) {
            Err(Error::BudgetInfeasible { group, .. }) => assert!(group == 1 || group == 2),
            other => panic!("expected BudgetInfeasible, got {other:?}"),
        }
    }

    #[test]
    fn group_stats_cases() {
        assert!(matches!(
            group_stats(&gen_spurious(0, &SpuriousTask::default(), 0).unwrap()),
            Err(Error::EmptyDataset)
        ));
        let s = stats_from_counts(vec![10, 10, 10, 10]);
        assert_eq!(s.proportions, vec![0.25; 4]);
        assert_eq!(s.q_min, 0.25);
        let wb = stats_from_counts(vec![3498, 184, 56, 1057]);
        assert!((wb.q_min - 56.0 / 4795.0).abs() < 1e-15);
        assert!((wb.q_min - 0.01168).abs() < 1e-5);
    }

    #[test]
    fn reweighted_metric_cases() {
        assert_eq!(reweighted_metric(&[1.0; 4], &[0.1, 0.2, 0.3, 0.4]).unwrap(), 1.0);
        let v = reweighted_metric(&[0.9, 0.5], &[0.95, 0.05]).unwrap();
        assert!((v - 0.88).abs() < 1e-12);
        let v = reweighted_metric(&[0.2, 0.4, 0.9], &[1.0 / 3.0; 3]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert_eq!(reweighted_metric(&[0.3, 0.7, 0.1], &[0.0, 1.0, 0.0]).unwrap(), 0.7);
        assert!(matches!(reweighted_metric(&[1.0], &[0.5, 0.5]), Err(Error::Shape(_))));
    }

    #[test]
    fn text_format_round_trip() {
        let ds = gen_rare_group(300, &RareGroupTask::default(), 7).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let back = read_dataset(buf.as_slice(), Split::Train).unwrap();
        assert_eq!(ds, back);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(&format!("{} 4 2 10\n", ds.len())));
        assert!(text.trim_end().ends_with("class_of_group 0 0 0 0 0 1 1 1 1 1"));
    }

    #[test]
    fn text_format_rejects_garbage() {
        assert!(read_dataset("2 1 2 2\n0.5 0 0\n".as_bytes(), Split::Train).is_err());
        assert!(read_dataset("1 1 2 2\n0.5 0 1\nclass_of_group 0 1\n".as_bytes(), Split::Train).is_err());
    }
}
