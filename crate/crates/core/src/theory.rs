//! Numerical checks of the worst-group generalisation results.
//!
//! * [`pointmass_experiment`]: ERM against group DRO on a single point where
//!   groups equal classes.
//! * [`perturb_check`] / [`perturb_search`]: minimisers of a max of tables
//!   under bounded per-group offsets.
//! * [`coupling_check`]: per-group expected losses under a resampled group
//!   variable with matched conditionals, by exact enumeration.
//! * [`loss_bound_check`]: the misclassification bound implied by a loss value.
//! * [`robust_oracle`] and [`excess_risk_scaling`]: rate of the excess
//!   worst-group risk in the training size.

use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;

use crate::dataset::{self, Dataset, RareGroupTask, SpuriousTask, Task};
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig, LossKind};
use crate::model::{self, Arch};
use crate::optim::{self, initial_params, Problem, Sampling, TrainConfig};
use crate::pipeline;
use crate::rng::{self, child_seed, substream};

// ---------------------------------------------------------------------------
// Point mass

/// Both trainers draw batches as large as the dataset and run `steps` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PointmassConfig {
    pub erm: TrainConfig,
    pub gdro: TrainConfig,
    pub steps: usize,
}

impl Default for PointmassConfig {
    fn default() -> Self {
        let erm = TrainConfig {
            lr: 0.5,
            sampling: Sampling::Iid,
            eval_every: 1_000_000,
            ..TrainConfig::default()
        };
        let gdro = TrainConfig {
            sampling: Sampling::UniformPerGroup,
            eta_group: 0.05,
            ..erm.clone()
        };
        Self { erm, gdro, steps: 400 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointmassRecord {
    pub erm_worst_loss: f64,
    pub gdro_worst_loss: f64,
    pub ratio: f64,
    /// `log(1/q) / log k` with `q` the smallest prior.
    pub bound: f64,
    pub erm_probs: Vec<f64>,
    pub gdro_probs: Vec<f64>,
}

/// Worst-group loss of a constant prediction: every group is one class.
fn pointmass_worst(probs: &[f64], loss: &LossConfig) -> f64 {
    (0..probs.len())
        .map(|g| loss::loss_value(loss, probs, g))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn pointmass_experiment(
    priors: &[f64],
    n: usize,
    seed: u64,
    loss: &LossConfig,
    cfg: &PointmassConfig,
) -> Result<PointmassRecord> {
    dataset::validate_priors(priors)?;
    let k = priors.len();
    if k < 2 {
        return Err(Error::Parameter("point mass needs at least two classes".into()));
    }
    let q = priors.iter().cloned().fold(f64::INFINITY, f64::min);
    if loss.kind == LossKind::TruncatedCe && loss.bound <= (1.0 / q).ln() {
        return Err(Error::Parameter(format!(
            "truncation bound {} does not exceed log(1/q) = {:.6}",
            loss.bound,
            (1.0 / q).ln()
        )));
    }
    let data = dataset::gen_pointmass(priors, n, seed)?;
    let erm_cfg = TrainConfig {
        seed: child_seed(seed, substream::STAGE2),
        batch_size: n.max(1),
        epochs: cfg.steps,
        ..cfg.erm.clone()
    };
    let gdro_cfg = TrainConfig {
        seed: child_seed(seed, substream::STAGE2),
        batch_size: n.max(1),
        epochs: cfg.steps,
        ..cfg.gdro.clone()
    };
    let (erm, _) = optim::erm_train(&data, &erm_cfg, loss, Arch::Linear)?;
    let (gdro, _, _) = optim::gdro_train(&data, &data.group_labels, &gdro_cfg, loss, Arch::Linear)?;
    let erm_probs = model::forward(&erm, &[0.0], None)?;
    let gdro_probs = model::forward(&gdro, &[0.0], None)?;
    let erm_worst_loss = pointmass_worst(&erm_probs, loss);
    let gdro_worst_loss = pointmass_worst(&gdro_probs, loss);
    Ok(PointmassRecord {
        erm_worst_loss,
        gdro_worst_loss,
        ratio: erm_worst_loss / gdro_worst_loss,
        bound: (1.0 / q).ln() / (k as f64).ln(),
        erm_probs,
        gdro_probs,
    })
}

// ---------------------------------------------------------------------------
// Perturbation of a max of tables

/// `tables[k][theta]` and per-group offsets `offsets[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbInstance {
    pub tables: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
}

impl PerturbInstance {
    fn grid(&self) -> usize {
        self.tables[0].len()
    }

    fn argmin<F: Fn(usize) -> f64>(&self, f: F) -> usize {
        (0..self.grid())
            .min_by(|&a, &b| f(a).total_cmp(&f(b)).then(a.cmp(&b)))
            .expect("nonempty grid")
    }

    pub fn f(&self, theta: usize) -> f64 {
        self.tables.iter().map(|t| t[theta]).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn f_perturbed(&self, theta: usize) -> f64 {
        self.tables
            .iter()
            .zip(&self.offsets)
            .map(|(t, e)| t[theta] + e)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `f(argmin f~) - min f`.
    pub fn gap(&self) -> f64 {
        let star = self.argmin(|t| self.f(t));
        let tilde = self.argmin(|t| self.f_perturbed(t));
        self.f(tilde) - self.f(star)
    }

    fn random(r: &mut rng::Rng, groups: usize, grid: usize, eps: f64) -> Self {
        Self {
            tables: (0..groups)
                .map(|_| (0..grid).map(|_| r.random::<f64>()).collect())
                .collect(),
            offsets: (0..groups).map(|_| eps * (2.0 * r.random::<f64>() - 1.0)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbRecord {
    pub max_gap: f64,
    pub violations: usize,
    pub trials: usize,
}

fn check_perturb_args(groups: usize, grid_size: usize, eps: f64) -> Result<()> {
    if grid_size < 2 {
        return Err(Error::Parameter("grid_size must be at least 2".into()));
    }
    if groups == 0 {
        return Err(Error::Parameter("need at least one group".into()));
    }
    if !(eps >= 0.0) {
        return Err(Error::Parameter("eps must be nonnegative".into()));
    }
    Ok(())
}

/// Random tables in `[0, 1]` and offsets uniform in `[-eps, eps]`; counts
/// instances whose gap exceeds `2 eps + 1e-12`.
pub fn perturb_check(trials: usize, groups: usize, grid_size: usize, eps: f64, seed: u64) -> Result<PerturbRecord> {
    check_perturb_args(groups, grid_size, eps)?;
    let mut r = rng::stream(seed, substream::THEORY);
    let mut max_gap = 0.0f64;
    let mut violations = 0;
    for _ in 0..trials {
        let inst = PerturbInstance::random(&mut r, groups, grid_size, eps);
        let gap = inst.gap();
        max_gap = max_gap.max(gap);
        if gap > 2.0 * eps + 1e-12 {
            violations += 1;
        }
    }
    Ok(PerturbRecord {
        max_gap,
        violations,
        trials,
    })
}

/// Hill climbing over instances to make the gap as large as possible.
/// Moves that do not decrease the gap are accepted.
pub fn perturb_search(
    restarts: usize,
    iters: usize,
    groups: usize,
    grid_size: usize,
    eps: f64,
    seed: u64,
) -> Result<(f64, PerturbInstance)> {
    check_perturb_args(groups, grid_size, eps)?;
    let mut r = rng::stream(seed, substream::THEORY + 1);
    let mut best: Option<(f64, PerturbInstance)> = None;
    for _ in 0..restarts.max(1) {
        let mut cur = PerturbInstance::random(&mut r, groups, grid_size, eps);
        let mut cur_gap = cur.gap();
        for it in 0..iters {
            let mut next = cur.clone();
            let step = eps.max(1e-3) * if it % 2 == 0 { 0.5 } else { 0.05 };
            if r.random::<f64>() < 0.3 {
                let k = r.random_range(0..groups);
                let v = next.offsets[k] + step * (2.0 * r.random::<f64>() - 1.0);
                next.offsets[k] = v.clamp(-eps, eps);
            } else {
                let k = r.random_range(0..groups);
                let t = r.random_range(0..grid_size);
                next.tables[k][t] += step * (2.0 * r.random::<f64>() - 1.0);
            }
            let g = next.gap();
            if g >= cur_gap {
                cur = next;
                cur_gap = g;
            }
        }
        if best.as_ref().is_none_or(|(b, _)| cur_gap > *b) {
            best = Some((cur_gap, cur));
        }
    }
    Ok(best.expect("at least one restart"))
}

// ---------------------------------------------------------------------------
// Coupling

/// Joint law of `(x, y, z)` on finite supports, indexed `(x * ny + y) * nz + z`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteJoint {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub p: Vec<f64>,
}

impl FiniteJoint {
    pub fn new(nx: usize, ny: usize, nz: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != nx * ny * nz {
            return Err(Error::Shape(format!("joint table needs {} entries", nx * ny * nz)));
        }
        let total: f64 = p.iter().sum();
        if p.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter("joint table is not a probability table".into()));
        }
        Ok(Self { nx, ny, nz, p })
    }

    /// Random table with some exact zeros.
    pub fn random(r: &mut rng::Rng, nx: usize, ny: usize, nz: usize) -> Self {
        let mut p: Vec<f64> = (0..nx * ny * nz)
            .map(|_| if r.random::<f64>() < 0.2 { 0.0 } else { r.random::<f64>() })
            .collect();
        if p.iter().all(|&v| v == 0.0) {
            p[0] = 1.0;
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        Self { nx, ny, nz, p }
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    fn at(&self, cell: usize, z: usize) -> f64 {
        self.p[cell * self.nz + z]
    }

    /// `P(z | x, y)` per cell; cells without mass get the uniform row.
    pub fn conditional(&self) -> Vec<Vec<f64>> {
        (0..self.cells())
            .map(|c| {
                let m: f64 = (0..self.nz).map(|z| self.at(c, z)).sum();
                if m > 0.0 {
                    (0..self.nz).map(|z| self.at(c, z) / m).collect()
                } else {
                    vec![1.0 / self.nz as f64; self.nz]
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingRecord {
    pub max_abs_diff: f64,
    /// Groups with zero marginal under either variable.
    pub skipped: Vec<usize>,
}

/// Compares `E[l | z = g]` with `E[l | z~ = g]` where `z~` is drawn from
/// `kernel[cell]` independently of `z` given the cell. The default kernel is
/// the true conditional `P(z | x, y)`.
pub fn coupling_check(joint: &FiniteJoint, loss_table: &[f64], kernel: Option<&[Vec<f64>]>) -> Result<CouplingRecord> {
    if loss_table.len() != joint.cells() {
        return Err(Error::Shape(format!("loss table needs {} entries", joint.cells())));
    }
    let conditional;
    let kernel = match kernel {
        Some(k) => {
            if k.len() != joint.cells() || k.iter().any(|row| row.len() != joint.nz) {
                return Err(Error::Shape("kernel must have one row of length |Z| per cell".into()));
            }
            k
        }
        None => {
            conditional = joint.conditional();
            &conditional
        }
    };
    let nz = joint.nz;
    let mut num_z = vec![0.0; nz];
    let mut den_z = vec![0.0; nz];
    let mut num_t = vec![0.0; nz];
    let mut den_t = vec![0.0; nz];
    for c in 0..joint.cells() {
        let l = loss_table[c];
        for z in 0..nz {
            let p = joint.at(c, z);
            num_z[z] += p * l;
            den_z[z] += p;
            // joint mass of (cell, z, z~ = g) summed over z
            for g in 0..nz {
                let m = p * kernel[c][g];
                num_t[g] += m * l;
                den_t[g] += m;
            }
        }
    }
    let mut max_abs_diff = 0.0f64;
    let mut skipped = Vec::new();
    for g in 0..nz {
        if den_z[g] == 0.0 || den_t[g] == 0.0 {
            log::warn!("group {g} has zero marginal; skipped");
            skipped.push(g);
            continue;
        }
        max_abs_diff = max_abs_diff.max((num_z[g] / den_z[g] - num_t[g] / den_t[g]).abs());
    }
    Ok(CouplingRecord {
        max_abs_diff,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSuiteRecord {
    pub tables: usize,
    /// Largest discrepancy over the matched-kernel instances.
    pub max_abs_diff: f64,
    /// Discrepancy of a kernel that ignores `x` when `z` is a function of `x`.
    pub control_gap: f64,
}

/// `tables` random joints with `|X| <= 4`, `|Y| <= 3`, `|Z| <= 3` and random
/// loss tables, each checked with the matched kernel, plus a negative control.
pub fn coupling_suite(tables: usize, seed: u64) -> Result<CouplingSuiteRecord> {
    let mut r = rng::stream(seed, substream::THEORY + 3);
    let mut max_abs_diff = 0.0f64;
    for _ in 0..tables {
        let nx = r.random_range(1..=4);
        let ny = r.random_range(1..=3);
        let nz = r.random_range(1..=3);
        let joint = FiniteJoint::random(&mut r, nx, ny, nz);
        let loss: Vec<f64> = (0..nx * ny).map(|_| 3.0 * r.random::<f64>()).collect();
        max_abs_diff = max_abs_diff.max(coupling_check(&joint, &loss, None)?.max_abs_diff);
    }
    let joint = FiniteJoint::new(2, 1, 2, vec![0.5, 0.0, 0.0, 0.5])?;
    let control = coupling_check(&joint, &[0.0, 1.0], Some(&[vec![0.5, 0.5], vec![0.5, 0.5]]))?;
    Ok(CouplingSuiteRecord {
        tables,
        max_abs_diff,
        control_gap: control.max_abs_diff,
    })
}

// ---------------------------------------------------------------------------
// Loss bound

#[derive(Debug, Clone, PartialEq)]
pub struct LossBoundRecord {
    pub checked: usize,
    /// Points where `error_upper_bound` falls below the indicator by more than 1e-12.
    pub violations: usize,
    /// `(K, violations)` for each class count.
    pub violations_by_k: Vec<(usize, usize)>,
    /// Smallest `bound - indicator` seen.
    pub min_slack: f64,
    /// Violations of [`loss::two_way_error_bound`] on the same points.
    pub two_way_violations: usize,
}

/// Checks `1[argmax p != y] <= error_upper_bound(loss(p, y), K)` at `points`
/// random simplex points per `(K, loss)` pair, `K` in `2..=10`, for truncated
/// cross-entropy and squared loss. Half the points are Dirichlet(1) draws,
/// the rest sit near ties between two entries.
pub fn loss_bound_check(points: usize, seed: u64) -> Result<LossBoundRecord> {
    let mut r = rng::stream(seed, substream::THEORY + 4);
    let losses = [LossConfig::default(), LossConfig::squared()];
    let mut checked = 0;
    let mut violations_by_k = Vec::new();
    let mut two_way_violations = 0;
    let mut min_slack = f64::INFINITY;
    for k in 2..=10usize {
        let mut at_k = 0;
        for cfg in &losses {
            for i in 0..points {
                let mut p: Vec<f64> = (0..k).map(|_| -(1.0 - r.random::<f64>()).ln()).collect();
                if i % 2 == 1 {
                    let a = r.random_range(0..k);
                    let b = (a + 1 + r.random_range(0..k - 1)) % k;
                    let top = p.iter().cloned().fold(0.0, f64::max) * 4.0;
                    p[a] = top;
                    p[b] = top * (1.0 + 1e-6 * (2.0 * r.random::<f64>() - 1.0));
                }
                let total: f64 = p.iter().sum();
                p.iter_mut().for_each(|v| *v /= total);
                let y = r.random_range(0..k);
                let indicator = f64::from(u8::from(model::argmax(&p) != y));
                let l = loss::loss_value(cfg, &p, y);
                let slack = loss::error_upper_bound(cfg, l, k)? - indicator;
                min_slack = min_slack.min(slack);
                if slack < -1e-12 {
                    at_k += 1;
                }
                if loss::two_way_error_bound(cfg, l) - indicator < -1e-12 {
                    two_way_violations += 1;
                }
                checked += 1;
            }
        }
        violations_by_k.push((k, at_k));
    }
    Ok(LossBoundRecord {
        checked,
        violations: violations_by_k.iter().map(|&(_, v)| v).sum(),
        violations_by_k,
        min_slack,
        two_way_violations,
    })
}

// ---------------------------------------------------------------------------
// Oracle

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Risk of the logit `2 mu u` on the correct class when `u ~ N(mu, 1)`.
/// This is the per-group risk of the Bayes rule between two unit-variance
/// Gaussians whose means are `2 mu` apart. Composite Simpson on `mu +- 14`.
pub fn two_gaussian_risk(mu: f64, loss: &LossConfig) -> f64 {
    let per_point = |u: f64| {
        let t = 2.0 * mu * u;
        match loss.kind {
            LossKind::TruncatedCe => softplus(-t).min(loss.bound),
            LossKind::Squared => {
                // ||p - e_y||^2 = 2 (1 - p_y)^2 with 1 - p_y = sigmoid(-t)
                let s = 1.0 / (1.0 + t.exp());
                2.0 * s * s
            }
        }
    };
    let half_width = 14.0;
    let steps = 40_000usize;
    let a = mu - half_width;
    let h = 2.0 * half_width / steps as f64;
    let density = |u: f64| (-(u - mu) * (u - mu) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut total = 0.0;
    for i in 0..=steps {
        let u = a + i as f64 * h;
        let w = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        total += w * per_point(u) * density(u);
    }
    total * h / 3.0
}

/// Best achievable worst-group population risk.
///
/// * point mass with `k` classes: the uniform prediction, `log k` for
///   cross-entropy and `(k - 1) / k` for the squared loss;
/// * spurious task: the group-balanced Bayes rule ignores the spurious
///   coordinate, has equal risk on all four groups, and is therefore minimax;
/// * rare-group task with two groups: the same two-Gaussian rule.
pub fn robust_oracle(task: &Task, loss: &LossConfig) -> Result<f64> {
    match task {
        Task::PointMass { priors } => {
            dataset::validate_priors(priors)?;
            let k = priors.len() as f64;
            match loss.kind {
                LossKind::TruncatedCe => Ok(k.ln().min(loss.bound)),
                LossKind::Squared => Ok((k - 1.0) / k),
            }
        }
        Task::Spurious(SpuriousTask { mu_core, .. }) => Ok(two_gaussian_risk(*mu_core, loss)),
        Task::RareGroup(RareGroupTask {
            num_groups, radius, ..
        }) if *num_groups == 2 => Ok(two_gaussian_risk(*radius, loss)),
        Task::RareGroup(_) => Err(Error::Unsupported(
            "closed-form oracle for the rare-group task exists only with two groups".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Scaling

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingTrainer {
    /// Group DRO on `size` group-labeled rows.
    SubsetGdro,
    /// Two-stage pipeline on `size` rows, `budget` of them labeled per group.
    Barack,
    /// ERM on `size` rows.
    Erm,
}

impl ScalingTrainer {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "subset_gdro" => Ok(ScalingTrainer::SubsetGdro),
            "barack" => Ok(ScalingTrainer::Barack),
            "erm" => Ok(ScalingTrainer::Erm),
            other => Err(Error::Parameter(format!("unknown scaling trainer `{other}`"))),
        }
    }

    pub fn axis(self) -> Axis {
        match self {
            ScalingTrainer::SubsetGdro => Axis::M,
            _ => Axis::N,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    M,
    N,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::M => "m",
            Axis::N => "n",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingSpec {
    pub task: Task,
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub trainer: ScalingTrainer,
    pub train: TrainConfig,
    pub arch: Arch,
    pub loss: LossConfig,
    /// SGD steps per training run, whatever the size.
    pub steps: usize,
    /// When true every batch has as many draws as there are training rows.
    pub full_batch: bool,
    pub holdout: usize,
    /// Labeled rows per group for the two-stage trainer.
    pub budget: usize,
    pub bootstrap: usize,
    pub seed: u64,
}

impl ScalingSpec {
    pub fn new(task: Task, sizes: Vec<usize>, trials: usize, trainer: ScalingTrainer) -> Self {
        Self {
            task,
            sizes,
            trials,
            trainer,
            train: TrainConfig {
                lr: 0.1,
                eta_group: 0.01,
                sampling: match trainer {
                    ScalingTrainer::Erm => Sampling::Iid,
                    _ => Sampling::UniformPerGroup,
                },
                eval_every: 1_000_000,
                ..TrainConfig::default()
            },
            arch: Arch::Linear,
            loss: LossConfig::default(),
            steps: 1500,
            full_batch: true,
            holdout: 100_000,
            budget: 16,
            bootstrap: 1000,
            seed: 0,
        }
    }
}

impl ScalingSpec {
    /// Two balanced Gaussian groups at unit radius with squared loss: the
    /// configuration whose subset-GDRO rate is measured over `m`.
    pub fn rate_check(trials: usize) -> Self {
        let task = Task::RareGroup(RareGroupTask {
            num_groups: 2,
            rare_group: 1,
            rare_frac: 0.5,
            radius: 1.0,
            noise_dims: 0,
        });
        let mut spec = Self::new(task, vec![64, 128, 256, 512, 1024, 2048, 4096], trials, ScalingTrainer::SubsetGdro);
        spec.loss = LossConfig::squared();
        spec
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingPoint {
    pub size: usize,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
    /// Per-trial excess risks, in trial order.
    pub samples: Vec<f64>,
    /// Left out of the fit because the mean was not positive.
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingResult {
    pub axis: Axis,
    pub oracle: f64,
    pub points: Vec<ScalingPoint>,
    pub slope: f64,
    pub slope_ci: (f64, f64),
}

impl ScalingResult {
    /// CSV `size,mean,std,trials`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "size,mean,std,trials")?;
        for p in &self.points {
            writeln!(w, "{},{:.10},{:.10},{}", p.size, p.mean, p.std, p.trials)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "axis={} oracle={:.6} slope={:.4} ci=[{:.4},{:.4}] points={} excluded={}",
            self.axis.as_str(),
            self.oracle,
            self.slope,
            self.slope_ci.0,
            self.slope_ci.1,
            self.points.len(),
            self.points.iter().filter(|p| p.excluded).count()
        )
    }
}

/// Least-squares slope of `ys` on `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn trial_config(spec: &ScalingSpec, rows: usize, seed: u64) -> TrainConfig {
    let batch_size = if spec.full_batch { rows.max(1) } else { spec.train.batch_size };
    let per_epoch = rows.div_ceil(batch_size).max(1);
    TrainConfig {
        batch_size,
        epochs: spec.steps.div_ceil(per_epoch),
        seed,
        ..spec.train.clone()
    }
}

fn barack_trial(spec: &ScalingSpec, train: &Dataset, seed: u64) -> Result<model::ModelParams> {
    let g = train.num_groups();
    let mut r = rng::stream(seed, substream::MASK_TRAIN);
    let mut labeled = Vec::new();
    for (z, members) in train.group_indices().into_iter().enumerate() {
        if members.len() < spec.budget {
            return Err(Error::BudgetInfeasible {
                group: z,
                available: members.len(),
                budget: spec.budget,
            });
        }
        labeled.extend(rand::seq::index::sample(&mut r, members.len(), spec.budget).into_iter().map(|k| members[k]));
    }
    labeled.sort_unstable();
    let groups: Vec<usize> = labeled.iter().map(|&i| train.group_labels[i]).collect();
    let classes: Vec<usize> = labeled.iter().map(|&i| train.class_labels[i]).collect();
    let cond = model::fit_conditioning(&classes, &groups, &train.class_of_group, train.num_classes)?;
    let s1 = Problem::group_prediction(train, labeled.clone(), groups, Some(&cond));
    let s1_cfg = trial_config(spec, labeled.len(), child_seed(seed, substream::STAGE1));
    let init = initial_params(spec.arch, train.dim, g, s1_cfg.seed);
    let (s1_params, _, _) = optim::train_gdro(&s1, init, &s1_cfg, &spec.loss, &mut |_, _| Ok(()))?;
    let mut pseudo = vec![0; train.len()];
    let mut is_labeled = vec![false; train.len()];
    for &i in &labeled {
        is_labeled[i] = true;
        pseudo[i] = train.group_labels[i];
    }
    for i in 0..train.len() {
        if !is_labeled[i] {
            let p = model::forward(&s1_params, train.row(i), Some((&cond, train.class_labels[i])))?;
            pseudo[i] = model::argmax(&p);
        }
    }
    let mut counts = vec![0; g];
    pseudo.iter().for_each(|&z| counts[z] += 1);
    let (groups, present) = pipeline::remap_groups(&pseudo, &counts);
    let mut s2 = Problem::classification(train, (0..train.len()).collect(), groups);
    s2.num_groups = present;
    let s2_cfg = trial_config(spec, train.len(), child_seed(seed, substream::STAGE2));
    let init = initial_params(spec.arch, train.dim, train.num_classes, s2_cfg.seed);
    let (params, _, _) = optim::train_gdro(&s2, init, &s2_cfg, &spec.loss, &mut |_, _| Ok(()))?;
    Ok(params)
}

fn scaling_trial(spec: &ScalingSpec, size: usize, trial_seed: u64, oracle: f64) -> Result<f64> {
    let train = spec.task.generate(size, child_seed(trial_seed, substream::DATA_TRAIN))?;
    let holdout = spec
        .task
        .balanced()
        .generate(spec.holdout, child_seed(trial_seed, substream::DATA_TEST))?;
    let params = match spec.trainer {
        ScalingTrainer::SubsetGdro => {
            let cfg = trial_config(spec, train.len(), child_seed(trial_seed, substream::STAGE2));
            optim::gdro_train(&train, &train.group_labels, &cfg, &spec.loss, spec.arch)?.0
        }
        ScalingTrainer::Erm => {
            let cfg = TrainConfig {
                sampling: Sampling::Iid,
                ..trial_config(spec, train.len(), child_seed(trial_seed, substream::STAGE2))
            };
            optim::erm_train(&train, &cfg, &spec.loss, spec.arch)?.0
        }
        ScalingTrainer::Barack => barack_trial(spec, &train, trial_seed)?,
    };
    let report = optim::evaluate(&params, &holdout, &holdout.group_labels, &spec.loss, None)?;
    Ok(report.worst_group_loss - oracle)
}

fn fit(points: &[ScalingPoint], means: &[f64]) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = points
        .iter()
        .zip(means)
        .filter(|(_, &m)| m > 0.0)
        .map(|(p, &m)| ((p.size as f64).ln(), m.ln()))
        .unzip();
    (xs.len() >= 2).then(|| ls_slope(&xs, &ys))
}

pub fn excess_risk_scaling(spec: &ScalingSpec) -> Result<ScalingResult> {
    if spec.sizes.len() < 2 {
        return Err(Error::Parameter("need at least two sizes".into()));
    }
    if spec.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter("sizes must be strictly increasing".into()));
    }
    if spec.trials == 0 {
        return Err(Error::Parameter("need at least one trial per size".into()));
    }
    let oracle = robust_oracle(&spec.task, &spec.loss)?;
    let mut points = Vec::with_capacity(spec.sizes.len());
    for (si, &size) in spec.sizes.iter().enumerate() {
        let size_seed = child_seed(spec.seed, si as u64);
        let samples = (0..spec.trials)
            .into_par_iter()
            .map(|t| scaling_trial(spec, size, child_seed(size_seed, t as u64), oracle))
            .collect::<Result<Vec<f64>>>()?;
        let (mean, std) = mean_std(&samples);
        if mean <= 0.0 {
            log::warn!("mean excess risk {mean:.3e} at size {size} is not positive; excluded from the fit");
        }
        points.push(ScalingPoint {
            size,
            mean,
            std,
            trials: spec.trials,
            samples,
            excluded: mean <= 0.0,
        });
    }
    let means: Vec<f64> = points.iter().map(|p| p.mean).collect();
    let slope = fit(&points, &means).ok_or_else(|| {
        Error::Parameter("fewer than two sizes with positive mean excess risk".into())
    })?;
    let mut r = rng::stream(spec.seed, substream::THEORY + 2);
    let mut boot = Vec::with_capacity(spec.bootstrap);
    for _ in 0..spec.bootstrap {
        let resampled: Vec<f64> = points
            .iter()
            .map(|p| (0..p.trials).map(|_| p.samples[r.random_range(0..p.trials)]).sum::<f64>() / p.trials as f64)
            .collect();
        if let Some(s) = fit(&points, &resampled) {
            boot.push(s);
        }
    }
    boot.sort_by(f64::total_cmp);
    let slope_ci = if boot.is_empty() {
        (slope, slope)
    } else {
        let q = |f: f64| boot[((boot.len() - 1) as f64 * f).round() as usize];
        (q(0.025), q(0.975))
    };
    Ok(ScalingResult {
        axis: spec.trainer.axis(),
        oracle,
        points,
        slope,
        slope_ci,
    })
}
