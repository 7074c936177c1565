//! ERM and group-DRO trainers, and per-group evaluation.
//!
//! The group-DRO trainer solves `min_theta max_g E[loss | z = g]` by
//! alternating an exponentiated-gradient step on the group weights with an
//! SGD step on the weighted loss `sum_g w_g * L_g`. Both trainers call an
//! evaluation hook at step 0, every `eval_every` steps and at the last step;
//! model selection lives with the caller.

use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig};
use crate::model::{self, Arch, ClassConditioning, ModelParams};
use crate::rng::{self, Rng};

// ---------------------------------------------------------------------------
// Group weights

/// A point on the group simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupWeights {
    pub w: Vec<f64>,
}

impl GroupWeights {
    pub fn uniform(groups: usize) -> Self {
        Self {
            w: vec![1.0 / groups as f64; groups],
        }
    }

    /// `w_g <- w_g * exp(eta * a_g)`, renormalised. Computed in log space, so
    /// adding a constant to every `a_g` leaves the result unchanged.
    pub fn exponentiated_update(&mut self, adjusted_losses: &[f64], eta: f64) {
        let logs: Vec<f64> = self
            .w
            .iter()
            .zip(adjusted_losses)
            .map(|(&w, &a)| if w > 0.0 { w.ln() + eta * a } else { f64::NEG_INFINITY })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (w, l) in self.w.iter_mut().zip(&logs) {
            *w = (l - max).exp();
            total += *w;
        }
        self.w.iter_mut().for_each(|w| *w /= total);
        debug_assert!(self.on_simplex(1e-9));
    }

    pub fn on_simplex(&self, tol: f64) -> bool {
        self.w.iter().all(|&w| w >= 0.0) && (self.w.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    Iid,
    UniformPerGroup,
}

impl Sampling {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Sampling::Iid),
            "uniform_per_group" => Ok(Sampling::UniformPerGroup),
            other => Err(Error::Parameter(format!("unknown sampling `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Zero means "evaluate the initial parameters only".
    pub epochs: usize,
    pub batch_size: usize,
    /// Exponentiated-gradient step for the group weights.
    pub eta_group: f64,
    /// Group adjustment `C`; group `g` gets `C / sqrt(n_g)` added to its loss
    /// in the weight update.
    pub adjustment_c: f64,
    pub sampling: Sampling,
    pub seed: u64,
    pub eval_every: usize,
    /// Standard deviation of Gaussian feature jitter on training batches.
    pub jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 64,
            eta_group: 0.01,
            adjustment_c: 0.0,
            sampling: Sampling::UniformPerGroup,
            seed: 0,
            eval_every: 50,
            jitter: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("lr must be nonnegative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if !(self.eta_group > 0.0) {
            return Err(Error::Parameter("eta_group must be positive".into()));
        }
        if !(self.adjustment_c >= 0.0) {
            return Err(Error::Parameter("adjustment_c must be nonnegative".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Parameter("eval_every must be at least 1".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Parameter("jitter must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, rows: usize) -> usize {
        self.epochs * rows.div_ceil(self.batch_size)
    }
}

// ---------------------------------------------------------------------------
// History

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub split: String,
    /// `None` for whole-split rows.
    pub group: Option<usize>,
    pub loss: f64,
    pub acc: f64,
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    /// CSV with header `step,split,group,loss,acc,w_g`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,split,group,loss,acc,w_g")?;
        for r in &self.rows {
            let group = r.group.map_or_else(|| "all".to_string(), |g| g.to_string());
            let weight = r.weight.map_or_else(String::new, |v| format!("{v:.10}"));
            writeln!(
                w,
                "{},{},{},{:.10},{:.10},{}",
                r.step, r.split, group, r.loss, r.acc, weight
            )?;
        }
        Ok(())
    }

    pub fn extend(&mut self, other: History) {
        self.rows.extend(other.rows);
    }
}

// ---------------------------------------------------------------------------
// Training problems

/// Rows of a dataset paired with training targets and (possibly predicted)
/// group assignments. With `cond`, the class label of each row is fed to the
/// class-conditional head and the model must have one output per group.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub data: &'a Dataset,
    pub rows: Vec<usize>,
    pub targets: Vec<usize>,
    pub groups: Vec<usize>,
    pub num_groups: usize,
    pub outputs: usize,
    pub cond: Option<&'a ClassConditioning>,
}

impl<'a> Problem<'a> {
    /// The class-prediction task over the given rows.
    pub fn classification(data: &'a Dataset, rows: Vec<usize>, groups: Vec<usize>) -> Self {
        let targets = rows.iter().map(|&i| data.class_labels[i]).collect();
        Self {
            data,
            rows,
            targets,
            groups,
            num_groups: data.num_groups(),
            outputs: data.num_classes,
            cond: None,
        }
    }

    /// Group prediction: targets are the given group labels, which are also the
    /// groups of the robust objective.
    pub fn group_prediction(
        data: &'a Dataset,
        rows: Vec<usize>,
        group_labels: Vec<usize>,
        cond: Option<&'a ClassConditioning>,
    ) -> Self {
        Self {
            data,
            rows,
            targets: group_labels.clone(),
            groups: group_labels,
            num_groups: data.num_groups(),
            outputs: data.num_groups(),
            cond,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.len() != self.rows.len() || self.groups.len() != self.rows.len() {
            return Err(Error::Shape("rows, targets and groups must align".into()));
        }
        if let Some(&g) = self.groups.iter().find(|&&g| g >= self.num_groups) {
            return Err(Error::LabelRange {
                label: g,
                groups: self.num_groups,
            });
        }
        Ok(())
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_groups];
        for (pos, &g) in self.groups.iter().enumerate() {
            out[g].push(pos);
        }
        out
    }

    fn class_of(&self, pos: usize) -> usize {
        self.data.class_labels[self.rows[pos]]
    }
}

pub(crate) fn draw_positions(
    rng: &mut Rng,
    sampling: Sampling,
    n: usize,
    members: &[Vec<usize>],
    batch_size: usize,
) -> Vec<usize> {
    match sampling {
        Sampling::Iid => (0..batch_size).map(|_| rng.random_range(0..n)).collect(),
        Sampling::UniformPerGroup => (0..batch_size)
            .map(|_| {
                let g = rng.random_range(0..members.len());
                members[g][rng.random_range(0..members[g].len())]
            })
            .collect(),
    }
}

pub(crate) fn jittered_rows(
    problem: &Problem<'_>,
    positions: &[usize],
    sigma: f64,
    rng: &mut Rng,
) -> Vec<Vec<f64>> {
    let normal = (sigma > 0.0).then(|| Normal::new(0.0, sigma).unwrap());
    positions
        .iter()
        .map(|&p| {
            let mut row = problem.data.row(problem.rows[p]).to_vec();
            if let Some(n) = &normal {
                row.iter_mut().for_each(|v| *v += n.sample(rng));
            }
            row
        })
        .collect()
}

pub(crate) fn evaluate_positions(
    params: &ModelParams,
    problem: &Problem<'_>,
    positions: &[usize],
    rows: &[Vec<f64>],
    loss_cfg: &LossConfig,
) -> Result<model::BatchEval> {
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let targets: Vec<usize> = positions.iter().map(|&p| problem.targets[p]).collect();
    let classes: Vec<usize> = positions.iter().map(|&p| problem.class_of(p)).collect();
    let cond = problem.cond.map(|c| (c, classes.as_slice()));
    model::eval_batch(params, &refs, &targets, loss_cfg, cond)
}

/// Per-group running sums between history records.
#[derive(Clone)]
pub(crate) struct Window {
    loss: Vec<f64>,
    correct: Vec<f64>,
    count: Vec<f64>,
}

impl Window {
    pub fn new(groups: usize) -> Self {
        Self {
            loss: vec![0.0; groups],
            correct: vec![0.0; groups],
            count: vec![0.0; groups],
        }
    }

    pub fn add(&mut self, group: usize, loss: f64, correct: bool) {
        self.loss[group] += loss;
        self.correct[group] += f64::from(u8::from(correct));
        self.count[group] += 1.0;
    }

    /// Per-group rows (with group weights) and resets the window.
    pub fn flush_groups(&mut self, step: usize, weights: &[f64], history: &mut History) {
        for g in 0..self.loss.len() {
            let c = self.count[g];
            history.rows.push(HistoryRow {
                step,
                split: "train".into(),
                group: Some(g),
                loss: if c > 0.0 { self.loss[g] / c } else { 0.0 },
                acc: if c > 0.0 { self.correct[g] / c } else { 0.0 },
                weight: Some(weights[g]),
            });
        }
        *self = Window::new(self.loss.len());
    }

    pub fn flush_total(&mut self, step: usize, history: &mut History) {
        let c: f64 = self.count.iter().sum();
        let l: f64 = self.loss.iter().sum();
        let a: f64 = self.correct.iter().sum();
        history.rows.push(HistoryRow {
            step,
            split: "train".into(),
            group: None,
            loss: if c > 0.0 { l / c } else { 0.0 },
            acc: if c > 0.0 { a / c } else { 0.0 },
            weight: None,
        });
        *self = Window::new(self.loss.len());
    }
}

/// Evaluation hook: called with the step index and current parameters.
pub type EvalHook<'h> = dyn FnMut(usize, &ModelParams) -> Result<()> + 'h;

pub(crate) fn is_eval_step(step: usize, total: usize, every: usize) -> bool {
    step % every == 0 || step == total
}

pub(crate) fn sgd_step(params: &mut ModelParams, grad: &ModelParams, cfg: &TrainConfig) {
    if cfg.weight_decay > 0.0 {
        params.shrink_weights(1.0 - cfg.lr * cfg.weight_decay);
    }
    params.axpy(-cfg.lr, grad);
}

/// Initial parameters for a trainer seeded by `cfg.seed`.
pub fn initial_params(arch: Arch, input_dim: usize, outputs: usize, seed: u64) -> ModelParams {
    ModelParams::init(arch, input_dim, outputs, &mut rng::stream(seed, 0))
}

// ---------------------------------------------------------------------------
// ERM

pub fn train_erm(
    problem: &Problem<'_>,
    init: ModelParams,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    hook: &mut EvalHook<'_>,
) -> Result<(ModelParams, History)> {
    cfg.validate()?;
    problem.validate()?;
    if problem.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = rng::stream(cfg.seed, 1);
    let mut params = init;
    let mut history = History::default();
    let mut window = Window::new(problem.num_groups.max(1));
    let total = cfg.total_steps(problem.len());
    let row_weight = 1.0 / cfg.batch_size as f64;
    hook(0, &params)?;
    for step in 1..=total {
        let positions = draw_positions(&mut rng, Sampling::Iid, problem.len(), &[], cfg.batch_size);
        let rows = jittered_rows(problem, &positions, cfg.jitter, &mut rng);
        let eval = evaluate_positions(&params, problem, &positions, &rows, loss_cfg)?;
        if eval.losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Diverged { step });
        }
        for (i, _) in positions.iter().enumerate() {
            window.add(0, eval.losses[i], eval.correct[i]);
        }
        let weights = vec![row_weight; positions.len()];
        let g = model::backprop(&params, &eval, &weights);
        sgd_step(&mut params, &g, cfg);
        if !params.is_finite() {
            return Err(Error::Diverged { step });
        }
        if is_eval_step(step, total, cfg.eval_every) {
            window.flush_total(step, &mut history);
            hook(step, &params)?;
        }
    }
    Ok((params, history))
}

/// ERM on the class labels of a whole dataset.
pub fn erm_train(
    train: &Dataset,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    arch: Arch,
) -> Result<(ModelParams, History)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let problem = Problem::classification(train, (0..train.len()).collect(), vec![0; train.len()]);
    let init = initial_params(arch, train.dim, train.num_classes, cfg.seed);
    train_erm(&problem, init, cfg, loss_cfg, &mut |_, _| Ok(()))
}

// ---------------------------------------------------------------------------
// Group DRO

/// Mutable state of one group-DRO run; the SSL trainer drives it step by step.
pub struct GdroState<'p, 'd> {
    pub problem: &'p Problem<'d>,
    pub cfg: TrainConfig,
    pub loss: LossConfig,
    pub params: ModelParams,
    pub weights: GroupWeights,
    rng: Rng,
    members: Vec<Vec<usize>>,
    adjustments: Vec<f64>,
    pub(crate) window: Window,
}

/// Outcome of drawing one supervised batch.
pub struct SupervisedStep {
    pub grad: ModelParams,
    pub group_losses: Vec<f64>,
}

impl<'p, 'd> GdroState<'p, 'd> {
    pub fn new(
        problem: &'p Problem<'d>,
        init: ModelParams,
        cfg: &TrainConfig,
        loss_cfg: &LossConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        problem.validate()?;
        if problem.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let members = problem.members();
        if cfg.sampling == Sampling::UniformPerGroup {
            if let Some(g) = members.iter().position(Vec::is_empty) {
                return Err(Error::EmptyGroup(g));
            }
        }
        let adjustments = members
            .iter()
            .map(|m| {
                if m.is_empty() {
                    0.0
                } else {
                    cfg.adjustment_c / (m.len() as f64).sqrt()
                }
            })
            .collect();
        Ok(Self {
            problem,
            cfg: cfg.clone(),
            loss: *loss_cfg,
            params: init,
            weights: GroupWeights::uniform(problem.num_groups),
            rng: rng::stream(cfg.seed, 1),
            window: Window::new(problem.num_groups),
            members,
            adjustments,
        })
    }

    pub fn adjustments(&self) -> &[f64] {
        &self.adjustments
    }

    /// Draws a batch, updates the group weights, and returns the gradient of
    /// `sum_g w_g * L_g` at the current parameters.
    pub fn supervised_step(&mut self, step: usize) -> Result<SupervisedStep> {
        let positions = draw_positions(
            &mut self.rng,
            self.cfg.sampling,
            self.problem.len(),
            &self.members,
            self.cfg.batch_size,
        );
        let rows = jittered_rows(self.problem, &positions, self.cfg.jitter, &mut self.rng);
        let eval = evaluate_positions(&self.params, self.problem, &positions, &rows, &self.loss)?;
        if eval.losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Diverged { step });
        }
        let g_count = self.problem.num_groups;
        let mut sums = vec![0.0; g_count];
        let mut counts = vec![0usize; g_count];
        for (i, &p) in positions.iter().enumerate() {
            let g = self.problem.groups[p];
            sums[g] += eval.losses[i];
            counts[g] += 1;
            self.window.add(g, eval.losses[i], eval.correct[i]);
        }
        let group_losses: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        let adjusted: Vec<f64> = group_losses
            .iter()
            .zip(&self.adjustments)
            .map(|(l, a)| l + a)
            .collect();
        self.weights.exponentiated_update(&adjusted, self.cfg.eta_group);
        let row_weights: Vec<f64> = positions
            .iter()
            .map(|&p| {
                let g = self.problem.groups[p];
                self.weights.w[g] / counts[g] as f64
            })
            .collect();
        let grad = model::backprop(&self.params, &eval, &row_weights);
        Ok(SupervisedStep { grad, group_losses })
    }

    pub fn apply(&mut self, grad: &ModelParams, step: usize) -> Result<()> {
        sgd_step(&mut self.params, grad, &self.cfg);
        if !self.params.is_finite() {
            return Err(Error::Diverged { step });
        }
        Ok(())
    }

    pub fn record(&mut self, step: usize, history: &mut History) {
        let w = self.weights.w.clone();
        self.window.flush_groups(step, &w, history);
    }
}

pub fn train_gdro(
    problem: &Problem<'_>,
    init: ModelParams,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    hook: &mut EvalHook<'_>,
) -> Result<(ModelParams, GroupWeights, History)> {
    let mut state = GdroState::new(problem, init, cfg, loss_cfg)?;
    let total = cfg.total_steps(problem.len());
    let mut history = History::default();
    hook(0, &state.params)?;
    for step in 1..=total {
        let s = state.supervised_step(step)?;
        state.apply(&s.grad, step)?;
        if is_eval_step(step, total, cfg.eval_every) {
            state.record(step, &mut history);
            hook(step, &state.params)?;
        }
    }
    Ok((state.params, state.weights, history))
}

/// Group DRO on the class labels of `train` with the given group assignment.
pub fn gdro_train(
    train: &Dataset,
    groups: &[usize],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    arch: Arch,
) -> Result<(ModelParams, GroupWeights, History)> {
    if groups.len() != train.len() {
        return Err(Error::Shape("one group per training row required".into()));
    }
    let problem = Problem::classification(train, (0..train.len()).collect(), groups.to_vec());
    let init = initial_params(arch, train.dim, train.num_classes, cfg.seed);
    train_gdro(&problem, init, cfg, loss_cfg, &mut |_, _| Ok(()))
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub group_counts: Vec<usize>,
    /// `None` for groups absent from the split.
    pub per_group_loss: Vec<Option<f64>>,
    pub per_group_acc: Vec<Option<f64>>,
    pub worst_group_loss: f64,
    pub worst_group_acc: f64,
    pub avg_loss: f64,
    pub avg_acc: f64,
    pub reweighted_avg_acc: f64,
}

impl MetricsReport {
    /// Flat `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let fmt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |x| format!("{x:.10}"));
        out.push_str(&format!("worst_group_acc={:.10}\n", self.worst_group_acc));
        out.push_str(&format!("worst_group_loss={:.10}\n", self.worst_group_loss));
        out.push_str(&format!("avg_acc={:.10}\n", self.avg_acc));
        out.push_str(&format!("avg_loss={:.10}\n", self.avg_loss));
        out.push_str(&format!("reweighted_avg_acc={:.10}\n", self.reweighted_avg_acc));
        for (g, c) in self.group_counts.iter().enumerate() {
            out.push_str(&format!("group.{g}.count={c}\n"));
            out.push_str(&format!("group.{g}.acc={}\n", fmt(self.per_group_acc[g])));
            out.push_str(&format!("group.{g}.loss={}\n", fmt(self.per_group_loss[g])));
        }
        out
    }
}

/// Exact per-group means over the problem rows. Targets are whatever the
/// problem predicts (classes or groups); groups index the report.
pub fn evaluate_problem(
    params: &ModelParams,
    problem: &Problem<'_>,
    loss_cfg: &LossConfig,
    train_proportions: Option<&[f64]>,
) -> Result<MetricsReport> {
    problem.validate()?;
    let g_count = problem.num_groups;
    let mut loss_sum = vec![0.0; g_count];
    let mut correct = vec![0usize; g_count];
    let mut counts = vec![0usize; g_count];
    let mut probs_loss_total = 0.0;
    let mut correct_total = 0usize;
    for pos in 0..problem.len() {
        let x = problem.data.row(problem.rows[pos]);
        let cond = problem.cond.map(|c| (c, problem.class_of(pos)));
        let probs = model::forward(params, x, cond)?;
        let t = problem.targets[pos];
        let l = loss::loss_value(loss_cfg, &probs, t);
        let ok = model::argmax(&probs) == t;
        let g = problem.groups[pos];
        loss_sum[g] += l;
        correct[g] += usize::from(ok);
        counts[g] += 1;
        probs_loss_total += l;
        correct_total += usize::from(ok);
    }
    let per_group_loss: Vec<Option<f64>> = (0..g_count)
        .map(|g| (counts[g] > 0).then(|| loss_sum[g] / counts[g] as f64))
        .collect();
    let per_group_acc: Vec<Option<f64>> = (0..g_count)
        .map(|g| (counts[g] > 0).then(|| correct[g] as f64 / counts[g] as f64))
        .collect();
    let absent: Vec<usize> = (0..g_count).filter(|&g| counts[g] == 0).collect();
    if !absent.is_empty() {
        log::debug!("groups {absent:?} absent from evaluated split; excluded from worst-group");
    }
    let worst_group_acc = per_group_acc.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let worst_group_loss = per_group_loss
        .iter()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let n = problem.len().max(1) as f64;
    let avg_acc = correct_total as f64 / n;
    let reweighted_avg_acc = match train_proportions {
        Some(props) => {
            if props.len() != g_count {
                return Err(Error::Shape("one training proportion per group required".into()));
            }
            let present: Vec<usize> = (0..g_count).filter(|&g| counts[g] > 0).collect();
            let mass: f64 = present.iter().map(|&g| props[g]).sum();
            let values: Vec<f64> = present.iter().map(|&g| per_group_acc[g].unwrap()).collect();
            let weights: Vec<f64> = present.iter().map(|&g| props[g] / mass).collect();
            dataset::reweighted_metric(&values, &weights)?
        }
        None => avg_acc,
    };
    Ok(MetricsReport {
        group_counts: counts,
        per_group_loss,
        per_group_acc,
        worst_group_loss,
        worst_group_acc,
        avg_loss: probs_loss_total / n,
        avg_acc,
        reweighted_avg_acc,
    })
}

/// Class-prediction metrics of `params` on `data`, grouped by `groups`.
pub fn evaluate(
    params: &ModelParams,
    data: &Dataset,
    groups: &[usize],
    loss_cfg: &LossConfig,
    train_proportions: Option<&[f64]>,
) -> Result<MetricsReport> {
    if groups.len() != data.len() {
        return Err(Error::Shape("one group per row required".into()));
    }
    let problem = Problem::classification(data, (0..data.len()).collect(), groups.to_vec());
    evaluate_problem(params, &problem, loss_cfg, train_proportions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_pointmass, gen_spurious, SpuriousTask};

    fn blobs(n: usize, seed: u64) -> Dataset {
        // two well-separated Gaussian classes, one group each
        let mut r = rng::stream(seed, 0);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let mut features = Vec::new();
        let mut classes = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 1 { 3.0 } else { -3.0 };
            features.push(c + normal.sample(&mut r));
            features.push(normal.sample(&mut r));
            classes.push(y);
        }
        Dataset::new(features, 2, classes.clone(), classes, vec![0, 1], 2, dataset::Split::Train).unwrap()
    }

    #[test]
    fn eg_update_is_scale_free_and_on_simplex() {
        let mut a = GroupWeights::uniform(4);
        let mut b = GroupWeights::uniform(4);
        let losses = [0.3, 1.2, 0.7, 2.0];
        let shifted: Vec<f64> = losses.iter().map(|l| l + 5.0).collect();
        for _ in 0..10 {
            a.exponentiated_update(&losses, 0.5);
            b.exponentiated_update(&shifted, 0.5);
            assert!(a.on_simplex(1e-9));
        }
        for (x, y) in a.w.iter().zip(&b.w) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(a.w[3] > a.w[0]);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let ds = blobs(40, 1);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let init = initial_params(Arch::Linear, 2, 2, cfg.seed);
        let (p, _) = erm_train(&ds, &cfg, &LossConfig::default(), Arch::Linear).unwrap();
        assert_eq!(p, init);
    }

    #[test]
    fn erm_separates_blobs() {
        let ds = blobs(200, 2);
        let cfg = TrainConfig {
            lr: 0.5,
            epochs: 20,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let (p, hist) = erm_train(&ds, &cfg, &LossConfig::default(), Arch::Linear).unwrap();
        let report = evaluate(&p, &ds, &ds.group_labels, &LossConfig::default(), None).unwrap();
        assert_eq!(report.avg_acc, 1.0);
        assert!(!hist.rows.is_empty());
    }

    #[test]
    fn single_group_gdro_matches_erm_trajectory() {
        let ds = gen_spurious(300, &SpuriousTask::default(), 3).unwrap();
        let cfg = TrainConfig {
            lr: 0.2,
            epochs: 3,
            batch_size: 16,
            sampling: Sampling::Iid,
            eval_every: 5,
            weight_decay: 1e-3,
            jitter: 0.1,
            ..TrainConfig::default()
        };
        let loss_cfg = LossConfig::default();
        let single = vec![0; ds.len()];
        let mut one = Problem::classification(&ds, (0..ds.len()).collect(), single.clone());
        one.num_groups = 1;
        let init = initial_params(Arch::mlp1(), ds.dim, 2, cfg.seed);
        let mut erm_traj = Vec::new();
        let (erm, _) = train_erm(&one, init.clone(), &cfg, &loss_cfg, &mut |s, p| {
            erm_traj.push((s, p.clone()));
            Ok(())
        })
        .unwrap();
        let mut gdro_traj = Vec::new();
        let (gdro, w, _) = train_gdro(&one, init, &cfg, &loss_cfg, &mut |s, p| {
            gdro_traj.push((s, p.clone()));
            Ok(())
        })
        .unwrap();
        assert_eq!(w.w, vec![1.0]);
        assert_eq!(erm, gdro);
        assert_eq!(erm_traj, gdro_traj);
    }

    #[test]
    fn empty_group_rejected_under_uniform_sampling() {
        let ds = gen_spurious(50, &SpuriousTask::default(), 0).unwrap();
        let groups: Vec<usize> = ds.class_labels.clone(); // groups 2 and 3 unused
        let groups: Vec<usize> = groups.iter().map(|&y| if y == 0 { 0 } else { 1 }).collect();
        let mut problem = Problem::classification(&ds, (0..ds.len()).collect(), groups);
        problem.num_groups = 3;
        let init = initial_params(Arch::Linear, ds.dim, 2, 0);
        let err = train_gdro(&problem, init, &TrainConfig::default(), &LossConfig::default(), &mut |_, _| Ok(()));
        assert!(matches!(err, Err(Error::EmptyGroup(2))));
    }

    #[test]
    fn adjustment_raises_small_group_weight_at_first_step() {
        let ds = gen_spurious(2000, &SpuriousTask::default(), 4).unwrap();
        let problem = Problem::classification(&ds, (0..ds.len()).collect(), ds.group_labels.clone());
        let init = initial_params(Arch::Linear, ds.dim, 2, 0);
        let base = TrainConfig::default();
        let first = |c: f64| {
            let cfg = TrainConfig { adjustment_c: c, ..base.clone() };
            let mut st = GdroState::new(&problem, init.clone(), &cfg, &LossConfig::default()).unwrap();
            let s = st.supervised_step(1).unwrap();
            let effective: Vec<f64> = s.group_losses.iter().zip(st.adjustments()).map(|(l, a)| l + a).collect();
            (effective, st.weights.w.clone(), s.group_losses)
        };
        let (eff0, w0, l0) = first(0.0);
        let (eff3, w3, l3) = first(3.0);
        assert_eq!(l0, l3);
        let counts = ds.group_counts();
        let smallest = (0..4).min_by_key(|&g| counts[g]).unwrap();
        assert!(eff3[smallest] > eff0[smallest]);
        let largest = (0..4).max_by_key(|&g| counts[g]).unwrap();
        assert!(w3[smallest] / w3[largest] > w0[smallest] / w0[largest]);
    }

    #[test]
    fn gdro_is_deterministic() {
        let ds = gen_spurious(400, &SpuriousTask::default(), 5).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            eval_every: 3,
            ..TrainConfig::default()
        };
        let a = gdro_train(&ds, &ds.group_labels, &cfg, &LossConfig::default(), Arch::mlp1()).unwrap();
        let b = gdro_train(&ds, &ds.group_labels, &cfg, &LossConfig::default(), Arch::mlp1()).unwrap();
        assert_eq!(a, b);
        let mut ca = Vec::new();
        a.2.write_csv(&mut ca).unwrap();
        let mut cb = Vec::new();
        b.2.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        assert!(String::from_utf8(ca).unwrap().starts_with("step,split,group,loss,acc,w_g\n"));
    }

    #[test]
    fn pointmass_erm_recovers_priors_and_gdro_goes_uniform() {
        let priors = [0.7, 0.1, 0.1, 0.1];
        let ds = gen_pointmass(&priors, 10_000, 0).unwrap();
        let cfg = TrainConfig {
            lr: 0.5,
            epochs: 200,
            batch_size: 1000,
            sampling: Sampling::Iid,
            eval_every: 1000,
            ..TrainConfig::default()
        };
        let (p, _) = erm_train(&ds, &cfg, &LossConfig::default(), Arch::Linear).unwrap();
        let probs = model::forward(&p, &[0.0], None).unwrap();
        let counts = ds.group_counts();
        let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / ds.len() as f64).collect();
        let tv: f64 = probs.iter().zip(&empirical).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.01, "{probs:?} vs {empirical:?}");

        let gcfg = TrainConfig {
            sampling: Sampling::UniformPerGroup,
            eta_group: 0.05,
            ..cfg
        };
        let (gp, _, _) = gdro_train(&ds, &ds.group_labels, &gcfg, &LossConfig::default(), Arch::Linear).unwrap();
        let report = evaluate(&gp, &ds, &ds.group_labels, &LossConfig::default(), None).unwrap();
        assert!((report.worst_group_loss - 4f64.ln()).abs() < 0.05, "{report:?}");
    }

    #[test]
    fn evaluate_degenerate_predictors() {
        let ds = blobs(100, 3);
        // perfect classifier: large weight on the first feature
        let mut p = ModelParams::zeros(Arch::Linear, 2, 2);
        p.w2 = vec![-5.0, 0.0, 5.0, 0.0];
        let r = evaluate(&p, &ds, &ds.group_labels, &LossConfig::default(), None).unwrap();
        assert_eq!(r.worst_group_acc, 1.0);
        assert!(r.per_group_acc.iter().all(|a| *a == Some(1.0)));
        // constant class-0 predictor
        let mut c = ModelParams::zeros(Arch::Linear, 2, 2);
        c.b2 = vec![1.0, 0.0];
        let r = evaluate(&c, &ds, &ds.group_labels, &LossConfig::default(), None).unwrap();
        assert_eq!(r.avg_acc, 0.5);
        assert_eq!(r.worst_group_acc, 0.0);
        assert_eq!(r.reweighted_avg_acc, r.avg_acc);
    }

    #[test]
    fn evaluate_reweights_and_flags_absent_groups() {
        // groups 0 and 1 in class 0, 90% and 50% accuracy by construction
        let mut features = Vec::new();
        let mut classes = Vec::new();
        let mut groups = Vec::new();
        for i in 0..10 {
            features.push(if i < 9 { -1.0 } else { 1.0 });
            classes.push(0);
            groups.push(0);
        }
        for i in 0..10 {
            features.push(if i < 5 { -1.0 } else { 1.0 });
            classes.push(0);
            groups.push(1);
        }
        let ds = Dataset::new(features, 1, classes, groups.clone(), vec![0, 0, 1], 2, dataset::Split::Val).unwrap();
        let mut p = ModelParams::zeros(Arch::Linear, 1, 2);
        p.w2 = vec![-1.0, 1.0];
        let r = evaluate(&p, &ds, &groups, &LossConfig::default(), Some(&[0.95, 0.05, 0.0])).unwrap();
        assert!((r.per_group_acc[0].unwrap() - 0.9).abs() < 1e-12);
        assert!((r.per_group_acc[1].unwrap() - 0.5).abs() < 1e-12);
        assert!((r.reweighted_avg_acc - 0.88).abs() < 1e-12);
        assert_eq!(r.per_group_acc[2], None);
        assert_eq!(r.worst_group_acc, 0.5);
        let kv = r.to_kv();
        assert!(kv.contains("group.2.acc=absent"));
    }

    #[test]
    fn diverged_training_is_reported() {
        let ds = blobs(20, 4);
        let cfg = TrainConfig {
            lr: f64::MAX,
            epochs: 5,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let err = erm_train(&ds, &cfg, &LossConfig::default(), Arch::mlp1());
        assert!(matches!(err, Err(Error::Diverged { .. })), "{err:?}");
    }
}
