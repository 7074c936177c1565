//! The two-stage pipeline and its baselines.
//!
//! Stage 1 fits a group classifier on the group-labeled rows D1, Stage 1's
//! predictions replace the missing group labels on D2, and Stage 2 runs
//! group DRO on the whole training set with those pseudolabels. Every
//! supervised trainer here selects its checkpoint by worst-group accuracy on
//! the group-labeled validation rows; ties keep the earliest checkpoint.

use std::io::Write;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::ablation::{self, ConfusionMatrix};
use crate::dataset::{Dataset, LabelMask};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{self, Arch, ClassConditioning, ModelParams};
use crate::optim::{
    self, draw_positions, evaluate_problem, initial_params, is_eval_step, GdroState, History,
    HistoryRow, MetricsReport, Problem, Sampling, TrainConfig,
};
use crate::rng::{self, substream};

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    Argmax,
    Sampled,
}

impl PredictMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(PredictMode::Argmax),
            "sampled" => Ok(PredictMode::Sampled),
            other => Err(Error::Parameter(format!("unknown predict mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslConfig {
    /// Weight of the supervised term; the consistency term gets `1 - lambda_sup`.
    pub lambda_sup: f64,
    /// Confidence threshold for an unlabeled row to contribute.
    pub tau: f64,
    /// Standard deviation of the Gaussian jitter applied to the student input.
    pub sigma_aug: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            lambda_sup: 0.5,
            tau: 0.95,
            sigma_aug: 0.2,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_sup) {
            return Err(Error::Parameter("lambda_sup must lie in [0, 1]".into()));
        }
        if !(self.tau >= 0.0 && self.tau <= 1.0) {
            return Err(Error::Parameter("tau must lie in [0, 1]".into()));
        }
        if !(self.sigma_aug >= 0.0) {
            return Err(Error::Parameter("sigma_aug must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    pub train: TrainConfig,
    pub arch: Arch,
    pub use_class_input: bool,
    pub ssl: Option<SslConfig>,
    /// When set, the epoch count becomes `ceil(scale / (n_labeled / 64))`,
    /// overriding `train.epochs`.
    pub epoch_scale: Option<f64>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                jitter: 0.1,
                adjustment_c: 0.0,
                ..TrainConfig::default()
            },
            arch: Arch::mlp1(),
            use_class_input: true,
            ssl: None,
            epoch_scale: Some(500.0),
        }
    }
}

impl Stage1Config {
    pub fn effective_train(&self, n_labeled: usize) -> TrainConfig {
        let mut cfg = self.train.clone();
        if let Some(scale) = self.epoch_scale {
            let epochs = (scale * 64.0 / n_labeled.max(1) as f64).ceil();
            cfg.epochs = (epochs as usize).max(1);
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarackConfig {
    pub stage1: Stage1Config,
    pub stage2: TrainConfig,
    pub stage2_arch: Arch,
    pub predict_mode: PredictMode,
    pub predict_seed: u64,
}

impl Default for BarackConfig {
    fn default() -> Self {
        Self {
            stage1: Stage1Config::default(),
            stage2: TrainConfig::default(),
            stage2_arch: Arch::mlp1(),
            predict_mode: PredictMode::Argmax,
            predict_seed: 0,
        }
    }
}

// ---------------------------------------------------------------------------
// Results

/// One trained model together with the record of how it was chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct Selected {
    pub params: ModelParams,
    pub step: usize,
    /// Validation metrics of the selected checkpoint.
    pub val: MetricsReport,
    pub last: ModelParams,
    /// `(step, validation worst-group accuracy)` for every evaluated checkpoint.
    pub checkpoints: Vec<(usize, f64)>,
    pub history: History,
    /// Number of training rows used.
    pub train_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Output {
    pub model: Selected,
    pub cond: Option<ClassConditioning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    GroundTruth,
    Argmax,
    Sampled,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::GroundTruth => "ground_truth",
            LabelSource::Argmax => "argmax",
            LabelSource::Sampled => "sampled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    pub z_hat: Vec<usize>,
    pub source: Vec<LabelSource>,
}

impl PseudoLabels {
    /// CSV `index,z_true,z_hat,source`.
    pub fn write_csv<W: Write>(&self, mut w: W, truth: &[usize]) -> std::io::Result<()> {
        writeln!(w, "index,z_true,z_hat,source")?;
        for (i, (z, s)) in self.z_hat.iter().zip(&self.source).enumerate() {
            writeln!(w, "{i},{},{z},{}", truth[i], s.as_str())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarackOutput {
    pub stage1: Stage1Output,
    pub pseudo: PseudoLabels,
    /// Stage-1 predictions against ground truth on the group-unlabeled rows.
    pub confusion: ConfusionMatrix,
    pub stage2: Selected,
}

impl BarackOutput {
    pub fn params(&self) -> &ModelParams {
        &self.stage2.params
    }

    pub fn report(&self) -> &MetricsReport {
        &self.stage2.val
    }
}

// ---------------------------------------------------------------------------
// Selection

/// Validation problem over the group-labeled validation rows.
fn class_validation<'a>(val: &'a Dataset, rows: &[usize]) -> Problem<'a> {
    let groups = rows.iter().map(|&i| val.group_labels[i]).collect();
    Problem::classification(val, rows.to_vec(), groups)
}

fn group_validation<'a>(
    val: &'a Dataset,
    rows: &[usize],
    cond: Option<&'a ClassConditioning>,
) -> Problem<'a> {
    let groups = rows.iter().map(|&i| val.group_labels[i]).collect();
    Problem::group_prediction(val, rows.to_vec(), groups, cond)
}

pub(crate) fn report_rows(step: usize, split: &str, r: &MetricsReport) -> Vec<HistoryRow> {
    let mut rows = Vec::with_capacity(r.group_counts.len() + 1);
    for g in 0..r.group_counts.len() {
        if let (Some(loss), Some(acc)) = (r.per_group_loss[g], r.per_group_acc[g]) {
            rows.push(HistoryRow {
                step,
                split: split.into(),
                group: Some(g),
                loss,
                acc,
                weight: None,
            });
        }
    }
    rows.push(HistoryRow {
        step,
        split: split.into(),
        group: None,
        loss: r.avg_loss,
        acc: r.avg_acc,
        weight: None,
    });
    rows
}

/// Tracks the best checkpoint seen by an evaluation hook.
struct Selector<'v, 'd> {
    validation: &'v Problem<'d>,
    loss: LossConfig,
    best: Option<(usize, ModelParams, MetricsReport)>,
    checkpoints: Vec<(usize, f64)>,
    history: History,
}

impl<'v, 'd> Selector<'v, 'd> {
    fn new(validation: &'v Problem<'d>, loss: &LossConfig) -> Self {
        Self {
            validation,
            loss: *loss,
            best: None,
            checkpoints: Vec::new(),
            history: History::default(),
        }
    }

    fn observe(&mut self, step: usize, params: &ModelParams) -> Result<()> {
        let report = evaluate_problem(params, self.validation, &self.loss, None)?;
        self.checkpoints.push((step, report.worst_group_acc));
        self.history.rows.extend(report_rows(step, "val", &report));
        let better = self
            .best
            .as_ref()
            .is_none_or(|(_, _, b)| report.worst_group_acc > b.worst_group_acc);
        if better {
            self.best = Some((step, params.clone(), report));
        }
        Ok(())
    }

    fn finish(self, last: ModelParams, mut train_history: History, train_rows: usize) -> Selected {
        let (step, params, val) = self.best.expect("step 0 is always evaluated");
        train_history.extend(self.history);
        Selected {
            params,
            step,
            val,
            last,
            checkpoints: self.checkpoints,
            history: train_history,
            train_rows,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Objective {
    Erm,
    Gdro,
}

fn train_selected(
    objective: Objective,
    problem: &Problem<'_>,
    init: ModelParams,
    cfg: &TrainConfig,
    loss: &LossConfig,
    validation: &Problem<'_>,
) -> Result<Selected> {
    if validation.is_empty() {
        return Err(Error::Parameter("validation subset is empty".into()));
    }
    let mut selector = Selector::new(validation, loss);
    let (last, history) = match objective {
        Objective::Erm => optim::train_erm(problem, init, cfg, loss, &mut |s, p| selector.observe(s, p))?,
        Objective::Gdro => {
            let (p, _, h) = optim::train_gdro(problem, init, cfg, loss, &mut |s, p| selector.observe(s, p))?;
            (p, h)
        }
    };
    Ok(selector.finish(last, history, problem.len()))
}

// ---------------------------------------------------------------------------
// Stage 1

fn stage1_inputs(
    train: &Dataset,
    rows: &[usize],
    use_class_input: bool,
) -> Result<(Vec<usize>, Option<ClassConditioning>)> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let groups: Vec<usize> = rows.iter().map(|&i| train.group_labels[i]).collect();
    let cond = if use_class_input {
        let classes: Vec<usize> = rows.iter().map(|&i| train.class_labels[i]).collect();
        Some(model::fit_conditioning(
            &classes,
            &groups,
            &train.class_of_group,
            train.num_classes,
        )?)
    } else {
        None
    };
    Ok((groups, cond))
}

/// Supervised Stage 1: group DRO on the group labels of `train_rows`,
/// validated by worst-group group-prediction accuracy on `val_rows`.
pub fn train_group_classifier(
    train: &Dataset,
    train_rows: &[usize],
    val: &Dataset,
    val_rows: &[usize],
    cfg: &Stage1Config,
    loss: &LossConfig,
) -> Result<Stage1Output> {
    if val_rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    loss.check_arity(train.num_groups())?;
    let (groups, cond) = stage1_inputs(train, train_rows, cfg.use_class_input)?;
    let problem = Problem::group_prediction(train, train_rows.to_vec(), groups, cond.as_ref());
    let validation = group_validation(val, val_rows, cond.as_ref());
    let train_cfg = cfg.effective_train(train_rows.len());
    let init = initial_params(cfg.arch, train.dim, train.num_groups(), train_cfg.seed);
    let model = train_selected(Objective::Gdro, &problem, init, &train_cfg, loss, &validation)?;
    Ok(Stage1Output { model, cond })
}

/// Mean over the rows of `1[max p >= tau] * CE(p(aug(x)), argmax p(x))`, with
/// its gradient. The teacher prediction `p(x)` is treated as a constant.
pub fn consistency_term(
    params: &ModelParams,
    data: &Dataset,
    rows: &[usize],
    cond: Option<&ClassConditioning>,
    ssl: &SslConfig,
    loss: &LossConfig,
    rng: &mut rng::Rng,
) -> Result<(f64, ModelParams, usize)> {
    let noise = (ssl.sigma_aug > 0.0).then(|| Normal::new(0.0, ssl.sigma_aug).unwrap());
    let mut xs = Vec::with_capacity(rows.len());
    let mut targets = Vec::with_capacity(rows.len());
    let mut classes = Vec::with_capacity(rows.len());
    let mut keep = Vec::with_capacity(rows.len());
    for &i in rows {
        let x = data.row(i);
        let y = data.class_labels[i];
        let probs = model::forward(params, x, cond.map(|c| (c, y)))?;
        let t = model::argmax(&probs);
        keep.push(probs[t] >= ssl.tau);
        targets.push(t);
        classes.push(y);
        let mut xa = x.to_vec();
        if let Some(n) = &noise {
            xa.iter_mut().for_each(|v| *v += n.sample(rng));
        }
        xs.push(xa);
    }
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let eval = model::eval_batch(params, &refs, &targets, loss, cond.map(|c| (c, classes.as_slice())))?;
    let scale = 1.0 / rows.len().max(1) as f64;
    let weights: Vec<f64> = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
    let value = eval.losses.iter().zip(&weights).map(|(l, w)| l * w).sum();
    let active = keep.iter().filter(|&&k| k).count();
    Ok((value, model::backprop(params, &eval, &weights), active))
}

/// Stage 1 with a consistency term on the group-unlabeled rows. Returns the
/// last iterate; the validation rows are only evaluated for the history.
pub fn ssl_group_trainer(
    train: &Dataset,
    labeled_rows: &[usize],
    unlabeled_rows: &[usize],
    cfg: &Stage1Config,
    ssl: &SslConfig,
    loss: &LossConfig,
) -> Result<Stage1Output> {
    ssl.validate()?;
    if unlabeled_rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    loss.check_arity(train.num_groups())?;
    let (groups, cond) = stage1_inputs(train, labeled_rows, cfg.use_class_input)?;
    let problem = Problem::group_prediction(train, labeled_rows.to_vec(), groups, cond.as_ref());
    let train_cfg = cfg.effective_train(labeled_rows.len());
    let init = initial_params(cfg.arch, train.dim, train.num_groups(), train_cfg.seed);
    let mut state = GdroState::new(&problem, init, &train_cfg, loss)?;
    let mut urng = rng::stream(train_cfg.seed, substream::STAGE1_UNLABELED);
    let total = train_cfg.total_steps(problem.len());
    let per_epoch = problem.len().div_ceil(train_cfg.batch_size);
    let mut history = History::default();
    let mut checkpoints = Vec::new();
    let mut active_this_epoch = 0usize;
    let mut warned = false;
    checkpoints.push((0, f64::NAN));
    for step in 1..=total {
        let sup = state.supervised_step(step)?;
        let batch: Vec<usize> = draw_positions(&mut urng, Sampling::Iid, unlabeled_rows.len(), &[], train_cfg.batch_size)
            .into_iter()
            .map(|p| unlabeled_rows[p])
            .collect();
        let (_, cons, active) =
            consistency_term(&state.params, train, &batch, cond.as_ref(), ssl, loss, &mut urng)?;
        active_this_epoch += active;
        let mut grad = state.params.zeros_like();
        grad.axpy(ssl.lambda_sup, &sup.grad);
        grad.axpy(1.0 - ssl.lambda_sup, &cons);
        state.apply(&grad, step)?;
        if step % per_epoch == 0 {
            if active_this_epoch == 0 && !warned && ssl.lambda_sup < 1.0 {
                log::warn!(
                    "no unlabeled row reached confidence {} during epoch {}; consistency term inert",
                    ssl.tau,
                    step / per_epoch
                );
                warned = true;
            }
            active_this_epoch = 0;
        }
        if is_eval_step(step, total, train_cfg.eval_every) {
            state.record(step, &mut history);
            checkpoints.push((step, f64::NAN));
        }
    }
    let last = state.params.clone();
    let val = MetricsReport {
        group_counts: Vec::new(),
        per_group_loss: Vec::new(),
        per_group_acc: Vec::new(),
        worst_group_loss: f64::NAN,
        worst_group_acc: f64::NAN,
        avg_loss: f64::NAN,
        avg_acc: f64::NAN,
        reweighted_avg_acc: f64::NAN,
    };
    Ok(Stage1Output {
        model: Selected {
            params: last.clone(),
            step: total,
            val,
            last,
            checkpoints,
            history,
            train_rows: problem.len(),
        },
        cond,
    })
}

/// Group-prediction metrics of a Stage-1 model on every row of `data`.
pub fn group_prediction_report(
    stage1: &Stage1Output,
    data: &Dataset,
    loss: &LossConfig,
) -> Result<MetricsReport> {
    let rows: Vec<usize> = (0..data.len()).collect();
    let problem = group_validation(data, &rows, stage1.cond.as_ref());
    evaluate_problem(&stage1.model.params, &problem, loss, None)
}

// ---------------------------------------------------------------------------
// Pseudolabels

/// Ground truth on the labeled rows, Stage-1 predictions elsewhere.
pub fn predict_groups(
    params: &ModelParams,
    cond: Option<&ClassConditioning>,
    data: &Dataset,
    mask: &LabelMask,
    mode: PredictMode,
    seed: u64,
) -> Result<PseudoLabels> {
    let g = data.num_groups();
    if params.outputs != g {
        return Err(Error::Shape(format!(
            "group classifier has {} outputs for {g} groups",
            params.outputs
        )));
    }
    let mut r = rng::stream(seed, substream::PREDICT);
    let mut z_hat = vec![0; data.len()];
    let mut source = vec![LabelSource::GroundTruth; data.len()];
    for &i in &mask.labeled_train_idx {
        z_hat[i] = data.group_labels[i];
    }
    for &i in &mask.unlabeled_train_idx {
        let probs = model::forward(params, data.row(i), cond.map(|c| (c, data.class_labels[i])))?;
        let (z, s) = match mode {
            PredictMode::Argmax => (model::argmax(&probs), LabelSource::Argmax),
            PredictMode::Sampled => (sample_categorical(&probs, r.random()), LabelSource::Sampled),
        };
        z_hat[i] = z;
        source[i] = s;
    }
    Ok(PseudoLabels { z_hat, source })
}

/// Inverse-CDF draw; `u` in `[0, 1)`. Zero-probability entries are never chosen.
pub fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = k;
        if target < acc {
            return k;
        }
    }
    last
}

// ---------------------------------------------------------------------------
// Stage 2 and baselines

/// Group DRO on every training row with the given groups, validated on the
/// group-labeled validation rows. Groups with no rows are dropped (with a
/// warning) and the remaining ones renumbered.
pub fn stage2(
    train: &Dataset,
    groups: &[usize],
    val: &Dataset,
    val_rows: &[usize],
    cfg: &TrainConfig,
    arch: Arch,
    loss: &LossConfig,
) -> Result<Selected> {
    if groups.len() != train.len() {
        return Err(Error::Shape("one group per training row required".into()));
    }
    let g = train.num_groups();
    let mut counts = vec![0usize; g];
    for &z in groups {
        if z >= g {
            return Err(Error::LabelRange { label: z, groups: g });
        }
        counts[z] += 1;
    }
    let mut problem = Problem::classification(train, (0..train.len()).collect(), groups.to_vec());
    let (remapped, present) = remap_groups(groups, &counts);
    problem.groups = remapped;
    problem.num_groups = present;
    let validation = class_validation(val, val_rows);
    let init = initial_params(arch, train.dim, train.num_classes, cfg.seed);
    train_selected(Objective::Gdro, &problem, init, cfg, loss, &validation)
}

/// Drops groups with zero count and renumbers the rest in order.
pub(crate) fn remap_groups(groups: &[usize], counts: &[usize]) -> (Vec<usize>, usize) {
    let present: Vec<usize> = (0..counts.len()).filter(|&z| counts[z] > 0).collect();
    if present.len() == counts.len() {
        return (groups.to_vec(), counts.len());
    }
    let empty: Vec<usize> = (0..counts.len()).filter(|&z| counts[z] == 0).collect();
    log::warn!(
        "pseudo-groups {empty:?} received no rows; training on the remaining {} groups",
        present.len()
    );
    let mut map = vec![usize::MAX; counts.len()];
    for (new, &old) in present.iter().enumerate() {
        map[old] = new;
    }
    (groups.iter().map(|&z| map[z]).collect(), present.len())
}

/// Stage 1 as configured: the consistency-regularised trainer when `ssl` is
/// set and D2 is nonempty, the supervised one otherwise.
pub fn stage1(
    train: &Dataset,
    val: &Dataset,
    mask: &LabelMask,
    cfg: &BarackConfig,
    loss: &LossConfig,
) -> Result<Stage1Output> {
    match (&cfg.stage1.ssl, mask.unlabeled_train_idx.is_empty()) {
        (Some(ssl), false) => ssl_group_trainer(
            train,
            &mask.labeled_train_idx,
            &mask.unlabeled_train_idx,
            &cfg.stage1,
            ssl,
            loss,
        ),
        _ => train_group_classifier(
            train,
            &mask.labeled_train_idx,
            val,
            &mask.labeled_val_idx,
            &cfg.stage1,
            loss,
        ),
    }
}

pub fn barack_run(
    train: &Dataset,
    val: &Dataset,
    mask: &LabelMask,
    cfg: &BarackConfig,
    loss: &LossConfig,
) -> Result<BarackOutput> {
    let stage1 = stage1(train, val, mask, cfg, loss)?;
    let pseudo = predict_groups(
        &stage1.model.params,
        stage1.cond.as_ref(),
        train,
        mask,
        cfg.predict_mode,
        cfg.predict_seed,
    )?;
    let pred: Vec<usize> = mask.unlabeled_train_idx.iter().map(|&i| pseudo.z_hat[i]).collect();
    let truth: Vec<usize> = mask.unlabeled_train_idx.iter().map(|&i| train.group_labels[i]).collect();
    let confusion = ablation::confusion(&pred, &truth, train.num_groups())?;
    let stage2 = stage2(
        train,
        &pseudo.z_hat,
        val,
        &mask.labeled_val_idx,
        &cfg.stage2,
        cfg.stage2_arch,
        loss,
    )?;
    Ok(BarackOutput {
        stage1,
        pseudo,
        confusion,
        stage2,
    })
}

/// Stage 2 with externally supplied groups on the unlabeled rows (labeled
/// rows keep their ground truth). Used to inject oracle or flipped labels.
pub fn stage2_with_injected(
    train: &Dataset,
    val: &Dataset,
    mask: &LabelMask,
    injected: &[usize],
    cfg: &TrainConfig,
    arch: Arch,
    loss: &LossConfig,
) -> Result<Selected> {
    if injected.len() != train.len() {
        return Err(Error::Shape("one injected group per training row required".into()));
    }
    let mut groups = injected.to_vec();
    for &i in &mask.labeled_train_idx {
        groups[i] = train.group_labels[i];
    }
    stage2(train, &groups, val, &mask.labeled_val_idx, cfg, arch, loss)
}

/// Stage 2 on labels flipped from the truth to match `target`'s row-normalised
/// confusion on the unlabeled rows.
pub fn flip_gdro(
    train: &Dataset,
    val: &Dataset,
    mask: &LabelMask,
    target: &ConfusionMatrix,
    cfg: &TrainConfig,
    arch: Arch,
    loss: &LossConfig,
    seed: u64,
) -> Result<Selected> {
    let truth: Vec<usize> = mask.unlabeled_train_idx.iter().map(|&i| train.group_labels[i]).collect();
    let flipped = ablation::flip_to_confusion(&truth, &target.row_normalized(), seed)?;
    let mut groups = train.group_labels.clone();
    for (&i, &z) in mask.unlabeled_train_idx.iter().zip(&flipped) {
        groups[i] = z;
    }
    stage2_with_injected(train, val, mask, &groups, cfg, arch, loss)
}

/// Group DRO with every ground-truth group label, validated on all of `val`.
pub fn full_gdro(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    arch: Arch,
    loss: &LossConfig,
) -> Result<Selected> {
    let rows: Vec<usize> = (0..val.len()).collect();
    stage2(train, &train.group_labels, val, &rows, cfg, arch, loss)
}

/// Group DRO on the group-labeled training rows only.
pub fn subset_gdro(
    train: &Dataset,
    val: &Dataset,
    mask: &LabelMask,
    cfg: &TrainConfig,
    arch: Arch,
    loss: &LossConfig,
) -> Result<Selected> {
    let rows = mask.labeled_train_idx.clone();
    let groups = rows.iter().map(|&i| train.group_labels[i]).collect();
    let problem = Problem::classification(train, rows, groups);
    let validation = class_validation(val, &mask.labeled_val_idx);
    let init = initial_params(arch, train.dim, train.num_classes, cfg.seed);
    train_selected(Objective::Gdro, &problem, init, cfg, loss, &validation)
}

/// Average-loss training on all rows; group labels enter only through
/// validation-based checkpoint selection.
pub fn erm_run(
    train: &Dataset,
    val: &Dataset,
    mask: &LabelMask,
    cfg: &TrainConfig,
    arch: Arch,
    loss: &LossConfig,
) -> Result<Selected> {
    let mut problem = Problem::classification(train, (0..train.len()).collect(), vec![0; train.len()]);
    problem.num_groups = 1;
    let validation = class_validation(val, &mask.labeled_val_idx);
    let init = initial_params(arch, train.dim, train.num_classes, cfg.seed);
    let cfg = TrainConfig {
        sampling: Sampling::Iid,
        ..cfg.clone()
    };
    train_selected(Objective::Erm, &problem, init, &cfg, loss, &validation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{gen_spurious, generate_splits, sample_group_budget, SpuriousTask, Task};

    fn small_splits(seed: u64) -> (Dataset, Dataset) {
        let s = generate_splits(&Task::Spurious(SpuriousTask::default()), 800, 400, 10, seed).unwrap();
        (s.train, s.val)
    }

    fn quick_stage1() -> Stage1Config {
        Stage1Config {
            train: TrainConfig {
                epochs: 5,
                eval_every: 5,
                jitter: 0.1,
                ..TrainConfig::default()
            },
            epoch_scale: None,
            ..Stage1Config::default()
        }
    }

    fn quick_stage2() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            eval_every: 10,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn class_input_confines_predictions_to_class_groups() {
        let (train, val) = small_splits(0);
        let mask = sample_group_budget(&train, &val, 16, 0).unwrap();
        let out = train_group_classifier(
            &train,
            &mask.labeled_train_idx,
            &val,
            &mask.labeled_val_idx,
            &quick_stage1(),
            &LossConfig::default(),
        )
        .unwrap();
        let cond = out.cond.as_ref().unwrap();
        for i in 0..val.len() {
            let y = val.class_labels[i];
            let p = model::forward(&out.model.params, val.row(i), Some((cond, y))).unwrap();
            let z = model::argmax(&p);
            assert_eq!(val.class_of_group[z], y);
            for (g, &pg) in p.iter().enumerate() {
                if val.class_of_group[g] != y {
                    assert_eq!(pg, 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (train, val) = small_splits(1);
        let mask = sample_group_budget(&train, &val, 1, 3).unwrap();
        let cfg = Stage1Config {
            train: TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
            epoch_scale: None,
            ..Stage1Config::default()
        };
        let out = train_group_classifier(
            &train,
            &mask.labeled_train_idx,
            &val,
            &mask.labeled_val_idx,
            &cfg,
            &LossConfig::default(),
        )
        .unwrap();
        let init = initial_params(cfg.arch, train.dim, 4, cfg.train.seed);
        assert_eq!(out.model.params, init);
        assert_eq!(out.model.step, 0);
        assert_eq!(out.model.checkpoints.len(), 1);
        let direct = group_validation(&val, &mask.labeled_val_idx, out.cond.as_ref());
        let r = evaluate_problem(&init, &direct, &LossConfig::default(), None).unwrap();
        assert_eq!(out.model.val, r);
    }

    #[test]
    fn selected_checkpoint_dominates_all_evaluated() {
        let (train, val) = small_splits(2);
        let mask = sample_group_budget(&train, &val, 8, 2).unwrap();
        let mut cfg = quick_stage1();
        cfg.train.epochs = 40;
        cfg.train.eval_every = 1;
        let out = train_group_classifier(
            &train,
            &mask.labeled_train_idx,
            &val,
            &mask.labeled_val_idx,
            &cfg,
            &LossConfig::default(),
        )
        .unwrap();
        let best = out.model.val.worst_group_acc;
        assert!(out.model.checkpoints.len() > 2);
        for &(step, acc) in &out.model.checkpoints {
            assert!(best >= acc);
            if acc == best {
                assert!(out.model.step <= step);
            }
        }
    }

    #[test]
    fn ssl_with_full_supervised_weight_matches_supervised_trajectory() {
        let (train, val) = small_splits(3);
        let mask = sample_group_budget(&train, &val, 16, 1).unwrap();
        let cfg = quick_stage1();
        let ssl = SslConfig {
            lambda_sup: 1.0,
            ..SslConfig::default()
        };
        let loss = LossConfig::default();
        let sup = train_group_classifier(&train, &mask.labeled_train_idx, &val, &mask.labeled_val_idx, &cfg, &loss).unwrap();
        let semi = ssl_group_trainer(&train, &mask.labeled_train_idx, &mask.unlabeled_train_idx, &cfg, &ssl, &loss).unwrap();
        assert_eq!(semi.model.last, sup.model.last);
        let train_rows = |h: &History| h.rows.iter().filter(|r| r.split == "train").cloned().collect::<Vec<_>>();
        assert_eq!(train_rows(&semi.model.history), train_rows(&sup.model.history));
    }

    #[test]
    fn self_consistency_is_positive_unless_one_hot() {
        let (train, _) = small_splits(4);
        let rows: Vec<usize> = (0..50).collect();
        let params = initial_params(Arch::mlp1(), train.dim, 4, 9);
        let ssl = SslConfig {
            lambda_sup: 0.5,
            tau: 0.0,
            sigma_aug: 0.0,
        };
        let mut r = rng::stream(0, 0);
        let (v, _, active) =
            consistency_term(&params, &train, &rows, None, &ssl, &LossConfig::default(), &mut r).unwrap();
        assert_eq!(active, rows.len());
        let expected: f64 = rows
            .iter()
            .map(|&i| {
                let p = model::forward(&params, train.row(i), None).unwrap();
                -p[model::argmax(&p)].ln()
            })
            .sum::<f64>()
            / rows.len() as f64;
        assert!(v > 0.0);
        assert!((v - expected).abs() < 1e-12);
        // a one-hot prediction through the class mask gives zero
        let cond = ClassConditioning {
            prior_logits: vec![vec![0.0, f64::NEG_INFINITY], vec![f64::NEG_INFINITY, 0.0]],
        };
        let two = gen_spurious(20, &SpuriousTask::default(), 0).unwrap();
        let two = Dataset::new(
            two.features.clone(),
            two.dim,
            two.class_labels.clone(),
            two.class_labels.clone(),
            vec![0, 1],
            2,
            two.split,
        )
        .unwrap();
        let p2 = ModelParams::zeros(Arch::Linear, two.dim, 2);
        let rows: Vec<usize> = (0..20).collect();
        let (v, _, _) = consistency_term(&p2, &two, &rows, Some(&cond), &ssl, &LossConfig::default(), &mut r).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn perfect_classifier_pseudolabels_equal_truth() {
        // features are the one-hot group code; a linear model with large
        // diagonal weights is a perfect group classifier
        let n = 40;
        let mut features = Vec::new();
        let mut groups = Vec::new();
        for i in 0..n {
            let g = i % 4;
            for k in 0..4 {
                features.push(f64::from(u8::from(k == g)));
            }
            groups.push(g);
        }
        let classes: Vec<usize> = groups.iter().map(|&g| g / 2).collect();
        let ds = Dataset::new(features, 4, classes, groups.clone(), vec![0, 0, 1, 1], 2, crate::dataset::Split::Train).unwrap();
        let mut p = ModelParams::zeros(Arch::Linear, 4, 4);
        for g in 0..4 {
            p.w2[g * 4 + g] = 10.0;
        }
        let mask = LabelMask {
            labeled_train_idx: vec![0, 1, 2, 3],
            unlabeled_train_idx: (4..n).collect(),
            labeled_val_idx: vec![],
        };
        for mode in [PredictMode::Argmax, PredictMode::Sampled] {
            let pl = predict_groups(&p, None, &ds, &mask, mode, 0).unwrap();
            if mode == PredictMode::Argmax {
                assert_eq!(pl.z_hat, groups);
            }
            for &i in &mask.labeled_train_idx {
                assert_eq!(pl.source[i], LabelSource::GroundTruth);
            }
        }
    }

    #[test]
    fn sampled_uniform_prediction_is_balanced() {
        let ds = gen_spurious(10_000, &SpuriousTask::default(), 5).unwrap();
        let cond = ClassConditioning {
            prior_logits: vec![
                vec![0.5f64.ln(), 0.5f64.ln(), f64::NEG_INFINITY, f64::NEG_INFINITY],
                vec![f64::NEG_INFINITY, f64::NEG_INFINITY, 0.5f64.ln(), 0.5f64.ln()],
            ],
        };
        let p = ModelParams::zeros(Arch::Linear, ds.dim, 4);
        let mask = LabelMask {
            labeled_train_idx: vec![],
            unlabeled_train_idx: (0..ds.len()).collect(),
            labeled_val_idx: vec![],
        };
        let pl = predict_groups(&p, Some(&cond), &ds, &mask, PredictMode::Sampled, 11).unwrap();
        let first_in_class = pl.z_hat.iter().filter(|&&z| z % 2 == 0).count() as f64;
        let n = ds.len() as f64;
        assert!((first_in_class / n - 0.5).abs() < 3.0 * (0.25 / n).sqrt());
        for (i, &z) in pl.z_hat.iter().enumerate() {
            assert_eq!(ds.class_of_group[z], ds.class_labels[i]);
            assert_eq!(pl.source[i], LabelSource::Sampled);
        }
    }

    #[test]
    fn categorical_sampler_skips_zero_mass() {
        assert_eq!(sample_categorical(&[0.0, 1.0, 0.0], 0.0), 1);
        assert_eq!(sample_categorical(&[0.0, 1.0, 0.0], 0.999), 1);
        assert_eq!(sample_categorical(&[0.25, 0.75], 0.2), 0);
        assert_eq!(sample_categorical(&[0.25, 0.75], 0.3), 1);
    }

    #[test]
    fn full_mask_barack_equals_full_gdro() {
        let (train, val) = small_splits(6);
        let mask = LabelMask::full(&train, &val);
        let cfg = BarackConfig {
            stage1: quick_stage1(),
            stage2: quick_stage2(),
            ..BarackConfig::default()
        };
        let loss = LossConfig::default();
        let b = barack_run(&train, &val, &mask, &cfg, &loss).unwrap();
        let f = full_gdro(&train, &val, &cfg.stage2, cfg.stage2_arch, &loss).unwrap();
        assert_eq!(b.stage2, f);
    }

    #[test]
    fn oracle_injection_equals_full_gdro_on_the_same_validation_rows() {
        let (train, val) = small_splits(7);
        let mask = sample_group_budget(&train, &val, 16, 7).unwrap();
        let loss = LossConfig::default();
        let cfg = quick_stage2();
        let injected = stage2_with_injected(&train, &val, &mask, &train.group_labels, &cfg, Arch::mlp1(), &loss).unwrap();
        let direct = stage2(&train, &train.group_labels, &val, &mask.labeled_val_idx, &cfg, Arch::mlp1(), &loss).unwrap();
        assert_eq!(injected, direct);
    }

    #[test]
    fn full_subset_equals_full_gdro() {
        let (train, val) = small_splits(8);
        let mask = LabelMask::full(&train, &val);
        let loss = LossConfig::default();
        let cfg = quick_stage2();
        let s = subset_gdro(&train, &val, &mask, &cfg, Arch::mlp1(), &loss).unwrap();
        let f = full_gdro(&train, &val, &cfg, Arch::mlp1(), &loss).unwrap();
        assert_eq!(s, f);
        let m = sample_group_budget(&train, &val, 8, 0).unwrap();
        let s = subset_gdro(&train, &val, &m, &cfg, Arch::mlp1(), &loss).unwrap();
        assert_eq!(s.train_rows, 8 * 4);
    }

    #[test]
    fn empty_pseudo_group_is_remapped() {
        let (train, val) = small_splits(9);
        let groups: Vec<usize> = train.group_labels.iter().map(|&z| if z == 1 { 0 } else { z }).collect();
        let rows: Vec<usize> = (0..val.len()).collect();
        let out = stage2(&train, &groups, &val, &rows, &quick_stage2(), Arch::Linear, &LossConfig::default()).unwrap();
        assert_eq!(out.val.group_counts.len(), 4);
    }
}
