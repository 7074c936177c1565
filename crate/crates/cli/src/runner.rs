//! Per-seed experiment jobs and the `gen`, `run`, `ablate` and `bounds` commands.
//!
//! Every seed is an independent job. Within a seed each grid cell is trained
//! and the cell with the highest worst-group accuracy on the group-labeled
//! validation rows wins; ties keep the first cell in grid order. Jobs write
//! only their own files; shared files (`results.csv`) are written once after
//! all jobs finish, in seed order.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;

use partial_gdro::ablation::ConfusionMatrix;
use partial_gdro::dataset::{self, format_f64, generate_splits, sample_group_budget, Dataset, LabelMask, Splits};
use partial_gdro::model::{self, ModelParams};
use partial_gdro::optim::{self, History, MetricsReport};
use partial_gdro::pipeline::{self, BarackConfig, PseudoLabels, Stage1Output};
use partial_gdro::rng::{child_seed, substream};
use partial_gdro::theory::{self, pointmass_experiment, PointmassConfig, ScalingSpec};

use crate::config::{describe_cell, Budget, ExperimentConfig, Method};
use crate::error::StageExt;
use crate::CliError;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overwrite every group label outside the budget mask before training.
    pub poison_masked: bool,
    /// Worker threads; `None` uses rayon's default.
    pub workers: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct BarackArtifacts {
    pub stage1: Stage1Output,
    /// Stage-1 group-prediction metrics on the test split.
    pub stage1_test: MetricsReport,
    pub pseudo: PseudoLabels,
    pub confusion: ConfusionMatrix,
}

/// Outcome of one trained grid cell.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub cell: Vec<(String, String)>,
    pub params: ModelParams,
    pub step: usize,
    pub val: MetricsReport,
    pub history: History,
    pub barack: Option<BarackArtifacts>,
}

#[derive(Debug, Clone)]
pub struct SeedRecord {
    pub method: Method,
    pub budget: Budget,
    pub seed: u64,
    pub chosen: CellRun,
    /// `(cell description, validation worst-group accuracy)` in grid order.
    pub grid_scores: Vec<(String, f64)>,
    pub test: MetricsReport,
    /// Ground-truth group labels of the training split (before poisoning).
    pub train_groups: Vec<usize>,
}

pub const RESULTS_HEADER: &str = "method,budget,seed,cell,worst_group_acc,avg_acc,reweighted_avg_acc,worst_group_loss,avg_loss,val_worst_group_acc,stage1_worst_group_acc";

/// Per-seed trainer seeds: Stage 1, Stage 2 and pseudolabel sampling draw
/// from separate children of the experiment seed.
pub fn seeded(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.stage1.train.seed = child_seed(seed, substream::STAGE1);
    c.stage2.seed = child_seed(seed, substream::STAGE2);
    c
}

pub fn splits_for(cfg: &ExperimentConfig, seed: u64) -> Result<Splits, CliError> {
    generate_splits(&cfg.task, cfg.n_train, cfg.n_val, cfg.n_test, seed).stage(seed, "data")
}

pub fn mask_for(cfg: &ExperimentConfig, splits: &Splits, seed: u64) -> Result<LabelMask, CliError> {
    match (cfg.method, cfg.budget) {
        (Method::FullGdro, _) | (_, Budget::All) => Ok(LabelMask::full(&splits.train, &splits.val)),
        (_, Budget::PerGroup(b)) => sample_group_budget(&splits.train, &splits.val, b, seed).stage(seed, "mask"),
    }
}

/// Replaces every group label outside the mask by the next group index.
pub fn poison(train: &mut Dataset, val: &mut Dataset, mask: &LabelMask) {
    let g = train.num_groups();
    for &i in &mask.unlabeled_train_idx {
        train.group_labels[i] = (train.group_labels[i] + 1) % g;
    }
    let mut labeled = vec![false; val.len()];
    for &i in &mask.labeled_val_idx {
        labeled[i] = true;
    }
    for (i, seen) in labeled.into_iter().enumerate() {
        if !seen {
            val.group_labels[i] = (val.group_labels[i] + 1) % g;
        }
    }
}

/// Source artifacts a `flip_gdro` seed reuses from its paired BARACK run.
#[derive(Debug, Clone)]
pub struct FlipSource {
    pub confusion: ConfusionMatrix,
    pub cell: Vec<(String, String)>,
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))
}

pub fn read_kv(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

pub fn load_flip_source(dir: &Path, cfg: &ExperimentConfig, seed: u64) -> Result<FlipSource, CliError> {
    let meta = read_kv(&read_text(&dir.join(format!("metrics_seed{seed}.kv")))?);
    let get = |k: &str| meta.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    if get("method") != Some("barack") {
        return Err(CliError::Config(format!(
            "{} is not a barack run (method={})",
            dir.display(),
            get("method").unwrap_or("?")
        )));
    }
    if get("budget") != Some(cfg.budget.to_string().as_str()) {
        return Err(CliError::Config(format!(
            "flip source budget {} differs from configured budget {}",
            get("budget").unwrap_or("?"),
            cfg.budget
        )));
    }
    let confusion = ConfusionMatrix::read_csv(&read_text(&dir.join(format!("confusion_seed{seed}.csv")))?)
        .stage(seed, "flip_source")?;
    let cell = read_kv(&read_text(&dir.join(format!("selected_seed{seed}.kv")))?);
    Ok(FlipSource { confusion, cell })
}

fn touches_stage1(key: &str) -> bool {
    key.starts_with("stage1.") || key.starts_with("ssl.")
}

fn barack_config(c: &ExperimentConfig, seed: u64) -> BarackConfig {
    let mut stage1 = c.stage1.clone();
    stage1.ssl = (c.method == Method::BarackSsl).then_some(c.ssl);
    BarackConfig {
        stage1,
        stage2: c.stage2.clone(),
        stage2_arch: c.stage2_arch,
        predict_mode: c.predict_mode,
        predict_seed: child_seed(seed, substream::PREDICT),
    }
}

/// Stage 1 of a BARACK-family method, shared by grid cells that only vary
/// Stage 2.
fn stage1_for(cfg: &ExperimentConfig, splits: &Splits, mask: &LabelMask, seed: u64) -> Result<Stage1Output, CliError> {
    let c = seeded(cfg, seed);
    pipeline::stage1(&splits.train, &splits.val, mask, &barack_config(&c, seed), &c.loss).stage(seed, "stage1")
}

/// Trains one configured method on one seed's data.
pub fn run_cell(
    cfg: &ExperimentConfig,
    cell: &[(String, String)],
    splits: &Splits,
    mask: &LabelMask,
    seed: u64,
    flip: Option<&FlipSource>,
    stage1_cache: Option<&Stage1Output>,
) -> Result<CellRun, CliError> {
    let c = seeded(&cfg.with_cell(cell)?, seed);
    let (train, val) = (&splits.train, &splits.val);
    let loss = &c.loss;
    let arch = c.stage2_arch;
    let (selected, barack) = match c.method {
        Method::Erm => (pipeline::erm_run(train, val, mask, &c.stage2, arch, loss).stage(seed, "erm")?, None),
        Method::FullGdro => (pipeline::full_gdro(train, val, &c.stage2, arch, loss).stage(seed, "full_gdro")?, None),
        Method::SubsetGdro => (
            pipeline::subset_gdro(train, val, mask, &c.stage2, arch, loss).stage(seed, "subset_gdro")?,
            None,
        ),
        Method::Barack | Method::BarackSsl => {
            let bc = barack_config(&c, seed);
            let s1 = match stage1_cache {
                Some(s1) => s1.clone(),
                None => pipeline::stage1(train, val, mask, &bc, loss).stage(seed, "stage1")?,
            };
            let pseudo = pipeline::predict_groups(
                &s1.model.params,
                s1.cond.as_ref(),
                train,
                mask,
                bc.predict_mode,
                bc.predict_seed,
            )
            .stage(seed, "pseudolabel")?;
            let pred: Vec<usize> = mask.unlabeled_train_idx.iter().map(|&i| pseudo.z_hat[i]).collect();
            let truth: Vec<usize> = mask.unlabeled_train_idx.iter().map(|&i| train.group_labels[i]).collect();
            let confusion = partial_gdro::ablation::confusion(&pred, &truth, train.num_groups()).stage(seed, "pseudolabel")?;
            let stage1_test = pipeline::group_prediction_report(&s1, &splits.test, loss).stage(seed, "evaluate")?;
            let s2 = pipeline::stage2(train, &pseudo.z_hat, val, &mask.labeled_val_idx, &bc.stage2, arch, loss)
                .stage(seed, "stage2")?;
            (
                s2,
                Some(BarackArtifacts {
                    stage1: s1,
                    stage1_test,
                    pseudo,
                    confusion,
                }),
            )
        }
        Method::FlipGdro => {
            let src = flip.ok_or_else(|| CliError::Config("flip_gdro needs a flip source".into()))?;
            (
                pipeline::flip_gdro(
                    train,
                    val,
                    mask,
                    &src.confusion,
                    &c.stage2,
                    arch,
                    loss,
                    child_seed(seed, substream::FLIPS),
                )
                .stage(seed, "flip_gdro")?,
                None,
            )
        }
    };
    Ok(CellRun {
        cell: cell.to_vec(),
        params: selected.params,
        step: selected.step,
        val: selected.val,
        history: selected.history,
        barack,
    })
}

/// Runs every grid cell for one seed and keeps the best one.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, opts: &RunOptions) -> Result<SeedRecord, CliError> {
    let mut splits = splits_for(cfg, seed)?;
    let train_groups = splits.train.group_labels.clone();
    let mask = mask_for(cfg, &splits, seed)?;
    if opts.poison_masked {
        poison(&mut splits.train, &mut splits.val, &mask);
    }
    let flip = match (cfg.method, &cfg.flip_source) {
        (Method::FlipGdro, Some(dir)) => Some(load_flip_source(dir, cfg, seed)?),
        _ => None,
    };
    let cells = match &flip {
        Some(src) => {
            if !cfg.grid.is_empty() {
                log::warn!("flip_gdro reuses the source run's selected cell; grid ignored");
            }
            vec![src.cell.clone()]
        }
        None => cfg.grid_cells(),
    };
    let stage1_cache = match cfg.method {
        Method::Barack | Method::BarackSsl if cells.len() > 1 && cells.iter().flatten().all(|(k, _)| !touches_stage1(k)) => {
            Some(stage1_for(cfg, &splits, &mask, seed)?)
        }
        _ => None,
    };
    let runs: Vec<Result<CellRun, CliError>> = cells
        .par_iter()
        .map(|cell| run_cell(cfg, cell, &splits, &mask, seed, flip.as_ref(), stage1_cache.as_ref()))
        .collect();
    let mut grid_scores = Vec::with_capacity(runs.len());
    let mut best: Option<CellRun> = None;
    for run in runs {
        let run = run?;
        let score = run.val.worst_group_acc;
        grid_scores.push((describe_cell(&run.cell), score));
        if best.as_ref().is_none_or(|b| score > b.val.worst_group_acc) {
            best = Some(run);
        }
    }
    let chosen = best.expect("grid has at least one cell");
    let test = optim::evaluate(
        &chosen.params,
        &splits.test,
        &splits.test.group_labels,
        &cfg.loss,
        Some(&cfg.task.group_proportions()),
    )
    .stage(seed, "evaluate")?;
    Ok(SeedRecord {
        method: cfg.method,
        budget: cfg.budget,
        seed,
        chosen,
        grid_scores,
        test,
        train_groups,
    })
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| CliError::Config(format!("cannot start {workers:?} workers: {e}")))
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let ctx = || format!("writing {}", path.display());
    let file = fs::File::create(path).map_err(CliError::io(ctx()))?;
    let mut w = BufWriter::new(file);
    write(&mut w).and_then(|_| w.flush()).map_err(CliError::io(ctx()))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))
}

/// Appends a timestamped line to the `run.log` sidecar.
fn log_line(dir: &Path, msg: &str) -> Result<(), CliError> {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let path = dir.join("run.log");
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(CliError::io(format!("opening {}", path.display())))?;
    writeln!(f, "{ts} {msg}").map_err(CliError::io(format!("writing {}", path.display())))
}

pub fn results_row(r: &SeedRecord) -> String {
    let stage1 = r
        .chosen
        .barack
        .as_ref()
        .map_or_else(String::new, |b| format_f64(b.stage1_test.worst_group_acc));
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.method.as_str(),
        r.budget,
        r.seed,
        describe_cell(&r.chosen.cell),
        format_f64(r.test.worst_group_acc),
        format_f64(r.test.avg_acc),
        format_f64(r.test.reweighted_avg_acc),
        format_f64(r.test.worst_group_loss),
        format_f64(r.test.avg_loss),
        format_f64(r.chosen.val.worst_group_acc),
        stage1,
    )
}

/// Per-seed files of one record.
pub fn write_seed_files(dir: &Path, r: &SeedRecord) -> Result<(), CliError> {
    let s = r.seed;
    write_file(&dir.join(format!("metrics_seed{s}.kv")), |w| {
        writeln!(w, "method={}", r.method.as_str())?;
        writeln!(w, "budget={}", r.budget)?;
        writeln!(w, "seed={s}")?;
        writeln!(w, "cell={}", describe_cell(&r.chosen.cell))?;
        writeln!(w, "selected_step={}", r.chosen.step)?;
        writeln!(w, "val_worst_group_acc={}", format_f64(r.chosen.val.worst_group_acc))?;
        w.write_all(r.test.to_kv().as_bytes())
    })?;
    write_file(&dir.join(format!("selected_seed{s}.kv")), |w| {
        for (k, v) in &r.chosen.cell {
            writeln!(w, "{k}={v}")?;
        }
        Ok(())
    })?;
    write_file(&dir.join(format!("grid_seed{s}.csv")), |w| {
        writeln!(w, "cell,val_worst_group_acc")?;
        for (cell, score) in &r.grid_scores {
            writeln!(w, "{cell},{}", format_f64(*score))?;
        }
        Ok(())
    })?;
    write_file(&dir.join(format!("model_seed{s}.txt")), |w| model::write_params(w, &r.chosen.params))?;
    write_file(&dir.join(format!("history_seed{s}.csv")), |w| r.chosen.history.write_csv(w))?;
    if let Some(b) = &r.chosen.barack {
        write_file(&dir.join(format!("confusion_seed{s}.csv")), |w| b.confusion.write_csv(w))?;
        write_file(&dir.join(format!("pseudolabels_seed{s}.csv")), |w| b.pseudo.write_csv(w, &r.train_groups))?;
        write_file(&dir.join(format!("stage1_seed{s}.kv")), |w| w.write_all(b.stage1_test.to_kv().as_bytes()))?;
    }
    Ok(())
}

/// Runs every configured seed and writes per-seed files plus `results.csv`
/// under `cfg.output_dir`.
pub fn cmd_run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<SeedRecord>, CliError> {
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    log_line(dir, &format!("run method={} budget={} seeds={:?}", cfg.method.as_str(), cfg.budget, cfg.seeds))?;
    let results: Vec<Result<SeedRecord, CliError>> = pool(opts.workers)?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let r = run_seed(cfg, seed, opts)?;
                write_seed_files(dir, &r)?;
                Ok(r)
            })
            .collect()
    });
    let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    write_results(dir, &records)?;
    log_line(dir, "run finished")?;
    Ok(records)
}

pub fn write_results(dir: &Path, records: &[SeedRecord]) -> Result<(), CliError> {
    let mut sorted: Vec<&SeedRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.seed);
    write_file(&dir.join("results.csv"), |w| {
        writeln!(w, "{RESULTS_HEADER}")?;
        for r in sorted {
            writeln!(w, "{}", results_row(r))?;
        }
        Ok(())
    })
}

/// Writes `train_seed{S}.txt`, `val_seed{S}.txt` and `test_seed{S}.txt` for
/// every seed.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    ensure_dir(out)?;
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let s = splits_for(cfg, seed)?;
        for (name, ds) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
            let path = out.join(format!("{name}_seed{seed}.txt"));
            write_file(&path, |w| dataset::write_dataset(w, ds))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Stage-1 group-prediction accuracy with and without the class input.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassInputRow {
    pub seed: u64,
    pub with_class: MetricsReport,
    pub without_class: MetricsReport,
}

pub fn class_input_seed(cfg: &ExperimentConfig, seed: u64) -> Result<ClassInputRow, CliError> {
    let splits = splits_for(cfg, seed)?;
    let mask = mask_for(cfg, &splits, seed)?;
    let run = |use_class: bool| -> Result<MetricsReport, CliError> {
        let mut c = seeded(cfg, seed);
        c.stage1.use_class_input = use_class;
        let bc = BarackConfig {
            stage1: c.stage1,
            ..BarackConfig::default()
        };
        let s1 = pipeline::stage1(&splits.train, &splits.val, &mask, &bc, &c.loss).stage(seed, "stage1")?;
        pipeline::group_prediction_report(&s1, &splits.test, &c.loss).stage(seed, "evaluate")
    };
    Ok(ClassInputRow {
        seed,
        with_class: run(true)?,
        without_class: run(false)?,
    })
}

/// `ablate.kind=flip` runs `flip_gdro` against `flip.source`;
/// `ablate.kind=class_input` compares Stage 1 with and without the class
/// input and writes `class_input.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(), CliError> {
    match cfg.ablate_kind.as_str() {
        "flip" => {
            let mut c = cfg.clone();
            c.method = Method::FlipGdro;
            if c.flip_source.is_none() {
                return Err(CliError::Config("ablate.kind=flip requires flip.source".into()));
            }
            cmd_run(&c, opts).map(|_| ())
        }
        "class_input" => {
            let dir = &cfg.output_dir;
            ensure_dir(dir)?;
            log_line(dir, "ablate class_input")?;
            let rows: Vec<Result<ClassInputRow, CliError>> =
                pool(opts.workers)?.install(|| cfg.seeds.par_iter().map(|&s| class_input_seed(cfg, s)).collect());
            let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
            write_file(&dir.join("class_input.csv"), |w| {
                writeln!(w, "seed,with_class_worst_group_acc,without_class_worst_group_acc,with_class_avg_acc,without_class_avg_acc")?;
                for r in &rows {
                    writeln!(
                        w,
                        "{},{},{},{},{}",
                        r.seed,
                        format_f64(r.with_class.worst_group_acc),
                        format_f64(r.without_class.worst_group_acc),
                        format_f64(r.with_class.avg_acc),
                        format_f64(r.without_class.avg_acc)
                    )?;
                }
                Ok(())
            })?;
            log_line(dir, "ablate finished")
        }
        other => Err(CliError::Config(format!("unknown ablate.kind `{other}`"))),
    }
}

/// Text summary and violation count of a `bounds` invocation.
#[derive(Debug, Clone, Default)]
pub struct BoundsOutcome {
    pub lines: Vec<String>,
    pub violations: usize,
}

pub fn cmd_bounds(cfg: &ExperimentConfig, seed: u64) -> Result<BoundsOutcome, CliError> {
    let b = &cfg.bounds;
    let dir = &cfg.output_dir;
    let mut out = BoundsOutcome::default();
    if b.suites.is_empty() {
        return Ok(out);
    }
    if let Some(bad) = b.suites.iter().find(|s| !["lemmas", "scaling"].contains(&s.as_str())) {
        return Err(CliError::Config(format!("unknown bounds suite `{bad}`")));
    }
    ensure_dir(dir)?;
    for suite in &b.suites {
        match suite.as_str() {
            "lemmas" => lemma_suite(cfg, seed, &mut out)?,
            "scaling" => {
                let mut spec = ScalingSpec::rate_check(b.scaling_trials);
                spec.trainer = b.scaling_trainer;
                spec.sizes = b.scaling_sizes.clone();
                spec.steps = b.scaling_steps;
                spec.holdout = b.scaling_holdout;
                spec.train.lr = b.scaling_lr;
                spec.train.eta_group = b.scaling_eta;
                spec.seed = seed;
                if b.scaling_trainer == theory::ScalingTrainer::Erm {
                    spec.task = cfg.task.clone();
                    spec.train.sampling = optim::Sampling::Iid;
                }
                let res = theory::excess_risk_scaling(&spec).stage(seed, "scaling")?;
                write_file(&dir.join("scaling.csv"), |w| res.write_csv(w))?;
                out.lines.push(format!("scaling {}", res.summary()));
            }
            _ => unreachable!("suites validated above"),
        }
    }
    let mut text = String::new();
    for l in &out.lines {
        let _ = writeln!(text, "{l}");
    }
    let _ = writeln!(text, "violations={}", out.violations);
    write_file(&dir.join("bounds_summary.txt"), |w| w.write_all(text.as_bytes()))?;
    Ok(out)
}

fn lemma_suite(cfg: &ExperimentConfig, seed: u64, out: &mut BoundsOutcome) -> Result<(), CliError> {
    let b = &cfg.bounds;
    let pm = pointmass_experiment(
        &b.pointmass_priors,
        b.pointmass_n,
        seed,
        &partial_gdro::loss::LossConfig::default(),
        &PointmassConfig::default(),
    )
    .stage(seed, "pointmass")?;
    let pm_bad = usize::from(pm.gdro_worst_loss > pm.erm_worst_loss + 0.01);
    out.lines.push(format!(
        "pointmass erm_worst_loss={:.6} gdro_worst_loss={:.6} ratio={:.4} bound={:.4} violations={pm_bad}",
        pm.erm_worst_loss, pm.gdro_worst_loss, pm.ratio, pm.bound
    ));
    let pc = theory::perturb_check(b.perturb_trials, b.perturb_groups, b.perturb_grid, b.perturb_eps, seed)
        .stage(seed, "perturb")?;
    let (gap, _) = theory::perturb_search(20, 2000, 2, 3, b.perturb_eps, seed)
        .stage(seed, "perturb")?;
    out.lines.push(format!(
        "perturb trials={} max_gap={:.6} searched_gap={:.6} eps={} violations={}",
        pc.trials, pc.max_gap, gap, b.perturb_eps, pc.violations
    ));
    let cs = theory::coupling_suite(b.coupling_tables, seed).stage(seed, "coupling")?;
    let cs_bad = usize::from(!(cs.max_abs_diff < 1e-12));
    out.lines.push(format!(
        "coupling tables={} max_abs_diff={:.3e} control_gap={:.6} violations={cs_bad}",
        cs.tables, cs.max_abs_diff, cs.control_gap
    ));
    let lb = theory::loss_bound_check(b.lossbound_points, seed).stage(seed, "loss_bound")?;
    let by_k: Vec<String> = lb.violations_by_k.iter().map(|(k, v)| format!("{k}:{v}")).collect();
    out.lines.push(format!(
        "loss_bound checked={} violations={} by_k={} two_way_violations={}",
        lb.checked,
        lb.violations,
        by_k.join(";"),
        lb.two_way_violations
    ));
    out.violations += pm_bad + pc.violations + cs_bad + lb.violations;
    Ok(())
}
