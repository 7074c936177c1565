//! Flat `key=value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment. Keys use dotted section
//! prefixes (`stage2.lr=0.1`). A key of the form `SECTION.grid.FIELD` lists
//! comma-separated candidate values for `SECTION.FIELD` (sections `stage1`,
//! `stage2` and `ssl`). `run` tries every combination and keeps, per seed,
//! the one with the best worst-group accuracy on the group-labeled
//! validation rows.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use partial_gdro::dataset::{RareGroupTask, SpuriousTask, Task};
use partial_gdro::loss::{LossConfig, LossKind};
use partial_gdro::model::Arch;
use partial_gdro::optim::{Sampling, TrainConfig};
use partial_gdro::pipeline::{PredictMode, SslConfig, Stage1Config};
use partial_gdro::theory::ScalingTrainer;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Erm,
    FullGdro,
    SubsetGdro,
    Barack,
    BarackSsl,
    FlipGdro,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "erm" => Method::Erm,
            "full_gdro" => Method::FullGdro,
            "subset_gdro" => Method::SubsetGdro,
            "barack" => Method::Barack,
            "barack_ssl" => Method::BarackSsl,
            "flip_gdro" => Method::FlipGdro,
            other => return Err(CliError::Config(format!("unknown method `{other}`"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::FullGdro => "full_gdro",
            Method::SubsetGdro => "subset_gdro",
            Method::Barack => "barack",
            Method::BarackSsl => "barack_ssl",
            Method::FlipGdro => "flip_gdro",
        }
    }
}

/// Group labels revealed per group, or all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    PerGroup(usize),
    All,
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::PerGroup(b) => write!(f, "{b}"),
            Budget::All => write!(f, "inf"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsConfig {
    /// Any of `lemmas`, `scaling`.
    pub suites: Vec<String>,
    pub pointmass_priors: Vec<f64>,
    pub pointmass_n: usize,
    pub perturb_trials: usize,
    pub perturb_groups: usize,
    pub perturb_grid: usize,
    pub perturb_eps: f64,
    pub coupling_tables: usize,
    pub lossbound_points: usize,
    pub scaling_trainer: ScalingTrainer,
    pub scaling_sizes: Vec<usize>,
    pub scaling_trials: usize,
    pub scaling_steps: usize,
    pub scaling_holdout: usize,
    pub scaling_lr: f64,
    pub scaling_eta: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            suites: vec!["lemmas".into()],
            pointmass_priors: vec![0.7, 0.1, 0.1, 0.1],
            pointmass_n: 10_000,
            perturb_trials: 10_000,
            perturb_groups: 3,
            perturb_grid: 8,
            perturb_eps: 0.3,
            coupling_tables: 100,
            lossbound_points: 100_000,
            scaling_trainer: ScalingTrainer::SubsetGdro,
            scaling_sizes: vec![64, 128, 256, 512, 1024, 2048, 4096],
            scaling_trials: 20,
            scaling_steps: 1500,
            scaling_holdout: 100_000,
            scaling_lr: 0.1,
            scaling_eta: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub method: Method,
    pub budget: Budget,
    pub loss: LossConfig,
    pub stage1: Stage1Config,
    pub ssl: SslConfig,
    pub stage2: TrainConfig,
    pub stage2_arch: Arch,
    pub predict_mode: PredictMode,
    /// `(key, candidates)` in key order.
    pub grid: Vec<(String, Vec<String>)>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Directory of a BARACK run whose confusion matrices and selections
    /// `flip_gdro` reuses.
    pub flip_source: Option<PathBuf>,
    pub ablate_kind: String,
    pub bounds: BoundsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Spurious(SpuriousTask::default()),
            n_train: 4000,
            n_val: 2000,
            n_test: 20_000,
            method: Method::Barack,
            budget: Budget::PerGroup(16),
            loss: LossConfig::default(),
            stage1: Stage1Config::default(),
            ssl: SslConfig::default(),
            stage2: TrainConfig::default(),
            stage2_arch: Arch::mlp1(),
            predict_mode: PredictMode::Argmax,
            grid: Vec::new(),
            seeds: vec![0],
            output_dir: PathBuf::from("out"),
            flip_source: None,
            ablate_kind: "flip".into(),
            bounds: BoundsConfig::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e| CliError::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, CliError>
where
    T::Err: fmt::Display,
{
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn flag(key: &str, v: &str) -> Result<bool, CliError> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(CliError::Config(format!("{key}: expected a boolean, got `{other}`"))),
    }
}

fn lift<T>(key: &str, r: partial_gdro::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Config(format!("{key}: {e}")))
}

fn set_train(cfg: &mut TrainConfig, field: &str, key: &str, v: &str) -> Result<bool, CliError> {
    match field {
        "lr" => cfg.lr = num(key, v)?,
        "weight_decay" => cfg.weight_decay = num(key, v)?,
        "epochs" => cfg.epochs = num(key, v)?,
        "batch_size" => cfg.batch_size = num(key, v)?,
        "eta_group" => cfg.eta_group = num(key, v)?,
        "adjustment_c" => cfg.adjustment_c = num(key, v)?,
        "sampling" => cfg.sampling = lift(key, Sampling::parse(v.trim()))?,
        "eval_every" => cfg.eval_every = num(key, v)?,
        "jitter" => cfg.jitter = num(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn spurious(task: &mut Task) -> &mut SpuriousTask {
    if !matches!(task, Task::Spurious(_)) {
        *task = Task::Spurious(SpuriousTask::default());
    }
    match task {
        Task::Spurious(t) => t,
        _ => unreachable!(),
    }
}

fn rare(task: &mut Task) -> &mut RareGroupTask {
    if !matches!(task, Task::RareGroup(_)) {
        *task = Task::RareGroup(RareGroupTask::default());
    }
    match task {
        Task::RareGroup(t) => t,
        _ => unreachable!(),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::default();
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key=value", lineno + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        // `task` selects the family; apply it before its parameters.
        pairs.sort_by_key(|(k, _)| u8::from(k != "task"));
        let mut grid = BTreeMap::new();
        for (k, v) in pairs {
            if let Some((section, field)) = k.split_once(".grid.") {
                if !matches!(section, "stage1" | "stage2" | "ssl") {
                    return Err(CliError::Config(format!("{k}: grids are allowed for stage1, stage2 and ssl keys only")));
                }
                let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                if values.is_empty() {
                    return Err(CliError::Config(format!("{k}: empty grid")));
                }
                let target = format!("{section}.{field}");
                // validate every candidate up front
                for value in &values {
                    cfg.clone().set(&target, value)?;
                }
                grid.insert(target, values);
            } else {
                cfg.set(&k, &v)?;
            }
        }
        cfg.grid = grid.into_iter().collect();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let unknown = || CliError::Config(format!("unknown key `{key}`"));
        match key {
            "task" => {
                self.task = match v {
                    "spurious" => Task::Spurious(SpuriousTask::default()),
                    "rare_group" => Task::RareGroup(RareGroupTask::default()),
                    "pointmass" => Task::PointMass {
                        priors: vec![0.7, 0.1, 0.1, 0.1],
                    },
                    other => return Err(CliError::Config(format!("unknown task `{other}`"))),
                }
            }
            "task.rho" => spurious(&mut self.task).rho = num(key, v)?,
            "task.mu_core" => spurious(&mut self.task).mu_core = num(key, v)?,
            "task.mu_spur" => spurious(&mut self.task).mu_spur = num(key, v)?,
            "task.class0_prior" => spurious(&mut self.task).class0_prior = num(key, v)?,
            "task.noise_dims" => match &mut self.task {
                Task::Spurious(t) => t.noise_dims = num(key, v)?,
                Task::RareGroup(t) => t.noise_dims = num(key, v)?,
                Task::PointMass { .. } => return Err(CliError::Config("pointmass has no noise_dims".into())),
            },
            "task.num_groups" => rare(&mut self.task).num_groups = num(key, v)?,
            "task.rare_group" => rare(&mut self.task).rare_group = num(key, v)?,
            "task.rare_frac" => rare(&mut self.task).rare_frac = num(key, v)?,
            "task.radius" => rare(&mut self.task).radius = num(key, v)?,
            "task.priors" => {
                self.task = Task::PointMass {
                    priors: list(key, v)?,
                }
            }
            "data.n_train" => self.n_train = num(key, v)?,
            "data.n_val" => self.n_val = num(key, v)?,
            "data.n_test" => self.n_test = num(key, v)?,
            "method" => self.method = Method::parse(v)?,
            "budget" => {
                self.budget = if v == "inf" || v == "all" {
                    Budget::All
                } else {
                    Budget::PerGroup(num(key, v)?)
                }
            }
            "loss" => self.loss.kind = lift(key, LossKind::parse(v))?,
            "loss.bound" => self.loss.bound = num(key, v)?,
            "predict_mode" => self.predict_mode = lift(key, PredictMode::parse(v))?,
            "seeds" => self.seeds = list(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "flip.source" => self.flip_source = Some(PathBuf::from(v)),
            "ablate.kind" => self.ablate_kind = v.to_string(),
            "stage1.arch" => self.stage1.arch = lift(key, Arch::parse(v))?,
            "stage1.use_class_input" => self.stage1.use_class_input = flag(key, v)?,
            "stage1.epoch_scale" => {
                self.stage1.epoch_scale = if v == "none" { None } else { Some(num(key, v)?) }
            }
            "stage2.arch" => self.stage2_arch = lift(key, Arch::parse(v))?,
            "ssl.lambda_sup" => self.ssl.lambda_sup = num(key, v)?,
            "ssl.tau" => self.ssl.tau = num(key, v)?,
            "ssl.sigma_aug" => self.ssl.sigma_aug = num(key, v)?,
            "bounds.suite" => self.bounds.suites = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            "bounds.pointmass_priors" => self.bounds.pointmass_priors = list(key, v)?,
            "bounds.pointmass_n" => self.bounds.pointmass_n = num(key, v)?,
            "bounds.perturb_trials" => self.bounds.perturb_trials = num(key, v)?,
            "bounds.perturb_groups" => self.bounds.perturb_groups = num(key, v)?,
            "bounds.perturb_grid" => self.bounds.perturb_grid = num(key, v)?,
            "bounds.perturb_eps" => self.bounds.perturb_eps = num(key, v)?,
            "bounds.coupling_tables" => self.bounds.coupling_tables = num(key, v)?,
            "bounds.lossbound_points" => self.bounds.lossbound_points = num(key, v)?,
            "bounds.scaling_trainer" => self.bounds.scaling_trainer = lift(key, ScalingTrainer::parse(v))?,
            "bounds.scaling_sizes" => self.bounds.scaling_sizes = list(key, v)?,
            "bounds.scaling_trials" => self.bounds.scaling_trials = num(key, v)?,
            "bounds.scaling_steps" => self.bounds.scaling_steps = num(key, v)?,
            "bounds.scaling_holdout" => self.bounds.scaling_holdout = num(key, v)?,
            "bounds.scaling_lr" => self.bounds.scaling_lr = num(key, v)?,
            "bounds.scaling_eta" => self.bounds.scaling_eta = num(key, v)?,
            _ => {
                let (section, field) = key.split_once('.').ok_or_else(unknown)?;
                let target = match section {
                    "stage1" => &mut self.stage1.train,
                    "stage2" => &mut self.stage2,
                    _ => return Err(unknown()),
                };
                if !set_train(target, field, key, v)? {
                    return Err(unknown());
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        lift("stage1", self.stage1.train.validate())?;
        lift("stage2", self.stage2.validate())?;
        lift("ssl", self.ssl.validate())?;
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds: at least one seed required".into()));
        }
        if self.method == Method::FlipGdro && self.flip_source.is_none() {
            return Err(CliError::Config("flip_gdro requires flip.source (a barack run directory)".into()));
        }
        if self.method == Method::FullGdro && self.budget != Budget::All {
            log::info!("full_gdro reads every group label; budget only affects validation for other methods");
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(CliError::Config("data sizes must be positive".into()));
        }
        Ok(())
    }

    /// Every grid combination as a list of `(key, value)` assignments, in
    /// lexicographic order of the candidate indices.
    pub fn grid_cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.grid {
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for cell in &cells {
                for v in values {
                    let mut c = cell.clone();
                    c.push((key.clone(), v.clone()));
                    next.push(c);
                }
            }
            cells = next;
        }
        cells
    }

    pub fn with_cell(&self, cell: &[(String, String)]) -> Result<Self, CliError> {
        let mut c = self.clone();
        for (k, v) in cell {
            c.set(k, v)?;
        }
        Ok(c)
    }
}

pub fn describe_cell(cell: &[(String, String)]) -> String {
    if cell.is_empty() {
        return "default".into();
    }
    cell.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}
