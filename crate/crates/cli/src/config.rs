//! Flat `key=value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; lists are comma
//! separated. Unknown keys are rejected. Later assignments win, except that
//! `model.preset` is applied before every other key of the same document.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ctxdiff::data::TaskKind;
use ctxdiff::diffusion::TimestepWeighting;
use ctxdiff::eval::SamplerOptions;
use ctxdiff::feedback::FeedbackConfig;
use ctxdiff::model::ModelConfig;
use ctxdiff::optim::{OptimConfig, OptimizerKind};
use ctxdiff::schedule::{select_steps, NoiseSchedule, StepPlan, Strategy};
use ctxdiff::train::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Micro,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Micro => ModelConfig::micro(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Micro => "micro",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub preset: Preset,
    pub model: ModelConfig,
    pub schedule_t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Inference plan; also the training plan when `train_ess` is set.
    pub plan_strategy: Strategy,
    pub plan_k: usize,
    pub train_ess: bool,
    pub train_steps: u64,
    pub batch_size: usize,
    pub weighting: TimestepWeighting,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub optim: OptimConfig,
    pub fal: FeedbackConfig,
    pub sample_task: TaskKind,
    pub sample_n: usize,
    pub eta: f64,
    pub clip_x0: bool,
    pub eval_tasks: Vec<TaskKind>,
    pub eval_n: usize,
    pub eval_batch_size: usize,
    pub feature_seed: u64,
    pub sandbox_n: usize,
    pub sandbox_mu0: f64,
    pub sandbox_sigma0: f64,
    pub sandbox_dim: usize,
    pub sandbox_eta: f64,
    pub sandbox_strategies: Vec<Strategy>,
    pub sandbox_ks: Vec<usize>,
    pub ablate_lambdas: Vec<f64>,
    pub ablate_rmse_task: TaskKind,
    pub ablate_fd_task: TaskKind,
    pub data_task: TaskKind,
    pub data_n: usize,
}

fn task(s: &str) -> TaskKind {
    s.parse().expect("built-in task name")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            preset: Preset::Desk,
            model: ModelConfig::desk(),
            schedule_t: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            plan_strategy: Strategy::Power(0.5),
            plan_k: 10,
            train_ess: true,
            train_steps: 2000,
            batch_size: 8,
            weighting: TimestepWeighting::Uniform,
            checkpoint_every: 500,
            log_every: 100,
            optim: OptimConfig::default(),
            fal: FeedbackConfig::default(),
            sample_task: task("edge/image2map"),
            sample_n: 8,
            eta: 0.0,
            clip_x0: true,
            eval_tasks: vec![task("edge/image2map")],
            eval_n: 100,
            eval_batch_size: 25,
            feature_seed: 0,
            sandbox_n: 100_000,
            sandbox_mu0: 0.0,
            sandbox_sigma0: 1.0,
            sandbox_dim: 1,
            sandbox_eta: 0.0,
            sandbox_strategies: vec![
                Strategy::Uniform,
                Strategy::Power(0.3),
                Strategy::Power(0.5),
                Strategy::Power(0.7),
                Strategy::AlphaQuantile,
            ],
            sandbox_ks: vec![5, 10, 20, 50],
            ablate_lambdas: vec![0.0, 0.1, 1.0, 10.0, 100.0],
            ablate_rmse_task: task("edge/image2map"),
            ablate_fd_task: task("edge/map2image"),
            data_task: task("edge/image2map"),
            data_n: 16,
        }
    }
}

/// Splits a document into `(key, value)` pairs in order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses `key=value` from a command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| CliError::config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| CliError::config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(CliError::config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    // Commas inside parentheses belong to the item, e.g. `power(0.5)`.
    let mut items = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, c) in v.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                items.push(&v[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    items.push(&v[start..]);
    let items: Vec<&str> = items.into_iter().map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(CliError::config(format!("{key}: empty list")));
    }
    items.into_iter().map(|s| parse(key, s)).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn weighting_name(w: TimestepWeighting) -> &'static str {
    match w {
        TimestepWeighting::Uniform => "uniform",
        TimestepWeighting::NoiseLevel => "noise_level",
    }
}

impl RunConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "model.preset" => {
                self.preset = match v {
                    "desk" => Preset::Desk,
                    "micro" => Preset::Micro,
                    _ => return Err(CliError::config(format!("model.preset: expected desk or micro, got {v:?}"))),
                };
                self.model = self.preset.model();
            }
            "model.image_size" => self.model.image_size = parse(key, v)?,
            "model.base_channels" => self.model.base_channels = parse(key, v)?,
            "model.depth" => self.model.depth = parse(key, v)?,
            "model.time_embed_dim" => self.model.time_embed_dim = parse(key, v)?,
            "model.task_embed_dim" => self.model.task_embed_dim = parse(key, v)?,
            "model.sga" => self.model.sga = parse_bool(key, v)?,
            "model.sga_channels" => self.model.sga_channels = parse(key, v)?,
            "model.sga_convs" => self.model.sga_convs = parse(key, v)?,
            "schedule.t" => self.schedule_t = parse(key, v)?,
            "schedule.beta_start" => self.beta_start = parse(key, v)?,
            "schedule.beta_end" => self.beta_end = parse(key, v)?,
            "plan.strategy" => self.plan_strategy = parse(key, v)?,
            "plan.k" => self.plan_k = parse(key, v)?,
            "train.ess" => self.train_ess = parse_bool(key, v)?,
            "train.steps" => self.train_steps = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.weighting" => {
                self.weighting = match v {
                    "uniform" => TimestepWeighting::Uniform,
                    "noise_level" => TimestepWeighting::NoiseLevel,
                    _ => return Err(CliError::config(format!("train.weighting: expected uniform or noise_level, got {v:?}"))),
                }
            }
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "train.log_every" => self.log_every = parse(key, v)?,
            "optim.kind" => self.optim.kind = parse::<OptimizerKind>(key, v)?,
            "optim.lr" => self.optim.lr = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.grad_clip" => self.optim.grad_clip = parse(key, v)?,
            "fal.enabled" => self.fal.enabled = parse_bool(key, v)?,
            "fal.lambda" => self.fal.lambda = parse(key, v)?,
            "fal.t_prime" => self.fal.t_prime = parse(key, v)?,
            "fal.stop_gradient" => self.fal.stop_gradient = parse_bool(key, v)?,
            "fal.restrict_to_plan" => self.fal.restrict_to_plan = parse_bool(key, v)?,
            "sample.task" => self.sample_task = parse(key, v)?,
            "sample.n" => self.sample_n = parse(key, v)?,
            "sample.eta" => self.eta = parse(key, v)?,
            "sample.clip_x0" => self.clip_x0 = parse_bool(key, v)?,
            "eval.tasks" => self.eval_tasks = parse_list(key, v)?,
            "eval.n" => self.eval_n = parse(key, v)?,
            "eval.batch_size" => self.eval_batch_size = parse(key, v)?,
            "eval.feature_seed" => self.feature_seed = parse(key, v)?,
            "sandbox.n" => self.sandbox_n = parse(key, v)?,
            "sandbox.mu0" => self.sandbox_mu0 = parse(key, v)?,
            "sandbox.sigma0" => self.sandbox_sigma0 = parse(key, v)?,
            "sandbox.dim" => self.sandbox_dim = parse(key, v)?,
            "sandbox.eta" => self.sandbox_eta = parse(key, v)?,
            "sandbox.strategies" => self.sandbox_strategies = parse_list(key, v)?,
            "sandbox.ks" => self.sandbox_ks = parse_list(key, v)?,
            "ablate.lambdas" => self.ablate_lambdas = parse_list(key, v)?,
            "ablate.rmse_task" => self.ablate_rmse_task = parse(key, v)?,
            "ablate.fd_task" => self.ablate_fd_task = parse(key, v)?,
            "data.task" => self.data_task = parse(key, v)?,
            "data.n" => self.data_n = parse(key, v)?,
            _ => return Err(CliError::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a batch of assignments, the preset first.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs.iter().filter(|(k, _)| k == "model.preset") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "model.preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_pairs(text)?)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its resolved value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("model.preset", self.preset.name().to_string()),
            ("model.image_size", m.image_size.to_string()),
            ("model.base_channels", m.base_channels.to_string()),
            ("model.depth", m.depth.to_string()),
            ("model.time_embed_dim", m.time_embed_dim.to_string()),
            ("model.task_embed_dim", m.task_embed_dim.to_string()),
            ("model.sga", m.sga.to_string()),
            ("model.sga_channels", m.sga_channels.to_string()),
            ("model.sga_convs", m.sga_convs.to_string()),
            ("schedule.t", self.schedule_t.to_string()),
            ("schedule.beta_start", self.beta_start.to_string()),
            ("schedule.beta_end", self.beta_end.to_string()),
            ("plan.strategy", self.plan_strategy.to_string()),
            ("plan.k", self.plan_k.to_string()),
            ("train.ess", self.train_ess.to_string()),
            ("train.steps", self.train_steps.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.weighting", weighting_name(self.weighting).to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("train.log_every", self.log_every.to_string()),
            ("optim.kind", self.optim.kind.to_string()),
            ("optim.lr", self.optim.lr.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("optim.weight_decay", self.optim.weight_decay.to_string()),
            ("optim.grad_clip", self.optim.grad_clip.to_string()),
            ("fal.enabled", self.fal.enabled.to_string()),
            ("fal.lambda", self.fal.lambda.to_string()),
            ("fal.t_prime", self.fal.t_prime.to_string()),
            ("fal.stop_gradient", self.fal.stop_gradient.to_string()),
            ("fal.restrict_to_plan", self.fal.restrict_to_plan.to_string()),
            ("sample.task", self.sample_task.to_string()),
            ("sample.n", self.sample_n.to_string()),
            ("sample.eta", self.eta.to_string()),
            ("sample.clip_x0", self.clip_x0.to_string()),
            ("eval.tasks", join(&self.eval_tasks)),
            ("eval.n", self.eval_n.to_string()),
            ("eval.batch_size", self.eval_batch_size.to_string()),
            ("eval.feature_seed", self.feature_seed.to_string()),
            ("sandbox.n", self.sandbox_n.to_string()),
            ("sandbox.mu0", self.sandbox_mu0.to_string()),
            ("sandbox.sigma0", self.sandbox_sigma0.to_string()),
            ("sandbox.dim", self.sandbox_dim.to_string()),
            ("sandbox.eta", self.sandbox_eta.to_string()),
            ("sandbox.strategies", join(&self.sandbox_strategies)),
            ("sandbox.ks", join(&self.sandbox_ks)),
            ("ablate.lambdas", join(&self.ablate_lambdas)),
            ("ablate.rmse_task", self.ablate_rmse_task.to_string()),
            ("ablate.fd_task", self.ablate_fd_task.to_string()),
            ("data.task", self.data_task.to_string()),
            ("data.n", self.data_n.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule_t, self.beta_start, self.beta_end)
            .map_err(|e| CliError::config(format!("schedule: {e}")))
    }

    /// The sampling and evaluation plan.
    pub fn sampler(&self) -> SamplerOptions {
        SamplerOptions { eta: self.eta, clip_x0: self.clip_x0 }
    }

    pub fn inference_plan(&self) -> Result<StepPlan> {
        select_steps(&self.schedule()?, self.plan_k, self.plan_strategy).map_err(|e| CliError::config(format!("plan: {e}")))
    }

    /// The plan the reconstruction objective draws from: the inference plan
    /// with ESS, every step without.
    pub fn training_plan(&self) -> Result<StepPlan> {
        if self.train_ess {
            self.inference_plan()
        } else {
            Ok(StepPlan::full(self.schedule_t))
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            model: self.model.clone(),
            schedule: self.schedule()?,
            plan: self.training_plan()?,
            weighting: self.weighting,
            feedback: self.fal.clone(),
            optim: self.optim.clone(),
            batch_size: self.batch_size,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(cfg)
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<()> {
        self.train_config()?;
        self.inference_plan()?;
        if !(0.0..=1.0).contains(&self.eta) || !(0.0..=1.0).contains(&self.sandbox_eta) {
            return Err(CliError::config("eta must lie in [0, 1]"));
        }
        let positive = [
            ("sample.n", self.sample_n),
            ("eval.n", self.eval_n),
            ("eval.batch_size", self.eval_batch_size),
            ("sandbox.dim", self.sandbox_dim),
            ("data.n", self.data_n),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::config(format!("{k} must be positive")));
        }
        if self.ablate_rmse_task.direction != ctxdiff::data::Direction::Image2Map
            || self.ablate_fd_task.direction != ctxdiff::data::Direction::Map2Image
        {
            return Err(CliError::config("ablate.rmse_task must be Image2Map and ablate.fd_task Map2Image"));
        }
        Ok(())
    }
}
