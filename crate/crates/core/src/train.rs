//! The training loop: round-robin over the six training tasks, one
//! reconstruction pass and (optionally) one feedback pass per step.

use crate::data::{make_training_batch, TaskKind};
use crate::diffusion::{training_loss, TimestepWeighting};
use crate::error::{Error, Result};
use crate::feedback::{feedback_loss, total_loss, FeedbackConfig};
use crate::model::{DenoiserModel, ModelConfig};
use crate::optim::{OptimConfig, Optimizer};
use crate::rng::{streams, Rng};
use crate::schedule::{NoiseSchedule, StepPlan};
use crate::tensor::Graph;

pub const LOSS_CSV_HEADER: &str = "step,task,train_loss,feedback_loss,total_loss";

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub schedule: NoiseSchedule,
    /// Steps the reconstruction objective draws from.
    pub plan: StepPlan,
    pub weighting: TimestepWeighting,
    pub feedback: FeedbackConfig,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.feedback.validate(&self.schedule)?;
        self.optim.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.plan.steps().last() != Some(&self.schedule.t_max()) {
            return Err(Error::invalid("training plan does not match the schedule"));
        }
        Ok(())
    }
}

/// Generator for `stream` at training step `step`. Depends only on the run
/// seed, so any step can be replayed in isolation.
pub fn step_rng(seed: u64, stream: u64, step: u64) -> Rng {
    Rng::stream(seed.wrapping_add(step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)), stream)
}

/// Losses recorded for one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub task: TaskKind,
    pub train_loss: f64,
    /// `None` when feedback is inactive.
    pub feedback_loss: Option<f64>,
    pub total_loss: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let fb = self.feedback_loss.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.step, self.task, self.train_loss, fb, self.total_loss)
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: DenoiserModel<f32>,
    optimizer: Optimizer,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = DenoiserModel::new(config.model.clone(), &mut Rng::stream(config.seed, streams::INIT))?;
        Self::from_model(config, model, 0)
    }

    /// Continues from existing parameters with fresh optimizer state.
    pub fn from_model(config: TrainConfig, model: DenoiserModel<f32>, step: u64) -> Result<Self> {
        config.validate()?;
        if model.config != config.model {
            return Err(Error::invalid("model does not match the training configuration"));
        }
        let optimizer = Optimizer::new(config.optim.clone(), model.params.values())?;
        Ok(Self { config, model, optimizer, step })
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Task trained at step `step`.
    pub fn task_at(step: u64) -> TaskKind {
        TaskKind::training()[(step % TaskKind::COUNT as u64) as usize]
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let cfg = &self.config;
        let step = self.step;
        let task = Self::task_at(step);
        let data_seed = step_rng(cfg.seed, streams::DATA, step).next_u64();
        let batch = make_training_batch::<f32>(task, cfg.batch_size, data_seed, cfg.model.image_size)?;

        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true);
        let mut noise = step_rng(cfg.seed, streams::TRAIN_NOISE, step);
        let l_train = training_loss(&mut g, &bound, &batch, &cfg.schedule, &cfg.plan, cfg.weighting, &mut noise)?;
        let l_fb = if cfg.feedback.active() {
            let mut fb_rng = step_rng(cfg.seed, streams::FEEDBACK_NOISE, step);
            Some(feedback_loss(&mut g, &bound, &batch, &cfg.schedule, &cfg.plan, &cfg.feedback, &mut fb_rng)?)
        } else {
            None
        };
        let total = total_loss(&mut g, l_train, l_fb, &cfg.feedback)?;
        let log = StepLog {
            step,
            task,
            train_loss: g.value(l_train).item() as f64,
            feedback_loss: l_fb.map(|v| g.value(v).item() as f64),
            total_loss: g.value(total).item() as f64,
        };
        if !log.total_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step} ({task})")));
        }
        g.backward(total)?;
        let grads = bound.grads(&g);
        drop(g);
        self.optimizer
            .step(self.model.params.values_mut(), &grads)
            .map_err(|e| Error::Numeric(format!("step {step} ({task}): {e}")))?;
        self.step += 1;
        Ok(log)
    }
}
