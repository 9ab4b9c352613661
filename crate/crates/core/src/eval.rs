//! Held-out evaluation: sample every query with a plan, then score maps by
//! RMSE (Image2Map) or images by the Fréchet proxy (Map2Image).

use std::fmt;

use crate::data::{make_context_batch, ContextBatch, Direction, TaskKind};
use crate::diffusion::{predict_x0, sample_from, SampleOutput};
use crate::error::{Error, Result};
use crate::metrics::{frechet_proxy, rmse, to_unit, MIN_SET_SIZE};
use crate::model::DenoiserModel;
use crate::rng::{streams, Rng};
use crate::schedule::{NoiseSchedule, StepPlan};
use crate::tensor::{Float, Tensor};

pub const RESULTS_CSV_HEADER: &str = "checkpoint,task,direction,metric,value,n,seed,plan_strategy,K";

/// A noise predictor conditioned on a context batch.
pub trait ConditionalDenoiser<F: Float> {
    fn predict_eps(&self, x_t: &Tensor<F>, t: usize, batch: &ContextBatch<F>) -> Result<Tensor<F>>;
}

impl<F: Float> ConditionalDenoiser<F> for DenoiserModel<F> {
    fn predict_eps(&self, x_t: &Tensor<F>, t: usize, batch: &ContextBatch<F>) -> Result<Tensor<F>> {
        self.predict(x_t, t, batch)
    }
}

/// Replaces the noise prediction by the one implied by the x0 estimate
/// clamped to `[-1, 1]`, keeping every reverse step inside the data range.
pub fn clip_eps<F: Float>(x_t: &Tensor<F>, eps_hat: &Tensor<F>, t: usize, s: &NoiseSchedule) -> Result<Tensor<F>> {
    let ab = s.alpha_bar_at(t)?;
    let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
    let x0 = predict_x0(x_t, eps_hat, t, s)?;
    x_t.zip_map(&x0, |x, x0| (x - a * x0.max(-F::one()).min(F::one())) / b)
}

/// Reverse-chain settings shared by sampling and evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerOptions {
    pub eta: f64,
    pub clip_x0: bool,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self { eta: 0.0, clip_x0: true }
    }
}

/// Runs the reverse chain for every query of `batch` from fresh noise.
/// Outputs are clamped to `[-1, 1]`; with `clip_x0` every intermediate x0
/// estimate is clamped as well.
pub fn sample_batch<F: Float, M: ConditionalDenoiser<F> + ?Sized>(
    model: &M,
    batch: &ContextBatch<F>,
    plan: &StepPlan,
    s: &NoiseSchedule,
    rng: &mut Rng,
    opts: SamplerOptions,
) -> Result<SampleOutput<F>> {
    let x_init = rng.normal_tensor::<F>(batch.query.shape());
    let eps = |x: &Tensor<F>, t: usize| {
        let e = model.predict_eps(x, t, batch)?;
        if opts.clip_x0 {
            clip_eps(x, &e, t, s)
        } else {
            Ok(e)
        }
    };
    let out = sample_from(&eps, plan, x_init, s, rng, opts.eta)?;
    Ok(SampleOutput { x: out.x.map(|v| v.max(-F::one()).min(F::one())), denoiser_calls: out.denoiser_calls })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metric {
    Rmse(f64),
    Fd(f64),
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Rmse(_) => "rmse",
            Metric::Fd(_) => "fd",
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Metric::Rmse(v) | Metric::Fd(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub checkpoint: String,
    pub task: TaskKind,
    pub n: usize,
    pub seed: u64,
    pub metric: Metric,
    pub plan_strategy: String,
    pub k: usize,
}

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.checkpoint,
            self.task.map,
            self.task.direction,
            self.metric.name(),
            self.metric.value(),
            self.n,
            self.seed,
            self.plan_strategy,
            self.k
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} = {:.6} (n={}, seed={}, plan={} K={})", self.task, self.metric.name(), self.metric.value(), self.n, self.seed, self.plan_strategy, self.k)
    }
}

#[derive(Clone, Debug)]
pub struct EvalSpec {
    pub task: TaskKind,
    pub n: usize,
    pub seed: u64,
    /// Items sampled together.
    pub batch_size: usize,
    pub feature_seed: u64,
    pub image_size: usize,
    pub sampler: SamplerOptions,
}

/// The held-out evaluation set for `(task, n, seed)`.
pub fn eval_batch<F: Float>(task: TaskKind, n: usize, seed: u64, size: usize) -> Result<ContextBatch<F>> {
    let data_seed = Rng::stream(seed, streams::EVAL_DATA).next_u64();
    make_context_batch(task, n, data_seed, size)
}

/// Samples every item of `batch` in chunks of `chunk`.
pub fn sample_all<F: Float, M: ConditionalDenoiser<F> + ?Sized>(
    model: &M,
    batch: &ContextBatch<F>,
    chunk: usize,
    plan: &StepPlan,
    s: &NoiseSchedule,
    rng: &mut Rng,
    opts: SamplerOptions,
) -> Result<SampleOutput<F>> {
    if chunk == 0 {
        return Err(Error::invalid("sampling batch size must be positive"));
    }
    let mut parts = Vec::new();
    let mut calls = 0;
    for start in (0..batch.len()).step_by(chunk) {
        let end = (start + chunk).min(batch.len());
        let items = (start..end).map(|i| batch.item(i)).collect::<Result<Vec<_>>>()?;
        let sub = ContextBatch::from_samples(&items)?;
        let out = sample_batch(model, &sub, plan, s, rng, opts)?;
        calls = out.denoiser_calls;
        parts.push(out.x);
    }
    Ok(SampleOutput { x: Tensor::concat_outer(&parts)?, denoiser_calls: calls })
}

/// Samples the held-out set and scores it against the ground truth.
pub fn evaluate<M: ConditionalDenoiser<f32> + ?Sized>(
    model: &M,
    checkpoint: &str,
    spec: &EvalSpec,
    plan: &StepPlan,
    s: &NoiseSchedule,
) -> Result<EvalReport> {
    if spec.n < MIN_SET_SIZE {
        return Err(Error::invalid(format!("evaluation needs n >= {MIN_SET_SIZE}, got {}", spec.n)));
    }
    let batch = eval_batch::<f32>(spec.task, spec.n, spec.seed, spec.image_size)?;
    let mut rng = Rng::stream(spec.seed, streams::SAMPLE);
    let out = sample_all(model, &batch, spec.batch_size, plan, s, &mut rng, spec.sampler)?;
    let metric = match spec.task.direction {
        Direction::Image2Map => Metric::Rmse(rmse(&to_unit(&out.x), &to_unit(&batch.target))?),
        Direction::Map2Image => Metric::Fd(frechet_proxy(&out.x, &batch.target, spec.feature_seed)?),
    };
    Ok(EvalReport {
        checkpoint: checkpoint.to_string(),
        task: spec.task,
        n: spec.n,
        seed: spec.seed,
        metric,
        plan_strategy: plan.strategy().to_string(),
        k: plan.k(),
    })
}
