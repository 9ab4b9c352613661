//! Image-space feedback losses and the combined training objective.
//!
//! Both paths take the one-step estimate `x0'` at a small noise level and
//! compare condition maps: for Image2Map the predicted map against the map
//! extracted from the query, for Map2Image the map extracted from the
//! predicted image against the input map.

use crate::data::{annotate, annotate_graph, ContextBatch, Direction};
use crate::diffusion::{forward_sample_batch, predict_x0_graph, GraphDenoiser};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::{NoiseSchedule, StepPlan};
use crate::tensor::{Float, Graph, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackConfig {
    /// Weight of the feedback term.
    pub lambda: f64,
    /// Largest step at which the direct prediction is taken.
    pub t_prime: usize,
    pub enabled: bool,
    /// Cut the gradient through the annotator; Map2Image feedback then
    /// reports a value but contributes no gradient.
    pub stop_gradient: bool,
    /// Draw feedback steps from the plan steps in `[1, t_prime]` instead of
    /// every integer in that range.
    pub restrict_to_plan: bool,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self { lambda: 1.0, t_prime: 200, enabled: true, stop_gradient: false, restrict_to_plan: false }
    }
}

impl FeedbackConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::invalid(format!("feedback lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.t_prime < 1 || self.t_prime > s.t_max() {
            return Err(Error::invalid(format!("t_prime must lie in [1, {}], got {}", s.t_max(), self.t_prime)));
        }
        Ok(())
    }

    /// Whether the feedback term is computed at all. A zero weight counts as
    /// off, so the objective and its gradient equal the plain loss exactly.
    pub fn active(&self) -> bool {
        self.enabled && self.lambda != 0.0
    }
}

/// Draws a feedback step from `[1, t_prime]`, or from the plan steps in that
/// range when `restrict_to_plan` is set.
pub fn draw_feedback_step(cfg: &FeedbackConfig, plan: &StepPlan, rng: &mut Rng) -> Result<usize> {
    if cfg.restrict_to_plan {
        let allowed: Vec<usize> = plan.steps().iter().copied().filter(|&t| t >= 1 && t <= cfg.t_prime).collect();
        if allowed.is_empty() {
            return Err(Error::invalid(format!("no plan step lies in [1, {}]", cfg.t_prime)));
        }
        return Ok(*rng.choose(&allowed));
    }
    Ok(rng.int_inclusive(1, cfg.t_prime))
}

/// Noises the batch targets at fresh feedback steps and returns the clamped
/// one-step estimate `x0'` on `g`.
fn direct_prediction<F: Float, M: GraphDenoiser<F> + ?Sized>(
    g: &mut Graph<F>,
    model: &M,
    batch: &ContextBatch<F>,
    s: &NoiseSchedule,
    plan: &StepPlan,
    cfg: &FeedbackConfig,
    rng: &mut Rng,
) -> Result<Var> {
    cfg.validate(s)?;
    if batch.is_empty() {
        return Err(Error::invalid("feedback loss on an empty batch"));
    }
    let steps = (0..batch.len()).map(|_| draw_feedback_step(cfg, plan, rng)).collect::<Result<Vec<_>>>()?;
    let eps = rng.normal_tensor::<F>(batch.target.shape());
    let x_t = forward_sample_batch(&batch.target, &steps, &eps, s)?;
    let x_var = g.constant(x_t.clone());
    let eps_hat = model.eps_graph(g, x_var, &steps, batch)?;
    let x0 = predict_x0_graph(g, &x_t, eps_hat, &steps, s)?;
    g.clamp(x0, -F::one(), F::one())
}

fn expect_direction<F: Float>(batch: &ContextBatch<F>, want: Direction) -> Result<()> {
    if batch.task.direction != want {
        return Err(Error::invalid(format!(
            "{} feedback applied to a {} batch ({})",
            want.name(),
            batch.task.direction.name(),
            batch.task
        )));
    }
    Ok(())
}

/// `mse(annotate(query), x0')`: the predicted map against the map
/// extracted from the query image.
pub fn feedback_loss_image2map<F: Float, M: GraphDenoiser<F> + ?Sized>(
    g: &mut Graph<F>,
    model: &M,
    batch: &ContextBatch<F>,
    s: &NoiseSchedule,
    plan: &StepPlan,
    cfg: &FeedbackConfig,
    rng: &mut Rng,
) -> Result<Var> {
    expect_direction(batch, Direction::Image2Map)?;
    let x0 = direct_prediction(g, model, batch, s, plan, cfg, rng)?;
    let reference = g.constant(annotate(&batch.query, batch.task.map)?);
    g.mse(reference, x0)
}

/// `mse(query, annotate(x0'))`: the input map against the map extracted
/// from the predicted image, differentiating through the annotator.
pub fn feedback_loss_map2image<F: Float, M: GraphDenoiser<F> + ?Sized>(
    g: &mut Graph<F>,
    model: &M,
    batch: &ContextBatch<F>,
    s: &NoiseSchedule,
    plan: &StepPlan,
    cfg: &FeedbackConfig,
    rng: &mut Rng,
) -> Result<Var> {
    expect_direction(batch, Direction::Map2Image)?;
    let x0 = direct_prediction(g, model, batch, s, plan, cfg, rng)?;
    let mut extracted = annotate_graph(g, x0, batch.task.map)?;
    if cfg.stop_gradient {
        extracted = g.detach(extracted);
    }
    let query = g.constant(batch.query.clone());
    g.mse(query, extracted)
}

/// The feedback path matching the batch direction.
pub fn feedback_loss<F: Float, M: GraphDenoiser<F> + ?Sized>(
    g: &mut Graph<F>,
    model: &M,
    batch: &ContextBatch<F>,
    s: &NoiseSchedule,
    plan: &StepPlan,
    cfg: &FeedbackConfig,
    rng: &mut Rng,
) -> Result<Var> {
    match batch.task.direction {
        Direction::Image2Map => feedback_loss_image2map(g, model, batch, s, plan, cfg, rng),
        Direction::Map2Image => feedback_loss_map2image(g, model, batch, s, plan, cfg, rng),
    }
}

/// `l_train + lambda * l_feedback`, or `l_train` itself when feedback is
/// inactive or absent.
pub fn total_loss<F: Float>(g: &mut Graph<F>, l_train: Var, l_feedback: Option<Var>, cfg: &FeedbackConfig) -> Result<Var> {
    for v in std::iter::once(l_train).chain(l_feedback) {
        if g.value(v).len() != 1 {
            return Err(Error::NonScalarLoss(g.shape(v).to_vec()));
        }
    }
    match l_feedback {
        Some(fb) if cfg.active() => {
            let weighted = if cfg.lambda == 1.0 { fb } else { g.scale(fb, F::of(cfg.lambda))? };
            g.add(l_train, weighted)
        }
        _ => Ok(l_train),
    }
}
