//! Forward noising, the noise-prediction objective, and reverse steps.
//!
//! Everything runs in pixel space: the encoder/decoder pair of latent
//! diffusion is the identity here.

use crate::data::ContextBatch;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::{NoiseSchedule, StepPlan};
use crate::tensor::{Float, Graph, Tensor, Var};

/// A noise predictor evaluated outside any autodiff graph.
pub trait EpsModel<F: Float> {
    fn predict_eps(&self, x_t: &Tensor<F>, t: usize) -> Result<Tensor<F>>;
}

impl<F: Float, M> EpsModel<F> for M
where
    M: Fn(&Tensor<F>, usize) -> Result<Tensor<F>>,
{
    fn predict_eps(&self, x_t: &Tensor<F>, t: usize) -> Result<Tensor<F>> {
        self(x_t, t)
    }
}

/// A conditional noise predictor recorded on an autodiff graph. `steps`
/// holds one time step per batch item.
pub trait GraphDenoiser<F: Float> {
    fn eps_graph(&self, g: &mut Graph<F>, x_t: Var, steps: &[usize], batch: &ContextBatch<F>) -> Result<Var>;
}

/// How training draws a time step from the plan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TimestepWeighting {
    /// Every plan step equally likely.
    #[default]
    Uniform,
    /// Probability proportional to the noise variance `1 - alpha_bar_t`.
    NoiseLevel,
}

fn sqrt_coeffs(s: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    let ab = s.alpha_bar_at(t)?;
    Ok((ab.sqrt(), (1.0 - ab).sqrt()))
}

fn ensure_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape { op, detail: format!("{a:?} vs {b:?}") });
    }
    Ok(())
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_sample<F: Float>(x0: &Tensor<F>, t: usize, eps: &Tensor<F>, s: &NoiseSchedule) -> Result<Tensor<F>> {
    ensure_same("forward_sample", x0.shape(), eps.shape())?;
    let (a, b) = sqrt_coeffs(s, t)?;
    let (a, b) = (F::of(a), F::of(b));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Per-item forward noising of a batch `[N, ...]` with one step per item.
pub fn forward_sample_batch<F: Float>(
    x0: &Tensor<F>,
    steps: &[usize],
    eps: &Tensor<F>,
    s: &NoiseSchedule,
) -> Result<Tensor<F>> {
    ensure_same("forward_sample_batch", x0.shape(), eps.shape())?;
    let n = x0.shape()[0];
    if steps.len() != n {
        return Err(Error::shape("forward_sample_batch", format!("{} steps for {n} items", steps.len())));
    }
    let per = x0.len() / n;
    let mut out = Vec::with_capacity(x0.len());
    for (i, &t) in steps.iter().enumerate() {
        let (a, b) = sqrt_coeffs(s, t)?;
        let (a, b) = (F::of(a), F::of(b));
        let xs = &x0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(xs.iter().zip(es).map(|(&x, &e)| a * x + b * e));
    }
    Tensor::from_vec(x0.shape(), out)
}

/// Draws a step from `plan` under `weighting`.
pub fn draw_plan_step(plan: &StepPlan, s: &NoiseSchedule, weighting: TimestepWeighting, rng: &mut Rng) -> usize {
    let steps = plan.steps();
    match weighting {
        TimestepWeighting::Uniform => *rng.choose(steps),
        TimestepWeighting::NoiseLevel => {
            let w: Vec<f64> = steps.iter().map(|&t| 1.0 - s.alpha_bars()[t]).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.uniform() * total;
            for (&t, wi) in steps.iter().zip(&w) {
                if u < *wi {
                    return t;
                }
                u -= wi;
            }
            *steps.last().expect("plans are nonempty")
        }
    }
}

/// Noise-prediction objective restricted to plan steps: per item draw `t`
/// from the plan and `eps ~ N(0, I)`, noise the target, and return the mean
/// squared error between `eps` and the model's prediction.
pub fn training_loss<F: Float, M: GraphDenoiser<F> + ?Sized>(
    g: &mut Graph<F>,
    model: &M,
    batch: &ContextBatch<F>,
    s: &NoiseSchedule,
    plan: &StepPlan,
    weighting: TimestepWeighting,
    rng: &mut Rng,
) -> Result<Var> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::invalid("training_loss on an empty batch"));
    }
    let steps: Vec<usize> = (0..n).map(|_| draw_plan_step(plan, s, weighting, rng)).collect();
    let eps = rng.normal_tensor::<F>(batch.target.shape());
    let x_t = forward_sample_batch(&batch.target, &steps, &eps, s)?;
    let x_var = g.constant(x_t);
    let eps_var = g.constant(eps);
    let eps_hat = model.eps_graph(g, x_var, &steps, batch)?;
    if g.shape(eps_hat) != g.shape(eps_var) {
        return Err(Error::shape(
            "training_loss",
            format!("model output {:?} vs noise {:?}", g.shape(eps_hat), g.shape(eps_var)),
        ));
    }
    g.mse(eps_var, eps_hat)
}

/// Deterministic (`eta = 0`) or partially stochastic DDIM jump from
/// `t_from` to `t_to < t_from`. Landing on `t_to = 0` returns the x0 estimate.
pub fn ddim_step<F: Float>(
    x_t: &Tensor<F>,
    eps_hat: &Tensor<F>,
    t_from: usize,
    t_to: usize,
    s: &NoiseSchedule,
    eta: f64,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    ensure_same("ddim_step", x_t.shape(), eps_hat.shape())?;
    if t_to >= t_from {
        return Err(Error::invalid(format!("ddim_step must move to an earlier step: {t_from} -> {t_to}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta must lie in [0, 1], got {eta}")));
    }
    let ab_from = s.alpha_bar_at(t_from)?;
    let ab_to = s.alpha_bar_at(t_to)?;
    if ab_from >= ab_to {
        return Err(Error::invalid(format!(
            "schedule order violated: alpha_bar[{t_from}]={ab_from} >= alpha_bar[{t_to}]={ab_to}"
        )));
    }
    let inv = 1.0 / ab_from.sqrt();
    let c_eps = (1.0 - ab_from).sqrt();
    let (inv_f, c_eps_f) = (F::of(inv), F::of(c_eps));
    let x0 = x_t.zip_map(eps_hat, |x, e| (x - c_eps_f * e) * inv_f)?;
    if t_to == 0 {
        return finite("ddim_step", x0);
    }
    let sigma = eta * ((1.0 - ab_to) / (1.0 - ab_from)).sqrt() * (1.0 - ab_from / ab_to).sqrt();
    let dir = (1.0 - ab_to - sigma * sigma).max(0.0).sqrt();
    let (a, d) = (F::of(ab_to.sqrt()), F::of(dir));
    let mut out = x0.zip_map(eps_hat, |x, e| a * x + d * e)?;
    if sigma > 0.0 {
        let sg = F::of(sigma);
        for v in out.data_mut() {
            *v = *v + sg * F::of(rng.normal());
        }
    }
    finite("ddim_step", out)
}

fn finite<F: Float>(op: &'static str, t: Tensor<F>) -> Result<Tensor<F>> {
    if !t.is_finite() {
        return Err(Error::NonFinite(op));
    }
    Ok(t)
}

/// Result of a reverse-chain run.
#[derive(Clone, Debug)]
pub struct SampleOutput<F: Float> {
    pub x: Tensor<F>,
    pub denoiser_calls: usize,
}

/// Runs the reverse chain from standard normal noise of `shape`.
pub fn sample<F: Float, M: EpsModel<F> + ?Sized>(
    model: &M,
    plan: &StepPlan,
    shape: &[usize],
    s: &NoiseSchedule,
    rng: &mut Rng,
    eta: f64,
) -> Result<SampleOutput<F>> {
    let x_init = rng.normal_tensor::<F>(shape);
    sample_from(model, plan, x_init, s, rng, eta)
}

/// Runs the reverse chain from a given terminal state: one denoiser call
/// per plan step, visiting the plan from `T` downward and finishing at 0.
pub fn sample_from<F: Float, M: EpsModel<F> + ?Sized>(
    model: &M,
    plan: &StepPlan,
    x_init: Tensor<F>,
    s: &NoiseSchedule,
    rng: &mut Rng,
    eta: f64,
) -> Result<SampleOutput<F>> {
    let steps = plan.steps();
    if steps.is_empty() {
        return Err(Error::invalid("empty plan"));
    }
    let mut x = x_init;
    let mut calls = 0;
    for i in (0..steps.len()).rev() {
        let t = steps[i];
        let t_next = if i == 0 { 0 } else { steps[i - 1] };
        let eps = model.predict_eps(&x, t)?;
        calls += 1;
        x = ddim_step(&x, &eps, t, t_next, s, eta, rng)?;
    }
    Ok(SampleOutput { x, denoiser_calls: calls })
}

/// One-shot x0 estimate `(x_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)`.
pub fn predict_x0<F: Float>(x_t: &Tensor<F>, eps_hat: &Tensor<F>, t: usize, s: &NoiseSchedule) -> Result<Tensor<F>> {
    ensure_same("predict_x0", x_t.shape(), eps_hat.shape())?;
    if t == 0 {
        return Err(Error::invalid("predict_x0 needs t >= 1"));
    }
    let ab = s.alpha_bar_at(t)?;
    if ab <= 0.0 {
        return Err(Error::invalid(format!("alpha_bar[{t}] is zero")));
    }
    let (inv, c) = (F::of(1.0 / ab.sqrt()), F::of((1.0 - ab).sqrt()));
    finite("predict_x0", x_t.zip_map(eps_hat, |x, e| (x - c * e) * inv)?)
}

/// Differentiable x0 estimate for a batch with one step per item. `x_t` is
/// data (no gradient); gradients flow through `eps_hat`.
pub fn predict_x0_graph<F: Float>(
    g: &mut Graph<F>,
    x_t: &Tensor<F>,
    eps_hat: Var,
    steps: &[usize],
    s: &NoiseSchedule,
) -> Result<Var> {
    ensure_same("predict_x0_graph", x_t.shape(), g.shape(eps_hat))?;
    let n = x_t.shape()[0];
    if steps.len() != n {
        return Err(Error::shape("predict_x0_graph", format!("{} steps for {n} items", steps.len())));
    }
    let per = x_t.len() / n;
    let mut scaled_x = Vec::with_capacity(x_t.len());
    let mut eps_coeff = Vec::with_capacity(x_t.len());
    for (i, &t) in steps.iter().enumerate() {
        if t == 0 {
            return Err(Error::invalid("predict_x0 needs t >= 1"));
        }
        let ab = s.alpha_bar_at(t)?;
        let inv = 1.0 / ab.sqrt();
        let c = -(1.0 - ab).sqrt() * inv;
        scaled_x.extend(x_t.data()[i * per..(i + 1) * per].iter().map(|&x| x * F::of(inv)));
        eps_coeff.extend(std::iter::repeat_n(F::of(c), per));
    }
    let xs = g.constant(Tensor::from_vec(x_t.shape(), scaled_x)?);
    let cs = g.constant(Tensor::from_vec(x_t.shape(), eps_coeff)?);
    let scaled_eps = g.mul(eps_hat, cs)?;
    g.add(xs, scaled_eps)
}

/// Ancestral reverse step `mu_theta + sqrt(beta_tilde_t) * z` with
/// `mu_theta = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)`;
/// no noise is added at `t = 1`.
pub fn ancestral_step<F: Float>(
    x_t: &Tensor<F>,
    eps_hat: &Tensor<F>,
    t: usize,
    s: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    ensure_same("ancestral_step", x_t.shape(), eps_hat.shape())?;
    let (alpha, beta, ab) = (s.alpha_at(t)?, s.beta_at(t)?, s.alpha_bar_at(t)?);
    let mut mu = x_t.zip_map(eps_hat, |x, e| ancestral_mean(x, e, alpha, beta, ab))?;
    if t > 1 {
        let sd = F::of(s.beta_tilde_at(t)?.sqrt());
        for v in mu.data_mut() {
            *v = *v + sd * F::of(rng.normal());
        }
    }
    finite("ancestral_step", mu)
}

/// Reverse-step mean for one coordinate.
pub fn ancestral_mean<F: Float>(x_t: F, eps_hat: F, alpha: f64, beta: f64, alpha_bar: f64) -> F {
    let c = F::of(beta / (1.0 - alpha_bar).sqrt());
    (x_t - c * eps_hat) * F::of(1.0 / alpha.sqrt())
}

/// Full ancestral chain `T, T-1, ..., 1` from standard normal noise.
pub fn sample_ancestral<F: Float, M: EpsModel<F> + ?Sized>(
    model: &M,
    shape: &[usize],
    s: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<SampleOutput<F>> {
    let mut x = rng.normal_tensor::<F>(shape);
    let mut calls = 0;
    for t in (1..=s.t_max()).rev() {
        let eps = model.predict_eps(&x, t)?;
        calls += 1;
        x = ancestral_step(&x, &eps, t, s, rng)?;
    }
    Ok(SampleOutput { x, denoiser_calls: calls })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{select_steps, Strategy};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    /// Two-step schedule whose alpha_bar values are chosen by hand:
    /// beta_1 = 0.75 gives alpha_bar_1 = 0.25.
    fn quarter_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1, 0.75, 0.75).unwrap()
    }

    fn s1(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn forward_sample_examples() {
        let s = sched();
        let x0 = Tensor::from_vec(&[3], vec![0.3, -0.5, 0.9]).unwrap();
        let eps = Tensor::from_vec(&[3], vec![1.0, 2.0, -1.0]).unwrap();
        assert_eq!(forward_sample(&x0, 0, &eps, &s).unwrap(), x0);
        let q = quarter_schedule();
        let v = forward_sample(&s1(1.0), 1, &s1(0.5), &q).unwrap().item();
        assert!((v - (0.5 + 0.75f64.sqrt() * 0.5)).abs() < 1e-12);
        assert!((v - 0.93301).abs() < 1e-5);
        let zero = Tensor::zeros(&[3]);
        let att = forward_sample(&x0, 500, &zero, &s).unwrap();
        let a = s.alpha_bar_at(500).unwrap().sqrt();
        for (o, x) in att.data().iter().zip(x0.data()) {
            assert!((o - a * x).abs() < 1e-15);
        }
        assert!(forward_sample(&x0, 1001, &eps, &s).is_err());
        assert!(forward_sample(&x0, 1, &Tensor::zeros(&[2]), &s).is_err());
    }

    #[test]
    fn predict_x0_examples() {
        let q = quarter_schedule();
        let v = predict_x0(&s1(0.5 + 0.75f64.sqrt() * 0.5), &s1(0.5), 1, &q).unwrap().item();
        assert!((v - 1.0).abs() < 1e-12);
        let v = predict_x0(&s1(0.93301), &s1(0.5), 1, &q).unwrap().item();
        assert!((v - 1.0).abs() < 1e-4);
        let v = predict_x0(&s1(0.8), &s1(0.0), 1, &q).unwrap().item();
        assert!((v - 1.6).abs() < 1e-12);
        assert!(predict_x0(&s1(0.8), &s1(0.0), 0, &q).is_err());
    }

    #[test]
    fn predict_x0_inverts_forward_sample_on_every_plan_step() {
        let s = sched();
        let mut rng = Rng::new(3);
        let x0: Tensor<f64> = rng.normal_tensor(&[64]);
        let eps: Tensor<f64> = rng.normal_tensor(&[64]);
        for strat in [Strategy::Uniform, Strategy::Power(0.5), Strategy::AlphaQuantile] {
            let plan = select_steps(&s, 10, strat).unwrap();
            for &t in plan.steps() {
                let xt = forward_sample(&x0, t, &eps, &s).unwrap();
                let back = predict_x0(&xt, &eps, t, &s).unwrap();
                for (b, x) in back.data().iter().zip(x0.data()) {
                    assert!((b - x).abs() <= 1e-5 * x.abs().max(1.0), "t={t}: {b} vs {x}");
                }
            }
        }
    }

    #[test]
    fn ddim_scalar_hand_example() {
        // alpha_bar_from = 0.04 and alpha_bar_to = 0.25 via a custom schedule:
        // beta_1 = 0.75 (alpha_bar_1 = 0.25), beta_2 = 0.84 (alpha_bar_2 = 0.04).
        let s = NoiseSchedule::linear(2, 0.75, 0.84).unwrap();
        assert!((s.alpha_bar_at(2).unwrap() - 0.04).abs() < 1e-12);
        let mut rng = Rng::new(0);
        let out = ddim_step(&s1(0.9), &s1(0.5), 2, 1, &s, 0.0, &mut rng).unwrap().item();
        let x0 = (0.9 - 0.96f64.sqrt() * 0.5) / 0.2;
        assert!((x0 - 2.0505).abs() < 1e-4);
        let expect = 0.5 * x0 + 0.75f64.sqrt() * 0.5;
        assert!((out - expect).abs() < 1e-12);
        assert!((out - 1.4583).abs() < 1e-4);
        let to_zero = ddim_step(&s1(0.9), &s1(0.5), 2, 0, &s, 0.0, &mut rng).unwrap().item();
        assert!((to_zero - x0).abs() < 1e-12);
    }

    #[test]
    fn ddim_exact_inversion_and_composition() {
        let s = sched();
        let mut rng = Rng::new(11);
        let x0: Tensor<f64> = rng.normal_tensor(&[32]);
        let eps: Tensor<f64> = rng.normal_tensor(&[32]);
        let xt = forward_sample(&x0, 900, &eps, &s).unwrap();
        for t_to in [0usize, 1, 400, 899] {
            let out = ddim_step(&xt, &eps, 900, t_to, &s, 0.0, &mut rng).unwrap();
            let expect = forward_sample(&x0, t_to, &eps, &s).unwrap();
            assert!(out.max_abs_diff(&expect) < 1e-9, "t_to={t_to}");
        }
        // Two hops with a perfect oracle equal one direct hop.
        let mid = ddim_step(&xt, &eps, 900, 500, &s, 0.0, &mut rng).unwrap();
        let two = ddim_step(&mid, &eps, 500, 100, &s, 0.0, &mut rng).unwrap();
        let one = ddim_step(&xt, &eps, 900, 100, &s, 0.0, &mut rng).unwrap();
        assert!(two.max_abs_diff(&one) < 1e-5);
    }

    #[test]
    fn ddim_errors() {
        let s = sched();
        let mut rng = Rng::new(0);
        let x = s1(0.1);
        assert!(ddim_step(&x, &x, 10, 10, &s, 0.0, &mut rng).is_err());
        assert!(ddim_step(&x, &x, 10, 20, &s, 0.0, &mut rng).is_err());
        assert!(ddim_step(&x, &x, 10, 5, &s, 1.5, &mut rng).is_err());
    }

    #[test]
    fn ddim_eta_one_matches_posterior_variance() {
        // With eta = 1 and adjacent steps the injected variance equals beta_tilde.
        let s = sched();
        let mut rng = Rng::new(5);
        let x = Tensor::<f64>::zeros(&[20_000]);
        let out = ddim_step(&x, &x, 600, 599, &s, 1.0, &mut rng).unwrap();
        let var = out.data().iter().map(|v| v * v).sum::<f64>() / out.len() as f64;
        let bt = s.beta_tilde_at(600).unwrap();
        assert!((var / bt - 1.0).abs() < 0.05, "{var} vs {bt}");
    }

    #[test]
    fn ancestral_examples() {
        let s = sched();
        let mut rng = Rng::new(0);
        let x = s1(0.7);
        let mu = ancestral_step(&x, &s1(0.3), 1, &s, &mut rng).unwrap().item();
        let (b, a, ab) = (s.beta_at(1).unwrap(), s.alpha_at(1).unwrap(), s.alpha_bar_at(1).unwrap());
        assert_eq!(mu, (0.7 - b / (1.0 - ab).sqrt() * 0.3) / a.sqrt());
        let hand: f64 = ancestral_mean(1.0, 0.2, 0.99, 0.01, 0.5);
        assert!((hand - 1.0021951390).abs() < 1e-9);
        assert!((hand - 1.00217).abs() < 5e-5);
        assert_eq!(ancestral_mean(0.8, 0.0, 0.99, 0.01, 0.5), 0.8 / 0.99f64.sqrt());
        assert!(ancestral_step(&x, &x, 0, &s, &mut rng).is_err());
        assert!(ancestral_step(&x, &x, 1001, &s, &mut rng).is_err());
    }

    #[test]
    fn sample_counts_calls_and_fixed_point() {
        let s = sched();
        let plan = select_steps(&s, 10, Strategy::Power(0.5)).unwrap();
        let calls = std::cell::Cell::new(0usize);
        let zero_model = |x: &Tensor<f64>, _t: usize| {
            calls.set(calls.get() + 1);
            Ok(Tensor::zeros(x.shape()))
        };
        let mut rng = Rng::new(1);
        let out = sample_from(&zero_model, &plan, Tensor::zeros(&[4]), &s, &mut rng, 0.0).unwrap();
        assert_eq!(out.denoiser_calls, 10);
        assert_eq!(calls.get(), 10);
        assert!(out.x.data().iter().all(|&v| v == 0.0));
    }
}
