//! Gaussian targets with an exact noise predictor.
//!
//! For data `x0 ~ N(mu0, sigma0^2)` per coordinate the optimal predictor
//! `E[eps | x_t]` is affine in `x_t`, so samplers and step plans can be
//! scored against the known target without training anything.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::diffusion::{sample_from, EpsModel};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::{NoiseSchedule, StepPlan};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSpec {
    pub mu0: f64,
    pub sigma0: f64,
    pub dim: usize,
}

impl GaussianSpec {
    pub fn new(mu0: f64, sigma0: f64, dim: usize) -> Result<Self> {
        if !(sigma0 > 0.0 && sigma0.is_finite()) || !mu0.is_finite() {
            return Err(Error::invalid(format!("need finite mu0 and sigma0 > 0, got {mu0}, {sigma0}")));
        }
        if dim == 0 {
            return Err(Error::invalid("dim must be positive"));
        }
        Ok(Self { mu0, sigma0, dim })
    }

    pub fn standard() -> Self {
        Self { mu0: 0.0, sigma0: 1.0, dim: 1 }
    }
}

/// `sqrt(1 - ab) * (x_t - sqrt(ab) * mu0) / (ab * sigma0^2 + 1 - ab)`.
pub fn analytic_eps(x_t: &Tensor<f64>, t: usize, g: &GaussianSpec, s: &NoiseSchedule) -> Result<Tensor<f64>> {
    if t == 0 {
        return Err(Error::invalid("analytic_eps needs t >= 1"));
    }
    let ab = s.alpha_bar_at(t)?;
    let (c, m) = ((1.0 - ab).sqrt(), ab.sqrt() * g.mu0);
    let denom = ab * g.sigma0 * g.sigma0 + 1.0 - ab;
    Ok(x_t.map(|x| c * (x - m) / denom))
}

/// Closed-form posterior mean `E[x0 | x_t]`.
pub fn posterior_mean_x0(x_t: &Tensor<f64>, t: usize, g: &GaussianSpec, s: &NoiseSchedule) -> Result<Tensor<f64>> {
    let ab = s.alpha_bar_at(t)?;
    let var0 = g.sigma0 * g.sigma0;
    let denom = ab * var0 + 1.0 - ab;
    Ok(x_t.map(|x| g.mu0 + var0 * ab.sqrt() * (x - ab.sqrt() * g.mu0) / denom))
}

/// Mean absolute difference between the sorted samples and the target
/// quantiles at `(i - 0.5) / n`.
pub fn wasserstein_1d(samples: &[f64], g: &GaussianSpec) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("wasserstein_1d of no samples"));
    }
    let normal = Normal::new(g.mu0, g.sigma0).map_err(|e| Error::invalid(e.to_string()))?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let total: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (x - normal.inverse_cdf((i as f64 + 0.5) / n)).abs())
        .sum();
    Ok(total / n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SandboxReport {
    pub strategy: String,
    pub k: usize,
    pub eta: f64,
    pub n: usize,
    pub seed: u64,
    /// Per-coordinate statistics.
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    pub w1: Vec<f64>,
    pub denoiser_calls: usize,
}

impl SandboxReport {
    pub const CSV_HEADER: &'static str = "strategy,K,eta,n,mean,var,w1,denoiser_calls,seed";

    fn avg(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn mean(&self) -> f64 {
        Self::avg(&self.means)
    }

    pub fn var(&self) -> f64 {
        Self::avg(&self.vars)
    }

    /// W1 averaged over coordinates.
    pub fn w1(&self) -> f64 {
        Self::avg(&self.w1)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6e},{:.6e},{:.6e},{},{}",
            self.strategy,
            self.k,
            self.eta,
            self.n,
            self.mean(),
            self.var(),
            self.w1(),
            self.denoiser_calls,
            self.seed
        )
    }
}

/// Samples `n` points with the exact predictor and scores them against the
/// target. `denoiser_calls` counts calls for one chain over the whole batch.
pub fn run_sandbox(
    plan: &StepPlan,
    g: &GaussianSpec,
    s: &NoiseSchedule,
    n: usize,
    seed: u64,
    eta: f64,
) -> Result<SandboxReport> {
    if n < 1000 {
        return Err(Error::invalid(format!("run_sandbox needs n >= 1000, got {n}")));
    }
    let mut rng = Rng::new(seed);
    let x_init: Tensor<f64> = rng.normal_tensor(&[n, g.dim]);
    let model = |x: &Tensor<f64>, t: usize| analytic_eps(x, t, g, s);
    let out = sample_from(&model, plan, x_init, s, &mut rng, eta)?;
    if !out.x.is_finite() {
        return Err(Error::NonFinite("run_sandbox"));
    }
    let data = out.x.data();
    let mut means = Vec::with_capacity(g.dim);
    let mut vars = Vec::with_capacity(g.dim);
    let mut w1 = Vec::with_capacity(g.dim);
    for d in 0..g.dim {
        let col: Vec<f64> = data.iter().skip(d).step_by(g.dim).copied().collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        means.push(mean);
        vars.push(var);
        w1.push(wasserstein_1d(&col, g)?);
    }
    Ok(SandboxReport {
        strategy: plan.strategy().to_string(),
        k: plan.k(),
        eta,
        n,
        seed,
        means,
        vars,
        w1,
        denoiser_calls: out.denoiser_calls,
    })
}

/// Convenience wrapper exposing the exact predictor through [`EpsModel`].
pub struct AnalyticDenoiser<'a> {
    pub spec: GaussianSpec,
    pub schedule: &'a NoiseSchedule,
}

impl EpsModel<f64> for AnalyticDenoiser<'_> {
    fn predict_eps(&self, x_t: &Tensor<f64>, t: usize) -> Result<Tensor<f64>> {
        analytic_eps(x_t, t, &self.spec, self.schedule)
    }
}
