//! Linear noise schedules and the K-step plans used for both training and
//! inference.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Discrete schedule over steps `1..=T`. Index 0 of every array is the
/// clean-data state (`alpha_bar[0] = 1`, `beta[0] = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let mut beta = vec![0.0; t_max + 1];
        for (i, b) in beta.iter_mut().enumerate().skip(1) {
            *b = if t_max == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (i - 1) as f64 / (t_max - 1) as f64
            };
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = cumulative_product(&alpha);
        let mut beta_tilde = vec![0.0; t_max + 1];
        if t_max >= 1 {
            beta_tilde[1] = beta[1];
        }
        for i in 2..=t_max {
            beta_tilde[i] = (1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i];
        }
        Ok(Self { t_max, beta_start, beta_end, beta, alpha, alpha_bar, beta_tilde })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.t_max {
            return Err(Error::invalid(format!("time step {t} outside [{lo}, {}]", self.t_max)));
        }
        Ok(())
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        self.check(t, 0)?;
        Ok(self.alpha_bar[t])
    }

    pub fn beta_at(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        Ok(self.beta[t])
    }

    pub fn alpha_at(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        Ok(self.alpha[t])
    }

    pub fn beta_tilde_at(&self, t: usize) -> Result<f64> {
        self.check(t, 1)?;
        Ok(self.beta_tilde[t])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Human-readable `key=value` lines for checkpoints and run records.
    pub fn to_kv(&self) -> String {
        format!(
            "schedule.t={}\nschedule.beta_start={}\nschedule.beta_end={}\n",
            self.t_max, self.beta_start, self.beta_end
        )
    }
}

fn cumulative_product(alpha: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(alpha.len());
    let mut acc = 1.0;
    out.push(acc);
    for a in &alpha[1..] {
        acc *= a;
        out.push(acc);
    }
    out
}

/// How plan steps are spread over `[1, T]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Uniform,
    /// `round(T * (j/K)^gamma)`; `gamma < 1` packs steps toward `T`.
    Power(f64),
    /// Steps whose `alpha_bar^2` is nearest to evenly spaced levels of the
    /// `alpha_bar^2` range.
    AlphaQuantile,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Uniform => write!(f, "uniform"),
            Strategy::Power(g) => write!(f, "power({g})"),
            Strategy::AlphaQuantile => write!(f, "alpha_quantile"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    /// Accepts `uniform`, `alpha_quantile`, `power(0.5)` and `power:0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "uniform" => return Ok(Strategy::Uniform),
            "alpha_quantile" => return Ok(Strategy::AlphaQuantile),
            _ => {}
        }
        let gamma = s
            .strip_prefix("power(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("power:"))
            .ok_or_else(|| Error::invalid(format!("unknown plan strategy '{s}'")))?;
        let g: f64 = gamma.trim().parse().map_err(|_| Error::invalid(format!("bad gamma in '{s}'")))?;
        Ok(Strategy::Power(g))
    }
}

/// Ordered subset of time steps. Always strictly increasing and ends at `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPlan {
    steps: Vec<usize>,
    strategy: Strategy,
}

impl StepPlan {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn k(&self) -> usize {
        self.steps.len()
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    /// Every step `1..=T`.
    pub fn full(t_max: usize) -> Self {
        Self { steps: (1..=t_max).collect(), strategy: Strategy::Uniform }
    }

    /// Rebuilds a stored plan; steps must be strictly increasing in
    /// `[1, t_max]` and end at `t_max`.
    pub fn from_steps(steps: Vec<usize>, strategy: Strategy, t_max: usize) -> Result<Self> {
        let increasing = steps.windows(2).all(|w| w[0] < w[1]);
        if steps.is_empty() || !increasing || steps[0] < 1 || *steps.last().unwrap() != t_max {
            return Err(Error::invalid(format!("invalid step plan for T={t_max}: {steps:?}")));
        }
        Ok(Self { steps, strategy })
    }

    pub fn to_kv(&self, prefix: &str) -> String {
        let steps: Vec<String> = self.steps.iter().map(|s| s.to_string()).collect();
        format!(
            "{prefix}.strategy={}\n{prefix}.k={}\n{prefix}.steps={}\n",
            self.strategy,
            self.k(),
            steps.join(",")
        )
    }
}

/// Picks `k` of the schedule's `T` steps according to `strategy`.
pub fn select_steps(s: &NoiseSchedule, k: usize, strategy: Strategy) -> Result<StepPlan> {
    let t = s.t_max();
    if k == 0 || k > t {
        return Err(Error::invalid(format!("plan size {k} outside [1, {t}]")));
    }
    if let Strategy::Power(g) = strategy {
        if g.is_nan() || g <= 0.0 {
            return Err(Error::invalid(format!("power exponent must be positive, got {g}")));
        }
    }
    if k == t {
        return Ok(StepPlan { steps: (1..=t).collect(), strategy });
    }
    let raw: Vec<usize> = match strategy {
        Strategy::Uniform => (1..=k).map(|j| round_step(j as f64 * t as f64 / k as f64)).collect(),
        Strategy::Power(g) => (1..=k).map(|j| round_step(t as f64 * (j as f64 / k as f64).powf(g))).collect(),
        Strategy::AlphaQuantile => alpha_quantile_steps(s, k),
    };
    let mut steps = dedupe(raw, t)?;
    if let Strategy::Power(g) = strategy {
        if g < 1.0 && k >= 3 && !gaps_non_increasing(&steps) {
            steps = power_steps_monotone(t, k, g)?;
        }
    }
    debug_assert_eq!(steps.len(), k);
    debug_assert_eq!(*steps.last().unwrap(), t);
    Ok(StepPlan { steps, strategy })
}

fn round_step(x: f64) -> usize {
    (x.round() as usize).max(1)
}

fn alpha_quantile_steps(s: &NoiseSchedule, k: usize) -> Vec<usize> {
    let t = s.t_max();
    let sq: Vec<f64> = s.alpha_bars().iter().map(|a| a * a).collect();
    let (hi, lo) = (sq[0], sq[t]);
    (1..=k)
        .map(|j| {
            let level = hi - (hi - lo) * j as f64 / k as f64;
            (1..=t)
                .min_by(|&a, &b| (sq[a] - level).abs().total_cmp(&(sq[b] - level).abs()))
                .expect("t >= 1")
        })
        .collect()
}

/// Sorts, forces the last entry to `T`, then removes collisions by bumping
/// repeats upward; if that overruns `T`, collisions are pushed downward from
/// the top instead.
fn dedupe(mut steps: Vec<usize>, t: usize) -> Result<Vec<usize>> {
    steps.sort_unstable();
    let k = steps.len();
    *steps.last_mut().expect("k >= 1") = t;
    for j in 1..k {
        if steps[j] <= steps[j - 1] {
            steps[j] = steps[j - 1] + 1;
        }
    }
    if steps[k - 1] > t {
        steps[k - 1] = t;
        for j in (0..k - 1).rev() {
            if steps[j] >= steps[j + 1] {
                steps[j] = steps[j + 1] - 1;
            }
        }
    }
    if steps[0] < 1 || steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!("cannot fit {k} distinct steps into [1, {t}]")));
    }
    Ok(steps)
}

fn gaps_non_increasing(steps: &[usize]) -> bool {
    let gaps: Vec<usize> = steps.windows(2).map(|w| w[1] - w[0]).collect();
    gaps.windows(2).all(|w| w[1] <= w[0])
}

/// Power-law plan built from floored gaps so that integer gaps are
/// non-increasing; the rounding remainder goes to the earliest (widest) gaps.
fn power_steps_monotone(t: usize, k: usize, g: f64) -> Result<Vec<usize>> {
    let pos = |j: usize| t as f64 * (j as f64 / k as f64).powf(g);
    let mut first = (pos(1).floor() as usize).max(1);
    let mut gaps: Vec<usize> = (2..=k).map(|j| (pos(j) - pos(j - 1)).floor() as usize).collect();
    if gaps.contains(&0) {
        return Err(Error::invalid(format!("power({g}) plan with {k} steps needs sub-step gaps over T={t}")));
    }
    let total: usize = gaps.iter().sum();
    let mut remainder = (t - first)
        .checked_sub(total)
        .ok_or_else(|| Error::invalid("power plan gaps overflow T"))?;
    for d in gaps.iter_mut() {
        if remainder == 0 {
            break;
        }
        *d += 1;
        remainder -= 1;
    }
    first += remainder;
    let mut steps = vec![first];
    for d in gaps {
        steps.push(steps.last().unwrap() + d);
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    /// Independent oracle: product of (1 - beta_j) evaluated in log space.
    fn alpha_bar_oracle(t_max: usize, lo: f64, hi: f64, t: usize) -> f64 {
        (1..=t)
            .map(|j| (1.0 - (lo + (hi - lo) * (j - 1) as f64 / (t_max - 1) as f64)).ln())
            .sum::<f64>()
            .exp()
    }

    #[test]
    fn alpha_bar_endpoints() {
        let s = default_schedule();
        assert_eq!(s.alpha_bar_at(0).unwrap(), 1.0);
        assert_eq!(s.alpha_bar_at(1).unwrap(), 1.0 - s.beta_at(1).unwrap());
        assert!((s.alpha_bar_at(1).unwrap() - 0.9999).abs() < 1e-15);
        let oracle = alpha_bar_oracle(1000, 1e-4, 0.02, 1000);
        assert!((oracle - 4.0358e-5).abs() < 1e-8, "{oracle}");
        let got = s.alpha_bar_at(1000).unwrap();
        assert!((got - oracle).abs() / oracle < 1e-10, "{got} vs {oracle}");
        assert!(s.alpha_bar_at(1001).is_err());
    }

    #[test]
    fn schedule_invariants() {
        let s = default_schedule();
        let ab = s.alpha_bars();
        assert!(ab.windows(2).all(|w| w[1] < w[0]));
        assert!(ab[1000] > 0.0);
        let b = s.betas();
        assert!(b[1..].windows(2).all(|w| w[1] >= w[0]));
        assert!(b[1..].iter().all(|&x| x > 0.0 && x < 1.0));
        assert_eq!(s.beta_tilde_at(1).unwrap(), s.beta_at(1).unwrap());
        for i in 2..=1000 {
            let expect = (1.0 - ab[i - 1]) / (1.0 - ab[i]) * b[i];
            assert_eq!(s.beta_tilde_at(i).unwrap(), expect);
        }
        // Second pass over the same betas agrees bit for bit.
        let again = cumulative_product(&b.iter().map(|x| 1.0 - x).collect::<Vec<_>>());
        assert!(again.iter().zip(ab).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn parameter_range_errors() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        let one = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert!((one.alpha_bar_at(1).unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn uniform_plan() {
        let p = select_steps(&default_schedule(), 10, Strategy::Uniform).unwrap();
        assert_eq!(p.steps(), &[100, 200, 300, 400, 500, 600, 700, 800, 900, 1000]);
    }

    #[test]
    fn power_half_plan() {
        // Oracle: round(1000 * (j/10)^0.5) evaluated directly.
        let expect: Vec<usize> = (1..=10).map(|j| (1000.0 * (j as f64 / 10.0).sqrt()).round() as usize).collect();
        assert_eq!(expect, vec![316, 447, 548, 632, 707, 775, 837, 894, 949, 1000]);
        let p = select_steps(&default_schedule(), 10, Strategy::Power(0.5)).unwrap();
        assert_eq!(p.steps(), expect.as_slice());
    }

    #[test]
    fn full_plan_for_every_strategy() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        for strat in [Strategy::Uniform, Strategy::Power(0.5), Strategy::AlphaQuantile] {
            let p = select_steps(&s, 50, strat).unwrap();
            assert_eq!(p.steps(), (1..=50).collect::<Vec<_>>().as_slice());
        }
    }

    #[test]
    fn plan_errors() {
        let s = default_schedule();
        assert!(select_steps(&s, 0, Strategy::Uniform).is_err());
        assert!(select_steps(&s, 1001, Strategy::Uniform).is_err());
        assert!(select_steps(&s, 10, Strategy::Power(0.0)).is_err());
        assert!(select_steps(&s, 10, Strategy::Power(-1.0)).is_err());
    }

    #[test]
    fn alpha_quantile_plan_shape() {
        let s = default_schedule();
        let p = select_steps(&s, 10, Strategy::AlphaQuantile).unwrap();
        assert_eq!(p.k(), 10);
        assert_eq!(*p.steps().last().unwrap(), 1000);
        assert!(p.steps().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn strategy_parse_roundtrip() {
        for s in [Strategy::Uniform, Strategy::Power(0.3), Strategy::AlphaQuantile] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!("power:0.7".parse::<Strategy>().unwrap(), Strategy::Power(0.7));
        assert!("cosine".parse::<Strategy>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::schedule::Strategy;

        proptest! {
            #[test]
            fn plans_are_valid(k in 1usize..=100, gamma in 0.2f64..3.0, which in 0u8..3) {
                let s = default_schedule();
                let strat = match which {
                    0 => Strategy::Uniform,
                    1 => Strategy::Power(gamma),
                    _ => Strategy::AlphaQuantile,
                };
                let p = select_steps(&s, k, strat).unwrap();
                prop_assert_eq!(p.k(), k);
                prop_assert_eq!(*p.steps().last().unwrap(), 1000);
                prop_assert!(p.steps()[0] >= 1);
                prop_assert!(p.steps().windows(2).all(|w| w[0] < w[1]));
            }

            #[test]
            fn sub_unit_power_gaps_shrink_toward_t(k in 3usize..=100, gamma in 0.25f64..0.99) {
                let p = select_steps(&default_schedule(), k, Strategy::Power(gamma)).unwrap();
                prop_assert!(gaps_non_increasing(p.steps()), "{:?}", p.steps());
            }
        }
    }
}
