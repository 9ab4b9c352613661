use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison over several inputs.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over every checked coordinate of
    /// `|analytic - central| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    /// The same maximum restricted to each input, in input order.
    pub per_input: Vec<f64>,
    pub coordinates_checked: usize,
}

fn eval<G>(f: &G, points: &[Tensor<f64>]) -> Result<f64>
where
    G: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
    }
    Ok(g.value(out).item())
}

/// Compares analytic gradients of a scalar function against central
/// differences with step `eps`.
pub fn grad_check<G>(f: G, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    G: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let wrapped = |g: &mut Graph<f64>, vs: &[Var]| f(g, vs[0]);
    Ok(grad_check_many(wrapped, std::slice::from_ref(point), eps, None)?.max_rel_error)
}

/// Multi-input gradient check. `coords`, when given, limits each input to
/// the listed flat coordinates; otherwise every coordinate is perturbed.
pub fn grad_check_many<G>(
    f: G,
    points: &[Tensor<f64>],
    eps: f64,
    coords: Option<&[Vec<usize>]>,
) -> Result<GradCheckReport>
where
    G: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let first = g.value(out).item();
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).expect("params carry gradients")).collect();
    drop(g);

    if eval(&f, points)?.to_bits() != first.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut per_input = Vec::with_capacity(points.len());
    let mut checked = 0;
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        let all: Vec<usize>;
        let idx: &[usize] = match coords {
            Some(c) => &c[k],
            None => {
                all = (0..points[k].len()).collect();
                &all
            }
        };
        let mut worst = 0.0f64;
        for &j in idx {
            let orig = points[k].data()[j];
            work[k].data_mut()[j] = orig + eps;
            let plus = eval(&f, &work)?;
            work[k].data_mut()[j] = orig - eps;
            let minus = eval(&f, &work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            checked += 1;
        }
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, per_input, coordinates_checked: checked })
}
