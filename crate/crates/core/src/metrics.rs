//! RMSE on condition maps and a random-projection Fréchet distance.
//!
//! Both metrics work in `[0, 1]`; images and maps in `[-1, 1]` go through
//! [`to_unit`] first.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::tensor::{Float, Tensor};

pub const FEATURE_HIDDEN: usize = 128;
pub const FEATURE_DIM: usize = 64;
/// Smallest set size accepted by [`frechet_proxy`].
pub const MIN_SET_SIZE: usize = 50;

/// Affine rescale from `[-1, 1]` to `[0, 1]`.
pub fn to_unit<F: Float>(x: &Tensor<F>) -> Tensor<F> {
    let half = F::of(0.5);
    x.map(|v| (v + F::one()) * half)
}

/// `sqrt(mean((pred - gt)^2))`, accumulated in f64.
pub fn rmse<F: Float>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape { op: "rmse", detail: format!("{:?} vs {:?}", pred.shape(), gt.shape()) });
    }
    let sq: f64 = pred.data().iter().zip(gt.data()).map(|(&a, &b)| (a.f64() - b.f64()).powi(2)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Frozen two-layer random projection `flatten -> 128 -> SiLU -> 64`.
/// Weights depend only on the seed and the input size.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    w1: DMatrix<f64>,
    w2: DMatrix<f64>,
}

impl FeatureExtractor {
    pub fn new(seed: u64, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("feature extractor needs a positive input size"));
        }
        let mut rng = Rng::stream(seed, streams::FEATURES);
        let s1 = (input_dim as f64).sqrt().recip();
        let w1 = DMatrix::from_fn(FEATURE_HIDDEN, input_dim, |_, _| rng.normal() * s1);
        let s2 = (FEATURE_HIDDEN as f64).sqrt().recip();
        let w2 = DMatrix::from_fn(FEATURE_DIM, FEATURE_HIDDEN, |_, _| rng.normal() * s2);
        Ok(Self { w1, w2 })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    /// One feature row per item of `images [N, ...]`, values taken as given.
    pub fn features<F: Float>(&self, images: &Tensor<F>) -> Result<DMatrix<f64>> {
        let n = images.shape()[0];
        let d = images.len() / n;
        if d != self.input_dim() {
            return Err(Error::Shape {
                op: "frechet_features",
                detail: format!("items of {d} values, extractor expects {}", self.input_dim()),
            });
        }
        // [d, n] with one item per column.
        let x = DMatrix::from_iterator(d, n, images.data().iter().map(|v| v.f64()));
        let h = (&self.w1 * x).map(|v| v / (1.0 + (-v).exp()));
        Ok((&self.w2 * h).transpose())
    }
}

fn mean_and_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Square root of a symmetric positive semidefinite matrix. Eigenvalues
/// below zero by more than rounding are an error.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -1e-9 * scale {
            return Err(Error::Numeric(format!("matrix is not positive semidefinite (eigenvalue {v:e})")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))` between Gaussian
/// fits of two feature sets, one row per sample.
pub fn frechet_from_features(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape { op: "frechet_distance", detail: format!("{} vs {} features", a.ncols(), b.ncols()) });
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::invalid("frechet distance needs at least two samples per set"));
    }
    let (mu_a, cov_a) = mean_and_cov(a);
    let (mu_b, cov_b) = mean_and_cov(b);
    // tr (S_a S_b)^(1/2) = tr (S_a^(1/2) S_b S_a^(1/2))^(1/2), whose argument is symmetric.
    let root_a = psd_sqrt(&cov_a)?;
    let inner = &root_a * &cov_b * &root_a;
    let cross = psd_sqrt(&inner)?.trace();
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::Numeric("non-finite Fréchet distance".into()));
    }
    Ok(d.max(0.0))
}

/// Fréchet distance between two image sets `[n, 3, H, W]` in `[-1, 1]`
/// under the seed-pinned random feature extractor.
pub fn frechet_proxy<F: Float>(set_a: &Tensor<F>, set_b: &Tensor<F>, feature_seed: u64) -> Result<f64> {
    if set_a.shape()[1..] != set_b.shape()[1..] {
        return Err(Error::Shape { op: "frechet_proxy", detail: format!("{:?} vs {:?}", set_a.shape(), set_b.shape()) });
    }
    let (n, m) = (set_a.shape()[0], set_b.shape()[0]);
    if n < MIN_SET_SIZE || m < MIN_SET_SIZE {
        return Err(Error::invalid(format!("frechet_proxy needs at least {MIN_SET_SIZE} images per set, got {n} and {m}")));
    }
    let fx = FeatureExtractor::new(feature_seed, set_a.len() / n)?;
    frechet_from_features(&fx.features(&to_unit(set_a))?, &fx.features(&to_unit(set_b))?)
}
