//! Prior descriptors and sampling.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ThetaVector;
use crate::rng;

/// Lower bound of every variance prior.
pub const VARIANCE_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum PriorComponent {
    /// Scalar uniform on `[a, b]`; `variance` marks a strictly positive parameter.
    Uniform {
        a: f64,
        b: f64,
        #[serde(default)]
        variance: bool,
    },
    /// Joint Gaussian block; the covariance is stored row-major.
    Gaussian {
        mean: Vec<f64>,
        covariance: Vec<Vec<f64>>,
    },
}

impl PriorComponent {
    fn dim(&self) -> usize {
        match self {
            PriorComponent::Uniform { .. } => 1,
            PriorComponent::Gaussian { mean, .. } => mean.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub components: Vec<PriorComponent>,
}

impl PriorSpec {
    pub fn new(components: Vec<PriorComponent>) -> Result<Self> {
        let spec = Self { components };
        spec.validate()?;
        Ok(spec)
    }

    pub fn uniform(bounds: &[(f64, f64)], variance: &[bool]) -> Result<Self> {
        if bounds.len() != variance.len() {
            return Err(Error::InvalidPrior(
                "bounds and variance flags differ in length".into(),
            ));
        }
        Self::new(
            bounds
                .iter()
                .zip(variance)
                .map(|(&(a, b), &v)| PriorComponent::Uniform { a, b, variance: v })
                .collect(),
        )
    }

    pub fn gaussian(mean: Vec<f64>, covariance: &DMatrix<f64>) -> Result<Self> {
        let rows = (0..covariance.nrows())
            .map(|i| covariance.row(i).iter().copied().collect())
            .collect();
        Self::new(vec![PriorComponent::Gaussian {
            mean,
            covariance: rows,
        }])
    }

    /// `th7 ~ U[0.1, 1.5]`, `th8 ~ U[eps, 1]`.
    pub fn m1() -> Self {
        Self::uniform(&[(0.1, 1.5), (VARIANCE_EPS, 1.0)], &[true, true])
            .expect("valid constant prior")
    }

    /// `th2 ~ U[0, 1]`, `th6 ~ U[0.1, 2]`, `th7, th8 ~ U[eps, 1]`.
    pub fn m2() -> Self {
        Self::uniform(
            &[
                (0.0, 1.0),
                (0.1, 2.0),
                (VARIANCE_EPS, 1.0),
                (VARIANCE_EPS, 1.0),
            ],
            &[false, false, true, true],
        )
        .expect("valid constant prior")
    }

    pub fn dim(&self) -> usize {
        self.components.iter().map(PriorComponent::dim).sum()
    }

    pub fn positivity_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.dim());
        for c in &self.components {
            match c {
                PriorComponent::Uniform { variance, .. } => mask.push(*variance),
                PriorComponent::Gaussian { mean, .. } => {
                    mask.extend(std::iter::repeat_n(false, mean.len()))
                }
            }
        }
        mask
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidPrior("prior has no components".into()));
        }
        for (i, c) in self.components.iter().enumerate() {
            match c {
                PriorComponent::Uniform { a, b, variance } => {
                    if !a.is_finite() || !b.is_finite() || a >= b {
                        return Err(Error::InvalidPrior(format!(
                            "component {i}: need a < b, got [{a}, {b}]"
                        )));
                    }
                    if *variance && *a < VARIANCE_EPS {
                        return Err(Error::InvalidPrior(format!(
                            "component {i}: variance prior must start at >= {VARIANCE_EPS}, got {a}"
                        )));
                    }
                }
                PriorComponent::Gaussian { mean, covariance } => {
                    gaussian_factor(mean, covariance).map_err(|e| match e {
                        Error::InvalidPrior(msg) => {
                            Error::InvalidPrior(format!("component {i}: {msg}"))
                        }
                        other => other,
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Component-wise support as `(lower, upper)`; Gaussian blocks are unbounded.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.dim());
        for c in &self.components {
            match c {
                PriorComponent::Uniform { a, b, .. } => out.push((*a, *b)),
                PriorComponent::Gaussian { mean, .. } => out.extend(std::iter::repeat_n(
                    (f64::NEG_INFINITY, f64::INFINITY),
                    mean.len(),
                )),
            }
        }
        out
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for c in &self.components {
            match c {
                PriorComponent::Uniform { a, b, .. } => out.push(0.5 * (a + b)),
                PriorComponent::Gaussian { mean, .. } => out.extend_from_slice(mean),
            }
        }
        out
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && self
                .bounds()
                .iter()
                .zip(theta)
                .all(|(&(a, b), &v)| v.is_finite() && v >= a && v <= b)
            && self
                .positivity_mask()
                .iter()
                .zip(theta)
                .all(|(&pos, &v)| !pos || v > 0.0)
    }
}

/// Symmetric square root `L` with `L L^T = covariance` (PSD allowed).
fn gaussian_factor(mean: &[f64], covariance: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = mean.len();
    if d == 0 || covariance.len() != d || covariance.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidPrior(format!("covariance must be {d}x{d}")));
    }
    if mean
        .iter()
        .chain(covariance.iter().flatten())
        .any(|v| !v.is_finite())
    {
        return Err(Error::InvalidPrior(
            "non-finite Gaussian prior entries".into(),
        ));
    }
    let cov = DMatrix::from_fn(d, d, |i, j| covariance[i][j]);
    let scale = cov.amax().max(1.0);
    for i in 0..d {
        for j in 0..i {
            if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::InvalidPrior("covariance is not symmetric".into()));
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::InvalidPrior(
            "covariance is not positive semi-definite".into(),
        ));
    }
    let sqrt_l = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * sqrt_l)
}

/// Draws `count` independent parameter vectors.
pub fn sample_prior(prior: &PriorSpec, count: usize, seed: u64) -> Result<Vec<ThetaVector>> {
    if count == 0 {
        return Err(Error::InvalidSpec("need at least one prior draw".into()));
    }
    prior.validate()?;
    let factors: Vec<Option<DMatrix<f64>>> = prior
        .components
        .iter()
        .map(|c| match c {
            PriorComponent::Gaussian { mean, covariance } => {
                gaussian_factor(mean, covariance).map(Some)
            }
            PriorComponent::Uniform { .. } => Ok(None),
        })
        .collect::<Result<_>>()?;
    let mask = prior.positivity_mask();
    let mut rng = rng::derived_stream(seed, &[rng::tags::PRIOR]);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut values = Vec::with_capacity(prior.dim());
        for (c, factor) in prior.components.iter().zip(&factors) {
            match c {
                PriorComponent::Uniform { a, b, .. } => {
                    let u: f64 = rng.random();
                    // Stay strictly inside the support so variance draws are > 0.
                    values.push((a + (b - a) * u).clamp(*a, *b));
                }
                PriorComponent::Gaussian { mean, .. } => {
                    let l = factor.as_ref().expect("factor computed for Gaussian block");
                    let z =
                        DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
                    let x = l * z;
                    values.extend(mean.iter().zip(x.iter()).map(|(m, v)| m + v));
                }
            }
        }
        out.push(ThetaVector::new(values, mask.clone())?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_draws_stay_in_box() {
        let draws = sample_prior(&PriorSpec::m1(), 1000, 3).unwrap();
        assert_eq!(draws.len(), 1000);
        for t in &draws {
            assert!((0.1..=1.5).contains(&t.values[0]));
            assert!((VARIANCE_EPS..=1.0).contains(&t.values[1]));
        }
    }

    #[test]
    fn degenerate_uniform_collapses() {
        let a = 0.25;
        let prior = PriorSpec::uniform(&[(a, a + 1e-12)], &[false]).unwrap();
        for t in sample_prior(&prior, 50, 1).unwrap() {
            assert!((t.values[0] - a).abs() <= 1e-12);
        }
    }

    #[test]
    fn gaussian_mean_within_clt_bound() {
        let prior = PriorSpec::gaussian(vec![1.0, 1.0], &(DMatrix::identity(2, 2) / 3.0)).unwrap();
        let n = 100_000;
        let draws = sample_prior(&prior, n, 17).unwrap();
        let sigma = (1.0f64 / 3.0).sqrt();
        for j in 0..2 {
            let mean = draws.iter().map(|t| t.values[j]).sum::<f64>() / n as f64;
            assert!(
                (mean - 1.0).abs() < 3.0 * sigma / (n as f64).sqrt(),
                "component {j}: {mean}"
            );
        }
    }

    #[test]
    fn invalid_priors_rejected() {
        assert!(PriorSpec::uniform(&[(1.0, 1.0)], &[false]).is_err());
        assert!(PriorSpec::uniform(&[(0.0, 1.0)], &[true]).is_err());
        let not_psd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            PriorSpec::gaussian(vec![0.0, 0.0], &not_psd),
            Err(Error::InvalidPrior(_))
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(PriorSpec::gaussian(vec![0.0, 0.0], &asym).is_err());
        assert!(sample_prior(&PriorSpec::m1(), 0, 1).is_err());
    }

    #[test]
    fn semidefinite_covariance_is_accepted() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let prior = PriorSpec::gaussian(vec![0.0, 0.0], &cov).unwrap();
        for t in sample_prior(&prior, 20, 2).unwrap() {
            assert!((t.values[0] - t.values[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn means() {
        assert_eq!(PriorSpec::m1().mean(), vec![0.8, 0.5005]);
        assert_eq!(PriorSpec::m2().dim(), 4);
    }
}
