//! Bootstrap particle filter for scalar-state models and the exact Kalman
//! likelihood of the linear-Gaussian case.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::models::{generate_input, GrowthModelSpec, GrowthParams, InputSignal};
use crate::rng::{self, Stream};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-density of `N(mean, var)` at `x`.
#[inline]
pub fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let e = x - mean;
    -0.5 * (LN_2PI + var.ln() + e * e / var)
}

/// Scalar-state model with a sampleable transition and an observation density.
pub trait StateSpaceModel {
    fn sample_initial(&self, rng: &mut Stream) -> f64;
    /// Draws `x_{k+1}` given `x_k`.
    fn propagate(&self, x: f64, k: usize, rng: &mut Stream) -> f64;
    /// `log p(y_k | x_k)`.
    fn log_observation(&self, y: f64, x: f64, k: usize) -> f64;
}

/// Growth model with its input attached.
#[derive(Debug, Clone)]
pub struct GrowthSsm {
    pub params: GrowthParams,
    pub u: Vec<f64>,
    sd_w: f64,
}

impl GrowthSsm {
    pub fn new(params: GrowthParams, u: Vec<f64>) -> Result<Self> {
        if !(params.process_var() > 0.0 && params.measurement_var() > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "particle filtering needs positive noise variances (got {}, {})",
                params.process_var(),
                params.measurement_var()
            )));
        }
        Ok(Self {
            sd_w: params.process_var().sqrt(),
            params,
            u,
        })
    }

    /// The model of `spec` at the free parameters `theta`, driven by `cos(1.2 k)`.
    pub fn from_spec(spec: &GrowthModelSpec, theta: &[f64]) -> Result<Self> {
        spec.validate()?;
        Self::new(
            spec.assemble(theta)?,
            generate_input(&InputSignal::cosine(spec.n))?,
        )
    }
}

impl StateSpaceModel for GrowthSsm {
    fn sample_initial(&self, _rng: &mut Stream) -> f64 {
        0.0
    }

    #[inline]
    fn propagate(&self, x: f64, k: usize, rng: &mut Stream) -> f64 {
        let e: f64 = rng.sample(StandardNormal);
        self.params.transition(x, self.u[k]) + self.sd_w * e
    }

    #[inline]
    fn log_observation(&self, y: f64, x: f64, _k: usize) -> f64 {
        log_normal_pdf(y, self.params.observe(x), self.params.measurement_var())
    }
}

/// `x_{k+1} = a x_k + b u_k + w_k`, `y_k = c x_k + v_k`, `x_1 ~ N(0, q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LgssSpec {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub q: f64,
    pub r: f64,
    pub n: usize,
}

impl LgssSpec {
    pub fn validate(&self) -> Result<()> {
        if [self.a, self.b, self.c, self.q, self.r]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter(
                "non-finite LGSS coefficients".into(),
            ));
        }
        if !(self.q > 0.0 && self.r > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "q = {} and r = {} must be > 0",
                self.q, self.r
            )));
        }
        Ok(())
    }

    pub fn simulate(&self, u: &[f64], seed: u64) -> Result<Vec<f64>> {
        self.validate()?;
        check_input(u, self.n)?;
        let mut rng = rng::stream(seed);
        let (sq, sr) = (self.q.sqrt(), self.r.sqrt());
        let mut x = sq * rng.sample::<f64, _>(StandardNormal);
        let mut y = Vec::with_capacity(self.n);
        for &uk in u.iter().take(self.n) {
            y.push(self.c * x + sr * rng.sample::<f64, _>(StandardNormal));
            x = self.a * x + self.b * uk + sq * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(y)
    }
}

/// `LgssSpec` with its input, as a particle-filter model.
#[derive(Debug, Clone)]
pub struct LgssSsm<'a> {
    pub spec: &'a LgssSpec,
    pub u: &'a [f64],
}

impl StateSpaceModel for LgssSsm<'_> {
    fn sample_initial(&self, rng: &mut Stream) -> f64 {
        self.spec.q.sqrt() * rng.sample::<f64, _>(StandardNormal)
    }

    fn propagate(&self, x: f64, k: usize, rng: &mut Stream) -> f64 {
        self.spec.a * x
            + self.spec.b * self.u[k]
            + self.spec.q.sqrt() * rng.sample::<f64, _>(StandardNormal)
    }

    fn log_observation(&self, y: f64, x: f64, _k: usize) -> f64 {
        log_normal_pdf(y, self.spec.c * x, self.spec.r)
    }
}

fn check_input(u: &[f64], n: usize) -> Result<()> {
    if u.len() < n {
        return Err(Error::Shape(format!(
            "input has {} samples, need {n}",
            u.len()
        )));
    }
    Ok(())
}

/// Exact log-likelihood by the prediction-error decomposition.
pub fn kalman_loglik(spec: &LgssSpec, y: &[f64], u: &[f64]) -> Result<f64> {
    spec.validate()?;
    if y.len() != spec.n {
        return Err(Error::Shape(format!(
            "{} observations for N = {}",
            y.len(),
            spec.n
        )));
    }
    check_input(u, spec.n)?;
    let (mut m, mut p) = (0.0, spec.q);
    let mut ll = 0.0;
    for (k, &yk) in y.iter().enumerate() {
        let s = spec.c * spec.c * p + spec.r;
        if !(s > 0.0) {
            return Err(Error::Domain(format!(
                "innovation variance {s} at step {k}"
            )));
        }
        let e = yk - spec.c * m;
        ll += log_normal_pdf(e, 0.0, s);
        let gain = p * spec.c / s;
        let (mf, pf) = (m + gain * e, (1.0 - gain * spec.c) * p);
        m = spec.a * mf + spec.b * u[k];
        p = spec.a * spec.a * pf + spec.q;
    }
    Ok(ll)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampling {
    Systematic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfConfig {
    pub n_particles: usize,
    pub resampling: Resampling,
    pub seed: u64,
}

impl PfConfig {
    pub fn new(n_particles: usize, seed: u64) -> Result<Self> {
        if n_particles == 0 {
            return Err(Error::InvalidSpec("particle count must be >= 1".into()));
        }
        Ok(Self {
            n_particles,
            resampling: Resampling::Systematic,
            seed,
        })
    }
}

/// Systematic resampling of normalized weights into `weights.len()` indices.
pub fn systematic_resample(weights: &[f64], seed: u64) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::InvalidSpec("no weights to resample".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Domain(format!("negative or NaN weight {w}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Domain(format!("weights sum to {total}, not 1")));
    }
    let mut out = Vec::with_capacity(weights.len());
    systematic_into(weights, rng::stream(seed).random::<f64>(), &mut out);
    Ok(out)
}

/// Indices for the comb `(offset + i) / n`, `offset` in `[0, 1)`.
fn systematic_into(weights: &[f64], offset: f64, out: &mut Vec<usize>) {
    let n = weights.len();
    out.clear();
    let mut cum = weights[0];
    let mut j = 0;
    for i in 0..n {
        let pos = (offset + i as f64) / n as f64;
        while pos >= cum && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
}

/// Bootstrap particle-filter estimate of `log p(y | theta)`.
pub fn pf_loglik<S: StateSpaceModel>(model: &S, y: &[f64], cfg: &PfConfig) -> Result<f64> {
    let n = cfg.n_particles;
    if n == 0 {
        return Err(Error::InvalidSpec("particle count must be >= 1".into()));
    }
    let mut rng = rng::stream(cfg.seed);
    let mut x: Vec<f64> = (0..n).map(|_| model.sample_initial(&mut rng)).collect();
    let mut next = vec![0.0; n];
    let mut logw = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut idx = Vec::with_capacity(n);
    let mut ll = 0.0;
    for (k, &yk) in y.iter().enumerate() {
        if k > 0 {
            for (dst, &a) in next.iter_mut().zip(&idx) {
                *dst = model.propagate(x[a], k - 1, &mut rng);
            }
            std::mem::swap(&mut x, &mut next);
        }
        let mut max = f64::NEG_INFINITY;
        for (lw, &xi) in logw.iter_mut().zip(&x) {
            *lw = model.log_observation(yk, xi, k);
            if *lw > max {
                max = *lw;
            }
        }
        if !max.is_finite() {
            return Err(Error::DegenerateFilter { step: k });
        }
        let mut sum = 0.0;
        for (wi, &lw) in w.iter_mut().zip(&logw) {
            *wi = (lw - max).exp();
            sum += *wi;
        }
        ll += max + (sum / n as f64).ln();
        if k + 1 < y.len() {
            for wi in &mut w {
                *wi /= sum;
            }
            systematic_into(&w, rng.random::<f64>(), &mut idx);
        }
    }
    Ok(ll)
}

/// Particle-filter log-likelihood of a growth-model signal.
pub fn growth_loglik(
    spec: &GrowthModelSpec,
    theta: &[f64],
    y: &[f64],
    cfg: &PfConfig,
) -> Result<f64> {
    if y.len() != spec.n {
        return Err(Error::Shape(format!(
            "signal length {} != N = {}",
            y.len(),
            spec.n
        )));
    }
    pf_loglik(&GrowthSsm::from_spec(spec, theta)?, y, cfg)
}
