//! Model families: the FIR toy model, the generic nonlinear growth model and
//! its two fixed-parameter variants, plus input-signal generation.
//!
//! All simulators are pure functions of `(spec, theta, seed)`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Parameter vector with a per-component positivity flag for variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    pub values: Vec<f64>,
    pub positivity_mask: Vec<bool>,
}

impl ThetaVector {
    pub fn new(values: Vec<f64>, positivity_mask: Vec<bool>) -> Result<Self> {
        if values.len() != positivity_mask.len() {
            return Err(Error::Shape(format!(
                "theta has {} values but {} mask entries",
                values.len(),
                positivity_mask.len()
            )));
        }
        for (i, (&v, &pos)) in values.iter().zip(&positivity_mask).enumerate() {
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "theta[{i}] = {v} is not finite"
                )));
            }
            if pos && v <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "theta[{i}] = {v} must be strictly positive"
                )));
            }
        }
        Ok(Self {
            values,
            positivity_mask,
        })
    }

    /// Vector with no positivity constraints.
    pub fn unmasked(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// `u_k = cos(1.2 k)` for `k = 1..=N`.
    Cosine1p2,
    /// iid `U[0, 1]`.
    Uniform01,
    /// Pseudo-random binary signal: random sign per hold window.
    Prbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSignal {
    pub kind: InputKind,
    pub n: usize,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_hold")]
    pub hold: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_amplitude() -> f64 {
    0.5
}

fn default_hold() -> usize {
    5
}

impl InputSignal {
    pub fn cosine(n: usize) -> Self {
        Self {
            kind: InputKind::Cosine1p2,
            n,
            amplitude: 1.0,
            hold: 1,
            seed: 0,
        }
    }

    pub fn uniform01(n: usize, seed: u64) -> Self {
        Self {
            kind: InputKind::Uniform01,
            n,
            amplitude: 1.0,
            hold: 1,
            seed,
        }
    }

    pub fn prbs(n: usize, amplitude: f64, hold: usize, seed: u64) -> Self {
        Self {
            kind: InputKind::Prbs,
            n,
            amplitude,
            hold,
            seed,
        }
    }
}

pub fn generate_input(spec: &InputSignal) -> Result<Vec<f64>> {
    if spec.n == 0 {
        return Err(Error::InvalidSpec("input length must be positive".into()));
    }
    match spec.kind {
        InputKind::Cosine1p2 => Ok((1..=spec.n).map(|k| (1.2 * k as f64).cos()).collect()),
        InputKind::Uniform01 => {
            let mut rng = rng::derived_stream(spec.seed, &[rng::tags::INPUT]);
            Ok((0..spec.n).map(|_| rng.random::<f64>()).collect())
        }
        InputKind::Prbs => {
            if spec.hold == 0 {
                return Err(Error::InvalidSpec("PRBS hold must be positive".into()));
            }
            if !spec.amplitude.is_finite() {
                return Err(Error::InvalidSpec("PRBS amplitude must be finite".into()));
            }
            let mut rng = rng::derived_stream(spec.seed, &[rng::tags::INPUT]);
            let mut u = Vec::with_capacity(spec.n);
            while u.len() < spec.n {
                let level = if rng.random::<bool>() {
                    spec.amplitude
                } else {
                    -spec.amplitude
                };
                let len = spec.hold.min(spec.n - u.len());
                u.extend(std::iter::repeat_n(level, len));
            }
            Ok(u)
        }
    }
}

/// FIR regressor: entry `(k, l)` is `u_{k-l}` (0-based) with zeros before the start.
pub fn build_fir_regressor(u: &[f64], order: usize) -> Result<DMatrix<f64>> {
    let n = u.len();
    if order == 0 || order > n {
        return Err(Error::InvalidSpec(format!(
            "FIR order {order} outside 1..={n}"
        )));
    }
    Ok(DMatrix::from_fn(n, order, |k, l| {
        if k >= l {
            u[k - l]
        } else {
            0.0
        }
    }))
}

/// `y_k = sum_l theta_l u_{k-l+1} + v_k`, `v_k ~ N(0, noise_std^2)`.
pub fn simulate_fir(theta: &[f64], u: &[f64], noise_std: f64, seed: u64) -> Result<Vec<f64>> {
    let (order, n) = (theta.len(), u.len());
    if order == 0 || order > n {
        return Err(Error::InvalidSpec(format!(
            "FIR order {order} outside 1..={n}"
        )));
    }
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise std {noise_std} must be >= 0"
        )));
    }
    let mut rng = rng::stream(seed);
    let mut y = Vec::with_capacity(n);
    for k in 0..n {
        let mut acc = 0.0;
        for (l, &th) in theta.iter().enumerate() {
            if k >= l {
                acc += th * u[k - l];
            }
        }
        let e: f64 = rng.sample(StandardNormal);
        y.push(acc + noise_std * e);
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthVariant {
    Generic,
    M1,
    M2,
}

/// Growth model
/// `x_{k+1} = th1 x + th2 x / (th3 x^2 + th4) + th5 u_k + w_k`,
/// `y_k = th6 x_k^2 + v_k`, `w ~ N(0, th7)`, `v ~ N(0, th8)`, `x_1 = 0`.
///
/// `fixed` holds all eight values; the components listed in `free`
/// (1-based) are overwritten positionally by the estimated vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthModelSpec {
    pub fixed: [f64; 8],
    pub free: Vec<usize>,
    pub n: usize,
    pub variant: GrowthVariant,
}

pub const M1_FREE: [usize; 2] = [7, 8];
pub const M2_FREE: [usize; 4] = [2, 6, 7, 8];
pub const M1_THETA0: [f64; 2] = [1.0, 0.1];
pub const M2_THETA0: [f64; 4] = [0.7, 1.0, 0.1, 0.1];

impl GrowthModelSpec {
    /// Variance estimation: free `[th7, th8]`.
    pub fn m1(n: usize) -> Self {
        Self {
            fixed: [0.5, 25.0, 1.0, 1.0, 8.0, 1.0, M1_THETA0[0], M1_THETA0[1]],
            free: M1_FREE.to_vec(),
            n,
            variant: GrowthVariant::M1,
        }
    }

    /// Free `[th2, th6, th7, th8]`.
    pub fn m2(n: usize) -> Self {
        Self {
            fixed: [
                0.0,
                M2_THETA0[0],
                0.04,
                1.0,
                1.0,
                M2_THETA0[1],
                M2_THETA0[2],
                M2_THETA0[3],
            ],
            free: M2_FREE.to_vec(),
            n,
            variant: GrowthVariant::M2,
        }
    }

    pub fn generic(fixed: [f64; 8], free: Vec<usize>, n: usize) -> Result<Self> {
        let spec = Self {
            fixed,
            free,
            n,
            variant: GrowthVariant::Generic,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidSpec("signal length must be positive".into()));
        }
        let mut seen = [false; 8];
        for &i in &self.free {
            if !(1..=8).contains(&i) || seen[i - 1] {
                return Err(Error::InvalidSpec(format!(
                    "bad free index set {:?}",
                    self.free
                )));
            }
            seen[i - 1] = true;
        }
        let expected: Option<&[usize]> = match self.variant {
            GrowthVariant::Generic => None,
            GrowthVariant::M1 => Some(&M1_FREE),
            GrowthVariant::M2 => Some(&M2_FREE),
        };
        if let Some(exp) = expected {
            if self.free != exp {
                return Err(Error::InvalidSpec(format!(
                    "{:?} requires free set {exp:?}, got {:?}",
                    self.variant, self.free
                )));
            }
            let reference = match self.variant {
                GrowthVariant::M1 => Self::m1(self.n),
                _ => Self::m2(self.n),
            };
            for i in 0..8 {
                if !self.free.contains(&(i + 1)) && self.fixed[i] != reference.fixed[i] {
                    return Err(Error::InvalidSpec(format!(
                        "{:?} fixes theta{} = {}",
                        self.variant,
                        i + 1,
                        reference.fixed[i]
                    )));
                }
            }
        }
        if self.fixed.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("fixed parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.free.len()
    }

    /// Variance components (th7, th8) of the free vector.
    pub fn positivity_mask(&self) -> Vec<bool> {
        self.free.iter().map(|&i| i == 7 || i == 8).collect()
    }

    /// Overwrites the free components of the fixed defaults.
    pub fn assemble(&self, theta_free: &[f64]) -> Result<GrowthParams> {
        if theta_free.len() != self.free.len() {
            return Err(Error::Shape(format!(
                "expected {} free parameters, got {}",
                self.free.len(),
                theta_free.len()
            )));
        }
        let mut th = self.fixed;
        for (&i, &v) in self.free.iter().zip(theta_free) {
            th[i - 1] = v;
        }
        GrowthParams::new(th)
    }
}

/// Fully assembled growth-model parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthParams(pub [f64; 8]);

impl GrowthParams {
    pub fn new(th: [f64; 8]) -> Result<Self> {
        if th.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite growth parameters {th:?}"
            )));
        }
        if th[6] < 0.0 || th[7] < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "negative variance (theta7 = {}, theta8 = {})",
                th[6], th[7]
            )));
        }
        Ok(Self(th))
    }

    /// Noise-free state transition.
    #[inline]
    pub fn transition(&self, x: f64, u: f64) -> f64 {
        let t = &self.0;
        t[0] * x + t[1] * (x / (t[2] * x * x + t[3])) + t[4] * u
    }

    /// Noise-free observation.
    #[inline]
    pub fn observe(&self, x: f64) -> f64 {
        self.0[5] * x * x
    }

    pub fn process_var(&self) -> f64 {
        self.0[6]
    }

    pub fn measurement_var(&self) -> f64 {
        self.0[7]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthPath {
    /// Outputs `y_1..y_N`.
    pub y: Vec<f64>,
    /// States `x_1..x_{N+1}`.
    pub x: Vec<f64>,
}

pub fn simulate_growth(
    spec: &GrowthModelSpec,
    theta_free: &[f64],
    seed: u64,
) -> Result<GrowthPath> {
    spec.validate()?;
    let params = spec.assemble(theta_free)?;
    let u = generate_input(&InputSignal::cosine(spec.n))?;
    let (sw, sv) = (params.process_var().sqrt(), params.measurement_var().sqrt());
    let mut rng = rng::stream(seed);
    let mut x = Vec::with_capacity(spec.n + 1);
    let mut y = Vec::with_capacity(spec.n);
    let mut xk = 0.0;
    x.push(xk);
    for &uk in &u {
        let ev: f64 = rng.sample(StandardNormal);
        let ew: f64 = rng.sample(StandardNormal);
        y.push(params.observe(xk) + sv * ev);
        xk = params.transition(xk, uk) + sw * ew;
        x.push(xk);
    }
    Ok(GrowthPath { y, x })
}

/// Every simulator the dataset generator can drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// FIR model of the given order; the input is fixed across the dataset.
    Fir {
        order: usize,
        noise_var: f64,
        input: InputSignal,
    },
    Growth(GrowthModelSpec),
    /// Coupled-drives Wiener model; theta = `[th1, th2, th3, th4, lambda_v]`.
    Drives {
        dt: f64,
        input: InputSignal,
    },
}

impl ModelSpec {
    pub fn n(&self) -> usize {
        match self {
            ModelSpec::Fir { input, .. } | ModelSpec::Drives { input, .. } => input.n,
            ModelSpec::Growth(g) => g.n,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::Fir { order, .. } => *order,
            ModelSpec::Growth(g) => g.dim(),
            ModelSpec::Drives { .. } => 5,
        }
    }

    pub fn positivity_mask(&self) -> Vec<bool> {
        match self {
            ModelSpec::Fir { order, .. } => vec![false; *order],
            ModelSpec::Growth(g) => g.positivity_mask(),
            ModelSpec::Drives { .. } => vec![false, false, false, false, true],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Fir {
                order,
                noise_var,
                input,
            } => {
                if *order == 0 || *order > input.n {
                    return Err(Error::InvalidSpec(format!(
                        "FIR order {order} outside 1..={}",
                        input.n
                    )));
                }
                if !(*noise_var >= 0.0) {
                    return Err(Error::InvalidSpec(format!(
                        "noise variance {noise_var} must be >= 0"
                    )));
                }
                generate_input(input).map(|_| ())
            }
            ModelSpec::Growth(g) => g.validate(),
            ModelSpec::Drives { dt, input } => {
                if !(*dt > 0.0) {
                    return Err(Error::InvalidSpec(format!(
                        "sampling period {dt} must be positive"
                    )));
                }
                generate_input(input).map(|_| ())
            }
        }
    }

    /// Simulates one output signal.
    pub fn simulate(&self, theta: &[f64], seed: u64) -> Result<Vec<f64>> {
        if theta.len() != self.dim() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.dim(),
                theta.len()
            )));
        }
        match self {
            ModelSpec::Fir {
                noise_var, input, ..
            } => {
                let u = generate_input(input)?;
                simulate_fir(theta, &u, noise_var.sqrt(), seed)
            }
            ModelSpec::Growth(g) => simulate_growth(g, theta, seed).map(|p| p.y),
            ModelSpec::Drives { dt, input } => {
                let u = generate_input(input)?;
                crate::drives::simulate_wiener(
                    &[theta[0], theta[1], theta[2], theta[3]],
                    theta[4],
                    &u,
                    *dt,
                    seed,
                )
            }
        }
    }
}
