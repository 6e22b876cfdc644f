//! Coupled electric drives: third-order continuous-time Wiener model with a
//! rectified output, its zero-order-hold simulation, the map between the
//! physical and the transfer-function parameterization, and a multi-start
//! least-squares fit.
//!
//! Physical form: `X(s) = K a w^2 / ((s + a)(s^2 + 2 z w s + w^2)) U(s)`,
//! `y_k = |x(t_k)| + v_k`. Transfer-function form:
//! `X(s) = t1 / (s^3 - t2 s^2 - t3 s - t4) U(s)` realised by a companion
//! matrix.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::prior::{PriorComponent, PriorSpec, VARIANCE_EPS};
use crate::rng;

/// Upper end of the noise-variance prior.
pub const NOISE_VAR_MAX: f64 = 0.01;

/// Physical parameters: gain, inverse time constant, resonance frequency,
/// damping and output-noise variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WienerParams {
    pub k: f64,
    pub alpha: f64,
    pub omega0: f64,
    pub xi: f64,
    pub lambda_v: f64,
}

impl WienerParams {
    pub fn validate(&self) -> Result<()> {
        if [self.k, self.alpha, self.omega0, self.xi, self.lambda_v]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter(format!(
                "non-finite drive parameters {self:?}"
            )));
        }
        if !(self.alpha > 0.0 && self.omega0 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha = {} and omega0 = {} must be > 0",
                self.alpha, self.omega0
            )));
        }
        if self.lambda_v < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "noise variance {} must be >= 0",
                self.lambda_v
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.k, self.alpha, self.omega0, self.xi]
    }
}

/// Expands the physical form into `[t1, t2, t3, t4]`.
pub fn wiener_to_tf(p: &WienerParams) -> [f64; 4] {
    let (a, w, z) = (p.alpha, p.omega0, p.xi);
    [
        p.k * a * w * w,
        -(2.0 * z * w + a),
        -(w * w + 2.0 * a * z * w),
        -a * w * w,
    ]
}

/// Inverts [`wiener_to_tf`] when the denominator has one real, stable root.
pub fn tf_to_wiener(t: &[f64; 4], lambda_v: f64) -> Result<WienerParams> {
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "non-finite transfer-function parameters {t:?}"
        )));
    }
    if t[3] == 0.0 {
        return Err(Error::Domain(
            "t4 = 0 leaves the static gain undefined".into(),
        ));
    }
    // s^3 + c2 s^2 + c1 s + c0.
    let (c2, c1, c0) = (-t[1], -t[2], -t[3]);
    let p = c1 - c2 * c2 / 3.0;
    let q = 2.0 * c2.powi(3) / 27.0 - c2 * c1 / 3.0 + c0;
    let (hq, tp) = (q / 2.0, p / 3.0);
    let disc = hq * hq + tp.powi(3);
    let scale = hq * hq + tp.abs().powi(3);
    if disc <= 1e-12 * scale {
        return Err(Error::Ambiguous(format!(
            "denominator s^3 - ({}) s^2 - ({}) s - ({}) has three real roots",
            t[1], t[2], t[3]
        )));
    }
    let sq = disc.sqrt();
    let mut s = (-hq + sq).cbrt() + (-hq - sq).cbrt() - c2 / 3.0;
    for _ in 0..4 {
        let f = ((s + c2) * s + c1) * s + c0;
        let df = (3.0 * s + 2.0 * c2) * s + c1;
        if df == 0.0 {
            break;
        }
        s -= f / df;
    }
    if s >= 0.0 {
        return Err(Error::Domain(format!("real pole {s} is not stable")));
    }
    let alpha = -s;
    let w2 = -t[3] / alpha;
    if !(w2 > 0.0) {
        return Err(Error::Domain(format!("omega0^2 = {w2} is not positive")));
    }
    let omega0 = w2.sqrt();
    let params = WienerParams {
        k: -t[0] / t[3],
        alpha,
        omega0,
        xi: (-t[1] - alpha) / (2.0 * omega0),
        lambda_v,
    };
    params.validate()?;
    Ok(params)
}

/// Companion realisation `(A, B)` of the transfer-function parameters.
pub fn companion(t: &[f64; 4]) -> (DMatrix<f64>, DVector<f64>) {
    let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, t[3], t[2], t[1]]);
    (a, DVector::from_vec(vec![0.0, 0.0, t[0]]))
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a Taylor core.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Shape(format!("expm of a {:?} matrix", a.shape())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "expm argument has non-finite entries".into(),
        ));
    }
    let n = a.nrows();
    let nrm = norm1(a);
    let squarings = if nrm > 0.5 {
        (nrm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings);
    // Remainder after 18 terms at norm 0.5 is below 1e-22.
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=18 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    if sum.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix exponential overflowed".into()));
    }
    Ok(sum)
}

/// Zero-order-hold discretisation through the augmented exponential
/// `exp([[A, B], [0, 0]] dt) = [[Ad, Bd], [0, 1]]`.
pub fn zoh_discretize(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    dt: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = a.nrows();
    if !a.is_square() || b.len() != n {
        return Err(Error::Shape(format!(
            "A is {:?}, B has {} entries",
            a.shape(),
            b.len()
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sampling period {dt} must be positive"
        )));
    }
    let mut m = DMatrix::zeros(n + 1, n + 1);
    m.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    m.view_mut((0, n), (n, 1)).copy_from(&(b * dt));
    let e = expm(&m)?;
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, 1)).column(0).into_owned(),
    ))
}

/// Noise-free first state `x(t_k)`, `k = 0..len(u)`, from a zero initial state.
pub fn simulate_x1(t: &[f64; 4], u: &[f64], dt: f64) -> Result<Vec<f64>> {
    let (a, b) = companion(t);
    let (ad, bd) = zoh_discretize(&a, &b, dt)?;
    let mut x = [0.0f64; 3];
    let mut out = Vec::with_capacity(u.len());
    for (k, &uk) in u.iter().enumerate() {
        out.push(x[0]);
        let mut next = [0.0; 3];
        for (i, nx) in next.iter_mut().enumerate() {
            *nx = ad[(i, 0)] * x[0] + ad[(i, 1)] * x[1] + ad[(i, 2)] * x[2] + bd[i] * uk;
        }
        if next.iter().any(|v| !v.is_finite() || v.abs() > 1e150) {
            return Err(Error::Overflow { step: k + 1 });
        }
        x = next;
    }
    Ok(out)
}

/// `y_k = |x(t_k)| + v_k`, `v_k ~ N(0, lambda_v)`.
pub fn simulate_wiener(
    t: &[f64; 4],
    lambda_v: f64,
    u: &[f64],
    dt: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(lambda_v >= 0.0 && lambda_v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "noise variance {lambda_v} must be >= 0"
        )));
    }
    let x1 = simulate_x1(t, u, dt)?;
    let sd = lambda_v.sqrt();
    let mut r = rng::stream(seed);
    Ok(x1
        .iter()
        .map(|x| x.abs() + sd * r.sample::<f64, _>(StandardNormal))
        .collect())
}

/// `sum_k log N(y_k; |x_k|, lambda_v)`.
pub fn closed_form_loglik(y: &[f64], x1: &[f64], lambda_v: f64) -> Result<f64> {
    if !(lambda_v > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "noise variance {lambda_v} must be > 0"
        )));
    }
    if y.len() != x1.len() {
        return Err(Error::Shape(format!(
            "{} outputs for {} states",
            y.len(),
            x1.len()
        )));
    }
    let ss: f64 = y
        .iter()
        .zip(x1)
        .map(|(yk, xk)| (yk - xk.abs()).powi(2))
        .sum();
    Ok(-0.5 * (y.len() as f64 * (2.0 * std::f64::consts::PI * lambda_v).ln() + ss / lambda_v))
}

/// Exact log-likelihood of `theta = [t1, t2, t3, t4, lambda_v]`.
pub fn drives_loglik(theta: &[f64], y: &[f64], u: &[f64], dt: f64) -> Result<f64> {
    if theta.len() != 5 {
        return Err(Error::Shape(format!(
            "drive parameters have 5 components, got {}",
            theta.len()
        )));
    }
    let x1 = simulate_x1(&[theta[0], theta[1], theta[2], theta[3]], u, dt)?;
    closed_form_loglik(y, &x1, theta[4])
}

/// Per-component search interval for [`fit_lsq`] over `(K, alpha, omega0, xi)`.
pub type SearchBox = [(f64, f64); 4];

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: WienerParams,
    pub theta_prime: [f64; 4],
    pub residual_norm: f64,
    /// Objective at each Latin-hypercube start.
    pub start_objectives: Vec<f64>,
    pub best_start: usize,
}

fn residual_norm(w: &[f64], y: &[f64], u: &[f64], dt: f64) -> f64 {
    if !(w[1] > 0.0 && w[2] > 0.0) {
        return f64::INFINITY;
    }
    let p = WienerParams {
        k: w[0],
        alpha: w[1],
        omega0: w[2],
        xi: w[3],
        lambda_v: 0.0,
    };
    match simulate_x1(&wiener_to_tf(&p), u, dt) {
        Ok(x1) => {
            let ss: f64 = y.iter().zip(&x1).map(|(a, b)| (a - b.abs()).powi(2)).sum();
            if ss.is_finite() {
                ss.sqrt()
            } else {
                f64::INFINITY
            }
        }
        Err(_) => f64::INFINITY,
    }
}

/// Latin-hypercube sample of `count` points in the box.
pub fn latin_hypercube(bounds: &[(f64, f64)], count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::derived_stream(seed, &[rng::tags::STARTS]);
    let mut pts = vec![vec![0.0; bounds.len()]; count];
    for (j, &(lo, hi)) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..count).collect();
        strata.shuffle(&mut r);
        for (pt, s) in pts.iter_mut().zip(strata) {
            let f = (s as f64 + r.random::<f64>()) / count as f64;
            pt[j] = lo + (hi - lo) * f;
        }
    }
    pts
}

/// Options of the simplex search.
#[derive(Debug, Clone, PartialEq)]
pub struct NelderMead {
    pub max_evals: usize,
    /// Stop when the simplex function spread falls below `ftol * (1 + |f_best|)`.
    pub ftol: f64,
    pub restarts: usize,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            max_evals: 20_000,
            ftol: 1e-15,
            restarts: 3,
        }
    }
}

impl NelderMead {
    /// Minimises `f` from `x0` with initial edge lengths `step`.
    pub fn minimize<F: Fn(&[f64]) -> f64>(
        &self,
        f: F,
        x0: &[f64],
        step: &[f64],
    ) -> (Vec<f64>, f64, usize) {
        let mut best = x0.to_vec();
        let mut fbest = f(&best);
        let mut evals = 1;
        let mut edge = step.to_vec();
        for _ in 0..=self.restarts {
            let (x, fx, e) = self.run(&f, &best, &edge);
            evals += e;
            let improved = fx < fbest;
            if fx <= fbest {
                best = x;
                fbest = fx;
            }
            if !improved || evals >= self.max_evals {
                break;
            }
            // Restart with a smaller simplex around the incumbent.
            for (s, b) in edge.iter_mut().zip(&best) {
                *s = (*s * 0.1).max(1e-6 * b.abs().max(1e-3));
            }
        }
        (best, fbest, evals)
    }

    fn run<F: Fn(&[f64]) -> f64>(&self, f: &F, x0: &[f64], step: &[f64]) -> (Vec<f64>, f64, usize) {
        let n = x0.len();
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        simplex.push((x0.to_vec(), f(x0)));
        for i in 0..n {
            let mut x = x0.to_vec();
            x[i] += step[i];
            let fx = f(&x);
            simplex.push((x, fx));
        }
        let mut evals = n + 1;
        let cmp = |a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)| a.1.total_cmp(&b.1);
        while evals < self.max_evals {
            simplex.sort_by(cmp);
            let (fb, fw) = (simplex[0].1, simplex[n].1);
            if fw.is_finite() && (fw - fb).abs() <= self.ftol * (1.0 + fb.abs()) {
                break;
            }
            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|p| p.0[j]).sum::<f64>() / n as f64)
                .collect();
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n].0)
                    .map(|(c, w)| c + t * (w - c))
                    .collect()
            };
            let xr = along(-1.0);
            let fr = f(&xr);
            evals += 1;
            if fr < simplex[0].1 {
                let xe = along(-2.0);
                let fe = f(&xe);
                evals += 1;
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < fw {
                    let x = along(-0.5);
                    let v = f(&x);
                    (x, v)
                } else {
                    let x = along(0.5);
                    let v = f(&x);
                    (x, v)
                };
                evals += 1;
                if fc < fw.min(fr) {
                    simplex[n] = (xc, fc);
                } else {
                    let x0 = simplex[0].0.clone();
                    for p in simplex.iter_mut().skip(1) {
                        let x: Vec<f64> = x0
                            .iter()
                            .zip(&p.0)
                            .map(|(b, v)| b + 0.5 * (v - b))
                            .collect();
                        p.1 = f(&x);
                        p.0 = x;
                    }
                    evals += n;
                }
            }
        }
        simplex.sort_by(cmp);
        let (x, fx) = simplex.swap_remove(0);
        (x, fx, evals)
    }
}

/// Multi-start Nelder-Mead fit of `(K, alpha, omega0, xi)` minimising
/// `|y - |x(theta)||_2`.
pub fn fit_lsq(
    y: &[f64],
    u: &[f64],
    dt: f64,
    search: &SearchBox,
    starts: usize,
    seed: u64,
) -> Result<FitResult> {
    if y.is_empty() || u.len() != y.len() {
        return Err(Error::Shape(format!(
            "need equal, non-empty signals (y: {}, u: {})",
            y.len(),
            u.len()
        )));
    }
    for (i, &(lo, hi)) in search.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidSpec(format!(
                "search interval {i} = ({lo}, {hi}) is empty"
            )));
        }
    }
    if starts == 0 {
        return Err(Error::InvalidSpec("need at least one start".into()));
    }
    let points = latin_hypercube(search, starts, seed);
    let step: Vec<f64> = search.iter().map(|(lo, hi)| 0.1 * (hi - lo)).collect();
    let nm = NelderMead::default();
    let runs: Vec<(Vec<f64>, f64, f64)> = points
        .par_iter()
        .map(|x0| {
            let f0 = residual_norm(x0, y, u, dt);
            let (x, fx, _) = nm.minimize(|w| residual_norm(w, y, u, dt), x0, &step);
            (x, fx, f0)
        })
        .collect();
    let start_objectives: Vec<f64> = runs.iter().map(|r| r.2).collect();
    let (best_start, (x, fx, _)) = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.1.is_finite())
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.0.cmp(&b.0)))
        .ok_or_else(|| {
            Error::NoFit(format!(
                "all {starts} starts diverged; start objectives {start_objectives:?}"
            ))
        })?;
    let params = WienerParams {
        k: x[0],
        alpha: x[1],
        omega0: x[2],
        xi: x[3],
        lambda_v: 0.0,
    };
    Ok(FitResult {
        params,
        theta_prime: wiener_to_tf(&params),
        residual_norm: *fx,
        start_objectives,
        best_start,
    })
}

/// Uniform box of +-20 % around each transfer-function parameter plus the
/// noise-variance prior `[eps, 0.01]`.
pub fn build_drives_prior(theta_star: &[f64; 4]) -> Result<PriorSpec> {
    let mut comps = Vec::with_capacity(5);
    for (i, &v) in theta_star.iter().enumerate() {
        if !v.is_finite() || v == 0.0 {
            return Err(Error::InvalidPrior(format!(
                "component {} = {v} gives a degenerate interval",
                i + 1
            )));
        }
        let (a, b) = if v > 0.0 {
            (0.8 * v, 1.2 * v)
        } else {
            (1.2 * v, 0.8 * v)
        };
        comps.push(PriorComponent::Uniform {
            a,
            b,
            variance: false,
        });
    }
    comps.push(PriorComponent::Uniform {
        a: VARIANCE_EPS,
        b: NOISE_VAR_MAX,
        variance: true,
    });
    PriorSpec::new(comps)
}
