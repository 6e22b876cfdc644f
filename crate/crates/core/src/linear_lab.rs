//! Closed-form affine estimators for the FIR model.
//!
//! `fit_affine` solves the training least-squares problem through the
//! augmented Gram matrix of `[y; 1]`, one solve shared by every output
//! coordinate. `asymptotic_affine` is the large-sample limit of that fit.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dataset::{SignalRecord, SyntheticDataset};
use crate::error::{Error, Result};
use crate::models::{build_fir_regressor, generate_input, InputSignal};
use crate::prior::{sample_prior, PriorComponent, PriorSpec};
use crate::rng;

/// `theta_hat = a * y + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineEstimator {
    /// d x N.
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl AffineEstimator {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::Shape(format!(
                "A has {} rows, b has {} entries",
                a.nrows(),
                b.len()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "affine estimator has non-finite entries".into(),
            ));
        }
        Ok(Self { a, b })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn signal_len(&self) -> usize {
        self.a.ncols()
    }

    pub fn apply(&self, y: &[f64]) -> Result<DVector<f64>> {
        if y.len() != self.signal_len() {
            return Err(Error::Shape(format!(
                "signal length {} != {}",
                y.len(),
                self.signal_len()
            )));
        }
        Ok(&self.a * DVector::from_column_slice(y) + &self.b)
    }
}

/// First two moments of the prior and the known noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMoments {
    pub mu: DVector<f64>,
    /// Covariance about `mu`.
    pub r: DMatrix<f64>,
    pub lambda_v: f64,
}

impl PriorMoments {
    pub fn new(mu: DVector<f64>, r: DMatrix<f64>, lambda_v: f64) -> Result<Self> {
        let d = mu.len();
        if r.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "R must be {d}x{d}, got {:?}",
                r.shape()
            )));
        }
        if !lambda_v.is_finite() || lambda_v < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "noise variance {lambda_v} must be >= 0"
            )));
        }
        let scale = r.amax().max(1.0);
        if (&r - r.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidPrior("R is not symmetric".into()));
        }
        if r.clone()
            .symmetric_eigenvalues()
            .iter()
            .any(|&l| l < -1e-10 * scale)
        {
            return Err(Error::InvalidPrior(
                "R is not positive semi-definite".into(),
            ));
        }
        Ok(Self { mu, r, lambda_v })
    }

    /// Exact moments of a prior built from uniform and Gaussian blocks.
    pub fn from_prior(prior: &PriorSpec, lambda_v: f64) -> Result<Self> {
        prior.validate()?;
        let d = prior.dim();
        let mut r = DMatrix::zeros(d, d);
        let mut off = 0;
        for c in &prior.components {
            match c {
                PriorComponent::Uniform { a, b, .. } => {
                    r[(off, off)] = (b - a).powi(2) / 12.0;
                    off += 1;
                }
                PriorComponent::Gaussian { mean, covariance } => {
                    for (i, row) in covariance.iter().enumerate() {
                        for (j, &v) in row.iter().enumerate() {
                            r[(off + i, off + j)] = v;
                        }
                    }
                    off += mean.len();
                }
            }
        }
        Self::new(DVector::from_vec(prior.mean()), r, lambda_v)
    }
}

/// Sufficient statistics of the affine least-squares problem.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMoments {
    pub count: usize,
    pub sum_y: DVector<f64>,
    pub sum_theta: DVector<f64>,
    /// Sum of `y y^T` (N x N).
    pub syy: DMatrix<f64>,
    /// Sum of `theta y^T` (d x N).
    pub sty: DMatrix<f64>,
}

impl AffineMoments {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            count: 0,
            sum_y: DVector::zeros(n),
            sum_theta: DVector::zeros(d),
            syy: DMatrix::zeros(n, n),
            sty: DMatrix::zeros(d, n),
        }
    }

    pub fn push(&mut self, theta: &[f64], y: &[f64]) -> Result<()> {
        let (n, d) = (self.sum_y.len(), self.sum_theta.len());
        if y.len() != n || theta.len() != d {
            return Err(Error::Shape(format!(
                "record has (d={}, N={}), statistics expect (d={d}, N={n})",
                theta.len(),
                y.len()
            )));
        }
        let yv = DVector::from_column_slice(y);
        let tv = DVector::from_column_slice(theta);
        self.syy.ger(1.0, &yv, &yv, 1.0);
        self.sty.ger(1.0, &tv, &yv, 1.0);
        self.sum_y += &yv;
        self.sum_theta += &tv;
        self.count += 1;
        Ok(())
    }

    pub fn from_records(records: &[SignalRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidSpec("no training records".into()))?;
        let mut m = Self::zeros(first.y.len(), first.theta.len());
        for r in records {
            m.push(&r.theta.values, &r.y)?;
        }
        Ok(m)
    }
}

/// Least-squares affine fit on a training set.
pub fn fit_affine(z: &SyntheticDataset) -> Result<AffineEstimator> {
    fit_affine_moments(&AffineMoments::from_records(&z.records)?)
}

/// Solves `[A b] G = [sty sum_theta]` with `G` the augmented Gram matrix.
pub fn fit_affine_moments(m: &AffineMoments) -> Result<AffineEstimator> {
    let n = m.sum_y.len();
    if m.count < n + 1 {
        return Err(Error::Singular(format!(
            "{} records cannot determine {} regressors (N signal samples plus the constant)",
            m.count,
            n + 1
        )));
    }
    let mut g = DMatrix::zeros(n + 1, n + 1);
    g.view_mut((0, 0), (n, n)).copy_from(&m.syy);
    g.view_mut((0, n), (n, 1)).copy_from(&m.sum_y);
    g.view_mut((n, 0), (1, n)).copy_from(&m.sum_y.transpose());
    g[(n, n)] = m.count as f64;
    let chol = checked_cholesky(g, "augmented design Gram matrix")?;
    let mut rhs = DMatrix::zeros(n + 1, m.sum_theta.len());
    rhs.view_mut((0, 0), (n, m.sum_theta.len()))
        .copy_from(&m.sty.transpose());
    rhs.view_mut((n, 0), (1, m.sum_theta.len()))
        .copy_from(&m.sum_theta.transpose());
    let x = chol.solve(&rhs).transpose();
    AffineEstimator::new(x.columns(0, n).into_owned(), x.column(n).into_owned())
}

/// Cholesky that also rejects numerically rank-deficient matrices.
fn checked_cholesky(g: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let diag_max = g.diagonal().amax();
    let chol = Cholesky::new(g).ok_or_else(|| {
        Error::Singular(format!("{what} is not positive definite (rank deficient)"))
    })?;
    let l = chol.l_dirty();
    for i in 0..l.nrows() {
        let pivot = l[(i, i)] * l[(i, i)];
        if !(pivot > 1e-13 * diag_max) {
            return Err(Error::Singular(format!(
                "{what} is rank deficient: column {i} is (numerically) a combination of the preceding ones"
            )));
        }
    }
    Ok(chol)
}

/// Large-sample limit `A = R Phi^T (Phi R Phi^T + lambda I)^-1`, `b = (I - A Phi) mu`.
pub fn asymptotic_affine(phi: &DMatrix<f64>, moments: &PriorMoments) -> Result<AffineEstimator> {
    let d = moments.mu.len();
    if phi.ncols() != d {
        return Err(Error::Shape(format!(
            "Phi has {} columns, prior dimension is {d}",
            phi.ncols()
        )));
    }
    let n = phi.nrows();
    let phi_r = phi * &moments.r;
    let s = &phi_r * phi.transpose() + DMatrix::identity(n, n) * moments.lambda_v;
    let chol = Cholesky::new(s)
        .ok_or_else(|| Error::Singular("Phi R Phi^T + lambda I is not invertible".into()))?;
    // S symmetric, so A^T = S^-1 (Phi R).
    let a = chol.solve(&phi_r).transpose();
    let b = (DMatrix::identity(d, d) - &a * phi) * &moments.mu;
    AffineEstimator::new(a, b)
}

/// Mean of `|(A - A') y + (b - b')|^2` over the test signals.
pub fn estimator_gap_mse(
    est: &AffineEstimator,
    limit: &AffineEstimator,
    test_signals: &[Vec<f64>],
) -> Result<f64> {
    if test_signals.is_empty() {
        return Err(Error::InvalidSpec("empty test set".into()));
    }
    if est.a.shape() != limit.a.shape() {
        return Err(Error::Shape(format!(
            "estimators differ in shape: {:?} vs {:?}",
            est.a.shape(),
            limit.a.shape()
        )));
    }
    let da = &est.a - &limit.a;
    let db = &est.b - &limit.b;
    let mut total = 0.0;
    for y in test_signals {
        if y.len() != da.ncols() {
            return Err(Error::Shape(format!(
                "test signal length {} != {}",
                y.len(),
                da.ncols()
            )));
        }
        total += (&da * DVector::from_column_slice(y) + &db).norm_squared();
    }
    Ok(total / test_signals.len() as f64)
}

/// Training objective `sum |theta - A y - b|^2` over a record set.
pub fn affine_objective(est: &AffineEstimator, records: &[SignalRecord]) -> Result<f64> {
    let mut total = 0.0;
    for r in records {
        let pred = est.apply(&r.y)?;
        total += (DVector::from_column_slice(&r.theta.values) - pred).norm_squared();
    }
    Ok(total)
}

/// Draws the sufficient statistics of an FIR training set without building
/// its `P * M` records.
///
/// With `y_pm = Phi theta_p + v_pm`, the group means `ybar_p` and the pooled
/// within-group scatter are independent; the scatter is
/// `Wishart(P (M - 1), lambda I)` and is drawn by the Bartlett decomposition.
/// The parameter draws coincide with those of `generate_dataset` for the
/// same prior and seed.
pub fn sample_affine_moments(
    phi: &DMatrix<f64>,
    prior: &PriorSpec,
    lambda_v: f64,
    p: usize,
    m: usize,
    seed: u64,
) -> Result<AffineMoments> {
    if p == 0 || m == 0 {
        return Err(Error::InvalidSpec(format!(
            "P and M must be >= 1 (got P={p}, M={m})"
        )));
    }
    if !lambda_v.is_finite() || lambda_v < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "noise variance {lambda_v} must be >= 0"
        )));
    }
    if prior.dim() != phi.ncols() {
        return Err(Error::Shape(format!(
            "prior dimension {} != FIR order {}",
            prior.dim(),
            phi.ncols()
        )));
    }
    let n = phi.nrows();
    let d = phi.ncols();
    let thetas = sample_prior(prior, p, seed)?;
    let mut rng = rng::derived_stream(seed, &[rng::tags::WISHART]);
    let mean_sd = (lambda_v / m as f64).sqrt();
    let mf = m as f64;

    let mut out = AffineMoments::zeros(n, d);
    let mut group_means = DMatrix::zeros(n, p);
    let mut theta_mat = DMatrix::zeros(d, p);
    for (j, t) in thetas.iter().enumerate() {
        let tv = DVector::from_column_slice(&t.values);
        let mut ybar = phi * &tv;
        for v in ybar.iter_mut() {
            *v += mean_sd * rng.sample::<f64, _>(StandardNormal);
        }
        group_means.set_column(j, &ybar);
        theta_mat.set_column(j, &tv);
    }
    out.count = p * m;
    out.sum_y = group_means.column_sum() * mf;
    out.sum_theta = theta_mat.column_sum() * mf;
    out.syy = &group_means * group_means.transpose() * mf;
    out.sty = &theta_mat * group_means.transpose() * mf;
    out.syy += wishart_identity(n, p * (m - 1), lambda_v, &mut rng)?;
    Ok(out)
}

/// Draw from `Wishart(df, scale * I_n)`.
fn wishart_identity<R: Rng>(n: usize, df: usize, scale: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if df == 0 || scale == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let mut t = DMatrix::zeros(n, n);
    if df >= n {
        for i in 0..n {
            let chi = ChiSquared::new((df - i) as f64)
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            t[(i, i)] = chi.sample(rng).sqrt();
            for j in 0..i {
                t[(i, j)] = rng.sample(StandardNormal);
            }
        }
        Ok(&t * t.transpose() * scale)
    } else {
        // Singular Wishart: sum of df outer products.
        let g = DMatrix::from_fn(n, df, |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok(&g * g.transpose() * scale)
    }
}

/// Settings of the convergence study over training-set sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub p_values: Vec<usize>,
    pub m_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n: usize,
    pub lambda_v: f64,
    pub prior: PriorSpec,
    /// Parameters of the test signals.
    pub theta_test: Vec<f64>,
    pub test_signals: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            p_values: vec![400, 500, 600, 1000],
            m_values: vec![50, 100, 200, 500],
            seeds: vec![1, 2, 3, 4, 5],
            n: 500,
            lambda_v: 0.09,
            prior: PriorSpec::gaussian(vec![1.0, 1.0], &(DMatrix::identity(2, 2) / 3.0))
                .expect("valid constant prior"),
            theta_test: vec![0.7, 0.7],
            test_signals: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub p_values: Vec<usize>,
    pub m_values: Vec<usize>,
    /// `per_seed[s][i][j]` for seed `s`, `P = p_values[i]`, `M = m_values[j]`.
    pub per_seed: Vec<Vec<Vec<f64>>>,
}

impl GridResult {
    /// Seed-averaged gap MSE, rows indexed by P and columns by M.
    pub fn mean(&self) -> Vec<Vec<f64>> {
        let s = self.per_seed.len() as f64;
        (0..self.p_values.len())
            .map(|i| {
                (0..self.m_values.len())
                    .map(|j| self.per_seed.iter().map(|g| g[i][j]).sum::<f64>() / s)
                    .collect()
            })
            .collect()
    }

    pub fn cell(&self, p: usize, m: usize) -> Option<f64> {
        let i = self.p_values.iter().position(|&v| v == p)?;
        let j = self.m_values.iter().position(|&v| v == m)?;
        Some(self.mean()[i][j])
    }
}

/// Gap between the trained and the asymptotic affine estimator over a grid
/// of training-set sizes.
///
/// Each master seed fixes its own input signal, shared by training and test
/// data.
pub fn convergence_grid(cfg: &GridConfig) -> Result<GridResult> {
    if cfg.p_values.is_empty() || cfg.m_values.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::InvalidSpec(
            "grid needs at least one P, M and seed".into(),
        ));
    }
    if cfg.theta_test.len() != cfg.prior.dim() {
        return Err(Error::Shape(
            "test parameters and prior differ in dimension".into(),
        ));
    }
    let order = cfg.prior.dim();
    let moments = PriorMoments::from_prior(&cfg.prior, cfg.lambda_v)?;
    let per_seed = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let u = generate_input(&InputSignal::uniform01(cfg.n, seed))?;
            let phi = build_fir_regressor(&u, order)?;
            let limit = asymptotic_affine(&phi, &moments)?;
            let clean = &phi * DVector::from_column_slice(&cfg.theta_test);
            let mut noise = rng::derived_stream(seed, &[rng::tags::TEST]);
            let sd = cfg.lambda_v.sqrt();
            let tests: Vec<Vec<f64>> = (0..cfg.test_signals)
                .map(|_| {
                    clean
                        .iter()
                        .map(|c| c + sd * noise.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            let cells: Vec<(usize, usize)> = cfg
                .p_values
                .iter()
                .flat_map(|&p| cfg.m_values.iter().map(move |&m| (p, m)))
                .collect();
            let gaps = cells
                .par_iter()
                .map(|&(p, m)| {
                    let cell_seed = rng::derive_seed(seed, &[p as u64, m as u64]);
                    let stats =
                        sample_affine_moments(&phi, &cfg.prior, cfg.lambda_v, p, m, cell_seed)?;
                    estimator_gap_mse(&fit_affine_moments(&stats)?, &limit, &tests)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(gaps
                .chunks(cfg.m_values.len())
                .map(<[f64]>::to_vec)
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridResult {
        p_values: cfg.p_values.clone(),
        m_values: cfg.m_values.clone(),
        per_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dataset;
    use crate::models::ModelSpec;
    use approx::assert_relative_eq;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn record(theta: &[f64], y: &[f64]) -> SignalRecord {
        SignalRecord {
            p: 0,
            m: 0,
            theta: crate::models::ThetaVector::unmasked(theta.to_vec()).unwrap(),
            y: y.to_vec(),
            seed: 0,
        }
    }

    fn dense_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
        m.clone().try_inverse().unwrap()
    }

    #[test]
    fn two_record_example_is_rank_deficient() {
        // u = [1, 0], L = 1: y = [theta, 0]; the second sample is identically zero.
        let records = [record(&[1.0], &[1.0, 0.0]), record(&[2.0], &[2.0, 0.0])];
        let err = fit_affine_moments(&AffineMoments::from_records(&records).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Singular(_)), "{err}");
    }

    #[test]
    fn well_posed_fit_matches_normal_equations() {
        // N = 2, L = 1 with noise and four records: the design [y1 y2 1] has full rank.
        let records = [
            record(&[1.0], &[1.1, -0.2]),
            record(&[2.0], &[1.9, 0.3]),
            record(&[0.5], &[0.4, 0.1]),
            record(&[1.5], &[1.7, -0.4]),
        ];
        let est = fit_affine_moments(&AffineMoments::from_records(&records).unwrap()).unwrap();
        // Oracle: explicit (X^T X)^-1 X^T t with a dense inverse.
        let x = DMatrix::from_fn(4, 3, |i, j| if j < 2 { records[i].y[j] } else { 1.0 });
        let t = DVector::from_fn(4, |i, _| records[i].theta.values[0]);
        let coef = dense_inverse(&(x.transpose() * &x)) * x.transpose() * t;
        assert_relative_eq!(est.a[(0, 0)], coef[0], epsilon = 1e-12);
        assert_relative_eq!(est.a[(0, 1)], coef[1], epsilon = 1e-12);
        assert_relative_eq!(est.b[0], coef[2], epsilon = 1e-12);
    }

    #[test]
    fn too_few_records_name_the_deficiency() {
        let records = [record(&[1.0, 2.0], &[0.1, 0.2, 0.3])];
        match fit_affine_moments(&AffineMoments::from_records(&records).unwrap()) {
            Err(Error::Singular(msg)) => assert!(msg.contains("1 records"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    fn fir_setup(
        n: usize,
        p: usize,
        m: usize,
        seed: u64,
    ) -> (SyntheticDataset, DMatrix<f64>, PriorMoments) {
        let input = InputSignal::uniform01(n, seed);
        let model = ModelSpec::Fir {
            order: 2,
            noise_var: 0.09,
            input: input.clone(),
        };
        let prior = GridConfig::default().prior;
        let z = generate_dataset(&model, &prior, p, m, seed).unwrap();
        let phi = build_fir_regressor(&generate_input(&input).unwrap(), 2).unwrap();
        (z, phi, PriorMoments::from_prior(&prior, 0.09).unwrap())
    }

    #[test]
    fn trained_fit_beats_limit_on_training_data() {
        let (z, phi, mom) = fir_setup(20, 40, 5, 3);
        let fit = fit_affine(&z).unwrap();
        let lim = asymptotic_affine(&phi, &mom).unwrap();
        assert!(
            affine_objective(&fit, &z.records).unwrap()
                <= affine_objective(&lim, &z.records).unwrap()
        );
    }

    #[test]
    fn dataset_and_moment_paths_agree() {
        let (z, _, _) = fir_setup(15, 30, 4, 8);
        let direct = fit_affine(&z).unwrap();
        // Literal least squares over all records by dense normal equations.
        let x = DMatrix::from_fn(
            z.len(),
            16,
            |i, j| if j < 15 { z.records[i].y[j] } else { 1.0 },
        );
        let t = DMatrix::from_fn(z.len(), 2, |i, j| z.records[i].theta.values[j]);
        let coef = dense_inverse(&(x.transpose() * &x)) * x.transpose() * t;
        for k in 0..2 {
            for j in 0..15 {
                assert_relative_eq!(
                    direct.a[(k, j)],
                    coef[(j, k)],
                    epsilon = 1e-9,
                    max_relative = 1e-9
                );
            }
            assert_relative_eq!(
                direct.b[k],
                coef[(15, k)],
                epsilon = 1e-9,
                max_relative = 1e-9
            );
        }
    }

    #[test]
    fn sampled_moments_have_the_right_expectation() {
        let n = 4;
        let phi = build_fir_regressor(&generate_input(&InputSignal::uniform01(n, 2)).unwrap(), 2)
            .unwrap();
        let prior = GridConfig::default().prior;
        let (p, m, lambda) = (3, 7, 0.5);
        let reps = 4000;
        let thetas = sample_prior(&prior, p, 11).unwrap();
        // Parameters depend only on the seed, so fix it and vary the noise by hand.
        let mut expected = DMatrix::zeros(n, n);
        for t in &thetas {
            let c = &phi * DVector::from_column_slice(&t.values);
            expected += &c * c.transpose() * m as f64;
        }
        expected += DMatrix::identity(n, n) * (p * m) as f64 * lambda;
        let mut acc = DMatrix::zeros(n, n);
        let mut rng = rng::stream(5);
        for _ in 0..reps {
            let mut s = DMatrix::zeros(n, n);
            for t in &thetas {
                let c = &phi * DVector::from_column_slice(&t.values);
                let ybar = c + DVector::from_fn(n, |_, _| {
                    (lambda / m as f64).sqrt() * rng.sample::<f64, _>(StandardNormal)
                });
                s += &ybar * ybar.transpose() * m as f64;
            }
            s += wishart_identity(n, p * (m - 1), lambda, &mut rng).unwrap();
            acc += s;
        }
        let mean = acc / reps as f64;
        // Per-replicate entry sd is about 7 here; 4000 reps bring it to ~0.11, so 0.45 is ~4 sd.
        let worst = (&mean - &expected).amax();
        assert!(worst < 0.45, "{worst}");
        let stats = sample_affine_moments(&phi, &prior, lambda, p, m, 11).unwrap();
        assert_eq!(stats.count, p * m);
        let sum_theta: DVector<f64> = thetas
            .iter()
            .map(|t| DVector::from_column_slice(&t.values))
            .sum::<DVector<f64>>()
            * m as f64;
        assert_relative_eq!(stats.sum_theta, sum_theta, epsilon = 1e-12);
    }

    #[test]
    fn bartlett_wishart_mean() {
        let mut rng = rng::stream(9);
        let (n, df, reps) = (5, 12, 3000);
        let mut acc = DMatrix::zeros(n, n);
        for _ in 0..reps {
            acc += wishart_identity(n, df, 0.3, &mut rng).unwrap();
        }
        let mean = acc / reps as f64;
        let expected = DMatrix::identity(n, n) * (df as f64 * 0.3);
        assert!((mean - expected).amax() < 0.12);
    }

    #[test]
    fn collapsed_prior_returns_its_mean() {
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, 3.0, 2.0]);
        let mom = PriorMoments::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::zeros(2, 2),
            0.09,
        )
        .unwrap();
        let est = asymptotic_affine(&phi, &mom).unwrap();
        assert_eq!(est.a.amax(), 0.0);
        assert_eq!(est.b, mom.mu);
    }

    #[test]
    fn noiseless_invertible_limit_is_identity() {
        let phi = DMatrix::identity(2, 2);
        let r = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]);
        let mom = PriorMoments::new(DVector::from_vec(vec![1.0, 1.0]), r, 1e-12).unwrap();
        let est = asymptotic_affine(&phi, &mom).unwrap();
        assert_relative_eq!(est.a, DMatrix::identity(2, 2), epsilon = 1e-9);
        assert!(est.b.amax() < 1e-9);
    }

    #[test]
    fn limit_matches_dense_inverse_oracle() {
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, 3.0, 2.0]);
        let r = DMatrix::identity(2, 2) / 3.0;
        let mu = DVector::from_vec(vec![1.0, 1.0]);
        let est = asymptotic_affine(
            &phi,
            &PriorMoments::new(mu.clone(), r.clone(), 0.09).unwrap(),
        )
        .unwrap();
        let a = &r
            * phi.transpose()
            * dense_inverse(&(&phi * &r * phi.transpose() + DMatrix::identity(3, 3) * 0.09));
        let b = (DMatrix::identity(2, 2) - &a * &phi) * mu;
        assert_relative_eq!(est.a, a, epsilon = 1e-12);
        assert_relative_eq!(est.b, b, epsilon = 1e-12);
    }

    #[test]
    fn singular_limit_is_reported() {
        let phi = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let mom =
            PriorMoments::new(DVector::from_vec(vec![0.0]), DMatrix::identity(1, 1), 0.0).unwrap();
        assert!(matches!(
            asymptotic_affine(&phi, &mom),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn gap_examples() {
        let est = AffineEstimator::new(
            DMatrix::from_row_slice(2, 2, &[0.2, 0.1, 0.0, 0.3]),
            DVector::from_vec(vec![0.5, 0.6]),
        )
        .unwrap();
        assert_eq!(
            estimator_gap_mse(&est, &est, &[vec![1.0, 2.0]]).unwrap(),
            0.0
        );
        let mut shifted = est.clone();
        shifted.b[0] += 1e-3;
        assert_relative_eq!(
            estimator_gap_mse(&shifted, &est, &[vec![1.0, 2.0]]).unwrap(),
            1e-6,
            max_relative = 1e-9
        );
        assert!(estimator_gap_mse(&est, &est, &[]).is_err());
        assert!(estimator_gap_mse(&est, &est, &[vec![1.0]]).is_err());
    }

    #[test]
    fn grid_shrinks_with_training_size() {
        let cfg = GridConfig {
            p_values: vec![40, 400],
            m_values: vec![5, 50],
            seeds: vec![1, 2, 3],
            n: 30,
            ..GridConfig::default()
        };
        let g = convergence_grid(&cfg).unwrap();
        let mean = g.mean();
        assert!(mean[1][1] < mean[0][0]);
        assert!(mean[1][0] < mean[0][0] && mean[0][1] < mean[0][0]);
        assert_eq!(g.cell(400, 50), Some(mean[1][1]));
    }

    fn posterior_mean(phi: &DMatrix<f64>, mom: &PriorMoments, y: &DVector<f64>) -> DVector<f64> {
        // Information form, independent of the gain form used by the estimator.
        let rinv = dense_inverse(&mom.r);
        let prec = &rinv + phi.transpose() * phi / mom.lambda_v;
        dense_inverse(&prec) * (&rinv * &mom.mu + phi.transpose() * y / mom.lambda_v)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn limit_is_the_gaussian_posterior_mean(seed in any::<u64>(), n in 2usize..12, lambda in 0.01f64..1.0) {
            let mut r = rng::stream(seed);
            let phi = build_fir_regressor(&generate_input(&InputSignal::uniform01(n, seed)).unwrap(), 2).unwrap();
            let l = DMatrix::from_fn(2, 2, |_, _| r.sample::<f64, _>(StandardNormal));
            let cov = &l * l.transpose() + DMatrix::identity(2, 2) * 0.1;
            let mom = PriorMoments::new(DVector::from_fn(2, |_, _| r.sample::<f64, _>(StandardNormal)), cov, lambda).unwrap();
            let y = DVector::from_fn(n, |_, _| r.sample::<f64, _>(StandardNormal));
            let est = asymptotic_affine(&phi, &mom).unwrap();
            let got = est.apply(y.as_slice()).unwrap();
            let want = posterior_mean(&phi, &mom, &y);
            prop_assert!((got - want).amax() < 1e-10);
        }

        #[test]
        fn shifting_the_prior_mean_shifts_predictions(seed in any::<u64>(), c in -3.0f64..3.0) {
            let phi = build_fir_regressor(&generate_input(&InputSignal::uniform01(6, seed)).unwrap(), 2).unwrap();
            let r = DMatrix::identity(2, 2) / 3.0;
            let base = PriorMoments::new(DVector::from_vec(vec![1.0, 1.0]), r.clone(), 0.09).unwrap();
            let moved = PriorMoments::new(DVector::from_vec(vec![1.0 + c, 1.0 + c]), r, 0.09).unwrap();
            let e0 = asymptotic_affine(&phi, &base).unwrap();
            let e1 = asymptotic_affine(&phi, &moved).unwrap();
            prop_assert!((&e0.a - &e1.a).amax() < 1e-12);
            // Data generated with theta + c shifts by Phi c; predictions shift by c.
            let y0 = &phi * DVector::from_vec(vec![0.4, 1.3]);
            let y1 = &y0 + &phi * DVector::from_vec(vec![c, c]);
            let shift = e1.apply(y1.as_slice()).unwrap() - e0.apply(y0.as_slice()).unwrap();
            prop_assert!((shift - DVector::from_vec(vec![c, c])).amax() < 1e-10);
        }
    }
}
