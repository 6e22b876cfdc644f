//! Random-walk Metropolis-Hastings on box-bounded parameters and the
//! conditional-mean estimate built from its draws.
//!
//! Each component is mapped to the real line by the logit
//! `phi = log((theta - a) / (b - theta))`; the walk runs on `phi` and the
//! acceptance ratio carries the log-Jacobian of the inverse map.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::GrowthModelSpec;
use crate::rng;
use crate::smc::{growth_loglik, PfConfig};

fn check_bounds(bounds: &[(f64, f64)]) -> Result<()> {
    for (i, &(a, b)) in bounds.iter().enumerate() {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::InvalidSpec(format!(
                "component {i}: bounds ({a}, {b}) need finite a < b"
            )));
        }
    }
    Ok(())
}

/// `log((theta - a) / (b - theta))` per component.
pub fn to_unconstrained(theta: &[f64], bounds: &[(f64, f64)]) -> Result<Vec<f64>> {
    if theta.len() != bounds.len() {
        return Err(Error::Shape(format!(
            "{} values for {} bounds",
            theta.len(),
            bounds.len()
        )));
    }
    check_bounds(bounds)?;
    theta
        .iter()
        .zip(bounds)
        .enumerate()
        .map(|(i, (&t, &(a, b)))| {
            if !(t > a && t < b) {
                return Err(Error::Domain(format!(
                    "theta[{i}] = {t} not strictly inside ({a}, {b})"
                )));
            }
            Ok(((t - a) / (b - t)).ln())
        })
        .collect()
}

/// `a + (b - a) / (1 + exp(-phi))`, kept strictly inside `(a, b)`.
pub fn from_unconstrained(phi: &[f64], bounds: &[(f64, f64)]) -> Vec<f64> {
    phi.iter()
        .zip(bounds)
        .map(|(&f, &(a, b))| {
            let t = a + (b - a) / (1.0 + (-f).exp());
            t.clamp(a.next_up(), b.next_down())
        })
        .collect()
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log |d theta / d phi|` up to the constant `log(b - a)`.
pub fn log_jacobian(phi: f64) -> f64 {
    phi - 2.0 * softplus(phi)
}

/// Log acceptance ratio of a move `phi_old -> phi_new`.
pub fn log_accept_ratio(loglik_new: f64, loglik_old: f64, phi_new: &[f64], phi_old: &[f64]) -> f64 {
    let jac: f64 = phi_new
        .iter()
        .zip(phi_old)
        .map(|(&pn, &po)| (pn - po) + 2.0 * (softplus(po) - softplus(pn)))
        .sum();
    (loglik_new - loglik_old) + jac
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhConfig {
    /// Random-walk covariance in the unconstrained coordinates.
    pub proposal_cov: DMatrix<f64>,
    pub burn_in: usize,
    pub n_required: usize,
    /// Starting point; the box midpoint when absent.
    pub init: Option<Vec<f64>>,
    pub bounds: Vec<(f64, f64)>,
    pub seed: u64,
    /// Re-evaluate the current point's likelihood at every step instead of
    /// reusing the stored estimate.
    pub recompute_current: bool,
}

impl MhConfig {
    pub fn new(bounds: Vec<(f64, f64)>, proposal_sd: f64, seed: u64) -> Self {
        let d = bounds.len();
        Self {
            proposal_cov: DMatrix::identity(d, d) * proposal_sd * proposal_sd,
            burn_in: 2000,
            n_required: 8000,
            init: None,
            bounds,
            seed,
            recompute_current: false,
        }
    }

    pub fn len(&self) -> usize {
        self.burn_in + self.n_required
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn initial_theta(&self) -> Vec<f64> {
        self.init
            .clone()
            .unwrap_or_else(|| self.bounds.iter().map(|&(a, b)| 0.5 * (a + b)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        check_bounds(&self.bounds)?;
        let d = self.bounds.len();
        if d == 0 {
            return Err(Error::InvalidSpec("no parameters to sample".into()));
        }
        if self.n_required == 0 {
            return Err(Error::InvalidSpec(
                "need at least one post-burn-in draw".into(),
            ));
        }
        if self.proposal_cov.shape() != (d, d) {
            return Err(Error::Shape(format!("proposal covariance must be {d}x{d}")));
        }
        if (&self.proposal_cov - self.proposal_cov.transpose()).amax()
            > 1e-12 * self.proposal_cov.amax().max(1.0)
            || self.proposal_cov.clone().cholesky().is_none()
        {
            return Err(Error::InvalidSpec(
                "proposal covariance must be symmetric positive definite".into(),
            ));
        }
        to_unconstrained(&self.initial_theta(), &self.bounds).map(|_| ())
    }
}

/// A recorded likelihood failure at a proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodFailure {
    pub step: usize,
    pub category: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    /// One row per step, the initial point first.
    pub draws: Vec<Vec<f64>>,
    pub accepted: Vec<bool>,
    pub log_lik: Vec<f64>,
    pub failures: Vec<LikelihoodFailure>,
    pub burn_in: usize,
}

impl MarkovChain {
    /// Post-burn-in mean.
    pub fn estimate(&self) -> Result<Vec<f64>> {
        let kept = self.draws.get(self.burn_in..).unwrap_or(&[]);
        let Some(first) = kept.first() else {
            return Err(Error::InvalidSpec("chain has no post-burn-in draws".into()));
        };
        let mut mean = vec![0.0; first.len()];
        for d in kept {
            for (m, v) in mean.iter_mut().zip(d) {
                *m += v;
            }
        }
        let n = kept.len() as f64;
        Ok(mean.into_iter().map(|m| m / n).collect())
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.accepted.len() <= 1 {
            return 0.0;
        }
        self.accepted[1..].iter().filter(|&&a| a).count() as f64 / (self.accepted.len() - 1) as f64
    }

    /// `t,theta_1..theta_d,log_lik,accepted` with `t` starting at 1.
    pub fn to_csv(&self) -> String {
        let d = self.draws.first().map_or(0, Vec::len);
        let mut s = String::from("t");
        for j in 1..=d {
            let _ = write!(s, ",theta_{j}");
        }
        s.push_str(",log_lik,accepted\n");
        for (t, ((row, ll), acc)) in self
            .draws
            .iter()
            .zip(&self.log_lik)
            .zip(&self.accepted)
            .enumerate()
        {
            let _ = write!(s, "{}", t + 1);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{ll},{}", u8::from(*acc));
        }
        s
    }
}

fn likelihood_seed(seed: u64, t: usize, which: u64) -> u64 {
    rng::derive_seed(seed, &[rng::tags::LIKELIHOOD, t as u64, which])
}

/// Runs one chain. `loglik(theta, seed)` receives a fresh seed at every call.
pub fn run_chain<F>(cfg: &MhConfig, mut loglik: F) -> Result<(MarkovChain, Vec<f64>)>
where
    F: FnMut(&[f64], u64) -> Result<f64>,
{
    cfg.validate()?;
    let d = cfg.bounds.len();
    let chol = cfg
        .proposal_cov
        .clone()
        .cholesky()
        .expect("validated SPD")
        .unpack();
    let mut rng = rng::derived_stream(cfg.seed, &[rng::tags::PROPOSAL]);

    let mut theta = cfg.initial_theta();
    let mut phi = to_unconstrained(&theta, &cfg.bounds)?;
    let mut ll = loglik(&theta, likelihood_seed(cfg.seed, 0, 0))?;
    if !ll.is_finite() {
        return Err(Error::NonFinite(format!(
            "log-likelihood {ll} at the initial point {theta:?}"
        )));
    }
    let total = cfg.len();
    let mut chain = MarkovChain {
        draws: Vec::with_capacity(total),
        accepted: Vec::with_capacity(total),
        log_lik: Vec::with_capacity(total),
        failures: Vec::new(),
        burn_in: cfg.burn_in,
    };
    chain.draws.push(theta.clone());
    chain.accepted.push(true);
    chain.log_lik.push(ll);

    for t in 1..total {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let step = &chol * z;
        let phi_new: Vec<f64> = phi.iter().zip(step.iter()).map(|(p, s)| p + s).collect();
        let theta_new = from_unconstrained(&phi_new, &cfg.bounds);
        let u: f64 = rng.random();

        let proposal = match loglik(&theta_new, likelihood_seed(cfg.seed, t, 0)) {
            Ok(v) if !v.is_nan() => Some(v),
            Ok(v) => {
                chain.failures.push(LikelihoodFailure {
                    step: t,
                    category: "non-finite",
                    message: format!("log-likelihood {v}"),
                });
                None
            }
            Err(e) => {
                chain.failures.push(LikelihoodFailure {
                    step: t,
                    category: e.category(),
                    message: e.to_string(),
                });
                None
            }
        };
        if cfg.recompute_current {
            if let Ok(v) = loglik(&theta, likelihood_seed(cfg.seed, t, 1)) {
                if v.is_finite() {
                    ll = v;
                }
            }
        }
        let accept = match proposal {
            Some(ll_new) if ll_new > f64::NEG_INFINITY => {
                log_accept_ratio(ll_new, ll, &phi_new, &phi) > u.ln()
            }
            _ => false,
        };
        if accept {
            theta = theta_new;
            phi = phi_new;
            ll = proposal.expect("accepted proposals have a likelihood");
        }
        chain.draws.push(theta.clone());
        chain.accepted.push(accept);
        chain.log_lik.push(ll);
    }
    let est = chain.estimate()?;
    Ok((chain, est))
}

/// Average of the per-chain post-burn-in means.
pub fn cme_estimate(chains: &[MarkovChain]) -> Result<Vec<f64>> {
    let Some(first) = chains.first() else {
        return Err(Error::InvalidSpec("no chains to pool".into()));
    };
    let mut mean = first.estimate()?;
    for c in &chains[1..] {
        for (m, v) in mean.iter_mut().zip(c.estimate()?) {
            *m += v;
        }
    }
    let k = chains.len() as f64;
    Ok(mean.into_iter().map(|m| m / k).collect())
}

/// Runs `n_chains` independent chains in parallel; chain `c` uses the seed
/// derived from `(cfg.seed, c)`.
pub fn run_chains<F>(cfg: &MhConfig, n_chains: usize, loglik: F) -> Result<Vec<MarkovChain>>
where
    F: Fn(&[f64], u64) -> Result<f64> + Sync,
{
    if n_chains == 0 {
        return Err(Error::InvalidSpec("need at least one chain".into()));
    }
    (0..n_chains)
        .into_par_iter()
        .map(|c| {
            let mut chain_cfg = cfg.clone();
            chain_cfg.seed = rng::derive_seed(cfg.seed, &[c as u64]);
            run_chain(&chain_cfg, &loglik).map(|(ch, _)| ch)
        })
        .collect()
}

/// Scales a diagonal proposal with short pilot runs towards `target`
/// acceptance; returns the covariance and the last pilot's rate.
pub fn tune_proposal<F>(
    cfg: &MhConfig,
    mut loglik: F,
    pilot_steps: usize,
    rounds: usize,
    target: f64,
) -> Result<(DMatrix<f64>, f64)>
where
    F: FnMut(&[f64], u64) -> Result<f64>,
{
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidSpec(format!(
            "target acceptance {target} must lie in (0, 1)"
        )));
    }
    let mut pilot = cfg.clone();
    pilot.burn_in = 0;
    pilot.n_required = pilot_steps.max(2);
    let mut rate = 0.0;
    for round in 0..rounds.max(1) {
        pilot.seed = rng::derive_seed(cfg.seed, &[rng::tags::PROPOSAL, round as u64]);
        let (chain, _) = run_chain(&pilot, &mut loglik)?;
        rate = chain.acceptance_rate();
        // Multiplicative Robbins-Monro style step on the log scale.
        let factor = ((rate - target) * 2.0).exp().clamp(0.25, 4.0);
        pilot.proposal_cov *= factor * factor;
        // Restart from the pilot's end point, which is already near the mass.
        pilot.init = chain.draws.last().cloned();
    }
    Ok((pilot.proposal_cov, rate))
}

/// Conditional-mean estimate of growth-model parameters for one signal:
/// chains over the particle-filter likelihood.
pub fn growth_cme(
    spec: &GrowthModelSpec,
    y: &[f64],
    cfg: &MhConfig,
    n_particles: usize,
    n_chains: usize,
) -> Result<(Vec<f64>, Vec<MarkovChain>)> {
    if cfg.bounds.len() != spec.dim() {
        return Err(Error::Shape(format!(
            "{} bounds for {} free parameters",
            cfg.bounds.len(),
            spec.dim()
        )));
    }
    PfConfig::new(n_particles, 0)?;
    let chains = run_chains(cfg, n_chains, |theta, seed| {
        growth_loglik(
            spec,
            theta,
            y,
            &PfConfig {
                n_particles,
                resampling: crate::smc::Resampling::Systematic,
                seed,
            },
        )
    })?;
    Ok((cme_estimate(&chains)?, chains))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    #[test]
    fn transform_examples() {
        assert_eq!(to_unconstrained(&[0.5], &[(0.0, 1.0)]).unwrap(), vec![0.0]);
        assert_relative_eq!(
            to_unconstrained(&[2.5], &[(-1.0, 6.0)]).unwrap()[0],
            0.0,
            epsilon = 1e-15
        );
        assert_eq!(from_unconstrained(&[0.0], &[(0.0, 1.0)]), vec![0.5]);
        assert_relative_eq!(
            from_unconstrained(&[9f64.ln()], &[(0.0, 1.0)])[0],
            0.9,
            epsilon = 1e-15
        );
        let hi = from_unconstrained(&[800.0], &[(0.0, 1.0)])[0];
        assert!(hi < 1.0 && hi > 1.0 - 1e-15);
        let lo = from_unconstrained(&[-800.0], &[(0.0, 1.0)])[0];
        assert!(lo > 0.0 && lo < 1e-300);
        assert!(matches!(
            to_unconstrained(&[1.0], &[(0.0, 1.0)]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            to_unconstrained(&[-0.1], &[(0.0, 1.0)]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn accept_ratio_examples() {
        assert_eq!(
            log_accept_ratio(-3.0, -3.0, &[0.4, -1.0], &[0.4, -1.0]),
            0.0
        );
        assert_eq!(log_accept_ratio(-1.0, -3.5, &[0.4], &[0.4]), 2.5);
    }

    fn numeric_log_jacobian(phi: f64, bounds: (f64, f64)) -> f64 {
        // Five-point stencil.
        let h = 1e-3;
        let f = |p: f64| from_unconstrained(&[p], &[bounds])[0];
        ((-f(phi + 2.0 * h) + 8.0 * f(phi + h) - 8.0 * f(phi - h) + f(phi - 2.0 * h)) / (12.0 * h))
            .ln()
    }

    #[test]
    fn constant_likelihood_accepts_jacobian_uphill_moves() {
        let cfg = MhConfig {
            burn_in: 0,
            n_required: 3000,
            ..MhConfig::new(vec![(0.0, 1.0)], 1.5, 3)
        };
        // The first call evaluates the initial point, so index t holds proposal t.
        let mut proposals = Vec::new();
        let (chain, _) = run_chain(&cfg, |t, _| {
            proposals.push(t[0]);
            Ok(0.0)
        })
        .unwrap();
        let phi = |t: f64| to_unconstrained(&[t], &cfg.bounds).unwrap()[0];
        let mut uphill = 0;
        for t in 1..chain.draws.len() {
            if log_jacobian(phi(proposals[t])) >= log_jacobian(phi(chain.draws[t - 1][0])) {
                assert!(chain.accepted[t], "step {t}");
                uphill += 1;
            }
        }
        assert!(uphill > 100);
    }

    fn quadrature_target() -> (Vec<f64>, impl Fn(f64) -> f64) {
        let mut r = rng::stream(77);
        let y: Vec<f64> = (0..20)
            .map(|_| 0.5 + 0.1 * r.sample::<f64, _>(StandardNormal))
            .collect();
        let obs = y.clone();
        (y, move |t: f64| {
            obs.iter()
                .map(|&v| -(v - t).powi(2) / (2.0 * 0.01))
                .sum::<f64>()
        })
    }

    #[test]
    fn bounded_posterior_mean_matches_quadrature() {
        let (_, ll) = quadrature_target();
        let grid = 10_000;
        let (mut z, mut m) = (0.0, 0.0);
        let lmax = ll(0.5);
        for i in 0..grid {
            let t = (i as f64 + 0.5) / grid as f64;
            let w = (ll(t) - lmax).exp();
            z += w;
            m += w * t;
        }
        let cfg = MhConfig {
            burn_in: 1000,
            n_required: 20_000,
            ..MhConfig::new(vec![(0.0, 1.0)], 0.2, 5)
        };
        let (chain, est) = run_chain(&cfg, |t, _| Ok(ll(t[0]))).unwrap();
        assert!((est[0] - m / z).abs() < 0.01, "{} vs {}", est[0], m / z);
        assert!(chain.draws.iter().all(|d| d[0] > 0.0 && d[0] < 1.0));
        let rate = chain.acceptance_rate();
        assert!(rate > 0.1 && rate < 0.9, "{rate}");
    }

    #[test]
    fn failures_are_rejections() {
        let cfg = MhConfig {
            burn_in: 5,
            n_required: 50,
            ..MhConfig::new(vec![(0.0, 2.0)], 0.5, 1)
        };
        let (chain, est) = run_chain(&cfg, |t, _| {
            if t[0] > 1.2 {
                Err(Error::DegenerateFilter { step: 3 })
            } else {
                Ok(0.0)
            }
        })
        .unwrap();
        assert!(!chain.failures.is_empty());
        assert!(chain
            .failures
            .iter()
            .all(|f| f.category == "degenerate-filter" && !chain.accepted[f.step]));
        assert!(chain.draws.iter().all(|d| d[0] <= 1.2));
        assert!(est[0] < 1.2);
    }

    #[test]
    fn config_validation() {
        let mut cfg = MhConfig::new(vec![(0.0, 1.0)], 0.1, 0);
        cfg.init = Some(vec![1.0]);
        assert!(matches!(cfg.validate(), Err(Error::Domain(_))));
        let mut cfg = MhConfig::new(vec![(0.0, 1.0)], 0.1, 0);
        cfg.proposal_cov[(0, 0)] = -1.0;
        assert!(cfg.validate().is_err());
        cfg = MhConfig::new(vec![(1.0, 1.0)], 0.1, 0);
        assert!(cfg.validate().is_err());
        assert!(
            run_chain(&MhConfig::new(vec![(0.0, 1.0)], 0.1, 0), |_, _| Ok(
                f64::NEG_INFINITY
            ))
            .is_err()
        );
    }

    #[test]
    fn pooling_rules() {
        let chain = |v: f64| MarkovChain {
            draws: vec![vec![9.0], vec![v], vec![v]],
            accepted: vec![true; 3],
            log_lik: vec![0.0; 3],
            failures: vec![],
            burn_in: 1,
        };
        assert_eq!(cme_estimate(&[chain(0.3)]).unwrap(), vec![0.3]);
        assert_eq!(cme_estimate(&[chain(0.2), chain(0.6)]).unwrap(), vec![0.4]);
        let mut empty = chain(0.1);
        empty.burn_in = 3;
        assert!(cme_estimate(&[empty]).is_err());
        assert!(cme_estimate(&[]).is_err());

        let cfg = MhConfig {
            burn_in: 10,
            n_required: 40,
            ..MhConfig::new(vec![(0.0, 1.0)], 0.3, 2)
        };
        let (single, est) = run_chain(&cfg, |t, _| Ok(-t[0])).unwrap();
        assert_eq!(cme_estimate(&[single]).unwrap(), est);
    }

    #[test]
    fn chains_are_reproducible_and_csv_has_every_step() {
        let cfg = MhConfig {
            burn_in: 2,
            n_required: 10,
            ..MhConfig::new(vec![(0.0, 1.0), (1.0, 3.0)], 0.3, 8)
        };
        let a = run_chains(&cfg, 2, |t, _| Ok(-(t[0] - 0.3).powi(2) - t[1])).unwrap();
        let b = run_chains(&cfg, 2, |t, _| Ok(-(t[0] - 0.3).powi(2) - t[1])).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].draws, a[1].draws);
        let csv = a[0].to_csv();
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.starts_with("t,theta_1,theta_2,log_lik,accepted\n1,0.5,2,"));
    }

    #[test]
    fn tuning_moves_towards_target() {
        let (_, ll) = quadrature_target();
        let cfg = MhConfig::new(vec![(0.0, 1.0)], 5.0, 4);
        let (cov, rate) = tune_proposal(&cfg, |t, _| Ok(ll(t[0])), 500, 8, 0.3).unwrap();
        assert!(cov[(0, 0)] < 25.0);
        assert!(rate > 0.1 && rate < 0.6, "{rate}");
    }

    #[test]
    fn recompute_mode_runs() {
        let cfg = MhConfig {
            burn_in: 10,
            n_required: 100,
            recompute_current: true,
            ..MhConfig::new(vec![(0.0, 1.0)], 0.3, 2)
        };
        let calls = std::cell::Cell::new(0);
        run_chain(&cfg, |t, _| {
            calls.set(calls.get() + 1);
            Ok(-t[0])
        })
        .unwrap();
        assert_eq!(calls.get(), 1 + 2 * 109);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn roundtrip(a in -5.0f64..5.0, w in 0.01f64..10.0, frac in 0.001f64..0.999) {
            let b = a + w;
            let t = a + frac * w;
            let back = from_unconstrained(&to_unconstrained(&[t], &[(a, b)]).unwrap(), &[(a, b)])[0];
            prop_assert!((back - t).abs() < 1e-12);
        }

        #[test]
        fn jacobian_bracket_is_log_derivative_difference(pn in -2.5f64..2.5, po in -2.5f64..2.5, a in -1.0f64..1.0, w in 0.5f64..2.0) {
            let bounds = (a, a + w);
            let bracket = log_accept_ratio(0.0, 0.0, &[pn], &[po]);
            let numeric = numeric_log_jacobian(pn, bounds) - numeric_log_jacobian(po, bounds);
            prop_assert!((bracket - numeric).abs() < 1e-10, "{} vs {}", bracket, numeric);
            prop_assert!((log_jacobian(pn) - log_jacobian(po) - bracket).abs() < 1e-12);
        }

        #[test]
        fn draws_stay_inside_the_box(seed in 0u64..500, sd in 0.1f64..20.0) {
            let cfg = MhConfig { burn_in: 0, n_required: 200, ..MhConfig::new(vec![(-1.0, 0.5), (2.0, 2.001)], sd, seed) };
            let (chain, _) = run_chain(&cfg, |t, _| Ok(-50.0 * t[0] * t[0])).unwrap();
            for d in &chain.draws {
                prop_assert!(d[0] > -1.0 && d[0] < 0.5 && d[1] > 2.0 && d[1] < 2.001);
            }
        }
    }
}
