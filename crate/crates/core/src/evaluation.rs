//! Test sets at a fixed true parameter, the Monte-Carlo MSE metric and
//! timing reports shared by every estimator.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mh::{growth_cme, MhConfig};
use crate::models::{GrowthModelSpec, ModelSpec, ThetaVector};
use crate::prior::PriorSpec;
use crate::rng::{derive_seed, tags};
use crate::rnn::RnnModel;

pub const DEFAULT_K_TEST: usize = 100;

/// Anything that maps an output sequence to a parameter estimate.
pub trait Estimator: Sync {
    fn name(&self) -> String;
    fn estimate(&self, y: &[f64]) -> Result<Vec<f64>>;
}

impl Estimator for RnnModel {
    fn name(&self) -> String {
        let c = self.weights.config;
        format!("rnn-{}-{}x{}-{}", c.cell, c.layers, c.hidden, c.dense)
    }

    fn estimate(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.predict(y)
    }
}

/// Data-independent estimator returning a fixed vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantEstimator {
    pub label: String,
    pub value: Vec<f64>,
}

impl Estimator for ConstantEstimator {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn estimate(&self, _y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value.clone())
    }
}

/// The estimator that ignores the data and reports the prior mean.
pub fn prior_mean_baseline(prior: &PriorSpec) -> Result<ConstantEstimator> {
    prior.validate()?;
    let value = prior.mean();
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidPrior("prior mean is not finite".into()));
    }
    Ok(ConstantEstimator { label: "prior-mean".into(), value })
}

/// Conditional-mean estimate by particle-marginal MH on the growth model.
#[derive(Debug, Clone)]
pub struct MhCmeEstimator {
    pub spec: GrowthModelSpec,
    pub mh: MhConfig,
    pub n_particles: usize,
    pub n_chains: usize,
}

impl Estimator for MhCmeEstimator {
    fn name(&self) -> String {
        "mh-cme".into()
    }

    fn estimate(&self, y: &[f64]) -> Result<Vec<f64>> {
        growth_cme(&self.spec, y, &self.mh, self.n_particles, self.n_chains).map(|r| r.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub theta0: ThetaVector,
    pub model: ModelSpec,
    pub seed: u64,
    pub signals: Vec<Vec<f64>>,
}

impl TestSet {
    /// Simulates `k` signals at `theta0`; signal `i` uses seed derive(seed, [TEST, i]).
    pub fn generate(model: &ModelSpec, theta0: ThetaVector, k: usize, seed: u64) -> Result<Self> {
        model.validate()?;
        if k == 0 {
            return Err(Error::InvalidParameter("test set needs at least one signal".into()));
        }
        if theta0.len() != model.dim() {
            return Err(Error::Shape(format!(
                "theta0 has {} entries, model expects {}",
                theta0.len(),
                model.dim()
            )));
        }
        let signals = (0..k)
            .into_par_iter()
            .map(|i| model.simulate(theta0.as_slice(), derive_seed(seed, &[tags::TEST, i as u64])))
            .collect::<Result<Vec<_>>>()?;
        Ok(TestSet { theta0, model: model.clone(), seed, signals })
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    /// Hex SHA-256 over the true parameter and every signal value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.theta0.as_slice() {
            h.update(v.to_le_bytes());
        }
        for s in &self.signals {
            h.update((s.len() as u64).to_le_bytes());
            for v in s {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Per-signal estimates; failures carry the index of the offending signal.
pub fn estimate_all(est: &dyn Estimator, test: &TestSet) -> Result<Vec<Vec<f64>>> {
    let d = test.theta0.len();
    test.signals
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let th = est.estimate(y).map_err(|e| Error::Estimator { index: i, source: Box::new(e) })?;
            if th.len() != d {
                return Err(Error::Estimator {
                    index: i,
                    source: Box::new(Error::Shape(format!("estimate has {} entries, expected {d}", th.len()))),
                });
            }
            Ok(th)
        })
        .collect()
}

/// Average squared distance between the estimates and the true parameter.
pub fn mse_at(theta0: &[f64], estimates: &[Vec<f64>]) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::InvalidParameter("no estimates".into()));
    }
    let total: f64 = estimates
        .iter()
        .map(|th| th.iter().zip(theta0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(total / estimates.len() as f64)
}

pub fn test_mse(est: &dyn Estimator, test: &TestSet) -> Result<f64> {
    mse_at(test.theta0.as_slice(), &estimate_all(est, test)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub test_mse: f64,
    pub train_seconds: f64,
    pub inference_seconds: f64,
    pub k_test: usize,
    pub fingerprint: String,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "method,test_mse,train_seconds,inference_seconds,k_test,fingerprint";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.method, self.test_mse, self.train_seconds, self.inference_seconds, self.k_test, self.fingerprint
        )
    }
}

/// Runs the estimator over the whole test set, timing the total inference.
pub fn timing_report(est: &dyn Estimator, test: &TestSet, train_seconds: f64) -> Result<EvalReport> {
    let start = Instant::now();
    let estimates = estimate_all(est, test)?;
    let inference_seconds = start.elapsed().as_secs_f64();
    Ok(EvalReport {
        method: est.name(),
        test_mse: mse_at(test.theta0.as_slice(), &estimates)?,
        train_seconds: train_seconds.max(0.0),
        inference_seconds,
        k_test: test.len(),
        fingerprint: test.fingerprint(),
    })
}

/// Default true parameter of the growth-model test sets.
pub fn default_theta0(spec: &GrowthModelSpec) -> Option<Vec<f64>> {
    use crate::models::GrowthVariant;
    match spec.variant {
        GrowthVariant::M1 => Some(crate::models::M1_THETA0.to_vec()),
        GrowthVariant::M2 => Some(crate::models::M2_THETA0.to_vec()),
        _ => None,
    }
}
