//! TOML schemas for every subcommand.
//!
//! Unknown keys are rejected everywhere so that a typo never silently falls
//! back to a default.

use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sysid::drives::WienerParams;
use sysid::models::{GrowthModelSpec, InputKind, InputSignal, ModelSpec};
use sysid::prior::PriorSpec;
use sysid::rnn::{CellKind, InputTransform, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    M1 {
        n: usize,
    },
    M2 {
        n: usize,
    },
    Fir {
        order: usize,
        n: usize,
        noise_var: f64,
        #[serde(default)]
        input_seed: u64,
    },
    Drives {
        n: usize,
        dt: f64,
        #[serde(default = "default_prbs_amplitude")]
        amplitude: f64,
        #[serde(default = "default_prbs_hold")]
        hold: usize,
        #[serde(default)]
        input_seed: u64,
    },
}

fn default_prbs_amplitude() -> f64 {
    1.0
}

fn default_prbs_hold() -> usize {
    10
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec, CliError> {
        let spec = match self {
            ModelConfig::M1 { n } => ModelSpec::Growth(GrowthModelSpec::m1(*n)),
            ModelConfig::M2 { n } => ModelSpec::Growth(GrowthModelSpec::m2(*n)),
            ModelConfig::Fir { order, n, noise_var, input_seed } => ModelSpec::Fir {
                order: *order,
                noise_var: *noise_var,
                input: InputSignal::uniform01(*n, *input_seed),
            },
            ModelConfig::Drives { n, dt, amplitude, hold, input_seed } => ModelSpec::Drives {
                dt: *dt,
                input: InputSignal {
                    kind: InputKind::Prbs,
                    n: *n,
                    amplitude: *amplitude,
                    hold: *hold,
                    seed: *input_seed,
                },
            },
        };
        spec.validate().map_err(|e| CliError::schema("model", e.to_string()))?;
        Ok(spec)
    }

    pub fn default_prior(&self) -> Option<PriorSpec> {
        match self {
            ModelConfig::M1 { .. } => Some(PriorSpec::m1()),
            ModelConfig::M2 { .. } => Some(PriorSpec::m2()),
            _ => None,
        }
    }

    pub fn growth(&self) -> Option<GrowthModelSpec> {
        match self {
            ModelConfig::M1 { n } => Some(GrowthModelSpec::m1(*n)),
            ModelConfig::M2 { n } => Some(GrowthModelSpec::m2(*n)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    Uniform {
        bounds: Vec<(f64, f64)>,
        #[serde(default)]
        variance: Vec<bool>,
    },
    Gaussian {
        mean: Vec<f64>,
        covariance: Vec<Vec<f64>>,
    },
}

impl PriorConfig {
    pub fn build(&self) -> Result<PriorSpec, CliError> {
        let r = match self {
            PriorConfig::Uniform { bounds, variance } => {
                let flags = if variance.is_empty() { vec![false; bounds.len()] } else { variance.clone() };
                PriorSpec::uniform(bounds, &flags)
            }
            PriorConfig::Gaussian { mean, covariance } => {
                let d = mean.len();
                if covariance.len() != d || covariance.iter().any(|r| r.len() != d) {
                    return Err(CliError::schema("prior.covariance", format!("must be {d}x{d}")));
                }
                let cov = DMatrix::from_fn(d, d, |i, j| covariance[i][j]);
                PriorSpec::gaussian(mean.clone(), &cov)
            }
        };
        r.map_err(|e| CliError::schema("prior", e.to_string()))
    }
}

/// Resolves the prior: explicit section first, model default otherwise.
pub fn resolve_prior(model: &ModelConfig, prior: &Option<PriorConfig>) -> Result<PriorSpec, CliError> {
    match prior {
        Some(p) => p.build(),
        None => model
            .default_prior()
            .ok_or_else(|| CliError::schema("prior", "required for this model kind".into())),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub model: ModelConfig,
    pub prior: Option<PriorConfig>,
    pub p: usize,
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dataset_name")]
    pub output: String,
}

fn default_dataset_name() -> String {
    "dataset.ndjson".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub input: PathBuf,
    pub ratio: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_train_name")]
    pub train_output: String,
    #[serde(default = "default_val_name")]
    pub val_output: String,
}

fn default_train_name() -> String {
    "train.ndjson".into()
}

fn default_val_name() -> String {
    "val.ndjson".into()
}

/// Training options; anything left out takes the library default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub eta0: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub decay_factor: Option<f64>,
    pub patience: Option<usize>,
    pub tolerance: Option<f64>,
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub no_clip: bool,
    pub input_transform: Option<InputTransform>,
}

impl TrainingSection {
    pub fn resolve(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            eta0: self.eta0.unwrap_or(d.eta0),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            decay_factor: self.decay_factor.unwrap_or(d.decay_factor),
            patience: self.patience.unwrap_or(d.patience),
            tolerance: self.tolerance.unwrap_or(d.tolerance),
            seed,
            clip_norm: if self.no_clip { None } else { self.clip_norm.or(d.clip_norm) },
            input_transform: self.input_transform.unwrap_or(d.input_transform),
        };
        cfg.validate().map_err(|e| CliError::schema("training", e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RnnSection {
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    pub dense: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub train: PathBuf,
    pub val: PathBuf,
    pub rnn: RnnSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_checkpoint_name")]
    pub checkpoint: String,
    #[serde(default = "default_history_name")]
    pub history: String,
}

fn default_checkpoint_name() -> String {
    "model.json".into()
}

fn default_history_name() -> String {
    "history.csv".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub train: PathBuf,
    pub val: PathBuf,
    pub cell: CellKind,
    #[serde(default = "default_layers")]
    pub layers: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_dense")]
    pub dense: Vec<usize>,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_grid_name")]
    pub report: String,
    #[serde(default = "default_best_name")]
    pub checkpoint: String,
}

fn default_layers() -> Vec<usize> {
    vec![1, 2]
}

fn default_hidden() -> Vec<usize> {
    vec![30, 40, 50, 60]
}

fn default_dense() -> Vec<usize> {
    vec![32, 40]
}

fn default_grid_name() -> String {
    "grid.csv".into()
}

fn default_best_name() -> String {
    "best.json".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MhSection {
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_n_required")]
    pub n_required: usize,
    #[serde(default = "default_proposal_sd")]
    pub proposal_sd: f64,
    #[serde(default = "default_particles")]
    pub n_particles: usize,
    #[serde(default = "default_chains")]
    pub n_chains: usize,
    /// Search box; defaults to the prior support.
    pub bounds: Option<Vec<(f64, f64)>>,
}

fn default_burn_in() -> usize {
    2000
}

fn default_n_required() -> usize {
    8000
}

fn default_proposal_sd() -> f64 {
    0.5
}

fn default_particles() -> usize {
    500
}

fn default_chains() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub model: ModelConfig,
    pub prior: Option<PriorConfig>,
    pub theta0: Option<Vec<f64>>,
    #[serde(default = "default_k_test")]
    pub k_test: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
    #[serde(default = "yes")]
    pub prior_baseline: bool,
    /// A fixed estimate reported as an extra method (useful as a dummy).
    pub constant: Option<Vec<f64>>,
    pub mh: Option<MhSection>,
    #[serde(default = "default_eval_name")]
    pub report: String,
    #[serde(default = "default_estimates_name")]
    pub estimates: String,
}

fn default_k_test() -> usize {
    sysid::evaluation::DEFAULT_K_TEST
}

fn yes() -> bool {
    true
}

fn default_eval_name() -> String {
    "eval.csv".into()
}

fn default_estimates_name() -> String {
    "estimates.csv".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSection {
    #[serde(default = "default_pilot")]
    pub pilot_steps: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_target")]
    pub target: f64,
}

fn default_pilot() -> usize {
    1000
}

fn default_rounds() -> usize {
    3
}

fn default_target() -> f64 {
    0.25
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MhCmdConfig {
    pub model: ModelConfig,
    pub prior: Option<PriorConfig>,
    /// CSV file with a `y` column; when absent a signal is simulated at `theta0`.
    pub signal: Option<PathBuf>,
    pub theta0: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    pub mh: MhSection,
    pub tune: Option<TuneSection>,
    #[serde(default = "default_chain_name")]
    pub chains_output: String,
    #[serde(default = "default_mh_name")]
    pub summary: String,
}

fn default_chain_name() -> String {
    "chain.csv".into()
}

fn default_mh_name() -> String {
    "mh.csv".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearLabConfig {
    pub p_values: Option<Vec<usize>>,
    pub m_values: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
    pub n: Option<usize>,
    pub lambda_v: Option<f64>,
    pub prior: Option<PriorConfig>,
    pub theta_test: Option<Vec<f64>>,
    pub test_signals: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_linear_name")]
    pub output: String,
}

fn default_linear_name() -> String {
    "linear_lab.csv".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDrive {
    pub k: f64,
    pub alpha: f64,
    pub omega0: f64,
    pub xi: f64,
    #[serde(default)]
    pub lambda_v: f64,
    pub n: usize,
    #[serde(default = "default_prbs_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_prbs_hold")]
    pub hold: usize,
}

impl SyntheticDrive {
    pub fn params(&self) -> WienerParams {
        WienerParams { k: self.k, alpha: self.alpha, omega0: self.omega0, xi: self.xi, lambda_v: self.lambda_v }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrivesFitConfig {
    /// CSV with `u` and `y` columns; mutually exclusive with `synthetic`.
    pub data: Option<PathBuf>,
    pub synthetic: Option<SyntheticDrive>,
    pub dt: f64,
    /// Search intervals for (K, alpha, omega0, xi).
    pub search: [(f64, f64); 4],
    #[serde(default = "default_starts")]
    pub starts: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fit_name")]
    pub output: String,
    #[serde(default = "default_drives_prior_name")]
    pub prior_output: String,
}

fn default_starts() -> usize {
    16
}

fn default_fit_name() -> String {
    "drives_fit.csv".into()
}

fn default_drives_prior_name() -> String {
    "drives_prior.json".into()
}
