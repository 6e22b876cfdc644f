use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, early_stop_update, lr_schedule, AdamState, EarlyStopState};
use super::{init_weights, CellKind, RnnConfig, RnnWeights};
use crate::dataset::SignalRecord;
use crate::error::{Error, Result};
use crate::rng::{derived_stream, tags};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub decay_factor: f64,
    pub patience: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub input_transform: InputTransform,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta0: 1e-3,
            epochs: 300,
            batch_size: 128,
            decay_factor: 0.9,
            patience: 3,
            tolerance: 5e-3,
            seed: 0,
            clip_norm: Some(10.0),
            input_transform: InputTransform::Affine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return bad("eta0 must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        Ok(())
    }
}

/// Pointwise map applied to each observation before standardization.
///
/// `Asinh` is linear near zero and logarithmic in the tails, which keeps
/// small-amplitude structure visible when the signal spans several orders of
/// magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputTransform {
    #[default]
    Affine,
    Asinh,
}

impl InputTransform {
    fn map(self, v: f64) -> f64 {
        match self {
            InputTransform::Affine => v,
            InputTransform::Asinh => v.asinh(),
        }
    }
}

/// Input standardization fitted on the training signals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    #[serde(default)]
    pub transform: InputTransform,
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            transform: InputTransform::Affine,
            mean: 0.0,
            std: 1.0,
        }
    }

    pub fn fit(records: &[SignalRecord]) -> Self {
        Self::fit_with(records, InputTransform::Affine)
    }

    pub fn fit_with(records: &[SignalRecord], transform: InputTransform) -> Self {
        let mut n = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for v in records.iter().flat_map(|r| r.y.iter()) {
            let v = transform.map(*v);
            n += 1;
            let d = v - mean;
            mean += d / n as f64;
            m2 += d * (v - mean);
        }
        let std = if n > 0 { (m2 / n as f64).sqrt() } else { 0.0 };
        let std = if std > 0.0 && std.is_finite() { std } else { 1.0 };
        Normalization { transform, mean, std }
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .map(|v| (self.transform.map(*v) - self.mean) / self.std)
            .collect()
    }
}

/// Trained network plus the input standardization it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnModel {
    pub weights: RnnWeights,
    pub normalization: Normalization,
}

impl RnnModel {
    pub fn predict(&self, y: &[f64]) -> Result<Vec<f64>> {
        let out = self.weights.forward(&self.normalization.apply(y))?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopped { epoch: usize },
    Completed,
    Diverged { epoch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: RnnModel,
    pub train_config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub initial_val_loss: f64,
}

impl Checkpoint {
    pub fn stopped_epoch(&self) -> Option<usize> {
        match self.stop {
            StopReason::EarlyStopped { epoch } => Some(epoch),
            _ => None,
        }
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,eta\n");
        for r in &self.history {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.eta
            ));
        }
        s
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    serde_json::to_vec(c).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    #[derive(Deserialize)]
    struct Probe {
        format_version: u32,
    }
    let probe: Probe = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    if probe.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: probe.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let c: Checkpoint = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let w = &c.model.weights;
    RnnWeights::from_params(w.config, w.params.clone())?;
    c.train_config.validate()?;
    Ok(c)
}

pub fn write_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_checkpoint(c)?)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

struct Prepared<'a> {
    inputs: Vec<Vec<f64>>,
    targets: Vec<&'a [f64]>,
}

impl<'a> Prepared<'a> {
    fn new(records: &'a [SignalRecord], norm: &Normalization) -> Self {
        Prepared {
            inputs: records.iter().map(|r| norm.apply(&r.y)).collect(),
            targets: records.iter().map(|r| r.theta.as_slice()).collect(),
        }
    }

    fn batch(&self, idx: &[usize]) -> Vec<(&[f64], &[f64])> {
        idx.iter()
            .map(|&i| (self.inputs[i].as_slice(), self.targets[i]))
            .collect()
    }

    fn all(&self) -> Vec<(&[f64], &[f64])> {
        self.inputs
            .iter()
            .map(|x| x.as_slice())
            .zip(self.targets.iter().copied())
            .collect()
    }
}

fn finite_loss(w: &RnnWeights, data: &Prepared) -> Option<f64> {
    w.batch_loss(&data.all()).ok().filter(|l| l.is_finite())
}

/// Mini-batch Adam training with step-wise decay and early stopping.
///
/// Returns the weights saved by the stopping rule: the current weights when
/// the rule fires, otherwise those with the lowest validation loss. A
/// non-finite loss ends training and returns the last finite best weights.
pub fn train(
    train_set: &[SignalRecord],
    val_set: &[SignalRecord],
    rnn: RnnConfig,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    rnn.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidParameter(
            "training and validation sets must be nonempty".into(),
        ));
    }
    for r in train_set.iter().chain(val_set) {
        if r.theta.len() != rnn.output_dim {
            return Err(Error::Shape(format!(
                "record has {} parameters, network outputs {}",
                r.theta.len(),
                rnn.output_dim
            )));
        }
    }
    let norm = Normalization::fit_with(train_set, cfg.input_transform);
    let tr = Prepared::new(train_set, &norm);
    let va = Prepared::new(val_set, &norm);

    let mut weights = init_weights(rnn, cfg.seed)?;
    let initial_val_loss = finite_loss(&weights, &va)
        .ok_or_else(|| Error::NonFinite("validation loss at initialization".into()))?;
    let mut best = weights.clone();
    let mut adam = AdamState::new(weights.params.len());
    let mut stop_state = EarlyStopState::new();
    let mut history = Vec::new();
    let mut stop = StopReason::Completed;
    let mut order: Vec<usize> = (0..tr.inputs.len()).collect();

    'epochs: for epoch in 1..=cfg.epochs {
        let eta = lr_schedule(cfg.eta0, cfg.decay_factor, cfg.epochs, epoch)?;
        order.sort_unstable();
        order.shuffle(&mut derived_stream(
            cfg.seed,
            &[tags::SHUFFLE, epoch as u64],
        ));
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let step = weights
                .loss_and_grad(&tr.batch(idx))
                .and_then(|(loss, grad)| {
                    adam_step(&mut adam, &mut weights.params, &grad, eta, cfg.clip_norm)?;
                    Ok(loss)
                });
            match step {
                Ok(loss) => sum += loss * idx.len() as f64,
                Err(Error::NonFinite(_)) => {
                    stop = StopReason::Diverged { epoch };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = sum / order.len() as f64;
        let Some(val_loss) = finite_loss(&weights, &va).filter(|_| train_loss.is_finite()) else {
            stop = StopReason::Diverged { epoch };
            break;
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            eta,
        });
        let improved = val_loss < stop_state.best_val_loss;
        let fire = early_stop_update(
            &mut stop_state,
            val_loss,
            epoch,
            cfg.patience,
            cfg.tolerance,
        );
        if improved || fire {
            best.params.copy_from_slice(&weights.params);
        }
        if fire {
            stop = StopReason::EarlyStopped { epoch };
            break;
        }
    }

    let (best_epoch, best_val_loss) = if stop_state.best_epoch == 0 {
        (0, initial_val_loss)
    } else {
        (stop_state.best_epoch, stop_state.best_val_loss)
    };
    Ok(Checkpoint {
        format_version: CHECKPOINT_VERSION,
        model: RnnModel {
            weights: best,
            normalization: norm,
        },
        train_config: cfg.clone(),
        history,
        stop,
        best_epoch,
        best_val_loss,
        initial_val_loss,
    })
}

/// One row of a hyperparameter search report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config: RnnConfig,
    pub n_params: usize,
    pub train_mse: Option<f64>,
    pub val_mse: Option<f64>,
    pub epochs_run: usize,
    pub error: Option<String>,
}

/// The layer, width and dense-size combinations searched for one cell type.
pub fn default_grid(cell: CellKind, output_dim: usize) -> Vec<RnnConfig> {
    let mut g = Vec::new();
    for layers in [1, 2] {
        for hidden in [30, 40, 50, 60] {
            for dense in [32, 40] {
                g.push(RnnConfig::new(cell, layers, hidden, dense, output_dim));
            }
        }
    }
    g
}

/// Trains every configuration on the same data and seed and ranks them by
/// validation MSE, breaking ties by parameter count. Failed cells are kept
/// at the bottom of the report with their error message.
pub fn grid_search(
    grid: &[RnnConfig],
    train_set: &[SignalRecord],
    val_set: &[SignalRecord],
    cfg: &TrainConfig,
) -> Result<(Vec<GridRow>, Option<Checkpoint>)> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty configuration grid".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    let mut winner: Option<(f64, usize, Checkpoint)> = None;
    for &config in grid {
        let n_params = config.n_params();
        let outcome = train(train_set, val_set, config, cfg).and_then(|c| {
            if let StopReason::Diverged { epoch } = c.stop {
                return Err(Error::Diverged { epoch });
            }
            let tr = Prepared::new(train_set, &c.model.normalization);
            let va = Prepared::new(val_set, &c.model.normalization);
            let w = &c.model.weights;
            Ok((w.batch_loss(&tr.all())?, w.batch_loss(&va.all())?, c))
        });
        match outcome {
            Ok((train_mse, val_mse, c)) => {
                let better = winner
                    .as_ref()
                    .is_none_or(|w| (val_mse, n_params) < (w.0, w.1));
                rows.push(GridRow {
                    config,
                    n_params,
                    train_mse: Some(train_mse),
                    val_mse: Some(val_mse),
                    epochs_run: c.history.len(),
                    error: None,
                });
                if better {
                    winner = Some((val_mse, n_params, c));
                }
            }
            Err(e) => rows.push(GridRow {
                config,
                n_params,
                train_mse: None,
                val_mse: None,
                epochs_run: 0,
                error: Some(format!("error[{}]: {e}", e.category())),
            }),
        }
    }
    rows.sort_by(|a, b| {
        let ka = (a.val_mse.is_none(), a.val_mse.unwrap_or(0.0), a.n_params);
        let kb = (b.val_mse.is_none(), b.val_mse.unwrap_or(0.0), b.n_params);
        ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok((rows, winner.map(|w| w.2)))
}
