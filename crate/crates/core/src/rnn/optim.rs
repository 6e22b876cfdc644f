use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with optional global-norm clipping.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grad: &[f64],
    eta: f64,
    clip_norm: Option<f64>,
) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(
            "optimizer state, parameters and gradient differ in length".into(),
        ));
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let scale = match clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for i in 0..params.len() {
        let g = grad[i] * scale;
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= eta * mh / (vh.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Step-wise decay: one multiplication by `factor` at each third of the run.
pub fn lr_schedule(eta0: f64, factor: f64, epochs: usize, epoch: usize) -> Result<f64> {
    if epoch == 0 || epoch > epochs {
        return Err(Error::InvalidParameter(format!(
            "epoch {epoch} outside 1..={epochs}"
        )));
    }
    let k = 3 * (epoch - 1) / epochs;
    Ok(eta0 * factor.powi(k as i32))
}

/// Counter state for patience-based early stopping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    /// length of the current run of qualifying epochs (at least 1)
    pub j: usize,
    pub prev_val_loss: f64,
    /// last epoch whose relative change was below tolerance
    pub e_prev: usize,
    pub flag: bool,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl Default for EarlyStopState {
    fn default() -> Self {
        EarlyStopState {
            j: 1,
            prev_val_loss: f64::INFINITY,
            e_prev: 0,
            flag: false,
            best_epoch: 0,
            best_val_loss: f64::INFINITY,
        }
    }
}

impl EarlyStopState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Feeds one epoch's validation loss into the stopping rule and returns
/// whether training should stop.
///
/// An epoch qualifies when the relative change of the validation loss falls
/// below `tol`. Consecutive qualifying epochs extend the run; a qualifying
/// epoch after a gap starts a new run of length one, and a non-qualifying
/// epoch resets the counter. Training stops once the run reaches `patience`.
pub fn early_stop_update(
    state: &mut EarlyStopState,
    val_loss: f64,
    epoch: usize,
    patience: usize,
    tol: f64,
) -> bool {
    let prev = state.prev_val_loss;
    let qualifies = if prev.is_infinite() {
        false
    } else if prev == 0.0 {
        val_loss == 0.0
    } else {
        ((val_loss - prev) / prev).abs() < tol
    };
    if qualifies {
        if state.e_prev + 1 == epoch {
            state.j += 1;
        } else {
            state.j = 1;
        }
        state.e_prev = epoch;
        state.flag = state.j >= patience;
    } else {
        state.j = 1;
        state.flag = false;
    }
    state.prev_val_loss = val_loss;
    if state.flag || val_loss < state.best_val_loss {
        state.best_epoch = epoch;
        state.best_val_loss = val_loss;
    }
    state.flag
}
