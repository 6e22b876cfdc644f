//! Many-to-one recurrent estimator.
//!
//! A stack of GRU or LSTM layers reads the (standardized) output sequence,
//! and a dense ReLU head maps the last hidden state to a parameter estimate.
//! All weights live in one flat vector so that the optimizer, checkpoints
//! and finite-difference checks treat the network as a plain point in R^n.

mod optim;
mod train;

pub use optim::{adam_step, early_stop_update, lr_schedule, AdamState, EarlyStopState};
pub use train::{
    decode_checkpoint, encode_checkpoint, grid_search, default_grid, read_checkpoint, train,
    write_checkpoint, Checkpoint, EpochRecord, GridRow, InputTransform, Normalization, RnnModel, StopReason,
    TrainConfig, CHECKPOINT_VERSION,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived_stream, tags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    /// Number of gate blocks stacked in each weight matrix.
    pub fn gates(self) -> usize {
        match self {
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RnnConfig {
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    pub dense: usize,
    pub output_dim: usize,
    #[serde(default = "one")]
    pub input_dim: usize,
}

fn one() -> usize {
    1
}

impl RnnConfig {
    pub fn new(
        cell: CellKind,
        layers: usize,
        hidden: usize,
        dense: usize,
        output_dim: usize,
    ) -> Self {
        RnnConfig {
            cell,
            layers,
            hidden,
            dense,
            output_dim,
            input_dim: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("dense", self.dense),
            ("output_dim", self.output_dim),
            ("input_dim", self.input_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidParameter(format!(
                    "rnn {name} must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn n_params(&self) -> usize {
        self.layout().total
    }
}

/// Offsets of one recurrent layer inside the flat parameter vector.
///
/// `wx` is (gates*H x in) and `wh` is (gates*H x H), both row-major. `b` has
/// gates*H entries. GRU layers carry an extra `bhn` (H) added to the
/// recurrent candidate term before the reset gate scales it.
#[derive(Debug, Clone, Copy)]
pub struct LayerLayout {
    pub input: usize,
    pub wx: usize,
    pub wh: usize,
    pub b: usize,
    pub bhn: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub layers: Vec<LayerLayout>,
    /// W_zh (dense x H)
    pub wzh: usize,
    pub bz: usize,
    /// W_thz (output x dense)
    pub wtz: usize,
    pub bt: usize,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &RnnConfig) -> Self {
        let h = cfg.hidden;
        let g = cfg.cell.gates() * h;
        let mut off = 0;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let input = if l == 0 { cfg.input_dim } else { h };
            let wx = off;
            off += g * input;
            let wh = off;
            off += g * h;
            let b = off;
            off += g;
            let bhn = match cfg.cell {
                CellKind::Gru => {
                    let o = off;
                    off += h;
                    Some(o)
                }
                CellKind::Lstm => None,
            };
            layers.push(LayerLayout {
                input,
                wx,
                wh,
                b,
                bhn,
            });
        }
        let wzh = off;
        off += cfg.dense * h;
        let bz = off;
        off += cfg.dense;
        let wtz = off;
        off += cfg.output_dim * cfg.dense;
        let bt = off;
        off += cfg.output_dim;
        Layout {
            layers,
            wzh,
            bz,
            wtz,
            bt,
            total: off,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnWeights {
    pub config: RnnConfig,
    pub params: Vec<f64>,
}

impl RnnWeights {
    pub fn zeros(config: RnnConfig) -> Result<Self> {
        config.validate()?;
        Ok(RnnWeights {
            params: vec![0.0; config.n_params()],
            config,
        })
    }

    pub fn from_params(config: RnnConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let n = config.n_params();
        if params.len() != n {
            return Err(Error::Shape(format!(
                "expected {n} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network weights".into()));
        }
        Ok(RnnWeights { config, params })
    }

    pub fn layout(&self) -> Layout {
        self.config.layout()
    }

    /// Forward pass for one sequence of per-step inputs (row-major N x input_dim).
    pub fn forward(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let mut ws = Workspace::new(&self.config, self.check_sequence(xs)?);
        self.forward_cached(xs, &mut ws);
        Ok(ws.out.clone())
    }

    fn check_sequence(&self, xs: &[f64]) -> Result<usize> {
        let d = self.config.input_dim;
        if xs.is_empty() || xs.len() % d != 0 {
            return Err(Error::Shape(format!(
                "sequence of {} values is not a nonempty multiple of input width {d}",
                xs.len()
            )));
        }
        Ok(xs.len() / d)
    }

    fn forward_cached(&self, xs: &[f64], ws: &mut Workspace) {
        let cfg = &self.config;
        let lay = self.layout();
        let h = cfg.hidden;
        let n = ws.steps;
        let p = &self.params;
        for (l, ll) in lay.layers.iter().enumerate() {
            let (below, rest) = ws.layers.split_at_mut(l);
            let cache = &mut rest[0];
            let g = cfg.cell.gates() * h;
            let wx = &p[ll.wx..ll.wx + g * ll.input];
            let wh = &p[ll.wh..ll.wh + g * h];
            let b = &p[ll.b..ll.b + g];
            for t in 0..n {
                let x = if l == 0 {
                    &xs[t * ll.input..(t + 1) * ll.input]
                } else {
                    &below[l - 1].h[(t + 1) * h..(t + 2) * h]
                };
                ws.pre_x.copy_from_slice(b);
                gemv_acc(wx, g, ll.input, x, &mut ws.pre_x);
                ws.pre_h.iter_mut().for_each(|v| *v = 0.0);
                let (hp, hn) = cache.h.split_at_mut((t + 1) * h);
                let h_prev = &hp[t * h..];
                gemv_acc(wh, g, h, h_prev, &mut ws.pre_h);
                let h_new = &mut hn[..h];
                match cfg.cell {
                    CellKind::Gru => {
                        let bhn = &p[ll.bhn.unwrap()..ll.bhn.unwrap() + h];
                        let gate = &mut cache.gates[t * 4 * h..(t + 1) * 4 * h];
                        for j in 0..h {
                            let r = sigmoid(ws.pre_x[j] + ws.pre_h[j]);
                            let z = sigmoid(ws.pre_x[h + j] + ws.pre_h[h + j]);
                            let hc = ws.pre_h[2 * h + j] + bhn[j];
                            let c = (ws.pre_x[2 * h + j] + r * hc).tanh();
                            h_new[j] = (1.0 - z) * c + z * h_prev[j];
                            gate[j] = r;
                            gate[h + j] = z;
                            gate[2 * h + j] = c;
                            gate[3 * h + j] = hc;
                        }
                    }
                    CellKind::Lstm => {
                        let gate = &mut cache.gates[t * 4 * h..(t + 1) * 4 * h];
                        let (cp, cn) = cache.c.split_at_mut((t + 1) * h);
                        let c_prev = &cp[t * h..];
                        let tc = &mut cache.tc[t * h..(t + 1) * h];
                        for j in 0..h {
                            let i = sigmoid(ws.pre_x[j] + ws.pre_h[j]);
                            let f = sigmoid(ws.pre_x[h + j] + ws.pre_h[h + j]);
                            let gg = (ws.pre_x[2 * h + j] + ws.pre_h[2 * h + j]).tanh();
                            let o = sigmoid(ws.pre_x[3 * h + j] + ws.pre_h[3 * h + j]);
                            let c = f * c_prev[j] + i * gg;
                            cn[j] = c;
                            tc[j] = c.tanh();
                            h_new[j] = o * tc[j];
                            gate[j] = i;
                            gate[h + j] = f;
                            gate[2 * h + j] = gg;
                            gate[3 * h + j] = o;
                        }
                    }
                }
            }
        }
        let top = &ws.layers[cfg.layers - 1].h[n * h..(n + 1) * h];
        ws.zpre.copy_from_slice(&p[lay.bz..lay.bz + cfg.dense]);
        gemv_acc(
            &p[lay.wzh..lay.wzh + cfg.dense * h],
            cfg.dense,
            h,
            top,
            &mut ws.zpre,
        );
        for (z, &a) in ws.z.iter_mut().zip(&ws.zpre) {
            *z = a.max(0.0);
        }
        ws.out.copy_from_slice(&p[lay.bt..lay.bt + cfg.output_dim]);
        gemv_acc(
            &p[lay.wtz..lay.wtz + cfg.output_dim * cfg.dense],
            cfg.output_dim,
            cfg.dense,
            &ws.z,
            &mut ws.out,
        );
    }

    /// Backpropagates `dout` (gradient of the loss wrt the output) through the
    /// cached forward pass, accumulating into `grad`.
    fn backward_cached(&self, xs: &[f64], ws: &Workspace, dout: &[f64], grad: &mut [f64]) {
        let cfg = &self.config;
        let lay = self.layout();
        let h = cfg.hidden;
        let n = ws.steps;
        let p = &self.params;
        let nd = cfg.dense;
        let no = cfg.output_dim;

        // dense head
        ger_acc(&mut grad[lay.wtz..lay.wtz + no * nd], no, nd, dout, &ws.z);
        for (g, d) in grad[lay.bt..lay.bt + no].iter_mut().zip(dout) {
            *g += d;
        }
        let mut dz = vec![0.0; nd];
        gemv_t_acc(&p[lay.wtz..lay.wtz + no * nd], no, nd, dout, &mut dz);
        for (d, &a) in dz.iter_mut().zip(&ws.zpre) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
        let top = &ws.layers[cfg.layers - 1].h[n * h..(n + 1) * h];
        ger_acc(&mut grad[lay.wzh..lay.wzh + nd * h], nd, h, &dz, top);
        for (g, d) in grad[lay.bz..lay.bz + nd].iter_mut().zip(&dz) {
            *g += d;
        }

        let nl = cfg.layers;
        let g = cfg.cell.gates() * h;
        // gradient wrt h (and c) of each layer flowing back from step t+1
        let mut dh_next = vec![vec![0.0; h]; nl];
        let mut dc_next = vec![vec![0.0; h]; nl];
        gemv_t_acc(
            &p[lay.wzh..lay.wzh + nd * h],
            nd,
            h,
            &dz,
            &mut dh_next[nl - 1],
        );
        let mut dx_above = vec![0.0; h];
        let mut dh = vec![0.0; h];
        let mut ga = vec![0.0; g];
        let mut gh = vec![0.0; g];
        for t in (0..n).rev() {
            for l in (0..nl).rev() {
                let ll = lay.layers[l];
                let cache = &ws.layers[l];
                for j in 0..h {
                    dh[j] = dh_next[l][j] + if l + 1 < nl { dx_above[j] } else { 0.0 };
                }
                let h_prev = &cache.h[t * h..(t + 1) * h];
                let gate = &cache.gates[t * 4 * h..(t + 1) * 4 * h];
                let dh_prev = &mut dh_next[l];
                match cfg.cell {
                    CellKind::Gru => {
                        let bhn = ll.bhn.unwrap();
                        for j in 0..h {
                            let (r, z, c, hc) =
                                (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
                            let dcand = dh[j] * (1.0 - z);
                            let dzg = dh[j] * (h_prev[j] - c);
                            dh_prev[j] = dh[j] * z;
                            let dan = dcand * (1.0 - c * c);
                            let dr = dan * hc;
                            let dhc = dan * r;
                            let dar = dr * r * (1.0 - r);
                            let daz = dzg * z * (1.0 - z);
                            ga[j] = dar;
                            ga[h + j] = daz;
                            ga[2 * h + j] = dan;
                            gh[j] = dar;
                            gh[h + j] = daz;
                            gh[2 * h + j] = dhc;
                            grad[bhn + j] += dhc;
                        }
                    }
                    CellKind::Lstm => {
                        let c_prev = &cache.c[t * h..(t + 1) * h];
                        let tc = &cache.tc[t * h..(t + 1) * h];
                        let dc_carry = &mut dc_next[l];
                        for j in 0..h {
                            let (i, f, gg, o) =
                                (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
                            let dout_g = dh[j] * tc[j];
                            let dc = dc_carry[j] + dh[j] * o * (1.0 - tc[j] * tc[j]);
                            let di = dc * gg;
                            let dg = dc * i;
                            let df = dc * c_prev[j];
                            dc_carry[j] = dc * f;
                            ga[j] = di * i * (1.0 - i);
                            ga[h + j] = df * f * (1.0 - f);
                            ga[2 * h + j] = dg * (1.0 - gg * gg);
                            ga[3 * h + j] = dout_g * o * (1.0 - o);
                        }
                        gh.copy_from_slice(&ga);
                        dh_prev.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                let x = if l == 0 {
                    &xs[t * ll.input..(t + 1) * ll.input]
                } else {
                    &ws.layers[l - 1].h[(t + 1) * h..(t + 2) * h]
                };
                ger_acc(&mut grad[ll.wx..ll.wx + g * ll.input], g, ll.input, &ga, x);
                ger_acc(&mut grad[ll.wh..ll.wh + g * h], g, h, &gh, h_prev);
                for (gb, a) in grad[ll.b..ll.b + g].iter_mut().zip(&ga) {
                    *gb += a;
                }
                gemv_t_acc(&p[ll.wh..ll.wh + g * h], g, h, &gh, dh_prev);
                if l > 0 {
                    dx_above.iter_mut().for_each(|v| *v = 0.0);
                    gemv_t_acc(
                        &p[ll.wx..ll.wx + g * ll.input],
                        g,
                        ll.input,
                        &ga,
                        &mut dx_above,
                    );
                }
            }
        }
    }

    /// Mean squared error over a batch and its exact gradient.
    ///
    /// Sequences are processed in fixed chunks whose partial sums are added in
    /// order, so the result does not depend on the number of threads.
    pub fn loss_and_grad(&self, batch: &[(&[f64], &[f64])]) -> Result<(f64, Vec<f64>)> {
        use rayon::prelude::*;
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        for (xs, theta) in batch {
            self.check_sequence(xs)?;
            self.check_target(theta)?;
        }
        let scale = 1.0 / batch.len() as f64;
        let np = self.params.len();
        let partials: Vec<(f64, Vec<f64>)> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut grad = vec![0.0; np];
                let mut loss = 0.0;
                let mut ws: Option<Workspace> = None;
                let mut dout = vec![0.0; self.config.output_dim];
                for (xs, theta) in chunk {
                    let steps = xs.len() / self.config.input_dim;
                    let w = match &mut ws {
                        Some(w) if w.steps == steps => w,
                        _ => ws.insert(Workspace::new(&self.config, steps)),
                    };
                    self.forward_cached(xs, w);
                    for k in 0..dout.len() {
                        let r = w.out[k] - theta[k];
                        loss += r * r;
                        dout[k] = 2.0 * r * scale;
                    }
                    self.backward_cached(xs, &*w, &dout, &mut grad);
                }
                (loss, grad)
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; np];
        for (l, g) in partials {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let loss = loss * scale;
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("loss or gradient".into()));
        }
        Ok((loss, grad))
    }

    /// Mean squared error over a batch without gradients.
    pub fn batch_loss(&self, batch: &[(&[f64], &[f64])]) -> Result<f64> {
        use rayon::prelude::*;
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let preds: Vec<Vec<f64>> = batch
            .par_iter()
            .map(|(xs, _)| self.forward(xs))
            .collect::<Result<_>>()?;
        let targets: Vec<&[f64]> = batch.iter().map(|b| b.1).collect();
        loss_mse(&preds, &targets)
    }

    fn check_target(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.config.output_dim {
            return Err(Error::Shape(format!(
                "target has {} entries, network outputs {}",
                theta.len(),
                self.config.output_dim
            )));
        }
        Ok(())
    }
}

const GRAD_CHUNK: usize = 8;

/// Glorot-uniform initialization; LSTM forget-gate biases start at one.
pub fn init_weights(config: RnnConfig, seed: u64) -> Result<RnnWeights> {
    config.validate()?;
    let lay = config.layout();
    let mut rng = derived_stream(seed, &[tags::INIT]);
    let mut params = vec![0.0; lay.total];
    let h = config.hidden;
    let g = config.cell.gates() * h;
    let mut fill = |params: &mut [f64], rows: usize, cols: usize| {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        for v in params.iter_mut() {
            *v = rng.random_range(-bound..=bound);
        }
    };
    for ll in &lay.layers {
        fill(&mut params[ll.wx..ll.wx + g * ll.input], g, ll.input);
        fill(&mut params[ll.wh..ll.wh + g * h], g, h);
        if config.cell == CellKind::Lstm {
            params[ll.b + h..ll.b + 2 * h]
                .iter_mut()
                .for_each(|v| *v = 1.0);
        }
    }
    fill(
        &mut params[lay.wzh..lay.wzh + config.dense * h],
        config.dense,
        h,
    );
    fill(
        &mut params[lay.wtz..lay.wtz + config.output_dim * config.dense],
        config.output_dim,
        config.dense,
    );
    Ok(RnnWeights { config, params })
}

/// Batch mean of squared Euclidean errors.
pub fn loss_mse(pred: &[Vec<f64>], target: &[&[f64]]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in pred.iter().zip(target) {
        if a.len() != b.len() {
            return Err(Error::Shape("prediction and target lengths differ".into()));
        }
        total += a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    Ok(total / pred.len() as f64)
}

struct LayerCache {
    h: Vec<f64>,
    c: Vec<f64>,
    gates: Vec<f64>,
    tc: Vec<f64>,
}

struct Workspace {
    steps: usize,
    layers: Vec<LayerCache>,
    pre_x: Vec<f64>,
    pre_h: Vec<f64>,
    zpre: Vec<f64>,
    z: Vec<f64>,
    out: Vec<f64>,
}

impl Workspace {
    fn new(cfg: &RnnConfig, steps: usize) -> Self {
        let h = cfg.hidden;
        let lstm = cfg.cell == CellKind::Lstm;
        let layers = (0..cfg.layers)
            .map(|_| LayerCache {
                h: vec![0.0; (steps + 1) * h],
                c: if lstm {
                    vec![0.0; (steps + 1) * h]
                } else {
                    Vec::new()
                },
                gates: vec![0.0; steps * 4 * h],
                tc: if lstm {
                    vec![0.0; steps * h]
                } else {
                    Vec::new()
                },
            })
            .collect();
        let g = cfg.cell.gates() * h;
        Workspace {
            steps,
            layers,
            pre_x: vec![0.0; g],
            pre_h: vec![0.0; g],
            zpre: vec![0.0; cfg.dense],
            z: vec![0.0; cfg.dense],
            out: vec![0.0; cfg.output_dim],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// out += W x, W row-major rows x cols
fn gemv_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out[r] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

// out += W^T v
fn gemv_t_acc(w: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let s = v[r];
        if s == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += a * s;
        }
    }
}

// g += a b^T
fn ger_acc(g: &mut [f64], rows: usize, cols: usize, a: &[f64], b: &[f64]) {
    for r in 0..rows {
        let s = a[r];
        if s == 0.0 {
            continue;
        }
        for (o, x) in g[r * cols..(r + 1) * cols].iter_mut().zip(b) {
            *o += s * x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(cell: CellKind, layers: usize, hidden: usize) -> RnnConfig {
        RnnConfig::new(cell, layers, hidden, 5, 2)
    }

    fn random_batch(n: usize, steps: usize, dim: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut rng = crate::rng::stream(seed);
        (0..n)
            .map(|_| {
                let xs = (0..steps).map(|_| rng.random_range(-1.5..1.5)).collect();
                let th = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                (xs, th)
            })
            .collect()
    }

    fn as_refs(b: &[(Vec<f64>, Vec<f64>)]) -> Vec<(&[f64], &[f64])> {
        b.iter()
            .map(|(x, t)| (x.as_slice(), t.as_slice()))
            .collect()
    }

    // smallest |pre-activation| of the ReLU head over the batch
    fn relu_margin(w: &RnnWeights, batch: &[(&[f64], &[f64])]) -> f64 {
        let mut m = f64::INFINITY;
        for (xs, _) in batch {
            let mut ws = Workspace::new(&w.config, xs.len());
            w.forward_cached(xs, &mut ws);
            for a in &ws.zpre {
                m = m.min(a.abs());
            }
        }
        m
    }

    fn fd_max_rel_error(w: &RnnWeights, batch: &[(&[f64], &[f64])]) -> f64 {
        let (_, grad) = w.loss_and_grad(batch).unwrap();
        let step = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe = w.clone();
        for i in 0..w.params.len() {
            let orig = w.params[i];
            probe.params[i] = orig + step;
            let lp = probe.batch_loss(batch).unwrap();
            probe.params[i] = orig - step;
            let lm = probe.batch_loss(batch).unwrap();
            probe.params[i] = orig;
            let num = (lp - lm) / (2.0 * step);
            let a = grad[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn layout_counts_match_hand_count() {
        // GRU, 1 layer, H=30, dense 32, d=2
        let c = RnnConfig::new(CellKind::Gru, 1, 30, 32, 2);
        let rec = 90 * 1 + 90 * 30 + 90 + 30;
        let head = 32 * 30 + 32 + 2 * 32 + 2;
        assert_eq!(c.n_params(), rec + head);
        let c = RnnConfig::new(CellKind::Lstm, 2, 4, 3, 1);
        let rec = (16 + 64 + 16) + (64 + 64 + 16);
        let head = 12 + 3 + 3 + 1;
        assert_eq!(c.n_params(), rec + head);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = small(CellKind::Lstm, 2, 6);
        let a = init_weights(cfg, 3).unwrap();
        let b = init_weights(cfg, 3).unwrap();
        let c = init_weights(cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
        let lay = cfg.layout();
        let g = 4 * 6;
        for ll in &lay.layers {
            let bx = (6.0 / (g + ll.input) as f64).sqrt();
            assert!(a.params[ll.wx..ll.wx + g * ll.input]
                .iter()
                .all(|v| v.abs() <= bx));
            let bh = (6.0 / (g + 6) as f64).sqrt();
            assert!(a.params[ll.wh..ll.wh + g * 6].iter().all(|v| v.abs() <= bh));
            assert!(a.params[ll.b + 6..ll.b + 12].iter().all(|&v| v == 1.0));
            assert!(a.params[ll.b..ll.b + 6].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        for cell in [CellKind::Gru, CellKind::Lstm] {
            let w = RnnWeights::zeros(small(cell, 2, 3)).unwrap();
            assert_eq!(w.forward(&[0.3, -1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn output_length_is_independent_of_sequence_length() {
        let w = init_weights(small(CellKind::Gru, 1, 4), 1).unwrap();
        for n in [1, 5, 40] {
            assert_eq!(w.forward(&vec![0.5; n]).unwrap().len(), 2);
        }
        assert!(matches!(w.forward(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn single_gru_step_matches_scripted_gates() {
        let cfg = RnnConfig::new(CellKind::Gru, 1, 1, 1, 1);
        let mut w = RnnWeights::zeros(cfg).unwrap();
        let lay = cfg.layout();
        let ll = lay.layers[0];
        // wx = [wr, wz, wn], b = [br, bz, bn], bhn
        w.params[ll.wx..ll.wx + 3].copy_from_slice(&[0.5, -0.3, 0.8]);
        w.params[ll.b..ll.b + 3].copy_from_slice(&[0.1, 0.2, -0.1]);
        w.params[ll.bhn.unwrap()] = 0.4;
        w.params[lay.wzh] = 1.0;
        w.params[lay.wtz] = 1.0;
        let x = 0.7;
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let r = s(0.5 * x + 0.1);
        let z = s(-0.3 * x + 0.2);
        let n = (0.8 * x - 0.1 + r * 0.4).tanh();
        let h = (1.0 - z) * n;
        let out = w.forward(&[x]).unwrap();
        assert!((out[0] - h.max(0.0)).abs() < 1e-12);
        assert!(h > 0.0);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_mse(&[vec![1.0, 2.0]], &[&[1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(loss_mse(&[vec![0.0, 0.0]], &[&[1.0, 0.0]]).unwrap(), 1.0);
        let p = [vec![1.0, 0.0], vec![0.0, 0.0]];
        let t: [&[f64]; 2] = [&[0.0, 0.0], &[1.0, 2.0_f64.sqrt()]];
        assert!((loss_mse(&p, &t).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(loss_mse(&[], &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn gradients_match_finite_differences_at_reference_size() {
        for cell in [CellKind::Gru, CellKind::Lstm] {
            let data = random_batch(3, 7, 2, 5);
            let batch = as_refs(&data);
            let w = (11..)
                .map(|s| init_weights(RnnConfig::new(cell, 1, 4, 5, 2), s).unwrap())
                .find(|w| relu_margin(w, &batch) > 1e-3)
                .unwrap();
            let err = fd_max_rel_error(&w, &batch);
            assert!(err < 1e-4, "{cell}: {err}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_over_random_draws() {
        // 100 draws per cell over hidden in {2,4,8}, layers {1,2}, N up to 10
        let mut draws = 0;
        let mut seed = 0u64;
        let mut worst: f64 = 0.0;
        for cell in [CellKind::Gru, CellKind::Lstm] {
            let mut done = 0;
            while done < 100 {
                seed += 1;
                let mut rng = crate::rng::stream(seed);
                let hidden = [2, 4, 8][rng.random_range(0..3)];
                let layers = rng.random_range(1..=2);
                let steps = rng.random_range(1..=10);
                let cfg = RnnConfig::new(cell, layers, hidden, 4, 2);
                let w = init_weights(cfg, seed).unwrap();
                let data = random_batch(2, steps, 2, seed ^ 0xabc);
                let batch = as_refs(&data);
                // finite differences straddling the ReLU kink are not derivatives
                if relu_margin(&w, &batch) < 1e-3 {
                    continue;
                }
                worst = worst.max(fd_max_rel_error(&w, &batch));
                done += 1;
                draws += 1;
            }
        }
        assert_eq!(draws, 200);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        for cell in [CellKind::Gru, CellKind::Lstm] {
            let cfg = small(cell, 2, 3);
            let mut w = init_weights(cfg, 2).unwrap();
            let lay = cfg.layout();
            w.params[lay.wtz..lay.bt].iter_mut().for_each(|v| *v = 0.0);
            w.params[lay.bt..lay.bt + 2].copy_from_slice(&[0.4, -0.2]);
            let data = random_batch(4, 6, 2, 9);
            let target = [0.4, -0.2];
            let batch: Vec<(&[f64], &[f64])> = data
                .iter()
                .map(|(x, _)| (x.as_slice(), &target[..]))
                .collect();
            let (loss, grad) = w.loss_and_grad(&batch).unwrap();
            assert_eq!(loss, 0.0);
            assert!(grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn output_layer_gradient_is_least_squares_gradient() {
        // The output layer is linear in its features z, so its gradient is
        // the ordinary least-squares gradient 2/B sum r [z; 1]^T.
        let cfg = RnnConfig::new(CellKind::Gru, 1, 3, 4, 2);
        let mut w = init_weights(cfg, 21).unwrap();
        let lay = cfg.layout();
        // gates forced open: z-gate shut, reset fully open, so h = tanh(...)
        let ll = lay.layers[0];
        for j in 0..3 {
            w.params[ll.b + j] = 40.0;
            w.params[ll.b + 3 + j] = -40.0;
        }
        let data = random_batch(5, 6, 2, 4);
        let batch = as_refs(&data);
        let (_, grad) = w.loss_and_grad(&batch).unwrap();
        let mut expect_w = [0.0; 8];
        let mut expect_b = [0.0; 2];
        for (xs, th) in &batch {
            let mut ws = Workspace::new(&cfg, xs.len());
            w.forward_cached(xs, &mut ws);
            for k in 0..2 {
                let r = 2.0 * (ws.out[k] - th[k]) / 5.0;
                for j in 0..4 {
                    expect_w[k * 4 + j] += r * ws.z[j];
                }
                expect_b[k] += r;
            }
        }
        for (a, b) in grad[lay.wtz..lay.bt].iter().zip(&expect_w) {
            assert!((a - b).abs() < 1e-13);
        }
        for (a, b) in grad[lay.bt..lay.bt + 2].iter().zip(&expect_b) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn gradient_is_thread_count_invariant() {
        let w = init_weights(small(CellKind::Lstm, 1, 4), 8).unwrap();
        let data = random_batch(37, 5, 2, 3);
        let batch = as_refs(&data);
        let a = w.loss_and_grad(&batch).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let b = pool.install(|| w.loss_and_grad(&batch).unwrap());
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }
}
