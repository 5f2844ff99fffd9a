//! Self-recursive height predictor.
//!
//! Each cell carries a 5-vector embedding `(y_norm, h_norm, log σ_y,
//! log σ_h, logit)`. Layer `l` refines it with a residual two-layer
//! perceptron on the previous embedding and that layer's BEV query:
//! `E_l = E_{l−1} + MLP_l([E_{l−1}; Q̃_l])`. Queries enter normalized:
//! `Q̃_0 = Q_0` and `Q̃_c = Q_c / (Q_0 + 0.01)`, which turns splatted
//! signatures back into per-object values. A final input carries the
//! cell's BEV range from the ego (divided by 32 m) as its positional
//! embedding.
//!
//! Gradients flow through the residual chain and the perceptrons; queries
//! are treated as constants (no gradient through sampling).

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bevgrid::{GridSpec, HeightMap};
use crate::exec::Execution;
use crate::sampling::{sigmoid, BevQueryGrid, HeightSource};

pub const EMBED_DIM: usize = 5;
pub const INIT_EMBEDDING: Embedding = [0.5, 1.0, 0.0, 0.0, 0.0];
pub const LOG_SIGMA_LIMIT: f64 = 10.0;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LAYERS: usize = 3;
const QUERY_NORM_OFFSET: f64 = 0.001;
/// Ratios on near-empty cells are noise over noise; bound them.
const QUERY_RATIO_LIMIT: f64 = 2.0;
/// Positional inputs appended after the query.
pub const POSITION_DIM: usize = 1;
const RANGE_SCALE: f64 = 32.0;

pub type Embedding = [f64; EMBED_DIM];

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("gradient is not finite")]
    NonFiniteGradient,
    #[error("training diverged at epoch {0}")]
    DivergenceDetected(usize),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for PredictorError {
    fn from(e: std::io::Error) -> Self {
        PredictorError::Io(e.to_string())
    }
}

pub fn init_embeddings(n_cells: usize) -> Vec<Embedding> {
    vec![INIT_EMBEDDING; n_cells]
}

/// Weights of one refinement layer; matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `hidden × (5 + C + 1)`: embedding, normalized query, range
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `5 × hidden`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl LayerParams {
    fn zeros(input: usize, hidden: usize) -> Self {
        Self { w1: vec![0.0; hidden * input], b1: vec![0.0; hidden], w2: vec![0.0; EMBED_DIM * hidden], b2: vec![0.0; EMBED_DIM] }
    }

    fn tensors(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    query_channels: usize,
    hidden: usize,
    layers: Vec<LayerParams>,
}

impl PredictorParams {
    pub fn zeros(layers: usize, query_channels: usize, hidden: usize) -> Self {
        let input = EMBED_DIM + query_channels + POSITION_DIM;
        Self { query_channels, hidden, layers: vec![LayerParams::zeros(input, hidden); layers] }
    }

    /// Uniform `±1/√fan_in` first layer, output layer scaled by 0.1 so the
    /// untrained stack stays close to the identity.
    pub fn random(layers: usize, query_channels: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(layers, query_channels, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a1 = 1.0 / ((EMBED_DIM + query_channels + POSITION_DIM) as f64).sqrt();
        let a2 = 0.1 / (hidden as f64).sqrt();
        for l in &mut p.layers {
            l.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
            l.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
        }
        p
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
    pub fn query_channels(&self) -> usize {
        self.query_channels
    }
    pub fn hidden(&self) -> usize {
        self.hidden
    }
    pub fn input_dim(&self) -> usize {
        EMBED_DIM + self.query_channels + POSITION_DIM
    }
    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }
    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().flat_map(|l| l.tensors()).map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            for t in l.tensors() {
                out.extend_from_slice(t);
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), PredictorError> {
        if flat.len() != self.num_params() {
            return Err(PredictorError::ShapeMismatch(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut pos = 0;
        for l in &mut self.layers {
            for t in l.tensors_mut() {
                let n = t.len();
                t.copy_from_slice(&flat[pos..pos + n]);
                pos += n;
            }
        }
        Ok(())
    }

    /// One refinement step for one cell, storing the perceptron input and
    /// hidden activations when `trace` is given.
    fn step(&self, layer: usize, e: &Embedding, q: &[f64], range: f64, trace: Option<(&mut [f64], &mut [f64])>) -> Embedding {
        let p = &self.layers[layer];
        let n_in = self.input_dim();
        let mut x = vec![0.0; n_in];
        x[..EMBED_DIM].copy_from_slice(e);
        normalize_query(q, &mut x[EMBED_DIM..n_in - POSITION_DIM]);
        x[n_in - 1] = range / RANGE_SCALE;
        let mut a = vec![0.0; self.hidden];
        for (k, ak) in a.iter_mut().enumerate() {
            let row = &p.w1[k * n_in..(k + 1) * n_in];
            *ak = (p.b1[k] + row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>()).tanh();
        }
        let mut out = *e;
        for (d, o) in out.iter_mut().enumerate() {
            let row = &p.w2[d * self.hidden..(d + 1) * self.hidden];
            *o += p.b2[d] + row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>();
        }
        if let Some((tx, ta)) = trace {
            tx.copy_from_slice(&x);
            ta.copy_from_slice(&a);
        }
        out
    }

    /// Applies layer `layer` to every cell: `E_l = E_{l−1} + MLP([E_{l−1}; Q̃; r])`,
    /// `ranges` holding each cell's BEV distance from the ego in meters.
    pub fn forward(&self, prev: &[Embedding], q: &BevQueryGrid, ranges: &[f64], layer: usize) -> Result<Vec<Embedding>, PredictorError> {
        self.check_query(q, prev.len())?;
        if ranges.len() != prev.len() {
            return Err(PredictorError::ShapeMismatch(format!("{} ranges for {} cells", ranges.len(), prev.len())));
        }
        if layer >= self.layers.len() {
            return Err(PredictorError::ShapeMismatch(format!("layer {layer} of {}", self.layers.len())));
        }
        Ok(prev.iter().enumerate().map(|(k, e)| self.step(layer, e, q.cell(k), ranges[k], None)).collect())
    }

    fn check_query(&self, q: &BevQueryGrid, cells: usize) -> Result<(), PredictorError> {
        if q.channels() != self.query_channels || q.num_cells() != cells {
            return Err(PredictorError::ShapeMismatch(format!(
                "query grid {}×{} vs {} cells × {} channels",
                q.num_cells(),
                q.channels(),
                cells,
                self.query_channels
            )));
        }
        Ok(())
    }

    /// Writes the checkpoint: one JSON header line, then the parameters as
    /// little-endian `f64`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W, seed: u64, epoch: usize) -> Result<(), PredictorError> {
        let header = CheckpointHeader {
            layer_sizes: vec![self.input_dim(), self.hidden, EMBED_DIM],
            layers: self.layers.len(),
            query_channels: self.query_channels,
            seed,
            epoch,
        };
        w.write_all(serde_json::to_string(&header).expect("header serializes").as_bytes())?;
        w.write_all(b"\n")?;
        for v in self.flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, CheckpointHeader), PredictorError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| PredictorError::Checkpoint("missing header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| PredictorError::Checkpoint(e.to_string()))?;
        let sizes = &header.layer_sizes;
        if sizes.len() != 3 || sizes[2] != EMBED_DIM || sizes[0] != EMBED_DIM + header.query_channels + POSITION_DIM {
            return Err(PredictorError::Checkpoint(format!("unexpected layer sizes {sizes:?}")));
        }
        let mut p = Self::zeros(header.layers, header.query_channels, sizes[1]);
        let body = &bytes[nl + 1..];
        if body.len() != 8 * p.num_params() {
            return Err(PredictorError::Checkpoint(format!("expected {} parameters, found {} bytes", p.num_params(), body.len())));
        }
        let flat: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(PredictorError::Checkpoint("non-finite parameter".into()));
        }
        p.set_flat(&flat)?;
        Ok((p, header))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `[input, hidden, output]` of every layer's perceptron.
    pub layer_sizes: Vec<usize>,
    pub layers: usize,
    pub query_channels: usize,
    pub seed: u64,
    pub epoch: usize,
}

/// Writes `Q̃` for one cell into `out`.
pub fn normalize_query(q: &[f64], out: &mut [f64]) {
    let inv = 1.0 / (q[0] + QUERY_NORM_OFFSET);
    out[0] = q[0];
    for (o, &v) in out[1..].iter_mut().zip(&q[1..]) {
        *o = (v * inv).clamp(-QUERY_RATIO_LIMIT, QUERY_RATIO_LIMIT);
    }
}

/// Physical reading of one embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub y: f64,
    pub h: f64,
    pub sigma_y: f64,
    pub sigma_h: f64,
    pub prob: f64,
}

pub fn decode_one(e: &Embedding, g: &GridSpec) -> Decoded {
    let span = g.height_span();
    Decoded {
        y: g.height_range.0 + e[0].clamp(0.0, 1.0) * span,
        h: e[1].clamp(0.0, 1.0) * span,
        sigma_y: e[2].clamp(-LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT).exp(),
        sigma_h: e[3].clamp(-LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT).exp(),
        prob: sigmoid(e[4]),
    }
}

pub fn decode(es: &[Embedding], g: &GridSpec) -> Vec<Decoded> {
    es.iter().map(|e| decode_one(e, g)).collect()
}

/// Decoded heights as anchor spans for sampling.
impl HeightSource for Vec<Decoded> {
    fn anchor_span(&self, index: usize) -> (f64, f64) {
        (self[index].y, self[index].h)
    }
}

/// Supervision for one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    pub occupied: bool,
    pub y: f64,
    pub h: f64,
    pub weight: f64,
}

pub fn targets_from_map(gt: &HeightMap, weights: &[f64], cells: &[usize]) -> Vec<CellTarget> {
    cells
        .iter()
        .map(|&k| CellTarget { occupied: gt.indicator()[k], y: gt.y()[k], h: gt.h()[k], weight: weights[k] })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub seg_weight: f64,
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { seg_weight: 0.5, gamma: 2.0, alpha: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub height_term: f64,
    pub y_term: f64,
    pub seg_term: f64,
    /// `y − y_gt` on occupied cells, `NaN` elsewhere.
    pub y_residuals: Vec<f64>,
}

impl LossReport {
    pub fn y_mae_occupied(&self) -> f64 {
        let (s, n) = self.y_residuals.iter().filter(|r| !r.is_nan()).fold((0.0, 0usize), |(s, n), r| (s + r.abs(), n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }
}

/// Laplacian term for one quantity: `√2 |r| / σ + log σ` on occupied cells,
/// `1 / σ` elsewhere, with `σ = exp(s)`.
pub fn laplace_term(occupied: bool, residual: f64, log_sigma: f64) -> f64 {
    let s = log_sigma.clamp(-LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT);
    if occupied {
        std::f64::consts::SQRT_2 * residual.abs() * (-s).exp() + s
    } else {
        (-s).exp()
    }
}

/// `(∂/∂residual, ∂/∂log σ)` of [`laplace_term`]; zero in `log σ` outside the clamp.
fn laplace_grad(occupied: bool, residual: f64, log_sigma: f64) -> (f64, f64) {
    let inside = log_sigma > -LOG_SIGMA_LIMIT && log_sigma < LOG_SIGMA_LIMIT;
    let s = log_sigma.clamp(-LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT);
    let inv = (-s).exp();
    if occupied {
        let dr = std::f64::consts::SQRT_2 * residual.signum() * inv;
        let ds = if inside { 1.0 - std::f64::consts::SQRT_2 * residual.abs() * inv } else { 0.0 };
        (dr, ds)
    } else {
        (0.0, if inside { -inv } else { 0.0 })
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary focal loss of one logit and its derivative.
pub fn focal_one(logit: f64, label: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    // the negative class is the positive class with the logit mirrored
    let (x, a, sign) = if label { (logit, alpha, 1.0) } else { (-logit, 1.0 - alpha, -1.0) };
    let p = sigmoid(x);
    let q = sigmoid(-x);
    let log_p = -softplus(-x);
    let log_q = -softplus(x);
    let mod_q = if gamma == 0.0 { 1.0 } else { (gamma * log_q).exp() };
    let loss = -a * mod_q * log_p;
    let grad = a * mod_q * (gamma * p * log_p - q);
    (loss, sign * grad)
}

/// Mean-reduced binary focal loss.
pub fn focal_loss(logits: &[f64], labels: &[bool], gamma: f64, alpha: f64) -> f64 {
    assert_eq!(logits.len(), labels.len(), "one label per logit");
    if logits.is_empty() {
        return 0.0;
    }
    logits.iter().zip(labels).map(|(&l, &t)| focal_one(l, t, gamma, alpha).0).sum::<f64>() / logits.len() as f64
}

/// Joint loss of final embeddings against targets, plus `∂total/∂E` per
/// cell when `grad` is given. Each cell contributes
/// `w · (h_term + y_term + seg_weight · focal)`; all terms are means over cells.
pub fn embedding_loss(
    es: &[Embedding],
    targets: &[CellTarget],
    g: &GridSpec,
    cfg: &LossConfig,
    mut grad: Option<&mut [Embedding]>,
) -> Result<LossReport, PredictorError> {
    if es.len() != targets.len() {
        return Err(PredictorError::ShapeMismatch(format!("{} embeddings vs {} targets", es.len(), targets.len())));
    }
    let n = es.len().max(1) as f64;
    let span = g.height_span();
    let (mut ht, mut yt, mut st) = (0.0, 0.0, 0.0);
    let mut y_residuals = Vec::with_capacity(es.len());
    for (k, (e, t)) in es.iter().zip(targets).enumerate() {
        let d = decode_one(e, g);
        let (ry, rh) = (d.y - t.y, d.h - t.h);
        let (fl, fg) = focal_one(e[4], t.occupied, cfg.gamma, cfg.alpha);
        ht += t.weight * laplace_term(t.occupied, rh, e[3]);
        yt += t.weight * laplace_term(t.occupied, ry, e[2]);
        st += t.weight * fl;
        y_residuals.push(if t.occupied { ry } else { f64::NAN });
        if let Some(gr) = grad.as_deref_mut() {
            let c = t.weight / n;
            let (dry, dsy) = laplace_grad(t.occupied, ry, e[2]);
            let (drh, dsh) = laplace_grad(t.occupied, rh, e[3]);
            // The clamp passes gradient wherever descent points back inside.
            let through = |v: f64, d: f64| if (v > 0.0 || d < 0.0) && (v < 1.0 || d > 0.0) { span * d } else { 0.0 };
            gr[k] = [c * through(e[0], dry), c * through(e[1], drh), c * dsy, c * dsh, c * cfg.seg_weight * fg];
        }
    }
    let report = LossReport {
        total: (ht + yt + cfg.seg_weight * st) / n,
        height_term: ht / n,
        y_term: yt / n,
        seg_term: st / n,
        y_residuals,
    };
    if !report.total.is_finite() {
        return Err(PredictorError::NonFiniteLoss);
    }
    Ok(report)
}

/// Loss of decoded predictions against a full height map.
pub fn height_loss(es: &[Embedding], gt: &HeightMap, weights: &[f64], cfg: &LossConfig) -> Result<LossReport, PredictorError> {
    let cells: Vec<usize> = (0..gt.grid().num_cells()).collect();
    embedding_loss(es, &targets_from_map(gt, weights, &cells), gt.grid(), cfg, None)
}

/// A set of cells with the queries each layer saw. Queries are fixed, so
/// the loss is a deterministic function of the parameters alone.
#[derive(Debug, Clone)]
pub struct CellBatch {
    /// One query grid per layer, each with one row per target.
    pub queries: Vec<BevQueryGrid>,
    pub targets: Vec<CellTarget>,
    /// BEV distance of each cell from the ego (m).
    pub ranges: Vec<f64>,
    pub grid: GridSpec,
}

/// BEV distance from the ego of each listed cell.
pub fn cell_ranges(g: &GridSpec, cells: &[usize]) -> Vec<f64> {
    cells
        .iter()
        .map(|&k| {
            let (x, z) = g.center_of_index(k);
            x.hypot(z)
        })
        .collect()
}

/// Embeddings `E_0..=E_L`, then each layer's inputs and hidden activations.
type Trace = (Vec<Vec<Embedding>>, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Forward pass over a batch, returning every layer's embeddings
/// (`E_0..=E_L`) and per-layer traces for backpropagation.
fn forward_traced(p: &PredictorParams, b: &CellBatch) -> Result<Trace, PredictorError> {
    if b.queries.len() != p.num_layers() {
        return Err(PredictorError::ShapeMismatch(format!("{} query grids for {} layers", b.queries.len(), p.num_layers())));
    }
    let n = b.targets.len();
    let (ni, nh) = (p.input_dim(), p.hidden);
    let mut es = vec![init_embeddings(n)];
    let mut xs = Vec::with_capacity(p.num_layers());
    let mut hs = Vec::with_capacity(p.num_layers());
    for (l, q) in b.queries.iter().enumerate() {
        p.check_query(q, n)?;
        let mut x = vec![0.0; n * ni];
        let mut a = vec![0.0; n * nh];
        let prev = &es[l];
        let next: Vec<Embedding> = (0..n)
            .map(|k| p.step(l, &prev[k], q.cell(k), b.ranges[k], Some((&mut x[k * ni..(k + 1) * ni], &mut a[k * nh..(k + 1) * nh]))))
            .collect();
        es.push(next);
        xs.push(x);
        hs.push(a);
    }
    Ok((es, xs, hs))
}

/// Final embeddings of a batch.
pub fn batch_forward(p: &PredictorParams, b: &CellBatch) -> Result<Vec<Embedding>, PredictorError> {
    Ok(forward_traced(p, b)?.0.pop().expect("at least E_0"))
}

pub fn batch_loss(p: &PredictorParams, b: &CellBatch, cfg: &LossConfig) -> Result<LossReport, PredictorError> {
    let es = batch_forward(p, b)?;
    embedding_loss(&es, &b.targets, &b.grid, cfg, None)
}

/// Loss and analytic gradient (same layout as [`PredictorParams::flatten`]).
/// With `supervise_all`, every layer's embeddings are supervised and their
/// losses summed; otherwise only the last layer.
pub fn backward(
    p: &PredictorParams,
    b: &CellBatch,
    cfg: &LossConfig,
    supervise_all: bool,
) -> Result<(LossReport, Vec<f64>), PredictorError> {
    let (es, xs, hs) = forward_traced(p, b)?;
    let n = b.targets.len();
    let (ni, nh) = (p.input_dim(), p.hidden);
    let nl = p.num_layers();
    let mut grads: Vec<LayerParams> = (0..nl).map(|_| LayerParams::zeros(ni, nh)).collect();
    let mut g = vec![[0.0; EMBED_DIM]; n];
    let report = embedding_loss(&es[nl], &b.targets, &b.grid, cfg, Some(&mut g))?;
    let mut extra = 0.0;
    for l in (0..nl).rev() {
        let lp = &p.layers[l];
        let gl = &mut grads[l];
        let mut dz = vec![0.0; nh];
        for k in 0..n {
            let a = &hs[l][k * nh..(k + 1) * nh];
            let x = &xs[l][k * ni..(k + 1) * ni];
            let dout = g[k];
            for (d, &dd) in dout.iter().enumerate() {
                gl.b2[d] += dd;
                for (j, &aj) in a.iter().enumerate() {
                    gl.w2[d * nh + j] += dd * aj;
                }
            }
            for j in 0..nh {
                let da: f64 = (0..EMBED_DIM).map(|d| lp.w2[d * nh + j] * dout[d]).sum();
                dz[j] = da * (1.0 - a[j] * a[j]);
            }
            for (j, &dzj) in dz.iter().enumerate() {
                if dzj == 0.0 {
                    continue;
                }
                gl.b1[j] += dzj;
                let row = &mut gl.w1[j * ni..(j + 1) * ni];
                for (w, &xv) in row.iter_mut().zip(x) {
                    *w += dzj * xv;
                }
                for (d, gd) in g[k].iter_mut().enumerate() {
                    *gd += lp.w1[j * ni + d] * dzj;
                }
            }
        }
        if supervise_all && l > 0 {
            let mut gi = vec![[0.0; EMBED_DIM]; n];
            extra += embedding_loss(&es[l], &b.targets, &b.grid, cfg, Some(&mut gi))?.total;
            for (gk, gik) in g.iter_mut().zip(&gi) {
                for d in 0..EMBED_DIM {
                    gk[d] += gik[d];
                }
            }
        }
    }
    let mut flat = Vec::with_capacity(p.num_params());
    for gl in &grads {
        for t in gl.tensors() {
            flat.extend_from_slice(t);
        }
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(PredictorError::NonFiniteGradient);
    }
    let mut report = report;
    report.total += extra;
    Ok((report, flat))
}

/// Relative resolution the gradient check is expected to reach.
pub const GRAD_CHECK_RESOLUTION: f64 = 1e-4;

/// Maximum relative error between analytic and central-difference
/// gradients, `|a − n| / max(|a|, |n|, floor)`. The floor is the roundoff
/// of the difference quotient, `ε·|L| / step`, divided by
/// [`GRAD_CHECK_RESOLUTION`]: smaller components cannot be resolved to that
/// resolution by differencing and are judged absolutely. Only meaningful while every
/// embedding stays inside `[0, 1]`: at the clamp the analytic side keeps
/// gradients that point back inside, which differencing cannot see.
pub fn grad_check(p: &PredictorParams, b: &CellBatch, cfg: &LossConfig, step: f64) -> Result<f64, PredictorError> {
    let (report, analytic) = backward(p, b, cfg, false)?;
    let floor = (f64::EPSILON * report.total.abs().max(1.0) / step / GRAD_CHECK_RESOLUTION).max(1e-8);
    let base = p.flatten();
    let mut probe = p.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut v = base.clone();
        v[i] = base[i] + step;
        probe.set_flat(&v)?;
        let up = batch_loss(&probe, b, cfg)?.total;
        v[i] = base[i] - step;
        probe.set_flat(&v)?;
        let down = batch_loss(&probe, b, cfg)?.total;
        let numeric = (up - down) / (2.0 * step);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Produces the per-scene batches for one epoch. Batches may depend on the
/// current parameters (queries are resampled with predicted heights).
pub trait BatchSource: Sync {
    fn num_scenes(&self) -> usize;
    fn batch(&self, params: &PredictorParams, scene: usize) -> CellBatch;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// `v ← μ v − lr g`, `w ← w + v`.
    Momentum,
    /// Bias-corrected Adam with `β1 = momentum`.
    Adam { beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub hidden: usize,
    pub layers: usize,
    pub supervise_all: bool,
    /// Rescales the summed gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    /// The step size follows a cosine from `lr` down to `lr * final_lr_scale`.
    pub final_lr_scale: f64,
    /// Rejects an epoch whose loss rose above the last accepted one: the
    /// parameters are restored, momentum is cleared and the step is halved.
    /// Accepted epochs let the step recover by 10% up to the schedule.
    pub backtrack: bool,
    pub loss: LossConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
            momentum: 0.9,
            optimizer: Optimizer::Momentum,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            layers: DEFAULT_LAYERS,
            supervise_all: false,
            clip_norm: Some(1.0),
            final_lr_scale: 1.0,
            backtrack: true,
            loss: LossConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs < 2 {
            return self.lr;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        let s = self.final_lr_scale;
        self.lr * (s + (1.0 - s) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total_loss: f64,
    pub height_term: f64,
    pub y_term: f64,
    pub seg_term: f64,
    pub y_mae_occupied_m: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,total_loss,height_term,y_term,seg_term,y_mae_occupied_m";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.6}",
            self.epoch, self.total_loss, self.height_term, self.y_term, self.seg_term, self.y_mae_occupied_m
        )
    }
}

/// Full-batch gradient descent with momentum. Scene gradients are computed
/// in parallel and summed in scene order, so runs are reproducible. Each log
/// row reports the loss at the parameters the epoch stepped from, which with
/// backtracking are the last accepted ones.
pub fn fit<S: BatchSource>(
    source: &S,
    query_channels: usize,
    cfg: &FitConfig,
    exec: Execution,
) -> Result<(PredictorParams, Vec<EpochLog>), PredictorError> {
    let n_scenes = source.num_scenes();
    if n_scenes == 0 {
        return Err(PredictorError::ShapeMismatch("no scenes to fit".into()));
    }
    let mut params = PredictorParams::random(cfg.layers, query_channels, cfg.hidden, cfg.seed);
    let mut flat = params.flatten();
    let mut velocity = vec![0.0; flat.len()];
    let mut second = vec![0.0; flat.len()];
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut accepted: Option<(Vec<f64>, EpochLog, Vec<f64>)> = None;
    let mut shrink = 1.0_f64;
    for epoch in 0..cfg.epochs {
        let results = exec.map(n_scenes, |s| {
            let b = source.batch(&params, s);
            backward(&params, &b, &cfg.loss, cfg.supervise_all)
        });
        let mut sum = vec![0.0; flat.len()];
        let mut row = EpochLog { epoch, total_loss: 0.0, height_term: 0.0, y_term: 0.0, seg_term: 0.0, y_mae_occupied_m: 0.0 };
        let (mut abs_err, mut occupied) = (0.0, 0usize);
        for r in results {
            let (rep, g) = r.map_err(|e| match e {
                PredictorError::NonFiniteLoss | PredictorError::NonFiniteGradient => PredictorError::DivergenceDetected(epoch),
                other => other,
            })?;
            for (s, v) in sum.iter_mut().zip(&g) {
                *s += v;
            }
            row.total_loss += rep.total;
            row.height_term += rep.height_term;
            row.y_term += rep.y_term;
            row.seg_term += rep.seg_term;
            for r in rep.y_residuals.iter().filter(|r| !r.is_nan()) {
                abs_err += r.abs();
                occupied += 1;
            }
        }
        let inv = 1.0 / n_scenes as f64;
        row.total_loss *= inv;
        row.height_term *= inv;
        row.y_term *= inv;
        row.seg_term *= inv;
        row.y_mae_occupied_m = if occupied > 0 { abs_err / occupied as f64 } else { 0.0 };
        if !row.total_loss.is_finite() {
            return Err(PredictorError::DivergenceDetected(epoch));
        }
        if cfg.backtrack {
            match &accepted {
                Some((kept, prev, prev_sum)) if row.total_loss > prev.total_loss => {
                    flat.copy_from_slice(kept);
                    params.set_flat(&flat)?;
                    velocity.iter_mut().for_each(|v| *v = 0.0);
                    second.iter_mut().for_each(|v| *v = 0.0);
                    shrink *= 0.5;
                    row = EpochLog { epoch, ..*prev };
                    sum.copy_from_slice(prev_sum);
                }
                _ => {
                    if accepted.is_some() {
                        shrink = (shrink * 1.1).min(1.0);
                    }
                    accepted = Some((flat.clone(), row, sum.clone()));
                }
            }
        }
        log.push(row);
        let mut scale = inv;
        if let Some(max) = cfg.clip_norm {
            let norm = sum.iter().map(|g| g * g).sum::<f64>().sqrt() * inv;
            if norm > max {
                scale *= max / norm;
            }
        }
        let lr = cfg.lr_at(epoch) * shrink;
        match cfg.optimizer {
            Optimizer::Momentum => {
                for ((w, v), g) in flat.iter_mut().zip(velocity.iter_mut()).zip(&sum) {
                    *v = cfg.momentum * *v - lr * g * scale;
                    *w += *v;
                }
            }
            Optimizer::Adam { beta2, eps } => {
                let t = (epoch + 1) as i32;
                let c1 = 1.0 - cfg.momentum.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((w, m), v), g) in flat.iter_mut().zip(velocity.iter_mut()).zip(second.iter_mut()).zip(&sum) {
                    let g = g * scale;
                    *m = cfg.momentum * *m + (1.0 - cfg.momentum) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        params.set_flat(&flat)?;
    }
    Ok((params, log))
}
