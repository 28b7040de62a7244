//! A small fully-connected classifier with hand-rolled backpropagation.
//!
//! The network is `input -> hidden (ReLU) -> ... -> logits`, trained with
//! mean softmax cross-entropy plus an arbitrary differentiable penalty on
//! the logits. The penalty enters as a hook returning its value and its
//! gradient with respect to the logits, so regularizers never need to know
//! anything about the layers — backprop carries their contribution down.
//!
//! All math is f64 and loops; at these sizes (two hidden layers of 64,
//! batches of a few hundred) that is more than fast enough and keeps every
//! operation exactly reproducible.

use crate::{Classify, FailureClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("bad layer dims {0:?}: need at least input and output, all nonzero")]
    BadDims(Vec<usize>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite {what} encountered")]
    NonFinite { what: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("penalty hook failed: {0}")]
    Penalty(String),
}

impl Classify for NnError {
    fn class(&self) -> FailureClass {
        match self {
            NnError::NonFinite { .. } => FailureClass::Runtime,
            _ => FailureClass::Config,
        }
    }
}

/// Dense row-major matrix. Fields are public; this is a data carrier, not
/// an abstraction boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Matrix {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { data, rows: r, cols: c }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out_dim x in_dim`.
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// `[input, hidden..., output]` widths.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].w.cols];
        d.extend(self.layers.iter().map(|l| l.w.rows));
        d
    }

    /// Zero-filled clone of the same shape (gradient / moment buffers).
    pub fn zeros_like(&self) -> MlpParams {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: Matrix::zeros(l.w.rows, l.w.cols),
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    fn for_each_param(&self, mut f: impl FnMut(f64)) {
        for l in &self.layers {
            l.w.data.iter().for_each(|v| f(*v));
            l.b.iter().for_each(|v| f(*v));
        }
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_param(|v| ok &= v.is_finite());
        ok
    }
}

/// Initializes weights uniformly in `(-1/sqrt(in_dim), 1/sqrt(in_dim))` per
/// layer, biases at zero. Deterministic in the seed.
pub fn init_params(dims: &[usize], seed: u64) -> Result<MlpParams, NnError> {
    if dims.len() < 2 || dims.iter().any(|d| *d == 0) {
        return Err(NnError::BadDims(dims.to_vec()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for win in dims.windows(2) {
        let (in_dim, out_dim) = (win[0], win[1]);
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut w = Matrix::zeros(out_dim, in_dim);
        for v in &mut w.data {
            *v = rng.gen_range(-bound..bound);
        }
        layers.push(Layer {
            w,
            b: vec![0.0; out_dim],
        });
    }
    Ok(MlpParams { layers })
}

/// Per-layer activations kept for the backward pass.
pub struct ForwardTrace {
    /// Pre-activation of every layer, `n x out_dim`.
    pub pre: Vec<Matrix>,
    /// Post-activation of every layer; the last entry equals the logits.
    pub post: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        self.post.last().unwrap()
    }
}

/// Runs the network on a batch (`n x input_dim`). Hidden layers apply ReLU;
/// the final layer emits raw logits.
pub fn forward(params: &MlpParams, x: &Matrix) -> Result<ForwardTrace, NnError> {
    if x.cols != params.layers[0].w.cols {
        return Err(NnError::ShapeMismatch(format!(
            "input has {} columns, first layer expects {}",
            x.cols,
            params.layers[0].w.cols
        )));
    }
    let n = x.rows;
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut post = Vec::with_capacity(params.layers.len());
    let mut current = x.clone();
    for (li, layer) in params.layers.iter().enumerate() {
        let last = li == params.layers.len() - 1;
        let out_dim = layer.w.rows;
        let mut z = Matrix::zeros(n, out_dim);
        for r in 0..n {
            let xin = current.row(r);
            for o in 0..out_dim {
                let wrow = layer.w.row(o);
                let mut acc = layer.b[o];
                for (wi, xi) in wrow.iter().zip(xin) {
                    acc += wi * xi;
                }
                *z.at_mut(r, o) = acc;
            }
        }
        let a = if last {
            z.clone()
        } else {
            let mut a = z.clone();
            for v in &mut a.data {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            a
        };
        pre.push(z);
        current = a.clone();
        post.push(a);
    }
    Ok(ForwardTrace { pre, post })
}

/// Mean softmax cross-entropy over the batch, with its gradient w.r.t. the
/// logits. Uses the log-sum-exp shift, so large logits stay finite.
pub fn softmax_ce(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix), NnError> {
    if logits.rows != labels.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} logit rows vs {} labels",
            logits.rows,
            labels.len()
        )));
    }
    let n = logits.rows;
    let k = logits.cols;
    let mut grad = Matrix::zeros(n, k);
    let mut loss = 0.0;
    for r in 0..n {
        let y = labels[r];
        if y >= k {
            return Err(NnError::ShapeMismatch(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|z| (z - m).exp()).sum();
        let lse = m + sum_exp.ln();
        loss += lse - row[y];
        for c in 0..k {
            let p = (row[c] - m).exp() / sum_exp;
            *grad.at_mut(r, c) = (p - if c == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Row-wise softmax probabilities (used by penalty gradients).
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|z| (z - m).exp()).sum();
        for c in 0..logits.cols {
            *out.at_mut(r, c) = (row[c] - m).exp() / sum_exp;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub penalty: f64,
}

/// Forward + backward over cross-entropy plus a logit-space penalty.
///
/// The hook receives the logits and returns `(value, d value / d logits)`;
/// passing `|_| (0.0, zeros)` recovers plain ERM. Returns the loss split
/// and parameter gradients. Any non-finite value in the loss or gradients
/// is an error, so divergence surfaces immediately rather than as NaN soup.
pub fn loss_and_grad<F>(
    params: &MlpParams,
    x: &Matrix,
    labels: &[usize],
    penalty: F,
) -> Result<(LossBreakdown, MlpParams), NnError>
where
    F: FnOnce(&Matrix) -> Result<(f64, Matrix), NnError>,
{
    let trace = forward(params, x)?;
    let logits = trace.logits();
    let (ce, ce_grad) = softmax_ce(logits, labels)?;
    let (pen, pen_grad) = penalty(logits)?;
    if pen_grad.rows != logits.rows || pen_grad.cols != logits.cols {
        return Err(NnError::ShapeMismatch(format!(
            "penalty gradient is {}x{}, logits are {}x{}",
            pen_grad.rows, pen_grad.cols, logits.rows, logits.cols
        )));
    }

    let n = x.rows;
    let mut dz = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..dz.data.len() {
        dz.data[i] = ce_grad.data[i] + pen_grad.data[i];
    }

    let mut grads = params.zeros_like();
    for li in (0..params.layers.len()).rev() {
        let input_act: &Matrix = if li == 0 { x } else { &trace.post[li - 1] };
        let layer = &params.layers[li];
        let g = &mut grads.layers[li];
        for r in 0..n {
            let dzr = dz.row(r).to_vec();
            let xin = input_act.row(r);
            for o in 0..layer.w.rows {
                let d = dzr[o];
                if d != 0.0 {
                    let base = o * layer.w.cols;
                    for (i, xi) in xin.iter().enumerate() {
                        g.w.data[base + i] += d * xi;
                    }
                    g.b[o] += d;
                }
            }
        }
        if li > 0 {
            // Propagate: da = dz . W, then gate through the ReLU that
            // produced this layer's input.
            let mut da = Matrix::zeros(n, layer.w.cols);
            for r in 0..n {
                let dzr = dz.row(r).to_vec();
                for (o, d) in dzr.iter().enumerate() {
                    if *d != 0.0 {
                        let wrow = layer.w.row(o);
                        for i in 0..layer.w.cols {
                            *da.at_mut(r, i) += d * wrow[i];
                        }
                    }
                }
            }
            let upstream_pre = &trace.pre[li - 1];
            for i in 0..da.data.len() {
                if upstream_pre.data[i] <= 0.0 {
                    da.data[i] = 0.0;
                }
            }
            dz = da;
        }
    }

    let total = ce + pen;
    if !total.is_finite() {
        return Err(NnError::NonFinite {
            what: "loss".into(),
        });
    }
    if !grads.all_finite() {
        return Err(NnError::NonFinite {
            what: "gradient".into(),
        });
    }
    Ok((
        LossBreakdown {
            total,
            ce,
            penalty: pen,
        },
        grads,
    ))
}

/// Argmax class per row.
pub fn predict(params: &MlpParams, x: &Matrix) -> Result<Vec<usize>, NnError> {
    let trace = forward(params, x)?;
    let logits = trace.logits();
    Ok((0..logits.rows)
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

// ───────────────────────── optimizer ─────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied directly to the parameters.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    m: MlpParams,
    v: MlpParams,
    t: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams, cfg: AdamConfig) -> AdamState {
        AdamState {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update in place. `grads` must match the parameter
    /// shape (guaranteed when it came from [`loss_and_grad`] on the same
    /// network).
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams) -> Result<(), NnError> {
        if params.dims() != grads.dims() {
            return Err(NnError::ShapeMismatch(format!(
                "params {:?} vs grads {:?}",
                params.dims(),
                grads.dims()
            )));
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for li in 0..params.layers.len() {
            let apply = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * *p);
            };
            let (pw, gw) = (&mut params.layers[li].w.data, &grads.layers[li].w.data);
            let (mw, vw) = (&mut self.m.layers[li].w.data, &mut self.v.layers[li].w.data);
            for i in 0..pw.len() {
                apply(&mut pw[i], gw[i], &mut mw[i], &mut vw[i]);
            }
            let (pb, gb) = (&mut params.layers[li].b, &grads.layers[li].b);
            let (mb, vb) = (&mut self.m.layers[li].b, &mut self.v.layers[li].b);
            for i in 0..pb.len() {
                apply(&mut pb[i], gb[i], &mut mb[i], &mut vb[i]);
            }
        }
        if !params.all_finite() {
            return Err(NnError::NonFinite {
                what: "parameters after optimizer step".into(),
            });
        }
        Ok(())
    }
}

// ───────────────────────── checkpoints ─────────────────────────

/// JSON checkpoint: layer dims header plus the raw tensors.
pub fn save_params(params: &MlpParams) -> String {
    #[derive(Serialize)]
    struct Ckpt<'a> {
        dims: Vec<usize>,
        layers: &'a [Layer],
    }
    serde_json::to_string_pretty(&Ckpt {
        dims: params.dims(),
        layers: &params.layers,
    })
    .expect("checkpoint serialization cannot fail")
}

pub fn load_params(text: &str) -> Result<MlpParams, NnError> {
    #[derive(Deserialize)]
    struct Ckpt {
        dims: Vec<usize>,
        layers: Vec<Layer>,
    }
    let ckpt: Ckpt =
        serde_json::from_str(text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let params = MlpParams {
        layers: ckpt.layers,
    };
    for l in &params.layers {
        if l.w.data.len() != l.w.rows * l.w.cols || l.b.len() != l.w.rows {
            return Err(NnError::Checkpoint("tensor shape mismatch".into()));
        }
    }
    if params.dims() != ckpt.dims {
        return Err(NnError::Checkpoint(format!(
            "declared dims {:?} do not match tensors {:?}",
            ckpt.dims,
            params.dims()
        )));
    }
    Ok(params)
}

// ───────────────────────── finite differences ─────────────────────────

/// Central-difference gradient of an arbitrary scalar function of the
/// parameters. Test instrumentation: independent of the backprop path, it
/// only perturbs parameters and re-evaluates `f`.
pub fn finite_diff_grad(
    params: &MlpParams,
    h: f64,
    mut f: impl FnMut(&MlpParams) -> f64,
) -> MlpParams {
    let mut grads = params.zeros_like();
    let mut work = params.clone();
    for li in 0..params.layers.len() {
        for i in 0..params.layers[li].w.data.len() {
            let orig = work.layers[li].w.data[i];
            work.layers[li].w.data[i] = orig + h;
            let up = f(&work);
            work.layers[li].w.data[i] = orig - h;
            let down = f(&work);
            work.layers[li].w.data[i] = orig;
            grads.layers[li].w.data[i] = (up - down) / (2.0 * h);
        }
        for i in 0..params.layers[li].b.len() {
            let orig = work.layers[li].b[i];
            work.layers[li].b[i] = orig + h;
            let up = f(&work);
            work.layers[li].b[i] = orig - h;
            let down = f(&work);
            work.layers[li].b[i] = orig;
            grads.layers[li].b[i] = (up - down) / (2.0 * h);
        }
    }
    grads
}

/// Largest relative error between two gradient sets, with an absolute floor
/// so near-zero entries compare absolutely.
pub fn max_rel_err(a: &MlpParams, b: &MlpParams) -> f64 {
    let mut worst: f64 = 0.0;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for (x, y) in la
            .w
            .data
            .iter()
            .chain(&la.b)
            .zip(lb.w.data.iter().chain(&lb.b))
        {
            let denom = x.abs().max(y.abs()).max(1e-6);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

// ───────────────────────── tests ─────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn zero_penalty(logits: &Matrix) -> Result<(f64, Matrix), NnError> {
        Ok((0.0, Matrix::zeros(logits.rows, logits.cols)))
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(&[4, 8, 3], 42).unwrap();
        let b = init_params(&[4, 8, 3], 42).unwrap();
        assert_eq!(a, b);
        let c = init_params(&[4, 8, 3], 43).unwrap();
        assert_ne!(a, c);

        for seed in 0..10 {
            let p = init_params(&[7, 5, 5, 2], seed).unwrap();
            for l in &p.layers {
                let bound = 1.0 / (l.w.cols as f64).sqrt();
                assert!(l.w.data.iter().all(|w| w.abs() <= bound));
                assert!(l.b.iter().all(|b| *b == 0.0));
            }
        }
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(init_params(&[4], 0), Err(NnError::BadDims(_))));
        assert!(matches!(init_params(&[4, 0, 2], 0), Err(NnError::BadDims(_))));
    }

    #[test]
    fn forward_matches_naive_recomputation() {
        let params = init_params(&[3, 4, 4, 2], 7).unwrap();
        let x = Matrix::from_rows(&[
            vec![0.1, -0.7, 2.0],
            vec![0.0, 0.0, 0.0],
            vec![-1.5, 0.3, 0.9],
        ]);
        let trace = forward(&params, &x).unwrap();

        // Straight-line recomputation, one value at a time.
        for r in 0..x.rows {
            let mut act: Vec<f64> = x.row(r).to_vec();
            for (li, layer) in params.layers.iter().enumerate() {
                let mut next = vec![0.0; layer.w.rows];
                for (o, out) in next.iter_mut().enumerate() {
                    *out = layer.b[o];
                    for i in 0..layer.w.cols {
                        *out += layer.w.at(o, i) * act[i];
                    }
                }
                if li + 1 < params.layers.len() {
                    for v in &mut next {
                        *v = v.max(0.0);
                    }
                }
                act = next;
            }
            for (c, v) in act.iter().enumerate() {
                assert!((trace.logits().at(r, c) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_logits_and_uniform_ce() {
        let params = MlpParams {
            layers: vec![Layer {
                w: Matrix::zeros(5, 3),
                b: vec![0.0; 5],
            }],
        };
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let trace = forward(&params, &x).unwrap();
        assert!(trace.logits().data.iter().all(|v| *v == 0.0));
        let (loss, _) = softmax_ce(trace.logits(), &[2]).unwrap();
        assert!((loss - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_label_out_of_range() {
        let logits = Matrix::zeros(1, 3);
        assert!(softmax_ce(&logits, &[3]).is_err());
        assert!(softmax_ce(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn ce_is_stable_for_huge_logits() {
        let logits = Matrix::from_rows(&[vec![1e4, -1e4, 0.0]]);
        let (loss, grad) = softmax_ce(&logits, &[0]).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        assert!(grad.data.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let params = init_params(&[2, 2, 3], 12).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let x = Matrix::from_rows(&rows);
        let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();

        let (_, analytic) = loss_and_grad(&params, &x, &labels, zero_penalty).unwrap();
        let numeric = finite_diff_grad(&params, 1e-5, |p| {
            loss_and_grad(p, &x, &labels, zero_penalty).unwrap().0.total
        });
        assert!(max_rel_err(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn penalty_hook_contributes_to_loss_and_grad() {
        let params = init_params(&[2, 3], 5).unwrap();
        let x = Matrix::from_rows(&[vec![0.5, -0.5], vec![1.0, 2.0]]);
        let labels = [0, 1];
        // Penalty = sum of squared logits; gradient = 2 * logits.
        let quad = |logits: &Matrix| {
            let v: f64 = logits.data.iter().map(|z| z * z).sum();
            let mut g = logits.clone();
            for z in &mut g.data {
                *z *= 2.0;
            }
            Ok((v, g))
        };
        let (breakdown, analytic) = loss_and_grad(&params, &x, &labels, quad).unwrap();
        assert!(breakdown.penalty > 0.0);
        assert!((breakdown.total - breakdown.ce - breakdown.penalty).abs() < 1e-12);
        let numeric = finite_diff_grad(&params, 1e-5, |p| {
            loss_and_grad(p, &x, &labels, quad).unwrap().0.total
        });
        assert!(max_rel_err(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn adam_single_step_matches_hand_computation() {
        // One parameter, gradient 1.0: m=0.1, v=0.001, bias correction makes
        // the first step exactly -lr (up to eps).
        let mut params = MlpParams {
            layers: vec![Layer {
                w: Matrix {
                    data: vec![0.0],
                    rows: 1,
                    cols: 1,
                },
                b: vec![],
            }],
        };
        let grads = MlpParams {
            layers: vec![Layer {
                w: Matrix {
                    data: vec![1.0],
                    rows: 1,
                    cols: 1,
                },
                b: vec![],
            }],
        };
        let mut adam = AdamState::new(&params, AdamConfig::with_lr(0.1));
        adam.step(&mut params, &grads).unwrap();
        let expected = -0.1 * (1.0 / (1.0f64.sqrt() + 1e-8));
        assert!((params.layers[0].w.data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut params = init_params(&[3, 4, 2], 3).unwrap();
        let before = params.clone();
        let zeros = params.zeros_like();
        let mut adam = AdamState::new(&params, AdamConfig::with_lr(0.01));
        adam.step(&mut params, &zeros).unwrap();
        assert_eq!(params, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_params() {
        let mut params = init_params(&[2, 2], 8).unwrap();
        let before = params.layers[0].w.data.clone();
        let zeros = params.zeros_like();
        let mut cfg = AdamConfig::with_lr(0.1);
        cfg.weight_decay = 0.5;
        let mut adam = AdamState::new(&params, cfg);
        adam.step(&mut params, &zeros).unwrap();
        for (after, b) in params.layers[0].w.data.iter().zip(&before) {
            assert!((after - b * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        let mut params = init_params(&[2, 16, 2], 21).unwrap();
        let mut adam = AdamState::new(&params, AdamConfig::with_lr(0.01));
        let x = Matrix::from_rows(
            &(0..32)
                .map(|i| {
                    let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                    vec![s * (1.0 + (i as f64) * 0.01), s]
                })
                .collect::<Vec<_>>(),
        );
        let labels: Vec<usize> = (0..32).map(|i| i % 2).collect();
        let (first, _) = loss_and_grad(&params, &x, &labels, zero_penalty).unwrap();
        let mut last = first;
        for _ in 0..200 {
            let (l, g) = loss_and_grad(&params, &x, &labels, zero_penalty).unwrap();
            adam.step(&mut params, &g).unwrap();
            last = l;
        }
        assert!(last.total < first.total * 0.2, "loss {} -> {}", first.total, last.total);
        let preds = predict(&params, &x).unwrap();
        let acc = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
        assert_eq!(acc, 32);
    }

    #[test]
    fn non_finite_penalty_is_an_error() {
        let params = init_params(&[2, 2], 1).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]);
        let bad = |logits: &Matrix| Ok((f64::NAN, Matrix::zeros(logits.rows, logits.cols)));
        assert!(matches!(
            loss_and_grad(&params, &x, &[0], bad),
            Err(NnError::NonFinite { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = init_params(&[3, 8, 8, 4], 77).unwrap();
        let text = save_params(&params);
        let back = load_params(&text).unwrap();
        assert_eq!(params, back);

        assert!(load_params("{}").is_err());
        let tampered = text.replace("\"dims\": [\n    3,", "\"dims\": [\n    9,");
        assert_ne!(tampered, text);
        assert!(load_params(&tampered).is_err());
    }
}
