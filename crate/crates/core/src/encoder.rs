//! Per-point two-layer encoder with a linear segmentation head,
//! hand-written reverse-mode gradients, cross-entropy and AdamW.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dataio::{ByteReader, DataError};
use crate::exec::Exec;
use crate::model::{EmbeddingMatrix, PointCloud, IGNORE};
use crate::neighbors::{local_context_with, CONTEXT_WIDTH};

/// Neighbour count of the local context descriptor.
pub const CONTEXT_NEIGHBORS: usize = 8;

/// Multiplier applied to coordinates before they enter the encoder (meters to decameters).
pub const COORD_SCALE: f64 = 0.1;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PADM";

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("NoValidLabels: every label is IGNORE")]
    NoValidLabels,
    #[error("LabelOutOfRange: label {label} at point {index} (num_classes = {num_classes})")]
    LabelOutOfRange {
        index: usize,
        label: i32,
        num_classes: usize,
    },
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
}

/// `e = W2 relu(W1 x + b1) + b2` applied to each point independently.
#[derive(Clone, Debug, PartialEq)]
pub struct PointEncoder {
    pub input: usize,
    pub hidden: usize,
    pub dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// `logits = Wc e + bc`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegHead {
    pub classes: usize,
    pub dim: usize,
    pub wc: Vec<f64>,
    pub bc: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub encoder: PointEncoder,
    pub head: SegHead,
    pub c_local: usize,
}

/// Parameter gradients in the same layout as the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub wc: Vec<f64>,
    pub bc: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros_like(model: &SegModel) -> Self {
        let e = &model.encoder;
        let h = &model.head;
        Self {
            w1: vec![0.0; e.w1.len()],
            b1: vec![0.0; e.b1.len()],
            w2: vec![0.0; e.w2.len()],
            b2: vec![0.0; e.b2.len()],
            wc: vec![0.0; h.wc.len()],
            bc: vec![0.0; h.bc.len()],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.wc, &self.bc]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.wc,
            &mut self.bc,
        ]
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelGrads, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }
}

impl SegModel {
    /// All-zero model of the given shape.
    pub fn zeros(hidden: usize, dim: usize, classes: usize) -> Self {
        let input = 4 + CONTEXT_WIDTH;
        Self {
            encoder: PointEncoder {
                input,
                hidden,
                dim,
                w1: vec![0.0; hidden * input],
                b1: vec![0.0; hidden],
                w2: vec![0.0; dim * hidden],
                b2: vec![0.0; dim],
            },
            head: SegHead {
                classes,
                dim,
                wc: vec![0.0; classes * dim],
                bc: vec![0.0; classes],
            },
            c_local: CONTEXT_WIDTH,
        }
    }

    /// He-style Gaussian initialisation; biases start at zero.
    pub fn init<R: Rng + ?Sized>(hidden: usize, dim: usize, classes: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(hidden, dim, classes);
        let mut fill = |w: &mut [f64], fan_in: usize, gain: f64| {
            let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).unwrap();
            w.iter_mut().for_each(|v| *v = normal.sample(rng));
        };
        let input = m.encoder.input;
        fill(&mut m.encoder.w1, input, 2f64.sqrt());
        fill(&mut m.encoder.w2, hidden, 1.0);
        fill(&mut m.head.wc, dim, 1.0);
        m
    }

    pub fn input_width(&self) -> usize {
        self.encoder.input
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }

    pub fn classes(&self) -> usize {
        self.head.classes
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        let e = &self.encoder;
        let h = &self.head;
        [&e.w1, &e.b1, &e.w2, &e.b2, &h.wc, &h.bc]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        let e = &mut self.encoder;
        let h = &mut self.head;
        [
            &mut e.w1, &mut e.b1, &mut e.w2, &mut e.b2, &mut h.wc, &mut h.bc,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Encoder input rows `[x, y, z, intensity-or-0, context...]`.
pub fn encoder_inputs(cloud: &PointCloud, exec: Exec) -> EmbeddingMatrix {
    let ctx = local_context_with(cloud, CONTEXT_NEIGHBORS, exec);
    inputs_with_context(cloud, &ctx)
}

pub fn inputs_with_context(cloud: &PointCloud, ctx: &[[f64; 3]]) -> EmbeddingMatrix {
    let width = 4 + CONTEXT_WIDTH;
    let mut m = EmbeddingMatrix::zeros(cloud.len(), width);
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let row = m.row_mut(i);
        for a in 0..3 {
            row[a] = p[a] * COORD_SCALE;
        }
        row[3] = cloud.intensity_at(i);
        row[4..].copy_from_slice(&ctx[i]);
    }
    m
}

/// Intermediate values of a forward pass needed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub inputs: EmbeddingMatrix,
    /// Hidden pre-activations `W1 x + b1`.
    pub hidden: EmbeddingMatrix,
    pub embeddings: EmbeddingMatrix,
    pub logits: EmbeddingMatrix,
}

#[inline]
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        *o = acc;
    }
}

/// Forward pass over prepared input rows.
pub fn forward_inputs(model: &SegModel, inputs: EmbeddingMatrix) -> ForwardCache {
    let enc = &model.encoder;
    let head = &model.head;
    assert_eq!(inputs.cols, enc.input, "input width");
    let n = inputs.rows;
    let mut hidden = EmbeddingMatrix::zeros(n, enc.hidden);
    let mut embeddings = EmbeddingMatrix::zeros(n, enc.dim);
    let mut logits = EmbeddingMatrix::zeros(n, head.classes);
    let mut act = vec![0.0; enc.hidden];
    for i in 0..n {
        let pre = hidden.row_mut(i);
        affine(&enc.w1, &enc.b1, inputs.row(i), pre);
        for (a, &p) in act.iter_mut().zip(pre.iter()) {
            *a = p.max(0.0);
        }
        let e = embeddings.row_mut(i);
        affine(&enc.w2, &enc.b2, &act, e);
        affine(&head.wc, &head.bc, e, logits.row_mut(i));
    }
    ForwardCache {
        inputs,
        hidden,
        embeddings,
        logits,
    }
}

/// Point embeddings and class logits for a cloud.
pub fn forward(model: &SegModel, cloud: &PointCloud) -> (EmbeddingMatrix, EmbeddingMatrix) {
    let cache = forward_inputs(model, encoder_inputs(cloud, Exec::default()));
    (cache.embeddings, cache.logits)
}

/// Mean cross-entropy over non-IGNORE points and its gradient w.r.t. the logits.
pub fn seg_loss(
    logits: &EmbeddingMatrix,
    labels: &[i32],
) -> Result<(f64, EmbeddingMatrix), EncoderError> {
    if labels.len() != logits.rows {
        return Err(EncoderError::ShapeMismatch(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows
        )));
    }
    let c = logits.cols;
    let mut n_valid = 0usize;
    for (index, &label) in labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        if label < 0 || label as usize >= c {
            return Err(EncoderError::LabelOutOfRange {
                index,
                label,
                num_classes: c,
            });
        }
        n_valid += 1;
    }
    if n_valid == 0 {
        return Err(EncoderError::NoValidLabels);
    }
    let inv = 1.0 / n_valid as f64;
    let mut grad = EmbeddingMatrix::zeros(logits.rows, c);
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label as usize];
        let g = grad.row_mut(i);
        for (k, gk) in g.iter_mut().enumerate() {
            let p = (row[k] - log_z).exp();
            *gk = (p - if k == label as usize { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok((total * inv, grad))
}

/// Row-wise softmax.
pub fn softmax(logits: &EmbeddingMatrix) -> EmbeddingMatrix {
    let mut out = logits.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Index of the largest entry per row (first one on ties).
pub fn argmax_rows(m: &EmbeddingMatrix) -> Vec<i32> {
    (0..m.rows)
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as i32
        })
        .collect()
}

/// Reverse-mode gradients of all parameters given the upstream gradients on
/// the logits (segmentation path) and on the embeddings (alignment path).
pub fn backward(
    model: &SegModel,
    cache: &ForwardCache,
    grad_logits: &EmbeddingMatrix,
    grad_embeddings: Option<&EmbeddingMatrix>,
) -> ModelGrads {
    let mut grads = ModelGrads::zeros_like(model);
    backward_into(model, cache, grad_logits, grad_embeddings, 1.0, &mut grads);
    grads
}

/// Like [`backward`] but accumulates `scale * gradient` into `grads`.
pub fn backward_into(
    model: &SegModel,
    cache: &ForwardCache,
    grad_logits: &EmbeddingMatrix,
    grad_embeddings: Option<&EmbeddingMatrix>,
    scale: f64,
    grads: &mut ModelGrads,
) {
    let enc = &model.encoder;
    let head = &model.head;
    let (input, hidden, dim, classes) = (enc.input, enc.hidden, enc.dim, head.classes);
    assert_eq!(grad_logits.rows, cache.logits.rows, "grad_logits rows");
    assert_eq!(grad_logits.cols, classes, "grad_logits cols");
    if let Some(ge) = grad_embeddings {
        assert_eq!(
            (ge.rows, ge.cols),
            (cache.embeddings.rows, dim),
            "grad_embeddings shape"
        );
    }
    let mut de = vec![0.0; dim];
    let mut da = vec![0.0; hidden];
    for i in 0..cache.inputs.rows {
        let gl = grad_logits.row(i);
        let e = cache.embeddings.row(i);
        let pre = cache.hidden.row(i);
        let x = cache.inputs.row(i);
        match grad_embeddings {
            Some(ge) => de.copy_from_slice(ge.row(i)),
            None => de.iter_mut().for_each(|v| *v = 0.0),
        }
        let head_active = gl.iter().any(|&g| g != 0.0);
        if head_active {
            for k in 0..classes {
                let g = gl[k] * scale;
                grads.bc[k] += g;
                let wrow = &head.wc[k * dim..(k + 1) * dim];
                let grow = &mut grads.wc[k * dim..(k + 1) * dim];
                for j in 0..dim {
                    grow[j] += g * e[j];
                    de[j] += gl[k] * wrow[j];
                }
            }
        }
        if de.iter().all(|&g| g == 0.0) {
            continue;
        }
        da.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..dim {
            let g = de[j];
            if g == 0.0 {
                continue;
            }
            grads.b2[j] += g * scale;
            let wrow = &enc.w2[j * hidden..(j + 1) * hidden];
            let grow = &mut grads.w2[j * hidden..(j + 1) * hidden];
            for h in 0..hidden {
                let act = pre[h].max(0.0);
                grow[h] += g * scale * act;
                da[h] += g * wrow[h];
            }
        }
        for h in 0..hidden {
            if pre[h] <= 0.0 {
                continue;
            }
            let g = da[h] * scale;
            grads.b1[h] += g;
            let grow = &mut grads.w1[h * input..(h + 1) * input];
            for (gw, &xv) in grow.iter_mut().zip(x) {
                *gw += g * xv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates per tensor and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &SegModel) -> Self {
        let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        Self::new(&shapes)
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay:
/// `p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(
    params: &mut [&mut Vec<f64>],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &AdamWConfig,
) {
    assert_eq!(params.len(), grads.len(), "tensor count");
    assert_eq!(params.len(), state.m.len(), "state tensor count");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (ti, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        assert_eq!(p.len(), g.len(), "tensor {ti} shape");
        let m = &mut state.m[ti];
        let v = &mut state.v[ti];
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.lr * cfg.weight_decay * p[j] + cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Applies one AdamW step to every tensor of a model.
pub fn optimizer_step(
    model: &mut SegModel,
    grads: &ModelGrads,
    state: &mut AdamState,
    cfg: &AdamWConfig,
) {
    let mut params = model.tensors_mut();
    adamw_step(&mut params, &grads.tensors(), state, cfg);
}

pub fn encode_checkpoint(model: &SegModel) -> Vec<u8> {
    let dims = [
        model.encoder.input,
        model.encoder.hidden,
        model.encoder.dim,
        model.head.classes,
        model.c_local,
    ];
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for t in model.tensors() {
        for &v in t {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SegModel, DataError> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let input = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let c_local = r.u32()? as usize;
    if c_local != CONTEXT_WIDTH || input != 4 + c_local {
        return Err(DataError::InvariantViolation(format!(
            "checkpoint input width {input} / context width {c_local} unsupported (expected {} / {CONTEXT_WIDTH})",
            4 + CONTEXT_WIDTH
        )));
    }
    let declared = [
        hidden * input,
        hidden,
        dim * hidden,
        dim,
        classes * dim,
        classes,
    ]
    .iter()
    .try_fold(0u64, |acc, &n| acc.checked_add(4 * n as u64));
    let actual = r.remaining() as u64;
    if declared != Some(actual) {
        return Err(DataError::SizeMismatch {
            declared: declared.unwrap_or(u64::MAX),
            actual,
        });
    }
    let mut model = SegModel::zeros(hidden, dim, classes);
    for t in model.tensors_mut() {
        for v in t.iter_mut() {
            *v = f64::from(r.finite_f32()?);
        }
    }
    Ok(model)
}

pub fn write_checkpoint(path: &Path, model: &SegModel) -> Result<(), DataError> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<SegModel, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_model_gives_zero_outputs() {
        let m = SegModel::zeros(5, 4, 3);
        let cloud =
            PointCloud::new(vec![[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]]).with_intensity(vec![0.3, 0.9]);
        let (e, l) = forward(&m, &cloud);
        assert!(e.data.iter().all(|&v| v == 0.0));
        assert!(l.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_network_reproduces_inputs() {
        // hidden = input, W1 = I; W2 selects the first three coordinates
        let mut m = SegModel::zeros(7, 3, 2);
        for i in 0..7 {
            m.encoder.w1[i * 7 + i] = 1.0;
        }
        for j in 0..3 {
            m.encoder.w2[j * 7 + j] = 1.0;
        }
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0], [4.0, 0.5, 6.0]]);
        let (e, _) = forward(&m, &cloud);
        for (i, p) in cloud.positions.iter().enumerate() {
            let want: Vec<f64> = p.iter().map(|v| v * COORD_SCALE).collect();
            assert_eq!(e.row(i), &want[..]);
        }
    }

    #[test]
    fn saturated_correct_logits() {
        let logits = EmbeddingMatrix::from_rows(&[vec![100.0, 0.0, 0.0], vec![0.0, 0.0, 100.0]]);
        let (loss, _) = seg_loss(&logits, &[0, 2]).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = EmbeddingMatrix::zeros(3, 5);
        let (loss, grad) = seg_loss(&logits, &[0, IGNORE, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!(grad.row(1).iter().all(|&g| g == 0.0));
        assert!((grad.row(0)[0] - (0.2 - 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn seg_loss_errors() {
        let logits = EmbeddingMatrix::zeros(2, 3);
        assert_eq!(
            seg_loss(&logits, &[IGNORE, IGNORE]),
            Err(EncoderError::NoValidLabels)
        );
        assert!(matches!(
            seg_loss(&logits, &[0, 3]),
            Err(EncoderError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            seg_loss(&logits, &[0]),
            Err(EncoderError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = SegModel::init(6, 4, 3, &mut rng);
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0], [0.2, 0.1, -1.0]]);
        let cache = forward_inputs(&m, encoder_inputs(&cloud, Exec::Sequential));
        let g = backward(
            &m,
            &cache,
            &EmbeddingMatrix::zeros(3, 3),
            Some(&EmbeddingMatrix::zeros(3, 4)),
        );
        assert_eq!(g, ModelGrads::zeros_like(&m));
    }

    #[test]
    fn alignment_path_leaves_head_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = SegModel::init(6, 4, 3, &mut rng);
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0], [0.2, 0.1, -1.0]]);
        let cache = forward_inputs(&m, encoder_inputs(&cloud, Exec::Sequential));
        let ge = EmbeddingMatrix {
            rows: 3,
            cols: 4,
            data: (0..12).map(|i| (i as f64 * 0.7).sin()).collect(),
        };
        let g = backward(&m, &cache, &EmbeddingMatrix::zeros(3, 3), Some(&ge));
        assert!(g.wc.iter().chain(&g.bc).all(|&v| v == 0.0));
        assert!(g.b2.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_noop() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut state = AdamState::new(&[3]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        for _ in 0..5 {
            adamw_step(&mut [&mut p], &[&[0.0; 3]], &mut state, &cfg);
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adamw_decoupled_decay() {
        let mut p = vec![2.0];
        let mut state = AdamState::new(&[1]);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut expected = 2.0;
        for _ in 0..4 {
            adamw_step(&mut [&mut p], &[&[0.0]], &mut state, &cfg);
            expected *= 1.0 - 0.01;
            assert!((p[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = SegModel::init(5, 4, 3, &mut rng);
        let bytes = encode_checkpoint(&m);
        assert_eq!(&bytes[..4], b"PADM");
        assert_eq!(bytes.len(), 24 + 4 * (5 * 7 + 5 + 4 * 5 + 4 + 3 * 4 + 3));
        let back = decode_checkpoint(&bytes).unwrap();
        for (a, b) in back.tensors().iter().zip(m.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, f64::from(*y as f32));
            }
        }
        assert_eq!(encode_checkpoint(&back), bytes);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(DataError::SizeMismatch { .. })
        ));
        assert!(matches!(
            decode_checkpoint(b"PADX"),
            Err(DataError::BadMagic { .. })
        ));
    }
}
