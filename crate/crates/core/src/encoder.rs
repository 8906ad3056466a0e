//! Feed-forward encoder with a cosine-similarity head.
//!
//! Logits are `P = Z / G` where `Z = WᵀF/‖F‖` against a frozen orthonormal `W`
//! and `G = sigmoid(BN(w_gᵀF))` is a per-sample sharpening scalar. Neither the
//! projection nor the sharpening layer has a bias; the batch norm on the
//! sharpening scalar has a learnable scale and no shift.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::contrastive::{self, AugmentationSpec};
use crate::data::Dataset;
use crate::error::{Result, RoddError};
use crate::linalg::{dot, norm, orthonormal_init, Matrix};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Features shorter than this have no usable direction.
pub const MIN_FEATURE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in × out`.
    pub weights: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul(&self.weights);
        if let Some(b) = &self.bias {
            for r in 0..out.rows() {
                for (o, bv) in out.row_mut(r).iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormState {
    pub gamma: f64,
    pub running_mean: f64,
    pub running_var: f64,
    pub momentum: f64,
}

impl Default for BatchNormState {
    fn default() -> Self {
        BatchNormState {
            gamma: 1.0,
            running_mean: 0.0,
            running_var: 1.0,
            momentum: BN_MOMENTUM,
        }
    }
}

/// Layer sizes for a fresh model.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        Architecture {
            input_dim,
            hidden: vec![128, 64],
            feature_dim: 16,
            classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    layers: Vec<DenseLayer>,
    w: Matrix,
    w_g: Vec<f64>,
    bn: BatchNormState,
}

#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub features: Matrix,
    pub z: Matrix,
    pub g: Vec<f64>,
    pub logits: Matrix,
}

/// Gradients for every trainable parameter; `W` has none.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Matrix, Option<Vec<f64>>)>,
    pub w_g: Vec<f64>,
    pub gamma: f64,
}

impl Gradients {
    /// Flattened in the same order as [`EncoderModel::trainable_params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w.data());
            if let Some(b) = b {
                out.extend_from_slice(b);
            }
        }
        out.extend_from_slice(&self.w_g);
        out.push(self.gamma);
        out
    }
}

struct BodyCache {
    /// Input to each layer; the last entry is the feature matrix.
    activations: Vec<Matrix>,
    /// Pre-activations of each layer.
    pre: Vec<Matrix>,
}

struct HeadCache {
    norms: Vec<f64>,
    s_hat: Vec<f64>,
    inv_std: f64,
    mode: Mode,
    batch_stats: Option<(f64, f64)>,
}

impl EncoderModel {
    /// He-initialized body, orthonormal frozen `W` and small random `w_g`.
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.input_dim == 0 || arch.feature_dim == 0 || arch.classes == 0 {
            return Err(RoddError::contract(
                "architecture dimensions must be positive",
            ));
        }
        let w = orthonormal_init(arch.feature_dim, arch.classes, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
        let mut dims = vec![arch.input_dim];
        dims.extend(&arch.hidden);
        dims.push(arch.feature_dim);
        let layers = dims
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect();
                DenseLayer {
                    weights: Matrix::from_vec_unchecked(fan_in, fan_out, data),
                    bias: Some(vec![0.0; fan_out]),
                }
            })
            .collect();
        let g_std = 1.0 / (arch.feature_dim as f64).sqrt();
        let w_g = (0..arch.feature_dim)
            .map(|_| g_std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        Ok(EncoderModel {
            layers,
            w,
            w_g,
            bn: BatchNormState::default(),
        })
    }

    /// Assembles a model from explicit parts, validating shapes and `W`.
    pub fn from_parts(
        layers: Vec<DenseLayer>,
        w: Matrix,
        w_g: Vec<f64>,
        bn: BatchNormState,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(RoddError::contract("encoder needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(RoddError::contract(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.as_ref().is_some_and(|b| b.len() != l.output_dim()) {
                return Err(RoddError::contract(format!(
                    "layer {i} bias has wrong length"
                )));
            }
        }
        let d = layers.last().unwrap().output_dim();
        if w.rows() != d || w_g.len() != d {
            return Err(RoddError::contract(format!(
                "head expects feature dimension {d}, got W {}x{} and w_g {}",
                w.rows(),
                w.cols(),
                w_g.len()
            )));
        }
        if w.orthonormality_error() > 1e-8 {
            return Err(RoddError::contract("W must have orthonormal columns"));
        }
        if bn.running_var <= 0.0 || !bn.running_var.is_finite() {
            return Err(RoddError::contract("running variance must be positive"));
        }
        Ok(EncoderModel { layers, w, w_g, bn })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn projection(&self) -> &Matrix {
        &self.w
    }

    pub fn sharpening_weights(&self) -> &[f64] {
        &self.w_g
    }

    pub fn batch_norm(&self) -> &BatchNormState {
        &self.bn
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn classes(&self) -> usize {
        self.w.cols()
    }

    /// Body parameters, then `w_g`, then γ.
    pub fn trainable_params(&self) -> Vec<f64> {
        let mut out = self.body_params();
        out.extend_from_slice(&self.w_g);
        out.push(self.bn.gamma);
        out
    }

    pub fn set_trainable_params(&mut self, params: &[f64]) {
        let used = self.set_body_params(params);
        let d = self.w_g.len();
        self.w_g.copy_from_slice(&params[used..used + d]);
        self.bn.gamma = params[used + d];
        assert_eq!(params.len(), used + d + 1, "parameter vector length");
    }

    pub fn body_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            if let Some(b) = &l.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    /// Returns how many entries of `params` were consumed.
    pub fn set_body_params(&mut self, params: &[f64]) -> usize {
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.weights.data().len();
            l.weights.data_mut().copy_from_slice(&params[at..at + n]);
            at += n;
            if let Some(b) = &mut l.bias {
                let n = b.len();
                b.copy_from_slice(&params[at..at + n]);
                at += n;
            }
        }
        at
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(RoddError::contract(format!(
                "batch has {} columns, encoder expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        if batch.rows() == 0 {
            return Err(RoddError::contract("empty batch"));
        }
        Ok(())
    }

    fn body_forward(&self, x: &Matrix) -> BodyCache {
        let mut activations = vec![x.clone()];
        let mut pre = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let p = layer.apply(activations.last().unwrap());
            let a = if i == last {
                p.clone()
            } else {
                p.map(|v| v.max(0.0))
            };
            pre.push(p);
            activations.push(a);
        }
        BodyCache { activations, pre }
    }

    /// Backpropagates `d_features` through the body; returns layer gradients
    /// and the gradient with respect to the input batch.
    fn body_backward(
        &self,
        cache: &BodyCache,
        d_features: Matrix,
    ) -> (Vec<(Matrix, Option<Vec<f64>>)>, Matrix) {
        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = d_features;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let mut d_pre = upstream;
            if i != last {
                for (g, &p) in d_pre.data_mut().iter_mut().zip(cache.pre[i].data()) {
                    if p <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let dw = cache.activations[i].t_matmul(&d_pre);
            let db = layer.bias.as_ref().map(|_| {
                let mut acc = vec![0.0; d_pre.cols()];
                for r in 0..d_pre.rows() {
                    for (a, v) in acc.iter_mut().zip(d_pre.row(r)) {
                        *a += v;
                    }
                }
                acc
            });
            upstream = d_pre.matmul_t(&layer.weights);
            grads.push((dw, db));
        }
        grads.reverse();
        (grads, upstream)
    }

    /// Body output only; no norm check.
    pub fn encode(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        Ok(self.body_forward(batch).activations.pop().unwrap())
    }

    fn head_forward(&self, features: &Matrix, mode: Mode) -> Result<(ForwardRecord, HeadCache)> {
        let n = features.rows();
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let r = norm(features.row(i));
            if !(r >= MIN_FEATURE_NORM) {
                return Err(RoddError::DegenerateFeature { index: i, norm: r });
            }
            norms.push(r);
        }
        let mut z = features.matmul(&self.w);
        for (i, &r) in norms.iter().enumerate() {
            z.row_mut(i)
                .iter_mut()
                .for_each(|v| *v = (*v / r).clamp(-1.0, 1.0));
        }

        let s: Vec<f64> = (0..n).map(|i| dot(features.row(i), &self.w_g)).collect();
        let (mean, var, batch_stats) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(RoddError::contract(
                        "train-mode batch norm needs at least two samples",
                    ));
                }
                let mean = s.iter().sum::<f64>() / n as f64;
                let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                (mean, var, Some((mean, var)))
            }
            Mode::Eval => (self.bn.running_mean, self.bn.running_var, None),
        };
        let inv_std = 1.0 / (var + BN_EPS).sqrt();
        let s_hat: Vec<f64> = s.iter().map(|v| (v - mean) * inv_std).collect();
        let g: Vec<f64> = s_hat.iter().map(|&h| sigmoid(self.bn.gamma * h)).collect();

        let mut logits = z.clone();
        for (i, &gi) in g.iter().enumerate() {
            logits.row_mut(i).iter_mut().for_each(|v| *v /= gi);
        }
        Ok((
            ForwardRecord {
                features: features.clone(),
                z,
                g,
                logits,
            },
            HeadCache {
                norms,
                s_hat,
                inv_std,
                mode,
                batch_stats,
            },
        ))
    }

    /// Returns `(dF, dw_g, dγ)` given the logit gradient.
    fn head_backward(
        &self,
        rec: &ForwardRecord,
        cache: &HeadCache,
        d_logits: &Matrix,
    ) -> (Matrix, Vec<f64>, f64) {
        let n = rec.features.rows();
        let d = self.feature_dim();
        let mut d_features = Matrix::zeros(n, d);
        let mut d_shat = vec![0.0; n];
        let mut d_gamma = 0.0;
        for i in 0..n {
            let g = rec.g[i];
            let dp = d_logits.row(i);
            let zi = rec.z.row(i);
            let dz: Vec<f64> = dp.iter().map(|v| v / g).collect();
            let dg = -dot(dp, zi) / (g * g);
            let db = dg * g * (1.0 - g);
            d_gamma += db * cache.s_hat[i];
            d_shat[i] = db * self.bn.gamma;

            // dF from Z = WᵀF/‖F‖.
            let r = cache.norms[i];
            let w_dz: Vec<f64> = (0..d).map(|k| dot(self.w.row(k), &dz)).collect();
            let zdz = dot(zi, &dz);
            let fi = rec.features.row(i);
            for (k, out) in d_features.row_mut(i).iter_mut().enumerate() {
                *out = (w_dz[k] - zdz * fi[k] / r) / r;
            }
        }
        let ds: Vec<f64> = match cache.mode {
            Mode::Train => {
                let nf = n as f64;
                let mean_d = d_shat.iter().sum::<f64>() / nf;
                let mean_dh = d_shat
                    .iter()
                    .zip(&cache.s_hat)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / nf;
                d_shat
                    .iter()
                    .zip(&cache.s_hat)
                    .map(|(&dh, &h)| cache.inv_std * (dh - mean_d - h * mean_dh))
                    .collect()
            }
            Mode::Eval => d_shat.iter().map(|v| v * cache.inv_std).collect(),
        };
        let mut d_wg = vec![0.0; d];
        for i in 0..n {
            let fi = rec.features.row(i);
            for k in 0..d {
                d_wg[k] += ds[i] * fi[k];
            }
            for (out, wg) in d_features.row_mut(i).iter_mut().zip(&self.w_g) {
                *out += ds[i] * wg;
            }
        }
        (d_features, d_wg, d_gamma)
    }

    /// Full forward pass. Train mode normalizes with batch statistics and
    /// updates the running statistics; eval mode uses the running statistics.
    pub fn forward(&mut self, batch: &Matrix, mode: Mode) -> Result<ForwardRecord> {
        self.check_input(batch)?;
        let body = self.body_forward(batch);
        let (rec, cache) = self.head_forward(body.activations.last().unwrap(), mode)?;
        if let Some(stats) = cache.batch_stats {
            self.update_running_stats(stats, batch.rows());
        }
        Ok(rec)
    }

    fn update_running_stats(&mut self, (mean, var): (f64, f64), n: usize) {
        let n = n as f64;
        let unbiased = var * n / (n - 1.0);
        let m = self.bn.momentum;
        self.bn.running_mean = (1.0 - m) * self.bn.running_mean + m * mean;
        self.bn.running_var =
            ((1.0 - m) * self.bn.running_var + m * unbiased).max(f64::MIN_POSITIVE);
    }

    /// Eval-mode forward pass; leaves the model untouched.
    pub fn forward_eval(&self, batch: &Matrix) -> Result<ForwardRecord> {
        self.check_input(batch)?;
        let body = self.body_forward(batch);
        Ok(self
            .head_forward(body.activations.last().unwrap(), Mode::Eval)?
            .0)
    }

    /// Gradient of `Σ d_logits ⊙ P` with respect to the input batch.
    pub fn input_gradient(&self, batch: &Matrix, mode: Mode, d_logits: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let body = self.body_forward(batch);
        let (rec, cache) = self.head_forward(body.activations.last().unwrap(), mode)?;
        let (d_features, _, _) = self.head_backward(&rec, &cache, d_logits);
        Ok(self.body_backward(&body, d_features).1)
    }

    /// Gradient of `Σ d_features ⊙ F` with respect to the input batch.
    pub fn feature_input_gradient(&self, batch: &Matrix, d_features: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let body = self.body_forward(batch);
        Ok(self.body_backward(&body, d_features.clone()).1)
    }

    /// Body-only gradients of `Σ d_features ⊙ F`.
    pub(crate) fn body_gradients(
        &self,
        batch: &Matrix,
        d_features: impl FnOnce(&Matrix) -> Result<(f64, Matrix)>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_input(batch)?;
        let body = self.body_forward(batch);
        let (loss, df) = d_features(body.activations.last().unwrap())?;
        let (grads, _) = self.body_backward(&body, df);
        let mut flat = Vec::new();
        for (w, b) in grads {
            flat.extend_from_slice(w.data());
            if let Some(b) = b {
                flat.extend(b);
            }
        }
        Ok((loss, flat))
    }

    /// `μ·CE(softmax(P), labels)` (batch mean), plus the spectral contrastive
    /// term `‖A − FFᵀ‖²/n²` over `pairs` when given. Uses train-mode batch norm
    /// without touching the running statistics.
    pub fn loss_and_grad(
        &self,
        batch: &Matrix,
        labels: &[usize],
        mu: f64,
        pairs: Option<&[(usize, usize)]>,
    ) -> Result<(f64, Gradients)> {
        self.loss_grad_stats(batch, labels, mu, pairs)
            .map(|(l, g, _)| (l, g))
    }

    /// [`Self::loss_and_grad`] plus the batch mean/variance of the sharpening scalar.
    fn loss_grad_stats(
        &self,
        batch: &Matrix,
        labels: &[usize],
        mu: f64,
        pairs: Option<&[(usize, usize)]>,
    ) -> Result<(f64, Gradients, (f64, f64))> {
        self.check_input(batch)?;
        let n = batch.rows();
        if labels.len() != n {
            return Err(RoddError::contract(format!(
                "{} labels for {n} samples",
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.classes())
        {
            return Err(RoddError::contract(format!(
                "label {l} of sample {i} is outside [0, {})",
                self.classes()
            )));
        }
        let body = self.body_forward(batch);
        let features = body.activations.last().unwrap();
        let (rec, cache) = self.head_forward(features, Mode::Train)?;

        let mut loss = 0.0;
        let mut d_logits = Matrix::zeros(n, self.classes());
        for i in 0..n {
            let (lse, probs) = log_softmax_parts(rec.logits.row(i));
            loss += lse - rec.logits[(i, labels[i])];
            for (k, p) in probs.into_iter().enumerate() {
                let target = if k == labels[i] { 1.0 } else { 0.0 };
                d_logits[(i, k)] = mu * (p - target) / n as f64;
            }
        }
        loss *= mu / n as f64;

        let (mut d_features, d_wg, d_gamma) = self.head_backward(&rec, &cache, &d_logits);
        if let Some(pairs) = pairs {
            let a = contrastive::batch_adjacency(pairs, n)?;
            let (cl, grad) = contrastive::spectral_contrastive_loss(features, &a)?;
            let scale = 1.0 / (n * n) as f64;
            loss += cl * scale;
            d_features = d_features.add(&grad.scale(scale));
        }
        let (layers, _) = self.body_backward(&body, d_features);
        Ok((
            loss,
            Gradients {
                layers,
                w_g: d_wg,
                gamma: d_gamma,
            },
            cache
                .batch_stats
                .expect("train mode records batch statistics"),
        ))
    }

    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        let rec = self.forward_eval(inputs)?;
        Ok((0..rec.logits.rows())
            .map(|i| argmax(rec.logits.row(i)))
            .collect())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            put_matrix(&mut out, &l.weights);
            match &l.bias {
                Some(b) => {
                    out.extend_from_slice(&1u32.to_le_bytes());
                    b.iter()
                        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                None => out.extend_from_slice(&0u32.to_le_bytes()),
            }
        }
        put_matrix(&mut out, &self.w);
        for v in
            self.w_g
                .iter()
                .chain([&self.bn.gamma, &self.bn.running_mean, &self.bn.running_var])
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, at: 0 };
        let magic = r.take(CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(RoddError::Format {
                offset: 0,
                message: "bad magic: expected RODDMODL1".into(),
            });
        }
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let weights = r.matrix()?;
            let bias = match r.u32()? {
                0 => None,
                1 => Some(r.f64s(weights.cols())?),
                other => {
                    return Err(RoddError::Format {
                        offset: (r.at - 4) as u64,
                        message: format!("bias flag must be 0 or 1, found {other}"),
                    })
                }
            };
            layers.push(DenseLayer { weights, bias });
        }
        let w = r.matrix()?;
        let w_g = r.f64s(w.rows())?;
        let tail = r.f64s(3)?;
        if r.at != bytes.len() {
            return Err(RoddError::Format {
                offset: r.at as u64,
                message: format!("{} trailing bytes", bytes.len() - r.at),
            });
        }
        let bn = BatchNormState {
            gamma: tail[0],
            running_mean: tail[1],
            running_var: tail[2],
            momentum: BN_MOMENTUM,
        };
        EncoderModel::from_parts(layers, w, w_g, bn)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_checkpoint_bytes())
            .map_err(|e| RoddError::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref()).map_err(|e| RoddError::io(path.as_ref(), e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"RODDMODL1";

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    m.data()
        .iter()
        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(RoddError::Format {
                offset: self.at as u64,
                message: format!(
                    "truncated checkpoint: needed {n} more bytes, found {}",
                    self.bytes.len() - self.at
                ),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| RoddError::Format {
            offset: self.at as u64,
            message: "size overflow".into(),
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let start = self.at;
        let data = self.f64s(rows * cols)?;
        Matrix::new(rows, cols, data).map_err(|e| RoddError::Format {
            offset: start as u64,
            message: e.to_string(),
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    let g = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // Keep strictly inside (0, 1).
    g.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `(log Σ exp, softmax)` computed stably.
pub fn log_softmax_parts(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (max + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveFinetune {
    pub augmentation: AugmentationSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub mu: f64,
    /// L2 penalty on every trainable parameter except γ.
    pub weight_decay: f64,
    pub seed: u64,
    /// When set, each batch is doubled with augmented views and the spectral
    /// contrastive term is added to the objective.
    pub contrastive: Option<ContrastiveFinetune>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            mu: 1.0,
            weight_decay: 0.0,
            seed: 0,
            contrastive: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// SGD with heavy-ball momentum on a flat parameter vector.
pub(crate) struct Sgd {
    velocity: Vec<f64>,
    momentum: f64,
}

impl Sgd {
    pub(crate) fn new(len: usize, momentum: f64) -> Self {
        Sgd {
            velocity: vec![0.0; len],
            momentum,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

pub(crate) fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Shuffled mini-batches; a trailing batch of one sample is merged into the previous one.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size.max(2))
        .map(<[usize]>::to_vec)
        .collect();
    if batches.len() > 1 && batches.last().unwrap().len() == 1 {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Fine-tunes the body, `w_g` and γ with `W` frozen.
pub fn train(
    model: &mut EncoderModel,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    let labels = dataset.labels()?;
    if dataset.len() < 2 {
        return Err(RoddError::contract("training needs at least two samples"));
    }
    if dataset.input_dim() != model.input_dim() {
        return Err(RoddError::contract(
            "dataset dimension does not match the encoder",
        ));
    }
    for class in 0..model.classes() {
        if !labels.contains(&class) {
            return Err(RoddError::contract(format!(
                "class {class} has no training samples"
            )));
        }
    }
    if config.epochs == 0 {
        return Ok(Vec::new());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps_per_epoch = epoch_batches(dataset.len(), config.batch_size, &mut rng.clone()).len();
    let total_steps = steps_per_epoch * config.epochs;
    let mut params = model.trainable_params();
    let mut opt = Sgd::new(params.len(), config.momentum);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch_idx in epoch_batches(dataset.len(), config.batch_size, &mut rng) {
            let mut x = dataset.inputs.select_rows(&batch_idx);
            let mut y: Vec<usize> = batch_idx.iter().map(|&i| labels[i]).collect();
            let pairs = match &config.contrastive {
                Some(c) => {
                    let (views, pairs) =
                        contrastive::two_view_batch(&x, &c.augmentation, rng_u64(&mut rng))?;
                    x = views;
                    y = y.iter().chain(y.iter()).copied().collect();
                    Some(pairs)
                }
                None => None,
            };
            let (loss, grads, stats) =
                model.loss_grad_stats(&x, &y, config.mu, pairs.as_deref())?;
            if !loss.is_finite() {
                return Err(RoddError::Divergence { epoch, loss });
            }
            model.update_running_stats(stats, x.rows());
            let mut grads = grads.to_flat();
            if config.weight_decay > 0.0 {
                let decayed = grads.len() - 1;
                for (g, p) in grads[..decayed].iter_mut().zip(&params) {
                    *g += config.weight_decay * p;
                }
            }
            opt.step(&mut params, &grads, cosine_lr(config.lr, step, total_steps));
            model.set_trainable_params(&params);
            step += 1;
            loss_sum += loss * batch_idx.len() as f64;
            seen += batch_idx.len();
        }
        let preds = model.predict(&dataset.inputs)?;
        let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        history.push(EpochStats {
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / dataset.len() as f64,
        });
    }
    Ok(history)
}

pub(crate) fn rng_u64(rng: &mut ChaCha8Rng) -> u64 {
    use rand::Rng;
    rng.random()
}

/// Central finite differences of the training loss over every trainable parameter.
pub fn numeric_gradient(
    model: &EncoderModel,
    batch: &Matrix,
    labels: &[usize],
    mu: f64,
    pairs: Option<&[(usize, usize)]>,
    eps: f64,
) -> Result<Vec<f64>> {
    let base = model.trainable_params();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut params = base.clone();
    for i in 0..base.len() {
        params[i] = base[i] + eps;
        probe.set_trainable_params(&params);
        let plus = probe.loss_and_grad(batch, labels, mu, pairs)?.0;
        params[i] = base[i] - eps;
        probe.set_trainable_params(&params);
        let minus = probe.loss_and_grad(batch, labels, mu, pairs)?.0;
        params[i] = base[i];
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// `max |a − n| / max(|a|, |n|, 1e-8)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Worst relative disagreement between backpropagated and finite-difference gradients.
pub fn grad_check(model: &EncoderModel, batch: &Matrix, labels: &[usize], eps: f64) -> Result<f64> {
    if !(eps > 1e-8 && eps < 1e-2) {
        return Err(RoddError::contract("eps must lie in (1e-8, 1e-2)"));
    }
    let analytic = model.loss_and_grad(batch, labels, 1.0, None)?.1.to_flat();
    let numeric = numeric_gradient(model, batch, labels, 1.0, None, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(n: usize, dim: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(
            n,
            dim,
            (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn small_model(seed: u64) -> EncoderModel {
        let arch = Architecture {
            input_dim: 5,
            hidden: vec![7],
            feature_dim: 4,
            classes: 3,
        };
        EncoderModel::new(&arch, seed).unwrap()
    }

    fn identity_model(d: usize) -> EncoderModel {
        let layer = DenseLayer {
            weights: Matrix::identity(d),
            bias: None,
        };
        EncoderModel::from_parts(
            vec![layer],
            Matrix::identity(d),
            vec![0.3; d],
            BatchNormState::default(),
        )
        .unwrap()
    }

    #[test]
    fn cosine_with_own_column_is_one() {
        let model = small_model(1);
        let w = model.projection().clone();
        let mut head_only = identity_model(4);
        head_only.w = w.clone();
        let x = Matrix::new(1, 4, w.column(1)).unwrap();
        let rec = head_only.forward_eval(&x).unwrap();
        assert!((rec.z[(0, 1)] - 1.0).abs() < 1e-12);
        assert!(rec.z.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn half_sharpening_doubles_logits() {
        // Eval mode with w_g = 0 and running mean 0 gives g = sigmoid(0) = 0.5.
        let mut m = identity_model(3);
        m.w_g = vec![0.0; 3];
        let x = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let rec = m.forward_eval(&x).unwrap();
        assert!(rec.g.iter().all(|&g| g == 0.5));
        for (p, z) in rec.logits.data().iter().zip(rec.z.data()) {
            assert_eq!(*p, 2.0 * z);
        }
    }

    #[test]
    fn degenerate_feature_is_reported_with_index() {
        let m = identity_model(2);
        let x = Matrix::new(3, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        match m.forward_eval(&x) {
            Err(RoddError::DegenerateFeature { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn train_mode_updates_running_stats_eval_does_not() {
        let mut m = small_model(2);
        let x = random_batch(6, 5, 3);
        let before = *m.batch_norm();
        m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(before, *m.batch_norm());
        m.forward(&x, Mode::Train).unwrap();
        assert_ne!(before.running_mean, m.batch_norm().running_mean);
        assert!(m.batch_norm().running_var > 0.0);
        assert!(m.forward(&random_batch(1, 5, 3), Mode::Train).is_err());
    }

    #[test]
    fn eval_forward_is_bitwise_repeatable() {
        let m = small_model(4);
        let x = random_batch(5, 5, 9);
        let a = m.forward_eval(&x).unwrap();
        let b = m.forward_eval(&x).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn uniform_logits_give_log_l() {
        let (lse, probs) = log_softmax_parts(&[0.3; 4]);
        assert!((lse - 0.3 - 4f64.ln()).abs() < 1e-15);
        assert!(probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn sharper_scaling_lowers_cross_entropy() {
        let z = [0.8, 0.1, -0.3];
        let ce = |g: f64| {
            let p: Vec<f64> = z.iter().map(|v| v / g).collect();
            let (lse, _) = log_softmax_parts(&p);
            lse - p[0]
        };
        assert!(ce(0.5) < ce(0.9));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let arch = Architecture {
            input_dim: 3,
            hidden: vec![6],
            feature_dim: 4,
            classes: 2,
        };
        let m = EncoderModel::new(&arch, 17).unwrap();
        let x = random_batch(4, 3, 5);
        let ones = Matrix::new(4, 2, vec![1.0; 8]).unwrap();
        for mode in [Mode::Eval, Mode::Train] {
            let analytic = m.input_gradient(&x, mode, &ones).unwrap();
            let sum_logits = |x: &Matrix| -> f64 {
                let body = m.body_forward(x);
                let (rec, _) = m
                    .head_forward(body.activations.last().unwrap(), mode)
                    .unwrap();
                rec.logits.data().iter().sum()
            };
            let eps = 1e-5;
            let mut numeric = Vec::new();
            for i in 0..x.data().len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += eps;
                let mut xm = x.clone();
                xm.data_mut()[i] -= eps;
                numeric.push((sum_logits(&xp) - sum_logits(&xm)) / (2.0 * eps));
            }
            let err = max_relative_error(analytic.data(), &numeric);
            assert!(err <= 1e-4, "{mode:?}: {err}");
        }
    }

    #[test]
    fn identity_model_grad_check_is_tight() {
        let m = identity_model(3);
        let x = random_batch(5, 3, 1);
        let err = grad_check(&m, &x, &[0, 1, 2, 1, 0], 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn grad_check_with_contrastive_term() {
        let m = small_model(6);
        let x = random_batch(6, 5, 2);
        let labels = [0, 1, 2, 0, 1, 2];
        let pairs = [(0, 3), (1, 4), (2, 5)];
        let analytic = m
            .loss_and_grad(&x, &labels, 0.7, Some(&pairs))
            .unwrap()
            .1
            .to_flat();
        let numeric = numeric_gradient(&m, &x, &labels, 0.7, Some(&pairs), 1e-5).unwrap();
        assert!(max_relative_error(&analytic, &numeric) <= 1e-4);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let m = small_model(3);
        let x = random_batch(6, 5, 4);
        let labels = [0, 1, 2, 2, 1, 0];
        let mut analytic = m.loss_and_grad(&x, &labels, 1.0, None).unwrap().1.to_flat();
        let numeric = numeric_gradient(&m, &x, &labels, 1.0, None, 1e-5).unwrap();
        assert!(max_relative_error(&analytic, &numeric) <= 1e-4);
        analytic[3] += 0.1;
        assert!(max_relative_error(&analytic, &numeric) > 1e-2);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let m = small_model(3);
        let x = random_batch(2, 5, 4);
        assert!(matches!(
            m.loss_and_grad(&x, &[0, 3], 1.0, None),
            Err(RoddError::Contract(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_exact() {
        let mut m = small_model(8);
        m.layers[1].bias = None;
        m.forward(&random_batch(4, 5, 1), Mode::Train).unwrap();
        let bytes = m.to_checkpoint_bytes();
        assert_eq!(&bytes[..9], b"RODDMODL1");
        let back = EncoderModel::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint_bytes(), bytes);
        assert!(EncoderModel::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
