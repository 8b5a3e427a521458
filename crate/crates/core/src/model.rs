//! Embedding encoder plus linear emotion head, with exact backpropagation
//! and a binary checkpoint format.
//!
//! Three encoders share one head:
//!
//! * `bypass` takes precomputed `D`-dimensional embeddings as is.
//! * `mlp` pools each mel band over time into `[mean; std]` (2F values) and
//!   applies dense layers with ReLU between them.
//! * `cnn-small` runs three blocks of 3x3 convolution (zero padded), ReLU and
//!   2x2 max-pooling, averages the remaining grid and projects to `D`.
//!
//! Computation is in `f64`. Parameters that leave the crate (initialization,
//! training, checkpoints) hold values representable in `f32`, which is the
//! storage precision of checkpoints, so saving and loading is bit-exact.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::NUM_CLASSES;
use crate::features::Spectrogram;
use crate::ssl::{self, ClassVector, Objective};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SERM1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FEMB_MAGIC: &[u8; 5] = b"FEMB1";
/// Embedding width of the externally pretrained backbone.
pub const BYPASS_DEFAULT_DIM: usize = 1024;

/// Samples per reduction chunk. Fixed so the summation order never depends
/// on the thread count.
const CHUNK: usize = 8;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("input {index}: {msg}")]
    InputShape { index: usize, msg: String },
    #[error("input {0} contains non-finite values")]
    NonFiniteInput(usize),
    #[error("non-finite value in the forward pass ({0})")]
    NonFinite(String),
    #[error("{0} targets/weights for a batch of {1}")]
    TargetShape(usize, usize),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("checkpoint {path}: truncated at byte offset {offset} while reading {what}")]
    Truncated {
        path: String,
        offset: usize,
        what: String,
    },
    #[error("checkpoint architecture {found} does not match requested {expected}")]
    ArchMismatch { expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderKind {
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "cnn-small")]
    CnnSmall,
    #[serde(rename = "bypass")]
    Bypass,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Mlp => "mlp",
            EncoderKind::CnnSmall => "cnn-small",
            EncoderKind::Bypass => "bypass",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mlp" => Ok(EncoderKind::Mlp),
            "cnn-small" => Ok(EncoderKind::CnnSmall),
            "bypass" => Ok(EncoderKind::Bypass),
            other => Err(format!("unknown encoder {other:?} (expected mlp, cnn-small or bypass)")),
        }
    }
}

/// Architecture descriptor. `hidden` holds the dense widths for `mlp` and the
/// three convolution channel counts for `cnn-small`; `bypass` ignores it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub kind: EncoderKind,
    pub embedding_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_n_mels")]
    pub n_mels: usize,
}

fn default_n_mels() -> usize {
    64
}

pub const CNN_DEFAULT_CHANNELS: [usize; 3] = [16, 32, 64];

impl ArchSpec {
    pub fn bypass(embedding_dim: usize) -> Self {
        Self {
            kind: EncoderKind::Bypass,
            embedding_dim,
            hidden: Vec::new(),
            n_mels: default_n_mels(),
        }
    }

    pub fn mlp(embedding_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            kind: EncoderKind::Mlp,
            embedding_dim,
            hidden,
            n_mels: default_n_mels(),
        }
    }

    pub fn cnn_small(embedding_dim: usize) -> Self {
        Self {
            kind: EncoderKind::CnnSmall,
            embedding_dim,
            hidden: CNN_DEFAULT_CHANNELS.to_vec(),
            n_mels: default_n_mels(),
        }
    }

    pub fn with_n_mels(mut self, n_mels: usize) -> Self {
        self.n_mels = n_mels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidArch(m.to_string()));
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden sizes must be positive");
        }
        match self.kind {
            EncoderKind::Bypass => Ok(()),
            EncoderKind::Mlp if self.n_mels == 0 => bad("n_mels must be positive"),
            EncoderKind::Mlp => Ok(()),
            EncoderKind::CnnSmall if self.hidden.len() != 3 => {
                bad("cnn-small needs exactly three channel counts")
            }
            EncoderKind::CnnSmall if self.n_mels < 8 => bad("cnn-small needs n_mels >= 8"),
            EncoderKind::CnnSmall => Ok(()),
        }
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self.kind {
            EncoderKind::Bypass => {}
            EncoderKind::Mlp => {
                let mut fan_in = 2 * self.n_mels;
                let widths = self.hidden.iter().chain(std::iter::once(&self.embedding_dim));
                for (l, &w) in widths.enumerate() {
                    out.push((format!("enc.dense{l}.weight"), vec![w, fan_in]));
                    out.push((format!("enc.dense{l}.bias"), vec![w]));
                    fan_in = w;
                }
            }
            EncoderKind::CnnSmall => {
                let mut c_in = 1;
                for (l, &c) in self.hidden.iter().enumerate() {
                    out.push((format!("enc.conv{l}.weight"), vec![c, c_in, 3, 3]));
                    out.push((format!("enc.conv{l}.bias"), vec![c]));
                    c_in = c;
                }
                out.push(("enc.proj.weight".into(), vec![self.embedding_dim, c_in]));
                out.push(("enc.proj.bias".into(), vec![self.embedding_dim]));
            }
        }
        out.push(("head.weight".into(), vec![NUM_CLASSES, self.embedding_dim]));
        out.push(("head.bias".into(), vec![NUM_CLASSES]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchSpec,
    /// Ordered as [`ArchSpec::tensor_layout`].
    pub tensors: Vec<Tensor>,
}

/// Co-shaped mirror of [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

impl ModelParams {
    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn head(&self) -> (&Tensor, &Tensor) {
        let n = self.tensors.len();
        (&self.tensors[n - 2], &self.tensors[n - 1])
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn quantize(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = arch
        .tensor_layout()
        .into_iter()
        .map(|(name, shape)| {
            let mut t = Tensor::zeros(&shape);
            if name.ends_with(".weight") {
                let a = glorot_limit(&shape);
                for v in &mut t.data {
                    *v = rng.random_range(-a..a) as f32 as f64;
                }
            }
            t
        })
        .collect();
    Ok(ModelParams {
        arch: arch.clone(),
        tensors,
    })
}

/// `sqrt(6 / (fan_in + fan_out))` for dense `[out, in]` or conv `[out, in, kh, kw]`.
pub fn glorot_limit(shape: &[usize]) -> f64 {
    let receptive: usize = shape[2..].iter().product();
    let fan_out = shape[0] * receptive;
    let fan_in = shape[1] * receptive;
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Model input: a log-mel spectrogram or a precomputed embedding.
#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Spectrogram(Spectrogram),
    Embedding(Vec<f32>),
}

impl Sample {
    fn values(&self) -> &[f32] {
        match self {
            Sample::Spectrogram(s) => &s.values,
            Sample::Embedding(e) => e,
        }
    }

    /// `alpha * self + (1 - alpha) * other`, or `None` if the shapes differ.
    pub fn blend(&self, other: &Sample, alpha: f64) -> Option<Sample> {
        let mix = |a: &[f32], b: &[f32]| -> Vec<f32> {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| (alpha * x as f64 + (1.0 - alpha) * y as f64) as f32)
                .collect()
        };
        match (self, other) {
            (Sample::Embedding(a), Sample::Embedding(b)) if a.len() == b.len() => {
                Some(Sample::Embedding(mix(a, b)))
            }
            (Sample::Spectrogram(a), Sample::Spectrogram(b))
                if a.n_mels == b.n_mels && a.n_frames == b.n_frames =>
            {
                Some(Sample::Spectrogram(Spectrogram::new(
                    a.n_mels,
                    a.n_frames,
                    mix(&a.values, &b.values),
                    a.normalized && b.normalized,
                )))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutput {
    pub probs: Vec<ClassVector>,
    pub logits: Vec<ClassVector>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &ClassVector) -> ClassVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.map(|z| (z - max).exp());
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

fn check_input(arch: &ArchSpec, index: usize, x: &Sample) -> Result<()> {
    let shape_err = |msg: String| Err(ModelError::InputShape { index, msg });
    match (arch.kind, x) {
        (EncoderKind::Bypass, Sample::Embedding(e)) if e.len() != arch.embedding_dim => shape_err(
            format!("embedding has {} dims, model expects {}", e.len(), arch.embedding_dim),
        ),
        (EncoderKind::Bypass, Sample::Embedding(_)) => Ok(()),
        (EncoderKind::Bypass, Sample::Spectrogram(_)) => {
            shape_err("bypass encoder takes embeddings, got a spectrogram".into())
        }
        (_, Sample::Embedding(_)) => {
            shape_err(format!("{} encoder takes spectrograms, got an embedding", arch.kind.name()))
        }
        (_, Sample::Spectrogram(s)) if s.n_mels != arch.n_mels => shape_err(format!(
            "spectrogram has {} mel bands, model expects {}",
            s.n_mels, arch.n_mels
        )),
        (EncoderKind::CnnSmall, Sample::Spectrogram(s)) if s.n_frames < 8 => {
            shape_err(format!("cnn-small needs at least 8 frames, got {}", s.n_frames))
        }
        (_, Sample::Spectrogram(s)) if s.n_frames == 0 => shape_err("empty spectrogram".into()),
        _ => Ok(()),
    }?;
    if x.values().iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteInput(index));
    }
    Ok(())
}

/// `out = W x + b` with `W` stored `[out, in]` row-major.
fn dense(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let n_in = w.shape[1];
    w.data
        .chunks_exact(n_in)
        .zip(&b.data)
        .map(|(row, &bias)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn dense_backward(w: &Tensor, x: &[f64], dout: &[f64], gw: &mut Tensor, gb: &mut Tensor, dx: Option<&mut Vec<f64>>) {
    let n_in = w.shape[1];
    for (o, &d) in dout.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        gb.data[o] += d;
        for (g, &xi) in gw.data[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
            *g += d * xi;
        }
    }
    if let Some(dx) = dx {
        dx.clear();
        dx.resize(n_in, 0.0);
        for (o, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            for (acc, &wv) in dx.iter_mut().zip(&w.data[o * n_in..(o + 1) * n_in]) {
                *acc += d * wv;
            }
        }
    }
}

/// `[mean; std]` of every mel band over time.
pub fn time_pool(s: &Spectrogram) -> Vec<f64> {
    let mut means = Vec::with_capacity(s.n_mels);
    let mut stds = Vec::with_capacity(s.n_mels);
    for m in 0..s.n_mels {
        let row = &s.values[m * s.n_frames..(m + 1) * s.n_frames];
        let n = row.len() as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        means.push(mean);
        stds.push(var.sqrt());
    }
    means.extend(stds);
    means
}

/// Feature map `[channels, height, width]`.
#[derive(Clone, Debug)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Map {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }
}

fn conv3x3(input: &Map, w: &Tensor, b: &Tensor) -> Map {
    let c_out = w.shape[0];
    let (h, wd) = (input.h, input.w);
    let mut out = Map::zeros(c_out, h, wd);
    for co in 0..c_out {
        let plane = &mut out.data[co * h * wd..(co + 1) * h * wd];
        plane.fill(b.data[co]);
        for ci in 0..input.c {
            let src = &input.data[ci * h * wd..(ci + 1) * h * wd];
            let k = &w.data[(co * input.c + ci) * 9..(co * input.c + ci + 1) * 9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let kv = k[ky * 3 + kx];
                    // output (y, x) reads input (y + ky - 1, x + kx - 1)
                    let y0 = 1usize.saturating_sub(ky);
                    let y1 = (h + 1 - ky).min(h);
                    let x0 = 1usize.saturating_sub(kx);
                    let x1 = (wd + 1 - kx).min(wd);
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let dst = &mut plane[y * wd + x0..y * wd + x1];
                        let s = &src[iy * wd + x0 + kx - 1..iy * wd + x1 + kx - 1];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += kv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients; returns the input gradient when asked.
fn conv3x3_backward(
    input: &Map,
    w: &Tensor,
    dout: &Map,
    gw: &mut Tensor,
    gb: &mut Tensor,
    want_dx: bool,
) -> Option<Map> {
    let (h, wd) = (input.h, input.w);
    let c_in = input.c;
    let mut dx = want_dx.then(|| Map::zeros(c_in, h, wd));
    for co in 0..dout.c {
        let g = &dout.data[co * h * wd..(co + 1) * h * wd];
        gb.data[co] += g.iter().sum::<f64>();
        for ci in 0..c_in {
            let src = &input.data[ci * h * wd..(ci + 1) * h * wd];
            let base = (co * c_in + ci) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let y0 = 1usize.saturating_sub(ky);
                    let y1 = (h + 1 - ky).min(h);
                    let x0 = 1usize.saturating_sub(kx);
                    let x1 = (wd + 1 - kx).min(wd);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let gs = &g[y * wd + x0..y * wd + x1];
                        let s = &src[iy * wd + x0 + kx - 1..iy * wd + x1 + kx - 1];
                        acc += gs.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gw.data[base + ky * 3 + kx] += acc;
                    if let Some(dx) = dx.as_mut() {
                        let kv = w.data[base + ky * 3 + kx];
                        let plane = &mut dx.data[ci * h * wd..(ci + 1) * h * wd];
                        for y in y0..y1 {
                            let iy = y + ky - 1;
                            let gs = &g[y * wd + x0..y * wd + x1];
                            let d = &mut plane[iy * wd + x0 + kx - 1..iy * wd + x1 + kx - 1];
                            for (dv, &gv) in d.iter_mut().zip(gs) {
                                *dv += kv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2x2 stride-2 max-pool (floor) over ReLU'd input; returns argmax positions.
fn relu_maxpool(z: &Map) -> (Map, Vec<usize>) {
    let (oh, ow) = (z.h / 2, z.w / 2);
    let mut out = Map::zeros(z.c, oh, ow);
    let mut arg = vec![0usize; z.c * oh * ow];
    for c in 0..z.c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best_i = c * z.h * z.w + 2 * y * z.w + 2 * x;
                let mut best = z.data[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = c * z.h * z.w + (2 * y + dy) * z.w + 2 * x + dx;
                    if z.data[i] > best {
                        best = z.data[i];
                        best_i = i;
                    }
                }
                let o = c * oh * ow + y * ow + x;
                out.data[o] = best.max(0.0);
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

enum Trace {
    Bypass,
    Mlp {
        /// input to each dense layer
        acts: Vec<Vec<f64>>,
    },
    Cnn {
        /// input map and pre-activation of each block, plus pool argmax
        inputs: Vec<Map>,
        pre: Vec<Map>,
        argmax: Vec<Vec<usize>>,
        pooled: Vec<f64>,
        grid: usize,
    },
}

fn encode(params: &ModelParams, x: &Sample) -> (Vec<f64>, Trace) {
    let t = &params.tensors;
    match (params.arch.kind, x) {
        (EncoderKind::Bypass, Sample::Embedding(e)) => {
            (e.iter().map(|&v| v as f64).collect(), Trace::Bypass)
        }
        (EncoderKind::Mlp, Sample::Spectrogram(s)) => {
            let n_layers = params.arch.hidden.len() + 1;
            let mut acts = vec![time_pool(s)];
            let mut h = Vec::new();
            for l in 0..n_layers {
                h = dense(&t[2 * l], &t[2 * l + 1], &acts[l]);
                if l + 1 < n_layers {
                    h.iter_mut().for_each(|v| *v = v.max(0.0));
                    acts.push(h.clone());
                }
            }
            (h, Trace::Mlp { acts })
        }
        (EncoderKind::CnnSmall, Sample::Spectrogram(s)) => {
            let mut map = Map {
                c: 1,
                h: s.n_mels,
                w: s.n_frames,
                data: s.values.iter().map(|&v| v as f64).collect(),
            };
            let mut inputs = Vec::with_capacity(3);
            let mut pre = Vec::with_capacity(3);
            let mut argmax = Vec::with_capacity(3);
            for l in 0..3 {
                let z = conv3x3(&map, &t[2 * l], &t[2 * l + 1]);
                let (p, arg) = relu_maxpool(&z);
                inputs.push(std::mem::replace(&mut map, p));
                pre.push(z);
                argmax.push(arg);
            }
            let grid = map.h * map.w;
            let pooled: Vec<f64> = map
                .data
                .chunks_exact(grid)
                .map(|plane| plane.iter().sum::<f64>() / grid as f64)
                .collect();
            let emb = dense(&t[6], &t[7], &pooled);
            (
                emb,
                Trace::Cnn {
                    inputs,
                    pre,
                    argmax,
                    pooled,
                    grid,
                },
            )
        }
        _ => unreachable!("inputs are validated before encoding"),
    }
}

fn encode_backward(params: &ModelParams, trace: &Trace, demb: &[f64], grads: &mut Gradients) {
    let t = &params.tensors;
    let g = &mut grads.tensors;
    match trace {
        Trace::Bypass => {}
        Trace::Mlp { acts } => {
            let mut d = demb.to_vec();
            let mut dx = Vec::new();
            for l in (0..acts.len()).rev() {
                let (gw, gb) = pair_mut(g, 2 * l);
                dense_backward(&t[2 * l], &acts[l], &d, gw, gb, (l > 0).then_some(&mut dx));
                if l > 0 {
                    // acts[l] = relu(pre); zero activations carry no gradient
                    d = dx
                        .iter()
                        .zip(&acts[l])
                        .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
                        .collect();
                }
            }
        }
        Trace::Cnn {
            inputs,
            pre,
            argmax,
            pooled,
            grid,
        } => {
            let mut dpool = Vec::new();
            {
                let (gw, gb) = pair_mut(g, 6);
                dense_backward(&t[6], pooled, demb, gw, gb, Some(&mut dpool));
            }
            let (h3, w3) = (pre[2].h / 2, pre[2].w / 2);
            let mut dmap = Map::zeros(params.arch.hidden[2], h3, w3);
            for (c, &dp) in dpool.iter().enumerate() {
                dmap.data[c * grid..(c + 1) * grid].fill(dp / *grid as f64);
            }
            for l in (0..3).rev() {
                let z = &pre[l];
                let mut dz = Map::zeros(z.c, z.h, z.w);
                for (o, &i) in argmax[l].iter().enumerate() {
                    if z.data[i] > 0.0 {
                        dz.data[i] += dmap.data[o];
                    }
                }
                let (gw, gb) = pair_mut(g, 2 * l);
                if let Some(dx) = conv3x3_backward(&inputs[l], &t[2 * l], &dz, gw, gb, l > 0) {
                    dmap = dx;
                }
            }
        }
    }
}

fn pair_mut(g: &mut [Tensor], i: usize) -> (&mut Tensor, &mut Tensor) {
    let (a, b) = g.split_at_mut(i + 1);
    (&mut a[i], &mut b[0])
}

fn head_forward(params: &ModelParams, emb: &[f64]) -> ClassVector {
    let (w, b) = params.head();
    let z = dense(w, b, emb);
    let mut out = [0.0; NUM_CLASSES];
    out.copy_from_slice(&z);
    out
}

fn check_batch(params: &ModelParams, batch: &[&Sample]) -> Result<()> {
    params.arch.validate()?;
    for (i, x) in batch.iter().enumerate() {
        check_input(&params.arch, i, x)?;
    }
    Ok(())
}

pub fn forward(params: &ModelParams, batch: &[&Sample]) -> Result<BatchOutput> {
    check_batch(params, batch)?;
    let per_sample: Vec<(Vec<f64>, ClassVector)> = batch
        .par_iter()
        .map(|x| {
            let (emb, _) = encode(params, x);
            let logits = head_forward(params, &emb);
            (emb, logits)
        })
        .collect();
    let mut out = BatchOutput {
        probs: Vec::with_capacity(batch.len()),
        logits: Vec::with_capacity(batch.len()),
        embeddings: Vec::with_capacity(batch.len()),
    };
    for (emb, logits) in per_sample {
        out.probs.push(softmax(&logits));
        out.logits.push(logits);
        out.embeddings.push(emb);
    }
    Ok(out)
}

/// Predicted class per input.
pub fn predict(params: &ModelParams, batch: &[&Sample]) -> Result<Vec<usize>> {
    Ok(forward(params, batch)?.probs.iter().map(ssl::argmax).collect())
}

/// Objective `ce_scale * sum_i w_i CE(p_i, t_i) + lambda_a R_A + lambda_h R_H`
/// over the batch and its exact gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[&Sample],
    targets: &[ClassVector],
    weights: &[f64],
    objective: &Objective,
) -> Result<(f64, Gradients)> {
    check_batch(params, batch)?;
    if targets.len() != batch.len() || weights.len() != batch.len() {
        return Err(ModelError::TargetShape(targets.len().max(weights.len()), batch.len()));
    }
    let traces: Vec<(Vec<f64>, Trace, ClassVector)> = batch
        .par_iter()
        .map(|x| {
            let (emb, tr) = encode(params, x);
            let logits = head_forward(params, &emb);
            (emb, tr, logits)
        })
        .collect();
    let probs: Vec<ClassVector> = traces.iter().map(|(_, _, z)| softmax(z)).collect();
    if let Some(i) = probs.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(ModelError::NonFinite(format!("softmax output of sample {i}")));
    }
    let (loss, dprobs) = ssl::objective_and_grad(&probs, targets, weights, objective)
        .map_err(|e| ModelError::NonFinite(e.to_string()))?;
    if !loss.is_finite() {
        return Err(ModelError::NonFinite(format!("loss = {loss}")));
    }
    // softmax backward: dz_j = p_j g_j - p_j sum_k p_k g_k
    let dlogits: Vec<ClassVector> = probs
        .iter()
        .zip(&dprobs)
        .map(|(p, g)| {
            let pg: ClassVector = std::array::from_fn(|c| p[c] * g[c]);
            let s: f64 = pg.iter().sum();
            std::array::from_fn(|c| pg[c] - p[c] * s)
        })
        .collect();

    let n = params.tensors.len();
    let chunk_grads: Vec<Gradients> = traces
        .par_chunks(CHUNK)
        .zip(dlogits.par_chunks(CHUNK))
        .map(|(tr_chunk, dz_chunk)| {
            let mut g = Gradients::zeros_like(params);
            let mut demb = Vec::new();
            for ((emb, trace, _), dz) in tr_chunk.iter().zip(dz_chunk) {
                let (w, _) = params.head();
                let (gw, gb) = pair_mut(&mut g.tensors, n - 2);
                dense_backward(w, emb, dz, gw, gb, Some(&mut demb));
                encode_backward(params, trace, &demb, &mut g);
            }
            g
        })
        .collect();
    let mut grads = Gradients::zeros_like(params);
    for g in &chunk_grads {
        grads.add_assign(g);
    }
    if !grads.is_finite() {
        return Err(ModelError::NonFinite("gradient".into()));
    }
    Ok((loss, grads))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let arch = serde_json::to_vec(&params.arch).expect("arch serializes");
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for ((name, _), t) in params.arch.tensor_layout().iter().zip(&params.tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Truncated {
                path: self.path.into(),
                offset: self.bytes.len(),
                what: what.into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &str) -> Result<ModelParams> {
    let bad = |msg: String| ModelError::Checkpoint {
        path: path.into(),
        msg,
    };
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(5, "magic")? != CHECKPOINT_MAGIC {
        return Err(bad("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32("format version")?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "format version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let arch_len = r.u32("architecture length")? as usize;
    let arch: ArchSpec = serde_json::from_slice(r.take(arch_len, "architecture")?)
        .map_err(|e| bad(format!("architecture descriptor: {e}")))?;
    arch.validate()?;
    let layout = arch.tensor_layout();
    let count = r.u32("tensor count")? as usize;
    if count != layout.len() {
        return Err(bad(format!("{count} tensors, architecture needs {}", layout.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in &layout {
        let len = r.u32("tensor name length")? as usize;
        let found = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| bad("tensor name is not UTF-8".into()))?;
        if found != name {
            return Err(bad(format!("expected tensor {name}, found {found}")));
        }
        let rank = r.u32("tensor rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(bad(format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        let n: usize = dims.iter().product();
        let data = r
            .take(4 * n, name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push(Tensor { shape: dims, data });
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ModelParams { arch, tensors })
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

/// Loads a checkpoint and insists on a particular architecture.
pub fn load_checkpoint_as(path: &Path, expected: &ArchSpec) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    if &params.arch != expected {
        return Err(ModelError::ArchMismatch {
            expected: serde_json::to_string(expected).unwrap_or_default(),
            found: serde_json::to_string(&params.arch).unwrap_or_default(),
        });
    }
    Ok(params)
}

pub fn encode_femb(embedding: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * embedding.len());
    out.extend_from_slice(FEMB_MAGIC);
    out.extend_from_slice(&(embedding.len() as u32).to_le_bytes());
    for v in embedding {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_femb(bytes: &[u8], path: &str) -> Result<Vec<f32>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(5, "magic")? != FEMB_MAGIC {
        return Err(ModelError::Checkpoint {
            path: path.into(),
            msg: "not an embedding file (bad magic)".into(),
        });
    }
    let d = r.u32("dimension")? as usize;
    let data = r.take(4 * d, "embedding")?;
    Ok(data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Reads `<dir>/<id>.femb`.
pub fn load_embedding(dir: &Path, id: &str) -> Result<Vec<f32>> {
    let path = dir.join(format!("{}.femb", crate::features::file_stem_for(id)));
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    decode_femb(&bytes, &path.display().to_string())
}

pub fn store_embedding(dir: &Path, id: &str, embedding: &[f32]) -> Result<()> {
    let path = dir.join(format!("{}.femb", crate::features::file_stem_for(id)));
    fs::write(&path, encode_femb(embedding)).map_err(io_err(&path))
}
