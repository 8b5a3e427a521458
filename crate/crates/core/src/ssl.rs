//! Pseudo-labeling machinery: cross-entropy, confidence-masked hard labels,
//! soft labels with class-balance and entropy regularizers, mixup and
//! hybrid batch assembly.
//!
//! All logarithms clamp their argument at [`PROB_CLAMP`].

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::NUM_CLASSES;
use crate::model::{ModelError, ModelParams, Sample};

/// A distribution (or one-hot label) over the emotion classes.
pub type ClassVector = [f64; NUM_CLASSES];

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Error, Debug)]
pub enum SslError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("all sample pools are empty")]
    NoData,
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T> = std::result::Result<T, SslError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SslMode {
    Supervised,
    Hard,
    Soft,
}

impl SslMode {
    pub fn name(self) -> &'static str {
        match self {
            SslMode::Supervised => "supervised",
            SslMode::Hard => "hard",
            SslMode::Soft => "soft",
        }
    }
}

impl std::str::FromStr for SslMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "supervised" => Ok(SslMode::Supervised),
            "hard" => Ok(SslMode::Hard),
            "soft" => Ok(SslMode::Soft),
            other => Err(format!("unknown mode {other:?} (expected supervised, hard or soft)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_a: f64,
    pub lambda_h: f64,
    pub tau: f64,
    pub mode: SslMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_a: 0.8,
            lambda_h: 0.4,
            tau: 0.50,
            mode: SslMode::Hard,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(SslError::InvalidConfig(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if !(self.lambda_a >= 0.0 && self.lambda_h >= 0.0) {
            return Err(SslError::InvalidConfig(format!(
                "regularization weights must be nonnegative, got {} and {}",
                self.lambda_a, self.lambda_h
            )));
        }
        Ok(())
    }

    /// Regularizer weights actually in force; only soft mode uses them.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        match self.mode {
            SslMode::Soft => (self.lambda_a, self.lambda_h),
            SslMode::Supervised | SslMode::Hard => (0.0, 0.0),
        }
    }
}

/// Weights of the differentiable objective
/// `ce_scale * sum_i w_i CE_i + lambda_a * R_A + lambda_h * R_H`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub ce_scale: f64,
    pub lambda_a: f64,
    pub lambda_h: f64,
}

impl Objective {
    pub fn cross_entropy_only(ce_scale: f64) -> Self {
        Self {
            ce_scale,
            lambda_a: 0.0,
            lambda_h: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub ce: f64,
    pub reg_a: f64,
    pub reg_h: f64,
}

fn clamped_ln(p: f64) -> f64 {
    p.max(PROB_CLAMP).ln()
}

fn check_rows(probs: &[ClassVector], other: usize, what: &str) -> Result<()> {
    if probs.len() != other {
        return Err(SslError::Shape(format!(
            "{} probability rows vs {other} {what}",
            probs.len()
        )));
    }
    Ok(())
}

/// Batch sum of `-sum_c t_c ln p_c`.
pub fn cross_entropy(probs: &[ClassVector], targets: &[ClassVector]) -> Result<f64> {
    check_rows(probs, targets.len(), "targets")?;
    Ok(probs
        .iter()
        .zip(targets)
        .map(|(p, t)| row_cross_entropy(p, t))
        .sum())
}

/// Cross-entropy with a per-row weight (0 removes a row from the loss).
pub fn weighted_cross_entropy(
    probs: &[ClassVector],
    targets: &[ClassVector],
    weights: &[f64],
) -> Result<f64> {
    check_rows(probs, targets.len(), "targets")?;
    check_rows(probs, weights.len(), "weights")?;
    Ok(probs
        .iter()
        .zip(targets)
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|((p, t), w)| w * row_cross_entropy(p, t))
        .sum())
}

fn row_cross_entropy(p: &ClassVector, t: &ClassVector) -> f64 {
    -p.iter().zip(t).map(|(&pc, &tc)| tc * clamped_ln(pc)).sum::<f64>()
}

/// Mean prediction over the batch.
pub fn batch_mean(probs: &[ClassVector]) -> Result<ClassVector> {
    if probs.is_empty() {
        return Err(SslError::EmptyBatch);
    }
    let mut mean = [0.0; NUM_CLASSES];
    for row in probs {
        for (m, p) in mean.iter_mut().zip(row) {
            *m += p;
        }
    }
    let b = probs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= b);
    Ok(mean)
}

/// KL divergence from the uniform class prior to the batch-mean prediction.
pub fn reg_a(probs: &[ClassVector]) -> Result<f64> {
    let mean = batch_mean(probs)?;
    let prior = 1.0 / NUM_CLASSES as f64;
    Ok(mean
        .iter()
        .map(|&h| prior * (prior.ln() - clamped_ln(h)))
        .sum())
}

/// Mean per-sample prediction entropy.
pub fn reg_h(probs: &[ClassVector]) -> Result<f64> {
    if probs.is_empty() {
        return Err(SslError::EmptyBatch);
    }
    let total: f64 = probs
        .iter()
        .flat_map(|row| row.iter())
        .map(|&p| -p * clamped_ln(p))
        .sum();
    Ok(total / probs.len() as f64)
}

/// `L_CE + lambda_A R_A + lambda_H R_H`, with the lambdas zeroed outside soft mode.
pub fn total_loss(c: &LossComponents, cfg: &LossConfig) -> f64 {
    let (la, lh) = cfg.effective_lambdas();
    c.ce + la * c.reg_a + lh * c.reg_h
}

/// Objective value and its gradient with respect to every probability entry.
pub(crate) fn objective_and_grad(
    probs: &[ClassVector],
    targets: &[ClassVector],
    weights: &[f64],
    obj: &Objective,
) -> Result<(f64, Vec<ClassVector>)> {
    let b = probs.len();
    if b == 0 {
        return Err(SslError::EmptyBatch);
    }
    let mut grad = vec![[0.0; NUM_CLASSES]; b];
    let mut loss = 0.0;
    if obj.ce_scale != 0.0 {
        loss += obj.ce_scale * weighted_cross_entropy(probs, targets, weights)?;
        for ((g, (p, t)), &w) in grad.iter_mut().zip(probs.iter().zip(targets)).zip(weights) {
            if w == 0.0 {
                continue;
            }
            for c in 0..NUM_CLASSES {
                if p[c] > PROB_CLAMP && t[c] != 0.0 {
                    g[c] -= obj.ce_scale * w * t[c] / p[c];
                }
            }
        }
    }
    if obj.lambda_a != 0.0 {
        loss += obj.lambda_a * reg_a(probs)?;
        let mean = batch_mean(probs)?;
        let prior = 1.0 / NUM_CLASSES as f64;
        for c in 0..NUM_CLASSES {
            if mean[c] > PROB_CLAMP {
                let d = -obj.lambda_a * prior / (mean[c] * b as f64);
                grad.iter_mut().for_each(|g| g[c] += d);
            }
        }
    }
    if obj.lambda_h != 0.0 {
        loss += obj.lambda_h * reg_h(probs)?;
        let scale = obj.lambda_h / b as f64;
        for (g, p) in grad.iter_mut().zip(probs) {
            for c in 0..NUM_CLASSES {
                g[c] -= scale * (clamped_ln(p[c]) + if p[c] > PROB_CLAMP { 1.0 } else { 0.0 });
            }
        }
    }
    Ok((loss, grad))
}

/// One thresholded argmax prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardLabel {
    pub class: usize,
    pub confidence: f64,
    pub selected: bool,
}

impl HardLabel {
    pub fn one_hot(&self) -> ClassVector {
        let mut v = [0.0; NUM_CLASSES];
        v[self.class] = 1.0;
        v
    }
}

/// Argmax with the lowest index winning ties.
pub fn argmax(p: &ClassVector) -> usize {
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if p[c] > p[best] {
            best = c;
        }
    }
    best
}

/// `label = argmax p`, selected iff `max p >= tau`.
pub fn hard_pseudo_labels(probs: &[ClassVector], tau: f64) -> Vec<HardLabel> {
    probs
        .iter()
        .map(|p| {
            let class = argmax(p);
            HardLabel {
                class,
                confidence: p[class],
                selected: p[class] >= tau,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PseudoLabel {
    Hard {
        label: usize,
        confidence: f64,
        selected: bool,
    },
    Soft {
        vector: ClassVector,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelEntry {
    pub id: String,
    pub epoch: usize,
    #[serde(flatten)]
    pub label: PseudoLabel,
}

/// Per-utterance pseudo-labels, rebuilt whole and swapped in between epochs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelTable {
    pub epoch: usize,
    pub entries: Vec<PseudoLabelEntry>,
}

impl PseudoLabelTable {
    pub fn soft_vector(&self, i: usize) -> Option<&ClassVector> {
        match &self.entries.get(i)?.label {
            PseudoLabel::Soft { vector } => Some(vector),
            PseudoLabel::Hard { .. } => None,
        }
    }

    /// JSON-lines audit dump: `{id, epoch, kind, label|vector, confidence, selected}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }
}

/// Soft labels = current softmax output on each full, uncropped input.
pub fn soft_pseudo_labels(
    params: &ModelParams,
    items: &[(String, &Sample)],
    epoch: usize,
) -> Result<PseudoLabelTable> {
    let samples: Vec<&Sample> = items.iter().map(|(_, s)| *s).collect();
    let out = crate::model::forward(params, &samples)?;
    let entries = items
        .iter()
        .zip(out.probs)
        .map(|((id, _), vector)| PseudoLabelEntry {
            id: id.clone(),
            epoch,
            label: PseudoLabel::Soft { vector },
        })
        .collect();
    Ok(PseudoLabelTable { epoch, entries })
}

/// Hard pseudo-label table over full inputs, for auditing.
pub fn hard_pseudo_label_table(
    params: &ModelParams,
    items: &[(String, &Sample)],
    tau: f64,
    epoch: usize,
) -> Result<PseudoLabelTable> {
    let samples: Vec<&Sample> = items.iter().map(|(_, s)| *s).collect();
    let out = crate::model::forward(params, &samples)?;
    let entries = items
        .iter()
        .zip(hard_pseudo_labels(&out.probs, tau))
        .map(|((id, _), h)| PseudoLabelEntry {
            id: id.clone(),
            epoch,
            label: PseudoLabel::Hard {
                label: h.class,
                confidence: h.confidence,
                selected: h.selected,
            },
        })
        .collect();
    Ok(PseudoLabelTable { epoch, entries })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixupSample {
    pub x: Sample,
    pub y: ClassVector,
    pub alpha: f64,
}

/// `x = a x_p + (1 - a) x_q`, `y = a y_p + (1 - a) y_q`.
pub fn mixup_with_alpha(
    (xp, yp): (&Sample, &ClassVector),
    (xq, yq): (&Sample, &ClassVector),
    alpha: f64,
) -> Result<MixupSample> {
    let x = xp
        .blend(xq, alpha)
        .ok_or_else(|| SslError::Shape("mixup inputs differ in shape".into()))?;
    let mut y = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        y[c] = alpha * yp[c] + (1.0 - alpha) * yq[c];
    }
    Ok(MixupSample { x, y, alpha })
}

/// Mixup with `alpha ~ U(0, 1)` drawn from `rng`.
pub fn mixup<R: Rng>(
    p: (&Sample, &ClassVector),
    q: (&Sample, &ClassVector),
    rng: &mut R,
) -> Result<MixupSample> {
    let alpha: f64 = rng.random();
    mixup_with_alpha(p, q, alpha)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolKind {
    Source,
    TargetLabeled,
    Unlabeled,
}

/// A batch slot: which pool it came from and the index inside that pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub pool: PoolKind,
    pub index: usize,
}

impl BatchItem {
    pub fn is_pseudo(&self) -> bool {
        self.pool == PoolKind::Unlabeled
    }
}

/// Sizes of the three pools making up the hybrid dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSizes {
    pub source: usize,
    pub target_labeled: usize,
    pub unlabeled: usize,
}

impl PoolSizes {
    pub fn total(&self) -> usize {
        self.source + self.target_labeled + self.unlabeled
    }

    fn item(&self, flat: usize) -> BatchItem {
        if flat < self.source {
            BatchItem {
                pool: PoolKind::Source,
                index: flat,
            }
        } else if flat < self.source + self.target_labeled {
            BatchItem {
                pool: PoolKind::TargetLabeled,
                index: flat - self.source,
            }
        } else {
            BatchItem {
                pool: PoolKind::Unlabeled,
                index: flat - self.source - self.target_labeled,
            }
        }
    }
}

/// Draws `batch_size` distinct items uniformly from the union of the pools.
pub fn build_hybrid_batch<R: Rng>(
    pools: PoolSizes,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<BatchItem>> {
    let n = pools.total();
    if n == 0 {
        return Err(SslError::NoData);
    }
    let k = batch_size.min(n);
    Ok(index::sample(rng, n, k)
        .into_iter()
        .map(|flat| pools.item(flat))
        .collect())
}

/// One pass over the union in shuffled order, cut into batches.
pub fn hybrid_epoch<R: Rng>(
    pools: PoolSizes,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<BatchItem>>> {
    let n = pools.total();
    if n == 0 {
        return Err(SslError::NoData);
    }
    let order = index::sample(rng, n, n).into_vec();
    Ok(order
        .chunks(batch_size.max(1))
        .map(|chunk| chunk.iter().map(|&flat| pools.item(flat)).collect())
        .collect())
}
