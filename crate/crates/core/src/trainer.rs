//! Adam optimization over the hybrid dataset with validation-based
//! checkpoint selection.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EmotionClass, NUM_CLASSES};
use crate::evaluation::{self, EvalError};
use crate::features::{crop_frames, FeatureParams};
use crate::model::{self, ArchSpec, Gradients, ModelError, ModelParams, Sample};
use crate::ssl::{
    self, ClassVector, LossConfig, Objective, PoolKind, PoolSizes, SslError, SslMode,
};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no labeled training data")]
    NoLabeledData,
    #[error("non-finite values at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

type Result<T> = std::result::Result<T, TrainError>;

/// A labeled utterance ready for the model.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub language: String,
    pub speaker_id: String,
    pub sample: Arc<Sample>,
    pub label: EmotionClass,
}

/// An utterance whose label is not available to training.
#[derive(Clone, Debug)]
pub struct UnlabeledExample {
    pub id: String,
    pub language: String,
    pub sample: Arc<Sample>,
}

impl From<&Example> for UnlabeledExample {
    fn from(e: &Example) -> Self {
        Self {
            id: e.id.clone(),
            language: e.language.clone(),
            sample: e.sample.clone(),
        }
    }
}

/// The joint-domain training set plus validation examples.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub source: Vec<Example>,
    pub target_labeled: Vec<Example>,
    pub unlabeled: Vec<UnlabeledExample>,
    pub validation: Vec<Example>,
}

fn default_crop_frames() -> usize {
    FeatureParams::default().frames_for(2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Training crop length in frames for spectrogram inputs.
    pub crop_frames: usize,
    pub loss: LossConfig,
    pub arch: ArchSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 100,
            lr0: 1e-3,
            lr_decay: 0.95,
            lr_decay_every: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_epochs: 10,
            seed: 0,
            crop_frames: default_crop_frames(),
            loss: LossConfig::default(),
            arch: ArchSpec::mlp(128, vec![256]),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return bad("epochs, batch_size and lr_decay_every must be positive");
        }
        if self.crop_frames == 0 {
            return bad("crop_frames must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        self.loss
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        self.arch
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

/// `lr0 * decay^floor(epoch / every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters are rounded to `f32` afterwards,
/// so the in-memory model always equals its checkpoint.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if !grads.is_finite() {
        let (tensor, index) = first_non_finite(grads);
        return Err(TrainError::NonFinite {
            epoch: 0,
            batch: 0,
            detail: format!("gradient of tensor {tensor} at flat index {index}"),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.m.tensors)
        .zip(&mut state.v.tensors)
    {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m.data[i] / c1;
            let v_hat = v.data[i] / c2;
            p.data[i] = (p.data[i] - lr * m_hat / (v_hat.sqrt() + cfg.adam_eps)) as f32 as f64;
        }
    }
    Ok(())
}

fn first_non_finite(g: &Gradients) -> (usize, usize) {
    for (ti, t) in g.tensors.iter().enumerate() {
        if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
            return (ti, i);
        }
    }
    (0, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Validation UA per language, languages sorted.
    pub val_ua: Vec<(String, f64)>,
    pub n_pseudo_selected: usize,
}

impl EpochRecord {
    pub fn mean_val_ua(&self) -> Option<f64> {
        (!self.val_ua.is_empty())
            .then(|| self.val_ua.iter().map(|(_, v)| v).sum::<f64>() / self.val_ua.len() as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub languages: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss");
        for l in &self.languages {
            let _ = write!(out, ",val_ua_{l}");
        }
        out.push_str(",n_pseudo_selected\n");
        for r in &self.epochs {
            let _ = write!(out, "{},{},{}", r.epoch, r.lr, r.train_loss);
            for (_, v) in &r.val_ua {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", r.n_pseudo_selected);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
}

/// Per-epoch generator: the run seed selects the key, the epoch the stream.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn training_view(sample: &Sample, crop: usize, rng: &mut ChaCha8Rng) -> Sample {
    match sample {
        Sample::Spectrogram(s) => Sample::Spectrogram(crop_frames(s, crop, rng)),
        Sample::Embedding(_) => sample.clone(),
    }
}

fn soft_table(params: &ModelParams, unlabeled: &[UnlabeledExample]) -> Result<Vec<ClassVector>> {
    let mut out = Vec::with_capacity(unlabeled.len());
    for chunk in unlabeled.chunks(256) {
        let samples: Vec<&Sample> = chunk.iter().map(|u| u.sample.as_ref()).collect();
        out.extend(model::forward(params, &samples)?.probs);
    }
    Ok(out)
}

fn validation_languages(data: &TrainData) -> Vec<String> {
    let mut langs: Vec<String> = data.validation.iter().map(|e| e.language.clone()).collect();
    langs.sort();
    langs.dedup();
    langs
}

/// Trains from a fresh initialization.
pub fn train(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    cfg.validate()?;
    let init = model::init_params(&cfg.arch, cfg.seed)?;
    train_from(cfg, data, init)
}

/// Trains starting from `params`. Runs `warmup_epochs` on the labeled pools,
/// then adds the unlabeled pool according to the loss mode. After every epoch
/// the model is scored on the validation set; the parameters with the highest
/// mean validation UA (first occurrence) are returned. Without validation data
/// the final parameters are returned.
pub fn train_from(cfg: &TrainConfig, data: &TrainData, mut params: ModelParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.source.is_empty() && data.target_labeled.is_empty() {
        return Err(TrainError::NoLabeledData);
    }
    let mode = cfg.loss.mode;
    let mut state = AdamState::new(&params);
    let mut history = TrainHistory {
        languages: validation_languages(data),
        ..Default::default()
    };
    let mut best: Option<(f64, ModelParams)> = None;

    for epoch in 0..cfg.epochs {
        let ssl_active = mode != SslMode::Supervised && epoch >= cfg.warmup_epochs;
        let pools = PoolSizes {
            source: data.source.len(),
            target_labeled: data.target_labeled.len(),
            unlabeled: if ssl_active { data.unlabeled.len() } else { 0 },
        };
        let soft = if ssl_active && mode == SslMode::Soft && !data.unlabeled.is_empty() {
            Some(soft_table(&params, &data.unlabeled)?)
        } else {
            None
        };
        let (lambda_a, lambda_h) = if ssl_active {
            cfg.loss.effective_lambdas()
        } else {
            (0.0, 0.0)
        };
        let mixing = ssl_active && mode == SslMode::Soft;
        let lr = lr_at(epoch, cfg);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let batches = ssl::hybrid_epoch(pools, cfg.batch_size, &mut rng)?;
        let mut loss_sum = 0.0;
        let mut n_selected = 0;

        for (bi, batch) in batches.iter().enumerate() {
            let mut xs = Vec::with_capacity(batch.len());
            let mut ys: Vec<ClassVector> = Vec::with_capacity(batch.len());
            let mut weights = vec![1.0; batch.len()];
            let mut pseudo_slots = Vec::new();
            for (slot, item) in batch.iter().enumerate() {
                let (sample, target) = match item.pool {
                    PoolKind::Source => {
                        let e = &data.source[item.index];
                        (e.sample.as_ref(), e.label.one_hot())
                    }
                    PoolKind::TargetLabeled => {
                        let e = &data.target_labeled[item.index];
                        (e.sample.as_ref(), e.label.one_hot())
                    }
                    PoolKind::Unlabeled => {
                        pseudo_slots.push(slot);
                        let u = &data.unlabeled[item.index];
                        let t = soft.as_ref().map_or([0.0; NUM_CLASSES], |table| table[item.index]);
                        (u.sample.as_ref(), t)
                    }
                };
                xs.push(training_view(sample, cfg.crop_frames, &mut rng));
                ys.push(target);
            }

            if mode == SslMode::Hard && !pseudo_slots.is_empty() {
                let views: Vec<&Sample> = pseudo_slots.iter().map(|&s| &xs[s]).collect();
                let probs = model::forward(&params, &views)?.probs;
                for (&slot, h) in pseudo_slots
                    .iter()
                    .zip(ssl::hard_pseudo_labels(&probs, cfg.loss.tau))
                {
                    ys[slot] = h.one_hot();
                    weights[slot] = if h.selected { 1.0 } else { 0.0 };
                    n_selected += usize::from(h.selected);
                }
            }

            if mixing {
                n_selected += pseudo_slots.len();
                let n = xs.len();
                let mut mixed_x = Vec::with_capacity(n);
                let mut mixed_y = Vec::with_capacity(n);
                for i in 0..n {
                    let j = rng.random_range(0..n);
                    let m = ssl::mixup((&xs[i], &ys[i]), (&xs[j], &ys[j]), &mut rng)?;
                    mixed_x.push(m.x);
                    mixed_y.push(m.y);
                }
                xs = mixed_x;
                ys = mixed_y;
            }

            let refs: Vec<&Sample> = xs.iter().collect();
            let objective = Objective {
                ce_scale: 1.0 / refs.len() as f64,
                lambda_a,
                lambda_h,
            };
            let (loss, grads) = model::loss_and_grad(&params, &refs, &ys, &weights, &objective)
                .map_err(|e| match e {
                    ModelError::NonFinite(detail) => TrainError::NonFinite {
                        epoch,
                        batch: bi,
                        detail,
                    },
                    other => other.into(),
                })?;
            adam_step(&mut params, &grads, &mut state, lr, cfg).map_err(|e| match e {
                TrainError::NonFinite { detail, .. } => TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    detail,
                },
                other => other,
            })?;
            loss_sum += loss;
        }

        let val_ua: Vec<(String, f64)> = if data.validation.is_empty() {
            Vec::new()
        } else {
            evaluation::evaluate(&params, &data.validation)?
                .languages
                .into_iter()
                .map(|l| (l.language, l.unweighted_accuracy))
                .collect()
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches.len() as f64,
            val_ua,
            n_pseudo_selected: n_selected,
        };
        if let Some(score) = record.mean_val_ua() {
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, params.clone()));
                history.best_epoch = Some(epoch);
            }
        }
        history.epochs.push(record);
    }

    let params = match best {
        Some((_, p)) => p,
        None => {
            history.best_epoch = Some(cfg.epochs - 1);
            params
        }
    };
    Ok(TrainOutcome { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tensor;

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 8,
            warmup_epochs: 1,
            arch: ArchSpec::bypass(2),
            ..Default::default()
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert!((lr_at(10, &cfg) - 9.5e-4).abs() < 1e-15);
        assert!((lr_at(99, &cfg) - 6.302494097e-4).abs() < 1e-12);
        for e in 1..100 {
            assert!(lr_at(e, &cfg) <= lr_at(e - 1, &cfg));
            if e % 10 != 0 {
                assert_eq!(lr_at(e, &cfg), lr_at(e - 1, &cfg));
            }
        }
    }

    fn scalar_model(v: f64) -> ModelParams {
        ModelParams {
            arch: ArchSpec::bypass(1),
            tensors: vec![Tensor {
                shape: vec![1],
                data: vec![v],
            }],
        }
    }

    fn scalar_grad(g: f64) -> Gradients {
        Gradients {
            tensors: vec![Tensor {
                shape: vec![1],
                data: vec![g],
            }],
        }
    }

    #[test]
    fn adam_first_step() {
        let cfg = TrainConfig::default();
        let mut p = scalar_model(0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &scalar_grad(0.04), &mut s, 1e-3, &cfg).unwrap();
        let expected = -1e-3 * 0.04 / (0.04 + 1e-8);
        assert!((p.tensors[0].data[0] - expected).abs() < 1e-9);
        assert!((p.tensors[0].data[0] + 9.9999e-4).abs() < 1e-8);
        assert_eq!(s.t, 1);

        let mut q = scalar_model(0.0);
        let mut sq = AdamState::new(&q);
        adam_step(&mut q, &scalar_grad(-0.04), &mut sq, 1e-3, &cfg).unwrap();
        assert_eq!(q.tensors[0].data[0], -p.tensors[0].data[0]);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let cfg = TrainConfig::default();
        let mut p = scalar_model(0.25);
        let mut s = AdamState::new(&p);
        for _ in 0..20 {
            adam_step(&mut p, &scalar_grad(0.0), &mut s, 1e-3, &cfg).unwrap();
        }
        assert_eq!(p.tensors[0].data[0], 0.25);
        let err = adam_step(&mut p, &scalar_grad(f64::NAN), &mut s, 1e-3, &cfg);
        assert!(matches!(err, Err(TrainError::NonFinite { .. })));
    }

    fn toy_data() -> TrainData {
        // two separable blobs in 2-d, classes 0 and 1
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mk = |i: usize, c: usize| {
            let cx = if c == 0 { -2.0 } else { 2.0 };
            Example {
                id: format!("u{i}"),
                language: "toy".into(),
                speaker_id: "s".into(),
                sample: Arc::new(Sample::Embedding(vec![
                    cx + rng.random_range(-0.5f32..0.5),
                    rng.random_range(-1.0f32..1.0),
                ])),
                label: EmotionClass::from_index(c).unwrap(),
            }
        };
        let source: Vec<Example> = (0..40).map(|i| mk(i, i % 2)).collect();
        TrainData {
            validation: source.clone(),
            source,
            ..Default::default()
        }
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let cfg = TrainConfig {
            epochs: 50,
            lr0: 5e-2,
            ..toy_cfg()
        };
        let out = train(&cfg, &toy_data()).unwrap();
        let best = out.history.best_epoch.unwrap();
        let score = out.history.epochs[best].mean_val_ua().unwrap();
        assert_eq!(score, 1.0);
        let max = out
            .history
            .epochs
            .iter()
            .filter_map(EpochRecord::mean_val_ua)
            .fold(0.0, f64::max);
        assert_eq!(score, max);
        let ua = evaluation::evaluate(&out.params, &toy_data().validation).unwrap();
        assert_eq!(ua.mean_ua(), Some(1.0));
    }

    #[test]
    fn history_csv_shape() {
        let out = train(&toy_cfg(), &toy_data()).unwrap();
        let csv = out.history.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,lr,train_loss,val_ua_toy,n_pseudo_selected"));
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = toy_cfg();
        cfg.loss.tau = 1.5;
        assert!(matches!(train(&cfg, &toy_data()), Err(TrainError::InvalidConfig(_))));
        assert!(matches!(
            train(&toy_cfg(), &TrainData::default()),
            Err(TrainError::NoLabeledData)
        ));
    }
}
