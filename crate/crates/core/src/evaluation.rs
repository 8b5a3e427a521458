//! Unweighted accuracy, confusion matrices, and a synthetic domain-shift
//! benchmark in embedding space.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EmotionClass, NUM_CLASSES};
use crate::model::{self, ModelError, ModelParams, Sample};
use crate::trainer::Example;

/// Inputs per forward call during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("cannot score an empty prediction set")]
    Empty,
    #[error("{preds} predictions for {truth} ground-truth labels")]
    LengthMismatch { preds: usize, truth: usize },
    #[error("class index {0} out of range")]
    ClassOutOfRange(usize),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

type Result<T> = std::result::Result<T, EvalError>;

fn check(preds: &[usize], truth: &[usize]) -> Result<()> {
    if preds.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            truth: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(&c) = preds.iter().chain(truth).find(|&&c| c >= NUM_CLASSES) {
        return Err(EvalError::ClassOutOfRange(c));
    }
    Ok(())
}

/// `counts[truth][pred]`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn class_totals(&self) -> [usize; NUM_CLASSES] {
        self.counts.map(|row| row.iter().sum())
    }

    /// Recall per class; `None` for classes absent from the ground truth.
    pub fn recalls(&self) -> [Option<f64>; NUM_CLASSES] {
        std::array::from_fn(|c| {
            let total: usize = self.counts[c].iter().sum();
            (total > 0).then(|| self.counts[c][c] as f64 / total as f64)
        })
    }

    /// Mean recall over the classes present.
    pub fn unweighted_accuracy(&self) -> Option<f64> {
        let present: Vec<f64> = self.recalls().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth\\pred");
        for c in EmotionClass::ALL {
            out.push(',');
            out.push_str(c.name());
        }
        out.push('\n');
        for (c, row) in EmotionClass::ALL.iter().zip(&self.counts) {
            out.push_str(c.name());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(preds: &[usize], truth: &[usize]) -> Result<ConfusionMatrix> {
    check(preds, truth)?;
    let mut m = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(truth) {
        m.counts[t][p] += 1;
    }
    Ok(m)
}

/// Macro-averaged recall over the classes that occur in `truth`.
pub fn unweighted_accuracy(preds: &[usize], truth: &[usize]) -> Result<f64> {
    check(preds, truth)?;
    let mut correct = [0usize; NUM_CLASSES];
    let mut total = [0usize; NUM_CLASSES];
    for (&p, &t) in preds.iter().zip(truth) {
        total[t] += 1;
        correct[t] += usize::from(p == t);
    }
    let recalls: Vec<f64> = (0..NUM_CLASSES)
        .filter(|&c| total[c] > 0)
        .map(|c| correct[c] as f64 / total[c] as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageEval {
    pub language: String,
    pub unweighted_accuracy: f64,
    pub recall: [Option<f64>; NUM_CLASSES],
    pub confusion: ConfusionMatrix,
    pub n_samples: usize,
}

/// Per-language evaluation, languages in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub languages: Vec<LanguageEval>,
}

impl EvalResult {
    pub fn get(&self, language: &str) -> Option<&LanguageEval> {
        self.languages.iter().find(|l| l.language == language)
    }

    pub fn mean_ua(&self) -> Option<f64> {
        (!self.languages.is_empty()).then(|| {
            self.languages.iter().map(|l| l.unweighted_accuracy).sum::<f64>()
                / self.languages.len() as f64
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("eval result serializes")
    }

    /// Writes `eval.json` plus `confusion_<language>.csv` per language.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let io = |p: &Path, e: std::io::Error| EvalError::Io {
            path: p.display().to_string(),
            msg: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let json = dir.join("eval.json");
        std::fs::write(&json, self.to_json()).map_err(|e| io(&json, e))?;
        for l in &self.languages {
            let p = dir.join(format!("confusion_{}.csv", l.language));
            std::fs::write(&p, l.confusion.to_csv()).map_err(|e| io(&p, e))?;
        }
        Ok(())
    }
}

/// Predicted class for every input, computed in fixed-size chunks.
pub fn predict_all(params: &ModelParams, samples: &[&Sample]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        out.extend(model::predict(params, chunk)?);
    }
    Ok(out)
}

/// Scores full (uncropped) inputs, grouped by language.
pub fn evaluate(params: &ModelParams, examples: &[Example]) -> Result<EvalResult> {
    let samples: Vec<&Sample> = examples.iter().map(|e| e.sample.as_ref()).collect();
    let preds = predict_all(params, &samples)?;
    let mut groups: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (e, p) in examples.iter().zip(preds) {
        let g = groups.entry(e.language.as_str()).or_default();
        g.0.push(p);
        g.1.push(e.label.index());
    }
    let languages = groups
        .into_iter()
        .map(|(lang, (p, t))| {
            let confusion = confusion_matrix(&p, &t)?;
            Ok(LanguageEval {
                language: lang.to_string(),
                unweighted_accuracy: unweighted_accuracy(&p, &t)?,
                recall: confusion.recalls(),
                n_samples: t.len(),
                confusion,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult { languages })
}

/// Gaussian class clusters in embedding space with a controlled source to
/// target shift.
///
/// Source means are random directions scaled to `class_radius * sigma`.
/// Target means are the source means rotated by `rotation_per_delta * delta / sigma`
/// radians (in every plane of a random orthonormal basis) and then moved by
/// `delta` along a random unit direction fixed per class. At `delta = 0` the
/// two domains coincide in law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub sigma: f64,
    pub class_radius: f64,
    pub delta: f64,
    pub rotation_per_delta: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub n_speakers: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            sigma: 1.0,
            class_radius: 3.0,
            delta: 4.0,
            rotation_per_delta: PI / 16.0,
            train_per_class: 200,
            val_per_class: 100,
            test_per_class: 100,
            n_speakers: 10,
            seed: 0,
        }
    }
}

pub const SYNTHETIC_SOURCE: &str = "source";
pub const SYNTHETIC_TARGET: &str = "target";

/// One domain of the synthetic benchmark, already split.
#[derive(Clone, Debug)]
pub struct SyntheticDomain {
    pub language: String,
    pub means: Vec<Vec<f64>>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub source: SyntheticDomain,
    pub target: SyntheticDomain,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Random orthonormal basis (Gram-Schmidt on Gaussian vectors).
fn orthonormal_basis(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = gaussian_vec(rng, d);
        for b in &basis {
            let k = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= k * y);
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
            basis.push(unit(v));
        }
    }
    basis
}

/// Rotates `x` by `theta` inside each plane spanned by consecutive basis pairs.
fn rotate(x: &[f64], basis: &[Vec<f64>], theta: f64) -> Vec<f64> {
    let (s, c) = theta.sin_cos();
    let mut out = x.to_vec();
    for pair in basis.chunks_exact(2) {
        let (a, b) = (dot(x, &pair[0]), dot(x, &pair[1]));
        let (ra, rb) = (c * a - s * b, s * a + c * b);
        for ((o, u), v) in out.iter_mut().zip(&pair[0]).zip(&pair[1]) {
            *o += (ra - a) * u + (rb - b) * v;
        }
    }
    out
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EvalError::InvalidSpec(m));
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        if !(self.sigma > 0.0) || !(self.class_radius > 0.0) {
            return bad("sigma and class_radius must be positive".into());
        }
        if !(self.delta >= 0.0) || !self.rotation_per_delta.is_finite() {
            return bad(format!("delta must be nonnegative, got {}", self.delta));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return bad("every split needs at least one sample per class".into());
        }
        if self.n_speakers == 0 {
            return bad("n_speakers must be positive".into());
        }
        Ok(())
    }
}

fn draw_split(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    language: &str,
    split: &str,
    means: &[Vec<f64>],
    per_class: usize,
) -> Vec<Example> {
    let mut out = Vec::with_capacity(per_class * NUM_CLASSES);
    for k in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            let n = out.len();
            let x: Vec<f32> = mean
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(rng);
                    (m + spec.sigma * z) as f32
                })
                .collect();
            out.push(Example {
                id: format!("{language}/{split}/{c}-{k:04}"),
                language: language.to_string(),
                speaker_id: format!("{language}/{split}/spk{:02}", n % spec.n_speakers),
                sample: Arc::new(Sample::Embedding(x)),
                label: EmotionClass::from_index(c).expect("class index in range"),
            });
        }
    }
    out
}

/// Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let src_means: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|_| {
            unit(gaussian_vec(&mut rng, d))
                .into_iter()
                .map(|x| x * spec.class_radius * spec.sigma)
                .collect()
        })
        .collect();
    let basis = orthonormal_basis(&mut rng, d);
    let theta = spec.rotation_per_delta * spec.delta / spec.sigma;
    let tgt_means: Vec<Vec<f64>> = src_means
        .iter()
        .map(|m| {
            let dir = unit(gaussian_vec(&mut rng, d));
            rotate(m, &basis, theta)
                .into_iter()
                .zip(dir)
                .map(|(x, u)| x + spec.delta * u)
                .collect()
        })
        .collect();
    let mut domain = |language: &str, means: Vec<Vec<f64>>| SyntheticDomain {
        language: language.to_string(),
        train: draw_split(&mut rng, spec, language, "train", &means, spec.train_per_class),
        val: draw_split(&mut rng, spec, language, "val", &means, spec.val_per_class),
        test: draw_split(&mut rng, spec, language, "test", &means, spec.test_per_class),
        means,
    };
    let source = domain(SYNTHETIC_SOURCE, src_means);
    let target = domain(SYNTHETIC_TARGET, tgt_means);
    Ok(SyntheticData { source, target })
}
