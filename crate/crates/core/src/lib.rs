//! Semi-supervised cross-lingual speech emotion recognition: corpus handling,
//! log-mel features, an embedding encoder with a linear emotion head, hard and
//! soft pseudo-labeling, training, evaluation and the experiment matrix.

pub mod audio;
pub mod corpus;
pub mod evaluation;
pub mod experiments;
pub mod features;
pub mod model;
pub mod ssl;
pub mod trainer;

pub use corpus::{CorpusManifest, EmotionClass, SplitAssignment, UtteranceRecord, NUM_CLASSES};
pub use evaluation::{EvalResult, SyntheticSpec};
pub use experiments::{ExperimentKind, ExperimentPlan, ExperimentReport, LanguageData};
pub use features::{FeatureParams, Spectrogram};
pub use model::{ArchSpec, EncoderKind, ModelParams, Sample};
pub use ssl::{LossConfig, SslMode};
pub use trainer::{Example, TrainConfig, TrainData, TrainHistory, UnlabeledExample};
