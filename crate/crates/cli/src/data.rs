use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use xlssl_core::corpus::{self, CorpusManifest, Partition, SplitAssignment};
use xlssl_core::experiments::LanguageData;
use xlssl_core::features::{FeatureCache, FeatureError, FeatureParams};
use xlssl_core::model::{self, ArchSpec, EncoderKind, Sample};
use xlssl_core::trainer::Example;

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPLITS_FILE: &str = "splits.json";

/// Output of `prepare`: one language's manifest and its split.
pub struct Prepared {
    pub dir: PathBuf,
    pub manifest: CorpusManifest,
    pub splits: SplitAssignment,
}

pub fn load_prepared(dir: &Path) -> Result<Prepared> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = corpus::load_manifest(&manifest_path)
        .map_err(|e| CliError::from(e).context(manifest_path.display()))?;
    let splits_path = dir.join(SPLITS_FILE);
    let splits = SplitAssignment::load(&splits_path)
        .map_err(|e| CliError::from(e).context(splits_path.display()))?;
    Ok(Prepared {
        dir: dir.to_path_buf(),
        manifest,
        splits,
    })
}

/// Where model inputs come from: cached log-mel spectrograms, or
/// precomputed embeddings for the bypass encoder.
pub enum FeatureSource {
    Cache(FeatureCache),
    Embeddings(PathBuf),
}

impl FeatureSource {
    pub fn for_arch(
        arch: &ArchSpec,
        features: &FeatureParams,
        cache_dir: &Path,
        embeddings_dir: Option<&Path>,
    ) -> Result<Self> {
        match arch.kind {
            EncoderKind::Bypass => embeddings_dir
                .map(|d| FeatureSource::Embeddings(d.to_path_buf()))
                .ok_or_else(|| CliError::validation("the bypass encoder needs paths.embeddings_dir")),
            _ => Ok(FeatureSource::Cache(FeatureCache::open(cache_dir, features)?)),
        }
    }

    pub fn load(&self, id: &str) -> Result<Sample> {
        match self {
            FeatureSource::Cache(cache) => cache.load(id).map(Sample::Spectrogram).map_err(|e| match e {
                FeatureError::MissingId(_) => CliError::data(format!(
                    "no cached features for {id:?} in {}; run `xlssl extract` first",
                    cache.dir().display()
                )),
                other => other.into(),
            }),
            FeatureSource::Embeddings(dir) => Ok(Sample::Embedding(model::load_embedding(dir, id)?)),
        }
    }
}

/// Loads the examples of one partition in split order.
pub fn examples(prep: &Prepared, part: Partition, source: &FeatureSource) -> Result<Vec<Example>> {
    prep.splits
        .ids(part)
        .par_iter()
        .map(|id| {
            let r = prep.manifest.get(id).ok_or_else(|| {
                CliError::data(format!("{}: split id {id:?} is not in the manifest", prep.dir.display()))
            })?;
            let label = r
                .emotion
                .ok_or_else(|| CliError::data(format!("utterance {id:?} has no emotion label")))?;
            Ok(Example {
                id: r.id.clone(),
                language: r.language.clone(),
                speaker_id: r.speaker_id.clone(),
                sample: Arc::new(source.load(id)?),
                label,
            })
        })
        .collect()
}

pub fn language_data(dir: &Path, source: &FeatureSource) -> Result<LanguageData> {
    let prep = load_prepared(dir)?;
    Ok(LanguageData {
        language: prep.manifest.language().to_string(),
        train: examples(&prep, Partition::Train, source)?,
        val: examples(&prep, Partition::Val, source)?,
        test: examples(&prep, Partition::Test, source)?,
    })
}
