use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use xlssl_core::audio;
use xlssl_core::corpus::{self, CorpusManifest, Partition, Taxonomy};
use xlssl_core::evaluation::{self, EvalResult};
use xlssl_core::experiments::{self, ExperimentKind, ExperimentReport, LanguageData};
use xlssl_core::features::{FeatureCache, FeatureExtractor, FeatureParams};
use xlssl_core::model::{self, ModelParams, Sample};
use xlssl_core::ssl::{self, SslMode};
use xlssl_core::trainer::{self, TrainData, UnlabeledExample};
use xlssl_core::EmotionClass;

use crate::config::RunConfig;
use crate::data::{self, FeatureSource, MANIFEST_FILE, SPLITS_FILE};
use crate::error::{io_error, CliError, Result};

pub const FAILURES_FILE: &str = "failures.csv";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

/// Relative audio paths are taken relative to the manifest's directory.
fn resolve_audio(manifest_path: &Path, audio_path: &str) -> PathBuf {
    let p = Path::new(audio_path);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let joined = base.join(p);
    std::path::absolute(&joined).unwrap_or(joined)
}

pub struct PrepareArgs {
    pub manifests: Vec<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub out: PathBuf,
}

pub fn prepare(args: &PrepareArgs) -> Result<()> {
    if args.manifests.is_empty() {
        return Err(CliError::validation("prepare needs at least one --manifests file"));
    }
    let taxonomy = match &args.taxonomy {
        Some(p) => Taxonomy::load(p).map_err(|e| CliError::from(e).context(p.display()))?,
        None => Taxonomy::canonical(),
    };
    let mut mapped = Vec::with_capacity(args.manifests.len());
    for path in &args.manifests {
        let ctx = |e| CliError::from(e).context(path.display());
        let raw = corpus::load_raw_manifest(path).map_err(ctx)?;
        let m = corpus::map_and_filter_emotions(&raw, &taxonomy).map_err(ctx)?;
        // Pin audio paths so the prepared manifest works from its new home.
        let records = m
            .records()
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.audio_path = resolve_audio(path, &r.audio_path).display().to_string();
                r
            })
            .collect();
        mapped.push(CorpusManifest::new(m.name(), m.language(), records).map_err(ctx)?);
    }
    let merged = if mapped.len() == 1 {
        mapped.pop().unwrap()
    } else {
        corpus::merge_corpora(&mapped)?
    };
    let splits = corpus::split_speaker_independent(&merged, args.ratios, args.seed)?;
    create_dir(&args.out)?;
    merged.write_jsonl(&args.out.join(MANIFEST_FILE))?;
    write_file(&args.out.join(SPLITS_FILE), splits.to_json()? + "\n")?;
    println!(
        "prepared {} utterances ({}) from {} manifest(s): train {}, val {}, test {}",
        merged.len(),
        merged.language(),
        args.manifests.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct FailureRow<'a> {
    id: &'a str,
    audio_path: &'a str,
    error: String,
}

enum ExtractOutcome {
    Extracted,
    Fresh,
    Failed(String),
}

fn extract_one(
    manifest_path: &Path,
    audio_path: &str,
    params: &FeatureParams,
    extractor: &FeatureExtractor,
) -> Result<xlssl_core::Spectrogram> {
    let wav = audio::decode_wav(&resolve_audio(manifest_path, audio_path))?;
    let wav = if wav.sample_rate == params.sample_rate {
        wav
    } else {
        audio::resample(&wav, params.sample_rate)?
    };
    Ok(extractor.extract(&wav)?)
}

/// Fills the feature cache for every record of `manifests`. Entries whose
/// parameter hash matches are skipped. Failures go to `failures.csv` in the
/// cache directory and make the command exit with a data error.
pub fn extract(cfg: &RunConfig, manifests: &[PathBuf]) -> Result<()> {
    let mut manifests = manifests.to_vec();
    if manifests.is_empty() {
        manifests.extend(cfg.paths.source.iter().chain(&cfg.paths.target).map(|d| d.join(MANIFEST_FILE)));
    }
    if manifests.is_empty() {
        return Err(CliError::validation(
            "extract needs --manifest or paths.source / paths.target",
        ));
    }
    let params = cfg.features.clone();
    let extractor = FeatureExtractor::new(params.clone())?;
    let cache = FeatureCache::open(&cfg.paths.cache_dir, &params)?;
    let failures_path = cfg.paths.cache_dir.join(FAILURES_FILE);
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&failures_path).map_err(|e| CliError::data(e.to_string()))?;
    writer
        .write_record(["id", "audio_path", "error"])
        .map_err(|e| CliError::data(e.to_string()))?;
    let (mut total, mut extracted, mut fresh, mut failed) = (0, 0, 0, 0);
    for path in &manifests {
        let manifest = corpus::load_raw_manifest(path).map_err(|e| CliError::from(e).context(path.display()))?;
        let outcomes: Vec<ExtractOutcome> = manifest
            .records
            .par_iter()
            .map(|r| {
                if cache.is_fresh(&r.id) {
                    return ExtractOutcome::Fresh;
                }
                match extract_one(path, &r.audio_path, &params, &extractor)
                    .and_then(|s| cache.store(&r.id, &s).map_err(CliError::from))
                {
                    Ok(()) => ExtractOutcome::Extracted,
                    Err(e) => ExtractOutcome::Failed(e.msg),
                }
            })
            .collect();
        total += outcomes.len();
        for (r, o) in manifest.records.iter().zip(outcomes) {
            match o {
                ExtractOutcome::Extracted => extracted += 1,
                ExtractOutcome::Fresh => fresh += 1,
                ExtractOutcome::Failed(error) => {
                    failed += 1;
                    writer
                        .serialize(FailureRow {
                            id: &r.id,
                            audio_path: &r.audio_path,
                            error,
                        })
                        .map_err(|e| CliError::data(e.to_string()))?;
                }
            }
        }
    }
    writer.flush().map_err(|e| io_error(&failures_path, e))?;
    println!("{total} utterances: {extracted} extracted, {fresh} up to date, {failed} failed");
    if failed > 0 {
        return Err(CliError::data(format!(
            "{failed} of {total} utterances failed; see {}",
            failures_path.display()
        )));
    }
    Ok(())
}

fn require_dir<'a>(dir: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    dir.as_deref()
        .ok_or_else(|| CliError::validation(format!("paths.{what} (--{what}) is required")))
}

fn feature_source(cfg: &RunConfig, arch: &model::ArchSpec) -> Result<FeatureSource> {
    FeatureSource::for_arch(
        arch,
        &cfg.features,
        &cfg.paths.cache_dir,
        cfg.paths.embeddings_dir.as_deref(),
    )
}

#[derive(Serialize)]
struct PseudoLabelRow<'a> {
    id: &'a str,
    class: EmotionClass,
    confidence: f64,
    selected: bool,
    probs: [f64; xlssl_core::NUM_CLASSES],
}

fn pseudo_labels(params: &ModelParams, unlabeled: &[UnlabeledExample], tau: f64) -> Result<String> {
    let mut out = String::new();
    for chunk in unlabeled.chunks(256) {
        let samples: Vec<&Sample> = chunk.iter().map(|u| u.sample.as_ref()).collect();
        let probs = model::forward(params, &samples)?.probs;
        for ((u, p), h) in chunk.iter().zip(&probs).zip(ssl::hard_pseudo_labels(&probs, tau)) {
            let row = PseudoLabelRow {
                id: &u.id,
                class: EmotionClass::from_index(h.class).expect("argmax is a class index"),
                confidence: h.confidence,
                selected: h.selected,
                probs: *p,
            };
            out.push_str(&serde_json::to_string(&row).expect("row serializes"));
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains on the source language, plus `n_labeled` target utterances and the
/// unlabeled target remainder when a target is configured.
pub fn train(cfg: &RunConfig) -> Result<()> {
    let tc = &cfg.train;
    let features = feature_source(cfg, &tc.arch)?;
    let source = data::language_data(require_dir(&cfg.paths.source, "source")?, &features)?;
    let target = match &cfg.paths.target {
        Some(dir) => Some(data::language_data(dir, &features)?),
        None => None,
    };
    let train_data = match &target {
        Some(t) => experiments::semi_supervised_data(&source, t, cfg.n_labeled, tc.seed)?,
        None => {
            if cfg.n_labeled > 0 {
                return Err(CliError::validation("n_labeled > 0 needs paths.target"));
            }
            TrainData {
                source: source.train.clone(),
                validation: source.val.clone(),
                ..Default::default()
            }
        }
    };
    let outcome = trainer::train(tc, &train_data)?;

    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    model::save_checkpoint(&outcome.params, &out.join("model.serm"))?;
    write_file(&out.join("history.csv"), outcome.history.to_csv())?;
    write_file(&out.join("config.json"), cfg.to_json())?;
    let test: Vec<_> = source
        .test
        .iter()
        .chain(target.iter().flat_map(|t| &t.test))
        .cloned()
        .collect();
    let result = evaluation::evaluate(&outcome.params, &test)?;
    result.write(out)?;
    if tc.loss.mode != SslMode::Supervised && !train_data.unlabeled.is_empty() {
        let text = pseudo_labels(&outcome.params, &train_data.unlabeled, tc.loss.tau)?;
        write_file(&out.join("pseudo_labels.jsonl"), text)?;
    }
    println!(
        "trained {} epochs (best {}), {} parameters",
        outcome.history.epochs.len(),
        outcome.history.best_epoch.map_or("final".to_string(), |e| e.to_string()),
        outcome.params.num_parameters()
    );
    print_eval(&result);
    Ok(())
}

fn print_eval(result: &EvalResult) {
    for l in &result.languages {
        println!("{}: UA {:.4} on {} utterances", l.language, l.unweighted_accuracy, l.n_samples);
    }
}

pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, part: Partition) -> Result<()> {
    let params = model::load_checkpoint(checkpoint)?;
    let features = feature_source(cfg, &params.arch)?;
    let prep = data::load_prepared(data_dir)?;
    let examples = data::examples(&prep, part, &features)?;
    let result = evaluation::evaluate(&params, &examples)?;
    create_dir(&cfg.paths.out_dir)?;
    result.write(&cfg.paths.out_dir)?;
    print_eval(&result);
    Ok(())
}

pub fn experiment(cfg: &RunConfig) -> Result<()> {
    let plan = cfg.plan();
    plan.validate()?;
    let report = match plan.kind {
        ExperimentKind::Synthetic => experiments::run_synthetic(&plan)?,
        kind => {
            let features = feature_source(cfg, &plan.train.arch)?;
            let source = data::language_data(require_dir(&cfg.paths.source, "source")?, &features)?;
            let target: Option<LanguageData> = match &cfg.paths.target {
                Some(dir) => Some(data::language_data(dir, &features)?),
                None => None,
            };
            run_kind(kind, &plan, &source, target.as_ref())?
        }
    };
    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    experiments::emit_report(&report, out)?;
    write_file(&out.join("config.json"), cfg.to_json())?;
    println!("{} runs written to {}", report.rows.len(), out.display());
    for a in report.aggregates() {
        let target = a
            .ua_target_mean
            .map_or(String::new(), |m| format!(", target {m:.4}"));
        println!(
            "  {} n={} mode={}{}: source {:.4}{}",
            a.kind.name(),
            a.n_labeled,
            a.mode.name(),
            a.tau.map_or(String::new(), |t| format!(" tau={t}")),
            a.ua_source_mean,
            target
        );
    }
    Ok(())
}

fn run_kind(
    kind: ExperimentKind,
    plan: &experiments::ExperimentPlan,
    source: &LanguageData,
    target: Option<&LanguageData>,
) -> Result<ExperimentReport> {
    let need_target = || target.ok_or_else(|| CliError::validation(format!("{} needs paths.target", kind.name())));
    Ok(match kind {
        ExperimentKind::CrossLingual => experiments::run_cross_lingual(plan, source, target)?,
        ExperimentKind::MultiLingual => experiments::run_multi_lingual(plan, source, need_target()?)?,
        ExperimentKind::SslSweep => experiments::run_ssl_sweep(plan, source, need_target()?)?,
        ExperimentKind::TauSweep => experiments::run_tau_sweep(plan, source, need_target()?)?,
        ExperimentKind::Synthetic => experiments::run_synthetic(plan)?,
    })
}
