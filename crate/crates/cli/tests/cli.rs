use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

const CLASSES: [&str; 5] = ["ang", "fea", "hap", "neu", "sad"];

fn xlssl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xlssl"))
        .args(args)
        .env_remove("XLSSL_CACHE")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_tone(path: &Path, freq: f64, rate: u32, seconds: f64) {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    let n = (rate as f64 * seconds) as usize;
    for i in 0..n {
        let t = i as f64 / rate as f64;
        let v = 0.3 * (2.0 * std::f64::consts::PI * freq * t).sin();
        w.write_sample((v * i16::MAX as f64) as i16).unwrap();
    }
    w.finalize().unwrap();
}

/// Writes a raw manifest of `speakers` x 5 classes x 2 clips with relative
/// audio paths. Class `c` is a tone at `300 + 400 c` Hz.
fn raw_corpus(dir: &Path, name: &str, language: &str, speakers: usize) -> PathBuf {
    let audio = dir.join(format!("{name}_wav"));
    fs::create_dir_all(&audio).unwrap();
    let mut lines = String::new();
    for s in 0..speakers {
        for (c, label) in CLASSES.iter().enumerate() {
            for k in 0..2 {
                let id = format!("{name}_{s}_{label}_{k}");
                let file = format!("{name}_wav/{id}.wav");
                let freq = 300.0 + 400.0 * c as f64 + 10.0 * s as f64 + 5.0 * k as f64;
                write_tone(&dir.join(&file), freq, 22_050, 0.6);
                let rec = json!({
                    "id": id,
                    "audio_path": file,
                    "speaker_id": format!("{name}_spk{s}"),
                    "language": language,
                    "emotion": label,
                    "duration_s": 0.6,
                });
                lines.push_str(&rec.to_string());
                lines.push('\n');
            }
        }
    }
    let path = dir.join(format!("{name}.jsonl"));
    fs::write(&path, lines).unwrap();
    path
}

fn taxonomy(dir: &Path) -> PathBuf {
    let path = dir.join("tax.json");
    let map = json!({"ang": "anger", "fea": "fear", "hap": "happiness", "neu": "neutral", "sad": "sadness"});
    fs::write(&path, map.to_string()).unwrap();
    path
}

fn prepare(dir: &Path, manifests: &[&Path], out: &Path) -> Output {
    let tax = taxonomy(dir);
    let mut args = vec!["prepare", "--manifests"];
    args.extend(manifests.iter().map(|m| p(m)));
    args.extend(["--taxonomy", p(&tax), "--seed", "7", "--out", p(out)]);
    xlssl(&args)
}

fn small_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "train": {
            "epochs": 3,
            "batch_size": 16,
            "warmup_epochs": 1,
            "crop_frames": 40,
            "arch": {"kind": "mlp", "embedding_dim": 8, "hidden": [16]}
        }
    });
    merge(&mut cfg, extra);
    let path = dir.join("c.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn merge(base: &mut Value, extra: Value) {
    match (base, extra) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

#[test]
fn help_lists_config_keys_with_defaults() {
    let o = xlssl(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for line in ["train.loss.lambda_a", "train.loss.lambda_h", "train.lr0", "experiment.taus", "paths.cache_dir", "features.n_mels"] {
        assert!(text.contains(line), "{line} missing from help");
    }
    let lambda_a = text.lines().find(|l| l.trim_start().starts_with("train.loss.lambda_a")).unwrap();
    assert!(lambda_a.trim_end().ends_with("0.8"));
    let lambda_h = text.lines().find(|l| l.trim_start().starts_with("train.loss.lambda_h")).unwrap();
    assert!(lambda_h.trim_end().ends_with("0.4"));
}

#[test]
fn invalid_tau_fails_validation_before_training() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"loss": {"tau": 1.5}}}"#).unwrap();
    let out = dir.path().join("out");
    let o = xlssl(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("tau"));
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"epochz": 3}}"#).unwrap();
    let o = xlssl(&["experiment", "--config", p(&cfg)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("epochz"));
    let o = xlssl(&["experiment", "--set", "nope=1"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bad_arguments_exit_with_validation_code() {
    assert_eq!(code(&xlssl(&["frobnicate"])), 1);
    assert_eq!(code(&xlssl(&["train", "--mode", "fuzzy"])), 1);
}

#[test]
fn synthetic_experiment_writes_all_sweep_rows_reproducibly() {
    let dir = TempDir::new().unwrap();
    let run = |out: &Path, jobs: &str| {
        xlssl(&[
            "--jobs", jobs, "experiment", "--kind", "synthetic", "--mode", "hard", "--seeds", "3",
            "--epochs", "4", "--set", "train.warmup_epochs=1", "--set", "experiment.synthetic.train_per_class=40",
            "--set", "experiment.synthetic.val_per_class=20", "--set", "experiment.synthetic.test_per_class=20",
            "--out", p(out),
        ])
    };
    let a = dir.path().join("a");
    let o = run(&a, "2");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(a.join("report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    let sweep = rows.iter().filter(|r| r.starts_with("ssl_sweep,")).count();
    assert_eq!(sweep, 3 * 5);
    assert_eq!(rows.iter().filter(|r| r.starts_with("cross_lingual,")).count(), 3);
    assert!(a.join("plotdata_ssl_sweep.csv").exists());

    let b = dir.path().join("b");
    assert_eq!(code(&run(&b, "1")), 0);
    for f in ["report.csv", "summary.csv", "plotdata_ssl_sweep.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn prepare_merges_splits_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let m1 = raw_corpus(dir.path(), "emo_a", "german", 3);
    let m2 = raw_corpus(dir.path(), "emo_b", "german", 3);
    let out1 = dir.path().join("prep1");
    let o = prepare(dir.path(), &[&m1, &m2], &out1);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = fs::read_to_string(out1.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 60);
    let splits: Value = serde_json::from_str(&fs::read_to_string(out1.join("splits.json")).unwrap()).unwrap();
    let total: usize = ["train", "val", "test"].iter().map(|k| splits[k].as_array().unwrap().len()).sum();
    assert_eq!(total, 60);

    let out2 = dir.path().join("prep2");
    assert_eq!(code(&prepare(dir.path(), &[&m1, &m2], &out2)), 0);
    for f in ["manifest.jsonl", "splits.json"] {
        assert_eq!(fs::read(out1.join(f)).unwrap(), fs::read(out2.join(f)).unwrap());
    }
}

#[test]
fn prepare_names_unmapped_label() {
    let dir = TempDir::new().unwrap();
    let m = raw_corpus(dir.path(), "emo", "german", 3);
    let text = fs::read_to_string(&m).unwrap().replacen("\"emotion\":\"ang\"", "\"emotion\":\"boredom\"", 1);
    fs::write(&m, text).unwrap();
    let o = prepare(dir.path(), &[&m], &dir.path().join("prep"));
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("boredom"), "{}", stderr(&o));
}

#[test]
fn extract_caches_every_record_and_skips_fresh_entries() {
    let dir = TempDir::new().unwrap();
    let m = raw_corpus(dir.path(), "emo", "german", 3);
    let prep = dir.path().join("prep");
    assert_eq!(code(&prepare(dir.path(), &[&m], &prep)), 0);
    let cache = dir.path().join("cache");
    let manifest = prep.join("manifest.jsonl");
    let o = xlssl(&["extract", "--manifest", p(&manifest), "--cache", p(&cache)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cached = fs::read_dir(&cache)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "fmel"))
        .count();
    assert_eq!(cached, 30);

    let o = xlssl(&["extract", "--manifest", p(&manifest), "--cache", p(&cache)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("30 up to date"));

    // The environment variable stands in for --cache.
    let o = Command::new(env!("CARGO_BIN_EXE_xlssl"))
        .args(["extract", "--manifest", p(&manifest)])
        .env("XLSSL_CACHE", &cache)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("30 up to date"));
}

#[test]
fn extract_lists_corrupt_audio_and_signals_partial_failure() {
    let dir = TempDir::new().unwrap();
    let m = raw_corpus(dir.path(), "emo", "german", 3);
    fs::write(dir.path().join("emo_wav/emo_1_hap_0.wav"), b"RIFF\x10\0\0\0WAVEjunk").unwrap();
    let cache = dir.path().join("cache");
    let o = xlssl(&["extract", "--manifest", p(&m), "--cache", p(&cache)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let failures = fs::read_to_string(cache.join("failures.csv")).unwrap();
    let rows: Vec<&str> = failures.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("emo_1_hap_0,"));
}

/// Prepares and extracts a source and a target corpus.
fn pipeline_fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let src_raw = raw_corpus(dir, "src", "english", 4);
    let tgt_raw = raw_corpus(dir, "tgt", "german", 4);
    let source = dir.join("source");
    let target = dir.join("target");
    assert_eq!(code(&prepare(dir, &[&src_raw], &source)), 0);
    assert_eq!(code(&prepare(dir, &[&tgt_raw], &target)), 0);
    let cache = dir.join("cache");
    let o = xlssl(&[
        "extract", "--manifest", p(&source.join("manifest.jsonl")), p(&target.join("manifest.jsonl")),
        "--cache", p(&cache),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (source, target, cache)
}

#[test]
fn train_and_evaluate_end_to_end() {
    let dir = TempDir::new().unwrap();
    let (source, target, cache) = pipeline_fixture(dir.path());
    let cfg = small_config(dir.path(), json!({"train": {"loss": {"mode": "soft"}}}));
    let train = |out: &Path| {
        xlssl(&[
            "train", "--config", p(&cfg), "--source", p(&source), "--target", p(&target),
            "--n-labeled", "5", "--cache", p(&cache), "--out", p(out),
        ])
    };
    let out = dir.path().join("run1");
    let o = train(&out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["model.serm", "history.csv", "eval.json", "config.json", "pseudo_labels.jsonl", "confusion_english.csv", "confusion_german.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let resolved: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["loss"]["mode"], "soft");
    assert_eq!(resolved["train"]["loss"]["lambda_a"], 0.8);
    assert_eq!(resolved["train"]["loss"]["lambda_h"], 0.4);
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);

    let again = dir.path().join("run2");
    assert_eq!(code(&train(&again)), 0);
    for f in ["model.serm", "history.csv", "eval.json", "pseudo_labels.jsonl"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f} differs");
    }

    let eval_out = dir.path().join("eval");
    let o = xlssl(&[
        "evaluate", "--checkpoint", p(&out.join("model.serm")), "--data", p(&target),
        "--cache", p(&cache), "--out", p(&eval_out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval: Value = serde_json::from_str(&fs::read_to_string(eval_out.join("eval.json")).unwrap()).unwrap();
    let trained: Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    let ua = |v: &Value, lang: &str| {
        v["languages"]
            .as_array()
            .unwrap()
            .iter()
            .find(|l| l["language"] == lang)
            .map(|l| l["unweighted_accuracy"].as_f64().unwrap())
    };
    assert_eq!(ua(&eval, "german"), ua(&trained, "german"));
}

#[test]
fn train_without_cached_features_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let m = raw_corpus(dir.path(), "emo", "english", 3);
    let prep = dir.path().join("prep");
    assert_eq!(code(&prepare(dir.path(), &[&m], &prep)), 0);
    let cfg = small_config(dir.path(), json!({}));
    let o = xlssl(&[
        "train", "--config", p(&cfg), "--source", p(&prep), "--cache", p(&dir.path().join("empty")),
        "--out", p(&dir.path().join("out")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("extract"));
}

#[test]
fn cross_lingual_experiment_on_prepared_corpora() {
    let dir = TempDir::new().unwrap();
    let (source, target, cache) = pipeline_fixture(dir.path());
    let cfg = small_config(dir.path(), json!({"experiment": {"seeds": 2}}));
    let out = dir.path().join("exp");
    let o = xlssl(&[
        "experiment", "--config", p(&cfg), "--kind", "cross_lingual", "--source", p(&source),
        "--target", p(&target), "--cache", p(&cache), "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.starts_with("cross_lingual,english,german,")));
}
