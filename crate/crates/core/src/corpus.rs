//! Multilingual emotion corpora: manifests, taxonomy mapping, merging,
//! speaker-independent splits and labeled/unlabeled target partitions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of canonical emotion categories.
pub const NUM_CLASSES: usize = 5;

#[derive(Error, Debug)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty manifest")]
    EmptyManifest,
    #[error("line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("duplicate id {id:?} on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("duplicate id {0:?}")]
    DuplicateRecord(String),
    #[error("record {id:?} has language {found:?}, manifest language is {expected:?}")]
    LanguageMismatch {
        id: String,
        expected: String,
        found: String,
    },
    #[error("cannot merge manifests with languages {0:?} and {1:?}")]
    MergeLanguageMismatch(String, String),
    #[error("no manifests to merge")]
    NothingToMerge,
    #[error("record {id:?}: unknown emotion label {label:?}")]
    UnknownEmotion { id: String, label: String },
    #[error("raw label {label:?} (record {id:?}) is not covered by the taxonomy")]
    UnmappedLabel { id: String, label: String },
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("speaker-independent split needs at least 3 speakers, found {0}; merge corpora of the same language first")]
    TooFewSpeakers(usize),
    #[error("invalid split ratios {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("requested {requested} labeled records but only {available} are available")]
    TooManyLabeled { requested: usize, available: usize },
    #[error("record {0:?} has no emotion label")]
    MissingLabel(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, CorpusError>;

/// The five canonical emotion classes, in fixed index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionClass {
    Anger = 0,
    Fear = 1,
    Happiness = 2,
    Neutral = 3,
    Sadness = 4,
}

impl EmotionClass {
    pub const ALL: [EmotionClass; NUM_CLASSES] = [
        EmotionClass::Anger,
        EmotionClass::Fear,
        EmotionClass::Happiness,
        EmotionClass::Neutral,
        EmotionClass::Sadness,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionClass::Anger => "anger",
            EmotionClass::Fear => "fear",
            EmotionClass::Happiness => "happiness",
            EmotionClass::Neutral => "neutral",
            EmotionClass::Sadness => "sadness",
        }
    }

    /// Single-letter code used in result tables (A, F, H, N, S).
    pub fn code(self) -> char {
        match self {
            EmotionClass::Anger => 'A',
            EmotionClass::Fear => 'F',
            EmotionClass::Happiness => 'H',
            EmotionClass::Neutral => 'N',
            EmotionClass::Sadness => 'S',
        }
    }

    pub fn one_hot(self) -> [f64; NUM_CLASSES] {
        let mut v = [0.0; NUM_CLASSES];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for EmotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "anger" => Ok(EmotionClass::Anger),
            "fear" => Ok(EmotionClass::Fear),
            "happiness" => Ok(EmotionClass::Happiness),
            "neutral" => Ok(EmotionClass::Neutral),
            "sadness" => Ok(EmotionClass::Sadness),
            other => Err(format!("unknown emotion {other:?}")),
        }
    }
}

/// Per-class utterance tally, indexed by [`EmotionClass::index`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts(pub [usize; NUM_CLASSES]);

impl ClassCounts {
    pub fn get(&self, class: EmotionClass) -> usize {
        self.0[class.index()]
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

/// One manifest line as stored on disk; the emotion is still a raw corpus label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRecord {
    pub id: String,
    pub audio_path: String,
    pub speaker_id: String,
    pub language: String,
    pub emotion: Option<String>,
    pub duration_s: f64,
}

/// A manifest whose labels have not been mapped onto [`EmotionClass`] yet.
#[derive(Clone, Debug, PartialEq)]
pub struct RawManifest {
    pub name: String,
    pub language: String,
    pub records: Vec<RawRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub audio_path: String,
    pub speaker_id: String,
    pub language: String,
    /// `None` marks an unlabeled utterance.
    pub emotion: Option<EmotionClass>,
    pub duration_s: f64,
}

/// An immutable, validated set of utterances of a single language.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    name: String,
    language: String,
    records: Vec<UtteranceRecord>,
}

impl CorpusManifest {
    /// Validates id uniqueness and the shared language.
    pub fn new(
        name: impl Into<String>,
        language: impl Into<String>,
        records: Vec<UtteranceRecord>,
    ) -> Result<Self> {
        let language = language.into();
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(CorpusError::DuplicateRecord(r.id.clone()));
            }
            if r.language != language {
                return Err(CorpusError::LanguageMismatch {
                    id: r.id.clone(),
                    expected: language,
                    found: r.language.clone(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            language,
            records,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn language(&self) -> &str {
        &self.language
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Recounted on every call, so it always matches the records.
    pub fn counts(&self) -> ClassCounts {
        let mut counts = ClassCounts::default();
        for class in self.records.iter().filter_map(|r| r.emotion) {
            counts.0[class.index()] += 1;
        }
        counts
    }

    pub fn speakers(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.speaker_id.as_str()).collect()
    }

    /// Records whose ids are listed, in manifest order.
    pub fn select(&self, ids: &[String]) -> Vec<UtteranceRecord> {
        let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        self.records
            .iter()
            .filter(|r| wanted.contains(r.id.as_str()))
            .cloned()
            .collect()
    }

    /// Writes the manifest back out in JSON-lines form.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            let raw = RawRecord {
                id: r.id.clone(),
                audio_path: r.audio_path.clone(),
                speaker_id: r.speaker_id.clone(),
                language: r.language.clone(),
                emotion: r.emotion.map(|e| e.name().to_string()),
                duration_s: r.duration_s,
            };
            serde_json::to_writer(&mut out, &raw)?;
            out.push(b'\n');
        }
        write_file(path, &out)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

/// Parses a JSON-lines manifest without interpreting emotion labels.
pub fn load_raw_manifest(path: &Path) -> Result<RawManifest> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    let mut first_line: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                line: lineno,
                msg: e.to_string(),
            })?;
        if !(rec.duration_s >= 0.0 && rec.duration_s.is_finite()) {
            return Err(CorpusError::MalformedLine {
                line: lineno,
                msg: format!("duration_s must be a nonnegative number, got {}", rec.duration_s),
            });
        }
        if let Some(&first) = first_line.get(&rec.id) {
            return Err(CorpusError::DuplicateId {
                id: rec.id,
                first,
                second: lineno,
            });
        }
        first_line.insert(rec.id.clone(), lineno);
        records.push(rec);
    }
    let Some(first) = records.first() else {
        return Err(CorpusError::EmptyManifest);
    };
    let language = first.language.clone();
    if let Some(r) = records.iter().find(|r| r.language != language) {
        return Err(CorpusError::LanguageMismatch {
            id: r.id.clone(),
            expected: language,
            found: r.language.clone(),
        });
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    Ok(RawManifest {
        name,
        language,
        records,
    })
}

/// Loads a manifest whose emotion strings are already canonical class names
/// (or `null` for unlabeled records).
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let raw = load_raw_manifest(path)?;
    let records = raw
        .records
        .into_iter()
        .map(|r| {
            let emotion = match &r.emotion {
                None => None,
                Some(label) => Some(label.parse::<EmotionClass>().map_err(|_| {
                    CorpusError::UnknownEmotion {
                        id: r.id.clone(),
                        label: label.clone(),
                    }
                })?),
            };
            Ok(UtteranceRecord {
                id: r.id,
                audio_path: r.audio_path,
                speaker_id: r.speaker_id,
                language: r.language,
                emotion,
                duration_s: r.duration_s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CorpusManifest::new(raw.name, raw.language, records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaxonomyTarget {
    Class(EmotionClass),
    Discard,
}

/// Maps corpus-specific raw labels onto the canonical classes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Taxonomy {
    entries: BTreeMap<String, TaxonomyTarget>,
}

impl Taxonomy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Taxonomy accepting exactly the canonical class names.
    pub fn canonical() -> Self {
        let mut t = Self::new();
        for class in EmotionClass::ALL {
            t.insert(class.name(), TaxonomyTarget::Class(class));
        }
        t
    }

    pub fn insert(&mut self, raw: impl Into<String>, target: TaxonomyTarget) -> &mut Self {
        self.entries.insert(raw.into(), target);
        self
    }

    pub fn with(mut self, raw: &str, class: EmotionClass) -> Self {
        self.insert(raw, TaxonomyTarget::Class(class));
        self
    }

    pub fn discard(mut self, raw: &str) -> Self {
        self.insert(raw, TaxonomyTarget::Discard);
        self
    }

    pub fn lookup(&self, raw: &str) -> Option<TaxonomyTarget> {
        self.entries.get(raw).copied()
    }

    /// Parses `{"raw label": "anger" | ... | "discard", ...}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, String> = serde_json::from_str(text)?;
        let mut t = Self::new();
        for (raw, target) in map {
            let target = if target == "discard" {
                TaxonomyTarget::Discard
            } else {
                TaxonomyTarget::Class(target.parse().map_err(|e: String| {
                    CorpusError::InvalidTaxonomy(format!("entry {raw:?}: {e}"))
                })?)
            };
            t.insert(raw, target);
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Keeps the records whose raw label maps to a class, drops `Discard` ones.
/// Unlabeled records pass through unchanged. A label missing from the
/// taxonomy is an error.
pub fn map_and_filter_emotions(raw: &RawManifest, taxonomy: &Taxonomy) -> Result<CorpusManifest> {
    let mut records = Vec::with_capacity(raw.records.len());
    for r in &raw.records {
        let emotion = match &r.emotion {
            None => None,
            Some(label) => match taxonomy.lookup(label) {
                Some(TaxonomyTarget::Class(c)) => Some(c),
                Some(TaxonomyTarget::Discard) => continue,
                None => {
                    return Err(CorpusError::UnmappedLabel {
                        id: r.id.clone(),
                        label: label.clone(),
                    })
                }
            },
        };
        records.push(UtteranceRecord {
            id: r.id.clone(),
            audio_path: r.audio_path.clone(),
            speaker_id: r.speaker_id.clone(),
            language: r.language.clone(),
            emotion,
            duration_s: r.duration_s,
        });
    }
    CorpusManifest::new(raw.name.clone(), raw.language.clone(), records)
}

/// Concatenates same-language manifests. Record and speaker ids are prefixed
/// with `<manifest name>/` so they cannot collide across corpora.
pub fn merge_corpora(manifests: &[CorpusManifest]) -> Result<CorpusManifest> {
    let first = manifests.first().ok_or(CorpusError::NothingToMerge)?;
    let language = first.language.clone();
    if let Some(m) = manifests.iter().find(|m| m.language != language) {
        return Err(CorpusError::MergeLanguageMismatch(
            language,
            m.language.clone(),
        ));
    }
    let name = manifests
        .iter()
        .map(|m| m.name.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let records = manifests
        .iter()
        .flat_map(|m| {
            m.records.iter().map(move |r| UtteranceRecord {
                id: format!("{}/{}", m.name, r.id),
                speaker_id: format!("{}/{}", m.name, r.speaker_id),
                ..r.clone()
            })
        })
        .collect();
    CorpusManifest::new(name, language, records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    fn index(self) -> usize {
        self as usize
    }
}

/// Speaker-disjoint train/validation/test assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub speaker_map: BTreeMap<String, Partition>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl SplitAssignment {
    pub fn ids(&self, part: Partition) -> &[String] {
        match part {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

/// Assigns whole speakers to partitions, largest speaker first, each to the
/// partition with the largest remaining utterance deficit. Speakers with equal
/// utterance counts are ordered by a seeded shuffle.
pub fn split_speaker_independent(
    manifest: &CorpusManifest,
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidRatios(ratios));
    }
    let mut per_speaker: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &manifest.records {
        *per_speaker.entry(r.speaker_id.as_str()).or_default() += 1;
    }
    if per_speaker.len() < 3 {
        return Err(CorpusError::TooFewSpeakers(per_speaker.len()));
    }
    let mut speakers: Vec<(&str, usize)> = per_speaker.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    speakers.shuffle(&mut rng);
    speakers.sort_by_key(|s| std::cmp::Reverse(s.1));

    let total = manifest.len() as f64;
    let targets = ratios.map(|r| r * total);
    let mut filled = [0usize; 3];
    let mut n_speakers = [0usize; 3];
    let mut speaker_map = BTreeMap::new();
    let n = speakers.len();
    for (k, (spk, count)) in speakers.into_iter().enumerate() {
        let remaining = n - k;
        let empty: Vec<usize> = (0..3).filter(|&p| n_speakers[p] == 0).collect();
        let part = if remaining <= empty.len() {
            // Every partition must end up with at least one speaker.
            *empty
                .iter()
                .max_by(|&&a, &&b| {
                    // ties go to the lower index
                    let da = targets[a] - filled[a] as f64;
                    let db = targets[b] - filled[b] as f64;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("non-empty")
        } else {
            (0..3)
                .max_by(|&a, &b| {
                    let da = targets[a] - filled[a] as f64;
                    let db = targets[b] - filled[b] as f64;
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("three partitions")
        };
        filled[part] += count;
        n_speakers[part] += 1;
        speaker_map.insert(spk.to_string(), Partition::ALL[part]);
    }

    let mut parts: [Vec<String>; 3] = Default::default();
    for r in &manifest.records {
        let p = speaker_map[r.speaker_id.as_str()];
        parts[p.index()].push(r.id.clone());
    }
    let [train, val, test] = parts;
    Ok(SplitAssignment {
        train,
        val,
        test,
        speaker_map,
        seed,
        ratios,
    })
}

/// Ground-truth labels of the unlabeled target records. Training code only
/// ever sees the ids; evaluation oracles may open the seal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SealedLabels {
    labels: BTreeMap<String, EmotionClass>,
}

impl SealedLabels {
    pub fn reveal(&self, id: &str) -> Option<EmotionClass> {
        self.labels.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Target training records split into few labeled (K_t) and many unlabeled (U_t).
#[derive(Clone, Debug, PartialEq)]
pub struct TargetPartition {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    sealed: SealedLabels,
}

impl TargetPartition {
    pub fn sealed_labels(&self) -> &SealedLabels {
        &self.sealed
    }
}

/// Draws `n_labeled` records class-stratified: classes are visited
/// round-robin in index order and each class's records are seed-shuffled.
/// Both output id lists keep the input order.
pub fn partition_target(
    train_records: &[UtteranceRecord],
    n_labeled: usize,
    seed: u64,
) -> Result<TargetPartition> {
    if n_labeled > train_records.len() {
        return Err(CorpusError::TooManyLabeled {
            requested: n_labeled,
            available: train_records.len(),
        });
    }
    let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (i, r) in train_records.iter().enumerate() {
        let class = r.emotion.ok_or_else(|| CorpusError::MissingLabel(r.id.clone()))?;
        by_class[class.index()].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for bucket in by_class.iter_mut() {
        bucket.shuffle(&mut rng);
    }
    let mut chosen = vec![false; train_records.len()];
    let mut cursor = [0usize; NUM_CLASSES];
    let mut picked = 0;
    while picked < n_labeled {
        for c in 0..NUM_CLASSES {
            if picked == n_labeled {
                break;
            }
            if let Some(&i) = by_class[c].get(cursor[c]) {
                chosen[i] = true;
                cursor[c] += 1;
                picked += 1;
            }
        }
    }
    let mut labeled = Vec::with_capacity(n_labeled);
    let mut unlabeled = Vec::with_capacity(train_records.len() - n_labeled);
    let mut sealed = SealedLabels::default();
    for (r, &is_labeled) in train_records.iter().zip(&chosen) {
        if is_labeled {
            labeled.push(r.id.clone());
        } else {
            unlabeled.push(r.id.clone());
            sealed
                .labels
                .insert(r.id.clone(), r.emotion.expect("checked above"));
        }
    }
    Ok(TargetPartition {
        labeled,
        unlabeled,
        sealed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, spk: &str, lang: &str, emo: Option<EmotionClass>) -> UtteranceRecord {
        UtteranceRecord {
            id: id.into(),
            audio_path: format!("{id}.wav"),
            speaker_id: spk.into(),
            language: lang.into(),
            emotion: emo,
            duration_s: 2.5,
        }
    }

    fn raw(id: usize, spk: usize, label: &str) -> RawRecord {
        RawRecord {
            id: format!("u{id}"),
            audio_path: format!("u{id}.wav"),
            speaker_id: format!("s{spk}"),
            language: "german".into(),
            emotion: Some(label.into()),
            duration_s: 2.8,
        }
    }

    fn write_lines(dir: &Path, name: &str, lines: &[String]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    fn line(id: &str, emo: &str) -> String {
        format!(
            r#"{{"id":"{id}","audio_path":"{id}.wav","speaker_id":"s1","language":"english","emotion":{emo},"duration_s":1.5}}"#
        )
    }

    #[test]
    fn class_indices_are_fixed() {
        let idx: Vec<usize> = EmotionClass::ALL.iter().map(|c| c.index()).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        assert_eq!(EmotionClass::from_index(3), Some(EmotionClass::Neutral));
        assert_eq!(EmotionClass::from_index(5), None);
        let codes: String = EmotionClass::ALL.iter().map(|c| c.code()).collect();
        assert_eq!(codes, "AFHNS");
    }

    #[test]
    fn loads_well_formed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "m.jsonl",
            &[line("a", "\"anger\""), line("b", "null"), line("c", "\"sadness\"")],
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.name(), "m");
        assert_eq!(m.records()[1].emotion, None);
        assert_eq!(m.counts().0, [1, 0, 0, 0, 1]);
    }

    #[test]
    fn empty_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), "e.jsonl", &[]);
        let err = load_manifest(&p).unwrap_err();
        assert_eq!(err.to_string(), "empty manifest");
    }

    #[test]
    fn duplicate_id_cites_both_lines() {
        let dir = tempfile::tempdir().unwrap();
        let lines = vec![
            line("u0", "null"),
            line("u1", "null"),
            line("u2", "null"),
            line("u3", "null"),
            line("u1", "null"),
        ];
        let p = write_lines(dir.path(), "d.jsonl", &lines);
        match load_manifest(&p).unwrap_err() {
            CorpusError::DuplicateId { id, first, second } => {
                assert_eq!((id.as_str(), first, second), ("u1", 2, 5));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "bad.jsonl",
            &[line("a", "null"), "{not json".into()],
        );
        assert!(matches!(
            load_manifest(&p).unwrap_err(),
            CorpusError::MalformedLine { line: 2, .. }
        ));
    }

    #[test]
    fn missing_file_and_unknown_emotion() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/x.jsonl")),
            Err(CorpusError::Io { .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        let p = write_lines(dir.path(), "u.jsonl", &[line("a", "\"disgust\"")]);
        assert!(matches!(
            load_manifest(&p),
            Err(CorpusError::UnknownEmotion { .. })
        ));
    }

    fn emodb_taxonomy() -> Taxonomy {
        Taxonomy::new()
            .with("anger", EmotionClass::Anger)
            .with("fear", EmotionClass::Fear)
            .with("happiness", EmotionClass::Happiness)
            .with("neutral", EmotionClass::Neutral)
            .with("sadness", EmotionClass::Sadness)
            .discard("disgust")
            .discard("boredom")
    }

    #[test]
    fn emodb_style_filtering_matches_reported_tally() {
        // EMO-DB composition: 535 utterances over 7 raw classes.
        let tally = [
            ("anger", 127),
            ("boredom", 81),
            ("disgust", 46),
            ("fear", 69),
            ("happiness", 71),
            ("neutral", 79),
            ("sadness", 62),
        ];
        let mut records = Vec::new();
        for (label, n) in tally {
            for _ in 0..n {
                let id = records.len();
                records.push(raw(id, id % 10, label));
            }
        }
        assert_eq!(records.len(), 535);
        let m = RawManifest {
            name: "emodb".into(),
            language: "german".into(),
            records,
        };
        let out = map_and_filter_emotions(&m, &emodb_taxonomy()).unwrap();
        assert_eq!(out.counts().0, [127, 69, 71, 79, 62]);
        assert_eq!(out.len(), 408);
        assert_eq!(out.len() + 81 + 46, m.records.len());
    }

    #[test]
    fn five_class_manifest_is_unchanged_and_unmapped_label_fails() {
        let records: Vec<RawRecord> = EmotionClass::ALL
            .iter()
            .enumerate()
            .map(|(i, c)| raw(i, i, c.name()))
            .collect();
        let m = RawManifest {
            name: "x".into(),
            language: "german".into(),
            records,
        };
        let out = map_and_filter_emotions(&m, &Taxonomy::canonical()).unwrap();
        assert_eq!(out.len(), 5);
        for (r, c) in out.records().iter().zip(EmotionClass::ALL) {
            assert_eq!(r.emotion, Some(c));
        }

        let mut bad = m.clone();
        bad.records.push(raw(9, 0, "surprise"));
        match map_and_filter_emotions(&bad, &emodb_taxonomy()).unwrap_err() {
            CorpusError::UnmappedLabel { label, .. } => assert_eq!(label, "surprise"),
            e => panic!("unexpected {e}"),
        }
    }

    fn manifest_with_counts(name: &str, counts: [usize; 5], speakers: usize) -> CorpusManifest {
        let mut records = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let i = records.len();
                records.push(rec(
                    &format!("{i}"),
                    &format!("spk{}", i % speakers),
                    "english",
                    EmotionClass::from_index(c),
                ));
            }
        }
        CorpusManifest::new(name, "english", records).unwrap()
    }

    #[test]
    fn english_merge_sums_counts() {
        // Per-corpus 5-class tallies that add up to the merged English table.
        let ravdess = manifest_with_counts("ravdess", [192, 192, 192, 192, 96], 24);
        let savee = manifest_with_counts("savee", [60, 60, 60, 60, 120], 4);
        let tess = manifest_with_counts("tess", [400, 400, 400, 400, 400], 2);
        let merged = merge_corpora(&[ravdess, savee, tess]).unwrap();
        assert_eq!(merged.len(), 3224);
        assert_eq!(merged.counts().0, [652, 652, 652, 652, 616]);
        assert_eq!(merged.speakers().len(), 30);
        assert_eq!(merged.language(), "english");
        assert!(merged.get("tess/0").is_some());
    }

    #[test]
    fn merge_single_and_mismatched() {
        let a = manifest_with_counts("a", [1, 1, 0, 0, 0], 2);
        let merged = merge_corpora(std::slice::from_ref(&a)).unwrap();
        assert_eq!(merged.len(), a.len());
        assert_eq!(merged.records()[0].id, "a/0");
        assert_eq!(merged.records()[0].speaker_id, "a/spk0");

        let g = CorpusManifest::new("g", "german", vec![rec("x", "s", "german", None)]).unwrap();
        assert!(matches!(
            merge_corpora(&[a, g]),
            Err(CorpusError::MergeLanguageMismatch(..))
        ));
    }

    fn grid_manifest(n_speakers: usize, per_speaker: usize) -> CorpusManifest {
        let mut records = Vec::new();
        for s in 0..n_speakers {
            for u in 0..per_speaker {
                records.push(rec(
                    &format!("s{s}_u{u}"),
                    &format!("s{s}"),
                    "english",
                    EmotionClass::from_index(u % 5),
                ));
            }
        }
        CorpusManifest::new("grid", "english", records).unwrap()
    }

    fn check_split(m: &CorpusManifest, split: &SplitAssignment) {
        let mut seen = BTreeSet::new();
        let mut spk_part: BTreeMap<&str, Partition> = BTreeMap::new();
        for part in Partition::ALL {
            for id in split.ids(part) {
                assert!(seen.insert(id.clone()), "id {id} in two partitions");
                let r = m.get(id).unwrap();
                assert_eq!(split.speaker_map[&r.speaker_id], part);
                if let Some(prev) = spk_part.insert(&r.speaker_id, part) {
                    assert_eq!(prev, part);
                }
            }
        }
        assert_eq!(seen.len(), m.len());
        let mut per_spk: BTreeMap<&str, usize> = BTreeMap::new();
        for r in m.records() {
            *per_spk.entry(&r.speaker_id).or_default() += 1;
        }
        let max_share = *per_spk.values().max().unwrap() as f64 / m.len() as f64;
        for (k, part) in Partition::ALL.into_iter().enumerate() {
            let frac = split.ids(part).len() as f64 / m.len() as f64;
            assert!(
                (frac - split.ratios[k]).abs() <= max_share + 1e-12,
                "partition {part:?} frac {frac} vs {}",
                split.ratios[k]
            );
            assert!(!split.ids(part).is_empty());
        }
    }

    #[test]
    fn ten_equal_speakers_split_six_two_two() {
        let m = grid_manifest(10, 10);
        let split = split_speaker_independent(&m, DEFAULT_SPLIT_RATIOS, 7).unwrap();
        check_split(&m, &split);
        assert_eq!(
            (split.train.len(), split.val.len(), split.test.len()),
            (60, 20, 20)
        );
        let count = |p| split.speaker_map.values().filter(|&&v| v == p).count();
        assert_eq!(
            (count(Partition::Train), count(Partition::Val), count(Partition::Test)),
            (6, 2, 2)
        );
        let again = split_speaker_independent(&m, DEFAULT_SPLIT_RATIOS, 7).unwrap();
        assert_eq!(split, again);
    }

    #[test]
    fn two_speakers_is_an_error() {
        let m = grid_manifest(2, 5);
        assert!(matches!(
            split_speaker_independent(&m, DEFAULT_SPLIT_RATIOS, 0),
            Err(CorpusError::TooFewSpeakers(2))
        ));
    }

    #[test]
    fn split_json_round_trip() {
        let m = grid_manifest(5, 3);
        let split = split_speaker_independent(&m, DEFAULT_SPLIT_RATIOS, 1).unwrap();
        let back = SplitAssignment::from_json(&split.to_json().unwrap()).unwrap();
        assert_eq!(split, back);
    }

    proptest! {
        #[test]
        fn split_invariants_hold(sizes in prop::collection::vec(1usize..40, 3..50), seed in any::<u64>()) {
            let mut records = Vec::new();
            for (s, &n) in sizes.iter().enumerate() {
                for u in 0..n {
                    records.push(rec(&format!("{s}-{u}"), &format!("spk{s}"), "x", None));
                }
            }
            let m = CorpusManifest::new("p", "x", records).unwrap();
            let split = split_speaker_independent(&m, DEFAULT_SPLIT_RATIOS, seed).unwrap();
            check_split(&m, &split);
        }
    }

    fn target_records(per_class: [usize; 5]) -> Vec<UtteranceRecord> {
        let mut out = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for _ in 0..n {
                let i = out.len();
                out.push(rec(&format!("t{i}"), "s", "german", EmotionClass::from_index(c)));
            }
        }
        out
    }

    fn labeled_hist(recs: &[UtteranceRecord], p: &TargetPartition) -> [usize; 5] {
        let mut h = [0; 5];
        for id in &p.labeled {
            let r = recs.iter().find(|r| &r.id == id).unwrap();
            h[r.emotion.unwrap().index()] += 1;
        }
        h
    }

    #[test]
    fn partition_is_stratified() {
        let recs = target_records([100; 5]);
        let p = partition_target(&recs, 100, 1).unwrap();
        assert_eq!(p.labeled.len(), 100);
        assert_eq!(p.unlabeled.len(), 400);
        assert_eq!(labeled_hist(&recs, &p), [20; 5]);
        assert_eq!(p.sealed_labels().len(), 400);
        assert_eq!(p, partition_target(&recs, 100, 1).unwrap());

        // Scarce class: the rest absorb the remainder as evenly as possible.
        let recs = target_records([127, 69, 71, 79, 3]);
        let p = partition_target(&recs, 53, 4).unwrap();
        assert_eq!(labeled_hist(&recs, &p), [13, 13, 12, 12, 3]);
    }

    #[test]
    fn partition_boundaries() {
        let recs = target_records([3, 3, 3, 3, 3]);
        let p = partition_target(&recs, 0, 0).unwrap();
        assert!(p.labeled.is_empty());
        assert_eq!(p.unlabeled.len(), 15);
        let p = partition_target(&recs, 15, 0).unwrap();
        assert!(p.unlabeled.is_empty());
        assert!(matches!(
            partition_target(&recs, 16, 0),
            Err(CorpusError::TooManyLabeled { .. })
        ));
        // unlabeled entries keep their hidden truth
        let p = partition_target(&recs, 5, 2).unwrap();
        for id in &p.unlabeled {
            let truth = recs.iter().find(|r| &r.id == id).unwrap().emotion;
            assert_eq!(p.sealed_labels().reveal(id), truth);
        }
    }
}
