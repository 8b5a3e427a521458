//! Log-mel spectrograms: STFT power, HTK mel filterbank, log flooring,
//! per-utterance standardization and the on-disk feature cache.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{Waveform, TARGET_RATE};

pub const FMEL_MAGIC: &[u8; 5] = b"FMEL1";

#[derive(Error, Debug)]
pub enum FeatureError {
    #[error("waveform of {len} samples is shorter than one {win}-sample window")]
    TooShort { len: usize, win: usize },
    #[error("expected a {expected} Hz waveform, got {found} Hz")]
    WrongRate { expected: u32, found: u32 },
    #[error("fmax {fmax} Hz exceeds the Nyquist frequency {nyquist} Hz")]
    AboveNyquist { fmax: f64, nyquist: f64 },
    #[error("invalid filterbank range: fmin {fmin} Hz, fmax {fmax} Hz")]
    InvalidRange { fmin: f64, fmax: f64 },
    #[error("dimension mismatch: filterbank has {fb_bins} bins, power has {power_bins}")]
    DimensionMismatch { fb_bins: usize, power_bins: usize },
    #[error("cache entry {path}: parameter hash {found:#010x} does not match {expected:#010x}")]
    VersionMismatch {
        path: String,
        expected: u32,
        found: u32,
    },
    #[error("no cached features for id {0:?}")]
    MissingId(String),
    #[error("cache entry {path}: {msg}")]
    Corrupt { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, FeatureError>;

/// Every knob of the feature pipeline. Its hash versions the cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureParams {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub std_guard: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            sample_rate: TARGET_RATE,
            n_fft: 1024,
            hop: 160,
            n_mels: 64,
            fmin: 60.0,
            fmax: 7800.0,
            log_floor: 1e-10,
            std_guard: 1e-8,
        }
    }
}

impl FeatureParams {
    /// First four bytes (little-endian) of the SHA-256 of the canonical JSON form.
    pub fn param_hash(&self) -> u32 {
        let json = serde_json::to_string(self).expect("plain struct serializes");
        let digest = Sha256::digest(json.as_bytes());
        u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]])
    }

    /// Frames covering `seconds` of audio.
    pub fn frames_for(&self, seconds: f64) -> usize {
        let samples = (seconds * self.sample_rate as f64).round() as usize;
        frame_count(samples, self.n_fft, self.hop)
    }
}

/// Frames that fit entirely inside the signal (no centering).
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        1 + (len - win) / hop
    }
}

/// Squared STFT magnitudes, `n_bins x n_frames`, bin-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerSpectrogram {
    pub n_bins: usize,
    pub n_frames: usize,
    pub data: Vec<f64>,
}

impl PowerSpectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * self.n_frames + frame]
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

pub fn stft_power(samples: &[f32], win: usize, hop: usize) -> Result<PowerSpectrogram> {
    let n_frames = frame_count(samples.len(), win, hop);
    if n_frames == 0 {
        return Err(FeatureError::TooShort {
            len: samples.len(),
            win,
        });
    }
    let n_bins = win / 2 + 1;
    let window = hann(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = vec![0.0; n_bins * n_frames];
    for t in 0..n_frames {
        let frame = &samples[t * hop..t * hop + win];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(s as f64 * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, c) in buf[..n_bins].iter().enumerate() {
            data[k * n_frames + t] = c.norm_sqr();
        }
    }
    Ok(PowerSpectrogram {
        n_bins,
        n_frames,
        data,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters without area normalization (peak weight 1).
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// `n_mels x n_bins`, row-major.
    pub weights: Vec<f64>,
    /// `n_mels + 2` band edges in Hz; filter `m` peaks at `edges[m + 1]`.
    pub edges_hz: Vec<f64>,
    pub sample_rate: u32,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges_hz[m + 1]
    }

    pub fn from_params(p: &FeatureParams) -> Result<Self> {
        build_mel_filterbank(p.n_mels, p.fmin, p.fmax, p.sample_rate, p.n_fft)
    }
}

pub fn build_mel_filterbank(
    n_mels: usize,
    fmin: f64,
    fmax: f64,
    sample_rate: u32,
    n_fft: usize,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if fmax > nyquist {
        return Err(FeatureError::AboveNyquist { fmax, nyquist });
    }
    if !(fmin >= 0.0 && fmin < fmax) {
        return Err(FeatureError::InvalidRange { fmin, fmax });
    }
    let n_bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let rise = (f - left) / (center - left);
            let fall = (right - f) / (right - center);
            weights[m * n_bins + k] = rise.min(fall).max(0.0);
        }
    }
    Ok(MelFilterbank {
        n_mels,
        n_bins,
        weights,
        edges_hz,
        sample_rate,
    })
}

/// `F x T` log-mel matrix, frequency-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f32>,
    pub normalized: bool,
}

impl Spectrogram {
    pub fn new(n_mels: usize, n_frames: usize, values: Vec<f32>, normalized: bool) -> Self {
        assert_eq!(values.len(), n_mels * n_frames, "spectrogram shape");
        Self {
            n_mels,
            n_frames,
            values,
            normalized,
        }
    }

    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.values)
    }
}

pub(crate) fn mean_std(values: &[f32]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

/// `ln(max(fb . power, floor))`.
pub fn log_mel(power: &PowerSpectrogram, fb: &MelFilterbank, floor: f64) -> Result<Spectrogram> {
    if power.n_bins != fb.n_bins {
        return Err(FeatureError::DimensionMismatch {
            fb_bins: fb.n_bins,
            power_bins: power.n_bins,
        });
    }
    let t_len = power.n_frames;
    let mut values = vec![0.0f32; fb.n_mels * t_len];
    let mut acc = vec![0.0f64; t_len];
    for m in 0..fb.n_mels {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (k, &w) in fb.row(m).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = &power.data[k * t_len..(k + 1) * t_len];
            for (a, &p) in acc.iter_mut().zip(row) {
                *a += w * p;
            }
        }
        for (v, &a) in values[m * t_len..(m + 1) * t_len].iter_mut().zip(&acc) {
            *v = a.max(floor).ln() as f32;
        }
    }
    Ok(Spectrogram::new(fb.n_mels, t_len, values, false))
}

/// `(s - mean) / (std + guard)` over all cells of the spectrogram.
pub fn normalize(s: &Spectrogram, guard: f64) -> Spectrogram {
    let (mean, std) = s.mean_std();
    let values = s
        .values
        .iter()
        .map(|&v| ((v as f64 - mean) / (std + guard)) as f32)
        .collect();
    Spectrogram::new(s.n_mels, s.n_frames, values, true)
}

/// Stateless waveform-to-feature converter holding the shared filterbank.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub params: FeatureParams,
    pub filterbank: MelFilterbank,
}

impl FeatureExtractor {
    pub fn new(params: FeatureParams) -> Result<Self> {
        let filterbank = MelFilterbank::from_params(&params)?;
        Ok(Self { params, filterbank })
    }

    /// Normalized log-mel spectrogram of a waveform at the configured rate.
    pub fn extract(&self, w: &Waveform) -> Result<Spectrogram> {
        if w.sample_rate != self.params.sample_rate {
            return Err(FeatureError::WrongRate {
                expected: self.params.sample_rate,
                found: w.sample_rate,
            });
        }
        let power = stft_power(&w.samples, self.params.n_fft, self.params.hop)?;
        let logmel = log_mel(&power, &self.filterbank, self.params.log_floor)?;
        Ok(normalize(&logmel, self.params.std_guard))
    }
}

/// Random window of `n_frames` frames; shorter spectrograms are centered and
/// padded with their minimum value (the silence level after normalization).
pub fn crop_frames<R: Rng>(s: &Spectrogram, n_frames: usize, rng: &mut R) -> Spectrogram {
    if s.n_frames == n_frames {
        return s.clone();
    }
    let mut values = Vec::with_capacity(s.n_mels * n_frames);
    if s.n_frames > n_frames {
        let offset = rng.random_range(0..=s.n_frames - n_frames);
        for m in 0..s.n_mels {
            let row = &s.values[m * s.n_frames..(m + 1) * s.n_frames];
            values.extend_from_slice(&row[offset..offset + n_frames]);
        }
    } else {
        let fill = s.values.iter().copied().fold(f32::INFINITY, f32::min);
        let left = (n_frames - s.n_frames) / 2;
        for m in 0..s.n_mels {
            let row = &s.values[m * s.n_frames..(m + 1) * s.n_frames];
            values.extend(std::iter::repeat_n(fill, left));
            values.extend_from_slice(row);
            values.extend(std::iter::repeat_n(fill, n_frames - left - s.n_frames));
        }
    }
    Spectrogram::new(s.n_mels, n_frames, values, s.normalized)
}

/// Maps an utterance id onto a file-name-safe stem (injective).
pub(crate) fn file_stem_for(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'.' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

pub fn encode_fmel(s: &Spectrogram, param_hash: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 4 * s.values.len());
    out.extend_from_slice(FMEL_MAGIC);
    out.extend_from_slice(&param_hash.to_le_bytes());
    out.extend_from_slice(&(s.n_mels as u32).to_le_bytes());
    out.extend_from_slice(&(s.n_frames as u32).to_le_bytes());
    for v in &s.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Returns the parameter hash stored in the header along with the spectrogram.
pub fn decode_fmel(bytes: &[u8], path: &str) -> Result<(u32, Spectrogram)> {
    let corrupt = |msg: String| FeatureError::Corrupt {
        path: path.into(),
        msg,
    };
    if bytes.len() < 17 || &bytes[..5] != FMEL_MAGIC {
        return Err(corrupt("bad magic or short header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (hash, f, t) = (word(5), word(9) as usize, word(13) as usize);
    let expected = 17 + 4 * f * t;
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "expected {expected} bytes for {f}x{t}, found {}",
            bytes.len()
        )));
    }
    let values = bytes[17..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((hash, Spectrogram::new(f, t, values, true)))
}

/// Directory of `<id>.fmel` files written with a fixed parameter set.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
    param_hash: u32,
}

impl FeatureCache {
    pub fn open(dir: impl Into<PathBuf>, params: &FeatureParams) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| FeatureError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            dir,
            param_hash: params.param_hash(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{}.fmel", file_stem_for(id)))
    }

    /// Writes to a temporary name and renames, so readers never see a partial file.
    pub fn store(&self, id: &str, s: &Spectrogram) -> Result<()> {
        let path = self.path_for(id);
        let tmp = path.with_extension("fmel.tmp");
        let io = |source| FeatureError::Io {
            path: path.display().to_string(),
            source,
        };
        fs::write(&tmp, encode_fmel(s, self.param_hash)).map_err(io)?;
        fs::rename(&tmp, &path).map_err(io)
    }

    pub fn load(&self, id: &str) -> Result<Spectrogram> {
        let path = self.path_for(id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(FeatureError::MissingId(id.into()))
            }
            Err(source) => {
                return Err(FeatureError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        let name = path.display().to_string();
        let (hash, s) = decode_fmel(&bytes, &name)?;
        if hash != self.param_hash {
            return Err(FeatureError::VersionMismatch {
                path: name,
                expected: self.param_hash,
                found: hash,
            });
        }
        Ok(s)
    }

    /// True when an entry exists and was written with the current parameters.
    pub fn is_fresh(&self, id: &str) -> bool {
        let Ok(bytes) = fs::read(self.path_for(id)) else {
            return false;
        };
        bytes.len() >= 9
            && &bytes[..5] == FMEL_MAGIC
            && u32::from_le_bytes(bytes[5..9].try_into().unwrap()) == self.param_hash
    }
}
