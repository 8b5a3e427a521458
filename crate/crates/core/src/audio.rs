//! WAV decoding, mono mixdown, 16 kHz resampling and 2 s training crops.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Sample rate every downstream stage assumes.
pub const TARGET_RATE: u32 = 16_000;
/// Lowest accepted input rate; anything lower would alias below the mel ceiling.
pub const MIN_INPUT_RATE: u32 = 8_000;
/// Length of a training crop in seconds.
pub const CROP_SECONDS: f64 = 2.0;
pub const CROP_SAMPLES: usize = 32_000;

pub const KAISER_BETA: f64 = 8.6;
pub const TAPS_PER_PHASE: usize = 64;
/// Cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.93;
/// Above this many coefficients the kernel is evaluated per output sample.
const MAX_TABLE_LEN: usize = 1 << 22;

#[derive(Error, Debug)]
pub enum AudioError {
    #[error("{path}: unsupported encoding ({detail})")]
    UnsupportedEncoding { path: String, detail: String },
    #[error("{path}: truncated or corrupt file ({detail})")]
    Truncated { path: String, detail: String },
    #[error("{path}: no samples")]
    Empty { path: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("sample rate {0} Hz is below the minimum of {MIN_INPUT_RATE} Hz")]
    RateTooLow(u32),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

type Result<T> = std::result::Result<T, AudioError>;

/// Mono audio with amplitudes in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Decodes 16-bit PCM or 32-bit float WAV, averaging channels to mono.
pub fn decode_wav(path: &Path) -> Result<Waveform> {
    let name = path.display().to_string();
    let reader = hound::WavReader::open(path).map_err(|e| hound_error(&name, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(AudioError::UnsupportedEncoding {
            path: name,
            detail: format!("{channels} channels"),
        });
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| hound_error(&name, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| hound_error(&name, e))?,
        (fmt, bits) => {
            return Err(AudioError::UnsupportedEncoding {
                path: name,
                detail: format!("{fmt:?} {bits}-bit"),
            })
        }
    };
    if !interleaved.len().is_multiple_of(channels) {
        return Err(AudioError::Truncated {
            path: name,
            detail: "partial frame".into(),
        });
    }
    let samples: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|f| f.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    if samples.is_empty() {
        return Err(AudioError::Empty { path: name });
    }
    if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
        return Err(AudioError::NonFinite(i));
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

fn hound_error(path: &str, e: hound::Error) -> AudioError {
    match e {
        hound::Error::Unsupported => AudioError::UnsupportedEncoding {
            path: path.into(),
            detail: "unsupported encoding".into(),
        },
        hound::Error::IoError(source) if source.kind() == std::io::ErrorKind::UnexpectedEof => {
            AudioError::Truncated {
                path: path.into(),
                detail: source.to_string(),
            }
        }
        hound::Error::IoError(source) => AudioError::Io {
            path: path.into(),
            source,
        },
        other => AudioError::Truncated {
            path: path.into(),
            detail: other.to_string(),
        },
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Rational polyphase resampler with a Kaiser-windowed sinc kernel.
///
/// The kernel spans [`TAPS_PER_PHASE`] periods of the lower of the two rates,
/// so when decimating it is stretched over `TAPS_PER_PHASE * in / out` input
/// samples. Each phase is normalized to unit DC gain.
#[derive(Clone, Debug)]
pub struct Resampler {
    in_rate: u32,
    out_rate: u32,
    up: u64,
    down: u64,
    taps: usize,
    cutoff: f64,
    half_width: f64,
    i0_beta: f64,
    table: Option<Vec<f64>>,
}

impl Resampler {
    pub fn new(in_rate: u32, out_rate: u32) -> Result<Self> {
        if in_rate < MIN_INPUT_RATE {
            return Err(AudioError::RateTooLow(in_rate));
        }
        let g = gcd(in_rate as u64, out_rate as u64);
        let up = out_rate as u64 / g;
        let down = in_rate as u64 / g;
        let scale = (out_rate as f64 / in_rate as f64).min(1.0);
        let half_width = (TAPS_PER_PHASE / 2) as f64 / scale;
        let taps = 2 * half_width.ceil() as usize;
        let mut r = Self {
            in_rate,
            out_rate,
            up,
            down,
            taps,
            cutoff: scale * ROLLOFF,
            half_width,
            i0_beta: bessel_i0(KAISER_BETA),
            table: None,
        };
        if (up as usize).saturating_mul(taps) <= MAX_TABLE_LEN {
            let mut table = Vec::with_capacity(up as usize * taps);
            for phase in 0..up {
                table.extend(r.kernel(phase));
            }
            r.table = Some(table);
        }
        Ok(r)
    }

    /// Coefficients for input samples `base - taps/2 + 1 ..= base + taps/2`
    /// when the output instant sits `phase / up` samples past `base`.
    fn kernel(&self, phase: u64) -> Vec<f64> {
        let frac = phase as f64 / self.up as f64;
        let lead = (self.taps / 2 - 1) as f64;
        let mut k: Vec<f64> = (0..self.taps)
            .map(|j| {
                let x = frac + lead - j as f64;
                let r = x / self.half_width;
                if r.abs() > 1.0 {
                    return 0.0;
                }
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.i0_beta;
                self.cutoff * sinc(self.cutoff * x) * window
            })
            .collect();
        let sum: f64 = k.iter().sum();
        k.iter_mut().for_each(|c| *c /= sum);
        k
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        let num = input_len as u128 * self.out_rate as u128;
        let den = self.in_rate as u128;
        ((num + den / 2) / den) as usize
    }

    pub fn process(&self, input: &[f32]) -> Vec<f32> {
        let n_out = self.output_len(input.len());
        let lead = (self.taps / 2 - 1) as i64;
        let mut fallback = Vec::new();
        (0..n_out)
            .map(|n| {
                let pos = n as u64 * self.down;
                let base = (pos / self.up) as i64;
                let phase = pos % self.up;
                let coeffs: &[f64] = match &self.table {
                    Some(t) => &t[phase as usize * self.taps..(phase as usize + 1) * self.taps],
                    None => {
                        fallback = self.kernel(phase);
                        &fallback
                    }
                };
                let start = base - lead;
                let mut acc = 0.0f64;
                for (j, c) in coeffs.iter().enumerate() {
                    let idx = start + j as i64;
                    if idx >= 0 && (idx as usize) < input.len() {
                        acc += c * input[idx as usize] as f64;
                    }
                }
                acc as f32
            })
            .collect()
    }
}

/// Resamples to `target_rate`; input already at that rate is returned as is.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    let r = Resampler::new(w.sample_rate, target_rate)?;
    Ok(Waveform::new(r.process(&w.samples), target_rate))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMode {
    /// Uniformly placed 2 s window; shorter input is zero-padded on both sides.
    Random { seed: u64 },
    /// The whole utterance, as used at test time.
    Full,
}

pub fn crop_or_pad(w: &Waveform, mode: CropMode) -> Waveform {
    match mode {
        CropMode::Full => w.clone(),
        CropMode::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Waveform::new(crop_window(&w.samples, CROP_SAMPLES, &mut rng), w.sample_rate)
        }
    }
}

/// Random contiguous window of `len` samples, or the input centered in zeros.
pub(crate) fn crop_window<R: Rng>(samples: &[f32], len: usize, rng: &mut R) -> Vec<f32> {
    if samples.len() >= len {
        let offset = rng.random_range(0..=samples.len() - len);
        samples[offset..offset + len].to_vec()
    } else {
        let left = (len - samples.len()) / 2;
        let mut out = vec![0.0; len];
        out[left..left + samples.len()].copy_from_slice(samples);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn write_pcm16(path: &Path, channels: u16, rate: u32, samples: &[i16]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn pcm16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_pcm16(&p, 1, 16000, &[0, 16384, -32768]);
        let w = decode_wav(&p).unwrap();
        assert_eq!(w.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(w.sample_rate, 16000);
    }

    #[test]
    fn float_stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 48000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for s in [1.0f32, 0.0, -0.5, 0.25] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let w = decode_wav(&p).unwrap();
        assert_eq!(w.samples, vec![0.5, -0.125]);
    }

    fn riff(format_tag: u16, bits: u16, data: &[u8], declared_data_len: u32) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(b"RIFF");
        b.extend((36 + data.len() as u32).to_le_bytes());
        b.extend(b"WAVEfmt ");
        b.extend(16u32.to_le_bytes());
        b.extend(format_tag.to_le_bytes());
        b.extend(1u16.to_le_bytes());
        b.extend(8000u32.to_le_bytes());
        b.extend((8000 * bits as u32 / 8).to_le_bytes());
        b.extend((bits / 8).to_le_bytes());
        b.extend(bits.to_le_bytes());
        b.extend(b"data");
        b.extend(declared_data_len.to_le_bytes());
        b.extend(data);
        b
    }

    #[test]
    fn mulaw_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mu.wav");
        std::fs::write(&p, riff(7, 8, &[0x7f; 16], 16)).unwrap();
        let err = decode_wav(&p).unwrap_err();
        assert!(matches!(err, AudioError::UnsupportedEncoding { .. }), "{err}");
        assert!(err.to_string().contains("unsupported encoding"));
    }

    #[test]
    fn truncated_and_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        std::fs::write(&p, riff(1, 16, &[0, 1, 2, 3, 4], 400)).unwrap();
        assert!(decode_wav(&p).is_err());

        let p = dir.path().join("z.wav");
        write_pcm16(&p, 1, 16000, &[]);
        assert!(matches!(decode_wav(&p), Err(AudioError::Empty { .. })));
    }

    #[test]
    fn same_rate_is_identity() {
        let w = Waveform::new((0..1000).map(|i| (i as f32 * 0.37).sin()).collect(), 16000);
        let out = resample(&w, TARGET_RATE).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn low_rate_is_rejected() {
        let w = Waveform::new(vec![0.0; 10], 7999);
        assert!(matches!(resample(&w, TARGET_RATE), Err(AudioError::RateTooLow(7999))));
    }

    #[test]
    fn output_lengths_follow_rate_ratio() {
        for (rate, len) in [(44100u32, 44100usize), (22050, 12345), (24414, 48828), (48000, 7)] {
            let r = Resampler::new(rate, TARGET_RATE).unwrap();
            let expected = (len as f64 * 16000.0 / rate as f64).round() as usize;
            assert_eq!(r.output_len(len), expected);
        }
        let w = Waveform::new(vec![0.1; 44100], 44100);
        let out = resample(&w, TARGET_RATE).unwrap();
        assert!((out.len() as i64 - 16000).abs() <= 1);
    }

    fn sine(rate: u32, freq: f64, seconds: f64) -> Waveform {
        let n = (rate as f64 * seconds).round() as usize;
        Waveform::new(
            (0..n)
                .map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin() as f32 * 0.5)
                .collect(),
            rate,
        )
    }

    fn energy_db(x: &[f32]) -> f64 {
        10.0 * (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).log10()
    }

    #[test]
    fn in_band_energy_is_preserved() {
        for rate in [22050u32, 24414, 44100, 48000] {
            for freq in [440.0, 1000.0, 3000.0] {
                let w = sine(rate, freq, 1.0);
                let out = resample(&w, TARGET_RATE).unwrap();
                // skip the kernel ramp at the edges
                let inner = &out.samples[400..out.len() - 400];
                let delta = energy_db(inner) - energy_db(&w.samples);
                assert!(delta.abs() < 0.5, "rate {rate} freq {freq}: {delta} dB");
            }
        }
    }

    #[test]
    fn downsampled_sine_has_no_spurs() {
        let out = resample(&sine(48000, 1000.0, 1.0), TARGET_RATE).unwrap();
        assert_eq!(out.len(), 16000);
        let n = out.len();
        let mut buf: Vec<Complex<f64>> = out
            .samples
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let hann = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
                Complex::new(v as f64 * hann, 0.0)
            })
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let mag: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
        let peak = (0..n / 2).max_by(|&a, &b| mag[a].total_cmp(&mag[b])).unwrap();
        assert_eq!(peak, 1000);
        let spur = (0..n / 2)
            .filter(|k| k.abs_diff(peak) > 2)
            .map(|k| mag[k])
            .fold(0.0, f64::max);
        let db = 20.0 * (spur / mag[peak]).log10();
        assert!(db <= -60.0, "spur at {db} dB");
    }

    #[test]
    fn resampling_is_deterministic() {
        let w = sine(44100, 700.0, 0.3);
        assert_eq!(resample(&w, TARGET_RATE).unwrap(), resample(&w, TARGET_RATE).unwrap());
    }

    #[test]
    fn random_crop_bounds_and_determinism() {
        let w = Waveform::new((0..80000).map(|i| i as f32).collect(), 16000);
        for seed in 0..200 {
            let c = crop_or_pad(&w, CropMode::Random { seed });
            assert_eq!(c.len(), CROP_SAMPLES);
            let offset = c.samples[0] as usize;
            assert!(offset <= 48000);
            // verbatim slice of the input
            assert!(c.samples.iter().enumerate().all(|(i, &v)| v as usize == offset + i));
            assert_eq!(c, crop_or_pad(&w, CropMode::Random { seed }));
        }
    }

    #[test]
    fn short_input_is_padded_symmetrically() {
        let w = Waveform::new(vec![1.0; 16000], 16000);
        let c = crop_or_pad(&w, CropMode::Random { seed: 9 });
        assert_eq!(c.len(), CROP_SAMPLES);
        assert!(c.samples[..8000].iter().all(|&v| v == 0.0));
        assert!(c.samples[8000..24000].iter().all(|&v| v == 1.0));
        assert!(c.samples[24000..].iter().all(|&v| v == 0.0));
        assert_eq!(crop_or_pad(&w, CropMode::Full), w);
    }
}
