//! Waveform loading, band-limited resampling, Z-normalization and random
//! fixed-length segmentation.

use std::path::Path;

use rand::Rng;
use thiserror::Error;

/// Silent-clip guard for [`z_normalize`].
pub const EPS_STD: f64 = 1e-8;

/// Zero crossings of the interpolation kernel on each side of the centre.
const SINC_ZERO_CROSSINGS: usize = 32;
const KAISER_BETA: f64 = 8.0;
/// Kernel table resolution, in samples per zero crossing.
const SINC_OVERSAMPLE: usize = 512;

#[derive(Error, Debug)]
pub enum AudioError {
    #[error("audio file not found: {0}")]
    NotFound(String),
    #[error("malformed WAV header in {path}: {reason}")]
    MalformedHeader { path: String, reason: String },
    #[error("unsupported WAV encoding in {path}: {reason}")]
    UnsupportedEncoding { path: String, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty clip")]
    EmptyClip,
    #[error("invalid sample rate {0}")]
    InvalidRate(u32),
    #[error("invalid segment duration {0} s")]
    InvalidDuration(f64),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

/// Mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidRate(sample_rate));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
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

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

/// Reads a PCM WAV file (8/16/24/32-bit integer or 32-bit float) and
/// downmixes every channel to mono by per-sample mean.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    if !path.exists() {
        return Err(AudioError::NotFound(shown));
    }
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(e, &shown))?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(AudioError::UnsupportedEncoding {
            path: shown,
            reason: format!("{} channels", spec.channels),
        });
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(|e| map_hound(e, &shown))?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<Result<_, _>>()
                .map_err(|e| map_hound(e, &shown))?
        }
        (fmt, bits) => {
            return Err(AudioError::UnsupportedEncoding {
                path: shown,
                reason: format!("{fmt:?} with {bits} bits per sample"),
            })
        }
    };
    let channels = spec.channels as usize;
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    AudioClip::new(samples, spec.sample_rate)
}

fn map_hound(err: hound::Error, path: &str) -> AudioError {
    let path = path.to_string();
    match err {
        hound::Error::IoError(source) if source.kind() == std::io::ErrorKind::UnexpectedEof => {
            AudioError::MalformedHeader {
                path,
                reason: source.to_string(),
            }
        }
        hound::Error::IoError(source) => AudioError::Io { path, source },
        hound::Error::FormatError(reason) => AudioError::MalformedHeader {
            path,
            reason: reason.to_string(),
        },
        hound::Error::UnfinishedSample => AudioError::MalformedHeader {
            path,
            reason: "data chunk ends inside a sample".into(),
        },
        other => AudioError::UnsupportedEncoding {
            path,
            reason: other.to_string(),
        },
    }
}

/// Writes a mono 32-bit float WAV. Float storage keeps reloaded clips
/// bit-identical to what was generated.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<(), AudioError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(e, &shown))?;
    for &s in &clip.samples {
        writer.write_sample(s).map_err(|e| map_hound(e, &shown))?;
    }
    writer.finalize().map_err(|e| map_hound(e, &shown))
}

/// Zeroth-order modified Bessel function of the first kind.
pub(crate) fn bessel_i0(x: f64) -> f64 {
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

/// Kaiser-windowed sinc, tabulated over `[0, SINC_ZERO_CROSSINGS]` zero crossings.
struct SincTable {
    values: Vec<f64>,
}

impl SincTable {
    fn new() -> Self {
        let n = SINC_ZERO_CROSSINGS * SINC_OVERSAMPLE;
        let norm = bessel_i0(KAISER_BETA);
        let values = (0..=n + 1)
            .map(|i| {
                let x = i as f64 / SINC_OVERSAMPLE as f64;
                let u = x / SINC_ZERO_CROSSINGS as f64;
                if u >= 1.0 {
                    return 0.0;
                }
                let window = bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / norm;
                let sinc = if x == 0.0 {
                    1.0
                } else {
                    (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
                };
                sinc * window
            })
            .collect();
        Self { values }
    }

    /// Kernel value at `x` zero crossings from the centre.
    #[inline]
    fn at(&self, x: f64) -> f64 {
        let pos = x.abs() * SINC_OVERSAMPLE as f64;
        let idx = pos as usize;
        if idx + 1 >= self.values.len() {
            return 0.0;
        }
        let frac = pos - idx as f64;
        self.values[idx] * (1.0 - frac) + self.values[idx + 1] * frac
    }
}

fn sinc_table() -> &'static SincTable {
    static TABLE: std::sync::OnceLock<SincTable> = std::sync::OnceLock::new();
    TABLE.get_or_init(SincTable::new)
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// The output has `round(len * target / source)` samples. When downsampling,
/// the kernel is stretched so its cutoff sits at the target Nyquist.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::InvalidRate(target_rate));
    }
    if clip.sample_rate == target_rate {
        return Ok(clip.clone());
    }
    let src_rate = clip.sample_rate as f64;
    let ratio = target_rate as f64 / src_rate;
    let out_len = (clip.len() as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0);
    // half-width of the kernel in input samples
    let half_width = SINC_ZERO_CROSSINGS as f64 / cutoff;
    let table = sinc_table();
    let x = &clip.samples;
    let n = x.len() as isize;

    let samples = (0..out_len)
        .map(|j| {
            let t = j as f64 / ratio;
            let lo = ((t - half_width).ceil() as isize).max(0);
            let hi = ((t + half_width).floor() as isize).min(n - 1);
            let mut acc = 0.0f64;
            for i in lo..=hi {
                acc += x[i as usize] as f64 * table.at(cutoff * (t - i as f64));
            }
            (acc * cutoff) as f32
        })
        .collect();
    Ok(AudioClip {
        samples,
        sample_rate: target_rate,
    })
}

/// Shifts to zero mean and unit population standard deviation.
/// Clips whose standard deviation is below [`EPS_STD`] map to silence.
pub fn z_normalize(clip: &AudioClip) -> Result<AudioClip, AudioError> {
    if clip.is_empty() {
        return Err(AudioError::EmptyClip);
    }
    let n = clip.len() as f64;
    let mean = clip.samples.iter().map(|&s| s as f64).sum::<f64>() / n;
    let var = clip
        .samples
        .iter()
        .map(|&s| (s as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let samples = if std < EPS_STD {
        vec![0.0; clip.len()]
    } else {
        clip.samples
            .iter()
            .map(|&s| ((s as f64 - mean) / std) as f32)
            .collect()
    };
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    })
}

/// Number of samples a segment of `duration_s` seconds occupies.
pub fn segment_len(duration_s: f64, sample_rate: u32) -> usize {
    (duration_s * sample_rate as f64).round() as usize
}

/// Extracts a uniformly random window of `duration_s` seconds, or places a
/// shorter clip at a uniformly random offset inside a zero buffer.
pub fn random_segment<R: Rng + ?Sized>(
    clip: &AudioClip,
    duration_s: f64,
    rng: &mut R,
) -> Result<AudioClip, AudioError> {
    if clip.is_empty() {
        return Err(AudioError::EmptyClip);
    }
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(AudioError::InvalidDuration(duration_s));
    }
    let target = segment_len(duration_s, clip.sample_rate);
    if target == 0 {
        return Err(AudioError::InvalidDuration(duration_s));
    }
    let len = clip.len();
    let samples = if len >= target {
        let start = rng.random_range(0..=len - target);
        clip.samples[start..start + target].to_vec()
    } else {
        let offset = rng.random_range(0..=target - len);
        let mut out = vec![0.0f32; target];
        out[offset..offset + len].copy_from_slice(&clip.samples);
        out
    };
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    })
}
