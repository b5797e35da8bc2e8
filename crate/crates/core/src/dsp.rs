//! Log-mel front-end: centred STFT power, HTK mel filterbank and log compression.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::AudioClip;

#[derive(Error, Debug, PartialEq)]
pub enum DspError {
    #[error("invalid spectrogram config: {0}")]
    InvalidConfig(String),
    #[error("clip sample rate {clip} does not match config rate {config}")]
    RateMismatch { clip: u32, config: u32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty clip")]
    EmptyClip,
}

/// Parameters of the waveform to log-mel transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl SpecConfig {
    /// 6 s segments, 128 mel bins: 128 x 384 spectrograms.
    pub fn part1() -> Self {
        Self {
            sample_rate: 16000,
            n_fft: 2048,
            win_length: 2048,
            hop_length: 250,
            n_mels: 128,
            f_min: 0.0,
            f_max: 8000.0,
            log_floor: 1e-6,
        }
    }

    /// 8 s segments, 256 mel bins: 256 x 512 spectrograms.
    pub fn part2() -> Self {
        Self {
            n_mels: 256,
            ..Self::part1()
        }
    }

    /// Reduced front-end for the bundled 1 s toy corpus (32 x 64).
    pub fn toy() -> Self {
        Self {
            n_fft: 512,
            win_length: 512,
            n_mels: 32,
            ..Self::part1()
        }
    }

    pub fn validate(&self) -> Result<(), DspError> {
        let bad = |m: &str| Err(DspError::InvalidConfig(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.n_fft < 2 || self.win_length == 0 || self.win_length > self.n_fft {
            return bad("need 0 < win_length <= n_fft and n_fft >= 2");
        }
        if self.hop_length == 0 {
            return bad("hop_length must be >= 1");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be >= 1");
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return bad("need 0 <= f_min < f_max <= sample_rate / 2");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.hop_length)
    }
}

impl Default for SpecConfig {
    fn default() -> Self {
        Self::part1()
    }
}

/// Log-mel spectrogram, `n_mels` rows by `n_frames` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub values: Array2<f32>,
    pub config: SpecConfig,
}

impl MelSpec {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn mean(&self) -> f32 {
        (self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64) as f32
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Periodic Hann window of `win_length`, zero-padded symmetrically to `n_fft`.
fn padded_hann(cfg: &SpecConfig) -> Vec<f64> {
    let mut window = vec![0.0; cfg.n_fft];
    let offset = (cfg.n_fft - cfg.win_length) / 2;
    for i in 0..cfg.win_length {
        let phase = 2.0 * std::f64::consts::PI * i as f64 / cfg.win_length as f64;
        window[offset + i] = 0.5 - 0.5 * phase.cos();
    }
    window
}

/// Triangular HTK mel filterbank, `n_mels x (n_fft/2 + 1)`.
pub fn mel_filterbank(cfg: &SpecConfig) -> Result<Array2<f64>, DspError> {
    cfg.validate()?;
    let n_bins = cfg.n_bins();
    let mel_lo = hz_to_mel(cfg.f_min);
    let mel_hi = hz_to_mel(cfg.f_max);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;

    let mut fb = Array2::<f64>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = bin_hz(k);
            let rising = (f - left) / (centre - left);
            let falling = (right - f) / (right - centre);
            fb[[m, k]] = rising.min(falling).max(0.0);
        }
        // Filters narrower than the bin spacing still get the nearest bin.
        if fb.row(m).iter().all(|&w| w == 0.0) {
            let nearest = ((centre * cfg.n_fft as f64 / cfg.sample_rate as f64).round() as usize)
                .min(n_bins - 1);
            fb[[m, nearest]] = 1.0;
        }
    }
    Ok(fb)
}

/// Reusable transform with the FFT plan, window and filterbank cached.
pub struct MelExtractor {
    cfg: SpecConfig,
    window: Vec<f64>,
    filterbank: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("cfg", &self.cfg).finish()
    }
}

impl MelExtractor {
    pub fn new(cfg: SpecConfig) -> Result<Self, DspError> {
        let filterbank = mel_filterbank(&cfg)?;
        let window = padded_hann(&cfg);
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg,
            window,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &SpecConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filterbank
    }

    /// Power spectrogram `(n_fft/2 + 1) x ceil(N / hop)`. Frame `t` is centred
    /// on sample `t * hop`; the signal is zero outside its bounds.
    pub fn stft_power(&self, clip: &AudioClip) -> Result<Array2<f64>, DspError> {
        let cfg = &self.cfg;
        if clip.sample_rate != cfg.sample_rate {
            return Err(DspError::RateMismatch {
                clip: clip.sample_rate,
                config: cfg.sample_rate,
            });
        }
        if clip.is_empty() {
            return Err(DspError::EmptyClip);
        }
        let n_frames = cfg.n_frames(clip.len());
        let n_bins = cfg.n_bins();
        let half = (cfg.n_fft / 2) as isize;
        let mut power = Array2::<f64>::zeros((n_bins, n_frames));
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let len = clip.len() as isize;
        for t in 0..n_frames {
            let start = (t * cfg.hop_length) as isize - half;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let v = if (0..len).contains(&idx) {
                    clip.samples[idx as usize] as f64 * self.window[i]
                } else {
                    0.0
                };
                *slot = Complex::new(v, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, c) in buf[..n_bins].iter().enumerate() {
                power[[k, t]] = c.norm_sqr();
            }
        }
        Ok(power)
    }

    pub fn log_mel(&self, power: &Array2<f64>) -> Result<MelSpec, DspError> {
        log_mel(power, &self.filterbank, &self.cfg)
    }

    pub fn transform(&self, clip: &AudioClip) -> Result<MelSpec, DspError> {
        let power = self.stft_power(clip)?;
        self.log_mel(&power)
    }
}

/// Power spectrogram of `clip` under `cfg`; see [`MelExtractor::stft_power`].
pub fn stft_power(clip: &AudioClip, cfg: &SpecConfig) -> Result<Array2<f64>, DspError> {
    MelExtractor::new(cfg.clone())?.stft_power(clip)
}

/// `ln(filterbank . power + log_floor)`.
pub fn log_mel(
    power: &Array2<f64>,
    filterbank: &Array2<f64>,
    cfg: &SpecConfig,
) -> Result<MelSpec, DspError> {
    if filterbank.ncols() != power.nrows() {
        return Err(DspError::Shape(format!(
            "filterbank has {} columns, power has {} bins",
            filterbank.ncols(),
            power.nrows()
        )));
    }
    let mel = filterbank.dot(power);
    let values = mel.mapv(|p| (p + cfg.log_floor).ln() as f32);
    Ok(MelSpec {
        values,
        config: cfg.clone(),
    })
}

/// The full waveform to log-mel transform. Callers transforming many clips
/// should hold a [`MelExtractor`] instead.
pub fn transform(clip: &AudioClip, cfg: &SpecConfig) -> Result<MelSpec, DspError> {
    MelExtractor::new(cfg.clone())?.transform(clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clip(samples: Vec<f32>) -> AudioClip {
        AudioClip::new(samples, 16000).unwrap()
    }

    #[test]
    fn mel_formula_values() {
        assert_eq!(hz_to_mel(0.0), 0.0);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filterbank_is_nonnegative_with_nonzero_rows() {
        for cfg in [SpecConfig::part1(), SpecConfig::part2(), SpecConfig::toy()] {
            let fb = mel_filterbank(&cfg).unwrap();
            assert_eq!(fb.dim(), (cfg.n_mels, cfg.n_fft / 2 + 1));
            assert!(fb.iter().all(|&w| w >= 0.0));
            for row in fb.rows() {
                assert!(row.iter().any(|&w| w > 0.0));
            }
        }
    }

    #[test]
    fn filterbank_covers_interior_bins() {
        for cfg in [SpecConfig::part1(), SpecConfig::part2(), SpecConfig::toy()] {
            let fb = mel_filterbank(&cfg).unwrap();
            for k in 0..cfg.n_bins() {
                let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
                if f > cfg.f_min && f < cfg.f_max {
                    assert!(fb.column(k).sum() > 0.0, "bin {k} ({f} Hz) uncovered");
                }
            }
        }
    }

    #[test]
    fn frame_counts_match_published_shapes() {
        let p1 = transform(&clip(vec![0.1; 96_000]), &SpecConfig::part1()).unwrap();
        assert_eq!(p1.shape(), (128, 384));
        let p2 = transform(&clip(vec![0.1; 128_000]), &SpecConfig::part2()).unwrap();
        assert_eq!(p2.shape(), (256, 512));
    }

    #[test]
    fn silence_maps_to_floor() {
        let cfg = SpecConfig::part1();
        let power = stft_power(&clip(vec![0.0; 96_000]), &cfg).unwrap();
        assert_eq!(power.dim(), (1025, 384));
        assert!(power.iter().all(|&p| p == 0.0));
        let spec = transform(&clip(vec![0.0; 96_000]), &cfg).unwrap();
        let floor = (cfg.log_floor).ln() as f32;
        assert!(spec.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn bin_centred_sine_concentrates_energy() {
        let cfg = SpecConfig::part1();
        let k = 100usize;
        let freq = k as f64 * 16000.0 / 2048.0;
        let samples = (0..16000)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin() as f32)
            .collect();
        let power = stft_power(&clip(samples), &cfg).unwrap();
        let col = power.column(32);
        let total: f64 = col.sum();
        let near: f64 = (k - 1..=k + 1).map(|b| col[b]).sum();
        assert!(near / total > 0.9, "fraction {}", near / total);
    }

    #[test]
    fn rate_mismatch_and_shape_errors() {
        let cfg = SpecConfig::part1();
        let wrong = AudioClip::new(vec![0.0; 100], 8000).unwrap();
        assert_eq!(
            stft_power(&wrong, &cfg).unwrap_err(),
            DspError::RateMismatch {
                clip: 8000,
                config: 16000
            }
        );
        let fb = mel_filterbank(&cfg).unwrap();
        let bad = Array2::<f64>::zeros((10, 4));
        assert!(matches!(log_mel(&bad, &fb, &cfg), Err(DspError::Shape(_))));
        let invalid = SpecConfig {
            win_length: 4096,
            ..cfg
        };
        assert!(invalid.validate().is_err());
    }

    #[test]
    fn transform_is_bit_deterministic() {
        let samples: Vec<f32> = (0..20_000).map(|i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5).collect();
        let a = transform(&clip(samples.clone()), &SpecConfig::toy()).unwrap();
        let b = transform(&clip(samples), &SpecConfig::toy()).unwrap();
        assert!(a.values.iter().zip(b.values.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    proptest! {
        #[test]
        fn frame_count_law(n in 1usize..=200_000) {
            let cfg = SpecConfig::part1();
            prop_assert_eq!(cfg.n_frames(n), (n as f64 / 250.0).ceil() as usize);
        }

        #[test]
        fn windowed_frame_parseval(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cfg = SpecConfig::toy();
            // frame 4 lies fully inside the clip
            let samples: Vec<f32> = (0..2048).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ext = MelExtractor::new(cfg.clone()).unwrap();
            let power = ext.stft_power(&clip(samples.clone())).unwrap();
            let t = 4usize;
            let start = t * cfg.hop_length - cfg.n_fft / 2;
            let window = padded_hann(&cfg);
            let time_energy: f64 = (0..cfg.n_fft)
                .map(|i| (samples[start + i] as f64 * window[i]).powi(2))
                .sum();
            // two-sided accounting: interior bins appear twice in the full spectrum
            let n = cfg.n_fft;
            let freq_energy: f64 = (0..cfg.n_bins())
                .map(|k| {
                    let mult = if k == 0 || k == n / 2 { 1.0 } else { 2.0 };
                    mult * power[[k, t]]
                })
                .sum::<f64>()
                / n as f64;
            prop_assert!(((time_energy - freq_energy) / time_energy).abs() < 1e-6);
        }
    }
}
