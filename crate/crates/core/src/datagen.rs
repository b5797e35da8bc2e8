//! Procedural stand-in for a generator-attribution corpus.
//!
//! Each "generator family" is a parametric voice-like source: a harmonic stack
//! with spectral tilt and vibrato, a formant filter bank, amplitude modulation
//! and a noise-excitation mix. Families 0-4 are the known generators; higher
//! ids are unknown generators, split into a training pool and a disjoint
//! evaluation pool. Weak (noise, companding, reverberation) and strong (pitch
//! shift, time stretch, band filtering) perturbations build the two
//! evaluation sets.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{resample, AudioClip};
use crate::seed::derive_seed;
use crate::{NUM_CLASSES, UNKNOWN_CLASS};

pub const SAMPLE_RATE: u32 = 16000;
/// Peak level of freshly generated clips.
const OUTPUT_PEAK: f32 = 0.9;
/// Unknown families used for training (class 5 of the training set).
pub const TRAIN_UNKNOWN_FAMILIES: [u32; 6] = [5, 6, 7, 8, 9, 10];
/// Unknown families reserved for evaluation; never seen in training.
pub const EVAL_UNKNOWN_FAMILIES: [u32; 6] = [11, 12, 13, 14, 15, 16];
/// Shared f0 range of known families 1-3 and the first unknown families.
const SHARED_F0: (f64, f64) = (100.0, 140.0);

#[derive(Error, Debug, PartialEq)]
pub enum DatagenError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("empty clip")]
    EmptyClip,
}

/// Parameters of one generator family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub family: u32,
    /// Harmonic partials in the source; 0 means pure noise excitation.
    pub harmonics: usize,
    pub tilt_db_per_octave: f64,
    pub vibrato_rate_hz: f64,
    pub vibrato_depth_cents: f64,
    pub formants_hz: Vec<f64>,
    /// 0 disables amplitude modulation.
    pub am_rate_hz: f64,
    pub noise_mix: f64,
    /// Speaker f0 distribution, uniform over this range.
    pub f0_range_hz: (f64, f64),
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::InvalidSpec(format!("family {}: {m}", self.family)));
        if !(0.0..=1.0).contains(&self.noise_mix) {
            return bad("noise_mix outside [0, 1]");
        }
        if self.harmonics == 0 && self.noise_mix < 1.0 {
            return bad("no harmonics requires noise_mix = 1");
        }
        let (lo, hi) = self.f0_range_hz;
        if !(lo > 0.0 && lo <= hi && hi < SAMPLE_RATE as f64 / 2.0) {
            return bad("f0 range must satisfy 0 < lo <= hi < Nyquist");
        }
        if self.formants_hz.is_empty()
            || self
                .formants_hz
                .iter()
                .any(|&f| !(f > 0.0 && f < SAMPLE_RATE as f64 / 2.0))
        {
            return bad("formant centres must lie in (0, Nyquist)");
        }
        if self.vibrato_rate_hz < 0.0 || self.vibrato_depth_cents < 0.0 || self.am_rate_hz < 0.0 {
            return bad("rates and depths must be non-negative");
        }
        Ok(())
    }

    pub fn is_known(&self) -> bool {
        (self.family as usize) < UNKNOWN_CLASS
    }

    /// Attributes in which two families differ, out of
    /// {harmonics, vibrato rate, formants, AM rate, noise mix}.
    pub fn distinct_attributes(&self, other: &Self) -> usize {
        let formant_diff = {
            let n = self.formants_hz.len().min(other.formants_hz.len());
            let rel: f64 = (0..n)
                .map(|i| (self.formants_hz[i] - other.formants_hz[i]).abs() / other.formants_hz[i])
                .sum::<f64>()
                / n as f64;
            rel >= 0.1 || self.formants_hz.len() != other.formants_hz.len()
        };
        [
            self.harmonics.abs_diff(other.harmonics) >= 5,
            (self.vibrato_rate_hz - other.vibrato_rate_hz).abs() >= 1.5,
            formant_diff,
            (self.am_rate_hz - other.am_rate_hz).abs() >= 2.0,
            (self.noise_mix - other.noise_mix).abs() >= 0.2,
        ]
        .iter()
        .filter(|&&d| d)
        .count()
    }
}

/// The five known generator families.
pub fn known_families() -> Vec<GeneratorSpec> {
    let spec = |family, harmonics, tilt, vib: (f64, f64), formants: &[f64], am, noise, f0| GeneratorSpec {
        family,
        harmonics,
        tilt_db_per_octave: tilt,
        vibrato_rate_hz: vib.0,
        vibrato_depth_cents: vib.1,
        formants_hz: formants.to_vec(),
        am_rate_hz: am,
        noise_mix: noise,
        f0_range_hz: f0,
    };
    vec![
        // distinct speaker
        spec(0, 30, -6.0, (5.0, 30.0), &[500.0, 1500.0, 2500.0], 3.0, 0.05, (190.0, 240.0)),
        spec(1, 12, -3.0, (6.5, 50.0), &[700.0, 1200.0, 2600.0], 8.0, 0.1, SHARED_F0),
        spec(2, 40, -9.0, (0.0, 0.0), &[300.0, 2200.0, 3000.0], 4.0, 0.3, SHARED_F0),
        spec(3, 25, -4.0, (3.0, 80.0), &[600.0, 1000.0, 2400.0, 3500.0], 12.0, 0.0, SHARED_F0),
        // multi-speaker
        spec(4, 20, -6.0, (5.0, 20.0), &[450.0, 1800.0, 2800.0], 6.0, 0.5, (90.0, 260.0)),
    ]
}

/// Deterministic parameters of unknown family `family` (id >= 5), drawn from
/// a broad range and rejected until it differs from every known family in at
/// least two attributes.
pub fn unknown_family(family: u32) -> GeneratorSpec {
    assert!(family as usize >= UNKNOWN_CLASS, "family {family} is a known generator");
    let known = known_families();
    if family == TRAIN_UNKNOWN_FAMILIES[0] {
        // noise-excited formant source without a harmonic stack: the
        // natural-speech stand-in of the unknown pool
        return GeneratorSpec {
            family,
            harmonics: 0,
            tilt_db_per_octave: 0.0,
            vibrato_rate_hz: 0.0,
            vibrato_depth_cents: 0.0,
            formants_hz: vec![650.0, 1700.0, 2900.0],
            am_rate_hz: 4.5,
            noise_mix: 1.0,
            f0_range_hz: SHARED_F0,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x5EED_FA11, family as u64));
    loop {
        let f0_range_hz = match rng.random_range(0..3) {
            0 => SHARED_F0,
            1 => {
                let lo = rng.random_range(80.0..200.0);
                (lo, lo + rng.random_range(20.0..60.0))
            }
            _ => (rng.random_range(80.0..110.0), rng.random_range(200.0..280.0)),
        };
        let mut formants = vec![
            rng.random_range(250.0..900.0),
            rng.random_range(900.0..2000.0),
            rng.random_range(2000.0..3800.0),
        ];
        if rng.random_bool(0.3) {
            formants.push(rng.random_range(3800.0..5000.0));
        }
        let candidate = GeneratorSpec {
            family,
            harmonics: rng.random_range(6..=50),
            tilt_db_per_octave: rng.random_range(-12.0..-2.0),
            vibrato_rate_hz: if rng.random_bool(0.25) { 0.0 } else { rng.random_range(1.0..9.0) },
            vibrato_depth_cents: rng.random_range(10.0..100.0),
            formants_hz: formants,
            am_rate_hz: if rng.random_bool(0.2) { 0.0 } else { rng.random_range(1.0..16.0) },
            noise_mix: rng.random_range(0.0..0.9),
            f0_range_hz,
        };
        if known.iter().all(|k| candidate.distinct_attributes(k) >= 2) {
            return candidate;
        }
    }
}

pub fn family_spec(family: u32) -> GeneratorSpec {
    if (family as usize) < UNKNOWN_CLASS {
        known_families().swap_remove(family as usize)
    } else {
        unknown_family(family)
    }
}

/// Bandpass biquad (RBJ, 0 dB peak gain) in transposed direct form II.
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    z: [f64; 2],
}

impl Biquad {
    fn bandpass(centre: f64, q: f64, rate: f64) -> Self {
        let w0 = 2.0 * PI * centre / rate;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Self {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
            z: [0.0; 2],
        }
    }

    fn lowpass(cutoff: f64, q: f64, rate: f64) -> Self {
        let w0 = 2.0 * PI * cutoff / rate;
        let alpha = w0.sin() / (2.0 * q);
        let cos = w0.cos();
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 - cos) / 2.0 / a0, (1.0 - cos) / a0, (1.0 - cos) / 2.0 / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
            z: [0.0; 2],
        }
    }

    fn highpass(cutoff: f64, q: f64, rate: f64) -> Self {
        let w0 = 2.0 * PI * cutoff / rate;
        let alpha = w0.sin() / (2.0 * q);
        let cos = w0.cos();
        let a0 = 1.0 + alpha;
        Self {
            b: [(1.0 + cos) / 2.0 / a0, -(1.0 + cos) / a0, (1.0 + cos) / 2.0 / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
            z: [0.0; 2],
        }
    }

    #[inline]
    fn process(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn to_clip(samples: Vec<f64>, peak: f32) -> AudioClip {
    let max = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if max > 0.0 { peak as f64 / max } else { 0.0 };
    AudioClip {
        samples: samples.iter().map(|&v| (v * gain) as f32).collect(),
        sample_rate: SAMPLE_RATE,
    }
}

/// Synthesises one 16 kHz clip of `duration_s` seconds from a family.
/// Per-clip variation covers the speaker f0, small formant and modulation
/// jitter, and random modulation phases.
pub fn gen_sample<R: Rng + ?Sized>(
    spec: &GeneratorSpec,
    duration_s: f64,
    rng: &mut R,
) -> Result<AudioClip, DatagenError> {
    spec.validate()?;
    if !(duration_s > 0.0) {
        return Err(DatagenError::InvalidSpec(format!("duration {duration_s} must be positive")));
    }
    let rate = SAMPLE_RATE as f64;
    let n = (duration_s * rate).round() as usize;
    let f0 = rng.random_range(spec.f0_range_hz.0..=spec.f0_range_hz.1);
    let vib_rate = spec.vibrato_rate_hz * rng.random_range(0.9..1.1);
    let vib_phase = rng.random_range(0.0..2.0 * PI);
    let am_rate = spec.am_rate_hz * rng.random_range(0.9..1.1);
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let formants: Vec<f64> = spec
        .formants_hz
        .iter()
        .map(|f| f * rng.random_range(0.96..1.04))
        .collect();

    // harmonic stack, partials kept below 7.8 kHz at the vibrato peak
    let mut harmonic = vec![0.0; n];
    if spec.harmonics > 0 {
        let peak_f0 = f0 * 2f64.powf(spec.vibrato_depth_cents / 1200.0);
        let count = spec.harmonics.min((7800.0 / peak_f0).floor() as usize).max(1);
        let amps: Vec<f64> = (1..=count)
            .map(|k| 10f64.powf(spec.tilt_db_per_octave * (k as f64).log2() / 20.0))
            .collect();
        let mut phase = rng.random_range(0.0..2.0 * PI);
        for (i, out) in harmonic.iter_mut().enumerate() {
            let t = i as f64 / rate;
            let cents = spec.vibrato_depth_cents * (2.0 * PI * vib_rate * t + vib_phase).sin();
            phase += 2.0 * PI * f0 * 2f64.powf(cents / 1200.0) / rate;
            // sin(k * phase) by the Chebyshev recurrence
            let (s1, c1) = phase.sin_cos();
            let (mut prev, mut cur) = (0.0, s1);
            let mut acc = 0.0;
            for &a in &amps {
                acc += a * cur;
                let next = 2.0 * c1 * cur - prev;
                prev = cur;
                cur = next;
            }
            *out = acc;
        }
        let r = rms(&harmonic);
        if r > 0.0 {
            harmonic.iter_mut().for_each(|v| *v /= r);
        }
    }
    let mut noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let r = rms(&noise);
    if r > 0.0 {
        noise.iter_mut().for_each(|v| *v /= r);
    }
    let excitation: Vec<f64> = harmonic
        .iter()
        .zip(&noise)
        .map(|(h, w)| (1.0 - spec.noise_mix) * h + spec.noise_mix * w)
        .collect();

    // parallel formant resonators with decreasing gains
    let mut voiced = vec![0.0; n];
    for (i, &fc) in formants.iter().enumerate() {
        let bandwidth = 80.0 + 0.05 * fc;
        let mut filter = Biquad::bandpass(fc, fc / bandwidth, rate);
        let gain = 0.7f64.powi(i as i32);
        for (out, &x) in voiced.iter_mut().zip(&excitation) {
            *out += gain * filter.process(x);
        }
    }
    if am_rate > 0.0 {
        for (i, v) in voiced.iter_mut().enumerate() {
            let t = i as f64 / rate;
            *v *= 1.0 + 0.6 * (2.0 * PI * am_rate * t + am_phase).sin();
        }
    }
    // 10 ms fades
    let fade = ((0.01 * rate) as usize).min(n / 2);
    for i in 0..fade {
        let g = i as f64 / fade as f64;
        voiced[i] *= g;
        voiced[n - 1 - i] *= g;
    }
    Ok(to_clip(voiced, OUTPUT_PEAK))
}

fn renormalize(mut clip: AudioClip) -> AudioClip {
    let peak = clip.peak();
    if peak > 1.0 {
        clip.samples.iter_mut().for_each(|s| *s /= peak);
    }
    clip
}

/// Adds white Gaussian noise at `snr_db` relative to the clip power.
pub fn add_noise<R: Rng + ?Sized>(clip: &AudioClip, snr_db: f64, rng: &mut R) -> AudioClip {
    let power = clip.samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / clip.len().max(1) as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let samples = clip
        .samples
        .iter()
        .map(|&s| (s as f64 + sigma * { let z: f64 = StandardNormal.sample(rng); z }) as f32)
        .collect();
    AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    }
}

/// mu-law (mu = 255) companding through 8-bit codes and back.
pub fn mulaw_round_trip(clip: &AudioClip) -> AudioClip {
    const MU: f64 = 255.0;
    let samples = clip
        .samples
        .iter()
        .map(|&s| {
            let x = (s as f64).clamp(-1.0, 1.0);
            let y = x.signum() * (1.0 + MU * x.abs()).ln() / (1.0 + MU).ln();
            let code = ((y + 1.0) / 2.0 * 255.0).round();
            let yq = code / 255.0 * 2.0 - 1.0;
            (yq.signum() * ((1.0 + MU).powf(yq.abs()) - 1.0) / MU) as f32
        })
        .collect();
    AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    }
}

/// Convolves with an exponentially decaying noise impulse response of the
/// given RT60; the tail beyond the input length is dropped.
pub fn reverberate<R: Rng + ?Sized>(clip: &AudioClip, rt60_s: f64, rng: &mut R) -> AudioClip {
    let rate = clip.sample_rate as f64;
    let ir_len = ((rt60_s * rate) as usize).max(1);
    let decay = 6.908 / (rt60_s * rate); // ln(1000): -60 dB at rt60
    let mut ir: Vec<f64> = (0..ir_len)
        .map(|i| 0.3 * { let z: f64 = StandardNormal.sample(rng); z } * (-decay * i as f64).exp())
        .collect();
    ir[0] = 1.0;
    let n = clip.len();
    let size = (n + ir_len - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex<f64>> = clip
        .samples
        .iter()
        .map(|&s| Complex::new(s as f64, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut b: Vec<Complex<f64>> = ir
        .iter()
        .map(|&s| Complex::new(s, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(x, y)| *x *= y);
    inv.process(&mut a);
    let wet: Vec<f64> = a[..n].iter().map(|c| c.re / size as f64).collect();
    // keep the input level
    let dry_rms = rms(&clip.samples.iter().map(|&s| s as f64).collect::<Vec<_>>());
    let wet_rms = rms(&wet);
    let gain = if wet_rms > 0.0 { dry_rms / wet_rms } else { 1.0 };
    AudioClip {
        samples: wet.iter().map(|&v| (v * gain) as f32).collect(),
        sample_rate: clip.sample_rate,
    }
}

/// Waveform-similarity overlap-add (WSOLA) time stretch: output length
/// `round(len * factor)`, pitch kept. Each analysis frame is moved within a
/// small tolerance to best continue the previously copied frame, which keeps
/// partials phase-coherent across frame boundaries.
pub fn time_stretch(clip: &AudioClip, factor: f64) -> AudioClip {
    const FRAME: usize = 512;
    const SYN_HOP: usize = FRAME / 2;
    const TOLERANCE: isize = 160;
    let n = clip.len();
    let out_len = (n as f64 * factor).round() as usize;
    let window: Vec<f64> = (0..FRAME)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / FRAME as f64).cos())
        .collect();
    let at = |i: isize| -> f64 {
        if (0..n as isize).contains(&i) {
            clip.samples[i as usize] as f64
        } else {
            0.0
        }
    };
    let mut out = vec![0.0f64; out_len + FRAME];
    let mut norm = vec![0.0f64; out_len + FRAME];
    let ana_hop = SYN_HOP as f64 / factor;
    let half = (FRAME / 2) as isize;
    let mut prev: Option<isize> = None;
    let mut m = 0usize;
    while m * SYN_HOP < out_len + SYN_HOP {
        let nominal = (m as f64 * ana_hop).round() as isize - half;
        let start = match prev {
            None => nominal,
            Some(p) => {
                // natural continuation of the previous frame
                let target = p + SYN_HOP as isize;
                let mut best = (f64::NEG_INFINITY, nominal);
                for delta in -TOLERANCE..=TOLERANCE {
                    let cand = nominal + delta;
                    let score: f64 = (0..SYN_HOP as isize)
                        .map(|i| at(cand + i) * at(target + i))
                        .sum();
                    if score > best.0 {
                        best = (score, cand);
                    }
                }
                best.1
            }
        };
        let syn_start = (m * SYN_HOP) as isize - half;
        for (i, w) in window.iter().enumerate() {
            let dst = syn_start + i as isize;
            if dst < 0 || dst as usize >= out.len() {
                continue;
            }
            out[dst as usize] += at(start + i as isize) * w;
            norm[dst as usize] += w;
        }
        prev = Some(start);
        m += 1;
    }
    let samples = out[..out_len]
        .iter()
        .zip(&norm)
        .map(|(&v, &w)| if w > 1e-3 { (v / w) as f32 } else { 0.0 })
        .collect();
    AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    }
}

/// Shifts pitch by `semitones` keeping the length: resample so playback at
/// the original rate raises the pitch, then stretch back.
pub fn pitch_shift(clip: &AudioClip, semitones: f64) -> AudioClip {
    let ratio = 2f64.powf(semitones / 12.0);
    let rate = clip.sample_rate;
    let intermediate = ((rate as f64 / ratio).round() as u32).max(1);
    let squeezed = resample(clip, intermediate).expect("positive rate");
    let squeezed = AudioClip {
        samples: squeezed.samples,
        sample_rate: rate,
    };
    let mut out = time_stretch(&squeezed, clip.len() as f64 / squeezed.len().max(1) as f64);
    out.samples.resize(clip.len(), 0.0);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandFilter {
    LowPass,
    HighPass,
}

/// 4th-order Butterworth as two cascaded biquads.
pub fn butterworth4(clip: &AudioClip, kind: BandFilter, cutoff_hz: f64) -> AudioClip {
    let rate = clip.sample_rate as f64;
    let mut stages: Vec<Biquad> = [0.541_196_1, 1.306_563]
        .iter()
        .map(|&q| match kind {
            BandFilter::LowPass => Biquad::lowpass(cutoff_hz, q, rate),
            BandFilter::HighPass => Biquad::highpass(cutoff_hz, q, rate),
        })
        .collect();
    let samples = clip
        .samples
        .iter()
        .map(|&s| {
            let mut v = s as f64;
            for st in stages.iter_mut() {
                v = st.process(v);
            }
            v as f32
        })
        .collect();
    AudioClip {
        samples,
        sample_rate: clip.sample_rate,
    }
}

/// Probabilities and ranges of the weak perturbation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeakPerturbConfig {
    pub noise_prob: f64,
    pub snr_db: [f64; 2],
    pub compress_prob: f64,
    pub reverb_prob: f64,
    pub rt60_s: [f64; 2],
}

impl Default for WeakPerturbConfig {
    fn default() -> Self {
        Self {
            noise_prob: 0.5,
            snr_db: [15.0, 30.0],
            compress_prob: 0.5,
            reverb_prob: 0.5,
            rt60_s: [0.1, 0.4],
        }
    }
}

/// Probabilities and ranges of the strong perturbation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrongPerturbConfig {
    pub pitch_prob: f64,
    pub max_semitones: f64,
    pub stretch_prob: f64,
    pub stretch: [f64; 2],
    pub filter_prob: f64,
    pub lowpass_hz: [f64; 2],
    pub highpass_hz: [f64; 2],
    /// Apply one randomly chosen perturbation when none fired.
    pub force_one: bool,
}

impl Default for StrongPerturbConfig {
    fn default() -> Self {
        Self {
            pitch_prob: 0.5,
            max_semitones: 2.0,
            stretch_prob: 0.5,
            stretch: [0.85, 1.15],
            filter_prob: 0.5,
            lowpass_hz: [3000.0, 7000.0],
            highpass_hz: [100.0, 400.0],
            force_one: true,
        }
    }
}

fn fires<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    p > 0.0 && rng.random_bool(p.min(1.0))
}

/// Weak suite; returns the perturbed clip and the tags of what was applied.
pub fn perturb_weak<R: Rng + ?Sized>(
    clip: &AudioClip,
    cfg: &WeakPerturbConfig,
    rng: &mut R,
) -> Result<(AudioClip, Vec<String>), DatagenError> {
    if clip.is_empty() {
        return Err(DatagenError::EmptyClip);
    }
    let mut out = clip.clone();
    let mut tags = Vec::new();
    if fires(rng, cfg.noise_prob) {
        let snr = rng.random_range(cfg.snr_db[0]..=cfg.snr_db[1]);
        out = add_noise(&out, snr, rng);
        tags.push(format!("noise{snr:.1}dB"));
    }
    if fires(rng, cfg.compress_prob) {
        out = mulaw_round_trip(&out);
        tags.push("mulaw".into());
    }
    if fires(rng, cfg.reverb_prob) {
        let rt60 = rng.random_range(cfg.rt60_s[0]..=cfg.rt60_s[1]);
        out = reverberate(&out, rt60, rng);
        tags.push(format!("reverb{rt60:.2}s"));
    }
    Ok((renormalize(out), tags))
}

/// Strong suite; returns the perturbed clip and the tags of what was applied.
pub fn perturb_strong<R: Rng + ?Sized>(
    clip: &AudioClip,
    cfg: &StrongPerturbConfig,
    rng: &mut R,
) -> Result<(AudioClip, Vec<String>), DatagenError> {
    if clip.is_empty() {
        return Err(DatagenError::EmptyClip);
    }
    let mut chosen = [
        fires(rng, cfg.pitch_prob),
        fires(rng, cfg.stretch_prob),
        fires(rng, cfg.filter_prob),
    ];
    if cfg.force_one && !chosen.iter().any(|&c| c) {
        chosen[rng.random_range(0..3)] = true;
    }
    let mut out = clip.clone();
    let mut tags = Vec::new();
    if chosen[0] {
        let mut semis = 0.0;
        while semis == 0.0 {
            semis = rng.random_range(-cfg.max_semitones..=cfg.max_semitones);
        }
        out = pitch_shift(&out, semis);
        tags.push(format!("pitch{semis:+.2}st"));
    }
    if chosen[1] {
        let factor = rng.random_range(cfg.stretch[0]..=cfg.stretch[1]);
        out = time_stretch(&out, factor);
        tags.push(format!("stretch{factor:.3}"));
    }
    if chosen[2] {
        if rng.random_bool(0.5) {
            let fc = rng.random_range(cfg.lowpass_hz[0]..=cfg.lowpass_hz[1]);
            out = butterworth4(&out, BandFilter::LowPass, fc);
            tags.push(format!("lowpass{fc:.0}Hz"));
        } else {
            let fc = rng.random_range(cfg.highpass_hz[0]..=cfg.highpass_hz[1]);
            out = butterworth4(&out, BandFilter::HighPass, fc);
            tags.push(format!("highpass{fc:.0}Hz"));
        }
    }
    Ok((renormalize(out), tags))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    /// Unperturbed half of the first evaluation set.
    Eval1Clean,
    /// Weakly perturbed half of the first evaluation set.
    Eval1Weak,
    /// Strongly perturbed evaluation set.
    Eval2,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval1Clean => "eval1_clean",
            Split::Eval1Weak => "eval1_weak",
            Split::Eval2 => "eval2",
        }
    }

    /// Corpus subdirectory holding the split's files.
    pub fn dir(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval1Clean | Split::Eval1Weak => "eval1",
            Split::Eval2 => "eval2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Split::Train, Split::Eval1Clean, Split::Eval1Weak, Split::Eval2]
            .into_iter()
            .find(|v| v.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_per_class: usize,
    pub n_eval_per_class: usize,
    pub duration_s: f64,
    pub seed: u64,
    /// SNR of the white recording-noise floor mixed into every source clip;
    /// `None` leaves sources noise-free.
    pub background_snr_db: Option<f64>,
    pub weak: WeakPerturbConfig,
    pub strong: StrongPerturbConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            n_eval_per_class: 50,
            duration_s: 1.0,
            seed: 0,
            background_snr_db: Some(30.0),
            weak: WeakPerturbConfig::default(),
            strong: StrongPerturbConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.n_per_class < 10 {
            return Err(DatagenError::InvalidConfig(format!(
                "n_per_class must be >= 10, got {}",
                self.n_per_class
            )));
        }
        if self.n_eval_per_class < 2 {
            return Err(DatagenError::InvalidConfig("n_eval_per_class must be >= 2".into()));
        }
        if !(self.duration_s > 0.0) {
            return Err(DatagenError::InvalidConfig("duration_s must be positive".into()));
        }
        Ok(())
    }
}

/// One generated recording with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub clip: AudioClip,
    pub class: usize,
    pub family: u32,
    pub split: Split,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<CorpusItem>,
    pub eval1: Vec<CorpusItem>,
    pub eval2: Vec<CorpusItem>,
}

impl Corpus {
    pub fn all(&self) -> impl Iterator<Item = &CorpusItem> {
        self.train.iter().chain(&self.eval1).chain(&self.eval2)
    }
}

struct Plan {
    split: Split,
    class: usize,
    family: u32,
    index: usize,
}

fn family_for(class: usize, index: usize, pool: &[u32]) -> u32 {
    if class == UNKNOWN_CLASS {
        pool[index % pool.len()]
    } else {
        class as u32
    }
}

/// Stream seed of the clean source clip for `(split, class, index)`.
fn source_seed(seed: u64, split: Split, class: usize, index: usize) -> u64 {
    derive_seed(
        derive_seed(derive_seed(seed, split as u64), class as u64),
        index as u64,
    )
}

/// Regenerates the unperturbed source of a corpus item.
pub fn source_clip(cfg: &CorpusConfig, item: &CorpusItem, index: usize) -> Result<AudioClip, DatagenError> {
    let seed = source_seed(cfg.seed, item.split, item.class, index);
    make_source(cfg, &family_spec(item.family), seed)
}

fn make_source(cfg: &CorpusConfig, spec: &GeneratorSpec, seed: u64) -> Result<AudioClip, DatagenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = gen_sample(spec, cfg.duration_s, &mut rng)?;
    Ok(match cfg.background_snr_db {
        Some(snr) => renormalize(add_noise(&clip, snr, &mut rng)),
        None => clip,
    })
}

/// Builds the training set (known classes plus the training unknown pool as
/// class 5) and both evaluation sets (known classes plus the disjoint
/// evaluation unknown pool). The first evaluation set is half clean, half
/// weakly perturbed; the second is entirely strongly perturbed.
pub fn build_corpus(cfg: &CorpusConfig) -> Result<Corpus, DatagenError> {
    cfg.validate()?;
    let mut plans = Vec::new();
    for class in 0..NUM_CLASSES {
        for index in 0..cfg.n_per_class {
            plans.push(Plan {
                split: Split::Train,
                class,
                family: family_for(class, index, &TRAIN_UNKNOWN_FAMILIES),
                index,
            });
        }
    }
    for split in [Split::Eval1Clean, Split::Eval1Weak, Split::Eval2] {
        let count = match split {
            Split::Eval1Clean => cfg.n_eval_per_class.div_ceil(2),
            Split::Eval1Weak => cfg.n_eval_per_class / 2,
            _ => cfg.n_eval_per_class,
        };
        for class in 0..NUM_CLASSES {
            for index in 0..count {
                plans.push(Plan {
                    split,
                    class,
                    family: family_for(class, index, &EVAL_UNKNOWN_FAMILIES),
                    index,
                });
            }
        }
    }
    let families: Vec<GeneratorSpec> = (0..=*EVAL_UNKNOWN_FAMILIES.last().expect("non-empty"))
        .map(family_spec)
        .collect();

    let items = plans
        .par_iter()
        .map(|plan| {
            let seed = source_seed(cfg.seed, plan.split, plan.class, plan.index);
            let clean = make_source(cfg, &families[plan.family as usize], seed)?;
            let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xBEEF));
            let (clip, tags) = match plan.split {
                Split::Train | Split::Eval1Clean => (clean, Vec::new()),
                Split::Eval1Weak => perturb_weak(&clean, &cfg.weak, &mut prng)?,
                Split::Eval2 => perturb_strong(&clean, &cfg.strong, &mut prng)?,
            };
            Ok(CorpusItem {
                id: format!(
                    "{}_c{}_f{:02}_{:04}.wav",
                    plan.split.as_str(),
                    plan.class,
                    plan.family,
                    plan.index
                ),
                clip,
                class: plan.class,
                family: plan.family,
                split: plan.split,
                tags,
            })
        })
        .collect::<Result<Vec<_>, DatagenError>>()?;

    let mut corpus = Corpus {
        train: Vec::new(),
        eval1: Vec::new(),
        eval2: Vec::new(),
    };
    for item in items {
        match item.split {
            Split::Train => corpus.train.push(item),
            Split::Eval1Clean | Split::Eval1Weak => corpus.eval1.push(item),
            Split::Eval2 => corpus.eval2.push(item),
        }
    }
    Ok(corpus)
}

impl CorpusItem {
    /// Path of the item's WAV relative to the corpus root.
    pub fn relative_path(&self) -> String {
        format!("{}/{}", self.split.dir(), self.id)
    }
}

/// Manifest CSV: `filename,class,family,split,tags` with `;`-joined tags and
/// filenames relative to the corpus root.
pub fn manifest_csv(corpus: &Corpus) -> String {
    let mut out = String::from("filename,class,family,split,tags\n");
    for item in corpus.all() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            item.relative_path(),
            item.class,
            item.family,
            item.split.as_str(),
            item.tags.join(";")
        ));
    }
    out
}

/// One parsed manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub filename: String,
    pub class: usize,
    pub family: u32,
    pub split: Split,
    pub tags: Vec<String>,
}

/// Parses [`manifest_csv`] output; errors name the offending line.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>, DatagenError> {
    let bad = |n: usize, why: &str| DatagenError::InvalidConfig(format!("manifest line {}: {why}", n + 1));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(bad(n, "expected 5 fields"));
            }
            let class: usize = fields[1].parse().map_err(|_| bad(n, "bad class"))?;
            if class >= NUM_CLASSES {
                return Err(bad(n, "class out of range"));
            }
            Ok(ManifestRow {
                filename: fields[0].to_string(),
                class,
                family: fields[2].parse().map_err(|_| bad(n, "bad family"))?,
                split: Split::parse(fields[3]).ok_or_else(|| bad(n, "unknown split"))?,
                tags: fields[4].split(';').filter(|t| !t.is_empty()).map(String::from).collect(),
            })
        })
        .collect()
}
