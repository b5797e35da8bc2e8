//! Training-time augmentations on log-mel spectrograms and their labels.
//!
//! Mixing operations (MixUp, CutMix) combine two examples and their labels;
//! the remaining operations perturb a single spectrogram. All randomness is
//! drawn from the caller's stream.

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::MelSpec;
use crate::NUM_CLASSES;

/// Soft or one-hot class distribution.
pub type Label = [f64; NUM_CLASSES];

#[derive(Error, Debug, PartialEq)]
pub enum AugmentError {
    #[error("spectrogram shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("noise sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("JPEG quality must be in 1..=100, got {0}")]
    QualityOutOfRange(u32),
    #[error("mask width {width} must be smaller than dimension {dim}")]
    MaskTooWide { width: usize, dim: usize },
    #[error("rectangle exceeds spectrogram bounds")]
    RectOutOfBounds,
}

pub fn one_hot(class: usize) -> Label {
    let mut label = [0.0; NUM_CLASSES];
    label[class] = 1.0;
    label
}

pub fn is_on_simplex(label: &[f64], tol: f64) -> bool {
    label.iter().all(|&p| p >= 0.0 && p.is_finite()) && (label.iter().sum::<f64>() - 1.0).abs() <= tol
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// A spectrogram with its class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub spec: MelSpec,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub mixup_alpha: f64,
    pub mixup_beta: f64,
    pub noise_sigma_max: f64,
    pub mask_max_time: usize,
    pub mask_max_freq: usize,
    pub jpeg_quality_range: [u32; 2],
    pub mixup_prob: f64,
    pub cutmix_prob: f64,
    pub noise_prob: f64,
    pub mask_prob: f64,
    pub jpeg_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mixup_alpha: 2.5,
            mixup_beta: 2.5,
            noise_sigma_max: 0.5,
            mask_max_time: 8,
            mask_max_freq: 4,
            jpeg_quality_range: [70, 95],
            mixup_prob: 0.5,
            cutmix_prob: 0.5,
            noise_prob: 0.5,
            mask_prob: 0.5,
            jpeg_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off.
    pub fn disabled() -> Self {
        Self {
            mixup_prob: 0.0,
            cutmix_prob: 0.0,
            noise_prob: 0.0,
            mask_prob: 0.0,
            jpeg_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::InvalidConfig(m));
        if !(self.mixup_alpha > 0.0 && self.mixup_beta > 0.0) {
            return bad("Beta shape parameters must be positive".into());
        }
        if !(self.noise_sigma_max >= 0.0) {
            return bad("noise_sigma_max must be non-negative".into());
        }
        let [lo, hi] = self.jpeg_quality_range;
        if !(1 <= lo && lo <= hi && hi <= 100) {
            return bad(format!("jpeg_quality_range {lo}..{hi} outside 1..=100"));
        }
        for (name, p) in [
            ("mixup_prob", self.mixup_prob),
            ("cutmix_prob", self.cutmix_prob),
            ("noise_prob", self.noise_prob),
            ("mask_prob", self.mask_prob),
            ("jpeg_prob", self.jpeg_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    fn beta(&self) -> Beta<f64> {
        Beta::new(self.mixup_alpha, self.mixup_beta).expect("validated Beta shapes")
    }
}

fn check_shapes(a: &MelSpec, b: &MelSpec) -> Result<(), AugmentError> {
    if a.shape() != b.shape() {
        return Err(AugmentError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

fn mix_labels(a: &Label, b: &Label, weight_a: f64) -> Label {
    let mut out = [0.0; NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        out[k] = weight_a * a[k] + (1.0 - weight_a) * b[k];
    }
    out
}

/// Convex combination `lambda * a + (1 - lambda) * b` of spectrograms and labels.
pub fn mixup(
    a: &LabeledExample,
    b: &LabeledExample,
    lambda: f64,
) -> Result<LabeledExample, AugmentError> {
    check_shapes(&a.spec, &b.spec)?;
    let lam = lambda as f32;
    let values = ndarray::Zip::from(&a.spec.values)
        .and(&b.spec.values)
        .map_collect(|&x, &y| if lambda == 1.0 { x } else { lam * x + (1.0 - lam) * y });
    Ok(LabeledExample {
        spec: MelSpec {
            values,
            config: a.spec.config.clone(),
        },
        label: mix_labels(&a.label, &b.label, lambda),
    })
}

/// Axis-aligned cell rectangle on a spectrogram grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub rows: usize,
    pub col: usize,
    pub cols: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.rows * self.cols
    }
}

/// Pastes `rect` of `b` into `a`; the label weight of `b` is the pasted area fraction.
pub fn cutmix_with_rect(
    a: &LabeledExample,
    b: &LabeledExample,
    rect: Rect,
) -> Result<LabeledExample, AugmentError> {
    check_shapes(&a.spec, &b.spec)?;
    let (n_rows, n_cols) = a.spec.shape();
    if rect.row + rect.rows > n_rows || rect.col + rect.cols > n_cols {
        return Err(AugmentError::RectOutOfBounds);
    }
    let mut values = a.spec.values.clone();
    let region = s![rect.row..rect.row + rect.rows, rect.col..rect.col + rect.cols];
    values.slice_mut(region).assign(&b.spec.values.slice(region));
    let rho = rect.area() as f64 / (n_rows * n_cols) as f64;
    Ok(LabeledExample {
        spec: MelSpec {
            values,
            config: a.spec.config.clone(),
        },
        label: mix_labels(&a.label, &b.label, 1.0 - rho),
    })
}

/// Draws a box whose area fraction targets `rho ~ Beta(alpha, beta)`, with
/// sides `sqrt(rho)` of each dimension and a uniform position.
pub fn sample_cutmix_rect<R: Rng + ?Sized>(
    shape: (usize, usize),
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Rect {
    let rho: f64 = cfg.beta().sample(rng);
    let side = rho.sqrt();
    let rows = ((side * shape.0 as f64).round() as usize).min(shape.0);
    let cols = ((side * shape.1 as f64).round() as usize).min(shape.1);
    let row = rng.random_range(0..=shape.0 - rows);
    let col = rng.random_range(0..=shape.1 - cols);
    Rect {
        row,
        rows,
        col,
        cols,
    }
}

pub fn cutmix<R: Rng + ?Sized>(
    a: &LabeledExample,
    b: &LabeledExample,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<LabeledExample, AugmentError> {
    check_shapes(&a.spec, &b.spec)?;
    let rect = sample_cutmix_rect(a.spec.shape(), cfg, rng);
    cutmix_with_rect(a, b, rect)
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every cell.
pub fn gaussian_noise<R: Rng + ?Sized>(
    spec: &MelSpec,
    sigma: f64,
    rng: &mut R,
) -> Result<MelSpec, AugmentError> {
    if !(sigma >= 0.0) {
        return Err(AugmentError::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(spec.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let values = spec.values.mapv(|v| v + normal.sample(rng) as f32);
    Ok(MelSpec {
        values,
        config: spec.config.clone(),
    })
}

/// Fills one random time band and one random mel band with the spectrogram mean.
pub fn time_freq_mask<R: Rng + ?Sized>(
    spec: &MelSpec,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<MelSpec, AugmentError> {
    let (n_mels, n_frames) = spec.shape();
    if cfg.mask_max_time >= n_frames {
        return Err(AugmentError::MaskTooWide {
            width: cfg.mask_max_time,
            dim: n_frames,
        });
    }
    if cfg.mask_max_freq >= n_mels {
        return Err(AugmentError::MaskTooWide {
            width: cfg.mask_max_freq,
            dim: n_mels,
        });
    }
    let fill = spec.mean();
    let mut values = spec.values.clone();
    let t_width = rng.random_range(0..=cfg.mask_max_time);
    let t_start = rng.random_range(0..=n_frames - t_width);
    let f_width = rng.random_range(0..=cfg.mask_max_freq);
    let f_start = rng.random_range(0..=n_mels - f_width);
    values
        .slice_mut(s![.., t_start..t_start + t_width])
        .fill(fill);
    values
        .slice_mut(s![f_start..f_start + f_width, ..])
        .fill(fill);
    Ok(MelSpec {
        values,
        config: spec.config.clone(),
    })
}

const JPEG_LUMA: [[u16; 8]; 8] = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
];

/// Luminance quantization table scaled to `quality` (IJG convention).
pub fn quant_table(quality: u32) -> [[f64; 8]; 8] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [[0.0; 8]; 8];
    for (u, row) in JPEG_LUMA.iter().enumerate() {
        for (v, &base) in row.iter().enumerate() {
            out[u][v] = ((base as u32 * scale + 50) / 100).clamp(1, 255) as f64;
        }
    }
    out
}

/// Orthonormal 8-point DCT-II basis, `basis[u][x]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut basis = [[0.0; 8]; 8];
    for (u, row) in basis.iter_mut().enumerate() {
        let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, b) in row.iter_mut().enumerate() {
            *b = c * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    basis
}

fn dct2(block: &[[f64; 8]; 8], basis: &[[f64; 8]; 8], inverse: bool) -> [[f64; 8]; 8] {
    // separable: rows then columns
    let apply = |input: &[[f64; 8]; 8]| {
        let mut out = [[0.0; 8]; 8];
        for r in 0..8 {
            for k in 0..8 {
                out[r][k] = (0..8)
                    .map(|x| {
                        let w = if inverse { basis[x][k] } else { basis[k][x] };
                        w * input[r][x]
                    })
                    .sum();
            }
        }
        out
    };
    let transpose = |m: [[f64; 8]; 8]| {
        let mut t = [[0.0; 8]; 8];
        for i in 0..8 {
            for j in 0..8 {
                t[j][i] = m[i][j];
            }
        }
        t
    };
    transpose(apply(&transpose(apply(block))))
}

/// Simulated JPEG round trip: 8-bit mapping by the spectrogram's own range,
/// blockwise DCT quantization with the scaled luminance table, and back.
pub fn jpeg_degrade(spec: &MelSpec, quality: u32) -> Result<MelSpec, AugmentError> {
    if !(1..=100).contains(&quality) {
        return Err(AugmentError::QualityOutOfRange(quality));
    }
    let (lo, hi) = spec
        .values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = (hi - lo) as f64;
    if !(range > 0.0) {
        return Ok(spec.clone());
    }
    let (n_rows, n_cols) = spec.shape();
    let to_byte = |v: f32| ((v - lo) as f64 / range * 255.0).round().clamp(0.0, 255.0);
    let table = quant_table(quality);
    let basis = dct_basis();
    let mut out = Array2::<f32>::zeros((n_rows, n_cols));

    for br in (0..n_rows).step_by(8) {
        for bc in (0..n_cols).step_by(8) {
            let mut block = [[0.0; 8]; 8];
            for (i, row) in block.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    // replicate the last row/column past the edge
                    let r = (br + i).min(n_rows - 1);
                    let c = (bc + j).min(n_cols - 1);
                    *cell = to_byte(spec.values[[r, c]]) - 128.0;
                }
            }
            let mut coeffs = dct2(&block, &basis, false);
            for u in 0..8 {
                for v in 0..8 {
                    coeffs[u][v] = (coeffs[u][v] / table[u][v]).round() * table[u][v];
                }
            }
            let restored = dct2(&coeffs, &basis, true);
            for i in 0..8.min(n_rows - br) {
                for j in 0..8.min(n_cols - bc) {
                    let byte = (restored[i][j] + 128.0).clamp(0.0, 255.0);
                    out[[br + i, bc + j]] = (lo as f64 + byte / 255.0 * range) as f32;
                }
            }
        }
    }
    Ok(MelSpec {
        values: out,
        config: spec.config.clone(),
    })
}

/// Applies the configured augmentation chain: mixing (MixUp or CutMix, at
/// most one) -> Gaussian noise -> time/frequency mask -> JPEG degradation.
#[derive(Debug, Clone)]
pub struct Augmenter {
    cfg: AugmentConfig,
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig) -> Result<Self, AugmentError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.cfg
    }

    pub fn apply<R: Rng + ?Sized>(
        &self,
        example: &LabeledExample,
        partner: &LabeledExample,
        rng: &mut R,
    ) -> Result<LabeledExample, AugmentError> {
        let cfg = &self.cfg;
        let mut out = example.clone();

        let mix_choice = match (cfg.mixup_prob > 0.0, cfg.cutmix_prob > 0.0) {
            (true, true) => Some(rng.random_bool(0.5)),
            (true, false) => Some(true),
            (false, true) => Some(false),
            (false, false) => None,
        };
        match mix_choice {
            Some(true) if rng.random_bool(cfg.mixup_prob) => {
                let lambda = cfg.beta().sample(rng);
                out = mixup(&out, partner, lambda)?;
            }
            Some(false) if rng.random_bool(cfg.cutmix_prob) => {
                out = cutmix(&out, partner, cfg, rng)?;
            }
            _ => {}
        }
        if cfg.noise_prob > 0.0 && rng.random_bool(cfg.noise_prob) {
            let sigma = rng.random_range(0.0..=cfg.noise_sigma_max);
            out.spec = gaussian_noise(&out.spec, sigma, rng)?;
        }
        if cfg.mask_prob > 0.0 && rng.random_bool(cfg.mask_prob) {
            out.spec = time_freq_mask(&out.spec, cfg, rng)?;
        }
        if cfg.jpeg_prob > 0.0 && rng.random_bool(cfg.jpeg_prob) {
            let [lo, hi] = cfg.jpeg_quality_range;
            let quality = rng.random_range(lo..=hi);
            out.spec = jpeg_degrade(&out.spec, quality)?;
        }
        Ok(out)
    }
}
