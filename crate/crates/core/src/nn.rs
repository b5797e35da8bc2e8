//! Compact convolutional classifier with hand-written backpropagation.
//!
//! Layout: `n` blocks of (3x3 same-padded convolution, ReLU, 2x2 max-pool),
//! then global average pooling and a single dense layer to
//! [`NUM_CLASSES`] logits. Every layer keeps its forward cache so the
//! reverse pass is exact. The network is generic over [`Scalar`] so
//! training can run in `f32` while gradient checks run in `f64`.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::AddAssign;
use std::path::Path;

use ndarray::ArrayView2;
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::Label;
use crate::dsp::MelSpec;
use crate::NUM_CLASSES;

const MODEL_MAGIC: &[u8; 8] = b"SYNATTRM";
const MODEL_FORMAT_VERSION: u32 = 1;
/// Lower clamp on softmax outputs so probabilities stay strictly inside (0, 1).
const PROB_FLOOR: f64 = 1e-12;

#[derive(Error, Debug)]
pub enum NnError {
    #[error("input {got:?} incompatible with model: {reason}")]
    InputShape { got: (usize, usize), reason: String },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch has {specs} inputs but {labels} labels")]
    BatchLength { specs: usize, labels: usize },
    #[error("parameter shape mismatch: {0}")]
    ParamShape(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("model I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Floating-point type the network computes in.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + 'static
{
    /// `c = a * b + beta * c` for row/column-strided operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn of(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("finite conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn check_span(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                check_span(a.len(), m, k, a_strides);
                check_span(b.len(), k, n, b_strides);
                assert!(c.len() >= m * n, "gemm output too small");
                // SAFETY: operand extents were checked against the slice lengths above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Channel widths of the convolution blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub channels: Vec<usize>,
}

impl Architecture {
    /// Four blocks, 16/32/64/128 channels.
    pub fn standard() -> Self {
        Self {
            channels: vec![16, 32, 64, 128],
        }
    }

    pub fn new(channels: Vec<usize>) -> Result<Self, NnError> {
        if channels.is_empty() || channels.contains(&0) {
            return Err(NnError::InvalidConfig(format!(
                "need at least one block with positive width, got {channels:?}"
            )));
        }
        Ok(Self { channels })
    }

    pub fn n_blocks(&self) -> usize {
        self.channels.len()
    }

    /// Smallest spatial side that survives every pooling stage.
    pub fn min_input_side(&self) -> usize {
        1 << self.n_blocks()
    }

    fn in_channels(&self, block: usize) -> usize {
        if block == 0 {
            1
        } else {
            self.channels[block - 1]
        }
    }

    /// Tensor shapes in declaration order: `conv{i}.weight`, `conv{i}.bias`, ..., `dense.weight`, `dense.bias`.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for (i, &c_out) in self.channels.iter().enumerate() {
            shapes.push(vec![c_out, self.in_channels(i), 3, 3]);
            shapes.push(vec![c_out]);
        }
        let last = *self.channels.last().expect("non-empty");
        shapes.push(vec![NUM_CLASSES, last]);
        shapes.push(vec![NUM_CLASSES]);
        shapes
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); len],
        }
    }
}

/// All weights and biases of the classifier. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub arch: Architecture,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            arch: arch.clone(),
            tensors: arch.tensor_shapes().into_iter().map(Tensor::zeros).collect(),
        }
    }

    pub fn conv_weight(&self, block: usize) -> &Tensor<T> {
        &self.tensors[2 * block]
    }

    pub fn conv_bias(&self, block: usize) -> &Tensor<T> {
        &self.tensors[2 * block + 1]
    }

    pub fn dense_weight(&self) -> &Tensor<T> {
        &self.tensors[2 * self.arch.n_blocks()]
    }

    pub fn dense_bias(&self) -> &Tensor<T> {
        &self.tensors[2 * self.arch.n_blocks() + 1]
    }

    pub fn dense_weight_mut(&mut self) -> &mut Tensor<T> {
        let i = 2 * self.arch.n_blocks();
        &mut self.tensors[i]
    }

    pub fn dense_bias_mut(&mut self) -> &mut Tensor<T> {
        let i = 2 * self.arch.n_blocks() + 1;
        &mut self.tensors[i]
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape<U>(&self, other: &ModelParams<U>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape == b.shape)
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }
}

/// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
pub fn init_model<T: Scalar>(arch: &Architecture, seed: u64) -> ModelParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(arch);
    for tensor in params.tensors.iter_mut().filter(|t| t.shape.len() > 1) {
        let fan_in: usize = tensor.shape[1..].iter().product();
        let limit = (6.0 / fan_in as f64).sqrt();
        for w in tensor.data.iter_mut() {
            *w = T::of(rng.random_range(-limit..limit));
        }
    }
    params
}

/// Softmax output for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassProb(pub [f64; NUM_CLASSES]);

impl ClassProb {
    pub fn argmax(&self) -> usize {
        crate::augment::argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Numerically stable softmax, clamped strictly inside (0, 1).
pub fn softmax(logits: &[f64; NUM_CLASSES]) -> ClassProb {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; NUM_CLASSES];
    for (pk, &z) in p.iter_mut().zip(logits) {
        *pk = (z - max).exp();
    }
    let sum: f64 = p.iter().sum();
    for pk in p.iter_mut() {
        *pk = (*pk / sum).max(PROB_FLOOR);
    }
    let sum: f64 = p.iter().sum();
    for pk in p.iter_mut() {
        *pk /= sum;
    }
    ClassProb(p)
}

/// `(1 - alpha) * label + alpha / K`.
pub fn smoothed_target(label: &Label, alpha: f64) -> Label {
    let mut t = [0.0; NUM_CLASSES];
    for (tk, &yk) in t.iter_mut().zip(label) {
        *tk = (1.0 - alpha) * yk + alpha / NUM_CLASSES as f64;
    }
    t
}

/// Label-smoothed categorical cross-entropy of one prediction.
pub fn smoothed_cce(probs: &ClassProb, label: &Label, alpha: f64) -> f64 {
    let target = smoothed_target(label, alpha);
    -target
        .iter()
        .zip(&probs.0)
        .map(|(t, p)| t * p.ln())
        .sum::<f64>()
}

/// Same loss evaluated from logits via log-sum-exp.
fn cce_from_logits(logits: &[f64; NUM_CLASSES], target: &Label) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let tsum: f64 = target.iter().sum();
    lse * tsum - target.iter().zip(logits).map(|(t, z)| t * z).sum::<f64>()
}

// ---- layers -----------------------------------------------------------

/// Unfolds a `c x h x w` map into `(c*9) x (h*w)` patches for a 3x3 same convolution.
pub(crate) fn im2col<T: Scalar>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); c * 9 * hw];
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

/// Same-padded 3x3 convolution; returns `(pre_activation, cols)`.
pub(crate) fn conv_forward<T: Scalar>(
    input: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> (Vec<T>, Vec<T>) {
    let c_out = weight.shape[0];
    let hw = h * w;
    let k = c_in * 9;
    let cols = im2col(input, c_in, h, w);
    let mut out = vec![T::zero(); c_out * hw];
    for (co, row) in out.chunks_mut(hw).enumerate() {
        row.fill(bias.data[co]);
    }
    T::gemm(
        c_out,
        k,
        hw,
        &weight.data,
        (k as isize, 1),
        &cols,
        (hw as isize, 1),
        T::one(),
        &mut out,
    );
    (out, cols)
}

/// Accumulates weight/bias gradients and, when `need_input`, returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    d_out: &[T],
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &Tensor<T>,
    d_weight: &mut Tensor<T>,
    d_bias: &mut Tensor<T>,
    need_input: bool,
) -> Option<Vec<T>> {
    let c_out = weight.shape[0];
    let hw = h * w;
    let k = c_in * 9;
    T::gemm(
        c_out,
        hw,
        k,
        d_out,
        (hw as isize, 1),
        cols,
        (1, hw as isize),
        T::one(),
        &mut d_weight.data,
    );
    for (co, row) in d_out.chunks(hw).enumerate() {
        d_bias.data[co] += row.iter().copied().sum::<T>();
    }
    need_input.then(|| {
        let mut d_cols = vec![T::zero(); k * hw];
        T::gemm(
            k,
            c_out,
            hw,
            &weight.data,
            (1, k as isize),
            d_out,
            (hw as isize, 1),
            T::zero(),
            &mut d_cols,
        );
        col2im(&d_cols, c_in, h, w)
    })
}

/// ReLU followed by 2x2 stride-2 max-pool (trailing odd row/column dropped).
/// Returns the pooled map and, per pooled cell, the flat index of its winner.
pub(crate) fn relu_pool_forward<T: Scalar>(
    pre: &[T],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let plane = &pre[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (2 * oy) * w + 2 * ox;
                let mut best = plane[best_idx].max(T::zero());
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    let v = plane[idx].max(T::zero());
                    if v > best {
                        best = v;
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn relu_pool_backward<T: Scalar>(
    d_pooled: &[T],
    pre: &[T],
    argmax: &[u32],
    c: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let pooled_per_channel = (h / 2) * (w / 2);
    let mut d_pre = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let base = ci * h * w;
        for p in 0..pooled_per_channel {
            let j = ci * pooled_per_channel + p;
            let idx = base + argmax[j] as usize;
            if pre[idx] > T::zero() {
                d_pre[idx] += d_pooled[j];
            }
        }
    }
    d_pre
}

pub(crate) fn global_avg_pool<T: Scalar>(input: &[T], c: usize, hw: usize) -> Vec<T> {
    let scale = T::of(1.0 / hw as f64);
    input
        .chunks(hw)
        .take(c)
        .map(|plane| plane.iter().copied().sum::<T>() * scale)
        .collect()
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(d_out: &[T], hw: usize) -> Vec<T> {
    let scale = T::of(1.0 / hw as f64);
    d_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, hw))
        .collect()
}

pub(crate) fn dense_forward<T: Scalar>(
    input: &[T],
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> [f64; NUM_CLASSES] {
    let mut logits = [0.0; NUM_CLASSES];
    let c = input.len();
    for (k, z) in logits.iter_mut().enumerate() {
        let row = &weight.data[k * c..(k + 1) * c];
        *z = (bias.data[k] + row.iter().zip(input).map(|(&a, &b)| a * b).sum::<T>()).f64();
    }
    logits
}

pub(crate) fn dense_backward<T: Scalar>(
    d_logits: &[T; NUM_CLASSES],
    input: &[T],
    weight: &Tensor<T>,
    d_weight: &mut Tensor<T>,
    d_bias: &mut Tensor<T>,
) -> Vec<T> {
    let c = input.len();
    let mut d_input = vec![T::zero(); c];
    for k in 0..NUM_CLASSES {
        let g = d_logits[k];
        d_bias.data[k] += g;
        let w_row = &weight.data[k * c..(k + 1) * c];
        let dw_row = &mut d_weight.data[k * c..(k + 1) * c];
        for j in 0..c {
            dw_row[j] += g * input[j];
            d_input[j] += g * w_row[j];
        }
    }
    d_input
}

// ---- whole network ----------------------------------------------------

struct BlockCache<T> {
    h: usize,
    w: usize,
    cols: Vec<T>,
    pre: Vec<T>,
    argmax: Vec<u32>,
}

struct ForwardCache<T> {
    blocks: Vec<BlockCache<T>>,
    pooled: Vec<T>,
    last_hw: usize,
    logits: [f64; NUM_CLASSES],
}

fn check_input<T: Scalar>(params: &ModelParams<T>, shape: (usize, usize)) -> Result<(), NnError> {
    let min = params.arch.min_input_side();
    if shape.0 < min || shape.1 < min {
        return Err(NnError::InputShape {
            got: shape,
            reason: format!(
                "{} pooling stages need at least {min} cells per side",
                params.arch.n_blocks()
            ),
        });
    }
    Ok(())
}

fn forward_one<T: Scalar>(params: &ModelParams<T>, input: ArrayView2<'_, f32>) -> ForwardCache<T> {
    let (mut h, mut w) = input.dim();
    let mut act: Vec<T> = input.iter().map(|&v| T::of(v as f64)).collect();
    let mut blocks = Vec::with_capacity(params.arch.n_blocks());
    for b in 0..params.arch.n_blocks() {
        let c_in = params.arch.in_channels(b);
        let c_out = params.arch.channels[b];
        let (pre, cols) = conv_forward(&act, c_in, h, w, params.conv_weight(b), params.conv_bias(b));
        let (pooled, argmax) = relu_pool_forward(&pre, c_out, h, w);
        blocks.push(BlockCache {
            h,
            w,
            cols,
            pre,
            argmax,
        });
        act = pooled;
        h /= 2;
        w /= 2;
    }
    let c_last = *params.arch.channels.last().expect("non-empty");
    let pooled = global_avg_pool(&act, c_last, h * w);
    let logits = dense_forward(&pooled, params.dense_weight(), params.dense_bias());
    ForwardCache {
        blocks,
        pooled,
        last_hw: h * w,
        logits,
    }
}

/// Raw logits for one spectrogram.
pub fn logits<T: Scalar>(params: &ModelParams<T>, spec: &MelSpec) -> Result<[f64; NUM_CLASSES], NnError> {
    check_input(params, spec.shape())?;
    Ok(forward_one(params, spec.values.view()).logits)
}

/// Per-example class probabilities.
pub fn forward<T: Scalar>(params: &ModelParams<T>, batch: &[MelSpec]) -> Result<Vec<ClassProb>, NnError> {
    let Some(first) = batch.first() else {
        return Ok(Vec::new());
    };
    let shape = first.shape();
    if let Some(bad) = batch.iter().find(|s| s.shape() != shape) {
        return Err(NnError::InputShape {
            got: bad.shape(),
            reason: format!("batch mixes shapes with {shape:?}"),
        });
    }
    check_input(params, shape)?;
    Ok(batch
        .par_iter()
        .map(|spec| softmax(&forward_one(params, spec.values.view()).logits))
        .collect())
}

/// Gradient of `scale * loss(example)` with respect to every parameter.
fn backward_one<T: Scalar>(
    params: &ModelParams<T>,
    input: ArrayView2<'_, f32>,
    target: &Label,
    scale: f64,
) -> (ModelParams<T>, f64, ClassProb) {
    let cache = forward_one(params, input);
    let probs = softmax(&cache.logits);
    let loss = cce_from_logits(&cache.logits, target);
    let tsum: f64 = target.iter().sum();
    // unclamped softmax, so the gradient matches the log-sum-exp loss exactly
    let max = cache.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = cache.logits.iter().map(|z| (z - max).exp()).sum();
    let mut d_logits = [T::zero(); NUM_CLASSES];
    for k in 0..NUM_CLASSES {
        let p = (cache.logits[k] - max).exp() / denom;
        d_logits[k] = T::of(scale * (tsum * p - target[k]));
    }

    let mut grads = ModelParams::zeros(&params.arch);
    let n_blocks = params.arch.n_blocks();
    let (dense_w, dense_b) = {
        let (head, tail) = grads.tensors.split_at_mut(2 * n_blocks + 1);
        (&mut head[2 * n_blocks], &mut tail[0])
    };
    let d_pooled = dense_backward(&d_logits, &cache.pooled, params.dense_weight(), dense_w, dense_b);
    let mut d_act = global_avg_pool_backward(&d_pooled, cache.last_hw);

    for b in (0..n_blocks).rev() {
        let bc = &cache.blocks[b];
        let c_in = params.arch.in_channels(b);
        let c_out = params.arch.channels[b];
        let d_pre = relu_pool_backward(&d_act, &bc.pre, &bc.argmax, c_out, bc.h, bc.w);
        let (head, tail) = grads.tensors.split_at_mut(2 * b + 1);
        let d_input = conv_backward(
            &d_pre,
            &bc.cols,
            c_in,
            bc.h,
            bc.w,
            params.conv_weight(b),
            &mut head[2 * b],
            &mut tail[0],
            b > 0,
        );
        if let Some(d) = d_input {
            d_act = d;
        }
    }
    (grads, loss, probs)
}

/// Result of a reverse pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchGradient<T> {
    pub grads: ModelParams<T>,
    /// Mean smoothed cross-entropy over the batch.
    pub loss: f64,
    pub probs: Vec<ClassProb>,
}

/// Exact gradient of the mean label-smoothed cross-entropy over the batch.
///
/// Per-example gradients are computed in parallel and summed in batch order,
/// so the result does not depend on the thread count.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[MelSpec],
    labels: &[Label],
    alpha: f64,
) -> Result<BatchGradient<T>, NnError> {
    let inputs: Vec<ArrayView2<'_, f32>> = batch.iter().map(|s| s.values.view()).collect();
    backward_views(params, &inputs, labels, alpha)
}

pub(crate) fn backward_views<T: Scalar>(
    params: &ModelParams<T>,
    inputs: &[ArrayView2<'_, f32>],
    labels: &[Label],
    alpha: f64,
) -> Result<BatchGradient<T>, NnError> {
    if inputs.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    if inputs.len() != labels.len() {
        return Err(NnError::BatchLength {
            specs: inputs.len(),
            labels: labels.len(),
        });
    }
    let shape = inputs[0].dim();
    if let Some(bad) = inputs.iter().find(|s| s.dim() != shape) {
        return Err(NnError::InputShape {
            got: bad.dim(),
            reason: format!("batch mixes shapes with {shape:?}"),
        });
    }
    check_input(params, shape)?;
    let scale = 1.0 / inputs.len() as f64;
    let parts: Vec<_> = inputs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(input, label)| {
            let target = smoothed_target(label, alpha);
            backward_one(params, input.view(), &target, scale)
        })
        .collect();
    let mut iter = parts.into_iter();
    let (mut grads, first_loss, first_probs) = iter.next().expect("non-empty batch");
    let mut loss = first_loss;
    let mut probs = vec![first_probs];
    for (g, l, p) in iter {
        grads.add_assign(&g);
        loss += l;
        probs.push(p);
    }
    Ok(BatchGradient {
        grads,
        loss: loss * scale,
        probs,
    })
}

// ---- optimisation -----------------------------------------------------

/// Optimiser and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub label_smoothing: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            decay_rate: 0.9,
            label_smoothing: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 60,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("decay_rate must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(b > 0.0 && b < 1.0) {
                return bad("Adam betas must be in (0, 1)");
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }
}

/// `gamma1 * decay_rate^epoch`.
pub fn lr_schedule(gamma1: f64, decay_rate: f64, epoch: usize) -> f64 {
    gamma1 * decay_rate.powi(epoch as i32)
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        (&TrainConfig::default()).into()
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    hyper: AdamHyper,
) -> Result<(), NnError> {
    if !params.same_shape(grads)
        || state.m.len() != params.tensors.len()
        || state.m.iter().zip(&params.tensors).any(|(m, t)| m.len() != t.data.len())
    {
        return Err(NnError::ParamShape("params, gradients and Adam state disagree".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let c1 = T::of(1.0 - hyper.beta1.powi(t));
    let c2 = T::of(1.0 - hyper.beta2.powi(t));
    let lr = T::of(lr);
    let eps = T::of(hyper.eps);
    for (i, tensor) in params.tensors.iter_mut().enumerate() {
        let g = &grads.tensors[i].data;
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..tensor.data.len() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            tensor.data[j] = tensor.data[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ---- serialisation ----------------------------------------------------

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), NnError> {
    let v = u32::try_from(v).map_err(|_| NnError::Format(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Encodes as: magic, format version, input channels, class count, block
/// count, block widths, tensor count, then each tensor's rank, dims and
/// little-endian `f32` data.
pub fn model_to_bytes(params: &ModelParams<f32>) -> Result<Vec<u8>, NnError> {
    let mut out = Vec::with_capacity(64 + 4 * params.num_params());
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, MODEL_FORMAT_VERSION as usize)?;
    put_u32(&mut out, 1)?;
    put_u32(&mut out, NUM_CLASSES)?;
    put_u32(&mut out, params.arch.n_blocks())?;
    for &c in &params.arch.channels {
        put_u32(&mut out, c)?;
    }
    put_u32(&mut out, params.tensors.len())?;
    for t in &params.tensors {
        put_u32(&mut out, t.shape.len())?;
        for &d in &t.shape {
            put_u32(&mut out, d)?;
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Format("truncated model file".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<usize, NnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>, NnError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(MODEL_MAGIC.len())? != MODEL_MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != MODEL_FORMAT_VERSION as usize {
        return Err(NnError::Format(format!("unsupported format version {version}")));
    }
    let (in_channels, classes) = (cur.u32()?, cur.u32()?);
    if in_channels != 1 || classes != NUM_CLASSES {
        return Err(NnError::Format(format!(
            "expected 1 input channel and {NUM_CLASSES} classes, got {in_channels} and {classes}"
        )));
    }
    let n_blocks = cur.u32()?;
    let channels = (0..n_blocks).map(|_| cur.u32()).collect::<Result<Vec<_>, _>>()?;
    let arch = Architecture::new(channels).map_err(|e| NnError::Format(e.to_string()))?;
    let expected = arch.tensor_shapes();
    let n_tensors = cur.u32()?;
    if n_tensors != expected.len() {
        return Err(NnError::Format(format!(
            "expected {} tensors, found {n_tensors}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(n_tensors);
    for want in expected {
        let rank = cur.u32()?;
        let shape = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>, _>>()?;
        if shape != want {
            return Err(NnError::Format(format!("tensor shape {shape:?}, expected {want:?}")));
        }
        let len: usize = shape.iter().product();
        let raw = cur.take(4 * len)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(Tensor { shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(NnError::Format("trailing bytes after last tensor".into()));
    }
    Ok(ModelParams { arch, tensors })
}

pub fn save_model(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<(), NnError> {
    let bytes = model_to_bytes(params)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams<f32>, NnError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    model_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::augment::one_hot;
    use crate::dsp::SpecConfig;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn spec(rows: usize, cols: usize, seed: u64) -> MelSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MelSpec {
            values: Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0f32..2.0)),
            config: SpecConfig::toy(),
        }
    }

    fn tiny() -> Architecture {
        Architecture::new(vec![2, 2, 2, 2]).unwrap()
    }

    fn batch_loss(params: &ModelParams<f64>, batch: &[MelSpec], labels: &[Label], alpha: f64) -> f64 {
        batch
            .iter()
            .zip(labels)
            .map(|(s, l)| {
                let z = logits(params, s).unwrap();
                cce_from_logits(&z, &smoothed_target(l, alpha))
            })
            .sum::<f64>()
            / batch.len() as f64
    }

    /// Loss of a single layer output against a fixed random linear functional.
    fn probe<T: Scalar>(out: &[T], weights: &[f64]) -> f64 {
        out.iter().zip(weights).map(|(&o, &w)| o.f64() * w).sum()
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a: ModelParams<f32> = init_model(&Architecture::standard(), 42);
        let b: ModelParams<f32> = init_model(&Architecture::standard(), 42);
        assert_eq!(a, b);
        for blk in 0..4 {
            assert!(a.conv_bias(blk).data.iter().all(|&v| v == 0.0));
        }
        assert!(a.dense_bias().data.iter().all(|&v| v == 0.0));
        for blk in 0..4 {
            let w = &a.conv_weight(blk).data;
            let fan_in: usize = a.conv_weight(blk).shape[1..].iter().product();
            let n = w.len() as f64;
            let mean = w.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = w.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            let target = 2.0 / fan_in as f64;
            assert!((var - target).abs() / target < 0.3, "block {blk}: {var} vs {target}");
        }
    }

    #[test]
    fn forward_outputs_are_distributions() {
        let params: ModelParams<f32> = init_model(&Architecture::standard(), 1);
        let batch: Vec<MelSpec> = (0..4).map(|i| spec(32, 64, i)).collect();
        let probs = forward(&params, &batch).unwrap();
        for p in &probs {
            assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.0.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let reversed: Vec<MelSpec> = batch.iter().rev().cloned().collect();
        let rev_probs = forward(&params, &reversed).unwrap();
        for (a, b) in probs.iter().zip(rev_probs.iter().rev()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_dense_layer_gives_uniform_output() {
        let mut params: ModelParams<f32> = init_model(&Architecture::standard(), 3);
        params.dense_weight_mut().data.fill(0.0);
        for p in forward(&params, &[spec(32, 64, 5), spec(32, 64, 6)]).unwrap() {
            for v in p.0 {
                assert!((v - 1.0 / 6.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_small_or_mixed_inputs() {
        let params: ModelParams<f32> = init_model(&Architecture::standard(), 3);
        assert!(matches!(
            forward(&params, &[spec(8, 64, 1)]),
            Err(NnError::InputShape { .. })
        ));
        assert!(matches!(
            forward(&params, &[spec(32, 64, 1), spec(32, 48, 1)]),
            Err(NnError::InputShape { .. })
        ));
    }

    #[test]
    fn softmax_stays_strictly_inside() {
        let p = softmax(&[1000.0, -1000.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(p.0.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(smoothed_cce(&p, &one_hot(1), 0.05).is_finite());
    }

    #[test]
    fn smoothed_cce_closed_forms() {
        let uniform = ClassProb([1.0 / 6.0; 6]);
        for alpha in [0.0, 0.05, 0.3] {
            for label in [one_hot(0), one_hot(5), [0.1, 0.2, 0.3, 0.1, 0.2, 0.1]] {
                assert!((smoothed_cce(&uniform, &label, alpha) - 6f64.ln()).abs() < 1e-9);
            }
        }
        let t = smoothed_target(&one_hot(2), 0.05);
        let expected = [1.0 / 120.0, 1.0 / 120.0, 0.958_333_333_333_333_3, 1.0 / 120.0, 1.0 / 120.0, 1.0 / 120.0];
        for k in 0..6 {
            assert!((t[k] - expected[k]).abs() < 1e-15);
        }
        let rest = 1e-9 / 5.0;
        let near = ClassProb([rest, rest, 1.0 - 1e-9, rest, rest, rest]);
        assert!(smoothed_cce(&near, &one_hot(2), 0.0) < 1e-8);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let arch = tiny();
        let mut params: ModelParams<f64> = init_model(&arch, 11);
        // non-zero biases so every bias gradient path is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for t in params.tensors.iter_mut().filter(|t| t.shape.len() == 1) {
            t.data.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
        let batch: Vec<MelSpec> = (0..3).map(|i| spec(16, 16, 100 + i)).collect();
        let labels = [one_hot(1), one_hot(4), [0.2, 0.1, 0.1, 0.1, 0.1, 0.4]];
        let alpha = 0.05;
        let analytic = backward(&params, &batch, &labels, alpha).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for ti in 0..params.tensors.len() {
            for j in 0..params.tensors[ti].data.len() {
                let orig = params.tensors[ti].data[j];
                params.tensors[ti].data[j] = orig + h;
                let up = batch_loss(&params, &batch, &labels, alpha);
                params.tensors[ti].data[j] = orig - h;
                let down = batch_loss(&params, &batch, &labels, alpha);
                params.tensors[ti].data[j] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err = rel_err(analytic.grads.tensors[ti].data[j], numeric);
                worst = worst.max(err);
                assert!(err < 1e-4, "tensor {ti}[{j}]: {} vs {numeric}", analytic.grads.tensors[ti].data[j]);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn conv_layer_gradients() {
        let (c_in, c_out, h, w) = (2, 3, 5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut weight = Tensor::<f64> { shape: vec![c_out, c_in, 3, 3], data: (0..c_out * c_in * 9).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let bias = Tensor::<f64> { shape: vec![c_out], data: vec![0.1, -0.2, 0.3] };
        let mut input: Vec<f64> = (0..c_in * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe_w = random_vec(c_out * h * w, 2);
        let (_, cols) = conv_forward(&input, c_in, h, w, &weight, &bias);
        let mut dw = Tensor::zeros(weight.shape.clone());
        let mut db = Tensor::zeros(bias.shape.clone());
        let d_in = conv_backward(&probe_w, &cols, c_in, h, w, &weight, &mut dw, &mut db, true).unwrap();
        let eval = |inp: &[f64], wt: &Tensor<f64>| probe(&conv_forward(inp, c_in, h, w, wt, &bias).0, &probe_w);
        let eps = 1e-5;
        for j in 0..weight.data.len() {
            let o = weight.data[j];
            weight.data[j] = o + eps;
            let up = eval(&input, &weight);
            weight.data[j] = o - eps;
            let down = eval(&input, &weight);
            weight.data[j] = o;
            assert!(rel_err(dw.data[j], (up - down) / (2.0 * eps)) < 1e-6);
        }
        for j in 0..input.len() {
            let o = input[j];
            input[j] = o + eps;
            let up = eval(&input, &weight);
            input[j] = o - eps;
            let down = eval(&input, &weight);
            input[j] = o;
            assert!(rel_err(d_in[j], (up - down) / (2.0 * eps)) < 1e-6);
        }
        let bias_grad: Vec<f64> = probe_w.chunks(h * w).map(|c| c.iter().sum()).collect();
        for co in 0..c_out {
            assert!((db.data[co] - bias_grad[co]).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_pool_and_gap_gradients() {
        let (c, h, w) = (2, 6, 7);
        let mut pre = random_vec(c * h * w, 3);
        let probe_w = random_vec(c * (h / 2) * (w / 2), 4);
        let (_, arg) = relu_pool_forward(&pre, c, h, w);
        let d_pre = relu_pool_backward(&probe_w, &pre, &arg, c, h, w);
        let eps = 1e-6;
        for j in 0..pre.len() {
            let o = pre[j];
            pre[j] = o + eps;
            let up = probe(&relu_pool_forward(&pre, c, h, w).0, &probe_w);
            pre[j] = o - eps;
            let down = probe(&relu_pool_forward(&pre, c, h, w).0, &probe_w);
            pre[j] = o;
            assert!(rel_err(d_pre[j], (up - down) / (2.0 * eps)) < 1e-6, "cell {j}");
        }

        let mut x = random_vec(c * 12, 5);
        let pw = random_vec(c, 6);
        let dx = global_avg_pool_backward(&pw, 12);
        for j in 0..x.len() {
            let o = x[j];
            x[j] = o + eps;
            let up = probe(&global_avg_pool(&x, c, 12), &pw);
            x[j] = o - eps;
            let down = probe(&global_avg_pool(&x, c, 12), &pw);
            x[j] = o;
            assert!(rel_err(dx[j], (up - down) / (2.0 * eps)) < 1e-6);
        }
    }

    #[test]
    fn dense_and_softmax_ce_gradients() {
        let c = 5;
        let mut weight = Tensor::<f64> { shape: vec![NUM_CLASSES, c], data: random_vec(NUM_CLASSES * c, 7) };
        let bias = Tensor::<f64> { shape: vec![NUM_CLASSES], data: random_vec(NUM_CLASSES, 8) };
        let mut input = random_vec(c, 9);
        let target = smoothed_target(&one_hot(3), 0.05);
        let loss = |inp: &[f64], wt: &Tensor<f64>| cce_from_logits(&dense_forward(inp, wt, &bias), &target);
        let z = dense_forward(&input, &weight, &bias);
        let p = softmax(&z);
        let mut d_logits = [0.0; NUM_CLASSES];
        for k in 0..NUM_CLASSES {
            d_logits[k] = p.0[k] - target[k];
        }
        let mut dw = Tensor::zeros(weight.shape.clone());
        let mut db = Tensor::zeros(bias.shape.clone());
        let d_in = dense_backward(&d_logits, &input, &weight, &mut dw, &mut db);
        let eps = 1e-6;
        for j in 0..weight.data.len() {
            let o = weight.data[j];
            weight.data[j] = o + eps;
            let up = loss(&input, &weight);
            weight.data[j] = o - eps;
            let down = loss(&input, &weight);
            weight.data[j] = o;
            assert!(rel_err(dw.data[j], (up - down) / (2.0 * eps)) < 1e-6);
        }
        for j in 0..c {
            let o = input[j];
            input[j] = o + eps;
            let up = loss(&input, &weight);
            input[j] = o - eps;
            let down = loss(&input, &weight);
            input[j] = o;
            assert!(rel_err(d_in[j], (up - down) / (2.0 * eps)) < 1e-6);
        }
    }

    #[test]
    fn duplicated_batch_gives_single_gradient() {
        let params: ModelParams<f64> = init_model(&tiny(), 21);
        let s = spec(16, 16, 22);
        let label = one_hot(2);
        let single = backward(&params, &[s.clone()], &[label], 0.05).unwrap();
        let many = backward(&params, &vec![s; 5], &[label; 5], 0.05).unwrap();
        for (a, b) in single.grads.tensors.iter().zip(&many.grads.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn uniform_output_and_target_give_zero_bias_gradient() {
        let mut params: ModelParams<f64> = init_model(&tiny(), 23);
        params.dense_weight_mut().data.fill(0.0);
        let uniform_label = [1.0 / 6.0; 6];
        let g = backward(&params, &[spec(16, 16, 24)], &[uniform_label], 0.05).unwrap();
        assert!(g.grads.dense_bias().data.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn adam_examples() {
        let arch = tiny();
        let mut params: ModelParams<f64> = init_model(&arch, 31);
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let zeros = ModelParams::zeros(&arch);
        adam_step(&mut params, &zeros, &mut state, 1e-3, AdamHyper::default()).unwrap();
        assert_eq!(params, before);

        let mut params = before.clone();
        let mut state = AdamState::new(&params);
        let mut grads = ModelParams::<f64>::zeros(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for t in grads.tensors.iter_mut() {
            t.data.iter_mut().for_each(|g| {
                let mag = rng.random_range(0.01..1.0);
                *g = if rng.random_bool(0.5) { mag } else { -mag };
            });
        }
        adam_step(&mut params, &grads, &mut state, 1e-3, AdamHyper::default()).unwrap();
        for ((p, b), g) in params.tensors.iter().zip(&before.tensors).zip(&grads.tensors) {
            for j in 0..p.data.len() {
                let step = b.data[j] - p.data[j];
                assert!((step - 1e-3 * g.data[j].signum()).abs() < 1e-6);
            }
        }

        let mut again = before.clone();
        let mut state2 = AdamState::new(&again);
        adam_step(&mut again, &grads, &mut state2, 1e-3, AdamHyper::default()).unwrap();
        assert_eq!(again, params);
        assert_eq!(state2, state);

        let other: ModelParams<f64> = ModelParams::zeros(&Architecture::new(vec![3]).unwrap());
        assert!(adam_step(&mut again, &other, &mut state2, 1e-3, AdamHyper::default()).is_err());
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(1e-3, 0.9, 0), 1e-3);
        assert!((lr_schedule(1e-3, 0.9, 10) - 3.486_784_401e-4).abs() < 1e-12);
        let seq: Vec<f64> = (0..50).map(|e| lr_schedule(1e-3, 0.95, e)).collect();
        assert!(seq.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn small_step_decreases_loss() {
        let params: ModelParams<f64> = init_model(&tiny(), 41);
        let batch: Vec<MelSpec> = (0..4).map(|i| spec(16, 16, 50 + i)).collect();
        let labels = [one_hot(0), one_hot(1), one_hot(2), one_hot(5)];
        let g = backward(&params, &batch, &labels, 0.05).unwrap();
        let improved = [1e-3, 1e-4, 1e-5].iter().any(|&lr| {
            let mut p = params.clone();
            let mut state = AdamState::new(&p);
            adam_step(&mut p, &g.grads, &mut state, lr, AdamHyper::default()).unwrap();
            batch_loss(&p, &batch, &labels, 0.05) < g.loss
        });
        assert!(improved);
    }

    #[test]
    fn parallel_gradient_matches_serial() {
        let params: ModelParams<f32> = init_model(&Architecture::new(vec![4, 4, 8, 8]).unwrap(), 61);
        let batch: Vec<MelSpec> = (0..6).map(|i| spec(32, 32, 70 + i)).collect();
        let labels: Vec<Label> = (0..6).map(one_hot).collect();
        let pooled = backward(&params, &batch, &labels, 0.05).unwrap();
        let serial_pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = serial_pool.install(|| backward(&params, &batch, &labels, 0.05).unwrap());
        for (a, b) in pooled.grads.tensors.iter().zip(&serial.grads.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!(((x - y) as f64).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn model_bytes_round_trip() {
        let params: ModelParams<f32> = init_model(&Architecture::standard(), 77);
        let bytes = model_to_bytes(&params).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back.arch, params.arch);
        for (a, b) in back.tensors.iter().zip(&params.tensors) {
            assert_eq!(a.shape, b.shape);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(model_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(model_from_bytes(&bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn serialisation_is_bit_exact(seed in any::<u64>(), widths in proptest::collection::vec(1usize..6, 1..4)) {
            let arch = Architecture::new(widths).unwrap();
            let mut params: ModelParams<f32> = init_model(&arch, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for t in params.tensors.iter_mut() {
                t.data.iter_mut().for_each(|v| *v = f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff));
            }
            let back = model_from_bytes(&model_to_bytes(&params).unwrap()).unwrap();
            for (a, b) in back.tensors.iter().zip(&params.tensors) {
                prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
