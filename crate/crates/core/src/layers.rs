//! Trainable layer primitives: PReLU, dropout and initializers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand_core::RngCore;

use crate::error::{arg_err, Result};
use crate::rng;
use crate::tensor::{Shape, Tensor};

/// Initial negative slope of every PReLU unit.
pub const PRELU_INIT_SLOPE: f64 = 0.25;

/// Per-channel PReLU slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct PReluParams {
    pub slopes: Vec<f64>,
}

impl PReluParams {
    pub fn new(channels: usize) -> Self {
        PReluParams {
            slopes: alloc::vec![PRELU_INIT_SLOPE; channels],
        }
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, self.slopes.len(), 1, 1), self.slopes.clone())
    }
}

/// Evaluates PReLU on `x` with the given slopes.
pub fn prelu(x: &Tensor, params: &PReluParams) -> Result<Tensor> {
    let out = crate::kernels::prelu(x.data(), x.shape(), &params.slopes)?;
    Ok(Tensor::from_vec(x.shape(), out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Inverted dropout configuration. Masks come from the named stream at the
/// current iteration, so the same `(seed, stream, iteration)` always drops the
/// same elements.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutState {
    pub p: f64,
    pub mode: Mode,
    pub stream: String,
}

impl DropoutState {
    pub fn new(p: f64, stream: impl Into<String>) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(arg_err("dropout", format!("probability {p} outside [0, 1]")));
        }
        Ok(DropoutState {
            p,
            mode: Mode::Train,
            stream: stream.into(),
        })
    }
}

/// Multiplicative dropout mask (`0` or `1/(1-p)` per element), or `None` when
/// the layer is the identity.
pub fn dropout_mask(len: usize, p: f64, mode: Mode, seed: u64, stream: &str, iteration: u64) -> Result<Option<Vec<f64>>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(arg_err("dropout", format!("probability {p} outside [0, 1]")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(None);
    }
    if p >= 1.0 {
        return Err(arg_err("dropout", "p = 1 in train mode zeroes every activation"));
    }
    let keep = 1.0 / (1.0 - p);
    let mut r = rng::stream(seed, stream, iteration);
    Ok(Some(
        (0..len)
            .map(|_| if rng::uniform(&mut r) < p { 0.0 } else { keep })
            .collect(),
    ))
}

pub fn dropout(x: &Tensor, state: &DropoutState, seed: u64, iteration: u64) -> Result<Tensor> {
    match dropout_mask(x.len(), state.p, state.mode, seed, &state.stream, iteration)? {
        None => Ok(x.clone()),
        Some(mask) => Ok(Tensor::from_vec(
            x.shape(),
            x.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )),
    }
}

/// Zero-mean Gaussian kernel with variance `2 / fan_in`, where `fan_in` is
/// `in_channels * kh * kw` of a `(out, in, kh, kw)` kernel shape.
pub fn he_init(shape: Shape, rng: &mut impl RngCore) -> Tensor {
    let fan_in = (shape.c * shape.h * shape.w).max(1) as f64;
    let std = (2.0 / fan_in).sqrt();
    let data = (0..shape.numel()).map(|_| std * rng::gaussian(rng)).collect();
    Tensor::from_vec(shape, data)
}

/// Spatial size of the bilinear upsampling kernel for `factor`.
pub fn bilinear_size(factor: usize) -> usize {
    2 * factor - factor % 2
}

/// Padding that makes a stride-`factor` transposed conv with the bilinear
/// kernel map `H` to exactly `H * factor`.
pub fn upsample_padding(factor: usize) -> usize {
    (bilinear_size(factor) - factor) / 2
}

/// `(channels, channels, s, s)` kernel of separable bilinear weights on the
/// diagonal and zeros across channels.
pub fn bilinear_kernel(factor: usize, channels: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(arg_err("bilinear_kernel", "factor must be at least 1"));
    }
    let size = bilinear_size(factor);
    let f = factor as f64;
    let center = if size % 2 == 1 { f - 1.0 } else { f - 0.5 };
    let profile: Vec<f64> = (0..size)
        .map(|i| 1.0 - Float::abs(i as f64 - center) / f)
        .collect();
    let shape = Shape::new(channels, channels, size, size);
    let mut k = Tensor::zeros(shape);
    for c in 0..channels {
        for (y, py) in profile.iter().enumerate() {
            for (x, px) in profile.iter().enumerate() {
                k.set(c, c, y, x, py * px);
            }
        }
    }
    Ok(k)
}
