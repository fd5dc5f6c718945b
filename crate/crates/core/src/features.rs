//! Feature maps `E(I)` compared by the matching loss, with their
//! vector-Jacobian products so the loss can be differentiated through them.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward, conv2d_forward, ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Raw intensities.
    Identity,
    /// Seeded bank of 3×3 filters followed by `tanh`.
    #[default]
    RandomConv,
    /// Stack of Gaussian-blurred copies at increasing scale.
    Pyramid,
}

impl FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "random_conv" => Ok(Self::RandomConv),
            "pyramid" => Ok(Self::Pyramid),
            _ => Err(Error::Unknown {
                kind: "feature extractor",
                name: s.into(),
            }),
        }
    }
}

pub const DEFAULT_CONV_CHANNELS: usize = 16;
pub const DEFAULT_PYRAMID_SIGMAS: [f64; 4] = [0.0, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureExtractor {
    Identity,
    RandomConv {
        geometry: ConvGeometry,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    Pyramid {
        /// One normalized 1-D kernel per scale, centered.
        kernels: Vec<Vec<f64>>,
    },
}

impl FeatureExtractor {
    pub fn new(kind: FeatureKind, in_channels: usize, seed: u64) -> Self {
        match kind {
            FeatureKind::Identity => Self::Identity,
            FeatureKind::RandomConv => Self::random_conv(in_channels, DEFAULT_CONV_CHANNELS, seed),
            FeatureKind::Pyramid => Self::pyramid(&DEFAULT_PYRAMID_SIGMAS),
        }
    }

    pub fn random_conv(in_channels: usize, out_channels: usize, seed: u64) -> Self {
        let geometry = ConvGeometry {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.5 / ((9 * in_channels) as f64).sqrt();
        let wdist = Normal::new(0.0, std).expect("finite std");
        let bdist = Normal::new(0.0, 0.1).expect("finite std");
        let weight = (0..geometry.weight_len()).map(|_| wdist.sample(&mut rng)).collect();
        let bias = (0..out_channels).map(|_| bdist.sample(&mut rng)).collect();
        Self::RandomConv { geometry, weight, bias }
    }

    pub fn pyramid(sigmas: &[f64]) -> Self {
        let kernels = sigmas
            .iter()
            .map(|&s| {
                if s <= 0.0 {
                    return vec![1.0];
                }
                let r = (3.0 * s).ceil() as i64;
                let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * s * s)).exp()).collect();
                let sum: f64 = k.iter().sum();
                k.iter_mut().for_each(|v| *v /= sum);
                k
            })
            .collect();
        Self::Pyramid { kernels }
    }

    pub fn out_channels(&self, in_channels: usize) -> usize {
        match self {
            Self::Identity => in_channels,
            Self::RandomConv { geometry, .. } => geometry.out_channels,
            Self::Pyramid { kernels } => kernels.len() * in_channels,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Self::Identity => x.clone(),
            Self::RandomConv { geometry, weight, bias } => conv2d_forward(x, weight, bias, geometry).map(f64::tanh),
            Self::Pyramid { kernels } => {
                let mut out = Tensor::zeros(kernels.len() * x.channels, x.height, x.width);
                for (s, k) in kernels.iter().enumerate() {
                    for c in 0..x.channels {
                        let blurred = blur_plane(x.plane(c), x.height, x.width, k);
                        out.plane_mut(s * x.channels + c).copy_from_slice(&blurred);
                    }
                }
                out
            }
        }
    }

    /// Pulls a cotangent on `forward(x)` back onto `x`.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Tensor {
        match self {
            Self::Identity => grad_out.clone(),
            Self::RandomConv { geometry, weight, bias } => {
                let y = conv2d_forward(x, weight, bias, geometry);
                let mut g = grad_out.clone();
                for (gv, yv) in g.data.iter_mut().zip(&y.data) {
                    let t = yv.tanh();
                    *gv *= 1.0 - t * t;
                }
                conv2d_backward(x, weight, &g, geometry).0
            }
            Self::Pyramid { kernels } => {
                let mut dx = Tensor::zeros(x.channels, x.height, x.width);
                for (s, k) in kernels.iter().enumerate() {
                    for c in 0..x.channels {
                        let back = blur_plane_transpose(grad_out.plane(s * x.channels + c), x.height, x.width, k);
                        for (d, b) in dx.plane_mut(c).iter_mut().zip(back) {
                            *d += b;
                        }
                    }
                }
                dx
            }
        }
    }
}

#[inline]
fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

// separable blur with clamp-to-edge borders
fn blur_plane(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    if k.len() == 1 {
        return src.iter().map(|v| v * k[0]).collect();
    }
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[y * w + clamp_idx(x as i64 + j as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp_idx(y as i64 + j as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn blur_plane_transpose(g: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    if k.len() == 1 {
        return g.iter().map(|v| v * k[0]).collect();
    }
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let gv = g[y * w + x];
            for (j, kv) in k.iter().enumerate() {
                tmp[clamp_idx(y as i64 + j as i64 - r, h) * w + x] += kv * gv;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let tv = tmp[y * w + x];
            for (j, kv) in k.iter().enumerate() {
                out[y * w + clamp_idx(x as i64 + j as i64 - r, w)] += kv * tv;
            }
        }
    }
    out
}
