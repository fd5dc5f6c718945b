//! Dense `C×H×W` f64 buffers and the convolution / resampling kernels shared
//! by the losses, the feature extractors and the autodiff tape.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dims(format!(
                "tensor {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Stack the channels of `parts` (all with equal spatial size).
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidValue("concat of zero tensors".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::dims("concat needs equal spatial size"));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    /// Channel range `[start, start + count)`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Tensor {
        let n = self.plane_len();
        Tensor {
            channels: count,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + count) * n].to_vec(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Output spatial size of a square-kernel convolution.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Geometry of a 2-D convolution. Weights are laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    // valid output range [lo, hi) for kernel offset k along an axis of `size`
    fn valid_range(&self, k: usize, size: usize, out_size: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        let lo = ((p - k).max(0) + s - 1) / s;
        let hi_incl = (size as isize - 1 + p - k).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out_size as isize);
        (lo.min(hi) as usize, hi as usize)
    }
}

pub fn conv2d_forward(input: &Tensor, weight: &[f64], bias: &[f64], g: &ConvGeometry) -> Tensor {
    assert_eq!(input.channels, g.in_channels, "conv input channels");
    assert_eq!(weight.len(), g.weight_len(), "conv weight length");
    assert_eq!(bias.len(), g.out_channels, "conv bias length");
    let (h, w) = (input.height, input.width);
    let oh = conv_output_size(h, g.kernel, g.stride, g.pad);
    let ow = conv_output_size(w, g.kernel, g.stride, g.pad);
    let kk = g.kernel * g.kernel;
    let mut out = Tensor::zeros(g.out_channels, oh, ow);
    out.data.par_chunks_mut(oh * ow).enumerate().for_each(|(oc, plane)| {
        plane.fill(bias[oc]);
        for ic in 0..g.in_channels {
            let src = input.plane(ic);
            let wbase = (oc * g.in_channels + ic) * kk;
            for ky in 0..g.kernel {
                let (y0, y1) = g.valid_range(ky, h, oh);
                for kx in 0..g.kernel {
                    let wv = weight[wbase + ky * g.kernel + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.valid_range(kx, w, ow);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let srow = &src[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let off = kx as isize - g.pad as isize;
                            let s0 = (x0 as isize + off) as usize;
                            for (o, i) in orow[x0..x1].iter_mut().zip(&srow[s0..s0 + (x1 - x0)]) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in x0..x1 {
                                orow[ox] += wv * srow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    g: &ConvGeometry,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (grad_out.height, grad_out.width);
    let kk = g.kernel * g.kernel;

    let mut d_input = Tensor::zeros(g.in_channels, h, w);
    d_input.data.par_chunks_mut(h * w).enumerate().for_each(|(ic, dplane)| {
        for oc in 0..g.out_channels {
            let gplane = grad_out.plane(oc);
            let wbase = (oc * g.in_channels + ic) * kk;
            for ky in 0..g.kernel {
                let (y0, y1) = g.valid_range(ky, h, oh);
                for kx in 0..g.kernel {
                    let wv = weight[wbase + ky * g.kernel + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.valid_range(kx, w, ow);
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        let drow = &mut dplane[iy * w..(iy + 1) * w];
                        for ox in x0..x1 {
                            drow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });

    let mut d_weight = vec![0.0; g.weight_len()];
    d_weight
        .par_chunks_mut(g.in_channels * kk)
        .enumerate()
        .for_each(|(oc, dw)| {
            let gplane = grad_out.plane(oc);
            for ic in 0..g.in_channels {
                let src = input.plane(ic);
                for ky in 0..g.kernel {
                    let (y0, y1) = g.valid_range(ky, h, oh);
                    for kx in 0..g.kernel {
                        let (x0, x1) = g.valid_range(kx, w, ow);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let srow = &src[iy * w..(iy + 1) * w];
                            for ox in x0..x1 {
                                acc += grow[ox] * srow[ox * g.stride + kx - g.pad];
                            }
                        }
                        dw[ic * kk + ky * g.kernel + kx] = acc;
                    }
                }
            }
        });

    let d_bias = (0..g.out_channels).map(|oc| grad_out.plane(oc).iter().sum()).collect();
    (d_input, d_weight, d_bias)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Tensor {
    let (h, w) = (input.height * factor, input.width * factor);
    let mut out = Tensor::zeros(input.channels, h, w);
    for c in 0..input.channels {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            let sy = y / factor;
            for x in 0..w {
                dst[y * w + x] = src[sy * input.width + x / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(grad_out: &Tensor, factor: usize) -> Tensor {
    let (h, w) = (grad_out.height / factor, grad_out.width / factor);
    let mut out = Tensor::zeros(grad_out.channels, h, w);
    for c in 0..grad_out.channels {
        let src = grad_out.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..grad_out.height {
            for x in 0..grad_out.width {
                dst[(y / factor) * w + x / factor] += src[y * grad_out.width + x];
            }
        }
    }
    out
}

/// Bilinear resize under the align-corners convention: corner samples map to
/// corner samples, so affine fields are reproduced exactly.
pub fn resize_bilinear(input: &Tensor, height: usize, width: usize) -> Tensor {
    let mut out = Tensor::zeros(input.channels, height, width);
    let sy = if height > 1 {
        (input.height - 1) as f64 / (height - 1) as f64
    } else {
        0.0
    };
    let sx = if width > 1 {
        (input.width - 1) as f64 / (width - 1) as f64
    } else {
        0.0
    };
    for y in 0..height {
        let fy = y as f64 * sy;
        let y0 = (fy.floor() as usize).min(input.height - 1);
        let y1 = (y0 + 1).min(input.height - 1);
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = x as f64 * sx;
            let x0 = (fx.floor() as usize).min(input.width - 1);
            let x1 = (x0 + 1).min(input.width - 1);
            let tx = fx - x0 as f64;
            for c in 0..input.channels {
                let p = input.plane(c);
                let top = p[y0 * input.width + x0] * (1.0 - tx) + p[y0 * input.width + x1] * tx;
                let bot = p[y1 * input.width + x0] * (1.0 - tx) + p[y1 * input.width + x1] * tx;
                out.data[(c * height + y) * width + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// 2×2 box-filter downsampling (odd trailing rows/columns are dropped).
pub fn downsample_box2(input: &Tensor) -> Tensor {
    let (h, w) = (input.height / 2, input.width / 2);
    let mut out = Tensor::zeros(input.channels, h, w);
    for c in 0..input.channels {
        let src = input.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * input.width + 2 * x;
                dst[y * w + x] = 0.25 * (src[i] + src[i + 1] + src[i + input.width] + src[i + input.width + 1]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &Tensor, weight: &[f64], bias: &[f64], g: &ConvGeometry) -> Tensor {
        let oh = conv_output_size(input.height, g.kernel, g.stride, g.pad);
        let ow = conv_output_size(input.width, g.kernel, g.stride, g.pad);
        let mut out = Tensor::zeros(g.out_channels, oh, ow);
        for oc in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..g.in_channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= input.height as isize || ix >= input.width as isize {
                                    continue;
                                }
                                acc += weight[((oc * g.in_channels + ic) * g.kernel + ky) * g.kernel + kx]
                                    * input.at(ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, h, w) in &[(1usize, 5usize, 7usize), (2, 8, 8), (2, 7, 9)] {
            let g = ConvGeometry {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride,
                pad: 1,
            };
            let input = Tensor::from_vec(
                2,
                h,
                w,
                (0..2 * h * w).map(|i| ((i * 37) % 11) as f64 / 7.0 - 0.6).collect(),
            )
            .unwrap();
            let weight: Vec<f64> = (0..g.weight_len()).map(|i| ((i * 13) % 7) as f64 / 5.0 - 0.5).collect();
            let bias = vec![0.1, -0.2, 0.3];
            let fast = conv2d_forward(&input, &weight, &bias, &g);
            let slow = naive_conv(&input, &weight, &bias, &g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_reproduces_affine_fields() {
        let coarse = Tensor::from_vec(
            1,
            4,
            5,
            (0..20).map(|i| (i % 5) as f64 * 0.3 + (i / 5) as f64 * -0.7).collect(),
        )
        .unwrap();
        let fine = resize_bilinear(&coarse, 13, 9);
        let back = resize_bilinear(&fine, 4, 5);
        for (a, b) in coarse.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::from_vec(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = Tensor::from_vec(1, 4, 6, (0..24).map(|i| i as f64 * 0.1).collect()).unwrap();
        let lhs: f64 = upsample_nearest(&x, 2)
            .data
            .iter()
            .zip(&g.data)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data
            .iter()
            .zip(&upsample_nearest_backward(&g, 2).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
