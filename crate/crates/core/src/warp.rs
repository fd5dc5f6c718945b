//! Bilinear warping `W(I, G)` with zero padding under the align-corners
//! convention, its analytic reverse pass, and grid composition.
//!
//! Padding is per tap: a neighbour outside the image reads as zero, so
//! samples straddling the border fade out and samples one pixel or more
//! outside read exactly zero.

use crate::error::{Error, Result};
use crate::imagery::{norm_to_pixel, ImageBuffer, SamplingGrid};
use crate::tensor::Tensor;

/// Sample positions closer than this (in pixels) to an integer coordinate are
/// snapped onto it, so that the identity grid reproduces images exactly even
/// though its f32 coordinates carry rounding error.
pub const SNAP_EPS_PX: f64 = 1e-5;

/// Coordinate written by [`compose_grids`] where the second grid leaves `[-1, 1]`.
pub const OUT_OF_RANGE_SENTINEL: f32 = 2.0;

/// The four bilinear taps of one sample point.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub valid: [bool; 4],
    /// Weight derivatives with respect to the normalized x / y coordinate.
    pub dw_dx: [f64; 4],
    pub dw_dy: [f64; 4],
}

impl Taps {
    const NONE: Taps = Taps {
        index: [0; 4],
        weight: [0.0; 4],
        valid: [false; 4],
        dw_dx: [0.0; 4],
        dw_dy: [0.0; 4],
    };

    #[inline]
    pub fn sample(&self, plane: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..4 {
            if self.valid[k] {
                acc += self.weight[k] * plane[self.index[k]];
            }
        }
        acc
    }

    /// `(d/dx, d/dy)` of the sampled value with respect to the normalized coordinate.
    #[inline]
    pub fn slope(&self, plane: &[f64]) -> (f64, f64) {
        let (mut gx, mut gy) = (0.0, 0.0);
        for k in 0..4 {
            if self.valid[k] {
                let v = plane[self.index[k]];
                gx += self.dw_dx[k] * v;
                gy += self.dw_dy[k] * v;
            }
        }
        (gx, gy)
    }
}

#[inline]
fn snap(p: f64) -> f64 {
    let r = p.round();
    if (p - r).abs() < SNAP_EPS_PX {
        r
    } else {
        p
    }
}

/// Taps for normalized coordinate `(xn, yn)` on an `height × width` image.
pub fn taps(xn: f64, yn: f64, height: usize, width: usize) -> Taps {
    let px = snap(norm_to_pixel(xn, width));
    let py = snap(norm_to_pixel(yn, height));
    if !(px.is_finite() && py.is_finite()) || px.abs() > 1e7 || py.abs() > 1e7 {
        return Taps::NONE;
    }
    // a sample exactly on the last row/column uses the cell that lies inside,
    // so the derivative there is one-sided towards the interior
    let cell = |p: f64, n: usize| {
        let f = p.floor();
        if p == n as f64 - 1.0 && n >= 2 {
            (f - 1.0, 1.0)
        } else {
            (f, p - f)
        }
    };
    let (fx0, fx) = cell(px, width);
    let (fy0, fy) = cell(py, height);
    let (x0, y0) = (fx0 as i64, fy0 as i64);
    let sx = 0.5 * (width as f64 - 1.0);
    let sy = 0.5 * (height as f64 - 1.0);
    let corners = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)];
    let weight = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
    let dw_dx = [-(1.0 - fy) * sx, (1.0 - fy) * sx, -fy * sx, fy * sx];
    let dw_dy = [-(1.0 - fx) * sy, -fx * sy, (1.0 - fx) * sy, fx * sy];
    let mut t = Taps {
        index: [0; 4],
        weight,
        valid: [false; 4],
        dw_dx,
        dw_dy,
    };
    for (k, &(x, y)) in corners.iter().enumerate() {
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            t.valid[k] = true;
            t.index[k] = y as usize * width + x as usize;
        }
    }
    t
}

fn check_grid(grid: &Tensor) -> Result<()> {
    if grid.channels != 2 {
        return Err(Error::dims(format!("grid needs 2 channels, got {}", grid.channels)));
    }
    Ok(())
}

/// Tensor-level forward warp: output has the grid's spatial size.
pub fn sample(image: &Tensor, grid: &Tensor) -> Result<Tensor> {
    check_grid(grid)?;
    if image.data.is_empty() {
        return Err(Error::InvalidDimensions("empty image".into()));
    }
    let n = grid.plane_len();
    let mut out = Tensor::zeros(image.channels, grid.height, grid.width);
    let (gx, gy) = (grid.plane(0), grid.plane(1));
    for p in 0..n {
        let t = taps(gx[p], gy[p], image.height, image.width);
        for c in 0..image.channels {
            out.data[c * n + p] = t.sample(image.plane(c));
        }
    }
    Ok(out)
}

/// Tensor-level reverse pass: returns `(d_image, d_grid)` for the given
/// output cotangent.
pub fn sample_backward(image: &Tensor, grid: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    check_grid(grid)?;
    if upstream.shape() != (image.channels, grid.height, grid.width) {
        return Err(Error::dims(format!(
            "upstream {:?} vs expected {:?}",
            upstream.shape(),
            (image.channels, grid.height, grid.width)
        )));
    }
    let n = grid.plane_len();
    let mut d_image = Tensor::zeros(image.channels, image.height, image.width);
    let mut d_grid = Tensor::zeros(2, grid.height, grid.width);
    let (gx, gy) = (grid.plane(0), grid.plane(1));
    let in_n = image.plane_len();
    for p in 0..n {
        let t = taps(gx[p], gy[p], image.height, image.width);
        let (mut ax, mut ay) = (0.0, 0.0);
        for c in 0..image.channels {
            let u = upstream.data[c * n + p];
            if u == 0.0 {
                continue;
            }
            let (sx, sy) = t.slope(image.plane(c));
            ax += u * sx;
            ay += u * sy;
            for k in 0..4 {
                if t.valid[k] {
                    d_image.data[c * in_n + t.index[k]] += t.weight[k] * u;
                }
            }
        }
        d_grid.data[p] = ax;
        d_grid.data[n + p] = ay;
    }
    Ok((d_image, d_grid))
}

/// `W(image, grid)`: output takes the grid's size.
pub fn bilinear_sample(image: &ImageBuffer, grid: &SamplingGrid) -> Result<ImageBuffer> {
    Ok(ImageBuffer::from_tensor(&sample(
        &image.to_tensor(),
        &grid.to_tensor(),
    )?))
}

/// As [`bilinear_sample`], but checks the grid against a requested output size.
pub fn bilinear_sample_to(
    image: &ImageBuffer,
    grid: &SamplingGrid,
    height: usize,
    width: usize,
) -> Result<ImageBuffer> {
    if (grid.height(), grid.width()) != (height, width) {
        return Err(Error::dims(format!(
            "requested {height}x{width} output from a {}x{} grid",
            grid.height(),
            grid.width()
        )));
    }
    bilinear_sample(image, grid)
}

/// Reverse-mode derivatives of one warp contracted with an output cotangent.
#[derive(Debug, Clone)]
pub struct WarpGradients {
    /// `2×H×W`: sensitivity of the contracted output to each grid coordinate,
    /// summed over channels.
    pub d_grid: Tensor,
    /// `C×H_in×W_in`: cotangent pulled back onto the source image.
    pub d_image: Tensor,
    /// Per output pixel, the in-bounds source pixels it reads and their weights.
    pub contributions: Vec<Vec<(usize, f64)>>,
}

pub fn bilinear_sample_backward(image: &ImageBuffer, grid: &SamplingGrid, upstream: &Tensor) -> Result<WarpGradients> {
    let (img, g) = (image.to_tensor(), grid.to_tensor());
    let (d_image, d_grid) = sample_backward(&img, &g, upstream)?;
    let contributions = (0..grid.height() * grid.width())
        .map(|p| {
            let t = taps(g.data[p], g.data[g.plane_len() + p], image.height(), image.width());
            (0..4)
                .filter(|&k| t.valid[k])
                .map(|k| (t.index[k], t.weight[k]))
                .collect()
        })
        .collect();
    Ok(WarpGradients {
        d_grid,
        d_image,
        contributions,
    })
}

/// Samples `first`'s coordinate planes with `second`: the grid-level
/// counterpart of warping by `first` and then by `second`. Where `second`
/// leaves `[-1, 1]` the result is the sentinel `(2, 2)`.
pub fn compose_grids(first: &SamplingGrid, second: &SamplingGrid) -> Result<SamplingGrid> {
    if (first.height(), first.width()) != (second.height(), second.width()) {
        return Err(Error::dims(format!(
            "compose {}x{} with {}x{}",
            first.height(),
            first.width(),
            second.height(),
            second.width()
        )));
    }
    let mut out = sample(&first.to_tensor(), &second.to_tensor())?;
    let n = out.plane_len();
    for r in 0..second.height() {
        for c in 0..second.width() {
            if !second.in_range(r, c) {
                let p = r * second.width() + c;
                out.data[p] = OUT_OF_RANGE_SENTINEL as f64;
                out.data[n + p] = OUT_OF_RANGE_SENTINEL as f64;
            }
        }
    }
    SamplingGrid::from_tensor(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagery::identity_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::new(c, h, w, (0..c * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn identity_grid_reproduces_image_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w) in [(2, 2), (5, 7), (64, 64), (31, 17)] {
            let img = random_image(&mut rng, 3, h, w);
            let out = bilinear_sample(&img, &identity_grid(h, w).unwrap()).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn constant_corner_grid_reads_top_left() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 2, 4, 5);
        let g = SamplingGrid::new(3, 3, vec![-1.0; 18]).unwrap();
        let out = bilinear_sample(&img, &g).unwrap();
        for c in 0..2 {
            assert!(out.plane(c).iter().all(|&v| v == img.get(c, 0, 0)));
        }
    }

    #[test]
    fn center_of_two_by_two_averages() {
        let t = Tensor::from_vec(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let g = Tensor::from_vec(2, 2, 3, vec![0.0; 12]).unwrap();
        let out = sample(&t, &g).unwrap();
        assert!(out.data.iter().all(|&v| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn far_out_of_range_reads_zero_with_zero_gradient() {
        let t = Tensor::filled(1, 4, 4, 0.7);
        let g = Tensor::from_vec(2, 1, 2, vec![1.8, -3.0, 0.0, 0.0]).unwrap();
        let out = sample(&t, &g).unwrap();
        assert_eq!(out.data, vec![0.0, 0.0]);
        let (di, dg) = sample_backward(&t, &g, &Tensor::filled(1, 1, 2, 1.0)).unwrap();
        assert!(dg.data.iter().all(|&v| v == 0.0));
        assert!(di.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 3, 6, 6);
        let g = identity_grid(6, 6).unwrap();
        let wg = bilinear_sample_backward(&img, &g, &Tensor::zeros(3, 6, 6)).unwrap();
        assert!(wg.d_grid.data.iter().all(|&v| v == 0.0));
        assert!(wg.d_image.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_a_pixel_past_the_last_column_fades_to_zero() {
        let plane = vec![1.0; 4 * 4];
        let xn = crate::imagery::pixel_to_norm(3.5, 4);
        let t = taps(xn, 0.0, 4, 4);
        assert!((t.sample(&plane) - 0.5).abs() < 1e-12);
        let t = taps(1.0, 0.0, 4, 4);
        assert!((t.sample(&plane) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_image_has_no_grid_gradient() {
        let img = ImageBuffer::new(1, 6, 6, vec![0.4; 36]).unwrap();
        let g = identity_grid(6, 6).unwrap();
        let wg = bilinear_sample_backward(&img, &g, &Tensor::filled(1, 6, 6, 1.0)).unwrap();
        assert!(wg.d_grid.data.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn in_range_weights_partition_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..2000 {
            let (x, y) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
            let t = taps(x, y, 9, 13);
            let s: f64 = (0..4).filter(|&k| t.valid[k]).map(|k| t.weight[k]).sum();
            assert!((s - 1.0).abs() < 1e-12, "{x} {y} {s}");
            assert!(t.weight.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn requested_size_must_match_grid() {
        let img = ImageBuffer::zeros(1, 4, 4);
        let g = identity_grid(4, 4).unwrap();
        assert!(matches!(
            bilinear_sample_to(&img, &g, 4, 5),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(bilinear_sample_to(&img, &g, 4, 4).is_ok());
    }

    #[test]
    fn compose_with_identity_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let coords = (0..2 * 64).map(|_| rng.random_range(-1.2f32..1.2)).collect();
        let g = SamplingGrid::new(8, 8, coords).unwrap();
        let out = compose_grids(&g, &identity_grid(8, 8).unwrap()).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn composed_translations_add_in_interior() {
        let (h, w) = (16, 16);
        let shift = |d: f32| {
            let id = identity_grid(h, w).unwrap();
            let mut c = id.coords().to_vec();
            for v in &mut c[..h * w] {
                *v += d;
            }
            SamplingGrid::new(h, w, c).unwrap()
        };
        let out = compose_grids(&shift(0.1), &shift(0.1)).unwrap();
        let id = identity_grid(h, w).unwrap();
        for r in 0..h {
            // interior: both samples stay inside the image
            for c in 0..w - 3 {
                assert!((out.x(r, c) - id.x(r, c) - 0.2).abs() < 1e-5);
                assert!((out.y(r, c) - id.y(r, c)).abs() < 1e-6);
            }
            assert_eq!(out.x(r, w - 1), OUT_OF_RANGE_SENTINEL);
        }
    }

    proptest::proptest! {
        #[test]
        fn warp_is_linear_in_image(seed in 0u64..500, a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (6, 7);
            let i1 = Tensor::from_vec(2, h, w, (0..2 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap();
            let i2 = Tensor::from_vec(2, h, w, (0..2 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap();
            let g = Tensor::from_vec(2, 5, 4, (0..40).map(|_| rng.random_range(-1.3..1.3)).collect()).unwrap();
            let mut mix = i1.clone();
            for (m, (x, y)) in mix.data.iter_mut().zip(i1.data.iter().zip(&i2.data)) {
                *m = a * x + b * y;
            }
            let lhs = sample(&mix, &g).unwrap();
            let (o1, o2) = (sample(&i1, &g).unwrap(), sample(&i2, &g).unwrap());
            for k in 0..lhs.data.len() {
                proptest::prop_assert!((lhs.data[k] - (a * o1.data[k] + b * o2.data[k])).abs() < 1e-9);
            }
        }
    }
}
