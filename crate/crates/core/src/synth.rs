//! Procedural image pairs with exact ground-truth grids, masks, visibility
//! and keypoints.
//!
//! The target is rendered by warping the source with `G_st` (target lattice,
//! source coordinates) and then pasting solid occluders onto it.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::{norm_to_pixel, pixel_to_norm, ImageBuffer, Keypoint, KeypointSet, Mask, SamplingGrid};
use crate::warp;

pub const MIN_TEXTURE_SIZE: usize = 8;
pub const DEFAULT_KEYPOINTS: usize = 16;
pub const INVERSE_MAX_ITERS: usize = 50;
pub const INVERSE_TOLERANCE: f64 = 1e-5;
pub const MAX_DIVERGED_FRACTION: f64 = 0.2;
pub const MIN_AFFINE_DET: f64 = 1e-6;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

// --- textures ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    /// Gaussian splats of random colour over a mid-grey field.
    Blobs,
    /// Sum of value-noise octaves.
    ValueNoise,
    /// Two-colour square cells of random period, each cell's colour drawn
    /// independently, plus value noise.
    CheckerNoise,
}

impl TextureKind {
    pub const ALL: [TextureKind; 3] = [Self::Blobs, Self::ValueNoise, Self::CheckerNoise];
}

impl FromStr for TextureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "value_noise" => Ok(Self::ValueNoise),
            "checker_noise" => Ok(Self::CheckerNoise),
            _ => Err(Error::Unknown {
                kind: "texture",
                name: s.into(),
            }),
        }
    }
}

/// RGB texture, a pure function of its arguments.
pub fn generate_texture(height: usize, width: usize, kind: TextureKind, seed: u64) -> Result<ImageBuffer> {
    if height < MIN_TEXTURE_SIZE || width < MIN_TEXTURE_SIZE {
        return Err(Error::InvalidDimensions(format!(
            "texture {height}x{width} is below the {MIN_TEXTURE_SIZE}x{MIN_TEXTURE_SIZE} minimum"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = height * width;
    let mut data = vec![0f32; 3 * n];
    match kind {
        TextureKind::Blobs => blobs(&mut rng, height, width, &mut data),
        TextureKind::ValueNoise => {
            for c in 0..3 {
                let plane = value_noise(&mut rng, height, width, 4);
                data[c * n..(c + 1) * n].copy_from_slice(&plane);
            }
        }
        TextureKind::CheckerNoise => {
            let period = rng.random_range(4..=12) as usize;
            let a: [f32; 3] = rng.random();
            let b: [f32; 3] = rng.random();
            let (cw, ch) = (width.div_ceil(period), height.div_ceil(period));
            let cells: Vec<bool> = (0..cw * ch).map(|_| rng.random()).collect();
            for c in 0..3 {
                let noise = value_noise(&mut rng, height, width, 3);
                for y in 0..height {
                    for x in 0..width {
                        let base = if cells[(y / period) * cw + x / period] {
                            a[c]
                        } else {
                            b[c]
                        };
                        let v = 0.75 * base + 0.25 * noise[y * width + x];
                        data[c * n + y * width + x] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    ImageBuffer::new(3, height, width, data)
}

fn blobs(rng: &mut ChaCha8Rng, h: usize, w: usize, data: &mut [f32]) {
    let n = h * w;
    let side = h.max(w) as f64;
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
    let mut field: Vec<f64> = (0..3 * n).map(|i| bg[i / n]).collect();
    let count = 24 + (h * w) / 64;
    for _ in 0..count {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let sigma = rng.random_range(side / 24.0..side / 8.0).max(0.8);
        let color: [f64; 3] = rng.random();
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let a = (-d2 * inv).exp();
                if a < 1e-4 {
                    continue;
                }
                for (c, col) in color.iter().enumerate() {
                    let v = &mut field[c * n + y * w + x];
                    *v += a * (col - *v);
                }
            }
        }
    }
    for (d, f) in data.iter_mut().zip(field) {
        *d = f.clamp(0.0, 1.0) as f32;
    }
}

/// Octaves of smoothstep-interpolated lattice noise, normalised to `[0, 1]`.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, octaves: usize) -> Vec<f32> {
    let mut acc = vec![0f64; h * w];
    let mut amp = 1.0;
    let mut cell = (h.max(w) as f64 / 3.0).max(2.0);
    let mut total = 0.0;
    for _ in 0..octaves {
        let gw = (w as f64 / cell).ceil() as usize + 2;
        let gh = (h as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random()).collect();
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / cell, y as f64 / cell);
                let (i, j) = (u.floor() as usize, v.floor() as usize);
                let s = |t: f64| t * t * (3.0 - 2.0 * t);
                let (fx, fy) = (s(u - i as f64), s(v - j as f64));
                let at = |a: usize, b: usize| lattice[b * gw + a];
                let top = at(i, j) * (1.0 - fx) + at(i + 1, j) * fx;
                let bot = at(i, j + 1) * (1.0 - fx) + at(i + 1, j + 1) * fx;
                acc[y * w + x] += amp * (top * (1.0 - fy) + bot * fy);
            }
        }
        total += amp;
        amp *= 0.5;
        cell = (cell / 2.0).max(1.0);
    }
    acc.iter().map(|v| (v / total) as f32).collect()
}

// --- warps -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonrigidSpec {
    /// Number of control points, 4 to 9.
    pub control_points: usize,
    /// Largest control-point displacement, normalized units.
    pub magnitude: f64,
    /// Thin-plate regularization; larger is smoother.
    pub stiffness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarpSpec {
    /// Radians.
    pub rotation: f64,
    /// Per-axis factor.
    pub scale: [f64; 2],
    /// Normalized units.
    pub translation: [f64; 2],
    #[serde(default)]
    pub nonrigid: Option<NonrigidSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for WarpSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl WarpSpec {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            scale: [1.0, 1.0],
            translation: [0.0, 0.0],
            nonrigid: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidValue(m));
        if !self.rotation.is_finite() {
            return bad(format!("rotation {}", self.rotation));
        }
        if self.scale.iter().any(|s| !(0.5..=2.0).contains(s)) {
            return bad(format!("scale {:?} outside [0.5, 2]", self.scale));
        }
        if self.translation.iter().any(|t| t.is_nan() || t.abs() > 0.5) {
            return bad(format!("translation {:?} exceeds 0.5", self.translation));
        }
        if let Some(nr) = &self.nonrigid {
            if !(4..=9).contains(&nr.control_points) {
                return bad(format!("{} control points, need 4 to 9", nr.control_points));
            }
            if !(0.0..=0.3).contains(&nr.magnitude) {
                return bad(format!("nonrigid magnitude {} outside [0, 0.3]", nr.magnitude));
            }
            if !(nr.stiffness >= 0.0 && nr.stiffness.is_finite()) {
                return bad(format!("stiffness {}", nr.stiffness));
            }
        }
        Ok(())
    }
}

/// Ranges for drawing random warps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpRanges {
    /// Largest |rotation|, radians.
    pub max_rotation: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Largest |translation| per axis, normalized.
    pub max_translation: f64,
    /// Probability that a pair gets a nonrigid component.
    pub nonrigid_probability: f64,
    pub max_nonrigid_magnitude: f64,
    pub stiffness: f64,
}

impl Default for WarpRanges {
    fn default() -> Self {
        Self {
            max_rotation: 0.35,
            min_scale: 0.85,
            max_scale: 1.15,
            max_translation: 0.1,
            nonrigid_probability: 0.5,
            max_nonrigid_magnitude: 0.08,
            stiffness: 0.01,
        }
    }
}

impl WarpRanges {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> WarpSpec {
        let uni = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let iso = uni(rng, self.min_scale, self.max_scale);
        let aniso = uni(rng, -0.05, 0.05);
        let nonrigid = rng
            .random_bool(self.nonrigid_probability.clamp(0.0, 1.0))
            .then(|| NonrigidSpec {
                control_points: rng.random_range(4..=9),
                magnitude: uni(rng, 0.0, self.max_nonrigid_magnitude),
                stiffness: self.stiffness,
            });
        WarpSpec {
            rotation: uni(rng, -self.max_rotation, self.max_rotation),
            scale: [(iso + aniso).clamp(0.5, 2.0), (iso - aniso).clamp(0.5, 2.0)],
            translation: [
                uni(rng, -self.max_translation, self.max_translation),
                uni(rng, -self.max_translation, self.max_translation),
            ],
            nonrigid,
            seed: rng.random(),
        }
    }
}

/// Aspect-preserving frame: normalized coordinates scaled so one unit is the
/// same number of pixels on both axes.
#[derive(Debug, Clone, Copy)]
struct Frame {
    ax: f64,
    ay: f64,
}

impl Frame {
    fn new(h: usize, w: usize) -> Self {
        let r = (h.max(w) as f64 - 1.0) / 2.0;
        Self {
            ax: (w as f64 - 1.0) / 2.0 / r,
            ay: (h as f64 - 1.0) / 2.0 / r,
        }
    }
    /// Normalized to isotropic.
    fn iso(self, p: [f64; 2]) -> [f64; 2] {
        [p[0] * self.ax, p[1] * self.ay]
    }
    /// Isotropic back to normalized.
    fn unit(self, u: [f64; 2]) -> [f64; 2] {
        [u[0] / self.ax, u[1] / self.ay]
    }
}

/// `u ↦ M u + t` in the isotropic frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Affine {
    m: [[f64; 2]; 2],
    t: [f64; 2],
}

impl Affine {
    fn from_spec(spec: &WarpSpec, frame: &Frame) -> Self {
        let (s, c) = spec.rotation.sin_cos();
        let [sx, sy] = spec.scale;
        Self {
            m: [[c * sx, -s * sy], [s * sx, c * sy]],
            t: frame.iso(spec.translation),
        }
    }

    fn apply(&self, u: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * u[0] + self.m[0][1] * u[1] + self.t[0],
            self.m[1][0] * u[0] + self.m[1][1] * u[1] + self.t[1],
        ]
    }

    pub(crate) fn inverse(&self) -> Result<Self> {
        let det = self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0];
        if det.is_nan() || det.abs() < MIN_AFFINE_DET {
            return Err(Error::NonInvertible { det });
        }
        let inv = [
            [self.m[1][1] / det, -self.m[0][1] / det],
            [-self.m[1][0] / det, self.m[0][0] / det],
        ];
        let t = [
            -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
            -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
        ];
        Ok(Self { m: inv, t })
    }
}

/// Thin-plate displacement field `u ↦ D(u)` through seeded control points.
#[derive(Debug, Clone)]
struct ThinPlate {
    centers: Vec<[f64; 2]>,
    /// Per axis: `K` radial weights followed by `[a0, ax, ay]`.
    coef: [Vec<f64>; 2],
}

fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

impl ThinPlate {
    fn new(spec: &NonrigidSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = spec.control_points;
        let centers: Vec<[f64; 2]> = (0..k)
            .map(|_| [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)])
            .collect();
        let disp: Vec<[f64; 2]> = (0..k)
            .map(|_| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let r = spec.magnitude * rng.random::<f64>().sqrt();
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        let n = k + 3;
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..k {
            for j in 0..k {
                let d2 = (centers[i][0] - centers[j][0]).powi(2) + (centers[i][1] - centers[j][1]).powi(2);
                a[(i, j)] = tps_kernel(d2);
            }
            a[(i, i)] += spec.stiffness;
            let row = [1.0, centers[i][0], centers[i][1]];
            for (c, v) in row.iter().enumerate() {
                a[(i, k + c)] = *v;
                a[(k + c, i)] = *v;
            }
        }
        let lu = a.lu();
        let solve = |axis: usize| -> Result<Vec<f64>> {
            let mut b = DVector::<f64>::zeros(n);
            for i in 0..k {
                b[i] = disp[i][axis];
            }
            lu.solve(&b)
                .map(|x| x.iter().copied().collect())
                .ok_or(Error::NonInvertible { det: 0.0 })
        };
        Ok(Self {
            coef: [solve(0)?, solve(1)?],
            centers,
        })
    }

    fn displacement(&self, u: [f64; 2]) -> [f64; 2] {
        let k = self.centers.len();
        let mut out = [0.0; 2];
        for (axis, o) in out.iter_mut().enumerate() {
            let c = &self.coef[axis];
            *o = c[k] + c[k + 1] * u[0] + c[k + 2] * u[1];
        }
        for (i, ctr) in self.centers.iter().enumerate() {
            let phi = tps_kernel((u[0] - ctr[0]).powi(2) + (u[1] - ctr[1]).powi(2));
            out[0] += self.coef[0][i] * phi;
            out[1] += self.coef[1][i] * phi;
        }
        out
    }

    /// Solves `v + D(v) = u` by fixed-point iteration.
    fn invert(&self, u: [f64; 2]) -> Option<[f64; 2]> {
        let mut v = u;
        for _ in 0..INVERSE_MAX_ITERS {
            let d = self.displacement(v);
            let next = [u[0] - d[0], u[1] - d[1]];
            let step = (next[0] - v[0]).hypot(next[1] - v[1]);
            v = next;
            if !(v[0].is_finite() && v[1].is_finite()) {
                return None;
            }
            if step < INVERSE_TOLERANCE {
                return Some(v);
            }
        }
        None
    }
}

/// Forward map `target → source` as `A(v + D(v))` in the isotropic frame.
struct WarpMap {
    frame: Frame,
    affine: Affine,
    inverse: Affine,
    tps: Option<ThinPlate>,
}

impl WarpMap {
    fn new(spec: &WarpSpec, h: usize, w: usize) -> Result<Self> {
        spec.validate()?;
        let frame = Frame::new(h, w);
        let affine = Affine::from_spec(spec, &frame);
        let tps = spec
            .nonrigid
            .as_ref()
            .map(|nr| ThinPlate::new(nr, spec.seed))
            .transpose()?;
        Ok(Self {
            frame,
            inverse: affine.inverse()?,
            affine,
            tps,
        })
    }

    fn forward(&self, p: [f64; 2]) -> [f64; 2] {
        let mut u = self.frame.iso(p);
        if let Some(t) = &self.tps {
            let d = t.displacement(u);
            u = [u[0] + d[0], u[1] + d[1]];
        }
        self.frame.unit(self.affine.apply(u))
    }

    fn backward(&self, q: [f64; 2]) -> Option<[f64; 2]> {
        let u = self.inverse.apply(self.frame.iso(q));
        let v = match &self.tps {
            Some(t) => t.invert(u)?,
            None => u,
        };
        Some(self.frame.unit(v))
    }
}

/// Ground-truth grids and the pixels of `G_ts` whose inversion diverged.
#[derive(Debug, Clone)]
pub struct WarpGrids {
    pub grid_st: SamplingGrid,
    pub grid_ts: SamplingGrid,
    /// Source-lattice pixels where the inverse did not converge.
    pub diverged: Mask,
}

/// `G_st` is the warp applied to the canonical grid; `G_ts` is its inverse.
pub fn grids_from_warp(spec: &WarpSpec, height: usize, width: usize) -> Result<WarpGrids> {
    if height < 2 || width < 2 {
        return Err(Error::InvalidDimensions(format!("grid {height}x{width}")));
    }
    let map = WarpMap::new(spec, height, width)?;
    let n = height * width;
    let mut st = vec![0f32; 2 * n];
    let mut ts = vec![0f32; 2 * n];
    let mut diverged = vec![false; n];
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            let p = [pixel_to_norm(c as f64, width), pixel_to_norm(r as f64, height)];
            let f = map.forward(p);
            st[i] = f[0] as f32;
            st[n + i] = f[1] as f32;
            let b = map.backward(p).unwrap_or_else(|| {
                diverged[i] = true;
                [warp::OUT_OF_RANGE_SENTINEL as f64; 2]
            });
            ts[i] = b[0] as f32;
            ts[n + i] = b[1] as f32;
        }
    }
    let frac = diverged.iter().filter(|&&d| d).count() as f64 / n as f64;
    if frac > MAX_DIVERGED_FRACTION {
        return Err(Error::InversionDiverged { fraction: frac });
    }
    Ok(WarpGrids {
        grid_st: SamplingGrid::new(height, width, st)?,
        grid_ts: SamplingGrid::new(height, width, ts)?,
        diverged: Mask::new(height, width, diverged)?,
    })
}

// --- pairs -------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub image_s: ImageBuffer,
    pub image_t: ImageBuffer,
    pub mask_s: Mask,
    pub mask_t: Mask,
    pub grid_st: SamplingGrid,
    pub grid_ts: SamplingGrid,
    pub vis_s: Mask,
    pub vis_t: Mask,
    /// Occluder footprint on the target lattice.
    pub occluders: Mask,
    pub keypoints: KeypointSet,
    pub seed: u64,
}

fn sample_mask_nearest(mask: &Mask, x: f64, y: f64) -> bool {
    let (c, r) = (x.round(), y.round());
    r >= 0.0
        && c >= 0.0
        && (r as usize) < mask.height()
        && (c as usize) < mask.width()
        && mask.get(r as usize, c as usize)
}

/// Object mask: a random ellipse around the centre.
fn object_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let cx = (w as f64 - 1.0) * rng.random_range(0.42..0.58);
    let cy = (h as f64 - 1.0) * rng.random_range(0.42..0.58);
    let rx = w as f64 * rng.random_range(0.28..0.4);
    let ry = h as f64 * rng.random_range(0.28..0.4);
    let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = th.sin_cos();
    Mask::from_fn(h, w, |r, col| {
        let (dx, dy) = (col as f64 - cx, r as f64 - cy);
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
    })
}

/// Occluder footprint covering about `fraction` of `region`; shapes that
/// would overshoot are rejected.
fn occluder_mask(rng: &mut ChaCha8Rng, region: &Mask, fraction: f64) -> (Mask, Vec<([f32; 3], Mask)>) {
    let (h, w) = (region.height(), region.width());
    let mut occ = Mask::empty(h, w);
    let mut shapes = Vec::new();
    let total = region.count();
    if fraction <= 0.0 || total == 0 {
        return (occ, shapes);
    }
    let target = fraction * total as f64;
    let slack = 0.03 * total as f64;
    let members: Vec<usize> = (0..h * w).filter(|&i| region.data()[i]).collect();
    let base = (target / 3.0).sqrt().max(1.5);
    let mut covered = 0usize;
    for _ in 0..2000 {
        if covered as f64 >= target - slack {
            break;
        }
        let centre = members[rng.random_range(0..members.len())];
        let (cy, cx) = ((centre / w) as f64, (centre % w) as f64);
        let (rx, ry) = (base * rng.random_range(0.3..1.0), base * rng.random_range(0.3..1.0));
        let ellipse = rng.random_bool(0.5);
        let shape = Mask::from_fn(h, w, |r, c| {
            let (dx, dy) = ((c as f64 - cx) / rx, (r as f64 - cy) / ry);
            if ellipse {
                dx * dx + dy * dy <= 1.0
            } else {
                dx.abs() <= 1.0 && dy.abs() <= 1.0
            }
        });
        let merged = Mask::new(
            h,
            w,
            occ.data().iter().zip(shape.data()).map(|(a, b)| *a || *b).collect(),
        )
        .expect("same size");
        let now = merged.and(region).count();
        if now == covered || now as f64 > target + slack {
            continue;
        }
        covered = now;
        occ = merged;
        shapes.push((rng.random(), shape));
    }
    (occ, shapes)
}

/// One synthetic pair from a texture and a warp.
pub fn make_pair(texture: &ImageBuffer, spec: &WarpSpec, occlusion_fraction: f64, seed: u64) -> Result<SyntheticPair> {
    make_pair_with(texture, spec, occlusion_fraction, DEFAULT_KEYPOINTS, seed)
}

pub fn make_pair_with(
    texture: &ImageBuffer,
    spec: &WarpSpec,
    occlusion_fraction: f64,
    keypoints: usize,
    seed: u64,
) -> Result<SyntheticPair> {
    if !(0.0..=0.5).contains(&occlusion_fraction) {
        return Err(Error::InvalidValue(format!(
            "occlusion fraction {occlusion_fraction} outside [0, 0.5]"
        )));
    }
    let (h, w) = (texture.height(), texture.width());
    let grids = grids_from_warp(spec, h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mask_s = object_mask(&mut rng, h, w);
    let warped_mask = warp::sample(&mask_s.to_tensor(), &grids.grid_st.to_tensor())?;
    let mask_t = Mask::new(h, w, warped_mask.data.iter().map(|&v| v > 0.5).collect())?;
    let in_range = |g: &SamplingGrid| Mask::from_fn(h, w, |r, c| g.in_range(r, c));
    let st_range = in_range(&grids.grid_st);
    let (occluders, shapes) = occluder_mask(&mut rng, &mask_t.and(&st_range), occlusion_fraction);

    let mut target = warp::sample(&texture.to_tensor(), &grids.grid_st.to_tensor())?;
    let n = h * w;
    for (color, shape) in &shapes {
        for (i, _) in shape.data().iter().enumerate().filter(|(_, &m)| m) {
            for (c, v) in color.iter().enumerate().take(target.channels) {
                target.data[c * n + i] = *v as f64;
            }
        }
    }
    let vis_t = mask_t.and(&st_range).and_not(&occluders);
    let vis_s = Mask::from_fn(h, w, |r, c| {
        if !mask_s.get(r, c) || grids.diverged.get(r, c) || !grids.grid_ts.in_range(r, c) {
            return false;
        }
        let x = norm_to_pixel(grids.grid_ts.x(r, c) as f64, w);
        let y = norm_to_pixel(grids.grid_ts.y(r, c) as f64, h);
        !sample_mask_nearest(&occluders, x, y)
    });

    let visible: Vec<usize> = (0..n).filter(|&i| vis_s.data()[i]).collect();
    let picks = sample_indices(&mut rng, visible.len(), keypoints.min(visible.len()));
    let points = picks
        .iter()
        .map(|k| {
            let i = visible[k];
            let (r, c) = (i / w, i % w);
            Keypoint {
                x_src: c as f32,
                y_src: r as f32,
                x_tgt: norm_to_pixel(grids.grid_ts.x(r, c) as f64, w) as f32,
                y_tgt: norm_to_pixel(grids.grid_ts.y(r, c) as f64, h) as f32,
                visible: true,
            }
        })
        .collect();

    Ok(SyntheticPair {
        image_s: texture.clone(),
        image_t: ImageBuffer::from_tensor(&target),
        mask_s,
        mask_t,
        grid_st: grids.grid_st,
        grid_ts: grids.grid_ts,
        vis_s,
        vis_t,
        occluders,
        keypoints: KeypointSet::new(points),
        seed,
    })
}

// --- datasets ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub textures: Vec<TextureKind>,
    pub warp: WarpRanges,
    pub occlusion_fraction: f64,
    pub keypoints: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            textures: TextureKind::ALL.to_vec(),
            warp: WarpRanges::default(),
            occlusion_fraction: 0.0,
            keypoints: DEFAULT_KEYPOINTS,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_TEXTURE_SIZE || self.width < MIN_TEXTURE_SIZE {
            return Err(Error::InvalidDimensions(format!("{}x{}", self.height, self.width)));
        }
        if self.textures.is_empty() {
            return Err(Error::InvalidValue("no texture kinds".into()));
        }
        if !(0.0..=0.5).contains(&self.occlusion_fraction) {
            return Err(Error::InvalidValue(format!(
                "occlusion fraction {}",
                self.occlusion_fraction
            )));
        }
        Ok(())
    }
}

/// Everything needed to rebuild one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    pub texture: TextureKind,
    pub texture_seed: u64,
    pub spec: WarpSpec,
    pub occlusion_fraction: f64,
    pub keypoints: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub config: SynthConfig,
    pub pairs: Vec<PairRecord>,
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::Io(e),
        })?;
        let m: Manifest = serde_json::from_slice(&bytes)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion(m.version));
        }
        Ok(m)
    }
}

/// Draws the pair records of a dataset without rendering anything.
pub fn plan_dataset(count: usize, config: &SynthConfig) -> Result<Manifest> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pairs = (0..count)
        .map(|i| PairRecord {
            id: format!("{i:05}"),
            texture: config.textures[rng.random_range(0..config.textures.len())],
            texture_seed: rng.random(),
            spec: config.warp.sample(&mut rng),
            occlusion_fraction: config.occlusion_fraction,
            keypoints: config.keypoints,
            seed: rng.random(),
        })
        .collect();
    Ok(Manifest {
        version: MANIFEST_VERSION,
        height: config.height,
        width: config.width,
        config: config.clone(),
        pairs,
    })
}

pub fn render_record(record: &PairRecord, height: usize, width: usize) -> Result<SyntheticPair> {
    let texture = generate_texture(height, width, record.texture, record.texture_seed)?;
    make_pair_with(
        &texture,
        &record.spec,
        record.occlusion_fraction,
        record.keypoints,
        record.seed,
    )
}

/// File paths of one stored pair.
#[derive(Debug, Clone)]
pub struct PairPaths {
    pub image_s: PathBuf,
    pub image_t: PathBuf,
    pub mask_s: PathBuf,
    pub mask_t: PathBuf,
    pub vis_s: PathBuf,
    pub vis_t: PathBuf,
    pub occluders: PathBuf,
    pub grid_st: PathBuf,
    pub grid_ts: PathBuf,
    pub keypoints: PathBuf,
}

impl PairPaths {
    pub fn new(dir: impl AsRef<Path>, id: &str) -> Self {
        let f = |suffix: &str| dir.as_ref().join(format!("{id}_{suffix}"));
        Self {
            image_s: f("src.png"),
            image_t: f("tgt.png"),
            mask_s: f("mask_s.png"),
            mask_t: f("mask_t.png"),
            vis_s: f("vis_s.png"),
            vis_t: f("vis_t.png"),
            occluders: f("occ.png"),
            grid_st: f("gst.wgrd"),
            grid_ts: f("gts.wgrd"),
            keypoints: f("kps.json"),
        }
    }
}

impl SyntheticPair {
    pub fn save(&self, dir: impl AsRef<Path>, id: &str) -> Result<()> {
        let p = PairPaths::new(dir, id);
        self.image_s.save_png(&p.image_s, 16)?;
        self.image_t.save_png(&p.image_t, 16)?;
        self.mask_s.save_png(&p.mask_s)?;
        self.mask_t.save_png(&p.mask_t)?;
        self.vis_s.save_png(&p.vis_s)?;
        self.vis_t.save_png(&p.vis_t)?;
        self.occluders.save_png(&p.occluders)?;
        self.grid_st.save(&p.grid_st)?;
        self.grid_ts.save(&p.grid_ts)?;
        self.keypoints.save_json(&p.keypoints)
    }

    /// Reads a stored pair. Images come back quantized to 16 bits.
    pub fn load(dir: impl AsRef<Path>, id: &str, seed: u64) -> Result<Self> {
        let p = PairPaths::new(dir, id);
        Ok(Self {
            image_s: ImageBuffer::load_png(&p.image_s)?,
            image_t: ImageBuffer::load_png(&p.image_t)?,
            mask_s: Mask::load_png(&p.mask_s)?,
            mask_t: Mask::load_png(&p.mask_t)?,
            vis_s: Mask::load_png(&p.vis_s)?,
            vis_t: Mask::load_png(&p.vis_t)?,
            occluders: Mask::load_png(&p.occluders)?,
            grid_st: SamplingGrid::load(&p.grid_st)?,
            grid_ts: SamplingGrid::load(&p.grid_ts)?,
            keypoints: KeypointSet::load_json(&p.keypoints)?,
            seed,
        })
    }
}

/// Renders and writes every pair of `manifest` plus the manifest itself.
pub fn write_dataset(manifest: &Manifest, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    for record in &manifest.pairs {
        render_record(record, manifest.height, manifest.width)?.save(dir, &record.id)?;
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

/// Plans, renders and writes `count` pairs. With `count = 0` only an empty
/// manifest is written.
pub fn generate_dataset(count: usize, config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let manifest = plan_dataset(count, config)?;
    write_dataset(&manifest, out_dir)?;
    Ok(manifest)
}

/// Rebuilds a dataset from a manifest in another directory.
pub fn regenerate(manifest_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let manifest = Manifest::load(manifest_dir)?;
    write_dataset(&manifest, out_dir)?;
    Ok(manifest)
}

/// Loads every pair listed in a dataset directory's manifest.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<SyntheticPair>)> {
    let manifest = Manifest::load(&dir)?;
    let pairs = manifest
        .pairs
        .iter()
        .map(|r| SyntheticPair::load(&dir, &r.id, r.seed))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, pairs))
}
