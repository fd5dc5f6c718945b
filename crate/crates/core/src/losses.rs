//! Training objectives over a predicted bidirectional pair
//! `(Ĝ_st, Ĝ_ts, Ĉ_s, Ĉ_t)` with analytic gradients.
//!
//! Conventions:
//! * `Ĝ_st` lives on the target lattice and holds source coordinates, so
//!   `Î_{s→t} = W(I_s, Ĝ_st)` predicts the target; `Ĝ_ts` is the converse.
//! * Every reduction is a mean over the masked (or visible) pixels of the
//!   side it belongs to; two-sided losses add the two side means.
//! * All arithmetic is f64; gradients are returned as f64 tensors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::imagery::{pixel_to_norm, ConfidenceMap, ErrorMap, ImageBuffer, KeypointSet, Mask, SamplingGrid};
use crate::tensor::Tensor;
use crate::warp;

/// Loss coefficients and the optimizer learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub dense: f64,
    pub sparse: f64,
    pub reconstruction: f64,
    pub matching: f64,
    pub smooth: f64,
    pub uncertainty: f64,
    pub lambda_conf: f64,
    pub learning_rate: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dense: 10_000.0,
            sparse: 0.1,
            reconstruction: 100.0,
            matching: 2_000.0,
            smooth: 1_000.0,
            uncertainty: 0.01,
            lambda_conf: 0.1,
            learning_rate: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.dense,
            self.sparse,
            self.reconstruction,
            self.matching,
            self.smooth,
            self.uncertainty,
            self.lambda_conf,
            self.learning_rate,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidValue(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(dense, sparse, reconstruction, matching, smooth, uncertainty)`.
    pub fn coefficients(&self) -> [f64; 6] {
        [
            self.dense,
            self.sparse,
            self.reconstruction,
            self.matching,
            self.smooth,
            self.uncertainty,
        ]
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Dense => self.dense,
            LossTerm::Sparse => self.sparse,
            LossTerm::Reconstruction => self.reconstruction,
            LossTerm::Matching => self.matching,
            LossTerm::Smooth => self.smooth,
            LossTerm::Uncertainty => self.uncertainty,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Dense,
    Sparse,
    Reconstruction,
    Matching,
    Smooth,
    Uncertainty,
}

/// Quantities a loss can be differentiated with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Quantity {
    GridSt,
    GridTs,
    ConfS,
    ConfT,
    /// The single grid argument of a one-grid loss.
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFlag {
    EmptySourceMask,
    EmptyTargetMask,
    NoVisiblePixels,
    NoKeypoints,
}

#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub terms: BTreeMap<LossTerm, f64>,
    pub total: f64,
    pub grads: BTreeMap<Quantity, Tensor>,
    pub flags: Vec<LossFlag>,
}

impl LossReport {
    fn single(term: LossTerm, value: f64) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(term, value);
        Self {
            terms,
            total: value,
            ..Default::default()
        }
    }

    pub fn value(&self, term: LossTerm) -> Option<f64> {
        self.terms.get(&term).copied()
    }

    pub fn grad(&self, q: Quantity) -> Option<&Tensor> {
        self.grads.get(&q)
    }

    fn add_grad(&mut self, q: Quantity, g: &Tensor, scale: f64) {
        if scale == 0.0 {
            return;
        }
        let slot = self
            .grads
            .entry(q)
            .or_insert_with(|| Tensor::zeros(g.channels, g.height, g.width));
        for (a, b) in slot.data.iter_mut().zip(&g.data) {
            *a += scale * b;
        }
    }

    fn flag(&mut self, f: LossFlag) {
        if !self.flags.contains(&f) {
            self.flags.push(f);
        }
    }
}

/// The four stages of the progressive schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Dense supervision on synthetic pairs (+ smoothness).
    #[serde(rename = "i")]
    Dense,
    /// Adds keypoint supervision.
    #[serde(rename = "ii")]
    Sparse,
    /// Adds matching and reconstruction.
    #[serde(rename = "iii")]
    Matching,
    /// Adds the uncertainty loss.
    #[serde(rename = "iv")]
    Uncertainty,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Dense, Stage::Sparse, Stage::Matching, Stage::Uncertainty];

    pub fn label(&self) -> &'static str {
        match self {
            Stage::Dense => "i",
            Stage::Sparse => "ii",
            Stage::Matching => "iii",
            Stage::Uncertainty => "iv",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i" | "1" => Ok(Stage::Dense),
            "ii" | "2" => Ok(Stage::Sparse),
            "iii" | "3" => Ok(Stage::Matching),
            "iv" | "4" => Ok(Stage::Uncertainty),
            _ => Err(Error::Unknown {
                kind: "stage",
                name: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SmoothMode {
    /// First differences of `grid − identity`.
    #[default]
    Displacement,
    /// First differences of the raw grid coordinates.
    Literal,
}

impl FromStr for SmoothMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "displacement" => Ok(Self::Displacement),
            "literal" => Ok(Self::Literal),
            _ => Err(Error::Unknown {
                kind: "smoothness mode",
                name: s.into(),
            }),
        }
    }
}

/// Which terms send gradient into the predicted confidences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceGradient {
    /// Exact gradient of the total.
    Joint,
    /// Confidences act as fixed weights inside matching/reconstruction and
    /// are trained by the uncertainty term only.
    #[default]
    UncertaintyOnly,
}

fn check_hw(what: &str, h: usize, w: usize, eh: usize, ew: usize) -> Result<()> {
    if (h, w) != (eh, ew) {
        return Err(Error::dims(format!("{what} is {h}x{w}, expected {eh}x{ew}")));
    }
    Ok(())
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-pixel L2 norm across channels of `a − b`.
fn channel_norm(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = a.plane_len();
    let mut out = vec![0.0; n];
    for c in 0..a.channels {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for p in 0..n {
            let d = pa[p] - pb[p];
            out[p] += d * d;
        }
    }
    out.iter_mut().for_each(|v| *v = v.sqrt());
    out
}

/// One side of the matching loss: compares `E(reference)` with
/// `E(W(other, grid))` on the reference lattice.
struct SideTerm {
    value: f64,
    d_conf: Tensor,
    d_grid: Tensor,
    empty: bool,
}

fn matching_side(
    reference: &Tensor,
    other: &Tensor,
    grid: &Tensor,
    conf: &[f64],
    mask: &Mask,
    extractor: &FeatureExtractor,
) -> Result<SideTerm> {
    let (h, w) = (grid.height, grid.width);
    let count = mask.count();
    if count == 0 {
        return Ok(SideTerm {
            value: 0.0,
            d_conf: Tensor::zeros(1, h, w),
            d_grid: Tensor::zeros(2, h, w),
            empty: true,
        });
    }
    let inv = 1.0 / count as f64;
    let warped = warp::sample(other, grid)?;
    let f_ref = extractor.forward(reference);
    let f_warp = extractor.forward(&warped);
    let dist = channel_norm(&f_ref, &f_warp);
    let n = h * w;
    let mut value = 0.0;
    let mut d_conf = Tensor::zeros(1, h, w);
    let mut d_feat = Tensor::zeros(f_warp.channels, h, w);
    for p in 0..n {
        if !mask.data()[p] {
            continue;
        }
        value += conf[p] * dist[p] * inv;
        d_conf.data[p] = dist[p] * inv;
        if dist[p] > 0.0 {
            let s = conf[p] * inv / dist[p];
            for c in 0..f_warp.channels {
                d_feat.data[c * n + p] = s * (f_warp.data[c * n + p] - f_ref.data[c * n + p]);
            }
        }
    }
    let d_warped = extractor.backward(&warped, &d_feat);
    let (_, d_grid) = warp::sample_backward(other, grid, &d_warped)?;
    Ok(SideTerm {
        value,
        d_conf,
        d_grid,
        empty: false,
    })
}

/// One side of the reconstruction loss: `x → other frame → x`.
struct CycleTerm {
    value: f64,
    d_conf: Tensor,
    d_grid_out: Tensor,
    d_grid_back: Tensor,
    cycle: Tensor,
    empty: bool,
}

fn cycle_side(image: &Tensor, grid_out: &Tensor, grid_back: &Tensor, conf: &[f64], mask: &Mask) -> Result<CycleTerm> {
    let (h, w) = (image.height, image.width);
    let forward = warp::sample(image, grid_out)?;
    let cycle = warp::sample(&forward, grid_back)?;
    let count = mask.count();
    if count == 0 {
        return Ok(CycleTerm {
            value: 0.0,
            d_conf: Tensor::zeros(1, h, w),
            d_grid_out: Tensor::zeros(2, grid_out.height, grid_out.width),
            d_grid_back: Tensor::zeros(2, h, w),
            cycle,
            empty: true,
        });
    }
    let inv = 1.0 / count as f64;
    let err = channel_norm(image, &cycle);
    let n = h * w;
    let mut value = 0.0;
    let mut d_conf = Tensor::zeros(1, h, w);
    let mut d_cycle = Tensor::zeros(image.channels, h, w);
    for p in 0..n {
        if !mask.data()[p] {
            continue;
        }
        value += conf[p] * err[p] * inv;
        d_conf.data[p] = err[p] * inv;
        if err[p] > 0.0 {
            let s = conf[p] * inv / err[p];
            for c in 0..image.channels {
                d_cycle.data[c * n + p] = s * (cycle.data[c * n + p] - image.data[c * n + p]);
            }
        }
    }
    let (d_forward, d_grid_back) = warp::sample_backward(&forward, grid_back, &d_cycle)?;
    let (_, d_grid_out) = warp::sample_backward(image, grid_out, &d_forward)?;
    Ok(CycleTerm {
        value,
        d_conf,
        d_grid_out,
        d_grid_back,
        cycle,
        empty: false,
    })
}

/// Borrowed view of a predicted pair and its images/masks, validated once.
pub struct PairView<'a> {
    pub image_s: &'a ImageBuffer,
    pub image_t: &'a ImageBuffer,
    pub grid_st: &'a SamplingGrid,
    pub grid_ts: &'a SamplingGrid,
    pub conf_s: &'a ConfidenceMap,
    pub conf_t: &'a ConfidenceMap,
    pub mask_s: &'a Mask,
    pub mask_t: &'a Mask,
}

impl PairView<'_> {
    fn validate(&self) -> Result<(usize, usize)> {
        let (h, w) = (self.image_s.height(), self.image_s.width());
        if self.image_t.channels() != self.image_s.channels() {
            return Err(Error::dims("source and target channel counts differ"));
        }
        check_hw("target image", self.image_t.height(), self.image_t.width(), h, w)?;
        check_hw("grid_st", self.grid_st.height(), self.grid_st.width(), h, w)?;
        check_hw("grid_ts", self.grid_ts.height(), self.grid_ts.width(), h, w)?;
        check_hw("conf_s", self.conf_s.height(), self.conf_s.width(), h, w)?;
        check_hw("conf_t", self.conf_t.height(), self.conf_t.width(), h, w)?;
        check_hw("mask_s", self.mask_s.height(), self.mask_s.width(), h, w)?;
        check_hw("mask_t", self.mask_t.height(), self.mask_t.width(), h, w)?;
        Ok((h, w))
    }
}

fn conf_vec(c: &ConfidenceMap) -> Vec<f64> {
    c.data().iter().map(|&v| v as f64).collect()
}

/// Confidence-weighted feature distance between each image and the other
/// image warped onto it.
#[allow(clippy::too_many_arguments)]
pub fn loss_matching(
    image_s: &ImageBuffer,
    image_t: &ImageBuffer,
    grid_st: &SamplingGrid,
    grid_ts: &SamplingGrid,
    conf_s: &ConfidenceMap,
    conf_t: &ConfidenceMap,
    mask_s: &Mask,
    mask_t: &Mask,
    extractor: &FeatureExtractor,
) -> Result<LossReport> {
    let view = PairView {
        image_s,
        image_t,
        grid_st,
        grid_ts,
        conf_s,
        conf_t,
        mask_s,
        mask_t,
    };
    view.validate()?;
    matching_report(&view, extractor)
}

fn matching_report(v: &PairView, extractor: &FeatureExtractor) -> Result<LossReport> {
    let (is, it) = (v.image_s.to_tensor(), v.image_t.to_tensor());
    let t_side = matching_side(
        &it,
        &is,
        &v.grid_st.to_tensor(),
        &conf_vec(v.conf_t),
        v.mask_t,
        extractor,
    )?;
    let s_side = matching_side(
        &is,
        &it,
        &v.grid_ts.to_tensor(),
        &conf_vec(v.conf_s),
        v.mask_s,
        extractor,
    )?;
    let mut r = LossReport::single(LossTerm::Matching, t_side.value + s_side.value);
    r.add_grad(Quantity::GridSt, &t_side.d_grid, 1.0);
    r.add_grad(Quantity::GridTs, &s_side.d_grid, 1.0);
    r.add_grad(Quantity::ConfT, &t_side.d_conf, 1.0);
    r.add_grad(Quantity::ConfS, &s_side.d_conf, 1.0);
    if t_side.empty {
        r.flag(LossFlag::EmptyTargetMask);
    }
    if s_side.empty {
        r.flag(LossFlag::EmptySourceMask);
    }
    Ok(r)
}

/// Cycle images `(Î_{s⟲}, Î_{t⟲})` of a grid pair.
pub fn cycle_images(
    image_s: &ImageBuffer,
    image_t: &ImageBuffer,
    grid_st: &SamplingGrid,
    grid_ts: &SamplingGrid,
) -> Result<(ImageBuffer, ImageBuffer)> {
    let (gst, gts) = (grid_st.to_tensor(), grid_ts.to_tensor());
    let s_cycle = warp::sample(&warp::sample(&image_s.to_tensor(), &gst)?, &gts)?;
    let t_cycle = warp::sample(&warp::sample(&image_t.to_tensor(), &gts)?, &gst)?;
    Ok((ImageBuffer::from_tensor(&s_cycle), ImageBuffer::from_tensor(&t_cycle)))
}

/// Confidence-weighted intensity error between each image and its cycle
/// reconstruction through the other frame.
#[allow(clippy::too_many_arguments)]
pub fn loss_reconstruction(
    image_s: &ImageBuffer,
    image_t: &ImageBuffer,
    grid_st: &SamplingGrid,
    grid_ts: &SamplingGrid,
    conf_s: &ConfidenceMap,
    conf_t: &ConfidenceMap,
    mask_s: &Mask,
    mask_t: &Mask,
) -> Result<LossReport> {
    let view = PairView {
        image_s,
        image_t,
        grid_st,
        grid_ts,
        conf_s,
        conf_t,
        mask_s,
        mask_t,
    };
    view.validate()?;
    Ok(reconstruction_report(&view)?.0)
}

fn reconstruction_report(v: &PairView) -> Result<(LossReport, Tensor, Tensor)> {
    let (is, it) = (v.image_s.to_tensor(), v.image_t.to_tensor());
    let (gst, gts) = (v.grid_st.to_tensor(), v.grid_ts.to_tensor());
    let s_side = cycle_side(&is, &gst, &gts, &conf_vec(v.conf_s), v.mask_s)?;
    let t_side = cycle_side(&it, &gts, &gst, &conf_vec(v.conf_t), v.mask_t)?;
    let mut r = LossReport::single(LossTerm::Reconstruction, s_side.value + t_side.value);
    r.add_grad(Quantity::GridSt, &s_side.d_grid_out, 1.0);
    r.add_grad(Quantity::GridTs, &s_side.d_grid_back, 1.0);
    r.add_grad(Quantity::GridTs, &t_side.d_grid_out, 1.0);
    r.add_grad(Quantity::GridSt, &t_side.d_grid_back, 1.0);
    r.add_grad(Quantity::ConfS, &s_side.d_conf, 1.0);
    r.add_grad(Quantity::ConfT, &t_side.d_conf, 1.0);
    if s_side.empty {
        r.flag(LossFlag::EmptySourceMask);
    }
    if t_side.empty {
        r.flag(LossFlag::EmptyTargetMask);
    }
    Ok((r, s_side.cycle, t_side.cycle))
}

/// Reference confidence from cycle error.
///
/// Returns `(e, e*, C)`: the per-pixel error, its min-max normalization over
/// the masked pixels (clamped to `[0, 1]` elsewhere), and `C = 1 − e*`.
/// When every masked pixel has the same error, `e* = 0` and `C = 1`.
pub fn reference_confidence(
    image: &ImageBuffer,
    cycle: &ImageBuffer,
    mask: &Mask,
) -> Result<(ErrorMap, ErrorMap, ConfidenceMap)> {
    let (h, w) = (image.height(), image.width());
    if image.channels() != cycle.channels() {
        return Err(Error::dims("cycle image channel count"));
    }
    check_hw("cycle image", cycle.height(), cycle.width(), h, w)?;
    check_hw("mask", mask.height(), mask.width(), h, w)?;
    let err = channel_norm(&image.to_tensor(), &cycle.to_tensor());
    let (e_star, conf) = normalize_errors(&err, mask)?;
    Ok((
        ErrorMap::new(h, w, err.iter().map(|&v| v as f32).collect())?,
        ErrorMap::new(h, w, e_star.iter().map(|&v| v as f32).collect())?,
        ConfidenceMap::new(h, w, conf.iter().map(|&v| v as f32).collect())?,
    ))
}

fn normalize_errors(err: &[f64], mask: &Mask) -> Result<(Vec<f64>, Vec<f64>)> {
    let masked = err.iter().zip(mask.data()).filter(|(_, &m)| m).map(|(e, _)| *e);
    let (lo, hi) = masked.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e), hi.max(e)));
    if lo > hi {
        return Err(Error::InvalidValue(
            "reference confidence needs a non-empty mask".into(),
        ));
    }
    let span = hi - lo;
    let e_star: Vec<f64> = err
        .iter()
        .map(|&e| {
            if span > 0.0 {
                ((e - lo) / span).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    let conf = e_star.iter().map(|e| 1.0 - e).collect();
    Ok((e_star, conf))
}

/// Calibration loss: L1 between reference and predicted confidence minus a
/// reward `lambda_conf` on the predicted confidence. The references are
/// constants.
#[allow(clippy::too_many_arguments)]
pub fn loss_uncertainty(
    ref_s: &ConfidenceMap,
    ref_t: &ConfidenceMap,
    conf_s: &ConfidenceMap,
    conf_t: &ConfidenceMap,
    mask_s: &Mask,
    mask_t: &Mask,
    lambda_conf: f64,
) -> Result<LossReport> {
    let (h, w) = (conf_s.height(), conf_s.width());
    for (what, hh, ww) in [
        ("ref_s", ref_s.height(), ref_s.width()),
        ("ref_t", ref_t.height(), ref_t.width()),
        ("conf_t", conf_t.height(), conf_t.width()),
        ("mask_s", mask_s.height(), mask_s.width()),
        ("mask_t", mask_t.height(), mask_t.width()),
    ] {
        check_hw(what, hh, ww, h, w)?;
    }
    let mut r = LossReport::single(LossTerm::Uncertainty, 0.0);
    let mut total = 0.0;
    for (reference, pred, mask, q, flag) in [
        (ref_s, conf_s, mask_s, Quantity::ConfS, LossFlag::EmptySourceMask),
        (ref_t, conf_t, mask_t, Quantity::ConfT, LossFlag::EmptyTargetMask),
    ] {
        let count = mask.count();
        let mut g = Tensor::zeros(1, h, w);
        if count == 0 {
            r.flag(flag);
            r.grads.insert(q, g);
            continue;
        }
        let inv = 1.0 / count as f64;
        for p in 0..h * w {
            if !mask.data()[p] {
                continue;
            }
            let (c_ref, c_hat) = (reference.data()[p] as f64, pred.data()[p] as f64);
            total += ((c_ref - c_hat).abs() - lambda_conf * c_hat) * inv;
            g.data[p] = (sign(c_hat - c_ref) - lambda_conf) * inv;
        }
        r.grads.insert(q, g);
    }
    r.terms.insert(LossTerm::Uncertainty, total);
    r.total = total;
    Ok(r)
}

/// First-difference smoothness of a grid (or of its displacement field).
///
/// Value: mean over horizontal neighbour pairs of the squared coordinate
/// difference (both channels summed) plus the same over vertical pairs.
pub fn loss_smoothness(grid: &SamplingGrid, mode: SmoothMode) -> Result<LossReport> {
    let (h, w) = (grid.height(), grid.width());
    if h < 2 || w < 2 {
        return Err(Error::InvalidDimensions(format!(
            "smoothness needs >= 2x2, got {h}x{w}"
        )));
    }
    let field = match mode {
        SmoothMode::Displacement => grid.displacement()?,
        SmoothMode::Literal => grid.to_tensor(),
    };
    let (value, g) = smoothness_of(&field);
    let mut r = LossReport::single(LossTerm::Smooth, value);
    r.grads.insert(Quantity::Grid, g);
    Ok(r)
}

/// Value and gradient of the first-difference penalty on any 2-D field.
pub(crate) fn smoothness_of(field: &Tensor) -> (f64, Tensor) {
    let (h, w) = (field.height, field.width);
    let inv_h = 1.0 / (h * (w - 1)) as f64;
    let inv_v = 1.0 / ((h - 1) * w) as f64;
    let mut value = 0.0;
    let mut g = Tensor::zeros(field.channels, h, w);
    for c in 0..field.channels {
        let p = field.plane(c);
        let off = c * h * w;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let d = p[i + 1] - p[i];
                    value += d * d * inv_h;
                    g.data[off + i + 1] += 2.0 * d * inv_h;
                    g.data[off + i] -= 2.0 * d * inv_h;
                }
                if y + 1 < h {
                    let d = p[i + w] - p[i];
                    value += d * d * inv_v;
                    g.data[off + i + w] += 2.0 * d * inv_v;
                    g.data[off + i] -= 2.0 * d * inv_v;
                }
            }
        }
    }
    (value, g)
}

/// Mean squared coordinate error over visible pixels, averaged over the two
/// coordinate channels.
pub fn loss_dense_supervised(pred: &SamplingGrid, target: &SamplingGrid, visibility: &Mask) -> Result<LossReport> {
    let (h, w) = (pred.height(), pred.width());
    check_hw("target grid", target.height(), target.width(), h, w)?;
    check_hw("visibility", visibility.height(), visibility.width(), h, w)?;
    let count = visibility.count();
    let mut g = Tensor::zeros(2, h, w);
    let mut r = LossReport::single(LossTerm::Dense, 0.0);
    if count == 0 {
        r.flag(LossFlag::NoVisiblePixels);
        r.grads.insert(Quantity::Grid, g);
        return Ok(r);
    }
    let inv = 1.0 / count as f64;
    let n = h * w;
    let (pc, tc) = (pred.coords(), target.coords());
    let mut value = 0.0;
    for p in 0..n {
        if !visibility.data()[p] {
            continue;
        }
        for c in 0..2 {
            let d = pc[c * n + p] as f64 - tc[c * n + p] as f64;
            value += 0.5 * d * d * inv;
            g.data[c * n + p] = d * inv;
        }
    }
    r.terms.insert(LossTerm::Dense, value);
    r.total = value;
    r.grads.insert(Quantity::Grid, g);
    Ok(r)
}

/// Keypoint supervision in both directions: `Ĝ_ts` sampled at each source
/// keypoint should give the target keypoint and `Ĝ_st` sampled at each target
/// keypoint the source keypoint (normalized units). Value: mean squared
/// Euclidean error over visible keypoints and both directions.
pub fn loss_sparse_keypoints(
    grid_st: &SamplingGrid,
    grid_ts: &SamplingGrid,
    keypoints: &KeypointSet,
) -> Result<LossReport> {
    let (h, w) = (grid_st.height(), grid_st.width());
    check_hw("grid_ts", grid_ts.height(), grid_ts.width(), h, w)?;
    let visible: Vec<_> = keypoints.visible().copied().collect();
    let mut r = LossReport::single(LossTerm::Sparse, 0.0);
    let mut g_st = Tensor::zeros(2, h, w);
    let mut g_ts = Tensor::zeros(2, h, w);
    if visible.is_empty() {
        r.flag(LossFlag::NoKeypoints);
        r.grads.insert(Quantity::GridSt, g_st);
        r.grads.insert(Quantity::GridTs, g_ts);
        return Ok(r);
    }
    let inv = 1.0 / (2 * visible.len()) as f64;
    let (tst, tts) = (grid_st.to_tensor(), grid_ts.to_tensor());
    let n = h * w;
    let mut value = 0.0;
    for k in &visible {
        let src = (pixel_to_norm(k.x_src as f64, w), pixel_to_norm(k.y_src as f64, h));
        let tgt = (pixel_to_norm(k.x_tgt as f64, w), pixel_to_norm(k.y_tgt as f64, h));
        // (grid, gradient slot, where to read it, what it should say)
        for (grid, grad, at, want) in [(&tts, &mut g_ts, src, tgt), (&tst, &mut g_st, tgt, src)] {
            let t = warp::taps(at.0, at.1, h, w);
            let pred = (t.sample(grid.plane(0)), t.sample(grid.plane(1)));
            let (dx, dy) = (pred.0 - want.0, pred.1 - want.1);
            value += (dx * dx + dy * dy) * inv;
            for j in 0..4 {
                if t.valid[j] {
                    grad.data[t.index[j]] += 2.0 * dx * inv * t.weight[j];
                    grad.data[n + t.index[j]] += 2.0 * dy * inv * t.weight[j];
                }
            }
        }
    }
    r.terms.insert(LossTerm::Sparse, value);
    r.total = value;
    r.grads.insert(Quantity::GridSt, g_st);
    r.grads.insert(Quantity::GridTs, g_ts);
    Ok(r)
}

/// Ground-truth grids and visibility for dense supervision.
pub struct DenseTargets<'a> {
    pub grid_st: &'a SamplingGrid,
    pub grid_ts: &'a SamplingGrid,
    /// Visibility on the source lattice (pairs with `grid_ts`).
    pub vis_s: &'a Mask,
    /// Visibility on the target lattice (pairs with `grid_st`).
    pub vis_t: &'a Mask,
}

pub struct ObjectiveInputs<'a> {
    pub pair: PairView<'a>,
    pub extractor: &'a FeatureExtractor,
    pub dense: Option<DenseTargets<'a>>,
    pub keypoints: Option<&'a KeypointSet>,
    pub smooth_mode: SmoothMode,
    pub confidence_gradient: ConfidenceGradient,
}

/// The weighted objective active at `stage`.
///
/// Stage i: dense (when targets are given) and smoothness. Stage ii adds
/// keypoints (when given); stage iii matching and reconstruction; stage iv
/// the uncertainty term with references from the current cycle error.
/// Two-directional terms sum the per-direction values.
pub fn total_objective(stage: Stage, inputs: &ObjectiveInputs, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let v = &inputs.pair;
    let (h, w) = v.validate()?;
    let mut out = LossReport::default();
    let add =
        |out: &mut LossReport, report: LossReport, term: LossTerm, remap: &[(Quantity, Quantity)], conf_grad: bool| {
            let wt = weights.weight(term);
            let value = report.value(term).unwrap_or(0.0);
            *out.terms.entry(term).or_insert(0.0) += value;
            out.total += wt * value;
            for (q, g) in &report.grads {
                let target = remap
                    .iter()
                    .find(|(from, _)| from == q)
                    .map(|(_, to)| *to)
                    .unwrap_or(*q);
                if matches!(target, Quantity::ConfS | Quantity::ConfT) && !conf_grad {
                    continue;
                }
                out.add_grad(target, g, wt);
            }
            for f in report.flags {
                out.flag(f);
            }
        };
    let joint = inputs.confidence_gradient == ConfidenceGradient::Joint;

    // stage i
    if let Some(d) = &inputs.dense {
        add(
            &mut out,
            loss_dense_supervised(v.grid_st, d.grid_st, d.vis_t)?,
            LossTerm::Dense,
            &[(Quantity::Grid, Quantity::GridSt)],
            true,
        );
        add(
            &mut out,
            loss_dense_supervised(v.grid_ts, d.grid_ts, d.vis_s)?,
            LossTerm::Dense,
            &[(Quantity::Grid, Quantity::GridTs)],
            true,
        );
    }
    add(
        &mut out,
        loss_smoothness(v.grid_st, inputs.smooth_mode)?,
        LossTerm::Smooth,
        &[(Quantity::Grid, Quantity::GridSt)],
        true,
    );
    add(
        &mut out,
        loss_smoothness(v.grid_ts, inputs.smooth_mode)?,
        LossTerm::Smooth,
        &[(Quantity::Grid, Quantity::GridTs)],
        true,
    );

    if stage >= Stage::Sparse {
        if let Some(k) = inputs.keypoints {
            add(
                &mut out,
                loss_sparse_keypoints(v.grid_st, v.grid_ts, k)?,
                LossTerm::Sparse,
                &[],
                true,
            );
        }
    }
    if stage >= Stage::Matching {
        add(
            &mut out,
            matching_report(v, inputs.extractor)?,
            LossTerm::Matching,
            &[],
            joint,
        );
        let (recon, s_cycle, t_cycle) = reconstruction_report(v)?;
        add(&mut out, recon, LossTerm::Reconstruction, &[], joint);
        if stage >= Stage::Uncertainty {
            let reference = |img: &ImageBuffer, cyc: &Tensor, mask: &Mask| -> Result<ConfidenceMap> {
                if mask.count() == 0 {
                    return ConfidenceMap::filled(h, w, 1.0);
                }
                Ok(reference_confidence(img, &ImageBuffer::from_tensor(cyc), mask)?.2)
            };
            let ref_s = reference(v.image_s, &s_cycle, v.mask_s)?;
            let ref_t = reference(v.image_t, &t_cycle, v.mask_t)?;
            let unc = loss_uncertainty(
                &ref_s,
                &ref_t,
                v.conf_s,
                v.conf_t,
                v.mask_s,
                v.mask_t,
                weights.lambda_conf,
            )?;
            add(&mut out, unc, LossTerm::Uncertainty, &[], true);
        }
    }

    if !out.total.is_finite() || out.terms.values().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite(format!("stage {stage} loss terms {:?}", out.terms)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagery::Keypoint;

    fn shifted(h: usize, w: usize, dx: f64, dy: f64) -> SamplingGrid {
        let mut d = Tensor::zeros(2, h, w);
        d.plane_mut(0).iter_mut().for_each(|v| *v = dx);
        d.plane_mut(1).iter_mut().for_each(|v| *v = dy);
        SamplingGrid::from_displacement(&d).unwrap()
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!(w.coefficients(), [10_000.0, 0.1, 100.0, 2_000.0, 1_000.0, 0.01]);
        assert_eq!(w.lambda_conf, 0.1);
        assert_eq!(w.learning_rate, 1e-4);
        let parsed: LossWeights = serde_json::from_str(r#"{"dense": 5.0}"#).unwrap();
        assert_eq!(parsed.dense, 5.0);
        assert_eq!(parsed.matching, 2_000.0);
        assert!(serde_json::from_str::<LossWeights>(r#"{"densee": 5.0}"#).is_err());
    }

    #[test]
    fn dense_translation_offset() {
        let id = SamplingGrid::identity(6, 7).unwrap();
        let pred = shifted(6, 7, 0.1, 0.0);
        let r = loss_dense_supervised(&pred, &id, &Mask::full(6, 7)).unwrap();
        assert!((r.total - 0.005).abs() < 1e-8, "{}", r.total);
        let zero = loss_dense_supervised(&id, &id, &Mask::full(6, 7)).unwrap();
        assert_eq!(zero.total, 0.0);
    }

    #[test]
    fn dense_without_visible_pixels_is_flagged() {
        let id = SamplingGrid::identity(4, 4).unwrap();
        let r = loss_dense_supervised(&shifted(4, 4, 0.3, 0.0), &id, &Mask::empty(4, 4)).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(r.flags, vec![LossFlag::NoVisiblePixels]);
    }

    #[test]
    fn reference_confidence_hand_case() {
        // errors 0.1, 0.3, 0.5 on the masked pixels of a 3x3 single-channel pair
        let img = ImageBuffer::new(1, 3, 3, vec![0.5; 9]).unwrap();
        let mut cyc = vec![0.5f32; 9];
        cyc[0] = 0.6;
        cyc[4] = 0.8;
        cyc[8] = 0.0;
        let cyc = ImageBuffer::new(1, 3, 3, cyc).unwrap();
        let mask = Mask::from_fn(3, 3, |r, c| r == c);
        let (e, e_star, c) = reference_confidence(&img, &cyc, &mask).unwrap();
        for (i, (want_e, want_star)) in [(0, (0.1, 0.0)), (4, (0.3, 0.5)), (8, (0.5, 1.0))] {
            assert!((e.data()[i] as f64 - want_e).abs() < 1e-6);
            assert!((e_star.data()[i] as f64 - want_star).abs() < 1e-6);
            assert!((c.data()[i] as f64 - (1.0 - want_star)).abs() < 1e-6);
        }
        // unmasked pixels with zero error fall below the masked minimum
        assert_eq!(e_star.data()[1], 0.0);
        assert_eq!(c.data()[1], 1.0);
    }

    #[test]
    fn reference_confidence_degenerate_and_empty() {
        let img = ImageBuffer::new(1, 2, 2, vec![0.2; 4]).unwrap();
        let (_, e_star, c) = reference_confidence(&img, &img, &Mask::full(2, 2)).unwrap();
        assert!(e_star.data().iter().all(|&v| v == 0.0));
        assert!(c.data().iter().all(|&v| v == 1.0));
        assert!(reference_confidence(&img, &img, &Mask::empty(2, 2)).is_err());
    }

    #[test]
    fn uncertainty_endpoints() {
        let (h, w) = (4, 5);
        let one = ConfidenceMap::filled(h, w, 1.0).unwrap();
        let zero = ConfidenceMap::filled(h, w, 0.0).unwrap();
        let m = Mask::full(h, w);
        let r = loss_uncertainty(&zero, &zero, &one, &one, &m, &m, 0.0).unwrap();
        assert!((r.total - 2.0).abs() < 1e-12);
        // at Ĉ = C_ref the gradient is exactly the reward term
        let half = ConfidenceMap::filled(h, w, 0.5).unwrap();
        let r = loss_uncertainty(&half, &half, &half, &half, &m, &m, 0.1).unwrap();
        let g = r.grad(Quantity::ConfS).unwrap();
        assert!(g.data.iter().all(|&v| (v + 0.1 / 20.0).abs() < 1e-15));
        assert!((r.total + 2.0 * 0.1 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn checkerboard_smoothness_closed_form() {
        let (h, w, delta) = (6, 8, 0.03);
        let mut d = Tensor::zeros(2, h, w);
        for r in 0..h {
            for c in 0..w {
                d.data[r * w + c] = 0.1 + if (r + c) % 2 == 0 { delta } else { -delta };
                d.data[h * w + r * w + c] = -0.05;
            }
        }
        let board = SamplingGrid::from_displacement(&d).unwrap();
        let flat = shifted(h, w, 0.1, -0.05);
        let lb = loss_smoothness(&board, SmoothMode::Displacement).unwrap().total;
        let lf = loss_smoothness(&flat, SmoothMode::Displacement).unwrap().total;
        assert!(lf < 1e-12);
        assert!(lb > lf);
        assert!((lb - 8.0 * delta * delta).abs() < 1e-6, "{lb}");
        // the raw grid of an identity has non-zero first differences
        let id = SamplingGrid::identity(h, w).unwrap();
        assert!(loss_smoothness(&id, SmoothMode::Literal).unwrap().total > 0.0);
        assert!(loss_smoothness(&id, SmoothMode::Displacement).unwrap().total < 1e-12);
    }

    #[test]
    fn sparse_single_keypoint_offset() {
        let (h, w) = (9, 11);
        let id = SamplingGrid::identity(h, w).unwrap();
        let dx_px = 0.2 * (w - 1) as f32 / 2.0;
        let kps = KeypointSet::new(vec![
            Keypoint {
                x_src: 3.0,
                y_src: 4.0,
                x_tgt: 3.0 + dx_px,
                y_tgt: 4.0,
                visible: true,
            },
            Keypoint {
                x_src: 1.0,
                y_src: 1.0,
                x_tgt: 8.0,
                y_tgt: 2.0,
                visible: false,
            },
        ]);
        let r = loss_sparse_keypoints(&id, &id, &kps).unwrap();
        assert!((r.total - 0.04).abs() < 1e-6, "{}", r.total);
        let none = KeypointSet::new(vec![]);
        let r = loss_sparse_keypoints(&id, &id, &none).unwrap();
        assert_eq!((r.total, r.flags.clone()), (0.0, vec![LossFlag::NoKeypoints]));
    }

    #[test]
    fn identity_pair_has_zero_photometric_losses() {
        let (h, w) = (8, 8);
        let data: Vec<f32> = (0..3 * h * w).map(|i| (i % 7) as f32 / 7.0).collect();
        let img = ImageBuffer::new(3, h, w, data).unwrap();
        let id = SamplingGrid::identity(h, w).unwrap();
        let c = ConfidenceMap::filled(h, w, 1.0).unwrap();
        let m = Mask::full(h, w);
        let e = FeatureExtractor::new(crate::features::FeatureKind::RandomConv, 3, 0);
        assert_eq!(
            loss_matching(&img, &img, &id, &id, &c, &c, &m, &m, &e).unwrap().total,
            0.0
        );
        assert_eq!(
            loss_reconstruction(&img, &img, &id, &id, &c, &c, &m, &m).unwrap().total,
            0.0
        );
        let r = loss_matching(&img, &img, &id, &id, &c, &c, &Mask::empty(h, w), &m, &e).unwrap();
        assert!(r.flags.contains(&LossFlag::EmptySourceMask));
    }

    #[test]
    fn stages_enable_terms_progressively() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let inst = crate::gradcheck::PairInstance::random(&mut rng);
        let e = FeatureExtractor::new(crate::features::FeatureKind::Identity, 3, 0);
        let w = LossWeights::default();
        let mut seen = Vec::new();
        for stage in Stage::ALL {
            let inputs = ObjectiveInputs {
                pair: inst.view(),
                extractor: &e,
                dense: Some(DenseTargets {
                    grid_st: &inst.gt_st,
                    grid_ts: &inst.gt_ts,
                    vis_s: &inst.vis_s,
                    vis_t: &inst.vis_t,
                }),
                keypoints: Some(&inst.keypoints),
                smooth_mode: SmoothMode::Displacement,
                confidence_gradient: ConfidenceGradient::UncertaintyOnly,
            };
            let r = total_objective(stage, &inputs, &w).unwrap();
            let sum: f64 = r.terms.iter().map(|(t, v)| w.weight(*t) * v).sum();
            assert!((r.total - sum).abs() <= 1e-9 * sum.abs().max(1.0));
            seen.push(r.terms.keys().copied().collect::<Vec<_>>());
            // confidences only move once the uncertainty term is on
            assert_eq!(r.grad(Quantity::ConfS).is_some(), stage == Stage::Uncertainty);
        }
        use LossTerm::*;
        assert_eq!(seen[0], vec![Dense, Smooth]);
        assert_eq!(seen[1], vec![Dense, Sparse, Smooth]);
        assert_eq!(seen[2], vec![Dense, Sparse, Reconstruction, Matching, Smooth]);
        assert_eq!(
            seen[3],
            vec![Dense, Sparse, Reconstruction, Matching, Smooth, Uncertainty]
        );
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.label().parse::<Stage>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.label()));
        }
        assert!("v".parse::<Stage>().is_err());
    }
}
