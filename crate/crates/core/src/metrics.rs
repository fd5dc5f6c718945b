//! PCK, synthetic dense error, end-point error and confidence calibration.
//!
//! Undefined results (nothing visible, too few pixels, zero variance) are
//! `None` rather than NaN.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::{
    norm_to_pixel, pixel_to_norm, ConfidenceMap, ErrorMap, ImageBuffer, KeypointSet, Mask, Prediction, SamplingGrid,
};
use crate::losses::cycle_images;
use crate::synth::SyntheticPair;
use crate::warp;

pub const DEFAULT_ALPHAS: [f64; 3] = [0.1, 0.05, 0.01];
pub const MIN_CALIBRATION_PIXELS: usize = 10;

/// Fraction of visible points within `alpha · max(H, W)` pixels (inclusive).
pub fn pck(
    predicted: &[[f64; 2]],
    ground_truth: &[[f64; 2]],
    visible: &[bool],
    alpha: f64,
    height: usize,
    width: usize,
) -> Result<Option<f64>> {
    let (hits, total) = pck_counts(predicted, ground_truth, visible, alpha, height, width)?;
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// `(correct, visible)` counts behind [`pck`].
pub fn pck_counts(
    predicted: &[[f64; 2]],
    ground_truth: &[[f64; 2]],
    visible: &[bool],
    alpha: f64,
    height: usize,
    width: usize,
) -> Result<(usize, usize)> {
    if predicted.len() != ground_truth.len() || visible.len() != predicted.len() {
        return Err(Error::dims(format!(
            "{} predictions, {} ground-truth points, {} visibility flags",
            predicted.len(),
            ground_truth.len(),
            visible.len()
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidValue(format!("alpha {alpha}")));
    }
    let radius = alpha * height.max(width) as f64;
    let mut hits = 0;
    let mut total = 0;
    for ((p, g), &v) in predicted.iter().zip(ground_truth).zip(visible) {
        if !v {
            continue;
        }
        total += 1;
        if (p[0] - g[0]).hypot(p[1] - g[1]) <= radius {
            hits += 1;
        }
    }
    Ok((hits, total))
}

/// Target-image positions predicted for each keypoint: `Ĝ_ts` read at the
/// source location, in pixels.
pub fn transfer_keypoints(grid_ts: &SamplingGrid, keypoints: &KeypointSet) -> Vec<[f64; 2]> {
    let (h, w) = (grid_ts.height(), grid_ts.width());
    let g = grid_ts.to_tensor();
    keypoints
        .points
        .iter()
        .map(|k| {
            let t = warp::taps(pixel_to_norm(k.x_src as f64, w), pixel_to_norm(k.y_src as f64, h), h, w);
            [
                norm_to_pixel(t.sample(g.plane(0)), w),
                norm_to_pixel(t.sample(g.plane(1)), h),
            ]
        })
        .collect()
}

fn masked_mse(a: &ImageBuffer, b: &ImageBuffer, mask: &Mask) -> Option<f64> {
    let count = mask.count();
    if count == 0 {
        return None;
    }
    let n = mask.height() * mask.width();
    let mut acc = 0.0;
    for c in 0..a.channels() {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for i in (0..n).filter(|&i| mask.data()[i]) {
            let d = pa[i] as f64 - pb[i] as f64;
            acc += d * d;
        }
    }
    Some(acc / (count * a.channels()) as f64)
}

/// Mean squared intensity difference between images warped by predicted and
/// by ground-truth grids, over visible pixels, averaged over both directions
/// (directions with no visible pixels are skipped).
#[allow(clippy::too_many_arguments)]
pub fn synthetic_dense(
    pred_st: &SamplingGrid,
    pred_ts: &SamplingGrid,
    gt_st: &SamplingGrid,
    gt_ts: &SamplingGrid,
    image_s: &ImageBuffer,
    image_t: &ImageBuffer,
    vis_s: &Mask,
    vis_t: &Mask,
) -> Result<Option<f64>> {
    let (h, w) = (image_s.height(), image_s.width());
    for (what, hh, ww) in [
        ("target image", image_t.height(), image_t.width()),
        ("pred_st", pred_st.height(), pred_st.width()),
        ("pred_ts", pred_ts.height(), pred_ts.width()),
        ("gt_st", gt_st.height(), gt_st.width()),
        ("gt_ts", gt_ts.height(), gt_ts.width()),
        ("vis_s", vis_s.height(), vis_s.width()),
        ("vis_t", vis_t.height(), vis_t.width()),
    ] {
        if (hh, ww) != (h, w) {
            return Err(Error::dims(format!("{what} is {hh}x{ww}, expected {h}x{w}")));
        }
    }
    if image_s.channels() != image_t.channels() {
        return Err(Error::dims("channel counts differ"));
    }
    let st = masked_mse(
        &warp::bilinear_sample(image_s, pred_st)?,
        &warp::bilinear_sample(image_s, gt_st)?,
        vis_t,
    );
    let ts = masked_mse(
        &warp::bilinear_sample(image_t, pred_ts)?,
        &warp::bilinear_sample(image_t, gt_ts)?,
        vis_s,
    );
    Ok(match (st, ts) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        (a, b) => a.or(b),
    })
}

/// Mean Euclidean distance in pixels between predicted and ground-truth
/// coordinates over visible pixels.
pub fn end_point_error(pred: &SamplingGrid, gt: &SamplingGrid, visibility: &Mask) -> Result<Option<f64>> {
    let (h, w) = (gt.height(), gt.width());
    if (pred.height(), pred.width()) != (h, w) || (visibility.height(), visibility.width()) != (h, w) {
        return Err(Error::dims("end-point error inputs differ in size"));
    }
    let count = visibility.count();
    if count == 0 {
        return Ok(None);
    }
    let (sx, sy) = (0.5 * (w as f64 - 1.0), 0.5 * (h as f64 - 1.0));
    let n = h * w;
    let (p, g) = (pred.coords(), gt.coords());
    let total: f64 = (0..n)
        .filter(|&i| visibility.data()[i])
        .map(|i| {
            let dx = (p[i] as f64 - g[i] as f64) * sx;
            let dy = (p[n + i] as f64 - g[n + i] as f64) * sy;
            dx.hypot(dy)
        })
        .sum();
    Ok(Some(total / count as f64))
}

/// Mean absolute second difference of a grid's displacement field in
/// pixels, over both axes, both components and all interior positions.
/// Affine fields score zero.
pub fn second_difference(grid: &SamplingGrid) -> Result<f64> {
    let (h, w) = (grid.height(), grid.width());
    if h < 3 && w < 3 {
        return Err(Error::InvalidDimensions(format!("{h}x{w} has no interior")));
    }
    let d = grid.displacement()?;
    let scale = [0.5 * (w as f64 - 1.0), 0.5 * (h as f64 - 1.0)];
    let (mut total, mut count) = (0.0, 0usize);
    for (c, s) in scale.iter().enumerate() {
        let p = d.plane(c);
        for r in 0..h {
            for x in 1..w.saturating_sub(1) {
                total += (p[r * w + x + 1] - 2.0 * p[r * w + x] + p[r * w + x - 1]).abs() * s;
                count += 1;
            }
        }
        for r in 1..h.saturating_sub(1) {
            for x in 0..w {
                total += (p[(r + 1) * w + x] - 2.0 * p[r * w + x] + p[(r - 1) * w + x]).abs() * s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Ranks starting at 1 with ties given their mean rank.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the mid-ranks; `None` below
/// [`MIN_CALIBRATION_PIXELS`] samples or when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < MIN_CALIBRATION_PIXELS {
        return None;
    }
    let (ra, rb) = (mid_ranks(a), mid_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation between confidence and cycle error over masked pixels.
pub fn calibration(conf: &ConfidenceMap, error: &ErrorMap, mask: &Mask) -> Result<Option<f64>> {
    let (h, w) = (conf.height(), conf.width());
    if (error.height(), error.width()) != (h, w) || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::dims("calibration inputs differ in size"));
    }
    let (c, e) = masked_pairs(conf, error, mask);
    Ok(spearman(&c, &e))
}

fn masked_pairs(conf: &ConfidenceMap, error: &ErrorMap, mask: &Mask) -> (Vec<f64>, Vec<f64>) {
    (0..mask.data().len())
        .filter(|&i| mask.data()[i])
        .map(|i| (conf.data()[i] as f64, error.data()[i] as f64))
        .unzip()
}

/// Per-pixel L2 cycle error of each image through the predicted grids.
pub fn cycle_errors(image_s: &ImageBuffer, image_t: &ImageBuffer, pred: &Prediction) -> Result<(ErrorMap, ErrorMap)> {
    let (cs, ct) = cycle_images(image_s, image_t, &pred.grid_st, &pred.grid_ts)?;
    let err = |a: &ImageBuffer, b: &ImageBuffer| -> Result<ErrorMap> {
        let n = a.height() * a.width();
        let mut e = vec![0f64; n];
        for c in 0..a.channels() {
            for (i, (x, y)) in a.plane(c).iter().zip(b.plane(c)).enumerate() {
                e[i] += (*x as f64 - *y as f64).powi(2);
            }
        }
        ErrorMap::new(a.height(), a.width(), e.iter().map(|v| v.sqrt() as f32).collect())
    };
    Ok((err(image_s, &cs)?, err(image_t, &ct)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PckEntry {
    pub alpha: f64,
    pub value: Option<f64>,
    pub correct: usize,
    pub total: usize,
}

/// Metrics of one predicted pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub id: String,
    pub pck: Vec<PckEntry>,
    pub synthetic_dense: Option<f64>,
    /// Mean of the two directions' end-point errors, pixels.
    pub epe: Option<f64>,
    pub calibration: Option<f64>,
    pub keypoints: usize,
    pub pixels: usize,
}

pub fn evaluate_pair(id: &str, pred: &Prediction, pair: &SyntheticPair, alphas: &[f64]) -> Result<PairEval> {
    let (h, w) = (pair.image_s.height(), pair.image_s.width());
    let predicted = transfer_keypoints(&pred.grid_ts, &pair.keypoints);
    let truth: Vec<[f64; 2]> = pair
        .keypoints
        .points
        .iter()
        .map(|k| [k.x_tgt as f64, k.y_tgt as f64])
        .collect();
    let visible: Vec<bool> = pair.keypoints.points.iter().map(|k| k.visible).collect();
    let pck = alphas
        .iter()
        .map(|&alpha| {
            let (correct, total) = pck_counts(&predicted, &truth, &visible, alpha, h, w)?;
            Ok(PckEntry {
                alpha,
                value: (total > 0).then(|| correct as f64 / total as f64),
                correct,
                total,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dense = synthetic_dense(
        &pred.grid_st,
        &pred.grid_ts,
        &pair.grid_st,
        &pair.grid_ts,
        &pair.image_s,
        &pair.image_t,
        &pair.vis_s,
        &pair.vis_t,
    )?;
    let epe = match (
        end_point_error(&pred.grid_st, &pair.grid_st, &pair.vis_t)?,
        end_point_error(&pred.grid_ts, &pair.grid_ts, &pair.vis_s)?,
    ) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        (a, b) => a.or(b),
    };
    let (es, et) = cycle_errors(&pair.image_s, &pair.image_t, pred)?;
    let (mut c, mut e) = masked_pairs(&pred.conf_s, &es, &pair.mask_s);
    let (c2, e2) = masked_pairs(&pred.conf_t, &et, &pair.mask_t);
    c.extend(c2);
    e.extend(e2);
    Ok(PairEval {
        id: id.into(),
        pck,
        synthetic_dense: dense,
        epe,
        calibration: spearman(&c, &e),
        keypoints: visible.iter().filter(|&&v| v).count(),
        pixels: pair.vis_s.count() + pair.vis_t.count(),
    })
}

/// Dataset-level metrics. PCK pools keypoints over pairs; the other fields
/// are means over the pairs where they are defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub pck: Vec<PckEntry>,
    pub synthetic_dense: Option<f64>,
    pub epe: Option<f64>,
    pub calibration: Option<f64>,
    pub keypoints: usize,
    pub pixels: usize,
    pub per_pair: Vec<PairEval>,
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    pub fn aggregate(alphas: &[f64], per_pair: Vec<PairEval>) -> Self {
        let pck = alphas
            .iter()
            .enumerate()
            .map(|(k, &alpha)| {
                let correct = per_pair.iter().map(|p| p.pck[k].correct).sum();
                let total: usize = per_pair.iter().map(|p| p.pck[k].total).sum();
                PckEntry {
                    alpha,
                    value: (total > 0).then(|| correct as f64 / total as f64),
                    correct,
                    total,
                }
            })
            .collect();
        Self {
            pairs: per_pair.len(),
            pck,
            synthetic_dense: mean_defined(per_pair.iter().map(|p| p.synthetic_dense)),
            epe: mean_defined(per_pair.iter().map(|p| p.epe)),
            calibration: mean_defined(per_pair.iter().map(|p| p.calibration)),
            keypoints: per_pair.iter().map(|p| p.keypoints).sum(),
            pixels: per_pair.iter().map(|p| p.pixels).sum(),
            per_pair,
        }
    }

    /// One row per pair: id, PCK per alpha, dense, EPE, calibration.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("id");
        for e in &self.pck {
            let _ = write!(out, ",pck@{}", e.alpha);
        }
        out.push_str(",synthetic_dense,epe,calibration,keypoints,pixels\n");
        for p in &self.per_pair {
            out.push_str(&p.id);
            for e in &p.pck {
                let _ = write!(out, ",{}", opt(e.value));
            }
            let _ = writeln!(
                out,
                ",{},{},{},{},{}",
                opt(p.synthetic_dense),
                opt(p.epe),
                opt(p.calibration),
                p.keypoints,
                p.pixels
            );
        }
        out
    }
}
