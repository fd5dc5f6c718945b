//! Per-pair optimization of `(Ĝ_st, Ĝ_ts, Ĉ_s, Ĉ_t)` against the
//! unsupervised objective, coarse to fine.
//!
//! Grids are displacements from identity, confidences are logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureKind};
use crate::imagery::{ConfidenceMap, ImageBuffer, Mask, Prediction, SamplingGrid};
use crate::losses::{
    total_objective, ConfidenceGradient, LossTerm, LossWeights, ObjectiveInputs, PairView, Quantity, SmoothMode, Stage,
};
use crate::optim::{AdamConfig, OptimizerState};
use crate::tensor::{downsample_box2, resize_bilinear, Tensor};

/// Smoothness weight of the per-pair solver. Per-pixel displacements have
/// no shared parameters, so they need a stiffer prior than the predictor.
pub const DIRECT_SMOOTH_WEIGHT: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageBudget {
    pub stage: Stage,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectSolveConfig {
    /// Run in order at every pyramid level.
    pub schedule: Vec<StageBudget>,
    /// Pyramid levels; level `k` of `n` works at `1 / 2^(n-1-k)` resolution.
    pub levels: usize,
    /// Adam step size for the displacement fields (normalized units).
    pub grid_learning_rate: f64,
    /// Adam step size for the confidence logits.
    pub confidence_learning_rate: f64,
    /// Starting logit; confidences start at `sigmoid(init_logit)`.
    pub init_logit: f64,
    pub weights: LossWeights,
    pub features: FeatureKind,
    pub feature_seed: u64,
    pub smooth_mode: SmoothMode,
    pub confidence_gradient: ConfidenceGradient,
}

impl Default for DirectSolveConfig {
    fn default() -> Self {
        Self {
            schedule: vec![
                StageBudget {
                    stage: Stage::Matching,
                    iterations: 200,
                },
                StageBudget {
                    stage: Stage::Uncertainty,
                    iterations: 100,
                },
            ],
            levels: 3,
            grid_learning_rate: 0.004,
            confidence_learning_rate: 0.05,
            init_logit: 6.0,
            weights: LossWeights {
                smooth: DIRECT_SMOOTH_WEIGHT,
                ..LossWeights::default()
            },
            features: FeatureKind::Pyramid,
            feature_seed: 0,
            smooth_mode: SmoothMode::Displacement,
            confidence_gradient: ConfidenceGradient::UncertaintyOnly,
        }
    }
}

impl DirectSolveConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.levels == 0 {
            return Err(Error::InvalidValue("at least one pyramid level is needed".into()));
        }
        for (what, v) in [
            ("grid learning rate", self.grid_learning_rate),
            ("confidence learning rate", self.confidence_learning_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidValue(format!("{what} {v}")));
            }
        }
        if !self.init_logit.is_finite() {
            return Err(Error::InvalidValue(format!("initial logit {}", self.init_logit)));
        }
        Ok(())
    }

    /// Same schedule with every budget replaced by `iterations`.
    pub fn with_iterations(mut self, iterations: usize) -> Self {
        for b in &mut self.schedule {
            b.iterations = iterations;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub stage: Stage,
    pub iteration: usize,
    pub total: f64,
    pub terms: Vec<(LossTerm, f64)>,
}

#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub prediction: Prediction,
    pub trace: Vec<TraceEntry>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest f32 below one.
pub const MAX_CONFIDENCE: f32 = 1.0 - f32::EPSILON / 2.0;
pub const MIN_CONFIDENCE: f32 = f32::MIN_POSITIVE;

/// Stored confidence for a logit, strictly inside `(0, 1)` after rounding.
pub fn confidence_from_logit(x: f64) -> f32 {
    (sigmoid(x) as f32).clamp(MIN_CONFIDENCE, MAX_CONFIDENCE)
}

fn halve(t: &Tensor) -> Tensor {
    if t.height.is_multiple_of(2) && t.width.is_multiple_of(2) {
        downsample_box2(t)
    } else {
        resize_bilinear(t, t.height.div_ceil(2).max(2), t.width.div_ceil(2).max(2))
    }
}

/// Images and masks at each pyramid level, coarsest first.
struct Level {
    image_s: ImageBuffer,
    image_t: ImageBuffer,
    mask_s: Mask,
    mask_t: Mask,
}

fn pyramid(
    image_s: &ImageBuffer,
    image_t: &ImageBuffer,
    mask_s: &Mask,
    mask_t: &Mask,
    levels: usize,
) -> Result<Vec<Level>> {
    let mut out = vec![Level {
        image_s: image_s.clone(),
        image_t: image_t.clone(),
        mask_s: mask_s.clone(),
        mask_t: mask_t.clone(),
    }];
    for _ in 1..levels {
        let prev = out.last().expect("non-empty");
        if prev.image_s.height() < 8 || prev.image_s.width() < 8 {
            break;
        }
        let mask = |m: &Mask| -> Result<Mask> {
            let t = halve(&m.to_tensor());
            Mask::new(t.height, t.width, t.data.iter().map(|&v| v >= 0.5).collect())
        };
        let next = Level {
            image_s: ImageBuffer::from_tensor(&halve(&prev.image_s.to_tensor())),
            image_t: ImageBuffer::from_tensor(&halve(&prev.image_t.to_tensor())),
            mask_s: mask(&prev.mask_s)?,
            mask_t: mask(&prev.mask_t)?,
        };
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

/// Optimization variables at one resolution.
struct Params {
    d_st: Tensor,
    d_ts: Tensor,
    l_s: Tensor,
    l_t: Tensor,
}

impl Params {
    fn init(h: usize, w: usize, logit: f64) -> Self {
        Self {
            d_st: Tensor::zeros(2, h, w),
            d_ts: Tensor::zeros(2, h, w),
            l_s: Tensor::filled(1, h, w, logit),
            l_t: Tensor::filled(1, h, w, logit),
        }
    }

    fn resized(&self, h: usize, w: usize) -> Self {
        if (self.d_st.height, self.d_st.width) == (h, w) {
            return Self {
                d_st: self.d_st.clone(),
                d_ts: self.d_ts.clone(),
                l_s: self.l_s.clone(),
                l_t: self.l_t.clone(),
            };
        }
        Self {
            d_st: resize_bilinear(&self.d_st, h, w),
            d_ts: resize_bilinear(&self.d_ts, h, w),
            l_s: resize_bilinear(&self.l_s, h, w),
            l_t: resize_bilinear(&self.l_t, h, w),
        }
    }

    fn prediction(&self) -> Result<Prediction> {
        let conf = |l: &Tensor| {
            ConfidenceMap::new(
                l.height,
                l.width,
                l.data.iter().map(|&v| confidence_from_logit(v)).collect(),
            )
        };
        Ok(Prediction {
            grid_st: SamplingGrid::from_displacement(&self.d_st)?,
            grid_ts: SamplingGrid::from_displacement(&self.d_ts)?,
            conf_s: conf(&self.l_s)?,
            conf_t: conf(&self.l_t)?,
        })
    }
}

/// Optimizes a bidirectional prediction for one pair.
///
/// Starts from identity grids and near-one confidences, runs the stage
/// schedule at every pyramid level and upsamples the displacements and
/// logits between levels. A non-finite loss aborts with the last trace
/// entries in the error.
pub fn direct_solve(
    image_s: &ImageBuffer,
    image_t: &ImageBuffer,
    mask_s: &Mask,
    mask_t: &Mask,
    config: &DirectSolveConfig,
) -> Result<SolveOutput> {
    config.validate()?;
    let (h, w) = (image_s.height(), image_s.width());
    if (image_t.height(), image_t.width()) != (h, w) || image_t.channels() != image_s.channels() {
        return Err(Error::dims("source and target images differ in shape"));
    }
    for m in [mask_s, mask_t] {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::dims(format!(
                "mask {}x{} for {h}x{w} images",
                m.height(),
                m.width()
            )));
        }
    }
    let extractor = FeatureExtractor::new(config.features, image_s.channels(), config.feature_seed);
    let levels = pyramid(image_s, image_t, mask_s, mask_t, config.levels)?;
    let mut trace = Vec::new();
    let mut params: Option<Params> = None;
    for (li, level) in levels.iter().enumerate() {
        let (lh, lw) = (level.image_s.height(), level.image_s.width());
        let mut p = match &params {
            Some(prev) => prev.resized(lh, lw),
            None => Params::init(lh, lw, config.init_logit),
        };
        solve_level(li, level, &mut p, &extractor, config, &mut trace)?;
        params = Some(p);
    }
    let prediction = params.expect("at least one level").prediction()?;
    Ok(SolveOutput { prediction, trace })
}

fn solve_level(
    li: usize,
    level: &Level,
    p: &mut Params,
    extractor: &FeatureExtractor,
    config: &DirectSolveConfig,
    trace: &mut Vec<TraceEntry>,
) -> Result<()> {
    let (h, w) = (level.image_s.height(), level.image_s.width());
    let n = h * w;
    let mut grid_opt = OptimizerState::new(AdamConfig::with_lr(config.grid_learning_rate), &[2 * n, 2 * n]);
    let mut conf_opt = OptimizerState::new(AdamConfig::with_lr(config.confidence_learning_rate), &[n, n]);
    for budget in &config.schedule {
        for it in 0..budget.iterations {
            let pred = p.prediction()?;
            let inputs = ObjectiveInputs {
                pair: PairView {
                    image_s: &level.image_s,
                    image_t: &level.image_t,
                    grid_st: &pred.grid_st,
                    grid_ts: &pred.grid_ts,
                    conf_s: &pred.conf_s,
                    conf_t: &pred.conf_t,
                    mask_s: &level.mask_s,
                    mask_t: &level.mask_t,
                },
                extractor,
                dense: None,
                keypoints: None,
                smooth_mode: config.smooth_mode,
                confidence_gradient: config.confidence_gradient,
            };
            let report = match total_objective(budget.stage, &inputs, &config.weights) {
                Ok(r) => r,
                Err(Error::NonFinite(msg)) => {
                    let tail: Vec<String> = trace.iter().rev().take(5).map(|e| format!("{e:?}")).collect();
                    return Err(Error::NonFinite(format!(
                        "direct solve level {li} stage {} iteration {it}: {msg}; last entries: {}",
                        budget.stage,
                        tail.join(" | ")
                    )));
                }
                Err(e) => return Err(e),
            };
            trace.push(TraceEntry {
                level: li,
                height: h,
                width: w,
                stage: budget.stage,
                iteration: it,
                total: report.total,
                terms: report.terms.iter().map(|(k, v)| (*k, *v)).collect(),
            });
            let zero2 = Tensor::zeros(2, h, w);
            let g_st = report.grad(Quantity::GridSt).unwrap_or(&zero2);
            let g_ts = report.grad(Quantity::GridTs).unwrap_or(&zero2);
            grid_opt.adam_step(&mut [&mut p.d_st.data, &mut p.d_ts.data], &[&g_st.data, &g_ts.data])?;
            let chain = |g: Option<&Tensor>, l: &Tensor| -> Vec<f64> {
                match g {
                    Some(g) => g
                        .data
                        .iter()
                        .zip(&l.data)
                        .map(|(gv, lv)| {
                            let s = sigmoid(*lv);
                            gv * s * (1.0 - s)
                        })
                        .collect(),
                    None => vec![0.0; l.data.len()],
                }
            };
            let (gs, gt) = (
                chain(report.grad(Quantity::ConfS), &p.l_s),
                chain(report.grad(Quantity::ConfT), &p.l_t),
            );
            if gs.iter().chain(&gt).any(|v| *v != 0.0) {
                conf_opt.adam_step(&mut [&mut p.l_s.data, &mut p.l_t.data], &[&gs, &gt])?;
            }
        }
    }
    Ok(())
}
