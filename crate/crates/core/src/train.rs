//! Staged training of [`TinyPredictor`].
//!
//! Stage i sees only dense-labelled synthetic pairs. From stage ii on, each
//! synthetic sample is followed by `real_per_synthetic` keypoint-only pairs
//! standing in for real data. Stages iii and iv add the unsupervised terms
//! to both kinds of sample.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureKind};
use crate::losses::{
    loss_dense_supervised, total_objective, ConfidenceGradient, DenseTargets, LossTerm, LossWeights, ObjectiveInputs,
    PairView, Quantity, SmoothMode, Stage,
};
use crate::metrics::{end_point_error, synthetic_dense};
use crate::optim::{AdamConfig, OptimizerState};
use crate::predictor::{CheckpointInfo, PredictorConfig, TinyPredictor};
use crate::solver::StageBudget;
use crate::synth::SyntheticPair;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const CHECKPOINT_PREFIX: &str = "stage_";
pub const CHECKPOINT_EXT: &str = "wckp";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub predictor: PredictorConfig,
    pub weights: LossWeights,
    /// Optimizer steps per stage, run in order.
    pub schedule: Vec<StageBudget>,
    /// Pairs averaged per optimizer step.
    pub batch_size: usize,
    /// Keypoint-only pairs per synthetic pair from stage ii on.
    pub real_per_synthetic: usize,
    /// Held-out evaluation period in steps; every stage also ends with one.
    pub eval_every: usize,
    pub seed: u64,
    /// Features of the matching loss.
    pub features: FeatureKind,
    pub feature_seed: u64,
    pub smooth_mode: SmoothMode,
    pub confidence_gradient: ConfidenceGradient,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            predictor: PredictorConfig::default(),
            weights: LossWeights::default(),
            schedule: Stage::ALL
                .iter()
                .map(|&stage| StageBudget { stage, iterations: 200 })
                .collect(),
            batch_size: 4,
            real_per_synthetic: 3,
            eval_every: 50,
            seed: 0,
            features: FeatureKind::Pyramid,
            feature_seed: 0,
            smooth_mode: SmoothMode::Displacement,
            confidence_gradient: ConfidenceGradient::UncertaintyOnly,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.predictor.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidValue("batch size 0".into()));
        }
        Ok(())
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        for b in &mut self.schedule {
            b.iterations = iterations;
        }
        self
    }
}

/// Held-out metrics, means over pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub pairs: usize,
    /// Unweighted dense supervised loss.
    pub dense_loss: f64,
    pub synthetic_dense: Option<f64>,
    pub epe: Option<f64>,
}

/// One evaluation record; `terms` are means over the steps since the
/// previous record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub step: usize,
    pub samples: usize,
    pub synthetic_samples: usize,
    pub real_proxy_samples: usize,
    pub terms: BTreeMap<LossTerm, f64>,
    pub total: f64,
    pub held_out: Option<HeldOut>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub predictor: TinyPredictor,
    pub log: Vec<LogRecord>,
    /// State at the end of each stage with a non-zero budget.
    pub snapshots: Vec<(Stage, TinyPredictor)>,
    pub checkpoints: Vec<PathBuf>,
}

pub struct TrainData<'a> {
    /// Dense-labelled pairs.
    pub synthetic: &'a [SyntheticPair],
    /// Keypoint-only pairs; their grids are never read.
    pub real_proxy: &'a [SyntheticPair],
    pub held_out: &'a [SyntheticPair],
}

pub fn checkpoint_path(dir: impl AsRef<Path>, stage: Stage) -> PathBuf {
    dir.as_ref()
        .join(format!("{CHECKPOINT_PREFIX}{}.{CHECKPOINT_EXT}", stage.label()))
}

/// Held-out dense loss, Synthetic Dense and EPE of `model`.
pub fn evaluate_held_out(model: &TinyPredictor, pairs: &[SyntheticPair]) -> Result<Option<HeldOut>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let (mut dense, mut sd, mut sd_n, mut epe, mut epe_n) = (0.0, 0.0, 0usize, 0.0, 0usize);
    for p in pairs {
        let pred = model.predict(&p.image_s, &p.image_t)?;
        dense += loss_dense_supervised(&pred.grid_st, &p.grid_st, &p.vis_t)?.total
            + loss_dense_supervised(&pred.grid_ts, &p.grid_ts, &p.vis_s)?.total;
        if let Some(v) = synthetic_dense(
            &pred.grid_st,
            &pred.grid_ts,
            &p.grid_st,
            &p.grid_ts,
            &p.image_s,
            &p.image_t,
            &p.vis_s,
            &p.vis_t,
        )? {
            sd += v;
            sd_n += 1;
        }
        if let Some(v) = end_point_error(&pred.grid_st, &p.grid_st, &p.vis_t)? {
            epe += v;
            epe_n += 1;
        }
    }
    Ok(Some(HeldOut {
        pairs: pairs.len(),
        dense_loss: dense / pairs.len() as f64,
        synthetic_dense: (sd_n > 0).then(|| sd / sd_n as f64),
        epe: (epe_n > 0).then(|| epe / epe_n as f64),
    }))
}

struct Window {
    terms: BTreeMap<LossTerm, f64>,
    total: f64,
    samples: usize,
    synthetic: usize,
    real: usize,
}

impl Window {
    fn new() -> Self {
        Self {
            terms: BTreeMap::new(),
            total: 0.0,
            samples: 0,
            synthetic: 0,
            real: 0,
        }
    }
}

/// Gradients of one sample, accumulated into `acc`.
#[allow(clippy::too_many_arguments)]
fn sample_step(
    model: &TinyPredictor,
    pair: &SyntheticPair,
    supervised: bool,
    stage: Stage,
    config: &TrainConfig,
    extractor: &FeatureExtractor,
    acc: &mut [Vec<f64>],
    window: &mut Window,
) -> Result<()> {
    let mut tape = Tape::new(&model.params);
    let nodes = model.forward(&mut tape, &pair.image_s.to_tensor(), &pair.image_t.to_tensor())?;
    let pred = model.prediction_from(&tape, &nodes)?;
    // Stage i objective for labelled pairs; sparse from stage ii for the proxy.
    let objective_stage = if supervised { stage } else { stage.max(Stage::Sparse) };
    let inputs = ObjectiveInputs {
        pair: PairView {
            image_s: &pair.image_s,
            image_t: &pair.image_t,
            grid_st: &pred.grid_st,
            grid_ts: &pred.grid_ts,
            conf_s: &pred.conf_s,
            conf_t: &pred.conf_t,
            mask_s: &pair.mask_s,
            mask_t: &pair.mask_t,
        },
        extractor,
        dense: supervised.then_some(DenseTargets {
            grid_st: &pair.grid_st,
            grid_ts: &pair.grid_ts,
            vis_s: &pair.vis_s,
            vis_t: &pair.vis_t,
        }),
        keypoints: (!supervised).then_some(&pair.keypoints),
        smooth_mode: config.smooth_mode,
        confidence_gradient: config.confidence_gradient,
    };
    let report = total_objective(objective_stage, &inputs, &config.weights)?;
    let mut seeds: Vec<(crate::tape::NodeId, &Tensor)> = Vec::new();
    for (q, node) in [
        (Quantity::GridSt, nodes.grid_st),
        (Quantity::GridTs, nodes.grid_ts),
        (Quantity::ConfS, nodes.conf_s),
        (Quantity::ConfT, nodes.conf_t),
    ] {
        if let Some(g) = report.grad(q) {
            seeds.push((node, g));
        }
    }
    let grads = tape.backward(&seeds)?;
    for (a, g) in acc.iter_mut().zip(&grads.params) {
        for (x, y) in a.iter_mut().zip(g) {
            *x += y;
        }
    }
    for (t, v) in &report.terms {
        *window.terms.entry(*t).or_insert(0.0) += v;
    }
    window.total += report.total;
    window.samples += 1;
    if supervised {
        window.synthetic += 1;
    } else {
        window.real += 1;
    }
    Ok(())
}

/// Runs the staged schedule from a seeded initialization.
///
/// Checkpoints go to `checkpoint_dir` as `stage_<label>.wckp`; each log
/// record is also written as one JSON line to `log_sink`.
pub fn train_predictor(
    data: &TrainData,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutput> {
    config.validate()?;
    let mut model = TinyPredictor::new(config.predictor.clone())?;
    let mut out = TrainOutput {
        predictor: model.clone(),
        log: Vec::new(),
        snapshots: Vec::new(),
        checkpoints: Vec::new(),
    };
    let active: Vec<&StageBudget> = config.schedule.iter().filter(|b| b.iterations > 0).collect();
    if active.is_empty() {
        return Ok(out);
    }
    if data.synthetic.is_empty() {
        return Err(Error::EmptyDataset("no dense-labelled training pairs".into()));
    }
    if data.real_proxy.is_empty() && active.iter().any(|b| b.stage >= Stage::Sparse) && config.real_per_synthetic > 0 {
        return Err(Error::EmptyDataset(
            "no keypoint-only pairs for stages ii and later".into(),
        ));
    }
    let extractor = FeatureExtractor::new(config.features, config.predictor.image_channels, config.feature_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptimizerState::new(
        AdamConfig::with_lr(config.weights.learning_rate),
        &model.params.lengths(),
    );
    let mut sample_index = 0usize;

    for budget in active {
        let stage = budget.stage;
        let mut window = Window::new();
        for step in 1..=budget.iterations {
            let mut acc: Vec<Vec<f64>> = model.params.lengths().into_iter().map(|n| vec![0.0; n]).collect();
            for _ in 0..config.batch_size {
                let cycle = config.real_per_synthetic + 1;
                let supervised = stage == Stage::Dense || sample_index.is_multiple_of(cycle);
                sample_index += 1;
                let pool = if supervised { data.synthetic } else { data.real_proxy };
                let pair = &pool[rng.random_range(0..pool.len())];
                sample_step(
                    &model,
                    pair,
                    supervised,
                    stage,
                    config,
                    &extractor,
                    &mut acc,
                    &mut window,
                )
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("stage {stage} step {step}: {msg}")),
                    e => e,
                })?;
            }
            let inv = 1.0 / config.batch_size as f64;
            acc.iter_mut().flatten().for_each(|v| *v *= inv);
            if acc.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "stage {stage} step {step}: parameter gradient"
                )));
            }
            {
                let mut params: Vec<&mut [f64]> =
                    model.params.buffers_mut().iter_mut().map(Vec::as_mut_slice).collect();
                let grads: Vec<&[f64]> = acc.iter().map(Vec::as_slice).collect();
                opt.adam_step(&mut params, &grads)?;
            }
            model.round_parameters();
            if !model.params.all_finite() {
                return Err(Error::NonFinite(format!("stage {stage} step {step}: parameters")));
            }
            let due = (config.eval_every > 0 && step % config.eval_every == 0) || step == budget.iterations;
            if due {
                let n = window.samples.max(1) as f64;
                let record = LogRecord {
                    stage,
                    step,
                    samples: window.samples,
                    synthetic_samples: window.synthetic,
                    real_proxy_samples: window.real,
                    terms: window.terms.iter().map(|(k, v)| (*k, v / n)).collect(),
                    total: window.total / n,
                    held_out: evaluate_held_out(&model, data.held_out)?,
                };
                if let Some(sink) = log_sink.as_deref_mut() {
                    serde_json::to_writer(&mut *sink, &record)?;
                    sink.write_all(b"\n")?;
                }
                out.log.push(record);
                window = Window::new();
            }
        }
        if let Some(dir) = checkpoint_dir {
            let path = checkpoint_path(dir, stage);
            model.save(
                &path,
                &CheckpointInfo {
                    stage: Some(stage),
                    step: budget.iterations as u64,
                },
            )?;
            out.checkpoints.push(path);
        }
        out.snapshots.push((stage, model.clone()));
    }
    out.predictor = model;
    Ok(out)
}
