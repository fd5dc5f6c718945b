//! Run configuration: one JSON document, every key defaulted, unknown keys
//! rejected. Command-line flags override the matching keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use warpgrid::losses::LossWeights;
use warpgrid::metrics::DEFAULT_ALPHAS;
use warpgrid::solver::DirectSolveConfig;
use warpgrid::synth::{SynthConfig, TextureKind, WarpRanges, DEFAULT_KEYPOINTS};
use warpgrid::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    #[default]
    Direct,
    Predictor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub count: usize,
    pub textures: Vec<TextureKind>,
    pub warp: WarpRanges,
    pub occlusion_fraction: f64,
    pub keypoints: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            count: 10,
            textures: TextureKind::ALL.to_vec(),
            warp: WarpRanges::default(),
            occlusion_fraction: 0.0,
            keypoints: DEFAULT_KEYPOINTS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetPaths {
    /// Dense-labelled pairs: the solve/eval/viz input and the training set.
    pub data: Option<PathBuf>,
    /// Keypoint-only split used as the real-data stand-in from stage ii.
    pub real_proxy: Option<PathBuf>,
    pub held_out: Option<PathBuf>,
    /// Directory of saved predictions.
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Square image side.
    pub size: usize,
    pub synth: SynthOptions,
    pub datasets: DatasetPaths,
    /// Replaces the loss weights of both the direct solver and training.
    pub weights: Option<LossWeights>,
    pub solver: SolverMode,
    pub direct: DirectSolveConfig,
    /// Predictor checkpoint for `solver = predictor`.
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    pub alphas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 64,
            synth: SynthOptions::default(),
            datasets: DatasetPaths::default(),
            weights: None,
            solver: SolverMode::default(),
            direct: DirectSolveConfig::default(),
            checkpoint: None,
            train: TrainConfig::default(),
            alphas: DEFAULT_ALPHAS.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    /// Pushes the shared seed and weight overrides into the sub-configs and
    /// checks everything.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        if let Some(w) = &self.weights {
            self.direct.weights = *w;
            self.train.weights = *w;
        }
        self.train.seed = self.seed;
        self.train.predictor.seed = self.seed;
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(CliError::Config(format!(
                "alphas must be positive, got {:?}",
                self.alphas
            )));
        }
        self.direct.validate()?;
        self.train.validate()?;
        self.synth_config().validate()?;
        Ok(self)
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            height: self.size,
            width: self.size,
            textures: self.synth.textures.clone(),
            warp: self.synth.warp,
            occlusion_fraction: self.synth.occlusion_fraction,
            keypoints: self.synth.keypoints,
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.alphas, vec![0.1, 0.05, 0.01]);
        assert_eq!(c.solver, SolverMode::Direct);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sede": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"synth": {"cnt": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"weights": {"dense": 1, "foo": 2}}"#).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig {
            seed: 11,
            solver: SolverMode::Predictor,
            datasets: DatasetPaths {
                data: Some("pairs".into()),
                ..DatasetPaths::default()
            },
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn weight_override_reaches_both_paths() {
        let c = RunConfig::from_json(r#"{"seed": 4, "weights": {"smooth": 5.0}}"#)
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(c.direct.weights.smooth, 5.0);
        assert_eq!(c.train.weights.smooth, 5.0);
        assert_eq!(c.train.weights.dense, LossWeights::default().dense);
        assert_eq!(c.train.seed, 4);
    }

    #[test]
    fn bad_values_fail_resolution() {
        assert!(RunConfig::from_json(r#"{"alphas": []}"#).unwrap().resolve().is_err());
        assert!(RunConfig::from_json(r#"{"size": 2}"#).unwrap().resolve().is_err());
        assert!(RunConfig::from_json(r#"{"weights": {"dense": -1}}"#)
            .unwrap()
            .resolve()
            .is_err());
    }
}
