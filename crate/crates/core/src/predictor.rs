//! Small convolutional encoder-decoder that maps an image pair to
//! bidirectional grids and confidences, plus its checkpoint format.
//!
//! Layout: `depth` stride-2 encoder blocks, `depth` decoder blocks that
//! upsample by two and concatenate the matching encoder activation, and a
//! zero-initialized 3×3 head. Grids are identity plus the head's
//! displacement channels; confidences are the sigmoid of its logit channels.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureKind};
use crate::imagery::{read_file, ConfidenceMap, ImageBuffer, Prediction, SamplingGrid};
use crate::losses::Stage;
use crate::solver::confidence_from_logit;
use crate::tape::{Activation, NodeId, ParamId, ParamStore, Tape};
use crate::tensor::{ConvGeometry, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER_LEN: usize = 12;
pub const LEAKY_SLOPE: f64 = 0.1;
/// Channel growth stops after this many doublings.
const MAX_DOUBLINGS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    /// Encoder blocks; inputs must be divisible by `2^depth`.
    pub depth: usize,
    /// Per-image features concatenated at the input.
    pub features: FeatureKind,
    pub feature_seed: u64,
    /// One shared network run once per direction.
    pub symmetric: bool,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            base_channels: 32,
            depth: 4,
            features: FeatureKind::Identity,
            feature_seed: 0,
            symmetric: false,
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.base_channels == 0 || self.depth == 0 {
            return Err(Error::InvalidValue(format!(
                "predictor needs positive channels and depth, got {}/{}/{}",
                self.image_channels, self.base_channels, self.depth
            )));
        }
        if self.depth > 8 {
            return Err(Error::InvalidValue(format!("depth {} exceeds 8", self.depth)));
        }
        Ok(())
    }

    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    fn encoder_channels(&self, k: usize) -> usize {
        self.base_channels << k.min(MAX_DOUBLINGS)
    }

    fn head_channels(&self) -> usize {
        if self.symmetric {
            3
        } else {
            6
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
    geometry: ConvGeometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyPredictor {
    pub config: PredictorConfig,
    pub params: ParamStore,
    extractor: FeatureExtractor,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
    head: Layer,
}

/// Output nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub grid_st: NodeId,
    pub grid_ts: NodeId,
    pub conf_s: NodeId,
    pub conf_t: NodeId,
    pub logit_s: NodeId,
    pub logit_t: NodeId,
}

/// Metadata stored next to the layer spec in a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointInfo {
    pub stage: Option<Stage>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BufferSpec {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointBlob {
    config: PredictorConfig,
    info: CheckpointInfo,
    buffers: Vec<BufferSpec>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl TinyPredictor {
    /// Seeded He-normal weights, zero biases, zero head.
    pub fn new(config: PredictorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut layer = |params: &mut ParamStore, name: String, i: usize, o: usize, stride: usize, zero: bool| {
            let geometry = ConvGeometry {
                in_channels: i,
                out_channels: o,
                kernel: 3,
                stride,
                pad: 1,
            };
            let std = (2.0 / (9 * i) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            let w = (0..geometry.weight_len())
                .map(|_| if zero { 0.0 } else { round_f32(dist.sample(&mut rng)) })
                .collect();
            let weight = params.add(format!("{name}.weight"), w);
            let bias = params.add(format!("{name}.bias"), vec![0.0; o]);
            Layer { weight, bias, geometry }
        };
        let extractor = FeatureExtractor::new(config.features, config.image_channels, config.feature_seed);
        let feat = extractor.out_channels(config.image_channels);
        let input = 2 * feat;
        let mut encoder = Vec::new();
        let mut skips = vec![input];
        let mut c = input;
        for k in 0..config.depth {
            let o = config.encoder_channels(k);
            encoder.push(layer(&mut params, format!("enc{k}"), c, o, 2, false));
            skips.push(o);
            c = o;
        }
        let mut decoder = Vec::new();
        for j in 0..config.depth {
            let level = config.depth - 1 - j;
            let skip = skips[level];
            let o = if level == 0 {
                config.base_channels
            } else {
                config.encoder_channels(level - 1)
            };
            decoder.push(layer(&mut params, format!("dec{j}"), c + skip, o, 1, false));
            c = o;
        }
        let head = layer(&mut params, "head".into(), c, config.head_channels(), 1, true);
        Ok(Self {
            config,
            params,
            extractor,
            encoder,
            decoder,
            head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Rounds every parameter to f32, the checkpoint precision.
    pub fn round_parameters(&mut self) {
        for b in self.params.buffers_mut() {
            b.iter_mut().for_each(|v| *v = round_f32(*v));
        }
    }

    fn check_inputs(&self, image_s: &Tensor, image_t: &Tensor) -> Result<()> {
        let (c, h, w) = image_s.shape();
        if image_t.shape() != (c, h, w) {
            return Err(Error::dims("source and target images differ in shape"));
        }
        if c != self.config.image_channels {
            return Err(Error::dims(format!(
                "{c} channels, predictor expects {}",
                self.config.image_channels
            )));
        }
        let d = self.config.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::InvalidDimensions(format!("{h}x{w} is not divisible by {d}")));
        }
        Ok(())
    }

    /// Runs the network on `(reference, other)` features; the head output
    /// lives on the first image's lattice.
    fn trunk<'a>(&'a self, tape: &mut Tape<'a>, first: NodeId, second: NodeId) -> Result<NodeId> {
        let leaky = Activation::LeakyRelu(LEAKY_SLOPE);
        let x = tape.concat(&[first, second])?;
        let mut skips = vec![x];
        let mut cur = x;
        for l in &self.encoder {
            let y = tape.conv(cur, l.weight, l.bias, l.geometry)?;
            cur = tape.act(y, leaky)?;
            skips.push(cur);
        }
        for (j, l) in self.decoder.iter().enumerate() {
            let up = tape.upsample(cur, 2)?;
            let cat = tape.concat(&[up, skips[self.config.depth - 1 - j]])?;
            let y = tape.conv(cat, l.weight, l.bias, l.geometry)?;
            cur = tape.act(y, leaky)?;
        }
        tape.conv(cur, self.head.weight, self.head.bias, self.head.geometry)
    }

    /// Records the forward pass on `tape`.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, image_s: &Tensor, image_t: &Tensor) -> Result<ForwardNodes> {
        self.check_inputs(image_s, image_t)?;
        let (_, h, w) = image_s.shape();
        let fs_ = tape.input(self.extractor.forward(image_s))?;
        let ft = tape.input(self.extractor.forward(image_t))?;
        let identity = tape.input(SamplingGrid::identity(h, w)?.to_tensor())?;
        let (d_st, d_ts, logit_s, logit_t) = if self.config.symmetric {
            // Target lattice: coordinates into the source.
            let on_t = self.trunk(tape, ft, fs_)?;
            let on_s = self.trunk(tape, fs_, ft)?;
            (
                tape.slice(on_t, 0, 2)?,
                tape.slice(on_s, 0, 2)?,
                tape.slice(on_s, 2, 1)?,
                tape.slice(on_t, 2, 1)?,
            )
        } else {
            let out = self.trunk(tape, fs_, ft)?;
            (
                tape.slice(out, 0, 2)?,
                tape.slice(out, 2, 2)?,
                tape.slice(out, 4, 1)?,
                tape.slice(out, 5, 1)?,
            )
        };
        let grid_st = tape.add(identity, d_st)?;
        let grid_ts = tape.add(identity, d_ts)?;
        let conf_s = tape.act(logit_s, Activation::Sigmoid)?;
        let conf_t = tape.act(logit_t, Activation::Sigmoid)?;
        Ok(ForwardNodes {
            grid_st,
            grid_ts,
            conf_s,
            conf_t,
            logit_s,
            logit_t,
        })
    }

    /// Converts recorded outputs into stored maps.
    pub fn prediction_from(&self, tape: &Tape, nodes: &ForwardNodes) -> Result<Prediction> {
        let grid = |id: NodeId| SamplingGrid::from_tensor(tape.value(id));
        let conf = |id: NodeId| {
            let t = tape.value(id);
            ConfidenceMap::new(
                t.height,
                t.width,
                t.data.iter().map(|&v| confidence_from_logit(v)).collect(),
            )
        };
        Ok(Prediction {
            grid_st: grid(nodes.grid_st)?,
            grid_ts: grid(nodes.grid_ts)?,
            conf_s: conf(nodes.logit_s)?,
            conf_t: conf(nodes.logit_t)?,
        })
    }

    pub fn predict(&self, image_s: &ImageBuffer, image_t: &ImageBuffer) -> Result<Prediction> {
        let mut tape = Tape::new(&self.params);
        let nodes = self.forward(&mut tape, &image_s.to_tensor(), &image_t.to_tensor())?;
        self.prediction_from(&tape, &nodes)
    }

    pub fn to_checkpoint_bytes(&self, info: &CheckpointInfo) -> Result<Vec<u8>> {
        let blob = CheckpointBlob {
            config: self.config.clone(),
            info: info.clone(),
            buffers: self
                .params
                .names()
                .iter()
                .zip(self.params.buffers())
                .map(|(name, b)| BufferSpec {
                    name: name.clone(),
                    len: b.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&blob)?;
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + json.len() + 4 * self.params.count());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.buffers().iter().flatten() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, CheckpointInfo)> {
        if bytes.len() < CHECKPOINT_HEADER_LEN {
            return Err(Error::SizeMismatch {
                expected: CHECKPOINT_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let blob_len = word(8) as usize;
        let blob_end = CHECKPOINT_HEADER_LEN + blob_len;
        if bytes.len() < blob_end {
            return Err(Error::SizeMismatch {
                expected: blob_end,
                found: bytes.len(),
            });
        }
        let blob: CheckpointBlob = serde_json::from_slice(&bytes[CHECKPOINT_HEADER_LEN..blob_end])?;
        let mut model = Self::new(blob.config)?;
        let layout: Vec<(&str, usize)> = model
            .params
            .names()
            .iter()
            .map(String::as_str)
            .zip(model.params.lengths())
            .collect();
        let stored: Vec<(&str, usize)> = blob.buffers.iter().map(|b| (b.name.as_str(), b.len)).collect();
        if layout != stored {
            return Err(Error::dims("checkpoint buffers do not match the layer spec"));
        }
        let expected = blob_end + 4 * model.params.count();
        if bytes.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: bytes.len(),
            });
        }
        let mut values = bytes[blob_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        for b in model.params.buffers_mut() {
            for v in b.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        if !model.params.all_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok((model, blob.info))
    }

    pub fn save(&self, path: impl AsRef<Path>, info: &CheckpointInfo) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes(info)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, CheckpointInfo)> {
        Self::from_checkpoint_bytes(&read_file(path.as_ref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_texture, TextureKind};

    fn small(symmetric: bool) -> PredictorConfig {
        PredictorConfig {
            base_channels: 4,
            depth: 2,
            symmetric,
            seed: 3,
            ..PredictorConfig::default()
        }
    }

    fn images(h: usize, w: usize) -> (ImageBuffer, ImageBuffer) {
        (
            generate_texture(h, w, TextureKind::Blobs, 1).unwrap(),
            generate_texture(h, w, TextureKind::ValueNoise, 2).unwrap(),
        )
    }

    #[test]
    fn fresh_predictor_is_identity_with_half_confidence() {
        let p = TinyPredictor::new(PredictorConfig::default()).unwrap();
        let (a, b) = images(32, 48);
        let out = p.predict(&a, &b).unwrap();
        let id = SamplingGrid::identity(32, 48).unwrap();
        assert_eq!(out.grid_st, id);
        assert_eq!(out.grid_ts, id);
        assert!(out.conf_s.data().iter().chain(out.conf_t.data()).all(|&c| c == 0.5));
    }

    #[test]
    fn prediction_is_deterministic() {
        let mut p = TinyPredictor::new(small(false)).unwrap();
        perturb_head(&mut p);
        let (a, b) = images(16, 16);
        assert_eq!(p.predict(&a, &b).unwrap(), p.predict(&a, &b).unwrap());
    }

    fn perturb_head(p: &mut TinyPredictor) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = Normal::new(0.0, 0.05).unwrap();
        for id in [p.head.weight, p.head.bias] {
            for v in p.params.get_mut(id) {
                *v = round_f32(n.sample(&mut rng));
            }
        }
    }

    #[test]
    fn symmetric_predictor_swaps_roles() {
        let mut p = TinyPredictor::new(small(true)).unwrap();
        perturb_head(&mut p);
        let (a, b) = images(16, 16);
        let ab = p.predict(&a, &b).unwrap();
        let ba = p.predict(&b, &a).unwrap();
        assert_ne!(ab.grid_st, SamplingGrid::identity(16, 16).unwrap());
        assert_eq!(ab.grid_st, ba.grid_ts);
        assert_eq!(ab.grid_ts, ba.grid_st);
        assert_eq!(ab.conf_s, ba.conf_t);
        assert_eq!(ab.conf_t, ba.conf_s);
    }

    #[test]
    fn indivisible_inputs_are_rejected() {
        let p = TinyPredictor::new(PredictorConfig::default()).unwrap();
        let (a, b) = images(24, 32);
        assert!(matches!(p.predict(&a, &b), Err(Error::InvalidDimensions(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = TinyPredictor::new(small(false)).unwrap();
        perturb_head(&mut p);
        let info = CheckpointInfo {
            stage: Some(Stage::Matching),
            step: 17,
        };
        let bytes = p.to_checkpoint_bytes(&info).unwrap();
        assert_eq!(&bytes[..4], b"WCKP");
        let (q, back) = TinyPredictor::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, info);
        assert_eq!(q, p);
        assert_eq!(q.to_checkpoint_bytes(&info).unwrap(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let p = TinyPredictor::new(small(false)).unwrap();
        let bytes = p.to_checkpoint_bytes(&CheckpointInfo::default()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            TinyPredictor::from_checkpoint_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            TinyPredictor::from_checkpoint_bytes(&bytes[..bytes.len() - 4]),
            Err(Error::SizeMismatch { .. })
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            TinyPredictor::from_checkpoint_bytes(&v2),
            Err(Error::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn default_layer_spec() {
        let p = TinyPredictor::new(PredictorConfig::default()).unwrap();
        assert_eq!(p.encoder.len(), 4);
        assert_eq!(p.decoder.len(), 4);
        assert_eq!(p.encoder[0].geometry.out_channels, 32);
        assert_eq!(p.head.geometry.out_channels, 6);
        assert!(p.encoder.iter().all(|l| l.geometry.stride == 2));
    }
}
