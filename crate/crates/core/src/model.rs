//! Trained parameters with their configurations, and the checkpoint file.
//!
//! Layout: the magic bytes `SGALIGN\0`, a little-endian `u64` header length,
//! a JSON header naming every tensor and its shape, then the tensors as
//! little-endian `f64` in header order. A checkpoint written during training
//! appends the optimizer moments (first, then second) in the same order.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderConfig, EncoderParams, Mat, PreparedFragment};
use crate::matcher::{align_prepared, MatcherConfig, MatcherError, MatcherParams, SoftAlignment};
use crate::scenegraph::{io::write_atomic, Fragment, ScenePair};
use crate::training::{Adam, EpochLoss, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGALIGN\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint does not match the configuration: {0}")]
    CheckpointMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder_config: EncoderConfig,
    pub matcher_config: MatcherConfig,
    pub encoder: EncoderParams,
    pub matcher: MatcherParams,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: (usize, usize),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainHeader {
    epochs_done: usize,
    step: u64,
    curve: Vec<EpochLoss>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    encoder_config: EncoderConfig,
    matcher_config: MatcherConfig,
    tensors: Vec<TensorEntry>,
    train_state: Option<TrainHeader>,
}

impl Model {
    /// Freshly initialized parameters.
    pub fn init(encoder_config: EncoderConfig, matcher_config: MatcherConfig, seed: u64) -> Result<Self, ModelError> {
        matcher_config
            .validate()
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        if encoder_config.d == 0 || encoder_config.num_classes == 0 {
            return Err(ModelError::InvalidConfig("encoder widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&mut rng, &encoder_config);
        let matcher = MatcherParams::init(&mut rng, &encoder_config, &matcher_config);
        Ok(Self { encoder_config, matcher_config, encoder, matcher })
    }

    /// Every tensor with its qualified name, encoder first.
    pub fn named_tensors(&self) -> Vec<(String, Mat)> {
        let mut out = Vec::new();
        self.encoder.map("encoder.", &mut |n, m| out.push((n.to_string(), m.clone())));
        self.matcher.map("matcher.", &mut |n, m| out.push((n.to_string(), m.clone())));
        out
    }

    pub fn tensors(&self) -> Vec<Mat> {
        let mut out = self.encoder.flatten();
        out.extend(self.matcher.flatten());
        out
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors().iter().map(|m| m.shape()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// Same structure with the tensors replaced, in [`Model::tensors`] order.
    pub fn with_tensors(&self, tensors: Vec<Mat>) -> Self {
        assert_eq!(tensors.len(), self.tensors().len());
        let mut it = tensors.into_iter();
        let encoder = self.encoder.map("", &mut |_, _| it.next().unwrap());
        let matcher = self.matcher.map("", &mut |_, _| it.next().unwrap());
        Self { encoder, matcher, ..self.clone() }
    }

    pub fn prepare(&self, f: &Fragment) -> Result<PreparedFragment, MatcherError> {
        Ok(PreparedFragment::new(f, &self.encoder_config)?)
    }

    pub fn align_fragments(&self, src: &Fragment, reference: &Fragment) -> Result<SoftAlignment, MatcherError> {
        let s = self.prepare(src)?;
        let r = self.prepare(reference)?;
        self.align_prepared(&s, &r)
    }

    pub fn align_prepared(&self, src: &PreparedFragment, reference: &PreparedFragment) -> Result<SoftAlignment, MatcherError> {
        align_prepared(src, reference, &self.encoder_config, &self.encoder, &self.matcher_config, &self.matcher)
    }

    pub fn align(&self, pair: &ScenePair) -> Result<SoftAlignment, MatcherError> {
        pair.validate()?;
        self.align_fragments(&pair.src, &pair.reference)
    }

    pub fn to_bytes(&self, state: Option<&TrainState>) -> Vec<u8> {
        let named = self.named_tensors();
        let header = Header {
            version: CHECKPOINT_VERSION,
            encoder_config: self.encoder_config.clone(),
            matcher_config: self.matcher_config.clone(),
            tensors: named.iter().map(|(n, m)| TensorEntry { name: n.clone(), shape: m.shape() }).collect(),
            train_state: state.map(|s| TrainHeader {
                epochs_done: s.epochs_done,
                step: s.adam.step,
                curve: s.curve.clone(),
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.num_parameters() * 3);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |m: &Mat| {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        named.iter().for_each(|(_, m)| push(m));
        if let Some(s) = state {
            s.adam.m.iter().chain(&s.adam.v).for_each(&mut push);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<TrainState>), ModelError> {
        let bad = |msg: &str| ModelError::Format(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated header"))?;
        let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| ModelError::Format(e.to_string()))?;
        let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| bad("missing version"))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(ModelError::UnsupportedVersion(version as u32));
        }
        let header: Header = serde_json::from_value(value).map_err(|e| ModelError::Format(e.to_string()))?;

        let skeleton = Self::init(header.encoder_config, header.matcher_config, 0)?;
        let expected = skeleton.named_tensors();
        if expected.len() != header.tensors.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                header.tensors.len()
            )));
        }
        for ((name, m), entry) in expected.iter().zip(&header.tensors) {
            if *name != entry.name || m.shape() != entry.shape {
                return Err(ModelError::CheckpointMismatch(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    m.shape()
                )));
            }
        }
        let shapes: Vec<(usize, usize)> = header.tensors.iter().map(|t| t.shape).collect();
        let count: usize = shapes.iter().map(|s| s.0 * s.1).sum();
        let blocks = if header.train_state.is_some() { 3 } else { 1 };
        let data = &bytes[16 + len..];
        if data.len() != 8 * count * blocks {
            return Err(bad("tensor data has the wrong length"));
        }
        let mut floats = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut read_block = || -> Vec<Mat> {
            shapes
                .iter()
                .map(|&(r, c)| {
                    let vals: Vec<f64> = floats.by_ref().take(r * c).collect();
                    DMatrix::from_column_slice(r, c, &vals)
                })
                .collect()
        };
        let model = skeleton.with_tensors(read_block());
        let state = header.train_state.map(|t| {
            let m = read_block();
            let v = read_block();
            TrainState {
                epochs_done: t.epochs_done,
                adam: Adam { step: t.step, m, v },
                curve: t.curve,
            }
        });
        Ok((model, state))
    }

    /// Writes the checkpoint atomically.
    pub fn save(&self, path: &Path, state: Option<&TrainState>) -> Result<(), ModelError> {
        Ok(write_atomic(path, &self.to_bytes(state))?)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<TrainState>), ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
