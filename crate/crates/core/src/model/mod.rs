//! The format-conditioned transformer.
//!
//! Each layer runs a causal self-attention block over the token states and a
//! second block whose queries come from the first block and whose keys and
//! values come from the format summary `F⁰`, which is computed once and shared
//! by every layer.

mod checkpoint;
mod config;
mod forward;

pub use checkpoint::Checkpoint;
pub use config::{Ablations, ModelConfig};
pub use forward::{nll, Forward, InputItem, ModelInput};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

const EMBEDDINGS: [&str; 5] = [
    "embed.word",
    "embed.format",
    "embed.position",
    "embed.segment",
    "embed.global",
];
const BLOCKS: [&str; 2] = ["self", "global"];
const BLOCK_PARAMS: [&str; 12] = [
    "wq", "wk", "wv", "wo", "ln1.gain", "ln1.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln2.gain",
    "ln2.bias",
];
const PER_LAYER: usize = BLOCKS.len() * BLOCK_PARAMS.len();

/// Embedding table slots in the parameter list.
pub(crate) mod emb {
    pub const WORD: usize = 0;
    pub const FORMAT: usize = 1;
    pub const POSITION: usize = 2;
    pub const SEGMENT: usize = 3;
    pub const GLOBAL: usize = 4;
}

/// Offsets of one block's parameters relative to its first entry.
pub(crate) mod blk {
    pub const WQ: usize = 0;
    pub const WK: usize = 1;
    pub const WV: usize = 2;
    pub const WO: usize = 3;
    pub const LN1_G: usize = 4;
    pub const LN1_B: usize = 5;
    pub const W1: usize = 6;
    pub const B1: usize = 7;
    pub const W2: usize = 8;
    pub const B2: usize = 9;
    pub const LN2_G: usize = 10;
    pub const LN2_B: usize = 11;
}

/// Names and shapes of every parameter, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out: Vec<(String, Vec<usize>)> = EMBEDDINGS
        .iter()
        .zip([cfg.vocab_size, cfg.c_vocab, cfg.p_vocab, cfg.s_vocab, cfg.max_len])
        .map(|(n, rows)| (n.to_string(), vec![rows, d]))
        .collect();
    for l in 0..cfg.layers {
        for block in BLOCKS {
            for p in BLOCK_PARAMS {
                let shape = match p {
                    "wq" | "wk" | "wv" | "wo" => vec![d, d],
                    "ffn.w1" => vec![d, cfg.d_ff],
                    "ffn.b1" => vec![cfg.d_ff],
                    "ffn.w2" => vec![cfg.d_ff, d],
                    _ => vec![d],
                };
                out.push((format!("layer{l}.{block}.{p}"), shape));
            }
        }
    }
    out
}

/// Index of the first parameter of `block` (0 self, 1 global) in `layer`.
pub(crate) fn block_base(layer: usize, block: usize) -> usize {
    EMBEDDINGS.len() + layer * PER_LAYER + block * BLOCK_PARAMS.len()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S: Scalar = f32> {
    pub config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<S>>,
}

impl<S: Scalar> Model<S> {
    /// Gaussian init with std 0.02; layer norms start at identity and biases at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let (names, params) = param_layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".gain") {
                    Tensor::filled(&shape, S::one())
                } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                    Tensor::zeros(&shape)
                } else {
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| S::from_f64(normal.sample(&mut rng))).collect();
                    Tensor::new(shape, data).expect("layout shape")
                };
                (name, t)
            })
            .unzip();
        Ok(Self { config, names, params })
    }

    /// Builds a model from named tensors, which must match the layout exactly.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor<S>)>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for ((want, shape), (name, t)) in layout.into_iter().zip(tensors) {
            if want != name || shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` {:?} does not match expected `{want}` {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self { config, names, params })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }
}

impl Model<f32> {
    /// Checkpoint holding the config, `meta`, and every parameter.
    pub fn to_checkpoint(&self, meta: &[(&str, String)]) -> Checkpoint {
        let mut header = self.config.to_kv();
        for (k, v) in meta {
            header.insert((*k).to_string(), v.clone());
        }
        Checkpoint {
            header,
            tensors: self.names.iter().cloned().zip(self.params.iter().cloned()).collect(),
        }
    }

    /// Restores a model, ignoring tensors under the `optim.` prefix.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_kv(&ck.header)?;
        let tensors = ck
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("optim."))
            .cloned()
            .collect();
        Self::from_tensors(config, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint(&[]).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
