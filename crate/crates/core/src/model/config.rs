use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::format::{sym, PositionOrder, SymbolConfig};

/// Which symbol channels feed the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablations {
    pub use_c: bool,
    pub use_p: bool,
    pub use_s: bool,
    /// Intra-line positions count up instead of down.
    pub inverse_p: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            use_c: true,
            use_p: true,
            use_s: true,
            inverse_p: false,
        }
    }
}

impl Ablations {
    /// No format channels at all: a plain causal language model.
    pub fn causal_lm() -> Self {
        Self {
            use_c: false,
            use_p: false,
            use_s: false,
            inverse_p: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub c_vocab: usize,
    pub p_vocab: usize,
    pub s_vocab: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub ablations: Ablations,
}

impl ModelConfig {
    /// Desk-scale defaults: 4 layers, width 128, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        let symbols = SymbolConfig::default();
        Self {
            layers: 4,
            d_model: 128,
            heads: 4,
            d_ff: 512,
            vocab_size,
            c_vocab: sym::C_VOCAB,
            p_vocab: symbols.p_vocab(),
            s_vocab: symbols.s_vocab(),
            max_len: 256,
            dropout: 0.1,
            ablations: Ablations::default(),
        }
    }

    /// Twelve layers of width 768 with twelve heads.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            layers: 12,
            d_model: 768,
            heads: 12,
            d_ff: 3072,
            max_len: 1024,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if self.layers == 0 || self.d_ff == 0 || self.max_len == 0 {
            return bad("layers, d_ff and max_len must be positive");
        }
        if self.vocab_size < crate::corpus::RESERVED.len() {
            return bad("vocab_size must cover the reserved markers");
        }
        if self.c_vocab < sym::C_VOCAB
            || self.p_vocab <= sym::INDEX_BASE
            || self.s_vocab <= sym::INDEX_BASE
        {
            return bad("symbol tables too small");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    /// Symbol derivation settings that match this model's tables.
    pub fn symbol_config(&self) -> SymbolConfig {
        SymbolConfig {
            order: if self.ablations.inverse_p {
                PositionOrder::Ascending
            } else {
                PositionOrder::Descending
            },
            max_line_len: self.p_vocab - sym::INDEX_BASE,
            max_lines: self.s_vocab - sym::INDEX_BASE,
            ..SymbolConfig::default()
        }
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let a = &self.ablations;
        [
            ("layers", self.layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("c_vocab", self.c_vocab.to_string()),
            ("p_vocab", self.p_vocab.to_string()),
            ("s_vocab", self.s_vocab.to_string()),
            ("max_len", self.max_len.to_string()),
            ("dropout", self.dropout.to_string()),
            ("use_c", a.use_c.to_string()),
            ("use_p", a.use_p.to_string()),
            ("use_s", a.use_s.to_string()),
            ("inverse_p", a.inverse_p.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
            kv.get(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing config key `{key}`")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for `{key}`")))
        }
        let cfg = Self {
            layers: get(kv, "layers")?,
            d_model: get(kv, "d_model")?,
            heads: get(kv, "heads")?,
            d_ff: get(kv, "d_ff")?,
            vocab_size: get(kv, "vocab_size")?,
            c_vocab: get(kv, "c_vocab")?,
            p_vocab: get(kv, "p_vocab")?,
            s_vocab: get(kv, "s_vocab")?,
            max_len: get(kv, "max_len")?,
            dropout: get(kv, "dropout")?,
            ablations: Ablations {
                use_c: get(kv, "use_c")?,
                use_p: get(kv, "use_p")?,
                use_s: get(kv, "use_s")?,
                inverse_p: get(kv, "inverse_p")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
