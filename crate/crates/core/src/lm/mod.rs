//! Decoder-only codec language models.
//!
//! Two variants share one transformer core:
//! - AR: causal over an (acoustic, phoneme) pair stream with bidirectional
//!   visibility of the prompt phonemes; two softmax heads read the same final
//!   hidden state.
//! - NAR: unmasked self-attention over full-rate frames, predicting quantizer
//!   layer n from the aligned phonemes, layers 1..n-1, and a layer-index
//!   embedding. Acoustic prediction heads are storage-tied to the next
//!   layer's embedding table.

pub mod cache;
pub mod io;
pub mod model;
pub mod tensor;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::codec::CodeId;
use crate::corpus::PhonemeId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, Stream};

use tensor::{Init, ParamId, ParamStore};

pub const QUANT_LAYERS: usize = crate::codec::NUM_LAYERS;

/// Transformer hyperparameters.
///
/// The full-scale reference configuration mirrored here is 12 layers, 16
/// heads, model dim 1024, FFN dim 4096, dropout 0.1; the defaults are a
/// desk-scale reduction that trains in seconds on a laptop core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_seq: usize,
    /// Acoustic codebook size K (codes are 0..K; specials sit above).
    pub acoustic_k: usize,
    /// Phoneme vocabulary V_p.
    pub phoneme_vocab: u16,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            layers: 4,
            heads: 4,
            dim: 128,
            ffn_dim: 512,
            dropout: 0.1,
            max_seq: 512,
            acoustic_k: 64,
            phoneme_vocab: 40,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ffn_dim == 0 {
            return Err(Error::invalid("model dims must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.acoustic_k < 2 || self.phoneme_vocab < 2 {
            return Err(Error::invalid("vocab sizes must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        if self.max_seq < 4 {
            return Err(Error::invalid("max_seq must be >= 4"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Acoustic token count including BOS/EOS/PAD.
    pub fn acoustic_tokens(&self) -> usize {
        self.acoustic_k + 3
    }

    pub fn a_bos(&self) -> CodeId {
        self.acoustic_k as CodeId
    }

    pub fn a_eos(&self) -> CodeId {
        (self.acoustic_k + 1) as CodeId
    }

    pub fn a_pad(&self) -> CodeId {
        (self.acoustic_k + 2) as CodeId
    }

    /// Phoneme token count including BOS/EOS/PAD.
    pub fn phoneme_tokens(&self) -> usize {
        self.phoneme_vocab as usize + 3
    }

    pub fn p_bos(&self) -> PhonemeId {
        self.phoneme_vocab
    }

    pub fn p_eos(&self) -> PhonemeId {
        self.phoneme_vocab + 1
    }

    pub fn p_pad(&self) -> PhonemeId {
        self.phoneme_vocab + 2
    }

    pub fn config_hash(&self) -> u64 {
        crate::format::fnv1a(serde_json::to_string(self).unwrap().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Ar,
    Nar,
}

#[derive(Debug, Clone)]
pub struct LinearP {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct LayerNormP {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockP {
    pub ln1: LayerNormP,
    pub wq: LinearP,
    pub wk: LinearP,
    pub wv: LinearP,
    pub wo: LinearP,
    pub ln2: LayerNormP,
    pub ff1: LinearP,
    pub ff2: LinearP,
}

#[derive(Debug, Clone)]
pub struct ArWiring {
    pub acoustic_emb: ParamId,
    pub phoneme_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockP>,
    pub final_ln: LayerNormP,
    /// Bias-free output heads reading the shared final hidden state.
    pub acoustic_head: ParamId,
    pub phoneme_head: ParamId,
}

#[derive(Debug, Clone)]
pub struct NarWiring {
    /// One embedding table per quantizer layer, index d holds layer d+1.
    pub acoustic_embs: Vec<ParamId>,
    pub phoneme_emb: ParamId,
    pub pos_emb: ParamId,
    /// Target-layer indicator embeddings for n = 2..=8 (index n-2).
    pub layer_idx_emb: ParamId,
    pub blocks: Vec<BlockP>,
    pub final_ln: LayerNormP,
    /// Prediction heads for n = 2..=8 (index n-2). Heads for layers 2..=7 are
    /// the same ParamId as the embedding table of layer n+1; layer 8's head
    /// has no successor table and owns its weight.
    pub heads: Vec<ParamId>,
}

#[derive(Debug, Clone)]
pub struct LmWeights<S: Scalar> {
    pub config: LmConfig,
    pub kind: ModelKind,
    pub store: ParamStore<S>,
    ar: Option<ArWiring>,
    nar: Option<NarWiring>,
}

const INIT_STD: f64 = 0.02;

fn add_linear<S: Scalar>(
    store: &mut ParamStore<S>,
    name: &str,
    out_dim: usize,
    in_dim: usize,
    seed: u64,
    counter: &mut u64,
) -> LinearP {
    let w = store.add(
        &format!("{name}.w"),
        out_dim,
        in_dim,
        Init::Normal(INIT_STD),
        derive_seed(seed, Stream::WeightInit, bump(counter)),
    );
    let b = store.add(&format!("{name}.b"), 1, out_dim, Init::Zeros, 0);
    LinearP { w, b: Some(b) }
}

fn add_layernorm<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> LayerNormP {
    let gain = store.add(&format!("{name}.gain"), 1, dim, Init::Ones, 0);
    let bias = store.add(&format!("{name}.bias"), 1, dim, Init::Zeros, 0);
    LayerNormP { gain, bias }
}

fn bump(counter: &mut u64) -> u64 {
    let c = *counter;
    *counter += 1;
    c
}

fn add_blocks<S: Scalar>(
    store: &mut ParamStore<S>,
    config: &LmConfig,
    seed: u64,
    counter: &mut u64,
) -> Vec<BlockP> {
    (0..config.layers)
        .map(|l| BlockP {
            ln1: add_layernorm(store, &format!("block{l}.ln1"), config.dim),
            wq: add_linear(store, &format!("block{l}.wq"), config.dim, config.dim, seed, counter),
            wk: add_linear(store, &format!("block{l}.wk"), config.dim, config.dim, seed, counter),
            wv: add_linear(store, &format!("block{l}.wv"), config.dim, config.dim, seed, counter),
            wo: add_linear(store, &format!("block{l}.wo"), config.dim, config.dim, seed, counter),
            ln2: add_layernorm(store, &format!("block{l}.ln2"), config.dim),
            ff1: add_linear(store, &format!("block{l}.ff1"), config.ffn_dim, config.dim, seed, counter),
            ff2: add_linear(store, &format!("block{l}.ff2"), config.dim, config.ffn_dim, seed, counter),
        })
        .collect()
}

impl<S: Scalar> LmWeights<S> {
    pub fn new_ar(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut counter = 0u64;
        let c = &mut counter;
        let acoustic_emb = store.add(
            "ar.acoustic_emb",
            config.acoustic_tokens(),
            config.dim,
            Init::Normal(INIT_STD),
            derive_seed(seed, Stream::WeightInit, bump(c)),
        );
        let phoneme_emb = store.add(
            "ar.phoneme_emb",
            config.phoneme_tokens(),
            config.dim,
            Init::Normal(INIT_STD),
            derive_seed(seed, Stream::WeightInit, bump(c)),
        );
        let pos_emb = store.add(
            "ar.pos_emb",
            config.max_seq,
            config.dim,
            Init::Normal(INIT_STD),
            derive_seed(seed, Stream::WeightInit, bump(c)),
        );
        let blocks = add_blocks(&mut store, &config, seed, c);
        let final_ln = add_layernorm(&mut store, "ar.final_ln", config.dim);
        let acoustic_head = store.add(
            "ar.acoustic_head",
            config.acoustic_tokens(),
            config.dim,
            Init::Normal(INIT_STD),
            derive_seed(seed, Stream::WeightInit, bump(c)),
        );
        let phoneme_head = store.add(
            "ar.phoneme_head",
            config.phoneme_tokens(),
            config.dim,
            Init::Normal(INIT_STD),
            derive_seed(seed, Stream::WeightInit, bump(c)),
        );
        Ok(LmWeights {
            config,
            kind: ModelKind::Ar,
            store,
            ar: Some(ArWiring {
                acoustic_emb,
                phoneme_emb,
                pos_emb,
                blocks,
                final_ln,
                acoustic_head,
                phoneme_head,
            }),
            nar: None,
        })
    }

    pub fn new_nar(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut counter = 0u64;
        let c = &mut counter;
        let acoustic_embs: Vec<ParamId> = (0..QUANT_LAYERS)
            .map(|d| {
                store.add(
                    &format!("nar.acoustic_emb{}", d + 1),
                    config.acoustic_k,
                    config.dim,
                    Init::Normal(INIT_STD),
                    derive_seed(seed, Stream::WeightInit, bump(c)),
                )
            })
            .collect();
        let phoneme_emb = store.add(
            "nar.phoneme_emb",
            config.phoneme_tokens(),
            config.dim,
            Init::Normal(INIT_STD),
            derive_seed(seed, Stream::WeightInit, bump(c)),
        );
        let pos_emb = store.add(
            "nar.pos_emb",
            config.max_seq,
            config.dim,
            Init::Normal(INIT_STD),
            derive_seed(seed, Stream::WeightInit, bump(c)),
        );
        let layer_idx_emb = store.add(
            "nar.layer_idx_emb",
            QUANT_LAYERS - 1,
            config.dim,
            Init::Normal(INIT_STD),
            derive_seed(seed, Stream::WeightInit, bump(c)),
        );
        let blocks = add_blocks(&mut store, &config, seed, c);
        let final_ln = add_layernorm(&mut store, "nar.final_ln", config.dim);
        // Prediction head for layer n is the embedding table of layer n+1;
        // layer 8 has no successor, so it owns a separate matrix.
        let head8 = store.add(
            "nar.head8",
            config.acoustic_k,
            config.dim,
            Init::Normal(INIT_STD),
            derive_seed(seed, Stream::WeightInit, bump(c)),
        );
        let heads: Vec<ParamId> = (2..=QUANT_LAYERS)
            .map(|n| {
                if n < QUANT_LAYERS {
                    acoustic_embs[n] // table of layer n+1 (index n)
                } else {
                    head8
                }
            })
            .collect();
        Ok(LmWeights {
            config,
            kind: ModelKind::Nar,
            store,
            ar: None,
            nar: Some(NarWiring {
                acoustic_embs,
                phoneme_emb,
                pos_emb,
                layer_idx_emb,
                blocks,
                final_ln,
                heads,
            }),
        })
    }

    /// All-zero weights (uniform softmax everywhere); used by symmetry tests.
    pub fn zeros(kind: ModelKind, config: LmConfig) -> Result<Self> {
        let mut w = match kind {
            ModelKind::Ar => Self::new_ar(config, 0)?,
            ModelKind::Nar => Self::new_nar(config, 0)?,
        };
        for id in w.store.ids().collect::<Vec<_>>() {
            w.store.value_mut(id).fill(S::zero());
        }
        Ok(w)
    }

    pub fn ar(&self) -> Result<&ArWiring> {
        self.ar
            .as_ref()
            .ok_or_else(|| Error::Load("expected an AR model".into()))
    }

    pub fn nar(&self) -> Result<&NarWiring> {
        self.nar
            .as_ref()
            .ok_or_else(|| Error::Load("expected a NAR model".into()))
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = LmConfig::default();
        assert!(c.validate().is_ok());
        c.dim = 130; // not divisible by 4 heads
        assert!(c.validate().is_err());
    }

    #[test]
    fn special_token_layout() {
        let c = LmConfig {
            acoustic_k: 64,
            phoneme_vocab: 40,
            ..LmConfig::default()
        };
        assert_eq!(c.a_bos(), 64);
        assert_eq!(c.a_eos(), 65);
        assert_eq!(c.a_pad(), 66);
        assert_eq!(c.acoustic_tokens(), 67);
        assert_eq!(c.p_bos(), 40);
        assert_eq!(c.p_eos(), 41);
        assert_eq!(c.p_pad(), 42);
    }

    #[test]
    fn nar_heads_alias_next_layer_embeddings() {
        let w = LmWeights::<f32>::new_nar(LmConfig::default(), 1).unwrap();
        let nar = w.nar().unwrap();
        for n in 2..QUANT_LAYERS {
            assert_eq!(nar.heads[n - 2], nar.acoustic_embs[n]);
        }
        assert_ne!(nar.heads[QUANT_LAYERS - 2], nar.acoustic_embs[QUANT_LAYERS - 1]);
    }

    #[test]
    fn same_seed_same_init() {
        let a = LmWeights::<f32>::new_ar(LmConfig::default(), 5).unwrap();
        let b = LmWeights::<f32>::new_ar(LmConfig::default(), 5).unwrap();
        for id in a.store.ids() {
            assert_eq!(a.store.value(id).data, b.store.value(id).data);
        }
    }
}
