//! Toy pre-norm transformer encoder with entity markers, an optional
//! Gaussian bottleneck on the token embeddings, and a marker-pair
//! classifier.

mod checkpoint;
mod forward;
mod marking;
mod vocab;

pub use checkpoint::{decode_tensor, encode_tensor, Checkpoint, StoredTensor, CHECKPOINT_VERSION};
pub use forward::{classify, encode, forward, Batch, Encoded, Inference, Mode, Output};
pub use marking::{mark_entities, MarkedExample};
pub use vocab::{
    reserved_tokens, Vocabulary, OBJ_MARKER, OBJ_MARKER_ID, PAD, PAD_ID, SUBJ_MARKER, SUBJ_MARKER_ID,
    UNK, UNK_ID,
};

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSet;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{Tape, Tensor, Var};
use crate::vib::VibParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub max_sequence_length: usize,
    pub n_relations: usize,
    pub dropout: f64,
    pub beta: f64,
    pub seed: u64,
    /// Standard deviation of the token and position embedding init.
    pub embedding_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_width: 256,
            max_sequence_length: 64,
            n_relations: LabelSet::default().len(),
            dropout: 0.1,
            beta: 0.5,
            seed: 1,
            embedding_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_width", self.ffn_width),
            ("max_sequence_length", self.max_sequence_length),
            ("n_relations", self.n_relations),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("model.beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.embedding_std > 0.0 && self.embedding_std.is_finite()) {
            return Err(Error::Config("model.embedding_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub w_q: T,
    pub b_q: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
    pub w_o: T,
    pub b_o: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w_ff1: T,
    pub b_ff1: T,
    pub w_ff2: T,
    pub b_ff2: T,
}

/// Every weight of the model. `T = Tensor` for stored weights, `T = Var`
/// once registered on a tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub token_emb: T,
    pub pos_emb: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_ln_gain: T,
    pub final_ln_bias: T,
    pub vib: Option<VibParams<T>>,
    pub cls_w: T,
    pub cls_b: T,
}

impl<T> LayerParams<T> {
    fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> LayerParams<U> {
        let mut g = |name: &str, t: &'a T| f(&format!("{prefix}.{name}"), t);
        LayerParams {
            ln1_gain: g("ln1_gain", &self.ln1_gain),
            ln1_bias: g("ln1_bias", &self.ln1_bias),
            w_q: g("w_q", &self.w_q),
            b_q: g("b_q", &self.b_q),
            w_k: g("w_k", &self.w_k),
            b_k: g("b_k", &self.b_k),
            w_v: g("w_v", &self.w_v),
            b_v: g("b_v", &self.b_v),
            w_o: g("w_o", &self.w_o),
            b_o: g("b_o", &self.b_o),
            ln2_gain: g("ln2_gain", &self.ln2_gain),
            ln2_bias: g("ln2_bias", &self.ln2_bias),
            w_ff1: g("w_ff1", &self.w_ff1),
            b_ff1: g("b_ff1", &self.b_ff1),
            w_ff2: g("w_ff2", &self.w_ff2),
            b_ff2: g("b_ff2", &self.b_ff2),
        }
    }

    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(&str, &'a mut T)) {
        let mut g = |name: &str, t: &'a mut T| f(&format!("{prefix}.{name}"), t);
        g("ln1_gain", &mut self.ln1_gain);
        g("ln1_bias", &mut self.ln1_bias);
        g("w_q", &mut self.w_q);
        g("b_q", &mut self.b_q);
        g("w_k", &mut self.w_k);
        g("b_k", &mut self.b_k);
        g("w_v", &mut self.w_v);
        g("b_v", &mut self.b_v);
        g("w_o", &mut self.w_o);
        g("b_o", &mut self.b_o);
        g("ln2_gain", &mut self.ln2_gain);
        g("ln2_bias", &mut self.ln2_bias);
        g("w_ff1", &mut self.w_ff1);
        g("b_ff1", &mut self.b_ff1);
        g("w_ff2", &mut self.w_ff2);
        g("b_ff2", &mut self.b_ff2);
    }
}

impl<T> Params<T> {
    /// Structure-preserving map; `f` sees leaves in a fixed order with
    /// dotted names such as `layers.0.w_q`.
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&str, &'a T) -> U) -> Params<U> {
        let token_emb = f("token_emb", &self.token_emb);
        let pos_emb = f("pos_emb", &self.pos_emb);
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.map(&format!("layers.{i}"), f))
            .collect();
        let final_ln_gain = f("final_ln_gain", &self.final_ln_gain);
        let final_ln_bias = f("final_ln_bias", &self.final_ln_bias);
        let vib = self.vib.as_ref().map(|v| VibParams {
            w_mu: f("vib.w_mu", &v.w_mu),
            b_mu: f("vib.b_mu", &v.b_mu),
            w_sigma: f("vib.w_sigma", &v.w_sigma),
            b_sigma: f("vib.b_sigma", &v.b_sigma),
            beta: v.beta,
        });
        Params {
            token_emb,
            pos_emb,
            layers,
            final_ln_gain,
            final_ln_bias,
            vib,
            cls_w: f("cls_w", &self.cls_w),
            cls_b: f("cls_b", &self.cls_b),
        }
    }

    /// Same order as [`Params::map`].
    pub fn for_each_mut<'a>(&'a mut self, f: &mut impl FnMut(&str, &'a mut T)) {
        f("token_emb", &mut self.token_emb);
        f("pos_emb", &mut self.pos_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.for_each_mut(&format!("layers.{i}"), f);
        }
        f("final_ln_gain", &mut self.final_ln_gain);
        f("final_ln_bias", &mut self.final_ln_bias);
        if let Some(v) = &mut self.vib {
            f("vib.w_mu", &mut v.w_mu);
            f("vib.b_mu", &mut v.b_mu);
            f("vib.w_sigma", &mut v.w_sigma);
            f("vib.b_sigma", &mut v.b_sigma);
        }
        f("cls_w", &mut self.cls_w);
        f("cls_b", &mut self.cls_b);
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.for_each_mut(&mut |_, t| out.push(t));
        out
    }

    /// Same structure with leaves taken from `leaves` in [`Params::map`]
    /// order.
    pub fn with_leaves<U: Clone>(&self, leaves: &[U]) -> Params<U> {
        let mut i = 0;
        self.map(&mut |_, _| {
            i += 1;
            leaves[i - 1].clone()
        })
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name.to_string(), t)));
        out
    }
}

impl Params<Tensor> {
    /// Puts every weight on the tape as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Params<Var> {
        self.map(&mut |_, t| tape.param(t.clone()))
    }

    /// Puts every weight on the tape as a constant.
    pub fn register_frozen(&self, tape: &mut Tape) -> Params<Var> {
        self.map(&mut |_, t| tape.constant(t.clone()))
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Weights together with everything needed to interpret them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub labels: LabelSet,
    pub params: Params<Tensor>,
}

impl ModelState {
    /// Random init from `config.seed`. `with_vib` adds the Gaussian
    /// bottleneck with `config.beta`.
    pub fn init(config: ModelConfig, vocab: Vocabulary, labels: LabelSet, with_vib: bool) -> Result<Self> {
        config.validate()?;
        if labels.len() != config.n_relations {
            return Err(Error::Config(format!(
                "model.n_relations is {} but the label set has {} relations",
                config.n_relations,
                labels.len()
            )));
        }
        let mut rng = stream(config.seed, "model-init");
        let d = config.d_model;
        let f = config.ffn_width;
        let lin = |rows: usize, cols: usize, rng: &mut _| Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng);
        let token_emb = Tensor::randn(&[vocab.len(), d], config.embedding_std, &mut rng);
        let pos_emb = Tensor::randn(&[config.max_sequence_length, d], config.embedding_std, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::ones(&[d]),
                ln1_bias: Tensor::zeros(&[d]),
                w_q: lin(d, d, &mut rng),
                b_q: Tensor::zeros(&[d]),
                w_k: lin(d, d, &mut rng),
                b_k: Tensor::zeros(&[d]),
                w_v: lin(d, d, &mut rng),
                b_v: Tensor::zeros(&[d]),
                w_o: lin(d, d, &mut rng),
                b_o: Tensor::zeros(&[d]),
                ln2_gain: Tensor::ones(&[d]),
                ln2_bias: Tensor::zeros(&[d]),
                w_ff1: lin(d, f, &mut rng),
                b_ff1: Tensor::zeros(&[f]),
                w_ff2: lin(f, d, &mut rng),
                b_ff2: Tensor::zeros(&[d]),
            })
            .collect();
        let vib = if with_vib {
            Some(VibParams::init(d, config.beta, &mut rng)?)
        } else {
            None
        };
        let params = Params {
            token_emb,
            pos_emb,
            layers,
            final_ln_gain: Tensor::ones(&[d]),
            final_ln_bias: Tensor::zeros(&[d]),
            vib,
            cls_w: lin(2 * d, config.n_relations, &mut rng),
            cls_b: Tensor::zeros(&[config.n_relations]),
        };
        Ok(Self {
            config,
            vocab,
            labels,
            params,
        })
    }

    pub fn has_vib(&self) -> bool {
        self.params.vib.is_some()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.params.named() {
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {name} holds a non-finite value")));
            }
        }
        Ok(())
    }

    pub fn mark(&self, ex: &crate::corpus::Example) -> Result<MarkedExample> {
        mark_entities(ex, &self.vocab, self.config.max_sequence_length)
    }
}
