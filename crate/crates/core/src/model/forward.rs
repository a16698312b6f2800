use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{MarkedExample, ModelConfig, ModelState, Params, PAD_ID};
use crate::analysis::mean_entity_variance;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Segment, Tape, Tensor, Var};
use crate::vib::{self, EntityMask};

/// `Train` draws VIB noise and dropout masks from the generator; `Infer`
/// uses `eps = 0` and no dropout.
pub enum Mode<'a> {
    Train(&'a mut Rng),
    Infer,
}

/// Sequences packed row-wise. Padding rows are never attended to.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
    pub subj_pos: Vec<usize>,
    pub obj_pos: Vec<usize>,
    pub mask: EntityMask,
    pub key_valid: Vec<bool>,
    /// Rows whose token embedding is replaced by zeros.
    pub occluded: Vec<bool>,
}

impl Batch {
    pub fn new(examples: &[&MarkedExample]) -> Self {
        let mut b = Batch {
            ids: Vec::new(),
            positions: Vec::new(),
            segments: Vec::with_capacity(examples.len()),
            subj_pos: Vec::with_capacity(examples.len()),
            obj_pos: Vec::with_capacity(examples.len()),
            mask: EntityMask::new(Vec::new()),
            key_valid: Vec::new(),
            occluded: Vec::new(),
        };
        let mut flags = Vec::new();
        for ex in examples {
            let start = b.ids.len();
            b.segments.push(Segment { start, len: ex.len() });
            b.subj_pos.push(start + ex.subj_pos);
            b.obj_pos.push(start + ex.obj_pos);
            b.ids.extend_from_slice(&ex.ids);
            b.positions.extend(0..ex.len());
            flags.extend_from_slice(ex.mask.flags());
        }
        b.mask = EntityMask::new(flags);
        b.key_valid = vec![true; b.ids.len()];
        b.occluded = vec![false; b.ids.len()];
        b
    }

    /// One example followed by padding up to `len` rows.
    pub fn padded(ex: &MarkedExample, len: usize) -> Self {
        let mut b = Self::new(&[ex]);
        let pad = len.saturating_sub(ex.len());
        b.ids.extend(std::iter::repeat_n(PAD_ID, pad));
        b.positions.extend(ex.len()..ex.len() + pad);
        b.key_valid.extend(std::iter::repeat_n(false, pad));
        b.occluded.extend(std::iter::repeat_n(false, pad));
        let mut flags = b.mask.flags().to_vec();
        flags.extend(std::iter::repeat_n(false, pad));
        b.mask = EntityMask::new(flags);
        b.segments[0].len += pad;
        b
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

pub struct Encoded {
    pub hidden: Var,
    pub mu: Option<Var>,
    pub sigma: Option<Var>,
    /// Attention output node of each layer, for [`Tape::attention_probs`].
    pub attention: Vec<Var>,
}

pub struct Output {
    pub logits: Var,
    pub encoded: Encoded,
}

fn dropout(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode) -> Result<Var> {
    let Mode::Train(rng) = mode else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let keep = 1.0 / (1.0 - p);
    let data = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    tape.mul_const(x, &Tensor::new(shape, data)?)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// embed → (Gaussian encode → sample → blend) → + positions → pre-norm
/// transformer layers → final layer norm.
pub fn encode(tape: &mut Tape, p: &Params<Var>, cfg: &ModelConfig, batch: &Batch, mut mode: Mode) -> Result<Encoded> {
    let rows = batch.rows();
    if let Some(&pos) = batch.positions.iter().find(|&&q| q >= cfg.max_sequence_length) {
        return Err(Error::Contract(format!(
            "position {pos} beyond max_sequence_length {}",
            cfg.max_sequence_length
        )));
    }
    let d = cfg.d_model;
    let mut x = tape.embedding(p.token_emb, &batch.ids)?;
    if batch.occluded.iter().any(|&o| o) {
        let keep: Vec<f64> = batch
            .occluded
            .iter()
            .flat_map(|&o| std::iter::repeat_n(if o { 0.0 } else { 1.0 }, d))
            .collect();
        x = tape.mul_const(x, &Tensor::new(vec![rows, d], keep)?)?;
    }
    let (mut mu, mut sigma) = (None, None);
    if let Some(v) = &p.vib {
        let (m, s) = vib::encode_gaussian(tape, x, v)?;
        let eps = match &mut mode {
            Mode::Train(rng) => {
                let data = (0..rows * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                Some(Tensor::new(vec![rows, d], data)?)
            }
            Mode::Infer => None,
        };
        let z = vib::sample_z(tape, m, s, eps.as_ref())?;
        x = vib::blend(tape, x, z, &batch.mask, v.beta)?;
        mu = Some(m);
        sigma = Some(s);
    }
    let pos = tape.embedding(p.pos_emb, &batch.positions)?;
    let mut h = tape.add(x, pos)?;
    h = dropout(tape, h, cfg.dropout, &mut mode)?;
    let mut attention = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let a = tape.layer_norm(h, l.ln1_gain, l.ln1_bias)?;
        let q = linear(tape, a, l.w_q, l.b_q)?;
        let k = linear(tape, a, l.w_k, l.b_k)?;
        let v = linear(tape, a, l.w_v, l.b_v)?;
        let att = tape.attention(q, k, v, &batch.segments, cfg.n_heads, &batch.key_valid)?;
        attention.push(att);
        let o = linear(tape, att, l.w_o, l.b_o)?;
        let o = dropout(tape, o, cfg.dropout, &mut mode)?;
        h = tape.add(h, o)?;
        let f = tape.layer_norm(h, l.ln2_gain, l.ln2_bias)?;
        let f = linear(tape, f, l.w_ff1, l.b_ff1)?;
        let f = tape.gelu(f);
        let f = linear(tape, f, l.w_ff2, l.b_ff2)?;
        let f = dropout(tape, f, cfg.dropout, &mut mode)?;
        h = tape.add(h, f)?;
    }
    let hidden = tape.layer_norm(h, p.final_ln_gain, p.final_ln_bias)?;
    Ok(Encoded {
        hidden,
        mu,
        sigma,
        attention,
    })
}

/// `[h_subj ; h_obj] · W + b` for each sequence.
pub fn classify(tape: &mut Tape, h: Var, subj_pos: &[usize], obj_pos: &[usize], w: Var, b: Var) -> Result<Var> {
    let hs = tape.gather_rows(h, subj_pos)?;
    let ho = tape.gather_rows(h, obj_pos)?;
    let cat = tape.concat_cols(hs, ho)?;
    linear(tape, cat, w, b)
}

pub fn forward(tape: &mut Tape, p: &Params<Var>, cfg: &ModelConfig, batch: &Batch, mode: Mode) -> Result<Output> {
    let encoded = encode(tape, p, cfg, batch, mode)?;
    let logits = classify(tape, encoded.hidden, &batch.subj_pos, &batch.obj_pos, p.cls_w, p.cls_b)?;
    Ok(Output { logits, encoded })
}

/// Inference result for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub logits: Vec<f64>,
    pub predicted: usize,
    /// Mean `sigma²` over entity tokens; `None` without a bottleneck.
    pub mean_entity_variance: Option<f64>,
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl ModelState {
    /// Deterministic forward pass over `examples` in chunks of `batch_size`.
    pub fn infer(&self, examples: &[MarkedExample], batch_size: usize) -> Result<Vec<Inference>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&MarkedExample> = chunk.iter().collect();
            out.extend(self.infer_batch(&Batch::new(&refs))?);
        }
        Ok(out)
    }

    pub fn infer_batch(&self, batch: &Batch) -> Result<Vec<Inference>> {
        let mut tape = Tape::new();
        let vars = self.params.register_frozen(&mut tape);
        let o = forward(&mut tape, &vars, &self.config, batch, Mode::Infer)?;
        tape.ensure_finite()?;
        let logits = tape.value(o.logits);
        let sigma = o.encoded.sigma.map(|s| tape.value(s));
        batch
            .segments
            .iter()
            .enumerate()
            .map(|(i, seg)| {
                let row = logits.row(i).to_vec();
                let mean_entity_variance = match sigma {
                    Some(s) => {
                        let d = s.cols();
                        let rows = &s.data()[seg.start * d..(seg.start + seg.len) * d];
                        let sub = Tensor::new(vec![seg.len, d], rows.to_vec())?;
                        let flags = batch.mask.flags()[seg.start..seg.start + seg.len].to_vec();
                        Some(mean_entity_variance(&sub, &EntityMask::new(flags))?)
                    }
                    None => None,
                };
                Ok(Inference {
                    predicted: argmax(&row),
                    logits: row,
                    mean_entity_variance,
                })
            })
            .collect()
    }
}
