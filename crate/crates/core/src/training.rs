//! Objective `CE + α·VIB` with a per-batch adaptive `α`, Adam, and the
//! epoch loop with dev-based early stopping.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{apply_entity_mask_baseline, apply_entity_substitution_baseline, EntityLexicon, Example, LabelSet};
use crate::error::{Error, Result};
use crate::evaluation::{micro_f1, predict};
use crate::model::{decode_tensor, encode_tensor, forward, Batch, Checkpoint, MarkedExample, Mode, ModelConfig, ModelState, StoredTensor, Vocabulary};
use crate::rng::stream;
use crate::tensor::{Segment, Tape, Tensor, Var};
use crate::vib::{vib_loss, EntityMask};

pub const ALPHA_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    EntityMask,
    EntitySubstitution,
    Vib,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Vanilla, Method::EntityMask, Method::EntitySubstitution, Method::Vib];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::EntityMask => "entity_mask",
            Method::EntitySubstitution => "entity_substitution",
            Method::Vib => "vib",
        }
    }

    pub fn uses_vib(self) -> bool {
        self == Method::Vib
    }

    /// The view of an example the method sees at evaluation time.
    pub fn prepare_eval(self, ex: &Example) -> Example {
        match self {
            Method::EntityMask => apply_entity_mask_baseline(ex),
            _ => ex.clone(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (expected vanilla, entity_mask, entity_substitution or vib)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    /// Used by the `vib` method only.
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Vanilla,
            beta: 0.5,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 32,
            patience: 5,
            seed: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        for (name, v) in [("train.adam_beta1", self.adam_beta1), ("train.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("train.adam_eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("train.beta must lie in [0, 1], got {}", self.beta)));
        }
        Ok(())
    }
}

/// Loss node plus the detached scalars that went into it.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub loss: Var,
    pub ce: f64,
    pub vib: f64,
    pub alpha: f64,
}

/// Inputs of the compression term for one batch.
pub struct VibTerm<'a> {
    pub mu: Var,
    pub sigma: Var,
    pub mask: &'a EntityMask,
    pub segments: &'a [Segment],
}

/// `CE + α·VIB` with `α = ce / (vib + 1e-8)` taken from detached values.
/// Without a VIB term the loss is the cross-entropy and `α = 0`.
pub fn total_loss(tape: &mut Tape, logits: Var, gold: &[usize], vib: Option<VibTerm>) -> Result<LossParts> {
    let ce_var = tape.softmax_cross_entropy(logits, gold)?;
    let ce = tape.value(ce_var).item();
    if !ce.is_finite() {
        return Err(Error::NonFinite { op: "cross-entropy" });
    }
    let Some(t) = vib else {
        return Ok(LossParts {
            loss: ce_var,
            ce,
            vib: 0.0,
            alpha: 0.0,
        });
    };
    let vib_var = vib_loss(tape, t.mu, t.sigma, t.mask, t.segments)?;
    let vib = tape.value(vib_var).item();
    if !vib.is_finite() {
        return Err(Error::NonFinite { op: "vib loss" });
    }
    let alpha = ce / (vib + ALPHA_EPS);
    Ok(LossParts {
        loss: combine(tape, ce_var, vib_var, alpha)?,
        ce,
        vib,
        alpha,
    })
}

/// `ce + alpha·vib` with `alpha` a constant.
pub fn combine(tape: &mut Tape, ce: Var, vib: Var, alpha: f64) -> Result<Var> {
    let weighted = tape.scale(vib, alpha);
    tape.add(ce, weighted)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// First and second moments per parameter, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One row per optimizer step; `dev_micro_f1` is filled on the last batch
/// of each epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub ce: f64,
    pub vib: f64,
    pub alpha: f64,
    pub dev_micro_f1: Option<f64>,
}

pub struct TrainData<'a> {
    pub train: &'a [Example],
    pub dev: &'a [Example],
    pub lexicon: &'a EntityLexicon,
}

#[derive(Clone, Debug, PartialEq)]
struct Best {
    state: ModelState,
    dev: f64,
    epoch: usize,
}

/// Resumable training run. State advances one epoch at a time; every
/// epoch draws from its own `(seed, epoch)` stream.
pub struct Trainer<'a> {
    config: TrainConfig,
    data: TrainData<'a>,
    state: ModelState,
    opt: OptimizerState,
    epoch: usize,
    bad_epochs: usize,
    best: Option<Best>,
    log: Vec<LogRow>,
    base_train: Vec<Example>,
    marked_train: Vec<MarkedExample>,
    gold_train: Vec<usize>,
    dev: Vec<Example>,
}

pub struct TrainOutcome {
    pub best: ModelState,
    pub best_epoch: Option<usize>,
    pub best_dev_micro_f1: Option<f64>,
    pub epochs_run: usize,
    pub log: Vec<LogRow>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, mut model: ModelConfig, vocab: Vocabulary, data: TrainData<'a>) -> Result<Self> {
        config.validate()?;
        model.seed = config.seed;
        model.beta = config.beta;
        let labels = LabelSet::default();
        let state = ModelState::init(model, vocab, labels, config.method.uses_vib())?;
        let opt = OptimizerState::new(state.params.named().into_iter().map(|(_, t)| t));
        Self::assemble(config, data, state, opt)
    }

    fn assemble(config: TrainConfig, data: TrainData<'a>, state: ModelState, opt: OptimizerState) -> Result<Self> {
        if data.train.is_empty() || data.dev.is_empty() {
            return Err(Error::Data("training needs non-empty train and dev splits".into()));
        }
        let base_train: Vec<Example> = data.train.iter().map(|e| config.method.prepare_eval(e)).collect();
        let dev = data.dev.iter().map(|e| config.method.prepare_eval(e)).collect();
        let marked_train = base_train.iter().map(|e| state.mark(e)).collect::<Result<_>>()?;
        let gold_train = base_train
            .iter()
            .map(|e| state.labels.id(&e.relation))
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            data,
            state,
            opt,
            epoch: 0,
            bad_epochs: 0,
            best: None,
            log: Vec::new(),
            base_train,
            marked_train,
            gold_train,
            dev,
        })
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs || (self.best.is_some() && self.bad_epochs >= self.config.patience)
    }

    fn step(&mut self, batch_ids: &[usize], marked: &[MarkedExample], epoch: usize, index: usize, rng: &mut crate::rng::Rng) -> Result<LogRow> {
        let refs: Vec<&MarkedExample> = batch_ids.iter().map(|&i| &marked[i]).collect();
        let gold: Vec<usize> = batch_ids.iter().map(|&i| self.gold_train[i]).collect();
        let batch = Batch::new(&refs);
        let diverged = |detail: String| Error::Divergence {
            epoch,
            batch: index,
            detail,
        };
        let mut tape = Tape::new();
        let vars = self.state.params.register(&mut tape);
        let out = forward(&mut tape, &vars, &self.state.config, &batch, Mode::Train(rng))?;
        tape.ensure_finite().map_err(|e| diverged(e.to_string()))?;
        let term = match (out.encoded.mu, out.encoded.sigma) {
            (Some(mu), Some(sigma)) => Some(VibTerm {
                mu,
                sigma,
                mask: &batch.mask,
                segments: &batch.segments,
            }),
            _ => None,
        };
        let parts = total_loss(&mut tape, out.logits, &gold, term).map_err(|e| match e {
            Error::NonFinite { .. } => diverged(e.to_string()),
            e => e,
        })?;
        tape.backward(parts.loss)?;
        let grads: Vec<Tensor> = vars
            .named()
            .into_iter()
            .map(|(_, &v)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
            })
            .collect();
        if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
            return Err(diverged(format!("non-finite gradient of shape {:?}", g.shape())));
        }
        let cfg = AdamConfig::from(&self.config);
        adam_step(self.state.params.leaves_mut(), &grads, &mut self.opt, &cfg)?;
        Ok(LogRow {
            epoch,
            batch: index,
            ce: parts.ce,
            vib: parts.vib,
            alpha: parts.alpha,
            dev_micro_f1: None,
        })
    }

    /// Trains for one epoch, evaluates on dev and updates the best state.
    pub fn run_epoch(&mut self) -> Result<()> {
        let epoch = self.epoch;
        let mut rng = stream(self.config.seed, &format!("epoch:{epoch}"));
        let marked = if self.config.method == Method::EntitySubstitution {
            self.base_train
                .iter()
                .map(|e| {
                    let s = apply_entity_substitution_baseline(e, self.data.lexicon, &mut rng)?;
                    self.state.mark(&s)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            std::mem::take(&mut self.marked_train)
        };
        let mut order: Vec<usize> = (0..marked.len()).collect();
        order.shuffle(&mut rng);
        let mut result = Ok(());
        for (index, chunk) in order.chunks(self.config.batch_size).enumerate() {
            match self.step(chunk, &marked, epoch, index, &mut rng) {
                Ok(row) => self.log.push(row),
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        if self.config.method != Method::EntitySubstitution {
            self.marked_train = marked;
        }
        result?;
        let dev = self.dev_micro_f1()?;
        if let Some(last) = self.log.last_mut() {
            last.dev_micro_f1 = Some(dev);
        }
        if self.best.as_ref().is_none_or(|b| dev > b.dev) {
            self.best = Some(Best {
                state: self.state.clone(),
                dev,
                epoch,
            });
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn dev_micro_f1(&self) -> Result<f64> {
        micro_f1(&predict(&self.state, &self.dev, 256)?, &self.state.labels)
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.finished() {
            self.run_epoch()?;
        }
        Ok(self.into_outcome())
    }

    pub fn into_outcome(self) -> TrainOutcome {
        let epochs_run = self.epoch;
        match self.best {
            Some(b) => TrainOutcome {
                best: b.state,
                best_epoch: Some(b.epoch),
                best_dev_micro_f1: Some(b.dev),
                epochs_run,
                log: self.log,
            },
            None => TrainOutcome {
                best: self.state,
                best_epoch: None,
                best_dev_micro_f1: None,
                epochs_run,
                log: self.log,
            },
        }
    }

    /// Everything needed to continue the run bit-identically.
    pub fn snapshot(&self) -> Result<String> {
        let ck = |state: &ModelState| -> Result<String> {
            Checkpoint {
                state: state.clone(),
                method: self.config.method.to_string(),
                data_digest: None,
            }
            .to_json()
        };
        let snap = Snapshot {
            version: SNAPSHOT_VERSION,
            config: self.config.clone(),
            model: ck(&self.state)?,
            step: self.opt.step,
            m: self.opt.m.iter().map(|t| encode_tensor("m", t)).collect(),
            v: self.opt.v.iter().map(|t| encode_tensor("v", t)).collect(),
            epoch: self.epoch,
            bad_epochs: self.bad_epochs,
            best: self
                .best
                .as_ref()
                .map(|b| Ok::<_, Error>(StoredBest { model: ck(&b.state)?, dev: b.dev, epoch: b.epoch }))
                .transpose()?,
            log: self.log.clone(),
        };
        Ok(serde_json::to_string(&snap)?)
    }

    /// Restores a run from [`Trainer::snapshot`]. The training data must be
    /// the same as for the original run; of the configuration only `epochs`
    /// and `patience` may change.
    pub fn restore(json: &str, data: TrainData<'a>, config: &TrainConfig) -> Result<Self> {
        let snap: Snapshot = serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported training snapshot version {}", snap.version)));
        }
        let comparable = TrainConfig {
            epochs: snap.config.epochs,
            patience: snap.config.patience,
            ..config.clone()
        };
        if comparable != snap.config {
            return Err(Error::Checkpoint(
                "training snapshot was written with a different configuration".into(),
            ));
        }
        let state = Checkpoint::from_json(&snap.model)?.state;
        let decode = |ts: &[StoredTensor]| ts.iter().map(decode_tensor).collect::<Result<Vec<_>>>();
        let opt = OptimizerState {
            step: snap.step,
            m: decode(&snap.m)?,
            v: decode(&snap.v)?,
        };
        let mut t = Self::assemble(config.clone(), data, state, opt)?;
        t.epoch = snap.epoch;
        t.bad_epochs = snap.bad_epochs;
        t.best = snap
            .best
            .map(|b| {
                Ok::<_, Error>(Best {
                    state: Checkpoint::from_json(&b.model)?.state,
                    dev: b.dev,
                    epoch: b.epoch,
                })
            })
            .transpose()?;
        t.log = snap.log;
        Ok(t)
    }
}

const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredBest {
    model: String,
    dev: f64,
    epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    config: TrainConfig,
    model: String,
    step: u64,
    m: Vec<StoredTensor>,
    v: Vec<StoredTensor>,
    epoch: usize,
    bad_epochs: usize,
    best: Option<StoredBest>,
    log: Vec<LogRow>,
}

pub fn write_log_csv(path: &std::path::Path, log: &[LogRow]) -> Result<()> {
    crate::evaluation::write_csv(path, log)
}
