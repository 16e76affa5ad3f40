//! Hierarchical recurrent encoder-decoder: the baseline response model and
//! the scorer the concept probe runs against.
//!
//! Each utterance is read by a bidirectional GRU; the concatenated final
//! states feed a context GRU in turn order. The decoder GRU starts from
//! `tanh(W·v + b)` and receives `[embedding(prev) ++ v]` at every step.

use serde::{Deserialize, Serialize};

use crate::corpus::{ContextResponsePair, TokenId, EOS, PAD, SOS};
use crate::error::{ensure_contract, Error, Result};
use crate::numerics::{adam_step, BiGru, GradientMap, GruCell, Linear, ParamId, ParameterSet, Tape, Var};
use crate::rng::{stream, Component};
use crate::train::{epoch_batches, EarlyStopping, EpochRecord, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HredConfig {
    pub embed_dim: usize,
    /// Hidden size of each direction of the utterance encoder.
    pub utt_hidden: usize,
    pub ctx_hidden: usize,
    pub dec_hidden: usize,
    pub max_response_len: usize,
    pub vocab_size: usize,
}

impl HredConfig {
    /// Named presets: `ubuntu` (500, 1000, 2000, 2000), `techsupport` (hidden
    /// sizes halved) and the desk-scale `small` (64, 128, 256, 256).
    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        let (e, u, c, d) = match name {
            "ubuntu" => (500, 1000, 2000, 2000),
            "techsupport" => (500, 500, 1000, 1000),
            "small" => (64, 128, 256, 256),
            other => {
                return Err(Error::InvalidValue {
                    key: "preset".into(),
                    message: format!("unknown preset `{other}`"),
                })
            }
        };
        Ok(Self {
            embed_dim: e,
            utt_hidden: u,
            ctx_hidden: c,
            dec_hidden: d,
            max_response_len: 20,
            vocab_size,
        })
    }

    pub fn validate(&self) -> Result<()> {
        ensure_contract!(
            self.embed_dim >= 1
                && self.utt_hidden >= 1
                && self.ctx_hidden >= 1
                && self.dec_hidden >= 1
                && self.max_response_len >= 1,
            "all model dimensions must be at least 1: {self:?}"
        );
        ensure_contract!(self.vocab_size > EOS, "vocabulary must hold the reserved tokens");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    emb: ParamId,
    utt: BiGru,
    ctx: GruCell,
    dec_init: Linear,
    dec: GruCell,
    out: Linear,
}

impl Layout {
    fn resolve(params: &ParameterSet, cfg: &HredConfig) -> Result<Self> {
        let layout = Self {
            emb: params.id("emb")?,
            utt: BiGru::resolve(params, "utt")?,
            ctx: GruCell::resolve(params, "ctx")?,
            dec_init: Linear::resolve(params, "dec.init")?,
            dec: GruCell::resolve(params, "dec.gru")?,
            out: Linear::resolve(params, "dec.out")?,
        };
        let (e, u, c, d, v) = (
            cfg.embed_dim,
            cfg.utt_hidden,
            cfg.ctx_hidden,
            cfg.dec_hidden,
            cfg.vocab_size,
        );
        let checks: [(&str, Vec<usize>); 6] = [
            ("emb", vec![v, e]),
            ("utt.fwd.w_z", vec![u, e]),
            ("ctx.w_z", vec![c, 2 * u]),
            ("dec.init.w", vec![d, c]),
            ("dec.gru.w_z", vec![d, e + c]),
            ("dec.out.w", vec![v, d]),
        ];
        for (name, shape) in checks {
            let t = params.get(name).expect("resolved above");
            ensure_contract!(
                t.shape() == shape.as_slice(),
                "`{name}` has shape {:?}, config expects {shape:?}",
                t.shape()
            );
        }
        Ok(layout)
    }
}

/// The baseline generative conversation model `p_G(r | c)`.
#[derive(Clone, Debug)]
pub struct Hred {
    config: HredConfig,
    params: ParameterSet,
    layout: Layout,
}

impl Hred {
    pub fn new(config: HredConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Component::Init);
        let (e, u, c, d, v) = (
            config.embed_dim,
            config.utt_hidden,
            config.ctx_hidden,
            config.dec_hidden,
            config.vocab_size,
        );
        let mut p = ParameterSet::new();
        p.insert_random("emb", &[v, e], &mut rng)?;
        BiGru::register(&mut p, "utt", e, u, &mut rng)?;
        GruCell::register(&mut p, "ctx", 2 * u, c, &mut rng)?;
        Linear::register(&mut p, "dec.init", c, d, &mut rng)?;
        GruCell::register(&mut p, "dec.gru", e + c, d, &mut rng)?;
        Linear::register(&mut p, "dec.out", d, v, &mut rng)?;
        Self::from_params(config, p)
    }

    pub fn from_params(config: HredConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&params, &config)?;
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &HredConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet {
        self.params
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Context vector `v` (dimension `ctx_hidden`). PAD tokens are skipped and
    /// an empty utterance contributes a zero utterance embedding.
    pub fn encode_context(&self, tape: &mut Tape<'_>, context: &[Vec<TokenId>]) -> Result<Var> {
        ensure_contract!(!context.is_empty(), "context must hold at least one utterance");
        let mut h = tape.zeros(self.config.ctx_hidden);
        for utt in context {
            self.check_ids(utt)?;
            let embs = utt
                .iter()
                .filter(|&&t| t != PAD)
                .map(|&t| tape.embed(self.layout.emb, t))
                .collect::<Result<Vec<_>>>()?;
            let u = self.layout.utt.encode(tape, &embs)?;
            h = self.layout.ctx.step(tape, u, h)?;
        }
        Ok(h)
    }

    /// Teacher-forced per-token NLL nodes for `response` given context vector `v`.
    fn decode_nll(&self, tape: &mut Tape<'_>, v: Var, response: &[TokenId]) -> Result<Vec<Var>> {
        self.check_ids(response)?;
        let init = self.layout.dec_init.forward(tape, v)?;
        let mut h = tape.tanh(init);
        let mut prev = SOS;
        let mut nll = Vec::with_capacity(response.len());
        for &target in response {
            let e = tape.embed(self.layout.emb, prev)?;
            let x = tape.concat(&[e, v]);
            h = self.layout.dec.step(tape, x, h)?;
            let logits = self.layout.out.forward(tape, h)?;
            nll.push(tape.neg_log_softmax(logits, target)?);
            prev = target;
        }
        Ok(nll)
    }

    /// Summed response NLL on the tape.
    pub fn nll(&self, tape: &mut Tape<'_>, context: &[Vec<TokenId>], response: &[TokenId]) -> Result<Var> {
        let v = self.encode_context(tape, context)?;
        let terms = self.decode_nll(tape, v, response)?;
        tape.sum_scalars(&terms)
    }

    /// `(log p(r | c), per-token log-probabilities)` with teacher forcing from SOS.
    pub fn log_prob_response(&self, context: &[Vec<TokenId>], response: &[TokenId]) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new(&self.params);
        let v = self.encode_context(&mut tape, context)?;
        let terms = self.decode_nll(&mut tape, v, response)?;
        let per: Vec<f64> = terms.iter().map(|&t| -tape.scalar(t)).collect();
        Ok((per.iter().sum(), per))
    }

    /// Next-token distribution after feeding `prefix` (teacher forced).
    pub fn next_token_probs(&self, context: &[Vec<TokenId>], prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_ids(prefix)?;
        let mut tape = Tape::new(&self.params);
        let v = self.encode_context(&mut tape, context)?;
        let init = self.layout.dec_init.forward(&mut tape, v)?;
        let mut h = tape.tanh(init);
        for &prev in std::iter::once(&SOS).chain(prefix) {
            let e = tape.embed(self.layout.emb, prev)?;
            let x = tape.concat(&[e, v]);
            h = self.layout.dec.step(&mut tape, x, h)?;
        }
        let logits = self.layout.out.forward(&mut tape, h)?;
        Ok(crate::numerics::tensor::softmax(tape.value(logits)))
    }

    /// Greedy decoding from SOS; stops at EOS (not included) or `max_len` tokens.
    pub fn generate_response(&self, context: &[Vec<TokenId>], max_len: usize) -> Result<Vec<TokenId>> {
        let mut tape = Tape::new(&self.params);
        let v = self.encode_context(&mut tape, context)?;
        let init = self.layout.dec_init.forward(&mut tape, v)?;
        let mut h = tape.tanh(init);
        let mut prev = SOS;
        let mut out = Vec::new();
        while out.len() < max_len {
            let e = tape.embed(self.layout.emb, prev)?;
            let x = tape.concat(&[e, v]);
            h = self.layout.dec.step(&mut tape, x, h)?;
            let logits = self.layout.out.forward(&mut tape, h)?;
            let next = argmax(tape.value(logits));
            if next == EOS {
                break;
            }
            out.push(next);
            prev = next;
        }
        Ok(out)
    }

    /// Mean per-token NLL over `pairs`.
    pub fn mean_nll(&self, pairs: &[ContextResponsePair]) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0;
        for p in pairs {
            let (lp, _) = self.log_prob_response(&p.context, &p.response)?;
            total -= lp;
            tokens += p.response.len();
        }
        Ok(total / tokens.max(1) as f64)
    }
}

/// Index of the maximum value, skipping PAD and SOS, which are never valid
/// output tokens.
pub(crate) fn argmax(x: &[f64]) -> usize {
    let mut best = EOS;
    for (i, &v) in x.iter().enumerate() {
        if i != PAD && i != SOS && v > x[best] {
            best = i;
        }
    }
    best
}

/// Trains the baseline by minimising mean per-token NLL with Adam, evaluating
/// on `valid` after each epoch and returning the best-validation parameters.
pub fn train_hred(
    train: &[ContextResponsePair],
    valid: &[ContextResponsePair],
    config: &HredConfig,
    cfg: &TrainConfig,
) -> Result<(Hred, TrainLog)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::EmptyDataset("validation split is empty".into()));
    }
    let mut model = Hred::new(config.clone(), cfg.seed)?;
    let mut log = TrainLog {
        initial_train_loss: model.mean_nll(train)?,
        initial_valid_loss: model.mean_nll(valid)?,
        ..TrainLog::default()
    };
    let mut stopper = EarlyStopping::new(cfg.patience, log.initial_valid_loss, model.params.clone());
    let mut rng = stream(cfg.seed, Component::Shuffle);
    let mut grads = GradientMap::for_params(&model.params);

    for epoch in 1..=cfg.max_epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for batch in epoch_batches(train.len(), cfg.batch_size, &mut rng) {
            grads.clear();
            let tokens: usize = batch.iter().map(|&i| train[i].response.len()).sum();
            let scale = 1.0 / tokens as f64;
            for &i in &batch {
                let pair = &train[i];
                let mut tape = Tape::new(&model.params);
                let loss = model.nll(&mut tape, &pair.context, &pair.response)?;
                epoch_loss += tape.scalar(loss);
                tape.backward_into(loss, scale, &mut grads)?;
            }
            epoch_tokens += tokens;
            adam_step(&mut model.params, &grads, &cfg.adam)?;
        }
        let valid_loss = model.mean_nll(valid)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / epoch_tokens as f64,
            valid_loss,
            extra: Vec::new(),
        });
        if stopper.observe(epoch, valid_loss, || model.params.clone()) {
            log.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    let (best, best_epoch) = stopper.finish();
    log.best_epoch = best_epoch;
    log.rng_state = Some(rng);
    model.params = best;
    Ok((model, log))
}
