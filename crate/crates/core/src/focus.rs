//! The concept-aware model.
//!
//! Context concepts `z_c` are encoded by their own bi-GRU and concatenated
//! with each utterance embedding before the context GRU. A concept decoder
//! scores response words given the response prefix; its loss is weighted by
//! the PMI-derived `q`. The response decoder mixes a vocabulary softmax with a
//! copy distribution over the sampled response concepts `z_r`:
//!
//! ```text
//! P(y) = (1 − g)·P_vocab(y) + g·Σ_{j: z_r[j] = y} α_j
//! ```
//!
//! where `α` is bilinear attention over the bi-GRU states of `z_r` and `g` a
//! sigmoid gate over `[h ++ attention context]`. With `z_r = ∅` the copy
//! branch is dropped and the step is a plain softmax.

use std::collections::HashSet;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::corpus::{ContextResponsePair, TokenId, EOS, PAD, SOS};
use crate::error::{ensure_contract, Error, Result};
use crate::hred::{argmax, Hred, HredConfig};
use crate::numerics::tensor::softmax;
use crate::numerics::{adam_step, BiGru, GradientMap, GruCell, Linear, ParamId, ParameterSet, Tape, Var};
use crate::probe::{extract_context_concepts, mask_context};
use crate::rng::{stream, Component};
use crate::train::{epoch_batches, EarlyStopping, EpochRecord, TrainConfig, TrainLog};

/// Which decoder provides the two passes behind `q`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QSource {
    /// The concept decoder. Starting from random parameters its PMI is close
    /// to zero, so the q-weighted concept loss barely moves it.
    Concept,
    /// The response decoder on its pure-generation path (`z_r = ∅`).
    #[default]
    Response,
}

impl std::str::FromStr for QSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concept" => Ok(Self::Concept),
            "response" => Ok(Self::Response),
            _ => Err(Error::InvalidValue {
                key: "q_source".into(),
                message: format!("expected concept or response, got `{s}`"),
            }),
        }
    }
}

/// How generation picks the response concepts `z_r`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptDecoding {
    /// Greedy decoding with the concept decoder until EOS or `max_concepts`.
    #[default]
    Greedy,
    /// A draft from the response decoder without `z_r`; draft words with
    /// `q ≥ 0.5` become `z_r`.
    Draft,
}

impl std::str::FromStr for ConceptDecoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "draft" => Ok(Self::Draft),
            _ => Err(Error::InvalidValue {
                key: "concept_decoding".into(),
                message: format!("expected greedy or draft, got `{s}`"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FocusConfig {
    /// Embedding and hidden sizes; shared layout with the baseline.
    pub dims: HredConfig,
    pub max_concepts: usize,
    #[serde(default)]
    pub q_source: QSource,
    #[serde(default)]
    pub concept_decoding: ConceptDecoding,
}

impl FocusConfig {
    pub fn new(dims: HredConfig) -> Self {
        Self {
            dims,
            max_concepts: 5,
            q_source: QSource::default(),
            concept_decoding: ConceptDecoding::default(),
        }
    }
}

/// Per-position inclusion probabilities `q_ℓ = PMI_ℓ / (1 + PMI_ℓ)` for
/// positive PMI, else 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QWeights(Vec<f64>);

impl QWeights {
    pub fn from_pmi(pmi: &[f64]) -> Self {
        Self(pmi.iter().map(|&p| if p > 0.0 { p / (1.0 + p) } else { 0.0 }).collect())
    }

    /// Wraps explicit weights; each must lie in `[0, 1)`.
    pub fn new(q: Vec<f64>) -> Result<Self> {
        ensure_contract!(
            q.iter().all(|&x| (0.0..1.0).contains(&x)),
            "q weights must lie in [0, 1): {q:?}"
        );
        Ok(Self(q))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Probability of selecting exactly the positions in `mask`.
    pub fn subset_prob(&self, mask: &[bool]) -> f64 {
        self.0
            .iter()
            .zip(mask)
            .map(|(&q, &m)| if m { q } else { 1.0 - q })
            .product()
    }

    /// Entropy of the factorised Bernoulli distribution.
    pub fn entropy(&self) -> f64 {
        let h = |p: f64| if p <= 0.0 || p >= 1.0 { 0.0 } else { -p * p.ln() };
        self.0.iter().map(|&q| h(q) + h(1.0 - q)).sum()
    }
}

/// Response concepts: selected response positions and their tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseConcepts {
    pub positions: Vec<usize>,
    pub tokens: Vec<TokenId>,
}

impl ResponseConcepts {
    pub fn from_mask(mask: &[bool], response: &[TokenId]) -> Self {
        let positions: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let tokens = positions.iter().map(|&i| response[i]).collect();
        Self { positions, tokens }
    }

    pub fn from_tokens(tokens: Vec<TokenId>) -> Self {
        Self {
            positions: Vec::new(),
            tokens,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Includes each position independently with probability `q_ℓ`. One uniform
/// draw is consumed per position regardless of its weight.
pub fn sample_response_concepts<R: rand::Rng>(
    q: &QWeights,
    response: &[TokenId],
    rng: &mut R,
) -> Result<ResponseConcepts> {
    ensure_contract!(
        q.len() == response.len(),
        "q has {} weights for a response of {} tokens",
        q.len(),
        response.len()
    );
    let mask: Vec<bool> = q.as_slice().iter().map(|&w| rng.random::<f64>() < w).collect();
    Ok(ResponseConcepts::from_mask(&mask, response))
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    emb: ParamId,
    utt: BiGru,
    con: BiGru,
    ctx: GruCell,
    cdec_init: Linear,
    cdec: GruCell,
    cdec_out: Linear,
    rdec_init: Linear,
    rdec: GruCell,
    attn: ParamId,
    gate: Linear,
    rdec_out: Linear,
}

impl Layout {
    fn resolve(params: &ParameterSet, cfg: &HredConfig) -> Result<Self> {
        let layout = Self {
            emb: params.id("emb")?,
            utt: BiGru::resolve(params, "utt")?,
            con: BiGru::resolve(params, "con")?,
            ctx: GruCell::resolve(params, "ctx")?,
            cdec_init: Linear::resolve(params, "cdec.init")?,
            cdec: GruCell::resolve(params, "cdec.gru")?,
            cdec_out: Linear::resolve(params, "cdec.out")?,
            rdec_init: Linear::resolve(params, "rdec.init")?,
            rdec: GruCell::resolve(params, "rdec.gru")?,
            attn: params.id("rdec.attn")?,
            gate: Linear::resolve(params, "rdec.gate")?,
            rdec_out: Linear::resolve(params, "rdec.out")?,
        };
        let (e, u, c, d, v) = (
            cfg.embed_dim,
            cfg.utt_hidden,
            cfg.ctx_hidden,
            cfg.dec_hidden,
            cfg.vocab_size,
        );
        let checks: [(&str, Vec<usize>); 11] = [
            ("emb", vec![v, e]),
            ("utt.fwd.w_z", vec![u, e]),
            ("con.fwd.w_z", vec![u, e]),
            ("ctx.w_z", vec![c, 4 * u]),
            ("cdec.init.w", vec![d, c]),
            ("cdec.gru.w_z", vec![d, e + c]),
            ("cdec.out.w", vec![v, d]),
            ("rdec.init.w", vec![d, c]),
            ("rdec.gru.w_z", vec![d, e + c]),
            ("rdec.attn", vec![d, 2 * u]),
            ("rdec.gate.w", vec![1, d + 2 * u]),
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

/// Context vector and per-utterance context-GRU states.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub v: Var,
    pub states: Vec<Var>,
}

/// The concept-aware conversation model `p`.
#[derive(Clone, Debug)]
pub struct FocusModel {
    config: FocusConfig,
    params: ParameterSet,
    layout: Layout,
}

impl FocusModel {
    pub fn new(config: FocusConfig, seed: u64) -> Result<Self> {
        config.dims.validate()?;
        let mut rng = stream(seed, Component::Init);
        let d = &config.dims;
        let (e, u, c, h, v) = (d.embed_dim, d.utt_hidden, d.ctx_hidden, d.dec_hidden, d.vocab_size);
        let mut p = ParameterSet::new();
        p.insert_random("emb", &[v, e], &mut rng)?;
        BiGru::register(&mut p, "utt", e, u, &mut rng)?;
        BiGru::register(&mut p, "con", e, u, &mut rng)?;
        GruCell::register(&mut p, "ctx", 4 * u, c, &mut rng)?;
        Linear::register(&mut p, "cdec.init", c, h, &mut rng)?;
        GruCell::register(&mut p, "cdec.gru", e + c, h, &mut rng)?;
        Linear::register(&mut p, "cdec.out", h, v, &mut rng)?;
        Linear::register(&mut p, "rdec.init", c, h, &mut rng)?;
        GruCell::register(&mut p, "rdec.gru", e + c, h, &mut rng)?;
        p.insert_random("rdec.attn", &[h, 2 * u], &mut rng)?;
        Linear::register(&mut p, "rdec.gate", h + 2 * u, 1, &mut rng)?;
        Linear::register(&mut p, "rdec.out", h, v, &mut rng)?;
        Self::from_params(config, p)
    }

    /// Random initialisation, then the embeddings, utterance encoder and
    /// decoder of `hred` copied into the shared and response-decoder slots.
    pub fn warm_start(config: FocusConfig, seed: u64, hred: &Hred) -> Result<Self> {
        ensure_contract!(
            hred.config() == &config.dims,
            "warm start needs matching dimensions: {:?} vs {:?}",
            hred.config(),
            config.dims
        );
        let mut model = Self::new(config, seed)?;
        for (_, name, value) in hred.params().iter() {
            let target = if let Some(rest) = name.strip_prefix("dec.") {
                format!("rdec.{rest}")
            } else if name == "emb" || name.starts_with("utt.") {
                name.to_string()
            } else {
                continue;
            };
            model.params.assign(&target, value.clone())?;
        }
        Ok(model)
    }

    pub fn from_params(config: FocusConfig, params: ParameterSet) -> Result<Self> {
        config.dims.validate()?;
        let layout = Layout::resolve(&params, &config.dims)?;
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &FocusConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        let v = self.config.dims.vocab_size;
        if let Some(&bad) = ids.iter().find(|&&t| t >= v) {
            return Err(Error::contract(format!(
                "token id {bad} out of range for vocabulary of {v}"
            )));
        }
        Ok(())
    }

    fn embed_all(&self, tape: &mut Tape<'_>, ids: &[TokenId]) -> Result<Vec<Var>> {
        self.check_ids(ids)?;
        ids.iter()
            .filter(|&&t| t != PAD)
            .map(|&t| tape.embed(self.layout.emb, t))
            .collect()
    }

    /// Encodes `context` with its per-utterance concepts `z_c`.
    pub fn encode_with_concepts(
        &self,
        tape: &mut Tape<'_>,
        context: &[Vec<TokenId>],
        z_c: &[Vec<TokenId>],
    ) -> Result<Encoded> {
        ensure_contract!(!context.is_empty(), "context must hold at least one utterance");
        ensure_contract!(
            z_c.len() == context.len(),
            "{} concept lists for {} utterances",
            z_c.len(),
            context.len()
        );
        let mut h = tape.zeros(self.config.dims.ctx_hidden);
        let mut states = Vec::with_capacity(context.len());
        for (utt, con) in context.iter().zip(z_c) {
            let ue = self.embed_all(tape, utt)?;
            let u = self.layout.utt.encode(tape, &ue)?;
            let ce = self.embed_all(tape, con)?;
            let c = self.layout.con.encode(tape, &ce)?;
            let x = tape.concat(&[u, c]);
            h = self.layout.ctx.step(tape, x, h)?;
            states.push(h);
        }
        Ok(Encoded { v: h, states })
    }

    /// Context vector as plain numbers.
    pub fn context_vector(&self, context: &[Vec<TokenId>], z_c: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_with_concepts(&mut tape, context, z_c)?;
        Ok(tape.value(enc.v).to_vec())
    }

    /// Teacher-forced concept-decoder NLL per response position.
    fn concept_nll(&self, tape: &mut Tape<'_>, v: Var, response: &[TokenId]) -> Result<Vec<Var>> {
        self.check_ids(response)?;
        let init = self.layout.cdec_init.forward(tape, v)?;
        let mut h = tape.tanh(init);
        let mut prev = SOS;
        let mut out = Vec::with_capacity(response.len());
        for &y in response {
            let e = tape.embed(self.layout.emb, prev)?;
            let x = tape.concat(&[e, v]);
            h = self.layout.cdec.step(tape, x, h)?;
            let logits = self.layout.cdec_out.forward(tape, h)?;
            out.push(tape.neg_log_softmax(logits, y)?);
            prev = y;
        }
        Ok(out)
    }

    /// Encoded `z_r` keys, or `None` for the pure-generation path.
    fn concept_memory(&self, tape: &mut Tape<'_>, z_r: &[TokenId]) -> Result<Option<Vec<Var>>> {
        if z_r.is_empty() {
            return Ok(None);
        }
        ensure_contract!(!z_r.contains(&PAD), "response concepts may not contain PAD");
        let embs = self.embed_all(tape, z_r)?;
        Ok(Some(self.layout.con.states(tape, &embs)?))
    }

    /// One response-decoder output step; returns `−log P(target)`.
    fn response_step_nll(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        memory: Option<&[Var]>,
        z_r: &[TokenId],
        target: TokenId,
    ) -> Result<Var> {
        let logits = self.layout.rdec_out.forward(tape, h)?;
        let Some(keys) = memory else {
            return tape.neg_log_softmax(logits, target);
        };
        let p_vocab = tape.softmax(logits);
        let pv = tape.sum_at(p_vocab, &[target])?;
        let scores = tape.bilinear(self.layout.attn, h, keys)?;
        let alpha = tape.softmax(scores);
        let att = tape.weighted_sum(alpha, keys)?;
        let gate_in = tape.concat(&[h, att]);
        let gate_logit = self.layout.gate.forward(tape, gate_in)?;
        let g = tape.sigmoid(gate_logit);
        let hits: Vec<usize> = (0..z_r.len()).filter(|&j| z_r[j] == target).collect();
        let pc = tape.sum_at(alpha, &hits)?;
        let keep = tape.one_minus(g);
        let gen = tape.mul(keep, pv)?;
        let copy = tape.mul(g, pc)?;
        let p = tape.add(gen, copy)?;
        let lp = tape.ln(p);
        Ok(tape.scale(lp, -1.0))
    }

    fn response_init(&self, tape: &mut Tape<'_>, v: Var) -> Result<Var> {
        let init = self.layout.rdec_init.forward(tape, v)?;
        Ok(tape.tanh(init))
    }

    /// Teacher-forced response-decoder NLL per position given `z_r`.
    fn response_nll(&self, tape: &mut Tape<'_>, v: Var, z_r: &[TokenId], response: &[TokenId]) -> Result<Vec<Var>> {
        self.check_ids(response)?;
        let memory = self.concept_memory(tape, z_r)?;
        let mut h = self.response_init(tape, v)?;
        let mut prev = SOS;
        let mut out = Vec::with_capacity(response.len());
        for &y in response {
            let e = tape.embed(self.layout.emb, prev)?;
            let x = tape.concat(&[e, v]);
            h = self.layout.rdec.step(tape, x, h)?;
            out.push(self.response_step_nll(tape, h, memory.as_deref(), z_r, y)?);
            prev = y;
        }
        Ok(out)
    }

    /// `log p_concept(w_ℓ | w_<ℓ, c, z_c)` for every response position.
    pub fn concept_log_probs(
        &self,
        context: &[Vec<TokenId>],
        z_c: &[Vec<TokenId>],
        response: &[TokenId],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_with_concepts(&mut tape, context, z_c)?;
        let terms = self.concept_nll(&mut tape, enc.v, response)?;
        Ok(terms.iter().map(|&t| -tape.scalar(t)).collect())
    }

    /// Per-position `log p_resp(w_ℓ | w_<ℓ, z_r, c, z_c)`.
    pub fn response_log_probs(
        &self,
        context: &[Vec<TokenId>],
        z_c: &[Vec<TokenId>],
        z_r: &[TokenId],
        response: &[TokenId],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_with_concepts(&mut tape, context, z_c)?;
        let terms = self.response_nll(&mut tape, enc.v, z_r, response)?;
        Ok(terms.iter().map(|&t| -tape.scalar(t)).collect())
    }

    /// Full next-token distribution of the response decoder after `prefix`.
    pub fn response_next_probs(
        &self,
        context: &[Vec<TokenId>],
        z_c: &[Vec<TokenId>],
        z_r: &[TokenId],
        prefix: &[TokenId],
    ) -> Result<Vec<f64>> {
        let v = self.config.dims.vocab_size;
        let mut probs = Vec::with_capacity(v);
        for y in 0..v {
            let mut seq = prefix.to_vec();
            seq.push(y);
            let lp = self.response_log_probs(context, z_c, z_r, &seq)?;
            probs.push(lp[prefix.len()].exp());
        }
        Ok(probs)
    }

    fn source_log_probs(
        &self,
        context: &[Vec<TokenId>],
        z_c: &[Vec<TokenId>],
        response: &[TokenId],
    ) -> Result<Vec<f64>> {
        match self.config.q_source {
            QSource::Concept => self.concept_log_probs(context, z_c, response),
            QSource::Response => self.response_log_probs(context, z_c, &[], response),
        }
    }

    /// Per-position PMI between each response word and the context concepts:
    /// the full pass sees `(c, z_c)`, the masked pass `(c⁻ᶻ, ∅)`.
    pub fn response_pmi(
        &self,
        context: &[Vec<TokenId>],
        z_c: &[Vec<TokenId>],
        response: &[TokenId],
    ) -> Result<Vec<f64>> {
        ensure_contract!(
            z_c.len() == context.len(),
            "{} concept lists for {} utterances",
            z_c.len(),
            context.len()
        );
        let concepts: HashSet<TokenId> = z_c.iter().flatten().copied().collect();
        let full = self.source_log_probs(context, z_c, response)?;
        if concepts.is_empty() {
            return Ok(vec![0.0; response.len()]);
        }
        let masked_ctx = mask_context(context, &concepts);
        let empty = vec![Vec::new(); context.len()];
        let masked = self.source_log_probs(&masked_ctx, &empty, response)?;
        Ok(full.iter().zip(&masked).map(|(a, b)| a - b).collect())
    }

    pub fn compute_q(&self, context: &[Vec<TokenId>], z_c: &[Vec<TokenId>], response: &[TokenId]) -> Result<QWeights> {
        Ok(QWeights::from_pmi(&self.response_pmi(context, z_c, response)?))
    }

    /// Concept loss and response loss on the tape.
    pub fn loss_vars(
        &self,
        tape: &mut Tape<'_>,
        context: &[Vec<TokenId>],
        z_c: &[Vec<TokenId>],
        response: &[TokenId],
        q: &QWeights,
        z_r: &[TokenId],
    ) -> Result<(Var, Var)> {
        ensure_contract!(
            q.len() == response.len(),
            "q has {} weights for a response of {} tokens",
            q.len(),
            response.len()
        );
        let enc = self.encode_with_concepts(tape, context, z_c)?;
        let mut weighted = Vec::new();
        let active: Vec<usize> = (0..q.len()).filter(|&i| q.as_slice()[i] > 0.0).collect();
        if !active.is_empty() {
            // only the prefix up to the last weighted position matters
            let last = *active.last().expect("non-empty");
            let terms = self.concept_nll(tape, enc.v, &response[..=last])?;
            for i in active {
                weighted.push(tape.scale(terms[i], q.as_slice()[i]));
            }
        }
        let concept = tape.sum_scalars(&weighted)?;
        let terms = self.response_nll(tape, enc.v, z_r, response)?;
        let resp = tape.sum_scalars(&terms)?;
        Ok((concept, resp))
    }

    /// `(−Σ_ℓ q_ℓ log p_concept(w_ℓ | …), −log p_resp(r | z_r, …))`.
    pub fn loss_terms(
        &self,
        context: &[Vec<TokenId>],
        z_c: &[Vec<TokenId>],
        response: &[TokenId],
        q: &QWeights,
        z_r: &[TokenId],
    ) -> Result<(f64, f64)> {
        let mut tape = Tape::new(&self.params);
        let (c, r) = self.loss_vars(&mut tape, context, z_c, response, q, z_r)?;
        Ok((tape.scalar(c), tape.scalar(r)))
    }

    /// Evidence lower bound with the expectation over `z_r ~ q` computed
    /// exactly:
    ///
    /// ```text
    /// ELBO = Σ_ℓ q_ℓ log π_ℓ + Σ_z q(z) log p(r | z) + H(q)
    /// ```
    ///
    /// with `π_ℓ = p_concept(w_ℓ | w_<ℓ, c, z_c)`. It lower-bounds
    /// `log Σ_z Π_{ℓ∈z} π_ℓ · p(r | z)`. At most 16 positions may carry
    /// positive weight.
    pub fn elbo(
        &self,
        context: &[Vec<TokenId>],
        z_c: &[Vec<TokenId>],
        response: &[TokenId],
        q: &QWeights,
    ) -> Result<f64> {
        ensure_contract!(q.len() == response.len(), "q and response lengths differ");
        let active: Vec<usize> = (0..q.len()).filter(|&i| q.as_slice()[i] > 0.0).collect();
        ensure_contract!(
            active.len() <= 16,
            "{} weighted positions is too many to enumerate",
            active.len()
        );
        let log_pi = self.concept_log_probs(context, z_c, response)?;
        let concept_term: f64 = active.iter().map(|&i| q.as_slice()[i] * log_pi[i]).sum();
        let mut expected = 0.0;
        for bits in 0u32..(1 << active.len()) {
            let mut mask = vec![false; response.len()];
            for (k, &i) in active.iter().enumerate() {
                mask[i] = bits >> k & 1 == 1;
            }
            let z = ResponseConcepts::from_mask(&mask, response);
            let lp: f64 = self.response_log_probs(context, z_c, &z.tokens, response)?.iter().sum();
            expected += q.subset_prob(&mask) * lp;
        }
        Ok(concept_term + expected + q.entropy())
    }

    /// Response-decoder greedy decode with copy over `z_r`.
    fn decode_response(
        &self,
        context: &[Vec<TokenId>],
        z_c: &[Vec<TokenId>],
        z_r: &[TokenId],
        max_len: usize,
    ) -> Result<Vec<TokenId>> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_with_concepts(&mut tape, context, z_c)?;
        let memory = self.concept_memory(&mut tape, z_r)?;
        let mut h = self.response_init(&mut tape, enc.v)?;
        let mut prev = SOS;
        let mut out = Vec::new();
        while out.len() < max_len {
            let e = tape.embed(self.layout.emb, prev)?;
            let x = tape.concat(&[e, enc.v]);
            h = self.layout.rdec.step(&mut tape, x, h)?;
            let logits = self.layout.rdec_out.forward(&mut tape, h)?;
            let mut probs = softmax(tape.value(logits));
            if let Some(keys) = memory.as_deref() {
                let scores = tape.bilinear(self.layout.attn, h, keys)?;
                let alpha = softmax(tape.value(scores));
                let att = tape.constant(alpha.clone());
                let ctx = tape.weighted_sum(att, keys)?;
                let gate_in = tape.concat(&[h, ctx]);
                let gl = self.layout.gate.forward(&mut tape, gate_in)?;
                let g = crate::numerics::tensor::sigmoid(tape.scalar(gl));
                for p in probs.iter_mut() {
                    *p *= 1.0 - g;
                }
                for (j, &t) in z_r.iter().enumerate() {
                    probs[t] += g * alpha[j];
                }
            }
            let next = argmax(&probs);
            if next == EOS {
                break;
            }
            out.push(next);
            prev = next;
        }
        Ok(out)
    }

    /// Greedy concept-decoder output, stopping at EOS or `max_concepts`.
    fn decode_concepts(&self, context: &[Vec<TokenId>], z_c: &[Vec<TokenId>]) -> Result<Vec<TokenId>> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_with_concepts(&mut tape, context, z_c)?;
        let init = self.layout.cdec_init.forward(&mut tape, enc.v)?;
        let mut h = tape.tanh(init);
        let mut prev = SOS;
        let mut out = Vec::new();
        while out.len() < self.config.max_concepts {
            let e = tape.embed(self.layout.emb, prev)?;
            let x = tape.concat(&[e, enc.v]);
            h = self.layout.cdec.step(&mut tape, x, h)?;
            let logits = self.layout.cdec_out.forward(&mut tape, h)?;
            let next = argmax(tape.value(logits));
            if next == EOS {
                break;
            }
            out.push(next);
            prev = next;
        }
        Ok(out)
    }

    /// Response concepts from a concept-free draft: positions with `q ≥ 0.5`.
    fn draft_concepts(&self, context: &[Vec<TokenId>], z_c: &[Vec<TokenId>], max_len: usize) -> Result<Vec<TokenId>> {
        let draft = self.decode_response(context, z_c, &[], max_len)?;
        if draft.is_empty() {
            return Ok(Vec::new());
        }
        let q = self.compute_q(context, z_c, &draft)?;
        Ok(draft
            .iter()
            .zip(q.as_slice())
            .filter(|(_, &w)| w >= 0.5)
            .map(|(&t, _)| t)
            .take(self.config.max_concepts)
            .collect())
    }

    /// Extracts `z_c`, decodes `z_r`, then decodes the response with copy
    /// over `z_r`.
    pub fn generate(&self, context: &[Vec<TokenId>], bank: &HashSet<TokenId>, max_len: usize) -> Result<Generation> {
        let z_c = extract_context_concepts(context, bank);
        let z_r = match self.config.concept_decoding {
            ConceptDecoding::Greedy => self.decode_concepts(context, &z_c)?,
            ConceptDecoding::Draft => self.draft_concepts(context, &z_c, max_len)?,
        };
        let response = self.decode_response(context, &z_c, &z_r, max_len)?;
        Ok(Generation { z_c, z_r, response })
    }

    fn pair_losses(
        &self,
        pair: &ContextResponsePair,
        bank: &HashSet<TokenId>,
        rng: &mut crate::rng::Rng,
    ) -> Result<(f64, f64)> {
        let z_c = extract_context_concepts(&pair.context, bank);
        let q = self.compute_q(&pair.context, &z_c, &pair.response)?;
        let z_r = sample_response_concepts(&q, &pair.response, rng)?;
        self.loss_terms(&pair.context, &z_c, &pair.response, &q, &z_r.tokens)
    }

    /// Mean per-token `(concept loss, response loss)` on `pairs`, with `z_r`
    /// drawn from a stream re-seeded on every call.
    pub fn evaluate(&self, pairs: &[ContextResponsePair], bank: &HashSet<TokenId>, seed: u64) -> Result<(f64, f64)> {
        let mut rng = stream(seed, Component::Validation);
        let (mut c, mut r, mut n) = (0.0, 0.0, 0usize);
        for p in pairs {
            let (lc, lr) = self.pair_losses(p, bank, &mut rng)?;
            c += lc;
            r += lr;
            n += p.response.len();
        }
        let n = n.max(1) as f64;
        Ok((c / n, r / n))
    }
}

/// Output of [`FocusModel::generate`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub z_c: Vec<Vec<TokenId>>,
    pub z_r: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

/// Alternates q estimation with gradient steps: every pair's `q` comes from
/// the current parameters, one `z_r` is sampled, and the summed concept and
/// response losses are minimised. Early stopping watches the validation
/// total loss per token.
pub fn train_mask_focus(
    train: &[ContextResponsePair],
    valid: &[ContextResponsePair],
    bank: &HashSet<TokenId>,
    config: &FocusConfig,
    cfg: &TrainConfig,
    warm_start: Option<&Hred>,
) -> Result<(FocusModel, TrainLog)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::EmptyDataset("validation split is empty".into()));
    }
    let mut model = match warm_start {
        Some(h) => FocusModel::warm_start(config.clone(), cfg.seed, h)?,
        None => FocusModel::new(config.clone(), cfg.seed)?,
    };
    let mut log = TrainLog::default();
    if bank.is_empty() {
        log.warnings
            .push("concept bank is empty: every q is zero and the concept loss vanishes".into());
    }
    let (c0, r0) = model.evaluate(train, bank, cfg.seed)?;
    log.initial_train_loss = c0 + r0;
    let (c0, r0) = model.evaluate(valid, bank, cfg.seed)?;
    log.initial_valid_loss = c0 + r0;

    let mut stopper = EarlyStopping::new(cfg.patience, log.initial_valid_loss, model.params.clone());
    let mut shuffle = stream(cfg.seed, Component::Shuffle);
    let mut sampler = stream(cfg.seed, Component::FocusSampling);
    let mut grads = GradientMap::for_params(&model.params);

    for epoch in 1..=cfg.max_epochs {
        let (mut sum_c, mut sum_r, mut tokens_all) = (0.0, 0.0, 0usize);
        for batch in epoch_batches(train.len(), cfg.batch_size, &mut shuffle) {
            grads.clear();
            let tokens: usize = batch.iter().map(|&i| train[i].response.len()).sum();
            let scale = 1.0 / tokens as f64;
            for &i in &batch {
                let pair = &train[i];
                let z_c = extract_context_concepts(&pair.context, bank);
                let q = model.compute_q(&pair.context, &z_c, &pair.response)?;
                let z_r = sample_response_concepts(&q, &pair.response, &mut sampler)?;
                let mut tape = Tape::new(&model.params);
                let (c, r) = model.loss_vars(&mut tape, &pair.context, &z_c, &pair.response, &q, &z_r.tokens)?;
                sum_c += tape.scalar(c);
                sum_r += tape.scalar(r);
                let total = tape.add(c, r)?;
                tape.backward_into(total, scale, &mut grads)?;
            }
            tokens_all += tokens;
            adam_step(&mut model.params, &grads, &cfg.adam)?;
        }
        let (vc, vr) = model.evaluate(valid, bank, cfg.seed)?;
        let n = tokens_all as f64;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: (sum_c + sum_r) / n,
            valid_loss: vc + vr,
            extra: vec![
                ("train_concept".into(), sum_c / n),
                ("train_response".into(), sum_r / n),
                ("valid_concept".into(), vc),
                ("valid_response".into(), vr),
            ],
        });
        if stopper.observe(epoch, vc + vr, || model.params.clone()) {
            log.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    let (best, best_epoch) = stopper.finish();
    log.best_epoch = best_epoch;
    log.rng_state = Some(shuffle);
    model.params = best;
    Ok((model, log))
}
