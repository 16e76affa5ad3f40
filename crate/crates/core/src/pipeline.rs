//! The steps behind each command-line subcommand. Every step reads its inputs
//! from the paths in a [`RunConfig`] and writes its artifacts under `out`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{
    build_vocab, extract_all_pairs, load_jsonl, save_jsonl, split_pairs, synth_generate, ContextResponsePair,
    GroundTruth, Splits, TokenId, Vocabulary, EOS,
};
use crate::error::{Error, Result};
use crate::eval::{bleu, lexicon_prf, probe_recall, Lexicon, MetricReport};
use crate::focus::{train_mask_focus, FocusModel};
use crate::hred::{train_hred, Hred};
use crate::probe::{build_concept_bank, extract_context_concepts, ConceptBank};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TRUTH_FILE: &str = "truth.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const HRED_FILE: &str = "hred.mfck";
pub const FOCUS_FILE: &str = "focus.mfck";
pub const BANK_FILE: &str = "bank.tsv";
pub const BANK_FULL_FILE: &str = "bank_full.tsv";
pub const CONCEPTS_FILE: &str = "concepts.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const PER_PAIR_FILE: &str = "per_pair.csv";

/// Vocabulary plus encoded splits, as written by `prepare-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub splits: Splits,
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ds: Self = serde_json::from_slice(&fs::read(path)?)?;
        let v = ds.vocab.len();
        let s = &ds.splits;
        for p in s.train.iter().chain(&s.valid).chain(&s.test) {
            if p.context.is_empty() || p.response.is_empty() {
                return Err(Error::Data(format!(
                    "{}: pair `{}` is empty",
                    path.display(),
                    p.conversation_id
                )));
            }
            if p.context.iter().flatten().chain(&p.response).any(|&t| t >= v) {
                return Err(Error::Data(format!(
                    "{}: pair `{}` has ids outside the vocabulary",
                    path.display(),
                    p.conversation_id
                )));
            }
        }
        Ok(ds)
    }

    /// Training pairs, capped at `train_size` when set.
    pub fn train<'a>(&'a self, cfg: &RunConfig) -> &'a [ContextResponsePair] {
        let n = cfg.train_size.unwrap_or(usize::MAX).min(self.splits.train.len());
        &self.splits.train[..n]
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.require("out")?.to_path_buf();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Writes a synthetic corpus and its ground truth.
pub fn synth_data(cfg: &RunConfig) -> Result<Value> {
    let dir = out_dir(cfg)?;
    let (convs, truth) = synth_generate(&cfg.synth_spec())?;
    let corpus = dir.join(CORPUS_FILE);
    save_jsonl(&corpus, &convs)?;
    truth.save(&dir.join(TRUTH_FILE))?;
    info!("wrote {} dialogues to {}", convs.len(), corpus.display());
    Ok(json!({ "corpus": corpus, "truth": dir.join(TRUTH_FILE), "dialogues": convs.len() }))
}

/// Tokenizes a JSONL corpus, builds the vocabulary and splits the pairs.
pub fn prepare_data(cfg: &RunConfig) -> Result<Value> {
    let dir = out_dir(cfg)?;
    let convs = load_jsonl(cfg.require("data")?)?;
    let vocab = build_vocab(&convs, cfg.max_vocab);
    let pairs = extract_all_pairs(&convs, &vocab, cfg.speaker_filter.as_deref());
    let splits = split_pairs(pairs, cfg.valid_size, cfg.test_size, cfg.seed)?;
    let ds = Dataset { vocab, splits };
    let path = dir.join(DATASET_FILE);
    ds.save(&path)?;
    info!(
        "vocabulary {} words; {} train / {} valid / {} test pairs",
        ds.vocab.len(),
        ds.splits.train.len(),
        ds.splits.valid.len(),
        ds.splits.test.len()
    );
    Ok(json!({
        "dataset": path,
        "vocab": ds.vocab.len(),
        "train": ds.splits.train.len(),
        "valid": ds.splits.valid.len(),
        "test": ds.splits.test.len(),
    }))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(cfg.require("data")?)
}

pub fn train_hred_step(cfg: &RunConfig, ds: &Dataset) -> Result<(Hred, Value)> {
    let dir = out_dir(cfg)?;
    let train = ds.train(cfg);
    info!("training the baseline on {} pairs", train.len());
    let (model, log) = train_hred(
        train,
        &ds.splits.valid,
        &cfg.hred_config(ds.vocab.len()),
        &cfg.train_config(),
    )?;
    let ck = Checkpoint::from_hred(&model, &ds.vocab, cfg.seed, log.rng_state.clone())?
        .with_meta(json!({ "train": cfg.train_config(), "train_pairs": train.len() }));
    let path = dir.join(HRED_FILE);
    ck.save(&path)?;
    write_json(&dir.join("hred_log.json"), &log)?;
    info!(
        "baseline best epoch {} (valid NLL {:.4})",
        log.best_epoch,
        best_valid(&log)
    );
    Ok((
        model,
        json!({ "checkpoint": path, "best_epoch": log.best_epoch, "train_pairs": train.len() }),
    ))
}

fn best_valid(log: &crate::train::TrainLog) -> f64 {
    log.epochs
        .iter()
        .find(|e| e.epoch == log.best_epoch)
        .map_or(log.initial_valid_loss, |e| e.valid_loss)
}

pub fn train_hred_cmd(cfg: &RunConfig) -> Result<Value> {
    let ds = load_dataset(cfg)?;
    Ok(train_hred_step(cfg, &ds)?.1)
}

fn load_hred(cfg: &RunConfig) -> Result<(Hred, Vocabulary)> {
    let ck = Checkpoint::load(cfg.require("hred_checkpoint")?)?;
    Ok((ck.to_hred()?, ck.header.vocab))
}

fn load_focus(cfg: &RunConfig) -> Result<(FocusModel, Vocabulary)> {
    let ck = Checkpoint::load(cfg.require("focus_checkpoint")?)?;
    Ok((ck.to_focus()?, ck.header.vocab))
}

fn same_vocab(a: &Vocabulary, b: &Vocabulary) -> Result<()> {
    if a != b {
        return Err(Error::Data(
            "checkpoint vocabulary differs from the dataset vocabulary".into(),
        ));
    }
    Ok(())
}

pub fn probe_step(cfg: &RunConfig, ds: &Dataset, hred: &Hred) -> Result<(ConceptBank, Value)> {
    let dir = out_dir(cfg)?;
    let probe_cfg = cfg.probe_config(&ds.vocab)?;
    let train = ds.train(cfg);
    info!("probing {} pairs", train.len());
    let outcome = build_concept_bank(hred, train, &ds.vocab, &probe_cfg, cfg.seed)?;
    outcome.bank.save_tsv(&dir.join(BANK_FILE))?;
    outcome.all.save_tsv(&dir.join(BANK_FULL_FILE))?;
    let top: Vec<&str> = outcome.bank.top_k(10);
    info!(
        "concept bank holds {} words; top: {}",
        outcome.bank.len(),
        top.join(" ")
    );
    let summary = json!({ "bank": dir.join(BANK_FILE), "size": outcome.bank.len(), "top": top });
    Ok((outcome.bank, summary))
}

pub fn probe_cmd(cfg: &RunConfig) -> Result<Value> {
    let ds = load_dataset(cfg)?;
    let (hred, vocab) = load_hred(cfg)?;
    same_vocab(&vocab, &ds.vocab)?;
    Ok(probe_step(cfg, &ds, &hred)?.1)
}

/// Rewrites the bank under the configured threshold and lists the context
/// concepts of every pair.
pub fn export_concepts(cfg: &RunConfig) -> Result<Value> {
    let dir = out_dir(cfg)?;
    let ds = load_dataset(cfg)?;
    let bank = ConceptBank::load_tsv(cfg.require("bank")?)?.filtered(cfg.probe_threshold, cfg.probe_min_count);
    bank.save_tsv(&dir.join(BANK_FILE))?;
    let tokens = bank.token_set(&ds.vocab);
    let mut out = String::new();
    let s = &ds.splits;
    for (split, pairs) in [("train", &s.train), ("valid", &s.valid), ("test", &s.test)] {
        for p in pairs.iter() {
            let z_c: Vec<Vec<String>> = extract_context_concepts(&p.context, &tokens)
                .iter()
                .map(|u| ds.vocab.decode(u))
                .collect();
            let line = json!({ "id": p.conversation_id, "turn": p.turn_index, "split": split, "concepts": z_c });
            writeln!(out, "{line}").expect("string write");
        }
    }
    fs::write(dir.join(CONCEPTS_FILE), out)?;
    Ok(json!({ "bank": dir.join(BANK_FILE), "size": bank.len(), "concepts": dir.join(CONCEPTS_FILE) }))
}

pub fn train_focus_step(
    cfg: &RunConfig,
    ds: &Dataset,
    bank: &ConceptBank,
    warm: Option<&Hred>,
) -> Result<(FocusModel, Value)> {
    let dir = out_dir(cfg)?;
    let train = ds.train(cfg);
    let tokens = bank.token_set(&ds.vocab);
    info!(
        "training the concept model on {} pairs with {} concepts",
        train.len(),
        tokens.len()
    );
    let (model, log) = train_mask_focus(
        train,
        &ds.splits.valid,
        &tokens,
        &cfg.focus_config(ds.vocab.len()),
        &cfg.train_config(),
        warm,
    )?;
    for w in &log.warnings {
        log::warn!("{w}");
    }
    let ck = Checkpoint::from_focus(&model, &ds.vocab, cfg.seed, log.rng_state.clone())?.with_meta(json!({
        "train": cfg.train_config(),
        "train_pairs": train.len(),
        "warm_start": warm.is_some(),
    }));
    let path = dir.join(FOCUS_FILE);
    ck.save(&path)?;
    write_json(&dir.join("focus_log.json"), &log)?;
    info!(
        "concept model best epoch {} (valid loss {:.4})",
        log.best_epoch,
        best_valid(&log)
    );
    Ok((
        model,
        json!({ "checkpoint": path, "best_epoch": log.best_epoch, "train_pairs": train.len() }),
    ))
}

pub fn train_focus_cmd(cfg: &RunConfig) -> Result<Value> {
    let ds = load_dataset(cfg)?;
    let bank = ConceptBank::load_tsv(cfg.require("bank")?)?;
    let warm = if cfg.warm_start {
        let (h, vocab) = load_hred(cfg)?;
        same_vocab(&vocab, &ds.vocab)?;
        Some(h)
    } else {
        None
    };
    Ok(train_focus_step(cfg, &ds, &bank, warm.as_ref())?.1)
}

/// Metric name → report, plus per-pair CSV rows.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub metrics: BTreeMap<String, MetricReport>,
}

impl Evaluation {
    pub fn aggregate(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).map(|m| m.aggregate)
    }

    /// `{metric: {aggregate, config}}`.
    pub fn summary(&self) -> Value {
        Value::Object(
            self.metrics
                .iter()
                .map(|(k, m)| (k.clone(), json!({ "aggregate": m.aggregate, "config": m.config })))
                .collect(),
        )
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("metric,pair,value\n");
        for (name, m) in &self.metrics {
            for (i, v) in m.per_pair.iter().enumerate() {
                let v = v.map(|x| format!("{x:?}")).unwrap_or_default();
                writeln!(out, "{name},{i},{v}").expect("string write");
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(REPORT_FILE), &self.summary())?;
        fs::write(dir.join(PER_PAIR_FILE), self.csv())?;
        Ok(())
    }
}

fn strip_eos(r: &[TokenId]) -> &[TokenId] {
    r.strip_suffix(&[EOS]).unwrap_or(r)
}

/// BLEU and lexicon scores of `hyps` against the test references.
fn score_model(
    eval: &mut Evaluation,
    model: &str,
    hyps: &[Vec<String>],
    ds: &Dataset,
    lexicons: &[Lexicon],
    cfg: &RunConfig,
) -> Result<()> {
    let refs: Vec<Vec<String>> = ds
        .splits
        .test
        .iter()
        .map(|p| ds.vocab.decode(strip_eos(&p.response)))
        .collect();
    let per_pair = hyps
        .iter()
        .zip(&refs)
        .map(|(h, r)| bleu(std::slice::from_ref(h), std::slice::from_ref(r), 4).map(Some))
        .collect::<Result<Vec<_>>>()?;
    let config = json!({
        "model": model,
        "max_n": 4,
        "smoothing": "add-one on zero precisions for n >= 2",
        "pairs": refs.len(),
        "train_size": ds.train(cfg).len(),
    });
    eval.metrics.insert(
        format!("{model}.bleu"),
        MetricReport {
            metric: "bleu".into(),
            per_pair,
            aggregate: bleu(hyps, &refs, 4)?,
            config,
        },
    );
    for lex in lexicons {
        let scores = match lexicon_prf(hyps, &refs, lex, cfg.averaging) {
            Err(Error::NoScorablePairs(msg)) => {
                log::warn!("{model}: {msg}");
                continue;
            }
            r => r?,
        };
        let config = json!({ "model": model, "lexicon": lex.name, "averaging": cfg.averaging });
        for (field, agg, pick) in [
            ("precision", scores.aggregate.precision, 0),
            ("recall", scores.aggregate.recall, 1),
            ("f1", scores.aggregate.f1, 2),
        ] {
            let per_pair = scores
                .per_pair
                .iter()
                .map(|s| s.map(|s| [s.precision, s.recall, s.f1][pick]))
                .collect();
            eval.metrics.insert(
                format!("{model}.{}.{field}", lex.name),
                MetricReport {
                    metric: format!("{}_{field}", lex.name),
                    per_pair,
                    aggregate: agg,
                    config: config.clone(),
                },
            );
        }
    }
    Ok(())
}

/// Generates test responses with whichever models are given and scores them.
pub fn evaluate_models(
    cfg: &RunConfig,
    ds: &Dataset,
    hred: Option<&Hred>,
    focus: Option<(&FocusModel, &ConceptBank)>,
    truth: Option<&GroundTruth>,
) -> Result<Evaluation> {
    if ds.splits.test.is_empty() {
        return Err(Error::EmptyDataset("test split is empty".into()));
    }
    let lexicons = cfg
        .lexicons
        .iter()
        .map(|p| Lexicon::load(p))
        .collect::<Result<Vec<_>>>()?;
    let mut eval = Evaluation::default();
    if let Some(h) = hred {
        let hyps = ds
            .splits
            .test
            .iter()
            .map(|p| {
                Ok(ds
                    .vocab
                    .decode(&h.generate_response(&p.context, h.config().max_response_len)?))
            })
            .collect::<Result<Vec<_>>>()?;
        score_model(&mut eval, "hred", &hyps, ds, &lexicons, cfg)?;
    }
    if let Some((f, bank)) = focus {
        let tokens = bank.token_set(&ds.vocab);
        let hyps = ds
            .splits
            .test
            .iter()
            .map(|p| {
                let g = f.generate(&p.context, &tokens, f.config().dims.max_response_len)?;
                Ok(ds.vocab.decode(&g.response))
            })
            .collect::<Result<Vec<_>>>()?;
        score_model(&mut eval, "focus", &hyps, ds, &lexicons, cfg)?;
    }
    if let (Some(truth), Some((_, bank))) = (truth, focus) {
        let planted = truth.context_concepts();
        let recall = probe_recall(bank, &planted, planted.len())?;
        eval.metrics.insert(
            "probe_recall".into(),
            MetricReport {
                metric: "probe_recall".into(),
                per_pair: Vec::new(),
                aggregate: recall,
                config: json!({ "k": planted.len(), "bank_size": bank.len() }),
            },
        );
    }
    Ok(eval)
}

pub fn evaluate_cmd(cfg: &RunConfig) -> Result<Value> {
    if cfg.hred_checkpoint.is_none() && cfg.focus_checkpoint.is_none() {
        return Err(Error::MissingPath("hred_checkpoint or focus_checkpoint".into()));
    }
    let dir = out_dir(cfg)?;
    let ds = load_dataset(cfg)?;
    let hred = match &cfg.hred_checkpoint {
        Some(_) => Some(load_hred(cfg)?),
        None => None,
    };
    let focus = match &cfg.focus_checkpoint {
        Some(_) => Some((load_focus(cfg)?, ConceptBank::load_tsv(cfg.require("bank")?)?)),
        None => None,
    };
    for vocab in hred.iter().map(|h| &h.1).chain(focus.iter().map(|f| &f.0 .1)) {
        same_vocab(vocab, &ds.vocab)?;
    }
    let truth = cfg.truth.as_deref().map(GroundTruth::load).transpose()?;
    let eval = evaluate_models(
        cfg,
        &ds,
        hred.as_ref().map(|h| &h.0),
        focus.as_ref().map(|((m, _), b)| (m, b)),
        truth.as_ref(),
    )?;
    eval.write(&dir)?;
    Ok(eval.summary())
}

/// Full pipeline: synthesize (unless `data` names a corpus), prepare, train
/// the baseline, probe, train the concept model and evaluate both.
pub fn experiment(cfg: &RunConfig) -> Result<Value> {
    let dir = out_dir(cfg)?;
    let mut cfg = cfg.clone();
    let truth = match cfg.data.clone() {
        Some(corpus) => {
            cfg.data = Some(corpus);
            cfg.truth.as_deref().map(GroundTruth::load).transpose()?
        }
        None => {
            synth_data(&cfg)?;
            cfg.data = Some(dir.join(CORPUS_FILE));
            Some(GroundTruth::load(&dir.join(TRUTH_FILE))?)
        }
    };
    prepare_data(&cfg)?;
    let ds = Dataset::load(&dir.join(DATASET_FILE))?;
    let (hred, _) = train_hred_step(&cfg, &ds)?;
    let (bank, _) = probe_step(&cfg, &ds, &hred)?;
    let (focus, _) = train_focus_step(&cfg, &ds, &bank, cfg.warm_start.then_some(&hred))?;
    let eval = evaluate_models(&cfg, &ds, Some(&hred), Some((&focus, &bank)), truth.as_ref())?;
    eval.write(&dir)?;
    Ok(eval.summary())
}

/// Bank token set for a dataset vocabulary.
pub fn bank_tokens(bank: &ConceptBank, vocab: &Vocabulary) -> HashSet<TokenId> {
    bank.token_set(vocab)
}
