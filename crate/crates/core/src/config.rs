//! Run configuration: preset defaults, then a flat `key = value` file, then
//! command-line overrides.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::corpus::{SynthSpec, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{Averaging, Lexicon};
use crate::focus::{ConceptDecoding, FocusConfig, QSource};
use crate::hred::HredConfig;
use crate::numerics::AdamConfig;
use crate::probe::{ProbeConfig, ProbeMode};
use crate::train::TrainConfig;

pub const PRESETS: [&str; 3] = ["small", "techsupport", "ubuntu"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,

    pub embed_dim: usize,
    pub utt_hidden: usize,
    pub ctx_hidden: usize,
    pub dec_hidden: usize,
    pub max_response_len: usize,
    pub max_vocab: usize,

    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,

    pub speaker_filter: Option<String>,
    pub valid_size: usize,
    pub test_size: usize,
    /// Cap on training pairs; `None` uses the whole training split.
    pub train_size: Option<usize>,

    pub synth_concepts: usize,
    pub synth_noise: usize,
    pub synth_dialogues: usize,

    pub probe_mode: String,
    pub probe_rho: f64,
    pub probe_count: usize,
    pub probe_threshold: f64,
    pub probe_min_count: u64,
    pub stopwords: Option<PathBuf>,

    pub max_concepts: usize,
    pub q_source: QSource,
    pub concept_decoding: ConceptDecoding,
    pub warm_start: bool,

    pub averaging: Averaging,
    pub lexicons: Vec<PathBuf>,

    /// Turns of history the chat session keeps.
    pub context_turns: usize,

    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub hred_checkpoint: Option<PathBuf>,
    pub focus_checkpoint: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub truth: Option<PathBuf>,
}

/// Every key accepted in a config file or as an override.
pub const KEYS: [&str; 38] = [
    "preset",
    "seed",
    "embed_dim",
    "utt_hidden",
    "ctx_hidden",
    "dec_hidden",
    "max_response_len",
    "max_vocab",
    "lr",
    "batch_size",
    "max_epochs",
    "patience",
    "speaker_filter",
    "valid_size",
    "test_size",
    "train_size",
    "synth_concepts",
    "synth_noise",
    "synth_dialogues",
    "probe_mode",
    "probe_rho",
    "probe_count",
    "probe_threshold",
    "probe_min_count",
    "stopwords",
    "max_concepts",
    "q_source",
    "concept_decoding",
    "warm_start",
    "averaging",
    "lexicons",
    "context_turns",
    "data",
    "out",
    "hred_checkpoint",
    "focus_checkpoint",
    "bank",
    "truth",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::InvalidValue {
        key: key.to_string(),
        message: format!("`{value}`: {e}"),
    })
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let dims = HredConfig::preset(name, 0)?;
        let lr = if name == "small" {
            1e-3
        } else {
            AdamConfig::default().lr
        };
        Ok(Self {
            preset: name.to_string(),
            seed: 1,
            embed_dim: dims.embed_dim,
            utt_hidden: dims.utt_hidden,
            ctx_hidden: dims.ctx_hidden,
            dec_hidden: dims.dec_hidden,
            max_response_len: dims.max_response_len,
            max_vocab: 20_000,
            lr,
            batch_size: 10,
            max_epochs: 15,
            patience: 3,
            speaker_filter: (name != "ubuntu").then(|| "agent".to_string()),
            valid_size: 200,
            test_size: 200,
            train_size: None,
            synth_concepts: 4,
            synth_noise: 32,
            synth_dialogues: 2000,
            probe_mode: "single".into(),
            probe_rho: 0.3,
            probe_count: 4,
            probe_threshold: 0.1,
            probe_min_count: 3,
            stopwords: None,
            max_concepts: 5,
            q_source: QSource::default(),
            concept_decoding: ConceptDecoding::default(),
            warm_start: false,
            averaging: Averaging::Macro,
            lexicons: Vec::new(),
            context_turns: 8,
            data: None,
            out: None,
            hred_checkpoint: None,
            focus_checkpoint: None,
            bank: None,
            truth: None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "preset" => *self = Self::preset(v)?,
            "seed" => self.seed = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "utt_hidden" => self.utt_hidden = parse(key, v)?,
            "ctx_hidden" => self.ctx_hidden = parse(key, v)?,
            "dec_hidden" => self.dec_hidden = parse(key, v)?,
            "max_response_len" => self.max_response_len = parse(key, v)?,
            "max_vocab" => self.max_vocab = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "speaker_filter" => self.speaker_filter = (!v.is_empty()).then(|| v.to_string()),
            "valid_size" => self.valid_size = parse(key, v)?,
            "test_size" => self.test_size = parse(key, v)?,
            "train_size" => self.train_size = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "synth_concepts" => self.synth_concepts = parse(key, v)?,
            "synth_noise" => self.synth_noise = parse(key, v)?,
            "synth_dialogues" => self.synth_dialogues = parse(key, v)?,
            "probe_mode" => self.probe_mode = v.to_string(),
            "probe_rho" => self.probe_rho = parse(key, v)?,
            "probe_count" => self.probe_count = parse(key, v)?,
            "probe_threshold" => self.probe_threshold = parse(key, v)?,
            "probe_min_count" => self.probe_min_count = parse(key, v)?,
            "stopwords" => self.stopwords = opt_path(v),
            "max_concepts" => self.max_concepts = parse(key, v)?,
            "q_source" => self.q_source = v.parse()?,
            "concept_decoding" => self.concept_decoding = v.parse()?,
            "warm_start" => self.warm_start = parse(key, v)?,
            "averaging" => self.averaging = v.parse()?,
            "lexicons" => {
                self.lexicons = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "context_turns" => self.context_turns = parse(key, v)?,
            "data" => self.data = opt_path(v),
            "out" => self.out = opt_path(v),
            "hred_checkpoint" => self.hred_checkpoint = opt_path(v),
            "focus_checkpoint" => self.focus_checkpoint = opt_path(v),
            "bank" => self.bank = opt_path(v),
            "truth" => self.truth = opt_path(v),
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Resolves preset defaults, then `file`, then `overrides`. The preset
    /// itself is taken from the overrides, else the file, else `small`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let file_entries = match file {
            Some(p) => parse_file(p)?,
            None => Vec::new(),
        };
        let preset = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .or_else(|| file_entries.iter().find(|(k, _)| k == "preset"))
            .map(|(_, v)| v.as_str())
            .unwrap_or("small");
        let mut cfg = Self::preset(preset)?;
        for (k, v) in file_entries.iter().chain(overrides) {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::InvalidValue {
                key: key.into(),
                message: message.into(),
            })
        };
        for (k, v) in [
            ("embed_dim", self.embed_dim),
            ("utt_hidden", self.utt_hidden),
            ("ctx_hidden", self.ctx_hidden),
            ("dec_hidden", self.dec_hidden),
            ("max_response_len", self.max_response_len),
            ("batch_size", self.batch_size),
            ("context_turns", self.context_turns),
        ] {
            if v == 0 {
                return bad(k, "must be at least 1");
            }
        }
        if self.max_vocab < 5 {
            return bad("max_vocab", "must be at least 5");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !["single", "multi"].contains(&self.probe_mode.as_str()) {
            return bad("probe_mode", "expected single or multi");
        }
        self.probe_config_raw().validate()
    }

    /// Path-valued setting that the current command cannot run without.
    pub fn require(&self, key: &str) -> Result<&Path> {
        let p = match key {
            "data" => &self.data,
            "out" => &self.out,
            "hred_checkpoint" => &self.hred_checkpoint,
            "focus_checkpoint" => &self.focus_checkpoint,
            "bank" => &self.bank,
            "truth" => &self.truth,
            "stopwords" => &self.stopwords,
            _ => return Err(Error::UnknownKey(key.to_string())),
        };
        p.as_deref().ok_or_else(|| Error::MissingPath(key.to_string()))
    }

    /// Every resolved value, keyed by its config name.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let values = [
            self.preset.clone(),
            self.seed.to_string(),
            self.embed_dim.to_string(),
            self.utt_hidden.to_string(),
            self.ctx_hidden.to_string(),
            self.dec_hidden.to_string(),
            self.max_response_len.to_string(),
            self.max_vocab.to_string(),
            format!("{:?}", self.lr),
            self.batch_size.to_string(),
            self.max_epochs.to_string(),
            self.patience.to_string(),
            self.speaker_filter.clone().unwrap_or_default(),
            self.valid_size.to_string(),
            self.test_size.to_string(),
            self.train_size.map(|n| n.to_string()).unwrap_or_default(),
            self.synth_concepts.to_string(),
            self.synth_noise.to_string(),
            self.synth_dialogues.to_string(),
            self.probe_mode.clone(),
            format!("{:?}", self.probe_rho),
            self.probe_count.to_string(),
            format!("{:?}", self.probe_threshold),
            self.probe_min_count.to_string(),
            show_path(&self.stopwords),
            self.max_concepts.to_string(),
            format!("{:?}", self.q_source).to_lowercase(),
            format!("{:?}", self.concept_decoding).to_lowercase(),
            self.warm_start.to_string(),
            format!("{:?}", self.averaging).to_lowercase(),
            self.lexicons
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(","),
            self.context_turns.to_string(),
            show_path(&self.data),
            show_path(&self.out),
            show_path(&self.hred_checkpoint),
            show_path(&self.focus_checkpoint),
            show_path(&self.bank),
            show_path(&self.truth),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    /// The resolved configuration in file syntax.
    pub fn render(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hred_config(&self, vocab_size: usize) -> HredConfig {
        HredConfig {
            embed_dim: self.embed_dim,
            utt_hidden: self.utt_hidden,
            ctx_hidden: self.ctx_hidden,
            dec_hidden: self.dec_hidden,
            max_response_len: self.max_response_len,
            vocab_size,
        }
    }

    pub fn focus_config(&self, vocab_size: usize) -> FocusConfig {
        FocusConfig {
            dims: self.hred_config(vocab_size),
            max_concepts: self.max_concepts,
            q_source: self.q_source,
            concept_decoding: self.concept_decoding,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig::with_lr(self.lr),
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            concepts: self.synth_concepts,
            noise: self.synth_noise,
            dialogues: self.synth_dialogues,
            seed: self.seed,
            ..SynthSpec::default()
        }
    }

    fn probe_config_raw(&self) -> ProbeConfig {
        ProbeConfig {
            mode: if self.probe_mode == "multi" {
                ProbeMode::MultiWord {
                    rho: self.probe_rho,
                    probes: self.probe_count,
                }
            } else {
                ProbeMode::SingleWord
            },
            threshold: self.probe_threshold,
            min_count: self.probe_min_count,
            stopwords: BTreeSet::new(),
        }
    }

    /// Probe settings with the stopword file (if any) mapped through `vocab`.
    pub fn probe_config(&self, vocab: &Vocabulary) -> Result<ProbeConfig> {
        let mut cfg = self.probe_config_raw();
        if let Some(path) = &self.stopwords {
            let words = Lexicon::load(path)?;
            cfg.stopwords = vocab
                .words()
                .iter()
                .enumerate()
                .filter(|(_, w)| words.contains(w))
                .map(|(i, _)| i as TokenId)
                .collect();
        }
        Ok(cfg)
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::UnknownKey(k.to_string()));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(err(format!("`{k}` is set twice")));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
