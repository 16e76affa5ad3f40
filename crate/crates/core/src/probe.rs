//! Mask probing: delete context words, rescore the response, and collect
//! the log-probability drops per word in a [`ConceptBank`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::hash::Hash;
use std::io::Write;
use std::path::Path;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::corpus::{ContextResponsePair, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::hred::Hred;
use crate::rng::{stream, Component};

/// Anything that can score `log p(r | c)`.
pub trait ResponseScorer {
    fn score(&self, context: &[Vec<TokenId>], response: &[TokenId]) -> Result<f64>;
}

impl ResponseScorer for Hred {
    fn score(&self, context: &[Vec<TokenId>], response: &[TokenId]) -> Result<f64> {
        Ok(self.log_prob_response(context, response)?.0)
    }
}

impl<S: ResponseScorer + ?Sized> ResponseScorer for &S {
    fn score(&self, context: &[Vec<TokenId>], response: &[TokenId]) -> Result<f64> {
        (**self).score(context, response)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProbeMode {
    /// One probe per unique context word; the delta is the exact PMI.
    SingleWord,
    /// `probes` random masks per pair, each word included with probability `rho`.
    MultiWord { rho: f64, probes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    /// Minimum mean PMI for a word to enter the bank.
    pub threshold: f64,
    pub min_count: u64,
    #[serde(default)]
    pub stopwords: BTreeSet<TokenId>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: ProbeMode::SingleWord,
            threshold: 0.1,
            min_count: 1,
            stopwords: BTreeSet::new(),
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if let ProbeMode::MultiWord { rho, probes } = self.mode {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(Error::InvalidValue {
                    key: "probe_rho".into(),
                    message: format!("must lie in (0, 1), got {rho}"),
                });
            }
            if probes == 0 {
                return Err(Error::InvalidValue {
                    key: "probe_count".into(),
                    message: "need at least one probe per pair".into(),
                });
            }
        }
        if self.min_count == 0 {
            return Err(Error::InvalidValue {
                key: "probe_min_count".into(),
                message: "must be at least 1".into(),
            });
        }
        if !self.threshold.is_finite() {
            return Err(Error::InvalidValue {
                key: "probe_threshold".into(),
                message: "must be finite".into(),
            });
        }
        Ok(())
    }
}

/// Deletes every occurrence of every word in `words`; empty utterances stay.
pub fn mask_context<T: Eq + Hash + Clone>(context: &[Vec<T>], words: &HashSet<T>) -> Vec<Vec<T>> {
    context
        .iter()
        .map(|u| u.iter().filter(|t| !words.contains(t)).cloned().collect())
        .collect()
}

/// `log p(r | c) − log p(r | c⁻ʷ)`; exactly 0 when `w` is absent from `c`.
pub fn pmi_word<S: ResponseScorer + ?Sized>(
    scorer: &S,
    context: &[Vec<TokenId>],
    response: &[TokenId],
    word: TokenId,
) -> Result<f64> {
    if !context.iter().any(|u| u.contains(&word)) {
        return Ok(0.0);
    }
    let full = scorer.score(context, response)?;
    let masked = scorer.score(&mask_context(context, &HashSet::from([word])), response)?;
    Ok(full - masked)
}

/// Unique probe-able words of `context` in first-occurrence order.
fn candidate_words(context: &[Vec<TokenId>], stopwords: &BTreeSet<TokenId>) -> Vec<TokenId> {
    let mut seen = HashSet::new();
    context
        .iter()
        .flatten()
        .copied()
        .filter(|&t| !Vocabulary::is_reserved(t) && !stopwords.contains(&t) && seen.insert(t))
        .collect()
}

/// Probes one pair and returns `(word, delta)` attributions.
pub fn probe_pair<S: ResponseScorer + ?Sized, R: rand::Rng>(
    scorer: &S,
    pair: &ContextResponsePair,
    config: &ProbeConfig,
    rng: &mut R,
) -> Result<Vec<(TokenId, f64)>> {
    let words = candidate_words(&pair.context, &config.stopwords);
    if words.is_empty() {
        return Ok(Vec::new());
    }
    let full = scorer.score(&pair.context, &pair.response)?;
    let mut out = Vec::new();
    match config.mode {
        ProbeMode::SingleWord => {
            for w in words {
                let masked = mask_context(&pair.context, &HashSet::from([w]));
                out.push((w, full - scorer.score(&masked, &pair.response)?));
            }
        }
        ProbeMode::MultiWord { rho, probes } => {
            for _ in 0..probes {
                let set: Vec<TokenId> = words.iter().copied().filter(|_| rng.random_bool(rho)).collect();
                if set.is_empty() {
                    continue;
                }
                let masked = mask_context(&pair.context, &set.iter().copied().collect());
                let delta = full - scorer.score(&masked, &pair.response)?;
                out.extend(set.into_iter().map(|w| (w, delta)));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptStats {
    pub sum: f64,
    pub n: u64,
}

impl ConceptStats {
    pub fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }
}

/// Word → accumulated PMI statistics. Membership defines the context concepts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConceptBank {
    entries: BTreeMap<String, ConceptStats>,
}

impl ConceptBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, word: &str, delta: f64) {
        let e = self
            .entries
            .entry(word.to_string())
            .or_insert(ConceptStats { sum: 0.0, n: 0 });
        e.sum += delta;
        e.n += 1;
    }

    pub fn insert(&mut self, word: &str, stats: ConceptStats) -> Result<()> {
        if stats.n == 0 {
            return Err(Error::Data(format!("bank entry `{word}` has n = 0")));
        }
        self.entries.insert(word.to_string(), stats);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn get(&self, word: &str) -> Option<ConceptStats> {
        self.entries.get(word).copied()
    }

    /// Keeps entries with `mean ≥ threshold` and `n ≥ min_count`.
    pub fn filtered(&self, threshold: f64, min_count: u64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(_, s)| s.mean() >= threshold && s.n >= min_count)
                .map(|(w, s)| (w.clone(), *s))
                .collect(),
        }
    }

    /// Entries by mean descending, then word ascending.
    pub fn ranked(&self) -> Vec<(&str, ConceptStats)> {
        let mut v: Vec<(&str, ConceptStats)> = self.entries.iter().map(|(w, s)| (w.as_str(), *s)).collect();
        v.sort_by(|a, b| b.1.mean().total_cmp(&a.1.mean()).then_with(|| a.0.cmp(b.0)));
        v
    }

    pub fn top_k(&self, k: usize) -> Vec<&str> {
        self.ranked().into_iter().take(k).map(|(w, _)| w).collect()
    }

    /// Token ids of the bank words present in `vocab`.
    pub fn token_set(&self, vocab: &Vocabulary) -> HashSet<TokenId> {
        self.entries.keys().filter_map(|w| vocab.get(w)).collect()
    }

    /// TSV with header `word\tmean\tn\tsum`, ranked order. Floats use the
    /// shortest representation that parses back to the same value.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "word\tmean\tn\tsum")?;
        for (word, s) in self.ranked() {
            writeln!(w, "{word}\t{:?}\t{}\t{:?}", s.mean(), s.n, s.sum)?;
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("tsv is utf-8")
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn parse_tsv(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "word\tmean\tn\tsum")) => {}
            _ => return Err(err(1, "expected header `word\\tmean\\tn\\tsum`".into())),
        }
        let mut bank = Self::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(err(i + 1, format!("expected 4 columns, found {}", cols.len())));
            }
            let n: u64 = cols[2].parse().map_err(|e| err(i + 1, format!("bad count: {e}")))?;
            let sum: f64 = cols[3].parse().map_err(|e| err(i + 1, format!("bad sum: {e}")))?;
            if n == 0 {
                return Err(err(i + 1, "count must be at least 1".into()));
            }
            if bank.entries.contains_key(cols[0]) {
                return Err(err(i + 1, format!("duplicate word `{}`", cols[0])));
            }
            bank.entries.insert(cols[0].to_string(), ConceptStats { sum, n });
        }
        Ok(bank)
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        Self::parse_tsv(&std::fs::read_to_string(path)?, path)
    }
}

/// Full probe statistics plus the thresholded bank.
#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    /// Every attributed word, before thresholding.
    pub all: ConceptBank,
    pub bank: ConceptBank,
}

/// Probes every pair in order and thresholds the accumulated statistics.
pub fn build_concept_bank<S: ResponseScorer + ?Sized>(
    scorer: &S,
    pairs: &[ContextResponsePair],
    vocab: &Vocabulary,
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("probe dataset is empty".into()));
    }
    let mut rng = stream(seed, Component::Probe);
    let mut all = ConceptBank::new();
    for pair in pairs {
        for (w, delta) in probe_pair(scorer, pair, config, &mut rng)? {
            all.add(vocab.word(w), delta);
        }
    }
    let bank = all.filtered(config.threshold, config.min_count);
    Ok(ProbeOutcome { all, bank })
}

/// Per-utterance bank words in original order, duplicates kept.
pub fn extract_context_concepts(context: &[Vec<TokenId>], concepts: &HashSet<TokenId>) -> Vec<Vec<TokenId>> {
    context
        .iter()
        .map(|u| u.iter().copied().filter(|t| concepts.contains(t)).collect())
        .collect()
}
