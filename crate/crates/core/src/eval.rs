//! BLEU, lexicon precision/recall/F1 and synthetic probe recall.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::ConceptBank;

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and hypothesis n-gram count for one pair.
fn matches<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let h = ngrams(hyp, n);
    let r = ngrams(reference, n);
    let hit = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (hit, hyp.len().saturating_sub(n - 1))
}

/// Corpus BLEU with clipped counts and brevity penalty.
///
/// A zero precision for n ≥ 2 is replaced by `(matches + 1) / (total + 1)`;
/// nonzero precisions are used as they are. A zero unigram precision yields 0.
pub fn bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>], max_n: usize) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::contract("BLEU needs max_n ≥ 1"));
    }
    let mut hits = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let (m, t) = matches(h, r, n);
            hits[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if hits[0] == 0 || hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (m, t) = if hits[n] == 0 {
            (hits[n] + 1, totals[n] + 1)
        } else {
            (hits[n], totals[n])
        };
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

impl std::str::FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Self::Macro),
            "micro" => Ok(Self::Micro),
            _ => Err(Error::InvalidValue {
                key: "averaging".into(),
                message: format!("expected macro or micro, got `{s}`"),
            }),
        }
    }
}

/// Named word set, lowercased.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    pub name: String,
    entries: BTreeSet<String>,
}

impl Lexicon {
    pub fn new<I, S>(name: &str, words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let entries: BTreeSet<String> = words.into_iter().map(|w| w.as_ref().to_lowercase()).collect();
        if entries.is_empty() {
            return Err(Error::Data(format!("lexicon `{name}` is empty")));
        }
        Ok(Self {
            name: name.to_string(),
            entries,
        })
    }

    /// One word per line; blank lines and `#` comments are ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let words = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("lexicon");
        Self::new(name, words)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains(word)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(hit: usize, predicted: usize, gold: usize) -> Self {
        let precision = if predicted == 0 {
            0.0
        } else {
            hit as f64 / predicted as f64
        };
        let recall = if gold == 0 { 0.0 } else { hit as f64 / gold as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

/// Per-pair scores (`None` for skipped pairs) and the aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct LexiconScores {
    pub per_pair: Vec<Option<Prf>>,
    pub aggregate: Prf,
    pub averaging: Averaging,
}

/// Precision/recall/F1 of lexicon words in hypotheses against references,
/// compared as sets per pair. Pairs whose reference holds no lexicon word are
/// skipped.
pub fn lexicon_prf<S: AsRef<str>>(
    hypotheses: &[Vec<S>],
    references: &[Vec<S>],
    lexicon: &Lexicon,
    averaging: Averaging,
) -> Result<LexiconScores> {
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if lexicon.is_empty() {
        return Err(Error::Data(format!("lexicon `{}` is empty", lexicon.name)));
    }
    let pick = |toks: &[S]| -> HashSet<String> {
        toks.iter()
            .map(|t| t.as_ref().to_lowercase())
            .filter(|t| lexicon.contains(t))
            .collect()
    };
    let mut per_pair = Vec::with_capacity(hypotheses.len());
    let (mut sum_p, mut sum_r, mut sum_f, mut kept) = (0.0, 0.0, 0.0, 0usize);
    let (mut hit_all, mut pred_all, mut gold_all) = (0usize, 0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let gold = pick(r);
        if gold.is_empty() {
            per_pair.push(None);
            continue;
        }
        let pred = pick(h);
        let hit = pred.intersection(&gold).count();
        let s = Prf::from_counts(hit, pred.len(), gold.len());
        sum_p += s.precision;
        sum_r += s.recall;
        sum_f += s.f1;
        kept += 1;
        hit_all += hit;
        pred_all += pred.len();
        gold_all += gold.len();
        per_pair.push(Some(s));
    }
    if kept == 0 {
        return Err(Error::NoScorablePairs(format!(
            "no reference contains a `{}` word",
            lexicon.name
        )));
    }
    let aggregate = match averaging {
        Averaging::Macro => {
            let k = kept as f64;
            Prf {
                precision: sum_p / k,
                recall: sum_r / k,
                f1: sum_f / k,
            }
        }
        Averaging::Micro => Prf::from_counts(hit_all, pred_all, gold_all),
    };
    Ok(LexiconScores {
        per_pair,
        aggregate,
        averaging,
    })
}

/// Fraction of `planted` found among the bank's top `k` words by mean PMI.
pub fn probe_recall<S: AsRef<str>>(bank: &ConceptBank, planted: &[S], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::contract("probe_recall needs K ≥ 1"));
    }
    if planted.is_empty() {
        return Err(Error::Data("no planted concepts to recover".into()));
    }
    let top: HashSet<&str> = bank.top_k(k).into_iter().collect();
    let found = planted.iter().filter(|w| top.contains(w.as_ref())).count();
    Ok(found as f64 / planted.len() as f64)
}

/// One metric: per-pair values, corpus aggregate and the settings used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub per_pair: Vec<Option<f64>>,
    pub aggregate: f64,
    pub config: serde_json::Value,
}
