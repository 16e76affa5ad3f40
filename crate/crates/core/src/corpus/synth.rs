//! Synthetic dialogues with planted context → response concepts.
//!
//! Each dialogue has 1–3 user utterances of 4–8 tokens. One to three distinct
//! concept words `c<i>` are planted at random positions among uniform noise
//! words `w<j>`. The agent response is `fix`, then the mapped `r<i>` for every
//! planted concept in order of its position in the context, then `done`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::{Conversation, Turn};
use crate::error::{Error, Result};
use crate::rng::{stream, Component};

pub const USER: &str = "user";
pub const AGENT: &str = "agent";
pub const OPEN_WORD: &str = "fix";
pub const CLOSE_WORD: &str = "done";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Number of planted concepts `K`.
    pub concepts: usize,
    /// Number of noise words `M`.
    pub noise: usize,
    /// Number of dialogues `N`.
    pub dialogues: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub max_concepts_per_dialogue: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            concepts: 4,
            noise: 32,
            dialogues: 2000,
            min_utterances: 1,
            max_utterances: 3,
            min_tokens: 4,
            max_tokens: 8,
            max_concepts_per_dialogue: 3,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Data(format!("invalid synthetic spec: {m}")));
        if self.concepts == 0 {
            return bad("need at least one concept");
        }
        if self.noise < self.concepts {
            return bad("noise vocabulary must be at least as large as the concept count");
        }
        if self.min_utterances == 0 || self.min_utterances > self.max_utterances {
            return bad("utterance range");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token range");
        }
        if self.max_concepts_per_dialogue == 0 || self.max_concepts_per_dialogue > self.min_tokens {
            return bad("concepts per dialogue must fit in the shortest context");
        }
        Ok(())
    }
}

pub fn concept_word(i: usize) -> String {
    format!("c{}", i + 1)
}

pub fn response_word(i: usize) -> String {
    format!("r{}", i + 1)
}

pub fn noise_word(j: usize) -> String {
    format!("w{}", j + 1)
}

/// Ground-truth sidecar: `{"concepts": {"c1": "r1", …}, "seed": 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub concepts: BTreeMap<String, String>,
    pub seed: u64,
}

impl GroundTruth {
    pub fn context_concepts(&self) -> Vec<String> {
        self.concepts.keys().cloned().collect()
    }

    pub fn response_concepts(&self) -> Vec<String> {
        self.concepts.values().cloned().collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<(Vec<Conversation>, GroundTruth)> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Component::Corpus);
    let mut conversations = Vec::with_capacity(spec.dialogues);
    for d in 0..spec.dialogues {
        let n_utts = rng.random_range(spec.min_utterances..=spec.max_utterances);
        let lengths: Vec<usize> = (0..n_utts)
            .map(|_| rng.random_range(spec.min_tokens..=spec.max_tokens))
            .collect();
        let slots: usize = lengths.iter().sum();
        let k = rng.random_range(1..=spec.max_concepts_per_dialogue.min(spec.concepts));

        let concepts = sample_distinct(&mut rng, spec.concepts, k);
        let mut positions = sample_distinct(&mut rng, slots, k);

        let mut flat: Vec<String> = (0..slots)
            .map(|_| noise_word(rng.random_range(0..spec.noise)))
            .collect();
        for (&c, &pos) in concepts.iter().zip(&positions) {
            flat[pos] = concept_word(c);
        }
        // response concepts follow context order
        let mut planted: Vec<(usize, usize)> = positions.drain(..).zip(concepts).collect();
        planted.sort_unstable();

        let mut turns = Vec::with_capacity(n_utts + 1);
        let mut offset = 0;
        for &len in &lengths {
            turns.push(Turn {
                speaker: USER.to_string(),
                text: flat[offset..offset + len].join(" "),
            });
            offset += len;
        }
        let mut response = vec![OPEN_WORD.to_string()];
        response.extend(planted.iter().map(|&(_, c)| response_word(c)));
        response.push(CLOSE_WORD.to_string());
        turns.push(Turn {
            speaker: AGENT.to_string(),
            text: response.join(" "),
        });
        conversations.push(Conversation {
            id: format!("synth-{d}"),
            turns,
        });
    }
    let truth = GroundTruth {
        concepts: (0..spec.concepts)
            .map(|i| (concept_word(i), response_word(i)))
            .collect(),
        seed: spec.seed,
    };
    Ok((conversations, truth))
}

/// `k` distinct values from `0..n` (partial Fisher–Yates).
fn sample_distinct<R: rand::Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    #[test]
    fn responses_contain_mapped_words_in_context_order() {
        let spec = SynthSpec {
            dialogues: 300,
            ..SynthSpec::default()
        };
        let (convs, truth) = synth_generate(&spec).unwrap();
        assert_eq!(convs.len(), 300);
        for c in &convs {
            let (resp, ctx) = c.turns.split_last().unwrap();
            assert!((1..=3).contains(&ctx.len()));
            let ctx_words: Vec<String> = ctx.iter().flat_map(|t| tokenize(&t.text)).collect();
            for t in ctx {
                let n = tokenize(&t.text).len();
                assert!((4..=8).contains(&n));
            }
            let expected: Vec<String> = ctx_words
                .iter()
                .filter_map(|w| truth.concepts.get(w).cloned())
                .collect();
            assert!((1..=3).contains(&expected.len()));
            let mut want = vec!["fix".to_string()];
            want.extend(expected);
            want.push("done".to_string());
            assert_eq!(tokenize(&resp.text), want);
            assert_eq!(resp.speaker, AGENT);
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SynthSpec {
            dialogues: 50,
            ..SynthSpec::default()
        };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let spec = SynthSpec {
            concepts: 5,
            noise: 4,
            ..SynthSpec::default()
        };
        assert!(synth_generate(&spec).is_err());
        let spec = SynthSpec {
            concepts: 0,
            ..SynthSpec::default()
        };
        assert!(synth_generate(&spec).is_err());
    }
}
