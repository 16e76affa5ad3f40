//! Conversations, tokenization, vocabulary and context/response pairs.

mod synth;
mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use synth::{
    concept_word, noise_word, response_word, synth_generate, GroundTruth, SynthSpec, AGENT, CLOSE_WORD, OPEN_WORD, USER,
};
pub use vocab::{TokenId, Vocabulary, EOS, PAD, RESERVED, SOS, UNK};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
}

/// One training example: every utterance before turn `turn_index` as the
/// context, that turn (plus EOS) as the response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextResponsePair {
    pub context: Vec<Vec<TokenId>>,
    pub response: Vec<TokenId>,
    pub conversation_id: String,
    pub turn_index: usize,
}

/// Lowercases, splits on whitespace, and splits leading and trailing ASCII
/// punctuation off each chunk as one-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chunk = chunk.to_lowercase();
        let chars: Vec<char> = chunk.chars().collect();
        let lead = chars.iter().take_while(|c| c.is_ascii_punctuation()).count();
        if lead == chars.len() {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| c.is_ascii_punctuation()).count();
        out.extend(chars[..lead].iter().map(|c| c.to_string()));
        out.push(chars[lead..chars.len() - trail].iter().collect());
        out.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    out
}

/// Vocabulary over every turn of `conversations`.
pub fn build_vocab(conversations: &[Conversation], max_size: usize) -> Vocabulary {
    let tokens: Vec<String> = conversations
        .iter()
        .flat_map(|c| c.turns.iter())
        .flat_map(|t| tokenize(&t.text))
        .collect();
    Vocabulary::build(tokens.iter().map(String::as_str), max_size)
}

pub fn extract_pairs(
    conv: &Conversation,
    vocab: &Vocabulary,
    speaker_filter: Option<&str>,
) -> Vec<ContextResponsePair> {
    let encoded: Vec<Vec<TokenId>> = conv.turns.iter().map(|t| vocab.encode(&tokenize(&t.text))).collect();
    (1..conv.turns.len())
        .filter(|&t| speaker_filter.is_none_or(|s| conv.turns[t].speaker == s))
        .map(|t| {
            let mut response = encoded[t].clone();
            response.push(EOS);
            ContextResponsePair {
                context: encoded[..t].to_vec(),
                response,
                conversation_id: conv.id.clone(),
                turn_index: t,
            }
        })
        .collect()
}

pub fn extract_all_pairs(
    conversations: &[Conversation],
    vocab: &Vocabulary,
    speaker_filter: Option<&str>,
) -> Vec<ContextResponsePair> {
    conversations
        .iter()
        .flat_map(|c| extract_pairs(c, vocab, speaker_filter))
        .collect()
}

/// Train/validation/test partition of a pair list.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<ContextResponsePair>,
    pub valid: Vec<ContextResponsePair>,
    pub test: Vec<ContextResponsePair>,
}

/// Shuffles `pairs` with the split stream of `seed` and cuts off `valid` and
/// `test` pairs; the rest is training data.
pub fn split_pairs(mut pairs: Vec<ContextResponsePair>, valid: usize, test: usize, seed: u64) -> Result<Splits> {
    use rand::RngExt;
    if valid + test >= pairs.len() {
        return Err(Error::EmptyDataset(format!(
            "{} pairs cannot hold {valid} validation and {test} test pairs plus training data",
            pairs.len()
        )));
    }
    let mut rng = crate::rng::stream(seed, crate::rng::Component::Split);
    for i in (1..pairs.len()).rev() {
        let j = rng.random_range(0..=i);
        pairs.swap(i, j);
    }
    let test_part = pairs.split_off(pairs.len() - test);
    let valid_part = pairs.split_off(pairs.len() - valid);
    Ok(Splits {
        train: pairs,
        valid: valid_part,
        test: test_part,
    })
}

fn field<'a>(obj: &'a Value, name: &str, path: &Path, line: usize) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::MissingField {
        path: path.to_path_buf(),
        line,
        field: name.to_string(),
    })
}

fn string_field(obj: &Value, name: &str, path: &Path, line: usize) -> Result<String> {
    field(obj, name, path, line)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("field `{name}` must be a string"),
        })
}

fn parse_line(text: &str, path: &Path, line: usize) -> Result<Conversation> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let value: Value = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    if !value.is_object() {
        return Err(parse_err("expected a JSON object".into()));
    }
    let id = string_field(&value, "id", path, line)?;
    let turns = field(&value, "turns", path, line)?
        .as_array()
        .ok_or_else(|| parse_err("field `turns` must be an array".into()))?;
    if turns.is_empty() {
        return Err(parse_err("a conversation needs at least one turn".into()));
    }
    let turns = turns
        .iter()
        .map(|t| {
            Ok(Turn {
                speaker: string_field(t, "speaker", path, line)?,
                text: string_field(t, "text", path, line)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Conversation { id, turns })
}

/// Reads one conversation per non-blank line.
pub fn load_jsonl(path: &Path) -> Result<Vec<Conversation>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, path, i + 1)?);
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, conversations: &[Conversation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in conversations {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
