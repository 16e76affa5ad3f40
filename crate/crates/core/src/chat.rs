//! Interactive session over a trained concept-aware model.

use std::collections::{HashSet, VecDeque};

use crate::corpus::{tokenize, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::focus::{FocusModel, Generation};

/// One exchange as shown to the user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChatTurn {
    pub generation: Generation,
    pub display: String,
}

/// What a line of input did to the session.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChatEvent {
    Reply(ChatTurn),
    Reset,
}

pub struct ChatSession {
    model: Option<FocusModel>,
    vocab: Vocabulary,
    bank: HashSet<TokenId>,
    turns: VecDeque<Vec<TokenId>>,
    max_turns: usize,
    max_len: usize,
}

impl ChatSession {
    pub fn new(model: Option<FocusModel>, vocab: Vocabulary, bank: HashSet<TokenId>, max_turns: usize) -> Self {
        let max_len = model.as_ref().map_or(20, |m| m.config().dims.max_response_len);
        Self {
            model,
            vocab,
            bank,
            turns: VecDeque::new(),
            max_turns: max_turns.max(1),
            max_len,
        }
    }

    /// Token ids of the turns the encoder currently sees.
    pub fn context(&self) -> Vec<Vec<TokenId>> {
        self.turns.iter().cloned().collect()
    }

    fn push(&mut self, turn: Vec<TokenId>) {
        self.turns.push_back(turn);
        while self.turns.len() > self.max_turns {
            self.turns.pop_front();
        }
    }

    fn render(&self, ids: &[TokenId], concepts: &HashSet<TokenId>) -> String {
        ids.iter()
            .map(|&t| {
                let w = self.vocab.word(t);
                if concepts.contains(&t) {
                    format!("[{w}]")
                } else {
                    w.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Handles one input line: `/reset` clears the history, anything else is
    /// a user turn answered by the model.
    pub fn step(&mut self, line: &str) -> Result<ChatEvent> {
        if line.trim() == "/reset" {
            self.turns.clear();
            return Ok(ChatEvent::Reset);
        }
        if self.model.is_none() {
            return Err(Error::Data("no model loaded".into()));
        }
        let user = self.vocab.encode(&tokenize(line));
        self.push(user);
        let context = self.context();
        let model = self.model.as_ref().expect("checked above");
        let generation = model.generate(&context, &self.bank, self.max_len)?;
        let z_c: Vec<TokenId> = generation.z_c.iter().flatten().copied().collect();
        let z_r: HashSet<TokenId> = generation.z_r.iter().copied().collect();
        let display = format!(
            "context concepts: {}\nresponse concepts: {}\nagent: {}",
            self.render(&z_c, &self.bank),
            self.render(&generation.z_r, &z_r),
            self.render(&generation.response, &z_r),
        );
        self.push(generation.response.clone());
        Ok(ChatEvent::Reply(ChatTurn { generation, display }))
    }
}
