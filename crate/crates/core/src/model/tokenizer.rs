use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Fixed token ids of the standard vocabulary.
pub mod tok {
    pub const EOS: usize = 0;
    pub const THINK: usize = 1;
    pub const END_THINK: usize = 2;
    pub const VSTART: usize = 3;
    pub const VEND: usize = 4;
    pub const BOXED: usize = 5;
    pub const CLOSE: usize = 6;
}

const WORDS: &[&str] = &[
    "<eos>", "<think>", "</think>", "<vstart>", "<vend>", "\\boxed{", "}", //
    "<reason>", "<plan>", "<jigsaw>", "?", "(", ")", ",", ".", //
    "the", "answer", "is", "to", "moving", "go", "step", //
    "start", "ice", "hole", "goal", "up", "down", "left", "right", //
    "A", "B", "C", "try", "test", "insert", "candidate", "seams", "match", "break", "so", "correct", //
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
];

/// Closed word-level vocabulary; text is split on whitespace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn standard() -> &'static Tokenizer {
        static STD: OnceLock<Tokenizer> = OnceLock::new();
        STD.get_or_init(|| {
            let words: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
            let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
            Tokenizer { words, index }
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}
