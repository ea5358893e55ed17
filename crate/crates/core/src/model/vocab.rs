use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Ids below this are reserved.
pub const FIRST_TOKEN: usize = 4;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token ↔ id table with the four reserved ids in front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(symbols: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, usize> = tokens.iter().cloned().zip(0..).collect();
        for s in symbols {
            let s = s.as_ref();
            if ids.insert(s.to_string(), tokens.len()).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {s:?}")));
            }
            tokens.push(s.to_string());
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Symbols `a`, `b`, … for a synthetic alphabet (two letters past 26).
    pub fn synthetic(alphabet: usize) -> Self {
        let names: Vec<String> = (0..alphabet)
            .map(|i| {
                let letter = |k: usize| char::from(b'a' + (k % 26) as u8);
                if i < 26 {
                    letter(i).to_string()
                } else {
                    format!("{}{}", letter(i / 26 - 1), letter(i))
                }
            })
            .collect();
        Vocabulary::new(&names).expect("generated names are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Unknown symbols map to `UNK`.
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
