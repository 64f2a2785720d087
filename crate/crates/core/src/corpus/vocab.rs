use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

/// Token ↔ index map. Indices 0..4 are reserved for padding, unknown,
/// begin and end symbols; content tokens follow in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const BOS_ID: usize = 2;
    pub const EOS_ID: usize = 3;
    pub const RESERVED: usize = 4;

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let content: BTreeSet<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_string())
            .filter(|t| ![PAD, UNK, BOS, EOS].contains(&t.as_str()))
            .collect();
        let tokens: Vec<String> = [PAD, UNK, BOS, EOS]
            .iter()
            .map(|s| s.to_string())
            .chain(content)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == Self::RESERVED
    }

    pub fn content_len(&self) -> usize {
        self.tokens.len() - Self::RESERVED
    }

    /// Index of `token`, or the unknown index.
    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Collects every distinct token of `sequences` into a vocabulary.
pub fn build_vocab<S: AsRef<str>>(sequences: &[Vec<S>]) -> Vocabulary {
    Vocabulary::from_tokens(sequences.iter().flatten())
}

impl Serialize for Vocabulary {
    fn serialize<Se: Serializer>(&self, s: Se) -> Result<Se::Ok, Se::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        let reserved = [PAD, UNK, BOS, EOS];
        if tokens.len() < 4 || tokens[..4].iter().zip(reserved).any(|(a, b)| a != b) {
            return Err(serde::de::Error::custom(
                "vocabulary must start with the four reserved symbols",
            ));
        }
        let vocab = Vocabulary::from_tokens(&tokens[4..]);
        if vocab.tokens != tokens {
            return Err(serde::de::Error::custom(
                "vocabulary tokens must be unique and sorted",
            ));
        }
        Ok(vocab)
    }
}
