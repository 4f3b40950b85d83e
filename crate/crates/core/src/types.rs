//! Shared domain types: vocabulary, target token sequences and utterances.

use crate::error::{Error, Result};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    eos_id: TokenId,
}

impl Vocab {
    pub fn new(tokens: Vec<String>, eos_id: TokenId) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::InvalidVocab(format!(
                "need at least one content token plus EOS, got {} tokens",
                tokens.len()
            )));
        }
        if eos_id as usize >= tokens.len() {
            return Err(Error::InvalidVocab(format!(
                "eos_id {eos_id} out of range for {} tokens",
                tokens.len()
            )));
        }
        for (i, t) in tokens.iter().enumerate() {
            if tokens[..i].contains(t) {
                return Err(Error::InvalidVocab(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, eos_id })
    }

    /// `n` content tokens named `w00`, `w01`, ... followed by EOS (`$`).
    pub fn synthetic(n: usize) -> Self {
        let mut tokens: Vec<String> = (0..n).map(|i| format!("w{i:02}")).collect();
        tokens.push("$".to_string());
        Vocab::new(tokens, n as TokenId).expect("synthetic vocabulary is well formed")
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == token).map(|i| i as TokenId)
    }

    /// Content token ids in ascending order (every id except EOS).
    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.tokens.len() as TokenId).filter(move |&t| t != self.eos_id)
    }
}

/// A target sequence terminated by exactly one EOS.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    /// Validates a full id list (trailing EOS included).
    pub fn new(ids: Vec<TokenId>, vocab: &Vocab) -> Result<Self> {
        let eos = vocab.eos_id();
        match ids.last() {
            None => return Err(Error::InvalidTokenSeq("empty sequence".into())),
            Some(&last) if last != eos => {
                return Err(Error::InvalidTokenSeq("sequence does not end with EOS".into()))
            }
            _ => {}
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab.size()) {
            return Err(Error::InvalidTokenSeq(format!("token id {bad} out of range")));
        }
        if ids[..ids.len() - 1].contains(&eos) {
            return Err(Error::InvalidTokenSeq("interior EOS".into()));
        }
        Ok(TokenSeq(ids))
    }

    /// Appends EOS to content ids.
    pub fn from_content(content: &[TokenId], vocab: &Vocab) -> Result<Self> {
        let mut ids = content.to_vec();
        ids.push(vocab.eos_id());
        TokenSeq::new(ids, vocab)
    }

    pub(crate) fn from_ids_unchecked(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }

    /// All ids, EOS included.
    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    /// Ids without the trailing EOS.
    pub fn content(&self) -> &[TokenId] {
        &self.0[..self.0.len() - 1]
    }

    /// Token count excluding EOS.
    pub fn len(&self) -> usize {
        self.0.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: Vec<u32>,
    pub gold: Option<TokenSeq>,
    /// Estimated text length used by the length filter.
    pub ref_len: Option<usize>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, frames: Vec<u32>, gold: Option<TokenSeq>) -> Result<Self> {
        let id = id.into();
        if frames.is_empty() {
            return Err(Error::InvalidUtterance(format!("`{id}` has no frames")));
        }
        Ok(Utterance {
            id,
            frames,
            gold,
            ref_len: None,
        })
    }

    pub fn check_alphabet(&self, obs_alphabet_size: usize) -> Result<()> {
        match self.frames.iter().find(|&&f| f as usize >= obs_alphabet_size) {
            Some(f) => Err(Error::InvalidUtterance(format!(
                "`{}` has frame symbol {f} outside alphabet of size {obs_alphabet_size}",
                self.id
            ))),
            None => Ok(()),
        }
    }

    /// Copy with the gold transcript removed, as seen by a trainer.
    pub fn without_gold(&self) -> Utterance {
        Utterance {
            gold: None,
            ..self.clone()
        }
    }
}
