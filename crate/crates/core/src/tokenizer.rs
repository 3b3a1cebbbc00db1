//! Character-class tokenizer with a corpus-derived vocabulary.
//!
//! Tokens are maximal runs of alphabetic characters, single digits, or
//! single punctuation/symbol characters. Whitespace separates tokens and is
//! dropped.
//!
//! Detokenization inserts one space between two adjacent tokens when the
//! right token is alphabetic and the left token is alphabetic or one of
//! `. , : ; ) ]`. Everything else is concatenated, so
//! `tokenize(decode(ids))` reproduces the token sequence.
//!
//! Special ids are fixed: PAD=0, UNK=1, CLS=2, SEP=3, EOS=4.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const EOS: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[EOS]"];

pub const DEFAULT_MAX_LEN: usize = 256;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("max_len must be at least 4, got {0}")]
    MaxLenTooSmall(usize),
    #[error("prompt too long: {needed} tokens outside the I/Q segment, max_len {max_len}")]
    PromptTooLong { needed: usize, max_len: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Space,
    Alpha,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_whitespace() {
        CharClass::Space
    } else if c.is_alphabetic() {
        CharClass::Alpha
    } else {
        CharClass::Other
    }
}

/// Splits `text` into tokens.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut alpha_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        let class = class_of(c);
        if class != CharClass::Alpha {
            if let Some(start) = alpha_start.take() {
                tokens.push(&text[start..i]);
            }
        }
        match class {
            CharClass::Alpha => {
                alpha_start.get_or_insert(i);
            }
            CharClass::Other => tokens.push(&text[i..i + c.len_utf8()]),
            CharClass::Space => {}
        }
    }
    if let Some(start) = alpha_start {
        tokens.push(&text[start..]);
    }
    tokens
}

fn is_alpha_token(tok: &str) -> bool {
    tok.chars().next().is_some_and(char::is_alphabetic)
}

fn needs_space(left: &str, right: &str) -> bool {
    is_alpha_token(right) && (is_alpha_token(left) || matches!(left, "." | "," | ":" | ";" | ")" | "]"))
}

/// Joins tokens following the detokenization rules.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for tok in tokens {
        let tok = tok.as_ref();
        if prev.is_some_and(|p| needs_space(p, tok)) {
            out.push(' ');
        }
        out.push_str(tok);
        prev = Some(tok);
    }
    out
}

/// Encoding layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodeMode {
    /// `[CLS] tokens [SEP] [PAD]...`
    Classifier,
    /// `tokens [PAD]...`
    Causal,
}

/// A fixed-length, padded encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    /// Number of non-PAD positions.
    pub length: usize,
}

impl TokenSeq {
    fn padded(mut ids: Vec<u32>, max_len: usize) -> Self {
        let length = ids.len();
        let mut attention_mask = vec![1u8; length];
        ids.resize(max_len, PAD);
        attention_mask.resize(max_len, 0);
        Self {
            ids,
            attention_mask,
            length,
        }
    }

    /// The unpadded ids.
    pub fn real_ids(&self) -> &[u32] {
        &self.ids[..self.length]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

/// Text that, prepended to a prompt corpus, guarantees every digit, the
/// template punctuation and every class name are in-vocabulary.
pub const CLOSURE_TEXT: &str = "0 1 2 3 4 5 6 7 8 9 - . , ( ) [ ] : / Low Moderate High Severe Noise";

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    /// Specials, then tokens in first-seen order.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self, TokenizerError> {
        if corpus.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut seen: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                if !seen.contains_key(tok) {
                    seen.insert(tok.to_string(), tokens.len() as u32);
                    tokens.push(tok.to_string());
                }
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    /// Vocabulary for a prompt corpus, with [`CLOSURE_TEXT`] seen first.
    pub fn for_prompts<S: AsRef<str>>(prompts: &[S]) -> Result<Self, TokenizerError> {
        if prompts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut corpus: Vec<&str> = vec![CLOSURE_TEXT];
        corpus.extend(prompts.iter().map(|p| p.as_ref()));
        Self::build(&corpus)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Result<&str, TokenizerError> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(TokenizerError::IdOutOfRange { id, size: self.len() })
    }

    pub fn ids(&self, text: &str) -> Vec<u32> {
        tokenize(text).into_iter().map(|t| self.id(t)).collect()
    }

    /// Hex SHA-256 over the tokens in id order, each followed by `\n`.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn encode(&self, text: &str, mode: EncodeMode, max_len: usize) -> Result<TokenSeq, TokenizerError> {
        if max_len < 4 {
            return Err(TokenizerError::MaxLenTooSmall(max_len));
        }
        let body = self.ids(text);
        let ids = match mode {
            EncodeMode::Classifier => {
                let body = self.fit(body, max_len - 2)?;
                let mut ids = Vec::with_capacity(body.len() + 2);
                ids.push(CLS);
                ids.extend(body);
                ids.push(SEP);
                ids
            }
            EncodeMode::Causal => self.fit(body, max_len)?,
        };
        Ok(TokenSeq::padded(ids, max_len))
    }

    /// Causal encoding of `prompt`, a completion, then EOS.
    pub fn encode_with_completion(
        &self,
        prompt: &str,
        completion: &str,
        max_len: usize,
    ) -> Result<TokenSeq, TokenizerError> {
        if max_len < 4 {
            return Err(TokenizerError::MaxLenTooSmall(max_len));
        }
        let tail = self.ids(completion);
        let budget = max_len.checked_sub(tail.len() + 1).ok_or(TokenizerError::PromptTooLong {
            needed: tail.len() + 1,
            max_len,
        })?;
        let mut ids = self.fit(self.ids(prompt), budget)?;
        ids.extend(tail);
        ids.push(EOS);
        Ok(TokenSeq::padded(ids, max_len))
    }

    /// Shrinks `ids` to `budget` by dropping tokens from the middle of the
    /// bracketed I/Q segment. Tokens outside the brackets are never dropped.
    pub fn fit(&self, mut ids: Vec<u32>, budget: usize) -> Result<Vec<u32>, TokenizerError> {
        if ids.len() <= budget {
            return Ok(ids);
        }
        let open = self.index.get("[").copied();
        let close = self.index.get("]").copied();
        let segment = match (open, close) {
            (Some(o), Some(c)) => {
                let start = ids.iter().position(|&t| t == o);
                let end = ids.iter().rposition(|&t| t == c);
                match (start, end) {
                    (Some(s), Some(e)) if e > s => Some((s + 1, e)),
                    _ => None,
                }
            }
            _ => None,
        };
        let Some((inner_start, inner_end)) = segment else {
            return Err(TokenizerError::PromptTooLong {
                needed: ids.len(),
                max_len: budget,
            });
        };
        let inner = inner_end - inner_start;
        let outside = ids.len() - inner;
        if outside > budget {
            return Err(TokenizerError::PromptTooLong {
                needed: outside,
                max_len: budget,
            });
        }
        let excess = ids.len() - budget;
        let keep = inner - excess;
        let head = keep.div_ceil(2);
        let cut_from = inner_start + head;
        ids.drain(cut_from..cut_from + excess);
        Ok(ids)
    }

    /// Drops special ids and detokenizes the rest.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut toks = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id)?;
            if (id as usize) >= SPECIAL_TOKENS.len() {
                toks.push(tok);
            }
        }
        Ok(detokenize(&toks))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let json = serde_json::to_string_pretty(&VocabFile {
            tokens: self.tokens.clone(),
        })
        .map_err(|e| TokenizerError::Format(e.to_string()))?;
        crate::dataset::write_atomic(path, format!("{json}\n").as_bytes()).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| TokenizerError::Format(e.to_string()))?;
        if file.tokens.len() < SPECIAL_TOKENS.len()
            || file.tokens.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b)
        {
            return Err(TokenizerError::Format("special tokens missing from ids 0-4".into()));
        }
        let vocab = Self::from_tokens(file.tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(TokenizerError::Format("duplicate tokens".into()));
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, DatasetConfig, ANSWER_CUE};
    use proptest::prelude::*;

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("SNR is 10."), vec!["SNR", "is", "1", "0", "."]);
        assert_eq!(
            tokenize("(0.707,0.707)"),
            vec!["(", "0", ".", "7", "0", "7", ",", "0", ".", "7", "0", "7", ")"]
        );
        assert_eq!(tokenize("QPSK"), vec!["QPSK"]);
        assert_eq!(tokenize("Signal-to-Noise"), vec!["Signal", "-", "to", "-", "Noise"]);
        assert_eq!(tokenize("  \n "), Vec::<&str>::new());
    }

    #[test]
    fn vocab_basics() {
        let v = Vocab::build(&["a b"]).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(Vocab::build(&["a b"]).unwrap(), v);
        assert!(matches!(Vocab::build::<&str>(&[]), Err(TokenizerError::EmptyCorpus)));
    }

    #[test]
    fn classifier_padding() {
        let v = Vocab::build(&["a b"]).unwrap();
        let seq = v.encode("a", EncodeMode::Classifier, 6).unwrap();
        assert_eq!(seq.ids, vec![CLS, 5, SEP, PAD, PAD, PAD]);
        assert_eq!(seq.attention_mask, vec![1, 1, 1, 0, 0, 0]);
        assert_eq!(seq.length, 3);
        assert!(matches!(v.encode("a", EncodeMode::Classifier, 3), Err(TokenizerError::MaxLenTooSmall(3))));
    }

    #[test]
    fn decode_rules() {
        let v = Vocab::build(&["SNR 1 0"]).unwrap();
        assert_eq!(v.decode(&[CLS, v.id("SNR"), SEP]).unwrap(), "SNR");
        assert_eq!(v.decode(&[v.id("1"), v.id("0")]).unwrap(), "10");
        assert!(matches!(v.decode(&[99]), Err(TokenizerError::IdOutOfRange { id: 99, .. })));
    }

    #[test]
    fn completion_encoding() {
        let v = Vocab::for_prompts(&["x Pathology Type:"]).unwrap();
        let seq = v.encode_with_completion("x Pathology Type:", "Severe Noise", 10).unwrap();
        let real = seq.real_ids();
        assert_eq!(real.last(), Some(&EOS));
        assert_eq!(v.decode(real).unwrap(), "x Pathology Type: Severe Noise");
    }

    fn dataset_prompts() -> Vec<String> {
        let cfg = DatasetConfig {
            frames_per_pair: 2,
            ..DatasetConfig::default()
        };
        build_dataset(&cfg).unwrap().0.into_iter().map(|e| e.prompt).collect()
    }

    #[test]
    fn oversize_prompt_keeps_the_cue() {
        // 300-token prompt: widen the I/Q preview until it overflows
        let frame = crate::sigsynth::synth_frame(crate::sigsynth::ModulationKind::Qpsk, -14.0, 1024, 3).unwrap();
        let mut preview = 8;
        let prompt = loop {
            let p = crate::dataset::render_prompt(&frame, preview, 3).unwrap();
            if tokenize(&p).len() >= 300 {
                break p;
            }
            preview += 1;
        };
        let v = Vocab::for_prompts(&[prompt.as_str()]).unwrap();
        let seq = v.encode(&prompt, EncodeMode::Classifier, 256).unwrap();
        assert_eq!(seq.length, 256);
        let decoded = v.decode(seq.real_ids()).unwrap();
        assert!(decoded.ends_with("is equal to-14. Pathology Type:"), "{decoded}");
        let toks = tokenize(&decoded);
        assert_eq!(toks.first(), Some(&"You"));
        // non-I/Q text alone too long
        assert!(matches!(
            v.encode(&prompt, EncodeMode::Classifier, 40),
            Err(TokenizerError::PromptTooLong { .. })
        ));
    }

    #[test]
    fn dataset_prompts_are_closed_and_round_trip() {
        let prompts = dataset_prompts();
        let v = Vocab::for_prompts(&prompts).unwrap();
        for p in &prompts {
            for mode in [EncodeMode::Classifier, EncodeMode::Causal] {
                let seq = v.encode(p, mode, DEFAULT_MAX_LEN).unwrap();
                assert!(!seq.real_ids().contains(&UNK));
                let decoded = v.decode(&seq.ids).unwrap();
                assert!(decoded.ends_with(ANSWER_CUE));
                assert_eq!(tokenize(&decoded), tokenize(p));
            }
        }
        // digits and punctuation are present even when unseen
        let tiny = Vocab::for_prompts(&["x"]).unwrap();
        for t in ["0", "5", "9", "-", ".", ",", "(", ")", "[", "]", ":", "/", "Severe", "Noise"] {
            assert_ne!(tiny.id(t), UNK, "{t}");
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let v = Vocab::for_prompts(&dataset_prompts()[..10]).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded, v);
        assert_eq!(loaded.hash(), v.hash());
    }

    proptest! {
        #[test]
        fn padding_is_a_suffix(text in "[a-zA-Z0-9 .,:()\\[\\]-]{0,60}", max_len in 4usize..80) {
            let v = Vocab::build(&[text.as_str(), "a"]).unwrap();
            for mode in [EncodeMode::Classifier, EncodeMode::Causal] {
                let Ok(seq) = v.encode(&text, mode, max_len) else { continue };
                prop_assert_eq!(seq.ids.len(), max_len);
                prop_assert_eq!(seq.attention_mask.len(), max_len);
                let ones = seq.attention_mask.iter().filter(|&&m| m == 1).count();
                prop_assert_eq!(ones, seq.length);
                for (i, (&id, &m)) in seq.ids.iter().zip(&seq.attention_mask).enumerate() {
                    prop_assert_eq!(m == 0, i >= seq.length);
                    if i >= seq.length { prop_assert_eq!(id, PAD); } else { prop_assert_ne!(id, PAD); }
                }
            }
        }

        #[test]
        fn decode_then_tokenize_is_identity(text in "[a-zA-Z0-9 .,:;()\\[\\]/-]{0,60}") {
            let v = Vocab::build(&[text.as_str(), "a"]).unwrap();
            let ids = v.ids(&text);
            let decoded = v.decode(&ids).unwrap();
            prop_assert_eq!(tokenize(&decoded), tokenize(&text));
        }
    }
}
