//! BERT-style WordPiece tokenizer.
//!
//! Loads a standard `vocab.txt`, or builds a word-level vocabulary (plus
//! single-character pieces as a fallback) from training text when no
//! pretrained checkpoint is used.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPieceTokenizer {
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    lowercase: bool,
    unk_id: u32,
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Whitespace split, punctuation isolated, optionally lowercased.
pub fn basic_tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if c.is_whitespace() || c.is_control() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if is_punctuation(c) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else if lowercase {
            cur.extend(c.to_lowercase());
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl WordPieceTokenizer {
    pub fn from_tokens(tokens: Vec<String>, lowercase: bool) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {t:?}")));
            }
        }
        let unk_id = *ids
            .get(UNK)
            .ok_or_else(|| Error::format("vocabulary", "missing [UNK]"))?;
        if !ids.contains_key(SEP) {
            return Err(Error::format("vocabulary", "missing [SEP]"));
        }
        Ok(Self {
            vocab: tokens,
            ids,
            lowercase,
            unk_id,
        })
    }

    pub fn from_vocab_file(path: impl AsRef<Path>, lowercase: bool) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let tokens = BufReader::new(f)
            .lines()
            .map(|l| l.map(|s| s.trim_end_matches(['\r', '\n']).to_string()))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(path, e))?;
        Self::from_tokens(tokens, lowercase)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for t in &self.vocab {
            writeln!(w, "{t}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Vocabulary from training text: the five BERT specials, then every word
    /// seen at least `min_count` times (most frequent first), then every
    /// character as a word-initial and a `##` continuation piece.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize, lowercase: bool) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in basic_tokenize(text, lowercase) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, MASK].iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        let mut chars = std::collections::BTreeSet::new();
        for (w, c) in &words {
            chars.extend(w.chars());
            if *c >= min_count.max(1) && seen.insert(w.clone()) {
                tokens.push(w.clone());
            }
        }
        for ch in chars {
            for piece in [ch.to_string(), format!("##{ch}")] {
                if seen.insert(piece.clone()) {
                    tokens.push(piece);
                }
            }
        }
        Self::from_tokens(tokens, lowercase).expect("built vocabulary has specials")
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    /// Appends a new token; fails if it already exists.
    pub fn add_token(&mut self, token: &str) -> Result<u32> {
        if self.ids.contains_key(token) {
            return Err(Error::format("vocabulary", format!("token {token:?} already present")));
        }
        let id = self.vocab.len() as u32;
        self.vocab.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        Ok(id)
    }

    fn wordpiece(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.unk_id);
            return;
        }
        if let Some(id) = self.id(word) {
            out.push(id);
            return;
        }
        let start_len = out.len();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, "##");
                }
                if let Some(id) = self.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(start_len);
                    out.push(self.unk_id);
                    return;
                }
            }
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in basic_tokenize(text, self.lowercase) {
            self.wordpiece(&w, &mut out);
        }
        out
    }

    pub fn decode_tokens(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> WordPieceTokenizer {
        let tokens = [PAD, UNK, CLS, SEP, MASK, "looking", "for", "comed", "##ies", "un", "##want", "##ed", ",", "!"];
        WordPieceTokenizer::from_tokens(tokens.iter().map(|s| s.to_string()).collect(), true).unwrap()
    }

    #[test]
    fn basic_splits_punctuation() {
        assert_eq!(basic_tokenize("Hello, World!", true), ["hello", ",", "world", "!"]);
        assert_eq!(basic_tokenize("  a\tb\n", false), ["a", "b"]);
    }

    #[test]
    fn greedy_longest_match() {
        let t = tok();
        assert_eq!(t.decode_tokens(&t.encode("Looking for comedies")), ["looking", "for", "comed", "##ies"]);
        assert_eq!(t.decode_tokens(&t.encode("unwanted!")), ["un", "##want", "##ed", "!"]);
        assert_eq!(t.decode_tokens(&t.encode("xyz")), [UNK]);
    }

    #[test]
    fn built_vocab_falls_back_to_characters() {
        let t = WordPieceTokenizer::build(["the cat sat", "the dog"], 1, true);
        assert!(t.id("cat").is_some());
        // "cad" is unseen but decomposes into characters.
        let pieces = t.decode_tokens(&t.encode("cad"));
        assert!(!pieces.contains(&UNK));
        assert_eq!(pieces.concat().replace("##", ""), "cad");
    }

    #[test]
    fn add_token_rejects_existing() {
        let mut t = tok();
        let id = t.add_token("[SOU]").unwrap();
        assert_eq!(t.id("[SOU]"), Some(id));
        assert!(t.add_token("looking").is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let t = tok();
        t.save(&p).unwrap();
        assert_eq!(WordPieceTokenizer::from_vocab_file(&p, true).unwrap(), t);
    }
}
