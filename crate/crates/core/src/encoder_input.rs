//! Encoder input formation.
//!
//! Layout: `[Cat_1 .. Cat_|C|]`, then each utterance oldest-first as
//! `SOU tokens EOU`, with `SEP` between consecutive utterances. Every `@<id>`
//! movie mention becomes a single `IM` token. Tokens written by the seeker get
//! the user segment; everything else, including all special tokens, gets the
//! system segment.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::catalog::CategoryVocabulary;
use crate::corpus::{mention_pattern, Sender, Utterance};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::{WordPieceTokenizer, SEP};

pub const DEFAULT_MAX_LEN: usize = 512;
pub const SOU: &str = "[SOU]";
pub const EOU: &str = "[EOU]";
pub const IM: &str = "[IM]";

pub fn category_token(name: &str) -> String {
    format!("[CAT:{name}]")
}

/// Token-type label. User maps to segment A (id 0), system to segment B (id 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    User,
    System,
}

impl Segment {
    pub fn type_id(self) -> usize {
        match self {
            Segment::User => 0,
            Segment::System => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub cat: Vec<u32>,
    pub sep: u32,
    pub sou: u32,
    pub eou: u32,
    pub im: u32,
}

impl SpecialTokens {
    /// Appends the category tokens and SOU/EOU/IM as new vocabulary entries.
    /// SEP is the tokenizer's existing separator.
    pub fn install(tokenizer: &mut WordPieceTokenizer, vocab: &CategoryVocabulary) -> Result<Self> {
        let cat = vocab
            .names()
            .iter()
            .map(|n| tokenizer.add_token(&category_token(n)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cat,
            sep: tokenizer.id(SEP).ok_or_else(|| Error::format("vocabulary", "missing [SEP]"))?,
            sou: tokenizer.add_token(SOU)?,
            eou: tokenizer.add_token(EOU)?,
            im: tokenizer.add_token(IM)?,
        })
    }

    /// Looks the tokens up in a vocabulary that already contains them.
    pub fn resolve(tokenizer: &WordPieceTokenizer, vocab: &CategoryVocabulary) -> Result<Self> {
        let get = |t: &str| {
            tokenizer
                .id(t)
                .ok_or_else(|| Error::format("vocabulary", format!("missing special token {t}")))
        };
        Ok(Self {
            cat: vocab
                .names()
                .iter()
                .map(|n| get(&category_token(n)))
                .collect::<Result<Vec<_>>>()?,
            sep: get(SEP)?,
            sou: get(SOU)?,
            eou: get(EOU)?,
            im: get(IM)?,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.cat.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInput {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<Segment>,
    pub cat_positions: Vec<usize>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Tokenizer, special tokens and length budget: everything needed to turn a
/// dialogue history into an [`EncodedInput`].
#[derive(Debug, Clone)]
pub struct InputFormatter {
    pub tokenizer: WordPieceTokenizer,
    pub specials: SpecialTokens,
    pub max_len: usize,
}

struct Piece {
    sender: Sender,
    /// Content tokens with their segments, no SOU/EOU.
    tokens: Vec<(u32, Segment)>,
}

impl InputFormatter {
    pub fn new(tokenizer: WordPieceTokenizer, specials: SpecialTokens, max_len: usize) -> Result<Self> {
        if max_len <= specials.num_categories() + 3 {
            return Err(Error::Config(format!(
                "max_len {max_len} must exceed {} (categories + 3)",
                specials.num_categories() + 3
            )));
        }
        Ok(Self {
            tokenizer,
            specials,
            max_len,
        })
    }

    /// Content tokens of one utterance, mentions masked as IM.
    fn utterance_tokens(&self, utt: &Utterance) -> Vec<(u32, Segment)> {
        let word_segment = match utt.sender {
            Sender::Seeker => Segment::User,
            Sender::Recommender => Segment::System,
        };
        let mut out = Vec::new();
        let mut last = 0;
        let text = utt.text.as_str();
        for m in mention_pattern().find_iter(text) {
            out.extend(self.tokenizer.encode(&text[last..m.start()]).into_iter().map(|t| (t, word_segment)));
            out.push((self.specials.im, Segment::System));
            last = m.end();
        }
        out.extend(self.tokenizer.encode(&text[last..]).into_iter().map(|t| (t, word_segment)));
        out
    }

    /// Oldest whole utterances are dropped first; if the oldest survivor is
    /// still too long its earliest content tokens are cut. Category tokens
    /// always survive.
    pub fn form_input(&self, history: &[Utterance]) -> EncodedInput {
        let n_cat = self.specials.num_categories();
        let mut pieces: std::collections::VecDeque<Piece> = history
            .iter()
            .map(|u| Piece {
                sender: u.sender,
                tokens: self.utterance_tokens(u),
            })
            .collect();

        // SOU + EOU per utterance, SEP between utterances.
        let total = |ps: &std::collections::VecDeque<Piece>| -> usize {
            n_cat + ps.iter().map(|p| p.tokens.len() + 2).sum::<usize>() + ps.len().saturating_sub(1)
        };
        loop {
            let len = total(&pieces);
            if len <= self.max_len {
                break;
            }
            let excess = len - self.max_len;
            let only_one = pieces.len() == 1;
            let front = pieces.front_mut().expect("category block alone fits");
            if front.tokens.len() > excess || only_one {
                let cut = excess.min(front.tokens.len());
                front.tokens.drain(..cut);
            } else {
                pieces.pop_front();
            }
        }

        let mut token_ids = Vec::with_capacity(total(&pieces));
        let mut segment_ids = Vec::with_capacity(token_ids.capacity());
        for &c in &self.specials.cat {
            token_ids.push(c);
            segment_ids.push(Segment::System);
        }
        for (i, p) in pieces.iter().enumerate() {
            if i > 0 {
                token_ids.push(self.specials.sep);
                segment_ids.push(Segment::System);
            }
            debug_assert!(matches!(p.sender, Sender::Seeker | Sender::Recommender));
            token_ids.push(self.specials.sou);
            segment_ids.push(Segment::System);
            for &(t, s) in &p.tokens {
                token_ids.push(t);
                segment_ids.push(s);
            }
            token_ids.push(self.specials.eou);
            segment_ids.push(Segment::System);
        }
        EncodedInput {
            token_ids,
            segment_ids,
            cat_positions: (0..n_cat).collect(),
        }
    }
}

/// A contextual encoder: one hidden vector per input position.
pub trait Encoder<T: Scalar> {
    fn hidden_size(&self) -> usize;

    /// Longest input the encoder accepts.
    fn max_positions(&self) -> usize;

    /// Inference-mode forward pass, shape `[input.len(), hidden_size]`.
    fn encode_sequence(&self, input: &EncodedInput) -> Result<Array2<T>>;
}

/// Hidden states at the category-token positions, in vocabulary order:
/// shape `[|C|, hidden_size]`.
pub fn encode<T: Scalar, E: Encoder<T> + ?Sized>(input: &EncodedInput, enc: &E) -> Result<Array2<T>> {
    if input.len() > enc.max_positions() {
        return Err(Error::SequenceTooLong {
            len: input.len(),
            capacity: enc.max_positions(),
        });
    }
    let hidden = enc.encode_sequence(input)?;
    Ok(hidden.select(ndarray::Axis(0), &input.cat_positions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{CLS, MASK, PAD, UNK};

    fn formatter(max_len: usize) -> InputFormatter {
        let base = [PAD, UNK, CLS, SEP, MASK, "looking", "for", "comedies", "i", "loved", "so", "much", "hi", "a", "b", "c", "d", "e"];
        let mut tok = WordPieceTokenizer::from_tokens(base.iter().map(|s| s.to_string()).collect(), true).unwrap();
        let specials = SpecialTokens::install(&mut tok, &CategoryVocabulary::movielens()).unwrap();
        InputFormatter::new(tok, specials, max_len).unwrap()
    }

    fn names(f: &InputFormatter, e: &EncodedInput) -> Vec<String> {
        f.tokenizer.decode_tokens(&e.token_ids).into_iter().map(String::from).collect()
    }

    #[test]
    fn looking_for_comedies_layout() {
        let f = formatter(DEFAULT_MAX_LEN);
        let e = f.form_input(&[Utterance::seeker("Looking for comedies")]);
        let mut expected: Vec<String> = CategoryVocabulary::movielens().names().iter().map(|n| category_token(n)).collect();
        expected.extend(["[SOU]", "looking", "for", "comedies", "[EOU]"].map(String::from));
        assert_eq!(names(&f, &e), expected);

        let mut segs = vec![Segment::System; 20];
        segs.extend([Segment::User; 3]);
        segs.push(Segment::System);
        assert_eq!(e.segment_ids, segs);
        assert_eq!(e.cat_positions, (0..19).collect::<Vec<_>>());
    }

    #[test]
    fn empty_history_is_category_block() {
        let f = formatter(DEFAULT_MAX_LEN);
        let e = f.form_input(&[]);
        assert_eq!(e.len(), 19);
        assert!(e.segment_ids.iter().all(|&s| s == Segment::System));
    }

    #[test]
    fn mentions_masked_as_im() {
        let f = formatter(DEFAULT_MAX_LEN);
        let e = f.form_input(&[Utterance::seeker("I loved @111776 so much")]);
        assert_eq!(&names(&f, &e)[19..], ["[SOU]", "i", "loved", "[IM]", "so", "much", "[EOU]"]);
        assert_eq!(e.segment_ids[22], Segment::System);
        assert_eq!(e.segment_ids[21], Segment::User);

        let other = f.form_input(&[Utterance::seeker("I loved @42 so much")]);
        assert_eq!(e, other);
    }

    #[test]
    fn separators_between_utterances_and_recommender_segments() {
        let f = formatter(DEFAULT_MAX_LEN);
        let e = f.form_input(&[Utterance::recommender("hi"), Utterance::seeker("hi")]);
        assert_eq!(&names(&f, &e)[19..], ["[SOU]", "hi", "[EOU]", "[SEP]", "[SOU]", "hi", "[EOU]"]);
        assert_eq!(e.segment_ids[20], Segment::System);
        assert_eq!(e.segment_ids[24], Segment::User);
    }

    #[test]
    fn truncation_drops_oldest_then_head_cuts() {
        // 19 cats + [SOU a b c d e EOU] (7) + SEP + [SOU hi EOU] (3) = 30
        let history = [Utterance::seeker("a b c d e"), Utterance::seeker("hi")];
        let f = formatter(28);
        let e = f.form_input(&history);
        assert_eq!(e.len(), 28);
        assert_eq!(&names(&f, &e)[19..], ["[SOU]", "c", "d", "e", "[EOU]", "[SEP]", "[SOU]", "hi", "[EOU]"]);

        // Too small to keep any of the older utterance: it goes entirely.
        let f = formatter(24);
        let e = f.form_input(&history);
        assert_eq!(&names(&f, &e)[19..], ["[SOU]", "hi", "[EOU]"]);
    }

    #[test]
    fn single_long_utterance_is_head_truncated() {
        let f = formatter(23);
        let e = f.form_input(&[Utterance::seeker("a b c d e")]);
        assert_eq!(e.len(), 23);
        assert_eq!(&names(&f, &e)[19..], ["[SOU]", "d", "e", "[EOU]"]);
    }

    #[test]
    fn max_len_must_leave_room() {
        let f = formatter(DEFAULT_MAX_LEN);
        assert!(InputFormatter::new(f.tokenizer.clone(), f.specials.clone(), 22).is_err());
    }

    #[test]
    fn special_tokens_are_distinct_and_resolvable() {
        let f = formatter(DEFAULT_MAX_LEN);
        let s = &f.specials;
        let mut all = s.cat.clone();
        all.extend([s.sep, s.sou, s.eou, s.im]);
        let set: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), 23);
        assert_eq!(&SpecialTokens::resolve(&f.tokenizer, &CategoryVocabulary::movielens()).unwrap(), s);
    }
}
