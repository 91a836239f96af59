//! Byte-level tokenizer with four reserved control tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{loss_mask_chars, CohExample};

pub type TokenId = u32;

pub const BYTE_TOKENS: usize = 256;
pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;
pub const MASK: TokenId = 259;
pub const VOCAB_SIZE: usize = 260;

#[derive(Debug, Error, PartialEq)]
pub enum TokenError {
    #[error("generated bytes are not valid UTF-8 (valid up to byte {valid_up_to})")]
    InvalidUtf8 { valid_up_to: usize },
    #[error("vocab file line {line}: {reason}")]
    VocabFile { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub special_ids: BTreeMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        let special_ids = [("BOS", BOS), ("EOS", EOS), ("PAD", PAD), ("MASK", MASK)]
            .into_iter()
            .map(|(n, i)| (n.to_string(), i))
            .collect();
        Vocab { size: VOCAB_SIZE, special_ids }
    }
}

impl Vocab {
    /// Reads a vocab description: one `special <NAME> <id>` per line, `#` comments.
    ///
    /// All four specials must be present; ids must lie above the byte range and be distinct.
    pub fn parse(text: &str) -> Result<Self, TokenError> {
        let mut special_ids = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| TokenError::VocabFile { line: n + 1, reason };
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["special", name, id] => {
                    let id: TokenId = id.parse().map_err(|_| err(format!("bad id `{id}`")))?;
                    if (id as usize) < BYTE_TOKENS {
                        return Err(err(format!("special id {id} collides with byte tokens")));
                    }
                    if special_ids.values().any(|&v| v == id) {
                        return Err(err(format!("duplicate special id {id}")));
                    }
                    special_ids.insert(name.to_string(), id);
                }
                _ => return Err(err(format!("unrecognized line `{line}`"))),
            }
        }
        let v = Vocab { size: VOCAB_SIZE, special_ids };
        if v != Vocab::default() {
            return Err(TokenError::VocabFile {
                line: 0,
                reason: "special ids must be BOS=256 EOS=257 PAD=258 MASK=259".into(),
            });
        }
        Ok(v)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id as usize >= BYTE_TOKENS
    }
}

pub fn encode(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

fn bytes_of(ids: &[TokenId]) -> Vec<u8> {
    ids.iter().filter(|&&i| (i as usize) < BYTE_TOKENS).map(|&i| i as u8).collect()
}

/// Inverse of [`encode`]; control tokens are stripped.
pub fn decode(ids: &[TokenId]) -> Result<String, TokenError> {
    String::from_utf8(bytes_of(ids)).map_err(|e| TokenError::InvalidUtf8 { valid_up_to: e.utf8_error().valid_up_to() })
}

/// Like [`decode`] but replaces invalid sequences with U+FFFD.
pub fn decode_lossy(ids: &[TokenId]) -> String {
    String::from_utf8_lossy(&bytes_of(ids)).into_owned()
}

/// Token ids with per-token loss weights and input-masking flags.
///
/// `weights[i]` scores the prediction of `ids[i]` from `ids[..i]`;
/// `fcm[i]` replaces `ids[i]` by MASK where it is used as an input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub weights: Vec<f32>,
    pub fcm: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn trainable_tokens(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }

    /// False for the degenerate all-zero-weight sequence.
    pub fn has_trainable_tokens(&self) -> bool {
        self.trainable_tokens() > 0
    }

    /// Ids as seen by the model input, with FCM positions replaced by MASK.
    pub fn input_ids(&self) -> Vec<TokenId> {
        self.ids.iter().zip(&self.fcm).map(|(&id, &m)| if m { MASK } else { id }).collect()
    }
}

/// BOS + bytes + EOS, each byte weighted by the mask region holding it.
pub fn tokenize_example(example: &CohExample, _vocab: &Vocab) -> TokenSequence {
    let regions = loss_mask_chars(example);
    let n = example.text.len();
    let mut ids = Vec::with_capacity(n + 2);
    let mut weights = Vec::with_capacity(n + 2);
    ids.push(BOS);
    weights.push(0.0);
    ids.extend(encode(&example.text));
    for r in &regions {
        weights.extend(std::iter::repeat_n(r.weight, r.end - r.start));
    }
    debug_assert_eq!(weights.len(), n + 1, "mask regions must tile the example");
    ids.push(EOS);
    weights.push(regions.last().map_or(0.0, |r| r.weight));
    let fcm = vec![false; ids.len()];
    TokenSequence { ids, weights, fcm }
}

/// Plain language-modeling sequence: every token after BOS is a target.
pub fn tokenize_plain(text: &str) -> TokenSequence {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(encode(text));
    ids.push(EOS);
    let mut weights = vec![1.0; ids.len()];
    weights[0] = 0.0;
    let fcm = vec![false; ids.len()];
    TokenSequence { ids, weights, fcm }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{CohExample, LossPolicy};
    use crate::feedback::{Role, Span};
    use proptest::prelude::*;

    fn example(parts: &[(&str, Role)]) -> CohExample {
        let mut text = String::new();
        let mut spans = Vec::new();
        for (s, role) in parts {
            let start = text.len();
            text.push_str(s);
            spans.push(Span { role: *role, start, end: text.len() });
        }
        CohExample { text, spans, loss_policy: LossPolicy::AllOutputs, unlikelihood_spans: vec![] }
    }

    #[test]
    fn encode_basics() {
        assert!(encode("").is_empty());
        assert_eq!(encode("A"), vec![65]);
        assert_eq!(decode(&[72, 105]).unwrap(), "Hi");
    }

    #[test]
    fn specials_are_disjoint_from_bytes() {
        let v = Vocab::default();
        assert_eq!(v.size, 260);
        for id in v.special_ids.values() {
            assert!(*id as usize >= BYTE_TOKENS);
        }
        let mut ids: Vec<_> = v.special_ids.values().collect();
        ids.dedup();
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn decode_errors_and_lossy() {
        let euro = encode("€");
        assert_eq!(decode(&euro[..2]), Err(TokenError::InvalidUtf8 { valid_up_to: 0 }));
        assert_eq!(decode_lossy(&euro[..2]), "\u{FFFD}");
        let mut with_specials = vec![BOS];
        with_specials.extend(encode("ok"));
        with_specials.extend([PAD, MASK, EOS]);
        assert_eq!(decode(&with_specials).unwrap(), "ok");
    }

    #[test]
    fn vocab_file() {
        let text = "# specials\nspecial BOS 256\nspecial EOS 257\nspecial PAD 258\nspecial MASK 259\n";
        assert_eq!(Vocab::parse(text).unwrap(), Vocab::default());
        assert!(Vocab::parse("special BOS 65\n").is_err());
        assert!(Vocab::parse("special BOS 256\nspecial EOS 256\n").is_err());
        assert!(Vocab::parse("merge a b\n").is_err());
    }

    #[test]
    fn weight_inheritance() {
        let ex = example(&[("Q ", Role::Prompt), ("Good: ", Role::FeedbackMarker), ("A", Role::OutputPos)]);
        let seq = tokenize_example(&ex, &Vocab::default());
        assert_eq!(seq.ids.len(), ex.text.len() + 2);
        assert_eq!(seq.ids[0], BOS);
        assert_eq!(*seq.ids.last().unwrap(), EOS);
        assert_eq!(seq.weights[0], 0.0);
        assert_eq!(seq.trainable_tokens(), "A".len() + 1);
        assert!(seq.fcm.iter().all(|&m| !m));
    }

    #[test]
    fn all_zero_weights_flagged() {
        let ex = example(&[("Q ", Role::Prompt), ("Good: ", Role::FeedbackMarker)]);
        let seq = tokenize_example(&ex, &Vocab::default());
        assert!(!seq.has_trainable_tokens());
        assert!(seq.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn plain_sequence_weights() {
        let seq = tokenize_plain("abc");
        assert_eq!(seq.weights, vec![0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn round_trip(s in any::<String>()) {
            prop_assert_eq!(decode(&encode(&s)).unwrap(), s);
        }
    }

    proptest! {
        #[test]
        fn weights_constant_within_chars_and_mass_preserved(
            parts in proptest::collection::vec(("\\PC{1,6}", 0usize..4), 1..8)
        ) {
            let roles = [Role::Prompt, Role::FeedbackMarker, Role::OutputPos, Role::OutputNeg];
            let parts: Vec<(&str, Role)> = parts.iter().map(|(s, r)| (s.as_str(), roles[*r])).collect();
            let ex = example(&parts);
            let seq = tokenize_example(&ex, &Vocab::default());
            // weights constant inside every char
            for (ci, ch) in ex.text.char_indices() {
                let w = seq.weights[ci + 1];
                for b in 0..ch.len_utf8() {
                    prop_assert_eq!(seq.weights[ci + 1 + b], w);
                }
            }
            let regions = loss_mask_chars(&ex);
            let char_mass: usize = regions.iter().filter(|r| r.weight == 1.0).map(|r| r.end - r.start).sum();
            let eos = usize::from(regions.last().unwrap().weight == 1.0);
            let token_mass = seq.weights.iter().filter(|&&w| w == 1.0).count();
            prop_assert_eq!(token_mass, char_mass + eos);
        }
    }
}
