//! Fixed toy vocabulary and tokenized prompts.
//!
//! 48 token ids: shape words, background words, color words, filler, negative
//! words, and 16 reserved modifier slots that concept fine-tuning binds to.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

pub const VOCAB_SIZE: usize = 48;
/// Maximum prompt length S.
pub const MAX_PROMPT_LEN: usize = 16;
pub const PAD: u16 = 0;

pub const SHAPE_WORDS: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const BG_WORDS: [&str; 4] = ["plain", "stripes", "dots", "gradient"];
pub const COLOR_WORDS: [&str; 8] =
    ["red", "orange", "yellow", "green", "cyan", "blue", "magenta", "pink"];
pub const FILLER_WORDS: [&str; 6] = ["a", "and", "on", "photo", "of", "with"];
pub const NEGATIVE_WORDS: [&str; 4] = ["blurry", "deformed", "noisy", "dull"];
pub const MODIFIER_SLOTS: usize = 16;

const SHAPE_BASE: u16 = 1;
const BG_BASE: u16 = 5;
const COLOR_BASE: u16 = 9;
const FILLER_BASE: u16 = 17;
const NEGATIVE_BASE: u16 = 23;
const MODIFIER_BASE: u16 = 27;

pub fn shape_token(idx: usize) -> u16 {
    assert!(idx < 4);
    SHAPE_BASE + idx as u16
}

pub fn bg_token(idx: usize) -> u16 {
    assert!(idx < 4);
    BG_BASE + idx as u16
}

pub fn color_token(idx: usize) -> u16 {
    assert!(idx < 8);
    COLOR_BASE + idx as u16
}

pub fn filler_token(word: &str) -> u16 {
    let idx = FILLER_WORDS.iter().position(|w| *w == word).expect("unknown filler word");
    FILLER_BASE + idx as u16
}

pub fn negative_token(idx: usize) -> u16 {
    assert!(idx < 4);
    NEGATIVE_BASE + idx as u16
}

/// Reserved modifier token for bank slot `slot`.
pub fn modifier_token(slot: usize) -> u16 {
    assert!(slot < MODIFIER_SLOTS, "modifier slot out of range");
    MODIFIER_BASE + slot as u16
}

pub fn is_modifier(tok: u16) -> bool {
    (MODIFIER_BASE..MODIFIER_BASE + MODIFIER_SLOTS as u16).contains(&tok)
}

pub fn is_shape_word(tok: u16) -> bool {
    (SHAPE_BASE..SHAPE_BASE + 4).contains(&tok)
}

pub fn is_bg_word(tok: u16) -> bool {
    (BG_BASE..BG_BASE + 4).contains(&tok)
}

/// Human-readable form of a token id, for diagnostics.
pub fn token_name(tok: u16) -> String {
    let t = tok as usize;
    match tok {
        0 => "<pad>".into(),
        _ if is_shape_word(tok) => SHAPE_WORDS[t - SHAPE_BASE as usize].into(),
        _ if is_bg_word(tok) => BG_WORDS[t - BG_BASE as usize].into(),
        _ if (COLOR_BASE..COLOR_BASE + 8).contains(&tok) => {
            COLOR_WORDS[t - COLOR_BASE as usize].into()
        }
        _ if (FILLER_BASE..FILLER_BASE + 6).contains(&tok) => {
            FILLER_WORDS[t - FILLER_BASE as usize].into()
        }
        _ if (NEGATIVE_BASE..NEGATIVE_BASE + 4).contains(&tok) => {
            NEGATIVE_WORDS[t - NEGATIVE_BASE as usize].into()
        }
        _ if is_modifier(tok) => format!("<c{}>", t - MODIFIER_BASE as usize),
        _ => format!("<res{t}>"),
    }
}

/// Token id for a vocabulary word as printed by [`token_name`], including
/// modifier forms like `<c3>`.
pub fn lookup_word(word: &str) -> Option<u16> {
    (0..VOCAB_SIZE as u16).find(|&t| token_name(t) == word)
}

/// Tokenize a whitespace-separated prompt string.
pub fn tokenize(text: &str) -> Result<PromptTokens> {
    let tokens = text
        .split_whitespace()
        .map(|w| {
            lookup_word(w)
                .ok_or_else(|| CoreError::Validation(format!("unknown word {w:?} in prompt")))
        })
        .collect::<Result<Vec<u16>>>()?;
    PromptTokens::new(tokens)
}

/// A tokenized prompt, padded with id 0 up to [`MAX_PROMPT_LEN`] at embed time.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTokens {
    tokens: Vec<u16>,
}

impl PromptTokens {
    pub fn new(tokens: Vec<u16>) -> Result<Self> {
        if tokens.len() > MAX_PROMPT_LEN {
            return Err(CoreError::Validation(format!(
                "prompt length {} exceeds max {MAX_PROMPT_LEN}",
                tokens.len()
            )));
        }
        if tokens.iter().any(|&t| t as usize >= VOCAB_SIZE) {
            return Err(CoreError::Validation("prompt token id outside vocabulary".into()));
        }
        // A modifier must immediately precede a concept word (shape or bg),
        // and no two modifiers may share a concept word.
        for (i, &t) in tokens.iter().enumerate() {
            if is_modifier(t) {
                match tokens.get(i + 1) {
                    Some(&next) if is_shape_word(next) || is_bg_word(next) => {}
                    _ => {
                        return Err(CoreError::Validation(format!(
                            "modifier token {} must immediately precede a concept word",
                            token_name(t)
                        )))
                    }
                }
                if i > 0 && is_modifier(tokens[i - 1]) {
                    return Err(CoreError::Validation(
                        "at most one modifier token per concept word".into(),
                    ));
                }
            }
        }
        Ok(Self { tokens })
    }

    pub fn empty() -> Self {
        Self { tokens: Vec::new() }
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token ids padded with 0 to length S.
    pub fn padded(&self) -> [u16; MAX_PROMPT_LEN] {
        let mut out = [PAD; MAX_PROMPT_LEN];
        out[..self.tokens.len()].copy_from_slice(&self.tokens);
        out
    }

    pub fn contains(&self, tok: u16) -> bool {
        self.tokens.contains(&tok)
    }

    /// New prompt with `modifier` inserted immediately before the single
    /// occurrence of `word`. Errors if `word` is absent or duplicated.
    pub fn with_modifier_before(&self, modifier: u16, word: u16) -> Result<Self> {
        let hits: Vec<usize> =
            self.tokens.iter().enumerate().filter(|(_, &t)| t == word).map(|(i, _)| i).collect();
        match hits.as_slice() {
            [pos] => {
                let mut toks = self.tokens.clone();
                toks.insert(*pos, modifier);
                Self::new(toks)
            }
            [] => Err(CoreError::Validation(format!(
                "word {:?} absent from prompt",
                token_name(word)
            ))),
            _ => Err(CoreError::Validation(format!(
                "word {:?} occurs {} times in prompt, expected exactly once",
                token_name(word),
                hits.len()
            ))),
        }
    }

    pub fn describe(&self) -> String {
        self.tokens.iter().map(|&t| token_name(t)).collect::<Vec<_>>().join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_lookup_roundtrip() {
        for t in 0..VOCAB_SIZE as u16 {
            assert_eq!(lookup_word(&token_name(t)), Some(t));
        }
        assert_eq!(lookup_word("nonsense"), None);
        let p = tokenize("a circle on stripes").unwrap();
        assert_eq!(p.describe(), "a circle on stripes");
        assert!(tokenize("a wug").is_err());
    }

    #[test]
    fn token_ranges_fit_vocab() {
        assert!(modifier_token(MODIFIER_SLOTS - 1) < VOCAB_SIZE as u16);
        assert_eq!(token_name(shape_token(0)), "circle");
        assert_eq!(token_name(bg_token(1)), "stripes");
        assert_eq!(token_name(modifier_token(2)), "<c2>");
    }

    #[test]
    fn modifier_must_precede_concept_word() {
        // "<c0> circle" is fine
        PromptTokens::new(vec![modifier_token(0), shape_token(0)]).unwrap();
        // trailing modifier is not
        assert!(PromptTokens::new(vec![shape_token(0), modifier_token(0)]).is_err());
        // modifier before filler is not
        assert!(PromptTokens::new(vec![modifier_token(0), filler_token("a")]).is_err());
        // double modifier is not
        assert!(PromptTokens::new(vec![
            modifier_token(0),
            modifier_token(1),
            shape_token(0)
        ])
        .is_err());
    }

    #[test]
    fn insert_modifier_before_word() {
        let base = PromptTokens::new(vec![
            filler_token("a"),
            shape_token(0),
            filler_token("on"),
            bg_token(1),
        ])
        .unwrap();
        let p = base.with_modifier_before(modifier_token(3), shape_token(0)).unwrap();
        assert_eq!(
            p.tokens(),
            &[filler_token("a"), modifier_token(3), shape_token(0), filler_token("on"), bg_token(1)]
        );
        // exactly one insertion
        assert_eq!(p.len(), base.len() + 1);
        assert!(base.with_modifier_before(modifier_token(3), shape_token(2)).is_err());
    }

    #[test]
    fn length_cap_enforced() {
        assert!(PromptTokens::new(vec![filler_token("a"); MAX_PROMPT_LEN + 1]).is_err());
    }
}
