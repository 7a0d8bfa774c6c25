use super::{Cell, Color, Direction, Shape};
use crate::error::{Error, Result};

pub const MAX_TOKENS: usize = 32;
pub const PAD: u16 = 0;
pub const SEP: u16 = 1;
pub const VOCAB_SIZE: usize = 30;

/// The closed vocabulary; a word's id is its index.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec!["<pad>", "<sep>", "a", "the", "at", "then", "moves", "turns", "grows", "shrinks"];
    v.extend(Color::ALL.iter().map(|c| c.name()));
    v.extend(Shape::ALL.iter().map(|s| s.name()));
    v.extend(Cell::all().map(|c| c.name()));
    v.extend(Direction::ALL.iter().map(|d| d.name()));
    debug_assert_eq!(v.len(), VOCAB_SIZE);
    v
}

/// Fixed-length id sequence with a validity mask; PAD positions are masked.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u16>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    /// The unconditional input: all PAD, nothing valid.
    pub fn empty() -> Self {
        Self { ids: vec![PAD; MAX_TOKENS], mask: vec![false; MAX_TOKENS] }
    }

    pub fn len_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_unconditional(&self) -> bool {
        self.len_valid() == 0
    }
}

/// One id per word, a SEP after every clause, PAD to [`MAX_TOKENS`].
pub fn tokenize(text: &str) -> Result<TokenSequence> {
    let vocab = vocabulary();
    let mut ids = Vec::new();
    if !text.trim().is_empty() {
        for clause in text.split(';') {
            for w in clause.split_whitespace() {
                let w = w.to_lowercase();
                let id = vocab
                    .iter()
                    .skip(2)
                    .position(|&v| v == w)
                    .ok_or_else(|| Error::UnknownToken(w.clone()))?;
                ids.push((id + 2) as u16);
            }
            ids.push(SEP);
        }
    }
    if ids.len() > MAX_TOKENS {
        return Err(Error::Length { count: ids.len(), limit: MAX_TOKENS });
    }
    let n = ids.len();
    ids.resize(MAX_TOKENS, PAD);
    let mask = (0..MAX_TOKENS).map(|i| i < n).collect();
    Ok(TokenSequence { ids, mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_fixed_size_and_unique() {
        let v = vocabulary();
        assert_eq!(v.len(), VOCAB_SIZE);
        let set: std::collections::HashSet<_> = v.iter().collect();
        assert_eq!(set.len(), VOCAB_SIZE);
    }

    #[test]
    fn empty_prompt_is_all_pad() {
        let t = tokenize("").unwrap();
        assert_eq!(t, TokenSequence::empty());
        assert!(t.is_unconditional());
    }

    #[test]
    fn one_id_per_word_plus_separator() {
        let t = tokenize("red square at top-left").unwrap();
        assert_eq!(t.len_valid(), 5);
        let v = vocabulary();
        let words: Vec<&str> = t.ids[..5].iter().map(|&i| v[i as usize]).collect();
        assert_eq!(words, vec!["red", "square", "at", "top-left", "<sep>"]);
        assert!(t.ids[5..].iter().all(|&i| i == PAD));
    }

    #[test]
    fn too_long_prompt_is_rejected() {
        let long = "a red square at top-left moves right then turns green; ".repeat(3);
        let long = long.trim_end().trim_end_matches(';');
        assert!(matches!(tokenize(long), Err(Error::Length { count: 33, limit: 32 })));
    }

    #[test]
    fn unknown_word_is_rejected() {
        assert!(matches!(tokenize("purple square"), Err(Error::UnknownToken(w)) if w == "purple"));
    }
}
