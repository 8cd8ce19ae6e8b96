//! Character-level vocabulary with a fixed, sorted charset.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Token-to-id bijection over a character set. Ids follow the sorted order of
/// the characters, so a given charset always produces the same mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    /// Lowercase letters, space, period, and newline. The period doubles as
    /// the decoding end marker; the newline separates corpus lines.
    pub fn default_charset() -> Self {
        let mut chars: Vec<char> = ('a'..='z').collect();
        chars.push(' ');
        chars.push('.');
        chars.push('\n');
        Vocab::from_chars(chars)
    }

    pub fn from_chars(mut chars: Vec<char>) -> Self {
        chars.sort_unstable();
        chars.dedup();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Vocab { chars, index }
    }

    pub fn size(&self) -> usize {
        self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// Id of the sentence end marker '.'.
    pub fn end_marker(&self) -> Option<usize> {
        self.id_of('.')
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index.get(&c).copied().ok_or_else(|| {
                    Error::Tokenizer(format!("character {c:?} is not in the vocabulary"))
                })
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                self.chars.get(id).copied().ok_or_else(|| {
                    Error::Tokenizer(format!(
                        "token id {id} is out of range for vocabulary of size {}",
                        self.chars.len()
                    ))
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_round_trip() {
        let v = Vocab::default_charset();
        assert_eq!(v.tokenize("").unwrap(), Vec::<usize>::new());
        assert_eq!(v.detokenize(&[]).unwrap(), "");
    }

    #[test]
    fn single_char() {
        let v = Vocab::default_charset();
        let ids = v.tokenize("a").unwrap();
        assert_eq!(ids.len(), 1);
        assert_eq!(v.detokenize(&ids).unwrap(), "a");
    }

    #[test]
    fn unknown_character_rejected() {
        let v = Vocab::default_charset();
        assert!(v.tokenize("Zed!").is_err());
    }

    #[test]
    fn invalid_id_rejected() {
        let v = Vocab::default_charset();
        assert!(v.detokenize(&[v.size()]).is_err());
    }

    #[test]
    fn ids_are_sorted_and_stable() {
        let v = Vocab::default_charset();
        assert_eq!(v.id_of('\n'), Some(0));
        assert_eq!(v.id_of(' '), Some(1));
        assert_eq!(v.id_of('.'), Some(2));
        assert_eq!(v.id_of('a'), Some(3));
        assert_eq!(v.end_marker(), Some(2));
    }

    proptest! {
        #[test]
        fn round_trip_identity(s in "[a-z \\.\n]{0,64}") {
            let v = Vocab::default_charset();
            let ids = v.tokenize(&s).unwrap();
            prop_assert_eq!(v.detokenize(&ids).unwrap(), s);
        }
    }
}
