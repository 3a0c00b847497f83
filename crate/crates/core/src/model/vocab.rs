//! Whitespace vocabulary of the tiny reference model.

use std::collections::HashMap;

use crate::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const BOS_TOKEN: &str = "[BOS]";
pub const EOS_TOKEN: &str = "[EOS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const MASK_TOKEN: &str = "[MASK]";

/// Ids below this are special vocabulary entries.
pub const NUM_SPECIAL: usize = 5;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

/// Content words with positive task polarity in the synthetic corpora.
pub const POSITIVE_WORDS: [&str; 8] = [
    "good", "great", "happy", "bright", "calm", "clean", "fresh", "warm",
];

/// Content words with negative task polarity in the synthetic corpora.
pub const NEGATIVE_WORDS: [&str; 8] = [
    "bad", "awful", "sad", "dark", "tense", "dirty", "stale", "cold",
];

/// Polarity-free filler words.
pub const NEUTRAL_WORDS: [&str; 43] = [
    "the", "a", "an", "movie", "film", "plot", "actor", "scene", "story", "music", "light",
    "room", "day", "night", "city", "road", "tree", "bird", "water", "wind", "stone", "paper",
    "glass", "door", "table", "chair", "voice", "sound", "color", "shape", "line", "word",
    "page", "book", "song", "dance", "game", "walk", "run", "talk", "look", "turn", "end",
];

/// Fixed word table mapping surfaces to ids. Specials occupy the low ids,
/// then positive, negative, and neutral words in declaration order.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocab {
    /// Build a vocabulary of exactly `size` entries (specials included).
    /// The full table has 64 entries; smaller sizes truncate the word list.
    pub fn with_size(size: usize) -> Result<Self> {
        let full: Vec<&str> = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, SEP_TOKEN, MASK_TOKEN]
            .into_iter()
            .chain(POSITIVE_WORDS)
            .chain(NEGATIVE_WORDS)
            .chain(NEUTRAL_WORDS)
            .collect();
        if size <= NUM_SPECIAL || size > full.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "vocab size {size} outside supported range {}..={}",
                NUM_SPECIAL + 1,
                full.len()
            )));
        }
        let words: Vec<String> = full[..size].iter().map(|w| w.to_string()).collect();
        let lookup = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Ok(Self { words, lookup })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.lookup.get(word).copied()
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < NUM_SPECIAL
    }

    /// Content (non-special) ids, the decodable portion of the table.
    pub fn content_ids(&self) -> std::ops::Range<u32> {
        NUM_SPECIAL as u32..self.len() as u32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_table_has_64_entries() {
        let v = Vocab::with_size(64).unwrap();
        assert_eq!(v.len(), 64);
        assert_eq!(v.id_of("good"), Some(5));
        assert_eq!(v.id_of("bad"), Some(13));
        assert_eq!(v.surface(MASK_ID), MASK_TOKEN);
    }

    #[test]
    fn truncated_table_keeps_specials_and_prefix() {
        let v = Vocab::with_size(16).unwrap();
        assert_eq!(v.len(), 16);
        assert!(v.is_special(SEP_ID));
        assert!(!v.is_special(5));
        assert_eq!(v.id_of("the"), None);
    }

    #[test]
    fn degenerate_sizes_rejected() {
        assert!(Vocab::with_size(5).is_err());
        assert!(Vocab::with_size(65).is_err());
    }
}
