use rand::seq::SliceRandom;

use crate::data::Vocab;
use crate::encoders::N_EMOTIONS;
use crate::error::{Error, Result};
use crate::numcore::stream;

/// Token → per-emotion counts, standing in for an emotion-lexicon toolkit.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionLexicon {
    counts: Vec<[u32; N_EMOTIONS]>,
    words: Vec<Vec<usize>>,
}

const LEXICON_TAG: u64 = 0x6c65_7869;

impl EmotionLexicon {
    /// Assigns the emotion word range to categories by a seeded shuffle,
    /// an equal number of words per category.
    pub fn new(vocab: &Vocab, seed: u64) -> Self {
        let mut ids: Vec<usize> =
            (vocab.emotion_start..vocab.emotion_start + N_EMOTIONS * vocab.emotion_words).collect();
        ids.shuffle(&mut stream(seed, &[LEXICON_TAG]));
        let mut counts = vec![[0u32; N_EMOTIONS]; vocab.size];
        let mut words = vec![Vec::new(); N_EMOTIONS];
        for (i, id) in ids.into_iter().enumerate() {
            let c = i % N_EMOTIONS;
            counts[id][c] = 1;
            words[c].push(id);
        }
        for w in &mut words {
            w.sort_unstable();
        }
        Self { counts, words }
    }

    /// Lexicon from explicit per-token counts.
    pub fn from_counts(counts: Vec<[u32; N_EMOTIONS]>) -> Self {
        let mut words = vec![Vec::new(); N_EMOTIONS];
        for (id, row) in counts.iter().enumerate() {
            for (c, &n) in row.iter().enumerate() {
                if n > 0 {
                    words[c].push(id);
                }
            }
        }
        Self { counts, words }
    }

    /// Tokens that count towards emotion `category`.
    pub fn words(&self, category: usize) -> &[usize] {
        &self.words[category]
    }

    /// Normalized count sum over `tokens`; uniform when nothing matches.
    pub fn distribution(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut total = [0u64; N_EMOTIONS];
        for &t in tokens {
            let row = self
                .counts
                .get(t)
                .ok_or_else(|| Error::validation(format!("token {t} outside lexicon")))?;
            for (acc, &n) in total.iter_mut().zip(row) {
                *acc += u64::from(n);
            }
        }
        let sum: u64 = total.iter().sum();
        if sum == 0 {
            return Ok(vec![1.0 / N_EMOTIONS as f64; N_EMOTIONS]);
        }
        Ok(total.iter().map(|&n| n as f64 / sum as f64).collect())
    }
}
