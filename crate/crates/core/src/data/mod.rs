//! Synthetic dialogue/sticker corpus: generation, mock knowledge services,
//! line-delimited JSON storage and batching.

mod comet;
mod generate;
mod lexicon;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use comet::MockComet;
pub use generate::{generate_corpus, generate_split, write_corpus, Corpus, CorpusManifest, Split};
pub use generate::sha256_hex;
pub use lexicon::EmotionLexicon;

use crate::encoders::{N_EMOTIONS, RELATIONS};
use crate::error::{Error, Result};
use crate::numcore::math::validate_distribution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub n_candidates: usize,
    pub n_topics: usize,
    pub n_intent_archetypes: usize,
    pub hard_negative_fraction: f64,
    pub vocab_size: usize,
    /// Inclusive range of turns per dialogue.
    pub turns: (usize, usize),
    /// Inclusive range of tokens per turn.
    pub turn_len: (usize, usize),
    /// Probability that the dialogue carries its archetype's cue token.
    pub cue_rate: f64,
    /// Probability that an emotion word comes from a random category.
    pub emotion_noise: f64,
    pub comet_len: usize,
    pub patch_grid: usize,
    pub patch_dim: usize,
    pub image_noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_samples: 3000,
            val_fraction: 1.0 / 6.0,
            test_fraction: 1.0 / 6.0,
            n_candidates: 10,
            n_topics: 8,
            n_intent_archetypes: 6,
            hard_negative_fraction: 0.4,
            vocab_size: 500,
            turns: (2, 4),
            turn_len: (4, 8),
            cue_rate: 0.5,
            emotion_noise: 0.2,
            comet_len: 4,
            patch_grid: 4,
            patch_dim: 16,
            image_noise: 0.5,
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    pub fn n_patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    /// Longest dialogue the generator can emit, separators included.
    pub fn max_dialogue_len(&self) -> usize {
        self.turns.1 * (self.turn_len.1 + 1) + 1
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n_val = (self.n_samples as f64 * self.val_fraction).round() as usize;
        let n_test = (self.n_samples as f64 * self.test_fraction).round() as usize;
        (self.n_samples - n_val - n_test, n_val, n_test)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::validation(format!("data.{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("hard_negative_fraction", self.hard_negative_fraction)?;
        unit("cue_rate", self.cue_rate)?;
        unit("emotion_noise", self.emotion_noise)?;
        unit("val_fraction", self.val_fraction)?;
        unit("test_fraction", self.test_fraction)?;
        if self.val_fraction + self.test_fraction >= 1.0 {
            return Err(Error::validation("val and test fractions leave no training data"));
        }
        if self.n_candidates < 2 {
            return Err(Error::validation("data.n_candidates must be >= 2"));
        }
        if self.n_topics < 2 || self.n_intent_archetypes < 2 {
            return Err(Error::validation("need at least 2 topics and 2 intent archetypes"));
        }
        if self.turns.0 == 0 || self.turns.0 > self.turns.1 {
            return Err(Error::validation(format!("bad turn range {:?}", self.turns)));
        }
        if self.turn_len.0 == 0 || self.turn_len.0 > self.turn_len.1 {
            return Err(Error::validation(format!("bad turn length range {:?}", self.turn_len)));
        }
        if self.comet_len == 0 || self.patch_grid == 0 || self.patch_dim == 0 {
            return Err(Error::validation("comet_len, patch_grid and patch_dim must be positive"));
        }
        if !(self.image_noise >= 0.0 && self.image_noise.is_finite()) {
            return Err(Error::validation("data.image_noise must be >= 0"));
        }
        Vocab::new(self)?;
        Ok(())
    }
}

/// Token id layout of the synthetic vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pub sep: usize,
    pub topic_start: usize,
    pub topic_words: usize,
    pub emotion_start: usize,
    pub emotion_words: usize,
    pub cue_start: usize,
    pub cue_words: usize,
    pub comet_start: usize,
    pub comet_words: usize,
    pub filler_start: usize,
    pub size: usize,
}

const TOPIC_WORDS: usize = 16;
const EMOTION_WORDS: usize = 8;
const CUE_WORDS: usize = 2;
const COMET_WORDS: usize = 16;
const MIN_FILLER: usize = 8;

impl Vocab {
    pub fn new(cfg: &GeneratorConfig) -> Result<Self> {
        let topic_start = 1;
        let emotion_start = topic_start + cfg.n_topics * TOPIC_WORDS;
        let cue_start = emotion_start + N_EMOTIONS * EMOTION_WORDS;
        let comet_start = cue_start + cfg.n_intent_archetypes * CUE_WORDS;
        let filler_start = comet_start + RELATIONS.len() * COMET_WORDS;
        if cfg.vocab_size < filler_start + MIN_FILLER {
            return Err(Error::validation(format!(
                "vocab_size {} too small for this layout, need at least {}",
                cfg.vocab_size,
                filler_start + MIN_FILLER
            )));
        }
        Ok(Self {
            sep: 0,
            topic_start,
            topic_words: TOPIC_WORDS,
            emotion_start,
            emotion_words: EMOTION_WORDS,
            cue_start,
            cue_words: CUE_WORDS,
            comet_start,
            comet_words: COMET_WORDS,
            filler_start,
            size: cfg.vocab_size,
        })
    }

    pub fn comet_range(&self, relation: usize) -> std::ops::Range<usize> {
        let s = self.comet_start + relation * self.comet_words;
        s..s + self.comet_words
    }
}

/// Latent factors behind a dialogue or a sticker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Latent {
    pub topic: usize,
    pub emotion: usize,
    pub archetype: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StickerImage {
    pub latent: Latent,
    /// Row-major `n_patches×patch_dim` patch features.
    pub pixels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueSample {
    pub sample_id: u64,
    pub latent: Latent,
    pub token_ids: Vec<usize>,
    pub e_t: Vec<f64>,
    /// One sequence per commonsense relation, in relation order.
    pub comet_sequences: Vec<Vec<usize>>,
    pub candidates: Vec<StickerImage>,
    pub labels: Vec<u8>,
}

impl DialogueSample {
    pub fn positive(&self) -> usize {
        self.labels.iter().position(|&l| l == 1).unwrap_or(0)
    }

    pub fn validate(&self, pixel_len: Option<usize>) -> Result<()> {
        if self.token_ids.is_empty() {
            return Err(Error::validation("empty dialogue"));
        }
        validate_distribution(&self.e_t, "e_t")?;
        if self.e_t.len() != N_EMOTIONS {
            return Err(Error::validation(format!("e_t has {} entries", self.e_t.len())));
        }
        if self.comet_sequences.len() != RELATIONS.len()
            || self.comet_sequences.iter().any(Vec::is_empty)
        {
            return Err(Error::validation("expected 4 nonempty commonsense sequences"));
        }
        if self.candidates.len() < 2 || self.labels.len() != self.candidates.len() {
            return Err(Error::validation(format!(
                "{} candidates with {} labels",
                self.candidates.len(),
                self.labels.len()
            )));
        }
        if self.labels.iter().any(|&l| l > 1) || self.labels.iter().filter(|&&l| l == 1).count() != 1 {
            return Err(Error::validation("labels must be binary with exactly one positive"));
        }
        let want = pixel_len.unwrap_or(self.candidates[0].pixels.len());
        for c in &self.candidates {
            if c.pixels.len() != want || c.pixels.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("candidate pixels must be finite with a common size"));
            }
        }
        Ok(())
    }
}

/// Writes one JSON record per line.
pub fn save_dataset(path: &Path, samples: &[DialogueSample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates a line-delimited dataset; errors carry the line number.
pub fn load_dataset(path: &Path) -> Result<Vec<DialogueSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut pixel_len = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let s: DialogueSample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        s.validate(pixel_len).map_err(|e| parse_err(e.to_string()))?;
        pixel_len.get_or_insert(s.candidates[0].pixels.len());
        out.push(s);
    }
    Ok(out)
}

/// Splits `order` into consecutive batches; the last may be short.
pub fn make_batches(order: &[usize], size: usize) -> Result<Vec<Vec<usize>>> {
    if size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    Ok(order.chunks(size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_splits() {
        assert_eq!(GeneratorConfig::default().split_sizes(), (2000, 500, 500));
    }

    #[test]
    fn batches_keep_partial_tail() {
        let order: Vec<usize> = (0..10).collect();
        let b = make_batches(&order, 4).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b.concat(), order);
        assert!(make_batches(&order, 0).is_err());
    }

    #[test]
    fn vocab_layout_is_disjoint() {
        let cfg = GeneratorConfig::default();
        let v = Vocab::new(&cfg).unwrap();
        assert!(v.sep < v.topic_start);
        assert_eq!(v.emotion_start, v.topic_start + cfg.n_topics * v.topic_words);
        assert!(v.comet_range(3).end <= v.filler_start);
        assert!(v.filler_start < v.size);
        assert!(Vocab::new(&GeneratorConfig { vocab_size: 100, ..cfg }).is_err());
    }

    #[test]
    fn config_validation() {
        let c = GeneratorConfig::default();
        c.validate().unwrap();
        assert!(GeneratorConfig { hard_negative_fraction: 1.5, ..c.clone() }.validate().is_err());
        assert!(GeneratorConfig { n_candidates: 1, ..c.clone() }.validate().is_err());
        assert!(GeneratorConfig { turns: (3, 2), ..c }.validate().is_err());
    }
}
