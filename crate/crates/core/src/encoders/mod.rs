//! Toy transformer encoders for dialogue text and sticker images, plus the
//! heads that map their `[CLS]` features into the shared, emotion and
//! intention spaces.

mod heads;
mod image;
mod text;
mod transformer;

pub use heads::{project_cls, text_emotion_embed, Heads};
pub use image::ImageEncoder;
pub use text::TextEncoder;
pub use transformer::{multi_head_attention, Attention, Block};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Var;

/// Number of emotion categories in the lexicon and in every emotion head.
pub const N_EMOTIONS: usize = 7;
/// Commonsense relations, in row order of the intention matrix.
pub const RELATIONS: [&str; 4] = ["xIntent", "xNeed", "xWant", "xEffect"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub patch_grid: usize,
    pub patch_dim: usize,
    pub n_emotions: usize,
    pub n_relations: usize,
    pub dropout_rate: f64,
    /// Hidden width of the block MLPs as a multiple of `d_model`.
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            vocab_size: 500,
            max_text_len: 64,
            patch_grid: 4,
            patch_dim: 16,
            n_emotions: N_EMOTIONS,
            n_relations: RELATIONS.len(),
            dropout_rate: 0.1,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn n_patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("patch_grid", self.patch_grid),
            ("patch_dim", self.patch_dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be positive")));
        }
        if self.d_model < 2 {
            return Err(Error::Config("encoder.d_model must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "encoder.d_model {} is not divisible by encoder.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_emotions != N_EMOTIONS {
            return Err(Error::Config(format!(
                "encoder.n_emotions must be {N_EMOTIONS}, got {}",
                self.n_emotions
            )));
        }
        if self.n_relations != RELATIONS.len() {
            return Err(Error::Config(format!(
                "encoder.n_relations must be {}, got {}",
                RELATIONS.len(),
                self.n_relations
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "encoder.dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Dialogue-side features on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TextFeatures {
    /// `(L+1)×d`, row 0 is `[CLS]`.
    pub tokens: Var,
    pub cls: Var,
    /// Unit-norm projection of `cls` into the shared space.
    pub proj: Var,
    /// Emotion-table row for the dominant lexicon emotion (`1×7`).
    pub emotion: Option<Var>,
    /// Per-relation `[CLS]` encodings of the commonsense sequences (`4×d`).
    pub intention: Option<Var>,
}

/// Sticker-side features on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ImageFeatures {
    /// `(P+1)×d`, row 0 is `[CLS]`.
    pub patches: Var,
    pub cls: Var,
    pub proj: Var,
    /// `1×7` emotion logits.
    pub emotion: Var,
    /// `1×d` intention embedding.
    pub intention: Var,
}

/// Encoder outputs for one dialogue paired with one sticker.
#[derive(Debug, Clone, Copy)]
pub struct FeatureBundle {
    pub text: TextFeatures,
    pub image: ImageFeatures,
}
