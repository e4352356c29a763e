use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::N_EMOTIONS;
use crate::error::Result;
use crate::nn::{Bound, Init, Linear, ParamId, ParamStore};
use crate::numcore::math::{argmax, validate_distribution};
use crate::numcore::{Tape, Var};

/// `normalize(F_cls · W)`: projection into the shared space, unit L2 norm.
pub fn project_cls(tape: &mut Tape, cls: Var, w: Var) -> Result<Var> {
    let y = tape.matmul(cls, w)?;
    tape.normalize_rows(y)
}

/// Row of the emotion table for the dominant lexicon emotion; ties go to
/// the lowest category index.
pub fn text_emotion_embed(tape: &mut Tape, e_t: &[f64], table: Var) -> Result<Var> {
    validate_distribution(e_t, "e_t")?;
    tape.gather_rows(table, &[argmax(e_t)])
}

/// Projection, emotion and intention heads on top of the encoders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Heads {
    pub proj_text: ParamId,
    pub proj_image: ParamId,
    /// `7×7` text emotion embedding table.
    pub emotion_table: ParamId,
    /// `f_emo`: visual `[CLS]` → 7 emotion logits; shared with the view heads.
    pub emotion: Linear,
    /// `f_int`: visual `[CLS]` → `d` intention embedding; shared likewise.
    pub intention: Linear,
}

impl Heads {
    pub fn new<R: Rng>(store: &mut ParamStore, init: &mut Init<R>, d: usize) -> Self {
        Self {
            proj_text: store.add("heads.proj_text", init.uniform(d, d, d)),
            proj_image: store.add("heads.proj_image", init.uniform(d, d, d)),
            emotion_table: store.add(
                "heads.emotion_table",
                init.uniform(N_EMOTIONS, N_EMOTIONS, N_EMOTIONS),
            ),
            emotion: Linear::new(store, init, "heads.emotion", d, N_EMOTIONS, true),
            intention: Linear::new(store, init, "heads.intention", d, d, true),
        }
    }

    pub fn emotion_visual(&self, tape: &mut Tape, p: &Bound, cls: Var) -> Result<Var> {
        self.emotion.forward(tape, p, cls)
    }

    pub fn intention_visual(&self, tape: &mut Tape, p: &Bound, cls: Var) -> Result<Var> {
        self.intention.forward(tape, p, cls)
    }
}
