//! Dual-level contrastive alignment.
//!
//! Inter-modality: dialogue/sticker InfoNCE in both directions, emotion KL
//! between sticker and dialogue emotion vectors, and intention InfoNCE.
//! Intra-modality: two dropout views of each modality's `[CLS]` feature,
//! tied by symmetric KL on their emotion/intention predictions and an
//! instance-level contrastive loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Linear};
use crate::numcore::math::kl_divergence;
use crate::numcore::{dropout_mask, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentWeights {
    pub tau: f64,
    pub w_e: f64,
    pub w_i: f64,
    pub w_e_t: f64,
    pub w_e_v: f64,
    pub w_i_t: f64,
    pub w_i_v: f64,
    /// Dropout rate used to produce the two intra-modality views.
    pub view_dropout: f64,
}

impl Default for AlignmentWeights {
    fn default() -> Self {
        Self {
            tau: 0.07,
            w_e: 0.5,
            w_i: 0.5,
            w_e_t: 0.5,
            w_e_v: 0.5,
            w_i_t: 0.5,
            w_i_v: 0.5,
            view_dropout: 0.1,
        }
    }
}

impl AlignmentWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("alignment.tau must be > 0, got {}", self.tau)));
        }
        let weights = [
            ("w_e", self.w_e),
            ("w_i", self.w_i),
            ("w_e_t", self.w_e_t),
            ("w_e_v", self.w_e_v),
            ("w_i_t", self.w_i_t),
            ("w_i_v", self.w_i_v),
        ];
        if let Some((name, w)) = weights.iter().find(|(_, w)| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("alignment.{name} must be >= 0, got {w}")));
        }
        if !(0.0..1.0).contains(&self.view_dropout) {
            return Err(Error::Config(format!(
                "alignment.view_dropout must lie in [0, 1), got {}",
                self.view_dropout
            )));
        }
        Ok(())
    }
}

fn batch_size(tape: &Tape, x: Var) -> Result<usize> {
    let k = tape.value(x).rows();
    if k == 0 {
        return Err(Error::validation("empty batch"));
    }
    Ok(k)
}

/// In-batch InfoNCE: row `i` of `anchors` is positive with row `i` of
/// `candidates`, every other row is a negative.
///
/// `-(1/K) Σ_i log softmax_j(anchor_i · candidate_j / τ)[i]`
pub fn info_nce(tape: &mut Tape, anchors: Var, candidates: Var, tau: f64) -> Result<Var> {
    let k = batch_size(tape, anchors)?;
    if tape.value(candidates).rows() != k {
        return Err(Error::Shape {
            op: "info_nce",
            lhs: tape.value(anchors).shape().to_vec(),
            rhs: tape.value(candidates).shape().to_vec(),
        });
    }
    let logits = tape.matmul_nt(anchors, candidates)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let log_probs = tape.log_softmax_rows(logits);
    let diag: Vec<usize> = (0..k).collect();
    let picked = tape.pick_per_row(log_probs, &diag)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Image-to-text: each positive sticker against every dialogue in the batch.
pub fn info_nce_i2t(tape: &mut Tape, image_pos: Var, text: Var, tau: f64) -> Result<Var> {
    info_nce(tape, image_pos, text, tau)
}

/// Text-to-image: each dialogue against its positive sticker and its own
/// negative stickers. The positive term is kept in the denominator.
pub fn info_nce_t2i(
    tape: &mut Tape,
    text: Var,
    image_pos: Var,
    image_neg: &[Var],
    tau: f64,
) -> Result<Var> {
    let k = batch_size(tape, text)?;
    if image_neg.len() != k || tape.value(image_pos).rows() != k {
        return Err(Error::validation(format!(
            "t2i needs {k} positives and {k} negative sets, got {} and {}",
            tape.value(image_pos).rows(),
            image_neg.len()
        )));
    }
    let mut terms = Vec::with_capacity(k);
    for (i, &neg) in image_neg.iter().enumerate() {
        let t = tape.slice_rows(text, i, 1)?;
        let pos = tape.slice_rows(image_pos, i, 1)?;
        let cands = tape.concat_rows(&[pos, neg])?;
        let logits = tape.matmul_nt(t, cands)?;
        let logits = tape.scale(logits, 1.0 / tau);
        let lp = tape.log_softmax_rows(logits);
        terms.push(tape.slice_cols(lp, 0, 1)?);
    }
    let all = tape.concat_rows(&terms)?;
    let m = tape.mean(all);
    Ok(tape.scale(m, -1.0))
}

/// Row-wise `KL(softmax(p_logits) ‖ softmax(q_logits))` as an `r×1` column.
pub fn kl_rows(tape: &mut Tape, p_logits: Var, q_logits: Var) -> Result<Var> {
    let lp = tape.log_softmax_rows(p_logits);
    let lq = tape.log_softmax_rows(q_logits);
    let p = tape.exp(lp);
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    Ok(tape.row_sums(terms))
}

/// Batch mean of `KL(softmax(E_v_pos) ‖ softmax(E_t))`.
pub fn emotion_align_loss(tape: &mut Tape, image_emotion: Var, text_emotion: Var) -> Result<Var> {
    batch_size(tape, image_emotion)?;
    let kl = kl_rows(tape, image_emotion, text_emotion)?;
    Ok(tape.mean(kl))
}

/// Symmetric InfoNCE between L2-normalized sticker intentions and pooled
/// dialogue intentions.
pub fn intention_align_loss(
    tape: &mut Tape,
    image_intention: Var,
    text_intention: Var,
    tau: f64,
) -> Result<Var> {
    batch_size(tape, image_intention)?;
    let iv = tape.normalize_rows(image_intention)?;
    let it = tape.normalize_rows(text_intention)?;
    let a = info_nce(tape, iv, it, tau)?;
    let b = info_nce(tape, it, iv, tau)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}

/// Inter-modality loss terms; `None` marks an ablated term.
#[derive(Debug, Clone, Copy)]
pub struct InterParts {
    pub i2t: Option<Var>,
    pub t2i: Option<Var>,
    pub emotion: Option<Var>,
    pub intention: Option<Var>,
}

/// `L_I2T + L_T2I + w_e·L_emo + w_i·L_int` over the present terms.
pub fn inter_loss(tape: &mut Tape, parts: &InterParts, w: &AlignmentWeights) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    terms.extend(parts.i2t);
    terms.extend(parts.t2i);
    if let Some(e) = parts.emotion {
        terms.push(tape.scale(e, w.w_e));
    }
    if let Some(i) = parts.intention {
        terms.push(tape.scale(i, w.w_i));
    }
    if terms.is_empty() {
        return Ok(None);
    }
    tape.add_n(&terms).map(Some)
}

/// Two views of `features` under independent dropout masks, each passed
/// through its own projection head.
#[allow(clippy::too_many_arguments)]
pub fn two_view(
    tape: &mut Tape,
    p: &Bound,
    features: Var,
    rate: f64,
    seed_a: u64,
    seed_b: u64,
    head_a: &Linear,
    head_b: &Linear,
) -> Result<(Var, Var)> {
    if seed_a == seed_b {
        return Err(Error::validation("two_view needs distinct seeds for independent views"));
    }
    let (r, c) = tape.value(features).dims2();
    let ma = dropout_mask(r, c, rate, seed_a)?;
    let mb = dropout_mask(r, c, rate, seed_b)?;
    let xa = tape.mul_const(features, ma)?;
    let xb = tape.mul_const(features, mb)?;
    Ok((head_a.forward(tape, p, xa)?, head_b.forward(tape, p, xb)?))
}

/// `½[KL(p1‖p2) + KL(p2‖p1)]` on validated probability vectors.
pub fn symmetric_kl(p1: &[f64], p2: &[f64]) -> Result<f64> {
    Ok(0.5 * (kl_divergence(p1, p2)? + kl_divergence(p2, p1)?))
}

/// Batch mean of the symmetric KL between the softmax of two logit matrices.
pub fn symmetric_kl_logits(tape: &mut Tape, logits_a: Var, logits_b: Var) -> Result<Var> {
    let ab = kl_rows(tape, logits_a, logits_b)?;
    let ba = kl_rows(tape, logits_b, logits_a)?;
    let s = tape.add(ab, ba)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, 0.5))
}

/// `½[L_NCE(z1,z2) + L_NCE(z2,z1)]` with cosine-similarity logits.
pub fn instance_contrastive(tape: &mut Tape, z1: Var, z2: Var, tau: f64) -> Result<Var> {
    batch_size(tape, z1)?;
    let a = tape.normalize_rows(z1)?;
    let b = tape.normalize_rows(z2)?;
    let l12 = info_nce(tape, a, b, tau)?;
    let l21 = info_nce(tape, b, a, tau)?;
    let s = tape.add(l12, l21)?;
    Ok(tape.scale(s, 0.5))
}

/// Intra-modality terms for one modality; `None` marks an ablated term.
#[derive(Debug, Clone, Copy)]
pub struct IntraTerms {
    pub emotion: Option<Var>,
    pub intention: Option<Var>,
    pub contrastive: Var,
}

/// `Σ_m (w_e^m·L_emo^m + w_i^m·L_int^m + L_con^m)` over text and image.
pub fn intra_loss(
    tape: &mut Tape,
    text: &IntraTerms,
    image: &IntraTerms,
    w: &AlignmentWeights,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (m, we, wi) in [(text, w.w_e_t, w.w_i_t), (image, w.w_e_v, w.w_i_v)] {
        if let Some(e) = m.emotion {
            terms.push(tape.scale(e, we));
        }
        if let Some(i) = m.intention {
            terms.push(tape.scale(i, wi));
        }
        terms.push(m.contrastive);
    }
    tape.add_n(&terms)
}
