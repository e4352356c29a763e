use serde::{Deserialize, Serialize};

use crate::alignment::{inter_loss, intra_loss, AlignmentWeights};
use crate::error::{Error, Result};
use crate::model::BatchForward;
use crate::numcore::{Tape, Tensor, Var};

/// Probabilities are clamped to `[BCE_EPS, 1 − BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy over every candidate slot.
pub fn matching_loss(tape: &mut Tape, scores: Var, labels: &[f64]) -> Result<Var> {
    let n = tape.value(scores).numel();
    if n != labels.len() || n == 0 {
        return Err(Error::validation(format!(
            "{n} scores for {} labels",
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::validation("labels must be 0 or 1"));
    }
    let s = tape.reshape(scores, vec![n, 1])?;
    let s = tape.clamp(s, BCE_EPS, 1.0 - BCE_EPS);
    let y = tape.constant(Tensor::matrix(n, 1, labels.to_vec()));
    let not_y = tape.constant(Tensor::matrix(n, 1, labels.iter().map(|v| 1.0 - v).collect()));
    let log_p = tape.ln(s)?;
    let rest = tape.one_minus(s);
    let log_q = tape.ln(rest)?;
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let ll = tape.add(a, b)?;
    let m = tape.mean(ll);
    Ok(tape.scale(m, -1.0))
}

/// Weighted loss components of one batch. `total` is the sum of the four
/// weighted terms; the remaining fields are unweighted sub-terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub itm: f64,
    pub inter: f64,
    pub intra: f64,
    pub knowledge: f64,
    pub i2t: f64,
    pub t2i: f64,
    pub inter_emotion: f64,
    pub inter_intention: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self) -> f64 {
        self.itm + self.inter + self.intra + self.knowledge
    }
}

/// `L_itm + L_inter + L_intra + w'·L'_emo` over the active components.
pub fn total_loss(
    tape: &mut Tape,
    fwd: &BatchForward,
    weights: &AlignmentWeights,
    w_knowledge: f64,
) -> Result<(Var, LossBreakdown)> {
    let mut b = LossBreakdown::default();
    let itm = matching_loss(tape, fwd.scores, &fwd.labels)?;
    let mut terms = vec![itm];
    b.itm = tape.scalar(itm);
    if let Some(inter) = inter_loss(tape, &fwd.inter, weights)? {
        terms.push(inter);
        b.inter = tape.scalar(inter);
    }
    let opt = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    b.i2t = opt(tape, fwd.inter.i2t);
    b.t2i = opt(tape, fwd.inter.t2i);
    b.inter_emotion = opt(tape, fwd.inter.emotion);
    b.inter_intention = opt(tape, fwd.inter.intention);
    if let Some((text, image)) = &fwd.intra {
        let intra = intra_loss(tape, text, image, weights)?;
        terms.push(intra);
        b.intra = tape.scalar(intra);
    }
    if let Some(k) = fwd.knowledge_emotion {
        let k = tape.scale(k, w_knowledge);
        terms.push(k);
        b.knowledge = tape.scalar(k);
    }
    let total = tape.add_n(&terms)?;
    b.total = tape.scalar(total);
    for (name, v) in [
        ("matching", b.itm),
        ("inter-modality", b.inter),
        ("intra-modality", b.intra),
        ("knowledge emotion", b.knowledge),
        ("total", b.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    Ok((total, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_closed_forms() {
        let mut t = Tape::new();
        let half = t.constant(Tensor::matrix(4, 1, vec![0.5; 4]));
        let l = matching_loss(&mut t, half, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-15);

        let perfect = t.constant(Tensor::matrix(3, 1, vec![1.0, 0.0, 0.0]));
        let l = matching_loss(&mut t, perfect, &[1.0, 0.0, 0.0]).unwrap();
        assert!(t.scalar(l) > 0.0 && t.scalar(l) < 1e-6);

        assert!(matching_loss(&mut t, perfect, &[1.0, 0.0]).is_err());
        assert!(matching_loss(&mut t, perfect, &[1.0, 0.5, 0.0]).is_err());
    }
}
