//! Intention-emotion guided fusion.
//!
//! Knowledge selection refines the per-relation commonsense rows with the
//! gradient of an emotion classifier, guided attention injects the refined
//! knowledge and the dialogue emotion into the text stream through the
//! sticker patches, and the final score mixes the fused match probability
//! with emotion and intention similarities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{multi_head_attention, N_EMOTIONS};
use crate::error::{Error, Result};
use crate::nn::{Bound, ForwardCtx, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::numcore::math::{argmax, validate_distribution};
use crate::numcore::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Step size of the knowledge adjustment.
    pub eta: f64,
    pub n_refine: usize,
    /// Stochastic-depth rate on the fused branch during training.
    pub drop_path_rate: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            n_refine: 3,
            drop_path_rate: 0.1,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("fusion.eta must be >= 0, got {}", self.eta)));
        }
        if self.n_refine == 0 {
            return Err(Error::Config("fusion.n_refine must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!(
                "fusion.drop_path_rate must lie in [0, 1), got {}",
                self.drop_path_rate
            )));
        }
        Ok(())
    }
}

/// Fusion parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fusion {
    /// `f'_emo`: text `[CLS]` (or a knowledge row) → 7 emotion logits.
    pub emo_classifier: Linear,
    /// `f_gate`: `[I_t; I_ke]` → gate logits.
    pub gate: Linear,
    /// Lifts the 7-dim dialogue emotion into the model width.
    pub emotion_lift: Linear,
    pub w_q_ei: ParamId,
    pub w_k_v: ParamId,
    pub w_v_v: ParamId,
    pub w_q_t: ParamId,
    pub ln: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub match_head: Linear,
    pub a_raw: ParamId,
    pub b_raw: ParamId,
    pub n_heads: usize,
}

/// Output of knowledge selection for one dialogue.
#[derive(Debug, Clone)]
pub struct Knowledge {
    /// `I'_t`, relations×d.
    pub refined: Var,
    /// Relation chosen as least emotion-consistent at each refinement step.
    pub selected: Vec<usize>,
}

/// Fused representation for a set of text query rows.
#[derive(Debug, Clone)]
pub struct Fused {
    pub z: Var,
    pub maps: Vec<Var>,
}

impl Fusion {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<R>,
        d: usize,
        n_heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        let h = d * mlp_ratio;
        Self {
            emo_classifier: Linear::new(store, init, "fusion.emo_classifier", d, N_EMOTIONS, true),
            gate: Linear::new(store, init, "fusion.gate", 2 * d, d, true),
            emotion_lift: Linear::new(store, init, "fusion.emotion_lift", N_EMOTIONS, d, true),
            w_q_ei: store.add("fusion.w_q_ei", init.uniform(d, d, d)),
            w_k_v: store.add("fusion.w_k_v", init.uniform(d, d, d)),
            w_v_v: store.add("fusion.w_v_v", init.uniform(d, d, d)),
            w_q_t: store.add("fusion.w_q_t", init.uniform(d, d, d)),
            ln: LayerNorm::new(store, "fusion.ln", d),
            fc1: Linear::new(store, init, "fusion.fc1", d, h, true),
            fc2: Linear::new(store, init, "fusion.fc2", h, d, true),
            match_head: Linear::new(store, init, "fusion.match_head", d, 1, true),
            a_raw: store.add("fusion.a_raw", Tensor::scalar(0.0)),
            b_raw: store.add("fusion.b_raw", Tensor::scalar(0.0)),
            n_heads,
        }
    }

    /// Emotion logits of `x` (rows) and the soft cross-entropy against `e_t`,
    /// averaged over rows.
    pub fn emotion_classify(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        e_t: &[f64],
    ) -> Result<(Var, Var)> {
        validate_distribution(e_t, "e_t")?;
        let logits = self.emo_classifier.forward(tape, p, x)?;
        let rows = tape.value(logits).rows();
        let target = tape.constant(repeat_row(e_t, rows));
        let ls = tape.log_softmax_rows(logits);
        let prod = tape.mul(ls, target)?;
        let per_row = tape.row_sums(prod);
        let m = tape.mean(per_row);
        Ok((logits, tape.scale(m, -1.0)))
    }

    /// Knowledge selection: refine `I_t` by gradient steps on the emotion loss
    /// of its least consistent row, then gate the adjusted rows with the
    /// originals.
    ///
    /// The step is built from tape ops, so `I'_t` stays differentiable with
    /// respect to every input and to the classifier.
    pub fn select_knowledge(
        &self,
        tape: &mut Tape,
        p: &Bound,
        i_t: Var,
        e_t: &[f64],
        cfg: &FusionConfig,
    ) -> Result<Knowledge> {
        let (i_ke, selected) = self.knowledge_adjust(tape, p, i_t, e_t, cfg.eta, cfg.n_refine)?;
        let refined = self.gate_fuse(tape, p, i_t, i_ke)?;
        Ok(Knowledge { refined, selected })
    }

    /// `I_ke = I_t + δ` with `δ = −eta · mean_k g_k`, where `g_k` is the
    /// gradient of the emotion loss at the selected row of the current
    /// refinement. The same `δ` is added to every row.
    pub fn knowledge_adjust(
        &self,
        tape: &mut Tape,
        p: &Bound,
        i_t: Var,
        e_t: &[f64],
        eta: f64,
        n_refine: usize,
    ) -> Result<(Var, Vec<usize>)> {
        validate_distribution(e_t, "e_t")?;
        if n_refine == 0 {
            return Err(Error::Config("n_refine must be >= 1".into()));
        }
        let rows = tape.value(i_t).rows();
        let w = p.var(self.emo_classifier.w);
        let target = tape.constant(repeat_row(e_t, rows));
        let mut cur = i_t;
        let mut steps = Vec::with_capacity(n_refine);
        let mut selected = Vec::with_capacity(n_refine);
        for _ in 0..n_refine {
            let logits = self.emo_classifier.forward(tape, p, cur)?;
            let losses = row_cross_entropy(tape.value(logits), e_t);
            let r = select_irrelevant(&losses);
            selected.push(r);
            // d/dx of −Σ e·log softmax(xW + b) is (softmax(xW + b) − e)·Wᵀ
            let probs = tape.softmax_rows(logits);
            let resid = tape.sub(probs, target)?;
            let grads = tape.matmul_nt(resid, w)?;
            let g = tape.slice_rows(grads, r, 1)?;
            let step = tape.scale(g, -eta);
            cur = tape.add_row(cur, step)?;
            steps.push(g);
        }
        let total = tape.add_n(&steps)?;
        let delta = tape.scale(total, -eta / n_refine as f64);
        Ok((tape.add_row(i_t, delta)?, selected))
    }

    /// `I'_t = w ⊙ I_ke + (1 − w) ⊙ I_t` with `w = σ(f_gate([I_t; I_ke]))`.
    pub fn gate_fuse(&self, tape: &mut Tape, p: &Bound, i_t: Var, i_ke: Var) -> Result<Var> {
        if tape.value(i_t).shape() != tape.value(i_ke).shape() {
            return Err(Error::Shape {
                op: "gate_fuse",
                lhs: tape.value(i_t).shape().to_vec(),
                rhs: tape.value(i_ke).shape().to_vec(),
            });
        }
        let both = tape.concat_cols(&[i_t, i_ke])?;
        let logits = self.gate.forward(tape, p, both)?;
        let wk = tape.sigmoid(logits);
        let rest = tape.one_minus(wk);
        let a = tape.mul(wk, i_ke)?;
        let b = tape.mul(rest, i_t)?;
        tape.add(a, b)
    }

    /// `E_IT`: knowledge rows followed by the lifted dialogue emotion. Either
    /// part may be absent, but not both.
    pub fn guidance(
        &self,
        tape: &mut Tape,
        p: &Bound,
        knowledge: Option<Var>,
        text_emotion: Option<Var>,
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(2);
        rows.extend(knowledge);
        if let Some(e) = text_emotion {
            rows.push(self.emotion_lift.forward(tape, p, e)?);
        }
        match rows.len() {
            0 => Err(Error::validation("guided fusion needs knowledge or emotion rows")),
            1 => Ok(rows[0]),
            _ => tape.concat_rows(&rows),
        }
    }

    /// Guided attention: the guidance rows attend over the sticker patches,
    /// then the text queries attend over the guidance rows and read their
    /// knowledge-aware visual values.
    pub fn iega_fuse(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ctx: &mut ForwardCtx,
        f_v: Var,
        f_t: Var,
        e_it: Var,
    ) -> Result<Fused> {
        let q_ei = tape.matmul(e_it, p.var(self.w_q_ei))?;
        let k_v = tape.matmul(f_v, p.var(self.w_k_v))?;
        let v_v = tape.matmul(f_v, p.var(self.w_v_v))?;
        let stage1 = multi_head_attention(tape, q_ei, k_v, v_v, self.n_heads)?;
        let q_t = tape.matmul(f_t, p.var(self.w_q_t))?;
        let stage2 = multi_head_attention(tape, q_t, q_ei, stage1.out, self.n_heads)?;
        let z = self.finish(tape, p, ctx, f_t, stage2.out)?;
        let mut maps = stage1.maps;
        maps.extend(stage2.maps);
        Ok(Fused { z, maps })
    }

    /// Plain fusion: text queries attend over the joint text and patch
    /// sequence, with the same residual, norm and MLP.
    pub fn self_attention_fuse(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ctx: &mut ForwardCtx,
        f_v: Var,
        f_t_all: Var,
        f_t: Var,
    ) -> Result<Fused> {
        let joint = tape.concat_rows(&[f_t_all, f_v])?;
        let q = tape.matmul(f_t, p.var(self.w_q_t))?;
        let k = tape.matmul(joint, p.var(self.w_k_v))?;
        let v = tape.matmul(joint, p.var(self.w_v_v))?;
        let att = multi_head_attention(tape, q, k, v, self.n_heads)?;
        let z = self.finish(tape, p, ctx, f_t, att.out)?;
        Ok(Fused { z, maps: att.maps })
    }

    /// `Z = LN(F_t + SD(E)); Z_fuse = Z + MLP(Z)`.
    fn finish(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ctx: &mut ForwardCtx,
        f_t: Var,
        e_fuse: Var,
    ) -> Result<Var> {
        let e = ctx.drop_path(tape, e_fuse)?;
        let r = tape.add(f_t, e)?;
        let z = self.ln.forward(tape, p, r)?;
        let h = self.fc1.forward(tape, p, z)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, p, h)?;
        tape.add(z, h)
    }

    /// `p_vl = σ(linear(Z_fuse[CLS]))`, `1×1`.
    pub fn predict_pvl(&self, tape: &mut Tape, p: &Bound, z_fuse: Var) -> Result<Var> {
        let cls = tape.slice_rows(z_fuse, 0, 1)?;
        let logit = self.match_head.forward(tape, p, cls)?;
        Ok(tape.sigmoid(logit))
    }

    pub fn alpha(&self, tape: &mut Tape, p: &Bound) -> Var {
        tape.sigmoid(p.var(self.a_raw))
    }

    pub fn beta(&self, tape: &mut Tape, p: &Bound) -> Var {
        tape.sigmoid(p.var(self.b_raw))
    }
}

fn repeat_row(row: &[f64], n: usize) -> Tensor {
    Tensor::matrix(n, row.len(), row.repeat(n))
}

/// Per-row `−Σ e·log softmax(logits)` computed on values.
pub fn row_cross_entropy(logits: &Tensor, e_t: &[f64]) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            -row.iter().zip(e_t).map(|(z, e)| e * (z - lse)).sum::<f64>()
        })
        .collect()
}

/// Index of the largest per-relation emotion loss; ties go to the lowest.
pub fn select_irrelevant(losses: &[f64]) -> usize {
    argmax(losses)
}

/// `(1 + cos(a, b)) / 2` per row, `r×1`.
pub fn normalized_cosine(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let c = tape.cosine_rows(a, b)?;
    let c = tape.add_scalar(c, 1.0);
    Ok(tape.scale(c, 0.5))
}

/// `(s_emo, s_int)` from the dialogue and sticker emotion and intention
/// vectors; the dialogue intention is mean-pooled over relations first.
pub fn samm_similarities(
    tape: &mut Tape,
    e_t: Var,
    e_v: Var,
    i_t: Var,
    i_v: Var,
) -> Result<(Var, Var)> {
    let pooled = tape.mean_over_rows(i_t);
    Ok((normalized_cosine(tape, e_t, e_v)?, normalized_cosine(tape, pooled, i_v)?))
}

/// `α·a + (1 − α)·b` for `1×1` operands.
pub fn convex_mix(tape: &mut Tape, a: Var, b: Var, weight: Var) -> Result<Var> {
    let wa = tape.mul(weight, a)?;
    let rest = tape.one_minus(weight);
    let wb = tape.mul(rest, b)?;
    tape.add(wa, wb)
}

/// `s_EI = α·s_emo + (1 − α)·s_int`.
pub fn samm_combine(tape: &mut Tape, s_emo: Var, s_int: Var, alpha: Var) -> Result<Var> {
    convex_mix(tape, s_emo, s_int, alpha)
}

/// `p_final = β·p_vl + (1 − β)·s_EI`.
pub fn final_score(tape: &mut Tape, p_vl: Var, s_ei: Var, beta: Var) -> Result<Var> {
    convex_mix(tape, p_vl, s_ei, beta)
}
