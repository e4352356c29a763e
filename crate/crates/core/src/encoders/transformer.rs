use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, ForwardCtx, Init, LayerNorm, Linear, ParamStore};
use crate::numcore::{Tape, Var};

/// Attention result plus one row-stochastic map per head.
#[derive(Debug, Clone)]
pub struct Attention {
    pub out: Var,
    pub maps: Vec<Var>,
}

/// Scaled dot-product attention split over `n_heads` column blocks.
///
/// `q: Lq×d`, `k: Lk×d`, `v: Lk×d`; returns `Lq×d` with heads concatenated.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
) -> Result<Attention> {
    let d = tape.value(q).cols();
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "width {d} is not divisible by {n_heads} heads"
        )));
    }
    let d_head = d / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut maps = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * d_head, d_head)?,
                tape.slice_cols(k, h * d_head, d_head)?,
                tape.slice_cols(v, h * d_head, d_head)?,
            )
        };
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, vh)?);
        maps.push(attn);
    }
    let out = if n_heads == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    Ok(Attention { out, maps })
}

/// Pre-norm transformer block: self-attention then a GELU MLP, each residual.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    ln1: LayerNorm,
    wq: Linear,
    // no bias: a per-key offset cancels in the row softmax
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    n_heads: usize,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        init: &mut Init<R>,
        name: &str,
        d: usize,
        n_heads: usize,
        d_hidden: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            wq: Linear::new(store, init, &format!("{name}.wq"), d, d, true),
            wk: Linear::new(store, init, &format!("{name}.wk"), d, d, false),
            wv: Linear::new(store, init, &format!("{name}.wv"), d, d, true),
            wo: Linear::new(store, init, &format!("{name}.wo"), d, d, true),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, init, &format!("{name}.fc1"), d, d_hidden, true),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), d_hidden, d, true),
            n_heads,
        }
    }

    /// Runs the block over `x`, a stack of independent sequences of
    /// `seq_len` rows each; attention never crosses sequence boundaries.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ctx: &mut ForwardCtx,
        x: Var,
        seq_len: usize,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let q = self.wq.forward(tape, p, h)?;
        let k = self.wk.forward(tape, p, h)?;
        let v = self.wv.forward(tape, p, h)?;
        let att = tape.block_attention(q, k, v, seq_len, self.n_heads)?;
        let o = self.wo.forward(tape, p, att)?;
        let o = ctx.dropout(tape, o)?;
        let x = tape.add(x, o)?;

        let h = self.ln2.forward(tape, p, x)?;
        let m = self.fc1.forward(tape, p, h)?;
        let m = tape.gelu(m);
        let m = self.fc2.forward(tape, p, m)?;
        let m = ctx.dropout(tape, m)?;
        tape.add(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn zero_queries_average_values_uniformly() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(2, 4));
        let k = tape.constant(Tensor::matrix(3, 4, (0..12).map(f64::from).collect()));
        let v = tape.constant(Tensor::matrix(3, 4, (0..12).map(|i| f64::from(i * i)).collect()));
        let att = multi_head_attention(&mut tape, q, k, v, 2).unwrap();
        let vv = tape.value(v).clone();
        for c in 0..4 {
            let mean = (0..3).map(|r| vv.get(r, c)).sum::<f64>() / 3.0;
            for r in 0..2 {
                assert!((tape.value(att.out).get(r, c) - mean).abs() < 1e-12);
            }
        }
        assert_eq!(att.maps.len(), 2);
    }

    #[test]
    fn block_attention_matches_per_block_attention() {
        let mut tape = Tape::new();
        let mut rng = crate::numcore::stream(3, &[]);
        let mut rand = |r, c| {
            use rand::Rng;
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let (q, k, v) = (rand(6, 4), rand(6, 4), rand(6, 4));
        let (q, k, v) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let fused = tape.block_attention(q, k, v, 3, 2).unwrap();
        for b in 0..2 {
            let qb = tape.slice_rows(q, 3 * b, 3).unwrap();
            let kb = tape.slice_rows(k, 3 * b, 3).unwrap();
            let vb = tape.slice_rows(v, 3 * b, 3).unwrap();
            let att = multi_head_attention(&mut tape, qb, kb, vb, 2).unwrap();
            let want = tape.value(att.out).clone();
            for r in 0..3 {
                for c in 0..4 {
                    let got = tape.value(fused).get(3 * b + r, c);
                    assert!((got - want.get(r, c)).abs() < 1e-14);
                }
            }
        }
        assert!(tape.block_attention(q, k, v, 4, 2).is_err());
        assert!(matches!(tape.block_attention(q, k, v, 3, 3), Err(Error::Config(_))));
    }

    #[test]
    fn block_attention_gradients_match_finite_differences() {
        use crate::numcore::{grad_check, GradCheckOptions, TapeObjective};
        let mut rng = crate::numcore::stream(5, &[]);
        let params: Vec<Tensor> = (0..4)
            .map(|_| {
                use rand::Rng;
                Tensor::matrix(6, 4, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect())
            })
            .collect();
        let mut obj = TapeObjective(|t: &mut Tape, v: &[Var]| {
            let o = t.block_attention(v[0], v[1], v[2], 2, 2)?;
            let o = t.mul(o, v[3])?;
            Ok(t.sum(o))
        });
        let names: Vec<String> = ["q", "k", "v", "w"].map(String::from).to_vec();
        let r = grad_check(&mut obj, &names, &params, &GradCheckOptions::default()).unwrap();
        assert!(r.passed(1e-7), "{:?}", r.worst());
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(1, 6));
        assert!(matches!(
            multi_head_attention(&mut tape, q, q, q, 4),
            Err(Error::Config(_))
        ));
    }
}
