use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Block, EncoderConfig, RELATIONS};
use crate::error::{Error, Result};
use crate::nn::{Bound, ForwardCtx, Init, LayerNorm, ParamId, ParamStore};
use crate::numcore::{Tape, Var};

/// Token + learned positional embeddings, a `[CLS]` slot, and a stack of
/// transformer blocks. Shared by dialogues and commonsense sequences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEncoder {
    tokens: ParamId,
    positions: ParamId,
    cls: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    vocab_size: usize,
    max_len: usize,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, init: &mut Init<R>, cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        let tokens = store.add("text.tokens", init.uniform(cfg.vocab_size, d, d));
        let positions = store.add("text.positions", init.uniform(cfg.max_text_len + 1, d, d));
        let cls = store.add("text.cls", init.uniform(1, d, d));
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                Block::new(
                    store,
                    init,
                    &format!("text.block{i}"),
                    d,
                    cfg.n_heads,
                    d * cfg.mlp_ratio,
                )
            })
            .collect();
        Self {
            tokens,
            positions,
            cls,
            blocks,
            ln_final: LayerNorm::new(store, "text.ln_final", d),
            vocab_size: cfg.vocab_size,
            max_len: cfg.max_text_len,
        }
    }

    /// Encodes a token sequence to `(len+1)×d`; row 0 is `[CLS]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ctx: &mut ForwardCtx,
        ids: &[usize],
    ) -> Result<Var> {
        self.check_ids(ids)?;
        self.encode_stacked(tape, p, ctx, &[ids])
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.len() > self.max_len {
            return Err(Error::validation(format!(
                "sequence of {} tokens exceeds max_text_len {}",
                ids.len(),
                self.max_len
            )));
        }
        if let Some(bad) = ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::validation(format!(
                "token id {bad} is out of vocabulary (size {})",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Encodes equal-length sequences together, returning their
    /// `(len+1)×d` encodings stacked in input order.
    fn encode_stacked(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ctx: &mut ForwardCtx,
        seqs: &[&[usize]],
    ) -> Result<Var> {
        let len = seqs[0].len() + 1;
        let cls = p.var(self.cls);
        let mut parts = Vec::with_capacity(seqs.len());
        for ids in seqs {
            debug_assert_eq!(ids.len() + 1, len);
            parts.push(cls);
            if !ids.is_empty() {
                parts.push(tape.gather_rows(p.var(self.tokens), ids)?);
            }
        }
        let x = tape.concat_rows(&parts)?;
        let idx: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
        let pos = tape.gather_rows(p.var(self.positions), &idx)?;
        let mut x = tape.add(x, pos)?;
        x = ctx.dropout(tape, x)?;
        for block in &self.blocks {
            x = block.forward(tape, p, ctx, x, len)?;
        }
        self.ln_final.forward(tape, p, x)
    }

    /// Encodes one sequence per commonsense relation and stacks their
    /// `[CLS]` rows into a `relations×d` matrix, in input order.
    pub fn encode_intention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ctx: &mut ForwardCtx,
        sequences: &[Vec<usize>],
    ) -> Result<Var> {
        if sequences.len() != RELATIONS.len() {
            return Err(Error::validation(format!(
                "expected {} relation sequences, got {}",
                RELATIONS.len(),
                sequences.len()
            )));
        }
        for (rel, seq) in RELATIONS.iter().zip(sequences) {
            if seq.is_empty() {
                return Err(Error::validation(format!("empty {rel} sequence")));
            }
        }
        let len = sequences[0].len();
        if sequences.iter().all(|s| s.len() == len) {
            for s in sequences {
                self.check_ids(s)?;
            }
            let seqs: Vec<&[usize]> = sequences.iter().map(Vec::as_slice).collect();
            let enc = self.encode_stacked(tape, p, ctx, &seqs)?;
            let idx: Vec<usize> = (0..seqs.len()).map(|i| i * (len + 1)).collect();
            return tape.gather_rows(enc, &idx);
        }
        let mut rows = Vec::with_capacity(sequences.len());
        for seq in sequences {
            let enc = self.encode(tape, p, ctx, seq)?;
            rows.push(tape.slice_rows(enc, 0, 1)?);
        }
        tape.concat_rows(&rows)
    }
}
