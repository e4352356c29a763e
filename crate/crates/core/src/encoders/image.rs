use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{Block, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Bound, ForwardCtx, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::numcore::{Tape, Tensor, Var};

/// Linear patch embedding, `[CLS]` slot, positional table and transformer
/// blocks over a `patch_grid² × patch_dim` sticker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEncoder {
    patch: Linear,
    positions: ParamId,
    cls: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    n_patches: usize,
    patch_dim: usize,
}

impl ImageEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, init: &mut Init<R>, cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        let patch = Linear::new(store, init, "image.patch", cfg.patch_dim, d, true);
        let positions = store.add("image.positions", init.uniform(cfg.n_patches() + 1, d, d));
        let cls = store.add("image.cls", init.uniform(1, d, d));
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                Block::new(
                    store,
                    init,
                    &format!("image.block{i}"),
                    d,
                    cfg.n_heads,
                    d * cfg.mlp_ratio,
                )
            })
            .collect();
        Self {
            patch,
            positions,
            cls,
            blocks,
            ln_final: LayerNorm::new(store, "image.ln_final", d),
            n_patches: cfg.n_patches(),
            patch_dim: cfg.patch_dim,
        }
    }

    /// Checks a pixel array against the configured patch geometry.
    pub fn check_pixels(&self, pixels: &Tensor) -> Result<()> {
        if pixels.dims2() != (self.n_patches, self.patch_dim) {
            return Err(Error::validation(format!(
                "image of shape {:?} does not match {}x{} patches",
                pixels.shape(),
                self.n_patches,
                self.patch_dim
            )));
        }
        Ok(())
    }

    /// Encodes pixels already placed on the tape to `(P+1)×d`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ctx: &mut ForwardCtx,
        pixels: Var,
    ) -> Result<Var> {
        self.check_pixels(tape.value(pixels))?;
        self.encode_stacked(tape, p, ctx, pixels)
    }

    /// Encodes `B` stickers given as one `(B·P)×patch_dim` stack of patches,
    /// returning their `(P+1)×d` encodings stacked in the same order.
    pub fn encode_stacked(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ctx: &mut ForwardCtx,
        pixels: Var,
    ) -> Result<Var> {
        let (rows, cols) = tape.value(pixels).dims2();
        if cols != self.patch_dim || rows == 0 || rows % self.n_patches != 0 {
            return Err(Error::validation(format!(
                "patch stack of shape {:?} does not split into {}x{} stickers",
                tape.value(pixels).shape(),
                self.n_patches,
                self.patch_dim
            )));
        }
        let n = rows / self.n_patches;
        let len = self.n_patches + 1;
        let emb = self.patch.forward(tape, p, pixels)?;
        let with_cls = tape.concat_rows(&[p.var(self.cls), emb])?;
        // row 0 of `with_cls` is [CLS]; sticker b's patches start at 1 + b·P
        let order: Vec<usize> = (0..n)
            .flat_map(|b| std::iter::once(0).chain(1 + b * self.n_patches..1 + (b + 1) * self.n_patches))
            .collect();
        let x = tape.gather_rows(with_cls, &order)?;
        let pos_idx: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
        let pos = tape.gather_rows(p.var(self.positions), &pos_idx)?;
        let mut x = tape.add(x, pos)?;
        x = ctx.dropout(tape, x)?;
        for block in &self.blocks {
            x = block.forward(tape, p, ctx, x, len)?;
        }
        self.ln_final.forward(tape, p, x)
    }

    /// Rows per encoded sticker: `[CLS]` plus one per patch.
    pub fn seq_len(&self) -> usize {
        self.n_patches + 1
    }
}
