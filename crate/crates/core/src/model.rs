//! The full sticker selection model: encoders, alignment inputs, guided
//! fusion and scoring, switchable component by component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    emotion_align_loss, info_nce_i2t, info_nce_t2i, instance_contrastive, intention_align_loss,
    symmetric_kl_logits, two_view, AlignmentWeights, InterParts, IntraTerms,
};
use crate::data::DialogueSample;
use crate::encoders::{project_cls, text_emotion_embed, EncoderConfig, Heads, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::fusion::{final_score, normalized_cosine, samm_combine, Fusion, FusionConfig};
use crate::nn::{Bound, ForwardCtx, Init, Linear, ParamStore};
use crate::numcore::{mix_seed, Tape, Tensor, Var};

/// Which model components are active. `true` keeps a component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    /// Emotion inputs, heads, losses and similarity.
    pub emotion: bool,
    /// Commonsense knowledge, intention heads, losses and similarity.
    pub intention: bool,
    /// Cross-modal emotion and intention alignment.
    pub inter: bool,
    /// Two-view consistency within each modality.
    pub intra: bool,
    /// Knowledge selection and its emotion classification loss.
    pub eiks: bool,
    /// Guided attention; plain self-attention fusion when off.
    pub iega: bool,
    /// Similarity-adjusted scoring; the score is `p_vl` when off.
    pub samm: bool,
    /// Dialogue/sticker InfoNCE in both directions.
    pub semantic_alignment: bool,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationSpec {
    pub fn full() -> Self {
        Self {
            emotion: true,
            intention: true,
            inter: true,
            intra: true,
            eiks: true,
            iega: true,
            samm: true,
            semantic_alignment: true,
        }
    }

    /// Semantic matching only: BCE on `p_vl` with plain fusion.
    pub fn base() -> Self {
        Self {
            emotion: false,
            intention: false,
            inter: false,
            intra: false,
            eiks: false,
            iega: false,
            samm: false,
            semantic_alignment: false,
        }
    }

    pub fn without_emotion() -> Self {
        Self { emotion: false, eiks: false, ..Self::full() }
    }

    pub fn without_intention() -> Self {
        Self { intention: false, eiks: false, ..Self::full() }
    }

    /// Removes cross-modal emotion/intention alignment and, with it, the
    /// similarity-adjusted score.
    pub fn without_inter() -> Self {
        Self { inter: false, samm: false, ..Self::full() }
    }

    pub fn without_intra() -> Self {
        Self { intra: false, ..Self::full() }
    }

    pub fn without_eiks() -> Self {
        Self { eiks: false, ..Self::full() }
    }

    pub fn without_iega() -> Self {
        Self { iega: false, ..Self::full() }
    }

    pub fn without_samm() -> Self {
        Self { samm: false, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.inter && self.samm {
            return Err(Error::validation(
                "similarity-adjusted scoring requires inter-modality alignment",
            ));
        }
        if self.eiks && !(self.emotion && self.intention) {
            return Err(Error::validation(
                "knowledge selection needs both emotion and intention inputs",
            ));
        }
        Ok(())
    }

    /// Compact flag vector, one character per component.
    pub fn key(&self) -> String {
        [
            self.emotion,
            self.intention,
            self.inter,
            self.intra,
            self.eiks,
            self.iega,
            self.samm,
            self.semantic_alignment,
        ]
        .iter()
        .map(|&b| if b { '1' } else { '0' })
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub alignment: AlignmentWeights,
    pub fusion: FusionConfig,
    pub ablation: AblationSpec,
}


impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.alignment.validate()?;
        self.fusion.validate()?;
        self.ablation.validate()
    }
}

/// Per-view projection heads for the two-view consistency losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewHeads {
    pub text: [Linear; 2],
    pub image: [Linear; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StickerModel {
    pub cfg: ModelConfig,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub heads: Heads,
    pub fusion: Fusion,
    pub views: ViewHeads,
}

/// Tape handles produced by a batch forward pass.
#[derive(Debug, Clone)]
pub struct BatchForward {
    /// `p_final` of every candidate, batch-major, as an `n×1` column.
    pub scores: Var,
    pub labels: Vec<f64>,
    pub inter: InterParts,
    pub intra: Option<(IntraTerms, IntraTerms)>,
    /// Batch mean of the knowledge-selection emotion loss.
    pub knowledge_emotion: Option<Var>,
}

/// Inference output for one slate.
#[derive(Debug, Clone, PartialEq)]
pub struct SlateScores {
    pub p_final: Vec<f64>,
    pub p_vl: Vec<f64>,
    /// Fused `[CLS]` representation of every candidate.
    pub fused: Vec<Vec<f64>>,
}

struct SampleForward {
    text_proj: Var,
    text_cls: Var,
    text_emotion: Option<Var>,
    knowledge: Option<Var>,
    knowledge_emotion: Option<Var>,
    image_proj: Vec<Var>,
    image_cls_pos: Var,
    image_emotion_pos: Option<Var>,
    image_intention_pos: Option<Var>,
    p_final: Vec<Var>,
    p_vl: Vec<Var>,
    fused: Vec<Var>,
}

impl StickerModel {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let e = &cfg.encoder;
        let d = e.d_model;
        let text = TextEncoder::new(&mut store, &mut init, e);
        let image = ImageEncoder::new(&mut store, &mut init, e);
        let heads = Heads::new(&mut store, &mut init, d);
        let fusion = Fusion::new(&mut store, &mut init, d, e.n_heads, e.mlp_ratio);
        let view = |store: &mut ParamStore, init: &mut Init<ChaCha8Rng>, name: &str| {
            Linear::new(store, init, name, d, d, true)
        };
        let views = ViewHeads {
            text: [
                view(&mut store, &mut init, "views.text0"),
                view(&mut store, &mut init, "views.text1"),
            ],
            image: [
                view(&mut store, &mut init, "views.image0"),
                view(&mut store, &mut init, "views.image1"),
            ],
        };
        Ok((
            Self {
                cfg,
                text,
                image,
                heads,
                fusion,
                views,
            },
            store,
        ))
    }

    pub fn ablation(&self) -> &AblationSpec {
        &self.cfg.ablation
    }

    /// Rejects samples whose geometry or vocabulary the encoders cannot take.
    pub fn check_compatible(&self, samples: &[DialogueSample]) -> Result<()> {
        let e = &self.cfg.encoder;
        let pixel_len = e.n_patches() * e.patch_dim;
        for s in samples {
            let bad_pixels = s.candidates.iter().any(|c| c.pixels.len() != pixel_len);
            let too_long = s.token_ids.len() > e.max_text_len
                || s.comet_sequences.iter().any(|q| q.len() > e.max_text_len);
            let oov = s
                .token_ids
                .iter()
                .chain(s.comet_sequences.iter().flatten())
                .any(|&t| t >= e.vocab_size);
            if bad_pixels || too_long || oov {
                return Err(Error::Config(format!(
                    "sample {} does not fit the encoder (pixels {}, expected {pixel_len}; \
                     max length {}; vocab {})",
                    s.sample_id,
                    s.candidates.first().map_or(0, |c| c.pixels.len()),
                    e.max_text_len,
                    e.vocab_size
                )));
            }
        }
        Ok(())
    }

    fn sample_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ctx: &mut ForwardCtx,
        s: &DialogueSample,
    ) -> Result<SampleForward> {
        let a = &self.cfg.ablation;
        let f_t = self.text.encode(tape, p, ctx, &s.token_ids)?;
        let text_cls = tape.slice_rows(f_t, 0, 1)?;
        let text_proj = project_cls(tape, text_cls, p.var(self.heads.proj_text))?;

        let text_emotion = if a.emotion {
            Some(text_emotion_embed(tape, &s.e_t, p.var(self.heads.emotion_table))?)
        } else {
            None
        };
        let mut knowledge_emotion = None;
        let knowledge = if a.intention {
            let i_t = self.text.encode_intention(tape, p, ctx, &s.comet_sequences)?;
            if a.eiks {
                let (_, l) = self.fusion.emotion_classify(tape, p, text_cls, &s.e_t)?;
                knowledge_emotion = Some(l);
                let k = self
                    .fusion
                    .select_knowledge(tape, p, i_t, &s.e_t, &self.cfg.fusion)?;
                Some(k.refined)
            } else {
                Some(i_t)
            }
        } else {
            None
        };
        let guidance = if a.iega && (knowledge.is_some() || text_emotion.is_some()) {
            Some(self.fusion.guidance(tape, p, knowledge, text_emotion)?)
        } else {
            None
        };
        let (alpha, beta) = if a.samm {
            (Some(self.fusion.alpha(tape, p)), Some(self.fusion.beta(tape, p)))
        } else {
            (None, None)
        };

        let pooled_knowledge = match (a.samm, knowledge) {
            (true, Some(k)) => Some(tape.mean_over_rows(k)),
            _ => None,
        };
        let pos = s.positive();
        let n = s.candidates.len();
        let mut image_proj = Vec::with_capacity(n);
        let (mut p_final, mut p_vl, mut fused) =
            (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let mut image_cls_pos = None;
        let mut image_emotion_pos = None;
        let mut image_intention_pos = None;
        let stacked: Vec<f64> = s.candidates.iter().flat_map(|c| c.pixels.iter().copied()).collect();
        let e = &self.cfg.encoder;
        let px = tape.constant(Tensor::matrix(n * e.n_patches(), e.patch_dim, stacked));
        let f_all = self.image.encode_stacked(tape, p, ctx, px)?;
        let len = self.image.seq_len();
        let cls_idx: Vec<usize> = (0..n).map(|j| j * len).collect();
        let v_cls_all = tape.gather_rows(f_all, &cls_idx)?;
        let proj_all = project_cls(tape, v_cls_all, p.var(self.heads.proj_image))?;
        let e_v_all = if a.emotion {
            Some(self.heads.emotion_visual(tape, p, v_cls_all)?)
        } else {
            None
        };
        let i_v_all = if a.intention {
            Some(self.heads.intention_visual(tape, p, v_cls_all)?)
        } else {
            None
        };
        let row = |tape: &mut Tape, all: Option<Var>, j: usize| -> Result<Option<Var>> {
            all.map(|m| tape.slice_rows(m, j, 1)).transpose()
        };
        for j in 0..n {
            let f_v = tape.slice_rows(f_all, j * len, len)?;
            let v_cls = tape.slice_rows(v_cls_all, j, 1)?;
            image_proj.push(tape.slice_rows(proj_all, j, 1)?);
            let e_v = row(tape, e_v_all, j)?;
            let i_v = row(tape, i_v_all, j)?;
            if j == pos {
                image_cls_pos = Some(v_cls);
                image_emotion_pos = e_v;
                image_intention_pos = i_v;
            }

            let z = match guidance {
                Some(g) => self.fusion.iega_fuse(tape, p, ctx, f_v, text_cls, g)?,
                None => self
                    .fusion
                    .self_attention_fuse(tape, p, ctx, f_v, f_t, text_cls)?,
            };
            let pvl = self.fusion.predict_pvl(tape, p, z.z)?;
            let score = match (alpha, beta) {
                (Some(alpha), Some(beta)) => {
                    let s_emo = match (text_emotion, e_v) {
                        (Some(et), Some(ev)) => Some(normalized_cosine(tape, et, ev)?),
                        _ => None,
                    };
                    let s_int = match (pooled_knowledge, i_v) {
                        (Some(kt), Some(iv)) => Some(normalized_cosine(tape, kt, iv)?),
                        _ => None,
                    };
                    let s_ei = match (s_emo, s_int) {
                        (Some(se), Some(si)) => Some(samm_combine(tape, se, si, alpha)?),
                        (one, other) => one.or(other),
                    };
                    match s_ei {
                        Some(sei) => final_score(tape, pvl, sei, beta)?,
                        None => pvl,
                    }
                }
                _ => pvl,
            };
            p_final.push(score);
            p_vl.push(pvl);
            fused.push(z.z);
        }
        Ok(SampleForward {
            text_proj,
            text_cls,
            text_emotion,
            knowledge,
            knowledge_emotion,
            image_proj,
            image_cls_pos: image_cls_pos.expect("one positive"),
            image_emotion_pos,
            image_intention_pos,
            p_final,
            p_vl,
            fused,
        })
    }

    /// Forward pass over a batch, producing every score and loss input.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ctx: &mut ForwardCtx,
        batch: &[&DialogueSample],
    ) -> Result<BatchForward> {
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let a = self.cfg.ablation;
        let w = &self.cfg.alignment;
        let outs = batch
            .iter()
            .map(|s| self.sample_forward(tape, p, ctx, s))
            .collect::<Result<Vec<_>>>()?;

        let scores: Vec<Var> = outs.iter().flat_map(|o| o.p_final.iter().copied()).collect();
        let scores = tape.concat_rows(&scores)?;
        let labels = batch
            .iter()
            .flat_map(|s| s.labels.iter().map(|&l| f64::from(l)))
            .collect();

        let stack = |tape: &mut Tape, rows: Vec<Var>| tape.concat_rows(&rows);
        let pos_proj: Vec<Var> = outs
            .iter()
            .zip(batch)
            .map(|(o, s)| o.image_proj[s.positive()])
            .collect();
        let mut inter = InterParts {
            i2t: None,
            t2i: None,
            emotion: None,
            intention: None,
        };
        if a.semantic_alignment {
            let text = stack(tape, outs.iter().map(|o| o.text_proj).collect())?;
            let img = stack(tape, pos_proj)?;
            let negs = outs
                .iter()
                .zip(batch)
                .map(|(o, s)| {
                    let rows: Vec<Var> = (0..o.image_proj.len())
                        .filter(|&j| j != s.positive())
                        .map(|j| o.image_proj[j])
                        .collect();
                    tape.concat_rows(&rows)
                })
                .collect::<Result<Vec<_>>>()?;
            inter.i2t = Some(info_nce_i2t(tape, img, text, w.tau)?);
            inter.t2i = Some(info_nce_t2i(tape, text, img, &negs, w.tau)?);
        }
        if a.inter && a.emotion {
            let ev = stack(tape, outs.iter().map(|o| o.image_emotion_pos.expect("emotion")).collect())?;
            let et = stack(tape, outs.iter().map(|o| o.text_emotion.expect("emotion")).collect())?;
            inter.emotion = Some(emotion_align_loss(tape, ev, et)?);
        }
        if a.inter && a.intention {
            let iv = stack(tape, outs.iter().map(|o| o.image_intention_pos.expect("intention")).collect())?;
            let pooled = outs
                .iter()
                .map(|o| tape.mean_over_rows(o.knowledge.expect("intention")))
                .collect();
            let it = stack(tape, pooled)?;
            inter.intention = Some(intention_align_loss(tape, iv, it, w.tau)?);
        }

        let intra = if a.intra {
            let tc = stack(tape, outs.iter().map(|o| o.text_cls).collect())?;
            let vc = stack(tape, outs.iter().map(|o| o.image_cls_pos).collect())?;
            Some((
                self.intra_terms(tape, p, ctx, tc, &self.views.text)?,
                self.intra_terms(tape, p, ctx, vc, &self.views.image)?,
            ))
        } else {
            None
        };

        let knowledge_emotion = if a.eiks {
            let ls: Vec<Var> = outs.iter().map(|o| o.knowledge_emotion.expect("eiks")).collect();
            let all = tape.concat_rows(&ls)?;
            Some(tape.mean(all))
        } else {
            None
        };

        Ok(BatchForward {
            scores,
            labels,
            inter,
            intra,
            knowledge_emotion,
        })
    }

    fn intra_terms(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ctx: &mut ForwardCtx,
        cls: Var,
        heads: &[Linear; 2],
    ) -> Result<IntraTerms> {
        let a = &self.cfg.ablation;
        let rate = if ctx.is_train() { self.cfg.alignment.view_dropout } else { 0.0 };
        let seed_a = ctx.next_seed();
        let seed_b = mix_seed(seed_a, &[1]);
        let (v1, v2) = two_view(tape, p, cls, rate, seed_a, seed_b, &heads[0], &heads[1])?;
        let emotion = if a.emotion {
            let l1 = self.heads.emotion_visual(tape, p, v1)?;
            let l2 = self.heads.emotion_visual(tape, p, v2)?;
            Some(symmetric_kl_logits(tape, l1, l2)?)
        } else {
            None
        };
        let intention = if a.intention {
            let l1 = self.heads.intention_visual(tape, p, v1)?;
            let l2 = self.heads.intention_visual(tape, p, v2)?;
            Some(symmetric_kl_logits(tape, l1, l2)?)
        } else {
            None
        };
        let contrastive = instance_contrastive(tape, v1, v2, self.cfg.alignment.tau)?;
        Ok(IntraTerms {
            emotion,
            intention,
            contrastive,
        })
    }

    /// Inference-mode scores for one slate.
    pub fn score(&self, store: &ParamStore, sample: &DialogueSample) -> Result<SlateScores> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let mut ctx = ForwardCtx::eval();
        let out = self.sample_forward(&mut tape, &p, &mut ctx, sample)?;
        let vals = |tape: &Tape, v: &[Var]| v.iter().map(|&x| tape.scalar(x)).collect::<Vec<_>>();
        Ok(SlateScores {
            p_final: vals(&tape, &out.p_final),
            p_vl: vals(&tape, &out.p_vl),
            fused: out
                .fused
                .iter()
                .map(|&z| tape.value(z).data().to_vec())
                .collect(),
        })
    }
}
