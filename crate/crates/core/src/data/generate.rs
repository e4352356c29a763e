use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    save_dataset, DialogueSample, EmotionLexicon, GeneratorConfig, Latent, MockComet,
    StickerImage, Vocab,
};
use crate::encoders::N_EMOTIONS;
use crate::error::{Error, Result};
use crate::numcore::stream;

const PROTO_TAG: u64 = 0x7072_6f74;
const SAMPLE_TAG: u64 = 0x7361_6d70;
const TOPIC_SHARE: f64 = 0.45;
const FILLER_SHARE: f64 = 0.30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Val => "val.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<DialogueSample>,
    pub val: Vec<DialogueSample>,
    pub test: Vec<DialogueSample>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[DialogueSample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub config: GeneratorConfig,
    pub config_sha256: String,
    pub files: Vec<(String, usize, String)>,
}

/// Per-factor patch prototypes; an image is their scaled sum plus noise.
struct Prototypes {
    topic: Vec<Vec<f64>>,
    emotion: Vec<Vec<f64>>,
    archetype: Vec<Vec<f64>>,
}

impl Prototypes {
    fn new(cfg: &GeneratorConfig) -> Self {
        let len = cfg.n_patches() * cfg.patch_dim;
        let table = |kind: u64, n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| {
                    let mut rng = stream(cfg.seed, &[PROTO_TAG, kind, i as u64]);
                    (0..len).map(|_| rng.sample(StandardNormal)).collect()
                })
                .collect()
        };
        Self {
            topic: table(0, cfg.n_topics),
            emotion: table(1, N_EMOTIONS),
            archetype: table(2, cfg.n_intent_archetypes),
        }
    }

    fn render(&self, latent: Latent, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let scale = 1.0 / 3f64.sqrt();
        let t = &self.topic[latent.topic];
        let e = &self.emotion[latent.emotion];
        let a = &self.archetype[latent.archetype];
        (0..t.len())
            .map(|i| {
                let n: f64 = rng.sample(StandardNormal);
                let v = (t[i] + e[i] + a[i]) * scale + noise * n;
                (v * 1e4).round() / 1e4
            })
            .collect()
    }
}

struct Generator<'a> {
    cfg: &'a GeneratorConfig,
    vocab: Vocab,
    lexicon: EmotionLexicon,
    comet: MockComet,
    protos: Prototypes,
}

fn other(rng: &mut ChaCha8Rng, n: usize, not: usize) -> usize {
    let v = rng.gen_range(0..n - 1);
    if v >= not {
        v + 1
    } else {
        v
    }
}

impl Generator<'_> {
    fn dialogue(&self, latent: Latent, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let cfg = self.cfg;
        let v = &self.vocab;
        let n_turns = rng.gen_range(cfg.turns.0..=cfg.turns.1);
        let mut tokens = Vec::new();
        for turn in 0..n_turns {
            if turn > 0 {
                tokens.push(v.sep);
            }
            for _ in 0..rng.gen_range(cfg.turn_len.0..=cfg.turn_len.1) {
                let u: f64 = rng.gen();
                let tok = if u < TOPIC_SHARE {
                    v.topic_start + latent.topic * v.topic_words + rng.gen_range(0..v.topic_words)
                } else if u < TOPIC_SHARE + FILLER_SHARE {
                    rng.gen_range(v.filler_start..v.size)
                } else {
                    let c = if rng.gen::<f64>() < cfg.emotion_noise {
                        rng.gen_range(0..N_EMOTIONS)
                    } else {
                        latent.emotion
                    };
                    *self.lexicon.words(c).choose(rng).expect("nonempty category")
                };
                tokens.push(tok);
            }
        }
        if rng.gen::<f64>() < cfg.cue_rate {
            let cue = v.cue_start + latent.archetype * v.cue_words + rng.gen_range(0..v.cue_words);
            let at = rng.gen_range(0..=tokens.len());
            tokens.insert(at, cue);
        }
        tokens
    }

    fn negatives(&self, pos: Latent, rng: &mut ChaCha8Rng) -> Vec<Latent> {
        let cfg = self.cfg;
        let n_neg = cfg.n_candidates - 1;
        let n_hard = (cfg.hard_negative_fraction * n_neg as f64).round() as usize;
        let mut out: Vec<Latent> = (0..n_neg)
            .map(|i| {
                if i < n_hard {
                    let mut l = pos;
                    match rng.gen_range(0..3) {
                        0 => l.emotion = other(rng, N_EMOTIONS, pos.emotion),
                        1 => l.archetype = other(rng, cfg.n_intent_archetypes, pos.archetype),
                        _ => {
                            l.emotion = other(rng, N_EMOTIONS, pos.emotion);
                            l.archetype = other(rng, cfg.n_intent_archetypes, pos.archetype);
                        }
                    }
                    l
                } else {
                    Latent {
                        topic: other(rng, cfg.n_topics, pos.topic),
                        emotion: rng.gen_range(0..N_EMOTIONS),
                        archetype: rng.gen_range(0..cfg.n_intent_archetypes),
                    }
                }
            })
            .collect();
        out.shuffle(rng);
        out
    }

    fn sample(&self, id: u64) -> Result<DialogueSample> {
        let cfg = self.cfg;
        let mut rng = stream(cfg.seed, &[SAMPLE_TAG, id]);
        let latent = Latent {
            topic: rng.gen_range(0..cfg.n_topics),
            emotion: rng.gen_range(0..N_EMOTIONS),
            archetype: rng.gen_range(0..cfg.n_intent_archetypes),
        };
        let token_ids = self.dialogue(latent, &mut rng);
        let e_t = self.lexicon.distribution(&token_ids)?;
        let slot = rng.gen_range(0..cfg.n_candidates);
        let mut negs = self.negatives(latent, &mut rng).into_iter();
        let mut candidates = Vec::with_capacity(cfg.n_candidates);
        let mut labels = vec![0u8; cfg.n_candidates];
        labels[slot] = 1;
        for i in 0..cfg.n_candidates {
            let l = if i == slot {
                latent
            } else {
                negs.next().expect("n_candidates - 1 negatives")
            };
            candidates.push(StickerImage {
                latent: l,
                pixels: self.protos.render(l, cfg.image_noise, &mut rng),
            });
        }
        Ok(DialogueSample {
            sample_id: id,
            latent,
            token_ids,
            e_t,
            comet_sequences: self.comet.infer_all(latent.archetype),
            candidates,
            labels,
        })
    }
}

fn generator(cfg: &GeneratorConfig) -> Result<Generator<'_>> {
    cfg.validate()?;
    let vocab = Vocab::new(cfg)?;
    Ok(Generator {
        cfg,
        lexicon: EmotionLexicon::new(&vocab, cfg.seed),
        comet: MockComet::new(vocab.clone(), cfg.comet_len, cfg.seed),
        protos: Prototypes::new(cfg),
        vocab,
    })
}

/// Samples with the given ids; each depends only on the config and its id.
pub fn generate_split(cfg: &GeneratorConfig, ids: Range<u64>) -> Result<Vec<DialogueSample>> {
    let g = generator(cfg)?;
    ids.map(|id| g.sample(id)).collect()
}

/// Train, validation and test splits over disjoint id ranges.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Corpus> {
    let (n_train, n_val, n_test) = cfg.split_sizes();
    let g = generator(cfg)?;
    let (a, b, c) = (n_train as u64, (n_train + n_val) as u64, (n_train + n_val + n_test) as u64);
    let gen = |r: Range<u64>| r.map(|id| g.sample(id)).collect::<Result<Vec<_>>>();
    Ok(Corpus {
        train: gen(0..a)?,
        val: gen(a..b)?,
        test: gen(b..c)?,
    })
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the three splits and `manifest.json` into `dir`, creating it.
pub fn write_corpus(corpus: &Corpus, cfg: &GeneratorConfig, dir: &Path) -> Result<CorpusManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for s in Split::ALL {
        let path = dir.join(s.file_name());
        save_dataset(&path, corpus.split(s))?;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        files.push((s.file_name().to_string(), corpus.split(s).len(), sha256_hex(&bytes)));
    }
    let cfg_json = serde_json::to_vec(cfg).expect("config serializes");
    let manifest = CorpusManifest {
        seed: cfg.seed,
        config: cfg.clone(),
        config_sha256: sha256_hex(&cfg_json),
        files,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
