use rand::Rng;

use crate::data::Vocab;
use crate::encoders::RELATIONS;
use crate::error::{Error, Result};
use crate::numcore::stream;

/// Deterministic stand-in for a commonsense inference model.
///
/// Output depends only on the dialogue's intent archetype and the relation,
/// and is drawn from a vocabulary range owned by that relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockComet {
    vocab: Vocab,
    len: usize,
    seed: u64,
}

const COMET_TAG: u64 = 0x636f_6d65;

impl MockComet {
    pub fn new(vocab: Vocab, len: usize, seed: u64) -> Self {
        Self { vocab, len, seed }
    }

    pub fn relation_index(relation: &str) -> Result<usize> {
        RELATIONS
            .iter()
            .position(|r| *r == relation)
            .ok_or_else(|| Error::validation(format!("unknown relation {relation:?}")))
    }

    pub fn infer(&self, archetype: usize, relation: &str) -> Result<Vec<usize>> {
        let r = Self::relation_index(relation)?;
        let range = self.vocab.comet_range(r);
        let mut rng = stream(self.seed, &[COMET_TAG, archetype as u64, r as u64]);
        Ok((0..self.len).map(|_| rng.gen_range(range.clone())).collect())
    }

    /// One sequence per relation, in relation order.
    pub fn infer_all(&self, archetype: usize) -> Vec<Vec<usize>> {
        RELATIONS
            .iter()
            .map(|r| self.infer(archetype, r).expect("known relation"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GeneratorConfig;

    fn comet() -> MockComet {
        MockComet::new(Vocab::new(&GeneratorConfig::default()).unwrap(), 4, 3)
    }

    #[test]
    fn deterministic_and_keyed_on_archetype() {
        let c = comet();
        assert_eq!(c.infer(2, "xIntent").unwrap(), c.infer(2, "xIntent").unwrap());
        assert_ne!(c.infer(2, "xIntent").unwrap(), c.infer(3, "xIntent").unwrap());
    }

    #[test]
    fn relations_use_disjoint_ranges() {
        let c = comet();
        let seqs = c.infer_all(1);
        for (i, a) in seqs.iter().enumerate() {
            for b in &seqs[i + 1..] {
                assert!(a.iter().all(|t| !b.contains(t)));
            }
        }
        assert!(c.infer(1, "oReact").is_err());
    }
}
