//! Slate ranking, retrieval metrics, representation separation and the
//! component ablation harness.

use serde::{Deserialize, Serialize};

use crate::data::DialogueSample;
use crate::error::{Error, Result};
use crate::model::{AblationSpec, ModelConfig, StickerModel};
use crate::nn::ParamStore;
use crate::trainer::{TrainConfig, Trainer};

/// Candidate scores of one slate and their ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSlate {
    pub sample_id: u64,
    pub scores: Vec<f64>,
    /// Candidate indices by descending score; ties keep ascending index.
    pub ranking: Vec<usize>,
    pub positive: usize,
}

impl RankedSlate {
    pub fn new(sample_id: u64, scores: Vec<f64>, labels: &[u8]) -> Result<Self> {
        if scores.len() != labels.len() || scores.is_empty() {
            return Err(Error::validation(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        if positives.len() != 1 {
            return Err(Error::validation(format!(
                "slate {sample_id} has {} positives, expected exactly one",
                positives.len()
            )));
        }
        Ok(Self {
            sample_id,
            ranking: rank(&scores),
            scores,
            positive: positives[0],
        })
    }

    /// 1-based rank of the positive candidate.
    pub fn positive_rank(&self) -> usize {
        self.ranking
            .iter()
            .position(|&i| i == self.positive)
            .expect("ranking is a permutation")
            + 1
    }

    pub fn positive_score(&self) -> f64 {
        self.scores[self.positive]
    }
}

/// Indices sorted by descending score, ascending index on ties.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// With a single relevant candidate, average precision is `1/rank`.
pub fn average_precision(slate: &RankedSlate) -> f64 {
    1.0 / slate.positive_rank() as f64
}

pub fn mean_average_precision(slates: &[RankedSlate]) -> Result<f64> {
    if slates.is_empty() {
        return Err(Error::validation("no slates to evaluate"));
    }
    Ok(slates.iter().map(average_precision).sum::<f64>() / slates.len() as f64)
}

/// Fraction of slates whose positive is within the top `k`.
pub fn recall_at_k(slates: &[RankedSlate], k: usize) -> Result<f64> {
    if slates.is_empty() {
        return Err(Error::validation("no slates to evaluate"));
    }
    if let Some(s) = slates.iter().find(|s| k == 0 || k > s.scores.len()) {
        return Err(Error::validation(format!(
            "k = {k} outside slate of {} candidates",
            s.scores.len()
        )));
    }
    let hits = slates.iter().filter(|s| s.positive_rank() <= k).count();
    Ok(hits as f64 / slates.len() as f64)
}

/// Value reported when every class collapses onto its centroid.
pub const RATIO_CAP: f64 = 1e6;

/// Mean pairwise distance between class centroids over the mean distance
/// of points to their own centroid.
pub fn inter_intra_ratio(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::validation("need one label per point"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::validation("points of different dimension"));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::validation("need at least two classes"));
    }
    let mut centroids = Vec::with_capacity(classes.len());
    for &c in &classes {
        let members: Vec<&Vec<f64>> = points.iter().zip(labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
        if members.len() < 2 {
            return Err(Error::validation(format!("class {c} has fewer than two points")));
        }
        let mut m = vec![0.0; dim];
        for p in &members {
            m.iter_mut().zip(p.iter()).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|a| *a /= members.len() as f64);
        centroids.push(m);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter += dist(&centroids[i], &centroids[j]);
            pairs += 1;
        }
    }
    inter /= pairs as f64;
    let intra = points
        .iter()
        .zip(labels)
        .map(|(p, l)| dist(p, &centroids[classes.binary_search(l).expect("known class")]))
        .sum::<f64>()
        / points.len() as f64;
    if intra <= 0.0 {
        return Ok(RATIO_CAP);
    }
    Ok((inter / intra).min(RATIO_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub r_at_1: f64,
    pub r_at_2: f64,
    pub r_at_5: f64,
    /// Mean final score of the positive candidates.
    pub mean_positive_score: f64,
    /// Separation of fused positive and negative pair representations.
    pub distance_ratio: Option<f64>,
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn from_slates(slates: &[RankedSlate]) -> Result<Self> {
        let size = slates.iter().map(|s| s.scores.len()).min().unwrap_or(0);
        let r = |k: usize| recall_at_k(slates, k.min(size));
        Ok(Self {
            map: mean_average_precision(slates)?,
            r_at_1: r(1)?,
            r_at_2: r(2)?,
            r_at_5: r(5)?,
            mean_positive_score: slates.iter().map(RankedSlate::positive_score).sum::<f64>()
                / slates.len() as f64,
            distance_ratio: None,
            n_samples: slates.len(),
        })
    }
}

/// Inference-mode slate for one sample.
pub fn score_slate(model: &StickerModel, store: &ParamStore, s: &DialogueSample) -> Result<RankedSlate> {
    let scores = model.score(store, s)?;
    RankedSlate::new(s.sample_id, scores.p_final, &s.labels)
}

/// Scores every sample and reports ranking metrics, the mean positive
/// score and the fused-representation distance ratio.
pub fn evaluate(
    model: &StickerModel,
    store: &ParamStore,
    samples: &[DialogueSample],
) -> Result<(MetricsReport, Vec<RankedSlate>)> {
    let mut slates = Vec::with_capacity(samples.len());
    let mut points = Vec::with_capacity(2 * samples.len());
    let mut labels = Vec::with_capacity(2 * samples.len());
    for s in samples {
        let out = model.score(store, s)?;
        let pos = s.positive();
        let neg = (pos + 1) % s.candidates.len();
        points.push(out.fused[pos].clone());
        labels.push(1);
        points.push(out.fused[neg].clone());
        labels.push(0);
        slates.push(RankedSlate::new(s.sample_id, out.p_final, &s.labels)?);
    }
    let mut report = MetricsReport::from_slates(&slates)?;
    report.distance_ratio = inter_intra_ratio(&points, &labels).ok();
    Ok((report, slates))
}

/// Named component configurations.
pub fn ablation_preset(name: &str) -> Result<Vec<(String, AblationSpec)>> {
    let table4 = vec![
        ("full", AblationSpec::full()),
        ("w/o inter+samm", AblationSpec::without_inter()),
        ("w/o intra", AblationSpec::without_intra()),
        ("w/o eiks", AblationSpec::without_eiks()),
        ("w/o iega", AblationSpec::without_iega()),
        ("w/o samm", AblationSpec::without_samm()),
    ];
    let fig3 = vec![
        ("full", AblationSpec::full()),
        ("w/o intention", AblationSpec::without_intention()),
        ("w/o emotion", AblationSpec::without_emotion()),
        ("base", AblationSpec::base()),
    ];
    let chosen = match name {
        "table4" => table4,
        "fig3" => fig3,
        "all" => {
            let mut all = table4;
            all.extend(fig3.into_iter().skip(1));
            all
        }
        other => {
            return Err(Error::Config(format!(
                "unknown ablation preset {other:?} (expected table4, fig3 or all)"
            )))
        }
    };
    Ok(chosen.into_iter().map(|(n, s)| (n.to_string(), s)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub name: String,
    pub flags: String,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Trains every configuration from the same seed and data, then evaluates
/// the best-validation (or final) parameters on `test`.
pub fn run_ablation(
    configs: &[(String, AblationSpec)],
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &[DialogueSample],
    val: &[DialogueSample],
    test: &[DialogueSample],
) -> Result<Vec<AblationRecord>> {
    let mut out = Vec::with_capacity(configs.len());
    for (name, spec) in configs {
        spec.validate()?;
        let cfg = ModelConfig {
            ablation: *spec,
            ..base.clone()
        };
        let (model, store) = StickerModel::new(cfg, train_cfg.seed)?;
        let mut trainer = Trainer::new(&model, store, train_cfg.clone(), train, val)?;
        let fit = trainer.run()?;
        let params = fit.best_params.as_ref().unwrap_or(&trainer.state().params);
        let (report, _) = evaluate(&model, params, test)?;
        out.push(AblationRecord {
            name: name.clone(),
            flags: spec.key(),
            seed: train_cfg.seed,
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slate(scores: Vec<f64>, pos: usize) -> RankedSlate {
        let mut labels = vec![0u8; scores.len()];
        labels[pos] = 1;
        RankedSlate::new(0, scores, &labels).unwrap()
    }

    #[test]
    fn ties_rank_lower_index_first() {
        assert_eq!(rank(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn ap_examples() {
        let first = slate(vec![0.9, 0.1, 0.2], 0);
        assert_eq!(average_precision(&first), 1.0);
        let mut scores: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 * 0.05).collect();
        scores.swap(2, 7);
        let third = slate(scores, 7);
        assert_eq!(average_precision(&third), 1.0 / 3.0);
        assert!(RankedSlate::new(0, vec![0.1, 0.2], &[1, 1]).is_err());
        assert!(RankedSlate::new(0, vec![0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn recall_examples() {
        let best: Vec<RankedSlate> = (0..3).map(|_| slate((0..10).map(|i| -(i as f64)).collect(), 0)).collect();
        for k in [1, 2, 5] {
            assert_eq!(recall_at_k(&best, k).unwrap(), 1.0);
        }
        let worst = vec![slate((0..10).map(|i| -(i as f64)).collect(), 9)];
        assert_eq!(recall_at_k(&worst, 5).unwrap(), 0.0);
        assert!(recall_at_k(&worst, 11).is_err());
        assert!(recall_at_k(&worst, 0).is_err());
    }

    #[test]
    fn ratio_examples() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 0.0], vec![10.1, 0.0]];
        assert!(inter_intra_ratio(&pts, &[0, 0, 1, 1]).unwrap() > 50.0);
        let collapsed = vec![vec![0.0], vec![0.0], vec![1.0], vec![1.0]];
        assert_eq!(inter_intra_ratio(&collapsed, &[0, 0, 1, 1]).unwrap(), RATIO_CAP);
        assert!(inter_intra_ratio(&pts, &[0, 0, 0, 1]).is_err());
        assert!(inter_intra_ratio(&pts, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(ablation_preset("table4").unwrap().len(), 6);
        assert_eq!(ablation_preset("fig3").unwrap().len(), 4);
        let all = ablation_preset("all").unwrap();
        assert_eq!(all.len(), 9);
        let mut keys: Vec<String> = all.iter().map(|(_, s)| s.key()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 9);
        assert!(ablation_preset("bogus").is_err());
    }
}
