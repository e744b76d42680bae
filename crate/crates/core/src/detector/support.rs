use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::model::DetectorModel;
use crate::capture::Label;
use crate::error::{Error, Result};
use crate::preprocess::PreprocessedRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct SupportEntry {
    /// f32-representable so the support file reproduces it exactly.
    pub embedding: Vec<f64>,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    pub entries: Vec<SupportEntry>,
    /// Which held-out pool the entries were drawn from.
    pub source: String,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Stratified sample of `size` pool records (factual gets the extra one when
/// `size` is odd), embedded in pool order.
pub fn build_support_set(
    model: &DetectorModel,
    pool: &[PreprocessedRecord],
    size: usize,
    seed: u64,
    source: &str,
) -> Result<SupportSet> {
    let want_f = size.div_ceil(2);
    let want_n = size / 2;
    if want_n == 0 {
        return Err(Error::param("support size must be at least 2"));
    }
    let mut factual: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label == Label::Factual).collect();
    let mut nonfactual: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label == Label::Nonfactual).collect();
    if factual.len() < want_f || nonfactual.len() < want_n {
        return Err(Error::param(format!(
            "support pool has {} factual / {} non-factual records, need {want_f} / {want_n}",
            factual.len(),
            nonfactual.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    factual.shuffle(&mut rng);
    nonfactual.shuffle(&mut rng);
    let mut chosen: Vec<usize> = factual[..want_f].iter().chain(&nonfactual[..want_n]).copied().collect();
    chosen.sort_unstable();
    let records: Vec<&PreprocessedRecord> = chosen.iter().map(|&i| &pool[i]).collect();
    let embeddings = model.embed_refs(&records)?;
    let entries = embeddings
        .into_iter()
        .zip(&records)
        .map(|(e, r)| SupportEntry {
            embedding: e.into_iter().map(|v| v as f32 as f64).collect(),
            label: r.label,
        })
        .collect();
    Ok(SupportSet {
        entries,
        source: source.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub label: Label,
    pub distance: f64,
    pub index: usize,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Euclidean 1-NN over the support set; ties go to the lowest index.
pub fn nearest(support: &SupportSet, embedding: &[f64]) -> Result<Prediction> {
    let mut best: Option<Prediction> = None;
    for (index, e) in support.entries.iter().enumerate() {
        if e.embedding.len() != embedding.len() {
            return Err(Error::param(format!(
                "support entry {index} has dimension {}, query has {}",
                e.embedding.len(),
                embedding.len()
            )));
        }
        let distance = euclidean(&e.embedding, embedding);
        if best.is_none_or(|b| distance < b.distance) {
            best = Some(Prediction {
                label: e.label,
                distance,
                index,
            });
        }
    }
    best.ok_or_else(|| Error::param("support set is empty"))
}

pub fn predict(model: &DetectorModel, support: &SupportSet, record: &PreprocessedRecord) -> Result<Prediction> {
    if support.is_empty() {
        return Err(Error::param("support set is empty"));
    }
    nearest(support, &model.forward_embed(record)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    /// Factual predicted factual.
    pub true_factual: usize,
    pub true_nonfactual: usize,
    /// Non-factual predicted factual.
    pub false_factual: usize,
    pub false_nonfactual: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RelationMetrics {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub total: usize,
    pub confusion: Confusion,
    pub per_relation: BTreeMap<String, RelationMetrics>,
}

impl Metrics {
    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = (&'a str, Label, Label)>) -> Self {
        let mut confusion = Confusion::default();
        let mut per_relation: BTreeMap<String, RelationMetrics> = BTreeMap::new();
        let (mut correct, mut total) = (0, 0);
        for (relation, truth, predicted) in outcomes {
            match (truth, predicted) {
                (Label::Factual, Label::Factual) => confusion.true_factual += 1,
                (Label::Nonfactual, Label::Nonfactual) => confusion.true_nonfactual += 1,
                (Label::Nonfactual, Label::Factual) => confusion.false_factual += 1,
                (Label::Factual, Label::Nonfactual) => confusion.false_nonfactual += 1,
            }
            let rel = per_relation.entry(relation.to_string()).or_default();
            rel.total += 1;
            total += 1;
            if truth == predicted {
                rel.correct += 1;
                correct += 1;
            }
        }
        for rel in per_relation.values_mut() {
            rel.accuracy = rel.correct as f64 / rel.total as f64;
        }
        Self {
            accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
            total,
            confusion,
            per_relation,
        }
    }
}

pub fn evaluate(model: &DetectorModel, support: &SupportSet, test: &[PreprocessedRecord]) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::param("test set is empty"));
    }
    let embeddings = model.embed(test)?;
    let mut outcomes = Vec::with_capacity(test.len());
    for (r, e) in test.iter().zip(&embeddings) {
        outcomes.push((r.relation.as_str(), r.label, nearest(support, e)?.label));
    }
    Ok(Metrics::from_outcomes(outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::model::tests::{mini_config, mini_dims, random_record};
    use rand::Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn axis(i: usize, d: usize) -> Vec<f64> {
        (0..d).map(|j| (j == i) as u8 as f64).collect()
    }

    fn two_point() -> SupportSet {
        SupportSet {
            entries: vec![
                SupportEntry { embedding: axis(0, 64), label: Label::Factual },
                SupportEntry { embedding: axis(1, 64), label: Label::Nonfactual },
            ],
            source: "toy".into(),
        }
    }

    #[test]
    fn nearest_geometry_and_exact_hit() {
        let mut q = vec![0.0; 64];
        q[0] = 0.9;
        q[1] = 0.1;
        let p = nearest(&two_point(), &unit(q)).unwrap();
        assert_eq!((p.label, p.index), (Label::Factual, 0));
        let hit = nearest(&two_point(), &axis(1, 64)).unwrap();
        assert_eq!((hit.label, hit.distance), (Label::Nonfactual, 0.0));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut q = vec![0.0; 64];
        q[0] = 0.5f64.sqrt();
        q[1] = 0.5f64.sqrt();
        assert_eq!(nearest(&two_point(), &q).unwrap().index, 0);
    }

    #[test]
    fn empty_support_is_an_error() {
        let s = SupportSet { entries: vec![], source: String::new() };
        assert!(nearest(&s, &[1.0]).is_err());
    }

    #[test]
    fn support_sampling_is_stratified() {
        let model = DetectorModel::new(&mini_config(), mini_dims()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pool: Vec<_> = (0..240)
            .map(|i| random_record(&mut rng, mini_dims(), if i % 3 == 0 { Label::Factual } else { Label::Nonfactual }))
            .collect();
        let s = build_support_set(&model, &pool, 100, 7, "pool").unwrap();
        let f = s.entries.iter().filter(|e| e.label == Label::Factual).count();
        assert_eq!((f, s.len() - f), (50, 50));
        for e in &s.entries {
            let n = e.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        assert_eq!(s, build_support_set(&model, &pool, 100, 7, "pool").unwrap());
        assert!(build_support_set(&model, &pool, 200, 7, "pool").is_err());

        let pair = vec![pool[0].clone(), pool[1].clone()];
        assert_eq!(build_support_set(&model, &pair, 2, 0, "pair").unwrap().len(), 2);
        let single_label = vec![pool[1].clone(), pool[2].clone()];
        assert!(build_support_set(&model, &single_label, 2, 0, "x").is_err());
    }

    #[test]
    fn metric_bookkeeping() {
        let all_right = Metrics::from_outcomes([("a", Label::Factual, Label::Factual), ("b", Label::Nonfactual, Label::Nonfactual)]);
        assert_eq!(all_right.accuracy, 1.0);
        let flipped = Metrics::from_outcomes([
            ("a", Label::Factual, Label::Factual),
            ("a", Label::Factual, Label::Nonfactual),
            ("b", Label::Nonfactual, Label::Factual),
            ("b", Label::Nonfactual, Label::Nonfactual),
        ]);
        assert_eq!(flipped.accuracy, 0.5);
        assert_eq!(flipped.confusion.false_factual, 1);
        assert_eq!(flipped.confusion.false_nonfactual, 1);
        assert_eq!(flipped.per_relation["a"].accuracy, 0.5);
    }

    #[test]
    fn predict_agrees_with_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let entries: Vec<_> = (0..20)
                .map(|_| SupportEntry {
                    embedding: unit((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()),
                    label: if rng.random_bool(0.5) { Label::Factual } else { Label::Nonfactual },
                })
                .collect();
            let s = SupportSet { entries, source: String::new() };
            let q = unit((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
            let d: Vec<f64> = s.entries.iter().map(|e| euclidean(&e.embedding, &q)).collect();
            let best = (0..20).min_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap()).unwrap();
            assert_eq!(nearest(&s, &q).unwrap().index, best);
        }
    }
}
