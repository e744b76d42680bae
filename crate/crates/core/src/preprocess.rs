//! Turns captured inner states into detector inputs: standardized activation
//! maps, rank transforms, and adjacent-layer cosine similarity of top-k token
//! embeddings. Top-k probabilities pass through untouched.

use std::io::{Read, Write};
use std::path::Path;

use crate::capture::{CaptureMeta, EmbeddingDictionary, InnerStateRecord, Label};
use crate::dataset::Stratified;
use crate::error::{Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const RANK_EPS: f64 = 1e-7;
pub const STATS_MAGIC: &[u8; 4] = b"LFST";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StatsMode {
    /// One scalar mean and deviation over every activation entry.
    #[default]
    Global,
    /// Entrywise statistics over records.
    PerFeature,
}

impl StatsMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(StatsMode::Global),
            "per_feature" | "per-feature" => Ok(StatsMode::PerFeature),
            other => Err(Error::Config(format!("unknown stats mode `{other}` (global | per_feature)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StatsMode::Global => "global",
            StatsMode::PerFeature => "per_feature",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    pub mode: StatsMode,
    pub num_layers: usize,
    pub activation_dim: usize,
    /// Length 1 (global) or L·D (per feature).
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DatasetStats {
    fn at(&self, i: usize) -> (f64, f64) {
        match self.mode {
            StatsMode::Global => (self.mu[0], self.sigma[0]),
            StatsMode::PerFeature => (self.mu[i], self.sigma[i]),
        }
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(STATS_MAGIC)?;
        out.write_all(&[match self.mode {
            StatsMode::Global => 0,
            StatsMode::PerFeature => 1,
        }])?;
        out.write_all(&(self.num_layers as u32).to_le_bytes())?;
        out.write_all(&(self.activation_dim as u32).to_le_bytes())?;
        for v in self.mu.iter().chain(&self.sigma) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < 13 || &bytes[..4] != STATS_MAGIC {
            return Err(Error::Format("bad magic: not a stats sidecar".into()));
        }
        let mode = match bytes[4] {
            0 => StatsMode::Global,
            1 => StatsMode::PerFeature,
            t => return Err(Error::Format(format!("unknown stats mode tag {t}"))),
        };
        let num_layers = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let activation_dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let n = match mode {
            StatsMode::Global => 1,
            StatsMode::PerFeature => num_layers * activation_dim,
        };
        if bytes.len() != 13 + 16 * n {
            return Err(Error::corrupt("stats"));
        }
        let floats: Vec<f64> = bytes[13..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (mu, sigma) = floats.split_at(n);
        Ok(Self {
            mode,
            num_layers,
            activation_dim,
            mu: mu.to_vec(),
            sigma: sigma.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Fit μ and σ (population) on training records only. σ is floored at
/// [`SIGMA_FLOOR`].
pub fn fit_stats(records: &[InnerStateRecord], meta: &CaptureMeta, mode: StatsMode) -> Result<DatasetStats> {
    if records.len() < 2 {
        return Err(Error::param(format!("fit_stats needs at least 2 records, got {}", records.len())));
    }
    let n = meta.num_layers * meta.activation_dim;
    if let Some(i) = records.iter().position(|r| r.activation_map.len() != n) {
        return Err(Error::param(format!("record {i}: activation map is not L×D = {n}")));
    }
    let (mu, sigma) = match mode {
        StatsMode::Global => {
            let count = (records.len() * n) as f64;
            let mean = records
                .iter()
                .flat_map(|r| r.activation_map.iter())
                .map(|&v| v as f64)
                .sum::<f64>()
                / count;
            let var = records
                .iter()
                .flat_map(|r| r.activation_map.iter())
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / count;
            (vec![mean], vec![var.sqrt().max(SIGMA_FLOOR)])
        }
        StatsMode::PerFeature => {
            let count = records.len() as f64;
            let mut mean = vec![0.0; n];
            for r in records {
                for (m, &v) in mean.iter_mut().zip(&r.activation_map) {
                    *m += v as f64;
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            let mut var = vec![0.0; n];
            for r in records {
                for ((s, &v), m) in var.iter_mut().zip(&r.activation_map).zip(&mean) {
                    *s += (v as f64 - m).powi(2);
                }
            }
            let sigma = var.iter().map(|s| (s / count).sqrt().max(SIGMA_FLOOR)).collect();
            (mean, sigma)
        }
    };
    Ok(DatasetStats {
        mode,
        num_layers: meta.num_layers,
        activation_dim: meta.activation_dim,
        mu,
        sigma,
    })
}

/// (A − μ) / σ, elementwise.
pub fn normalize_activation(activation: &[f32], stats: &DatasetStats) -> Result<Vec<f64>> {
    let n = stats.num_layers * stats.activation_dim;
    if activation.len() != n {
        return Err(Error::param(format!(
            "activation map has {} entries, stats expect {}×{}",
            activation.len(),
            stats.num_layers,
            stats.activation_dim
        )));
    }
    Ok(activation
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let (m, s) = stats.at(i);
            (a as f64 - m) / s
        })
        .collect())
}

/// x·σ + μ, the inverse of [`normalize_activation`].
pub fn denormalize_activation(normalized: &[f64], stats: &DatasetStats) -> Vec<f64> {
    normalized
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let (m, s) = stats.at(i);
            x * s + m
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RankFormula {
    /// 1 / ((R − 1) + 1 + 1e-7): in (0, 1], ≈1 at R = 1, strictly decreasing.
    #[default]
    Corrected,
    /// 1 / ((1 − R) + 1 + 1e-7), kept for auditing only: it blows up at R = 2
    /// and is negative beyond.
    Printed,
}

pub fn transform_rank(rank: u32, formula: RankFormula) -> f64 {
    let r = rank as f64;
    match formula {
        RankFormula::Corrected => 1.0 / ((r - 1.0) + 1.0 + RANK_EPS),
        RankFormula::Printed => 1.0 / ((1.0 - r) + 1.0 + RANK_EPS),
    }
}

pub fn transform_ranks(ranks: &[u32]) -> Result<Vec<f64>> {
    transform_ranks_with(ranks, RankFormula::Corrected)
}

pub fn transform_ranks_with(ranks: &[u32], formula: RankFormula) -> Result<Vec<f64>> {
    if let Some(l) = ranks.iter().position(|&r| r < 1) {
        return Err(Error::param(format!("rank at layer {l} is {} (< 1)", ranks[l])));
    }
    Ok(ranks.iter().map(|&r| transform_rank(r, formula)).collect())
}

/// Cosine similarity with the zero-vector convention sim = 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Entry (l, j) compares the slot-j token of layer l with the slot-j token
/// of layer l+1. Input is L×k row-major, output (L−1)×k.
pub fn topk_similarity(topk_indices: &[u32], k: usize, dict: &EmbeddingDictionary) -> Result<Vec<f64>> {
    if k == 0 || !topk_indices.len().is_multiple_of(k) || topk_indices.len() < 2 * k {
        return Err(Error::param(format!(
            "top-k index matrix of length {} is not L×{k} with L ≥ 2",
            topk_indices.len()
        )));
    }
    let lookup = |t: u32| {
        dict.get(t)
            .ok_or_else(|| Error::Data(format!("token id {t} missing from embedding dictionary")))
    };
    let layers = topk_indices.len() / k;
    let mut out = Vec::with_capacity((layers - 1) * k);
    for l in 0..layers - 1 {
        for j in 0..k {
            let a = lookup(topk_indices[l * k + j])?;
            let b = lookup(topk_indices[(l + 1) * k + j])?;
            out.push(cosine(a, b));
        }
    }
    Ok(out)
}

/// Shape of the detector's inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputDims {
    pub num_layers: usize,
    pub activation_dim: usize,
    pub top_k: usize,
}

impl From<&CaptureMeta> for InputDims {
    fn from(m: &CaptureMeta) -> Self {
        Self {
            num_layers: m.num_layers,
            activation_dim: m.activation_dim,
            top_k: m.top_k,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedRecord {
    /// L×D
    pub norm_activation: Vec<f64>,
    /// L
    pub transformed_ranks: Vec<f64>,
    /// (L−1)×k
    pub topk_similarity: Vec<f64>,
    /// L×k, bitwise copy of the captured probabilities.
    pub topk_probs: Vec<f32>,
    pub label: Label,
    pub relation: String,
    pub category: String,
}

impl PreprocessedRecord {
    pub fn dims_match(&self, dims: InputDims) -> bool {
        let InputDims {
            num_layers: l,
            activation_dim: d,
            top_k: k,
        } = dims;
        self.norm_activation.len() == l * d
            && self.transformed_ranks.len() == l
            && self.topk_similarity.len() == (l - 1) * k
            && self.topk_probs.len() == l * k
    }

    /// All-zero inputs of the given shape, the default attribution baseline.
    pub fn zeros(dims: InputDims, label: Label) -> Self {
        let InputDims {
            num_layers: l,
            activation_dim: d,
            top_k: k,
        } = dims;
        Self {
            norm_activation: vec![0.0; l * d],
            transformed_ranks: vec![0.0; l],
            topk_similarity: vec![0.0; (l - 1) * k],
            topk_probs: vec![0.0; l * k],
            label,
            relation: String::new(),
            category: String::new(),
        }
    }
}

impl Stratified for PreprocessedRecord {
    fn relation(&self) -> &str {
        &self.relation
    }
    fn label(&self) -> Label {
        self.label
    }
}

#[derive(Clone, Debug)]
pub struct Preprocessor {
    pub stats: DatasetStats,
    pub rank_formula: RankFormula,
}

impl Preprocessor {
    pub fn new(stats: DatasetStats) -> Self {
        Self {
            stats,
            rank_formula: RankFormula::Corrected,
        }
    }

    pub fn apply(&self, r: &InnerStateRecord, k: usize, dict: &EmbeddingDictionary) -> Result<PreprocessedRecord> {
        Ok(PreprocessedRecord {
            norm_activation: normalize_activation(&r.activation_map, &self.stats)?,
            transformed_ranks: transform_ranks_with(&r.rank_sequence, self.rank_formula)?,
            topk_similarity: topk_similarity(&r.topk_indices, k, dict)?,
            topk_probs: r.topk_probs.clone(),
            label: r.label,
            relation: r.relation.clone(),
            category: r.category.clone(),
        })
    }

    pub fn apply_all(
        &self,
        records: &[InnerStateRecord],
        k: usize,
        dict: &EmbeddingDictionary,
    ) -> Result<Vec<PreprocessedRecord>> {
        records.iter().map(|r| self.apply(r, k, dict)).collect()
    }
}

/// Keep only the first `k` top-k columns of every record. Top-k lists are
/// prefix-consistent, so this equals a capture taken at the smaller k.
pub fn truncate_topk(records: &[InnerStateRecord], meta: &CaptureMeta, k: usize) -> Result<(Vec<InnerStateRecord>, CaptureMeta)> {
    if k == 0 || k > meta.top_k {
        return Err(Error::param(format!(
            "requested k={k} exceeds the captured k={} (or is zero)",
            meta.top_k
        )));
    }
    let old = meta.top_k;
    let cut = |row_major: &[u32]| -> Vec<u32> { row_major.chunks(old).flat_map(|r| r[..k].iter().copied()).collect() };
    let cut_f = |row_major: &[f32]| -> Vec<f32> { row_major.chunks(old).flat_map(|r| r[..k].iter().copied()).collect() };
    let out = records
        .iter()
        .map(|r| InnerStateRecord {
            topk_indices: cut(&r.topk_indices),
            topk_probs: cut_f(&r.topk_probs),
            ..r.clone()
        })
        .collect();
    let mut m = meta.clone();
    m.top_k = k;
    Ok((out, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::tests::{meta, record};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn with_constant(value: f32) -> InnerStateRecord {
        let mut r = record(4, 8, 3);
        r.activation_map.iter_mut().for_each(|v| *v = value);
        r
    }

    #[test]
    fn global_two_point_statistics() {
        let s = fit_stats(&[with_constant(1.0), with_constant(3.0)], &meta(4, 8, 3), StatsMode::Global).unwrap();
        assert_eq!(s.mu, vec![2.0]);
        assert_eq!(s.sigma, vec![1.0]);
    }

    #[test]
    fn constant_data_floors_sigma_and_normalizes_to_zero() {
        let recs = [with_constant(5.0), with_constant(5.0)];
        for mode in [StatsMode::Global, StatsMode::PerFeature] {
            let s = fit_stats(&recs, &meta(4, 8, 3), mode).unwrap();
            assert!(s.sigma.iter().all(|&v| v == SIGMA_FLOOR));
            assert!(normalize_activation(&recs[0].activation_map, &s).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn per_feature_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let recs: Vec<_> = (0..10)
            .map(|_| {
                let mut r = record(4, 8, 3);
                r.activation_map.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
                r
            })
            .collect();
        let s = fit_stats(&recs, &meta(4, 8, 3), StatsMode::PerFeature).unwrap();
        for i in 0..32 {
            let xs: Vec<f64> = recs.iter().map(|r| r.activation_map[i] as f64).collect();
            let m = xs.iter().sum::<f64>() / 10.0;
            let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 10.0).sqrt();
            assert!((s.mu[i] - m).abs() < 1e-12);
            assert!((s.sigma[i] - sd).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_records_is_a_parameter_error() {
        assert!(matches!(fit_stats(&[], &meta(4, 8, 3), StatsMode::Global), Err(Error::Parameter(_))));
    }

    #[test]
    fn normalization_formula_and_inverse() {
        let stats = DatasetStats {
            mode: StatsMode::Global,
            num_layers: 1,
            activation_dim: 3,
            mu: vec![0.5],
            sigma: vec![2.0],
        };
        let a = [0.5f32, 2.5, -7.25];
        let z = normalize_activation(&a, &stats).unwrap();
        assert_eq!(z[0], 0.0);
        assert_eq!(z[1], 1.0);
        let back = denormalize_activation(&z, &stats);
        for (x, y) in a.iter().zip(back) {
            assert!(((*x as f64) - y).abs() <= 1e-5 * (*x as f64).abs().max(1.0));
        }
        assert!(normalize_activation(&a[..2], &stats).is_err());
    }

    #[test]
    fn rank_transform_values() {
        let t = transform_ranks(&[1, 10]).unwrap();
        assert_eq!(t[0], 1.0 / (1.0 + 1e-7));
        assert!((t[1] - 0.1).abs() < 1e-7);
        assert!(transform_ranks(&[0]).is_err());
    }

    #[test]
    fn printed_rank_formula_misbehaves() {
        assert!(transform_rank(2, RankFormula::Printed) > 1e6);
        assert!(transform_rank(3, RankFormula::Printed) < 0.0);
    }

    #[test]
    fn cosine_conventions() {
        let mut d = EmbeddingDictionary::default();
        d.insert(1, vec![1.0, 0.0]);
        d.insert(2, vec![0.0, 3.0]);
        d.insert(3, vec![0.0, 0.0]);
        d.insert(4, vec![2.0, 0.0]);
        // layer rows: [1, 2], [4, 2], [2, 3]
        let sim = topk_similarity(&[1, 2, 4, 2, 2, 3], 2, &d).unwrap();
        assert_eq!(sim, vec![1.0, 1.0, 0.0, 0.0]);
        match topk_similarity(&[1, 9, 1, 2], 2, &d) {
            Err(Error::Data(m)) => assert!(m.contains('9')),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn similarity_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut dict = EmbeddingDictionary::default();
        for t in 0..20 {
            dict.insert(t, (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect());
        }
        let idx: Vec<u32> = (0..15).map(|_| rng.random_range(0..20)).collect();
        let sim = topk_similarity(&idx, 3, &dict).unwrap();
        assert_eq!(sim.len(), 4 * 3);
        for l in 0..4 {
            for j in 0..3 {
                let a = dict.get(idx[l * 3 + j]).unwrap();
                let b = dict.get(idx[(l + 1) * 3 + j]).unwrap();
                let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
                let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                assert!((sim[l * 3 + j] - dot / (na * nb)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn stats_sidecar_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let recs: Vec<_> = (0..3)
            .map(|_| {
                let mut r = record(4, 8, 3);
                r.activation_map.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
                r
            })
            .collect();
        for mode in [StatsMode::Global, StatsMode::PerFeature] {
            let s = fit_stats(&recs, &meta(4, 8, 3), mode).unwrap();
            let mut buf = Vec::new();
            s.write_to(&mut buf).unwrap();
            assert_eq!(&buf[..4], b"LFST");
            assert_eq!(DatasetStats::read_from(&buf[..]).unwrap(), s);
        }
    }

    #[test]
    fn truncation_keeps_prefix_columns() {
        let m = meta(4, 8, 3);
        let r = record(4, 8, 3);
        let (out, m2) = truncate_topk(std::slice::from_ref(&r), &m, 2).unwrap();
        assert_eq!(m2.top_k, 2);
        assert_eq!(out[0].topk_indices[..2], r.topk_indices[..2]);
        assert_eq!(out[0].topk_indices[2..4], r.topk_indices[3..5]);
        assert!(crate::capture::validate_record(&out[0], &m2).is_empty());
        assert!(truncate_topk(&[r], &m, 4).is_err());
    }
}
