//! Deterministic synthetic inner states with separable factual and
//! non-factual signatures. Used as the desk-scale oracle for end-to-end
//! checks; the output is an ordinary capture file.
//!
//! Signatures, per class:
//! - ranks: factual ranks settle at 1 from the stabilization layer onwards;
//!   non-factual ranks flutter in late layers and only reach 1 at the end.
//! - top-k slots: late-layer slots repeat the previous layer's token with a
//!   class-dependent probability; factual answers come from a tight
//!   embedding cluster.
//! - probabilities: late-layer top-1/top-2 gap is class dependent.
//! - activations: a fixed planted neuron set is elevated for factual records,
//!   more strongly in deeper layers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::capture::{CaptureFile, CaptureMeta, Decoding, EmbeddingDictionary, InnerStateRecord, Label};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub meta: CaptureMeta,
    pub rank_stabilize_layer_frac: f64,
    pub rank_flutter: u32,
    /// Fraction of non-factual records whose late ranks flutter; the rest
    /// settle like factual ones.
    pub flutter_rate: f64,
    pub top1_consistency_factual: f64,
    pub top1_consistency_nonfactual: f64,
    pub prob_gap_factual: f64,
    pub prob_gap_nonfactual: f64,
    pub planted_neuron_frac: f64,
    /// Planted-neuron elevation at the first layer, in units of `noise_sigma`;
    /// it doubles linearly towards the last layer.
    pub planted_boost: f64,
    pub noise_sigma: f64,
    /// Per-record shift (in layers) of where the late-layer signatures start.
    pub onset_jitter: usize,
    pub relations: Vec<String>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            meta: CaptureMeta {
                model_id: "synthetic".into(),
                num_layers: 12,
                activation_dim: 64,
                vocab_size: 512,
                top_k: 10,
                embed_dim: 16,
                decoding: Decoding::Greedy,
            },
            rank_stabilize_layer_frac: 0.5,
            rank_flutter: 20,
            flutter_rate: 1.0,
            top1_consistency_factual: 0.9,
            top1_consistency_nonfactual: 0.4,
            prob_gap_factual: 0.3,
            prob_gap_nonfactual: 0.05,
            planted_neuron_frac: 0.01,
            planted_boost: 5.0,
            noise_sigma: 1.0,
            onset_jitter: 0,
            relations: vec!["synthetic".into()],
            seed: 0,
        }
    }
}

/// Size of the embedding cluster that factual answers are drawn from.
fn cluster_size(vocab: usize) -> usize {
    (vocab / 8).max(1)
}

impl SynthConfig {
    /// First 0-based layer with forced rank 1 for factual records.
    pub fn stabilize_index(&self) -> usize {
        ((self.rank_stabilize_layer_frac * self.meta.num_layers as f64).ceil() as usize).max(1) - 1
    }

    pub fn num_planted(&self) -> usize {
        (self.planted_neuron_frac * self.meta.activation_dim as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        let problems = m.check();
        if !problems.is_empty() {
            return Err(Error::param(problems.join("; ")));
        }
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::param(format!("{name} = {v} must lie in (0, 1)")))
            }
        };
        unit("rank_stabilize_layer_frac", self.rank_stabilize_layer_frac)?;
        unit("top1_consistency_factual", self.top1_consistency_factual)?;
        unit("top1_consistency_nonfactual", self.top1_consistency_nonfactual)?;
        unit("prob_gap_factual", self.prob_gap_factual)?;
        unit("prob_gap_nonfactual", self.prob_gap_nonfactual)?;
        unit("planted_neuron_frac", self.planted_neuron_frac)?;
        if !(0.0..=1.0).contains(&self.flutter_rate) {
            return Err(Error::param(format!("flutter_rate = {} must lie in [0, 1]", self.flutter_rate)));
        }
        if m.num_layers < 3 {
            return Err(Error::param("synthetic generation needs at least 3 layers"));
        }
        if self.stabilize_index() + self.onset_jitter + 1 >= m.num_layers {
            return Err(Error::param(
                "stabilization layer plus onset jitter leaves no late layer before the last",
            ));
        }
        if self.stabilize_index() < self.onset_jitter {
            return Err(Error::param("onset jitter exceeds the stabilization layer"));
        }
        if self.rank_flutter < 1 || self.rank_flutter as usize >= m.vocab_size {
            return Err(Error::param(format!(
                "rank_flutter = {} must lie in [1, |V|)",
                self.rank_flutter
            )));
        }
        let filler_pool = m.vocab_size - cluster_size(m.vocab_size);
        if filler_pool < 3 * m.top_k + 2 || m.vocab_size < 16 {
            return Err(Error::param(format!(
                "vocabulary of {} is too small for top_k = {}",
                m.vocab_size, m.top_k
            )));
        }
        if !(self.noise_sigma > 0.0) || !(self.planted_boost >= 0.0) {
            return Err(Error::param("noise_sigma must be positive and planted_boost non-negative"));
        }
        if self.relations.is_empty() {
            return Err(Error::param("at least one relation tag is required"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub meta: CaptureMeta,
    pub records: Vec<InnerStateRecord>,
    pub embeddings: EmbeddingDictionary,
    /// Sorted planted neuron indices (shared by all layers).
    pub planted_neurons: Vec<usize>,
}

impl SyntheticSet {
    pub fn into_capture(self) -> CaptureFile {
        CaptureFile {
            meta: self.meta,
            records: self.records,
            embeddings: self.embeddings,
        }
    }
}

/// Shared structure of one synthetic world: embeddings, planted neurons and
/// the token pools. Depends only on the config.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    config: SynthConfig,
    embeddings: EmbeddingDictionary,
    planted: Vec<usize>,
    cluster: Vec<u32>,
    fillers: Vec<u32>,
}

impl SynthWorld {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let m = &config.meta;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = Normal::new(0.0f64, 1.0).unwrap();

        let mut tokens: Vec<u32> = (0..m.vocab_size as u32).collect();
        tokens.shuffle(&mut rng);
        let (cluster, fillers) = tokens.split_at(cluster_size(m.vocab_size));
        let (mut cluster, mut fillers) = (cluster.to_vec(), fillers.to_vec());
        cluster.sort_unstable();
        fillers.sort_unstable();

        let center: Vec<f64> = (0..m.embed_dim).map(|_| std.sample(&mut rng)).collect();
        let center_norm = center.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut embeddings = EmbeddingDictionary::default();
        for t in 0..m.vocab_size as u32 {
            let v: Vec<f32> = if cluster.binary_search(&t).is_ok() {
                center
                    .iter()
                    .map(|c| (c / center_norm + 0.15 * std.sample(&mut rng) / (m.embed_dim as f64).sqrt()) as f32)
                    .collect()
            } else {
                (0..m.embed_dim).map(|_| std.sample(&mut rng) as f32).collect()
            };
            embeddings.insert(t, v);
        }

        let mut neurons: Vec<usize> = (0..m.activation_dim).collect();
        neurons.shuffle(&mut rng);
        let mut planted = neurons[..config.num_planted()].to_vec();
        planted.sort_unstable();

        Ok(Self {
            config: config.clone(),
            embeddings,
            planted,
            cluster,
            fillers,
        })
    }

    pub fn planted_neurons(&self) -> &[usize] {
        &self.planted
    }

    pub fn embeddings(&self) -> &EmbeddingDictionary {
        &self.embeddings
    }

    /// One record whose randomness is drawn from stream `index` of the seed.
    pub fn record(&self, label: Label, index: u64, relation: &str) -> InnerStateRecord {
        let cfg = &self.config;
        let m = &cfg.meta;
        let (l_n, d, k) = (m.num_layers, m.activation_dim, m.top_k);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index + 1);
        let factual = label == Label::Factual;

        let jitter = if cfg.onset_jitter > 0 {
            rng.random_range(0..=2 * cfg.onset_jitter) as isize - cfg.onset_jitter as isize
        } else {
            0
        };
        let onset = (cfg.stabilize_index() as isize + jitter) as usize;

        let y = if factual {
            self.cluster[rng.random_range(0..self.cluster.len())]
        } else {
            self.fillers[rng.random_range(0..self.fillers.len())]
        };

        let ranks = self.ranks(&mut rng, factual, onset);

        let consistency = if factual {
            cfg.top1_consistency_factual
        } else {
            cfg.top1_consistency_nonfactual
        };
        let mut topk_indices: Vec<u32> = Vec::with_capacity(l_n * k);
        for (l, &r) in ranks.iter().enumerate() {
            let late = l >= onset;
            let y_slot = (r as usize <= k).then(|| r as usize - 1);
            let mut row: Vec<u32> = Vec::with_capacity(k);
            for j in 0..k {
                if Some(j) == y_slot {
                    row.push(y);
                    continue;
                }
                let prev = (l > 0).then(|| topk_indices[(l - 1) * k + j]);
                let repeat = late && rng.random_bool(consistency);
                let candidate = match prev {
                    Some(t) if repeat && t != y && !row.contains(&t) => Some(t),
                    _ => None,
                };
                let t = candidate.unwrap_or_else(|| loop {
                    let t = self.fillers[rng.random_range(0..self.fillers.len())];
                    if t != y && !row.contains(&t) {
                        break t;
                    }
                });
                row.push(t);
            }
            topk_indices.extend(row);
        }

        let gap = if factual { cfg.prob_gap_factual } else { cfg.prob_gap_nonfactual };
        let mut topk_probs: Vec<f32> = Vec::with_capacity(l_n * k);
        for l in 0..l_n {
            topk_probs.extend(prob_row(&mut rng, k, l >= onset, gap));
        }

        let noise = Normal::new(0.0, cfg.noise_sigma).unwrap();
        let mut activation_map: Vec<f32> = (0..l_n * d).map(|_| noise.sample(&mut rng) as f32).collect();
        if factual {
            for l in 0..l_n {
                let ramp = 1.0 + l as f64 / (l_n - 1) as f64;
                for &n in &self.planted {
                    activation_map[l * d + n] += (cfg.planted_boost * ramp * cfg.noise_sigma) as f32;
                }
            }
        }

        let answer_token = if factual {
            y
        } else {
            loop {
                let t = self.fillers[rng.random_range(0..self.fillers.len())];
                if t != y {
                    break t;
                }
            }
        };
        InnerStateRecord {
            prompt: format!("synthetic prompt {index}"),
            answer: format!("tok{answer_token}"),
            generated_word: format!("tok{y}"),
            category: "synthetic".into(),
            relation: relation.to_string(),
            label,
            activation_map,
            rank_sequence: ranks,
            topk_indices,
            topk_probs,
        }
    }

    fn ranks(&self, rng: &mut ChaCha8Rng, factual: bool, onset: usize) -> Vec<u32> {
        let cfg = &self.config;
        let l_n = cfg.meta.num_layers;
        let v = cfg.meta.vocab_size as f64;
        let mut ranks = vec![1u32; l_n];
        // early layers: noisy decay from deep in the vocabulary, never 1
        let r0 = rng.random_range(v / 4.0..=v / 2.0);
        let mut prev = u32::MAX;
        for (l, r) in ranks.iter_mut().enumerate().take(onset) {
            let frac = (onset - l) as f64 / onset as f64;
            let value = (r0 * frac * frac * rng.random_range(0.8..1.2)).round().clamp(2.0, v) as u32;
            *r = value.min(prev);
            prev = *r;
        }
        if !factual && rng.random_bool(cfg.flutter_rate) {
            let late = onset..l_n - 1;
            for l in late.clone() {
                ranks[l] = 1 + rng.random_range(0..=cfg.rank_flutter);
            }
            if late.clone().all(|l| ranks[l] == 1) {
                let l = rng.random_range(late);
                ranks[l] = 1 + rng.random_range(1..=cfg.rank_flutter);
            }
        }
        ranks
    }
}

/// Strictly positive, non-increasing, summing to at most 0.99.
fn prob_row(rng: &mut ChaCha8Rng, k: usize, late: bool, gap: f64) -> Vec<f32> {
    let mut row = Vec::with_capacity(k);
    if late {
        let p2 = rng.random_range(0.05..0.15);
        let jitter = rng.random_range(-0.02..0.02);
        row.push(p2 + (gap + jitter).max(0.0));
        row.push(p2);
    } else {
        row.push(rng.random_range(0.01..0.05));
    }
    while row.len() < k {
        let last = *row.last().unwrap();
        row.push(last * rng.random_range(0.6..0.95));
    }
    row.truncate(k);
    let total: f64 = row.iter().sum();
    let scale = if total > 0.99 { 0.99 / total } else { 1.0 };
    row.iter().map(|p| ((p * scale) as f32).max(f32::MIN_POSITIVE)).collect()
}

/// `n` records per class, alternating factual / non-factual, with relations
/// assigned round-robin.
pub fn generate_synthetic(config: &SynthConfig, n: usize) -> Result<SyntheticSet> {
    if n == 0 {
        return Err(Error::param("n per class must be at least 1"));
    }
    let world = SynthWorld::new(config)?;
    let mut records = Vec::with_capacity(2 * n);
    for i in 0..n {
        let relation = &config.relations[i % config.relations.len()];
        for (c, label) in [Label::Factual, Label::Nonfactual].into_iter().enumerate() {
            records.push(world.record(label, (2 * i + c) as u64, relation));
        }
    }
    Ok(SyntheticSet {
        meta: config.meta.clone(),
        records,
        embeddings: world.embeddings.clone(),
        planted_neurons: world.planted.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::validate_record;

    fn small(n: usize) -> SyntheticSet {
        generate_synthetic(&SynthConfig::default(), n).unwrap()
    }

    #[test]
    fn every_record_validates() {
        let set = small(200);
        for r in &set.records {
            let diags = validate_record(r, &set.meta);
            assert!(diags.is_empty(), "{diags:?}");
        }
        set.into_capture().validate().unwrap();
    }

    #[test]
    fn factual_ranks_settle_by_layer_six() {
        for r in small(100).records.iter().filter(|r| r.label == Label::Factual) {
            assert_eq!(r.rank_sequence[11], 1);
            assert!(r.rank_sequence[5..].iter().all(|&x| x == 1));
            assert!(r.rank_sequence[..5].iter().all(|&x| x > 1));
            assert!(r.rank_sequence.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn nonfactual_ranks_flutter_late() {
        let cfg = SynthConfig::default();
        for r in small(100).records.iter().filter(|r| r.label == Label::Nonfactual) {
            assert_eq!(r.rank_sequence[11], 1);
            assert!(r.rank_sequence[5..11].iter().any(|&x| x > 1));
            assert!(r.rank_sequence[5..11].iter().all(|&x| x <= 1 + cfg.rank_flutter));
        }
    }

    #[test]
    fn planted_neurons_are_elevated_on_average() {
        let cfg = SynthConfig::default();
        let set = generate_synthetic(&cfg, 1000).unwrap();
        let d = cfg.meta.activation_dim;
        let mean = |label: Label| {
            let (mut s, mut c) = (0.0, 0usize);
            for r in set.records.iter().filter(|r| r.label == label) {
                for l in 0..cfg.meta.num_layers {
                    for &n in &set.planted_neurons {
                        s += r.activation_map[l * d + n] as f64;
                        c += 1;
                    }
                }
            }
            s / c as f64
        };
        assert!(mean(Label::Factual) - mean(Label::Nonfactual) >= 3.0 * cfg.noise_sigma);
    }

    #[test]
    fn same_seed_same_bytes_and_seed_matters() {
        let a = small(20);
        let b = small(20);
        assert_eq!(a.records, b.records);
        assert_eq!(a.embeddings, b.embeddings);
        let c = generate_synthetic(&SynthConfig { seed: 1, ..SynthConfig::default() }, 20).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn records_are_independent_of_batch_size() {
        let a = small(5);
        let b = small(10);
        assert_eq!(a.records[..], b.records[..10]);
    }

    #[test]
    fn factual_late_top1_is_stable_and_gap_wider() {
        let set = small(300);
        let k = set.meta.top_k;
        let stats = |label: Label| {
            let (mut repeats, mut gaps, mut c) = (0.0, 0.0, 0.0);
            for r in set.records.iter().filter(|r| r.label == label) {
                for l in 6..12 {
                    repeats += (r.topk_indices[l * k] == r.topk_indices[(l - 1) * k]) as u8 as f64;
                    gaps += (r.topk_probs[l * k] - r.topk_probs[l * k + 1]) as f64;
                    c += 1.0;
                }
            }
            (repeats / c, gaps / c)
        };
        let (rf, gf) = stats(Label::Factual);
        let (rn, gn) = stats(Label::Nonfactual);
        assert!(rf > rn + 0.2, "{rf} vs {rn}");
        assert!((gf - 0.3).abs() < 0.03 && (gn - 0.05).abs() < 0.03, "{gf} {gn}");
    }

    #[test]
    fn labels_agree_with_first_word_rule() {
        for r in small(50).records {
            assert_eq!(crate::dataset::first_words_match(&r.generated_word, &r.answer), r.label == Label::Factual);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            SynthConfig { rank_stabilize_layer_frac: 1.0, ..Default::default() },
            SynthConfig { rank_stabilize_layer_frac: 0.95, ..Default::default() },
            SynthConfig { rank_flutter: 512, ..Default::default() },
            SynthConfig { planted_neuron_frac: 0.0, ..Default::default() },
            SynthConfig { relations: vec![], ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(generate_synthetic(&cfg, 1), Err(Error::Parameter(_))), "{cfg:?}");
        }
        assert!(generate_synthetic(&SynthConfig::default(), 0).is_err());
    }
}
