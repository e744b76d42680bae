//! End-to-end orchestration shared by the command-line tool and the
//! integration tests: run configuration, splits, train/evaluate, the
//! leave-one-relation-out protocol, ablation sweeps, per-token annotation
//! and run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capture::{CaptureFile, CaptureMeta, EmbeddingDictionary, InnerStateRecord, Label};
use crate::dataset::{balance_and_split, relations};
use crate::detector::{build_support_set, evaluate, nearest, train, DetectorConfig, DetectorModel, Metrics, SupportSet, TrainReport, Variant};
use crate::error::{Error, Result};
use crate::preprocess::{fit_stats, truncate_topk, DatasetStats, Preprocessor, StatsMode};
use crate::synth::SynthConfig;

/// Everything a command needs, settable from a flat `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub detector: DetectorConfig,
    pub synth: SynthConfig,
    pub stats_mode: StatsMode,
    /// Share of each balanced stratum used for training (the rest is test).
    pub train_fraction: f64,
    /// Share of the training portion held back as the support pool.
    pub pool_fraction: f64,
    pub ig_steps: usize,
    pub neuron_percentile: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            synth: SynthConfig::default(),
            stats_mode: StatsMode::Global,
            train_fraction: 0.8,
            pool_fraction: 0.15,
            ig_steps: 256,
            neuron_percentile: 0.01,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse_num(key, v)).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Seeds every stochastic stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.detector.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.detector;
        let s = &mut self.synth;
        match key {
            "sub_embedding_dim" => d.sub_embedding_dim = parse_num(key, value)?,
            "fused_dim" => d.fused_dim = parse_num(key, value)?,
            "k" => d.k = parse_num(key, value)?,
            "margin" => d.margin = parse_num(key, value)?,
            "p" => d.p = parse_num(key, value)?,
            "distance_eps" => d.distance_eps = parse_num(key, value)?,
            "epochs" => d.epochs = parse_num(key, value)?,
            "batch_size" => d.batch_size = parse_num(key, value)?,
            "lr" => d.optimizer.lr = parse_num(key, value)?,
            "beta1" => d.optimizer.beta1 = parse_num(key, value)?,
            "beta2" => d.optimizer.beta2 = parse_num(key, value)?,
            "adam_eps" => d.optimizer.eps = parse_num(key, value)?,
            "weight_decay" => d.optimizer.weight_decay = parse_num(key, value)?,
            "rnn_hidden" => d.rnn_hidden = parse_list(key, value)?,
            "support_size" => d.support_size = parse_num(key, value)?,
            "variant" => d.variant = Variant::parse(value.trim())?,
            "resnet_width" => d.resnet_width = parse_num(key, value)?,
            "mlp_hidden" => d.mlp_hidden = parse_num(key, value)?,
            "seed" => {
                d.seed = parse_num(key, value)?;
                s.seed = d.seed;
            }
            "model_id" => s.meta.model_id = value.trim().to_string(),
            "num_layers" => s.meta.num_layers = parse_num(key, value)?,
            "activation_dim" => s.meta.activation_dim = parse_num(key, value)?,
            "vocab_size" => s.meta.vocab_size = parse_num(key, value)?,
            "top_k" => s.meta.top_k = parse_num(key, value)?,
            "embed_dim" => s.meta.embed_dim = parse_num(key, value)?,
            "rank_stabilize_layer_frac" => s.rank_stabilize_layer_frac = parse_num(key, value)?,
            "rank_flutter" => s.rank_flutter = parse_num(key, value)?,
            "flutter_rate" => s.flutter_rate = parse_num(key, value)?,
            "top1_consistency_factual" => s.top1_consistency_factual = parse_num(key, value)?,
            "top1_consistency_nonfactual" => s.top1_consistency_nonfactual = parse_num(key, value)?,
            "prob_gap_factual" => s.prob_gap_factual = parse_num(key, value)?,
            "prob_gap_nonfactual" => s.prob_gap_nonfactual = parse_num(key, value)?,
            "planted_neuron_frac" => s.planted_neuron_frac = parse_num(key, value)?,
            "planted_boost" => s.planted_boost = parse_num(key, value)?,
            "noise_sigma" => s.noise_sigma = parse_num(key, value)?,
            "onset_jitter" => s.onset_jitter = parse_num(key, value)?,
            "relations" => s.relations = value.split(',').map(|r| r.trim().to_string()).collect(),
            "stats_mode" => self.stats_mode = StatsMode::parse(value.trim())?,
            "train_fraction" => self.train_fraction = parse_num(key, value)?,
            "pool_fraction" => self.pool_fraction = parse_num(key, value)?,
            "ig_steps" => self.ig_steps = parse_num(key, value)?,
            "neuron_percentile" => self.neuron_percentile = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// `key = value` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.detector.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its current value; parsing the rendered snapshot
    /// reproduces the config.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let d = &self.detector;
        let s = &self.synth;
        let pairs: Vec<(&str, String)> = vec![
            ("sub_embedding_dim", d.sub_embedding_dim.to_string()),
            ("fused_dim", d.fused_dim.to_string()),
            ("k", d.k.to_string()),
            ("margin", d.margin.to_string()),
            ("p", d.p.to_string()),
            ("distance_eps", d.distance_eps.to_string()),
            ("epochs", d.epochs.to_string()),
            ("batch_size", d.batch_size.to_string()),
            ("lr", d.optimizer.lr.to_string()),
            ("beta1", d.optimizer.beta1.to_string()),
            ("beta2", d.optimizer.beta2.to_string()),
            ("adam_eps", d.optimizer.eps.to_string()),
            ("weight_decay", d.optimizer.weight_decay.to_string()),
            ("rnn_hidden", join(&d.rnn_hidden)),
            ("support_size", d.support_size.to_string()),
            ("variant", d.variant.to_string()),
            ("resnet_width", d.resnet_width.to_string()),
            ("mlp_hidden", d.mlp_hidden.to_string()),
            ("seed", d.seed.to_string()),
            ("model_id", s.meta.model_id.clone()),
            ("num_layers", s.meta.num_layers.to_string()),
            ("activation_dim", s.meta.activation_dim.to_string()),
            ("vocab_size", s.meta.vocab_size.to_string()),
            ("top_k", s.meta.top_k.to_string()),
            ("embed_dim", s.meta.embed_dim.to_string()),
            ("rank_stabilize_layer_frac", s.rank_stabilize_layer_frac.to_string()),
            ("rank_flutter", s.rank_flutter.to_string()),
            ("flutter_rate", s.flutter_rate.to_string()),
            ("top1_consistency_factual", s.top1_consistency_factual.to_string()),
            ("top1_consistency_nonfactual", s.top1_consistency_nonfactual.to_string()),
            ("prob_gap_factual", s.prob_gap_factual.to_string()),
            ("prob_gap_nonfactual", s.prob_gap_nonfactual.to_string()),
            ("planted_neuron_frac", s.planted_neuron_frac.to_string()),
            ("planted_boost", s.planted_boost.to_string()),
            ("noise_sigma", s.noise_sigma.to_string()),
            ("onset_jitter", s.onset_jitter.to_string()),
            ("relations", s.relations.join(",")),
            ("stats_mode", self.stats_mode.as_str().to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("pool_fraction", self.pool_fraction.to_string()),
            ("ig_steps", self.ig_steps.to_string()),
            ("neuron_percentile", self.neuron_percentile.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn render(&self) -> String {
        self.snapshot().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Disjoint training, support-pool and test records.
#[derive(Clone, Debug, Default)]
pub struct DataSplit {
    pub train: Vec<InnerStateRecord>,
    pub pool: Vec<InnerStateRecord>,
    pub test: Vec<InnerStateRecord>,
}

/// Balance per relation, split off the test share, then carve the support
/// pool out of the training share.
pub fn split_records(records: Vec<InnerStateRecord>, cfg: &RunConfig) -> Result<DataSplit> {
    let seed = cfg.detector.seed;
    let outer = balance_and_split(records, cfg.train_fraction, seed)?;
    let inner = balance_and_split(outer.train, 1.0 - cfg.pool_fraction, seed.wrapping_add(1))?;
    Ok(DataSplit {
        train: inner.train,
        pool: inner.test,
        test: outer.test,
    })
}

/// Stats fitted on the training records, the trained model and its report.
pub struct Trained {
    pub stats: DatasetStats,
    pub preprocessor: Preprocessor,
    pub model: DetectorModel,
    pub report: TrainReport,
}

pub fn train_stage(train_set: &[InnerStateRecord], meta: &CaptureMeta, embeddings: &EmbeddingDictionary, cfg: &RunConfig) -> Result<Trained> {
    let stats = fit_stats(train_set, meta, cfg.stats_mode)?;
    let preprocessor = Preprocessor::new(stats.clone());
    let pre = preprocessor.apply_all(train_set, meta.top_k, embeddings)?;
    let detector = DetectorConfig {
        k: meta.top_k,
        ..cfg.detector.clone()
    };
    let (model, report) = train(&pre, meta.into(), &detector)?;
    Ok(Trained {
        stats,
        preprocessor,
        model,
        report,
    })
}

pub fn support_stage(
    trained: &Trained,
    pool: &[InnerStateRecord],
    meta: &CaptureMeta,
    embeddings: &EmbeddingDictionary,
    size: usize,
    seed: u64,
) -> Result<SupportSet> {
    let pre = trained.preprocessor.apply_all(pool, meta.top_k, embeddings)?;
    build_support_set(&trained.model, &pre, size, seed, "support-pool")
}

pub fn eval_stage(
    trained: &Trained,
    support: &SupportSet,
    test: &[InnerStateRecord],
    meta: &CaptureMeta,
    embeddings: &EmbeddingDictionary,
) -> Result<Metrics> {
    let pre = trained.preprocessor.apply_all(test, meta.top_k, embeddings)?;
    evaluate(&trained.model, support, &pre)
}

pub struct Experiment {
    pub trained: Trained,
    pub support: SupportSet,
    pub metrics: Metrics,
}

pub fn run_experiment(split: &DataSplit, meta: &CaptureMeta, embeddings: &EmbeddingDictionary, cfg: &RunConfig) -> Result<Experiment> {
    let trained = train_stage(&split.train, meta, embeddings, cfg)?;
    let support = support_stage(&trained, &split.pool, meta, embeddings, cfg.detector.support_size, cfg.detector.seed)?;
    let metrics = eval_stage(&trained, &support, &split.test, meta, embeddings)?;
    Ok(Experiment {
        trained,
        support,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LooOutcome {
    pub held_out: String,
    /// Relation tags present in the training and support records.
    pub train_relations: Vec<String>,
    pub train_records: usize,
    pub pool_records: usize,
    pub metrics: Metrics,
}

/// Train and build support on every other relation; test on `held_out`.
pub fn leave_one_out(capture: &CaptureFile, held_out: &str, cfg: &RunConfig) -> Result<LooOutcome> {
    let available = relations(&capture.records);
    if !available.iter().any(|r| r == held_out) {
        return Err(Error::param(format!(
            "unknown relation `{held_out}`; available: {}",
            available.join(", ")
        )));
    }
    if available.len() < 2 {
        return Err(Error::param("leave-one-out needs at least two relations"));
    }
    let (test, rest): (Vec<InnerStateRecord>, Vec<InnerStateRecord>) =
        capture.records.iter().cloned().partition(|r| r.relation == held_out);
    for label in [Label::Factual, Label::Nonfactual] {
        if !test.iter().any(|r| r.label == label) {
            return Err(Error::param(format!("held-out relation `{held_out}` has no {label} records")));
        }
    }
    let inner = balance_and_split(rest, 1.0 - cfg.pool_fraction, cfg.detector.seed)?;
    let split = DataSplit {
        train: inner.train,
        pool: inner.test,
        test,
    };
    if split.train.iter().chain(&split.pool).any(|r| r.relation == held_out) {
        return Err(Error::Data(format!("held-out relation `{held_out}` leaked into training")));
    }
    let exp = run_experiment(&split, &capture.meta, &capture.embeddings, cfg)?;
    Ok(LooOutcome {
        held_out: held_out.to_string(),
        train_relations: relations(&split.train.iter().chain(&split.pool).cloned().collect::<Vec<_>>()),
        train_records: split.train.len(),
        pool_records: split.pool.len(),
        metrics: exp.metrics,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum AblationAxis {
    TopK(Vec<usize>),
    SupportSize(Vec<usize>),
    Architecture(Vec<Variant>),
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::TopK(_) => "top_k",
            AblationAxis::SupportSize(_) => "support_size",
            AblationAxis::Architecture(_) => "architecture",
        }
    }

    /// The standard settings of a named axis.
    pub fn standard(name: &str) -> Result<Self> {
        match name {
            "top_k" | "top-k" => Ok(AblationAxis::TopK(vec![2, 4, 6, 8, 10])),
            "support_size" | "support-size" => Ok(AblationAxis::SupportSize(vec![50, 100, 150, 200, 250])),
            "architecture" => Ok(AblationAxis::Architecture(Variant::ALL.to_vec())),
            other => Err(Error::Config(format!("unknown ablation axis `{other}` (top_k | support_size | architecture)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub setting: String,
    pub accuracy: f64,
    pub metrics: Metrics,
}

/// One train/evaluate per setting with a shared seed. Support-size rows share
/// a single trained model, which is what independent runs would produce.
pub fn ablation_sweep(
    split: &DataSplit,
    meta: &CaptureMeta,
    embeddings: &EmbeddingDictionary,
    axis: &AblationAxis,
    cfg: &RunConfig,
) -> Result<Vec<AblationRow>> {
    let row = |setting: String, metrics: Metrics| AblationRow {
        axis: axis.name().to_string(),
        setting,
        accuracy: metrics.accuracy,
        metrics,
    };
    let mut rows = Vec::new();
    match axis {
        AblationAxis::TopK(ks) => {
            if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > meta.top_k) {
                return Err(Error::param(format!("requested k = {bad} exceeds the captured k = {}", meta.top_k)));
            }
            for &k in ks {
                let (train, m) = truncate_topk(&split.train, meta, k)?;
                let (pool, _) = truncate_topk(&split.pool, meta, k)?;
                let (test, _) = truncate_topk(&split.test, meta, k)?;
                let sub = DataSplit { train, pool, test };
                let exp = run_experiment(&sub, &m, embeddings, cfg)?;
                rows.push(row(k.to_string(), exp.metrics));
            }
        }
        AblationAxis::SupportSize(sizes) => {
            let trained = train_stage(&split.train, meta, embeddings, cfg)?;
            for &size in sizes {
                let support = support_stage(&trained, &split.pool, meta, embeddings, size, cfg.detector.seed)?;
                let metrics = eval_stage(&trained, &support, &split.test, meta, embeddings)?;
                rows.push(row(size.to_string(), metrics));
            }
        }
        AblationAxis::Architecture(variants) => {
            for &variant in variants {
                let mut c = cfg.clone();
                c.detector.variant = variant;
                let exp = run_experiment(split, meta, embeddings, &c)?;
                rows.push(row(variant.to_string(), exp.metrics));
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenFlag {
    pub position: usize,
    pub token: String,
    pub label: Label,
    pub distance: f64,
}

/// One flag per token-position record, in the given order.
pub fn annotate(
    records: &[InnerStateRecord],
    meta: &CaptureMeta,
    embeddings: &EmbeddingDictionary,
    preprocessor: &Preprocessor,
    model: &DetectorModel,
    support: &SupportSet,
) -> Result<Vec<TokenFlag>> {
    if records.is_empty() {
        return Err(Error::param("annotation needs at least one token record"));
    }
    let pre = preprocessor.apply_all(records, meta.top_k, embeddings)?;
    let emb = model.embed(&pre)?;
    records
        .iter()
        .zip(&emb)
        .enumerate()
        .map(|(position, (r, e))| {
            let p = nearest(support, e)?;
            Ok(TokenFlag {
                position,
                token: r.generated_word.clone(),
                label: p.label,
                distance: p.distance,
            })
        })
        .collect()
}

/// Token and flag columns aligned, one token per line.
pub fn render_annotation(flags: &[TokenFlag]) -> String {
    let width = flags.iter().map(|f| f.token.chars().count()).max().unwrap_or(0);
    flags
        .iter()
        .map(|f| format!("{:<width$}  {:<10}  {:.6}\n", f.token, f.label.as_str(), f.distance))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn digest_file(path: &Path) -> Result<Artifact> {
    let data = std::fs::read(path)?;
    Ok(Artifact {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&data)),
        bytes: data.len() as u64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub duration_secs: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_synthetic;

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = RunConfig::default().with_seed(9);
        cfg.set("rnn_hidden", "32, 16").unwrap();
        cfg.set("variant", "emb-fc").unwrap();
        cfg.set("relations", "a,b").unwrap();
        cfg.set("lr", "0.002").unwrap();
        let back = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_defaults_and_errors() {
        let cfg = RunConfig::parse("# comment only\n\n").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("epochs = many"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("epochs"), Err(Error::Config(_))));
    }

    #[test]
    fn split_is_disjoint_and_balanced() {
        let set = generate_synthetic(&SynthConfig::default(), 100).unwrap();
        let split = split_records(set.records, &RunConfig::default()).unwrap();
        assert_eq!(split.train.len() + split.pool.len() + split.test.len(), 200);
        for part in [&split.train, &split.pool, &split.test] {
            let f = part.iter().filter(|r| r.label == Label::Factual).count();
            assert_eq!(2 * f, part.len());
        }
        let prompts: std::collections::HashSet<_> = split.train.iter().chain(&split.pool).chain(&split.test).map(|r| &r.prompt).collect();
        assert_eq!(prompts.len(), 200);
    }

    #[test]
    fn loo_rejects_unknown_relation() {
        let cfg = SynthConfig {
            relations: vec!["a".into(), "b".into()],
            ..Default::default()
        };
        let capture = generate_synthetic(&cfg, 10).unwrap().into_capture();
        match leave_one_out(&capture, "zzz", &RunConfig::default()) {
            Err(Error::Parameter(m)) => assert!(m.contains("a, b")),
            _ => panic!("expected parameter error"),
        }
    }

    #[test]
    fn topk_axis_rejects_oversized_k() {
        let set = generate_synthetic(&SynthConfig::default(), 10).unwrap();
        let split = split_records(set.records, &RunConfig::default()).unwrap();
        let err = ablation_sweep(&split, &set.meta, &set.embeddings, &AblationAxis::TopK(vec![2, 12]), &RunConfig::default());
        assert!(matches!(err, Err(Error::Parameter(_))));
    }

    #[test]
    fn annotation_rendering_aligns_columns() {
        let flags = vec![
            TokenFlag { position: 0, token: "Stanley".into(), label: Label::Factual, distance: 0.5 },
            TokenFlag { position: 1, token: "in".into(), label: Label::Nonfactual, distance: 1.25 },
        ];
        let text = render_annotation(&flags);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "Stanley  factual     0.500000");
        assert_eq!(lines[1], "in       nonfactual  1.250000");
    }

    #[test]
    fn digest_is_sha256() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"abc").unwrap();
        let a = digest_file(&p).unwrap();
        assert_eq!(a.sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_eq!(a.bytes, 3);
    }
}
