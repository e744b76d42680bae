use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DetectorConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::layers::{CellKind, Linear, MlpEncoder, RecurrentEncoder, ResNetEncoder};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::preprocess::{InputDims, PreprocessedRecord};

#[derive(Clone, Debug)]
enum ImageEncoder {
    Conv(ResNetEncoder),
    Dense(MlpEncoder),
}

impl ImageEncoder {
    fn new(store: &mut ParamStore, name: &str, hw: (usize, usize), dense: bool, cfg: &DetectorConfig, rng: &mut ChaCha8Rng) -> Self {
        if dense {
            ImageEncoder::Dense(MlpEncoder::new(store, name, hw.0 * hw.1, cfg.mlp_hidden, cfg.sub_embedding_dim, rng))
        } else {
            ImageEncoder::Conv(ResNetEncoder::new(store, name, hw, cfg.resnet_width, cfg.sub_embedding_dim, rng))
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        match self {
            ImageEncoder::Conv(e) => e.forward(g, store, x),
            ImageEncoder::Dense(e) => e.forward(g, store, x),
        }
    }
}

/// Batched detector inputs in encoder layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorInputs {
    /// [N, 1, L, D]
    pub activation: Tensor,
    /// [N, 1, L−1, k]
    pub similarity: Tensor,
    /// [N, 1, L, k]
    pub probability: Tensor,
    /// [N, L]
    pub rank: Tensor,
}

impl DetectorInputs {
    pub fn from_records(records: &[&PreprocessedRecord], dims: InputDims) -> Result<Self> {
        let InputDims {
            num_layers: l,
            activation_dim: d,
            top_k: k,
        } = dims;
        let n = records.len();
        let mut act = Vec::with_capacity(n * l * d);
        let mut sim = Vec::with_capacity(n * (l - 1) * k);
        let mut prob = Vec::with_capacity(n * l * k);
        let mut rank = Vec::with_capacity(n * l);
        for (i, r) in records.iter().enumerate() {
            if !r.dims_match(dims) {
                return Err(Error::param(format!(
                    "record {i} does not match the model's L={l}, D={d}, k={k}"
                )));
            }
            act.extend_from_slice(&r.norm_activation);
            sim.extend_from_slice(&r.topk_similarity);
            prob.extend(r.topk_probs.iter().map(|&p| p as f64));
            rank.extend_from_slice(&r.transformed_ranks);
        }
        Ok(Self {
            activation: Tensor::new(vec![n, 1, l, d], act),
            similarity: Tensor::new(vec![n, 1, l - 1, k], sim),
            probability: Tensor::new(vec![n, 1, l, k], prob),
            rank: Tensor::new(vec![n, l], rank),
        })
    }

    pub fn len(&self) -> usize {
        self.rank.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph handles of the four inputs, in the order activation, similarity,
/// probability, rank.
pub type InputVars = [Var; 4];

#[derive(Clone, Debug)]
pub struct DetectorModel {
    config: DetectorConfig,
    dims: InputDims,
    pub(crate) store: ParamStore,
    act: ImageEncoder,
    sim: ImageEncoder,
    prob: ImageEncoder,
    rank: RecurrentEncoder,
    fuse: Linear,
}

impl DetectorModel {
    /// Fresh weights drawn from the config seed.
    pub fn new(config: &DetectorConfig, dims: InputDims) -> Result<Self> {
        config.validate()?;
        if dims.num_layers < 2 || dims.activation_dim == 0 || dims.top_k == 0 {
            return Err(Error::param(format!("input dims {dims:?} need L ≥ 2, D ≥ 1, k ≥ 1")));
        }
        if dims.top_k != config.k {
            return Err(Error::param(format!(
                "config k = {} but inputs carry k = {}",
                config.k, dims.top_k
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (l, d, k) = (dims.num_layers, dims.activation_dim, dims.top_k);
        let v = config.variant;
        let act = ImageEncoder::new(&mut store, "activation", (l, d), v == Variant::ActFc, config, &mut rng);
        let sim = ImageEncoder::new(&mut store, "similarity", (l - 1, k), v == Variant::EmbFc, config, &mut rng);
        let prob = ImageEncoder::new(&mut store, "probability", (l, k), v == Variant::ProbFc, config, &mut rng);
        let cell = if v == Variant::RankRnn { CellKind::Simple } else { CellKind::Gru };
        let rank = RecurrentEncoder::new(&mut store, "rank", cell, &config.rnn_hidden, config.sub_embedding_dim, &mut rng);
        let fuse = Linear::new(&mut store, "fusion", 4 * config.sub_embedding_dim, config.fused_dim, &mut rng);
        Ok(Self {
            config: config.clone(),
            dims,
            store,
            act,
            sim,
            prob,
            rank,
            fuse,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn dims(&self) -> InputDims {
        self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Register the inputs on `g`.
    pub fn input_vars(g: &mut Graph, inputs: &DetectorInputs, requires_grad: bool) -> InputVars {
        [
            g.input(inputs.activation.clone(), requires_grad),
            g.input(inputs.similarity.clone(), requires_grad),
            g.input(inputs.probability.clone(), requires_grad),
            g.input(inputs.rank.clone(), requires_grad),
        ]
    }

    /// [N, fused_dim] unit-norm embeddings.
    pub fn forward(&self, g: &mut Graph, x: InputVars) -> Var {
        let s = &self.store;
        let parts = [
            self.act.forward(g, s, x[0]),
            self.rank.forward(g, s, x[3]),
            self.sim.forward(g, s, x[1]),
            self.prob.forward(g, s, x[2]),
        ];
        let mixed = g.concat_cols(&parts);
        let fused = self.fuse.forward(g, s, mixed);
        let rect = g.relu(fused);
        g.l2_normalize_rows(rect)
    }

    /// Evaluation-mode embeddings, computed in chunks of the batch size.
    pub fn embed(&self, records: &[PreprocessedRecord]) -> Result<Vec<Vec<f64>>> {
        let refs: Vec<&PreprocessedRecord> = records.iter().collect();
        self.embed_refs(&refs)
    }

    pub fn embed_refs(&self, records: &[&PreprocessedRecord]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(self.config.batch_size.max(1)) {
            let inputs = DetectorInputs::from_records(chunk, self.dims)?;
            let mut g = Graph::inference();
            let x = Self::input_vars(&mut g, &inputs, false);
            let e = self.forward(&mut g, x);
            let ev = g.value(e);
            out.extend((0..ev.rows()).map(|r| ev.row(r).to_vec()));
        }
        Ok(out)
    }

    pub fn forward_embed(&self, record: &PreprocessedRecord) -> Result<Vec<f64>> {
        Ok(self.embed_refs(&[record])?.remove(0))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::capture::Label;
    use rand::Rng;

    pub(crate) fn mini_dims() -> InputDims {
        InputDims {
            num_layers: 4,
            activation_dim: 8,
            top_k: 3,
        }
    }

    pub(crate) fn mini_config() -> DetectorConfig {
        DetectorConfig {
            k: 3,
            resnet_width: 2,
            rnn_hidden: vec![6, 5],
            mlp_hidden: 8,
            ..DetectorConfig::default()
        }
    }

    pub(crate) fn random_record(rng: &mut impl Rng, dims: InputDims, label: Label) -> PreprocessedRecord {
        let InputDims {
            num_layers: l,
            activation_dim: d,
            top_k: k,
        } = dims;
        PreprocessedRecord {
            norm_activation: (0..l * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            transformed_ranks: (0..l).map(|_| rng.random_range(0.0..1.0)).collect(),
            topk_similarity: (0..(l - 1) * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            topk_probs: (0..l * k).map(|_| rng.random_range(0.0f32..0.3)).collect(),
            label,
            relation: "r".into(),
            category: "c".into(),
        }
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in Variant::ALL {
            let cfg = DetectorConfig { variant: v, ..mini_config() };
            let model = DetectorModel::new(&cfg, mini_dims()).unwrap();
            let recs: Vec<_> = (0..5).map(|_| random_record(&mut rng, mini_dims(), Label::Factual)).collect();
            let e = model.embed(&recs).unwrap();
            for row in &e {
                assert_eq!(row.len(), 64);
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-5, "{v}: {norm}");
            }
            assert_eq!(model.forward_embed(&recs[2]).unwrap(), e[2]);
        }
    }

    #[test]
    fn zero_input_is_still_unit_norm() {
        let model = DetectorModel::new(&mini_config(), mini_dims()).unwrap();
        let e = model.forward_embed(&PreprocessedRecord::zeros(mini_dims(), Label::Factual)).unwrap();
        assert!((e.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn dimension_mismatch_is_a_parameter_error() {
        let model = DetectorModel::new(&mini_config(), mini_dims()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut r = random_record(&mut rng, mini_dims(), Label::Factual);
        r.norm_activation.pop();
        assert!(matches!(model.forward_embed(&r), Err(Error::Parameter(_))));
        let wrong_k = DetectorConfig { k: 4, ..mini_config() };
        assert!(DetectorModel::new(&wrong_k, mini_dims()).is_err());
    }

    #[test]
    fn variants_swap_the_named_encoder() {
        let count = |v: Variant, prefix: &str| {
            let m = DetectorModel::new(&DetectorConfig { variant: v, ..mini_config() }, mini_dims()).unwrap();
            m.params().entries().iter().filter(|e| e.name.starts_with(prefix) && e.name.ends_with("fc1.weight")).count()
        };
        assert_eq!(count(Variant::Full, "similarity"), 0);
        assert_eq!(count(Variant::EmbFc, "similarity"), 1);
        assert_eq!(count(Variant::ActFc, "activation"), 1);
        assert_eq!(count(Variant::ProbFc, "probability"), 1);
        let gru = DetectorModel::new(&mini_config(), mini_dims()).unwrap();
        let rnn = DetectorModel::new(&DetectorConfig { variant: Variant::RankRnn, ..mini_config() }, mini_dims()).unwrap();
        assert!(rnn.params().num_trainable() < gru.params().num_trainable());
    }
}
