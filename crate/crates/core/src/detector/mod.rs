//! Metric-learning factuality detector: four inner-state encoders fused into
//! a unit-norm embedding, trained with a triplet margin loss and queried by
//! nearest neighbour against a labelled support set.

mod io;
mod loss;
mod model;
mod support;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::optim::AdamConfig;

pub use io::{load_checkpoint, load_support, read_checkpoint, read_support, save_checkpoint, save_support, write_checkpoint, write_support};
pub use loss::{mine_triplets, triplet_loss, triplet_loss_grad, Triplet};
pub use model::{DetectorInputs, DetectorModel};
pub use support::{build_support_set, evaluate, nearest, predict, Confusion, Metrics, Prediction, RelationMetrics, SupportEntry, SupportSet};
pub use train::{batch_triplet_loss, train, TrainReport};

/// Which sub-encoders are swapped for simpler ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// Fully-connected activation encoder.
    ActFc,
    /// Fully-connected probability encoder.
    ProbFc,
    /// Elman recurrent rank encoder.
    RankRnn,
    /// Fully-connected top-k embedding-similarity encoder.
    EmbFc,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::ActFc, Variant::ProbFc, Variant::RankRnn, Variant::EmbFc];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ActFc => "act-fc",
            Variant::ProbFc => "prob-fc",
            Variant::RankRnn => "rank-rnn",
            Variant::EmbFc => "emb-fc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture variant `{s}` (full | act-fc | prob-fc | rank-rnn | emb-fc)")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub sub_embedding_dim: usize,
    pub fused_dim: usize,
    pub k: usize,
    pub margin: f64,
    /// Minkowski exponent of the training distance.
    pub p: f64,
    pub distance_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub rnn_hidden: Vec<usize>,
    pub support_size: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Channels of the first residual stage; later stages double it.
    pub resnet_width: usize,
    /// Hidden width of the fully-connected replacement encoders.
    pub mlp_hidden: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            sub_embedding_dim: 24,
            fused_dim: 64,
            k: 10,
            margin: 1.0,
            p: 2.0,
            distance_eps: 1e-6,
            epochs: 30,
            batch_size: 64,
            optimizer: AdamConfig::default(),
            rnn_hidden: vec![128, 64],
            support_size: 100,
            seed: 0,
            variant: Variant::Full,
            resnet_width: 4,
            mlp_hidden: 128,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sub_embedding_dim", self.sub_embedding_dim),
            ("fused_dim", self.fused_dim),
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("support_size", self.support_size),
            ("resnet_width", self.resnet_width),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(format!("{name} must be positive")));
            }
        }
        if self.rnn_hidden.is_empty() || self.rnn_hidden.contains(&0) {
            return Err(Error::param("rnn_hidden must be a non-empty list of positive sizes"));
        }
        if !(self.margin > 0.0) {
            return Err(Error::param(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.p >= 1.0) || !(self.distance_eps >= 0.0) {
            return Err(Error::param("distance exponent must be ≥ 1 and epsilon non-negative"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::param("optimizer settings out of range"));
        }
        Ok(())
    }
}
