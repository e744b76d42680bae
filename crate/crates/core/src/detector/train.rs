use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{mine_triplets, Triplet};
use super::model::{DetectorInputs, DetectorModel};
use super::DetectorConfig;
use crate::capture::Label;
use crate::error::{Error, Result};
use crate::nn::layers::apply_bn_observations;
use crate::nn::optim::Adam;
use crate::nn::{Graph, Var};
use crate::preprocess::{InputDims, PreprocessedRecord};

/// RNG streams derived from the run seed.
pub(crate) const SHUFFLE_STREAM: u64 = 1;
pub(crate) const MINING_STREAM: u64 = 2;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub history: Vec<f64>,
    /// Batches skipped for lacking one of the labels.
    pub skipped_batches: usize,
    pub steps: usize,
}

/// Mean hinge loss of `triplets` over batch embeddings `emb`.
pub fn batch_triplet_loss(g: &mut Graph, emb: Var, triplets: &[Triplet], cfg: &DetectorConfig) -> Var {
    let a: Vec<usize> = triplets.iter().map(|t| t.anchor).collect();
    let p: Vec<usize> = triplets.iter().map(|t| t.positive).collect();
    let n: Vec<usize> = triplets.iter().map(|t| t.negative).collect();
    let (ea, ep, en) = (g.gather_rows(emb, &a), g.gather_rows(emb, &p), g.gather_rows(emb, &n));
    let dp = g.pairwise_distance(ea, ep, cfg.p, cfg.distance_eps);
    let dn = g.pairwise_distance(ea, en, cfg.p, cfg.distance_eps);
    let diff = g.sub(dp, dn);
    let shifted = g.affine(diff, 1.0, cfg.margin);
    let hinge = g.relu(shifted);
    g.mean(hinge)
}

/// Train a fresh model. Deterministic given the config seed and the order of
/// `train_set`. Weights are rounded to f32 at the end so checkpoints reload
/// bit-exactly.
pub fn train(train_set: &[PreprocessedRecord], dims: InputDims, config: &DetectorConfig) -> Result<(DetectorModel, TrainReport)> {
    if train_set.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    if config.epochs == 0 {
        return Err(Error::param("epochs must be at least 1"));
    }
    if config.batch_size < 2 {
        return Err(Error::param("batch_size must be at least 2 for triplet mining"));
    }
    let has = |l: Label| train_set.iter().any(|r| r.label == l);
    if !has(Label::Factual) || !has(Label::Nonfactual) {
        return Err(Error::param("training set must contain both labels"));
    }
    let mut model = DetectorModel::new(config, dims)?;
    let mut adam = Adam::new(config.optimizer, &model.store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut mining_rng = ChaCha8Rng::seed_from_u64(config.seed);
    mining_rng.set_stream(MINING_STREAM);

    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreprocessedRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
            let labels: Vec<Label> = batch.iter().map(|r| r.label).collect();
            let Some(triplets) = mine_triplets(&labels, &mut mining_rng).filter(|t| !t.is_empty()) else {
                warn!("epoch {epoch}: skipping a batch of {} that lacks one label", batch.len());
                report.skipped_batches += 1;
                continue;
            };
            let inputs = DetectorInputs::from_records(&batch, dims)?;
            let mut g = Graph::new(true, true);
            let x = DetectorModel::input_vars(&mut g, &inputs, false);
            let emb = model.forward(&mut g, x);
            let loss = batch_triplet_loss(&mut g, emb, &triplets, config);
            total += g.value(loss).data()[0];
            batches += 1;
            let grads = g.backward(loss);
            adam.step(&mut model.store, &g, &grads);
            let observations = g.take_bn_observations();
            apply_bn_observations(&mut model.store, &observations);
            report.steps += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { f64::NAN };
        debug!("epoch {epoch}: mean loss {mean:.6}");
        report.history.push(mean);
    }
    model.store.round_to_f32();
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::model::tests::{mini_config, mini_dims, random_record};

    fn separable(n: usize, seed: u64) -> Vec<PreprocessedRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..2 * n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Factual } else { Label::Nonfactual };
                let mut r = random_record(&mut rng, mini_dims(), label);
                let shift = if label == Label::Factual { 1.5 } else { -1.5 };
                r.norm_activation.iter_mut().for_each(|v| *v = *v * 0.3 + shift);
                r
            })
            .collect()
    }

    #[test]
    fn loss_decreases_and_is_reproducible() {
        let data = separable(32, 4);
        let cfg = DetectorConfig { epochs: 8, batch_size: 16, ..mini_config() };
        let (m1, r1) = train(&data, mini_dims(), &cfg).unwrap();
        let (m2, r2) = train(&data, mini_dims(), &cfg).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.history.last().unwrap() < &r1.history[0], "{:?}", r1.history);
        assert_eq!(m1.embed(&data).unwrap(), m2.embed(&data).unwrap());
        assert_eq!(r1.steps, 8 * 4);
    }

    #[test]
    fn boundary_errors() {
        let data = separable(4, 0);
        let zero = DetectorConfig { epochs: 0, ..mini_config() };
        assert!(matches!(train(&data, mini_dims(), &zero), Err(Error::Parameter(_))));
        assert!(matches!(train(&[], mini_dims(), &mini_config()), Err(Error::Parameter(_))));
        let one_label: Vec<_> = data.into_iter().filter(|r| r.label == Label::Factual).collect();
        assert!(train(&one_label, mini_dims(), &mini_config()).is_err());
    }

    #[test]
    fn single_label_batches_are_skipped() {
        // batch size 2 over [F, F, N, N] in a fixed order forces skips most epochs
        let mut data = separable(2, 1);
        data.sort_by_key(|r| r.label);
        let cfg = DetectorConfig { epochs: 20, batch_size: 2, ..mini_config() };
        let (_, report) = train(&data, mini_dims(), &cfg).unwrap();
        assert_eq!(report.history.len(), 20);
        assert!(report.skipped_batches > 0);
        assert_eq!(report.skipped_batches + report.steps, 40);
    }
}
