//! Interpretability and observational analyses: integrated-gradient
//! attributions of the detector's decision margin, per-layer frequency of
//! top-activated neurons among factual records, and a single-layer
//! activation probe for comparison.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::capture::{CaptureMeta, InnerStateRecord, Label};
use crate::detector::{DetectorInputs, DetectorModel, SupportSet};
use crate::error::{Error, Result};
use crate::nn::layers::Linear;
use crate::nn::optim::{Adam, AdamConfig};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::preprocess::{InputDims, PreprocessedRecord, SIGMA_FLOOR};

/// Signed attributions for each input channel plus the completeness check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttributionReport {
    pub steps: usize,
    /// L×D
    pub activation: Vec<f64>,
    /// L
    pub rank: Vec<f64>,
    /// (L−1)×k
    pub similarity: Vec<f64>,
    /// L×k
    pub probability: Vec<f64>,
    /// Mean activation attribution per layer.
    pub activation_layer_means: Vec<f64>,
    pub score_input: f64,
    pub score_baseline: f64,
    pub attribution_sum: f64,
    /// |Σ attributions − (F(x) − F(baseline))|
    pub residual: f64,
    /// `residual` divided by |F(x) − F(baseline)| (or `residual` itself when
    /// that difference is zero).
    pub relative_residual: f64,
}

/// Channel values in the order activation, similarity, probability, rank.
fn channels(r: &PreprocessedRecord) -> [Vec<f64>; 4] {
    [
        r.norm_activation.clone(),
        r.topk_similarity.clone(),
        r.topk_probs.iter().map(|&p| p as f64).collect(),
        r.transformed_ranks.clone(),
    ]
}

fn inputs_from_rows(rows: &[[Vec<f64>; 4]], dims: InputDims) -> DetectorInputs {
    let InputDims {
        num_layers: l,
        activation_dim: d,
        top_k: k,
    } = dims;
    let n = rows.len();
    let cat = |c: usize| rows.iter().flat_map(|r| r[c].iter().copied()).collect::<Vec<f64>>();
    DetectorInputs {
        activation: Tensor::new(vec![n, 1, l, d], cat(0)),
        similarity: Tensor::new(vec![n, 1, l - 1, k], cat(1)),
        probability: Tensor::new(vec![n, 1, l, k], cat(2)),
        rank: Tensor::new(vec![n, l], cat(3)),
    }
}

/// Support embeddings ordered factual first, with the factual count.
fn support_by_label(support: &SupportSet) -> Result<(Vec<&[f64]>, usize)> {
    let mut rows: Vec<&[f64]> = Vec::with_capacity(support.len());
    rows.extend(support.entries.iter().filter(|e| e.label == Label::Factual).map(|e| e.embedding.as_slice()));
    let nf = rows.len();
    rows.extend(support.entries.iter().filter(|e| e.label == Label::Nonfactual).map(|e| e.embedding.as_slice()));
    if nf == 0 || nf == rows.len() {
        return Err(Error::param("attribution needs support entries of both labels"));
    }
    Ok((rows, nf))
}

/// Σ over rows of F = dist(E, nearest non-factual) − dist(E, nearest factual).
fn margin_sum(g: &mut Graph, emb: Var, support: &[&[f64]], num_factual: usize) -> Var {
    let n = g.value(emb).rows();
    let m = support.len();
    let dim = support[0].len();
    let rep: Vec<usize> = (0..n).flat_map(|r| std::iter::repeat_n(r, m)).collect();
    let tiled = g.gather_rows(emb, &rep);
    let mut sup = Vec::with_capacity(n * m * dim);
    for _ in 0..n {
        for s in support {
            sup.extend_from_slice(s);
        }
    }
    let sup = g.constant(Tensor::new(vec![n * m, dim], sup));
    let dist = g.pairwise_distance(tiled, sup, 2.0, 0.0);
    let grid = g.reshape(dist, &[n, m]);
    let df = g.col_slice(grid, 0, num_factual);
    let dn = g.col_slice(grid, num_factual, m - num_factual);
    let near_f = g.row_min(df);
    let near_n = g.row_min(dn);
    let margin = g.sub(near_n, near_f);
    g.sum(margin)
}

/// The scalar F for a single record, in evaluation mode.
pub fn decision_margin(model: &DetectorModel, support: &SupportSet, record: &PreprocessedRecord) -> Result<f64> {
    let (rows, nf) = support_by_label(support)?;
    let inputs = DetectorInputs::from_records(&[record], model.dims())?;
    let mut g = Graph::inference();
    let x = DetectorModel::input_vars(&mut g, &inputs, false);
    let emb = model.forward(&mut g, x);
    let f = margin_sum(&mut g, emb, &rows, nf);
    Ok(g.value(f).data()[0])
}

/// Straight-line path from `baseline` to `record`, midpoint Riemann sum
/// over `steps` points, evaluation-mode model.
pub fn integrated_gradients(
    model: &DetectorModel,
    support: &SupportSet,
    record: &PreprocessedRecord,
    baseline: &PreprocessedRecord,
    steps: usize,
) -> Result<AttributionReport> {
    if steps < 2 {
        return Err(Error::param(format!("integrated gradients needs at least 2 steps, got {steps}")));
    }
    let dims = model.dims();
    if !record.dims_match(dims) || !baseline.dims_match(dims) {
        return Err(Error::param("record and baseline must match the model's input shape"));
    }
    let (rows, nf) = support_by_label(support)?;
    let x = channels(record);
    let x0 = channels(baseline);
    let delta: Vec<Vec<f64>> = x.iter().zip(&x0).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p - q).collect()).collect();

    let score_input = decision_margin(model, support, record)?;
    let score_baseline = decision_margin(model, support, baseline)?;
    let mut grad_sums: Vec<Vec<f64>> = x.iter().map(|c| vec![0.0; c.len()]).collect();

    if delta.iter().any(|c| c.iter().any(|&v| v != 0.0)) {
        let chunk = model.config().batch_size.max(1);
        let mut start = 0;
        while start < steps {
            let end = (start + chunk).min(steps);
            let path: Vec<[Vec<f64>; 4]> = (start..end)
                .map(|s| {
                    let alpha = (s as f64 + 0.5) / steps as f64;
                    std::array::from_fn(|c| x0[c].iter().zip(&delta[c]).map(|(b, d)| b + alpha * d).collect())
                })
                .collect();
            let inputs = inputs_from_rows(&path, dims);
            let mut g = Graph::new(false, false);
            let vars = DetectorModel::input_vars(&mut g, &inputs, true);
            let emb = model.forward(&mut g, vars);
            let f = margin_sum(&mut g, emb, &rows, nf);
            let grads = g.backward(f);
            for (c, &v) in vars.iter().enumerate() {
                if let Some(gr) = grads.get(v) {
                    let width = grad_sums[c].len();
                    for row in gr.data().chunks(width) {
                        for (acc, gv) in grad_sums[c].iter_mut().zip(row) {
                            *acc += gv;
                        }
                    }
                }
            }
            start = end;
        }
    }

    let attr: Vec<Vec<f64>> = grad_sums
        .iter()
        .zip(&delta)
        .map(|(gs, d)| gs.iter().zip(d).map(|(g, d)| g / steps as f64 * d).collect())
        .collect();
    let attribution_sum: f64 = attr.iter().flatten().sum();
    let change = score_input - score_baseline;
    let residual = (attribution_sum - change).abs();
    let relative_residual = if change != 0.0 { residual / change.abs() } else { residual };
    let [activation, similarity, probability, rank]: [Vec<f64>; 4] = attr.try_into().expect("four channels");
    let activation_layer_means = activation
        .chunks(dims.activation_dim)
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    Ok(AttributionReport {
        steps,
        activation,
        rank,
        similarity,
        probability,
        activation_layer_means,
        score_input,
        score_baseline,
        attribution_sum,
        residual,
        relative_residual,
    })
}

/// Grayscale map with one row per layer and four columns: mean activation,
/// rank, mean similarity (layer l to l+1; zero on the last row) and mean
/// probability attribution. Mid-gray is zero; the scale is symmetric.
pub fn write_attribution_pgm(report: &AttributionReport, dims: InputDims, mut out: impl Write) -> Result<()> {
    let l = dims.num_layers;
    let k = dims.top_k;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    let mut cells = Vec::with_capacity(l * 4);
    for layer in 0..l {
        cells.push(report.activation_layer_means[layer]);
        cells.push(report.rank[layer]);
        cells.push(if layer + 1 < l { mean(&report.similarity[layer * k..(layer + 1) * k]) } else { 0.0 });
        cells.push(mean(&report.probability[layer * k..(layer + 1) * k]));
    }
    let peak = cells.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    write!(out, "P5\n4 {l}\n255\n")?;
    let pixels: Vec<u8> = cells
        .iter()
        .map(|v| {
            let t = if peak > 0.0 { v / peak } else { 0.0 };
            (127.5 + 127.5 * t).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    out.write_all(&pixels)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NeuronFrequency {
    pub neuron: usize,
    pub frequency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NeuronFrequencyTable {
    pub percentile: f64,
    pub records: usize,
    /// Per layer, the retained neurons by descending frequency (ties by
    /// ascending index).
    pub per_layer: Vec<Vec<NeuronFrequency>>,
}

/// ⌈percentile·D⌉, tolerant of floating-point noise in the product.
pub fn retained_count(percentile: f64, dim: usize) -> usize {
    let exact = percentile * dim as f64;
    ((exact - 1e-9 * exact.max(1.0)).ceil() as usize).clamp(1, dim)
}

/// Frequency with which each neuron lands in a factual record's per-layer
/// top ⌈percentile·D⌉ activations. Non-factual records are ignored.
pub fn factual_neuron_frequency(records: &[InnerStateRecord], meta: &CaptureMeta, percentile: f64) -> Result<NeuronFrequencyTable> {
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(Error::param(format!("percentile {percentile} must lie in (0, 1)")));
    }
    let (l, d) = (meta.num_layers, meta.activation_dim);
    let factual: Vec<&InnerStateRecord> = records.iter().filter(|r| r.label == Label::Factual).collect();
    if factual.is_empty() {
        return Err(Error::param("no factual records"));
    }
    let m = retained_count(percentile, d);
    let mut counts = vec![vec![0usize; d]; l];
    let mut order: Vec<usize> = Vec::with_capacity(d);
    for r in &factual {
        if r.activation_map.len() != l * d {
            return Err(Error::param("activation map does not match L×D"));
        }
        for (layer, row) in r.activation_map.chunks(d).enumerate() {
            order.clear();
            order.extend(0..d);
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &n in &order[..m] {
                counts[layer][n] += 1;
            }
        }
    }
    let total = factual.len() as f64;
    let per_layer = counts
        .into_iter()
        .map(|c| {
            let mut ranked: Vec<usize> = (0..d).collect();
            ranked.sort_by(|&a, &b| c[b].cmp(&c[a]).then(a.cmp(&b)));
            ranked[..m]
                .iter()
                .map(|&n| NeuronFrequency {
                    neuron: n,
                    frequency: c[n] as f64 / total,
                })
                .collect()
        })
        .collect();
    Ok(NeuronFrequencyTable {
        percentile,
        records: factual.len(),
        per_layer,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            epochs: 30,
            batch_size: 64,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineMetrics {
    pub layer: usize,
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub history: Vec<f64>,
}

fn class_of(label: Label) -> usize {
    label.tag() as usize
}

/// Two-layer rectified classifier on one layer's activation row, trained
/// with cross-entropy. Features are standardized with training statistics.
pub fn baseline_single_layer(
    train: &[InnerStateRecord],
    test: &[InnerStateRecord],
    meta: &CaptureMeta,
    layer: usize,
    config: &BaselineConfig,
) -> Result<BaselineMetrics> {
    let (l, d) = (meta.num_layers, meta.activation_dim);
    if layer >= l {
        return Err(Error::param(format!("layer {layer} out of range (L = {l})")));
    }
    if config.epochs == 0 || config.batch_size == 0 || config.hidden == 0 {
        return Err(Error::param("baseline epochs, batch size and hidden width must be positive"));
    }
    let labels_present = |rs: &[InnerStateRecord], lab: Label| rs.iter().any(|r| r.label == lab);
    if !labels_present(train, Label::Factual) || !labels_present(train, Label::Nonfactual) {
        return Err(Error::param("baseline training set must contain both labels"));
    }
    if test.is_empty() {
        return Err(Error::param("baseline test set is empty"));
    }
    let rows = |rs: &[InnerStateRecord]| -> Result<Vec<Vec<f64>>> {
        rs.iter()
            .map(|r| {
                if r.activation_map.len() != l * d {
                    return Err(Error::param("activation map does not match L×D"));
                }
                Ok(r.activation_row(layer, d).iter().map(|&v| v as f64).collect())
            })
            .collect()
    };
    let (xtr, xte) = (rows(train)?, rows(test)?);
    let n = xtr.len() as f64;
    let mu: Vec<f64> = (0..d).map(|j| xtr.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (xtr.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / n).sqrt().max(SIGMA_FLOOR))
        .collect();
    let standardize = |r: &Vec<f64>| -> Vec<f64> { r.iter().enumerate().map(|(j, v)| (v - mu[j]) / sd[j]).collect() };
    let xtr: Vec<Vec<f64>> = xtr.iter().map(standardize).collect();
    let xte: Vec<Vec<f64>> = xte.iter().map(standardize).collect();
    let ytr: Vec<usize> = train.iter().map(|r| class_of(r.label)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let fc1 = Linear::new(&mut store, "probe.fc1", d, config.hidden, &mut rng);
    let fc2 = Linear::new(&mut store, "probe.fc2", config.hidden, 2, &mut rng);
    let logits = |g: &mut Graph, store: &ParamStore, x: Var| {
        let h = fc1.forward(g, store, x);
        let h = g.relu(h);
        fc2.forward(g, store, h)
    };
    let batch_tensor = |idx: &[usize], xs: &[Vec<f64>]| {
        Tensor::new(vec![idx.len(), d], idx.iter().flat_map(|&i| xs[i].iter().copied()).collect())
    };

    let mut adam = Adam::new(config.optimizer, &store);
    let mut order: Vec<usize> = (0..xtr.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let mut g = Graph::new(true, true);
            let x = g.input(batch_tensor(chunk, &xtr), false);
            let z = logits(&mut g, &store, x);
            let targets: Vec<usize> = chunk.iter().map(|&i| ytr[i]).collect();
            let loss = g.softmax_cross_entropy(z, &targets);
            total += g.value(loss).data()[0];
            batches += 1;
            let grads = g.backward(loss);
            adam.step(&mut store, &g, &grads);
        }
        history.push(total / batches as f64);
    }

    let accuracy_on = |xs: &[Vec<f64>], rs: &[InnerStateRecord]| {
        let idx: Vec<usize> = (0..xs.len()).collect();
        let mut g = Graph::inference();
        let x = g.input(batch_tensor(&idx, xs), false);
        let z = logits(&mut g, &store, x);
        let zv = g.value(z);
        let correct = (0..xs.len())
            .filter(|&i| {
                let row = zv.row(i);
                let predicted = if row[1] > row[0] { 1 } else { 0 };
                predicted == class_of(rs[i].label)
            })
            .count();
        correct as f64 / xs.len() as f64
    };
    Ok(BaselineMetrics {
        layer,
        accuracy: accuracy_on(&xte, test),
        train_accuracy: accuracy_on(&xtr, train),
        history,
    })
}
