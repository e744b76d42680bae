use std::sync::OnceLock;

use factlens::analysis::integrated_gradients;
use factlens::capture::{CaptureFile, InnerStateRecord, Label};
use factlens::detector::SupportSet;
use factlens::pipeline::{annotate, leave_one_out, run_experiment, DataSplit, Experiment, RunConfig};
use factlens::preprocess::PreprocessedRecord;
use factlens::synth::{generate_synthetic, SyntheticSet, SynthConfig, SynthWorld};
use factlens::Error;

fn three_relation_capture() -> CaptureFile {
    let cfg = SynthConfig {
        relations: vec!["A".into(), "B".into(), "C".into()],
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, 300).unwrap().into_capture()
}

#[test]
fn held_out_relation_generalizes_without_leakage() {
    let capture = three_relation_capture();
    let cfg = RunConfig {
        pool_fraction: 0.3,
        ..RunConfig::default()
    };
    let out = leave_one_out(&capture, "C", &cfg).unwrap();
    assert_eq!(out.train_relations, vec!["A".to_string(), "B".to_string()]);
    assert_eq!(out.metrics.per_relation.keys().collect::<Vec<_>>(), vec!["C"]);
    assert_eq!(out.metrics.total, 200);
    assert!(out.metrics.accuracy >= 0.85, "held-out accuracy {}", out.metrics.accuracy);
}

#[test]
fn leave_one_out_preconditions() {
    let single = generate_synthetic(&SynthConfig::default(), 10).unwrap().into_capture();
    assert!(matches!(leave_one_out(&single, "synthetic", &RunConfig::default()), Err(Error::Parameter(_))));

    let mut capture = three_relation_capture();
    capture.records.retain(|r| !(r.relation == "C" && r.label == Label::Nonfactual));
    match leave_one_out(&capture, "C", &RunConfig::default()) {
        Err(Error::Parameter(m)) => assert!(m.contains("nonfactual"), "{m}"),
        other => panic!("expected a parameter error, got {:?}", other.map(|o| o.metrics.accuracy)),
    }
}

struct Fixture {
    set: SyntheticSet,
    world: SynthWorld,
    experiment: Experiment,
}

/// One trained detector shared by the annotation and attribution tests.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let cfg = SynthConfig::default();
        let set = generate_synthetic(&cfg, 260).unwrap();
        let (train, rest) = set.records.split_at(300);
        let (pool, test) = rest.split_at(120);
        let split = DataSplit {
            train: train.to_vec(),
            pool: pool.to_vec(),
            test: test.to_vec(),
        };
        let experiment = run_experiment(&split, &set.meta, &set.embeddings, &RunConfig::default()).unwrap();
        assert!(experiment.metrics.accuracy >= 0.95);
        Fixture {
            world: SynthWorld::new(&cfg).unwrap(),
            set,
            experiment,
        }
    })
}

/// Fresh per-token records (indices far past the training range).
fn sequence(tokens: &[(&str, Label)]) -> Vec<InnerStateRecord> {
    let f = fixture();
    tokens
        .iter()
        .enumerate()
        .map(|(i, &(tok, label))| {
            let mut r = f.world.record(label, 1_000_000 + i as u64, "generation");
            r.generated_word = tok.to_string();
            r
        })
        .collect()
}

fn flags(records: &[InnerStateRecord]) -> factlens::Result<Vec<(String, Label)>> {
    let f = fixture();
    let e = &f.experiment;
    annotate(records, &f.set.meta, &f.set.embeddings, &e.trained.preprocessor, &e.trained.model, &e.support)
        .map(|v| v.into_iter().map(|t| (t.token, t.label)).collect())
}

#[test]
fn annotation_marks_the_factual_spans() {
    use Label::{Factual as F, Nonfactual as N};
    let tokens = [("Stanley", F), ("Kubrick", F), ("and", N), ("was", N), ("released", N), ("in", N), ("1980", F)];
    let out = flags(&sequence(&tokens)).unwrap();
    let expected: Vec<(String, Label)> = tokens.iter().map(|&(t, l)| (t.to_string(), l)).collect();
    assert_eq!(out, expected);
}

#[test]
fn annotation_edge_cases() {
    assert_eq!(flags(&sequence(&[("1980", Label::Factual)])).unwrap().len(), 1);
    let words: Vec<(&str, Label)> = ["the", "film", "was", "made", "later"].iter().map(|&w| (w, Label::Nonfactual)).collect();
    assert!(flags(&sequence(&words)).unwrap().iter().all(|(_, l)| *l == Label::Nonfactual));
    assert!(matches!(flags(&[]), Err(Error::Parameter(_))));
}

#[test]
fn positive_activation_attributions_sit_in_later_layers() {
    let f = fixture();
    let e = &f.experiment;
    let l = f.set.meta.num_layers;
    let onset = (0.3 * l as f64).ceil() as usize;
    let support: &SupportSet = &e.support;
    let factual: Vec<PreprocessedRecord> = e
        .trained
        .preprocessor
        .apply_all(&sequence(&[("x", Label::Factual); 10]), f.set.meta.top_k, &f.set.embeddings)
        .unwrap();
    let mut per_layer = vec![0.0; l];
    for r in &factual {
        let base = PreprocessedRecord::zeros(e.trained.model.dims(), r.label);
        let report = integrated_gradients(&e.trained.model, support, r, &base, 64).unwrap();
        for (acc, m) in per_layer.iter_mut().zip(&report.activation_layer_means) {
            *acc += m.max(0.0);
        }
    }
    let total: f64 = per_layer.iter().sum();
    let late: f64 = per_layer[onset..].iter().sum();
    let uniform = (l - onset) as f64 / l as f64;
    assert!(total > 0.0);
    assert!(late / total > uniform, "late share {:.3} vs uniform {uniform:.3}: {per_layer:?}", late / total);
    let peak = (0..l).max_by(|&a, &b| per_layer[a].total_cmp(&per_layer[b])).unwrap();
    assert!(peak >= onset, "peak layer {peak}: {per_layer:?}");
}
