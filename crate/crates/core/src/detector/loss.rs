use rand::Rng;

use crate::capture::Label;
use crate::nn::graph::{minkowski, minkowski_partial};

/// Indices into a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// max(Dist(a, p) − Dist(a, n) + α, 0) with Dist(x, y) = ‖x − y + eps‖_p.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64, p: f64, eps: f64) -> f64 {
    assert!(anchor.len() == positive.len() && anchor.len() == negative.len(), "triplet dims differ");
    let dp = minkowski(anchor, positive, p, eps);
    let dn = minkowski(anchor, negative, p, eps);
    (dp - dn + margin).max(0.0)
}

/// Gradients of [`triplet_loss`] with respect to anchor, positive and
/// negative. Zero on the inactive side of the hinge.
pub fn triplet_loss_grad(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
    p: f64,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = anchor.len();
    let dp = minkowski(anchor, positive, p, eps);
    let dn = minkowski(anchor, negative, p, eps);
    let mut ga = vec![0.0; d];
    let mut gp = vec![0.0; d];
    let mut gn = vec![0.0; d];
    if dp - dn + margin <= 0.0 {
        return (ga, gp, gn);
    }
    for j in 0..d {
        let up = minkowski_partial(anchor[j] - positive[j] + eps, dp, p);
        let un = minkowski_partial(anchor[j] - negative[j] + eps, dn, p);
        ga[j] = up - un;
        gp[j] = -up;
        gn[j] = un;
    }
    (ga, gp, gn)
}

/// One triplet per anchor that has a same-label partner. Returns `None` when
/// the batch lacks one of the labels.
pub fn mine_triplets(labels: &[Label], rng: &mut impl Rng) -> Option<Vec<Triplet>> {
    let factual: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Factual).collect();
    let nonfactual: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Nonfactual).collect();
    if factual.is_empty() || nonfactual.is_empty() {
        return None;
    }
    let mut out = Vec::with_capacity(labels.len());
    for (anchor, &label) in labels.iter().enumerate() {
        let (same, other) = match label {
            Label::Factual => (&factual, &nonfactual),
            Label::Nonfactual => (&nonfactual, &factual),
        };
        if same.len() < 2 {
            continue;
        }
        // uniform over same-label members other than the anchor
        let mut pick = rng.random_range(0..same.len() - 1);
        if same[pick] >= anchor {
            pick += 1;
        }
        let positive = same[pick];
        let negative = other[rng.random_range(0..other.len())];
        out.push(Triplet {
            anchor,
            positive,
            negative,
        });
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Vectors whose plain Euclidean gaps to the anchor are exactly `dp`, `dn`.
    fn at_distances(dp: f64, dn: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (vec![0.0, 0.0], vec![dp, 0.0], vec![0.0, dn])
    }

    #[test]
    fn hinge_values() {
        let (a, p, n) = at_distances(0.2, 1.5);
        assert_eq!(triplet_loss(&a, &p, &n, 1.0, 2.0, 0.0), 0.0);
        let (a, p, n) = at_distances(1.0, 1.2);
        assert!((triplet_loss(&a, &p, &n, 1.0, 2.0, 0.0) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_exactly_when_negative_far_enough() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let v = |rng: &mut ChaCha8Rng| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let (a, p, n) = (v(&mut rng), v(&mut rng), v(&mut rng));
            let loss = triplet_loss(&a, &p, &n, 0.5, 2.0, 1e-6);
            assert!(loss >= 0.0);
            let gap = minkowski(&a, &n, 2.0, 1e-6) - minkowski(&a, &p, 2.0, 1e-6);
            assert_eq!(loss == 0.0, gap >= 0.5);
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        let mut checked = 0;
        for _ in 0..200 {
            let v = |rng: &mut ChaCha8Rng| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let (a, p, n) = (v(&mut rng), v(&mut rng), v(&mut rng));
            for pn in [2.0, 3.0] {
                let base = triplet_loss(&a, &p, &n, 1.0, pn, 1e-6);
                if base < 1e-3 {
                    continue;
                }
                let (ga, gp, gn) = triplet_loss_grad(&a, &p, &n, 1.0, pn, 1e-6);
                for (which, grad) in [(0, &ga), (1, &gp), (2, &gn)] {
                    for j in 0..8 {
                        let mut vs = [a.clone(), p.clone(), n.clone()];
                        vs[which][j] += h;
                        let up = triplet_loss(&vs[0], &vs[1], &vs[2], 1.0, pn, 1e-6);
                        vs[which][j] -= 2.0 * h;
                        let down = triplet_loss(&vs[0], &vs[1], &vs[2], 1.0, pn, 1e-6);
                        let numeric = (up - down) / (2.0 * h);
                        let rel = (numeric - grad[j]).abs() / numeric.abs().max(grad[j].abs()).max(1e-8);
                        assert!(rel < 1e-4, "p={pn} rel={rel}");
                    }
                }
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn mining_contract() {
        let labels = [Label::Factual, Label::Factual, Label::Nonfactual, Label::Nonfactual];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = mine_triplets(&labels, &mut rng).unwrap();
        assert_eq!(t.len(), 4);
        for tr in &t {
            assert_ne!(tr.anchor, tr.positive);
            assert_eq!(labels[tr.anchor], labels[tr.positive]);
            assert_ne!(labels[tr.anchor], labels[tr.negative]);
        }
        let again = mine_triplets(&labels, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t, again);
        assert!(mine_triplets(&[Label::Factual; 4], &mut rng).is_none());
    }

    #[test]
    fn positives_are_uniform_over_partners() {
        let labels = [Label::Factual, Label::Factual, Label::Factual, Label::Nonfactual, Label::Nonfactual];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 3];
        for _ in 0..6000 {
            let t = mine_triplets(&labels, &mut rng).unwrap();
            counts[t[0].positive] += 1;
        }
        assert_eq!(counts[0], 0);
        assert!((counts[1] as i64 - 3000).abs() < 250 && (counts[2] as i64 - 3000).abs() < 250, "{counts:?}");
    }
}
