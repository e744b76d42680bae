//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value. [`Graph::backward`] walks the tape in reverse, so any scalar
//! node can be differentiated with respect to parameters or inputs. Graphs are
//! built per batch and dropped afterwards.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeom {
    pub fn output_size(&self, (h, w): (usize, usize), (kh, kw): (usize, usize)) -> (usize, usize) {
        let oh = (h + 2 * self.pad.0).saturating_sub(kh) / self.stride.0 + 1;
        let ow = (w + 2 * self.pad.1).saturating_sub(kw) / self.stride.1 + 1;
        (oh, ow)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// y = scale·x + shift
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    ColSlice {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    PairwiseDistance {
        a: Var,
        b: Var,
        p: f64,
        eps: f64,
    },
    Mean(Var),
    Sum(Var),
    Min {
        x: Var,
        at: usize,
    },
    RowMin {
        x: Var,
        at: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        x: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm; the owning layer
/// folds them into its running buffers after the step.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Norms at or below this are treated as the zero vector by
/// [`Graph::l2_normalize_rows`].
pub const ZERO_NORM: f64 = 1e-12;

pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    training: bool,
    track_params: bool,
    bn_observations: Vec<BnObservation>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    /// `training` selects batch statistics in batch norm; `track_params`
    /// controls whether parameters require gradients.
    pub fn new(training: bool, track_params: bool) -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            training,
            track_params,
            bn_observations: Vec::new(),
        }
    }

    /// Evaluation graph without parameter gradients.
    pub fn inference() -> Self {
        Self::new(false, false)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn take_bn_observations(&mut self) -> Vec<BnObservation> {
        std::mem::take(&mut self.bn_observations)
    }

    pub(crate) fn observe_bn(&mut self, obs: BnObservation) {
        self.bn_observations.push(obs);
    }

    /// Parameter vars created so far, for gradient collection.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars.iter().map(|(&p, &v)| (p, v))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let track = self.track_params && store.entries()[id.0].trainable;
        let v = self.input(store.get(id).clone(), track);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    /// x: [m, n] plus a bias row of length n.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let n = bv.len();
        assert_eq!(xv.row_len(), n, "bias length");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias(x, b), rg)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    /// x: [N, C, H, W], w: [O, C, kh, kw], b: [O].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, c, h, wd] = dims4(xv);
        let [o, c2, kh, kw] = dims4(wv);
        assert_eq!(c, c2, "conv2d channel mismatch");
        let (oh, ow) = geom.output_size((h, wd), (kh, kw));
        let ck = c * kh * kw;
        let p = oh * ow;
        let np = n * p;
        let in_len = c * h * wd;
        // one wide product over the whole batch: [O, CK] · [CK, N·P]
        let mut cols = vec![0.0; ck * np];
        for s in 0..n {
            im2col(&xv.data()[s * in_len..(s + 1) * in_len], c, (h, wd), (kh, kw), geom, (oh, ow), &mut cols, np, s * p);
        }
        let mut wide = vec![0.0; o * np];
        gemm(o, ck, np, wv.data(), (ck, 1), &cols, (np, 1), 0.0, &mut wide);
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; n * o * p];
        for s in 0..n {
            for oc in 0..o {
                let src = &wide[oc * np + s * p..oc * np + (s + 1) * p];
                let dst = &mut out[(s * o + oc) * p..(s * o + oc + 1) * p];
                let bb = bias.map_or(0.0, |bv| bv[oc]);
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(vec![n, o, oh, ow], out),
            Op::Conv2d { x, w, b, geom },
            rg,
        )
    }

    /// Per-channel normalization over [N, C, H, W]. With `batch_stats` the
    /// batch moments are used (and reported through the observation hook
    /// by the caller); otherwise the supplied running moments are.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f64], &[f64]),
        batch_stats: bool,
        eps: f64,
    ) -> (Var, Option<(Vec<f64>, Vec<f64>)>) {
        let xv = self.value(x);
        let [n, c, h, w] = dims4(xv);
        let hw = h * w;
        let m = (n * hw) as f64;
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let (mean, var_biased) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    mean[ch] += xv.data()[base..base + hw].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * hw;
                    var[ch] += xv.data()[base..base + hw]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
            (mean, var)
        } else {
            (running.0.to_vec(), running.1.to_vec())
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let observed = batch_stats.then(|| {
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let var_unbiased = var_biased.iter().map(|v| v * unbias).collect();
            (mean, var_unbiased)
        });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = xv.shape().to_vec();
        let v = self.push(
            Tensor::new(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        (v, observed)
    }

    /// [N, C, H, W] -> [N, C]
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = dims4(xv);
        let hw = (h * w) as f64;
        let data = xv
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f64>() / hw)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c], data), Op::GlobalAvgPool(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Concatenate 2-D tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).shape()[0];
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.shape()[0], n, "concat row mismatch");
                data.extend_from_slice(pv.row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(vec![n, total], data), Op::Concat(parts.to_vec()), rg)
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (n, w) = (xv.shape()[0], xv.shape()[1]);
        assert!(start + len <= w, "col_slice out of range");
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, len], data), Op::ColSlice { x, start }, rg)
    }

    /// Select slots along the leading dimension (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * xv.row_len());
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let rg = self.rg(x);
        self.push(
            Tensor::new(shape, data),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Unit-normalize each row of [N, d]. A row whose norm is at most
    /// [`ZERO_NORM`] maps to the first basis vector and passes no gradient.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.shape()[1];
        let mut out = Vec::with_capacity(xv.len());
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            if norm > ZERO_NORM {
                out.extend(row.iter().map(|v| v / norm));
            } else {
                out.push(1.0);
                out.extend(std::iter::repeat_n(0.0, d - 1));
            }
        }
        let rg = self.rg(x);
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Row-wise Minkowski distance ‖a − b + eps‖_p, [N, d] × [N, d] → [N].
    pub fn pairwise_distance(&mut self, a: Var, b: Var, p: f64, eps: f64) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let data = (0..av.rows())
            .map(|r| minkowski(av.row(r), bv.row(r), p, eps))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let n = av.rows();
        self.push(Tensor::new(vec![n], data), Op::PairwiseDistance { a, b, p, eps }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.sum() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Minimum element; the gradient flows to the first minimizer.
    pub fn min(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut at = 0;
        for (i, &v) in xv.data().iter().enumerate() {
            if v < xv.data()[at] {
                at = i;
            }
        }
        let m = xv.data()[at];
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Min { x, at }, rg)
    }

    /// Per-row minimum of [N, M] → [N]; the gradient flows to each row's
    /// first minimizer.
    pub fn row_min(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.row_len();
        let mut at = Vec::with_capacity(xv.rows());
        let mut data = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            at.push(r * m + best);
            data.push(row[best]);
        }
        let rg = self.rg(x);
        let n = data.len();
        self.push(Tensor::new(vec![n], data), Op::RowMin { x, at }, rg)
    }

    /// Mean softmax cross-entropy of logits [N, C] against class targets.
    pub fn softmax_cross_entropy(&mut self, x: Var, targets: &[usize]) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[1];
        assert_eq!(xv.rows(), targets.len());
        let mut probs = Vec::with_capacity(xv.len());
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = xv.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for &v in row {
                probs.push((v - mx).exp() / z);
            }
            loss += z.ln() + mx - row[t];
        }
        debug_assert_eq!(probs.len(), xv.rows() * c);
        let n = targets.len() as f64;
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(loss / n),
            Op::SoftmaxCrossEntropy {
                x,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![1.0]));
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &gy, &mut grads);
            }
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.rg(*a) {
                    // dA = dY · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gy.data(), (n, 1), bv.data(), (1, n), 0.0, &mut da);
                    self.acc(grads, *a, Tensor::new(vec![m, k], da));
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dY
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), (1, k), gy.data(), (n, 1), 0.0, &mut db);
                    self.acc(grads, *b, Tensor::new(vec![k, n], db));
                }
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, gy.clone());
                if self.rg(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for row in gy.data().chunks(n) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.acc(grads, *b, Tensor::new(self.value(*b).shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.clone());
                self.acc(grads, *b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = gy.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    self.acc(grads, *a, Tensor::new(gy.shape().to_vec(), d));
                }
                if self.rg(*b) {
                    let d = gy.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    self.acc(grads, *b, Tensor::new(gy.shape().to_vec(), d));
                }
            }
            Op::Affine(x, scale) => self.acc(grads, *x, gy.map(|g| g * scale)),
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = gy
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.acc(grads, *x, Tensor::new(gy.shape().to_vec(), d));
            }
            Op::Sigmoid(x) => {
                let d = gy.data().iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.acc(grads, *x, Tensor::new(gy.shape().to_vec(), d));
            }
            Op::Tanh(x) => {
                let d = gy.data().iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.acc(grads, *x, Tensor::new(gy.shape().to_vec(), d));
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, *geom, gy, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = dims4(gy);
                let hw = h * w;
                let m = (n * hw) as f64;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for j in base..base + hw {
                            dgamma[ch] += gy.data()[j] * xhat[j];
                            dbeta[ch] += gy.data()[j];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; gy.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for j in base..base + hw {
                                let dxhat = gy.data()[j] * gv[ch];
                                dx[j] = if *batch_stats {
                                    // Σdxhat = γ·dβ and Σdxhat·xhat = γ·dγ
                                    inv_std[ch] / m
                                        * (m * dxhat
                                            - gv[ch] * dbeta[ch]
                                            - xhat[j] * gv[ch] * dgamma[ch])
                                } else {
                                    dxhat * inv_std[ch]
                                };
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::new(gy.shape().to_vec(), dx));
                }
                let gshape = self.value(*gamma).shape().to_vec();
                self.acc(grads, *gamma, Tensor::new(gshape.clone(), dgamma));
                self.acc(grads, *beta, Tensor::new(gshape, dbeta));
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let [_, _, h, w] = dims4(xv);
                let hw = h * w;
                let mut dx = Vec::with_capacity(xv.len());
                for &g in gy.data() {
                    dx.extend(std::iter::repeat_n(g / hw as f64, hw));
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), dx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, gy.clone().reshape(&shape));
            }
            Op::Concat(parts) => {
                let n = gy.shape()[0];
                let total = gy.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let wdt = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(n * wdt);
                        for r in 0..n {
                            d.extend_from_slice(&gy.data()[r * total + offset..r * total + offset + wdt]);
                        }
                        self.acc(grads, p, Tensor::new(vec![n, wdt], d));
                    }
                    offset += wdt;
                }
            }
            Op::ColSlice { x, start } => {
                let xv = self.value(*x);
                let (n, w) = (xv.shape()[0], xv.shape()[1]);
                let len = gy.shape()[1];
                let mut d = vec![0.0; n * w];
                for r in 0..n {
                    d[r * w + start..r * w + start + len].copy_from_slice(gy.row(r));
                }
                self.acc(grads, *x, Tensor::new(vec![n, w], d));
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let rl = xv.row_len();
                let mut d = vec![0.0; xv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (dst, g) in d[i * rl..(i + 1) * rl].iter_mut().zip(gy.row(r)) {
                        *dst += g;
                    }
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = y.shape()[1];
                let mut dx = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    if norm <= ZERO_NORM {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = gy.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::PairwiseDistance { a, b, p, eps } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.shape()[1];
                let mut da = vec![0.0; av.len()];
                for r in 0..av.rows() {
                    let dist = y.data()[r];
                    if dist == 0.0 {
                        continue;
                    }
                    let g = gy.data()[r];
                    for j in 0..d {
                        let u = av.data()[r * d + j] - bv.data()[r * d + j] + eps;
                        da[r * d + j] = g * minkowski_partial(u, dist, *p);
                    }
                }
                let shape = av.shape().to_vec();
                if self.rg(*b) {
                    self.acc(grads, *b, Tensor::new(shape.clone(), da.iter().map(|v| -v).collect()));
                }
                self.acc(grads, *a, Tensor::new(shape, da));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = gy.data()[0] / xv.len() as f64;
                self.acc(grads, *x, Tensor::full(xv.shape(), g));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.acc(grads, *x, Tensor::full(xv.shape(), gy.data()[0]));
            }
            Op::Min { x, at } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                d.data_mut()[*at] = gy.data()[0];
                self.acc(grads, *x, d);
            }
            Op::RowMin { x, at } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (&i, &g) in at.iter().zip(gy.data()) {
                    d.data_mut()[i] = g;
                }
                self.acc(grads, *x, d);
            }
            Op::SoftmaxCrossEntropy { x, targets, probs } => {
                let xv = self.value(*x);
                let c = xv.shape()[1];
                let scale = gy.data()[0] / targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= scale;
                }
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), d));
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, c, h, wd] = dims4(xv);
        let [o, _, kh, kw] = dims4(wv);
        let [_, _, oh, ow] = dims4(gy);
        let ck = c * kh * kw;
        let p = oh * ow;
        let np = n * p;
        let in_len = c * h * wd;
        let need_w = self.rg(w);
        let need_x = self.rg(x);
        // dY regrouped to [O, N·P] to match the forward product
        let mut wide = vec![0.0; o * np];
        for s in 0..n {
            for oc in 0..o {
                wide[oc * np + s * p..oc * np + (s + 1) * p]
                    .copy_from_slice(&gy.data()[(s * o + oc) * p..(s * o + oc + 1) * p]);
            }
        }
        let mut dw = vec![0.0; o * ck];
        if need_w {
            let mut cols = vec![0.0; ck * np];
            for s in 0..n {
                im2col(&xv.data()[s * in_len..(s + 1) * in_len], c, (h, wd), (kh, kw), geom, (oh, ow), &mut cols, np, s * p);
            }
            // dW = dY · colsᵀ
            gemm(o, np, ck, &wide, (np, 1), &cols, (1, np), 0.0, &mut dw);
        }
        let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        if need_x {
            // dcols = Wᵀ · dY
            let mut dcols = vec![0.0; ck * np];
            gemm(ck, o, np, wv.data(), (1, ck), &wide, (np, 1), 0.0, &mut dcols);
            for s in 0..n {
                col2im(&dcols, c, (h, wd), (kh, kw), geom, (oh, ow), &mut dx[s * in_len..(s + 1) * in_len], np, s * p);
            }
        }
        if need_w {
            self.acc(grads, w, Tensor::new(wv.shape().to_vec(), dw));
        }
        if need_x {
            self.acc(grads, x, Tensor::new(xv.shape().to_vec(), dx));
        }
        if let Some(b) = b {
            if self.rg(b) {
                let mut db = vec![0.0; o];
                for s in 0..n {
                    for (oc, d) in db.iter_mut().enumerate() {
                        let base = (s * o + oc) * p;
                        *d += gy.data()[base..base + p].iter().sum::<f64>();
                    }
                }
                self.acc(grads, b, Tensor::new(vec![o], db));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ‖a − b + eps‖_p
pub fn minkowski(a: &[f64], b: &[f64], p: f64, eps: f64) -> f64 {
    if p == 2.0 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y + eps).powi(2))
            .sum::<f64>()
            .sqrt()
    } else {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y + eps).abs().powf(p))
            .sum::<f64>()
            .powf(1.0 / p)
    }
}

/// ∂‖u‖_p/∂u_j given the component u_j and the norm value.
pub(crate) fn minkowski_partial(u: f64, dist: f64, p: f64) -> f64 {
    if p == 2.0 {
        u / dist
    } else {
        u.signum() * u.abs().powf(p - 1.0) / dist.powf(p - 1.0)
    }
}

fn dims4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a 4-D tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

fn im2col(
    x: &[f64],
    c: usize,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    geom: ConvGeom,
    (oh, ow): (usize, usize),
    cols: &mut [f64],
    row_stride: usize,
    col_offset: usize,
) {
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ch * kh + i) * kw + j) * row_stride + col_offset;
                for oy in 0..oh {
                    let iy = (oy * geom.stride.0 + i) as isize - geom.pad.0 as isize;
                    for ox in 0..ow {
                        let ix = (ox * geom.stride.1 + j) as isize - geom.pad.1 as isize;
                        cols[row + oy * ow + ox] =
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                x[(ch * h + iy as usize) * w + ix as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    c: usize,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    geom: ConvGeom,
    (oh, ow): (usize, usize),
    dx: &mut [f64],
    row_stride: usize,
    col_offset: usize,
) {
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = ((ch * kh + i) * kw + j) * row_stride + col_offset;
                for oy in 0..oh {
                    let iy = (oy * geom.stride.0 + i) as isize - geom.pad.0 as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride.1 + j) as isize - geom.pad.1 as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[(ch * h + iy as usize) * w + ix as usize] += cols[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(Σ w ⊙ f(inputs))/d(inputs) against central differences.
    fn check_grad(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |inputs: &[Tensor], weights: Option<&Tensor>| -> (f64, Tensor, Option<Vec<Tensor>>) {
            let mut g = Graph::new(true, true);
            let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
            let out = f(&mut g, &vars);
            let shape = g.value(out).shape().to_vec();
            let w = weights.cloned().unwrap_or_else(|| Tensor::full(&shape, 1.0));
            let wv = g.constant(w.clone());
            let prod = g.mul(out, wv);
            let s = g.sum(prod);
            let total = g.value(s).data()[0];
            let grads = weights.map(|_| {
                let gr = g.backward(s);
                vars.iter()
                    .zip(inputs)
                    .map(|(v, t)| gr.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                    .collect()
            });
            (total, w, grads)
        };
        let (_, w0, _) = eval(&inputs, None);
        let weights = rand_tensor(&mut rng, w0.shape());
        let (_, _, grads) = eval(&inputs, Some(&weights));
        let grads = grads.unwrap();
        let h = 1e-6;
        for (ti, t) in inputs.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[ti].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[ti].data_mut()[j] -= h;
                let fd = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * h);
                let an = grads[ti].data()[j];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(err < 1e-5, "input {ti} elem {j}: analytic {an} vs numeric {fd}");
            }
        }
    }

    #[test]
    fn matmul_bias_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check_grad(
            vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2]), rand_tensor(&mut rng, &[2])],
            |g, v| {
                let m = g.matmul(v[0], v[1]);
                g.add_bias(m, v[2])
            },
        );
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check_grad(
            vec![rand_tensor(&mut rng, &[2, 5]), rand_tensor(&mut rng, &[2, 5])],
            |g, v| {
                let a = g.sigmoid(v[0]);
                let b = g.tanh(v[1]);
                let c = g.mul(a, b);
                let d = g.sub(c, v[0]);
                let e = g.affine(d, -2.0, 0.5);
                let f = g.add(e, v[1]);
                g.relu(f)
            },
        );
    }

    #[test]
    fn conv_grad_with_stride_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for geom in [
            ConvGeom { stride: (1, 1), pad: (1, 1) },
            ConvGeom { stride: (2, 2), pad: (1, 1) },
            ConvGeom { stride: (1, 3), pad: (0, 0) },
        ] {
            check_grad(
                vec![rand_tensor(&mut rng, &[2, 2, 5, 7]), rand_tensor(&mut rng, &[3, 2, 3, 3]), rand_tensor(&mut rng, &[3])],
                |g, v| g.conv2d(v[0], v[1], Some(v[2]), geom),
            );
        }
    }

    #[test]
    fn batch_norm_grads_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for batch_stats in [true, false] {
            check_grad(
                vec![rand_tensor(&mut rng, &[3, 2, 2, 3]), rand_tensor(&mut rng, &[2]), rand_tensor(&mut rng, &[2])],
                |g, v| {
                    g.batch_norm(v[0], v[1], v[2], (&[0.1, -0.2], &[0.5, 2.0]), batch_stats, 1e-5).0
                },
            );
        }
    }

    #[test]
    fn pooling_reshape_concat_slice_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check_grad(
            vec![rand_tensor(&mut rng, &[2, 3, 2, 2]), rand_tensor(&mut rng, &[2, 4])],
            |g, v| {
                let p = g.global_avg_pool(v[0]);
                let r = g.reshape(v[0], &[2, 12]);
                let c = g.concat_cols(&[p, v[1], r]);
                let s = g.col_slice(c, 2, 9);
                g.gather_rows(s, &[1, 0, 1])
            },
        );
    }

    #[test]
    fn normalize_distance_min_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check_grad(
            vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])],
            |g, v| {
                let a = g.l2_normalize_rows(v[0]);
                let d = g.pairwise_distance(a, v[1], 2.0, 1e-6);
                let d3 = g.pairwise_distance(a, v[1], 3.0, 1e-6);
                let m = g.min(d);
                let both = g.concat_cols(&[a, v[1]]);
                let rm = g.row_min(both);
                let rms = g.sum(rm);
                let m = g.add(m, rms);
                let s = g.sum(d3);
                let md = g.mean(d);
                let t = g.add(m, s);
                g.add(t, md)
            },
        );
    }

    #[test]
    fn cross_entropy_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        check_grad(vec![rand_tensor(&mut rng, &[4, 2])], |g, v| {
            g.softmax_cross_entropy(v[0], &[0, 1, 1, 0])
        });
    }

    #[test]
    fn zero_row_normalizes_to_first_axis() {
        let mut g = Graph::new(false, false);
        let x = g.input(Tensor::zeros(&[1, 3]), true);
        let y = g.l2_normalize_rows(x);
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0]);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
