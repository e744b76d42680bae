//! Layers built on the graph: affine, convolution, batch norm, an 18-layer
//! residual image encoder, a flattening MLP encoder and stacked recurrent
//! sequence encoders.

use rand::Rng;

use super::graph::{BnObservation, ConvGeom, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Largest spatial extent the residual encoder's stem produces per axis.
pub const STEM_TARGET: usize = 16;

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let b = store.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: Option<ParamId>,
    geom: ConvGeom,
    kernel: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        geom: ConvGeom,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel.0 * kernel.1;
        let w = store.add_uniform(format!("{name}.weight"), &[out_ch, in_ch, kernel.0, kernel.1], fan_in, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.bias"), &[out_ch], fan_in, rng));
        Self { w, b, geom, kernel }
    }

    pub fn output_size(&self, hw: (usize, usize)) -> (usize, usize) {
        self.geom.output_size(hw, self.kernel)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let running = (store.get(self.running_mean).data(), store.get(self.running_var).data());
        let training = g.is_training();
        let (y, observed) = g.batch_norm(x, gamma, beta, running, training, BN_EPS);
        if let Some((mean, var)) = observed {
            g.observe_bn(BnObservation {
                running_mean: self.running_mean,
                running_var: self.running_var,
                mean,
                var,
            });
        }
        y
    }
}

/// Fold training-mode batch statistics into the running buffers.
pub fn apply_bn_observations(store: &mut ParamStore, observations: &[BnObservation]) {
    for obs in observations {
        for (r, m) in store.get_mut(obs.running_mean).data_mut().iter_mut().zip(&obs.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in store.get_mut(obs.running_var).data_mut().iter_mut().zip(&obs.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let g3 = |s| ConvGeom {
            stride: (s, s),
            pad: (1, 1),
        };
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, (3, 3), g3(stride), false, rng);
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, (3, 3), g3(1), false, rng);
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch);
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            let geom = ConvGeom {
                stride: (stride, stride),
                pad: (0, 0),
            };
            (
                Conv2d::new(store, &format!("{name}.down"), in_ch, out_ch, (1, 1), geom, false, rng),
                BatchNorm2d::new(store, &format!("{name}.down_bn"), out_ch),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.conv1.forward(g, store, x);
        let h = self.bn1.forward(g, store, h);
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h);
        let h = self.bn2.forward(g, store, h);
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(g, store, x);
                bn.forward(g, store, s)
            }
            None => x,
        };
        let sum = g.add(h, skip);
        g.relu(sum)
    }
}

/// Stem kernel and geometry for one spatial axis: plain 3-wide padded
/// convolution when the axis is already small, otherwise non-overlapping
/// patches that bring it down to at most [`STEM_TARGET`].
fn stem_axis(extent: usize) -> (usize, usize, usize) {
    let stride = extent.div_ceil(STEM_TARGET).max(1);
    if stride == 1 {
        (3, 1, 1)
    } else {
        (stride, stride, 0)
    }
}

/// ResNet-18 topology over a single-channel 2-D input: stem convolution,
/// four stages of two basic blocks each (widths w, 2w, 4w, 8w; stride 2 on
/// entry to stages 2–4), global average pooling and a linear head.
#[derive(Clone, Debug)]
pub struct ResNetEncoder {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    blocks: Vec<BasicBlock>,
    head: Linear,
    input_hw: (usize, usize),
}

impl ResNetEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_hw: (usize, usize),
        width: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let (kh, sh, ph) = stem_axis(input_hw.0);
        let (kw, sw, pw) = stem_axis(input_hw.1);
        let geom = ConvGeom {
            stride: (sh, sw),
            pad: (ph, pw),
        };
        let stem = Conv2d::new(store, &format!("{name}.stem"), 1, width, (kh, kw), geom, false, rng);
        let stem_bn = BatchNorm2d::new(store, &format!("{name}.stem_bn"), width);
        let mut blocks = Vec::with_capacity(8);
        let mut in_ch = width;
        for stage in 0..4 {
            let out_ch = width << stage;
            for b in 0..2 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    store,
                    &format!("{name}.layer{}.{b}", stage + 1),
                    in_ch,
                    out_ch,
                    stride,
                    rng,
                ));
                in_ch = out_ch;
            }
        }
        let head = Linear::new(store, &format!("{name}.fc"), in_ch, out_dim, rng);
        Self {
            stem,
            stem_bn,
            blocks,
            head,
            input_hw,
        }
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    /// x: [N, 1, H, W] -> [N, out_dim]
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.stem.forward(g, store, x);
        let h = self.stem_bn.forward(g, store, h);
        let mut h = g.relu(h);
        for block in &self.blocks {
            h = block.forward(g, store, h);
        }
        let pooled = g.global_avg_pool(h);
        self.head.forward(g, store, pooled)
    }
}

/// Flatten → affine → rectifier → affine.
#[derive(Clone, Debug)]
pub struct MlpEncoder {
    fc1: Linear,
    fc2: Linear,
}

impl MlpEncoder {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.value(x).rows();
        let flat = g.reshape(x, &[n, self.fc1.in_dim]);
        let h = self.fc1.forward(g, store, flat);
        let h = g.relu(h);
        self.fc2.forward(g, store, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    /// Elman cell, h' = tanh(x·W_i + b_i + h·W_h + b_h).
    Simple,
}

#[derive(Clone, Debug)]
struct RecurrentLayer {
    kind: CellKind,
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
    hidden: usize,
}

impl RecurrentLayer {
    fn new(store: &mut ParamStore, name: &str, kind: CellKind, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let gates = match kind {
            CellKind::Gru => 3,
            CellKind::Simple => 1,
        };
        // recurrent weights all use the 1/sqrt(hidden) bound
        Self {
            kind,
            w_ih: store.add_uniform(format!("{name}.weight_ih"), &[in_dim, gates * hidden], hidden, rng),
            w_hh: store.add_uniform(format!("{name}.weight_hh"), &[hidden, gates * hidden], hidden, rng),
            b_ih: store.add_uniform(format!("{name}.bias_ih"), &[gates * hidden], hidden, rng),
            b_hh: store.add_uniform(format!("{name}.bias_hh"), &[gates * hidden], hidden, rng),
            hidden,
        }
    }

    fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Var {
        let w_ih = g.param(store, self.w_ih);
        let w_hh = g.param(store, self.w_hh);
        let b_ih = g.param(store, self.b_ih);
        let b_hh = g.param(store, self.b_hh);
        let gi = g.matmul(x, w_ih);
        let gi = g.add_bias(gi, b_ih);
        let gh = g.matmul(h, w_hh);
        let gh = g.add_bias(gh, b_hh);
        match self.kind {
            CellKind::Simple => {
                let s = g.add(gi, gh);
                g.tanh(s)
            }
            CellKind::Gru => {
                let hd = self.hidden;
                let (ir, hr) = (g.col_slice(gi, 0, hd), g.col_slice(gh, 0, hd));
                let r = g.add(ir, hr);
                let r = g.sigmoid(r);
                let (iz, hz) = (g.col_slice(gi, hd, hd), g.col_slice(gh, hd, hd));
                let z = g.add(iz, hz);
                let z = g.sigmoid(z);
                let (inn, hn) = (g.col_slice(gi, 2 * hd, hd), g.col_slice(gh, 2 * hd, hd));
                let rhn = g.mul(r, hn);
                let n = g.add(inn, rhn);
                let n = g.tanh(n);
                // h' = (1 − z)·n + z·h = n + z·(h − n)
                let diff = g.sub(h, n);
                let zd = g.mul(z, diff);
                g.add(n, zd)
            }
        }
    }
}

/// Stacked recurrent layers over a scalar-per-step sequence; the last
/// layer's final hidden state goes through a linear head.
#[derive(Clone, Debug)]
pub struct RecurrentEncoder {
    layers: Vec<RecurrentLayer>,
    head: Linear,
}

impl RecurrentEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: CellKind,
        hidden_dims: &[usize],
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut in_dim = 1;
        let mut layers = Vec::with_capacity(hidden_dims.len());
        for (i, &h) in hidden_dims.iter().enumerate() {
            layers.push(RecurrentLayer::new(store, &format!("{name}.l{i}"), kind, in_dim, h, rng));
            in_dim = h;
        }
        let head = Linear::new(store, &format!("{name}.fc"), in_dim, out_dim, rng);
        Self { layers, head }
    }

    /// seq: [N, T] -> [N, out_dim]
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, seq: Var) -> Var {
        let (n, steps) = {
            let s = g.value(seq).shape();
            (s[0], s[1])
        };
        let mut inputs: Vec<Var> = (0..steps).map(|t| g.col_slice(seq, t, 1)).collect();
        for layer in &self.layers {
            let mut h = g.constant(Tensor::zeros(&[n, layer.hidden]));
            let mut outputs = Vec::with_capacity(steps);
            for &x in &inputs {
                h = layer.step(g, store, x, h);
                outputs.push(h);
            }
            inputs = outputs;
        }
        let last = *inputs.last().expect("sequence has at least one step");
        self.head.forward(g, store, last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resnet_output_shape_for_various_inputs() {
        for hw in [(4, 8), (12, 64), (11, 10), (48, 6400), (1, 1)] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let enc = ResNetEncoder::new(&mut store, "enc", hw, 2, 24, &mut rng);
            let mut g = Graph::inference();
            let x = g.input(Tensor::full(&[2, 1, hw.0, hw.1], 0.5), false);
            let y = enc.forward(&mut g, &store, x);
            assert_eq!(g.value(y).shape(), &[2, 24], "input {hw:?}");
        }
    }

    #[test]
    fn stem_shrinks_wide_axes() {
        assert_eq!(stem_axis(12), (3, 1, 1));
        assert_eq!(stem_axis(64), (4, 4, 0));
        assert_eq!(stem_axis(6400), (400, 400, 0));
    }

    #[test]
    fn gru_matches_hand_computed_single_step() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = RecurrentEncoder::new(&mut store, "gru", CellKind::Gru, &[2], 1, &mut rng);
        let layer = &enc.layers[0];
        let x = 0.7;
        let (wi, bi, bh) = (
            store.get(layer.w_ih).data().to_vec(),
            store.get(layer.b_ih).data().to_vec(),
            store.get(layer.b_hh).data().to_vec(),
        );
        // h0 = 0 so the recurrent products vanish, leaving the biases
        let sig = super::super::graph::sigmoid;
        let mut h1 = [0.0; 2];
        for j in 0..2 {
            let z = sig(x * wi[2 + j] + bi[2 + j] + bh[2 + j]);
            let r = sig(x * wi[j] + bi[j] + bh[j]);
            let n = (x * wi[4 + j] + bi[4 + j] + r * bh[4 + j]).tanh();
            h1[j] = (1.0 - z) * n;
        }
        let mut g = Graph::inference();
        let seq = g.input(Tensor::new(vec![1, 1], vec![x]), false);
        let xin = g.col_slice(seq, 0, 1);
        let h0 = g.constant(Tensor::zeros(&[1, 2]));
        let h = layer.step(&mut g, &store, xin, h0);
        for j in 0..2 {
            assert!((g.value(h).data()[j] - h1[j]).abs() < 1e-12);
        }
    }
}
