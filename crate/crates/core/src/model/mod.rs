//! Feed-forward networks (fully-connected, im2col convolution, 2×2 max-pool)
//! with a backward pass whose preactivation-gradient treatment is selected
//! by [`BackpropMode`].
//!
//! Per weighted layer the forward pass computes `z = W·a_prev + b` and
//! `a = ReLU(z)` (the last layer stays linear). Backward computes
//! `δz = δa ⊙ ReLU'(z)`, optionally replaces it by a quantized `δz̃`, then
//! `δa_prev = Wᵀ·δz̃`, `δW = δz̃·a_prevᵀ` and `δb = rowsum(δz̃)`.

pub mod conv;
pub mod loss;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::quant::{meprop_topk, nsd_quantize, quantize_8bit, stats_of, topk_for_fraction, NsdConfig, NSD_OPS_PER_ELEMENT};
use crate::sparse::{sparse_times_dense, transpose_times_sparse, MacCounter};
use crate::tensor::{gemm, matmul, stream_key, Matrix, Rng, Trans};

use conv::{col2im, features_to_positions, im2col, maxpool_backward, maxpool_forward, positions_to_features};
pub use conv::{ConvGeometry, PoolGeometry};
pub use loss::{argmax_columns, softmax_xent};

/// How many entries per column the top-k baseline keeps in each layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopK {
    /// Fixed count, clamped to the layer width.
    Count(usize),
    /// Fraction of the layer width, `max(1, round(f·rows))`.
    Fraction(f64),
}

impl TopK {
    pub fn for_rows(&self, rows: usize) -> usize {
        match *self {
            TopK::Count(k) => k.clamp(1, rows),
            TopK::Fraction(f) => topk_for_fraction(rows, f),
        }
    }
}

/// Treatment of preactivation gradients in the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum BackpropMode {
    /// Plain dense backpropagation.
    Exact,
    /// Dithered quantization with `Δ = scale·σ` per layer.
    Dithered { scale: f64 },
    /// Deterministic top-k sparsification.
    Meprop { k: TopK },
    /// 8-bit forward pass plus dithered backward pass.
    Dithered8Bit { scale: f64 },
}

impl BackpropMode {
    pub fn quantizes_forward(&self) -> bool {
        matches!(self, BackpropMode::Dithered8Bit { .. })
    }

    pub fn nsd(&self) -> Option<NsdConfig> {
        match *self {
            BackpropMode::Dithered { scale } | BackpropMode::Dithered8Bit { scale } => Some(NsdConfig {
                scale,
                sigma_floor: NsdConfig::DEFAULT_SIGMA_FLOOR,
            }),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackpropMode::Exact => "exact",
            BackpropMode::Dithered { .. } => "dithered",
            BackpropMode::Meprop { .. } => "meprop",
            BackpropMode::Dithered8Bit { .. } => "dithered_8bit",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(cfg) = self.nsd() {
            cfg.validate()?;
        }
        match *self {
            BackpropMode::Meprop { k: TopK::Count(0) } => Err(config_err("top-k count must be >= 1")),
            BackpropMode::Meprop { k: TopK::Fraction(f) } if !(f > 0.0 && f <= 1.0) => {
                Err(config_err(format!("top-k fraction must lie in (0, 1], got {f}")))
            }
            _ => Ok(()),
        }
    }
}

/// Input image shape; an MLP uses `channels = features, height = width = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn flat(features: usize) -> Self {
        Self {
            channels: features,
            height: 1,
            width: 1,
        }
    }

    pub fn features(&self) -> usize {
        self.channels * self.height * self.width
    }
}

fn default_stride() -> usize {
    1
}

/// One entry of a declarative architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    MaxPool,
}

/// Declarative network architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Fully-connected network; `sizes[0]` is the input width.
    pub fn mlp(sizes: &[usize]) -> Self {
        Self {
            input: InputShape::flat(sizes[0]),
            layers: sizes[1..].iter().map(|&units| LayerSpec::Dense { units }).collect(),
        }
    }

    /// The 784-500-500-10 MNIST perceptron.
    pub fn mnist_mlp() -> Self {
        Self::mlp(&[784, 500, 500, 10])
    }

    /// LeNet-5 style network for 28×28 grayscale input.
    pub fn lenet5() -> Self {
        Self {
            input: InputShape {
                channels: 1,
                height: 28,
                width: 28,
            },
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 6,
                    kernel: 5,
                    stride: 1,
                    padding: 2,
                },
                LayerSpec::MaxPool,
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 5,
                    stride: 1,
                    padding: 0,
                },
                LayerSpec::MaxPool,
                LayerSpec::Dense { units: 120 },
                LayerSpec::Dense { units: 84 },
                LayerSpec::Dense { units: 10 },
            ],
        }
    }
}

/// Weighted layer type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    FullyConnected { inputs: usize, outputs: usize },
    Conv2d(ConvGeometry),
}

/// Parameters, momentum buffers and forward cache of one weighted layer.
#[derive(Clone, Debug)]
pub struct LayerState {
    pub kind: LayerKind,
    /// `outputs × inputs` (dense) or `out_channels × C_in·k·k` (conv).
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub vel_w: Matrix,
    pub vel_b: Vec<f64>,
    pub relu: bool,
    cache: Option<LayerCache>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    /// Input as consumed by the product: `a_prev` (possibly 8-bit) for dense
    /// layers, the im2col patch matrix for convolutions.
    input: Matrix,
    z: Matrix,
    /// 8-bit weights used in the forward pass, when quantized.
    weights_q: Option<Matrix>,
}

/// Gradient of one weighted layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Statistics of the (quantized) preactivation gradient of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGradStats {
    pub sparsity: f64,
    pub nonzero_bitwidth: u32,
    pub max_abs_level: u32,
    pub delta: f64,
    pub elements: u64,
    /// Nonzero rows (units) of the gradient fed to the products.
    pub nonzero_rows: u64,
}

/// Result of one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    /// One entry per weighted layer, first to last.
    pub params: Vec<ParamGrad>,
    pub stats: Vec<LayerGradStats>,
    pub macs: MacCounter,
    /// Arithmetic overhead charged to the quantizer.
    pub nsd_ops: u64,
    preact: Vec<Matrix>,
}

impl Gradients {
    /// Nonzero scalars across all weight and bias gradients.
    pub fn nonzero_scalars(&self) -> u64 {
        self.params
            .iter()
            .map(|p| {
                (p.w.len() - p.w.count_zeros()) as u64 + p.b.iter().filter(|&&v| v != 0.0).count() as u64
            })
            .sum()
    }
}

/// Identifies the dither substream of one backward pass; each layer draws
/// from `stream(seed, key(node, iteration, layer))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DitherKey {
    pub seed: u64,
    pub node: u64,
    pub iteration: u64,
}

impl DitherKey {
    pub fn new(seed: u64, node: u64, iteration: u64) -> Self {
        Self { seed, node, iteration }
    }

    pub fn layer_rng(&self, layer: usize) -> Rng {
        Rng::stream(self.seed, stream_key(&[0xd17e, self.node, self.iteration, layer as u64]))
    }
}

/// Output of one weighted layer's backward pass.
struct LayerBackward {
    param: ParamGrad,
    stats: LayerGradStats,
    grad_in: Option<Matrix>,
    nsd_ops: u64,
    /// Preactivation gradient before quantization, when captured.
    captured: Option<Matrix>,
}

/// A network layer.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Layer {
    Weighted(LayerState),
    MaxPool {
        geo: PoolGeometry,
        argmax: Option<Vec<u32>>,
    },
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

impl LayerState {
    fn new(kind: LayerKind, relu: bool, rng: &mut Rng) -> Self {
        let (rows, fan_in) = match kind {
            LayerKind::FullyConnected { inputs, outputs } => (outputs, inputs),
            LayerKind::Conv2d(g) => (g.out_channels, g.patch_len()),
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weights = Matrix::random_uniform(rows, fan_in, -bound, bound, rng);
        let bias = (0..rows).map(|_| rng.uniform_unchecked(-bound, bound)).collect();
        Self {
            kind,
            vel_w: Matrix::zeros(rows, fan_in),
            vel_b: vec![0.0; rows],
            weights,
            bias,
            relu,
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected { inputs, .. } => inputs,
            LayerKind::Conv2d(g) => g.in_features(),
        }
    }

    pub fn out_features(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected { outputs, .. } => outputs,
            LayerKind::Conv2d(g) => g.out_features(),
        }
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    fn forward(&self, a_prev: &Matrix, quant8: bool) -> Result<(Matrix, LayerCache)> {
        if a_prev.rows() != self.in_features() {
            return Err(Error::Shape {
                op: "layer forward",
                lhs: (self.in_features(), a_prev.cols()),
                rhs: a_prev.shape(),
            });
        }
        let a_in = if quant8 { quantize_8bit(a_prev) } else { a_prev.clone() };
        let weights_q = quant8.then(|| quantize_8bit(&self.weights));
        let w = weights_q.as_ref().unwrap_or(&self.weights);
        let input = match self.kind {
            LayerKind::FullyConnected { .. } => a_in,
            LayerKind::Conv2d(g) => im2col(&a_in, &g)?,
        };
        let mut z = matmul(w, &input)?;
        z.add_column_broadcast(&self.bias);
        let a = if self.relu { z.map(relu) } else { z.clone() };
        let out = match self.kind {
            LayerKind::FullyConnected { .. } => a,
            LayerKind::Conv2d(g) => positions_to_features(&a, g.out_channels, g.positions()),
        };
        Ok((out, LayerCache { input, z, weights_q }))
    }

    /// Returns the parameter gradient, gradient statistics and (if asked for)
    /// the gradient with respect to the layer input.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        index: usize,
        grad_out: &Matrix,
        mode: &BackpropMode,
        rng: &mut Rng,
        need_input_grad: bool,
        capture: bool,
        ctr: &mut MacCounter,
    ) -> Result<LayerBackward> {
        let cache = self.cache.as_ref().ok_or(Error::MissingCache(index))?;
        let grad_a = match self.kind {
            LayerKind::FullyConnected { .. } => grad_out.clone(),
            LayerKind::Conv2d(g) => features_to_positions(grad_out, g.out_channels, g.positions()),
        };
        if grad_a.shape() != cache.z.shape() {
            return Err(Error::Shape {
                op: "layer backward",
                lhs: cache.z.shape(),
                rhs: grad_a.shape(),
            });
        }
        let grad_z = if self.relu {
            let mut gz = grad_a;
            for (g, &z) in gz.data_mut().iter_mut().zip(cache.z.data()) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
            gz
        } else {
            grad_a
        };
        let w = cache.weights_q.as_ref().unwrap_or(&self.weights);
        let elements = grad_z.len() as u64;

        let (grad_w, grad_b, grad_in, stats, nsd_ops) = match mode {
            BackpropMode::Exact => {
                let mut grad_w = Matrix::zeros(w.rows(), w.cols());
                gemm(1.0, &grad_z, Trans::No, &cache.input, Trans::Yes, 0.0, &mut grad_w)?;
                let (m, k, n) = (cache.input.rows() as u64, grad_z.rows() as u64, grad_z.cols() as u64);
                ctr.record(m * k * n, m * k * n);
                let grad_in = if need_input_grad {
                    let mut gi = Matrix::zeros(w.cols(), grad_z.cols());
                    gemm(1.0, w, Trans::Yes, &grad_z, Trans::No, 0.0, &mut gi)?;
                    ctr.record(m * k * n, m * k * n);
                    Some(gi)
                } else {
                    None
                };
                let nnz = grad_z.len() - grad_z.count_zeros();
                let stats = LayerGradStats {
                    sparsity: grad_z.count_zeros() as f64 / grad_z.len() as f64,
                    nonzero_bitwidth: if nnz == 0 { 0 } else { 64 },
                    max_abs_level: 0,
                    delta: 0.0,
                    elements,
                    nonzero_rows: (0..grad_z.rows()).filter(|&r| grad_z.row(r).iter().any(|&v| v != 0.0)).count() as u64,
                };
                (grad_w, grad_z.row_sums(), grad_in, stats, 0)
            }
            _ => {
                let (g, qs, ops) = match mode {
                    BackpropMode::Meprop { k } => {
                        let g = meprop_topk(&grad_z, k.for_rows(grad_z.rows()))?;
                        let qs = stats_of(&g);
                        (g, qs, 0)
                    }
                    _ => {
                        let cfg = mode.nsd().expect("dithered mode");
                        let (g, qs) = nsd_quantize(&grad_z, &cfg, rng)?;
                        (g, qs, NSD_OPS_PER_ELEMENT * elements)
                    }
                };
                let grad_w = sparse_times_dense(&g, &cache.input.transpose(), ctr)?;
                let grad_in = if need_input_grad {
                    Some(transpose_times_sparse(w, &g, ctr)?)
                } else {
                    None
                };
                let stats = LayerGradStats {
                    sparsity: qs.sparsity,
                    nonzero_bitwidth: qs.nonzero_bitwidth,
                    max_abs_level: qs.max_abs_level,
                    delta: qs.delta,
                    elements,
                    nonzero_rows: (0..g.rows()).filter(|&r| !g.row_is_empty(r)).count() as u64,
                };
                (grad_w, g.row_sums(), grad_in, stats, ops)
            }
        };
        let grad_in = match (self.kind, grad_in) {
            (LayerKind::Conv2d(g), Some(cols)) => Some(col2im(&cols, &g, grad_out.cols())?),
            (_, gi) => gi,
        };
        let captured = capture.then_some(grad_z);
        Ok(LayerBackward {
            param: ParamGrad { w: grad_w, b: grad_b },
            stats,
            grad_in,
            nsd_ops,
            captured,
        })
    }
}

/// A feed-forward network.
#[derive(Clone, Debug)]
pub struct Network {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

impl Network {
    /// Builds the network described by `spec`, initialising each weighted
    /// layer from `U(−1/√fan_in, 1/√fan_in)` with a stream derived from `seed`.
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(config_err("model needs at least one layer"));
        }
        let last_weighted = spec
            .layers
            .iter()
            .rposition(|l| !matches!(l, LayerSpec::MaxPool))
            .ok_or_else(|| config_err("model needs at least one weighted layer"))?;
        if !matches!(spec.layers[last_weighted], LayerSpec::Dense { .. }) {
            return Err(config_err("the last weighted layer must be dense"));
        }
        let mut rng = Rng::stream(seed, stream_key(&[0x1417]));
        let mut shape = spec.input;
        if shape.features() == 0 {
            return Err(config_err("input shape must be non-empty"));
        }
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            let relu = i != last_weighted;
            match *ls {
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(config_err(format!("layer {i}: dense units must be positive")));
                    }
                    let kind = LayerKind::FullyConnected {
                        inputs: shape.features(),
                        outputs: units,
                    };
                    layers.push(Layer::Weighted(LayerState::new(kind, relu, &mut rng)));
                    shape = InputShape::flat(units);
                }
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let geo = ConvGeometry {
                        in_channels: shape.channels,
                        out_channels,
                        height: shape.height,
                        width: shape.width,
                        kernel,
                        stride,
                        padding,
                    };
                    geo.validate().map_err(|e| config_err(format!("layer {i}: {e}")))?;
                    layers.push(Layer::Weighted(LayerState::new(LayerKind::Conv2d(geo), relu, &mut rng)));
                    shape = InputShape {
                        channels: out_channels,
                        height: geo.out_height(),
                        width: geo.out_width(),
                    };
                }
                LayerSpec::MaxPool => {
                    if shape.height < 2 || shape.width < 2 {
                        return Err(config_err(format!("layer {i}: max-pool input {shape:?} too small")));
                    }
                    let geo = PoolGeometry {
                        channels: shape.channels,
                        height: shape.height,
                        width: shape.width,
                    };
                    layers.push(Layer::MaxPool { geo, argmax: None });
                    shape = InputShape {
                        channels: shape.channels,
                        height: geo.out_height(),
                        width: geo.out_width(),
                    };
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_features(&self) -> usize {
        self.spec.input.features()
    }

    pub fn output_features(&self) -> usize {
        self.weighted().last().map(|l| l.out_features()).unwrap_or(0)
    }

    pub fn weighted(&self) -> impl Iterator<Item = &LayerState> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Weighted(s) => Some(s),
            _ => None,
        })
    }

    pub fn weighted_mut(&mut self) -> impl Iterator<Item = &mut LayerState> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Weighted(s) => Some(s),
            _ => None,
        })
    }

    pub fn num_weighted(&self) -> usize {
        self.weighted().count()
    }

    pub fn param_count(&self) -> usize {
        self.weighted().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Forward pass that caches what the backward pass needs.
    pub fn forward(&mut self, x: &Matrix, mode: &BackpropMode) -> Result<Matrix> {
        let quant8 = mode.quantizes_forward();
        let mut a = x.clone();
        for layer in &mut self.layers {
            a = match layer {
                Layer::Weighted(s) => {
                    let (out, cache) = s.forward(&a, quant8)?;
                    s.cache = Some(cache);
                    out
                }
                Layer::MaxPool { geo, argmax } => {
                    let (out, arg) = maxpool_forward(&a, geo)?;
                    *argmax = Some(arg);
                    out
                }
            };
        }
        Ok(a)
    }

    /// Inference-only forward pass; no caches, no dither.
    pub fn predict(&self, x: &Matrix, quantize_forward: bool) -> Result<Matrix> {
        let mut a = x.clone();
        for layer in &self.layers {
            a = match layer {
                Layer::Weighted(s) => s.forward(&a, quantize_forward)?.0,
                Layer::MaxPool { geo, .. } => maxpool_forward(&a, geo)?.0,
            };
        }
        Ok(a)
    }

    /// Backward pass from `d loss / d logits`, using the caches of the most
    /// recent [`forward`](Self::forward). Caches are left intact, so several
    /// backward passes (e.g. with different dither keys) may share one forward.
    pub fn backward(&self, logits_grad: &Matrix, mode: &BackpropMode, key: DitherKey) -> Result<Gradients> {
        self.backward_impl(logits_grad, mode, key, false)
    }

    /// Like [`backward`](Self::backward), additionally returning each weighted
    /// layer's preactivation gradient `δz` as seen by the quantizer.
    pub fn backward_capturing(
        &self,
        logits_grad: &Matrix,
        mode: &BackpropMode,
        key: DitherKey,
    ) -> Result<(Gradients, Vec<Matrix>)> {
        let mut g = self.backward_impl(logits_grad, mode, key, true)?;
        let dz = std::mem::take(&mut g.preact);
        Ok((g, dz))
    }

    fn backward_impl(&self, logits_grad: &Matrix, mode: &BackpropMode, key: DitherKey, capture: bool) -> Result<Gradients> {
        mode.validate()?;
        let mut preact = Vec::new();
        let n_weighted = self.num_weighted();
        let mut params = Vec::with_capacity(n_weighted);
        let mut stats = Vec::with_capacity(n_weighted);
        let mut macs = MacCounter::new();
        let mut nsd_ops = 0;
        let mut grad = logits_grad.clone();
        let mut widx = n_weighted;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need_input_grad = i > 0;
            match layer {
                Layer::Weighted(s) => {
                    widx -= 1;
                    let mut rng = key.layer_rng(widx);
                    let b = s.backward(i, &grad, mode, &mut rng, need_input_grad, capture, &mut macs)?;
                    preact.extend(b.captured);
                    params.push(b.param);
                    stats.push(b.stats);
                    nsd_ops += b.nsd_ops;
                    if let Some(g) = b.grad_in {
                        grad = g;
                    }
                }
                Layer::MaxPool { geo, argmax } => {
                    let arg = argmax.as_ref().ok_or(Error::MissingCache(i))?;
                    grad = maxpool_backward(&grad, arg, geo);
                }
            }
        }
        params.reverse();
        stats.reverse();
        preact.reverse();
        Ok(Gradients {
            params,
            stats,
            macs,
            nsd_ops,
            preact,
        })
    }

    /// Forward, loss and backward for one minibatch.
    pub fn loss_and_grad(
        &mut self,
        x: &Matrix,
        labels: &[usize],
        mode: &BackpropMode,
        key: DitherKey,
    ) -> Result<(f64, Gradients)> {
        let logits = self.forward(x, mode)?;
        let (loss, dlogits) = softmax_xent(&logits, labels)?;
        let grads = self.backward(&dlogits, mode, key)?;
        Ok((loss, grads))
    }

    /// Hash of all weights and biases, bit-exact: four interleaved FNV-1a
    /// lanes over 64-bit words, folded at the end.
    pub fn param_hash(&self) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut lanes = [0xcbf2_9ce4_8422_2325u64; 4];
        let mut fold = |xs: &[f64]| {
            let mut chunks = xs.chunks_exact(4);
            for c in &mut chunks {
                for (h, v) in lanes.iter_mut().zip(c) {
                    *h = (*h ^ v.to_bits()).wrapping_mul(PRIME);
                }
            }
            for (h, v) in lanes.iter_mut().zip(chunks.remainder()) {
                *h = (*h ^ v.to_bits()).wrapping_mul(PRIME);
            }
        };
        for l in self.weighted() {
            fold(l.weights.data());
            fold(&l.bias);
        }
        lanes.iter().fold(0xcbf2_9ce4_8422_2325u64, |a, &h| (a ^ h).wrapping_mul(PRIME))
    }

    /// Drops all forward caches.
    pub fn clear_caches(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Weighted(s) => s.cache = None,
                Layer::MaxPool { argmax, .. } => *argmax = None,
            }
        }
    }
}
