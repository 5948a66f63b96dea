//! Bias-free convolutional network graphs: layer definitions, shape
//! propagation, weight initialization and forward inference.
//!
//! A graph is a straight list of layers. Residual blocks are expressed by a
//! [`Layer::ResidualAdd`] that names the node its shortcut starts from. Node
//! `0` is the network input and node `p + 1` is the output of layer `p`.

mod arch;
mod backprop;
mod model_file;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{
    self, avg_pool, conv2d, fully_connected, global_pool, shortcut_forward, ActivationKind,
    ConvGeometry, PoolGeometry, Scalar, Tensor,
};

pub use arch::{
    build_fixup_resnet20, build_tiny, build_vgg7, Architecture, CIFAR_CLASSES, CIFAR_SHAPE,
    FIXUP_BLOCKS,
};
pub use backprop::{Gradients, ParamGrad};
pub use model_file::{load_model, read_model, save_model, write_model, AnyNetwork, MODEL_MAGIC};

/// Stride of the "avg-pool + pad" shortcut.
pub const SHORTCUT_STRIDE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShortcutKind {
    Identity,
    /// Window-1, stride-2 average pool followed by zero channel padding.
    AvgPoolPad,
}

impl fmt::Display for ShortcutKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShortcutKind::Identity => "identity",
            ShortcutKind::AvgPoolPad => "avgpool_pad",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    /// `r1×r2×Cin×Cout`
    pub kernel: Tensor<T>,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcLayer<T> {
    /// `in×out`
    pub weight: Tensor<T>,
}

/// One layer. None of the variants carries an additive term.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(ConvLayer<T>),
    AvgPool { window: usize, stride: usize },
    GlobalPool,
    Activation(ActivationKind),
    Fc(FcLayer<T>),
    /// Learnable scalar multiplier (Fixup rescaling).
    ScalarRescale { scale: T },
    /// Adds the shortcut taken from node `block_start`.
    ResidualAdd {
        block_start: usize,
        shortcut: ShortcutKind,
    },
}

impl<T: Scalar> Layer<T> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::AvgPool { .. } => "avg_pool",
            Layer::GlobalPool => "global_pool",
            Layer::Activation(_) => "activation",
            Layer::Fc(_) => "fc",
            Layer::ScalarRescale { .. } => "scalar_rescale",
            Layer::ResidualAdd { .. } => "residual_add",
        }
    }

    /// Number of learnable values.
    pub fn parameter_count(&self) -> usize {
        match self {
            Layer::Conv(c) => c.kernel.len(),
            Layer::Fc(f) => f.weight.len(),
            Layer::ScalarRescale { .. } => 1,
            _ => 0,
        }
    }

    /// Number of learnable values that enter additively (biases, shifts).
    /// Every layer kind here is linear or positively homogeneous.
    pub fn additive_parameter_count(&self) -> usize {
        match self {
            Layer::Conv(_)
            | Layer::AvgPool { .. }
            | Layer::GlobalPool
            | Layer::Activation(_)
            | Layer::Fc(_)
            | Layer::ScalarRescale { .. }
            | Layer::ResidualAdd { .. } => 0,
        }
    }

    fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Conv(c) => Layer::Conv(ConvLayer {
                kernel: c.kernel.cast(),
                stride: c.stride,
            }),
            Layer::AvgPool { window, stride } => Layer::AvgPool {
                window: *window,
                stride: *stride,
            },
            Layer::GlobalPool => Layer::GlobalPool,
            Layer::Activation(k) => Layer::Activation(*k),
            Layer::Fc(f) => Layer::Fc(FcLayer {
                weight: f.weight.cast(),
            }),
            Layer::ScalarRescale { scale } => Layer::ScalarRescale {
                scale: U::of(scale.as_f64()),
            },
            Layer::ResidualAdd {
                block_start,
                shortcut,
            } => Layer::ResidualAdd {
                block_start: *block_start,
                shortcut: *shortcut,
            },
        }
    }
}

/// Addressable measurement points: the pre-activation output of the n-th
/// convolution, or the fully-connected logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    Conv(usize),
    Fc,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Conv(n) => write!(f, "conv{n}"),
            LayerId::Fc => f.write_str("fc"),
        }
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "fc" {
            return Ok(LayerId::Fc);
        }
        let digits = s.strip_prefix("conv").unwrap_or(&s);
        digits
            .parse()
            .map(LayerId::Conv)
            .map_err(|_| Error::UnknownLayer(s.clone()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-normal kernels everywhere, unit rescaling scalars.
    He,
    /// Fixup: the last conv of every residual branch and the classifier start
    /// at zero, the first conv of a branch is He scaled by `blocks^(-1/2)`.
    Fixup,
}

/// Validated, immutable-shaped network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph<T = f32> {
    arch: Architecture,
    input_shape: [usize; 3],
    layers: Vec<Layer<T>>,
    node_shapes: Vec<Vec<usize>>,
    conv_positions: Vec<usize>,
    fc_position: usize,
    class_count: usize,
}

impl<T: Scalar> NetworkGraph<T> {
    pub fn from_layers(
        arch: Architecture,
        input_shape: [usize; 3],
        layers: Vec<Layer<T>>,
    ) -> Result<Self> {
        if input_shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGraph(format!(
                "input shape {input_shape:?} has a zero dimension"
            )));
        }
        let mut node_shapes = vec![input_shape.to_vec()];
        let mut conv_positions = Vec::new();
        let mut fc_position = None;
        for (p, layer) in layers.iter().enumerate() {
            let input = &node_shapes[p];
            if fc_position.is_some() && !matches!(layer, Layer::Activation(_)) {
                return Err(Error::InvalidGraph(format!(
                    "layer {p} ({}) follows the classifier; only a head activation may",
                    layer.kind_name()
                )));
            }
            let out = match layer {
                Layer::Conv(c) => {
                    conv_positions.push(p);
                    let g = ConvGeometry::new(input, c.kernel.shape(), c.stride).map_err(|e| {
                        Error::InvalidGraph(format!("conv{} at layer {p}: {e}", conv_positions.len() - 1))
                    })?;
                    g.output_shape().to_vec()
                }
                Layer::AvgPool { window, stride } => PoolGeometry::new(input, *window, *stride)
                    .map_err(|e| Error::InvalidGraph(format!("layer {p}: {e}")))?
                    .output_shape()
                    .to_vec(),
                Layer::GlobalPool => match input[..] {
                    [_, _, c] => vec![c],
                    _ => {
                        return Err(Error::InvalidGraph(format!(
                            "global pool at layer {p} needs a rank-3 input, got {input:?}"
                        )))
                    }
                },
                Layer::Activation(_) | Layer::ScalarRescale { .. } => input.clone(),
                Layer::Fc(f) => {
                    let &[fan_in, fan_out] = f.weight.shape() else {
                        return Err(Error::InvalidGraph("fc weight must be rank 2".into()));
                    };
                    if fan_in != input.iter().product::<usize>() {
                        return Err(Error::InvalidGraph(format!(
                            "fc at layer {p} expects {fan_in} inputs but receives {input:?}"
                        )));
                    }
                    fc_position = Some(p);
                    vec![fan_out]
                }
                Layer::ResidualAdd {
                    block_start,
                    shortcut,
                } => {
                    if *block_start > p {
                        return Err(Error::InvalidGraph(format!(
                            "residual at layer {p} starts at future node {block_start}"
                        )));
                    }
                    check_shortcut(&node_shapes[*block_start], *shortcut, input, p)?;
                    input.clone()
                }
            };
            node_shapes.push(out);
        }
        let fc_position =
            fc_position.ok_or_else(|| Error::InvalidGraph("network has no classifier".into()))?;
        let class_count = node_shapes[fc_position + 1][0];
        Ok(NetworkGraph {
            arch,
            input_shape,
            layers,
            node_shapes,
            conv_positions,
            fc_position,
            class_count,
        })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Shape of node `n` (node 0 is the input).
    pub fn node_shape(&self, node: usize) -> &[usize] {
        &self.node_shapes[node]
    }

    pub fn node_count(&self) -> usize {
        self.node_shapes.len()
    }

    pub fn conv_count(&self) -> usize {
        self.conv_positions.len()
    }

    pub fn conv_ids(&self) -> impl Iterator<Item = LayerId> + '_ {
        (0..self.conv_positions.len()).map(LayerId::Conv)
    }

    /// Layer list position of `id`.
    pub fn position(&self, id: LayerId) -> Result<usize> {
        match id {
            LayerId::Conv(n) => self
                .conv_positions
                .get(n)
                .copied()
                .ok_or_else(|| Error::UnknownLayer(id.to_string())),
            LayerId::Fc => Ok(self.fc_position),
        }
    }

    /// Node holding the pre-activation output of `id`.
    pub fn output_node(&self, id: LayerId) -> Result<usize> {
        Ok(self.position(id)? + 1)
    }

    pub fn logits_node(&self) -> usize {
        self.fc_position + 1
    }

    pub fn conv(&self, n: usize) -> Result<&ConvLayer<T>> {
        match &self.layers[self.position(LayerId::Conv(n))?] {
            Layer::Conv(c) => Ok(c),
            _ => unreachable!("conv position maps to a conv layer"),
        }
    }

    pub fn conv_geometry(&self, n: usize) -> Result<ConvGeometry> {
        let p = self.position(LayerId::Conv(n))?;
        let c = self.conv(n)?;
        ConvGeometry::new(&self.node_shapes[p], c.kernel.shape(), c.stride)
    }

    pub fn fc(&self) -> &FcLayer<T> {
        match &self.layers[self.fc_position] {
            Layer::Fc(f) => f,
            _ => unreachable!("fc position maps to the classifier"),
        }
    }

    /// Pre-activation shape of `id`.
    pub fn unit_shape(&self, id: LayerId) -> Result<&[usize]> {
        Ok(self.node_shape(self.output_node(id)?))
    }

    pub fn unit_count(&self, id: LayerId) -> Result<usize> {
        Ok(self.unit_shape(id)?.iter().product())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    /// Residual merges as `(block_start node, merge layer position, kind)`.
    pub fn shortcuts(&self) -> Vec<(usize, usize, ShortcutKind)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(p, l)| match l {
                Layer::ResidualAdd {
                    block_start,
                    shortcut,
                } => Some((*block_start, p, *shortcut)),
                _ => None,
            })
            .collect()
    }

    /// Structural and numerical bias audit: no layer carries an additive
    /// parameter, and the zero input maps to zero at every node.
    pub fn audit_bias_free(&self) -> Result<()> {
        for (p, layer) in self.layers.iter().enumerate() {
            if layer.additive_parameter_count() != 0 {
                return Err(Error::InvalidGraph(format!(
                    "layer {p} ({}) has additive parameters",
                    layer.kind_name()
                )));
            }
        }
        let pass = self.forward(&Tensor::zeros(&self.input_shape))?;
        for (n, node) in pass.nodes().iter().enumerate() {
            if node.data().iter().any(|v| *v != T::zero()) {
                return Err(Error::InvalidGraph(format!(
                    "node {n} is nonzero for the zero input"
                )));
            }
        }
        Ok(())
    }

    pub fn initialize(&mut self, init: Init, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = self.shortcuts();
        let block_count = blocks.len().max(1) as f64;
        for p in 0..self.layers.len() {
            let branch = blocks
                .iter()
                .find(|(start, merge, _)| (*start..*merge).contains(&p));
            let (first_in_branch, last_in_branch) = match branch {
                Some(&(start, merge, _)) => {
                    let convs: Vec<usize> = (start..merge)
                        .filter(|q| matches!(self.layers[*q], Layer::Conv(_)))
                        .collect();
                    (convs.first() == Some(&p), convs.last() == Some(&p))
                }
                None => (false, false),
            };
            match &mut self.layers[p] {
                Layer::Conv(c) => {
                    let [kh, kw, cin, _] = c.kernel.shape().try_into().expect("rank-4 kernel");
                    let mut std = (2.0 / (kh * kw * cin) as f64).sqrt();
                    if init == Init::Fixup && branch.is_some() {
                        if last_in_branch && !first_in_branch {
                            std = 0.0;
                        } else {
                            std /= block_count.sqrt();
                        }
                    }
                    fill_normal(&mut c.kernel, std, &mut rng);
                }
                Layer::Fc(f) => {
                    let std = if init == Init::Fixup {
                        0.0
                    } else {
                        (1.0 / f.weight.shape()[0] as f64).sqrt()
                    };
                    fill_normal(&mut f.weight, std, &mut rng);
                }
                Layer::ScalarRescale { scale } => *scale = T::one(),
                _ => {}
            }
        }
    }

    pub fn initialized(mut self, init: Init, seed: u64) -> Self {
        self.initialize(init, seed);
        self
    }

    pub fn cast<U: Scalar>(&self) -> NetworkGraph<U> {
        NetworkGraph {
            arch: self.arch,
            input_shape: self.input_shape,
            layers: self.layers.iter().map(Layer::cast).collect(),
            node_shapes: self.node_shapes.clone(),
            conv_positions: self.conv_positions.clone(),
            fc_position: self.fc_position,
            class_count: self.class_count,
        }
    }

    /// Evaluates layer `p` given all earlier nodes.
    pub(crate) fn apply_layer(&self, p: usize, nodes: &[Tensor<T>]) -> Result<Tensor<T>> {
        let x = &nodes[p];
        match &self.layers[p] {
            Layer::Conv(c) => conv2d(x, &c.kernel, c.stride),
            Layer::AvgPool { window, stride } => avg_pool(x, *window, *stride),
            Layer::GlobalPool => global_pool(x),
            Layer::Activation(kind) => Ok(tensor::activation(x, *kind)),
            Layer::Fc(f) => fully_connected(x, &f.weight),
            Layer::ScalarRescale { scale } => Ok(x.scale(*scale)),
            Layer::ResidualAdd {
                block_start,
                shortcut,
            } => {
                let short = apply_shortcut(&nodes[*block_start], *shortcut, x.shape())?;
                x.add(&short)
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<ForwardPass<T>> {
        if x.shape() != self.input_shape {
            return Err(Error::shape("forward", x.shape(), &self.input_shape));
        }
        let mut nodes = Vec::with_capacity(self.layers.len() + 1);
        nodes.push(x.clone());
        for p in 0..self.layers.len() {
            let next = self.apply_layer(p, &nodes)?;
            nodes.push(next);
        }
        Ok(ForwardPass {
            nodes,
            logits_node: self.logits_node(),
            conv_nodes: self.conv_positions.iter().map(|p| p + 1).collect(),
        })
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.logits().clone())
    }

    /// Argmax of the logits.
    pub fn predict(&self, x: &Tensor<T>) -> Result<usize> {
        Ok(self.logits(x)?.argmax())
    }
}

/// Checks that the shortcut from `source` can be added to a branch output of
/// shape `branch`.
fn check_shortcut(source: &[usize], kind: ShortcutKind, branch: &[usize], p: usize) -> Result<()> {
    let fits = match (kind, source, branch) {
        (ShortcutKind::Identity, _, _) => source == branch,
        (ShortcutKind::AvgPoolPad, &[h, w, c], &[bh, bw, bc]) => {
            h.div_ceil(SHORTCUT_STRIDE) == bh && w.div_ceil(SHORTCUT_STRIDE) == bw && c <= bc
        }
        _ => false,
    };
    if fits {
        Ok(())
    } else {
        Err(Error::InvalidGraph(format!(
            "residual at layer {p}: {kind} shortcut from {source:?} cannot merge into {branch:?}"
        )))
    }
}

/// Applies the shortcut so that its output has `target` shape (extra
/// channels are zero).
pub(crate) fn apply_shortcut<T: Scalar>(
    source: &Tensor<T>,
    kind: ShortcutKind,
    target: &[usize],
) -> Result<Tensor<T>> {
    match kind {
        ShortcutKind::Identity => Ok(source.clone()),
        ShortcutKind::AvgPoolPad => shortcut_forward(source, SHORTCUT_STRIDE, target[2]),
    }
}

fn fill_normal<T: Scalar>(t: &mut Tensor<T>, std: f64, rng: &mut ChaCha8Rng) {
    if std == 0.0 {
        t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let dist = Normal::new(0.0, std).expect("finite positive std");
    for v in t.data_mut() {
        *v = T::of(dist.sample(rng));
    }
}

/// All node values of one forward evaluation.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    nodes: Vec<Tensor<T>>,
    logits_node: usize,
    conv_nodes: Vec<usize>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn nodes(&self) -> &[Tensor<T>] {
        &self.nodes
    }

    pub fn node(&self, n: usize) -> &Tensor<T> {
        &self.nodes[n]
    }

    /// Classifier output before the head activation.
    pub fn logits(&self) -> &Tensor<T> {
        &self.nodes[self.logits_node]
    }

    /// Final network output (after the head activation).
    pub fn output(&self) -> &Tensor<T> {
        self.nodes.last().expect("at least the input node")
    }

    pub fn pre_activation(&self, id: LayerId) -> Result<&Tensor<T>> {
        match id {
            LayerId::Fc => Ok(self.logits()),
            LayerId::Conv(n) => self
                .conv_nodes
                .get(n)
                .map(|&node| &self.nodes[node])
                .ok_or_else(|| Error::UnknownLayer(id.to_string())),
        }
    }
}

/// Incremental graph construction with shape checking deferred to `build`.
pub struct GraphBuilder<T> {
    arch: Architecture,
    input_shape: [usize; 3],
    layers: Vec<Layer<T>>,
    shape: Vec<usize>,
    open_block: Option<usize>,
    error: Option<Error>,
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new(input_shape: [usize; 3]) -> Self {
        GraphBuilder {
            arch: Architecture::Custom,
            input_shape,
            layers: Vec::new(),
            shape: input_shape.to_vec(),
            open_block: None,
            error: None,
        }
    }

    pub fn arch(mut self, arch: Architecture) -> Self {
        self.arch = arch;
        self
    }

    /// Square `size×size` convolution with zero-initialized weights.
    pub fn conv(self, size: usize, out_channels: usize, stride: usize) -> Self {
        self.conv_rect(size, size, out_channels, stride)
    }

    pub fn conv_rect(mut self, kh: usize, kw: usize, out_channels: usize, stride: usize) -> Self {
        let cin = self.shape.last().copied().unwrap_or(0);
        if self.shape.len() != 3 || kh == 0 || kw == 0 || out_channels == 0 {
            self.fail(format!("cannot place a {kh}×{kw} conv after shape {:?}", self.shape));
            return self;
        }
        let kernel = Tensor::zeros(&[kh, kw, cin, out_channels]);
        self.push(Layer::Conv(ConvLayer { kernel, stride }))
    }

    pub fn activation(self, kind: ActivationKind) -> Self {
        self.push(Layer::Activation(kind))
    }

    pub fn relu(self) -> Self {
        self.activation(ActivationKind::Relu)
    }

    pub fn avg_pool(self, window: usize, stride: usize) -> Self {
        self.push(Layer::AvgPool { window, stride })
    }

    pub fn global_pool(self) -> Self {
        self.push(Layer::GlobalPool)
    }

    pub fn fc(mut self, out: usize) -> Self {
        let fan_in = self.shape.iter().product::<usize>();
        if out == 0 || fan_in == 0 {
            self.fail("fc needs a positive width".into());
            return self;
        }
        let weight = Tensor::zeros(&[fan_in, out]);
        self.push(Layer::Fc(FcLayer { weight }))
    }

    pub fn rescale(self) -> Self {
        self.push(Layer::ScalarRescale { scale: T::one() })
    }

    pub fn begin_block(mut self) -> Self {
        if self.open_block.is_some() {
            self.fail("residual blocks cannot nest".into());
        }
        self.open_block = Some(self.layers.len());
        self
    }

    pub fn end_block(mut self, shortcut: ShortcutKind) -> Self {
        match self.open_block.take() {
            Some(block_start) => self.push(Layer::ResidualAdd {
                block_start,
                shortcut,
            }),
            None => {
                self.fail("end_block without begin_block".into());
                self
            }
        }
    }

    fn fail(&mut self, msg: String) {
        if self.error.is_none() {
            self.error = Some(Error::InvalidGraph(msg));
        }
    }

    fn push(mut self, layer: Layer<T>) -> Self {
        if self.error.is_some() {
            return self;
        }
        self.layers.push(layer);
        // Validate incrementally so later builder calls see the right shape.
        match NetworkGraph::<T>::probe_shape(self.input_shape, &self.layers) {
            Ok(shape) => self.shape = shape,
            Err(e) => self.error = Some(e),
        }
        self
    }

    pub fn build(self) -> Result<NetworkGraph<T>> {
        if let Some(e) = self.error {
            return Err(e);
        }
        if self.open_block.is_some() {
            return Err(Error::InvalidGraph("unterminated residual block".into()));
        }
        NetworkGraph::from_layers(self.arch, self.input_shape, self.layers)
    }
}

impl<T: Scalar> NetworkGraph<T> {
    /// Output shape of a (possibly classifier-less) layer prefix.
    fn probe_shape(input_shape: [usize; 3], layers: &[Layer<T>]) -> Result<Vec<usize>> {
        let mut shapes = vec![input_shape.to_vec()];
        for (p, layer) in layers.iter().enumerate() {
            let input = &shapes[p];
            let out = match layer {
                Layer::Conv(c) => ConvGeometry::new(input, c.kernel.shape(), c.stride)
                    .map_err(|e| Error::InvalidGraph(format!("layer {p}: {e}")))?
                    .output_shape()
                    .to_vec(),
                Layer::AvgPool { window, stride } => PoolGeometry::new(input, *window, *stride)
                    .map_err(|e| Error::InvalidGraph(format!("layer {p}: {e}")))?
                    .output_shape()
                    .to_vec(),
                Layer::GlobalPool => vec![*input.last().unwrap_or(&0)],
                Layer::Fc(f) => vec![f.weight.shape()[1]],
                Layer::Activation(_) | Layer::ScalarRescale { .. } => input.clone(),
                Layer::ResidualAdd {
                    block_start,
                    shortcut,
                } => {
                    check_shortcut(&shapes[*block_start], *shortcut, input, p)?;
                    input.clone()
                }
            };
            shapes.push(out);
        }
        Ok(shapes.pop().expect("non-empty"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkGraph<f64> {
        GraphBuilder::new([6, 6, 2])
            .conv(3, 4, 1)
            .relu()
            .avg_pool(3, 2)
            .conv(3, 4, 1)
            .relu()
            .global_pool()
            .fc(3)
            .activation(ActivationKind::Relu6)
            .build()
            .unwrap()
            .initialized(Init::He, 11)
    }

    #[test]
    fn layer_id_parsing() {
        assert_eq!("conv3".parse::<LayerId>().unwrap(), LayerId::Conv(3));
        assert_eq!("7".parse::<LayerId>().unwrap(), LayerId::Conv(7));
        assert_eq!("FC".parse::<LayerId>().unwrap(), LayerId::Fc);
        assert!("pool".parse::<LayerId>().is_err());
    }

    #[test]
    fn builder_rejects_channel_mismatch_in_residual() {
        let err = GraphBuilder::<f32>::new([8, 8, 4])
            .begin_block()
            .conv(3, 6, 1)
            .end_block(ShortcutKind::Identity)
            .global_pool()
            .fc(2)
            .build();
        assert!(err.is_err());
    }

    #[test]
    fn builder_rejects_layers_after_classifier() {
        let err = GraphBuilder::<f32>::new([4, 4, 1])
            .global_pool()
            .fc(2)
            .fc(2)
            .build();
        assert!(matches!(err, Err(Error::InvalidGraph(_))));
    }

    #[test]
    fn zero_input_zero_everywhere() {
        let net = tiny();
        net.audit_bias_free().unwrap();
        let pass = net.forward(&Tensor::zeros(&[6, 6, 2])).unwrap();
        assert!(pass.logits().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_bad_shape() {
        let net = tiny();
        assert!(matches!(
            net.forward(&Tensor::zeros(&[6, 6, 3])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn positive_homogeneity() {
        let net = tiny();
        let x = Tensor::from_fn(&[6, 6, 2], |i| ((i * 37) % 11) as f64 - 5.0);
        let base = net.logits(&x).unwrap();
        for k in [0.125, 0.5, 3.0, 17.0] {
            let scaled = net.logits(&x.scale(k)).unwrap();
            for (a, b) in scaled.data().iter().zip(base.data()) {
                assert!((a - k * b).abs() <= 1e-12 * (1.0 + (k * b).abs()));
            }
        }
    }

    #[test]
    fn unit_counts_and_positions() {
        let net = tiny();
        assert_eq!(net.conv_count(), 2);
        assert_eq!(net.unit_count(LayerId::Conv(1)).unwrap(), 3 * 3 * 4);
        assert_eq!(net.unit_count(LayerId::Fc).unwrap(), 3);
        assert!(net.position(LayerId::Conv(2)).is_err());
    }
}
