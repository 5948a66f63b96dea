//! Frozen-gate linearization of a bias-free network.
//!
//! [`ActivationTrace::record`] runs the network at `z(x) = k·x` and stores
//! which activation gates are open. With the gates frozen the network is a
//! linear map `J`; [`Linearized::jvp`] applies `J` and [`Linearized::vjp`]
//! applies its adjoint `Jᵀ` by replaying the layers in reverse.

use std::fmt;

use crate::error::{Error, Result};
use crate::network::{Layer, LayerId, NetworkGraph, ShortcutKind, SHORTCUT_STRIDE};
use crate::tensor::{
    avg_pool_adjoint, conv2d_input_adjoint, fully_connected_adjoint, global_pool_adjoint,
    shortcut_adjoint, ActivationKind, ConvGeometry, PoolGeometry, Region, Scalar, Tensor,
    LEAKY_SLOPE,
};

pub const DEFAULT_K: f64 = 0.125;

/// The scaling map `z(x) = k·x`, `k > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvaluationPoint {
    k: f64,
}

impl EvaluationPoint {
    pub fn new(k: f64) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::invalid(format!(
                "evaluation scale must be a positive finite number, got {k}"
            )));
        }
        Ok(EvaluationPoint { k })
    }

    pub fn k(self) -> f64 {
        self.k
    }

    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        x.scale(T::of(self.k))
    }
}

impl Default for EvaluationPoint {
    fn default() -> Self {
        EvaluationPoint { k: DEFAULT_K }
    }
}

/// Gate state of one activation layer. A gate is open where the
/// pre-activation is strictly positive (and below the clip for ReLU6).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateMask {
    kind: ActivationKind,
    open: Vec<bool>,
}

impl GateMask {
    pub fn from_pre_activation<T: Scalar>(kind: ActivationKind, pre: &Tensor<T>) -> Self {
        let six = T::of(6.0);
        let open = pre
            .data()
            .iter()
            .map(|&v| match kind {
                ActivationKind::Relu | ActivationKind::LeakyRelu => v > T::zero(),
                ActivationKind::Relu6 => v > T::zero() && v < six,
            })
            .collect();
        GateMask { kind, open }
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn open(&self) -> &[bool] {
        &self.open
    }

    pub fn open_count(&self) -> usize {
        self.open.iter().filter(|&&o| o).count()
    }

    fn closed_slope<T: Scalar>(&self) -> T {
        match self.kind {
            ActivationKind::LeakyRelu => T::of(LEAKY_SLOPE),
            ActivationKind::Relu | ActivationKind::Relu6 => T::zero(),
        }
    }

    /// Multiplies `t` by the frozen slopes, restricted to `region` for rank-3
    /// tensors (values outside are left untouched; callers guarantee they
    /// are zero).
    fn apply_in_place<T: Scalar>(&self, t: &mut Tensor<T>, region: Option<Region>) {
        let closed = self.closed_slope::<T>();
        let gate = |v: &mut T, open: bool| {
            if !open {
                *v *= closed;
            }
        };
        match (region, t.shape()) {
            (Some(r), &[_, w, c]) => {
                let data = t.data_mut();
                for y in r.row_start..r.row_end {
                    let start = (y * w + r.col_start) * c;
                    let end = (y * w + r.col_end) * c;
                    for (v, &open) in data[start..end].iter_mut().zip(&self.open[start..end]) {
                        gate(v, open);
                    }
                }
            }
            _ => {
                for (v, &open) in t.data_mut().iter_mut().zip(&self.open) {
                    gate(v, open);
                }
            }
        }
    }
}

/// Gates of every activation layer recorded at one evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    point: EvaluationPoint,
    node_shapes: Vec<Vec<usize>>,
    gates: Vec<Option<GateMask>>,
}

impl ActivationTrace {
    /// Runs the network at `point.apply(x)` and records the gates.
    ///
    /// Fails if an activation that is not positively homogeneous sits before
    /// the classifier output, since the frozen map would then miss an offset.
    pub fn record<T: Scalar>(
        net: &NetworkGraph<T>,
        x: &Tensor<T>,
        point: EvaluationPoint,
    ) -> Result<Self> {
        let logits_node = net.logits_node();
        for (p, layer) in net.layers()[..logits_node].iter().enumerate() {
            if let Layer::Activation(kind) = layer {
                if !kind.is_positively_homogeneous() {
                    return Err(Error::InvalidGraph(format!(
                        "{kind} at layer {p} is not positively homogeneous"
                    )));
                }
            }
        }
        let pass = net.forward(&point.apply(x))?;
        let gates = net
            .layers()
            .iter()
            .enumerate()
            .map(|(p, layer)| match layer {
                Layer::Activation(kind) => Some(GateMask::from_pre_activation(*kind, pass.node(p))),
                _ => None,
            })
            .collect();
        Ok(ActivationTrace {
            point,
            node_shapes: (0..net.node_count()).map(|n| net.node_shape(n).to_vec()).collect(),
            gates,
        })
    }

    pub fn point(&self) -> EvaluationPoint {
        self.point
    }

    /// Gate of the activation at layer position `p`.
    pub fn gate(&self, p: usize) -> Option<&GateMask> {
        self.gates.get(p).and_then(Option::as_ref)
    }

    /// `(layer position, gate)` for every activation layer.
    pub fn gates(&self) -> impl Iterator<Item = (usize, &GateMask)> {
        self.gates
            .iter()
            .enumerate()
            .filter_map(|(p, g)| g.as_ref().map(|g| (p, g)))
    }

    /// True when both traces froze every gate identically.
    pub fn same_gates(&self, other: &ActivationTrace) -> bool {
        self.gates == other.gates
    }

    fn check<T: Scalar>(&self, net: &NetworkGraph<T>) -> Result<()> {
        if self.node_shapes.len() != net.node_count() {
            return Err(Error::TraceMismatch(format!(
                "trace has {} nodes, network has {}",
                self.node_shapes.len(),
                net.node_count()
            )));
        }
        for (n, shape) in self.node_shapes.iter().enumerate() {
            if shape != net.node_shape(n) {
                return Err(Error::TraceMismatch(format!(
                    "node {n} is {shape:?} in the trace but {:?} in the network",
                    net.node_shape(n)
                )));
            }
        }
        for (p, layer) in net.layers().iter().enumerate() {
            let traced = self.gates[p].as_ref().map(GateMask::kind);
            let actual = match layer {
                Layer::Activation(kind) => Some(*kind),
                _ => None,
            };
            if traced != actual {
                return Err(Error::TraceMismatch(format!(
                    "layer {p} activation differs between trace and network"
                )));
            }
        }
        Ok(())
    }
}

pub fn trace<T: Scalar>(
    net: &NetworkGraph<T>,
    x: &Tensor<T>,
    point: EvaluationPoint,
) -> Result<ActivationTrace> {
    ActivationTrace::record(net, x, point)
}

/// Where a linear functional is attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    /// Output of conv `n` (before its activation) or the classifier logits.
    PreActivation(LayerId),
    /// The tensor fed into conv `n`.
    ConvInput(usize),
}

impl Target {
    pub fn node<T: Scalar>(self, net: &NetworkGraph<T>) -> Result<usize> {
        match self {
            Target::PreActivation(id) => net.output_node(id),
            Target::ConvInput(n) => net.position(LayerId::Conv(n)),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::PreActivation(id) => write!(f, "{id}"),
            Target::ConvInput(n) => write!(f, "conv{n}.input"),
        }
    }
}

/// A dual vector attached to `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cotangent<T> {
    pub target: Target,
    pub tensor: Tensor<T>,
}

impl<T: Scalar> Cotangent<T> {
    pub fn new(target: Target, tensor: Tensor<T>) -> Self {
        Cotangent { target, tensor }
    }
}

/// A network paired with a trace recorded on it.
#[derive(Clone, Copy, Debug)]
pub struct Linearized<'a, T> {
    net: &'a NetworkGraph<T>,
    trace: &'a ActivationTrace,
}

impl<'a, T: Scalar> Linearized<'a, T> {
    pub fn new(net: &'a NetworkGraph<T>, trace: &'a ActivationTrace) -> Result<Self> {
        trace.check(net)?;
        Ok(Linearized { net, trace })
    }

    pub fn net(&self) -> &'a NetworkGraph<T> {
        self.net
    }

    pub fn trace(&self) -> &'a ActivationTrace {
        self.trace
    }

    pub fn target_shape(&self, target: Target) -> Result<&'a [usize]> {
        Ok(self.net.node_shape(target.node(self.net)?))
    }

    /// `J·v` at `target`.
    pub fn jvp(&self, v: &Tensor<T>, target: Target) -> Result<Tensor<T>> {
        let end = target.node(self.net)?;
        let input_shape = self.net.node_shape(0);
        if v.shape() != input_shape {
            return Err(Error::shape("jvp", v.shape(), input_shape));
        }
        let mut nodes = Vec::with_capacity(end + 1);
        nodes.push(v.clone());
        for p in 0..end {
            let next = match (&self.net.layers()[p], self.trace.gate(p)) {
                (Layer::Activation(_), Some(gate)) => {
                    let mut t = nodes[p].clone();
                    gate.apply_in_place(&mut t, None);
                    t
                }
                _ => self.net.apply_layer(p, &nodes)?,
            };
            nodes.push(next);
        }
        Ok(nodes.swap_remove(end))
    }

    /// `Jᵀ·cot` as an input-shaped tensor.
    pub fn vjp(&self, cot: &Cotangent<T>) -> Result<Tensor<T>> {
        let start = cot.target.node(self.net)?;
        let shape = self.net.node_shape(start);
        if cot.tensor.shape() != shape {
            return Err(Error::shape("vjp cotangent", cot.tensor.shape(), shape));
        }
        let mut pending: Vec<Option<(Tensor<T>, Option<Region>)>> =
            vec![None; self.net.node_count()];
        let region = support_region(&cot.tensor);
        pending[start] = Some((cot.tensor.clone(), region));
        for p in (0..start).rev() {
            let Some((mut g, region)) = pending[p + 1].take() else {
                continue;
            };
            let in_shape = self.net.node_shape(p);
            let (grad_in, region_in) = match &self.net.layers()[p] {
                // A zero kernel sends nothing back; the branch behind it is
                // skipped (Fixup initializes every residual branch this way).
                Layer::Conv(c) if c.kernel.data().iter().all(|v| *v == T::zero()) => continue,
                Layer::Conv(c) => {
                    let geom = ConvGeometry::new(in_shape, c.kernel.shape(), c.stride)?;
                    let (t, r) = conv2d_input_adjoint(&g, &c.kernel, &geom, region)?;
                    (t, Some(r))
                }
                Layer::Activation(_) => {
                    let gate = self.trace.gate(p).expect("checked against the network");
                    gate.apply_in_place(&mut g, region);
                    (g, region)
                }
                Layer::AvgPool { window, stride } => {
                    let geom = PoolGeometry::new(in_shape, *window, *stride)?;
                    let (t, r) = avg_pool_adjoint(&g, &geom, region)?;
                    (t, Some(r))
                }
                Layer::GlobalPool => (global_pool_adjoint(&g, in_shape)?, full_region(in_shape)),
                Layer::Fc(f) => (
                    fully_connected_adjoint(&g, &f.weight, in_shape)?,
                    full_region(in_shape),
                ),
                Layer::ScalarRescale { scale } => {
                    g.scale_in_place(*scale);
                    (g, region)
                }
                Layer::ResidualAdd {
                    block_start,
                    shortcut,
                } => {
                    let source_shape = self.net.node_shape(*block_start);
                    let short = match shortcut {
                        ShortcutKind::Identity => (g.clone(), region),
                        ShortcutKind::AvgPoolPad => {
                            let (t, r) = shortcut_adjoint(&g, source_shape, SHORTCUT_STRIDE, region)?;
                            (t, Some(r))
                        }
                    };
                    accumulate(&mut pending[*block_start], short)?;
                    (g, region)
                }
            };
            accumulate(&mut pending[p], (grad_in, region_in))?;
        }
        Ok(pending[0]
            .take()
            .map(|(t, _)| t)
            .unwrap_or_else(|| Tensor::zeros(self.net.node_shape(0))))
    }
}

pub fn jvp<T: Scalar>(
    trace: &ActivationTrace,
    net: &NetworkGraph<T>,
    v: &Tensor<T>,
    target: Target,
) -> Result<Tensor<T>> {
    Linearized::new(net, trace)?.jvp(v, target)
}

pub fn vjp<T: Scalar>(
    trace: &ActivationTrace,
    net: &NetworkGraph<T>,
    cot: &Cotangent<T>,
) -> Result<Tensor<T>> {
    Linearized::new(net, trace)?.vjp(cot)
}

/// Dense Jacobian at `target`, one column per input element, assembled from
/// `jvp` on basis vectors. Only meant as a reference for small networks.
pub fn dense_jacobian<T: Scalar>(lin: &Linearized<'_, T>, target: Target) -> Result<Vec<Tensor<T>>> {
    let input_shape = lin.net().node_shape(0).to_vec();
    let n: usize = input_shape.iter().product();
    (0..n)
        .map(|i| lin.jvp(&Tensor::basis(&input_shape, i), target))
        .collect()
}

/// Spatial bounding box of the nonzero entries of a rank-3 tensor.
fn support_region<T: Scalar>(t: &Tensor<T>) -> Option<Region> {
    let &[h, w, c] = t.shape() else {
        return None;
    };
    let mut bounds: Option<Region> = None;
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c;
            if t.data()[base..base + c].iter().any(|v| *v != T::zero()) {
                let here = Region::single(y, x);
                bounds = Some(bounds.map_or(here, |b| b.union(&here)));
            }
        }
    }
    // An all-zero cotangent still needs a (trivially empty) replay.
    Some(bounds.unwrap_or(Region::single(0, 0)))
}

fn full_region(shape: &[usize]) -> Option<Region> {
    match shape {
        &[h, w, _] => Some(Region::full(h, w)),
        _ => None,
    }
}

fn accumulate<T: Scalar>(
    slot: &mut Option<(Tensor<T>, Option<Region>)>,
    (value, region): (Tensor<T>, Option<Region>),
) -> Result<()> {
    match slot {
        Some((existing, r)) => {
            existing.add_assign(&value)?;
            *r = match (*r, region) {
                (Some(a), Some(b)) => Some(a.union(&b)),
                _ => None,
            };
            Ok(())
        }
        None => {
            *slot = Some((value, region));
            Ok(())
        }
    }
}
