//! Reverse-mode differentiation of the live network (activation derivatives
//! evaluated at the actual input), used for training and for adversarial
//! gradients. The frozen-trace replay in `adjoint` is a separate code path.

use super::{ForwardPass, Layer, NetworkGraph, ShortcutKind, SHORTCUT_STRIDE};
use crate::error::{Error, Result};
use crate::tensor::{
    avg_pool_adjoint, conv2d_input_adjoint, conv2d_kernel_grad, fully_connected_adjoint,
    global_pool_adjoint, shortcut_adjoint, ConvGeometry, PoolGeometry, Scalar, Tensor,
};

/// Gradient of one layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad<T> {
    Kernel(Tensor<T>),
    Weight(Tensor<T>),
    Scale(T),
}

impl<T: Scalar> ParamGrad<T> {
    fn values(&self) -> &[T] {
        match self {
            ParamGrad::Kernel(t) | ParamGrad::Weight(t) => t.data(),
            ParamGrad::Scale(s) => std::slice::from_ref(s),
        }
    }

    fn values_mut(&mut self) -> &mut [T] {
        match self {
            ParamGrad::Kernel(t) | ParamGrad::Weight(t) => t.data_mut(),
            ParamGrad::Scale(s) => std::slice::from_mut(s),
        }
    }
}

/// Parameter gradients, one slot per layer (`None` for parameter-free layers).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Option<ParamGrad<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &NetworkGraph<T>) -> Self {
        let layers = net
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Some(ParamGrad::Kernel(Tensor::zeros(c.kernel.shape()))),
                Layer::Fc(f) => Some(ParamGrad::Weight(Tensor::zeros(f.weight.shape()))),
                Layer::ScalarRescale { .. } => Some(ParamGrad::Scale(T::zero())),
                _ => None,
            })
            .collect();
        Gradients { layers }
    }

    /// Flat view over all gradient values in layer order.
    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| g.values().iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|g| g.values_mut().iter_mut())
    }

    pub fn scale(&mut self, k: T) {
        self.values_mut().for_each(|v| *v *= k);
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

impl<T: Scalar> NetworkGraph<T> {
    /// Flat mutable view over every learnable value in layer order (matches
    /// [`Gradients::values`]).
    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.layers_mut().iter_mut().flat_map(|l| -> Box<dyn Iterator<Item = &mut T>> {
            match l {
                Layer::Conv(c) => Box::new(c.kernel.data_mut().iter_mut()),
                Layer::Fc(f) => Box::new(f.weight.data_mut().iter_mut()),
                Layer::ScalarRescale { scale } => Box::new(std::iter::once(scale)),
                _ => Box::new(std::iter::empty()),
            }
        })
    }

    /// Gradient of `⟨node[seed_node] | seed⟩` with respect to the input.
    pub fn input_gradient(
        &self,
        pass: &ForwardPass<T>,
        seed_node: usize,
        seed: Tensor<T>,
    ) -> Result<Tensor<T>> {
        Ok(self
            .backprop(pass, seed_node, seed, None, true)?
            .expect("input gradient requested"))
    }

    /// Accumulates the parameter gradient of `⟨node[seed_node] | seed⟩` into
    /// `grads`.
    pub fn accumulate_param_gradients(
        &self,
        pass: &ForwardPass<T>,
        seed_node: usize,
        seed: Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<()> {
        self.backprop(pass, seed_node, seed, Some(grads), false)
            .map(|_| ())
    }

    fn backprop(
        &self,
        pass: &ForwardPass<T>,
        seed_node: usize,
        seed: Tensor<T>,
        mut grads: Option<&mut Gradients<T>>,
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        if pass.nodes().len() != self.node_count() {
            return Err(Error::invalid("forward pass does not belong to this network"));
        }
        if seed_node >= self.node_count() {
            return Err(Error::IndexOutOfRange {
                what: "seed node",
                index: seed_node,
                limit: self.node_count(),
            });
        }
        if seed.shape() != self.node_shape(seed_node) {
            return Err(Error::shape("backprop seed", seed.shape(), self.node_shape(seed_node)));
        }
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; self.node_count()];
        pending[seed_node] = Some(seed);
        // Skip input-side adjoints that nobody needs: the earliest parameter
        // layer bounds the work when only parameter gradients are wanted.
        let stop = if want_input {
            0
        } else {
            self.layers()
                .iter()
                .position(|l| l.parameter_count() > 0)
                .unwrap_or(seed_node)
        };
        for p in (0..seed_node).rev() {
            let Some(g) = pending[p + 1].take() else {
                continue;
            };
            let x = pass.node(p);
            let needs_input = p > stop || want_input;
            let grad_in = match &self.layers()[p] {
                Layer::Conv(c) => {
                    let geom = ConvGeometry::new(x.shape(), c.kernel.shape(), c.stride)?;
                    if let Some(ParamGrad::Kernel(k)) =
                        grads.as_deref_mut().and_then(|gr| gr.layers[p].as_mut())
                    {
                        conv2d_kernel_grad(x, &g, &geom, k)?;
                    }
                    if needs_input {
                        Some(conv2d_input_adjoint(&g, &c.kernel, &geom, None)?.0)
                    } else {
                        None
                    }
                }
                Layer::Fc(f) => {
                    if let Some(ParamGrad::Weight(w)) =
                        grads.as_deref_mut().and_then(|gr| gr.layers[p].as_mut())
                    {
                        let fan_out = g.len();
                        for (a, xa) in x.data().iter().enumerate() {
                            let row = &mut w.data_mut()[a * fan_out..(a + 1) * fan_out];
                            for (wv, gv) in row.iter_mut().zip(g.data()) {
                                *wv += *xa * *gv;
                            }
                        }
                    }
                    Some(fully_connected_adjoint(&g, &f.weight, x.shape())?)
                }
                Layer::ScalarRescale { scale } => {
                    if let Some(ParamGrad::Scale(s)) =
                        grads.as_deref_mut().and_then(|gr| gr.layers[p].as_mut())
                    {
                        let dot = x
                            .data()
                            .iter()
                            .zip(g.data())
                            .fold(T::zero(), |acc, (a, b)| acc + *a * *b);
                        *s += dot;
                    }
                    Some(g.scale(*scale))
                }
                Layer::Activation(kind) => Some(g.zip_map(x, |gv, xv| gv * kind.derivative(xv))?),
                Layer::AvgPool { window, stride } => {
                    let geom = PoolGeometry::new(x.shape(), *window, *stride)?;
                    Some(avg_pool_adjoint(&g, &geom, None)?.0)
                }
                Layer::GlobalPool => Some(global_pool_adjoint(&g, x.shape())?),
                Layer::ResidualAdd {
                    block_start,
                    shortcut,
                } => {
                    let source_shape = self.node_shape(*block_start);
                    let short = match shortcut {
                        ShortcutKind::Identity => g.clone(),
                        ShortcutKind::AvgPoolPad => {
                            shortcut_adjoint(&g, source_shape, SHORTCUT_STRIDE, None)?.0
                        }
                    };
                    accumulate(&mut pending[*block_start], short)?;
                    Some(g)
                }
            };
            if let Some(gi) = grad_in {
                accumulate(&mut pending[p], gi)?;
            }
        }
        Ok(if want_input { pending[0].take().or_else(|| Some(Tensor::zeros(self.node_shape(0)))) } else { None })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, value: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&value),
        None => {
            *slot = Some(value);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{GraphBuilder, Init, ShortcutKind};
    use crate::tensor::{inner_product, ActivationKind};

    fn net() -> NetworkGraph<f64> {
        GraphBuilder::new([6, 6, 2])
            .conv(3, 3, 1)
            .relu()
            .begin_block()
            .conv(3, 4, 2)
            .activation(ActivationKind::LeakyRelu)
            .conv(3, 4, 1)
            .rescale()
            .end_block(ShortcutKind::AvgPoolPad)
            .relu()
            .avg_pool(3, 2)
            .global_pool()
            .fc(3)
            .build()
            .unwrap()
            .initialized(Init::He, 5)
    }

    fn input() -> Tensor<f64> {
        Tensor::from_fn(&[6, 6, 2], |i| ((i * 29 + 3) % 17) as f64 / 8.0 - 1.0)
    }

    fn objective(net: &NetworkGraph<f64>, x: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
        inner_product(&net.logits(x).unwrap(), w).unwrap()
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = net();
        let x = input();
        let w = Tensor::from_vec(&[3], vec![0.7, -1.3, 0.4]).unwrap();
        let pass = net.forward(&x).unwrap();
        let g = net.input_gradient(&pass, net.logits_node(), w.clone()).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let fd = (objective(&net, &plus, &w) - objective(&net, &minus, &w)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-6, "{i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let mut net = net();
        let x = input();
        let w = Tensor::from_vec(&[3], vec![0.2, 0.9, -0.5]).unwrap();
        let pass = net.forward(&x).unwrap();
        let mut grads = Gradients::zeros_like(&net);
        net.accumulate_param_gradients(&pass, net.logits_node(), w.clone(), &mut grads)
            .unwrap();
        let analytic: Vec<f64> = grads.values().collect();
        let count = analytic.len();
        assert_eq!(count, net.parameter_count());
        let h = 1e-6;
        for i in 0..count {
            let orig = *net.parameters_mut().nth(i).unwrap();
            *net.parameters_mut().nth(i).unwrap() = orig + h;
            let up = objective(&net, &x, &w);
            *net.parameters_mut().nth(i).unwrap() = orig - h;
            let down = objective(&net, &x, &w);
            *net.parameters_mut().nth(i).unwrap() = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-6, "param {i}: {fd} vs {}", analytic[i]);
        }
    }
}
