//! Effective hypersurfaces for the five reconstruction modes.
//!
//! Every surface is `Jᵀ·c` for a mode-specific cotangent `c`:
//!
//! | mode | indices   | cotangent                                                   |
//! |------|-----------|-------------------------------------------------------------|
//! | RM4  | s, j, i   | kernel slice `w[:,:,j,i]` on window `s` of the conv input, channel `j` |
//! | RM3  | j, i      | the RM4 cotangents summed over every window `s`             |
//! | RM2  | s, i      | unit `(s, i)` of the conv output                            |
//! | RM1  | i         | every position of output channel `i`                        |
//! | RM0  | k         | logit `k`                                                   |
//!
//! `s` enumerates the output grid row-major. The inner product of an input
//! with its surface reproduces the corresponding (partial) pre-activation
//! whenever the trace was recorded at a positive multiple of that input.

mod stream;

use std::fmt;
use std::str::FromStr;

use crate::adjoint::{ActivationTrace, Cotangent, Linearized, Target};
use crate::error::{Error, Result};
use crate::network::{LayerId, NetworkGraph};
use crate::tensor::{ConvGeometry, Scalar, Tensor};

pub use stream::{
    HypersurfaceArchive, IndexFilter, ReconstructionRequest, SurfacePlan, SurfaceStream,
    HYPERSURFACE_MAGIC,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Rm0,
    Rm1,
    Rm2,
    Rm3,
    Rm4,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Rm0, Mode::Rm1, Mode::Rm2, Mode::Rm3, Mode::Rm4];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Mode::ALL.get(tag as usize).copied()
    }

    /// Index axes used by the mode, in emission order (outermost first).
    pub fn axes(self) -> &'static [Axis] {
        match self {
            Mode::Rm0 => &[Axis::K],
            Mode::Rm1 => &[Axis::I],
            Mode::Rm2 => &[Axis::S, Axis::I],
            Mode::Rm3 => &[Axis::J, Axis::I],
            Mode::Rm4 => &[Axis::S, Axis::J, Axis::I],
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rm{}", self.tag())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let digits = lower.strip_prefix("rm").unwrap_or(&lower);
        digits
            .parse::<u8>()
            .ok()
            .and_then(Mode::from_tag)
            .ok_or_else(|| Error::invalid(format!("unknown reconstruction mode {s:?}")))
    }
}

/// Surface index axes: stride offset, in-channel, out-channel, class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    S,
    J,
    I,
    K,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::S => "s",
            Axis::J => "j",
            Axis::I => "i",
            Axis::K => "k",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SurfaceIndex {
    pub s: Option<usize>,
    pub j: Option<usize>,
    pub i: Option<usize>,
    pub k: Option<usize>,
}

impl SurfaceIndex {
    pub fn get(&self, axis: Axis) -> Option<usize> {
        match axis {
            Axis::S => self.s,
            Axis::J => self.j,
            Axis::I => self.i,
            Axis::K => self.k,
        }
    }

    pub fn set(&mut self, axis: Axis, v: usize) {
        let slot = match axis {
            Axis::S => &mut self.s,
            Axis::J => &mut self.j,
            Axis::I => &mut self.i,
            Axis::K => &mut self.k,
        };
        *slot = Some(v);
    }

    pub fn rm4(s: usize, j: usize, i: usize) -> Self {
        SurfaceIndex {
            s: Some(s),
            j: Some(j),
            i: Some(i),
            k: None,
        }
    }

    pub fn rm3(j: usize, i: usize) -> Self {
        SurfaceIndex {
            j: Some(j),
            i: Some(i),
            ..Default::default()
        }
    }

    pub fn rm2(s: usize, i: usize) -> Self {
        SurfaceIndex {
            s: Some(s),
            i: Some(i),
            ..Default::default()
        }
    }

    pub fn rm1(i: usize) -> Self {
        SurfaceIndex {
            i: Some(i),
            ..Default::default()
        }
    }

    pub fn rm0(k: usize) -> Self {
        SurfaceIndex {
            k: Some(k),
            ..Default::default()
        }
    }
}

impl fmt::Display for SurfaceIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for axis in [Axis::S, Axis::J, Axis::I, Axis::K] {
            if let Some(v) = self.get(axis) {
                if !first {
                    f.write_str(",")?;
                }
                write!(f, "{}={v}", axis.name())?;
                first = false;
            }
        }
        Ok(())
    }
}

/// One reconstructed surface; `tensor` has the network's input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypersurface<T> {
    pub tensor: Tensor<T>,
    pub mode: Mode,
    pub layer: LayerId,
    pub index: SurfaceIndex,
    /// Scale `k` of the evaluation point `z(x) = k·x` the trace was taken at.
    pub eval_k: f64,
}

/// Size of every index axis of `mode` at `layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexRanges {
    /// Output grid `(rows, cols)`; `s` ranges over `rows·cols`.
    pub grid: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub classes: usize,
}

impl IndexRanges {
    pub fn len(&self, axis: Axis) -> usize {
        match axis {
            Axis::S => self.grid.0 * self.grid.1,
            Axis::J => self.in_channels,
            Axis::I => self.out_channels,
            Axis::K => self.classes,
        }
    }
}

/// Checks that `mode` may target `layer` and returns its index ranges.
pub fn index_ranges<T: Scalar>(net: &NetworkGraph<T>, mode: Mode, layer: LayerId) -> Result<IndexRanges> {
    match (mode, layer) {
        (Mode::Rm0, LayerId::Fc) => Ok(IndexRanges {
            grid: (1, 1),
            in_channels: 0,
            out_channels: 0,
            classes: net.class_count(),
        }),
        (Mode::Rm0, LayerId::Conv(_)) => Err(Error::invalid(format!(
            "rm0 targets the classifier, not {layer}"
        ))),
        (_, LayerId::Fc) => Err(Error::invalid(format!("{mode} targets conv layers, not fc"))),
        (_, LayerId::Conv(0)) => Err(Error::FirstConvExcluded(format!("{mode} at conv0"))),
        (_, LayerId::Conv(n)) => {
            let g = net.conv_geometry(n)?;
            Ok(IndexRanges {
                grid: (g.out_h, g.out_w),
                in_channels: g.in_c,
                out_channels: g.out_c,
                classes: 0,
            })
        }
    }
}

/// Number of surfaces of `mode` at `layer`.
pub fn surface_count<T: Scalar>(net: &NetworkGraph<T>, mode: Mode, layer: LayerId) -> Result<usize> {
    let r = index_ranges(net, mode, layer)?;
    Ok(mode.axes().iter().map(|&a| r.len(a)).product())
}

/// Shape of the full surface set, e.g. `[oh, ow, cin, cout]` for RM4. Each
/// element is an input-shaped tensor.
pub fn surface_set_shape<T: Scalar>(
    net: &NetworkGraph<T>,
    mode: Mode,
    layer: LayerId,
) -> Result<Vec<usize>> {
    let r = index_ranges(net, mode, layer)?;
    Ok(match mode {
        Mode::Rm4 => vec![r.grid.0, r.grid.1, r.in_channels, r.out_channels],
        Mode::Rm3 => vec![r.in_channels, r.out_channels],
        Mode::Rm2 => vec![r.grid.0, r.grid.1, r.out_channels],
        Mode::Rm1 => vec![r.out_channels],
        Mode::Rm0 => vec![r.classes],
    })
}

/// Reconstructs surfaces for one network and one trace. Cheap to copy and
/// safe to share across threads.
#[derive(Clone, Copy, Debug)]
pub struct Backmapper<'a, T> {
    lin: Linearized<'a, T>,
}

impl<'a, T: Scalar> Backmapper<'a, T> {
    pub fn new(net: &'a NetworkGraph<T>, trace: &'a ActivationTrace) -> Result<Self> {
        Ok(Backmapper {
            lin: Linearized::new(net, trace)?,
        })
    }

    pub fn net(&self) -> &'a NetworkGraph<T> {
        self.lin.net()
    }

    pub fn linearized(&self) -> &Linearized<'a, T> {
        &self.lin
    }

    fn check(&self, mode: Mode, layer: LayerId, index: &SurfaceIndex) -> Result<IndexRanges> {
        let ranges = index_ranges(self.net(), mode, layer)?;
        for &axis in mode.axes() {
            let v = index.get(axis).ok_or_else(|| {
                Error::invalid(format!("{mode} needs index {}", axis.name()))
            })?;
            let limit = ranges.len(axis);
            if v >= limit {
                return Err(Error::IndexOutOfRange {
                    what: axis.name(),
                    index: v,
                    limit,
                });
            }
        }
        Ok(ranges)
    }

    /// The cotangent whose adjoint image is the requested surface.
    pub fn cotangent(&self, mode: Mode, layer: LayerId, index: &SurfaceIndex) -> Result<Cotangent<T>> {
        let ranges = self.check(mode, layer, index)?;
        let net = self.net();
        let at = |a: Axis| index.get(a).expect("validated");
        Ok(match (mode, layer) {
            (Mode::Rm0, _) => Cotangent::new(
                Target::PreActivation(LayerId::Fc),
                Tensor::basis(&[ranges.classes], at(Axis::K)),
            ),
            (_, LayerId::Conv(n)) => {
                let geom = net.conv_geometry(n)?;
                let kernel = &net.conv(n)?.kernel;
                match mode {
                    Mode::Rm4 => {
                        let mut t = Tensor::zeros(&geom.input_shape());
                        scatter_window(&mut t, kernel, &geom, at(Axis::S), at(Axis::J), at(Axis::I));
                        Cotangent::new(Target::ConvInput(n), t)
                    }
                    Mode::Rm3 => {
                        let mut t = Tensor::zeros(&geom.input_shape());
                        for s in 0..geom.out_h * geom.out_w {
                            scatter_window(&mut t, kernel, &geom, s, at(Axis::J), at(Axis::I));
                        }
                        Cotangent::new(Target::ConvInput(n), t)
                    }
                    Mode::Rm2 => {
                        let shape = geom.output_shape();
                        let flat = at(Axis::S) * geom.out_c + at(Axis::I);
                        Cotangent::new(Target::PreActivation(layer), Tensor::basis(&shape, flat))
                    }
                    Mode::Rm1 => {
                        let i = at(Axis::I);
                        let t = Tensor::from_fn(&geom.output_shape(), |f| {
                            if f % geom.out_c == i {
                                T::one()
                            } else {
                                T::zero()
                            }
                        });
                        Cotangent::new(Target::PreActivation(layer), t)
                    }
                    Mode::Rm0 => unreachable!(),
                }
            }
            (_, LayerId::Fc) => unreachable!("rejected by index_ranges"),
        })
    }

    pub fn surface(&self, mode: Mode, layer: LayerId, index: SurfaceIndex) -> Result<Hypersurface<T>> {
        let cot = self.cotangent(mode, layer, &index)?;
        Ok(Hypersurface {
            tensor: self.lin.vjp(&cot)?,
            mode,
            layer,
            index,
            eval_k: self.lin.trace().point().k(),
        })
    }

    pub fn rm4(&self, layer: LayerId, j: usize, i: usize, s: usize) -> Result<Hypersurface<T>> {
        self.surface(Mode::Rm4, layer, SurfaceIndex::rm4(s, j, i))
    }

    pub fn rm3(&self, layer: LayerId, j: usize, i: usize) -> Result<Hypersurface<T>> {
        self.surface(Mode::Rm3, layer, SurfaceIndex::rm3(j, i))
    }

    pub fn rm2(&self, layer: LayerId, i: usize, s: usize) -> Result<Hypersurface<T>> {
        self.surface(Mode::Rm2, layer, SurfaceIndex::rm2(s, i))
    }

    pub fn rm1(&self, layer: LayerId, i: usize) -> Result<Hypersurface<T>> {
        self.surface(Mode::Rm1, layer, SurfaceIndex::rm1(i))
    }

    pub fn rm0(&self, k: usize) -> Result<Hypersurface<T>> {
        self.surface(Mode::Rm0, LayerId::Fc, SurfaceIndex::rm0(k))
    }

    /// All class surfaces in class order.
    pub fn rm0_all(&self) -> Result<Vec<Tensor<T>>> {
        (0..self.net().class_count())
            .map(|k| self.rm0(k).map(|h| h.tensor))
            .collect()
    }

    /// Value the surface is meant to reproduce for input `x`: the (partial)
    /// pre-activation of the indexed unit, computed by the live network.
    pub fn reference_value(&self, x: &Tensor<T>, mode: Mode, layer: LayerId, index: &SurfaceIndex) -> Result<f64> {
        let cot = self.cotangent(mode, layer, index)?;
        let pass = self.net().forward(x)?;
        let node = cot.target.node(self.net())?;
        Ok(crate::tensor::inner_product(pass.node(node), &cot.tensor)?.as_f64())
    }
}

/// Adds kernel slice `[:, :, j, i]` onto the taps of output window `s`,
/// channel `j` (taps falling into the padding are dropped).
fn scatter_window<T: Scalar>(
    t: &mut Tensor<T>,
    kernel: &Tensor<T>,
    geom: &ConvGeometry,
    s: usize,
    j: usize,
    i: usize,
) {
    let (oy, ox) = (s / geom.out_w, s % geom.out_w);
    let kd = kernel.data();
    let td = t.data_mut();
    for dy in 0..geom.kernel_h {
        for dx in 0..geom.kernel_w {
            if let Some((y, x)) = geom.tap(oy, ox, dy, dx) {
                let w = kd[((dy * geom.kernel_w + dx) * geom.in_c + j) * geom.out_c + i];
                td[(y * geom.in_w + x) * geom.in_c + j] += w;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{dense_jacobian, trace, EvaluationPoint};
    use crate::network::{build_vgg7, GraphBuilder, Init};
    use crate::tensor::{inner_product, ActivationKind};

    fn net() -> NetworkGraph<f64> {
        GraphBuilder::new([6, 5, 2])
            .conv(3, 3, 1)
            .relu()
            .conv(3, 4, 2)
            .activation(ActivationKind::LeakyRelu)
            .conv(2, 3, 1)
            .relu()
            .global_pool()
            .fc(4)
            .build()
            .unwrap()
            .initialized(Init::He, 21)
    }

    fn x() -> Tensor<f64> {
        Tensor::from_fn(&[6, 5, 2], |i| ((i * 13 + 5) % 19) as f64 / 9.0 - 1.0)
    }

    #[test]
    fn mode_names() {
        for m in Mode::ALL {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("rm5".parse::<Mode>().is_err());
    }

    #[test]
    fn first_conv_is_excluded() {
        let net = net();
        let t = trace(&net, &x(), EvaluationPoint::default()).unwrap();
        let b = Backmapper::new(&net, &t).unwrap();
        assert!(matches!(b.rm1(LayerId::Conv(0), 0), Err(Error::FirstConvExcluded(_))));
        assert!(b.rm1(LayerId::Fc, 0).is_err());
        assert!(matches!(
            b.rm2(LayerId::Conv(1), 0, 9),
            Err(Error::IndexOutOfRange { what: "s", .. })
        ));
        assert!(matches!(b.rm0(4), Err(Error::IndexOutOfRange { what: "k", .. })));
    }

    #[test]
    fn lattice_identities() {
        let net = net();
        let x = x();
        let t = trace(&net, &x, EvaluationPoint::default()).unwrap();
        let b = Backmapper::new(&net, &t).unwrap();
        let layer = LayerId::Conv(2);
        let r = index_ranges(&net, Mode::Rm4, layer).unwrap();
        let s_count = r.len(Axis::S);
        for i in 0..r.out_channels {
            let rm1 = b.rm1(layer, i).unwrap().tensor;
            let mut sum_rm2 = Tensor::zeros(&[6, 5, 2]);
            let mut sum_rm3 = Tensor::zeros(&[6, 5, 2]);
            for s in 0..s_count {
                let rm2 = b.rm2(layer, i, s).unwrap().tensor;
                let mut sum_j = Tensor::zeros(&[6, 5, 2]);
                for j in 0..r.in_channels {
                    sum_j.add_assign(&b.rm4(layer, j, i, s).unwrap().tensor).unwrap();
                }
                assert!(sum_j.max_abs_diff(&rm2).unwrap() < 1e-12);
                sum_rm2.add_assign(&rm2).unwrap();
            }
            for j in 0..r.in_channels {
                let rm3 = b.rm3(layer, j, i).unwrap().tensor;
                let mut sum_s = Tensor::zeros(&[6, 5, 2]);
                for s in 0..s_count {
                    sum_s.add_assign(&b.rm4(layer, j, i, s).unwrap().tensor).unwrap();
                }
                assert!(sum_s.max_abs_diff(&rm3).unwrap() < 1e-12);
                sum_rm3.add_assign(&rm3).unwrap();
            }
            assert!(sum_rm2.max_abs_diff(&rm1).unwrap() < 1e-12);
            assert!(sum_rm3.max_abs_diff(&rm1).unwrap() < 1e-12);
        }
    }

    #[test]
    fn surfaces_reproduce_units() {
        let net = net();
        let x = x();
        let t = trace(&net, &x, EvaluationPoint::default()).unwrap();
        let b = Backmapper::new(&net, &t).unwrap();
        let layer = LayerId::Conv(1);
        for (mode, index) in [
            (Mode::Rm4, SurfaceIndex::rm4(3, 2, 1)),
            (Mode::Rm3, SurfaceIndex::rm3(0, 3)),
            (Mode::Rm2, SurfaceIndex::rm2(5, 2)),
            (Mode::Rm1, SurfaceIndex::rm1(0)),
        ] {
            let h = b.surface(mode, layer, index).unwrap();
            let got = inner_product(&x, &h.tensor).unwrap();
            let want = b.reference_value(&x, mode, layer, &index).unwrap();
            assert!((got - want).abs() < 1e-12 * (1.0 + want.abs()), "{mode} {index}");
        }
        let logits = net.logits(&x).unwrap();
        for k in 0..4 {
            let h = b.rm0(k).unwrap();
            assert!((inner_product(&x, &h.tensor).unwrap() - logits.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rm0_matches_dense_oracle() {
        let net = net();
        let t = trace(&net, &x(), EvaluationPoint::default()).unwrap();
        let b = Backmapper::new(&net, &t).unwrap();
        let cols = dense_jacobian(b.linearized(), Target::PreActivation(LayerId::Fc)).unwrap();
        for k in 0..4 {
            let h = b.rm0(k).unwrap().tensor;
            for (p, col) in cols.iter().enumerate() {
                assert!((h.data()[p] - col.data()[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_kernel_slice_gives_zero_surface() {
        let mut net = net();
        if let crate::network::Layer::Conv(c) = &mut net.layers_mut()[2] {
            let cout = c.kernel.shape()[3];
            for (f, v) in c.kernel.data_mut().iter_mut().enumerate() {
                if f % cout == 1 {
                    *v = 0.0;
                }
            }
        }
        let t = trace(&net, &x(), EvaluationPoint::default()).unwrap();
        let b = Backmapper::new(&net, &t).unwrap();
        assert_eq!(b.rm4(LayerId::Conv(1), 0, 1, 4).unwrap().tensor.max_abs(), 0.0);
        assert_eq!(b.rm1(LayerId::Conv(1), 1).unwrap().tensor.max_abs(), 0.0);
    }

    #[test]
    fn vgg7_surface_counts() {
        let net = build_vgg7::<f32>();
        assert_eq!(surface_count(&net, Mode::Rm4, LayerId::Conv(2)).unwrap(), 16 * 16 * 32 * 64);
        assert_eq!(surface_count(&net, Mode::Rm3, LayerId::Conv(1)).unwrap(), 32 * 32);
        assert_eq!(surface_count(&net, Mode::Rm2, LayerId::Conv(4)).unwrap(), 8 * 8 * 96);
        assert_eq!(surface_count(&net, Mode::Rm1, LayerId::Conv(5)).unwrap(), 96);
        assert_eq!(surface_count(&net, Mode::Rm0, LayerId::Fc).unwrap(), 10);
        assert_eq!(
            surface_set_shape(&net, Mode::Rm4, LayerId::Conv(1)).unwrap(),
            [32, 32, 32, 32]
        );
    }
}
