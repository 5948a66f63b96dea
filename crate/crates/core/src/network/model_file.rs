//! Self-contained model file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ABMP" | version u16 | body_len u64 | body | crc32 u32
//! body = arch u8 | dtype u8 | input h,w,c u32×3 | classes u32 | layer_count u32 | layer*
//! layer = tag u8 | fields
//!   0 conv          stride u32 | kh,kw,cin,cout u32×4 | kernel values
//!   1 avg_pool      window u32 | stride u32
//!   2 global_pool
//!   3 activation    kind u8 (0 relu, 1 leaky, 2 relu6)
//!   4 fc            in u32 | out u32 | weight values
//!   5 scalar        value
//!   6 residual_add  block_start u32 | shortcut u8 (0 identity, 1 avgpool_pad)
//! ```
//!
//! Values are stored in the file's dtype. The CRC32 (ISO-HDLC) covers every
//! preceding byte.

use std::path::Path;

use super::{Architecture, ConvLayer, FcLayer, Layer, NetworkGraph, ShortcutKind};
use crate::error::{Error, Result};
use crate::tensor::{ActivationKind, DType, Scalar, Tensor};

pub const MODEL_MAGIC: [u8; 4] = *b"ABMP";
pub const MODEL_VERSION: u16 = 1;
const PREAMBLE: usize = 4 + 2 + 8;

/// A loaded network in whichever precision the file was written in.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyNetwork {
    F32(NetworkGraph<f32>),
    F64(NetworkGraph<f64>),
}

impl AnyNetwork {
    pub fn dtype(&self) -> DType {
        match self {
            AnyNetwork::F32(_) => DType::F32,
            AnyNetwork::F64(_) => DType::F64,
        }
    }

    pub fn arch(&self) -> Architecture {
        match self {
            AnyNetwork::F32(n) => n.arch(),
            AnyNetwork::F64(n) => n.arch(),
        }
    }

    /// The network in precision `T`, converting if needed.
    pub fn into_precision<T: Scalar>(self) -> NetworkGraph<T> {
        match self {
            AnyNetwork::F32(n) => n.cast(),
            AnyNetwork::F64(n) => n.cast(),
        }
    }
}

pub fn write_model<T: Scalar>(net: &NetworkGraph<T>) -> Vec<u8> {
    let mut body = Vec::new();
    body.push(net.arch().tag());
    body.push(T::DTYPE.tag());
    for d in net.input_shape() {
        put_u32(&mut body, d);
    }
    put_u32(&mut body, net.class_count());
    put_u32(&mut body, net.layers().len());
    for layer in net.layers() {
        match layer {
            Layer::Conv(c) => {
                body.push(0);
                put_u32(&mut body, c.stride);
                for &d in c.kernel.shape() {
                    put_u32(&mut body, d);
                }
                put_values(&mut body, c.kernel.data());
            }
            Layer::AvgPool { window, stride } => {
                body.push(1);
                put_u32(&mut body, *window);
                put_u32(&mut body, *stride);
            }
            Layer::GlobalPool => body.push(2),
            Layer::Activation(kind) => {
                body.push(3);
                body.push(kind.tag());
            }
            Layer::Fc(f) => {
                body.push(4);
                for &d in f.weight.shape() {
                    put_u32(&mut body, d);
                }
                put_values(&mut body, f.weight.data());
            }
            Layer::ScalarRescale { scale } => {
                body.push(5);
                scale.write_le(&mut body);
            }
            Layer::ResidualAdd {
                block_start,
                shortcut,
            } => {
                body.push(6);
                put_u32(&mut body, *block_start);
                body.push(match shortcut {
                    ShortcutKind::Identity => 0,
                    ShortcutKind::AvgPoolPad => 1,
                });
            }
        }
    }
    let mut out = Vec::with_capacity(PREAMBLE + body.len() + 4);
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_model<T: Scalar>(net: &NetworkGraph<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_model(net))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AnyNetwork> {
    read_model(&std::fs::read(path)?)
}

pub fn read_model(bytes: &[u8]) -> Result<AnyNetwork> {
    let body = crate::archive::check_envelope(bytes, MODEL_MAGIC, MODEL_VERSION)?;
    let mut r = Reader { buf: body, pos: 0 };
    let arch_tag = r.u8()?;
    let arch = Architecture::from_tag(arch_tag)
        .ok_or_else(|| Error::Malformed(format!("unknown architecture tag {arch_tag}")))?;
    let dtype_tag = r.u8()?;
    let dtype = DType::from_tag(dtype_tag)
        .ok_or_else(|| Error::Malformed(format!("unknown dtype tag {dtype_tag}")))?;
    match dtype {
        DType::F32 => parse_body::<f32>(arch, &mut r).map(AnyNetwork::F32),
        DType::F64 => parse_body::<f64>(arch, &mut r).map(AnyNetwork::F64),
    }
}

fn parse_body<T: Scalar>(arch: Architecture, r: &mut Reader<'_>) -> Result<NetworkGraph<T>> {
    let input_shape = [r.u32()?, r.u32()?, r.u32()?];
    let classes = r.u32()?;
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let tag = r.u8()?;
        let layer = match tag {
            0 => {
                let stride = r.u32()?;
                let shape = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
                let kernel = r.tensor::<T>(&shape)?;
                Layer::Conv(ConvLayer { kernel, stride })
            }
            1 => Layer::AvgPool {
                window: r.u32()?,
                stride: r.u32()?,
            },
            2 => Layer::GlobalPool,
            3 => {
                let k = r.u8()?;
                Layer::Activation(
                    ActivationKind::from_tag(k)
                        .ok_or_else(|| Error::Malformed(format!("unknown activation tag {k}")))?,
                )
            }
            4 => {
                let shape = [r.u32()?, r.u32()?];
                Layer::Fc(FcLayer {
                    weight: r.tensor::<T>(&shape)?,
                })
            }
            5 => Layer::ScalarRescale {
                scale: T::read_le(r.take(T::DTYPE.size())?),
            },
            6 => {
                let block_start = r.u32()?;
                let shortcut = match r.u8()? {
                    0 => ShortcutKind::Identity,
                    1 => ShortcutKind::AvgPoolPad,
                    other => return Err(Error::Malformed(format!("unknown shortcut tag {other}"))),
                };
                Layer::ResidualAdd {
                    block_start,
                    shortcut,
                }
            }
            other => return Err(Error::Malformed(format!("unknown layer tag {other}"))),
        };
        layers.push(layer);
    }
    if r.pos != r.buf.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after the last layer",
            r.buf.len() - r.pos
        )));
    }
    let net = NetworkGraph::from_layers(arch, input_shape, layers)
        .map_err(|e| Error::Malformed(e.to_string()))?;
    if net.class_count() != classes {
        return Err(Error::Malformed(format!(
            "header declares {classes} classes, layers produce {}",
            net.class_count()
        )));
    }
    Ok(net)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("model dimensions fit in u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_values<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    out.reserve(values.len() * T::DTYPE.size());
    for &v in values {
        v.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Malformed(format!("field of {n} bytes overruns the body")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn tensor<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Malformed(format!("bad blob shape {shape:?}")))?;
        let size = T::DTYPE.size();
        let bytes = self.take(
            n.checked_mul(size)
                .ok_or_else(|| Error::Malformed("blob too large".into()))?,
        )?;
        let data = bytes.chunks_exact(size).map(T::read_le).collect();
        Tensor::from_vec(shape, data)
    }
}
