use std::fmt;
use std::str::FromStr;

use super::{GraphBuilder, NetworkGraph, ShortcutKind};
use crate::error::{Error, Result};
use crate::tensor::{ActivationKind, Scalar};

pub const CIFAR_SHAPE: [usize; 3] = [32, 32, 3];
pub const CIFAR_CLASSES: usize = 10;

/// Residual blocks in Fixup-ResNet20 (three stages of three).
pub const FIXUP_BLOCKS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    Vgg7,
    FixupResNet20,
    Tiny,
    Custom,
}

impl Architecture {
    pub fn tag(self) -> u8 {
        match self {
            Architecture::Vgg7 => 0,
            Architecture::FixupResNet20 => 1,
            Architecture::Tiny => 2,
            Architecture::Custom => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Architecture::Vgg7,
            1 => Architecture::FixupResNet20,
            2 => Architecture::Tiny,
            3 => Architecture::Custom,
            _ => return None,
        })
    }

    /// Fresh zero-weight graph for a named architecture.
    pub fn build<T: Scalar>(self) -> Result<NetworkGraph<T>> {
        match self {
            Architecture::Vgg7 => Ok(build_vgg7()),
            Architecture::FixupResNet20 => Ok(build_fixup_resnet20()),
            Architecture::Tiny => Ok(build_tiny()),
            Architecture::Custom => Err(Error::invalid(
                "custom graphs have no canonical layout; construct them with GraphBuilder",
            )),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Vgg7 => "vgg7",
            Architecture::FixupResNet20 => "fixup_resnet20",
            Architecture::Tiny => "tiny",
            Architecture::Custom => "custom",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vgg7" => Ok(Architecture::Vgg7),
            "fixup_resnet20" | "resnet20" | "fixup" => Ok(Architecture::FixupResNet20),
            "tiny" => Ok(Architecture::Tiny),
            "custom" => Ok(Architecture::Custom),
            other => Err(Error::invalid(format!("unknown architecture {other:?}"))),
        }
    }
}

/// VGG7 without biases. Weights are zero; call `initialize` or load them.
pub fn build_vgg7<T: Scalar>() -> NetworkGraph<T> {
    GraphBuilder::new(CIFAR_SHAPE)
        .arch(Architecture::Vgg7)
        .conv(3, 32, 1)
        .relu()
        .conv(3, 32, 1)
        .relu()
        .avg_pool(3, 2)
        .conv(3, 64, 1)
        .relu()
        .conv(3, 64, 1)
        .relu()
        .avg_pool(3, 2)
        .conv(3, 96, 1)
        .relu()
        .conv(3, 96, 1)
        .relu()
        .global_pool()
        .fc(CIFAR_CLASSES)
        .activation(ActivationKind::Relu6)
        .build()
        .expect("VGG7 layout is valid")
}

/// Fixup-ResNet20 without biases. Each block is
/// `conv, relu, conv, rescale, + shortcut, relu`; the first block of the
/// second and third stage downsamples with a stride-2 conv and an
/// avg-pool+pad shortcut.
pub fn build_fixup_resnet20<T: Scalar>() -> NetworkGraph<T> {
    let mut b = GraphBuilder::new(CIFAR_SHAPE)
        .arch(Architecture::FixupResNet20)
        .conv(3, 32, 1)
        .relu();
    for block in 0..FIXUP_BLOCKS {
        let stage = block / 3;
        let width = [32, 64, 96][stage];
        let downsample = stage > 0 && block % 3 == 0;
        let stride = if downsample { 2 } else { 1 };
        b = b
            .begin_block()
            .conv(3, width, stride)
            .relu()
            .conv(3, width, 1)
            .rescale()
            .end_block(if downsample {
                ShortcutKind::AvgPoolPad
            } else {
                ShortcutKind::Identity
            })
            .relu();
    }
    b.global_pool()
        .fc(CIFAR_CLASSES)
        .relu()
        .build()
        .expect("Fixup-ResNet20 layout is valid")
}

/// Small CIFAR-shaped net for fast end-to-end runs.
pub fn build_tiny<T: Scalar>() -> NetworkGraph<T> {
    GraphBuilder::new(CIFAR_SHAPE)
        .arch(Architecture::Tiny)
        .conv(3, 8, 1)
        .relu()
        .conv(3, 8, 2)
        .relu()
        .conv(3, 16, 2)
        .relu()
        .global_pool()
        .fc(CIFAR_CLASSES)
        .activation(ActivationKind::Relu6)
        .build()
        .expect("tiny layout is valid")
}
