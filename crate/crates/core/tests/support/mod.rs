//! Fixtures shared by the core integration tests and the CLI acceptance
//! suite (included there through `#[path]`).
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use backmap_core::adjoint::{dense_jacobian, trace, EvaluationPoint, Linearized, Target};
use backmap_core::backmap::{index_ranges, Axis, Backmapper, Hypersurface, Mode, SurfaceIndex};
use backmap_core::network::{GraphBuilder, Init, LayerId, NetworkGraph, ShortcutKind};
use backmap_core::render::{class_grid, difference_image, encode_png, tile_channels, tile_strides};
use backmap_core::tensor::{ActivationKind, Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const GOLDEN_SHAPE: [usize; 3] = [16, 16, 3];

/// Integer weights and inputs keep every intermediate value exactly
/// representable in binary32, so renders do not depend on summation order.
pub fn golden_net() -> NetworkGraph<f32> {
    let mut net = GraphBuilder::new(GOLDEN_SHAPE)
        .conv(3, 4, 1)
        .relu()
        .conv(3, 4, 2)
        .relu()
        .global_pool()
        .fc(10)
        .build()
        .expect("golden layout is valid");
    for (n, w) in net.parameters_mut().enumerate() {
        *w = ((n * 37 + 11) % 9) as f32 - 4.0;
    }
    net
}

pub fn golden_input(shift: usize) -> Tensor<f32> {
    Tensor::from_fn(&GOLDEN_SHAPE, |n| ((n * 13 + shift * 5) % 7) as f32 - 3.0)
}

/// Committed goldens, located from the manifest of whichever crate includes
/// this module.
pub fn golden_dir() -> PathBuf {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let core = if manifest.ends_with("core") { manifest.to_path_buf() } else { manifest.join("../core") };
    core.join("tests").join("golden")
}

fn all_surfaces(b: &Backmapper<'_, f32>, mode: Mode, layer: LayerId, fixed: SurfaceIndex) -> Vec<Hypersurface<f32>> {
    let net = b.net();
    let r = index_ranges(net, mode, layer).expect("valid mode");
    let free: Vec<Axis> = mode
        .axes()
        .iter()
        .copied()
        .filter(|&a| fixed.get(a).is_none())
        .collect();
    let total: usize = free.iter().map(|&a| r.len(a)).product();
    (0..total)
        .map(|mut ordinal| {
            let mut index = fixed;
            for &a in free.iter().rev() {
                index.set(a, ordinal % r.len(a));
                ordinal /= r.len(a);
            }
            b.surface(mode, layer, index).expect("surface")
        })
        .collect()
}

/// The four golden renders as `(file name, png bytes)`.
pub fn golden_renders() -> Vec<(&'static str, Vec<u8>)> {
    let net = golden_net();
    let x = golden_input(0);
    let point = EvaluationPoint::default();
    let tr = trace(&net, &x, point).expect("trace");
    let b = Backmapper::new(&net, &tr).expect("mapper");
    let layer = LayerId::Conv(1);
    let r = index_ranges(&net, Mode::Rm4, layer).expect("ranges");

    let mut fixed = SurfaceIndex::default();
    fixed.set(Axis::J, 1);
    fixed.set(Axis::I, 2);
    let rm4 = tile_strides(&all_surfaces(&b, Mode::Rm4, layer, fixed), r.grid).expect("rm4 sheet");
    let rm3 = tile_channels(
        &all_surfaces(&b, Mode::Rm3, layer, SurfaceIndex::default()),
        r.in_channels,
        r.out_channels,
    )
    .expect("rm3 sheet");
    let rm0 = class_grid(&all_surfaces(&b, Mode::Rm0, LayerId::Fc, SurfaceIndex::default()), 10)
        .expect("rm0 grid");

    let shifted = golden_input(3);
    let tr2 = trace(&net, &shifted, point).expect("trace");
    let b2 = Backmapper::new(&net, &tr2).expect("mapper");
    let clean = b.rm3(layer, 1, 2).expect("rm3");
    let moved = b2.rm3(layer, 1, 2).expect("rm3");
    let diff = difference_image(&clean.tensor, &moved.tensor).expect("difference");

    [("rm4_sheet.png", rm4), ("rm3_sheet.png", rm3), ("rm0_grid.png", rm0), ("rm3_difference.png", diff)]
        .into_iter()
        .map(|(name, img)| (name, encode_png(&img).expect("png")))
        .collect()
}

/// Compares the renders with the committed goldens; with `UPDATE_GOLDENS=1`
/// rewrites them instead. Returns the names that differ.
pub fn check_goldens() -> std::io::Result<Vec<String>> {
    let dir = golden_dir();
    let update = std::env::var_os("UPDATE_GOLDENS").is_some_and(|v| v == "1");
    let mut mismatched = Vec::new();
    for (name, bytes) in golden_renders() {
        let path = dir.join(name);
        if update {
            std::fs::create_dir_all(&dir)?;
            std::fs::write(&path, &bytes)?;
        } else if std::fs::read(&path)? != bytes {
            mismatched.push(name.to_string());
        }
    }
    Ok(mismatched)
}

/// 8×8×1 input, 318 parameters, one identity residual block with a rescale
/// and one average pool.
pub fn oracle_net() -> NetworkGraph<f64> {
    GraphBuilder::new([8, 8, 1])
        .conv(3, 3, 1)
        .relu()
        .begin_block()
        .conv(3, 3, 1)
        .activation(ActivationKind::LeakyRelu)
        .conv(3, 3, 1)
        .rescale()
        .end_block(ShortcutKind::Identity)
        .relu()
        .avg_pool(2, 2)
        .conv(3, 4, 1)
        .relu()
        .global_pool()
        .fc(5)
        .build()
        .expect("oracle layout is valid")
        .initialized(Init::He, 17)
}

pub fn normal_input<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(StandardNormal.sample(rng)))
}

/// Every surface of every mode compared with `Jᵀ·c`, where `J` is assembled
/// column by column and the cotangent `c` is built here from the layer
/// definition. Returns the largest absolute deviation.
pub fn dense_oracle_deviation(net: &NetworkGraph<f64>, x: &Tensor<f64>) -> f64 {
    let tr = trace(net, x, EvaluationPoint::default()).expect("trace");
    let lin = Linearized::new(net, &tr).expect("linearized");
    let b = Backmapper::new(net, &tr).expect("mapper");
    let mut worst = 0.0f64;
    let mut compare = |h: &Tensor<f64>, columns: &[Tensor<f64>], cot: &[f64]| {
        for (n, col) in columns.iter().enumerate() {
            let want: f64 = col.data().iter().zip(cot).map(|(a, b)| a * b).sum();
            worst = worst.max((h.data()[n] - want).abs());
        }
    };

    let logits = dense_jacobian(&lin, Target::PreActivation(LayerId::Fc)).expect("jacobian");
    for k in 0..net.class_count() {
        let mut cot = vec![0.0; net.class_count()];
        cot[k] = 1.0;
        compare(&b.rm0(k).expect("rm0").tensor, &logits, &cot);
    }

    for n in 1..net.conv_count() {
        let layer = LayerId::Conv(n);
        let g = net.conv_geometry(n).expect("geometry");
        let kernel = &net.conv(n).expect("conv").kernel;
        let pre = dense_jacobian(&lin, Target::PreActivation(layer)).expect("jacobian");
        let input = dense_jacobian(&lin, Target::ConvInput(n)).expect("jacobian");
        let out_len = g.out_h * g.out_w * g.out_c;
        let in_len = g.in_h * g.in_w * g.in_c;
        // Kernel slice (j, i) laid over the receptive field of output cell s.
        let window = |s: usize, j: usize, i: usize, cot: &mut [f64]| {
            let (oy, ox) = (s / g.out_w, s % g.out_w);
            for dy in 0..g.kernel_h {
                for dx in 0..g.kernel_w {
                    let y = (oy * g.stride + dy) as isize - g.pad_top as isize;
                    let xx = (ox * g.stride + dx) as isize - g.pad_left as isize;
                    if y < 0 || xx < 0 || y >= g.in_h as isize || xx >= g.in_w as isize {
                        continue;
                    }
                    let w = kernel.data()[((dy * g.kernel_w + dx) * g.in_c + j) * g.out_c + i];
                    cot[(y as usize * g.in_w + xx as usize) * g.in_c + j] += w;
                }
            }
        };
        let cells = g.out_h * g.out_w;
        for i in 0..g.out_c {
            let rm1: Vec<f64> = (0..out_len).map(|f| f64::from(u8::from(f % g.out_c == i))).collect();
            compare(&b.rm1(layer, i).expect("rm1").tensor, &pre, &rm1);
            for s in 0..cells {
                let mut rm2 = vec![0.0; out_len];
                rm2[s * g.out_c + i] = 1.0;
                compare(&b.rm2(layer, i, s).expect("rm2").tensor, &pre, &rm2);
            }
            for j in 0..g.in_c {
                let mut rm3 = vec![0.0; in_len];
                for s in 0..cells {
                    let mut rm4 = vec![0.0; in_len];
                    window(s, j, i, &mut rm4);
                    compare(&b.rm4(layer, j, i, s).expect("rm4").tensor, &input, &rm4);
                    window(s, j, i, &mut rm3);
                }
                compare(&b.rm3(layer, j, i).expect("rm3").tensor, &input, &rm3);
            }
        }
    }
    worst
}

/// A random bias-free ReLU/LeakyReLU net with a small input and 1–3 stages,
/// optionally with a residual block or an average pool.
pub fn random_tiny_net(rng: &mut ChaCha8Rng) -> NetworkGraph<f64> {
    loop {
        let shape = [rng.random_range(4..=9), rng.random_range(4..=9), rng.random_range(1..=3)];
        let act = |rng: &mut ChaCha8Rng| {
            if rng.random_bool(0.5) {
                ActivationKind::Relu
            } else {
                ActivationKind::LeakyRelu
            }
        };
        let mut b = GraphBuilder::new(shape)
            .conv(rng.random_range(1..=3), rng.random_range(1..=4), 1)
            .activation(act(rng));
        for _ in 0..rng.random_range(1..=3) {
            match rng.random_range(0..4) {
                0 => {
                    let width = rng.random_range(1..=4);
                    b = b
                        .begin_block()
                        .conv(3, width, 2)
                        .activation(act(rng))
                        .conv(rng.random_range(1..=3), width, 1)
                        .rescale()
                        .end_block(ShortcutKind::AvgPoolPad)
                        .activation(act(rng));
                }
                1 => b = b.avg_pool(rng.random_range(1..=3), rng.random_range(1..=2)),
                _ => {
                    b = b
                        .conv(rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=2))
                        .activation(act(rng));
                }
            }
        }
        let built = b.global_pool().fc(rng.random_range(2..=5)).build();
        if let Ok(net) = built {
            let seed = rng.random();
            return net.initialized(Init::He, seed);
        }
    }
}
