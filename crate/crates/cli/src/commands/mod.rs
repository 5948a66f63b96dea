mod adversarial;
mod backmap;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use backmap_core::adjoint::EvaluationPoint;
use backmap_core::backmap::{surface_count, surface_set_shape, Mode};
use backmap_core::network::{load_model, save_model, LayerId, NetworkGraph};
use backmap_core::tensor::{DType, Scalar, Tensor};
use backmap_core::trainer::cifar::{read_batch_file, TEST_FILE};
use backmap_core::trainer::{self, DatasetConfig, TrainConfig, RGB_MEANS, RGB_STDS};
use backmap_core::verify::{verify_layers, Sampling, VerifyOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::args::{
    CommonArgs, Command, DataArgs, InitArgs, ModelArgs, ShapesArgs, SynthArgs, TrainArgs, VerifyArgs,
};

/// Runs one subcommand. `Ok(false)` means a checked criterion failed.
pub fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::SynthCifar(a) => synth(&a),
        Command::Init(a) => init(&a),
        Command::Train(a) => match a.model.dtype {
            DType::F32 => train::<f32>(&a),
            DType::F64 => train::<f64>(&a),
        },
        Command::Verify(a) => match a.model.dtype {
            DType::F32 => verify::<f32>(&a),
            DType::F64 => verify::<f64>(&a),
        },
        Command::Backmap(a) => match a.model.dtype {
            DType::F32 => backmap::run::<f32>(&a),
            DType::F64 => backmap::run::<f64>(&a),
        },
        Command::Adversarial(a) => match a.model.dtype {
            DType::F32 => adversarial::run::<f32>(&a),
            DType::F64 => adversarial::run::<f64>(&a),
        },
        Command::Shapes(a) => shapes(&a),
    }
}

/// Applies `--workers` and creates the output directory.
fn prepare(common: &CommonArgs) -> Result<()> {
    if common.workers > 0 {
        // Fails harmlessly when the pool already exists (repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(common.workers)
            .build_global();
    }
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_network<T: Scalar>(m: &ModelArgs, seed: u64) -> Result<NetworkGraph<T>> {
    Ok(match &m.model {
        Some(path) => load_model(path)
            .with_context(|| format!("loading model {}", path.display()))?
            .into_precision(),
        None => m.arch.build::<T>()?.initialized(m.init.into(), seed),
    })
}

fn evaluation_point(k: f64) -> Result<EvaluationPoint> {
    EvaluationPoint::new(k).context("--z-scale")
}

/// A labelled input: test records from the dataset when one is given,
/// otherwise standard-normal tensors labelled with the model's prediction.
struct Sample<T> {
    x: Tensor<T>,
    label: usize,
}

fn samples<T: Scalar>(
    net: &NetworkGraph<T>,
    data: &DataArgs,
    count: usize,
    seed: u64,
) -> Result<Vec<Sample<T>>> {
    match &data.data {
        Some(dir) => {
            let test = read_batch_file(&dir.join(TEST_FILE))?;
            if data.index + count > test.len() {
                bail!(
                    "requested test records {}..{} but the test file has {}",
                    data.index,
                    data.index + count,
                    test.len()
                );
            }
            Ok(test[data.index..data.index + count]
                .iter()
                .map(|ex| Sample {
                    x: trainer::cifar::normalize(&ex.unit(), &RGB_MEANS, &RGB_STDS),
                    label: usize::from(ex.label),
                })
                .collect())
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7a);
            (0..count)
                .map(|_| {
                    let x = Tensor::from_fn(&net.input_shape(), |_| {
                        T::of(StandardNormal.sample(&mut rng))
                    });
                    let label = net.predict(&x)?;
                    Ok(Sample { x, label })
                })
                .collect()
        }
    }
}

/// The first test record at or after `--index` that the model classifies
/// correctly, with its record number. Without a dataset this is a random
/// input labelled with its prediction.
fn first_correct<T: Scalar>(
    net: &NetworkGraph<T>,
    data: &DataArgs,
    seed: u64,
) -> Result<(usize, Sample<T>)> {
    let Some(dir) = &data.data else {
        return Ok((data.index, samples(net, data, 1, seed)?.remove(0)));
    };
    let test = read_batch_file(&dir.join(TEST_FILE))?;
    for (n, ex) in test.iter().enumerate().skip(data.index) {
        let x = trainer::cifar::normalize(&ex.unit(), &RGB_MEANS, &RGB_STDS);
        if net.predict(&x)? == usize::from(ex.label) {
            return Ok((n, Sample { x, label: usize::from(ex.label) }));
        }
    }
    bail!("no correctly classified test record at or after index {}", data.index)
}

fn synth(a: &SynthArgs) -> Result<bool> {
    prepare(&a.common)?;
    trainer::write_synthetic_cifar10(&a.common.out, a.per_file, a.common.seed)?;
    println!(
        "wrote {} synthetic records per file to {}",
        a.per_file,
        a.common.out.display()
    );
    Ok(true)
}

fn init(a: &InitArgs) -> Result<bool> {
    prepare(&a.common)?;
    let path = a.common.out.join("model.abmp");
    match a.dtype {
        DType::F32 => save_model(&a.arch.build::<f32>()?.initialized(a.init.into(), a.common.seed), &path)?,
        DType::F64 => save_model(&a.arch.build::<f64>()?.initialized(a.init.into(), a.common.seed), &path)?,
    }
    println!("wrote {}", path.display());
    Ok(true)
}

fn train<T: Scalar>(a: &TrainArgs) -> Result<bool> {
    prepare(&a.common)?;
    let Some(dir) = &a.data else {
        bail!("no dataset: pass --data or set CIFAR10_DIR");
    };
    let mut net = load_network::<T>(&a.model, a.common.seed)?;
    let mut dc = DatasetConfig::new(dir);
    dc.seed = a.common.seed;
    dc.train_limit = a.subset;
    dc.val_limit = a.val_subset;
    let data = trainer::load_cifar10(&dc)?;
    let mut lr_schedule = vec![(0, a.lr)];
    lr_schedule.extend(a.lr_drops.iter().copied());
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr_schedule,
        l1_factor: a.l1,
        seed: a.common.seed,
        augment: !a.no_augment,
        validate_every: a.validate_every,
        ..TrainConfig::default()
    };
    let model_path = a.common.out.join("model.abmp");
    let report = trainer::train(&mut net, &data.train, &data.val, &config, Some(&model_path), |r| {
        let acc = r.val_acc.map(|v| format!(", val_acc {v:.4}")).unwrap_or_default();
        println!("epoch {}: lr {}, loss {:.6}{acc}", r.epoch, r.lr, r.train_loss);
    })?;
    save_model(&net, &model_path)?;
    write(&a.common.out.join("train_log.csv"), report.to_csv())?;
    if let (Some(acc), Some(epoch)) = (report.best_val_acc, report.best_epoch) {
        println!("best validation accuracy {acc:.4} at epoch {epoch}");
    }
    Ok(true)
}

fn verify<T: Scalar>(a: &VerifyArgs) -> Result<bool> {
    prepare(&a.common)?;
    let net = load_network::<T>(&a.model, a.common.seed)?;
    let inputs: Vec<Tensor<T>> = samples(&net, &a.input, a.inputs, a.common.seed)?
        .into_iter()
        .map(|s| s.x)
        .collect();
    let options = VerifyOptions {
        point: evaluation_point(a.z_scale)?,
        sampling: if a.sample == 0 { Sampling::All } else { Sampling::PerLayer(a.sample) },
        seed: a.common.seed,
        linearized: !a.no_linearized,
    };
    let report = verify_layers(&net, &inputs, &options)?;
    write(&a.common.out.join("verify_report.csv"), report.to_csv())?;
    write(&a.common.out.join("verify_histogram.csv"), report.histogram_csv())?;
    let worst = report.min_fraction_below(1e-2)?;
    let passed = report.passes(a.floor);
    println!(
        "{} inputs, worst layer fraction <= 1e-2: {worst:.6} (floor {}): {}",
        report.inputs,
        a.floor,
        if passed { "pass" } else { "FAIL" }
    );
    Ok(passed)
}

fn shapes(a: &ShapesArgs) -> Result<bool> {
    prepare(&a.common)?;
    let net = a.arch.build::<f32>()?;
    let input = net.input_shape();
    let mut csv = String::from("layer,mode,count,set_shape,surface_shape\n");
    let layers: Vec<LayerId> = net.conv_ids().skip(1).chain([LayerId::Fc]).collect();
    for layer in layers {
        for mode in Mode::ALL {
            let (Ok(count), Ok(shape)) =
                (surface_count(&net, mode, layer), surface_set_shape(&net, mode, layer))
            else {
                continue;
            };
            let dims = |d: &[usize]| d.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            writeln!(csv, "{layer},{mode},{count},{},{}", dims(&shape), dims(&input))?;
        }
    }
    write(&a.common.out.join(format!("{}_shapes.csv", a.arch)), &csv)?;
    print!("{csv}");
    Ok(true)
}
