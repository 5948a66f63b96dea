//! Desk-scale training: softmax cross-entropy on the logits, an L1 penalty
//! on convolution and FC kernels, and plain gradient descent (no momentum).

pub mod augment;
pub mod cifar;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{save_model, Gradients, Layer, NetworkGraph};
use crate::tensor::{Scalar, Tensor};

pub use augment::{augment, augment_with, AugmentParams};
pub use cifar::{
    load_cifar10, write_synthetic_cifar10, Dataset, DatasetConfig, Example, CLASS_NAMES,
    RGB_MEANS, RGB_STDS,
};

/// Examples per gradient chunk. Chunks are summed in a fixed order so the
/// result does not depend on the worker count.
const CHUNK: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `(first epoch, rate)` pairs; the first entry must start at epoch 0.
    pub lr_schedule: Vec<(usize, f64)>,
    pub l1_factor: f64,
    pub seed: u64,
    pub augment: bool,
    pub validate_every: usize,
    pub rgb_means: [f64; 3],
    pub rgb_stds: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 100,
            lr_schedule: vec![(0, 0.01)],
            l1_factor: 1e-4,
            seed: 0,
            augment: true,
            validate_every: 2,
            rgb_means: RGB_MEANS,
            rgb_stds: RGB_STDS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::invalid("batch_size and validate_every must be positive"));
        }
        if !(self.l1_factor >= 0.0 && self.l1_factor.is_finite()) {
            return Err(Error::invalid(format!("l1_factor {} is invalid", self.l1_factor)));
        }
        match self.lr_schedule.first() {
            Some((0, _)) => {}
            _ => return Err(Error::invalid("lr_schedule must start at epoch 0")),
        }
        for w in self.lr_schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::invalid("lr_schedule epochs must increase"));
            }
            if w[1].1 > w[0].1 {
                return Err(Error::invalid("lr_schedule rates must not increase"));
            }
        }
        // Zero is allowed (it freezes the weights); negative rates are not.
        if self.lr_schedule.iter().any(|&(_, r)| !(r >= 0.0 && r.is_finite())) {
            return Err(Error::invalid("learning rates must be finite and non-negative"));
        }
        Ok(())
    }

    /// Rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|(start, _)| *start <= epoch)
            .last()
            .map_or(0.0, |&(_, r)| r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss (cross-entropy plus penalty) over the epoch.
    pub train_loss: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    pub best_val_acc: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    /// CSV with columns `epoch,lr,train_loss,val_acc` (blank when not
    /// validated that epoch).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_acc\n");
        for r in &self.log {
            let acc = r.val_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{:.8},{}", r.epoch, r.lr, r.train_loss, acc);
        }
        out
    }
}

/// Numerically stable softmax cross-entropy. Returns the loss and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, label: usize) -> (f64, Tensor<T>) {
    let z: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let loss = total.ln() + max - z[label];
    let grad = Tensor::from_fn(logits.shape(), |n| {
        T::of(exp[n] / total - if n == label { 1.0 } else { 0.0 })
    });
    (loss, grad)
}

/// `l1 · Σ|w|` over convolution and FC kernels (rescale scalars excluded).
pub fn l1_penalty<T: Scalar>(net: &NetworkGraph<T>, l1: f64) -> f64 {
    let sum: f64 = net
        .layers()
        .iter()
        .map(|l| match l {
            Layer::Conv(c) => c.kernel.data().iter().map(|v| v.as_f64().abs()).sum(),
            Layer::Fc(f) => f.weight.data().iter().map(|v| v.as_f64().abs()).sum(),
            _ => 0.0,
        })
        .sum();
    l1 * sum
}

/// Adds the L1 subgradient `l1 · sign(w)` (0 at `w == 0`) to `grads`.
pub fn add_l1_subgradient<T: Scalar>(net: &NetworkGraph<T>, l1: f64, grads: &mut Gradients<T>) {
    let l1 = T::of(l1);
    for (layer, slot) in net.layers().iter().zip(grads.layers.iter_mut()) {
        let (w, g) = match (layer, slot) {
            (Layer::Conv(c), Some(crate::network::ParamGrad::Kernel(g))) => (&c.kernel, g),
            (Layer::Fc(f), Some(crate::network::ParamGrad::Weight(g))) => (&f.weight, g),
            _ => continue,
        };
        for (gv, wv) in g.data_mut().iter_mut().zip(w.data()) {
            if *wv > T::zero() {
                *gv += l1;
            } else if *wv < T::zero() {
                *gv -= l1;
            }
        }
    }
}

/// Mean cross-entropy over `batch` plus the L1 penalty, and its gradient.
pub fn batch_loss_and_gradients<T: Scalar>(
    net: &NetworkGraph<T>,
    batch: &[(Tensor<T>, usize)],
    l1: f64,
) -> Result<(f64, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let inv = T::of(1.0 / batch.len() as f64);
    let partials: Vec<(f64, Gradients<T>)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<(f64, Gradients<T>)> {
            let mut grads = Gradients::zeros_like(net);
            let mut loss = 0.0;
            for (x, label) in chunk {
                let pass = net.forward(x)?;
                let (l, mut seed) = softmax_cross_entropy(pass.logits(), *label);
                seed.scale_in_place(inv);
                loss += l;
                net.accumulate_param_gradients(&pass, net.logits_node(), seed, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    add_l1_subgradient(net, l1, &mut grads);
    Ok((loss / batch.len() as f64 + l1_penalty(net, l1), grads))
}

/// `w ← w − lr · g` for every learnable value.
pub fn apply_step<T: Scalar>(net: &mut NetworkGraph<T>, grads: &Gradients<T>, lr: f64) {
    let lr = T::of(lr);
    for (w, g) in net.parameters_mut().zip(grads.values()) {
        *w -= lr * g;
    }
}

/// Top-1 accuracy of the logits argmax.
pub fn accuracy<T: Scalar>(
    net: &NetworkGraph<T>,
    examples: &[Example],
    means: &[f64; 3],
    stds: &[f64; 3],
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let correct = examples
        .par_iter()
        .map(|ex| {
            let x = cifar::normalize::<T>(&ex.unit(), means, stds);
            Ok(usize::from(net.predict(&x)? == usize::from(ex.label)))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / examples.len() as f64)
}

/// Trains `net` in place. Validation runs every `validate_every` epochs and
/// after the last one; each improvement is checkpointed to `checkpoint` (if
/// given). On return `net` holds the best validated weights, or the final
/// weights when `val` is empty.
pub fn train<T: Scalar>(
    net: &mut NetworkGraph<T>,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();
    let mut best: Option<NetworkGraph<T>> = None;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(Tensor<T>, usize)> = idx
                .iter()
                .map(|&n| {
                    let ex = &train_set[n];
                    let mut img = ex.unit();
                    if config.augment {
                        img = augment(&img, &mut rng);
                    }
                    let x = cifar::normalize(&img, &config.rgb_means, &config.rgb_stds);
                    (x, usize::from(ex.label))
                })
                .collect();
            let (loss, grads) = batch_loss_and_gradients(net, &batch, config.l1_factor)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    step,
                    value: loss,
                });
            }
            if !grads.is_finite() {
                return Err(Error::NonFiniteGradient("training step"));
            }
            apply_step(net, &grads, lr);
            loss_sum += loss;
            steps += 1;
        }
        let last = epoch + 1 == config.epochs;
        let val_acc = if !val_set.is_empty() && ((epoch + 1) % config.validate_every == 0 || last)
        {
            Some(accuracy(net, val_set, &config.rgb_means, &config.rgb_stds)?)
        } else {
            None
        };
        if let Some(acc) = val_acc {
            if report.best_val_acc.is_none_or(|b| acc > b) {
                report.best_val_acc = Some(acc);
                report.best_epoch = Some(epoch + 1);
                if let Some(path) = checkpoint {
                    save_model(net, path)?;
                }
                best = Some(net.clone());
            }
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / steps as f64,
            val_acc,
        };
        on_epoch(&record);
        report.log.push(record);
    }
    if let Some(b) = best {
        *net = b;
    }
    Ok(report)
}
