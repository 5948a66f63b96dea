//! Iterative sign-gradient attacks on the live network and the perturbation
//! sets built from them: a targeted set with one entry per class, scaled
//! copies of those entries that still fool the model, and Gaussian noise with
//! matched pixel statistics that does not.
//!
//! Gradients come from ordinary backpropagation of the softmax cross-entropy
//! on the logits, so attacks see the actual model rather than a frozen trace.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::{Archive, ArchiveLayout, ArchiveWriter, RecordMeta, NO_TAG};
use crate::error::{Error, Result};
use crate::network::NetworkGraph;
use crate::tensor::{Scalar, Tensor};
use crate::trainer::softmax_cross_entropy;

pub const PERTURBATION_MAGIC: [u8; 4] = *b"ABMA";
pub const DEFAULT_EPSILON: f64 = 0.04;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackMode {
    Untargeted,
    TargetedLeastLikely,
}

impl std::str::FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "untargeted" | "untargeted_iterative" => Ok(AttackMode::Untargeted),
            "targeted" | "targeted_least_likely" => Ok(AttackMode::TargetedLeastLikely),
            other => Err(Error::invalid(format!("unknown attack mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialConfig {
    pub mode: AttackMode,
    /// Per-step magnitude in normalized input units.
    pub epsilon: f64,
    pub steps: usize,
    /// Target class for the targeted mode; `None` picks the least likely
    /// class of the clean input.
    pub target: Option<usize>,
    pub seed: u64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            mode: AttackMode::Untargeted,
            epsilon: DEFAULT_EPSILON,
            steps: 10,
            target: None,
            seed: 0,
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be finite and non-negative, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Why an attack returned without attempting anything.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Degenerate {
    /// The clean input is already misclassified.
    AlreadyMisclassified,
    /// The clean input is already classified as the target.
    TargetIsCurrent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome<T> {
    pub perturbation: Tensor<T>,
    pub success: bool,
    pub steps_taken: usize,
    /// Prediction on `x + perturbation`.
    pub prediction: usize,
    pub degenerate: Option<Degenerate>,
}

/// Class with the smallest logit.
pub fn least_likely_class<T: Scalar>(net: &NetworkGraph<T>, x: &Tensor<T>) -> Result<usize> {
    let logits = net.logits(x)?;
    let mut best = 0;
    for (k, v) in logits.data().iter().enumerate() {
        if *v < logits.data()[best] {
            best = k;
        }
    }
    Ok(best)
}

/// Sign of the cross-entropy gradient with respect to the input.
fn loss_gradient_sign<T: Scalar>(net: &NetworkGraph<T>, x: &Tensor<T>, class: usize) -> Result<Tensor<T>> {
    let pass = net.forward(x)?;
    let (_, seed) = softmax_cross_entropy(pass.logits(), class);
    let grad = net.input_gradient(&pass, net.logits_node(), seed)?;
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient("attack"));
    }
    Ok(grad.map(|g| {
        if g > T::zero() {
            T::one()
        } else if g < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }))
}

/// Runs sign-gradient steps of size `epsilon` on `x + δ` until `done` holds
/// for the prediction. `direction` is +1 to ascend the loss of `class` and −1
/// to descend it.
fn iterate<T: Scalar>(
    net: &NetworkGraph<T>,
    x: &Tensor<T>,
    class: usize,
    direction: f64,
    config: &AdversarialConfig,
    done: impl Fn(usize) -> bool,
) -> Result<AttackOutcome<T>> {
    let step = T::of(direction * config.epsilon);
    let mut delta = Tensor::zeros(x.shape());
    let mut prediction = net.predict(x)?;
    let mut steps_taken = 0;
    while steps_taken < config.steps && !done(prediction) {
        let current = x.add(&delta)?;
        let sign = loss_gradient_sign(net, &current, class)?;
        for (d, s) in delta.data_mut().iter_mut().zip(sign.data()) {
            *d += step * *s;
        }
        steps_taken += 1;
        prediction = net.predict(&x.add(&delta)?)?;
    }
    Ok(AttackOutcome {
        perturbation: delta,
        success: done(prediction),
        steps_taken,
        prediction,
        degenerate: None,
    })
}

/// Basic iterative method: ascend the loss of `label` until the prediction
/// leaves `label` or the steps run out. A clean input that is already
/// misclassified yields a zero perturbation flagged as degenerate.
pub fn untargeted_attack<T: Scalar>(
    net: &NetworkGraph<T>,
    x: &Tensor<T>,
    label: usize,
    config: &AdversarialConfig,
) -> Result<AttackOutcome<T>> {
    config.validate()?;
    let prediction = net.predict(x)?;
    if prediction != label {
        return Ok(AttackOutcome {
            perturbation: Tensor::zeros(x.shape()),
            success: false,
            steps_taken: 0,
            prediction,
            degenerate: Some(Degenerate::AlreadyMisclassified),
        });
    }
    iterate(net, x, label, 1.0, config, |p| p != label)
}

/// Iterative targeted method: descend the loss of `target` until the
/// prediction becomes `target`.
pub fn targeted_attack<T: Scalar>(
    net: &NetworkGraph<T>,
    x: &Tensor<T>,
    target: usize,
    config: &AdversarialConfig,
) -> Result<AttackOutcome<T>> {
    config.validate()?;
    if target >= net.class_count() {
        return Err(Error::IndexOutOfRange {
            what: "target class",
            index: target,
            limit: net.class_count(),
        });
    }
    let prediction = net.predict(x)?;
    if prediction == target {
        return Ok(AttackOutcome {
            perturbation: Tensor::zeros(x.shape()),
            success: true,
            steps_taken: 0,
            prediction,
            degenerate: Some(Degenerate::TargetIsCurrent),
        });
    }
    iterate(net, x, target, -1.0, config, |p| p == target)
}

/// Targeted attack toward the least likely class of the clean input.
pub fn targeted_least_likely<T: Scalar>(
    net: &NetworkGraph<T>,
    x: &Tensor<T>,
    config: &AdversarialConfig,
) -> Result<AttackOutcome<T>> {
    let target = match config.target {
        Some(t) => t,
        None => least_likely_class(net, x)?,
    };
    targeted_attack(net, x, target, config)
}

/// Dispatches on `config.mode`.
pub fn attack<T: Scalar>(
    net: &NetworkGraph<T>,
    x: &Tensor<T>,
    label: usize,
    config: &AdversarialConfig,
) -> Result<AttackOutcome<T>> {
    match config.mode {
        AttackMode::Untargeted => untargeted_attack(net, x, label, config),
        AttackMode::TargetedLeastLikely => targeted_least_likely(net, x, config),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// One targeted perturbation per class (zero for the true class).
    Targeted,
    /// A scaled targeted perturbation that still fools the model.
    Scaled,
    /// Gaussian noise that does not fool the model.
    Gaussian,
    /// Single untargeted perturbation.
    Untargeted,
}

impl Provenance {
    pub fn tag(self) -> u32 {
        match self {
            Provenance::Targeted => 0,
            Provenance::Scaled => 1,
            Provenance::Gaussian => 2,
            Provenance::Untargeted => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Some(match tag {
            0 => Provenance::Targeted,
            1 => Provenance::Scaled,
            2 => Provenance::Gaussian,
            3 => Provenance::Untargeted,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Provenance::Targeted => "targeted",
            Provenance::Scaled => "scaled",
            Provenance::Gaussian => "gaussian",
            Provenance::Untargeted => "untargeted",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation<T> {
    pub tensor: Tensor<T>,
    pub provenance: Provenance,
    pub target: Option<usize>,
    /// Prediction on the clean input plus this perturbation.
    pub achieved: usize,
    pub l2: f64,
    pub beta: Option<f64>,
}

impl<T: Scalar> Perturbation<T> {
    pub fn new(
        tensor: Tensor<T>,
        provenance: Provenance,
        target: Option<usize>,
        achieved: usize,
        beta: Option<f64>,
    ) -> Self {
        let l2 = tensor.l2_norm();
        Perturbation {
            tensor,
            provenance,
            target,
            achieved,
            l2,
            beta,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PerturbationSet<T> {
    pub entries: Vec<Perturbation<T>>,
}

impl<T: Scalar> PerturbationSet<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Archive with tags `[provenance, target, achieved]` and values
    /// `[l2, beta]` (beta NaN when absent).
    pub fn write_archive<W: std::io::Write>(&self, w: W, shape: &[usize]) -> Result<W> {
        let layout = ArchiveLayout {
            magic: PERTURBATION_MAGIC,
            dtype: T::DTYPE,
            tag_count: 3,
            value_count: 2,
            header: Vec::new(),
            element_shape: shape.to_vec(),
        };
        let mut writer = ArchiveWriter::new(w, layout)?;
        for p in &self.entries {
            writer.push(
                &p.tensor,
                RecordMeta {
                    tags: vec![
                        p.provenance.tag(),
                        p.target.map_or(NO_TAG, |t| t as u32),
                        p.achieved as u32,
                    ],
                    values: vec![p.l2, p.beta.unwrap_or(f64::NAN)],
                },
            )?;
        }
        writer.finish()
    }

    pub fn save(&self, path: impl AsRef<Path>, shape: &[usize]) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut file = self.write_archive(file, shape)?;
        std::io::Write::flush(&mut file)?;
        Ok(())
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let entries = (0..archive.len())
            .map(|r| {
                let meta = archive.meta(r);
                if meta.tags.len() != 3 || meta.values.len() != 2 {
                    return Err(Error::Malformed("perturbation record layout".into()));
                }
                let provenance = Provenance::from_tag(meta.tags[0])
                    .ok_or_else(|| Error::Malformed(format!("provenance tag {}", meta.tags[0])))?;
                Ok(Perturbation {
                    tensor: archive.tensor(r)?,
                    provenance,
                    target: (meta.tags[1] != NO_TAG).then_some(meta.tags[1] as usize),
                    achieved: meta.tags[2] as usize,
                    l2: meta.values[0],
                    beta: (!meta.values[1].is_nan()).then_some(meta.values[1]),
                })
            })
            .collect::<Result<_>>()?;
        Ok(PerturbationSet { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::open(path, PERTURBATION_MAGIC)?)
    }

    /// Manifest with columns `index,provenance,target,achieved,l2,beta`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,provenance,target,achieved,l2,beta\n");
        for (n, p) in self.entries.iter().enumerate() {
            let target = p.target.map(|t| t.to_string()).unwrap_or_default();
            let beta = p.beta.map(|b| format!("{b:.2}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{n},{},{target},{},{:.9},{beta}",
                p.provenance.name(),
                p.achieved,
                p.l2
            );
        }
        out
    }
}

/// One targeted perturbation toward every class; the entry for `label` is
/// the zero tensor.
pub fn build_targeted_set<T: Scalar>(
    net: &NetworkGraph<T>,
    x: &Tensor<T>,
    label: usize,
    config: &AdversarialConfig,
) -> Result<PerturbationSet<T>> {
    let entries = (0..net.class_count())
        .map(|k| {
            if k == label {
                let achieved = net.predict(x)?;
                return Ok(Perturbation::new(Tensor::zeros(x.shape()), Provenance::Targeted, Some(k), achieved, None));
            }
            let out = targeted_attack(net, x, k, config)?;
            Ok(Perturbation::new(out.perturbation, Provenance::Targeted, Some(k), out.prediction, None))
        })
        .collect::<Result<_>>()?;
    Ok(PerturbationSet { entries })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaledSetConfig {
    /// Required logit margin of the wrong class over the true class.
    pub threshold: f64,
    pub beta_step: f64,
    pub keep: usize,
    pub gaussian_count: usize,
    pub retry_cap: usize,
    pub seed: u64,
}

impl Default for ScaledSetConfig {
    fn default() -> Self {
        ScaledSetConfig {
            threshold: 0.5,
            beta_step: 0.05,
            keep: 50,
            gaussian_count: 50,
            retry_cap: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaledSetOutcome<T> {
    /// Kept scaled entries followed by Gaussian entries.
    pub set: PerturbationSet<T>,
    /// Qualified scaled candidates before truncation to `keep`.
    pub qualified: usize,
    pub gaussian_mean: f64,
    pub gaussian_variance: f64,
    /// Gaussian slots abandoned after `retry_cap` draws that all fooled the
    /// model.
    pub gaussian_shortfall: usize,
}

/// Scales each nonzero targeted perturbation by β = 1, 1 − step, …, keeping
/// every β·adv for which the model still misclassifies and the predicted
/// logit beats the true-class logit by more than `threshold`; the scan of an
/// entry stops at its first failing β. Qualified candidates are shuffled and
/// truncated to `keep`. Gaussian noise uses the pixel mean and variance of
/// the nonzero targeted perturbations and is redrawn whenever it fools the
/// model.
pub fn build_scaled_set<T: Scalar>(
    net: &NetworkGraph<T>,
    x: &Tensor<T>,
    label: usize,
    targeted: &PerturbationSet<T>,
    config: &ScaledSetConfig,
) -> Result<ScaledSetOutcome<T>> {
    if !(config.beta_step > 0.0 && config.beta_step <= 1.0) {
        return Err(Error::invalid(format!("beta_step must lie in (0, 1], got {}", config.beta_step)));
    }
    let sources: Vec<&Perturbation<T>> = targeted
        .entries
        .iter()
        .filter(|p| p.tensor.data().iter().any(|v| *v != T::zero()))
        .collect();
    let beta_count = (1.0 / config.beta_step).round() as usize;
    let mut qualified = Vec::new();
    for p in &sources {
        for n in 0..beta_count {
            let beta = 1.0 - n as f64 * config.beta_step;
            if beta <= 0.0 {
                break;
            }
            let scaled = p.tensor.scale(T::of(beta));
            let logits = net.logits(&x.add(&scaled)?)?;
            let predicted = logits.argmax();
            let margin = logits.data()[predicted].as_f64() - logits.data()[label].as_f64();
            if predicted == label || margin <= config.threshold {
                break;
            }
            // Round so the recorded β matches its decimal label exactly.
            let beta = (beta * 100.0).round() / 100.0;
            qualified.push(Perturbation::new(scaled, Provenance::Scaled, p.target, predicted, Some(beta)));
        }
    }
    let qualified_count = qualified.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    qualified.shuffle(&mut rng);
    qualified.truncate(config.keep);

    let pixels: Vec<f64> = sources
        .iter()
        .flat_map(|p| p.tensor.data().iter().map(|v| v.as_f64()))
        .collect();
    let (mean, variance) = if pixels.is_empty() {
        (0.0, 0.0)
    } else {
        let n = pixels.len() as f64;
        let mean = pixels.iter().sum::<f64>() / n;
        (mean, pixels.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
    };
    let normal = Normal::new(mean, variance.sqrt())
        .map_err(|e| Error::invalid(format!("gaussian parameters: {e}")))?;
    let mut entries = qualified;
    let mut shortfall = 0;
    for _ in 0..config.gaussian_count {
        let mut accepted = None;
        for _ in 0..config.retry_cap {
            let g = Tensor::from_fn(x.shape(), |_| T::of(normal.sample(&mut rng)));
            let predicted = net.predict(&x.add(&g)?)?;
            if predicted == label {
                accepted = Some(Perturbation::new(g, Provenance::Gaussian, None, predicted, None));
                break;
            }
        }
        match accepted {
            Some(p) => entries.push(p),
            None => shortfall += 1,
        }
    }
    Ok(ScaledSetOutcome {
        set: PerturbationSet { entries },
        qualified: qualified_count,
        gaussian_mean: mean,
        gaussian_variance: variance,
        gaussian_shortfall: shortfall,
    })
}
