//! Relative-error verification of reconstructed surfaces against the live
//! network, and the stale-versus-fresh hyperplane comparison.

use std::fmt::{self, Write as _};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adjoint::{trace, EvaluationPoint, Linearized, Target};
use crate::backmap::{index_ranges, Backmapper, Mode, SurfaceIndex};
use crate::error::{Error, Result};
use crate::network::{LayerId, NetworkGraph};
use crate::tensor::{inner_product_wide, Scalar, Tensor};

/// Denominator used in place of an exact zero: the smallest positive normal
/// binary32 value.
pub const ZERO_SUBSTITUTE: f64 = f32::MIN_POSITIVE as f64;

/// Decade exponents of the histogram edges: bins are `0`, `(0, 1e-16]`,
/// `(1e-16, 1e-15]`, …, `(1e0, 1e1]`, `> 1e1`.
const FIRST_DECADE: i32 = -16;
const LAST_DECADE: i32 = 1;
const BIN_COUNT: usize = (LAST_DECADE - FIRST_DECADE + 1) as usize + 2;

/// `|p − f| / f'` with `f' = f`, or [`ZERO_SUBSTITUTE`] where `f == 0`.
pub fn relative_error(predicted: f64, actual: f64) -> f64 {
    let denom = if actual == 0.0 { ZERO_SUBSTITUTE } else { actual };
    ((predicted - actual) / denom).abs()
}

pub fn relative_errors<T: Scalar>(predicted: &Tensor<T>, actual: &Tensor<T>) -> Result<Tensor<f64>> {
    predicted.expect_same_shape("relative_errors", actual)?;
    Ok(Tensor::from_vec(
        predicted.shape(),
        predicted
            .data()
            .iter()
            .zip(actual.data())
            .map(|(p, f)| relative_error(p.as_f64(), f.as_f64()))
            .collect(),
    )
    .expect("same length"))
}

fn decade_edge(e: i32) -> f64 {
    format!("1e{e}").parse().expect("valid literal")
}

/// Decade histogram of relative errors.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorHistogram {
    bins: [u64; BIN_COUNT],
    max: f64,
}

impl Default for ErrorHistogram {
    fn default() -> Self {
        ErrorHistogram {
            bins: [0; BIN_COUNT],
            max: 0.0,
        }
    }
}

impl ErrorHistogram {
    fn bin_of(e: f64) -> usize {
        if e == 0.0 {
            return 0;
        }
        for (b, d) in (FIRST_DECADE..=LAST_DECADE).enumerate() {
            if e <= decade_edge(d) {
                return b + 1;
            }
        }
        BIN_COUNT - 1
    }

    pub fn add(&mut self, e: f64) {
        // NaN lands in the overflow bin and poisons `max`.
        let bin = if e.is_nan() { BIN_COUNT - 1 } else { Self::bin_of(e) };
        self.bins[bin] += 1;
        if !(e <= self.max) {
            self.max = e;
        }
    }

    pub fn extend(&mut self, errors: impl IntoIterator<Item = f64>) {
        errors.into_iter().for_each(|e| self.add(e));
    }

    pub fn merge(&mut self, other: &ErrorHistogram) {
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
        if !(other.max <= self.max) {
            self.max = other.max;
        }
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    /// Bin counts with their upper edges (`0` for the exact-zero bin,
    /// `inf` for the overflow bin).
    pub fn bins(&self) -> Vec<(f64, u64)> {
        let mut out = vec![(0.0, self.bins[0])];
        for (b, d) in (FIRST_DECADE..=LAST_DECADE).enumerate() {
            out.push((decade_edge(d), self.bins[b + 1]));
        }
        out.push((f64::INFINITY, self.bins[BIN_COUNT - 1]));
        out
    }

    pub fn count_below(&self, threshold: f64) -> Result<u64> {
        let idx = (FIRST_DECADE..=LAST_DECADE)
            .position(|d| decade_edge(d) == threshold)
            .ok_or_else(|| {
                Error::invalid(format!("threshold {threshold:e} is not a histogram decade edge"))
            })?;
        Ok(self.bins[..=idx + 1].iter().sum())
    }

    /// Fraction of errors `≤ threshold`; `threshold` must be a decade edge
    /// between `1e-16` and `1e1`. An empty histogram reports 1.
    pub fn fraction_below(&self, threshold: f64) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Ok(1.0);
        }
        Ok(self.count_below(threshold)? as f64 / total as f64)
    }
}

/// How a layer's predictions were obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// `⟨x | H⟩` with the surface materialized by the adjoint replay.
    Surface,
    /// `⟨x | H⟩` for every unit at once, evaluated as the frozen forward map
    /// applied to `x` (equal to the inner product by the adjoint identity).
    Linearized,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Surface => "surface",
            Method::Linearized => "linearized",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub layer: LayerId,
    pub method: Method,
    pub histogram: ErrorHistogram,
}

/// Which conv units get a materialized surface per input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    All,
    /// This many distinct units per layer per input, drawn from a seeded RNG.
    PerLayer(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub point: EvaluationPoint,
    pub sampling: Sampling,
    pub seed: u64,
    /// Also check every unit through the frozen forward map.
    pub linearized: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            point: EvaluationPoint::default(),
            sampling: Sampling::PerLayer(64),
            seed: 0,
            linearized: true,
        }
    }
}

pub const REPORT_THRESHOLDS: [f64; 3] = [1e-2, 1e-4, 1e-9];
pub const DEFAULT_FLOOR: f64 = 0.9999;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerificationReport {
    pub inputs: usize,
    pub layers: Vec<LayerStats>,
}

impl VerificationReport {
    fn stats_mut(&mut self, layer: LayerId, method: Method) -> &mut ErrorHistogram {
        let pos = match self
            .layers
            .iter()
            .position(|s| s.layer == layer && s.method == method)
        {
            Some(p) => p,
            None => {
                self.layers.push(LayerStats {
                    layer,
                    method,
                    histogram: ErrorHistogram::default(),
                });
                self.layers.len() - 1
            }
        };
        &mut self.layers[pos].histogram
    }

    pub fn get(&self, layer: LayerId, method: Method) -> Option<&ErrorHistogram> {
        self.layers
            .iter()
            .find(|s| s.layer == layer && s.method == method)
            .map(|s| &s.histogram)
    }

    pub fn merge(&mut self, other: &VerificationReport) {
        self.inputs += other.inputs;
        for s in &other.layers {
            self.stats_mut(s.layer, s.method).merge(&s.histogram);
        }
        self.layers.sort_by_key(|s| (s.method, s.layer));
    }

    /// Smallest per-layer fraction of errors `≤ threshold`.
    pub fn min_fraction_below(&self, threshold: f64) -> Result<f64> {
        self.layers
            .iter()
            .map(|s| s.histogram.fraction_below(threshold))
            .try_fold(1.0f64, |acc, f| Ok(acc.min(f?)))
    }

    /// True when every layer keeps at least `floor` of its errors `≤ 1e-2`.
    pub fn passes(&self, floor: f64) -> bool {
        self.min_fraction_below(1e-2).is_ok_and(|f| f >= floor)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,method,units,frac_le_1e-2,frac_le_1e-4,frac_le_1e-9,max_error\n");
        for s in &self.layers {
            let h = &s.histogram;
            let f: Vec<f64> = REPORT_THRESHOLDS
                .iter()
                .map(|&t| h.fraction_below(t).expect("decade thresholds"))
                .collect();
            writeln!(
                out,
                "{},{},{},{:.9},{:.9},{:.9},{:e}",
                s.layer,
                s.method,
                h.total(),
                f[0],
                f[1],
                f[2],
                h.max()
            )
            .expect("writing to a String");
        }
        out
    }

    /// Histogram bins in long form: layer, method, upper edge, count.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("layer,method,upper_edge,count\n");
        for s in &self.layers {
            for (edge, count) in s.histogram.bins() {
                writeln!(out, "{},{},{:e},{}", s.layer, s.method, edge, count)
                    .expect("writing to a String");
            }
        }
        out
    }
}

/// Layers measured by the protocol: every conv after the first, then the
/// classifier.
pub fn measured_layers<T: Scalar>(net: &NetworkGraph<T>) -> Vec<LayerId> {
    net.conv_ids().skip(1).chain([LayerId::Fc]).collect()
}

/// Runs the verification protocol on each input and merges the results.
pub fn verify_layers<T: Scalar>(
    net: &NetworkGraph<T>,
    inputs: &[Tensor<T>],
    options: &VerifyOptions,
) -> Result<VerificationReport> {
    let parts: Vec<VerificationReport> = inputs
        .par_iter()
        .enumerate()
        .map(|(n, x)| verify_input(net, x, n as u64, options))
        .collect::<Result<_>>()?;
    let mut report = VerificationReport::default();
    for p in &parts {
        report.merge(p);
    }
    Ok(report)
}

fn verify_input<T: Scalar>(
    net: &NetworkGraph<T>,
    x: &Tensor<T>,
    input_number: u64,
    options: &VerifyOptions,
) -> Result<VerificationReport> {
    let tr = trace(net, x, options.point)?;
    let pass = net.forward(x)?;
    let mapper = Backmapper::new(net, &tr)?;
    let mut report = VerificationReport {
        inputs: 1,
        layers: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ input_number.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    for layer in measured_layers(net) {
        let actual = pass.pre_activation(layer)?;
        if options.linearized {
            let predicted = Linearized::new(net, &tr)?.jvp(x, Target::PreActivation(layer))?;
            report
                .stats_mut(layer, Method::Linearized)
                .extend(relative_errors(&predicted, actual)?.into_data());
        }
        let (mode, units): (Mode, Vec<usize>) = match layer {
            LayerId::Fc => (Mode::Rm0, (0..net.class_count()).collect()),
            LayerId::Conv(_) => {
                let r = index_ranges(net, Mode::Rm2, layer)?;
                let total = r.grid.0 * r.grid.1 * r.out_channels;
                let units = match options.sampling {
                    Sampling::PerLayer(m) if m < total => {
                        let mut v = sample(&mut rng, total, m).into_vec();
                        v.sort_unstable();
                        v
                    }
                    _ => (0..total).collect(),
                };
                (Mode::Rm2, units)
            }
        };
        let hist = report.stats_mut(layer, Method::Surface);
        for unit in units {
            let index = match mode {
                Mode::Rm0 => SurfaceIndex::rm0(unit),
                _ => {
                    let cout = actual.shape()[2];
                    SurfaceIndex::rm2(unit / cout, unit % cout)
                }
            };
            let h = mapper.surface(mode, layer, index)?;
            let predicted = inner_product_wide(x, &h.tensor)?;
            hist.add(relative_error(predicted, actual.data()[unit].as_f64()));
        }
    }
    Ok(report)
}

/// Per-class logits of a perturbed input measured three ways.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperplaneComparison {
    /// `[M1, M2, M3]` per class: forward logit of `x'`, `⟨x' | H(z(x'))⟩`,
    /// and `⟨x' | H(z(x))⟩` with the trace of the clean input.
    pub rows: Vec<[f64; 3]>,
}

impl HyperplaneComparison {
    pub fn column(&self, m: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[m]).collect()
    }

    pub fn argmax(&self, m: usize) -> usize {
        let col = self.column(m);
        let mut best = 0;
        for (k, &v) in col.iter().enumerate() {
            if v > col[best] {
                best = k;
            }
        }
        best
    }

    /// Largest per-class relative deviation of M2 from M1.
    pub fn max_fresh_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| relative_error(r[1], r[0]))
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self, class_names: Option<&[&str]>) -> String {
        let mut out = String::from("class,name,m1_forward,m2_fresh,m3_stale\n");
        for (k, r) in self.rows.iter().enumerate() {
            let name = class_names.and_then(|n| n.get(k)).copied().unwrap_or("");
            writeln!(out, "{k},{name},{},{},{}", r[0], r[1], r[2]).expect("writing to a String");
        }
        out
    }
}

pub fn compare_hyperplanes<T: Scalar>(
    net: &NetworkGraph<T>,
    x: &Tensor<T>,
    x_perturbed: &Tensor<T>,
    point: EvaluationPoint,
) -> Result<HyperplaneComparison> {
    if x.shape() != x_perturbed.shape() {
        return Err(Error::shape("compare_hyperplanes", x.shape(), x_perturbed.shape()));
    }
    let logits = net.logits(x_perturbed)?;
    let fresh_trace = trace(net, x_perturbed, point)?;
    let stale_trace = trace(net, x, point)?;
    let fresh = Backmapper::new(net, &fresh_trace)?.rm0_all()?;
    let stale = Backmapper::new(net, &stale_trace)?.rm0_all()?;
    let rows = (0..net.class_count())
        .map(|k| {
            Ok([
                logits.data()[k].as_f64(),
                inner_product_wide(x_perturbed, &fresh[k])?,
                inner_product_wide(x_perturbed, &stale[k])?,
            ])
        })
        .collect::<Result<_>>()?;
    Ok(HyperplaneComparison { rows })
}
