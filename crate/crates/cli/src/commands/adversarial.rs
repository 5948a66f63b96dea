use std::fmt::Write as _;

use anyhow::Result;
use backmap_core::adjoint::{trace, EvaluationPoint};
use backmap_core::adversarial::{
    attack, build_scaled_set, build_targeted_set, AdversarialConfig, AttackOutcome, Perturbation,
    PerturbationSet, Provenance, ScaledSetConfig,
};
use backmap_core::analysis::{flattened_csv, pca_2d, projection_csv};
use backmap_core::backmap::{Backmapper, Hypersurface};
use backmap_core::network::{LayerId, NetworkGraph};
use backmap_core::render::{difference_image, encode};
use backmap_core::tensor::{Scalar, Tensor};
use backmap_core::trainer::CLASS_NAMES;
use backmap_core::verify::compare_hyperplanes;

use super::{evaluation_point, first_correct, load_network, prepare, write};
use crate::args::{AdversarialArgs, Experiment};

/// Relative M2-vs-M1 bound checked for experiment A.
const FRESH_TOLERANCE: f64 = 1e-2;

pub fn run<T: Scalar>(a: &AdversarialArgs) -> Result<bool> {
    prepare(&a.common)?;
    let net = load_network::<T>(&a.model, a.common.seed)?;
    let (record, sample) = first_correct(&net, &a.input, a.common.seed)?;
    println!("input: record {record}, label {}", sample.label);
    let point = evaluation_point(a.z_scale)?;
    let config = AdversarialConfig {
        mode: a.mode,
        epsilon: a.epsilon,
        steps: a.steps,
        target: a.target,
        seed: a.common.seed,
    };
    let mut passed = true;
    if matches!(a.experiment, Experiment::A | Experiment::All) {
        passed &= experiment_a(a, &net, &sample.x, sample.label, &config, point)?;
    }
    if matches!(a.experiment, Experiment::B1 | Experiment::B2 | Experiment::All) {
        let targeted_config = AdversarialConfig {
            steps: a.targeted_steps,
            ..config.clone()
        };
        let sb1 = build_targeted_set(&net, &sample.x, sample.label, &targeted_config)?;
        save_set(a, "b1", &net, &sb1)?;
        project(a, "b1", &net, &sample.x, sample.label, &sb1, point)?;
        println!("B1: {} targeted perturbations", sb1.len());
        if matches!(a.experiment, Experiment::B2 | Experiment::All) {
            let sc = ScaledSetConfig {
                threshold: a.threshold,
                keep: a.keep,
                gaussian_count: a.gaussians,
                seed: a.common.seed,
                ..ScaledSetConfig::default()
            };
            let out = build_scaled_set(&net, &sample.x, sample.label, &sb1, &sc)?;
            save_set(a, "b2", &net, &out.set)?;
            project(a, "b2", &net, &sample.x, sample.label, &out.set, point)?;
            let summary = format!(
                "qualified,kept,gaussian_mean,gaussian_variance,gaussian_shortfall\n{},{},{:e},{:e},{}\n",
                out.qualified,
                out.set.entries.iter().filter(|p| p.provenance == Provenance::Scaled).count(),
                out.gaussian_mean,
                out.gaussian_variance,
                out.gaussian_shortfall
            );
            write(&a.common.out.join("b2_summary.csv"), summary)?;
            println!(
                "B2: {} qualified scaled perturbations, {} kept set entries, gaussian shortfall {}",
                out.qualified,
                out.set.len(),
                out.gaussian_shortfall
            );
        }
    }
    Ok(passed)
}

fn class_names<T: Scalar>(net: &NetworkGraph<T>) -> Option<&'static [&'static str]> {
    (net.class_count() == CLASS_NAMES.len()).then_some(&CLASS_NAMES[..])
}

fn experiment_a<T: Scalar>(
    a: &AdversarialArgs,
    net: &NetworkGraph<T>,
    x: &Tensor<T>,
    label: usize,
    config: &AdversarialConfig,
    point: EvaluationPoint,
) -> Result<bool> {
    let out: AttackOutcome<T> = attack(net, x, label, config)?;
    let degenerate = out.degenerate.map(|d| format!("{d:?}")).unwrap_or_default();
    let summary = format!(
        "mode,label,target,success,steps,prediction,degenerate,l2\n{:?},{label},{},{},{},{},{degenerate},{:.9}\n",
        config.mode,
        config.target.map(|t| t.to_string()).unwrap_or_default(),
        out.success,
        out.steps_taken,
        out.prediction,
        out.perturbation.l2_norm()
    );
    write(&a.common.out.join("a_attack.csv"), summary)?;
    let set = PerturbationSet {
        entries: vec![Perturbation::new(
            out.perturbation.clone(),
            Provenance::Untargeted,
            config.target,
            out.prediction,
            None,
        )],
    };
    save_set(a, "a", net, &set)?;

    let adv = x.add(&out.perturbation)?;
    let cmp = compare_hyperplanes(net, x, &adv, point)?;
    write(&a.common.out.join("a_comparison.csv"), cmp.to_csv(class_names(net)))?;
    let fresh = cmp.max_fresh_error();
    let tracks = fresh <= FRESH_TOLERANCE && cmp.argmax(0) == cmp.argmax(1);

    // Difference of one RM3 surface between the clean and perturbed traces.
    let layer = LayerId::Conv(a.diff_layer);
    let clean_trace = trace(net, x, point)?;
    let adv_trace = trace(net, &adv, point)?;
    let clean = Backmapper::new(net, &clean_trace)?.rm3(layer, a.j, a.i)?;
    let perturbed = Backmapper::new(net, &adv_trace)?.rm3(layer, a.j, a.i)?;
    let img = difference_image(&clean.tensor, &perturbed.tensor)?;
    let name = format!("a_diff_rm3_{layer}_{}_{}.{}", a.j, a.i, a.format.extension());
    write(&a.common.out.join(name), encode(&img, a.format)?)?;

    println!(
        "A: label {label} -> prediction {} after {} steps (success {}{}); max |M2-M1|/|M1| = {fresh:.3e}, argmax M1/M2/M3 = {}/{}/{}",
        out.prediction,
        out.steps_taken,
        out.success,
        if degenerate.is_empty() { String::new() } else { format!(", degenerate: {degenerate}") },
        cmp.argmax(0),
        cmp.argmax(1),
        cmp.argmax(2)
    );
    Ok(tracks)
}

fn save_set<T: Scalar>(a: &AdversarialArgs, tag: &str, net: &NetworkGraph<T>, set: &PerturbationSet<T>) -> Result<()> {
    set.save(a.common.out.join(format!("{tag}_perturbations.abma")), &net.input_shape())?;
    write(&a.common.out.join(format!("{tag}_manifest.csv")), set.to_csv())
}

/// Exports the true-class RM0 surface at each perturbed input, flattened and
/// projected onto two principal components.
fn project<T: Scalar>(
    a: &AdversarialArgs,
    tag: &str,
    net: &NetworkGraph<T>,
    x: &Tensor<T>,
    label: usize,
    set: &PerturbationSet<T>,
    point: EvaluationPoint,
) -> Result<()> {
    if set.is_empty() {
        return Ok(());
    }
    let surfaces: Vec<Tensor<T>> = set
        .entries
        .iter()
        .map(|p| -> Result<Tensor<T>> {
            let xp = x.add(&p.tensor)?;
            let tr = trace(net, &xp, point)?;
            let h: Hypersurface<T> = Backmapper::new(net, &tr)?.rm0(label)?;
            Ok(h.tensor)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<String> = set
        .entries
        .iter()
        .map(|p| {
            let mut l = p.provenance.name().to_string();
            if let Some(t) = p.target {
                let _ = write!(l, ":{t}");
            }
            if let Some(b) = p.beta {
                let _ = write!(l, ":{b:.2}");
            }
            l
        })
        .collect();
    write(&a.common.out.join(format!("{tag}_surfaces.csv")), flattened_csv(&labels, &surfaces)?)?;
    write(
        &a.common.out.join(format!("{tag}_pca.csv")),
        projection_csv(&labels, &pca_2d(&surfaces)?)?,
    )
}
