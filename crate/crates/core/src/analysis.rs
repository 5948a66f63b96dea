//! Flattened-surface export and a two-component PCA projection for comparing
//! sets of hypersurfaces.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Projects each sample onto the top two principal components of the set.
///
/// Uses the eigendecomposition of the centred Gram matrix (n×n), which is
/// cheap when there are far fewer samples than elements. Each component's
/// sign is fixed so its largest-magnitude coordinate is positive.
pub fn pca_2d<T: Scalar>(samples: &[Tensor<T>]) -> Result<Vec<[f64; 2]>> {
    let n = samples.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let dim = samples[0].len();
    for s in samples {
        s.expect_same_shape("pca_2d", &samples[0])?;
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.data()) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.data().iter().zip(&mean).map(|(v, m)| v.as_f64() - m).collect())
        .collect();
    let gram = DMatrix::from_fn(n, n, |a, b| {
        centred[a].iter().zip(&centred[b]).map(|(x, y)| x * y).sum::<f64>()
    });
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut coords = vec![[0.0; 2]; n];
    for (c, &idx) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[idx].max(0.0);
        let v = eig.eigenvectors.column(idx);
        let pivot = (0..n)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .expect("n > 0");
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        // Projection of sample a onto the unit principal axis is sqrt(λ)·v[a].
        for (a, row) in coords.iter_mut().enumerate() {
            row[c] = sign * lambda.sqrt() * v[a];
        }
    }
    Ok(coords)
}

/// CSV with columns `index,label,pc1,pc2`.
pub fn projection_csv(labels: &[String], coords: &[[f64; 2]]) -> Result<String> {
    if labels.len() != coords.len() {
        return Err(Error::invalid("labels and coordinates differ in length"));
    }
    let mut out = String::from("index,label,pc1,pc2\n");
    for (n, (l, c)) in labels.iter().zip(coords).enumerate() {
        let _ = writeln!(out, "{n},{l},{:.9e},{:.9e}", c[0], c[1]);
    }
    Ok(out)
}

/// One row per sample: `label` followed by every element in row-major order.
pub fn flattened_csv<T: Scalar>(labels: &[String], samples: &[Tensor<T>]) -> Result<String> {
    if labels.len() != samples.len() {
        return Err(Error::invalid("labels and samples differ in length"));
    }
    let mut out = String::new();
    for (l, s) in labels.iter().zip(samples) {
        out.push_str(l);
        for v in s.data() {
            let _ = write!(out, ",{:e}", v.as_f64());
        }
        out.push('\n');
    }
    Ok(out)
}
