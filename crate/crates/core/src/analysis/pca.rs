use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::tensor::{Real, Tensor};

const TOL: f64 = 1e-9;
const MAX_ITERS: usize = 200_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Projection of every row onto the two components.
    pub coords: Vec<[f64; 2]>,
    pub highlight: Vec<bool>,
    /// Unit principal directions, each of length `D`.
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    pub total_variance: f64,
    /// `(λ1 + λ2) / trace`.
    pub explained_ratio: f64,
}

fn matvec(c: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| c[i * n..(i + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Sign convention: the largest-magnitude coordinate is positive.
fn canonical_sign(v: &mut [f64]) {
    let i = (0..v.len()).fold(0, |b, i| if v[i].abs() > v[b].abs() { i } else { b });
    if v[i] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

fn power_iteration(c: &[f64], n: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    for _ in 0..MAX_ITERS {
        let mut w = matvec(c, &v);
        if normalize(&mut w) == 0.0 {
            return (0.0, v);
        }
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < TOL {
            break;
        }
    }
    // Rayleigh quotient is the accurate eigenvalue estimate even if the
    // vector is still rotating inside a near-degenerate eigenspace
    let cv = matvec(c, &v);
    let rq = cv.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
    (rq.max(0.0), v)
}

/// Top-2 principal components of the rows of `table` by power iteration
/// with deflation on the `D × D` covariance.
pub fn pca_2d<T: Real>(table: &Tensor<T>, highlight: &[usize], seed: u64) -> Result<PcaResult, AnalysisError> {
    let (v, d) = (table.rows(), table.cols());
    if v < 3 {
        return Err(AnalysisError::Input(format!("PCA needs at least 3 rows, got {v}")));
    }
    if d < 2 {
        return Err(AnalysisError::Degenerate(format!("rows are {d}-dimensional")));
    }
    if let Some(&bad) = highlight.iter().find(|&&i| i >= v) {
        return Err(AnalysisError::Input(format!("highlighted token {bad} outside {v} rows")));
    }
    let mut mean = vec![0.0; d];
    for r in 0..v {
        for (m, x) in mean.iter_mut().zip(table.row(r)) {
            *m += x.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= v as f64);
    let centered: Vec<f64> = (0..v)
        .flat_map(|r| table.row(r).iter().zip(&mean).map(|(x, m)| x.as_f64() - m).collect::<Vec<_>>())
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in centered.chunks(d) {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (v - 1) as f64);
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(AnalysisError::Degenerate("covariance has zero trace".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l1, mut v1) = power_iteration(&cov, d, &mut rng);
    canonical_sign(&mut v1);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (l2, mut v2) = power_iteration(&deflated, d, &mut rng);
    // re-orthogonalize against the first direction
    let proj: f64 = v2.iter().zip(&v1).map(|(a, b)| a * b).sum();
    v2.iter_mut().zip(&v1).for_each(|(a, b)| *a -= proj * b);
    normalize(&mut v2);
    canonical_sign(&mut v2);
    if l2 <= 1e-12 * total {
        return Err(AnalysisError::Degenerate(format!(
            "covariance has rank < 2 (second eigenvalue {l2:e} of trace {total:e})"
        )));
    }

    let coords = centered
        .chunks(d)
        .map(|r| {
            let a = r.iter().zip(&v1).map(|(x, y)| x * y).sum();
            let b = r.iter().zip(&v2).map(|(x, y)| x * y).sum();
            [a, b]
        })
        .collect();
    let mut flags = vec![false; v];
    for &h in highlight {
        flags[h] = true;
    }
    Ok(PcaResult {
        coords,
        highlight: flags,
        components: [v1, v2],
        eigenvalues: [l1, l2],
        total_variance: total,
        explained_ratio: (l1 + l2) / total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_data_recovers_axes() {
        let t = Tensor::<f64>::from_rows(&[&[3.0, 0.0], &[-3.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]);
        let r = pca_2d(&t, &[0], 1).unwrap();
        assert!((r.components[0][0].abs() - 1.0).abs() < 1e-6);
        assert!((r.components[1][1].abs() - 1.0).abs() < 1e-6);
        assert!((r.explained_ratio - 1.0).abs() < 1e-9);
        assert_eq!(r.highlight, vec![true, false, false, false]);
    }

    #[test]
    fn collinear_rows_are_degenerate() {
        let t = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[3.0, 6.0, 9.0]]);
        assert!(matches!(pca_2d(&t, &[], 0), Err(AnalysisError::Degenerate(_))));
    }

    #[test]
    fn too_few_rows_is_input_error() {
        let t = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(pca_2d(&t, &[], 0), Err(AnalysisError::Input(_))));
    }
}
