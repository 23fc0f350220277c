use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{with_workers, AnalysisError};
use crate::model::{doc_seed, evaluate_with, EvalHooks, Example, Metrics, Model, Trainable};
use crate::params::{checksum, Group};
use crate::tensor::{Graph, Real, Tensor};
use crate::vision::PatchBatch;

/// `1 − cos(a, b)`, clamped to `[0, 2]`. Two zero vectors are identical;
/// one zero vector is orthogonal to everything.
pub fn cosine_distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    match (aa > 0.0, bb > 0.0) {
        (false, false) => 0.0,
        (true, true) => (1.0 - ab / (aa.sqrt() * bb.sqrt())).clamp(0.0, 2.0),
        _ => 1.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub connector: String,
    pub sigma: f64,
    pub seed: u64,
    /// Clean vs noisy connector outputs, averaged per token then over probes.
    pub cosine_distance: f64,
    pub clean_accuracy: f64,
    pub noisy_accuracy: f64,
    /// Clean minus noisy accuracy, in points.
    pub drop_points: f64,
    /// Checksum of the probe noise tensors this connector saw.
    pub noise_checksum: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub sigma: f64,
    pub seed: u64,
    pub rows: Vec<NoiseRow>,
}

impl NoiseReport {
    pub fn row(&self, connector: &str) -> Option<&NoiseRow> {
        self.rows.iter().find(|r| r.connector == connector)
    }
}

fn probe_distance<T: Real>(model: &Model<T>, probe: &PatchBatch<T>, noise: &Tensor<T>) -> Result<f64, AnalysisError> {
    let mut g = Graph::no_grad();
    let vars = model.bind(&mut g, Trainable::NONE);
    let f = model.features_graph(&mut g, &vars, probe)?;
    let clean = model.connect_graph(&mut g, &vars, f, probe.row_width)?.tokens;
    let n = g.constant(noise.clone());
    let noisy_f = g.add(f, n)?;
    let noisy = model.connect_graph(&mut g, &vars, noisy_f, probe.row_width)?.tokens;
    let (a, b) = (g.value(clean), g.value(noisy));
    let rows = a.rows();
    if rows == 0 {
        return Ok(0.0);
    }
    Ok((0..rows).map(|r| cosine_distance(a.row(r), b.row(r))).sum::<f64>() / rows as f64)
}

/// Adds `N(0, σ²)` to the encoder features and measures how far each
/// connector's output moves and how much toy accuracy drops. Every model sees
/// the same noise: per-probe and per-example draws depend only on `seed` and
/// the index, and the probe draws are checksummed per model.
pub fn noise_test<T: Real>(
    models: &[&Model<T>],
    sigma: f64,
    probes: &[PatchBatch<T>],
    split: &[Example<T>],
    seed: u64,
    workers: usize,
) -> Result<NoiseReport, AnalysisError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(AnalysisError::Input(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if models.is_empty() || probes.is_empty() {
        return Err(AnalysisError::Input("noise test needs at least one model and one probe".into()));
    }
    let encoder = models[0].group_checksum(Group::Encoder);
    if models.iter().any(|m| m.group_checksum(Group::Encoder) != encoder) {
        return Err(AnalysisError::Input("noise test models must share the vision encoder".into()));
    }
    let probe_hooks = EvalHooks {
        noise_sigma: sigma,
        noise_seed: doc_seed(seed, 1),
        prune: None,
        workers,
    };
    let eval_clean = EvalHooks {
        workers,
        ..EvalHooks::default()
    };
    let eval_noisy = EvalHooks {
        noise_sigma: sigma,
        noise_seed: doc_seed(seed, 2),
        prune: None,
        workers,
    };

    let mut rows = Vec::with_capacity(models.len());
    for model in models {
        let d = model.cfg.feature_dim;
        let noises: Vec<Tensor<T>> = probes
            .iter()
            .enumerate()
            .map(|(i, p)| probe_hooks.noise_for(i, p.patches.rows(), d))
            .collect();
        let noise_checksum = checksum(&noises);
        let distances: Vec<Result<f64, AnalysisError>> = with_workers(workers, || {
            probes
                .par_iter()
                .zip(&noises)
                .map(|(p, n)| if sigma == 0.0 { Ok(0.0) } else { probe_distance(model, p, n) })
                .collect()
        })?;
        let distances = distances.into_iter().collect::<Result<Vec<_>, _>>()?;
        let cosine = distances.iter().sum::<f64>() / distances.len() as f64;

        let clean: Metrics = evaluate_with(model, split, &eval_clean)?;
        let noisy = if sigma == 0.0 {
            clean.clone()
        } else {
            evaluate_with(model, split, &eval_noisy)?
        };
        rows.push(NoiseRow {
            connector: model.kind().to_string(),
            sigma,
            seed,
            cosine_distance: cosine,
            clean_accuracy: clean.token_accuracy,
            noisy_accuracy: noisy.token_accuracy,
            drop_points: 100.0 * (clean.token_accuracy - noisy.token_accuracy),
            noise_checksum,
        });
    }
    if rows.iter().any(|r| r.noise_checksum != rows[0].noise_checksum) {
        return Err(AnalysisError::Input("connectors did not see the same noise realization".into()));
    }
    Ok(NoiseReport { sigma, seed, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_distance_cases() {
        assert_eq!(cosine_distance(&[1.0f64, 0.0], &[2.0, 0.0]), 0.0);
        assert!((cosine_distance(&[1.0f64, 0.0], &[0.0, 3.0]) - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&[1.0f64, 1.0], &[-1.0, -1.0]) - 2.0).abs() < 1e-12);
        assert_eq!(cosine_distance(&[0.0f64, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(cosine_distance(&[0.0f64, 0.0], &[1.0, 0.0]), 1.0);
    }
}
