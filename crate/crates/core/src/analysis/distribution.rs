use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{with_workers, AnalysisError};
use crate::model::{evaluate_with, EvalHooks, Example, Metrics, Model, PruneMask, Trainable};
use crate::tensor::{Graph, Real, Tensor};
use crate::vision::PatchBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanVocabDistribution {
    /// Mean probability per token over every probe patch.
    pub mean: Vec<f64>,
    pub probes: usize,
    pub patches: usize,
    pub max_prob: f64,
    pub argmax: usize,
    /// Shannon entropy in nats.
    pub entropy: f64,
}

impl MeanVocabDistribution {
    /// Mean of the rows of several `patches × V` probability matrices.
    pub fn from_probs<T: Real>(probs: &[Tensor<T>]) -> Result<Self, AnalysisError> {
        let first = probs.first().ok_or_else(|| AnalysisError::Input("probe set is empty".into()))?;
        let v = first.cols();
        let mut sum = vec![0.0f64; v];
        let mut patches = 0;
        for p in probs {
            if p.cols() != v {
                return Err(AnalysisError::Input(format!("probe distributions over {} and {v} tokens", p.cols())));
            }
            for row in p.data().chunks(v) {
                for (s, &x) in sum.iter_mut().zip(row) {
                    *s += x.as_f64();
                }
            }
            patches += p.rows();
        }
        if patches == 0 {
            return Err(AnalysisError::Input("probe set has no patches".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / patches as f64).collect();
        let (argmax, max_prob) = mean
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, p)| if p > b.1 { (i, p) } else { b });
        let entropy = -mean.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
        Ok(MeanVocabDistribution {
            mean,
            probes: probs.len(),
            patches,
            max_prob,
            argmax,
            entropy,
        })
    }

    pub fn vocab(&self) -> usize {
        self.mean.len()
    }

    pub fn mass(&self, ids: &[usize]) -> f64 {
        ids.iter().map(|&i| self.mean[i]).sum()
    }
}

/// ALIGN's `P` for one probe image.
fn probe_probs<T: Real>(model: &Model<T>, probe: &PatchBatch<T>) -> Result<Tensor<T>, AnalysisError> {
    let mut g = Graph::no_grad();
    let vars = model.bind(&mut g, Trainable::NONE);
    let f = model.features_graph(&mut g, &vars, probe)?;
    let out = model.connect_graph(&mut g, &vars, f, probe.row_width)?;
    let p = out
        .probs
        .ok_or_else(|| AnalysisError::Input(format!("distribution analysis needs the align connector, model uses {}", model.kind())))?;
    Ok(g.take(p))
}

/// Average of the per-patch vocabulary distributions over a probe set.
/// Probes are processed in parallel; the reduction order is fixed.
pub fn aggregate_distribution<T: Real>(
    model: &Model<T>,
    probes: &[PatchBatch<T>],
    workers: usize,
) -> Result<MeanVocabDistribution, AnalysisError> {
    if probes.is_empty() {
        return Err(AnalysisError::Input("probe set is empty".into()));
    }
    let probs: Vec<Result<Tensor<T>, AnalysisError>> =
        with_workers(workers, || probes.par_iter().map(|p| probe_probs(model, p)).collect())?;
    let probs = probs.into_iter().collect::<Result<Vec<_>, _>>()?;
    MeanVocabDistribution::from_probs(&probs)
}

/// Smallest prefix of tokens, by descending mean probability, whose
/// cumulative mass reaches `mass`. Ties keep the lower id first.
pub fn prune_embeddings(dist: &MeanVocabDistribution, mass: f64) -> Result<Vec<usize>, AnalysisError> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(AnalysisError::Input(format!("mass {mass} is outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..dist.vocab()).filter(|&i| dist.mean[i] > 0.0).collect();
    order.sort_by(|&a, &b| dist.mean[b].total_cmp(&dist.mean[a]).then(a.cmp(&b)));
    if mass >= 1.0 {
        return Ok(order);
    }
    let total: f64 = dist.mean.iter().sum();
    let goal = mass * total;
    let mut acc = 0.0;
    for (k, &id) in order.iter().enumerate() {
        acc += dist.mean[id];
        // relative slack absorbs summation error on exact boundaries
        if acc >= goal * (1.0 - 1e-12) {
            return Ok(order[..=k].to_vec());
        }
    }
    Ok(order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub kept: Vec<usize>,
    pub vocab: usize,
    /// Mean-distribution mass covered by `kept`.
    pub mass: f64,
    pub renormalize: bool,
    pub full: Metrics,
    pub pruned: Metrics,
    /// Pruned minus full, in accuracy points (×100).
    pub delta_accuracy_points: f64,
    pub delta_loss: f64,
}

/// Evaluates `split` with and without the embedding rows outside `kept`.
pub fn eval_pruned<T: Real>(
    model: &Model<T>,
    dist: &MeanVocabDistribution,
    kept: &[usize],
    split: &[Example<T>],
    renormalize: bool,
    workers: usize,
) -> Result<PruneReport, AnalysisError> {
    if kept.is_empty() {
        return Err(AnalysisError::Input("kept token set is empty".into()));
    }
    let vocab = model.cfg.vocab;
    if let Some(&bad) = kept.iter().find(|&&id| id >= vocab) {
        return Err(AnalysisError::Input(format!("kept token {bad} is outside the vocabulary of {vocab}")));
    }
    let base = EvalHooks {
        workers,
        ..EvalHooks::default()
    };
    let full = evaluate_with(model, split, &base)?;
    let pruned_hooks = EvalHooks {
        prune: Some(PruneMask::from_ids(vocab, kept, renormalize)),
        ..base
    };
    let pruned = evaluate_with(model, split, &pruned_hooks)?;
    Ok(PruneReport {
        kept: kept.to_vec(),
        vocab,
        mass: dist.mass(kept),
        renormalize,
        delta_accuracy_points: 100.0 * (pruned.token_accuracy - full.token_accuracy),
        delta_loss: pruned.mean_loss - full.mean_loss,
        full,
        pruned,
    })
}
