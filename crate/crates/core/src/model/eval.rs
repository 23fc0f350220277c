use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{doc_seed, Example, Model, ModelError, ModelVars, Trainable};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub docs: usize,
    pub tokens: usize,
    pub correct: usize,
    /// Greedy-decoding accuracy over target tokens.
    pub token_accuracy: f64,
    /// Teacher-forced mean cross-entropy per target token.
    pub mean_loss: f64,
}

/// Keeps only some vocabulary rows in ALIGN's weighted sum.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    pub kept: Vec<bool>,
    /// Rescale each kept distribution back onto the simplex.
    pub renormalize: bool,
}

impl PruneMask {
    pub fn from_ids(vocab: usize, ids: &[usize], renormalize: bool) -> Self {
        let mut kept = vec![false; vocab];
        for &id in ids {
            kept[id] = true;
        }
        PruneMask { kept, renormalize }
    }

    pub fn apply<T: Real>(&self, probs: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let v = probs.cols();
        if v != self.kept.len() {
            return Err(ModelError::Config(format!(
                "prune mask covers {} tokens, distribution has {v}",
                self.kept.len()
            )));
        }
        let mut out = probs.clone();
        for row in out.data_mut().chunks_mut(v) {
            for (p, &keep) in row.iter_mut().zip(&self.kept) {
                if !keep {
                    *p = T::zero();
                }
            }
            if self.renormalize {
                let s: T = row.iter().copied().sum();
                if s <= T::zero() {
                    return Err(ModelError::Numeric("pruned distribution has no mass left".into()));
                }
                for p in row.iter_mut() {
                    *p = *p / s;
                }
            }
        }
        Ok(out)
    }
}

/// Evaluation-time perturbations of the visual path.
#[derive(Clone, Debug, Default)]
pub struct EvalHooks {
    /// Std of Gaussian noise added to encoder features; 0 disables it.
    pub noise_sigma: f64,
    /// Noise for example `i` is drawn from a stream keyed on `(noise_seed, i)`,
    /// so every model sees the same realization.
    pub noise_seed: u64,
    pub prune: Option<PruneMask>,
    /// Worker threads for per-document parallelism; results do not depend on it.
    pub workers: usize,
}

impl EvalHooks {
    pub fn noise_for<T: Real>(&self, index: usize, rows: usize, cols: usize) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(doc_seed(self.noise_seed, index as u64));
        Tensor::randn(&[rows, cols], self.noise_sigma, &mut rng)
    }
}

/// Visual tokens for one example with the hooks applied.
pub(crate) fn visual_tokens<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    vars: &ModelVars,
    ex: &Example<T>,
    index: usize,
    hooks: &EvalHooks,
) -> Result<Var, ModelError> {
    let mut f = model.features_graph(g, vars, &ex.patches)?;
    if hooks.noise_sigma > 0.0 {
        let (r, c) = (g.value(f).rows(), g.value(f).cols());
        let n = g.constant(hooks.noise_for(index, r, c));
        f = g.add(f, n)?;
    }
    let out = model.connect_graph(g, vars, f, ex.patches.row_width)?;
    match &hooks.prune {
        // keeping every token is the identity, not a renormalized copy
        None => Ok(out.tokens),
        Some(mask) if mask.kept.iter().all(|&k| k) => Ok(out.tokens),
        Some(mask) => {
            let probs = out
                .probs
                .ok_or_else(|| ModelError::Config(format!("pruning needs the align connector, model uses {}", model.kind())))?;
            let pruned = mask.apply(g.value(probs))?;
            let p = g.constant(pruned);
            let table = vars.align_table.unwrap_or(vars.embed);
            Ok(g.matmul(p, table)?)
        }
    }
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of `len` tokens after the style prefix.
pub fn greedy_decode<T: Real>(model: &Model<T>, ex: &Example<T>, len: usize, index: usize, hooks: &EvalHooks) -> Result<Vec<usize>, ModelError> {
    let mut g = Graph::no_grad();
    let vars = model.bind(&mut g, Trainable::NONE);
    let vis = visual_tokens(model, &mut g, &vars, ex, index, hooks)?;
    let mut text = ex.style.prefix().to_vec();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let logits = model.text_logits_graph(&mut g, &vars, vis, &text)?;
        let last = g.value(logits).rows() - 1;
        let next = argmax(g.value(logits).row(last));
        out.push(next);
        text.push(next);
    }
    Ok(out)
}

struct DocResult {
    correct: usize,
    tokens: usize,
    loss_sum: f64,
}

fn eval_one<T: Real>(model: &Model<T>, ex: &Example<T>, index: usize, hooks: &EvalHooks) -> Result<DocResult, ModelError> {
    let count = ex.text_targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Ok(DocResult {
            correct: 0,
            tokens: 0,
            loss_sum: 0.0,
        });
    }
    let mut g = Graph::no_grad();
    let vars = model.bind(&mut g, Trainable::NONE);
    let vis = visual_tokens(model, &mut g, &vars, ex, index, hooks)?;
    let logits = model.text_logits_graph(&mut g, &vars, vis, &ex.text_in)?;
    let loss = g.cross_entropy(logits, &ex.text_targets)?;
    let loss = g.value(loss).data()[0].as_f64();
    let decoded = greedy_decode(model, ex, ex.target.len(), index, hooks)?;
    let correct = decoded.iter().zip(&ex.target).filter(|(a, b)| a == b).count();
    Ok(DocResult {
        correct,
        tokens: count,
        loss_sum: loss * count as f64,
    })
}

pub fn evaluate<T: Real>(model: &Model<T>, split: &[Example<T>]) -> Result<Metrics, ModelError> {
    evaluate_with(model, split, &EvalHooks::default())
}

pub fn evaluate_with<T: Real>(model: &Model<T>, split: &[Example<T>], hooks: &EvalHooks) -> Result<Metrics, ModelError> {
    if split.is_empty() {
        return Err(ModelError::Input("evaluation split is empty".into()));
    }
    let results: Vec<Result<DocResult, ModelError>> = if hooks.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(hooks.workers)
            .build()
            .map_err(|e| ModelError::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            split
                .par_iter()
                .enumerate()
                .map(|(i, ex)| eval_one(model, ex, i, hooks))
                .collect()
        })
    } else {
        split.iter().enumerate().map(|(i, ex)| eval_one(model, ex, i, hooks)).collect()
    };
    let mut m = Metrics {
        docs: split.len(),
        tokens: 0,
        correct: 0,
        token_accuracy: 0.0,
        mean_loss: 0.0,
    };
    let mut loss_sum = 0.0;
    for r in results {
        let r = r?;
        m.tokens += r.tokens;
        m.correct += r.correct;
        loss_sum += r.loss_sum;
    }
    if m.tokens == 0 {
        return Err(ModelError::Input("evaluation split has no target tokens".into()));
    }
    m.token_accuracy = m.correct as f64 / m.tokens as f64;
    m.mean_loss = loss_sum / m.tokens as f64;
    if !m.mean_loss.is_finite() {
        return Err(ModelError::Numeric(format!("evaluation loss is {}", m.mean_loss)));
    }
    Ok(m)
}
