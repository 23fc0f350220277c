//! Vocabulary-simplex connector.
//!
//! Each patch feature is mapped to a probability distribution over the text
//! vocabulary,
//!
//! ```text
//! P = softmax(LN_b(LN_a(F·W1ᵀ)·W2ᵀ))
//! ```
//!
//! and the connector output is the expectation of the text embeddings under
//! that distribution, `F' = P·E_text`. Every output row is therefore a convex
//! combination of embedding rows.

use rand::Rng;

use super::{ConnectorError, EmbeddingTable};
use crate::params::param_group;
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

param_group! {
    pub struct AlignParams / AlignVars {
        /// `D × d`
        w1,
        ln_a_gamma,
        ln_a_beta,
        /// `V × D`, initialized from the language-model head
        w2,
        ln_b_gamma,
        ln_b_beta,
    }
}

impl<T: Real> AlignParams<T> {
    pub fn vocab(&self) -> usize {
        self.w2.rows()
    }
}

/// Per-patch vocabulary distributions; every row lies on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabDistribution<T> {
    pub probs: Tensor<T>,
}

impl<T: Real> VocabDistribution<T> {
    /// Worst row-sum error and the most negative entry.
    pub fn simplex_error(&self) -> (f64, f64) {
        let v = self.probs.cols();
        let mut sum_err: f64 = 0.0;
        let mut min: f64 = f64::INFINITY;
        for row in self.probs.data().chunks(v) {
            let s: f64 = row.iter().map(|p| p.as_f64()).sum();
            sum_err = sum_err.max((s - 1.0).abs());
            min = row.iter().map(|p| p.as_f64()).fold(min, f64::min);
        }
        (sum_err, min)
    }
}

/// `W2 := head`, `W1 ~ N(0, 0.02²)`, both layernorms at identity.
pub fn init_align_from_head<T: Real, R: Rng + ?Sized>(
    head: &Tensor<T>,
    feature_dim: usize,
    table: Option<&EmbeddingTable<T>>,
    rng: &mut R,
) -> Result<AlignParams<T>, ConnectorError> {
    if head.shape().len() != 2 {
        return Err(ConnectorError::Config(format!("head must be V x D, got {:?}", head.shape())));
    }
    if let Some(t) = table {
        if t.table().shape() != head.shape() {
            return Err(ConnectorError::Config(format!(
                "head shape {:?} does not match embedding table {:?}",
                head.shape(),
                t.table().shape()
            )));
        }
    }
    let (v, d_model) = (head.rows(), head.cols());
    Ok(AlignParams {
        w1: Tensor::randn(&[d_model, feature_dim], 0.02, rng),
        ln_a_gamma: Tensor::full(&[d_model], T::one()),
        ln_a_beta: Tensor::zeros(&[d_model]),
        w2: head.clone(),
        ln_b_gamma: Tensor::full(&[v], T::one()),
        ln_b_beta: Tensor::zeros(&[v]),
    })
}

/// Graph form; returns `(P, F')`.
pub fn align_graph<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    p: &AlignVars,
    table: Var,
    eps: f64,
) -> Result<(Var, Var), TensorError> {
    let h = g.linear(features, p.w1)?;
    let h = g.layernorm(h, p.ln_a_gamma, p.ln_a_beta, eps)?;
    let logits = g.linear(h, p.w2)?;
    let logits = g.layernorm(logits, p.ln_b_gamma, p.ln_b_beta, eps)?;
    let probs = g.softmax(logits)?;
    let out = g.matmul(probs, table)?;
    Ok((probs, out))
}

pub fn align_forward<T: Real>(
    features: &Tensor<T>,
    params: &AlignParams<T>,
    table: &EmbeddingTable<T>,
    eps: f64,
) -> Result<(VocabDistribution<T>, Tensor<T>), ConnectorError> {
    if params.vocab() != table.vocab() {
        return Err(ConnectorError::Config(format!(
            "W2 has {} rows but the embedding table has {} tokens",
            params.vocab(),
            table.vocab()
        )));
    }
    let mut g = Graph::no_grad();
    let vars = params.bind(&mut g, false);
    let f = g.constant(features.clone());
    let e = g.constant(table.table().clone());
    let (p, out) = align_graph(&mut g, f, &vars, e, eps)?;
    let out = g.take(out);
    Ok((VocabDistribution { probs: g.take(p) }, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_logits_give_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = EmbeddingTable::new(Tensor::<f64>::eye(2)).unwrap();
        let mut params = init_align_from_head(e.table(), 3, Some(&e), &mut rng).unwrap();
        params.w2 = Tensor::zeros(&[2, 2]);
        let f = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let (p, out) = align_forward(&f, &params, &e, 1e-5).unwrap();
        assert!(p.probs.data().iter().all(|&x| x == 0.5));
        assert!(out.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn head_init_copies_and_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = Tensor::<f64>::randn(&[10, 4], 0.02, &mut rng);
        let a = init_align_from_head(&head, 6, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = init_align_from_head(&head, 6, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.w2, head);
        assert_eq!(a.w1, b.w1);
        assert_eq!(a.w1.shape(), &[4, 6]);
        assert!(a.ln_a_gamma.data().iter().all(|&g| g == 1.0));
        assert!(a.ln_b_beta.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn head_table_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = Tensor::<f64>::zeros(&[10, 4]);
        let table = EmbeddingTable::new(Tensor::<f64>::randn(&[8, 4], 1.0, &mut rng)).unwrap();
        assert!(init_align_from_head(&head, 6, Some(&table), &mut rng).is_err());
    }

    #[test]
    fn vocab_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = Tensor::<f64>::randn(&[10, 4], 0.1, &mut rng);
        let params = init_align_from_head(&head, 6, None, &mut rng).unwrap();
        let table = EmbeddingTable::new(Tensor::<f64>::randn(&[8, 4], 1.0, &mut rng)).unwrap();
        let f = Tensor::randn(&[2, 6], 1.0, &mut rng);
        assert!(matches!(align_forward(&f, &params, &table, 1e-5), Err(ConnectorError::Config(_))));
    }

    #[test]
    fn tied_head_probe_prefers_best_matching_token() {
        // Sanity probe: with W2 = E and W1 mapping the feature straight onto a
        // token's embedding direction, the argmax of P is that token.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (v, d) = (12, 6);
        let e = EmbeddingTable::new(Tensor::<f64>::randn(&[v, d], 1.0, &mut rng)).unwrap();
        let mut params = init_align_from_head(e.table(), d, Some(&e), &mut rng).unwrap();
        params.w1 = Tensor::eye(d);
        let target = 7;
        let f = Tensor::new(vec![1, d], e.table().row(target).to_vec()).unwrap();
        let (p, _) = align_forward(&f, &params, &e, 1e-5).unwrap();
        let h = crate::tensor::layernorm(&f, &params.ln_a_gamma, &params.ln_a_beta, 1e-5).unwrap();
        let logits = crate::tensor::matmul(&h, &Tensor::new(vec![d, v], transpose(e.table())).unwrap()).unwrap();
        let oracle = argmax(logits.data());
        assert_eq!(argmax(p.probs.data()), oracle);
        eprintln!("probe: argmax P = {oracle}, fed token {target}");
    }

    fn transpose(t: &Tensor<f64>) -> Vec<f64> {
        let (r, c) = (t.rows(), t.cols());
        (0..r * c).map(|i| t.at(i % r, i / r)).collect()
    }

    fn argmax(x: &[f64]) -> usize {
        x.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    }
}
