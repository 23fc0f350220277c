//! Tiny pre-norm causal transformer with a head tied to the text embeddings.

use rand::Rng;

use crate::params::param_group;
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

param_group! {
    pub struct BlockParams / BlockVars {
        ln1_gamma,
        ln1_beta,
        wq,
        wk,
        wv,
        wo,
        ln2_gamma,
        ln2_beta,
        /// `ff × D`
        ff1_w,
        ff1_b,
        /// `D × ff`
        ff2_w,
        ff2_b,
    }
}

param_group! {
    pub struct DecoderTop / DecoderTopVars {
        /// `max_len × D` learned positions
        pos,
        lnf_gamma,
        lnf_beta,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    pub blocks: Vec<BlockParams<T>>,
    pub top: DecoderTop<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub blocks: Vec<BlockVars>,
    pub top: DecoderTopVars,
}

impl DecoderVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.blocks.iter().flat_map(|b| b.vars()).collect();
        out.extend(self.top.vars());
        out
    }
}

impl<T: Real> BlockParams<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, ff: usize, layers: usize, rng: &mut R) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        // residual projections shrink with depth
        let r = s / (2.0 * layers as f64).sqrt();
        BlockParams {
            ln1_gamma: Tensor::full(&[d], T::one()),
            ln1_beta: Tensor::zeros(&[d]),
            wq: Tensor::randn(&[d, d], s, rng),
            wk: Tensor::randn(&[d, d], s, rng),
            wv: Tensor::randn(&[d, d], s, rng),
            wo: Tensor::randn(&[d, d], r, rng),
            ln2_gamma: Tensor::full(&[d], T::one()),
            ln2_beta: Tensor::zeros(&[d]),
            ff1_w: Tensor::randn(&[ff, d], s, rng),
            ff1_b: Tensor::zeros(&[ff]),
            ff2_w: Tensor::randn(&[d, ff], r * (d as f64 / ff as f64).sqrt(), rng),
            ff2_b: Tensor::zeros(&[d]),
        }
    }
}

impl<T: Real> DecoderParams<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, layers: usize, ff_mult: usize, max_len: usize, rng: &mut R) -> Self {
        DecoderParams {
            blocks: (0..layers).map(|_| BlockParams::init(d, ff_mult * d, layers, rng)).collect(),
            top: DecoderTop {
                pos: Tensor::randn(&[max_len, d], 0.02, rng),
                lnf_gamma: Tensor::full(&[d], T::one()),
                lnf_beta: Tensor::zeros(&[d]),
            },
        }
    }

    pub fn max_len(&self) -> usize {
        self.top.pos.rows()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> DecoderVars {
        DecoderVars {
            blocks: self.blocks.iter().map(|b| b.bind(g, trainable)).collect(),
            top: self.top.bind(g, trainable),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.extend(self.top.tensors().into_iter().map(|(n, t)| (n.to_string(), t)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.tensors_mut().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.extend(self.top.tensors_mut().into_iter().map(|(n, t)| (n.to_string(), t)));
        out
    }

    pub fn cast<U: Real>(&self) -> DecoderParams<U> {
        DecoderParams {
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            top: self.top.cast(),
        }
    }
}

fn block<T: Real>(g: &mut Graph<T>, x: Var, p: &BlockVars, eps: f64) -> Result<Var, TensorError> {
    let d = g.value(x).cols();
    let h = g.layernorm(x, p.ln1_gamma, p.ln1_beta, eps)?;
    let q = g.linear(h, p.wq)?;
    let k = g.linear(h, p.wk)?;
    let v = g.linear(h, p.wv)?;
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, T::c(1.0 / (d as f64).sqrt()))?;
    let attn = g.causal_softmax(scores)?;
    let mixed = g.matmul(attn, v)?;
    let o = g.linear(mixed, p.wo)?;
    let x = g.add(x, o)?;

    let h = g.layernorm(x, p.ln2_gamma, p.ln2_beta, eps)?;
    let h = g.linear(h, p.ff1_w)?;
    let h = g.add_row(h, p.ff1_b)?;
    let h = g.gelu(h)?;
    let h = g.linear(h, p.ff2_w)?;
    let h = g.add_row(h, p.ff2_b)?;
    g.add(x, h)
}

/// Runs the block stack over an input sequence `n × D` and returns the
/// final-normed hidden states.
pub fn decoder_graph<T: Real>(g: &mut Graph<T>, input: Var, p: &DecoderVars, eps: f64) -> Result<Var, TensorError> {
    let n = g.value(input).rows();
    let max_len = g.value(p.top.pos).rows();
    if n > max_len {
        return Err(TensorError::Invalid(format!(
            "sequence of {n} tokens exceeds the {max_len} learned positions"
        )));
    }
    let pos = g.slice_rows(p.top.pos, 0, n)?;
    let mut x = g.add(input, pos)?;
    for b in &p.blocks {
        x = block(g, x, b, eps)?;
    }
    g.layernorm(x, p.top.lnf_gamma, p.top.lnf_beta, eps)
}
