//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use align_core::connectors::*;
use align_core::model::*;
use align_core::tensor::*;
use align_core::vision::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-6;
pub const STEP: f64 = 1e-5;
/// Step of the five-point stencil used on the whole model.
pub const MODEL_STEP: f64 = 2e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small connector config used by the gradient and hull suites.
pub fn connector_cfg(kind: ConnectorKind) -> ConnectorConfig {
    ConnectorConfig {
        kind,
        vet_k: 6,
        latents: 3,
        ..ConnectorConfig::default()
    }
}

/// Rebuilds connector handles from variables laid out like
/// [`ConnectorParams::tensors`].
pub fn vars_from(kind: ConnectorKind, v: &[Var]) -> ConnectorVars {
    match kind {
        ConnectorKind::Align => ConnectorVars::Align(AlignVars {
            w1: v[0],
            ln_a_gamma: v[1],
            ln_a_beta: v[2],
            w2: v[3],
            ln_b_gamma: v[4],
            ln_b_beta: v[5],
        }),
        ConnectorKind::Mlp => ConnectorVars::Mlp(MlpVars { w: v[0], b: v[1] }),
        ConnectorKind::Vet => ConnectorVars::Vet(VetVars { w: v[0], table: v[1] }),
        ConnectorKind::Perceiver => ConnectorVars::Perceiver(PerceiverVars {
            latents: v[0],
            wk: v[1],
            wv: v[2],
            wo: v[3],
        }),
        ConnectorKind::Hreducer => ConnectorVars::HReducer(HReducerVars { merge: v[0] }),
    }
}

/// Random connector instance with non-trivial layernorm affine terms.
pub fn random_connector(kind: ConnectorKind, d: usize, dm: usize, vocab: usize, seed: u64) -> (ConnectorParams<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let table = Tensor::<f64>::randn(&[vocab, dm], 1.0, &mut r);
    let mut params = ConnectorParams::init(&connector_cfg(kind), d, &table, &mut r).unwrap();
    for (name, t) in params.tensors_mut() {
        if name.starts_with("ln_") {
            let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
            for x in t.data_mut() {
                *x = base + 0.3 * rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut r);
            }
        } else if name == "w1" {
            // lift W1 off its small init so the first layernorm sees signal
            let z = Tensor::<f64>::randn(t.shape(), 1.0 / (d as f64).sqrt(), &mut r);
            *t = z;
        }
    }
    (params, table)
}

/// Central-difference check of one connector forward, reduced to a scalar
/// by fixed random weights. Inputs are the features, every parameter tensor
/// and, for ALIGN, the text embedding table.
pub fn connector_grad_check(kind: ConnectorKind, seed: u64) -> GradCheckReport {
    let (d, dm, vocab, patches) = (6, 5, 7, 8);
    let (params, table) = random_connector(kind, d, dm, vocab, seed);
    let mut r = rng(seed ^ 0x9e37);
    let features = Tensor::<f64>::randn(&[patches, d], 1.0, &mut r);
    let cfg = connector_cfg(kind);
    let out_rows = params.output_tokens(patches);
    let weights = Tensor::<f64>::randn(&[out_rows, dm], 1.0, &mut r);
    let mut inputs = vec![features, table];
    inputs.extend(params.tensors().into_iter().map(|(_, t)| t.clone()));
    grad_check(
        |g, v| {
            let vars = vars_from(kind, &v[2..]);
            let out = connector_graph(g, v[0], &vars, v[1], &cfg, 4)?;
            align_core::tensor::weighted_sum(g, out.tokens, &weights)
        },
        &inputs,
        STEP,
    )
    .unwrap()
}

/// Tiny end-to-end model over one 56×56 tile.
pub fn tiny_model_cfg(kind: ConnectorKind) -> ModelConfig {
    ModelConfig {
        feature_dim: 6,
        encoder_hidden: 5,
        d_model: 6,
        vocab: 12,
        layers: 1,
        ff_mult: 2,
        max_len: 36,
        connector: connector_cfg(kind),
        tiling: TilingConfig {
            max_tiles: 1,
            ratio_set: vec![(1, 1)],
            ..TilingConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn tiny_examples(cfg: &ModelConfig, count: usize, seed: u64) -> Vec<Example<f64>> {
    let synth = SynthConfig::default();
    let font = GlyphFont::new(cfg.vocab, synth.cell, synth.font_seed).unwrap();
    synth_corpus(seed, count, DocStyle::Document, &font, &synth)
        .unwrap()
        .iter()
        .map(|d| Example::from_doc(d, &cfg.tiling).unwrap())
        .collect()
}

/// Tiny model moved to a random point of unit-ish scale, a two-document
/// batch, and the analytic loss gradient there.
pub fn model_at_random_point(kind: ConnectorKind, seed: u64) -> (Model<f64>, Vec<Example<f64>>, Vec<Tensor<f64>>) {
    let cfg = tiny_model_cfg(kind);
    let mut model = Model::<f64>::init(&cfg, seed).unwrap();
    // at the small init most loss gradients are tiny
    let mut r = rng(seed ^ 0x51);
    for (_, _, t) in model.named_tensors_mut() {
        let std = match t.shape() {
            [_, fan_in] => 1.0 / (*fan_in as f64).sqrt(),
            _ => 0.3,
        };
        let noise = Tensor::<f64>::randn(t.shape(), std, &mut r);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    let batch = tiny_examples(&cfg, 2, seed);
    let mut g = Graph::new();
    let vars = model.bind(&mut g, Trainable::ALL);
    let loss = model.batch_loss_graph(&mut g, &vars, &batch).unwrap();
    g.backward_scalar(loss).unwrap();
    let grads = vars.vars().iter().map(|&v| g.grad_tensor(v)).collect();
    (model, batch, grads)
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}

#[derive(Clone, Copy, Debug)]
pub struct ModelGradCheck {
    /// Max over parameter tensors of `‖analytic − fd‖∞ / max(‖analytic‖∞, ‖fd‖∞, 1e-12)`.
    pub tensor_rel_error: f64,
    /// Max over single coordinates of the same ratio; near-zero coordinates
    /// sit on the rounding floor of the loss.
    pub coordinate_rel_error: f64,
    pub coordinates: usize,
}

/// Five-point central differences of the loss for every parameter
/// coordinate of the tiny model, against reverse mode.
pub fn model_grad_check(kind: ConnectorKind, seed: u64) -> ModelGradCheck {
    let (mut model, batch, grads) = model_at_random_point(kind, seed);
    let mut out = ModelGradCheck {
        tensor_rel_error: 0.0,
        coordinate_rel_error: 0.0,
        coordinates: 0,
    };
    let n = model.named_tensors().len();
    for t in 0..n {
        let len = model.named_tensors()[t].2.len();
        let (mut diff, mut scale): (f64, f64) = (0.0, 0.0);
        for c in 0..len {
            let x0 = model.named_tensors()[t].2.data()[c];
            let at = |x: f64, m: &mut Model<f64>| {
                m.named_tensors_mut()[t].2.data_mut()[c] = x;
                forward_loss(&batch, m).unwrap()
            };
            let h = MODEL_STEP;
            let (p1, m1) = (at(x0 + h, &mut model), at(x0 - h, &mut model));
            let (p2, m2) = (at(x0 + 2.0 * h, &mut model), at(x0 - 2.0 * h, &mut model));
            model.named_tensors_mut()[t].2.data_mut()[c] = x0;
            let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let a = grads[t].data()[c];
            out.coordinate_rel_error = out.coordinate_rel_error.max(rel_error(a, fd));
            diff = diff.max((a - fd).abs());
            scale = scale.max(a.abs()).max(fd.abs());
            out.coordinates += 1;
        }
        out.tensor_rel_error = out.tensor_rel_error.max(diff / scale.max(1e-12));
    }
    out
}

/// Exhaustive grid choice by exact coverage, preferring fewer tiles, then
/// the squarer grid, then fewer rows.
pub fn brute_force_grid(w: usize, h: usize, cfg: &TilingConfig) -> (usize, usize) {
    let mut best = cfg.ratio_set[0];
    for &g in &cfg.ratio_set[1..] {
        // covered fraction of the canvas is min(h·cols, w·rows) / max(…)
        let frac = |(r, c): (usize, usize)| {
            let (x, y) = ((h * c) as u128, (w * r) as u128);
            (x.min(y), x.max(y))
        };
        let (a, b) = (frac(g), frac(best));
        let lhs = a.0 * b.1;
        let rhs = b.0 * a.1;
        let better = lhs > rhs
            || (lhs == rhs
                && (g.0 * g.1, g.0.abs_diff(g.1), g.0) < (best.0 * best.1, best.0.abs_diff(best.1), best.0));
        if better {
            best = g;
        }
    }
    best
}
