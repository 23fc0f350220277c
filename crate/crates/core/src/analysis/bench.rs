use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::connectors::{ConnectorConfig, ConnectorKind};
use crate::model::{greedy_decode, DocStyle, EvalHooks, Example, Model, ModelConfig, Trainable};
use crate::tensor::{Graph, Tensor};
use crate::vision::{PatchBatch, PatchPos};

/// What one timed forward covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchScope {
    /// Encoder, connector and decoder prefill over visual + text tokens.
    Model,
    /// The connector alone on fixed features.
    Connector,
    /// Per-sample inference: one encoder and connector pass, then greedy
    /// generation of `text_len` tokens through the evaluation decode path.
    Generate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub num_patches: usize,
    pub feature_dim: usize,
    pub d_model: usize,
    pub vocab: usize,
    /// Text tokens after the visual tokens (`Model`) or generated (`Generate`).
    pub text_len: usize,
    pub warmup: usize,
    pub iters: usize,
    /// Forwards per timed sample.
    pub batch: usize,
    pub seed: u64,
    pub scope: BenchScope,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            num_patches: 144,
            feature_dim: 64,
            d_model: 32,
            vocab: 1024,
            text_len: 16,
            warmup: 5,
            iters: 30,
            batch: 1,
            seed: 0,
            scope: BenchScope::Model,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub connector: String,
    pub scope: BenchScope,
    pub samples: usize,
    /// Seconds per forward.
    pub mean_latency: f64,
    pub median_latency: f64,
    pub min_latency: f64,
    /// Output tokens per second: visual tokens, or generated tokens in
    /// `Generate` scope.
    pub tokens_per_sec: f64,
    pub output_tokens: usize,
    /// Parameter plus activation bytes of one forward.
    pub memory_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, kind: ConnectorKind) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.connector == kind.name())
    }
}

fn bench_model(cfg: &BenchConfig, kind: ConnectorKind) -> Result<(Model<f32>, PatchBatch<f32>), AnalysisError> {
    let mut mcfg = ModelConfig {
        feature_dim: cfg.feature_dim,
        encoder_hidden: cfg.feature_dim,
        d_model: cfg.d_model,
        vocab: cfg.vocab,
        connector: ConnectorConfig {
            kind,
            ..ConnectorConfig::default()
        },
        ..ModelConfig::default()
    };
    let per_tile = mcfg.tiling.patches_per_tile();
    if cfg.num_patches == 0 || cfg.num_patches % per_tile != 0 {
        return Err(AnalysisError::Input(format!(
            "bench patch count {} is not a positive multiple of {per_tile} patches per tile",
            cfg.num_patches
        )));
    }
    let tiles = cfg.num_patches / per_tile;
    mcfg.tiling.max_tiles = mcfg.tiling.max_tiles.max(tiles);
    mcfg.max_len = mcfg.max_len.max(cfg.num_patches + cfg.text_len + 2);
    let model = Model::<f32>::init(&mcfg, cfg.seed)?;
    let side = mcfg.tiling.patches_per_side();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xbe7c);
    let patches = Tensor::randn(&[cfg.num_patches, mcfg.patch_len()], 0.5, &mut rng);
    let layout = (0..cfg.num_patches)
        .map(|i| PatchPos {
            tile: i / per_tile,
            row: (i % per_tile) / side,
            col: i % side,
        })
        .collect();
    let batch = PatchBatch {
        patches,
        layout,
        per_tile_counts: vec![per_tile; tiles],
        row_width: side,
        grid: (1, tiles),
    };
    Ok((model, batch))
}

/// One forward; returns `(output tokens, graph bytes)`.
fn forward(
    model: &Model<f32>,
    batch: &PatchBatch<f32>,
    features: &Tensor<f32>,
    text: &[usize],
    scope: BenchScope,
) -> Result<(usize, usize), AnalysisError> {
    if scope == BenchScope::Generate {
        let ex = Example {
            patches: batch.clone(),
            style: DocStyle::Document,
            target: Vec::new(),
            text_in: Vec::new(),
            text_targets: Vec::new(),
        };
        let out = greedy_decode(model, &ex, text.len(), 0, &EvalHooks::default())?;
        std::hint::black_box(&out);
        return Ok((out.len(), 0));
    }
    let mut g = Graph::no_grad();
    let vars = model.bind(&mut g, Trainable::NONE);
    let f = match scope {
        BenchScope::Connector => g.constant(features.clone()),
        _ => model.features_graph(&mut g, &vars, batch)?,
    };
    let vis = model.connect_graph(&mut g, &vars, f, batch.row_width)?.tokens;
    let tokens = g.value(vis).rows();
    if scope == BenchScope::Model {
        let logits = model.text_logits_graph(&mut g, &vars, vis, text)?;
        std::hint::black_box(g.value(logits).data()[0]);
    }
    std::hint::black_box(g.value(vis).data().first());
    Ok((tokens, g.value_bytes()))
}

/// Times the forward of each connector at a fixed shape. Samples of the
/// connectors are interleaved so drift hits all of them alike.
pub fn bench_connectors(cfg: &BenchConfig, kinds: &[ConnectorKind]) -> Result<BenchReport, AnalysisError> {
    if cfg.iters < 30 || cfg.warmup < 5 {
        return Err(AnalysisError::Input(format!(
            "bench needs at least 30 iterations after 5 warmup runs, got {} after {}",
            cfg.iters, cfg.warmup
        )));
    }
    if cfg.batch == 0 || kinds.is_empty() {
        return Err(AnalysisError::Input("bench batch and connector list must be non-empty".into()));
    }
    let setups = kinds.iter().map(|&k| bench_model(cfg, k)).collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xfea7);
    let features = Tensor::<f32>::randn(&[cfg.num_patches, cfg.feature_dim], 1.0, &mut rng);
    let text: Vec<usize> = (0..cfg.text_len).map(|i| (i * 7 + 2) % cfg.vocab).collect();

    let mut meta = Vec::with_capacity(kinds.len());
    for (model, batch) in &setups {
        let mut tokens = 0;
        for _ in 0..cfg.warmup {
            tokens = forward(model, batch, &features, &text, cfg.scope)?.0;
        }
        // generation reuses one prefill-sized graph per step, so its
        // footprint is that of a single model forward
        let memory_scope = match cfg.scope {
            BenchScope::Generate => BenchScope::Model,
            s => s,
        };
        let bytes = forward(model, batch, &features, &text, memory_scope)?.1;
        meta.push((tokens, bytes));
    }
    let mut samples = vec![Vec::with_capacity(cfg.iters); kinds.len()];
    for _ in 0..cfg.iters {
        for (k, (model, batch)) in setups.iter().enumerate() {
            let start = Instant::now();
            for _ in 0..cfg.batch {
                forward(model, batch, &features, &text, cfg.scope)?;
            }
            let elapsed = start.elapsed();
            if elapsed.is_zero() {
                return Err(AnalysisError::TimerResolution(format!(
                    "{} forward measured as zero time",
                    kinds[k]
                )));
            }
            samples[k].push(elapsed.as_secs_f64() / cfg.batch as f64);
        }
    }
    let rows = kinds
        .iter()
        .zip(samples)
        .zip(meta)
        .map(|((kind, mut s), (tokens, bytes))| {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            s.sort_by(f64::total_cmp);
            let median = s[s.len() / 2];
            BenchRow {
                connector: kind.to_string(),
                scope: cfg.scope,
                samples: s.len(),
                mean_latency: mean,
                median_latency: median,
                min_latency: s[0],
                tokens_per_sec: tokens as f64 / mean,
                output_tokens: tokens,
                memory_bytes: bytes,
            }
        })
        .collect();
    Ok(BenchReport {
        config: cfg.clone(),
        rows,
    })
}
