use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::connectors::ConnectorKind;
use crate::model::{
    default_stages, doc_seed, eval_docs, evaluate_with, run_stages, to_examples, DataConfig, EvalHooks, Model, ModelConfig,
    StageConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stages: Vec<StageConfig>,
    pub kinds: Vec<ConnectorKind>,
    pub seeds: Vec<u64>,
    pub workers: usize,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            model: ModelConfig::default(),
            data: DataConfig {
                fraction: 0.1,
                ..DataConfig::default()
            },
            stages: default_stages(),
            kinds: ConnectorKind::ALL.to_vec(),
            seeds: vec![0, 1],
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub fraction: f64,
    pub seed: u64,
    pub connector: String,
    pub token_accuracy: f64,
    pub mean_loss: f64,
    pub steps: usize,
    pub final_train_loss: Option<f64>,
}

/// ALIGN minus MLP accuracy for one seed, in points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub fraction: f64,
    pub seed: u64,
    pub align_accuracy: f64,
    pub mlp_accuracy: f64,
    pub gap_points: f64,
}

/// Trains every connector through the stage schedule on the same corpus and
/// evaluates it on the held-out split, once per seed.
pub fn compare_connectors(cfg: &ComparisonConfig) -> Result<(Vec<ComparisonRow>, Vec<GapRow>), AnalysisError> {
    if cfg.kinds.is_empty() || cfg.seeds.is_empty() {
        return Err(AnalysisError::Input("comparison needs at least one connector and one seed".into()));
    }
    let font = cfg.data.font(cfg.model.vocab)?;
    let split = to_examples::<f32>(&eval_docs(&cfg.data, &font)?, &cfg.model.tiling)?;
    let hooks = EvalHooks {
        workers: cfg.workers,
        ..EvalHooks::default()
    };
    let mut rows = Vec::new();
    let mut gaps = Vec::new();
    for &seed in &cfg.seeds {
        let stages: Vec<StageConfig> = cfg
            .stages
            .iter()
            .map(|s| StageConfig {
                seed: doc_seed(s.seed, seed),
                ..s.clone()
            })
            .collect();
        for &kind in &cfg.kinds {
            let mut mcfg = cfg.model.clone();
            mcfg.connector.kind = kind;
            let mut model = Model::<f32>::init(&mcfg, seed)?;
            let outcomes = run_stages(&mut model, &stages, &cfg.data, None, |_, _| Ok(()))?;
            let metrics = evaluate_with(&model, &split, &hooks)?;
            rows.push(ComparisonRow {
                fraction: cfg.data.fraction,
                seed,
                connector: kind.to_string(),
                token_accuracy: metrics.token_accuracy,
                mean_loss: metrics.mean_loss,
                steps: outcomes.iter().map(|o| o.record.steps).sum(),
                final_train_loss: outcomes.last().and_then(|o| o.record.final_loss),
            });
        }
        let acc = |k: ConnectorKind| {
            rows.iter()
                .find(|r| r.seed == seed && r.connector == k.name())
                .map(|r| r.token_accuracy)
        };
        if let (Some(a), Some(m)) = (acc(ConnectorKind::Align), acc(ConnectorKind::Mlp)) {
            gaps.push(GapRow {
                fraction: cfg.data.fraction,
                seed,
                align_accuracy: a,
                mlp_accuracy: m,
                gap_points: 100.0 * (a - m),
            });
        }
    }
    Ok((rows, gaps))
}
