//! Run configuration: one JSON document, defaults for every omitted key.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use align_core::analysis::BenchConfig;
use align_core::connectors::ConnectorKind;
use align_core::model::{default_stages, DataConfig, ModelConfig, StageConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable that overrides `out_dir` (a `--out` flag still wins).
pub const OUT_ENV: &str = "ALIGNBENCH_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model initialization seed.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Threads for batch-parallel evaluation; results do not depend on it.
    pub workers: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Documents per split written by `synth`; `None` uses the stage sizes
    /// and `data.eval_docs`.
    pub synth_count: Option<usize>,
    pub stages: Vec<StageConfig>,
    pub analysis: AnalysisSettings,
    pub bench: BenchConfig,
    pub compare: CompareSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            workers: 1,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            synth_count: None,
            stages: default_stages(),
            analysis: AnalysisSettings::default(),
            bench: BenchConfig::default(),
            compare: CompareSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    /// Held-out documents used as the probe set.
    pub probes: usize,
    pub prune_mass: f64,
    pub renormalize: bool,
    pub noise_sigma: f64,
    pub noise_seeds: Vec<u64>,
    pub pca_seed: u64,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            probes: 64,
            prune_mass: 0.999,
            renormalize: true,
            noise_sigma: 3.0,
            noise_seeds: (0..5).collect(),
            pca_seed: 0,
        }
    }
}

/// Low-resource connector comparison, run by `analyze` when enabled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSettings {
    pub enabled: bool,
    pub fraction: f64,
    pub seeds: Vec<u64>,
    pub kinds: Vec<ConnectorKind>,
}

impl Default for CompareSettings {
    fn default() -> Self {
        CompareSettings {
            enabled: false,
            fraction: 0.1,
            seeds: vec![0, 1],
            kinds: ConnectorKind::ALL.to_vec(),
        }
    }
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub connector: Option<ConnectorKind>,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), then applies the output
    /// environment variable and the flags, in that order.
    pub fn resolve(path: Option<&Path>, env_out: Option<PathBuf>, o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(dir) = env_out {
            cfg.out_dir = dir;
        }
        if let Some(dir) = &o.out {
            cfg.out_dir = dir.clone();
        }
        if let Some(seed) = o.seed {
            cfg.seed = seed;
        }
        if let Some(kind) = o.connector {
            cfg.model.connector.kind = kind;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.data.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.model.vocab <= align_core::model::FIRST_CONTENT_ID {
            return Err(CliError::Usage(format!("vocabulary of {} has no content tokens", self.model.vocab)));
        }
        if self.model.channels != self.data.synth.channels {
            return Err(CliError::Usage(format!(
                "model expects {} channels but documents have {}",
                self.model.channels, self.data.synth.channels
            )));
        }
        let mut seen = HashSet::new();
        for s in &self.stages {
            s.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            if !seen.insert(s.stage) {
                return Err(CliError::Usage(format!("stage {} is configured twice", s.stage)));
            }
        }
        if self.workers == 0 {
            return Err(CliError::Usage("workers must be at least 1".into()));
        }
        let a = &self.analysis;
        if !(a.prune_mass > 0.0 && a.prune_mass <= 1.0) {
            return Err(CliError::Usage(format!("prune_mass {} is outside (0, 1]", a.prune_mass)));
        }
        if !(a.noise_sigma >= 0.0) {
            return Err(CliError::Usage(format!("noise_sigma {} is negative", a.noise_sigma)));
        }
        if a.probes == 0 {
            return Err(CliError::Usage("analysis needs at least one probe document".into()));
        }
        Ok(())
    }

    /// Stages selected by a `--stages` list such as `3`, `1,2` or `2-3`.
    pub fn select_stages(&self, list: Option<&str>) -> Result<Vec<StageConfig>, CliError> {
        let Some(list) = list else {
            return Ok(self.stages.clone());
        };
        let mut ids = Vec::new();
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let parse = |s: &str| {
                s.trim()
                    .parse::<u8>()
                    .map_err(|_| CliError::Usage(format!("bad stage '{s}' in --stages {list}")))
            };
            match part.split_once('-') {
                Some((a, b)) => ids.extend(parse(a)?..=parse(b)?),
                None => ids.push(parse(part)?),
            }
        }
        if ids.is_empty() {
            return Err(CliError::Usage("--stages is empty".into()));
        }
        ids.iter()
            .map(|&id| {
                self.stages
                    .iter()
                    .find(|s| s.stage == id)
                    .cloned()
                    .ok_or_else(|| CliError::Usage(format!("stage {id} is not in the config")))
            })
            .collect()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn checkpoint(&self, stage: u8) -> PathBuf {
        self.checkpoint_dir().join(format!("stage{stage}.ckpt"))
    }
}
