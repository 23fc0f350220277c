//! Stage corpora, the held-out split and the three-stage schedule.

use serde::{Deserialize, Serialize};

use super::{
    doc_seed, resume_stage, synth_corpus, DocStyle, Example, GlyphFont, Model, ModelError, StageConfig, StageRecord,
    StepLog, SynthConfig, SynthDoc, TrainState,
};
use crate::tensor::Real;
use crate::vision::TilingConfig;

/// Corpus seed offset of the evaluation split; stage corpora use 1..=3.
const EVAL_STREAM: u64 = 1_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub synth: SynthConfig,
    pub corpus_seed: u64,
    /// Share of every stage corpus that is used; 0.1 is the low-resource regime.
    pub fraction: f64,
    pub eval_docs: usize,
    pub eval_style: DocStyle,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synth: SynthConfig::default(),
            corpus_seed: 2024,
            fraction: 1.0,
            eval_docs: 256,
            eval_style: DocStyle::Instruction,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(ModelError::Config(format!("corpus fraction {} is outside (0, 1]", self.fraction)));
        }
        Ok(())
    }

    pub fn font(&self, vocab: usize) -> Result<GlyphFont, ModelError> {
        GlyphFont::new(vocab, self.synth.cell, self.synth.font_seed)
    }

    /// Documents a stage trains on after applying `fraction`.
    pub fn stage_size(&self, stage: &StageConfig) -> usize {
        ((stage.dataset_size as f64 * self.fraction).ceil() as usize).max(1)
    }

    pub fn stage_seed(&self, stage: u8) -> u64 {
        doc_seed(self.corpus_seed, stage as u64)
    }

    pub fn eval_seed(&self) -> u64 {
        doc_seed(self.corpus_seed, EVAL_STREAM)
    }
}

/// Document style of each stage: captions, full pages, then instructions.
pub fn stage_style(stage: u8) -> DocStyle {
    match stage {
        1 => DocStyle::Caption,
        2 => DocStyle::Document,
        _ => DocStyle::Instruction,
    }
}

pub fn default_stages() -> Vec<StageConfig> {
    (1..=3).map(StageConfig::stage).collect()
}

pub fn stage_docs(data: &DataConfig, stage: &StageConfig, font: &GlyphFont) -> Result<Vec<SynthDoc>, ModelError> {
    synth_corpus(
        data.stage_seed(stage.stage),
        data.stage_size(stage),
        stage_style(stage.stage),
        font,
        &data.synth,
    )
}

pub fn eval_docs(data: &DataConfig, font: &GlyphFont) -> Result<Vec<SynthDoc>, ModelError> {
    synth_corpus(data.eval_seed(), data.eval_docs, data.eval_style, font, &data.synth)
}

pub fn to_examples<T: Real>(docs: &[SynthDoc], tiling: &TilingConfig) -> Result<Vec<Example<T>>, ModelError> {
    docs.iter().map(|d| Example::from_doc(d, tiling)).collect()
}

#[derive(Clone, Debug)]
pub struct StageOutcome<T> {
    pub record: StageRecord,
    pub log: Vec<StepLog>,
    pub state: TrainState<T>,
}

/// Runs `stages` in order on freshly synthesized corpora. `resume` continues
/// the first stage from an interrupted state.
pub fn run_stages<T: Real>(
    model: &mut Model<T>,
    stages: &[StageConfig],
    data: &DataConfig,
    mut resume: Option<TrainState<T>>,
    mut after_stage: impl FnMut(&Model<T>, &StageOutcome<T>) -> Result<(), ModelError>,
) -> Result<Vec<StageOutcome<T>>, ModelError> {
    data.validate()?;
    let font = data.font(model.cfg.vocab)?;
    let mut out = Vec::with_capacity(stages.len());
    for stage in stages {
        let docs = stage_docs(data, stage, &font)?;
        let examples = to_examples(&docs, &model.cfg.tiling)?;
        let res = resume_stage(stage, model, &examples, resume.take())?;
        let outcome = StageOutcome {
            record: StageRecord {
                config: stage.clone(),
                steps: res.state.step,
                cursor: res.state.cursor,
                first_loss: res.state.initial_loss,
                final_loss: res.log.last().map(|l| l.loss),
                above: res.state.above,
                complete: res.complete,
            },
            log: res.log,
            state: res.state,
        };
        after_stage(model, &outcome)?;
        let done = outcome.record.complete;
        out.push(outcome);
        if !done {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn eval_split_is_disjoint_from_training_seeds() {
        let data = DataConfig::default();
        let font = data.font(64).unwrap();
        let eval: HashSet<u64> = eval_docs(&data, &font).unwrap().iter().map(|d| d.seed).collect();
        for stage in default_stages() {
            for d in stage_docs(&data, &stage, &font).unwrap() {
                assert!(!eval.contains(&d.seed));
            }
        }
    }

    #[test]
    fn low_resource_fraction_rounds_up() {
        let data = DataConfig {
            fraction: 0.1,
            ..DataConfig::default()
        };
        assert_eq!(data.stage_size(&StageConfig::stage(1)), 410);
        assert_eq!(data.stage_size(&StageConfig::stage(3)), 103);
    }
}
