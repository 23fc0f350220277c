//! On-disk documents: `data/<split>/NNNNN.{png,raw}` plus `data/manifest.json`.

use std::path::{Path, PathBuf};

use align_core::model::{
    eval_docs, stage_docs, stage_style, synth_corpus, to_examples, DocStyle, Example, SynthDoc, TokenSequence,
};
use align_core::tensor::Real;
use align_core::vision::{Raster, TilingConfig};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const EVAL_SPLIT: &str = "eval";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub seed: u64,
    pub style: DocStyle,
    pub target: Vec<usize>,
    /// Paths relative to the data directory.
    pub png: String,
    pub raw: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub vocab: usize,
    pub docs: Vec<ManifestEntry>,
}

pub fn stage_split(stage: u8) -> String {
    format!("stage{stage}")
}

/// Every split the config asks for, in a fixed order.
fn splits(cfg: &RunConfig) -> Result<Vec<(String, Vec<SynthDoc>)>, CliError> {
    let data = &cfg.data;
    let font = data.font(cfg.model.vocab)?;
    let mut out = Vec::new();
    for stage in &cfg.stages {
        let docs = match cfg.synth_count {
            Some(n) => synth_corpus(data.stage_seed(stage.stage), n, stage_style(stage.stage), &font, &data.synth)?,
            None => stage_docs(data, stage, &font)?,
        };
        out.push((stage_split(stage.stage), docs));
    }
    let eval = match cfg.synth_count {
        Some(n) => synth_corpus(data.eval_seed(), n, data.eval_style, &font, &data.synth)?,
        None => eval_docs(data, &font)?,
    };
    out.push((EVAL_SPLIT.to_string(), eval));
    Ok(out)
}

/// Renders the corpora and writes the manifest last, so a manifest on disk
/// always describes complete files.
pub fn write_dataset(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let root = cfg.data_dir();
    let mut manifest = Manifest {
        vocab: cfg.model.vocab,
        docs: Vec::new(),
    };
    for (split, docs) in splits(cfg)? {
        let dir = root.join(&split);
        std::fs::create_dir_all(&dir)?;
        for (i, doc) in docs.iter().enumerate() {
            let id = format!("{i:05}");
            let png = format!("{split}/{id}.png");
            let raw = format!("{split}/{id}.raw");
            doc.image.write_png(&root.join(&png))?;
            doc.image.write_raw(&root.join(&raw))?;
            manifest.docs.push(ManifestEntry {
                id,
                split: split.clone(),
                seed: doc.seed,
                style: doc.style,
                target: doc.target.ids.clone(),
                png,
                raw,
            });
        }
    }
    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir().join(MANIFEST)
}

pub fn read_manifest(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let path = manifest_path(cfg);
    if !path.exists() {
        return Err(CliError::missing("dataset manifest", &path, "synth"));
    }
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    if m.vocab != cfg.model.vocab {
        return Err(CliError::Data(format!(
            "dataset was synthesized for V={} but the model has V={}; rerun `alignbench synth`",
            m.vocab, cfg.model.vocab
        )));
    }
    Ok(m)
}

fn load_doc(root: &Path, e: &ManifestEntry, vocab: usize) -> Result<SynthDoc, CliError> {
    let path = root.join(&e.raw);
    if !path.exists() {
        return Err(CliError::missing(&format!("document {}", e.id), &path, "synth"));
    }
    Ok(SynthDoc {
        seed: e.seed,
        style: e.style,
        image: Raster::read_raw(&path)?,
        target: TokenSequence::new(e.target.clone(), vocab)?,
    })
}

/// Examples of one split, at most `limit` of them.
pub fn load_split<T: Real>(
    cfg: &RunConfig,
    manifest: &Manifest,
    split: &str,
    limit: Option<usize>,
    tiling: &TilingConfig,
) -> Result<Vec<Example<T>>, CliError> {
    let root = cfg.data_dir();
    let docs = manifest
        .docs
        .iter()
        .filter(|e| e.split == split)
        .take(limit.unwrap_or(usize::MAX))
        .map(|e| load_doc(&root, e, cfg.model.vocab))
        .collect::<Result<Vec<_>, _>>()?;
    if docs.is_empty() {
        return Err(CliError::Data(format!(
            "split {split} has no documents in {}; rerun `alignbench synth` with a non-zero count",
            manifest_path(cfg).display()
        )));
    }
    Ok(to_examples(&docs, tiling)?)
}
