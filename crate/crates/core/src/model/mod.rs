//! End-to-end toy vision-language model: patch encoder → connector → causal
//! decoder over `concat(visual tokens, text embeddings)`.

mod checkpoint;
mod decoder;
mod eval;
mod pipeline;
mod synth;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connectors::{connector_graph, ConnectorConfig, ConnectorError, ConnectorKind, ConnectorOut, ConnectorParams, ConnectorVars};
use crate::params::Group;
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};
use crate::vision::{encode_graph, image_to_patches, EncoderParams, EncoderVars, PatchBatch, TilingConfig, VisionError};

pub use checkpoint::{Checkpoint, CheckpointMeta, RngState, StageRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decoder::{decoder_graph, BlockParams, BlockVars, DecoderParams, DecoderTop, DecoderVars};
pub use pipeline::{default_stages, eval_docs, run_stages, stage_docs, stage_style, to_examples, DataConfig, StageOutcome};
pub use eval::{evaluate, evaluate_with, greedy_decode, EvalHooks, Metrics, PruneMask};
pub use synth::{
    doc_seed, render, synth_corpus, synth_document, text_io, DocStyle, GlyphFont, SynthConfig, SynthDoc, TokenSequence,
    BOS, FIRST_CONTENT_ID, QUERY,
};
pub use train::{resume_stage, train_stage, AdamState, StageConfig, StageResult, StepLog, TrainState};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input error: {0}")]
    Input(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    Index { id: usize, vocab: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("stage {stage} diverged at step {step}: loss {loss} stayed above 10x the initial {initial} for 50 steps")]
    Diverged {
        stage: u8,
        step: usize,
        loss: f64,
        initial: f64,
    },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Connector(#[from] ConnectorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ModelError {
    /// True for NaN/Inf and divergence failures.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ModelError::Numeric(_)
                | ModelError::Diverged { .. }
                | ModelError::Tensor(TensorError::NonFinite { .. })
                | ModelError::Tensor(TensorError::DivisionByZero { .. })
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Encoder output width `d`.
    pub feature_dim: usize,
    pub encoder_hidden: usize,
    /// Text embedding width `D`.
    pub d_model: usize,
    /// Vocabulary size `V`.
    pub vocab: usize,
    pub layers: usize,
    pub ff_mult: usize,
    /// Learned decoder positions.
    pub max_len: usize,
    pub ln_eps: f64,
    pub channels: usize,
    pub connector: ConnectorConfig,
    pub tiling: TilingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 64,
            encoder_hidden: 64,
            d_model: 32,
            vocab: 256,
            layers: 2,
            ff_mult: 4,
            max_len: 192,
            ln_eps: 1e-5,
            channels: 1,
            connector: ConnectorConfig::default(),
            tiling: TilingConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn patch_len(&self) -> usize {
        self.tiling.patch_side * self.tiling.patch_side * self.channels
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.tiling.validate()?;
        if self.vocab < 2 || self.d_model == 0 || self.feature_dim == 0 || self.layers == 0 {
            return Err(ModelError::Config(format!(
                "degenerate dimensions: V={} D={} d={} layers={}",
                self.vocab, self.d_model, self.feature_dim, self.layers
            )));
        }
        if self.max_len < self.tiling.max_tiles * self.tiling.patches_per_tile() + 2 {
            return Err(ModelError::Config(format!(
                "max_len {} cannot hold a {}-tile image",
                self.max_len, self.tiling.max_tiles
            )));
        }
        Ok(())
    }
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub encoder: bool,
    pub connector: bool,
    pub decoder: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        encoder: true,
        connector: true,
        decoder: true,
    };
    pub const NONE: Trainable = Trainable {
        encoder: false,
        connector: false,
        decoder: false,
    };

    pub fn group(&self, g: Group) -> bool {
        match g {
            Group::Encoder => self.encoder,
            Group::Connector => self.connector,
            Group::Decoder => self.decoder,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub encoder: EncoderParams<T>,
    pub connector: ConnectorParams<T>,
    pub decoder: DecoderParams<T>,
    /// `E_text`, `V × D`; also the tied output head.
    pub embed: Tensor<T>,
    /// ALIGN's own embedding copy when tying is switched off.
    pub align_table: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub connector: ConnectorVars,
    pub decoder: DecoderVars,
    pub embed: Var,
    pub align_table: Option<Var>,
}

impl ModelVars {
    /// Handles in the order of [`Model::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.encoder.vars();
        out.extend(self.connector.vars());
        out.extend(self.align_table);
        out.extend(self.decoder.vars());
        out.push(self.embed);
        out
    }
}

/// A document ready for the model: patches plus teacher-forcing text.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub patches: PatchBatch<T>,
    pub style: DocStyle,
    pub target: Vec<usize>,
    pub text_in: Vec<usize>,
    pub text_targets: Vec<Option<usize>>,
}

impl<T: Real> Example<T> {
    pub fn from_doc(doc: &SynthDoc, tiling: &TilingConfig) -> Result<Self, ModelError> {
        let patches = image_to_patches(&doc.image, tiling)?;
        let (text_in, text_targets) = doc.text_io();
        Ok(Example {
            patches,
            style: doc.style,
            target: doc.target.ids.clone(),
            text_in,
            text_targets,
        })
    }
}

/// Rows `E_text[x_i]`.
pub fn embed_tokens<T: Real>(ids: &TokenSequence, table: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let vocab = table.rows();
    if let Some(&id) = ids.ids.iter().find(|&&id| id >= vocab) {
        return Err(ModelError::Index { id, vocab });
    }
    let d = table.cols();
    let data = ids.ids.iter().flat_map(|&id| table.row(id).iter().copied()).collect();
    Ok(Tensor::new(vec![ids.len(), d], data)?)
}

/// `concat(visual tokens, text embeddings)` along rows.
pub fn build_input<T: Real>(visual: &Tensor<T>, text: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    if visual.cols() != text.cols() {
        return Err(TensorError::Shape {
            op: "build_input",
            lhs: visual.shape().to_vec(),
            rhs: text.shape().to_vec(),
        }
        .into());
    }
    Ok(Tensor::concat_rows(&[visual, text])?)
}

impl<T: Real> Model<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Tensor::randn(&[cfg.vocab, cfg.d_model], 0.02, &mut rng);
        let encoder = EncoderParams::init(
            cfg.patch_len(),
            cfg.encoder_hidden,
            cfg.feature_dim,
            cfg.tiling.patches_per_tile(),
            &mut rng,
        );
        let decoder = DecoderParams::init(cfg.d_model, cfg.layers, cfg.ff_mult, cfg.max_len, &mut rng);
        let connector = ConnectorParams::init(&cfg.connector, cfg.feature_dim, &embed, &mut rng)?;
        let align_table = (cfg.connector.kind == ConnectorKind::Align && !cfg.connector.tie_embeddings)
            .then(|| embed.clone());
        Ok(Model {
            cfg: cfg.clone(),
            encoder,
            connector,
            decoder,
            embed,
            align_table,
        })
    }

    /// Same encoder, decoder and embeddings with a freshly initialized
    /// connector of another kind.
    pub fn with_connector(&self, connector: &ConnectorConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = self.cfg.clone();
        cfg.connector = connector.clone();
        let params = ConnectorParams::init(connector, cfg.feature_dim, &self.embed, &mut rng)?;
        let align_table = (connector.kind == ConnectorKind::Align && !connector.tie_embeddings)
            .then(|| self.embed.clone());
        Ok(Model {
            cfg,
            encoder: self.encoder.clone(),
            connector: params,
            decoder: self.decoder.clone(),
            embed: self.embed.clone(),
            align_table,
        })
    }

    pub fn kind(&self) -> ConnectorKind {
        self.connector.kind()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            encoder: self.encoder.cast(),
            connector: self.connector.cast(),
            decoder: self.decoder.cast(),
            embed: self.embed.cast(),
            align_table: self.align_table.as_ref().map(|t| t.cast()),
        }
    }

    /// Every parameter with its checkpoint name and training group.
    pub fn named_tensors(&self) -> Vec<(String, Group, &Tensor<T>)> {
        let mut out: Vec<(String, Group, &Tensor<T>)> = self
            .encoder
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), Group::Encoder, t))
            .collect();
        out.extend(
            self.connector
                .tensors()
                .into_iter()
                .map(|(n, t)| (format!("connector.{}.{n}", self.connector.kind()), Group::Connector, t)),
        );
        if let Some(t) = &self.align_table {
            out.push(("connector.align.table".into(), Group::Connector, t));
        }
        out.extend(
            self.decoder
                .tensors()
                .into_iter()
                .map(|(n, t)| (format!("decoder.{n}"), Group::Decoder, t)),
        );
        out.push(("decoder.embed".into(), Group::Decoder, &self.embed));
        out
    }

    /// Mutable counterpart of [`Model::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, Group, &mut Tensor<T>)> {
        let kind = self.connector.kind();
        let mut out: Vec<(String, Group, &mut Tensor<T>)> = self
            .encoder
            .tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), Group::Encoder, t))
            .collect();
        out.extend(
            self.connector
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("connector.{kind}.{n}"), Group::Connector, t)),
        );
        if let Some(t) = &mut self.align_table {
            out.push(("connector.align.table".into(), Group::Connector, t));
        }
        out.extend(
            self.decoder
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("decoder.{n}"), Group::Decoder, t)),
        );
        out.push(("decoder.embed".into(), Group::Decoder, &mut self.embed));
        out
    }

    pub fn group_checksum(&self, group: Group) -> u64 {
        crate::params::checksum(
            self.named_tensors()
                .into_iter()
                .filter(|(_, g, _)| *g == group)
                .map(|(_, _, t)| t),
        )
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>, train: Trainable) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(g, train.encoder),
            connector: self.connector.bind(g, train.connector),
            align_table: self.align_table.as_ref().map(|t| g.leaf(t.clone(), train.connector)),
            decoder: self.decoder.bind(g, train.decoder),
            embed: g.leaf(self.embed.clone(), train.decoder),
        }
    }

    /// Encoder features `F` for one image's patches.
    pub fn features_graph(&self, g: &mut Graph<T>, vars: &ModelVars, patches: &PatchBatch<T>) -> Result<Var, ModelError> {
        if patches.patches.cols() != self.cfg.patch_len() {
            return Err(ModelError::Config(format!(
                "patch length {} does not match the model's {}",
                patches.patches.cols(),
                self.cfg.patch_len()
            )));
        }
        let x = g.constant(patches.patches.clone());
        Ok(encode_graph(g, x, &vars.encoder, patches.per_tile_counts.len())?)
    }

    /// Connector applied to features `F`.
    pub fn connect_graph(&self, g: &mut Graph<T>, vars: &ModelVars, features: Var, row_width: usize) -> Result<ConnectorOut, ModelError> {
        let table = vars.align_table.unwrap_or(vars.embed);
        Ok(connector_graph(g, features, &vars.connector, table, &self.cfg.connector, row_width)?)
    }

    /// Next-token logits over the text segment, `len(text_in) × V`.
    pub fn text_logits_graph(&self, g: &mut Graph<T>, vars: &ModelVars, visual: Var, text_in: &[usize]) -> Result<Var, ModelError> {
        let n_vis = g.value(visual).rows();
        let text = g.gather(vars.embed, text_in)?;
        let input = g.concat_rows(&[visual, text])?;
        let hidden = decoder_graph(g, input, &vars.decoder, self.cfg.ln_eps)?;
        let total = n_vis + text_in.len();
        let text_hidden = g.slice_rows(hidden, n_vis, total)?;
        Ok(g.linear(text_hidden, vars.embed)?)
    }

    /// Mean cross-entropy over every target token in `batch`.
    pub fn batch_loss_graph(&self, g: &mut Graph<T>, vars: &ModelVars, batch: &[Example<T>]) -> Result<Var, ModelError> {
        let total: usize = batch
            .iter()
            .map(|e| e.text_targets.iter().filter(|t| t.is_some()).count())
            .sum();
        if total == 0 {
            return Err(ModelError::Input("no target tokens in batch".into()));
        }
        let mut acc: Option<Var> = None;
        for ex in batch {
            let count = ex.text_targets.iter().filter(|t| t.is_some()).count();
            if count == 0 {
                continue;
            }
            let f = self.features_graph(g, vars, &ex.patches)?;
            let vis = self.connect_graph(g, vars, f, ex.patches.row_width)?;
            let logits = self.text_logits_graph(g, vars, vis.tokens, &ex.text_in)?;
            let loss = g.cross_entropy(logits, &ex.text_targets)?;
            let weighted = g.scale(loss, T::c(count as f64 / total as f64))?;
            acc = Some(match acc {
                Some(a) => g.add(a, weighted)?,
                None => weighted,
            });
        }
        Ok(acc.expect("total > 0"))
    }
}

/// Mean next-token cross-entropy over the text targets of `batch`; visual
/// positions carry no loss.
pub fn forward_loss<T: Real>(batch: &[Example<T>], model: &Model<T>) -> Result<f64, ModelError> {
    let mut g = Graph::no_grad();
    let vars = model.bind(&mut g, Trainable::NONE);
    let loss = model.batch_loss_graph(&mut g, &vars, batch)?;
    let v = g.value(loss).data()[0].as_f64();
    if !v.is_finite() {
        return Err(ModelError::Numeric(format!("loss is {v}")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(kind: ConnectorKind) -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            encoder_hidden: 8,
            d_model: 8,
            vocab: 16,
            connector: ConnectorConfig {
                kind,
                vet_k: 6,
                latents: 3,
                ..ConnectorConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn embed_lookup() {
        let table = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let e = embed_tokens(&TokenSequence { ids: vec![0] }, &table).unwrap();
        assert_eq!(e.data(), table.row(0));
        let e = embed_tokens(&TokenSequence { ids: vec![2, 2] }, &table).unwrap();
        assert_eq!(e.row(0), e.row(1));
        let e = embed_tokens(&TokenSequence { ids: vec![2, 0, 1] }, &table).unwrap();
        assert_eq!(e.data(), &[5.0, 6.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            embed_tokens(&TokenSequence { ids: vec![3] }, &table),
            Err(ModelError::Index { id: 3, vocab: 3 })
        ));
    }

    #[test]
    fn input_concatenation() {
        let vis = Tensor::<f64>::from_rows(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]);
        let txt = Tensor::<f64>::from_rows(&[&[4.0, 4.0], &[5.0, 5.0]]);
        let empty = Tensor::<f64>::zeros(&[0, 2]);
        assert_eq!(build_input(&vis, &empty).unwrap(), vis);
        assert_eq!(build_input(&empty, &txt).unwrap(), txt);
        let both = build_input(&vis, &txt).unwrap();
        assert_eq!(both.rows(), 5);
        assert_eq!(both.row(3), &[4.0, 4.0]);
        assert!(build_input(&vis, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn named_tensors_line_up_with_vars() {
        for kind in ConnectorKind::ALL {
            let model = Model::<f64>::init(&small_cfg(kind), 1).unwrap();
            let mut g = Graph::new();
            let vars = model.bind(&mut g, Trainable::ALL);
            let names = model.named_tensors();
            let handles = vars.vars();
            assert_eq!(names.len(), handles.len());
            for ((name, _, t), v) in names.iter().zip(handles) {
                assert_eq!(g.value(v), *t, "{name}");
            }
        }
    }

    #[test]
    fn untied_align_keeps_a_separate_table() {
        let mut cfg = small_cfg(ConnectorKind::Align);
        cfg.connector.tie_embeddings = false;
        let model = Model::<f64>::init(&cfg, 2).unwrap();
        assert_eq!(model.align_table.as_ref(), Some(&model.embed));
        assert!(model.named_tensors().iter().any(|(n, _, _)| n == "connector.align.table"));
    }
}
