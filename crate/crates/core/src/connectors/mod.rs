//! Vision-to-text connectors.

mod align;
mod baselines;
mod embedding;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

pub use align::{align_forward, align_graph, init_align_from_head, AlignParams, AlignVars, VocabDistribution};
pub use baselines::{
    hreducer_forward, hreducer_graph, mlp_forward, mlp_graph, perceiver_forward, perceiver_graph, vet_forward,
    vet_graph, Activation, HReducerParams, HReducerVars, MlpParams, MlpVars, PerceiverParams, PerceiverVars,
    VetParams, VetVars, HREDUCER_GROUP,
};
pub use embedding::{weighted_sum, EmbeddingTable};

#[derive(Debug, Error)]
pub enum ConnectorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConnectorKind {
    Align,
    Mlp,
    Vet,
    Perceiver,
    Hreducer,
}

impl ConnectorKind {
    pub const ALL: [ConnectorKind; 5] = [
        ConnectorKind::Align,
        ConnectorKind::Mlp,
        ConnectorKind::Vet,
        ConnectorKind::Perceiver,
        ConnectorKind::Hreducer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConnectorKind::Align => "align",
            ConnectorKind::Mlp => "mlp",
            ConnectorKind::Vet => "vet",
            ConnectorKind::Perceiver => "perceiver",
            ConnectorKind::Hreducer => "hreducer",
        }
    }
}

impl fmt::Display for ConnectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConnectorKind {
    type Err = ConnectorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ConnectorKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                ConnectorError::Config(format!("unknown connector '{s}' (expected align|mlp|vet|perceiver|hreducer)"))
            })
    }
}

/// Connector choice and its non-tensor hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConnectorConfig {
    pub kind: ConnectorKind,
    pub activation: Activation,
    /// Visual embedding count for VET.
    pub vet_k: usize,
    /// Latent count for the Perceiver.
    pub latents: usize,
    pub ln_eps: f64,
    /// When false, ALIGN keeps its own copy of the text embeddings for the
    /// weighted sum instead of sharing the decoder table.
    pub tie_embeddings: bool,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        ConnectorConfig {
            kind: ConnectorKind::Align,
            activation: Activation::Relu,
            vet_k: 128,
            latents: 16,
            ln_eps: 1e-5,
            tie_embeddings: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConnectorParams<T> {
    Align(AlignParams<T>),
    Mlp(MlpParams<T>),
    Vet(VetParams<T>),
    Perceiver(PerceiverParams<T>),
    HReducer(HReducerParams<T>),
}

#[derive(Clone, Copy, Debug)]
pub enum ConnectorVars {
    Align(AlignVars),
    Mlp(MlpVars),
    Vet(VetVars),
    Perceiver(PerceiverVars),
    HReducer(HReducerVars),
}

impl ConnectorVars {
    pub fn vars(&self) -> Vec<Var> {
        match self {
            ConnectorVars::Align(v) => v.vars(),
            ConnectorVars::Mlp(v) => v.vars(),
            ConnectorVars::Vet(v) => v.vars(),
            ConnectorVars::Perceiver(v) => v.vars(),
            ConnectorVars::HReducer(v) => v.vars(),
        }
    }
}

impl<T: Real> ConnectorParams<T> {
    /// Fresh parameters for `cfg.kind`; ALIGN's `W2` is copied from `head`.
    pub fn init<R: Rng + ?Sized>(
        cfg: &ConnectorConfig,
        feature_dim: usize,
        head: &Tensor<T>,
        rng: &mut R,
    ) -> Result<Self, ConnectorError> {
        let d_model = head.cols();
        Ok(match cfg.kind {
            ConnectorKind::Align => ConnectorParams::Align(init_align_from_head(head, feature_dim, None, rng)?),
            ConnectorKind::Mlp => ConnectorParams::Mlp(MlpParams::init(feature_dim, d_model, rng)),
            ConnectorKind::Vet => ConnectorParams::Vet(VetParams::init(feature_dim, d_model, cfg.vet_k, rng)?),
            ConnectorKind::Perceiver => {
                ConnectorParams::Perceiver(PerceiverParams::init(feature_dim, d_model, cfg.latents, rng)?)
            }
            ConnectorKind::Hreducer => ConnectorParams::HReducer(HReducerParams::init(feature_dim, d_model, rng)),
        })
    }

    pub fn kind(&self) -> ConnectorKind {
        match self {
            ConnectorParams::Align(_) => ConnectorKind::Align,
            ConnectorParams::Mlp(_) => ConnectorKind::Mlp,
            ConnectorParams::Vet(_) => ConnectorKind::Vet,
            ConnectorParams::Perceiver(_) => ConnectorKind::Perceiver,
            ConnectorParams::HReducer(_) => ConnectorKind::Hreducer,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ConnectorVars {
        match self {
            ConnectorParams::Align(p) => ConnectorVars::Align(p.bind(g, trainable)),
            ConnectorParams::Mlp(p) => ConnectorVars::Mlp(p.bind(g, trainable)),
            ConnectorParams::Vet(p) => ConnectorVars::Vet(p.bind(g, trainable)),
            ConnectorParams::Perceiver(p) => ConnectorVars::Perceiver(p.bind(g, trainable)),
            ConnectorParams::HReducer(p) => ConnectorVars::HReducer(p.bind(g, trainable)),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            ConnectorParams::Align(p) => p.tensors(),
            ConnectorParams::Mlp(p) => p.tensors(),
            ConnectorParams::Vet(p) => p.tensors(),
            ConnectorParams::Perceiver(p) => p.tensors(),
            ConnectorParams::HReducer(p) => p.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        match self {
            ConnectorParams::Align(p) => p.tensors_mut(),
            ConnectorParams::Mlp(p) => p.tensors_mut(),
            ConnectorParams::Vet(p) => p.tensors_mut(),
            ConnectorParams::Perceiver(p) => p.tensors_mut(),
            ConnectorParams::HReducer(p) => p.tensors_mut(),
        }
    }

    pub fn cast<U: Real>(&self) -> ConnectorParams<U> {
        match self {
            ConnectorParams::Align(p) => ConnectorParams::Align(p.cast()),
            ConnectorParams::Mlp(p) => ConnectorParams::Mlp(p.cast()),
            ConnectorParams::Vet(p) => ConnectorParams::Vet(p.cast()),
            ConnectorParams::Perceiver(p) => ConnectorParams::Perceiver(p.cast()),
            ConnectorParams::HReducer(p) => ConnectorParams::HReducer(p.cast()),
        }
    }

    /// Output token count for `num_patches` input patches.
    pub fn output_tokens(&self, num_patches: usize) -> usize {
        match self {
            ConnectorParams::Perceiver(p) => p.latents.rows(),
            ConnectorParams::HReducer(_) => num_patches / HREDUCER_GROUP,
            _ => num_patches,
        }
    }
}

/// Connector output inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct ConnectorOut {
    /// Visual tokens in the text embedding space.
    pub tokens: Var,
    /// ALIGN's vocabulary distribution, when applicable.
    pub probs: Option<Var>,
}

/// Dispatches to the connector's graph form. `table` is the embedding table
/// ALIGN averages over; the other connectors ignore it.
pub fn connector_graph<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    vars: &ConnectorVars,
    table: Var,
    cfg: &ConnectorConfig,
    row_width: usize,
) -> Result<ConnectorOut, TensorError> {
    Ok(match vars {
        ConnectorVars::Align(p) => {
            let (probs, tokens) = align_graph(g, features, p, table, cfg.ln_eps)?;
            ConnectorOut {
                tokens,
                probs: Some(probs),
            }
        }
        ConnectorVars::Mlp(p) => ConnectorOut {
            tokens: mlp_graph(g, features, p, cfg.activation)?,
            probs: None,
        },
        ConnectorVars::Vet(p) => ConnectorOut {
            tokens: vet_graph(g, features, p)?.1,
            probs: None,
        },
        ConnectorVars::Perceiver(p) => ConnectorOut {
            tokens: perceiver_graph(g, features, p)?.1,
            probs: None,
        },
        ConnectorVars::HReducer(p) => ConnectorOut {
            tokens: hreducer_graph(g, features, row_width, p)?,
            probs: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_parsing() {
        for k in ConnectorKind::ALL {
            assert_eq!(k.name().parse::<ConnectorKind>().unwrap(), k);
        }
        assert!("honeybee".parse::<ConnectorKind>().is_err());
    }
}
