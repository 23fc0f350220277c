//! Contrast connectors: MLP projection, visual embedding table, single-layer
//! Perceiver resampler and the 1×4 H-Reducer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ConnectorError;
use crate::params::param_group;
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

param_group! {
    /// `σ(F·Wᵀ + b)`.
    pub struct MlpParams / MlpVars {
        /// `D × d`
        w,
        /// `D`
        b,
    }
}

param_group! {
    /// Softmax over `K` learned visual embeddings.
    pub struct VetParams / VetVars {
        /// `K × d`
        w,
        /// `K × D`
        table,
    }
}

param_group! {
    /// `L` latent queries cross-attending over projected patch features.
    pub struct PerceiverParams / PerceiverVars {
        /// `L × D`
        latents,
        /// `D × d`
        wk,
        /// `D × d`
        wv,
        /// `D × D`
        wo,
    }
}

param_group! {
    /// Concatenate each horizontal run of four patches, then project.
    pub struct HReducerParams / HReducerVars {
        /// `D × 4d`
        merge,
    }
}

/// Horizontal merge width.
pub const HREDUCER_GROUP: usize = 4;

fn scaled<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(&[rows, cols], 1.0 / (cols as f64).sqrt(), rng)
}

impl<T: Real> MlpParams<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, d_model: usize, rng: &mut R) -> Self {
        MlpParams {
            w: scaled(d_model, d, rng),
            b: Tensor::zeros(&[d_model]),
        }
    }
}

impl<T: Real> VetParams<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, d_model: usize, k: usize, rng: &mut R) -> Result<Self, ConnectorError> {
        if k < 2 {
            return Err(ConnectorError::Config(format!("visual embedding table needs K >= 2, got {k}")));
        }
        Ok(VetParams {
            w: scaled(k, d, rng),
            table: Tensor::randn(&[k, d_model], 0.02, rng),
        })
    }
}

impl<T: Real> PerceiverParams<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, d_model: usize, latents: usize, rng: &mut R) -> Result<Self, ConnectorError> {
        if latents == 0 {
            return Err(ConnectorError::Config("perceiver needs at least one latent".into()));
        }
        Ok(PerceiverParams {
            latents: Tensor::randn(&[latents, d_model], 1.0, rng),
            wk: scaled(d_model, d, rng),
            wv: scaled(d_model, d, rng),
            wo: scaled(d_model, d_model, rng),
        })
    }
}

impl<T: Real> HReducerParams<T> {
    pub fn init<R: Rng + ?Sized>(d: usize, d_model: usize, rng: &mut R) -> Self {
        HReducerParams {
            merge: scaled(d_model, HREDUCER_GROUP * d, rng),
        }
    }
}

pub fn mlp_graph<T: Real>(g: &mut Graph<T>, f: Var, p: &MlpVars, act: Activation) -> Result<Var, TensorError> {
    let h = g.linear(f, p.w)?;
    let h = g.add_row(h, p.b)?;
    match act {
        Activation::Relu => g.relu(h),
        Activation::Gelu => g.gelu(h),
    }
}

/// Returns `(softmax weights, output)`.
pub fn vet_graph<T: Real>(g: &mut Graph<T>, f: Var, p: &VetVars) -> Result<(Var, Var), TensorError> {
    let logits = g.linear(f, p.w)?;
    let probs = g.softmax(logits)?;
    let out = g.matmul(probs, p.table)?;
    Ok((probs, out))
}

/// Returns `(attention weights L × N, output L × D)`.
pub fn perceiver_graph<T: Real>(g: &mut Graph<T>, f: Var, p: &PerceiverVars) -> Result<(Var, Var), TensorError> {
    let d_model = g.value(p.latents).cols();
    let keys = g.linear(f, p.wk)?;
    let values = g.linear(f, p.wv)?;
    let scores = g.matmul_nt(p.latents, keys)?;
    let scores = g.scale(scores, T::c(1.0 / (d_model as f64).sqrt()))?;
    let attn = g.softmax(scores)?;
    let mixed = g.matmul(attn, values)?;
    let out = g.linear(mixed, p.wo)?;
    Ok((attn, out))
}

/// Rows of `f` must be laid out tile by tile in row-major patch order, with
/// `row_width` patches per tile row.
pub fn hreducer_graph<T: Real>(
    g: &mut Graph<T>,
    f: Var,
    row_width: usize,
    p: &HReducerVars,
) -> Result<Var, TensorError> {
    let (n, d) = (g.value(f).rows(), g.value(f).cols());
    if row_width % HREDUCER_GROUP != 0 || n % HREDUCER_GROUP != 0 {
        return Err(TensorError::Invalid(format!(
            "H-Reducer needs rows of a multiple of {HREDUCER_GROUP} patches, got row width {row_width} with {n} patches"
        )));
    }
    // consecutive patches within a tile row are contiguous, so each run of
    // four becomes one row of width 4d
    let merged = g.reshape(f, vec![n / HREDUCER_GROUP, HREDUCER_GROUP * d])?;
    g.linear(merged, p.merge)
}

fn run<T: Real, P>(
    features: &Tensor<T>,
    params: &P,
    bind: impl Fn(&P, &mut Graph<T>) -> Result<Vec<Var>, ConnectorError>,
    body: impl FnOnce(&mut Graph<T>, Var, &[Var]) -> Result<Var, TensorError>,
) -> Result<Tensor<T>, ConnectorError> {
    let mut g = Graph::no_grad();
    let vars = bind(params, &mut g)?;
    let f = g.constant(features.clone());
    let out = body(&mut g, f, &vars)?;
    Ok(g.take(out))
}

fn check_input<T: Real>(features: &Tensor<T>, w: &Tensor<T>, what: &str) -> Result<(), ConnectorError> {
    if features.cols() != w.cols() {
        return Err(ConnectorError::Config(format!(
            "{what} expects {}-dim features, got {}",
            w.cols(),
            features.cols()
        )));
    }
    Ok(())
}

pub fn mlp_forward<T: Real>(features: &Tensor<T>, params: &MlpParams<T>, act: Activation) -> Result<Tensor<T>, ConnectorError> {
    check_input(features, &params.w, "MLP")?;
    run(
        features,
        params,
        |p, g| Ok(p.bind(g, false).vars()),
        |g, f, v| mlp_graph(g, f, &MlpVars { w: v[0], b: v[1] }, act),
    )
}

pub fn vet_forward<T: Real>(features: &Tensor<T>, params: &VetParams<T>) -> Result<Tensor<T>, ConnectorError> {
    check_input(features, &params.w, "VET")?;
    if params.w.rows() != params.table.rows() {
        return Err(ConnectorError::Config(format!(
            "VET projects to {} logits but holds {} embeddings",
            params.w.rows(),
            params.table.rows()
        )));
    }
    run(
        features,
        params,
        |p, g| Ok(p.bind(g, false).vars()),
        |g, f, v| Ok(vet_graph(g, f, &VetVars { w: v[0], table: v[1] })?.1),
    )
}

pub fn perceiver_forward<T: Real>(features: &Tensor<T>, params: &PerceiverParams<T>) -> Result<Tensor<T>, ConnectorError> {
    if params.latents.rows() == 0 || params.latents.is_empty() {
        return Err(ConnectorError::Config("perceiver needs at least one latent".into()));
    }
    check_input(features, &params.wk, "Perceiver")?;
    run(
        features,
        params,
        |p, g| Ok(p.bind(g, false).vars()),
        |g, f, v| {
            let vars = PerceiverVars {
                latents: v[0],
                wk: v[1],
                wv: v[2],
                wo: v[3],
            };
            Ok(perceiver_graph(g, f, &vars)?.1)
        },
    )
}

pub fn hreducer_forward<T: Real>(
    features: &Tensor<T>,
    row_width: usize,
    params: &HReducerParams<T>,
) -> Result<Tensor<T>, ConnectorError> {
    if row_width % HREDUCER_GROUP != 0 || features.rows() % HREDUCER_GROUP != 0 {
        return Err(ConnectorError::Config(format!(
            "patch row width {row_width} is not divisible by {HREDUCER_GROUP}"
        )));
    }
    if params.merge.cols() != HREDUCER_GROUP * features.cols() {
        return Err(ConnectorError::Config(format!(
            "merge matrix expects {} inputs, features give {}",
            params.merge.cols(),
            HREDUCER_GROUP * features.cols()
        )));
    }
    run(
        features,
        params,
        |p, g| Ok(p.bind(g, false).vars()),
        |g, f, v| hreducer_graph(g, f, row_width, &HReducerVars { merge: v[0] }),
    )
}
