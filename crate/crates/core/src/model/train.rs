use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{doc_seed, Example, Model, ModelError, RngState, Trainable};
use crate::tensor::{Graph, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub stage: u8,
    pub train_encoder: bool,
    pub train_connector: bool,
    pub train_decoder: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dataset_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::stage(1)
    }
}

impl StageConfig {
    /// Defaults for stages 1–3.
    pub fn stage(stage: u8) -> Self {
        let base = StageConfig {
            stage,
            train_encoder: true,
            train_connector: true,
            train_decoder: true,
            lr: 1e-3,
            batch_size: 16,
            epochs: 2,
            dataset_size: 4096,
            seed: 1000 + stage as u64,
            grad_clip: Some(1.0),
            max_steps: None,
        };
        match stage {
            2 => StageConfig { epochs: 4, ..base },
            // the query prefix shifts every text position, so the small
            // instruction corpus needs many passes at the lower rate
            3 => StageConfig {
                train_encoder: false,
                lr: 3e-4,
                dataset_size: 1024,
                epochs: 80,
                ..base
            },
            _ => base,
        }
    }

    pub fn trainable(&self) -> Trainable {
        Trainable {
            encoder: self.train_encoder,
            connector: self.train_connector,
            decoder: self.train_decoder,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(1..=3).contains(&self.stage) {
            return Err(ModelError::Config(format!("stage must be 1, 2 or 3, got {}", self.stage)));
        }
        if self.stage == 3 && self.train_encoder {
            return Err(ModelError::Config("stage 3 keeps the vision encoder frozen".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(ModelError::Config(format!("learning rate {} is invalid", self.lr)));
        }
        Ok(())
    }
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub names: Vec<String>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = (String, &'a Tensor<T>)>) -> Self {
        let mut s = AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        };
        for (name, t) in params {
            s.names.push(name);
            s.m.push(Tensor::zeros(t.shape()));
            s.v.push(Tensor::zeros(t.shape()));
        }
        s
    }

    fn update(&mut self, slot: usize, param: &mut Tensor<T>, grad: &[T], lr: f64, scale: f64) {
        let b1 = T::c(self.beta1);
        let b2 = T::c(self.beta2);
        let c1 = T::c(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::c(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::c(lr);
        let eps = T::c(self.eps);
        let scale = T::c(scale);
        let m = self.m[slot].data_mut();
        let v = self.v[slot].data_mut();
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g * scale;
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: u8,
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Where an interrupted stage left off.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub adam: AdamState<T>,
    /// Batches consumed so far, counting skipped ones.
    pub cursor: usize,
    /// Optimizer steps taken.
    pub step: usize,
    pub initial_loss: Option<f64>,
    /// Consecutive steps above the divergence threshold.
    pub above: usize,
}

#[derive(Clone, Debug)]
pub struct StageResult<T> {
    pub log: Vec<StepLog>,
    pub state: TrainState<T>,
    pub rng: RngState,
    /// False when `max_steps` cut the stage short.
    pub complete: bool,
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 50;

fn epoch_order(seed: u64, epoch: usize, n: usize) -> (Vec<usize>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(doc_seed(seed, epoch as u64));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    (order, rng)
}

/// Runs one stage of Adam updates over `data`, touching only the parameter
/// groups the stage flags as trainable.
pub fn train_stage<T: Real>(cfg: &StageConfig, model: &mut Model<T>, data: &[Example<T>]) -> Result<StageResult<T>, ModelError> {
    resume_stage(cfg, model, data, None)
}

/// Continues a stage from `state`; with `None` the stage starts fresh. A
/// resumed run follows the same batch order and optimizer trajectory as an
/// uninterrupted one.
pub fn resume_stage<T: Real>(
    cfg: &StageConfig,
    model: &mut Model<T>,
    data: &[Example<T>],
    state: Option<TrainState<T>>,
) -> Result<StageResult<T>, ModelError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::Input(format!("stage {} has no training data", cfg.stage)));
    }
    let train = cfg.trainable();
    let mut st = match state {
        Some(s) => {
            let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _, _)| n).collect();
            if s.adam.names != names {
                return Err(ModelError::Config("optimizer state does not match the model parameters".into()));
            }
            s
        }
        None => TrainState {
            adam: AdamState::new(model.named_tensors().into_iter().map(|(name, _, t)| (name, t))),
            cursor: 0,
            step: 0,
            initial_loss: None,
            above: 0,
        },
    };
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut log = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current_epoch = usize::MAX;
    let mut order = Vec::new();

    while st.cursor < total {
        if cfg.max_steps.is_some_and(|m| st.step >= m) {
            return Ok(StageResult {
                log,
                state: st,
                rng: RngState::capture(&rng),
                complete: false,
            });
        }
        let epoch = st.cursor / per_epoch;
        if epoch != current_epoch {
            (order, rng) = epoch_order(cfg.seed, epoch, data.len());
            current_epoch = epoch;
        }
        let b = st.cursor % per_epoch;
        let chunk = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(data.len())];
        st.cursor += 1;
        let batch: Vec<Example<T>> = chunk.iter().map(|&i| data[i].clone()).collect();
        if batch.iter().all(|e| e.text_targets.iter().all(|t| t.is_none())) {
            continue;
        }
        let step = st.step;
        let mut g = Graph::new();
        let vars = model.bind(&mut g, train);
        let loss_var = model.batch_loss_graph(&mut g, &vars, &batch)?;
        let loss = g.value(loss_var).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(ModelError::Numeric(format!("stage {} step {step}: loss is {loss}", cfg.stage)));
        }
        g.backward_scalar(loss_var)?;

        let init = *st.initial_loss.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * init {
            st.above += 1;
            if st.above >= DIVERGENCE_PATIENCE {
                return Err(ModelError::Diverged {
                    stage: cfg.stage,
                    step,
                    loss,
                    initial: init,
                });
            }
        } else {
            st.above = 0;
        }

        let handles = vars.vars();
        let grads: Vec<Option<&[T]>> = handles.iter().map(|&v| g.grad(v)).collect();
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(ModelError::Numeric(format!("stage {} step {step}: gradient norm is {norm}", cfg.stage)));
        }
        let scale = match cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        st.adam.step += 1;
        for (slot, ((_, group, param), grad)) in model.named_tensors_mut().into_iter().zip(&grads).enumerate() {
            if !train.group(group) {
                continue;
            }
            if let Some(grad) = grad {
                st.adam.update(slot, param, grad, cfg.lr, scale);
            }
        }
        log.push(StepLog {
            stage: cfg.stage,
            step,
            epoch,
            loss,
        });
        st.step += 1;
    }
    Ok(StageResult {
        log,
        state: st,
        rng: RngState::capture(&rng),
        complete: true,
    })
}
