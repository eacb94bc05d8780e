use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::ParamGroup;
use super::{ModelError, PawaModel};
use crate::corpus::TrainingPair;
use crate::semtree::node_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_decoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Compute per-pair gradients on the rayon pool. Reduction order is
    /// fixed, so results match the sequential path bit for bit.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr_encoder: 2e-4,
            lr_decoder: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Decoder | ParamGroup::Adaptor => self.lr_decoder,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One Adam update; `lr` holds a learning rate per parameter.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr[i] * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PawaModel,
    /// Mean training loss per epoch, measured with dropout active.
    pub loss_history: Vec<f64>,
}

fn pair_rng(seed: u64, epoch: usize, batch: usize, idx: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(node_seed(seed, &[epoch as u32, batch as u32, idx as u32]))
}

/// Trains `model` on `pairs` with Adam and teacher forcing. Deterministic for
/// a fixed seed.
pub fn train(
    mut model: PawaModel,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    if cfg.batch_size == 0 {
        return Err(ModelError::InvalidConfig("batch_size must be positive".into()));
    }
    if cfg.epochs > 0 && pairs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let n = model.num_params();
    let mut lr = vec![0.0; n];
    for spec in &model.params().specs {
        lr[spec.range()].fill(cfg.lr_for(spec.group));
    }
    let mut adam = AdamState::new(n);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut grad = vec![0.0; n];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainingPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            grad.fill(0.0);
            let loss = if cfg.parallel {
                parallel_gradients(&model, &batch, &mut grad, cfg.seed, epoch, b)
            } else {
                model.accumulate_gradients(&batch, &mut grad, |i| Some(pair_rng(cfg.seed, epoch, b, i)))
            };
            let loss = match loss {
                Err(ModelError::NonFiniteLoss) => return Err(ModelError::DivergedLoss { epoch }),
                other => other?,
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(ModelError::DivergedLoss { epoch });
            }
            epoch_loss += loss * batch.len() as f64;
            adam.update(&mut model.params_mut().data, &grad, &lr, cfg);
        }
        let mean = epoch_loss / pairs.len() as f64;
        if !mean.is_finite() {
            return Err(ModelError::DivergedLoss { epoch });
        }
        log::debug!("epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    Ok(TrainOutcome {
        model,
        loss_history: history,
    })
}

/// Per-pair gradients on the rayon pool, summed in pair order.
fn parallel_gradients(
    model: &PawaModel,
    batch: &[TrainingPair],
    grad: &mut [f64],
    seed: u64,
    epoch: usize,
    b: usize,
) -> Result<f64, ModelError> {
    let n = grad.len();
    let scale = batch.len() as f64;
    let parts: Vec<Result<(f64, Vec<f64>), ModelError>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut g = vec![0.0; n];
            let loss = model.accumulate_gradients(std::slice::from_ref(pair), &mut g, |_| {
                Some(pair_rng(seed, epoch, b, i))
            })?;
            Ok((loss, g))
        })
        .collect();
    let mut total = 0.0;
    for part in parts {
        let (loss, g) = part?;
        total += loss;
        for (a, x) in grad.iter_mut().zip(&g) {
            *a += x / scale;
        }
    }
    Ok(total / scale)
}
