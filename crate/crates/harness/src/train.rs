//! Quantization-aware pretraining with a straight-through estimator.
//!
//! Full-precision shadow parameters are quantized before every step; the
//! gradient taken through the quantized weights is applied to the shadow
//! copy unchanged. Biases and norm parameters stay real-valued. The norm
//! layers are frozen once training ends: nothing downstream updates them.

use bitlock_core::nn::{self, Batch, FloatParams, ModelSpec, NoiseSpec, QuantizedModel};
use bitlock_core::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Validation accuracy the run is expected to reach.
    pub accuracy_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 32,
            learning_rate: 3e-3,
            accuracy_floor: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(HarnessError::Config("training needs epochs, batch size and learning rate > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub val_acc: f64,
    pub reached_floor: bool,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shapes: &[usize]) -> Self {
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[&Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for i in 0..p.len() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g[i];
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g[i] * g[i];
                p[i] -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn param_slots(p: &mut FloatParams) -> Vec<&mut Vec<f64>> {
    let mut out: Vec<&mut Vec<f64>> = Vec::new();
    out.extend(p.weights.iter_mut());
    out.extend(p.biases.iter_mut());
    for (gain, shift) in p.norms.iter_mut() {
        out.push(gain);
        out.push(shift);
    }
    out
}

/// Train `spec` on `train`, reporting validation accuracy each epoch.
pub fn pretrain(spec: &ModelSpec, train: &Batch, val: &Batch, config: &TrainConfig, seed: u64) -> Result<(QuantizedModel, TrainReport)> {
    config.validate()?;
    let mut params = spec.init_params(seed)?;
    let shapes: Vec<usize> = param_slots(&mut params).iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(&shapes);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(seed, &[0x7472_6169, epoch as u64]));
        // Cosine decay to a tenth of the initial rate.
        let progress = epoch as f64 / config.epochs as f64;
        let lr = config.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(config.batch_size) {
            let model = spec.assemble(&params)?;
            let batch = train.select(chunk);
            let (loss, grads) = nn::loss_and_grad_with(&model, &model.dequantized(), &batch, true)?;
            loss_sum += loss;
            steps += 1;
            let mut flat: Vec<&Vec<f64>> = Vec::new();
            flat.extend(grads.weights.iter());
            flat.extend(grads.biases.iter());
            for (_, gain, shift) in &grads.norms {
                flat.push(gain);
                flat.push(shift);
            }
            adam.step(&mut param_slots(&mut params), &flat, lr);
        }
        let model = spec.assemble(&params)?;
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_acc: nn::evaluate(&model, val, NoiseSpec::CLEAN, 0)?,
        });
    }
    let model = spec.assemble(&params)?;
    let val_acc = epochs.last().map_or(0.0, |e| e.val_acc);
    Ok((
        model,
        TrainReport {
            epochs,
            val_acc,
            reached_floor: val_acc >= config.accuracy_floor,
        },
    ))
}
