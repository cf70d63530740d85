use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use scaforge_grad::{Adam, AdamConfig, Tensor};

use super::metrics::ler;
use super::model::AttackModel;
use crate::error::{CoreError, Result};
use crate::par::par_map;
use crate::rng::seeded;

/// One labeled trace in raw readout units.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub readouts: Vec<f64>,
    pub label: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    /// Cosine decay from `lr` down to `lr * lr_final_fraction`.
    pub lr_final_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 60, lr: 4e-3, batch_size: 8, clip_norm: 5.0, lr_final_fraction: 0.05 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean CTC loss per epoch.
    pub loss: Vec<f64>,
    /// Mean held-out LER after each epoch, when a validation set is given.
    pub val_ler: Vec<f64>,
}

/// Mean LER of greedy decodes against the labels.
pub fn evaluate_ler(model: &AttackModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(CoreError::InvalidParam("no samples to evaluate".into()));
    }
    let lers = par_map(samples, |s| model.decode(&s.readouts).and_then(|p| ler(&p, &s.label)));
    let lers: Vec<f64> = lers.into_iter().collect::<Result<_>>()?;
    Ok(lers.iter().sum::<f64>() / lers.len() as f64)
}

/// Adam on the mean CTC loss of shuffled mini-batches. Fits the input
/// normalization first unless the model is already trained.
pub fn train(model: &mut AttackModel, data: &[Sample], val: &[Sample], cfg: &TrainConfig, seed: u64) -> Result<TrainHistory> {
    if data.is_empty() {
        return Err(CoreError::InvalidParam("empty training set".into()));
    }
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if !model.trained {
        model.fit_normalization(data.iter().map(|s| s.readouts.as_slice()))?;
    }
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = seeded(seed, 0x7A1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let progress = epoch as f64 / cfg.epochs as f64;
        let floor = cfg.lr_final_fraction.clamp(0.0, 1.0);
        adam.config.lr = cfg.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let results = par_map(batch, |&i| model.param_gradient(&data[i].readouts, &data[i].label));
            let mut sum: Option<Vec<Tensor>> = None;
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(CoreError::Diverged { epoch, detail: format!("loss {loss}") });
                }
                total += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt() * scale;
            if !norm.is_finite() {
                return Err(CoreError::Diverged { epoch, detail: "non-finite gradient".into() });
            }
            let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale * clip);
            }
            adam.step(&mut model.params_mut(), &grads)?;
        }
        history.loss.push(total / data.len() as f64);
        if !val.is_empty() {
            history.val_ler.push(evaluate_ler(model, val)?);
        }
    }
    model.trained = true;
    Ok(history)
}
