use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::scene::Scene;
use crate::model::Model;
use crate::rng::substream;
use crate::stage1::{ForwardOptions, Sample};
use crate::tensor::{Gradients, ParamStore, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the last step along a cosine curve.
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub head_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 2000, batch_size: 8, lr: 2e-3, lr_final: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0, head_weight: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub alloc_loss: f64,
    pub head_loss: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

/// Adam moments for every parameter.
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Adam { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let norm = store.ids().map(|id| grads.get(id).data().iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt();
        let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id).data();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let t = step as f64 / (self.steps - 1) as f64;
        self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Sorted scene indices of training batch `step`.
pub fn batch_indices(seed: u64, step: usize, corpus: usize, batch: usize) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(&mut substream(seed, step as u64), corpus, batch.min(corpus)).into_vec();
    idx.sort_unstable();
    idx
}

/// Trains the scorer MSE plus the weighted head cross-entropy with Adam.
/// `on_step` sees every step's log entry as it completes.
pub fn train(model: &mut Model, corpus: &[Scene], cfg: &TrainConfig, seed: u64, mut on_step: impl FnMut(&StepLog)) -> Result<TrainLog> {
    if corpus.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Input("training needs a non-empty corpus and batch".into()));
    }
    let mut adam = Adam::new(model.store());
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let idx = batch_indices(seed, step, corpus.len(), cfg.batch_size);
        let batch: Vec<Sample> =
            idx.iter().map(|&i| Sample { id: i as u64, image: &corpus[i].image, labels: Some(&corpus[i].labels) }).collect();
        let opts = ForwardOptions { batch_index: step as u64, head_weight: cfg.head_weight, ..ForwardOptions::default() };
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &batch, &opts)?;
        let loss = pass.loss.expect("labels supplied");
        let value = tape.value(loss).data()[0];
        let entry = StepLog {
            step,
            loss: value,
            alloc_loss: pass.alloc_loss.map_or(0.0, |v| tape.value(v).data()[0]),
            head_loss: pass.head_loss.map_or(0.0, |v| tape.value(v).data()[0]),
            tokens: pass.sets.iter().map(|s| s.len()).sum(),
        };
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let grads = tape.backward(loss, model.store())?;
        if !grads.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        adam.step(model.store_mut(), &grads, cfg, cfg.lr_at(step));
        on_step(&entry);
        log.steps.push(entry);
    }
    Ok(log)
}
