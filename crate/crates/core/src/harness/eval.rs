use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boundary::IGNORE;
use crate::config::{Policy, ROUNDS};
use crate::error::{Error, Result};
use crate::flops::{corpus_stats, count_trace, CorpusStats, FlopsReport};
use crate::geometry::{FINEST_SIDE, NUM_LEVELS};
use crate::harness::scene::Scene;
use crate::model::Model;
use crate::stage1::{AllocationTrace, ForwardOptions, Sample};
use crate::tensor::Tape;

/// Area under the ROC curve of `positives` against `negatives`; ties count
/// one half. `None` when either side is empty.
pub fn auc(positives: &[f64], negatives: &[f64]) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> =
        positives.iter().map(|&s| (s, true)).chain(negatives.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney U from average ranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (p, n) = (positives.len() as f64, negatives.len() as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Pixel confusion counts, rows = ground truth, cols = prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, truth: u16, pred: u16) {
        if truth != IGNORE && (truth as usize) < self.classes {
            self.counts[truth as usize * self.classes + pred as usize] += 1;
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Per-class accuracy; `None` for classes absent from the ground truth.
    pub fn class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let total: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                (total > 0).then(|| self.get(c, c) as f64 / total as f64)
            })
            .collect()
    }

    /// Per-class IoU; `None` where the class is neither present nor predicted.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let truth: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                let pred: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
                let union = truth + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU in percent over classes with a defined IoU.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            0.0
        } else {
            100.0 * ious.iter().sum::<f64>() / ious.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let right: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        if total == 0 {
            0.0
        } else {
            right as f64 / total as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub policy: Policy,
    pub thresholds: [f64; ROUNDS],
    pub batch_size: usize,
}

impl EvalOptions {
    /// Evaluation settings of `model`; oracle mixing applies to training
    /// only, so it evaluates as the adaptive policy.
    pub fn for_model(model: &Model) -> Self {
        let cfg = model.config();
        let policy = match cfg.policy {
            Policy::OracleMix { .. } => Policy::Adaptive,
            ref p => p.clone(),
        };
        EvalOptions { policy, thresholds: cfg.thresholds, batch_size: 8 }
    }
}

/// Everything measured for one scene.
#[derive(Clone, Debug)]
pub struct SceneResult {
    pub index: usize,
    pub uniform: bool,
    pub trace: AllocationTrace,
    pub counts: [usize; NUM_LEVELS],
    pub flops: FlopsReport,
    /// FLOPs charged by the tape to this scene's rows.
    pub instrumented: FlopsReport,
    /// Predicted class per finest cell, row-major.
    pub cell_predictions: Vec<u16>,
}

impl SceneResult {
    /// Tokens beyond the coarse grid.
    pub fn extra_tokens(&self) -> usize {
        self.counts[1..].iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub scenes: usize,
    pub uniform_scenes: usize,
    /// Pooled scorer MSE over all rounds' frontier tokens.
    pub allocator_mse: f64,
    /// Scorer ranking of boundary-containing against boundary-free tokens.
    pub boundary_auc: Option<f64>,
    pub pixel_accuracy: f64,
    pub class_accuracy: Vec<Option<f64>>,
    pub miou: f64,
    pub flops: CorpusStats,
    /// Mean FLOPs per scope.
    pub flops_by_scope: BTreeMap<String, f64>,
    /// Per level, token count → number of scenes.
    pub token_histograms: Vec<BTreeMap<usize, usize>>,
    /// Tokens beyond the coarse grid summed over uniform scenes.
    pub uniform_extra_tokens: usize,
    /// Whether instrumented and analytic FLOPs agreed on every scene.
    pub flops_match: bool,
}

pub struct Evaluation {
    pub metrics: Metrics,
    pub scenes: Vec<SceneResult>,
}

fn eval_batch(model: &Model, corpus: &[Scene], start: usize, opts: &EvalOptions) -> Result<Vec<(SceneResult, Vec<(f64, f64)>)>> {
    let end = (start + opts.batch_size).min(corpus.len());
    let batch: Vec<Sample> = (start..end)
        .map(|i| Sample { id: i as u64, image: &corpus[i].image, labels: Some(&corpus[i].labels) })
        .collect();
    let fopts = ForwardOptions {
        batch_index: (start / opts.batch_size) as u64,
        policy: Some(opts.policy.clone()),
        thresholds: Some(opts.thresholds),
        ..ForwardOptions::default()
    };
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &batch, &fopts)?;
    let mut out = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        let trace = pass.traces[b].clone();
        let pairs = trace
            .rounds
            .iter()
            .flat_map(|r| r.scores.iter().copied().zip(r.targets.clone().expect("labels supplied")))
            .collect();
        let by_scope = tape.counter().by_scope(Some(b as u32));
        let instrumented = FlopsReport::from_scopes(by_scope, pass.comparisons[b]);
        let analytic = count_trace(model.config(), &trace);
        out.push((
            SceneResult {
                index: start + b,
                uniform: corpus[start + b].is_uniform(),
                counts: pass.sets[b].counts(),
                flops: FlopsReport { comparisons: instrumented.comparisons, ..analytic },
                instrumented,
                cell_predictions: pass.predictions(&tape, b),
                trace,
            },
            pairs,
        ));
    }
    Ok(out)
}

/// Runs `model` over `corpus` and aggregates the metrics. Results do not
/// depend on the batch split or on worker count.
pub fn evaluate(model: &Model, corpus: &[Scene], opts: &EvalOptions) -> Result<Evaluation> {
    if corpus.is_empty() || opts.batch_size == 0 {
        return Err(Error::Input("evaluation needs a non-empty corpus and batch".into()));
    }
    let starts: Vec<usize> = (0..corpus.len()).step_by(opts.batch_size).collect();
    #[cfg(feature = "parallel")]
    let batches: Vec<_> = {
        use rayon::prelude::*;
        starts.par_iter().map(|&s| eval_batch(model, corpus, s, opts)).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let batches: Vec<_> = starts.iter().map(|&s| eval_batch(model, corpus, s, opts)).collect::<Result<_>>()?;

    let cfg = model.config();
    let mut scenes = Vec::with_capacity(corpus.len());
    let (mut sq, mut n) = (0.0, 0usize);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    let mut confusion = Confusion::new(cfg.num_classes);
    let mut flops_match = true;
    let mut by_scope: BTreeMap<String, f64> = BTreeMap::new();
    let mut histograms = vec![BTreeMap::new(); NUM_LEVELS];
    for (res, pairs) in batches.into_iter().flatten() {
        for (s, t) in pairs {
            sq += (s - t) * (s - t);
            n += 1;
            if t > 0.0 {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        let scene = &corpus[res.index];
        let cw = cfg.image_width / FINEST_SIDE;
        for y in 0..cfg.image_height {
            for x in 0..cfg.image_width {
                let cell = ((y / FINEST_SIDE) * cw + x / FINEST_SIDE) as usize;
                confusion.add(scene.labels.get(y, x), res.cell_predictions[cell]);
            }
        }
        flops_match &= res.instrumented.by_scope == res.flops.by_scope;
        for (k, v) in &res.flops.by_scope {
            *by_scope.entry(k.clone()).or_default() += *v as f64;
        }
        for (l, h) in histograms.iter_mut().enumerate() {
            *h.entry(res.counts[l]).or_default() += 1;
        }
        scenes.push(res);
    }
    let count = scenes.len() as f64;
    by_scope.values_mut().for_each(|v| *v /= count);
    let totals: Vec<f64> = scenes.iter().map(|s| s.flops.total as f64).collect();
    let metrics = Metrics {
        scenes: scenes.len(),
        uniform_scenes: scenes.iter().filter(|s| s.uniform).count(),
        allocator_mse: if n == 0 { 0.0 } else { sq / n as f64 },
        boundary_auc: auc(&pos, &neg),
        pixel_accuracy: confusion.pixel_accuracy(),
        class_accuracy: confusion.class_accuracy(),
        miou: confusion.miou(),
        flops: corpus_stats(&totals)?,
        flops_by_scope: by_scope,
        token_histograms: histograms,
        uniform_extra_tokens: scenes.iter().filter(|s| s.uniform).map(SceneResult::extra_tokens).sum(),
        flops_match,
    };
    Ok(Evaluation { metrics, scenes })
}
