//! Analytic per-sample FLOP counts.
//!
//! Convention, shared with the tape's instrumented counter: a
//! multiply-accumulate is 2 FLOPs; each GELU, sigmoid, exp or divide is 1;
//! layer norm is 3 per element; additions, gathers and losses are free.
//! Scope labels match the ones the forward pass charges under.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clusterattn::cluster_hood_total;
use crate::config::{EncoderConfig, ROUNDS};
use crate::error::{Error, Result};
use crate::geometry::{COARSE_SIDE, FINEST_SIDE, NUM_LEVELS};
use crate::nn::Block;
use crate::stage1::AllocationTrace;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub by_scope: BTreeMap<String, u64>,
    pub total: u64,
    /// Sort comparisons spent on clustering; not part of `total`.
    pub comparisons: u64,
}

impl FlopsReport {
    pub fn from_scopes(by_scope: BTreeMap<String, u64>, comparisons: u64) -> Self {
        let by_scope: BTreeMap<String, u64> = by_scope.into_iter().filter(|(_, v)| *v > 0).collect();
        let total = by_scope.values().sum();
        FlopsReport { by_scope, total, comparisons }
    }

    /// Sum over scopes starting with `prefix` (e.g. `"stage1."`).
    pub fn part(&self, prefix: &str) -> u64 {
        self.by_scope.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v).sum()
    }
}

fn linear(n: usize, d_in: usize, d_out: usize) -> u64 {
    2 * (n * d_in * d_out) as u64
}

fn blocks(cfg: &EncoderConfig, count: usize, dim: usize, n: usize, hood_total: u64) -> u64 {
    count as u64 * Block::flops(dim, cfg.heads(dim), cfg.mlp_ratio, n as u64, hood_total)
}

/// Forward FLOPs of one sample whose final per-level token counts are `n`.
pub fn count_forward(cfg: &EncoderConfig, n: [usize; NUM_LEVELS]) -> FlopsReport {
    let d = cfg.stage1_dims;
    let s = cfg.stage2_dims;
    let cs = cfg.cluster_size;
    let mut m = BTreeMap::new();
    let live = |top: usize| n[..=top].iter().sum::<usize>();

    let patch = (COARSE_SIDE * COARSE_SIDE * 3) as usize;
    m.insert("stage1.embed".to_string(), linear(n[0], patch, d[0]));
    m.insert("stage1.pre_vit".to_string(), blocks(cfg, cfg.stage1_blocks[0], d[0], n[0], (n[0] * n[0]) as u64));
    for r in 1..=ROUNDS {
        let dim = d[r];
        let h = cfg.scorer_hidden[r - 1];
        m.insert(format!("stage1.round{r}.project"), linear(live(r - 1), d[r - 1], dim));
        m.insert(format!("stage1.round{r}.score"), n[r - 1] as u64 * (linear(1, dim, h) + h as u64 + linear(1, h, 1) + 1));
        if cfg.aux_image {
            let side = (COARSE_SIDE >> r) as usize;
            let per = linear(1, side * side * 3, dim) + linear(1, dim, dim) + dim as u64 + linear(1, dim, dim);
            m.insert(format!("stage1.round{r}.allocate"), n[r] as u64 * per);
        }
        let t = live(r);
        m.insert(format!("stage1.round{r}.attention"), blocks(cfg, cfg.stage1_blocks[r], dim, t, cluster_hood_total(t, cs)));
    }

    let cells = ((cfg.image_height / FINEST_SIDE) * (cfg.image_width / FINEST_SIDE)) as usize;
    let all = live(NUM_LEVELS - 1);
    if cfg.stage1_only {
        m.insert("stage1.final_attention".to_string(), blocks(cfg, 1, d[3], all, cluster_hood_total(all, cs)));
    } else {
        m.insert("stage2.round1.attention".to_string(), blocks(cfg, cfg.stage2_blocks[0], s[0], all, cluster_hood_total(all, cs)));
        for k in 2..=4 {
            let top = NUM_LEVELS - k;
            let t = live(top);
            let dim = s[k - 1];
            m.insert(format!("stage2.round{k}.project"), linear(t, s[k - 2], dim));
            m.insert(format!("stage2.round{k}.fuse"), linear(t, dim + d[top], dim));
            let hood = if k == 4 { (t * t) as u64 } else { cluster_hood_total(t, cs) };
            m.insert(format!("stage2.round{k}.attention"), blocks(cfg, cfg.stage2_blocks[k - 1], dim, t, hood));
        }
    }

    let dd = cfg.dense_dim();
    let densify: u64 = (0..NUM_LEVELS).filter(|&l| cfg.emit_dim(l) != dd).map(|l| linear(n[l], cfg.emit_dim(l), dd)).sum();
    m.insert("head.densify".to_string(), densify);
    m.insert("head.classifier".to_string(), linear(cells, dd, cfg.num_classes));
    FlopsReport::from_scopes(m, 0)
}

pub fn count_trace(cfg: &EncoderConfig, trace: &AllocationTrace) -> FlopsReport {
    count_forward(cfg, trace.counts())
}

/// Token counts of the dense policy at the configured image size.
pub fn dense_counts(cfg: &EncoderConfig) -> [usize; NUM_LEVELS] {
    std::array::from_fn(|l| {
        let side = COARSE_SIDE >> l;
        ((cfg.image_height / side) * (cfg.image_width / side)) as usize
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Population mean and standard deviation.
pub fn corpus_stats(values: &[f64]) -> Result<CorpusStats> {
    if values.is_empty() {
        return Err(Error::Input("corpus statistics of an empty corpus".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(CorpusStats { mean, std: var.sqrt(), count: values.len() })
}
