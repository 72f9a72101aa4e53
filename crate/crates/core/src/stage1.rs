//! Stage 1: coarse embedding, pre-allocation transformer and three
//! score → select → split rounds.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boundary::{boundary_map, BoundaryCounts, LabelMap};
use crate::clusterattn::batch_neighborhoods;
use crate::config::{EncoderConfig, Policy, ROUNDS};
use crate::error::{Error, Result};
use crate::geometry::{coarse_grid, ScaleLevel, TokenKey, TokenSet, COARSE_SIDE, NUM_LEVELS};
use crate::image::Image;
use crate::nn::{Block, Init, Linear, Mlp};
use crate::rng::substream;
use crate::tensor::{ParamId, ParamStore, RowOwners, Tape, Tensor, Var};

/// Indices with `score > tau`, ascending.
pub fn select(scores: &[f64], tau: f64) -> Vec<usize> {
    scores.iter().enumerate().filter(|(_, &s)| s > tau).map(|(i, _)| i).collect()
}

/// `round(ratio · n)` distinct indices drawn uniformly, ascending.
pub fn select_random(rng: &mut impl Rng, n: usize, ratio: f64) -> Vec<usize> {
    let k = ((ratio * n as f64).round() as usize).min(n);
    let mut idx = rand::seq::index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Whether batch `batch_index` thresholds ground-truth scores.
pub fn oracle_mix_gate(rate: f64, seed: u64, batch_index: u64) -> bool {
    substream(seed, batch_index).gen::<f64>() < rate
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub threshold: f64,
    /// Frontier size N_r.
    pub candidates: usize,
    /// Predicted scores c_i, one per frontier token.
    pub scores: Vec<f64>,
    /// Ground-truth boundary fractions, when labels were supplied.
    pub targets: Option<Vec<f64>>,
    /// Frontier indices that were split, ascending.
    pub selected: Vec<usize>,
    pub used_oracle: bool,
}

impl RoundTrace {
    pub fn k(&self) -> usize {
        self.selected.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AllocationTrace {
    pub rounds: Vec<RoundTrace>,
}

impl AllocationTrace {
    /// Final token counts per level implied by the trace.
    pub fn counts(&self) -> [usize; NUM_LEVELS] {
        let mut c = [0; NUM_LEVELS];
        if let Some(first) = self.rounds.first() {
            c[0] = first.candidates;
        }
        for (r, t) in self.rounds.iter().enumerate() {
            c[r + 1] = 4 * t.k();
        }
        c
    }

    pub fn selections(&self) -> [Vec<usize>; ROUNDS] {
        let mut s: [Vec<usize>; ROUNDS] = Default::default();
        for (r, t) in self.rounds.iter().enumerate() {
            s[r] = t.selected.clone();
        }
        s
    }
}

/// Row placement of a padded batch: level blocks in order, each holding
/// `batch × padded[level]` rows, sample-major inside a block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchLayout {
    pub batch: usize,
    pub padded: [usize; NUM_LEVELS],
}

impl BatchLayout {
    pub fn offset(&self, level: usize) -> usize {
        (0..level).map(|l| self.batch * self.padded[l]).sum()
    }

    pub fn block(&self, level: usize) -> Range<usize> {
        self.offset(level)..self.offset(level + 1)
    }

    pub fn row(&self, sample: usize, level: usize, i: usize) -> usize {
        self.offset(level) + sample * self.padded[level] + i
    }

    /// Row keys for levels `0..=top`; `None` marks padding.
    pub fn row_keys(&self, sets: &[TokenSet], top: usize) -> Vec<Option<TokenKey>> {
        let mut keys = Vec::with_capacity(self.offset(top + 1));
        for level in 0..=top {
            for set in sets {
                let live = set.level(ScaleLevel::new(level as u8).expect("level < 4"));
                keys.extend(live.iter().map(|&k| Some(k)));
                keys.extend(std::iter::repeat(None).take(self.padded[level] - live.len()));
            }
        }
        keys
    }

    pub fn owners(&self, sets: &[TokenSet], top: usize) -> RowOwners {
        let mut owners = Vec::with_capacity(self.offset(top + 1));
        for level in 0..=top {
            for (b, set) in sets.iter().enumerate() {
                let n = set.level(ScaleLevel::new(level as u8).expect("level < 4")).len();
                owners.extend(std::iter::repeat(Some(b as u32)).take(n));
                owners.extend(std::iter::repeat(None).take(self.padded[level] - n));
            }
        }
        owners.into()
    }

    /// Per-sample `(row, key)` lists over levels `0..=top`.
    pub fn samples(&self, sets: &[TokenSet], top: usize) -> Vec<Vec<(usize, TokenKey)>> {
        sets.iter()
            .enumerate()
            .map(|(b, set)| {
                (0..=top)
                    .flat_map(|level| {
                        let live = set.level(ScaleLevel::new(level as u8).expect("level < 4"));
                        live.iter().enumerate().map(move |(i, &k)| (self.row(b, level, i), k))
                    })
                    .collect()
            })
            .collect()
    }

    /// Scale level of every row over levels `0..=top`, padding included.
    pub fn levels(&self, top: usize) -> Arc<[usize]> {
        (0..=top).flat_map(|l| std::iter::repeat(l).take(self.batch * self.padded[l])).collect()
    }
}

/// Pads every level to the batch maximum; masks are `true` for live rows.
pub fn pad_and_mask(sets: &[TokenSet]) -> (BatchLayout, [Vec<bool>; NUM_LEVELS]) {
    let mut padded = [0; NUM_LEVELS];
    for (l, p) in padded.iter_mut().enumerate() {
        *p = sets.iter().map(|s| s.counts()[l]).max().unwrap_or(0);
    }
    let layout = BatchLayout { batch: sets.len(), padded };
    let masks = std::array::from_fn(|l| {
        sets.iter().flat_map(|s| (0..padded[l]).map(move |i| i < s.counts()[l])).collect()
    });
    (layout, masks)
}

#[derive(Clone, Debug)]
pub struct RoundParams {
    pub proj: Linear,
    pub scorer: Mlp,
    pub aux_embed: Option<(Linear, Mlp)>,
    pub scale_emb: ParamId,
    pub slot_emb: ParamId,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Stage1Params {
    pub embed: Linear,
    pub pos: ParamId,
    pub pre_vit: Vec<Block>,
    pub rounds: Vec<RoundParams>,
    pub final_block: Option<Block>,
}

impl Stage1Params {
    pub fn new(init: &mut Init, cfg: &EncoderConfig) -> Self {
        let d = cfg.stage1_dims;
        let n0 = ((cfg.image_height / COARSE_SIDE) * (cfg.image_width / COARSE_SIDE)) as usize;
        let patch = (COARSE_SIDE * COARSE_SIDE * 3) as usize;
        let embed = Linear::new(init, "s1.embed", patch, d[0]);
        let pos = init.normal("s1.pos", &[n0, d[0]], 0.02);
        let pre_vit = (0..cfg.stage1_blocks[0])
            .map(|i| Block::new(init, &format!("s1.pre_vit{i}"), d[0], cfg.heads(d[0]), cfg.mlp_ratio, None))
            .collect();
        let rounds = (1..=ROUNDS)
            .map(|r| {
                let dim = d[r];
                let side = (COARSE_SIDE >> r) as usize;
                RoundParams {
                    proj: Linear::new(init, &format!("s1.r{r}.proj"), d[r - 1], dim),
                    scorer: Mlp::new(init, &format!("s1.r{r}.scorer"), dim, cfg.scorer_hidden[r - 1], 1),
                    aux_embed: cfg.aux_image.then(|| {
                        (
                            Linear::new(init, &format!("s1.r{r}.aux"), side * side * 3, dim),
                            Mlp::new(init, &format!("s1.r{r}.aux_mlp"), dim, dim, dim),
                        )
                    }),
                    scale_emb: init.normal(&format!("s1.r{r}.scale"), &[dim], 0.02),
                    slot_emb: init.normal(&format!("s1.r{r}.slot"), &[4, dim], 0.02),
                    blocks: (0..cfg.stage1_blocks[r])
                        .map(|i| Block::new(init, &format!("s1.r{r}.block{i}"), dim, cfg.heads(dim), cfg.mlp_ratio, Some(NUM_LEVELS)))
                        .collect(),
                }
            })
            .collect();
        let final_block = cfg
            .stage1_only
            .then(|| Block::new(init, "s1.final", d[3], cfg.heads(d[3]), cfg.mlp_ratio, Some(NUM_LEVELS)));
        Stage1Params { embed, pos, pre_vit, rounds, final_block }
    }
}

/// One sample of a forward batch.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    /// Stable identifier; keys the per-sample random streams.
    pub id: u64,
    pub image: &'a Image,
    pub labels: Option<&'a LabelMap>,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    /// Index of the batch within training; keys the oracle-mix gate.
    pub batch_index: u64,
    pub policy: Option<Policy>,
    pub thresholds: Option<[f64; ROUNDS]>,
    /// Per-sample selections that replace the policy.
    pub forced: Option<Vec<[Vec<usize>; ROUNDS]>>,
    /// Pixel value fed to padded child rows.
    pub pad_fill: f64,
    /// Weight of the segmentation-head loss in the total.
    pub head_weight: f64,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { batch_index: 0, policy: None, thresholds: None, forced: None, pad_fill: 0.0, head_weight: 1.0 }
    }
}

pub struct Stage1Output {
    pub sets: Vec<TokenSet>,
    pub traces: Vec<AllocationTrace>,
    pub layout: BatchLayout,
    /// All tokens at the last Stage-1 width.
    pub tokens: Var,
    /// Outputs after the pre-allocation transformer and after rounds 1 and 2;
    /// lateral `l` covers levels `0..=l`.
    pub laterals: [Var; ROUNDS],
    /// Row keys of each lateral as recorded when it was taken.
    pub lateral_keys: [Vec<Option<TokenKey>>; ROUNDS],
    /// Pooled scorer MSE over all rounds' live frontier tokens.
    pub alloc_loss: Option<Var>,
    pub comparisons: Vec<u64>,
}

fn check_inputs(cfg: &EncoderConfig, batch: &[Sample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    for s in batch {
        if s.image.height() != cfg.image_height || s.image.width() != cfg.image_width {
            return Err(Error::Input(format!(
                "image {}×{} does not match configured {}×{}",
                s.image.height(),
                s.image.width(),
                cfg.image_height,
                cfg.image_width
            )));
        }
        if let Some(l) = s.labels {
            if l.height() != cfg.image_height || l.width() != cfg.image_width {
                return Err(Error::Input("label map does not match its image".into()));
            }
        }
    }
    Ok(())
}

pub fn run_stage1(
    tape: &mut Tape,
    store: &ParamStore,
    p: &Stage1Params,
    cfg: &EncoderConfig,
    batch: &[Sample],
    opts: &ForwardOptions,
) -> Result<Stage1Output> {
    check_inputs(cfg, batch)?;
    let policy = opts.policy.as_ref().unwrap_or(&cfg.policy);
    let thresholds = opts.thresholds.unwrap_or(cfg.thresholds);
    if let Some(f) = &opts.forced {
        if f.len() != batch.len() {
            return Err(Error::Input(format!("{} forced selections for {} samples", f.len(), batch.len())));
        }
    }
    let bsz = batch.len();
    let mut sets: Vec<TokenSet> = (0..bsz).map(|_| coarse_grid(cfg.image_height, cfg.image_width)).collect::<Result<_>>()?;
    let n0 = sets[0].counts()[0];
    let mut layout = BatchLayout { batch: bsz, padded: [n0, 0, 0, 0] };
    let mut comparisons = vec![0u64; bsz];
    let mut add_comparisons = |c: Vec<u64>| {
        for (a, b) in comparisons.iter_mut().zip(c) {
            *a += b;
        }
    };

    tape.set_scope("stage1.embed");
    let mut pix = Vec::with_capacity(bsz * n0 * (COARSE_SIDE * COARSE_SIDE * 3) as usize);
    for (s, set) in batch.iter().zip(&sets) {
        for k in set.level(ScaleLevel::COARSEST) {
            s.image.patch_into(k.rect(), &mut pix);
        }
    }
    let pix = Tensor::from_parts(bsz * n0, (COARSE_SIDE * COARSE_SIDE * 3) as usize, pix);
    let xin = tape.constant_rows(pix, layout.owners(&sets, 0))?;
    let mut x = p.embed.forward(tape, store, xin)?;
    let pos_table = tape.param(store, p.pos);
    let pos = tape.gather_rows(pos_table, (0..bsz).flat_map(|_| 0..n0).collect::<Vec<_>>())?;
    x = tape.add(x, pos)?;

    tape.set_scope("stage1.pre_vit");
    if !p.pre_vit.is_empty() {
        let (hood, c) = batch_neighborhoods(layout.offset(1), &layout.samples(&sets, 0), None)?;
        add_comparisons(c);
        let hood = Arc::new(hood);
        for blk in &p.pre_vit {
            x = blk.forward(tape, store, x, &hood, None)?;
        }
    }
    let mut laterals = [x; ROUNDS];
    let mut lateral_keys: [Vec<Option<TokenKey>>; ROUNDS] = Default::default();
    lateral_keys[0] = layout.row_keys(&sets, 0);

    let counts: Vec<Option<BoundaryCounts>> =
        batch.iter().map(|s| s.labels.map(|l| BoundaryCounts::new(&boundary_map(l, cfg.connectivity)))).collect();
    let use_oracle = match policy {
        Policy::OracleMix { rate, seed } => oracle_mix_gate(*rate, *seed, opts.batch_index),
        _ => false,
    };
    if use_oracle && counts.iter().any(Option::is_none) {
        return Err(Error::Input("oracle_mix selection needs label maps".into()));
    }
    let mut ratio_rngs: Vec<_> = match policy {
        Policy::RandomRatio { seed, .. } => batch.iter().map(|s| Some(substream(*seed, s.id))).collect(),
        _ => vec![None; bsz],
    };

    let mut traces = vec![AllocationTrace::default(); bsz];
    let mut score_vars = Vec::with_capacity(ROUNDS);
    let (mut mse_targets, mut mse_mask) = (Vec::new(), Vec::new());
    let have_labels = counts.iter().all(Option::is_some);

    for r in 1..=ROUNDS {
        let rp = &p.rounds[r - 1];
        let front = r - 1;
        let dim = cfg.stage1_dims[r];

        tape.set_scope(format!("stage1.round{r}.project"));
        x = rp.proj.forward(tape, store, x)?;

        tape.set_scope(format!("stage1.round{r}.score"));
        let fr = tape.gather_rows(x, layout.block(front).collect::<Vec<_>>())?;
        let logits = rp.scorer.forward(tape, store, fr)?;
        let scores = tape.sigmoid(logits);
        score_vars.push(scores);

        let m = layout.padded[front];
        let mut children_keys: Vec<Vec<TokenKey>> = Vec::with_capacity(bsz);
        let mut children_parents: Vec<Vec<usize>> = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let frontier = sets[b].frontier().to_vec();
            let n = frontier.len();
            let sc = tape.value(scores).data()[b * m..b * m + n].to_vec();
            let targets = counts[b].as_ref().map(|c| frontier.iter().map(|k| c.score(k)).collect::<Result<Vec<f64>>>()).transpose()?;
            if have_labels {
                let t = targets.as_ref().expect("labels present");
                mse_targets.extend_from_slice(t);
                mse_targets.extend(std::iter::repeat(0.0).take(m - n));
                mse_mask.extend(std::iter::repeat(true).take(n));
                mse_mask.extend(std::iter::repeat(false).take(m - n));
            }
            let tau = thresholds[r - 1];
            let selected = if let Some(forced) = &opts.forced {
                let f = forced[b][r - 1].clone();
                if f.windows(2).any(|w| w[0] >= w[1]) || f.last().is_some_and(|&i| i >= n) {
                    return Err(Error::Input(format!("forced selection for sample {b} round {r} is not ascending within 0..{n}")));
                }
                f
            } else {
                match policy {
                    Policy::Adaptive => select(&sc, tau),
                    Policy::Dense => (0..n).collect(),
                    Policy::RandomRatio { ratios, .. } => {
                        select_random(ratio_rngs[b].as_mut().expect("rng per sample"), n, ratios[r - 1])
                    }
                    Policy::OracleMix { .. } if use_oracle => select(targets.as_ref().expect("labels checked"), tau),
                    Policy::OracleMix { .. } => select(&sc, tau),
                }
            };
            let parents: Vec<TokenKey> = selected.iter().map(|&i| frontier[i]).collect();
            let kids = sets[b].allocate(&parents)?;
            children_parents.push(selected.iter().flat_map(|&i| [i; 4]).collect());
            children_keys.push(kids);
            traces[b].rounds.push(RoundTrace {
                round: r,
                threshold: tau,
                candidates: n,
                scores: sc,
                targets,
                used_oracle: use_oracle && opts.forced.is_none(),
                selected,
            });
        }

        tape.set_scope(format!("stage1.round{r}.allocate"));
        let mc = children_keys.iter().map(Vec::len).max().unwrap_or(0);
        layout.padded[r] = mc;
        let side = COARSE_SIDE >> r;
        let patch_len = (side * side * 3) as usize;
        let mut parent_rows = Vec::with_capacity(bsz * mc);
        let mut slots = Vec::with_capacity(bsz * mc);
        let mut pix = Vec::with_capacity(bsz * mc * patch_len);
        for b in 0..bsz {
            for (key, &parent) in children_keys[b].iter().zip(&children_parents[b]) {
                parent_rows.push(layout.row(b, front, parent));
                slots.push(key.slot());
                batch[b].image.patch_into(key.rect(), &mut pix);
            }
            for _ in children_keys[b].len()..mc {
                parent_rows.push(0);
                slots.push(0);
                pix.extend(std::iter::repeat(opts.pad_fill).take(patch_len));
            }
        }
        let owners = {
            let mut o = Vec::with_capacity(bsz * mc);
            for (b, kids) in children_keys.iter().enumerate() {
                o.extend(std::iter::repeat(Some(b as u32)).take(kids.len()));
                o.extend(std::iter::repeat(None).take(mc - kids.len()));
            }
            RowOwners::from(o)
        };
        let mut child = match &rp.aux_embed {
            Some((lin, mlp)) => {
                let c = tape.constant_rows(Tensor::from_parts(bsz * mc, patch_len, pix), owners)?;
                let e = lin.forward(tape, store, c)?;
                mlp.forward(tape, store, e)?
            }
            None => tape.constant_rows(Tensor::zeros(&[bsz * mc, dim]), owners)?,
        };
        if cfg.feature_residual {
            let par = tape.gather_rows(x, parent_rows)?;
            child = tape.add(child, par)?;
        }
        let scale = tape.param(store, rp.scale_emb);
        child = tape.add_row(child, scale)?;
        let slot_table = tape.param(store, rp.slot_emb);
        let slot = tape.gather_rows(slot_table, slots)?;
        child = tape.add(child, slot)?;
        x = tape.concat_rows(&[x, child])?;

        if !rp.blocks.is_empty() {
            tape.set_scope(format!("stage1.round{r}.attention"));
            let (hood, c) = batch_neighborhoods(layout.offset(r + 1), &layout.samples(&sets, r), Some(cfg.cluster_size))?;
            add_comparisons(c);
            let hood = Arc::new(hood);
            let levels = layout.levels(r);
            for blk in &rp.blocks {
                x = blk.forward(tape, store, x, &hood, Some(&levels))?;
            }
        }
        if r < ROUNDS {
            laterals[r] = x;
            lateral_keys[r] = layout.row_keys(&sets, r);
        }
    }

    if let Some(blk) = &p.final_block {
        tape.set_scope("stage1.final_attention");
        let top = NUM_LEVELS - 1;
        let (hood, c) = batch_neighborhoods(layout.offset(top + 1), &layout.samples(&sets, top), Some(cfg.cluster_size))?;
        add_comparisons(c);
        x = blk.forward(tape, store, x, &Arc::new(hood), Some(&layout.levels(top)))?;
    }

    let alloc_loss = if have_labels {
        tape.set_scope("loss");
        let all = tape.concat_rows(&score_vars)?;
        Some(tape.masked_mse(all, mse_targets, mse_mask)?)
    } else {
        None
    };

    Ok(Stage1Output { sets, traces, layout, tokens: x, laterals, lateral_keys, alloc_loss, comparisons })
}
