//! Stage 2: top-down refinement that emits one scale per round, then
//! densification of the finest available tokens onto the 4×4 cell grid.

use std::collections::HashMap;
use std::sync::Arc;

use crate::clusterattn::batch_neighborhoods;
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::{finest_cover, ScaleLevel, TokenKey, TokenSet, FINEST_SIDE, NUM_LEVELS};
use crate::nn::{Block, Init, Linear};
use crate::stage1::{BatchLayout, Stage1Output};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

/// Concatenates `lateral` onto `current` feature-wise and maps back with
/// `fuse`. Rows must carry identical keys.
pub fn lateral_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    fuse: &Linear,
    current: Var,
    current_keys: &[Option<TokenKey>],
    lateral: Var,
    lateral_keys: &[Option<TokenKey>],
) -> Result<Var> {
    if current_keys != lateral_keys {
        let at = current_keys.iter().zip(lateral_keys).position(|(a, b)| a != b).unwrap_or(current_keys.len().min(lateral_keys.len()));
        return Err(Error::Contract(format!("lateral keys diverge from current tokens at row {at}")));
    }
    let both = tape.concat_cols(current, lateral)?;
    fuse.forward(tape, store, both)
}

#[derive(Clone, Debug)]
pub struct RefineRound {
    pub proj: Linear,
    pub fuse: Linear,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Stage2Params {
    pub first: Vec<Block>,
    /// Rounds 2, 3 and 4.
    pub rounds: Vec<RefineRound>,
}

impl Stage2Params {
    pub fn new(init: &mut Init, cfg: &EncoderConfig) -> Self {
        let s = cfg.stage2_dims;
        let d = cfg.stage1_dims;
        let first = (0..cfg.stage2_blocks[0])
            .map(|i| Block::new(init, &format!("s2.r1.block{i}"), s[0], cfg.heads(s[0]), cfg.mlp_ratio, Some(NUM_LEVELS)))
            .collect();
        let rounds = (2..=4)
            .map(|k| {
                let dim = s[k - 1];
                let lateral = d[4 - k];
                let key_levels = (k < 4).then_some(NUM_LEVELS);
                RefineRound {
                    proj: Linear::new(init, &format!("s2.r{k}.proj"), s[k - 2], dim),
                    fuse: Linear::new(init, &format!("s2.r{k}.fuse"), dim + lateral, dim),
                    blocks: (0..cfg.stage2_blocks[k - 1])
                        .map(|i| Block::new(init, &format!("s2.r{k}.block{i}"), dim, cfg.heads(dim), cfg.mlp_ratio, key_levels))
                        .collect(),
                }
            })
            .collect();
        Stage2Params { first, rounds }
    }
}

/// Emitted features, one block per level in the batch layout's level order.
pub struct Emitted {
    pub levels: [Var; NUM_LEVELS],
}

fn rows_of(layout: &BatchLayout, level: usize) -> Vec<usize> {
    layout.block(level).collect()
}

pub fn run_stage2(tape: &mut Tape, store: &ParamStore, p: &Stage2Params, cfg: &EncoderConfig, s1: &Stage1Output) -> Result<(Emitted, Vec<u64>)> {
    let layout = &s1.layout;
    let sets = &s1.sets;
    let mut comparisons = vec![0u64; sets.len()];
    let mut tally = |c: Vec<u64>| {
        for (a, b) in comparisons.iter_mut().zip(c) {
            *a += b;
        }
    };
    let mut x = s1.tokens;
    let mut emitted: [Option<Var>; NUM_LEVELS] = [None; NUM_LEVELS];

    tape.set_scope("stage2.round1.attention");
    let top = NUM_LEVELS - 1;
    if !p.first.is_empty() {
        let (hood, c) = batch_neighborhoods(layout.offset(top + 1), &layout.samples(sets, top), Some(cfg.cluster_size))?;
        tally(c);
        let hood = Arc::new(hood);
        let levels = layout.levels(top);
        for blk in &p.first {
            x = blk.forward(tape, store, x, &hood, Some(&levels))?;
        }
    }
    emitted[top] = Some(tape.gather_rows(x, rows_of(layout, top))?);

    for (i, round) in p.rounds.iter().enumerate() {
        let k = i + 2;
        let top = NUM_LEVELS - k;
        x = tape.gather_rows(x, (0..layout.offset(top + 1)).collect::<Vec<_>>())?;

        tape.set_scope(format!("stage2.round{k}.project"));
        x = round.proj.forward(tape, store, x)?;

        tape.set_scope(format!("stage2.round{k}.fuse"));
        let keys = layout.row_keys(sets, top);
        x = lateral_fuse(tape, store, &round.fuse, x, &keys, s1.laterals[top], &s1.lateral_keys[top])?;

        if !round.blocks.is_empty() {
            tape.set_scope(format!("stage2.round{k}.attention"));
            let global = k == 4;
            let (hood, c) = batch_neighborhoods(layout.offset(top + 1), &layout.samples(sets, top), (!global).then_some(cfg.cluster_size))?;
            tally(c);
            let hood = Arc::new(hood);
            let levels = (!global).then(|| layout.levels(top));
            for blk in &round.blocks {
                x = blk.forward(tape, store, x, &hood, levels.as_ref())?;
            }
        }
        emitted[top] = Some(tape.gather_rows(x, rows_of(layout, top))?);
    }
    let levels = emitted.map(|e| e.expect("every level emitted"));
    Ok((Emitted { levels }, comparisons))
}

/// Emission without Stage 2: every level taken straight from Stage 1.
pub fn emit_stage1(tape: &mut Tape, s1: &Stage1Output) -> Result<Emitted> {
    let mut levels = Vec::with_capacity(NUM_LEVELS);
    for l in 0..NUM_LEVELS {
        levels.push(tape.gather_rows(s1.tokens, rows_of(&s1.layout, l))?);
    }
    Ok(Emitted { levels: levels.try_into().expect("four levels") })
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    /// Per-level map to the dense width; `None` where widths already agree.
    pub level_proj: Vec<Option<Linear>>,
    pub cell_pos: ParamId,
    pub classifier: Linear,
}

impl HeadParams {
    pub fn new(init: &mut Init, cfg: &EncoderConfig) -> Self {
        let dd = cfg.dense_dim();
        let cells = ((cfg.image_height / FINEST_SIDE) * (cfg.image_width / FINEST_SIDE)) as usize;
        let level_proj = (0..NUM_LEVELS)
            .map(|l| (cfg.emit_dim(l) != dd).then(|| Linear::new(init, &format!("head.level{l}"), cfg.emit_dim(l), dd)))
            .collect();
        HeadParams {
            level_proj,
            cell_pos: init.normal("head.cell_pos", &[cells, dd], 0.02),
            classifier: Linear::new(init, "head.classifier", dd, cfg.num_classes),
        }
    }
}

/// Row of each sample's cells in the concatenated emitted blocks, row-major
/// over the cell grid.
pub fn densify_rows(layout: &BatchLayout, sets: &[TokenSet]) -> Result<Vec<usize>> {
    let mut rows = Vec::new();
    for (b, set) in sets.iter().enumerate() {
        let index: HashMap<TokenKey, usize> = (0..NUM_LEVELS)
            .flat_map(|l| set.level(ScaleLevel::new(l as u8).expect("level < 4")).iter().enumerate().map(|(i, &k)| (k, i)))
            .collect();
        let cover = finest_cover(set)?;
        for key in cover.cells() {
            rows.push(layout.row(b, key.level.index(), index[key]));
        }
    }
    Ok(rows)
}

/// Dense per-cell features: the finest covering token's (projected) feature
/// plus a learned embedding per cell.
pub fn densify_finest(
    tape: &mut Tape,
    store: &ParamStore,
    p: &HeadParams,
    emitted: &Emitted,
    layout: &BatchLayout,
    sets: &[TokenSet],
) -> Result<Var> {
    tape.set_scope("head.densify");
    let mut parts = Vec::with_capacity(NUM_LEVELS);
    for (l, &e) in emitted.levels.iter().enumerate() {
        parts.push(match &p.level_proj[l] {
            Some(lin) => lin.forward(tape, store, e)?,
            None => e,
        });
    }
    let all = tape.concat_rows(&parts)?;
    let rows = densify_rows(layout, sets)?;
    let cells = rows.len() / sets.len().max(1);
    let grid = tape.gather_rows(all, rows)?;
    let table = tape.param(store, p.cell_pos);
    let pos = tape.gather_rows(table, (0..sets.len()).flat_map(|_| 0..cells).collect::<Vec<_>>())?;
    tape.add(grid, pos)
}
