//! Quadtree bookkeeping for mixed-resolution tokens.
//!
//! Level 0 tokens are 32×32 pixel patches; each level halves the side, down to
//! 4×4 at level 3. A token at level ℓ ≥ 1 always has its parent at ℓ−1, and
//! children are allocated four at a time. Tokens at different levels overlap;
//! tokens at the same level never do.

use std::cell::Cell;
use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_LEVELS: usize = 4;
pub const COARSE_SIDE: u32 = 32;
pub const FINEST_SIDE: u32 = COARSE_SIDE >> (NUM_LEVELS - 1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ScaleLevel(u8);

impl ScaleLevel {
    pub const COARSEST: ScaleLevel = ScaleLevel(0);
    pub const FINEST: ScaleLevel = ScaleLevel(NUM_LEVELS as u8 - 1);

    pub fn new(level: u8) -> Result<Self> {
        if (level as usize) < NUM_LEVELS {
            Ok(ScaleLevel(level))
        } else {
            Err(Error::Input(format!("scale level {level} outside 0..{NUM_LEVELS}")))
        }
    }

    pub fn all() -> impl Iterator<Item = ScaleLevel> {
        (0..NUM_LEVELS as u8).map(ScaleLevel)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn patch_side(self) -> u32 {
        COARSE_SIDE >> self.0
    }

    pub fn finer(self) -> Option<ScaleLevel> {
        (self != Self::FINEST).then(|| ScaleLevel(self.0 + 1))
    }

    pub fn coarser(self) -> Option<ScaleLevel> {
        (self.0 > 0).then(|| ScaleLevel(self.0 - 1))
    }
}

impl TryFrom<u8> for ScaleLevel {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        ScaleLevel::new(v)
    }
}

impl From<ScaleLevel> for u8 {
    fn from(l: ScaleLevel) -> u8 {
        l.0
    }
}

/// Pixel rectangle `[y0, y0 + side) × [x0, x0 + side)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub y0: u32,
    pub x0: u32,
    pub side: u32,
}

impl Rect {
    pub fn area(&self) -> u32 {
        self.side * self.side
    }

    pub fn contains(&self, y: u32, x: u32) -> bool {
        y >= self.y0 && y < self.y0 + self.side && x >= self.x0 && x < self.x0 + self.side
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenKey {
    pub level: ScaleLevel,
    pub row: u32,
    pub col: u32,
}

impl fmt::Display for TokenKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.level.0, self.row, self.col)
    }
}

impl TokenKey {
    pub fn new(level: u8, row: u32, col: u32) -> Result<Self> {
        Ok(TokenKey { level: ScaleLevel::new(level)?, row, col })
    }

    pub fn rect(&self) -> Rect {
        let side = self.level.patch_side();
        Rect { y0: self.row * side, x0: self.col * side, side }
    }

    pub fn parent(&self) -> Option<TokenKey> {
        self.level.coarser().map(|level| TokenKey { level, row: self.row / 2, col: self.col / 2 })
    }

    /// Position inside the parent's 2×2 partition, row-major (0..4).
    pub fn slot(&self) -> usize {
        ((self.row % 2) * 2 + self.col % 2) as usize
    }

    /// Patch-center pixel coordinates `(x, y)`.
    pub fn center(&self) -> (u32, u32) {
        let r = self.rect();
        (r.x0 + r.side / 2, r.y0 + r.side / 2)
    }

    pub fn morton(&self) -> u64 {
        let (x, y) = self.center();
        interleave(x, y)
    }

    pub fn in_bounds(&self, height: u32, width: u32) -> bool {
        let side = self.level.patch_side();
        self.row < height / side && self.col < width / side
    }
}

fn spread(v: u32) -> u64 {
    let mut x = v as u64;
    x = (x | (x << 16)) & 0x0000_FFFF_0000_FFFF;
    x = (x | (x << 8)) & 0x00FF_00FF_00FF_00FF;
    x = (x | (x << 4)) & 0x0F0F_0F0F_0F0F_0F0F;
    x = (x | (x << 2)) & 0x3333_3333_3333_3333;
    x = (x | (x << 1)) & 0x5555_5555_5555_5555;
    x
}

/// Z-order code with x on the even bits.
pub fn interleave(x: u32, y: u32) -> u64 {
    spread(x) | (spread(y) << 1)
}

/// The four children of `parent`, in slot order.
pub fn split(parent: TokenKey) -> Result<[TokenKey; 4]> {
    let Some(level) = parent.level.finer() else {
        return Err(Error::Contract(format!("cannot split {parent}: 4×4 is the finest scale")));
    };
    let (r, c) = (parent.row * 2, parent.col * 2);
    Ok([
        TokenKey { level, row: r, col: c },
        TokenKey { level, row: r, col: c + 1 },
        TokenKey { level, row: r + 1, col: c },
        TokenKey { level, row: r + 1, col: c + 1 },
    ])
}

/// Dimensions rounded up to the next multiple of the coarse patch side.
pub fn padded_dims(height: u32, width: u32) -> (u32, u32) {
    let up = |v: u32| v.div_ceil(COARSE_SIDE) * COARSE_SIDE;
    (up(height), up(width))
}

/// Canonical comparison: Morton code of the patch center, then (level, row, col).
pub fn canonical_cmp(a: &TokenKey, b: &TokenKey) -> Ordering {
    a.morton()
        .cmp(&b.morton())
        .then(a.level.cmp(&b.level))
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

pub fn canonical_order(tokens: &[TokenKey]) -> Vec<TokenKey> {
    let mut out = tokens.to_vec();
    out.sort_by(canonical_cmp);
    out
}

/// Indices of `tokens` in canonical order, plus the number of key
/// comparisons the sort performed.
pub fn canonical_permutation(tokens: &[TokenKey]) -> (Vec<usize>, u64) {
    let comparisons = Cell::new(0u64);
    let keys: Vec<(u64, TokenKey)> = tokens.iter().map(|t| (t.morton(), *t)).collect();
    let mut idx: Vec<usize> = (0..tokens.len()).collect();
    idx.sort_by(|&i, &j| {
        comparisons.set(comparisons.get() + 1);
        let (a, b) = (&keys[i], &keys[j]);
        a.0.cmp(&b.0)
            .then(a.1.level.cmp(&b.1.level))
            .then(a.1.row.cmp(&b.1.row))
            .then(a.1.col.cmp(&b.1.col))
    });
    (idx, comparisons.get())
}

/// All live tokens of one sample, grouped by level in allocation order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSet {
    height: u32,
    width: u32,
    levels: [Vec<TokenKey>; NUM_LEVELS],
    rounds: u8,
}

/// Level-0 grid for an image whose sides are multiples of 32.
pub fn coarse_grid(height: u32, width: u32) -> Result<TokenSet> {
    if height == 0 || width == 0 || height % COARSE_SIDE != 0 || width % COARSE_SIDE != 0 {
        return Err(Error::Input(format!(
            "image {height}×{width} is not a positive multiple of {COARSE_SIDE}; pad it first"
        )));
    }
    let level0 = (0..height / COARSE_SIDE)
        .flat_map(|row| (0..width / COARSE_SIDE).map(move |col| TokenKey { level: ScaleLevel(0), row, col }))
        .collect();
    Ok(TokenSet { height, width, levels: [level0, Vec::new(), Vec::new(), Vec::new()], rounds: 0 })
}

impl TokenSet {
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn level(&self, level: ScaleLevel) -> &[TokenKey] {
        &self.levels[level.index()]
    }

    pub fn counts(&self) -> [usize; NUM_LEVELS] {
        [self.levels[0].len(), self.levels[1].len(), self.levels[2].len(), self.levels[3].len()]
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of allocation rounds applied so far.
    pub fn rounds(&self) -> u8 {
        self.rounds
    }

    pub fn frontier_level(&self) -> ScaleLevel {
        ScaleLevel(self.rounds)
    }

    /// Tokens created by the most recent round (level 0 before any round).
    pub fn frontier(&self) -> &[TokenKey] {
        &self.levels[self.rounds as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = &TokenKey> {
        self.levels.iter().flatten()
    }

    /// Splits the given frontier tokens and makes their children the new
    /// frontier. Returns the children in allocation order.
    pub fn allocate(&mut self, parents: &[TokenKey]) -> Result<Vec<TokenKey>> {
        let frontier: HashSet<&TokenKey> = self.frontier().iter().collect();
        let mut seen = HashSet::new();
        let mut children = Vec::with_capacity(parents.len() * 4);
        for p in parents {
            if !frontier.contains(p) {
                return Err(Error::Contract(format!("{p} is not on the current frontier")));
            }
            if !seen.insert(*p) {
                return Err(Error::Contract(format!("{p} selected twice")));
            }
            children.extend(split(*p)?);
        }
        if self.rounds as usize + 1 >= NUM_LEVELS {
            return Err(Error::Contract("all allocation rounds already applied".into()));
        }
        self.rounds += 1;
        self.levels[self.rounds as usize].extend_from_slice(&children);
        Ok(children)
    }

    /// Checks the tiling and sibling invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(m));
        let expected0 = (self.height / COARSE_SIDE) * (self.width / COARSE_SIDE);
        let l0: HashSet<_> = self.levels[0].iter().collect();
        if l0.len() != self.levels[0].len() || l0.len() as u32 != expected0 {
            return fail(format!("level 0 has {} tokens, expected {expected0}", self.levels[0].len()));
        }
        for lvl in 0..NUM_LEVELS {
            let mut seen = HashSet::new();
            for t in &self.levels[lvl] {
                if t.level.index() != lvl || !t.in_bounds(self.height, self.width) {
                    return fail(format!("{t} misplaced at level {lvl}"));
                }
                if !seen.insert(*t) {
                    return fail(format!("{t} duplicated"));
                }
            }
            if lvl == 0 {
                continue;
            }
            let parents: HashSet<_> = self.levels[lvl - 1].iter().collect();
            let mut by_parent = std::collections::HashMap::<TokenKey, usize>::new();
            for t in &self.levels[lvl] {
                let p = t.parent().expect("level >= 1");
                if !parents.contains(&p) {
                    return fail(format!("{t} has no parent"));
                }
                *by_parent.entry(p).or_default() += 1;
            }
            if let Some((p, n)) = by_parent.iter().find(|(_, &n)| n != 4) {
                return fail(format!("{p} has {n} children"));
            }
        }
        Ok(())
    }
}

/// For each 4×4 cell, the deepest token covering it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoverMap {
    cells_h: u32,
    cells_w: u32,
    keys: Vec<TokenKey>,
}

impl CoverMap {
    pub fn cells_h(&self) -> u32 {
        self.cells_h
    }

    pub fn cells_w(&self) -> u32 {
        self.cells_w
    }

    pub fn cell(&self, cy: u32, cx: u32) -> TokenKey {
        self.keys[(cy * self.cells_w + cx) as usize]
    }

    pub fn cells(&self) -> &[TokenKey] {
        &self.keys
    }

    pub fn pixel(&self, y: u32, x: u32) -> TokenKey {
        self.cell(y / FINEST_SIDE, x / FINEST_SIDE)
    }

    /// Row-major per-pixel expansion.
    pub fn to_pixels(&self) -> Vec<TokenKey> {
        let (h, w) = (self.cells_h * FINEST_SIDE, self.cells_w * FINEST_SIDE);
        (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| self.pixel(y, x)).collect()
    }
}

/// Deepest-token map built from an arbitrary key collection; cells no key
/// covers are an error.
pub fn cover_from_keys<'a>(height: u32, width: u32, keys: impl IntoIterator<Item = &'a TokenKey>) -> Result<CoverMap> {
    let (cells_h, cells_w) = (height / FINEST_SIDE, width / FINEST_SIDE);
    let mut best: Vec<Option<TokenKey>> = vec![None; (cells_h * cells_w) as usize];
    for k in keys {
        let r = k.rect();
        let cs = r.side / FINEST_SIDE;
        for cy in r.y0 / FINEST_SIDE..r.y0 / FINEST_SIDE + cs {
            for cx in r.x0 / FINEST_SIDE..r.x0 / FINEST_SIDE + cs {
                let slot = &mut best[(cy * cells_w + cx) as usize];
                if slot.map_or(true, |b| b.level < k.level) {
                    *slot = Some(*k);
                }
            }
        }
    }
    let keys = best
        .into_iter()
        .enumerate()
        .map(|(i, k)| k.ok_or_else(|| Error::Contract(format!("cell {i} is not covered"))))
        .collect::<Result<_>>()?;
    Ok(CoverMap { cells_h, cells_w, keys })
}

pub fn finest_cover(set: &TokenSet) -> Result<CoverMap> {
    cover_from_keys(set.height, set.width, set.iter())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn coverage(h: u32, w: u32, rects: impl Iterator<Item = Rect>) -> Vec<u32> {
        let mut c = vec![0u32; (h * w) as usize];
        for r in rects {
            for y in r.y0..r.y0 + r.side {
                for x in r.x0..r.x0 + r.side {
                    c[(y * w + x) as usize] += 1;
                }
            }
        }
        c
    }

    fn random_set(rng: &mut ChaCha8Rng, h: u32, w: u32) -> TokenSet {
        let mut set = coarse_grid(h, w).unwrap();
        for _ in 0..3 {
            let p = rng.gen_range(0.0..1.0);
            let chosen: Vec<TokenKey> = set.frontier().iter().copied().filter(|_| rng.gen_bool(p)).collect();
            set.allocate(&chosen).unwrap();
        }
        set
    }

    #[test]
    fn coarse_grid_counts() {
        assert_eq!(coarse_grid(256, 256).unwrap().len(), 64);
        assert_eq!(coarse_grid(64, 32).unwrap().len(), 2);
        assert!(matches!(coarse_grid(60, 32), Err(Error::Input(_))));
    }

    #[test]
    fn coarse_grid_partitions_image() {
        let set = coarse_grid(512, 512).unwrap();
        assert_eq!(set.len(), 256);
        assert!(coverage(512, 512, set.iter().map(TokenKey::rect)).iter().all(|&c| c == 1));
        assert_eq!(set.frontier().len(), 256);
    }

    #[test]
    fn split_children() {
        let p = TokenKey::new(0, 0, 0).unwrap();
        let kids = split(p).unwrap();
        let want: Vec<_> = [(0, 0), (0, 1), (1, 0), (1, 1)].iter().map(|&(r, c)| TokenKey::new(1, r, c).unwrap()).collect();
        assert_eq!(kids.to_vec(), want);
        assert!(kids.iter().all(|k| k.rect().area() * 4 == p.rect().area()));
        assert!(matches!(split(TokenKey::new(3, 0, 0).unwrap()), Err(Error::Contract(_))));
    }

    #[test]
    fn split_tiles_parent_pixelwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let level = rng.gen_range(0..3u8);
            let side = COARSE_SIDE >> level;
            let n = 128 / side;
            let p = TokenKey::new(level, rng.gen_range(0..n), rng.gen_range(0..n)).unwrap();
            let cov = coverage(128, 128, split(p).unwrap().iter().map(TokenKey::rect));
            for y in 0..128 {
                for x in 0..128 {
                    let want = u32::from(p.rect().contains(y, x));
                    assert_eq!(cov[(y * 128 + x) as usize], want);
                }
            }
            for c in split(p).unwrap() {
                assert_eq!(c.parent(), Some(p));
            }
        }
    }

    #[test]
    fn allocation_invariants_hold_on_random_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..30 {
            let set = random_set(&mut rng, 96, 64);
            set.validate().unwrap();
            for lvl in 1..NUM_LEVELS {
                let cov = coverage(96, 64, set.levels[lvl].iter().map(TokenKey::rect));
                assert!(cov.iter().all(|&c| c <= 1));
            }
        }
    }

    #[test]
    fn allocate_rejects_non_frontier_parents() {
        let mut set = coarse_grid(64, 64).unwrap();
        let p = set.frontier()[0];
        set.allocate(&[p]).unwrap();
        assert!(set.allocate(&[p]).is_err());
        let mut set = coarse_grid(64, 64).unwrap();
        assert!(set.allocate(&[p, p]).is_err());
    }

    #[test]
    fn canonical_order_matches_comparison_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let keys: Vec<TokenKey> = (0..100)
            .map(|_| {
                let level = rng.gen_range(0..4u8);
                let n = 256 / (COARSE_SIDE >> level);
                TokenKey::new(level, rng.gen_range(0..n), rng.gen_range(0..n)).unwrap()
            })
            .collect();
        let got = canonical_order(&keys);
        // Oracle: insertion sort with an independently written key.
        let key = |t: &TokenKey| {
            let side = 32u32 >> t.level.get();
            let (cx, cy) = (t.col * side + side / 2, t.row * side + side / 2);
            let mut z = 0u64;
            for b in 0..32 {
                z |= (((cx >> b) & 1) as u64) << (2 * b);
                z |= (((cy >> b) & 1) as u64) << (2 * b + 1);
            }
            (z, t.level.get(), t.row, t.col)
        };
        let mut oracle: Vec<TokenKey> = Vec::new();
        for k in &keys {
            let pos = oracle.iter().position(|o| key(o) > key(k)).unwrap_or(oracle.len());
            oracle.insert(pos, *k);
        }
        assert_eq!(got, oracle);
        assert_eq!(canonical_order(&keys[..1]), vec![keys[0]]);
    }

    proptest! {
        #[test]
        fn canonical_order_ignores_input_permutation(seed in any::<u64>(), n in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = random_set(&mut rng, 64, 64);
            let mut keys: Vec<TokenKey> = set.iter().copied().take(n).collect();
            let a = canonical_order(&keys);
            for i in (1..keys.len()).rev() {
                keys.swap(i, rng.gen_range(0..=i));
            }
            prop_assert_eq!(a, canonical_order(&keys));
        }
    }

    #[test]
    fn finest_cover_basic_cases() {
        let set = coarse_grid(64, 64).unwrap();
        let cover = finest_cover(&set).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(cover.pixel(y, x), TokenKey::new(0, y / 32, x / 32).unwrap());
            }
        }
        let mut set = coarse_grid(64, 64).unwrap();
        set.allocate(&[TokenKey::new(0, 1, 0).unwrap()]).unwrap();
        let cover = finest_cover(&set).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let want = if y >= 32 && x < 32 { TokenKey::new(1, y / 16, x / 16) } else { TokenKey::new(0, y / 32, x / 32) };
                assert_eq!(cover.pixel(y, x), want.unwrap());
            }
        }
    }

    #[test]
    fn finest_cover_matches_brute_force_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let set = random_set(&mut rng, 64, 96);
            let cover = finest_cover(&set).unwrap();
            let all: Vec<TokenKey> = set.iter().copied().collect();
            for y in 0..64 {
                for x in 0..96 {
                    let deepest = all.iter().filter(|t| t.rect().contains(y, x)).max_by_key(|t| t.level).unwrap();
                    assert_eq!(cover.pixel(y, x), *deepest);
                }
            }
            let visible: HashSet<TokenKey> = cover.cells().iter().copied().collect();
            assert_eq!(cover_from_keys(64, 96, visible.iter()).unwrap(), cover);
        }
    }
}
