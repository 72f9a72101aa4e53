//! Parameterized layers on top of the tape.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Neighborhoods, ParamId, ParamStore, Tape, Tensor, Var};

/// Registers freshly initialized parameters under a name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Init { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.store.add(name, Tensor::new(shape.to_vec(), vec![value; n]).expect("shape matches"))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = init.normal(&format!("{name}.w"), &[d_in, d_out], (1.0 / d_in as f64).sqrt());
        let b = init.filled(&format!("{name}.b"), &[d_out], 0.0);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, self.w), tape.param(store, self.b));
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// `Linear → GELU → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Mlp { fc1: Linear::new(init, &format!("{name}.fc1"), d_in, hidden), fc2: Linear::new(init, &format!("{name}.fc2"), hidden, d_out) }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Self {
        LayerNorm { gamma: init.filled(&format!("{name}.gamma"), &[d], 1.0), beta: init.filled(&format!("{name}.beta"), &[d], 0.0) }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(store, self.gamma), tape.param(store, self.beta));
        tape.layer_norm(x, g, b)
    }
}

/// Pre-norm transformer block with neighborhood-restricted attention.
#[derive(Clone, Debug)]
pub struct Block {
    pub dim: usize,
    pub heads: usize,
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    /// Per-level key offsets (`levels × dim`), present on cluster blocks.
    pub key_level: Option<ParamId>,
}

impl Block {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, mlp_ratio: usize, key_levels: Option<usize>) -> Self {
        Block {
            dim,
            heads,
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim),
            q: Linear::new(init, &format!("{name}.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.v"), dim, dim),
            proj: Linear::new(init, &format!("{name}.proj"), dim, dim),
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(init, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim),
            key_level: key_levels.map(|n| init.normal(&format!("{name}.key_level"), &[n, dim], 0.02)),
        }
    }

    /// `levels[i]` is the scale level of row `i`; required when the block has
    /// key offsets.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, hood: &Arc<Neighborhoods>, levels: Option<&Arc<[usize]>>) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let q = self.q.forward(tape, store, h)?;
        let mut k = self.k.forward(tape, store, h)?;
        let v = self.v.forward(tape, store, h)?;
        if let (Some(kl), Some(levels)) = (self.key_level, levels) {
            let table = tape.param(store, kl);
            let offs = tape.gather_rows(table, Arc::clone(levels))?;
            k = tape.add(k, offs)?;
        }
        let a = tape.attention(q, k, v, self.heads, Arc::clone(hood))?;
        let a = self.proj.forward(tape, store, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let m = self.mlp.forward(tape, store, h)?;
        tape.add(x, m)
    }

    /// FLOPs of one block over `n` tokens whose neighborhoods hold
    /// `hood_total` keys in all.
    pub fn flops(dim: usize, heads: usize, mlp_ratio: usize, n: u64, hood_total: u64) -> u64 {
        let d = dim as u64;
        let hidden = d * mlp_ratio as u64;
        let norms = 2 * 3 * d * n;
        let projections = 4 * 2 * d * d * n;
        let attention = (4 * d + 2 * heads as u64) * hood_total;
        let mlp = (2 * d * hidden + hidden + 2 * hidden * d) * n;
        norms + projections + attention + mlp
    }
}
