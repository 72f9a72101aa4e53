use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::{
    attention_kernel, gelu, gelu_grad, layer_norm_kernel, matmul_kernel, sigmoid, Gradients,
    Neighborhoods, ParamId, ParamStore, Tensor, LAYER_NORM_EPS,
};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sample that owns each row of a token matrix. `None` marks rows that belong
/// to no sample (batch padding).
pub type RowOwners = Arc<[Option<u32>]>;

enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, hood: Arc<Neighborhoods>, probs: Vec<f64> },
    GatherRows(Var, Arc<[usize]>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Sum(Var),
    MaskedMse { pred: Var, target: Arc<[f64]>, mask: Arc<[bool]>, count: usize },
    SoftCrossEntropy { logits: Var, counts: Arc<Tensor>, probs: Vec<f64>, total: f64 },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    owners: Option<RowOwners>,
}

/// Operation-level FLOP tally, keyed by (owning sample, scope label).
///
/// Convention: one multiply-accumulate is 2 FLOPs, every exp/div/tanh in a
/// nonlinearity or normalization is 1. Layer norm costs 3 per element (one
/// divide plus the affine MAC); softmax costs one exp and one divide per
/// attended key. Elementwise additions and gathers are free.
#[derive(Clone, Debug, Default)]
pub struct FlopCounter {
    flops: BTreeMap<(Option<u32>, String), u64>,
}

impl FlopCounter {
    fn charge(&mut self, scope: &str, owners: Option<&[Option<u32>]>, rows: usize, per_row: impl Fn(usize) -> u64) {
        match owners {
            None => {
                let total: u64 = (0..rows).map(&per_row).sum();
                if total > 0 {
                    *self.flops.entry((None, scope.to_string())).or_default() += total;
                }
            }
            Some(owners) => {
                let mut r = 0;
                while r < rows {
                    let owner = owners[r];
                    let mut total = 0;
                    while r < rows && owners[r] == owner {
                        total += per_row(r);
                        r += 1;
                    }
                    if total > 0 {
                        *self.flops.entry((owner, scope.to_string())).or_default() += total;
                    }
                }
            }
        }
    }

    /// Scope → FLOPs for one owner (`None` collects padding and unowned rows).
    pub fn by_scope(&self, owner: Option<u32>) -> BTreeMap<String, u64> {
        self.flops
            .iter()
            .filter(|((o, _), _)| *o == owner)
            .map(|((_, s), &v)| (s.clone(), v))
            .collect()
    }

    pub fn total(&self, owner: Option<u32>) -> u64 {
        self.flops.iter().filter(|((o, _), _)| *o == owner).map(|(_, v)| v).sum()
    }

    pub fn grand_total(&self) -> u64 {
        self.flops.values().sum()
    }
}

/// Records one forward pass for reverse-mode differentiation.
///
/// A tape is single-use and single-threaded: build it, run the forward pass
/// through its methods, call [`Tape::backward`] once.
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    counter: FlopCounter,
    scope: String,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_vars: HashMap::new(), counter: FlopCounter::default(), scope: String::new() }
    }

    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn counter(&self) -> &FlopCounter {
        &self.counter
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn owners(&self, v: Var) -> Option<&RowOwners> {
        self.nodes[v.0].owners.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, owners: Option<RowOwners>) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad, owners)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool, owners: Option<RowOwners>) -> Var {
        debug_assert!(owners.as_ref().map_or(true, |o| o.len() == value.rows()));
        self.nodes.push(Node { value, op, requires_grad, owners });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn own(&self, v: Var) -> Option<RowOwners> {
        self.nodes[v.0].owners.clone()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false, None)
    }

    /// Constant whose rows belong to the given samples.
    pub fn constant_rows(&mut self, t: Tensor, owners: RowOwners) -> Result<Var> {
        if owners.len() != t.rows() {
            return Err(Error::shape("constant_rows", format!("{} owners for {} rows", owners.len(), t.rows())));
        }
        Ok(self.push(t, Op::Constant, false, Some(owners)))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push_shared(store.shared(id), Op::Param, true, None);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::from_parts(m, n, matmul_kernel(ta.data(), tb.data(), m, k, n));
        let owners = self.own(a);
        let cost = 2 * (k * n) as u64;
        self.counter.charge(&self.scope, owners.as_deref(), m, |_| cost);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg, owners))
    }

    /// `x[n×d] + b[d]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let d = tx.cols();
        if tb.len() != d {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            for (o, bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let out = Tensor::with_shape_of(tx, out);
        let rg = self.rg(x) || self.rg(b);
        let owners = self.own(x);
        Ok(self.push(out, Op::AddRow(x, b), rg, owners))
    }

    fn zip_op(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let out = Tensor::with_shape_of(ta, ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect());
        let rg = self.rg(a) || self.rg(b);
        let owners = self.own(a).or_else(|| self.own(b));
        Ok(self.push(out, op, rg, owners))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::with_shape_of(t, t.data().iter().map(|v| v * c).collect());
        let (rg, owners) = (self.rg(x), self.own(x));
        self.push(out, Op::Scale(x, c), rg, owners)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor::with_shape_of(t, t.data().iter().map(|&v| f(v)).collect());
        let (rows, cols) = (t.rows(), t.cols() as u64);
        let owners = self.own(x);
        self.counter.charge(&self.scope, owners.as_deref(), rows, |_| cols);
        let rg = self.rg(x);
        self.push(out, op, rg, owners)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Layer normalization over the trailing extent with the fixed eps.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(Error::shape("layer_norm", format!("d = {d}, gamma {}, beta {}", tg.len(), tb.len())));
        }
        let (out, xhat, inv_std) = layer_norm_kernel(tx.data(), tg.data(), tb.data(), d, LAYER_NORM_EPS);
        let out = Tensor::with_shape_of(tx, out);
        let rows = tx.rows();
        let owners = self.own(x);
        self.counter.charge(&self.scope, owners.as_deref(), rows, |_| 3 * d as u64);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg, owners))
    }

    /// Multi-head attention of the rows of `q` over the keys listed per query.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, hood: Arc<Neighborhoods>) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("{heads} heads do not split dim {d}")));
        }
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() || hood.len() != tq.rows() {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}, {} neighborhoods", tq.shape(), tk.shape(), tv.shape(), hood.len()),
            ));
        }
        hood.validate(tk.rows())?;
        let (out, probs) = attention_kernel(tq.data(), tk.data(), tv.data(), d, heads, &hood);
        let out = Tensor::from_parts(tq.rows(), d, out);
        let owners = self.own(q);
        let per_key = (4 * d + 2 * heads) as u64;
        self.counter.charge(&self.scope, owners.as_deref(), hood.len(), |i| per_key * hood.of(i).len() as u64);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, hood, probs }, rg, owners))
    }

    pub fn gather_rows(&mut self, x: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {rows}")));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx.iter() {
            out.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::from_parts(idx.len(), cols, out);
        let owners = self.own(x).map(|o| idx.iter().map(|&i| o[i]).collect::<RowOwners>());
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, idx), rg, owners))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{} vs {cols} columns", t.cols())));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let any_owned = parts.iter().any(|&p| self.nodes[p.0].owners.is_some());
        let owners = any_owned.then(|| {
            let mut o = Vec::with_capacity(rows);
            for &p in parts {
                match &self.nodes[p.0].owners {
                    Some(po) => o.extend_from_slice(po),
                    None => o.extend(std::iter::repeat(None).take(self.value(p).rows())),
                }
            }
            RowOwners::from(o)
        });
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg, owners))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::shape("concat_cols", format!("{} vs {} rows", ta.rows(), tb.rows())));
        }
        let (rows, ca, cb) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        let owners = self.own(a).or_else(|| self.own(b));
        Ok(self.push(Tensor::from_parts(rows, ca + cb, data), Op::ConcatCols(a, b), rg, owners))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, None)
    }

    /// Mean of `(pred - target)^2` over entries with `mask == true`; 0 when
    /// nothing is valid.
    pub fn masked_mse(&mut self, pred: Var, target: impl Into<Arc<[f64]>>, mask: impl Into<Arc<[bool]>>) -> Result<Var> {
        let (target, mask) = (target.into(), mask.into());
        let p = self.value(pred);
        if p.len() != target.len() || p.len() != mask.len() {
            return Err(Error::shape("masked_mse", format!("{} preds, {} targets, {} mask", p.len(), target.len(), mask.len())));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let mut s = 0.0;
        for ((&pv, &tv), &m) in p.data().iter().zip(target.iter()).zip(mask.iter()) {
            if m {
                s += (pv - tv) * (pv - tv);
            }
        }
        let loss = if count == 0 { 0.0 } else { s / count as f64 };
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(loss), Op::MaskedMse { pred, target, mask, count }, rg, None))
    }

    /// Cross-entropy of row-wise softmax against per-row class counts,
    /// normalized by the total count (0 when there is none).
    pub fn soft_cross_entropy(&mut self, logits: Var, counts: Tensor) -> Result<Var> {
        let l = self.value(logits);
        if l.shape() != counts.shape() {
            return Err(Error::shape("soft_cross_entropy", format!("{:?} vs {:?}", l.shape(), counts.shape())));
        }
        let c = l.cols();
        let mut probs = vec![0.0; l.len()];
        let mut loss = 0.0;
        let total: f64 = counts.data().iter().sum();
        for r in 0..l.rows() {
            let row = l.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
                loss -= counts.data()[r * c + j] * (row[j] - log_z);
            }
        }
        let loss = if total > 0.0 { loss / total } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy { logits, counts: Arc::new(counts), probs, total },
            rg,
            None,
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns one gradient per parameter
    /// in `store`; parameters that never reached the loss get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.rg(*a) {
                        let da = self.slot(&mut grads, *a);
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let bp = &tb.data()[p * n..(p + 1) * n];
                                da[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    if self.rg(*b) {
                        let db = self.slot(&mut grads, *b);
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = ta.data()[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                }
                Op::AddRow(x, b) => {
                    if self.rg(*x) {
                        add_into(self.slot(&mut grads, *x), &g);
                    }
                    if self.rg(*b) {
                        let d = self.value(*b).len();
                        let db = self.slot(&mut grads, *b);
                        for row in g.chunks(d.max(1)) {
                            add_into(db, row);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        add_into(self.slot(&mut grads, *a), &g);
                    }
                    if self.rg(*b) {
                        add_into(self.slot(&mut grads, *b), &g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        add_into(self.slot(&mut grads, *a), &g);
                    }
                    if self.rg(*b) {
                        for (d, gv) in self.slot(&mut grads, *b).iter_mut().zip(&g) {
                            *d -= gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let tb = self.value(*b);
                        for ((d, gv), bv) in self.slot(&mut grads, *a).iter_mut().zip(&g).zip(tb.data()) {
                            *d += gv * bv;
                        }
                    }
                    if self.rg(*b) {
                        let ta = self.value(*a);
                        for ((d, gv), av) in self.slot(&mut grads, *b).iter_mut().zip(&g).zip(ta.data()) {
                            *d += gv * av;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    for (d, gv) in self.slot(&mut grads, *x).iter_mut().zip(&g) {
                        *d += c * gv;
                    }
                }
                Op::Gelu(x) => {
                    let tx = self.value(*x);
                    for ((d, gv), &xv) in self.slot(&mut grads, *x).iter_mut().zip(&g).zip(tx.data()) {
                        *d += gv * gelu_grad(xv);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    for ((d, gv), &yv) in self.slot(&mut grads, *x).iter_mut().zip(&g).zip(y.data()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let d = self.value(*gamma).len();
                    let rows = inv_std.len();
                    if self.rg(*gamma) {
                        let dg = self.slot(&mut grads, *gamma);
                        for r in 0..rows {
                            for j in 0..d {
                                dg[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                    }
                    if self.rg(*beta) {
                        let db = self.slot(&mut grads, *beta);
                        for row in g.chunks(d.max(1)) {
                            add_into(db, row);
                        }
                    }
                    if self.rg(*x) {
                        let gm = self.value(*gamma).data().to_vec();
                        let dx = self.slot(&mut grads, *x);
                        let mut dxhat = vec![0.0; d];
                        for r in 0..rows {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..d {
                                dxhat[j] = g[r * d + j] * gm[j];
                                mean_d += dxhat[j];
                                mean_dx += dxhat[j] * xhat[r * d + j];
                            }
                            mean_d /= d as f64;
                            mean_dx /= d as f64;
                            for j in 0..d {
                                dx[r * d + j] += inv_std[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                            }
                        }
                    }
                }
                Op::Attention { q, k, v, heads, hood, probs } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, *heads, hood, probs);
                }
                Op::GatherRows(x, idx) => {
                    let cols = self.value(*x).cols();
                    let dx = self.slot(&mut grads, *x);
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.rg(p) {
                            add_into(self.slot(&mut grads, p), &g[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                    let rows = self.value(*a).rows();
                    if self.rg(*a) {
                        let da = self.slot(&mut grads, *a);
                        for r in 0..rows {
                            add_into(&mut da[r * ca..(r + 1) * ca], &g[r * (ca + cb)..r * (ca + cb) + ca]);
                        }
                    }
                    if self.rg(*b) {
                        let db = self.slot(&mut grads, *b);
                        for r in 0..rows {
                            add_into(&mut db[r * cb..(r + 1) * cb], &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                        }
                    }
                }
                Op::Sum(x) => {
                    let s = g[0];
                    for d in self.slot(&mut grads, *x).iter_mut() {
                        *d += s;
                    }
                }
                Op::MaskedMse { pred, target, mask, count } => {
                    if *count > 0 {
                        let p = self.value(*pred).data().to_vec();
                        let scale = 2.0 * g[0] / *count as f64;
                        let dp = self.slot(&mut grads, *pred);
                        for i in 0..p.len() {
                            if mask[i] {
                                dp[i] += scale * (p[i] - target[i]);
                            }
                        }
                    }
                }
                Op::SoftCrossEntropy { logits, counts, probs, total } => {
                    if *total > 0.0 {
                        let c = counts.cols();
                        let dl = self.slot(&mut grads, *logits);
                        for (r, row_counts) in counts.data().chunks(c.max(1)).enumerate() {
                            let row_total: f64 = row_counts.iter().sum();
                            for j in 0..c {
                                dl[r * c + j] += g[0] * (probs[r * c + j] * row_total - row_counts[j]) / total;
                            }
                        }
                    }
                }
            }
        }

        let mut out: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        for (&id, &var) in &self.param_vars {
            if let Some(Some(g)) = grads.get(var.0) {
                out[id.0] = Tensor::with_shape_of(store.get(id), g.clone());
            }
        }
        Ok(Gradients::new(out))
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        hood: &Neighborhoods,
        probs: &[f64],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; tq.len()];
        let mut dk = vec![0.0; tk.len()];
        let mut dv = vec![0.0; tv.len()];
        let mut dp = Vec::new();
        for i in 0..hood.len() {
            let keys = hood.of(i);
            let base = hood.offset(i) * heads;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let go = &g[i * d + cols.start..i * d + cols.end];
                let p = &probs[base + h * keys.len()..base + (h + 1) * keys.len()];
                dp.clear();
                let mut s = 0.0;
                for (&j, &pj) in keys.iter().zip(p) {
                    let vj = &tv.data()[j * d + cols.start..j * d + cols.end];
                    let dpj: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dp.push(dpj);
                    s += pj * dpj;
                    for (dvv, &gv) in dv[j * d + cols.start..j * d + cols.end].iter_mut().zip(go) {
                        *dvv += pj * gv;
                    }
                }
                let qi = &tq.data()[i * d + cols.start..i * d + cols.end];
                for ((&j, &pj), &dpj) in keys.iter().zip(p).zip(&dp) {
                    let dl = pj * (dpj - s) * scale;
                    if dl == 0.0 {
                        continue;
                    }
                    let kj = &tk.data()[j * d + cols.start..j * d + cols.end];
                    for c in 0..dh {
                        dq[i * d + cols.start + c] += dl * kj[c];
                        dk[j * d + cols.start + c] += dl * qi[c];
                    }
                }
            }
        }
        if self.rg(q) {
            add_into(self.slot(grads, q), &dq);
        }
        if self.rg(k) {
            add_into(self.slot(grads, k), &dk);
        }
        if self.rg(v) {
            add_into(self.slot(grads, v), &dv);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
