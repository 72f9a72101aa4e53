//! Dense f64 tensors, the forward kernels shared by eager code and the tape,
//! and the reverse-mode tape itself.
//!
//! Every tensor is treated as a row-major matrix whose column count is the
//! trailing extent; leading extents fold into rows. That is all the model
//! needs, and it keeps the backward rules short.

mod params;
mod tape;

pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{FlopCounter, RowOwners, Tape, Var};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("from_rows", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Trailing extent (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading extents.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Tensor { shape: vec![rows, cols], data }
    }

    pub(crate) fn with_shape_of(other: &Tensor, data: Vec<f64>) -> Self {
        debug_assert_eq!(other.len(), data.len());
        Tensor { shape: other.shape.clone(), data }
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    Ok(Tensor::from_parts(m, n, matmul_kernel(&a.data, &b.data, m, k, n)))
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(b_row) {
                *ov += av * bv;
            }
        }
    }
    out
}

/// Row-wise normalization over the trailing extent followed by `gamma * x̂ + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape("layer_norm", format!("d = {d}, gamma {}, beta {}", gamma.len(), beta.len())));
    }
    if !(eps > 0.0) {
        return Err(Error::Input(format!("layer norm eps must be positive, got {eps}")));
    }
    let (out, _, _) = layer_norm_kernel(&x.data, &gamma.data, &beta.data, d, eps);
    Ok(Tensor::with_shape_of(x, out))
}

/// Returns (output, x̂, 1/σ per row).
pub(crate) fn layer_norm_kernel(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    d: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = if d == 0 { 0 } else { x.len() / d };
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    (out, xhat, inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sparse attention pattern in CSR form: query `i` attends to
/// `keys[offsets[i]..offsets[i + 1]]`, in that order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhoods {
    offsets: Vec<usize>,
    keys: Vec<usize>,
}

impl Neighborhoods {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for l in lists {
            keys.extend_from_slice(l);
            offsets.push(keys.len());
        }
        Neighborhoods { offsets, keys }
    }

    /// Every query attends to every key.
    pub fn full(n: usize) -> Self {
        let lists: Vec<Vec<usize>> = (0..n).map(|_| (0..n).collect()).collect();
        Neighborhoods::from_lists(&lists)
    }

    /// Dense boolean mask, `mask[i * n_keys + j]`.
    pub fn from_mask(mask: &[bool], n_queries: usize, n_keys: usize) -> Result<Self> {
        if mask.len() != n_queries * n_keys {
            return Err(Error::shape("attention mask", format!("{} != {n_queries}x{n_keys}", mask.len())));
        }
        let lists: Vec<Vec<usize>> = (0..n_queries)
            .map(|i| (0..n_keys).filter(|&j| mask[i * n_keys + j]).collect())
            .collect();
        Ok(Neighborhoods::from_lists(&lists))
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn of(&self, query: usize) -> &[usize] {
        &self.keys[self.offsets[query]..self.offsets[query + 1]]
    }

    pub fn total(&self) -> usize {
        self.keys.len()
    }

    pub(crate) fn offset(&self, query: usize) -> usize {
        self.offsets[query]
    }

    pub(crate) fn validate(&self, n_keys: usize) -> Result<()> {
        for i in 0..self.len() {
            let hood = self.of(i);
            if hood.is_empty() {
                return Err(Error::Contract(format!("attention query {i} has no unmasked key")));
            }
            if let Some(&bad) = hood.iter().find(|&&j| j >= n_keys) {
                return Err(Error::Contract(format!("attention key {bad} out of range ({n_keys} keys)")));
            }
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention over a sparse pattern. Heads split the
/// feature columns evenly. Returns the output and the softmax weights, laid out
/// per query, per head, per neighbor.
pub(crate) fn attention_kernel(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    hood: &Neighborhoods,
) -> (Vec<f64>, Vec<f64>) {
    let n = hood.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = vec![0.0; hood.total() * heads];
    let mut logits = Vec::new();
    for i in 0..n {
        let keys = hood.of(i);
        let base = hood.offset(i) * heads;
        for h in 0..heads {
            let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
            logits.clear();
            logits.extend(keys.iter().map(|&j| {
                let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
                qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
            }));
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                z += *l;
            }
            let p = &mut probs[base + h * keys.len()..base + (h + 1) * keys.len()];
            let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for ((pj, &e), &j) in p.iter_mut().zip(logits.iter()).zip(keys) {
                *pj = e / z;
                let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
                for (ov, &vv) in o.iter_mut().zip(vj) {
                    *ov += *pj * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Single-head masked softmax attention with scale `1/sqrt(d)`.
///
/// `mask` is `n_queries × n_keys`, true where attention is allowed. A query
/// row with no allowed key is a contract violation.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() {
        return Err(Error::shape(
            "softmax_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape, k.shape, v.shape),
        ));
    }
    let hood = Neighborhoods::from_mask(mask, q.rows(), k.rows())?;
    hood.validate(k.rows())?;
    let (out, _) = attention_kernel(&q.data, &k.data, &v.data, d, 1, &hood);
    Ok(Tensor::from_parts(q.rows(), d, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 3);
        assert_eq!(matmul(&Tensor::identity(3), &a).unwrap(), a);

        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Tensor::vector(vec![1.0; 4]);
        let zeros = Tensor::vector(vec![0.0; 4]);
        let c = Tensor::matrix(1, 4, vec![3.0; 4]).unwrap();
        assert!(layer_norm(&c, &ones, &zeros, LAYER_NORM_EPS).unwrap().data().iter().all(|&v| v == 0.0));

        let x = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &Tensor::vector(vec![1.0; 2]), &Tensor::vector(vec![0.0; 2]), 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 8);
        let y = layer_norm(&x, &Tensor::vector(vec![1.0; 8]), &Tensor::vector(vec![0.0; 8]), 1e-5).unwrap();
        for r in 0..4 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3, "eps shifts variance slightly: {var}");
        }
    }

    #[test]
    fn layer_norm_variance_tracks_eps_correction() {
        // With eps = 1e-5 the normalized variance is var / (var + eps).
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 4, 8);
        let y = layer_norm(&x, &Tensor::vector(vec![1.0; 8]), &Tensor::vector(vec![0.0; 8]), 1e-5).unwrap();
        for r in 0..4 {
            let xr = x.row(r);
            let xm = xr.iter().sum::<f64>() / 8.0;
            let xv = xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 8.0;
            let row = y.row(r);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 8.0;
            assert!((var - 1.0).abs() < 1e-6 + 1e-5 / xv);
            assert!((var - xv / (xv + 1e-5)).abs() < 1e-12);
        }
    }

    fn explicit_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &[bool]) -> Vec<f64> {
        let (n, m, d) = (q.rows(), k.rows(), q.cols());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let w: Vec<f64> = (0..m)
                .map(|j| {
                    if mask[i * m + j] {
                        let s: f64 = (0..d).map(|c| q.row(i)[c] * k.row(j)[c]).sum();
                        (s / (d as f64).sqrt()).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let z: f64 = w.iter().sum();
            for j in 0..m {
                for c in 0..d {
                    out[i * d + c] += w[j] / z * v.row(j)[c];
                }
            }
        }
        out
    }

    #[test]
    fn attention_single_key_and_identical_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(&mut rng, 1, 4);
        let k = random(&mut rng, 1, 4);
        let v = random(&mut rng, 1, 4);
        assert_eq!(softmax_attention(&q, &k, &v, &[true]).unwrap(), v);

        let q = random(&mut rng, 3, 4);
        let k = Tensor::from_rows(&vec![vec![0.3, -0.2, 0.1, 0.7]; 3]).unwrap();
        let v = random(&mut rng, 3, 4);
        let out = softmax_attention(&q, &k, &v, &[true; 9]).unwrap();
        for c in 0..4 {
            let mean = (0..3).map(|j| v.row(j)[c]).sum::<f64>() / 3.0;
            for i in 0..3 {
                assert!((out.row(i)[c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_explicit_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (random(&mut rng, 6, 4), random(&mut rng, 6, 4), random(&mut rng, 6, 4));
        let mask: Vec<bool> = (0..36).map(|i| i % 6 == i / 6 || rng.gen_bool(0.6)).collect();
        let got = softmax_attention(&q, &k, &v, &mask).unwrap();
        for (g, e) in got.data().iter().zip(explicit_attention(&q, &k, &v, &mask)) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_contract_error() {
        let t = Tensor::zeros(&[2, 2]);
        let err = softmax_attention(&t, &t, &t, &[true, false, false, false]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.2, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }
}
