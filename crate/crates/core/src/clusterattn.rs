//! Balanced spatial clustering of mixed-resolution tokens and the
//! neighborhoods that cluster attention runs over.
//!
//! Tokens are sorted along the Z-order curve of their patch centers and cut
//! into contiguous runs of `cluster_size` (the last run may be short). A token
//! attends to its own run and the runs immediately before and after it.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{canonical_permutation, TokenKey};
use crate::nn::Block;
use crate::tensor::{Neighborhoods, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAssignment {
    /// Input indices in canonical order.
    pub order: Vec<usize>,
    /// Cluster id per input index.
    pub cluster_of: Vec<usize>,
    /// Members per cluster, as input indices in canonical order.
    pub clusters: Vec<Vec<usize>>,
    /// Key comparisons spent sorting.
    pub comparisons: u64,
}

pub fn cluster(keys: &[TokenKey], cluster_size: usize) -> Result<ClusterAssignment> {
    if cluster_size == 0 {
        return Err(Error::Input("cluster_size must be at least 1".into()));
    }
    let (order, comparisons) = canonical_permutation(keys);
    let clusters: Vec<Vec<usize>> = order.chunks(cluster_size).map(<[usize]>::to_vec).collect();
    let mut cluster_of = vec![0; keys.len()];
    for (c, members) in clusters.iter().enumerate() {
        for &i in members {
            cluster_of[i] = c;
        }
    }
    Ok(ClusterAssignment { order, cluster_of, clusters, comparisons })
}

impl ClusterAssignment {
    /// Input indices token `i` attends to, in canonical order.
    pub fn neighborhood(&self, i: usize) -> Vec<usize> {
        let c = self.cluster_of[i];
        let lo = c.saturating_sub(1);
        let hi = (c + 1).min(self.clusters.len() - 1);
        self.clusters[lo..=hi].iter().flatten().copied().collect()
    }

    pub fn hood_total(&self) -> u64 {
        cluster_hood_total(self.order.len(), self.clusters.first().map_or(1, Vec::len).max(1))
    }
}

/// Sum of neighborhood sizes for `n` tokens in runs of `cluster_size`.
pub fn cluster_hood_total(n: usize, cluster_size: usize) -> u64 {
    let sizes: Vec<u64> = (0..n.div_ceil(cluster_size))
        .map(|c| (n - c * cluster_size).min(cluster_size) as u64)
        .collect();
    (0..sizes.len())
        .map(|c| {
            let lo = c.saturating_sub(1);
            let hi = (c + 1).min(sizes.len() - 1);
            sizes[c] * sizes[lo..=hi].iter().sum::<u64>()
        })
        .sum()
}

/// Neighborhoods over a flattened batch.
///
/// Each entry of `samples` lists `(row, key)` for one sample's live tokens.
/// `cluster_size = None` gives every token the full sample. Rows that belong
/// to no sample attend only to themselves. Returns the neighborhoods and the
/// sort comparisons per sample.
pub fn batch_neighborhoods(rows: usize, samples: &[Vec<(usize, TokenKey)>], cluster_size: Option<usize>) -> Result<(Neighborhoods, Vec<u64>)> {
    let mut lists: Vec<Vec<usize>> = (0..rows).map(|r| vec![r]).collect();
    let mut comparisons = Vec::with_capacity(samples.len());
    for sample in samples {
        if sample.is_empty() {
            comparisons.push(0);
            continue;
        }
        let keys: Vec<TokenKey> = sample.iter().map(|&(_, k)| k).collect();
        let a = cluster(&keys, cluster_size.unwrap_or(keys.len()).max(1))?;
        comparisons.push(a.comparisons);
        for (i, &(row, _)) in sample.iter().enumerate() {
            if row >= rows {
                return Err(Error::Contract(format!("row {row} outside batch of {rows}")));
            }
            lists[row] = a.neighborhood(i).into_iter().map(|j| sample[j].0).collect();
        }
    }
    Ok((Neighborhoods::from_lists(&lists), comparisons))
}

/// One cluster-attention block over a single sample's tokens; `x` row `i`
/// belongs to `keys[i]`.
pub fn cluster_attention_block(tape: &mut Tape, store: &ParamStore, block: &Block, x: Var, keys: &[TokenKey], cluster_size: usize) -> Result<Var> {
    if tape.value(x).rows() != keys.len() {
        return Err(Error::shape("cluster_attention_block", format!("{} rows for {} keys", tape.value(x).rows(), keys.len())));
    }
    let sample: Vec<(usize, TokenKey)> = keys.iter().copied().enumerate().collect();
    let (hood, _) = batch_neighborhoods(keys.len(), &[sample], Some(cluster_size))?;
    let levels: Arc<[usize]> = keys.iter().map(|k| k.level.index()).collect();
    block.forward(tape, store, x, &Arc::new(hood), Some(&levels))
}
