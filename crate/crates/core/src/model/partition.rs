use super::QModel;
use crate::error::{Error, Result};

/// Greedy contiguous split of `weights` into exactly `k` non-empty groups
/// with a given capacity. Returns the group of every item.
fn pack(weights: &[usize], k: usize, cap: usize) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let (mut block, mut load) = (0, 0);
    for i in 0..n {
        out.push(block);
        load += weights[i];
        let rest = n - i - 1;
        if rest == 0 {
            break;
        }
        let blocks_left = k - block - 1;
        if rest == blocks_left || (blocks_left > 0 && load + weights[i + 1] > cap) {
            block += 1;
            load = 0;
        }
    }
    out
}

fn groups_needed(weights: &[usize], cap: usize) -> usize {
    let (mut groups, mut load) = (1, 0);
    for &w in weights {
        if load > 0 && load + w > cap {
            groups += 1;
            load = 0;
        }
        load += w;
    }
    groups
}

/// Contiguous partition of the parameterized layers into `k` blocks.
///
/// The capacity is the smallest maximum block size for which left-to-right
/// greedy packing needs at most `k` blocks; packing then closes blocks early
/// where needed so that every block is non-empty.
pub fn partition_blocks(model: &QModel, k: usize) -> Result<Vec<Option<usize>>> {
    let idx: Vec<usize> = (0..model.num_layers())
        .filter(|&i| model.layer(i).has_params())
        .collect();
    if k == 0 || idx.len() < k {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} trainable layers into {k} blocks",
            idx.len()
        )));
    }
    let weights: Vec<usize> = idx.iter().map(|&i| model.layer(i).d_w()).collect();
    let (mut lo, mut hi) = (
        *weights.iter().max().unwrap(),
        weights.iter().sum::<usize>(),
    );
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if groups_needed(&weights, mid) <= k {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let groups = pack(&weights, k, lo);
    let mut block_of = vec![None; model.num_layers()];
    for (&i, g) in idx.iter().zip(groups) {
        block_of[i] = Some(g);
    }
    Ok(block_of)
}
