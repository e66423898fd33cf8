//! Brute-force reference implementations, written without the library's
//! tree or metric code.
#![allow(dead_code)]

/// Does any active leaf sit in `[start, end)`?
fn any_active(mask: &[bool], start: usize, end: usize) -> bool {
    mask[start..end].iter().any(|&a| a)
}

/// Leaf distribution by walking every root-to-leaf path. `edges` is in
/// heap order over internal nodes; a step into a subtree without active
/// leaves has probability 0, and its sibling step then has probability 1.
pub fn leaf_posterior_by_paths(edges: &[f64], mask: &[bool]) -> Vec<f64> {
    let leaves = mask.len();
    let depth = leaves.trailing_zeros() as usize;
    (0..leaves)
        .map(|leaf| {
            let mut p = 1.0;
            let (mut node, mut lo, mut width) = (0usize, 0usize, leaves);
            for step in 0..depth {
                let right = (leaf >> (depth - 1 - step)) & 1 == 1;
                let half = width / 2;
                let left_alive = any_active(mask, lo, lo + half);
                let right_alive = any_active(mask, lo + half, lo + width);
                p *= match (left_alive, right_alive, right) {
                    (true, true, false) => edges[node],
                    (true, true, true) => 1.0 - edges[node],
                    (true, false, false) | (false, true, true) => 1.0,
                    _ => 0.0,
                };
                node = 2 * node + 1 + usize::from(right);
                if right {
                    lo += half;
                }
                width = half;
            }
            p
        })
        .collect()
}

/// Reach of every node at `level`, summed from the leaf distribution.
pub fn level_from_leaves(leaf_post: &[f64], level: usize) -> Vec<f64> {
    let width = leaf_post.len() >> level;
    leaf_post.chunks(width).map(|c| c.iter().sum()).collect()
}

/// Hierarchical contrastive loss by explicit loops over every
/// (anchor, view) pair and every level in `levels`.
pub fn cohi_by_pairs(anchors: &[Vec<f64>], views: &[Vec<f64>], levels: std::ops::Range<usize>, eps: f64) -> f64 {
    let n = anchors.len();
    let sim = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for t in levels.clone() {
            let pa = level_from_leaves(a, t);
            let pb = level_from_leaves(b, t);
            for (x, y) in pa.iter().zip(&pb) {
                s += (x.clamp(eps, 1.0 - eps) * y.clamp(eps, 1.0 - eps)).sqrt();
            }
        }
        s
    };
    let (mut pos, mut neg) = (0.0, 0.0);
    for j in 0..n {
        for i in 0..n {
            let s = sim(&anchors[j], &views[i]);
            if i == j {
                pos += s;
            } else {
                neg += s;
            }
        }
    }
    neg / (n * (n - 1)) as f64 - pos / n as f64
}

/// Level of the lowest common ancestor, by halving both indices.
pub fn lca_level(depth: usize, mut a: usize, mut b: usize) -> usize {
    let mut level = depth;
    while a != b {
        a /= 2;
        b /= 2;
        level -= 1;
    }
    level
}

/// Dendrogram purity over every unordered same-class pair.
pub fn purity_by_pairs(depth: usize, leaves: &[usize], classes: &[usize]) -> f64 {
    let n = leaves.len();
    let (mut acc, mut pairs) = (0.0, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            if classes[i] != classes[j] {
                continue;
            }
            let level = lca_level(depth, leaves[i], leaves[j]);
            let root = leaves[i] >> (depth - level);
            let (mut size, mut same) = (0u64, 0u64);
            for k in 0..n {
                if leaves[k] >> (depth - level) == root {
                    size += 1;
                    same += u64::from(classes[k] == classes[i]);
                }
            }
            acc += same as f64 / size as f64;
            pairs += 1;
        }
    }
    acc / pairs as f64
}

/// Mean leaf-to-leaf edge count between classes over ordered pairs of
/// distinct samples. Entries without any pair stay 0.
pub fn class_distance_by_pairs(depth: usize, leaves: &[usize], classes: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut sum = vec![vec![0.0; k]; k];
    let mut count = vec![vec![0u64; k]; k];
    for i in 0..leaves.len() {
        for j in 0..leaves.len() {
            if i == j {
                continue;
            }
            let d = 2 * (depth - lca_level(depth, leaves[i], leaves[j]));
            sum[classes[i]][classes[j]] += d as f64;
            count[classes[i]][classes[j]] += 1;
        }
    }
    for a in 0..k {
        for b in 0..k {
            if count[a][b] > 0 {
                sum[a][b] /= count[a][b] as f64;
            }
        }
    }
    sum
}
