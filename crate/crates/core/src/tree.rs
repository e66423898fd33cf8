//! Complete binary tree mathematics.
//!
//! Nodes are addressed either as `(level, index)` tuples, with the root at
//! `(0, 0)` and leaves at level `depth`, or by their heap position
//! `2^level - 1 + index`. Internal node `(t, i)` is driven by router neuron
//! `n = 2^t + i` (1-based), i.e. heap position `n - 1`. Its left child is
//! `(t + 1, 2i)` and its right child `(t + 1, 2i + 1)`.
//!
//! Pruned leaves are handled by redirection: an edge into a subtree without
//! any active leaf carries probability 0 and its sibling edge carries 1. The
//! router keeps its full parameter layout for the lifetime of a model.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported depth. `2^16` leaves is far beyond anything trainable.
pub const MAX_DEPTH: usize = 16;

/// How an internal node routes mass after pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRoute {
    /// Both subtrees hold active leaves; the router decides.
    Decide,
    /// Only the left subtree is alive.
    ForceLeft,
    /// Only the right subtree is alive.
    ForceRight,
    /// Nothing below is alive; the node is unreachable.
    Dead,
}

/// Complete binary tree of fixed depth with an active-leaf mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TopologyRecord", into = "TopologyRecord")]
pub struct TreeTopology {
    depth: usize,
    active: Vec<bool>,
    // heap layout over all nodes: does the subtree hold an active leaf?
    alive: Vec<bool>,
}

/// Text record of a topology: depth plus the mask as a bit string,
/// leaf 0 first (e.g. `"1101"`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyRecord {
    pub depth: usize,
    pub active_leaf_mask: String,
}

impl TreeTopology {
    /// Full tree with every leaf active.
    pub fn new(depth: usize) -> Result<Self> {
        check_depth(depth)?;
        Self::with_mask(depth, vec![true; 1 << depth])
    }

    pub fn with_mask(depth: usize, active: Vec<bool>) -> Result<Self> {
        check_depth(depth)?;
        if active.len() != 1 << depth {
            return Err(Error::invalid(format!(
                "mask has {} entries, depth {depth} needs {}",
                active.len(),
                1usize << depth
            )));
        }
        let n_active = active.iter().filter(|&&a| a).count();
        if n_active < 2 {
            return Err(Error::InvalidState(format!(
                "a tree needs at least 2 active leaves, mask has {n_active}"
            )));
        }
        let alive = compute_alive(depth, &active);
        Ok(Self {
            depth,
            active,
            alive,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// `K = 2^T - 1`.
    pub fn num_internal(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn num_leaves(&self) -> usize {
        1 << self.depth
    }

    /// Internal nodes plus leaves, `2^(T+1) - 1`.
    pub fn num_nodes(&self) -> usize {
        (1 << (self.depth + 1)) - 1
    }

    pub fn active_leaf_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn active_leaf_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn active_leaves(&self) -> impl Iterator<Item = usize> + '_ {
        self.active
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
    }

    pub fn is_active(&self, leaf: usize) -> bool {
        self.active.get(leaf).copied().unwrap_or(false)
    }

    pub fn is_valid_node(&self, level: usize, index: usize) -> bool {
        level <= self.depth && index < (1 << level)
    }

    /// Heap position of `(level, index)`.
    pub fn heap_index(level: usize, index: usize) -> usize {
        (1 << level) - 1 + index
    }

    /// Inverse of [`TreeTopology::heap_index`].
    pub fn node_of_heap(heap: usize) -> (usize, usize) {
        let level = (usize::BITS - (heap + 1).leading_zeros() - 1) as usize;
        (level, heap + 1 - (1 << level))
    }

    /// Does the subtree rooted at heap position `heap` contain an active leaf?
    pub fn is_alive(&self, heap: usize) -> bool {
        self.alive[heap]
    }

    /// Leaves `[start, end)` below `(level, index)`.
    pub fn subtree_leaves(&self, level: usize, index: usize) -> std::ops::Range<usize> {
        let width = 1 << (self.depth - level);
        index * width..(index + 1) * width
    }

    /// Routing behaviour of internal node at heap position `heap`.
    pub fn route_of(&self, heap: usize) -> NodeRoute {
        debug_assert!(heap < self.num_internal());
        match (self.alive[2 * heap + 1], self.alive[2 * heap + 2]) {
            (true, true) => NodeRoute::Decide,
            (true, false) => NodeRoute::ForceLeft,
            (false, true) => NodeRoute::ForceRight,
            (false, false) => NodeRoute::Dead,
        }
    }

    /// Deactivate one leaf. At least 3 leaves must be active beforehand.
    pub fn prune_leaf(&self, leaf: usize) -> Result<TreeTopology> {
        if leaf >= self.num_leaves() {
            return Err(Error::invalid(format!(
                "leaf {leaf} out of range for {} leaves",
                self.num_leaves()
            )));
        }
        if !self.active[leaf] {
            return Err(Error::invalid(format!("leaf {leaf} is already pruned")));
        }
        if self.active_leaf_count() <= 2 {
            return Err(Error::InvalidState(
                "cannot prune below 2 active leaves".into(),
            ));
        }
        let mut active = self.active.clone();
        active[leaf] = false;
        Self::with_mask(self.depth, active)
    }

    /// Level of the lowest common ancestor of two leaves.
    pub fn lca_level(&self, leaf_a: usize, leaf_b: usize) -> usize {
        let diff_bits = (usize::BITS - (leaf_a ^ leaf_b).leading_zeros()) as usize;
        self.depth - diff_bits
    }

    /// Number of edges on the path between two active leaves.
    pub fn leaf_tree_distance(&self, leaf_a: usize, leaf_b: usize) -> Result<usize> {
        for leaf in [leaf_a, leaf_b] {
            if !self.is_active(leaf) {
                return Err(Error::invalid(format!("leaf {leaf} is not active")));
            }
        }
        Ok(2 * (self.depth - self.lca_level(leaf_a, leaf_b)))
    }

    pub fn to_record(&self) -> TopologyRecord {
        TopologyRecord {
            depth: self.depth,
            active_leaf_mask: self.active.iter().map(|&a| if a { '1' } else { '0' }).collect(),
        }
    }
}

impl From<TreeTopology> for TopologyRecord {
    fn from(t: TreeTopology) -> Self {
        t.to_record()
    }
}

impl TryFrom<TopologyRecord> for TreeTopology {
    type Error = Error;

    fn try_from(r: TopologyRecord) -> Result<Self> {
        let mask = r
            .active_leaf_mask
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::Format(format!("bad mask character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        TreeTopology::with_mask(r.depth, mask)
    }
}

fn check_depth(depth: usize) -> Result<()> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::invalid(format!(
            "tree depth must be in 1..={MAX_DEPTH}, got {depth}"
        )));
    }
    Ok(())
}

fn compute_alive(depth: usize, active: &[bool]) -> Vec<bool> {
    let n_nodes = (1 << (depth + 1)) - 1;
    let first_leaf = (1 << depth) - 1;
    let mut alive = vec![false; n_nodes];
    alive[first_leaf..].copy_from_slice(active);
    for h in (0..first_leaf).rev() {
        alive[h] = alive[2 * h + 1] || alive[2 * h + 2];
    }
    alive
}

/// Root-to-node decision sequence; `false` = left, `true` = right.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PathCode(Vec<bool>);

impl PathCode {
    pub fn new(decisions: Vec<bool>) -> Self {
        PathCode(decisions)
    }

    /// Build from 0/1 digits.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::invalid(format!("path bit must be 0 or 1, got {other}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(PathCode)
    }

    /// Path that ends at `(level, index)`.
    pub fn to_node(level: usize, index: usize) -> Self {
        PathCode((0..level).map(|s| (index >> (level - 1 - s)) & 1 == 1).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn decisions(&self) -> &[bool] {
        &self.0
    }
}

/// Index of the node reached at `level` by the first `level` decisions of
/// `path`: `sum_{m=1..level} y_m 2^(level-m)`.
pub fn node_index(level: usize, path: &PathCode) -> Result<usize> {
    if path.len() < level {
        return Err(Error::invalid(format!(
            "path has {} decisions, level {level} needs that many",
            path.len()
        )));
    }
    Ok(path.0[..level]
        .iter()
        .fold(0usize, |acc, &right| (acc << 1) | usize::from(right)))
}

fn check_edge_probs(edge_left_prob: &[f64], topo: &TreeTopology) -> Result<()> {
    if edge_left_prob.len() != topo.num_internal() {
        return Err(Error::invalid(format!(
            "expected {} edge probabilities, got {}",
            topo.num_internal(),
            edge_left_prob.len()
        )));
    }
    if let Some(p) = edge_left_prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("edge probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Left/right multipliers for one internal node after redirection.
#[inline]
fn edge_pair(route: NodeRoute, p_left: f64) -> (f64, f64) {
    match route {
        NodeRoute::Decide => (p_left, 1.0 - p_left),
        NodeRoute::ForceLeft => (1.0, 0.0),
        NodeRoute::ForceRight => (0.0, 1.0),
        NodeRoute::Dead => (0.0, 0.0),
    }
}

/// Reach probability of every node (heap layout) for one sample.
pub fn node_posteriors(edge_left_prob: &[f64], topo: &TreeTopology) -> Result<Vec<f64>> {
    check_edge_probs(edge_left_prob, topo)?;
    let mut out = vec![0.0; topo.num_nodes()];
    fill_node_posteriors(edge_left_prob, topo, &mut out);
    Ok(out)
}

fn fill_node_posteriors(edge_left_prob: &[f64], topo: &TreeTopology, out: &mut [f64]) {
    out[0] = 1.0;
    for h in 0..topo.num_internal() {
        let (l, r) = edge_pair(topo.route_of(h), edge_left_prob[h]);
        out[2 * h + 1] = out[h] * l;
        out[2 * h + 2] = out[h] * r;
    }
}

/// Distribution over the `2^T` leaves for one sample.
pub fn leaf_posterior(edge_left_prob: &[f64], topo: &TreeTopology) -> Result<Vec<f64>> {
    let all = node_posteriors(edge_left_prob, topo)?;
    Ok(all[topo.num_internal()..].to_vec())
}

/// `P_t(x)` for each requested level.
pub fn level_posteriors(
    edge_left_prob: &[f64],
    topo: &TreeTopology,
    levels: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if let Some(&t) = levels.iter().find(|&&t| t > topo.depth()) {
        return Err(Error::invalid(format!(
            "level {t} outside [0, {}]",
            topo.depth()
        )));
    }
    let all = node_posteriors(edge_left_prob, topo)?;
    Ok(levels
        .iter()
        .map(|&t| {
            let start = TreeTopology::heap_index(t, 0);
            all[start..start + (1 << t)].to_vec()
        })
        .collect())
}

/// Hard cluster: argmax over active leaves, lowest index on ties.
pub fn assign_cluster(leaf_posterior: &[f64], topo: &TreeTopology) -> Result<usize> {
    if leaf_posterior.len() != topo.num_leaves() {
        return Err(Error::invalid(format!(
            "posterior has {} entries, tree has {} leaves",
            leaf_posterior.len(),
            topo.num_leaves()
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    for leaf in topo.active_leaves() {
        let p = leaf_posterior[leaf];
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((leaf, p));
        }
    }
    match best {
        Some((leaf, p)) if p > 0.0 => Ok(leaf),
        _ => Err(Error::Internal(
            "posterior has no mass on any active leaf".into(),
        )),
    }
}

/// Batched routing: edge probabilities and the induced node posteriors.
#[derive(Debug, Clone)]
pub struct RoutingTensor {
    edge_left_prob: Array2<f64>,
    node_posteriors: Array2<f64>,
}

impl RoutingTensor {
    /// `edge_left_prob` is `batch x K`.
    pub fn compute(edge_left_prob: Array2<f64>, topo: &TreeTopology) -> Result<Self> {
        if edge_left_prob.ncols() != topo.num_internal() {
            return Err(Error::invalid(format!(
                "routing has {} columns, tree has {} internal nodes",
                edge_left_prob.ncols(),
                topo.num_internal()
            )));
        }
        if let Some(p) = edge_left_prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("edge probability {p} outside [0, 1]")));
        }
        let routes: Vec<NodeRoute> = (0..topo.num_internal()).map(|h| topo.route_of(h)).collect();
        let mut node_posteriors = Array2::zeros((edge_left_prob.nrows(), topo.num_nodes()));
        for (p_row, mut out) in edge_left_prob.rows().into_iter().zip(node_posteriors.rows_mut()) {
            out[0] = 1.0;
            for (h, &route) in routes.iter().enumerate() {
                let (l, r) = edge_pair(route, p_row[h]);
                out[2 * h + 1] = out[h] * l;
                out[2 * h + 2] = out[h] * r;
            }
        }
        Ok(Self {
            edge_left_prob,
            node_posteriors,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.edge_left_prob.nrows()
    }

    pub fn edge_left_prob(&self) -> ArrayView2<'_, f64> {
        self.edge_left_prob.view()
    }

    /// All node reach probabilities, `batch x num_nodes`, heap layout.
    pub fn node_posteriors(&self) -> ArrayView2<'_, f64> {
        self.node_posteriors.view()
    }

    /// `P_t(x)` for every sample, `batch x 2^t`.
    pub fn level(&self, level: usize) -> ArrayView2<'_, f64> {
        let start = TreeTopology::heap_index(level, 0);
        self.node_posteriors.slice(s![.., start..start + (1 << level)])
    }

    pub fn leaves(&self) -> ArrayView2<'_, f64> {
        let first = (self.node_posteriors.ncols() - 1) / 2;
        self.node_posteriors.slice(s![.., first..])
    }

    /// Rows `range` as a new routing tensor.
    pub fn rows(&self, range: std::ops::Range<usize>) -> RoutingTensor {
        RoutingTensor {
            edge_left_prob: self.edge_left_prob.slice(s![range.clone(), ..]).to_owned(),
            node_posteriors: self.node_posteriors.slice(s![range, ..]).to_owned(),
        }
    }

    /// Hard assignment of every sample.
    pub fn assign(&self, topo: &TreeTopology) -> Result<Vec<usize>> {
        self.leaves()
            .rows()
            .into_iter()
            .map(|row| assign_cluster(&row.to_vec(), topo))
            .collect()
    }

    /// Pull a gradient on node posteriors back onto the raw left-edge
    /// probabilities. Redirected and dead nodes receive zero gradient.
    pub fn backward(&self, topo: &TreeTopology, grad_nodes: &Array2<f64>) -> Array2<f64> {
        let k = topo.num_internal();
        let routes: Vec<NodeRoute> = (0..k).map(|h| topo.route_of(h)).collect();
        let mut grad_edges = Array2::zeros(self.edge_left_prob.raw_dim());
        let mut total = vec![0.0; topo.num_nodes()];
        for b in 0..self.batch_size() {
            let post = self.node_posteriors.row(b);
            let probs = self.edge_left_prob.row(b);
            for h in (0..topo.num_nodes()).rev() {
                let mut g = grad_nodes[[b, h]];
                if h < k {
                    let (l, r) = edge_pair(routes[h], probs[h]);
                    g += l * total[2 * h + 1] + r * total[2 * h + 2];
                    if routes[h] == NodeRoute::Decide {
                        grad_edges[[b, h]] = post[h] * (total[2 * h + 1] - total[2 * h + 2]);
                    }
                }
                total[h] = g;
            }
        }
        grad_edges
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::close;

    mod approx_eq {
        pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
        }
    }

    /// Enumerate all root-to-leaf paths explicitly.
    fn enumerate_leaves(probs: &[f64], topo: &TreeTopology) -> Vec<f64> {
        let t = topo.depth();
        (0..1usize << t)
            .map(|leaf| {
                if !topo.is_active(leaf) {
                    return 0.0;
                }
                let path = PathCode::to_node(t, leaf);
                let mut p = 1.0;
                for s in 0..t {
                    let parent = TreeTopology::heap_index(s, node_index(s, &path).unwrap());
                    let went_right = path.decisions()[s];
                    let left_alive = topo.is_alive(2 * parent + 1);
                    let right_alive = topo.is_alive(2 * parent + 2);
                    let left = match (left_alive, right_alive) {
                        (true, true) => probs[parent],
                        (true, false) => 1.0,
                        _ => 0.0,
                    };
                    p *= if went_right { 1.0 - left } else { left };
                }
                p
            })
            .collect()
    }

    #[test]
    fn node_index_examples() {
        assert_eq!(node_index(0, &PathCode::default()).unwrap(), 0);
        assert_eq!(node_index(3, &PathCode::from_bits(&[1, 0, 1]).unwrap()).unwrap(), 5);
        assert_eq!(node_index(2, &PathCode::from_bits(&[1, 1]).unwrap()).unwrap(), 3);
        assert!(node_index(3, &PathCode::from_bits(&[1]).unwrap()).is_err());
        assert!(PathCode::from_bits(&[2]).is_err());
    }

    #[test]
    fn path_code_round_trips_node() {
        for level in 0..6 {
            for i in 0..1usize << level {
                assert_eq!(node_index(level, &PathCode::to_node(level, i)).unwrap(), i);
            }
        }
    }

    #[test]
    fn leaf_posterior_examples() {
        let t1 = TreeTopology::new(1).unwrap();
        assert_eq!(leaf_posterior(&[0.5], &t1).unwrap(), vec![0.5, 0.5]);

        let t2 = TreeTopology::new(2).unwrap();
        let probs = [0.8, 0.6, 0.3];
        let oracle = enumerate_leaves(&probs, &t2);
        assert!(close(&oracle, &[0.48, 0.32, 0.06, 0.14], 1e-12));
        assert!(close(&leaf_posterior(&probs, &t2).unwrap(), &oracle, 1e-12));

        let pruned0 = t2.prune_leaf(0).unwrap();
        let oracle = enumerate_leaves(&probs, &pruned0);
        assert!(close(&oracle, &[0.0, 0.8, 0.06, 0.14], 1e-12));
        assert_eq!(leaf_posterior(&probs, &pruned0).unwrap(), oracle);

        let pruned3 = t2.prune_leaf(3).unwrap();
        let oracle = enumerate_leaves(&probs, &pruned3);
        assert!(close(&oracle, &[0.48, 0.32, 0.20, 0.0], 1e-12));
        assert!(close(&leaf_posterior(&probs, &pruned3).unwrap(), &oracle, 1e-12));
    }

    #[test]
    fn leaf_posterior_rejects_bad_probability() {
        let t = TreeTopology::new(2).unwrap();
        assert!(leaf_posterior(&[0.5, 1.2, 0.5], &t).is_err());
        assert!(leaf_posterior(&[0.5, f64::NAN, 0.5], &t).is_err());
        assert!(leaf_posterior(&[0.5, 0.5], &t).is_err());
    }

    #[test]
    fn level_posterior_examples() {
        let t2 = TreeTopology::new(2).unwrap();
        let probs = [0.8, 0.6, 0.3];
        let levels = level_posteriors(&probs, &t2, &[0, 1, 2]).unwrap();
        assert_eq!(levels[0], vec![1.0]);
        assert!(close(&levels[1], &[0.8, 0.2], 1e-12));
        assert_eq!(levels[2], leaf_posterior(&probs, &t2).unwrap());
        assert!(level_posteriors(&probs, &t2, &[3]).is_err());
    }

    #[test]
    fn assign_cluster_examples() {
        let t = TreeTopology::new(2).unwrap();
        assert_eq!(assign_cluster(&[0.1, 0.7, 0.1, 0.1], &t).unwrap(), 1);
        assert_eq!(assign_cluster(&[0.4, 0.4, 0.1, 0.1], &t).unwrap(), 0);
        let pruned = t.prune_leaf(1).unwrap();
        assert_eq!(assign_cluster(&[0.3, 0.0, 0.5, 0.2], &pruned).unwrap(), 2);
        // pruned leaf never wins, even with stale mass
        assert_eq!(assign_cluster(&[0.1, 0.9, 0.0, 0.0], &pruned).unwrap(), 0);
        assert!(matches!(
            assign_cluster(&[0.0; 4], &t),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn prune_examples() {
        let t = TreeTopology::new(2).unwrap();
        let p = t.prune_leaf(3).unwrap();
        assert_eq!(p.active_leaf_mask(), &[true, true, true, false]);
        assert_eq!(p.to_record().active_leaf_mask, "1110");

        // both children of node (1,1) gone: root's right edge carries 0
        let p = p.prune_leaf(2).unwrap();
        assert_eq!(p.route_of(0), NodeRoute::ForceLeft);
        assert_eq!(p.route_of(2), NodeRoute::Dead);
        let leaves = leaf_posterior(&[0.8, 0.6, 0.3], &p).unwrap();
        assert!(close(&leaves, &[0.6, 0.4, 0.0, 0.0], 1e-12));

        assert!(matches!(p.prune_leaf(0), Err(Error::InvalidState(_))));
        assert!(matches!(
            t.prune_leaf(3).unwrap().prune_leaf(3),
            Err(Error::InvalidArgument(_))
        ));
        assert!(TreeTopology::with_mask(2, vec![true, false, false, false]).is_err());
    }

    #[test]
    fn distance_examples() {
        let t = TreeTopology::new(2).unwrap();
        assert_eq!(t.leaf_tree_distance(0, 1).unwrap(), 2);
        assert_eq!(t.leaf_tree_distance(0, 3).unwrap(), 4);
        for leaf in 0..4 {
            assert_eq!(t.leaf_tree_distance(leaf, leaf).unwrap(), 0);
        }
        let p = t.prune_leaf(1).unwrap();
        assert!(p.leaf_tree_distance(0, 1).is_err());
    }

    #[test]
    fn distance_matches_bfs() {
        use std::collections::VecDeque;
        for depth in 1..=5 {
            let t = TreeTopology::new(depth).unwrap();
            let n = t.num_nodes();
            let neighbours = |h: usize| {
                let mut v = Vec::new();
                if h > 0 {
                    v.push((h - 1) / 2);
                }
                if 2 * h + 2 < n {
                    v.push(2 * h + 1);
                    v.push(2 * h + 2);
                }
                v
            };
            let first = t.num_internal();
            for a in 0..t.num_leaves() {
                let mut dist = vec![usize::MAX; n];
                let mut queue = VecDeque::from([first + a]);
                dist[first + a] = 0;
                while let Some(h) = queue.pop_front() {
                    for g in neighbours(h) {
                        if dist[g] == usize::MAX {
                            dist[g] = dist[h] + 1;
                            queue.push_back(g);
                        }
                    }
                }
                for b in 0..t.num_leaves() {
                    assert_eq!(t.leaf_tree_distance(a, b).unwrap(), dist[first + b]);
                }
            }
        }
    }

    #[test]
    fn record_round_trip() {
        let t = TreeTopology::new(3).unwrap().prune_leaf(5).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"{"depth":3,"active_leaf_mask":"11111011"}"#);
        let back: TreeTopology = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<TreeTopology>(r#"{"depth":2,"active_leaf_mask":"1x11"}"#).is_err());
    }

    #[test]
    fn heap_round_trip() {
        for h in 0..63 {
            let (l, i) = TreeTopology::node_of_heap(h);
            assert_eq!(TreeTopology::heap_index(l, i), h);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let t = TreeTopology::new(3).unwrap().prune_leaf(6).unwrap();
        let probs = Array2::from_shape_vec(
            (2, 7),
            vec![0.3, 0.6, 0.45, 0.2, 0.7, 0.55, 0.35, 0.6, 0.5, 0.4, 0.3, 0.8, 0.1, 0.9],
        )
        .unwrap();
        let weights = Array2::from_shape_fn((2, t.num_nodes()), |(b, h)| {
            ((b * 31 + h * 17) % 11) as f64 / 7.0 - 0.6
        });
        let objective = |p: &Array2<f64>| {
            let r = RoutingTensor::compute(p.clone(), &t).unwrap();
            (&r.node_posteriors * &weights).sum()
        };
        let r = RoutingTensor::compute(probs.clone(), &t).unwrap();
        let grad = r.backward(&t, &weights);
        let eps = 1e-6;
        for idx in ndarray::indices(probs.dim()) {
            let mut up = probs.clone();
            up[idx] += eps;
            let mut down = probs.clone();
            down[idx] -= eps;
            let fd = (objective(&up) - objective(&down)) / (2.0 * eps);
            assert!((fd - grad[idx]).abs() < 1e-8, "{idx:?}: {fd} vs {}", grad[idx]);
        }
    }
}
