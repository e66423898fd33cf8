//! Training objectives.
//!
//! * level similarity: Bhattacharyya coefficient between two level posteriors
//! * hierarchical contrastive loss: mean cross-pair similarity minus mean
//!   positive-pair similarity, summed over tree levels
//! * R1: per-node cross-entropy against a balanced `[0.5, 0.5]` split
//! * R2: NT-Xent on the contrast-head embeddings
//!
//! Every batched term has a `*_with_grad` form returning analytic gradients
//! with respect to its direct inputs. Probabilities are clamped to
//! `[epsilon, 1 - epsilon]` before any square root or logarithm.

use std::ops::Range;

use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{NodeRoute, RoutingTensor, TreeTopology};

/// Which tree levels the similarity sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelRange {
    /// Levels `1..=T`. The constant root term is dropped and the leaves count.
    #[default]
    IncludeLeaves,
    /// Levels `0..T`, leaves excluded. The deepest router neurons then get
    /// no gradient from the contrastive term.
    PaperLiteral,
}

impl LevelRange {
    pub fn levels(self, depth: usize) -> Range<usize> {
        match self {
            LevelRange::IncludeLeaves => 1..depth + 1,
            LevelRange::PaperLiteral => 0..depth,
        }
    }

    /// Contiguous heap columns covering the summed levels.
    fn heap_columns(self, depth: usize) -> Range<usize> {
        let levels = self.levels(depth);
        TreeTopology::heap_index(levels.start, 0)..TreeTopology::heap_index(levels.end, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub temperature: f64,
    pub level_range: LevelRange,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_depth(4)
    }
}

impl LossConfig {
    /// Defaults for a tree of the given depth: `beta1 = 2^-T`, `beta2 = 1`.
    pub fn for_depth(depth: usize) -> Self {
        Self {
            beta1: 0.5f64.powi(depth as i32),
            beta2: 1.0,
            temperature: 0.5,
            level_range: LevelRange::IncludeLeaves,
            epsilon: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 >= 0.0 && self.beta1.is_finite()) {
            return Err(Error::config("loss.beta1", "must be a finite value >= 0"));
        }
        if !(self.beta2 >= 0.0 && self.beta2.is_finite()) {
            return Err(Error::config("loss.beta2", "must be a finite value >= 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("loss.temperature", "must be > 0"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.1) {
            return Err(Error::config("loss.epsilon", "must lie in (0, 0.1)"));
        }
        Ok(())
    }
}

/// Loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cohi: f64,
    pub r1: f64,
    pub r2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(cohi: f64, r1: f64, r2: f64, cfg: &LossConfig) -> Self {
        Self {
            cohi,
            r1,
            r2,
            total: cohi + cfg.beta1 * r1 + cfg.beta2 * r2,
        }
    }
}

#[inline]
fn clamp_prob(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

/// Bhattacharyya coefficient `sum_i sqrt(P_i Q_i)` of two distributions.
///
/// `eps = 0` gives the exact coefficient; a positive `eps` clamps every
/// probability into `[eps, 1 - eps]` first, as the training path does.
pub fn level_similarity(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "distributions differ in length: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for (name, dist) in [("P", p), ("Q", q)] {
        if dist.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid(format!("{name} has a negative or NaN entry")));
        }
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!("{name} sums to {total}, not 1")));
        }
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            if eps > 0.0 {
                (clamp_prob(a, eps) * clamp_prob(b, eps)).sqrt()
            } else {
                (a * b).sqrt()
            }
        })
        .sum())
}

/// Similarity of two samples summed over the configured levels. Inputs are
/// per-sample node posteriors in heap layout.
pub fn pair_similarity(
    nodes_a: ArrayView1<'_, f64>,
    nodes_b: ArrayView1<'_, f64>,
    topo: &TreeTopology,
    cfg: &LossConfig,
) -> Result<f64> {
    if nodes_a.len() != topo.num_nodes() || nodes_b.len() != topo.num_nodes() {
        return Err(Error::invalid(format!(
            "routings have {} and {} nodes, topology has {}",
            nodes_a.len(),
            nodes_b.len(),
            topo.num_nodes()
        )));
    }
    let cols = cfg.level_range.heap_columns(topo.depth());
    Ok(nodes_a
        .slice(s![cols.clone()])
        .iter()
        .zip(nodes_b.slice(s![cols]))
        .map(|(&a, &b)| (clamp_prob(a, cfg.epsilon) * clamp_prob(b, cfg.epsilon)).sqrt())
        .sum())
}

fn check_pair_routings(anchors: &RoutingTensor, views: &RoutingTensor, topo: &TreeTopology) -> Result<usize> {
    let n = anchors.batch_size();
    if views.batch_size() != n {
        return Err(Error::invalid(format!(
            "{n} anchors but {} views",
            views.batch_size()
        )));
    }
    if n < 2 {
        return Err(Error::invalid("contrastive loss needs a batch of at least 2"));
    }
    for r in [anchors, views] {
        if r.node_posteriors().ncols() != topo.num_nodes() {
            return Err(Error::invalid("routing was computed for a different topology"));
        }
    }
    Ok(n)
}

/// Hierarchical contrastive loss over positionally paired anchors and views.
pub fn cohi_loss(
    anchors: &RoutingTensor,
    views: &RoutingTensor,
    topo: &TreeTopology,
    cfg: &LossConfig,
) -> Result<f64> {
    cohi_loss_with_grad(anchors, views, topo, cfg).map(|(v, _, _)| v)
}

/// As [`cohi_loss`], plus gradients on the anchor and view node posteriors.
pub fn cohi_loss_with_grad(
    anchors: &RoutingTensor,
    views: &RoutingTensor,
    topo: &TreeTopology,
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let n = check_pair_routings(anchors, views, topo)?;
    let cols = cfg.level_range.heap_columns(topo.depth());
    let eps = cfg.epsilon;

    let sqrt_features = |r: &RoutingTensor| {
        r.node_posteriors()
            .slice(s![.., cols.clone()])
            .mapv(|p| clamp_prob(p, eps).sqrt())
    };
    let a = sqrt_features(anchors);
    let v = sqrt_features(views);
    // sims[j, i] = s(x_j, x~_i)
    let sims = a.dot(&v.t());

    let nf = n as f64;
    let neg_w = 1.0 / (nf * (nf - 1.0));
    let pos_w = 1.0 / nf;
    let trace: f64 = sims.diag().sum();
    let loss = neg_w * (sims.sum() - trace) - pos_w * trace;

    let mut w = Array2::from_elem((n, n), neg_w);
    w.diag_mut().fill(-pos_w);
    let grad_a_feat = w.dot(&v);
    let grad_v_feat = w.t().dot(&a);

    let lift = |r: &RoutingTensor, feats: &Array2<f64>, grad_feat: Array2<f64>| {
        let mut g = Array2::zeros((n, topo.num_nodes()));
        let post = r.node_posteriors();
        let post = post.slice(s![.., cols.clone()]);
        Zip::from(g.slice_mut(s![.., cols.clone()]))
            .and(&post)
            .and(feats)
            .and(&grad_feat)
            .for_each(|out, &p, &sq, &gf| {
                if p > eps && p < 1.0 - eps {
                    *out = gf / (2.0 * sq);
                }
            });
        g
    };
    let grad_anchor = lift(anchors, &a, grad_a_feat);
    let grad_view = lift(views, &v, grad_v_feat);
    Ok((loss, grad_anchor, grad_view))
}

/// Balance regularizer over every routing row supplied (anchors and views).
pub fn r1_balance(routing: &RoutingTensor, topo: &TreeTopology, eps: f64) -> Result<f64> {
    r1_balance_with_grad(routing, topo, eps).map(|(v, _, _)| v)
}

/// Returns the value plus gradients on node posteriors and on raw left-edge
/// probabilities. Only nodes where the router actually decides contribute;
/// redirected or unreachable nodes add nothing.
pub fn r1_balance_with_grad(
    routing: &RoutingTensor,
    topo: &TreeTopology,
    eps: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let batch = routing.batch_size();
    if batch == 0 {
        return Err(Error::invalid("balance regularizer needs at least one sample"));
    }
    if routing.edge_left_prob().ncols() != topo.num_internal() {
        return Err(Error::invalid("routing was computed for a different topology"));
    }
    let post = routing.node_posteriors();
    let probs = routing.edge_left_prob();
    let mut grad_nodes = Array2::zeros((batch, topo.num_nodes()));
    let mut grad_edges = Array2::zeros((batch, topo.num_internal()));
    let mut total = 0.0;

    for h in 0..topo.num_internal() {
        if topo.route_of(h) != NodeRoute::Decide {
            continue;
        }
        let reach = post.column(h);
        let p_left = probs.column(h);
        let den: f64 = reach.sum();
        if den <= f64::MIN_POSITIVE {
            continue;
        }
        let num: f64 = reach.iter().zip(p_left).map(|(r, p)| r * p).sum();
        let alpha = num / den;
        let alpha_c = clamp_prob(alpha, eps);
        total += -0.5 * alpha_c.ln() - 0.5 * (1.0 - alpha_c).ln();
        if alpha <= eps || alpha >= 1.0 - eps {
            continue;
        }
        let d_alpha = -0.5 / alpha + 0.5 / (1.0 - alpha);
        for b in 0..batch {
            grad_nodes[[b, h]] = d_alpha * (p_left[b] - alpha) / den;
            grad_edges[[b, h]] = d_alpha * reach[b] / den;
        }
    }
    Ok((total, grad_nodes, grad_edges))
}

/// NT-Xent over `2N` embeddings where `anchors[j]` pairs with `views[j]`.
pub fn ntxent(anchors: ArrayView2<'_, f64>, views: ArrayView2<'_, f64>, temperature: f64) -> Result<f64> {
    ntxent_with_grad(anchors, views, temperature).map(|(v, _, _)| v)
}

pub fn ntxent_with_grad(
    anchors: ArrayView2<'_, f64>,
    views: ArrayView2<'_, f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let n = anchors.nrows();
    if views.dim() != anchors.dim() {
        return Err(Error::invalid(format!(
            "anchor embeddings {:?} and view embeddings {:?} differ in shape",
            anchors.dim(),
            views.dim()
        )));
    }
    if n < 2 {
        return Err(Error::invalid("NT-Xent needs a batch of at least 2"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let h = concatenate(Axis(0), &[anchors, views]).expect("shapes checked");
    let m = 2 * n;
    let norms: Vec<f64> = h.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&nrm| !(nrm > 1e-12) || !nrm.is_finite()) {
        return Err(Error::Numeric(format!(
            "embedding {i} has norm {}, cosine similarity undefined",
            norms[i]
        )));
    }
    let mut u = h.clone();
    for (mut row, &nrm) in u.rows_mut().into_iter().zip(&norms) {
        row /= nrm;
    }
    let logits = u.dot(&u.t()) / temperature;

    let mut loss = 0.0;
    let mut grad_logits = Array2::zeros((m, m));
    for i in 0..m {
        let pos = (i + n) % m;
        let row = logits.row(i);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for k in (0..m).filter(|&k| k != i) {
            denom += (row[k] - max).exp();
        }
        loss += max + denom.ln() - row[pos];
        for k in (0..m).filter(|&k| k != i) {
            let soft = (row[k] - max).exp() / denom;
            grad_logits[[i, k]] = (soft - if k == pos { 1.0 } else { 0.0 }) / m as f64;
        }
    }
    loss /= m as f64;

    let sym = &grad_logits + &grad_logits.t();
    let grad_u = sym.dot(&u) / temperature;
    let mut grad_h = Array2::zeros((m, h.ncols()));
    for i in 0..m {
        let ui = u.row(i);
        let gi = grad_u.row(i);
        let radial = ui.dot(&gi);
        let mut out = grad_h.row_mut(i);
        out.assign(&((&gi - &(&ui * radial)) / norms[i]));
    }
    let grad_views = grad_h.slice(s![n.., ..]).to_owned();
    grad_h.slice_collapse(s![..n, ..]);
    Ok((loss, grad_h, grad_views))
}

/// Gradients of the total loss with respect to its direct inputs.
#[derive(Debug, Clone)]
pub struct LossGradients {
    /// `2N x K`, on the raw router outputs.
    pub edge_left_prob: Array2<f64>,
    /// `2N x M`, on the contrast-head embeddings.
    pub contrast: Array2<f64>,
}

/// Evaluate `cohi + beta1 * r1 + beta2 * r2`.
///
/// `routing` and `contrast` hold anchors in rows `0..N` and their views in
/// rows `N..2N`.
pub fn total_loss(
    routing: &RoutingTensor,
    contrast: ArrayView2<'_, f64>,
    topo: &TreeTopology,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    total_loss_with_grad(routing, contrast, topo, cfg).map(|(b, _)| b)
}

pub fn total_loss_with_grad(
    routing: &RoutingTensor,
    contrast: ArrayView2<'_, f64>,
    topo: &TreeTopology,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGradients)> {
    let rows = routing.batch_size();
    if rows % 2 != 0 || contrast.nrows() != rows {
        return Err(Error::invalid(format!(
            "expected 2N paired rows, got {rows} routings and {} embeddings",
            contrast.nrows()
        )));
    }
    let n = rows / 2;
    let anchors = routing.rows(0..n);
    let views = routing.rows(n..rows);

    let (cohi, g_anchor, g_view) = cohi_loss_with_grad(&anchors, &views, topo, cfg)?;
    let (r1, g_r1_nodes, g_r1_edges) = r1_balance_with_grad(routing, topo, cfg.epsilon)?;
    let (r2, g_r2_a, g_r2_v) = ntxent_with_grad(
        contrast.slice(s![..n, ..]),
        contrast.slice(s![n.., ..]),
        cfg.temperature,
    )?;

    let mut grad_nodes = concatenate(Axis(0), &[g_anchor.view(), g_view.view()]).expect("same width");
    grad_nodes.scaled_add(cfg.beta1, &g_r1_nodes);
    let mut grad_edges = routing.backward(topo, &grad_nodes);
    grad_edges.scaled_add(cfg.beta1, &g_r1_edges);

    let mut grad_contrast = concatenate(Axis(0), &[g_r2_a.view(), g_r2_v.view()]).expect("same width");
    grad_contrast *= cfg.beta2;

    let breakdown = LossBreakdown::combine(cohi, r1, r2, cfg);
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {breakdown:?}")));
    }
    Ok((
        breakdown,
        LossGradients {
            edge_left_prob: grad_edges,
            contrast: grad_contrast,
        },
    ))
}
