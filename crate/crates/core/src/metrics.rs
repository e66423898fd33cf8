//! External clustering metrics against held-out labels.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::Array2;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::TreeTopology;

/// Predicted leaves and true classes for the same samples.
#[derive(Debug, Clone)]
pub struct LabeledAssignment {
    leaves: Vec<usize>,
    classes: Vec<usize>,
    num_classes: usize,
    topology: TreeTopology,
}

impl LabeledAssignment {
    pub fn new(leaves: Vec<usize>, classes: Vec<usize>, num_classes: usize, topology: TreeTopology) -> Result<Self> {
        if leaves.len() != classes.len() {
            return Err(Error::invalid(format!(
                "{} predictions but {} labels",
                leaves.len(),
                classes.len()
            )));
        }
        if let Some(&leaf) = leaves.iter().find(|&&l| !topology.is_active(l)) {
            return Err(Error::invalid(format!("prediction {leaf} is not an active leaf")));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::invalid(format!("class {c} out of range ({num_classes} classes)")));
        }
        Ok(Self {
            leaves,
            classes,
            num_classes,
            topology,
        })
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn topology(&self) -> &TreeTopology {
        &self.topology
    }

    /// `counts[leaf][class]` over all leaves of the complete tree.
    pub fn leaf_class_counts(&self) -> Vec<Vec<u64>> {
        let mut counts = vec![vec![0u64; self.num_classes]; self.topology.num_leaves()];
        for (&l, &c) in self.leaves.iter().zip(&self.classes) {
            counts[l][c] += 1;
        }
        counts
    }
}

/// Contingency table over the distinct values of each labeling.
fn contingency(a: &[usize], b: &[usize]) -> Vec<Vec<u64>> {
    let dense = |xs: &[usize]| {
        let map: BTreeMap<usize, usize> = xs
            .iter()
            .copied()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, v)| (v, i))
            .collect();
        (xs.iter().map(|v| map[v]).collect::<Vec<_>>(), map.len())
    };
    let (da, ka) = dense(a);
    let (db, kb) = dense(b);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&i, &j) in da.iter().zip(&db) {
        table[i][j] += 1;
    }
    table
}

fn entropy(counts: impl Iterator<Item = u64>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of both entropies.
/// Two constant labelings score 1.
pub fn nmi(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "labelings differ in length");
    let n = pred.len() as f64;
    if pred.is_empty() {
        return 1.0;
    }
    let table = contingency(pred, truth);
    let rows: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<u64> = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let (hu, hv) = (entropy(rows.iter().copied(), n), entropy(cols.iter().copied(), n));
    if hu == 0.0 && hv == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (rows[i] as f64 * cols[j] as f64)).ln();
            }
        }
    }
    (mi / (0.5 * (hu + hv))).clamp(0.0, 1.0)
}

/// Best one-to-one cluster-to-class accuracy. The contingency table is
/// zero-padded to a square, so surplus clusters score nothing.
pub fn acc(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "labelings differ in length");
    if pred.is_empty() {
        return 1.0;
    }
    let table = contingency(pred, truth);
    let m = table.len().max(table[0].len());
    let mut weights = Matrix::new(m, m, 0i64);
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            weights[(i, j)] = c as i64;
        }
    }
    let (total, _) = kuhn_munkres(&weights);
    total as f64 / pred.len() as f64
}

fn choose2(x: u64) -> f64 {
    x as f64 * (x as f64 - 1.0) / 2.0
}

/// Adjusted Rand index from pair counts. Returns 1 when both partitions
/// are trivial in the same way (the index is undefined there).
pub fn ari(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "labelings differ in length");
    let n = pred.len() as u64;
    if n < 2 {
        return 1.0;
    }
    let table = contingency(pred, truth);
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let a: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let b: f64 = (0..table[0].len())
        .map(|j| choose2(table.iter().map(|r| r[j]).sum()))
        .sum();
    let expected = a * b / choose2(n);
    let max = 0.5 * (a + b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Number of same-class unordered pairs.
fn same_class_pairs(counts: &[Vec<u64>], num_classes: usize) -> Vec<u64> {
    (0..num_classes)
        .map(|k| {
            let n: u64 = counts.iter().map(|r| r[k]).sum();
            n * n.saturating_sub(1) / 2
        })
        .collect()
}

/// Per-node `(class counts, size)` over subtrees, in heap order.
fn subtree_counts(topo: &TreeTopology, counts: &[Vec<u64>], num_classes: usize) -> Vec<(Vec<u64>, u64)> {
    (0..topo.num_nodes())
        .map(|h| {
            let (level, i) = TreeTopology::node_of_heap(h);
            let mut per = vec![0u64; num_classes];
            for leaf in topo.subtree_leaves(level, i) {
                for (p, &c) in per.iter_mut().zip(&counts[leaf]) {
                    *p += c;
                }
            }
            let size = per.iter().sum();
            (per, size)
        })
        .collect()
}

/// Heap index of the lowest common ancestor of two leaves.
fn lca_heap(topo: &TreeTopology, a: usize, b: usize) -> usize {
    let level = topo.lca_level(a, b);
    TreeTopology::heap_index(level, a >> (topo.depth() - level))
}

/// Exact dendrogram purity: mean over unordered same-class pairs of the
/// fraction of that class inside the subtree rooted at the pair's lowest
/// common ancestor. Aggregated per (leaf, leaf, class), so the cost does
/// not grow with the number of pairs.
pub fn dendrogram_purity(assign: &LabeledAssignment) -> Result<f64> {
    let topo = &assign.topology;
    let k = assign.num_classes;
    let counts = assign.leaf_class_counts();
    let pairs = same_class_pairs(&counts, k);
    let total: u64 = pairs.iter().sum();
    if total == 0 {
        return Err(Error::invalid("no pair of samples shares a class"));
    }
    let sub = subtree_counts(topo, &counts, k);
    let leaves = topo.num_leaves();
    let mut acc = 0.0;
    for a in 0..leaves {
        for b in a..leaves {
            let (per, size) = &sub[lca_heap(topo, a, b)];
            for c in 0..k {
                let weight = if a == b {
                    choose2(counts[a][c])
                } else {
                    counts[a][c] as f64 * counts[b][c] as f64
                };
                if weight > 0.0 {
                    acc += weight * per[c] as f64 / *size as f64;
                }
            }
        }
    }
    Ok(acc / total as f64)
}

/// Monte-Carlo dendrogram purity over `samples` uniformly drawn same-class
/// pairs.
pub fn dendrogram_purity_sampled(assign: &LabeledAssignment, samples: usize, seed: u64) -> Result<f64> {
    let topo = &assign.topology;
    let k = assign.num_classes;
    let counts = assign.leaf_class_counts();
    let pairs = same_class_pairs(&counts, k);
    let total: u64 = pairs.iter().sum();
    if total == 0 {
        return Err(Error::invalid("no pair of samples shares a class"));
    }
    if samples == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let sub = subtree_counts(topo, &counts, k);
    let mut members = vec![Vec::new(); k];
    for (i, &c) in assign.classes.iter().enumerate() {
        members[c].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..samples {
        let mut r = rng.random_range(0..total);
        let c = pairs
            .iter()
            .position(|&p| {
                if r < p {
                    true
                } else {
                    r -= p;
                    false
                }
            })
            .unwrap_or(k - 1);
        let m = &members[c];
        let i = rng.random_range(0..m.len());
        let mut j = rng.random_range(0..m.len() - 1);
        if j >= i {
            j += 1;
        }
        let (per, size) = &sub[lca_heap(topo, assign.leaves[m[i]], assign.leaves[m[j]])];
        acc += per[c] as f64 / *size as f64;
    }
    Ok(acc / samples as f64)
}

/// Mean tree distance between classes, in edges.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistanceMatrix {
    pub class_names: Vec<String>,
    pub values: Array2<f64>,
    /// Classes with fewer than two samples; their diagonal entry is 0 by
    /// convention (and their row is 0 when they have no samples at all).
    pub undersized: Vec<bool>,
}

/// `d(A, B)` averages the leaf distance over all cross pairs; `d(A, A)`
/// over distinct within-class pairs.
pub fn class_distance_matrix(assign: &LabeledAssignment, class_names: &[String]) -> Result<ClassDistanceMatrix> {
    let k = assign.num_classes;
    if class_names.len() != k {
        return Err(Error::invalid(format!("{} class names for {k} classes", class_names.len())));
    }
    let topo = &assign.topology;
    let counts = assign.leaf_class_counts();
    let occupied: Vec<usize> = (0..topo.num_leaves())
        .filter(|&l| counts[l].iter().any(|&c| c > 0))
        .collect();
    let sizes: Vec<u64> = (0..k).map(|c| counts.iter().map(|r| r[c]).sum()).collect();
    let mut sums = Array2::<f64>::zeros((k, k));
    for &a in &occupied {
        for &b in &occupied {
            let d = topo.leaf_tree_distance(a, b)? as f64;
            if d == 0.0 {
                continue;
            }
            for i in 0..k {
                if counts[a][i] == 0 {
                    continue;
                }
                for j in 0..k {
                    sums[[i, j]] += counts[a][i] as f64 * counts[b][j] as f64 * d;
                }
            }
        }
    }
    let mut values = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            let pairs = if i == j {
                sizes[i] as f64 * (sizes[i] as f64 - 1.0)
            } else {
                sizes[i] as f64 * sizes[j] as f64
            };
            if pairs > 0.0 {
                values[[i, j]] = sums[[i, j]] / pairs;
            }
        }
    }
    Ok(ClassDistanceMatrix {
        class_names: class_names.to_vec(),
        values,
        undersized: sizes.iter().map(|&s| s < 2).collect(),
    })
}

impl ClassDistanceMatrix {
    /// RFC 4180 CSV: a header of `class` followed by the class names, then
    /// one row per class.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        let mut header = vec!["class".to_string()];
        header.extend(self.class_names.iter().cloned());
        w.write_record(&header).map_err(fmt)?;
        for (name, row) in self.class_names.iter().zip(self.values.rows()) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(fmt)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Internal(e.to_string()))
    }

    /// Inverse of [`write_csv`](Self::write_csv). Undersized flags are not
    /// stored in the CSV and come back as `false`.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let perr = |e: csv::Error| Error::Parse {
            offset: e.position().map_or(0, |p| p.byte()),
            message: e.to_string(),
        };
        let header = r.headers().map_err(perr)?.clone();
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        if names.is_empty() {
            return Err(Error::Format("distance matrix has no classes".into()));
        }
        let k = names.len();
        let mut values = Array2::zeros((k, k));
        let mut rows = 0;
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(perr)?;
            let offset = rec.position().map_or(0, |p| p.byte());
            if i >= k {
                return Err(Error::Parse {
                    offset,
                    message: format!("more than {k} rows"),
                });
            }
            if rec.get(0) != Some(names[i].as_str()) {
                return Err(Error::Parse {
                    offset,
                    message: format!("row {} should be labelled `{}`", i + 1, names[i]),
                });
            }
            for j in 0..k {
                let cell = rec.get(j + 1).unwrap_or_default();
                values[[i, j]] = cell.trim().parse().map_err(|_| Error::Parse {
                    offset,
                    message: format!("bad number `{cell}` in row {}", i + 1),
                })?;
            }
            rows += 1;
        }
        if rows != k {
            return Err(Error::Format(format!("expected {k} rows, found {rows}")));
        }
        Ok(Self {
            class_names: names,
            values,
            undersized: vec![false; k],
        })
    }
}

/// One metric observation, as written to logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub epoch: Option<usize>,
    pub split: String,
}

/// NMI, ACC, ARI and dendrogram purity for one assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterScores {
    pub nmi: f64,
    pub acc: f64,
    pub ari: f64,
    /// `None` when no two samples share a class.
    pub dp: Option<f64>,
}

impl ClusterScores {
    pub fn compute(assign: &LabeledAssignment) -> Self {
        Self {
            nmi: nmi(&assign.leaves, &assign.classes),
            acc: acc(&assign.leaves, &assign.classes),
            ari: ari(&assign.leaves, &assign.classes),
            dp: dendrogram_purity(assign).ok(),
        }
    }

    pub fn records(&self, epoch: Option<usize>, split: &str) -> Vec<MetricRecord> {
        let mut out = vec![("nmi", self.nmi), ("acc", self.acc), ("ari", self.ari)];
        if let Some(dp) = self.dp {
            out.push(("dp", dp));
        }
        out.into_iter()
            .map(|(m, v)| MetricRecord {
                metric: m.into(),
                value: v,
                epoch,
                split: split.into(),
            })
            .collect()
    }
}
