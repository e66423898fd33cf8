//! Hierarchy exports: versioned JSON tree and Graphviz DOT.

use std::fmt::Write as _;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tree::{NodeRoute, TopologyRecord, TreeTopology};

pub const EXPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    /// Routes samples to both children.
    Split,
    /// One child was pruned away; everything continues to the other.
    PassThrough,
    Leaf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeExport {
    pub level: usize,
    pub index: usize,
    pub kind: NodeKind,
    /// Mean posterior mass reaching the node over the dataset.
    pub reach: f64,
    /// Hard-assigned samples below the node, per class.
    pub class_counts: Vec<u64>,
    /// Position among the active leaves (leaves only).
    pub cluster_id: Option<usize>,
}

impl NodeExport {
    pub fn size(&self) -> u64 {
        self.class_counts.iter().sum()
    }

    /// Most frequent class, lowest index on ties; `None` when empty.
    pub fn dominant_class(&self) -> Option<usize> {
        let (best, &count) = self
            .class_counts
            .iter()
            .enumerate()
            .rev()
            .max_by_key(|&(_, c)| *c)?;
        (count > 0).then_some(best)
    }
}

/// Composition of every live node of a trained hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyExport {
    pub format_version: u32,
    pub topology: TopologyRecord,
    pub class_names: Vec<String>,
    pub samples: usize,
    /// Live nodes in heap order.
    pub nodes: Vec<NodeExport>,
}

impl HierarchyExport {
    pub fn build(model: &Model, topo: &TreeTopology, dataset: &Dataset, labels: &Labels) -> Result<Self> {
        if labels.len() != dataset.len() {
            return Err(Error::invalid(format!(
                "{} labels for {} samples",
                labels.len(),
                dataset.len()
            )));
        }
        let routing = model.routing(dataset.samples(), topo)?;
        let reach = routing
            .node_posteriors()
            .mean_axis(Axis(0))
            .ok_or_else(|| Error::invalid("dataset is empty"))?;
        let assigned = routing.assign(topo)?;
        let k = labels.num_classes();
        let mut leaf_counts = vec![vec![0u64; k]; topo.num_leaves()];
        for (&leaf, &c) in assigned.iter().zip(labels.ids()) {
            leaf_counts[leaf][c] += 1;
        }
        let cluster_of: Vec<Option<usize>> = {
            let mut next = 0;
            (0..topo.num_leaves())
                .map(|l| {
                    topo.is_active(l).then(|| {
                        next += 1;
                        next - 1
                    })
                })
                .collect()
        };
        let mut nodes = Vec::new();
        for h in 0..topo.num_nodes() {
            if !topo.is_alive(h) {
                continue;
            }
            let (level, index) = TreeTopology::node_of_heap(h);
            let mut class_counts = vec![0u64; k];
            for leaf in topo.subtree_leaves(level, index) {
                for (c, &n) in class_counts.iter_mut().zip(&leaf_counts[leaf]) {
                    *c += n;
                }
            }
            let kind = if level == topo.depth() {
                NodeKind::Leaf
            } else if topo.route_of(h) == NodeRoute::Decide {
                NodeKind::Split
            } else {
                NodeKind::PassThrough
            };
            nodes.push(NodeExport {
                level,
                index,
                kind,
                reach: reach[h],
                class_counts,
                cluster_id: if kind == NodeKind::Leaf { cluster_of[index] } else { None },
            });
        }
        Ok(Self {
            format_version: EXPORT_VERSION,
            topology: topo.to_record(),
            class_names: labels.class_names().to_vec(),
            samples: dataset.len(),
            nodes,
        })
    }

    pub fn topology(&self) -> Result<TreeTopology> {
        TreeTopology::try_from(self.topology.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let out: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("hierarchy export: {e}")))?;
        if out.format_version != EXPORT_VERSION {
            return Err(Error::Format(format!(
                "hierarchy export version {} is not supported",
                out.format_version
            )));
        }
        Ok(out)
    }

    fn label_of(&self, node: &NodeExport) -> String {
        let class = node
            .dominant_class()
            .map_or("empty", |c| self.class_names[c].as_str());
        let head = match node.cluster_id {
            Some(id) => format!("cluster {id}"),
            None => format!("({}, {})", node.level, node.index),
        };
        format!("{head}\\n{} {:.3}", escape(class), node.reach)
    }

    /// Graphviz digraph with one statement per live node and one edge per
    /// live parent-child link.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph hierarchy {\n  node [shape=box];\n");
        let name = |n: &NodeExport| format!("n{}", TreeTopology::heap_index(n.level, n.index));
        for node in &self.nodes {
            let shape = match node.kind {
                NodeKind::Leaf => ", style=rounded",
                NodeKind::PassThrough => ", style=dashed",
                NodeKind::Split => "",
            };
            let _ = writeln!(out, "  {} [label=\"{}\"{shape}];", name(node), self.label_of(node));
        }
        let alive: std::collections::HashSet<(usize, usize)> = self.nodes.iter().map(|n| (n.level, n.index)).collect();
        for node in self.nodes.iter().filter(|n| n.kind != NodeKind::Leaf) {
            for child in [2 * node.index, 2 * node.index + 1] {
                if alive.contains(&(node.level + 1, child)) {
                    let _ = writeln!(
                        out,
                        "  {} -> n{};",
                        name(node),
                        TreeTopology::heap_index(node.level + 1, child)
                    );
                }
            }
        }
        out.push_str("}\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DatasetSpec};
    use crate::model::{Architecture, ContrastHeadSpec, EncoderSpec, ModelSpec};

    fn fixture(topo: &TreeTopology) -> HierarchyExport {
        let (data, labels) = load_dataset(&DatasetSpec::gaussians(3, 60, 8, 1)).unwrap();
        let spec = ModelSpec {
            encoder: EncoderSpec {
                architecture: Architecture::MlpSmall,
                input: data.shape(),
                embed_dim: 8,
            },
            depth: topo.depth(),
            contrast: ContrastHeadSpec::identity(8),
        };
        let model = Model::new(spec, 4).unwrap();
        HierarchyExport::build(&model, topo, &data, &labels).unwrap()
    }

    #[test]
    fn counts_and_reach_are_consistent() {
        let topo = TreeTopology::new(3).unwrap().prune_leaf(2).unwrap().prune_leaf(3).unwrap();
        let ex = fixture(&topo);
        let leaves: u64 = ex.nodes.iter().filter(|n| n.kind == NodeKind::Leaf).map(NodeExport::size).sum();
        assert_eq!(leaves, ex.samples as u64);
        let find = |l: usize, i: usize| ex.nodes.iter().find(|n| n.level == l && n.index == i);
        for n in ex.nodes.iter().filter(|n| n.kind != NodeKind::Leaf) {
            let kids: Vec<_> = [2 * n.index, 2 * n.index + 1].iter().filter_map(|&c| find(n.level + 1, c)).collect();
            let reach: f64 = kids.iter().map(|k| k.reach).sum();
            assert!((reach - n.reach).abs() < 1e-12);
            let size: u64 = kids.iter().map(|k| k.size()).sum();
            assert_eq!(size, n.size());
        }
        assert_eq!(find(1, 0).unwrap().kind, NodeKind::PassThrough);
        assert!(find(2, 1).is_none());
    }

    #[test]
    fn json_round_trip() {
        let topo = TreeTopology::new(2).unwrap().prune_leaf(1).unwrap();
        let ex = fixture(&topo);
        let back = HierarchyExport::from_json(&ex.to_json().unwrap()).unwrap();
        assert_eq!(back, ex);
        assert_eq!(back.topology().unwrap(), topo);
        let bumped = ex.to_json().unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(HierarchyExport::from_json(&bumped).is_err());
    }

    #[test]
    fn dot_has_one_statement_per_live_node() {
        let topo = TreeTopology::new(3).unwrap().prune_leaf(5).unwrap().prune_leaf(4).unwrap();
        let dot = fixture(&topo).to_dot();
        let statements = dot.lines().filter(|l| l.contains("[label=")).count();
        // live internal nodes: root, (1,0), (1,1), (2,0), (2,1), (2,3)
        assert_eq!(statements, 6 + topo.active_leaf_count());
        assert!(!dot.contains("n11 ") && !dot.contains("n12 "));
        assert_eq!(dot.lines().filter(|l| l.contains("->")).count(), statements - 1);
    }

    #[test]
    fn dominant_class_ties() {
        let node = NodeExport {
            level: 0,
            index: 0,
            kind: NodeKind::Split,
            reach: 1.0,
            class_counts: vec![1, 3, 3],
            cluster_id: None,
        };
        assert_eq!(node.dominant_class(), Some(1));
    }
}
