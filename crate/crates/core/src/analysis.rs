//! Context-level coupling analysis and extraction-candidate ranking.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::SystemModel;

/// How crossing call edges contribute to context coupling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Sum of call weights (call volume).
    #[default]
    Weighted,
    /// Every crossing module edge counts once.
    Unweighted,
}

/// Directed graph between bounded contexts. Intra-context calls are dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextGraph {
    pub nodes: BTreeSet<String>,
    pub edges: BTreeMap<(String, String), u64>,
}

impl ContextGraph {
    pub fn new<I, S>(nodes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ContextGraph {
            nodes: nodes.into_iter().map(Into::into).collect(),
            edges: BTreeMap::new(),
        }
    }

    /// Add `weight` to the edge `from -> to`, creating nodes as needed.
    /// Self loops and zero weights are ignored.
    pub fn add_edge(&mut self, from: &str, to: &str, weight: u64) {
        self.nodes.insert(from.to_string());
        self.nodes.insert(to.to_string());
        if from == to || weight == 0 {
            return;
        }
        *self.edges.entry((from.to_string(), to.to_string())).or_insert(0) += weight;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingScore {
    pub context: String,
    pub in_degree: u64,
    pub out_degree: u64,
    pub total: u64,
}

pub fn build_context_graph(model: &SystemModel) -> ContextGraph {
    build_context_graph_with(model, Weighting::Weighted)
}

pub fn build_context_graph_with(model: &SystemModel, weighting: Weighting) -> ContextGraph {
    let context_of: BTreeMap<&str, &str> = model
        .modules
        .iter()
        .map(|m| (m.id.as_str(), m.context.as_str()))
        .collect();
    let mut graph = ContextGraph::new(context_of.values().copied());
    for edge in model.edges.iter().filter(|e| e.is_business()) {
        let (Some(from), Some(to)) = (context_of.get(edge.from.as_str()), context_of.get(edge.to.as_str())) else {
            continue;
        };
        let w = match weighting {
            Weighting::Weighted => u64::from(edge.weight),
            Weighting::Unweighted => 1,
        };
        graph.add_edge(from, to, w);
    }
    graph
}

/// One score per node, in label order.
pub fn coupling_scores(graph: &ContextGraph) -> Vec<CouplingScore> {
    let mut scores: BTreeMap<&str, (u64, u64)> =
        graph.nodes.iter().map(|n| (n.as_str(), (0, 0))).collect();
    for ((from, to), w) in &graph.edges {
        scores.entry(from.as_str()).or_default().1 += w;
        scores.entry(to.as_str()).or_default().0 += w;
    }
    scores
        .into_iter()
        .map(|(context, (in_degree, out_degree))| CouplingScore {
            context: context.to_string(),
            in_degree,
            out_degree,
            total: in_degree + out_degree,
        })
        .collect()
}

/// Contexts from least to most coupled; ties break by label. The head is the
/// recommended first extraction.
pub fn rank_candidates(graph: &ContextGraph) -> Vec<String> {
    let mut scores = coupling_scores(graph);
    scores.sort_by(|a, b| a.total.cmp(&b.total).then_with(|| a.context.cmp(&b.context)));
    scores.into_iter().map(|s| s.context).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferOptions {
    /// Only edges with weight strictly above this join two modules.
    pub min_weight: u32,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions { min_weight: 0 }
    }
}

/// Proposed context label per module. Advisory only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextProposal {
    pub labels: BTreeMap<String, String>,
}

impl ContextProposal {
    pub fn contexts(&self) -> BTreeSet<&str> {
        self.labels.values().map(String::as_str).collect()
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // Smaller index wins so the root is independent of union order.
        if ra < rb {
            self.parent[rb] = ra;
        } else if rb < ra {
            self.parent[ra] = rb;
        }
    }
}

/// Group modules into connected components over business edges heavier than
/// `options.min_weight`. Components are labelled `ctx-1`, `ctx-2`, ... in the
/// order of their smallest module id. The seed only shuffles the order in
/// which edges are merged; the labelling does not depend on it.
pub fn infer_contexts(model: &SystemModel, seed: u64, options: InferOptions) -> ContextProposal {
    let ids: Vec<&str> = model.modules.iter().map(|m| m.id.as_str()).collect();
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();

    let mut pairs: Vec<(usize, usize)> = model
        .edges
        .iter()
        .filter(|e| e.is_business() && e.weight > options.min_weight)
        .filter_map(|e| Some((*index.get(e.from.as_str())?, *index.get(e.to.as_str())?)))
        .collect();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut uf = UnionFind::new(ids.len());
    for (a, b) in pairs {
        uf.union(a, b);
    }

    let mut label_of_root: BTreeMap<usize, String> = BTreeMap::new();
    let mut labels = BTreeMap::new();
    // `ids` is sorted, so roots are first met at their smallest member.
    for (i, id) in ids.iter().enumerate() {
        let root = uf.find(i);
        let next = label_of_root.len() + 1;
        let label = label_of_root.entry(root).or_insert_with(|| format!("ctx-{next}"));
        labels.insert(id.to_string(), label.clone());
    }
    ContextProposal { labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CallEdge, Layer, ModuleNode, Service, ServiceRole};

    fn model_with(modules: &[(&str, &str)], edges: &[(&str, &str, u32)]) -> SystemModel {
        let mut m = SystemModel::default();
        for (id, ctx) in modules {
            m.modules.push(ModuleNode {
                id: id.to_string(),
                layer: Layer::BusinessLogic,
                context: ctx.to_string(),
            });
        }
        m.services.push(Service {
            id: "app".into(),
            modules: modules.iter().map(|(id, _)| id.to_string()).collect(),
            database: None,
            role: ServiceRole::Monolith,
            frozen: false,
        });
        for (a, b, w) in edges {
            m.edges.push(CallEdge::business(a, b, *w));
        }
        m.normalize();
        m
    }

    #[test]
    fn single_context_has_no_edges() {
        let m = model_with(&[("a", "X"), ("b", "X")], &[("a", "b", 4)]);
        let g = build_context_graph(&m);
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn crossing_weights_sum() {
        let m = model_with(
            &[("x1", "X"), ("x2", "X"), ("x3", "X"), ("y1", "Y")],
            &[("x1", "y1", 1), ("x2", "y1", 1), ("x3", "y1", 1)],
        );
        let g = build_context_graph(&m);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[&("X".to_string(), "Y".to_string())], 3);
    }

    #[test]
    fn unweighted_counts_edges() {
        let m = model_with(&[("x", "X"), ("y", "Y")], &[("x", "y", 7)]);
        let g = build_context_graph_with(&m, Weighting::Unweighted);
        assert_eq!(g.edges[&("X".to_string(), "Y".to_string())], 1);
    }

    #[test]
    fn isolated_node_scores_zero() {
        let g = ContextGraph::new(["lonely"]);
        let s = coupling_scores(&g);
        assert_eq!((s[0].in_degree, s[0].out_degree, s[0].total), (0, 0, 0));
    }

    #[test]
    fn in_two_out_five() {
        let mut g = ContextGraph::new(["N"]);
        g.add_edge("P", "N", 2);
        g.add_edge("N", "Q", 3);
        g.add_edge("N", "R", 2);
        let s = coupling_scores(&g);
        let n = s.iter().find(|s| s.context == "N").unwrap();
        assert_eq!((n.in_degree, n.out_degree, n.total), (2, 5, 7));
    }

    #[test]
    fn all_isolated_ranks_lexicographically() {
        let g = ContextGraph::new(["d", "b", "a", "c"]);
        assert_eq!(rank_candidates(&g), vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn infer_two_clusters() {
        let m = model_with(
            &[("a1", "?"), ("a2", "?"), ("b1", "?"), ("b2", "?")],
            &[("a1", "a2", 1), ("b2", "b1", 1)],
        );
        let p = infer_contexts(&m, 7, InferOptions::default());
        assert_eq!(p.contexts().len(), 2);
        assert_eq!(p.labels["a1"], p.labels["a2"]);
        assert_eq!(p.labels["b1"], p.labels["b2"]);
        assert_ne!(p.labels["a1"], p.labels["b1"]);
    }

    #[test]
    fn infer_fully_connected() {
        let m = model_with(
            &[("a", "?"), ("b", "?"), ("c", "?")],
            &[("a", "b", 1), ("b", "c", 1), ("c", "a", 1)],
        );
        assert_eq!(infer_contexts(&m, 0, InferOptions::default()).contexts().len(), 1);
    }

    #[test]
    fn infer_threshold_drops_light_edges() {
        let m = model_with(&[("a", "?"), ("b", "?"), ("c", "?")], &[("a", "b", 5), ("b", "c", 1)]);
        let p = infer_contexts(&m, 0, InferOptions { min_weight: 1 });
        assert_eq!(p.contexts().len(), 2);
    }

    #[test]
    fn infer_is_deterministic() {
        let m = model_with(
            &[("a", "?"), ("b", "?"), ("c", "?"), ("d", "?"), ("e", "?")],
            &[("a", "c", 1), ("e", "d", 1), ("c", "b", 2)],
        );
        let first = infer_contexts(&m, 42, InferOptions::default());
        assert_eq!(first, infer_contexts(&m, 42, InferOptions::default()));
        assert_eq!(first, infer_contexts(&m, 43, InferOptions::default()));
    }
}
