//! The hierarchical citation graph: citation and semantic edges weighted by
//! abstract similarity, and the Foundation / Development / Frontier layering.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::communities::Community;
use crate::corpus::{Corpus, PaperRecord};
use crate::encoder::cosine;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Citation,
    Semantic,
}

/// A weighted edge. Citation edges point citing → cited; semantic edges are
/// undirected and stored once with `src < dst`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub kind: EdgeKind,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Foundation,
    Development,
    Frontier,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::Foundation, Layer::Development, Layer::Frontier];

    pub fn as_str(self) -> &'static str {
        match self {
            Layer::Foundation => "foundation",
            Layer::Development => "development",
            Layer::Frontier => "frontier",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Layer::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Precondition(format!("unknown layer `{s}`")))
    }
}

/// `citation_count / (1 + age_years)`.
pub fn trending_score(citation_count: u64, age_years: u64) -> f64 {
    citation_count as f64 / (1.0 + age_years as f64)
}

fn age(year: i32, now_year: i32) -> u64 {
    (now_year - year).max(0) as u64
}

/// Exact comparison of `c_a / (1 + age_a)` against `c_b / (1 + age_b)`.
fn compare_scores(c_a: u64, age_a: u64, c_b: u64, age_b: u64) -> Ordering {
    (u128::from(c_a) * u128::from(1 + age_b)).cmp(&(u128::from(c_b) * u128::from(1 + age_a)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAssignment {
    pub layer_of: BTreeMap<String, Layer>,
    pub k_foundation: usize,
    pub landmark_year: i32,
    pub now_year: i32,
    pub scores: BTreeMap<String, f64>,
    /// Papers without a publication year; placed in Frontier.
    #[serde(default)]
    pub missing_year: Vec<String>,
}

impl LayerAssignment {
    pub fn layer(&self, id: &str) -> Option<Layer> {
        self.layer_of.get(id).copied()
    }

    pub fn members(&self, layer: Layer) -> impl Iterator<Item = &str> {
        self.layer_of
            .iter()
            .filter(move |(_, l)| **l == layer)
            .map(|(id, _)| id.as_str())
    }

    pub fn count(&self, layer: Layer) -> usize {
        self.members(layer).count()
    }
}

/// Ranks papers by trending score (ties: more citations, then smaller id)
/// and puts the top `k` in Foundation. The rest split on `landmark_year`.
pub fn assign_layers(
    corpus: &Corpus,
    k: usize,
    landmark_year: i32,
    now_year: i32,
) -> Result<LayerAssignment> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(&PaperRecord, u64)> = corpus
        .papers()
        .filter_map(|p| p.year.map(|y| (p, age(y, now_year))))
        .collect();
    ranked.sort_by(|(a, age_a), (b, age_b)| {
        compare_scores(b.citation_count, *age_b, a.citation_count, *age_a)
            .then_with(|| b.citation_count.cmp(&a.citation_count))
            .then_with(|| a.id.cmp(&b.id))
    });
    let foundation: BTreeSet<&str> = ranked.iter().take(k).map(|(p, _)| p.id.as_str()).collect();

    let mut layer_of = BTreeMap::new();
    let mut scores = BTreeMap::new();
    let mut missing_year = Vec::new();
    for p in corpus.papers() {
        let layer = match p.year {
            None => {
                missing_year.push(p.id.clone());
                Layer::Frontier
            }
            Some(_) if foundation.contains(p.id.as_str()) => Layer::Foundation,
            Some(y) if y < landmark_year => Layer::Development,
            Some(_) => Layer::Frontier,
        };
        let score = p
            .year
            .map(|y| trending_score(p.citation_count, age(y, now_year)))
            .unwrap_or(0.0);
        layer_of.insert(p.id.clone(), layer);
        scores.insert(p.id.clone(), score);
    }
    if !missing_year.is_empty() {
        log::warn!("{} paper(s) lack a year and were placed in Frontier", missing_year.len());
    }
    Ok(LayerAssignment {
        layer_of,
        k_foundation: k,
        landmark_year,
        now_year,
        scores,
        missing_year,
    })
}

fn embedding_of<'a>(corpus: &'a Corpus, id: &str) -> Result<&'a [f64]> {
    corpus
        .get(id)
        .and_then(|p| p.embedding.as_ref())
        .map(|e| e.as_slice())
        .ok_or_else(|| Error::Precondition(format!("paper `{id}` has no embedding")))
}

/// Similarity of two papers' abstracts, evaluated with the smaller id first
/// so the same pair always takes the same rounding path.
pub fn pair_weight(corpus: &Corpus, a: &str, b: &str) -> Result<f64> {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    cosine(embedding_of(corpus, lo)?, embedding_of(corpus, hi)?)
}

/// One citation edge per in-corpus reference, plus one semantic edge per
/// uncited pair whose similarity reaches `tau_semantic`.
pub fn build_edges(corpus: &Corpus, tau_semantic: f64) -> Result<Vec<Edge>> {
    if !(0.0..=1.0).contains(&tau_semantic) {
        return Err(Error::Precondition(format!("tau_semantic {tau_semantic} outside [0, 1]")));
    }
    for p in corpus.papers() {
        embedding_of(corpus, &p.id)?;
    }
    let mut edges = Vec::new();
    let mut cited_pairs: BTreeSet<(&str, &str)> = BTreeSet::new();
    for p in corpus.papers() {
        for c in p.cited_ids.iter().filter(|c| corpus.contains(c) && **c != p.id) {
            edges.push(Edge {
                src: p.id.clone(),
                dst: c.clone(),
                kind: EdgeKind::Citation,
                weight: pair_weight(corpus, &p.id, c)?,
            });
            let key = if p.id.as_str() < c.as_str() {
                (p.id.as_str(), c.as_str())
            } else {
                (c.as_str(), p.id.as_str())
            };
            cited_pairs.insert(key);
        }
    }
    let ids: Vec<&str> = corpus.ids().collect();
    let semantic: Vec<Edge> = (0..ids.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<Edge>> {
            let mut out = Vec::new();
            for j in i + 1..ids.len() {
                if cited_pairs.contains(&(ids[i], ids[j])) {
                    continue;
                }
                let w = pair_weight(corpus, ids[i], ids[j])?;
                if w >= tau_semantic {
                    out.push(Edge {
                        src: ids[i].to_string(),
                        dst: ids[j].to_string(),
                        kind: EdgeKind::Semantic,
                        weight: w,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    edges.extend(semantic);
    Ok(edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub k_foundation: usize,
    pub landmark_year: i32,
    pub now_year: i32,
    pub tau_semantic: f64,
}

/// Immutable graph with derived adjacency indices.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalGraph {
    node_ids: BTreeSet<String>,
    edges: Vec<Edge>,
    layers: LayerAssignment,
    /// cited → citing edges (edge indices)
    cited_by: BTreeMap<String, Vec<usize>>,
    /// citing → cited edges
    cites: BTreeMap<String, Vec<usize>>,
    semantic: BTreeMap<String, Vec<usize>>,
}

impl HierarchicalGraph {
    pub fn new(
        node_ids: impl IntoIterator<Item = String>,
        edges: Vec<Edge>,
        layers: LayerAssignment,
    ) -> Result<Self> {
        let node_ids: BTreeSet<String> = node_ids.into_iter().collect();
        let layered: BTreeSet<&String> = layers.layer_of.keys().collect();
        if layered != node_ids.iter().collect() {
            return Err(Error::Validation("layer assignment does not cover exactly the nodes".into()));
        }
        let mut cited_by: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut cites: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut semantic: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (i, e) in edges.iter().enumerate() {
            if !node_ids.contains(&e.src) || !node_ids.contains(&e.dst) {
                return Err(Error::Validation(format!("edge {} -> {} leaves the graph", e.src, e.dst)));
            }
            if e.src == e.dst {
                return Err(Error::Validation(format!("self-loop on {}", e.src)));
            }
            if !seen.insert((e.kind, e.src.clone(), e.dst.clone())) {
                return Err(Error::Validation(format!("duplicate edge {} -> {}", e.src, e.dst)));
            }
            match e.kind {
                EdgeKind::Citation => {
                    cites.entry(e.src.clone()).or_default().push(i);
                    cited_by.entry(e.dst.clone()).or_default().push(i);
                }
                EdgeKind::Semantic => {
                    if e.src > e.dst {
                        return Err(Error::Validation(format!(
                            "semantic edge {} -> {} not stored in id order",
                            e.src, e.dst
                        )));
                    }
                    semantic.entry(e.src.clone()).or_default().push(i);
                    semantic.entry(e.dst.clone()).or_default().push(i);
                }
            }
        }
        Ok(Self {
            node_ids,
            edges,
            layers,
            cited_by,
            cites,
            semantic,
        })
    }

    pub fn node_ids(&self) -> &BTreeSet<String> {
        &self.node_ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.node_ids.contains(id)
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn layers(&self) -> &LayerAssignment {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<Layer> {
        self.layers.layer(id)
    }

    /// Nodes of `layer` in ascending id order.
    pub fn layer_nodes(&self, layer: Layer) -> Vec<&str> {
        self.layers.members(layer).collect()
    }

    pub fn foundation(&self) -> Vec<&str> {
        self.layer_nodes(Layer::Foundation)
    }

    /// Papers citing `id` (edges that lead forward in time from `id`).
    pub fn citing_papers(&self, id: &str) -> impl Iterator<Item = &Edge> {
        self.cited_by
            .get(id)
            .into_iter()
            .flatten()
            .map(|&i| &self.edges[i])
    }

    pub fn cited_papers(&self, id: &str) -> impl Iterator<Item = &Edge> {
        self.cites.get(id).into_iter().flatten().map(|&i| &self.edges[i])
    }

    pub fn semantic_edges(&self, id: &str) -> impl Iterator<Item = &Edge> {
        self.semantic.get(id).into_iter().flatten().map(|&i| &self.edges[i])
    }

    /// Traversal successors of `id` with their edge weights: papers that cite
    /// it, plus (optionally) its semantic neighbours. Unordered.
    pub fn successors(&self, id: &str, include_semantic: bool) -> Vec<(&str, f64)> {
        let mut out: BTreeMap<&str, f64> = BTreeMap::new();
        for e in self.citing_papers(id) {
            out.entry(e.src.as_str()).or_insert(e.weight);
        }
        if include_semantic {
            for e in self.semantic_edges(id) {
                let other = if e.src == id { &e.dst } else { &e.src };
                out.entry(other.as_str()).or_insert(e.weight);
            }
        }
        out.into_iter().collect()
    }

    pub fn to_export(&self, communities: &[Community]) -> GraphExport {
        GraphExport {
            k_foundation: self.layers.k_foundation,
            landmark_year: self.layers.landmark_year,
            now_year: self.layers.now_year,
            nodes: self
                .node_ids
                .iter()
                .map(|id| ExportNode {
                    id: id.clone(),
                    layer: self.layers.layer_of[id],
                    score: self.layers.scores.get(id).copied().unwrap_or(0.0),
                })
                .collect(),
            edges: self.edges.clone(),
            missing_year: self.layers.missing_year.clone(),
            communities: communities.to_vec(),
        }
    }

    /// Graphviz rendering: citation edges solid, semantic edges dashed.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph citations {\n  rankdir=LR;\n");
        for layer in Layer::ALL {
            let color = match layer {
                Layer::Foundation => "gold",
                Layer::Development => "lightblue",
                Layer::Frontier => "palegreen",
            };
            let _ = writeln!(s, "  subgraph cluster_{layer} {{\n    label=\"{layer}\";");
            for id in self.layer_nodes(layer) {
                let _ = writeln!(s, "    \"{}\" [style=filled, fillcolor={color}];", escape_dot(id));
            }
            s.push_str("  }\n");
        }
        for e in &self.edges {
            let style = match e.kind {
                EdgeKind::Citation => "solid",
                EdgeKind::Semantic => "dashed, dir=none",
            };
            let _ = writeln!(
                s,
                "  \"{}\" -> \"{}\" [style={style}, label=\"{:.2}\"];",
                escape_dot(&e.src),
                escape_dot(&e.dst),
                e.weight
            );
        }
        s.push_str("}\n");
        s
    }
}

fn escape_dot(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Composes [`build_edges`] and [`assign_layers`].
pub fn build_graph(corpus: &Corpus, config: &GraphConfig) -> Result<HierarchicalGraph> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let edges = build_edges(corpus, config.tau_semantic)?;
    let layers = assign_layers(corpus, config.k_foundation, config.landmark_year, config.now_year)?;
    HierarchicalGraph::new(corpus.ids().map(str::to_string), edges, layers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportNode {
    pub id: String,
    pub layer: Layer,
    pub score: f64,
}

/// The `graph.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub k_foundation: usize,
    pub landmark_year: i32,
    pub now_year: i32,
    pub nodes: Vec<ExportNode>,
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub missing_year: Vec<String>,
    #[serde(default)]
    pub communities: Vec<Community>,
}

impl GraphExport {
    pub fn into_graph(self) -> Result<(HierarchicalGraph, Vec<Community>)> {
        let layers = LayerAssignment {
            layer_of: self.nodes.iter().map(|n| (n.id.clone(), n.layer)).collect(),
            scores: self.nodes.iter().map(|n| (n.id.clone(), n.score)).collect(),
            k_foundation: self.k_foundation,
            landmark_year: self.landmark_year,
            now_year: self.now_year,
            missing_year: self.missing_year,
        };
        let graph = HierarchicalGraph::new(self.nodes.into_iter().map(|n| n.id), self.edges, layers)?;
        Ok((graph, self.communities))
    }
}
