//! Leiden community detection on layer-induced subgraphs.
//!
//! Local moving, refinement and aggregation over a weighted undirected graph,
//! optimising modularity with a resolution parameter.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeKind, HierarchicalGraph, Layer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Community {
    pub layer: Layer,
    pub index: usize,
    pub member_ids: BTreeSet<String>,
    pub community_id: String,
}

impl Community {
    pub fn new(layer: Layer, index: usize, member_ids: BTreeSet<String>) -> Self {
        Self {
            community_id: format!("community_{}_{index}", layer.as_str()),
            layer,
            index,
            member_ids,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeidenConfig {
    pub resolution: f64,
    /// Randomness of the refinement step.
    pub theta: f64,
    pub seed: u64,
    pub include_semantic: bool,
    /// Independent runs (seed, seed+1, ...); the best modularity wins.
    pub restarts: u32,
}

impl Default for LeidenConfig {
    fn default() -> Self {
        Self {
            resolution: 1.0,
            theta: 0.01,
            seed: 0,
            include_semantic: true,
            restarts: 1,
        }
    }
}

/// Undirected weighted graph with self-loops, indexed `0..n`.
///
/// `self_weight[i]` is the diagonal entry `A_ii`; every off-diagonal edge is
/// listed in both endpoints' adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_weight: Vec<f64>,
    degree: Vec<f64>,
    total: f64,
}

impl WeightedGraph {
    /// Parallel edges are summed; non-positive weights and self-loops in the
    /// input are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Self {
        let mut acc: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(a, b, w) in edges {
            assert!(a < n && b < n, "edge endpoint out of range");
            if a == b || w.is_nan() || w <= 0.0 {
                continue;
            }
            *acc[a].entry(b).or_default() += w;
            *acc[b].entry(a).or_default() += w;
        }
        Self::from_parts(
            acc.into_iter().map(|m| m.into_iter().collect()).collect(),
            vec![0.0; n],
        )
    }

    fn from_parts(adj: Vec<Vec<(usize, f64)>>, self_weight: Vec<f64>) -> Self {
        let degree: Vec<f64> = adj
            .iter()
            .zip(&self_weight)
            .map(|(nb, s)| s + nb.iter().map(|(_, w)| w).sum::<f64>())
            .collect();
        let total = degree.iter().sum();
        Self {
            adj,
            self_weight,
            degree,
            total,
        }
    }

    /// The subgraph induced by one layer, nodes in ascending id order.
    pub fn from_layer(graph: &HierarchicalGraph, layer: Layer, include_semantic: bool) -> (Self, Vec<String>) {
        let ids: Vec<String> = graph.layer_nodes(layer).into_iter().map(str::to_string).collect();
        let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let edges: Vec<(usize, usize, f64)> = graph
            .edges()
            .iter()
            .filter(|e| include_semantic || e.kind == EdgeKind::Citation)
            .filter_map(|e| {
                Some((*index.get(e.src.as_str())?, *index.get(e.dst.as_str())?, e.weight.max(0.0)))
            })
            .collect();
        (Self::from_edges(ids.len(), &edges), ids)
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    /// Modularity of `membership`; 0 for a graph without edges.
    pub fn modularity(&self, membership: &[usize], resolution: f64) -> f64 {
        assert_eq!(membership.len(), self.len());
        if self.total <= 0.0 {
            return 0.0;
        }
        let mut inner: BTreeMap<usize, f64> = BTreeMap::new();
        let mut tot: BTreeMap<usize, f64> = BTreeMap::new();
        for i in 0..self.len() {
            let c = membership[i];
            let within: f64 = self.adj[i]
                .iter()
                .filter(|(j, _)| membership[*j] == c)
                .map(|(_, w)| w)
                .sum();
            *inner.entry(c).or_default() += self.self_weight[i] + within;
            *tot.entry(c).or_default() += self.degree[i];
        }
        inner
            .iter()
            .map(|(c, in_c)| in_c / self.total - resolution * (tot[c] / self.total).powi(2))
            .sum()
    }

    fn aggregate(&self, membership: &[usize], count: usize) -> Self {
        let mut acc: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); count];
        let mut self_weight = vec![0.0; count];
        for i in 0..self.len() {
            let c = membership[i];
            self_weight[c] += self.self_weight[i];
            for &(j, w) in &self.adj[i] {
                let d = membership[j];
                if d == c {
                    self_weight[c] += w;
                } else {
                    *acc[c].entry(d).or_default() += w;
                }
            }
        }
        Self::from_parts(
            acc.into_iter().map(|m| m.into_iter().collect()).collect(),
            self_weight,
        )
    }
}

/// Relabels to `0..count` in order of first appearance; returns `count`.
fn normalize(membership: &mut [usize]) -> usize {
    let mut map: BTreeMap<usize, usize> = BTreeMap::new();
    for c in membership.iter_mut() {
        let next = map.len();
        *c = *map.entry(*c).or_insert(next);
    }
    map.len()
}

struct Leiden<'a> {
    gamma: f64,
    theta: f64,
    rng: &'a mut ChaCha8Rng,
}

impl Leiden<'_> {
    /// Queue-based local moving. Labels in `part` must be `< g.len()`.
    fn move_nodes(&mut self, g: &WeightedGraph, part: &mut [usize]) {
        let n = g.len();
        let two_m = g.total;
        let mut tot = vec![0.0; n];
        let mut size = vec![0usize; n];
        for i in 0..n {
            tot[part[i]] += g.degree[i];
            size[part[i]] += 1;
        }
        let mut empty: Vec<usize> = (0..n).rev().filter(|c| size[*c] == 0).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(self.rng);
        let mut queue: VecDeque<usize> = order.into_iter().collect();
        let mut queued = vec![true; n];
        let mut weight_to = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();

        while let Some(i) = queue.pop_front() {
            queued[i] = false;
            let k = g.degree[i];
            let old = part[i];
            for &(j, w) in &g.adj[i] {
                let c = part[j];
                if weight_to[c] == 0.0 {
                    touched.push(c);
                }
                weight_to[c] += w;
            }
            tot[old] -= k;
            size[old] -= 1;

            let gain = |wt: f64, tot_c: f64| wt - self.gamma * k * tot_c / two_m;
            let mut best = old;
            let mut best_gain = gain(weight_to[old], tot[old]);
            for &c in &touched {
                if c == old {
                    continue;
                }
                let g_c = gain(weight_to[c], tot[c]);
                if g_c > best_gain {
                    best = c;
                    best_gain = g_c;
                }
            }
            if best_gain < 0.0 && size[old] > 0 {
                best = empty.pop().expect("an empty community exists while a node is detached");
            }
            for &c in &touched {
                weight_to[c] = 0.0;
            }
            touched.clear();

            tot[best] += k;
            size[best] += 1;
            if best != old {
                part[i] = best;
                if size[old] == 0 {
                    empty.push(old);
                }
                for &(j, _) in &g.adj[i] {
                    if !queued[j] && part[j] != best {
                        queued[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
    }

    /// Splits each community of `part` into well-connected sub-communities,
    /// merging singletons randomly in proportion to `exp(gain / theta)`.
    fn refine(&mut self, g: &WeightedGraph, part: &[usize]) -> Vec<usize> {
        let n = g.len();
        let two_m = g.total;
        let m = two_m / 2.0;
        let mut tot_s = vec![0.0; n];
        for i in 0..n {
            tot_s[part[i]] += g.degree[i];
        }
        // weight from each node to the rest of its community
        let inside: Vec<f64> = (0..n)
            .map(|i| g.adj[i].iter().filter(|(j, _)| part[*j] == part[i]).map(|(_, w)| w).sum())
            .collect();

        let mut refined: Vec<usize> = (0..n).collect();
        let mut tot_r = g.degree.clone();
        let mut size_r = vec![1usize; n];
        let mut external_r = inside.clone();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(self.rng);

        let mut weight_to = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut candidates: Vec<(usize, f64)> = Vec::new();
        for v in order {
            if size_r[refined[v]] != 1 {
                continue;
            }
            let s = part[v];
            let k = g.degree[v];
            if inside[v] < self.gamma * k * (tot_s[s] - k) / two_m {
                continue;
            }
            let own = refined[v];
            for &(j, w) in &g.adj[v] {
                if part[j] != s {
                    continue;
                }
                let r = refined[j];
                if weight_to[r] == 0.0 {
                    touched.push(r);
                }
                weight_to[r] += w;
            }
            candidates.clear();
            candidates.push((own, 0.0));
            for &r in &touched {
                let well_connected =
                    external_r[r] >= self.gamma * tot_r[r] * (tot_s[s] - tot_r[r]) / two_m;
                let delta = (weight_to[r] - self.gamma * k * tot_r[r] / two_m) / m;
                if well_connected && delta >= 0.0 {
                    candidates.push((r, delta));
                }
            }
            let top = candidates.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = candidates
                .iter()
                .map(|(_, d)| ((d - top) / self.theta).exp())
                .collect();
            let mut pick = self.rng.gen::<f64>() * weights.iter().sum::<f64>();
            let mut chosen = candidates[candidates.len() - 1];
            for (c, w) in candidates.iter().zip(&weights) {
                if pick < *w {
                    chosen = *c;
                    break;
                }
                pick -= w;
            }
            let r = chosen.0;
            if r != own {
                let w_vr = weight_to[r];
                refined[v] = r;
                tot_r[r] += k;
                tot_r[own] = 0.0;
                size_r[r] += 1;
                size_r[own] = 0;
                external_r[r] += inside[v] - 2.0 * w_vr;
            }
            for &r in &touched {
                weight_to[r] = 0.0;
            }
            touched.clear();
        }
        refined
    }

    /// One full Leiden run from `initial` (labels on the nodes of `g0`).
    fn run(&mut self, g0: &WeightedGraph, initial: Vec<usize>) -> Vec<usize> {
        let mut g = g0.clone();
        let mut part = initial;
        normalize(&mut part);
        let mut node_of: Vec<usize> = (0..g0.len()).collect();
        loop {
            self.move_nodes(&g, &mut part);
            let count = normalize(&mut part);
            if count == g.len() {
                break;
            }
            let mut refined = self.refine(&g, &part);
            let mut refined_count = normalize(&mut refined);
            if refined_count == g.len() {
                refined = part.clone();
                refined_count = count;
            }
            let mut next_part = vec![0; refined_count];
            for i in 0..g.len() {
                next_part[refined[i]] = part[i];
            }
            for v in node_of.iter_mut() {
                *v = refined[*v];
            }
            g = g.aggregate(&refined, refined_count);
            part = next_part;
        }
        let mut membership: Vec<usize> = node_of.iter().map(|&v| part[v]).collect();
        normalize(&mut membership);
        membership
    }
}

/// Leiden membership vector for `g` (labels in order of first appearance).
/// Runs are repeated from the previous result until modularity stops
/// improving.
pub fn leiden(g: &WeightedGraph, resolution: f64, theta: f64, seed: u64) -> Vec<usize> {
    let n = g.len();
    if n == 0 {
        return Vec::new();
    }
    if g.total <= 0.0 {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut algo = Leiden {
        gamma: resolution,
        theta,
        rng: &mut rng,
    };
    let mut best = algo.run(g, (0..n).collect());
    let mut best_q = g.modularity(&best, resolution);
    for _ in 0..16 {
        let next = algo.run(g, best.clone());
        let q = g.modularity(&next, resolution);
        if q <= best_q + 1e-15 {
            break;
        }
        best = next;
        best_q = q;
    }
    best
}

fn communities_from(layer: Layer, ids: &[String], membership: &[usize]) -> Vec<Community> {
    let mut groups: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for (id, c) in ids.iter().zip(membership) {
        groups.entry(*c).or_default().insert(id.clone());
    }
    let mut sets: Vec<BTreeSet<String>> = groups.into_values().collect();
    sets.sort_by(|a, b| a.first().cmp(&b.first()));
    sets.into_iter()
        .enumerate()
        .map(|(j, members)| Community::new(layer, j, members))
        .collect()
}

/// Leiden partition of one layer's induced subgraph.
pub fn partition_layer(graph: &HierarchicalGraph, layer: Layer, resolution: f64, seed: u64) -> Result<Vec<Community>> {
    partition_layer_with(
        graph,
        layer,
        &LeidenConfig {
            resolution,
            seed,
            ..LeidenConfig::default()
        },
    )
}

pub fn partition_layer_with(graph: &HierarchicalGraph, layer: Layer, config: &LeidenConfig) -> Result<Vec<Community>> {
    if !(config.resolution > 0.0) {
        return Err(Error::Precondition(format!("resolution must be positive, got {}", config.resolution)));
    }
    if !(config.theta > 0.0) {
        return Err(Error::Precondition(format!("theta must be positive, got {}", config.theta)));
    }
    let (g, ids) = WeightedGraph::from_layer(graph, layer, config.include_semantic);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for r in 0..config.restarts.max(1) {
        let membership = leiden(&g, config.resolution, config.theta, config.seed.wrapping_add(u64::from(r)));
        let q = g.modularity(&membership, config.resolution);
        if best.as_ref().is_none_or(|(bq, _)| q > *bq) {
            best = Some((q, membership));
        }
    }
    let membership = best.map(|b| b.1).unwrap_or_default();
    Ok(communities_from(layer, &ids, &membership))
}

/// Partitions all three layers (in parallel) and concatenates the results in
/// layer order.
pub fn partition_all(graph: &HierarchicalGraph, config: &LeidenConfig) -> Result<Vec<Community>> {
    let results: Vec<Result<Vec<Community>>> = std::thread::scope(|s| {
        let handles: Vec<_> = Layer::ALL
            .into_iter()
            .map(|layer| s.spawn(move || partition_layer_with(graph, layer, config)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("partition thread panicked")).collect()
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Modularity of the given communities on `layer`'s subgraph.
pub fn layer_modularity(
    graph: &HierarchicalGraph,
    layer: Layer,
    communities: &[Community],
    resolution: f64,
    include_semantic: bool,
) -> Result<f64> {
    let (g, ids) = WeightedGraph::from_layer(graph, layer, include_semantic);
    let label: BTreeMap<&str, usize> = communities
        .iter()
        .filter(|c| c.layer == layer)
        .enumerate()
        .flat_map(|(j, c)| c.member_ids.iter().map(move |id| (id.as_str(), j)))
        .collect();
    let membership = ids
        .iter()
        .map(|id| {
            label
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Validation(format!("{id} is not in any {layer} community")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(g.modularity(&membership, resolution))
}
