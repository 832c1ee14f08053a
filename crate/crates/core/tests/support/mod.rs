//! Shared fixtures and independent reference implementations for the
//! integration and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use surveyg::agents::{assemble, cite_keys, OutlineDraft, OutlineSection, OutlineSubsection, RunMetadata, SectionText};
use surveyg::agents::SurveyDocument;
use surveyg::communities::WeightedGraph;
use surveyg::config::RunConfig;
use surveyg::corpus::{embed_corpus, fetch_papers, Corpus, FixtureSource, KeywordSet, PaperRecord};
use surveyg::encoder::MockEncoder;
use surveyg::graph::{Edge, EdgeKind, ExportNode, GraphExport, HierarchicalGraph, Layer};

pub const FIXTURE_SEED: u64 = 7;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/twelve")
}

pub fn citeval_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/citeval")
}

/// K=3, landmark 2021, now 2025, mock backends, the twelve-paper source.
pub fn fixture_config(out: &Path) -> RunConfig {
    let mut c = RunConfig {
        query: "retrieval augmented generation".into(),
        seed: FIXTURE_SEED,
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    c.source.path = Some(fixture_dir());
    c.graph.k_foundation = 3;
    c.graph.landmark_year = Some(2021);
    c.graph.now_year = Some(2025);
    c
}

/// The fixture papers, embedded exactly as the pipeline embeds them.
pub fn fixture_corpus() -> Corpus {
    let keywords = KeywordSet::new("retrieval augmented generation", [], 1).unwrap();
    let fetched = fetch_papers(&keywords, &FixtureSource::new(fixture_dir()), 1500, 2).unwrap();
    embed_corpus(fetched.corpus, &MockEncoder::new(256, FIXTURE_SEED), 2).unwrap()
}

fn section(key: &str, body: &str) -> SectionText {
    SectionText {
        key: key.into(),
        section_title: "Methods".into(),
        title: format!("Part {key}"),
        body: body.into(),
        word_count: body.split_whitespace().count(),
        revision: 0,
        retrieved_ids: Vec::new(),
        citation_keys: cite_keys(body),
        ea_calls: 0,
        scores: Vec::new(),
        short: false,
    }
}

/// Four cited sentences (five claim/paper pairs) and two uncited ones; the
/// verdicts live in `citeval/nli_table.json`.
pub fn citeval_survey() -> SurveyDocument {
    let outline = OutlineDraft {
        sections: vec![OutlineSection {
            title: "Methods".into(),
            focus: String::new(),
            subsections: ["a", "b"]
                .iter()
                .map(|t| OutlineSubsection {
                    title: t.to_string(),
                    focus: String::new(),
                    proof_ids: vec!["seed_F1".into()],
                })
                .collect(),
        }],
        revision: 0,
    };
    let sections = vec![
        section(
            "1.1",
            "Dense vectors index passages for open domain questions \\cite{F1}. This paragraph has no citation. \
             Late interaction and residual compression make token level ranking practical \\cite{D1,D2}.",
        ),
        section(
            "1.2",
            "Reflection tokens let a generator decide when to retrieve \\cite{R1}! Is this uncited? \
             Fusion in decoder encodes passages separately \\cite{D3}.",
        ),
    ];
    assemble("fixture", &outline, sections, &fixture_corpus(), RunMetadata::default()).unwrap()
}

/// The hand annotation of [`citeval_survey`]: (section, sentence index, ids).
pub fn citeval_golden_claims() -> Vec<(&'static str, usize, Vec<&'static str>)> {
    vec![
        ("1.1", 0, vec!["F1"]),
        ("1.1", 2, vec!["D1", "D2"]),
        ("1.2", 0, vec!["R1"]),
        ("1.2", 2, vec!["D3"]),
    ]
}

/// Weighted BFS written as the plain textbook loop, over a raw edge list.
///
/// Successors of `u` are the papers citing `u` and its semantic neighbours.
pub fn wbfs_reference(
    edges: &[Edge],
    layer_of: &BTreeMap<String, Layer>,
    sources: &[String],
    target: Layer,
) -> Vec<String> {
    let successors = |u: &str| -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in edges {
            let v = match e.kind {
                EdgeKind::Citation if e.dst == u => &e.src,
                EdgeKind::Semantic if e.src == u => &e.dst,
                EdgeKind::Semantic if e.dst == u => &e.src,
                _ => continue,
            };
            out.push((v.clone(), e.weight));
        }
        out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        out
    };
    let mut sorted = sources.to_vec();
    sorted.sort();
    sorted.dedup();
    let mut visited: BTreeSet<String> = sorted.iter().cloned().collect();
    let mut queue: VecDeque<String> = sorted.into();
    let mut r = Vec::new();
    while let Some(u) = queue.pop_front() {
        for (v, _) in successors(&u) {
            if !visited.contains(&v) {
                visited.insert(v.clone());
                if layer_of[&v] == target {
                    r.push(v);
                } else {
                    queue.push_back(v);
                }
            }
        }
    }
    r
}

/// A random layered graph on `n` nodes with at most one edge per unordered
/// pair. `weights` draws an edge weight.
pub fn random_graph(rng: &mut impl Rng, n: usize, density: f64, weights: &mut dyn FnMut(&mut dyn rand::RngCore) -> f64) -> HierarchicalGraph {
    let ids: Vec<String> = (0..n).map(|i| format!("n{i:02}")).collect();
    let nodes: Vec<ExportNode> = ids
        .iter()
        .map(|id| ExportNode {
            id: id.clone(),
            layer: *Layer::ALL.choose(rng).unwrap(),
            score: 0.0,
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if !rng.gen_bool(density) {
                continue;
            }
            let weight = weights(rng);
            let (kind, src, dst) = match rng.gen_range(0..3) {
                0 => (EdgeKind::Citation, &ids[i], &ids[j]),
                1 => (EdgeKind::Citation, &ids[j], &ids[i]),
                _ => (EdgeKind::Semantic, &ids[i], &ids[j]),
            };
            edges.push(Edge {
                src: src.clone(),
                dst: dst.clone(),
                kind,
                weight,
            });
        }
    }
    let k = nodes.iter().filter(|n| n.layer == Layer::Foundation).count();
    GraphExport {
        k_foundation: k,
        landmark_year: 2020,
        now_year: 2025,
        nodes,
        edges,
        missing_year: Vec::new(),
        communities: Vec::new(),
    }
    .into_graph()
    .unwrap()
    .0
}

/// Maximum modularity over every set partition (restricted growth strings).
pub fn brute_force_modularity(g: &WeightedGraph, resolution: f64) -> f64 {
    let n = g.len();
    if n == 0 {
        return 0.0;
    }
    let mut labels = vec![0usize; n];
    let mut best = f64::NEG_INFINITY;
    loop {
        best = best.max(g.modularity(&labels, resolution));
        // next restricted growth string
        let mut i = n - 1;
        loop {
            if i == 0 {
                return best;
            }
            let max_prefix = labels[..i].iter().copied().max().unwrap();
            if labels[i] <= max_prefix {
                labels[i] += 1;
                for l in labels.iter_mut().skip(i + 1) {
                    *l = 0;
                }
                break;
            }
            i -= 1;
        }
    }
}

/// Papers with random years and citation counts; ids `p000..`.
pub fn random_corpus(rng: &mut impl Rng, n: usize) -> Corpus {
    Corpus::from_records((0..n).map(|i| {
        PaperRecord::new(format!("p{i:03}"), "t", Some(rng.gen_range(1990..=2025)), "x")
            .with_citations(rng.gen_range(0..2000))
    }))
    .unwrap()
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
