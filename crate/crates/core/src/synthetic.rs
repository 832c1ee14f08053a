//! Seeded synthetic corpora for scale tests and demos.
//!
//! Papers belong to one of a handful of topics; abstracts draw most words
//! from the topic vocabulary, and citations point mostly at older papers of
//! the same topic. Citation counts are heavy-tailed.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::corpus::write_json;
use crate::error::Result;

const TOPICS: [(&str, &[&str]); 6] = [
    (
        "dense retrieval",
        &["dense", "passage", "encoder", "index", "negative", "contrastive", "recall", "bi-encoder", "vector", "query"],
    ),
    (
        "reranking",
        &["rerank", "cross-encoder", "listwise", "pairwise", "relevance", "score", "candidate", "ordering", "latency", "distill"],
    ),
    (
        "generation",
        &["decoder", "generate", "fluency", "hallucination", "grounded", "answer", "token", "prompt", "context", "faithful"],
    ),
    (
        "knowledge graphs",
        &["entity", "relation", "triple", "graph", "link", "ontology", "schema", "path", "node", "reasoning"],
    ),
    (
        "evaluation",
        &["benchmark", "metric", "annotation", "judge", "agreement", "dataset", "leaderboard", "human", "protocol", "error"],
    ),
    (
        "efficiency",
        &["compression", "quantization", "pruning", "cache", "memory", "throughput", "sparse", "budget", "hardware", "speedup"],
    ),
];

const COMMON: [&str; 12] = [
    "we", "propose", "method", "results", "show", "improves", "model", "approach", "task", "experiments", "across",
    "baseline",
];

const TYPES: [&str; 5] = ["method", "method", "benchmark", "survey", "theory"];

/// `n` paper records as fixture-source JSON values, ids `s0000..`.
pub fn papers(n: usize, seed: u64) -> Vec<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut meta: Vec<(usize, i32)> = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let topic = rng.gen_range(0..TOPICS.len());
        let year = rng.gen_range(2000..=2025);
        let (name, vocab) = TOPICS[topic];
        let mut words: Vec<&str> = (0..rng.gen_range(14..24))
            .map(|_| {
                if rng.gen_bool(0.75) {
                    *vocab.choose(&mut rng).unwrap()
                } else {
                    *COMMON.choose(&mut rng).unwrap()
                }
            })
            .collect();
        words.shuffle(&mut rng);
        let abstract_text = format!("{}.", words.join(" "));
        // Pareto-ish tail: most papers have few citations, a handful many.
        let u: f64 = rng.gen_range(0.0001..1.0);
        let citations = (5.0 / u.powf(0.9)).min(20_000.0) as u64;
        let older: Vec<usize> = (0..i).filter(|&j| meta[j].1 <= year).collect();
        let mut cited = Vec::new();
        for _ in 0..rng.gen_range(0..5).min(older.len()) {
            let pool: Vec<usize> = older.iter().copied().filter(|&j| meta[j].0 == topic).collect();
            let pick = if !pool.is_empty() && rng.gen_bool(0.8) {
                *pool.choose(&mut rng).unwrap()
            } else {
                *older.choose(&mut rng).unwrap()
            };
            let id = format!("s{pick:04}");
            if !cited.contains(&id) {
                cited.push(id);
            }
        }
        if rng.gen_bool(0.1) {
            cited.push(format!("ext{:04}", rng.gen_range(0..1000)));
        }
        meta.push((topic, year));
        out.push(json!({
            "id": format!("s{i:04}"),
            "title": format!("{} study {i}", capitalize(name)),
            "authors": [format!("Author {}", i % 37), format!("Author {}", (i * 7 + 3) % 41)],
            "year": year,
            "abstract": abstract_text,
            "citation_count": citations,
            "cited_ids": cited,
            "paper_type": TYPES[rng.gen_range(0..TYPES.len())],
        }));
    }
    out
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Writes [`papers`] as a fixture-source directory, one file per paper.
pub fn write_fixture(dir: &Path, n: usize, seed: u64) -> Result<()> {
    for p in papers(n, seed) {
        let id = p["id"].as_str().expect("id is a string").to_string();
        write_json(&dir.join(format!("{id}.json")), &p)?;
    }
    Ok(())
}
