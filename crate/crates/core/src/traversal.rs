//! Weighted breadth-first traversal and the summary memory built from it:
//! one vertical summary per Foundation seed and one horizontal summary per
//! community.

use std::collections::{BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bindings;
use crate::communities::Community;
use crate::corpus::{Corpus, PaperRecord, PaperType};
use crate::error::{Error, Result};
use crate::graph::{HierarchicalGraph, Layer};
use crate::llm::{LlmClient, TemplateName};

/// Multi-source weighted BFS.
///
/// Sources are visited up front and queued in ascending id order. Each
/// dequeued node's successors are examined by descending edge weight (ties by
/// ascending id); unvisited successors in `target` are collected and not
/// expanded, all others are queued.
pub fn wbfs<I, S>(graph: &HierarchicalGraph, sources: I, target: Layer) -> Result<Vec<String>>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    wbfs_with(graph, sources, target, true)
}

pub fn wbfs_with<I, S>(graph: &HierarchicalGraph, sources: I, target: Layer, include_semantic: bool) -> Result<Vec<String>>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut visited: BTreeSet<String> = BTreeSet::new();
    for s in sources {
        let s = s.as_ref();
        if !graph.contains(s) {
            return Err(Error::UnknownPaper(s.to_string()));
        }
        visited.insert(s.to_string());
    }
    let mut queue: VecDeque<String> = visited.iter().cloned().collect();
    let mut collected = Vec::new();
    while let Some(u) = queue.pop_front() {
        let mut succ = graph.successors(&u, include_semantic);
        succ.sort_by(|(a, wa), (b, wb)| wb.total_cmp(wa).then_with(|| a.cmp(b)));
        for (v, _) in succ {
            if visited.contains(v) {
                continue;
            }
            visited.insert(v.to_string());
            if graph.layer(v) == Some(target) {
                collected.push(v.to_string());
            } else {
                queue.push_back(v.to_string());
            }
        }
    }
    Ok(collected)
}

/// The attributes of a paper that summaries see: title, year, type and
/// summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperAttributes {
    pub id: String,
    pub title: String,
    pub year: Option<i32>,
    pub paper_type: PaperType,
    pub summary: String,
}

impl PaperAttributes {
    pub fn extract(paper: &PaperRecord) -> Self {
        Self {
            id: paper.id.clone(),
            title: paper.title.clone(),
            year: paper.year,
            paper_type: paper.paper_type,
            summary: paper
                .summary
                .clone()
                .filter(|s| !s.trim().is_empty())
                .unwrap_or_else(|| paper.abstract_text.clone()),
        }
    }

    /// Prompt block; every block starts with `### `.
    pub fn block(&self) -> String {
        let year = self.year.map_or_else(|| "n.d.".to_string(), |y| y.to_string());
        format!(
            "### [{}] {} ({year}, {})\n{}",
            self.id,
            self.title,
            self.paper_type.as_str(),
            self.summary.trim()
        )
    }
}

fn attributes(corpus: &Corpus, id: &str) -> Result<PaperAttributes> {
    corpus
        .get(id)
        .map(PaperAttributes::extract)
        .ok_or_else(|| Error::UnknownPaper(id.to_string()))
}

fn blocks(papers: &[PaperAttributes]) -> String {
    papers.iter().map(PaperAttributes::block).collect::<Vec<_>>().join("\n\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalPath {
    pub seed: String,
    pub p1: PaperAttributes,
    pub p2: Vec<PaperAttributes>,
    pub p3: Vec<PaperAttributes>,
}

impl TraversalPath {
    /// Seed first, then Development, then Frontier ids.
    pub fn source_ids(&self) -> Vec<String> {
        std::iter::once(&self.p1)
            .chain(&self.p2)
            .chain(&self.p3)
            .map(|a| a.id.clone())
            .collect()
    }
}

/// One path per Foundation seed: Development papers reached from the seed,
/// then Frontier papers reached from those.
pub fn vertical_paths(graph: &HierarchicalGraph, corpus: &Corpus, include_semantic: bool) -> Result<Vec<TraversalPath>> {
    graph
        .foundation()
        .into_iter()
        .map(|seed| {
            let dev = wbfs_with(graph, [seed], Layer::Development, include_semantic)?;
            let front = if dev.is_empty() {
                Vec::new()
            } else {
                wbfs_with(graph, &dev, Layer::Frontier, include_semantic)?
            };
            Ok(TraversalPath {
                seed: seed.to_string(),
                p1: attributes(corpus, seed)?,
                p2: dev.iter().map(|id| attributes(corpus, id)).collect::<Result<_>>()?,
                p3: front.iter().map(|id| attributes(corpus, id)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Horizontal,
    Vertical,
}

/// One entry of the writing agent's memory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryArtifact {
    pub artifact_id: String,
    pub kind: ArtifactKind,
    pub source_ids: Vec<String>,
    pub text: String,
    /// Layer name for horizontal artifacts, seed id for vertical ones.
    pub layer_or_seed: String,
    #[serde(default)]
    pub degraded: bool,
    /// First-stage development summary of a vertical artifact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate: Option<String>,
}

fn fallback_text(papers: &[PaperAttributes]) -> String {
    papers
        .iter()
        .map(|p| format!("{}: {}", p.title, p.summary.trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn nonempty(text: String, papers: &[PaperAttributes]) -> (String, bool) {
    if text.trim().is_empty() {
        (fallback_text(papers), true)
    } else {
        (text, false)
    }
}

pub fn summarize_horizontal(
    community: &Community,
    corpus: &Corpus,
    client: &LlmClient,
    query: &str,
) -> Result<SummaryArtifact> {
    if community.member_ids.is_empty() {
        return Err(Error::Precondition(format!("{} has no members", community.community_id)));
    }
    let papers: Vec<PaperAttributes> = community
        .member_ids
        .iter()
        .map(|id| attributes(corpus, id))
        .collect::<Result<_>>()?;
    let reply = client.complete(
        TemplateName::HorizontalSummary,
        &bindings! {"QUERY" => query, "papers" => blocks(&papers)},
    );
    let (text, degraded) = match reply {
        Ok(r) => nonempty(r.text, &papers),
        Err(Error::Transport { message, attempts }) => {
            log::warn!("{} degraded after {attempts} attempts: {message}", community.community_id);
            (fallback_text(&papers), true)
        }
        Err(e) => return Err(e),
    };
    Ok(SummaryArtifact {
        artifact_id: community.community_id.clone(),
        kind: ArtifactKind::Horizontal,
        source_ids: community.member_ids.iter().cloned().collect(),
        text,
        layer_or_seed: community.layer.as_str().to_string(),
        degraded,
        intermediate: None,
    })
}

/// Two-stage path summary: seed plus Development first, then the result
/// with the Frontier papers. Without Frontier papers the first stage is the
/// answer.
pub fn summarize_vertical(path: &TraversalPath, client: &LlmClient, query: &str) -> Result<SummaryArtifact> {
    let stage1: Vec<PaperAttributes> = std::iter::once(path.p1.clone()).chain(path.p2.iter().cloned()).collect();
    let mut all = stage1.clone();
    all.extend(path.p3.iter().cloned());
    let artifact = |text: String, intermediate: Option<String>, degraded: bool| SummaryArtifact {
        artifact_id: format!("seed_{}", path.seed),
        kind: ArtifactKind::Vertical,
        source_ids: path.source_ids(),
        text,
        layer_or_seed: path.seed.clone(),
        degraded,
        intermediate,
    };
    let degrade = |message: String, attempts: u32| {
        log::warn!("seed_{} degraded after {attempts} attempts: {message}", path.seed);
        artifact(fallback_text(&all), None, true)
    };

    let dev = match client.complete(
        TemplateName::VerticalStage1,
        &bindings! {"QUERY" => query, "papers" => blocks(&stage1)},
    ) {
        Ok(r) => r.text,
        Err(Error::Transport { message, attempts }) => return Ok(degrade(message, attempts)),
        Err(e) => return Err(e),
    };
    if dev.trim().is_empty() {
        return Ok(artifact(fallback_text(&all), None, true));
    }
    if path.p3.is_empty() {
        return Ok(artifact(dev.clone(), Some(dev), false));
    }
    match client.complete(
        TemplateName::VerticalStage2,
        &bindings! {"QUERY" => query, "dev_summary" => dev.trim(), "papers" => blocks(&path.p3)},
    ) {
        Ok(r) => {
            let (text, degraded) = nonempty(r.text, &all);
            Ok(artifact(text, Some(dev), degraded))
        }
        Err(Error::Transport { message, attempts }) => Ok(degrade(message, attempts)),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryOptions {
    pub query: String,
    pub vertical: bool,
    pub horizontal: bool,
    pub include_semantic: bool,
    pub concurrency: usize,
}

impl MemoryOptions {
    pub fn new(query: impl Into<String>) -> Self {
        Self {
            query: query.into(),
            vertical: true,
            horizontal: true,
            include_semantic: true,
            concurrency: 8,
        }
    }
}

enum Job<'a> {
    Vertical(TraversalPath),
    Horizontal(&'a Community),
}

/// Builds the K vertical and N horizontal artifacts (vertical first, then
/// communities in the order given).
pub fn build_memory(
    graph: &HierarchicalGraph,
    communities: &[Community],
    corpus: &Corpus,
    client: &LlmClient,
    options: &MemoryOptions,
) -> Result<Vec<SummaryArtifact>> {
    let mut jobs: Vec<Job<'_>> = Vec::new();
    if options.vertical {
        jobs.extend(vertical_paths(graph, corpus, options.include_semantic)?.into_iter().map(Job::Vertical));
    }
    if options.horizontal {
        jobs.extend(communities.iter().map(Job::Horizontal));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.concurrency.max(1))
        .build()
        .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?;
    let artifacts: Vec<SummaryArtifact> = pool.install(|| {
        jobs.par_iter()
            .map(|job| match job {
                Job::Vertical(path) => summarize_vertical(path, client, &options.query),
                Job::Horizontal(c) => summarize_horizontal(c, corpus, client, &options.query),
            })
            .collect::<Result<_>>()
    })?;
    let degraded = artifacts.iter().filter(|a| a.degraded).count();
    if degraded > 0 {
        log::warn!("{degraded} of {} artifacts degraded", artifacts.len());
    }
    let mut ids = BTreeSet::new();
    for a in &artifacts {
        if !ids.insert(a.artifact_id.as_str()) {
            return Err(Error::Validation(format!("duplicate artifact id {}", a.artifact_id)));
        }
    }
    Ok(artifacts)
}
