//! The generation phase: a writing agent grounded in the summary memory and
//! an evaluation agent that scores drafts and proposes retrieval queries.

mod document;
mod outline;
mod section;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_json, write_json};
use crate::error::{Error, Result};
use crate::traversal::{ArtifactKind, SummaryArtifact};

pub use document::{assemble, cite_keys, BibEntry, RunMetadata, SurveyDocument};
pub use outline::{outline_phase, OutlineDraft, OutlineOutcome, OutlineSection, OutlineSubsection};
pub use section::{retrieve, subsection_phase, SectionText};

/// The K+N summary artifacts, read-only during generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentMemory {
    artifacts: Vec<SummaryArtifact>,
    index: BTreeMap<String, usize>,
}

impl AgentMemory {
    pub fn new(artifacts: Vec<SummaryArtifact>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, a) in artifacts.iter().enumerate() {
            if index.insert(a.artifact_id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate artifact id {}", a.artifact_id)));
            }
            if a.source_ids.is_empty() {
                return Err(Error::Validation(format!("artifact {} has no sources", a.artifact_id)));
            }
        }
        Ok(Self { artifacts, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_json(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.artifacts)
    }

    pub fn get(&self, id: &str) -> Option<&SummaryArtifact> {
        self.index.get(id).map(|&i| &self.artifacts[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn artifacts(&self) -> &[SummaryArtifact] {
        &self.artifacts
    }

    pub fn len(&self) -> usize {
        self.artifacts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.artifacts.is_empty()
    }

    pub fn of_kind(&self, kind: ArtifactKind) -> impl Iterator<Item = &SummaryArtifact> {
        self.artifacts.iter().filter(move |a| a.kind == kind)
    }

    /// `[id] text` lines for one kind of artifact, one line each.
    pub fn listing(&self, kind: ArtifactKind) -> String {
        listing(self.of_kind(kind))
    }
}

fn listing<'a>(artifacts: impl Iterator<Item = &'a SummaryArtifact>) -> String {
    let lines: Vec<String> = artifacts
        .map(|a| format!("[{}] {}", a.artifact_id, flatten(&a.text)))
        .collect();
    if lines.is_empty() {
        "(none)".to_string()
    } else {
        format!("\n{}", lines.join("\n"))
    }
}

fn flatten(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Evaluation-agent output for an outline or a section.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub strengths: String,
    pub weaknesses: String,
    pub suggestions: String,
    pub score: u8,
    #[serde(default)]
    pub queries: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aspects: BTreeMap<String, u8>,
}

fn score_in_range(score: i64, what: &str) -> Result<u8> {
    if (1..=5).contains(&score) {
        Ok(score as u8)
    } else {
        Err(Error::Validation(format!("{what} score {score} outside 1-5")))
    }
}

impl Feedback {
    /// Parses the `Strengths:` / `Weaknesses:` / `Suggestions:` /
    /// `Final score:` reply of the outline evaluator.
    pub fn parse_outline(text: &str) -> Result<Self> {
        static SCORE: OnceLock<Regex> = OnceLock::new();
        let re = SCORE.get_or_init(|| Regex::new(r"(?i)final\s+score[\s*:=]*(\d+)").unwrap());
        let score = re
            .captures_iter(text)
            .last()
            .and_then(|c| c[1].parse::<i64>().ok())
            .ok_or_else(|| Error::Validation("outline feedback has no final score".into()))?;
        let mut fields: BTreeMap<&str, String> = BTreeMap::new();
        let mut current: Option<&str> = None;
        for line in text.lines() {
            let trimmed = line.trim().trim_start_matches(['-', '*', ' ']);
            let lower = trimmed.to_lowercase();
            let hit = ["strengths", "weaknesses", "suggestions", "final score"]
                .into_iter()
                .find(|k| lower.starts_with(k));
            if let Some(k) = hit {
                current = Some(k);
                let rest = trimmed[k.len()..].trim_start_matches([':', '*', ' ']);
                fields.entry(k).or_default().push_str(rest.trim());
            } else if let Some(k) = current {
                let f = fields.entry(k).or_default();
                if !f.is_empty() {
                    f.push('\n');
                }
                f.push_str(line.trim());
            }
        }
        let mut take = |k: &str| fields.remove(k).unwrap_or_default().trim().to_string();
        Ok(Self {
            strengths: take("strengths"),
            weaknesses: take("weaknesses"),
            suggestions: take("suggestions"),
            score: score_in_range(score, "outline")?,
            queries: Vec::new(),
            aspects: BTreeMap::new(),
        })
    }

    /// Parses the JSON object reply of the section evaluator.
    pub fn parse_section(text: &str) -> Result<Self> {
        let (start, end) = (text.find('{'), text.rfind('}'));
        let body = match (start, end) {
            (Some(s), Some(e)) if s < e => &text[s..=e],
            _ => return Err(Error::Validation("section feedback is not a JSON object".into())),
        };
        let v: serde_json::Value = serde_json::from_str(body)
            .map_err(|e| Error::Validation(format!("section feedback JSON: {e}")))?;
        let number = |v: &serde_json::Value| v.as_f64().or_else(|| v.as_str()?.trim().parse().ok());
        let overall = v
            .get("overall")
            .and_then(number)
            .ok_or_else(|| Error::Validation("section feedback lacks `overall`".into()))?;
        let text_field = |k: &str| match v.get(k) {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(serde_json::Value::Array(a)) => a
                .iter()
                .filter_map(|x| x.as_str())
                .collect::<Vec<_>>()
                .join("\n"),
            _ => String::new(),
        };
        let mut aspects = BTreeMap::new();
        if let Some(obj) = v.get("aspects").and_then(|a| a.as_object()) {
            for (k, val) in obj {
                if let Some(n) = number(val) {
                    aspects.insert(k.clone(), score_in_range(n.round() as i64, k)?);
                }
            }
        }
        let queries = v
            .get("queries")
            .and_then(|q| q.as_array())
            .map(|a| {
                a.iter()
                    .filter_map(|x| x.as_str())
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            })
            .unwrap_or_default();
        Ok(Self {
            strengths: text_field("strengths"),
            weaknesses: text_field("weaknesses"),
            suggestions: text_field("suggestions"),
            score: score_in_range(overall.round() as i64, "overall")?,
            queries,
            aspects,
        })
    }

    /// Rendering passed back to the writing agent.
    pub fn to_prompt(&self) -> String {
        format!(
            "Score: {}/5\nStrengths: {}\nWeaknesses: {}\nSuggestions: {}",
            self.score, self.strengths, self.weaknesses, self.suggestions
        )
    }
}

/// Controls for the outline and subsection loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    pub t_max: u32,
    pub outline_threshold: u8,
    pub section_threshold: u8,
    pub section_top_k: usize,
    /// With `false` the writer drafts once and no evaluation calls are made.
    pub multiagent: bool,
    pub parallel_sections: bool,
    pub concurrency: usize,
    pub min_words: usize,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            t_max: 2,
            outline_threshold: 4,
            section_threshold: 4,
            section_top_k: 60,
            multiagent: true,
            parallel_sections: false,
            concurrency: 8,
            min_words: 400,
        }
    }
}

impl GenerationOptions {
    fn check(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::config("t_max", "must be at least 1"));
        }
        if self.section_top_k == 0 {
            return Err(Error::config("section_top_k", "must be at least 1"));
        }
        Ok(())
    }
}
