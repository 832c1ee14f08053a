//! Prompt templates.
//!
//! Template bodies live as text assets under `templates/` and are compiled
//! into the binary. Placeholders use `{{NAME}}`; lines beginning with `#!` are
//! asset headers and never reach the model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::PaperType;
use crate::error::{Error, Result};
use crate::util::sha256_hex;

pub type Bindings = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    PaperSummarySurvey,
    PaperSummaryMethod,
    PaperSummaryBenchmark,
    PaperSummaryTheory,
    PaperSummaryOther,
    HorizontalSummary,
    VerticalStage1,
    VerticalStage2,
    OutlineGenerate,
    OutlineEvaluate,
    SubsectionWrite,
    SectionEvaluate,
    QueryExpand,
}

impl TemplateName {
    pub const ALL: [TemplateName; 13] = [
        TemplateName::PaperSummarySurvey,
        TemplateName::PaperSummaryMethod,
        TemplateName::PaperSummaryBenchmark,
        TemplateName::PaperSummaryTheory,
        TemplateName::PaperSummaryOther,
        TemplateName::HorizontalSummary,
        TemplateName::VerticalStage1,
        TemplateName::VerticalStage2,
        TemplateName::OutlineGenerate,
        TemplateName::OutlineEvaluate,
        TemplateName::SubsectionWrite,
        TemplateName::SectionEvaluate,
        TemplateName::QueryExpand,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::PaperSummarySurvey => "paper_summary_survey",
            TemplateName::PaperSummaryMethod => "paper_summary_method",
            TemplateName::PaperSummaryBenchmark => "paper_summary_benchmark",
            TemplateName::PaperSummaryTheory => "paper_summary_theory",
            TemplateName::PaperSummaryOther => "paper_summary_other",
            TemplateName::HorizontalSummary => "horizontal_summary",
            TemplateName::VerticalStage1 => "vertical_stage1",
            TemplateName::VerticalStage2 => "vertical_stage2",
            TemplateName::OutlineGenerate => "outline_generate",
            TemplateName::OutlineEvaluate => "outline_evaluate",
            TemplateName::SubsectionWrite => "subsection_write",
            TemplateName::SectionEvaluate => "section_evaluate",
            TemplateName::QueryExpand => "query_expand",
        }
    }

    pub fn for_paper_type(kind: PaperType) -> Self {
        match kind {
            PaperType::Survey => TemplateName::PaperSummarySurvey,
            PaperType::Method => TemplateName::PaperSummaryMethod,
            PaperType::Benchmark => TemplateName::PaperSummaryBenchmark,
            PaperType::Theory => TemplateName::PaperSummaryTheory,
            PaperType::Other => TemplateName::PaperSummaryOther,
        }
    }

    /// The paper type a summary template is tailored to, if any.
    pub fn paper_type(self) -> Option<PaperType> {
        match self {
            TemplateName::PaperSummarySurvey => Some(PaperType::Survey),
            TemplateName::PaperSummaryMethod => Some(PaperType::Method),
            TemplateName::PaperSummaryBenchmark => Some(PaperType::Benchmark),
            TemplateName::PaperSummaryTheory => Some(PaperType::Theory),
            TemplateName::PaperSummaryOther => Some(PaperType::Other),
            _ => None,
        }
    }

    /// Structured calls (outlines, scores, keyword lists) decode at a lower
    /// temperature than free prose.
    pub fn is_structured(self) -> bool {
        matches!(
            self,
            TemplateName::OutlineGenerate
                | TemplateName::OutlineEvaluate
                | TemplateName::SectionEvaluate
                | TemplateName::QueryExpand
        )
    }

    fn source(self) -> &'static str {
        match self {
            TemplateName::PaperSummarySurvey => include_str!("../../templates/paper_summary_survey.txt"),
            TemplateName::PaperSummaryMethod => include_str!("../../templates/paper_summary_method.txt"),
            TemplateName::PaperSummaryBenchmark => {
                include_str!("../../templates/paper_summary_benchmark.txt")
            }
            TemplateName::PaperSummaryTheory => include_str!("../../templates/paper_summary_theory.txt"),
            TemplateName::PaperSummaryOther => include_str!("../../templates/paper_summary_other.txt"),
            TemplateName::HorizontalSummary => include_str!("../../templates/horizontal_summary.txt"),
            TemplateName::VerticalStage1 => include_str!("../../templates/vertical_stage1.txt"),
            TemplateName::VerticalStage2 => include_str!("../../templates/vertical_stage2.txt"),
            TemplateName::OutlineGenerate => include_str!("../../templates/outline_generate.txt"),
            TemplateName::OutlineEvaluate => include_str!("../../templates/outline_evaluate.txt"),
            TemplateName::SubsectionWrite => include_str!("../../templates/subsection_write.txt"),
            TemplateName::SectionEvaluate => include_str!("../../templates/section_evaluate.txt"),
            TemplateName::QueryExpand => include_str!("../../templates/query_expand.txt"),
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TemplateName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::config("template", format!("unknown template `{s}`")))
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{([A-Za-z_][A-Za-z0-9_]*)\}\}").unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
    pub required_placeholders: BTreeSet<String>,
    source_hash: String,
}

impl PromptTemplate {
    pub fn builtin(name: TemplateName) -> Self {
        Self::from_source(name, name.source())
    }

    pub fn from_source(name: TemplateName, source: &str) -> Self {
        let body: String = source
            .lines()
            .filter(|l| !l.starts_with("#!"))
            .collect::<Vec<_>>()
            .join("\n");
        let required_placeholders = placeholder_re()
            .captures_iter(&body)
            .map(|c| c[1].to_string())
            .collect();
        Self {
            name,
            body,
            required_placeholders,
            source_hash: sha256_hex(source.as_bytes()),
        }
    }

    /// SHA-256 of the asset file, header included.
    pub fn sha256(&self) -> &str {
        &self.source_hash
    }

    /// Substitutes every placeholder. Extra bindings are ignored; substituted
    /// values are not re-scanned for placeholders.
    pub fn render(&self, bindings: &Bindings) -> Result<String> {
        if let Some(missing) = self
            .required_placeholders
            .iter()
            .find(|p| !bindings.contains_key(p.as_str()))
        {
            return Err(Error::MissingPlaceholder(missing.clone()));
        }
        let out = placeholder_re().replace_all(&self.body, |c: &regex::Captures<'_>| {
            bindings[&c[1]].clone()
        });
        Ok(out.into_owned())
    }
}

pub fn render(name: TemplateName, bindings: &Bindings) -> Result<String> {
    PromptTemplate::builtin(name).render(bindings)
}

/// Hash of every builtin template, keyed by name.
pub fn template_hashes() -> BTreeMap<String, String> {
    TemplateName::ALL
        .iter()
        .map(|t| (t.as_str().to_string(), PromptTemplate::builtin(*t).sha256().to_string()))
        .collect()
}


#[macro_export]
#[doc(hidden)]
macro_rules! bindings {
    ($($k:expr => $v:expr),* $(,)?) => {{
        let mut b = $crate::llm::Bindings::new();
        $( b.insert(($k).to_string(), ($v).to_string()); )*
        b
    }};
}
