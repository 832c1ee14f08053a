//! Run configuration: one JSON file, every field defaulted, flags layered on
//! top by the CLI.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::read_json;
use crate::error::{Error, Result};
use crate::llm::template_hashes;
use crate::util::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Fixture,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mock" => Ok(Self::Mock),
            "http" => Ok(Self::Http),
            other => Err(Error::config("backend", format!("unknown backend `{other}` (mock or http)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliKind {
    Mock,
    Lexical,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSettings {
    pub kind: SourceKind,
    /// Directory of per-paper JSON files for the fixture source.
    pub path: Option<PathBuf>,
    pub endpoint: Option<String>,
    /// Upper bound on expanded keywords, query included.
    pub keywords: usize,
}

impl Default for SourceSettings {
    fn default() -> Self {
        Self {
            kind: SourceKind::Fixture,
            path: None,
            endpoint: None,
            keywords: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSettings {
    pub k_foundation: usize,
    /// Defaults to the current calendar year.
    pub landmark_year: Option<i32>,
    /// Defaults to the current calendar year.
    pub now_year: Option<i32>,
    pub tau_semantic: f64,
    pub include_semantic_in_traversal: bool,
}

impl Default for GraphSettings {
    fn default() -> Self {
        Self {
            k_foundation: 10,
            landmark_year: None,
            now_year: None,
            tau_semantic: 0.75,
            include_semantic_in_traversal: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LeidenSettings {
    pub resolution: f64,
    pub theta: f64,
    pub restarts: u32,
    pub include_semantic: bool,
}

impl Default for LeidenSettings {
    fn default() -> Self {
        Self {
            resolution: 1.0,
            theta: 0.01,
            restarts: 1,
            include_semantic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSettings {
    pub t_max: u32,
    pub outline_threshold: u8,
    pub section_threshold: u8,
    pub parallel_sections: bool,
    pub min_words: usize,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            t_max: 2,
            outline_threshold: 4,
            section_threshold: 4,
            parallel_sections: false,
            min_words: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSettings {
    /// Candidate papers fetched at ingest.
    pub outline_top_k: usize,
    /// Papers retrieved per subsection.
    pub section_top_k: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self {
            outline_top_k: 1500,
            section_top_k: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSettings {
    pub backend: BackendKind,
    pub base_url: String,
    pub model: String,
    pub max_output_tokens: usize,
    pub temperature_structured: f64,
    pub temperature_prose: f64,
    pub max_retries: u32,
    pub tokens_per_minute: Option<u64>,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            max_output_tokens: 4096,
            temperature_structured: 0.0,
            temperature_prose: 0.7,
            max_retries: 3,
            tokens_per_minute: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    pub backend: BackendKind,
    pub endpoint: Option<String>,
    pub dim: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            backend: BackendKind::Mock,
            endpoint: None,
            dim: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NliSettings {
    pub backend: NliKind,
    /// Verdict table for the mock backend; without one every pair is false.
    pub table: Option<PathBuf>,
    pub endpoint: Option<String>,
    /// Token coverage for `lexical`, entailment probability for `http`.
    pub threshold: Option<f64>,
}

impl Default for NliSettings {
    fn default() -> Self {
        Self {
            backend: NliKind::Lexical,
            table: None,
            endpoint: None,
            threshold: None,
        }
    }
}

impl NliSettings {
    pub fn effective_threshold(&self) -> f64 {
        self.threshold.unwrap_or(match self.backend {
            NliKind::Http => 0.5,
            _ => 0.6,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub no_vertical: bool,
    pub no_horizontal: bool,
    pub no_multiagent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub query: String,
    /// Root of all randomness: Leiden, the mock backends and the encoder.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub concurrency: usize,
    pub source: SourceSettings,
    pub graph: GraphSettings,
    pub leiden: LeidenSettings,
    pub generation: GenerationSettings,
    pub retrieval: RetrievalSettings,
    pub llm: LlmSettings,
    pub encoder: EncoderSettings,
    pub nli: NliSettings,
    pub ablation: AblationSettings,
    /// Expected template hashes by name; a mismatch fails validation.
    pub templates: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            query: String::new(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            concurrency: 8,
            source: SourceSettings::default(),
            graph: GraphSettings::default(),
            leiden: LeidenSettings::default(),
            generation: GenerationSettings::default(),
            retrieval: RetrievalSettings::default(),
            llm: LlmSettings::default(),
            encoder: EncoderSettings::default(),
            nli: NliSettings::default(),
            ablation: AblationSettings::default(),
            templates: BTreeMap::new(),
        }
    }
}

pub fn current_year() -> i32 {
    time::OffsetDateTime::now_utc().year()
}

fn check(ok: bool, field: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, message))
    }
}

impl RunConfig {
    /// Reads a config file. Unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = read_json(path)?;
        serde_json::from_value(value).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    pub fn landmark_year(&self) -> i32 {
        self.graph.landmark_year.unwrap_or_else(current_year)
    }

    pub fn now_year(&self) -> i32 {
        self.graph.now_year.unwrap_or_else(current_year)
    }

    /// Pins the current-year defaults so that the hash and every later stage
    /// see the same values.
    pub fn resolved(mut self) -> Self {
        self.graph.landmark_year = Some(self.landmark_year());
        self.graph.now_year = Some(self.now_year());
        self
    }

    pub fn validate(&self) -> Result<()> {
        check(self.concurrency >= 1, "concurrency", "must be at least 1")?;
        check(self.source.keywords >= 1, "source.keywords", "must be at least 1")?;
        let g = &self.graph;
        check(
            (0.0..=1.0).contains(&g.tau_semantic),
            "graph.tau_semantic",
            "must lie in [0, 1]",
        )?;
        check(self.landmark_year() >= 1900, "graph.landmark_year", "must be at least 1900")?;
        check(self.now_year() >= 1900, "graph.now_year", "must be at least 1900")?;
        let l = &self.leiden;
        check(l.resolution > 0.0, "leiden.resolution", "must be positive")?;
        check(l.theta > 0.0, "leiden.theta", "must be positive")?;
        check(l.restarts >= 1, "leiden.restarts", "must be at least 1")?;
        let gen = &self.generation;
        check(gen.t_max >= 1, "generation.t_max", "must be at least 1")?;
        check(
            (1..=5).contains(&gen.outline_threshold),
            "generation.outline_threshold",
            "must lie in 1..=5",
        )?;
        check(
            (1..=5).contains(&gen.section_threshold),
            "generation.section_threshold",
            "must lie in 1..=5",
        )?;
        check(self.retrieval.outline_top_k >= 1, "retrieval.outline_top_k", "must be at least 1")?;
        check(self.retrieval.section_top_k >= 1, "retrieval.section_top_k", "must be at least 1")?;
        let llm = &self.llm;
        check(llm.max_output_tokens >= 1, "llm.max_output_tokens", "must be at least 1")?;
        for (field, t) in [
            ("llm.temperature_structured", llm.temperature_structured),
            ("llm.temperature_prose", llm.temperature_prose),
        ] {
            check((0.0..=2.0).contains(&t), field, "must lie in [0, 2]")?;
        }
        check(llm.tokens_per_minute != Some(0), "llm.tokens_per_minute", "must be positive")?;
        check(self.encoder.dim >= 1, "encoder.dim", "must be at least 1")?;
        check(
            self.encoder.backend == BackendKind::Mock || self.encoder.endpoint.is_some(),
            "encoder.endpoint",
            "required for the http encoder",
        )?;
        check(
            self.nli.backend != NliKind::Http || self.nli.endpoint.is_some(),
            "nli.endpoint",
            "required for the http NLI backend",
        )?;
        check(
            (0.0..=1.0).contains(&self.nli.effective_threshold()),
            "nli.threshold",
            "must lie in [0, 1]",
        )?;
        check(
            !(self.ablation.no_vertical && self.ablation.no_horizontal),
            "ablation",
            "no_vertical and no_horizontal together leave the memory empty",
        )?;
        let actual = template_hashes();
        for (name, want) in &self.templates {
            let field = format!("templates.{name}");
            match actual.get(name) {
                None => return Err(Error::config(field, "unknown template")),
                Some(got) if !got.eq_ignore_ascii_case(want) => {
                    return Err(Error::config(field, format!("hash is {got}, config pins {want}")))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Checks what the ingest stage additionally needs.
    pub fn validate_ingest(&self) -> Result<()> {
        check(!self.query.trim().is_empty(), "query", "must be non-empty")?;
        match self.source.kind {
            SourceKind::Fixture => check(self.source.path.is_some(), "source.path", "required for the fixture source"),
            SourceKind::Http => check(self.source.endpoint.is_some(), "source.endpoint", "required for the http source"),
        }
    }

    /// SHA-256 over the canonical JSON form (sorted keys) of everything that
    /// can change outputs; `out_dir` and `concurrency` are left out.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self.clone().resolved()).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("out_dir");
            obj.remove("concurrency");
        }
        sha256_hex(value.to_string().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let c: RunConfig = serde_json::from_str(r#"{"query": "rag", "graph": {"k_foundation": 3}}"#).unwrap();
        assert_eq!(c.graph.k_foundation, 3);
        assert_eq!(c.graph.tau_semantic, 0.75);
        assert_eq!(c.retrieval.outline_top_k, 1500);
        assert_eq!(c.retrieval.section_top_k, 60);
        assert_eq!(c.generation.t_max, 2);
        assert_eq!(c.encoder.dim, 256);
        assert_eq!(c.concurrency, 8);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"qurey": "x"}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"graph": {"k": 3}}"#).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = RunConfig::default();
        c.generation.t_max = 0;
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "generation.t_max"),
            other => panic!("{other:?}"),
        }
        let mut c = RunConfig::default();
        c.ablation.no_vertical = true;
        c.ablation.no_horizontal = true;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.templates.insert("outline_generate".into(), "00".into());
        assert!(c.validate().unwrap_err().to_string().contains("templates.outline_generate"));
        let mut c = RunConfig::default();
        c.templates = template_hashes();
        c.validate().unwrap();
    }

    #[test]
    fn hash_ignores_key_order_and_output_location() {
        let a: RunConfig =
            serde_json::from_str(r#"{"query": "q", "seed": 3, "graph": {"now_year": 2025, "landmark_year": 2021}}"#)
                .unwrap();
        let b: RunConfig =
            serde_json::from_str(r#"{"graph": {"landmark_year": 2021, "now_year": 2025}, "seed": 3, "query": "q"}"#)
                .unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), c.hash());
        c.seed = 4;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn current_year_defaults_resolve() {
        let c = RunConfig::default().resolved();
        assert_eq!(c.graph.now_year, Some(current_year()));
        assert_eq!(c.graph.landmark_year, Some(current_year()));
    }
}
