//! Stage orchestration over a run directory.
//!
//! Each stage reads the files of the stages before it and writes its own:
//!
//! | stage     | reads                      | writes |
//! |-----------|----------------------------|--------|
//! | ingest    | source                     | `keywords.json`, `corpus/` |
//! | graph     | `corpus/`                  | `graph.json`, `graph.dot` |
//! | summarize | `corpus/`, `graph.json`    | `memory.json` |
//! | generate  | `corpus/`, `memory.json`   | `outline.json`, `survey.json`, `survey.tex`, `survey.md`, `references.bib`, `generation.json` |
//! | eval      | `corpus/`, `survey.json`   | `report.json`, `report.txt` |
//!
//! After every stage `run_manifest.json` is rewritten with the config hash,
//! seeds, per-stage durations and token usage, and the sha256 of every file
//! in the run directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agents::{
    assemble, outline_phase, subsection_phase, AgentMemory, GenerationOptions, RunMetadata, SurveyDocument,
};
use crate::citeval::{extract_claims, score, HttpNli, LexicalNli, MockNli, NliBackend};
use crate::communities::{partition_all, LeidenConfig};
use crate::config::{BackendKind, NliKind, RunConfig, SourceKind};
use crate::corpus::{
    embed_corpus, expand_query, fetch_papers, read_json, summarize_corpus, write_json, Corpus, FixtureSource,
    HttpSource, KeywordSet, PaperSource,
};
use crate::encoder::{HttpEncoder, MockEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphConfig, GraphExport, Layer};
use crate::llm::{template_hashes, HttpLlm, LlmClient, MockLlm, RetryPolicy, UsageSnapshot};
use crate::traversal::{build_memory, ArtifactKind, MemoryOptions};
use crate::util::sha256_hex;

pub const KEYWORDS_FILE: &str = "keywords.json";
pub const CORPUS_DIR: &str = "corpus";
pub const GRAPH_FILE: &str = "graph.json";
pub const GRAPH_DOT_FILE: &str = "graph.dot";
pub const MEMORY_FILE: &str = "memory.json";
pub const OUTLINE_FILE: &str = "outline.json";
pub const SURVEY_FILE: &str = "survey.json";
pub const SURVEY_TEX_FILE: &str = "survey.tex";
pub const SURVEY_MD_FILE: &str = "survey.md";
pub const BIB_FILE: &str = "references.bib";
pub const GENERATION_FILE: &str = "generation.json";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TXT_FILE: &str = "report.txt";
pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Graph,
    Summarize,
    Generate,
    Eval,
    All,
}

impl Stage {
    /// The stages `All` expands to, in order.
    pub const STEPS: [Stage; 5] = [Stage::Ingest, Stage::Graph, Stage::Summarize, Stage::Generate, Stage::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Graph => "graph",
            Stage::Summarize => "summarize",
            Stage::Generate => "generate",
            Stage::Eval => "eval",
            Stage::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::STEPS
            .into_iter()
            .chain([Stage::All])
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Precondition(format!("unknown stage `{s}`")))
    }
}

/// The model, encoder, NLI and paper-source handles a run uses.
#[derive(Clone)]
pub struct Backends {
    pub llm: LlmClient,
    pub encoder: Arc<dyn TextEncoder>,
    pub nli: Arc<dyn NliBackend>,
    pub source: Option<Arc<dyn PaperSource>>,
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends")
            .field("llm", &self.llm)
            .field("encoder", &self.encoder.name())
            .field("nli", &self.nli.name())
            .field("source", &self.source.as_ref().map(|s| s.name().to_string()))
            .finish()
    }
}

impl Backends {
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        let seed = config.seed;
        let l = &config.llm;
        let mut llm = match l.backend {
            BackendKind::Mock => LlmClient::new(Arc::new(MockLlm::new(seed))).with_retry(RetryPolicy::immediate(0)),
            BackendKind::Http => LlmClient::new(Arc::new(HttpLlm::new(&l.base_url, &l.model))).with_retry(RetryPolicy {
                max_retries: l.max_retries,
                ..RetryPolicy::default()
            }),
        }
        .with_seed(seed);
        llm.max_output_tokens = l.max_output_tokens;
        llm.temperature_structured = l.temperature_structured;
        llm.temperature_prose = l.temperature_prose;
        if let Some(tpm) = l.tokens_per_minute {
            llm = llm.with_rate_limit(tpm);
        }

        let e = &config.encoder;
        let encoder: Arc<dyn TextEncoder> = match (e.backend, &e.endpoint) {
            (BackendKind::Mock, _) => Arc::new(MockEncoder::new(e.dim, seed)),
            (BackendKind::Http, Some(url)) => Arc::new(HttpEncoder::new(url, e.dim)),
            (BackendKind::Http, None) => return Err(Error::config("encoder.endpoint", "required for the http encoder")),
        };

        let n = &config.nli;
        let threshold = n.effective_threshold();
        let nli: Arc<dyn NliBackend> = match n.backend {
            NliKind::Mock => Arc::new(match &n.table {
                Some(path) => MockNli::load(path)?,
                None => MockNli::default(),
            }),
            NliKind::Lexical => Arc::new(LexicalNli { threshold }),
            NliKind::Http => match &n.endpoint {
                Some(url) => Arc::new(HttpNli::new(url, threshold)),
                None => return Err(Error::config("nli.endpoint", "required for the http NLI backend")),
            },
        };

        let s = &config.source;
        let source: Option<Arc<dyn PaperSource>> = match s.kind {
            SourceKind::Fixture => s.path.as_ref().map(|p| Arc::new(FixtureSource::new(p)) as Arc<dyn PaperSource>),
            SourceKind::Http => s.endpoint.as_ref().map(|u| Arc::new(HttpSource::new(u)) as Arc<dyn PaperSource>),
        };
        Ok(Self {
            llm,
            encoder,
            nli,
            source,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub duration_ms: u64,
    pub usage: UsageSnapshot,
    /// Stage-specific counts (papers, edges, artifacts, EA calls, ...).
    pub notes: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub backends: BTreeMap<String, String>,
    pub template_hashes: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
    /// Relative path to sha256 of every file in the run directory.
    pub files: BTreeMap<String, String>,
    pub total_usage: UsageSnapshot,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

fn usage_delta(before: &UsageSnapshot, after: &UsageSnapshot) -> UsageSnapshot {
    let mut by_template = BTreeMap::new();
    for (k, v) in &after.calls_by_template {
        let d = v - before.calls_by_template.get(k).copied().unwrap_or(0);
        if d > 0 {
            by_template.insert(k.clone(), d);
        }
    }
    UsageSnapshot {
        calls: after.calls - before.calls,
        input_tokens: after.input_tokens - before.input_tokens,
        output_tokens: after.output_tokens - before.output_tokens,
        calls_by_template: by_template,
    }
}

fn usage_sum(records: impl Iterator<Item = UsageSnapshot>) -> UsageSnapshot {
    let mut total = UsageSnapshot::default();
    for u in records {
        total.calls += u.calls;
        total.input_tokens += u.input_tokens;
        total.output_tokens += u.output_tokens;
        for (k, v) in u.calls_by_template {
            *total.calls_by_template.entry(k).or_default() += v;
        }
    }
    total
}

/// sha256 of every regular file under `dir` except the manifest itself.
pub fn hash_files(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Validation(format!("walking {}: {e}", dir.display())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under dir");
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        if rel == MANIFEST_FILE {
            continue;
        }
        let bytes = fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        out.insert(rel, sha256_hex(&bytes));
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingInput(path))
    }
}

type Notes = BTreeMap<String, Value>;

struct Run<'a> {
    config: &'a RunConfig,
    backends: &'a Backends,
    dir: &'a Path,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn corpus(&self) -> Result<Corpus> {
        Corpus::load(&self.path(CORPUS_DIR))
    }

    /// The configured query, or the one recorded at ingest.
    fn topic(&self) -> Result<String> {
        if !self.config.query.trim().is_empty() {
            return Ok(self.config.query.trim().to_string());
        }
        match read_json::<KeywordSet>(&self.path(KEYWORDS_FILE)) {
            Ok(k) => Ok(k.query),
            Err(Error::MissingInput(_)) => Err(Error::config("query", "must be non-empty")),
            Err(e) => Err(e),
        }
    }

    fn ingest(&self) -> Result<Notes> {
        self.config.validate_ingest()?;
        let source = self
            .backends
            .source
            .as_deref()
            .ok_or_else(|| Error::config("source", "no paper source configured"))?;
        let c = self.config;
        let keywords = expand_query(&c.query, &self.backends.llm, c.source.keywords)?;
        let fetched = fetch_papers(&keywords, source, c.retrieval.outline_top_k, c.concurrency)?;
        let corpus = summarize_corpus(fetched.corpus, &self.backends.llm, c.concurrency)?;
        let corpus = embed_corpus(corpus, self.backends.encoder.as_ref(), c.concurrency)?;
        let degraded = corpus.papers().filter(|p| p.degraded).count();
        write_json(&self.path(KEYWORDS_FILE), &keywords)?;
        corpus.save(&self.path(CORPUS_DIR))?;
        Ok(Notes::from([
            ("keywords".into(), json!(keywords.keywords.len())),
            ("keyword_fallback".into(), json!(keywords.fallback)),
            ("papers".into(), json!(corpus.len())),
            ("skipped".into(), json!(fetched.skipped)),
            ("degraded".into(), json!(degraded)),
        ]))
    }

    fn graph(&self) -> Result<Notes> {
        let c = self.config;
        let corpus = self.corpus()?;
        let graph = build_graph(
            &corpus,
            &GraphConfig {
                k_foundation: c.graph.k_foundation,
                landmark_year: c.landmark_year(),
                now_year: c.now_year(),
                tau_semantic: c.graph.tau_semantic,
            },
        )?;
        let communities = partition_all(
            &graph,
            &LeidenConfig {
                resolution: c.leiden.resolution,
                theta: c.leiden.theta,
                seed: c.seed,
                include_semantic: c.leiden.include_semantic,
                restarts: c.leiden.restarts,
            },
        )?;
        let export = graph.to_export(&communities);
        write_json(&self.path(GRAPH_FILE), &export)?;
        write_text(&self.path(GRAPH_DOT_FILE), &graph.to_dot())?;
        let mut notes = Notes::from([
            ("nodes".into(), json!(graph.node_ids().len())),
            ("edges".into(), json!(graph.edges().len())),
            ("communities".into(), json!(communities.len())),
            ("missing_year".into(), json!(export.missing_year)),
        ]);
        for layer in Layer::ALL {
            notes.insert(format!("layer_{}", layer.as_str()), json!(graph.layer_nodes(layer).len()));
        }
        Ok(notes)
    }

    fn summarize(&self) -> Result<Notes> {
        let c = self.config;
        let corpus = self.corpus()?;
        let export: GraphExport = read_json(&require(self.path(GRAPH_FILE))?)?;
        let (graph, communities) = export.into_graph()?;
        let options = MemoryOptions {
            query: self.topic()?,
            vertical: !c.ablation.no_vertical,
            horizontal: !c.ablation.no_horizontal,
            include_semantic: c.graph.include_semantic_in_traversal,
            concurrency: c.concurrency,
        };
        let memory = AgentMemory::new(build_memory(&graph, &communities, &corpus, &self.backends.llm, &options)?)?;
        memory.save(&self.path(MEMORY_FILE))?;
        Ok(Notes::from([
            ("artifacts".into(), json!(memory.len())),
            ("vertical".into(), json!(memory.of_kind(ArtifactKind::Vertical).count())),
            ("horizontal".into(), json!(memory.of_kind(ArtifactKind::Horizontal).count())),
            (
                "degraded".into(),
                json!(memory.artifacts().iter().filter(|a| a.degraded).count()),
            ),
        ]))
    }

    fn generate(&self) -> Result<Notes> {
        let c = self.config;
        let memory = AgentMemory::load(&require(self.path(MEMORY_FILE))?)?;
        let corpus = self.corpus()?;
        let topic = self.topic()?;
        let options = GenerationOptions {
            t_max: c.generation.t_max,
            outline_threshold: c.generation.outline_threshold,
            section_threshold: c.generation.section_threshold,
            section_top_k: c.retrieval.section_top_k,
            multiagent: !c.ablation.no_multiagent,
            parallel_sections: c.generation.parallel_sections,
            concurrency: c.concurrency,
            min_words: c.generation.min_words,
        };
        let llm = &self.backends.llm;
        let outline = outline_phase(&memory, &topic, &options, llm)?;
        outline.draft.validate(&memory)?;
        let sections = subsection_phase(&outline.draft, &memory, &corpus, self.backends.encoder.as_ref(), &options, llm)?;
        let section_log: Vec<Value> = sections
            .iter()
            .map(|s| {
                json!({
                    "key": s.key,
                    "revision": s.revision,
                    "ea_calls": s.ea_calls,
                    "scores": s.scores,
                    "word_count": s.word_count,
                    "short": s.short,
                    "retrieved": s.retrieved_ids.len(),
                })
            })
            .collect();
        let short = sections.iter().filter(|s| s.short).count();
        let section_ea: u32 = sections.iter().map(|s| s.ea_calls).sum();
        let doc = assemble(
            &topic,
            &outline.draft,
            sections,
            &corpus,
            RunMetadata {
                root_seed: c.seed,
                llm_backend: llm.backend_name().to_string(),
                encoder: self.backends.encoder.name().to_string(),
                config_hash: c.hash(),
            },
        )?;
        write_text(&self.path(OUTLINE_FILE), &(outline.draft.to_json() + "\n"))?;
        write_json(&self.path(SURVEY_FILE), &doc)?;
        write_text(&self.path(SURVEY_TEX_FILE), &doc.to_latex())?;
        write_text(&self.path(SURVEY_MD_FILE), &doc.to_markdown())?;
        write_text(&self.path(BIB_FILE), &doc.to_bibtex())?;
        write_json(
            &self.path(GENERATION_FILE),
            &json!({
                "t_max": options.t_max,
                "multiagent": options.multiagent,
                "outline": {
                    "revision": outline.draft.revision,
                    "ea_calls": outline.ea_calls,
                    "feedback": outline.feedback,
                },
                "sections": section_log,
            }),
        )?;
        Ok(Notes::from([
            ("outline_revision".into(), json!(outline.draft.revision)),
            ("outline_ea_calls".into(), json!(outline.ea_calls)),
            ("subsections".into(), json!(doc.sections.len())),
            ("section_ea_calls".into(), json!(section_ea)),
            ("short_sections".into(), json!(short)),
            ("bibliography".into(), json!(doc.bibliography.len())),
        ]))
    }

    fn eval(&self) -> Result<Notes> {
        let doc: SurveyDocument = read_json(&require(self.path(SURVEY_FILE))?)?;
        let corpus = self.corpus()?;
        let claims = extract_claims(&doc);
        let report = score(&claims, &corpus, self.backends.nli.as_ref(), self.config.concurrency)?;
        write_json(&self.path(REPORT_FILE), &report)?;
        write_text(&self.path(REPORT_TXT_FILE), &report.to_table())?;
        Ok(Notes::from([
            ("claims".into(), json!(report.claims.len())),
            ("pairs".into(), json!(report.pairs.len())),
            ("recall".into(), json!(report.recall)),
            ("precision".into(), json!(report.precision)),
            ("f1".into(), json!(report.f1)),
        ]))
    }

    fn step(&self, stage: Stage) -> Result<Notes> {
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Graph => self.graph(),
            Stage::Summarize => self.summarize(),
            Stage::Generate => self.generate(),
            Stage::Eval => self.eval(),
            Stage::All => unreachable!("expanded by the caller"),
        }
    }

    fn record(&self, stage: Stage, record: StageRecord) -> Result<RunManifest> {
        let path = self.path(MANIFEST_FILE);
        let mut manifest = if path.exists() {
            RunManifest::load(&path)?
        } else {
            RunManifest::default()
        };
        let c = self.config;
        let hash = c.hash();
        if manifest.config_hash != hash {
            // A different config invalidates earlier stage records.
            manifest.stages.clear();
        }
        manifest.config_hash = hash;
        manifest.config = serde_json::to_value(c)?;
        manifest.seeds = BTreeMap::from([
            ("root".to_string(), c.seed),
            ("leiden".to_string(), c.seed),
            ("llm".to_string(), c.seed),
            ("encoder".to_string(), c.seed),
        ]);
        manifest.backends = BTreeMap::from([
            ("llm".to_string(), self.backends.llm.backend_name().to_string()),
            ("encoder".to_string(), self.backends.encoder.name().to_string()),
            ("nli".to_string(), self.backends.nli.name().to_string()),
        ]);
        manifest.template_hashes = template_hashes();
        manifest.stages.insert(stage.as_str().to_string(), record);
        manifest.total_usage = usage_sum(manifest.stages.values().map(|s| s.usage.clone()));
        manifest.files = hash_files(self.dir)?;
        write_json(&path, &manifest)?;
        Ok(manifest)
    }
}

/// Validates `config`, builds its backends and runs `stage`.
pub fn run_stage(stage: Stage, config: &RunConfig) -> Result<RunManifest> {
    let config = config.clone().resolved();
    config.validate()?;
    let backends = Backends::from_config(&config)?;
    run_stage_with(stage, &config, &backends)
}

/// Like [`run_stage`] with caller-supplied backends (scripted mocks in tests).
pub fn run_stage_with(stage: Stage, config: &RunConfig, backends: &Backends) -> Result<RunManifest> {
    let config = config.clone().resolved();
    config.validate()?;
    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let run = Run {
        config: &config,
        backends,
        dir: &dir,
    };
    let steps: Vec<Stage> = if stage == Stage::All {
        Stage::STEPS.to_vec()
    } else {
        vec![stage]
    };
    let mut manifest = RunManifest::default();
    for step in steps {
        log::info!("stage {step} starting");
        let before = backends.llm.usage().snapshot();
        let start = Instant::now();
        let notes = run.step(step)?;
        let record = StageRecord {
            duration_ms: start.elapsed().as_millis() as u64,
            usage: usage_delta(&before, &backends.llm.usage().snapshot()),
            notes,
        };
        log::info!("stage {step} done in {} ms", record.duration_ms);
        manifest = run.record(step, record)?;
    }
    Ok(manifest)
}
