//! The paper database: records, ingestion, per-paper enrichment and on-disk
//! persistence.

mod enrich;
mod source;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::Embedding;
use crate::error::{Error, Result};

pub use enrich::{
    classify_and_summarize, embed_corpus, expand_query, guess_paper_type, summarize_corpus,
    KeywordSet,
};
pub use source::{
    fetch_papers, record_from_value, FetchOutcome, FixtureSource, HttpSource, PaperSource,
    SOURCE_KEY_ENV,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaperType {
    Survey,
    Method,
    Benchmark,
    Theory,
    #[default]
    Other,
}

impl PaperType {
    pub const ALL: [PaperType; 5] = [
        PaperType::Survey,
        PaperType::Method,
        PaperType::Benchmark,
        PaperType::Theory,
        PaperType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PaperType::Survey => "survey",
            PaperType::Method => "method",
            PaperType::Benchmark => "benchmark",
            PaperType::Theory => "theory",
            PaperType::Other => "other",
        }
    }
}

impl fmt::Display for PaperType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PaperType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
        PaperType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown paper type `{s}`")))
    }
}

/// One paper with its metadata, abstract, outgoing citations and the
/// enrichment added during ingest (type label, summary, embedding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub authors: Vec<String>,
    /// `None` when the source had no publication year.
    #[serde(default)]
    pub year: Option<i32>,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_ref: Option<String>,
    #[serde(default)]
    pub citation_count: u64,
    #[serde(default)]
    pub cited_ids: BTreeSet<String>,
    #[serde(default)]
    pub paper_type: PaperType,
    #[serde(default)]
    pub summary: Option<String>,
    #[serde(default)]
    pub embedding: Option<Embedding>,
    /// Set when summarization fell back to the abstract.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
}

impl PaperRecord {
    pub fn new(
        id: impl Into<String>,
        title: impl Into<String>,
        year: Option<i32>,
        abstract_text: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            authors: Vec::new(),
            year,
            abstract_text: abstract_text.into(),
            body_ref: None,
            citation_count: 0,
            cited_ids: BTreeSet::new(),
            paper_type: PaperType::Other,
            summary: None,
            embedding: None,
            degraded: false,
        }
    }

    pub fn with_citations(mut self, count: u64) -> Self {
        self.citation_count = count;
        self
    }

    pub fn citing<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.cited_ids.extend(ids.into_iter().map(Into::into));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("paper with empty id".into()));
        }
        if let Some(y) = self.year {
            if y < 1900 {
                return Err(Error::Validation(format!("paper `{}` has year {y} < 1900", self.id)));
            }
        }
        if self.cited_ids.contains(&self.id) {
            return Err(Error::Validation(format!("paper `{}` cites itself", self.id)));
        }
        Ok(())
    }

    /// The text used as NLI premise: abstract, else summary.
    pub fn premise(&self) -> Option<&str> {
        [Some(self.abstract_text.as_str()), self.summary.as_deref()]
            .into_iter()
            .flatten()
            .find(|s| !s.trim().is_empty())
    }
}

/// Stable id from a normalized title and year, for sources without native ids.
pub fn derive_paper_id(title: &str, year: Option<i32>) -> String {
    let normalized: Vec<String> = crate::encoder::tokenize(title).collect();
    let key = format!(
        "{}|{}",
        normalized.join(" "),
        year.map(|y| y.to_string()).unwrap_or_default()
    );
    let hex = crate::util::sha256_hex(key.as_bytes());
    format!("p{}", &hex[..16])
}

/// The full-content paper database. Built single-writer, then shared read-only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    papers: BTreeMap<String, PaperRecord>,
    provenance: BTreeMap<String, String>,
    embedding_dim: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    ids: Vec<String>,
    embedding_dim: Option<usize>,
    files: BTreeMap<String, String>,
    provenance: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Corpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = PaperRecord>) -> Result<Self> {
        let mut c = Self::new();
        for r in records {
            c.insert(r, "memory")?;
        }
        Ok(c)
    }

    /// Inserts a new paper. Duplicate ids are an error; see [`Corpus::merge`].
    pub fn insert(&mut self, paper: PaperRecord, provenance: impl Into<String>) -> Result<()> {
        paper.validate()?;
        if self.papers.contains_key(&paper.id) {
            return Err(Error::Validation(format!("duplicate paper id `{}`", paper.id)));
        }
        self.check_dim(&paper)?;
        self.provenance.insert(paper.id.clone(), provenance.into());
        self.papers.insert(paper.id.clone(), paper);
        Ok(())
    }

    /// Inserts, or on an id clash keeps whichever record has more citations.
    pub fn merge(&mut self, paper: PaperRecord, provenance: impl Into<String>) -> Result<()> {
        match self.papers.get(&paper.id) {
            Some(existing) if existing.citation_count >= paper.citation_count => Ok(()),
            Some(_) => {
                paper.validate()?;
                self.check_dim(&paper)?;
                self.provenance.insert(paper.id.clone(), provenance.into());
                self.papers.insert(paper.id.clone(), paper);
                Ok(())
            }
            None => self.insert(paper, provenance),
        }
    }

    fn check_dim(&mut self, paper: &PaperRecord) -> Result<()> {
        if let Some(e) = &paper.embedding {
            match self.embedding_dim {
                Some(d) if d != e.dim() => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        actual: e.dim(),
                    })
                }
                Some(_) => {}
                None => self.embedding_dim = Some(e.dim()),
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&PaperRecord> {
        self.papers.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.papers.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.papers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.papers.is_empty()
    }

    /// Papers in ascending id order.
    pub fn papers(&self) -> impl Iterator<Item = &PaperRecord> {
        self.papers.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.papers.keys().map(String::as_str)
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.embedding_dim
    }

    pub fn provenance(&self, id: &str) -> Option<&str> {
        self.provenance.get(id).map(String::as_str)
    }

    /// `(citing, cited)` pairs whose cited paper lies outside the corpus.
    pub fn external_citations(&self) -> Vec<(&str, &str)> {
        self.papers()
            .flat_map(|p| {
                p.cited_ids
                    .iter()
                    .filter(|c| !self.papers.contains_key(*c))
                    .map(move |c| (p.id.as_str(), c.as_str()))
            })
            .collect()
    }

    pub fn into_records(self) -> impl Iterator<Item = (PaperRecord, String)> {
        let mut prov = self.provenance;
        self.papers.into_values().map(move |p| {
            let source = prov.remove(&p.id).unwrap_or_default();
            (p, source)
        })
    }

    /// Rebuilds the corpus with every record passed through `f`.
    pub fn try_map(self, f: impl Fn(PaperRecord) -> Result<PaperRecord>) -> Result<Self> {
        let mut out = Corpus::new();
        for (p, source) in self.into_records() {
            out.insert(f(p)?, source)?;
        }
        Ok(out)
    }

    /// Writes `manifest.json` and one `papers/<file>.json` per paper.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let papers_dir = dir.join("papers");
        if papers_dir.exists() {
            for entry in fs::read_dir(&papers_dir).map_err(|e| Error::io(&papers_dir, e))? {
                let path = entry.map_err(|e| Error::io(&papers_dir, e))?.path();
                if path.extension().is_some_and(|x| x == "json") {
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
            }
        }
        fs::create_dir_all(&papers_dir).map_err(|e| Error::io(&papers_dir, e))?;
        let mut files = BTreeMap::new();
        for p in self.papers() {
            let file = format!("{}.json", file_stem(&p.id));
            let path = papers_dir.join(&file);
            write_json(&path, p)?;
            files.insert(p.id.clone(), file);
        }
        let manifest = Manifest {
            ids: self.papers.keys().cloned().collect(),
            embedding_dim: self.embedding_dim,
            files,
            provenance: self.provenance.clone(),
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::MissingInput(manifest_path));
        }
        let manifest: Manifest = read_json(&manifest_path)?;
        let mut corpus = Corpus::new();
        for id in &manifest.ids {
            let file = manifest
                .files
                .get(id)
                .ok_or_else(|| Error::Validation(format!("manifest has no file for `{id}`")))?;
            let paper: PaperRecord = read_json(&dir.join("papers").join(file))?;
            if &paper.id != id {
                return Err(Error::Validation(format!("file {file} holds `{}`, not `{id}`", paper.id)));
            }
            let prov = manifest.provenance.get(id).cloned().unwrap_or_default();
            corpus.insert(paper, prov)?;
        }
        if manifest.embedding_dim.is_some() && corpus.embedding_dim != manifest.embedding_dim {
            return Err(Error::Validation("manifest embedding_dim disagrees with papers".into()));
        }
        Ok(corpus)
    }
}

/// File-system-safe stem; ids that need escaping get a hash suffix so distinct
/// ids never collide.
fn file_stem(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    if safe == id && !id.starts_with('.') {
        safe
    } else {
        let hex = crate::util::sha256_hex(id.as_bytes());
        format!("{}_{}", safe.trim_start_matches('.'), &hex[..8])
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(serde_json::from_str(&text)?)
}
