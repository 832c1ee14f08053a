//! Citation quality: claims are cited sentences, and an NLI judge decides
//! whether each cited paper entails its claim.
//!
//! Recall is the share of claims entailed by at least one of their cited
//! papers, precision the share of (claim, paper) pairs that entail, and F1
//! their harmonic mean. All three are percentages.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agents::{cite_keys, SurveyDocument};
use crate::corpus::{read_json, Corpus, PaperRecord};
use crate::encoder::tokenize;
use crate::error::{Error, Result};
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub sentence: String,
    pub cited_ids: Vec<String>,
    pub section_key: String,
    pub sentence_index: usize,
}

impl Claim {
    pub fn new(sentence: impl Into<String>, section_key: impl Into<String>, sentence_index: usize) -> Self {
        let sentence = sentence.into();
        let mut seen = BTreeSet::new();
        let cited_ids = cite_keys(&sentence).into_iter().filter(|k| seen.insert(k.clone())).collect();
        Self {
            sentence,
            cited_ids,
            section_key: section_key.into(),
            sentence_index,
        }
    }

    /// The sentence with citation commands removed and whitespace collapsed.
    pub fn text(&self) -> String {
        strip_citations(&self.sentence)
    }

    /// First 16 hex digits of the SHA-256 of [`Claim::text`].
    pub fn hash(&self) -> String {
        claim_hash(&self.sentence)
    }
}

fn cite_command() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s*\\cite[a-zA-Z]*\*?(?:\[[^\]]*\])*\{[^}]*\}").unwrap())
}

pub fn strip_citations(sentence: &str) -> String {
    let stripped = cite_command().replace_all(sentence, "");
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn claim_hash(sentence: &str) -> String {
    sha256_hex(strip_citations(sentence).as_bytes())[..16].to_string()
}

/// Splits at `.`, `?` or `!` when followed by whitespace or the end of the
/// text, unless inside `{...}` or `[...]`.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (n, &(i, c)) in chars.iter().enumerate() {
        match c {
            '{' | '[' => depth += 1,
            '}' | ']' => depth = (depth - 1).max(0),
            '.' | '?' | '!' if depth == 0 => {
                let at_end = chars.get(n + 1).is_none_or(|(_, next)| next.is_whitespace());
                if at_end {
                    let end = i + c.len_utf8();
                    let s = text[start..end].trim();
                    if !s.is_empty() {
                        out.push(s.to_string());
                    }
                    start = end;
                }
            }
            _ => {}
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out
}

/// One claim per cited sentence, in document order.
pub fn extract_claims(survey: &SurveyDocument) -> Vec<Claim> {
    survey
        .sections
        .iter()
        .flat_map(|s| {
            split_sentences(&s.body)
                .into_iter()
                .enumerate()
                .map(|(i, sentence)| Claim::new(sentence, s.key.clone(), i))
                .filter(|c| !c.cited_ids.is_empty())
                .collect::<Vec<_>>()
        })
        .collect()
}

pub trait NliBackend: Send + Sync {
    fn name(&self) -> &str;
    /// Whether `premise` (written by `paper_id`) entails the claim.
    fn entails(&self, claim: &Claim, paper_id: &str, premise: &str) -> Result<bool>;
}

/// Lookup table keyed by `"<claim hash>:<paper id>"`; absent keys are false.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockNli {
    table: BTreeMap<String, bool>,
}

impl MockNli {
    pub fn new(table: BTreeMap<String, bool>) -> Self {
        Self { table }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(read_json(path)?))
    }

    pub fn key(claim: &Claim, paper_id: &str) -> String {
        format!("{}:{paper_id}", claim.hash())
    }

    pub fn insert(&mut self, claim: &Claim, paper_id: &str, verdict: bool) {
        self.table.insert(Self::key(claim, paper_id), verdict);
    }
}

impl NliBackend for MockNli {
    fn name(&self) -> &str {
        "mock"
    }

    fn entails(&self, claim: &Claim, paper_id: &str, _premise: &str) -> Result<bool> {
        Ok(self.table.get(&Self::key(claim, paper_id)).copied().unwrap_or(false))
    }
}

/// Offline heuristic: entails when at least `threshold` of the claim's
/// distinct tokens occur in the premise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexicalNli {
    pub threshold: f64,
}

impl Default for LexicalNli {
    fn default() -> Self {
        Self { threshold: 0.6 }
    }
}

impl NliBackend for LexicalNli {
    fn name(&self) -> &str {
        "lexical"
    }

    fn entails(&self, claim: &Claim, _paper_id: &str, premise: &str) -> Result<bool> {
        let hyp: BTreeSet<String> = tokenize(&claim.text()).collect();
        if hyp.is_empty() {
            return Ok(false);
        }
        let prem: BTreeSet<String> = tokenize(premise).collect();
        let covered = hyp.iter().filter(|t| prem.contains(*t)).count();
        Ok(covered as f64 / hyp.len() as f64 >= self.threshold)
    }
}

/// `POST {endpoint}` with `{"premise", "hypothesis"}`. Accepts either
/// `{"label": "entailment" | ...}` or `{"entailment": p}` compared against
/// `threshold`.
#[derive(Debug, Clone)]
pub struct HttpNli {
    endpoint: String,
    threshold: f64,
    agent: ureq::Agent,
}

impl HttpNli {
    pub fn new(endpoint: impl Into<String>, threshold: f64) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            threshold,
            agent,
        }
    }
}

impl NliBackend for HttpNli {
    fn name(&self) -> &str {
        "http"
    }

    fn entails(&self, claim: &Claim, _paper_id: &str, premise: &str) -> Result<bool> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(json!({ "premise": premise, "hypothesis": claim.text() }))
            .map_err(|e| Error::transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::transport(format!("HTTP {}", resp.status().as_u16())));
        }
        let v: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::transport(format!("bad response body: {e}")))?;
        if let Some(label) = v.get("label").and_then(Value::as_str) {
            return Ok(label.eq_ignore_ascii_case("entailment"));
        }
        v.get("entailment")
            .and_then(Value::as_f64)
            .map(|p| p >= self.threshold)
            .ok_or_else(|| Error::transport("response has neither `label` nor `entailment`"))
    }
}

/// Judges one pair, using the paper's abstract (or summary) as premise.
pub fn entails(claim: &Claim, paper: &PaperRecord, nli: &dyn NliBackend) -> Result<bool> {
    let premise = paper
        .premise()
        .ok_or_else(|| Error::Precondition(format!("paper `{}` has no abstract or summary", paper.id)))?;
    nli.entails(claim, &paper.id, premise)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimVerdict {
    pub section_key: String,
    pub sentence_index: usize,
    pub claim_hash: String,
    pub sentence: String,
    pub cited_ids: Vec<String>,
    pub supported: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub claim: usize,
    pub paper_id: String,
    pub entails: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitationReport {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub nli_backend: String,
    pub claims: Vec<ClaimVerdict>,
    pub pairs: Vec<PairVerdict>,
}

/// `(recall, precision, f1)` in percent from per-claim support and per-pair
/// verdicts.
pub fn metrics(supported: &[bool], pairs: &[bool]) -> (f64, f64, f64) {
    let pct = |v: &[bool]| {
        if v.is_empty() {
            0.0
        } else {
            100.0 * v.iter().filter(|b| **b).count() as f64 / v.len() as f64
        }
    };
    let (r, p) = (pct(supported), pct(pairs));
    let f1 = if r + p > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (r, p, f1)
}

impl CitationReport {
    pub fn supported_claims(&self) -> usize {
        self.claims.iter().filter(|c| c.supported).count()
    }

    pub fn entailing_pairs(&self) -> usize {
        self.pairs.iter().filter(|p| p.entails).count()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12}{:>10}{:>12}", "metric", "value", "count");
        let _ = writeln!(s, "{}", "-".repeat(34));
        let _ = writeln!(
            s,
            "{:<12}{:>10.3}{:>12}",
            "recall",
            self.recall,
            format!("{}/{}", self.supported_claims(), self.claims.len())
        );
        let _ = writeln!(
            s,
            "{:<12}{:>10.3}{:>12}",
            "precision",
            self.precision,
            format!("{}/{}", self.entailing_pairs(), self.pairs.len())
        );
        let _ = writeln!(s, "{:<12}{:>10.3}{:>12}", "f1", self.f1, "");
        let _ = writeln!(s, "\nnli backend: {}", self.nli_backend);
        let unsupported: Vec<&ClaimVerdict> = self.claims.iter().filter(|c| !c.supported).collect();
        if !unsupported.is_empty() {
            let _ = writeln!(s, "\nunsupported claims:");
            for c in unsupported {
                let _ = writeln!(s, "  [{} #{}] {}", c.section_key, c.sentence_index, strip_citations(&c.sentence));
            }
        }
        s
    }
}

/// Judges every (claim, cited paper) pair and aggregates the metrics.
pub fn score(claims: &[Claim], corpus: &Corpus, nli: &dyn NliBackend, concurrency: usize) -> Result<CitationReport> {
    if claims.is_empty() {
        return Err(Error::NothingToEvaluate);
    }
    let mut jobs: Vec<(usize, &PaperRecord)> = Vec::new();
    for (i, c) in claims.iter().enumerate() {
        if c.cited_ids.is_empty() {
            return Err(Error::Precondition(format!("claim {} #{} cites nothing", c.section_key, c.sentence_index)));
        }
        for id in &c.cited_ids {
            let paper = corpus.get(id).ok_or_else(|| Error::UnknownPaper(id.clone()))?;
            jobs.push((i, paper));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?;
    let verdicts: Vec<bool> = pool.install(|| {
        jobs.par_iter()
            .map(|(i, paper)| entails(&claims[*i], paper, nli))
            .collect::<Result<_>>()
    })?;
    let pairs: Vec<PairVerdict> = jobs
        .iter()
        .zip(&verdicts)
        .map(|((i, p), v)| PairVerdict {
            claim: *i,
            paper_id: p.id.clone(),
            entails: *v,
        })
        .collect();
    let mut supported = vec![false; claims.len()];
    for p in &pairs {
        supported[p.claim] |= p.entails;
    }
    let (recall, precision, f1) = metrics(&supported, &verdicts);
    Ok(CitationReport {
        recall,
        precision,
        f1,
        nli_backend: nli.name().to_string(),
        claims: claims
            .iter()
            .zip(&supported)
            .map(|(c, s)| ClaimVerdict {
                section_key: c.section_key.clone(),
                sentence_index: c.sentence_index,
                claim_hash: c.hash(),
                sentence: c.sentence.clone(),
                cited_ids: c.cited_ids.clone(),
                supported: *s,
            })
            .collect(),
        pairs,
    })
}
