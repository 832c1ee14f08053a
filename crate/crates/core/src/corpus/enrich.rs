use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Corpus, PaperRecord, PaperType};
use crate::bindings;
use crate::encoder::{embed_abstract, TextEncoder};
use crate::error::{Error, Result};
use crate::llm::{LlmClient, TemplateName};

/// A query and its expansion into search keywords. The query itself is
/// always the first keyword.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSet {
    pub query: String,
    pub keywords: Vec<String>,
    /// Set when the model reply could not be used and only the query remains.
    #[serde(default)]
    pub fallback: bool,
}

impl KeywordSet {
    /// Puts `query` first, drops blanks and case-insensitive duplicates, and
    /// keeps at most `n_max`.
    pub fn new(
        query: &str,
        candidates: impl IntoIterator<Item = String>,
        n_max: usize,
    ) -> Result<Self> {
        let query = query.trim();
        if query.is_empty() {
            return Err(Error::Precondition("query must be non-empty".into()));
        }
        if n_max == 0 {
            return Err(Error::Precondition("n_max must be at least 1".into()));
        }
        let mut keywords: Vec<String> = vec![query.to_string()];
        for c in candidates {
            let c = c.trim().to_string();
            if c.is_empty() || keywords.iter().any(|k| k.to_lowercase() == c.to_lowercase()) {
                continue;
            }
            keywords.push(c);
        }
        keywords.truncate(n_max);
        Ok(Self {
            query: query.to_string(),
            keywords,
            fallback: false,
        })
    }
}

fn clean_keyword_line(line: &str) -> Option<String> {
    static LEAD: OnceLock<Regex> = OnceLock::new();
    let lead = LEAD.get_or_init(|| Regex::new(r"^\s*(?:[-*•]+|\d+[.)])\s*").unwrap());
    let s = lead.replace(line, "");
    let s = s.trim().trim_matches(|c| c == '"' || c == '\'' || c == ',').trim();
    (s.chars().any(char::is_alphanumeric) && s.len() <= 120).then(|| s.to_string())
}

/// Asks the model for up to `n_max` search keywords.
///
/// A reply with no usable keyword degrades to just the query, with
/// `fallback` set. Transport failures propagate.
pub fn expand_query(query: &str, client: &LlmClient, n_max: usize) -> Result<KeywordSet> {
    if query.trim().is_empty() {
        return Err(Error::Precondition("query must be non-empty".into()));
    }
    if n_max == 0 {
        return Err(Error::Precondition("n_max must be at least 1".into()));
    }
    let reply = client.complete(
        TemplateName::QueryExpand,
        &bindings! {"QUERY" => query.trim(), "n_max" => n_max},
    )?;
    let parsed: Vec<String> = reply.text.lines().filter_map(clean_keyword_line).collect();
    if parsed.is_empty() {
        log::warn!("query expansion reply unusable; falling back to the query alone");
        let mut ks = KeywordSet::new(query, std::iter::empty(), n_max)?;
        ks.fallback = true;
        return Ok(ks);
    }
    KeywordSet::new(query, parsed, n_max)
}

/// Cheap lexical guess used only to pick a summary template; the model's
/// answer decides the final label.
pub fn guess_paper_type(paper: &PaperRecord) -> PaperType {
    if paper.paper_type != PaperType::Other {
        return paper.paper_type;
    }
    let text = format!("{} {}", paper.title, paper.abstract_text).to_lowercase();
    let has = |words: &[&str]| words.iter().any(|w| text.contains(w));
    if has(&["survey", "review of", "overview of", "literature review"]) {
        PaperType::Survey
    } else if has(&["benchmark", "dataset", "leaderboard"]) {
        PaperType::Benchmark
    } else if has(&["theorem", "we prove", "lower bound", "upper bound", "convergence rate"]) {
        PaperType::Theory
    } else {
        PaperType::Method
    }
}

fn parse_summary_reply(reply: &str) -> (Option<PaperType>, Option<String>) {
    static TYPE: OnceLock<Regex> = OnceLock::new();
    static SUMMARY: OnceLock<Regex> = OnceLock::new();
    let type_re = TYPE.get_or_init(|| Regex::new(r"(?im)^\s*TYPE:\s*(\S+)").unwrap());
    let summary_re = SUMMARY.get_or_init(|| Regex::new(r"(?is)SUMMARY:\s*(.+)").unwrap());
    let label = type_re
        .captures(reply)
        .and_then(|c| c[1].parse::<PaperType>().ok());
    let summary = match summary_re.captures(reply) {
        Some(c) => Some(c[1].trim().to_string()),
        None => {
            let rest: Vec<&str> = reply
                .lines()
                .filter(|l| !type_re.is_match(l))
                .collect();
            Some(rest.join("\n").trim().to_string())
        }
    }
    .filter(|s| !s.is_empty());
    (label, summary)
}

/// Labels and summarizes one paper in a single model call. On backend
/// failure the paper keeps its abstract as summary, typed `other` and
/// marked degraded.
pub fn classify_and_summarize(paper: &PaperRecord, client: &LlmClient) -> Result<PaperRecord> {
    if paper.abstract_text.trim().is_empty() {
        return Err(Error::Precondition(format!("paper `{}` has an empty abstract", paper.id)));
    }
    let guess = guess_paper_type(paper);
    let mut out = paper.clone();
    let reply = client.complete(
        TemplateName::for_paper_type(guess),
        &bindings! {"title" => paper.title, "abstract" => paper.abstract_text},
    );
    match reply {
        Ok(r) => {
            let (label, summary) = parse_summary_reply(&r.text);
            match summary {
                Some(s) => {
                    out.paper_type = label.unwrap_or(guess);
                    out.summary = Some(s);
                    out.degraded = false;
                }
                None => degrade(&mut out),
            }
        }
        Err(Error::Transport { message, attempts }) => {
            log::warn!("summarizing `{}` failed after {attempts} attempt(s): {message}", paper.id);
            degrade(&mut out);
        }
        Err(e) => return Err(e),
    }
    Ok(out)
}

fn degrade(p: &mut PaperRecord) {
    p.paper_type = PaperType::Other;
    p.summary = Some(p.abstract_text.clone());
    p.degraded = true;
}

fn pool(concurrency: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| Error::config("concurrency", e.to_string()))
}

/// Summarizes every paper with at most `concurrency` calls in flight.
pub fn summarize_corpus(corpus: Corpus, client: &LlmClient, concurrency: usize) -> Result<Corpus> {
    let records: Vec<(PaperRecord, String)> = corpus.into_records().collect();
    let done: Vec<(PaperRecord, String)> = pool(concurrency)?.install(|| {
        records
            .into_par_iter()
            .map(|(p, prov)| Ok((classify_and_summarize(&p, client)?, prov)))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut out = Corpus::new();
    for (p, prov) in done {
        out.insert(p, prov)?;
    }
    Ok(out)
}

/// Embeds every paper that has no embedding yet.
pub fn embed_corpus(corpus: Corpus, encoder: &dyn TextEncoder, concurrency: usize) -> Result<Corpus> {
    if let Some(d) = corpus.embedding_dim() {
        if d != encoder.dim() {
            return Err(Error::config(
                "encoder.dim",
                format!("corpus uses dimension {d}, encoder produces {}", encoder.dim()),
            ));
        }
    }
    let records: Vec<(PaperRecord, String)> = corpus.into_records().collect();
    let done: Vec<(PaperRecord, String)> = pool(concurrency)?.install(|| {
        records
            .into_par_iter()
            .map(|(mut p, prov)| {
                if p.embedding.is_none() {
                    p.embedding = Some(embed_abstract(&p, encoder)?);
                }
                Ok((p, prov))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut out = Corpus::new();
    for (p, prov) in done {
        out.insert(p, prov)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::encoder::MockEncoder;
    use crate::llm::{MockLlm, MockScript, RetryPolicy};

    fn client(mock: MockLlm) -> LlmClient {
        LlmClient::new(Arc::new(mock)).with_retry(RetryPolicy::immediate(1))
    }

    #[test]
    fn expansion_uses_scripted_keywords() {
        let mock = MockLlm::new(1).with_reply(
            TemplateName::QueryExpand,
            "1. message passing\n2. Graph Neural Networks\n- spectral graph convolution\n* graph attention\n- node classification\n- graph pooling",
        );
        let ks = expand_query("graph neural networks", &client(mock), 5).unwrap();
        assert_eq!(ks.keywords[0], "graph neural networks");
        assert!(ks.keywords.contains(&"message passing".to_string()));
        assert!(ks.keywords.len() <= 5);
        assert!(!ks.fallback);
        // case-insensitive dedup removed the echoed query
        assert_eq!(
            ks.keywords.iter().filter(|k| k.to_lowercase() == "graph neural networks").count(),
            1
        );
    }

    #[test]
    fn expansion_is_deterministic_under_default_mock() {
        let a = expand_query("rag", &client(MockLlm::new(3)), 4).unwrap();
        let b = expand_query("rag", &client(MockLlm::new(3)), 4).unwrap();
        assert_eq!(a, b);
        assert!(a.keywords.len() <= 4 && a.keywords[0] == "rag");
    }

    #[test]
    fn empty_reply_falls_back_to_query() {
        let mock = MockLlm::new(1).with_reply(TemplateName::QueryExpand, "");
        let ks = expand_query("x", &client(mock), 5).unwrap();
        assert_eq!(ks.keywords, ["x"]);
        assert!(ks.fallback);
    }

    #[test]
    fn empty_query_is_rejected() {
        assert!(matches!(
            expand_query("", &client(MockLlm::new(1)), 5),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn backend_failure_during_expansion_propagates() {
        let mock = MockLlm::new(1).with_script(MockScript {
            always_fail: true,
            ..Default::default()
        });
        assert!(matches!(
            expand_query("x", &client(mock), 5),
            Err(Error::Transport { attempts: 2, .. })
        ));
    }

    fn survey_like() -> PaperRecord {
        PaperRecord::new("s", "A Survey of Graph Learning", Some(2021), "We review graph learning methods.")
    }

    #[test]
    fn classification_uses_scripted_label_and_summary() {
        let mock = MockLlm::new(1).with_reply(
            TemplateName::PaperSummarySurvey,
            "TYPE: survey\nSUMMARY: A taxonomy of graph learning.",
        );
        let c = client(mock);
        let out = classify_and_summarize(&survey_like(), &c).unwrap();
        assert_eq!(out.paper_type, PaperType::Survey);
        assert_eq!(out.summary.as_deref(), Some("A taxonomy of graph learning."));
        assert_eq!(c.usage().calls_for(TemplateName::PaperSummarySurvey), 1);
        assert_eq!(out.title, survey_like().title);
        assert_eq!(out.abstract_text, survey_like().abstract_text);
    }

    #[test]
    fn template_follows_guessed_type() {
        let mock = Arc::new(MockLlm::new(1));
        let c = LlmClient::new(mock.clone());
        let method = PaperRecord::new("m", "Fast Attention", Some(2022), "We propose a fast attention kernel.");
        classify_and_summarize(&method, &c).unwrap();
        classify_and_summarize(&survey_like(), &c).unwrap();
        let names: Vec<_> = mock.requests().iter().map(|r| r.template).collect();
        assert_eq!(names, [TemplateName::PaperSummaryMethod, TemplateName::PaperSummarySurvey]);
    }

    #[test]
    fn empty_abstract_is_rejected() {
        let p = PaperRecord::new("e", "E", Some(2020), " ");
        assert!(matches!(
            classify_and_summarize(&p, &client(MockLlm::new(1))),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn failing_backend_degrades() {
        let mock = MockLlm::new(1).with_script(MockScript {
            always_fail: true,
            ..Default::default()
        });
        let p = PaperRecord::new("m", "Fast Attention", Some(2022), "We propose a kernel.");
        let out = classify_and_summarize(&p, &client(mock)).unwrap();
        assert_eq!(out.paper_type, PaperType::Other);
        assert_eq!(out.summary.as_deref(), Some("We propose a kernel."));
        assert!(out.degraded);
    }

    #[test]
    fn every_paper_gets_summary_and_embedding() {
        let corpus = Corpus::from_records((0..20).map(|i| {
            PaperRecord::new(format!("p{i}"), format!("Paper {i}"), Some(2000 + i), format!("Abstract number {i}."))
        }))
        .unwrap();
        let c = client(MockLlm::new(1));
        let corpus = summarize_corpus(corpus, &c, 4).unwrap();
        let corpus = embed_corpus(corpus, &MockEncoder::new(32, 0), 4).unwrap();
        assert_eq!(corpus.len(), 20);
        assert_eq!(corpus.embedding_dim(), Some(32));
        for p in corpus.papers() {
            assert!(p.summary.as_deref().is_some_and(|s| !s.is_empty()));
            assert!(p.embedding.is_some());
        }
    }
}
