use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use rayon::prelude::*;
use serde_json::Value;

use super::{derive_paper_id, enrich::KeywordSet, Corpus, PaperRecord, PaperType, MANIFEST_FILE};
use crate::error::{Error, Result};

/// Environment variable holding the API key for [`HttpSource`].
pub const SOURCE_KEY_ENV: &str = "SURVEYG_SOURCE_KEY";

/// A scholarly search backend. Hits come back best-ranked first, as raw JSON
/// so malformed records can be counted rather than failing the whole search.
pub trait PaperSource: Send + Sync {
    fn name(&self) -> &str;
    fn search(&self, keyword: &str, limit: usize) -> Result<Vec<Value>>;
}

/// Directory of per-paper JSON files, ranked by file name.
///
/// Returns the same ranked list for every keyword; a saved corpus's `papers/`
/// directory is itself a valid fixture source.
#[derive(Debug, Clone)]
pub struct FixtureSource {
    dir: PathBuf,
}

impl FixtureSource {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn files(&self) -> Result<Vec<PathBuf>> {
        if !self.dir.is_dir() {
            return Err(Error::MissingInput(self.dir.clone()));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&self.dir)
            .map_err(|e| Error::io(&self.dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|x| x == "json")
                    && p.file_name().is_some_and(|n| n != MANIFEST_FILE)
            })
            .collect();
        files.sort();
        Ok(files)
    }
}

impl PaperSource for FixtureSource {
    fn name(&self) -> &str {
        "fixture"
    }

    fn search(&self, _keyword: &str, limit: usize) -> Result<Vec<Value>> {
        let mut out = Vec::new();
        for path in self.files()?.into_iter().take(limit) {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            // Unparseable files still occupy a rank slot so they get counted.
            out.push(serde_json::from_str(&text).unwrap_or(Value::Null));
        }
        Ok(out)
    }
}

/// `GET {endpoint}?query=..&limit=..` returning either a JSON array of papers
/// or `{"papers": [...]}` / `{"data": [...]}`.
#[derive(Debug, Clone)]
pub struct HttpSource {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpSource {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            api_key: std::env::var(SOURCE_KEY_ENV).ok(),
            agent,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }
}

impl PaperSource for HttpSource {
    fn name(&self) -> &str {
        "http"
    }

    fn search(&self, keyword: &str, limit: usize) -> Result<Vec<Value>> {
        let mut req = self
            .agent
            .get(&self.endpoint)
            .query("query", keyword)
            .query("limit", limit.to_string());
        if let Some(key) = &self.api_key {
            req = req.header("x-api-key", key);
        }
        let mut resp = req.call().map_err(|e| Error::transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::transport(format!("HTTP {}", resp.status().as_u16())));
        }
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::transport(format!("bad response body: {e}")))?;
        let list = match body {
            Value::Array(a) => a,
            Value::Object(mut o) => match o.remove("papers").or_else(|| o.remove("data")) {
                Some(Value::Array(a)) => a,
                _ => return Err(Error::transport("response has no paper list")),
            },
            _ => return Err(Error::transport("response has no paper list")),
        };
        Ok(list.into_iter().take(limit).collect())
    }
}

fn str_field<'a>(v: &'a Value, keys: &[&str]) -> Option<&'a str> {
    keys.iter()
        .find_map(|k| v.get(*k).and_then(Value::as_str))
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

/// Lenient decoding of one source record. Accepts this crate's own field
/// names and the common Semantic-Scholar-style camelCase variants. Returns
/// `None` for records without a title or abstract, or with invalid numbers.
pub fn record_from_value(v: &Value) -> Option<PaperRecord> {
    let title = str_field(v, &["title"])?.to_string();
    let abstract_text = str_field(v, &["abstract"])?.to_string();
    let year = match v.get("year") {
        None | Some(Value::Null) => None,
        Some(y) => {
            let y = i32::try_from(y.as_i64()?).ok()?;
            if y < 1900 {
                return None;
            }
            Some(y)
        }
    };
    let citation_count = match v.get("citation_count").or_else(|| v.get("citationCount")) {
        None | Some(Value::Null) => 0,
        Some(c) => c.as_u64()?,
    };
    let id = str_field(v, &["id", "paperId"])
        .map(str::to_string)
        .unwrap_or_else(|| derive_paper_id(&title, year));
    let authors = v
        .get("authors")
        .and_then(Value::as_array)
        .map(|a| {
            a.iter()
                .filter_map(|x| x.as_str().or_else(|| x.get("name").and_then(Value::as_str)))
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default();
    let mut cited_ids: std::collections::BTreeSet<String> = v
        .get("cited_ids")
        .or_else(|| v.get("references"))
        .and_then(Value::as_array)
        .map(|a| {
            a.iter()
                .filter_map(|x| x.as_str().or_else(|| x.get("paperId").and_then(Value::as_str)))
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default();
    cited_ids.remove(&id);
    let paper_type = str_field(v, &["paper_type"])
        .and_then(|s| s.parse::<PaperType>().ok())
        .unwrap_or_default();
    let embedding = match v.get("embedding") {
        None | Some(Value::Null) => None,
        Some(e) => Some(serde_json::from_value(e.clone()).ok()?),
    };
    Some(PaperRecord {
        id,
        title,
        authors,
        year,
        abstract_text,
        body_ref: str_field(v, &["body_ref", "url"]).map(str::to_string),
        citation_count,
        cited_ids,
        paper_type,
        summary: str_field(v, &["summary"]).map(str::to_string),
        embedding,
        degraded: v.get("degraded").and_then(Value::as_bool).unwrap_or(false),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchOutcome {
    pub corpus: Corpus,
    /// Records dropped as malformed.
    pub skipped: usize,
}

/// Searches every keyword, merges hits by id and keeps the `limit` best.
///
/// A paper's rank is its best `(position in hit list, keyword index)`, so the
/// top hit of every keyword outranks any second hit.
pub fn fetch_papers(
    keywords: &KeywordSet,
    source: &dyn PaperSource,
    limit: usize,
    concurrency: usize,
) -> Result<FetchOutcome> {
    if limit == 0 {
        return Err(Error::Precondition("fetch limit must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| Error::config("concurrency", e.to_string()))?;
    let hits: Vec<Vec<Value>> = pool.install(|| {
        keywords
            .keywords
            .par_iter()
            .map(|k| source.search(k, limit))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut skipped = 0;
    let mut best: BTreeMap<String, ((usize, usize), PaperRecord, String)> = BTreeMap::new();
    for (ki, list) in hits.iter().enumerate() {
        for (pos, raw) in list.iter().enumerate() {
            let Some(rec) = record_from_value(raw).filter(|r| r.validate().is_ok()) else {
                skipped += 1;
                continue;
            };
            let rank = (pos, ki);
            let prov = format!("{}:{}", source.name(), keywords.keywords[ki]);
            match best.get_mut(&rec.id) {
                None => {
                    best.insert(rec.id.clone(), (rank, rec, prov));
                }
                Some(slot) => {
                    slot.0 = slot.0.min(rank);
                    if rec.citation_count > slot.1.citation_count {
                        slot.1 = rec;
                        slot.2 = prov;
                    }
                }
            }
        }
    }
    let mut ranked: Vec<_> = best.into_values().collect();
    ranked.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let mut corpus = Corpus::new();
    for (_, rec, prov) in ranked.into_iter().take(limit) {
        corpus.insert(rec, prov)?;
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} malformed record(s) from {}", source.name());
    }
    Ok(FetchOutcome { corpus, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::path::Path;

    fn write(dir: &Path, name: &str, v: Value) {
        fs::write(dir.join(name), serde_json::to_string(&v).unwrap()).unwrap();
    }

    fn fixture(n: usize) -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        for i in 0..n {
            write(
                d.path(),
                &format!("{i:02}.json"),
                json!({"id": format!("p{i:02}"), "title": format!("T{i}"), "year": 2015 + i as i64,
                       "abstract": "a b c", "citation_count": 10 * i}),
            );
        }
        d
    }

    fn kw(words: &[&str]) -> KeywordSet {
        KeywordSet::new(words[0], words.iter().map(|s| s.to_string()), 10).unwrap()
    }

    #[test]
    fn fetch_dedupes_across_keywords() {
        let d = fixture(12);
        let out = fetch_papers(&kw(&["a", "b", "c"]), &FixtureSource::new(d.path()), 1500, 4).unwrap();
        assert_eq!(out.corpus.len(), 12);
        assert_eq!(out.skipped, 0);
    }

    #[test]
    fn fetch_limit_keeps_best_ranked() {
        let d = fixture(12);
        let out = fetch_papers(&kw(&["a"]), &FixtureSource::new(d.path()), 3, 1).unwrap();
        let ids: Vec<_> = out.corpus.ids().collect();
        assert_eq!(ids, ["p00", "p01", "p02"]);
    }

    #[test]
    fn empty_source_gives_empty_corpus() {
        let d = tempfile::tempdir().unwrap();
        let out = fetch_papers(&kw(&["a"]), &FixtureSource::new(d.path()), 10, 2).unwrap();
        assert!(out.corpus.is_empty());
    }

    #[test]
    fn fetching_twice_is_idempotent() {
        let d = fixture(5);
        let src = FixtureSource::new(d.path());
        let a = fetch_papers(&kw(&["x"]), &src, 100, 2).unwrap();
        let b = fetch_papers(&kw(&["x", "x again"]), &src, 100, 2).unwrap();
        assert_eq!(a.corpus.papers().collect::<Vec<_>>(), b.corpus.papers().collect::<Vec<_>>());
    }

    #[test]
    fn malformed_records_are_skipped_and_counted() {
        let d = fixture(2);
        write(d.path(), "50.json", json!({"title": "no abstract"}));
        write(d.path(), "51.json", json!({"title": "t", "abstract": "a", "year": 1200}));
        fs::write(d.path().join("52.json"), "{not json").unwrap();
        let out = fetch_papers(&kw(&["a"]), &FixtureSource::new(d.path()), 10, 1).unwrap();
        assert_eq!(out.corpus.len(), 2);
        assert_eq!(out.skipped, 3);
    }

    #[test]
    fn duplicate_ids_keep_larger_citation_count() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "a.json", json!({"id": "x", "title": "old", "abstract": "a", "citation_count": 1}));
        write(d.path(), "b.json", json!({"id": "x", "title": "new", "abstract": "a", "citation_count": 5}));
        let out = fetch_papers(&kw(&["a"]), &FixtureSource::new(d.path()), 10, 1).unwrap();
        assert_eq!(out.corpus.get("x").unwrap().title, "new");
    }

    #[test]
    fn lenient_decoding_of_camel_case_records() {
        let v = json!({"paperId": "s2:1", "title": "T", "abstract": "A", "year": 2020,
                       "citationCount": 7, "authors": [{"name": "Ada"}],
                       "references": [{"paperId": "s2:0"}, {"paperId": "s2:1"}]});
        let r = record_from_value(&v).unwrap();
        assert_eq!(r.id, "s2:1");
        assert_eq!(r.citation_count, 7);
        assert_eq!(r.authors, ["Ada"]);
        assert_eq!(r.cited_ids.iter().collect::<Vec<_>>(), ["s2:0"]);
        let no_id = record_from_value(&json!({"title": "T", "abstract": "A", "year": 2020})).unwrap();
        assert_eq!(no_id.id, derive_paper_id("T", Some(2020)));
    }

    #[test]
    fn zero_limit_is_rejected() {
        let d = fixture(1);
        assert!(fetch_papers(&kw(&["a"]), &FixtureSource::new(d.path()), 0, 1).is_err());
    }

    #[test]
    fn missing_fixture_dir_is_an_error() {
        let src = FixtureSource::new("/definitely/not/here");
        assert!(src.search("a", 1).is_err());
    }
}
