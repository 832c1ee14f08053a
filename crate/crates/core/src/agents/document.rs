use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::outline::{OutlineDraft, OutlineSection};
use super::section::SectionText;
use crate::corpus::Corpus;
use crate::error::{Error, Result};

fn cite_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\cite[a-zA-Z]*\*?(?:\[[^\]]*\])*\{([^}]*)\}").unwrap())
}

/// Keys of every `\cite{...}`-style command in order of appearance
/// (duplicates kept).
pub fn cite_keys(text: &str) -> Vec<String> {
    cite_re()
        .captures_iter(text)
        .flat_map(|c| {
            c[1].split(',')
                .map(|k| k.trim().to_string())
                .filter(|k| !k.is_empty())
                .collect::<Vec<_>>()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BibEntry {
    pub key: String,
    pub title: String,
    pub authors: Vec<String>,
    pub year: Option<i32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub root_seed: u64,
    pub llm_backend: String,
    pub encoder: String,
    pub config_hash: String,
}

/// The assembled survey.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyDocument {
    pub topic: String,
    pub outline: Vec<OutlineSection>,
    pub outline_revision: u32,
    pub sections: Vec<SectionText>,
    pub bibliography: Vec<BibEntry>,
    pub metadata: RunMetadata,
}

/// Orders `sections` by the outline and collects the bibliography of cited
/// papers.
pub fn assemble(
    topic: &str,
    outline: &OutlineDraft,
    sections: Vec<SectionText>,
    corpus: &Corpus,
    metadata: RunMetadata,
) -> Result<SurveyDocument> {
    let mut by_key: BTreeMap<String, SectionText> = BTreeMap::new();
    for s in sections {
        let key = s.key.clone();
        if by_key.insert(key.clone(), s).is_some() {
            return Err(Error::Validation(format!("duplicate text for subsection {key}")));
        }
    }
    let mut ordered = Vec::new();
    for (key, (_, sub)) in outline.keyed_subsections() {
        let s = by_key
            .remove(&key)
            .ok_or_else(|| Error::Validation(format!("missing text for subsection {key} `{}`", sub.title)))?;
        ordered.push(s);
    }
    if let Some(extra) = by_key.keys().next() {
        return Err(Error::Validation(format!("text for unknown subsection {extra}")));
    }
    let keys: BTreeSet<String> = ordered.iter().flat_map(|s| cite_keys(&s.body)).collect();
    let bibliography = keys
        .into_iter()
        .map(|k| {
            let p = corpus.get(&k).ok_or_else(|| Error::UnknownPaper(k.clone()))?;
            Ok(BibEntry {
                key: k,
                title: p.title.clone(),
                authors: p.authors.clone(),
                year: p.year,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SurveyDocument {
        topic: topic.to_string(),
        outline: outline.sections.clone(),
        outline_revision: outline.revision,
        sections: ordered,
        bibliography,
        metadata,
    })
}

fn latex_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str(r"\textbackslash{}"),
            '&' | '%' | '$' | '#' | '_' | '{' | '}' => {
                out.push('\\');
                out.push(c);
            }
            '~' => out.push_str(r"\textasciitilde{}"),
            '^' => out.push_str(r"\textasciicircum{}"),
            _ => out.push(c),
        }
    }
    out
}

impl SurveyDocument {
    pub fn outline_draft(&self) -> OutlineDraft {
        OutlineDraft {
            sections: self.outline.clone(),
            revision: self.outline_revision,
        }
    }

    /// Sections grouped under their top-level outline section.
    fn grouped(&self) -> Vec<(&OutlineSection, Vec<&SectionText>)> {
        self.outline
            .iter()
            .enumerate()
            .map(|(i, sec)| {
                let prefix = format!("{}.", i + 1);
                let texts = self.sections.iter().filter(|s| s.key.starts_with(&prefix)).collect();
                (sec, texts)
            })
            .collect()
    }

    pub fn to_latex(&self) -> String {
        let mut s = String::new();
        s.push_str("\\documentclass{article}\n\\usepackage[utf8]{inputenc}\n\\usepackage{cite}\n\n");
        let _ = writeln!(s, "\\title{{A Survey of {}}}", latex_escape(&self.topic));
        s.push_str("\\date{}\n\n\\begin{document}\n\\maketitle\n");
        for (sec, texts) in self.grouped() {
            let _ = writeln!(s, "\n\\section{{{}}}", latex_escape(&sec.title));
            for t in texts {
                let _ = writeln!(s, "\n\\subsection{{{}}}\n\n{}", latex_escape(&t.title), t.body.trim());
            }
        }
        s.push_str("\n\\bibliographystyle{plain}\n\\bibliography{references}\n\n\\end{document}\n");
        s
    }

    /// Markdown with citations rewritten as `[@key; @key]`.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("# A Survey of {}\n", self.topic);
        for (i, (sec, texts)) in self.grouped().into_iter().enumerate() {
            let _ = writeln!(s, "\n## {} {}", i + 1, sec.title);
            for t in texts {
                let body = cite_re().replace_all(t.body.trim(), |c: &regex::Captures<'_>| {
                    let keys: Vec<String> = c[1]
                        .split(',')
                        .map(str::trim)
                        .filter(|k| !k.is_empty())
                        .map(|k| format!("@{k}"))
                        .collect();
                    format!("[{}]", keys.join("; "))
                });
                let _ = writeln!(s, "\n### {} {}\n\n{body}", t.key, t.title);
            }
        }
        if !self.bibliography.is_empty() {
            s.push_str("\n## References\n\n");
            for b in &self.bibliography {
                let year = b.year.map_or_else(|| "n.d.".to_string(), |y| y.to_string());
                let authors = if b.authors.is_empty() {
                    String::new()
                } else {
                    format!("{}. ", b.authors.join(", "))
                };
                let _ = writeln!(s, "- [@{}] {authors}{} ({year})", b.key, b.title);
            }
        }
        s
    }

    pub fn to_bibtex(&self) -> String {
        let mut s = String::new();
        for b in &self.bibliography {
            let _ = writeln!(s, "@article{{{},", b.key);
            let _ = writeln!(s, "  title = {{{}}},", latex_escape(&b.title));
            if !b.authors.is_empty() {
                let _ = writeln!(s, "  author = {{{}}},", latex_escape(&b.authors.join(" and ")));
            }
            if let Some(y) = b.year {
                let _ = writeln!(s, "  year = {{{y}}},");
            }
            s.push_str("}\n\n");
        }
        s
    }
}
