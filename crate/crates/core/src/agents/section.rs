use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::document::cite_keys;
use super::outline::{OutlineDraft, OutlineSection, OutlineSubsection};
use super::{listing, AgentMemory, Feedback, GenerationOptions};
use crate::bindings;
use crate::corpus::{Corpus, PaperRecord};
use crate::encoder::{cosine, TextEncoder};
use crate::error::{Error, Result};
use crate::llm::{LlmClient, TemplateName};
use crate::traversal::ArtifactKind;

/// Ranks embedded papers by their best cosine against any query and returns
/// the `top_k` best ids (ties by id).
pub fn retrieve<S: AsRef<str>>(
    queries: &[S],
    corpus: &Corpus,
    encoder: &dyn TextEncoder,
    top_k: usize,
) -> Result<Vec<String>> {
    if top_k == 0 {
        return Err(Error::Precondition("top_k must be at least 1".into()));
    }
    let embedded: Vec<&PaperRecord> = corpus.papers().filter(|p| p.embedding.is_some()).collect();
    if embedded.is_empty() {
        return Err(Error::Precondition("no embedded papers to retrieve from".into()));
    }
    let qs = queries
        .iter()
        .map(|q| encoder.encode(q.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    if qs.is_empty() {
        return Ok(Vec::new());
    }
    let mut scored = embedded
        .into_iter()
        .map(|p| {
            let e = p.embedding.as_ref().expect("filtered");
            let best = qs
                .iter()
                .map(|q| cosine(q.as_slice(), e.as_slice()))
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            Ok((best, p.id.as_str()))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().take(top_k).map(|(_, id)| id.to_string()).collect())
}

/// Final text of one subsection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionText {
    /// `"<section>.<subsection>"`, 1-based.
    pub key: String,
    pub section_title: String,
    pub title: String,
    pub body: String,
    pub word_count: usize,
    pub revision: u32,
    pub retrieved_ids: Vec<String>,
    pub citation_keys: Vec<String>,
    pub ea_calls: u32,
    #[serde(default)]
    pub scores: Vec<u8>,
    /// Below the minimum word count after the final revision.
    #[serde(default)]
    pub short: bool,
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn paper_info(corpus: &Corpus, ids: &[String]) -> String {
    let mut papers: Vec<&PaperRecord> = ids.iter().filter_map(|id| corpus.get(id)).collect();
    papers.sort_by(|a, b| {
        a.year
            .unwrap_or(i32::MAX)
            .cmp(&b.year.unwrap_or(i32::MAX))
            .then_with(|| a.id.cmp(&b.id))
    });
    let mut out = String::new();
    for p in papers {
        let year = p.year.map_or_else(|| "n.d.".to_string(), |y| y.to_string());
        let about = p.summary.as_deref().filter(|s| !s.trim().is_empty()).unwrap_or(&p.abstract_text);
        let about: String = about.split_whitespace().take(80).collect::<Vec<_>>().join(" ");
        out.push_str(&format!("\nKey: {} | {} ({year})\n{about}", p.id, p.title));
    }
    if out.is_empty() {
        "(none)".to_string()
    } else {
        out
    }
}

struct Unit<'a> {
    key: String,
    section: &'a OutlineSection,
    sub: &'a OutlineSubsection,
}

struct Writer<'a> {
    outline_text: String,
    memory: &'a AgentMemory,
    corpus: &'a Corpus,
    encoder: &'a dyn TextEncoder,
    options: &'a GenerationOptions,
    client: &'a LlmClient,
}

impl Writer<'_> {
    fn draft(&self, unit: &Unit<'_>, context: &[String], previous: &str, feedback: &str) -> Result<String> {
        let proof = |kind| {
            listing(
                unit.sub
                    .proof_ids
                    .iter()
                    .filter_map(|id| self.memory.get(id))
                    .filter(|a| a.kind == kind),
            )
        };
        let info = paper_info(self.corpus, context);
        let attempt = |extra: &str| -> Result<(String, Vec<String>)> {
            let fb = [feedback, extra]
                .iter()
                .filter(|s| !s.is_empty())
                .copied()
                .collect::<Vec<_>>()
                .join("\n");
            let reply = self.client.complete(
                TemplateName::SubsectionWrite,
                &bindings! {
                    "SUBSECTION_TITLE" => unit.sub.title,
                    "SUBSECTION_FOCUS" => unit.sub.focus,
                    "COMMUNITY_SUMMARY" => proof(ArtifactKind::Horizontal),
                    "DEVELOPMENT_DIRECTION" => proof(ArtifactKind::Vertical),
                    "PAPER_INFO" => info,
                    "previous_draft" => previous,
                    "feedback" => fb,
                },
            )?;
            let unknown: Vec<String> = cite_keys(&reply.text)
                .into_iter()
                .filter(|k| !self.corpus.contains(k))
                .collect();
            Ok((reply.text.trim().to_string(), unknown))
        };
        let (text, unknown) = attempt("")?;
        if unknown.is_empty() {
            return Ok(text);
        }
        log::warn!("subsection {} cites unknown keys {unknown:?}; reprompting once", unit.key);
        let (text, unknown) = attempt(&format!(
            "Your previous draft cited keys that do not exist: {}. Cite only keys listed under Papers.",
            unknown.join(", ")
        ))?;
        if unknown.is_empty() {
            Ok(text)
        } else {
            Err(Error::Validation(format!(
                "subsection {} cites unknown keys: {}",
                unit.key,
                unknown.join(", ")
            )))
        }
    }

    fn evaluate(&self, unit: &Unit<'_>, body: &str) -> Result<Feedback> {
        let reply = self.client.complete(
            TemplateName::SectionEvaluate,
            &bindings! {
                "outline_text" => self.outline_text,
                "section_title" => unit.sub.title,
                "section_text" => body,
            },
        )?;
        Feedback::parse_section(&reply.text)
    }

    fn run(&self, unit: &Unit<'_>) -> Result<SectionText> {
        let opts = self.options;
        let mut context = retrieve(&[&unit.sub.title, &unit.sub.focus], self.corpus, self.encoder, opts.section_top_k)?;
        let mut body = self.draft(unit, &context, "", "")?;
        let mut revision = 0;
        let mut ea_calls = 0;
        let mut scores = Vec::new();
        if opts.multiagent {
            for t in 1..=opts.t_max {
                let fb = self.evaluate(unit, &body)?;
                ea_calls += 1;
                scores.push(fb.score);
                if fb.score >= opts.section_threshold {
                    break;
                }
                if !fb.queries.is_empty() {
                    context = retrieve(&fb.queries, self.corpus, self.encoder, opts.section_top_k)?;
                }
                body = self.draft(unit, &context, &body, &fb.to_prompt())?;
                revision = t;
            }
        }
        let words = word_count(&body);
        let short = words < opts.min_words;
        if short {
            log::warn!("subsection {} has {words} words (< {})", unit.key, opts.min_words);
        }
        let mut seen = BTreeSet::new();
        let citation_keys = cite_keys(&body).into_iter().filter(|k| seen.insert(k.clone())).collect();
        Ok(SectionText {
            key: unit.key.clone(),
            section_title: unit.section.title.clone(),
            title: unit.sub.title.clone(),
            body,
            word_count: words,
            revision,
            retrieved_ids: context,
            citation_keys,
            ea_calls,
            scores,
            short,
        })
    }
}

/// Writes every subsection of `outline`, in outline order.
pub fn subsection_phase(
    outline: &OutlineDraft,
    memory: &AgentMemory,
    corpus: &Corpus,
    encoder: &dyn TextEncoder,
    options: &GenerationOptions,
    client: &LlmClient,
) -> Result<Vec<SectionText>> {
    options.check()?;
    outline.validate(memory)?;
    let writer = Writer {
        outline_text: outline.to_text(),
        memory,
        corpus,
        encoder,
        options,
        client,
    };
    let units: Vec<Unit<'_>> = outline
        .keyed_subsections()
        .into_iter()
        .map(|(key, (section, sub))| Unit { key, section, sub })
        .collect();
    if options.parallel_sections {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.concurrency.max(1))
            .build()
            .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?;
        pool.install(|| units.par_iter().map(|u| writer.run(u)).collect())
    } else {
        units.iter().map(|u| writer.run(u)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::MockEncoder;
    use crate::llm::{MockLlm, MockScript, RetryPolicy};
    use crate::traversal::SummaryArtifact;
    use std::sync::Arc;

    fn corpus(enc: &MockEncoder) -> Corpus {
        let abstracts = [
            ("a", 2018, "dense retrieval with dual encoders for open domain question answering"),
            ("b", 2019, "sparse lexical retrieval with inverted indexes and bm25 weighting"),
            ("c", 2021, "retrieval augmented generation conditions a language model on passages"),
            ("d", 2022, "graph neural networks for molecule property prediction"),
            ("e", 2023, "evaluation of hallucination in retrieval augmented language models"),
        ];
        Corpus::from_records(abstracts.iter().map(|(id, y, abs)| {
            let mut p = PaperRecord::new(*id, format!("Title {id}"), Some(*y), *abs);
            p.embedding = Some(enc.encode(abs).unwrap());
            p
        }))
        .unwrap()
    }

    #[test]
    fn exact_abstract_query_ranks_its_paper_first() {
        let enc = MockEncoder::new(64, 2);
        let c = corpus(&enc);
        let q = ["graph neural networks for molecule property prediction"];
        assert_eq!(retrieve(&q, &c, &enc, 1).unwrap(), ["d"]);
        assert_eq!(retrieve(&q, &c, &enc, 99).unwrap().len(), 5);
        assert!(retrieve(&q, &c, &enc, 0).is_err());
        assert!(retrieve(&q, &Corpus::new(), &enc, 3).is_err());
    }

    #[test]
    fn multi_query_ranking_matches_exhaustive_max() {
        let enc = MockEncoder::new(64, 2);
        let c = corpus(&enc);
        let qs = ["retrieval augmented generation", "lexical bm25 search"];
        let q_emb: Vec<_> = qs.iter().map(|q| enc.encode(q).unwrap()).collect();
        let mut expect: Vec<(f64, String)> = c
            .papers()
            .map(|p| {
                let e = p.embedding.as_ref().unwrap().as_slice();
                let best = q_emb
                    .iter()
                    .map(|q| q.as_slice().iter().zip(e).map(|(x, y)| x * y).sum::<f64>())
                    .fold(f64::MIN, f64::max);
                (best, p.id.clone())
            })
            .collect();
        expect.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<String> = expect.into_iter().take(3).map(|x| x.1).collect();
        assert_eq!(retrieve(&qs, &c, &enc, 3).unwrap(), want);
    }

    fn setup(script: MockScript) -> (AgentMemory, OutlineDraft, LlmClient, Arc<MockLlm>) {
        let memory = AgentMemory::new(vec![SummaryArtifact {
            artifact_id: "seed_a".into(),
            kind: ArtifactKind::Vertical,
            source_ids: vec!["a".into()],
            text: "line of work".into(),
            layer_or_seed: "a".into(),
            degraded: false,
            intermediate: None,
        }])
        .unwrap();
        let sub = |t: &str| OutlineSubsection {
            title: t.into(),
            focus: format!("{t} focus"),
            proof_ids: vec!["seed_a".into()],
        };
        let outline = OutlineDraft {
            sections: ["Introduction", "Foundational Concepts", "Conclusion"]
                .iter()
                .enumerate()
                .map(|(i, s)| OutlineSection {
                    title: s.to_string(),
                    focus: String::new(),
                    subsections: (0..=i).map(|j| sub(&format!("{s} part {j}"))).collect(),
                })
                .collect(),
            revision: 0,
        };
        let mock = Arc::new(MockLlm::new(5).with_script(script));
        let client = LlmClient::new(mock.clone()).with_retry(RetryPolicy::immediate(0));
        (memory, outline, client, mock)
    }

    #[test]
    fn one_text_per_subsection_in_order() {
        let enc = MockEncoder::new(64, 2);
        let c = corpus(&enc);
        let (m, o, client, _) = setup(MockScript::default());
        let opts = GenerationOptions {
            section_top_k: 3,
            ..Default::default()
        };
        let texts = subsection_phase(&o, &m, &c, &enc, &opts, &client).unwrap();
        let keys: Vec<&str> = texts.iter().map(|t| t.key.as_str()).collect();
        assert_eq!(keys, ["1.1", "2.1", "2.2", "3.1", "3.2", "3.3"]);
        for t in &texts {
            assert!(t.ea_calls <= 2);
            assert!(t.word_count >= 400 && !t.short);
            assert!(t.citation_keys.iter().all(|k| c.contains(k)));
        }
    }

    #[test]
    fn immediate_acceptance_means_one_draft() {
        let enc = MockEncoder::new(64, 2);
        let c = corpus(&enc);
        let (m, o, client, mock) = setup(MockScript {
            section_scores: vec![5],
            ..Default::default()
        });
        let texts = subsection_phase(&o, &m, &c, &enc, &GenerationOptions::default(), &client).unwrap();
        assert!(texts.iter().all(|t| t.revision == 0 && t.ea_calls == 1));
        assert_eq!(mock.requests_for(TemplateName::SubsectionWrite).len(), 6);
    }

    #[test]
    fn evaluator_queries_drive_the_revision_context() {
        let enc = MockEncoder::new(64, 2);
        let c = corpus(&enc);
        let q = "graph neural networks for molecule property prediction";
        let (m, o, client, mock) = setup(MockScript {
            section_scores: vec![2, 5],
            section_queries: Some(vec![q.into()]),
            ..Default::default()
        });
        let opts = GenerationOptions {
            section_top_k: 1,
            ..Default::default()
        };
        let texts = subsection_phase(&o, &m, &c, &enc, &opts, &client).unwrap();
        assert_eq!(texts[0].revision, 1);
        assert_eq!(texts[0].retrieved_ids, retrieve(&[q], &c, &enc, 1).unwrap());
        let writes = mock.requests_for(TemplateName::SubsectionWrite);
        assert!(writes[1].text.contains("Key: d | Title d (2022)"));
        assert!(writes[1].text.contains("Score: 2/5"));
    }

    #[test]
    fn unknown_citations_fail_after_one_reprompt() {
        let enc = MockEncoder::new(64, 2);
        let c = corpus(&enc);
        let (m, o, client, mock) = setup(MockScript {
            replies: [(TemplateName::SubsectionWrite, vec!["As shown by \\cite{ghost}.".to_string()])].into(),
            ..Default::default()
        });
        let err = subsection_phase(&o, &m, &c, &enc, &GenerationOptions::default(), &client).unwrap_err();
        assert!(err.to_string().contains("ghost"));
        assert_eq!(mock.requests_for(TemplateName::SubsectionWrite).len(), 2);
    }

    #[test]
    fn short_text_is_flagged_not_fatal() {
        let enc = MockEncoder::new(64, 2);
        let c = corpus(&enc);
        let (m, o, client, _) = setup(MockScript {
            replies: [(TemplateName::SubsectionWrite, vec!["Brief \\cite{a}.".to_string()])].into(),
            section_scores: vec![5],
            ..Default::default()
        });
        let texts = subsection_phase(&o, &m, &c, &enc, &GenerationOptions::default(), &client).unwrap();
        assert!(texts.iter().all(|t| t.short && t.citation_keys == ["a"]));
    }

    #[test]
    fn parallel_mode_matches_sequential() {
        let enc = MockEncoder::new(64, 2);
        let c = corpus(&enc);
        let (m, o, client, _) = setup(MockScript::default());
        let seq = subsection_phase(&o, &m, &c, &enc, &GenerationOptions::default(), &client).unwrap();
        let (_, _, client2, _) = setup(MockScript::default());
        let par_opts = GenerationOptions {
            parallel_sections: true,
            ..Default::default()
        };
        let par = subsection_phase(&o, &m, &c, &enc, &par_opts, &client2).unwrap();
        assert_eq!(seq, par);
    }
}
