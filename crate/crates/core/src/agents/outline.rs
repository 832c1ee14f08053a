use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AgentMemory, Feedback, GenerationOptions};
use crate::bindings;
use crate::error::{Error, Result};
use crate::llm::{LlmClient, TemplateName};
use crate::traversal::ArtifactKind;

pub const MANDATORY_SECTIONS: [&str; 3] = ["Introduction", "Foundational Concepts", "Conclusion"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlineSubsection {
    #[serde(rename = "section_outline")]
    pub title: String,
    #[serde(rename = "subsection_focus", default)]
    pub focus: String,
    pub proof_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlineSection {
    #[serde(rename = "section_outline")]
    pub title: String,
    #[serde(rename = "section_focus", default)]
    pub focus: String,
    pub subsections: Vec<OutlineSubsection>,
}

/// A two-level outline. Serializes as the bare JSON array of sections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutlineDraft {
    pub sections: Vec<OutlineSection>,
    pub revision: u32,
}

fn str_field<'a>(obj: &'a serde_json::Map<String, Value>, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| obj.get(*k)?.as_str()).map(str::trim)
}

impl OutlineDraft {
    /// Parses a model reply: the outermost JSON array in `text`, possibly
    /// inside a code fence.
    pub fn parse(text: &str, revision: u32) -> Result<Self> {
        let (start, end) = (text.find('['), text.rfind(']'));
        let body = match (start, end) {
            (Some(s), Some(e)) if s < e => &text[s..=e],
            _ => return Err(Error::Validation("outline reply holds no JSON array".into())),
        };
        let root: Value =
            serde_json::from_str(body).map_err(|e| Error::Validation(format!("outline JSON: {e}")))?;
        let sections = root
            .as_array()
            .ok_or_else(|| Error::Validation("outline root is not an array".into()))?;
        let mut out = Vec::new();
        for (i, s) in sections.iter().enumerate() {
            let obj = s
                .as_object()
                .ok_or_else(|| Error::Validation(format!("section {} is not an object", i + 1)))?;
            let title = str_field(obj, &["section_outline", "title"])
                .filter(|t| !t.is_empty())
                .ok_or_else(|| Error::Validation(format!("section {} has no title", i + 1)))?;
            let subs = obj
                .get("subsections")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Validation(format!("section `{title}` has no subsections")))?;
            let mut subsections = Vec::new();
            for (j, sub) in subs.iter().enumerate() {
                let so = sub.as_object().ok_or_else(|| {
                    Error::Validation(format!("subsection {}.{} is not an object", i + 1, j + 1))
                })?;
                if so.contains_key("subsections") {
                    return Err(Error::Validation(format!(
                        "subsection {}.{} nests a third level",
                        i + 1,
                        j + 1
                    )));
                }
                let sub_title = str_field(so, &["section_outline", "subsection_outline", "title"])
                    .filter(|t| !t.is_empty())
                    .ok_or_else(|| Error::Validation(format!("subsection {}.{} has no title", i + 1, j + 1)))?;
                let proof_ids = so
                    .get("proof_ids")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_str).map(|p| p.trim().to_string()).collect())
                    .unwrap_or_default();
                subsections.push(OutlineSubsection {
                    title: sub_title.to_string(),
                    focus: str_field(so, &["subsection_focus", "focus"]).unwrap_or_default().to_string(),
                    proof_ids,
                });
            }
            out.push(OutlineSection {
                title: title.to_string(),
                focus: str_field(obj, &["section_focus", "focus"]).unwrap_or_default().to_string(),
                subsections,
            });
        }
        Ok(Self {
            sections: out,
            revision,
        })
    }

    /// Every violated invariant, empty when the draft is valid.
    pub fn problems(&self, memory: &AgentMemory) -> Vec<String> {
        let mut problems = Vec::new();
        if self.sections.is_empty() {
            problems.push("outline has no sections".to_string());
        }
        let titles: Vec<String> = self.sections.iter().map(|s| normalize_title(&s.title)).collect();
        for m in MANDATORY_SECTIONS {
            let want = m.to_lowercase();
            if !titles.iter().any(|t| t.contains(&want)) {
                problems.push(format!("mandatory section `{m}` missing"));
            }
        }
        let mut dangling = BTreeSet::new();
        for (key, sub) in self.keyed_subsections() {
            if sub.1.proof_ids.is_empty() || sub.1.proof_ids.len() > 3 {
                problems.push(format!("subsection {key} has {} proof_ids (need 1-3)", sub.1.proof_ids.len()));
            }
            for p in &sub.1.proof_ids {
                if !memory.contains(p) {
                    dangling.insert(p.clone());
                }
            }
        }
        for s in &self.sections {
            if s.subsections.is_empty() {
                problems.push(format!("section `{}` has no subsections", s.title));
            }
        }
        if !dangling.is_empty() {
            problems.push(format!(
                "unresolvable proof_ids: {}",
                dangling.into_iter().collect::<Vec<_>>().join(", ")
            ));
        }
        problems
    }

    pub fn validate(&self, memory: &AgentMemory) -> Result<()> {
        let problems = self.problems(memory);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!("outline invalid: {}", problems.join("; "))))
        }
    }

    /// Subsections with their `"<section>.<subsection>"` keys (1-based).
    pub fn keyed_subsections(&self) -> Vec<(String, (&OutlineSection, &OutlineSubsection))> {
        self.sections
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                s.subsections
                    .iter()
                    .enumerate()
                    .map(move |(j, sub)| (format!("{}.{}", i + 1, j + 1), (s, sub)))
            })
            .collect()
    }

    pub fn subsection_count(&self) -> usize {
        self.sections.iter().map(|s| s.subsections.len()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.sections).expect("outline serializes")
    }

    /// Numbered plain-text rendering given to the evaluator.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, sec) in self.sections.iter().enumerate() {
            let _ = writeln!(s, "{} {}: {}", i + 1, sec.title, sec.focus);
            for (j, sub) in sec.subsections.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "  {}.{} {}: {} [{}]",
                    i + 1,
                    j + 1,
                    sub.title,
                    sub.focus,
                    sub.proof_ids.join(", ")
                );
            }
        }
        s
    }
}

fn normalize_title(t: &str) -> String {
    t.trim_start_matches(|c: char| c.is_ascii_digit() || c == '.' || c.is_whitespace())
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutlineOutcome {
    pub draft: OutlineDraft,
    pub feedback: Vec<Feedback>,
    pub ea_calls: u32,
}

fn write_outline(
    client: &LlmClient,
    memory: &AgentMemory,
    topic: &str,
    previous: Option<&OutlineDraft>,
    feedback: &str,
    revision: u32,
) -> Result<OutlineDraft> {
    let attempt = |extra: &str| -> Result<OutlineDraft> {
        let fb = if extra.is_empty() {
            feedback.to_string()
        } else if feedback.is_empty() {
            extra.to_string()
        } else {
            format!("{feedback}\n{extra}")
        };
        let reply = client.complete(
            TemplateName::OutlineGenerate,
            &bindings! {
                "QUERY" => topic,
                "summary_layer" => memory.listing(ArtifactKind::Horizontal),
                "summary_path" => memory.listing(ArtifactKind::Vertical),
                "previous_outline" => previous.map(OutlineDraft::to_json).unwrap_or_default(),
                "feedback" => fb,
            },
        )?;
        let draft = OutlineDraft::parse(&reply.text, revision)?;
        draft.validate(memory)?;
        Ok(draft)
    };
    match attempt("") {
        Ok(d) => Ok(d),
        Err(Error::Validation(why)) => {
            log::warn!("outline revision {revision} rejected ({why}); reprompting once");
            attempt(&format!(
                "Your previous reply was rejected: {why}. Return only a valid JSON array that satisfies every requirement."
            ))
        }
        Err(e) => Err(e),
    }
}

fn evaluate_outline(client: &LlmClient, draft: &OutlineDraft) -> Result<Feedback> {
    let reply = client.complete(
        TemplateName::OutlineEvaluate,
        &bindings! {"outline_text" => draft.to_text()},
    )?;
    Feedback::parse_outline(&reply.text)
}

/// Drafts an outline from the memory, then lets the evaluator critique it up
/// to `t_max` times, revising after every critique below the threshold.
pub fn outline_phase(
    memory: &AgentMemory,
    topic: &str,
    options: &GenerationOptions,
    client: &LlmClient,
) -> Result<OutlineOutcome> {
    options.check()?;
    if memory.is_empty() {
        return Err(Error::Precondition("agent memory is empty".into()));
    }
    let mut draft = write_outline(client, memory, topic, None, "", 0)?;
    let mut history = Vec::new();
    let mut ea_calls = 0;
    if options.multiagent {
        for t in 1..=options.t_max {
            let fb = evaluate_outline(client, &draft)?;
            ea_calls += 1;
            let done = fb.score >= options.outline_threshold;
            history.push(fb);
            if done {
                break;
            }
            let last = history.last().map(Feedback::to_prompt).unwrap_or_default();
            draft = write_outline(client, memory, topic, Some(&draft), &last, t)?;
        }
    }
    Ok(OutlineOutcome {
        draft,
        feedback: history,
        ea_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{MockLlm, MockScript, RetryPolicy};
    use crate::traversal::SummaryArtifact;
    use std::sync::Arc;

    fn memory() -> AgentMemory {
        let mk = |id: &str, kind| SummaryArtifact {
            artifact_id: id.into(),
            kind,
            source_ids: vec!["p1".into()],
            text: format!("summary {id}"),
            layer_or_seed: "x".into(),
            degraded: false,
            intermediate: None,
        };
        AgentMemory::new(vec![
            mk("seed_p1", ArtifactKind::Vertical),
            mk("seed_p2", ArtifactKind::Vertical),
            mk("community_foundation_0", ArtifactKind::Horizontal),
            mk("community_development_0", ArtifactKind::Horizontal),
            mk("community_frontier_0", ArtifactKind::Horizontal),
        ])
        .unwrap()
    }

    fn client(script: MockScript) -> (LlmClient, Arc<MockLlm>) {
        let mock = Arc::new(MockLlm::new(11).with_script(script));
        (LlmClient::new(mock.clone()).with_retry(RetryPolicy::immediate(0)), mock)
    }

    const VALID: &str = r#"[
      {"section_outline": "Introduction", "section_focus": "f", "subsections": [
        {"section_outline": "Scope", "subsection_focus": "s", "proof_ids": ["seed_p1"]}]},
      {"section_outline": "2 Foundational Concepts", "section_focus": "f", "subsections": [
        {"section_outline": "Basics", "subsection_focus": "s", "proof_ids": ["seed_p1", "community_foundation_0"]}]},
      {"section_outline": "Conclusion", "section_focus": "f", "subsections": [
        {"section_outline": "Outlook", "subsection_focus": "s", "proof_ids": ["community_frontier_0"]}]}
    ]"#;

    #[test]
    fn parses_and_validates_a_fenced_outline() {
        let d = OutlineDraft::parse(&format!("```json\n{VALID}\n```"), 0).unwrap();
        assert_eq!(d.subsection_count(), 3);
        d.validate(&memory()).unwrap();
        assert_eq!(d.keyed_subsections()[1].0, "2.1");
        let back = OutlineDraft::parse(&d.to_json(), 0).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn invariant_violations_are_reported() {
        let mut d = OutlineDraft::parse(VALID, 0).unwrap();
        d.sections[0].subsections[0].proof_ids = vec!["seed_zz".into(), "community_x".into()];
        d.sections[1].subsections[0].proof_ids = vec!["seed_p1".into(); 4];
        d.sections.pop();
        let p = d.problems(&memory()).join("\n");
        assert!(p.contains("unresolvable proof_ids: community_x, seed_zz"), "{p}");
        assert!(p.contains("1-3"));
        assert!(p.contains("`Conclusion` missing"));
        let nested = r#"[{"section_outline": "A", "subsections": [{"section_outline": "B", "proof_ids": [], "subsections": []}]}]"#;
        assert!(OutlineDraft::parse(nested, 0).unwrap_err().to_string().contains("third level"));
        assert!(OutlineDraft::parse("no json", 0).is_err());
    }

    #[test]
    fn early_stop_returns_first_draft() {
        let (c, mock) = client(MockScript {
            outline_scores: vec![5],
            ..Default::default()
        });
        let out = outline_phase(&memory(), "rag", &GenerationOptions::default(), &c).unwrap();
        assert_eq!(out.draft.revision, 0);
        assert_eq!(out.ea_calls, 1);
        assert_eq!(mock.requests_for(TemplateName::OutlineGenerate).len(), 1);
    }

    #[test]
    fn low_scores_run_to_the_iteration_bound() {
        let (c, mock) = client(MockScript {
            outline_scores: vec![3, 3],
            ..Default::default()
        });
        let out = outline_phase(&memory(), "rag", &GenerationOptions::default(), &c).unwrap();
        assert_eq!(out.draft.revision, 2);
        assert_eq!(out.ea_calls, 2);
        assert_eq!(mock.requests_for(TemplateName::OutlineEvaluate).len(), 2);
        let gens = mock.requests_for(TemplateName::OutlineGenerate);
        assert_eq!(gens.len(), 3);
        assert!(gens[2].text.contains("Score: 3/5"));
        for (_, (_, sub)) in out.draft.keyed_subsections() {
            assert!(sub.proof_ids.iter().all(|p| memory().contains(p)));
        }
    }

    #[test]
    fn single_agent_mode_skips_evaluation() {
        let (c, mock) = client(MockScript::default());
        let opts = GenerationOptions {
            multiagent: false,
            ..Default::default()
        };
        let out = outline_phase(&memory(), "rag", &opts, &c).unwrap();
        assert_eq!(out.ea_calls, 0);
        assert!(mock.requests_for(TemplateName::OutlineEvaluate).is_empty());
    }

    #[test]
    fn bad_outline_is_reprompted_once_then_fails() {
        let (c, mock) = client(MockScript {
            replies: [(TemplateName::OutlineGenerate, vec!["not json".to_string(), VALID.to_string()])].into(),
            outline_scores: vec![5],
            ..Default::default()
        });
        assert!(outline_phase(&memory(), "rag", &GenerationOptions::default(), &c).is_ok());
        assert!(mock.requests_for(TemplateName::OutlineGenerate)[1].text.contains("rejected"));

        let (c, _) = client(MockScript {
            replies: [(TemplateName::OutlineGenerate, vec!["[]".to_string()])].into(),
            ..Default::default()
        });
        let err = outline_phase(&memory(), "rag", &GenerationOptions::default(), &c).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn zero_iterations_is_a_config_error() {
        let (c, _) = client(MockScript::default());
        let opts = GenerationOptions {
            t_max: 0,
            ..Default::default()
        };
        let err = outline_phase(&memory(), "rag", &opts, &c).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "t_max"));
    }
}
