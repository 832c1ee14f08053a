mod support;

use std::collections::BTreeSet;
use std::sync::Arc;

use support::*;
use surveyg::agents::{AgentMemory, OutlineDraft};
use surveyg::config::RunConfig;
use surveyg::corpus::{fetch_papers, Corpus, FixtureSource, KeywordSet};
use surveyg::graph::{build_graph, EdgeKind, GraphConfig, GraphExport, Layer};
use surveyg::llm::{LlmClient, MockLlm, MockScript, RetryPolicy, TemplateName};
use surveyg::pipeline::{self, run_stage, run_stage_with, Backends, RunManifest, Stage};
use surveyg::traversal::{wbfs, ArtifactKind};
use surveyg::Error;

fn fixture_graph() -> surveyg::graph::HierarchicalGraph {
    build_graph(
        &fixture_corpus(),
        &GraphConfig {
            k_foundation: 3,
            landmark_year: 2021,
            now_year: 2025,
            tau_semantic: 0.75,
        },
    )
    .unwrap()
}

#[test]
fn fixture_graph_matches_hand_count() {
    let g = fixture_graph();
    let mut citations: Vec<(&str, &str)> = g
        .edges()
        .iter()
        .filter(|e| e.kind == EdgeKind::Citation)
        .map(|e| (e.src.as_str(), e.dst.as_str()))
        .collect();
    citations.sort();
    // one per resolvable cited id in the fixture files
    assert_eq!(
        citations,
        [
            ("D1", "F1"),
            ("D2", "D1"),
            ("D3", "F2"),
            ("D4", "D3"),
            ("D5", "F3"),
            ("F2", "F1"),
            ("R1", "D1"),
            ("R2", "R1"),
            ("R3", "D3"),
        ]
    );
    let semantic: Vec<(&str, &str)> = g
        .edges()
        .iter()
        .filter(|e| e.kind == EdgeKind::Semantic)
        .map(|e| (e.src.as_str(), e.dst.as_str()))
        .collect();
    // R3 and R4 share an abstract up to one word
    assert_eq!(semantic, [("R3", "R4")]);
    assert_eq!(g.layer_nodes(Layer::Foundation), ["F1", "F2", "F3"]);
    assert_eq!(g.layer_nodes(Layer::Development), ["D1", "D2", "D3", "D4", "D5"]);
    assert_eq!(g.layer_nodes(Layer::Frontier), ["R1", "R2", "R3", "R4"]);
}

#[test]
fn fixture_wbfs_hand_traces() {
    let g = fixture_graph();
    // F1 -> D1 (collected), F2 (queued) -> D3 (collected)
    assert_eq!(wbfs(&g, ["F1"], Layer::Development).unwrap(), ["D1", "D3"]);
    assert_eq!(wbfs(&g, ["F2"], Layer::Development).unwrap(), ["D3"]);
    assert_eq!(wbfs(&g, ["F3"], Layer::Development).unwrap(), ["D5"]);
    // R4 hangs off R3 by a semantic edge, but R3 is collected and so never
    // expanded
    assert_eq!(wbfs(&g, ["D1", "D3"], Layer::Frontier).unwrap(), ["R1", "R3"]);
    assert!(wbfs(&g, ["D5"], Layer::Frontier).unwrap().is_empty());
    // D2 is reachable only through D1, which is collected first
    let dev = wbfs(&g, ["F1"], Layer::Development).unwrap();
    assert!(!dev.contains(&"D2".to_string()));
}

#[test]
fn fetch_respects_limit_and_merges_idempotently() {
    let keywords = KeywordSet::new("rag", ["retrieval".to_string()], 5).unwrap();
    let source = FixtureSource::new(fixture_dir());
    let all = fetch_papers(&keywords, &source, 1500, 4).unwrap();
    assert_eq!(all.corpus.len(), 12);
    assert_eq!(all.skipped, 0);
    let three = fetch_papers(&keywords, &source, 3, 4).unwrap();
    assert_eq!(three.corpus.ids().collect::<Vec<_>>(), ["F1", "F2", "F3"]);
    let again = fetch_papers(&keywords, &source, 1500, 1).unwrap();
    assert_eq!(all, again);
}

#[test]
fn full_run_writes_every_documented_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(dir.path());
    let manifest = run_stage(Stage::All, &config).unwrap();
    for f in [
        pipeline::KEYWORDS_FILE,
        "corpus/manifest.json",
        pipeline::GRAPH_FILE,
        pipeline::GRAPH_DOT_FILE,
        pipeline::MEMORY_FILE,
        pipeline::OUTLINE_FILE,
        pipeline::SURVEY_FILE,
        pipeline::SURVEY_TEX_FILE,
        pipeline::SURVEY_MD_FILE,
        pipeline::BIB_FILE,
        pipeline::GENERATION_FILE,
        pipeline::REPORT_FILE,
        pipeline::REPORT_TXT_FILE,
    ] {
        assert!(manifest.files.contains_key(f), "{f} missing from manifest");
    }
    // every file on disk is listed with its hash
    let on_disk = pipeline::hash_files(dir.path()).unwrap();
    assert_eq!(on_disk, manifest.files);
    assert_eq!(manifest.files.len(), 13 + 12);
    assert_eq!(RunManifest::load(&dir.path().join(pipeline::MANIFEST_FILE)).unwrap(), manifest);
    assert_eq!(manifest.config_hash, config.hash());
    assert_eq!(manifest.stages.len(), 5);

    // graph.json carries the communities
    let export: GraphExport = serde_json::from_str(&read(&dir.path().join(pipeline::GRAPH_FILE))).unwrap();
    let ids: Vec<&str> = export.communities.iter().map(|c| c.community_id.as_str()).collect();
    assert_eq!(
        ids,
        [
            "community_foundation_0",
            "community_foundation_1",
            "community_development_0",
            "community_development_1",
            "community_development_2",
            "community_frontier_0",
            "community_frontier_1",
        ]
    );
    assert!(read(&dir.path().join(pipeline::GRAPH_DOT_FILE)).starts_with("digraph"));

    // usage accounting: the run total is the sum over stages
    let total: u64 = manifest.stages.values().map(|s| s.usage.input_tokens).sum();
    assert_eq!(manifest.total_usage.input_tokens, total);
    assert!(total > 0);

    let tex = read(&dir.path().join(pipeline::SURVEY_TEX_FILE));
    assert!(tex.contains("\\cite{") && tex.contains("\\bibliography{references}"));
    let report: serde_json::Value = serde_json::from_str(&read(&dir.path().join(pipeline::REPORT_FILE))).unwrap();
    let (r, p, f1) = (report["recall"].as_f64().unwrap(), report["precision"].as_f64().unwrap(), report["f1"].as_f64().unwrap());
    if r + p > 0.0 {
        assert!((f1 - 2.0 * r * p / (r + p)).abs() < 1e-9);
    }
}

#[test]
fn vertical_summary_skips_second_stage_without_frontier() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(dir.path());
    for s in [Stage::Ingest, Stage::Graph, Stage::Summarize] {
        run_stage(s, &config).unwrap();
    }
    let memory = AgentMemory::load(&dir.path().join(pipeline::MEMORY_FILE)).unwrap();
    let f3 = memory
        .of_kind(ArtifactKind::Vertical)
        .find(|a| a.source_ids[0] == "F3")
        .unwrap();
    assert_eq!(f3.source_ids, ["F3", "D5"]);
    // stage one is the whole summary
    assert_eq!(f3.intermediate.as_deref(), Some(f3.text.as_str()));
    let f1 = memory
        .of_kind(ArtifactKind::Vertical)
        .find(|a| a.source_ids[0] == "F1")
        .unwrap();
    assert_eq!(f1.source_ids, ["F1", "D1", "D3", "R1", "R3"]);
    assert!(f1.intermediate.as_deref().is_some_and(|i| i != f1.text));
}

#[test]
fn stages_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(dir.path());
    let first = run_stage(Stage::All, &config).unwrap();
    for s in Stage::STEPS {
        let again = run_stage(s, &config).unwrap();
        assert_eq!(again.files, first.files, "stage {s} changed its outputs");
    }
}

#[test]
fn missing_prerequisites_and_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(dir.path());
    match run_stage(Stage::Generate, &config) {
        Err(Error::MissingInput(p)) => assert!(p.ends_with("memory.json")),
        other => panic!("{other:?}"),
    }
    match run_stage(Stage::Eval, &config) {
        Err(Error::MissingInput(p)) => assert!(p.ends_with("survey.json")),
        other => panic!("{other:?}"),
    }
    let mut bad = config.clone();
    bad.generation.t_max = 0;
    match run_stage(Stage::All, &bad) {
        Err(Error::Config { field, .. }) => assert!(field.contains("t_max")),
        other => panic!("{other:?}"),
    }
    let mut no_query = config;
    no_query.query.clear();
    match run_stage(Stage::Ingest, &no_query) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "query"),
        other => panic!("{other:?}"),
    }
}

fn scripted(config: &RunConfig, script: MockScript) -> (Backends, Arc<MockLlm>) {
    let mut b = Backends::from_config(&config.clone().resolved()).unwrap();
    let mock = Arc::new(MockLlm::new(config.seed).with_script(script));
    b.llm = LlmClient::new(mock.clone()).with_retry(RetryPolicy::immediate(0)).with_seed(config.seed);
    (b, mock)
}

#[test]
fn scripted_scores_drive_the_loops() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(dir.path());
    let (b, mock) = scripted(
        &config,
        MockScript {
            outline_scores: vec![5],
            section_scores: vec![5],
            ..MockScript::default()
        },
    );
    run_stage_with(Stage::All, &config, &b).unwrap();
    // immediate acceptance: one EA call for the outline and one per section
    let outline_ea = mock.requests_for(TemplateName::OutlineEvaluate).len();
    assert_eq!(outline_ea, 1);
    assert_eq!(mock.requests_for(TemplateName::OutlineGenerate).len(), 1);
    let outline = OutlineDraft::parse(&read(&dir.path().join(pipeline::OUTLINE_FILE)), 0).unwrap();
    assert_eq!(outline.revision, 0);
    let subs = outline.subsection_count();
    assert_eq!(mock.requests_for(TemplateName::SectionEvaluate).len(), subs);
    assert_eq!(mock.requests_for(TemplateName::SubsectionWrite).len(), subs);

    let dir = tempfile::tempdir().unwrap();
    let config = fixture_config(dir.path());
    let (b, mock) = scripted(
        &config,
        MockScript {
            outline_scores: vec![3, 3],
            section_scores: vec![3],
            section_queries: Some(vec!["late interaction token embeddings".into()]),
            ..MockScript::default()
        },
    );
    run_stage_with(Stage::All, &config, &b).unwrap();
    assert_eq!(mock.requests_for(TemplateName::OutlineEvaluate).len(), 2);
    assert_eq!(mock.requests_for(TemplateName::OutlineGenerate).len(), 3);
    let generation: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join(pipeline::GENERATION_FILE))).unwrap();
    assert_eq!(generation["outline"]["revision"], 2);
    for s in generation["sections"].as_array().unwrap() {
        assert_eq!(s["ea_calls"], 2);
        assert_eq!(s["revision"], 2);
    }
    // revisions see the papers retrieved for the evaluator's query
    let revisions: Vec<_> = mock
        .requests_for(TemplateName::SubsectionWrite)
        .into_iter()
        .filter(|r| !r.text.contains("Reviewer feedback to address (empty on the first draft):\n\n"))
        .collect();
    assert!(!revisions.is_empty());
    assert!(revisions.iter().all(|r| r.text.contains("Key: D1 |")));
}

#[test]
fn citeval_fixture_claims_match_hand_annotation() {
    let doc = citeval_survey();
    let claims = surveyg::citeval::extract_claims(&doc);
    let got: Vec<(&str, usize, Vec<&str>)> = claims
        .iter()
        .map(|c| (c.section_key.as_str(), c.sentence_index, c.cited_ids.iter().map(String::as_str).collect()))
        .collect();
    assert_eq!(got, citeval_golden_claims());
    let bib: BTreeSet<&str> = doc.bibliography.iter().map(|b| b.key.as_str()).collect();
    assert_eq!(bib, BTreeSet::from(["D1", "D2", "D3", "F1", "R1"]));
}

#[test]
fn saved_corpus_is_a_fixture_source() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture_corpus();
    corpus.save(dir.path()).unwrap();
    let loaded = Corpus::load(dir.path()).unwrap();
    assert_eq!(loaded, corpus);
    let keywords = KeywordSet::new("rag", [], 1).unwrap();
    let refetched = fetch_papers(&keywords, &FixtureSource::new(dir.path().join("papers")), 100, 1).unwrap();
    assert_eq!(refetched.corpus.len(), 12);
}
