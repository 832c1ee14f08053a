use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use surveyg::config::{BackendKind, RunConfig, SourceKind};
use surveyg::pipeline::{run_stage, Stage};
use surveyg::Error;

#[derive(Debug, Parser)]
#[command(name = "surveyg", version, about = "Build a citation graph over retrieved papers and draft a survey from it")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Expand the query, fetch, summarize and embed papers
    Ingest,
    /// Build the layered graph and its communities
    Graph,
    /// Write the horizontal and vertical summaries (memory.json)
    Summarize,
    /// Run the outline and subsection loops and export the survey
    Generate,
    /// Score citation quality of the generated survey
    Eval,
    /// Run every stage in order
    All,
}

impl Command {
    fn stage(&self) -> Stage {
        match self {
            Command::Ingest => Stage::Ingest,
            Command::Graph => Stage::Graph,
            Command::Summarize => Stage::Summarize,
            Command::Generate => Stage::Generate,
            Command::Eval => Stage::Eval,
            Command::All => Stage::All,
        }
    }
}

/// Flags win over the config file.
#[derive(Debug, Args)]
struct Overrides {
    #[arg(long, global = true)]
    query: Option<String>,
    /// JSON config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    k_foundation: Option<usize>,
    #[arg(long, global = true)]
    landmark_year: Option<i32>,
    #[arg(long = "tmax", global = true)]
    t_max: Option<u32>,
    /// LLM and encoder backend: mock or http
    #[arg(long, global = true)]
    backend: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory of per-paper JSON files (selects the fixture source)
    #[arg(long, global = true)]
    source_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    no_vertical: bool,
    #[arg(long, global = true)]
    no_horizontal: bool,
    #[arg(long, global = true)]
    no_multiagent: bool,
}

impl Overrides {
    fn apply(&self, mut c: RunConfig) -> surveyg::Result<RunConfig> {
        if let Some(q) = &self.query {
            c.query = q.clone();
        }
        if let Some(k) = self.k_foundation {
            c.graph.k_foundation = k;
        }
        if let Some(y) = self.landmark_year {
            c.graph.landmark_year = Some(y);
        }
        if let Some(t) = self.t_max {
            c.generation.t_max = t;
        }
        if let Some(b) = &self.backend {
            let kind: BackendKind = b.parse()?;
            c.llm.backend = kind;
            c.encoder.backend = kind;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        if let Some(d) = &self.source_dir {
            c.source.kind = SourceKind::Fixture;
            c.source.path = Some(d.clone());
        }
        c.ablation.no_vertical |= self.no_vertical;
        c.ablation.no_horizontal |= self.no_horizontal;
        c.ablation.no_multiagent |= self.no_multiagent;
        Ok(c)
    }

    fn config(&self) -> surveyg::Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.apply(base)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingInput(_) => 2,
        Error::Config { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stage = cli.command.stage();
    let result = cli.overrides.config().and_then(|c| run_stage(stage, &c));
    match result {
        Ok(manifest) => {
            for (name, record) in &manifest.stages {
                let notes: Vec<String> = record.notes.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("{name}: {} ms, {} calls; {}", record.duration_ms, record.usage.calls, notes.join(" "));
            }
            println!("{} files hashed, config {}", manifest.files.len(), &manifest.config_hash[..12]);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("surveyg {stage}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
