//! Command-line driver for the credential-memorization audit pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use credaudit::gateway::DistractorPolicy;
use credaudit::pipeline::{
    generate_synthetic_corpus, load_registry, run_stage, PipelineConfig, PipelineError, Stage,
};

#[derive(Parser)]
#[command(
    name = "credaudit",
    about = "Audit code-completion backends for memorized hard-coded credentials",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonFlags {
    /// Secret-type registry config (TOML); built-in catalog when omitted.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Corpus root directory.
    #[arg(long, default_value = "corpus")]
    corpus: PathBuf,
    /// Output directory for run artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Backend id: "mock", "replay", or a backend described by
    /// --backend-config.
    #[arg(long, default_value = "mock")]
    backend: String,
    /// TOML description of an HTTP backend (required for non-builtin ids).
    #[arg(long)]
    backend_config: Option<PathBuf>,
    /// Suggestions requested per query.
    #[arg(long, default_value_t = 1)]
    top_k: usize,
    /// Minimum seconds between queries to one backend.
    #[arg(long, default_value_t = 30)]
    min_gap: u64,
    /// Run seed; all randomness derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prompt cases per secret type.
    #[arg(long, default_value_t = 50)]
    per_type: usize,
    /// Significance level for the rank tests.
    #[arg(long, default_value_t = 0.10)]
    sig_level: f64,
    /// Replace ground truth with a salted hash in the shareable export.
    #[arg(long)]
    redact_ground_truth: bool,
    /// Acknowledge live credential probing (sandbox/test types only).
    #[arg(long)]
    ack_live_probe: bool,
    /// Mock memorizer recall threshold (duplications needed for recall).
    #[arg(long, default_value_t = 3)]
    recall_threshold: usize,
    /// Mock distractor policy: empty, perturbed or lorem.
    #[arg(long, default_value = "empty")]
    distractor: String,
}

#[derive(Subcommand)]
enum Command {
    /// Scan the corpus for secret occurrences.
    Scan(CommonFlags),
    /// Build redacted prompt cases from scan results.
    Prompts(CommonFlags),
    /// Query the completion backend for every prompt case.
    Query(CommonFlags),
    /// Run the four-stage plausibility cascade over suggestions.
    Filter(CommonFlags),
    /// Classify plausible candidates against the corpus index.
    Classify(CommonFlags),
    /// Rank-sum tests of context features against memorization labels.
    Stats(CommonFlags),
    /// Render metrics tables, the filter funnel and test results.
    Report(CommonFlags),
    /// All stages in order over the configured backend.
    E2e(CommonFlags),
    /// Write the seeded synthetic corpus used for desk-scale runs.
    GenCorpus(CommonFlags),
}

fn to_config(flags: &CommonFlags) -> Result<PipelineConfig, PipelineError> {
    let distractor = match flags.distractor.as_str() {
        "empty" => DistractorPolicy::Empty,
        "perturbed" => DistractorPolicy::Perturbed,
        "lorem" => DistractorPolicy::Lorem,
        other => {
            return Err(PipelineError::Config(format!(
                "unknown distractor policy {other} (use empty, perturbed or lorem)"
            )))
        }
    };
    if !(0.0..=1.0).contains(&flags.sig_level) {
        return Err(PipelineError::Config(
            "--sig-level must be within [0, 1]".to_string(),
        ));
    }
    if flags.top_k == 0 {
        return Err(PipelineError::Config("--top-k must be ≥ 1".to_string()));
    }
    let mut cfg = PipelineConfig::new(&flags.corpus, &flags.out);
    cfg.registry_path = flags.registry.clone();
    cfg.backend_id = flags.backend.clone();
    cfg.backend_config = flags.backend_config.clone();
    cfg.top_k = flags.top_k;
    cfg.min_gap_ms = flags.min_gap * 1000;
    cfg.seed = flags.seed;
    cfg.per_type = flags.per_type;
    cfg.sig_level = flags.sig_level;
    cfg.redact_ground_truth = flags.redact_ground_truth;
    cfg.ack_live_probe = flags.ack_live_probe;
    cfg.recall_threshold = flags.recall_threshold;
    cfg.distractor = distractor;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let (stage, flags) = match &cli.command {
        Command::Scan(f) => (Some(Stage::Scan), f),
        Command::Prompts(f) => (Some(Stage::Prompts), f),
        Command::Query(f) => (Some(Stage::Query), f),
        Command::Filter(f) => (Some(Stage::Filter), f),
        Command::Classify(f) => (Some(Stage::Classify), f),
        Command::Stats(f) => (Some(Stage::Stats), f),
        Command::Report(f) => (Some(Stage::Report), f),
        Command::E2e(f) => (Some(Stage::E2e), f),
        Command::GenCorpus(f) => (None, f),
    };
    let cfg = to_config(flags)?;
    match stage {
        Some(stage) => {
            run_stage(stage, &cfg)?;
            eprintln!("stage {} complete; artifacts in {}", stage.name(), cfg.out_dir.display());
        }
        None => {
            let registry = load_registry(&cfg)?;
            generate_synthetic_corpus(&cfg.corpus_dir, &registry, cfg.seed)?;
            eprintln!("synthetic corpus written to {}", cfg.corpus_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
