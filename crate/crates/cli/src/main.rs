use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msr_core::config::{MockKind, RunConfig};
use msr_core::pipeline::{sweep, Pipeline, Stage, StageOptions, StageRecord, SweepParam};
use msr_core::preference::PreferenceMode;
use msr_core::sft::LossSpan;
use msr_core::summarizer::SummaryMode;
use msr_core::{Error, Result};
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(name = "msr", version, about = "Multimodal sequential recommendation pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration; defaults to ./msr.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Use this single split seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Serve every role with the deterministic in-process backend.
    #[arg(long, global = true)]
    mock: bool,

    #[arg(long, global = true, value_enum)]
    mock_behavior: Option<MockArg>,

    /// Bypass the response cache.
    #[arg(long, global = true)]
    no_cache: bool,

    /// Re-execute stages even if a completed output exists.
    #[arg(long, global = true)]
    force: bool,

    #[arg(long, global = true, value_enum)]
    summarize_mode: Option<SummarizeArg>,

    #[arg(long, global = true, value_enum)]
    preference_mode: Option<PreferenceArg>,

    #[arg(long, global = true)]
    block_size: Option<usize>,

    #[arg(long, global = true)]
    summary_length: Option<usize>,

    /// Ranking cutoff for HR@K and MRR@K.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Only score or evaluate the loss of this fold.
    #[arg(long, global = true)]
    fold: Option<usize>,

    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Read and filter the logs, build sequences, folds and negatives.
    Ingest,
    /// Summarize every item from its description and image.
    SummarizeItems,
    /// Infer one preference summary per user.
    InferPreferences,
    /// Export fine-tuning datasets per fold.
    BuildSft,
    /// Teacher-forced loss of a backend on the held-out examples.
    EvalLoss {
        /// Backend declared under [backends] to score with.
        #[arg(long)]
        backend: Option<String>,
        #[arg(long, value_enum)]
        loss_span: Option<SpanArg>,
    },
    /// Score every evaluation candidate.
    Score,
    /// Compute ranking metrics from the scores.
    Evaluate,
    /// Ingest through evaluate, reusing completed stages.
    Run,
    /// Evaluate each value of a preference parameter.
    Sweep {
        /// block_size or summary_length
        parameter: String,
        #[arg(required = true, num_args = 1..)]
        values: Vec<usize>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MockArg {
    HashText,
    OracleYes,
    UniformLogprob,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SummarizeArg {
    Full,
    TextOnly,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PreferenceArg {
    Recurrent,
    Direct,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SpanArg {
    Label,
    Full,
}

fn load_config(global: &Global) -> Result<RunConfig> {
    let mut config = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None if PathBuf::from("msr.toml").is_file() => RunConfig::load(&PathBuf::from("msr.toml"))?,
        None => {
            let mut config = RunConfig::default();
            config.resolve_paths(&std::env::current_dir()?);
            config
        }
    };
    if let Some(seed) = global.seed {
        config.split.seeds = vec![seed];
    }
    if global.mock {
        config.mock.enabled = true;
    }
    if let Some(kind) = global.mock_behavior {
        config.mock.behavior = match kind {
            MockArg::HashText => MockKind::HashText,
            MockArg::OracleYes => MockKind::OracleYes,
            MockArg::UniformLogprob => MockKind::UniformLogprob,
        };
    }
    if global.no_cache {
        config.gateway.use_cache = false;
    }
    if let Some(mode) = global.summarize_mode {
        config.summarize.mode = match mode {
            SummarizeArg::Full => SummaryMode::Full,
            SummarizeArg::TextOnly => SummaryMode::TextOnly,
        };
    }
    if let Some(mode) = global.preference_mode {
        config.preference.mode = match mode {
            PreferenceArg::Recurrent => PreferenceMode::Recurrent,
            PreferenceArg::Direct => PreferenceMode::Direct,
        };
    }
    if let Some(b) = global.block_size {
        config.preference.block_size = b;
    }
    if let Some(n) = global.summary_length {
        config.preference.summary_length = n;
    }
    if let Some(k) = global.k {
        config.recommender.k = k;
    }
    Ok(config)
}

fn print_record(stage: Stage, record: &StageRecord) {
    println!(
        "{stage}: {} ({} backend calls, {} cache hits, {} ms) -> {}",
        if record.reused { "reused" } else { "done" },
        record.total_backend_calls(),
        record.total_cache_hits(),
        record.wall_ms,
        record.dir.display()
    );
}

async fn execute(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli.global)?;
    let stages: Vec<Stage> = match &cli.command {
        Command::Ingest => vec![Stage::Ingest],
        Command::SummarizeItems => vec![Stage::SummarizeItems],
        Command::InferPreferences => vec![Stage::InferPreferences],
        Command::BuildSft => vec![Stage::BuildSft],
        Command::Score => vec![Stage::Score],
        Command::Evaluate => vec![Stage::Evaluate],
        Command::Run => Stage::RUN.to_vec(),
        Command::EvalLoss { backend, loss_span } => {
            if let Some(span) = loss_span {
                config.sft.loss_span = match span {
                    SpanArg::Label => LossSpan::Label,
                    SpanArg::Full => LossSpan::Full,
                };
            }
            if let Some(name) = backend {
                if config.mock.enabled {
                    if name != "mock" {
                        return Err(Error::Config(format!("--backend {name} conflicts with --mock")));
                    }
                } else if !config.backends.contains_key(name) {
                    return Err(Error::Config(format!("backend {name} is not declared under [backends]")));
                } else {
                    config.roles.insert(msr_core::gateway::RoleTag::RecommenderMllm, name.clone());
                }
            }
            vec![Stage::EvalLoss]
        }
        Command::Sweep { parameter, values } => {
            let parameter: SweepParam = parameter.parse()?;
            let report = sweep(&config, parameter, values).await?;
            print!("{}", report.to_table());
            println!(
                "sweep data: {}",
                config.data.out_dir.join("sweeps").join(format!("{}.tsv", parameter.as_str())).display()
            );
            return if report.rows.iter().all(|r| r.ok) {
                Ok(())
            } else {
                let failed = report.rows.iter().filter(|r| !r.ok).count();
                Err(Error::Data(format!("{failed} of {} sweep values failed", report.rows.len())))
            };
        }
    };

    let mut pipeline = Pipeline::new(config)?
        .with_force(cli.global.force)
        .with_options(StageOptions { fold: cli.global.fold });
    for stage in &stages {
        let record = pipeline.run_stage(*stage).await?;
        print_record(*stage, &record);
    }
    match stages.last() {
        Some(Stage::Evaluate) => print!("{}", pipeline.load_report_table()?),
        Some(Stage::EvalLoss) => {
            let loss = pipeline.load_loss()?;
            for f in &loss.per_fold {
                println!("seed {} fold {}: {} examples, mean loss {:.6}", f.seed, f.fold, f.examples, f.mean_loss);
            }
            println!("overall: {} examples, mean loss {:.6}", loss.overall.examples, loss.overall.mean_loss);
        }
        _ => {}
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if cli.global.quiet { "warn" } else { "info" };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)))
        .with_writer(std::io::stderr)
        .init();

    match execute(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
