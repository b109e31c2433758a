mod commands;
mod config;

use std::io::IsTerminal;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "semrank", version, about = "Semantic-ID tokenization and re-rank evaluation pipelines")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set codebook.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads (overrides `workers` in the config; 0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter interactions, split leave-one-out, and copy metadata.
    Ingest(commands::IngestArgs),
    /// Contrastive refinement of item embeddings on co-engagement pairs.
    RefineEmbed(commands::RefineArgs),
    /// Train a residual-quantization codebook checkpoint.
    TrainCodebook(commands::TrainArgs),
    /// Assign semantic IDs to every item.
    Tokenize(commands::TokenizeArgs),
    /// Uniqueness statistics of a SID registry.
    UniquenessReport(commands::UniquenessArgs),
    /// Uniqueness over all 32 technique combinations.
    Ablate(commands::AblateArgs),
    /// Build re-rank episodes from a split with the Markov retriever.
    Episodes(commands::EpisodesArgs),
    /// Generate reasoning traces with a teacher model.
    GenTraces(commands::GenTracesArgs),
    /// Parse raw model outputs ({raw, n} per line).
    ParseCheck(commands::ParseCheckArgs),
    /// Rewards, advantages and the clipped objective for sampled groups.
    ScoreRewards(commands::ScoreArgs),
    /// Recall and NDCG of re-ranked outputs against the retriever order.
    Evaluate(commands::EvaluateArgs),
    /// Scripted policy outputs for episodes.
    MockPolicy(commands::MockPolicyArgs),
    /// Write the bundled-style synthetic corpus.
    Synth(commands::SynthArgs),
    /// Print the resolved configuration.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let color = std::env::var_os("NO_COLOR").is_none_or(|v| v.is_empty())
        && std::io::stderr().is_terminal();
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("SEMRANK_LOG")
        .write_style(if color {
            env_logger::WriteStyle::Auto
        } else {
            env_logger::WriteStyle::Never
        })
        .target(env_logger::Target::Stderr)
        .init();
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<semrank_core::Error>())
        .map(|e| e.kind())
        .or_else(|| {
            err.chain()
                .find_map(|e| e.downcast_ref::<std::io::Error>())
                .map(|_| "io")
        })
        .unwrap_or("cli")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)
        .map_err(|e| semrank_core::Error::Config(format!("{e:#}")))?;
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()?;
    use commands as c;
    match cli.command {
        Command::Ingest(a) => c::ingest(&cfg, a),
        Command::RefineEmbed(a) => c::refine_embed(&cfg, a),
        Command::TrainCodebook(a) => c::train_codebook(&cfg, a),
        Command::Tokenize(a) => c::tokenize(&cfg, a),
        Command::UniquenessReport(a) => c::uniqueness_report(&cfg, a),
        Command::Ablate(a) => c::ablate(&cfg, a),
        Command::Episodes(a) => c::episodes(&cfg, a),
        Command::GenTraces(a) => c::gen_traces(&cfg, a),
        Command::ParseCheck(a) => c::parse_check(a),
        Command::ScoreRewards(a) => c::score_rewards(&cfg, a),
        Command::Evaluate(a) => c::evaluate(&cfg, a),
        Command::MockPolicy(a) => c::mock_policy(&cfg, a),
        Command::Synth(a) => c::synth(&cfg, a),
        Command::Config(_) => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let body = serde_json::json!({
                "error": {
                    "kind": error_kind(&err),
                    "message": format!("{err:#}"),
                }
            });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
