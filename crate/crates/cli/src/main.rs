use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rescore_cli::config::RunConfig;
use rescore_cli::{commands, CliError, Layout, Scorer};

/// Synthesize N-best data, train second-pass scorers, tune and evaluate.
#[derive(Debug, Parser)]
#[command(name = "rescore", version)]
struct Cli {
    /// Key-value config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Work directory holding every artifact.
    #[arg(long, global = true, default_value = "work")]
    out: PathBuf,
    /// Config override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Directory with train/dev/eval.jsonl [default: <out>/data]
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train/dev/eval N-best corpus.
    Synth,
    /// Learn the subword vocabulary from the training split.
    Tokenize,
    /// Train a scorer.
    Train {
        #[arg(value_enum)]
        model: Scorer,
    },
    /// Score the dev and eval splits with a trained scorer.
    Score {
        #[arg(value_enum)]
        model: Scorer,
    },
    /// Pick thresholds and interpolation weights on dev.
    Tune {
        #[arg(value_enum)]
        model: Scorer,
    },
    /// Print the WER table for every method with artifacts.
    Eval {
        /// Records to evaluate [default: <data>/eval.jsonl]
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config,
}

fn run(cli: Cli) -> Result<String, CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set, cli.seed)?;
    let layout = Layout::new(&cli.out, cli.data.as_deref());
    match cli.command {
        Command::Synth => commands::synth(&cfg, &layout),
        Command::Tokenize => commands::tokenize(&cfg, &layout),
        Command::Train { model } => commands::train(&cfg, &layout, model),
        Command::Score { model } => commands::score(&cfg, &layout, model),
        Command::Tune { model } => commands::tune(&cfg, &layout, model),
        Command::Eval { records } => {
            let (table, text) = commands::eval(&cfg, &layout, records.as_deref())?;
            Ok(format!("{text}\n{}", table.to_tsv()))
        }
        Command::Config => Ok(cfg.canonical_text()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            eprintln!("error: {}", first.lines().next().unwrap_or("bad arguments").trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
