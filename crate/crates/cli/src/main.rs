use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use uoiskit_cli::*;
use uoiskit_core::pipeline::{Ablation, ProposerKind};
use uoiskit_core::{Error, Result};

#[derive(Parser)]
#[command(name = "uoiskit", version, about = "Synthetic desk-scene instance segmentation toolkit")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 picks one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the foreground and heatmap head.
    TrainHpg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the proposal re-scoring network.
    TrainHdnet {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_proposer)]
        proposer: Option<ProposerKind>,
        /// Recording consumed by the replay proposer.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Run the pipeline on a dataset.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        hpg: Option<PathBuf>,
        #[arg(long)]
        hdnet: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also run this variant: no-hdnet, no-heatmap or no-foreground.
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
        #[arg(long, value_parser = parse_proposer)]
        proposer: Option<ProposerKind>,
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Save every proposal served so the run can be replayed.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Combine evaluation reports into one table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_proposer(s: &str) -> std::result::Result<ProposerKind, String> {
    match s {
        "oracle" => Ok(ProposerKind::Oracle),
        "replay" => Ok(ProposerKind::Replay),
        _ => Err(format!("unknown proposer {s:?}; expected oracle or replay")),
    }
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UOISKIT_LOG", "warn"))
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    match cli.command {
        Command::Gen { count, out } => cmd_gen(&cfg, count, &out),
        Command::TrainHpg { data, out } => cmd_train_hpg(&cfg, &data, &out),
        Command::TrainHdnet { data, out, proposer, replay } => {
            let p = make_proposer(&cfg, proposer.unwrap_or(cfg.pipeline.proposer), replay.as_deref())?;
            cmd_train_hdnet(&cfg, &data, &out, p.as_ref())
        }
        Command::Infer { data, hpg, hdnet, out, ablation, proposer, replay, record } => {
            let p = make_proposer(&cfg, proposer.unwrap_or(cfg.pipeline.proposer), replay.as_deref())?;
            let args = InferArgs {
                data: &data,
                hpg: hpg.as_deref(),
                hdnet: hdnet.as_deref(),
                out: &out,
                ablation: ablation.unwrap_or_default(),
                proposer: p.as_ref(),
                record: record.as_deref(),
            };
            cmd_infer(&cfg, &args).map(|_| ())
        }
        Command::Eval { pred, gt, out } => {
            let report = cmd_eval(&cfg, &pred, &gt, out.as_deref())?;
            print!("{}", report.table());
            Ok(())
        }
        Command::Report { inputs, out } => {
            let table = cmd_report(&inputs)?;
            if let Some(out) = out {
                std::fs::write(&out, &table).map_err(|e| Error::io(&out, e))?;
            }
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
