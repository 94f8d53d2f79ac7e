use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cascade_tta::adapt::Method;
use cascade_tta::data::{build_stream, Setup, StreamManifest};
use cascade_tta::harness::{self, adapt_cell, pretrain_cell, run_study, run_suite, ExperimentConfig, Study, Suite};
use cascade_tta::nn::ModelCheckpoint;
use cascade_tta::pretrain::PretrainMethod;
use cascade_tta::{Error, Result};

#[derive(Parser)]
#[command(name = "cascade-tta", version, about = "Continual test-time adaptation with a cascading auxiliary head")]
struct Cli {
    /// Experiment config (JSON); defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SetupArg {
    Instantaneous,
    Gradual,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train one checkpoint; writes {method}_s{seed}.ckpt and .report.csv.
    Pretrain {
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (defaults to the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a stream manifest.
    MakeStream {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the config's stream setup.
        #[arg(long, value_enum)]
        setup: Option<SetupArg>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a checkpoint through a stream; writes trace, snapshots and metrics.
    Adapt {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        method: String,
        /// Rebuild the stream at these batch sizes (one report each).
        #[arg(long, num_args = 1..)]
        batch_size: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the accuracy matrix (no A or F).
        #[arg(long)]
        no_matrix: bool,
        /// Skip writing per-domain snapshot checkpoints.
        #[arg(long)]
        no_snapshots: bool,
    },
    /// Run a fixed-seed property suite: gradcheck, theorem1, metrics, bn.
    Verify { suite: String },
    /// Run a study: main, gradual, batch_size, aux_ablation, mtl_ablation, uncertainty.
    Reproduce {
        study: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::InvalidConfig(format!("cannot read {}: {io}", p.display())),
            e => e,
        }),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Failure of a suite that ran to completion.
struct SuiteFailed;

fn run(cli: Cli) -> Result<std::result::Result<(), SuiteFailed>> {
    let cfg = load_config(cli.config.as_deref())?;
    if cli.print_config {
        println!("{}", cfg.to_json());
        return Ok(Ok(()));
    }
    let Some(command) = cli.command else {
        return Err(Error::InvalidConfig("no command given; see --help".into()));
    };
    match command {
        Command::Pretrain { method, seed, out } => {
            let m: PretrainMethod = method.parse()?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let (ckpt, report) = pretrain_cell(&cfg, m, seed)?;
            let stem = format!("{m}_s{seed}");
            write(&out.join(format!("{stem}.ckpt")), ckpt.to_bytes())?;
            write(&out.join(format!("{stem}.report.csv")), report.to_csv())?;
            if let Some(acc) = report.final_holdout_acc() {
                println!("{stem}: source holdout accuracy {:.2}% (config {})", 100.0 * acc, report.config_hash);
            }
        }
        Command::MakeStream { seed, setup, batch_size, out } => {
            let setup = match setup {
                Some(SetupArg::Instantaneous) => Setup::Instantaneous,
                Some(SetupArg::Gradual) => Setup::Gradual,
                None => cfg.stream.setup,
            };
            let stream = harness::stream_cell(&cfg, seed, setup, batch_size.unwrap_or(cfg.stream.batch_size))?;
            let json = serde_json::to_string_pretty(&stream.manifest())?;
            write(&out, json + "\n")?;
            println!("{} domains, {} batches", stream.len(), stream.unlabeled().total_batches());
        }
        Command::Adapt { ckpt, stream, method, batch_size, out, no_matrix, no_snapshots } => {
            let method: Method = method.parse()?;
            let checkpoint = ModelCheckpoint::load(&ckpt)?;
            method.check_model(&checkpoint.model)?;
            let manifest: StreamManifest = serde_json::from_str(&std::fs::read_to_string(&stream)?)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let sizes = if batch_size.is_empty() { vec![manifest.config.batch_size] } else { batch_size };
            let acfg = cfg.adapt_for(method, checkpoint.seed);
            for b in sizes {
                let mut sc = manifest.config.clone();
                sc.batch_size = b;
                let ds = if b == manifest.config.batch_size {
                    manifest.build()?
                } else {
                    build_stream(&sc, &manifest.source)?
                };
                let reading = (!no_matrix).then_some(cfg.transfer_reading);
                let cell = adapt_cell(&checkpoint, &ds, &acfg, reading)?;
                let stem = format!("{method}_s{}_b{b}", checkpoint.seed);
                write(&out.join(format!("{stem}.trace.csv")), cell.run.trace.to_csv())?;
                write(&out.join(format!("{stem}.trace.json")), serde_json::to_string(&cell.run.trace)? + "\n")?;
                write(&out.join(format!("{stem}.metrics.json")), serde_json::to_string_pretty(&cell.report)? + "\n")?;
                write(&out.join(format!("{stem}.metrics.csv")), cell.report.to_csv())?;
                if !no_snapshots {
                    let dir = out.join(format!("{stem}_snapshots"));
                    std::fs::create_dir_all(&dir)?;
                    for (d, s) in cell.run.snapshots.iter().enumerate() {
                        s.save(dir.join(format!("domain_{d:03}.ckpt")))?;
                    }
                    println!("wrote {} snapshots to {}", cell.run.snapshots.len(), dir.display());
                }
                let r = &cell.report;
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
                println!(
                    "{stem}: E {:.2}% A {}% F {}% over {} domains",
                    100.0 * r.online_error,
                    fmt(r.average_accuracy),
                    fmt(r.forward_transfer),
                    r.per_domain_errors.len()
                );
            }
        }
        Command::Verify { suite } => {
            let suite: Suite = suite.parse()?;
            let report = run_suite(suite)?;
            println!("{report}");
            if !report.passed() {
                return Ok(Err(SuiteFailed));
            }
        }
        Command::Reproduce { study, out } => {
            let study: Study = study.parse()?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let report = run_study(study, &cfg)?;
            print!("{report}");
            write(&out.join(format!("{study}.csv")), report.to_csv())?;
            write(&out.join(format!("{study}.json")), report.to_json() + "\n")?;
        }
    }
    Ok(Ok(()))
}

fn main() -> ExitCode {
    harness::configure_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(SuiteFailed)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
