use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sixdma_isac::env::Scheme;
use sixdma_isac::harness::{self, ExperimentSpec, Overrides, RunKey, Sweep};
use sixdma_isac::hdrl::AgentRoster;
use sixdma_isac::Error;

#[derive(Parser)]
#[command(name = "sixdma", version, about = "6DMA-assisted ISAC for UAV networks: training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (scheme, seed, sweep point) of the experiment.
    Train {
        #[command(flatten)]
        spec: SpecArgs,
        /// Skip finished runs and continue partial ones from their checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate trained base runs on held-out episode seeds.
    Eval {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, value_delimiter = ',', default_value = "1000,1001,1002,1003,1004")]
        eval_seeds: Vec<u64>,
    },
    /// Tabulate converged metrics and write plot data.
    Compare {
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Per-agent inference latency of a checkpoint.
    Profile {
        /// Run directory or its checkpoint subdirectory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        calls: usize,
    },
}

#[derive(Args)]
struct SpecArgs {
    /// JSON experiment file layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the reduced desk-scale preset.
    #[arg(long)]
    desk: bool,
    /// Scheme ids (1 proposed, 2 td3, 3 rotation-only, 4 circular, 5 fixed).
    #[arg(long, value_delimiter = ',')]
    scheme: Option<Vec<u8>>,
    #[arg(long, visible_alias = "seed", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Transmit-power sweep in watts.
    #[arg(long, value_delimiter = ',')]
    sweep_pmax: Option<Vec<f64>>,
    /// Surface update-period sweep in slots.
    #[arg(long, value_delimiter = ',')]
    sweep_tr: Option<Vec<usize>>,
}

impl SpecArgs {
    fn resolve(&self) -> Result<ExperimentSpec> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
            None => None,
        };
        let schemes = match &self.scheme {
            Some(ids) => Some(ids.iter().map(|&i| Scheme::from_id(i)).collect::<sixdma_isac::Result<Vec<_>>>()?),
            None => None,
        };
        let overrides = Overrides {
            desk: self.desk,
            schemes,
            seeds: self.seeds.clone(),
            episodes: self.episodes,
            output_dir: self.out.clone(),
            sweep_pmax_w: self.sweep_pmax.clone(),
            sweep_update_period: self.sweep_tr.clone(),
        };
        Ok(harness::resolve_spec(text.as_deref(), &overrides)?)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { spec, resume } => {
            let spec = spec.resolve()?;
            let workers = harness::worker_count()?;
            for o in harness::cmd_train(&spec, resume, workers)? {
                println!("{:?}\t{}\t{} episodes", o.status, o.dir.display(), o.episodes);
            }
        }
        Command::Eval { spec, eval_seeds } => {
            let spec = spec.resolve()?;
            for &scheme in &spec.schemes {
                for &seed in &spec.seeds {
                    let key = RunKey { scheme, seed, sweep: Sweep::Base };
                    let r = harness::cmd_eval(&spec, &key, &eval_seeds)
                        .with_context(|| format!("evaluating {}", key.relative_dir().display()))?;
                    println!(
                        "{}\trate {:.4}\tsnr {:.4}\tsensing_ok {:.3}",
                        key.relative_dir().display(),
                        r.aggregate.mean_sum_rate,
                        r.aggregate.mean_snr,
                        r.aggregate.sensing_ok_fraction
                    );
                }
            }
        }
        Command::Compare { spec } => {
            let spec = spec.resolve()?;
            let report = harness::cmd_compare(&spec)?;
            println!("{:<10} {:>6} {:>14} {:>14}", "scheme", "seeds", "sum rate", "mean SNR");
            for s in &report.summary {
                println!("{:<10} {:>6} {:>14.6} {:>14.6}", s.label, s.seeds, s.converged_sum_rate, s.converged_mean_snr);
            }
            println!("wrote {}", spec.output_dir.join("compare").display());
        }
        Command::Profile { checkpoint, calls } => {
            let (run_dir, ckpt) = locate_checkpoint(&checkpoint);
            let run = harness::read_run_config(&run_dir)?;
            let (roster, _) = AgentRoster::load(&ckpt, &run.scenario)?;
            print!("{}", harness::cmd_profile(&roster, &run.scenario, calls)?.table());
        }
    }
    Ok(())
}

fn locate_checkpoint(path: &Path) -> (PathBuf, PathBuf) {
    if path.join("manifest.json").exists() {
        let parent = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        (parent, path.to_path_buf())
    } else {
        (path.to_path_buf(), path.join("checkpoint"))
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 1,
        Some(_) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
