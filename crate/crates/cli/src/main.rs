use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cddpc::bench::{self, GridPoint};
use cddpc::config::{ControllerKind, ExperimentConfig};
use cddpc::io;
use cddpc::{BenchError, Result};
use cddpc_core::lq::{causal_split, factorize_with, RankPolicy};
use cddpc_core::predictor::{fit_causal, fit_spc};
use cddpc_core::traj::{partition, HorizonSpec};
use clap::{Parser, Subcommand};

/// Data-driven predictive control experiments.
#[derive(Parser)]
#[command(name = "cddpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// LQ-factorize the Hankel data of a trajectory CSV and fit predictors.
    Factorize {
        /// CSV with columns t,u1..,y1..
        traj: PathBuf,
        /// Past horizon L_p.
        #[arg(long)]
        lp: usize,
        /// Future horizon L_f.
        #[arg(long)]
        lf: usize,
        /// Write the LQ blocks to this binary file.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Write the causal predictor [K_p K_f] to this CSV.
        #[arg(long)]
        predictor: Option<PathBuf>,
        /// Write the unconstrained (SPC) predictor instead of the causal one.
        #[arg(long)]
        spc: bool,
        /// Accept rank-deficient data using minimum-norm solves.
        #[arg(long)]
        min_norm: bool,
    },
    /// Single closed-loop run; writes the per-step CSV.
    Control {
        #[arg(long)]
        config: PathBuf,
        /// Controller identifier, e.g. `c-gamma` or `rc-gamma(lambda=1,mu=10)`.
        #[arg(long)]
        controller: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset length; defaults to the first value of the sweep.
        #[arg(long)]
        n_d: Option<usize>,
        #[arg(long)]
        sigma_e: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full sweep; writes records.csv and normalized.csv.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Overrides the configured seed count.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Grid search of the `(tuned)` controllers; writes tuned.csv.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    if !path.exists() {
        return Err(BenchError::Invalid(format!(
            "config file {} does not exist",
            path.display()
        )));
    }
    ExperimentConfig::load(path)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| BenchError::io(p, e))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Factorize {
            traj,
            lp,
            lf,
            dump,
            predictor,
            spc,
            min_norm,
        } => {
            let traj = io::read_trajectory(&traj)?;
            let part = partition(&traj, HorizonSpec::new(lp, lf)?)?;
            let policy = if min_norm { RankPolicy::MinNorm } else { RankPolicy::Strict };
            let blocks = factorize_with(&part, policy)?;
            if let Some(p) = &dump {
                let f = std::fs::File::create(p).map_err(|e| BenchError::io(p, e))?;
                io::write_blocks(std::io::BufWriter::new(f), &blocks).map_err(|e| BenchError::io(p, e))?;
            }
            let pred = if spc { fit_spc(&part) } else { fit_causal(&blocks, &causal_split(&blocks)) };
            let causal = causal_split(&blocks);
            eprintln!(
                "M = {}, noncausal residual {:.6e}, causal residual {:.6e}, hash {}",
                blocks.columns(),
                fit_spc(&part).fit_residual(&part)?,
                causal.causal_residual_sq(&blocks),
                io::dataset_hash(&traj)
            );
            if predictor.is_some() || dump.is_none() {
                io::write_predictor(output(predictor.as_deref())?, &pred)?;
            }
            Ok(())
        }
        Command::Control {
            config,
            controller,
            seed,
            n_d,
            sigma_e,
            eps,
            out,
        } => {
            let mut cfg = load(&config)?;
            let entry = cddpc::config::parse_controller(&controller).map_err(BenchError::Invalid)?;
            let gp = GridPoint {
                n_d: n_d.unwrap_or(cfg.n_d[0]),
                sigma_e: sigma_e.unwrap_or(cfg.sigma_e[0]),
                eps: eps.unwrap_or(cfg.eps[0]),
            };
            let variant = match entry.kind {
                ControllerKind::Fixed(v) => v,
                ControllerKind::Tuned(_) => {
                    cfg.n_d = vec![gp.n_d];
                    cfg.sigma_e = vec![gp.sigma_e];
                    cfg.eps = vec![gp.eps];
                    cfg.controllers = vec![entry.clone()];
                    let tuned = bench::tune(&cfg)?;
                    eprintln!("tuned: lambda {:?}, mu {}", tuned[0].lambda, tuned[0].mu);
                    tuned[0].variant()
                }
            };
            let projector = matches!(variant, cddpc_core::controller::Variant::ProjRegDdpc { .. });
            let traj = bench::collect_dataset(&cfg, gp, seed)?;
            let prepared = bench::prepare(&cfg, traj, projector);
            let run = bench::run_variant(&cfg, gp, seed, variant, &prepared)?;
            io::write_run(output(out.as_deref())?, &run)?;
            eprintln!("J = {} (J_y = {}, J_u = {})", run.j, run.j_y, run.j_u);
            Ok(())
        }
        Command::Benchmark { config, out_dir, seeds } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seeds {
                if s == 0 {
                    return Err(BenchError::Invalid("seeds must be at least 1".into()));
                }
                cfg.seeds = s;
            }
            let dir = out_dir.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let out = bench::benchmark(&cfg, &dir)?;
            let failed = out.records.iter().filter(|r| !r.ok()).count();
            eprintln!(
                "{} runs ({} failed) written to {}",
                out.records.len(),
                failed,
                dir.display()
            );
            Ok(())
        }
        Command::Tune { config, out_dir } => {
            let cfg = load(&config)?;
            let tuned = bench::tune(&cfg)?;
            if tuned.is_empty() {
                return Err(BenchError::Invalid("no `(tuned)` controllers in the config".into()));
            }
            let dir = out_dir.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            std::fs::create_dir_all(&dir).map_err(|e| BenchError::io(&dir, e))?;
            let path = dir.join("tuned.csv");
            let f = std::fs::File::create(&path).map_err(|e| BenchError::io(&path, e))?;
            bench::write_tuned(std::io::BufWriter::new(f), &tuned)?;
            bench::write_tuned(std::io::stdout().lock(), &tuned)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
