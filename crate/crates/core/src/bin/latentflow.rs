use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentflow::config::RunConfig;
use latentflow::pipeline::{self, paths};
use latentflow::Result;

/// Temporal upscaling of wake flow fields from wall pressure.
#[derive(Parser)]
#[command(name = "latentflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in desk defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Run directory; overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise the low-rate training pairs and high-rate pressure record.
    Generate(Common),
    /// Stage 1: train the pressure-conditioned VAE.
    TrainVae(Common),
    /// Stage 2: train the pressure-to-latent mapper against the frozen VAE.
    TrainP2z(Common),
    /// Reconstruct high-rate fields from the high-rate pressure record.
    Infer(Common),
    /// SPOD of a field file.
    AnalyzeSpod {
        #[command(flatten)]
        common: Common,
        /// Field file to analyse; defaults to the inferred record.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Find low-rate snapshots whose lift matches the high-rate lift maximum.
    MatchLift(Common),
    /// Compare a field file with the analytic street.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Every stage in order, then a manifest.
    RunAll(Common),
}

fn setup(c: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.paths.out = out.clone();
    }
    cfg.validate()?;
    // Only the first call configures the global pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(c.threads.max(1)).build_global();
    let out = cfg.paths.out.clone();
    Ok((cfg, out))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(c) => {
            let (cfg, out) = setup(&c)?;
            let (low, high) = pipeline::generate(&cfg, &out)?;
            println!("wrote {} low-rate pairs and {} high-rate pressure samples to {}", low.len(), high.len(), out.display());
        }
        Command::TrainVae(c) => {
            let (cfg, out) = setup(&c)?;
            let trace = pipeline::train_vae(&cfg, &out)?;
            if let Some(e) = trace.last() {
                println!("stage 1: {} epochs, recon {:.5}, kl {:.3}, val recon {:.5}", trace.len(), e.recon, e.kl, e.val_recon);
            }
            println!("checkpoint {}", out.join(paths::VAE_CHECKPOINT).display());
        }
        Command::TrainP2z(c) => {
            let (cfg, out) = setup(&c)?;
            let trace = pipeline::train_p2z(&cfg, &out)?;
            if let Some(e) = trace.last() {
                println!("stage 2: {} epochs, latent mse {:.5}, recon mse {:.5}, val latent mse {:.5}", trace.len(), e.latent_mse, e.recon_mse, e.val_latent_mse);
            }
            println!("checkpoint {}", out.join(paths::P2Z_CHECKPOINT).display());
        }
        Command::Infer(c) => {
            let (cfg, out) = setup(&c)?;
            let s = pipeline::infer(&cfg, &out)?;
            println!("inferred {} snapshots into {}", s.len(), out.join(paths::INFERRED).display());
        }
        Command::AnalyzeSpod { common, input } => {
            let (cfg, out) = setup(&common)?;
            for p in pipeline::analyze_spod(&cfg, &out, input.as_deref())? {
                println!("peak {:.4} Hz  St {:.4}  lambda {:.4e}", p.frequency, p.strouhal, p.lambda);
            }
        }
        Command::MatchLift(c) => {
            let (cfg, out) = setup(&c)?;
            let m = pipeline::match_lift(&cfg, &out)?;
            match m.first() {
                Some(best) => println!(
                    "{} matches; best low-rate index {} (Cl {:.4} vs {:.4})",
                    m.len(),
                    best.low_index,
                    best.cl_low,
                    best.cl_high
                ),
                None => println!("no low-rate snapshot within tolerance {}", cfg.eval.lift_tol),
            }
        }
        Command::Evaluate { common, input } => {
            let (cfg, out) = setup(&common)?;
            pipeline::evaluate(&cfg, &out, input.as_deref())?;
            let report = out.join(paths::METRICS_TXT);
            print!("{}", std::fs::read_to_string(&report).map_err(|e| latentflow::Error::Io { path: report, source: e })?);
        }
        Command::RunAll(c) => {
            let (cfg, out) = setup(&c)?;
            let m = pipeline::run_all(&cfg, &out)?;
            println!("manifest {} (config {})", out.join(paths::MANIFEST).display(), m.config_hash);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
