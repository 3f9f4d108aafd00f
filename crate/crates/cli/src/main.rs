use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rgcl_core::harness::{
    run_dump_tau, run_gen_data, run_train_bimodal, run_train_unimodal, run_verify, ExperimentConfig,
    Fault, RunMode,
};

#[derive(Parser)]
#[command(name = "rgcl", version, about = "Robust global contrastive learning with individualized temperatures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on long-tailed synthetic clusters (modes isogclr, sogclr-baseline)
    TrainUnimodal(Common),
    /// Train two towers on paired synthetic views
    TrainBimodal(Common),
    /// Run the self-check suite; exits nonzero if any check fails
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Write the configured dataset to dataset.csv
    GenData(Common),
    /// Export the temperature table of an optimizer checkpoint
    DumpTau {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config file with flat keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. --set rho=0.2 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load_with_overrides(p, &self.overrides)
                .with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default().with_overrides(&self.overrides)?,
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("rgcl-out"))
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("RGCL_THREADS") {
        let n: usize = v.parse().with_context(|| format!("RGCL_THREADS={v}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn write_text(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::TrainUnimodal(common) => {
            let cfg = common.load()?;
            if cfg.mode == RunMode::Bimodal {
                bail!("train-unimodal needs mode isogclr or sogclr-baseline");
            }
            let dir = out_dir(&cfg);
            let run = run_train_unimodal(&cfg)?;
            run.write(&dir)?;
            let r = &run.report;
            println!(
                "trained {} epochs: spearman(size, tau) = {:.4}, knn = {:.4}, {:.1}s -> {}",
                cfg.epochs,
                r.tau.spearman_size_tau,
                r.knn_accuracy,
                r.wall_clock_secs,
                dir.display()
            );
        }
        Command::TrainBimodal(common) => {
            let mut cfg = common.load()?;
            cfg.mode = RunMode::Bimodal;
            cfg.validate()?;
            let dir = out_dir(&cfg);
            let run = run_train_bimodal(&cfg)?;
            run.write(&dir)?;
            let r = &run.report;
            println!(
                "trained {} epochs: spearman(size, tau_v) = {:.4}, knn = {:.4}, {:.1}s -> {}",
                cfg.epochs,
                r.tau.spearman_size_tau,
                r.knn_accuracy,
                r.wall_clock_secs,
                dir.display()
            );
        }
        Command::Verify { common, inject_fault } => {
            let cfg = common.load()?;
            let dir = out_dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            let report = run_verify(cfg.seed, inject_fault);
            write_text(&dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            for c in &report.checks {
                let status = if c.passed { "ok  " } else { "FAIL" };
                println!("{status} {:<45} residual {:.3e} (tol {:.1e})", c.name, c.residual, c.tolerance);
                if let Some(e) = &c.error {
                    println!("     {e}");
                }
            }
            if !report.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::GenData(common) => {
            let cfg = common.load()?;
            let dir = out_dir(&cfg);
            let r = run_gen_data(&cfg, &dir)?;
            println!("wrote {} samples, cluster sizes {:?} -> {}", r.n, r.cluster_sizes, dir.display());
        }
        Command::DumpTau { common, checkpoint } => {
            let cfg = common.load()?;
            let dir = out_dir(&cfg);
            let r = run_dump_tau(&cfg, &checkpoint, &dir)?;
            println!(
                "step {}: {} anchors, tau in [{:.4}, {:.4}], mean {:.4} -> {}",
                r.step,
                r.n,
                r.tau_min,
                r.tau_max,
                r.tau_mean,
                dir.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
