use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pofbm::harness::io::ensure_dir;
use pofbm::harness::runs::{fgn_check, load_data, run_multilevel, run_single_level, write_dataset, write_multilevel, write_single_level};
use pofbm::harness::study::{mse_study, rates_from_dir, write_study};
use pofbm::harness::{plots, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "pofbm", version, about = "Multilevel particle MCMC for SDEs driven by fractional Brownian motion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate observations from the configured model.
    Synth,
    /// fGN autocovariance and circulant eigenvalue diagnostics.
    FgnCheck,
    /// Single-level PMMH with importance correction.
    Pmcmc,
    /// Multilevel PMMH estimate.
    Mlpmcmc,
    /// Cost-versus-MSE study for both methods.
    Study,
    /// Refit rates from a completed study in `--out`.
    Rates,
    /// Emit plotting scripts for results in `--out`.
    Plots,
}

fn load(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output.dir = o.clone();
    }
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(HarnessError::Config("--workers must be positive".into()));
        }
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let cfg = load(&cli.common)?;
    let dir = cfg.output.dir.clone();
    ensure_dir(&dir)?;
    match cli.command {
        Command::Synth => {
            let data = load_data(&cfg)?;
            write_dataset(&data, &dir, cfg.data.write_truth)?;
        }
        Command::FgnCheck => fgn_check(&cfg, &dir)?,
        Command::Pmcmc => {
            let data = load_data(&cfg)?;
            write_dataset(&data, &dir, cfg.data.write_truth)?;
            let out = run_single_level(&cfg, &data.y)?;
            write_single_level(&cfg, &out, &dir)?;
            let n = cfg.multilevel.functionals.len();
            for (k, f) in cfg.multilevel.functionals.iter().enumerate().take(n) {
                println!("{}: corrected {:.6}, uncorrected {:.6}", f.label(&cfg.model().param_names()), out.run.estimate.fine[k], out.uncorrected[k]);
            }
        }
        Command::Mlpmcmc => {
            let data = load_data(&cfg)?;
            write_dataset(&data, &dir, cfg.data.write_truth)?;
            let out = run_multilevel(&cfg, &data.y)?;
            write_multilevel(&cfg, &out, &dir)?;
            for (f, v) in cfg.multilevel.functionals.iter().zip(&out.estimate.total) {
                println!("{}: {v:.6}", f.label(&cfg.model().param_names()));
            }
        }
        Command::Study => {
            let data = load_data(&cfg)?;
            write_dataset(&data, &dir, cfg.data.write_truth)?;
            let result = mse_study(&cfg, &data.y)?;
            write_study(&result, &dir)?;
            for r in &result.rates {
                println!("{} {}: slope {:.3}", r.method.as_str(), r.functional, r.fit.slope);
            }
        }
        Command::Rates => {
            for r in rates_from_dir(&dir)? {
                println!("{} {}: slope {:.3}", r.method.as_str(), r.functional, r.fit.slope);
            }
        }
        Command::Plots => {
            for f in plots::emit_plots(&dir)? {
                println!("{}", dir.join(f).display());
            }
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
