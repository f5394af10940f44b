use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use avtomo_core::config::{ExperimentConfig, ForwardMethod};
use avtomo_core::transport::{albedo_truncated, simulate_albedo_mc, MeasurementSet, Provenance};
use avtomo_core::verify::{run_verify, VerifyLevel, VerifyOptions};
use avtomo_core::{reconstruct_measurements, Error};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Time-resolved boundary transport: simulation, reconstruction and self-checks.
#[derive(Parser)]
#[command(name = "avtomo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Worker threads (speed only; results do not depend on it).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize boundary traces and write traces.csv + meta.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Forward method: kernel order 0, 1, 2 or Monte Carlo.
        #[arg(long, value_parser = parse_order)]
        order: Option<ForwardMethod>,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct sigma and k0 from simulated or external traces.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding traces.csv and meta.json.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Accept data whose config hash or grids differ from the config.
        #[arg(long)]
        allow_mismatch: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run the self-check suite; exit code 3 when a check fails.
    Verify {
        #[arg(long, value_enum, default_value = "quick")]
        level: Level,
        /// Scales the closed forms under test (suite sensitivity check).
        #[arg(long, default_value_t = 1.0, hide = true)]
        perturb_closed_form: f64,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Quick,
    Full,
}

fn parse_order(s: &str) -> Result<ForwardMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Config(String),
    Verification,
    Mismatch(String),
    Other(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            Error::Mismatch(m) => Failure::Mismatch(m),
            other => Failure::Other(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Verification) => ExitCode::from(3),
        Err(Failure::Mismatch(m)) => {
            eprintln!("data mismatch: {m}");
            ExitCode::from(4)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn set_threads(n: Option<usize>) -> Result<(), Failure> {
    if let Some(n) = n {
        if n == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("thread pool")?;
    }
    Ok(())
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: Option<&ExperimentConfig>) -> PathBuf {
    common.out.clone().or_else(|| cfg.and_then(|c| c.output_dir.clone())).unwrap_or_else(|| PathBuf::from("out"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate { config, seed, order, common } => {
            set_threads(common.threads)?;
            let mut cfg = load(&config, seed)?;
            if let Some(o) = order {
                cfg.pipeline.order = o;
                cfg.validate()?;
            }
            let pulse = cfg.pulse()?;
            let acq = cfg.acquisition()?;
            let ms = match cfg.pipeline.order {
                ForwardMethod::Kernel(k) => albedo_truncated(&cfg.field, &pulse, k, &acq, &cfg.pipeline.synthesis)?,
                ForwardMethod::MonteCarlo => simulate_albedo_mc(&cfg.field, &pulse, &cfg.mc_config(), &acq)?,
            };
            let out = out_dir(&common, Some(&cfg));
            ms.write_dir(&out, &Provenance::new(cfg.hash()))?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Reconstruct { config, data, seed, allow_mismatch, common } => {
            set_threads(common.threads)?;
            let cfg = load(&config, seed)?;
            let hash = cfg.hash();
            let (ms, prov) = MeasurementSet::read_dir(&data).with_context(|| format!("reading {}", data.display()))?;
            if !allow_mismatch {
                if prov.config_hash != hash {
                    return Err(Failure::Mismatch(format!(
                        "data were produced with config hash {}, this config hashes to {hash} (use --allow-mismatch to override)",
                        prov.config_hash
                    )));
                }
                if ms.acquisition != cfg.acquisition()? {
                    return Err(Failure::Mismatch("data grids differ from the config grids".into()));
                }
            }
            let settings = cfg.recon_settings();
            let mut report = reconstruct_measurements(&ms, &cfg.known_optics(), &settings)?;
            if cfg.pipeline.score {
                report.score(&cfg.field, &settings);
            }
            let out = out_dir(&common, Some(&cfg));
            report.write_dir(&out, &Provenance::new(hash))?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Verify { level, perturb_closed_form, common } => {
            set_threads(common.threads)?;
            let level = match level {
                Level::Quick => VerifyLevel::Quick,
                Level::Full => VerifyLevel::Full,
            };
            let report = run_verify(&VerifyOptions { level, closed_form_scale: perturb_closed_form });
            for c in &report.checks {
                eprintln!(
                    "{} {}: measured {:.6e}, expected {:.6e}, tolerance {:.1e}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.measured,
                    c.expected,
                    c.tolerance
                );
            }
            let json = serde_json::to_string_pretty(&report).context("serializing report")?;
            match &common.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).context("creating output directory")?;
                    std::fs::write(dir.join("report.json"), json + "\n").context("writing report")?;
                }
                None => println!("{json}"),
            }
            if report.passed {
                Ok(())
            } else {
                Err(Failure::Verification)
            }
        }
    }
}
