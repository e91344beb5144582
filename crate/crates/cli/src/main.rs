use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dmcanc::compensation::{load_sets, save_sets};
use dmcanc::harness::{
    compare, expansion_diagnostic, run_averaged, sweep, write_filters, write_mse_compare_csv, write_mse_csv,
    write_spectra_csv, write_sweep_csv, Algorithm, ExperimentConfig, Setup, SweepAxis,
};
use dmcanc::network::Schedule;
use dmcanc::plant::Plant;
use dmcanc::{Error, Result};

#[derive(Parser)]
#[command(name = "dmcanc", version, about = "Distributed multichannel ANC simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply to absent fields.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Start from a built-in profile instead of the full-size defaults.
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    /// Output directory, overriding `outputs` in the config.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// Override the number of Monte Carlo runs.
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Override the run length in samples.
    #[arg(long, global = true)]
    duration: Option<usize>,
    /// Override the communication policy, e.g. `delay:500`.
    #[arg(long, global = true)]
    comm: Option<String>,
    /// Load the plant from a directory written by `paths`.
    #[arg(long, global = true)]
    paths: Option<PathBuf>,
    /// Load compensation filters from a directory written by `compensate`.
    #[arg(long, global = true)]
    comp: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Full,
    Ci,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Delay,
    Rate,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Synthesize the plant and write its coefficients.
    Paths,
    /// Fit compensation filters and write them with a residual report.
    Compensate,
    /// Run the configured algorithm: `mse.csv` and `weights/`.
    Run {
        #[arg(long, value_parser = parse_algorithm)]
        algorithm: Option<Algorithm>,
    },
    /// Centralized against distributed: `mse_compare.csv` and `spectra.csv`.
    Compare,
    /// Final MSE over a list of delays or exchange rates: `sweep.csv`.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated points. Delays default to 0,500,1500,3000 samples;
        /// rates to fs, fs/100 and fs/1000 events per second.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Exchange at a fixed period instead of at random instants.
        #[arg(long)]
        periodic: bool,
    },
    /// Compare measured residuals with their expansion in the local filters:
    /// `check.csv`.
    Check {
        /// Adaptation samples before the filters are frozen.
        #[arg(long, default_value_t = 20_000)]
        adapt: usize,
        /// Recorded samples with frozen filters.
        #[arg(long, default_value_t = 4000)]
        window: usize,
    },
}

fn parse_algorithm(s: &str) -> std::result::Result<Algorithm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match (&c.config, c.profile) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(Profile::Ci)) => ExperimentConfig::ci(),
        (None, _) => ExperimentConfig::full(),
    };
    if let Some(out) = &c.out {
        cfg.outputs = out.clone();
    }
    if let Some(r) = c.runs {
        cfg.n_runs = r;
    }
    if let Some(d) = c.duration {
        cfg.duration = d;
    }
    if let Some(comm) = &c.comm {
        cfg.comm = comm.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn setup(c: &Common, cfg: &ExperimentConfig) -> Result<Setup> {
    let needs_comp = cfg.algorithm == Algorithm::Dmcanc;
    match &c.paths {
        None => {
            let mut s = Setup::build(cfg)?;
            if let Some(dir) = &c.comp {
                s.set_compensation(load_sets(dir)?)?;
            }
            Ok(s)
        }
        Some(dir) => {
            let mut s = Setup::with_plant(cfg, Plant::load(dir)?)?;
            match &c.comp {
                Some(comp) => s.set_compensation(load_sets(comp)?)?,
                None if needs_comp => s.compensate(cfg, None)?,
                None => {}
            }
            Ok(s)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| dmcanc::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| dmcanc::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let out = cfg.outputs.clone();
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::Paths => {
            let s = setup(
                &cli.common,
                &ExperimentConfig {
                    algorithm: Algorithm::Centralized,
                    ..cfg
                },
            )?;
            let dir = out.join("paths");
            s.plant.save(&dir)?;
            println!("wrote {} nodes to {}", s.plant.n_nodes(), dir.display());
        }
        Command::Compensate => {
            cfg.algorithm = Algorithm::Dmcanc;
            let s = setup(&cli.common, &cfg)?;
            let dir = out.join("compensation");
            save_sets(&dir, &s.compensation)?;
            let mut csv = String::from("k,m,residual_db,converged\n");
            println!("pair   residual_db  converged");
            for set in &s.compensation {
                for (m, res) in set.residuals() {
                    let k = set.owner();
                    let conv = s.fit_reports.get(&(k, *m)).is_none_or(|r| r.converged);
                    println!("{:>2},{:<2}  {res:>11.2}  {conv}", k + 1, m + 1);
                    csv.push_str(&format!("{},{},{res:.6},{conv}\n", k + 1, m + 1));
                }
            }
            write_text(&dir.join("residuals.csv"), &csv)?;
        }
        Command::Run { algorithm } => {
            if let Some(a) = algorithm {
                cfg.algorithm = a;
            }
            let s = setup(&cli.common, &cfg)?;
            let r = run_averaged(&cfg, &s)?;
            write_mse_csv(&out.join("mse.csv"), &r.trace)?;
            write_filters(&out.join("weights"), "w", &r.global_filters)?;
            println!(
                "{}: {} runs, disturbance {:.2} dB, final MSE {:.2} dB, reduction {:.2} dB",
                r.algorithm,
                r.trace.runs,
                r.trace.disturbance_db(),
                r.trace.final_mean_db(),
                r.trace.reduction_db()
            );
            if let Some(stale) = r.mean_staleness {
                println!("mean staleness {stale:.1} samples");
            }
            if !r.diverged_runs.is_empty() {
                return Err(Error::Divergence {
                    what: format!("{} of {} runs", r.diverged_runs.len(), cfg.n_runs),
                    sample: r.diverged_runs[0].1,
                    detail: "see mse.csv for the completed runs".into(),
                });
            }
        }
        Command::Compare => {
            cfg.algorithm = Algorithm::Dmcanc;
            let s = setup(&cli.common, &cfg)?;
            let c = compare(&cfg, &s)?;
            write_mse_compare_csv(&out.join("mse_compare.csv"), &c)?;
            write_spectra_csv(&out.join("spectra.csv"), &c.spectra)?;
            println!(
                "final MSE: centralized {:.2} dB, dmcanc {:.2} dB, gap {:.2} dB",
                c.centralized.trace.final_mean_db(),
                c.dmcanc.trace.final_mean_db(),
                c.final_gap_db()
            );
            let dev: Vec<String> = c.spectra.deviation_db.iter().map(|d| format!("{d:.2}")).collect();
            println!("in-band spectral deviation per node (dB): {}", dev.join(", "));
        }
        Command::Sweep { axis, values, periodic } => {
            cfg.algorithm = Algorithm::Dmcanc;
            let s = setup(&cli.common, &cfg)?;
            let axis = match axis {
                Axis::Delay => {
                    let v = if values.is_empty() {
                        vec![0, 500, 1500, 3000]
                    } else {
                        values.iter().map(|&v| v as usize).collect()
                    };
                    SweepAxis::Delay(v)
                }
                Axis::Rate => SweepAxis::Rate {
                    rates: if values.is_empty() {
                        vec![cfg.fs, cfg.fs / 100.0, cfg.fs / 1000.0]
                    } else {
                        values
                    },
                    schedule: if periodic { Schedule::Periodic } else { Schedule::Bernoulli },
                },
            };
            let rows = sweep(&cfg, &s, &axis)?;
            write_sweep_csv(&out.join("sweep.csv"), &rows)?;
            for r in &rows {
                println!("{:<24} final {:>8.2} dB  converged {}", r.comm, r.final_mean_db(), r.converged());
            }
        }
        Command::Check { adapt, window } => {
            cfg.algorithm = Algorithm::Dmcanc;
            let s = setup(&cli.common, &cfg)?;
            let dev = expansion_diagnostic(&cfg, &s, adapt, window)?;
            let mut csv = String::from("node,max_deviation\n");
            for (k, d) in dev.iter().enumerate() {
                println!("node {}: max deviation {d:.3e}", k + 1);
                csv.push_str(&format!("{},{d:.6e}\n", k + 1));
            }
            write_text(&out.join("check.csv"), &csv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                _ if e.is_divergence() => 3,
                Error::Config(_) | Error::Parse { .. } | Error::InvalidArgument(_) => 2,
                _ => 1,
            })
        }
    }
}
