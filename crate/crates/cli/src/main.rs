//! `gazelab`: run, compare and export gaze-guided RLHF experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gazelab_core::experiment::{self, ExperimentConfig};
use gazelab_core::gaze::{pos_gaze_report, report_csv, GazeTable};
use gazelab_core::synthenv::{make_prompt_set, ResponseSampler, TaskSpec, UniformSampler};

#[derive(Parser)]
#[command(name = "gazelab", version, about = "Gaze-guided reward shaping for RLHF at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed of an experiment.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Validate and print the resolved plan without training.
        #[arg(long)]
        dry_run: bool,
        /// Override a config field, e.g. `--set ppo.lr=1e-4`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output root; the run lands in `<out>/<name>`.
        #[arg(long, env = "GAZELAB_OUT")]
        out: Option<PathBuf>,
    },
    /// Merge the reports of finished runs, with speedups against the sparse run.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the merged report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write `<metric>.csv` curve files for plotting.
    ExportCurves {
        run: PathBuf,
        /// Min-max normalise each curve.
        #[arg(long)]
        normalize: bool,
        /// Defaults to `<run>/curves`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean word-level reading time per token class over a noise-free corpus.
    GazeReport {
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long)]
        gaze_table: Option<PathBuf>,
        /// Token-id sequences, one per line. Sampled from the task when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a config file and report every problem.
    ValidateConfig {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    let base = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(base.with_overrides(overrides)?)
}

fn read_corpus(path: &Path) -> anyhow::Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .with_context(|| format!("{}:{}: expected token ids", path.display(), i + 1))
        })
        .collect()
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            dry_run,
            overrides,
            out,
        } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let res = cfg.resolve()?;
            if dry_run {
                print!("{}", experiment::describe_plan(&res));
                return Ok(());
            }
            let root = out
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("runs"));
            let summary = experiment::run_experiment(&res, &root)?;
            match &summary.report {
                Some(r) => print!("{}", r.to_table()),
                None => println!("single seed: no convergence report"),
            }
            println!("artifacts in {}", summary.dir.display());
        }
        Command::Compare { runs, csv } => {
            let report = experiment::compare_runs(&runs)?;
            print!("{}", report.to_table());
            if let Some(p) = csv {
                fs::write(&p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::ExportCurves { run, normalize, out } => {
            let files = experiment::export_curves(&run, normalize)?;
            let dir = out.unwrap_or_else(|| run.join("curves"));
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (metric, csv) in files {
                let p = dir.join(format!("{metric}.csv"));
                fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?;
                println!("{}", p.display());
            }
        }
        Command::GazeReport {
            task,
            gaze_table,
            corpus,
            samples,
            seed,
        } => {
            let spec = match task {
                Some(p) => TaskSpec::load(&p)?,
                None => TaskSpec::default(),
            };
            let table = match gaze_table {
                Some(p) => GazeTable::load(&p)?,
                None => GazeTable::default(),
            };
            let corpus = match corpus {
                Some(p) => read_corpus(&p)?,
                None => {
                    if samples == 0 {
                        bail!("--samples must be >= 1");
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let sampler = UniformSampler::new(&spec);
                    make_prompt_set(&spec, samples, &mut rng)?
                        .iter()
                        .map(|p| Ok([&p[1..p.len() - 1], &sampler.sample(p, &mut rng)?[..]].concat()))
                        .collect::<anyhow::Result<_>>()?
                }
            };
            let report = pos_gaze_report(&corpus, &spec.class_map(), &table)?;
            print!("{}", report_csv(&report));
        }
        Command::ValidateConfig { config, overrides } => {
            let cfg = load_config(Some(&config), &overrides)?;
            cfg.resolve()?;
            println!("{}: ok", config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
