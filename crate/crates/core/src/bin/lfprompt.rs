use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use lfprompt::blackbox::{make_synthetic_task, protocol, QueryMode, TaskConfig};
use lfprompt::experiment::{self, ExperimentConfig, TaskSpec};
use lfprompt::predictive::PredictiveTable;
use lfprompt::uqeval::{self, RiskFlags, Score};
use lfprompt::{Error, PosteriorEnsemble, Result};

#[derive(Parser)]
#[command(name = "lfprompt", version, about = "Posterior inference over black-box prompt parameters")]
struct Cli {
    /// JSON config file (experiment config; `task` and `serve` also accept a bare task config).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write per-generation / per-iteration diagnostics.
    #[arg(long, global = true)]
    trace: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Test,
    NearOod,
    FarOod,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task file (or print a summary of one).
    Task {
        /// Print split sizes and dimensions instead of the task file.
        #[arg(long)]
        inspect: bool,
    },
    /// Run one inference method and its evaluations.
    Tune,
    /// Build a predictive table from a saved posterior.
    Predict {
        #[arg(long)]
        posterior: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Score predictive tables against the task's test labels.
    Eval {
        /// Test-split predictive CSV.
        #[arg(long)]
        predictive: PathBuf,
        /// OOD predictive CSV; switches to OOD detection.
        #[arg(long)]
        ood: Option<PathBuf>,
    },
    /// Run several configs on one task and tabulate their metrics.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
    /// Oracle AURRRC lower bound for a set of flags.
    LowerBound {
        /// Comma-separated 0/1 flags (1 = bad).
        #[arg(long, conflicts_with_all = ["id", "ood"])]
        flags: Option<String>,
        #[arg(long)]
        id: Option<usize>,
        #[arg(long)]
        ood: Option<usize>,
    },
    /// Serve the task's built-in classifier over the NDJSON protocol.
    Serve {
        /// Listen on this TCP address instead of stdio.
        #[arg(long)]
        tcp: Option<String>,
        /// Offer only the labels mode.
        #[arg(long)]
        labels_only: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Display already folds in the wrapped cause.
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config("config", e.to_string()))
}

fn experiment_config(cli: &Cli, path: Option<&Path>) -> Result<ExperimentConfig> {
    let path = path.or(cli.config.as_deref()).ok_or_else(|| Error::config("config", "--config is required"))?;
    let mut value = read_json(path)?;
    if let Some(seed) = cli.seed {
        value["seed"] = json!(seed);
    }
    let mut cfg = ExperimentConfig::from_json(&value.to_string())?;
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    cfg.trace |= cli.trace;
    Ok(cfg)
}

/// Task config from a bare task config (where `--seed` sets the task seed)
/// or from an experiment config's synthetic task.
fn task_config(cli: &Cli) -> Result<TaskConfig> {
    let Some(path) = &cli.config else {
        return Ok(TaskConfig { seed: cli.seed.unwrap_or(0), ..TaskConfig::default() });
    };
    let value = read_json(path)?;
    let cfg = if value.get("task").is_some() {
        match experiment_config(cli, None)?.task {
            TaskSpec::Synthetic(t) => t,
            TaskSpec::External(_) => {
                return Err(Error::config("task", "an external task has no built-in classifier"));
            }
        }
    } else {
        let mut t: TaskConfig = serde_json::from_value(value).map_err(|e| Error::config("task", e.to_string()))?;
        if let Some(seed) = cli.seed {
            t.seed = seed;
        }
        t
    };
    cfg.validate()?;
    Ok(cfg)
}

fn output(cli: &Cli) -> Result<Box<dyn Write>> {
    Ok(match &cli.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Task { inspect } => {
            let task = make_synthetic_task(&task_config(&cli)?)?;
            let mut out = output(&cli)?;
            if *inspect {
                let summary = json!({
                    "d": task.projection.subspace_dim(),
                    "prompt_dim": task.projection.prompt_dim(),
                    "classes": task.classes(),
                    "train": task.train.len(),
                    "test": task.test.len(),
                    "near_ood": task.near_ood.len(),
                    "far_ood": task.far_ood.len(),
                });
                writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
            } else {
                serde_json::to_writer(&mut out, &task.to_file())?;
                writeln!(out)?;
            }
            out.flush()?;
        }
        Command::Tune => {
            let cfg = experiment_config(&cli, None)?;
            let report = experiment::run_experiment(&cfg)?;
            print!("{}", report.summary_json()?);
        }
        Command::Predict { posterior, split } => {
            let cfg = experiment_config(&cli, None)?;
            let task = experiment::resolve_task(&cfg.task)?;
            let sim = if cfg.method.likelihood_free() { task.simulator.labels_only() } else { task.simulator.clone() };
            let file = BufReader::new(File::open(posterior)?);
            let ensemble = PosteriorEnsemble::read_ndjson(file, provenance(cfg.method))?;
            let (inputs, id) = match split {
                Split::Test => (&task.test.inputs, 0),
                Split::NearOod => (&task.near_ood, 1),
                Split::FarOod => (&task.far_ood, 2),
            };
            let table = experiment::build_predictive(&cfg, &ensemble, &sim, &task.projection, inputs, id)?;
            let mut out = output(&cli)?;
            table.write_csv(&mut out)?;
            out.flush()?;
        }
        Command::Eval { predictive, ood } => {
            let cfg = experiment_config(&cli, None)?;
            let mode = cfg.predictive_mode();
            let table = read_table(predictive, mode)?;
            let summary = match ood {
                None => {
                    let labels = experiment::task_file(&cfg.task)?.test.labels;
                    let s = uqeval::summarize(&table, &labels)?;
                    if let Some(dir) = &cli.out {
                        fs::create_dir_all(dir)?;
                        for score in Score::ALL {
                            let rep = uqeval::selective_classification_eval(&table, &labels, score)?;
                            let mut f = BufWriter::new(File::create(dir.join(format!("curve_selective_{}.csv", score.name())))?);
                            rep.curve.write_csv(&mut f)?;
                            f.flush()?;
                        }
                    }
                    serde_json::to_value(s)?
                }
                Some(ood_path) => {
                    let ood_table = read_table(ood_path, mode)?;
                    let mut v = serde_json::Map::new();
                    for score in Score::ALL {
                        let rep = uqeval::ood_detection_eval(&table, &ood_table, score)?;
                        if let Some(dir) = &cli.out {
                            fs::create_dir_all(dir)?;
                            let mut f = BufWriter::new(File::create(dir.join(format!("curve_ood_{}.csv", score.name())))?);
                            rep.curve.write_csv(&mut f)?;
                            f.flush()?;
                        }
                        v.insert(format!("aurrrc_{}", score.name()), json!(rep.aurrrc));
                        v.insert("lower_bound".into(), json!(rep.lower_bound));
                    }
                    serde_json::Value::Object(v)
                }
            };
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Compare { configs } => {
            let cfgs = configs
                .iter()
                .map(|p| {
                    let mut c = experiment_config(&cli, Some(p))?;
                    c.out = None;
                    Ok(c)
                })
                .collect::<Result<Vec<_>>>()?;
            let table = experiment::compare_methods(&cfgs)?;
            if let Some(dir) = &cli.out {
                fs::create_dir_all(dir)?;
                table.write_csv(BufWriter::new(File::create(dir.join("comparison.csv"))?))?;
                fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&table)? + "\n")?;
            }
            let stdout = io::stdout();
            table.write_csv(stdout.lock())?;
        }
        Command::LowerBound { flags, id, ood } => {
            let bits: Vec<bool> = match (flags, id, ood) {
                (Some(f), _, _) => f
                    .split(',')
                    .map(|t| match t.trim() {
                        "1" | "true" => Ok(true),
                        "0" | "false" => Ok(false),
                        other => Err(Error::config("flags", format!("bad flag {other:?}"))),
                    })
                    .collect::<Result<_>>()?,
                (None, Some(i), Some(o)) => std::iter::repeat(false).take(*i).chain(std::iter::repeat(true).take(*o)).collect(),
                _ => {
                    return Err(Error::config("flags", "give --flags or both --id and --ood"))
                }
            };
            let flags = RiskFlags::new(bits)?;
            let curve = uqeval::risk_rejection_curve(&uqeval::oracle_uncertainties(&flags), &flags)?;
            if let Some(path) = &cli.out {
                curve.write_csv(BufWriter::new(File::create(path)?))?;
            }
            println!("{}", serde_json::to_string(&json!({"lower_bound": curve.aurrrc}))?);
        }
        Command::Serve { tcp, labels_only } => {
            let task = make_synthetic_task(&task_config(&cli)?)?;
            let modes = if *labels_only { vec![QueryMode::Labels] } else { vec![QueryMode::Logits, QueryMode::Labels] };
            match tcp {
                Some(addr) => {
                    let listener = TcpListener::bind(addr)?;
                    eprintln!("listening on {}", listener.local_addr()?);
                    protocol::serve_tcp(Arc::new(task.classifier), modes, listener)?;
                }
                None => {
                    let stdin = io::stdin();
                    let stdout = io::stdout();
                    protocol::serve(&task.classifier, &modes, stdin.lock(), stdout.lock())?;
                }
            }
        }
    }
    Ok(())
}

fn read_table(path: &Path, mode: QueryMode) -> Result<PredictiveTable> {
    PredictiveTable::read_csv(BufReader::new(File::open(path)?), mode, 0)
}

fn provenance(method: experiment::Method) -> lfprompt::Provenance {
    use experiment::Method::*;
    use lfprompt::Provenance as P;
    match method {
        PointCmaes => P::PointEstimate,
        Ensembles => P::Ensembles,
        Gfvi => P::VariationalInference,
        RejectionAbc => P::RejectionAbc,
        AbcSmc => P::AbcSmc,
    }
}
