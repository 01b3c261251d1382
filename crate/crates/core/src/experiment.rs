//! End-to-end runs: build or load a task, run one inference method, build
//! predictive tables, evaluate, and write a deterministic report.
//!
//! Config files are JSON:
//!
//! ```json
//! {
//!   "task": {"synthetic": {"d": 8, "seed": 3}},
//!   "method": "abc_smc",
//!   "smc": {"max_iterations": 10},
//!   "evaluations": ["calibration", "selective", "near_ood", "far_ood"],
//!   "seed": 7
//! }
//! ```
//!
//! `task` may instead be `{"external": {"endpoint": {...}, "data": "task.json"}}`
//! where `data` is a task file written by `lfprompt task`. Every method seed
//! is derived from the top-level `seed`; seeds inside `es`/`smc` are ignored.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::abc::{self, SmcConfig};
use crate::blackbox::{
    Dataset, Decode, Endpoint, ExternalSimulator, QueryMode, Simulator, TaskConfig, TaskFile,
};
use crate::error::{Error, Result};
use crate::estimators::{self, EsConfig, GfviConfig};
use crate::posterior::PosteriorEnsemble;
use crate::predictive::{self, PredictiveTable};
use crate::prompt_space::{PriorSpec, ProjectionSpec};
use crate::rng;
use crate::uqeval::{self, MetricSummary, RiskRejectionCurve, Score};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PointCmaes,
    Ensembles,
    Gfvi,
    RejectionAbc,
    AbcSmc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::PointCmaes => "point_cmaes",
            Method::Ensembles => "ensembles",
            Method::Gfvi => "gfvi",
            Method::RejectionAbc => "rejection_abc",
            Method::AbcSmc => "abc_smc",
        }
    }

    pub fn likelihood_free(self) -> bool {
        matches!(self, Method::RejectionAbc | Method::AbcSmc)
    }

    /// Posterior sample count used when the config does not set one.
    pub fn default_samples(self) -> usize {
        match self {
            Method::PointCmaes => 1,
            Method::Ensembles => estimators::DEFAULT_ENSEMBLE_SIZE,
            Method::Gfvi => GfviConfig::default().final_samples,
            Method::RejectionAbc | Method::AbcSmc => SmcConfig::default().particle_count,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluation {
    Calibration,
    Selective,
    NearOod,
    FarOod,
}

impl Evaluation {
    pub fn name(self) -> &'static str {
        match self {
            Evaluation::Calibration => "calibration",
            Evaluation::Selective => "selective",
            Evaluation::NearOod => "near_ood",
            Evaluation::FarOod => "far_ood",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictiveMode {
    /// Logits for likelihood methods, labels for ABC methods.
    #[default]
    Auto,
    Logits,
    Labels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalTask {
    pub endpoint: Endpoint,
    /// Task file providing projection, prior and data splits.
    pub data: PathBuf,
    #[serde(default)]
    pub timeout_secs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Synthetic(TaskConfig),
    External(ExternalTask),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RejectionConfig {
    /// Defaults to the error rate of one prior draw.
    pub epsilon: Option<f64>,
    pub max_draws: u64,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        Self { epsilon: None, max_draws: 1_000_000 }
    }
}

fn default_evaluations() -> Vec<Evaluation> {
    vec![Evaluation::Calibration, Evaluation::Selective, Evaluation::NearOod, Evaluation::FarOod]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub method: Method,
    /// Posterior sample count `S`: ensemble members, final variational
    /// draws, or ABC particles.
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub es: EsConfig,
    #[serde(default)]
    pub gfvi: GfviConfig,
    #[serde(default)]
    pub smc: SmcConfig,
    #[serde(default)]
    pub rejection: RejectionConfig,
    #[serde(default = "default_evaluations")]
    pub evaluations: Vec<Evaluation>,
    #[serde(default)]
    pub predictive: PredictiveMode,
    #[serde(default)]
    pub decode: Decode,
    #[serde(default)]
    pub budget_limit: Option<u64>,
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub trace: bool,
}

impl ExperimentConfig {
    pub fn new(task: TaskSpec, method: Method, seed: u64) -> Self {
        Self {
            task,
            method,
            samples: None,
            es: EsConfig::default(),
            gfvi: GfviConfig::default(),
            smc: SmcConfig::default(),
            rejection: RejectionConfig::default(),
            evaluations: default_evaluations(),
            predictive: PredictiveMode::Auto,
            decode: Decode::Argmax,
            budget_limit: None,
            seed,
            out: None,
            trace: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn sample_count(&self) -> usize {
        self.samples.unwrap_or_else(|| self.method.default_samples())
    }

    pub fn predictive_mode(&self) -> QueryMode {
        match (self.predictive, self.method.likelihood_free()) {
            (PredictiveMode::Logits, _) => QueryMode::Logits,
            (PredictiveMode::Labels, _) | (PredictiveMode::Auto, true) => QueryMode::Labels,
            (PredictiveMode::Auto, false) => QueryMode::Logits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let TaskSpec::Synthetic(t) = &self.task {
            t.validate()?;
        }
        if let Some(s) = self.samples {
            if s == 0 {
                return Err(Error::config("samples", "must be positive"));
            }
            if self.method == Method::PointCmaes && s != 1 {
                return Err(Error::config("samples", "point_cmaes always returns one sample"));
            }
        }
        if self.es.population_size < 2 {
            return Err(Error::config("es.population_size", "must be at least 2"));
        }
        if self.es.max_generations == 0 {
            return Err(Error::config("es.max_generations", "must be positive"));
        }
        if let Some(s) = self.es.sigma0 {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::config("es.sigma0", "must be positive"));
            }
        }
        if self.gfvi.mc_samples == 0 {
            return Err(Error::config("gfvi.mc_samples", "must be positive"));
        }
        if self.gfvi.final_samples == 0 {
            return Err(Error::config("gfvi.final_samples", "must be positive"));
        }
        if !(self.gfvi.lambda_sigma0.is_finite() && self.gfvi.lambda_sigma0 > 0.0) {
            return Err(Error::config("gfvi.lambda_sigma0", "must be positive"));
        }
        self.smc.validate()?;
        if let Some(e) = self.rejection.epsilon {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::config("rejection.epsilon", "must lie in [0, 1]"));
            }
        }
        if self.rejection.max_draws == 0 {
            return Err(Error::config("rejection.max_draws", "must be positive"));
        }
        if self.method.likelihood_free() && self.predictive == PredictiveMode::Logits {
            return Err(Error::config(
                "predictive",
                format!("{} only observes labels; logits predictive tables are unavailable", self.method.name()),
            ));
        }
        if self.evaluations.is_empty() {
            return Err(Error::config("evaluations", "must list at least one evaluation"));
        }
        Ok(())
    }
}

/// Everything a method needs besides its config.
pub struct ResolvedTask {
    pub simulator: Simulator,
    pub projection: ProjectionSpec,
    pub prior: PriorSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub near_ood: Vec<Vec<f64>>,
    pub far_ood: Vec<Vec<f64>>,
}

pub fn read_task_file(path: &Path) -> Result<TaskFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config("task.external.data", format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config("task.external.data", e.to_string()))
}

/// Data splits and projection of a task, without connecting to its simulator.
pub fn task_file(spec: &TaskSpec) -> Result<TaskFile> {
    match spec {
        TaskSpec::Synthetic(cfg) => Ok(crate::blackbox::make_synthetic_task(cfg)?.to_file()),
        TaskSpec::External(ext) => read_task_file(&ext.data),
    }
}

pub fn resolve_task(spec: &TaskSpec) -> Result<ResolvedTask> {
    let (simulator, file) = match spec {
        TaskSpec::Synthetic(cfg) => {
            let task = crate::blackbox::make_synthetic_task(cfg)?;
            (task.simulator(), task.to_file())
        }
        TaskSpec::External(ext) => {
            let file = read_task_file(&ext.data)?;
            let timeout = ext.timeout_secs.map_or(ExternalSimulator::DEFAULT_TIMEOUT, Duration::from_secs_f64);
            (Simulator::new(ExternalSimulator::connect(&ext.endpoint, timeout)?), file)
        }
    };
    Ok(ResolvedTask {
        simulator,
        projection: ProjectionSpec::from_artifact(&file.projection)?,
        prior: file.config.prior()?,
        train: file.train,
        test: file.test,
        near_ood: file.near_ood,
        far_ood: file.far_ood,
    })
}

const STREAM_METHOD: u64 = 10;
const STREAM_MEMBERS: u64 = 11;
const STREAM_PREDICTIVE: u64 = 12;
const STREAM_REJECTION: u64 = 13;

/// Runs the configured method on a resolved task.
pub fn run_method(cfg: &ExperimentConfig, task: &ResolvedTask, sim: &Simulator) -> Result<PosteriorEnsemble> {
    let method_seed = rng::stream(cfg.seed, STREAM_METHOD).next_u64();
    let es = EsConfig { seed: method_seed, ..cfg.es.clone() };
    let s = cfg.sample_count();
    let (proj, prior, train) = (&task.projection, &task.prior, &task.train);
    let result = match cfg.method {
        Method::PointCmaes => estimators::point_estimate(sim, proj, train, prior, &es),
        Method::Ensembles => {
            let mut r = rng::stream(cfg.seed, STREAM_MEMBERS);
            let seeds: Vec<u64> = (0..s).map(|_| r.next_u64()).collect();
            estimators::ensemble_tune(sim, proj, train, prior, &es, &seeds)
        }
        Method::Gfvi => {
            let g = GfviConfig { final_samples: s, ..cfg.gfvi.clone() };
            estimators::gfvi_tune(sim, proj, train, prior, &es, &g)
        }
        Method::RejectionAbc => {
            let mut r = rng::stream(cfg.seed, STREAM_REJECTION);
            let eps = match cfg.rejection.epsilon {
                Some(e) => e,
                None => abc::initial_tolerance(sim, proj, prior, train, &mut r)?,
            };
            abc::rejection_abc(sim, proj, prior, train, eps, s, cfg.rejection.max_draws, &mut r)
        }
        Method::AbcSmc => {
            let smc = SmcConfig { particle_count: s, seed: method_seed, ..cfg.smc.clone() };
            abc::abc_smc(sim, proj, prior, train, &smc)
        }
    };
    result.map_err(|e| match e {
        Error::Method { .. } => e,
        other => other.in_method(cfg.method.name()),
    })
}

pub fn build_predictive(
    cfg: &ExperimentConfig,
    ensemble: &PosteriorEnsemble,
    sim: &Simulator,
    projection: &ProjectionSpec,
    inputs: &[Vec<f64>],
    split: u64,
) -> Result<PredictiveTable> {
    match cfg.predictive_mode() {
        QueryMode::Logits => predictive::predictive_from_logits(ensemble, sim, projection, inputs),
        QueryMode::Labels => {
            let mut r = rng::stream(cfg.seed, (STREAM_PREDICTIVE << 8) | split);
            predictive::predictive_from_labels(ensemble, sim, projection, inputs, cfg.decode, &mut r)
        }
    }
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub summary: Value,
    pub ensemble: PosteriorEnsemble,
    /// Test-split metrics, always computed.
    pub test_metrics: MetricSummary,
    /// `(evaluation, score) -> curve` for selective and OOD evaluations.
    pub curves: BTreeMap<(String, String), RiskRejectionCurve>,
    pub trace: bool,
}

impl ExperimentReport {
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)? + "\n")
    }

    /// Writes `summary.json`, `posterior.ndjson`, one
    /// `curve_<evaluation>_<score>.csv` per curve and, when tracing,
    /// `trace.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.json"), self.summary_json()?)?;
        let mut post = BufWriter::new(File::create(dir.join("posterior.ndjson"))?);
        self.ensemble.write_ndjson(&mut post)?;
        post.flush()?;
        for ((task, score), curve) in &self.curves {
            let mut f = BufWriter::new(File::create(dir.join(format!("curve_{task}_{score}.csv")))?);
            curve.write_csv(&mut f)?;
            f.flush()?;
        }
        if self.trace {
            let mut f = BufWriter::new(File::create(dir.join("trace.csv"))?);
            self.ensemble.trace.write_csv(&mut f)?;
            f.flush()?;
        }
        Ok(())
    }
}

fn per_score(reports: &[(Score, f64, f64)]) -> Value {
    let mut m = serde_json::Map::new();
    for (score, aurrrc, lb) in reports {
        m.insert(score.name().into(), json!({"aurrrc": aurrrc, "lower_bound": lb}));
    }
    Value::Object(m)
}

/// Builds the task, runs the method, evaluates, and writes to `cfg.out` if set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let task = resolve_task(&cfg.task)?;
    let base = task.simulator.clone().with_budget_limit(cfg.budget_limit);
    let sim = if cfg.method.likelihood_free() { base.labels_only() } else { base };

    let ensemble = run_method(cfg, &task, &sim)?;
    let proj = &task.projection;
    let test = build_predictive(cfg, &ensemble, &sim, proj, &task.test.inputs, 0)?;
    let test_metrics = uqeval::summarize(&test, &task.test.labels)?;

    let mut evaluations = serde_json::Map::new();
    let mut curves = BTreeMap::new();
    let mut evals = cfg.evaluations.clone();
    evals.sort();
    evals.dedup();
    for ev in evals {
        let value = match ev {
            Evaluation::Calibration => json!({
                "accuracy": test_metrics.accuracy,
                "ece": test_metrics.ece,
                "bins": uqeval::DEFAULT_ECE_BINS,
            }),
            Evaluation::Selective => {
                let mut rows = Vec::new();
                for score in Score::ALL {
                    let rep = uqeval::selective_classification_eval(&test, &task.test.labels, score)?;
                    rows.push((score, rep.aurrrc, rep.lower_bound));
                    curves.insert((ev.name().to_string(), score.name().to_string()), rep.curve);
                }
                let mut v = per_score(&rows);
                v["accuracy"] = json!(test_metrics.accuracy);
                v
            }
            Evaluation::NearOod | Evaluation::FarOod => {
                let (inputs, split) = if ev == Evaluation::NearOod {
                    (&task.near_ood, 1)
                } else {
                    (&task.far_ood, 2)
                };
                if inputs.is_empty() {
                    return Err(Error::config("evaluations", format!("{} needs OOD inputs", ev.name())));
                }
                let ood = build_predictive(cfg, &ensemble, &sim, proj, inputs, split)?;
                let mut rows = Vec::new();
                for score in Score::ALL {
                    let rep = uqeval::ood_detection_eval(&test, &ood, score)?;
                    rows.push((score, rep.aurrrc, rep.lower_bound));
                    curves.insert((ev.name().to_string(), score.name().to_string()), rep.curve);
                }
                per_score(&rows)
            }
        };
        evaluations.insert(ev.name().into(), value);
    }

    let budget = sim.budget();
    let summary = json!({
        "method": cfg.method.name(),
        "seed": cfg.seed,
        "samples": ensemble.len(),
        "predictive": match cfg.predictive_mode() { QueryMode::Logits => "logits", QueryMode::Labels => "labels" },
        "simulator_calls": budget.used(),
        "logits_calls": budget.logits_used(),
        "labels_calls": budget.labels_used(),
        "test": test_metrics,
        "evaluations": Value::Object(evaluations),
        "diagnostics": ensemble.diagnostics,
    });
    let report = ExperimentReport {
        summary,
        ensemble,
        test_metrics,
        curves,
        trace: cfg.trace,
    };
    if let Some(out) = &cfg.out {
        report.write(out)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub accuracy: f64,
    pub ece: f64,
    pub aurrrc_entropy: f64,
    pub aurrrc_maxp: f64,
    pub lower_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "method,accuracy,ece,aurrrc_entropy,aurrrc_maxp,lower_bound")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.method, r.accuracy, r.ece, r.aurrrc_entropy, r.aurrrc_maxp, r.lower_bound
            )?;
        }
        Ok(())
    }
}

/// Runs each config in order on the shared task; test-split selective
/// metrics per method.
pub fn compare_methods(configs: &[ExperimentConfig]) -> Result<ComparisonTable> {
    let first = configs
        .first()
        .ok_or_else(|| Error::config("configs", "compare needs at least one config"))?;
    for (i, c) in configs.iter().enumerate() {
        if c.task != first.task {
            return Err(Error::config(format!("configs[{i}].task"), "all compared configs must share one task"));
        }
        if c.seed != first.seed {
            return Err(Error::config(format!("configs[{i}].seed"), "all compared configs must share one seed"));
        }
    }
    let mut rows = Vec::with_capacity(configs.len());
    for c in configs {
        let m = run_experiment(c)?.test_metrics;
        rows.push(ComparisonRow {
            method: c.method.name().to_string(),
            accuracy: m.accuracy,
            ece: m.ece,
            aurrrc_entropy: m.aurrrc_entropy,
            aurrrc_maxp: m.aurrrc_maxp,
            lower_bound: m.lower_bound,
        });
    }
    Ok(ComparisonTable { rows })
}
