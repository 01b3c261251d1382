//! Inference when class probabilities are observable: CMA-ES point
//! estimates, ensembles of independent CMA-ES runs, and gradient-free
//! variational inference over a diagonal Gaussian.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blackbox::{Dataset, Simulator};
use crate::cmaes::{self, Candidate, MinimizeOptions};
use crate::error::{check_len, Error, Result};
use crate::posterior::{PosteriorEnsemble, Provenance, Trace};
use crate::prompt_space::{PriorSpec, ProjectionSpec};
use crate::rng;

/// Probabilities are floored here before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

const INIT_STREAM: u64 = 1;
const ELBO_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// CMA-ES budget and initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsConfig {
    pub population_size: usize,
    pub max_generations: usize,
    /// Base step size in z-space; defaults to the prior standard deviation.
    pub sigma0: Option<f64>,
    /// Draw the initial mean from the prior and scale the step size by a
    /// factor in `[0.5, 1.5)`, both from `seed`. Otherwise start at the
    /// origin with exactly the base step.
    pub randomize_init: bool,
    pub seed: u64,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            population_size: cmaes::DEFAULT_POPULATION,
            max_generations: cmaes::DEFAULT_GENERATIONS,
            sigma0: None,
            randomize_init: true,
            seed: 0,
        }
    }
}

impl EsConfig {
    fn initial_point(&self, prior: &PriorSpec) -> (Vec<f64>, f64) {
        let base = self.sigma0.unwrap_or(prior.sigma());
        if self.randomize_init {
            let mut r = rng::stream(self.seed, INIT_STREAM);
            let mean0 = prior.draw(&mut r);
            let scale: f64 = r.gen_range(0.5..1.5);
            (mean0, base * scale)
        } else {
            (vec![0.0; prior.dim()], base)
        }
    }
}

/// `−Σ_i log p(y_i | x_i; z)`.
pub fn negative_log_likelihood(
    sim: &Simulator,
    projection: &ProjectionSpec,
    z: &[f64],
    dataset: &Dataset,
) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let rows = sim.query_logits(projection, z, &dataset.inputs)?;
    Ok(rows
        .iter()
        .zip(&dataset.labels)
        .map(|(row, y)| -row[*y as usize].max(PROBABILITY_FLOOR).ln())
        .sum())
}

fn nll_batch(
    sim: &Simulator,
    projection: &ProjectionSpec,
    dataset: &Dataset,
    batch: &[Candidate],
) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|c| negative_log_likelihood(sim, projection, &c.x, dataset))
        .collect()
}

struct PointRun {
    best_x: Vec<f64>,
    best_loss: f64,
    trace: Vec<cmaes::GenerationRecord>,
    evaluations: usize,
}

fn run_point(
    sim: &Simulator,
    projection: &ProjectionSpec,
    dataset: &Dataset,
    prior: &PriorSpec,
    es: &EsConfig,
) -> Result<PointRun> {
    check_len("prior dimension", projection.subspace_dim(), prior.dim())?;
    let (mean0, sigma0) = es.initial_point(prior);
    let opts = MinimizeOptions {
        mean0,
        sigma0,
        population_size: es.population_size,
        max_generations: es.max_generations,
        seed: es.seed,
    };
    let r = cmaes::minimize_batch(&opts, |_, batch| nll_batch(sim, projection, dataset, batch))?;
    Ok(PointRun {
        best_x: r.best_x,
        best_loss: r.best_loss,
        trace: r.trace,
        evaluations: r.evaluations,
    })
}

/// CMA-ES minimizer of the NLL, as a one-sample ensemble.
pub fn point_estimate(
    sim: &Simulator,
    projection: &ProjectionSpec,
    dataset: &Dataset,
    prior: &PriorSpec,
    es: &EsConfig,
) -> Result<PosteriorEnsemble> {
    let run = run_point(sim, projection, dataset, prior, es)?;
    let mut trace = Trace::new(&["generation", "best_loss", "sigma"]);
    for g in &run.trace {
        trace.push(vec![g.generation as f64, g.best_loss, g.sigma]);
    }
    let mut ens = PosteriorEnsemble::new(vec![run.best_x], vec![1.0], Provenance::PointEstimate)?
        .with_diagnostic("final_loss", run.best_loss)
        .with_diagnostic("evaluations", run.evaluations as f64);
    ens.trace = trace;
    Ok(ens)
}

/// `S` independent CMA-ES runs, one per seed, weighted uniformly.
pub fn ensemble_tune(
    sim: &Simulator,
    projection: &ProjectionSpec,
    dataset: &Dataset,
    prior: &PriorSpec,
    es: &EsConfig,
    seeds: &[u64],
) -> Result<PosteriorEnsemble> {
    if seeds.is_empty() {
        return Err(Error::InvalidInput("ensemble needs at least one seed".into()));
    }
    let mut trace = Trace::new(&["member", "generation", "best_loss", "sigma"]);
    let mut samples = Vec::with_capacity(seeds.len());
    let mut losses = Vec::with_capacity(seeds.len());
    let mut evaluations = 0;
    for (member, seed) in seeds.iter().enumerate() {
        let cfg = EsConfig {
            seed: *seed,
            ..es.clone()
        };
        let run = run_point(sim, projection, dataset, prior, &cfg)?;
        for g in &run.trace {
            trace.push(vec![member as f64, g.generation as f64, g.best_loss, g.sigma]);
        }
        samples.push(run.best_x);
        losses.push(run.best_loss);
        evaluations += run.evaluations;
    }
    let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let min_loss = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut ens = PosteriorEnsemble::uniform(samples, Provenance::Ensembles)?
        .with_diagnostic("final_loss_mean", mean_loss)
        .with_diagnostic("final_loss_min", min_loss)
        .with_diagnostic("evaluations", evaluations as f64);
    ens.trace = trace;
    Ok(ens)
}

/// Default ensemble size.
pub const DEFAULT_ENSEMBLE_SIZE: usize = 10;

/// Mean and log diagonal variance of `q(z) = N(mu, diag(exp(log_alpha)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub mu: Vec<f64>,
    pub log_alpha: Vec<f64>,
}

impl VariationalParams {
    pub fn new(mu: Vec<f64>, log_alpha: Vec<f64>) -> Result<Self> {
        check_len("log_alpha", mu.len(), log_alpha.len())?;
        let p = Self { mu, log_alpha };
        if p.alpha().iter().any(|a| !(a.is_finite() && *a > 0.0)) || p.mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput(format!("variational parameters out of range: {p:?}")));
        }
        Ok(p)
    }

    /// `q = p`.
    pub fn at_prior(prior: &PriorSpec) -> Self {
        Self {
            mu: vec![0.0; prior.dim()],
            log_alpha: vec![2.0 * prior.sigma().ln(); prior.dim()],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.log_alpha.iter().map(|l| l.exp()).collect()
    }

    pub fn draw<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_alpha)
            .map(|(m, la)| {
                let e: f64 = StandardNormal.sample(rng);
                m + (0.5 * la).exp() * e
            })
            .collect()
    }
}

/// Closed-form `KL(q || p)` for a diagonal Gaussian against the isotropic prior.
pub fn kl_diag_gaussian_to_prior(params: &VariationalParams, prior: &PriorSpec) -> Result<f64> {
    check_len("variational dimension", prior.dim(), params.dim())?;
    let var = prior.sigma() * prior.sigma();
    let ln_var = var.ln();
    Ok(0.5
        * params
            .mu
            .iter()
            .zip(&params.log_alpha)
            .map(|(m, la)| la.exp() / var + m * m / var - 1.0 + ln_var - la)
            .sum::<f64>())
}

/// Monte-Carlo ELBO: mean log-likelihood over `mc_samples` draws from `q`, minus the KL.
pub fn elbo_estimate<R: RngCore + ?Sized>(
    params: &VariationalParams,
    sim: &Simulator,
    projection: &ProjectionSpec,
    dataset: &Dataset,
    prior: &PriorSpec,
    mc_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if mc_samples == 0 {
        return Err(Error::InvalidInput("mc_samples must be positive".into()));
    }
    let kl = kl_diag_gaussian_to_prior(params, prior)?;
    let mut loglik = 0.0;
    for _ in 0..mc_samples {
        let z = params.draw(rng);
        loglik -= negative_log_likelihood(sim, projection, &z, dataset)?;
    }
    Ok(loglik / mc_samples as f64 - kl)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GfviConfig {
    /// Draws per ELBO estimate.
    pub mc_samples: usize,
    /// Draws from the final `q` returned as the ensemble.
    pub final_samples: usize,
    /// CMA-ES step in the normalized `(mu / sigma, log_alpha - 2 ln sigma)` coordinates.
    pub lambda_sigma0: f64,
}

impl Default for GfviConfig {
    fn default() -> Self {
        Self {
            mc_samples: 10,
            final_samples: 100,
            lambda_sigma0: 0.5,
        }
    }
}

/// Maps normalized search coordinates to variational parameters.
fn decode_lambda(u: &[f64], prior: &PriorSpec) -> VariationalParams {
    let d = prior.dim();
    let s = prior.sigma();
    let base = 2.0 * s.ln();
    VariationalParams {
        mu: u[..d].iter().map(|v| s * v).collect(),
        log_alpha: u[d..].iter().map(|v| base + v).collect(),
    }
}

/// CMA-ES over `(mu, log alpha)` maximizing the ELBO; returns draws from the
/// best `q` ever evaluated.
pub fn gfvi_tune(
    sim: &Simulator,
    projection: &ProjectionSpec,
    dataset: &Dataset,
    prior: &PriorSpec,
    es: &EsConfig,
    cfg: &GfviConfig,
) -> Result<PosteriorEnsemble> {
    check_len("prior dimension", projection.subspace_dim(), prior.dim())?;
    if cfg.final_samples == 0 {
        return Err(Error::InvalidInput("final_samples must be positive".into()));
    }
    let d = prior.dim();
    let lambda = es.population_size;
    let elbo_seed = es.seed.wrapping_add(ELBO_SEED_OFFSET);
    let mut best: Option<(f64, VariationalParams)> = None;
    let mut history = Trace::new(&["generation", "best_elbo", "sigma"]);

    let opts = MinimizeOptions {
        mean0: vec![0.0; 2 * d],
        sigma0: cfg.lambda_sigma0,
        population_size: lambda,
        max_generations: es.max_generations,
        seed: es.seed,
    };
    let result = cmaes::minimize_batch(&opts, |generation, batch| {
        let losses = batch
            .iter()
            .enumerate()
            .map(|(j, cand)| {
                let params = decode_lambda(&cand.x, prior);
                if params.alpha().iter().any(|a| !(a.is_finite() && *a > 0.0)) {
                    return Err(Error::InvalidEvaluation(format!(
                        "candidate {j} of generation {generation} decodes to invalid variances"
                    )));
                }
                let mut r = rng::stream(elbo_seed, (generation * lambda + j) as u64);
                let elbo = elbo_estimate(&params, sim, projection, dataset, prior, cfg.mc_samples, &mut r)?;
                if best.as_ref().map_or(true, |(b, _)| elbo > *b) {
                    best = Some((elbo, params));
                }
                Ok(-elbo)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses)
    })
    .map_err(|e| e.in_method("gfvi"))?;

    let (best_elbo, best_params) = best.expect("at least one generation ran");
    for g in &result.trace {
        history.push(vec![g.generation as f64, -g.best_loss, g.sigma]);
    }
    let mut draw_rng = rng::stream(elbo_seed, u64::MAX);
    let samples: Vec<Vec<f64>> = (0..cfg.final_samples)
        .map(|_| best_params.draw(&mut draw_rng))
        .collect();
    let kl = kl_diag_gaussian_to_prior(&best_params, prior)?;
    let mut ens = PosteriorEnsemble::uniform(samples, Provenance::VariationalInference)?
        .with_diagnostic("best_elbo", best_elbo)
        .with_diagnostic("kl_to_prior", kl)
        .with_diagnostic("evaluations", result.evaluations as f64);
    ens.trace = history;
    for (i, (m, la)) in best_params.mu.iter().zip(&best_params.log_alpha).enumerate() {
        ens.diagnostics.insert(format!("q_mu_{i:03}"), *m);
        ens.diagnostics.insert(format!("q_log_alpha_{i:03}"), *la);
    }
    Ok(ens)
}
