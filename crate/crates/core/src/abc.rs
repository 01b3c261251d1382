//! Likelihood-free inference from decoded labels alone: rejection ABC and
//! ABC-SMC with a linear tolerance schedule.
//!
//! The distance between simulated and observed labels is the error rate on
//! the full training set. Each SMC iteration resamples a parent by weight,
//! perturbs it with a diagonal Gaussian kernel, and keeps the proposal once
//! its distance is within tolerance. Iteration 1 draws from the prior and
//! accepts on `distance < epsilon`; later iterations accept on
//! `distance <= epsilon`. The tolerance drops by `1/N` per iteration and the
//! run stops after `max_iterations` or when the tolerance reaches zero.

use rand::distributions::{Distribution, WeightedIndex};
use rand::RngCore;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blackbox::{Dataset, Decode, Simulator};
use crate::error::{check_len, Error, Result};
use crate::posterior::{PosteriorEnsemble, Provenance, Trace};
use crate::prompt_space::{PriorSpec, ProjectionSpec};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Fraction of positions where the label lists differ.
pub fn distance_error_rate(predicted: &[u32], truth: &[u32]) -> Result<f64> {
    check_len("predicted labels", truth.len(), predicted.len())?;
    if truth.is_empty() {
        return Err(Error::InvalidInput("distance needs at least one label".into()));
    }
    let wrong = predicted.iter().zip(truth).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / truth.len() as f64)
}

fn simulate_distance<R: RngCore + ?Sized>(
    sim: &Simulator,
    projection: &ProjectionSpec,
    z: &[f64],
    dataset: &Dataset,
    decode: Decode,
    rng: &mut R,
) -> Result<f64> {
    let labels = sim.query_labels(projection, z, &dataset.inputs, decode, rng)?;
    distance_error_rate(&labels, &dataset.labels)
}

/// Error rate of one prior draw's argmax labels.
pub fn initial_tolerance<R: RngCore + ?Sized>(
    sim: &Simulator,
    projection: &ProjectionSpec,
    prior: &PriorSpec,
    dataset: &Dataset,
    rng: &mut R,
) -> Result<f64> {
    let z = prior.draw(rng);
    simulate_distance(sim, projection, &z, dataset, Decode::Argmax, rng)
}

/// `epsilon − 1/N`, floored at zero.
pub fn decay_tolerance(epsilon: f64, n: usize) -> f64 {
    (epsilon - 1.0 / n.max(1) as f64).max(0.0)
}

/// `1 / Σ w²`.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "effective sample size needs normalized weights, sum is {total}"
        )));
    }
    Ok(1.0 / weights.iter().map(|w| w * w).sum::<f64>())
}

/// Accepts prior draws with `distance < epsilon` until `count` are accepted
/// or `max_draws` prior draws have been spent.
#[allow(clippy::too_many_arguments)]
pub fn rejection_abc<R: RngCore + ?Sized>(
    sim: &Simulator,
    projection: &ProjectionSpec,
    prior: &PriorSpec,
    dataset: &Dataset,
    epsilon: f64,
    count: usize,
    max_draws: u64,
    rng: &mut R,
) -> Result<PosteriorEnsemble> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidInput(format!("epsilon must lie in [0, 1], got {epsilon}")));
    }
    if count == 0 {
        return Err(Error::InvalidInput("rejection ABC needs a positive sample count".into()));
    }
    let mut accepted = Vec::with_capacity(count);
    let mut draws = 0u64;
    while accepted.len() < count {
        if draws >= max_draws {
            return Err(Error::RejectionExhausted {
                accepted: accepted.len(),
                required: count,
                draws,
            });
        }
        draws += 1;
        let z = prior.draw(rng);
        if simulate_distance(sim, projection, &z, dataset, Decode::Argmax, rng)? < epsilon {
            accepted.push(z);
        }
    }
    Ok(PosteriorEnsemble::uniform(accepted, Provenance::RejectionAbc)?
        .with_diagnostic("acceptance_rate", count as f64 / draws as f64)
        .with_diagnostic("epsilon", epsilon)
        .with_diagnostic("draws", draws as f64))
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn log_kernel(z: &[f64], center: &[f64], variance: &[f64]) -> f64 {
    z.iter()
        .zip(center)
        .zip(variance)
        .map(|((x, m), v)| -0.5 * (LN_2PI + v.ln() + (x - m) * (x - m) / v))
        .sum()
}

/// Importance weights `p(z_s) / Σ_j w_j N(z_s; z_j, diag(alpha))`,
/// normalized, computed in log space.
pub fn update_weights(
    new_particles: &[Vec<f64>],
    previous: &[Vec<f64>],
    previous_weights: &[f64],
    kernel_variance: &[f64],
    prior: &PriorSpec,
) -> Result<Vec<f64>> {
    check_len("previous weights", previous.len(), previous_weights.len())?;
    let d = prior.dim();
    check_len("kernel variance", d, kernel_variance.len())?;
    for z in new_particles.iter().chain(previous) {
        check_len("particle", d, z.len())?;
    }
    if new_particles.is_empty() || previous.is_empty() {
        return Err(Error::InvalidInput("weight update needs particles".into()));
    }
    let log_prev_w: Vec<f64> = previous_weights.iter().map(|w| w.ln()).collect();
    let log_raw: Vec<f64> = new_particles
        .iter()
        .map(|z| {
            let terms: Vec<f64> = previous
                .iter()
                .zip(&log_prev_w)
                .map(|(zj, lw)| lw + log_kernel(z, zj, kernel_variance))
                .collect();
            prior.log_density_unchecked(z) - log_sum_exp(&terms)
        })
        .collect();
    let log_total = log_sum_exp(&log_raw);
    if !log_total.is_finite() {
        return Err(Error::DegenerateWeights(format!(
            "log normalizer is {log_total}"
        )));
    }
    Ok(log_raw.iter().map(|l| (l - log_total).exp()).collect())
}

/// Per-coordinate weighted variance, floored elementwise.
pub fn update_kernel_variance(particles: &[Vec<f64>], weights: &[f64], variance_floor: f64) -> Vec<f64> {
    let d = particles.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for (z, w) in particles.iter().zip(weights) {
        for (m, x) in mean.iter_mut().zip(z) {
            *m += w * x;
        }
    }
    let mut var = vec![0.0; d];
    for (z, w) in particles.iter().zip(weights) {
        for ((v, x), m) in var.iter_mut().zip(z).zip(&mean) {
            *v += w * (x - m) * (x - m);
        }
    }
    var.into_iter().map(|v| v.max(variance_floor)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Importance,
    /// Weights pinned at `1/S` after every iteration.
    #[default]
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcConfig {
    pub particle_count: usize,
    pub max_iterations: usize,
    pub weight_scheme: WeightScheme,
    pub max_attempts_per_particle: u64,
    pub variance_floor: f64,
    pub decode: Decode,
    pub seed: u64,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            particle_count: 100,
            max_iterations: 10,
            weight_scheme: WeightScheme::default(),
            max_attempts_per_particle: 10_000,
            variance_floor: 1e-8,
            decode: Decode::Argmax,
            seed: 0,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particle_count == 0 {
            return Err(Error::config("method.smc.particle_count", "must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("method.smc.max_iterations", "must be positive"));
        }
        if self.max_attempts_per_particle == 0 {
            return Err(Error::config("method.smc.max_attempts_per_particle", "must be positive"));
        }
        if !(self.variance_floor.is_finite() && self.variance_floor > 0.0) {
            return Err(Error::config("method.smc.variance_floor", "must be positive"));
        }
        Ok(())
    }
}

/// Population after one SMC iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct SmcState {
    pub iteration: usize,
    pub epsilon: f64,
    pub particles: Vec<Vec<f64>>,
    /// Distance of each particle when it was accepted.
    pub distances: Vec<f64>,
    pub weights: Vec<f64>,
    /// Kernel variance computed from this population, used to perturb the next.
    pub kernel_variance: Vec<f64>,
    pub attempts: u64,
    pub simulator_calls: u64,
}

const INITIAL_TOLERANCE_STREAM: u64 = u64::MAX;

fn particle_stream(seed: u64, iteration: usize, particle: usize) -> rng::StreamRng {
    rng::stream(seed, ((iteration as u64) << 32) | particle as u64)
}

/// ABC-SMC; see [`abc_smc_observed`].
pub fn abc_smc(
    sim: &Simulator,
    projection: &ProjectionSpec,
    prior: &PriorSpec,
    dataset: &Dataset,
    cfg: &SmcConfig,
) -> Result<PosteriorEnsemble> {
    abc_smc_observed(sim, projection, prior, dataset, cfg, |_| {})
}

/// ABC-SMC calling `observe` with the population after every iteration.
pub fn abc_smc_observed<F: FnMut(&SmcState)>(
    sim: &Simulator,
    projection: &ProjectionSpec,
    prior: &PriorSpec,
    dataset: &Dataset,
    cfg: &SmcConfig,
    mut observe: F,
) -> Result<PosteriorEnsemble> {
    cfg.validate()?;
    check_len("prior dimension", projection.subspace_dim(), prior.dim())?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("ABC-SMC needs a nonempty training set".into()));
    }
    let n = dataset.len();
    let s_count = cfg.particle_count;
    let calls_before = sim.budget().used();
    let mut epsilon = initial_tolerance(
        sim,
        projection,
        prior,
        dataset,
        &mut rng::stream(cfg.seed, INITIAL_TOLERANCE_STREAM),
    )?;
    let initial_epsilon = epsilon;

    let mut trace = Trace::new(&["iteration", "epsilon", "ess", "total_attempts", "simulator_calls"]);
    let mut state: Option<SmcState> = None;
    let mut total_attempts = 0u64;

    for iteration in 1..=cfg.max_iterations {
        let mut particles = Vec::with_capacity(s_count);
        let mut distances = Vec::with_capacity(s_count);
        let mut attempts = 0u64;
        let parent_index = match &state {
            Some(prev) => Some(
                WeightedIndex::new(&prev.weights)
                    .map_err(|e| Error::DegenerateWeights(e.to_string()))?,
            ),
            None => None,
        };
        for s in 0..s_count {
            let mut r = particle_stream(cfg.seed, iteration, s);
            let mut tries = 0u64;
            loop {
                if tries >= cfg.max_attempts_per_particle {
                    return Err(Error::Stagnation {
                        iteration,
                        epsilon,
                        attempts: tries,
                    });
                }
                tries += 1;
                let z = match (&state, &parent_index) {
                    (Some(prev), Some(idx)) => {
                        let parent = &prev.particles[idx.sample(&mut r)];
                        parent
                            .iter()
                            .zip(&prev.kernel_variance)
                            .map(|(m, v)| {
                                let e: f64 = StandardNormal.sample(&mut r);
                                m + v.sqrt() * e
                            })
                            .collect::<Vec<f64>>()
                    }
                    _ => prior.draw(&mut r),
                };
                let dist = simulate_distance(sim, projection, &z, dataset, cfg.decode, &mut r)?;
                // A zero initial tolerance means the prior draw matched exactly;
                // strict comparison would then reject everything.
                let accept = if iteration == 1 && epsilon > 0.0 { dist < epsilon } else { dist <= epsilon };
                if accept {
                    particles.push(z);
                    distances.push(dist);
                    break;
                }
            }
            attempts += tries;
        }
        total_attempts += attempts;

        let weights = match (&state, cfg.weight_scheme) {
            (Some(prev), WeightScheme::Importance) => {
                update_weights(&particles, &prev.particles, &prev.weights, &prev.kernel_variance, prior)?
            }
            _ => vec![1.0 / s_count as f64; s_count],
        };
        let kernel_variance = update_kernel_variance(&particles, &weights, cfg.variance_floor);
        let ess = effective_sample_size(&weights)?;
        let calls = sim.budget().used() - calls_before;
        trace.push(vec![iteration as f64, epsilon, ess, total_attempts as f64, calls as f64]);
        let current = SmcState {
            iteration,
            epsilon,
            particles,
            distances,
            weights,
            kernel_variance,
            attempts,
            simulator_calls: calls,
        };
        observe(&current);
        state = Some(current);
        // An exact-match iteration is unreachable whenever labels are noisy,
        // so the run ends once the schedule reaches zero.
        epsilon = decay_tolerance(epsilon, n);
        if epsilon == 0.0 {
            break;
        }
    }

    let last = state.expect("at least one iteration");
    let ess = effective_sample_size(&last.weights)?;
    let mut ens = PosteriorEnsemble::new(last.particles, last.weights, Provenance::AbcSmc)?
        .with_diagnostic("initial_epsilon", initial_epsilon)
        .with_diagnostic("final_epsilon", last.epsilon)
        .with_diagnostic("iterations", last.iteration as f64)
        .with_diagnostic("ess", ess)
        .with_diagnostic("total_attempts", total_attempts as f64);
    ens.trace = trace;
    Ok(ens)
}
