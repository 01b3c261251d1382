//! (μ/μ_w, λ)-CMA-ES with rank-one and rank-μ covariance updates and
//! cumulative step-size adaptation, behind an ask/tell interface.
//!
//! Strategy constants follow Hansen's tutorial defaults. The caller owns
//! objective evaluation: [`SearchState::ask`] hands out candidates,
//! [`SearchState::tell`] takes them back with losses filled in.
//! [`minimize`] is a convenience loop over the two.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

/// Smallest eigenvalue allowed in the covariance matrix.
pub const EIGENVALUE_FLOOR: f64 = 1e-20;

/// Default population size.
pub const DEFAULT_POPULATION: usize = 20;

/// Default generation budget.
pub const DEFAULT_GENERATIONS: usize = 300;

/// A point handed out by [`SearchState::ask`].
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub x: Vec<f64>,
    pub loss: Option<f64>,
}

/// Strategy constants, functions of the dimension `n` and population `λ` only.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyParams {
    pub mu: usize,
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    pub chi_n: f64,
}

impl StrategyParams {
    pub fn new(n: usize, lambda: usize) -> Self {
        let nf = n as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| (lambda as f64 / 2.0 + 0.5).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Self {
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
        }
    }
}

/// Full optimizer state.
#[derive(Clone, Debug)]
pub struct SearchState {
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    eig_basis: DMatrix<f64>,
    eig_sqrt: DVector<f64>,
    path_sigma: DVector<f64>,
    path_c: DVector<f64>,
    generation: usize,
    lambda: usize,
    params: StrategyParams,
    rng: StreamRng,
}

/// Creates a search state centered at `mean0` with `C = I`.
pub fn es_init(mean0: Vec<f64>, sigma0: f64, population_size: usize, seed: u64) -> Result<SearchState> {
    SearchState::new(mean0, sigma0, population_size, seed)
}

impl SearchState {
    pub fn new(mean0: Vec<f64>, sigma0: f64, population_size: usize, seed: u64) -> Result<Self> {
        let n = mean0.len();
        if n == 0 {
            return Err(Error::InvalidDimension("CMA-ES needs a nonempty mean".into()));
        }
        if !(sigma0.is_finite() && sigma0 > 0.0) {
            return Err(Error::InvalidInput(format!("sigma0 must be positive, got {sigma0}")));
        }
        if population_size < 2 {
            return Err(Error::InvalidInput(format!(
                "population size must be at least 2, got {population_size}"
            )));
        }
        if mean0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("initial mean must be finite".into()));
        }
        Ok(Self {
            mean: DVector::from_vec(mean0),
            sigma: sigma0,
            cov: DMatrix::identity(n, n),
            eig_basis: DMatrix::identity(n, n),
            eig_sqrt: DVector::from_element(n, 1.0),
            path_sigma: DVector::zeros(n),
            path_c: DVector::zeros(n),
            generation: 0,
            lambda: population_size,
            params: StrategyParams::new(n, population_size),
            rng: rng::seeded(seed),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn path_sigma(&self) -> &[f64] {
        self.path_sigma.as_slice()
    }

    pub fn path_c(&self) -> &[f64] {
        self.path_c.as_slice()
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn population_size(&self) -> usize {
        self.lambda
    }

    pub fn params(&self) -> &StrategyParams {
        &self.params
    }

    /// Draws `λ` candidates from `N(m, σ² C)`.
    pub fn ask(&mut self) -> Result<Vec<Candidate>> {
        let n = self.dim();
        (0..self.lambda)
            .map(|_| {
                let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut self.rng));
                let y = &self.eig_basis * z.component_mul(&self.eig_sqrt);
                let x = &self.mean + y * self.sigma;
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NumericalBreakdown(format!(
                        "non-finite candidate at generation {}",
                        self.generation
                    )));
                }
                Ok(Candidate {
                    x: x.as_slice().to_vec(),
                    loss: None,
                })
            })
            .collect()
    }

    /// Updates the distribution from an evaluated population. The update
    /// depends only on the multiset of `(x, loss)` pairs, not their order.
    pub fn tell(&mut self, candidates: Vec<Candidate>) -> Result<()> {
        if candidates.len() != self.lambda {
            return Err(Error::InvalidEvaluation(format!(
                "expected {} candidates, got {}",
                self.lambda,
                candidates.len()
            )));
        }
        let n = self.dim();
        let mut ranked = Vec::with_capacity(candidates.len());
        for (i, c) in candidates.into_iter().enumerate() {
            match c.loss {
                Some(l) if l.is_finite() => {}
                other => {
                    return Err(Error::InvalidEvaluation(format!(
                        "candidate {i} has loss {other:?}"
                    )))
                }
            }
            if c.x.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "candidate",
                    expected: n,
                    got: c.x.len(),
                });
            }
            ranked.push(c);
        }
        ranked.sort_by(|a, b| {
            a.loss
                .unwrap()
                .total_cmp(&b.loss.unwrap())
                .then_with(|| {
                    a.x.iter()
                        .zip(&b.x)
                        .map(|(p, q)| p.total_cmp(q))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
        });

        let p = &self.params;
        let steps: Vec<DVector<f64>> = ranked[..p.mu]
            .iter()
            .map(|c| (DVector::from_column_slice(&c.x) - &self.mean) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(n);
        for (w, y) in p.weights.iter().zip(&steps) {
            y_w += y * *w;
        }

        self.mean += &y_w * self.sigma;

        // C^{-1/2} y_w = B D^{-1} B^T y_w
        let inv_sqrt_y = &self.eig_basis * (self.eig_basis.transpose() * &y_w).component_div(&self.eig_sqrt);
        let cs = p.c_sigma;
        self.path_sigma = &self.path_sigma * (1.0 - cs) + inv_sqrt_y * (cs * (2.0 - cs) * p.mu_eff).sqrt();

        let gen = (self.generation + 1) as i32;
        let ps_norm = self.path_sigma.norm();
        let h_sigma = ps_norm / (1.0 - (1.0 - cs).powi(2 * gen)).sqrt()
            < (1.4 + 2.0 / (n as f64 + 1.0)) * p.chi_n;
        let h = if h_sigma { 1.0 } else { 0.0 };

        let cc = p.c_c;
        self.path_c = &self.path_c * (1.0 - cc) + &y_w * (h * (cc * (2.0 - cc) * p.mu_eff).sqrt());
        let delta = (1.0 - h) * cc * (2.0 - cc);

        let mut rank_mu = DMatrix::zeros(n, n);
        for (w, y) in p.weights.iter().zip(&steps) {
            rank_mu += (y * y.transpose()) * *w;
        }
        let rank_one = &self.path_c * self.path_c.transpose();
        self.cov = &self.cov * (1.0 - p.c_1 - p.c_mu)
            + (rank_one + &self.cov * delta) * p.c_1
            + rank_mu * p.c_mu;

        self.sigma *= ((cs / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();
        self.sigma = self.sigma.clamp(f64::MIN_POSITIVE, 1e300);

        self.generation += 1;
        self.refresh_eigen()
    }

    fn refresh_eigen(&mut self) -> Result<()> {
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        if sym.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalBreakdown(format!(
                "non-finite covariance at generation {}",
                self.generation
            )));
        }
        let eig = SymmetricEigen::new(sym.clone());
        if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalBreakdown(format!(
                "eigendecomposition failed at generation {}",
                self.generation
            )));
        }
        let floored = eig.eigenvalues.map(|v| v.max(EIGENVALUE_FLOOR));
        if floored != eig.eigenvalues {
            let b = &eig.eigenvectors;
            let rebuilt = b * DMatrix::from_diagonal(&floored) * b.transpose();
            self.cov = (&rebuilt + rebuilt.transpose()) * 0.5;
        } else {
            self.cov = sym;
        }
        self.eig_sqrt = floored.map(f64::sqrt);
        self.eig_basis = eig.eigenvectors;
        Ok(())
    }
}

/// Per-generation trace row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_loss: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinimizeResult {
    pub best_x: Vec<f64>,
    pub best_loss: f64,
    /// Best-so-far loss after each generation.
    pub history: Vec<f64>,
    pub trace: Vec<GenerationRecord>,
    pub evaluations: usize,
}

/// Settings shared by [`minimize`] and [`minimize_batch`].
#[derive(Clone, Debug, PartialEq)]
pub struct MinimizeOptions {
    pub mean0: Vec<f64>,
    pub sigma0: f64,
    pub population_size: usize,
    pub max_generations: usize,
    pub seed: u64,
}

/// Runs ask/evaluate/tell for `max_generations` generations.
pub fn minimize<F>(
    mut objective: F,
    mean0: Vec<f64>,
    sigma0: f64,
    population_size: usize,
    max_generations: usize,
    seed: u64,
) -> Result<MinimizeResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let opts = MinimizeOptions {
        mean0,
        sigma0,
        population_size,
        max_generations,
        seed,
    };
    minimize_batch(&opts, |_, batch| Ok(batch.iter().map(|c| objective(&c.x)).collect()))
}

/// Like [`minimize`] but the objective sees a whole generation at once
/// (with its index) and may fail.
pub fn minimize_batch<F>(opts: &MinimizeOptions, mut objective: F) -> Result<MinimizeResult>
where
    F: FnMut(usize, &[Candidate]) -> Result<Vec<f64>>,
{
    if opts.max_generations == 0 {
        return Err(Error::InvalidInput("max_generations must be at least 1".into()));
    }
    let mut state = SearchState::new(opts.mean0.clone(), opts.sigma0, opts.population_size, opts.seed)?;
    let mut best_x = opts.mean0.clone();
    let mut best_loss = f64::INFINITY;
    let mut history = Vec::with_capacity(opts.max_generations);
    let mut trace = Vec::with_capacity(opts.max_generations);
    let mut evaluations = 0;
    for generation in 0..opts.max_generations {
        let mut batch = state.ask()?;
        let losses = objective(generation, &batch)?;
        if losses.len() != batch.len() {
            return Err(Error::InvalidEvaluation(format!(
                "objective returned {} losses for {} candidates",
                losses.len(),
                batch.len()
            )));
        }
        evaluations += batch.len();
        for (i, (cand, loss)) in batch.iter_mut().zip(losses).enumerate() {
            if !loss.is_finite() {
                return Err(Error::InvalidEvaluation(format!(
                    "objective returned {loss} for candidate {i} of generation {generation} at {:?}",
                    cand.x
                )));
            }
            if loss < best_loss {
                best_loss = loss;
                best_x = cand.x.clone();
            }
            cand.loss = Some(loss);
        }
        state.tell(batch)?;
        history.push(best_loss);
        trace.push(GenerationRecord {
            generation,
            best_loss,
            sigma: state.sigma(),
        });
    }
    Ok(MinimizeResult {
        best_x,
        best_loss,
        history,
        trace,
        evaluations,
    })
}

pub fn sphere(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn rosenbrock(x: &[f64]) -> f64 {
    x.windows(2)
        .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
        .sum()
}
