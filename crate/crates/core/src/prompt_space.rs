//! Subspace reparameterization of the prompt, `P = A z + P0`, and the
//! isotropic Gaussian prior over `z`.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Fixed random projection from the `d`-dimensional search space to the
/// `D`-dimensional prompt.
///
/// The matrix is never stored on disk; it is regenerated from
/// `(d, D, seed, entry_variance)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSpec {
    subspace_dim: usize,
    prompt_dim: usize,
    seed: u64,
    entry_variance: f64,
    /// Row-major, `prompt_dim × subspace_dim`.
    matrix: Vec<f64>,
    anchor: Vec<f64>,
}

/// On-disk form of a [`ProjectionSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionArtifact {
    pub d: usize,
    pub prompt_dim: usize,
    pub seed: u64,
    pub entry_variance: f64,
    pub p0: Vec<f64>,
}

/// Projection with entries drawn i.i.d. from `N(0, 1/d)` and a zero anchor.
pub fn make_projection(d: usize, prompt_dim: usize, seed: u64) -> Result<ProjectionSpec> {
    ProjectionSpec::new(d, prompt_dim, seed)
}

impl ProjectionSpec {
    pub fn new(d: usize, prompt_dim: usize, seed: u64) -> Result<Self> {
        let variance = if d == 0 { 1.0 } else { 1.0 / d as f64 };
        Self::with_entry_variance(d, prompt_dim, seed, variance)
    }

    pub fn with_entry_variance(
        d: usize,
        prompt_dim: usize,
        seed: u64,
        entry_variance: f64,
    ) -> Result<Self> {
        if d == 0 || prompt_dim == 0 || d > prompt_dim {
            return Err(Error::InvalidDimension(format!(
                "projection requires 1 <= d <= D, got d = {d}, D = {prompt_dim}"
            )));
        }
        if !(entry_variance.is_finite() && entry_variance > 0.0) {
            return Err(Error::InvalidInput(format!(
                "projection entry variance must be positive, got {entry_variance}"
            )));
        }
        let std = entry_variance.sqrt();
        let mut rng = rng::seeded(seed);
        let matrix = (0..d * prompt_dim)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                e * std
            })
            .collect();
        Ok(Self {
            subspace_dim: d,
            prompt_dim,
            seed,
            entry_variance,
            matrix,
            anchor: vec![0.0; prompt_dim],
        })
    }

    /// Replaces the anchor `P0`.
    pub fn with_anchor(mut self, anchor: Vec<f64>) -> Result<Self> {
        check_len("projection anchor", self.prompt_dim, anchor.len())?;
        self.anchor = anchor;
        Ok(self)
    }

    /// Identity projection (`d = D`, `A = I`, `P0 = 0`), mostly for tests.
    pub fn identity(d: usize) -> Result<Self> {
        let mut spec = Self::new(d, d, 0)?;
        spec.matrix = (0..d * d)
            .map(|k| if k / d == k % d { 1.0 } else { 0.0 })
            .collect();
        Ok(spec)
    }

    pub fn subspace_dim(&self) -> usize {
        self.subspace_dim
    }

    pub fn prompt_dim(&self) -> usize {
        self.prompt_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    /// Entry `(row, col)` of `A`.
    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * self.subspace_dim + col]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// `A z + P0`.
    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("subspace vector", self.subspace_dim, z.len())?;
        let d = self.subspace_dim;
        Ok(self
            .matrix
            .chunks_exact(d)
            .zip(&self.anchor)
            .map(|(row, p0)| row.iter().zip(z).map(|(a, x)| a * x).sum::<f64>() + p0)
            .collect())
    }

    pub fn to_artifact(&self) -> ProjectionArtifact {
        ProjectionArtifact {
            d: self.subspace_dim,
            prompt_dim: self.prompt_dim,
            seed: self.seed,
            entry_variance: self.entry_variance,
            p0: self.anchor.clone(),
        }
    }

    pub fn from_artifact(artifact: &ProjectionArtifact) -> Result<Self> {
        Self::with_entry_variance(
            artifact.d,
            artifact.prompt_dim,
            artifact.seed,
            artifact.entry_variance,
        )?
        .with_anchor(artifact.p0.clone())
    }
}

/// Prior `N(0, sigma^2 I)` over the subspace vector. `sigma` is a standard
/// deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    dim: usize,
    sigma: f64,
}

impl PriorSpec {
    pub fn new(dim: usize, sigma: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDimension("prior dimension must be positive".into()));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidInput(format!(
                "prior sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self { dim, sigma })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// One draw.
    pub fn draw<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                e * self.sigma
            })
            .collect()
    }

    /// `count` i.i.d. draws.
    pub fn sample<R: RngCore + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..count).map(|_| self.draw(rng)).collect()
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        check_len("prior argument", self.dim, z.len())?;
        Ok(self.log_density_unchecked(z))
    }

    pub(crate) fn log_density_unchecked(&self, z: &[f64]) -> f64 {
        let var = self.sigma * self.sigma;
        let sq: f64 = z.iter().map(|x| x * x).sum();
        -0.5 * self.dim as f64 * (LN_2PI + var.ln()) - 0.5 * sq / var
    }
}

/// Free-function form of [`PriorSpec::sample`].
pub fn sample_prior<R: RngCore + ?Sized>(
    prior: &PriorSpec,
    count: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    prior.sample(count, rng)
}
