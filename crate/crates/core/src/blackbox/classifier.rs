use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{decode_rows, Backend, Decode};
use crate::error::{check_len, Error, Result};
use crate::rng;

/// Dimensions and seed of a [`FrozenClassifier`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierShape {
    pub prompt_dim: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub pooled_dim: usize,
    /// The pooled prompt is divided by this before entering the network.
    pub prompt_scale: f64,
    pub seed: u64,
}

/// Fixed two-layer network `softmax(W2 tanh(W1 [x; pool P / s] + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenClassifier {
    shape: ClassifierShape,
    /// `pooled_dim × prompt_dim`, row-major, already divided by `prompt_scale`.
    pool: Vec<f64>,
    /// `hidden × (feature_dim + pooled_dim)`, row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// `classes × hidden`, row-major.
    w2: Vec<f64>,
    b2: Vec<f64>,
}

const OUTPUT_GAIN: f64 = 3.0;

fn gaussian(rng: &mut rng::StreamRng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            e * std
        })
        .collect()
}

impl FrozenClassifier {
    pub fn new(shape: ClassifierShape) -> Result<Self> {
        if shape.prompt_dim == 0 || shape.feature_dim == 0 || shape.hidden == 0 || shape.pooled_dim == 0 {
            return Err(Error::InvalidDimension(format!(
                "classifier dimensions must be positive: {shape:?}"
            )));
        }
        if shape.classes < 2 {
            return Err(Error::InvalidDimension(format!(
                "classifier needs at least 2 classes, got {}",
                shape.classes
            )));
        }
        if !(shape.prompt_scale.is_finite() && shape.prompt_scale > 0.0) {
            return Err(Error::InvalidInput(format!(
                "prompt scale must be positive, got {}",
                shape.prompt_scale
            )));
        }
        let mut rng = rng::seeded(shape.seed);
        let (d, f, p, h, c) = (
            shape.prompt_dim,
            shape.feature_dim,
            shape.pooled_dim,
            shape.hidden,
            shape.classes,
        );
        let pool = gaussian(&mut rng, p * d, 1.0 / (d as f64).sqrt() / shape.prompt_scale);
        // Feature and prompt columns each contribute unit variance to a hidden unit.
        let feature_std = 1.0 / (f as f64).sqrt();
        let prompt_std = 1.0 / (p as f64).sqrt();
        let mut w1 = Vec::with_capacity(h * (f + p));
        for _ in 0..h {
            w1.extend(gaussian(&mut rng, f, feature_std));
            w1.extend(gaussian(&mut rng, p, prompt_std));
        }
        let b1 = gaussian(&mut rng, h, 0.1);
        let w2 = gaussian(&mut rng, c * h, OUTPUT_GAIN / (h as f64).sqrt());
        let b2 = Normal::new(0.0, 0.1)
            .map(|n| (0..c).map(|_| n.sample(&mut rng)).collect())
            .map_err(|e| Error::NumericalBreakdown(e.to_string()))?;
        Ok(Self {
            shape,
            pool,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// A classifier with all-zero output weights: every query returns the
    /// uniform distribution.
    pub fn uniform(prompt_dim: usize, feature_dim: usize, classes: usize) -> Result<Self> {
        let mut clf = Self::new(ClassifierShape {
            prompt_dim,
            feature_dim,
            classes,
            hidden: 1,
            pooled_dim: 1,
            prompt_scale: 1.0,
            seed: 0,
        })?;
        clf.w2.iter_mut().for_each(|w| *w = 0.0);
        clf.b2.iter_mut().for_each(|b| *b = 0.0);
        Ok(clf)
    }

    pub fn shape(&self) -> &ClassifierShape {
        &self.shape
    }

    fn pooled(&self, prompt: &[f64]) -> Vec<f64> {
        self.pool
            .chunks_exact(self.shape.prompt_dim)
            .map(|row| row.iter().zip(prompt).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn logits_with_pooled(&self, pooled: &[f64], x: &[f64]) -> Vec<f64> {
        let f = self.shape.feature_dim;
        let width = f + self.shape.pooled_dim;
        let hidden: Vec<f64> = self
            .w1
            .chunks_exact(width)
            .zip(&self.b1)
            .map(|(row, b)| {
                let a: f64 = row[..f].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                    + row[f..].iter().zip(pooled).map(|(w, v)| w * v).sum::<f64>();
                (a + b).tanh()
            })
            .collect();
        self.w2
            .chunks_exact(self.shape.hidden)
            .zip(&self.b2)
            .map(|(row, b)| row.iter().zip(&hidden).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn check(&self, prompt: &[f64], inputs: &[Vec<f64>]) -> Result<()> {
        check_len("prompt", self.shape.prompt_dim, prompt.len())?;
        for x in inputs {
            check_len("input features", self.shape.feature_dim, x.len())?;
        }
        Ok(())
    }

    /// Pre-softmax scores for each input.
    pub fn raw_logits(&self, prompt: &[f64], inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check(prompt, inputs)?;
        let pooled = self.pooled(prompt);
        Ok(inputs
            .iter()
            .map(|x| self.logits_with_pooled(&pooled, x))
            .collect())
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Backend for FrozenClassifier {
    fn classes(&self) -> usize {
        self.shape.classes
    }

    fn feature_dim(&self) -> usize {
        self.shape.feature_dim
    }

    fn prompt_dim(&self) -> usize {
        self.shape.prompt_dim
    }

    fn probabilities(&self, prompt: &[f64], inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .raw_logits(prompt, inputs)?
            .iter()
            .map(|l| softmax(l))
            .collect())
    }

    fn labels(&self, prompt: &[f64], inputs: &[Vec<f64>], decode: Decode, seed: u64) -> Result<Vec<u32>> {
        let rows = match decode {
            Decode::Argmax => self.raw_logits(prompt, inputs)?,
            Decode::Sample => self.probabilities(prompt, inputs)?,
        };
        Ok(decode_rows(&rows, decode, seed))
    }
}
