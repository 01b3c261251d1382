use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::classifier::ClassifierShape;
use super::{decode_rows, Backend, Decode, FrozenClassifier, Simulator};
use crate::error::{Error, Result};
use crate::prompt_space::{PriorSpec, ProjectionArtifact, ProjectionSpec};
use crate::rng;

/// Labeled inputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<u32>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                what: "dataset labels",
                expected: inputs.len(),
                got: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Synthetic task configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Subspace dimension.
    pub d: usize,
    /// Full prompt dimension.
    pub prompt_dim: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub pooled_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_ood: usize,
    pub ood_shift: f64,
    /// Probability of replacing a train/test label with a different class.
    pub label_noise: f64,
    pub prior_sigma: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            d: 8,
            prompt_dim: 32,
            feature_dim: 16,
            classes: 2,
            hidden: 16,
            pooled_dim: 8,
            n_train: 32,
            n_test: 200,
            n_ood: 200,
            ood_shift: 3.0,
            label_noise: 0.0,
            prior_sigma: 50.0,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("prompt_dim", self.prompt_dim),
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden),
            ("pooled_dim", self.pooled_dim),
            ("n_train", self.n_train),
            ("n_test", self.n_test),
            ("n_ood", self.n_ood),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("task.{name}"), "must be positive"));
            }
        }
        if self.classes < 2 {
            return Err(Error::config("task.classes", "must be at least 2"));
        }
        if self.d > self.prompt_dim {
            return Err(Error::config("task.d", "must not exceed task.prompt_dim"));
        }
        if !(self.ood_shift.is_finite() && self.ood_shift >= 0.0) {
            return Err(Error::config("task.ood_shift", "must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::config("task.label_noise", "must lie in [0, 1]"));
        }
        if !(self.prior_sigma.is_finite() && self.prior_sigma > 0.0) {
            return Err(Error::config("task.prior_sigma", "must be positive"));
        }
        Ok(())
    }

    pub fn prior(&self) -> Result<PriorSpec> {
        PriorSpec::new(self.d, self.prior_sigma)
    }
}

/// A frozen classifier, a projection, and ID/OOD data labeled at a hidden
/// ground-truth `z_star`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub classifier: FrozenClassifier,
    pub projection: ProjectionSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub near_ood: Vec<Vec<f64>>,
    pub far_ood: Vec<Vec<f64>>,
    pub z_star: Vec<f64>,
}

/// Serialized form of a task: everything except the classifier weights and
/// the projection matrix, which are regenerated from seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub config: TaskConfig,
    pub projection: ProjectionArtifact,
    pub z_star: Vec<f64>,
    pub train: Dataset,
    pub test: Dataset,
    pub near_ood: Vec<Vec<f64>>,
    pub far_ood: Vec<Vec<f64>>,
}

fn standard_normal_rows(rng: &mut rng::StreamRng, count: usize, dim: usize, std: f64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(rng);
                    e * std
                })
                .collect()
        })
        .collect()
}

fn unit_vector(rng: &mut rng::StreamRng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

const STREAM_CLASSIFIER: u64 = 1;
const STREAM_PROJECTION: u64 = 2;
const STREAM_TRUTH: u64 = 3;
const STREAM_DATA: u64 = 4;
const STREAM_NOISE: u64 = 5;

fn derived_seed(seed: u64, stream: u64) -> u64 {
    rng::stream(seed, stream).gen()
}

/// Builds a task; fully deterministic in `cfg.seed`.
pub fn make_synthetic_task(cfg: &TaskConfig) -> Result<SyntheticTask> {
    cfg.validate()?;
    let classifier = FrozenClassifier::new(ClassifierShape {
        prompt_dim: cfg.prompt_dim,
        feature_dim: cfg.feature_dim,
        classes: cfg.classes,
        hidden: cfg.hidden,
        pooled_dim: cfg.pooled_dim,
        prompt_scale: cfg.prior_sigma,
        seed: derived_seed(cfg.seed, STREAM_CLASSIFIER),
    })?;
    let projection = ProjectionSpec::new(cfg.d, cfg.prompt_dim, derived_seed(cfg.seed, STREAM_PROJECTION))?;
    let z_star = cfg.prior()?.draw(&mut rng::stream(cfg.seed, STREAM_TRUTH));

    let mut data_rng = rng::stream(cfg.seed, STREAM_DATA);
    let f = cfg.feature_dim;
    let train_x = standard_normal_rows(&mut data_rng, cfg.n_train, f, 1.0);
    let test_x = standard_normal_rows(&mut data_rng, cfg.n_test, f, 1.0);
    let near_dir = unit_vector(&mut data_rng, f);
    let near_ood = standard_normal_rows(&mut data_rng, cfg.n_ood, f, 1.0)
        .into_iter()
        .map(|x| x.iter().zip(&near_dir).map(|(v, u)| v + cfg.ood_shift * u).collect())
        .collect();
    let far_mean: Vec<f64> = unit_vector(&mut data_rng, f)
        .into_iter()
        .map(|u| 2.0 * cfg.ood_shift * u)
        .collect();
    let far_ood = standard_normal_rows(&mut data_rng, cfg.n_ood, f, std::f64::consts::SQRT_2)
        .into_iter()
        .map(|x| x.iter().zip(&far_mean).map(|(v, m)| v + m).collect())
        .collect();

    let prompt = projection.project(&z_star)?;
    let label = |xs: &[Vec<f64>]| -> Result<Vec<u32>> {
        Ok(decode_rows(&classifier.raw_logits(&prompt, xs)?, Decode::Argmax, 0))
    };
    let mut train_y = label(&train_x)?;
    let mut test_y = label(&test_x)?;
    if cfg.label_noise > 0.0 {
        let mut noise = rng::stream(cfg.seed, STREAM_NOISE);
        for y in train_y.iter_mut().chain(test_y.iter_mut()) {
            if noise.gen::<f64>() < cfg.label_noise {
                let shift = noise.gen_range(1..cfg.classes as u32);
                *y = (*y + shift) % cfg.classes as u32;
            }
        }
    }

    Ok(SyntheticTask {
        config: cfg.clone(),
        classifier,
        projection,
        train: Dataset::new(train_x, train_y)?,
        test: Dataset::new(test_x, test_y)?,
        near_ood,
        far_ood,
        z_star,
    })
}

impl SyntheticTask {
    /// A fresh full-access simulator over this task's classifier.
    pub fn simulator(&self) -> Simulator {
        Simulator::new(self.classifier.clone())
    }

    pub fn prior(&self) -> Result<PriorSpec> {
        self.config.prior()
    }

    pub fn classes(&self) -> usize {
        self.classifier.classes()
    }

    pub fn to_file(&self) -> TaskFile {
        TaskFile {
            config: self.config.clone(),
            projection: self.projection.to_artifact(),
            z_star: self.z_star.clone(),
            train: self.train.clone(),
            test: self.test.clone(),
            near_ood: self.near_ood.clone(),
            far_ood: self.far_ood.clone(),
        }
    }
}
