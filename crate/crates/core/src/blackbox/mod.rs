//! The black-box classifier being prompted.
//!
//! A [`Simulator`] couples a [`Backend`] (the in-process [`FrozenClassifier`]
//! or an [`ExternalSimulator`] speaking the line protocol) with an access
//! policy and an evaluation budget. Inference code only ever talks to a
//! `Simulator`, so the policy and the budget cannot be bypassed.

mod classifier;
pub mod protocol;
mod task;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::prompt_space::ProjectionSpec;

pub use classifier::{ClassifierShape, FrozenClassifier};
pub use protocol::{Endpoint, ExternalSimulator};
pub use task::{make_synthetic_task, Dataset, SyntheticTask, TaskConfig, TaskFile};

/// What a query asks the simulator for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    Logits,
    Labels,
}

/// How a labels-mode query turns a class distribution into a label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decode {
    /// Highest-scoring class, lowest index on ties.
    #[default]
    Argmax,
    /// A categorical draw.
    Sample,
}

/// Which query modes a simulator exposes to callers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessPolicy {
    Full,
    LabelsOnly,
}

/// A fully-specified set of simulator queries (one forward pass per input).
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatorQuery<'a> {
    pub z: &'a [f64],
    pub inputs: &'a [Vec<f64>],
    pub mode: QueryMode,
    pub decode: Decode,
}

/// Forward-pass engine. Implementors see full prompts `P`, never `z`.
pub trait Backend: Send + Sync {
    fn classes(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn prompt_dim(&self) -> usize;

    /// Whether the engine can return probabilities at all.
    fn supports_logits(&self) -> bool {
        true
    }

    /// Class distributions, one per input.
    fn probabilities(&self, prompt: &[f64], inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;

    /// Decoded labels. `seed` drives [`Decode::Sample`] and is ignored otherwise.
    fn labels(
        &self,
        prompt: &[f64],
        inputs: &[Vec<f64>],
        decode: Decode,
        seed: u64,
    ) -> Result<Vec<u32>> {
        let probs = self.probabilities(prompt, inputs)?;
        Ok(decode_rows(&probs, decode, seed))
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = c;
        }
    }
    best
}

/// Decodes each row. For [`Decode::Argmax`] the rows may be raw scores; for
/// [`Decode::Sample`] they must be probabilities. Both the in-process path
/// and the protocol server call this, so a given seed yields the same
/// labels on either side.
pub fn decode_rows(rows: &[Vec<f64>], decode: Decode, seed: u64) -> Vec<u32> {
    match decode {
        Decode::Argmax => rows.iter().map(|r| argmax(r) as u32).collect(),
        Decode::Sample => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rows.iter()
                .map(|r| {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    for (c, p) in r.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            return c as u32;
                        }
                    }
                    (r.len() - 1) as u32
                })
                .collect()
        }
    }
}

/// Counter of simulator forward passes, one per `(z, input)` pair.
#[derive(Debug, Default)]
pub struct EvalBudget {
    used: AtomicU64,
    logits_used: AtomicU64,
    labels_used: AtomicU64,
    limit: Option<u64>,
}

impl EvalBudget {
    pub fn new(limit: Option<u64>) -> Self {
        Self {
            limit,
            ..Self::default()
        }
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    pub fn logits_used(&self) -> u64 {
        self.logits_used.load(Ordering::SeqCst)
    }

    pub fn labels_used(&self) -> u64 {
        self.labels_used.load(Ordering::SeqCst)
    }

    pub fn limit(&self) -> Option<u64> {
        self.limit
    }

    /// Reserves `n` passes, refusing the whole request if it would exceed the limit.
    pub fn charge(&self, n: u64, mode: QueryMode) -> Result<()> {
        let mut current = self.used.load(Ordering::SeqCst);
        loop {
            let next = current.saturating_add(n);
            if let Some(limit) = self.limit {
                if next > limit {
                    return Err(Error::BudgetExhausted {
                        used: current,
                        limit,
                        requested: n,
                    });
                }
            }
            match self
                .used
                .compare_exchange(current, next, Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(_) => break,
                Err(actual) => current = actual,
            }
        }
        match mode {
            QueryMode::Logits => self.logits_used.fetch_add(n, Ordering::SeqCst),
            QueryMode::Labels => self.labels_used.fetch_add(n, Ordering::SeqCst),
        };
        Ok(())
    }
}

/// Policy- and budget-enforcing handle over a [`Backend`]. Cloning shares the
/// backend and the budget.
#[derive(Clone)]
pub struct Simulator {
    backend: Arc<dyn Backend>,
    policy: AccessPolicy,
    budget: Arc<EvalBudget>,
}

impl std::fmt::Debug for Simulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulator")
            .field("classes", &self.classes())
            .field("feature_dim", &self.feature_dim())
            .field("prompt_dim", &self.prompt_dim())
            .field("policy", &self.policy)
            .field("budget", &self.budget)
            .finish()
    }
}

impl Simulator {
    pub fn new(backend: impl Backend + 'static) -> Self {
        Self::from_arc(Arc::new(backend))
    }

    pub fn from_arc(backend: Arc<dyn Backend>) -> Self {
        let policy = if backend.supports_logits() {
            AccessPolicy::Full
        } else {
            AccessPolicy::LabelsOnly
        };
        Self {
            backend,
            policy,
            budget: Arc::new(EvalBudget::default()),
        }
    }

    /// Same backend with a fresh budget capped at `limit` passes.
    pub fn with_budget_limit(mut self, limit: Option<u64>) -> Self {
        self.budget = Arc::new(EvalBudget::new(limit));
        self
    }

    /// A labels-only view sharing this simulator's backend and budget.
    pub fn labels_only(&self) -> Self {
        Self {
            backend: Arc::clone(&self.backend),
            policy: AccessPolicy::LabelsOnly,
            budget: Arc::clone(&self.budget),
        }
    }

    pub fn policy(&self) -> AccessPolicy {
        self.policy
    }

    pub fn budget(&self) -> &EvalBudget {
        &self.budget
    }

    pub fn classes(&self) -> usize {
        self.backend.classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.backend.feature_dim()
    }

    pub fn prompt_dim(&self) -> usize {
        self.backend.prompt_dim()
    }

    fn prepare(&self, projection: &ProjectionSpec, z: &[f64], inputs: &[Vec<f64>], mode: QueryMode) -> Result<Vec<f64>> {
        check_len("projection prompt", self.prompt_dim(), projection.prompt_dim())?;
        for x in inputs {
            check_len("input features", self.feature_dim(), x.len())?;
        }
        let prompt = projection.project(z)?;
        self.budget.charge(inputs.len() as u64, mode)?;
        Ok(prompt)
    }

    /// Class distributions at `z`, one per input.
    pub fn query_logits(
        &self,
        projection: &ProjectionSpec,
        z: &[f64],
        inputs: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        if self.policy == AccessPolicy::LabelsOnly {
            return Err(Error::AccessDenied(
                "simulator is labels-only; probabilities are not observable".into(),
            ));
        }
        let prompt = self.prepare(projection, z, inputs, QueryMode::Logits)?;
        self.backend.probabilities(&prompt, inputs)
    }

    /// Decoded labels at `z`. Sample decoding consumes one `u64` from `rng`.
    pub fn query_labels<R: RngCore + ?Sized>(
        &self,
        projection: &ProjectionSpec,
        z: &[f64],
        inputs: &[Vec<f64>],
        decode: Decode,
        rng: &mut R,
    ) -> Result<Vec<u32>> {
        let seed = match decode {
            Decode::Argmax => 0,
            Decode::Sample => rng.next_u64(),
        };
        let prompt = self.prepare(projection, z, inputs, QueryMode::Labels)?;
        let labels = self.backend.labels(&prompt, inputs, decode, seed)?;
        check_len("label response", inputs.len(), labels.len())?;
        Ok(labels)
    }

    /// Dispatches a [`SimulatorQuery`]; labels come back as one-hot rows.
    pub fn query<R: RngCore + ?Sized>(
        &self,
        projection: &ProjectionSpec,
        query: &SimulatorQuery<'_>,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>> {
        match query.mode {
            QueryMode::Logits => self.query_logits(projection, query.z, query.inputs),
            QueryMode::Labels => {
                let c = self.classes();
                let labels = self.query_labels(projection, query.z, query.inputs, query.decode, rng)?;
                Ok(labels
                    .into_iter()
                    .map(|l| {
                        let mut row = vec![0.0; c];
                        row[l as usize] = 1.0;
                        row
                    })
                    .collect())
            }
        }
    }
}
