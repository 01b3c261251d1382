//! The weighted sample set every inference method returns.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PointEstimate,
    Ensembles,
    VariationalInference,
    RejectionAbc,
    AbcSmc,
}

impl Provenance {
    /// Whether predictive tables for this method go through the labels path.
    pub fn likelihood_free(self) -> bool {
        matches!(self, Provenance::RejectionAbc | Provenance::AbcSmc)
    }
}

/// Tabular run diagnostics (one row per generation or SMC iteration).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Trace {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", self.columns.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorEnsemble {
    pub samples: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub provenance: Provenance,
    pub diagnostics: BTreeMap<String, f64>,
    pub trace: Trace,
}

#[derive(Serialize, Deserialize)]
struct Record {
    index: usize,
    weight: f64,
    z: Vec<f64>,
}

impl PosteriorEnsemble {
    pub fn new(samples: Vec<Vec<f64>>, weights: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("posterior ensemble needs at least one sample".into()));
        }
        if samples.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                what: "ensemble weights",
                expected: samples.len(),
                got: weights.len(),
            });
        }
        let dim = samples[0].len();
        if samples.iter().any(|s| s.len() != dim) {
            return Err(Error::InvalidInput("ensemble samples differ in dimension".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("ensemble weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("ensemble weights sum to {total}, not 1")));
        }
        Ok(Self {
            samples,
            weights,
            provenance,
            diagnostics: BTreeMap::new(),
            trace: Trace::default(),
        })
    }

    pub fn uniform(samples: Vec<Vec<f64>>, provenance: Provenance) -> Result<Self> {
        let s = samples.len().max(1);
        Self::new(samples, vec![1.0 / s as f64; s], provenance)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn with_diagnostic(mut self, name: &str, value: f64) -> Self {
        self.diagnostics.insert(name.to_string(), value);
        self
    }

    /// One JSON record `{index, weight, z}` per line.
    pub fn write_ndjson<W: Write>(&self, mut out: W) -> Result<()> {
        for (index, (z, w)) in self.samples.iter().zip(&self.weights).enumerate() {
            let rec = Record {
                index,
                weight: *w,
                z: z.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_ndjson<R: BufRead>(input: R, provenance: Provenance) -> Result<Self> {
        let mut records: Vec<Record> = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        records.sort_by_key(|r| r.index);
        let (samples, weights) = records.into_iter().map(|r| (r.z, r.weight)).unzip();
        Self::new(samples, weights, provenance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(PosteriorEnsemble::new(vec![], vec![], Provenance::Ensembles).is_err());
        assert!(PosteriorEnsemble::new(vec![vec![0.0]], vec![0.5], Provenance::Ensembles).is_err());
        assert!(PosteriorEnsemble::new(vec![vec![0.0], vec![1.0, 2.0]], vec![0.5, 0.5], Provenance::Ensembles).is_err());
        let e = PosteriorEnsemble::uniform(vec![vec![0.0]; 3], Provenance::AbcSmc).unwrap();
        assert!((e.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ndjson_round_trip() {
        let e = PosteriorEnsemble::new(
            vec![vec![0.1, -2.5], vec![3.0, 1e-300]],
            vec![0.25, 0.75],
            Provenance::AbcSmc,
        )
        .unwrap();
        let mut buf = Vec::new();
        e.write_ndjson(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"index":0,"weight":0.25,"z":[0.1,-2.5]}"#));
        let back = PosteriorEnsemble::read_ndjson(&buf[..], Provenance::AbcSmc).unwrap();
        assert_eq!(back.samples, e.samples);
        assert_eq!(back.weights, e.weights);
    }
}
