//! Posterior predictive tables from a weighted sample set.

use std::io::{BufRead, Write};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::blackbox::{argmax, Decode, QueryMode, Simulator};
use crate::error::{Error, Result};
use crate::posterior::PosteriorEnsemble;
use crate::prompt_space::ProjectionSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveTable {
    pub rows: Vec<Vec<f64>>,
    pub mode: QueryMode,
    pub sample_count: usize,
}

impl PredictiveTable {
    pub fn new(rows: Vec<Vec<f64>>, mode: QueryMode, sample_count: usize) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c || c == 0 {
                return Err(Error::InvalidInput(format!("predictive row {i} has {} classes", row.len())));
            }
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("predictive row {i} is not a distribution")));
            }
        }
        Ok(Self { rows, mode, sample_count })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn predictions(&self) -> Vec<u32> {
        self.rows.iter().map(|r| argmax(r) as u32).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header: Vec<String> = (0..self.classes()).map(|c| format!("p_{c}")).collect();
        header.push("predicted".into());
        writeln!(out, "{}", header.join(","))?;
        for row in &self.rows {
            let mut cells: Vec<String> = row.iter().map(|p| p.to_string()).collect();
            cells.push(argmax(row).to_string());
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    /// Reads the CSV layout written by [`write_csv`](Self::write_csv); the
    /// predicted column is ignored.
    pub fn read_csv<R: BufRead>(input: R, mode: QueryMode, sample_count: usize) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("empty predictive CSV".into()))??;
        let classes = header.split(',').filter(|h| h.starts_with("p_")).count();
        let mut rows = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .take(classes)
                .map(|cell| {
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidInput(format!("bad probability {cell:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Self::new(rows, mode, sample_count)
    }
}

/// `Σ_s w_s · 1{labels[s][i] = c}` for every input `i`. `labels[s]` holds
/// sample `s`'s decoded label for each input.
pub fn label_frequencies(labels: &[Vec<u32>], weights: &[f64], classes: usize) -> Result<Vec<Vec<f64>>> {
    if labels.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            what: "label sets",
            expected: weights.len(),
            got: labels.len(),
        });
    }
    let m = labels.first().map_or(0, Vec::len);
    let mut rows = vec![vec![0.0; classes]; m];
    for (sample, w) in labels.iter().zip(weights) {
        if sample.len() != m {
            return Err(Error::DimensionMismatch { what: "decoded labels", expected: m, got: sample.len() });
        }
        for (row, &y) in rows.iter_mut().zip(sample) {
            let slot = row
                .get_mut(y as usize)
                .ok_or_else(|| Error::InvalidInput(format!("label {y} out of range for {classes} classes")))?;
            *slot += w;
        }
    }
    for row in &mut rows {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
    }
    Ok(rows)
}

pub fn predictive_from_logits(
    ensemble: &PosteriorEnsemble,
    sim: &Simulator,
    projection: &ProjectionSpec,
    inputs: &[Vec<f64>],
) -> Result<PredictiveTable> {
    let mut rows = vec![vec![0.0; sim.classes()]; inputs.len()];
    for (z, w) in ensemble.samples.iter().zip(&ensemble.weights) {
        let probs = sim.query_logits(projection, z, inputs)?;
        for (acc, p) in rows.iter_mut().zip(&probs) {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += w * v;
            }
        }
    }
    PredictiveTable::new(rows, QueryMode::Logits, ensemble.len())
}

/// Indicator average of decoded labels, one labels query per sample.
pub fn predictive_from_labels<R: RngCore + ?Sized>(
    ensemble: &PosteriorEnsemble,
    sim: &Simulator,
    projection: &ProjectionSpec,
    inputs: &[Vec<f64>],
    decode: Decode,
    rng: &mut R,
) -> Result<PredictiveTable> {
    let labels = ensemble
        .samples
        .iter()
        .map(|z| sim.query_labels(projection, z, inputs, decode, rng))
        .collect::<Result<Vec<_>>>()?;
    let rows = label_frequencies(&labels, &ensemble.weights, sim.classes())?;
    PredictiveTable::new(rows, QueryMode::Labels, ensemble.len())
}
