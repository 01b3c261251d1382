//! Uncertainty scores, calibration, and risk–rejection analysis.
//!
//! Every score follows "higher = more uncertain = rejected first".

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::blackbox::argmax;
use crate::error::{check_len, Error, Result};
use crate::predictive::PredictiveTable;

pub const DEFAULT_ECE_BINS: usize = 10;

/// Uncertainty given to flagged items by the oracle ranking.
const ORACLE_BAD: f64 = 100.0;

fn check_distribution(p: &[f64]) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("not a probability vector (sum {total})")));
    }
    Ok(())
}

pub fn entropy_score(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(-p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>())
}

/// `1 − max_c p_c`.
pub fn maxp_uncertainty(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(1.0 - p.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Score {
    Entropy,
    #[serde(rename = "maxp")]
    MaxP,
}

impl Score {
    pub const ALL: [Score; 2] = [Score::Entropy, Score::MaxP];

    pub fn name(self) -> &'static str {
        match self {
            Score::Entropy => "entropy",
            Score::MaxP => "maxp",
        }
    }

    pub fn apply(self, p: &[f64]) -> Result<f64> {
        match self {
            Score::Entropy => entropy_score(p),
            Score::MaxP => maxp_uncertainty(p),
        }
    }

    pub fn table(self, table: &PredictiveTable) -> Result<Vec<f64>> {
        table.rows.iter().map(|r| self.apply(r)).collect()
    }
}

/// Equal-width bins on max-probability confidence; confidence 1.0 lands in
/// the top bin and empty bins contribute nothing.
pub fn ece(table: &PredictiveTable, labels: &[u32], bins: usize) -> Result<f64> {
    check_len("true labels", table.len(), labels.len())?;
    if bins == 0 {
        return Err(Error::InvalidInput("ece needs at least one bin".into()));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("ece needs at least one item".into()));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    for (row, &y) in table.rows.iter().zip(labels) {
        let pred = argmax(row);
        let conf = row[pred];
        let b = ((conf * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred as u32 == y {
            correct[b] += 1;
        }
    }
    let m = labels.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let n = count[b] as f64;
            (n / m) * (correct[b] as f64 / n - conf_sum[b] / n).abs()
        })
        .sum())
}

/// `true` marks a bad item: misclassified, or out of distribution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskFlags {
    flags: Vec<bool>,
}

impl RiskFlags {
    pub fn new(flags: Vec<bool>) -> Result<Self> {
        if flags.is_empty() {
            return Err(Error::InvalidInput("risk flags must be nonempty".into()));
        }
        Ok(Self { flags })
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskRejectionCurve {
    /// `risks[k]` is the risk after rejecting the `k` most uncertain items.
    pub risks: Vec<f64>,
    pub aurrrc: f64,
}

impl RiskRejectionCurve {
    pub fn rejection_rates(&self) -> Vec<f64> {
        let m = self.risks.len() as f64;
        (0..self.risks.len()).map(|k| k as f64 / m).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "k,rejection_rate,risk")?;
        for (k, (rate, risk)) in self.rejection_rates().iter().zip(&self.risks).enumerate() {
            writeln!(out, "{k},{rate},{risk}")?;
        }
        Ok(())
    }
}

pub fn risk_rejection_curve(uncertainties: &[f64], flags: &RiskFlags) -> Result<RiskRejectionCurve> {
    check_len("uncertainties", flags.len(), uncertainties.len())?;
    if uncertainties.iter().any(|u| u.is_nan()) {
        return Err(Error::InvalidInput("uncertainty scores must not be NaN".into()));
    }
    let m = flags.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| uncertainties[b].total_cmp(&uncertainties[a]).then(a.cmp(&b)));
    // Walk from the most certain end so each suffix count is O(1).
    let mut bad_remaining = vec![0usize; m + 1];
    for k in (0..m).rev() {
        bad_remaining[k] = bad_remaining[k + 1] + flags.flags[order[k]] as usize;
    }
    let risks: Vec<f64> = (0..m).map(|k| bad_remaining[k] as f64 / (m - k) as f64).collect();
    let aurrrc = risks.iter().sum::<f64>() / m as f64;
    Ok(RiskRejectionCurve { risks, aurrrc })
}

pub fn oracle_uncertainties(flags: &RiskFlags) -> Vec<f64> {
    flags.flags.iter().map(|&bad| if bad { ORACLE_BAD } else { 0.0 }).collect()
}

/// AURRRC of the ranking that rejects every flagged item first.
pub fn oracle_lower_bound(flags: &RiskFlags) -> f64 {
    risk_rejection_curve(&oracle_uncertainties(flags), flags)
        .expect("oracle scores match flags")
        .aurrrc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectiveReport {
    pub curve: RiskRejectionCurve,
    pub aurrrc: f64,
    pub lower_bound: f64,
    pub accuracy: f64,
    pub ece: f64,
}

pub fn selective_classification_eval(table: &PredictiveTable, labels: &[u32], score: Score) -> Result<SelectiveReport> {
    check_len("true labels", table.len(), labels.len())?;
    let preds = table.predictions();
    let flags = RiskFlags::new(preds.iter().zip(labels).map(|(p, y)| p != y).collect())?;
    let curve = risk_rejection_curve(&score.table(table)?, &flags)?;
    let wrong = flags.flags.iter().filter(|f| **f).count();
    Ok(SelectiveReport {
        aurrrc: curve.aurrrc,
        curve,
        lower_bound: oracle_lower_bound(&flags),
        accuracy: 1.0 - wrong as f64 / labels.len() as f64,
        ece: ece(table, labels, DEFAULT_ECE_BINS)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub curve: RiskRejectionCurve,
    pub aurrrc: f64,
    pub lower_bound: f64,
}

/// ID rows first, then OOD rows; OOD rows are the flagged ones.
pub fn ood_detection_eval(id: &PredictiveTable, ood: &PredictiveTable, score: Score) -> Result<OodReport> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::InvalidInput("OOD evaluation needs nonempty ID and OOD tables".into()));
    }
    check_len("OOD table classes", id.classes(), ood.classes())?;
    let mut u = score.table(id)?;
    u.extend(score.table(ood)?);
    let flags = RiskFlags::new(
        std::iter::repeat(false).take(id.len()).chain(std::iter::repeat(true).take(ood.len())).collect(),
    )?;
    let curve = risk_rejection_curve(&u, &flags)?;
    Ok(OodReport {
        aurrrc: curve.aurrrc,
        curve,
        lower_bound: oracle_lower_bound(&flags),
    })
}

/// Compact per-table summary used by reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub ece: f64,
    pub aurrrc_entropy: f64,
    pub aurrrc_maxp: f64,
    pub lower_bound: f64,
}

pub fn summarize(table: &PredictiveTable, labels: &[u32]) -> Result<MetricSummary> {
    let e = selective_classification_eval(table, labels, Score::Entropy)?;
    let m = selective_classification_eval(table, labels, Score::MaxP)?;
    Ok(MetricSummary {
        accuracy: e.accuracy,
        ece: e.ece,
        aurrrc_entropy: e.aurrrc,
        aurrrc_maxp: m.aurrrc,
        lower_bound: e.lower_bound,
    })
}
