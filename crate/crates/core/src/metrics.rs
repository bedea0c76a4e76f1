//! Confusion matrices, per-stage rates, accuracy, macro F1, Cohen's kappa,
//! and the single/multi agreement table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stage::{StageLabel, NUM_STAGES};

/// Rows are true stages, columns predicted stages. Entries are counts, or
/// rates when built with [`ConfusionMatrix::from_rates`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[f64; NUM_STAGES]; NUM_STAGES]);

impl ConfusionMatrix {
    pub fn from_rates(rates: [[f64; NUM_STAGES]; NUM_STAGES]) -> Self {
        ConfusionMatrix(rates)
    }

    pub fn total(&self) -> f64 {
        self.0.iter().flatten().sum()
    }

    pub fn row(&self, s: usize) -> f64 {
        self.0[s].iter().sum()
    }

    pub fn col(&self, s: usize) -> f64 {
        self.0.iter().map(|r| r[s]).sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.0.iter_mut().flatten().zip(other.0.iter().flatten()) {
            *a += b;
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        StageLabel::ALL.iter().for_each(|l| s += &format!(",{l}"));
        s.push('\n');
        for (l, row) in StageLabel::ALL.iter().zip(&self.0) {
            s += l.name();
            row.iter().for_each(|v| s += &format!(",{v}"));
            s.push('\n');
        }
        s
    }
}

pub fn confusion(truth: &[usize], pred: &[usize]) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Metric(format!("{} labels vs {} predictions", truth.len(), pred.len())));
    }
    let mut m = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= NUM_STAGES || p >= NUM_STAGES {
            return Err(Error::Metric(format!("stage index out of range ({t}, {p})")));
        }
        m.0[t][p] += 1.0;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    /// `None` when the stage never occurs in the truth.
    pub recall: Option<f64>,
    /// `None` when the stage is never predicted.
    pub precision: Option<f64>,
    /// `None` unless both rates are defined.
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub stages: [StageMetrics; NUM_STAGES],
    pub accuracy: f64,
    /// Mean of the defined per-stage F1 values.
    pub mf1: f64,
    pub kappa: f64,
    pub total: f64,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricReport> {
    let total = cm.total();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Metric("confusion matrix is empty".into()));
    }
    let mut stages = [StageMetrics {
        recall: None,
        precision: None,
        f1: None,
    }; NUM_STAGES];
    let mut diag = 0.0;
    let mut chance = 0.0;
    for (s, m) in stages.iter_mut().enumerate() {
        let tp = cm.0[s][s];
        let (row, col) = (cm.row(s), cm.col(s));
        diag += tp;
        chance += (row / total) * (col / total);
        m.recall = ratio(tp, row);
        m.precision = ratio(tp, col);
        m.f1 = match (m.precision, m.recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
    }
    let f1s: Vec<f64> = stages.iter().filter_map(|m| m.f1).collect();
    let mf1 = if f1s.is_empty() {
        0.0
    } else {
        f1s.iter().sum::<f64>() / f1s.len() as f64
    };
    let accuracy = diag / total;
    let kappa = if chance < 1.0 { (accuracy - chance) / (1.0 - chance) } else { 1.0 };
    Ok(MetricReport {
        stages,
        accuracy,
        mf1,
        kappa,
        total,
    })
}

/// Mean and sample standard deviation of a score across folds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Spread { mean, std })
    }
}

/// Per-fold reports summarized fold-wise, next to the pooled report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub pooled: MetricReport,
    pub folds: Vec<MetricReport>,
    pub accuracy: Spread,
    pub mf1: Spread,
    pub kappa: Spread,
}

pub fn cross_validation(folds: &[ConfusionMatrix]) -> Result<CrossValidation> {
    let mut pooled = ConfusionMatrix::default();
    folds.iter().for_each(|f| pooled.add(f));
    let reports = folds.iter().map(report).collect::<Result<Vec<_>>>()?;
    let spread = |f: fn(&MetricReport) -> f64| Spread::of(&reports.iter().map(f).collect::<Vec<_>>());
    let empty = || Error::Metric("no folds".into());
    Ok(CrossValidation {
        pooled: report(&pooled)?,
        accuracy: spread(|r| r.accuracy).ok_or_else(empty)?,
        mf1: spread(|r| r.mf1).ok_or_else(empty)?,
        kappa: spread(|r| r.kappa).ok_or_else(empty)?,
        folds: reports,
    })
}

/// κ of two label sequences, or 0 for an empty one.
pub fn kappa(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Ok(0.0);
    }
    Ok(report(&confusion(truth, pred)?)?.kappa)
}

/// One off-diagonal (single stage, multi stage) cell of the agreement table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementCell {
    pub total: usize,
    /// Single wrong, multi right.
    pub corrected: usize,
    /// Single right, multi wrong.
    pub corrupted: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgreementMatrix(pub [[AgreementCell; NUM_STAGES]; NUM_STAGES]);

impl AgreementMatrix {
    pub fn is_empty(&self) -> bool {
        self.0.iter().flatten().all(|c| c.total == 0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("single,multi,total,corrected,corrupted\n");
        for (i, row) in self.0.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if c.total > 0 {
                    s += &format!(
                        "{},{},{},{},{}\n",
                        StageLabel::ALL[i],
                        StageLabel::ALL[j],
                        c.total,
                        c.corrected,
                        c.corrupted
                    );
                }
            }
        }
        s
    }
}

pub fn agreement_matrix(single: &[usize], multi: &[usize], truth: &[usize]) -> Result<AgreementMatrix> {
    if single.len() != multi.len() || single.len() != truth.len() {
        return Err(Error::Metric("agreement inputs differ in length".into()));
    }
    let mut m = AgreementMatrix::default();
    for ((&s, &o), &t) in single.iter().zip(multi).zip(truth) {
        if s >= NUM_STAGES || o >= NUM_STAGES || t >= NUM_STAGES {
            return Err(Error::Metric("stage index out of range".into()));
        }
        if s == o {
            continue;
        }
        let cell = &mut m.0[s][o];
        cell.total += 1;
        if s != t && o == t {
            cell.corrected += 1;
        } else if s == t {
            cell.corrupted += 1;
        }
    }
    Ok(m)
}
