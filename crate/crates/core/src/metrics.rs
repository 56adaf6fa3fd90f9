//! Edit-distance based evaluation metrics.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::LabelSequence;

/// Unit-cost Levenshtein distance.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (j, &lj) in long.iter().enumerate() {
        let mut diag = row[0];
        row[0] = j + 1;
        for (i, &si) in short.iter().enumerate() {
            let above = row[i + 1];
            row[i + 1] = if si == lj {
                diag
            } else {
                1 + diag.min(above).min(row[i])
            };
            diag = above;
        }
    }
    row[short.len()]
}

/// Edit distance normalized by the reference length.
///
/// With an empty reference the rate is the prediction length (0 when both are empty).
pub fn label_error_rate(pred: &LabelSequence, truth: &LabelSequence) -> f64 {
    if truth.is_empty() {
        return pred.len() as f64;
    }
    edit_distance(pred.as_slice(), truth.as_slice()) as f64 / truth.len() as f64
}

/// Fraction of sequences not predicted exactly.
pub fn sequence_error_rate(preds: &[LabelSequence], truths: &[LabelSequence]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::domain(format!(
            "{} predictions for {} references",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::domain("sequence error rate of an empty set"));
    }
    let wrong = preds.iter().zip(truths).filter(|(p, t)| p != t).count();
    Ok(wrong as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Loss,
    Ler,
    Ser,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "loss" => Ok(Metric::Loss),
            "ler" => Ok(Metric::Ler),
            "ser" => Ok(Metric::Ser),
            other => Err(Error::domain(format!("unknown metric {other:?}"))),
        }
    }
}

/// Parses a comma-separated metric list such as `loss,ler,ser`.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Metric = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::domain("no metrics requested"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ler: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ler_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ser: Option<f64>,
}

impl MetricsReport {
    /// Fills the requested fields from per-sequence losses and decodes.
    /// `losses` is only consulted when `Metric::Loss` is requested.
    pub fn compute(
        metrics: &[Metric],
        losses: Option<&[f64]>,
        preds: &[LabelSequence],
        truths: &[LabelSequence],
    ) -> Result<Self> {
        let mut report = MetricsReport::default();
        if metrics.contains(&Metric::Loss) {
            let losses = losses.ok_or_else(|| Error::domain("loss metric needs per-sequence losses"))?;
            if losses.is_empty() {
                return Err(Error::domain("loss over an empty set"));
            }
            report.loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
        }
        if metrics.contains(&Metric::Ler) {
            if preds.len() != truths.len() || preds.is_empty() {
                return Err(Error::domain("label error rate needs one prediction per reference"));
            }
            let ler: Vec<f64> = preds
                .iter()
                .zip(truths)
                .map(|(p, t)| label_error_rate(p, t))
                .collect();
            report.ler_mean = Some(ler.iter().sum::<f64>() / ler.len() as f64);
            report.ler = Some(ler);
        }
        if metrics.contains(&Metric::Ser) {
            report.ser = Some(sequence_error_rate(preds, truths)?);
        }
        Ok(report)
    }
}
