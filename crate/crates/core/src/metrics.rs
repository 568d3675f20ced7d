//! MAE, RMSE, Spearman rank correlation and report tables.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(actual: &[f64], pred: &[f64]) -> Result<()> {
    if actual.len() != pred.len() {
        return Err(Error::shape(
            "metric",
            format!("{} actual values but {} predictions", actual.len(), pred.len()),
        ));
    }
    if actual.is_empty() {
        return Err(Error::invalid("metric over an empty list"));
    }
    Ok(())
}

pub fn mae(actual: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(actual, pred)?;
    let sum: f64 = actual.iter().zip(pred).map(|(a, p)| (a - p).abs()).sum();
    Ok(sum / actual.len() as f64)
}

pub fn rmse(actual: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(actual, pred)?;
    let sum: f64 = actual.iter().zip(pred).map(|(a, p)| (a - p) * (a - p)).sum();
    Ok((sum / actual.len() as f64).sqrt())
}

/// Spearman's rho, or `Undefined` when either list is constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rho {
    Value(f64),
    Undefined,
}

impl Rho {
    pub fn value(self) -> Option<f64> {
        match self {
            Rho::Value(v) => Some(v),
            Rho::Undefined => None,
        }
    }
}

impl fmt::Display for Rho {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rho::Value(v) => write!(f, "{v:.4}"),
            Rho::Undefined => f.write_str("undefined"),
        }
    }
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// `1 - 6 sum(d^2) / (n (n^2 - 1))` over average ranks.
pub fn spearman_rho(actual: &[f64], pred: &[f64]) -> Result<Rho> {
    check_pair(actual, pred)?;
    let n = actual.len();
    if n < 2 {
        return Err(Error::invalid(format!("spearman rho needs at least 2 samples, got {n}")));
    }
    if actual.iter().chain(pred).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman rho input".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(actual) || constant(pred) {
        return Ok(Rho::Undefined);
    }
    let ra = average_ranks(actual);
    let rp = average_ranks(pred);
    let d2: f64 = ra.iter().zip(&rp).map(|(a, p)| (a - p) * (a - p)).sum();
    let n = n as f64;
    Ok(Rho::Value(1.0 - 6.0 * d2 / (n * (n * n - 1.0))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub session: String,
    pub predicted: f64,
    pub actual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub features: String,
    pub mae: f64,
    pub rmse: f64,
    /// `None` when the ranking is degenerate.
    pub rho: Option<f64>,
    pub n: usize,
}

pub fn evaluate(predictions: &[Prediction], model: &str, features: &str) -> Result<EvalReport> {
    let actual: Vec<f64> = predictions.iter().map(|p| p.actual).collect();
    let pred: Vec<f64> = predictions.iter().map(|p| p.predicted).collect();
    Ok(EvalReport {
        model: model.to_string(),
        features: features.to_string(),
        mae: mae(&actual, &pred)?,
        rmse: rmse(&actual, &pred)?,
        rho: spearman_rho(&actual, &pred)?.value(),
        n: predictions.len(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<EvalReport>,
}

impl ReportTable {
    pub fn new(rows: Vec<EvalReport>) -> Self {
        Self { rows }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report rows serialize")
    }

    /// Fixed-width table; MAE and RMSE to 2 decimals, rho to 4.
    pub fn to_text(&self) -> String {
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.model.clone(),
                    r.features.clone(),
                    format!("{:.2}", r.mae),
                    format!("{:.2}", r.rmse),
                    r.rho.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}")),
                    r.n.to_string(),
                ]
            })
            .collect();
        let header = ["Model", "Features", "MAE↓", "RMSE↓", "ρ↑", "n"].map(String::from);
        let mut widths = header.clone().map(|h| h.chars().count());
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |row: &[String; 6]| {
            let parts: Vec<String> = row
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = line(&header);
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        assert_eq!(mae(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
        assert_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), (12.5f64).sqrt());
        assert_eq!(mae(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert!(mae(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spearman_hand_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman_rho(&a, &a).unwrap(), Rho::Value(1.0));
        assert_eq!(spearman_rho(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap(), Rho::Value(-1.0));
        assert_eq!(spearman_rho(&a, &[1.0, 3.0, 2.0, 4.0]).unwrap(), Rho::Value(0.8));
        assert_eq!(spearman_rho(&a, &[5.0; 4]).unwrap(), Rho::Undefined);
        assert!(spearman_rho(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn report_text_and_json_agree() {
        let preds: Vec<Prediction> = [(30.0, 31.0), (40.0, 38.5), (55.0, 57.0)]
            .iter()
            .enumerate()
            .map(|(i, &(a, p))| Prediction {
                session: format!("s{i}"),
                predicted: p,
                actual: a,
            })
            .collect();
        let r = evaluate(&preds, "Feature-Fusion with MHA", "FVTC + SSL").unwrap();
        let table = ReportTable::new(vec![r.clone(), EvalReport { rho: None, ..r.clone() }]);
        let text = table.to_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains(&format!("{:.2}", r.mae)));
        assert!(text.contains(&format!("{:.4}", r.rho.unwrap())));
        assert!(text.contains("undefined"));
        let json: serde_json::Value = serde_json::from_str(&table.to_json()).unwrap();
        assert_eq!(json["rows"][0]["mae"].as_f64().unwrap(), r.mae);
        assert!(json["rows"][1]["rho"].is_null());
    }
}
