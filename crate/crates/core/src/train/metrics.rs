//! Hotspot F1, mean absolute error, turnaround time, and the report table.

use std::fmt::Write as _;
use std::time::Instant;

use thiserror::Error;

use super::{Case, TrainError};
use crate::raster::Grid;

/// Hotspot cells exceed this fraction of the true maximum.
pub const HOTSPOT_FRACTION: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("maps differ in size: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("truth map has no positive value; hotspot threshold is degenerate")]
    AllZeroTruth,
}

/// F1 of hotspot detection with threshold `0.9 * max(truth)` applied to both
/// maps; 0 when there is no true positive.
pub fn f1_score(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::ShapeMismatch(pred.len(), truth.len()));
    }
    let max = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(MetricError::AllZeroTruth);
    }
    let t = HOTSPOT_FRACTION * max;
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &y) in pred.iter().zip(truth) {
        match (p > t, y > t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fne) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::ShapeMismatch(pred.len(), truth.len()));
    }
    let n = truth.len().max(1) as f64;
    // Neumaier-compensated sum
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (a, b) in pred.iter().zip(truth) {
        let x = (a - b).abs();
        let t = sum + x;
        comp += if sum.abs() >= x { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    Ok((sum + comp) / n)
}

/// Anything that maps a case to an IR-drop map at its native resolution.
pub trait Predictor {
    fn predict(&self, case: &Case) -> Result<Grid<f64>, TrainError>;
}

/// Returns the golden map; used to self-test the evaluation path.
#[derive(Debug, Clone, Copy, Default)]
pub struct GoldenPredictor;

impl Predictor for GoldenPredictor {
    fn predict(&self, case: &Case) -> Result<Grid<f64>, TrainError> {
        Ok(case.target.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub case_id: String,
    pub f1: f64,
    /// Volts.
    pub mae: f64,
    pub tat_s: f64,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub rows: Vec<EvalRow>,
}

/// Column averages `(f1, mae, tat)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub f1: f64,
    pub mae: f64,
    pub tat_s: f64,
}

impl EvalReport {
    pub fn average(&self) -> Summary {
        let n = self.rows.len().max(1) as f64;
        Summary {
            f1: self.rows.iter().map(|r| r.f1).sum::<f64>() / n,
            mae: self.rows.iter().map(|r| r.mae).sum::<f64>() / n,
            tat_s: self.rows.iter().map(|r| r.tat_s).sum::<f64>() / n,
        }
    }

    /// Averages of `self` divided by those of `baseline`.
    pub fn ratio_to(&self, baseline: &EvalReport) -> Summary {
        let (a, b) = (self.average(), baseline.average());
        let div = |x: f64, y: f64| if y == 0.0 { f64::NAN } else { x / y };
        Summary { f1: div(a.f1, b.f1), mae: div(a.mae, b.mae), tat_s: div(a.tat_s, b.tat_s) }
    }
}

pub const REPORT_HEADER: &str = "config,case,f1,mae_1e-4,tat_s";

/// One table for several reports: case rows, an `Avg` row per report, and a
/// `Ratio` row against `baseline` (matched by label) when given.
pub fn reports_csv(reports: &[EvalReport], baseline: Option<&str>) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    let base = baseline.and_then(|b| reports.iter().find(|r| r.label == b));
    for rep in reports {
        for r in &rep.rows {
            let _ = writeln!(s, "{},{},{:.4},{:.4},{:.6}", rep.label, r.case_id, r.f1, r.mae * 1e4, r.tat_s);
        }
        let a = rep.average();
        let _ = writeln!(s, "{},Avg,{:.4},{:.4},{:.6}", rep.label, a.f1, a.mae * 1e4, a.tat_s);
        if let Some(b) = base {
            let q = rep.ratio_to(b);
            let _ = writeln!(s, "{},Ratio,{:.4},{:.4},{:.4}", rep.label, q.f1, q.mae, q.tat_s);
        }
    }
    s
}

/// Runs `p` over `cases`; wall-clock time per case covers the whole
/// prediction call including preprocessing.
pub fn evaluate<P: Predictor + ?Sized>(p: &P, cases: &[Case], label: &str) -> Result<EvalReport, TrainError> {
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        let start = Instant::now();
        let pred = p.predict(case)?;
        let tat_s = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
        let (f1, note) = match f1_score(pred.data(), case.target.data()) {
            Ok(f) => (f, None),
            Err(MetricError::AllZeroTruth) => {
                log::warn!("case {}: all-zero truth, F1 set to 0", case.id);
                (0.0, Some(MetricError::AllZeroTruth.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let mae = mae(pred.data(), case.target.data())?;
        rows.push(EvalRow { case_id: case.id.clone(), f1, mae, tat_s, note });
    }
    Ok(EvalReport { label: label.to_string(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion_cases() {
        assert_eq!(f1_score(&[0.5, 1.0], &[1.0, 0.5]), Ok(0.0));
        assert_eq!(f1_score(&[1.0, 0.5, 0.95, 0.1], &[1.0, 0.95, 0.5, 0.1]), Ok(0.5));
        assert_eq!(f1_score(&[3.0, 1.0], &[3.0, 1.0]), Ok(1.0));
        assert_eq!(f1_score(&[1.0], &[0.0]), Err(MetricError::AllZeroTruth));
        assert!(f1_score(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        // 0.9 exactly at the threshold is negative in both maps
        assert_eq!(f1_score(&[0.9, 1.0], &[0.9, 1.0]), Ok(1.0));
        assert_eq!(f1_score(&[0.9, 0.0], &[1.0, 0.9]), Ok(0.0));
    }

    #[test]
    fn mae_offset() {
        let t = vec![0.0; 1000];
        let p = vec![1e-4; 1000];
        assert_eq!(mae(&p, &t), Ok(1e-4));
        let t = [0.25, 0.5, 0.125];
        let p: Vec<f64> = t.iter().map(|v| v + 1e-4).collect();
        assert!((mae(&p, &t).unwrap() - 1e-4).abs() < 1e-16);
        assert_eq!(mae(&t, &t), Ok(0.0));
    }

    #[test]
    fn csv_layout() {
        let rep = EvalReport {
            label: "United".into(),
            rows: vec![
                EvalRow { case_id: "a".into(), f1: 1.0, mae: 1e-4, tat_s: 0.5, note: None },
                EvalRow { case_id: "b".into(), f1: 0.0, mae: 3e-4, tat_s: 1.5, note: None },
            ],
        };
        let csv = reports_csv(&[rep], Some("United"));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert_eq!(lines[3], "United,Avg,0.5000,2.0000,1.000000");
        assert_eq!(lines[4], "United,Ratio,1.0000,1.0000,1.0000");
    }
}
