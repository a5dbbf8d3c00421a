//! Growth from matched diameters, and agreement between predicted and true
//! growth.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    TP,
    FP,
    TN,
    FN,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::TP => "TP",
            Outcome::FP => "FP",
            Outcome::TN => "TN",
            Outcome::FN => "FN",
        })
    }
}

/// Growth means a strictly positive difference; zero counts as no growth.
pub fn classify_outcome(delta_pred: f64, delta_true: f64) -> Outcome {
    match (delta_pred > 0.0, delta_true > 0.0) {
        (true, true) => Outcome::TP,
        (true, false) => Outcome::FP,
        (false, false) => Outcome::TN,
        (false, true) => Outcome::FN,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthAssessment {
    pub case_id: String,
    pub d_t1: f64,
    pub d_t2: f64,
    pub delta_pred: f64,
    pub delta_true: f64,
    pub outcome: Outcome,
}

impl GrowthAssessment {
    pub fn new(case_id: impl Into<String>, d_t1: f64, d_t2: f64, delta_true: f64) -> Self {
        let delta_pred = d_t2 - d_t1;
        Self { case_id: case_id.into(), d_t1, d_t2, delta_pred, delta_true, outcome: classify_outcome(delta_pred, delta_true) }
    }
}

pub fn confusion(assessments: &[GrowthAssessment]) -> ConfusionMatrix {
    ConfusionMatrix::from_pairs(assessments.iter().map(|a| (a.delta_pred > 0.0, a.delta_true > 0.0)))
}

/// Share of cases whose predicted growth has the right sign.
pub fn sign_accuracy(assessments: &[GrowthAssessment]) -> Result<f64> {
    crate::metrics::accuracy(&confusion(assessments))
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions vs {} ground-truth values", pred.len(), truth.len())));
    }
    if pred.len() < 2 {
        return Err(Error::InvalidArgument(format!("agreement statistics need at least 2 values, got {}", pred.len())));
    }
    Ok(())
}

fn differences(pred: &[f64], truth: &[f64]) -> Vec<f64> {
    pred.iter().zip(truth).map(|(p, t)| p - t).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64], m: f64) -> f64 {
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Mean of `pred - truth` and the 95% limits `mean ± 1.96 sd`.
pub fn bland_altman(pred: &[f64], truth: &[f64]) -> Result<BlandAltman> {
    check_pair(pred, truth)?;
    let d = differences(pred, truth);
    let m = mean(&d);
    let sd = sample_sd(&d, m);
    Ok(BlandAltman { mean_diff: m, sd_diff: sd, loa_low: m - 1.96 * sd, loa_high: m + 1.96 * sd })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionStats {
    pub mae: f64,
    pub mae_sd: f64,
    pub mse: f64,
    pub mse_sd: f64,
    pub r2: f64,
}

pub fn regression_stats(pred: &[f64], truth: &[f64]) -> Result<RegressionStats> {
    check_pair(pred, truth)?;
    let d = differences(pred, truth);
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let sq: Vec<f64> = d.iter().map(|x| x * x).collect();
    let (mae, mse) = (mean(&abs), mean(&sq));
    let t_mean = mean(truth);
    let ss_tot: f64 = truth.iter().map(|t| (t - t_mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedScore { metric: "r2" });
    }
    let ss_res: f64 = sq.iter().sum();
    Ok(RegressionStats { mae, mae_sd: sample_sd(&abs, mae), mse, mse_sd: sample_sd(&sq, mse), r2: 1.0 - ss_res / ss_tot })
}

/// Optional transform applied to both series before differencing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestTransform {
    #[default]
    Raw,
    /// `ln(v + offset)`; every shifted value must be positive.
    LogOffset(f64),
}

/// Two-sided one-sample t-test of `pred - truth` against zero.
pub fn paired_t_test(pred: &[f64], truth: &[f64], transform: TTestTransform) -> Result<f64> {
    check_pair(pred, truth)?;
    let (p, t) = match transform {
        TTestTransform::Raw => (pred.to_vec(), truth.to_vec()),
        TTestTransform::LogOffset(off) => {
            let f = |v: &[f64]| -> Result<Vec<f64>> {
                v.iter()
                    .map(|x| {
                        if x + off > 0.0 {
                            Ok((x + off).ln())
                        } else {
                            Err(Error::InvalidArgument(format!("log transform needs value + offset > 0, got {x} + {off}")))
                        }
                    })
                    .collect()
            };
            (f(pred)?, f(truth)?)
        }
    };
    let d = differences(&p, &t);
    let m = mean(&d);
    let sd = sample_sd(&d, m);
    if sd == 0.0 {
        return Ok(if m == 0.0 { 1.0 } else { 0.0 });
    }
    let stat = m / (sd / (d.len() as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, d.len() as f64 - 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((2.0 * dist.sf(stat.abs())).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub n: usize,
    pub mean_diff: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub mae: f64,
    pub mae_sd: f64,
    pub mse: f64,
    pub mse_sd: f64,
    /// `None` when the true growth is constant.
    pub r2: Option<f64>,
    pub t_test_p: f64,
}

pub fn agreement(pred: &[f64], truth: &[f64], transform: TTestTransform) -> Result<AgreementReport> {
    let ba = bland_altman(pred, truth)?;
    let (mae, mae_sd, mse, mse_sd, r2) = match regression_stats(pred, truth) {
        Ok(r) => (r.mae, r.mae_sd, r.mse, r.mse_sd, Some(r.r2)),
        Err(Error::UndefinedScore { .. }) => {
            let d = differences(pred, truth);
            let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
            let sq: Vec<f64> = d.iter().map(|x| x * x).collect();
            let (a, s) = (mean(&abs), mean(&sq));
            (a, sample_sd(&abs, a), s, sample_sd(&sq, s), None)
        }
        Err(e) => return Err(e),
    };
    Ok(AgreementReport {
        n: pred.len(),
        mean_diff: ba.mean_diff,
        loa_low: ba.loa_low,
        loa_high: ba.loa_high,
        mae,
        mae_sd,
        mse,
        mse_sd,
        r2,
        t_test_p: paired_t_test(pred, truth, transform)?,
    })
}

pub const GROWTH_HEADER: [&str; 6] = ["case_id", "d_t1_pred", "d_t2_pred", "delta_pred", "delta_true", "outcome"];

pub fn write_growth_report(path: impl AsRef<Path>, rows: &[GrowthAssessment]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(GROWTH_HEADER)?;
    for r in rows {
        w.write_record([
            r.case_id.clone(),
            format!("{:.4}", r.d_t1),
            format!("{:.4}", r.d_t2),
            format!("{:.4}", r.delta_pred),
            format!("{:.4}", r.delta_true),
            r.outcome.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
