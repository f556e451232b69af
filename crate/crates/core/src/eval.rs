//! Regression metrics.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no predictions to evaluate")]
    Empty,
    #[error("malformed metric line `{0}`")]
    Malformed(String),
}

fn check(predictions: &[f64], labels: &[f64]) -> Result<(), EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn rmse(predictions: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check(predictions, labels)?;
    let sse: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok((sse / predictions.len() as f64).sqrt())
}

pub fn mae(predictions: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check(predictions, labels)?;
    let sae: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y).abs())
        .sum();
    Ok(sae / predictions.len() as f64)
}

/// `1 + m + m·d + max(0, L − 1)·d²`.
pub fn count_params(params: &ModelParams) -> usize {
    params.param_count()
}

/// Clamps predictions into `[0, 1]`. Only used when clipping is requested.
pub fn clip_unit(predictions: &mut [f64]) {
    for p in predictions {
        *p = p.clamp(0.0, 1.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
    pub param_count: usize,
}

impl MetricReport {
    pub fn compute(
        predictions: &[f64],
        labels: &[f64],
        param_count: usize,
    ) -> Result<Self, EvalError> {
        Ok(MetricReport {
            rmse: rmse(predictions, labels)?,
            mae: mae(predictions, labels)?,
            n: predictions.len(),
            param_count,
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rmse={} mae={} n={} params={}",
            self.rmse, self.mae, self.n, self.param_count
        )
    }
}

impl FromStr for MetricReport {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, EvalError> {
        let bad = || EvalError::Malformed(s.to_string());
        let (mut rmse, mut mae, mut n, mut params) = (None, None, None, None);
        for tok in s.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(bad)?;
            match k {
                "rmse" => rmse = v.parse().ok(),
                "mae" => mae = v.parse().ok(),
                "n" => n = v.parse().ok(),
                "params" => params = v.parse().ok(),
                _ => {}
            }
        }
        Ok(MetricReport {
            rmse: rmse.ok_or_else(bad)?,
            mae: mae.ok_or_else(bad)?,
            n: n.ok_or_else(bad)?,
            param_count: params.ok_or_else(bad)?,
        })
    }
}
