//! Serializable fit report: estimates, bootstrap standard errors, Wald
//! p-values, the baseline hazard and solver diagnostics.

use serde::{Deserialize, Serialize};

use crate::data::{TruncatedDataset, TruncationMode};
use crate::error::{Error, Result};
use crate::inference::{BootstrapResult, Estimator, EstimatorFit};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineJump {
    pub time: f64,
    pub hazard: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub loglik: f64,
    pub bootstrap_resamples: usize,
    pub bootstrap_failures: usize,
    /// Smallest window probability under the final EM fit.
    pub min_alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub version: u32,
    pub method: Estimator,
    pub n: usize,
    pub mode: TruncationMode,
    pub coefficients: Vec<CoefficientRow>,
    pub baseline: Vec<BaselineJump>,
    pub diagnostics: FitDiagnostics,
}

/// Two-sided normal tail probability `P(|N(0,1)| >= |z|)`.
pub fn normal_two_sided_p(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

pub fn build_fit_report(
    dataset: &TruncatedDataset,
    covariate_names: &[String],
    method: Estimator,
    fit: &EstimatorFit,
    bootstrap: Option<&BootstrapResult>,
) -> Result<FitReport> {
    if covariate_names.len() != fit.beta.len() {
        return Err(Error::DimensionMismatch { expected: fit.beta.len(), actual: covariate_names.len() });
    }
    let coefficients = covariate_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let estimate = fit.beta[j];
            let se = bootstrap.map(|b| b.se[j]);
            let z = se.filter(|s| *s > 0.0).map(|s| estimate / s);
            CoefficientRow {
                name: name.clone(),
                estimate,
                se,
                z,
                p_value: z.map(normal_two_sided_p),
                ci_lower: bootstrap.map(|b| b.ci[j].0),
                ci_upper: bootstrap.map(|b| b.ci[j].1),
            }
        })
        .collect();
    Ok(FitReport {
        version: REPORT_VERSION,
        method,
        n: dataset.n(),
        mode: dataset.mode(),
        coefficients,
        baseline: fit.baseline.iter().map(|&(time, hazard)| BaselineJump { time, hazard }).collect(),
        diagnostics: FitDiagnostics {
            iterations: fit.iterations,
            converged: fit.converged,
            loglik: fit.loglik,
            bootstrap_resamples: bootstrap.map_or(0, |b| b.replicates.len() + b.failures),
            bootstrap_failures: bootstrap.map_or(0, |b| b.failures),
            min_alpha: fit.em.as_ref().and_then(|e| e.alpha.iter().copied().reduce(f64::min)),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_tail_values() {
        assert!((normal_two_sided_p(1.959963984540054) - 0.05).abs() < 1e-12);
        assert_eq!(normal_two_sided_p(0.0), 1.0);
        assert!((normal_two_sided_p(-1.0) - 0.31731050786291415).abs() < 1e-14);
    }
}
