//! Weighted Cox partial-likelihood engine.
//!
//! Every observation is an event (this domain has no censoring). Ties use
//! the Breslow form in the baseline and, by default, in the score; the Efron
//! score is available for designs with many tied rows. Risk sets are either
//! everybody still alive (`FromOrigin`) or everybody alive and already
//! entered (`FromEntry`, the delayed-entry adjustment for left truncation).
//!
//! Internally observations are binned on their distinct event times and each
//! row points at a covariate vector in a shared table, so the EM M-step can
//! feed an `n x d` expanded design without copying covariates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Bound, TruncatedDataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskRule {
    /// Risk set at `t` is `{j : entry_j <= t <= time_j}`.
    FromEntry,
    /// Risk set at `t` is `{j : time_j >= t}`.
    FromOrigin,
}

/// Tie handling in the partial likelihood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ties {
    #[default]
    Breslow,
    /// Efron's correction with weighted rows handled as in `coxph`: tied rows
    /// share the average weight and the tied risk mass is peeled off in equal
    /// fractions of the row count.
    Efron,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedObservation {
    pub time: f64,
    pub weight: f64,
    /// Risk-set entry time; `None` is `-inf`.
    pub entry: Option<f64>,
    pub z: Vec<f64>,
}

impl WeightedObservation {
    pub fn new(time: f64, weight: f64, entry: Option<f64>, z: Vec<f64>) -> Self {
        Self { time, weight, entry, z }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Max-norm of the score at convergence.
    pub tol: f64,
    /// Relative log-likelihood change accepted as stationary.
    pub loglik_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-8, loglik_tol: 1e-10, max_iter: 100, max_halvings: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub beta: Vec<f64>,
    /// `(t_j, lambda_j)` jumps of the Breslow baseline.
    pub baseline: Vec<(f64, f64)>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub score_norm: f64,
}

impl CoxFit {
    pub fn jumps(&self) -> Vec<f64> {
        self.baseline.iter().map(|&(_, l)| l).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DesignRow {
    /// Index into the covariate table.
    pub subject: usize,
    /// Event-time bin.
    pub bin: usize,
    /// First bin at which the row is at risk.
    pub first_bin: usize,
    pub weight: f64,
}

/// Binned weighted-Cox problem.
#[derive(Clone, Debug)]
pub(crate) struct RiskDesign<'a> {
    p: usize,
    /// Row-major `subjects x p` covariates.
    z: std::borrow::Cow<'a, [f64]>,
    times: Vec<f64>,
    rows: Vec<DesignRow>,
    event_mass: Vec<f64>,
    tie_count: Vec<usize>,
    ties: Ties,
}

struct Evaluation {
    loglik: f64,
    score: Vec<f64>,
    info: Vec<f64>,
}

impl<'a> RiskDesign<'a> {
    /// Builds a design from rows already binned on `times`. Rows with zero
    /// weight are dropped.
    pub(crate) fn from_binned(
        p: usize,
        z: std::borrow::Cow<'a, [f64]>,
        times: Vec<f64>,
        rows: impl IntoIterator<Item = DesignRow>,
    ) -> Result<Self> {
        let rows: Vec<DesignRow> = rows.into_iter().filter(|r| r.weight > 0.0).collect();
        if rows.is_empty() {
            return Err(Error::NoPositiveWeight);
        }
        let mut event_mass = vec![0.0; times.len()];
        let mut tie_count = vec![0; times.len()];
        for r in &rows {
            event_mass[r.bin] += r.weight;
            tie_count[r.bin] += 1;
        }
        Ok(Self { p, z, times, rows, event_mass, tie_count, ties: Ties::Breslow })
    }

    pub(crate) fn with_ties(mut self, ties: Ties) -> Self {
        self.ties = ties;
        self
    }

    pub(crate) fn from_observations(obs: &[WeightedObservation], rule: RiskRule) -> Result<RiskDesign<'static>> {
        let p = obs.first().map(|o| o.z.len()).ok_or(Error::NoPositiveWeight)?;
        for o in obs {
            if o.z.len() != p {
                return Err(Error::DimensionMismatch { expected: p, actual: o.z.len() });
            }
            if !(o.weight >= 0.0 && o.weight.is_finite()) {
                return Err(Error::InvalidArgument(format!("weight {} must be finite and nonnegative", o.weight)));
            }
            if matches!(o.entry, Some(e) if e > o.time) {
                return Err(Error::InvalidArgument(format!("entry {:?} after event time {}", o.entry, o.time)));
            }
        }
        let mut times: Vec<f64> = obs.iter().filter(|o| o.weight > 0.0).map(|o| o.time).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let z: Vec<f64> = obs.iter().flat_map(|o| o.z.iter().copied()).collect();
        let rows: Vec<DesignRow> = obs
            .iter()
            .enumerate()
            .filter(|(_, o)| o.weight > 0.0)
            .map(|(i, o)| {
                let bin = times.partition_point(|&t| t < o.time);
                let first_bin = match (rule, o.entry) {
                    (RiskRule::FromEntry, Some(e)) => times.partition_point(|&t| t < e),
                    _ => 0,
                };
                DesignRow { subject: i, bin, first_bin, weight: o.weight }
            })
            .collect();
        RiskDesign::from_binned(p, std::borrow::Cow::Owned(z), times, rows)
    }

    pub(crate) fn times(&self) -> &[f64] {
        &self.times
    }

    fn subject_z(&self, s: usize) -> &[f64] {
        &self.z[s * self.p..(s + 1) * self.p]
    }

    /// Linear predictors for every subject referenced by a row, shifted by
    /// their maximum so the exponentials cannot overflow.
    fn scaled_risks(&self, beta: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let n_subjects = self.z.len() / self.p.max(1);
        let eta: Vec<f64> = (0..n_subjects)
            .map(|s| self.subject_z(s).iter().zip(beta).map(|(z, b)| z * b).sum())
            .collect();
        let shift = self.rows.iter().map(|r| eta[r.subject]).fold(f64::NEG_INFINITY, f64::max);
        let risk = eta.iter().map(|e| (e - shift).exp()).collect();
        (eta, risk, shift)
    }

    /// `S0(t_j)` scaled by `exp(-shift)`; uses difference arrays so each row
    /// is touched once.
    fn risk_mass(&self, risk: &[f64]) -> Vec<f64> {
        let d = self.times.len();
        let mut diff = vec![0.0; d + 1];
        for r in &self.rows {
            let c = r.weight * risk[r.subject];
            diff[r.bin] += c;
            if r.first_bin > 0 {
                diff[r.first_bin - 1] -= c;
            }
        }
        let mut acc = 0.0;
        let mut out = vec![0.0; d];
        for j in (0..d).rev() {
            acc += diff[j];
            out[j] = acc;
        }
        out
    }

    fn evaluate(&self, beta: &[f64], derivatives: bool) -> Result<Evaluation> {
        let p = self.p;
        let d = self.times.len();
        let efron = self.ties == Ties::Efron;
        let (eta, risk, shift) = self.scaled_risks(beta);
        let width = if derivatives { 1 + p + p * p } else { 1 };
        let mut diff = vec![0.0; (d + 1) * width];
        // Risk mass of the rows failing in each bin (Efron only).
        let mut tied = if efron { vec![0.0; d * width] } else { Vec::new() };
        let mut loglik = 0.0;
        let mut score = vec![0.0; p];
        let accumulate = |buf: &mut [f64], base: usize, c: f64, zs: &[f64]| {
            buf[base] += c;
            if derivatives {
                for a in 0..p {
                    buf[base + 1 + a] += c * zs[a];
                    for b in 0..p {
                        buf[base + 1 + p + a * p + b] += c * zs[a] * zs[b];
                    }
                }
            }
        };
        for r in &self.rows {
            let zs = self.subject_z(r.subject);
            loglik += r.weight * eta[r.subject];
            let c = r.weight * risk[r.subject];
            accumulate(&mut diff, r.bin * width, c, zs);
            if r.first_bin > 0 {
                accumulate(&mut diff, (r.first_bin - 1) * width, -c, zs);
            }
            if efron && self.tie_count[r.bin] > 1 {
                accumulate(&mut tied, r.bin * width, c, zs);
            }
            if derivatives {
                for a in 0..p {
                    score[a] += r.weight * zs[a];
                }
            }
        }
        let mut info = vec![0.0; p * p];
        let mut acc = vec![0.0; width];
        let mut adj = vec![0.0; width];
        for j in (0..d).rev() {
            for k in 0..width {
                acc[k] += diff[j * width + k];
            }
            let mass = self.event_mass[j];
            if mass <= 0.0 {
                continue;
            }
            if !(acc[0] > 0.0) {
                return Err(Error::EmptyRiskSet { time: self.times[j] });
            }
            let nd = if efron { self.tie_count[j] } else { 1 };
            let share = mass / nd as f64;
            for step in 0..nd {
                let frac = step as f64 / nd as f64;
                for k in 0..width {
                    adj[k] = if step == 0 { acc[k] } else { acc[k] - frac * tied[j * width + k] };
                }
                let s0 = adj[0];
                loglik -= share * (s0.ln() + shift);
                if derivatives {
                    for a in 0..p {
                        let ma = adj[1 + a] / s0;
                        score[a] -= share * ma;
                        for b in 0..p {
                            let mb = adj[1 + b] / s0;
                            info[a * p + b] += share * (adj[1 + p + a * p + b] / s0 - ma * mb);
                        }
                    }
                }
            }
        }
        Ok(Evaluation { loglik, score, info })
    }

    pub(crate) fn loglik(&self, beta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(beta, false)?.loglik)
    }

    #[cfg(test)]
    pub(crate) fn score(&self, beta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(beta, true)?.score)
    }

    /// Breslow jumps `event mass / S0` at each bin for a fixed `beta`.
    pub(crate) fn baseline(&self, beta: &[f64]) -> Result<Vec<f64>> {
        let (_, risk, shift) = self.scaled_risks(beta);
        let s0 = self.risk_mass(&risk);
        let scale = (-shift).exp();
        self.event_mass
            .iter()
            .zip(&s0)
            .zip(&self.times)
            .map(|((&m, &s), &t)| {
                if m > 0.0 && !(s > 0.0) {
                    Err(Error::EmptyRiskSet { time: t })
                } else {
                    Ok(m / s * scale)
                }
            })
            .collect()
    }

    /// Newton-Raphson with step halving from `init`.
    pub(crate) fn solve(&self, init: &[f64], settings: &SolverSettings) -> Result<(Vec<f64>, f64, usize, bool, f64)> {
        let p = self.p;
        if init.len() != p {
            return Err(Error::DimensionMismatch { expected: p, actual: init.len() });
        }
        let mut beta = init.to_vec();
        let mut current = self.evaluate(&beta, true)?;
        // A degenerate design can have a zero score at the start; reject it
        // before declaring convergence.
        newton_step(p, &current.info, &current.score)?;
        let max_norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for iter in 0..=settings.max_iter {
            let norm = max_norm(&current.score);
            if norm < settings.tol {
                return Ok((beta, current.loglik, iter, true, norm));
            }
            if iter == settings.max_iter {
                break;
            }
            let step = newton_step(p, &current.info, &current.score)?;
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..=settings.max_halvings {
                let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
                match self.evaluate(&trial, true) {
                    Ok(ev) if ev.loglik.is_finite() && ev.loglik >= current.loglik - 1e-12 * current.loglik.abs() => {
                        accepted = Some((trial, ev));
                        break;
                    }
                    Ok(_) | Err(Error::EmptyRiskSet { .. }) => scale *= 0.5,
                    Err(e) => return Err(e),
                }
            }
            let Some((trial, ev)) = accepted else {
                return Err(Error::NoConvergence { iterations: iter + 1 });
            };
            let rel = (ev.loglik - current.loglik).abs() / current.loglik.abs().max(1.0);
            beta = trial;
            current = ev;
            let norm = max_norm(&current.score);
            if rel < settings.loglik_tol && norm < settings.tol.sqrt() {
                // Stationary in the objective; accept when the score is at least near zero.
                return Ok((beta, current.loglik, iter + 1, norm < settings.tol, norm));
            }
        }
        Err(Error::NoConvergence { iterations: settings.max_iter })
    }
}

fn newton_step(p: usize, info: &[f64], score: &[f64]) -> Result<Vec<f64>> {
    let h = DMatrix::from_row_slice(p, p, info);
    let scale = (0..p).map(|i| h[(i, i)].abs()).fold(0.0f64, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::SingularHessian);
    }
    let chol = h.clone().cholesky().ok_or(Error::SingularHessian)?;
    // Reject numerically rank-deficient information.
    let l = chol.l();
    let min_pivot = (0..p).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e-12 * scale {
        return Err(Error::SingularHessian);
    }
    let step = chol.solve(&DVector::from_column_slice(score));
    Ok(step.iter().copied().collect())
}

fn fit_design(design: &RiskDesign<'_>, init: &[f64], settings: &SolverSettings) -> Result<CoxFit> {
    let (beta, loglik, iterations, converged, score_norm) = design.solve(init, settings)?;
    let jumps = design.baseline(&beta)?;
    let baseline = design.times().iter().copied().zip(jumps).collect();
    Ok(CoxFit { beta, baseline, loglik, iterations, converged, score_norm })
}

/// Fits the weighted Cox model by Newton-Raphson.
pub fn fit_weighted_cox(
    observations: &[WeightedObservation],
    risk_rule: RiskRule,
    init: &[f64],
    settings: &SolverSettings,
) -> Result<CoxFit> {
    let design = RiskDesign::from_observations(observations, risk_rule)?;
    fit_design(&design, init, settings)
}

/// Breslow baseline jumps for a fixed coefficient vector.
pub fn breslow_baseline(
    beta: &[f64],
    observations: &[WeightedObservation],
    risk_rule: RiskRule,
) -> Result<Vec<(f64, f64)>> {
    let design = RiskDesign::from_observations(observations, risk_rule)?;
    if beta.len() != design.p {
        return Err(Error::DimensionMismatch { expected: design.p, actual: beta.len() });
    }
    let jumps = design.baseline(beta)?;
    Ok(design.times().iter().copied().zip(jumps).collect())
}

/// Weighted partial log-likelihood at `beta` (Breslow ties).
pub fn partial_loglik(beta: &[f64], observations: &[WeightedObservation], risk_rule: RiskRule) -> Result<f64> {
    RiskDesign::from_observations(observations, risk_rule)?.loglik(beta)
}

/// Design over the dataset's subjects with one row per subject.
pub(crate) fn subject_design<'a>(
    dataset: &'a TruncatedDataset,
    weights: Option<&[f64]>,
    rule: RiskRule,
) -> Result<RiskDesign<'a>> {
    let times = dataset.distinct_times().to_vec();
    let z: Vec<f64> = dataset.records().iter().flat_map(|r| r.z.iter().copied()).collect();
    let rows: Vec<DesignRow> = dataset
        .records()
        .iter()
        .zip(dataset.time_index())
        .enumerate()
        .map(|(i, (r, &bin))| {
            let first_bin = match (rule, r.left) {
                (RiskRule::FromEntry, Bound::At(l)) => times.partition_point(|&t| t < l),
                _ => 0,
            };
            DesignRow { subject: i, bin, first_bin, weight: weights.map_or(1.0, |w| w[i]) }
        })
        .collect();
    RiskDesign::from_binned(dataset.p(), std::borrow::Cow::Owned(z), times, rows)
}

pub(crate) fn fit_subjects(
    dataset: &TruncatedDataset,
    weights: Option<&[f64]>,
    rule: RiskRule,
    init: Option<&[f64]>,
    settings: &SolverSettings,
) -> Result<CoxFit> {
    let design = subject_design(dataset, weights, rule)?;
    let zeros = vec![0.0; dataset.p()];
    fit_design(&design, init.unwrap_or(&zeros), settings)
}

/// Standard Cox estimator that ignores truncation.
pub fn cox_standard(dataset: &TruncatedDataset) -> Result<CoxFit> {
    fit_subjects(dataset, None, RiskRule::FromOrigin, None, &SolverSettings::default())
}

/// Cox estimator with delayed-entry risk sets `{j : L_j <= t <= T_j}`.
/// Right truncation, if present, is ignored.
pub fn cox_left_adjusted(dataset: &TruncatedDataset) -> Result<CoxFit> {
    fit_subjects(dataset, None, RiskRule::FromEntry, None, &SolverSettings::default())
}

/// Converts a dataset into unit-weight observations, entry at `L` when
/// requested.
pub fn observations_from(dataset: &TruncatedDataset, weights: Option<&[f64]>, with_entry: bool) -> Vec<WeightedObservation> {
    dataset
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let entry = if with_entry { r.left.finite() } else { None };
            WeightedObservation::new(r.time, weights.map_or(1.0, |w| w[i]), entry, r.z.clone())
        })
        .collect()
}
