//! Inverse-probability weighted Cox fit that assumes truncation independent
//! of the event time and covariates.
//!
//! Selection probabilities come from the nonparametric MLE of the event-time
//! and window distributions under quasi-independence, found by the usual
//! self-consistency iteration.

use serde::{Deserialize, Serialize};

use crate::cox::{fit_subjects, CoxFit, RiskRule, SolverSettings};
use crate::data::TruncatedDataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionEstimate {
    /// Estimated probability that a window covers each subject's event time.
    pub pi: Vec<f64>,
    /// Mass on each observed window `(L_j, R_j)`.
    pub k_mass: Vec<f64>,
    /// Mass on each observed event time.
    pub f_mass: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 5000;

/// Each window as a half-open range of positions in the sorted event times.
struct Coverage {
    order: Vec<usize>,
    ranges: Vec<(usize, usize)>,
}

impl Coverage {
    fn new(dataset: &TruncatedDataset) -> Self {
        let recs = dataset.records();
        let mut order: Vec<usize> = (0..recs.len()).collect();
        order.sort_by(|&a, &b| recs[a].time.total_cmp(&recs[b].time));
        let sorted: Vec<f64> = order.iter().map(|&i| recs[i].time).collect();
        let ranges = recs
            .iter()
            .map(|r| {
                let lo = sorted.partition_point(|&t| t < r.left.as_lower());
                let hi = sorted.partition_point(|&t| t <= r.right.as_upper());
                (lo, hi)
            })
            .collect();
        Self { order, ranges }
    }

    /// Connected components of the bipartite time/window graph.
    fn components(&self) -> usize {
        let mut ranges = self.ranges.clone();
        ranges.sort_unstable();
        let mut count = 0;
        let mut end = 0;
        for (lo, hi) in ranges {
            if count == 0 || lo >= end {
                count += 1;
                end = hi;
            } else {
                end = end.max(hi);
            }
        }
        count
    }
}

pub fn estimate_selection_probabilities(dataset: &TruncatedDataset, tol: f64, max_iter: usize) -> Result<SelectionEstimate> {
    let n = dataset.n();
    if n < 2 {
        return Err(Error::InvalidArgument("selection probabilities need at least two subjects".into()));
    }
    let cov = Coverage::new(dataset);
    let components = cov.components();
    if components > 1 {
        return Err(Error::NonIdentifiable { components });
    }
    let mut k = vec![1.0 / n as f64; n];
    // Masses on sorted event-time positions.
    let mut f_sorted = vec![0.0; n];
    let mut pi_sorted = coverage_of_times(&cov, &k);
    let mut prefix = vec![0.0; n + 1];
    for iter in 1..=max_iter {
        for (f, p) in f_sorted.iter_mut().zip(&pi_sorted) {
            *f = 1.0 / p;
        }
        normalize(&mut f_sorted);
        for (i, f) in f_sorted.iter().enumerate() {
            prefix[i + 1] = prefix[i] + f;
        }
        for (kj, &(lo, hi)) in k.iter_mut().zip(&cov.ranges) {
            *kj = 1.0 / (prefix[hi] - prefix[lo]);
        }
        normalize(&mut k);
        let next = coverage_of_times(&cov, &k);
        let delta = next.iter().zip(&pi_sorted).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        pi_sorted = next;
        if delta < tol {
            return Ok(assemble(&cov, pi_sorted, k, f_sorted, iter, true));
        }
    }
    Err(Error::NoConvergence { iterations: max_iter })
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

/// `pi` at each sorted time position: total window mass covering it.
fn coverage_of_times(cov: &Coverage, k: &[f64]) -> Vec<f64> {
    let n = cov.order.len();
    let mut diff = vec![0.0; n + 1];
    for (kj, &(lo, hi)) in k.iter().zip(&cov.ranges) {
        diff[lo] += kj;
        diff[hi] -= kj;
    }
    let mut acc = 0.0;
    diff[..n]
        .iter()
        .map(|d| {
            acc += d;
            acc.min(1.0)
        })
        .collect()
}

fn assemble(cov: &Coverage, pi_sorted: Vec<f64>, k: Vec<f64>, f_sorted: Vec<f64>, iterations: usize, converged: bool) -> SelectionEstimate {
    let n = cov.order.len();
    let mut pi = vec![0.0; n];
    let mut f_mass = vec![0.0; n];
    for (pos, &i) in cov.order.iter().enumerate() {
        pi[i] = pi_sorted[pos];
        f_mass[i] = f_sorted[pos];
    }
    SelectionEstimate { pi, k_mass: k, f_mass, iterations, converged }
}

/// Cox fit with per-subject weights `1 / pi_i` and unrestricted risk sets.
pub fn fit_weighted(dataset: &TruncatedDataset, pi: &[f64]) -> Result<CoxFit> {
    if pi.len() != dataset.n() {
        return Err(Error::DimensionMismatch { expected: dataset.n(), actual: pi.len() });
    }
    if let Some(p) = pi.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::InvalidArgument(format!("selection probability {p} outside (0, 1]")));
    }
    let w: Vec<f64> = pi.iter().map(|p| 1.0 / p).collect();
    fit_subjects(dataset, Some(&w), RiskRule::FromOrigin, None, &SolverSettings::default())
}

/// Selection probabilities with default settings followed by the weighted fit.
pub fn weighted_estimator(dataset: &TruncatedDataset) -> Result<(CoxFit, SelectionEstimate)> {
    let sel = estimate_selection_probabilities(dataset, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    Ok((fit_weighted(dataset, &sel.pi)?, sel))
}
