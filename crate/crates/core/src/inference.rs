//! Bootstrap standard errors and the conditional Kendall's tau diagnostic.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cox::{cox_left_adjusted, cox_standard, CoxFit};
use crate::data::TruncatedDataset;
use crate::em::{fit_em_from, EMConfig, EMFit};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::rng::{stream, Purpose};
use crate::selection::weighted_estimator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Em,
    Weighted,
    Standard,
    LeftAdjusted,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::Em, Estimator::Weighted, Estimator::Standard, Estimator::LeftAdjusted];

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Em => "em",
            Estimator::Weighted => "weighted",
            Estimator::Standard => "standard",
            Estimator::LeftAdjusted => "left-adjusted",
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator `{s}` (expected em, weighted, standard or left-adjusted)")))
    }
}

/// Coefficients from one estimator plus, for EM, the full fit (used to warm
/// start replicate fits).
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorFit {
    pub beta: Vec<f64>,
    /// `(t_j, lambda_j)` baseline hazard jumps.
    pub baseline: Vec<(f64, f64)>,
    /// Observed-data log-likelihood for EM, log partial likelihood otherwise.
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub em: Option<EMFit>,
}

impl EstimatorFit {
    fn from_cox(fit: CoxFit) -> Self {
        Self { beta: fit.beta, baseline: fit.baseline, loglik: fit.loglik, iterations: fit.iterations, converged: fit.converged, em: None }
    }
}

pub fn fit_estimator(dataset: &TruncatedDataset, estimator: Estimator, em_config: &EMConfig) -> Result<EstimatorFit> {
    fit_estimator_from(dataset, estimator, em_config, None)
}

fn fit_estimator_from(
    dataset: &TruncatedDataset,
    estimator: Estimator,
    em_config: &EMConfig,
    warm: Option<&EMFit>,
) -> Result<EstimatorFit> {
    Ok(match estimator {
        Estimator::Em => {
            let init = warm.and_then(|w| w.theta.transfer(&w.times, dataset.distinct_times()).ok());
            let fit = fit_em_from(dataset, em_config, init.as_ref())?;
            EstimatorFit {
                beta: fit.theta.beta.clone(),
                baseline: fit.baseline(),
                loglik: fit.loglik(),
                iterations: fit.iterations,
                converged: fit.converged,
                em: Some(fit),
            }
        }
        Estimator::Weighted => EstimatorFit::from_cox(weighted_estimator(dataset)?.0),
        Estimator::Standard => EstimatorFit::from_cox(cox_standard(dataset)?),
        Estimator::LeftAdjusted => EstimatorFit::from_cox(cox_left_adjusted(dataset)?),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BootstrapOptions {
    pub em: EMConfig,
    pub exec: ExecMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    /// Successful replicate estimates in replicate order.
    pub replicates: Vec<Vec<f64>>,
    /// `estimate +- 1.96 se`.
    pub ci: Vec<(f64, f64)>,
    pub failures: usize,
}

/// Resampling indices of replicate `b`; depends only on `(seed, b, n)`.
pub fn resample_indices(seed: u64, b: usize, n: usize) -> Vec<usize> {
    let mut rng = stream(seed, b as u64, Purpose::Bootstrap);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Fits `estimator` to the data and bootstraps it `b` times.
pub fn bootstrap(
    dataset: &TruncatedDataset,
    estimator: Estimator,
    b: usize,
    seed: u64,
    options: &BootstrapOptions,
) -> Result<BootstrapResult> {
    let fit = fit_estimator(dataset, estimator, &options.em)?;
    bootstrap_around(dataset, estimator, &fit, b, seed, options)
}

/// Bootstrap around an existing fit, which also warm-starts EM replicates.
pub fn bootstrap_around(
    dataset: &TruncatedDataset,
    estimator: Estimator,
    fit: &EstimatorFit,
    b: usize,
    seed: u64,
    options: &BootstrapOptions,
) -> Result<BootstrapResult> {
    bootstrap_with(dataset, &fit.beta, b, seed, options.exec, |ds| {
        Ok(fit_estimator_from(ds, estimator, &options.em, fit.em.as_ref())?.beta)
    })
}

/// Generic bootstrap of an arbitrary statistic.
pub fn bootstrap_with<F>(
    dataset: &TruncatedDataset,
    estimate: &[f64],
    b: usize,
    seed: u64,
    exec: ExecMode,
    statistic: F,
) -> Result<BootstrapResult>
where
    F: Fn(&TruncatedDataset) -> Result<Vec<f64>> + Sync + Send,
{
    if b < 2 {
        return Err(Error::InvalidArgument(format!("bootstrap needs at least 2 resamples, got {b}")));
    }
    let n = dataset.n();
    let outcomes = map_indexed(b, exec, |k| {
        let ds = dataset.resample(&resample_indices(seed, k, n))?;
        statistic(&ds)
    });
    let mut replicates = Vec::with_capacity(b);
    let mut failures = 0;
    for (k, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) if v.len() == estimate.len() && v.iter().all(|x| x.is_finite()) => replicates.push(v),
            Ok(_) => failures += 1,
            Err(e) => {
                log::debug!("bootstrap replicate {k} failed: {e}");
                failures += 1;
            }
        }
    }
    if failures * 2 > b || replicates.len() < 2 {
        return Err(Error::TooManyFailures { failures, total: b });
    }
    let p = estimate.len();
    let m = replicates.len() as f64;
    let se: Vec<f64> = (0..p)
        .map(|j| {
            let mean = replicates.iter().map(|r| r[j]).sum::<f64>() / m;
            (replicates.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        })
        .collect();
    let ci = estimate.iter().zip(&se).map(|(b, s)| (b - 1.96 * s, b + 1.96 * s)).collect();
    Ok(BootstrapResult { estimate: estimate.to_vec(), se, replicates, ci, failures })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KendallTauResult {
    /// `(tau_L, tau_R)`.
    pub tau: (f64, f64),
    pub p_value: f64,
    /// Comparable pairs behind `(tau_L, tau_R)`.
    pub comparable_pairs: (usize, usize),
    pub permutations: usize,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `(tau_L, tau_R, comparable pairs)` for times `t` and windows `win[assign[i]]`.
fn kendall_pair(t: &[f64], win: &[(f64, f64)], assign: &[usize]) -> (f64, f64, usize) {
    let n = t.len();
    let (mut cl, mut cr, mut m) = (0.0, 0.0, 0usize);
    for i in 0..n {
        let (li, ri) = win[assign[i]];
        for k in i + 1..n {
            let (lk, rk) = win[assign[k]];
            let (tmin, tmax) = if t[i] < t[k] { (t[i], t[k]) } else { (t[k], t[i]) };
            if li.max(lk) <= tmin && ri.min(rk) >= tmax {
                m += 1;
                let dt = t[i] - t[k];
                // Infinite sentinels on both sides compare as a tie.
                let dl = if li == lk { 0.0 } else { li - lk };
                let dr = if ri == rk { 0.0 } else { ri - rk };
                cl += sign(dt) * sign(dl);
                cr += sign(dt) * sign(dr);
            }
        }
    }
    if m == 0 {
        (0.0, 0.0, 0)
    } else {
        (cl / m as f64, cr / m as f64, m)
    }
}

/// One Metropolis move on window assignments: swap the windows of two
/// subjects when both stay observable. The uniform distribution over valid
/// assignments is stationary, which is the permutation null under
/// quasi-independence.
fn swap_move<R: Rng>(rng: &mut R, t: &[f64], win: &[(f64, f64)], assign: &mut [usize]) {
    let n = t.len();
    let i = rng.random_range(0..n);
    let k = rng.random_range(0..n);
    if i == k {
        return;
    }
    let (wi, wk) = (win[assign[i]], win[assign[k]]);
    if wk.0 <= t[i] && t[i] <= wk.1 && wi.0 <= t[k] && t[k] <= wi.1 {
        assign.swap(i, k);
    }
}

/// Conditional Kendall's tau for `(L, T)` and `(R, T)` with a permutation
/// p-value for the joint null of quasi-independence. Permuted datasets use
/// the Besag-Clifford parallel scheme, so the p-value is exact for any chain
/// length.
pub fn conditional_kendall_tau(dataset: &TruncatedDataset, permutations: usize, seed: u64) -> Result<KendallTauResult> {
    if permutations == 0 {
        return Err(Error::InvalidArgument("at least one permutation is required".into()));
    }
    let t: Vec<f64> = dataset.records().iter().map(|r| r.time).collect();
    let win: Vec<(f64, f64)> = dataset.records().iter().map(|r| (r.left.as_lower(), r.right.as_upper())).collect();
    let n = t.len();
    let identity: Vec<usize> = (0..n).collect();
    let (tl, tr, m) = kendall_pair(&t, &win, &identity);
    if m < 2 {
        return Err(Error::NoComparablePairs("conditional Kendall"));
    }
    if win.iter().all(|w| *w == win[0]) {
        log::warn!("truncation windows are identical for all subjects; both statistics are 0");
    }
    let statistic = |a: f64, b: f64| a * a + b * b;
    let observed = statistic(tl, tr);
    let steps = 5 * n;
    let mut rng = stream(seed, 0, Purpose::Permutation);
    let mut anchor = identity.clone();
    for _ in 0..steps {
        swap_move(&mut rng, &t, &win, &mut anchor);
    }
    let exceed: Vec<bool> = map_indexed(permutations, ExecMode::Parallel, |k| {
        let mut rng = stream(seed, k as u64 + 1, Purpose::Permutation);
        let mut assign = anchor.clone();
        for _ in 0..steps {
            swap_move(&mut rng, &t, &win, &mut assign);
        }
        let (a, b, _) = kendall_pair(&t, &win, &assign);
        statistic(a, b) >= observed - 1e-12
    });
    let count = exceed.iter().filter(|&&e| e).count();
    Ok(KendallTauResult {
        tau: (tl, tr),
        p_value: (1 + count) as f64 / (1 + permutations) as f64,
        comparable_pairs: (m, m),
        permutations,
    })
}
