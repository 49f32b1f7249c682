//! EM maximization of the conditional likelihood of event times given the
//! truncation window and covariates.
//!
//! The baseline hazard is discrete with jumps `lambda_j` at the distinct
//! observed times. For each subject the E-step spreads `(1 - alpha_i) /
//! alpha_i` expected latent subjects over the support points outside its
//! window; the M-step is a weighted Cox fit on the expanded `n x d` design
//! followed by the closed-form jump update.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::cox::{self, DesignRow, RiskDesign, SolverSettings, Ties};
use crate::data::{Bound, SubjectRecord, TruncatedDataset, TruncationMode};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub beta: Vec<f64>,
    /// Jumps at the distinct event times.
    pub lambda: Vec<f64>,
}

impl ParameterState {
    pub fn new(beta: Vec<f64>, lambda: Vec<f64>) -> Result<Self> {
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("coefficients must be finite".into()));
        }
        if let Some(l) = lambda.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::InvalidArgument(format!("hazard jump {l} must be positive and finite")));
        }
        Ok(Self { beta, lambda })
    }

    /// Prefix sums: element `k` is the sum of the first `k` jumps.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.lambda.len() + 1);
        let mut acc = 0.0;
        c.push(0.0);
        for l in &self.lambda {
            acc += l;
            c.push(acc);
        }
        c
    }

    /// Re-expresses the hazard on a subset of the original support so that
    /// the cumulative hazard agrees at every new support point. Used to warm
    /// start fits on bootstrap resamples.
    pub fn transfer(&self, from_times: &[f64], to_times: &[f64]) -> Result<Self> {
        let c = self.cumulative();
        let at = |t: f64| c[from_times.partition_point(|&s| s <= t)];
        let mut prev = 0.0;
        let lambda = to_times
            .iter()
            .map(|&t| {
                let cur = at(t);
                let jump = cur - prev;
                prev = cur;
                jump
            })
            .collect();
        Self::new(self.beta.clone(), lambda)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvergenceNorm {
    #[default]
    Max,
    Euclidean,
}

/// Normalizing constant of the conditional density.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalizer {
    /// `exp(-Lambda(L-) e^{b'z}) - exp(-Lambda(R) e^{b'z})`; an unbounded
    /// right end contributes zero.
    #[default]
    ClosedForm,
    /// One minus the latent density mass outside the window, using the same
    /// density as the E-step. Together with Breslow ties in the M-step this
    /// turns each iteration into an exact minorize-maximize step.
    SupportMass,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EMConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub inner: SolverSettings,
    pub norm: ConvergenceNorm,
    pub alpha_floor: f64,
    /// Tie handling for the coefficient update on the expanded design.
    pub ties: Ties,
    pub normalizer: Normalizer,
}

impl Default for EMConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            max_iter: 1000,
            inner: SolverSettings::default(),
            norm: ConvergenceNorm::Max,
            alpha_floor: 1e-12,
            ties: Ties::Efron,
            normalizer: Normalizer::ClosedForm,
        }
    }
}

impl EMConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} must be positive", self.epsilon)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        if !(self.alpha_floor >= 0.0 && self.alpha_floor < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha floor {} outside [0, 1)", self.alpha_floor)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EMFit {
    pub theta: ParameterState,
    pub times: Vec<f64>,
    pub loglik_trace: Vec<f64>,
    pub alpha: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl EMFit {
    pub fn baseline(&self) -> Vec<(f64, f64)> {
        self.times.iter().copied().zip(self.theta.lambda.iter().copied()).collect()
    }

    pub fn loglik(&self) -> f64 {
        self.loglik_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Right-continuous step function `sum_{t_j <= t} lambda_j`.
pub fn cumulative_hazard(fit: &EMFit, t: f64) -> f64 {
    let k = fit.times.partition_point(|&s| s <= t);
    fit.theta.lambda[..k].iter().sum()
}

/// Dense `n x d` E-step weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    d: usize,
    w: Vec<f64>,
}

impl WeightMatrix {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self { n, d, w: vec![0.0; n * d] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.d + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.w[i * self.d + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.d..(i + 1) * self.d]
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).iter().sum()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        for row in self.w.chunks(self.d.max(1)) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { n: self.n, d: self.d, w: self.w.iter().map(|x| x * c).collect() }
    }
}

/// Position of a subject's event and window on the support grid.
#[derive(Clone, Copy, Debug)]
struct Window {
    bin: usize,
    /// Support points strictly below `L` are `0..lo`.
    lo: usize,
    /// Support points strictly above `R` are `hi..d`.
    hi: usize,
    right_open: bool,
}

fn window_of(record: &SubjectRecord, bin: usize, times: &[f64]) -> Window {
    let lo = match record.left {
        Bound::At(l) => times.partition_point(|&t| t < l),
        Bound::Unbounded => 0,
    };
    let (hi, right_open) = match record.right {
        Bound::At(r) => (times.partition_point(|&t| t <= r), false),
        Bound::Unbounded => (times.len(), true),
    };
    Window { bin, lo, hi, right_open }
}

fn windows(dataset: &TruncatedDataset) -> Vec<Window> {
    let times = dataset.distinct_times();
    dataset.records().iter().zip(dataset.time_index()).map(|(r, &bin)| window_of(r, bin, times)).collect()
}

fn latent_density(lambda: &[f64], c: &[f64], j: usize, risk: f64) -> f64 {
    lambda[j] * risk * (-c[j + 1] * risk).exp()
}

fn closed_form_alpha(c: &[f64], w: &Window, risk: f64) -> f64 {
    let a = c[w.lo] * risk;
    if w.right_open {
        (-a).exp()
    } else {
        let gap = (c[w.hi] - c[w.lo]).max(0.0) * risk;
        (-a).exp() * -(-gap).exp_m1()
    }
}

fn normalizer_value(kind: Normalizer, theta: &ParameterState, c: &[f64], w: &Window, risk: f64) -> f64 {
    match kind {
        Normalizer::ClosedForm => closed_form_alpha(c, w, risk),
        Normalizer::SupportMass => {
            let outside: f64 = (0..w.lo)
                .chain(w.hi..theta.lambda.len())
                .map(|j| latent_density(&theta.lambda, c, j, risk))
                .sum();
            1.0 - outside
        }
    }
}

fn check_theta(theta: &ParameterState, dataset: &TruncatedDataset) -> Result<()> {
    if theta.beta.len() != dataset.p() {
        return Err(Error::DimensionMismatch { expected: dataset.p(), actual: theta.beta.len() });
    }
    if theta.lambda.len() != dataset.d() {
        return Err(Error::DimensionMismatch { expected: dataset.d(), actual: theta.lambda.len() });
    }
    Ok(())
}

/// Probability that a subject with this window and covariates is observed.
/// Values below the configured floor are reported by the dataset-level
/// functions; this one returns the raw value.
pub fn alpha(theta: &ParameterState, subject: &SubjectRecord, times: &[f64]) -> f64 {
    let w = window_of(subject, 0, times);
    if w.hi <= w.lo {
        log::warn!("truncation window [{:?}, {:?}] contains no support point", subject.left, subject.right);
    }
    let c = theta.cumulative();
    closed_form_alpha(&c, &w, subject.linear_predictor(&theta.beta).exp())
}

/// Per-subject observation probabilities under `normalizer`.
pub fn alphas(theta: &ParameterState, dataset: &TruncatedDataset, normalizer: Normalizer, floor: f64) -> Result<Vec<f64>> {
    check_theta(theta, dataset)?;
    let c = theta.cumulative();
    dataset
        .records()
        .iter()
        .zip(windows(dataset))
        .enumerate()
        .map(|(i, (r, w))| {
            let a = normalizer_value(normalizer, theta, &c, &w, r.linear_predictor(&theta.beta).exp());
            if !(a >= floor) || !(a > 0.0) {
                return Err(Error::AlphaUnderflow { subject: i, alpha: a, iteration: None });
            }
            Ok(a)
        })
        .collect()
}

/// Observed-data conditional log-likelihood, averaged over subjects.
pub fn observed_loglik(theta: &ParameterState, dataset: &TruncatedDataset) -> Result<f64> {
    observed_loglik_with(theta, dataset, Normalizer::ClosedForm, EMConfig::default().alpha_floor)
}

pub fn observed_loglik_with(
    theta: &ParameterState,
    dataset: &TruncatedDataset,
    normalizer: Normalizer,
    floor: f64,
) -> Result<f64> {
    check_theta(theta, dataset)?;
    let c = theta.cumulative();
    let mut total = 0.0;
    for (i, (r, w)) in dataset.records().iter().zip(windows(dataset)).enumerate() {
        let eta = r.linear_predictor(&theta.beta);
        let risk = eta.exp();
        let a = normalizer_value(normalizer, theta, &c, &w, risk);
        if !(a >= floor) || !(a > 0.0) {
            return Err(Error::AlphaUnderflow { subject: i, alpha: a, iteration: None });
        }
        total += eta + theta.lambda[w.bin].ln() - c[w.bin + 1] * risk - a.ln();
    }
    Ok(total / dataset.n() as f64)
}

/// Gradient of [`observed_loglik`] with respect to the coefficients.
pub fn observed_score(theta: &ParameterState, dataset: &TruncatedDataset) -> Result<Vec<f64>> {
    check_theta(theta, dataset)?;
    let c = theta.cumulative();
    let mut score = vec![0.0; dataset.p()];
    for (i, (r, w)) in dataset.records().iter().zip(windows(dataset)).enumerate() {
        let risk = r.linear_predictor(&theta.beta).exp();
        let a = closed_form_alpha(&c, &w, risk);
        if !(a > 0.0) {
            return Err(Error::AlphaUnderflow { subject: i, alpha: a, iteration: None });
        }
        let lo = c[w.lo];
        let mut d_alpha = -lo * (-lo * risk).exp();
        if !w.right_open {
            let hi = c[w.hi];
            d_alpha += hi * (-hi * risk).exp();
        }
        let g = 1.0 - c[w.bin + 1] * risk - risk * d_alpha / a;
        for (s, z) in score.iter_mut().zip(&r.z) {
            *s += g * z;
        }
    }
    let n = dataset.n() as f64;
    Ok(score.into_iter().map(|s| s / n).collect())
}

/// Visits every positive E-step weight as `(subject, bin, weight)` and
/// returns the normalizers.
fn for_each_weight(
    theta: &ParameterState,
    dataset: &TruncatedDataset,
    wins: &[Window],
    config: &EMConfig,
    iteration: Option<usize>,
    mut visit: impl FnMut(usize, usize, f64),
) -> Result<Vec<f64>> {
    let c = theta.cumulative();
    let d = theta.lambda.len();
    let mut alphas = Vec::with_capacity(wins.len());
    for (i, (r, w)) in dataset.records().iter().zip(wins).enumerate() {
        let risk = r.linear_predictor(&theta.beta).exp();
        let a = normalizer_value(config.normalizer, theta, &c, w, risk);
        if !(a >= config.alpha_floor) || !(a > 0.0) {
            return Err(Error::AlphaUnderflow { subject: i, alpha: a, iteration });
        }
        visit(i, w.bin, 1.0);
        for j in (0..w.lo).chain(w.hi..d) {
            let f = latent_density(&theta.lambda, &c, j, risk) / a;
            if f > 0.0 {
                visit(i, j, f);
            }
        }
        alphas.push(a);
    }
    Ok(alphas)
}

pub fn e_step(theta: &ParameterState, dataset: &TruncatedDataset) -> Result<WeightMatrix> {
    e_step_with(theta, dataset, &EMConfig::default())
}

pub fn e_step_with(theta: &ParameterState, dataset: &TruncatedDataset, config: &EMConfig) -> Result<WeightMatrix> {
    check_theta(theta, dataset)?;
    let mut m = WeightMatrix::zeros(dataset.n(), dataset.d());
    for_each_weight(theta, dataset, &windows(dataset), config, None, |i, j, w| {
        m.set(i, j, m.get(i, j) + w);
    })?;
    Ok(m)
}

fn flat_covariates(dataset: &TruncatedDataset) -> Vec<f64> {
    dataset.records().iter().flat_map(|r| r.z.iter().copied()).collect()
}

fn solve_expanded(
    dataset: &TruncatedDataset,
    z: &[f64],
    rows: Vec<DesignRow>,
    init: &[f64],
    config: &EMConfig,
) -> Result<ParameterState> {
    let design = RiskDesign::from_binned(dataset.p(), Cow::Borrowed(z), dataset.distinct_times().to_vec(), rows)?
        .with_ties(config.ties);
    let (beta, ..) = design.solve(init, &config.inner)?;
    let lambda = design.baseline(&beta)?;
    ParameterState::new(beta, lambda).map_err(|_| Error::NoConvergence { iterations: 0 })
}

/// Coefficient update on the expanded design followed by the jump update
/// `w_{+j} / sum_{s >= j} sum_i w_is exp(b'z_i)`.
pub fn m_step(weights: &WeightMatrix, dataset: &TruncatedDataset, init: &[f64], config: &EMConfig) -> Result<ParameterState> {
    if weights.n() != dataset.n() || weights.d() != dataset.d() {
        return Err(Error::DimensionMismatch { expected: dataset.n() * dataset.d(), actual: weights.n() * weights.d() });
    }
    if weights.w.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
    }
    let rows = (0..weights.n())
        .flat_map(|i| (0..weights.d()).map(move |j| (i, j)))
        .filter(|&(i, j)| weights.get(i, j) > 0.0)
        .map(|(i, j)| DesignRow { subject: i, bin: j, first_bin: 0, weight: weights.get(i, j) })
        .collect();
    solve_expanded(dataset, &flat_covariates(dataset), rows, init, config)
}

fn standard_start(dataset: &TruncatedDataset, config: &EMConfig) -> Result<ParameterState> {
    let fit = cox::fit_subjects(dataset, None, cox::RiskRule::FromOrigin, None, &config.inner)?;
    let lambda = fit.jumps();
    ParameterState::new(fit.beta, lambda)
}

fn change(a: &ParameterState, b: &ParameterState, norm: ConvergenceNorm) -> f64 {
    let diffs = a.beta.iter().zip(&b.beta).chain(a.lambda.iter().zip(&b.lambda)).map(|(x, y)| (x - y).abs());
    match norm {
        ConvergenceNorm::Max => diffs.fold(0.0, f64::max),
        ConvergenceNorm::Euclidean => diffs.map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// Runs EM from the standard Cox fit and its Breslow baseline. Untruncated
/// data return that fit unchanged.
pub fn fit_em(dataset: &TruncatedDataset, config: &EMConfig) -> Result<EMFit> {
    fit_em_from(dataset, config, None)
}

/// As [`fit_em`], starting from `init` when given.
pub fn fit_em_from(dataset: &TruncatedDataset, config: &EMConfig, init: Option<&ParameterState>) -> Result<EMFit> {
    config.validate()?;
    let times = dataset.distinct_times().to_vec();
    let loglik = |theta: &ParameterState| observed_loglik_with(theta, dataset, config.normalizer, config.alpha_floor);
    if dataset.mode() == TruncationMode::None {
        let theta = standard_start(dataset, config)?;
        let trace = vec![loglik(&theta)?];
        return Ok(EMFit { theta, times, loglik_trace: trace, alpha: vec![1.0; dataset.n()], iterations: 0, converged: true });
    }
    let mut theta = match init {
        Some(t) => {
            check_theta(t, dataset)?;
            t.clone()
        }
        None => standard_start(dataset, config)?,
    };
    let wins = windows(dataset);
    let z = flat_covariates(dataset);
    let mut trace = vec![loglik(&theta)?];
    let mut rows = Vec::new();
    for k in 1..=config.max_iter {
        rows.clear();
        for_each_weight(&theta, dataset, &wins, config, Some(k - 1), |i, j, w| {
            rows.push(DesignRow { subject: i, bin: j, first_bin: 0, weight: w });
        })?;
        let next = solve_expanded(dataset, &z, std::mem::take(&mut rows), &theta.beta, config)?;
        let delta = change(&theta, &next, config.norm);
        theta = next;
        trace.push(loglik(&theta)?);
        if delta < config.epsilon {
            let alpha = alphas(&theta, dataset, config.normalizer, config.alpha_floor)?;
            return Ok(EMFit { theta, times, loglik_trace: trace, alpha, iterations: k, converged: true });
        }
    }
    Err(Error::EmNoConvergence { iterations: config.max_iter, trace })
}
