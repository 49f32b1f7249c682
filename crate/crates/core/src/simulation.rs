//! Monte Carlo harness: Weibull proportional-hazards generators for event and
//! truncation times, calibration of the truncation scaling constants, and
//! the replication study runner.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Bound, SubjectRecord, TruncatedDataset};
use crate::em::EMConfig;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::inference::{bootstrap_around, fit_estimator, BootstrapOptions, Estimator};
use crate::rng::{stream, sub_seed, Purpose};

pub const SCENARIO_VERSION: u32 = 1;

/// Scenario file contents. A truncation side is active when either its
/// constant or its calibration target is given; a target takes precedence
/// and is calibrated at run time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationScenario {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    pub beta: [f64; 2],
    pub beta_l: [f64; 2],
    pub beta_r: [f64; 2],
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub c_l: Option<f64>,
    #[serde(default)]
    pub c_r: Option<f64>,
    #[serde(default)]
    pub target_left: Option<f64>,
    #[serde(default)]
    pub target_right: Option<f64>,
    #[serde(default = "default_pilot")]
    pub pilot_size: usize,
    /// Covariates `Z1, Z2, X, Y` are drawn from `Uniform[0, covariate_upper]`.
    #[serde(default = "default_upper")]
    pub covariate_upper: f64,
    pub n: usize,
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default)]
    pub bootstrap: usize,
    #[serde(default = "default_boot_estimators")]
    pub bootstrap_estimators: Vec<Estimator>,
    /// Denominator of the relative MSE.
    #[serde(default = "default_reference")]
    pub reference: Estimator,
    #[serde(default)]
    pub grid: Option<Grid>,
}

fn default_version() -> u32 {
    SCENARIO_VERSION
}
fn default_name() -> String {
    "scenario".into()
}
fn default_nu() -> f64 {
    0.001
}
fn default_kappa() -> f64 {
    5.0
}
fn default_pilot() -> usize {
    100_000
}
fn default_upper() -> f64 {
    5.0
}
fn default_estimators() -> Vec<Estimator> {
    vec![Estimator::Em, Estimator::Weighted, Estimator::Standard]
}
fn default_boot_estimators() -> Vec<Estimator> {
    vec![Estimator::Em, Estimator::Weighted]
}
fn default_reference() -> Estimator {
    Estimator::Standard
}

/// Axes of a figure grid; missing axes keep the scenario's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default)]
    pub target_left: Vec<f64>,
    #[serde(default)]
    pub target_right: Vec<f64>,
    #[serde(default)]
    pub beta_l1: Vec<f64>,
}

const BUNDLED: &[(&str, &str)] = &[
    ("table1_rhom035_n100", include_str!("../scenarios/table1_rhom035_n100.toml")),
    ("table1_rhom035_n250", include_str!("../scenarios/table1_rhom035_n250.toml")),
    ("table1_rho0_n100", include_str!("../scenarios/table1_rho0_n100.toml")),
    ("table1_rho0_n250", include_str!("../scenarios/table1_rho0_n250.toml")),
    ("table1_rho035_n100", include_str!("../scenarios/table1_rho035_n100.toml")),
    ("table1_rho035_n250", include_str!("../scenarios/table1_rho035_n250.toml")),
    ("figure2_dependent", include_str!("../scenarios/figure2_dependent.toml")),
    ("figure3_independent", include_str!("../scenarios/figure3_independent.toml")),
    ("figure4_left_only", include_str!("../scenarios/figure4_left_only.toml")),
];

impl SimulationScenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let sc: Self = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Scenario(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Scenario(format!("no bundled scenario named `{name}`")))?;
        Self::from_toml(text)
    }

    /// Table 1 layout: `beta_l1` sets the left dependence, 25% truncated on
    /// each side.
    pub fn table1(beta_l1: f64, n: usize, reps: usize, seed: u64) -> Self {
        Self {
            version: SCENARIO_VERSION,
            name: format!("table1_bl{beta_l1}_n{n}"),
            beta: [1.0, 1.0],
            beta_l: [beta_l1, 1.0],
            beta_r: [1.0, 1.0],
            nu: default_nu(),
            kappa: default_kappa(),
            c_l: None,
            c_r: None,
            target_left: Some(0.25),
            target_right: Some(0.25),
            pilot_size: default_pilot(),
            covariate_upper: default_upper(),
            n,
            reps,
            seed,
            estimators: default_estimators(),
            bootstrap: 0,
            bootstrap_estimators: default_boot_estimators(),
            reference: default_reference(),
            grid: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(m));
        if self.version != SCENARIO_VERSION {
            return bad(format!("unsupported scenario version {} (expected {SCENARIO_VERSION})", self.version));
        }
        if self.n < 2 {
            return bad(format!("n = {} must be at least 2", self.n));
        }
        if self.reps < 1 {
            return bad("reps must be at least 1".into());
        }
        if !(self.nu > 0.0 && self.kappa > 0.0 && self.covariate_upper > 0.0) {
            return bad("nu, kappa and covariate_upper must be positive".into());
        }
        for c in [self.c_l, self.c_r].into_iter().flatten() {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("truncation constant {c} must be positive"));
            }
        }
        for t in [self.target_left, self.target_right].into_iter().flatten() {
            if !(0.0..=0.9).contains(&t) {
                return bad(format!("truncation target {t} outside [0, 0.9]"));
            }
        }
        if self.target_left.unwrap_or(0.0) + self.target_right.unwrap_or(0.0) >= 1.0 {
            return bad("truncation targets must sum to less than 1".into());
        }
        if self.beta.iter().chain(&self.beta_l).chain(&self.beta_r).any(|b| !b.is_finite()) {
            return bad("coefficients must be finite".into());
        }
        if self.estimators.is_empty() {
            return bad("at least one estimator is required".into());
        }
        Ok(())
    }

    fn left_active(&self) -> bool {
        self.c_l.is_some() || self.target_left.is_some()
    }

    fn right_active(&self) -> bool {
        self.c_r.is_some() || self.target_right.is_some()
    }

    /// Resolves calibration targets into constants.
    pub fn generator(&self) -> Result<Generator> {
        self.validate()?;
        let mut g = Generator {
            beta: self.beta,
            beta_l: self.beta_l,
            beta_r: self.beta_r,
            nu: self.nu,
            kappa: self.kappa,
            upper: self.covariate_upper,
            c_l: if self.left_active() { self.c_l.or(Some(1.0)) } else { None },
            c_r: if self.right_active() { self.c_r.or(Some(1.0)) } else { None },
        };
        if self.target_left.is_some() || self.target_right.is_some() {
            let (cl, cr) = calibrate_constants(
                &g,
                self.target_left.unwrap_or(0.0),
                self.target_right.unwrap_or(0.0),
                self.pilot_size,
                self.seed,
            )?;
            if self.target_left.is_some() {
                g.c_l = Some(cl);
            }
            if self.target_right.is_some() {
                g.c_r = Some(cr);
            }
        }
        Ok(g)
    }
}

/// Resolved generator parameters. `None` turns a truncation side off.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub beta: [f64; 2],
    pub beta_l: [f64; 2],
    pub beta_r: [f64; 2],
    pub nu: f64,
    pub kappa: f64,
    pub upper: f64,
    pub c_l: Option<f64>,
    pub c_r: Option<f64>,
}

impl Generator {
    fn weibull(&self, u: f64, eta: f64) -> f64 {
        (-u.ln() / (self.nu * eta.exp())).powf(1.0 / self.kappa)
    }

    /// Unscaled draw `(T, L0, R0, Z1, Z2)`; truncation times before scaling.
    fn raw<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64, f64, [f64; 2]) {
        let z1 = rng.random::<f64>() * self.upper;
        let z2 = rng.random::<f64>() * self.upper;
        let x = rng.random::<f64>() * self.upper;
        let y = rng.random::<f64>() * self.upper;
        let ut: f64 = rng.sample(Open01);
        let ul: f64 = rng.sample(Open01);
        let ur: f64 = rng.sample(Open01);
        let t = self.weibull(ut, self.beta[0] * z1 + self.beta[1] * z2);
        let l = self.weibull(ul, self.beta_l[0] * z1 + self.beta_l[1] * x);
        let r = self.weibull(ur, self.beta_r[0] * z1 + self.beta_r[1] * y);
        (t, l, r, [z1, z2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationDraw {
    pub time: f64,
    pub left: Bound,
    pub right: Bound,
    pub z: [f64; 2],
    pub observed: bool,
}

pub fn generate_one<R: Rng + ?Sized>(generator: &Generator, rng: &mut R) -> PopulationDraw {
    let (t, l0, r0, z) = generator.raw(rng);
    let left = generator.c_l.map_or(Bound::Unbounded, |c| Bound::At(c * l0));
    let right = generator.c_r.map_or(Bound::Unbounded, |c| Bound::At(c * r0));
    let observed = left.as_lower() <= t && t <= right.as_upper();
    PopulationDraw { time: t, left, right, z, observed }
}

/// Running Pearson correlation.
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl Moments {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.syy += y * y;
        self.sxy += x * y;
    }

    fn corr(&self) -> Option<f64> {
        if self.n < 2.0 {
            return None;
        }
        let cov = self.sxy - self.sx * self.sy / self.n;
        let vx = self.sxx - self.sx * self.sx / self.n;
        let vy = self.syy - self.sy * self.sy / self.n;
        (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSummary {
    pub draws: usize,
    pub left_truncated: usize,
    pub right_truncated: usize,
    pub rho_lt: Option<f64>,
    pub rho_rt: Option<f64>,
}

impl PopulationSummary {
    /// Fraction of population draws that were not observed.
    pub fn q_hat(&self, n: usize) -> f64 {
        1.0 - n as f64 / self.draws as f64
    }
}

#[derive(Clone, Debug)]
pub struct ObservedSample {
    pub dataset: TruncatedDataset,
    pub population: PopulationSummary,
}

/// Acceptance rates below this in the first `PILOT_DRAWS` draws abort sampling.
pub const MIN_ACCEPTANCE: f64 = 1e-4;
pub const PILOT_DRAWS: usize = 100_000;

/// Draws population records until `n` are observable.
pub fn sample_observed<R: Rng + ?Sized>(generator: &Generator, n: usize, rng: &mut R) -> Result<ObservedSample> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be positive".into()));
    }
    let mut records = Vec::with_capacity(n);
    let (mut draws, mut lt, mut rt) = (0usize, 0usize, 0usize);
    let (mut m_l, mut m_r) = (Moments::default(), Moments::default());
    while records.len() < n {
        let d = generate_one(generator, rng);
        draws += 1;
        if let Bound::At(l) = d.left {
            m_l.push(l, d.time);
            lt += usize::from(d.time < l);
        }
        if let Bound::At(r) = d.right {
            m_r.push(r, d.time);
            rt += usize::from(d.time > r);
        }
        if d.observed {
            records.push(SubjectRecord::new(d.time, d.left, d.right, d.z.to_vec()));
        }
        if draws == PILOT_DRAWS && (records.len() as f64) < MIN_ACCEPTANCE * draws as f64 {
            return Err(Error::TruncationTooSevere { rate: records.len() as f64 / draws as f64 });
        }
    }
    Ok(ObservedSample {
        dataset: TruncatedDataset::new(records)?,
        population: PopulationSummary { draws, left_truncated: lt, right_truncated: rt, rho_lt: m_l.corr(), rho_rt: m_r.corr() },
    })
}

const C_MIN: f64 = 1e-4;
const C_MAX: f64 = 1e4;
const CALIBRATION_TOL: f64 = 0.01;

fn calibration_cache() -> &'static Mutex<HashMap<u64, (f64, f64)>> {
    static CACHE: OnceLock<Mutex<HashMap<u64, (f64, f64)>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn calibration_key(g: &Generator, tl: f64, tr: f64, pilot: usize, seed: u64) -> u64 {
    let mut h = DefaultHasher::new();
    for x in g.beta.iter().chain(&g.beta_l).chain(&g.beta_r).chain(&[g.nu, g.kappa, g.upper, tl, tr]) {
        x.to_bits().hash(&mut h);
    }
    (pilot, seed).hash(&mut h);
    h.finish()
}

/// Bisection (on the log scale) of the marginal truncation proportions
/// `P(T < c_l L0)` and `P(T > c_r R0)` over a fixed pilot draw.
pub fn calibrate_constants(generator: &Generator, target_left: f64, target_right: f64, pilot_size: usize, seed: u64) -> Result<(f64, f64)> {
    if !(0.0..=0.9).contains(&target_left) || !(0.0..=0.9).contains(&target_right) || target_left + target_right >= 1.0 {
        return Err(Error::InvalidArgument(format!("calibration targets ({target_left}, {target_right}) out of range")));
    }
    if pilot_size < 100 {
        return Err(Error::InvalidArgument("pilot size must be at least 100".into()));
    }
    let key = calibration_key(generator, target_left, target_right, pilot_size, seed);
    if let Some(&c) = calibration_cache().lock().expect("calibration cache poisoned").get(&key) {
        return Ok(c);
    }
    let mut rng = stream(seed, 0, Purpose::Calibration);
    let mut ratios_l = Vec::with_capacity(pilot_size);
    let mut ratios_r = Vec::with_capacity(pilot_size);
    for _ in 0..pilot_size {
        let (t, l, r, _) = generator.raw(&mut rng);
        ratios_l.push(t / l);
        ratios_r.push(t / r);
    }
    let m = pilot_size as f64;
    let left_prop = |c: f64| ratios_l.iter().filter(|&&q| q < c).count() as f64 / m;
    let right_prop = |c: f64| ratios_r.iter().filter(|&&q| q > c).count() as f64 / m;
    let c_l = if target_left == 0.0 { C_MIN } else { bisect(left_prop, target_left, true)? };
    let c_r = if target_right == 0.0 { C_MAX } else { bisect(right_prop, target_right, false)? };
    calibration_cache().lock().expect("calibration cache poisoned").insert(key, (c_l, c_r));
    Ok((c_l, c_r))
}

fn bisect(prop: impl Fn(f64) -> f64, target: f64, increasing: bool) -> Result<f64> {
    let (mut lo, mut hi) = (C_MIN.ln(), C_MAX.ln());
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let above = prop(mid.exp()) > target;
        if above == increasing {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let c = (0.5 * (lo + hi)).exp();
    let achieved = prop(c);
    if (achieved - target).abs() > CALIBRATION_TOL {
        return Err(Error::CalibrationFailed(format!("reached {achieved:.4} for target {target} (constant {c:.4e})")));
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyOptions {
    pub estimators: Vec<Estimator>,
    pub bootstrap: usize,
    pub bootstrap_estimators: Vec<Estimator>,
    pub reference: Estimator,
    pub em: EMConfig,
    pub exec: ExecMode,
}

impl StudyOptions {
    pub fn from_scenario(sc: &SimulationScenario) -> Self {
        Self {
            estimators: sc.estimators.clone(),
            bootstrap: sc.bootstrap,
            bootstrap_estimators: sc.bootstrap_estimators.clone(),
            reference: sc.reference,
            em: EMConfig::default(),
            exec: ExecMode::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub beta: Option<Vec<f64>>,
    pub se: Option<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub index: usize,
    pub population: Option<PopulationSummary>,
    /// One outcome per entry of [`StudyReport::estimators`].
    pub outcomes: Vec<ReplicateOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub estimator: Estimator,
    /// Zero-based coefficient index.
    pub coefficient: usize,
    pub truth: f64,
    pub bias: f64,
    pub sd: Option<f64>,
    pub mean_se: Option<f64>,
    pub rmse: Option<f64>,
    pub coverage: Option<f64>,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationSummary {
    pub left: f64,
    pub right: f64,
    pub q: f64,
    pub rho_lt: Option<f64>,
    pub rho_rt: Option<f64>,
    pub mean_draws: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenario: String,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub bootstrap: usize,
    pub c_l: Option<f64>,
    pub c_r: Option<f64>,
    pub reference: Estimator,
    pub estimators: Vec<Estimator>,
    pub truncation: TruncationSummary,
    pub metrics: Vec<EstimatorMetrics>,
    pub replicates: Vec<Replicate>,
}

impl StudyReport {
    pub fn metric(&self, estimator: Estimator, coefficient: usize) -> Option<&EstimatorMetrics> {
        self.metrics.iter().find(|m| m.estimator == estimator && m.coefficient == coefficient)
    }

    /// Successful estimates of one estimator, by replicate (`None` on failure).
    pub fn estimates(&self, estimator: Estimator) -> Vec<Option<Vec<f64>>> {
        let Some(k) = self.estimators.iter().position(|e| *e == estimator) else {
            return vec![None; self.replicates.len()];
        };
        self.replicates.iter().map(|r| r.outcomes[k].beta.clone()).collect()
    }
}

fn run_replicate(g: &Generator, sc: &SimulationScenario, opts: &StudyOptions, estimators: &[Estimator], r: usize) -> Replicate {
    let mut rng = stream(sc.seed, r as u64, Purpose::Sample);
    let sample = match sample_observed(g, sc.n, &mut rng) {
        Ok(s) => s,
        Err(e) => {
            let outcome = ReplicateOutcome { beta: None, se: None, error: Some(e.to_string()) };
            return Replicate { index: r, population: None, outcomes: vec![outcome; estimators.len()] };
        }
    };
    let boot = BootstrapOptions { em: opts.em, exec: ExecMode::Sequential };
    let outcomes = estimators
        .iter()
        .map(|&est| {
            let fit = match fit_estimator(&sample.dataset, est, &opts.em) {
                Ok(f) => f,
                Err(e) => return ReplicateOutcome { beta: None, se: None, error: Some(e.to_string()) },
            };
            if opts.bootstrap >= 2 && opts.bootstrap_estimators.contains(&est) {
                let seed = sub_seed(sc.seed, r as u64, Purpose::Bootstrap);
                match bootstrap_around(&sample.dataset, est, &fit, opts.bootstrap, seed, &boot) {
                    Ok(b) => ReplicateOutcome { beta: Some(fit.beta), se: Some(b.se), error: None },
                    Err(e) => ReplicateOutcome { beta: None, se: None, error: Some(e.to_string()) },
                }
            } else {
                ReplicateOutcome { beta: Some(fit.beta), se: None, error: None }
            }
        })
        .collect();
    Replicate { index: r, population: Some(sample.population), outcomes }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Runs every replication and aggregates per-estimator metrics.
pub fn run_study(scenario: &SimulationScenario, options: &StudyOptions) -> Result<StudyReport> {
    let g = scenario.generator()?;
    let mut estimators = options.estimators.clone();
    if !estimators.contains(&options.reference) {
        estimators.push(options.reference);
    }
    let replicates = map_indexed(scenario.reps, options.exec, |r| run_replicate(&g, scenario, options, &estimators, r));
    aggregate(scenario, &g, options, estimators, replicates)
}

fn aggregate(
    sc: &SimulationScenario,
    g: &Generator,
    options: &StudyOptions,
    estimators: Vec<Estimator>,
    replicates: Vec<Replicate>,
) -> Result<StudyReport> {
    let reps = replicates.len();
    for (k, est) in estimators.iter().enumerate() {
        let failed = replicates.iter().filter(|r| r.outcomes[k].beta.is_none()).count();
        for r in replicates.iter().filter(|r| r.outcomes[k].beta.is_none()) {
            log::warn!("replicate {} ({est}): {}", r.index, r.outcomes[k].error.as_deref().unwrap_or("failed"));
        }
        if failed * 10 > reps {
            return Err(Error::StudyAborted { failed, reps });
        }
    }
    let p = sc.beta.len();
    let pops: Vec<&PopulationSummary> = replicates.iter().filter_map(|r| r.population.as_ref()).collect();
    let n = sc.n;
    let truncation = TruncationSummary {
        left: mean(pops.iter().map(|s| s.left_truncated as f64 / s.draws as f64)).unwrap_or(f64::NAN),
        right: mean(pops.iter().map(|s| s.right_truncated as f64 / s.draws as f64)).unwrap_or(f64::NAN),
        q: mean(pops.iter().map(|s| s.q_hat(n))).unwrap_or(f64::NAN),
        rho_lt: mean(pops.iter().filter_map(|s| s.rho_lt)),
        rho_rt: mean(pops.iter().filter_map(|s| s.rho_rt)),
        mean_draws: mean(pops.iter().map(|s| s.draws as f64)).unwrap_or(f64::NAN),
    };
    let reference = estimators.iter().position(|e| *e == options.reference).expect("reference estimator present");
    let mse = |k: usize, j: usize| mean(replicates.iter().filter_map(|r| r.outcomes[k].beta.as_ref()).map(|b| (b[j] - sc.beta[j]).powi(2)));
    let mut metrics = Vec::new();
    for (k, &est) in estimators.iter().enumerate() {
        let ok: Vec<&ReplicateOutcome> = replicates.iter().map(|r| &r.outcomes[k]).filter(|o| o.beta.is_some()).collect();
        for j in 0..p {
            let truth = sc.beta[j];
            let vals: Vec<f64> = ok.iter().map(|o| o.beta.as_ref().unwrap()[j]).collect();
            let m = vals.len() as f64;
            let avg = mean(vals.iter().copied()).unwrap_or(f64::NAN);
            let sd = (vals.len() >= 2).then(|| (vals.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / (m - 1.0)).sqrt());
            let ses: Vec<(f64, f64)> = ok.iter().filter_map(|o| o.se.as_ref().map(|s| (o.beta.as_ref().unwrap()[j], s[j]))).collect();
            let mean_se = mean(ses.iter().map(|s| s.1));
            let coverage = (ses.len() >= 2)
                .then(|| ses.iter().filter(|(b, s)| (b - truth).abs() <= 1.96 * s).count() as f64 / ses.len() as f64);
            let rmse = match (mse(k, j), mse(reference, j)) {
                (Some(a), Some(b)) if b > 0.0 => Some(a / b),
                _ => None,
            };
            metrics.push(EstimatorMetrics {
                estimator: est,
                coefficient: j,
                truth,
                bias: avg - truth,
                sd,
                mean_se,
                rmse,
                coverage,
                successes: vals.len(),
                failures: reps - vals.len(),
            });
        }
    }
    Ok(StudyReport {
        scenario: sc.name.clone(),
        n,
        reps,
        seed: sc.seed,
        bootstrap: options.bootstrap,
        c_l: g.c_l,
        c_r: g.c_r,
        reference: options.reference,
        estimators,
        truncation,
        metrics,
        replicates,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

pub fn write_report_csv<W: Write>(w: W, report: &StudyReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "scenario", "estimator", "coefficient", "truth", "bias", "sd", "mean_se", "rmse", "coverage", "successes", "failures",
        "q_hat", "left_prop", "right_prop", "rho_lt", "rho_rt",
    ])?;
    let t = &report.truncation;
    for m in &report.metrics {
        out.write_record([
            report.scenario.clone(),
            m.estimator.to_string(),
            format!("beta{}", m.coefficient + 1),
            m.truth.to_string(),
            m.bias.to_string(),
            opt(m.sd),
            opt(m.mean_se),
            opt(m.rmse),
            opt(m.coverage),
            m.successes.to_string(),
            m.failures.to_string(),
            t.q.to_string(),
            t.left.to_string(),
            t.right.to_string(),
            opt(t.rho_lt),
            opt(t.rho_rt),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Per-replicate estimates: one row per (replicate, estimator, coefficient).
pub fn write_replicates_csv<W: Write>(w: W, report: &StudyReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scenario", "replicate", "estimator", "coefficient", "estimate", "se", "error"])?;
    let p = report.metrics.iter().map(|m| m.coefficient + 1).max().unwrap_or(0);
    for r in &report.replicates {
        for (est, o) in report.estimators.iter().zip(&r.outcomes) {
            for j in 0..p {
                out.write_record([
                    report.scenario.clone(),
                    r.index.to_string(),
                    est.to_string(),
                    format!("beta{}", j + 1),
                    opt(o.beta.as_ref().map(|b| b[j])),
                    opt(o.se.as_ref().map(|s| s[j])),
                    o.error.clone().unwrap_or_default(),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// One cell of a figure grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub target_left: Option<f64>,
    pub target_right: Option<f64>,
    pub beta_l1: f64,
    pub report: StudyReport,
}

/// Scenario variants for every combination of the grid axes.
pub fn grid_scenarios(base: &SimulationScenario, grid: &Grid) -> Vec<SimulationScenario> {
    let axis = |v: &Vec<f64>, d: Option<f64>| if v.is_empty() { vec![d] } else { v.iter().map(|x| Some(*x)).collect() };
    let lefts = axis(&grid.target_left, base.target_left);
    let rights = axis(&grid.target_right, base.target_right);
    let betas = axis(&grid.beta_l1, Some(base.beta_l[0]));
    let mut out = Vec::new();
    for &b in &betas {
        for &l in &lefts {
            for &r in &rights {
                let mut sc = base.clone();
                sc.beta_l[0] = b.unwrap_or(base.beta_l[0]);
                if l.is_some() {
                    sc.target_left = l;
                }
                if r.is_some() {
                    sc.target_right = r;
                }
                sc.grid = None;
                sc.name = format!("{}[bl1={},left={},right={}]", base.name, sc.beta_l[0], opt(sc.target_left), opt(sc.target_right));
                out.push(sc);
            }
        }
    }
    out
}

pub fn run_grid(base: &SimulationScenario, grid: &Grid, options: &StudyOptions) -> Result<Vec<GridCell>> {
    grid_scenarios(base, grid)
        .into_iter()
        .map(|sc| {
            let report = run_study(&sc, options)?;
            Ok(GridCell { target_left: sc.target_left, target_right: sc.target_right, beta_l1: sc.beta_l[0], report })
        })
        .collect()
}

/// Long format: one row per (cell, estimator, coefficient, metric).
pub fn write_long_csv<W: Write>(w: W, cells: &[GridCell]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["target_left", "target_right", "beta_l1", "q_hat", "estimator", "coefficient", "metric", "value"])?;
    for cell in cells {
        for m in &cell.report.metrics {
            let values = [
                ("bias", Some(m.bias)),
                ("sd", m.sd),
                ("mean_se", m.mean_se),
                ("rmse", m.rmse),
                ("coverage", m.coverage),
            ];
            for (name, v) in values {
                out.write_record([
                    opt(cell.target_left),
                    opt(cell.target_right),
                    cell.beta_l1.to_string(),
                    cell.report.truncation.q.to_string(),
                    m.estimator.to_string(),
                    format!("beta{}", m.coefficient + 1),
                    name.to_string(),
                    opt(v),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
