//! Acceptance suite. Prints one PASS/FAIL line per criterion followed by a
//! summary. Set `TRUNCOX_ACCEPTANCE_STRICT=1` to turn any failure into a
//! nonzero exit status.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use truncox::em::{e_step, m_step, observed_loglik, observed_loglik_with, observed_score, Normalizer};
use truncox::inference::conditional_kendall_tau;
use truncox::rng::{stream, Purpose};
use truncox::simulation::{generate_one, sample_observed, Generator, StudyReport};
use truncox::{
    cox_standard, fit_em, run_study, Bound, EMConfig, Error, Estimator, ExecMode, ParameterState,
    SimulationScenario, StudyOptions, SubjectRecord, Ties, TruncatedDataset,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn table1_generator(beta_l1: f64) -> Generator {
    SimulationScenario::table1(beta_l1, 100, 1, 17).generator().expect("calibration")
}

/// Keeps only the first `p` covariates.
fn project(ds: &TruncatedDataset, p: usize) -> TruncatedDataset {
    let recs = ds.records().iter().map(|r| SubjectRecord::new(r.time, r.left, r.right, r.z[..p].to_vec())).collect();
    TruncatedDataset::new(recs).unwrap()
}

/// Datasets with a log-likelihood decrease above 1e-8, the largest decrease
/// and the total iteration count.
fn ascent_violations(config: &EMConfig) -> (usize, f64, usize) {
    let gens = [table1_generator(-1.0), table1_generator(0.0), table1_generator(1.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut violations, mut worst, mut iterations) = (0, 0.0f64, 0);
    for k in 0..200u64 {
        let n = rng.random_range(20..=100);
        let p = rng.random_range(1..=2);
        let g = &gens[(k % 3) as usize];
        let ds = project(&sample_observed(g, n, &mut stream(101, k, Purpose::Sample)).unwrap().dataset, p);
        let trace = match fit_em(&ds, config) {
            Ok(f) => f.loglik_trace,
            Err(Error::EmNoConvergence { trace, .. }) => trace,
            Err(e) => panic!("dataset {k}: {e}"),
        };
        iterations += trace.len() - 1;
        let drop = trace.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
        if drop > 1e-8 {
            violations += 1;
        }
        worst = worst.max(drop);
    }
    (violations, worst, iterations)
}

fn c1_ascent() -> Outcome {
    let start = Instant::now();
    let (violations, worst, iterations) = ascent_violations(&EMConfig::default());
    let elapsed = start.elapsed();
    // Reported for reference only: the Breslow / support-mass variant is an
    // exact minorize-maximize scheme for its own likelihood.
    let exact = EMConfig { ties: Ties::Breslow, normalizer: Normalizer::SupportMass, ..EMConfig::default() };
    let (v_exact, w_exact, _) = ascent_violations(&exact);
    outcome(
        violations == 0 && elapsed < Duration::from_secs(120),
        format!(
            "{violations}/200 datasets with a decrease > 1e-8 (largest {worst:.3e}); {iterations} iterations in {elapsed:.1?} \
             [breslow/support-mass variant: {v_exact}/200, largest {w_exact:.1e}]"
        ),
    )
}

fn c2_no_truncation() -> Outcome {
    let g = Generator { c_l: None, c_r: None, ..table1_generator(0.0) };
    let (mut beta_err, mut jump_err, mut step_err) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..50u64 {
        let ds = sample_observed(&g, 30 + k as usize, &mut stream(202, k, Purpose::Sample)).unwrap().dataset;
        let std = cox_standard(&ds).unwrap();
        let em = fit_em(&ds, &EMConfig::default()).unwrap();
        beta_err = beta_err.max(max_diff(&em.theta.beta, &std.beta));
        jump_err = jump_err.max(max_diff(&em.theta.lambda, &std.jumps()));
        // One explicit E/M iteration from the standard fit stays put.
        let theta = ParameterState::new(std.beta.clone(), std.jumps()).unwrap();
        let next = m_step(&e_step(&theta, &ds).unwrap(), &ds, &std.beta, &EMConfig::default()).unwrap();
        step_err = step_err.max(max_diff(&next.beta, &std.beta)).max(max_diff(&next.lambda, &std.jumps()) * 1e4);
    }
    outcome(
        beta_err < 1e-6 && jump_err < 1e-10 && step_err < 1e-6,
        format!("max |beta_em - beta_s| = {beta_err:.2e}, max jump diff = {jump_err:.2e}, one-step drift (scaled) = {step_err:.2e}"),
    )
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c3_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let g = table1_generator(1.0);
    let mut worst = 0.0f64;
    for k in 0..20u64 {
        let p = 1 + (k % 2) as usize;
        let ds = project(&sample_observed(&g, 60, &mut stream(303, k, Purpose::Sample)).unwrap().dataset, p);
        let std = cox_standard(&ds).unwrap();
        // Random points near the standard fit; far-off points underflow alpha.
        let beta: Vec<f64> = std.beta.iter().map(|b| b + rng.random_range(-0.3..0.3)).collect();
        let lambda: Vec<f64> = std.jumps().iter().map(|l| l * rng.random_range(0.8..1.25)).collect();
        let theta = ParameterState::new(beta.clone(), lambda.clone()).unwrap();
        let score = observed_score(&theta, &ds).unwrap();
        let fd: Vec<f64> = (0..p)
            .map(|j| {
                let h = 1e-6 * beta[j].abs().max(1.0);
                let at = |x: f64| {
                    let mut b = beta.clone();
                    b[j] = x;
                    observed_loglik(&ParameterState::new(b, lambda.clone()).unwrap(), &ds).unwrap()
                };
                (at(beta[j] + h) - at(beta[j] - h)) / (2.0 * h)
            })
            .collect();
        let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        worst = worst.max(max_diff(&score, &fd) / scale);
    }
    outcome(worst < 1e-5, format!("largest relative error {worst:.2e} over 20 (theta, dataset) pairs"))
}

fn golden(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    while b - a > tol {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

/// Golden section over beta of the profile log-likelihood; for each beta the
/// jumps come from cyclic coordinate ascent over log-lambda, warm-started from
/// the previous profile point. `tol` controls both searches. Returns
/// `(beta, profile(beta), profile at the bracket ends, log-lambda range)`.
fn brute_force_mle(ds: &TruncatedDataset, normalizer: Normalizer, tol: f64) -> (f64, f64, f64, (f64, f64)) {
    let d = ds.d();
    let f = |b: f64, l: &[f64]| {
        ParameterState::new(vec![b], l.to_vec())
            .ok()
            .and_then(|t| observed_loglik_with(&t, ds, normalizer, 0.0).ok())
            .filter(|v| v.is_finite())
            .unwrap_or(f64::NEG_INFINITY)
    };
    let warm = std::cell::RefCell::new(vec![0.3; d]);
    let profile = |beta: f64| {
        let mut lam = warm.borrow().clone();
        for sweep in 0..400 {
            let before = lam.clone();
            for j in 0..d {
                let g = |x: f64| {
                    let mut l = lam.clone();
                    l[j] = x.exp();
                    f(beta, &l)
                };
                // Full bracket on the first sweep, local afterwards.
                let (lo, hi) = if sweep == 0 { (-12.0, 6.0) } else { (lam[j].ln() - 1.0, lam[j].ln() + 1.0) };
                lam[j] = golden(g, lo.max(-12.0), hi.min(6.0), tol * 1e-2).exp();
            }
            if max_diff(&lam, &before) < tol * 1e-2 {
                break;
            }
        }
        *warm.borrow_mut() = lam.clone();
        (f(beta, &lam), lam)
    };
    let ends = profile(-6.0).0.max(profile(6.0).0);
    let beta = golden(|b| profile(b).0, -6.0, 6.0, tol);
    let (best, lam) = profile(beta);
    let logs = lam.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), l| (lo.min(l.ln()), hi.max(l.ln())));
    (beta, best, ends, logs)
}

/// Tiny doubly truncated datasets whose likelihood has an interior maximum.
/// Most draws with n <= 5 have a flat or monotone profile in beta, where
/// no finite maximizer exists; those are skipped after a coarse screen.
fn small_datasets(normalizer: Normalizer, count: usize) -> (Vec<(TruncatedDataset, f64)>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut out = Vec::new();
    let mut drawn = 0;
    while out.len() < count {
        drawn += 1;
        let n = rng.random_range(3..=5);
        let recs = (0..n)
            .map(|_| {
                let t = rng.random_range(0.5..5.0f64);
                let l = t - rng.random_range(0.0..3.0);
                let r = t + rng.random_range(0.0..3.0);
                SubjectRecord::new(t, Bound::At(l), Bound::At(r), vec![rng.random_range(-1.0..1.0)])
            })
            .collect();
        let ds = TruncatedDataset::new(recs).unwrap();
        let interior = |(beta, best, ends, (lo, hi)): (f64, f64, f64, (f64, f64))| {
            best - ends > 1e-4 && lo > -11.0 && hi < 5.0 && beta.abs() < 5.5
        };
        if !interior(brute_force_mle(&ds, normalizer, 1e-3)) {
            continue;
        }
        let fine = brute_force_mle(&ds, normalizer, 1e-7);
        if interior(fine) {
            out.push((ds, fine.0));
        }
    }
    (out, drawn)
}

fn small_mle_errors(config: &EMConfig) -> (usize, f64, usize) {
    let (sets, drawn) = small_datasets(config.normalizer, 10);
    let mut worst = 0.0f64;
    let mut misses = 0;
    for (ds, oracle) in &sets {
        let em = fit_em(ds, &EMConfig { epsilon: 1e-9, max_iter: 100_000, ..*config });
        let err = em.map_or(f64::INFINITY, |f| (f.theta.beta[0] - oracle).abs());
        misses += usize::from(!(err < 1e-3));
        worst = worst.max(err);
    }
    (misses, worst, drawn)
}

fn c4_small_mle() -> Outcome {
    let (misses, worst, drawn) = small_mle_errors(&EMConfig::default());
    let exact = EMConfig { ties: Ties::Breslow, normalizer: Normalizer::SupportMass, ..EMConfig::default() };
    let (m_exact, w_exact, _) = small_mle_errors(&exact);
    outcome(
        misses == 0,
        format!(
            "{misses}/10 datasets off by >= 1e-3 (largest {worst:.2e}; {drawn} draws to find 10 with an interior maximum) \
             [breslow/support-mass variant vs its own likelihood: {m_exact}/10, largest {w_exact:.1e}]"
        ),
    )
}

fn table1_cell(name: &str) -> StudyReport {
    let mut sc = SimulationScenario::bundled(name).unwrap();
    sc.reps = 200;
    let options = StudyOptions {
        estimators: vec![Estimator::Em, Estimator::Weighted, Estimator::Standard],
        bootstrap: 100,
        bootstrap_estimators: vec![Estimator::Em],
        reference: Estimator::Standard,
        em: EMConfig::default(),
        exec: ExecMode::Parallel,
    };
    run_study(&sc, &options).unwrap()
}

fn bias(r: &StudyReport, e: Estimator, j: usize) -> f64 {
    r.metric(e, j).unwrap().bias
}

fn c5_table1(cells: &[(f64, StudyReport)], elapsed: Duration) -> Outcome {
    let mut failures = Vec::new();
    let mut summary = Vec::new();
    for (rho, r) in cells {
        for j in 0..2 {
            let m = r.metric(Estimator::Em, j).unwrap();
            let cov = m.coverage.unwrap_or(f64::NAN);
            if m.bias.abs() > 0.05 {
                failures.push(format!("em bias b{} = {:.3} at rho {rho}", j + 1, m.bias));
            }
            if !(0.90..=0.98).contains(&cov) {
                failures.push(format!("em coverage b{} = {cov:.3} at rho {rho}", j + 1));
            }
        }
        let s1 = bias(r, Estimator::Standard, 0);
        summary.push(format!(
            "rho {rho}: em bias ({:.3}, {:.3}) cov ({:.3}, {:.3}), w b1 {:.3}, s b1 {s1:.3}",
            bias(r, Estimator::Em, 0),
            bias(r, Estimator::Em, 1),
            r.metric(Estimator::Em, 0).unwrap().coverage.unwrap_or(f64::NAN),
            r.metric(Estimator::Em, 1).unwrap().coverage.unwrap_or(f64::NAN),
            bias(r, Estimator::Weighted, 0),
        ));
        let sign_ok = if *rho > 0.0 { s1 > 0.0 } else { s1 < 0.0 };
        if !sign_ok {
            failures.push(format!("standard b1 bias sign {s1:.3} at rho {rho}"));
        }
        if *rho > 0.0 {
            let w1 = bias(r, Estimator::Weighted, 0);
            if w1 < 0.12 {
                failures.push(format!("weighted b1 bias {w1:.3} < 0.12"));
            }
            if (s1 - 0.13).abs() > 0.06 {
                failures.push(format!("standard b1 bias {s1:.3} outside 0.13 +- 0.06"));
            }
        }
    }
    if elapsed > Duration::from_secs(30 * 60) {
        failures.push(format!("runtime {elapsed:.0?} over 30 min"));
    }
    let detail = format!("{}; {elapsed:.0?}{}", summary.join("; "), fail_suffix(&failures));
    outcome(failures.is_empty(), detail)
}

fn fail_suffix(failures: &[String]) -> String {
    if failures.is_empty() {
        String::new()
    } else {
        format!(" -- failed: {}", failures.join(", "))
    }
}

fn c6_independence() -> Outcome {
    let mut sc = SimulationScenario::bundled("figure3_independent").unwrap();
    sc.grid = None;
    sc.reps = 200;
    sc.n = 250;
    let mut options = StudyOptions::from_scenario(&sc);
    options.bootstrap = 0;
    let r = run_study(&sc, &options).unwrap();
    let mut failures = Vec::new();
    let mut parts = Vec::new();
    for j in 0..2 {
        let (em, w) = (r.metric(Estimator::Em, j).unwrap(), r.metric(Estimator::Weighted, j).unwrap());
        let gap = (em.rmse.unwrap() - w.rmse.unwrap()).abs();
        parts.push(format!("b{}: bias em {:.3} w {:.3}, rMSE em {:.2} w {:.2}", j + 1, em.bias, w.bias, em.rmse.unwrap(), w.rmse.unwrap()));
        for (name, b) in [("em", em.bias), ("w", w.bias)] {
            if b.abs() > 0.05 {
                failures.push(format!("{name} bias b{} = {b:.3}", j + 1));
            }
        }
        if gap > 0.25 {
            failures.push(format!("rMSE gap b{} = {gap:.3}", j + 1));
        }
    }
    outcome(failures.is_empty(), format!("{}{}", parts.join("; "), fail_suffix(&failures)))
}

fn c7_left_only() -> Outcome {
    let mut failures = Vec::new();
    let mut parts = Vec::new();
    for beta_l1 in [-1.0, 1.0] {
        let mut sc = SimulationScenario::bundled("figure4_left_only").unwrap();
        sc.grid = None;
        sc.beta_l[0] = beta_l1;
        sc.reps = 200;
        let mut options = StudyOptions::from_scenario(&sc);
        options.estimators = vec![Estimator::Em, Estimator::Weighted, Estimator::LeftAdjusted];
        let r = run_study(&sc, &options).unwrap();
        let em = r.estimates(Estimator::Em);
        let sl = r.estimates(Estimator::LeftAdjusted);
        for j in 0..2 {
            // Paired difference and its Monte Carlo standard error.
            let diffs: Vec<f64> = em.iter().zip(&sl).filter_map(|(a, b)| Some(a.as_ref()?[j] - b.as_ref()?[j])).collect();
            let m = diffs.len() as f64;
            let mean = diffs.iter().sum::<f64>() / m;
            let mcse = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt() / m.sqrt();
            let (b_em, b_sl, b_w) = (bias(&r, Estimator::Em, j), bias(&r, Estimator::LeftAdjusted, j), bias(&r, Estimator::Weighted, j));
            parts.push(format!(
                "bL1 {beta_l1} b{}: diff {mean:.4} (2 MCSE {:.4}), bias em {b_em:.3} sl {b_sl:.3} w {b_w:.3}",
                j + 1,
                2.0 * mcse
            ));
            if mean.abs() > 2.0 * mcse {
                failures.push(format!("em vs sl mean gap b{} at bL1 {beta_l1}", j + 1));
            }
            if b_em.abs() > 0.05 || b_sl.abs() > 0.05 {
                failures.push(format!("bias over 0.05 b{} at bL1 {beta_l1}", j + 1));
            }
            if b_w.abs() <= b_em.abs().max(b_sl.abs()) {
                failures.push(format!("weighted not more biased b{} at bL1 {beta_l1}", j + 1));
            }
        }
        if let Some(rho) = r.truncation.rho_lt {
            parts.push(format!("rho_LT {rho:.3}"));
        }
    }
    outcome(failures.is_empty(), format!("{}{}", parts.join("; "), fail_suffix(&failures)))
}

fn c8_bootstrap(cells: &[(f64, StudyReport)]) -> Outcome {
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (rho, r) in cells {
        for j in 0..2 {
            let m = r.metric(Estimator::Em, j).unwrap();
            let (se, sd) = (m.mean_se.unwrap_or(f64::NAN), m.sd.unwrap_or(f64::NAN));
            let rel = (se - sd).abs() / sd;
            worst = if rel.is_nan() { f64::INFINITY } else { worst.max(rel) };
            parts.push(format!("rho {rho} b{}: SE {se:.3} SD {sd:.3}", j + 1));
        }
    }
    outcome(worst <= 0.20, format!("largest |SE - SD|/SD = {worst:.3}; {}", parts.join("; ")))
}

fn c9_generator() -> Outcome {
    let zero = Generator {
        beta: [0.0; 2],
        beta_l: [0.0; 2],
        beta_r: [0.0; 2],
        nu: 0.001,
        kappa: 5.0,
        upper: 5.0,
        c_l: None,
        c_r: None,
    };
    let mut rng = stream(909, 0, Purpose::Validation);
    let mut t: Vec<f64> = (0..100_000).map(|_| generate_one(&zero, &mut rng).time).collect();
    t.sort_by(f64::total_cmp);
    let m = t.len() as f64;
    let ks = t
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = -(-0.001 * x.powi(5)).exp_m1();
            (f - i as f64 / m).abs().max((i as f64 + 1.0) / m - f)
        })
        .fold(0.0, f64::max);
    let rho = |beta_l1: f64| {
        let g = table1_generator(beta_l1);
        let mut rng = stream(909, 1, Purpose::Validation);
        let draws: Vec<(f64, f64)> = (0..100_000)
            .map(|_| {
                let d = generate_one(&g, &mut rng);
                (d.left.as_lower(), d.time)
            })
            .collect();
        pearson(&draws)
    };
    let (neg, pos) = (rho(-1.0), rho(1.0));
    outcome(
        ks < 0.01 && (neg + 0.35).abs() <= 0.05 && (pos - 0.35).abs() <= 0.05,
        format!("KS {ks:.4}; rho_LT {neg:.3} at bL1 = -1, {pos:.3} at bL1 = 1"),
    )
}

fn pearson(xy: &[(f64, f64)]) -> f64 {
    let m = xy.len() as f64;
    let (mx, my) = (xy.iter().map(|p| p.0).sum::<f64>() / m, xy.iter().map(|p| p.1).sum::<f64>() / m);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xy {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

fn c10_size() -> Outcome {
    let g = SimulationScenario::bundled("figure3_independent").unwrap().generator().unwrap();
    let rejections = (0..100u64)
        .filter(|&k| {
            let ds = sample_observed(&g, 250, &mut stream(1010, k, Purpose::Sample)).unwrap().dataset;
            conditional_kendall_tau(&ds, 199, 1010 + k).unwrap().p_value <= 0.05
        })
        .count();
    let size = rejections as f64 / 100.0;
    outcome((0.02..=0.08).contains(&size), format!("empirical size {size:.2} (100 runs, n = 250, 199 permutations)"))
}

fn main() {
    // Under the default libtest flags (`--list`, filters) there is nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let report = |k: usize, name: &str, o: &Outcome| {
        println!("CRITERION {k:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    let mut results = Vec::new();
    let mut run = |k: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let o = f();
        report(k, name, &o);
        results.push(o.pass);
    };
    if std::env::var("TRUNCOX_ACCEPTANCE_ONLY").is_ok_and(|v| v == "4") {
        let o = c4_small_mle();
        report(4, "small-instance MLE oracle", &o);
        return;
    }
    run(1, "EM ascent", &c1_ascent);
    run(2, "no-truncation reduction", &c2_no_truncation);
    run(3, "gradient oracle", &c3_gradient);
    run(4, "small-instance MLE oracle", &c4_small_mle);

    let start = Instant::now();
    let cells: Vec<(f64, StudyReport)> = [(-0.35, "table1_rhom035_n100"), (0.0, "table1_rho0_n100"), (0.35, "table1_rho035_n100")]
        .into_iter()
        .map(|(rho, name)| (rho, table1_cell(name)))
        .collect();
    let elapsed = start.elapsed();
    run(5, "Table 1 replication", &|| c5_table1(&cells, elapsed));
    run(6, "independence regime", &c6_independence);
    run(7, "left-only agreement", &c7_left_only);
    run(8, "bootstrap calibration", &|| c8_bootstrap(&cells));
    run(9, "generator fidelity", &c9_generator);
    run(10, "diagnostic size", &c10_size);

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed < results.len() && std::env::var("TRUNCOX_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
