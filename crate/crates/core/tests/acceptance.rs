//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the verdicts are always printed; exits non-zero if any criterion fails.

use std::f64::consts::{E, SQRT_2};
use std::time::{Duration, Instant};

use contraction_lab::cli::{execute, report_json};
use contraction_lab::config::{Experiment, ExperimentConfig, Overrides};
use contraction_lab::coupling::{evolve_ensemble, EnsembleOptions, InitialPairs};
use contraction_lab::models::{CurvatureProfile, DriftModel, Hypothesis, K1Function};
use contraction_lab::psi::{build_psi, contraction_constants, cor1_constants, lemma1_residuals};
use contraction_lab::verify::{
    check_contraction, check_gradient, check_harnack, coupling_for, esm_second_moment_checks, estimate_esm,
    ContractionSetup, EsmSetup, GradientSetup, HarnackSetup, InitialLaw, TestFunction,
};
use contraction_lab::wasserstein::{wasserstein_1d_quantile, wasserstein_exact, EmpiricalMeasure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn flat(k1: f64, k2: f64, r0: f64, k3: f64) -> CurvatureProfile {
    CurvatureProfile::new(K1Function::constant(k1), k2, 0.0, r0, k3).unwrap()
}

fn double_well_profile() -> CurvatureProfile {
    CurvatureProfile::new(K1Function::linear(1.0), 0.25, 2.0, 2.0 * SQRT_2, 0.125).unwrap()
}

fn psi_suite() -> Verdict {
    let profiles = [flat(0.0, 1.0, 0.5, 1.0), flat(1.0, 2.0, 1.0, 1.0), double_well_profile()];
    let mut worst_ode: f64 = 0.0;
    let mut worst_pinch = f64::NEG_INFINITY;
    let mut worst_drift = f64::INFINITY;
    for prof in &profiles {
        for p in [1.0, 2.0, 4.0] {
            let res = lemma1_residuals(&build_psi(prof, p, 1e-9).unwrap());
            worst_ode = worst_ode.max(res.ode_residual);
            worst_pinch = worst_pinch.max(res.pinching_lower).max(res.pinching_upper);
            worst_drift = worst_drift.min(res.drift_margin);
        }
    }
    let pass = worst_ode <= 1e-6 && worst_pinch <= 1e-12 && worst_drift >= -1e-8;
    verdict(
        pass,
        format!("ode residual {worst_ode:.2e}, pinching excess {worst_pinch:.2e}, drift margin {worst_drift:.2e}"),
    )
}

fn constants() -> Verdict {
    // prefactor (1 + 2k1/k2)^{(p-1)/p} e^{k1²/(p k2)} and λ = (k2/2) e^{-k1²/k2}
    // at (1, 2, 2) are sqrt(2) e^{1/4} and e^{-1/2}
    let c = cor1_constants(1.0, 2.0, 2.0).unwrap();
    let e1 = (c.prefactor - SQRT_2 * 0.25f64.exp()).abs();
    let e2 = (c.lambda - (-0.5f64).exp()).abs();
    // the affine bound is the flat profile with r0 = 2k1/k2 and k3 = k2/2
    let mut e3: f64 = 0.0;
    for &(k1, k2) in &[(1.0, 2.0), (0.5, 1.0), (0.1, 3.0), (2.0, 0.7)] {
        for p in [1.0, 2.0, 3.0] {
            let c = cor1_constants(k1, k2, p).unwrap();
            let g = contraction_constants(&flat(k1, k2, 2.0 * k1 / k2, k2 / 2.0), p).unwrap();
            e3 = e3.max((c.prefactor - g.c_p).abs() / g.c_p).max((c.lambda - g.lambda).abs() / g.lambda);
        }
    }
    verdict(
        e1 <= 1e-12 && e2 <= 1e-12 && e3 <= 1e-12,
        format!("closed form errors {e1:.1e}, {e2:.1e}; induced profile mismatch {e3:.1e}"),
    )
}

fn ou_rate() -> Verdict {
    let model = DriftModel::ou(1, 1.0).unwrap();
    let hyp = Hypothesis::Profile(flat(0.0, 1.0, 0.5, 1.0));
    let times = vec![0.5, 1.0, 2.0];
    let (n, dt) = (10_000, 1e-3);
    // E[ρ_t] against the exact OU rate, plain standard errors
    let ens = evolve_ensemble(
        &model,
        &coupling_for(&hyp),
        &InitialPairs::fixed(vec![0.0], vec![1.0]),
        0.0,
        2.0,
        dt,
        n,
        101,
        &EnsembleOptions {
            checkpoints: times.clone(),
            powers: vec![1.0],
        },
    )
    .unwrap();
    let mut exact_ok = true;
    let mut notes = Vec::new();
    for &t in &times {
        let m = ens.snapshot_at(t).unwrap().summary.mean_distance;
        exact_ok &= m.mean <= (-t).exp() + 3.0 * m.se;
        notes.push(format!("E[ρ_{t}] = {:.4} ± {:.4} vs e^-t = {:.4}", m.mean, m.se, (-t).exp()));
    }
    let setup = ContractionSetup {
        x: vec![0.0],
        y: vec![1.0],
        s: 0.0,
        times,
        p: 2.0,
        n,
        dt,
        seed: 7,
    };
    let r = check_contraction(&model, &hyp, &setup).unwrap();
    let min_margin = r.entries.iter().map(|e| e.margin).fold(f64::INFINITY, f64::min);
    let bound_ok = r.overall_pass && min_margin > 0.0;
    notes.push(format!("bound margin >= {min_margin:.4}"));
    verdict(exact_ok && bound_ok, notes.join("; "))
}

fn double_well() -> Verdict {
    let model = DriftModel::double_well();
    let hyp = Hypothesis::Profile(double_well_profile());
    let mut ok = true;
    let mut notes = Vec::new();
    for p in [1.0, 2.0] {
        let setup = ContractionSetup {
            x: vec![-1.0],
            y: vec![1.0],
            s: 0.0,
            times: vec![2.0, 5.0, 10.0],
            p,
            n: 10_000,
            dt: 1e-3,
            seed: 21,
        };
        let r = check_contraction(&model, &hyp, &setup).unwrap();
        let tilde: Vec<_> = r.entries.iter().filter(|e| e.quantity == "w_tilde_p").collect();
        let tilde_ok = tilde.len() == 3 && tilde.iter().all(|e| e.pass);
        let rate = r.fitted_rate.unwrap_or(f64::NAN);
        let rate_ok = rate >= 0.9 * r.lambda;
        ok &= tilde_ok && rate_ok;
        notes.push(format!(
            "p={p}: W~ upper {:.3e} <= bound {:.3e} at t=10, rate {rate:.3} vs 0.9λ = {:.4}",
            tilde[2].ci[1],
            tilde[2].bound,
            0.9 * r.lambda
        ));
    }
    verdict(ok, notes.join("; "))
}

/// Minimum of `Σ_i cost(i, σ(i))` over all permutations, by Heap's algorithm.
fn brute_force(cost: &[f64], n: usize) -> f64 {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    let total = |perm: &[usize]| perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>();
    let mut best = total(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(total(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn transport_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_1d: f64 = 0.0;
    for k in 0..200 {
        let n = rng.gen_range(1..=256);
        let p = [1.0, 2.0, 3.0][k % 3];
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..5.0)).collect();
        let mu = EmpiricalMeasure::from_1d(&a).unwrap();
        let nu = EmpiricalMeasure::from_1d(&b).unwrap();
        let exact = wasserstein_exact(&mu, &nu, p).unwrap().value;
        let oracle = wasserstein_1d_quantile(&mu, &nu, p).unwrap().value;
        worst_1d = worst_1d.max((exact - oracle).abs() / oracle.max(1.0));
    }
    let mut worst_2d: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(1..=8);
        let p = [1.0, 2.0, 3.0][rng.gen_range(0..3)];
        let a: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let cost: Vec<f64> = (0..n * n)
            .map(|ij| {
                let (i, j) = (ij / n, ij % n);
                let d = ((a[2 * i] - b[2 * j]).powi(2) + (a[2 * i + 1] - b[2 * j + 1]).powi(2)).sqrt();
                d.powf(p)
            })
            .collect();
        let oracle = (brute_force(&cost, n) / n as f64).powf(1.0 / p);
        let mu = EmpiricalMeasure::uniform(2, a).unwrap();
        let nu = EmpiricalMeasure::uniform(2, b).unwrap();
        let exact = wasserstein_exact(&mu, &nu, p).unwrap().value;
        worst_2d = worst_2d.max((exact - oracle).abs() / oracle.max(1.0));
    }
    verdict(
        worst_1d <= 1e-12 && worst_2d <= 1e-12,
        format!("1D vs quantile {worst_1d:.1e}, 2D vs permutations {worst_2d:.1e}"),
    )
}

fn girsanov() -> Verdict {
    let model = DriftModel::ou(1, 1.0).unwrap();
    let setup = HarnackSetup {
        x: vec![0.0],
        y: vec![1.0],
        s: 0.0,
        horizon: 1.0,
        p: 2.0,
        n: 10_000,
        dt: 1e-3,
        seed: 3,
    };
    let r = check_harnack(&model, 0.0, 1.0, TestFunction::Exp { rate: 0.5 }, &setup).unwrap();
    let g = &r.girsanov;
    let all_coupled = g.coupled_fraction == 1.0;
    let r_ok = (g.mean_r.mean - 1.0).abs() <= 3.0 * g.mean_r.se;
    let target = (2.0 / (E * E - 1.0)).exp();
    let r2_ok = g.mean_rq.mean <= target * (1.0 + 3.0 * g.mean_rq.se);
    let exponent_ok = (r.factor_exponent - 1.0 / (E * E - 1.0)).abs() < 1e-12;
    let oracle_ok = r.oracle.is_some_and(|o| o.pass && o.lhs_consistent && o.rhs_consistent);
    verdict(
        all_coupled && r_ok && r2_ok && exponent_ok && oracle_ok && r.entry.pass,
        format!(
            "coupled {:.3}, E[R] = {:.4} ± {:.4}, E[R²] = {:.4} <= {target:.4}, exponent {:.5}, Harnack margin {:.3}",
            g.coupled_fraction, g.mean_r.mean, g.mean_r.se, g.mean_rq.mean, r.factor_exponent, r.entry.margin
        ),
    )
}

fn gradient() -> Verdict {
    let model = DriftModel::ou(1, 1.0).unwrap();
    let setup = GradientSetup {
        x: vec![0.3],
        s: 0.0,
        times: vec![0.5, 1.0, 2.0],
        h: 1e-2,
        n: 10_000,
        dt: 1e-3,
        seed: 5,
    };
    let r = check_gradient(&model, &Hypothesis::Affine { k1: 0.0, k2: 1.0 }, TestFunction::Sin, &setup).unwrap();
    let margins: Vec<String> = r.entries.iter().map(|e| format!("{:.3}", e.margin)).collect();
    verdict(
        r.overall_pass && r.lambda == 0.5 && r.entries.len() == 3,
        format!("λ = {}, margins {}", r.lambda, margins.join(", ")),
    )
}

fn esm() -> Verdict {
    let model = DriftModel::forced_ou(1.0, 1.0).unwrap();
    let setup = EsmSetup {
        t: 0.0,
        starts: vec![-2.0, -4.0, -8.0, -16.0],
        law_a: InitialLaw::PointMass { x: 3.0 },
        law_b: InitialLaw::Uniform { lo: -1.0, hi: 1.0 },
        n: 10_000,
        dt: 1e-3,
        seed: 13,
    };
    let r = estimate_esm(&model, &setup).unwrap();
    let rate = r.fitted_rate.unwrap_or(f64::NAN);
    let last = r.rows.last().unwrap().mean_a;
    let mean_ok = (last.mean + 0.5).abs() <= 3.0 * last.se;
    let moments = esm_second_moment_checks(&model, &r).unwrap();
    let worst_moment = r
        .rows
        .iter()
        .map(|w| w.second_moment_a.upper(3.0))
        .fold(f64::NEG_INFINITY, f64::max);
    let pass = rate >= 0.45 && mean_ok && worst_moment <= 3.5 && moments.iter().all(|m| m.pass) && r.overall_pass;
    verdict(
        pass,
        format!(
            "rate {rate:.4}, mean {:.4} ± {:.4} vs -0.5, second moment upper {worst_moment:.3} <= 3.5",
            last.mean, last.se
        ),
    )
}

fn determinism() -> Verdict {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let cases = [
        (Experiment::CoupleRun, "couple_run_ou.toml", 500),
        (Experiment::ContractCheck, "contract_ou.toml", 500),
        (Experiment::EsmRun, "esm_forced_ou.toml", 500),
        (Experiment::PsiTable, "psi_table.toml", 1),
    ];
    let mut ok = true;
    for (experiment, file, paths) in cases {
        let config = ExperimentConfig::load(&dir.join(file))
            .unwrap()
            .resolve(
                experiment,
                Overrides {
                    paths: Some(paths),
                    ..Overrides::default()
                },
            )
            .unwrap();
        let body = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let outcome = execute(experiment, &config, &dir).unwrap();
                (report_json(experiment, &config, &outcome), outcome.csv)
            })
        };
        ok &= body(1) == body(3);
    }
    verdict(ok, "report bodies and CSV identical across reruns with 1 and 3 threads")
}

fn main() {
    type Criterion = (&'static str, fn() -> Verdict, Duration);
    let criteria: [Criterion; 9] = [
        ("1 psi property suite", psi_suite, Duration::from_secs(10)),
        ("2 constant reproduction", constants, Duration::from_secs(10)),
        ("3 OU exact rate", ou_rate, Duration::from_secs(60)),
        ("4 double-well contraction", double_well, Duration::from_secs(300)),
        ("5 OT oracle equivalence", transport_oracles, Duration::from_secs(30)),
        ("6 Girsanov suite", girsanov, Duration::from_secs(120)),
        ("7 gradient estimate", gradient, Duration::from_secs(60)),
        ("8 ESM suite", esm, Duration::from_secs(180)),
        ("9 determinism", determinism, Duration::from_secs(300)),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let pass = v.pass && elapsed <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {name}: {} [{:.1}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
