//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use seqrand::cglmp::StateKind;
use seqrand::cli::{run, Command, RunConfig, RunOptions};
use seqrand::guessing::{
    bob1_decomposition, chsh_correlated_attack, guess_cglmp, mixture_scenario, theorem_battery,
    GuessScope, TheoremReport, ThetaBasis,
};
use seqrand::npa::{build_problem, mixture_guess_bound, WordProfile};
use seqrand::sdp::{parse_sdpa, solve, to_sdpa_string, Block, SdpProblem, SparseSym};
use seqrand::seqsim::{
    cglmp_scenario, closed_i1, closed_i2, double_violation_window, mes_i2_printed,
    round_violations, sequential_distribution, window_from, window_lower, EpsilonGrid,
    InstrumentMode,
};
use seqrand::{SolverConfig, SolverStatus};

/// External-solver optimum (cvxpy + Clarabel, `python/sdpa_oracle.py`) of the
/// reduced MVS instance at ε = 0.8, target (0, 1), default profile.
const MVS_ORACLE_VALUE: f64 = -0.524779439404;

/// Runs one criterion, prints its PASS/FAIL line past the test harness's
/// output capture, and fails the test on FAIL.
fn criterion(id: u32, budget_secs: u64, f: impl FnOnce() -> (bool, String)) {
    let t = Instant::now();
    let (ok, detail) = f();
    let elapsed = t.elapsed();
    let pass = ok && elapsed <= Duration::from_secs(budget_secs);
    let line = format!(
        "{} criterion {id:>2}: {detail} [{:.2} s of {budget_secs} s]\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} failed: {detail}");
}

fn simulated(kind: StateKind, eps: f64) -> [f64; 2] {
    let s = cglmp_scenario(kind, &[eps, 1.0], InstrumentMode::Sqrt, None).unwrap();
    let v = round_violations(&s, 3).unwrap();
    [v[0], v[1]]
}

fn c1_maxima() -> (bool, String) {
    let s3 = 3f64.sqrt();
    let mut ok = true;
    let mut parts = Vec::new();
    for (kind, table, closed) in [
        (StateKind::Mes, 2.8729, 4.0 / 9.0 * (3.0 + 2.0 * s3)),
        (StateKind::Mvs, 2.915, 1.0 + (11.0f64 / 3.0).sqrt()),
    ] {
        let sim = simulated(kind, 1.0)[0];
        ok &= (sim - table).abs() < 1e-3
            && (sim - closed).abs() < 1e-9
            && (closed_i1(kind, 1.0) - closed).abs() < 1e-12;
        parts.push(format!(
            "{} I1(1)={sim:.10} closed={closed:.10}",
            kind.name()
        ));
    }
    (ok, parts.join("; "))
}

fn c2_thresholds() -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for (kind, expected) in [(StateKind::Mes, 0.69616), (StateKind::Mvs, 0.68614)] {
        let (lo, _) = double_violation_window(kind).unwrap();
        let sim_lo = window_from(kind, |e| simulated(kind, e)[0], |e| simulated(kind, e)[1])
            .unwrap()
            .0;
        ok &= (lo - expected).abs() < 1e-4
            && (sim_lo - lo).abs() < 1e-8
            && (window_lower(kind) - lo).abs() < 1e-10;
        parts.push(format!(
            "{} lower={lo:.8} simulated={sim_lo:.8}",
            kind.name()
        ));
    }
    (ok, parts.join("; "))
}

fn c3_second_round() -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for (kind, table_hi) in [(StateKind::Mes, 0.904), (StateKind::Mvs, 0.902)] {
        let (lo, hi) = double_violation_window(kind).unwrap();
        let grid = EpsilonGrid::new(lo, hi, (hi - lo) / 40.0).unwrap().points();
        let dev = grid
            .iter()
            .map(|&e| (simulated(kind, e)[1] - closed_i2(kind, e)).abs())
            .fold(0.0, f64::max);
        ok &= dev < 1e-3 && (hi - table_hi).abs() < 0.015;
        parts.push(format!(
            "{} max|I2-closed|={dev:.2e} upper={hi:.4} (table {table_hi})",
            kind.name()
        ));
        if kind == StateKind::Mes {
            let literal = grid
                .iter()
                .map(|&e| (simulated(kind, e)[1] - mes_i2_printed(e)).abs())
                .fold(0.0, f64::max);
            parts.push(format!(
                "mes literal-formula deviation {literal:.3} (typo, corrected form used)"
            ));
        }
    }
    (ok, parts.join("; "))
}

fn battery() -> &'static TheoremReport {
    static REPORT: OnceLock<TheoremReport> = OnceLock::new();
    REPORT.get_or_init(|| theorem_battery(7, 100).unwrap())
}

fn c4_projective() -> (bool, String) {
    let r = battery();
    (
        r.instances == 100 && r.max_projective_residual < 1e-8,
        format!(
            "100 projective chains, max |G_q - G_c| = {:.2e}",
            r.max_projective_residual
        ),
    )
}

fn c5_dilation() -> (bool, String) {
    let r = battery();
    (
        r.instances == 100 && r.max_dilation_residual < 1e-8 && r.max_recovery_residual < 1e-10,
        format!(
            "100 mixtures, max |G_q - G_c| = {:.2e}, max recovery residual = {:.2e}",
            r.max_dilation_residual, r.max_recovery_residual
        ),
    )
}

fn c6_chsh() -> (bool, String) {
    // Exact up to a few ulps of floating-point rounding.
    let r = chsh_correlated_attack(0.5).unwrap();
    (
        (r.guess_probability - 0.5).abs() <= 4.0 * f64::EPSILON
            && (r.min_entropy - 1.0).abs() <= 8.0 * f64::EPSILON,
        format!(
            "G = {:.17} H = {:.17} bit",
            r.guess_probability, r.min_entropy
        ),
    )
}

fn c7_trusted_curves() -> (bool, String) {
    let mut ok = true;
    let mut rows = 0;
    for kind in [StateKind::Mes, StateKind::Mvs] {
        for (scope, cap) in [
            (GuessScope::Local, 9f64.log2()),
            (GuessScope::Global, 27f64.log2()),
        ] {
            for setting in [(0, 0, 1), (1, 1, 0), (0, 0, 0)] {
                let opts = RunOptions {
                    state: Some(kind),
                    scope: Some(scope),
                    setting: Some(format!("{},{},{}", setting.0, setting.1, setting.2)),
                    ..RunOptions::default()
                };
                let cfg = RunConfig::resolve(Command::GuessDecomp, opts).unwrap();
                let csv = run(&cfg).unwrap();
                let mut prev_eps = f64::NEG_INFINITY;
                for line in csv.lines().skip(1) {
                    let v: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
                    let (eps, g, h, modal) = (v[0], v[1], v[2], v[3]);
                    ok &= eps > prev_eps
                        && v.iter().all(|x| x.is_finite())
                        && g >= modal - 1e-12
                        && g <= 1.0 + 1e-12
                        && h >= -1e-12
                        && h <= cap + 1e-12
                        && (h + g.log2()).abs() < 1e-9;
                    prev_eps = eps;
                    rows += 1;
                }
            }
        }
    }
    (
        ok,
        format!("{rows} CSV rows over both states, both scopes, three settings"),
    )
}

fn h_guess(kind: StateKind, eps: f64, target: (usize, usize)) -> f64 {
    let s = mixture_scenario(kind, eps, ThetaBasis::Eigen).unwrap();
    let dec = bob1_decomposition(eps, target.0, ThetaBasis::Eigen).unwrap();
    guess_cglmp(&s, &dec, (0, target.0, target.1), GuessScope::Local)
        .unwrap()
        .min_entropy
}

fn c8_di_bounds() -> (bool, String) {
    let grid = [0.70, 0.74, 0.78, 0.82, 0.86];
    let cfg = SolverConfig::default();
    let jobs: Vec<(StateKind, f64, (usize, usize))> = [StateKind::Mes, StateKind::Mvs]
        .into_iter()
        .flat_map(|k| {
            grid.iter()
                .flat_map(move |&e| [(k, e, (0, 1)), (k, e, (0, 0))])
        })
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(kind, eps, target)| {
            let r = mixture_guess_bound(
                kind,
                eps,
                target,
                ThetaBasis::Eigen,
                WordProfile::Default,
                &cfg,
            );
            (kind, eps, target, r)
        })
        .collect();
    let mut solved = true;
    let mut dominance = true;
    let mut comparison = true;
    let mut parts = Vec::new();
    for kind in [StateKind::Mes, StateKind::Mvs] {
        let (lo, hi) = double_violation_window(kind).unwrap();
        assert!(grid.iter().all(|&e| e > lo && e < hi));
        let mut worst = f64::NEG_INFINITY;
        let mut line = Vec::new();
        for &eps in &grid {
            let mut gaps = [f64::NAN; 2];
            let mut g_gaps = [f64::NAN; 2];
            for (slot, target) in [(0, (0, 1)), (1, (0, 0))] {
                let (_, _, _, r) = results
                    .iter()
                    .find(|j| j.0 == kind && j.1 == eps && j.2 == target)
                    .unwrap();
                match r {
                    Ok(b) => {
                        solved &= b.status == SolverStatus::Optimal && b.gap < 1e-6;
                        let hg = h_guess(kind, eps, target);
                        dominance &= b.report.min_entropy <= hg + 1e-4;
                        worst = worst.max(b.report.min_entropy - hg);
                        gaps[slot] = hg - b.report.min_entropy;
                        g_gaps[slot] = b.report.guess_probability - hg.exp2().recip();
                    }
                    Err(e) => {
                        solved = false;
                        line.push(format!("eps {eps} target {target:?}: {e}"));
                    }
                }
            }
            comparison &= gaps[0] < gaps[1];
            line.push(format!(
                "{eps}: gap distinct {:.3} / repeated {:.3} bits (G: {:.3} / {:.3})",
                gaps[0], gaps[1], g_gaps[0], g_gaps[1]
            ));
        }
        parts.push(format!(
            "{} max(H_npa - H_guess) = {worst:.1e}; {}",
            kind.name(),
            line.join(", ")
        ));
    }
    (
        solved && dominance && comparison,
        format!(
            "optimal&gap<1e-6: {solved}, dominance: {dominance}, distinct closer than repeated: {comparison}; {}",
            parts.join(" | ")
        ),
    )
}

fn c9_sdp_validation() -> (bool, String) {
    let cfg = SolverConfig::default();
    let toys: Vec<(SdpProblem, f64)> = vec![
        (
            SdpProblem::new(
                vec![Block::dense(2)],
                SparseSym::new([(0, 0, 0, 2.0), (0, 0, 1, 1.0), (0, 1, 1, 2.0)]),
                vec![SparseSym::new([(0, 0, 0, 1.0), (0, 1, 1, 1.0)])],
                vec![1.0],
            )
            .unwrap(),
            3.0,
        ),
        (
            SdpProblem::new(
                vec![Block::dense(3)],
                SparseSym::new([
                    (0, 0, 0, 0.5),
                    (0, 1, 1, 0.5),
                    (0, 2, 2, 0.5),
                    (0, 0, 1, -0.25),
                    (0, 0, 2, -0.25),
                    (0, 1, 2, -0.25),
                ]),
                (0..3).map(|i| SparseSym::new([(0, i, i, 1.0)])).collect(),
                vec![1.0; 3],
            )
            .unwrap(),
            2.25,
        ),
        (
            SdpProblem::new(
                vec![Block::diagonal(2), Block::dense(1)],
                SparseSym::new([(0, 0, 0, 1.0), (0, 1, 1, 2.0)]),
                vec![
                    SparseSym::new([(0, 0, 0, 1.0), (0, 1, 1, 1.0)]),
                    SparseSym::new([(1, 0, 0, 1.0)]),
                ],
                vec![1.0, 0.5],
            )
            .unwrap(),
            2.0,
        ),
    ];
    let toy_err = toys
        .iter()
        .map(|(p, v)| {
            let s = solve(p, &cfg).unwrap();
            if s.status == SolverStatus::Optimal {
                (s.primal_value - v).abs()
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max);

    let p_obs =
        sequential_distribution(&mixture_scenario(StateKind::Mvs, 0.8, ThetaBasis::Eigen).unwrap())
            .unwrap();
    let problem = build_problem(Some(&p_obs), (0, 1), WordProfile::Default).unwrap();
    let red = problem.reduce().unwrap();
    let parsed = parse_sdpa(&to_sdpa_string(&red.problem)).unwrap();
    let s = solve(&parsed, &cfg).unwrap();
    let oracle_err = (s.primal_value - MVS_ORACLE_VALUE).abs();
    (
        toy_err < 1e-7 && s.status == SolverStatus::Optimal && oracle_err < 1e-5,
        format!(
            "toy max error {toy_err:.1e}; exported MVS instance {:.9} vs external {MVS_ORACLE_VALUE:.9} (diff {oracle_err:.1e})",
            s.primal_value
        ),
    )
}

fn c10_witness() -> (bool, String) {
    let mut ok = true;
    let mut worst = [0.0f64; 3];
    for kind in [StateKind::Mes, StateKind::Mvs] {
        for eps in [0.7, 0.8, 0.88] {
            for target in [(0, 1), (1, 0), (0, 0), (1, 1)] {
                let r =
                    seqrand::npa::decomposition_realization(kind, eps, target, ThetaBasis::Eigen)
                        .unwrap();
                let problem =
                    build_problem(Some(&r.distribution()), target, WordProfile::Default).unwrap();
                let rep = problem.check_witness(&r.moment_matrix(&problem)).unwrap();
                ok &= rep.identification_residual < 1e-8
                    && rep.equation_residual < 1e-8
                    && rep.min_eigenvalue > -1e-8;
                worst[0] = worst[0].max(rep.identification_residual);
                worst[1] = worst[1].max(rep.equation_residual);
                worst[2] = worst[2].min(rep.min_eigenvalue);
            }
        }
    }
    (
        ok,
        format!(
            "24 realizations: max identification {:.1e}, max equation {:.1e}, min eigenvalue {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

#[test]
fn criterion_01_cglmp_maxima() {
    criterion(1, 1, c1_maxima);
}

#[test]
fn criterion_02_violation_thresholds() {
    criterion(2, 1, c2_thresholds);
}

#[test]
fn criterion_03_second_round_curves() {
    criterion(3, 10, c3_second_round);
}

#[test]
fn criterion_04_projective_guess_equality() {
    criterion(4, 30, c4_projective);
}

#[test]
fn criterion_05_dilated_guess_equality() {
    criterion(5, 60, c5_dilation);
}

#[test]
fn criterion_06_chsh_warm_up() {
    criterion(6, 1, c6_chsh);
}

#[test]
fn criterion_07_trusted_randomness_curves() {
    criterion(7, 60, c7_trusted_curves);
}

#[test]
fn criterion_08_device_independent_bounds() {
    criterion(8, 1800, c8_di_bounds);
}

#[test]
fn criterion_09_sdp_solver_validation() {
    criterion(9, 600, c9_sdp_validation);
}

#[test]
fn criterion_10_feasibility_witness() {
    criterion(10, 60, c10_witness);
}
