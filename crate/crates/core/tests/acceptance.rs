//! Acceptance criteria 1–12. Each test prints one `PASS`/`FAIL` line with the
//! measured quantity, its pinned tolerance and the wall time, then asserts.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use levysee::convergence::{
    characteristics_conditions, fdd_distance, generator_convergence, skorokhod_distance, CharacteristicsBounds,
    SequenceScenario,
};
use levysee::ensemble::{mean_and_stderr, variance_and_stderr, Ensemble};
use levysee::evolution::ScalarFn;
use levysee::levy::empirical_char;
use levysee::ou_solver::{
    flow_composition_residual, fubini_residual, markov_diagnostic, mild_solution, ou_cadlag, square_moment_report,
    weak_solution_residuals, Replica,
};
use levysee::path::PiecewisePath;
use levysee::stochint::{levy_integral, weak_levy_integral};
use levysee::{
    DualVector, EvolutionSystem, GeneratorFamily, InitialCondition, IntegrandR, JumpAtom, LevyCharacteristics,
    LevyPath, Quadrature, SeeProblem, SeminormFamily, TestFunction, TimeGrid,
};

const WEAK_STRONG_TOL: f64 = 1e-11;
const SIGMA: f64 = 3.0;
const DECOMPOSITION_TOL: f64 = 1e-12;
const EXACT_TOL: f64 = 1e-12;
const COCYCLE_WINDOW: (f64, f64) = (3.2, 4.8);
const SIMPSON_WINDOW: (f64, f64) = (12.8, 19.2);
const HALVING_WINDOW: (f64, f64) = (1.6, 2.4);
const PURE_JUMP_TOL: f64 = 1e-9;
const FUBINI_TOL: f64 = 1e-8;
const QUADRATURE_TOL: f64 = 1e-8;
const FLOW_TOL: f64 = 1e-10;

fn report(id: u32, name: &str, pass: bool, detail: String, start: Instant, budget_s: u64) {
    let elapsed = start.elapsed();
    let in_time = elapsed < Duration::from_secs(budget_s);
    let verdict = if pass && in_time { "PASS" } else { "FAIL" };
    println!(
        "criterion {id:>2} [{name}]: {verdict} ({detail}; {:.2} s of {budget_s} s)",
        elapsed.as_secs_f64()
    );
    assert!(pass, "criterion {id} failed: {detail}");
    assert!(in_time, "criterion {id} exceeded its {budget_s} s budget");
}

fn within(x: f64, (lo, hi): (f64, f64)) -> bool {
    (lo..=hi).contains(&x)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| uniform(rng, -scale, scale)).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| uniform(rng, -scale, scale))
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let g = random_matrix(rng, n, n, scale);
    &g * g.transpose() / n as f64
}

fn unit_family(n: usize) -> SeminormFamily {
    SeminormFamily::from_weights(vec![vec![1.0; n]]).unwrap()
}

/// Random characteristics with Wiener part, up to three atoms (some small,
/// some large under the unit weights) and drift.
fn random_chars(rng: &mut ChaCha8Rng, n: usize, wiener: bool, drift: bool) -> LevyCharacteristics {
    let atoms: Vec<JumpAtom> = (0..rng.random_range(0..=3))
        .map(|_| {
            let scale = if rng.random_bool(0.5) { 0.4 / (n as f64).sqrt() } else { 2.0 };
            let mut mark = random_vec(rng, n, scale);
            mark[0] += scale * 0.1;
            JumpAtom::new(uniform(rng, 0.5, 4.0), DualVector::new(mark).unwrap())
        })
        .collect();
    let m = if drift { random_vec(rng, n, 1.0) } else { vec![0.0; n] };
    let q = if wiener { random_psd(rng, n, 1.0) } else { DMatrix::zeros(n, n) };
    LevyCharacteristics::new(DualVector::new(m).unwrap(), q, atoms, &unit_family(n), 0).unwrap()
}

fn random_integrand(rng: &mut ChaCha8Rng, n: usize) -> IntegrandR {
    let b = random_matrix(rng, n, n, 1.0);
    let c = random_matrix(rng, n, n, 1.0);
    match rng.random_range(0..3) {
        0 => IntegrandR::constant(b),
        1 => IntegrandR::time_varying(n, n, move |t| &b + &c * t.sin()),
        _ => IntegrandR::mark_dependent(n, n, move |t, f| &b * (1.0 + 0.1 * t) + &c * f[0]),
    }
}

fn diagonal_problem(
    a: Vec<f64>,
    b: DMatrix<f64>,
    eta: Vec<f64>,
    chars: LevyCharacteristics,
    horizon: f64,
    steps: usize,
    quadrature: Quadrature,
) -> SeeProblem {
    SeeProblem::langevin(
        EvolutionSystem::diagonal(DVector::from_vec(a)).unwrap(),
        b,
        InitialCondition::point(DualVector::new(eta).unwrap()),
        chars,
        TimeGrid::uniform(horizon, steps).unwrap(),
        quadrature,
    )
    .unwrap()
}

#[test]
fn criterion_01_weak_strong_compatibility() {
    let start = Instant::now();
    let mut rng = rng(101);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = rng.random_range(1..=16);
        let chars = random_chars(&mut rng, n, true, true);
        let r = random_integrand(&mut rng, n);
        let grid = TimeGrid::uniform(uniform(&mut rng, 0.5, 2.0), rng.random_range(4..40)).unwrap();
        let path = LevyPath::simulate(&chars, &grid, case).unwrap();
        let psi = TestFunction::new(random_vec(&mut rng, n, 1.0)).unwrap();
        let strong = levy_integral(&r, &path, &chars, 4).unwrap();
        let weak = weak_levy_integral(&r, &psi, &path, &chars, 4).unwrap();
        for (k, w) in weak.iter().enumerate() {
            let v = strong.value(k);
            let scale = 1.0_f64.max(v.norm() * psi.as_vector().norm());
            worst = worst.max((v.dot(psi.as_vector()) - w).abs() / scale);
        }
    }
    report(
        1,
        "weak-strong compatibility",
        worst <= WEAK_STRONG_TOL,
        format!("max scaled diff {worst:.2e} ≤ {WEAK_STRONG_TOL:.0e} over 100 instances"),
        start,
        5,
    );
}

#[test]
fn criterion_02_levy_khintchine() {
    let start = Instant::now();
    let mut rng = rng(202);
    let n = 3;
    let fam = unit_family(n);
    let chars = LevyCharacteristics::new(
        DualVector::new(vec![0.4, -0.2, 0.1]).unwrap(),
        random_psd(&mut rng, n, 1.0),
        vec![
            JumpAtom::new(3.0, DualVector::new(vec![0.3, -0.2, 0.4]).unwrap()),
            JumpAtom::new(1.2, DualVector::new(vec![1.5, 0.5, -1.0]).unwrap()),
        ],
        &fam,
        0,
    )
    .unwrap();
    let paths = 20_000;
    let mut hits = 0;
    let mut worst_z: f64 = 0.0;
    for case in 0..20u64 {
        let t = uniform(&mut rng, 0.1, 2.0);
        let phi = TestFunction::new(random_vec(&mut rng, n, 1.5)).unwrap();
        let grid = TimeGrid::uniform(t, 4).unwrap();
        let ens = Ensemble::new(paths, 1000 + case);
        let samples: Vec<f64> = ens.map(|r| {
            let path = LevyPath::simulate(&chars, &grid, ens.replica_seed("lk", r)).unwrap();
            path.evaluate(&chars, t).unwrap().as_vector().dot(phi.as_vector())
        });
        let est = empirical_char(&samples, 1.0).unwrap();
        let exact = chars.char_functional(t, &phi).unwrap();
        let z = (est.estimate - exact).norm() / est.stderr;
        worst_z = worst_z.max(z);
        if z <= SIGMA {
            hits += 1;
        }
    }
    report(
        2,
        "Lévy–Khintchine match",
        hits >= 19,
        format!("{hits}/20 cases within {SIGMA}·SE at {paths} paths (worst {worst_z:.2} SE)"),
        start,
        60,
    );
}

#[test]
fn criterion_03_levy_ito_decomposition() {
    let start = Instant::now();
    let mut rng = rng(303);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let n = rng.random_range(1..=8);
        let chars = random_chars(&mut rng, n, true, true);
        let grid = TimeGrid::uniform(1.0, rng.random_range(2..30)).unwrap();
        let path = LevyPath::simulate(&chars, &grid, case).unwrap();
        for t in path.effective_times() {
            let total = path.evaluate(&chars, t).unwrap();
            let parts = path.ito_components(&chars, t).unwrap().total();
            let scale = 1.0_f64.max(total.as_vector().norm());
            worst = worst.max((total.as_vector() - parts.as_vector()).norm() / scale);
        }
    }
    let n = 2;
    let chars = LevyCharacteristics::new(
        DualVector::new(vec![0.5, 0.5]).unwrap(),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]),
        vec![
            JumpAtom::new(4.0, DualVector::new(vec![0.5, -0.4]).unwrap()),
            JumpAtom::new(2.0, DualVector::new(vec![0.2, 0.6]).unwrap()),
            JumpAtom::new(1.0, DualVector::new(vec![3.0, 0.0]).unwrap()),
        ],
        &unit_family(n),
        0,
    )
    .unwrap();
    let grid = TimeGrid::uniform(1.0, 10).unwrap();
    let phi = DVector::from_vec(vec![1.0, -0.7]);
    let ens = Ensemble::new(10_000, 33);
    let rows: Vec<(f64, f64)> = ens.map(|r| {
        let path = LevyPath::simulate(&chars, &grid, ens.replica_seed("ito", r)).unwrap();
        let c = path.ito_components(&chars, 0.7).unwrap();
        (c.wiener.as_vector().dot(&phi), c.compensated_small.as_vector().dot(&phi))
    });
    let w = mean_and_stderr(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
    let m = mean_and_stderr(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    let zw = w.mean.abs() / w.stderr;
    let zm = m.mean.abs() / m.stderr;
    report(
        3,
        "Lévy–Itô decomposition",
        worst <= DECOMPOSITION_TOL && zw <= SIGMA && zm <= SIGMA,
        format!(
            "sum identity {worst:.2e} ≤ {DECOMPOSITION_TOL:.0e}; Wiener mean {zw:.2} SE, compensated mean {zm:.2} SE ≤ {SIGMA}"
        ),
        start,
        30,
    );
}

#[test]
fn criterion_04_evolution_suite() {
    let start = Instant::now();
    let mut rng = rng(404);
    let rotation =
        || GeneratorFamily::from_fn(2, |t| DMatrix::from_row_slice(2, 2, &[-1.0, t, -0.5 * t, -0.3 - t * t]));
    let rates: Vec<ScalarFn> = vec![Arc::new(|t: f64| -1.0 + t.sin()), Arc::new(|t: f64| 0.5 * t - 2.0)];
    let systems = vec![
        EvolutionSystem::identity(2),
        EvolutionSystem::diagonal(DVector::from_vec(vec![-1.0, 0.7])).unwrap(),
        EvolutionSystem::diagonal_time_dependent(rates, 1e-13).unwrap(),
        EvolutionSystem::general_matrix(rotation(), 0.05).unwrap(),
        EvolutionSystem::perturbed(
            &EvolutionSystem::diagonal(DVector::from_vec(vec![-1.0, -0.2])).unwrap(),
            rotation(),
            0.05,
        )
        .unwrap(),
    ];
    let mut identity_ok = true;
    for sys in &systems {
        for &t in &[0.0, 0.37, 1.5] {
            let psi = TestFunction::new(random_vec(&mut rng, 2, 1.0)).unwrap();
            identity_ok &= sys.apply(t, t, &psi).unwrap() == psi;
        }
    }
    let mut cocycle: f64 = 0.0;
    for sys in &systems[..3] {
        for _ in 0..20 {
            let mut pts = [uniform(&mut rng, 0.0, 2.0), uniform(&mut rng, 0.0, 2.0), uniform(&mut rng, 0.0, 2.0)];
            pts.sort_by(f64::total_cmp);
            let psi = TestFunction::new(random_vec(&mut rng, 2, 1.0)).unwrap();
            let scale = psi.as_vector().norm() * sys.propagator(pts[0], pts[2]).unwrap().norm().max(1.0);
            cocycle = cocycle.max(sys.cocycle_residual(pts[0], pts[1], pts[2], &psi).unwrap() / scale);
        }
    }
    // Step counts on all three intervals exactly double when Δ halves.
    let (s, r, t) = (0.0, 1.0 / PI, 0.99);
    let psi = TestFunction::new(vec![1.0, -0.5]).unwrap();
    let coarse = EvolutionSystem::general_matrix(rotation(), 1.0 / 40.0).unwrap();
    let fine = EvolutionSystem::general_matrix(rotation(), 1.0 / 80.0).unwrap();
    let cocycle_ratio =
        coarse.cocycle_residual(s, r, t, &psi).unwrap() / fine.cocycle_residual(s, r, t, &psi).unwrap();
    let mut fwd = Vec::new();
    let mut bwd = Vec::new();
    for sys in &systems[1..3] {
        fwd.push(sys.forward_residual(0.0, 1.0, &psi, 4).unwrap() / sys.forward_residual(0.0, 1.0, &psi, 8).unwrap());
        bwd.push(
            sys.backward_residual(0.0, 1.0, &psi, 4).unwrap() / sys.backward_residual(0.0, 1.0, &psi, 8).unwrap(),
        );
    }
    let orders_ok = fwd.iter().chain(&bwd).all(|&x| within(x, SIMPSON_WINDOW));
    report(
        4,
        "evolution-system suite",
        identity_ok && cocycle <= EXACT_TOL && within(cocycle_ratio, COCYCLE_WINDOW) && orders_ok,
        format!(
            "U(t,t)=I exact: {identity_ok}; diagonal cocycle {cocycle:.2e} ≤ {EXACT_TOL:.0e}; stepping ratio {cocycle_ratio:.3} in {COCYCLE_WINDOW:?}; forward ratios {fwd:.2?}, backward ratios {bwd:.2?} in {SIMPSON_WINDOW:?}"
        ),
        start,
        10,
    );
}

#[test]
fn criterion_05_weak_solution_residual() {
    let start = Instant::now();
    let mut rng = rng(505);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let n = rng.random_range(1..=6);
        let mut chars = random_chars(&mut rng, n, false, false);
        if chars.atoms().is_empty() {
            chars = LevyCharacteristics::new(
                DualVector::zeros(n),
                DMatrix::zeros(n, n),
                vec![JumpAtom::new(2.0, DualVector::new(random_vec(&mut rng, n, 1.0)).unwrap())],
                &unit_family(n),
                0,
            )
            .unwrap();
        }
        let p = diagonal_problem(
            random_vec(&mut rng, n, 1.5),
            random_matrix(&mut rng, n, n, 1.0),
            random_vec(&mut rng, n, 1.0),
            chars,
            2.0,
            10,
            Quadrature::Exponential,
        );
        let rep = p.simulate(case).unwrap();
        let sol = mild_solution(&p, &rep).unwrap();
        let psi = TestFunction::new(random_vec(&mut rng, n, 1.0)).unwrap();
        let res = weak_solution_residuals(&p, &sol, &rep.path, &psi).unwrap();
        let scale = sol.values.iter().map(|v| v.norm()).fold(1.0, f64::max) * psi.as_vector().norm().max(1.0);
        worst = worst.max(res.iter().cloned().fold(0.0, f64::max) / scale);
    }

    let chars = LevyCharacteristics::new(
        DualVector::new(vec![0.3, -0.1]).unwrap(),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.6]),
        vec![JumpAtom::new(2.0, DualVector::new(vec![0.4, 0.3]).unwrap())],
        &unit_family(2),
        0,
    )
    .unwrap();
    let p = diagonal_problem(
        vec![-1.0, -0.4],
        DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
        vec![0.5, -0.5],
        chars,
        1.0,
        16,
        Quadrature::Exponential,
    );
    let psi = TestFunction::new(vec![1.0, 0.6]).unwrap();
    let replicas: Vec<Replica> = (0..16).map(|r| p.simulate(500 + r).unwrap()).collect();
    let mean_residual = |reps: &[Replica]| -> f64 {
        reps.iter()
            .map(|rep| {
                let sol = mild_solution(&p, rep).unwrap();
                *weak_solution_residuals(&p, &sol, &rep.path, &psi).unwrap().last().unwrap()
            })
            .sum::<f64>()
            / reps.len() as f64
    };
    let mut levels = vec![replicas];
    for _ in 0..3 {
        let next = levels.last().unwrap().iter().map(|r| r.refine(p.chars()).unwrap()).collect();
        levels.push(next);
    }
    let residuals: Vec<f64> = levels.iter().map(|l| mean_residual(l)).collect();
    let ratios: Vec<f64> = residuals.windows(2).map(|w| w[0] / w[1]).collect();
    report(
        5,
        "weak-solution residual",
        worst <= PURE_JUMP_TOL && ratios.iter().all(|&r| within(r, HALVING_WINDOW)),
        format!(
            "pure-jump scaled residual {worst:.2e} ≤ {PURE_JUMP_TOL:.0e}; Wiener halving ratios {ratios:.3?} in {HALVING_WINDOW:?}"
        ),
        start,
        60,
    );
}

#[test]
fn criterion_06_stochastic_fubini() {
    let start = Instant::now();
    // m(∫₀ᵗ e^{a(t−r)}dr − t) for the scalar pure-drift case.
    let (m, a, t) = (1.3, -0.8, 1.0);
    let oracle = m * ((a * t as f64).exp_m1() / a - t);
    let mut oracle_worst: f64 = 0.0;
    for quad in [Quadrature::Exponential, Quadrature::Simpson { panels: 8 }] {
        let chars =
            LevyCharacteristics::new(DualVector::new(vec![m]).unwrap(), DMatrix::zeros(1, 1), vec![], &unit_family(1), 0)
                .unwrap();
        let p = diagonal_problem(vec![a], DMatrix::identity(1, 1), vec![0.0], chars, 1.0, 10, quad);
        let f = fubini_residual(&p, &p.simulate(0).unwrap().path, &TestFunction::new(vec![1.0]).unwrap(), t).unwrap();
        oracle_worst = oracle_worst.max(f.r1).max(f.r2).max((f.line2 - oracle).abs());
    }

    let mut rng = rng(606);
    let mut jump_worst: f64 = 0.0;
    let mut ratios = Vec::new();
    for case in 0..10 {
        let n = rng.random_range(1..=4);
        let a = (0..n).map(|_| uniform(&mut rng, -2.0, 0.5)).collect::<Vec<_>>();
        let b = random_matrix(&mut rng, n, n, 1.0);
        let psi = TestFunction::new(random_vec(&mut rng, n, 1.0)).unwrap();

        let jumpy = random_chars(&mut rng, n, false, true);
        let p = diagonal_problem(a.clone(), b.clone(), vec![0.0; n], jumpy, 1.0, 8, Quadrature::Simpson { panels: 8 });
        let f = fubini_residual(&p, &p.simulate(case).unwrap().path, &psi, 1.0).unwrap();
        let scale = 1.0_f64.max(f.line2.abs());
        jump_worst = jump_worst.max(f.r1 / scale).max(f.r2 / scale);

        let wiener = random_chars(&mut rng, n, true, true);
        let p = diagonal_problem(a, b, vec![0.0; n], wiener, 1.0, 8, Quadrature::Exponential);
        let mut reps: Vec<Replica> = (0..8).map(|r| p.simulate(600 + 10 * case + r).unwrap()).collect();
        let mut level = Vec::new();
        for _ in 0..4 {
            let (mut r1, mut r2) = (0.0, 0.0);
            for rep in &reps {
                let f = fubini_residual(&p, &rep.path, &psi, 1.0).unwrap();
                r1 += f.r1;
                r2 += f.r2;
            }
            level.push((r1, r2));
            reps = reps.iter().map(|r| r.refine(p.chars()).unwrap()).collect();
        }
        for w in level.windows(2) {
            ratios.push(w[0].0 / w[1].0);
            ratios.push(w[0].1 / w[1].1);
        }
    }
    let ratio_min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio_max = ratios.iter().cloned().fold(0.0, f64::max);
    report(
        6,
        "stochastic Fubini identity",
        oracle_worst <= FUBINI_TOL
            && jump_worst <= FUBINI_TOL
            && ratios.iter().all(|&r| within(r, HALVING_WINDOW)),
        format!(
            "scalar oracle residual {oracle_worst:.2e} ≤ {FUBINI_TOL:.0e}; random drift+jump {jump_worst:.2e} ≤ {FUBINI_TOL:.0e}; Wiener refinement ratios in [{ratio_min:.3}, {ratio_max:.3}] ⊆ {HALVING_WINDOW:?}"
        ),
        start,
        30,
    );
}

#[test]
fn criterion_07_mild_vs_cadlag() {
    let start = Instant::now();
    let mut rng = rng(707);
    let mut gap_exact: f64 = 0.0;
    let mut gap_simpson: f64 = 0.0;
    let mut jump_err: f64 = 0.0;
    for case in 0..20 {
        let n = rng.random_range(1..=5);
        let chars = random_chars(&mut rng, n, false, true);
        let a = random_vec(&mut rng, n, 1.5);
        let b = random_matrix(&mut rng, n, n, 1.0);
        let eta = random_vec(&mut rng, n, 1.0);
        for quad in [Quadrature::Exponential, Quadrature::Simpson { panels: 8 }] {
            let p = diagonal_problem(a.clone(), b.clone(), eta.clone(), chars.clone(), 1.0, 10, quad);
            let rep = p.simulate(case).unwrap();
            let x = mild_solution(&p, &rep).unwrap();
            let z = ou_cadlag(&p, &rep).unwrap();
            let scale = x.values.iter().map(|v| v.norm()).fold(1.0, f64::max);
            let gap = z.max_gap(&x).unwrap() / scale;
            match quad {
                Quadrature::Exponential => gap_exact = gap_exact.max(gap),
                _ => gap_simpson = gap_simpson.max(gap),
            }
            for j in rep.path.jumps() {
                let k = z.index_of(j.time).unwrap();
                let dl = &b * p.chars().atoms()[j.atom].mark.as_vector();
                jump_err = jump_err.max((&z.values[k] - &z.left_limits[k] - &dl).norm() / dl.norm().max(1.0));
            }
        }
    }

    let chars = LevyCharacteristics::new(
        DualVector::new(vec![0.2, 0.0]).unwrap(),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5]),
        vec![JumpAtom::new(1.5, DualVector::new(vec![1.0, -1.0]).unwrap())],
        &unit_family(2),
        0,
    )
    .unwrap();
    let p = diagonal_problem(
        vec![-1.2, -0.3],
        DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 1.0]),
        vec![1.0, 0.0],
        chars,
        1.0,
        16,
        Quadrature::Exponential,
    );
    let mut reps: Vec<Replica> = (0..16).map(|r| p.simulate(700 + r).unwrap()).collect();
    let mut gaps = Vec::new();
    for _ in 0..4 {
        gaps.push(
            reps.iter()
                .map(|rep| ou_cadlag(&p, rep).unwrap().max_gap(&mild_solution(&p, rep).unwrap()).unwrap())
                .sum::<f64>(),
        );
        reps = reps.iter().map(|r| r.refine(p.chars()).unwrap()).collect();
    }
    let ratios: Vec<f64> = gaps.windows(2).map(|w| w[0] / w[1]).collect();
    report(
        7,
        "mild vs càdlàg representation",
        gap_exact <= EXACT_TOL
            && gap_simpson <= QUADRATURE_TOL
            && jump_err <= EXACT_TOL
            && ratios.iter().all(|&r| within(r, HALVING_WINDOW)),
        format!(
            "drift+jump gap {gap_exact:.2e} (exponential) ≤ {EXACT_TOL:.0e}, {gap_simpson:.2e} (Simpson) ≤ {QUADRATURE_TOL:.0e}; ΔZ − B′ΔL {jump_err:.2e} ≤ {EXACT_TOL:.0e}; Wiener grid-bias halving ratios {ratios:.3?} in {HALVING_WINDOW:?}"
        ),
        start,
        30,
    );
}

#[test]
fn criterion_08_flow_and_markov() {
    let start = Instant::now();
    let mut rng = rng(808);
    let mut worst: f64 = 0.0;
    for case in 0..30 {
        let n = rng.random_range(1..=6);
        let chars = random_chars(&mut rng, n, true, true);
        let p = diagonal_problem(
            random_vec(&mut rng, n, 1.5),
            random_matrix(&mut rng, n, n, 1.0),
            vec![0.0; n],
            chars,
            2.0,
            20,
            Quadrature::Exponential,
        );
        let path = p.simulate(case).unwrap().path;
        let mut pts = [uniform(&mut rng, 0.0, 2.0), uniform(&mut rng, 0.0, 2.0), uniform(&mut rng, 0.0, 2.0)];
        pts.sort_by(f64::total_cmp);
        let g = DualVector::new(random_vec(&mut rng, n, 1.0)).unwrap();
        let scale = 1.0_f64.max(levysee::ou_solver::flow_apply(&p, &path, pts[0], pts[2], &g).unwrap().as_vector().norm());
        worst = worst.max(flow_composition_residual(&p, &path, pts[0], pts[1], pts[2], &g).unwrap() / scale);
    }
    let chars = LevyCharacteristics::new(
        DualVector::new(vec![0.1, 0.0]).unwrap(),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]),
        vec![],
        &unit_family(2),
        0,
    )
    .unwrap();
    let p = diagonal_problem(
        vec![-1.0, -0.5],
        DMatrix::identity(2, 2),
        vec![0.5, 0.5],
        chars,
        1.0,
        50,
        Quadrature::Exponential,
    );
    let m = markov_diagnostic(&p, 0.4, 0.5, &TestFunction::new(vec![1.0, 1.0]).unwrap(), &Ensemble::new(10_000, 8))
        .unwrap();
    report(
        8,
        "flow and Markov",
        worst <= FLOW_TOL && m.gap <= SIGMA * m.se,
        format!(
            "composition residual {worst:.2e} ≤ {FLOW_TOL:.0e}; factorization gap {:.2e} ≤ {SIGMA}·{:.2e} at 10⁴ replicas",
            m.gap, m.se
        ),
        start,
        120,
    );
}

#[test]
fn criterion_09_gaussian_covariance_oracle() {
    let start = Instant::now();
    let a = vec![-1.0, -0.5, 0.3];
    let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.4, 1.0, 0.0, -0.2, 0.3, 0.8]);
    let q = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.5, 0.1, 0.0, 0.1, 0.7]);
    let chars = LevyCharacteristics::new(DualVector::zeros(3), q.clone(), vec![], &unit_family(3), 0).unwrap();
    let p = diagonal_problem(a.clone(), b.clone(), vec![0.0; 3], chars, 1.0, 1000, Quadrature::Exponential);
    let c = &b * &q * b.transpose();
    let oracle = |t: f64, psi: &[f64]| -> f64 {
        let mut v = 0.0;
        for k in 0..3 {
            for l in 0..3 {
                let s = a[k] + a[l];
                let integral = if s == 0.0 { t } else { (s * t).exp_m1() / s };
                v += psi[k] * psi[l] * c[(k, l)] * integral;
            }
        }
        v
    };
    let times = [0.25, 0.5, 1.0];
    let probes = [vec![1.0, 0.0, 0.0], vec![0.3, -1.0, 0.5], vec![0.0, 0.7, 1.0]];
    let ens = Ensemble::new(20_000, 9);
    let samples: Vec<Vec<f64>> = ens.map(|r| {
        let sol = mild_solution(&p, &p.replica(&ens, r).unwrap()).unwrap();
        let mut out = Vec::new();
        for &t in &times {
            let x = sol.value_at(t).unwrap();
            for psi in &probes {
                out.push(x.as_vector().dot(&DVector::from_column_slice(psi)));
            }
        }
        out
    });
    let mut hits = 0;
    let mut worst_z: f64 = 0.0;
    for (i, &t) in times.iter().enumerate() {
        for (j, psi) in probes.iter().enumerate() {
            let col: Vec<f64> = samples.iter().map(|s| s[i * probes.len() + j]).collect();
            let v = variance_and_stderr(&col);
            let z = (v.mean - oracle(t, psi)).abs() / v.stderr;
            worst_z = worst_z.max(z);
            if z <= SIGMA {
                hits += 1;
            }
        }
    }
    report(
        9,
        "Gaussian OU covariance oracle",
        hits == 9,
        format!("{hits}/9 (t, ψ) pairs within {SIGMA}·SE at 2·10⁴ replicas (worst {worst_z:.2} SE)"),
        start,
        60,
    );
}

#[test]
fn criterion_10_square_moment() {
    let start = Instant::now();
    let chars =
        LevyCharacteristics::new(DualVector::zeros(1), DMatrix::identity(1, 1), vec![], &unit_family(1), 0).unwrap();
    let p = diagonal_problem(vec![-1.0], DMatrix::identity(1, 1), vec![0.0], chars, 1.0, 1000, Quadrature::Exponential);
    // ∫₀¹ (1 − e^{−2s})/2 ds.
    let oracle = 0.5 - (1.0 - (-2.0_f64).exp()) / 4.0;
    let est = square_moment_report(&p, &Ensemble::new(10_000, 10), &unit_family(1), 0, 1.0).unwrap();
    let z = (est.mean - oracle).abs() / est.stderr;

    let mut rng = rng(1010);
    let mut monotone = true;
    for case in 0..10 {
        let n = rng.random_range(1..=5);
        let fam = SeminormFamily::hermite(n, 1.0, 3).unwrap();
        let chars = random_chars(&mut rng, n, true, true);
        let p = diagonal_problem(
            random_vec(&mut rng, n, 1.0),
            random_matrix(&mut rng, n, n, 1.0),
            random_vec(&mut rng, n, 1.0),
            chars,
            1.0,
            20,
            Quadrature::Simpson { panels: 2 },
        );
        let ens = Ensemble::new(50, 1000 + case);
        let vals: Vec<f64> = (0..=3).map(|l| square_moment_report(&p, &ens, &fam, l, 1.0).unwrap().mean).collect();
        monotone &= vals.windows(2).all(|w| w[1] <= w[0]);
    }
    report(
        10,
        "square-moment report",
        z <= SIGMA && monotone,
        format!(
            "scalar oracle {oracle:.6} vs {:.6} ± {:.1e} ({z:.2} SE ≤ {SIGMA}); level monotonicity exact: {monotone}",
            est.mean, est.stderr
        ),
        start,
        60,
    );
}

fn perturbed_problem(n: usize) -> levysee::Result<SeeProblem> {
    let eps = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let fam = SeminormFamily::hermite(2, 1.0, 2)?;
    let a = DVector::from_vec(vec![-1.0 + 0.5 * eps, -0.5 - 0.3 * eps]);
    let b = DMatrix::from_row_slice(2, 2, &[1.0 + 0.4 * eps, 0.0, 0.2 * eps, 1.0]);
    let chars = LevyCharacteristics::new(
        DualVector::new(vec![0.3 + 0.5 * eps, -0.2 * eps])?,
        DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]),
        vec![
            JumpAtom::new(2.0, DualVector::new(vec![0.5, -0.5])?),
            JumpAtom::new(0.5, DualVector::new(vec![3.0, 1.0])?),
        ],
        &fam,
        1,
    )?;
    SeeProblem::langevin(
        EvolutionSystem::diagonal(a)?,
        b,
        InitialCondition::point(DualVector::new(vec![1.0, -0.5])?),
        chars,
        TimeGrid::uniform(1.0, 20)?,
        Quadrature::Exponential,
    )
}

#[test]
fn criterion_11_convergence_scenario() {
    let start = Instant::now();
    let fam = SeminormFamily::hermite(2, 1.0, 2).unwrap();
    let scenario = SequenceScenario::new(
        perturbed_problem,
        fam.clone(),
        fam,
        vec![TestFunction::new(vec![1.0, 0.0]).unwrap(), TestFunction::new(vec![0.3, 1.0]).unwrap()],
        vec![0.5, 1.0],
        vec![1, 2, 4, 8, 16],
    )
    .unwrap();
    let st: Vec<(f64, f64)> =
        (0..=4).flat_map(|i| (i..=4).map(move |j| (i as f64 * 0.25, j as f64 * 0.25))).collect();
    let g = generator_convergence(&scenario, &st, &TestFunction::new(vec![1.0, 1.0]).unwrap(), 0).unwrap();
    let g_ratios: Vec<f64> = g.windows(2).map(|w| w[0] / w[1]).collect();
    let ens = Ensemble::new(2000, 11);
    let fdd: Vec<_> = scenario.indices().iter().map(|&n| fdd_distance(&scenario, n, &ens).unwrap()).collect();
    let fdd_ok = fdd.windows(2).all(|w| w[1].distance <= w[0].distance + SIGMA * w[0].se.hypot(w[1].se));
    let rows = characteristics_conditions(&scenario, 2).unwrap();
    let bounds = CharacteristicsBounds::from_rows(&rows);
    let finite = bounds.m_bound.is_finite() && bounds.hs_sup.is_finite() && bounds.nu_integral.is_finite();
    report(
        11,
        "convergence scenario",
        g_ratios.iter().all(|&r| within(r, HALVING_WINDOW)) && fdd_ok && bounds.dominated && finite,
        format!(
            "generator sup ratios {g_ratios:.3?} in {HALVING_WINDOW:?}; fdd {:?}; sup q′(𝔪_n) = {:.4}, sup HS = {:.4}, sup ∫(q′²∧1)dν_n = {:.4}, dominated: {}",
            fdd.iter().map(|r| format!("{:.4}±{:.4}", r.distance, r.se)).collect::<Vec<_>>(),
            bounds.m_bound,
            bounds.hs_sup,
            bounds.nu_integral,
            bounds.dominated
        ),
        start,
        300,
    );
}

#[test]
fn criterion_12_skorokhod_sanity() {
    let start = Instant::now();
    let mut rng = rng(1212);
    let fam = SeminormFamily::hermite(3, 1.0, 2).unwrap();
    let mut self_zero = true;
    let mut uniform_gap: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(2..12);
        let mut times: Vec<f64> = (0..k).map(|_| uniform(&mut rng, 0.01, 0.99)).collect();
        times.push(0.0);
        times.push(1.0);
        times.sort_by(f64::total_cmp);
        times.dedup();
        let x_vals: Vec<DVector<f64>> = times.iter().map(|_| DVector::from_vec(random_vec(&mut rng, 3, 1.0))).collect();
        let y_vals: Vec<DVector<f64>> = times.iter().map(|_| DVector::from_vec(random_vec(&mut rng, 3, 1.0))).collect();
        let x = PiecewisePath::continuous(times.clone(), x_vals.clone()).unwrap();
        let y = PiecewisePath::continuous(times.clone(), y_vals.clone()).unwrap();
        self_zero &= skorokhod_distance(&x, &x, &fam, 1).unwrap() == 0.0;
        let w = fam.weights(1).unwrap();
        let sup = x_vals
            .iter()
            .zip(&y_vals)
            .map(|(a, b)| (a - b).iter().zip(w.iter()).map(|(d, w)| d * d / w).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        uniform_gap = uniform_gap.max((skorokhod_distance(&x, &y, &fam, 1).unwrap() - sup).abs());
    }
    let f = DVector::from_vec(vec![1.0, -0.5, 0.25]);
    let zero = DVector::zeros(3);
    let step = |tau: f64| {
        PiecewisePath::new(
            vec![0.0, tau, 1.0],
            vec![zero.clone(), f.clone(), f.clone()],
            vec![zero.clone(), zero.clone(), f.clone()],
        )
        .unwrap()
    };
    let shifts = [0.1, 0.01, 0.001];
    let d: Vec<f64> = shifts.iter().map(|&s| skorokhod_distance(&step(0.4), &step(0.4 + s), &fam, 1).unwrap()).collect();
    let monotone = d.windows(2).all(|w| w[1] < w[0]);
    report(
        12,
        "Skorokhod distance sanity",
        self_zero && uniform_gap <= EXACT_TOL && monotone && d[2] < 0.01,
        format!(
            "d(x,x)=0 exact: {self_zero}; jump-free |bound − uniform| {uniform_gap:.2e} ≤ {EXACT_TOL:.0e}; shifted-jump bounds {d:.5?} decreasing"
        ),
        start,
        5,
    );
}
