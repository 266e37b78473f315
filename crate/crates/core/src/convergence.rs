//! Weak-convergence experiments for sequences of Ornstein–Uhlenbeck problems
//! `dY^n = A^n(t)′Y^n dt + (B^n)′dL^n`, `n = 1, 2, …`, against a limit
//! problem stored at index `0`.
//!
//! All ensembles use common random numbers: replica `r` of every index is
//! driven by the same seed, so distances vary smoothly in `n`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::Serialize;

use crate::ensemble::{bootstrap_stderr, Ensemble};
use crate::error::{check_dim, Error, Result};
use crate::levy::LevyCharacteristics;
use crate::ou_solver::{
    kernel_convolution, mild_solution, solution_value_at, ConvolutionMethod, Replica, SeeProblem, MIN_CHAR_ENSEMBLE,
};
use crate::path::PiecewisePath;
use crate::spectral_space::{SeminormFamily, TestFunction};

/// Builds problem `n`; index `0` is the limit.
pub type ProblemBuilder = Arc<dyn Fn(usize) -> Result<SeeProblem> + Send + Sync>;

/// A sequence of problems sharing dimensions and seminorm families.
#[derive(Clone)]
pub struct SequenceScenario {
    builder: ProblemBuilder,
    family: SeminormFamily,
    noise_family: SeminormFamily,
    probes: Vec<TestFunction>,
    times: Vec<f64>,
    indices: Vec<usize>,
}

impl std::fmt::Debug for SequenceScenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SequenceScenario")
            .field("indices", &self.indices)
            .field("probes", &self.probes)
            .field("times", &self.times)
            .finish_non_exhaustive()
    }
}

impl SequenceScenario {
    /// `family` measures states, `noise_family` measures the noise space of
    /// the characteristics. Every index in `indices` and the limit are built
    /// once to check dimensions.
    pub fn new<F>(
        builder: F,
        family: SeminormFamily,
        noise_family: SeminormFamily,
        probes: Vec<TestFunction>,
        times: Vec<f64>,
        indices: Vec<usize>,
    ) -> Result<Self>
    where
        F: Fn(usize) -> Result<SeeProblem> + Send + Sync + 'static,
    {
        if probes.is_empty() || times.is_empty() {
            return Err(Error::Contract("scenario needs at least one probe and one time".into()));
        }
        if indices.iter().any(|&n| n == 0) {
            return Err(Error::Contract("index 0 is reserved for the limit problem".into()));
        }
        let scenario = Self { builder: Arc::new(builder), family, noise_family, probes, times, indices };
        let limit = scenario.problem(0)?;
        check_dim(limit.dim(), scenario.family.dim())?;
        check_dim(limit.chars().dim(), scenario.noise_family.dim())?;
        for p in &scenario.probes {
            check_dim(limit.dim(), p.dim())?;
        }
        for &t in &scenario.times {
            if !(0.0..=limit.horizon()).contains(&t) {
                return Err(Error::TimeOutOfRange { t, horizon: limit.horizon() });
            }
        }
        for &n in &scenario.indices {
            let p = scenario.problem(n)?;
            check_dim(limit.dim(), p.dim())?;
            check_dim(limit.chars().dim(), p.chars().dim())?;
            if p.horizon() != limit.horizon() {
                return Err(Error::Contract(format!("problem {n} has a different horizon")));
            }
        }
        Ok(scenario)
    }

    pub fn problem(&self, n: usize) -> Result<SeeProblem> {
        (self.builder)(n)
    }

    pub fn limit(&self) -> Result<SeeProblem> {
        self.problem(0)
    }

    pub fn family(&self) -> &SeminormFamily {
        &self.family
    }

    pub fn noise_family(&self) -> &SeminormFamily {
        &self.noise_family
    }

    pub fn probes(&self) -> &[TestFunction] {
        &self.probes
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// `sup_{(s,t)} p_level(A^n(s)U^n(s,t)ψ − A^0(s)U^0(s,t)ψ)` for each index.
pub fn generator_convergence(
    scenario: &SequenceScenario,
    st_grid: &[(f64, f64)],
    psi: &TestFunction,
    level: usize,
) -> Result<Vec<f64>> {
    let term = |p: &SeeProblem, s: f64, t: f64| -> Result<DVector<f64>> {
        Ok(p.system().generator().apply(s, p.system().apply(s, t, psi)?.as_vector()))
    };
    sup_gap(scenario, st_grid, level, term)
}

/// `sup_{(s,t)} p_level(U^n(s,t)ψ − U^0(s,t)ψ)` for each index.
pub fn propagator_convergence(
    scenario: &SequenceScenario,
    st_grid: &[(f64, f64)],
    psi: &TestFunction,
    level: usize,
) -> Result<Vec<f64>> {
    let term = |p: &SeeProblem, s: f64, t: f64| -> Result<DVector<f64>> {
        Ok(p.system().apply(s, t, psi)?.into_vector())
    };
    sup_gap(scenario, st_grid, level, term)
}

fn sup_gap<F>(scenario: &SequenceScenario, st_grid: &[(f64, f64)], level: usize, term: F) -> Result<Vec<f64>>
where
    F: Fn(&SeeProblem, f64, f64) -> Result<DVector<f64>>,
{
    let limit = scenario.limit()?;
    let base: Vec<DVector<f64>> = st_grid.iter().map(|&(s, t)| term(&limit, s, t)).collect::<Result<_>>()?;
    scenario
        .indices
        .iter()
        .map(|&n| {
            let p = scenario.problem(n)?;
            let mut sup: f64 = 0.0;
            for (&(s, t), b) in st_grid.iter().zip(&base) {
                sup = sup.max(scenario.family.seminorm_of(level, &(term(&p, s, t)? - b))?);
            }
            Ok(sup)
        })
        .collect()
}

/// Observables `⟨X_t, ψ⟩` for every `(t, ψ)` in times × probes, time-major.
fn observables(scenario: &SequenceScenario, problem: &SeeProblem, replica: &Replica) -> Result<Vec<f64>> {
    let sol = mild_solution(problem, replica)?;
    let mut out = Vec::with_capacity(scenario.times.len() * scenario.probes.len());
    for &t in &scenario.times {
        let x = solution_value_at(problem, &sol, t)?;
        for psi in &scenario.probes {
            out.push(x.as_vector().dot(psi.as_vector()));
        }
    }
    Ok(out)
}

/// Frequency vectors `c·e_i` and `c·(1,…,1)` for `c ∈ {±1/2, ±1, ±2}`.
pub fn frequency_grid(m: usize) -> Vec<Vec<f64>> {
    let mut grid = Vec::with_capacity(6 * (m + 1));
    for c in [0.5, 1.0, 2.0, -0.5, -1.0, -2.0] {
        for i in 0..m {
            let mut u = vec![0.0; m];
            u[i] = c;
            grid.push(u);
        }
        grid.push(vec![c; m]);
    }
    grid
}

/// A distance with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FddRow {
    pub n: usize,
    pub distance: f64,
    pub se: f64,
}

const BOOTSTRAP_RESAMPLES: usize = 200;

/// `max_u |φ̂^n(u) − φ̂^0(u)|` over [`frequency_grid`], where `φ̂` is the
/// empirical joint characteristic function of the observables. The standard
/// error is the bootstrap spread of the maximum under paired resampling.
pub fn fdd_distance(scenario: &SequenceScenario, n: usize, ensemble: &Ensemble) -> Result<FddRow> {
    if ensemble.replicas < MIN_CHAR_ENSEMBLE {
        return Err(Error::Contract(format!(
            "f.d.d. distance needs ≥ {MIN_CHAR_ENSEMBLE} replicas, got {}",
            ensemble.replicas
        )));
    }
    let limit = scenario.limit()?;
    let problem = scenario.problem(n)?;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = ensemble
        .map(|r| {
            let seed = ensemble.replica_seed("replica", r);
            let a = observables(scenario, &problem, &problem.simulate(seed)?)?;
            let b = observables(scenario, &limit, &limit.simulate(seed)?)?;
            Ok((a, b))
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let freqs = frequency_grid(scenario.times.len() * scenario.probes.len());
    let phases: Vec<Vec<(Complex64, Complex64)>> = pairs
        .iter()
        .map(|(a, b)| {
            freqs
                .iter()
                .map(|u| {
                    let dot = |x: &[f64]| u.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
                    (Complex64::new(0.0, dot(a)).exp(), Complex64::new(0.0, dot(b)).exp())
                })
                .collect()
        })
        .collect();
    let stat = |idx: &mut dyn Iterator<Item = usize>| -> f64 {
        let mut acc = vec![Complex64::new(0.0, 0.0); freqs.len()];
        let mut count = 0.0;
        for r in idx {
            for (a, (x, y)) in acc.iter_mut().zip(&phases[r]) {
                *a += x - y;
            }
            count += 1.0;
        }
        acc.iter().map(|z| z.norm() / count).fold(0.0, f64::max)
    };
    let distance = stat(&mut (0..phases.len()));
    let se = bootstrap_stderr(phases.len(), BOOTSTRAP_RESAMPLES, ensemble.seed, |idx| {
        vec![stat(&mut idx.iter().copied())]
    })[0];
    Ok(FddRow { n, distance, se })
}

/// Condition values for one index at the dominating level `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CharacteristicsRow {
    pub n: usize,
    /// `q′(𝔪_n)`.
    pub m_bound: f64,
    /// `sqrt(trace(W_q⁻¹ Q_n))`.
    pub hs_sup: f64,
    /// `Σ λ_i min(q′(f_i)², 1)`.
    pub nu_integral: f64,
    /// `W_q − Q_n ⪰ 0`.
    pub covariance_dominated: bool,
    /// `ρ_n ≤ q`.
    pub rho_dominated: bool,
}

impl CharacteristicsRow {
    pub fn dominated(&self) -> bool {
        self.covariance_dominated && self.rho_dominated
    }
}

/// Condition values for a single set of characteristics.
pub fn characteristics_row(
    n: usize,
    chars: &LevyCharacteristics,
    family: &SeminormFamily,
    q: usize,
) -> Result<CharacteristicsRow> {
    check_dim(chars.dim(), family.dim())?;
    let w = family.weights(q)?;
    let cov = chars.covariance();
    let hs_sup = (0..w.len()).map(|k| cov[(k, k)] / w[k]).sum::<f64>().max(0.0).sqrt();
    let gap = DMatrix::from_diagonal(w) - cov;
    let scale = w.amax().max(cov.amax()).max(1.0);
    let min_eig = SymmetricEigen::new(gap).eigenvalues.min();
    let rho_w = family.weights(chars.rho_level())?;
    let mut nu_integral = 0.0;
    for a in chars.atoms() {
        nu_integral += a.rate * family.dual_seminorm(q, &a.mark)?.powi(2).min(1.0);
    }
    Ok(CharacteristicsRow {
        n,
        m_bound: family.dual_seminorm(q, chars.drift())?,
        hs_sup,
        nu_integral,
        covariance_dominated: min_eig >= -1e-12 * scale,
        rho_dominated: rho_w.iter().zip(w.iter()).all(|(r, q)| r <= q),
    })
}

/// Condition values for every index of the scenario.
pub fn characteristics_conditions(scenario: &SequenceScenario, q: usize) -> Result<Vec<CharacteristicsRow>> {
    scenario
        .indices
        .iter()
        .map(|&n| characteristics_row(n, scenario.problem(n)?.chars(), &scenario.noise_family, q))
        .collect()
}

/// `F(x)(t) = x_t + ∫₀ᵗ U(t,s)′A(s)′x_s ds` with the evolution system and
/// quadrature of `problem`. The convolution term is continuous, so jumps of
/// `F(x)` are the jumps of `x`.
pub fn f_map(problem: &SeeProblem, x: &PiecewisePath) -> Result<PiecewisePath> {
    let conv = kernel_convolution(problem.system(), x, problem.quadrature(), ConvolutionMethod::Direct)?;
    let values = x.values().iter().zip(&conv).map(|(v, c)| v + c).collect();
    let left = x.left_limits().iter().zip(&conv).map(|(v, c)| v + c).collect();
    PiecewisePath::new(x.times().to_vec(), values, left)
}

/// Default matching window as a fraction of the horizon.
pub const DEFAULT_WINDOW_FRACTION: f64 = 0.25;

/// Upper bound on
/// `d_γ(x,y) = inf_λ { sup_t q′_γ(x(t) − y(λ(t))) + sup_{s<t} |log((λ(t)−λ(s))/(t−s))| }`
/// over piecewise-linear time changes with knots at matched jump times.
///
/// Candidates: the identity; greedy nearest monotone matching of the jumps
/// of `x` to those of `y` within `window`, and the inverse of the same
/// matching built from `y`; every single matched pair within `window`. The
/// candidate set is closed under inversion, so the bound is symmetric.
pub fn skorokhod_distance(x: &PiecewisePath, y: &PiecewisePath, family: &SeminormFamily, level: usize) -> Result<f64> {
    let window = DEFAULT_WINDOW_FRACTION * (x.horizon() - x.start());
    skorokhod_distance_with(x, y, family, level, window)
}

pub fn skorokhod_distance_with(
    x: &PiecewisePath,
    y: &PiecewisePath,
    family: &SeminormFamily,
    level: usize,
    window: f64,
) -> Result<f64> {
    check_dim(x.dim(), y.dim())?;
    check_dim(x.dim(), family.dim())?;
    family.weights(level)?;
    if x.start() != 0.0 || y.start() != 0.0 || x.horizon() != y.horizon() {
        return Err(Error::Contract(format!(
            "paths must live on the same [0, T]; got [{}, {}] and [{}, {}]",
            x.start(),
            x.horizon(),
            y.start(),
            y.horizon()
        )));
    }
    let horizon = x.horizon();
    let interior = |p: &PiecewisePath| -> Vec<f64> {
        p.jump_nodes().into_iter().map(|k| p.times()[k]).filter(|&t| t < horizon).collect()
    };
    let (jx, jy) = (interior(x), interior(y));

    let mut candidates: Vec<Vec<(f64, f64)>> = vec![vec![]];
    let swap = |m: Vec<(f64, f64)>| m.into_iter().map(|(a, b)| (b, a)).collect::<Vec<_>>();
    candidates.push(greedy_matching(&jx, &jy, window));
    candidates.push(swap(greedy_matching(&jy, &jx, window)));
    for &a in &jx {
        for &b in &jy {
            if (a - b).abs() <= window && a != b {
                candidates.push(vec![(a, b)]);
            }
        }
    }
    let mut best = f64::INFINITY;
    for pairs in candidates {
        let mut knots = vec![(0.0, 0.0)];
        knots.extend(pairs.into_iter().filter(|&(a, b)| a != b || a > 0.0));
        knots.push((horizon, horizon));
        knots.dedup();
        best = best.min(candidate_cost(x, y, &knots, family, level)?);
    }
    Ok(best)
}

/// Nearest unmatched jump of `to` for each jump of `from`, in order, keeping
/// the matching strictly increasing.
fn greedy_matching(from: &[f64], to: &[f64], window: f64) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut floor = 0usize;
    for &a in from {
        let best = (floor..to.len())
            .filter(|&j| (to[j] - a).abs() <= window)
            .min_by(|&i, &j| (to[i] - a).abs().total_cmp(&(to[j] - a).abs()));
        if let Some(j) = best {
            out.push((a, to[j]));
            floor = j + 1;
        }
    }
    out
}

/// Cost of the piecewise-linear time change through `knots` (x-time, y-time).
/// Between consecutive breakpoints both paths are affine in `t`, so the
/// supremum of the convex seminorm is attained at breakpoint values or left
/// limits.
fn candidate_cost(
    x: &PiecewisePath,
    y: &PiecewisePath,
    knots: &[(f64, f64)],
    family: &SeminormFamily,
    level: usize,
) -> Result<f64> {
    let mut slope: f64 = 0.0;
    let mut sup: f64 = 0.0;
    let mut measure = |tx: f64, sy: f64| -> Result<()> {
        let right = x.eval(tx)? - y.eval(sy)?;
        let left = x.eval_left(tx)? - y.eval_left(sy)?;
        sup = sup.max(family.dual_seminorm_of(level, &right)?).max(family.dual_seminorm_of(level, &left)?);
        Ok(())
    };
    for w in knots.windows(2) {
        let ((a0, b0), (a1, b1)) = (w[0], w[1]);
        if !(a1 > a0 && b1 > b0) {
            return Ok(f64::INFINITY);
        }
        let ratio = (b1 - b0) / (a1 - a0);
        slope = slope.max(ratio.ln().abs());
        measure(a0, b0)?;
        for &t in x.times().iter().filter(|&&t| t > a0 && t < a1) {
            measure(t, (b0 + (t - a0) * ratio).clamp(b0, b1))?;
        }
        for &s in y.times().iter().filter(|&&s| s > b0 && s < b1) {
            measure((a0 + (s - b0) / ratio).clamp(a0, a1), s)?;
        }
    }
    let &(a, b) = knots.last().unwrap();
    measure(a, b)?;
    Ok(sup + slope)
}

/// Skorokhod bound between the mild solutions of index `n` and the limit
/// for one replica.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SkorokhodRow {
    pub n: usize,
    pub replica: usize,
    pub distance: f64,
}

/// Sup over indices of each condition value, and whether every index is
/// dominated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CharacteristicsBounds {
    pub m_bound: f64,
    pub hs_sup: f64,
    pub nu_integral: f64,
    pub dominated: bool,
}

impl CharacteristicsBounds {
    pub fn from_rows(rows: &[CharacteristicsRow]) -> Self {
        Self {
            m_bound: rows.iter().map(|r| r.m_bound).fold(0.0, f64::max),
            hs_sup: rows.iter().map(|r| r.hs_sup).fold(0.0, f64::max),
            nu_integral: rows.iter().map(|r| r.nu_integral).fold(0.0, f64::max),
            dominated: rows.iter().all(CharacteristicsRow::dominated),
        }
    }
}

/// Knobs for [`convergence_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    /// `(s, t)` pairs for the generator and propagator sup-norms.
    pub st_grid: Vec<(f64, f64)>,
    /// Seminorm level for sup-norms and the Skorokhod bound.
    pub level: usize,
    /// Dominating level `q` for the characteristics conditions.
    pub q: usize,
    /// Replicas used for Skorokhod samples.
    pub skorokhod_replicas: usize,
}

/// Every diagnostic of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub indices: Vec<usize>,
    /// One row per probe, one entry per index.
    pub generator_sup: Vec<Vec<f64>>,
    pub propagator_sup: Vec<Vec<f64>>,
    pub fdd: Vec<FddRow>,
    pub characteristics: Vec<CharacteristicsRow>,
    pub characteristics_bounds: CharacteristicsBounds,
    pub skorokhod: Vec<SkorokhodRow>,
}

pub fn convergence_report(
    scenario: &SequenceScenario,
    ensemble: &Ensemble,
    options: &ReportOptions,
) -> Result<ConvergenceReport> {
    let mut generator_sup = Vec::new();
    let mut propagator_sup = Vec::new();
    for psi in &scenario.probes {
        generator_sup.push(generator_convergence(scenario, &options.st_grid, psi, options.level)?);
        propagator_sup.push(propagator_convergence(scenario, &options.st_grid, psi, options.level)?);
    }
    let fdd = scenario.indices.iter().map(|&n| fdd_distance(scenario, n, ensemble)).collect::<Result<_>>()?;
    let characteristics = characteristics_conditions(scenario, options.q)?;
    let limit = scenario.limit()?;
    let mut skorokhod = Vec::new();
    for &n in &scenario.indices {
        let problem = scenario.problem(n)?;
        for r in 0..options.skorokhod_replicas.min(ensemble.replicas) {
            let seed = ensemble.replica_seed("replica", r);
            let a = mild_solution(&problem, &problem.simulate(seed)?)?.to_piecewise()?;
            let b = mild_solution(&limit, &limit.simulate(seed)?)?.to_piecewise()?;
            skorokhod.push(SkorokhodRow { n, replica: r, distance: skorokhod_distance(&a, &b, &scenario.family, options.level)? });
        }
    }
    Ok(ConvergenceReport {
        indices: scenario.indices.clone(),
        generator_sup,
        propagator_sup,
        fdd,
        characteristics_bounds: CharacteristicsBounds::from_rows(&characteristics),
        characteristics,
        skorokhod,
    })
}
