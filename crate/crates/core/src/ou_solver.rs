//! Mild and càdlàg solutions of `dY_t = A(t)′Y_t dt + ∫ R(t,f) L(dt,df)`.
//!
//! The stochastic convolution `∫₀ᵗ∫ U(t,s)′R(s,f) L(ds,df)` is assembled from
//! a noise schedule on the path's effective grid:
//!
//! * a drift density `g(s) = R(s,0)m − Σ_small λ_i R(s,f_i)f_i`;
//! * one Wiener impulse per grid cell `[g_j, g_{j+1}]`, arriving at `g_{j+1}`
//!   with value `R(g_j,0)ΔW_j` propagated from `g_j` (left-endpoint Itô);
//! * one jump impulse `R(τ,f)f` at every jump time `τ`.
//!
//! The impulse arriving at node `t_k` with origin `o` contributes
//! `U(o,t)ᵀv` at every later time `t ≥ t_k`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::ensemble::{bootstrap_stderr, mean_and_stderr, Ensemble, MeanEstimate};
use crate::error::{check_dim, Error, Result};
use crate::evolution::EvolutionSystem;
use crate::levy::{symmetric_psd_sqrt, LevyCharacteristics, LevyPath, TimeGrid};
use crate::path::PiecewisePath;
use crate::quadrature::{phi1, phi2, simpson, simpson_vec, Quadrature};
use crate::seeding::{substream_rng, substream_seed};
use crate::spectral_space::{DualVector, SeminormFamily, TestFunction};
use crate::stochint::{levy_integral, weak_levy_integral, IntegrandR};

/// Law of the initial condition `η`, independent of `L`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    PointMass(DualVector),
    Gaussian { mean: DualVector, covariance: DMatrix<f64>, sqrt: DMatrix<f64> },
}

impl InitialCondition {
    pub fn point(eta: DualVector) -> Self {
        InitialCondition::PointMass(eta)
    }

    pub fn gaussian(mean: DualVector, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.dim() || covariance.ncols() != mean.dim() {
            return Err(Error::DimensionMismatch { expected: mean.dim(), found: covariance.nrows() });
        }
        let sqrt = symmetric_psd_sqrt(&covariance)?;
        Ok(InitialCondition::Gaussian { mean, covariance, sqrt })
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialCondition::PointMass(f) => f.dim(),
            InitialCondition::Gaussian { mean, .. } => mean.dim(),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, InitialCondition::PointMass(_))
    }

    /// A draw from the `"eta"` substream of `seed`.
    pub fn sample(&self, seed: u64) -> DVector<f64> {
        match self {
            InitialCondition::PointMass(f) => f.as_vector().clone(),
            InitialCondition::Gaussian { mean, sqrt, .. } => {
                let mut rng = substream_rng(seed, "eta", 0);
                let z = DVector::from_fn(mean.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
                mean.as_vector() + sqrt * z
            }
        }
    }
}

/// One realization of the randomness: `η` and the Lévy path.
#[derive(Debug, Clone, PartialEq)]
pub struct Replica {
    pub eta: DVector<f64>,
    pub path: LevyPath,
}

impl Replica {
    /// The same realization on the midpoint-refined grid.
    pub fn refine(&self, chars: &LevyCharacteristics) -> Result<Self> {
        Ok(Self { eta: self.eta.clone(), path: self.path.refine(chars)? })
    }
}

/// How the convolution is accumulated along the nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvolutionMethod {
    /// Recursion for closed-form systems, direct sums otherwise.
    #[default]
    Auto,
    /// `X_{k+1} = U(t_k,t_{k+1})ᵀX_k + increment`.
    Recursion,
    /// Every node summed from scratch with kernels `U(s,t_k)ᵀ`.
    Direct,
}

/// A stochastic evolution equation with its data.
#[derive(Debug, Clone)]
pub struct SeeProblem {
    system: EvolutionSystem,
    integrand: IntegrandR,
    initial: InitialCondition,
    chars: LevyCharacteristics,
    grid: TimeGrid,
    quadrature: Quadrature,
}

impl SeeProblem {
    pub fn new(
        system: EvolutionSystem,
        integrand: IntegrandR,
        initial: InitialCondition,
        chars: LevyCharacteristics,
        grid: TimeGrid,
        quadrature: Quadrature,
    ) -> Result<Self> {
        check_dim(system.dim(), integrand.rows())?;
        check_dim(system.dim(), initial.dim())?;
        check_dim(chars.dim(), integrand.cols())?;
        system.generator().validate(grid.horizon(), 16)?;
        Ok(Self { system, integrand, initial, chars, grid, quadrature })
    }

    /// Langevin problem with constant integrand `B′`.
    pub fn langevin(
        system: EvolutionSystem,
        b_dual: DMatrix<f64>,
        initial: InitialCondition,
        chars: LevyCharacteristics,
        grid: TimeGrid,
        quadrature: Quadrature,
    ) -> Result<Self> {
        Self::new(system, IntegrandR::constant(b_dual), initial, chars, grid, quadrature)
    }

    pub fn system(&self) -> &EvolutionSystem {
        &self.system
    }

    pub fn integrand(&self) -> &IntegrandR {
        &self.integrand
    }

    pub fn initial(&self) -> &InitialCondition {
        &self.initial
    }

    pub fn chars(&self) -> &LevyCharacteristics {
        &self.chars
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn quadrature(&self) -> Quadrature {
        self.quadrature
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    pub fn is_langevin(&self) -> bool {
        self.integrand.as_constant().is_some()
    }

    pub fn with_grid(&self, grid: TimeGrid) -> Self {
        Self { grid, ..self.clone() }
    }

    pub fn with_quadrature(&self, quadrature: Quadrature) -> Self {
        Self { quadrature, ..self.clone() }
    }

    pub fn with_initial(&self, initial: InitialCondition) -> Result<Self> {
        check_dim(self.dim(), initial.dim())?;
        Ok(Self { initial, ..self.clone() })
    }

    /// `η` from substream `"eta"` and `L` from substream `"levy"` of `seed`.
    pub fn simulate(&self, seed: u64) -> Result<Replica> {
        let path = LevyPath::simulate(&self.chars, &self.grid, substream_seed(seed, "levy", 0))?;
        Ok(Replica { eta: self.initial.sample(seed), path })
    }

    /// Replica `r` of an ensemble.
    pub fn replica(&self, ensemble: &Ensemble, r: usize) -> Result<Replica> {
        self.simulate(ensemble.replica_seed("replica", r))
    }

    fn check_replica(&self, replica: &Replica) -> Result<()> {
        check_dim(self.dim(), replica.eta.len())?;
        check_dim(self.chars.dim(), replica.path.dim())
    }

    /// Diagonal rates when the closed-form exponential rule applies.
    fn exponential_rates(&self) -> Option<DVector<f64>> {
        if self.quadrature != Quadrature::Exponential {
            return None;
        }
        self.system.homogeneous_rates()
    }

    fn constant_density(&self) -> Option<DVector<f64>> {
        self.integrand
            .as_constant()
            .map(|b| b * (self.chars.drift().as_vector() - self.chars.compensator()))
    }

    /// `g(s) = R(s,0)m − Σ_small λ_i R(s,f_i)f_i`.
    pub fn drift_density(&self, s: f64) -> DVector<f64> {
        if let Some(c) = self.constant_density() {
            return c;
        }
        let mut g = self.integrand.at_zero(s) * self.chars.drift().as_vector();
        for (i, a) in self.chars.atoms().iter().enumerate() {
            if self.chars.is_small(i) {
                let f = a.mark.as_vector();
                g.axpy(-a.rate, &(self.integrand.at(s, f) * f), 1.0);
            }
        }
        g
    }

    fn dual(&self, t: f64, s: f64, f: &DVector<f64>) -> DVector<f64> {
        self.system.apply_dual_vec(t, s, f).expect("kernel times are ordered")
    }

    /// `∫_a^b U(s,target)ᵀ g(s) ds` for `a ≤ b ≤ target`.
    fn drift_cell(&self, a: f64, b: f64, target: f64) -> DVector<f64> {
        let h = b - a;
        if let (Some(r), Some(c)) = (self.exponential_rates(), self.constant_density()) {
            return DVector::from_fn(c.len(), |j, _| {
                (r[j] * (target - b)).exp() * h * phi1(r[j] * h) * c[j]
            });
        }
        simpson_vec(
            |s| self.dual(target, s, &self.drift_density(s)),
            a,
            b,
            self.quadrature.panels(),
            self.dim(),
        )
    }

    /// `Y_s` for `s` inside a cell, propagated from `Y_a`.
    fn propagate(&self, a: f64, ya: &DVector<f64>, s: f64) -> DVector<f64> {
        if s == a {
            return ya.clone();
        }
        self.dual(s, a, ya) + self.drift_cell(a, s, s)
    }

    fn impulses(&self, path: &LevyPath) -> Vec<Impulse> {
        let grid = path.grid().times();
        let mut out = Vec::with_capacity(grid.len() + path.jumps().len());
        if self.chars.has_wiener() {
            for (j, dw) in path.wiener_increments().iter().enumerate() {
                out.push(Impulse {
                    time: grid[j + 1],
                    origin: grid[j],
                    value: self.integrand.at_zero(grid[j]) * dw,
                });
            }
        }
        for jump in path.jumps() {
            let f = self.chars.atoms()[jump.atom].mark.as_vector();
            out.push(Impulse { time: jump.time, origin: jump.time, value: self.integrand.at(jump.time, f) * f });
        }
        out.sort_by(|a, b| a.time.total_cmp(&b.time));
        out
    }

    fn resolve(&self, method: ConvolutionMethod) -> ConvolutionMethod {
        match method {
            ConvolutionMethod::Auto if self.system.is_exact() => ConvolutionMethod::Recursion,
            ConvolutionMethod::Auto => ConvolutionMethod::Direct,
            m => m,
        }
    }
}

#[derive(Debug, Clone)]
struct Impulse {
    time: f64,
    origin: f64,
    value: DVector<f64>,
}

/// Accumulates `∫_{t_0}^{t_k} U(s,t_k)ᵀ y(s) ds + Σ U(o,t_k)ᵀv` on `times`,
/// where `cell(k, a, b, target)` integrates `U(s,target)ᵀ y(s)` over
/// `[a, b] ⊆ [t_k, t_{k+1}]`. Returns the node values and the part of each
/// value contributed by impulses arriving exactly at that node.
fn sweep<C>(
    system: &EvolutionSystem,
    times: &[f64],
    cell: C,
    impulses: &[Impulse],
    method: ConvolutionMethod,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)>
where
    C: Fn(usize, f64, f64, f64) -> DVector<f64>,
{
    let dim = system.dim();
    let start = times[0];
    let active: Vec<&Impulse> = impulses.iter().filter(|i| i.time > start && i.time <= times[times.len() - 1]).collect();
    let mut arrivals: Vec<Vec<&Impulse>> = vec![Vec::new(); times.len()];
    for imp in active {
        let k = times.partition_point(|&t| t < imp.time);
        if k >= times.len() || times[k] != imp.time {
            return Err(Error::Contract(format!("impulse at t = {} is not an output node", imp.time)));
        }
        arrivals[k].push(imp);
    }
    let arrive = |k: usize, target: f64| -> Result<DVector<f64>> {
        let mut acc = DVector::zeros(dim);
        for imp in &arrivals[k] {
            acc += system.apply_dual_vec(target, imp.origin, &imp.value)?;
        }
        Ok(acc)
    };
    let mut values = Vec::with_capacity(times.len());
    let mut jumps = Vec::with_capacity(times.len());
    values.push(DVector::zeros(dim));
    jumps.push(DVector::zeros(dim));
    match method {
        ConvolutionMethod::Direct => {
            for (k, &t) in times.iter().enumerate().skip(1) {
                let mut acc = DVector::zeros(dim);
                for i in 0..k {
                    acc += cell(i, times[i], times[i + 1], t);
                    acc += arrive(i + 1, t)?;
                }
                jumps.push(arrive(k, t)?);
                values.push(acc);
            }
        }
        _ => {
            for k in 1..times.len() {
                let (a, b) = (times[k - 1], times[k]);
                let jump = arrive(k, b)?;
                let x = system.apply_dual_vec(b, a, &values[k - 1])? + cell(k - 1, a, b, b) + &jump;
                values.push(x);
                jumps.push(jump);
            }
        }
    }
    Ok((values, jumps))
}

/// Which representation produced a [`SolutionPath`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Mild,
    Cadlag,
}

/// Solution values and left limits on the effective grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionPath {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    pub left_limits: Vec<DVector<f64>>,
    pub provenance: Provenance,
}

impl SolutionPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Index of the node at exactly `t`.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let k = self.times.partition_point(|&s| s < t);
        if k < self.times.len() && self.times[k] == t {
            Ok(k)
        } else {
            Err(Error::Contract(format!("t = {t} is not an output node")))
        }
    }

    pub fn value_at(&self, t: f64) -> Result<DualVector> {
        Ok(DualVector::wrap(self.values[self.index_of(t)?].clone()))
    }

    /// Node values and left limits joined linearly between nodes.
    pub fn to_piecewise(&self) -> Result<PiecewisePath> {
        PiecewisePath::new(self.times.clone(), self.values.clone(), self.left_limits.clone())
    }

    /// `max_k ‖self_k − other_k‖` over common nodes.
    pub fn max_gap(&self, other: &SolutionPath) -> Result<f64> {
        if self.times != other.times {
            return Err(Error::Contract("solution paths must share their nodes".into()));
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
    }
}

fn initial_flow(problem: &SeeProblem, eta: &DVector<f64>, times: &[f64]) -> Result<Vec<DVector<f64>>> {
    times.iter().map(|&t| problem.system.apply_dual_vec(t, times[0], eta)).collect()
}

/// The convolution with `η = 0`, on the effective grid.
pub fn stochastic_convolution(problem: &SeeProblem, path: &LevyPath) -> Result<SolutionPath> {
    stochastic_convolution_with(problem, path, ConvolutionMethod::Auto)
}

pub fn stochastic_convolution_with(
    problem: &SeeProblem,
    path: &LevyPath,
    method: ConvolutionMethod,
) -> Result<SolutionPath> {
    check_dim(problem.chars.dim(), path.dim())?;
    let times = path.effective_times();
    let impulses = problem.impulses(path);
    let (values, jumps) = sweep(
        &problem.system,
        &times,
        |_, a, b, target| problem.drift_cell(a, b, target),
        &impulses,
        problem.resolve(method),
    )?;
    let left_limits = values.iter().zip(&jumps).map(|(v, j)| v - j).collect();
    Ok(SolutionPath { times, values, left_limits, provenance: Provenance::Mild })
}

/// `X_t = U(t,0)′η + ∫₀ᵗ∫ U(t,s)′R(s,f) L(ds,df)`.
pub fn mild_solution(problem: &SeeProblem, replica: &Replica) -> Result<SolutionPath> {
    mild_solution_with(problem, replica, ConvolutionMethod::Auto)
}

pub fn mild_solution_with(
    problem: &SeeProblem,
    replica: &Replica,
    method: ConvolutionMethod,
) -> Result<SolutionPath> {
    problem.check_replica(replica)?;
    let mut sol = stochastic_convolution_with(problem, &replica.path, method)?;
    let flow = initial_flow(problem, &replica.eta, &sol.times)?;
    for ((v, l), u) in sol.values.iter_mut().zip(sol.left_limits.iter_mut()).zip(&flow) {
        *v += u;
        *l += u;
    }
    Ok(sol)
}

/// `∫₀ᵗ U(s,t)ᵀA(s)ᵀx_s ds` on the nodes of `x`.
pub(crate) fn kernel_convolution(
    system: &EvolutionSystem,
    x: &PiecewisePath,
    quadrature: Quadrature,
    method: ConvolutionMethod,
) -> Result<Vec<DVector<f64>>> {
    check_dim(system.dim(), x.dim())?;
    let rates = if quadrature == Quadrature::Exponential { system.homogeneous_rates() } else { None };
    let times = x.times();
    let gen = system.generator();
    let cell = |k: usize, a: f64, b: f64, target: f64| -> DVector<f64> {
        if let Some(r) = &rates {
            let (tk, tk1) = (times[k], times[k + 1]);
            let slope = (&x.left_limits()[k + 1] - &x.values()[k]) / (tk1 - tk);
            let xa = x.interpolate(k, a);
            let h = b - a;
            return DVector::from_fn(r.len(), |j, _| {
                let z = r[j] * h;
                (r[j] * (target - b)).exp() * r[j] * (xa[j] * h * phi1(z) + slope[j] * h * h * phi2(z))
            });
        }
        simpson_vec(
            |s| {
                let y = gen.at(s).tr_mul(&x.interpolate(k, s));
                system.apply_dual_vec(target, s, &y).expect("kernel times are ordered")
            },
            a,
            b,
            quadrature.panels(),
            x.dim(),
        )
    };
    let method = match method {
        ConvolutionMethod::Auto if system.is_exact() => ConvolutionMethod::Recursion,
        ConvolutionMethod::Auto => ConvolutionMethod::Direct,
        m => m,
    };
    Ok(sweep(system, times, cell, &[], method)?.0)
}

/// `Z_t = U(t,0)′η + ∫₀ᵗ U(t,s)′A(s)′B′L_s ds + B′L_t`.
pub fn ou_cadlag(problem: &SeeProblem, replica: &Replica) -> Result<SolutionPath> {
    problem.check_replica(replica)?;
    let Some(b) = problem.integrand.as_constant() else {
        return Err(Error::Mode("the càdlàg representation needs a constant integrand B′".into()));
    };
    let x = PiecewisePath::from_levy(&replica.path, &problem.chars, b)?;
    let riemann = kernel_convolution(&problem.system, &x, problem.quadrature, ConvolutionMethod::Auto)?;
    let times = x.times().to_vec();
    let flow = initial_flow(problem, &replica.eta, &times)?;
    let mut values = Vec::with_capacity(times.len());
    let mut left_limits = Vec::with_capacity(times.len());
    for k in 0..times.len() {
        let base = &flow[k] + &riemann[k];
        values.push(&base + &x.values()[k]);
        left_limits.push(base + &x.left_limits()[k]);
    }
    Ok(SolutionPath { times, values, left_limits, provenance: Provenance::Cadlag })
}

/// `Γ_{s,t}(g) = U(t,s)′g + ∫_s^t∫ U(t,r)′R(r,f) L(dr,df)` on `replica`.
pub fn flow_apply(problem: &SeeProblem, path: &LevyPath, s: f64, t: f64, g: &DualVector) -> Result<DualVector> {
    check_dim(problem.dim(), g.dim())?;
    check_dim(problem.chars.dim(), path.dim())?;
    if !(s <= t) {
        return Err(Error::Ordering(format!("flow needs s ≤ t, got s = {s}, t = {t}")));
    }
    if !(0.0..=path.horizon()).contains(&s) || t > path.horizon() {
        return Err(Error::TimeOutOfRange { t, horizon: path.horizon() });
    }
    if s == t {
        return Ok(g.clone());
    }
    let mut times = vec![s];
    times.extend(path.effective_times().into_iter().filter(|&u| u > s && u < t));
    times.push(t);
    let mut acc = problem.system.apply_dual_vec(t, s, g.as_vector())?;
    for w in times.windows(2) {
        acc += problem.drift_cell(w[0], w[1], t);
    }
    for imp in problem.impulses(path).iter().filter(|i| i.time > s && i.time <= t) {
        acc += problem.system.apply_dual_vec(t, imp.origin, &imp.value)?;
    }
    Ok(DualVector::wrap(acc))
}

/// `Y_t` for any `t` in the span of `sol`, propagated from the last node
/// at or before `t`.
pub fn solution_value_at(problem: &SeeProblem, sol: &SolutionPath, t: f64) -> Result<DualVector> {
    let end = sol.times[sol.len() - 1];
    if !(sol.times[0]..=end).contains(&t) {
        return Err(Error::TimeOutOfRange { t, horizon: end });
    }
    let k = sol.times.partition_point(|&s| s <= t) - 1;
    Ok(DualVector::wrap(problem.propagate(sol.times[k], &sol.values[k], t)))
}

/// `‖Γ_{s,t}(Γ_{r,s}(g)) − Γ_{r,t}(g)‖`.
pub fn flow_composition_residual(
    problem: &SeeProblem,
    path: &LevyPath,
    r: f64,
    s: f64,
    t: f64,
    g: &DualVector,
) -> Result<f64> {
    let two = flow_apply(problem, path, s, t, &flow_apply(problem, path, r, s, g)?)?;
    let one = flow_apply(problem, path, r, t, g)?;
    Ok((two.as_vector() - one.as_vector()).norm())
}

/// `X_t` at an arbitrary `t ∈ [0, T]`.
pub fn mild_value_at(problem: &SeeProblem, replica: &Replica, t: f64) -> Result<DualVector> {
    problem.check_replica(replica)?;
    flow_apply(problem, &replica.path, 0.0, t, &DualVector::wrap(replica.eta.clone()))
}

/// Cumulative `∫₀^{t_k} ⟨Y_s, A(s)ψ⟩ ds` on the nodes of `sol`, with `Y`
/// propagated inside each cell.
fn drift_pairing_integrals(problem: &SeeProblem, sol: &SolutionPath, psi: &DVector<f64>) -> Vec<f64> {
    let gen = problem.system.generator();
    let exact = problem.exponential_rates().zip(problem.constant_density());
    let mut acc = 0.0;
    let mut out = vec![0.0];
    for k in 0..sol.len() - 1 {
        let (a, b) = (sol.times[k], sol.times[k + 1]);
        let h = b - a;
        let y = &sol.values[k];
        acc += match &exact {
            Some((r, c)) => (0..psi.len())
                .map(|j| psi[j] * (y[j] * (r[j] * h).exp_m1() + c[j] * h * (phi1(r[j] * h) - 1.0)))
                .sum::<f64>(),
            None => simpson(
                |s| problem.propagate(a, y, s).dot(&gen.apply(s, psi)),
                a,
                b,
                problem.quadrature.panels(),
            ),
        };
        out.push(acc);
    }
    out
}

/// `|⟨Y_t,ψ⟩ − ⟨η,ψ⟩ − ∫₀ᵗ⟨Y_s,A(s)ψ⟩ds − ∫₀ᵗ∫R(s,f)′ψ L(ds,df)|` at every
/// node.
pub fn weak_solution_residuals(
    problem: &SeeProblem,
    sol: &SolutionPath,
    path: &LevyPath,
    psi: &TestFunction,
) -> Result<Vec<f64>> {
    check_dim(problem.dim(), psi.dim())?;
    let times = path.effective_times();
    if times != sol.times {
        return Err(Error::Contract("solution nodes must be the path's effective grid".into()));
    }
    let p = psi.as_vector();
    let weak = weak_levy_integral(&problem.integrand, psi, path, &problem.chars, problem.quadrature.panels())?;
    let drift = drift_pairing_integrals(problem, sol, p);
    let eta = sol.values[0].dot(p);
    Ok((0..sol.len()).map(|k| (sol.values[k].dot(p) - eta - drift[k] - weak[k]).abs()).collect())
}

pub fn weak_solution_residual(
    problem: &SeeProblem,
    sol: &SolutionPath,
    path: &LevyPath,
    psi: &TestFunction,
    t: f64,
) -> Result<f64> {
    let k = sol.index_of(t)?;
    Ok(weak_solution_residuals(problem, sol, path, psi)?[k])
}

/// The three members of the iterated-integration identity and the two
/// residuals `r1 = |line1 − line2|`, `r2 = |line3 − line2|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FubiniResidual {
    pub line1: f64,
    pub line2: f64,
    pub line3: f64,
    pub r1: f64,
    pub r2: f64,
}

pub fn fubini_residual(problem: &SeeProblem, path: &LevyPath, psi: &TestFunction, t: f64) -> Result<FubiniResidual> {
    check_dim(problem.dim(), psi.dim())?;
    check_dim(problem.chars.dim(), path.dim())?;
    let p = psi.as_vector();
    let panels = problem.quadrature.panels();
    let gen = problem.system.generator();
    let sys = &problem.system;

    let conv = stochastic_convolution(problem, path)?;
    let k_t = conv.index_of(t)?;
    let times = &conv.times;
    let line1 = drift_pairing_integrals(problem, &conv, p)[k_t];

    let weak = weak_levy_integral(&problem.integrand, psi, path, &problem.chars, panels)?;
    let exact = problem.exponential_rates().zip(problem.constant_density());
    let mut weak_conv = 0.0;
    for k in 0..k_t {
        let (a, b) = (times[k], times[k + 1]);
        weak_conv += match &exact {
            Some((r, c)) => (0..p.len())
                .map(|j| c[j] * p[j] * (b - a) * phi1(r[j] * (b - a)) * (r[j] * (t - b)).exp())
                .sum::<f64>(),
            None => simpson(|s| problem.drift_density(s).dot(&sys.apply_vec(s, t, p).unwrap()), a, b, panels),
        };
    }
    for imp in problem.impulses(path).iter().filter(|i| i.time <= t) {
        weak_conv += imp.value.dot(&sys.apply_vec(imp.origin, t, p)?);
    }
    let line2 = weak_conv - weak[k_t];

    let integral = levy_integral(&problem.integrand, path, &problem.chars, panels)?;
    let mut line3 = 0.0;
    for k in 0..k_t {
        let (a, b) = (times[k], times[k + 1]);
        let h = b - a;
        let ik = integral.value(k);
        line3 += match &exact {
            Some((r, c)) => (0..p.len())
                .map(|j| {
                    let rj = r[j];
                    let decay = (rj * (t - a)).exp();
                    p[j]
                        * (ik[j] * (decay - (rj * (t - b)).exp())
                            + c[j] * h * decay * (phi1(-rj * h) - (-rj * h).exp()))
                })
                .sum::<f64>(),
            None => simpson(
                |s| {
                    let inside = &ik + problem_drift_integral(problem, a, s);
                    inside.dot(&gen.apply(s, &sys.apply_vec(s, t, p).unwrap()))
                },
                a,
                b,
                panels,
            ),
        };
    }
    Ok(FubiniResidual { line1, line2, line3, r1: (line1 - line2).abs(), r2: (line3 - line2).abs() })
}

/// `∫_a^s g(r) dr`.
fn problem_drift_integral(problem: &SeeProblem, a: f64, s: f64) -> DVector<f64> {
    match problem.constant_density() {
        Some(c) => c * (s - a),
        None => simpson_vec(|r| problem.drift_density(r), a, s, problem.quadrature.panels(), problem.dim()),
    }
}

/// `∫₀ᵗ F(Y_s) ds` with `Y` propagated inside each cell; Simpson with the
/// problem's panel count.
fn integrate_along<F: Fn(&DVector<f64>) -> f64>(
    problem: &SeeProblem,
    sol: &SolutionPath,
    t: f64,
    f: F,
) -> Result<f64> {
    if !(0.0..=sol.times[sol.len() - 1]).contains(&t) {
        return Err(Error::TimeOutOfRange { t, horizon: sol.times[sol.len() - 1] });
    }
    let panels = problem.quadrature.panels();
    let mut acc = 0.0;
    for k in 0..sol.len() - 1 {
        let a = sol.times[k];
        if a >= t {
            break;
        }
        let b = sol.times[k + 1].min(t);
        let y = &sol.values[k];
        acc += simpson(|s| f(&problem.propagate(a, y, s)), a, b, panels);
    }
    Ok(acc)
}

/// `E∫₀ᵗ ϱ′(X_s)² ds` over an ensemble of mild solutions.
pub fn square_moment_report(
    problem: &SeeProblem,
    ensemble: &Ensemble,
    family: &SeminormFamily,
    level: usize,
    t: f64,
) -> Result<MeanEstimate> {
    check_dim(problem.dim(), family.dim())?;
    family.weights(level)?;
    let samples: Result<Vec<f64>> = ensemble
        .map(|r| {
            let replica = problem.replica(ensemble, r)?;
            let sol = mild_solution(problem, &replica)?;
            integrate_along(problem, &sol, t, |y| family.dual_seminorm_of(level, y).unwrap().powi(2))
        })
        .into_iter()
        .collect();
    Ok(mean_and_stderr(&samples?))
}

/// `∫₀ᵗ p′(Y_s) ds` along one solution path.
pub fn bochner_report(
    problem: &SeeProblem,
    sol: &SolutionPath,
    family: &SeminormFamily,
    level: usize,
    t: f64,
) -> Result<f64> {
    check_dim(problem.dim(), family.dim())?;
    family.weights(level)?;
    integrate_along(problem, sol, t, |y| family.dual_seminorm_of(level, y).unwrap())
}

/// Factorization gap of the conditional characteristic function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarkovReport {
    pub gap: f64,
    pub se: f64,
}

/// Minimum ensemble size for characteristic-function diagnostics.
pub const MIN_CHAR_ENSEMBLE: usize = 1000;

const BOOTSTRAP_RESAMPLES: usize = 200;

/// Estimates `|E e^{i(a+b)} − E e^{ia}·E e^{ib}|` with
/// `a = ⟨X_s, U(s,s+t)ψ⟩` and `b = ⟨Γ_{s,s+t}(0), ψ⟩`. The standard error is
/// the bootstrap spread of the complex difference.
pub fn markov_diagnostic(
    problem: &SeeProblem,
    s: f64,
    t: f64,
    psi: &TestFunction,
    ensemble: &Ensemble,
) -> Result<MarkovReport> {
    if ensemble.replicas < MIN_CHAR_ENSEMBLE {
        return Err(Error::Contract(format!(
            "Markov diagnostic needs ≥ {MIN_CHAR_ENSEMBLE} replicas, got {}",
            ensemble.replicas
        )));
    }
    check_dim(problem.dim(), psi.dim())?;
    if !(s >= 0.0 && t >= 0.0) || s + t > problem.horizon() {
        return Err(Error::TimeOutOfRange { t: s + t, horizon: problem.horizon() });
    }
    let probe = problem.system.apply(s, s + t, psi)?;
    let zero = DualVector::zeros(problem.dim());
    let pairs: Result<Vec<(f64, f64)>> = ensemble
        .map(|r| {
            let replica = problem.replica(ensemble, r)?;
            let xs = mild_value_at(problem, &replica, s)?;
            let inc = flow_apply(problem, &replica.path, s, s + t, &zero)?;
            Ok((xs.as_vector().dot(probe.as_vector()), inc.as_vector().dot(psi.as_vector())))
        })
        .into_iter()
        .collect();
    let pairs = pairs?;
    let diff = |idx: &mut dyn Iterator<Item = usize>| -> Complex64 {
        let (mut joint, mut ea, mut eb, mut n) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0), 0.0);
        for i in idx {
            let (a, b) = pairs[i];
            joint += Complex64::new(0.0, a + b).exp();
            ea += Complex64::new(0.0, a).exp();
            eb += Complex64::new(0.0, b).exp();
            n += 1.0;
        }
        joint / n - (ea / n) * (eb / n)
    };
    let d = diff(&mut (0..pairs.len()));
    let se = bootstrap_stderr(pairs.len(), BOOTSTRAP_RESAMPLES, ensemble.seed, |idx| {
        let z = diff(&mut idx.iter().copied());
        vec![z.re, z.im]
    });
    Ok(MarkovReport { gap: d.norm(), se: se[0].hypot(se[1]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::JumpAtom;

    fn unit_family(n: usize) -> SeminormFamily {
        SeminormFamily::from_weights(vec![vec![1.0; n]]).unwrap()
    }

    fn scalar_problem(chars: LevyCharacteristics, a: f64, steps: usize, quad: Quadrature) -> SeeProblem {
        SeeProblem::langevin(
            EvolutionSystem::diagonal(DVector::from_element(1, a)).unwrap(),
            DMatrix::identity(1, 1),
            InitialCondition::point(DualVector::zeros(1)),
            chars,
            TimeGrid::uniform(1.0, steps).unwrap(),
            quad,
        )
        .unwrap()
    }

    fn drift_chars(m: f64) -> LevyCharacteristics {
        LevyCharacteristics::new(DualVector::new(vec![m]).unwrap(), DMatrix::zeros(1, 1), vec![], &unit_family(1), 0)
            .unwrap()
    }

    fn jump_chars() -> LevyCharacteristics {
        let atoms = vec![
            JumpAtom::new(3.0, DualVector::new(vec![0.4, -0.3]).unwrap()),
            JumpAtom::new(1.5, DualVector::new(vec![2.0, 1.0]).unwrap()),
        ];
        LevyCharacteristics::new(DualVector::new(vec![0.2, 0.1]).unwrap(), DMatrix::zeros(2, 2), atoms, &unit_family(2), 0)
            .unwrap()
    }

    fn jump_problem(quad: Quadrature) -> SeeProblem {
        SeeProblem::langevin(
            EvolutionSystem::diagonal(DVector::from_vec(vec![-1.0, -0.3])).unwrap(),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]),
            InitialCondition::point(DualVector::new(vec![1.0, -1.0]).unwrap()),
            jump_chars(),
            TimeGrid::uniform(2.0, 10).unwrap(),
            quad,
        )
        .unwrap()
    }

    #[test]
    fn scalar_drift_convolution() {
        let p = scalar_problem(drift_chars(1.0), -1.0, 20, Quadrature::Simpson { panels: 4 });
        let rep = p.simulate(1).unwrap();
        let conv = stochastic_convolution(&p, &rep.path).unwrap();
        for (t, v) in conv.times.iter().zip(&conv.values) {
            assert!((v[0] - (1.0 - (-t).exp())).abs() < 1e-9);
        }
        let exact = scalar_problem(drift_chars(1.0), -1.0, 20, Quadrature::Exponential);
        let conv = stochastic_convolution(&exact, &rep.path).unwrap();
        for (t, v) in conv.times.iter().zip(&conv.values) {
            assert!((v[0] - (1.0 - (-t).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn recursion_matches_direct() {
        let p = jump_problem(Quadrature::Simpson { panels: 2 });
        let rep = p.simulate(3).unwrap();
        let a = stochastic_convolution_with(&p, &rep.path, ConvolutionMethod::Recursion).unwrap();
        let b = stochastic_convolution_with(&p, &rep.path, ConvolutionMethod::Direct).unwrap();
        assert!(a.max_gap(&b).unwrap() < 1e-10);
    }

    #[test]
    fn zero_noise_is_deterministic_flow() {
        let p = jump_problem(Quadrature::Exponential)
            .with_initial(InitialCondition::point(DualVector::new(vec![1.0, 2.0]).unwrap()))
            .unwrap();
        let p = SeeProblem::new(
            p.system().clone(),
            p.integrand().clone(),
            p.initial().clone(),
            LevyCharacteristics::zero(2),
            p.grid().clone(),
            p.quadrature(),
        )
        .unwrap();
        let rep = p.simulate(0).unwrap();
        let x = mild_solution(&p, &rep).unwrap();
        assert_eq!(x.values[0].as_slice(), &[1.0, 2.0]);
        for (t, v) in x.times.iter().zip(&x.values) {
            assert!((v[0] - (-t).exp()).abs() < 1e-15);
            assert!((v[1] - 2.0 * (-0.3 * t).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_system_gives_levy_integral() {
        let base = jump_problem(Quadrature::Simpson { panels: 1 });
        let p = SeeProblem::new(
            EvolutionSystem::identity(2),
            base.integrand().clone(),
            InitialCondition::point(DualVector::zeros(2)),
            base.chars().clone(),
            base.grid().clone(),
            base.quadrature(),
        )
        .unwrap();
        let rep = p.simulate(8).unwrap();
        let conv = stochastic_convolution(&p, &rep.path).unwrap();
        let int = levy_integral(p.integrand(), &rep.path, p.chars(), 1).unwrap();
        for k in 0..conv.len() {
            assert!((&conv.values[k] - int.value(k)).norm() < 1e-12);
        }
    }

    #[test]
    fn cadlag_jumps_and_agreement() {
        let p = jump_problem(Quadrature::Exponential);
        let rep = p.simulate(12).unwrap();
        let z = ou_cadlag(&p, &rep).unwrap();
        let x = mild_solution(&p, &rep).unwrap();
        assert!(z.max_gap(&x).unwrap() < 1e-12);
        let b = p.integrand().as_constant().unwrap();
        for j in rep.path.jumps() {
            let k = z.index_of(j.time).unwrap();
            let jump = &z.values[k] - &z.left_limits[k];
            let dl = b * p.chars().atoms()[j.atom].mark.as_vector();
            assert!((jump - dl).norm() < 1e-12);
        }
        let tv = SeeProblem::new(
            p.system().clone(),
            IntegrandR::time_varying(2, 2, |t| DMatrix::identity(2, 2) * t),
            p.initial().clone(),
            p.chars().clone(),
            p.grid().clone(),
            p.quadrature(),
        )
        .unwrap();
        assert!(matches!(ou_cadlag(&tv, &rep), Err(Error::Mode(_))));
    }

    #[test]
    fn pure_jump_weak_residual_vanishes() {
        let p = jump_problem(Quadrature::Exponential);
        let rep = p.simulate(2).unwrap();
        let x = mild_solution(&p, &rep).unwrap();
        let psi = TestFunction::new(vec![0.7, -1.3]).unwrap();
        let res = weak_solution_residuals(&p, &x, &rep.path, &psi).unwrap();
        assert_eq!(res[0], 0.0);
        assert!(res.iter().all(|&r| r < 1e-12), "{res:?}");
    }

    #[test]
    fn fubini_scalar_drift_oracle() {
        let (m, a, t) = (1.3, -0.8, 1.0);
        let expected = m * (((a * t) as f64).exp_m1() / a - t);
        for quad in [Quadrature::Exponential, Quadrature::Simpson { panels: 8 }] {
            let p = scalar_problem(drift_chars(m), a, 10, quad);
            let rep = p.simulate(0).unwrap();
            let f = fubini_residual(&p, &rep.path, &TestFunction::new(vec![1.0]).unwrap(), t).unwrap();
            assert!((f.line2 - expected).abs() < 1e-8, "{f:?} vs {expected}");
            assert!(f.r1 < 1e-8 && f.r2 < 1e-8, "{f:?}");
        }
    }

    #[test]
    fn fubini_pure_jump_exact() {
        let p = jump_problem(Quadrature::Exponential);
        let rep = p.simulate(6).unwrap();
        let psi = TestFunction::new(vec![0.3, 0.9]).unwrap();
        let f = fubini_residual(&p, &rep.path, &psi, 2.0).unwrap();
        assert!(f.r1 < 1e-12 && f.r2 < 1e-12, "{f:?}");
    }

    #[test]
    fn flow_identity_and_composition() {
        let p = jump_problem(Quadrature::Exponential);
        let rep = p.simulate(4).unwrap();
        let g = DualVector::new(vec![0.5, 0.25]).unwrap();
        assert_eq!(flow_apply(&p, &rep.path, 0.7, 0.7, &g).unwrap(), g);
        assert!(flow_composition_residual(&p, &rep.path, 0.1, 0.83, 1.9, &g).unwrap() < 1e-12);
        let x = mild_solution(&p, &rep).unwrap();
        for &t in &[0.4, 1.0, 2.0] {
            let direct = mild_value_at(&p, &rep, t).unwrap();
            assert!((direct.as_vector() - x.value_at(t).unwrap().as_vector()).norm() < 1e-12);
        }
        assert!(matches!(flow_apply(&p, &rep.path, 1.0, 0.5, &g), Err(Error::Ordering(_))));
    }

    #[test]
    fn markov_deterministic_and_small_ensemble() {
        let p = scalar_problem(drift_chars(0.5), -1.0, 10, Quadrature::Exponential);
        let psi = TestFunction::new(vec![1.0]).unwrap();
        let rep = markov_diagnostic(&p, 0.3, 0.5, &psi, &Ensemble::new(1000, 1)).unwrap();
        assert!(rep.gap < 1e-12 && rep.se < 1e-12);
        assert!(markov_diagnostic(&p, 0.3, 0.5, &psi, &Ensemble::new(10, 1)).is_err());
    }

    #[test]
    fn square_moment_zero_and_monotone() {
        let p = scalar_problem(LevyCharacteristics::zero(1), -1.0, 10, Quadrature::Exponential);
        let fam = SeminormFamily::hermite(1, 1.0, 2).unwrap();
        let e = Ensemble::new(4, 0);
        assert_eq!(square_moment_report(&p, &e, &fam, 0, 1.0).unwrap().mean, 0.0);
        let q = jump_problem(Quadrature::Simpson { panels: 2 });
        let fam = SeminormFamily::hermite(2, 1.0, 3).unwrap();
        let vals: Vec<f64> = (0..=3).map(|l| square_moment_report(&q, &e, &fam, l, 2.0).unwrap().mean).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]), "{vals:?}");
    }

    #[test]
    fn gaussian_initial_condition_sampling() {
        let ic = InitialCondition::gaussian(DualVector::new(vec![1.0, 0.0]).unwrap(), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(ic.sample(5), ic.sample(5));
        assert_ne!(ic.sample(5), ic.sample(6));
        assert!(InitialCondition::gaussian(DualVector::zeros(2), -DMatrix::identity(2, 2)).is_err());
    }
}
