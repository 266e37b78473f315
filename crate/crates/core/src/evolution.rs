//! Backward evolution systems `U(s,t)` acting on test functions.
//!
//! `U(t,t) = I`, `U(s,t) = U(s,r)U(r,t)` for `s ≤ r ≤ t`, and the generator
//! family satisfies `∂_t U(s,t)ψ = U(s,t)A(t)ψ`, `∂_s U(s,t)ψ = −A(s)U(s,t)ψ`.
//! The dual (forward) action on functionals is the transpose,
//! `U(t,s)′ = U(s,t)ᵀ`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::quadrature::{adaptive_simpson, simpson_vec};
use crate::spectral_space::{DualVector, SeminormFamily, TestFunction};

pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Tolerance for the adaptive integration of time-dependent diagonal rates.
pub const DEFAULT_EXPONENT_TOL: f64 = 1e-13;

/// `t ↦ A(t)`, an `N×N` matrix acting on test-function coefficients.
#[derive(Clone)]
pub struct GeneratorFamily {
    dim: usize,
    matrix: MatrixFn,
}

impl fmt::Debug for GeneratorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratorFamily").field("dim", &self.dim).finish_non_exhaustive()
    }
}

impl GeneratorFamily {
    pub fn new(dim: usize, matrix: MatrixFn) -> Self {
        Self { dim, matrix }
    }

    pub fn from_fn<F>(dim: usize, f: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self::new(dim, Arc::new(f))
    }

    pub fn constant(a: DMatrix<f64>) -> Self {
        let dim = a.nrows();
        Self::from_fn(dim, move |_| a.clone())
    }

    pub fn diagonal(a: DVector<f64>) -> Self {
        Self::constant(DMatrix::from_diagonal(&a))
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(DMatrix::zeros(dim, dim))
    }

    /// `t ↦ A(t) + D(t)`.
    pub fn sum(&self, other: &GeneratorFamily) -> Result<Self> {
        check_dim(self.dim, other.dim)?;
        let (a, d) = (self.matrix.clone(), other.matrix.clone());
        Ok(Self::from_fn(self.dim, move |t| a(t) + d(t)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn at(&self, t: f64) -> DMatrix<f64> {
        (self.matrix)(t)
    }

    pub fn apply(&self, t: f64, psi: &DVector<f64>) -> DVector<f64> {
        self.at(t) * psi
    }

    /// Rejects wrong shapes and non-finite entries on `samples + 1` uniform
    /// points of `[0, horizon]`.
    pub fn validate(&self, horizon: f64, samples: usize) -> Result<()> {
        for i in 0..=samples.max(1) {
            let t = horizon * i as f64 / samples.max(1) as f64;
            let a = self.at(t);
            if a.nrows() != self.dim || a.ncols() != self.dim {
                return Err(Error::DimensionMismatch { expected: self.dim, found: a.nrows() });
            }
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::Model(format!("generator has non-finite entries at t = {t}")));
            }
        }
        Ok(())
    }

    /// Sampled modulus of continuity `max ‖A(x) − A(y)‖_F` over pairs of the
    /// `samples + 1` uniform points of `[a, b]` with `|x − y| ≤ h`.
    pub fn continuity_modulus(&self, a: f64, b: f64, h: f64, samples: usize) -> f64 {
        let n = samples.max(1);
        let pts: Vec<(f64, DMatrix<f64>)> = (0..=n)
            .map(|i| {
                let t = a + (b - a) * i as f64 / n as f64;
                (t, self.at(t))
            })
            .collect();
        let mut worst = 0.0f64;
        for (i, (x, ax)) in pts.iter().enumerate() {
            for (y, ay) in &pts[i + 1..] {
                if y - x > h + 1e-15 {
                    break;
                }
                worst = worst.max((ax - ay).norm());
            }
        }
        worst
    }
}

#[derive(Clone)]
enum Kind {
    Identity,
    DiagonalHomogeneous(DVector<f64>),
    DiagonalTimeDependent { rates: Vec<ScalarFn>, tol: f64 },
    GeneralMatrix { substep: f64 },
    Perturbed { base: Box<EvolutionSystem>, perturbation: GeneratorFamily, substep: f64 },
}

/// A backward evolution system together with its generator family.
#[derive(Clone)]
pub struct EvolutionSystem {
    kind: Kind,
    generator: GeneratorFamily,
}

impl fmt::Debug for EvolutionSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EvolutionSystem")
            .field("variant", &self.variant_name())
            .field("dim", &self.dim())
            .finish()
    }
}

impl EvolutionSystem {
    pub fn identity(dim: usize) -> Self {
        Self { kind: Kind::Identity, generator: GeneratorFamily::zero(dim) }
    }

    /// `U(s,t) = diag(e^{a_k(t−s)})`.
    pub fn diagonal(a: DVector<f64>) -> Result<Self> {
        if a.is_empty() || a.iter().any(|x| !x.is_finite()) {
            return Err(Error::Model("diagonal rates must be finite and nonempty".into()));
        }
        Ok(Self { generator: GeneratorFamily::diagonal(a.clone()), kind: Kind::DiagonalHomogeneous(a) })
    }

    /// `U(s,t) = diag(e^{∫_s^t a_k(r) dr})`, integrals by adaptive Simpson.
    pub fn diagonal_time_dependent(rates: Vec<ScalarFn>, tol: f64) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Model("time-dependent diagonal needs at least one rate".into()));
        }
        if !(tol > 0.0) {
            return Err(Error::Model(format!("exponent tolerance must be positive, got {tol}")));
        }
        let dim = rates.len();
        let fs = rates.clone();
        let generator = GeneratorFamily::from_fn(dim, move |t| {
            DMatrix::from_diagonal(&DVector::from_iterator(dim, fs.iter().map(|a| a(t))))
        });
        Ok(Self { kind: Kind::DiagonalTimeDependent { rates, tol }, generator })
    }

    /// Midpoint-exponential stepping with `⌈(t−s)/Δ⌉` equal substeps on every
    /// interval `[s, t]`.
    pub fn general_matrix(generator: GeneratorFamily, substep: f64) -> Result<Self> {
        check_substep(substep)?;
        Ok(Self { kind: Kind::GeneralMatrix { substep }, generator })
    }

    /// The system generated by `A(t) + D(t)`, stepped directly on the sum.
    pub fn perturbed(base: &EvolutionSystem, perturbation: GeneratorFamily, substep: f64) -> Result<Self> {
        check_substep(substep)?;
        let generator = base.generator.sum(&perturbation)?;
        Ok(Self {
            kind: Kind::Perturbed { base: Box::new(base.clone()), perturbation, substep },
            generator,
        })
    }

    pub fn dim(&self) -> usize {
        self.generator.dim()
    }

    pub fn generator(&self) -> &GeneratorFamily {
        &self.generator
    }

    pub fn variant_name(&self) -> &'static str {
        match self.kind {
            Kind::Identity => "identity",
            Kind::DiagonalHomogeneous(_) => "diagonal",
            Kind::DiagonalTimeDependent { .. } => "diagonal_time_dependent",
            Kind::GeneralMatrix { .. } => "general_matrix",
            Kind::Perturbed { .. } => "perturbed",
        }
    }

    /// Whether `U` is computed in closed form, so the cocycle holds to
    /// rounding.
    pub fn is_exact(&self) -> bool {
        matches!(
            self.kind,
            Kind::Identity | Kind::DiagonalHomogeneous(_) | Kind::DiagonalTimeDependent { .. }
        )
    }

    /// Rates `a` of a diagonal time-homogeneous system (identity: zeros).
    pub fn homogeneous_rates(&self) -> Option<DVector<f64>> {
        match &self.kind {
            Kind::Identity => Some(DVector::zeros(self.dim())),
            Kind::DiagonalHomogeneous(a) => Some(a.clone()),
            _ => None,
        }
    }

    /// `∫_s^t a_k(r) dr` for the diagonal variants.
    pub fn diagonal_exponent(&self, s: f64, t: f64) -> Option<DVector<f64>> {
        match &self.kind {
            Kind::Identity => Some(DVector::zeros(self.dim())),
            Kind::DiagonalHomogeneous(a) => Some(a * (t - s)),
            Kind::DiagonalTimeDependent { rates, tol } => Some(DVector::from_iterator(
                rates.len(),
                rates.iter().map(|a| if s == t { 0.0 } else { adaptive_simpson(&|r| a(r), s, t, *tol) }),
            )),
            _ => None,
        }
    }

    /// Matrix of `U(s,t)` in coefficients.
    pub fn propagator(&self, s: f64, t: f64) -> Result<DMatrix<f64>> {
        check_order(s, t)?;
        if let Some(e) = self.diagonal_exponent(s, t) {
            return Ok(DMatrix::from_diagonal(&e.map(f64::exp)));
        }
        let substep = match &self.kind {
            Kind::GeneralMatrix { substep } | Kind::Perturbed { substep, .. } => *substep,
            _ => unreachable!("diagonal variants handled above"),
        };
        let n = self.dim();
        if s == t {
            return Ok(DMatrix::identity(n, n));
        }
        let steps = ((t - s) / substep - 1e-9).ceil().max(1.0) as usize;
        let h = (t - s) / steps as f64;
        let mut u = DMatrix::identity(n, n);
        for j in 0..steps {
            let mid = s + (j as f64 + 0.5) * h;
            u *= (self.generator.at(mid) * h).exp();
        }
        Ok(u)
    }

    pub(crate) fn apply_vec(&self, s: f64, t: f64, psi: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), psi.len())?;
        check_order(s, t)?;
        if s == t {
            return Ok(psi.clone());
        }
        if let Some(e) = self.diagonal_exponent(s, t) {
            return Ok(psi.component_mul(&e.map(f64::exp)));
        }
        Ok(self.propagator(s, t)? * psi)
    }

    pub(crate) fn apply_dual_vec(&self, t: f64, s: f64, f: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), f.len())?;
        check_order(s, t)?;
        if s == t {
            return Ok(f.clone());
        }
        if let Some(e) = self.diagonal_exponent(s, t) {
            return Ok(f.component_mul(&e.map(f64::exp)));
        }
        Ok(self.propagator(s, t)?.tr_mul(f))
    }

    /// `U(s,t)ψ`.
    pub fn apply(&self, s: f64, t: f64, psi: &TestFunction) -> Result<TestFunction> {
        Ok(TestFunction::wrap(self.apply_vec(s, t, psi.as_vector())?))
    }

    /// `U(t,s)′f`, the transpose action on functionals.
    pub fn apply_dual(&self, t: f64, s: f64, f: &DualVector) -> Result<DualVector> {
        Ok(DualVector::wrap(self.apply_dual_vec(t, s, f.as_vector())?))
    }

    /// `‖U(u,t)ψ − ψ − ∫_u^t U(u,s)A(s)ψ ds‖` with Simpson quadrature.
    pub fn forward_residual(&self, u: f64, t: f64, psi: &TestFunction, panels: usize) -> Result<f64> {
        check_order(u, t)?;
        let p = psi.as_vector();
        let lhs = self.apply_vec(u, t, p)?;
        let mut err = None;
        let integral = simpson_vec(
            |s| match self.apply_vec(u, s, &self.generator.apply(s, p)) {
                Ok(v) => v,
                Err(e) => {
                    err.get_or_insert(e);
                    DVector::zeros(p.len())
                }
            },
            u,
            t,
            panels,
            p.len(),
        );
        if let Some(e) = err {
            return Err(e);
        }
        Ok((lhs - p - integral).norm())
    }

    /// `‖U(u,t)ψ − ψ − ∫_u^t A(s)U(s,t)ψ ds‖` with Simpson quadrature.
    pub fn backward_residual(&self, u: f64, t: f64, psi: &TestFunction, panels: usize) -> Result<f64> {
        check_order(u, t)?;
        let p = psi.as_vector();
        let lhs = self.apply_vec(u, t, p)?;
        let mut err = None;
        let integral = simpson_vec(
            |s| match self.apply_vec(s, t, p) {
                Ok(v) => self.generator.apply(s, &v),
                Err(e) => {
                    err.get_or_insert(e);
                    DVector::zeros(p.len())
                }
            },
            u,
            t,
            panels,
            p.len(),
        );
        if let Some(e) = err {
            return Err(e);
        }
        Ok((lhs - p - integral).norm())
    }

    /// `‖U(s,r)U(r,t)ψ − U(s,t)ψ‖`.
    pub fn cocycle_residual(&self, s: f64, r: f64, t: f64, psi: &TestFunction) -> Result<f64> {
        check_order(s, r)?;
        check_order(r, t)?;
        let p = psi.as_vector();
        let split = self.apply_vec(s, r, &self.apply_vec(r, t, p)?)?;
        Ok((split - self.apply_vec(s, t, p)?).norm())
    }

    /// For a perturbed system `V` over base `U` and perturbation `D`:
    /// `‖V(s,t)ψ − U(s,t)ψ − ∫_s^t U(s,r)D(r)V(r,t)ψ dr‖`.
    pub fn integral_equation_residual(
        &self,
        s: f64,
        t: f64,
        psi: &TestFunction,
        panels: usize,
    ) -> Result<f64> {
        let Kind::Perturbed { base, perturbation, .. } = &self.kind else {
            return Err(Error::Mode("integral-equation residual needs a perturbed system".into()));
        };
        check_order(s, t)?;
        let p = psi.as_vector();
        check_dim(self.dim(), p.len())?;
        let mut err = None;
        let integral = simpson_vec(
            |r| {
                let v = self
                    .apply_vec(r, t, p)
                    .and_then(|v| base.apply_vec(s, r, &perturbation.apply(r, &v)));
                v.unwrap_or_else(|e| {
                    err.get_or_insert(e);
                    DVector::zeros(p.len())
                })
            },
            s,
            t,
            panels,
            p.len(),
        );
        if let Some(e) = err {
            return Err(e);
        }
        Ok((self.apply_vec(s, t, p)? - base.apply_vec(s, t, p)? - integral).norm())
    }

    /// Sampled `(C₀,1)` bound `p(U(s,t)ψ) ≤ e^{ϑ(t−s)} q(ψ)` for
    /// `0 ≤ s < t ≤ horizon` on `samples + 1` uniform points.
    ///
    /// For each level `q ∈ [p, min(p + q_cap, max_level)]` the smallest
    /// admissible `ϑ` is read off the exact operator norms
    /// `‖W_p^{1/2} U(s,t) W_q^{-1/2}‖₂`; the level with the smallest `ϑ` wins
    /// (lowest level on ties). The bound is certified iff `ϑ ≤ theta_cap`.
    pub fn c01_bound_report(
        &self,
        family: &SeminormFamily,
        p: usize,
        horizon: f64,
        caps: C01Caps,
    ) -> Result<C01Report> {
        check_dim(self.dim(), family.dim())?;
        if !(horizon > 0.0) {
            return Err(Error::Contract(format!("horizon must be positive, got {horizon}")));
        }
        let wp = family.weights(p)?.map(f64::sqrt);
        let n = caps.samples.max(1);
        let times: Vec<f64> = (0..=n).map(|i| horizon * i as f64 / n as f64).collect();
        let mut pairs = Vec::new();
        for (i, &s) in times.iter().enumerate() {
            for &t in &times[i + 1..] {
                pairs.push((s, t, self.propagator(s, t)?));
            }
        }
        let q_max = (p + caps.q_cap).min(family.max_level());
        let mut best: Option<C01Report> = None;
        for q in p..=q_max {
            let wq = family.weights(q)?.map(|w| 1.0 / w.sqrt());
            let norms: Vec<(f64, f64)> = pairs
                .iter()
                .map(|(s, t, u)| {
                    let scaled = DMatrix::from_diagonal(&wp) * u * DMatrix::from_diagonal(&wq);
                    (t - s, spectral_norm(&scaled))
                })
                .collect();
            let theta = norms
                .iter()
                .map(|&(h, norm)| (norm.ln() / h).max(0.0))
                .fold(0.0f64, f64::max);
            let margin = norms
                .iter()
                .map(|&(h, norm)| (theta * h).exp() - norm)
                .fold(f64::INFINITY, f64::min);
            let margin = if margin < 0.0 && margin > -1e-12 { 0.0 } else { margin };
            if best.as_ref().is_none_or(|b| theta < b.theta) {
                best = Some(C01Report { theta, q, margin, certified: theta <= caps.theta_cap });
            }
        }
        Ok(best.expect("level range is nonempty"))
    }
}

/// Search limits for [`EvolutionSystem::c01_bound_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct C01Caps {
    pub q_cap: usize,
    pub theta_cap: f64,
    pub samples: usize,
}

impl Default for C01Caps {
    fn default() -> Self {
        Self { q_cap: 2, theta_cap: 50.0, samples: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct C01Report {
    pub theta: f64,
    pub q: usize,
    pub margin: f64,
    pub certified: bool,
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

fn check_order(s: f64, t: f64) -> Result<()> {
    if !(s <= t) {
        return Err(Error::Ordering(format!("evolution needs s ≤ t, got s = {s}, t = {t}")));
    }
    Ok(())
}

fn check_substep(substep: f64) -> Result<()> {
    if !(substep > 0.0) || !substep.is_finite() {
        return Err(Error::Model(format!("substep must be positive, got {substep}")));
    }
    Ok(())
}
