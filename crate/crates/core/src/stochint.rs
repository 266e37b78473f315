//! Stochastic integrals of operator-valued integrands against a simulated
//! Lévy path.
//!
//! For `R(s,f)` mapping functionals of dimension `N` to functionals of
//! dimension `M`:
//!
//! ```text
//! ∫₀ᵗ∫ R(s,f) L(ds,df) = ∫₀ᵗ R(s,0)m ds + Σ_j R(g_j,0)ΔW_j
//!                      + [Σ_{τ≤t, small} R(τ,f)f − ∫₀ᵗ Σ_small λ_i R(s,f_i)f_i ds]
//!                      + Σ_{τ≤t, large} R(τ,f)f
//! ```
//!
//! The Wiener sum runs over grid cells `[g_j, g_{j+1}]` with `g_{j+1} ≤ t`
//! and uses the left endpoint. Every integral is reported on the path's
//! effective grid (grid points and jump times).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::evolution::MatrixFn;
use crate::levy::{LevyCharacteristics, LevyPath};
use crate::quadrature::{simpson, simpson_vec};
use crate::spectral_space::{DualVector, TestFunction};

pub type MarkMatrixFn = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

#[derive(Clone)]
enum Kind {
    Constant(DMatrix<f64>),
    TimeVarying(MatrixFn),
    MarkDependent(MarkMatrixFn),
}

/// Deterministic integrand `R(t,f)`, an `M×N` matrix for every `(t, f)`.
#[derive(Clone)]
pub struct IntegrandR {
    rows: usize,
    cols: usize,
    kind: Kind,
}

impl fmt::Debug for IntegrandR {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            Kind::Constant(_) => "constant",
            Kind::TimeVarying(_) => "time_varying",
            Kind::MarkDependent(_) => "mark_dependent",
        };
        f.debug_struct("IntegrandR")
            .field("kind", &kind)
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

impl IntegrandR {
    pub fn constant(b: DMatrix<f64>) -> Self {
        Self { rows: b.nrows(), cols: b.ncols(), kind: Kind::Constant(b) }
    }

    pub fn identity(dim: usize) -> Self {
        Self::constant(DMatrix::identity(dim, dim))
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(DMatrix::zeros(dim, dim))
    }

    pub fn time_varying<F>(rows: usize, cols: usize, f: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self { rows, cols, kind: Kind::TimeVarying(Arc::new(f)) }
    }

    pub fn mark_dependent<F>(rows: usize, cols: usize, f: F) -> Self
    where
        F: Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self { rows, cols, kind: Kind::MarkDependent(Arc::new(f)) }
    }

    /// Output dimension `M`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Input dimension `N`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_constant(&self) -> Option<&DMatrix<f64>> {
        match &self.kind {
            Kind::Constant(b) => Some(b),
            _ => None,
        }
    }

    pub fn is_mark_dependent(&self) -> bool {
        matches!(self.kind, Kind::MarkDependent(_))
    }

    /// `R(t, f)`.
    pub fn at(&self, t: f64, f: &DVector<f64>) -> DMatrix<f64> {
        match &self.kind {
            Kind::Constant(b) => b.clone(),
            Kind::TimeVarying(r) => r(t),
            Kind::MarkDependent(r) => r(t, f),
        }
    }

    /// `R(t, 0)`.
    pub fn at_zero(&self, t: f64) -> DMatrix<f64> {
        match &self.kind {
            Kind::Constant(b) => b.clone(),
            Kind::TimeVarying(r) => r(t),
            Kind::MarkDependent(r) => r(t, &DVector::zeros(self.cols)),
        }
    }

    /// `S∘R`.
    pub fn compose(&self, s: &DMatrix<f64>) -> Result<Self> {
        check_dim(self.rows, s.ncols())?;
        let rows = s.nrows();
        let s = s.clone();
        Ok(match &self.kind {
            Kind::Constant(b) => Self::constant(&s * b),
            Kind::TimeVarying(r) => {
                let r = r.clone();
                Self::time_varying(rows, self.cols, move |t| &s * r(t))
            }
            Kind::MarkDependent(r) => {
                let r = r.clone();
                Self::mark_dependent(rows, self.cols, move |t, f| &s * r(t, f))
            }
        })
    }

    /// Integrability terms of `R` for the probe `ψ` on `[0, horizon]`, by
    /// Simpson quadrature with `panels` panels (exact for constant `R`).
    pub fn lambda_terms(
        &self,
        chars: &LevyCharacteristics,
        psi: &TestFunction,
        horizon: f64,
        panels: usize,
    ) -> Result<LambdaTerms> {
        check_dim(self.cols, chars.dim())?;
        check_dim(self.rows, psi.dim())?;
        let p = psi.as_vector();
        let m = chars.drift().as_vector();
        let drift = simpson(|s| self.at_zero(s).tr_mul(p).dot(m).powi(2), 0.0, horizon, panels);
        let wiener = simpson(
            |s| chars.covariance_form(&self.at_zero(s).tr_mul(p)),
            0.0,
            horizon,
            panels,
        );
        let jump_term = |small: bool| {
            simpson(
                |s| {
                    chars
                        .atoms()
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| chars.is_small(*i) == small)
                        .map(|(_, a)| {
                            let f = a.mark.as_vector();
                            a.rate * self.at(s, f).tr_mul(p).dot(f).powi(2)
                        })
                        .sum()
                },
                0.0,
                horizon,
                panels,
            )
        };
        Ok(LambdaTerms { drift, wiener, small_jump: jump_term(true), large_jump: jump_term(false) })
    }
}

/// The three integrability terms of the integrand class, plus the
/// large-jump term of its square-integrable subclass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaTerms {
    pub drift: f64,
    pub wiener: f64,
    pub small_jump: f64,
    pub large_jump: f64,
}

impl LambdaTerms {
    pub fn in_lambda(&self) -> bool {
        [self.drift, self.wiener, self.small_jump].iter().all(|x| x.is_finite())
    }

    pub fn in_lambda2(&self) -> bool {
        self.in_lambda() && self.large_jump.is_finite()
    }
}

/// Jump region for Poisson integrals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Small,
    Large,
    All,
}

impl Region {
    fn contains(self, small: bool) -> bool {
        match self {
            Region::Small => small,
            Region::Large => !small,
            Region::All => true,
        }
    }
}

/// A `Ψ′`-valued integral on an effective grid, split by component.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralPath {
    pub times: Vec<f64>,
    pub drift: Vec<DVector<f64>>,
    pub wiener: Vec<DVector<f64>>,
    pub comp_poisson: Vec<DVector<f64>>,
    pub poisson: Vec<DVector<f64>>,
}

impl IntegralPath {
    fn zeros(times: Vec<f64>, dim: usize) -> Self {
        let z = vec![DVector::zeros(dim); times.len()];
        Self { times, drift: z.clone(), wiener: z.clone(), comp_poisson: z.clone(), poisson: z }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Sum of the four components at node `k`.
    pub fn value(&self, k: usize) -> DVector<f64> {
        &self.drift[k] + &self.wiener[k] + &self.comp_poisson[k] + &self.poisson[k]
    }

    pub fn values(&self) -> Vec<DualVector> {
        (0..self.len()).map(|k| DualVector::wrap(self.value(k))).collect()
    }
}

/// Per-node events of a Lévy path on its effective grid.
pub(crate) struct Node {
    pub t: f64,
    /// Index `j` of the grid cell `[g_j, g_{j+1}]` ending here.
    pub wiener_cell: Option<usize>,
    /// Atom index of the jump at this node.
    pub jump: Option<usize>,
}

pub(crate) fn nodes(path: &LevyPath) -> Vec<Node> {
    let grid = path.grid().times();
    let jumps = path.jumps();
    let (mut gi, mut ji) = (0, 0);
    let mut out = Vec::with_capacity(grid.len() + jumps.len());
    while gi < grid.len() || ji < jumps.len() {
        let tg = grid.get(gi).copied().unwrap_or(f64::INFINITY);
        let tj = jumps.get(ji).map_or(f64::INFINITY, |j| j.time);
        let t = tg.min(tj);
        let mut node = Node { t, wiener_cell: None, jump: None };
        if tg == t {
            if gi > 0 {
                node.wiener_cell = Some(gi - 1);
            }
            gi += 1;
        }
        if tj == t {
            node.jump = Some(jumps[ji].atom);
            ji += 1;
        }
        out.push(node);
    }
    out
}

fn check_shapes(r: &IntegrandR, path: &LevyPath, chars: &LevyCharacteristics) -> Result<()> {
    check_dim(r.cols(), chars.dim())?;
    check_dim(chars.dim(), path.dim())
}

/// Cumulative `∫₀ᵗ g(s) ds` over the nodes, Simpson per cell.
fn cumulative<F: FnMut(f64) -> DVector<f64>>(
    times: &[f64],
    dim: usize,
    panels: usize,
    mut g: F,
) -> Vec<DVector<f64>> {
    let mut acc = DVector::zeros(dim);
    let mut out = Vec::with_capacity(times.len());
    out.push(acc.clone());
    for w in times.windows(2) {
        acc += simpson_vec(&mut g, w[0], w[1], panels, dim);
        out.push(acc.clone());
    }
    out
}

/// `∫₀ᵗ R(s,0)h(s) ds` on `times`, Simpson with `panels` panels per cell.
pub fn drift_integral<H>(r: &IntegrandR, h: H, times: &[f64], panels: usize) -> IntegralPath
where
    H: Fn(f64) -> DVector<f64>,
{
    let mut out = IntegralPath::zeros(times.to_vec(), r.rows());
    out.drift = match r.as_constant() {
        Some(b) => cumulative(times, r.rows(), panels, |s| b * h(s)),
        None => cumulative(times, r.rows(), panels, |s| r.at_zero(s) * h(s)),
    };
    out
}

/// `Σ_j R(g_j,0)ΔW_j` over completed grid cells.
pub fn wiener_integral(r: &IntegrandR, path: &LevyPath, chars: &LevyCharacteristics) -> Result<IntegralPath> {
    check_shapes(r, path, chars)?;
    let nodes = nodes(path);
    let mut out = IntegralPath::zeros(nodes.iter().map(|n| n.t).collect(), r.rows());
    let grid = path.grid().times();
    let mut acc = DVector::zeros(r.rows());
    for (k, node) in nodes.iter().enumerate() {
        if let Some(j) = node.wiener_cell {
            acc += r.at_zero(grid[j]) * &path.wiener_increments()[j];
        }
        out.wiener[k] = acc.clone();
    }
    Ok(out)
}

/// Compensator rate `Σ_small λ_i R(s,f_i)f_i`.
fn compensator_density(r: &IntegrandR, chars: &LevyCharacteristics, s: f64) -> DVector<f64> {
    let mut c = DVector::zeros(r.rows());
    for (i, a) in chars.atoms().iter().enumerate() {
        if chars.is_small(i) {
            let f = a.mark.as_vector();
            c.axpy(a.rate, &(r.at(s, f) * f), 1.0);
        }
    }
    c
}

/// Small-jump sum minus its compensator.
pub fn comp_poisson_integral(
    r: &IntegrandR,
    path: &LevyPath,
    chars: &LevyCharacteristics,
    panels: usize,
) -> Result<IntegralPath> {
    check_shapes(r, path, chars)?;
    let mut out = poisson_integral(r, path, chars, Region::Small)?;
    let comp = match r.as_constant() {
        Some(b) => {
            let rate = b * chars.compensator();
            out.times.iter().map(|&t| &rate * t).collect()
        }
        None => cumulative(&out.times, r.rows(), panels, |s| compensator_density(r, chars, s)),
    };
    out.comp_poisson = out.poisson.iter().zip(&comp).map(|(p, c)| p - c).collect();
    out.poisson.iter_mut().for_each(|p| p.fill(0.0));
    Ok(out)
}

/// `Σ_{τ≤t, f ∈ region} R(τ,f)f`, stored in the `poisson` component.
pub fn poisson_integral(
    r: &IntegrandR,
    path: &LevyPath,
    chars: &LevyCharacteristics,
    region: Region,
) -> Result<IntegralPath> {
    check_shapes(r, path, chars)?;
    let nodes = nodes(path);
    let mut out = IntegralPath::zeros(nodes.iter().map(|n| n.t).collect(), r.rows());
    let mut acc = DVector::zeros(r.rows());
    for (k, node) in nodes.iter().enumerate() {
        if let Some(i) = node.jump {
            if region.contains(chars.is_small(i)) {
                let f = chars.atoms()[i].mark.as_vector();
                acc += r.at(node.t, f) * f;
            }
        }
        out.poisson[k] = acc.clone();
    }
    Ok(out)
}

/// The full strong integral with its four components.
pub fn levy_integral(
    r: &IntegrandR,
    path: &LevyPath,
    chars: &LevyCharacteristics,
    panels: usize,
) -> Result<IntegralPath> {
    check_shapes(r, path, chars)?;
    let m = chars.drift().as_vector().clone();
    let mut out = poisson_integral(r, path, chars, Region::Large)?;
    out.drift = drift_integral(r, |_| m.clone(), &out.times, panels).drift;
    out.wiener = wiener_integral(r, path, chars)?.wiener;
    out.comp_poisson = comp_poisson_integral(r, path, chars, panels)?.comp_poisson;
    Ok(out)
}

/// The weak integral `∫∫ R(s,f)′ψ L(ds,df)` on the effective grid, built
/// from the transposed integrand.
pub fn weak_levy_integral(
    r: &IntegrandR,
    psi: &TestFunction,
    path: &LevyPath,
    chars: &LevyCharacteristics,
    panels: usize,
) -> Result<Vec<f64>> {
    check_shapes(r, path, chars)?;
    check_dim(r.rows(), psi.dim())?;
    let p = psi.as_vector();
    let m = chars.drift().as_vector();
    let grid = path.grid().times();
    let nodes = nodes(path);
    let small_density = |s: f64| -> f64 {
        chars
            .atoms()
            .iter()
            .enumerate()
            .filter(|(i, _)| chars.is_small(*i))
            .map(|(_, a)| {
                let f = a.mark.as_vector();
                a.rate * f.dot(&r.at(s, f).tr_mul(p))
            })
            .sum()
    };
    let constant_rates = r.as_constant().map(|b| {
        let rp = b.tr_mul(p);
        (m.dot(&rp), chars.compensator().dot(&rp))
    });
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(nodes.len());
    for (k, node) in nodes.iter().enumerate() {
        if k > 0 {
            let (a, b) = (nodes[k - 1].t, node.t);
            acc += match constant_rates {
                Some((drift, comp)) => (drift - comp) * (b - a),
                None => simpson(|s| m.dot(&r.at_zero(s).tr_mul(p)) - small_density(s), a, b, panels),
            };
        }
        if let Some(j) = node.wiener_cell {
            acc += path.wiener_increments()[j].dot(&r.at_zero(grid[j]).tr_mul(p));
        }
        if let Some(i) = node.jump {
            let f = chars.atoms()[i].mark.as_vector();
            acc += f.dot(&r.at(node.t, f).tr_mul(p));
        }
        out.push(acc);
    }
    Ok(out)
}

/// `max_t ‖S·∫R dL − ∫(S∘R) dL‖` over the effective grid.
pub fn commute_operator(
    s: &DMatrix<f64>,
    r: &IntegrandR,
    path: &LevyPath,
    chars: &LevyCharacteristics,
    panels: usize,
) -> Result<f64> {
    if s.ncols() != r.rows() {
        return Err(Error::DimensionMismatch { expected: r.rows(), found: s.ncols() });
    }
    let lhs = levy_integral(r, path, chars, panels)?;
    let rhs = levy_integral(&r.compose(s)?, path, chars, panels)?;
    Ok((0..lhs.len())
        .map(|k| (s * lhs.value(k) - rhs.value(k)).norm())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::{JumpAtom, TimeGrid};
    use crate::spectral_space::SeminormFamily;

    fn unit_family(n: usize) -> SeminormFamily {
        SeminormFamily::from_weights(vec![vec![1.0; n]]).unwrap()
    }

    fn mixed_chars() -> LevyCharacteristics {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let atoms = vec![
            JumpAtom::new(4.0, DualVector::new(vec![0.3, -0.2]).unwrap()),
            JumpAtom::new(2.0, DualVector::new(vec![1.5, 1.0]).unwrap()),
        ];
        LevyCharacteristics::new(DualVector::new(vec![0.5, -1.0]).unwrap(), q, atoms, &unit_family(2), 0)
            .unwrap()
    }

    #[test]
    fn identity_integrand_reproduces_path() {
        let chars = mixed_chars();
        let grid = TimeGrid::uniform(1.0, 20).unwrap();
        let path = LevyPath::simulate(&chars, &grid, 4).unwrap();
        let int = levy_integral(&IntegrandR::identity(2), &path, &chars, 1).unwrap();
        assert_eq!(int.times, path.effective_times());
        for (k, &t) in int.times.iter().enumerate() {
            let l = path.evaluate(&chars, t).unwrap();
            assert!((int.value(k) - l.as_vector()).norm() <= 1e-12 * (1.0 + l.as_vector().norm()));
        }
    }

    #[test]
    fn zero_integrand_gives_zero() {
        let chars = mixed_chars();
        let path = LevyPath::simulate(&chars, &TimeGrid::uniform(1.0, 10).unwrap(), 1).unwrap();
        let int = levy_integral(&IntegrandR::zero(2), &path, &chars, 1).unwrap();
        assert!((0..int.len()).all(|k| int.value(k).iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn drift_integral_examples() {
        let times = [0.0, 0.25, 0.5, 1.0];
        let zero = drift_integral(&IntegrandR::identity(2), |_| DVector::zeros(2), &times, 1);
        assert!(zero.drift.iter().all(|v| v.norm() == 0.0));
        let m = DVector::from_vec(vec![2.0, -1.0]);
        let c = drift_integral(&IntegrandR::identity(2), |_| m.clone(), &times, 1);
        for (k, &t) in times.iter().enumerate() {
            assert_eq!(c.value(k), &m * t);
        }
        let r = IntegrandR::time_varying(2, 2, |t| DMatrix::from_diagonal_element(2, 2, t));
        let lin = drift_integral(&r, |_| DVector::from_vec(vec![1.0, 0.0]), &times, 1);
        assert!((lin.value(3)[0] - 0.5).abs() < 1e-15);
        assert_eq!(lin.value(3)[1], 0.0);
    }

    #[test]
    fn poisson_mark_dependent_step() {
        let fam = unit_family(2);
        let atoms = vec![JumpAtom::new(5.0, DualVector::new(vec![2.0, 3.0]).unwrap())];
        let chars = LevyCharacteristics::new(DualVector::zeros(2), DMatrix::zeros(2, 2), atoms, &fam, 0)
            .unwrap();
        let path = LevyPath::simulate(&chars, &TimeGrid::uniform(1.0, 4).unwrap(), 9).unwrap();
        let r = IntegrandR::mark_dependent(2, 2, |_, f| DMatrix::from_diagonal_element(2, 2, f[0]));
        let int = poisson_integral(&r, &path, &chars, Region::Large).unwrap();
        let first = path.jumps()[0].time;
        let k = int.times.iter().position(|&t| t == first).unwrap();
        assert_eq!(int.value(k) - int.value(k - 1), DVector::from_vec(vec![4.0, 6.0]));
        let small = poisson_integral(&r, &path, &chars, Region::Small).unwrap();
        assert!(small.poisson.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn region_additivity() {
        let chars = mixed_chars();
        let path = LevyPath::simulate(&chars, &TimeGrid::uniform(2.0, 10).unwrap(), 21).unwrap();
        let r = IntegrandR::time_varying(2, 2, |t| DMatrix::from_row_slice(2, 2, &[1.0, t, 0.0, 2.0]));
        let s = poisson_integral(&r, &path, &chars, Region::Small).unwrap();
        let l = poisson_integral(&r, &path, &chars, Region::Large).unwrap();
        let a = poisson_integral(&r, &path, &chars, Region::All).unwrap();
        for k in 0..a.len() {
            let sum = s.value(k) + l.value(k);
            assert!((a.value(k) - &sum).norm() <= 1e-13 * (1.0 + sum.norm()));
        }
    }

    #[test]
    fn weak_strong_and_commutation() {
        let chars = mixed_chars();
        let path = LevyPath::simulate(&chars, &TimeGrid::uniform(1.0, 16).unwrap(), 5).unwrap();
        let r = IntegrandR::mark_dependent(3, 2, |t, f| {
            DMatrix::from_row_slice(3, 2, &[1.0 + t, f[0], -0.5, t * t, 0.2, 1.0 + f[1]])
        });
        let psi = TestFunction::new(vec![0.4, -1.1, 2.0]).unwrap();
        let strong = levy_integral(&r, &path, &chars, 4).unwrap();
        let weak = weak_levy_integral(&r, &psi, &path, &chars, 4).unwrap();
        for k in 0..strong.len() {
            assert!((strong.value(k).dot(psi.as_vector()) - weak[k]).abs() < 1e-11);
        }
        let s = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]);
        assert!(commute_operator(&s, &r, &path, &chars, 4).unwrap() < 1e-11);
        assert!(commute_operator(&DMatrix::identity(2, 2), &r, &path, &chars, 4).is_err());
    }

    #[test]
    fn lambda_terms_constant_identity() {
        let chars = mixed_chars();
        let psi = TestFunction::new(vec![1.0, 2.0]).unwrap();
        let terms = IntegrandR::identity(2).lambda_terms(&chars, &psi, 2.0, 1).unwrap();
        assert!((terms.drift - 2.0 * 1.5f64.powi(2)).abs() < 1e-12);
        assert!((terms.wiener - 2.0 * (1.0 + 1.2 + 2.0)).abs() < 1e-12);
        assert!((terms.small_jump - 2.0 * 4.0 * 0.01).abs() < 1e-12);
        assert!((terms.large_jump - 2.0 * 2.0 * 3.5f64.powi(2)).abs() < 1e-12);
        assert!(terms.in_lambda2());
    }
}
