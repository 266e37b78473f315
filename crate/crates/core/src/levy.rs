//! Dual-valued Lévy processes with finitely many jump atoms.
//!
//! A process is described by its characteristics `(m, Q, ν, ρ)`: a drift
//! `m`, a Wiener covariance `Q`, a finite atomic Lévy measure
//! `ν = Σ_i λ_i δ_{f_i}` and a seminorm level `ρ` splitting the atoms into
//! small (`ρ'(f_i) ≤ 1`) and large ones. Paths are simulated exactly:
//!
//! ```text
//! L_t = t·m + W_t + Σ_{τ ≤ t, small} f − t·Σ_small λ_i f_i + Σ_{τ ≤ t, large} f
//! ```
//!
//! The Wiener part is sampled on a user grid and held constant between grid
//! points, so every path is càdlàg with jumps only at grid points (Wiener
//! increments) and at the exactly simulated jump times.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::seeding::substream_rng;
use crate::spectral_space::{pairing, DualVector, SeminormFamily, TestFunction};

/// Strictly increasing time grid `0 = t_0 < t_1 < … < t_M = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Contract("time grid needs at least two points".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::Contract(format!("time grid must start at 0, got {}", times[0])));
        }
        if let Some(w) = times.windows(2).find(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::Contract(format!(
                "time grid must be strictly increasing and finite ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { times })
    }

    /// `steps` equal cells on `[0, horizon]`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Contract(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Contract("time grid needs at least one cell".into()));
        }
        let mut times: Vec<f64> = (0..steps).map(|i| horizon * i as f64 / steps as f64).collect();
        times.push(horizon);
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn cells(&self) -> usize {
        self.times.len() - 1
    }

    /// Grid with every cell split at its midpoint.
    pub fn refine(&self) -> TimeGrid {
        let mut times = Vec::with_capacity(2 * self.times.len() - 1);
        for w in self.times.windows(2) {
            times.push(w[0]);
            times.push(0.5 * (w[0] + w[1]));
        }
        times.push(self.horizon());
        TimeGrid { times }
    }

    /// Index of the last grid point `≤ t`.
    pub fn index_at_or_before(&self, t: f64) -> usize {
        self.times.partition_point(|&g| g <= t).saturating_sub(1)
    }

    /// Index of the last grid point `< t` (0 for `t ≤ 0`).
    pub fn index_before(&self, t: f64) -> usize {
        self.times.partition_point(|&g| g < t).saturating_sub(1)
    }
}

/// One atom `λ δ_f` of the Lévy measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpAtom {
    pub rate: f64,
    pub mark: DualVector,
}

impl JumpAtom {
    pub fn new(rate: f64, mark: DualVector) -> Self {
        Self { rate, mark }
    }
}

/// Characteristics `(m, Q, ν, ρ)` with `ν` finite and atomic.
#[derive(Debug, Clone, PartialEq)]
pub struct LevyCharacteristics {
    drift: DualVector,
    covariance: DMatrix<f64>,
    covariance_sqrt: DMatrix<f64>,
    atoms: Vec<JumpAtom>,
    small: Vec<bool>,
    rho_level: usize,
    small_jump_eps: Option<f64>,
}

impl LevyCharacteristics {
    /// Validates the characteristics and classifies every atom against the
    /// closed unit ball of `ρ'` (ties count as small).
    pub fn new(
        drift: DualVector,
        covariance: DMatrix<f64>,
        atoms: Vec<JumpAtom>,
        family: &SeminormFamily,
        rho_level: usize,
    ) -> Result<Self> {
        let n = drift.dim();
        check_dim(n, family.dim())?;
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: if covariance.nrows() != n { covariance.nrows() } else { covariance.ncols() },
            });
        }
        let covariance_sqrt = symmetric_psd_sqrt(&covariance)?;
        family.weights(rho_level)?;
        let mut small = Vec::with_capacity(atoms.len());
        for (i, atom) in atoms.iter().enumerate() {
            check_dim(n, atom.mark.dim())?;
            if !(atom.rate > 0.0) || !atom.rate.is_finite() {
                return Err(Error::Model(format!(
                    "jump atom {i}: rate must be positive and finite, got {}",
                    atom.rate
                )));
            }
            if atom.mark.is_zero() {
                return Err(Error::Model(format!("jump atom {i}: mark must be nonzero")));
            }
            small.push(family.dual_seminorm(rho_level, &atom.mark)? <= 1.0);
        }
        Ok(Self {
            drift,
            covariance,
            covariance_sqrt,
            atoms,
            small,
            rho_level,
            small_jump_eps: None,
        })
    }

    /// The characteristics of the zero process.
    pub fn zero(dim: usize) -> Self {
        Self {
            drift: DualVector::zeros(dim),
            covariance: DMatrix::zeros(dim, dim),
            covariance_sqrt: DMatrix::zeros(dim, dim),
            atoms: Vec::new(),
            small: Vec::new(),
            rho_level: 0,
            small_jump_eps: None,
        }
    }

    /// Marks the atom list as an `ε`-truncation of an infinite-activity
    /// measure. Results are then approximate.
    pub fn with_truncation(mut self, eps: f64) -> Self {
        self.small_jump_eps = Some(eps);
        self
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn drift(&self) -> &DualVector {
        &self.drift
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Symmetric square root of `Q`.
    pub fn covariance_sqrt(&self) -> &DMatrix<f64> {
        &self.covariance_sqrt
    }

    pub fn atoms(&self) -> &[JumpAtom] {
        &self.atoms
    }

    pub fn is_small(&self, atom: usize) -> bool {
        self.small[atom]
    }

    pub fn rho_level(&self) -> usize {
        self.rho_level
    }

    pub fn small_jump_eps(&self) -> Option<f64> {
        self.small_jump_eps
    }

    pub fn is_approximate(&self) -> bool {
        self.small_jump_eps.is_some()
    }

    pub fn has_wiener(&self) -> bool {
        self.covariance.iter().any(|&q| q != 0.0)
    }

    /// `Q(φ)² = φᵀ Q φ`.
    pub fn covariance_form(&self, phi: &DVector<f64>) -> f64 {
        phi.dot(&(&self.covariance * phi))
    }

    /// Compensator rate `Σ_small λ_i f_i`.
    pub fn compensator(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.dim());
        for (atom, _) in self.atoms.iter().zip(&self.small).filter(|(_, &s)| s) {
            c.axpy(atom.rate, atom.mark.as_vector(), 1.0);
        }
        c
    }

    /// `n = Σ_large λ_i f_i`, the mean rate of the large-jump part.
    pub fn large_jump_mean(&self) -> DualVector {
        let mut c = DVector::zeros(self.dim());
        for (atom, _) in self.atoms.iter().zip(&self.small).filter(|(_, &s)| !s) {
            c.axpy(atom.rate, atom.mark.as_vector(), 1.0);
        }
        DualVector::wrap(c)
    }

    /// Lévy–Khintchine exponent `E e^{i⟨L_t, φ⟩} = e^{t ξ(φ)}`.
    pub fn char_functional(&self, t: f64, phi: &TestFunction) -> Result<Complex64> {
        if !(t >= 0.0) {
            return Err(Error::Contract(format!("characteristic functional needs t ≥ 0, got {t}")));
        }
        Ok((self.exponent(phi)? * t).exp())
    }

    /// `ξ(φ) = i⟨m,φ⟩ − ½Q(φ)² + Σ_i λ_i (e^{i⟨f_i,φ⟩} − 1 − i⟨f_i,φ⟩·1_small)`.
    pub fn exponent(&self, phi: &TestFunction) -> Result<Complex64> {
        let mut xi = Complex64::new(
            -0.5 * self.covariance_form(phi.as_vector()),
            pairing(&self.drift, phi)?,
        );
        for (atom, &small) in self.atoms.iter().zip(&self.small) {
            let u = pairing(&atom.mark, phi)?;
            let mut term = Complex64::new(u.cos() - 1.0, u.sin());
            if small {
                term -= Complex64::new(0.0, u);
            }
            xi += term * atom.rate;
        }
        Ok(xi)
    }
}

/// Symmetric positive-semidefinite square root; rejects asymmetric input and
/// eigenvalues below `−1e-12·scale`.
pub fn symmetric_psd_sqrt(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = q.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::Model("covariance has non-finite entries".into()));
    }
    let asym = (q - q.transpose()).abs().max();
    if asym > 1e-12 * scale {
        return Err(Error::Model(format!("covariance is not symmetric (max asymmetry {asym:e})")));
    }
    if q.iter().all(|&x| x == 0.0) {
        return Ok(DMatrix::zeros(q.nrows(), q.ncols()));
    }
    let sym = (q + q.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -1e-12 * scale {
        return Err(Error::Model(format!(
            "covariance is not positive semidefinite (smallest eigenvalue {min})"
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Atoms approximating the radial measure `c·r^{−1−α} dr` along each
/// direction, truncated to `r ∈ [eps, r_max]` and binned into geometric
/// shells. Each shell becomes one atom whose rate is the shell mass and whose
/// radius preserves the shell's second moment.
pub fn radial_truncated_atoms(
    directions: &[DualVector],
    alpha: f64,
    intensity: f64,
    eps: f64,
    r_max: f64,
    shells: usize,
) -> Result<Vec<JumpAtom>> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(Error::Model(format!("radial exponent α must lie in (0, 2), got {alpha}")));
    }
    if !(eps > 0.0 && r_max > eps) || shells == 0 || !(intensity > 0.0) {
        return Err(Error::Model("radial truncation needs 0 < eps < r_max, shells ≥ 1, c > 0".into()));
    }
    let ratio = (r_max / eps).powf(1.0 / shells as f64);
    let mut atoms = Vec::new();
    for dir in directions {
        let norm = dir.as_vector().norm();
        if norm == 0.0 {
            return Err(Error::Model("radial direction must be nonzero".into()));
        }
        let unit = dir.as_vector() / norm;
        for i in 0..shells {
            let a = eps * ratio.powi(i as i32);
            let b = a * ratio;
            let mass = intensity * (a.powf(-alpha) - b.powf(-alpha)) / alpha;
            let second = intensity * (b.powf(2.0 - alpha) - a.powf(2.0 - alpha)) / (2.0 - alpha);
            let radius = (second / mass).sqrt();
            atoms.push(JumpAtom::new(mass, DualVector::wrap(&unit * radius)));
        }
    }
    Ok(atoms)
}

/// One jump of a simulated path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub time: f64,
    pub atom: usize,
}

/// Pieces of the Lévy–Itô decomposition at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct ItoComponents {
    pub drift: DualVector,
    pub wiener: DualVector,
    pub compensated_small: DualVector,
    pub large: DualVector,
}

impl ItoComponents {
    pub fn total(&self) -> DualVector {
        DualVector::wrap(
            self.drift.as_vector()
                + self.wiener.as_vector()
                + self.compensated_small.as_vector()
                + self.large.as_vector(),
        )
    }
}

/// A simulated path: grid Wiener increments plus an exact jump list.
#[derive(Debug, Clone, PartialEq)]
pub struct LevyPath {
    grid: TimeGrid,
    wiener_increments: Vec<DVector<f64>>,
    wiener_levels: Vec<DVector<f64>>,
    jumps: Vec<Jump>,
    seed: u64,
    refinements: u32,
}

const MAX_RESAMPLES: u64 = 64;

impl LevyPath {
    /// Simulates a path on `grid` from the substreams of `seed`.
    ///
    /// Wiener increments come from the `"wiener"` substream; the jump times of
    /// atom `i` are a rate-`λ_i` Poisson process drawn from substream
    /// `"jumps/i"`. A jump-time collision is resolved by redrawing the later
    /// atom from its next substream index.
    pub fn simulate(chars: &LevyCharacteristics, grid: &TimeGrid, seed: u64) -> Result<Self> {
        let n = chars.dim();
        let horizon = grid.horizon();
        let mut wiener_increments = Vec::with_capacity(grid.cells());
        if chars.has_wiener() {
            let mut rng = substream_rng(seed, "wiener", 0);
            for w in grid.times().windows(2) {
                let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                wiener_increments.push(chars.covariance_sqrt() * z * (w[1] - w[0]).sqrt());
            }
        } else {
            wiener_increments.resize(grid.cells(), DVector::zeros(n));
        }

        let mut attempts = vec![0u64; chars.atoms().len()];
        let mut per_atom: Vec<Vec<f64>> = chars
            .atoms()
            .iter()
            .enumerate()
            .map(|(i, a)| poisson_times(seed, i, 0, a.rate, horizon))
            .collect();
        let jumps = loop {
            let mut jumps: Vec<Jump> = per_atom
                .iter()
                .enumerate()
                .flat_map(|(atom, ts)| ts.iter().map(move |&time| Jump { time, atom }))
                .collect();
            jumps.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.atom.cmp(&b.atom)));
            match jumps.windows(2).find(|w| w[0].time == w[1].time) {
                None => break jumps,
                Some(w) => {
                    let atom = w[0].atom.max(w[1].atom);
                    attempts[atom] += 1;
                    if attempts[atom] > MAX_RESAMPLES {
                        return Err(Error::Model(format!(
                            "jump times of atom {atom} keep colliding after {MAX_RESAMPLES} redraws"
                        )));
                    }
                    per_atom[atom] =
                        poisson_times(seed, atom, attempts[atom], chars.atoms()[atom].rate, horizon);
                }
            }
        };

        Ok(Self::assemble(grid.clone(), wiener_increments, jumps, seed, 0))
    }

    fn assemble(
        grid: TimeGrid,
        wiener_increments: Vec<DVector<f64>>,
        jumps: Vec<Jump>,
        seed: u64,
        refinements: u32,
    ) -> Self {
        let n = wiener_increments.first().map_or(0, |w| w.len());
        let mut wiener_levels = Vec::with_capacity(grid.times().len());
        let mut acc = DVector::zeros(n);
        wiener_levels.push(acc.clone());
        for inc in &wiener_increments {
            acc += inc;
            wiener_levels.push(acc.clone());
        }
        Self { grid, wiener_increments, wiener_levels, jumps, seed, refinements }
    }

    /// The same path on the midpoint-refined grid. Wiener values at the old
    /// grid points are kept and the new midpoints are drawn from the Brownian
    /// bridge; jumps are unchanged.
    pub fn refine(&self, chars: &LevyCharacteristics) -> Result<Self> {
        check_dim(chars.dim(), self.dim())?;
        let n = self.dim();
        let level = self.refinements + 1;
        let mut rng = substream_rng(self.seed, "bridge", level as u64);
        let mut incs = Vec::with_capacity(2 * self.wiener_increments.len());
        for (w, inc) in self.grid.times().windows(2).zip(&self.wiener_increments) {
            let h = w[1] - w[0];
            if chars.has_wiener() {
                let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let xi = chars.covariance_sqrt() * z * (0.25 * h).sqrt();
                let half = inc * 0.5;
                incs.push(&half + &xi);
                incs.push(half - xi);
            } else {
                incs.push(DVector::zeros(n));
                incs.push(DVector::zeros(n));
            }
        }
        Ok(Self::assemble(self.grid.refine(), incs, self.jumps.clone(), self.seed, level))
    }

    pub fn dim(&self) -> usize {
        self.wiener_levels[0].len()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn jumps(&self) -> &[Jump] {
        &self.jumps
    }

    pub fn wiener_increments(&self) -> &[DVector<f64>] {
        &self.wiener_increments
    }

    /// `W` at the last grid point `≤ t`.
    pub fn wiener_at(&self, t: f64) -> &DVector<f64> {
        &self.wiener_levels[self.grid.index_at_or_before(t)]
    }

    /// `W_{t−}`: `W` at the last grid point `< t`.
    pub fn wiener_before(&self, t: f64) -> &DVector<f64> {
        &self.wiener_levels[self.grid.index_before(t)]
    }

    /// Sorted union of grid points and jump times.
    pub fn effective_times(&self) -> Vec<f64> {
        let mut times: Vec<f64> = self.grid.times().to_vec();
        times.extend(self.jumps.iter().map(|j| j.time));
        times.sort_by(f64::total_cmp);
        times.dedup();
        times
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon()).contains(&t) {
            return Err(Error::TimeOutOfRange { t, horizon: self.horizon() });
        }
        Ok(())
    }

    /// Decomposition at `t` (right-continuous).
    pub fn ito_components(&self, chars: &LevyCharacteristics, t: f64) -> Result<ItoComponents> {
        self.components(chars, t, false)
    }

    /// Decomposition of the left limit `L_{t−}`.
    pub fn ito_components_left(&self, chars: &LevyCharacteristics, t: f64) -> Result<ItoComponents> {
        self.components(chars, t, true)
    }

    fn components(&self, chars: &LevyCharacteristics, t: f64, left: bool) -> Result<ItoComponents> {
        check_dim(chars.dim(), self.dim())?;
        self.check_time(t)?;
        let n = self.dim();
        let mut small = chars.compensator() * (-t);
        let mut large = DVector::zeros(n);
        for j in &self.jumps {
            if j.time > t || (left && j.time == t) {
                break;
            }
            let mark = chars.atoms()[j.atom].mark.as_vector();
            if chars.is_small(j.atom) {
                small += mark;
            } else {
                large += mark;
            }
        }
        let wiener = if left { self.wiener_before(t) } else { self.wiener_at(t) };
        Ok(ItoComponents {
            drift: DualVector::wrap(chars.drift().as_vector() * t),
            wiener: DualVector::wrap(wiener.clone()),
            compensated_small: DualVector::wrap(small),
            large: DualVector::wrap(large),
        })
    }

    /// `L_t`.
    pub fn evaluate(&self, chars: &LevyCharacteristics, t: f64) -> Result<DualVector> {
        Ok(self.ito_components(chars, t)?.total())
    }

    /// `L_{t−}`.
    pub fn evaluate_left_limit(&self, chars: &LevyCharacteristics, t: f64) -> Result<DualVector> {
        Ok(self.ito_components_left(chars, t)?.total())
    }
}

fn poisson_times(seed: u64, atom: usize, attempt: u64, rate: f64, horizon: f64) -> Vec<f64> {
    let mut rng = substream_rng(seed, &format!("jumps/{atom}"), attempt);
    let exp = Exp::new(rate).expect("rate validated positive");
    let mut times = Vec::new();
    let mut t = 0.0;
    loop {
        t += exp.sample(&mut rng);
        if t > horizon {
            break;
        }
        if t > 0.0 {
            times.push(t);
        }
    }
    times
}

/// Monte Carlo estimate of `E e^{iuX}` with componentwise standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharEstimate {
    pub estimate: Complex64,
    pub stderr_re: f64,
    pub stderr_im: f64,
    /// `sqrt(stderr_re² + stderr_im²)`, the standard error of the modulus of
    /// the estimation error.
    pub stderr: f64,
}

pub fn empirical_char(samples: &[f64], u: f64) -> Result<CharEstimate> {
    if samples.len() < 2 {
        return Err(Error::Contract(format!(
            "empirical characteristic function needs ≥ 2 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let (mut sr, mut si) = (0.0, 0.0);
    for &x in samples {
        sr += (u * x).cos();
        si += (u * x).sin();
    }
    let (mr, mi) = (sr / n, si / n);
    let (mut vr, mut vi) = (0.0, 0.0);
    for &x in samples {
        vr += ((u * x).cos() - mr).powi(2);
        vi += ((u * x).sin() - mi).powi(2);
    }
    let stderr_re = (vr / (n - 1.0) / n).sqrt();
    let stderr_im = (vi / (n - 1.0) / n).sqrt();
    Ok(CharEstimate {
        estimate: Complex64::new(mr, mi),
        stderr_re,
        stderr_im,
        stderr: stderr_re.hypot(stderr_im),
    })
}
