//! Composite and adaptive Simpson rules.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Rule used for the deterministic `ds` integrals along a path.
///
/// `Simpson { panels }` applies composite Simpson with `panels` panels on every
/// cell of the effective grid. `Exponential` integrates the exponential kernel
/// in closed form; it requires a diagonal time-homogeneous evolution system and
/// a constant integrand, and callers fall back to Simpson otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Quadrature {
    Simpson { panels: usize },
    Exponential,
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature::Simpson { panels: 1 }
    }
}

impl Quadrature {
    pub fn panels(&self) -> usize {
        match *self {
            Quadrature::Simpson { panels } => panels.max(1),
            Quadrature::Exponential => 1,
        }
    }
}

/// Composite Simpson with `panels` panels of width `(b - a) / panels`.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    if a == b {
        return 0.0;
    }
    let n = panels.max(1);
    let h = (b - a) / n as f64;
    let mut acc = 0.0;
    let mut left = f(a);
    for i in 0..n {
        let x0 = a + i as f64 * h;
        let x1 = if i + 1 == n { b } else { x0 + h };
        let right = f(x1);
        acc += left + 4.0 * f(0.5 * (x0 + x1)) + right;
        left = right;
    }
    acc * h / 6.0
}

/// Vector-valued composite Simpson. `dim` is the length of the result, used
/// when `a == b`.
pub fn simpson_vec<F: FnMut(f64) -> DVector<f64>>(
    mut f: F,
    a: f64,
    b: f64,
    panels: usize,
    dim: usize,
) -> DVector<f64> {
    let mut acc = DVector::zeros(dim);
    if a == b {
        return acc;
    }
    let n = panels.max(1);
    let h = (b - a) / n as f64;
    let mut left = f(a);
    for i in 0..n {
        let x0 = a + i as f64 * h;
        let x1 = if i + 1 == n { b } else { x0 + h };
        let right = f(x1);
        acc += &left + f(0.5 * (x0 + x1)) * 4.0 + &right;
        left = right;
    }
    acc * (h / 6.0)
}

/// Adaptive Simpson with Richardson correction; absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    adaptive_step(f, a, b, fa, fm, fb, whole, tol.max(1e-300), 48)
}

#[allow(clippy::too_many_arguments)]
fn adaptive_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    adaptive_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + adaptive_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// `(e^z - 1) / z`, continuous at zero.
pub fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0
    } else {
        z.exp_m1() / z
    }
}

/// `(e^z - 1 - z) / z²`, continuous at zero.
pub fn phi2(z: f64) -> f64 {
    if z.abs() < 0.1 {
        // Σ_k z^k / (k + 2)!
        let mut term = 0.5;
        let mut acc = 0.5;
        for k in 1..14 {
            term *= z / (k + 2) as f64;
            acc += term;
        }
        acc
    } else {
        (z.exp_m1() - z) / (z * z)
    }
}
