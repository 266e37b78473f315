//! Coefficient model of a nuclear space, its dual, and the weighted Hilbertian
//! seminorm hierarchy.
//!
//! A test function `φ` and a dual vector `f` are both length-`N` coefficient
//! vectors in a fixed orthonormal basis; the canonical pairing is the
//! coordinate dot product. Level `r` of a [`SeminormFamily`] carries a weight
//! vector `w^(r)` and defines
//!
//! ```text
//! p_r(φ)  = sqrt(Σ_k w^(r)_k φ_k²)
//! p'_r(f) = sqrt(Σ_k f_k² / w^(r)_k)
//! ```
//!
//! Weights increase with the level, so `p_r ≤ p_s` and `p'_r ≥ p'_s` for
//! `r ≤ s`.

use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

macro_rules! coefficient_vector {
    ($name:ident, $what:literal) => {
        #[doc = concat!("Coefficient vector of a ", $what, ".")]
        #[derive(Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name(DVector<f64>);

        impl $name {
            /// Builds a vector, rejecting empty input and non-finite entries.
            pub fn new(coeffs: Vec<f64>) -> Result<Self> {
                Self::from_vector(DVector::from_vec(coeffs))
            }

            pub fn from_vector(v: DVector<f64>) -> Result<Self> {
                if v.is_empty() {
                    return Err(Error::Contract(concat!($what, " must have dimension ≥ 1").into()));
                }
                if let Some(k) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Model(format!(
                        concat!($what, " coefficient {} is not finite ({})"),
                        k, v[k]
                    )));
                }
                Ok(Self(v))
            }

            /// Wraps a vector produced by internal arithmetic.
            pub(crate) fn wrap(v: DVector<f64>) -> Self {
                Self(v)
            }

            pub fn zeros(dim: usize) -> Self {
                Self(DVector::zeros(dim))
            }

            /// The `k`-th unit basis vector.
            pub fn unit(dim: usize, k: usize) -> Self {
                let mut v = DVector::zeros(dim);
                v[k] = 1.0;
                Self(v)
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn as_vector(&self) -> &DVector<f64> {
                &self.0
            }

            pub fn into_vector(self) -> DVector<f64> {
                self.0
            }

            pub fn coeffs(&self) -> &[f64] {
                self.0.as_slice()
            }

            pub fn is_zero(&self) -> bool {
                self.0.iter().all(|&x| x == 0.0)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "{:?}"), self.0.as_slice())
            }
        }
    };
}

coefficient_vector!(TestFunction, "test function");
coefficient_vector!(DualVector, "dual vector");

/// Canonical pairing `⟨f, φ⟩ = Σ_k f_k φ_k`.
pub fn pairing(f: &DualVector, phi: &TestFunction) -> Result<f64> {
    check_dim(f.dim(), phi.dim())?;
    Ok(f.0.dot(&phi.0))
}

/// Increasing hierarchy of weighted Hilbertian seminorms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeminormFamily {
    levels: Vec<DVector<f64>>,
}

impl SeminormFamily {
    /// Hermite-type profile `w^(r)_k = (2k + d)^(2r)` for `r = 0..=r_max`.
    ///
    /// `d ≥ 1` keeps every base `2k + d ≥ 1`, which is what makes the weights
    /// nondecreasing in `r`.
    pub fn hermite(dim: usize, d: f64, r_max: usize) -> Result<Self> {
        if !(d >= 1.0) || !d.is_finite() {
            return Err(Error::Model(format!("hermite profile needs d ≥ 1, got {d}")));
        }
        let levels = (0..=r_max)
            .map(|r| DVector::from_fn(dim, |k, _| (2.0 * k as f64 + d).powi(2 * r as i32)))
            .collect();
        Self::from_levels(levels)
    }

    /// Explicit weight table, one row per level.
    pub fn from_weights(levels: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_levels(levels.into_iter().map(DVector::from_vec).collect())
    }

    fn from_levels(levels: Vec<DVector<f64>>) -> Result<Self> {
        let Some(first) = levels.first() else {
            return Err(Error::Model("seminorm family needs at least one level".into()));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::Contract("seminorm family dimension must be ≥ 1".into()));
        }
        for (r, w) in levels.iter().enumerate() {
            check_dim(dim, w.len())?;
            if let Some(k) = w.iter().position(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::Model(format!(
                    "weight w^({r})_{k} = {} is not strictly positive and finite",
                    w[k]
                )));
            }
            if r > 0 {
                let prev = &levels[r - 1];
                if let Some(k) = (0..dim).find(|&k| w[k] < prev[k]) {
                    return Err(Error::Model(format!(
                        "weights decrease from level {} to {r} at coordinate {k}",
                        r - 1
                    )));
                }
            }
        }
        Ok(Self { levels })
    }

    pub fn dim(&self) -> usize {
        self.levels[0].len()
    }

    pub fn max_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn weights(&self, level: usize) -> Result<&DVector<f64>> {
        self.levels.get(level).ok_or(Error::LevelOutOfRange {
            level,
            max: self.max_level(),
        })
    }

    pub fn seminorm(&self, level: usize, phi: &TestFunction) -> Result<f64> {
        self.seminorm_of(level, phi.as_vector())
    }

    pub fn dual_seminorm(&self, level: usize, f: &DualVector) -> Result<f64> {
        self.dual_seminorm_of(level, f.as_vector())
    }

    pub(crate) fn seminorm_of(&self, level: usize, v: &DVector<f64>) -> Result<f64> {
        let w = self.weights(level)?;
        check_dim(w.len(), v.len())?;
        Ok(w.iter().zip(v.iter()).map(|(w, x)| w * x * x).sum::<f64>().sqrt())
    }

    pub(crate) fn dual_seminorm_of(&self, level: usize, v: &DVector<f64>) -> Result<f64> {
        let w = self.weights(level)?;
        check_dim(w.len(), v.len())?;
        Ok(w.iter().zip(v.iter()).map(|(w, x)| x * x / w).sum::<f64>().sqrt())
    }

    /// Hilbert–Schmidt norm of the inclusion from level `q` into level `p`:
    /// `sqrt(Σ_k w^(p)_k / w^(q)_k)`.
    pub fn hs_embedding_norm(&self, p: usize, q: usize) -> Result<f64> {
        if p > q {
            return Err(Error::Ordering(format!(
                "embedding needs p ≤ q, got p = {p}, q = {q}"
            )));
        }
        let wp = self.weights(p)?;
        let wq = self.weights(q)?;
        Ok(wp.iter().zip(wq.iter()).map(|(a, b)| a / b).sum::<f64>().sqrt())
    }

    /// The functional attaining `p'_r(f)·p_r(φ) = ⟨f, φ⟩`, i.e. `W^(r)φ / p_r(φ)`.
    pub fn norming_functional(&self, level: usize, phi: &TestFunction) -> Result<DualVector> {
        let w = self.weights(level)?;
        check_dim(w.len(), phi.dim())?;
        let norm = self.seminorm(level, phi)?;
        if norm == 0.0 {
            return Ok(DualVector::zeros(phi.dim()));
        }
        Ok(DualVector::wrap(phi.as_vector().component_mul(w) / norm))
    }
}
