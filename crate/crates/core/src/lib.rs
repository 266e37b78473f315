//! Simulation and verification toolkit for Lévy-driven linear stochastic
//! evolution equations (generalized Langevin / Ornstein–Uhlenbeck equations)
//! on finite spectral truncations of nuclear-space models.
//!
//! Every object lives in a fixed orthonormal coefficient basis of length `N`:
//! test functions and dual vectors are coefficient vectors, the topology is a
//! weighted ℓ² seminorm hierarchy, and the driving Lévy process has finitely
//! many jump atoms so that jump times are simulated exactly.
//!
//! Module map:
//!
//! * [`spectral_space`] – coefficient vectors, pairing, seminorm hierarchy.
//! * [`levy`] – characteristics, exact path simulation, Lévy–Itô pieces,
//!   characteristic functional.
//! * [`evolution`] – backward evolution systems `U(s,t)` and their residuals.
//! * [`stochint`] – drift / Wiener / compensated-Poisson / Poisson integrals.
//! * [`ou_solver`] – stochastic convolution, mild and càdlàg solutions,
//!   weak-solution, Fubini, flow and moment diagnostics.
//! * [`convergence`] – sequences of problems, f.d.d. distances, the `F` map
//!   and a Skorokhod J1 upper bound.

pub mod convergence;
pub mod ensemble;
pub mod error;
pub mod evolution;
pub mod levy;
pub mod ou_solver;
pub mod path;
pub mod quadrature;
pub mod seeding;
pub mod spectral_space;
pub mod stochint;

pub use error::{Error, Result};
pub use evolution::{EvolutionSystem, GeneratorFamily};
pub use levy::{JumpAtom, LevyCharacteristics, LevyPath, TimeGrid};
pub use ou_solver::{InitialCondition, SeeProblem, SolutionPath};
pub use quadrature::Quadrature;
pub use spectral_space::{DualVector, SeminormFamily, TestFunction};
pub use stochint::{IntegralPath, IntegrandR};
