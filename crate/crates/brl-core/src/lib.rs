//! Numerical laboratory for random Schrodinger operators on the Bethe strip.
//!
//! The crate computes Green functions of `H = adjacency + A + lambda V(x)`
//! on finite rooted `(K, W)` trees by exact block recursions, estimates the
//! slowest Lyapunov exponent and fractional moments of off-diagonal Green
//! blocks by population dynamics, counts resonance events on spheres, and
//! classifies energies by the delocalization criterion `L(E) < log K`.
//!
//! Modules build on one another in this order: [`linalg`] (dense block
//! kernels), [`rng`] (splittable streams), [`ensembles`] (disorder laws),
//! [`tree`] and [`pool`] (Green-function recursions on trees and the
//! population-dynamics pool), [`lyapunov`], [`fracmom`], [`resonance`]
//! (estimators and statistics).

pub mod ensembles;
pub mod fracmom;
pub mod linalg;
pub mod lyapunov;
pub mod pool;
pub mod resonance;
pub mod rng;
pub mod tree;
