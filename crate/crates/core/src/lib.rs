//! Projective dynamics with snapshot-based reduced subspaces.
//!
//! The crate covers the whole pipeline: tetrahedral or surface meshes with
//! lumped masses ([`mesh`]), a prefactored local/global projective dynamics
//! solver ([`pd`]), snapshot recording and mass weighting ([`snapshots`]),
//! localized mass-weighted PCA and SPLOCS bases ([`basis`]), the reduced
//! solver that swaps the sparse global solve for a dense `k × k` one
//! ([`reduced`]), and the timing/accuracy harness behind the CLI ([`bench`]).
//!
//! All numerics are generic over [`Real`] (`f32` or `f64`). The aliases at the
//! crate root fix the scalar to `f64`, which is what the CLI and archives use.

pub mod mesh;
pub mod basis;
pub mod bench;
pub mod config;
mod linalg;
pub mod pd;
pub mod reduced;
pub mod sparse;
pub mod scalar;
pub mod snapshots;

pub use scalar::Real;

pub type Mesh = mesh::Mesh<f64>;
pub type MassMatrix = mesh::MassMatrix<f64>;
pub type SimState = pd::SimState<f64>;
pub type FullSolver = pd::FullSolver<f64>;
pub type ConstraintSet = pd::ConstraintSet<f64>;
pub type SnapshotSet = snapshots::SnapshotSet<f64>;
pub type Basis = basis::Basis<f64>;
pub type ReducedSystem = reduced::ReducedSystem<f64>;
pub type ReducedState = reduced::ReducedState<f64>;
