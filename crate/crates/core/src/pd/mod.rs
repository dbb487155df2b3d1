//! Full-order projective dynamics.
//!
//! Each frame starts from the inertial prediction `s = q + δt v + δt² g` and
//! alternates a local step (project every constraint at the current iterate)
//! with a global step (solve the prefactored `A q = b` for all three
//! coordinate columns).

mod constraint;
mod solver;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{lumped_mass_matrix, MassMatrix, Mesh, MeshError};
use crate::scalar::Real;
use crate::sparse::FactorError;

pub use constraint::{
    build_constraints, closest_rotation, Constraint, ConstraintConfig, ConstraintKind,
    ConstraintSet,
};
pub use solver::{
    assemble_global, gravity_target, inertia_target, objective, step, step_observed,
    PrefactoredSystem, StepObserver,
};
pub(crate) use solver::{all_finite, assemble_rhs, project_all};

#[derive(Debug, Error)]
pub enum PdError {
    #[error("constraint set is empty; pass allow_unconstrained to simulate free motion")]
    EmptyConstraintSet,
    #[error("anchor vertex {vertex} out of range for {n} vertices")]
    InvalidAnchor { vertex: usize, n: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("global matrix factorization failed: {0}")]
    Factor(#[from] FactorError),
    #[error("simulation diverged (non-finite state) at frame {frame}, iteration {iteration}")]
    Divergence { frame: usize, iteration: usize },
    #[error("state has {got} rows, system expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Time stepping parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Time step in seconds.
    pub dt: f64,
    /// Local/global alternations per frame.
    pub iterations: usize,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    /// kg/m³ (kg/m² for surface meshes).
    #[serde(default = "default_density")]
    pub density: f64,
}

fn default_gravity() -> [f64; 3] {
    [0.0, -9.81, 0.0]
}

fn default_density() -> f64 {
    1000.0
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 60.0,
            iterations: 10,
            gravity: default_gravity(),
            density: default_density(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), PdError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(PdError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if self.iterations == 0 {
            return Err(PdError::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(PdError::InvalidConfig(format!(
                "density must be positive, got {}",
                self.density
            )));
        }
        if self.gravity.iter().any(|g| !g.is_finite()) {
            return Err(PdError::InvalidConfig("gravity must be finite".into()));
        }
        Ok(())
    }

    pub fn gravity_vector<T: Real>(&self) -> Vector3<T> {
        Vector3::new(
            T::lit(self.gravity[0]),
            T::lit(self.gravity[1]),
            T::lit(self.gravity[2]),
        )
    }
}

/// Positions and velocities after `frame` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState<T: Real> {
    pub q: DMatrix<T>,
    pub v: DMatrix<T>,
    pub frame: usize,
}

impl<T: Real> SimState<T> {
    pub fn at_rest(mesh: &Mesh<T>) -> Self {
        Self::new(mesh.vertices().clone())
    }

    pub fn new(q: DMatrix<T>) -> Self {
        let v = DMatrix::zeros(q.nrows(), 3);
        Self { q, v, frame: 0 }
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.q) && all_finite(&self.v)
    }
}

/// Mesh, masses, constraints and the factorized system bundled for stepping.
#[derive(Debug, Clone)]
pub struct FullSolver<T: Real> {
    pub mass: MassMatrix<T>,
    pub constraints: ConstraintSet<T>,
    pub system: PrefactoredSystem<T>,
    pub config: SolverConfig,
}

impl<T: Real> FullSolver<T> {
    pub fn new(
        mesh: &Mesh<T>,
        config: &SolverConfig,
        constraints: &ConstraintConfig,
    ) -> Result<Self, PdError> {
        config.validate()?;
        let mass = lumped_mass_matrix(mesh, T::lit(config.density))?;
        let constraints = build_constraints(mesh, constraints)?;
        Self::from_parts(mass, constraints, config)
    }

    pub fn from_parts(
        mass: MassMatrix<T>,
        constraints: ConstraintSet<T>,
        config: &SolverConfig,
    ) -> Result<Self, PdError> {
        config.validate()?;
        let system = assemble_global(&mass, &constraints, T::lit(config.dt))?;
        Ok(Self {
            mass,
            constraints,
            system,
            config: config.clone(),
        })
    }

    pub fn step(&self, state: &SimState<T>) -> Result<SimState<T>, PdError> {
        step(state, &self.system, &self.constraints, &self.config)
    }

    pub fn step_observed<O: StepObserver<T>>(
        &self,
        state: &SimState<T>,
        observer: &mut O,
    ) -> Result<SimState<T>, PdError> {
        step_observed(state, &self.system, &self.constraints, &self.config, observer)
    }
}
