use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix3, Vector3};
use rayon::prelude::*;

use super::{ConstraintSet, PdError, SimState, SolverConfig};
use crate::mesh::MassMatrix;
use crate::scalar::Real;
use crate::sparse::{CscMatrix, SparseCholesky};

/// Hooks into the local/global loop. All methods default to no-ops.
pub trait StepObserver<T: Real> {
    /// Called after the global solve of each alternation with the new iterate.
    fn iteration(&mut self, _iteration: usize, _q: &DMatrix<T>, _s: &DMatrix<T>) {}
    /// Wall time of the global phase of one alternation.
    fn global_solve(&mut self, _elapsed: Duration) {}
    /// Whether [`reduced_residual`](Self::reduced_residual) should be computed.
    fn wants_residual(&self) -> bool {
        false
    }
    /// `‖E_r q̃ − r‖_max / ‖r‖_max` of a reduced global solve.
    fn reduced_residual(&mut self, _relative: T) {}
}

impl<T: Real> StepObserver<T> for () {}

/// `A = M/δt² + Σ ω_j S_jᵀS_j`, assembled once and factorized.
#[derive(Debug, Clone)]
pub struct PrefactoredSystem<T: Real> {
    matrix: CscMatrix<T>,
    factor: SparseCholesky<T>,
    mass: MassMatrix<T>,
    dt: T,
}

impl<T: Real> PrefactoredSystem<T> {
    pub fn matrix(&self) -> &CscMatrix<T> {
        &self.matrix
    }

    pub fn factor(&self) -> &SparseCholesky<T> {
        &self.factor
    }

    pub fn mass(&self) -> &MassMatrix<T> {
        &self.mass
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn solve(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.factor.solve3(b)
    }

    /// `M s / δt²`, the inertial part of the right-hand side.
    pub fn inertial_rhs(&self, s: &DMatrix<T>) -> DMatrix<T> {
        let inv = T::one() / (self.dt * self.dt);
        let mut b = self.mass.apply(s);
        b *= inv;
        b
    }
}

pub fn assemble_global<T: Real>(
    mass: &MassMatrix<T>,
    constraints: &ConstraintSet<T>,
    dt: T,
) -> Result<PrefactoredSystem<T>, PdError> {
    if !(dt > T::zero()) {
        return Err(PdError::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    let n = mass.len();
    for c in constraints {
        if let Some(&v) = c.vertices().iter().find(|&&v| v >= n) {
            return Err(PdError::InvalidAnchor { vertex: v, n });
        }
    }
    let inv = T::one() / (dt * dt);
    let mut trip = Vec::with_capacity(n + 16 * constraints.len());
    for (i, &m) in mass.diag().iter().enumerate() {
        trip.push((i, i, m * inv));
    }
    for c in constraints {
        c.push_gram(&mut trip);
    }
    let matrix = CscMatrix::from_triplets(n, n, &trip);
    let factor = SparseCholesky::factor(&matrix)?;
    Ok(PrefactoredSystem {
        matrix,
        factor,
        mass: mass.clone(),
        dt,
    })
}

/// `s = q + δt v + δt² M⁻¹ f_ext`.
pub fn inertia_target<T: Real>(
    state: &SimState<T>,
    f_ext: &DMatrix<T>,
    mass: &MassMatrix<T>,
    dt: T,
) -> DMatrix<T> {
    let mut s = &state.q + &state.v * dt;
    let dt2 = dt * dt;
    for (i, &m) in mass.diag().iter().enumerate() {
        for c in 0..3 {
            s[(i, c)] += dt2 * f_ext[(i, c)] / m;
        }
    }
    s
}

/// Inertia target for a uniform gravitational field (`f_ext = M g`).
pub fn gravity_target<T: Real>(state: &SimState<T>, gravity: &Vector3<T>, dt: T) -> DMatrix<T> {
    let mut s = &state.q + &state.v * dt;
    let dt2 = dt * dt;
    for c in 0..3 {
        s.column_mut(c).add_scalar_mut(dt2 * gravity[c]);
    }
    s
}

/// `(1/(2δt²))‖M^{1/2}(q − s)‖²_F + Σ_j (ω_j/2)‖S_j q − p_j(q)‖²_F`.
///
/// The global matrix `A` is the Hessian of this function at fixed
/// projections, so every local/global alternation is non-increasing in it.
pub fn objective<T: Real>(
    q: &DMatrix<T>,
    s: &DMatrix<T>,
    mass: &MassMatrix<T>,
    constraints: &ConstraintSet<T>,
    dt: T,
) -> T {
    let mut inertia = T::zero();
    for (i, &m) in mass.diag().iter().enumerate() {
        let mut d2 = T::zero();
        for c in 0..3 {
            let d = q[(i, c)] - s[(i, c)];
            d2 += d * d;
        }
        inertia += m * d2;
    }
    inertia / (T::lit(2.0) * dt * dt) + constraints.energy(q)
}

/// Local step: every projection at `q`, computed in parallel, gathered in
/// constraint order.
pub(crate) fn project_all<T: Real>(constraints: &ConstraintSet<T>, q: &DMatrix<T>) -> Vec<Matrix3<T>> {
    constraints.as_slice().par_iter().map(|c| c.project(q)).collect()
}

/// `base + Σ ω_j S_jᵀ p_j`, accumulated sequentially in constraint order.
pub(crate) fn assemble_rhs<T: Real>(
    base: &DMatrix<T>,
    constraints: &ConstraintSet<T>,
    projections: &[Matrix3<T>],
) -> DMatrix<T> {
    let mut b = base.clone();
    for (c, p) in constraints.iter().zip(projections) {
        c.scatter_rhs(p, &mut b);
    }
    b
}

pub(crate) fn all_finite<T: Real>(m: &DMatrix<T>) -> bool {
    m.iter().all(|x| x.is_finite_val())
}

/// One frame of full-space projective dynamics.
pub fn step<T: Real>(
    state: &SimState<T>,
    system: &PrefactoredSystem<T>,
    constraints: &ConstraintSet<T>,
    config: &SolverConfig,
) -> Result<SimState<T>, PdError> {
    step_observed(state, system, constraints, config, &mut ())
}

pub fn step_observed<T: Real, O: StepObserver<T>>(
    state: &SimState<T>,
    system: &PrefactoredSystem<T>,
    constraints: &ConstraintSet<T>,
    config: &SolverConfig,
    observer: &mut O,
) -> Result<SimState<T>, PdError> {
    let n = system.dim();
    if state.q.nrows() != n || state.v.nrows() != n {
        return Err(PdError::DimensionMismatch {
            expected: n,
            got: state.q.nrows(),
        });
    }
    let dt = system.dt();
    let s = gravity_target(state, &config.gravity_vector(), dt);
    let inertial = system.inertial_rhs(&s);
    let frame = state.frame + 1;

    let mut q = s.clone();
    let mut work = vec![[T::zero(); 3]; n];
    for it in 0..config.iterations {
        let projections = project_all(constraints, &q);
        let b = assemble_rhs(&inertial, constraints, &projections);
        let t0 = Instant::now();
        system.factor.solve3_into(&b, &mut work, &mut q);
        observer.global_solve(t0.elapsed());
        if !all_finite(&q) {
            return Err(PdError::Divergence {
                frame,
                iteration: it,
            });
        }
        observer.iteration(it, &q, &s);
    }
    let v = (&q - &state.q) / dt;
    if !all_finite(&v) {
        return Err(PdError::Divergence {
            frame,
            iteration: config.iterations,
        });
    }
    Ok(SimState { q, v, frame })
}
