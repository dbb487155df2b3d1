//! Subspace projective dynamics.
//!
//! Positions are expanded as `q = q̄ + U q̃` around the basis mean shape.
//! Substituting into the global system gives the dense `k × k` problem
//! `(UᵀAU) q̃ = Uᵀb − UᵀA q̄`, factorized once. The local step still projects
//! every constraint at the lifted full-space positions and velocities stay in
//! full space.

use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};
use thiserror::Error;

use crate::basis::{Basis, BasisError};
use crate::linalg;
use crate::mesh::MassMatrix;
use crate::pd::{
    all_finite, assemble_rhs, gravity_target, project_all, ConstraintSet, PrefactoredSystem,
    SimState, SolverConfig, StepObserver,
};
use crate::scalar::Real;
use crate::sparse::CscMatrix;

/// Largest accepted condition number of `UᵀAU`.
pub const MAX_CONDITION: f64 = 1e12;

/// Bases with at most this fraction of nonzeros project through a
/// compressed-column copy of `U`.
pub const SPARSE_PROJECTION_DENSITY: f64 = 0.25;

#[derive(Debug, Error)]
pub enum ReducedError {
    #[error("basis has {basis} vertices, system has {system}")]
    DimensionMismatch { basis: usize, system: usize },
    #[error("reduced matrix for k = {k} is ill-conditioned (condition estimate {condition:.3e})")]
    IllConditioned { k: usize, condition: f64 },
    #[error("reduced simulation diverged (non-finite state) at frame {frame}, iteration {iteration}")]
    Divergence { frame: usize, iteration: usize },
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// `E_r = UᵀAU` with its factorization and the pieces needed for right-hand sides.
#[derive(Debug, Clone)]
pub struct ReducedSystem<T: Real> {
    u: DMatrix<T>,
    sparse_u: Option<CscMatrix<T>>,
    mean_shape: DMatrix<T>,
    matrix: DMatrix<T>,
    factor: Cholesky<T, Dyn>,
    projector: Cholesky<T, Dyn>,
    mass_u: DMatrix<T>,
    mean_term: DMatrix<T>,
    mass: MassMatrix<T>,
    dt: T,
    condition: T,
}

pub fn reduce_system<T: Real>(
    system: &PrefactoredSystem<T>,
    basis: &Basis<T>,
) -> Result<ReducedSystem<T>, ReducedError> {
    let n = system.dim();
    if basis.num_vertices() != n {
        return Err(ReducedError::DimensionMismatch {
            basis: basis.num_vertices(),
            system: n,
        });
    }
    let u = basis.u().clone();
    let k = u.ncols();
    let a = system.matrix();
    let au = a.mul_dense(&u);
    let mut e = linalg::tr_mul(&u, &au);
    let et = e.transpose();
    e = (e + et) * T::lit(0.5);

    let ill = |condition: f64| ReducedError::IllConditioned { k, condition };
    let eig = SymmetricEigen::new(e.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((T::infinity(), -T::infinity()), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(lo > T::zero()) {
        return Err(ill(f64::INFINITY));
    }
    let condition = hi / lo;
    if condition.to_f64_lossy() > MAX_CONDITION {
        return Err(ill(condition.to_f64_lossy()));
    }
    let factor = e.clone().cholesky().ok_or_else(|| ill(f64::INFINITY))?;

    let mass = system.mass().clone();
    let mass_u = mass.apply(&u);
    let projector = linalg::tr_mul(&u, &mass_u)
        .cholesky()
        .ok_or(ReducedError::Basis(BasisError::Singular))?;
    let mean_shape = basis.mean_shape().clone();
    let mean_term = linalg::tr_mul(&u, &a.mul_dense(&mean_shape));
    let nonzeros = u.iter().filter(|&&x| x != T::zero()).count();
    let sparse_u = (nonzeros as f64 <= SPARSE_PROJECTION_DENSITY * u.len() as f64)
        .then(|| CscMatrix::from_dense(&u));
    Ok(ReducedSystem {
        u,
        sparse_u,
        mean_shape,
        matrix: e,
        factor,
        projector,
        mass_u,
        mean_term,
        mass,
        dt: system.dt(),
        condition,
    })
}

impl<T: Real> ReducedSystem<T> {
    pub fn k(&self) -> usize {
        self.u.ncols()
    }

    pub fn num_vertices(&self) -> usize {
        self.u.nrows()
    }

    /// `UᵀAU`.
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn condition(&self) -> T {
        self.condition
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn mean_shape(&self) -> &DMatrix<T> {
        &self.mean_shape
    }

    /// `q̄ + U q̃`.
    pub fn lift(&self, reduced: &DMatrix<T>) -> DMatrix<T> {
        let mut q = linalg::mul(&self.u, reduced);
        q += &self.mean_shape;
        q
    }

    /// Coordinates of the M-orthogonal projection of `q − q̄` onto span(U).
    pub fn project(&self, q: &DMatrix<T>) -> DMatrix<T> {
        let dev = q - &self.mean_shape;
        self.projector.solve(&linalg::tr_mul(&self.mass_u, &dev))
    }

    /// `Uᵀb − UᵀA q̄`, the right-hand side for the deviation `q̃`.
    pub fn reduced_rhs(&self, b: &DMatrix<T>) -> DMatrix<T> {
        let mut r = match &self.sparse_u {
            Some(u) => u.tr_mul_dense(b),
            None => project_columns(&self.u, b),
        };
        r -= &self.mean_term;
        r
    }

    /// Solves `E_r q̃ = r`.
    pub fn solve(&self, rhs: &DMatrix<T>) -> DMatrix<T> {
        self.factor.solve(rhs)
    }
}

/// `Uᵀ b` for a three-column `b`, reading `U` once. Four columns of `U` share
/// each load of `b`.
fn project_columns<T: Real>(u: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let n = u.nrows();
    let k = u.ncols();
    let (bx, rest) = b.as_slice().split_at(n);
    let (by, bz) = rest.split_at(n);
    let us = u.as_slice();
    let col = |j: usize| &us[j * n..(j + 1) * n];
    let mut out = DMatrix::zeros(k, 3);
    let even = n - n % 2;
    let mut j = 0;
    while j + 4 <= k {
        let c = [col(j), col(j + 1), col(j + 2), col(j + 3)];
        let mut acc = [[T::zero(); 2]; 12];
        for i in (0..even).step_by(2) {
            for l in 0..2 {
                let (x, y, z) = (bx[i + l], by[i + l], bz[i + l]);
                for m in 0..4 {
                    let v = c[m][i + l];
                    acc[3 * m][l] += v * x;
                    acc[3 * m + 1][l] += v * y;
                    acc[3 * m + 2][l] += v * z;
                }
            }
        }
        for m in 0..4 {
            let v = if even < n { c[m][even] } else { T::zero() };
            let tail = if even < n { [bx[even], by[even], bz[even]] } else { [T::zero(); 3] };
            for d in 0..3 {
                out[(j + m, d)] = acc[3 * m + d][0] + acc[3 * m + d][1] + v * tail[d];
            }
        }
        j += 4;
    }
    for j in j..k {
        let c = col(j);
        let mut acc = [T::zero(); 3];
        for i in 0..n {
            acc[0] += c[i] * bx[i];
            acc[1] += c[i] * by[i];
            acc[2] += c[i] * bz[i];
        }
        for d in 0..3 {
            out[(j, d)] = acc[d];
        }
    }
    out
}

/// Reduced coordinates plus the full-space velocity and lifted positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedState<T: Real> {
    pub reduced: DMatrix<T>,
    pub v: DMatrix<T>,
    /// Always `q̄ + U q̃`.
    pub q: DMatrix<T>,
    pub frame: usize,
}

impl<T: Real> ReducedState<T> {
    /// Projects a full state into the subspace; the velocity is kept as is.
    pub fn from_full(state: &SimState<T>, rsys: &ReducedSystem<T>) -> Self {
        let reduced = rsys.project(&state.q);
        let q = rsys.lift(&reduced);
        Self {
            reduced,
            v: state.v.clone(),
            q,
            frame: state.frame,
        }
    }

    pub fn to_full(&self) -> SimState<T> {
        SimState {
            q: self.q.clone(),
            v: self.v.clone(),
            frame: self.frame,
        }
    }
}

/// `mean_shape + U q̃` for a stand-alone basis.
pub fn lift<T: Real>(reduced: &DMatrix<T>, basis: &Basis<T>) -> DMatrix<T> {
    let mut q = linalg::mul(basis.u(), reduced);
    q += basis.mean_shape();
    q
}

pub fn reduced_step<T: Real>(
    state: &ReducedState<T>,
    rsys: &ReducedSystem<T>,
    constraints: &ConstraintSet<T>,
    config: &SolverConfig,
) -> Result<ReducedState<T>, ReducedError> {
    reduced_step_observed(state, rsys, constraints, config, &mut ())
}

pub fn reduced_step_observed<T: Real, O: StepObserver<T>>(
    state: &ReducedState<T>,
    rsys: &ReducedSystem<T>,
    constraints: &ConstraintSet<T>,
    config: &SolverConfig,
    observer: &mut O,
) -> Result<ReducedState<T>, ReducedError> {
    let n = rsys.num_vertices();
    if state.q.nrows() != n || state.v.nrows() != n {
        return Err(ReducedError::DimensionMismatch {
            basis: n,
            system: state.q.nrows(),
        });
    }
    let dt = rsys.dt;
    let frame = state.frame + 1;
    let full = SimState {
        q: state.q.clone(),
        v: state.v.clone(),
        frame: state.frame,
    };
    let s = gravity_target(&full, &config.gravity_vector(), dt);
    let mut inertial = rsys.mass.apply(&s);
    inertial *= T::one() / (dt * dt);

    let mut reduced = rsys.project(&s);
    let mut q = rsys.lift(&reduced);
    for it in 0..config.iterations {
        let projections = project_all(constraints, &q);
        let b = assemble_rhs(&inertial, constraints, &projections);
        let t0 = Instant::now();
        let rhs = rsys.reduced_rhs(&b);
        reduced = rsys.solve(&rhs);
        observer.global_solve(t0.elapsed());
        if observer.wants_residual() {
            let scale = rhs.amax();
            let res = (&rsys.matrix * &reduced - &rhs).amax();
            observer.reduced_residual(if scale > T::zero() { res / scale } else { res });
        }
        if !all_finite(&reduced) {
            return Err(ReducedError::Divergence {
                frame,
                iteration: it,
            });
        }
        q = rsys.lift(&reduced);
        observer.iteration(it, &q, &s);
    }
    let v = (&q - &state.q) / dt;
    if !all_finite(&v) {
        return Err(ReducedError::Divergence {
            frame,
            iteration: config.iterations,
        });
    }
    Ok(ReducedState {
        reduced,
        v,
        q,
        frame,
    })
}

/// Times only the global phase of the reduced solve for a given `b`.
pub fn time_global_solve<T: Real>(rsys: &ReducedSystem<T>, b: &DMatrix<T>) -> (DMatrix<T>, Duration) {
    let t0 = Instant::now();
    let out = rsys.solve(&rsys.reduced_rhs(b));
    (out, t0.elapsed())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisKind;
    use crate::mesh::{lumped_mass_matrix, tet_box, two_tets};
    use crate::pd::{assemble_global, objective, Constraint, ConstraintConfig, FullSolver};
    use nalgebra::{DVector, Vector3};

    fn identity_basis(mass: &MassMatrix<f64>) -> Basis<f64> {
        let n = mass.len();
        Basis::external(DMatrix::identity(n, n), DMatrix::zeros(n, 3), mass).unwrap()
    }

    fn hanging(mass_density: f64) -> (crate::mesh::Mesh<f64>, FullSolver<f64>) {
        let mesh = two_tets::<f64>();
        let solver = FullSolver::new(
            &mesh,
            &SolverConfig {
                dt: 0.02,
                iterations: 10,
                gravity: [0.0, -9.81, 0.0],
                density: mass_density,
            },
            &ConstraintConfig {
                tet_strain: Some(3000.0),
                anchors: vec![0],
                anchor_weight: 1e4,
                ..Default::default()
            },
        )
        .unwrap();
        (mesh, solver)
    }

    #[test]
    fn projection_matches_dense_product() {
        for (n, k) in [(1, 1), (7, 3), (9, 4), (10, 9), (33, 13)] {
            let u = DMatrix::from_fn(n, k, |i, j| ((i * 5 + j * 3) % 7) as f64 - 2.5);
            let b = DMatrix::from_fn(n, 3, |i, c| (i as f64 + 0.5) * (c as f64 - 1.2));
            let got = project_columns(&u, &b);
            assert!((got - u.tr_mul(&b)).amax() < 1e-12, "n={n} k={k}");
        }
    }

    #[test]
    fn sparse_basis_rhs_matches_dense_path() {
        let (mesh, solver) = hanging(1000.0);
        let mass = &solver.mass;
        let n = mesh.num_vertices();
        let mut u = DMatrix::zeros(n, 2);
        u[(1, 0)] = 1.0;
        u[(3, 1)] = 2.0;
        let basis = Basis::external(u, DMatrix::zeros(n, 3), mass).unwrap();
        let r = reduce_system(&solver.system, &basis).unwrap();
        assert!(r.sparse_u.is_some());
        let b = DMatrix::from_fn(n, 3, |i, c| (i as f64 + 0.25) * (c as f64 - 0.7));
        let dense = project_columns(basis.u(), &b) - &r.mean_term;
        assert!((r.reduced_rhs(&b) - dense).amax() < 1e-12);
    }

    #[test]
    fn canonical_column_picks_diagonal_entry() {
        let mass = MassMatrix::from_diagonal(DVector::from_vec(vec![2.0, 3.0, 5.0])).unwrap();
        let set = ConstraintSet::new(vec![Constraint::anchor(1, Vector3::zeros(), 7.0)]);
        let sys = assemble_global(&mass, &set, 1.0).unwrap();
        let u = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let basis = Basis::external(u, DMatrix::zeros(3, 3), &mass).unwrap();
        let r = reduce_system(&sys, &basis).unwrap();
        assert_eq!(r.matrix(), &DMatrix::from_element(1, 1, 2.0));
    }

    #[test]
    fn duplicated_column_is_rejected() {
        let (_, solver) = hanging(1000.0);
        let mut u = DMatrix::zeros(5, 2);
        u[(3, 0)] = 1.0;
        u[(3, 1)] = 1.0;
        let basis = Basis::external(u, DMatrix::zeros(5, 3), &solver.mass).unwrap();
        assert!(matches!(
            reduce_system(&solver.system, &basis),
            Err(ReducedError::IllConditioned { k: 2, .. })
        ));
        let other = Basis::external(DMatrix::identity(4, 4), DMatrix::zeros(4, 3), &MassMatrix::identity(4)).unwrap();
        assert!(matches!(
            reduce_system(&solver.system, &other),
            Err(ReducedError::DimensionMismatch { basis: 4, system: 5 })
        ));
    }

    #[test]
    fn full_basis_reproduces_full_solver() {
        let (mesh, solver) = hanging(1000.0);
        let basis = identity_basis(&solver.mass);
        let rsys = reduce_system(&solver.system, &basis).unwrap();
        let mut full = SimState::at_rest(&mesh);
        let mut red = ReducedState::from_full(&full, &rsys);
        for _ in 0..50 {
            full = solver.step(&full).unwrap();
            red = reduced_step(&red, &rsys, &solver.constraints, &solver.config).unwrap();
            assert!((&full.q - &red.q).amax() < 1e-8);
        }
        assert!((&full.v - &red.v).amax() < 1e-6);
        assert_eq!(red.frame, 50);
    }

    #[test]
    fn rotated_full_basis_with_offset_matches() {
        // a dense, M-orthonormal square basis around a nonzero mean shape
        let (mesh, solver) = hanging(10.0);
        let n = mesh.num_vertices();
        let raw = DMatrix::from_fn(n, n, |i, j| ((i * 3 + j * 5) % 7) as f64 + if i == j { 4.0 } else { 0.0 });
        let q = raw.qr().q();
        let u = DMatrix::from_fn(n, n, |i, j| q[(i, j)] / solver.mass.diag()[i].sqrt());
        let mean = mesh.vertices() * 0.9;
        let basis = Basis::external(u, mean, &solver.mass).unwrap();
        assert!(basis.orthonormality_error(&solver.mass) < 1e-12);
        let rsys = reduce_system(&solver.system, &basis).unwrap();
        let mut full = SimState::at_rest(&mesh);
        let mut red = ReducedState::from_full(&full, &rsys);
        for _ in 0..30 {
            full = solver.step(&full).unwrap();
            red = reduced_step(&red, &rsys, &solver.constraints, &solver.config).unwrap();
        }
        assert!((&full.q - &red.q).amax() < 1e-8);
    }

    #[test]
    fn translation_mode_follows_free_fall() {
        let mesh = tet_box::<f64>(2, 1, 1, [1.0, 0.5, 0.5]);
        let n = mesh.num_vertices();
        let config = SolverConfig {
            dt: 0.05,
            iterations: 4,
            gravity: [0.0, -9.81, 0.0],
            density: 500.0,
        };
        let cc = ConstraintConfig {
            allow_unconstrained: true,
            ..Default::default()
        };
        let solver = FullSolver::new(&mesh, &config, &cc).unwrap();
        let total = solver.mass.total();
        let u = DMatrix::from_element(n, 1, 1.0 / total.sqrt());
        let basis = Basis::external(u, mesh.vertices().clone(), &solver.mass).unwrap();
        let rsys = reduce_system(&solver.system, &basis).unwrap();
        let mut red = ReducedState::from_full(&SimState::at_rest(&mesh), &rsys);
        let (mut y, mut vy) = (0.0, 0.0);
        for _ in 0..40 {
            red = reduced_step(&red, &rsys, &solver.constraints, &config).unwrap();
            let next = y + 0.05 * vy - 0.0025 * 9.81;
            vy = (next - y) / 0.05;
            y = next;
            for v in 0..n {
                assert!((red.q[(v, 1)] - mesh.vertex(v).y - y).abs() < 1e-10);
                assert!((red.q[(v, 0)] - mesh.vertex(v).x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn anchored_rest_state_is_fixed() {
        let mesh = two_tets::<f64>();
        let config = SolverConfig {
            dt: 0.02,
            iterations: 5,
            gravity: [0.0; 3],
            density: 100.0,
        };
        let solver = FullSolver::new(
            &mesh,
            &config,
            &ConstraintConfig {
                tet_strain: Some(100.0),
                anchors: vec![0, 4],
                ..Default::default()
            },
        )
        .unwrap();
        let u = DMatrix::from_fn(5, 2, |i, j| ((i + 2 * j) % 3) as f64 + 0.5);
        let basis = Basis::external(u, mesh.vertices().clone(), &solver.mass).unwrap();
        let rsys = reduce_system(&solver.system, &basis).unwrap();
        let mut red = ReducedState::from_full(&SimState::at_rest(&mesh), &rsys);
        for _ in 0..20 {
            red = reduced_step(&red, &rsys, &solver.constraints, &config).unwrap();
        }
        assert!((&red.q - mesh.vertices()).amax() < 1e-10);
    }

    #[test]
    fn lift_properties() {
        let mass = lumped_mass_matrix(&two_tets::<f64>(), 3.0).unwrap();
        let u = DMatrix::from_fn(5, 2, |i, j| (i as f64 + 1.0) * if j == 0 { 1.0 } else { -0.5 + i as f64 });
        let mean = DMatrix::from_fn(5, 3, |i, c| (i * 3 + c) as f64);
        let basis = Basis::external(u, mean.clone(), &mass).unwrap();
        assert_eq!(lift(&DMatrix::zeros(2, 3), &basis), mean);
        let a = DMatrix::from_fn(2, 3, |i, j| (i + j) as f64 - 0.5);
        let b = DMatrix::from_fn(2, 3, |i, j| (i * j) as f64 + 0.25);
        let lhs = lift(&(&a * 2.0 + &b * -3.0), &basis) - &mean;
        let rhs = (lift(&a, &basis) - &mean) * 2.0 + (lift(&b, &basis) - &mean) * -3.0;
        assert!((lhs - rhs).amax() < 1e-12);

        let set = ConstraintSet::new(vec![Constraint::anchor(0, Vector3::zeros(), 1.0)]);
        let sys = assemble_global(&mass, &set, 0.1).unwrap();
        let rsys = reduce_system(&sys, &basis).unwrap();
        let q = lift(&a, &basis);
        assert!((rsys.project(&q) - &a).amax() < 1e-10);
        assert_eq!(basis.kind(), BasisKind::External);
    }

    struct Track {
        mass: MassMatrix<f64>,
        set: ConstraintSet<f64>,
        dt: f64,
        values: Vec<f64>,
        residuals: Vec<f64>,
    }

    impl StepObserver<f64> for Track {
        fn iteration(&mut self, _: usize, q: &DMatrix<f64>, s: &DMatrix<f64>) {
            self.values.push(objective(q, s, &self.mass, &self.set, self.dt));
        }
        fn wants_residual(&self) -> bool {
            true
        }
        fn reduced_residual(&mut self, r: f64) {
            self.residuals.push(r);
        }
    }

    #[test]
    fn subspace_objective_is_monotone_and_solves_are_accurate() {
        let (mesh, solver) = hanging(1000.0);
        let u = DMatrix::from_fn(5, 3, |i, j| {
            let p = mesh.vertex(i);
            [p.x, p.y * p.x, p.z + 0.3 * p.x][j] + if i == 0 { 0.0 } else { 0.1 }
        });
        let basis = Basis::external(u, mesh.vertices().clone(), &solver.mass).unwrap();
        let rsys = reduce_system(&solver.system, &basis).unwrap();
        let mut red = ReducedState::from_full(&SimState::at_rest(&mesh), &rsys);
        for _ in 0..30 {
            let mut t = Track {
                mass: solver.mass.clone(),
                set: solver.constraints.clone(),
                dt: 0.02,
                values: Vec::new(),
                residuals: Vec::new(),
            };
            red = reduced_step_observed(&red, &rsys, &solver.constraints, &solver.config, &mut t).unwrap();
            for w in t.values.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "{:?}", t.values);
            }
            assert!(t.residuals.iter().all(|&r| r < 1e-9));
            assert!((&red.q - rsys.lift(&red.reduced)).amax() < 1e-12);
        }
    }
}
