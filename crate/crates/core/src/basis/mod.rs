//! Reduction bases from mass-weighted, centered snapshots.
//!
//! Both builders work on the weighted residual `R = M^{1/2}(X − X̄)` laid out
//! as `n × 3T`. One spatial column serves all three coordinates, so a basis is
//! a single `n × k` matrix `U` applied to the x, y and z columns alike.
//!
//! * [`build_pca_basis`] repeatedly picks the vertex with the largest residual
//!   motion, takes the leading mode of the residual under a support map around
//!   it, and deflates. The columns are then re-orthonormalized in the weighted
//!   space and un-weighted, so `UᵀMU = I`.
//! * [`build_splocs_basis`] starts from those components and alternates a
//!   least-squares coefficient update with an ADMM solve of the
//!   spatially-penalized component update.

mod archive;
mod pca;
mod splocs;
mod support;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{MassMatrix, MeshError};
use crate::scalar::Real;
use crate::snapshots::SnapshotSet;

pub use archive::{load_basis, save_basis, BASIS_VERSION};
pub use pca::{
    build_pca_basis, deflate, extract_local_component, largest_deformation_vertex,
    LocalComponent, PcaParams, Residual,
};
pub use splocs::{build_splocs_basis, AdmmParams, SplocsParams};
pub use support::{support_map, support_map_from_distances, SupportMap, SupportRadii};

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("snapshots must be {0}")]
    SnapshotState(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vertex {vertex} has a zero residual trajectory")]
    ZeroTrajectory { vertex: usize },
    #[error("component at vertex {vertex} vanishes under its support map")]
    DegenerateComponent { vertex: usize },
    #[error("every component collapsed to zero; no basis left")]
    DegenerateBasis,
    #[error("mass matrix does not match the basis (fingerprint {found:016x}, expected {expected:016x})")]
    MassMismatch { expected: u64, found: u64 },
    #[error("basis Gram matrix is singular")]
    Singular,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("{path}: {message}")]
    Archive {
        path: std::path::PathBuf,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Pca,
    Splocs,
    /// Supplied from outside, e.g. a skinning subspace.
    External,
}

impl BasisKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BasisKind::Pca => "pca",
            BasisKind::Splocs => "splocs",
            BasisKind::External => "external",
        }
    }
}

impl std::fmt::Display for BasisKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-column provenance: where the component was centered and how it was localized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentInfo {
    pub center: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Singular value of the localized residual the column was extracted from.
    pub sigma: f64,
    /// Residual Frobenius norm right after deflating this component.
    pub residual_norm: f64,
}

/// Non-fatal outcomes recorded while building.
#[derive(Debug, Clone, PartialEq)]
pub enum BasisWarning {
    /// Residual vanished before the requested count was reached.
    RankExhausted { requested: usize, found: usize },
    /// Columns that became linearly dependent after localization.
    DependentColumns { dropped: usize },
    /// ADMM stopped at its iteration cap in at least one pass.
    AdmmNotConverged { passes: usize, primal: f64, dual: f64 },
    /// SPLOCS components thresholded to zero and removed.
    CollapsedComponents { dropped: usize },
}

impl std::fmt::Display for BasisWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BasisWarning::RankExhausted { requested, found } => {
                write!(f, "residual exhausted after {found} of {requested} components")
            }
            BasisWarning::DependentColumns { dropped } => {
                write!(f, "dropped {dropped} linearly dependent columns")
            }
            BasisWarning::AdmmNotConverged {
                passes,
                primal,
                dual,
            } => write!(
                f,
                "ADMM hit its iteration cap in {passes} passes (last residuals {primal:.3e}, {dual:.3e})"
            ),
            BasisWarning::CollapsedComponents { dropped } => {
                write!(f, "{dropped} components collapsed to zero and were dropped")
            }
        }
    }
}

/// `n × k` subspace plus the affine offset it is expanded around.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis<T: Real> {
    u: DMatrix<T>,
    mean_shape: DMatrix<T>,
    kind: BasisKind,
    components: Vec<ComponentInfo>,
    mass_fingerprint: u64,
    warnings: Vec<BasisWarning>,
}

impl<T: Real> Basis<T> {
    /// Validates shapes and rejects empty or identically-zero columns.
    pub fn new(
        u: DMatrix<T>,
        mean_shape: DMatrix<T>,
        kind: BasisKind,
        components: Vec<ComponentInfo>,
        mass_fingerprint: u64,
    ) -> Result<Self, BasisError> {
        let (n, k) = u.shape();
        if k == 0 {
            return Err(BasisError::DegenerateBasis);
        }
        if mean_shape.shape() != (n, 3) {
            return Err(BasisError::DimensionMismatch {
                expected: n,
                got: mean_shape.nrows(),
            });
        }
        if components.len() != k {
            return Err(BasisError::DimensionMismatch {
                expected: k,
                got: components.len(),
            });
        }
        if let Some(j) = (0..k).find(|&j| u.column(j).iter().all(|x| *x == T::zero())) {
            return Err(BasisError::InvalidArgument(format!("column {j} is identically zero")));
        }
        if u.iter().any(|x| !x.is_finite_val()) {
            return Err(BasisError::InvalidArgument("basis has non-finite entries".into()));
        }
        Ok(Self {
            u,
            mean_shape,
            kind,
            components,
            mass_fingerprint,
            warnings: Vec::new(),
        })
    }

    /// Columns given directly, with no component metadata.
    pub fn external(
        u: DMatrix<T>,
        mean_shape: DMatrix<T>,
        mass: &MassMatrix<T>,
    ) -> Result<Self, BasisError> {
        let blank = ComponentInfo {
            center: 0,
            d_min: 0.0,
            d_max: f64::INFINITY,
            sigma: 0.0,
            residual_norm: 0.0,
        };
        let k = u.ncols();
        Self::new(u, mean_shape, BasisKind::External, vec![blank; k], mass.fingerprint())
    }

    pub fn u(&self) -> &DMatrix<T> {
        &self.u
    }

    pub fn mean_shape(&self) -> &DMatrix<T> {
        &self.mean_shape
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.u.ncols()
    }

    pub fn num_vertices(&self) -> usize {
        self.u.nrows()
    }

    pub fn components(&self) -> &[ComponentInfo] {
        &self.components
    }

    pub fn mass_fingerprint(&self) -> u64 {
        self.mass_fingerprint
    }

    pub fn warnings(&self) -> &[BasisWarning] {
        &self.warnings
    }

    pub(crate) fn push_warning(&mut self, w: BasisWarning) {
        self.warnings.push(w);
    }

    /// Checks that `mass` is the matrix this basis was weighted with.
    pub fn check_mass(&self, mass: &MassMatrix<T>) -> Result<(), BasisError> {
        let found = mass.fingerprint();
        if self.kind != BasisKind::External && found != self.mass_fingerprint {
            return Err(BasisError::MassMismatch {
                expected: self.mass_fingerprint,
                found,
            });
        }
        Ok(())
    }

    /// The first `k` columns.
    pub fn truncate(&self, k: usize) -> Result<Self, BasisError> {
        if k == 0 || k > self.k() {
            return Err(BasisError::InvalidArgument(format!(
                "cannot keep {k} of {} columns",
                self.k()
            )));
        }
        Ok(Self {
            u: self.u.columns(0, k).into_owned(),
            mean_shape: self.mean_shape.clone(),
            kind: self.kind,
            components: self.components[..k].to_vec(),
            mass_fingerprint: self.mass_fingerprint,
            warnings: self.warnings.clone(),
        })
    }

    /// `max |UᵀMU − I|`.
    pub fn orthonormality_error(&self, mass: &MassMatrix<T>) -> T {
        let g = self.u.tr_mul(&mass.apply(&self.u));
        (g - DMatrix::identity(self.k(), self.k())).amax()
    }
}

/// Relative error of the M-orthogonal projection of `x` (`n × m`) onto span(`u`).
///
/// An empty `u` projects to zero and gives 1; a zero `x` gives 0.
pub fn projection_error<T: Real>(
    u: &DMatrix<T>,
    x: &DMatrix<T>,
    mass: &MassMatrix<T>,
) -> Result<T, BasisError> {
    if u.nrows() != x.nrows() || mass.len() != x.nrows() {
        return Err(BasisError::DimensionMismatch {
            expected: x.nrows(),
            got: u.nrows(),
        });
    }
    let norm = x.norm();
    if norm == T::zero() {
        return Ok(T::zero());
    }
    if u.ncols() == 0 {
        return Ok(T::one());
    }
    let mu = mass.apply(u);
    let gram = u.tr_mul(&mu);
    let chol = gram.cholesky().ok_or(BasisError::Singular)?;
    let coeffs = chol.solve(&crate::linalg::tr_mul(&mu, x));
    let approx = crate::linalg::mul(u, &coeffs);
    Ok((x - approx).norm() / norm)
}

/// `‖X − U(UᵀMU)⁻¹UᵀMX‖_F / ‖X‖_F` with `X` the centered, unweighted snapshots.
pub fn reconstruction_error<T: Real>(
    basis: &Basis<T>,
    snapshots: &SnapshotSet<T>,
    mass: &MassMatrix<T>,
) -> Result<T, BasisError> {
    let flags = snapshots.flags();
    if !flags.centered || flags.mass_weighted {
        return Err(BasisError::SnapshotState("centered and not mass weighted"));
    }
    if basis.num_vertices() != snapshots.num_vertices() {
        return Err(BasisError::DimensionMismatch {
            expected: basis.num_vertices(),
            got: snapshots.num_vertices(),
        });
    }
    projection_error(basis.u(), snapshots.data(), mass)
}

/// Modified Gram–Schmidt, two sweeps, in the Euclidean inner product.
///
/// Columns whose norm falls below `drop_tol` times their original norm are
/// removed; their indices are returned alongside the orthonormal block.
pub(crate) fn orthonormalize<T: Real>(mut q: DMatrix<T>, drop_tol: T) -> (DMatrix<T>, Vec<usize>) {
    let k = q.ncols();
    let mut kept: Vec<usize> = Vec::with_capacity(k);
    let mut dropped = Vec::new();
    for j in 0..k {
        let original = q.column(j).norm();
        for _ in 0..2 {
            for &i in &kept {
                let d = q.column(i).dot(&q.column(j));
                let qi = q.column(i).clone_owned();
                q.column_mut(j).axpy(-d, &qi, T::one());
            }
        }
        let norm = q.column(j).norm();
        if original == T::zero() || norm <= drop_tol * original {
            dropped.push(j);
        } else {
            let mut c = q.column_mut(j);
            c /= norm;
            kept.push(j);
        }
    }
    let cols: Vec<DVector<T>> = kept.iter().map(|&j| q.column(j).into_owned()).collect();
    let out = if cols.is_empty() {
        DMatrix::zeros(q.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    (out, dropped)
}

/// `M^{-1/2} Ũ`.
pub(crate) fn unweight<T: Real>(mut u: DMatrix<T>, mass: &MassMatrix<T>) -> DMatrix<T> {
    for (r, m) in mass.diag().iter().enumerate() {
        let mut row = u.row_mut(r);
        row /= m.sqrt();
    }
    u
}

pub(crate) fn check_weighted<T: Real>(
    s: &SnapshotSet<T>,
    mass: &MassMatrix<T>,
) -> Result<(), BasisError> {
    let flags = s.flags();
    if !flags.centered || !flags.mass_weighted {
        return Err(BasisError::SnapshotState("centered and mass weighted"));
    }
    if mass.len() != s.num_vertices() {
        return Err(BasisError::DimensionMismatch {
            expected: s.num_vertices(),
            got: mass.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests;
