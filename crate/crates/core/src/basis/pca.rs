use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    check_weighted, orthonormalize, support_map, unweight, Basis, BasisError, BasisKind,
    BasisWarning, ComponentInfo, SupportMap, SupportRadii,
};
use crate::linalg;
use crate::mesh::{MassMatrix, Mesh};
use crate::scalar::Real;
use crate::snapshots::SnapshotSet;

/// Weighted snapshot data being deflated, `n × 3T` with column `3t + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual<T: Real> {
    data: DMatrix<T>,
}

impl<T: Real> Residual<T> {
    pub fn from_snapshots(s: &SnapshotSet<T>) -> Result<Self, BasisError> {
        let flags = s.flags();
        if !flags.centered || !flags.mass_weighted {
            return Err(BasisError::SnapshotState("centered and mass weighted"));
        }
        Ok(Self {
            data: s.data().clone(),
        })
    }

    pub fn from_matrix(data: DMatrix<T>) -> Result<Self, BasisError> {
        if data.ncols() == 0 || data.ncols() % 3 != 0 {
            return Err(BasisError::InvalidArgument(format!(
                "residual needs 3T > 0 columns, got {}",
                data.ncols()
            )));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &DMatrix<T> {
        &self.data
    }

    pub fn into_inner(self) -> DMatrix<T> {
        self.data
    }

    pub fn num_vertices(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.data.ncols() / 3
    }

    pub fn norm(&self) -> T {
        self.data.norm()
    }

    /// Per vertex, the largest residual displacement over all frames.
    pub fn peak_norms(&self) -> Vec<T> {
        let d = &self.data;
        (0..d.nrows())
            .into_par_iter()
            .map(|v| {
                let mut best = T::zero();
                for t in 0..d.ncols() / 3 {
                    let (x, y, z) = (d[(v, 3 * t)], d[(v, 3 * t + 1)], d[(v, 3 * t + 2)]);
                    let n = (x * x + y * y + z * z).sqrt();
                    if n > best {
                        best = n;
                    }
                }
                best
            })
            .collect()
    }
}

/// Vertex whose residual displacement peaks highest over the frames, with
/// that peak. Ties go to the lowest index. `None` once the residual is zero.
pub fn largest_deformation_vertex<T: Real>(r: &Residual<T>) -> Option<(usize, T)> {
    let peaks = r.peak_norms();
    let mut best: Option<(usize, T)> = None;
    for (v, p) in peaks.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((v, p));
        }
    }
    best.filter(|(_, p)| *p > T::zero())
}

/// A localized spatial column and its per-frame coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalComponent<T: Real> {
    /// Unit-norm, zero wherever the support weight is zero.
    pub column: DVector<T>,
    /// `Rᵀ column`, one entry per (frame, coordinate).
    pub coeffs: DVector<T>,
    pub sigma: T,
}

fn top_eigenvector<T: Real>(g: DMatrix<T>) -> DVector<T> {
    let eig = SymmetricEigen::new(g);
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    eig.eigenvectors.column(best).into_owned()
}

/// Leading mode of the residual seen through `smap`, oriented so the center
/// vertex has a positive entry.
///
/// The mode is the top left singular vector of `W R` (`W = diag(weights)`),
/// obtained from the smaller Gram matrix and polished by one power step.
pub fn extract_local_component<T: Real>(
    r: &Residual<T>,
    v: usize,
    smap: &SupportMap<T>,
) -> Result<LocalComponent<T>, BasisError> {
    let n = r.num_vertices();
    if smap.weights.len() != n {
        return Err(BasisError::DimensionMismatch {
            expected: n,
            got: smap.weights.len(),
        });
    }
    if v >= n {
        return Err(BasisError::InvalidArgument(format!("vertex {v} out of range")));
    }
    let data = &r.data;
    let m = data.ncols();
    let seed = data.row(v);
    if seed.iter().all(|x| *x == T::zero()) {
        return Err(BasisError::ZeroTrajectory { vertex: v });
    }
    let support = smap.support();
    let s = support.len();
    let b = DMatrix::from_fn(s, m, |i, j| smap.weights[support[i]] * data[(support[i], j)]);
    let floor = T::epsilon_val() * T::lit(100.0) * r.norm();
    if s == 0 || b.norm() <= floor {
        return Err(BasisError::DegenerateComponent { vertex: v });
    }

    let mut u = if s >= m {
        let w = top_eigenvector(linalg::tr_mul(&b, &b));
        linalg::mul(&b, &DMatrix::from_column_slice(m, 1, w.as_slice())).column(0).into_owned()
    } else {
        top_eigenvector(&b * b.transpose())
    };
    u.normalize_mut();
    let c = b.tr_mul(&u);
    u = &b * &c;
    let sigma = c.norm();
    let len = u.norm();
    if len <= floor * sigma {
        return Err(BasisError::DegenerateComponent { vertex: v });
    }
    u /= len;

    let pos = support.binary_search(&v).ok();
    let flip = match pos {
        Some(i) if u[i] != T::zero() => u[i] < T::zero(),
        _ => c.dot(&seed.transpose()) < T::zero(),
    };
    if flip {
        u.neg_mut();
    }

    let mut column = DVector::zeros(n);
    let mut coeffs = DVector::zeros(m);
    for (i, &row) in support.iter().enumerate() {
        column[row] = u[i];
        coeffs.axpy(u[i], &data.row(row).transpose(), T::one());
    }
    Ok(LocalComponent {
        column,
        coeffs,
        sigma,
    })
}

/// `R ← R − column · coeffsᵀ`.
pub fn deflate<T: Real>(r: &mut Residual<T>, column: &DVector<T>, coeffs: &DVector<T>) {
    assert_eq!(column.len(), r.num_vertices());
    assert_eq!(coeffs.len(), r.data.ncols());
    let rows: Vec<(usize, T)> = column
        .iter()
        .enumerate()
        .filter(|(_, x)| **x != T::zero())
        .map(|(i, x)| (i, *x))
        .collect();
    for (j, &c) in coeffs.iter().enumerate() {
        if c == T::zero() {
            continue;
        }
        let mut col = r.data.column_mut(j);
        for &(i, x) in &rows {
            col[i] -= x * c;
        }
    }
}

/// Settings for the localized PCA loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaParams {
    /// Requested number of components.
    pub k: usize,
    pub radii: SupportRadii,
    /// Stop once `‖R‖_F` falls below this fraction of its starting value.
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    /// Re-orthonormalize after the loop (on by default).
    #[serde(default = "yes")]
    pub orthonormalize: bool,
}

fn default_rank_tol() -> f64 {
    1e-10
}

fn yes() -> bool {
    true
}

impl PcaParams {
    pub fn new(k: usize, radii: SupportRadii) -> Self {
        Self {
            k,
            radii,
            rank_tol: default_rank_tol(),
            orthonormalize: true,
        }
    }
}

/// Weighted-space output of the loop, before un-weighting.
pub(crate) struct LocalizedPca<T: Real> {
    pub columns: DMatrix<T>,
    pub components: Vec<ComponentInfo>,
    pub warnings: Vec<BasisWarning>,
}

pub(crate) fn localized_pca<T: Real>(
    s: &SnapshotSet<T>,
    mesh: &Mesh<T>,
    params: &PcaParams,
    mass: &MassMatrix<T>,
) -> Result<LocalizedPca<T>, BasisError> {
    check_weighted(s, mass)?;
    params.radii.validate()?;
    if params.k == 0 {
        return Err(BasisError::InvalidArgument("component count must be at least 1".into()));
    }
    if mesh.num_vertices() != s.num_vertices() {
        return Err(BasisError::DimensionMismatch {
            expected: s.num_vertices(),
            got: mesh.num_vertices(),
        });
    }
    let mut r = Residual::from_snapshots(s)?;
    let initial = r.norm();
    if initial == T::zero() {
        return Err(BasisError::DegenerateBasis);
    }
    // never ask for more than the working precision can resolve
    let tol = T::lit(params.rank_tol).max(T::epsilon_val() * T::lit(100.0)) * initial;
    let mut cols = Vec::with_capacity(params.k);
    let mut infos = Vec::with_capacity(params.k);
    let mut norm = initial;
    while cols.len() < params.k && norm > tol {
        let Some((v, _)) = largest_deformation_vertex(&r) else {
            break;
        };
        let smap = support_map(mesh, v, params.radii)?;
        let comp = extract_local_component(&r, v, &smap)?;
        deflate(&mut r, &comp.column, &comp.coeffs);
        let next = r.norm();
        debug_assert!(next <= norm * (T::one() + T::lit(1e-12)));
        norm = next;
        infos.push(ComponentInfo {
            center: v,
            d_min: params.radii.d_min,
            d_max: params.radii.d_max,
            sigma: comp.sigma.to_f64_lossy(),
            residual_norm: norm.to_f64_lossy(),
        });
        cols.push(comp.column);
    }
    let mut warnings = Vec::new();
    if cols.len() < params.k {
        warnings.push(BasisWarning::RankExhausted {
            requested: params.k,
            found: cols.len(),
        });
    }
    let mut columns = DMatrix::from_columns(&cols);
    if params.orthonormalize {
        let (q, dropped) = orthonormalize(columns, T::lit(1e-8));
        if !dropped.is_empty() {
            warnings.push(BasisWarning::DependentColumns {
                dropped: dropped.len(),
            });
            for &j in dropped.iter().rev() {
                infos.remove(j);
            }
        }
        columns = q;
    }
    if columns.ncols() == 0 {
        return Err(BasisError::DegenerateBasis);
    }
    Ok(LocalizedPca {
        columns,
        components: infos,
        warnings,
    })
}

/// Localized mass-weighted PCA basis with `UᵀMU = I`.
///
/// Fewer than `k` columns come back, with a [`BasisWarning`], when the
/// residual runs out first.
pub fn build_pca_basis<T: Real>(
    s: &SnapshotSet<T>,
    mesh: &Mesh<T>,
    params: &PcaParams,
    mass: &MassMatrix<T>,
) -> Result<Basis<T>, BasisError> {
    let out = localized_pca(s, mesh, params, mass)?;
    let u = unweight(out.columns, mass);
    let mut basis = Basis::new(
        u,
        s.mean_shape().clone(),
        BasisKind::Pca,
        out.components,
        mass.fingerprint(),
    )?;
    for w in out.warnings {
        basis.push_warning(w);
    }
    Ok(basis)
}
