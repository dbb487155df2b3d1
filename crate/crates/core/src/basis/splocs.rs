use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::pca::{localized_pca, PcaParams};
use super::{
    check_weighted, support_map, unweight, Basis, BasisError, BasisKind, BasisWarning,
    SupportRadii,
};
use crate::linalg;
use crate::mesh::{MassMatrix, Mesh};
use crate::scalar::Real;
use crate::snapshots::SnapshotSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmParams {
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_iters")]
    pub iters: usize,
    /// Relative bound on both primal and dual residuals.
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_rho() -> f64 {
    10.0
}
fn default_iters() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-6
}
fn default_passes() -> usize {
    10
}
fn default_min_penalty() -> f64 {
    1e-2
}

impl Default for AdmmParams {
    fn default() -> Self {
        Self {
            rho: default_rho(),
            iters: default_iters(),
            tol: default_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplocsParams {
    pub k: usize,
    pub radii: SupportRadii,
    /// Sparsity strength, in the units of the weighted snapshot data.
    pub lambda: f64,
    #[serde(default)]
    pub admm: AdmmParams,
    /// Outer coefficient/component alternations.
    #[serde(default = "default_passes")]
    pub passes: usize,
    /// Smallest penalty weight inside the support, so the center is not free.
    #[serde(default = "default_min_penalty")]
    pub min_penalty: f64,
}

impl SplocsParams {
    pub fn new(k: usize, radii: SupportRadii, lambda: f64) -> Self {
        Self {
            k,
            radii,
            lambda,
            admm: AdmmParams::default(),
            passes: default_passes(),
            min_penalty: default_min_penalty(),
        }
    }

    fn validate(&self) -> Result<(), BasisError> {
        self.radii.validate()?;
        let bad = |msg: String| Err(BasisError::InvalidArgument(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.admm.rho > 0.0 && self.admm.rho.is_finite()) {
            return bad(format!("ADMM rho must be positive, got {}", self.admm.rho));
        }
        if self.admm.iters == 0 || self.passes == 0 {
            return bad("ADMM iterations and passes must be at least 1".into());
        }
        if !(self.min_penalty >= 0.0 && self.min_penalty <= 1.0) {
            return bad(format!("min_penalty must lie in [0, 1], got {}", self.min_penalty));
        }
        Ok(())
    }
}

/// Least-squares coefficients `W = Rᵀ C (CᵀC)⁻¹`, ridged so zero columns stay zero.
fn fit_coefficients<T: Real>(r: &DMatrix<T>, c: &DMatrix<T>) -> Result<DMatrix<T>, BasisError> {
    let k = c.ncols();
    let mut g = c.tr_mul(c);
    let scale = (0..k).map(|i| g[(i, i)]).fold(T::zero(), |a, b| a.max(b));
    let ridge = T::lit(1e-12) * scale.max(T::lit(1e-300));
    for i in 0..k {
        g[(i, i)] += ridge;
    }
    let chol = g.cholesky().ok_or(BasisError::Singular)?;
    Ok(chol.solve(&linalg::tr_mul(c, r)).transpose())
}

/// Scales coefficient columns to unit max-magnitude, moving the scale into `C`.
fn rescale<T: Real>(w: &mut DMatrix<T>, c: &mut DMatrix<T>) {
    for k in 0..w.ncols() {
        let s = w.column(k).amax();
        if s > T::zero() {
            let mut wk = w.column_mut(k);
            wk /= s;
            let mut ck = c.column_mut(k);
            ck *= s;
        }
    }
}

fn argmax_abs<T: Real>(col: nalgebra::DVectorView<'_, T>) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, x) in col.iter().enumerate() {
        let a = x.abs();
        if a > T::zero() && best.is_none_or(|(_, b)| a > b) {
            best = Some((i, a));
        }
    }
    best.map(|(i, _)| i)
}

/// Sparse localized components.
///
/// Minimizes `½‖R − C Wᵀ‖²_F + λ Σ_k Σ_v Λ_k(v)|C_k(v)|` over the weighted
/// data `R`, with `Λ_k = max(1 − support weight, min_penalty)` inside the
/// support of component `k` and `C_k` forced to zero outside it. Each outer
/// pass refits `W`, normalizes its columns to max-magnitude 1, re-centers
/// every support map at the component's peak and runs ADMM on `C`.
pub fn build_splocs_basis<T: Real>(
    s: &SnapshotSet<T>,
    mesh: &Mesh<T>,
    params: &SplocsParams,
    mass: &MassMatrix<T>,
) -> Result<Basis<T>, BasisError> {
    check_weighted(s, mass)?;
    params.validate()?;
    let init = localized_pca(s, mesh, &PcaParams::new(params.k, params.radii), mass)?;
    let r = s.data();
    let n = r.nrows();
    let mut c = init.columns;
    let k = c.ncols();
    let mut infos = init.components;
    let mut warnings = init.warnings;

    let rho = T::lit(params.admm.rho);
    let tol = T::lit(params.admm.tol);
    let lambda = T::lit(params.lambda);
    let floor = T::lit(params.min_penalty);
    let mut w = linalg::tr_mul(r, &c);
    let mut stalled = 0;
    let mut last = (0.0, 0.0);

    for pass in 0..params.passes {
        if pass > 0 {
            w = fit_coefficients(r, &c)?;
        }
        rescale(&mut w, &mut c);

        // threshold per entry; negative marks a hard zero
        let mut thresh = DMatrix::from_element(n, k, -T::one());
        for j in 0..k {
            if let Some(peak) = argmax_abs(c.column(j)) {
                infos[j].center = peak;
            }
            let smap = support_map(mesh, infos[j].center, params.radii)?;
            for v in 0..n {
                let sw = smap.weights[v];
                if sw > T::zero() {
                    thresh[(v, j)] = lambda * (T::one() - sw).max(floor) / rho;
                }
            }
        }

        let rw = linalg::mul(r, &w);
        let mut sys = w.tr_mul(&w);
        for i in 0..k {
            sys[(i, i)] += rho;
        }
        let inv = sys
            .cholesky()
            .ok_or(BasisError::Singular)?
            .inverse();
        let mut z = c.clone();
        let mut dual_var = DMatrix::zeros(n, k);
        let mut converged = false;
        for _ in 0..params.admm.iters {
            let rhs = &rw + (&z - &dual_var) * rho;
            c = linalg::mul(&rhs, &inv);
            let mut z_new = &c + &dual_var;
            for (x, &t) in z_new.iter_mut().zip(thresh.iter()) {
                *x = if t < T::zero() {
                    T::zero()
                } else if *x > t {
                    *x - t
                } else if *x < -t {
                    *x + t
                } else {
                    T::zero()
                };
            }
            dual_var += &c - &z_new;
            let primal = (&c - &z_new).norm();
            let dual = (&z_new - &z).norm() * rho;
            z = z_new;
            let scale = c.norm().max(z.norm()).max(dual_var.norm() * rho);
            last = (primal.to_f64_lossy(), dual.to_f64_lossy());
            if scale == T::zero() || (primal <= tol * scale && dual <= tol * scale) {
                converged = true;
                break;
            }
        }
        if !converged {
            stalled += 1;
        }
        c = z;
    }
    if stalled > 0 {
        warnings.push(BasisWarning::AdmmNotConverged {
            passes: stalled,
            primal: last.0,
            dual: last.1,
        });
    }

    let keep: Vec<usize> = (0..k)
        .filter(|&j| c.column(j).iter().any(|x| *x != T::zero()))
        .collect();
    if keep.is_empty() {
        return Err(BasisError::DegenerateBasis);
    }
    if keep.len() < k {
        warnings.push(BasisWarning::CollapsedComponents {
            dropped: k - keep.len(),
        });
    }
    let cols: Vec<_> = keep.iter().map(|&j| c.column(j).normalize()).collect();
    let infos = keep.iter().map(|&j| infos[j]).collect();
    let u = unweight(DMatrix::from_columns(&cols), mass);
    let mut basis = Basis::new(u, s.mean_shape().clone(), BasisKind::Splocs, infos, mass.fingerprint())?;
    for wn in warnings {
        basis.push_warning(wn);
    }
    Ok(basis)
}
