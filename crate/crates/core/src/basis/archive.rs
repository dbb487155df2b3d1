//! `PDBA` layout, little-endian throughout:
//!
//! ```text
//! "PDBA" | u32 version | u64 n | u64 k | u8 kind
//! f64 U[n·k] (column-major) | f64 mean_shape[n·3] (vertex-major)
//! k × { u64 center | f64 d_min | f64 d_max | f64 sigma | f64 residual_norm }
//! u64 mass fingerprint
//! u32 warnings | warnings × { u8 tag | f64 a | f64 b | f64 c }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use super::{Basis, BasisError, BasisKind, BasisWarning, ComponentInfo};
use crate::scalar::Real;
use crate::snapshots::Reader;

const MAGIC: &[u8; 4] = b"PDBA";
pub const BASIS_VERSION: u32 = 1;

fn kind_code(kind: BasisKind) -> u8 {
    match kind {
        BasisKind::Pca => 0,
        BasisKind::Splocs => 1,
        BasisKind::External => 2,
    }
}

fn warning_record(w: &BasisWarning) -> (u8, [f64; 3]) {
    match *w {
        BasisWarning::RankExhausted { requested, found } => (0, [requested as f64, found as f64, 0.0]),
        BasisWarning::DependentColumns { dropped } => (1, [dropped as f64, 0.0, 0.0]),
        BasisWarning::AdmmNotConverged {
            passes,
            primal,
            dual,
        } => (2, [passes as f64, primal, dual]),
        BasisWarning::CollapsedComponents { dropped } => (3, [dropped as f64, 0.0, 0.0]),
    }
}

pub fn save_basis<T: Real>(basis: &Basis<T>, path: &Path) -> Result<(), BasisError> {
    let (n, k) = basis.u.shape();
    let mut buf = Vec::with_capacity(29 + 8 * (n * k + 3 * n + 5 * k + 1));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&BASIS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(k as u64).to_le_bytes());
    buf.push(kind_code(basis.kind));
    let mut put = |x: f64| buf.extend_from_slice(&x.to_le_bytes());
    for x in basis.u.iter() {
        put(x.to_f64_lossy());
    }
    for v in 0..n {
        for c in 0..3 {
            put(basis.mean_shape[(v, c)].to_f64_lossy());
        }
    }
    for info in &basis.components {
        buf.extend_from_slice(&(info.center as u64).to_le_bytes());
        for x in [info.d_min, info.d_max, info.sigma, info.residual_norm] {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf.extend_from_slice(&basis.mass_fingerprint.to_le_bytes());
    buf.extend_from_slice(&(basis.warnings.len() as u32).to_le_bytes());
    for w in &basis.warnings {
        let (tag, vals) = warning_record(w);
        buf.push(tag);
        for x in vals {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|source| BasisError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_basis<T: Real>(path: &Path) -> Result<Basis<T>, BasisError> {
    let bytes = fs::read(path).map_err(|source| BasisError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let fail = |message: String| BasisError::Archive {
        path: path.to_path_buf(),
        message,
    };
    let truncated = |_: PathBuf| fail("archive truncated".into());
    let mut r = Reader::new(&bytes, path);
    let magic = r.take(4).map_err(truncated)?;
    if magic != MAGIC {
        return Err(fail(format!("not a basis archive (magic {magic:?})")));
    }
    let version = r.u32().map_err(truncated)?;
    if version != BASIS_VERSION {
        return Err(fail(format!(
            "archive version {version} is not supported (expected {BASIS_VERSION})"
        )));
    }
    let n = r.u64().map_err(truncated)? as usize;
    let k = r.u64().map_err(truncated)? as usize;
    let kind = match r.u8().map_err(truncated)? {
        0 => BasisKind::Pca,
        1 => BasisKind::Splocs,
        2 => BasisKind::External,
        other => return Err(fail(format!("unknown basis kind {other}"))),
    };
    let need = n
        .checked_mul(k)
        .and_then(|x| x.checked_add(3 * n + 5 * k + 1))
        .and_then(|x| x.checked_mul(8));
    if need.is_none_or(|need| need > r.remaining()) {
        return Err(fail("archive truncated".into()));
    }
    let mut u = DMatrix::zeros(n, k);
    for x in u.iter_mut() {
        *x = T::lit(r.f64().map_err(truncated)?);
    }
    let mut mean = DMatrix::zeros(n, 3);
    for v in 0..n {
        for c in 0..3 {
            mean[(v, c)] = T::lit(r.f64().map_err(truncated)?);
        }
    }
    let mut components = Vec::with_capacity(k);
    for _ in 0..k {
        let center = r.u64().map_err(truncated)? as usize;
        if center >= n {
            return Err(fail(format!("component center {center} out of range")));
        }
        components.push(ComponentInfo {
            center,
            d_min: r.f64().map_err(truncated)?,
            d_max: r.f64().map_err(truncated)?,
            sigma: r.f64().map_err(truncated)?,
            residual_norm: r.f64().map_err(truncated)?,
        });
    }
    let fingerprint = r.u64().map_err(truncated)?;
    let count = r.u32().map_err(truncated)?;
    let mut warnings = Vec::new();
    for _ in 0..count {
        let tag = r.u8().map_err(truncated)?;
        let a = r.f64().map_err(truncated)?;
        let b = r.f64().map_err(truncated)?;
        let c = r.f64().map_err(truncated)?;
        warnings.push(match tag {
            0 => BasisWarning::RankExhausted {
                requested: a as usize,
                found: b as usize,
            },
            1 => BasisWarning::DependentColumns { dropped: a as usize },
            2 => BasisWarning::AdmmNotConverged {
                passes: a as usize,
                primal: b,
                dual: c,
            },
            3 => BasisWarning::CollapsedComponents { dropped: a as usize },
            other => return Err(fail(format!("unknown warning tag {other}"))),
        });
    }
    if r.remaining() != 0 {
        return Err(fail(format!("{} trailing bytes", r.remaining())));
    }
    let mut basis = Basis::new(u, mean, kind, components, fingerprint)
        .map_err(|e| fail(e.to_string()))?;
    basis.warnings = warnings;
    Ok(basis)
}
