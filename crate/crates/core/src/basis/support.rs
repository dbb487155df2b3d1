use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::BasisError;
use crate::mesh::{graph_distances, Mesh};
use crate::scalar::Real;

/// Inner and outer radius of the linear falloff, in the mesh's length units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportRadii {
    pub d_min: f64,
    pub d_max: f64,
}

impl SupportRadii {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self, BasisError> {
        let r = Self { d_min, d_max };
        r.validate()?;
        Ok(r)
    }

    /// Weight 1 on every vertex reachable from the center.
    pub fn full() -> Self {
        Self {
            d_min: f64::MAX,
            d_max: f64::INFINITY,
        }
    }

    pub fn is_full(&self) -> bool {
        self.d_min == f64::MAX
    }

    pub fn validate(&self) -> Result<(), BasisError> {
        if !(self.d_min >= 0.0 && self.d_min < self.d_max) {
            return Err(BasisError::InvalidArgument(format!(
                "support radii need 0 <= d_min < d_max, got {} and {}",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }

    fn weight(&self, d: f64) -> f64 {
        if d <= self.d_min {
            1.0
        } else if d >= self.d_max {
            0.0
        } else {
            (self.d_max - d) / (self.d_max - self.d_min)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportMap<T: Real> {
    pub center: usize,
    pub radii: SupportRadii,
    pub weights: DVector<T>,
}

impl<T: Real> SupportMap<T> {
    /// Vertices with a nonzero weight, ascending.
    pub fn support(&self) -> Vec<usize> {
        (0..self.weights.len())
            .filter(|&v| self.weights[v] > T::zero())
            .collect()
    }
}

pub fn support_map<T: Real>(
    mesh: &Mesh<T>,
    center: usize,
    radii: SupportRadii,
) -> Result<SupportMap<T>, BasisError> {
    radii.validate()?;
    let d = graph_distances(mesh, center)?;
    support_map_from_distances(&d, center, radii)
}

/// Same as [`support_map`] with precomputed graph distances from `center`.
pub fn support_map_from_distances<T: Real>(
    distances: &[T],
    center: usize,
    radii: SupportRadii,
) -> Result<SupportMap<T>, BasisError> {
    radii.validate()?;
    if center >= distances.len() {
        return Err(BasisError::InvalidArgument(format!(
            "center {center} out of range for {} vertices",
            distances.len()
        )));
    }
    let weights = DVector::from_iterator(
        distances.len(),
        distances.iter().map(|d| {
            let d = if d.is_finite_val() { d.to_f64_lossy() } else { f64::INFINITY };
            T::lit(radii.weight(d))
        }),
    );
    Ok(SupportMap {
        center,
        radii,
        weights,
    })
}
