use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::PdError;
use crate::mesh::{edge_matrix, row3, Mesh};
use crate::scalar::Real;

/// Which constraint families to build and how stiff they are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    /// Strain stiffness; each tet gets `ω = stiffness × rest volume`.
    #[serde(default)]
    pub tet_strain: Option<f64>,
    /// Spring stiffness; each edge gets `ω = stiffness`.
    #[serde(default)]
    pub edge_spring: Option<f64>,
    /// Vertices pinned to their rest positions.
    #[serde(default)]
    pub anchors: Vec<usize>,
    /// Additionally pin every vertex inside this `[min, max]` box.
    #[serde(default)]
    pub anchor_box: Option<[[f64; 3]; 2]>,
    #[serde(default = "default_anchor_weight")]
    pub anchor_weight: f64,
    /// Permit a constraint set that is empty (pure ballistic motion).
    #[serde(default)]
    pub allow_unconstrained: bool,
}

fn default_anchor_weight() -> f64 {
    1e5
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            tet_strain: None,
            edge_spring: None,
            anchors: Vec::new(),
            anchor_box: None,
            anchor_weight: default_anchor_weight(),
            allow_unconstrained: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConstraintKind<T> {
    /// Rotation projection of the deformation gradient.
    TetStrain,
    /// Endpoint offsets from the midpoint, rescaled to half the rest length.
    EdgeSpring { rest_length: T },
    Anchor { target: Vector3<T> },
}

/// One projective constraint `(ω/2)‖S q − p(q)‖²`.
///
/// The selector `S` is stored densely over the (at most four) vertices it
/// touches: row `r` of `S q` is `Σ_m sel[r][m] · q[verts[m]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint<T> {
    kind: ConstraintKind<T>,
    weight: T,
    verts: [usize; 4],
    nverts: usize,
    sel: [[T; 4]; 3],
    nrows: usize,
}

impl<T: Real> Constraint<T> {
    /// Tet strain constraint; `S q` equals `Fᵀ` with `F = D_s D_m⁻¹`.
    pub fn tet_strain(mesh: &Mesh<T>, tet: [usize; 4], weight: T) -> Result<Self, PdError> {
        let dm = edge_matrix(mesh.vertices(), &tet);
        let g = dm
            .try_inverse()
            .ok_or(PdError::InvalidConfig("singular rest tetrahedron".into()))?;
        let mut sel = [[T::zero(); 4]; 3];
        // S = Gᵀ · [[-1,1,0,0],[-1,0,1,0],[-1,0,0,1]]
        for (r, row) in sel.iter_mut().enumerate() {
            for i in 0..3 {
                let gir = g[(i, r)];
                row[0] -= gir;
                row[i + 1] += gir;
            }
        }
        Ok(Self {
            kind: ConstraintKind::TetStrain,
            weight,
            verts: tet,
            nverts: 4,
            sel,
            nrows: 3,
        })
    }

    pub fn edge_spring(a: usize, b: usize, rest_length: T, weight: T) -> Self {
        let h = T::lit(0.5);
        let z = T::zero();
        Self {
            kind: ConstraintKind::EdgeSpring { rest_length },
            weight,
            verts: [a, b, 0, 0],
            nverts: 2,
            sel: [[h, -h, z, z], [-h, h, z, z], [z; 4]],
            nrows: 2,
        }
    }

    pub fn anchor(vertex: usize, target: Vector3<T>, weight: T) -> Self {
        let z = T::zero();
        Self {
            kind: ConstraintKind::Anchor { target },
            weight,
            verts: [vertex, 0, 0, 0],
            nverts: 1,
            sel: [[T::one(), z, z, z], [z; 4], [z; 4]],
            nrows: 1,
        }
    }

    pub fn kind(&self) -> &ConstraintKind<T> {
        &self.kind
    }

    pub fn weight(&self) -> T {
        self.weight
    }

    pub fn with_weight(mut self, weight: T) -> Self {
        self.weight = weight;
        self
    }

    pub fn vertices(&self) -> &[usize] {
        &self.verts[..self.nverts]
    }

    pub fn rows(&self) -> usize {
        self.nrows
    }

    /// `S q` as a 3×3 block; rows past [`rows`](Self::rows) are zero.
    pub fn select(&self, q: &DMatrix<T>) -> Matrix3<T> {
        let mut out = Matrix3::zeros();
        for r in 0..self.nrows {
            let mut acc = Vector3::zeros();
            for m in 0..self.nverts {
                let s = self.sel[r][m];
                if s != T::zero() {
                    acc += row3(q, self.verts[m]) * s;
                }
            }
            out.set_row(r, &acc.transpose());
        }
        out
    }

    /// Closest point of the constraint manifold to `S q`.
    pub fn project(&self, q: &DMatrix<T>) -> Matrix3<T> {
        let sq = self.select(q);
        match self.kind {
            ConstraintKind::TetStrain => closest_rotation(&sq),
            ConstraintKind::EdgeSpring { rest_length } => {
                let u: Vector3<T> = sq.row(1).transpose();
                let len = u.norm();
                let dir = if len > T::zero() {
                    u / len
                } else {
                    Vector3::x()
                };
                let half = dir * (rest_length * T::lit(0.5));
                let mut p = Matrix3::zeros();
                p.set_row(0, &(-half).transpose());
                p.set_row(1, &half.transpose());
                p
            }
            ConstraintKind::Anchor { target } => {
                let mut p = Matrix3::zeros();
                p.set_row(0, &target.transpose());
                p
            }
        }
    }

    /// `(ω/2)‖S q − p(q)‖²`.
    pub fn energy(&self, q: &DMatrix<T>) -> T {
        let d = self.select(q) - self.project(q);
        self.weight * T::lit(0.5) * d.norm_squared()
    }

    /// Adds `ω Sᵀ p` into the rows of `b`.
    pub fn scatter_rhs(&self, p: &Matrix3<T>, b: &mut DMatrix<T>) {
        for m in 0..self.nverts {
            let v = self.verts[m];
            for r in 0..self.nrows {
                let s = self.sel[r][m] * self.weight;
                if s != T::zero() {
                    for c in 0..3 {
                        b[(v, c)] += s * p[(r, c)];
                    }
                }
            }
        }
    }

    /// Pushes the entries of `ω SᵀS` as triplets.
    pub fn push_gram(&self, out: &mut Vec<(usize, usize, T)>) {
        for a in 0..self.nverts {
            for b in 0..self.nverts {
                let mut v = T::zero();
                for r in 0..self.nrows {
                    v += self.sel[r][a] * self.sel[r][b];
                }
                if v != T::zero() {
                    out.push((self.verts[a], self.verts[b], self.weight * v));
                }
            }
        }
    }
}

/// Nearest proper rotation in the Frobenius norm (reflection-corrected polar factor).
pub fn closest_rotation<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut u = u;
    if (u * v_t).determinant() < T::zero() {
        // flip the direction with the smallest singular value
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, T::infinity()), |(bi, bv), (i, &s)| if s < bv { (i, s) } else { (bi, bv) });
        let col = -u.column(imin);
        u.set_column(imin, &col);
    }
    u * v_t
}

/// The constraint list driving both the full and the reduced solver.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintSet<T> {
    constraints: Vec<Constraint<T>>,
}

impl<T: Real> ConstraintSet<T> {
    pub fn new(constraints: Vec<Constraint<T>>) -> Self {
        Self { constraints }
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Constraint<T>> {
        self.constraints.iter()
    }

    pub fn as_slice(&self) -> &[Constraint<T>] {
        &self.constraints
    }

    pub fn push(&mut self, c: Constraint<T>) {
        self.constraints.push(c);
    }

    /// Shifts every anchor target by `offset`.
    pub fn translate_anchors(&mut self, offset: Vector3<T>) {
        for c in &mut self.constraints {
            if let ConstraintKind::Anchor { target } = &mut c.kind {
                *target += offset;
            }
        }
    }

    pub fn energy(&self, q: &DMatrix<T>) -> T {
        self.constraints
            .iter()
            .fold(T::zero(), |acc, c| acc + c.energy(q))
    }
}

impl<'a, T> IntoIterator for &'a ConstraintSet<T> {
    type Item = &'a Constraint<T>;
    type IntoIter = std::slice::Iter<'a, Constraint<T>>;
    fn into_iter(self) -> Self::IntoIter {
        self.constraints.iter()
    }
}

/// Builds the constraint families requested by `config`, capturing rest data
/// from the mesh's rest positions.
pub fn build_constraints<T: Real>(
    mesh: &Mesh<T>,
    config: &ConstraintConfig,
) -> Result<ConstraintSet<T>, PdError> {
    let n = mesh.num_vertices();
    let mut set = Vec::new();
    if let Some(k) = config.tet_strain {
        check_weight("tet_strain", k)?;
        for (t, &tet) in mesh.tets().iter().enumerate() {
            let w = T::lit(k) * mesh.tet_volume(t);
            set.push(Constraint::tet_strain(mesh, tet, w)?);
        }
    }
    if let Some(k) = config.edge_spring {
        check_weight("edge_spring", k)?;
        for &[a, b] in mesh.edges() {
            let len = (mesh.vertex(a) - mesh.vertex(b)).norm();
            set.push(Constraint::edge_spring(a, b, len, T::lit(k)));
        }
    }
    let mut anchors = config.anchors.clone();
    if let Some([lo, hi]) = config.anchor_box {
        for i in 0..n {
            let p = mesh.vertex(i);
            if (0..3).all(|c| {
                let x = p[c].to_f64_lossy();
                x >= lo[c] && x <= hi[c]
            }) {
                anchors.push(i);
            }
        }
    }
    anchors.sort_unstable();
    anchors.dedup();
    if !anchors.is_empty() {
        check_weight("anchor_weight", config.anchor_weight)?;
    }
    for v in anchors {
        if v >= n {
            return Err(PdError::InvalidAnchor { vertex: v, n });
        }
        set.push(Constraint::anchor(v, mesh.vertex(v), T::lit(config.anchor_weight)));
    }
    if set.is_empty() && !config.allow_unconstrained {
        return Err(PdError::EmptyConstraintSet);
    }
    Ok(ConstraintSet::new(set))
}

fn check_weight(name: &str, w: f64) -> Result<(), PdError> {
    if w.is_finite() && w >= 0.0 {
        Ok(())
    } else {
        Err(PdError::InvalidConfig(format!(
            "{name} weight must be finite and non-negative, got {w}"
        )))
    }
}
