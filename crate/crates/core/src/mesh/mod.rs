//! Mesh representation, lumped masses, and edge-graph distances.

mod generate;
mod io;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

use crate::scalar::Real;

pub use generate::{blob_bunny, tet_box, two_tets};
pub use io::{export_frame, load_mesh, save_tet_pair, FrameFormat, MeshFormat};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("element {element} references vertex {index}, but the mesh has {n} vertices")]
    IndexOutOfRange {
        element: usize,
        index: usize,
        n: usize,
    },
    #[error("tetrahedron {element} is degenerate (zero signed volume)")]
    DegenerateTet { element: usize },
    #[error("vertex {vertex} belongs to no element and would receive zero mass")]
    IsolatedVertex { vertex: usize },
    #[error("mesh has no tetrahedra or faces")]
    NoElements,
    #[error("expected {expected} position rows, got {got}")]
    RowMismatch { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Vertex positions plus tetrahedral and/or triangle connectivity.
///
/// For volumetric meshes loaded without explicit faces the boundary surface
/// is derived, so `faces` is always usable for export.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh<T: Real> {
    vertices: DMatrix<T>,
    tets: Vec<[usize; 4]>,
    faces: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
    adjacency: Vec<Vec<usize>>,
}

impl<T: Real> Mesh<T> {
    /// Validates connectivity and derives edges, adjacency and (for tet meshes
    /// given without faces) the boundary surface.
    pub fn new(
        vertices: DMatrix<T>,
        tets: Vec<[usize; 4]>,
        faces: Vec<[usize; 3]>,
    ) -> Result<Self, MeshError> {
        if vertices.ncols() != 3 {
            return Err(MeshError::InvalidArgument(format!(
                "vertex matrix must have 3 columns, got {}",
                vertices.ncols()
            )));
        }
        let n = vertices.nrows();
        for (element, tet) in tets.iter().enumerate() {
            if let Some(&index) = tet.iter().find(|&&i| i >= n) {
                return Err(MeshError::IndexOutOfRange { element, index, n });
            }
        }
        for (element, face) in faces.iter().enumerate() {
            if let Some(&index) = face.iter().find(|&&i| i >= n) {
                return Err(MeshError::IndexOutOfRange { element, index, n });
            }
        }
        for (element, tet) in tets.iter().enumerate() {
            let ds = edge_matrix(&vertices, tet);
            let scale = (0..3)
                .map(|c| ds.column(c).norm())
                .fold(T::zero(), |a, b| a.max(b));
            let tol = T::lit(64.0) * T::epsilon_val() * scale * scale * scale;
            if ds.determinant().abs() <= tol {
                return Err(MeshError::DegenerateTet { element });
            }
        }

        let faces = if faces.is_empty() && !tets.is_empty() {
            boundary_faces(&vertices, &tets)
        } else {
            faces
        };

        let mut edge_set = BTreeSet::new();
        let mut push = |a: usize, b: usize| {
            if a != b {
                edge_set.insert([a.min(b), a.max(b)]);
            }
        };
        for t in &tets {
            for i in 0..4 {
                for j in i + 1..4 {
                    push(t[i], t[j]);
                }
            }
        }
        for f in &faces {
            push(f[0], f[1]);
            push(f[1], f[2]);
            push(f[2], f[0]);
        }
        let edges: Vec<[usize; 2]> = edge_set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); n];
        for &[a, b] in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }

        Ok(Self {
            vertices,
            tets,
            faces,
            edges,
            adjacency,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.nrows()
    }

    /// Rest positions, one row per vertex.
    pub fn vertices(&self) -> &DMatrix<T> {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Undirected edges, each listed once as `[lo, hi]`, sorted.
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn vertex(&self, i: usize) -> Vector3<T> {
        row3(&self.vertices, i)
    }

    pub fn is_volumetric(&self) -> bool {
        !self.tets.is_empty()
    }

    /// Unsigned rest volume of tetrahedron `t`.
    pub fn tet_volume(&self, t: usize) -> T {
        edge_matrix(&self.vertices, &self.tets[t]).determinant().abs() / T::lit(6.0)
    }

    pub fn face_area(&self, f: usize) -> T {
        let [a, b, c] = self.faces[f];
        let pa = self.vertex(a);
        (self.vertex(b) - pa).cross(&(self.vertex(c) - pa)).norm() / T::lit(2.0)
    }

    pub fn total_volume(&self) -> T {
        (0..self.tets.len()).fold(T::zero(), |acc, t| acc + self.tet_volume(t))
    }

    pub fn mean_edge_length(&self) -> T {
        if self.edges.is_empty() {
            return T::zero();
        }
        let sum = self.edges.iter().fold(T::zero(), |acc, &[a, b]| {
            acc + (self.vertex(a) - self.vertex(b)).norm()
        });
        sum / T::lit(self.edges.len() as f64)
    }

    /// Length of the axis-aligned bounding box diagonal.
    pub fn bounding_diagonal(&self) -> T {
        let n = self.num_vertices();
        if n == 0 {
            return T::zero();
        }
        let mut d = T::zero();
        for c in 0..3 {
            let col = self.vertices.column(c);
            let lo = col.iter().fold(col[0], |a, &b| a.min(b));
            let hi = col.iter().fold(col[0], |a, &b| a.max(b));
            d += (hi - lo) * (hi - lo);
        }
        d.sqrt()
    }
}

/// Lumped (diagonal) mass matrix, kilograms per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct MassMatrix<T: Real> {
    diag: DVector<T>,
}

impl<T: Real> MassMatrix<T> {
    /// Wraps a diagonal directly. Every entry must be strictly positive.
    pub fn from_diagonal(diag: DVector<T>) -> Result<Self, MeshError> {
        if let Some(vertex) = diag.iter().position(|&m| !(m > T::zero())) {
            return Err(MeshError::IsolatedVertex { vertex });
        }
        Ok(Self { diag })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            diag: DVector::from_element(n, T::one()),
        }
    }

    pub fn diag(&self) -> &DVector<T> {
        &self.diag
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn total(&self) -> T {
        self.diag.sum()
    }

    pub fn sqrt_diag(&self) -> DVector<T> {
        self.diag.map(|m| m.sqrt())
    }

    /// Scales row `i` of `x` by `m_i`.
    pub fn apply(&self, x: &DMatrix<T>) -> DMatrix<T> {
        scale_rows(x, &self.diag)
    }

    /// Stable digest of the diagonal, stored in basis archives to detect
    /// mismatched mass weighting.
    pub fn fingerprint(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for m in self.diag.iter() {
            h.update(m.to_f64_lossy().to_le_bytes());
        }
        let out = h.finalize();
        u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
    }
}

/// Lumps `density × volume / 4` onto each tet vertex, or `density × area / 3`
/// onto each face vertex for surface meshes.
pub fn lumped_mass_matrix<T: Real>(mesh: &Mesh<T>, density: T) -> Result<MassMatrix<T>, MeshError> {
    if !(density > T::zero()) {
        return Err(MeshError::InvalidArgument(format!(
            "density must be positive, got {density}"
        )));
    }
    let mut diag = DVector::zeros(mesh.num_vertices());
    if mesh.is_volumetric() {
        let quarter = T::lit(0.25);
        for (t, tet) in mesh.tets().iter().enumerate() {
            let m = density * mesh.tet_volume(t) * quarter;
            for &v in tet {
                diag[v] += m;
            }
        }
    } else if !mesh.faces().is_empty() {
        let third = T::one() / T::lit(3.0);
        for (f, face) in mesh.faces().iter().enumerate() {
            let m = density * mesh.face_area(f) * third;
            for &v in face {
                diag[v] += m;
            }
        }
    } else {
        return Err(MeshError::NoElements);
    }
    MassMatrix::from_diagonal(diag)
}

#[derive(Clone, Copy)]
struct HeapItem<T> {
    dist: T,
    vertex: usize,
}

impl<T: Real> PartialEq for HeapItem<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: Real> Eq for HeapItem<T> {}
impl<T: Real> PartialOrd for HeapItem<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Real> Ord for HeapItem<T> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

/// Shortest edge-path distances from `source` with Euclidean edge lengths.
/// Unreachable vertices get `+inf`.
pub fn graph_distances<T: Real>(mesh: &Mesh<T>, source: usize) -> Result<Vec<T>, MeshError> {
    let n = mesh.num_vertices();
    if source >= n {
        return Err(MeshError::InvalidArgument(format!(
            "source vertex {source} out of range for {n} vertices"
        )));
    }
    let mut dist = vec![T::infinity(); n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[source] = T::zero();
    heap.push(HeapItem {
        dist: T::zero(),
        vertex: source,
    });
    while let Some(HeapItem { dist: d, vertex: u }) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        let pu = mesh.vertex(u);
        for &w in mesh.neighbors(u) {
            let nd = d + (mesh.vertex(w) - pu).norm();
            if nd < dist[w] {
                dist[w] = nd;
                heap.push(HeapItem { dist: nd, vertex: w });
            }
        }
    }
    Ok(dist)
}

pub(crate) fn row3<T: Real>(m: &DMatrix<T>, i: usize) -> Vector3<T> {
    Vector3::new(m[(i, 0)], m[(i, 1)], m[(i, 2)])
}

pub(crate) fn scale_rows<T: Real>(x: &DMatrix<T>, s: &DVector<T>) -> DMatrix<T> {
    let mut out = x.clone();
    for (r, mut row) in out.row_iter_mut().enumerate() {
        row *= s[r];
    }
    out
}

/// Columns are `x_b - x_a`, `x_c - x_a`, `x_d - x_a`.
pub(crate) fn edge_matrix<T: Real>(x: &DMatrix<T>, tet: &[usize; 4]) -> Matrix3<T> {
    let a = row3(x, tet[0]);
    Matrix3::from_columns(&[
        row3(x, tet[1]) - a,
        row3(x, tet[2]) - a,
        row3(x, tet[3]) - a,
    ])
}

/// Faces belonging to exactly one tetrahedron, oriented away from the
/// opposite vertex. Sorted for deterministic output.
fn boundary_faces<T: Real>(x: &DMatrix<T>, tets: &[[usize; 4]]) -> Vec<[usize; 3]> {
    // local faces of (0,1,2,3) with outward orientation for positive volume
    const LOCAL: [[usize; 3]; 4] = [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]];
    let mut count: BTreeMap<[usize; 3], (usize, [usize; 3])> = BTreeMap::new();
    for tet in tets {
        let positive = edge_matrix(x, tet).determinant() > T::zero();
        for lf in LOCAL {
            let mut f = [tet[lf[0]], tet[lf[1]], tet[lf[2]]];
            if !positive {
                f.swap(1, 2);
            }
            let mut key = f;
            key.sort_unstable();
            count.entry(key).and_modify(|e| e.0 += 1).or_insert((1, f));
        }
    }
    count
        .into_values()
        .filter(|(c, _)| *c == 1)
        .map(|(_, f)| f)
        .collect()
}
