//! Procedural tetrahedral meshes for tests, benchmarks and demos.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::{edge_matrix, Mesh};
use crate::scalar::Real;

/// Two tetrahedra sharing the face (1, 2, 3).
pub fn two_tets<T: Real>() -> Mesh<T> {
    let v = DMatrix::from_row_slice(
        5,
        3,
        &[0., 0., 0., 1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 1., 1.],
    )
    .map(T::lit);
    Mesh::new(v, vec![[0, 1, 2, 3], [1, 3, 2, 4]], vec![]).expect("valid fixture")
}

/// Axis-aligned box of `nx × ny × nz` cubes, each split into six tetrahedra
/// along its main diagonal. Has `(nx+1)(ny+1)(nz+1)` vertices.
pub fn tet_box<T: Real>(nx: usize, ny: usize, nz: usize, size: [f64; 3]) -> Mesh<T> {
    voxel_mesh(nx, ny, nz, size, [0.0; 3], |_, _, _| true)
}

/// A bunny-like blob (body, head, two ears, tail) voxelized at `res` cells
/// along its longest axis. Roughly 0.5 m tall.
pub fn blob_bunny<T: Real>(res: usize) -> Mesh<T> {
    // ellipsoids: center, radii
    const PARTS: [([f64; 3], [f64; 3]); 5] = [
        ([0.0, 0.16, 0.0], [0.22, 0.16, 0.15]),  // body
        ([0.17, 0.3, 0.0], [0.11, 0.1, 0.1]),    // head
        ([0.14, 0.44, 0.045], [0.035, 0.1, 0.035]), // ear
        ([0.2, 0.44, -0.045], [0.035, 0.1, 0.035]), // ear
        ([-0.22, 0.14, 0.0], [0.05, 0.05, 0.05]), // tail
    ];
    let lo = [-0.28, 0.0, -0.16];
    let hi = [0.29, 0.54, 0.16];
    let ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let h = ext.iter().cloned().fold(0.0, f64::max) / res.max(2) as f64;
    let dims = ext.map(|e| (e / h).ceil() as usize);
    let size = [dims[0] as f64 * h, dims[1] as f64 * h, dims[2] as f64 * h];
    voxel_mesh(dims[0], dims[1], dims[2], size, lo, |x, y, z| {
        PARTS.iter().any(|(c, r)| {
            let d = [(x - c[0]) / r[0], (y - c[1]) / r[1], (z - c[2]) / r[2]];
            d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= 1.0
        })
    })
}

fn voxel_mesh<T: Real>(
    nx: usize,
    ny: usize,
    nz: usize,
    size: [f64; 3],
    origin: [f64; 3],
    inside: impl Fn(f64, f64, f64) -> bool,
) -> Mesh<T> {
    let h = [
        size[0] / nx as f64,
        size[1] / ny as f64,
        size[2] / nz as f64,
    ];
    let corner = |i: usize, j: usize, k: usize| {
        [
            origin[0] + i as f64 * h[0],
            origin[1] + j as f64 * h[1],
            origin[2] + k as f64 * h[2],
        ]
    };
    // Kuhn split: one tet per axis permutation, conforming across cells
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut ids: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    let mut cells = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let c = corner(i, j, k);
                if inside(c[0] + 0.5 * h[0], c[1] + 0.5 * h[1], c[2] + 0.5 * h[2]) {
                    cells.push((i, j, k));
                    for dk in 0..2 {
                        for dj in 0..2 {
                            for di in 0..2 {
                                ids.insert((k + dk, j + dj, i + di), 0);
                            }
                        }
                    }
                }
            }
        }
    }
    // number vertices in (k, j, i) lexicographic order
    let mut coords = Vec::with_capacity(ids.len());
    for (idx, (key, slot)) in ids.iter_mut().enumerate() {
        *slot = idx;
        coords.push(corner(key.2, key.1, key.0));
    }
    let verts = DMatrix::from_fn(coords.len(), 3, |r, c| T::lit(coords[r][c]));
    let mut tets = Vec::with_capacity(cells.len() * 6);
    for &(i, j, k) in &cells {
        for p in PERMS {
            let mut at = [i, j, k];
            let mut tet = [0usize; 4];
            tet[0] = ids[&(at[2], at[1], at[0])];
            for (s, &axis) in p.iter().enumerate() {
                at[axis] += 1;
                tet[s + 1] = ids[&(at[2], at[1], at[0])];
            }
            if edge_matrix(&verts, &tet).determinant() < T::zero() {
                tet.swap(2, 3);
            }
            tets.push(tet);
        }
    }
    Mesh::new(verts, tets, vec![]).expect("voxel tets are non-degenerate")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::lumped_mass_matrix;
    use approx::assert_relative_eq;

    #[test]
    fn box_counts_and_volume() {
        let m = tet_box::<f64>(2, 3, 4, [1.0, 1.5, 2.0]);
        assert_eq!(m.num_vertices(), 3 * 4 * 5);
        assert_eq!(m.tets().len(), 6 * 24);
        assert_relative_eq!(m.total_volume(), 3.0, epsilon = 1e-12);
        // boundary of a box: 2 triangles per boundary square
        assert_eq!(m.faces().len(), 2 * 2 * (2 * 3 + 3 * 4 + 2 * 4));
        let mass = lumped_mass_matrix(&m, 2.0).unwrap();
        assert_relative_eq!(mass.total(), 6.0, max_relative = 1e-12);
    }

    #[test]
    fn bunny_is_connected() {
        let m = blob_bunny::<f64>(14);
        assert!(m.num_vertices() > 100);
        let d = crate::mesh::graph_distances(&m, 0).unwrap();
        assert!(d.iter().all(|x| x.is_finite()));
    }
}
