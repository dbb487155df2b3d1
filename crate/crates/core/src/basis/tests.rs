use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector, Rotation3, Vector3};
use proptest::prelude::*;

use super::*;
use crate::mesh::{tet_box, two_tets, MassMatrix, Mesh};
use crate::pd::{ConstraintConfig, FullSolver, SimState, SolverConfig};
use crate::snapshots::{center, mass_weight, record, Schedule, SnapshotSet};

/// `sin` of the largest principal angle between the column spans of two
/// orthonormal blocks of equal width.
fn max_principal_sine(q1: &DMatrix<f64>, q2: &DMatrix<f64>) -> f64 {
    let proj = q2 - q1 * (q1.transpose() * q2);
    proj.singular_values().max()
}

fn weighted(u: &DMatrix<f64>, mass: &MassMatrix<f64>) -> DMatrix<f64> {
    let mut w = u.clone();
    for r in 0..w.nrows() {
        let s = mass.diag()[r].sqrt();
        let mut row = w.row_mut(r);
        row *= s;
    }
    w
}

fn oracle_left(data: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let svd = data.clone().svd(true, false);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let u = svd.u.unwrap();
    let cols: Vec<_> = order[..k].iter().map(|&i| u.column(i).into_owned()).collect();
    let sv = order.iter().map(|&i| svd.singular_values[i]).collect();
    (DMatrix::from_columns(&cols), sv)
}

/// A 4×2×2 bar pinned at x = 0 that sags and swings under gravity.
fn swinging_bar(frames: usize) -> (Mesh<f64>, MassMatrix<f64>, SnapshotSet<f64>) {
    let mesh = tet_box::<f64>(4, 2, 2, [2.0, 0.5, 0.5]);
    let solver = FullSolver::new(
        &mesh,
        &SolverConfig {
            dt: 0.02,
            iterations: 10,
            gravity: [0.0, -9.81, 0.0],
            density: 100.0,
        },
        &ConstraintConfig {
            tet_strain: Some(2e3),
            anchor_box: Some([[-0.01, -1.0, -1.0], [0.01, 1.0, 1.0]]),
            ..Default::default()
        },
    )
    .unwrap();
    let mut init = SimState::at_rest(&mesh);
    for r in 0..mesh.num_vertices() {
        init.v[(r, 2)] = 0.8 * mesh.vertex(r).x;
    }
    let raw = record(&solver, &init, Schedule::new(frames, 1)).unwrap();
    let s = mass_weight(&center(&raw).unwrap(), &solver.mass).unwrap();
    (mesh, solver.mass, s)
}

#[test]
fn largest_deformation_examples() {
    let mut d = DMatrix::from_element(4, 6, 0.0);
    for v in 0..4 {
        d[(v, 0)] = 1.0;
    }
    d[(2, 4)] = 5.0;
    let r = Residual::from_matrix(d.clone()).unwrap();
    assert_eq!(largest_deformation_vertex(&r), Some((2, 5.0)));

    d[(2, 4)] = 0.0;
    d[(1, 3)] = 3.0;
    d[(3, 5)] = -3.0;
    assert_eq!(largest_deformation_vertex(&Residual::from_matrix(d).unwrap()).unwrap().0, 1);

    let zero = Residual::<f64>::from_matrix(DMatrix::zeros(3, 3)).unwrap();
    assert_eq!(largest_deformation_vertex(&zero), None);
}

#[test]
fn support_map_examples() {
    let radii = SupportRadii::new(1.0, 3.0).unwrap();
    let d = [0.0, 1.0, 2.0, 3.0, 4.0, f64::INFINITY];
    let m = support_map_from_distances(&d, 0, radii).unwrap();
    assert_eq!(m.weights.as_slice(), &[1.0, 1.0, 0.5, 0.0, 0.0, 0.0]);
    assert_eq!(m.support(), vec![0, 1, 2]);

    let wide = support_map_from_distances(&d, 0, SupportRadii::new(1.0, 100.0).unwrap()).unwrap();
    assert!(wide.weights.iter().take(5).all(|&w| w > 0.0));
    assert_eq!(wide.weights[5], 0.0);

    assert!(SupportRadii::new(2.0, 2.0).is_err());
    assert!(SupportRadii::new(-1.0, 2.0).is_err());

    let mesh = two_tets::<f64>();
    let m = support_map(&mesh, 4, SupportRadii::new(0.5, 1.5).unwrap()).unwrap();
    assert_eq!(m.weights[4], 1.0);
    let full = support_map(&mesh, 0, SupportRadii::full()).unwrap();
    assert!(full.weights.iter().all(|&w| w == 1.0));
}

fn rank_one(c: &[f64], w: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(c.len(), w.len(), |i, j| c[i] * w[j])
}

#[test]
fn extracts_localized_rank_one_factor() {
    let c = [0.0, 2.0, -1.0, 0.5, 0.0, 0.0, 0.0, 0.0];
    let w = [1.0, -0.3, 0.2, 0.7, 0.1, -2.0];
    let r = Residual::from_matrix(rank_one(&c, &w)).unwrap();
    let d: Vec<f64> = (0..8).map(|i| (i as f64 - 1.0).abs()).collect();
    let smap = support_map_from_distances(&d, 1, SupportRadii::new(2.5, 5.0).unwrap()).unwrap();
    let (v, _) = largest_deformation_vertex(&r).unwrap();
    assert_eq!(v, 1);
    let comp = extract_local_component(&r, v, &smap).unwrap();
    let norm = DVector::from_column_slice(&c).norm();
    for i in 0..8 {
        assert!((comp.column[i] - c[i] / norm).abs() < 1e-8);
    }
    let mut r2 = r.clone();
    deflate(&mut r2, &comp.column, &comp.coeffs);
    assert!(r2.norm() < 1e-10);
}

#[test]
fn full_support_matches_leading_singular_vector() {
    let data = DMatrix::from_fn(12, 9, |i, j| ((i * 7 + j * 3) % 11) as f64 - 5.0 + 0.1 * (i * j) as f64);
    let r = Residual::from_matrix(data.clone()).unwrap();
    let (v, _) = largest_deformation_vertex(&r).unwrap();
    let smap = support_map_from_distances(&vec![0.0; 12], v, SupportRadii::full()).unwrap();
    let comp = extract_local_component(&r, v, &smap).unwrap();
    let (u1, sv) = oracle_left(&data, 1);
    let dot = comp.column.dot(&u1.column(0)).abs();
    assert!((1.0 - dot).abs() < 1e-12);
    assert_relative_eq!(comp.sigma, sv[0], max_relative = 1e-12);
    assert!(comp.column[v] > 0.0);
}

#[test]
fn residual_outside_support_is_degenerate() {
    let c = [0.0, 0.0, 0.0, 1.0, 2.0];
    let r = Residual::from_matrix(rank_one(&c, &[1.0, 1.0, 1.0])).unwrap();
    let d = [0.0, 1.0, 2.0, 3.0, 4.0];
    let smap = support_map_from_distances(&d, 0, SupportRadii::new(0.5, 1.5).unwrap()).unwrap();
    assert!(matches!(
        extract_local_component(&r, 4, &smap),
        Err(BasisError::DegenerateComponent { vertex: 4 })
    ));
    assert!(matches!(
        extract_local_component(&r, 0, &smap),
        Err(BasisError::ZeroTrajectory { vertex: 0 })
    ));
}

#[test]
fn deflating_with_zero_coefficients_is_identity() {
    let data = DMatrix::from_fn(4, 3, |i, j| (i + j) as f64);
    let mut r = Residual::from_matrix(data.clone()).unwrap();
    deflate(&mut r, &DVector::from_element(4, 0.5), &DVector::zeros(3));
    assert_eq!(r.data(), &data);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn deflation_never_increases_the_norm(
        vals in prop::collection::vec(-1.0f64..1.0, 60),
        center in 0usize..10,
        d_min in 0.0f64..4.0,
    ) {
        let data = DMatrix::from_column_slice(10, 6, &vals);
        let mut r = Residual::from_matrix(data).unwrap();
        let dist: Vec<f64> = (0..10).map(|i| (i as f64 - center as f64).abs()).collect();
        let smap = support_map_from_distances(&dist, center, SupportRadii::new(d_min, d_min + 3.0).unwrap()).unwrap();
        prop_assume!(r.data().row(center).norm() > 1e-6);
        let before = r.norm();
        let comp = extract_local_component(&r, center, &smap).unwrap();
        deflate(&mut r, &comp.column, &comp.coeffs);
        prop_assert!(r.norm() <= before * (1.0 + 1e-14));
    }
}

#[test]
fn rigid_translation_is_one_uniform_component() {
    let mesh = two_tets::<f64>();
    let mass = crate::mesh::lumped_mass_matrix(&mesh, 10.0).unwrap();
    let frames: Vec<_> = (0..6)
        .map(|t| {
            let mut q = mesh.vertices().clone();
            q.column_mut(0).add_scalar_mut(0.3 * t as f64);
            q
        })
        .collect();
    let s = center(&SnapshotSet::from_frames(&frames, vec![0.0; 6]).unwrap()).unwrap();
    let sw = mass_weight(&s, &mass).unwrap();
    let basis = build_pca_basis(&sw, &mesh, &PcaParams::new(3, SupportRadii::full()), &mass).unwrap();
    assert_eq!(basis.k(), 1);
    assert!(matches!(
        basis.warnings()[0],
        BasisWarning::RankExhausted { requested: 3, found: 1 }
    ));
    let col = basis.u().column(0);
    for v in 1..5 {
        assert!((col[v] - col[0]).abs() < 1e-12);
    }
    assert!(reconstruction_error(&basis, &s, &mass).unwrap() < 1e-8);
}

#[test]
fn stops_at_numerical_rank() {
    let (mesh, mass, s) = swinging_bar(40);
    // restrict the motion to three frames: rank <= 9, typically lower
    let few = s.select_frames(&[0, 13, 29]).unwrap();
    let svd_rank = {
        let sv = few.data().singular_values();
        let top = sv.max();
        sv.iter().filter(|&&x| x > 1e-10 * top).count()
    };
    let basis = build_pca_basis(&few, &mesh, &PcaParams::new(40, SupportRadii::full()), &mass).unwrap();
    assert_eq!(basis.k(), svd_rank);
    assert!(basis
        .warnings()
        .iter()
        .any(|w| matches!(w, BasisWarning::RankExhausted { requested: 40, .. })));
}

#[test]
fn full_support_reproduces_truncated_svd() {
    let (mesh, mass, s) = swinging_bar(60);
    let (oracle, sv) = oracle_left(s.data(), 12);
    let basis = build_pca_basis(&s, &mesh, &PcaParams::new(12, SupportRadii::full()), &mass).unwrap();
    for k in [1, 3, 6, 12] {
        if sv[k - 1] - sv[k] < 1e-6 * sv[0] {
            continue;
        }
        let q = weighted(&basis.u().columns(0, k).into_owned(), &mass);
        let sine = max_principal_sine(&q, &oracle.columns(0, k).into_owned());
        assert!(sine < 1e-6, "k={k}: sin θ = {sine:e}");
    }
    for (info, sigma) in basis.components().iter().zip(&sv) {
        assert!((info.sigma - sigma).abs() <= 1e-6 * sv[0]);
    }
    assert!(basis.orthonormality_error(&mass) < 1e-10);
}

#[test]
fn localized_basis_is_m_orthonormal_and_deflation_monotone() {
    let (mesh, mass, s) = swinging_bar(40);
    let diag = mesh.bounding_diagonal();
    let radii = SupportRadii::new(0.15 * diag, 0.5 * diag).unwrap();
    let basis = build_pca_basis(&s, &mesh, &PcaParams::new(20, radii), &mass).unwrap();
    assert!(basis.orthonormality_error(&mass) < 1e-8);
    let norms: Vec<f64> = basis.components().iter().map(|c| c.residual_norm).collect();
    for w in norms.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12));
    }
    let raw = mass_unweight_for_test(&s, &mass);
    let mut last = 1.0;
    for k in 1..=basis.k() {
        let e = reconstruction_error(&basis.truncate(k).unwrap(), &raw, &mass).unwrap();
        assert!(e <= last + 1e-12, "k={k}: {e} > {last}");
        last = e;
    }
}

fn mass_unweight_for_test(s: &SnapshotSet<f64>, mass: &MassMatrix<f64>) -> SnapshotSet<f64> {
    crate::snapshots::mass_unweight(s, mass).unwrap()
}

#[test]
fn reconstruction_error_edges() {
    let (mesh, mass, s) = swinging_bar(10);
    let raw = mass_unweight_for_test(&s, &mass);
    let empty = DMatrix::<f64>::zeros(mesh.num_vertices(), 0);
    assert_eq!(projection_error(&empty, raw.data(), &mass).unwrap(), 1.0);

    // the raw snapshot columns span themselves
    let basis = Basis::external(
        oracle_left(raw.data(), raw.data().rank(1e-9 * raw.data().amax()).min(30)).0,
        raw.mean_shape().clone(),
        &mass,
    )
    .unwrap();
    let e = reconstruction_error(&basis, &raw, &mass).unwrap();
    assert!(e < 1e-10, "{e}");
    assert!(matches!(
        reconstruction_error(&basis, &s, &mass),
        Err(BasisError::SnapshotState(_))
    ));
}

#[test]
fn rotation_is_retained_without_alignment() {
    let mesh = tet_box::<f64>(3, 2, 2, [1.0, 0.6, 0.4]);
    let mass = crate::mesh::lumped_mass_matrix(&mesh, 50.0).unwrap();
    let axis = Vector3::new(0.3, 1.0, 0.2).normalize();
    let frames: Vec<_> = (0..20)
        .map(|i| {
            let angle = std::f64::consts::FRAC_PI_2 * i as f64 / 19.0;
            let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            DMatrix::from_fn(mesh.num_vertices(), 3, |v, c| (rot * mesh.vertex(v))[c])
        })
        .collect();
    let s = center(&SnapshotSet::from_frames(&frames, vec![0.0; 20]).unwrap()).unwrap();
    assert!(s.data().norm() > 1.0);
    let sw = mass_weight(&s, &mass).unwrap();
    let basis = build_pca_basis(&sw, &mesh, &PcaParams::new(12, SupportRadii::full()), &mass).unwrap();
    assert!(reconstruction_error(&basis, &s, &mass).unwrap() < 0.05);
}

#[test]
fn splocs_without_sparsity_keeps_the_pca_span() {
    let (mesh, mass, s) = swinging_bar(40);
    let k = 6;
    let pca = build_pca_basis(&s, &mesh, &PcaParams::new(k, SupportRadii::full()), &mass).unwrap();
    let sp = build_splocs_basis(&s, &mesh, &SplocsParams::new(k, SupportRadii::full(), 0.0), &mass).unwrap();
    assert_eq!(sp.kind(), BasisKind::Splocs);
    assert_eq!(sp.k(), k);
    let q1 = weighted(pca.u(), &mass);
    let q2 = weighted(sp.u(), &mass).qr().q();
    assert!(max_principal_sine(&q1, &q2) < 1e-4);
}

#[test]
fn huge_sparsity_collapses_everything() {
    let (mesh, mass, s) = swinging_bar(20);
    let scale = s.data().amax();
    let params = SplocsParams::new(4, SupportRadii::full(), 1e6 * scale);
    assert!(matches!(
        build_splocs_basis(&s, &mesh, &params, &mass),
        Err(BasisError::DegenerateBasis)
    ));
}

#[test]
fn splocs_separates_disjoint_bumps() {
    let mesh = tet_box::<f64>(12, 1, 1, [6.0, 0.5, 0.5]);
    let n = mesh.num_vertices();
    let mass = MassMatrix::identity(n);
    let bump = |x: f64, c: f64| (1.0 - ((x - c) / 0.8).powi(2)).max(0.0);
    let frames: Vec<_> = (0..16)
        .map(|t| {
            let (a, b) = ((0.7 * t as f64).sin(), (1.3 * t as f64 + 0.4).cos() * 0.6);
            let mut q = mesh.vertices().clone();
            for v in 0..n {
                let x = mesh.vertex(v).x;
                q[(v, 1)] += a * bump(x, 1.2);
                q[(v, 2)] += b * bump(x, 4.8);
            }
            q
        })
        .collect();
    let s = mass_weight(
        &center(&SnapshotSet::from_frames(&frames, vec![0.0; 16]).unwrap()).unwrap(),
        &mass,
    )
    .unwrap();
    let mut params = SplocsParams::new(2, SupportRadii::new(1.0, 2.0).unwrap(), 1e-3);
    params.passes = 5;
    let sp = build_splocs_basis(&s, &mesh, &params, &mass).unwrap();
    assert_eq!(sp.k(), 2);
    let left: Vec<bool> = (0..n).map(|v| mesh.vertex(v).x < 3.0).collect();
    let mut sides = Vec::new();
    for j in 0..2 {
        let col = sp.u().column(j);
        let (mut l, mut r) = (0.0, 0.0);
        for v in 0..n {
            if left[v] {
                l += col[v] * col[v];
            } else {
                r += col[v] * col[v];
            }
        }
        let (own, cross) = if l > r { (l, r) } else { (r, l) };
        assert!(cross < 0.01 * own, "component {j} leaks {cross} vs {own}");
        sides.push(l > r);
    }
    assert_ne!(sides[0], sides[1]);
}

#[test]
fn archive_roundtrip_is_bitwise_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (mesh, mass, s) = swinging_bar(20);
    let diag = mesh.bounding_diagonal();
    let params = PcaParams::new(8, SupportRadii::new(0.2 * diag, 0.6 * diag).unwrap());
    let a = build_pca_basis(&s, &mesh, &params, &mass).unwrap();
    let b = build_pca_basis(&s, &mesh, &params, &mass).unwrap();
    let (pa, pb) = (dir.path().join("a.pdba"), dir.path().join("b.pdba"));
    save_basis(&a, &pa).unwrap();
    save_basis(&b, &pb).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    let back: Basis<f64> = load_basis(&pa).unwrap();
    assert_eq!(back, a);
    back.check_mass(&mass).unwrap();
    assert!(back.check_mass(&MassMatrix::identity(mesh.num_vertices())).is_err());

    std::fs::write(&pa, b"PDSS\x01\x00\x00\x00").unwrap();
    assert!(matches!(load_basis::<f64>(&pa), Err(BasisError::Archive { .. })));
    let bytes = std::fs::read(&pb).unwrap();
    std::fs::write(&pb, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_basis::<f64>(&pb).is_err());
}

#[test]
fn builds_in_single_precision() {
    let mesh = tet_box::<f32>(3, 1, 1, [1.0, 0.3, 0.3]);
    let mass = MassMatrix::<f32>::identity(mesh.num_vertices());
    let frames: Vec<_> = (0..5)
        .map(|t| {
            let mut q = mesh.vertices().clone();
            for v in 0..mesh.num_vertices() {
                q[(v, 1)] += 0.1 * t as f32 * mesh.vertex(v).x * mesh.vertex(v).x;
            }
            q
        })
        .collect();
    let s = mass_weight(
        &center(&SnapshotSet::from_frames(&frames, vec![0.0; 5]).unwrap()).unwrap(),
        &mass,
    )
    .unwrap();
    let basis = build_pca_basis(&s, &mesh, &PcaParams::new(2, SupportRadii::full()), &mass).unwrap();
    assert!(basis.orthonormality_error(&mass) < 1e-4);
}
