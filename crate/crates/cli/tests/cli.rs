use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use snapdyn::basis::{load_basis, reconstruction_error, save_basis};
use snapdyn::bench::CSV_HEADER;
use snapdyn::config::Config;
use snapdyn::mesh::lumped_mass_matrix;
use snapdyn::snapshots::{self, mass_unweight};
use snapdyn::{Basis, MassMatrix, Mesh, SnapshotSet};
use tempfile::TempDir;

const TWO_TETS: &str = r#"
[mesh]
generator = { kind = "two_tets" }
[solver]
dt = 0.01
iterations = 10
[constraints]
tet_strain = 1000.0
anchors = [0]
"#;

const BAR: &str = r#"
[mesh]
generator = { kind = "box", dims = [4, 2, 2], size = [2.0, 0.5, 0.5] }
[solver]
dt = 0.02
iterations = 10
density = 100.0
[constraints]
tet_strain = 2000.0
anchor_box = [[-0.01, -1, -1], [0.01, 1, 1]]
[initial]
angular_velocity = [0.0, -0.4, 0.0]
[run]
frames = 60
output_stride = 0
[snapshots]
frames = 60
stride = 1
"#;

fn snapdyn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snapdyn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn setup(config: &str) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, config).unwrap();
    (dir, path)
}

fn trajectory(dir: &Path) -> Vec<DMatrix<f64>> {
    let set: SnapshotSet = snapshots::load(&dir.join("trajectory.pdss")).unwrap();
    (0..set.num_frames()).map(|t| set.frame(t)).collect()
}

fn config_mesh(path: &Path) -> (Config, Mesh, MassMatrix) {
    let cfg = Config::load(path).unwrap();
    let mesh: Mesh = cfg.build_mesh().unwrap();
    let mass = lumped_mass_matrix(&mesh, cfg.solver.density).unwrap();
    (cfg, mesh, mass)
}

#[test]
fn simulate_writes_one_file_per_frame() {
    let (dir, _) = setup(TWO_TETS);
    let stdout = ok(&snapdyn(
        dir.path(),
        &["--config", "run.toml", "--out", "run", "--seedless", "simulate", "--frames", "100"],
    ));
    let objs = fs::read_dir(dir.path().join("run"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "obj"))
        .count();
    assert_eq!(objs, 100);
    assert!(stdout.lines().last().unwrap().starts_with("simulated 100 frames"));
    assert_eq!(stdout.lines().filter(|l| l.contains("objective")).count(), 100);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["stable"], true);
}

#[test]
fn free_fall_matches_recurrence() {
    let (dir, path) = setup(
        r#"
[mesh]
generator = { kind = "two_tets" }
[solver]
dt = 0.01
iterations = 3
gravity = [0.0, -9.81, 0.0]
[initial]
velocity = [0.5, 1.0, 0.0]
[run]
output_stride = 0
"#,
    );
    ok(&snapdyn(
        dir.path(),
        &["--config", "run.toml", "--out", "ff", "simulate", "--frames", "100", "--allow-unconstrained"],
    ));
    let (cfg, mesh, _) = config_mesh(&path);
    let frames = trajectory(&dir.path().join("ff"));
    assert_eq!(frames.len(), 100);
    let dt = cfg.solver.dt;
    let g = [0.0, -9.81, 0.0];
    let mut q = mesh.vertices().clone();
    let mut v = DMatrix::from_fn(q.nrows(), 3, |_, c| [0.5, 1.0, 0.0][c]);
    for got in &frames {
        let next = DMatrix::from_fn(q.nrows(), 3, |i, c| q[(i, c)] + dt * v[(i, c)] + dt * dt * g[c]);
        v = (&next - &q) / dt;
        q = next;
        assert!((got - &q).amax() < 1e-12);
    }
    // without the flag an empty constraint set is a configuration error
    let out = snapdyn(dir.path(), &["--config", "run.toml", "--out", "ff2", "simulate", "--frames", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_mesh_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = snapdyn(dir.path(), &["--out", "x", "simulate", "--mesh", "no_such_mesh.obj"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_mesh.obj"));

    let out = snapdyn(dir.path(), &["--config", "absent.toml", "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));

    let out = snapdyn(dir.path(), &["simulate", "--frames", "many"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn snapshot_counts_and_determinism() {
    let (dir, _) = setup(TWO_TETS);
    let run = |out: &str, frames: &str, stride: &str| {
        ok(&snapdyn(
            dir.path(),
            &["--config", "run.toml", "--out", out, "snapshot", "--frames", frames, "--stride", stride],
        ))
    };
    let stdout = run("a", "50", "5");
    assert!(stdout.contains("T=10"), "{stdout}");
    run("b", "50", "5");
    let a = fs::read(dir.path().join("a/snapshots.pdss")).unwrap();
    let b = fs::read(dir.path().join("b/snapshots.pdss")).unwrap();
    assert_eq!(a, b);

    let stdout = run("c", "5", "8");
    assert!(stdout.contains("T=1 "), "{stdout}");
    let set: SnapshotSet = snapshots::load(&dir.path().join("c/snapshots.pdss")).unwrap();
    assert_eq!(set.timestamps(), &[0.01]);
}

/// Singular values of the weighted snapshot matrix, descending.
fn weighted_singular_values(set: &SnapshotSet) -> Vec<f64> {
    let mut sv: Vec<f64> = set.data().clone().svd(false, false).singular_values.iter().cloned().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

#[test]
fn full_support_deflation_curve_matches_svd() {
    let (dir, _) = setup(BAR);
    ok(&snapdyn(dir.path(), &["--config", "run.toml", "--out", "s", "snapshot"]));
    let stdout = ok(&snapdyn(
        dir.path(),
        &["--config", "run.toml", "--out", "s", "basis", "--snapshots", "s/snapshots.pdss", "--k", "8"],
    ));
    let set: SnapshotSet = snapshots::load(&dir.path().join("s/snapshots.pdss")).unwrap();
    let sv = weighted_singular_values(&set);
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let mut rest = total;
    let printed: Vec<(f64, f64)> = stdout
        .lines()
        .filter(|l| l.starts_with("component"))
        .map(|l| {
            let w: Vec<&str> = l.split_whitespace().collect();
            (w[5].parse().unwrap(), w[7].parse().unwrap())
        })
        .collect();
    assert_eq!(printed.len(), 8);
    for (i, (sigma, residual)) in printed.into_iter().enumerate() {
        rest -= sv[i] * sv[i];
        assert!((sigma - sv[i]).abs() < 1e-6 * sv[0], "component {i}: {sigma} vs {}", sv[i]);
        assert!((residual - rest.max(0.0).sqrt()).abs() < 1e-6 * sv[0], "residual {i}");
    }
}

#[test]
fn huge_lambda_warns_and_fails() {
    let (dir, _) = setup(BAR);
    ok(&snapdyn(dir.path(), &["--config", "run.toml", "--out", "s", "snapshot", "--frames", "20"]));
    let out = snapdyn(
        dir.path(),
        &[
            "--config", "run.toml", "--out", "s", "basis", "--snapshots", "s/snapshots.pdss", "--kind", "splocs",
            "--k", "4", "--d-min", "0.5", "--d-max", "1.0", "--lambda", "1e9",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning"), "{stderr}");
    assert!(!dir.path().join("s/basis.pdba").exists());
}

fn write_identity_basis(dir: &Path, mesh: &Mesh, mass: &MassMatrix) -> PathBuf {
    let n = mesh.num_vertices();
    let u = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| 1.0 / mass.diag()[i].sqrt()));
    let basis = Basis::external(u, DMatrix::zeros(n, 3), mass).unwrap();
    let path = dir.join("identity.pdba");
    save_basis(&basis, &path).unwrap();
    path
}

#[test]
fn reduce_full_rank_matches_simulate() {
    let (dir, path) = setup(BAR);
    let (_, mesh, mass) = config_mesh(&path);
    let basis = write_identity_basis(dir.path(), &mesh, &mass);
    ok(&snapdyn(dir.path(), &["--config", "run.toml", "--out", "full", "simulate"]));
    let stdout = ok(&snapdyn(
        dir.path(),
        &["--config", "run.toml", "--out", "red", "reduce", "--basis", basis.to_str().unwrap()],
    ));
    assert!(stdout.contains("stable=true"));
    let full = trajectory(&dir.path().join("full"));
    let red = trajectory(&dir.path().join("red"));
    assert_eq!(full.len(), 60);
    for (a, b) in full.iter().zip(&red) {
        assert!((a - b).amax() < 1e-8);
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("red/summary.json")).unwrap()).unwrap();
    assert!(summary["max_reduced_residual"].as_f64().unwrap() < 1e-8);

    let cmp = ok(&snapdyn(dir.path(), &["--out", "cmp", "compare", "full", "red/trajectory.pdss"]));
    assert!(cmp.starts_with("frames 60"));
    let csv = fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 61);
}

#[test]
fn reduced_k10_tracks_reconstruction_error() {
    let (dir, path) = setup(BAR);
    ok(&snapdyn(dir.path(), &["--config", "run.toml", "--out", "s", "snapshot"]));
    ok(&snapdyn(
        dir.path(),
        &["--config", "run.toml", "--out", "s", "basis", "--snapshots", "s/snapshots.pdss", "--k", "10"],
    ));
    ok(&snapdyn(dir.path(), &["--config", "run.toml", "--out", "full", "simulate"]));
    ok(&snapdyn(dir.path(), &["--config", "run.toml", "--out", "red", "reduce", "--basis", "s/basis.pdba"]));
    let (_, _, mass) = config_mesh(&path);
    let basis: Basis = load_basis(&dir.path().join("s/basis.pdba")).unwrap();
    let weighted: SnapshotSet = snapshots::load(&dir.path().join("s/snapshots.pdss")).unwrap();
    let centered = mass_unweight(&weighted, &mass).unwrap();
    let recon = reconstruction_error(&basis, &centered, &mass).unwrap();
    let err = snapdyn::bench::compare_trajectories(&trajectory(&dir.path().join("full")), &trajectory(&dir.path().join("red")))
        .unwrap();
    assert!(err.frobenius < recon * 1.1, "trajectory {} vs reconstruction {recon}", err.frobenius);
}

#[test]
fn divergence_exits_one() {
    let (dir, _) = setup(
        r#"
[mesh]
generator = { kind = "two_tets" }
[solver]
dt = 1.0
iterations = 2
gravity = [0.0, -1.7e308, 0.0]
[constraints]
tet_strain = 1000.0
[run]
frames = 5
output_stride = 0
"#,
    );
    let out = snapdyn(dir.path(), &["--config", "run.toml", "--out", "d", "simulate"]);
    assert_eq!(out.status.code(), Some(1));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("d/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["stable"], false);

    let mesh: Mesh = snapdyn::mesh::two_tets();
    let mass = lumped_mass_matrix(&mesh, 1000.0).unwrap();
    let basis = write_identity_basis(dir.path(), &mesh, &mass);
    let out = snapdyn(
        dir.path(),
        &["--config", "run.toml", "--out", "r", "reduce", "--basis", basis.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(1));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["stable"], false);
}

#[test]
fn reduce_rejects_mismatched_basis() {
    let (dir, _) = setup(TWO_TETS);
    let mesh: Mesh = snapdyn::mesh::tet_box(1, 1, 1, [1.0; 3]);
    let mass = lumped_mass_matrix(&mesh, 1000.0).unwrap();
    let basis = write_identity_basis(dir.path(), &mesh, &mass);
    let out = snapdyn(
        dir.path(),
        &["--config", "run.toml", "--out", "r", "reduce", "--basis", basis.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vertices"));
}

#[test]
fn bench_csv_and_full_rank_cost() {
    let (dir, path) = setup(
        r#"
[mesh]
generator = { kind = "box", dims = [6, 6, 6], size = [1.0, 1.0, 1.0] }
[solver]
dt = 0.02
iterations = 3
[constraints]
tet_strain = 1000.0
anchor_box = [[-0.01, -1, -1], [0.01, 2, 2]]
"#,
    );
    let (_, mesh, mass) = config_mesh(&path);
    let n = mesh.num_vertices();
    let basis = write_identity_basis(dir.path(), &mesh, &mass);
    let sizes = n.to_string();
    let stdout = ok(&snapdyn(
        dir.path(),
        &["--config", "run.toml", "--out", "b", "bench", "--basis", basis.to_str().unwrap(), "--sizes", &sizes],
    ));
    let csv = fs::read_to_string(dir.path().join("b/bench.csv")).unwrap();
    assert_eq!(stdout, csv);
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# bench-csv v1 "));
    assert_eq!(lines[1], CSV_HEADER);
    let fields: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(fields[0], sizes);
    assert_eq!(fields[1], "external");
    assert_eq!(fields[6], "true");
    let relative: f64 = fields[4].parse().unwrap();
    assert!(relative > 0.8, "k = n relative time {relative}");
    let traj: f64 = fields[5].parse().unwrap();
    assert!(traj < 1e-8);
    let wide = fs::read_to_string(dir.path().join("b/bench_wide.csv")).unwrap();
    assert!(wide.starts_with("basis,lbsPosGlobal_relative\n"));

    let out = snapdyn(dir.path(), &["--config", "run.toml", "--out", "b2", "bench"]);
    assert_eq!(out.status.code(), Some(2));
}
