use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde_json::json;

use snapdyn::basis::{build_pca_basis, build_splocs_basis, load_basis, save_basis, BasisError, BasisKind};
use snapdyn::bench::{self, compare_trajectories, BenchEnv, BenchError};
use snapdyn::config::Config;
use snapdyn::mesh::{export_frame, FrameFormat, MeshFormat, load_mesh};
use snapdyn::pd::{objective, PdError, StepObserver};
use snapdyn::reduced::{reduce_system, reduced_step_observed, ReducedError};
use snapdyn::snapshots::{self, sidecar_path, Schedule};
use snapdyn::{Basis, FullSolver, Mesh, ReducedState, SimState, SnapshotSet};

const TRAJECTORY: &str = "trajectory.pdss";

#[derive(Parser)]
#[command(name = "snapdyn", version, about = "Projective dynamics with snapshot-based reduced subspaces")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Assert that no random number generator is involved (none ever is).
    #[arg(long, global = true)]
    seedless: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct MeshArg {
    /// Mesh file (.obj, .ply, .node/.ele); overrides the configured mesh.
    #[arg(long)]
    mesh: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full solver and write frames.
    Simulate {
        #[command(flatten)]
        mesh: MeshArg,
        #[arg(long)]
        frames: Option<usize>,
        /// Allow an empty constraint set (free fall).
        #[arg(long)]
        allow_unconstrained: bool,
    },
    /// Record, center, mass-weight and save snapshots.
    Snapshot {
        #[command(flatten)]
        mesh: MeshArg,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        /// Archive file name inside the output directory.
        #[arg(long, default_value = "snapshots.pdss")]
        name: String,
    },
    /// Build a PCA or SPLOCS basis from a snapshot archive.
    Basis {
        #[command(flatten)]
        mesh: MeshArg,
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        d_min: Option<f64>,
        #[arg(long)]
        d_max: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value = "basis.pdba")]
        name: String,
    },
    /// Run the reduced solver with a basis archive and write frames.
    Reduce {
        #[command(flatten)]
        mesh: MeshArg,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Time the global step of full and reduced runs.
    Bench {
        #[command(flatten)]
        mesh: MeshArg,
        /// Basis archives; at least one.
        #[arg(long = "basis")]
        bases: Vec<PathBuf>,
        /// Comma-separated basis sizes.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Compare two recorded trajectories.
    Compare {
        /// Reference run (trajectory archive or run directory).
        a: PathBuf,
        b: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Pca,
    Splocs,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Usage(_) => 2,
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {}", describe(e));
            ExitCode::from(f.code())
        }
    }
}

/// Error chain without causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

struct Ctx {
    cfg: Config,
    hash: String,
    out: PathBuf,
}

impl Ctx {
    fn mesh(&self, arg: &MeshArg) -> Outcome<Mesh> {
        match &arg.mesh {
            Some(path) => {
                let format = MeshFormat::from_path(path)
                    .ok_or_else(|| usage(anyhow!("unrecognized mesh extension: {}", path.display())))?;
                load_mesh(path, format).map_err(usage)
            }
            None => self.cfg.build_mesh().map_err(usage),
        }
    }

    fn solver(&self, mesh: &Mesh) -> Outcome<FullSolver> {
        FullSolver::new(mesh, &self.cfg.solver, &self.cfg.constraints).map_err(|e| match e {
            PdError::Divergence { .. } => runtime(e),
            _ => usage(e),
        })
    }

    fn out_dir(&self) -> Outcome<&Path> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("cannot create {}", self.out.display()))
            .map_err(usage)?;
        Ok(&self.out)
    }
}

fn run(cli: &Cli) -> Outcome<()> {
    let (cfg, text) = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))
                .map_err(usage)?;
            (Config::load(path).map_err(usage)?, text)
        }
        None => (Config::default(), String::new()),
    };
    let ctx = Ctx {
        hash: bench::config_hash(text.as_bytes()),
        cfg,
        out: cli.out.clone(),
    };
    if cli.seedless {
        eprintln!("seedless: no random number generator is used");
    }
    match &cli.command {
        Command::Simulate {
            mesh,
            frames,
            allow_unconstrained,
        } => simulate(&ctx, mesh, frames.unwrap_or(ctx.cfg.run.frames), *allow_unconstrained),
        Command::Snapshot {
            mesh,
            frames,
            stride,
            name,
        } => snapshot(&ctx, mesh, *frames, *stride, name),
        Command::Basis {
            mesh,
            snapshots,
            kind,
            k,
            d_min,
            d_max,
            lambda,
            name,
        } => {
            let mut bc = ctx.cfg.basis.clone();
            if let Some(kind) = kind {
                bc.kind = match kind {
                    KindArg::Pca => "pca",
                    KindArg::Splocs => "splocs",
                }
                .into();
            }
            bc.k = k.unwrap_or(bc.k);
            bc.d_min = d_min.or(bc.d_min);
            bc.d_max = d_max.or(bc.d_max);
            bc.lambda = lambda.unwrap_or(bc.lambda);
            build_basis(&ctx, mesh, snapshots, &bc, name)
        }
        Command::Reduce { mesh, basis, frames } => reduce(&ctx, mesh, basis, frames.unwrap_or(ctx.cfg.run.frames)),
        Command::Bench { mesh, bases, sizes } => bench_cmd(&ctx, mesh, bases, sizes.as_deref()),
        Command::Compare { a, b } => compare(&ctx, a, b),
    }
}

/// Per-frame objective (after the last alternation) and global-step time.
#[derive(Default)]
struct FrameLog<'a> {
    ctx: Option<(&'a FullSolver, f64)>,
    last_objective: f64,
    global: f64,
    residual: f64,
}

impl StepObserver<f64> for FrameLog<'_> {
    fn iteration(&mut self, _: usize, q: &DMatrix<f64>, s: &DMatrix<f64>) {
        if let Some((solver, dt)) = self.ctx {
            self.last_objective = objective(q, s, &solver.mass, &solver.constraints, dt);
        }
    }
    fn global_solve(&mut self, elapsed: std::time::Duration) {
        self.global += elapsed.as_secs_f64();
    }
    fn wants_residual(&self) -> bool {
        true
    }
    fn reduced_residual(&mut self, r: f64) {
        self.residual = self.residual.max(r);
    }
}

struct FrameWriter<'a> {
    mesh: &'a Mesh,
    dir: PathBuf,
    stride: usize,
    format: FrameFormat,
}

impl FrameWriter<'_> {
    fn write(&self, frame: usize, q: &DMatrix<f64>) -> Outcome<()> {
        if self.stride == 0 || frame % self.stride != 0 {
            return Ok(());
        }
        let path = self.dir.join(format!("frame_{frame:05}.{}", self.format.extension()));
        export_frame(self.mesh, q, &path, self.format).map_err(runtime)
    }
}

fn save_trajectory(dir: &Path, frames: &[DMatrix<f64>], dt: f64, extra: serde_json::Value) -> Outcome<()> {
    if frames.is_empty() {
        return Ok(());
    }
    let stamps = (1..=frames.len()).map(|f| f as f64 * dt).collect();
    let set = SnapshotSet::from_frames(frames, stamps).map_err(runtime)?;
    snapshots::save(&set, &dir.join(TRAJECTORY), extra).map_err(runtime)
}

fn write_summary(dir: &Path, summary: &serde_json::Value) -> Outcome<()> {
    let text = serde_json::to_string_pretty(summary).map_err(runtime)?;
    fs::write(dir.join("summary.json"), text + "\n").map_err(runtime)
}

fn simulate(ctx: &Ctx, mesh_arg: &MeshArg, frames: usize, allow_unconstrained: bool) -> Outcome<()> {
    let mesh = ctx.mesh(mesh_arg)?;
    let mut cc = ctx.cfg.constraints.clone();
    cc.allow_unconstrained |= allow_unconstrained;
    let solver = FullSolver::new(&mesh, &ctx.cfg.solver, &cc).map_err(usage)?;
    let dir = ctx.out_dir()?;
    let writer = FrameWriter {
        mesh: &mesh,
        dir: dir.to_path_buf(),
        stride: ctx.cfg.run.output_stride,
        format: ctx.cfg.run.format.into(),
    };
    let dt = ctx.cfg.solver.dt;
    let mut state: SimState = ctx.cfg.initial.state(&mesh);
    let mut log_csv = String::from("frame,objective,global_ms,wall_ms\n");
    let mut positions = Vec::with_capacity(frames);
    let mut diverged = None;
    let start = Instant::now();
    for _ in 0..frames {
        let mut log = FrameLog {
            ctx: Some((&solver, dt)),
            ..Default::default()
        };
        let t0 = Instant::now();
        match solver.step_observed(&state, &mut log) {
            Ok(next) => state = next,
            Err(e @ PdError::Divergence { .. }) => {
                diverged = Some(e.to_string());
                break;
            }
            Err(e) => return Err(runtime(e)),
        }
        let wall = t0.elapsed().as_secs_f64() * 1e3;
        println!(
            "frame {:5} objective {:.9e} global {:.3} ms wall {:.3} ms",
            state.frame,
            log.last_objective,
            log.global * 1e3,
            wall
        );
        log_csv.push_str(&format!(
            "{},{:.12e},{:.6},{:.6}\n",
            state.frame,
            log.last_objective,
            log.global * 1e3,
            wall
        ));
        writer.write(state.frame, &state.q)?;
        positions.push(state.q.clone());
    }
    let total = start.elapsed().as_secs_f64();
    fs::write(dir.join("frames.csv"), log_csv).map_err(runtime)?;
    save_trajectory(dir, &positions, dt, json!({"run": "full", "config": ctx.hash}))?;
    let stable = diverged.is_none();
    write_summary(
        dir,
        &json!({
            "run": "full",
            "vertices": mesh.num_vertices(),
            "constraints": solver.constraints.len(),
            "frames": positions.len(),
            "stable": stable,
            "wall_s": total,
            "config": ctx.hash,
        }),
    )?;
    println!(
        "simulated {} frames, n={}, {} constraints, {:.3} s, stable={stable}",
        positions.len(),
        mesh.num_vertices(),
        solver.constraints.len(),
        total
    );
    match diverged {
        Some(msg) => Err(runtime(anyhow!(msg))),
        None => Ok(()),
    }
}

fn snapshot(ctx: &Ctx, mesh_arg: &MeshArg, frames: Option<usize>, stride: Option<usize>, name: &str) -> Outcome<()> {
    let mesh = ctx.mesh(mesh_arg)?;
    let solver = ctx.solver(&mesh)?;
    let schedule = Schedule::new(
        frames.unwrap_or(ctx.cfg.snapshots.frames),
        stride.unwrap_or(ctx.cfg.snapshots.stride),
    );
    if schedule.frames == 0 || schedule.stride == 0 {
        return Err(usage(anyhow!("frames and stride must be at least 1")));
    }
    let init = ctx.cfg.initial.state(&mesh);
    let raw = snapshots::record(&solver, &init, schedule).map_err(|e| match e {
        snapshots::SnapshotError::Solver(_) => runtime(e),
        _ => usage(e),
    })?;
    let centered = snapshots::center(&raw).map_err(runtime)?;
    let weighted = snapshots::mass_weight(&centered, &solver.mass).map_err(runtime)?;
    let dir = ctx.out_dir()?;
    let path = dir.join(name);
    snapshots::save(
        &weighted,
        &path,
        json!({
            "config": ctx.hash,
            "density": ctx.cfg.solver.density,
            "mass_fingerprint": solver.mass.fingerprint(),
            "frames": schedule.frames,
            "stride": schedule.stride,
        }),
    )
    .map_err(runtime)?;
    println!(
        "snapshots n={} T={} norm={:.9e} -> {}",
        weighted.num_vertices(),
        weighted.num_frames(),
        weighted.data().norm(),
        path.display()
    );
    Ok(())
}

fn build_basis(
    ctx: &Ctx,
    mesh_arg: &MeshArg,
    archive: &Path,
    bc: &snapdyn::config::BasisConfig,
    name: &str,
) -> Outcome<()> {
    let kind = bc.kind().map_err(usage)?;
    let mesh = ctx.mesh(mesh_arg)?;
    let mass = snapdyn::mesh::lumped_mass_matrix(&mesh, ctx.cfg.solver.density).map_err(usage)?;
    let s: SnapshotSet = snapshots::load(archive).map_err(usage)?;
    if let Ok(text) = fs::read_to_string(sidecar_path(archive)) {
        let meta: serde_json::Value = serde_json::from_str(&text).map_err(usage)?;
        if let Some(fp) = meta.pointer("/extra/mass_fingerprint").and_then(|v| v.as_u64()) {
            if fp != mass.fingerprint() {
                return Err(usage(anyhow!(
                    "snapshots were weighted with different masses than this mesh and density give"
                )));
            }
        }
    }
    let classify = |e: BasisError| match e {
        BasisError::DegenerateBasis | BasisError::DegenerateComponent { .. } | BasisError::ZeroTrajectory { .. } => {
            runtime(e)
        }
        _ => usage(e),
    };
    let built = match kind {
        BasisKind::Pca => build_pca_basis(&s, &mesh, &bc.pca().map_err(usage)?, &mass),
        _ => build_splocs_basis(&s, &mesh, &bc.splocs().map_err(usage)?, &mass),
    };
    let basis = match built {
        Ok(b) => b,
        Err(BasisError::DegenerateBasis) => {
            eprintln!("warning: every component collapsed; no basis written");
            return Err(runtime(BasisError::DegenerateBasis));
        }
        Err(e) => return Err(classify(e)),
    };
    for (i, c) in basis.components().iter().enumerate() {
        println!(
            "component {:4} center {:6} sigma {:.9e} residual {:.9e}",
            i, c.center, c.sigma, c.residual_norm
        );
    }
    for w in basis.warnings() {
        eprintln!("warning: {w}");
    }
    let dir = ctx.out_dir()?;
    let path = dir.join(name);
    save_basis(&basis, &path).map_err(runtime)?;
    println!(
        "{} basis k={} n={} orthonormality {:.3e} -> {}",
        basis.kind(),
        basis.k(),
        basis.num_vertices(),
        basis.orthonormality_error(&mass),
        path.display()
    );
    Ok(())
}

fn load_checked_basis(path: &Path, solver: &FullSolver) -> Outcome<Basis> {
    let basis: Basis = load_basis(path).map_err(usage)?;
    if basis.num_vertices() != solver.mass.len() {
        return Err(usage(anyhow!(
            "basis {} has {} vertices, mesh has {}",
            path.display(),
            basis.num_vertices(),
            solver.mass.len()
        )));
    }
    basis
        .check_mass(&solver.mass)
        .with_context(|| format!("basis {}", path.display()))
        .map_err(usage)?;
    Ok(basis)
}

fn reduce(ctx: &Ctx, mesh_arg: &MeshArg, basis_path: &Path, frames: usize) -> Outcome<()> {
    let mesh = ctx.mesh(mesh_arg)?;
    let solver = ctx.solver(&mesh)?;
    let basis = load_checked_basis(basis_path, &solver)?;
    let rsys = reduce_system(&solver.system, &basis).map_err(usage)?;
    let dir = ctx.out_dir()?;
    let writer = FrameWriter {
        mesh: &mesh,
        dir: dir.to_path_buf(),
        stride: ctx.cfg.run.output_stride,
        format: ctx.cfg.run.format.into(),
    };
    let dt = ctx.cfg.solver.dt;
    let init = ctx.cfg.initial.state(&mesh);
    let mut state = ReducedState::from_full(&init, &rsys);
    let mut log_csv = String::from("frame,objective,global_ms,reduced_residual\n");
    let mut positions = Vec::with_capacity(frames);
    let mut diverged = None;
    let mut worst_residual = 0.0f64;
    let start = Instant::now();
    for _ in 0..frames {
        let mut log = FrameLog {
            ctx: Some((&solver, dt)),
            ..Default::default()
        };
        match reduced_step_observed(&state, &rsys, &solver.constraints, &solver.config, &mut log) {
            Ok(next) => state = next,
            Err(e @ ReducedError::Divergence { .. }) => {
                diverged = Some(e.to_string());
                break;
            }
            Err(e) => return Err(runtime(e)),
        }
        worst_residual = worst_residual.max(log.residual);
        println!(
            "frame {:5} objective {:.9e} global {:.3} ms residual {:.3e}",
            state.frame,
            log.last_objective,
            log.global * 1e3,
            log.residual
        );
        log_csv.push_str(&format!(
            "{},{:.12e},{:.6},{:.6e}\n",
            state.frame,
            log.last_objective,
            log.global * 1e3,
            log.residual
        ));
        writer.write(state.frame, &state.q)?;
        positions.push(state.q.clone());
    }
    let total = start.elapsed().as_secs_f64();
    fs::write(dir.join("frames.csv"), log_csv).map_err(runtime)?;
    save_trajectory(dir, &positions, dt, json!({"run": "reduced", "config": ctx.hash}))?;
    let stable = diverged.is_none();
    write_summary(
        dir,
        &json!({
            "run": "reduced",
            "basis": basis_path.display().to_string(),
            "kind": basis.kind().as_str(),
            "k": basis.k(),
            "vertices": mesh.num_vertices(),
            "condition": rsys.condition(),
            "frames": positions.len(),
            "max_reduced_residual": worst_residual,
            "stable": stable,
            "wall_s": total,
            "config": ctx.hash,
        }),
    )?;
    println!(
        "reduced {} frames, {} k={}, condition {:.3e}, max residual {:.3e}, stable={stable}",
        positions.len(),
        basis.kind(),
        basis.k(),
        rsys.condition(),
        worst_residual
    );
    match diverged {
        Some(msg) => Err(runtime(anyhow!(msg))),
        None => Ok(()),
    }
}

fn bench_cmd(ctx: &Ctx, mesh_arg: &MeshArg, paths: &[PathBuf], sizes: Option<&[usize]>) -> Outcome<()> {
    if paths.is_empty() {
        return Err(usage(anyhow!("bench needs at least one --basis archive")));
    }
    let sizes = sizes.map(<[usize]>::to_vec).unwrap_or_else(|| ctx.cfg.bench.sizes.clone());
    let protocol = ctx.cfg.bench.protocol;
    protocol.validate().map_err(usage)?;
    let mesh = ctx.mesh(mesh_arg)?;
    let solver = ctx.solver(&mesh)?;
    let bases = paths
        .iter()
        .map(|p| load_checked_basis(p, &solver))
        .collect::<Outcome<Vec<_>>>()?;
    let init = ctx.cfg.initial.state(&mesh);
    let report = bench::run_bench(
        &solver,
        &init,
        &bases,
        &sizes,
        protocol,
        BenchEnv::current(ctx.hash.clone()),
        |r| {
            eprintln!(
                "{} k={} relative {:.4} traj {:.3e} stable={}",
                r.kind, r.k, r.global_relative, r.traj_relerr, r.stable
            )
        },
    )
    .map_err(|e| match e {
        BenchError::InvalidArgument(_) => usage(e),
        BenchError::Reduced(ReducedError::IllConditioned { .. }) => runtime(e),
        BenchError::Reduced(ReducedError::DimensionMismatch { .. }) => usage(e),
        _ => runtime(e),
    })?;
    if report.rows.is_empty() {
        return Err(usage(anyhow!("no requested size fits any basis")));
    }
    let dir = ctx.out_dir()?;
    let csv = report.to_csv();
    fs::write(dir.join("bench.csv"), &csv).map_err(runtime)?;
    fs::write(dir.join("bench_wide.csv"), report.to_wide_csv()).map_err(runtime)?;
    std::io::stdout().write_all(csv.as_bytes()).map_err(runtime)?;
    if report.rows.iter().any(|r| !r.stable) {
        return Err(runtime(anyhow!("at least one run diverged")));
    }
    Ok(())
}

fn trajectory_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(TRAJECTORY)
    } else {
        p.to_path_buf()
    }
}

fn compare(ctx: &Ctx, a: &Path, b: &Path) -> Outcome<()> {
    let load = |p: &Path| -> Outcome<Vec<DMatrix<f64>>> {
        let set: SnapshotSet = snapshots::load(&trajectory_path(p)).map_err(usage)?;
        Ok((0..set.num_frames()).map(|t| set.frame(t)).collect())
    };
    let (fa, fb) = (load(a)?, load(b)?);
    let err = compare_trajectories(&fa, &fb).map_err(usage)?;
    let dir = ctx.out_dir()?;
    fs::write(dir.join("compare.csv"), err.to_csv()).map_err(runtime)?;
    println!(
        "frames {} max relative L2 {:.9e} Frobenius {:.9e}",
        err.per_frame.len(),
        err.max,
        err.frobenius
    );
    Ok(())
}
