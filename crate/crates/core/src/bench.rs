//! Global-step timing and trajectory accuracy.
//!
//! Only the global phase is timed: the sparse back-substitution on the full
//! side, `Uᵀb` plus the dense `k × k` solve on the reduced side. Every run
//! discards its first `warmup` frames and keeps at least 20. The reported
//! relative time is the median over frames of `reduced / full`.

use std::fmt::Write as _;
use std::io;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::basis::{Basis, BasisKind};
use crate::pd::{FullSolver, PdError, SimState, StepObserver};
use crate::reduced::{reduce_system, reduced_step_observed, ReducedError, ReducedState};
use crate::scalar::Real;

pub const CSV_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "basis,kind,fullGlobal_ms,redGlobal_ms,global_relative,traj_relerr,stable";
/// Spread (standard deviation over median) above which a row is flagged.
pub const NOISE_LIMIT: f64 = 0.5;
pub const MIN_WARMUP: usize = 5;
pub const MIN_MEASURED: usize = 20;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark setup: {0}")]
    InvalidArgument(String),
    #[error("trajectories differ in length ({a} vs {b} frames)")]
    FrameCountMismatch { a: usize, b: usize },
    #[error("frame {frame} has {a} rows in one run and {b} in the other")]
    ShapeMismatch { frame: usize, a: usize, b: usize },
    #[error(transparent)]
    Solver(#[from] PdError),
    #[error(transparent)]
    Reduced(#[from] ReducedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_measured")]
    pub measured: usize,
}

fn default_warmup() -> usize {
    MIN_WARMUP
}
fn default_measured() -> usize {
    MIN_MEASURED
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            warmup: MIN_WARMUP,
            measured: MIN_MEASURED,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.warmup < MIN_WARMUP || self.measured < MIN_MEASURED {
            return Err(BenchError::InvalidArgument(format!(
                "need at least {MIN_WARMUP} warm-up and {MIN_MEASURED} measured frames, got {} and {}",
                self.warmup, self.measured
            )));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.warmup + self.measured
    }
}

/// Median, mean and standard deviation of a sample, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stats {
    pub fn of(samples: &[f64]) -> Self {
        let count = samples.len();
        if count == 0 {
            return Self {
                median: f64::NAN,
                mean: f64::NAN,
                std: f64::NAN,
                count,
            };
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if count % 2 == 1 {
            sorted[count / 2]
        } else {
            0.5 * (sorted[count / 2 - 1] + sorted[count / 2])
        };
        let mean = samples.iter().sum::<f64>() / count as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / count as f64;
        Self {
            median,
            mean,
            std: var.sqrt(),
            count,
        }
    }

    /// Spread larger than [`NOISE_LIMIT`] times the median.
    pub fn is_noisy(&self) -> bool {
        self.std > NOISE_LIMIT * self.median.abs()
    }
}

/// Sums the global-phase durations of one frame.
#[derive(Debug, Default)]
struct FrameClock {
    total: Duration,
}

impl<T: Real> StepObserver<T> for FrameClock {
    fn global_solve(&mut self, elapsed: Duration) {
        self.total += elapsed;
    }
}

/// Per-frame global times and positions of one run.
#[derive(Debug, Clone)]
pub struct RunRecord<T: Real> {
    /// Seconds, measured frames only.
    pub global_times: Vec<f64>,
    /// Positions after every frame, warm-up included.
    pub positions: Vec<DMatrix<T>>,
    /// False if the run hit a non-finite state; recording stops there.
    pub stable: bool,
}

pub fn run_full<T: Real>(
    solver: &FullSolver<T>,
    initial: &SimState<T>,
    protocol: Protocol,
) -> Result<RunRecord<T>, BenchError> {
    let mut rec = RunRecord {
        global_times: Vec::with_capacity(protocol.measured),
        positions: Vec::with_capacity(protocol.frames()),
        stable: true,
    };
    let mut state = initial.clone();
    for f in 0..protocol.frames() {
        let mut clock = FrameClock::default();
        match solver.step_observed(&state, &mut clock) {
            Ok(next) => state = next,
            Err(PdError::Divergence { .. }) => {
                rec.stable = false;
                break;
            }
            Err(e) => return Err(e.into()),
        }
        if f >= protocol.warmup {
            rec.global_times.push(clock.total.as_secs_f64());
        }
        rec.positions.push(state.q.clone());
    }
    Ok(rec)
}

pub fn run_reduced<T: Real>(
    solver: &FullSolver<T>,
    basis: &Basis<T>,
    initial: &SimState<T>,
    protocol: Protocol,
) -> Result<RunRecord<T>, BenchError> {
    let rsys = reduce_system(&solver.system, basis)?;
    let mut rec = RunRecord {
        global_times: Vec::with_capacity(protocol.measured),
        positions: Vec::with_capacity(protocol.frames()),
        stable: true,
    };
    let mut state = ReducedState::from_full(initial, &rsys);
    for f in 0..protocol.frames() {
        let mut clock = FrameClock::default();
        match reduced_step_observed(&state, &rsys, &solver.constraints, &solver.config, &mut clock) {
            Ok(next) => state = next,
            Err(ReducedError::Divergence { .. }) => {
                rec.stable = false;
                break;
            }
            Err(e) => return Err(e.into()),
        }
        if f >= protocol.warmup {
            rec.global_times.push(clock.total.as_secs_f64());
        }
        rec.positions.push(state.q.clone());
    }
    Ok(rec)
}

/// Errors between two position sequences, computed on raw positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryError {
    /// `‖a_t − b_t‖_F / ‖a_t‖_F` per frame.
    pub per_frame: Vec<f64>,
    pub max: f64,
    /// `‖A − B‖_F / ‖A‖_F` over the stacked trajectory.
    pub frobenius: f64,
}

impl TrajectoryError {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,relative_l2\n");
        for (i, e) in self.per_frame.iter().enumerate() {
            writeln!(s, "{i},{e:.9e}").unwrap();
        }
        s
    }
}

/// `a` is the reference run.
pub fn compare_trajectories<T: Real>(
    a: &[DMatrix<T>],
    b: &[DMatrix<T>],
) -> Result<TrajectoryError, BenchError> {
    if a.len() != b.len() {
        return Err(BenchError::FrameCountMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    let mut per_frame = Vec::with_capacity(a.len());
    let (mut num, mut den) = (0.0, 0.0);
    for (frame, (x, y)) in a.iter().zip(b).enumerate() {
        if x.shape() != y.shape() {
            return Err(BenchError::ShapeMismatch {
                frame,
                a: x.nrows(),
                b: y.nrows(),
            });
        }
        let mut d2 = 0.0;
        let mut n2 = 0.0;
        for (p, q) in x.iter().zip(y.iter()) {
            let (p, q) = (p.to_f64_lossy(), q.to_f64_lossy());
            d2 += (p - q) * (p - q);
            n2 += p * p;
        }
        per_frame.push(if n2 > 0.0 { (d2 / n2).sqrt() } else { d2.sqrt() });
        num += d2;
        den += n2;
    }
    let max = per_frame.iter().cloned().fold(0.0, f64::max);
    let frobenius = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
    Ok(TrajectoryError {
        per_frame,
        max,
        frobenius,
    })
}

/// Median over frames of `reduced[i] / full[i]`, and whether the ratio is noisy.
pub fn relative_time(full: &[f64], reduced: &[f64]) -> (f64, bool) {
    let ratios: Vec<f64> = full
        .iter()
        .zip(reduced)
        .filter(|(f, _)| **f > 0.0)
        .map(|(f, r)| r / f)
        .collect();
    let stats = Stats::of(&ratios);
    (stats.median, stats.is_noisy())
}

/// Times `work` through the same clock the solvers use.
pub fn probe<F: FnMut()>(samples: usize, mut work: F) -> Stats {
    let times: Vec<f64> = (0..samples)
        .map(|_| {
            let t0 = Instant::now();
            work();
            t0.elapsed().as_secs_f64()
        })
        .collect();
    Stats::of(&times)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub kind: BasisKind,
    pub full_global_ms: f64,
    pub reduced_global_ms: f64,
    pub global_relative: f64,
    pub traj_relerr: f64,
    pub stable: bool,
    pub noisy: bool,
}

impl BenchRow {
    /// Column name in the wide per-kind table.
    pub fn wide_column(kind: BasisKind) -> &'static str {
        match kind {
            BasisKind::Pca => "podPosGlobal_relative",
            BasisKind::Splocs => "splocsPosGlobal_relative",
            BasisKind::External => "lbsPosGlobal_relative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchEnv {
    pub machine: String,
    pub build: String,
    pub config_hash: String,
}

impl BenchEnv {
    pub fn current(config_hash: String) -> Self {
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
        Self {
            machine: format!("{}-{} threads={threads}", std::env::consts::ARCH, std::env::consts::OS),
            build: format!(
                "snapdyn-{} {}",
                env!("CARGO_PKG_VERSION"),
                if cfg!(debug_assertions) { "debug" } else { "optimized" }
            ),
            config_hash,
        }
    }
}

/// First 16 hex digits of the SHA-256 of the configuration text.
pub fn config_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub env: BenchEnv,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Versioned comment line, fixed header, one line per row, then one
    /// `# noisy` line per flagged row.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "# bench-csv v{CSV_VERSION} machine={} build={} config={}",
            self.env.machine.replace(' ', "_"),
            self.env.build.replace(' ', "_"),
            self.env.config_hash
        )
        .unwrap();
        s.push_str(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6e},{}",
                r.k,
                r.kind,
                r.full_global_ms,
                r.reduced_global_ms,
                r.global_relative,
                r.traj_relerr,
                r.stable
            )
            .unwrap();
        }
        for r in self.rows.iter().filter(|r| r.noisy) {
            writeln!(s, "# noisy basis={} kind={}", r.k, r.kind).unwrap();
        }
        s
    }

    /// One row per `k`, one relative-time column per basis kind present.
    pub fn to_wide_csv(&self) -> String {
        let order = [BasisKind::Pca, BasisKind::Splocs, BasisKind::External];
        let kinds: Vec<BasisKind> = order
            .into_iter()
            .filter(|k| self.rows.iter().any(|r| r.kind == *k))
            .collect();
        let mut ks: Vec<usize> = self.rows.iter().map(|r| r.k).collect();
        ks.sort_unstable();
        ks.dedup();
        let mut s = String::from("basis");
        for k in &kinds {
            s.push(',');
            s.push_str(BenchRow::wide_column(*k));
        }
        s.push('\n');
        for k in ks {
            s.push_str(&k.to_string());
            for kind in &kinds {
                s.push(',');
                if let Some(r) = self.rows.iter().find(|r| r.k == k && r.kind == *kind) {
                    write!(s, "{:.6}", r.global_relative).unwrap();
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(self.to_csv().as_bytes())
    }
}

/// One full run as the reference, then one reduced run per basis and size.
///
/// Sizes larger than a basis are skipped. `progress` is called after each row.
pub fn run_bench<T: Real>(
    solver: &FullSolver<T>,
    initial: &SimState<T>,
    bases: &[Basis<T>],
    sizes: &[usize],
    protocol: Protocol,
    env: BenchEnv,
    mut progress: impl FnMut(&BenchRow),
) -> Result<BenchReport, BenchError> {
    protocol.validate()?;
    if bases.is_empty() {
        return Err(BenchError::InvalidArgument("at least one basis is required".into()));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(BenchError::InvalidArgument("basis sizes must be positive".into()));
    }
    let full = run_full(solver, initial, protocol)?;
    let full_ms = Stats::of(&full.global_times).median * 1e3;
    let mut rows = Vec::new();
    for basis in bases {
        for &k in sizes.iter().filter(|&&k| k <= basis.k()) {
            let sub = basis.truncate(k).map_err(|e| BenchError::InvalidArgument(e.to_string()))?;
            let red = run_reduced(solver, &sub, initial, protocol)?;
            let (relative, noisy) = relative_time(&full.global_times, &red.global_times);
            let stable = full.stable && red.stable;
            let traj_relerr = if stable {
                compare_trajectories(&full.positions, &red.positions)?.frobenius
            } else {
                f64::INFINITY
            };
            let row = BenchRow {
                k,
                kind: basis.kind(),
                full_global_ms: full_ms,
                reduced_global_ms: Stats::of(&red.global_times).median * 1e3,
                global_relative: relative,
                traj_relerr,
                stable,
                noisy,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(BenchReport { env, rows })
}
