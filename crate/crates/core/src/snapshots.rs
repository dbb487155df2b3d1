//! Recorded trajectories, centering, mass weighting and the `PDSS` archive.
//!
//! A [`SnapshotSet`] keeps its `T` frames side by side in one `n × 3T` matrix:
//! frame `t` occupies columns `3t..3t+3`. Row `v` is therefore the whole
//! trajectory of vertex `v`, which is the layout the basis builder works on.
//! Frames are never rigidly aligned; there is no API for it.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::MassMatrix;
use crate::pd::{FullSolver, PdError, SimState};
use crate::scalar::Real;

const MAGIC: &[u8; 4] = b"PDSS";
pub const ARCHIVE_VERSION: u32 = 1;
const FLAG_CENTERED: u8 = 1;
const FLAG_MASS_WEIGHTED: u8 = 2;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("snapshot state error: {0}")]
    State(&'static str),
    #[error("{rows} rows do not match {expected} vertices")]
    DimensionMismatch { expected: usize, rows: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not a snapshot archive ({reason})")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: archive version {found} is not supported (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: archive truncated")]
    Truncated { path: PathBuf },
    #[error(transparent)]
    Solver(#[from] PdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SnapshotFlags {
    pub centered: bool,
    pub mass_weighted: bool,
}

/// Number of solver steps and how often to keep one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub frames: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

impl Schedule {
    pub fn new(frames: usize, stride: usize) -> Self {
        Self { frames, stride }
    }

    /// Steps `0..frames` are kept when `step % stride == 0`, so the count is
    /// `ceil(frames / stride)`.
    pub fn stored(&self) -> usize {
        self.frames.div_ceil(self.stride.max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet<T: Real> {
    data: DMatrix<T>,
    mean_shape: DMatrix<T>,
    flags: SnapshotFlags,
    timestamps: Vec<f64>,
}

impl<T: Real> SnapshotSet<T> {
    /// Stacks raw position frames. Flags start cleared and the mean shape at zero.
    pub fn from_frames(frames: &[DMatrix<T>], timestamps: Vec<f64>) -> Result<Self, SnapshotError> {
        let first = frames
            .first()
            .ok_or_else(|| SnapshotError::InvalidArgument("at least one frame is required".into()))?;
        let n = first.nrows();
        if timestamps.len() != frames.len() {
            return Err(SnapshotError::InvalidArgument(format!(
                "{} timestamps for {} frames",
                timestamps.len(),
                frames.len()
            )));
        }
        let mut data = DMatrix::zeros(n, 3 * frames.len());
        for (t, f) in frames.iter().enumerate() {
            if f.nrows() != n || f.ncols() != 3 {
                return Err(SnapshotError::DimensionMismatch {
                    expected: n,
                    rows: f.nrows(),
                });
            }
            data.columns_mut(3 * t, 3).copy_from(f);
        }
        Ok(Self {
            data,
            mean_shape: DMatrix::zeros(n, 3),
            flags: SnapshotFlags::default(),
            timestamps,
        })
    }

    /// Assembles a set from its parts; `data` must be `n × 3T`.
    pub fn from_parts(
        data: DMatrix<T>,
        mean_shape: DMatrix<T>,
        flags: SnapshotFlags,
        timestamps: Vec<f64>,
    ) -> Result<Self, SnapshotError> {
        if data.ncols() == 0 || data.ncols() % 3 != 0 {
            return Err(SnapshotError::InvalidArgument(format!(
                "data must have 3T > 0 columns, got {}",
                data.ncols()
            )));
        }
        if mean_shape.nrows() != data.nrows() || mean_shape.ncols() != 3 {
            return Err(SnapshotError::DimensionMismatch {
                expected: data.nrows(),
                rows: mean_shape.nrows(),
            });
        }
        if timestamps.len() != data.ncols() / 3 {
            return Err(SnapshotError::InvalidArgument("one timestamp per frame is required".into()));
        }
        Ok(Self {
            data,
            mean_shape,
            flags,
            timestamps,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.data.ncols() / 3
    }

    /// The `n × 3T` snapshot matrix.
    pub fn data(&self) -> &DMatrix<T> {
        &self.data
    }

    pub fn mean_shape(&self) -> &DMatrix<T> {
        &self.mean_shape
    }

    pub fn flags(&self) -> SnapshotFlags {
        self.flags
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    /// Frame `t` as an `n × 3` matrix.
    pub fn frame(&self, t: usize) -> DMatrix<T> {
        self.data.columns(3 * t, 3).into_owned()
    }

    /// A new set holding only the listed frames, in the given order.
    pub fn select_frames(&self, frames: &[usize]) -> Result<Self, SnapshotError> {
        if frames.is_empty() {
            return Err(SnapshotError::InvalidArgument("no frames selected".into()));
        }
        let mut data = DMatrix::zeros(self.num_vertices(), 3 * frames.len());
        let mut ts = Vec::with_capacity(frames.len());
        for (j, &t) in frames.iter().enumerate() {
            if t >= self.num_frames() {
                return Err(SnapshotError::InvalidArgument(format!(
                    "frame {t} out of range for {} frames",
                    self.num_frames()
                )));
            }
            data.columns_mut(3 * j, 3).copy_from(&self.data.columns(3 * t, 3));
            ts.push(self.timestamps[t]);
        }
        Ok(Self {
            data,
            mean_shape: self.mean_shape.clone(),
            flags: self.flags,
            timestamps: ts,
        })
    }

    /// Largest absolute per-vertex time mean; zero for centered data.
    pub fn max_time_mean(&self) -> T {
        let mean = time_mean(&self.data);
        mean.amax()
    }
}

/// Runs the full solver from `initial` and keeps every `stride`-th state.
pub fn record<T: Real>(
    solver: &FullSolver<T>,
    initial: &SimState<T>,
    schedule: Schedule,
) -> Result<SnapshotSet<T>, SnapshotError> {
    if schedule.frames == 0 {
        return Err(SnapshotError::InvalidArgument("frame count must be at least 1".into()));
    }
    if schedule.stride == 0 {
        return Err(SnapshotError::InvalidArgument("stride must be at least 1".into()));
    }
    let dt = solver.config.dt;
    let mut frames = Vec::with_capacity(schedule.stored());
    let mut stamps = Vec::with_capacity(schedule.stored());
    let mut state = initial.clone();
    for step in 0..schedule.frames {
        state = solver.step(&state)?;
        if step % schedule.stride == 0 {
            frames.push(state.q.clone());
            stamps.push(state.frame as f64 * dt);
        }
    }
    SnapshotSet::from_frames(&frames, stamps)
}

fn time_mean<T: Real>(data: &DMatrix<T>) -> DMatrix<T> {
    let frames = data.ncols() / 3;
    let inv = T::one() / T::lit(frames as f64);
    DMatrix::from_fn(data.nrows(), 3, |r, c| {
        let mut acc = T::zero();
        for t in 0..frames {
            acc += data[(r, 3 * t + c)];
        }
        acc * inv
    })
}

/// Subtracts the per-vertex temporal mean. No frame is rotated or registered.
pub fn center<T: Real>(s: &SnapshotSet<T>) -> Result<SnapshotSet<T>, SnapshotError> {
    if s.flags.centered {
        return Err(SnapshotError::State("snapshots are already centered"));
    }
    if s.flags.mass_weighted {
        return Err(SnapshotError::State("center before mass weighting"));
    }
    Ok(center_unchecked(s))
}

/// [`center`] without the flag checks; the extracted mean is added to the
/// stored mean shape so repeated calls compose.
pub fn center_unchecked<T: Real>(s: &SnapshotSet<T>) -> SnapshotSet<T> {
    let mean = time_mean(&s.data);
    let mut data = s.data.clone();
    for t in 0..s.num_frames() {
        let mut block = data.columns_mut(3 * t, 3);
        block -= &mean;
    }
    SnapshotSet {
        data,
        mean_shape: &s.mean_shape + mean,
        flags: SnapshotFlags {
            centered: true,
            ..s.flags
        },
        timestamps: s.timestamps.clone(),
    }
}

/// Scales row `v` by `sqrt(M_vv)`.
pub fn mass_weight<T: Real>(
    s: &SnapshotSet<T>,
    mass: &MassMatrix<T>,
) -> Result<SnapshotSet<T>, SnapshotError> {
    if !s.flags.centered {
        return Err(SnapshotError::State("mass weighting requires centered snapshots"));
    }
    if s.flags.mass_weighted {
        return Err(SnapshotError::State("snapshots are already mass weighted"));
    }
    let data = scale_rows(s, mass, false)?;
    Ok(SnapshotSet {
        data,
        mean_shape: s.mean_shape.clone(),
        flags: SnapshotFlags {
            mass_weighted: true,
            ..s.flags
        },
        timestamps: s.timestamps.clone(),
    })
}

/// Inverse of [`mass_weight`].
pub fn mass_unweight<T: Real>(
    s: &SnapshotSet<T>,
    mass: &MassMatrix<T>,
) -> Result<SnapshotSet<T>, SnapshotError> {
    if !s.flags.mass_weighted {
        return Err(SnapshotError::State("snapshots are not mass weighted"));
    }
    let data = scale_rows(s, mass, true)?;
    Ok(SnapshotSet {
        data,
        mean_shape: s.mean_shape.clone(),
        flags: SnapshotFlags {
            mass_weighted: false,
            ..s.flags
        },
        timestamps: s.timestamps.clone(),
    })
}

fn scale_rows<T: Real>(
    s: &SnapshotSet<T>,
    mass: &MassMatrix<T>,
    inverse: bool,
) -> Result<DMatrix<T>, SnapshotError> {
    if mass.len() != s.num_vertices() {
        return Err(SnapshotError::DimensionMismatch {
            expected: mass.len(),
            rows: s.num_vertices(),
        });
    }
    let mut data = s.data.clone();
    for (r, m) in mass.diag().iter().enumerate() {
        let w = if inverse { T::one() / m.sqrt() } else { m.sqrt() };
        let mut row = data.row_mut(r);
        row *= w;
    }
    Ok(data)
}

/// Human-readable companion written next to every archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub format: String,
    pub version: u32,
    pub vertices: usize,
    pub frames: usize,
    pub flags: SnapshotFlags,
    pub first_time: f64,
    pub last_time: f64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// `<archive>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Writes the binary archive and its JSON sidecar. `extra` lands verbatim in
/// the sidecar.
pub fn save<T: Real>(
    s: &SnapshotSet<T>,
    path: &Path,
    extra: serde_json::Value,
) -> Result<(), SnapshotError> {
    let io_err = |source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    };
    let n = s.num_vertices();
    let frames = s.num_frames();
    let mut buf = Vec::with_capacity(25 + 8 * (n * 3 * frames + 3 * n + frames));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(frames as u64).to_le_bytes());
    let mut flags = 0u8;
    if s.flags.centered {
        flags |= FLAG_CENTERED;
    }
    if s.flags.mass_weighted {
        flags |= FLAG_MASS_WEIGHTED;
    }
    buf.push(flags);
    // vertex-major: (v, t, c)
    for v in 0..n {
        for j in 0..3 * frames {
            buf.extend_from_slice(&s.data[(v, j)].to_f64_lossy().to_le_bytes());
        }
    }
    for v in 0..n {
        for c in 0..3 {
            buf.extend_from_slice(&s.mean_shape[(v, c)].to_f64_lossy().to_le_bytes());
        }
    }
    for &t in &s.timestamps {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)?;

    let meta = SnapshotMeta {
        format: "PDSS".into(),
        version: ARCHIVE_VERSION,
        vertices: n,
        frames,
        flags: s.flags,
        first_time: s.timestamps[0],
        last_time: s.timestamps[frames - 1],
        extra,
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&side, text + "\n").map_err(|source| SnapshotError::Io { path: side, source })
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8], PathBuf> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.path.to_path_buf()),
        }
    }

    pub(crate) fn u8(&mut self) -> Result<u8, PathBuf> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, PathBuf> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, PathBuf> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, PathBuf> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn load<T: Real>(path: &Path) -> Result<SnapshotSet<T>, SnapshotError> {
    let bytes = fs::read(path).map_err(|source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let truncated = |path| SnapshotError::Truncated { path };
    let mut r = Reader::new(&bytes, path);
    let magic = r.take(4).map_err(truncated)?;
    if magic != MAGIC {
        return Err(SnapshotError::Format {
            path: path.to_path_buf(),
            reason: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u32().map_err(truncated)?;
    if version != ARCHIVE_VERSION {
        return Err(SnapshotError::Version {
            path: path.to_path_buf(),
            found: version,
            expected: ARCHIVE_VERSION,
        });
    }
    let n = r.u64().map_err(truncated)? as usize;
    let frames = r.u64().map_err(truncated)? as usize;
    let flags = r.u8().map_err(truncated)?;
    let need = n
        .checked_mul(3 * frames + 3)
        .and_then(|x| x.checked_add(frames))
        .and_then(|x| x.checked_mul(8));
    if frames == 0 || need.is_none_or(|need| need > r.remaining()) {
        return Err(SnapshotError::Truncated {
            path: path.to_path_buf(),
        });
    }
    let mut data = DMatrix::zeros(n, 3 * frames);
    for v in 0..n {
        for j in 0..3 * frames {
            data[(v, j)] = T::lit(r.f64().map_err(truncated)?);
        }
    }
    let mut mean = DMatrix::zeros(n, 3);
    for v in 0..n {
        for c in 0..3 {
            mean[(v, c)] = T::lit(r.f64().map_err(truncated)?);
        }
    }
    let mut stamps = Vec::with_capacity(frames);
    for _ in 0..frames {
        stamps.push(r.f64().map_err(truncated)?);
    }
    if r.remaining() != 0 {
        return Err(SnapshotError::Format {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", r.remaining()),
        });
    }
    SnapshotSet::from_parts(
        data,
        mean,
        SnapshotFlags {
            centered: flags & FLAG_CENTERED != 0,
            mass_weighted: flags & FLAG_MASS_WEIGHTED != 0,
        },
        stamps,
    )
}
