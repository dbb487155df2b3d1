//! TOML run configuration shared by the command-line tool and tests.
//!
//! ```toml
//! [mesh]
//! generator = { kind = "box", dims = [4, 2, 2], size = [2.0, 0.5, 0.5] }
//! # or: path = "bunny.node"
//!
//! [solver]
//! dt = 0.0166
//! iterations = 10
//!
//! [constraints]
//! tet_strain = 2000.0
//! anchor_box = [[-0.01, -1, -1], [0.01, 1, 1]]
//!
//! [initial]
//! angular_velocity = [0.0, 0.0, 1.0]
//!
//! [snapshots]
//! frames = 200
//! stride = 2
//!
//! [basis]
//! kind = "pca"
//! k = 50
//! d_min = 0.1
//! d_max = 0.3
//!
//! [bench]
//! sizes = [10, 50, 100, 200]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{AdmmParams, BasisKind, PcaParams, SplocsParams, SupportRadii};
use crate::bench::Protocol;
use crate::mesh::{blob_bunny, load_mesh, tet_box, two_tets, FrameFormat, Mesh, MeshError, MeshFormat};
use crate::pd::{ConstraintConfig, SimState, SolverConfig};
use crate::scalar::Real;
use crate::snapshots::Schedule;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    TwoTets,
    Box {
        dims: [usize; 3],
        #[serde(default = "unit_size")]
        size: [f64; 3],
    },
    Bunny {
        res: usize,
    },
}

fn unit_size() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSource {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub generator: Option<Generator>,
}

impl MeshSource {
    /// `path` is resolved against `base` when relative.
    pub fn build<T: Real>(&self, base: &Path) -> Result<Mesh<T>, ConfigError> {
        match (&self.path, &self.generator) {
            (Some(_), Some(_)) => Err(ConfigError::Invalid(
                "mesh: give either path or generator, not both".into(),
            )),
            (None, None) => Err(ConfigError::Invalid("mesh: no path or generator given".into())),
            (Some(p), None) => {
                let path = if p.is_relative() { base.join(p) } else { p.clone() };
                let format = MeshFormat::from_path(&path).ok_or_else(|| {
                    ConfigError::Invalid(format!("unrecognized mesh extension: {}", path.display()))
                })?;
                Ok(load_mesh(&path, format)?)
            }
            (None, Some(g)) => match *g {
                Generator::TwoTets => Ok(two_tets()),
                Generator::Box { dims, size } => {
                    if dims.contains(&0) || size.iter().any(|s| !(*s > 0.0)) {
                        return Err(ConfigError::Invalid(format!(
                            "box generator needs positive dims and size, got {dims:?} {size:?}"
                        )));
                    }
                    Ok(tet_box(dims[0], dims[1], dims[2], size))
                }
                Generator::Bunny { res } => {
                    if res < 2 {
                        return Err(ConfigError::Invalid("bunny generator needs res >= 2".into()));
                    }
                    Ok(blob_bunny(res))
                }
            },
        }
    }
}

/// Initial velocity field: a uniform part plus a rigid spin about the rest
/// centroid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default)]
    pub velocity: [f64; 3],
    #[serde(default)]
    pub angular_velocity: [f64; 3],
}

impl InitialConfig {
    pub fn state<T: Real>(&self, mesh: &Mesh<T>) -> SimState<T> {
        let q = mesh.vertices().clone();
        let n = q.nrows();
        let mut centroid = Vector3::<f64>::zeros();
        for i in 0..n {
            for c in 0..3 {
                centroid[c] += q[(i, c)].to_f64_lossy();
            }
        }
        if n > 0 {
            centroid /= n as f64;
        }
        let lin = Vector3::from(self.velocity);
        let ang = Vector3::from(self.angular_velocity);
        let v = DMatrix::from_fn(n, 3, |i, c| {
            let r = Vector3::new(
                q[(i, 0)].to_f64_lossy(),
                q[(i, 1)].to_f64_lossy(),
                q[(i, 2)].to_f64_lossy(),
            ) - centroid;
            T::lit(lin[c] + ang.cross(&r)[c])
        });
        SimState { q, v, frame: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Obj,
    Ply,
}

impl From<OutputFormat> for FrameFormat {
    fn from(f: OutputFormat) -> Self {
        match f {
            OutputFormat::Obj => FrameFormat::Obj,
            OutputFormat::Ply => FrameFormat::Ply,
        }
    }
}

/// Length and frame output of `simulate` and `reduce` runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Write every `output_stride`-th frame; 0 writes none.
    #[serde(default = "one")]
    pub output_stride: usize,
    #[serde(default = "default_format")]
    pub format: OutputFormat,
}

fn default_frames() -> usize {
    100
}
fn one() -> usize {
    1
}
fn default_format() -> OutputFormat {
    OutputFormat::Obj
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            frames: default_frames(),
            output_stride: 1,
            format: default_format(),
        }
    }
}

/// Basis construction settings. Omitting `d_min`/`d_max` means full support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub d_min: Option<f64>,
    #[serde(default)]
    pub d_max: Option<f64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub rank_tol: Option<f64>,
    #[serde(default)]
    pub passes: Option<usize>,
    #[serde(default)]
    pub min_penalty: Option<f64>,
    #[serde(default)]
    pub admm: AdmmParams,
}

fn default_kind() -> String {
    "pca".into()
}
fn default_k() -> usize {
    20
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            k: default_k(),
            d_min: None,
            d_max: None,
            lambda: 0.0,
            rank_tol: None,
            passes: None,
            min_penalty: None,
            admm: AdmmParams::default(),
        }
    }
}

impl BasisConfig {
    pub fn kind(&self) -> Result<BasisKind, ConfigError> {
        match self.kind.as_str() {
            "pca" => Ok(BasisKind::Pca),
            "splocs" => Ok(BasisKind::Splocs),
            other => Err(ConfigError::Invalid(format!(
                "basis kind must be pca or splocs, got {other:?}"
            ))),
        }
    }

    pub fn radii(&self) -> Result<SupportRadii, ConfigError> {
        match (self.d_min, self.d_max) {
            (None, None) => Ok(SupportRadii::full()),
            (Some(a), Some(b)) => SupportRadii::new(a, b).map_err(|e| ConfigError::Invalid(e.to_string())),
            _ => Err(ConfigError::Invalid("basis: give both d_min and d_max or neither".into())),
        }
    }

    pub fn pca(&self) -> Result<PcaParams, ConfigError> {
        let mut p = PcaParams::new(self.k, self.radii()?);
        if let Some(t) = self.rank_tol {
            p.rank_tol = t;
        }
        Ok(p)
    }

    pub fn splocs(&self) -> Result<SplocsParams, ConfigError> {
        let mut p = SplocsParams::new(self.k, self.radii()?, self.lambda);
        p.admm = self.admm;
        if let Some(passes) = self.passes {
            p.passes = passes;
        }
        if let Some(m) = self.min_penalty {
            p.min_penalty = m;
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default, flatten)]
    pub protocol: Protocol,
}

fn default_sizes() -> Vec<usize> {
    vec![10, 50, 100, 200]
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: default_sizes(),
            protocol: Protocol::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub mesh: MeshSource,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub constraints: ConstraintConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default = "default_schedule")]
    pub snapshots: Schedule,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    /// Directory relative mesh paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_schedule() -> Schedule {
    Schedule::new(100, 1)
}

impl Default for Config {
    fn default() -> Self {
        Self {
            mesh: MeshSource::default(),
            solver: SolverConfig::default(),
            constraints: ConstraintConfig::default(),
            initial: InitialConfig::default(),
            run: RunConfig::default(),
            snapshots: default_schedule(),
            basis: BasisConfig::default(),
            bench: BenchConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.solver
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.snapshots.stride == 0 {
            return Err(ConfigError::Invalid("snapshots.stride must be at least 1".into()));
        }
        self.basis.kind()?;
        self.basis.radii()?;
        Ok(())
    }

    pub fn build_mesh<T: Real>(&self) -> Result<Mesh<T>, ConfigError> {
        self.mesh.build(&self.base_dir)
    }
}
