//! Evaluation on the test split, single-scan reconstruction, slice export
//! and the operator dot-product tests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::dataset::Dataset;
use crate::data::{denormalize, load_volume, mu_to_hu, save_volume, Unit, Volume};
use crate::error::{Error, Result};
use crate::fdk::{fdk_reconstruct, Fdk};
use crate::geometry::{equiangular_angles, ConeBeamGeometry, VolumeGrid};
use crate::metrics::{per_slice_metrics, MetricsReport};
use crate::models::{geometry_fingerprint, Checkpoint, Model, ModelKind};
use crate::projector::{ProjectionStack, Projector};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Returns the reference itself; a self-test of the metrics pipeline.
    Identity,
    Fdk,
    Learned(ModelKind),
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Method::Identity),
            "fdk" => Ok(Method::Fdk),
            other => Ok(Method::Learned(other.parse()?)),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Identity => f.write_str("identity"),
            Method::Fdk => f.write_str("fdk"),
            Method::Learned(k) => write!(f, "{k}"),
        }
    }
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let methods: Vec<Method> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect::<Result<_>>()?;
    if methods.is_empty() {
        return Err(Error::Invalid("no methods given".into()));
    }
    Ok(methods)
}

/// Plain FDK in `f64`, returned in HU at file precision.
pub fn fdk_hu(stack: &ProjectionStack<f32>, grid: &VolumeGrid) -> Result<Volume<f32>> {
    let s = ProjectionStack::new(stack.geometry.clone(), stack.data().iter().map(|&v| v as f64).collect())?;
    let mu = Volume::new(*grid, Unit::PerMm, fdk_reconstruct(&s, grid)?)?;
    Ok(mu_to_hu(&mu)?.cast())
}

/// Loads a learned model with the config, parameters and statistics stored
/// in a checkpoint.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let ck = Checkpoint::load(path)?;
    let (cfg, meta) = TrainConfig::parse_with_meta(&ck.config_text, true)?;
    let mut model = Model::new(cfg.model.clone(), cfg.sparse_geometry()?, cfg.grid()?, cfg.seed)?;
    if let Some(fp) = meta.get("checkpoint.geometry") {
        if *fp != model.fingerprint() {
            return Err(Error::Fingerprint { checkpoint: fp.clone(), data: model.fingerprint() });
        }
    }
    model.load_named(&ck.tensors)?;
    Ok(model)
}

fn check_geometry(model: &Model<f32>, geom: &ConeBeamGeometry, grid: &VolumeGrid) -> Result<()> {
    let data = geometry_fingerprint(geom, grid);
    if data != model.fingerprint() {
        return Err(Error::Fingerprint { checkpoint: model.fingerprint(), data });
    }
    Ok(())
}

/// Per-slice metrics of each method on the test split. Learned methods
/// take the checkpoint whose model kind matches.
pub fn evaluate(cfg: &TrainConfig, checkpoints: &[PathBuf], data_dir: impl AsRef<Path>, methods: &[Method]) -> Result<MetricsReport> {
    let ds = Dataset::open(data_dir)?;
    ds.check_config(cfg)?;
    if ds.manifest.test.is_empty() {
        return Err(Error::Invalid("test split is empty".into()));
    }
    let mut models = Vec::new();
    for p in checkpoints {
        let m = load_model(p)?;
        let fp = ds.manifest.fingerprint.clone();
        if m.fingerprint() != fp {
            return Err(Error::Fingerprint { checkpoint: m.fingerprint(), data: fp });
        }
        models.push(m);
    }
    let mut per_method: Vec<(String, Vec<_>)> = methods.iter().map(|m| (m.to_string(), Vec::new())).collect();
    for &id in &ds.manifest.test {
        let reference = ds.volume(id)?;
        let stack = ds.projections(id)?;
        let name = format!("vol_{id:04}");
        for (mi, method) in methods.iter().enumerate() {
            let pred = match method {
                Method::Identity => reference.clone(),
                Method::Fdk => fdk_hu(&stack, &reference.grid)?.clamp_hu()?,
                Method::Learned(kind) => {
                    let model = models
                        .iter_mut()
                        .find(|m| m.config().kind == *kind)
                        .ok_or_else(|| Error::Invalid(format!("no checkpoint given for {kind}")))?;
                    check_geometry(model, &stack.geometry, &reference.grid)?;
                    model.reconstruct(&stack)?.clamp_hu()?
                }
            };
            per_method[mi].1.extend(per_slice_metrics(&name, &pred, &reference)?);
        }
    }
    MetricsReport::build(&per_method)
}

/// Path of the `key = value` sidecar next to a report.
pub fn sidecar_path(report: &Path) -> PathBuf {
    let mut s = report.as_os_str().to_owned();
    s.push(".kv");
    PathBuf::from(s)
}

pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_table()).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    std::fs::write(&side, report.to_sidecar()).map_err(|e| Error::io(&side, e))
}

/// Reconstructs one scan. FDK needs the grid (from `cfg`); learned methods
/// read grid and geometry from the checkpoint.
pub fn reconstruct(method: Method, checkpoint: Option<&Path>, stack: &ProjectionStack<f32>, cfg: &TrainConfig) -> Result<Volume<f32>> {
    match method {
        Method::Fdk => fdk_hu(stack, &cfg.grid()?),
        Method::Identity => Err(Error::Invalid("identity needs a reference volume and is only available in eval".into())),
        Method::Learned(kind) => {
            let path = checkpoint.ok_or_else(|| Error::Invalid(format!("{kind} needs --checkpoint")))?;
            let mut model = load_model(path)?;
            if model.config().kind != kind {
                return Err(Error::Invalid(format!("checkpoint holds a {} model, not {kind}", model.config().kind)));
            }
            let grid = *model.grid();
            check_geometry(&model, &stack.geometry, &grid)?;
            model.reconstruct(stack)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            _ => Err(Error::Invalid(format!("axis must be x, y or z, got {s:?}"))),
        }
    }
}

/// 8-bit gray level of an HU value: window [-1000, 2000], rounded half up.
pub fn hu_to_gray(hu: f64) -> u8 {
    let v = (hu.clamp(-1000.0, 2000.0) + 1000.0) / 3000.0 * 255.0;
    (v + 0.5).floor().min(255.0) as u8
}

/// Binary PGM (`P5`) of one slice. An `x` slice is `ny` wide and `nz` tall;
/// `y` is `nx` by `nz`; `z` is `nx` by `ny`.
pub fn slice_pgm<T: Real>(volume: &Volume<T>, axis: Axis, index: usize) -> Result<Vec<u8>> {
    let hu = match volume.unit {
        Unit::Hu => volume.clone(),
        Unit::PerMm => mu_to_hu(volume)?,
        Unit::Normalized => denormalize(volume)?,
    };
    let g = hu.grid;
    let (limit, w, h) = match axis {
        Axis::X => (g.nx, g.ny, g.nz),
        Axis::Y => (g.ny, g.nx, g.nz),
        Axis::Z => (g.nz, g.nx, g.ny),
    };
    if index >= limit {
        return Err(Error::Invalid(format!("slice index {index} out of range 0..{limit}")));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for r in 0..h {
        for c in 0..w {
            let v = match axis {
                Axis::X => hu.at(index, c, r),
                Axis::Y => hu.at(c, index, r),
                Axis::Z => hu.at(c, r, index),
            };
            out.push(hu_to_gray(v.f64()));
        }
    }
    Ok(out)
}

pub fn export_slice(volume: &Path, axis: Axis, index: usize, out: &Path) -> Result<()> {
    let pgm = slice_pgm(&load_volume(volume)?, axis, index)?;
    std::fs::write(out, pgm).map_err(|e| Error::io(out, e))
}

pub fn save_reconstruction(path: &Path, v: &Volume<f32>) -> Result<()> {
    save_volume(path, v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjointPreset {
    Small,
    Default,
    /// Transpose built on a grid with a 25% larger voxel; must fail.
    Mismatched,
}

impl FromStr for AdjointPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Self::Small),
            "default" => Ok(Self::Default),
            "mismatched" => Ok(Self::Mismatched),
            _ => Err(Error::Invalid(format!("unknown preset {s:?} (small, default, mismatched)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjointReport {
    pub projector_gap: f64,
    pub fdk_gap: f64,
    pub tolerance: f64,
}

impl AdjointReport {
    pub fn pass(&self) -> bool {
        self.projector_gap <= self.tolerance && self.fdk_gap <= self.tolerance
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum()
}

fn gap(lhs: f64, rhs: f64) -> f64 {
    (lhs - rhs).abs() / lhs.abs().max(f64::MIN_POSITIVE)
}

fn adjoint_gaps<T: Real>(geom: &ConeBeamGeometry, grid: VolumeGrid, adjoint_grid: VolumeGrid, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<T> = (0..grid.len()).map(|_| T::of(rng.gen::<f64>())).collect();
    let y: Vec<T> = (0..geom.n_pixels()).map(|_| T::of(rng.gen::<f64>())).collect();
    let a = Projector::new(geom.clone(), grid)?;
    let at = Projector::new(geom.clone(), adjoint_grid)?;
    let p = gap(dot(&a.forward(&x)?, &y), dot(&x, &at.transpose(&y)?));
    let f = Fdk::new(geom.clone(), grid)?;
    let ft = Fdk::new(geom.clone(), adjoint_grid)?;
    let q = gap(dot(&f.reconstruct(&y)?, &x), dot(&y, &ft.transpose(&x)?));
    Ok((p, q))
}

/// Dot-product tests of the projector and the FDK operator. Tolerance is
/// `1e-10` in `f64` and `1e-4` in `f32`.
pub fn adjoint_test(preset: AdjointPreset, seed: u64, double: bool) -> Result<AdjointReport> {
    let (geom, grid) = match preset {
        AdjointPreset::Small => (ConeBeamGeometry::new(160.0, 400.0, 5, 6, 14.0, equiangular_angles(4)?)?, VolumeGrid::cube(8, 4.0)?),
        // 16^3 grid, 12 x 10 detector, 8 views
        AdjointPreset::Default | AdjointPreset::Mismatched => {
            (ConeBeamGeometry::new(160.0, 400.0, 10, 12, 14.0, equiangular_angles(8)?)?, VolumeGrid::cube(16, 4.0)?)
        }
    };
    let adjoint_grid = match preset {
        AdjointPreset::Mismatched => VolumeGrid::cube(grid.nx, grid.voxel_mm * 1.25)?,
        _ => grid,
    };
    let ((projector_gap, fdk_gap), tolerance) = if double {
        (adjoint_gaps::<f64>(&geom, grid, adjoint_grid, seed)?, 1e-10)
    } else {
        (adjoint_gaps::<f32>(&geom, grid, adjoint_grid, seed)?, 1e-4)
    };
    Ok(AdjointReport { projector_gap, fdk_gap, tolerance })
}
