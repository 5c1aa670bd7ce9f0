//! Simulated datasets on disk: `vol_NNNN.cbv` ground truth in HU,
//! `proj_NNNN.cbp` sparse projections and a `manifest.txt` with the split.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::TrainConfig;
use crate::data::{generate_phantom, load_projections, load_volume, save_projections, save_volume, simulate_scan, Volume};
use crate::error::{Error, Result};
use crate::geometry::ConeBeamGeometry;
use crate::models::geometry_fingerprint;
use crate::projector::ProjectionStack;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Train / validation / test counts in the 42 : 9 : 10 proportion.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = ((n * 42) as f64 / 61.0).round() as usize;
    let val = (((n * 9) as f64 / 61.0).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// SplitMix64 step, used to derive independent child seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn volume_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("vol_{id:04}.cbv"))
}

pub fn projection_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("proj_{id:04}.cbp"))
}

/// Simulates the projections of an HU volume in `f64` and stores them at
/// file precision.
pub fn simulate_projections(volume: &Volume<f32>, full: &ConeBeamGeometry, sparse_factor: usize) -> Result<ProjectionStack<f32>> {
    let (stack, _) = simulate_scan(&volume.cast::<f64>(), full, sparse_factor)?;
    let data = stack.data().iter().map(|&v| v as f32).collect();
    ProjectionStack::new(stack.geometry, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub sparse_factor: usize,
    pub fingerprint: String,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

fn ids(list: &[usize]) -> String {
    list.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

impl DatasetManifest {
    pub fn n_volumes(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_volumes = {}", self.n_volumes());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "sparse_factor = {}", self.sparse_factor);
        let _ = writeln!(s, "geometry = {}", self.fingerprint);
        let _ = writeln!(s, "train = {}", ids(&self.train));
        let _ = writeln!(s, "validation = {}", ids(&self.validation));
        let _ = writeln!(s, "test = {}", ids(&self.test));
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self { seed: 0, sparse_factor: 0, fingerprint: String::new(), train: vec![], validation: vec![], test: vec![] };
        let mut n = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let bad = |msg: String| Error::Config { line: line_no, msg };
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("expected `key = value`: {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("{k}: bad number {v:?}")));
            let list = |v: &str| -> Result<Vec<usize>> {
                v.split(',').filter(|s| !s.trim().is_empty()).map(|s| Ok(num(s.trim())? as usize)).collect()
            };
            match k {
                "n_volumes" => n = Some(num(v)? as usize),
                "seed" => m.seed = num(v)?,
                "sparse_factor" => m.sparse_factor = num(v)? as usize,
                "geometry" => m.fingerprint = v.to_string(),
                "train" => m.train = list(v)?,
                "validation" => m.validation = list(v)?,
                "test" => m.test = list(v)?,
                _ => return Err(bad(format!("unknown key {k:?}"))),
            }
        }
        if n != Some(m.n_volumes()) {
            return Err(Error::Invalid("dataset manifest: split sizes do not add up to n_volumes".into()));
        }
        Ok(m)
    }
}

/// A dataset directory and its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { manifest: DatasetManifest::parse(&text)?, dir })
    }

    pub fn volume(&self, id: usize) -> Result<Volume<f32>> {
        load_volume(volume_path(&self.dir, id))
    }

    pub fn projections(&self, id: usize) -> Result<ProjectionStack<f32>> {
        load_projections(projection_path(&self.dir, id))
    }

    /// Errors unless the data was simulated for the config's geometry.
    pub fn check_config(&self, cfg: &TrainConfig) -> Result<()> {
        let expected = geometry_fingerprint(&cfg.sparse_geometry()?, &cfg.grid()?);
        if expected != self.manifest.fingerprint {
            return Err(Error::Fingerprint { checkpoint: expected, data: self.manifest.fingerprint.clone() });
        }
        Ok(())
    }
}

/// Generates `n` phantoms with their sparse-view scans. Output depends only
/// on the config geometry, `n` and `seed`.
pub fn simulate_dataset(cfg: &TrainConfig, n: usize, seed: u64, out: impl AsRef<Path>) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Invalid("dataset needs at least one volume".into()));
    }
    let out = out.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let grid = cfg.grid()?;
    let full = cfg.full_geometry()?;
    (0..n).into_par_iter().try_for_each(|id| -> Result<()> {
        let volume = generate_phantom::<f32>(mix_seed(seed, id as u64), &grid);
        let stack = simulate_projections(&volume, &full, cfg.sparse_factor)?;
        save_volume(volume_path(out, id), &volume)?;
        save_projections(projection_path(out, id), &stack)
    })?;
    let (n_train, n_val, _) = split_counts(n);
    let manifest = DatasetManifest {
        seed,
        sparse_factor: cfg.sparse_factor,
        fingerprint: geometry_fingerprint(&cfg.sparse_geometry()?, &grid),
        train: (0..n_train).collect(),
        validation: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..n).collect(),
    };
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(Dataset { dir: out.to_path_buf(), manifest })
}
