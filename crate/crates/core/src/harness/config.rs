//! `key = value` training configuration with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::geometry::{equiangular_angles, ConeBeamGeometry, VolumeGrid};
use crate::models::{ModelConfig, ModelKind, PrimalInit};
use crate::tensor::Adam;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub effective_batch: usize,
    pub micro_batch: usize,
    pub sparse_factor: usize,
    pub seed: u64,
    pub grid_size: usize,
    pub voxel_mm: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub det_pixel_mm: f64,
    pub sid_mm: f64,
    pub sdd_mm: f64,
    pub full_views: usize,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    /// Save `last.ckpt` every this many epochs (and after the final one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    /// Optimizer and schedule of the reference protocol on the desk-scale
    /// geometry: 32^3 grid at 4 mm, 78 x 60 detector at 4.928 mm, 90 views.
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 151,
            effective_batch: 16,
            micro_batch: 1,
            sparse_factor: 8,
            seed: 0,
            grid_size: 32,
            voxel_mm: 4.0,
            det_rows: 60,
            det_cols: 78,
            det_pixel_mm: 4.928,
            sid_mm: 160.0,
            sdd_mm: 400.0,
            full_views: 90,
            model: ModelConfig { unet_depth: 2, unet_base_channels: 8, ..ModelConfig::default() },
            augment: AugmentConfig::default(),
            checkpoint_every: 1,
        }
    }
}

/// Shortest of the plain and exponent renderings (`1e-3`, `0.9`, `160`).
pub fn format_float(v: f64) -> String {
    let plain = format!("{v}");
    let exp = format!("{v:e}");
    if exp.len() < plain.len() {
        exp
    } else {
        plain
    }
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

fn parse_num<N: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<N> {
    v.parse().map_err(|_| err(line, format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(err(line, format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl TrainConfig {
    pub fn adam(&self) -> Adam {
        Adam { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..Adam::default() }
    }

    pub fn grid(&self) -> Result<VolumeGrid> {
        Ok(VolumeGrid::cube(self.grid_size, self.voxel_mm)?.quantized())
    }

    /// Full circular scan, reals rounded to file precision.
    pub fn full_geometry(&self) -> Result<ConeBeamGeometry> {
        Ok(ConeBeamGeometry::new(
            self.sid_mm,
            self.sdd_mm,
            self.det_rows,
            self.det_cols,
            self.det_pixel_mm,
            equiangular_angles(self.full_views)?,
        )?
        .quantized())
    }

    pub fn sparse_geometry(&self) -> Result<ConeBeamGeometry> {
        self.full_geometry()?.subsampled(self.sparse_factor)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let a = &mut self.augment;
        match key {
            "lr" => self.lr = parse_num(line, key, v)?,
            "beta1" => self.beta1 = parse_num(line, key, v)?,
            "beta2" => self.beta2 = parse_num(line, key, v)?,
            "epochs" => self.epochs = parse_num(line, key, v)?,
            "effective_batch" => self.effective_batch = parse_num(line, key, v)?,
            "micro_batch" => self.micro_batch = parse_num(line, key, v)?,
            "sparse_factor" => self.sparse_factor = parse_num(line, key, v)?,
            "seed" => self.seed = parse_num(line, key, v)?,
            "grid_size" => self.grid_size = parse_num(line, key, v)?,
            "voxel_mm" => self.voxel_mm = parse_num(line, key, v)?,
            "det_rows" => self.det_rows = parse_num(line, key, v)?,
            "det_cols" => self.det_cols = parse_num(line, key, v)?,
            "det_pixel_mm" => self.det_pixel_mm = parse_num(line, key, v)?,
            "sid_mm" => self.sid_mm = parse_num(line, key, v)?,
            "sdd_mm" => self.sdd_mm = parse_num(line, key, v)?,
            "full_views" => self.full_views = parse_num(line, key, v)?,
            "model" => m.kind = v.parse::<ModelKind>().map_err(|e| err(line, e.to_string()))?,
            "n_iterations" => m.n_iterations = parse_num(line, key, v)?,
            "primal_channels" => m.primal_channels = parse_num(line, key, v)?,
            "dual_channels" => m.dual_channels = parse_num(line, key, v)?,
            "hidden_channels" => m.hidden_channels = parse_num(line, key, v)?,
            "unet_depth" => m.unet_depth = parse_num(line, key, v)?,
            "unet_base_channels" => m.unet_base_channels = parse_num(line, key, v)?,
            "share_primal_unet" => m.share_primal = parse_bool(line, key, v)?,
            "primal_init" => m.primal_init = v.parse::<PrimalInit>().map_err(|e| err(line, e.to_string()))?,
            "augment" => a.enabled = parse_bool(line, key, v)?,
            "flip_prob" => a.flip_prob = parse_num(line, key, v)?,
            "max_rotation_deg" => a.max_rotation_deg = parse_num(line, key, v)?,
            "scale_min" => a.scale_min = parse_num(line, key, v)?,
            "scale_max" => a.scale_max = parse_num(line, key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(line, key, v)?,
            _ => return Err(err(line, format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{k} must lie in [0, 1), got {b}"));
            }
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.micro_batch == 0 || self.effective_batch == 0 || !self.effective_batch.is_multiple_of(self.micro_batch) {
            return bad(format!(
                "effective_batch ({}) must be a positive multiple of micro_batch ({})",
                self.effective_batch, self.micro_batch
            ));
        }
        if self.sparse_factor == 0 || self.full_views == 0 || self.checkpoint_every == 0 {
            return bad("sparse_factor, full_views and checkpoint_every must be at least 1".into());
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.flip_prob) || a.max_rotation_deg < 0.0 || !(0.0 < a.scale_min && a.scale_min <= a.scale_max) {
            return bad("augmentation ranges are invalid".into());
        }
        self.model.validate()?;
        self.grid()?;
        self.full_geometry()?;
        Ok(())
    }

    /// Parses config text. Keys under `checkpoint.` are returned separately
    /// when `allow_meta`; otherwise every key must be known.
    pub fn parse_with_meta(text: &str, allow_meta: bool) -> Result<(Self, BTreeMap<String, String>)> {
        let mut cfg = Self::default();
        let mut meta = BTreeMap::new();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(err(line, format!("expected `key = value`, got {content:?}")));
            };
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), line) {
                return Err(err(line, format!("{k} already set on line {prev}")));
            }
            if allow_meta && k.starts_with("checkpoint.") {
                meta.insert(k.to_string(), v.to_string());
                continue;
            }
            cfg.set(line, k, v)?;
        }
        cfg.validate()?;
        Ok((cfg, meta))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self::parse_with_meta(text, false)?.0)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key in a fixed order; parses back to an equal config.
    pub fn serialize(&self) -> String {
        let f = format_float;
        let m = &self.model;
        let a = &self.augment;
        let entries: Vec<(&str, String)> = vec![
            ("lr", f(self.lr)),
            ("beta1", f(self.beta1)),
            ("beta2", f(self.beta2)),
            ("epochs", self.epochs.to_string()),
            ("effective_batch", self.effective_batch.to_string()),
            ("micro_batch", self.micro_batch.to_string()),
            ("sparse_factor", self.sparse_factor.to_string()),
            ("seed", self.seed.to_string()),
            ("grid_size", self.grid_size.to_string()),
            ("voxel_mm", f(self.voxel_mm)),
            ("det_rows", self.det_rows.to_string()),
            ("det_cols", self.det_cols.to_string()),
            ("det_pixel_mm", f(self.det_pixel_mm)),
            ("sid_mm", f(self.sid_mm)),
            ("sdd_mm", f(self.sdd_mm)),
            ("full_views", self.full_views.to_string()),
            ("model", m.kind.name().to_string()),
            ("n_iterations", m.n_iterations.to_string()),
            ("primal_channels", m.primal_channels.to_string()),
            ("dual_channels", m.dual_channels.to_string()),
            ("hidden_channels", m.hidden_channels.to_string()),
            ("unet_depth", m.unet_depth.to_string()),
            ("unet_base_channels", m.unet_base_channels.to_string()),
            ("share_primal_unet", m.share_primal.to_string()),
            ("primal_init", m.primal_init.name().to_string()),
            ("augment", a.enabled.to_string()),
            ("flip_prob", f(a.flip_prob)),
            ("max_rotation_deg", f(a.max_rotation_deg)),
            ("scale_min", f(a.scale_min)),
            ("scale_max", f(a.scale_max)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
