//! Volumes, unit conversions, synthetic phantoms, augmentation, scan
//! simulation and the on-disk formats.

mod augment;
mod io;
mod phantom;

pub use augment::{apply_flips, augment, AugmentConfig, AugmentDraw};
pub use io::{load_projections, load_volume, read_projections, read_volume, save_projections, save_volume, write_projections, write_volume};
pub use phantom::{generate_phantom, Ellipsoid, PhantomPlan};

use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, VolumeGrid};
use crate::projector::{ProjectionStack, Projector};
use crate::scalar::Real;

/// Linear attenuation of water, mm^-1.
pub const MU_WATER: f64 = 0.02;
pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 2000.0;
/// Width of the normalization window, also the metrics' data range.
pub const HU_RANGE: f64 = HU_MAX - HU_MIN;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    Hu,
    PerMm,
    Normalized,
}

impl Unit {
    pub fn code(self) -> u32 {
        match self {
            Unit::Hu => 0,
            Unit::PerMm => 1,
            Unit::Normalized => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Unit::Hu),
            1 => Some(Unit::PerMm),
            2 => Some(Unit::Normalized),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub grid: VolumeGrid,
    pub unit: Unit,
    values: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn new(grid: VolumeGrid, unit: Unit, values: Vec<T>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "volume has {} values, grid {} needs {}",
                values.len(),
                grid.canonical_text(),
                grid.len()
            )));
        }
        Ok(Self { grid, unit, values })
    }

    pub fn filled(grid: VolumeGrid, unit: Unit, value: T) -> Self {
        Self { grid, unit, values: vec![value; grid.len()] }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> T {
        self.values[self.grid.index(i, j, k)]
    }

    /// Axial slice `k` (x fastest).
    pub fn axial_slice(&self, k: usize) -> &[T] {
        let n = self.grid.nx * self.grid.ny;
        &self.values[k * n..(k + 1) * n]
    }

    fn expect_unit(&self, unit: Unit) -> Result<()> {
        if self.unit != unit {
            return Err(Error::Invalid(format!("expected a {unit:?} volume, got {:?}", self.unit)));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume { grid: self.grid, unit: self.unit, values: self.values.iter().map(|v| U::of(v.f64())).collect() }
    }

    fn mapped(&self, unit: Unit, f: impl Fn(f64) -> f64) -> Volume<T> {
        Volume { grid: self.grid, unit, values: self.values.iter().map(|v| T::of(f(v.f64()))).collect() }
    }

    /// Clamps HU values to the supported window `[-1000, 2000]`.
    pub fn clamp_hu(&self) -> Result<Volume<T>> {
        self.expect_unit(Unit::Hu)?;
        Ok(self.mapped(Unit::Hu, |h| h.clamp(HU_MIN, HU_MAX)))
    }
}

/// `mu = mu_water * (1 + HU / 1000)`, clamped at 0.
pub fn hu_to_mu<T: Real>(v: &Volume<T>) -> Result<Volume<T>> {
    v.expect_unit(Unit::Hu)?;
    Ok(v.mapped(Unit::PerMm, |h| (MU_WATER * (1.0 + h / 1000.0)).max(0.0)))
}

pub fn mu_to_hu<T: Real>(v: &Volume<T>) -> Result<Volume<T>> {
    v.expect_unit(Unit::PerMm)?;
    Ok(v.mapped(Unit::Hu, |m| 1000.0 * (m / MU_WATER - 1.0)))
}

/// `n = clamp((HU + 1000) / 3000, 0, 1)`.
pub fn normalize_hu<T: Real>(v: &Volume<T>) -> Result<Volume<T>> {
    v.expect_unit(Unit::Hu)?;
    Ok(v.mapped(Unit::Normalized, |h| ((h - HU_MIN) / HU_RANGE).clamp(0.0, 1.0)))
}

/// Inverse of [`normalize_hu`]; out-of-range inputs are clamped first.
pub fn denormalize<T: Real>(v: &Volume<T>) -> Result<Volume<T>> {
    v.expect_unit(Unit::Normalized)?;
    Ok(v.mapped(Unit::Hu, |n| n.clamp(0.0, 1.0) * HU_RANGE + HU_MIN))
}

/// Attenuation per normalized intensity unit: `mu = MU_PER_NORM * n` for
/// `n` in the normalized domain (exact for HU >= -1000).
pub const MU_PER_NORM: f64 = MU_WATER * HU_RANGE / 1000.0;

/// Projects `hu_to_mu(volume)` on the full geometry and retains every
/// `sparse_factor`-th view. Returns the sparse stack and the ground truth.
///
/// Views are independent, so only the retained ones are traced; the result
/// is identical to subsampling a full simulation.
pub fn simulate_scan<T: Real>(
    volume: &Volume<T>,
    full_geometry: &ConeBeamGeometry,
    sparse_factor: usize,
) -> Result<(ProjectionStack<T>, Volume<T>)> {
    let mu = hu_to_mu(volume)?;
    let sparse = full_geometry.subsampled(sparse_factor)?;
    let stack = Projector::new(sparse, volume.grid)?.project(mu.values())?;
    Ok((stack, volume.clone()))
}
