//! Circular-trajectory cone-beam acquisition and the reconstruction grid.
//!
//! Conventions used everywhere: rotation axis is `z`, the source starts at
//! angle 0 on the `+x` axis and rotates counter-clockwise, the detector is a
//! flat panel with its principal point at the panel centre. Angles are
//! stored in degrees and converted at the point of use.

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct ConeBeamGeometry {
    pub sid_mm: f64,
    pub sdd_mm: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub det_pixel_mm: f64,
    pub angles_deg: Vec<f64>,
}

/// Source position and detector frame for one view, in mm with the
/// isocentre at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewPose {
    pub source: Vec3,
    pub det_center: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
}

impl ConeBeamGeometry {
    pub fn new(
        sid_mm: f64,
        sdd_mm: f64,
        det_rows: usize,
        det_cols: usize,
        det_pixel_mm: f64,
        angles_deg: Vec<f64>,
    ) -> Result<Self> {
        let g = Self { sid_mm, sdd_mm, det_rows, det_cols, det_pixel_mm, angles_deg };
        g.validate()?;
        Ok(g)
    }

    /// 240 x 310 px detector at 1.232 mm, SID 160 mm, SDD 400 mm, 360 views.
    pub fn full_scale() -> Self {
        Self::new(160.0, 400.0, 240, 310, 1.232, equiangular_angles(360).expect("n > 0"))
            .expect("valid constants")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sid_mm > 0.0 && self.sid_mm < self.sdd_mm && self.sdd_mm.is_finite()) {
            return Err(Error::Invalid(format!(
                "need 0 < sid < sdd, got sid {} sdd {}",
                self.sid_mm, self.sdd_mm
            )));
        }
        if self.det_rows == 0 || self.det_cols == 0 {
            return Err(Error::Invalid("detector needs at least one row and column".into()));
        }
        if !(self.det_pixel_mm > 0.0 && self.det_pixel_mm.is_finite()) {
            return Err(Error::Invalid(format!("pixel pitch must be positive, got {}", self.det_pixel_mm)));
        }
        if self.angles_deg.is_empty() {
            return Err(Error::Invalid("geometry has no views".into()));
        }
        for (i, &a) in self.angles_deg.iter().enumerate() {
            if !(0.0..360.0).contains(&a) {
                return Err(Error::Invalid(format!("angle {a} outside [0, 360)")));
            }
            if i > 0 && a <= self.angles_deg[i - 1] {
                return Err(Error::Invalid("angles must be strictly increasing".into()));
            }
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.angles_deg.len()
    }

    /// Number of values in a projection stack for this geometry.
    pub fn n_pixels(&self) -> usize {
        self.n_views() * self.det_rows * self.det_cols
    }

    pub fn with_angles(&self, angles_deg: Vec<f64>) -> Result<Self> {
        Self::new(self.sid_mm, self.sdd_mm, self.det_rows, self.det_cols, self.det_pixel_mm, angles_deg)
    }

    /// Keeps every `factor`-th view starting with the first.
    pub fn subsampled(&self, factor: usize) -> Result<Self> {
        self.with_angles(sparse_subsample(&self.angles_deg, factor)?)
    }

    pub fn magnification(&self) -> f64 {
        self.sdd_mm / self.sid_mm
    }

    pub fn view_pose(&self, view: usize) -> Result<ViewPose> {
        let &deg = self.angles_deg.get(view).ok_or_else(|| {
            Error::Invalid(format!("view index {view} out of range (n_views {})", self.n_views()))
        })?;
        let (s, c) = deg.to_radians().sin_cos();
        let odd = self.sdd_mm - self.sid_mm;
        Ok(ViewPose {
            source: [self.sid_mm * c, self.sid_mm * s, 0.0],
            det_center: [-odd * c, -odd * s, 0.0],
            u_axis: [-s, c, 0.0],
            v_axis: [0.0, 0.0, 1.0],
        })
    }

    /// Offset of pixel column `c` from the principal point, mm.
    pub fn u_offset(&self, col: f64) -> f64 {
        (col - (self.det_cols as f64 - 1.0) / 2.0) * self.det_pixel_mm
    }

    /// Offset of pixel row `r` from the principal point, mm.
    pub fn v_offset(&self, row: f64) -> f64 {
        (row - (self.det_rows as f64 - 1.0) / 2.0) * self.det_pixel_mm
    }

    /// Canonical text describing everything that fixes the discretization.
    /// Reals are printed at `f32` precision, the precision of the file formats.
    pub fn canonical_text(&self) -> String {
        let angles: Vec<String> = self.angles_deg.iter().map(|&a| format!("{:?}", a as f32)).collect();
        format!(
            "sid={:?};sdd={:?};rows={};cols={};pitch={:?};angles={}",
            self.sid_mm as f32,
            self.sdd_mm as f32,
            self.det_rows,
            self.det_cols,
            self.det_pixel_mm as f32,
            angles.join(",")
        )
    }

    /// Rounds every real through `f32`, matching a geometry read back from a
    /// projection file.
    pub fn quantized(&self) -> Self {
        let q = |v: f64| v as f32 as f64;
        Self {
            sid_mm: q(self.sid_mm),
            sdd_mm: q(self.sdd_mm),
            det_pixel_mm: q(self.det_pixel_mm),
            angles_deg: self.angles_deg.iter().map(|&a| q(a)).collect(),
            ..self.clone()
        }
    }
}

impl ViewPose {
    pub fn pixel_center(&self, geom: &ConeBeamGeometry, row: usize, col: usize) -> Vec3 {
        let du = geom.u_offset(col as f64);
        let dv = geom.v_offset(row as f64);
        std::array::from_fn(|k| self.det_center[k] + du * self.u_axis[k] + dv * self.v_axis[k])
    }
}

/// `n_views` angles `i * 360 / n_views` degrees, starting at 0.
pub fn equiangular_angles(n_views: usize) -> Result<Vec<f64>> {
    if n_views == 0 {
        return Err(Error::Invalid("n_views must be at least 1".into()));
    }
    Ok((0..n_views).map(|i| i as f64 * 360.0 / n_views as f64).collect())
}

/// Retains indices `0, factor, 2 * factor, ...` (`ceil(n / factor)` views).
pub fn sparse_subsample(angles: &[f64], factor: usize) -> Result<Vec<f64>> {
    if factor == 0 {
        return Err(Error::Invalid("sparse factor must be at least 1".into()));
    }
    Ok(angles.iter().step_by(factor).copied().collect())
}

/// Isotropic voxel grid centred on the isocentre. Voxel `(i, j, k)` has
/// centre `((i - (nx-1)/2) * voxel, ...)`; storage is `x` fastest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeGrid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub voxel_mm: f64,
}

impl VolumeGrid {
    pub fn new(nx: usize, ny: usize, nz: usize, voxel_mm: f64) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Invalid(format!("grid extents must be >= 1, got {nx}x{ny}x{nz}")));
        }
        if !(voxel_mm > 0.0 && voxel_mm.is_finite()) {
            return Err(Error::Invalid(format!("voxel size must be positive, got {voxel_mm}")));
        }
        Ok(Self { nx, ny, nz, voxel_mm })
    }

    pub fn cube(n: usize, voxel_mm: f64) -> Result<Self> {
        Self::new(n, n, n, voxel_mm)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[nz, ny, nx]`, the spatial part of a tensor shape.
    pub fn shape_zyx(&self) -> [usize; 3] {
        [self.nz, self.ny, self.nx]
    }

    pub fn extent_mm(&self) -> Vec3 {
        [
            self.nx as f64 * self.voxel_mm,
            self.ny as f64 * self.voxel_mm,
            self.nz as f64 * self.voxel_mm,
        ]
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.ny + j) * self.nx + i
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            (i as f64 - (self.nx as f64 - 1.0) / 2.0) * self.voxel_mm,
            (j as f64 - (self.ny as f64 - 1.0) / 2.0) * self.voxel_mm,
            (k as f64 - (self.nz as f64 - 1.0) / 2.0) * self.voxel_mm,
        ]
    }

    /// Continuous voxel coordinates of a physical point.
    pub fn to_index_space(&self, p: Vec3) -> Vec3 {
        [
            p[0] / self.voxel_mm + (self.nx as f64 - 1.0) / 2.0,
            p[1] / self.voxel_mm + (self.ny as f64 - 1.0) / 2.0,
            p[2] / self.voxel_mm + (self.nz as f64 - 1.0) / 2.0,
        ]
    }

    pub fn canonical_text(&self) -> String {
        format!("grid={}x{}x{};voxel={:?}", self.nx, self.ny, self.nz, self.voxel_mm as f32)
    }

    pub fn quantized(&self) -> Self {
        Self { voxel_mm: self.voxel_mm as f32 as f64, ..*self }
    }
}
