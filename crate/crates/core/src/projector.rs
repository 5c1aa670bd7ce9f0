//! Ray-driven cone-beam forward projector and its exact transpose.
//!
//! Each detector pixel's ray (source to pixel centre) is sampled at a fixed
//! step of half a voxel with trilinear interpolation, the volume being zero
//! outside the grid. The forward and transpose passes share one weight
//! enumeration, so adjointness holds up to floating-point rounding.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, VolumeGrid, ViewPose};
use crate::scalar::{dot, Real};
use crate::tensor::{dims5, Domain, Graph, Tensor, Var};

/// Per-view detector readings (dimensionless line integrals), stored
/// view-major, row-major within a view, column fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionStack<T> {
    pub geometry: ConeBeamGeometry,
    data: Vec<T>,
}

impl<T: Real> ProjectionStack<T> {
    pub fn new(geometry: ConeBeamGeometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geometry.n_pixels() {
            return Err(Error::Shape(format!(
                "projection data has {} values, geometry needs {} ({} views x {} x {})",
                data.len(),
                geometry.n_pixels(),
                geometry.n_views(),
                geometry.det_rows,
                geometry.det_cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projection stack"));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: ConeBeamGeometry) -> Self {
        let n = geometry.n_pixels();
        Self { geometry, data: vec![T::zero(); n] }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn view(&self, v: usize) -> &[T] {
        let n = self.geometry.det_rows * self.geometry.det_cols;
        &self.data[v * n..(v + 1) * n]
    }

    pub fn at(&self, view: usize, row: usize, col: usize) -> T {
        let g = &self.geometry;
        self.data[(view * g.det_rows + row) * g.det_cols + col]
    }

    /// Keeps every `factor`-th view.
    pub fn subsampled(&self, factor: usize) -> Result<Self> {
        let geometry = self.geometry.subsampled(factor)?;
        let n = self.geometry.det_rows * self.geometry.det_cols;
        let data = (0..self.geometry.n_views())
            .step_by(factor)
            .flat_map(|v| self.data[v * n..(v + 1) * n].iter().copied())
            .collect();
        Ok(Self { geometry, data })
    }

    /// `[1, 1, views, rows, cols]` tensor view of the data.
    pub fn to_tensor(&self) -> Tensor<T> {
        let g = &self.geometry;
        Tensor::new(vec![1, 1, g.n_views(), g.det_rows, g.det_cols], self.data.clone()).expect("sizes match")
    }
}

/// Views per transpose partition; fixed so that results do not depend on
/// the thread count.
const TRANSPOSE_PARTITIONS: usize = 8;

#[derive(Clone, Debug)]
pub struct Projector {
    geom: ConeBeamGeometry,
    grid: VolumeGrid,
    poses: Vec<ViewPose>,
}

impl Projector {
    pub fn new(geom: ConeBeamGeometry, grid: VolumeGrid) -> Result<Self> {
        geom.validate()?;
        let poses = (0..geom.n_views()).map(|v| geom.view_pose(v)).collect::<Result<_>>()?;
        Ok(Self { geom, grid, poses })
    }

    pub fn geometry(&self) -> &ConeBeamGeometry {
        &self.geom
    }

    pub fn grid(&self) -> &VolumeGrid {
        &self.grid
    }

    pub fn step_mm(&self) -> f64 {
        self.grid.voxel_mm / 2.0
    }

    /// Visits every `(voxel index, weight)` pair contributing to the pixel's
    /// line integral. Weights already include the step length.
    pub fn for_each_weight(&self, view: usize, row: usize, col: usize, mut visit: impl FnMut(usize, f64)) {
        let pose = &self.poses[view];
        let src = pose.source;
        let dst = pose.pixel_center(&self.geom, row, col);
        let dir0 = [dst[0] - src[0], dst[1] - src[1], dst[2] - src[2]];
        let len = (dir0[0] * dir0[0] + dir0[1] * dir0[1] + dir0[2] * dir0[2]).sqrt();
        let dir = [dir0[0] / len, dir0[1] / len, dir0[2] / len];

        // support of the trilinear interpolant: one voxel beyond the outer centres
        let g = &self.grid;
        let half = [
            (g.nx as f64 + 1.0) / 2.0 * g.voxel_mm,
            (g.ny as f64 + 1.0) / 2.0 * g.voxel_mm,
            (g.nz as f64 + 1.0) / 2.0 * g.voxel_mm,
        ];
        let (mut t0, mut t1) = (0.0f64, len);
        for a in 0..3 {
            if dir[a].abs() < 1e-12 {
                if src[a].abs() >= half[a] {
                    return;
                }
            } else {
                let ta = (-half[a] - src[a]) / dir[a];
                let tb = (half[a] - src[a]) / dir[a];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if t1 <= t0 {
            return;
        }
        let ds = self.step_mm();
        let n_steps = ((t1 - t0) / ds).ceil() as usize;
        let inv = 1.0 / g.voxel_mm;
        let off = [(g.nx as f64 - 1.0) / 2.0, (g.ny as f64 - 1.0) / 2.0, (g.nz as f64 - 1.0) / 2.0];
        let dims = [g.nx as isize, g.ny as isize, g.nz as isize];
        for k in 0..n_steps {
            let t = t0 + (k as f64 + 0.5) * ds;
            let q = [
                (src[0] + t * dir[0]) * inv + off[0],
                (src[1] + t * dir[1]) * inv + off[1],
                (src[2] + t * dir[2]) * inv + off[2],
            ];
            let fl = [q[0].floor(), q[1].floor(), q[2].floor()];
            let i0 = [fl[0] as isize, fl[1] as isize, fl[2] as isize];
            let fr = [q[0] - fl[0], q[1] - fl[1], q[2] - fl[2]];
            for cz in 0..2 {
                let z = i0[2] + cz;
                if z < 0 || z >= dims[2] {
                    continue;
                }
                let wz = if cz == 0 { 1.0 - fr[2] } else { fr[2] };
                for cy in 0..2 {
                    let y = i0[1] + cy;
                    if y < 0 || y >= dims[1] {
                        continue;
                    }
                    let wy = if cy == 0 { 1.0 - fr[1] } else { fr[1] };
                    for cx in 0..2 {
                        let x = i0[0] + cx;
                        if x < 0 || x >= dims[0] {
                            continue;
                        }
                        let wx = if cx == 0 { 1.0 - fr[0] } else { fr[0] };
                        let w = wx * wy * wz * ds;
                        if w != 0.0 {
                            visit(((z * dims[1] + y) * dims[0] + x) as usize, w);
                        }
                    }
                }
            }
        }
    }

    /// `A x`: line integrals of an attenuation volume (mm^-1, x fastest).
    pub fn forward<T: Real>(&self, volume: &[T]) -> Result<Vec<T>> {
        if volume.len() != self.grid.len() {
            return Err(Error::Shape(format!(
                "volume has {} voxels, grid {}",
                volume.len(),
                self.grid.canonical_text()
            )));
        }
        if volume.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume"));
        }
        let (rows, cols) = (self.geom.det_rows, self.geom.det_cols);
        let mut out = vec![T::zero(); self.geom.n_pixels()];
        out.par_chunks_mut(cols).enumerate().for_each(|(vr, line)| {
            let (view, row) = (vr / rows, vr % rows);
            for (col, o) in line.iter_mut().enumerate() {
                let mut acc = T::zero();
                self.for_each_weight(view, row, col, |idx, w| acc += T::of(w) * volume[idx]);
                *o = acc;
            }
        });
        Ok(out)
    }

    /// `A^T y`: splats each pixel value back with the forward weights.
    pub fn transpose<T: Real>(&self, proj: &[T]) -> Result<Vec<T>> {
        if proj.len() != self.geom.n_pixels() {
            return Err(Error::Shape(format!(
                "projection data has {} values, projector expects {}",
                proj.len(),
                self.geom.n_pixels()
            )));
        }
        if proj.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projections"));
        }
        let nv = self.geom.n_views();
        let (rows, cols) = (self.geom.det_rows, self.geom.det_cols);
        let parts = TRANSPOSE_PARTITIONS.min(nv);
        let per = nv.div_ceil(parts);
        let partials: Vec<Vec<T>> = (0..parts)
            .into_par_iter()
            .map(|p| {
                let mut acc = vec![T::zero(); self.grid.len()];
                for view in p * per..((p + 1) * per).min(nv) {
                    for row in 0..rows {
                        for col in 0..cols {
                            let y = proj[(view * rows + row) * cols + col];
                            if y == T::zero() {
                                continue;
                            }
                            self.for_each_weight(view, row, col, |idx, w| acc[idx] += T::of(w) * y);
                        }
                    }
                }
                acc
            })
            .collect();
        let mut iter = partials.into_iter();
        let mut out = iter.next().unwrap_or_else(|| vec![T::zero(); self.grid.len()]);
        for part in iter {
            out.iter_mut().zip(&part).for_each(|(a, &b)| *a += b);
        }
        Ok(out)
    }

    pub fn project<T: Real>(&self, volume: &[T]) -> Result<ProjectionStack<T>> {
        let data = self.forward(volume)?;
        Ok(ProjectionStack { geometry: self.geom.clone(), data })
    }

    pub fn backproject_transpose<T: Real>(&self, stack: &ProjectionStack<T>) -> Result<Vec<T>> {
        if stack.geometry != self.geom {
            return Err(Error::Invalid("projection geometry differs from the projector's".into()));
        }
        self.transpose(stack.data())
    }
}

/// `|<Ax, y> - <x, A^T y>| / max(|<Ax, y>|, tiny)` for seeded uniform `x`, `y`.
pub fn adjoint_test<T: Real>(geom: &ConeBeamGeometry, grid: &VolumeGrid, seed: u64) -> Result<f64> {
    let p = Projector::new(geom.clone(), *grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<T> = (0..grid.len()).map(|_| T::of(rng.gen::<f64>())).collect();
    let y: Vec<T> = (0..geom.n_pixels()).map(|_| T::of(rng.gen::<f64>())).collect();
    let lhs = dot(&p.forward(&x)?, &y);
    let rhs = dot(&x, &p.transpose(&y)?);
    Ok(relative_gap(lhs, rhs))
}

pub(crate) fn relative_gap(lhs: f64, rhs: f64) -> f64 {
    (lhs - rhs).abs() / lhs.abs().max(f64::MIN_POSITIVE)
}

impl<T: Real> Graph<T> {
    /// Differentiable projection layer: `scale * A x` per sample for a
    /// single-channel volume batch `[N, 1, nz, ny, nx]`.
    pub fn cone_project(&mut self, x: Var, projector: &Arc<Projector>, scale: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, d, h, w] = dims5(&shape)?;
        let grid = projector.grid();
        if c != 1 || [d, h, w] != grid.shape_zyx() {
            return Err(Error::Shape(format!(
                "projection layer expects [N,1,{},{},{}], got {shape:?}",
                grid.nz, grid.ny, grid.nx
            )));
        }
        let per = projector.geometry().n_pixels();
        let s = T::of(scale);
        let mut out = Vec::with_capacity(n * per);
        for chunk in self.value(x).data().chunks(grid.len()) {
            out.extend(projector.forward(chunk)?.into_iter().map(|v| v * s));
        }
        let g = projector.geometry();
        let value = Tensor::new(vec![n, 1, g.n_views(), g.det_rows, g.det_cols], out)?;
        let p = Arc::clone(projector);
        Ok(self.push_in(
            "cone_project",
            Domain::Projection,
            vec![x],
            value,
            Box::new(move |a| {
                let mut gx = Vec::with_capacity(a.inputs[0].numel());
                for chunk in a.grad.chunks(per) {
                    gx.extend(p.transpose(chunk).expect("finite gradient").into_iter().map(|v| v * s));
                }
                vec![Some(gx)]
            }),
        ))
    }
}
