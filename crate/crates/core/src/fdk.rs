//! Feldkamp-Davis-Kress reconstruction for full circular scans and its
//! exact transpose.
//!
//! The chain is cosine weighting, row-wise Ram-Lak filtering on the detector
//! rescaled to the isocentre, then voxel-driven backprojection with
//! `(SID / U)^2` distance weighting and a `dβ / 2` view weight, `dβ = 2π / n`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, VolumeGrid};
use crate::projector::{relative_gap, ProjectionStack};
use crate::scalar::{dot, Real};
use crate::tensor::{dims5, Domain, Graph, Tensor, Var};

/// Closed-form band-limited ramp kernel for unit sample spacing.
pub fn ram_lak_tap(n: i64) -> f64 {
    if n == 0 {
        0.25
    } else if n % 2 == 0 {
        0.0
    } else {
        -1.0 / (std::f64::consts::PI * std::f64::consts::PI * (n * n) as f64)
    }
}

/// Ram-Lak filter for rows of `det_cols` samples, applied by zero-padded FFT.
#[derive(Clone)]
pub struct RampFilter {
    det_cols: usize,
    padded_length: usize,
    /// Real frequency response for unit spacing; bin 0 is zero.
    response: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for RampFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RampFilter")
            .field("kind", &"ram-lak")
            .field("det_cols", &self.det_cols)
            .field("padded_length", &self.padded_length)
            .finish()
    }
}

impl RampFilter {
    pub fn new(det_cols: usize) -> Self {
        let padded_length = (2 * det_cols).next_power_of_two().max(2);
        let l = padded_length;
        let mut kernel: Vec<Complex<f64>> = (0..l)
            .map(|i| {
                let n = if i <= l / 2 { i as i64 } else { i as i64 - l as i64 };
                Complex::new(ram_lak_tap(n), 0.0)
            })
            .collect();
        let mut planner = FftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(l);
        let ifft = planner.plan_fft_inverse(l);
        fft.process(&mut kernel);
        let mut response: Vec<f64> = kernel.iter().map(|c| c.re).collect();
        response[0] = 0.0;
        Self { det_cols, padded_length, response, fft, ifft }
    }

    pub fn padded_length(&self) -> usize {
        self.padded_length
    }

    pub fn det_cols(&self) -> usize {
        self.det_cols
    }

    /// Frequency response for unit sample spacing.
    pub fn response(&self) -> &[f64] {
        &self.response
    }

    /// Convolves one row with the ramp kernel for sample spacing `pitch_mm`.
    pub fn filter_row<T: Real>(&self, row: &mut [T], pitch_mm: f64) {
        let full = self.filter_padded(row.iter().map(|v| v.f64()), pitch_mm);
        for (o, b) in row.iter_mut().zip(&full) {
            *o = T::of(*b);
        }
    }

    /// Circular convolution over the whole zero-padded buffer.
    fn filter_padded(&self, row: impl Iterator<Item = f64>, pitch_mm: f64) -> Vec<f64> {
        let l = self.padded_length;
        let scale = 1.0 / (pitch_mm * pitch_mm * l as f64);
        let mut buf: Vec<Complex<f64>> =
            row.map(|v| Complex::new(v, 0.0)).chain(std::iter::repeat(Complex::new(0.0, 0.0))).take(l).collect();
        self.fft.process(&mut buf);
        for (b, &r) in buf.iter_mut().zip(&self.response) {
            *b *= r;
        }
        self.ifft.process(&mut buf);
        buf.iter().map(|b| b.re * scale).collect()
    }
}

/// Multiplies every pixel by `SDD / sqrt(SDD^2 + u^2 + v^2)`.
pub fn cosine_weights(geom: &ConeBeamGeometry) -> Vec<f64> {
    let mut w = Vec::with_capacity(geom.det_rows * geom.det_cols);
    for r in 0..geom.det_rows {
        let v = geom.v_offset(r as f64);
        for c in 0..geom.det_cols {
            let u = geom.u_offset(c as f64);
            w.push(geom.sdd_mm / (geom.sdd_mm * geom.sdd_mm + u * u + v * v).sqrt());
        }
    }
    w
}

pub fn cosine_weight<T: Real>(stack: &ProjectionStack<T>) -> ProjectionStack<T> {
    let w = cosine_weights(&stack.geometry);
    let mut out = stack.clone();
    for view in out.data_mut().chunks_mut(w.len()) {
        view.iter_mut().zip(&w).for_each(|(p, &c)| *p = T::of(p.f64() * c));
    }
    out
}

/// Row-wise ramp filtering of every view.
pub fn ramp_filter_rows<T: Real>(stack: &ProjectionStack<T>, filter: &RampFilter, pitch_mm: f64) -> Result<ProjectionStack<T>> {
    if filter.det_cols() != stack.geometry.det_cols {
        return Err(Error::Shape(format!(
            "filter built for {} columns, detector has {}",
            filter.det_cols(),
            stack.geometry.det_cols
        )));
    }
    let mut out = stack.clone();
    out.data_mut()
        .par_chunks_mut(filter.det_cols())
        .for_each(|row| filter.filter_row(row, pitch_mm));
    Ok(out)
}

/// The composed linear FDK map for one geometry and grid.
#[derive(Clone, Debug)]
pub struct Fdk {
    geom: ConeBeamGeometry,
    grid: VolumeGrid,
    filter: RampFilter,
    cos_w: Vec<f64>,
    trig: Vec<(f64, f64)>,
}

/// Detector sample for one voxel in one view: top-left pixel, bilinear
/// weights and the `(SID/U)^2` factor.
struct DetectorSample {
    row: isize,
    col: isize,
    fr: f64,
    fc: f64,
    weight: f64,
}

impl Fdk {
    pub fn new(geom: ConeBeamGeometry, grid: VolumeGrid) -> Result<Self> {
        geom.validate()?;
        let filter = RampFilter::new(geom.det_cols);
        let cos_w = cosine_weights(&geom);
        let trig = geom.angles_deg.iter().map(|a| a.to_radians().sin_cos()).collect();
        Ok(Self { geom, grid, filter, cos_w, trig })
    }

    pub fn geometry(&self) -> &ConeBeamGeometry {
        &self.geom
    }

    pub fn grid(&self) -> &VolumeGrid {
        &self.grid
    }

    pub fn filter(&self) -> &RampFilter {
        &self.filter
    }

    /// Detector pitch rescaled to the isocentre.
    pub fn iso_pitch_mm(&self) -> f64 {
        self.geom.det_pixel_mm * self.geom.sid_mm / self.geom.sdd_mm
    }

    fn view_weight(&self) -> f64 {
        std::f64::consts::PI / self.geom.n_views() as f64
    }

    #[inline]
    fn sample(&self, view: usize, p: [f64; 3]) -> Option<DetectorSample> {
        let (s, c) = self.trig[view];
        let g = &self.geom;
        let depth = g.sid_mm - (p[0] * c + p[1] * s);
        if depth <= 0.0 {
            return None;
        }
        let mag = g.sdd_mm / depth;
        let u = (-p[0] * s + p[1] * c) * mag;
        let v = p[2] * mag;
        let col = u / g.det_pixel_mm + (g.det_cols as f64 - 1.0) / 2.0;
        let row = v / g.det_pixel_mm + (g.det_rows as f64 - 1.0) / 2.0;
        let (c0, r0) = (col.floor(), row.floor());
        let ratio = g.sid_mm / depth;
        Some(DetectorSample { row: r0 as isize, col: c0 as isize, fr: row - r0, fc: col - c0, weight: ratio * ratio })
    }

    /// Bilinear taps of a detector sample that fall on the panel.
    #[inline]
    fn taps(&self, s: &DetectorSample) -> [(usize, f64); 4] {
        let (rows, cols) = (self.geom.det_rows as isize, self.geom.det_cols as isize);
        let mut out = [(0usize, 0.0f64); 4];
        let mut k = 0;
        for (dr, wr) in [(0, 1.0 - s.fr), (1, s.fr)] {
            let r = s.row + dr;
            if r < 0 || r >= rows {
                k += 2;
                continue;
            }
            for (dc, wc) in [(0, 1.0 - s.fc), (1, s.fc)] {
                let c = s.col + dc;
                if c >= 0 && c < cols {
                    out[k] = ((r * cols + c) as usize, wr * wc);
                }
                k += 1;
            }
        }
        out
    }

    /// Voxel-driven weighted backprojection of filtered projections. Returns
    /// the volume and the number of (voxel, view) pairs behind the source.
    pub fn backproject<T: Real>(&self, filtered: &[T]) -> Result<(Vec<T>, usize)> {
        if filtered.len() != self.geom.n_pixels() {
            return Err(Error::Shape(format!(
                "filtered data has {} values, geometry needs {}",
                filtered.len(),
                self.geom.n_pixels()
            )));
        }
        let g = &self.grid;
        let per_view = self.geom.det_rows * self.geom.det_cols;
        let scale = self.view_weight();
        let mut out = vec![T::zero(); g.len()];
        let behind: usize = out
            .par_chunks_mut(g.nx * g.ny)
            .enumerate()
            .map(|(k, slab)| {
                let mut behind = 0;
                for j in 0..g.ny {
                    for i in 0..g.nx {
                        let p = g.voxel_center(i, j, k);
                        let mut acc = 0.0f64;
                        for view in 0..self.geom.n_views() {
                            let Some(s) = self.sample(view, p) else {
                                behind += 1;
                                continue;
                            };
                            let img = &filtered[view * per_view..(view + 1) * per_view];
                            let mut val = 0.0;
                            for (idx, w) in self.taps(&s) {
                                if w != 0.0 {
                                    val += w * img[idx].f64();
                                }
                            }
                            acc += s.weight * val;
                        }
                        slab[j * g.nx + i] = T::of(acc * scale);
                    }
                }
                behind
            })
            .sum();
        Ok((out, behind))
    }

    /// Exact transpose of [`Fdk::backproject`]: splats each voxel onto the
    /// detector with the same taps and weights.
    pub fn backproject_transpose<T: Real>(&self, volume: &[T]) -> Result<Vec<T>> {
        let g = &self.grid;
        if volume.len() != g.len() {
            return Err(Error::Shape(format!("volume has {} voxels, grid needs {}", volume.len(), g.len())));
        }
        let per_view = self.geom.det_rows * self.geom.det_cols;
        let scale = self.view_weight();
        let mut out = vec![T::zero(); self.geom.n_pixels()];
        out.par_chunks_mut(per_view).enumerate().for_each(|(view, img)| {
            let mut acc = vec![0.0f64; per_view];
            for k in 0..g.nz {
                for j in 0..g.ny {
                    for i in 0..g.nx {
                        let x = volume[g.index(i, j, k)].f64();
                        if x == 0.0 {
                            continue;
                        }
                        let p = g.voxel_center(i, j, k);
                        let Some(s) = self.sample(view, p) else { continue };
                        for (idx, w) in self.taps(&s) {
                            if w != 0.0 {
                                acc[idx] += w * s.weight * x;
                            }
                        }
                    }
                }
            }
            img.iter_mut().zip(&acc).for_each(|(o, &a)| *o = T::of(a * scale));
        });
        Ok(out)
    }

    fn weight_and_filter<T: Real>(&self, data: &mut [T]) {
        let pitch = self.iso_pitch_mm();
        let cols = self.geom.det_cols;
        let per_view = self.cos_w.len();
        data.par_chunks_mut(cols).enumerate().for_each(|(r, row)| {
            let w = &self.cos_w[(r * cols) % per_view..(r * cols) % per_view + cols];
            row.iter_mut().zip(w).for_each(|(p, &c)| *p = T::of(p.f64() * c));
            self.filter.filter_row(row, pitch);
            // the discrete convolution integral carries the sample spacing
            row.iter_mut().for_each(|p| *p = T::of(p.f64() * pitch));
        });
    }

    /// Full FDK reconstruction of raw line integrals.
    pub fn reconstruct<T: Real>(&self, projections: &[T]) -> Result<Vec<T>> {
        if projections.len() != self.geom.n_pixels() {
            return Err(Error::Shape(format!(
                "projection data has {} values, geometry needs {}",
                projections.len(),
                self.geom.n_pixels()
            )));
        }
        if projections.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projections"));
        }
        let mut data = projections.to_vec();
        self.weight_and_filter(&mut data);
        Ok(self.backproject(&data)?.0)
    }

    /// Transpose of [`Fdk::reconstruct`]: volume-domain input, projection-domain output.
    pub fn transpose<T: Real>(&self, volume: &[T]) -> Result<Vec<T>> {
        let mut data = self.backproject_transpose(volume)?;
        let pitch = self.iso_pitch_mm();
        let cols = self.geom.det_cols;
        let per_view = self.cos_w.len();
        data.par_chunks_mut(cols).enumerate().for_each(|(r, row)| {
            row.iter_mut().for_each(|p| *p = T::of(p.f64() * pitch));
            self.filter.filter_row(row, pitch);
            let w = &self.cos_w[(r * cols) % per_view..(r * cols) % per_view + cols];
            row.iter_mut().zip(w).for_each(|(p, &c)| *p = T::of(p.f64() * c));
        });
        Ok(data)
    }
}

/// Voxel-driven FDK backprojection of already weighted and filtered data.
pub fn fdk_backproject<T: Real>(filtered: &ProjectionStack<T>, grid: &VolumeGrid) -> Result<(Vec<T>, usize)> {
    Fdk::new(filtered.geometry.clone(), *grid)?.backproject(filtered.data())
}

/// Direct FDK reconstruction in mm^-1.
pub fn fdk_reconstruct<T: Real>(projections: &ProjectionStack<T>, grid: &VolumeGrid) -> Result<Vec<T>> {
    Fdk::new(projections.geometry.clone(), *grid)?.reconstruct(projections.data())
}

/// Transpose of the full FDK chain.
pub fn fdk_transpose<T: Real>(volume: &[T], geom: &ConeBeamGeometry, grid: &VolumeGrid) -> Result<ProjectionStack<T>> {
    let data = Fdk::new(geom.clone(), *grid)?.transpose(volume)?;
    ProjectionStack::new(geom.clone(), data)
}

/// Dot-product test of the full FDK chain: `<FDK g, x>` vs `<g, FDK^T x>`.
pub fn fdk_adjoint_test<T: Real>(geom: &ConeBeamGeometry, grid: &VolumeGrid, seed: u64) -> Result<f64> {
    let op = Fdk::new(geom.clone(), *grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: Vec<T> = (0..geom.n_pixels()).map(|_| T::of(rng.gen::<f64>())).collect();
    let x: Vec<T> = (0..grid.len()).map(|_| T::of(rng.gen::<f64>())).collect();
    let lhs = dot(&op.reconstruct(&g)?, &x);
    let rhs = dot(&g, &op.transpose(&x)?);
    Ok(relative_gap(lhs, rhs))
}

impl<T: Real> Graph<T> {
    /// Differentiable FDK layer: `scale * FDK(h)` per sample for a
    /// single-channel projection batch `[N, 1, views, rows, cols]`.
    pub fn fdk_layer(&mut self, h: Var, op: &Arc<Fdk>, scale: f64) -> Result<Var> {
        let shape = self.shape(h).to_vec();
        let [n, c, v, r, w] = dims5(&shape)?;
        let geom = op.geometry();
        if c != 1 || [v, r, w] != [geom.n_views(), geom.det_rows, geom.det_cols] {
            return Err(Error::Shape(format!(
                "FDK layer expects [N,1,{},{},{}], got {shape:?}",
                geom.n_views(),
                geom.det_rows,
                geom.det_cols
            )));
        }
        let s = T::of(scale);
        let per = geom.n_pixels();
        let mut out = Vec::with_capacity(n * op.grid().len());
        for chunk in self.value(h).data().chunks(per) {
            out.extend(op.reconstruct(chunk)?.into_iter().map(|x| x * s));
        }
        let grid = op.grid();
        let value = Tensor::new(vec![n, 1, grid.nz, grid.ny, grid.nx], out)?;
        let op2 = Arc::clone(op);
        let vox = grid.len();
        Ok(self.push_in(
            "fdk",
            Domain::Volume,
            vec![h],
            value,
            Box::new(move |a| {
                let mut gh = Vec::with_capacity(a.inputs[0].numel());
                for chunk in a.grad.chunks(vox) {
                    gh.extend(op2.transpose(chunk).expect("sizes validated").into_iter().map(|x| x * s));
                }
                vec![Some(gh)]
            }),
        ))
    }
}
