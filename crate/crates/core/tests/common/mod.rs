//! Analytic oracles shared by the integration tests and the acceptance
//! binary.
#![allow(dead_code)]

pub mod grad;

use cbct_core::geometry::{ConeBeamGeometry, Vec3, VolumeGrid};
use cbct_core::projector::ProjectionStack;

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Length of the segment `p -> q` (extended to a full line) inside the
/// axis-aligned box `[-half, half]` (slab method).
pub fn ray_box_length(p: Vec3, q: Vec3, half: Vec3) -> f64 {
    let d = sub(q, p);
    let len = norm(d);
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if p[a].abs() > half[a] {
                return 0.0;
            }
            continue;
        }
        let (ta, tb) = ((-half[a] - p[a]) / d[a], (half[a] - p[a]) / d[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    ((t1 - t0).max(0.0)) * len
}

/// Chord of the line through `p` and `q` in the sphere of radius `r` at
/// the origin.
pub fn sphere_chord(p: Vec3, q: Vec3, r: f64) -> f64 {
    let d = sub(q, p);
    let u = [d[0] / norm(d), d[1] / norm(d), d[2] / norm(d)];
    let b = dot(p, u);
    let c = dot(p, p) - r * r;
    let disc = b * b - c;
    if disc <= 0.0 {
        0.0
    } else {
        2.0 * disc.sqrt()
    }
}

/// Line integrals of a uniform sphere (radius `r`, attenuation `mu`).
pub fn sphere_projections(geom: &ConeBeamGeometry, r: f64, mu: f64) -> ProjectionStack<f64> {
    let mut data = Vec::with_capacity(geom.n_pixels());
    for v in 0..geom.n_views() {
        let pose = geom.view_pose(v).unwrap();
        for row in 0..geom.det_rows {
            for col in 0..geom.det_cols {
                data.push(mu * sphere_chord(pose.source, pose.pixel_center(geom, row, col), r));
            }
        }
    }
    ProjectionStack::new(geom.clone(), data).unwrap()
}

/// Uniform sphere with partial-volume voxels from `s^3` sub-samples.
pub fn sphere_volume(grid: &VolumeGrid, r: f64, mu: f64, s: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.len());
    let h = grid.voxel_mm;
    for k in 0..grid.nz {
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let c = grid.voxel_center(i, j, k);
                let mut inside = 0;
                for a in 0..s {
                    for b in 0..s {
                        for e in 0..s {
                            let off = |n: usize| ((n as f64 + 0.5) / s as f64 - 0.5) * h;
                            let p = [c[0] + off(a), c[1] + off(b), c[2] + off(e)];
                            inside += (dot(p, p) <= r * r) as usize;
                        }
                    }
                }
                out.push(mu * inside as f64 / (s * s * s) as f64);
            }
        }
    }
    out
}

pub fn rms(v: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x * x;
        n += 1;
    }
    (s / n.max(1) as f64).sqrt()
}
