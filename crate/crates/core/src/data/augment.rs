use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Volume, HU_MIN};
use crate::error::Result;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: true, flip_prob: 0.5, max_rotation_deg: 15.0, scale_min: 0.9, scale_max: 1.1 }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }
}

/// One sampled augmentation: axis flips `[x, y, z]`, rotation about `z`
/// in degrees and an isotropic scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub flips: [bool; 3],
    pub angle_deg: f64,
    pub scale: f64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self { flips: [false; 3], angle_deg: 0.0, scale: 1.0 }
    }

    pub fn sample(seed: u64, cfg: &AugmentConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flips = [rng.gen_bool(cfg.flip_prob), rng.gen_bool(cfg.flip_prob), rng.gen_bool(cfg.flip_prob)];
        let angle_deg = if cfg.max_rotation_deg > 0.0 {
            rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
        } else {
            0.0
        };
        let scale = if cfg.scale_max > cfg.scale_min { rng.gen_range(cfg.scale_min..=cfg.scale_max) } else { cfg.scale_min };
        Self { flips, angle_deg, scale }
    }

    /// Applies the draw. Pure flips are exact permutations; otherwise the
    /// composed transform is resampled once with trilinear interpolation and
    /// points outside the grid read as air.
    pub fn apply<T: Real>(&self, v: &Volume<T>) -> Result<Volume<T>> {
        if self.angle_deg == 0.0 && self.scale == 1.0 {
            return Ok(apply_flips(v, self.flips));
        }
        let g = v.grid;
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let inv_scale = 1.0 / self.scale;
        let air = T::of(HU_MIN);
        let sample = |q: [f64; 3]| -> T {
            let fl = [q[0].floor(), q[1].floor(), q[2].floor()];
            let fr = [q[0] - fl[0], q[1] - fl[1], q[2] - fl[2]];
            let dims = [g.nx as isize, g.ny as isize, g.nz as isize];
            let mut acc = 0.0;
            for cz in 0..2 {
                let z = fl[2] as isize + cz;
                let wz = if cz == 0 { 1.0 - fr[2] } else { fr[2] };
                for cy in 0..2 {
                    let y = fl[1] as isize + cy;
                    let wy = if cy == 0 { 1.0 - fr[1] } else { fr[1] };
                    for cx in 0..2 {
                        let x = fl[0] as isize + cx;
                        let wx = if cx == 0 { 1.0 - fr[0] } else { fr[0] };
                        let w = wx * wy * wz;
                        if w == 0.0 {
                            continue;
                        }
                        let inside = x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] && z < dims[2];
                        let val = if inside { v.at(x as usize, y as usize, z as usize) } else { air };
                        acc += w * val.f64();
                    }
                }
            }
            T::of(acc)
        };
        let mut out = Vec::with_capacity(g.len());
        for k in 0..g.nz {
            for j in 0..g.ny {
                for i in 0..g.nx {
                    let p = g.voxel_center(i, j, k);
                    // inverse of p -> scale * R(angle) * F * p
                    let p = [p[0] * inv_scale, p[1] * inv_scale, p[2] * inv_scale];
                    let mut q = [c * p[0] + s * p[1], -s * p[0] + c * p[1], p[2]];
                    for (a, &f) in self.flips.iter().enumerate() {
                        if f {
                            q[a] = -q[a];
                        }
                    }
                    out.push(sample(g.to_index_space(q)));
                }
            }
        }
        Volume::new(g, v.unit, out)
    }
}

/// Mirrors the volume along each flagged axis (`[x, y, z]`).
pub fn apply_flips<T: Real>(v: &Volume<T>, flips: [bool; 3]) -> Volume<T> {
    let g = v.grid;
    let mut out = Vec::with_capacity(g.len());
    for k in 0..g.nz {
        let sk = if flips[2] { g.nz - 1 - k } else { k };
        for j in 0..g.ny {
            let sj = if flips[1] { g.ny - 1 - j } else { j };
            for i in 0..g.nx {
                let si = if flips[0] { g.nx - 1 - i } else { i };
                out.push(v.at(si, sj, sk));
            }
        }
    }
    Volume::new(g, v.unit, out).expect("same grid")
}

/// Random flips, rotation about `z` and isotropic scaling drawn from `seed`.
pub fn augment<T: Real>(v: &Volume<T>, seed: u64, cfg: &AugmentConfig) -> Result<Volume<T>> {
    if !cfg.enabled {
        return Ok(v.clone());
    }
    AugmentDraw::sample(seed, cfg).apply(v)
}
