use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Unit, Volume, HU_MIN};
use crate::geometry::{Vec3, VolumeGrid};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: Vec3,
    pub semi_axes: Vec3,
    /// Rotation about `z`, radians.
    pub angle: f64,
    pub hu: f64,
}

impl Ellipsoid {
    pub fn contains(&self, p: Vec3) -> bool {
        let (s, c) = self.angle.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let x = c * d[0] + s * d[1];
        let y = -s * d[0] + c * d[1];
        (x / self.semi_axes[0]).powi(2) + (y / self.semi_axes[1]).powi(2) + (d[2] / self.semi_axes[2]).powi(2) <= 1.0
    }

    /// Largest in-plane distance from the centre (any rotation about z).
    fn reach_xy(&self) -> f64 {
        self.semi_axes[0].max(self.semi_axes[1])
    }
}

/// Body, two lungs, soft-tissue inserts and bones, painted in order over an
/// air background (later entries win).
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPlan {
    pub seed: u64,
    pub background_hu: f64,
    pub body: Ellipsoid,
    pub lungs: [Ellipsoid; 2],
    pub soft: Vec<Ellipsoid>,
    pub bones: Vec<Ellipsoid>,
}

impl PhantomPlan {
    pub fn draw(seed: u64, grid: &VolumeGrid) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = grid.extent_mm();
        let half = [e[0] / 2.0, e[1] / 2.0, e[2] / 2.0];
        let vox = grid.voxel_mm;
        let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);

        let body = Ellipsoid {
            center: [0.0, 0.0, 0.0],
            semi_axes: [u(0.80, 0.90) * half[0], u(0.65, 0.80) * half[1], u(0.85, 0.95) * half[2]],
            angle: u(-0.1, 0.1),
            hu: u(30.0, 50.0),
        };
        let lung = |side: f64, u: &mut dyn FnMut(f64, f64) -> f64| Ellipsoid {
            center: [side * u(0.32, 0.38) * half[0], u(-0.08, 0.02) * half[1], u(-0.05, 0.05) * half[2]],
            semi_axes: [u(0.24, 0.30) * half[0], u(0.35, 0.45) * half[1], u(0.55, 0.70) * half[2]],
            angle: side * u(0.0, 0.15),
            hu: u(-850.0, -750.0),
        };
        let lungs = [lung(-1.0, &mut u), lung(1.0, &mut u)];

        // inserts stay inside the inner 60% of the grid, so they lie inside it
        let insert = |hu_lo: f64, hu_hi: f64, lo: f64, hi: f64, u: &mut dyn FnMut(f64, f64) -> f64| {
            let semi = [
                (u(lo, hi) * half[0]).max(0.9 * vox),
                (u(lo, hi) * half[1]).max(0.9 * vox),
                (u(lo, hi) * half[2]).max(0.9 * vox),
            ];
            Ellipsoid {
                center: [u(-0.6, 0.6) * half[0], u(-0.5, 0.5) * half[1], u(-0.6, 0.6) * half[2]],
                semi_axes: semi,
                angle: u(0.0, std::f64::consts::PI),
                hu: u(hu_lo, hu_hi),
            }
        };
        let n_soft = 3 + (u(0.0, 6.0) as usize).min(5);
        let soft = (0..n_soft).map(|_| insert(-100.0, 100.0, 0.05, 0.2, &mut u)).collect();
        let n_bones = 1 + (u(0.0, 4.0) as usize).min(3);
        let bones = (0..n_bones).map(|_| insert(400.0, 1500.0, 0.06, 0.15, &mut u)).collect();
        Self { seed, background_hu: HU_MIN, body, lungs, soft, bones }
    }

    pub fn ellipsoids(&self) -> impl Iterator<Item = &Ellipsoid> {
        std::iter::once(&self.body).chain(&self.lungs).chain(&self.soft).chain(&self.bones)
    }

    /// True when every ellipsoid lies inside the grid.
    pub fn inside(&self, grid: &VolumeGrid) -> bool {
        let e = grid.extent_mm();
        self.ellipsoids().all(|el| {
            (0..3).all(|a| el.center[a].abs() + if a == 2 { el.semi_axes[2] } else { el.reach_xy() } <= e[a] / 2.0 + 1e-9)
        })
    }

    pub fn rasterize<T: Real>(&self, grid: &VolumeGrid) -> Volume<T> {
        let mut values = vec![T::of(self.background_hu); grid.len()];
        for k in 0..grid.nz {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    let p = grid.voxel_center(i, j, k);
                    if let Some(el) = self.ellipsoids().filter(|el| el.contains(p)).last() {
                        values[grid.index(i, j, k)] = T::of(el.hu);
                    }
                }
            }
        }
        Volume::new(*grid, Unit::Hu, values).expect("sized from grid")
    }
}

/// Deterministic synthetic chest-like phantom in HU.
pub fn generate_phantom<T: Real>(seed: u64, grid: &VolumeGrid) -> Volume<T> {
    PhantomPlan::draw(seed, grid).rasterize(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> VolumeGrid {
        VolumeGrid::cube(32, 4.0).unwrap()
    }

    #[test]
    fn pure_function_of_seed() {
        let a = generate_phantom::<f32>(7, &grid());
        let b = generate_phantom::<f32>(7, &grid());
        assert_eq!(a, b);
        let c = generate_phantom::<f32>(8, &grid());
        assert!(a.values().iter().zip(c.values()).any(|(x, y)| x != y));
    }

    #[test]
    fn plan_respects_counts_and_bounds() {
        for seed in 0..50 {
            let s = PhantomPlan::draw(seed, &grid());
            assert!((3..=8).contains(&s.soft.len()));
            assert!((1..=4).contains(&s.bones.len()));
            assert!(s.soft.iter().all(|e| (-100.0..=100.0).contains(&e.hu)));
            assert!(s.bones.iter().all(|e| (400.0..=1500.0).contains(&e.hu)));
            assert!(s.inside(&grid()), "seed {seed}");
        }
    }

    #[test]
    fn bone_and_lung_values_present() {
        for seed in 0..20 {
            let v = generate_phantom::<f64>(seed, &grid());
            assert!(v.values().iter().any(|&h| (400.0..=1500.0).contains(&h)), "seed {seed}: no bone");
            assert!(v.values().iter().any(|&h| (-850.0..=-750.0).contains(&h)), "seed {seed}: no lung");
            assert!(v.values().iter().any(|&h| h == -1000.0));
        }
    }
}
