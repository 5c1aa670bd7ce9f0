//! Projector and FDK against analytic oracles, plus randomized adjoint and
//! linearity properties.

mod common;

use cbct_core::fdk::{fdk_adjoint_test, fdk_reconstruct};
use cbct_core::geometry::{equiangular_angles, ConeBeamGeometry, VolumeGrid};
use cbct_core::projector::{adjoint_test, Projector};
use common::{ray_box_length, rms, sphere_projections, sphere_volume};
use proptest::prelude::*;

#[test]
fn uniform_cube_matches_ray_box_lengths() {
    let grid = VolumeGrid::cube(24, 2.0).unwrap();
    let geom = ConeBeamGeometry::new(160.0, 400.0, 15, 17, 8.0, vec![0.0, 30.0, 45.0, 90.0, 110.0]).unwrap();
    let mu = 0.02;
    let p = Projector::new(geom.clone(), grid).unwrap().project(&vec![mu; grid.len()]).unwrap();
    let half = [24.0; 3];
    for v in 0..geom.n_views() {
        let pose = geom.view_pose(v).unwrap();
        let centre = mu * ray_box_length(pose.source, pose.pixel_center(&geom, 7, 8), half);
        let got = p.at(v, 7, 8);
        // oblique rays graze the vertical cube edges, where trilinear
        // sampling smears the boundary
        let tol = if geom.angles_deg[v] % 90.0 == 0.0 { 0.01 } else { 0.02 };
        assert!((got - centre).abs() <= tol * centre, "view {v}: {got} vs {centre}");
        for (row, col) in [(3, 5), (10, 12), (7, 2)] {
            let want = mu * ray_box_length(pose.source, pose.pixel_center(&geom, row, col), half);
            let got = p.at(v, row, col);
            assert!((got - want).abs() <= 0.03 * want.max(0.1), "view {v} ({row},{col}): {got} vs {want}");
        }
    }
}

#[test]
fn uniform_sphere_matches_chords() {
    let grid = VolumeGrid::cube(40, 2.0).unwrap();
    let geom = ConeBeamGeometry::new(160.0, 400.0, 24, 24, 5.0, equiangular_angles(5).unwrap()).unwrap();
    let (r, mu) = (30.0, 0.02);
    let vol = sphere_volume(&grid, r, mu, 4);
    let got = Projector::new(geom.clone(), grid).unwrap().project(&vol).unwrap();
    let want = sphere_projections(&geom, r, mu);
    let shadow: Vec<usize> = (0..want.data().len()).filter(|&i| want.data()[i] > 0.0).collect();
    assert!(shadow.len() > 1000);
    let err = rms(shadow.iter().map(|&i| got.data()[i] - want.data()[i]));
    let scale = rms(shadow.iter().map(|&i| want.data()[i]));
    assert!(err <= 0.02 * scale, "relative RMS {}", err / scale);
}

/// Mean attenuation and RMS error inside `r <= frac * R`.
fn central_stats(vol: &[f64], grid: &VolumeGrid, radius: f64, frac: f64, mu: f64) -> (f64, f64) {
    let mut vals = Vec::new();
    for k in 0..grid.nz {
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let c = grid.voxel_center(i, j, k);
                if (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() <= frac * radius {
                    vals.push(vol[grid.index(i, j, k)]);
                }
            }
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (mean, rms(vals.iter().map(|v| v - mu)))
}

#[test]
fn fdk_recovers_sphere_and_degrades_with_fewer_views() {
    let grid = VolumeGrid::cube(32, 4.0).unwrap();
    let (r, mu) = (40.0, 0.02);
    let recon = |views: usize| {
        let geom = ConeBeamGeometry::new(160.0, 400.0, 80, 100, 4.0, equiangular_angles(views).unwrap()).unwrap();
        fdk_reconstruct(&sphere_projections(&geom, r, mu), &grid).unwrap()
    };
    let dense = recon(180);
    let (mean, _) = central_stats(&dense, &grid, r, 0.75, mu);
    assert!((mean - mu).abs() <= 0.1 * mu, "central mean {mean}");
    let truth = sphere_volume(&grid, r, mu, 2);
    let err = |v: &[f64]| rms(v.iter().zip(&truth).map(|(a, b)| a - b));
    let sparse = recon(23);
    assert!(err(&sparse) > err(&dense), "23 views {} vs 180 views {}", err(&sparse), err(&dense));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjoint_identity_holds_for_random_geometries(
        n in 3usize..8, rows in 2usize..7, cols in 2usize..7, views in 1usize..5,
        pitch in 3.0f64..12.0, voxel in 1.5f64..5.0, start in 0.0f64..240.0, seed in 0u64..1000,
    ) {
        let angles: Vec<f64> = (0..views).map(|v| start + 37.0 * v as f64).collect();
        let geom = ConeBeamGeometry::new(160.0, 400.0, rows, cols, pitch, angles).unwrap();
        let grid = VolumeGrid::new(n, n + 1, n.max(4) - 1, voxel).unwrap();
        prop_assert!(adjoint_test::<f64>(&geom, &grid, seed).unwrap() <= 1e-10);
        prop_assert!(fdk_adjoint_test::<f64>(&geom, &grid, seed).unwrap() <= 1e-10);
    }

    #[test]
    fn projection_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..100) {
        use rand::{Rng, SeedableRng};
        let grid = VolumeGrid::cube(6, 3.0).unwrap();
        let geom = ConeBeamGeometry::new(160.0, 400.0, 4, 5, 8.0, equiangular_angles(3).unwrap()).unwrap();
        let p = Projector::new(geom, grid).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..grid.len()).map(|_| rng.gen()).collect();
        let y: Vec<f64> = (0..grid.len()).map(|_| rng.gen()).collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let (px, py, pm) = (p.forward(&x).unwrap(), p.forward(&y).unwrap(), p.forward(&mix).unwrap());
        for i in 0..pm.len() {
            prop_assert!((pm[i] - (a * px[i] + b * py[i])).abs() <= 1e-12 * (1.0 + pm[i].abs()));
        }
    }
}
