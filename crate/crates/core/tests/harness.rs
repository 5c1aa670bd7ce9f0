//! Dataset simulation, training protocol, checkpoints and evaluation.

mod common;

use std::path::Path;

use cbct_core::data::{hu_to_mu, load_volume, Volume};
use cbct_core::geometry::{equiangular_angles, ConeBeamGeometry};
use cbct_core::harness::{self, Dataset, Method, Trainer, TrainingData, TrainConfig};
use cbct_core::models::{Checkpoint, ModelConfig, ModelKind};
use cbct_core::projector::ProjectionStack;
use cbct_core::tensor::BatchNormMode;
use cbct_core::Error;
use tempfile::TempDir;

fn tiny(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        grid_size: 8,
        voxel_mm: 4.0,
        det_rows: 6,
        det_cols: 7,
        det_pixel_mm: 8.0,
        full_views: 16,
        sparse_factor: 4,
        epochs: 1,
        effective_batch: 4,
        micro_batch: 1,
        seed: 5,
        model: ModelConfig {
            kind,
            n_iterations: 2,
            primal_channels: 2,
            dual_channels: 2,
            hidden_channels: 4,
            unet_depth: 1,
            unet_base_channels: 2,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn dataset(cfg: &TrainConfig, n: usize) -> (TempDir, Dataset) {
    let dir = TempDir::new().unwrap();
    let ds = harness::simulate_dataset(cfg, n, 17, dir.path()).unwrap();
    (dir, ds)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn simulation_is_reproducible_and_split_is_disjoint() {
    let cfg = tiny(ModelKind::PdNet);
    let (a, ds) = dataset(&cfg, 12);
    let (b, _) = dataset(&cfg, 12);
    assert_eq!(files(a.path()), files(b.path()));
    assert_eq!(files(a.path()).len(), 2 * 12 + 1);
    let m = &ds.manifest;
    assert_eq!((m.train.len(), m.validation.len(), m.test.len()), (8, 2, 2));
    let mut all: Vec<usize> = m.train.iter().chain(&m.validation).chain(&m.test).copied().collect();
    all.sort();
    all.dedup();
    assert_eq!(all, (0..12).collect::<Vec<_>>());
    assert_eq!(ds.projections(0).unwrap().geometry.n_views(), 4);
    ds.check_config(&cfg).unwrap();
    let other = TrainConfig { sparse_factor: 2, ..cfg };
    assert!(matches!(ds.check_config(&other), Err(Error::Fingerprint { .. })));
}

#[test]
fn one_epoch_of_eight_volumes_in_batches_of_four_is_two_steps() {
    let cfg = tiny(ModelKind::PdNet);
    let (_d, ds) = dataset(&cfg, 12);
    let data = TrainingData::load(&ds).unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    let log = t.run_epoch(&data).unwrap();
    assert_eq!(t.step(), 2);
    assert_eq!(t.epoch(), 1);
    assert!(log.train_loss.is_finite() && log.val_loss.unwrap().is_finite());
}

fn grads(t: &Trainer) -> Vec<f32> {
    t.model().params().tensors().iter().flat_map(|p| p.grad().unwrap().to_vec()).collect()
}

#[test]
fn gradient_accumulation_matches_a_single_micro_batch() {
    for kind in [ModelKind::PdNet, ModelKind::PdUNet] {
        let base = tiny(kind);
        let (_d, ds) = dataset(&base, 12);
        let data = TrainingData::load(&ds).unwrap();
        let run = |micro: usize| {
            let mut t = Trainer::new(TrainConfig { micro_batch: micro, ..base.clone() }).unwrap();
            t.set_norm_mode(BatchNormMode::Eval);
            let loss = t.train_step(&data, &[0, 3, 5, 6], 0).unwrap();
            (loss, grads(&t), t.model().named_tensors())
        };
        let (la, ga, pa) = run(1);
        let (lb, gb, pb) = run(4);
        assert!((la - lb).abs() <= 1e-6 * la.abs(), "{kind}: loss {la} vs {lb}");
        let diff: f64 = ga.iter().zip(&gb).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = ga.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!(diff <= 1e-6 * norm, "{kind}: gradient relative difference {}", diff / norm);
        let flat = |p: &[(String, cbct_core::Tensor32)]| -> Vec<f64> { p.iter().flat_map(|(_, t)| t.data().iter().map(|&v| v as f64)).collect() };
        let p0 = flat(&Trainer::new(base.clone()).unwrap().model().named_tensors());
        let (da, db): (Vec<f64>, Vec<f64>) = flat(&pa).iter().zip(flat(&pb)).zip(&p0).map(|((a, b), z)| (a - z, b - z)).unzip();
        let diff = da.iter().zip(&db).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = da.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff <= 1e-6 * norm, "{kind}: Adam step relative difference {}", diff / norm);
    }
}

#[test]
fn resumed_training_continues_identically() {
    let cfg = TrainConfig { epochs: 2, ..tiny(ModelKind::PdUNet) };
    let (dir, ds) = dataset(&cfg, 12);
    let data = TrainingData::load(&ds).unwrap();
    let mut a = Trainer::new(cfg.clone()).unwrap();
    a.run_epoch(&data).unwrap();
    let path = dir.path().join("mid.ckpt");
    a.checkpoint().save(&path).unwrap();
    let mut b = Trainer::resume(cfg, &Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!((b.epoch(), b.step()), (a.epoch(), a.step()));
    let order = a.epoch_order(data.train.len(), 1);
    let la = a.train_step(&data, &order[..4], 1).unwrap();
    let lb = b.train_step(&data, &order[..4], 1).unwrap();
    assert!((la - lb).abs() <= 1e-6 * la.abs(), "{la} vs {lb}");
    assert_eq!(a.checkpoint(), b.checkpoint());
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let cfg = TrainConfig { epochs: 2, ..tiny(ModelKind::PdUNet) };
    assert!(cfg.augment.enabled);
    let (d, _) = dataset(&cfg, 6);
    let out_a = TempDir::new().unwrap();
    let out_b = TempDir::new().unwrap();
    let sa = harness::train(&cfg, d.path(), out_a.path(), None, |_| {}).unwrap();
    let sb = harness::train(&cfg, d.path(), out_b.path(), None, |_| {}).unwrap();
    assert_eq!(sa.epochs.len(), 2);
    for name in ["last.ckpt", "best.ckpt"] {
        let a = std::fs::read(out_a.path().join(name)).unwrap();
        assert_eq!(a, std::fs::read(out_b.path().join(name)).unwrap(), "{name}");
    }
    let losses = |s: &harness::RunSummary| s.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
    assert_eq!(losses(&sa), losses(&sb));
    let manifest = std::fs::read_to_string(sa.manifest).unwrap();
    assert!(manifest.contains("run.n_train = 4"));
    assert!(manifest.contains("run.epoch.1.val_loss"));

    // resuming the finished run with more epochs picks up where it ended
    let more = TrainConfig { epochs: 3, ..cfg };
    let sc = harness::train(&more, d.path(), out_a.path(), Some(&out_a.path().join("last.ckpt")), |_| {}).unwrap();
    assert_eq!(sc.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![2]);
}

#[test]
fn non_finite_loss_aborts_with_step_and_rate() {
    // a huge step size blows the parameters up after the first update
    let cfg = TrainConfig { lr: 1e30, effective_batch: 1, augment: cbct_core::data::AugmentConfig::disabled(), ..tiny(ModelKind::PdNet) };
    let (d, _) = dataset(&cfg, 6);
    let out = TempDir::new().unwrap();
    let err = harness::train(&cfg, d.path(), out.path(), None, |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 2, lr } if lr == 1e30), "{err}");
}

#[test]
fn evaluation_report_and_its_errors() {
    // SSIM needs slices of at least 11x11
    let cfg = TrainConfig { grid_size: 12, ..tiny(ModelKind::PdNet) };
    let (d, _) = dataset(&cfg, 12);
    let out = TempDir::new().unwrap();
    let run = harness::train(&cfg, d.path(), out.path(), None, |_| {}).unwrap();
    let methods = harness::parse_methods("identity,fdk,pdnet").unwrap();
    let report = harness::evaluate(&cfg, std::slice::from_ref(&run.best_checkpoint), d.path(), &methods).unwrap();
    let id = &report.methods[0];
    assert_eq!(id.name, "identity");
    assert_eq!((id.rmse.mean, id.ssim.mean), (0.0, 1.0));
    assert_eq!(id.n_slices, 2 * 12);
    assert_eq!(report.p_value("fdk", "pdnet"), report.p_value("pdnet", "fdk"));
    let path = out.path().join("report.txt");
    harness::write_report(&report, &path).unwrap();
    let table = std::fs::read_to_string(&path).unwrap();
    assert!(table.contains("SSIM [%]") && table.contains("PSNR [dB]") && table.contains("RMSE [HU]"));
    let side = std::fs::read_to_string(harness::eval::sidecar_path(&path)).unwrap();
    assert!(side.lines().any(|l| l == "identity.rmse_hu.mean = 0"), "{side}");

    // learned method without its checkpoint
    assert!(harness::evaluate(&cfg, &[], d.path(), &methods).is_err());
    // checkpoint from another geometry
    let other = TrainConfig { sparse_factor: 2, ..cfg.clone() };
    let (d2, _) = dataset(&other, 12);
    assert!(matches!(
        harness::evaluate(&other, std::slice::from_ref(&run.best_checkpoint), d2.path(), &methods),
        Err(Error::Fingerprint { .. })
    ));
    // empty test split
    let (d3, _) = dataset(&cfg, 1);
    assert!(harness::evaluate(&cfg, &[], d3.path(), &[Method::Fdk]).is_err());
}

#[test]
fn fdk_reconstruction_of_a_full_scan() {
    let cfg = TrainConfig { grid_size: 32, voxel_mm: 4.0, ..TrainConfig::default() };
    let geom = ConeBeamGeometry::new(160.0, 400.0, 60, 78, 4.928, equiangular_angles(90).unwrap()).unwrap();
    let (r, mu) = (40.0, 0.02);
    let s = common::sphere_projections(&geom, r, mu);
    let stack = ProjectionStack::new(geom, s.data().iter().map(|&v| v as f32).collect()).unwrap();
    let hu = harness::reconstruct(Method::Fdk, None, &stack, &cfg).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("fdk.cbv");
    harness::eval::save_reconstruction(&path, &hu).unwrap();
    let back: Volume<f32> = load_volume(&path).unwrap();
    assert_eq!(back, hu);
    let m = hu_to_mu(&back).unwrap();
    let g = back.grid;
    let mut vals = Vec::new();
    for k in 0..g.nz {
        for j in 0..g.ny {
            for i in 0..g.nx {
                let c = g.voxel_center(i, j, k);
                if (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt() <= 0.75 * r {
                    vals.push(m.at(i, j, k) as f64);
                }
            }
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((mean - mu).abs() <= 0.1 * mu, "central mean {mean}");
    assert!(harness::reconstruct(Method::Learned(ModelKind::PdUNet), None, &stack, &cfg).is_err());
}
