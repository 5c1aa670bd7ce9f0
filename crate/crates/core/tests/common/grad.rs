//! Gradient-check fixtures: one probe per layer type and a micro PD-UNet.

use std::sync::Arc;

use cbct_core::fdk::Fdk;
use cbct_core::geometry::{equiangular_angles, ConeBeamGeometry, VolumeGrid};
use cbct_core::models::{Model, ModelConfig, ModelKind};
use cbct_core::projector::Projector;
use cbct_core::tensor::gradcheck::{compare_gradients, sample_indices};
use cbct_core::tensor::{check_gradients, BatchNormMode, Domain, GradCheck, Graph, RunningStats, Tensor, Var};
use cbct_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `sum(w * x)` with fixed random weights, a smooth scalar probe.
pub fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = random(g.shape(x), seed);
    let w = g.input(w, Domain::Other);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn check(inputs: &[Tensor<f64>], f: impl FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>) -> GradCheck {
    check_gradients(inputs, EPS, 24, f).unwrap()
}

pub fn conv3d() -> GradCheck {
    check(&[random(&[2, 3, 4, 5, 6], 1), random(&[2, 3, 3, 3, 3], 2), random(&[2], 3)], |g, v| {
        let y = g.conv3d(v[0], v[1], v[2])?;
        probe(g, y, 4)
    })
}

pub fn conv3d_pointwise() -> GradCheck {
    check(&[random(&[1, 4, 3, 3, 3], 5), random(&[2, 4, 1, 1, 1], 6), random(&[2], 7)], |g, v| {
        let y = g.conv3d(v[0], v[1], v[2])?;
        probe(g, y, 8)
    })
}

pub fn prelu() -> GradCheck {
    // inputs kept away from the kink at zero
    let x = random(&[2, 3, 2, 3, 4], 9).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let a = Tensor::new(vec![3], vec![0.25, -0.1, 0.6]).unwrap();
    check(&[x, a], |g, v| {
        let y = g.prelu(v[0], v[1])?;
        probe(g, y, 10)
    })
}

pub fn batchnorm(mode: BatchNormMode) -> GradCheck {
    let x = random(&[2, 3, 2, 3, 4], 11);
    let gamma = Tensor::new(vec![3], vec![1.2, 0.7, -0.4]).unwrap();
    let beta = Tensor::new(vec![3], vec![0.1, -0.3, 0.2]).unwrap();
    let mut stats = RunningStats::new(3);
    stats.mean = vec![0.1, -0.2, 0.05];
    stats.var = vec![0.8, 1.3, 0.5];
    check(&[x, gamma, beta], |g, v| {
        let mut s = stats.clone();
        let y = g.batchnorm3d(v[0], v[1], v[2], &mut s, mode)?;
        probe(g, y, 12)
    })
}

pub fn avgpool() -> GradCheck {
    check(&[random(&[1, 2, 4, 4, 6], 13)], |g, v| {
        let y = g.avgpool3d(v[0])?;
        probe(g, y, 14)
    })
}

pub fn upsample() -> GradCheck {
    check(&[random(&[1, 2, 2, 3, 3], 15)], |g, v| {
        let y = g.upsample3d(v[0])?;
        probe(g, y, 16)
    })
}

pub fn channel_ops() -> GradCheck {
    check(&[random(&[2, 2, 2, 3, 3], 17), random(&[2, 3, 2, 3, 3], 18)], |g, v| {
        let c = g.concat_channels(&[v[0], v[1]])?;
        let s = g.slice_channels(c, 1, 2)?;
        let t = g.add(s, v[0])?;
        let u = g.sub(t, v[0])?;
        let u = g.mul(u, s)?;
        let k = g.scale(u, 0.7);
        let m = g.mean(k);
        let p = probe(g, c, 19)?;
        g.add(m, p)
    })
}

pub fn l1_loss() -> GradCheck {
    let p = random(&[1, 1, 3, 3, 3], 20);
    let t = p.map(|v| v + if v > 0.0 { 0.3 } else { -0.4 });
    check(&[p], |g, v| {
        let t = g.input(t.clone(), Domain::Volume);
        g.l1_loss(v[0], t)
    })
}

fn small_geometry() -> (ConeBeamGeometry, VolumeGrid) {
    (ConeBeamGeometry::new(160.0, 400.0, 5, 7, 10.0, equiangular_angles(3).unwrap()).unwrap(), VolumeGrid::new(6, 5, 4, 4.0).unwrap())
}

pub fn projection_layer() -> GradCheck {
    let (geom, grid) = small_geometry();
    let a = Arc::new(Projector::new(geom, grid).unwrap());
    check(&[random(&[2, 1, 4, 5, 6], 21)], |g, v| {
        let y = g.cone_project(v[0], &a, 0.5)?;
        probe(g, y, 22)
    })
}

pub fn fdk_layer() -> GradCheck {
    let (geom, grid) = small_geometry();
    let op = Arc::new(Fdk::new(geom, grid).unwrap());
    check(&[random(&[2, 1, 3, 5, 7], 23)], |g, v| {
        let y = g.fdk_layer(v[0], &op, 2.0)?;
        probe(g, y, 24)
    })
}

/// Every layer fixture, by name.
pub fn all_layers() -> Vec<(&'static str, GradCheck)> {
    vec![
        ("conv3d", conv3d()),
        ("conv3d 1x1x1", conv3d_pointwise()),
        ("prelu", prelu()),
        ("batchnorm train", batchnorm(BatchNormMode::Train)),
        ("batchnorm eval", batchnorm(BatchNormMode::Eval)),
        ("avgpool3d", avgpool()),
        ("upsample3d", upsample()),
        ("concat/slice/arithmetic", channel_ops()),
        ("l1 loss", l1_loss()),
        ("projection layer", projection_layer()),
        ("fdk layer", fdk_layer()),
    ]
}

/// Micro PD-UNet (8^3 grid, 6 x 6 detector, 4 views, one iteration, two
/// channels): three entries of every parameter tensor through the whole
/// graph, batch statistics in train mode.
pub fn micro_pdunet() -> GradCheck {
    let geom = ConeBeamGeometry::new(160.0, 400.0, 6, 6, 8.0, equiangular_angles(4).unwrap()).unwrap();
    let grid = VolumeGrid::cube(8, 4.0).unwrap();
    let cfg = ModelConfig {
        kind: ModelKind::PdUNet,
        n_iterations: 1,
        primal_channels: 2,
        dual_channels: 2,
        hidden_channels: 4,
        unet_depth: 1,
        unet_base_channels: 2,
        ..ModelConfig::default()
    };
    let mut m = Model::<f64>::new(cfg, geom, grid, 3).unwrap();
    let proj = random(&[1, 1, 4, 6, 6], 25).map(|v| 20.0 * (v + 1.0));
    let loss = |m: &mut Model<f64>, grads: bool| -> f64 {
        let mut g = Graph::new();
        let out = m.forward(&mut g, proj.clone(), BatchNormMode::Train, true).unwrap();
        let l = probe(&mut g, out.output, 26).unwrap();
        let v = g.value(l).data()[0];
        if grads {
            g.backward(l).unwrap();
            m.params_mut().zero_grad();
            m.params_mut().accumulate_grads(&g).unwrap();
        }
        v
    };
    loss(&mut m, true);
    let analytic: Vec<Vec<f64>> = m.params().tensors().iter().map(|t| t.grad().map(<[f64]>::to_vec).unwrap()).collect();
    let mut pairs = Vec::new();
    for (id, grads) in analytic.iter().enumerate() {
        for i in sample_indices(grads.len(), 3) {
            let orig = m.params().tensor(id).data()[i];
            let set = |m: &mut Model<f64>, x: f64| m.params_mut().tensors_mut().nth(id).unwrap().data_mut()[i] = x;
            set(&mut m, orig + EPS);
            let up = loss(&mut m, false);
            set(&mut m, orig - EPS);
            let down = loss(&mut m, false);
            set(&mut m, orig);
            pairs.push((grads[i], (up - down) / (2.0 * EPS)));
        }
    }
    compare_gradients(&pairs)
}
