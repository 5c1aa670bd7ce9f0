//! The learned reconstructors: FDKConvNet (FDK followed by a residual 3-D
//! UNet), the unrolled primal-dual network and the primal-dual UNet.
//!
//! Networks work in the normalized intensity domain. Measured projections
//! are divided by [`projection_scale`] before entering the dual space and
//! the projection / FDK layers carry the matching factors, so dual
//! activations stay O(1) and the FDK layer output is directly a normalized
//! volume.

mod checkpoint;
mod params;
mod unet;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, NamedTensors};
pub use params::ParamStore;
pub use unet::{check_unet_extent, UNet3d};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{denormalize, Unit, Volume, MU_PER_NORM};
use crate::error::{Error, Result};
use crate::fdk::Fdk;
use crate::geometry::{ConeBeamGeometry, VolumeGrid};
use crate::projector::{ProjectionStack, Projector};
use crate::scalar::Real;
use crate::tensor::{BatchNormMode, Domain, Graph, Tensor, Var};
use params::{Conv, Prelu};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    FdkConvNet,
    PdNet,
    PdUNet,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::FdkConvNet => "fdkconvnet",
            ModelKind::PdNet => "pdnet",
            ModelKind::PdUNet => "pdunet",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fdkconvnet" => Ok(ModelKind::FdkConvNet),
            "pdnet" => Ok(ModelKind::PdNet),
            "pdunet" => Ok(ModelKind::PdUNet),
            _ => Err(Error::Invalid(format!("unknown model {s:?} (fdkconvnet, pdnet, pdunet)"))),
        }
    }
}

/// How the primal state starts: zeros, or the FDK reconstruction of the
/// measured projections in every channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimalInit {
    Zero,
    Fdk,
}

impl PrimalInit {
    pub fn name(self) -> &'static str {
        match self {
            PrimalInit::Zero => "zero",
            PrimalInit::Fdk => "fdk",
        }
    }
}

impl FromStr for PrimalInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(PrimalInit::Zero),
            "fdk" => Ok(PrimalInit::Fdk),
            _ => Err(Error::Invalid(format!("unknown primal init {s:?} (zero, fdk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_iterations: usize,
    pub primal_channels: usize,
    pub dual_channels: usize,
    pub hidden_channels: usize,
    pub unet_depth: usize,
    pub unet_base_channels: usize,
    /// One primal UNet for all iterations (pdunet only).
    pub share_primal: bool,
    pub primal_init: PrimalInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::PdUNet,
            n_iterations: 5,
            primal_channels: 5,
            dual_channels: 5,
            hidden_channels: 32,
            unet_depth: 3,
            unet_base_channels: 16,
            share_primal: true,
            primal_init: PrimalInit::Zero,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_iterations", self.n_iterations),
            ("primal_channels", self.primal_channels),
            ("dual_channels", self.dual_channels),
            ("hidden_channels", self.hidden_channels),
            ("unet_depth", self.unet_depth),
            ("unet_base_channels", self.unet_base_channels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Hex SHA-256 of the canonical geometry and grid descriptions.
pub fn geometry_fingerprint(geom: &ConeBeamGeometry, grid: &VolumeGrid) -> String {
    let text = format!("{}\n{}", geom.canonical_text(), grid.canonical_text());
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Largest line integral through the grid filled with normalized intensity
/// 1 (attenuation [`MU_PER_NORM`]): the calibration scale of the dual space.
pub fn projection_scale(projector: &Projector) -> Result<f64> {
    let ones = vec![MU_PER_NORM; projector.grid().len()];
    let p = projector.forward(&ones)?;
    let m = p.iter().copied().fold(0.0f64, f64::max);
    if m <= 0.0 {
        return Err(Error::Invalid("no detector ray crosses the volume grid".into()));
    }
    Ok(m)
}

/// Three 3^3 convolutions with PReLU between them.
#[derive(Clone, Debug)]
struct ConvBlock {
    convs: [Conv; 3],
    acts: [Prelu; 2],
}

impl ConvBlock {
    fn new<T: Real>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, ci: usize, hidden: usize, co: usize) -> Self {
        Self {
            convs: [
                Conv::new(s, rng, &format!("{name}.conv0"), ci, hidden, 3),
                Conv::new(s, rng, &format!("{name}.conv1"), hidden, hidden, 3),
                Conv::new(s, rng, &format!("{name}.conv2"), hidden, co, 3),
            ],
            acts: [Prelu::new(s, &format!("{name}.prelu0"), hidden), Prelu::new(s, &format!("{name}.prelu1"), hidden)],
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = self.convs[0].apply(g, p, x)?;
        let y = self.acts[0].apply(g, p, y)?;
        let y = self.convs[1].apply(g, p, y)?;
        let y = self.acts[1].apply(g, p, y)?;
        self.convs[2].apply(g, p, y)
    }
}

#[derive(Clone, Debug)]
enum PrimalNet {
    Blocks(Vec<ConvBlock>),
    /// One entry when shared across iterations.
    UNets(Vec<UNet3d>),
}

#[derive(Clone, Debug)]
enum Arch {
    FdkConvNet(UNet3d),
    PrimalDual { dual: Vec<ConvBlock>, primal: PrimalNet },
}

/// Handles into the forward graph, for losses and structural checks.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Normalized volume `[N, 1, nz, ny, nx]`.
    pub output: Var,
    /// The measured projections as they enter the graph.
    pub measured: Var,
    /// Input of the dual block at each iteration.
    pub dual_inputs: Vec<Var>,
}

pub struct Model<T> {
    config: ModelConfig,
    geometry: ConeBeamGeometry,
    grid: VolumeGrid,
    projector: Arc<Projector>,
    fdk: Arc<Fdk>,
    proj_scale: f64,
    params: ParamStore<T>,
    arch: Arch,
}

impl<T: Real> Model<T> {
    /// Builds the network for one scan geometry and grid, initializing the
    /// parameters from `seed`.
    pub fn new(config: ModelConfig, geometry: ConeBeamGeometry, grid: VolumeGrid, seed: u64) -> Result<Self> {
        config.validate()?;
        let dims = [grid.nz, grid.ny, grid.nx];
        if matches!(config.kind, ModelKind::FdkConvNet | ModelKind::PdUNet) {
            check_unet_extent(dims, config.unet_depth)?;
        }
        if config.kind != ModelKind::FdkConvNet {
            let det = [geometry.n_views(), geometry.det_rows, geometry.det_cols];
            if det.iter().chain(&dims).any(|&n| n < 3) {
                return Err(Error::Invalid(format!(
                    "grid {dims:?} or projection stack {det:?} is smaller than the 3^3 convolution support"
                )));
            }
        }
        let projector = Arc::new(Projector::new(geometry.clone(), grid)?);
        let fdk = Arc::new(Fdk::new(geometry.clone(), grid)?);
        let proj_scale = projection_scale(&projector)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let c = &config;
        let arch = match c.kind {
            ModelKind::FdkConvNet => {
                Arch::FdkConvNet(UNet3d::new(&mut s, &mut rng, "unet", 1, 1, c.unet_base_channels, c.unet_depth, 1))
            }
            ModelKind::PdNet | ModelKind::PdUNet => {
                let dual = (0..c.n_iterations)
                    .map(|i| ConvBlock::new(&mut s, &mut rng, &format!("dual{i}"), c.dual_channels + 2, c.hidden_channels, c.dual_channels))
                    .collect();
                let (pi, po) = (c.primal_channels + 1, c.primal_channels);
                let primal = if c.kind == ModelKind::PdNet {
                    PrimalNet::Blocks(
                        (0..c.n_iterations)
                            .map(|i| ConvBlock::new(&mut s, &mut rng, &format!("primal{i}"), pi, c.hidden_channels, po))
                            .collect(),
                    )
                } else if c.share_primal {
                    PrimalNet::UNets(vec![UNet3d::new(&mut s, &mut rng, "primal.unet", pi, po, c.unet_base_channels, c.unet_depth, c.n_iterations)])
                } else {
                    PrimalNet::UNets(
                        (0..c.n_iterations)
                            .map(|i| UNet3d::new(&mut s, &mut rng, &format!("primal{i}.unet"), pi, po, c.unet_base_channels, c.unet_depth, 1))
                            .collect(),
                    )
                };
                Arch::PrimalDual { dual, primal }
            }
        };
        Ok(Self { config, geometry, grid, projector, fdk, proj_scale, params: s, arch })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn geometry(&self) -> &ConeBeamGeometry {
        &self.geometry
    }

    pub fn grid(&self) -> &VolumeGrid {
        &self.grid
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn projection_scale(&self) -> f64 {
        self.proj_scale
    }

    pub fn fingerprint(&self) -> String {
        geometry_fingerprint(&self.geometry, &self.grid)
    }

    /// Zeroes the last convolution on the output path.
    pub fn zero_final_layer(&mut self) {
        let conv = match &self.arch {
            Arch::FdkConvNet(u) => u.head().clone(),
            Arch::PrimalDual { primal: PrimalNet::Blocks(b), .. } => b.last().expect("n_iterations >= 1").convs[2].clone(),
            Arch::PrimalDual { primal: PrimalNet::UNets(u), .. } => u.last().expect("at least one UNet").head().clone(),
        };
        for id in [conv.weight, conv.bias] {
            let t = self.params.tensors_mut().nth(id).expect("valid id");
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Stacks measured projections into the `[N, 1, views, rows, cols]`
    /// network input after checking their geometry.
    pub fn batch_projections(&self, stacks: &[&ProjectionStack<T>]) -> Result<Tensor<T>> {
        let want = self.geometry.canonical_text();
        let mut data = Vec::with_capacity(stacks.len() * self.geometry.n_pixels());
        for s in stacks {
            if s.geometry.canonical_text() != want {
                return Err(Error::Invalid("projection geometry does not match the model geometry".into()));
            }
            data.extend_from_slice(s.data());
        }
        let g = &self.geometry;
        Tensor::new(vec![stacks.len(), 1, g.n_views(), g.det_rows, g.det_cols], data)
    }

    /// Builds the forward graph on measured projections `[N, 1, views,
    /// rows, cols]` (line integrals, mm^-1 * mm). Parameters are bound as
    /// trainable leaves when `trainable`.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        projections: Tensor<T>,
        mode: BatchNormMode,
        trainable: bool,
    ) -> Result<ForwardOutput> {
        let [n, c, v, r, w] = crate::tensor::dims5(projections.shape())?;
        let geom = &self.geometry;
        if c != 1 || [v, r, w] != [geom.n_views(), geom.det_rows, geom.det_cols] {
            return Err(Error::Shape(format!(
                "model expects projections [N,1,{},{},{}], got {:?}",
                geom.n_views(),
                geom.det_rows,
                geom.det_cols,
                projections.shape()
            )));
        }
        let inv = T::of(1.0 / self.proj_scale);
        let measured = g.input(projections.map(|x| x * inv), Domain::Projection);
        // normalized projections -> normalized volume, and back
        let to_volume = self.proj_scale / MU_PER_NORM;
        let to_projection = MU_PER_NORM / self.proj_scale;
        let p = self.params.bind(g, trainable);
        let grid = self.grid;
        let vol_shape = |ch: usize| vec![n, ch, grid.nz, grid.ny, grid.nx];

        match &self.arch {
            Arch::FdkConvNet(unet) => {
                let x0 = g.fdk_layer(measured, &self.fdk, to_volume)?;
                let res = unet.apply(g, &p, &mut self.params, x0, mode, 0)?;
                let output = g.add(x0, res)?;
                Ok(ForwardOutput { output, measured, dual_inputs: vec![] })
            }
            Arch::PrimalDual { dual, primal } => {
                let cfg = &self.config;
                let mut f = match cfg.primal_init {
                    PrimalInit::Zero => g.input(Tensor::zeros(&vol_shape(cfg.primal_channels)), Domain::Volume),
                    PrimalInit::Fdk => {
                        let x0 = g.fdk_layer(measured, &self.fdk, to_volume)?;
                        g.concat_channels(&vec![x0; cfg.primal_channels])?
                    }
                };
                let mut h = g.input(Tensor::zeros(&[n, cfg.dual_channels, v, r, w]), Domain::Projection);
                let mut dual_inputs = Vec::with_capacity(cfg.n_iterations);
                for (i, block) in dual.iter().enumerate() {
                    let f1 = g.slice_channels(f, 0, 1)?;
                    let af = g.cone_project(f1, &self.projector, to_projection)?;
                    let din = g.concat_channels(&[h, af, measured])?;
                    dual_inputs.push(din);
                    let dh = block.apply(g, &p, din)?;
                    h = g.add(h, dh)?;

                    let h1 = g.slice_channels(h, 0, 1)?;
                    let fh = g.fdk_layer(h1, &self.fdk, to_volume)?;
                    let pin = g.concat_channels(&[f, fh])?;
                    let df = match primal {
                        PrimalNet::Blocks(b) => b[i].apply(g, &p, pin)?,
                        PrimalNet::UNets(u) => {
                            let (net, slot) = if u.len() == 1 { (&u[0], i) } else { (&u[i], 0) };
                            net.apply(g, &p, &mut self.params, pin, mode, slot)?
                        }
                    };
                    f = g.add(f, df)?;
                }
                let output = g.slice_channels(f, 0, 1)?;
                Ok(ForwardOutput { output, measured, dual_inputs })
            }
        }
    }

    /// Inference in eval mode; returns the HU volume (clamped to the
    /// normalization window).
    pub fn reconstruct(&mut self, stack: &ProjectionStack<T>) -> Result<Volume<T>> {
        let input = self.batch_projections(&[stack])?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, input, BatchNormMode::Eval, false)?;
        let values = g.value(out.output).data().to_vec();
        denormalize(&Volume::new(self.grid, Unit::Normalized, values)?)
    }

    /// Parameters and statistics in checkpoint form.
    pub fn named_tensors(&self) -> NamedTensors {
        self.params.named_tensors()
    }

    pub fn load_named(&mut self, entries: &NamedTensors) -> Result<()> {
        self.params.load_named(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::equiangular_angles;

    fn micro(kind: ModelKind) -> Model<f64> {
        let geom = ConeBeamGeometry::new(160.0, 400.0, 6, 6, 8.0, equiangular_angles(4).unwrap()).unwrap();
        let grid = VolumeGrid::cube(8, 4.0).unwrap();
        let cfg = ModelConfig {
            kind,
            n_iterations: 2,
            primal_channels: 2,
            dual_channels: 2,
            hidden_channels: 4,
            unet_depth: 1,
            unet_base_channels: 2,
            ..ModelConfig::default()
        };
        Model::new(cfg, geom, grid, 1).unwrap()
    }

    #[test]
    fn output_shapes() {
        for kind in [ModelKind::FdkConvNet, ModelKind::PdNet, ModelKind::PdUNet] {
            let mut m = micro(kind);
            let stack = ProjectionStack::zeros(m.geometry().clone());
            let v = m.reconstruct(&stack).unwrap();
            assert_eq!(v.grid, *m.grid());
            assert_eq!(v.unit, Unit::Hu);
        }
    }

    #[test]
    fn fdkconvnet_zero_in_zero_out() {
        let mut m = micro(ModelKind::FdkConvNet);
        m.zero_final_layer();
        let stack = ProjectionStack::zeros(m.geometry().clone());
        let v = m.reconstruct(&stack).unwrap();
        assert!(v.values().iter().all(|&h| h == -1000.0));
    }

    #[test]
    fn dual_parameters_identical_between_pd_models() {
        let a = micro(ModelKind::PdNet);
        let b = micro(ModelKind::PdUNet);
        let dual = |m: &Model<f64>| -> Vec<(String, Vec<usize>)> {
            m.params()
                .names()
                .iter()
                .zip(m.params().tensors())
                .filter(|(n, _)| n.starts_with("dual"))
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect()
        };
        assert!(!dual(&a).is_empty());
        assert_eq!(dual(&a), dual(&b));
        assert_ne!(a.params().count(), b.params().count());
        assert!(a.params().names().iter().chain(b.params().names()).all(|n| n.starts_with("dual") || n.starts_with("primal")));
    }

    #[test]
    fn rejects_bad_builds() {
        let geom = ConeBeamGeometry::new(160.0, 400.0, 6, 6, 8.0, equiangular_angles(4).unwrap()).unwrap();
        let cfg = ModelConfig { unet_depth: 2, ..ModelConfig::default() };
        assert!(Model::<f32>::new(cfg, geom.clone(), VolumeGrid::cube(6, 4.0).unwrap(), 0).is_err());
        let tiny = ConeBeamGeometry::new(160.0, 400.0, 2, 6, 8.0, equiangular_angles(4).unwrap()).unwrap();
        let cfg = ModelConfig { kind: ModelKind::PdNet, ..ModelConfig::default() };
        assert!(Model::<f32>::new(cfg, tiny, VolumeGrid::cube(8, 4.0).unwrap(), 0).is_err());
        let cfg = ModelConfig { hidden_channels: 0, ..ModelConfig::default() };
        assert!(Model::<f32>::new(cfg, geom, VolumeGrid::cube(8, 4.0).unwrap(), 0).is_err());
    }

    #[test]
    fn fingerprint_tracks_geometry() {
        let m = micro(ModelKind::PdNet);
        let same = geometry_fingerprint(&m.geometry().quantized(), m.grid());
        assert_eq!(m.fingerprint(), same);
        assert_eq!(same.len(), 64);
        let other = geometry_fingerprint(&m.geometry().subsampled(2).unwrap(), m.grid());
        assert_ne!(m.fingerprint(), other);
    }
}
