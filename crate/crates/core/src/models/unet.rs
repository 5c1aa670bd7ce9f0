use rand_chacha::ChaCha8Rng;

use super::params::{BatchNorm, Conv, ParamStore, Prelu};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{BatchNormMode, Graph, Var};

/// conv 3^3 -> batch norm -> PReLU
#[derive(Clone, Debug)]
struct ConvBnAct {
    conv: Conv,
    bn: BatchNorm,
    act: Prelu,
}

impl ConvBnAct {
    fn new<T: Real>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, ci: usize, co: usize, slots: usize) -> Self {
        Self {
            conv: Conv::new(s, rng, &format!("{name}.conv"), ci, co, 3),
            bn: BatchNorm::new(s, &format!("{name}.bn"), co, slots),
            act: Prelu::new(s, &format!("{name}.prelu"), co),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], s: &mut ParamStore<T>, x: Var, mode: BatchNormMode, slot: usize) -> Result<Var> {
        let y = self.conv.apply(g, p, x)?;
        let y = self.bn.apply(g, p, s, y, mode, slot)?;
        self.act.apply(g, p, y)
    }
}

#[derive(Clone, Debug)]
struct Stage([ConvBnAct; 2]);

impl Stage {
    fn new<T: Real>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, ci: usize, co: usize, slots: usize) -> Self {
        Self([
            ConvBnAct::new(s, rng, &format!("{name}.0"), ci, co, slots),
            ConvBnAct::new(s, rng, &format!("{name}.1"), co, co, slots),
        ])
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &[Var], s: &mut ParamStore<T>, x: Var, mode: BatchNormMode, slot: usize) -> Result<Var> {
        let y = self.0[0].apply(g, p, s, x, mode, slot)?;
        self.0[1].apply(g, p, s, y, mode, slot)
    }
}

/// 3-D UNet: per level two conv-BN-PReLU stages then 2x average pooling,
/// a bottleneck, a mirrored decoder with trilinear upsampling and skip
/// concatenation, and a final 1^3 convolution. A UNet reused across
/// unrolled iterations keeps separate batch-norm statistics per iteration
/// (`slots`), since each iteration sees a different input distribution.
#[derive(Clone, Debug)]
pub struct UNet3d {
    depth: usize,
    encoder: Vec<Stage>,
    bottom: Stage,
    decoder: Vec<Stage>,
    head: Conv,
}

impl UNet3d {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<T: Real>(
        s: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        base: usize,
        depth: usize,
        slots: usize,
    ) -> Self {
        let width = |l: usize| base << l;
        let mut encoder = Vec::with_capacity(depth);
        let mut ci = in_channels;
        for l in 0..depth {
            encoder.push(Stage::new(s, rng, &format!("{name}.enc{l}"), ci, width(l), slots));
            ci = width(l);
        }
        let bottom = Stage::new(s, rng, &format!("{name}.bottom"), ci, width(depth), slots);
        let mut decoder = Vec::with_capacity(depth);
        for l in (0..depth).rev() {
            decoder.push(Stage::new(s, rng, &format!("{name}.dec{l}"), width(l + 1) + width(l), width(l), slots));
        }
        let head = Conv::new(s, rng, &format!("{name}.head"), width(0), out_channels, 1);
        Self { depth, encoder, bottom, decoder, head }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Rejects spatial extents not divisible by `2^depth`.
    pub fn check_extent(&self, dims: [usize; 3]) -> Result<()> {
        check_unet_extent(dims, self.depth)
    }

    pub(crate) fn head(&self) -> &Conv {
        &self.head
    }

    pub(crate) fn apply<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        s: &mut ParamStore<T>,
        x: Var,
        mode: BatchNormMode,
        slot: usize,
    ) -> Result<Var> {
        let [_, _, d, h, w] = crate::tensor::dims5(g.shape(x))?;
        self.check_extent([d, h, w])?;
        let mut skips = Vec::with_capacity(self.depth);
        let mut y = x;
        for stage in &self.encoder {
            y = stage.apply(g, p, s, y, mode, slot)?;
            skips.push(y);
            y = g.avgpool3d(y)?;
        }
        y = self.bottom.apply(g, p, s, y, mode, slot)?;
        for stage in &self.decoder {
            let up = g.upsample3d(y)?;
            let skip = skips.pop().expect("one skip per level");
            let cat = g.concat_channels(&[up, skip])?;
            y = stage.apply(g, p, s, cat, mode, slot)?;
        }
        self.head.apply(g, p, y)
    }
}

pub fn check_unet_extent(dims: [usize; 3], depth: usize) -> Result<()> {
    let f = 1usize << depth;
    if dims.iter().any(|&n| n == 0 || n % f != 0) {
        return Err(Error::Invalid(format!("UNet of depth {depth} needs extents divisible by {f}, got {dims:?}")));
    }
    Ok(())
}
