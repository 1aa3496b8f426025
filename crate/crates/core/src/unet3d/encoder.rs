//! 18-layer 3D residual encoder with the classification head removed.
//!
//! Parameter names follow the common video-ResNet layout so pretrained
//! checkpoints load by name: `stem.0` is the stem convolution, `stem.1` its
//! batch norm, and each residual stage `layerN` holds two basic blocks with
//! `conv1.0`/`conv1.1`, `conv2.0`/`conv2.1` and an optional `downsample`.

use rand::Rng;

use crate::error::Result;
use crate::nn::{
    add_into, spatial, BatchNorm3d, Conv3d, ConvGeom, Mode, Relu, Slot, Tensor, Visit,
};

use super::config::UNet3dConfig;

/// Stem convolution: temporal kernel 3, spatial kernel 7, in-plane stride 2.
pub const STEM_GEOM: ConvGeom = ConvGeom {
    kernel: [3, 7, 7],
    stride: [1, 2, 2],
    padding: [1, 3, 3],
};

/// Stride of the first block of each residual stage.
pub const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 2];

/// Spatial extents of the stem and the four stage outputs, plus the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidShapes {
    pub input: [usize; 3],
    /// `levels[0]` is the stem output, `levels[1..=4]` the stage outputs.
    pub levels: [[usize; 3]; 5],
}

impl PyramidShapes {
    pub fn stem_out(&self) -> [usize; 3] {
        self.levels[0]
    }

    pub fn stage_out(&self, stage: usize) -> [usize; 3] {
        self.levels[stage]
    }
}

/// Encoder activations at each pyramid level.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// `levels[0]` is the stem output, `levels[1..=4]` the stage outputs.
    pub levels: [Tensor; 5],
}

impl FeaturePyramid {
    pub fn shapes(&self, input: [usize; 3]) -> PyramidShapes {
        PyramidShapes {
            input,
            levels: std::array::from_fn(|i| spatial(&self.levels[i])),
        }
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv3d,
    bn1: BatchNorm3d,
    relu1: Relu,
    conv2: Conv3d,
    bn2: BatchNorm3d,
    downsample: Option<(Conv3d, BatchNorm3d)>,
    relu_out: Relu,
}

impl BasicBlock {
    fn new(inp: usize, out: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let downsample = (stride != 1 || inp != out).then(|| {
            (
                Conv3d::new(inp, out, ConvGeom::cubic(1, stride, 0), false, rng),
                BatchNorm3d::new(out),
            )
        });
        BasicBlock {
            conv1: Conv3d::new(inp, out, ConvGeom::cubic(3, stride, 1), false, rng),
            bn1: BatchNorm3d::new(out),
            relu1: Relu::new(),
            conv2: Conv3d::new(out, out, ConvGeom::cubic(3, 1, 1), false, rng),
            bn2: BatchNorm3d::new(out),
            downsample,
            relu_out: Relu::new(),
        }
    }

    fn output_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let s = self.conv1.output_spatial(input)?;
        self.conv2.output_spatial(s)
    }

    fn forward(&mut self, x: &Tensor, mode: Mode, cache: bool) -> Result<Tensor> {
        let h = self.conv1.forward(x, cache)?;
        let h = self.bn1.forward(&h, mode)?;
        let h = self.relu1.forward(h, cache);
        let h = self.conv2.forward(&h, cache)?;
        let mut h = self.bn2.forward(&h, mode)?;
        match self.downsample.as_mut() {
            Some((conv, bn)) => {
                let idn = conv.forward(x, cache)?;
                h += &bn.forward(&idn, mode)?;
            }
            None => h += x,
        }
        Ok(self.relu_out.forward(h, cache))
    }

    fn backward(&mut self, g: Tensor) -> Result<Tensor> {
        let g = self.relu_out.backward(g)?;
        let identity_grad = match self.downsample.as_mut() {
            Some((conv, bn)) => {
                let gi = bn.backward(&g)?;
                conv.backward(&gi, true)?.expect("input gradient requested")
            }
            None => g.clone(),
        };
        let h = self.bn2.backward(&g)?;
        let h = self.conv2.backward(&h, true)?.expect("input gradient requested");
        let h = self.relu1.backward(h)?;
        let h = self.bn1.backward(&h)?;
        let mut dx = self.conv1.backward(&h, true)?.expect("input gradient requested");
        dx += &identity_grad;
        Ok(dx)
    }

    fn clear_cache(&mut self) {
        self.conv1.clear_cache();
        self.bn1.clear_cache();
        self.relu1.clear_cache();
        self.conv2.clear_cache();
        self.bn2.clear_cache();
        self.relu_out.clear_cache();
        if let Some((c, b)) = self.downsample.as_mut() {
            c.clear_cache();
            b.clear_cache();
        }
    }
}

impl Visit for BasicBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.conv1.visit(&format!("{prefix}.conv1.0"), f);
        self.bn1.visit(&format!("{prefix}.conv1.1"), f);
        self.conv2.visit(&format!("{prefix}.conv2.0"), f);
        self.bn2.visit(&format!("{prefix}.conv2.1"), f);
        if let Some((c, b)) = self.downsample.as_mut() {
            c.visit(&format!("{prefix}.downsample.0"), f);
            b.visit(&format!("{prefix}.downsample.1"), f);
        }
    }
}

/// Stem plus four residual stages of two basic blocks each.
#[derive(Debug, Clone)]
pub struct Encoder {
    stem_conv: Conv3d,
    stem_bn: BatchNorm3d,
    stem_relu: Relu,
    stages: Vec<Vec<BasicBlock>>,
    frozen: bool,
}

impl Encoder {
    pub fn new(cfg: &UNet3dConfig, rng: &mut impl Rng) -> Self {
        let ch = cfg.encoder_channels;
        let stem_conv = Conv3d::new(3, ch[0], STEM_GEOM, false, rng);
        let mut stages = Vec::with_capacity(4);
        for (i, &stride) in STAGE_STRIDES.iter().enumerate() {
            let (inp, out) = (ch[i], ch[i + 1]);
            stages.push(vec![
                BasicBlock::new(inp, out, stride, rng),
                BasicBlock::new(out, out, 1, rng),
            ]);
        }
        Encoder {
            stem_conv,
            stem_bn: BatchNorm3d::new(ch[0]),
            stem_relu: Relu::new(),
            stages,
            frozen: false,
        }
    }

    /// Spatial extents of every level for a given input, from the layer
    /// geometry alone (no forward pass).
    pub fn trace_shapes(&self, input: [usize; 3]) -> Result<PyramidShapes> {
        let mut levels = [[0; 3]; 5];
        levels[0] = self.stem_conv.output_spatial(input)?;
        let mut cur = levels[0];
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                cur = block.output_spatial(cur)?;
            }
            levels[i + 1] = cur;
        }
        Ok(PyramidShapes { input, levels })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.frozen = frozen;
                if frozen {
                    p.zero_grad();
                }
            }
        });
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<FeaturePyramid> {
        // A frozen encoder never runs backward, so it keeps no caches.
        let cache = mode.caches() && !self.frozen;
        let h = self.stem_conv.forward(x, cache)?;
        let h = self.stem_bn.forward(&h, mode)?;
        let stem = self.stem_relu.forward(h, cache);
        let mut levels = vec![stem];
        for stage in self.stages.iter_mut() {
            let mut h = levels.last().expect("stem present").clone();
            for block in stage.iter_mut() {
                h = block.forward(&h, mode, cache)?;
            }
            levels.push(h);
        }
        let levels: [Tensor; 5] = levels.try_into().expect("five levels");
        Ok(FeaturePyramid { levels })
    }

    /// Backpropagates per-level gradients (skip and bottleneck paths) into
    /// the encoder parameters.
    pub fn backward(&mut self, grads: [Option<Tensor>; 5]) -> Result<()> {
        let [g0, g1, g2, g3, g4] = grads;
        let mut pending = [g0, g1, g2, g3];
        let mut g = g4;
        for i in (0..4).rev() {
            if let Some(mut cur) = g.take() {
                for block in self.stages[i].iter_mut().rev() {
                    cur = block.backward(cur)?;
                }
                g = Some(cur);
            }
            if let Some(skip) = pending[i].take() {
                add_into(&mut g, skip);
            }
        }
        if let Some(g) = g {
            let h = self.stem_relu.backward(g)?;
            let h = self.stem_bn.backward(&h)?;
            self.stem_conv.backward(&h, false)?;
        }
        Ok(())
    }

    pub fn clear_cache(&mut self) {
        self.stem_conv.clear_cache();
        self.stem_bn.clear_cache();
        self.stem_relu.clear_cache();
        for stage in self.stages.iter_mut() {
            for b in stage.iter_mut() {
                b.clear_cache();
            }
        }
    }
}

impl Visit for Encoder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        let p = |s: &str| crate::nn::param_join(prefix, s);
        self.stem_conv.visit(&p("stem.0"), f);
        self.stem_bn.visit(&p("stem.1"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.visit(&p(&format!("layer{}.{j}", i + 1)), f);
            }
        }
    }
}
