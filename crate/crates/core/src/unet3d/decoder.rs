//! Bottleneck, four skip-connected upscaling blocks and the residual head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, param_join, spatial, split_channels, Conv3d, ConvGeom, ConvTranspose3d,
    InstanceNorm3d, Mode, Relu, Slot, Tensor, Visit,
};

use super::config::UNet3dConfig;
use super::encoder::PyramidShapes;

const UP_KERNEL: [usize; 3] = [3, 3, 3];
const UP_PADDING: [usize; 3] = [1, 1, 1];
/// The final upsampling only works in-plane: depth is never strided.
const FINAL_UP_KERNEL: [usize; 3] = [1, 3, 3];
const FINAL_UP_PADDING: [usize; 3] = [0, 1, 1];

fn conv3(inp: usize, out: usize, rng: &mut impl Rng) -> Conv3d {
    Conv3d::new(inp, out, ConvGeom::cubic(3, 1, 1), true, rng)
}

/// Transposed convolution to the skip's extent, concatenation with the
/// (optionally instance-normalized) skip, then two 3×3×3 conv + ReLU.
#[derive(Debug, Clone)]
struct UpBlock {
    upconv: ConvTranspose3d,
    up_relu: Relu,
    skip_norm: Option<InstanceNorm3d>,
    conv1: Conv3d,
    relu1: Relu,
    conv2: Conv3d,
    relu2: Relu,
}

impl UpBlock {
    fn new(inp: usize, skip: usize, out: usize, norm: bool, rng: &mut impl Rng) -> Self {
        let up = inp / 2;
        UpBlock {
            upconv: ConvTranspose3d::new(inp, up, UP_KERNEL, UP_PADDING, true, rng),
            up_relu: Relu::new(),
            skip_norm: norm.then(InstanceNorm3d::new),
            conv1: conv3(up + skip, out, rng),
            relu1: Relu::new(),
            conv2: conv3(out, out, rng),
            relu2: Relu::new(),
        }
    }

    fn up_channels(&self) -> usize {
        self.upconv.out_channels()
    }

    fn forward(&mut self, x: &Tensor, skip: &Tensor, cache: bool) -> Result<Tensor> {
        let up = self.upconv.forward(x, spatial(skip), cache)?;
        let up = self.up_relu.forward(up, cache);
        let skip = match self.skip_norm.as_mut() {
            Some(norm) => norm.forward(skip, cache),
            None => skip.clone(),
        };
        let h = concat_channels(&up, &skip)?;
        let h = self.conv1.forward(&h, cache)?;
        let h = self.relu1.forward(h, cache);
        let h = self.conv2.forward(&h, cache)?;
        Ok(self.relu2.forward(h, cache))
    }

    /// Returns `(grad wrt x, grad wrt skip)`; the skip gradient is only
    /// computed when requested.
    fn backward(&mut self, g: Tensor, skip_grad: bool) -> Result<(Tensor, Option<Tensor>)> {
        let g = self.relu2.backward(g)?;
        let g = self.conv2.backward(&g, true)?.expect("input gradient requested");
        let g = self.relu1.backward(g)?;
        let g = self.conv1.backward(&g, true)?.expect("input gradient requested");
        let (gu, gs) = split_channels(&g, self.up_channels());
        let gu = self.up_relu.backward(gu)?;
        let gx = self.upconv.backward(&gu, true)?.expect("input gradient requested");
        let gs = if skip_grad {
            Some(match self.skip_norm.as_mut() {
                Some(norm) => norm.backward(&gs)?,
                None => gs,
            })
        } else {
            if let Some(norm) = self.skip_norm.as_mut() {
                norm.clear_cache();
            }
            None
        };
        Ok((gx, gs))
    }

    fn clear_cache(&mut self) {
        self.upconv.clear_cache();
        self.up_relu.clear_cache();
        if let Some(n) = self.skip_norm.as_mut() {
            n.clear_cache();
        }
        self.conv1.clear_cache();
        self.relu1.clear_cache();
        self.conv2.clear_cache();
        self.relu2.clear_cache();
    }
}

impl Visit for UpBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.upconv.visit(&param_join(prefix, "upconv"), f);
        self.conv1.visit(&param_join(prefix, "conv1"), f);
        self.conv2.visit(&param_join(prefix, "conv2"), f);
    }
}

/// Two 3×3×3 convolutions with an identity shortcut, no dilation.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv3d,
    relu1: Relu,
    conv2: Conv3d,
    relu_out: Relu,
}

impl ResBlock {
    fn new(ch: usize, rng: &mut impl Rng) -> Self {
        ResBlock {
            conv1: conv3(ch, ch, rng),
            relu1: Relu::new(),
            conv2: conv3(ch, ch, rng),
            relu_out: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor, cache: bool) -> Result<Tensor> {
        let h = self.conv1.forward(x, cache)?;
        let h = self.relu1.forward(h, cache);
        let mut h = self.conv2.forward(&h, cache)?;
        h += x;
        Ok(self.relu_out.forward(h, cache))
    }

    fn backward(&mut self, g: Tensor) -> Result<Tensor> {
        let g = self.relu_out.backward(g)?;
        let h = self.conv2.backward(&g, true)?.expect("input gradient requested");
        let h = self.relu1.backward(h)?;
        let mut dx = self.conv1.backward(&h, true)?.expect("input gradient requested");
        dx += &g;
        Ok(dx)
    }

    fn clear_cache(&mut self) {
        self.conv1.clear_cache();
        self.relu1.clear_cache();
        self.conv2.clear_cache();
        self.relu_out.clear_cache();
    }
}

impl Visit for ResBlock {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.conv1.visit(&param_join(prefix, "conv1"), f);
        self.conv2.visit(&param_join(prefix, "conv2"), f);
    }
}

/// Resolved transposed-convolution targets for one input extent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderPlan {
    /// `(source, target)` extents of the four upscaling blocks, deepest
    /// first; targets are the skip extents in reverse pyramid order.
    pub blocks: [([usize; 3], [usize; 3]); 4],
    /// `(source, target)` of the final in-plane upsampling to input extent.
    pub final_up: ([usize; 3], [usize; 3]),
}

#[derive(Debug, Clone)]
pub struct Decoder {
    middle1: Conv3d,
    middle_relu1: Relu,
    middle2: Conv3d,
    middle_relu2: Relu,
    ups: Vec<UpBlock>,
    final_up: ConvTranspose3d,
    final_relu: Relu,
    head: ResBlock,
    classifier: Conv3d,
}

impl Decoder {
    pub fn new(cfg: &UNet3dConfig, rng: &mut impl Rng) -> Self {
        let ch = cfg.encoder_channels;
        let norm = cfg.instance_norm_on_skip;
        let dec_out = cfg.decoder_out_channels();
        let head = cfg.head_channels();
        let ups = vec![
            UpBlock::new(ch[4], ch[3], ch[3], norm, rng),
            UpBlock::new(ch[3], ch[2], ch[2], norm, rng),
            UpBlock::new(ch[2], ch[1], ch[1], norm, rng),
            UpBlock::new(ch[1], ch[0], dec_out, norm, rng),
        ];
        Decoder {
            middle1: conv3(ch[4], ch[4], rng),
            middle_relu1: Relu::new(),
            middle2: conv3(ch[4], ch[4], rng),
            middle_relu2: Relu::new(),
            ups,
            final_up: ConvTranspose3d::new(dec_out, head, FINAL_UP_KERNEL, FINAL_UP_PADDING, true, rng),
            final_relu: Relu::new(),
            head: ResBlock::new(head, rng),
            classifier: Conv3d::new(head, cfg.num_classes, ConvGeom::cubic(1, 1, 0), true, rng),
        }
    }

    /// Checks that every upscaling step lands exactly on its skip extent.
    pub fn plan(&self, shapes: &PyramidShapes) -> Result<DecoderPlan> {
        let mut blocks = [([0; 3], [0; 3]); 4];
        let mut cur = shapes.levels[4];
        for (i, up) in self.ups.iter().enumerate() {
            let target = shapes.levels[3 - i];
            up.upconv.plan(cur, target).map_err(|e| {
                Error::Shape(format!("upscaling block {} cannot reach skip extent: {e}", i + 1))
            })?;
            blocks[i] = (cur, target);
            cur = target;
        }
        self.final_up.plan(cur, shapes.input).map_err(|e| {
            Error::Shape(format!("final upsampling cannot reach input extent: {e}"))
        })?;
        Ok(DecoderPlan {
            blocks,
            final_up: (cur, shapes.input),
        })
    }

    pub fn forward(&mut self, levels: &[Tensor; 5], input: [usize; 3], mode: Mode) -> Result<Tensor> {
        let cache = mode.caches();
        let h = self.middle1.forward(&levels[4], cache)?;
        let h = self.middle_relu1.forward(h, cache);
        let h = self.middle2.forward(&h, cache)?;
        let mut h = self.middle_relu2.forward(h, cache);
        for (i, up) in self.ups.iter_mut().enumerate() {
            h = up.forward(&h, &levels[3 - i], cache)?;
        }
        let h = self.final_up.forward(&h, input, cache)?;
        let h = self.final_relu.forward(h, cache);
        let h = self.head.forward(&h, cache)?;
        self.classifier.forward(&h, cache)
    }

    /// Backpropagates the score gradient. Returns gradients for the five
    /// pyramid levels when `encoder_grad` is set, `None`s otherwise.
    pub fn backward(&mut self, g: &Tensor, encoder_grad: bool) -> Result<[Option<Tensor>; 5]> {
        let g = self.classifier.backward(g, true)?.expect("input gradient requested");
        let g = self.head.backward(g)?;
        let g = self.final_relu.backward(g)?;
        let mut g = self.final_up.backward(&g, true)?.expect("input gradient requested");
        let mut out: [Option<Tensor>; 5] = Default::default();
        for (i, up) in self.ups.iter_mut().enumerate().rev() {
            let (gx, gs) = up.backward(g, encoder_grad)?;
            out[3 - i] = gs;
            g = gx;
        }
        let g = self.middle_relu2.backward(g)?;
        let g = self.middle2.backward(&g, true)?.expect("input gradient requested");
        let g = self.middle_relu1.backward(g)?;
        out[4] = self.middle1.backward(&g, encoder_grad)?;
        Ok(out)
    }

    pub fn clear_cache(&mut self) {
        self.middle1.clear_cache();
        self.middle_relu1.clear_cache();
        self.middle2.clear_cache();
        self.middle_relu2.clear_cache();
        for up in self.ups.iter_mut() {
            up.clear_cache();
        }
        self.final_up.clear_cache();
        self.final_relu.clear_cache();
        self.head.clear_cache();
        self.classifier.clear_cache();
    }
}

impl Visit for Decoder {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        let p = |s: &str| param_join(prefix, s);
        self.middle1.visit(&p("middle.0"), f);
        self.middle2.visit(&p("middle.1"), f);
        for (i, up) in self.ups.iter_mut().enumerate() {
            up.visit(&p(&format!("up{}", i + 1)), f);
        }
        self.final_up.visit(&p("final_up"), f);
        self.head.visit(&p("head"), f);
        self.classifier.visit(&p("classifier"), f);
    }
}
