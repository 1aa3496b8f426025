use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{param_join, spatial, Mode, Slot, Tensor, Visit};

use super::config::UNet3dConfig;
use super::decoder::{Decoder, DecoderPlan};
use super::encoder::{Encoder, FeaturePyramid, PyramidShapes};
use super::weights::{load_pretrained_encoder, LoadReport};

/// Smallest accepted input extent per axis `(D, H, W)`.
pub const MIN_INPUT: [usize; 3] = [8, 32, 32];
const AXIS_NAMES: [&str; 3] = ["depth", "height", "width"];

/// Residual encoder, skip-connected decoder and residual head.
#[derive(Debug, Clone)]
pub struct UNet3d {
    pub config: UNet3dConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// Present when the encoder was initialized from a weight file.
    pub pretrained: Option<LoadReport>,
    input_extent: Option<[usize; 3]>,
}

impl UNet3d {
    /// Builds the model, randomly initialized from `config.init_seed`, then
    /// overlays pretrained encoder weights when a path is configured.
    pub fn new(config: UNet3dConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut encoder = Encoder::new(&config, &mut rng);
        let decoder = Decoder::new(&config, &mut rng);
        let pretrained = match config.pretrained_weights_path.as_deref() {
            Some(path) => {
                let report = load_pretrained_encoder(&mut encoder, path)?;
                log::info!(
                    "loaded {} pretrained encoder entries from {}",
                    report.matched,
                    path.display()
                );
                Some(report)
            }
            None => None,
        };
        Ok(UNet3d {
            config,
            encoder,
            decoder,
            pretrained,
            input_extent: None,
        })
    }

    /// Pyramid extents and decoder targets for an input extent `(D, H, W)`.
    pub fn plan(&self, input: [usize; 3]) -> Result<(PyramidShapes, DecoderPlan)> {
        check_extent(input)?;
        let shapes = self.encoder.trace_shapes(input)?;
        let plan = self.decoder.plan(&shapes)?;
        Ok((shapes, plan))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape()[1] != 3 {
            return Err(Error::Shape(format!(
                "input must have 3 channels, got {}",
                x.shape()[1]
            )));
        }
        if x.shape()[0] == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        check_extent(spatial(x))?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("input contains non-finite values".into()));
        }
        Ok(())
    }

    /// Encoder features only, in evaluation mode.
    pub fn encode(&mut self, x: &Tensor) -> Result<FeaturePyramid> {
        self.check_input(x)?;
        self.encoder.forward(x, Mode::Eval)
    }

    /// Raw class scores `(B, num_classes, D, H, W)`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        let input = spatial(x);
        self.plan(input)?;
        let pyramid = self.encoder.forward(x, mode)?;
        let out = self.decoder.forward(&pyramid.levels, input, mode);
        if out.is_err() {
            self.clear_cache();
        }
        self.input_extent = mode.caches().then_some(input);
        out
    }

    /// Accumulates parameter gradients for the score gradient `g` of the
    /// last training-mode forward pass.
    pub fn backward(&mut self, g: &Tensor) -> Result<()> {
        let Some(extent) = self.input_extent.take() else {
            return Err(Error::InvalidArgument("backward without a training forward pass".into()));
        };
        if spatial(g) != extent || g.shape()[1] != self.config.num_classes {
            return Err(Error::Shape(format!(
                "score gradient {:?} does not match the last forward pass",
                g.shape()
            )));
        }
        let train_encoder = !self.encoder.is_frozen();
        let grads = self.decoder.backward(g, train_encoder)?;
        if train_encoder {
            self.encoder.backward(grads)?;
        }
        Ok(())
    }

    /// Frozen encoder parameters get no gradient and no optimizer update,
    /// and its normalization layers use and keep their running statistics.
    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        self.encoder.set_frozen(frozen);
    }

    pub fn encoder_frozen(&self) -> bool {
        self.encoder.is_frozen()
    }

    pub fn clear_cache(&mut self) {
        self.encoder.clear_cache();
        self.decoder.clear_cache();
        self.input_extent = None;
    }

    /// Number of trainable scalars, frozen or not.
    pub fn num_parameters(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                n += p.len();
            }
        });
        n
    }
}

fn check_extent(input: [usize; 3]) -> Result<()> {
    for a in 0..3 {
        if input[a] < MIN_INPUT[a] {
            return Err(Error::Shape(format!(
                "{} {} is below the minimum of {}",
                AXIS_NAMES[a], input[a], MIN_INPUT[a]
            )));
        }
    }
    Ok(())
}

impl Visit for UNet3d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.encoder.visit(&param_join(prefix, "encoder"), f);
        self.decoder.visit(&param_join(prefix, "decoder"), f);
    }
}
