use ndarray::{Array1, ArrayD, IxDyn};

use super::param::{join, Param, Slot, Visit};
use super::{Mode, Tensor};
use crate::error::{Error, Result};

const EPS: f32 = 1e-5;

/// Mean and biased variance, accumulated in f64.
fn group_stats(values: impl Iterator<Item = f32>, len: usize) -> (f64, f64) {
    let mut sum = 0.0f64;
    let mut sq = 0.0f64;
    for v in values {
        let v = v as f64;
        sum += v;
        sq += v * v;
    }
    let mean = sum / len as f64;
    let var = (sq / len as f64 - mean * mean).max(0.0);
    (mean, var)
}

/// Batch normalization over `(N, D, H, W)` per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: ArrayD<f32>,
    pub running_var: ArrayD<f32>,
    pub momentum: f32,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    /// Normalized input; present only for batch-statistics passes, which
    /// are also the only passes that need it.
    xhat: Option<Tensor>,
    inv_std: Vec<f32>,
}

impl BatchNorm3d {
    pub fn new(channels: usize) -> Self {
        BatchNorm3d {
            weight: Param::filled(&[channels], 1.0),
            bias: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), 1.0),
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.len()
    }

    /// Running statistics are used (and left untouched) in eval mode and
    /// whenever the layer is frozen.
    fn uses_batch_stats(&self, mode: Mode) -> bool {
        mode == Mode::Train && !self.weight.frozen
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.channels();
        if x.shape()[1] != c {
            return Err(Error::Shape(format!(
                "batch norm over {c} channels got {}",
                x.shape()[1]
            )));
        }
        let gamma = self.weight.value_slice().to_vec();
        let beta = self.bias.value_slice().to_vec();
        let batch = self.uses_batch_stats(mode);
        let mut out = x.clone();
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let (mean, var) = if batch {
                let lane = x.index_axis(ndarray::Axis(1), ch);
                let count = lane.len();
                let (mean, var) = group_stats(lane.iter().copied(), count);
                let unbiased = if count > 1 {
                    var * count as f64 / (count - 1) as f64
                } else {
                    var
                };
                let m = self.momentum as f64;
                let rm = &mut self.running_mean.as_slice_mut().expect("contiguous")[ch];
                *rm = ((1.0 - m) * *rm as f64 + m * mean) as f32;
                let rv = &mut self.running_var.as_slice_mut().expect("contiguous")[ch];
                *rv = ((1.0 - m) * *rv as f64 + m * unbiased) as f32;
                (mean as f32, var as f32)
            } else {
                (
                    self.running_mean.as_slice().expect("contiguous")[ch],
                    self.running_var.as_slice().expect("contiguous")[ch],
                )
            };
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[ch] = is;
            out.index_axis_mut(ndarray::Axis(1), ch)
                .mapv_inplace(|v| (v - mean) * is);
        }
        let xhat = (batch && mode.caches()).then(|| out.clone());
        for ch in 0..c {
            let (g, b) = (gamma[ch], beta[ch]);
            out.index_axis_mut(ndarray::Axis(1), ch)
                .mapv_inplace(|v| v * g + b);
        }
        self.cache = mode.caches().then_some(BnCache { xhat, inv_std });
        Ok(out)
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidArgument("batch norm backward without cache".into()))?;
        let c = self.channels();
        let gamma = self.weight.value_slice().to_vec();
        let mut dx = g.clone();
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for ch in 0..c {
            let g_ch = g.index_axis(ndarray::Axis(1), ch);
            let count = g_ch.len() as f64;
            let sum_g: f64 = g_ch.iter().map(|v| *v as f64).sum();
            dbeta[ch] = sum_g;
            let sum_gx: f64 = match &cache.xhat {
                Some(xh) => g_ch
                    .iter()
                    .zip(xh.index_axis(ndarray::Axis(1), ch).iter())
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum(),
                None => 0.0,
            };
            dgamma[ch] = sum_gx;
            let scale = gamma[ch] * cache.inv_std[ch];
            let mut d = dx.index_axis_mut(ndarray::Axis(1), ch);
            if let Some(xh) = cache.xhat.as_ref() {
                let xh = xh.index_axis(ndarray::Axis(1), ch);
                let mg = (sum_g / count) as f32;
                let mgx = (sum_gx / count) as f32;
                ndarray::Zip::from(&mut d)
                    .and(&xh)
                    .for_each(|dv, &h| *dv = scale * (*dv - mg - h * mgx));
            } else {
                d.mapv_inplace(|v| v * scale);
            }
        }
        if !self.weight.frozen {
            for (gw, v) in self.weight.grad_slice_mut().iter_mut().zip(&dgamma) {
                *gw += *v as f32;
            }
        }
        if !self.bias.frozen {
            for (gb, v) in self.bias.grad_slice_mut().iter_mut().zip(&dbeta) {
                *gb += *v as f32;
            }
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl Visit for BatchNorm3d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        f(&join(prefix, "bias"), Slot::Param(&mut self.bias));
        f(&join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }
}

/// Instance normalization without affine parameters: each `(sample,
/// channel)` volume is standardized on its own statistics.
#[derive(Debug, Clone, Default)]
pub struct InstanceNorm3d {
    cache: Option<(Tensor, Array1<f32>)>,
}

impl InstanceNorm3d {
    pub fn new() -> Self {
        InstanceNorm3d::default()
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let mut out = x.clone();
        let mut inv = Array1::<f32>::zeros(n * c);
        for s in 0..n {
            for ch in 0..c {
                let mut v = out.slice_mut(ndarray::s![s, ch, .., .., ..]);
                let count = v.len();
                let (mean, var) = group_stats(v.iter().copied(), count);
                let is = 1.0 / (var as f32 + EPS).sqrt();
                let mean = mean as f32;
                v.mapv_inplace(|a| (a - mean) * is);
                inv[s * c + ch] = is;
            }
        }
        self.cache = cache.then(|| (out.clone(), inv));
        out
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let (xhat, inv) = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidArgument("instance norm backward without cache".into()))?;
        let (n, c) = (g.shape()[0], g.shape()[1]);
        let mut dx = g.clone();
        for s in 0..n {
            for ch in 0..c {
                let gv = g.slice(ndarray::s![s, ch, .., .., ..]);
                let xv = xhat.slice(ndarray::s![s, ch, .., .., ..]);
                let count = gv.len() as f64;
                let mg = (gv.iter().map(|v| *v as f64).sum::<f64>() / count) as f32;
                let mgx = (gv
                    .iter()
                    .zip(xv.iter())
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum::<f64>()
                    / count) as f32;
                let is = inv[s * c + ch];
                let mut d = dx.slice_mut(ndarray::s![s, ch, .., .., ..]);
                ndarray::Zip::from(&mut d)
                    .and(&xv)
                    .for_each(|dv, &h| *dv = is * (*dv - mg - h * mgx));
            }
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
