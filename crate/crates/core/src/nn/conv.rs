use ndarray::{Array5, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::columns::{chunk_planes, col2im, gemm, im2col, ConvGeom, Mat};
use super::param::{join, Param, Slot, Visit};
use super::{spatial, Tensor};
use crate::error::{Error, Result};

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ArrayD<f32> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng) as f32)
}

fn add_bias(out: &mut Tensor, bias: &Param) {
    let b = bias.value_slice();
    for mut sample in out.outer_iter_mut() {
        for (c, mut ch) in sample.outer_iter_mut().enumerate() {
            ch.mapv_inplace(|v| v + b[c]);
        }
    }
}

fn accumulate_bias_grad(g: &Tensor, bias: &mut Param) {
    let gb = bias.grad_slice_mut();
    for sample in g.outer_iter() {
        for (c, ch) in sample.outer_iter().enumerate() {
            gb[c] += ch.sum();
        }
    }
}

/// 3D convolution, weight layout `(out, in, kd, kh, kw)`.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub geom: ConvGeom,
    input: Option<Tensor>,
}

impl Conv3d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let [kd, kh, kw] = geom.kernel;
        let shape = [out_channels, in_channels, kd, kh, kw];
        Conv3d {
            weight: Param::new(kaiming(&shape, in_channels * geom.kernel_volume(), rng)),
            bias: bias.then(|| Param::zeros(&[out_channels])),
            geom,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn output_spatial(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.geom.conv_output(input).ok_or_else(|| {
            Error::Shape(format!(
                "input {input:?} too small for kernel {:?} with padding {:?}",
                self.geom.kernel, self.geom.padding
            ))
        })
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Result<Tensor> {
        let (n, cin) = (x.shape()[0], x.shape()[1]);
        if cin != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {cin}",
                self.in_channels()
            )));
        }
        let big = spatial(x);
        let small = self.output_spatial(big)?;
        let cout = self.out_channels();
        let k = cin * self.geom.kernel_volume();
        let p_total: usize = small.iter().product();
        let b_len: usize = cin * big.iter().product::<usize>();
        let plane = small[1] * small[2];
        let chunk = chunk_planes(k, plane, small[0]);
        let xs = x.as_slice().expect("standard layout");
        let w = self.weight.value_slice();

        let mut out = Array5::<f32>::zeros((n, cout, small[0], small[1], small[2]));
        let os = out.as_slice_mut().expect("fresh array");
        let mut cols = Vec::new();
        for s in 0..n {
            let xn = &xs[s * b_len..(s + 1) * b_len];
            let on = &mut os[s * cout * p_total..(s + 1) * cout * p_total];
            if self.geom.is_pointwise() {
                gemm(cout, k, p_total, Mat::rows(w, k), Mat::rows(xn, p_total), 0.0, on, p_total);
                continue;
            }
            let mut z0 = 0;
            while z0 < small[0] {
                let z1 = (z0 + chunk).min(small[0]);
                let pc = (z1 - z0) * plane;
                cols.resize(k * pc, 0.0);
                im2col(xn, cin, big, small, &self.geom, z0, z1, &mut cols);
                gemm(
                    cout,
                    k,
                    pc,
                    Mat::rows(w, k),
                    Mat::rows(&cols, pc),
                    0.0,
                    &mut on[z0 * plane..],
                    p_total,
                );
                z0 = z1;
            }
        }
        if let Some(b) = &self.bias {
            add_bias(&mut out, b);
        }
        self.input = cache.then(|| x.clone());
        Ok(out)
    }

    /// Accumulates parameter gradients (unless frozen) and returns the input
    /// gradient when `input_grad` is set.
    pub fn backward(&mut self, g: &Tensor, input_grad: bool) -> Result<Option<Tensor>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::InvalidArgument("conv backward without cached input".into()))?;
        let n = x.shape()[0];
        let cin = self.in_channels();
        let cout = self.out_channels();
        let big = spatial(&x);
        let small = spatial(g);
        let k = cin * self.geom.kernel_volume();
        let p_total: usize = small.iter().product();
        let b_len: usize = cin * big.iter().product::<usize>();
        let plane = small[1] * small[2];
        let chunk = chunk_planes(k, plane, small[0]);
        let xs = x.as_slice().expect("standard layout");
        let gs = g.as_slice().expect("standard layout");
        let weight_grad = !self.weight.frozen;

        if let Some(b) = self.bias.as_mut() {
            if !b.frozen {
                accumulate_bias_grad(g, b);
            }
        }
        if !weight_grad && !input_grad {
            return Ok(None);
        }

        let mut dx = input_grad.then(|| Array5::<f32>::zeros(x.raw_dim()));
        let w = self.weight.value.as_slice().expect("contiguous").to_vec();
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        for s in 0..n {
            let xn = &xs[s * b_len..(s + 1) * b_len];
            let gn = &gs[s * cout * p_total..(s + 1) * cout * p_total];
            if self.geom.is_pointwise() {
                if weight_grad {
                    let dw = self.weight.grad_slice_mut();
                    gemm(cout, p_total, k, Mat::rows(gn, p_total), Mat::t(xn, p_total), 1.0, dw, k);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxs = dx.as_slice_mut().expect("fresh array");
                    let dxn = &mut dxs[s * b_len..(s + 1) * b_len];
                    gemm(k, cout, p_total, Mat::t(&w, k), Mat::rows(gn, p_total), 0.0, dxn, p_total);
                }
                continue;
            }
            let mut z0 = 0;
            while z0 < small[0] {
                let z1 = (z0 + chunk).min(small[0]);
                let pc = (z1 - z0) * plane;
                let g_chunk = &gn[z0 * plane..];
                if weight_grad {
                    cols.resize(k * pc, 0.0);
                    im2col(xn, cin, big, small, &self.geom, z0, z1, &mut cols);
                    let dw = self.weight.grad_slice_mut();
                    gemm(cout, pc, k, Mat::rows(g_chunk, p_total), Mat::t(&cols, pc), 1.0, dw, k);
                }
                if let Some(dx) = dx.as_mut() {
                    dcols.resize(k * pc, 0.0);
                    gemm(k, cout, pc, Mat::t(&w, k), Mat::rows(g_chunk, p_total), 0.0, &mut dcols, pc);
                    let dxs = dx.as_slice_mut().expect("fresh array");
                    col2im(&dcols, cin, big, small, &self.geom, z0, z1, &mut dxs[s * b_len..(s + 1) * b_len]);
                }
                z0 = z1;
            }
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

impl Visit for Conv3d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}

/// Stride and output padding that take an axis of length `input` to exactly
/// `output` for a transposed convolution with kernel `k` and padding `p`.
/// Strides 1 and 2 are considered; `None` if neither reaches the target.
pub fn resolve_transposed_axis(input: usize, output: usize, k: usize, p: usize) -> Option<(usize, usize)> {
    for stride in [1usize, 2] {
        let base = ((input - 1) * stride + k).checked_sub(2 * p)?;
        if output >= base && output - base < stride {
            return Some((stride, output - base));
        }
    }
    None
}

/// Transposed 3D convolution, weight layout `(in, out, kd, kh, kw)`.
///
/// Stride and output padding are not fixed at construction: each call names
/// its target output extent and the layer resolves them per axis, so the
/// same weights serve inputs whose extents are not powers of two.
#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub kernel: [usize; 3],
    pub padding: [usize; 3],
    cache: Option<(Tensor, ConvGeom)>,
}

impl ConvTranspose3d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        padding: [usize; 3],
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [in_channels, out_channels, kernel[0], kernel[1], kernel[2]];
        let fan_in = in_channels * kernel.iter().product::<usize>();
        ConvTranspose3d {
            weight: Param::new(kaiming(&shape, fan_in, rng)),
            bias: bias.then(|| Param::zeros(&[out_channels])),
            kernel,
            padding,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    /// Geometry that maps `input` to exactly `output`, or a shape error.
    pub fn plan(&self, input: [usize; 3], output: [usize; 3]) -> Result<ConvGeom> {
        let mut stride = [1; 3];
        for a in 0..3 {
            match resolve_transposed_axis(input[a], output[a], self.kernel[a], self.padding[a]) {
                Some((s, _)) => stride[a] = s,
                None => {
                    return Err(Error::Shape(format!(
                        "transposed convolution cannot map extent {} to {} on axis {a}",
                        input[a], output[a]
                    )))
                }
            }
        }
        Ok(ConvGeom {
            kernel: self.kernel,
            stride,
            padding: self.padding,
        })
    }

    pub fn forward(&mut self, x: &Tensor, target: [usize; 3], cache: bool) -> Result<Tensor> {
        let (n, cin) = (x.shape()[0], x.shape()[1]);
        if cin != self.in_channels() {
            return Err(Error::Shape(format!(
                "transposed conv expects {} input channels, got {cin}",
                self.in_channels()
            )));
        }
        let small = spatial(x);
        let geom = self.plan(small, target)?;
        let cout = self.out_channels();
        let rows = cout * geom.kernel_volume();
        let p_in: usize = small.iter().product();
        let big_len: usize = target.iter().product();
        let plane = small[1] * small[2];
        let chunk = chunk_planes(rows, plane, small[0]);
        let xs = x.as_slice().expect("standard layout");
        let w = self.weight.value_slice();

        let mut out = Array5::<f32>::zeros((n, cout, target[0], target[1], target[2]));
        let os = out.as_slice_mut().expect("fresh array");
        let mut cols = Vec::new();
        for s in 0..n {
            let xn = &xs[s * cin * p_in..(s + 1) * cin * p_in];
            let on = &mut os[s * cout * big_len..(s + 1) * cout * big_len];
            let mut z0 = 0;
            while z0 < small[0] {
                let z1 = (z0 + chunk).min(small[0]);
                let pc = (z1 - z0) * plane;
                cols.resize(rows * pc, 0.0);
                gemm(rows, cin, pc, Mat::t(w, rows), Mat::rows(&xn[z0 * plane..], p_in), 0.0, &mut cols, pc);
                col2im(&cols, cout, target, small, &geom, z0, z1, on);
                z0 = z1;
            }
        }
        if let Some(b) = &self.bias {
            add_bias(&mut out, b);
        }
        self.cache = cache.then(|| (x.clone(), geom));
        Ok(out)
    }

    pub fn backward(&mut self, g: &Tensor, input_grad: bool) -> Result<Option<Tensor>> {
        let (x, geom) = self.cache.take().ok_or_else(|| {
            Error::InvalidArgument("transposed conv backward without cached input".into())
        })?;
        let n = x.shape()[0];
        let cin = self.in_channels();
        let cout = self.out_channels();
        let small = spatial(&x);
        let big = spatial(g);
        let rows = cout * geom.kernel_volume();
        let p_in: usize = small.iter().product();
        let big_len: usize = big.iter().product();
        let plane = small[1] * small[2];
        let chunk = chunk_planes(rows, plane, small[0]);
        let xs = x.as_slice().expect("standard layout");
        let gs = g.as_slice().expect("standard layout");
        let weight_grad = !self.weight.frozen;

        if let Some(b) = self.bias.as_mut() {
            if !b.frozen {
                accumulate_bias_grad(g, b);
            }
        }
        if !weight_grad && !input_grad {
            return Ok(None);
        }
        let mut dx = input_grad.then(|| Array5::<f32>::zeros(x.raw_dim()));
        let w = self.weight.value.as_slice().expect("contiguous").to_vec();
        let mut dcols = Vec::new();
        for s in 0..n {
            let xn = &xs[s * cin * p_in..(s + 1) * cin * p_in];
            let gn = &gs[s * cout * big_len..(s + 1) * cout * big_len];
            let mut z0 = 0;
            while z0 < small[0] {
                let z1 = (z0 + chunk).min(small[0]);
                let pc = (z1 - z0) * plane;
                dcols.resize(rows * pc, 0.0);
                im2col(gn, cout, big, small, &geom, z0, z1, &mut dcols);
                if weight_grad {
                    let dw = self.weight.grad_slice_mut();
                    gemm(cin, pc, rows, Mat::rows(&xn[z0 * plane..], p_in), Mat::t(&dcols, pc), 1.0, dw, rows);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxs = dx.as_slice_mut().expect("fresh array");
                    let dxn = &mut dxs[s * cin * p_in + z0 * plane..];
                    gemm(cin, rows, pc, Mat::rows(&w, rows), Mat::rows(&dcols, pc), 0.0, dxn, p_in);
                }
                z0 = z1;
            }
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl Visit for ConvTranspose3d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}
