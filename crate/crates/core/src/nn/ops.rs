use ndarray::{concatenate, s, Axis, Zip};

use super::Tensor;
use crate::error::{Error, Result};

/// Rectified linear unit; caches its output to rebuild the gate.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    output: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }

    pub fn forward(&mut self, mut x: Tensor, cache: bool) -> Tensor {
        x.mapv_inplace(|v| v.max(0.0));
        self.output = cache.then(|| x.clone());
        x
    }

    pub fn backward(&mut self, mut g: Tensor) -> Result<Tensor> {
        let out = self
            .output
            .take()
            .ok_or_else(|| Error::InvalidArgument("relu backward without cache".into()))?;
        Zip::from(&mut g).and(&out).for_each(|gv, &o| {
            if o <= 0.0 {
                *gv = 0.0;
            }
        });
        Ok(g)
    }

    pub fn clear_cache(&mut self) {
        self.output = None;
    }
}

/// Concatenates along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape()[0] != b.shape()[0] || a.shape()[2..] != b.shape()[2..] {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(concatenate(Axis(1), &[a.view(), b.view()])
        .expect("shapes checked")
        .as_standard_layout()
        .into_owned())
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels(g: &Tensor, first: usize) -> (Tensor, Tensor) {
    let a = g.slice(s![.., ..first, .., .., ..]).to_owned();
    let b = g.slice(s![.., first.., .., .., ..]).to_owned();
    (a, b)
}

/// `acc += x`, or `acc = x` when `acc` is empty.
pub fn add_into(acc: &mut Option<Tensor>, x: Tensor) {
    match acc {
        Some(a) => *a += &x,
        None => *acc = Some(x),
    }
}
