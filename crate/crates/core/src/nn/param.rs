use ndarray::{ArrayD, IxDyn};

/// A trainable array together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    /// Frozen parameters get no gradient and no optimizer update.
    pub frozen: bool,
}

impl Param {
    pub fn new(value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        Param::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub(crate) fn value_slice(&self) -> &[f32] {
        self.value.as_slice().expect("parameters are contiguous")
    }

    pub(crate) fn grad_slice_mut(&mut self) -> &mut [f32] {
        self.grad.as_slice_mut().expect("gradients are contiguous")
    }
}

/// A named storage slot reachable through [`Visit`].
pub enum Slot<'a> {
    Param(&'a mut Param),
    /// Non-trainable state such as normalization running statistics.
    Buffer(&'a mut ArrayD<f32>),
}

/// Walks every parameter and buffer under a dotted name prefix.
pub trait Visit {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
