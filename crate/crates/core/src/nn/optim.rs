use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::param::{Slot, Visit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Moments are keyed by parameter name;
/// frozen parameters are skipped entirely (no decay, no moment update).
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    moments: BTreeMap<String, (ArrayD<f32>, ArrayD<f32>, u64)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            moments: BTreeMap::new(),
        }
    }

    /// One update at learning rate `lr` with decoupled decay `weight_decay`
    /// applied to every multi-dimensional (weight) parameter.
    pub fn step(&mut self, model: &mut dyn Visit, lr: f64, weight_decay: f64) {
        let c = self.config;
        let moments = &mut self.moments;
        model.visit("", &mut |name, slot| {
            let Slot::Param(p) = slot else { return };
            if p.frozen {
                return;
            }
            let (m, v, t) = moments.entry(name.to_string()).or_insert_with(|| {
                (
                    ArrayD::zeros(p.value.raw_dim()),
                    ArrayD::zeros(p.value.raw_dim()),
                    0,
                )
            });
            *t += 1;
            let bc1 = 1.0 - c.beta1.powi(*t as i32);
            let bc2 = 1.0 - c.beta2.powi(*t as i32);
            let decay = if p.value.ndim() > 1 {
                (1.0 - lr * weight_decay) as f32
            } else {
                1.0
            };
            let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
            let step = (lr / bc1) as f32;
            let inv_bc2 = (1.0 / bc2) as f32;
            let eps = c.eps as f32;
            let value = p.value.as_slice_mut().expect("contiguous");
            let grad = p.grad.as_slice().expect("contiguous");
            let ms = m.as_slice_mut().expect("contiguous");
            let vs = v.as_slice_mut().expect("contiguous");
            for i in 0..value.len() {
                let g = grad[i];
                ms[i] = b1 * ms[i] + (1.0 - b1) * g;
                vs[i] = b2 * vs[i] + (1.0 - b2) * g * g;
                value[i] = value[i] * decay - step * ms[i] / ((vs[i] * inv_bc2).sqrt() + eps);
            }
        });
    }

    /// Snapshot of the moment state for checkpointing:
    /// `(name, first moment, second moment, step count)`.
    pub fn state(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>, &ArrayD<f32>, u64)> {
        self.moments
            .iter()
            .map(|(k, (m, v, t))| (k.as_str(), m, v, *t))
    }

    pub fn restore(&mut self, name: String, m: ArrayD<f32>, v: ArrayD<f32>, t: u64) {
        self.moments.insert(name, (m, v, t));
    }
}

/// Zeroes every parameter gradient under `model`.
pub fn zero_grad(model: &mut dyn Visit) {
    model.visit("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            p.zero_grad();
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::{join, Param};

    struct Quadratic {
        w: Param,
    }

    impl Visit for Quadratic {
        fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
            f(&join(prefix, "w"), Slot::Param(&mut self.w));
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quadratic {
            w: Param::filled(&[2, 2], 3.0),
        };
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..500 {
            zero_grad(&mut q);
            let g = q.w.value.mapv(|v| 2.0 * v);
            q.w.grad.assign(&g);
            opt.step(&mut q, 0.05, 0.0);
        }
        assert!(q.w.value.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut q = Quadratic {
            w: Param::filled(&[2, 2], 3.0),
        };
        q.w.frozen = true;
        q.w.grad.fill(1.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut q, 0.1, 0.1);
        assert!(q.w.value.iter().all(|v| *v == 3.0));
    }
}
