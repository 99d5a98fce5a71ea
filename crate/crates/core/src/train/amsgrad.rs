//! Adam with the AMSGrad running maximum of the second moment.

use crate::model::Param;
use crate::numerics::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First moment, second moment and its running maximum for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
    pub vmax: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Amsgrad {
    /// One entry per parameter, created lazily on the first update.
    pub moments: Vec<Option<Moments>>,
    pub step: u64,
}

impl Amsgrad {
    pub fn new(num_params: usize) -> Self {
        Amsgrad {
            moments: vec![None; num_params],
            step: 0,
        }
    }

    /// One update. Frozen parameters and parameters without a gradient are
    /// skipped and their moments left untouched.
    pub fn step(&mut self, params: &mut [Param<f32>], grads: &[Option<Tensor<f32>>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2_sqrt = (1.0 - BETA2.powi(t)).sqrt();
        let step_size = (lr / bc1) as f32;
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            let Some(g) = g.as_ref().filter(|_| p.trainable) else {
                continue;
            };
            let mo = slot.get_or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
                vmax: Tensor::zeros(p.value.shape()),
            });
            let w = p.value.data_mut();
            let (m, v, vmax) = (mo.m.data_mut(), mo.v.data_mut(), mo.vmax.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                vmax[i] = vmax[i].max(v[i]);
                let denom = (vmax[i].sqrt() as f64 / bc2_sqrt + EPSILON) as f32;
                w[i] -= step_size * m[i] / denom;
            }
        }
    }
}
