//! Adam optimizer over named parameters, with moment state that serializes
//! into checkpoints so training resumes exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::{Error, Result};

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: usize,
    params: Vec<(String, Var)>,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, var) in &params {
            let z = var.as_tensor().zeros_like()?;
            moments.insert(name.clone(), (z.clone(), z));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step_count: 0,
            params,
            moments,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Apply one update from computed gradients. Parameters without a
    /// gradient in the store are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, var) in &self.params {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = self
                .moments
                .get_mut(name)
                .expect("moment slot exists for every param");
            *m = ((&*m * self.beta1)? + (grad * (1.0 - self.beta1))?)?;
            *v = ((&*v * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat * self.lr)?.div(&(v_hat.sqrt()? + self.eps)?)?;
            var.set(&var.as_tensor().sub(&update)?)?;
        }
        Ok(())
    }

    /// Moment tensors keyed for serialization.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("adam.m.{name}"), m.clone());
            out.insert(format!("adam.v.{name}"), v.clone());
        }
        out
    }

    pub fn load_state(
        &mut self,
        map: &std::collections::HashMap<String, Tensor>,
        step_count: usize,
    ) -> Result<()> {
        for (name, (m, v)) in self.moments.iter_mut() {
            let mk = format!("adam.m.{name}");
            let vk = format!("adam.v.{name}");
            let mt = map
                .get(&mk)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer slot `{mk}`")))?;
            let vt = map
                .get(&vk)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer slot `{vk}`")))?;
            if mt.dims() != m.dims() {
                return Err(Error::Checkpoint(format!("optimizer slot `{mk}` shape mismatch")));
            }
            *m = mt.clone();
            *v = vt.clone();
        }
        self.step_count = step_count;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamRegistry};
    use candle_core::Device;

    /// Minimize (x - 3)^2; Adam should converge near 3.
    #[test]
    fn adam_minimizes_a_quadratic() {
        let dev = Device::Cpu;
        let mut reg = ParamRegistry::new(0, &dev);
        let x = reg.param("x", 1, Init::Zeros).unwrap();
        let mut opt = Adam::new(reg.trainable_vars(), 0.1, 0.9, 0.999).unwrap();
        for _ in 0..300 {
            let diff = (x.as_tensor() - 3.0).unwrap();
            let loss = diff.sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&grads).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f32>().unwrap()[0];
        assert!((v - 3.0).abs() < 0.05, "converged to {v}");
    }

    #[test]
    fn state_roundtrip_resumes_identically() {
        let dev = Device::Cpu;
        // Two identical setups; one round-trips its state mid-run.
        let run = |resume: bool| -> Vec<f32> {
            let mut reg = ParamRegistry::new(7, &dev);
            let x = reg.param("x", 4, Init::Normal(1.0)).unwrap();
            let mut opt = Adam::new(reg.trainable_vars(), 0.05, 0.5, 0.999).unwrap();
            let target = Tensor::new(&[1f32, -2., 0.5, 3.], &dev).unwrap();
            for step in 0..40 {
                if resume && step == 20 {
                    let state = opt.state_tensors();
                    let map: std::collections::HashMap<String, Tensor> =
                        state.into_iter().collect();
                    let count = opt.step_count();
                    let mut opt2 = Adam::new(reg.trainable_vars(), 0.05, 0.5, 0.999).unwrap();
                    opt2.load_state(&map, count).unwrap();
                    opt = opt2;
                }
                let loss = (x.as_tensor() - &target).unwrap().sqr().unwrap().sum_all().unwrap();
                let grads = loss.backward().unwrap();
                opt.step(&grads).unwrap();
            }
            x.as_tensor().to_vec1::<f32>().unwrap()
        };
        assert_eq!(run(false), run(true));
    }
}
