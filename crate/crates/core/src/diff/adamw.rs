//! AdamW with decoupled weight decay and bias correction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

use super::params::{ParamTensor, ParameterStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<R> {
    pub m: Vec<R>,
    pub v: Vec<R>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<R> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Moment buffers keyed by parameter name; present only for tensors the optimizer touched.
    pub state: BTreeMap<String, Moments<R>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// One update of every trainable tensor at the learning rate `lr_of(tensor)`.
    ///
    /// `step_index` starts at 1. Gradients are validated before anything is
    /// written, so a non-finite gradient leaves the store untouched. Returns the
    /// number of tensors updated.
    pub fn step(
        &mut self,
        store: &mut ParameterStore<R>,
        step_index: u64,
        lr_of: impl Fn(&ParamTensor<R>) -> f64,
    ) -> Result<usize> {
        if step_index == 0 {
            return Err(Error::Param("optimizer step_index starts at 1".into()));
        }
        for p in store.iter().filter(|p| p.trainable) {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}`[{}] is {:?} at step {}",
                    p.name, i, p.grad[i], step_index
                )));
            }
        }
        let t = step_index as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let (b1, b2) = (self.beta1, self.beta2);
        let mut touched = 0;
        for p in store.iter_mut().filter(|p| p.trainable) {
            let lr = lr_of(p);
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![R::ZERO; p.values.len()],
                v: vec![R::ZERO; p.values.len()],
            });
            let decay = 1.0 - lr * self.weight_decay;
            for i in 0..p.values.len() {
                let g = p.grad[i].to_f64();
                let m = b1 * st.m[i].to_f64() + (1.0 - b1) * g;
                let v = b2 * st.v[i].to_f64() + (1.0 - b2) * g * g;
                st.m[i] = R::from_f64(m);
                st.v[i] = R::from_f64(v);
                let update = (m / bc1) / (libm::sqrt(v / bc2) + self.eps);
                let w = p.values[i].to_f64() * decay - lr * update;
                p.values[i] = R::from_f64(w);
            }
            touched += 1;
        }
        Ok(touched)
    }

    /// Same learning rate for every trainable tensor.
    pub fn step_uniform(&mut self, store: &mut ParameterStore<R>, step_index: u64, lr: f64) -> Result<usize> {
        self.step(store, step_index, |_| lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(w: f32, g: f32) -> ParameterStore<f32> {
        let mut s = ParameterStore::new();
        let id = s.add("w", &[1], vec![w], false).unwrap();
        s.get_mut(id).grad[0] = g;
        s
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = store(1.0, 1.0).cast::<f64>();
        s.iter_mut().for_each(|p| p.grad[0] = 1.0);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        assert_eq!(opt.step_uniform(&mut s, 1, 0.1).unwrap(), 1);
        let w = s.by_name("w").unwrap().values[0];
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut s = store(0.75, 0.0);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        for t in 1..=5 {
            opt.step_uniform(&mut s, t, 0.01).unwrap();
        }
        assert_eq!(s.by_name("w").unwrap().values[0], 0.75);
    }

    #[test]
    fn frozen_tensors_are_untouched() {
        let mut s = store(0.5, 1.0);
        s.add("b", &[2], vec![0.1, 0.2], true).unwrap();
        s.by_name_mut("b").unwrap().grad = vec![1.0, -1.0];
        s.by_name_mut("w").unwrap().trainable = false;
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.01);
        for t in 1..=10 {
            assert_eq!(opt.step_uniform(&mut s, t, 0.1).unwrap(), 1);
        }
        assert_eq!(s.by_name("w").unwrap().values[0].to_bits(), 0.5f32.to_bits());
        assert_eq!(opt.state.len(), 1);
    }

    #[test]
    fn nan_gradient_aborts_without_writing() {
        let mut s = store(0.5, f32::NAN);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        let err = opt.step_uniform(&mut s, 1, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("`w`")));
        assert_eq!(s.by_name("w").unwrap().values[0], 0.5);
    }
}
