//! SGD with momentum and a polynomial learning-rate decay.

use crate::error::{Error, Result};
use crate::params::{is_decayed, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr0: 4e-4, momentum: 0.9, weight_decay: 1e-5, poly_power: 0.9 }
    }
}

/// `lr(step) = lr0 · (1 − step/total)^power`, clamped to 0 past the end.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolySchedule {
    pub lr0: f64,
    pub power: f64,
    pub total_steps: u64,
}

impl PolySchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step == 0 {
            return self.lr0;
        }
        if self.total_steps == 0 || step >= self.total_steps {
            return 0.0;
        }
        self.lr0 * (1.0 - step as f64 / self.total_steps as f64).powf(self.power)
    }
}

#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub config: SgdConfig,
    pub schedule: PolySchedule,
    velocity: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(config: SgdConfig, params: &ParamStore<T>, total_steps: u64) -> Self {
        let velocity = params
            .iter()
            .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        let schedule = PolySchedule { lr0: config.lr0, power: config.poly_power, total_steps };
        Self { config, schedule, velocity }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// One update at `step`; returns the learning rate used.
    ///
    /// `v ← μ·v + g + λ·w` (λ only on weights), `w ← w − lr·v`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, step: u64) -> Result<f64> {
        let lr = self.schedule.lr(step);
        let (lr_t, mu) = (T::of(lr), T::of(self.config.momentum));
        for (name, vel) in &mut self.velocity {
            let Some(g) = grads.get(name) else { continue };
            let p = params.get_mut(name)?;
            if g.shape() != p.shape() {
                return Err(Error::shape("sgd_step", format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape())));
            }
            let wd = T::of(if is_decayed(name) { self.config.weight_decay } else { 0.0 });
            for ((w, v), g) in p.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data()) {
                *v = mu * *v + *g + wd * *w;
                *w -= lr_t * *v;
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn schedule_endpoints() {
        let s = PolySchedule { lr0: 4e-4, power: 0.9, total_steps: 100 };
        assert_eq!(s.lr(0), 4e-4);
        assert_eq!(s.lr(100), 0.0);
        assert_eq!(s.lr(150), 0.0);
        assert!((s.lr(50) - 4e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
    }

    #[test]
    fn momentum_accumulates() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w.weight", Tensor::from_f64([1], &[1.0]).unwrap());
        let cfg = SgdConfig { lr0: 0.1, momentum: 0.5, weight_decay: 0.0, poly_power: 1.0 };
        let mut st = OptimState::new(cfg, &params, 1000);
        for step in 0..2 {
            let tape = Tape::new();
            let w = params.var(&tape, "w.weight").unwrap();
            let loss = w.scale(2.0).unwrap().sum().unwrap();
            let g = tape.backward(loss).unwrap();
            st.step(&mut params, &g, step).unwrap();
        }
        // v1 = 2, w1 = 1 - 0.1·2; v2 = 0.5·2 + 2 = 3, w2 = w1 - lr(1)·3
        let lr1 = 0.1 * (1.0 - 1.0 / 1000.0);
        let want = 1.0 - 0.2 - lr1 * 3.0;
        assert!((params.get("w.weight").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn biases_are_not_decayed() {
        let mut params = ParamStore::<f64>::new();
        params.insert("a.bias", Tensor::from_f64([1], &[1.0]).unwrap());
        params.insert("a.weight", Tensor::from_f64([1], &[1.0]).unwrap());
        let cfg = SgdConfig { lr0: 1.0, momentum: 0.0, weight_decay: 0.5, poly_power: 1.0 };
        let mut st = OptimState::new(cfg, &params, 10);
        let tape = Tape::new();
        let b = params.var(&tape, "a.bias").unwrap();
        let w = params.var(&tape, "a.weight").unwrap();
        let loss = b.add(&w).unwrap().scale(0.0).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        st.step(&mut params, &g, 0).unwrap();
        assert_eq!(params.get("a.bias").unwrap().data()[0], 1.0);
        assert_eq!(params.get("a.weight").unwrap().data()[0], 0.5);
    }
}
