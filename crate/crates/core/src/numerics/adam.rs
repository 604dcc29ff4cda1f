//! Adaptive-moment optimizer over named parameter sets.

use crate::error::{Error, Result};
use crate::numerics::real::Real;
use crate::numerics::tensor::Tensor;
use crate::segnet::params::ParamSet;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// First/second moment accumulators, created lazily per parameter name on the
/// first step that provides a gradient for it.
#[derive(Debug, Clone)]
pub struct OptimizerState<F: Real> {
    pub config: AdamConfig,
    step: u64,
    first: ParamSet<F>,
    second: ParamSet<F>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: AdamConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: ParamSet::new(),
            second: ParamSet::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every (name, grad) pair in `grads`. Parameters absent
    /// from `grads` are left untouched, which is how freezing is realized.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &ParamSet<F>) -> Result<()> {
        for (name, g) in grads.iter() {
            g.check_finite(name).map_err(|_| Error::NonFinite {
                context: "adam_step".into(),
                detail: format!("non-finite gradient for parameter {name}"),
            })?;
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    axis: 0,
                    message: format!(
                        "gradient shape {:?} for {name} does not match parameter shape {:?}",
                        g.shape(),
                        p.shape()
                    ),
                });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        let lr = F::from_f64(self.config.lr);
        let eps = F::from_f64(self.config.eps);
        let fb1 = F::from_f64(b1);
        let fb2 = F::from_f64(b2);
        let c1 = F::from_f64(1.0 - b1);
        let c2 = F::from_f64(1.0 - b2);
        let ib1 = F::from_f64(1.0 / bias1);
        let ib2 = F::from_f64(1.0 / bias2);

        for (name, g) in grads.iter() {
            if self.first.get(name).is_none() {
                self.first.insert(name, Tensor::zeros(g.shape()));
                self.second.insert(name, Tensor::zeros(g.shape()));
            }
            let m = self.first.get_mut(name).expect("inserted above");
            for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
                *mv = fb1 * *mv + c1 * gv;
            }
            let v = self.second.get_mut(name).expect("inserted above");
            for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = fb2 * *vv + c2 * gv * gv;
            }
            let m = self.first.get(name).unwrap();
            let v = self.second.get(name).unwrap();
            let p = params.get_mut(name).expect("validated above");
            for ((pv, &mv), &vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mv * ib1;
                let vhat = vv * ib2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::full(&[3], 1.5));
        let g = p.zeros_like();
        let mut state = OptimizerState::new(AdamConfig::default());
        state.step(&mut p, &g).unwrap();
        assert_eq!(state.step_count(), 1);
        for &v in p.get("w").unwrap().data() {
            assert_eq!(v, 1.5);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step: delta = lr * g/|g| (up to eps)
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::full(&[1], 2.0));
        let mut g = p.zeros_like();
        g.get_mut("w").unwrap().data_mut()[0] = 1.0;
        let mut state = OptimizerState::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        state.step(&mut p, &g).unwrap();
        let v = p.get("w").unwrap().data()[0];
        assert!((v - 1.9).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut p = ParamSet::<f32>::new();
            p.insert("w", Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap());
            let mut state = OptimizerState::new(AdamConfig::default());
            for i in 0..10 {
                let mut g = p.zeros_like();
                g.get_mut("w").unwrap().data_mut()[0] = 0.1 * (i as f32);
                g.get_mut("w").unwrap().data_mut()[1] = -0.2;
                state.step(&mut p, &g).unwrap();
            }
            p.get("w").unwrap().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = ParamSet::<f64>::new();
        p.insert("w", Tensor::zeros(&[1]));
        let mut g = p.zeros_like();
        g.get_mut("w").unwrap().data_mut()[0] = f64::NAN;
        let mut state = OptimizerState::new(AdamConfig::default());
        let err = state.step(&mut p, &g).unwrap_err().to_string();
        assert!(err.contains("w"), "{err}");
    }
}
