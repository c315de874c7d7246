use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Param;
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-6 }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay. Moment buffers are created lazily and
/// only for trainable parameters.
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, state: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Names of the parameters that own moment buffers.
    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    /// One update with learning rate `lr`. Gradients of frozen parameters
    /// are ignored; a missing gradient for a trainable parameter counts as
    /// zero. Any non-finite gradient aborts before anything is written.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable) {
            if let Some(g) = grads.get(&p.name) {
                if g.len() != p.numel() {
                    return Err(Error::shape(format!(
                        "gradient of {} has {} values for {} parameters",
                        p.name,
                        g.len(),
                        p.numel()
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient { name: p.name.clone() });
                }
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for p in params.iter_mut().filter(|p| p.trainable) {
            let n = p.numel();
            let st = self
                .state
                .entry(p.name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            let g = grads.get(&p.name);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                let mh = st.m[i] / bc1;
                let vh = st.v[i] / bc2;
                let old = *w as f64;
                *w = (old - lr * (mh / (vh.sqrt() + eps)) - lr * weight_decay * old) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn grads(name: &str, g: Vec<f64>) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([(name.to_string(), g)])
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = Param::new("w", Tensor::full([2], 2.0f32), true);
        let cfg = AdamWConfig { weight_decay: 0.1, ..Default::default() };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut [&mut p], &grads("w", vec![0.0, 0.0]), 0.01).unwrap();
        let want = (2.0f64 * (1.0 - 0.01 * 0.1)) as f32;
        assert_eq!(p.value.data(), &[want, want]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = Param::new("w", Tensor::scalar(0.0f32), true);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut [&mut p], &grads("w", vec![0.1]), 1e-3).unwrap();
        let want = -1e-3 * 0.1 / (0.1 + 1e-8);
        assert!((p.value.data()[0] as f64 - want).abs() < 1e-10);
    }

    #[test]
    fn frozen_parameter_untouched_and_untracked() {
        let mut p = Param::frozen("w", Tensor::full([3], 1.5f32));
        let before = p.value.clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut [&mut p], &grads("w", vec![1.0; 3]), 0.1).unwrap();
        assert!(p.value.bit_eq(&before));
        assert_eq!(opt.tracked().count(), 0);
    }

    #[test]
    fn non_finite_gradient_aborts_without_writing() {
        let mut a = Param::new("a", Tensor::full([1], 1.0f32), true);
        let mut b = Param::new("b", Tensor::full([1], 1.0f32), true);
        let mut g = grads("a", vec![0.5]);
        g.insert("b".into(), vec![f64::NAN]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut [&mut a, &mut b], &g, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref name } if name == "b"));
        assert_eq!(a.value.data(), &[1.0]);
        assert_eq!(opt.steps(), 0);
    }
}
