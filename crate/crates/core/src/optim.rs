use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment accumulators keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update at learning rate `lr`.
    ///
    /// Every gradient is validated before any parameter changes, so a
    /// rejected step leaves both the parameters and the state untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Unbound(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{name}` at element {i} is {}",
                    g.data()[i]
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("validated above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (libm::sqrt(vh) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn one(name: &str, x: f64) -> BTreeMap<String, Tensor> {
        [(name.to_string(), Tensor::scalar(x))]
            .into_iter()
            .collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = one("p", 1.5);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &one("p", 0.0), 0.1).unwrap();
        assert_eq!(p["p"].item(), 1.5);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = one("p", 1.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &one("p", 1.0), 0.1).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p["p"].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = one("p", 1.0);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(
            adam.step(&mut p, &one("p", f64::NAN), 0.1),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p["p"].item(), 1.0);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut p = one("p", 1.0);
        let mut adam = Adam::new(AdamConfig::default());
        let mut prev = 1.0;
        for _ in 0..1000 {
            adam.step(&mut p, &one("p", 1.0), 1e-3).unwrap();
            let now = p["p"].item();
            assert!(now < prev);
            prev = now;
        }
    }
}
