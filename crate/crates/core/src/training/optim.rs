use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nets::{NetError, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Rectified Adam wrapped in Lookahead.
    RadamLookahead,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lookahead_steps: usize,
    pub lookahead_alpha: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::RadamLookahead,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lookahead_steps: 6,
            lookahead_alpha: 0.8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            ..Self::default()
        }
    }
}

/// Moment estimates, Lookahead slow weights and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub slow: BTreeMap<String, Tensor<T>>,
}

/// RAdam falls back to an un-normalised momentum step while the length of
/// the approximated simple moving average is at most this.
const RHO_THRESHOLD: f64 = 5.0;

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            slow: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient in `grads`.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
    ) -> Result<(), NetError> {
        self.step += 1;
        let c = self.config;
        let t = self.step as f64;
        let (b1, b2) = (c.beta1, c.beta2);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);

        // Step scale applied to m and, when rectified, the denominator flag.
        let (scale, adaptive) = match c.kind {
            OptimizerKind::Adam => (lr / bc1, true),
            OptimizerKind::RadamLookahead => {
                let rho_inf = 2.0 / (1.0 - b2) - 1.0;
                let rho = rho_inf - 2.0 * t * b2.powf(t) / bc2;
                if rho > RHO_THRESHOLD {
                    let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                    (lr * r / bc1, true)
                } else {
                    (lr / bc1, false)
                }
            }
        };
        let (b1t, b2t, eps, wd) = (T::of(b1), T::of(b2), T::of(c.eps), T::of(c.weight_decay));
        let (scale, sqrt_bc2) = (T::of(scale), T::of(bc2.sqrt()));

        let lookahead = c.kind == OptimizerKind::RadamLookahead && c.lookahead_steps > 0;
        if lookahead {
            for name in grads.keys() {
                if !self.slow.contains_key(name) {
                    self.slow.insert(name.clone(), params.get(name)?.clone());
                }
            }
        }

        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(NetError::Mismatch {
                    layer: name.clone(),
                    detail: format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let pd = p.data_mut();
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi + wd * *pi;
                *mi = b1t * *mi + (T::one() - b1t) * gi;
                *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
                let update = if adaptive {
                    *mi / (vi.sqrt() / sqrt_bc2 + eps)
                } else {
                    *mi
                };
                *pi -= scale * update;
            }
        }

        if lookahead && self.step.is_multiple_of(c.lookahead_steps as u64) {
            let a = T::of(c.lookahead_alpha);
            for name in grads.keys() {
                let slow = self.slow.get_mut(name).expect("inserted above");
                let fast = params.get_mut(name)?;
                for (s, f) in slow.data_mut().iter_mut().zip(fast.data_mut()) {
                    *s += a * (*f - *s);
                    *f = *s;
                }
            }
        }
        Ok(())
    }
}
