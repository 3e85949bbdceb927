use crate::tensor::{Scalar, Tensor};

use super::TrainError;

/// `sum 0.5 * (mu^2 + exp(logvar) - 1 - logvar)` over every element.
pub fn kl_std_normal<T: Scalar>(mu: &Tensor<T>, logvar: &Tensor<T>) -> Result<f64, TrainError> {
    if mu.shape() != logvar.shape() {
        return Err(TrainError::Shape(format!(
            "kl: mu {:?} vs logvar {:?}",
            mu.shape(),
            logvar.shape()
        )));
    }
    Ok(mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m.as_f64(), lv.as_f64());
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub bce: f64,
    pub kl: f64,
}

/// Summed binary cross-entropy of `x_hat` against `x_clean` plus `beta` times
/// the KL term. `x_hat` must lie strictly inside (0, 1).
pub fn vae_loss<T: Scalar>(
    x_clean: &Tensor<T>,
    x_hat: &Tensor<T>,
    mu: &Tensor<T>,
    logvar: &Tensor<T>,
    beta: f64,
) -> Result<VaeLoss, TrainError> {
    if x_clean.shape() != x_hat.shape() {
        return Err(TrainError::Shape(format!(
            "vae loss: target {:?} vs reconstruction {:?}",
            x_clean.shape(),
            x_hat.shape()
        )));
    }
    let mut bce = 0.0;
    for (i, (&t, &p)) in x_clean.data().iter().zip(x_hat.data()).enumerate() {
        let (t, p) = (t.as_f64(), p.as_f64());
        if !(p > 0.0 && p < 1.0) {
            return Err(TrainError::Contract(format!(
                "reconstruction value {p} at index {i} is outside (0, 1)"
            )));
        }
        bce -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    let kl = kl_std_normal(mu, logvar)?;
    Ok(VaeLoss {
        total: bce + beta * kl,
        bce,
        kl,
    })
}
