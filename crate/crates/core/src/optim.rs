//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Per-parameter moments plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: BTreeMap<String, Vec<T>>,
    pub second: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig, params: &BTreeMap<String, Tensor<T>>) -> Self {
        let zeros = |p: &Tensor<T>| vec![T::zero(); p.numel()];
        OptimizerState {
            config,
            step: 0,
            first: params.iter().map(|(k, p)| (k.clone(), zeros(p))).collect(),
            second: params.iter().map(|(k, p)| (k.clone(), zeros(p))).collect(),
        }
    }
}

/// One AdamW update over every parameter that carries a gradient.
///
/// Weight decay multiplies the parameter by `1 - lr * weight_decay` before the
/// moment-based step and never enters the moments. Parameters listed in
/// `no_decay` skip the decay term.
pub fn adamw_step<T: Scalar>(
    params: &mut BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
    no_decay: &dyn Fn(&str) -> bool,
) -> Result<()> {
    if !(lr >= 0.0) || !(weight_decay >= 0.0) {
        return Err(Error::Parameter(format!(
            "lr {lr} and weight decay {weight_decay} must be non-negative"
        )));
    }
    for (name, p) in params.iter() {
        if let Some(g) = &p.grad {
            if g.len() != p.numel() {
                return Err(Error::Dimension(format!(
                    "gradient of `{name}` has {} entries for {} parameters",
                    g.len(),
                    p.numel()
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in `{name}` at flat index {i} (value {:?})",
                    g[i]
                )));
            }
        }
    }
    state.step += 1;
    let AdamWConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
    let step_size = T::of(lr / bc1);
    let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(eps);
    for (name, p) in params.iter_mut() {
        let Some(g) = p.grad.take() else { continue };
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); g.len()]);
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); g.len()]);
        let decay = if no_decay(name) {
            T::one()
        } else {
            T::of(1.0 - lr * weight_decay)
        };
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(&g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            *w *= decay;
            *w -= step_size * *mi / (vi.sqrt() * inv_sqrt_bc2 + eps);
        }
        p.grad = Some(g);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, g: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut t = Tensor::scalar(w).with_grad();
        t.grad = Some(vec![g]);
        BTreeMap::from([("w".to_string(), t)])
    }

    fn run(w: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let mut p = single(w, g);
        let mut st = OptimizerState::new(AdamWConfig::default(), &p);
        adamw_step(&mut p, &mut st, lr, wd, &|_| false).unwrap();
        assert_eq!(st.step, 1);
        p["w"].data()[0]
    }

    #[test]
    fn zero_lr_is_identity() {
        assert_eq!(run(1.3, 0.7, 0.0, 0.5), 1.3);
    }

    #[test]
    fn first_step_on_half_square() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((run(1.0, 1.0, 0.1, 0.0) - expected).abs() < 1e-12);
        assert!((run(1.0, 1.0, 0.1, 0.0) - 0.9).abs() < 1e-8);
    }

    #[test]
    fn pure_decay() {
        assert!((run(1.0, 0.0, 1.0, 0.1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn no_decay_filter_skips_decay() {
        let mut p = single(1.0, 0.0);
        let mut st = OptimizerState::new(AdamWConfig::default(), &p);
        adamw_step(&mut p, &mut st, 1.0, 0.1, &|_| true).unwrap();
        assert_eq!(p["w"].data()[0], 1.0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = single(1.0, f64::NAN);
        let mut st = OptimizerState::new(AdamWConfig::default(), &p);
        let err = adamw_step(&mut p, &mut st, 0.1, 0.0, &|_| false).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(st.step, 0);
    }

    #[test]
    fn step_counter_increments() {
        let mut p = single(1.0, 0.5);
        let mut st = OptimizerState::new(AdamWConfig::default(), &p);
        for i in 1..=3 {
            adamw_step(&mut p, &mut st, 0.01, 0.0, &|_| false).unwrap();
            assert_eq!(st.step, i);
        }
    }
}
