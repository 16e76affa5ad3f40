use serde::{Deserialize, Serialize};

use super::params::{GradientMap, ParameterSet};
use crate::error::{ensure_contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// One bias-corrected Adam update, applied in place.
///
/// A parameter with no entry in `grads` is updated as if its gradient were
/// zero (its moments still decay).
pub fn adam_step(params: &mut ParameterSet, grads: &GradientMap, cfg: &AdamConfig) -> Result<()> {
    ensure_contract!(
        grads.len() == params.len(),
        "gradient map has {} entries for {} parameters",
        grads.len(),
        params.len()
    );
    let t = params.step() + 1;
    params.set_step(t);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let g = grads.by_id(id);
        let (value, m, v) = params.slot_mut(id);
        let (value, m, v) = (value.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..value.len() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn scalar_set(x: f64) -> ParameterSet {
        ParameterSet::from_tensors([("x".to_string(), Tensor::vector(vec![x]))]).unwrap()
    }

    fn grad(p: &ParameterSet, g: f64) -> GradientMap {
        let mut gm = GradientMap::for_params(p);
        gm.set("x", Tensor::vector(vec![g])).unwrap();
        gm
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        for g in [3.0, -0.02, 1e-3] {
            let mut p = scalar_set(1.0);
            let gm = grad(&p, g);
            adam_step(&mut p, &gm, &AdamConfig::with_lr(0.01)).unwrap();
            let delta = p.get("x").unwrap().data()[0] - 1.0;
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-15, "{delta} vs {expected}");
        }
    }

    #[test]
    fn zero_gradients_leave_fresh_parameters_unchanged() {
        let mut p = scalar_set(0.7);
        let gm = GradientMap::for_params(&p);
        adam_step(&mut p, &gm, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("x").unwrap().data()[0], 0.7);
        assert_eq!(p.step(), 1);
    }

    #[test]
    fn two_steps_follow_the_moment_recursion() {
        // g = 1, lr = 0.1:
        // t=1: m=0.1, v=0.001, m̂=1, v̂=1 → Δ = −0.1/(1+1e-8)
        // t=2: m=0.19, v=0.001999, m̂=0.19/0.19=1, v̂=0.001999/0.001999=1 → same Δ
        let mut p = scalar_set(0.0);
        let cfg = AdamConfig::with_lr(0.1);
        let gm = grad(&p, 1.0);
        adam_step(&mut p, &gm, &cfg).unwrap();
        adam_step(&mut p, &gm, &cfg).unwrap();
        let (m, v) = p.moments(p.id("x").unwrap());
        assert!((m.data()[0] - 0.19).abs() < 1e-15);
        assert!((v.data()[0] - 0.001999).abs() < 1e-15);
        let step = 0.1 / (1.0 + 1e-8);
        assert!((p.get("x").unwrap().data()[0] + 2.0 * step).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn zero_gradient_is_a_fixed_point_from_rest(values in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
            let t = Tensor::vector(values.clone());
            let mut p = ParameterSet::from_tensors([("w".to_string(), t)]).unwrap();
            let gm = GradientMap::for_params(&p);
            for _ in 0..3 {
                adam_step(&mut p, &gm, &AdamConfig::with_lr(0.5)).unwrap();
            }
            proptest::prop_assert_eq!(p.get("w").unwrap().data(), values.as_slice());
        }
    }
}
