//! Adam optimizer and the warmup/decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::{ParamSlot, Parameterized};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay rate (0 disables it).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One bias-corrected Adam step over every slot.
///
/// Each slot keeps its own first/second moment tensors and step counter;
/// gradients are validated to be finite (the offending slot is named on
/// failure) and zeroed after the update. A negative learning rate is an
/// error.
pub fn adam_step<T: Scalar>(
    params: &mut impl Parameterized<T>,
    cfg: &AdamConfig,
    learning_rate: f64,
) -> Result<()> {
    if learning_rate < 0.0 {
        return Err(Error::Config(format!(
            "negative learning rate {learning_rate}"
        )));
    }
    for slot in params.slots_mut() {
        adam_step_slot(slot, cfg, learning_rate)?;
    }
    Ok(())
}

fn adam_step_slot<T: Scalar>(
    slot: &mut ParamSlot<T>,
    cfg: &AdamConfig,
    learning_rate: f64,
) -> Result<()> {
    if !slot.grad.all_finite() {
        return Err(Error::NonFinite(format!(
            "gradient of parameter {:?}",
            slot.name
        )));
    }
    slot.step_count += 1;
    let t = slot.step_count as i32;
    let b1 = T::of_f64(cfg.beta1);
    let b2 = T::of_f64(cfg.beta2);
    let eps = T::of_f64(cfg.eps);
    let lr = T::of_f64(learning_rate);
    let one = T::one();
    let bias1 = one - b1.powi(t);
    let bias2 = one - b2.powi(t);
    let wd = T::of_f64(cfg.weight_decay);
    let n = slot.value.len();
    for i in 0..n {
        let g = slot.grad.data()[i];
        let m = b1 * slot.adam_m.data()[i] + (one - b1) * g;
        let v = b2 * slot.adam_v.data()[i] + (one - b2) * g * g;
        slot.adam_m.data_mut()[i] = m;
        slot.adam_v.data_mut()[i] = v;
        let m_hat = m / bias1;
        let v_hat = v / bias2;
        let mut w = slot.value.data()[i];
        w = w - lr * m_hat / (v_hat.sqrt() + eps);
        if cfg.weight_decay != 0.0 {
            w = w - lr * wd * slot.value.data()[i];
        }
        slot.value.data_mut()[i] = w;
    }
    slot.grad.fill(T::zero());
    Ok(())
}

/// Linear warmup over the first `warmup_frac` of `total_steps`, then linear
/// decay to zero. `step` is zero-based.
pub fn scheduled_lr(base_lr: f64, step: u64, total_steps: u64, warmup_frac: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let warmup = ((total_steps as f64) * warmup_frac).ceil().max(1.0);
    let s = step as f64;
    if s < warmup {
        base_lr * (s + 1.0) / warmup
    } else {
        let total = total_steps as f64;
        let remaining = (total - s).max(0.0);
        base_lr * remaining / (total - warmup).max(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;
    use crate::tensor::Tensor;

    fn single_param(value: f32, grad: f32) -> ParamSet<f32> {
        let mut set = ParamSet::new();
        set.insert("w", Tensor::from_vec(&[1], vec![value]).unwrap())
            .unwrap();
        set.slot_mut("w").grad = Tensor::from_vec(&[1], vec![grad]).unwrap();
        set
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // w=1, g=1: bias-corrected m_hat = v_hat = 1, so the step is
        // lr / (1 + eps) ~= lr.
        let mut set = single_param(1.0, 1.0);
        adam_step(&mut set, &AdamConfig::default(), 0.1).unwrap();
        let w = set.value("w").data()[0];
        assert!((w - 0.9).abs() < 1e-6, "w after one step: {w}");
        assert_eq!(set.slot("w").step_count, 1);
        assert_eq!(set.slot("w").grad.data()[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_value_unchanged() {
        let mut set = single_param(0.75, 0.0);
        adam_step(&mut set, &AdamConfig::default(), 0.1).unwrap();
        assert_eq!(set.value("w").data()[0], 0.75);
    }

    #[test]
    fn negative_learning_rate_is_rejected() {
        let mut set = single_param(1.0, 1.0);
        let err = adam_step(&mut set, &AdamConfig::default(), -0.1).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn non_finite_gradient_names_the_slot() {
        let mut set = single_param(1.0, f32::NAN);
        let err = adam_step(&mut set, &AdamConfig::default(), 0.1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("\"w\""), "message should name the slot: {msg}");
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let total = 100;
        let base = 1.0;
        // warmup covers the first 10 steps
        assert!((scheduled_lr(base, 0, total, 0.1) - 0.1).abs() < 1e-12);
        assert!((scheduled_lr(base, 9, total, 0.1) - 1.0).abs() < 1e-12);
        // decay is linear afterwards and hits zero at the end
        let mid = scheduled_lr(base, 55, total, 0.1);
        assert!(mid < 1.0 && mid > 0.0);
        assert!(scheduled_lr(base, 99, total, 0.1) > 0.0);
        assert_eq!(scheduled_lr(base, 100, total, 0.1), 0.0);
        // monotone decay after warmup
        let a = scheduled_lr(base, 20, total, 0.1);
        let b = scheduled_lr(base, 21, total, 0.1);
        assert!(b < a);
    }
}
