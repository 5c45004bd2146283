//! Per-component weighted objectives assembled from sub-losses.

use super::types::LossValue;
use crate::error::{Error, Result};

fn check_weight(name: &str, w: f64) -> Result<()> {
    if !w.is_finite() || w < 0.0 {
        return Err(Error::config(format!("{name} must be finite and nonnegative, got {w}")));
    }
    Ok(())
}

/// `base + lambda_div * div`.
pub fn common_student_loss(base: &LossValue, div: &LossValue, lambda_div: f64) -> Result<LossValue> {
    check_weight("lambda_div", lambda_div)?;
    Ok(LossValue::combine(&[("base", 1.0, base), ("div", lambda_div, div)]))
}

/// `ce + T^2 kl + lambda_fea feat + lambda_self self_loss`.
pub fn leader_loss(
    ce: &LossValue,
    kl: &LossValue,
    feat: &LossValue,
    self_loss: &LossValue,
    t: f64,
    lambda_fea: f64,
    lambda_self: f64,
) -> Result<LossValue> {
    check_weight("lambda_fea", lambda_fea)?;
    check_weight("lambda_self", lambda_self)?;
    if !t.is_finite() || t < 1.0 {
        return Err(Error::config(format!("temperature must be finite and >= 1, got {t}")));
    }
    Ok(LossValue::combine(&[
        ("ce", 1.0, ce),
        ("kl", t * t, kl),
        ("feat", lambda_fea, feat),
        ("self", lambda_self, self_loss),
    ]))
}
