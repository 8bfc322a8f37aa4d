//! Per-sample pieces of the post-training objective.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Result};
use crate::numerics::{sq_dist, sq_norm};

/// Added to the squared RMS norm before dividing.
pub const DELTA_EPS: f64 = 1e-6;
/// Log proxy ratios are clamped to `[-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP]`.
pub const LOG_RATIO_CLAMP: f64 = 20.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipStyle {
    #[default]
    Ppo,
    Spo,
}

/// `dx / (rms(dx)^2 + 1e-6)`.
pub fn normalize_delta(dx: &[f64]) -> Vec<f64> {
    if dx.is_empty() {
        return Vec::new();
    }
    let denom = sq_norm(dx) / dx.len() as f64 + DELTA_EPS;
    dx.iter().map(|v| v / denom).collect()
}

/// `v_ref - dx_bar`.
pub fn velocity_target(v_ref: &[f64], dx_bar: &[f64]) -> Result<Vec<f64>> {
    ensure_dim(v_ref.len(), dx_bar.len())?;
    Ok(v_ref.iter().zip(dx_bar).map(|(v, d)| v - d).collect())
}

/// Unclamped `||v_target - v_ref||^2 - ||v_target - v_cur||^2`.
pub fn raw_log_ratio(v_target: &[f64], v_ref: &[f64], v_cur: &[f64]) -> Result<f64> {
    ensure_dim(v_target.len(), v_ref.len())?;
    ensure_dim(v_target.len(), v_cur.len())?;
    Ok(sq_dist(v_target, v_ref) - sq_dist(v_target, v_cur))
}

pub fn clamp_log_ratio(log_ratio: f64) -> f64 {
    log_ratio.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
}

pub fn proxy_ratio(v_target: &[f64], v_ref: &[f64], v_cur: &[f64]) -> Result<f64> {
    Ok(clamp_log_ratio(raw_log_ratio(v_target, v_ref, v_cur)?).exp())
}

fn spo_factor(ratio: f64, eps: f64) -> f64 {
    (1.0 - (ratio - 1.0).abs() / eps).max(0.0)
}

/// Loss contribution of one sample with advantage `adv`.
pub fn clipped_objective(ratio: f64, adv: f64, style: ClipStyle, eps: f64) -> f64 {
    match style {
        ClipStyle::Ppo => -(ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv),
        ClipStyle::Spo => -ratio * adv * spo_factor(ratio, eps),
    }
}

/// Derivative of [`clipped_objective`] with respect to the ratio.
pub fn clipped_objective_slope(ratio: f64, adv: f64, style: ClipStyle, eps: f64) -> f64 {
    match style {
        ClipStyle::Ppo => {
            if ratio * adv <= ratio.clamp(1.0 - eps, 1.0 + eps) * adv {
                -adv
            } else {
                0.0
            }
        }
        ClipStyle::Spo => {
            let f = spo_factor(ratio, eps);
            if f == 0.0 {
                return 0.0;
            }
            let df = if ratio > 1.0 {
                -1.0 / eps
            } else if ratio < 1.0 {
                1.0 / eps
            } else {
                0.0
            };
            -adv * (f + ratio * df)
        }
    }
}

pub fn is_clipped(ratio: f64, eps: f64) -> bool {
    (ratio - 1.0).abs() > eps
}

/// `lambda * ||v_base - v_cur||^2`.
pub fn kl_penalty(v_base: &[f64], v_cur: &[f64], lambda: f64) -> Result<f64> {
    ensure_dim(v_base.len(), v_cur.len())?;
    if lambda == 0.0 {
        return Ok(0.0);
    }
    Ok(lambda * sq_dist(v_base, v_cur))
}
