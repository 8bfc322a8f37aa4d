use serde::Serialize;

use super::OptimizeSummary;
use crate::numerics::{mean, std_dev};

pub const METRICS_HEADER: &str = "epoch,mean_reward,reward_std,mean_abs_dR,mean_rms_dx,clip_fraction,kl_value,grad_norm,diversity,wall_s,eval_reward,model_evals,reward_evals";

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    /// Mean reward of this epoch's rollouts.
    pub mean_reward: f64,
    pub reward_std: f64,
    pub mean_abs_dr: f64,
    pub mean_rms_dx: f64,
    pub clip_fraction: f64,
    pub kl_value: f64,
    pub grad_norm: f64,
    pub diversity: f64,
    pub wall_s: f64,
    /// Mean reward of Euler samples from fixed evaluation noise.
    pub eval_reward: f64,
    pub model_evals: u64,
    pub reward_evals: u64,
    /// Not logged: clip fraction of the first batch after the rollouts.
    #[serde(skip)]
    pub first_batch_clip_fraction: f64,
}

impl EpochMetrics {
    pub(crate) fn from_rollouts(
        epoch: u64,
        rewards: &[f64],
        mean_abs_dr: f64,
        mean_rms_dx: f64,
        summary: &OptimizeSummary,
        model_evals: u64,
        reward_evals: u64,
    ) -> Self {
        EpochMetrics {
            epoch,
            mean_reward: mean(rewards),
            reward_std: std_dev(rewards),
            mean_abs_dr,
            mean_rms_dx,
            clip_fraction: summary.clip_fraction,
            kl_value: summary.kl_value,
            grad_norm: summary.grad_norm,
            diversity: f64::NAN,
            wall_s: 0.0,
            eval_reward: f64::NAN,
            model_evals,
            reward_evals,
            first_batch_clip_fraction: summary.first_batch_clip_fraction,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.mean_reward,
            self.reward_std,
            self.mean_abs_dr,
            self.mean_rms_dx,
            self.clip_fraction,
            self.kl_value,
            self.grad_norm,
            self.diversity,
            self.wall_s,
            self.eval_reward,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.mean_reward,
            self.reward_std,
            self.mean_abs_dr,
            self.mean_rms_dx,
            self.clip_fraction,
            self.kl_value,
            self.grad_norm,
            self.diversity,
            self.wall_s,
            self.eval_reward,
            self.model_evals,
            self.reward_evals
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
