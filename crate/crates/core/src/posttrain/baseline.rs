//! Group-relative policy-gradient baseline on the stochastic sampler's
//! Gaussian transitions.

use rand::Rng as _;
use rayon::prelude::*;

use super::{model_eval_count, optimize_rows, EpochMetrics, RatioModel, Row, TrainContext};
use crate::error::Result;
use crate::numerics::{mean, rms_norm, std_dev, sub, AdamW};
use crate::rng::{self, Domain};
use crate::sampler::{gradient_weights, stochastic_sample, TimeGrid, Trajectory};
use crate::velocity::{ConditionId, GuidedNet, VelocityNet};

/// `(R - mean) / (std + 1e-6)` with the population standard deviation;
/// all zeros when every reward is equal.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.iter().all(|r| *r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let m = mean(rewards);
    let s = std_dev(rewards);
    rewards.iter().map(|r| (r - m) / (s + 1e-6)).collect()
}

struct Group {
    trajectories: Vec<Trajectory>,
    rewards: Vec<f64>,
}

fn rollout_group(net: &VelocityNet, ctx: &TrainContext, grid: &TimeGrid, epoch: u64, g: u64) -> Result<Group> {
    let config = ctx.config;
    let field = GuidedNet::new(net, config.cfg_scale);
    let arch = net.arch();
    let size = config.group_size as u64;
    let mut r = rng::stream(ctx.seed, Domain::Baseline, epoch, g * (size + 1));
    let c = ConditionId(r.random_range(0..arch.n_conditions));
    let schedule = config.schedule.draw(grid, &mut r)?;
    let mut trajectories = Vec::with_capacity(config.group_size);
    let mut rewards = Vec::with_capacity(config.group_size);
    for k in 0..size {
        let mut rk = rng::stream(ctx.seed, Domain::Baseline, epoch, g * (size + 1) + 1 + k);
        let eps = rng::normal_vec(&mut rk, arch.dim);
        let traj = stochastic_sample(&field, &eps, c, grid, &schedule, &mut rk)?;
        rewards.push(ctx.reward.combine(traj.endpoint(), c)?);
        trajectories.push(traj);
    }
    Ok(Group { trajectories, rewards })
}

fn transition_rows(traj: &Trajectory, advantage: f64, weights: &[f64], rows: &mut Vec<Row>) {
    let steps = traj.steps();
    for i in 0..steps {
        let gamma = traj.gammas[i];
        let ratio = if gamma > 0.0 {
            let t_tilde = traj.overshoot(i);
            let shrink = gamma * t_tilde + 1.0;
            let std = t_tilde * (gamma * gamma + 2.0 * gamma).sqrt() / shrink;
            RatioModel::Transition {
                x_next: traj.state(i + 1).to_vec(),
                drift: t_tilde - traj.times[i],
                shrink,
                var: std * std,
            }
        } else {
            RatioModel::Inactive
        };
        rows.push(Row {
            x: traj.state(i).to_vec(),
            t: traj.times[i],
            c: traj.condition,
            v_ref: traj.v_ref.row(i).to_vec(),
            weight: steps as f64 * weights[i],
            advantage: if gamma > 0.0 { advantage } else { 0.0 },
            ratio,
        });
    }
}

/// One baseline epoch with the same rollout count (`2 P`) and training row
/// count as an FDFO epoch. Rollouts come in groups of `group_size` sharing
/// a condition and schedule; each stochastic transition is a Gaussian action
/// scored by its group-standardized reward.
pub fn baseline_grpo_epoch(net: &mut VelocityNet, optimizer: &mut AdamW, ctx: &TrainContext, epoch: u64) -> Result<EpochMetrics> {
    let config = ctx.config;
    let grid = TimeGrid::uniform(config.steps)?;
    let n_groups = (2 * config.pairs_per_epoch / config.group_size) as u64;
    let groups = (0..n_groups)
        .into_par_iter()
        .map(|g| rollout_group(net, ctx, &grid, epoch, g))
        .collect::<Result<Vec<_>>>()?;
    let weights = gradient_weights(&grid, config.gradient_weighting);
    let mut rows = Vec::new();
    let mut rewards = Vec::new();
    let mut abs_dev = Vec::new();
    let mut rms_dev = Vec::new();
    for group in &groups {
        let adv = group_advantages(&group.rewards);
        let m = mean(&group.rewards);
        let dim = net.arch().dim;
        let mut centroid = vec![0.0; dim];
        for traj in &group.trajectories {
            for (c, x) in centroid.iter_mut().zip(traj.endpoint()) {
                *c += x / group.trajectories.len() as f64;
            }
        }
        for (traj, (&r, &a)) in group.trajectories.iter().zip(group.rewards.iter().zip(&adv)) {
            transition_rows(traj, a, &weights, &mut rows);
            rewards.push(r);
            abs_dev.push((r - m).abs());
            rms_dev.push(rms_norm(&sub(traj.endpoint(), &centroid))?);
        }
    }
    let summary = optimize_rows(net, optimizer, ctx, &rows, (Domain::Shuffle, epoch))?;
    Ok(EpochMetrics::from_rollouts(
        epoch,
        &rewards,
        mean(&abs_dev),
        mean(&rms_dev),
        &summary,
        model_eval_count(net, config, rewards.len(), rows.len()),
        rewards.len() as u64,
    ))
}
