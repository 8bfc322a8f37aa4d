//! Reward post-training: paired rollouts, reward-weighted normalized
//! endpoint differences, proxy-ratio clipping and a group-relative baseline.

mod baseline;
mod metrics;
mod objective;

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use baseline::{baseline_grpo_epoch, group_advantages};
pub use metrics::{metrics_csv, EpochMetrics, METRICS_HEADER};
pub use objective::{
    clamp_log_ratio, clipped_objective, clipped_objective_slope, is_clipped, kl_penalty, normalize_delta, proxy_ratio,
    raw_log_ratio, velocity_target, ClipStyle, DELTA_EPS, LOG_RATIO_CLAMP,
};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{eval_diversity, eval_reward, EvalSettings};
use crate::numerics::{dot, mean, rms_norm, sq_dist, sq_norm, sub, AdamW, AdamWConfig, Mat, Tape};
use crate::rewards::CombinedReward;
use crate::rng::{self, Domain};
use crate::sampler::{
    euler_sample, gradient_weights, stochastic_sample, GradientWeighting, ScheduleConfig, StochasticitySchedule, TimeGrid,
    Trajectory,
};
use crate::velocity::{ConditionId, GuidedNet, VelocityField, VelocityNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Both pair members start from the same noise.
    pub shared_init_noise: bool,
    /// The first pair member is sampled with the Euler solver.
    pub deterministic_second: bool,
    /// Replace the paired difference by the analytic reward gradient.
    pub reward_gradient: bool,
    /// Divide the endpoint difference by its squared RMS norm.
    pub normalize_delta: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Ablations {
            shared_init_noise: true,
            deterministic_second: false,
            reward_gradient: false,
            normalize_delta: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostTrainConfig {
    pub pairs_per_epoch: usize,
    pub batches_per_epoch: usize,
    pub steps: usize,
    pub schedule: ScheduleConfig,
    pub clip_style: ClipStyle,
    pub clip_epsilon: f64,
    pub kl_weight: f64,
    /// Guidance scale used for rollouts and training; `None` disables it.
    pub cfg_scale: Option<f64>,
    pub gradient_weighting: GradientWeighting,
    pub ablations: Ablations,
    /// Multiplies reward differences before they act as advantages.
    pub reward_scale: f64,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    /// Rollouts per group for the baseline.
    pub group_size: usize,
    pub checkpoint_every: usize,
    pub eval: EvalSettings,
    pub eval_every: usize,
    pub diversity_every: usize,
    /// Write elapsed seconds into the metrics; off keeps outputs reproducible.
    pub record_wall_time: bool,
    /// Rows per recorded forward pass.
    pub chunk_rows: usize,
}

impl Default for PostTrainConfig {
    fn default() -> Self {
        PostTrainConfig {
            pairs_per_epoch: 64,
            batches_per_epoch: 4,
            steps: 40,
            schedule: ScheduleConfig::default(),
            clip_style: ClipStyle::Ppo,
            clip_epsilon: 0.2,
            kl_weight: 0.0,
            cfg_scale: None,
            gradient_weighting: GradientWeighting::Uniform,
            ablations: Ablations::default(),
            reward_scale: 1.0,
            optimizer: AdamWConfig::default(),
            epochs: 300,
            group_size: 8,
            checkpoint_every: 50,
            eval: EvalSettings::default(),
            eval_every: 1,
            diversity_every: 10,
            record_wall_time: false,
            chunk_rows: 256,
        }
    }
}

impl PostTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("posttrain: {what}")));
        if self.pairs_per_epoch == 0 || self.batches_per_epoch == 0 || self.steps == 0 {
            return bad("pairs_per_epoch, batches_per_epoch and steps must be at least 1");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return bad("kl_weight must be non-negative");
        }
        if !self.reward_scale.is_finite() || self.cfg_scale.is_some_and(|w| !w.is_finite()) {
            return bad("reward_scale and cfg_scale must be finite");
        }
        if self.chunk_rows == 0 || self.eval_every == 0 || self.diversity_every == 0 || self.checkpoint_every == 0 {
            return bad("chunk_rows, eval_every, diversity_every and checkpoint_every must be at least 1");
        }
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        self.schedule.validate()?;
        self.optimizer.validate()?;
        self.eval.validate()
    }

    fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.steps)
    }
}

/// Two rollouts for one condition.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutPair {
    pub condition: ConditionId,
    pub eps: Vec<f64>,
    pub eps_hat: Vec<f64>,
    pub schedule: StochasticitySchedule,
    pub tau: Trajectory,
    pub tau_hat: Trajectory,
    pub reward: f64,
    pub reward_hat: f64,
    /// `x_hat_T - x_T`.
    pub delta_x: Vec<f64>,
    pub delta_x_bar: Vec<f64>,
    /// `R(x_hat_T) - R(x_T)`.
    pub delta_r: f64,
}

impl RolloutPair {
    pub fn new(tau: Trajectory, tau_hat: Trajectory, reward: f64, reward_hat: f64, schedule: StochasticitySchedule) -> Self {
        let delta_x = sub(tau_hat.endpoint(), tau.endpoint());
        let delta_x_bar = normalize_delta(&delta_x);
        RolloutPair {
            condition: tau.condition,
            eps: tau.state(0).to_vec(),
            eps_hat: tau_hat.state(0).to_vec(),
            schedule,
            tau,
            tau_hat,
            reward,
            reward_hat,
            delta_x,
            delta_x_bar,
            delta_r: reward_hat - reward,
        }
    }

    /// The same pair with the members exchanged.
    pub fn swapped(&self) -> Self {
        RolloutPair::new(
            self.tau_hat.clone(),
            self.tau.clone(),
            self.reward_hat,
            self.reward,
            self.schedule.clone(),
        )
    }

    pub fn member(&self, m: usize) -> &Trajectory {
        if m == 0 {
            &self.tau
        } else {
            &self.tau_hat
        }
    }

    /// `dR * dx_bar` points from the lower- to the higher-reward endpoint.
    pub fn direction_is_consistent(&self) -> bool {
        let lo_to_hi = if self.delta_r >= 0.0 {
            self.delta_x.clone()
        } else {
            self.delta_x.iter().map(|v| -v).collect()
        };
        let update: Vec<f64> = self.delta_x_bar.iter().map(|v| self.delta_r * v).collect();
        dot(&update, &lo_to_hi) >= 0.0
    }
}

/// Everything an epoch reads but never mutates.
#[derive(Clone, Copy, Debug)]
pub struct TrainContext<'a> {
    pub config: &'a PostTrainConfig,
    pub reward: &'a CombinedReward,
    /// Frozen reference for the velocity penalty.
    pub base: &'a VelocityNet,
    pub seed: u64,
}

/// Draws `P` pairs from a frozen snapshot. Pair `p` of epoch `e` only reads
/// the streams `(seed, Rollout, e, 4p..4p+3)`.
pub fn generate_pairs(net: &VelocityNet, ctx: &TrainContext, epoch: u64) -> Result<Vec<RolloutPair>> {
    let config = ctx.config;
    let grid = config.grid()?;
    let field = GuidedNet::new(net, config.cfg_scale);
    let arch = net.arch();
    (0..config.pairs_per_epoch as u64)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::stream(ctx.seed, Domain::Rollout, epoch, 4 * p);
            let c = ConditionId(r.random_range(0..arch.n_conditions));
            let eps = rng::normal_vec(&mut r, arch.dim);
            let schedule = config.schedule.draw(&grid, &mut r)?;
            let eps_hat = if config.ablations.shared_init_noise {
                eps.clone()
            } else {
                rng::normal_vec(&mut r, arch.dim)
            };
            let tau = if config.ablations.deterministic_second {
                euler_sample(&field, &eps, c, &grid)?
            } else {
                let mut r1 = rng::stream(ctx.seed, Domain::Rollout, epoch, 4 * p + 1);
                stochastic_sample(&field, &eps, c, &grid, &schedule, &mut r1)?
            };
            let mut r2 = rng::stream(ctx.seed, Domain::Rollout, epoch, 4 * p + 2);
            let tau_hat = stochastic_sample(&field, &eps_hat, c, &grid, &schedule, &mut r2)?;
            let reward = ctx.reward.combine(tau.endpoint(), c)?;
            let reward_hat = ctx.reward.combine(tau_hat.endpoint(), c)?;
            Ok(RolloutPair::new(tau, tau_hat, reward, reward_hat, schedule))
        })
        .collect()
}

/// How a training row measures the ratio between the rollout-time and the
/// current policy.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum RatioModel {
    /// Proxy ratio against a velocity target.
    Target { v_target: Vec<f64> },
    /// Gaussian transition likelihood of the recorded renoised state, whose
    /// mean is `(x + drift * v) / shrink` with per-coordinate variance `var`.
    Transition { x_next: Vec<f64>, drift: f64, shrink: f64, var: f64 },
    /// Deterministic step: no likelihood, only the velocity penalty applies.
    Inactive,
}

/// One (trajectory, step) sample.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Row {
    pub x: Vec<f64>,
    pub t: f64,
    pub c: ConditionId,
    pub v_ref: Vec<f64>,
    /// `T * w_i`, so uniform weighting gives 1.
    pub weight: f64,
    pub advantage: f64,
    pub ratio: RatioModel,
}

fn transition_mean(x: &[f64], v: &[f64], drift: f64, shrink: f64) -> Vec<f64> {
    x.iter().zip(v).map(|(xk, vk)| (xk + drift * vk) / shrink).collect()
}

impl Row {
    /// Unclamped log ratio and its gradient with respect to `v_cur`.
    fn log_ratio(&self, v_cur: &[f64]) -> Result<(f64, Vec<f64>)> {
        match &self.ratio {
            RatioModel::Target { v_target } => {
                let lr = raw_log_ratio(v_target, &self.v_ref, v_cur)?;
                let g = v_target.iter().zip(v_cur).map(|(a, b)| 2.0 * (a - b)).collect();
                Ok((lr, g))
            }
            RatioModel::Transition { x_next, drift, shrink, var } => {
                let mu_old = transition_mean(&self.x, &self.v_ref, *drift, *shrink);
                let mu_new = transition_mean(&self.x, v_cur, *drift, *shrink);
                let lr = (sq_dist(x_next, &mu_old) - sq_dist(x_next, &mu_new)) / (2.0 * var);
                let g = x_next
                    .iter()
                    .zip(&mu_new)
                    .map(|(xn, m)| (xn - m) * drift / (shrink * var))
                    .collect();
                Ok((lr, g))
            }
            RatioModel::Inactive => Ok((0.0, vec![0.0; v_cur.len()])),
        }
    }
}

/// Accumulated result of one optimizer batch.
#[derive(Clone, Debug, Default)]
struct BatchStats {
    loss: f64,
    rows: usize,
    clipped: usize,
    kl_sum: f64,
    max_abs_log_ratio: f64,
    grad: Vec<f64>,
}

impl BatchStats {
    fn merge(mut self, other: BatchStats) -> BatchStats {
        if self.grad.is_empty() {
            self.grad = other.grad;
        } else {
            for (a, b) in self.grad.iter_mut().zip(&other.grad) {
                *a += b;
            }
        }
        self.loss += other.loss;
        self.rows += other.rows;
        self.clipped += other.clipped;
        self.kl_sum += other.kl_sum;
        self.max_abs_log_ratio = self.max_abs_log_ratio.max(other.max_abs_log_ratio);
        self
    }
}

/// Unweighted loss of one row and its gradient with respect to `v_cur`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct RowTerms {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub log_ratio: f64,
    pub clipped: bool,
    pub kl: f64,
}

pub(crate) fn row_terms(row: &Row, v_cur: &[f64], v_base: Option<&[f64]>, config: &PostTrainConfig) -> Result<RowTerms> {
    let (raw, dlr) = row.log_ratio(v_cur)?;
    let clamped = clamp_log_ratio(raw);
    let ratio = clamped.exp();
    let mut loss = clipped_objective(ratio, row.advantage, config.clip_style, config.clip_epsilon);
    let mut grad = vec![0.0; v_cur.len()];
    if clamped == raw {
        let slope = clipped_objective_slope(ratio, row.advantage, config.clip_style, config.clip_epsilon) * ratio;
        for (gi, di) in grad.iter_mut().zip(&dlr) {
            *gi = slope * di;
        }
    }
    let mut kl = 0.0;
    if let Some(vb) = v_base {
        kl = kl_penalty(vb, v_cur, config.kl_weight)?;
        loss += kl;
        for ((gi, b), c) in grad.iter_mut().zip(vb).zip(v_cur) {
            *gi += 2.0 * config.kl_weight * (c - b);
        }
    }
    Ok(RowTerms {
        loss,
        grad,
        log_ratio: raw,
        clipped: is_clipped(ratio, config.clip_epsilon),
        kl,
    })
}

/// Loss and gradient of `rows`, each term scaled by `scale`. The gradient
/// with respect to the predicted velocities is formed analytically and
/// pulled back through the network as `sum(V * G)`.
fn chunk_gradient(net: &VelocityNet, ctx: &TrainContext, rows: &[&Row], scale: f64) -> Result<BatchStats> {
    let config = ctx.config;
    let d = net.arch().dim;
    let n = rows.len();
    let mut xs = Mat::zeros(n, d);
    let mut ts = Vec::with_capacity(n);
    let mut cs = Vec::with_capacity(n);
    for (k, row) in rows.iter().enumerate() {
        xs.row_mut(k).copy_from_slice(&row.x);
        ts.push(row.t);
        cs.push(row.c);
    }
    let field = GuidedNet::new(net, config.cfg_scale);
    let mut tape = Tape::new(net.n_params());
    let v = field.on_tape(&mut tape, &xs, &ts, &cs)?;
    let v_cur = tape.value(v).clone();
    let v_base = (config.kl_weight > 0.0).then(|| GuidedNet::new(ctx.base, config.cfg_scale).forward_batch(&xs, &ts, &cs));
    let mut g = Mat::zeros(n, d);
    let mut stats = BatchStats {
        rows: n,
        ..BatchStats::default()
    };
    for (k, row) in rows.iter().enumerate() {
        let vb = v_base.as_ref().map(|m| m.row(k));
        let terms = row_terms(row, v_cur.row(k), vb, config)?;
        stats.max_abs_log_ratio = stats.max_abs_log_ratio.max(terms.log_ratio.abs());
        stats.clipped += usize::from(terms.clipped);
        stats.kl_sum += terms.kl;
        let w = row.weight * scale;
        for (gi, di) in g.row_mut(k).iter_mut().zip(&terms.grad) {
            *gi = w * di;
        }
        stats.loss += w * terms.loss;
    }
    let gv = tape.constant(g);
    let prod = tape.mul(v, gv)?;
    let out = tape.sum(prod);
    stats.grad = tape.backward(out, 1.0)?.into_params();
    Ok(stats)
}

/// Splits `order` into `B` contiguous batches, each sorted by row index.
fn split_batches(order: &[usize], batches: usize) -> Vec<Vec<usize>> {
    let n = order.len();
    (0..batches)
        .map(|b| {
            let mut idx = order[b * n / batches..(b + 1) * n / batches].to_vec();
            idx.sort_unstable();
            idx
        })
        .filter(|b| !b.is_empty())
        .collect()
}

/// Aggregate over one epoch's optimizer batches.
#[derive(Clone, Debug, Default)]
pub(crate) struct OptimizeSummary {
    pub clip_fraction: f64,
    pub first_batch_clip_fraction: f64,
    pub kl_value: f64,
    pub grad_norm: f64,
}

/// Shuffles `rows`, takes one AdamW step per batch, and checks that the
/// first batch sees the rollout policy exactly.
pub(crate) fn optimize_rows(
    net: &mut VelocityNet,
    optimizer: &mut AdamW,
    ctx: &TrainContext,
    rows: &[Row],
    shuffle_stream: (Domain, u64),
) -> Result<OptimizeSummary> {
    let config = ctx.config;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng::stream(ctx.seed, shuffle_stream.0, shuffle_stream.1, 0));
    let mut summary = OptimizeSummary::default();
    let mut clipped = 0;
    let mut kl_sum = 0.0;
    let mut norms = Vec::new();
    for (b, batch) in split_batches(&order, config.batches_per_epoch).iter().enumerate() {
        let refs: Vec<&Row> = batch.iter().map(|&i| &rows[i]).collect();
        let scale = 1.0 / refs.len() as f64;
        let snapshot = &*net;
        let parts = refs
            .par_chunks(config.chunk_rows)
            .map(|chunk| chunk_gradient(snapshot, ctx, chunk, scale))
            .collect::<Result<Vec<_>>>()?;
        let stats = parts.into_iter().fold(BatchStats::default(), BatchStats::merge);
        if !stats.loss.is_finite() || stats.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!("non-finite loss {} in batch {b}", stats.loss)));
        }
        if b == 0 {
            if stats.max_abs_log_ratio != 0.0 {
                return Err(Error::Invariant(format!(
                    "proxy ratio differs from 1 right after rollouts (|log r| = {})",
                    stats.max_abs_log_ratio
                )));
            }
            summary.first_batch_clip_fraction = stats.clipped as f64 / stats.rows as f64;
        }
        clipped += stats.clipped;
        kl_sum += stats.kl_sum;
        norms.push(sq_norm(&stats.grad).sqrt());
        optimizer.step(net.params_mut(), &stats.grad)?;
    }
    if net.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Divergence("non-finite parameters after update".into()));
    }
    summary.clip_fraction = clipped as f64 / rows.len().max(1) as f64;
    summary.kl_value = kl_sum / rows.len().max(1) as f64;
    summary.grad_norm = mean(&norms);
    Ok(summary)
}

/// Advantage and update direction shared by every step of one member.
fn member_signal(pair: &RolloutPair, member: usize, ctx: &TrainContext) -> Result<(f64, Vec<f64>)> {
    let config = ctx.config;
    if config.ablations.reward_gradient {
        let g = ctx.reward.gradient(pair.member(member).endpoint())?;
        return Ok((1.0, g.iter().map(|v| config.reward_scale * v).collect()));
    }
    let dir = if config.ablations.normalize_delta {
        pair.delta_x_bar.clone()
    } else {
        pair.delta_x.clone()
    };
    Ok((config.reward_scale * pair.delta_r, dir))
}

/// Flattens pairs into `2 P T` rows ordered by (pair, member, step).
pub(crate) fn fdfo_rows(pairs: &[RolloutPair], ctx: &TrainContext) -> Result<Vec<Row>> {
    let config = ctx.config;
    let grid = config.grid()?;
    let weights = gradient_weights(&grid, config.gradient_weighting);
    let steps = config.steps;
    let mut rows = Vec::with_capacity(2 * pairs.len() * steps);
    for pair in pairs {
        for m in 0..2 {
            let (advantage, dir) = member_signal(pair, m, ctx)?;
            let traj = pair.member(m);
            for i in 0..steps {
                let v_ref = traj.v_ref.row(i).to_vec();
                rows.push(Row {
                    x: traj.state(i).to_vec(),
                    t: traj.times[i],
                    c: traj.condition,
                    weight: steps as f64 * weights[i],
                    advantage,
                    ratio: RatioModel::Target {
                        v_target: velocity_target(&v_ref, &dir)?,
                    },
                    v_ref,
                });
            }
        }
    }
    Ok(rows)
}

/// Network forward passes per velocity query under the configured guidance.
pub(crate) fn evals_per_query(net: &VelocityNet, config: &PostTrainConfig) -> u64 {
    GuidedNet::new(net, config.cfg_scale).net_evals_per_call()
}

/// Forward passes spent on rollouts and training rows.
pub(crate) fn model_eval_count(net: &VelocityNet, config: &PostTrainConfig, trajectories: usize, rows: usize) -> u64 {
    let k = evals_per_query(net, config);
    let training = if config.kl_weight > 0.0 { 2 * rows } else { rows };
    k * (trajectories * config.steps + training) as u64
}

/// One FDFO epoch: rollouts from the current snapshot, then one pass of
/// `B` optimizer batches over the flattened samples.
pub fn fdfo_epoch(net: &mut VelocityNet, optimizer: &mut AdamW, ctx: &TrainContext, epoch: u64) -> Result<EpochMetrics> {
    let pairs = generate_pairs(net, ctx, epoch)?;
    for (p, pair) in pairs.iter().enumerate() {
        if !pair.direction_is_consistent() {
            return Err(Error::Invariant(format!("pair {p} update points away from the better endpoint")));
        }
    }
    let rows = fdfo_rows(&pairs, ctx)?;
    let summary = optimize_rows(net, optimizer, ctx, &rows, (Domain::Shuffle, epoch))?;
    let rewards: Vec<f64> = pairs.iter().flat_map(|p| [p.reward, p.reward_hat]).collect();
    let abs_dr: Vec<f64> = pairs.iter().map(|p| p.delta_r.abs()).collect();
    let rms_dx = pairs.iter().map(|p| rms_norm(&p.delta_x)).collect::<Result<Vec<_>>>()?;
    Ok(EpochMetrics::from_rollouts(
        epoch,
        &rewards,
        mean(&abs_dr),
        mean(&rms_dx),
        &summary,
        model_eval_count(net, ctx.config, rewards.len(), rows.len()),
        rewards.len() as u64,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Fdfo,
    Baseline,
}

/// Where `train` writes its artifacts.
#[derive(Clone, Debug)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub config_hash: [u8; 32],
    pub meta: String,
}

impl OutputSpec {
    fn checkpoint(&self, net: &VelocityNet, optimizer: &AdamW, epoch: u64) -> Result<()> {
        let ck = Checkpoint {
            net: net.clone(),
            optimizer: Some(optimizer.clone()),
            config_hash: self.config_hash,
            epoch,
            meta: self.meta.clone(),
        };
        ck.save(&self.dir.join(format!("epoch_{epoch}.ckpt")))
    }

    fn metrics(&self, rows: &[EpochMetrics]) -> Result<()> {
        let path = self.dir.join("metrics.csv");
        std::fs::write(&path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: VelocityNet,
    pub optimizer: AdamW,
    pub metrics: Vec<EpochMetrics>,
}

/// Runs `config.epochs` epochs of `method` from `init`, stopping early once
/// `stop` returns true for an epoch's metrics.
pub fn train(
    init: &VelocityNet,
    ctx: &TrainContext,
    method: Method,
    out: Option<&OutputSpec>,
    stop: &dyn Fn(&EpochMetrics) -> bool,
) -> Result<TrainOutcome> {
    let config = ctx.config;
    config.validate()?;
    ctx.reward.validate()?;
    if init.arch() != ctx.base.arch() {
        return Err(Error::Config("base and initial networks differ in architecture".into()));
    }
    if config.ablations.reward_gradient && !ctx.reward.is_differentiable() {
        return Err(Error::Config("reward_gradient ablation needs a differentiable reward".into()));
    }
    if method == Method::Baseline && (2 * config.pairs_per_epoch) % config.group_size != 0 {
        return Err(Error::Config(format!(
            "group_size {} must divide the {} rollouts per epoch",
            config.group_size,
            2 * config.pairs_per_epoch
        )));
    }
    if let Some(out) = out {
        std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    }
    let mut net = init.clone();
    let mut optimizer = AdamW::new(config.optimizer, net.n_params())?;
    let mut metrics: Vec<EpochMetrics> = Vec::new();
    if let Some(out) = out {
        out.metrics(&metrics)?;
        if config.epochs == 0 {
            out.checkpoint(&net, &optimizer, 0)?;
        }
    }
    let start = Instant::now();
    for e in 1..=config.epochs as u64 {
        let mut m = match method {
            Method::Fdfo => fdfo_epoch(&mut net, &mut optimizer, ctx, e)?,
            Method::Baseline => baseline_grpo_epoch(&mut net, &mut optimizer, ctx, e)?,
        };
        let last = e == config.epochs as u64;
        let prev = metrics.last();
        m.eval_reward = if (e - 1) % config.eval_every as u64 == 0 || last {
            eval_reward(&net, config.cfg_scale, ctx.reward, &config.eval, ctx.seed)?
        } else {
            prev.map_or(f64::NAN, |p| p.eval_reward)
        };
        m.diversity = if (e - 1) % config.diversity_every as u64 == 0 || last {
            eval_diversity(&net, config.cfg_scale, &config.eval, ctx.seed)?
        } else {
            prev.map_or(f64::NAN, |p| p.diversity)
        };
        if config.record_wall_time {
            m.wall_s = start.elapsed().as_secs_f64();
        }
        let done = stop(&m);
        metrics.push(m);
        if let Some(out) = out {
            out.metrics(&metrics)?;
            if e % config.checkpoint_every as u64 == 0 || last || done {
                out.checkpoint(&net, &optimizer, e)?;
            }
        }
        if done {
            break;
        }
    }
    Ok(TrainOutcome { net, optimizer, metrics })
}
