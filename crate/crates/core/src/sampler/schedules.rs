//! Stochasticity schedules and per-step gradient weights.

use serde::{Deserialize, Serialize};

use super::TimeGrid;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Logit-normal density; zero at and beyond the endpoints of (0, 1).
pub fn logit_normal_density(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("logit-normal sigma must be positive, got {sigma}")));
    }
    if !(x > 0.0 && x < 1.0) {
        return Ok(0.0);
    }
    let logit = (x / (1.0 - x)).ln();
    let z = (logit - mu) / sigma;
    Ok((-0.5 * z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * sigma * x * (1.0 - x)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntervalParams {
    pub mu_center: f64,
    pub sigma_center: f64,
    pub sigma_int: f64,
    pub w_int: f64,
}

impl Default for IntervalParams {
    fn default() -> Self {
        IntervalParams {
            mu_center: 1.3,
            sigma_center: 1.5,
            sigma_int: 0.25,
            w_int: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorParams {
    pub mu_logw: f64,
    pub sigma_logw: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        PriorParams {
            mu_logw: 0.1f64.ln(),
            sigma_logw: 1.0,
        }
    }
}

/// Which family a schedule was drawn from, with the random draw it used.
#[derive(Clone, Debug, PartialEq)]
pub enum ScheduleFamily {
    Uniform { gamma: f64 },
    Interval { params: IntervalParams, center: f64 },
    Prior { params: PriorParams, log_weight: f64 },
}

/// Per-step stochasticity `gamma_i`, one entry per solver step.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticitySchedule {
    pub gammas: Vec<f64>,
    pub family: ScheduleFamily,
}

impl StochasticitySchedule {
    pub fn len(&self) -> usize {
        self.gammas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gammas.is_empty()
    }

    pub fn is_deterministic(&self) -> bool {
        self.gammas.iter().all(|&g| g == 0.0)
    }
}

pub fn schedule_uniform(steps: usize, gamma: f64) -> Result<StochasticitySchedule> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("stochasticity must be >= 0, got {gamma}")));
    }
    Ok(StochasticitySchedule {
        gammas: vec![gamma; steps],
        family: ScheduleFamily::Uniform { gamma },
    })
}

/// Logit-normal bump over the step start times `t_0..t_{T-1}`, normalized
/// to sum to one. Falls back to a one-hot at the interior time closest to
/// the center if every density underflows.
pub fn interval_density_weights(grid: &TimeGrid, center: f64, sigma_int: f64) -> Result<Vec<f64>> {
    let times = &grid.times()[..grid.steps()];
    let mut w = times
        .iter()
        .map(|&t| logit_normal_density(t, center, sigma_int))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = w.iter().sum();
    if total > 0.0 && total.is_finite() {
        w.iter_mut().for_each(|v| *v /= total);
        return Ok(w);
    }
    let logit_dist = |t: f64| ((t / (1.0 - t)).ln() - center).abs();
    let best = times
        .iter()
        .enumerate()
        .filter(|(_, &t)| t > 0.0 && t < 1.0)
        .min_by(|a, b| logit_dist(*a.1).total_cmp(&logit_dist(*b.1)))
        .map_or(0, |(i, _)| i);
    w.iter_mut().for_each(|v| *v = 0.0);
    w[best] = 1.0;
    Ok(w)
}

pub fn schedule_interval(grid: &TimeGrid, params: IntervalParams, rng: &mut Rng) -> Result<StochasticitySchedule> {
    let IntervalParams {
        mu_center,
        sigma_center,
        sigma_int,
        w_int,
    } = params;
    if !(sigma_center > 0.0 && sigma_int > 0.0) || ![mu_center, sigma_center, sigma_int, w_int].iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid interval schedule parameters {params:?}")));
    }
    if w_int < 0.0 {
        return Err(Error::InvalidArgument("interval strength must be >= 0".into()));
    }
    let center = mu_center + sigma_center * rng::normal(rng);
    let weights = interval_density_weights(grid, center, sigma_int)?;
    Ok(StochasticitySchedule {
        gammas: weights.iter().map(|&g| (w_int * g).exp_m1()).collect(),
        family: ScheduleFamily::Interval { params, center },
    })
}

/// Prior schedule for a given log-weight `W`: `gamma_0 = exp(exp(W)) - 1`.
pub fn prior_from_log_weight(steps: usize, params: PriorParams, log_weight: f64) -> StochasticitySchedule {
    let mut gammas = vec![0.0; steps];
    if let Some(g) = gammas.first_mut() {
        *g = log_weight.exp().exp_m1();
    }
    StochasticitySchedule {
        gammas,
        family: ScheduleFamily::Prior { params, log_weight },
    }
}

pub fn schedule_prior(steps: usize, params: PriorParams, rng: &mut Rng) -> Result<StochasticitySchedule> {
    if !(params.sigma_logw > 0.0) || !params.mu_logw.is_finite() || !params.sigma_logw.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid prior schedule parameters {params:?}")));
    }
    let w = params.mu_logw + params.sigma_logw * rng::normal(rng);
    Ok(prior_from_log_weight(steps, params, w))
}

/// Schedule family as it appears in configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Uniform { gamma: f64 },
    Interval(IntervalParams),
    Prior(PriorParams),
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::Uniform { gamma: 0.0025 }
    }
}

impl ScheduleConfig {
    pub fn draw(&self, grid: &TimeGrid, rng: &mut Rng) -> Result<StochasticitySchedule> {
        match *self {
            ScheduleConfig::Uniform { gamma } => schedule_uniform(grid.steps(), gamma),
            ScheduleConfig::Interval(p) => schedule_interval(grid, p, rng),
            ScheduleConfig::Prior(p) => schedule_prior(grid.steps(), p, rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let grid = TimeGrid::uniform(2)?;
        self.draw(&grid, &mut rng::stream(0, rng::Domain::Misc, 0, 0)).map(|_| ())
    }
}

/// Per-step weighting of training gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientWeighting {
    #[default]
    Uniform,
    LowNoise,
    HighNoise,
}

/// Weights for steps `0..T`, evaluated at the step start times and
/// normalized to sum to one.
pub fn gradient_weights(grid: &TimeGrid, mode: GradientWeighting) -> Vec<f64> {
    let steps = grid.steps();
    let mu = match mode {
        GradientWeighting::Uniform => return vec![1.0 / steps as f64; steps],
        GradientWeighting::LowNoise => -0.3,
        GradientWeighting::HighNoise => 0.3,
    };
    let mut w: Vec<f64> = grid.times()[..steps]
        .iter()
        .map(|&t| logit_normal_density(t, mu, 1.0).expect("unit sigma is valid"))
        .collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|v| *v /= total);
    } else {
        // Only t = 1 is on the grid; nothing to focus.
        w = vec![1.0 / steps as f64; steps];
    }
    w
}
