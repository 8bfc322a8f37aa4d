//! Deterministic evaluation of a velocity network on fixed noise sets.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{mean, sq_dist, std_dev, Mat};
use crate::rewards::CombinedReward;
use crate::rng::{self, Domain};
use crate::sampler::TimeGrid;
use crate::velocity::{ConditionId, GuidedNet, VelocityNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub samples_per_condition: usize,
    pub steps: usize,
    /// Samples per condition entering the diversity statistic.
    pub diversity_samples: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            samples_per_condition: 64,
            steps: 40,
            diversity_samples: 64,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_condition == 0 || self.steps == 0 || self.diversity_samples < 2 {
            return Err(Error::Config(format!("invalid eval settings {self:?}")));
        }
        Ok(())
    }
}

/// Euler solve of many samples at once. Row `r` of the result is the
/// endpoint `euler_sample` produces for `(eps.row(r), cs[r])`.
pub fn euler_endpoints(field: &GuidedNet, eps: &Mat, cs: &[ConditionId], grid: &TimeGrid) -> Result<Mat> {
    ensure_dim(eps.rows(), cs.len())?;
    ensure_dim(field.net.arch().dim, eps.cols())?;
    let mut x = eps.clone();
    let mut ts = vec![0.0; eps.rows()];
    for i in 0..grid.steps() {
        let (t, t_next) = (grid.t(i), grid.t(i + 1));
        ts.fill(t);
        let v = field.forward_batch(&x, &ts, cs);
        let dt = t_next - t;
        for (xk, vk) in x.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *xk += dt * vk;
        }
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("evaluation endpoints".into()));
    }
    Ok(x)
}

/// Fixed evaluation noise: `n` draws per condition from the stream
/// `(seed, domain, condition, k)`.
pub fn eval_noise(dim: usize, n_conditions: usize, n: usize, seed: u64, domain: Domain) -> (Mat, Vec<ConditionId>) {
    let mut eps = Mat::zeros(n * n_conditions, dim);
    let mut cs = Vec::with_capacity(n * n_conditions);
    for c in 0..n_conditions {
        for k in 0..n {
            let row = c * n + k;
            let mut r = rng::stream(seed, domain, c as u64, k as u64);
            eps.row_mut(row).copy_from_slice(&rng::normal_vec(&mut r, dim));
            cs.push(ConditionId(c));
        }
    }
    (eps, cs)
}

/// Mean pairwise Euclidean distance within each condition, averaged over
/// conditions. `samples` holds `n` consecutive rows per condition.
pub fn diversity(samples: &Mat, n: usize) -> f64 {
    if n < 2 || samples.rows() == 0 {
        return 0.0;
    }
    let groups = samples.rows() / n;
    let mut per = Vec::with_capacity(groups);
    for g in 0..groups {
        let mut total = 0.0;
        for a in 0..n {
            for b in a + 1..n {
                total += sq_dist(samples.row(g * n + a), samples.row(g * n + b)).sqrt();
            }
        }
        per.push(total / (n * (n - 1) / 2) as f64);
    }
    mean(&per)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mean_reward: f64,
    pub reward_std_err: f64,
    /// `(variant name, weight, mean)` per reward term.
    pub per_term: Vec<(String, f64, f64)>,
    /// Fraction of samples within `3 * mode_std` of their condition's mode.
    pub alignment: Option<Vec<f64>>,
    pub diversity: f64,
}

/// Mean reward of Euler samples drawn from fixed noise.
pub fn eval_reward(net: &VelocityNet, cfg_scale: Option<f64>, reward: &CombinedReward, settings: &EvalSettings, seed: u64) -> Result<f64> {
    let arch = net.arch();
    let (eps, cs) = eval_noise(arch.dim, arch.n_conditions, settings.samples_per_condition, seed, Domain::Eval);
    let grid = TimeGrid::uniform(settings.steps)?;
    let ys = euler_endpoints(&GuidedNet::new(net, cfg_scale), &eps, &cs, &grid)?;
    let rewards = (0..ys.rows()).map(|r| reward.combine(ys.row(r), cs[r])).collect::<Result<Vec<_>>>()?;
    Ok(mean(&rewards))
}

/// Diversity of Euler samples drawn from fixed noise.
pub fn eval_diversity(net: &VelocityNet, cfg_scale: Option<f64>, settings: &EvalSettings, seed: u64) -> Result<f64> {
    let arch = net.arch();
    let n = settings.diversity_samples;
    let (eps, cs) = eval_noise(arch.dim, arch.n_conditions, n, seed, Domain::Diversity);
    let grid = TimeGrid::uniform(settings.steps)?;
    let ys = euler_endpoints(&GuidedNet::new(net, cfg_scale), &eps, &cs, &grid)?;
    Ok(diversity(&ys, n))
}

/// Full report: rewards per term, mode alignment when `modes` is given,
/// and diversity.
pub fn evaluate(
    net: &VelocityNet,
    cfg_scale: Option<f64>,
    reward: &CombinedReward,
    modes: Option<(&[Vec<f64>], f64)>,
    settings: &EvalSettings,
    seed: u64,
) -> Result<EvalReport> {
    settings.validate()?;
    reward.validate()?;
    let arch = net.arch();
    let n = settings.samples_per_condition;
    let (eps, cs) = eval_noise(arch.dim, arch.n_conditions, n, seed, Domain::Eval);
    let grid = TimeGrid::uniform(settings.steps)?;
    let ys = euler_endpoints(&GuidedNet::new(net, cfg_scale), &eps, &cs, &grid)?;
    let rewards = (0..ys.rows()).map(|r| reward.combine(ys.row(r), cs[r])).collect::<Result<Vec<_>>>()?;
    let per_term = reward
        .terms
        .iter()
        .map(|term| {
            let vals = (0..ys.rows()).map(|r| term.spec.reward(ys.row(r), cs[r])).collect::<Result<Vec<_>>>()?;
            Ok((term.spec.name().to_string(), term.weight, mean(&vals)))
        })
        .collect::<Result<Vec<_>>>()?;
    let alignment = match modes {
        Some((centers, std)) => {
            ensure_dim(arch.n_conditions, centers.len())?;
            Some(
                (0..arch.n_conditions)
                    .map(|c| {
                        let hits = (0..n)
                            .filter(|k| sq_dist(ys.row(c * n + k), &centers[c]).sqrt() < 3.0 * std)
                            .count();
                        hits as f64 / n as f64
                    })
                    .collect(),
            )
        }
        None => None,
    };
    Ok(EvalReport {
        samples: ys.rows(),
        mean_reward: mean(&rewards),
        reward_std_err: std_dev(&rewards) / (rewards.len() as f64).sqrt(),
        per_term,
        alignment,
        diversity: eval_diversity(net, cfg_scale, settings, seed)?,
    })
}

impl EvalReport {
    pub fn mean_alignment(&self) -> Option<f64> {
        self.alignment.as_ref().map(|a| mean(a))
    }

    /// `metric,condition,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,condition,value\n");
        s.push_str(&format!("samples,all,{}\n", self.samples));
        s.push_str(&format!("mean_reward,all,{}\n", self.mean_reward));
        s.push_str(&format!("reward_std_err,all,{}\n", self.reward_std_err));
        for (name, weight, value) in &self.per_term {
            s.push_str(&format!("reward_{name}_w{weight},all,{value}\n"));
        }
        if let Some(a) = &self.alignment {
            for (c, v) in a.iter().enumerate() {
                s.push_str(&format!("alignment,{c},{v}\n"));
            }
            s.push_str(&format!("alignment,all,{}\n", mean(a)));
        }
        s.push_str(&format!("diversity,all,{}\n", self.diversity));
        s
    }
}
