//! Executable checks of the method's mathematical claims: analytic Gaussian
//! flows, the paired-difference gradient identity, ascent of the prototype
//! update, Jacobian definiteness and sampler marginals.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::numerics::{dot, mean, sq_norm, std_dev, sub, Mat, Tape};
use crate::rewards::CombinedReward;
use crate::rng::{self, Domain};
use crate::sampler::{
    euler_sample, noise_level, overshoot_time, schedule_uniform, stochastic_sample, stochastic_sample_with, Mixer,
    StochasticitySchedule, TimeGrid,
};
use crate::velocity::{Arch, ConditionId, GuidedNet, VelocityField, VelocityNet};

/// Monte-Carlo work is split into blocks of this many samples, each with its
/// own stream, and reduced in block order.
const BLOCK: usize = 10_000;

/// `E[eps - x0 | x_t = x]` for `x0 ~ N(0, sigma_d^2 I)`.
pub fn analytic_gaussian_velocity(x: &[f64], t: f64, sigma_d: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
    }
    let s2 = sigma_d * sigma_d;
    let k = (t - (1.0 - t) * s2) / ((1.0 - t) * (1.0 - t) * s2 + t * t);
    Ok(x.iter().map(|v| k * v).collect())
}

/// Marginal variance `(1 - t)^2 sigma_d^2 + t^2` of the Gaussian flow.
pub fn gaussian_marginal_variance(t: f64, sigma_d: f64) -> f64 {
    (1.0 - t) * (1.0 - t) * sigma_d * sigma_d + t * t
}

/// The exact velocity of Gaussian data, usable as a sampler field.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVelocity {
    pub dim: usize,
    pub sigma_d: f64,
}

impl VelocityField for GaussianVelocity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], t: f64, _c: ConditionId) -> Vec<f64> {
        analytic_gaussian_velocity(x, t, self.sigma_d).expect("sampler times lie in [0, 1]")
    }
}

/// Reward with a closed-form smoothed gradient.
#[derive(Clone, Debug, PartialEq)]
pub enum OracleReward {
    /// `b . y`
    Linear(Vec<f64>),
    /// `y' Q y + b . y` with symmetric `Q`.
    Quadratic { q: Mat, b: Vec<f64> },
    /// A constant, whose paired differences vanish.
    Constant(f64),
}

impl OracleReward {
    pub fn value(&self, y: &[f64]) -> f64 {
        match self {
            OracleReward::Linear(b) => dot(b, y),
            OracleReward::Quadratic { q, b } => dot(y, &q.matvec(y).expect("square")) + dot(b, y),
            OracleReward::Constant(c) => *c,
        }
    }

    pub fn gradient(&self, y: &[f64]) -> Vec<f64> {
        match self {
            OracleReward::Linear(b) => b.clone(),
            OracleReward::Quadratic { q, b } => q.matvec(y).expect("square").iter().zip(b).map(|(a, c)| 2.0 * a + c).collect(),
            OracleReward::Constant(_) => vec![0.0; y.len()],
        }
    }
}

/// A linear flow `f(x) = A x` with a reward on its outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFlowOracle {
    pub a: Mat,
    pub reward: OracleReward,
    pub sigma_c: f64,
}

impl LinearFlowOracle {
    /// `A = [[2, 1], [0, 1]]`, `R(y) = y_1`, `sigma_c = 0.1`.
    pub fn reference() -> Self {
        LinearFlowOracle {
            a: Mat::from_rows(&[vec![2.0, 1.0], vec![0.0, 1.0]]).expect("rectangular"),
            reward: OracleReward::Linear(vec![1.0, 0.0]),
            sigma_c: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_dim(self.a.rows(), self.a.cols())?;
        ensure_finite(self.a.as_slice(), "oracle matrix")?;
        if !(self.sigma_c > 0.0 && self.sigma_c.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_c must be positive, got {}", self.sigma_c)));
        }
        let d = self.a.rows();
        match &self.reward {
            OracleReward::Linear(b) => ensure_dim(d, b.len()),
            OracleReward::Quadratic { q, b } => {
                ensure_dim(d, b.len())?;
                ensure_dim(d, q.rows())?;
                ensure_dim(d, q.cols())
            }
            OracleReward::Constant(_) => Ok(()),
        }
    }

    /// `sigma_c^2 A A' grad R~(A x)`.
    pub fn analytic(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.a.matvec(x)?;
        let g = self.reward.gradient(&y);
        let atg = self.a.transpose().matvec(&g)?;
        let s2 = self.sigma_c * self.sigma_c;
        Ok(self.a.matvec(&atg)?.iter().map(|v| s2 * v).collect())
    }
}

/// A map from an intermediate state to the final sample.
pub trait FlowMap: Sync {
    fn dim(&self) -> usize;
    fn complete(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl FlowMap for LinearFlowOracle {
    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn complete(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.a.matvec(x)
    }
}

/// Euler completion of a network trajectory from step `j` of `grid`.
#[derive(Clone, Copy, Debug)]
pub struct NetFlow<'a> {
    pub field: GuidedNet<'a>,
    pub grid: &'a TimeGrid,
    pub start: usize,
    pub condition: ConditionId,
}

impl FlowMap for NetFlow<'_> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn complete(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut x = x.to_vec();
        for i in self.start..self.grid.steps() {
            let (t, t_next) = (self.grid.t(i), self.grid.t(i + 1));
            let v = self.field.eval(&x, t, self.condition);
            let dt = t_next - t;
            for (xk, vk) in x.iter_mut().zip(&v) {
                *xk += dt * vk;
            }
        }
        ensure_finite(&x, "flow completion")?;
        Ok(x)
    }
}

/// Mean, standard error and count of a scalar or vector Monte-Carlo run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SteinReport {
    pub estimate: Vec<f64>,
    pub std_err: Vec<f64>,
    pub analytic: Vec<f64>,
    /// `||estimate - analytic|| / ||analytic||`.
    pub relative_error: f64,
    pub samples: usize,
}

/// Per-block sums of `z` and `z^2` for a vector statistic.
fn mc_vector<F>(n: usize, dim: usize, seed: u64, domain: Domain, tag: u64, sample: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&mut rng::Rng) -> Result<Vec<f64>> + Sync,
{
    let blocks = n.div_ceil(BLOCK);
    let parts = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, domain, tag, b as u64);
            let count = BLOCK.min(n - b * BLOCK);
            let mut s = vec![0.0; dim];
            let mut s2 = vec![0.0; dim];
            for _ in 0..count {
                let z = sample(&mut r)?;
                for k in 0..dim {
                    s[k] += z[k];
                    s2[k] += z[k] * z[k];
                }
            }
            Ok((s, s2))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut s = vec![0.0; dim];
    let mut s2 = vec![0.0; dim];
    for (a, b) in parts {
        for k in 0..dim {
            s[k] += a[k];
            s2[k] += b[k];
        }
    }
    let nf = n as f64;
    let means: Vec<f64> = s.iter().map(|v| v / nf).collect();
    let errs = means
        .iter()
        .zip(&s2)
        .map(|(m, q)| ((q / nf - m * m).max(0.0) * nf / (nf - 1.0) / nf).sqrt())
        .collect();
    Ok((means, errs))
}

/// Monte-Carlo estimate of `E[(R(A(x + e)) - base) (A(x + e) - A x)]` for
/// `e ~ N(0, sigma_c^2 I)`, where `base` is `R(A x)` unless overridden.
pub fn stein_estimate(
    oracle: &LinearFlowOracle,
    x: &[f64],
    base: Option<f64>,
    n: usize,
    seed: u64,
    tag: u64,
) -> Result<SteinReport> {
    oracle.validate()?;
    ensure_dim(oracle.dim(), x.len())?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    let d = oracle.dim();
    let y = oracle.complete(x)?;
    let r0 = base.unwrap_or_else(|| oracle.reward.value(&y));
    let (estimate, std_err) = mc_vector(n, d, seed, Domain::Verify, tag, |r| {
        let xp: Vec<f64> = x.iter().map(|v| v + oracle.sigma_c * rng::normal(r)).collect();
        let yp = oracle.complete(&xp)?;
        let dr = oracle.reward.value(&yp) - r0;
        Ok(sub(&yp, &y).iter().map(|v| dr * v).collect())
    })?;
    let analytic = oracle.analytic(x)?;
    let denom = sq_norm(&analytic).sqrt();
    let diff = sq_norm(&sub(&estimate, &analytic)).sqrt();
    Ok(SteinReport {
        relative_error: if denom > 0.0 { diff / denom } else { diff },
        estimate,
        std_err,
        analytic,
        samples: n,
    })
}

/// [`stein_estimate`] at the origin with at least `10^4` samples.
pub fn stein_check(oracle: &LinearFlowOracle, n: usize, seed: u64) -> Result<SteinReport> {
    if n < 10_000 {
        return Err(Error::InvalidArgument(format!("stein check needs n >= 10^4, got {n}")));
    }
    stein_estimate(oracle, &vec![0.0; oracle.dim()], None, n, seed, 0)
}

/// Root-mean-square relative error over `replicates` independent runs at
/// each sample count.
pub fn stein_error_curve(oracle: &LinearFlowOracle, counts: &[usize], replicates: usize, seed: u64) -> Result<Vec<f64>> {
    let x = vec![0.0; oracle.dim()];
    counts
        .iter()
        .enumerate()
        .map(|(ci, &n)| {
            let errs = (0..replicates)
                .map(|r| stein_estimate(oracle, &x, None, n, seed, (ci * replicates + r + 1) as u64).map(|s| s.relative_error))
                .collect::<Result<Vec<_>>>()?;
            Ok((errs.iter().map(|e| e * e).sum::<f64>() / replicates as f64).sqrt())
        })
        .collect()
}

/// `J v` by central differences with step `h` along the unit direction.
pub fn jvp(flow: &dyn FlowMap, x: &[f64], v: &[f64], h: f64) -> Result<Vec<f64>> {
    let norm = sq_norm(v).sqrt();
    if norm == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let plus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b / norm).collect();
    let minus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b / norm).collect();
    let fp = flow.complete(&plus)?;
    let fm = flow.complete(&minus)?;
    Ok(fp.iter().zip(&fm).map(|(a, b)| norm * (a - b) / (2.0 * h)).collect())
}

/// Full finite-difference Jacobian, one column per coordinate.
pub fn jacobian(flow: &dyn FlowMap, x: &[f64], h: f64) -> Result<DMatrix<f64>> {
    let d = flow.dim();
    ensure_dim(d, x.len())?;
    let mut j = DMatrix::zeros(d, d);
    for k in 0..d {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        let col = jvp(flow, x, &e, h)?;
        for (r, v) in col.iter().enumerate() {
            j[(r, k)] = *v;
        }
    }
    Ok(j)
}

/// Minimum eigenvalue of the symmetric part of the flow Jacobian at `x`.
pub fn jacobian_psd_stat(flow: &dyn FlowMap, x: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let j = jacobian(flow, x, h)?;
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("flow Jacobian".into()));
    }
    let sym = (&j + j.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AscentReport {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl AscentReport {
    /// Mean in units of its standard error.
    pub fn z(&self) -> f64 {
        self.mean / self.std_err
    }
}

/// Ascent statistic `grad R(x_T)' J (dR dx)` of one perturbation of `x`.
fn ascent_sample(
    flow: &dyn FlowMap,
    reward: &dyn Fn(&[f64]) -> f64,
    grad: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    sigma_c: f64,
    h: f64,
    r: &mut rng::Rng,
) -> Result<f64> {
    let y = flow.complete(x)?;
    let xp: Vec<f64> = x.iter().map(|v| v + sigma_c * rng::normal(r)).collect();
    let yp = flow.complete(&xp)?;
    let dr = reward(&yp) - reward(&y);
    let g_tilde: Vec<f64> = sub(&yp, &y).iter().map(|v| dr * v).collect();
    Ok(dot(&grad(&y)?, &jvp(flow, x, &g_tilde, h)?))
}

fn ascent_summary(values: &[f64]) -> AscentReport {
    AscentReport {
        mean: mean(values),
        std_err: std_dev(values) * (values.len() as f64 / (values.len() as f64 - 1.0)).sqrt() / (values.len() as f64).sqrt(),
        samples: values.len(),
    }
}

/// Prototype statistic on a linear flow at `x`.
pub fn prototype_oracle(oracle: &LinearFlowOracle, x: &[f64], n: usize, seed: u64) -> Result<AscentReport> {
    oracle.validate()?;
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 perturbations".into()));
    }
    let reward = |y: &[f64]| oracle.reward.value(y);
    let grad = |y: &[f64]| Ok(oracle.reward.gradient(y));
    let values = (0..n as u64)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, Domain::Verify, 1 << 32, k);
            ascent_sample(oracle, &reward, &grad, x, oracle.sigma_c, 1e-4, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ascent_summary(&values))
}

/// Prototype statistic on a network: each sample draws a condition and an
/// initial noise, runs Euler to step `j`, perturbs the state by
/// `N(0, sigma_c^2 I)` and completes both copies deterministically.
#[allow(clippy::too_many_arguments)]
pub fn prototype_fdfo_step(
    net: &VelocityNet,
    cfg_scale: Option<f64>,
    reward: &CombinedReward,
    steps: usize,
    j: usize,
    sigma_c: f64,
    n: usize,
    seed: u64,
) -> Result<AscentReport> {
    if !reward.is_differentiable() {
        return Err(Error::Unsupported("prototype step needs a differentiable reward".into()));
    }
    if j >= steps || n < 2 {
        return Err(Error::InvalidArgument(format!("need j < T and n >= 2 (j={j}, T={steps}, n={n})")));
    }
    let grid = TimeGrid::uniform(steps)?;
    let field = GuidedNet::new(net, cfg_scale);
    let arch = net.arch();
    let values = (0..n as u64)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, Domain::Verify, 2 << 32, k);
            let c = ConditionId(r.random_range(0..arch.n_conditions));
            let eps = rng::normal_vec(&mut r, arch.dim);
            let traj = euler_sample(&field, &eps, c, &grid)?;
            let flow = NetFlow {
                field,
                grid: &grid,
                start: j,
                condition: c,
            };
            let value = |y: &[f64]| reward.combine(y, c).unwrap_or(f64::NAN);
            let grad = |y: &[f64]| reward.gradient(y);
            ascent_sample(&flow, &value, &grad, traj.state(j), sigma_c, 1e-4, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    ensure_finite(&values, "ascent statistics")?;
    Ok(ascent_summary(&values))
}

/// Per-step moment comparison of a stochastic run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginalReport {
    pub samples: usize,
    pub times: Vec<f64>,
    pub variance: Vec<f64>,
    /// `(1 - t)^2 sigma_d^2 + t^2`.
    pub target_variance: Vec<f64>,
    /// Variance the sampler's own step algebra yields with a variance-matched
    /// injection, propagated exactly from the initial variance.
    pub discrete_variance: Vec<f64>,
    /// Largest |z| of the means and variances against the continuous target.
    pub max_z: f64,
    /// Largest |z| of the variances against the discrete reference.
    pub max_z_discrete: f64,
}

/// Runs `n` one-dimensional stochastic trajectories of the exact Gaussian
/// field and compares each state's mean and variance with theory.
pub fn marginal_check(
    sigma_d: f64,
    schedule: &StochasticitySchedule,
    grid: &TimeGrid,
    n: usize,
    mixer: Mixer,
    seed: u64,
) -> Result<MarginalReport> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 trajectories".into()));
    }
    ensure_dim(grid.steps(), schedule.len())?;
    let field = GaussianVelocity { dim: 1, sigma_d };
    let steps = grid.steps();
    let blocks = n.div_ceil(BLOCK);
    let parts = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut s = vec![0.0; steps + 1];
            let mut s2 = vec![0.0; steps + 1];
            for k in b * BLOCK..(n.min((b + 1) * BLOCK)) {
                let mut r = rng::stream(seed, Domain::Verify, 3 << 32, k as u64);
                let eps = rng::normal_vec(&mut r, 1);
                let traj = stochastic_sample_with(&field, &eps, ConditionId(0), grid, schedule, &mut r, mixer)?;
                for i in 0..=steps {
                    let v = traj.state(i)[0];
                    s[i] += v;
                    s2[i] += v * v;
                }
            }
            Ok((s, s2))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut s = vec![0.0; steps + 1];
    let mut s2 = vec![0.0; steps + 1];
    for (a, b) in parts {
        for i in 0..=steps {
            s[i] += a[i];
            s2[i] += b[i];
        }
    }
    let nf = n as f64;
    let mut variance = Vec::with_capacity(steps + 1);
    let mut target_variance = Vec::with_capacity(steps + 1);
    let mut discrete_variance = Vec::with_capacity(steps + 1);
    let mut max_z: f64 = 0.0;
    let mut max_z_discrete: f64 = 0.0;
    let mut propagated = 1.0;
    for i in 0..=steps {
        let t = grid.t(i);
        if i > 0 {
            let (t_prev, gamma) = (grid.t(i - 1), if t == 0.0 { 0.0 } else { schedule.gammas[i - 1] });
            let t_tilde = overshoot_time(t, gamma)?;
            let k = analytic_gaussian_velocity(&[1.0], t_prev, sigma_d)?[0];
            let gain = 1.0 + (t_tilde - t_prev) * k;
            let shrink = gamma * t_tilde + 1.0;
            propagated = (gain * gain * propagated + t_tilde * t_tilde * (gamma * gamma + 2.0 * gamma)) / (shrink * shrink);
        }
        let m = s[i] / nf;
        let var = (s2[i] / nf - m * m) * nf / (nf - 1.0);
        let target = gaussian_marginal_variance(t, sigma_d);
        let se_var = |v: f64| v * (2.0 / (nf - 1.0)).sqrt();
        let z_mean = m / (target / nf).sqrt();
        let z_var = (var - target) / se_var(target);
        max_z = max_z.max(z_mean.abs()).max(z_var.abs());
        max_z_discrete = max_z_discrete.max(((var - propagated) / se_var(propagated)).abs());
        variance.push(var);
        target_variance.push(target);
        discrete_variance.push(propagated);
    }
    Ok(MarginalReport {
        samples: n,
        times: grid.times().to_vec(),
        variance,
        target_variance,
        discrete_variance,
        max_z,
        max_z_discrete,
    })
}

/// Largest `|sigma(t~) (1 + gamma) - sigma(t)|` over random `(t, gamma)`.
pub fn overshoot_check(n: usize, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, Domain::Verify, 4 << 32, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let t = 0.99 * r.random::<f64>();
        let gamma = 5.0 * r.random::<f64>();
        let t_tilde = overshoot_time(t, gamma)?;
        worst = worst.max((noise_level(t_tilde) * (1.0 + gamma) - noise_level(t)).abs());
    }
    Ok(worst)
}

fn random_net(r: &mut rng::Rng) -> Result<VelocityNet> {
    let dim = r.random_range(1..=3);
    let depth = r.random_range(1..=2);
    let hidden = (0..depth).map(|_| r.random_range(2..=6)).collect();
    let n_conditions = r.random_range(1..=3);
    let mut net = VelocityNet::new(Arch::new(dim, hidden, n_conditions)?, r)?;
    for p in net.params_mut() {
        *p = 0.7 * rng::normal(r);
    }
    Ok(net)
}

/// Number of cases where a stochastic run with zero stochasticity differs
/// from the Euler solver in any bit.
pub fn sampler_degeneracy(n: usize, seed: u64) -> Result<usize> {
    let mut mismatches = 0;
    for k in 0..n as u64 {
        let mut r = rng::stream(seed, Domain::Verify, 5 << 32, k);
        let net = random_net(&mut r)?;
        let arch = net.arch().clone();
        let steps = r.random_range(1..=40);
        let grid = TimeGrid::uniform(steps)?;
        let eps = rng::normal_vec(&mut r, arch.dim);
        let c = ConditionId(r.random_range(0..=arch.n_conditions));
        let euler = euler_sample(&net, &eps, c, &grid)?;
        let stoch = stochastic_sample(&net, &eps, c, &grid, &schedule_uniform(steps, 0.0)?, &mut r)?;
        if euler.states != stoch.states || euler.v_ref != stoch.v_ref {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

/// Largest relative error `||g_fd - g_ad|| / ||g_ad||` between tape
/// gradients and central differences of a random scalar loss over random
/// networks and inputs.
pub fn gradcheck(n: usize, seed: u64) -> Result<f64> {
    (0..n as u64)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, Domain::Verify, 6 << 32, k);
            let net = random_net(&mut r)?;
            let arch = net.arch().clone();
            let rows = r.random_range(1..=5);
            let xs = Mat::from_vec(rows, arch.dim, rng::normal_vec(&mut r, rows * arch.dim))?;
            let ts: Vec<f64> = (0..rows).map(|_| r.random::<f64>()).collect();
            let cs: Vec<ConditionId> = (0..rows).map(|_| ConditionId(r.random_range(0..=arch.n_conditions))).collect();
            let weights = Mat::from_vec(rows, arch.dim, rng::normal_vec(&mut r, rows * arch.dim))?;
            let loss = |net: &VelocityNet| -> f64 {
                let v = net.forward_batch(&xs, &ts, &cs);
                v.as_slice().iter().zip(weights.as_slice()).map(|(a, w)| w * a.tanh()).sum()
            };
            let mut tape = Tape::new(net.n_params());
            let v = net.on_tape(&mut tape, &xs, &ts, &cs)?;
            let th = tape.tanh(v);
            let w = tape.constant(weights.clone());
            let prod = tape.mul(th, w)?;
            let out = tape.sum(prod);
            let analytic = tape.backward(out, 1.0)?.into_params();
            let h = 1e-6;
            let mut probe = net.clone();
            let mut fd = vec![0.0; net.n_params()];
            for (i, g) in fd.iter_mut().enumerate() {
                let p0 = probe.params()[i];
                probe.params_mut()[i] = p0 + h;
                let fp = loss(&probe);
                probe.params_mut()[i] = p0 - h;
                let fm = loss(&probe);
                probe.params_mut()[i] = p0;
                *g = (fp - fm) / (2.0 * h);
            }
            let denom = sq_norm(&analytic).sqrt().max(1e-12);
            Ok(sq_norm(&sub(&fd, &analytic)).sqrt() / denom)
        })
        .collect::<Result<Vec<f64>>>()
        .map(|errs| errs.into_iter().fold(0.0, f64::max))
}
