//! Euler and overshoot/renoise stochastic sampling of the flow ODE.
//!
//! Sampling integrates from `t = 1` (pure noise) down to `t = 0`. The
//! stochastic sampler steps the ODE past the target time to a lower noise
//! level and then mixes in fresh noise so the state lands on the marginal of
//! the target time.

mod schedules;

pub use schedules::{
    gradient_weights, interval_density_weights, logit_normal_density, prior_from_log_weight,
    schedule_interval, schedule_prior, schedule_uniform, GradientWeighting, IntervalParams,
    PriorParams, ScheduleConfig, ScheduleFamily, StochasticitySchedule,
};

use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::numerics::Mat;
use crate::rng::{self, Rng};
use crate::velocity::{ConditionId, VelocityField};

/// Strictly decreasing sampling times from exactly 1 to exactly 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        let mut times: Vec<f64> = (0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect();
        times[0] = 1.0;
        times[steps] = 0.0;
        Ok(TimeGrid { times })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 1.0 || *times.last().unwrap() != 0.0 {
            return Err(Error::InvalidArgument("time grid must run from 1 to 0".into()));
        }
        if times.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidArgument("time grid must be strictly decreasing".into()));
        }
        Ok(TimeGrid { times })
    }

    /// Number of solver steps `T`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }
}

/// Noise-to-signal ratio `sigma(t) = t / (1 - t)`.
pub fn noise_level(t: f64) -> f64 {
    t / (1.0 - t)
}

/// Signal scale `s(t) = 1 - t`.
pub fn signal_scale(t: f64) -> f64 {
    1.0 - t
}

/// Inverse of [`noise_level`].
pub fn time_of_noise_level(sigma: f64) -> f64 {
    sigma / (sigma + 1.0)
}

/// Time whose noise level is `sigma(t_next) / (1 + gamma)`.
pub fn overshoot_time(t_next: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t_next) || !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "overshoot needs t in [0, 1) and gamma >= 0, got t={t_next}, gamma={gamma}"
        )));
    }
    if gamma == 0.0 {
        return Ok(t_next);
    }
    if t_next == 1.0 {
        return Err(Error::InvalidArgument("overshoot from t = 1 has infinite noise level".into()));
    }
    Ok(t_next / (1.0 - gamma * t_next + gamma))
}

/// How the renoise step scales the fresh noise. Only `Exact` is a valid
/// sampler; the doubled variant exists as a fault-injection control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mixer {
    #[default]
    Exact,
    DoubledNoise,
}

fn mix(x_tilde: &[f64], t_tilde: f64, gamma: f64, noise: &[f64], mixer: Mixer) -> Vec<f64> {
    if gamma == 0.0 {
        return x_tilde.to_vec();
    }
    let mut coeff = t_tilde * (gamma * gamma + 2.0 * gamma).sqrt();
    if mixer == Mixer::DoubledNoise {
        coeff *= 2.0;
    }
    let denom = gamma * t_tilde + 1.0;
    x_tilde
        .iter()
        .zip(noise)
        .map(|(x, e)| (x + coeff * e) / denom)
        .collect()
}

/// Adds fresh noise to the overshoot state `x_tilde` (at `t_tilde`) so the
/// result sits at `t_next`: `(x~ + t~ sqrt(g^2 + 2g) e) / (g t~ + 1)`.
pub fn noise_mix(x_tilde: &[f64], t_tilde: f64, t_next: f64, gamma: f64, noise: &[f64]) -> Result<Vec<f64>> {
    ensure_dim(x_tilde.len(), noise.len())?;
    let expected = overshoot_time(t_next, gamma)?;
    if (expected - t_tilde).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "overshoot time {t_tilde} does not match t_next={t_next}, gamma={gamma}"
        )));
    }
    Ok(mix(x_tilde, t_tilde, gamma, noise, Mixer::Exact))
}

/// A recorded sampling path.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `T + 1` rows; row 0 is the initial noise.
    pub states: Mat,
    pub times: Vec<f64>,
    /// Velocity evaluated at `(states[i], times[i])`, `T` rows.
    pub v_ref: Mat,
    /// Fresh noise drawn at each step, `T` rows (zero rows for Euler).
    pub noises: Mat,
    /// Effective per-step stochasticity (0 on the final step).
    pub gammas: Vec<f64>,
    pub condition: ConditionId,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn endpoint(&self) -> &[f64] {
        self.states.row(self.steps())
    }

    pub fn state(&self, i: usize) -> &[f64] {
        self.states.row(i)
    }

    /// Overshoot time used on step `i`.
    pub fn overshoot(&self, i: usize) -> f64 {
        overshoot_time(self.times[i + 1], self.gammas[i]).unwrap_or(self.times[i + 1])
    }
}

fn check_start(field: &dyn VelocityField, eps: &[f64]) -> Result<()> {
    ensure_dim(field.dim(), eps.len())?;
    ensure_finite(eps, "initial noise")
}

/// Deterministic Euler solve: `x_{i+1} = x_i + (t_{i+1} - t_i) v(x_i; t_i, c)`.
pub fn euler_sample(field: &dyn VelocityField, eps: &[f64], c: ConditionId, grid: &TimeGrid) -> Result<Trajectory> {
    check_start(field, eps)?;
    let steps = grid.steps();
    let d = eps.len();
    let mut states = Mat::zeros(steps + 1, d);
    let mut v_ref = Mat::zeros(steps, d);
    states.row_mut(0).copy_from_slice(eps);
    let mut x = eps.to_vec();
    for i in 0..steps {
        let (t, t_next) = (grid.t(i), grid.t(i + 1));
        let v = field.eval(&x, t, c);
        let dt = t_next - t;
        for (xk, vk) in x.iter_mut().zip(&v) {
            *xk += dt * vk;
        }
        ensure_finite(&x, &format!("euler state at step {}", i + 1))?;
        v_ref.row_mut(i).copy_from_slice(&v);
        states.row_mut(i + 1).copy_from_slice(&x);
    }
    Ok(Trajectory {
        states,
        times: grid.times().to_vec(),
        v_ref,
        noises: Mat::zeros(steps, d),
        gammas: vec![0.0; steps],
        condition: c,
    })
}

/// Stochastic sampler: Euler step to the overshoot time, then renoise.
pub fn stochastic_sample(
    field: &dyn VelocityField,
    eps: &[f64],
    c: ConditionId,
    grid: &TimeGrid,
    schedule: &StochasticitySchedule,
    rng: &mut Rng,
) -> Result<Trajectory> {
    stochastic_sample_with(field, eps, c, grid, schedule, rng, Mixer::Exact)
}

pub fn stochastic_sample_with(
    field: &dyn VelocityField,
    eps: &[f64],
    c: ConditionId,
    grid: &TimeGrid,
    schedule: &StochasticitySchedule,
    rng: &mut Rng,
    mixer: Mixer,
) -> Result<Trajectory> {
    check_start(field, eps)?;
    let steps = grid.steps();
    ensure_dim(steps, schedule.len())?;
    let d = eps.len();
    let mut states = Mat::zeros(steps + 1, d);
    let mut v_ref = Mat::zeros(steps, d);
    let mut noises = Mat::zeros(steps, d);
    let mut gammas = Vec::with_capacity(steps);
    states.row_mut(0).copy_from_slice(eps);
    let mut x = eps.to_vec();
    for i in 0..steps {
        let (t, t_next) = (grid.t(i), grid.t(i + 1));
        // Noise injected at t = 0 is vacuous.
        let gamma = if t_next == 0.0 { 0.0 } else { schedule.gammas[i] };
        let t_tilde = overshoot_time(t_next, gamma)?;
        let v = field.eval(&x, t, c);
        let dt = t_tilde - t;
        for (xk, vk) in x.iter_mut().zip(&v) {
            *xk += dt * vk;
        }
        let noise = rng::normal_vec(rng, d);
        x = mix(&x, t_tilde, gamma, &noise, mixer);
        ensure_finite(&x, &format!("stochastic state at step {}", i + 1))?;
        v_ref.row_mut(i).copy_from_slice(&v);
        noises.row_mut(i).copy_from_slice(&noise);
        states.row_mut(i + 1).copy_from_slice(&x);
        gammas.push(gamma);
    }
    Ok(Trajectory {
        states,
        times: grid.times().to_vec(),
        v_ref,
        noises,
        gammas,
        condition: c,
    })
}

/// Debug dump: `step,t,x0..,v0..` with empty velocity cells on the last row.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let d = traj.states.cols();
    let mut out = String::from("step,t");
    for k in 0..d {
        out.push_str(&format!(",x{k}"));
    }
    for k in 0..d {
        out.push_str(&format!(",v{k}"));
    }
    out.push('\n');
    for i in 0..=traj.steps() {
        out.push_str(&format!("{i},{}", traj.times[i]));
        for v in traj.state(i) {
            out.push_str(&format!(",{v}"));
        }
        for k in 0..d {
            if i < traj.steps() {
                out.push_str(&format!(",{}", traj.v_ref.get(i, k)));
            } else {
                out.push(',');
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mean;
    use crate::rng::Domain;
    use crate::velocity::{Arch, VelocityNet, ZeroVelocity};
    use proptest::prelude::*;

    fn random_net(seed: u64) -> VelocityNet {
        let arch = Arch::new(2, vec![8, 8], 2).unwrap();
        let mut r = rng::stream(seed, Domain::Init, 0, 0);
        let mut net = VelocityNet::new(arch, &mut r).unwrap();
        for p in net.params_mut() {
            *p += 0.2 * rng::normal(&mut r);
        }
        net
    }

    #[test]
    fn uniform_grid_has_exact_endpoints() {
        let g = TimeGrid::uniform(40).unwrap();
        assert_eq!(g.steps(), 40);
        assert_eq!(g.t(0), 1.0);
        assert_eq!(g.t(40), 0.0);
        assert!(g.times().windows(2).all(|w| w[1] < w[0]));
        assert!(TimeGrid::uniform(0).is_err());
        assert!(TimeGrid::from_times(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(TimeGrid::from_times(vec![0.9, 0.0]).is_err());
    }

    #[test]
    fn flow_schedules() {
        assert_eq!(signal_scale(0.0), 1.0);
        assert_eq!(signal_scale(1.0), 0.0);
        assert_eq!(noise_level(0.5), 1.0);
        assert!((time_of_noise_level(noise_level(0.3)) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn overshoot_examples() {
        assert_eq!(overshoot_time(0.37, 0.0).unwrap(), 0.37);
        let t = overshoot_time(0.5, 1.0).unwrap();
        assert!((t - 1.0 / 3.0).abs() < 1e-15);
        assert!((noise_level(t) - noise_level(0.5) / 2.0).abs() < 1e-15);
        assert_eq!(overshoot_time(0.0, 3.0).unwrap(), 0.0);
        assert!(overshoot_time(1.0, 0.5).is_err());
        assert_eq!(overshoot_time(1.0, 0.0).unwrap(), 1.0);
        assert!(overshoot_time(0.5, -0.1).is_err());
    }

    #[test]
    fn noise_mix_examples() {
        let x = [0.3, -1.2];
        let e = [0.7, 0.1];
        assert_eq!(noise_mix(&x, 0.4, 0.4, 0.0, &e).unwrap(), x.to_vec());
        let t_tilde = overshoot_time(0.5, 1.0).unwrap();
        let got = noise_mix(&x, t_tilde, 0.5, 1.0, &e).unwrap();
        for k in 0..2 {
            let expect = (x[k] + e[k] / 3f64.sqrt()) * 0.75;
            assert!((got[k] - expect).abs() < 1e-15);
        }
        assert!(noise_mix(&x, t_tilde, 0.5, 1.0, &[0.0]).is_err());
        assert!(noise_mix(&x, 0.45, 0.5, 1.0, &e).is_err());
    }

    #[test]
    fn noise_mix_lands_on_target_marginal() {
        // x~ = s(t~)(x0 + sigma(t~) z) with x0 fixed should become
        // s(t)(x0 + sigma(t) z') in distribution.
        let (t_next, gamma, x0) = (0.6, 0.7, 0.8);
        let t_tilde = overshoot_time(t_next, gamma).unwrap();
        let mut r = rng::stream(3, Domain::Misc, 0, 0);
        let n = 100_000;
        let out: Vec<f64> = (0..n)
            .map(|_| {
                let z = rng::normal(&mut r);
                let e = rng::normal(&mut r);
                let xt = signal_scale(t_tilde) * (x0 + noise_level(t_tilde) * z);
                noise_mix(&[xt], t_tilde, t_next, gamma, &[e]).unwrap()[0]
            })
            .collect();
        let m = mean(&out);
        let var = out.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n as f64 - 1.0);
        let target_mean = signal_scale(t_next) * x0;
        let target_var = (signal_scale(t_next) * noise_level(t_next)).powi(2);
        let se_mean = (target_var / n as f64).sqrt();
        let se_var = target_var * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((m - target_mean).abs() < 3.0 * se_mean, "mean {m} vs {target_mean}");
        assert!((var - target_var).abs() < 3.0 * se_var, "var {var} vs {target_var}");
    }

    #[test]
    fn zero_velocity_is_identity_flow() {
        let grid = TimeGrid::uniform(10).unwrap();
        let eps = [0.4, -2.0];
        let tr = euler_sample(&ZeroVelocity { dim: 2 }, &eps, ConditionId(0), &grid).unwrap();
        assert_eq!(tr.endpoint(), &eps);
        assert_eq!(tr.states.rows(), 11);
    }

    #[test]
    fn single_step_euler() {
        let net = random_net(1);
        let grid = TimeGrid::uniform(1).unwrap();
        let eps = [0.3, 0.9];
        let tr = euler_sample(&net, &eps, ConditionId(1), &grid).unwrap();
        let v = net.velocity(&eps, 1.0, ConditionId(1)).unwrap();
        assert_eq!(tr.endpoint(), &[eps[0] - v[0], eps[1] - v[1]]);
    }

    #[test]
    fn stochastic_sampling_is_seeded() {
        let net = random_net(2);
        let grid = TimeGrid::uniform(12).unwrap();
        let sched = schedule_uniform(12, 0.1).unwrap();
        let run = || {
            let mut r = rng::stream(5, Domain::Rollout, 0, 0);
            stochastic_sample(&net, &[0.1, 0.2], ConditionId(0), &grid, &sched, &mut r).unwrap()
        };
        assert_eq!(run(), run());
        assert_eq!(run().gammas[11], 0.0);
        assert_eq!(run().gammas[3], 0.1);
    }

    #[test]
    fn trajectory_csv_shape() {
        let grid = TimeGrid::uniform(3).unwrap();
        let tr = euler_sample(&ZeroVelocity { dim: 2 }, &[1.0, 2.0], ConditionId(0), &grid).unwrap();
        let csv = trajectory_csv(&tr);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,t,x0,x1,v0,v1");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "3,0,1,2,,");
    }

    proptest! {
        #[test]
        fn zero_schedule_matches_euler_bitwise(seed in 0u64..500, e0 in -3.0f64..3.0, e1 in -3.0f64..3.0, c in 0usize..3) {
            let net = random_net(seed);
            let grid = TimeGrid::uniform(7).unwrap();
            let sched = schedule_uniform(7, 0.0).unwrap();
            let mut r = rng::stream(seed, Domain::Rollout, 1, 0);
            let a = stochastic_sample(&net, &[e0, e1], ConditionId(c), &grid, &sched, &mut r).unwrap();
            let b = euler_sample(&net, &[e0, e1], ConditionId(c), &grid).unwrap();
            prop_assert_eq!(&a.states, &b.states);
            prop_assert_eq!(&a.v_ref, &b.v_ref);
        }

        #[test]
        fn overshoot_identity(t in 0.0f64..0.99, gamma in 0.0f64..5.0) {
            let tt = overshoot_time(t, gamma).unwrap();
            prop_assert!((noise_level(tt) * (1.0 + gamma) - noise_level(t)).abs() <= 1e-12);
            prop_assert!(tt <= t);
        }
    }
}
