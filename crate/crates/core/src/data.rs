//! Synthetic conditional datasets and conditional flow-matching pre-training.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::numerics::{AdamW, AdamWConfig, Mat, Tape};
use crate::rng::{self, Domain, Rng};
use crate::velocity::{Arch, ConditionId, VelocityNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// One-dimensional `N(0, sigma^2)`, a single condition.
    Gauss1d {
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    /// Eight isotropic Gaussians on a circle; condition `k` is mode `k`.
    Ring8 {
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_mode_std")]
        mode_std: f64,
    },
    /// One isotropic Gaussian per condition.
    GaussMixture { centers: Vec<Vec<f64>>, std: f64 },
    /// Uniform on the squares of one color of a `cells x cells` board
    /// spanning `[-half_width, half_width]^2`; two conditions.
    Checkerboard {
        #[serde(default = "default_cells")]
        cells: usize,
        #[serde(default = "default_half_width")]
        half_width: f64,
    },
}

fn default_sigma() -> f64 {
    1.0
}
fn default_radius() -> f64 {
    2.0
}
fn default_mode_std() -> f64 {
    0.15
}
fn default_cells() -> usize {
    4
}
fn default_half_width() -> f64 {
    2.0
}

impl DatasetSpec {
    pub fn gauss1d(sigma: f64) -> Self {
        DatasetSpec::Gauss1d { sigma }
    }

    pub fn ring8() -> Self {
        DatasetSpec::Ring8 {
            radius: default_radius(),
            mode_std: default_mode_std(),
        }
    }

    /// Four components on the corners of a square.
    pub fn four_gaussians() -> Self {
        DatasetSpec::GaussMixture {
            centers: vec![vec![1.5, 1.5], vec![-1.5, 1.5], vec![-1.5, -1.5], vec![1.5, -1.5]],
            std: 0.3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::Gauss1d { .. } => "gauss1d",
            DatasetSpec::Ring8 { .. } => "ring8",
            DatasetSpec::GaussMixture { .. } => "gauss_mixture",
            DatasetSpec::Checkerboard { .. } => "checkerboard",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Gauss1d { .. } => 1,
            DatasetSpec::GaussMixture { centers, .. } => centers.first().map_or(0, Vec::len),
            DatasetSpec::Ring8 { .. } | DatasetSpec::Checkerboard { .. } => 2,
        }
    }

    pub fn n_conditions(&self) -> usize {
        match self {
            DatasetSpec::Gauss1d { .. } => 1,
            DatasetSpec::Ring8 { .. } => 8,
            DatasetSpec::GaussMixture { centers, .. } => centers.len(),
            DatasetSpec::Checkerboard { .. } => 2,
        }
    }

    /// Per-condition mode centers, for datasets that have them.
    pub fn mode_centers(&self) -> Option<Vec<Vec<f64>>> {
        match self {
            DatasetSpec::Ring8 { radius, .. } => Some(
                (0..8)
                    .map(|k| {
                        let a = 2.0 * PI * k as f64 / 8.0;
                        vec![radius * a.cos(), radius * a.sin()]
                    })
                    .collect(),
            ),
            DatasetSpec::GaussMixture { centers, .. } => Some(centers.clone()),
            _ => None,
        }
    }

    /// Per-component standard deviation of mode datasets.
    pub fn mode_std(&self) -> Option<f64> {
        match self {
            DatasetSpec::Ring8 { mode_std, .. } => Some(*mode_std),
            DatasetSpec::GaussMixture { std, .. } => Some(*std),
            _ => None,
        }
    }

    /// Root-mean-square per-coordinate spread of the unconditional data.
    pub fn data_scale(&self) -> f64 {
        match self {
            DatasetSpec::Gauss1d { sigma } => *sigma,
            DatasetSpec::Ring8 { radius, mode_std } => (radius * radius / 2.0 + mode_std * mode_std).sqrt(),
            DatasetSpec::GaussMixture { centers, std } => {
                let d = self.dim() as f64;
                let mean_sq = centers.iter().flatten().map(|v| v * v).sum::<f64>() / (centers.len() as f64 * d);
                (mean_sq + std * std).sqrt()
            }
            DatasetSpec::Checkerboard { half_width, .. } => half_width / 3f64.sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            DatasetSpec::Gauss1d { sigma } => *sigma > 0.0 && sigma.is_finite(),
            DatasetSpec::Ring8 { radius, mode_std } => *mode_std > 0.0 && radius.is_finite() && mode_std.is_finite(),
            DatasetSpec::GaussMixture { centers, std } => {
                let d = self.dim();
                *std > 0.0
                    && std.is_finite()
                    && d > 0
                    && centers.iter().all(|c| c.len() == d && c.iter().all(|v| v.is_finite()))
            }
            DatasetSpec::Checkerboard { cells, half_width } => *cells >= 2 && *half_width > 0.0 && half_width.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {} dataset parameters", self.name())))
        }
    }

    fn sample_one(&self, c: usize, rng: &mut Rng, out: &mut [f64]) {
        match self {
            DatasetSpec::Gauss1d { sigma } => out[0] = sigma * rng::normal(rng),
            DatasetSpec::Ring8 { mode_std, .. } | DatasetSpec::GaussMixture { std: mode_std, .. } => {
                let centers = self.mode_centers().expect("mode dataset");
                for (o, m) in out.iter_mut().zip(&centers[c]) {
                    *o = m + mode_std * rng::normal(rng);
                }
            }
            DatasetSpec::Checkerboard { cells, half_width } => {
                let cell = 2.0 * half_width / *cells as f64;
                loop {
                    let i = rng.random_range(0..*cells);
                    let j = rng.random_range(0..*cells);
                    if (i + j) % 2 == c {
                        out[0] = -half_width + cell * (i as f64 + rng.random::<f64>());
                        out[1] = -half_width + cell * (j as f64 + rng.random::<f64>());
                        break;
                    }
                }
            }
        }
    }
}

/// `n` i.i.d. draws from condition `c`, one per row.
pub fn sample_dataset(spec: &DatasetSpec, n: usize, c: ConditionId, rng: &mut Rng) -> Result<Mat> {
    spec.validate()?;
    if c.0 >= spec.n_conditions() {
        return Err(Error::InvalidArgument(format!(
            "condition {} not in dataset {} ({} conditions)",
            c.0,
            spec.name(),
            spec.n_conditions()
        )));
    }
    let mut out = Mat::zeros(n, spec.dim());
    for r in 0..n {
        spec.sample_one(c.0, rng, out.row_mut(r));
    }
    Ok(out)
}

/// One flow-matching minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub x0: Mat,
    pub conditions: Vec<ConditionId>,
    pub times: Vec<f64>,
    pub noises: Mat,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.x0.rows() != n || self.noises.rows() != n || self.conditions.len() != n || self.x0.cols() != self.noises.cols() {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.x0.rows(),
            });
        }
        ensure_finite(self.x0.as_slice(), "batch data")?;
        ensure_finite(self.noises.as_slice(), "batch noise")?;
        ensure_finite(&self.times, "batch times")
    }

    /// `x_t = (1 - t) x0 + t eps`, row by row.
    pub fn interpolants(&self) -> Mat {
        let mut xt = self.x0.clone();
        for r in 0..self.len() {
            let t = self.times[r];
            for (x, e) in xt.row_mut(r).iter_mut().zip(self.noises.row(r)) {
                *x = (1.0 - t) * *x + t * e;
            }
        }
        xt
    }

    /// Regression target `eps - x0`.
    pub fn targets(&self) -> Mat {
        self.noises.zip_map(&self.x0, |e, x| e - x)
    }
}

/// Draws a batch with conditions uniform over the vocabulary, times uniform
/// on (0, 1), and conditions dropped to null with probability `p_uncond`.
pub fn draw_batch(spec: &DatasetSpec, n: usize, p_uncond: f64, rng: &mut Rng) -> Result<TrainBatch> {
    let d = spec.dim();
    let n_cond = spec.n_conditions();
    let mut x0 = Mat::zeros(n, d);
    let mut conditions = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    for r in 0..n {
        let c = rng.random_range(0..n_cond);
        spec.sample_one(c, rng, x0.row_mut(r));
        let dropped = rng.random::<f64>() < p_uncond;
        conditions.push(ConditionId(if dropped { n_cond } else { c }));
        // Open interval: reject the (measure-zero) endpoint 0.
        let mut t = rng.random::<f64>();
        while t == 0.0 {
            t = rng.random::<f64>();
        }
        times.push(t);
    }
    let noises = Mat::from_vec(n, d, rng::normal_vec(rng, n * d))?;
    Ok(TrainBatch {
        x0,
        conditions,
        times,
        noises,
    })
}

/// Mean over the batch of `||v(x_t; t, c) - (eps - x0)||^2`.
pub fn cfm_loss(net: &VelocityNet, batch: &TrainBatch) -> Result<f64> {
    batch.validate()?;
    if batch.is_empty() {
        return Ok(0.0);
    }
    let v = net.forward_batch(&batch.interpolants(), &batch.times, &batch.conditions);
    let diff = v.zip_map(&batch.targets(), |a, b| a - b);
    Ok(crate::numerics::sq_norm(diff.as_slice()) / batch.len() as f64)
}

/// Loss and its parameter gradient.
pub fn cfm_loss_grad(net: &VelocityNet, batch: &TrainBatch) -> Result<(f64, Vec<f64>)> {
    batch.validate()?;
    let mut tape = Tape::new(net.n_params());
    let v = net.on_tape(&mut tape, &batch.interpolants(), &batch.times, &batch.conditions)?;
    let target = tape.constant(batch.targets());
    let diff = tape.sub(v, target)?;
    let sq = tape.sq_norm(diff);
    let loss = tape.scale(sq, 1.0 / batch.len().max(1) as f64);
    let value = tape.value(loss).as_slice()[0];
    let grads = tape.backward(loss, 1.0)?;
    Ok((value, grads.into_params()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Cosine decay from `optimizer.lr` down to this fraction of it.
    pub final_lr_fraction: f64,
    pub p_uncond: f64,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 20_000,
            batch_size: 128,
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            final_lr_fraction: 0.05,
            p_uncond: 0.1,
            log_every: 100,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.log_every == 0 || !(0.0..1.0).contains(&self.p_uncond) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config(format!("invalid pretrain settings {self:?}")));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.steps.max(1) as f64;
        let floor = self.final_lr_fraction;
        self.optimizer.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub net: VelocityNet,
    pub optimizer: AdamW,
    /// `(step, mean loss since the previous entry)`.
    pub losses: Vec<(usize, f64)>,
}

/// Fresh network for a dataset.
pub fn init_net(spec: &DatasetSpec, hidden: &[usize], seed: u64) -> Result<VelocityNet> {
    let arch = Arch::new(spec.dim(), hidden.to_vec(), spec.n_conditions())?;
    VelocityNet::new(arch, &mut rng::stream(seed, Domain::Init, 0, 0))
}

/// Conditional flow-matching pre-training with AdamW.
pub fn pretrain(spec: &DatasetSpec, hidden: &[usize], config: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    spec.validate()?;
    config.validate()?;
    let mut net = init_net(spec, hidden, seed)?;
    let mut optimizer = AdamW::new(config.optimizer, net.n_params())?;
    let mut losses = Vec::new();
    let mut window = 0.0;
    let mut in_window = 0;
    for step in 0..config.steps {
        let mut rng = rng::stream(seed, Domain::Pretrain, step as u64, 0);
        let batch = draw_batch(spec, config.batch_size, config.p_uncond, &mut rng)?;
        let (loss, grads) = cfm_loss_grad(&net, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss {loss} at pretrain step {step}")));
        }
        optimizer.config.lr = config.lr_at(step);
        optimizer.step(net.params_mut(), &grads)?;
        window += loss;
        in_window += 1;
        if in_window == config.log_every || step + 1 == config.steps {
            losses.push((step + 1, window / in_window as f64));
            window = 0.0;
            in_window = 0;
        }
    }
    optimizer.config.lr = config.optimizer.lr;
    Ok(PretrainOutcome { net, optimizer, losses })
}

pub fn loss_csv(losses: &[(usize, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in losses {
        s.push_str(&format!("{step},{loss}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{mean, sq_dist};

    #[test]
    fn gauss1d_moments() {
        let mut r = rng::stream(1, Domain::Misc, 0, 0);
        let n = 100_000;
        let x = sample_dataset(&DatasetSpec::gauss1d(1.0), n, ConditionId(0), &mut r).unwrap();
        let v = x.as_slice();
        let m = mean(v);
        let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n as f64 - 1.0);
        let se = 1.0 / (n as f64).sqrt();
        assert!(m.abs() < 3.0 * se, "{m}");
        assert!((var - 1.0).abs() < 3.0 * (2.0 / (n as f64 - 1.0)).sqrt(), "{var}");
    }

    #[test]
    fn ring8_samples_stay_near_their_mode() {
        let spec = DatasetSpec::ring8();
        let centers = spec.mode_centers().unwrap();
        let std = spec.mode_std().unwrap();
        let mut r = rng::stream(2, Domain::Misc, 0, 0);
        for k in 0..8 {
            let x = sample_dataset(&spec, 500, ConditionId(k), &mut r).unwrap();
            for row in 0..500 {
                assert!(sq_dist(x.row(row), &centers[k]).sqrt() < 5.0 * std);
            }
        }
    }

    #[test]
    fn empty_and_invalid_requests() {
        let mut r = rng::stream(3, Domain::Misc, 0, 0);
        assert_eq!(sample_dataset(&DatasetSpec::ring8(), 0, ConditionId(0), &mut r).unwrap().rows(), 0);
        assert!(sample_dataset(&DatasetSpec::ring8(), 3, ConditionId(8), &mut r).is_err());
        assert!(serde_json::from_str::<DatasetSpec>(r#"{"name": "spiral"}"#).is_err());
        assert!(DatasetSpec::gauss1d(0.0).validate().is_err());
    }

    #[test]
    fn checkerboard_respects_color() {
        let spec = DatasetSpec::Checkerboard { cells: 4, half_width: 2.0 };
        let mut r = rng::stream(4, Domain::Misc, 0, 0);
        for c in 0..2 {
            let x = sample_dataset(&spec, 200, ConditionId(c), &mut r).unwrap();
            for row in 0..200 {
                let i = ((x.get(row, 0) + 2.0) / 1.0).floor() as usize;
                let j = ((x.get(row, 1) + 2.0) / 1.0).floor() as usize;
                assert_eq!((i + j) % 2, c);
            }
        }
    }

    #[test]
    fn interpolant_endpoints_are_exact() {
        let mut r = rng::stream(5, Domain::Misc, 0, 0);
        let mut b = draw_batch(&DatasetSpec::four_gaussians(), 4, 0.0, &mut r).unwrap();
        b.times = vec![0.0, 1.0, 0.0, 1.0];
        let xt = b.interpolants();
        assert_eq!(xt.row(0), b.x0.row(0));
        assert_eq!(xt.row(1), b.noises.row(1));
        assert_eq!(xt.row(2), b.x0.row(2));
        assert_eq!(xt.row(3), b.noises.row(3));
    }

    fn zero_net(dim: usize) -> VelocityNet {
        VelocityNet::new(Arch::default_for(dim, 1), &mut rng::stream(0, Domain::Init, 0, 0)).unwrap()
    }

    #[test]
    fn cfm_loss_examples() {
        let net = zero_net(2);
        let single = TrainBatch {
            x0: Mat::row_vector(&[1.0, 0.0]),
            conditions: vec![ConditionId(0)],
            times: vec![0.3],
            noises: Mat::row_vector(&[0.0, 1.0]),
        };
        assert_eq!(cfm_loss(&net, &single).unwrap(), 2.0);
        let same = TrainBatch {
            x0: Mat::from_rows(&[vec![0.5, 0.5], vec![-1.0, 2.0]]).unwrap(),
            conditions: vec![ConditionId(0); 2],
            times: vec![0.2, 0.9],
            noises: Mat::from_rows(&[vec![0.5, 0.5], vec![-1.0, 2.0]]).unwrap(),
        };
        assert_eq!(cfm_loss(&net, &same).unwrap(), 0.0);
        let mut bad = single.clone();
        bad.noises = Mat::row_vector(&[f64::NAN, 0.0]);
        assert!(cfm_loss(&net, &bad).is_err());
    }

    #[test]
    fn loss_gradient_matches_loss() {
        let mut r = rng::stream(6, Domain::Misc, 0, 0);
        let spec = DatasetSpec::four_gaussians();
        let mut net = init_net(&spec, &[8, 8], 1).unwrap();
        for p in net.params_mut() {
            *p += 0.1 * rng::normal(&mut r);
        }
        let batch = draw_batch(&spec, 16, 0.1, &mut r).unwrap();
        let (loss, grads) = cfm_loss_grad(&net, &batch).unwrap();
        assert_eq!(loss, cfm_loss(&net, &batch).unwrap());
        let h = 1e-5;
        for k in (0..net.n_params()).step_by(7) {
            let mut p = net.clone();
            p.params_mut()[k] += h;
            let fp = cfm_loss(&p, &batch).unwrap();
            p.params_mut()[k] -= 2.0 * h;
            let fm = cfm_loss(&p, &batch).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grads[k]).abs() <= 1e-4 * fd.abs().max(grads[k].abs()).max(1e-6), "{k}: {fd} vs {}", grads[k]);
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let spec = DatasetSpec::ring8();
        let cfg = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        let out = pretrain(&spec, &[16], &cfg, 9).unwrap();
        assert_eq!(out.net, init_net(&spec, &[16], 9).unwrap());
        assert!(out.losses.is_empty());
    }

    #[test]
    fn pretraining_is_seeded_and_lowers_loss() {
        let spec = DatasetSpec::four_gaussians();
        let cfg = PretrainConfig {
            steps: 300,
            batch_size: 32,
            log_every: 50,
            ..PretrainConfig::default()
        };
        let a = pretrain(&spec, &[16, 16], &cfg, 3).unwrap();
        let b = pretrain(&spec, &[16, 16], &cfg, 3).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.losses, b.losses);
        assert!(a.losses.last().unwrap().1 < a.losses[0].1);
    }
}
