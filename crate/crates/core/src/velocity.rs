//! Conditional velocity network `v(x; t, c)` and classifier-free guidance.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::numerics::mat::affine_forward;
use crate::numerics::{Mat, Tape, Var};
use crate::rng::{self, Rng};

/// Number of time features: raw `t` plus sin/cos at two frequencies.
pub const TIME_FEATURES: usize = 5;

/// Discrete condition. Id `n_conditions` is the reserved null condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConditionId(pub usize);

/// Network shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub n_conditions: usize,
}

impl Arch {
    pub fn new(dim: usize, hidden: Vec<usize>, n_conditions: usize) -> Result<Self> {
        let arch = Arch {
            dim,
            hidden,
            n_conditions,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Three hidden tanh layers of width 64.
    pub fn default_for(dim: usize, n_conditions: usize) -> Self {
        Arch {
            dim,
            hidden: vec![64, 64, 64],
            n_conditions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_conditions == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    pub fn null_condition(&self) -> ConditionId {
        ConditionId(self.n_conditions)
    }

    pub fn input_width(&self) -> usize {
        self.dim + TIME_FEATURES + self.n_conditions + 1
    }

    /// `(in, out)` for every affine layer.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_width()];
        widths.extend(&self.hidden);
        widths.push(self.dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Offsets of one affine layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug)]
struct Layer {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

fn layers(arch: &Arch) -> Vec<Layer> {
    let mut offset = 0;
    arch.layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let l = Layer {
                w: offset,
                b: offset + fan_in * fan_out,
                fan_in,
                fan_out,
            };
            offset += fan_in * fan_out + fan_out;
            l
        })
        .collect()
}

pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    [
        t,
        (PI * t).sin(),
        (PI * t).cos(),
        (2.0 * PI * t).sin(),
        (2.0 * PI * t).cos(),
    ]
}

/// Anything that yields a velocity at `(x, t, c)`.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64], t: f64, c: ConditionId) -> Vec<f64>;

    /// Network forward passes consumed by one `eval`.
    fn net_evals_per_call(&self) -> u64 {
        0
    }
}

/// The trainable network.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    arch: Arch,
    params: Vec<f64>,
}

impl VelocityNet {
    /// Scaled-normal hidden weights, zero biases and a zero output layer, so
    /// the untrained flow leaves its input unchanged.
    pub fn new(arch: Arch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = vec![0.0; arch.param_count()];
        let ls = layers(&arch);
        for l in &ls[..ls.len() - 1] {
            let std = (1.0 / l.fan_in as f64).sqrt();
            for p in &mut params[l.w..l.b] {
                *p = std * rng::normal(rng);
            }
        }
        Ok(VelocityNet { arch, params })
    }

    pub fn from_params(arch: Arch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        ensure_dim(arch.param_count(), params.len())?;
        ensure_finite(&params, "network parameters")?;
        Ok(VelocityNet { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn null_condition(&self) -> ConditionId {
        self.arch.null_condition()
    }

    fn features(&self, xs: &Mat, ts: &[f64], cs: &[ConditionId]) -> Mat {
        let width = self.arch.input_width();
        let d = self.arch.dim;
        let mut f = Mat::zeros(xs.rows(), width);
        for r in 0..xs.rows() {
            let row = f.row_mut(r);
            row[..d].copy_from_slice(xs.row(r));
            row[d..d + TIME_FEATURES].copy_from_slice(&time_features(ts[r]));
            row[d + TIME_FEATURES + cs[r].0] = 1.0;
        }
        f
    }

    /// Batched forward pass without recording. Rows of `xs` are samples.
    pub fn forward_batch(&self, xs: &Mat, ts: &[f64], cs: &[ConditionId]) -> Mat {
        debug_assert_eq!(xs.rows(), ts.len());
        debug_assert_eq!(xs.rows(), cs.len());
        let ls = layers(&self.arch);
        let mut h = self.features(xs, ts, cs);
        for (k, l) in ls.iter().enumerate() {
            h = affine_forward(
                &h,
                &self.params[l.w..l.b],
                Some(&self.params[l.b..l.b + l.fan_out]),
                l.fan_out,
            );
            if k + 1 < ls.len() {
                h = h.map(f64::tanh);
            }
        }
        h
    }

    /// Records the batched forward pass; the result is `rows x dim`.
    pub fn on_tape(&self, tape: &mut Tape, xs: &Mat, ts: &[f64], cs: &[ConditionId]) -> Result<Var> {
        let ls = layers(&self.arch);
        let mut h = tape.constant(self.features(xs, ts, cs));
        for (k, l) in ls.iter().enumerate() {
            let w = tape.param(&self.params, l.w, l.fan_out, l.fan_in)?;
            let b = tape.param(&self.params, l.b, 1, l.fan_out)?;
            h = tape.affine(h, w, Some(b))?;
            if k + 1 < ls.len() {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    fn check_query(&self, x: &[f64], t: f64, c: ConditionId) -> Result<()> {
        ensure_dim(self.arch.dim, x.len())?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        ensure_finite(x, "velocity input")?;
        if c.0 > self.arch.n_conditions {
            return Err(Error::InvalidArgument(format!(
                "condition {} outside 0..={}",
                c.0, self.arch.n_conditions
            )));
        }
        Ok(())
    }

    /// `v(x; t, c)` for a single point.
    pub fn velocity(&self, x: &[f64], t: f64, c: ConditionId) -> Result<Vec<f64>> {
        self.check_query(x, t, c)?;
        Ok(self.eval(x, t, c))
    }

    /// Guided velocity `v_null + w (v_c - v_null)`.
    pub fn cfg_velocity(&self, x: &[f64], t: f64, c: ConditionId, w: f64) -> Result<Vec<f64>> {
        self.check_query(x, t, c)?;
        if c == self.null_condition() {
            return Err(Error::InvalidArgument("guidance needs a real condition".into()));
        }
        Ok(GuidedNet::new(self, Some(w)).eval(x, t, c))
    }
}

impl VelocityField for VelocityNet {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn eval(&self, x: &[f64], t: f64, c: ConditionId) -> Vec<f64> {
        self.forward_batch(&Mat::row_vector(x), &[t], &[c]).into_vec()
    }

    fn net_evals_per_call(&self) -> u64 {
        1
    }
}

fn combine_guided(v_null: f64, v_cond: f64, w: f64) -> f64 {
    v_null + w * (v_cond - v_null)
}

/// Network evaluated with optional classifier-free guidance.
#[derive(Clone, Copy, Debug)]
pub struct GuidedNet<'a> {
    pub net: &'a VelocityNet,
    pub scale: Option<f64>,
}

impl<'a> GuidedNet<'a> {
    pub fn new(net: &'a VelocityNet, scale: Option<f64>) -> Self {
        // Unit scale is the plain conditional velocity.
        let scale = scale.filter(|&w| w != 1.0);
        GuidedNet { net, scale }
    }

    pub fn forward_batch(&self, xs: &Mat, ts: &[f64], cs: &[ConditionId]) -> Mat {
        match self.scale {
            None => self.net.forward_batch(xs, ts, cs),
            Some(w) => {
                let nulls = vec![self.net.null_condition(); cs.len()];
                let vn = self.net.forward_batch(xs, ts, &nulls);
                if w == 0.0 {
                    return vn;
                }
                let vc = self.net.forward_batch(xs, ts, cs);
                vn.zip_map(&vc, |a, b| combine_guided(a, b, w))
            }
        }
    }

    pub fn on_tape(&self, tape: &mut Tape, xs: &Mat, ts: &[f64], cs: &[ConditionId]) -> Result<Var> {
        match self.scale {
            None => self.net.on_tape(tape, xs, ts, cs),
            Some(w) => {
                let nulls = vec![self.net.null_condition(); cs.len()];
                let vn = self.net.on_tape(tape, xs, ts, &nulls)?;
                if w == 0.0 {
                    return Ok(vn);
                }
                let vc = self.net.on_tape(tape, xs, ts, cs)?;
                let diff = tape.sub(vc, vn)?;
                let scaled = tape.scale(diff, w);
                tape.add(vn, scaled)
            }
        }
    }
}

impl VelocityField for GuidedNet<'_> {
    fn dim(&self) -> usize {
        self.net.dim()
    }

    fn eval(&self, x: &[f64], t: f64, c: ConditionId) -> Vec<f64> {
        self.forward_batch(&Mat::row_vector(x), &[t], &[c]).into_vec()
    }

    fn net_evals_per_call(&self) -> u64 {
        match self.scale {
            None | Some(0.0) => 1,
            Some(_) => 2,
        }
    }
}

/// `v = 0`: the identity flow.
#[derive(Clone, Copy, Debug)]
pub struct ZeroVelocity {
    pub dim: usize,
}

impl VelocityField for ZeroVelocity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _x: &[f64], _t: f64, _c: ConditionId) -> Vec<f64> {
        vec![0.0; self.dim]
    }
}
