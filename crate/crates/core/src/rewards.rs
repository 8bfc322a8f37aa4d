//! Scalar rewards on generated samples.
//!
//! These stand in for learned preference models. Two variants are
//! deliberately non-differentiable so that methods which never touch the
//! reward gradient can be exercised on them.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::numerics::{dot, sigmoid, sq_dist};
use crate::velocity::ConditionId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    /// `100 * sigmoid(gain * <direction, y>)`, bounded in [0, 100].
    SigmoidHalfplane { direction: Vec<f64>, gain: f64 },
    /// `-||y - center||^2`.
    Radial { center: Vec<f64> },
    /// 1 if the nearest mode is preferred, else 0. Without an explicit
    /// preferred set the sample's own condition is the preferred mode.
    ModeIndicator {
        modes: Vec<Vec<f64>>,
        #[serde(default)]
        preferred: Option<Vec<usize>>,
    },
    /// `<coeffs, y>`.
    Linear { coeffs: Vec<f64> },
    /// 1 if `<direction, y> > threshold`, else 0.
    Step { direction: Vec<f64>, threshold: f64 },
}

impl RewardSpec {
    pub fn name(&self) -> &'static str {
        match self {
            RewardSpec::SigmoidHalfplane { .. } => "sigmoid_halfplane",
            RewardSpec::Radial { .. } => "radial",
            RewardSpec::ModeIndicator { .. } => "mode_indicator",
            RewardSpec::Linear { .. } => "linear",
            RewardSpec::Step { .. } => "step",
        }
    }

    pub fn is_differentiable(&self) -> bool {
        matches!(
            self,
            RewardSpec::SigmoidHalfplane { .. } | RewardSpec::Radial { .. } | RewardSpec::Linear { .. }
        )
    }

    /// Input dimension, when the variant fixes one.
    pub fn dim(&self) -> Option<usize> {
        match self {
            RewardSpec::SigmoidHalfplane { direction, .. } | RewardSpec::Step { direction, .. } => Some(direction.len()),
            RewardSpec::Radial { center } => Some(center.len()),
            RewardSpec::Linear { coeffs } => Some(coeffs.len()),
            RewardSpec::ModeIndicator { modes, .. } => modes.first().map(Vec::len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let ok = match self {
            RewardSpec::SigmoidHalfplane { direction, gain } => finite(direction) && gain.is_finite(),
            RewardSpec::Radial { center } => finite(center),
            RewardSpec::Linear { coeffs } => finite(coeffs),
            RewardSpec::Step { direction, threshold } => finite(direction) && threshold.is_finite(),
            RewardSpec::ModeIndicator { modes, preferred } => {
                let d = modes.first().map_or(0, Vec::len);
                !modes.is_empty()
                    && modes.iter().all(|m| m.len() == d && finite(m))
                    && preferred.as_ref().is_none_or(|p| p.iter().all(|&k| k < modes.len()))
            }
        };
        if ok && self.dim() != Some(0) {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid {} reward parameters", self.name())))
        }
    }

    fn check_dim(&self, y: &[f64]) -> Result<()> {
        match self.dim() {
            Some(d) => ensure_dim(d, y.len()),
            None => Ok(()),
        }
    }

    /// Reward of `y` generated under condition `c`.
    pub fn reward(&self, y: &[f64], c: ConditionId) -> Result<f64> {
        self.check_dim(y)?;
        Ok(match self {
            RewardSpec::SigmoidHalfplane { direction, gain } => 100.0 * sigmoid(gain * dot(direction, y)),
            RewardSpec::Radial { center } => -sq_dist(y, center),
            RewardSpec::Linear { coeffs } => dot(coeffs, y),
            RewardSpec::Step { direction, threshold } => {
                if dot(direction, y) > *threshold {
                    1.0
                } else {
                    0.0
                }
            }
            RewardSpec::ModeIndicator { modes, preferred } => {
                let nearest = nearest_mode(modes, y);
                let hit = match preferred {
                    Some(p) => p.contains(&nearest),
                    None => nearest == c.0,
                };
                if hit {
                    1.0
                } else {
                    0.0
                }
            }
        })
    }

    /// Exact gradient with respect to `y`.
    pub fn gradient(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(y)?;
        match self {
            RewardSpec::SigmoidHalfplane { direction, gain } => {
                let s = sigmoid(gain * dot(direction, y));
                let scale = 100.0 * gain * s * (1.0 - s);
                Ok(direction.iter().map(|u| scale * u).collect())
            }
            RewardSpec::Radial { center } => Ok(y.iter().zip(center).map(|(a, m)| -2.0 * (a - m)).collect()),
            RewardSpec::Linear { coeffs } => Ok(coeffs.clone()),
            RewardSpec::ModeIndicator { .. } | RewardSpec::Step { .. } => Err(Error::Unsupported(format!(
                "{} reward has no gradient",
                self.name()
            ))),
        }
    }
}

pub fn nearest_mode(modes: &[Vec<f64>], y: &[f64]) -> usize {
    modes
        .iter()
        .enumerate()
        .min_by(|a, b| sq_dist(a.1, y).total_cmp(&sq_dist(b.1, y)))
        .map_or(0, |(i, _)| i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardTerm {
    pub spec: RewardSpec,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Weighted sum of reward terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CombinedReward {
    pub terms: Vec<RewardTerm>,
}

impl CombinedReward {
    pub fn single(spec: RewardSpec) -> Self {
        CombinedReward {
            terms: vec![RewardTerm { spec, weight: 1.0 }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::Config("combined reward needs at least one term".into()));
        }
        for t in &self.terms {
            t.spec.validate()?;
            if !t.weight.is_finite() {
                return Err(Error::Config("reward weights must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn combine(&self, y: &[f64], c: ConditionId) -> Result<f64> {
        self.terms
            .iter()
            .try_fold(0.0, |acc, t| Ok(acc + t.weight * t.spec.reward(y, c)?))
    }

    pub fn is_differentiable(&self) -> bool {
        self.terms.iter().all(|t| t.weight == 0.0 || t.spec.is_differentiable())
    }

    pub fn gradient(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; y.len()];
        for t in self.terms.iter().filter(|t| t.weight != 0.0) {
            for (gk, v) in g.iter_mut().zip(t.spec.gradient(y)?) {
                *gk += t.weight * v;
            }
        }
        Ok(g)
    }
}
