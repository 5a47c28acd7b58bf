//! Time-indexed schedules and the five-policy curriculum bundle.
//!
//! Time is measured in epochs: `t` runs from 0 to the horizon `T` and every
//! step inside an epoch shares one [`PolicySnapshot`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Constant,
    Linear,
    /// Zero during the warm-up span, linear ramp, then held at the end
    /// value during the cool-down span.
    WarmupCooldown,
    Cosine,
    Arctan,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Constant => "constant",
            Shape::Linear => "linear",
            Shape::WarmupCooldown => "warmup-cooldown",
            Shape::Cosine => "cosine",
            Shape::Arctan => "arctan",
        }
    }
}

impl std::str::FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "constant" => Shape::Constant,
            "linear" => Shape::Linear,
            "warmup-cooldown" => Shape::WarmupCooldown,
            "cosine" => Shape::Cosine,
            "arctan" => Shape::Arctan,
            other => return Err(format!("unknown schedule shape `{other}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub shape: Shape,
    pub start: f64,
    pub end: f64,
    pub warmup_frac: f64,
    pub cooldown_frac: f64,
    /// Arctan steepness; ignored by the other shapes.
    pub steepness: f64,
}

pub const DEFAULT_STEEPNESS: f64 = 5.0;

impl Schedule {
    fn with(shape: Shape, start: f64, end: f64) -> Self {
        Schedule { shape, start, end, warmup_frac: 0.0, cooldown_frac: 0.0, steepness: DEFAULT_STEEPNESS }
    }

    pub fn constant(v: f64) -> Self {
        Schedule::with(Shape::Constant, v, v)
    }

    pub fn linear(start: f64, end: f64) -> Self {
        Schedule::with(Shape::Linear, start, end)
    }

    pub fn warmup_cooldown(start: f64, end: f64, warmup_frac: f64, cooldown_frac: f64) -> Self {
        Schedule { warmup_frac, cooldown_frac, ..Schedule::with(Shape::WarmupCooldown, start, end) }
    }

    pub fn cosine(start: f64, end: f64) -> Self {
        Schedule::with(Shape::Cosine, start, end)
    }

    pub fn arctan(start: f64, end: f64, steepness: f64) -> Self {
        Schedule { steepness, ..Schedule::with(Shape::Arctan, start, end) }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let finite = [self.start, self.end, self.warmup_frac, self.cooldown_frac, self.steepness];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(name, "non-finite schedule parameter"));
        }
        if !(0.0..=0.5).contains(&self.warmup_frac) || !(0.0..=0.5).contains(&self.cooldown_frac) {
            return Err(Error::config(name, "warmup and cooldown fractions must lie in [0, 0.5]"));
        }
        if self.shape == Shape::Arctan && self.steepness <= 0.0 {
            return Err(Error::config(name, "arctan steepness must be positive"));
        }
        Ok(())
    }

    /// Value at epoch `t` of a `total`-epoch run.
    pub fn eval(&self, t: usize, total: usize) -> Result<f64> {
        if total == 0 {
            return Err(Error::ZeroHorizon);
        }
        if t > total {
            return Err(Error::StepOutOfRange { t, total });
        }
        let x = t as f64 / total as f64;
        let span = self.end - self.start;
        Ok(match self.shape {
            Shape::Constant => self.start,
            Shape::Linear => self.start + span * x,
            Shape::WarmupCooldown => {
                let warm_end = self.warmup_frac * total as f64;
                let cool_start = total as f64 - self.cooldown_frac * total as f64;
                let tf = t as f64;
                if tf < warm_end {
                    0.0
                } else if tf >= cool_start {
                    self.end
                } else {
                    self.start + span * (tf - warm_end) / (cool_start - warm_end)
                }
            }
            Shape::Cosine => self.end - span * ((std::f64::consts::PI * x).cos() + 1.0) / 2.0,
            Shape::Arctan => self.start + span * arctan_profile(self.steepness, x),
        })
    }

    /// Whether the schedule is identically zero over the run.
    pub fn is_always_zero(&self) -> bool {
        match self.shape {
            Shape::Constant => self.start == 0.0,
            _ => self.start == 0.0 && self.end == 0.0,
        }
    }
}

/// Normalized arctan ramp on `[0, 1]`: 0 at `x = 0`, 1 at `x = 1`.
pub fn arctan_profile(steepness: f64, x: f64) -> f64 {
    (steepness * x).atan() / steepness.atan()
}

/// Free-function form of [`Schedule::eval`].
pub fn eval_schedule(s: &Schedule, t: usize, total: usize) -> Result<f64> {
    s.eval(t, total)
}

/// The five curriculum controls: unlabelled sampling rate, unsupervised loss
/// weight, confidence threshold, teacher momentum and augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub sampling: Schedule,
    pub loss_weight: Schedule,
    pub threshold: Schedule,
    pub momentum: Schedule,
    pub aug: AugConfig,
}

impl Default for PolicyBundle {
    fn default() -> Self {
        PolicyBundle {
            sampling: Schedule::warmup_cooldown(0.0, 1.0, 0.25, 0.25),
            loss_weight: Schedule::linear(0.1, 1.0),
            threshold: Schedule::arctan(0.1, 0.6, DEFAULT_STEEPNESS),
            momentum: Schedule::cosine(0.998, 0.9998),
            aug: AugConfig::default(),
        }
    }
}

impl PolicyBundle {
    /// Labelled data only: the unlabelled branch never admits a sample.
    pub fn supervised_only() -> Self {
        PolicyBundle { sampling: Schedule::constant(0.0), ..PolicyBundle::default() }
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        self.sampling.validate("policy.sampling")?;
        self.loss_weight.validate("policy.loss_weight")?;
        self.threshold.validate("policy.threshold")?;
        self.momentum.validate("policy.momentum")?;
        self.aug.validate()?;
        // range checks on a dense grid; the shapes are monotone so the
        // endpoints plus a few interior points suffice
        let n = total.max(1);
        for t in 0..=n {
            let s = self.snapshot(t, n)?;
            if !(0.0..=1.0).contains(&s.sampling) {
                return Err(Error::config("policy.sampling", "must stay in [0, 1]"));
            }
            if s.loss_weight < 0.0 {
                return Err(Error::config("policy.loss_weight", "must stay nonnegative"));
            }
            if !(s.threshold > 0.0 && s.threshold < 1.0) {
                return Err(Error::config("policy.threshold", "must stay in (0, 1)"));
            }
            if !(s.momentum > 0.0 && s.momentum < 1.0) {
                return Err(Error::config("policy.momentum", "must stay in (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn snapshot(&self, t: usize, total: usize) -> Result<PolicySnapshot> {
        Ok(PolicySnapshot {
            sampling: self.sampling.eval(t, total)?.clamp(0.0, 1.0),
            loss_weight: self.loss_weight.eval(t, total)?,
            threshold: self.threshold.eval(t, total)?,
            momentum: self.momentum.eval(t, total)?,
            aug: self.aug.clone(),
        })
    }
}

/// Policy values in force during one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub sampling: f64,
    pub loss_weight: f64,
    pub threshold: f64,
    pub momentum: f64,
    pub aug: AugConfig,
}

/// Keeps each element independently with probability `rate`.
pub fn sample_unlabelled<T: Clone, R: Rng + ?Sized>(batch: &[T], rate: f64, rng: &mut R) -> Vec<T> {
    let rate = rate.clamp(0.0, 1.0);
    batch.iter().filter(|_| rng.gen::<f64>() < rate).cloned().collect()
}

/// Empirical covariance `(1/n) sum (l - mean l)(p - mean p)` between
/// per-sample unsupervised losses and their sampling weights.
pub fn covariance_diagnostic(losses: &[f64], probs: &[f64]) -> Result<f64> {
    if losses.len() != probs.len() {
        return Err(Error::LengthMismatch { left: losses.len(), right: probs.len() });
    }
    if losses.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: losses.len() });
    }
    let n = losses.len() as f64;
    let ml = losses.iter().sum::<f64>() / n;
    let mp = probs.iter().sum::<f64>() / n;
    Ok(losses.iter().zip(probs).map(|(l, p)| (l - ml) * (p - mp)).sum::<f64>() / n)
}
