//! Gradient steps for the trainers: plain gradient steps with global norm
//! clipping, or per-array RMS-normalized steps, under a cosine schedule.

use std::f64::consts::PI;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{GradientSet, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// `θ ← θ - lr · clip(g)`.
    Sgd,
    /// Each array moves by `lr · g / rms(g)`, so every array takes a step of
    /// RMS size `lr` regardless of its gradient scale. Momentum-free.
    ArrayRms,
}

impl FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "array_rms" => Ok(Optimizer::ArrayRms),
            _ => Err(Error::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

/// Cosine decay from `base` at step 0 towards 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Rescale factor that brings `norm` down to at most `max_norm`.
pub fn clip_factor(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm && norm > 0.0 {
        max_norm / norm
    } else {
        1.0
    }
}

/// Step against `grads` (descent) or along them (`ascent = true`). Returns
/// the unclipped gradient norm.
pub fn apply(params: &mut ParamSet, grads: &GradientSet, lr: f64, opt: Optimizer, clip: f64, ascent: bool) -> f64 {
    let norm = grads.param_norm();
    let dir = if ascent { 1.0 } else { -1.0 };
    let c = clip_factor(norm, clip);
    for (p, g) in params.trainable_mut().into_iter().zip(grads.arrays()) {
        let scale = match opt {
            Optimizer::Sgd => c,
            Optimizer::ArrayRms => {
                if g.is_empty() {
                    continue;
                }
                let rms = (g.iter().map(|x| x * x).sum::<f64>() / g.len() as f64).sqrt();
                if rms == 0.0 {
                    continue;
                }
                1.0 / rms
            }
        };
        p.iter_mut().zip(g).for_each(|(w, gi)| *w += dir * lr * scale * gi);
    }
    norm
}
