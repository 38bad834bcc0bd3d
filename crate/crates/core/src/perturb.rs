//! Norm balls, projections and projected sign/normalized gradient ascent on
//! an additive image perturbation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

impl FromStr for Norm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linf" | "l_inf" | "inf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            _ => Err(Error::Config(format!("unknown norm {s:?}"))),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        })
    }
}

/// Sign with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn linf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn norm_of(v: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::Linf => linf_norm(v),
        Norm::L2 => l2_norm(v),
    }
}

/// Relative slack on the L2 radius. Rescaling can land one ulp outside the
/// ball; without the slack a second projection would move the point again.
pub const L2_SLACK: f64 = 1e-12;

/// Project onto the closed ball of radius `eps`: coordinate clamping for
/// L∞, radial rescaling for L2.
pub fn project(delta: &mut [f64], norm: Norm, eps: f64) {
    match norm {
        Norm::Linf => delta.iter_mut().for_each(|x| *x = x.clamp(-eps, eps)),
        Norm::L2 => {
            let n = l2_norm(delta);
            if n > eps * (1.0 + L2_SLACK) {
                let s = eps / n;
                delta.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
}

/// One ascent step of size `alpha` along `grad`: the sign for L∞, the unit
/// direction for L2 (no move when the gradient vanishes).
pub fn ascent_step(delta: &mut [f64], grad: &[f64], norm: Norm, alpha: f64) {
    match norm {
        Norm::Linf => delta.iter_mut().zip(grad).for_each(|(d, g)| *d += alpha * sign(*g)),
        Norm::L2 => {
            let n = l2_norm(grad);
            if n > 0.0 {
                delta.iter_mut().zip(grad).for_each(|(d, g)| *d += alpha * g / n);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdParams {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub norm: Norm,
}

impl PgdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::Config("PGD needs at least one step".into()));
        }
        Ok(())
    }
}

/// Zero-initialized projected ascent. `grad_at(image + delta)` returns the
/// gradient to ascend. Returns the final perturbation and the largest norm
/// seen over all iterates.
pub fn pgd_ascend(
    image: &[f64],
    params: &PgdParams,
    mut grad_at: impl FnMut(&[f64], usize) -> Result<Vec<f64>>,
) -> Result<(Vec<f64>, f64)> {
    params.validate()?;
    let mut delta = vec![0.0; image.len()];
    let mut worst: f64 = 0.0;
    let mut x = image.to_vec();
    for step in 0..params.steps {
        let g = grad_at(&x, step)?;
        ascent_step(&mut delta, &g, params.norm, params.alpha);
        project(&mut delta, params.norm, params.epsilon);
        worst = worst.max(norm_of(&delta, params.norm));
        for ((xi, &i0), &d) in x.iter_mut().zip(image).zip(&delta) {
            *xi = i0 + d;
        }
    }
    Ok((delta, worst))
}

pub fn add(image: &[f64], delta: &[f64]) -> Vec<f64> {
    image.iter().zip(delta).map(|(a, b)| a + b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sign_step_arithmetic() {
        let mut d = vec![0.0; 3];
        ascent_step(&mut d, &[2.0, -3.0, 0.0], Norm::Linf, 0.002);
        assert_eq!(d, vec![0.002, -0.002, 0.0]);
    }

    #[test]
    fn zero_steps_rejected() {
        let p = PgdParams { epsilon: 0.1, alpha: 0.01, steps: 0, norm: Norm::Linf };
        assert!(matches!(pgd_ascend(&[0.0], &p, |_, _| Ok(vec![1.0])), Err(Error::Config(_))));
    }

    #[test]
    fn iterates_stay_feasible() {
        let p = PgdParams { epsilon: 0.01, alpha: 0.004, steps: 7, norm: Norm::Linf };
        let (d, worst) = pgd_ascend(&[1.0, 2.0], &p, |_, _| Ok(vec![1.0, -1.0])).unwrap();
        assert_eq!(d, vec![0.01, -0.01]);
        assert!(worst <= 0.01);
    }

    proptest! {
        #[test]
        fn projection_contract(v in proptest::collection::vec(-5.0f64..5.0, 1..12), eps in 0.01f64..3.0, l2 in any::<bool>()) {
            let norm = if l2 { Norm::L2 } else { Norm::Linf };
            let mut p = v.clone();
            project(&mut p, norm, eps);
            prop_assert!(norm_of(&p, norm) <= eps * (1.0 + 1e-12));
            let mut q = p.clone();
            project(&mut q, norm, eps);
            prop_assert_eq!(&p, &q);
            if norm_of(&v, norm) <= eps {
                prop_assert_eq!(&p, &v);
            }
            if l2 {
                // Direction preserved: p is a nonnegative multiple of v.
                let dot: f64 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
                prop_assert!((dot - l2_norm(&p) * l2_norm(&v)).abs() <= 1e-9 * (1.0 + l2_norm(&v).powi(2)));
            }
        }
    }
}
