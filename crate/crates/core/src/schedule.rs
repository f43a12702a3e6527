//! DDPM noise schedule and the closed-form forward diffusion.

use crate::error::{HgError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from explicit betas. Exists mainly so degenerate schedules
    /// (e.g. T=1) can be constructed in tests.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(HgError::validation("schedule needs at least one beta"));
        }
        for (i, &b) in beta.iter().enumerate() {
            if !(0.0 < b && b < 1.0) {
                return Err(HgError::validation(format!(
                    "beta[{i}] = {b} outside (0, 1)"
                )));
            }
            if i > 0 && b < beta[i - 1] {
                return Err(HgError::validation(format!(
                    "beta must be non-decreasing, beta[{i}] = {b} < beta[{}] = {}",
                    i - 1,
                    beta[i - 1]
                )));
            }
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule {
            t_max: beta.len(),
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn len(&self) -> usize {
        self.t_max
    }

    pub fn is_empty(&self) -> bool {
        self.t_max == 0
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.t_max {
            return Err(HgError::validation(format!(
                "timestep {t} out of range [0, {})",
                self.t_max
            )));
        }
        Ok(())
    }
}

/// Linear beta grid from `beta_min` to `beta_max` over `t_max` steps.
pub fn make_schedule(t_max: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(HgError::validation(format!(
            "make_schedule: T must be >= 2, got {t_max}"
        )));
    }
    if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
        return Err(HgError::validation(format!(
            "make_schedule: need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let beta = (0..t_max)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t_max - 1) as f64)
        .collect();
    NoiseSchedule::from_betas(beta)
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(HgError::ShapeMismatch {
            op: "forward_diffuse",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let ab = sched.alpha_bar[t];
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Tensor::new(
        x0.shape().to_vec(),
        x0.data()
            .iter()
            .zip(eps.data())
            .map(|(&x, &e)| s * x + n * e)
            .collect(),
    )
}
