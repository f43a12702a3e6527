//! Reverse-process samplers: ancestral DDPM, DDIM, and the noise-then-denoise
//! reconstruction operator that builds intermediate-domain images.
//!
//! Every sampler is a pure function of (parameters, condition, rng state,
//! config). Batched variants run items in lockstep but draw each item's noise
//! from its own stream, so a batched sample is bit-identical to a solo one.

use serde::{Deserialize, Serialize};

use crate::error::{HgError, Result};
use crate::model::{AdapterSet, Conditioner, Denoiser};
use crate::rng::RngStream;
use crate::schedule::{forward_diffuse, NoiseSchedule};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    AncestralDdpm,
    Ddim,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub guidance_scale: f64,
    pub eta: f64,
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.len() {
            return Err(HgError::validation(format!(
                "sampler steps {} outside [1, {}]",
                self.steps,
                sched.len()
            )));
        }
        if self.kind == SamplerKind::AncestralDdpm && self.steps != sched.len() {
            return Err(HgError::validation(
                "ancestral-ddpm visits every timestep; set steps = T or use ddim",
            ));
        }
        if self.guidance_scale < 0.0 {
            return Err(HgError::validation("guidance scale must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(HgError::validation("eta must be in [0, 1]"));
        }
        Ok(())
    }
}

/// A ready-to-sample model: denoiser (optionally with runtime adapters),
/// conditioner, and the conditioner-adapter inference gate.
#[derive(Clone, Debug)]
pub struct InferenceModel {
    pub denoiser: Denoiser,
    pub adapters: Option<AdapterSet>,
    pub conditioner: Conditioner,
    /// Apply the conditioner adapter at this weight when the gate is open.
    pub cond_adapter_weight: Option<f64>,
    /// Gate: conditioner adapter active for timesteps >= this value.
    pub cond_gate_from: Option<usize>,
}

impl InferenceModel {
    pub fn plain(denoiser: Denoiser, conditioner: Conditioner) -> Self {
        InferenceModel {
            denoiser,
            conditioner,
            adapters: None,
            cond_adapter_weight: None,
            cond_gate_from: None,
        }
    }

    fn cond_rows(&self, prompts: &[Option<u32>], t: usize) -> Result<Tensor> {
        let use_adapter = match (self.cond_adapter_weight, self.cond_gate_from) {
            (Some(_), Some(lo)) => t >= lo,
            (Some(_), None) => true,
            (None, _) => false,
        };
        let w = if use_adapter { self.cond_adapter_weight } else { None };
        self.conditioner.embed_rows(prompts, w)
    }

    /// Classifier-free guided prediction for a batch at one timestep:
    /// eps_uncond + scale * (eps_cond - eps_uncond). Scales 0 and 1 return
    /// the unconditional / conditional branch exactly.
    pub fn cfg_predict(
        &self,
        x: &Tensor,
        t: usize,
        prompts: &[Option<u32>],
        scale: f64,
    ) -> Result<Tensor> {
        let rows = x.shape()[0];
        if prompts.len() != rows {
            return Err(HgError::validation(format!(
                "cfg_predict: {} prompts for {} rows",
                prompts.len(),
                rows
            )));
        }
        let ts = vec![t; rows];
        if scale == 0.0 {
            let nulls = vec![None; rows];
            let cond = self.cond_rows(&nulls, t)?;
            return self.denoiser.predict(x, &ts, &cond, self.adapters.as_ref());
        }
        if scale == 1.0 {
            let cond = self.cond_rows(prompts, t)?;
            return self.denoiser.predict(x, &ts, &cond, self.adapters.as_ref());
        }
        // one batched forward over [cond rows; uncond rows]
        let mut both_prompts: Vec<Option<u32>> = prompts.to_vec();
        both_prompts.extend(std::iter::repeat(None).take(rows));
        let cond = self.cond_rows(&both_prompts, t)?;
        let stacked = Tensor::stack_rows(&[x, x])?.reshape(vec![rows * 2, x.shape()[1]])?;
        let ts2 = vec![t; rows * 2];
        let eps = self
            .denoiser
            .predict(&stacked, &ts2, &cond, self.adapters.as_ref())?;
        let d = x.shape()[1];
        let mut out = Vec::with_capacity(rows * d);
        for i in 0..rows * d {
            let c = eps.data()[i];
            let u = eps.data()[rows * d + i];
            out.push(u + scale * (c - u));
        }
        Tensor::new(vec![rows, d], out)
    }
}

/// Run ancestral DDPM steps from `from_t` down to 0 on row-major batch `x`.
/// sigma_t = sqrt(beta_t); no noise is added at the final step.
fn ancestral_descent(
    model: &InferenceModel,
    mut x: Tensor,
    from_t: usize,
    prompts: &[Option<u32>],
    rngs: &mut [RngStream],
    guidance: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    for t in (0..=from_t).rev() {
        let eps = model.cfg_predict(&x, t, prompts, guidance)?;
        let a = sched.alpha[t];
        let ab = sched.alpha_bar[t];
        let c1 = (1.0 - a) / (1.0 - ab).sqrt();
        let c2 = 1.0 / a.sqrt();
        let sigma = sched.beta[t].sqrt();
        {
            let xd = x.data_mut();
            for i in 0..rows * d {
                xd[i] = c2 * (xd[i] - c1 * eps.data()[i]);
            }
            if t > 0 {
                for (r, rng) in rngs.iter_mut().enumerate() {
                    for j in 0..d {
                        xd[r * d + j] += sigma * rng.normal();
                    }
                }
            }
        }
        if !x.is_finite() {
            return Err(HgError::numeric(format!(
                "non-finite sample state at timestep {t}"
            )));
        }
    }
    Ok(x)
}

/// DDIM timestep subsequence, descending. With steps = T this is every
/// integer timestep.
fn ddim_taus(steps: usize, t_max: usize) -> Vec<usize> {
    let mut taus: Vec<usize> = (0..steps).map(|i| ((i + 1) * t_max) / steps - 1).collect();
    taus.dedup();
    taus.reverse();
    taus
}

fn ddim_descent(
    model: &InferenceModel,
    mut x: Tensor,
    prompts: &[Option<u32>],
    rngs: &mut [RngStream],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    let taus = ddim_taus(cfg.steps, sched.len());
    for (i, &t) in taus.iter().enumerate() {
        let eps = model.cfg_predict(&x, t, prompts, cfg.guidance_scale)?;
        let ab = sched.alpha_bar[t];
        let ab_prev = taus.get(i + 1).map(|&p| sched.alpha_bar[p]).unwrap_or(1.0);
        let sigma =
            cfg.eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        {
            let xd = x.data_mut();
            for k in 0..rows * d {
                let x0_hat = (xd[k] - (1.0 - ab).sqrt() * eps.data()[k]) / ab.sqrt();
                xd[k] = ab_prev.sqrt() * x0_hat + dir * eps.data()[k];
            }
            if sigma > 0.0 {
                for (r, rng) in rngs.iter_mut().enumerate() {
                    for j in 0..d {
                        xd[r * d + j] += sigma * rng.normal();
                    }
                }
            }
        }
        if !x.is_finite() {
            return Err(HgError::numeric(format!(
                "non-finite sample state at timestep {t}"
            )));
        }
    }
    Ok(x)
}

/// Generate one image per (prompt, rng) pair, batched in lockstep.
/// Outputs are [C, H, W] tensors clamped to [-1, 1] at the end only.
pub fn sample_batch(
    model: &InferenceModel,
    prompts: &[Option<u32>],
    rngs: &mut [RngStream],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<Tensor>> {
    cfg.validate(sched)?;
    if prompts.len() != rngs.len() || prompts.is_empty() {
        return Err(HgError::validation("sample_batch: prompts/rngs mismatch"));
    }
    let mc = &model.denoiser.cfg;
    let d = mc.image_dim();
    let rows = prompts.len();
    let mut data = Vec::with_capacity(rows * d);
    for rng in rngs.iter_mut() {
        for _ in 0..d {
            data.push(rng.normal());
        }
    }
    let x = Tensor::new(vec![rows, d], data)?;
    let out = match cfg.kind {
        SamplerKind::AncestralDdpm => ancestral_descent(
            model,
            x,
            sched.len() - 1,
            prompts,
            rngs,
            cfg.guidance_scale,
            sched,
        )?,
        SamplerKind::Ddim => ddim_descent(model, x, prompts, rngs, cfg, sched)?,
    };
    let out = out.clamp(-1.0, 1.0);
    (0..rows)
        .map(|i| out.row(i)?.reshape(vec![mc.channels, mc.height, mc.width]))
        .collect()
}

pub fn sample_one(
    model: &InferenceModel,
    prompt: Option<u32>,
    rng: &mut RngStream,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let mut rngs = [*rng];
    let out = sample_batch(model, &[prompt], &mut rngs, cfg, sched)?;
    *rng = rngs[0];
    Ok(out.into_iter().next().expect("one sample"))
}

/// Diffuse real images to timestep `t`, then reconstruct by ancestral
/// descent over every integer timestep from t down to 0, with the same
/// guidance scale as generation. `t = 0` is the identity.
pub fn sdrecon_batch(
    model: &InferenceModel,
    prompts: &[Option<u32>],
    x_reals: &[&Tensor],
    t: usize,
    rngs: &mut [RngStream],
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<Tensor>> {
    if prompts.len() != x_reals.len() || prompts.len() != rngs.len() || prompts.is_empty() {
        return Err(HgError::validation("sdrecon_batch: length mismatch"));
    }
    let mc = &model.denoiser.cfg;
    let d = mc.image_dim();
    if t == 0 {
        return Ok(x_reals.iter().map(|&x| x.clone()).collect());
    }
    sched.check_t(t)?;
    let rows = prompts.len();
    let mut flat = Vec::with_capacity(rows * d);
    for (x, rng) in x_reals.iter().zip(rngs.iter_mut()) {
        if x.numel() != d {
            return Err(HgError::ShapeMismatch {
                op: "sdrecon",
                lhs: x.shape().to_vec(),
                rhs: vec![mc.channels, mc.height, mc.width],
            });
        }
        let eps = rng.normal_tensor(vec![d]);
        let noisy = forward_diffuse(&x.reshape(vec![d])?, t, &eps, sched)?;
        flat.extend_from_slice(noisy.data());
    }
    let x = Tensor::new(vec![rows, d], flat)?;
    let out = ancestral_descent(model, x, t, prompts, rngs, cfg.guidance_scale, sched)?;
    let out = out.clamp(-1.0, 1.0);
    (0..rows)
        .map(|i| out.row(i)?.reshape(vec![mc.channels, mc.height, mc.width]))
        .collect()
}

pub fn sdrecon_one(
    model: &InferenceModel,
    prompt: Option<u32>,
    x_real: &Tensor,
    t: usize,
    rng: &mut RngStream,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let mut rngs = [*rng];
    let out = sdrecon_batch(model, &[prompt], &[x_real], t, &mut rngs, cfg, sched)?;
    *rng = rngs[0];
    Ok(out.into_iter().next().expect("one reconstruction"))
}
