//! Training objectives.
//!
//! All losses are built on a [`Graph`] against *bound* models; frozen
//! reference/base branches run as plain tensor math and enter the graph as
//! constants, so gradient work is spent only on the trainable side.
//!
//! The preference loss compares per-item denoising errors against a frozen
//! reference: with D(m, x, eps) the per-element mean squared error of m's
//! noise prediction on the diffused x,
//!
//!   inside = -(beta/2) * [(D(theta,x_w) - D(ref,x_w)) - (D(theta,x_l) - D(ref,x_l))]
//!   loss   = -log sigmoid(inside)
//!
//! The statistics-matching loss takes one ancestral step from the winner's
//! noisy latent with the trainable model and with the frozen base model
//! (sharing the step noise z by default) and penalizes the squared
//! channel-mean gap between the two results. With shared z this collapses
//! to kappa(t)^2 * ||mu_ch(eps_theta) - mu_ch(eps_base)||^2 with
//! kappa(t) = (1 - alpha_t) / (sqrt(alpha_t) * sqrt(1 - alpha_bar_t)).

use serde::{Deserialize, Serialize};

use crate::error::{HgError, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{AdapterSet, BoundModel, Denoiser};
use crate::schedule::NoiseSchedule;
use crate::tensor::{pairwise_sum, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimestepWeight {
    Constant,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub timestep_weight: TimestepWeight,
}

impl DpoConfig {
    pub fn with_beta(beta: f64) -> Self {
        DpoConfig {
            beta,
            timestep_weight: TimestepWeight::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(HgError::validation("dpo beta must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatConfig {
    pub lambda_stat: f64,
    /// Share the ancestral-step noise z between the trainable and base
    /// branches (isolates the model-mean difference).
    pub share_noise: bool,
}

impl StatConfig {
    pub fn with_lambda(lambda_stat: f64) -> Self {
        StatConfig {
            lambda_stat,
            share_noise: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_stat < 0.0 {
            return Err(HgError::validation("lambda_stat must be >= 0"));
        }
        Ok(())
    }
}

/// A frozen model branch (reference or base) with fixed condition rows.
pub struct FrozenBranch<'a> {
    pub denoiser: &'a Denoiser,
    pub adapters: Option<&'a AdapterSet>,
    pub cond_rows: &'a Tensor,
}

impl FrozenBranch<'_> {
    pub fn predict(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.denoiser
            .predict(x_t, ts, self.cond_rows, self.adapters)
    }
}

/// Forward-diffuse a batch where every row has its own timestep.
pub fn diffuse_rows(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let (rows, d) = (x0.shape()[0], x0.shape()[1]);
    if eps.shape() != x0.shape() {
        return Err(HgError::ShapeMismatch {
            op: "diffuse_rows",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    if ts.len() != rows {
        return Err(HgError::validation("diffuse_rows: ts/rows mismatch"));
    }
    let mut data = Vec::with_capacity(rows * d);
    for (r, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let ab = sched.alpha_bar[t];
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in 0..d {
            data.push(s * x0.data()[r * d + j] + n * eps.data()[r * d + j]);
        }
    }
    Tensor::new(vec![rows, d], data)
}

/// Per-row mean squared error between a prediction node and a target
/// tensor, as a [rows, 1] node.
pub fn row_mse(g: &mut Graph, pred: NodeId, target: &Tensor) -> Result<NodeId> {
    let t = g.constant(target.clone());
    let diff = g.sub(t, pred)?;
    let sq = g.square(diff);
    g.row_mean(sq)
}

/// Mean over elements of the squared noise-prediction error.
pub fn sft_loss(
    g: &mut Graph,
    model: &BoundModel,
    cond: NodeId,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<NodeId> {
    let x_t = diffuse_rows(x0, ts, eps, sched)?;
    let x_t = g.constant(x_t);
    let pred = model.forward(g, x_t, ts, cond)?;
    let target = g.constant(eps.clone());
    let diff = g.sub(target, pred)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// One preference batch: winners, losers, shared timesteps and noises.
pub struct DpoBatch<'a> {
    pub x_w: &'a Tensor,
    pub x_l: &'a Tensor,
    pub ts: &'a [usize],
    pub eps_w: &'a Tensor,
    pub eps_l: &'a Tensor,
}

pub struct DpoTerms {
    pub inside: NodeId,
    pub loss: NodeId,
    /// theta's prediction on the winner's noisy latent (reused by the
    /// statistics-matching term).
    pub pred_w: NodeId,
    /// the winner's noisy latent itself
    pub latent_w: Tensor,
}

pub fn dpo_loss(
    g: &mut Graph,
    theta: &BoundModel,
    cond: NodeId,
    reference: &FrozenBranch<'_>,
    batch: &DpoBatch<'_>,
    sched: &NoiseSchedule,
    cfg: &DpoConfig,
) -> Result<DpoTerms> {
    cfg.validate()?;
    let lt_w = diffuse_rows(batch.x_w, batch.ts, batch.eps_w, sched)?;
    let lt_l = diffuse_rows(batch.x_l, batch.ts, batch.eps_l, sched)?;

    let lt_w_node = g.constant(lt_w.clone());
    let pred_w = theta.forward(g, lt_w_node, batch.ts, cond)?;
    let d_theta_w = row_mse(g, pred_w, batch.eps_w)?;

    let lt_l_node = g.constant(lt_l.clone());
    let pred_l = theta.forward(g, lt_l_node, batch.ts, cond)?;
    let d_theta_l = row_mse(g, pred_l, batch.eps_l)?;

    let ref_w = reference.predict(&lt_w, batch.ts)?;
    let ref_l = reference.predict(&lt_l, batch.ts)?;
    let d_ref_w = g.constant(mse_rows(batch.eps_w, &ref_w)?);
    let d_ref_l = g.constant(mse_rows(batch.eps_l, &ref_l)?);

    let diff_w = g.sub(d_theta_w, d_ref_w)?;
    let diff_l = g.sub(d_theta_l, d_ref_l)?;
    let gap = g.sub(diff_w, diff_l)?;
    let inside = g.scalar_mul(gap, -cfg.beta / 2.0);
    let ls = g.log_sigmoid(inside);
    let mean_ls = g.mean(ls);
    let loss = g.scalar_mul(mean_ls, -1.0);
    Ok(DpoTerms {
        inside,
        loss,
        pred_w,
        latent_w: lt_w,
    })
}

/// Pure per-row mse between target noise and a prediction.
fn mse_rows(target: &Tensor, pred: &Tensor) -> Result<Tensor> {
    let diff = target.sub(pred)?;
    let sq = diff.mul(&diff)?;
    sq.row_mean()
}

fn step_coeffs(
    ts: &[usize],
    d: usize,
    sched: &NoiseSchedule,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let rows = ts.len();
    let mut c1 = Vec::with_capacity(rows * d);
    let mut c2 = Vec::with_capacity(rows * d);
    let mut sigma = Vec::with_capacity(rows);
    for &t in ts {
        if t == 0 {
            return Err(HgError::validation(
                "statistics loss needs t >= 1 (no previous timestep at t = 0)",
            ));
        }
        sched.check_t(t)?;
        let a = sched.alpha[t];
        let ab = sched.alpha_bar[t];
        let k1 = (1.0 - a) / (1.0 - ab).sqrt();
        let k2 = 1.0 / a.sqrt();
        c1.extend(std::iter::repeat(k1).take(d));
        c2.extend(std::iter::repeat(k2).take(d));
        sigma.push(sched.beta[t].sqrt());
    }
    Ok((
        Tensor::new(vec![rows, d], c1)?,
        Tensor::new(vec![rows, d], c2)?,
        sigma,
    ))
}

/// kappa(t) of the closed form the shared-noise loss collapses to.
pub fn stat_kappa(t: usize, sched: &NoiseSchedule) -> f64 {
    (1.0 - sched.alpha[t]) / (sched.alpha[t].sqrt() * (1.0 - sched.alpha_bar[t]).sqrt())
}

/// Squared channel-mean gap between one ancestral step taken with the
/// trainable prediction and one taken with the frozen base prediction.
///
/// `z` is the trainable branch's step noise; `z_base` defaults to z
/// (shared). Expects `pred_theta` to be the trainable model's prediction
/// on `latent` (the winner's noisy latent at per-row timesteps `ts`).
#[allow(clippy::too_many_arguments)]
pub fn stat_matching_loss(
    g: &mut Graph,
    pred_theta: NodeId,
    base_pred: &Tensor,
    latent: &Tensor,
    ts: &[usize],
    z: &Tensor,
    z_base: Option<&Tensor>,
    channels: usize,
    sched: &NoiseSchedule,
) -> Result<NodeId> {
    let (rows, d) = (latent.shape()[0], latent.shape()[1]);
    let (c1, c2, sigma) = step_coeffs(ts, d, sched)?;
    let scaled_noise = |zz: &Tensor| -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows * d);
        for r in 0..rows {
            for j in 0..d {
                data.push(sigma[r] * zz.data()[r * d + j]);
            }
        }
        Tensor::new(vec![rows, d], data)
    };
    let sz_theta = scaled_noise(z)?;
    let sz_base = scaled_noise(z_base.unwrap_or(z))?;

    // trainable branch, in-graph: ((latent - c1*pred) * c2) + sigma*z
    let c1_node = g.constant(c1.clone());
    let scaled_pred = g.mul(c1_node, pred_theta)?;
    let latent_node = g.constant(latent.clone());
    let centered = g.sub(latent_node, scaled_pred)?;
    let c2_node = g.constant(c2.clone());
    let stepped = g.mul(centered, c2_node)?;
    let sz_node = g.constant(sz_theta);
    let prev_theta = g.add(stepped, sz_node)?;

    // base branch, identical op order in plain tensors
    let prev_base = latent.sub(&c1.mul(base_pred)?)?.mul(&c2)?.add(&sz_base)?;

    let mu_theta = g.channel_mean(prev_theta, channels)?;
    let mu_base = g.constant(prev_base.channel_mean(channels)?);
    let gap = g.sub(mu_theta, mu_base)?;
    let sq = g.square(gap);
    let mean = g.mean(sq);
    // mean over B*C, but the objective is the per-item sum over channels
    Ok(g.scalar_mul(mean, channels as f64))
}

pub struct EasyTerms {
    pub dpo: DpoTerms,
    pub stat: Option<NodeId>,
    pub total: NodeId,
}

/// Combined preference + statistics objective. The statistics term reuses
/// the preference term's winner timesteps, noise, and theta prediction.
#[allow(clippy::too_many_arguments)]
pub fn easy_objective(
    g: &mut Graph,
    theta: &BoundModel,
    cond: NodeId,
    reference: &FrozenBranch<'_>,
    base: &FrozenBranch<'_>,
    batch: &DpoBatch<'_>,
    z: &Tensor,
    z_base: Option<&Tensor>,
    channels: usize,
    sched: &NoiseSchedule,
    dpo_cfg: &DpoConfig,
    stat_cfg: &StatConfig,
) -> Result<EasyTerms> {
    stat_cfg.validate()?;
    let dpo = dpo_loss(g, theta, cond, reference, batch, sched, dpo_cfg)?;
    if stat_cfg.lambda_stat == 0.0 {
        let total = dpo.loss;
        return Ok(EasyTerms {
            dpo,
            stat: None,
            total,
        });
    }
    let base_pred = base.predict(&dpo.latent_w, batch.ts)?;
    let stat = stat_matching_loss(
        g,
        dpo.pred_w,
        &base_pred,
        &dpo.latent_w,
        batch.ts,
        z,
        z_base,
        channels,
        sched,
    )?;
    let weighted = g.scalar_mul(stat, stat_cfg.lambda_stat);
    let total = g.add(dpo.loss, weighted)?;
    Ok(EasyTerms {
        dpo,
        stat: Some(stat),
        total,
    })
}

/// Per-channel renormalization of `h_hat` to `h_base`'s statistics.
/// Axis 0 is the channel axis; statistics run over the remaining axes.
pub fn lan_transform(h_hat: &Tensor, h_base: &Tensor) -> Result<Tensor> {
    if h_hat.shape() != h_base.shape() {
        return Err(HgError::ShapeMismatch {
            op: "lan_transform",
            lhs: h_hat.shape().to_vec(),
            rhs: h_base.shape().to_vec(),
        });
    }
    if h_hat.shape().len() < 2 {
        return Err(HgError::validation("lan_transform expects [C, ...]"));
    }
    let c = h_hat.shape()[0];
    let block = h_hat.numel() / c;
    let stats = |t: &Tensor, ch: usize| -> (f64, f64) {
        let slice = &t.data()[ch * block..(ch + 1) * block];
        let mean = pairwise_sum(slice) / block as f64;
        let sq: Vec<f64> = slice.iter().map(|v| (v - mean) * (v - mean)).collect();
        (mean, (pairwise_sum(&sq) / block as f64).sqrt())
    };
    let mut data = Vec::with_capacity(h_hat.numel());
    for ch in 0..c {
        let (mu_hat, sd_hat) = stats(h_hat, ch);
        if sd_hat <= 0.0 {
            return Err(HgError::numeric(format!(
                "lan_transform: zero standard deviation in channel {ch}"
            )));
        }
        let (mu_base, sd_base) = stats(h_base, ch);
        for v in &h_hat.data()[ch * block..(ch + 1) * block] {
            data.push(((v - mu_hat) / sd_hat) * sd_base + mu_base);
        }
    }
    Tensor::new(h_hat.shape().to_vec(), data)
}

/// Cosine distances (1 - cosine similarity) between the dataset-averaged
/// channel-mean vectors and channel-std vectors of two image sets.
pub fn latent_stat_cosine(winners: &[Tensor], losers: &[Tensor]) -> Result<(f64, f64)> {
    if winners.is_empty() || losers.is_empty() {
        return Err(HgError::validation("latent_stat_cosine: empty set"));
    }
    let set_stats = |set: &[Tensor]| -> (Vec<f64>, Vec<f64>) {
        let c = set[0].shape()[0];
        let mut mu = vec![0.0; c];
        let mut sd = vec![0.0; c];
        for img in set {
            let block = img.numel() / c;
            for ch in 0..c {
                let slice = &img.data()[ch * block..(ch + 1) * block];
                let m = pairwise_sum(slice) / block as f64;
                let sq: Vec<f64> = slice.iter().map(|v| (v - m) * (v - m)).collect();
                mu[ch] += m;
                sd[ch] += (pairwise_sum(&sq) / block as f64).sqrt();
            }
        }
        let n = set.len() as f64;
        mu.iter_mut().for_each(|v| *v /= n);
        sd.iter_mut().for_each(|v| *v /= n);
        (mu, sd)
    };
    let (mu_w, sd_w) = set_stats(winners);
    let (mu_l, sd_l) = set_stats(losers);
    Ok((cosine_distance(&mu_w, &mu_l), cosine_distance(&sd_w, &sd_l)))
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 0.0 } else { 1.0 };
    }
    1.0 - (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Conditioner, ModelConfig, TrainScope};
    use crate::rng::RngStream;
    use crate::schedule::make_schedule;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            channels: 2,
            height: 2,
            width: 2,
            hidden: 6,
            blocks: 1,
            time_dim: 4,
            cond_dim: 3,
            cond_table_dim: 4,
            num_prompts: 3,
            lora_rank: 2,
            cond_lora_rank: 2,
        }
    }

    struct Fixture {
        den: Denoiser,
        other: Denoiser,
        cond_rows: Tensor,
        sched: NoiseSchedule,
    }

    fn fixture(seed: u64) -> Fixture {
        let cfg = tiny_cfg();
        let mut rng = RngStream::new(seed);
        let den = Denoiser::init(&cfg, &mut rng);
        let other = Denoiser::init(&cfg, &mut rng);
        let conditioner = Conditioner::init(&cfg, &mut rng);
        let cond_rows = conditioner
            .embed_rows(&[Some(0), Some(1), Some(2)], None)
            .unwrap();
        let sched = make_schedule(20, 1e-3, 0.2).unwrap();
        Fixture {
            den,
            other,
            cond_rows,
            sched,
        }
    }

    fn batch_from(rng: &mut RngStream, d: usize) -> (Tensor, Tensor, Vec<usize>, Tensor, Tensor) {
        let x_w = rng.normal_tensor(vec![3, d]);
        let x_l = rng.normal_tensor(vec![3, d]);
        let ts = vec![3, 9, 15];
        let eps_w = rng.normal_tensor(vec![3, d]);
        let eps_l = rng.normal_tensor(vec![3, d]);
        (x_w, x_l, ts, eps_w, eps_l)
    }

    #[test]
    fn zero_predictor_sft_loss_is_mean_square_noise() {
        let f = fixture(1);
        let mut den = f.den.clone();
        den.output_proj.w = Tensor::zeros(den.output_proj.w.shape().to_vec());
        den.output_proj.b = Tensor::zeros(den.output_proj.b.shape().to_vec());
        let mut rng = RngStream::new(2);
        let x0 = rng.normal_tensor(vec![3, 8]);
        let eps = rng.normal_tensor(vec![3, 8]);
        let mut g = Graph::new();
        let bound = den.bind(&mut g, None, TrainScope::Frozen);
        let cond = g.constant(f.cond_rows.clone());
        let loss = sft_loss(&mut g, &bound, cond, &x0, &[1, 5, 9], &eps, &f.sched).unwrap();
        assert!((g.value(loss).item() - eps.map(|v| v * v).mean()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_gives_zero_row_mse() {
        let mut g = Graph::new();
        let mut rng = RngStream::new(3);
        let target = rng.normal_tensor(vec![2, 4]);
        let pred = g.leaf(target.clone());
        let mse = row_mse(&mut g, pred, &target).unwrap();
        assert_eq!(g.value(mse).data(), &[0.0, 0.0]);
    }

    #[test]
    fn dpo_at_reference_is_ln2() {
        let f = fixture(4);
        let mut rng = RngStream::new(5);
        for _ in 0..20 {
            let (x_w, x_l, ts, eps_w, eps_l) = batch_from(&mut rng, 8);
            let mut g = Graph::new();
            let bound = f.den.bind(&mut g, None, TrainScope::Frozen);
            let cond = g.constant(f.cond_rows.clone());
            let reference = FrozenBranch {
                denoiser: &f.den,
                adapters: None,
                cond_rows: &f.cond_rows,
            };
            let batch = DpoBatch {
                x_w: &x_w,
                x_l: &x_l,
                ts: &ts,
                eps_w: &eps_w,
                eps_l: &eps_l,
            };
            let terms = dpo_loss(
                &mut g,
                &bound,
                cond,
                &reference,
                &batch,
                &f.sched,
                &DpoConfig::with_beta(2500.0),
            )
            .unwrap();
            assert!(g.value(terms.inside).data().iter().all(|v| v.abs() < 1e-12));
            assert!((g.value(terms.loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn dpo_swap_negates_inside_exactly() {
        let f = fixture(6);
        let mut rng = RngStream::new(7);
        let (x_w, x_l, ts, eps_w, eps_l) = batch_from(&mut rng, 8);
        let run = |a: &Tensor, b: &Tensor, ea: &Tensor, eb: &Tensor| {
            let mut g = Graph::new();
            let bound = f.other.bind(&mut g, None, TrainScope::Frozen);
            let cond = g.constant(f.cond_rows.clone());
            let reference = FrozenBranch {
                denoiser: &f.den,
                adapters: None,
                cond_rows: &f.cond_rows,
            };
            let batch = DpoBatch {
                x_w: a,
                x_l: b,
                ts: &ts,
                eps_w: ea,
                eps_l: eb,
            };
            let terms = dpo_loss(
                &mut g,
                &bound,
                cond,
                &reference,
                &batch,
                &f.sched,
                &DpoConfig::with_beta(2500.0),
            )
            .unwrap();
            g.value(terms.inside).data().to_vec()
        };
        let fwd = run(&x_w, &x_l, &eps_w, &eps_l);
        let swp = run(&x_l, &x_w, &eps_l, &eps_w);
        for (a, b) in fwd.iter().zip(&swp) {
            assert_eq!(*a, -*b, "inside must negate exactly under swap");
        }
    }

    #[test]
    fn stat_loss_zero_when_theta_equals_base() {
        let f = fixture(10);
        let mut rng = RngStream::new(11);
        let x_w = rng.normal_tensor(vec![3, 8]);
        let ts = vec![2, 7, 19];
        let eps = rng.normal_tensor(vec![3, 8]);
        let z = rng.normal_tensor(vec![3, 8]);
        let lt = diffuse_rows(&x_w, &ts, &eps, &f.sched).unwrap();
        let base_pred = f.den.predict(&lt, &ts, &f.cond_rows, None).unwrap();
        let mut g = Graph::new();
        let bound = f.den.bind(&mut g, None, TrainScope::Frozen);
        let cond = g.constant(f.cond_rows.clone());
        let pred = {
            let ltn = g.constant(lt.clone());
            bound.forward(&mut g, ltn, &ts, cond).unwrap()
        };
        let loss =
            stat_matching_loss(&mut g, pred, &base_pred, &lt, &ts, &z, None, 2, &f.sched).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn stat_loss_matches_kappa_closed_form() {
        let f = fixture(12);
        let mut rng = RngStream::new(13);
        let mut worst = 0.0f64;
        let cond2 = Tensor::stack_rows(&[
            &f.cond_rows.row(0).unwrap(),
            &f.cond_rows.row(1).unwrap(),
        ])
        .unwrap()
        .reshape(vec![2, 3])
        .unwrap();
        for trial in 0..100 {
            let x_w = rng.normal_tensor(vec![2, 8]);
            let t = 1 + (rng.next_u64() as usize) % (f.sched.len() - 1);
            let ts = vec![t, t];
            let eps = rng.normal_tensor(vec![2, 8]);
            let z = rng.normal_tensor(vec![2, 8]);
            let lt = diffuse_rows(&x_w, &ts, &eps, &f.sched).unwrap();
            let base_pred = f.den.predict(&lt, &ts, &cond2, None).unwrap();
            let theta_pred_pure = f.other.predict(&lt, &ts, &cond2, None).unwrap();

            let mut g = Graph::new();
            let bound = f.other.bind(&mut g, None, TrainScope::Frozen);
            let cond = g.constant(cond2.clone());
            let ltn = g.constant(lt.clone());
            let pred = bound.forward(&mut g, ltn, &ts, cond).unwrap();
            let loss =
                stat_matching_loss(&mut g, pred, &base_pred, &lt, &ts, &z, None, 2, &f.sched)
                    .unwrap();
            let got = g.value(loss).item();

            let kappa = stat_kappa(t, &f.sched);
            let mu_t = theta_pred_pure.channel_mean(2).unwrap();
            let mu_b = base_pred.channel_mean(2).unwrap();
            let mut expect = 0.0;
            for r in 0..2 {
                for c in 0..2 {
                    let dm = mu_t.data()[r * 2 + c] - mu_b.data()[r * 2 + c];
                    expect += kappa * kappa * dm * dm;
                }
            }
            expect /= 2.0; // batch mean
            worst = worst.max((got - expect).abs());
            assert!(
                (got - expect).abs() < 1e-9,
                "trial {trial}: {got} vs {expect}"
            );
        }
        assert!(worst < 1e-9, "worst {worst}");
    }

    #[test]
    fn stat_loss_constant_channel_offset() {
        // theta = base + c on channel 0 -> loss = kappa^2 c^2
        let f = fixture(14);
        let c_off = 0.37;
        let mut theta = f.den.clone();
        let block = 4; // h*w
        for j in 0..block {
            theta.output_proj.b.data_mut()[j] += c_off;
        }
        let mut rng = RngStream::new(15);
        let x_w = rng.normal_tensor(vec![1, 8]);
        let t = 9;
        let ts = vec![t];
        let eps = rng.normal_tensor(vec![1, 8]);
        let z = rng.normal_tensor(vec![1, 8]);
        let lt = diffuse_rows(&x_w, &ts, &eps, &f.sched).unwrap();
        let cond1 = f.cond_rows.row(0).unwrap();
        let base_pred = f.den.predict(&lt, &ts, &cond1, None).unwrap();
        let mut g = Graph::new();
        let bound = theta.bind(&mut g, None, TrainScope::Frozen);
        let cond = g.constant(cond1.clone());
        let ltn = g.constant(lt.clone());
        let pred = bound.forward(&mut g, ltn, &ts, cond).unwrap();
        let loss =
            stat_matching_loss(&mut g, pred, &base_pred, &lt, &ts, &z, None, 2, &f.sched).unwrap();
        let kappa = stat_kappa(t, &f.sched);
        let expect = kappa * kappa * c_off * c_off;
        assert!(
            (g.value(loss).item() - expect).abs() < 1e-9,
            "{} vs {expect}",
            g.value(loss).item()
        );
    }

    #[test]
    fn easy_objective_reduces_to_dpo_without_stat() {
        let f = fixture(16);
        let mut rng = RngStream::new(17);
        let (x_w, x_l, ts, eps_w, eps_l) = batch_from(&mut rng, 8);
        let z = rng.normal_tensor(vec![3, 8]);
        let mut g = Graph::new();
        let bound = f.other.bind(&mut g, None, TrainScope::Frozen);
        let cond = g.constant(f.cond_rows.clone());
        let reference = FrozenBranch {
            denoiser: &f.den,
            adapters: None,
            cond_rows: &f.cond_rows,
        };
        let base = FrozenBranch {
            denoiser: &f.den,
            adapters: None,
            cond_rows: &f.cond_rows,
        };
        let batch = DpoBatch {
            x_w: &x_w,
            x_l: &x_l,
            ts: &ts,
            eps_w: &eps_w,
            eps_l: &eps_l,
        };
        let terms = easy_objective(
            &mut g,
            &bound,
            cond,
            &reference,
            &base,
            &batch,
            &z,
            None,
            2,
            &f.sched,
            &DpoConfig::with_beta(2500.0),
            &StatConfig::with_lambda(0.0),
        )
        .unwrap();
        assert!(terms.stat.is_none());
        assert_eq!(g.value(terms.total).item(), g.value(terms.dpo.loss).item());
    }

    #[test]
    fn degenerate_easy_objective_is_ln2() {
        // theta = ref = base -> dpo = ln 2, stat = 0
        let f = fixture(18);
        let mut rng = RngStream::new(19);
        let (x_w, x_l, ts, eps_w, eps_l) = batch_from(&mut rng, 8);
        let z = rng.normal_tensor(vec![3, 8]);
        let mut g = Graph::new();
        let bound = f.den.bind(&mut g, None, TrainScope::Frozen);
        let cond = g.constant(f.cond_rows.clone());
        let reference = FrozenBranch {
            denoiser: &f.den,
            adapters: None,
            cond_rows: &f.cond_rows,
        };
        let base = FrozenBranch {
            denoiser: &f.den,
            adapters: None,
            cond_rows: &f.cond_rows,
        };
        let batch = DpoBatch {
            x_w: &x_w,
            x_l: &x_l,
            ts: &ts,
            eps_w: &eps_w,
            eps_l: &eps_l,
        };
        let terms = easy_objective(
            &mut g,
            &bound,
            cond,
            &reference,
            &base,
            &batch,
            &z,
            None,
            2,
            &f.sched,
            &DpoConfig::with_beta(2500.0),
            &StatConfig::with_lambda(10_000.0),
        )
        .unwrap();
        assert_eq!(g.value(terms.stat.unwrap()).item(), 0.0);
        assert!((g.value(terms.total).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn stat_loss_rejects_t_zero() {
        let f = fixture(20);
        let mut rng = RngStream::new(21);
        let lt = rng.normal_tensor(vec![1, 8]);
        let z = rng.normal_tensor(vec![1, 8]);
        let cond1 = f.cond_rows.row(0).unwrap();
        let base_pred = f.den.predict(&lt, &[0], &cond1, None).unwrap();
        let mut g = Graph::new();
        let bound = f.den.bind(&mut g, None, TrainScope::Frozen);
        let cond = g.constant(cond1);
        let ltn = g.constant(lt.clone());
        let pred = bound.forward(&mut g, ltn, &[0], cond).unwrap();
        let err = stat_matching_loss(&mut g, pred, &base_pred, &lt, &[0], &z, None, 2, &f.sched);
        assert!(err.is_err());
    }

    #[test]
    fn lan_identity_and_affine_invariance() {
        let mut rng = RngStream::new(22);
        let h_base = rng.normal_tensor(vec![3, 4, 4]);
        let same = lan_transform(&h_base, &h_base).unwrap();
        for (a, b) in same.data().iter().zip(h_base.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let scaled = h_base.map(|v| 2.0 * v + 3.0);
        let back = lan_transform(&scaled, &h_base).unwrap();
        for (a, b) in back.data().iter().zip(h_base.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn lan_output_statistics_match_base() {
        let mut rng = RngStream::new(23);
        for _ in 0..100 {
            let h_hat = rng.normal_tensor(vec![3, 4, 4]).map(|v| v * 1.7 + 0.4);
            let h_base = rng.normal_tensor(vec![3, 4, 4]);
            let out = lan_transform(&h_hat, &h_base).unwrap();
            let block = 16;
            for ch in 0..3 {
                let s = &out.data()[ch * block..(ch + 1) * block];
                let b = &h_base.data()[ch * block..(ch + 1) * block];
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                let sd = |v: &[f64]| {
                    let m = mean(v);
                    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
                };
                assert!((mean(s) - mean(b)).abs() < 1e-9);
                assert!((sd(s) - sd(b)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lan_zero_std_errors() {
        let flat = Tensor::full(vec![2, 4], 0.5);
        let base = Tensor::full(vec![2, 4], 0.1);
        assert!(lan_transform(&flat, &base).is_err());
    }

    #[test]
    fn cosine_stats_identities() {
        let mut rng = RngStream::new(24);
        let set: Vec<Tensor> = (0..4).map(|_| rng.normal_tensor(vec![3, 2, 2])).collect();
        let (dm, ds) = latent_stat_cosine(&set, &set).unwrap();
        assert_eq!((dm, ds), (0.0, 0.0));
        // orthogonal channel means: [1,0,0] vs [0,1,0]
        let a = {
            let mut t = Tensor::zeros(vec![3, 1, 1]);
            t.data_mut()[0] = 1.0;
            vec![t]
        };
        let b = {
            let mut t = Tensor::zeros(vec![3, 1, 1]);
            t.data_mut()[1] = 1.0;
            vec![t]
        };
        let (dm, _) = latent_stat_cosine(&a, &b).unwrap();
        assert_eq!(dm, 1.0);
        assert!(latent_stat_cosine(&[], &b).is_err());
    }
}
