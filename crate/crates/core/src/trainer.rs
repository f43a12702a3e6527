//! Stage training loops: supervised pretraining of the full model, adapter
//! preference stages against a frozen reference, conditioner-adapter
//! training, and supervised fine-tuning on winner images (ablation).
//!
//! Every loop draws batches, timesteps, and noise from one stage-owned
//! stream, updates parameters with per-tensor Adam states, and aborts when
//! the loss sits above 10x its initial value for 100 consecutive steps.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crate::config::{Config, DpoStageSection, RefChoice};
use crate::dataset::TripletDataset;
use crate::error::{HgError, Result};
use crate::graph::Graph;
use crate::losses::{easy_objective, sft_loss, DpoBatch, FrozenBranch};
use crate::model::{AdapterScope, AdapterSet, Conditioner, Denoiser, TrainScope};
use crate::optim::{adam_step, AdamState};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::world::World;

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub stage: String,
    pub loss_trace: Vec<f64>,
    /// Printed, never persisted into artifacts.
    pub wall_time: Duration,
}

struct DivergenceGuard {
    initial: Option<f64>,
    consecutive: usize,
}

impl DivergenceGuard {
    fn new() -> Self {
        DivergenceGuard {
            initial: None,
            consecutive: 0,
        }
    }

    fn check(&mut self, stage: &str, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(HgError::numeric(format!(
                "{stage}: non-finite loss {loss} at step {step}"
            )));
        }
        let initial = *self.initial.get_or_insert(loss.abs().max(1e-12));
        if loss.abs() > 10.0 * initial {
            self.consecutive += 1;
            if self.consecutive >= 100 {
                return Err(HgError::numeric(format!(
                    "{stage}: diverged (loss {loss} > 10x initial {initial} for 100 consecutive steps, step {step})"
                )));
            }
        } else {
            self.consecutive = 0;
        }
        Ok(())
    }
}

struct Optimizer {
    states: BTreeMap<String, AdamState>,
    lr: f64,
}

impl Optimizer {
    fn new(lr: f64) -> Self {
        Optimizer {
            states: BTreeMap::new(),
            lr,
        }
    }

    fn apply(&mut self, params: Vec<(String, &mut Tensor)>, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, param) in params {
            let Some(grad) = grads.get(&name) else {
                continue;
            };
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::new(param.shape().to_vec(), self.lr));
            adam_step(param, grad, state, &name)?;
        }
        Ok(())
    }
}

fn collect_grads(g: &Graph, trainable: &[(String, crate::graph::NodeId)]) -> BTreeMap<String, Tensor> {
    trainable
        .iter()
        .filter_map(|(name, id)| g.grad(*id).map(|t| (name.clone(), t.clone())))
        .collect()
}

fn flatten_rows(images: &[&Tensor]) -> Result<Tensor> {
    let d = images[0].numel();
    let mut data = Vec::with_capacity(images.len() * d);
    for img in images {
        if img.numel() != d {
            return Err(HgError::ShapeMismatch {
                op: "flatten_rows",
                lhs: images[0].shape().to_vec(),
                rhs: img.shape().to_vec(),
            });
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), d], data)
}

/// Supervised pretraining of the full denoiser + conditioner on the real
/// set with the noise-prediction loss. Returns the frozen base model.
pub fn train_sft(
    world: &World,
    config: &Config,
    seed: u64,
) -> Result<(Denoiser, Conditioner, TrainingRun)> {
    let start = Instant::now();
    let sched = config.noise_schedule()?;
    let mcfg = config.model_config();
    let mut init_rng = RngStream::new(seed).derive(0x1417);
    let mut denoiser = Denoiser::init(&mcfg, &mut init_rng);
    let mut conditioner = Conditioner::init(&mcfg, &mut init_rng);

    let st = &config.stages.sft;
    let mut rng = RngStream::new(seed).derive(0x5f7);
    let mut opt = Optimizer::new(st.lr);
    let mut guard = DivergenceGuard::new();
    let mut trace = Vec::with_capacity(st.steps);
    let d = mcfg.image_dim();

    for step in 0..st.steps {
        let mut prompts = Vec::with_capacity(st.batch_size);
        let mut images = Vec::with_capacity(st.batch_size);
        let mut ts = Vec::with_capacity(st.batch_size);
        for _ in 0..st.batch_size {
            let idx = rng.below(world.reals.len() as u64) as usize;
            let real = &world.reals[idx];
            let dropped = rng.uniform() < st.uncond_prob;
            prompts.push(if dropped { None } else { Some(real.prompt_id) });
            images.push(&real.pixels);
            ts.push(rng.below(sched.len() as u64) as usize);
        }
        let x0 = flatten_rows(&images)?;
        let eps = rng.normal_tensor(vec![st.batch_size, d]);

        let mut g = Graph::new();
        let bound = denoiser.bind(&mut g, None, TrainScope::DenoiserAndConditioner);
        let bcond = conditioner.bind(&mut g, TrainScope::DenoiserAndConditioner, 0.0);
        let cond = bcond.embed(&mut g, &prompts, false)?;
        let loss = sft_loss(&mut g, &bound, cond, &x0, &ts, &eps, &sched)?;
        g.backward(loss)?;
        let loss_val = g.value(loss).item();
        guard.check("sft", step, loss_val)?;
        trace.push(loss_val);

        let mut grads = collect_grads(&g, &bound.trainable);
        grads.extend(collect_grads(&g, &bcond.trainable));
        opt.apply(denoiser.named_params_mut(), &grads)?;
        opt.apply(conditioner.named_params_mut(), &grads)?;
    }

    Ok((
        denoiser,
        conditioner,
        TrainingRun {
            stage: "sft".into(),
            loss_trace: trace,
            wall_time: start.elapsed(),
        },
    ))
}

/// Which model the preference stage measures improvement against, plus the
/// always-base branch used by the statistics term.
pub struct StageContext<'a> {
    pub base_denoiser: &'a Denoiser,
    pub conditioner: &'a Conditioner,
    pub sched: &'a NoiseSchedule,
    pub channels: usize,
}

/// One preference stage: updates `adapters` in place (scope-restricted),
/// leaving the base model and conditioner untouched.
pub fn train_dpo_stage(
    stage_name: &str,
    ctx: &StageContext<'_>,
    adapters: &mut AdapterSet,
    dataset: &TripletDataset,
    section: &DpoStageSection,
    seed: u64,
) -> Result<TrainingRun> {
    let start = Instant::now();
    if dataset.triplets.is_empty() {
        return Err(HgError::validation(format!(
            "{stage_name}: empty preference dataset"
        )));
    }
    let scope = match section.adapter_scope {
        AdapterScope::All => TrainScope::AdaptersAll,
        AdapterScope::OutputHalf => TrainScope::AdaptersOutputHalf,
    };
    // frozen reference for the stage: the model as it stands at entry, or
    // the plain base model
    let reference_model = match section.reference {
        RefChoice::StageStart => ctx.base_denoiser.merge_adapters(adapters, adapters.weight)?,
        RefChoice::Base => ctx.base_denoiser.clone(),
    };
    let dpo_cfg = crate::losses::DpoConfig::with_beta(section.beta);
    let stat_cfg = crate::losses::StatConfig {
        lambda_stat: section.lambda_stat,
        share_noise: section.share_stat_noise,
    };

    let mut rng = RngStream::new(seed).derive(0xd90);
    let mut opt = Optimizer::new(section.lr);
    let mut guard = DivergenceGuard::new();
    let mut trace = Vec::with_capacity(section.steps);
    let d = ctx.base_denoiser.cfg.image_dim();
    let t_max = ctx.sched.len();

    for step in 0..section.steps {
        let mut prompts = Vec::with_capacity(section.batch_size);
        let mut winners = Vec::with_capacity(section.batch_size);
        let mut losers = Vec::with_capacity(section.batch_size);
        let mut ts = Vec::with_capacity(section.batch_size);
        for _ in 0..section.batch_size {
            let idx = rng.below(dataset.triplets.len() as u64) as usize;
            let t = &dataset.triplets[idx];
            prompts.push(Some(t.prompt_id));
            winners.push(&t.winner);
            losers.push(&t.loser);
            // t = 0 has no previous step for the statistics term
            ts.push(1 + rng.below((t_max - 1) as u64) as usize);
        }
        let x_w = flatten_rows(&winners)?;
        let x_l = flatten_rows(&losers)?;
        let eps_w = rng.normal_tensor(vec![section.batch_size, d]);
        let eps_l = rng.normal_tensor(vec![section.batch_size, d]);
        // drawn unconditionally so stat-on and stat-off runs share streams
        let z = rng.normal_tensor(vec![section.batch_size, d]);
        let z_base = if stat_cfg.share_noise {
            None
        } else {
            Some(rng.normal_tensor(vec![section.batch_size, d]))
        };

        let cond_rows = ctx.conditioner.embed_rows(&prompts, None)?;

        let mut g = Graph::new();
        let bound = ctx.base_denoiser.bind(&mut g, Some(adapters), scope);
        let cond = g.constant(cond_rows.clone());
        let reference = FrozenBranch {
            denoiser: &reference_model,
            adapters: None,
            cond_rows: &cond_rows,
        };
        let base = FrozenBranch {
            denoiser: ctx.base_denoiser,
            adapters: None,
            cond_rows: &cond_rows,
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
            z_base.as_ref(),
            ctx.channels,
            ctx.sched,
            &dpo_cfg,
            &stat_cfg,
        )?;
        g.backward(terms.total)?;
        let loss_val = g.value(terms.total).item();
        guard.check(stage_name, step, loss_val)?;
        trace.push(loss_val);

        let grads = collect_grads(&g, &bound.trainable);
        opt.apply(adapters.named_params_mut(), &grads)?;
    }

    Ok(TrainingRun {
        stage: stage_name.into(),
        loss_trace: trace,
        wall_time: start.elapsed(),
    })
}

/// Conditioner-adapter training on the easy dataset: the denoiser (with its
/// adapters) is frozen; gradients flow only through the condition rows into
/// the conditioner's adapter. Reference = snapshot at entry.
pub fn train_conditioner(
    ctx: &StageContext<'_>,
    denoiser_adapters: Option<&AdapterSet>,
    conditioner: &mut Conditioner,
    dataset: &TripletDataset,
    section: &DpoStageSection,
    seed: u64,
) -> Result<TrainingRun> {
    let start = Instant::now();
    if dataset.triplets.is_empty() {
        return Err(HgError::validation("conditioner: empty preference dataset"));
    }
    if section.lambda_stat != 0.0 {
        return Err(HgError::validation(
            "conditioner: lambda_stat must be 0 outside the easy stage",
        ));
    }
    let mut seed_rng = RngStream::new(seed).derive(0xc0ad);
    conditioner.ensure_adapter(&mut seed_rng);
    let reference_conditioner = conditioner.clone();
    let dpo_cfg = crate::losses::DpoConfig::with_beta(section.beta);

    let mut rng = RngStream::new(seed).derive(0xc00);
    let mut opt = Optimizer::new(section.lr);
    let mut guard = DivergenceGuard::new();
    let mut trace = Vec::with_capacity(section.steps);
    let d = ctx.base_denoiser.cfg.image_dim();
    let t_max = ctx.sched.len();

    for step in 0..section.steps {
        let mut prompts = Vec::with_capacity(section.batch_size);
        let mut winners = Vec::with_capacity(section.batch_size);
        let mut losers = Vec::with_capacity(section.batch_size);
        let mut ts = Vec::with_capacity(section.batch_size);
        for _ in 0..section.batch_size {
            let idx = rng.below(dataset.triplets.len() as u64) as usize;
            let t = &dataset.triplets[idx];
            prompts.push(Some(t.prompt_id));
            winners.push(&t.winner);
            losers.push(&t.loser);
            ts.push(1 + rng.below((t_max - 1) as u64) as usize);
        }
        let x_w = flatten_rows(&winners)?;
        let x_l = flatten_rows(&losers)?;
        let eps_w = rng.normal_tensor(vec![section.batch_size, d]);
        let eps_l = rng.normal_tensor(vec![section.batch_size, d]);

        // reference branch: frozen conditioner state at stage entry
        let ref_cond_rows = reference_conditioner.embed_rows(&prompts, Some(1.0))?;

        let mut g = Graph::new();
        let bound = ctx
            .base_denoiser
            .bind(&mut g, denoiser_adapters, TrainScope::Frozen);
        let bcond = conditioner.bind(&mut g, TrainScope::ConditionerAdapter, 1.0);
        let cond = bcond.embed(&mut g, &prompts, true)?;
        let reference = FrozenBranch {
            denoiser: ctx.base_denoiser,
            adapters: denoiser_adapters,
            cond_rows: &ref_cond_rows,
        };
        let batch = DpoBatch {
            x_w: &x_w,
            x_l: &x_l,
            ts: &ts,
            eps_w: &eps_w,
            eps_l: &eps_l,
        };
        let terms = crate::losses::dpo_loss(
            &mut g, &bound, cond, &reference, &batch, ctx.sched, &dpo_cfg,
        )?;
        g.backward(terms.loss)?;
        let loss_val = g.value(terms.loss).item();
        guard.check("conditioner", step, loss_val)?;
        trace.push(loss_val);

        let grads = collect_grads(&g, &bcond.trainable);
        opt.apply(conditioner.named_params_mut(), &grads)?;
    }

    Ok(TrainingRun {
        stage: "conditioner".into(),
        loss_trace: trace,
        wall_time: start.elapsed(),
    })
}

/// Supervised fine-tuning of the adapter set on winner images (the +SFT
/// ablation rows): noise-prediction loss, adapters trainable, base frozen.
pub fn train_sft_on_winners(
    ctx: &StageContext<'_>,
    adapters: &mut AdapterSet,
    dataset: &TripletDataset,
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainingRun> {
    let start = Instant::now();
    if dataset.triplets.is_empty() {
        return Err(HgError::validation("sft-from: empty dataset"));
    }
    let mut rng = RngStream::new(seed).derive(0x5f2);
    let mut opt = Optimizer::new(lr);
    let mut guard = DivergenceGuard::new();
    let mut trace = Vec::with_capacity(steps);
    let d = ctx.base_denoiser.cfg.image_dim();

    for step in 0..steps {
        let mut prompts = Vec::with_capacity(batch_size);
        let mut images = Vec::with_capacity(batch_size);
        let mut ts = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let idx = rng.below(dataset.triplets.len() as u64) as usize;
            let t = &dataset.triplets[idx];
            prompts.push(Some(t.prompt_id));
            images.push(&t.winner);
            ts.push(rng.below(ctx.sched.len() as u64) as usize);
        }
        let x0 = flatten_rows(&images)?;
        let eps = rng.normal_tensor(vec![batch_size, d]);
        let cond_rows = ctx.conditioner.embed_rows(&prompts, None)?;

        let mut g = Graph::new();
        let bound = ctx
            .base_denoiser
            .bind(&mut g, Some(adapters), TrainScope::AdaptersAll);
        let cond = g.constant(cond_rows);
        let loss = sft_loss(&mut g, &bound, cond, &x0, &ts, &eps, ctx.sched)?;
        g.backward(loss)?;
        let loss_val = g.value(loss).item();
        guard.check("sft-from", step, loss_val)?;
        trace.push(loss_val);

        let grads = collect_grads(&g, &bound.trainable);
        opt.apply(adapters.named_params_mut(), &grads)?;
    }

    Ok(TrainingRun {
        stage: "sft-from".into(),
        loss_trace: trace,
        wall_time: start.elapsed(),
    })
}
