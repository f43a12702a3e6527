//! Preference-pair construction: per-prompt image pools, multi-level
//! reconstruction sets, winner/loser election, filtering, and the hard and
//! naive pairings.
//!
//! Selection rules, with ties broken toward the lowest index:
//! - easy: winner = pool argmax, loser = pool argmin (dropped if every
//!   score is identical);
//! - normal: winner = best reconstruction level inside the [t_r, t_g]
//!   window, loser = the pool argmax (the easy winner);
//! - filter: keep candidates whose winner score >= loser score; the kept
//!   prompt index set is reused verbatim by the hard pairing;
//! - hard: winner = the lowest-level reconstruction (or the real image,
//!   switchable), loser = the normal-stage winner;
//! - naive: winner = the real image, loser = best-of-pool (switchable to a
//!   random pool member).

use serde::{Deserialize, Serialize};

use crate::error::{HgError, Result};
use crate::rng::RngStream;
use crate::sampler::{sample_batch, sdrecon_batch, InferenceModel, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::world::{OracleScore, PromptSpec, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageTag {
    Easy,
    Normal,
    Hard,
    Naive,
}

impl StageTag {
    pub fn as_u8(self) -> u8 {
        match self {
            StageTag::Easy => 0,
            StageTag::Normal => 1,
            StageTag::Hard => 2,
            StageTag::Naive => 3,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(StageTag::Easy),
            1 => Some(StageTag::Normal),
            2 => Some(StageTag::Hard),
            3 => Some(StageTag::Naive),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImagePool {
    pub prompt_id: u32,
    pub images: Vec<Tensor>,
    pub seeds: Vec<u64>,
    pub scores: Option<Vec<OracleScore>>,
}

#[derive(Clone, Debug)]
pub struct IntermediateSet {
    pub prompt_id: u32,
    /// (level value, image), keyed by the configured timestep grid.
    pub levels: Vec<(usize, Tensor)>,
    pub scores: Option<Vec<OracleScore>>,
}

#[derive(Clone, Debug)]
pub struct PreferenceTriplet {
    pub prompt_id: u32,
    pub winner: Tensor,
    pub loser: Tensor,
    pub stage: StageTag,
    pub winner_score: f64,
    pub loser_score: f64,
}

#[derive(Clone, Debug)]
pub struct TripletDataset {
    pub stage: StageTag,
    pub triplets: Vec<PreferenceTriplet>,
}

impl TripletDataset {
    pub fn prompt_ids(&self) -> Vec<u32> {
        self.triplets.iter().map(|t| t.prompt_id).collect()
    }
}

/// The reconstruction-level grid and the mid-level selection window.
/// Level values follow the k*T/grid convention (1-based timesteps); the
/// diffusion index used for a level value v is v - 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowConfig {
    pub levels: Vec<usize>,
    pub t_r: usize,
    pub t_g: usize,
}

impl WindowConfig {
    /// Evenly divide [1, t_max] into `count` level values and select the
    /// window by 1-based level ranks (e.g. ranks 4..7 of 10).
    pub fn from_grid(t_max: usize, count: usize, r_rank: usize, g_rank: usize) -> Result<Self> {
        if count < 3 {
            return Err(HgError::validation("window: need at least 3 levels"));
        }
        let levels: Vec<usize> = (1..=count).map(|k| k * t_max / count).collect();
        if levels[0] == 0 {
            return Err(HgError::validation(
                "window: t_max too small for the level count",
            ));
        }
        if !(2..=count).contains(&r_rank) || !(r_rank..count).contains(&g_rank) {
            return Err(HgError::validation(format!(
                "window: need 1 < r <= g < {count}, got r={r_rank} g={g_rank}"
            )));
        }
        let cfg = WindowConfig {
            t_r: levels[r_rank - 1],
            t_g: levels[g_rank - 1],
            levels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(HgError::validation("window: empty level grid"));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HgError::validation("window: levels must be increasing"));
        }
        let first = self.levels[0];
        let last = *self.levels.last().expect("nonempty");
        if !(first < self.t_r && self.t_r <= self.t_g && self.t_g < last) {
            return Err(HgError::validation(format!(
                "window: need t_1 < t_r <= t_g < t_T, got ({}, {}, {}, {})",
                first, self.t_r, self.t_g, last
            )));
        }
        if !self.window_levels().iter().any(|_| true) {
            return Err(HgError::validation("window: empty selection window"));
        }
        Ok(())
    }

    pub fn window_levels(&self) -> Vec<usize> {
        self.levels
            .iter()
            .copied()
            .filter(|&v| self.t_r <= v && v <= self.t_g)
            .collect()
    }
}

fn pool_seed(global_seed: u64, prompt_id: u32, index: usize) -> RngStream {
    RngStream::new(global_seed)
        .derive(0x9001)
        .derive(((prompt_id as u64) << 32) | index as u64)
}

/// Sample `n` images for one prompt with per-index derived seeds.
pub fn build_pool(
    model: &InferenceModel,
    prompt: &PromptSpec,
    n: usize,
    global_seed: u64,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<ImagePool> {
    if n < 2 {
        return Err(HgError::validation(format!(
            "image pool needs at least 2 images, got {n}"
        )));
    }
    let mut rngs: Vec<RngStream> = (0..n)
        .map(|j| pool_seed(global_seed, prompt.id, j))
        .collect();
    let seeds: Vec<u64> = rngs.iter().map(|r| r.seed()).collect();
    {
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(HgError::numeric("pool seed collision"));
        }
    }
    let prompts = vec![Some(prompt.id); n];
    let images = sample_batch(model, &prompts, &mut rngs, sampler, sched)?;
    Ok(ImagePool {
        prompt_id: prompt.id,
        images,
        seeds,
        scores: None,
    })
}

/// Score every pool image against its prompt. Idempotent.
pub fn score_pool(pool: &mut ImagePool, world: &World) -> Result<()> {
    let scores = pool
        .images
        .iter()
        .map(|img| world.score(img, pool.prompt_id))
        .collect::<Result<Vec<_>>>()?;
    pool.scores = Some(scores);
    Ok(())
}

/// Winner = argmax, loser = argmin of the scored pool. Returns None when
/// every score is identical (degenerate pool, dropped by construction).
pub fn select_easy_pair(pool: &ImagePool) -> Result<Option<PreferenceTriplet>> {
    let scores = pool
        .scores
        .as_ref()
        .ok_or_else(|| HgError::validation("select_easy_pair: pool not scored"))?;
    if scores.len() != pool.images.len() {
        return Err(HgError::validation("select_easy_pair: score/image mismatch"));
    }
    let mut w = 0usize;
    let mut l = 0usize;
    for (i, s) in scores.iter().enumerate() {
        if s.total > scores[w].total {
            w = i;
        }
        if s.total < scores[l].total {
            l = i;
        }
    }
    if scores[w].total == scores[l].total {
        return Ok(None);
    }
    Ok(Some(PreferenceTriplet {
        prompt_id: pool.prompt_id,
        winner: pool.images[w].clone(),
        loser: pool.images[l].clone(),
        stage: StageTag::Easy,
        winner_score: scores[w].total,
        loser_score: scores[l].total,
    }))
}

/// The pool argmax (the easy-stage winner), used as the normal-stage loser
/// and the default naive-stage loser.
pub fn pool_best(pool: &ImagePool) -> Result<(usize, f64)> {
    let scores = pool
        .scores
        .as_ref()
        .ok_or_else(|| HgError::validation("pool_best: pool not scored"))?;
    let mut w = 0usize;
    for (i, s) in scores.iter().enumerate() {
        if s.total > scores[w].total {
            w = i;
        }
    }
    Ok((w, scores[w].total))
}

/// One reconstruction per grid level for every prompt, batched across
/// prompts level by level, then scored.
pub fn build_intermediates(
    base: &InferenceModel,
    world: &World,
    window: &WindowConfig,
    global_seed: u64,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<IntermediateSet>> {
    window.validate()?;
    let prompts: Vec<Option<u32>> = world.prompts.iter().map(|p| Some(p.id)).collect();
    let reals: Vec<&Tensor> = world
        .prompts
        .iter()
        .map(|p| world.real_for_prompt(p.id).map(|r| &r.pixels))
        .collect::<Result<Vec<_>>>()?;
    let mut sets: Vec<IntermediateSet> = world
        .prompts
        .iter()
        .map(|p| IntermediateSet {
            prompt_id: p.id,
            levels: Vec::with_capacity(window.levels.len()),
            scores: None,
        })
        .collect();
    for &value in &window.levels {
        if value == 0 || value > sched.len() {
            return Err(HgError::validation(format!(
                "window level {value} outside [1, {}]",
                sched.len()
            )));
        }
        let t_index = value - 1;
        let mut rngs: Vec<RngStream> = world
            .prompts
            .iter()
            .map(|p| {
                RngStream::new(global_seed)
                    .derive(0x1e7e)
                    .derive(((p.id as u64) << 32) | value as u64)
            })
            .collect();
        let recon = sdrecon_batch(base, &prompts, &reals, t_index, &mut rngs, sampler, sched)?;
        for (set, img) in sets.iter_mut().zip(recon) {
            set.levels.push((value, img));
        }
    }
    for set in &mut sets {
        let scores = set
            .levels
            .iter()
            .map(|(_, img)| world.score(img, set.prompt_id))
            .collect::<Result<Vec<_>>>()?;
        set.scores = Some(scores);
    }
    Ok(sets)
}

/// Winner = best-scored level inside the window; loser = the pool argmax.
/// The result is a pre-filter candidate.
pub fn select_normal_pair(
    inter: &IntermediateSet,
    pool: &ImagePool,
    window: &WindowConfig,
) -> Result<PreferenceTriplet> {
    let scores = inter
        .scores
        .as_ref()
        .ok_or_else(|| HgError::validation("select_normal_pair: intermediates not scored"))?;
    let mut best: Option<(usize, f64)> = None;
    for (i, (value, _)) in inter.levels.iter().enumerate() {
        if *value < window.t_r || *value > window.t_g {
            continue;
        }
        let s = scores[i].total;
        if best.map(|(_, bs)| s > bs).unwrap_or(true) {
            best = Some((i, s));
        }
    }
    let (w_idx, w_score) =
        best.ok_or_else(|| HgError::validation("select_normal_pair: empty window"))?;
    let (l_idx, l_score) = pool_best(pool)?;
    Ok(PreferenceTriplet {
        prompt_id: inter.prompt_id,
        winner: inter.levels[w_idx].1.clone(),
        loser: pool.images[l_idx].clone(),
        stage: StageTag::Normal,
        winner_score: w_score,
        loser_score: l_score,
    })
}

/// Keep candidates whose winner score meets or exceeds the loser score.
/// Returns the dataset plus the kept prompt-index set (reused by the hard
/// pairing).
pub fn filter_triplets(candidates: Vec<PreferenceTriplet>) -> (TripletDataset, Vec<u32>) {
    let mut kept = Vec::new();
    let mut triplets = Vec::new();
    for c in candidates {
        if c.winner_score >= c.loser_score {
            kept.push(c.prompt_id);
            triplets.push(c);
        }
    }
    (
        TripletDataset {
            stage: StageTag::Normal,
            triplets,
        },
        kept,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HardWinner {
    /// The lowest-level reconstruction (nearly real).
    IntermediateT1,
    /// The real image itself.
    Real,
}

/// For every kept prompt: winner = the t_1 reconstruction (or real image),
/// loser = that prompt's normal-stage winner.
pub fn build_hard_pairs(
    inters: &[IntermediateSet],
    normal: &TripletDataset,
    kept: &[u32],
    mode: HardWinner,
    world: &World,
) -> Result<TripletDataset> {
    let mut triplets = Vec::with_capacity(kept.len());
    for &pid in kept {
        let normal_triplet = normal
            .triplets
            .iter()
            .find(|t| t.prompt_id == pid)
            .ok_or_else(|| {
                HgError::validation(format!("hard pairing: prompt {pid} missing from normal set"))
            })?;
        let (winner, winner_score) = match mode {
            HardWinner::IntermediateT1 => {
                let set = inters
                    .iter()
                    .find(|s| s.prompt_id == pid)
                    .ok_or_else(|| {
                        HgError::validation(format!("hard pairing: no intermediates for {pid}"))
                    })?;
                let (_, img) = set
                    .levels
                    .first()
                    .ok_or_else(|| HgError::validation("hard pairing: missing t_1 level"))?;
                let score = set
                    .scores
                    .as_ref()
                    .and_then(|s| s.first())
                    .ok_or_else(|| HgError::validation("hard pairing: unscored t_1 level"))?;
                (img.clone(), score.total)
            }
            HardWinner::Real => {
                let real = world.real_for_prompt(pid)?;
                let score = world.score(&real.pixels, pid)?;
                (real.pixels.clone(), score.total)
            }
        };
        triplets.push(PreferenceTriplet {
            prompt_id: pid,
            winner,
            loser: normal_triplet.winner.clone(),
            stage: StageTag::Hard,
            winner_score,
            loser_score: normal_triplet.winner_score,
        });
    }
    Ok(TripletDataset {
        stage: StageTag::Hard,
        triplets,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NaiveLoser {
    BestOfPool,
    Random,
}

/// Single-stage baseline pairing: real image as winner, a generated image
/// for the same prompt as loser. One triplet per prompt.
pub fn build_naive_pairs(
    world: &World,
    pools: &[ImagePool],
    mode: NaiveLoser,
    seed: u64,
) -> Result<TripletDataset> {
    let mut rng = RngStream::new(seed).derive(0x4a1e);
    let mut triplets = Vec::with_capacity(pools.len());
    for pool in pools {
        let real = world.real_for_prompt(pool.prompt_id)?;
        let winner_score = world.score(&real.pixels, pool.prompt_id)?.total;
        let (l_idx, l_score) = match mode {
            NaiveLoser::BestOfPool => pool_best(pool)?,
            NaiveLoser::Random => {
                let idx = rng.below(pool.images.len() as u64) as usize;
                let score = pool
                    .scores
                    .as_ref()
                    .ok_or_else(|| HgError::validation("naive pairing: pool not scored"))?[idx]
                    .total;
                (idx, score)
            }
        };
        triplets.push(PreferenceTriplet {
            prompt_id: pool.prompt_id,
            winner: real.pixels.clone(),
            loser: pool.images[l_idx].clone(),
            stage: StageTag::Naive,
            winner_score,
            loser_score: l_score,
        });
    }
    Ok(TripletDataset {
        stage: StageTag::Naive,
        triplets,
    })
}
