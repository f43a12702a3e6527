//! End-to-end orchestration: supervised pretraining, dataset construction,
//! the three preference stages, conditioner training, evaluation, and the
//! ablation variants — with artifact persistence and resume.
//!
//! Every phase derives its own random stream from the global seed, so a
//! resumed run produces byte-identical artifacts to an uninterrupted one.
//! Artifacts embed the config hash; loading an artifact written under a
//! different config is refused unless forced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::dataset::{
    build_hard_pairs, build_intermediates, build_naive_pairs, build_pool, filter_triplets,
    score_pool, select_easy_pair, select_normal_pair, ImagePool, IntermediateSet, StageTag,
    TripletDataset,
};
use crate::error::{HgError, Result};
use crate::io::{
    load_checkpoint, load_dataset, save_checkpoint, save_dataset, save_report, ConfigHash,
};
use crate::metrics::{evaluate_stage, EvalContext, StageReport};
use crate::model::{AdapterSet, Conditioner, Denoiser, LowRankAdapter, ModelConfig};
use crate::sampler::InferenceModel;
use crate::tensor::Tensor;
use crate::trainer::{
    train_conditioner, train_dpo_stage, train_sft, train_sft_on_winners, StageContext,
};
use crate::world::{build_world, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SftFromSource {
    Base,
    Easy,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    /// The full curriculum.
    Full,
    /// Single stage, real winners vs generated losers, from the base model.
    Naive,
    /// Single stage over the union of all three datasets.
    E2e,
    /// Curriculum without the easy training stage.
    SkipEasy,
    /// Curriculum without the normal training stage.
    SkipNormal,
    /// Supervised fine-tuning on hard-stage winners from a checkpoint.
    SftFrom(SftFromSource),
}

impl AblationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(AblationMode::Naive),
            "e2e" => Ok(AblationMode::E2e),
            "skip-easy" => Ok(AblationMode::SkipEasy),
            "skip-normal" => Ok(AblationMode::SkipNormal),
            "sft-from-base" => Ok(AblationMode::SftFrom(SftFromSource::Base)),
            "sft-from-easy" => Ok(AblationMode::SftFrom(SftFromSource::Easy)),
            "sft-from-normal" => Ok(AblationMode::SftFrom(SftFromSource::Normal)),
            other => Err(HgError::validation(format!(
                "unknown ablation mode '{other}' (expected naive, e2e, skip-easy, skip-normal, sft-from-base, sft-from-easy, sft-from-normal)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOptions {
    pub mode: AblationMode,
    /// Additionally train the easy stage without the statistics term and
    /// evaluate it (hue-drift comparison).
    pub stat_ablation: bool,
    /// Accept artifacts whose embedded config hash differs.
    pub force: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            mode: AblationMode::Full,
            stat_ablation: false,
            force: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub reports: Vec<StageReport>,
    pub out_dir: PathBuf,
}

pub struct Paths {
    out: PathBuf,
}

impl Paths {
    pub fn new(out: &Path) -> Self {
        Paths { out: out.to_path_buf() }
    }

    pub fn base(&self) -> PathBuf {
        self.out.join("base.hgck")
    }

    pub fn pools(&self) -> PathBuf {
        self.out.join("pools.hgck")
    }

    pub fn dataset(&self, name: &str) -> PathBuf {
        self.out.join(format!("d_{name}.hgd"))
    }

    pub fn inter_t1(&self) -> PathBuf {
        self.out.join("inter_t1.hgck")
    }

    pub fn adapters(&self, stage: &str) -> PathBuf {
        self.out.join(format!("adapters_{stage}.hgck"))
    }

    pub fn conditioner(&self) -> PathBuf {
        self.out.join("conditioner.hgck")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }

    pub fn base_samples(&self) -> PathBuf {
        self.eval_dir().join("base_samples.hgck")
    }

    pub fn report_json(&self, stage: &str) -> PathBuf {
        self.eval_dir().join(format!("{stage}.json"))
    }
}

fn check_hash(path: &Path, found: &ConfigHash, expected: &ConfigHash, force: bool) -> Result<()> {
    if found != expected && !force {
        return Err(HgError::HashMismatch {
            path: path.to_path_buf(),
        });
    }
    Ok(())
}

// --- model (de)serialization helpers -------------------------------------

fn save_base(path: &Path, den: &Denoiser, cond: &Conditioner, hash: &ConfigHash) -> Result<()> {
    let mut entries: Vec<(String, &Tensor)> = den.named_params();
    entries.extend(cond.named_params());
    save_checkpoint(path, &entries, hash)
}

fn load_base(
    path: &Path,
    mcfg: &ModelConfig,
    expected: &ConfigHash,
    force: bool,
) -> Result<(Denoiser, Conditioner)> {
    let (entries, hash) = load_checkpoint(path)?;
    check_hash(path, &hash, expected, force)?;
    let map: BTreeMap<String, Tensor> = entries.into_iter().collect();
    let mut rng = crate::rng::RngStream::new(0);
    let mut den = Denoiser::init(mcfg, &mut rng);
    let mut cond = Conditioner::init(mcfg, &mut rng);
    if map.keys().any(|k| k == "cond.lora.down") {
        cond.ensure_adapter(&mut rng);
    }
    let fill = |params: Vec<(String, &mut Tensor)>| -> Result<()> {
        for (name, tensor) in params {
            let stored = map.get(&name).ok_or_else(|| {
                HgError::validation(format!("checkpoint {} missing tensor {name}", path.display()))
            })?;
            if stored.shape() != tensor.shape() {
                return Err(HgError::ShapeMismatch {
                    op: "load_base",
                    lhs: tensor.shape().to_vec(),
                    rhs: stored.shape().to_vec(),
                });
            }
            *tensor = stored.clone();
        }
        Ok(())
    };
    fill(den.named_params_mut())?;
    fill(cond.named_params_mut())?;
    Ok((den, cond))
}

fn save_adapters(path: &Path, set: &AdapterSet, hash: &ConfigHash) -> Result<()> {
    let entries: Vec<(String, &Tensor)> = set.named_params();
    save_checkpoint(path, &entries, hash)
}

fn load_adapters(
    path: &Path,
    den: &Denoiser,
    expected: &ConfigHash,
    force: bool,
) -> Result<AdapterSet> {
    let (entries, hash) = load_checkpoint(path)?;
    check_hash(path, &hash, expected, force)?;
    let map: BTreeMap<String, Tensor> = entries.into_iter().collect();
    let mut layers = BTreeMap::new();
    let mut rank = 0;
    for (name, _, _) in den.adapted_layer_dims() {
        let down = map
            .get(&format!("lora.{name}.down"))
            .ok_or_else(|| HgError::validation(format!("adapter file missing lora.{name}.down")))?
            .clone();
        let up = map
            .get(&format!("lora.{name}.up"))
            .ok_or_else(|| HgError::validation(format!("adapter file missing lora.{name}.up")))?
            .clone();
        rank = down.shape()[1];
        layers.insert(name, LowRankAdapter { down, up });
    }
    Ok(AdapterSet {
        rank,
        weight: 1.0,
        active_blocks: crate::model::AdapterScope::All,
        t_range: None,
        layers,
    })
}

fn save_cond_adapter(path: &Path, cond: &Conditioner, hash: &ConfigHash) -> Result<()> {
    let adapter = cond
        .adapter
        .as_ref()
        .ok_or_else(|| HgError::validation("conditioner has no adapter to save"))?;
    save_checkpoint(
        path,
        &[
            ("cond.lora.down".to_string(), &adapter.down),
            ("cond.lora.up".to_string(), &adapter.up),
        ],
        hash,
    )
}

fn load_cond_adapter(
    path: &Path,
    cond: &mut Conditioner,
    expected: &ConfigHash,
    force: bool,
) -> Result<()> {
    let (entries, hash) = load_checkpoint(path)?;
    check_hash(path, &hash, expected, force)?;
    let map: BTreeMap<String, Tensor> = entries.into_iter().collect();
    let down = map
        .get("cond.lora.down")
        .ok_or_else(|| HgError::validation("conditioner file missing cond.lora.down"))?
        .clone();
    let up = map
        .get("cond.lora.up")
        .ok_or_else(|| HgError::validation("conditioner file missing cond.lora.up"))?
        .clone();
    cond.adapter = Some(LowRankAdapter { down, up });
    Ok(())
}

fn save_pools(path: &Path, pools: &[ImagePool], hash: &ConfigHash) -> Result<()> {
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    for pool in pools {
        for (j, img) in pool.images.iter().enumerate() {
            entries.push((format!("pool.{:04}.{:03}", pool.prompt_id, j), img));
        }
    }
    save_checkpoint(path, &entries, hash)
}

fn load_pools(
    path: &Path,
    world: &World,
    n: usize,
    expected: &ConfigHash,
    force: bool,
) -> Result<Vec<ImagePool>> {
    let (entries, hash) = load_checkpoint(path)?;
    check_hash(path, &hash, expected, force)?;
    let map: BTreeMap<String, Tensor> = entries.into_iter().collect();
    let mut pools = Vec::with_capacity(world.prompts.len());
    for p in &world.prompts {
        let mut images = Vec::with_capacity(n);
        for j in 0..n {
            let key = format!("pool.{:04}.{:03}", p.id, j);
            let img = map
                .get(&key)
                .ok_or_else(|| HgError::validation(format!("pool file missing {key}")))?;
            images.push(img.clone());
        }
        let mut pool = ImagePool {
            prompt_id: p.id,
            images,
            seeds: (0..n as u64).collect(),
            scores: None,
        };
        score_pool(&mut pool, world)?;
        pools.push(pool);
    }
    Ok(pools)
}

fn save_samples(path: &Path, samples: &[Tensor], hash: &ConfigHash) -> Result<()> {
    let entries: Vec<(String, &Tensor)> = samples
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("sample.{i:04}"), t))
        .collect();
    save_checkpoint(path, &entries, hash)
}

fn load_samples(path: &Path, expected: &ConfigHash, force: bool) -> Result<Vec<Tensor>> {
    let (entries, hash) = load_checkpoint(path)?;
    check_hash(path, &hash, expected, force)?;
    Ok(entries.into_iter().map(|(_, t)| t).collect())
}

// --- the pipeline ----------------------------------------------------------

/// Phase-tagged seed derivation.
fn phase_seed(seed: u64, tag: u64) -> u64 {
    crate::rng::splitmix64(seed ^ crate::rng::splitmix64(tag))
}

pub struct Pipeline<'a> {
    pub config: &'a Config,
    pub seed: u64,
    pub paths: Paths,
    pub opts: PipelineOptions,
    hash: ConfigHash,
}

impl<'a> Pipeline<'a> {
    pub fn new(config: &'a Config, seed: u64, out: &Path, opts: PipelineOptions) -> Pipeline<'a> {
        Pipeline {
            config,
            seed,
            paths: Paths::new(out),
            opts,
            hash: config.hash(),
        }
    }

    pub fn world(&self) -> Result<World> {
        let c = self.config;
        build_world(
            &c.world,
            c.model.channels,
            c.model.height,
            c.model.width,
            phase_seed(self.seed, 0x77),
        )
    }

    /// Supervised base model, trained or loaded.
    pub fn ensure_base(&self, world: &World) -> Result<(Denoiser, Conditioner)> {
        let path = self.paths.base();
        if path.exists() {
            println!("[base] loading {}", path.display());
            return load_base(&path, &self.config.model_config(), &self.hash, self.opts.force);
        }
        println!("[base] supervised pretraining ({} steps)", self.config.stages.sft.steps);
        let (den, cond, run) = train_sft(world, self.config, phase_seed(self.seed, 0x5f))?;
        println!(
            "[base] done in {:.1}s, loss {:.4} -> {:.4}",
            run.wall_time.as_secs_f64(),
            run.loss_trace.first().copied().unwrap_or(0.0),
            run.loss_trace.last().copied().unwrap_or(0.0),
        );
        save_base(&path, &den, &cond, &self.hash)?;
        Ok((den, cond))
    }

    pub fn ensure_pools(
        &self,
        world: &World,
        den: &Denoiser,
        cond: &Conditioner,
    ) -> Result<Vec<ImagePool>> {
        let path = self.paths.pools();
        let n = self.config.pool.n;
        if path.exists() {
            println!("[pools] loading {}", path.display());
            return load_pools(&path, world, n, &self.hash, self.opts.force);
        }
        println!("[pools] sampling {} images per prompt", n);
        let sched = self.config.noise_schedule()?;
        let model = InferenceModel::plain(den.clone(), cond.clone());
        let seed = phase_seed(self.seed, 0x90);
        let mut pools = Vec::with_capacity(world.prompts.len());
        for p in &world.prompts {
            let mut pool = build_pool(&model, p, n, seed, &self.config.sampler, &sched)?;
            score_pool(&mut pool, world)?;
            pools.push(pool);
        }
        save_pools(&path, &pools, &self.hash)?;
        Ok(pools)
    }

    pub fn ensure_easy_dataset(
        &self,
        world: &World,
        pools: &[ImagePool],
    ) -> Result<TripletDataset> {
        let path = self.paths.dataset("easy");
        if path.exists() {
            let (ds, hash) = load_dataset(&path)?;
            check_hash(&path, &hash, &self.hash, self.opts.force)?;
            return Ok(ds);
        }
        let mut triplets = Vec::new();
        let mut dropped = 0usize;
        for pool in pools {
            match select_easy_pair(pool)? {
                Some(t) => triplets.push(t),
                None => dropped += 1,
            }
        }
        if dropped > 0 {
            println!("[easy-data] dropped {dropped} degenerate pools (all scores equal)");
        }
        let ds = TripletDataset {
            stage: StageTag::Easy,
            triplets,
        };
        save_dataset(&path, &ds, &self.hash)?;
        drop(world);
        Ok(ds)
    }

    fn intermediates(&self, world: &World, den: &Denoiser, cond: &Conditioner) -> Result<Vec<IntermediateSet>> {
        let sched = self.config.noise_schedule()?;
        let window = self.config.window_config()?;
        println!(
            "[intermediates] reconstructing {} levels x {} prompts",
            window.levels.len(),
            world.prompts.len()
        );
        let model = InferenceModel::plain(den.clone(), cond.clone());
        build_intermediates(
            &model,
            world,
            &window,
            phase_seed(self.seed, 0x1e),
            &self.config.sampler,
            &sched,
        )
    }

    /// Normal + hard datasets (built together so the reconstruction sets are
    /// computed once), plus the t_1 image cache for resumability.
    pub fn ensure_normal_and_hard(
        &self,
        world: &World,
        den: &Denoiser,
        cond: &Conditioner,
        pools: &[ImagePool],
    ) -> Result<(TripletDataset, TripletDataset)> {
        let normal_path = self.paths.dataset("normal");
        let hard_path = self.paths.dataset("hard");
        if normal_path.exists() && hard_path.exists() {
            let (normal, h1) = load_dataset(&normal_path)?;
            check_hash(&normal_path, &h1, &self.hash, self.opts.force)?;
            let (hard, h2) = load_dataset(&hard_path)?;
            check_hash(&hard_path, &h2, &self.hash, self.opts.force)?;
            return Ok((normal, hard));
        }
        // resume mid-way: rebuild hard from the persisted t_1 cache
        if normal_path.exists() && self.paths.inter_t1().exists() {
            let (normal, h1) = load_dataset(&normal_path)?;
            check_hash(&normal_path, &h1, &self.hash, self.opts.force)?;
            let (entries, h2) = load_checkpoint(&self.paths.inter_t1())?;
            check_hash(&self.paths.inter_t1(), &h2, &self.hash, self.opts.force)?;
            let window = self.config.window_config()?;
            let t1 = window.levels[0];
            let mut inters = Vec::new();
            for (name, img) in entries {
                let pid: u32 = name
                    .strip_prefix("t1.")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| HgError::validation(format!("bad t1 cache entry {name}")))?;
                let score = world.score(&img, pid)?;
                inters.push(IntermediateSet {
                    prompt_id: pid,
                    levels: vec![(t1, img)],
                    scores: Some(vec![score]),
                });
            }
            let kept = normal.prompt_ids();
            let hard = build_hard_pairs(
                &inters,
                &normal,
                &kept,
                self.config.stages.hard_winner,
                world,
            )?;
            save_dataset(&hard_path, &hard, &self.hash)?;
            return Ok((normal, hard));
        }

        let inters = self.intermediates(world, den, cond)?;
        let window = self.config.window_config()?;
        let mut candidates = Vec::with_capacity(inters.len());
        for (inter, pool) in inters.iter().zip(pools) {
            candidates.push(select_normal_pair(inter, pool, &window)?);
        }
        let total = candidates.len();
        let (normal, kept) = filter_triplets(candidates);
        println!(
            "[normal-data] kept {}/{} candidates after filtering",
            kept.len(),
            total
        );
        let hard = build_hard_pairs(
            &inters,
            &normal,
            &kept,
            self.config.stages.hard_winner,
            world,
        )?;
        // persist the t_1 images so a killed run can rebuild the hard set
        let t1_entries: Vec<(String, &Tensor)> = inters
            .iter()
            .map(|s| (format!("t1.{}", s.prompt_id), &s.levels[0].1))
            .collect();
        save_checkpoint(&self.paths.inter_t1(), &t1_entries, &self.hash)?;
        save_dataset(&normal_path, &normal, &self.hash)?;
        save_dataset(&hard_path, &hard, &self.hash)?;
        Ok((normal, hard))
    }

    pub fn ensure_naive_dataset(
        &self,
        world: &World,
        pools: &[ImagePool],
    ) -> Result<TripletDataset> {
        let path = self.paths.dataset("naive");
        if path.exists() {
            let (ds, hash) = load_dataset(&path)?;
            check_hash(&path, &hash, &self.hash, self.opts.force)?;
            return Ok(ds);
        }
        let ds = build_naive_pairs(
            world,
            pools,
            self.config.stages.naive_loser,
            phase_seed(self.seed, 0x4a),
        )?;
        save_dataset(&path, &ds, &self.hash)?;
        Ok(ds)
    }

    /// Run (or load) one adapter training stage, continuing from `start`.
    #[allow(clippy::too_many_arguments)]
    fn ensure_stage(
        &self,
        name: &str,
        ctx: &StageContext<'_>,
        start: AdapterSet,
        dataset: &TripletDataset,
        section: &crate::config::DpoStageSection,
        tag: u64,
    ) -> Result<AdapterSet> {
        let path = self.paths.adapters(name);
        if path.exists() {
            println!("[{name}] loading {}", path.display());
            return load_adapters(&path, ctx.base_denoiser, &self.hash, self.opts.force);
        }
        println!(
            "[{name}] training {} steps on {} triplets",
            section.steps,
            dataset.triplets.len()
        );
        let mut adapters = start;
        let run = train_dpo_stage(
            name,
            ctx,
            &mut adapters,
            dataset,
            section,
            phase_seed(self.seed, tag),
        )?;
        println!(
            "[{name}] done in {:.1}s, loss {:.4} -> {:.4}",
            run.wall_time.as_secs_f64(),
            run.loss_trace.first().copied().unwrap_or(0.0),
            run.loss_trace.last().copied().unwrap_or(0.0),
        );
        save_adapters(&path, &adapters, &self.hash)?;
        Ok(adapters)
    }

    fn fresh_adapters(&self, den: &Denoiser) -> AdapterSet {
        let mut rng = crate::rng::RngStream::new(phase_seed(self.seed, 0x10a));
        AdapterSet::init(den, self.config.model.lora_rank, &mut rng)
    }

    fn inference_for(
        &self,
        den: &Denoiser,
        cond: &Conditioner,
        adapters: Option<&AdapterSet>,
        with_cond_adapter: bool,
    ) -> Result<InferenceModel> {
        let w = self.config.model.merge_weight;
        let denoiser = match adapters {
            Some(set) => den.merge_adapters(set, w)?,
            None => den.clone(),
        };
        Ok(InferenceModel {
            denoiser,
            adapters: None,
            conditioner: cond.clone(),
            cond_adapter_weight: if with_cond_adapter { Some(w) } else { None },
            cond_gate_from: if with_cond_adapter {
                Some(self.config.cond_gate_from())
            } else {
                None
            },
        })
    }

    /// Evaluate a model; the base model's samples are cached on first use.
    pub fn evaluate(
        &self,
        stage: &str,
        model: &InferenceModel,
        world: &World,
        base_samples: Option<&[Tensor]>,
    ) -> Result<(StageReport, Vec<Tensor>)> {
        let sched = self.config.noise_schedule()?;
        let ctx = EvalContext {
            world,
            sched: &sched,
            sampler: &self.config.sampler,
            n_samples: self.config.eval.n,
            seed: phase_seed(self.seed, 0xe7),
            fid_proj_dim: self.config.eval.fid_proj_dim,
            fid_proj_seed: self.config.eval.fid_proj_seed,
        };
        let (report, samples) = evaluate_stage(stage, model, &ctx, base_samples)?;
        save_report(&self.paths.eval_dir(), &report, &self.hash)?;
        println!(
            "[eval:{stage}] oracle {:.4} align {:.4} fid {:.4} sharp {:.4}{}{}",
            report.mean_oracle_score,
            report.mean_alignment,
            report.toy_fid,
            report.sharpness,
            report
                .hue_distance_vs_base
                .map(|h| format!(" hue {h:.2}"))
                .unwrap_or_default(),
            report
                .win_rate_vs_base
                .map(|w| format!(" win {w:.3}"))
                .unwrap_or_default(),
        );
        Ok((report, samples))
    }

    fn ensure_base_samples(
        &self,
        world: &World,
        den: &Denoiser,
        cond: &Conditioner,
    ) -> Result<(StageReport, Vec<Tensor>)> {
        let path = self.paths.base_samples();
        if path.exists() && self.paths.report_json("base").exists() {
            let samples = load_samples(&path, &self.hash, self.opts.force)?;
            let (report, _) = crate::io::load_report(&self.paths.report_json("base"))?;
            return Ok((report, samples));
        }
        let model = self.inference_for(den, cond, None, false)?;
        let (report, samples) = self.evaluate("base", &model, world, None)?;
        save_samples(&path, &samples, &self.hash)?;
        Ok((report, samples))
    }

    /// The full pipeline (or an ablation variant). Returns every stage
    /// report produced.
    pub fn run(&self) -> Result<PipelineOutcome> {
        std::fs::create_dir_all(&self.paths.out).map_err(|source| HgError::Io {
            path: self.paths.out.clone(),
            source,
        })?;
        let world = self.world()?;
        let (den, mut cond) = self.ensure_base(&world)?;
        let sched = self.config.noise_schedule()?;
        let ctx = StageContext {
            base_denoiser: &den,
            conditioner: &cond,
            sched: &sched,
            channels: self.config.model.channels,
        };
        let stages = &self.config.stages;
        let pools = self.ensure_pools(&world, &den, &cond)?;

        let mut reports = Vec::new();
        let (base_report, base_samples) = self.ensure_base_samples(&world, &den, &cond)?;
        reports.push(base_report);

        match self.opts.mode {
            AblationMode::Naive => {
                let d_naive = self.ensure_naive_dataset(&world, &pools)?;
                let adapters = self.ensure_stage(
                    "naive",
                    &ctx,
                    self.fresh_adapters(&den),
                    &d_naive,
                    &stages.naive,
                    0x4a1,
                )?;
                let model = self.inference_for(&den, &cond, Some(&adapters), false)?;
                reports.push(self.evaluate("naive", &model, &world, Some(&base_samples))?.0);
            }
            AblationMode::E2e => {
                let d_easy = self.ensure_easy_dataset(&world, &pools)?;
                let (d_normal, d_hard) = self.ensure_normal_and_hard(&world, &den, &cond, &pools)?;
                let mut mixed = TripletDataset {
                    stage: StageTag::Easy,
                    triplets: Vec::new(),
                };
                mixed.triplets.extend(d_easy.triplets);
                mixed.triplets.extend(d_normal.triplets);
                mixed.triplets.extend(d_hard.triplets);
                let adapters = self.ensure_stage(
                    "e2e",
                    &ctx,
                    self.fresh_adapters(&den),
                    &mixed,
                    &stages.e2e,
                    0xe2e,
                )?;
                let model = self.inference_for(&den, &cond, Some(&adapters), false)?;
                reports.push(self.evaluate("e2e", &model, &world, Some(&base_samples))?.0);
            }
            AblationMode::SkipEasy => {
                let (d_normal, d_hard) = self.ensure_normal_and_hard(&world, &den, &cond, &pools)?;
                let adapters = self.ensure_stage(
                    "normal",
                    &ctx,
                    self.fresh_adapters(&den),
                    &d_normal,
                    &stages.normal,
                    0x40,
                )?;
                let model = self.inference_for(&den, &cond, Some(&adapters), false)?;
                reports.push(self.evaluate("normal", &model, &world, Some(&base_samples))?.0);
                let adapters =
                    self.ensure_stage("hard", &ctx, adapters, &d_hard, &stages.hard, 0xa4)?;
                let model = self.inference_for(&den, &cond, Some(&adapters), false)?;
                reports.push(self.evaluate("hard", &model, &world, Some(&base_samples))?.0);
            }
            AblationMode::SkipNormal => {
                let d_easy = self.ensure_easy_dataset(&world, &pools)?;
                let (_d_normal, d_hard) = self.ensure_normal_and_hard(&world, &den, &cond, &pools)?;
                let adapters = self.ensure_stage(
                    "easy",
                    &ctx,
                    self.fresh_adapters(&den),
                    &d_easy,
                    &stages.easy,
                    0xea,
                )?;
                let model = self.inference_for(&den, &cond, Some(&adapters), false)?;
                reports.push(self.evaluate("easy", &model, &world, Some(&base_samples))?.0);
                let adapters =
                    self.ensure_stage("hard", &ctx, adapters, &d_hard, &stages.hard, 0xa4)?;
                let model = self.inference_for(&den, &cond, Some(&adapters), false)?;
                reports.push(self.evaluate("hard", &model, &world, Some(&base_samples))?.0);
            }
            AblationMode::SftFrom(source) => {
                let d_easy = self.ensure_easy_dataset(&world, &pools)?;
                let (d_normal, d_hard) = self.ensure_normal_and_hard(&world, &den, &cond, &pools)?;
                let mut adapters = self.fresh_adapters(&den);
                if source != SftFromSource::Base {
                    adapters =
                        self.ensure_stage("easy", &ctx, adapters, &d_easy, &stages.easy, 0xea)?;
                }
                if source == SftFromSource::Normal {
                    adapters =
                        self.ensure_stage("normal", &ctx, adapters, &d_normal, &stages.normal, 0x40)?;
                }
                let name = match source {
                    SftFromSource::Base => "sft_from_base",
                    SftFromSource::Easy => "sft_from_easy",
                    SftFromSource::Normal => "sft_from_normal",
                };
                let path = self.paths.adapters(name);
                let adapters = if path.exists() {
                    load_adapters(&path, &den, &self.hash, self.opts.force)?
                } else {
                    println!("[{name}] supervised fine-tuning on hard winners");
                    let sf = &stages.sft_from;
                    train_sft_on_winners(
                        &ctx,
                        &mut adapters,
                        &d_hard,
                        sf.steps,
                        sf.batch_size,
                        sf.lr,
                        phase_seed(self.seed, 0x5a),
                    )?;
                    save_adapters(&path, &adapters, &self.hash)?;
                    adapters
                };
                let model = self.inference_for(&den, &cond, Some(&adapters), false)?;
                reports.push(self.evaluate(name, &model, &world, Some(&base_samples))?.0);
            }
            AblationMode::Full => {
                let d_easy = self.ensure_easy_dataset(&world, &pools)?;
                let adapters = self.ensure_stage(
                    "easy",
                    &ctx,
                    self.fresh_adapters(&den),
                    &d_easy,
                    &stages.easy,
                    0xea,
                )?;
                let model = self.inference_for(&den, &cond, Some(&adapters), false)?;
                reports.push(self.evaluate("easy", &model, &world, Some(&base_samples))?.0);

                if self.opts.stat_ablation {
                    let mut section = stages.easy.clone();
                    section.lambda_stat = 0.0;
                    let nostat = self.ensure_stage(
                        "easy_nostat",
                        &ctx,
                        self.fresh_adapters(&den),
                        &d_easy,
                        &section,
                        0xea, // same stream as the easy stage: lambda is the only difference
                    )?;
                    let model = self.inference_for(&den, &cond, Some(&nostat), false)?;
                    reports.push(
                        self.evaluate("easy_nostat", &model, &world, Some(&base_samples))?
                            .0,
                    );
                }

                let (d_normal, d_hard) = self.ensure_normal_and_hard(&world, &den, &cond, &pools)?;
                let adapters =
                    self.ensure_stage("normal", &ctx, adapters, &d_normal, &stages.normal, 0x40)?;
                let model = self.inference_for(&den, &cond, Some(&adapters), false)?;
                reports.push(self.evaluate("normal", &model, &world, Some(&base_samples))?.0);

                let adapters =
                    self.ensure_stage("hard", &ctx, adapters, &d_hard, &stages.hard, 0xa4)?;
                let model = self.inference_for(&den, &cond, Some(&adapters), false)?;
                reports.push(self.evaluate("hard", &model, &world, Some(&base_samples))?.0);

                // conditioner adapter, trained against the post-hard model
                let cond_path = self.paths.conditioner();
                if cond_path.exists() {
                    load_cond_adapter(&cond_path, &mut cond, &self.hash, self.opts.force)?;
                } else {
                    println!("[conditioner] training {} steps", stages.conditioner.steps);
                    let run = train_conditioner(
                        &ctx,
                        Some(&adapters),
                        &mut cond,
                        &d_easy,
                        &stages.conditioner,
                        phase_seed(self.seed, 0xc0),
                    )?;
                    println!(
                        "[conditioner] done in {:.1}s",
                        run.wall_time.as_secs_f64()
                    );
                    save_cond_adapter(&cond_path, &cond, &self.hash)?;
                }
                let model = self.inference_for(&den, &cond, Some(&adapters), true)?;
                reports.push(self.evaluate("final", &model, &world, Some(&base_samples))?.0);
            }
        }

        Ok(PipelineOutcome {
            reports,
            out_dir: self.paths.out.clone(),
        })
    }
}
