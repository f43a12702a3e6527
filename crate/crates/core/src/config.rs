//! Run configuration: a TOML document with sections [world], [schedule],
//! [model], [sampler], [pool], [window], [stages.*], [eval]. Files must
//! spell out every key (missing keys are reported by name, unknown keys are
//! rejected) and are fully validated before any compute. The committed
//! configs/full.toml and configs/toy.toml carry the reference defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{HardWinner, NaiveLoser, WindowConfig};
use crate::error::{HgError, Result};
use crate::io::ConfigHash;
use crate::losses::{DpoConfig, StatConfig, TimestepWeight};
use crate::model::{AdapterScope, ModelConfig};
use crate::sampler::{SamplerConfig, SamplerKind};
use crate::schedule::{make_schedule, NoiseSchedule};
use crate::world::WorldConfig;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub cond_table_dim: usize,
    pub lora_rank: usize,
    pub cond_lora_rank: usize,
    /// Adapter application weight at inference/merge time.
    pub merge_weight: f64,
    /// Conditioner adapter active for t >= cond_gate_frac * t_max.
    pub cond_gate_frac: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PoolSection {
    pub n: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    pub levels: usize,
    /// 1-based rank of the lower window edge (t_r).
    pub r_rank: usize,
    /// 1-based rank of the upper window edge (t_g).
    pub g_rank: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefChoice {
    /// Snapshot taken when the stage starts (previous-stage model).
    StageStart,
    /// Always the supervised base model.
    Base,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SftSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing the condition with the null row (trains the
    /// unconditional branch for guidance).
    pub uncond_prob: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DpoStageSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub lambda_stat: f64,
    pub share_stat_noise: bool,
    pub reference: RefChoice,
    pub adapter_scope: AdapterScope,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SftFromSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StagesSection {
    pub sft: SftSection,
    pub easy: DpoStageSection,
    pub normal: DpoStageSection,
    pub hard: DpoStageSection,
    pub conditioner: DpoStageSection,
    pub naive: DpoStageSection,
    pub e2e: DpoStageSection,
    pub sft_from: SftFromSection,
    pub hard_winner: HardWinner,
    pub naive_loser: NaiveLoser,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n: usize,
    pub fid_proj_dim: usize,
    pub fid_proj_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub world: WorldConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelSection,
    pub sampler: SamplerConfig,
    pub pool: PoolSection,
    pub window: WindowSection,
    pub stages: StagesSection,
    pub eval: EvalSection,
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|source| HgError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Config = toml::from_str(&text)
            .map_err(|e| HgError::validation(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.model.channels,
            height: self.model.height,
            width: self.model.width,
            hidden: self.model.hidden,
            blocks: self.model.blocks,
            time_dim: self.model.time_dim,
            cond_dim: self.model.cond_dim,
            cond_table_dim: self.model.cond_table_dim,
            num_prompts: self.world.prompts,
            lora_rank: self.model.lora_rank,
            cond_lora_rank: self.model.cond_lora_rank,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(
            self.schedule.t_max,
            self.schedule.beta_min,
            self.schedule.beta_max,
        )
    }

    pub fn window_config(&self) -> Result<WindowConfig> {
        WindowConfig::from_grid(
            self.schedule.t_max,
            self.window.levels,
            self.window.r_rank,
            self.window.g_rank,
        )
    }

    /// Conditioner-adapter inference gate in timesteps.
    pub fn cond_gate_from(&self) -> usize {
        (self.model.cond_gate_frac * self.schedule.t_max as f64).ceil() as usize
    }

    pub fn dpo_config(&self, stage: &DpoStageSection) -> DpoConfig {
        DpoConfig {
            beta: stage.beta,
            timestep_weight: TimestepWeight::Constant,
        }
    }

    pub fn stat_config(&self, stage: &DpoStageSection) -> StatConfig {
        StatConfig {
            lambda_stat: stage.lambda_stat,
            share_noise: stage.share_stat_noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model_config().validate()?;
        let sched = self.noise_schedule()?;
        self.sampler.validate(&sched)?;
        self.window_config()?;
        if self.pool.n < 2 {
            return Err(HgError::validation("pool.n must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.stages.sft.uncond_prob) {
            return Err(HgError::validation("stages.sft.uncond_prob must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.model.cond_gate_frac) {
            return Err(HgError::validation("model.cond_gate_frac must be in [0, 1]"));
        }
        if self.model.merge_weight < 0.0 {
            return Err(HgError::validation("model.merge_weight must be >= 0"));
        }
        for (name, st) in [
            ("easy", &self.stages.easy),
            ("normal", &self.stages.normal),
            ("hard", &self.stages.hard),
            ("conditioner", &self.stages.conditioner),
            ("naive", &self.stages.naive),
            ("e2e", &self.stages.e2e),
        ] {
            if st.lr <= 0.0 || st.batch_size == 0 {
                return Err(HgError::validation(format!(
                    "stages.{name}: lr and batch_size must be positive"
                )));
            }
            self.dpo_config(st).validate()?;
            self.stat_config(st).validate()?;
            // the statistics term belongs to the easy stage only
            if name != "easy" && st.lambda_stat != 0.0 {
                return Err(HgError::validation(format!(
                    "stages.{name}.lambda_stat must be 0 (only the easy stage may use it)"
                )));
            }
        }
        if self.stages.sft.lr <= 0.0 || self.stages.sft.batch_size == 0 {
            return Err(HgError::validation(
                "stages.sft: lr and batch_size must be positive",
            ));
        }
        if self.stages.sft_from.lr <= 0.0 || self.stages.sft_from.batch_size == 0 {
            return Err(HgError::validation(
                "stages.sft_from: lr and batch_size must be positive",
            ));
        }
        if self.eval.n == 0 {
            return Err(HgError::validation("eval.n must be positive"));
        }
        if self.eval.n < self.eval.fid_proj_dim + 1 {
            return Err(HgError::validation(format!(
                "eval.n must be at least fid_proj_dim + 1 = {}",
                self.eval.fid_proj_dim + 1
            )));
        }
        let eval_reals = self.world.prompts * self.world.eval_reals_per_prompt;
        if eval_reals < self.eval.fid_proj_dim + 1 {
            return Err(HgError::validation(format!(
                "eval real set ({eval_reals}) smaller than fid_proj_dim + 1"
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical serialized form.
    pub fn hash(&self) -> ConfigHash {
        let text = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    /// Full-scale-faithful values: T=1000, beta in [1e-4, 0.02], the
    /// published preference/statistics weights, ranks 8/64, guidance 5.0,
    /// merge weight 0.5, N=20, 10 levels windowed at ranks 4..7.
    pub fn full() -> Config {
        Config {
            world: WorldConfig {
                prompts: 32,
                reals_per_prompt: 1,
                eval_reals_per_prompt: 2,
                blob_sigma: 2.5,
                checker_amp: 0.15,
                noise_amp: 0.02,
                pilot_count: 1000,
                floor_percentile: 25.0,
            },
            schedule: ScheduleConfig {
                t_max: 1000,
                beta_min: 1e-4,
                beta_max: 0.02,
            },
            model: ModelSection {
                channels: 3,
                height: 16,
                width: 16,
                hidden: 256,
                blocks: 4,
                time_dim: 32,
                cond_dim: 16,
                cond_table_dim: 32,
                lora_rank: 8,
                cond_lora_rank: 64,
                merge_weight: 0.5,
                cond_gate_frac: 0.9,
            },
            sampler: SamplerConfig {
                kind: SamplerKind::Ddim,
                steps: 50,
                guidance_scale: 5.0,
                eta: 0.0,
            },
            pool: PoolSection { n: 20 },
            window: WindowSection {
                levels: 10,
                r_rank: 4,
                g_rank: 7,
            },
            stages: StagesSection {
                sft: SftSection {
                    steps: 3000,
                    batch_size: 16,
                    lr: 1e-3,
                    uncond_prob: 0.1,
                },
                easy: DpoStageSection {
                    steps: 1500,
                    batch_size: 16,
                    lr: 1e-4,
                    beta: 2500.0,
                    lambda_stat: 10_000.0,
                    share_stat_noise: true,
                    reference: RefChoice::StageStart,
                    adapter_scope: AdapterScope::All,
                },
                normal: DpoStageSection {
                    steps: 500,
                    batch_size: 16,
                    lr: 1e-4,
                    beta: 2500.0,
                    lambda_stat: 0.0,
                    share_stat_noise: true,
                    reference: RefChoice::StageStart,
                    adapter_scope: AdapterScope::All,
                },
                hard: DpoStageSection {
                    steps: 500,
                    batch_size: 16,
                    lr: 1e-4,
                    beta: 2500.0,
                    lambda_stat: 0.0,
                    share_stat_noise: true,
                    reference: RefChoice::StageStart,
                    adapter_scope: AdapterScope::OutputHalf,
                },
                conditioner: DpoStageSection {
                    steps: 300,
                    batch_size: 16,
                    lr: 1e-4,
                    beta: 2500.0,
                    lambda_stat: 0.0,
                    share_stat_noise: true,
                    reference: RefChoice::StageStart,
                    adapter_scope: AdapterScope::All,
                },
                naive: DpoStageSection {
                    steps: 1500,
                    batch_size: 16,
                    lr: 1e-4,
                    beta: 2500.0,
                    lambda_stat: 0.0,
                    share_stat_noise: true,
                    reference: RefChoice::Base,
                    adapter_scope: AdapterScope::All,
                },
                e2e: DpoStageSection {
                    steps: 2500,
                    batch_size: 16,
                    lr: 1e-4,
                    beta: 2500.0,
                    lambda_stat: 0.0,
                    share_stat_noise: true,
                    reference: RefChoice::Base,
                    adapter_scope: AdapterScope::All,
                },
                sft_from: SftFromSection {
                    steps: 500,
                    batch_size: 16,
                    lr: 1e-4,
                },
                hard_winner: HardWinner::IntermediateT1,
                naive_loser: NaiveLoser::BestOfPool,
            },
            eval: EvalSection {
                n: 64,
                fid_proj_dim: 16,
                fid_proj_seed: 1,
            },
        }
    }

    /// Desk-scale values: T=100 with betas rescaled so the terminal
    /// signal-to-noise matches the full schedule; everything else shared.
    pub fn toy() -> Config {
        let mut cfg = Config::full();
        cfg.schedule = ScheduleConfig {
            t_max: 100,
            beta_min: 1e-3,
            beta_max: 0.2,
        };
        cfg.sampler.steps = 50;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_configs_validate() {
        Config::full().validate().unwrap();
        Config::toy().validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_preserves_hash() {
        let cfg = Config::toy();
        let text = toml::to_string(&cfg).unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        assert_ne!(cfg.hash(), Config::full().hash());
    }

    #[test]
    fn missing_key_is_reported_by_name() {
        let cfg = Config::toy();
        let mut text = toml::to_string(&cfg).unwrap();
        text = text.replace("lambda_stat = 10000.0\n", "");
        let err = toml::from_str::<Config>(&text).unwrap_err().to_string();
        assert!(err.contains("lambda_stat"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let cfg = Config::toy();
        let mut text = toml::to_string(&cfg).unwrap();
        text.push_str("\n[extra]\nkey = 1\n");
        assert!(toml::from_str::<Config>(&text).is_err());
        let mut text2 = toml::to_string(&cfg).unwrap();
        text2 = text2.replace("[pool]\nn = 20", "[pool]\nn = 20\nbogus = 3");
        assert!(toml::from_str::<Config>(&text2).is_err());
    }

    #[test]
    fn stat_weight_outside_easy_rejected() {
        let mut cfg = Config::toy();
        cfg.stages.normal.lambda_stat = 5.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn window_and_gate_derivations() {
        let cfg = Config::toy();
        let w = cfg.window_config().unwrap();
        assert_eq!(w.levels, vec![10, 20, 30, 40, 50, 60, 70, 80, 90, 100]);
        assert_eq!((w.t_r, w.t_g), (40, 70));
        assert_eq!(cfg.cond_gate_from(), 90);
        let full = Config::full();
        assert_eq!(full.cond_gate_from(), 900);
    }

    #[test]
    fn toy_schedule_matches_full_terminal_snr() {
        let toy = Config::toy().noise_schedule().unwrap();
        let full = Config::full().noise_schedule().unwrap();
        let a = toy.alpha_bar[toy.len() - 1];
        let b = full.alpha_bar[full.len() - 1];
        assert!((a.ln() - b.ln()).abs() < 0.3, "{a} vs {b}");
    }
}
