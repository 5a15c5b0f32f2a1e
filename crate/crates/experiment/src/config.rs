//! TOML experiment recipes.
//!
//! Every section is optional and every key has a default, so an empty file
//! is a valid config. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scfm_core::data::{DatasetKind, DatasetSpec};
use scfm_core::distill::{DistillConfig, Variant};
use scfm_core::flow::TeacherConfig;
use scfm_core::metrics::EvalProtocol;
use scfm_core::net::NetConfig;
use scfm_core::optim::AdamWConfig;

use crate::error::{ExperimentError, Result};

/// Environment variable that replaces the top-level `seed`.
pub const SEED_ENV: &str = "SCFM_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub net: NetSection,
    pub teacher: TeacherSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: String,
    pub size: usize,
    pub noise: f64,
    /// Held-out points drawn after the training set, for data-fidelity checks.
    pub heldout: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub hidden_dim: usize,
    pub num_hidden_layers: usize,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
    /// Condition on the dataset labels.
    pub conditional: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub label_dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub variant: String,
    pub iters: usize,
    pub batch_size: usize,
    pub teacher_fraction: f64,
    pub mu_slow: f64,
    pub mu_fast: f64,
    /// Iterations between restarts of the cyclic variant; 0 disables.
    pub restart_period: u64,
    pub grid_steps: usize,
    pub shift_range: [f64; 2],
    pub guidance_range: [f64; 2],
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Size of the fixed training subset; 0 uses the whole dataset.
    pub few_shot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Iterations between metric rows during distillation.
    pub every: u64,
    pub teacher_steps: usize,
    pub student_steps: Vec<usize>,
    /// Seeds `seed_offset .. seed_offset + seeds` drive noise and labels.
    pub seeds: u64,
    pub seed_offset: u64,
    pub n_proj: usize,
    pub projection_seed: u64,
    pub shift: f64,
    pub guidance: f64,
    pub residual_trials: usize,
    pub residual_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/scfm"),
            data: DataSection::default(),
            net: NetSection::default(),
            teacher: TeacherSection::default(),
            distill: DistillSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        DataSection {
            kind: spec.kind.name().to_string(),
            size: spec.size,
            noise: spec.noise,
            heldout: 10_000,
        }
    }
}

impl Default for NetSection {
    fn default() -> Self {
        let net = NetConfig::default();
        NetSection {
            hidden_dim: net.hidden_dim,
            num_hidden_layers: net.num_hidden_layers,
            time_embed_dim: net.time_embed_dim,
            class_embed_dim: net.class_embed_dim,
            conditional: true,
        }
    }
}

impl Default for TeacherSection {
    fn default() -> Self {
        let optim = AdamWConfig::default();
        TeacherSection {
            iters: 20_000,
            batch_size: 128,
            lr: optim.lr,
            weight_decay: optim.weight_decay,
            label_dropout: 0.1,
        }
    }
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            variant: d.variant.name().to_string(),
            iters: 5_000,
            batch_size: d.batch_size,
            teacher_fraction: d.teacher_fraction,
            mu_slow: d.mu_slow,
            mu_fast: d.mu_fast,
            restart_period: d.restart_period,
            grid_steps: d.grid_steps,
            shift_range: [d.shift_range.0, d.shift_range.1],
            guidance_range: [d.guidance_range.0, d.guidance_range.1],
            lora_rank: d.lora_rank,
            lora_alpha: d.lora_alpha,
            lr: d.optim.lr,
            weight_decay: d.optim.weight_decay,
            few_shot: 0,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = EvalProtocol::default();
        EvalSection {
            every: 100,
            teacher_steps: 128,
            student_steps: vec![3, 4, 8],
            seeds: 1_000,
            seed_offset: 0,
            n_proj: p.n_proj,
            projection_seed: p.projection_seed,
            shift: p.shift,
            guidance: p.guidance,
            residual_trials: 4,
            residual_batch: 512,
        }
    }
}

/// Reads and validates a config file, then applies `SCFM_SEED`.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    cfg.apply_seed_env()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Parses and validates without consulting the environment.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully resolved config, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| ExperimentError::Config(format!("{SEED_ENV}={v:?} is not a u64 seed")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        self.dataset_spec()?.validate().map_err(config_error)?;
        self.net_config()?.validate().map_err(config_error)?;
        if self.teacher.batch_size == 0 {
            return bad("teacher.batch_size must be positive".into());
        }
        if !(self.teacher.lr > 0.0) || !(0.0..1.0).contains(&self.teacher.label_dropout) {
            return bad("teacher.lr must be positive and teacher.label_dropout in [0, 1)".into());
        }
        let mut d = self.distill_config()?;
        if self.distill.few_shot > 0 {
            if self.distill.few_shot > self.data.size {
                return bad(format!(
                    "distill.few_shot = {} exceeds data.size = {}",
                    self.distill.few_shot, self.data.size
                ));
            }
            d.batch_size = self.distill.few_shot;
        }
        d.validate().map_err(config_error)?;
        if !(d.optim.lr > 0.0) {
            return bad("distill.lr must be positive".into());
        }
        let e = &self.eval;
        if e.every == 0 || e.seeds == 0 || e.n_proj == 0 || e.residual_trials == 0 || e.residual_batch == 0 {
            return bad("eval.every, seeds, n_proj, residual_trials and residual_batch must be positive".into());
        }
        if e.teacher_steps == 0 || e.student_steps.is_empty() || e.student_steps.contains(&0) {
            return bad("eval step counts must be positive".into());
        }
        if !(e.shift >= 1.0) || !(e.guidance >= 0.0) {
            return bad("eval.shift must be ≥ 1 and eval.guidance ≥ 0".into());
        }
        Ok(())
    }

    pub fn dataset_kind(&self) -> Result<DatasetKind> {
        self.data.kind.parse().map_err(config_error)
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            kind: self.dataset_kind()?,
            size: self.data.size,
            seed: self.seed,
            noise: self.data.noise,
        })
    }

    pub fn class_count(&self) -> Result<usize> {
        Ok(if self.net.conditional {
            self.dataset_kind()?.class_count()
        } else {
            0
        })
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        Ok(NetConfig {
            input_dim: 2,
            hidden_dim: self.net.hidden_dim,
            num_hidden_layers: self.net.num_hidden_layers,
            time_embed_dim: self.net.time_embed_dim,
            class_count: self.class_count()?,
            class_embed_dim: self.net.class_embed_dim,
            step_embed_dim: 0,
        })
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            iters: self.teacher.iters,
            batch_size: self.teacher.batch_size,
            label_dropout: self.teacher.label_dropout,
            seed: self.seed,
            optim: AdamWConfig {
                lr: self.teacher.lr,
                weight_decay: self.teacher.weight_decay,
                ..AdamWConfig::default()
            },
        }
    }

    pub fn variant(&self) -> Result<Variant> {
        self.distill.variant.parse().map_err(config_error)
    }

    pub fn distill_config(&self) -> Result<DistillConfig> {
        let d = &self.distill;
        Ok(DistillConfig {
            batch_size: d.batch_size,
            teacher_fraction: d.teacher_fraction,
            mu_slow: d.mu_slow,
            mu_fast: d.mu_fast,
            restart_period: d.restart_period,
            variant: self.variant()?,
            grid_steps: d.grid_steps,
            shift_range: (d.shift_range[0], d.shift_range[1]),
            guidance_range: (d.guidance_range[0], d.guidance_range[1]),
            lora_rank: d.lora_rank,
            lora_alpha: d.lora_alpha,
            optim: AdamWConfig {
                lr: d.lr,
                weight_decay: d.weight_decay,
                ..AdamWConfig::default()
            },
            full_batch: false,
            seed: self.seed,
        })
    }

    pub fn eval_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            shift: self.eval.shift,
            guidance: self.eval.guidance,
            n_proj: self.eval.n_proj,
            projection_seed: self.eval.projection_seed,
        }
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        (self.eval.seed_offset..self.eval.seed_offset + self.eval.seeds).collect()
    }
}

fn config_error(e: scfm_core::Error) -> ExperimentError {
    ExperimentError::Config(e.to_string())
}
