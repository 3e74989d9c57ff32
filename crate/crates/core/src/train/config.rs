//! Phase configuration and the flat `key = value` config format.
//!
//! Lines are `key = value`; `#` starts a comment. Keys prefixed `model.` set
//! the model configuration, everything else the phase configuration.

use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::models::{Architecture, ModelConfig};
use crate::objectives::ReconScope;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Probe,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Probe => "probe",
            Phase::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "probe" => Ok(Phase::Probe),
            "finetune" => Ok(Phase::Finetune),
            _ => Err(Error::Config(format!("unknown phase `{s}`"))),
        }
    }

    pub fn is_supervised(self) -> bool {
        self != Phase::Pretrain
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    CosineDecay,
    CosineWarmRestarts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub phase: Phase,
    pub seed: u64,
    pub base_lr: f64,
    /// Defaults to `base_lr / 100`.
    pub min_lr: Option<f64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    /// Cycle length for warm restarts.
    pub restart_epochs: usize,
    pub mask_ratio: f64,
    pub meta_dropout_p: f64,
    pub ground_policy: AugmentPolicy,
    pub satellite_policy: AugmentPolicy,
    pub label_smoothing: f64,
    /// Batch mixup/cutmix when the ground policy asks for it.
    pub mixing: bool,
    /// Batches whose gradients are averaged into one optimizer step.
    pub steps_per_update: usize,
    /// Data-parallel shards per batch; 1 is the deterministic reference loop.
    pub workers: usize,
}

impl PhaseConfig {
    /// Defaults from the published hyperparameter tables.
    pub fn defaults(phase: Phase) -> Self {
        let base = Self {
            phase,
            seed: 0,
            base_lr: 1e-4,
            min_lr: None,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            batch_size: 32,
            epochs: 20,
            warmup_epochs: 0,
            schedule: Schedule::CosineDecay,
            restart_epochs: 10,
            mask_ratio: 0.75,
            meta_dropout_p: 0.25,
            ground_policy: AugmentPolicy::PretrainGround,
            satellite_policy: AugmentPolicy::PretrainSat,
            label_smoothing: 0.0,
            mixing: false,
            steps_per_update: 1,
            workers: 1,
        };
        match phase {
            Phase::Pretrain => base,
            Phase::Probe => Self {
                base_lr: 0.1,
                weight_decay: 1e-4,
                beta2: 0.999,
                ground_policy: AugmentPolicy::Probe,
                satellite_policy: AugmentPolicy::Probe,
                ..base
            },
            Phase::Finetune => Self {
                base_lr: 5e-5,
                weight_decay: 0.1,
                beta2: 0.999,
                ground_policy: AugmentPolicy::FinetuneGround,
                satellite_policy: AugmentPolicy::FinetuneSat,
                label_smoothing: crate::data::augment::LABEL_SMOOTHING,
                mixing: true,
                ..base
            },
        }
    }

    pub fn min_lr(&self) -> f64 {
        self.min_lr.unwrap_or(self.base_lr / 100.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.batch_size == 0 || self.steps_per_update == 0 || self.workers == 0 {
            return Err(Error::Config("batch_size, steps_per_update and workers must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio must be in [0, 1), got {}", self.mask_ratio)));
        }
        if !(0.0..=1.0).contains(&self.meta_dropout_p) {
            return Err(Error::Config(format!("meta_dropout_p must be in [0, 1], got {}", self.meta_dropout_p)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must be in [0, 1)".into()));
        }
        if self.phase == Phase::Pretrain && self.batch_size < 2 {
            return Err(Error::Config("pre-training needs batch_size >= 2".into()));
        }
        Ok(())
    }

    /// Sets one phase key. Returns `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "phase" => self.phase = Phase::parse(value)?,
            "seed" => self.seed = num(key, value)?,
            "base_lr" | "lr" => self.base_lr = num(key, value)?,
            "min_lr" => self.min_lr = Some(num(key, value)?),
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "schedule" => {
                self.schedule = match value {
                    "cosine_decay" => Schedule::CosineDecay,
                    "cosine_warm_restarts" => Schedule::CosineWarmRestarts,
                    _ => return Err(Error::Config(format!("unknown schedule `{value}`"))),
                }
            }
            "restart_epochs" => self.restart_epochs = num(key, value)?,
            "mask_ratio" => self.mask_ratio = num(key, value)?,
            "meta_dropout_p" => self.meta_dropout_p = num(key, value)?,
            "ground_policy" => self.ground_policy = AugmentPolicy::parse(value)?,
            "satellite_policy" => self.satellite_policy = AugmentPolicy::parse(value)?,
            "label_smoothing" => self.label_smoothing = num(key, value)?,
            "mixing" => self.mixing = num(key, value)?,
            "steps_per_update" => self.steps_per_update = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

/// Sets one `model.*` key (prefix already stripped).
pub fn set_model_key(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<()> {
    let both = |cfg: &mut ModelConfig, f: &dyn Fn(&mut crate::vit::EncoderConfig)| {
        f(&mut cfg.ground);
        f(&mut cfg.satellite);
    };
    match key {
        "arch" => cfg.arch = Architecture::parse(value)?,
        "embed_dim" => {
            let v: usize = num(key, value)?;
            both(cfg, &|e| e.embed_dim = v);
        }
        "depth" => {
            let v: usize = num(key, value)?;
            both(cfg, &|e| e.depth = v);
        }
        "heads" => {
            let v: usize = num(key, value)?;
            both(cfg, &|e| e.heads = v);
        }
        "mlp_ratio" => {
            let v: f64 = num(key, value)?;
            both(cfg, &|e| e.mlp_ratio = v);
        }
        "ground_image_size" => cfg.ground.image_size = num(key, value)?,
        "ground_patch_size" => cfg.ground.patch_size = num(key, value)?,
        "satellite_image_size" => cfg.satellite.image_size = num(key, value)?,
        "satellite_patch_size" => cfg.satellite.patch_size = num(key, value)?,
        "decoder_embed_dim" => cfg.decoder.embed_dim = num(key, value)?,
        "decoder_depth" => cfg.decoder.depth = num(key, value)?,
        "decoder_heads" => cfg.decoder.heads = num(key, value)?,
        "freeze_satellite" => cfg.freeze_satellite = num(key, value)?,
        "temperature" => cfg.temperature = num(key, value)?,
        "recon_scope" => {
            cfg.recon_scope = match value {
                "masked_only" => ReconScope::MaskedOnly,
                "all_patches" => ReconScope::AllPatches,
                _ => return Err(Error::Config(format!("unknown recon_scope `{value}`"))),
            }
        }
        _ => return Err(Error::Config(format!("unknown model key `model.{key}`"))),
    }
    Ok(())
}

/// Parses `key = value` lines, rejecting malformed lines.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_defaults() {
        let p = PhaseConfig::defaults(Phase::Pretrain);
        assert_eq!((p.base_lr, p.weight_decay, p.beta1, p.beta2), (1e-4, 0.01, 0.9, 0.95));
        assert_eq!(p.min_lr(), 1e-6);
        let p = PhaseConfig::defaults(Phase::Probe);
        assert_eq!((p.base_lr, p.weight_decay, p.beta2), (0.1, 1e-4, 0.999));
        let p = PhaseConfig::defaults(Phase::Finetune);
        assert_eq!((p.base_lr, p.weight_decay, p.beta2, p.label_smoothing), (5e-5, 0.1, 0.999, 0.1));
    }

    #[test]
    fn kv_file_sets_phase_and_model() {
        let text = "# desk run\nlr = 0.001\nepochs=3 # short\nmodel.embed_dim = 32\nmodel.arch = cvm-meta\nschedule = cosine_warm_restarts\n";
        let mut p = PhaseConfig::defaults(Phase::Pretrain);
        let mut m = ModelConfig::toy(Architecture::Cve);
        for (k, v) in parse_kv(text).unwrap() {
            if let Some(mk) = k.strip_prefix("model.") {
                set_model_key(&mut m, mk, &v).unwrap();
            } else {
                assert!(p.set(&k, &v).unwrap(), "{k}");
            }
        }
        assert_eq!((p.base_lr, p.epochs, p.schedule), (1e-3, 3, Schedule::CosineWarmRestarts));
        assert_eq!((m.ground.embed_dim, m.satellite.embed_dim, m.arch), (32, 32, Architecture::CvmMeta));
        assert!(!p.set("nonsense", "1").unwrap());
        assert!(p.set("epochs", "three").is_err());
        assert!(parse_kv("just words").is_err());
        assert!(set_model_key(&mut m, "nope", "1").is_err());
    }

    #[test]
    fn validation() {
        let mut p = PhaseConfig::defaults(Phase::Pretrain);
        assert!(p.validate().is_ok());
        p.batch_size = 1;
        assert!(p.validate().is_err());
        let mut p = PhaseConfig::defaults(Phase::Probe);
        p.base_lr = 0.0;
        assert!(p.validate().is_err());
    }
}
