//! Training and model configuration, serialized as TOML.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{RestcError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SpatialOnly,
    SingleAlign,
    MultiAlign,
    SelfMultiAlign,
    MixedNoise,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::SpatialOnly,
        Strategy::SingleAlign,
        Strategy::MultiAlign,
        Strategy::SelfMultiAlign,
        Strategy::MixedNoise,
    ];
}

impl FromStr for Strategy {
    type Err = RestcError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "spatial_only" | "so" => Strategy::SpatialOnly,
            "single_align" | "sa" => Strategy::SingleAlign,
            "multi_align" | "ma" => Strategy::MultiAlign,
            "self_multi_align" | "sma" => Strategy::SelfMultiAlign,
            "mixed_noise" | "mn" => Strategy::MixedNoise,
            other => return Err(RestcError::Config(format!("unknown negative-sampling strategy `{other}`"))),
        })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::SpatialOnly => "spatial_only",
            Strategy::SingleAlign => "single_align",
            Strategy::MultiAlign => "multi_align",
            Strategy::SelfMultiAlign => "self_multi_align",
            Strategy::MixedNoise => "mixed_noise",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Per-item binary cross entropy over the softmax output.
    Binary,
    /// `-log ŷ_target`.
    Categorical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheduler {
    Constant,
    Step { step: usize, gamma: f64 },
    Cosine { t_max: usize, lr_min: f64 },
}

impl Scheduler {
    pub fn lr(&self, lr0: f64, epoch: usize) -> f64 {
        match *self {
            Scheduler::Constant => lr0,
            Scheduler::Step { step, gamma } => lr0 * gamma.powi((epoch / step.max(1)) as i32),
            Scheduler::Cosine { t_max, lr_min } => {
                let frac = epoch.min(t_max) as f64 / t_max.max(1) as f64;
                lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_sestrans: bool,
    pub no_cfg: bool,
    pub no_cont: bool,
    pub no_pe_g: bool,
    pub no_pe_s: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub dim: usize,
    pub max_len_cap: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub tau: f64,
    pub lr: f64,
    pub scheduler: Scheduler,
    pub seed: u64,
    pub ablations: Ablations,
    pub mgat_layers: usize,
    pub cfg_layers: usize,
    pub sestrans_layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub strategy: Strategy,
    /// Include the positive pair in the contrastive denominator.
    pub standard_infonce: bool,
    pub loss: LossKind,
    pub val_fraction: f64,
    /// Epochs without validation MRR@20 improvement before stopping; 0 disables.
    pub patience: usize,
    /// Recompute CFG embeddings every k steps (1 = every step).
    pub cfg_refresh: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 512,
            dim: 64,
            max_len_cap: 50,
            eta1: 0.01,
            eta2: 1e-5,
            tau: 0.5,
            lr: 0.001,
            scheduler: Scheduler::Step { step: 3, gamma: 0.1 },
            seed: 0,
            ablations: Ablations::default(),
            mgat_layers: 1,
            cfg_layers: 3,
            sestrans_layers: 2,
            heads: 2,
            dropout: 0.1,
            leaky_slope: restc_tensor::DEFAULT_LEAKY_SLOPE,
            strategy: Strategy::MixedNoise,
            standard_infonce: false,
            loss: LossKind::Binary,
            val_fraction: 0.2,
            patience: 5,
            cfg_refresh: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(RestcError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.dim == 0 || self.max_len_cap == 0 {
            return fail("epochs, batch_size, dim and max_len_cap must be positive".into());
        }
        if !(self.eta1 >= 0.0 && self.eta2 >= 0.0) {
            return fail(format!("eta1/eta2 must be non-negative, got {}/{}", self.eta1, self.eta2));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        for (name, v) in [("mgat_layers", self.mgat_layers), ("cfg_layers", self.cfg_layers)] {
            if !(1..=4).contains(&v) {
                return fail(format!("{name} must be in [1, 4], got {v}"));
            }
        }
        if self.sestrans_layers == 0 || self.heads == 0 {
            return fail("sestrans_layers and heads must be positive".into());
        }
        if !(2 * self.dim).is_multiple_of(self.heads) {
            return fail(format!("2*dim = {} is not divisible by heads = {}", 2 * self.dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if self.cfg_refresh == 0 {
            return fail("cfg_refresh must be at least 1".into());
        }
        if let Scheduler::Step { step: 0, .. } | Scheduler::Cosine { t_max: 0, .. } = self.scheduler {
            return fail("scheduler period must be positive".into());
        }
        Ok(())
    }

    pub fn contrastive_active(&self) -> bool {
        !self.ablations.no_cont && !self.ablations.no_sestrans && self.eta1 > 0.0
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| RestcError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RestcError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            RestcError::Config(m) => RestcError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Hex SHA-256 of the fields that fix parameter shapes and model semantics.
    pub fn architecture_hash(&self) -> String {
        let arch = format!(
            "dim={};heads={};sestrans={};mgat={};cfg={};cap={};abl={:?}",
            self.dim,
            self.heads,
            self.sestrans_layers,
            self.mgat_layers,
            self.cfg_layers,
            self.max_len_cap,
            self.ablations
        );
        Sha256::digest(arch.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_lr() {
        let s = Scheduler::Step { step: 3, gamma: 0.1 };
        assert!((s.lr(0.001, 3) - 0.0001).abs() < 1e-18);
        assert_eq!(s.lr(0.001, 2), 0.001);
    }

    #[test]
    fn cosine_lr() {
        let s = Scheduler::Cosine { t_max: 10, lr_min: 0.0 };
        assert_eq!(s.lr(0.001, 0), 0.001);
        assert!(s.lr(0.001, 10).abs() < 1e-18);
        assert!((s.lr(0.001, 5) - 0.0005).abs() < 1e-15);
        let s = Scheduler::Cosine { t_max: 4, lr_min: 1e-4 };
        assert!((s.lr(1e-3, 2) - 5.5e-4).abs() < 1e-15);
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.ablations.no_cfg = true;
        cfg.scheduler = Scheduler::Cosine { t_max: 7, lr_min: 0.0 };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = TrainConfig::from_toml("dim = 16\nstrategy = \"multi_align\"\n").unwrap();
        assert_eq!(cfg.dim, 16);
        assert_eq!(cfg.strategy, Strategy::MultiAlign);
        assert_eq!(cfg.batch_size, 512);
    }

    #[test]
    fn validation() {
        let bad = [
            TrainConfig { heads: 3, dim: 4, ..Default::default() },
            TrainConfig { eta1: -1.0, ..Default::default() },
            TrainConfig { mgat_layers: 5, ..Default::default() },
            TrainConfig { cfg_layers: 0, ..Default::default() },
            TrainConfig { tau: 0.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(RestcError::Config(_))), "{cfg:?}");
        }
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }
}
