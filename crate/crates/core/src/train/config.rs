//! Run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::meta::{MetaFeatures, MetaPlan};
use crate::psl::LayerPlan;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "META3DSEG_SEED";

/// Weight-setting ablation modes.
///
/// `A` fine-tunes a pretrained segmenter; `B` adds a deterministic predicted
/// overlay; `C` samples the overlay and regularizes it with a KL term; `D`
/// adds the learned per-point score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    A,
    B,
    C,
    D,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::A, Mode::B, Mode::C, Mode::D];

    /// Meta pipeline switches, `None` for mode A.
    pub fn features(self) -> Option<MetaFeatures> {
        match self {
            Mode::A => None,
            Mode::B => Some(MetaFeatures {
                score: false,
                sample: false,
                kl: false,
            }),
            Mode::C => Some(MetaFeatures {
                score: false,
                sample: true,
                kl: true,
            }),
            Mode::D => Some(MetaFeatures {
                score: true,
                sample: true,
                kl: true,
            }),
        }
    }

    pub fn as_byte(self) -> u8 {
        match self {
            Mode::A => b'A',
            Mode::B => b'B',
            Mode::C => b'C',
            Mode::D => b'D',
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Mode::ALL.into_iter().find(|m| m.as_byte() == b)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_byte() as char)
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Mode::A),
            "B" => Ok(Mode::B),
            "C" => Ok(Mode::C),
            "D" => Ok(Mode::D),
            other => Err(format!("unknown mode {other:?}; expected A, B, C or D")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: Option<PathBuf>,
    pub mode: Mode,
    pub seed: u64,
    pub n_way: usize,
    pub k_shot: usize,
    /// Points sampled from every shape.
    pub points: usize,
    /// Query shapes kept per category and episode.
    pub query_limit: Option<usize>,
    /// Adam steps `T` on the support set.
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub episodes: usize,
    pub meta_epochs: usize,
    /// Fraction of episodes that also update the segmenter initialization.
    pub phase1_fraction: f64,
    /// KL weight `β`.
    pub beta: f64,
    /// Supervised steps on pooled base shapes before episodic training.
    pub pretrain_steps: usize,
    /// Shapes per pretraining batch.
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    /// Meta-test episodes per novel category.
    pub eval_tasks: usize,
    /// Overlay samples averaged at meta-test.
    pub test_samples: usize,
    /// Record real seconds in the training log; off keeps logs reproducible.
    pub log_wall_time: bool,
    pub layers: LayerPlan,
    pub meta: MetaPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            mode: Mode::D,
            seed: 0,
            n_way: 1,
            k_shot: 1,
            points: 128,
            query_limit: Some(4),
            inner_steps: 100,
            inner_lr: 1e-3,
            outer_lr: 1e-3,
            episodes: 200,
            meta_epochs: 1,
            phase1_fraction: 0.5,
            beta: 1e-3,
            pretrain_steps: 200,
            pretrain_batch: 4,
            pretrain_lr: 1e-3,
            eval_tasks: 4,
            test_samples: 1,
            log_wall_time: false,
            layers: LayerPlan::default(),
            meta: MetaPlan::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, resolves `manifest` against its directory and
    /// applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(m) = &cfg.manifest {
            if m.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.manifest = Some(base.join(m));
            }
        }
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<(), TrainError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| {
                TrainError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, v) in [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("points", self.points),
            ("episodes", self.episodes),
            ("meta_epochs", self.meta_epochs),
            ("pretrain_batch", self.pretrain_batch),
            ("eval_tasks", self.eval_tasks),
            ("test_samples", self.test_samples),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.query_limit == Some(0) {
            return bad("query_limit must be at least 1".into());
        }
        for (name, v) in [
            ("inner_lr", self.inner_lr),
            ("outer_lr", self.outer_lr),
            ("pretrain_lr", self.pretrain_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.phase1_fraction) {
            return bad(format!(
                "phase1_fraction must lie in [0, 1], got {}",
                self.phase1_fraction
            ));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        self.layers.validate().map_err(TrainError::Config)?;
        if self.meta.k == 0 {
            return bad("meta.k must be at least 1".into());
        }
        Ok(())
    }

    pub fn total_episodes(&self) -> usize {
        self.episodes * self.meta_epochs
    }

    /// Episodes, counted from 0, that update the segmenter initialization.
    pub fn phase1_episodes(&self) -> usize {
        (self.phase1_fraction * self.total_episodes() as f64).round() as usize
    }
}
