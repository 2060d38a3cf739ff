//! Run configuration.
//!
//! Plain-text key-value config with nesting (TOML). Every field has a
//! documented default; unknown keys are rejected outright so typos fail
//! fast instead of silently running the defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::episode::EpisodeConfig;
use crate::error::{Error, Result};
use crate::fusion::{G2raConfig, Variant};
use crate::policy::PolicyConfig;
use crate::train::TrainSettings;
use crate::world::{EncoderConfig, WorldConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Held-out episodes per difficulty split.
    pub episodes_easy: usize,
    pub episodes_hard: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            episodes_easy: 200,
            episodes_hard: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub etas: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            etas: vec![0.0, 0.5, 1.0],
            alphas: vec![0.2, 0.5, 0.8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSettings {
    /// Replicates trained at seed, seed+1, ... and averaged.
    pub replicates: u64,
}

impl Default for AblateSettings {
    fn default() -> Self {
        AblateSettings { replicates: 3 }
    }
}

/// Gradient verification fixture dims; sized so a full check stays well
/// under a minute on one core.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSettings {
    pub d_clip: usize,
    pub d_agg: usize,
    pub d: usize,
    pub heads: usize,
    pub n_2d: usize,
    pub n_3d: usize,
    pub policy_hidden: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings {
            d_clip: 24,
            d_agg: 32,
            d: 16,
            heads: 4,
            n_2d: 8,
            n_3d: 12,
            policy_hidden: 32,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    /// Master seed; scene sets, initializations, and rollout draws all
    /// derive from it.
    pub seed: u64,
    pub variant: String,
    pub out_dir: PathBuf,
    /// Fixed-value override for the injection strength (sweep mode).
    pub eta: Option<f64>,
    /// Fixed-value override for the fusion gate (sweep mode).
    pub alpha: Option<f64>,
    pub fusion: G2raConfig,
    pub world: WorldConfig,
    pub encoders: EncoderConfig,
    pub policy: PolicyConfig,
    pub episode: EpisodeConfig,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub sweep: SweepSettings,
    pub ablate: AblateSettings,
    pub gradcheck: GradcheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 7,
            variant: "full".into(),
            out_dir: PathBuf::from("runs/default"),
            eta: None,
            alpha: None,
            fusion: G2raConfig::default(),
            world: WorldConfig::default(),
            encoders: EncoderConfig::default(),
            policy: PolicyConfig::default(),
            episode: EpisodeConfig::default(),
            train: TrainSettings::default(),
            eval: EvalSettings::default(),
            sweep: SweepSettings::default(),
            ablate: AblateSettings::default(),
            gradcheck: GradcheckSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: cfg.version.to_string(),
                expected: CONFIG_VERSION.to_string(),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn variant(&self) -> Result<Variant> {
        self.variant.parse()
    }

    /// Cross-field consistency: the encoder, fusion, policy, and episode
    /// settings describe one pipeline and must agree on shared dims.
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        if self.variant != "oracle" {
            self.variant()?;
        }
        let c = |cond: bool, msg: &str| {
            if cond {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        c(
            self.encoders.d_clip == self.fusion.d_clip,
            "encoders.d_clip must equal fusion.d_clip",
        )?;
        c(
            self.encoders.d_agg == self.fusion.d_agg,
            "encoders.d_agg must equal fusion.d_agg",
        )?;
        c(
            self.policy.fusion_d == self.fusion.d,
            "policy.fusion_d must equal fusion.d",
        )?;
        c(
            (self.policy.max_step - self.world.max_step).abs() < 1e-12
                && (self.episode.max_step_len - self.world.max_step).abs() < 1e-12,
            "policy.max_step, episode.max_step_len, and world.max_step must agree",
        )?;
        c(
            self.encoders.categories == self.world.categories,
            "encoders.categories must equal world.categories",
        )?;
        c(
            self.encoders.goal_tokens <= self.encoders.n_3d_tokens,
            "encoders.goal_tokens must not exceed n_3d_tokens",
        )?;
        if let Some(a) = self.alpha {
            c(
                a > 0.0 && a < 1.0,
                "alpha override must lie in the open interval (0,1)",
            )?;
        }
        c(self.episode.max_steps >= 1, "episode.max_steps must be >= 1")?;
        Ok(())
    }
}
