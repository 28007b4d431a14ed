//! Run configuration: one TOML file holding every tunable of a run.

use std::path::Path;

use facerel_core::bridge::BridgeConfig;
use facerel_core::network::Profile;
use facerel_core::relation::{RelationConfig, RelationSwitches};
use facerel_core::train::Hyper;
use serde::{Deserialize, Serialize};

use crate::error::{RunError, RunResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Double,
    Single,
}

/// SGD settings of one stage; the seed comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageHyper {
    pub lr: f64,
    pub lr_decay_at: f64,
    pub lr_decay: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub trunk_lr_scale: f64,
    pub head_lr_scale: f64,
}

impl StageHyper {
    fn from_hyper(h: Hyper) -> Self {
        Self {
            lr: h.lr,
            lr_decay_at: h.lr_decay_at,
            lr_decay: h.lr_decay,
            lambda: h.lambda,
            batch_size: h.batch_size,
            epochs: h.epochs,
            trunk_lr_scale: h.trunk_lr_scale,
            head_lr_scale: h.head_lr_scale,
        }
    }

    pub fn to_hyper(&self, seed: u64) -> Hyper {
        Hyper {
            lr: self.lr,
            lr_decay_at: self.lr_decay_at,
            lr_decay: self.lr_decay,
            lambda: self.lambda,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            trunk_lr_scale: self.trunk_lr_scale,
            head_lr_scale: self.head_lr_scale,
        }
    }
}

impl Default for StageHyper {
    fn default() -> Self {
        Self::from_hyper(Hyper::default())
    }
}

/// Ablation switches of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Switches {
    /// Feed the bridging descriptor to the network (pre-training and relation).
    pub bridge: bool,
    /// Feed the spatial cues to the relation heads.
    pub spatial: bool,
    /// Initialize the relation trunk from the attribute checkpoint.
    pub pretrained: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self {
            bridge: true,
            spatial: true,
            pretrained: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub precision: Precision,
    /// Network profile: `desk` or `desk-small`.
    pub profile: String,
    pub threshold: f64,
    pub smoothing_window: usize,
    /// Inverse-frequency resampling of relation training pairs.
    pub rebalance: bool,
    /// Seeds per cell of the ablation table.
    pub ablation_seeds: usize,
    pub switches: Switches,
    pub bridge: BridgeConfig,
    pub pretrain: StageHyper,
    pub relation: StageHyper,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 1,
            precision: Precision::Double,
            profile: "desk-small".into(),
            threshold: 0.5,
            smoothing_window: 5,
            rebalance: false,
            ablation_seeds: 3,
            switches: Switches::default(),
            bridge: BridgeConfig::default(),
            pretrain: StageHyper::from_hyper(Hyper::pretrain_defaults()),
            relation: StageHyper::from_hyper(Hyper::relation_defaults()),
        }
    }
}

impl RunConfig {
    /// Parses a config file; every key it omits keeps its default, including
    /// keys of partially given tables.
    pub fn parse(text: &str) -> RunResult<Self> {
        let err = |e: &dyn std::fmt::Display| RunError::validation(format!("config: {e}"));
        let given: toml::Table = toml::from_str(text).map_err(|e| err(&e))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).map_err(|e| err(&e))?;
        merge(&mut merged, given);
        let cfg: RunConfig = merged.try_into().map_err(|e| err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> RunResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            RunError::Validation(m) => RunError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn validate(&self) -> RunResult<()> {
        let bad = |field: &str, msg: String| Err(RunError::validation(format!("config field `{field}`: {msg}")));
        if self.version != CONFIG_VERSION {
            return bad("version", format!("{} unsupported (expected {CONFIG_VERSION})", self.version));
        }
        if self.precision != Precision::Double {
            return bad("precision", "only \"double\" is implemented".into());
        }
        if let Err(e) = Profile::by_name(&self.profile, 0) {
            return bad("profile", e.to_string());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold", format!("{} is outside [0, 1]", self.threshold));
        }
        if self.smoothing_window == 0 || self.smoothing_window.is_multiple_of(2) {
            return bad("smoothing_window", format!("{} must be odd and >= 1", self.smoothing_window));
        }
        if self.ablation_seeds == 0 {
            return bad("ablation_seeds", "must be at least 1".into());
        }
        let b = &self.bridge;
        if b.top == 0 || b.upper == 0 || b.lower == 0 || b.max_iter == 0 {
            return bad("bridge", "top, upper, lower and max_iter must be at least 1".into());
        }
        for (name, h) in [("pretrain", &self.pretrain), ("relation", &self.relation)] {
            if let Err(e) = h.to_hyper(self.seed).validate() {
                return bad(name, e.to_string());
            }
        }
        Ok(())
    }

    pub fn bridge_dim(&self) -> usize {
        self.bridge.descriptor_len()
    }

    pub fn network_profile(&self) -> RunResult<Profile> {
        Ok(Profile::by_name(&self.profile, self.bridge_dim())?)
    }

    pub fn relation_config(&self) -> RunResult<RelationConfig> {
        let p = self.network_profile()?;
        Ok(RelationConfig {
            network: p.network,
            projection_dim: p.projection_dim,
            switches: RelationSwitches {
                bridge: self.switches.bridge,
                spatial: self.switches.spatial,
            },
        })
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
