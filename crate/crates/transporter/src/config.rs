//! The run configuration document and dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use transporter_core::manip::ManipConfig;
use transporter_core::model::ModelConfig;
use transporter_core::synth::{ArticulatedScene, DataConfig};
use transporter_core::train::TrainConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipRun {
    /// Built-in scene the episodes run on.
    pub scene: String,
    pub episodes: usize,
    pub seed: u64,
    pub policy: ManipConfig,
}

impl Default for ManipRun {
    fn default() -> Self {
        Self {
            scene: "door".into(),
            episodes: 20,
            seed: 0,
            policy: ManipConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// RR threshold (normalized units).
    pub tau: f64,
    /// Write per-pair keypoint PLY files next to the report.
    pub dump_keypoints: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            dump_keypoints: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub manip: ManipRun,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults, then the optional JSON file, then `key.path=value`
    /// overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let cfg: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?;
                serde_json::to_value(cfg).expect("config serializes")
            }
            None => serde_json::to_value(RunConfig::default()).expect("config serializes"),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |e: transporter_core::Error| Error::Usage(format!("config: {e}"));
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.data.validate().map_err(usage)?;
        self.manip.policy.validate().map_err(usage)?;
        ArticulatedScene::named(&self.manip.scene).map_err(usage)?;
        if !(self.eval.tau > 0.0) {
            return Err(Error::Usage(format!(
                "config: eval.tau must be positive, got {}",
                self.eval.tau
            )));
        }
        Ok(())
    }

    /// The resolved configuration as written into every output.
    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Sets one existing field of a config document. The right-hand side is
/// read as JSON, falling back to a bare string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override `{spec}` is not key=value")))?;
    if path.is_empty() {
        return Err(Error::Usage(format!("override `{spec}` has an empty key")));
    }
    let mut cur = doc;
    for key in path.split('.') {
        cur = cur
            .as_object_mut()
            .and_then(|m| m.get_mut(key))
            .ok_or_else(|| Error::Usage(format!("unknown config key `{path}`")))?;
    }
    *cur = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::resolve(
            None,
            &[
                "train.lr=0.003".into(),
                "manip.policy.gain=2".into(),
                "manip.scene=drawer".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.003);
        assert_eq!(cfg.manip.policy.gain, 2.0);
        assert_eq!(cfg.manip.scene, "drawer");
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        for bad in ["train.lrr=1", "nope=1", "train.lr", "train.lr.x=1"] {
            let e = RunConfig::resolve(None, &[bad.into()]).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{bad}: {e}");
        }
        let e = RunConfig::resolve(None, &["model.grid_res=\"big\"".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn default_round_trips_through_json() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_value(cfg.echo()).unwrap();
        assert_eq!(back, cfg);
    }
}
