//! Run configuration: one JSON document with a section per stage, plus
//! dotted-key overrides (`train.lr0=1e-3`) applied on top.
//!
//! `model.denoiser.timesteps` always follows `model.schedule.timesteps`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::pipeline::InferenceConfig;
use crate::scenegen::DatasetConfig;
use crate::schedule::ScheduleConfig;
use crate::templates::Templates;
use crate::trainer::{ModelConfig, TrainConfig};

/// How many ambiguity pairs and plain scenes are held out for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoldoutConfig {
    pub pairs: usize,
    pub scenes: usize,
}

impl Default for HoldoutConfig {
    fn default() -> Self {
        Self {
            pairs: 200,
            scenes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeConfig {
    /// Iterations between curve points; the last iteration is always a point.
    pub eval_interval: usize,
    /// DDIM steps used for curve points.
    pub steps: usize,
    /// Train with every caption blanked and evaluate with blank captions.
    pub blank: bool,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        Self {
            eval_interval: 250,
            steps: 10,
            blank: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed of `gen`.
    pub seed: u64,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub holdout: HoldoutConfig,
    pub converge: ConvergeConfig,
}

impl Default for Config {
    fn default() -> Self {
        let schedule = ScheduleConfig::default();
        Self {
            seed: 0,
            data: DatasetConfig::default(),
            model: ModelConfig {
                denoiser: DenoiserConfig {
                    timesteps: schedule.timesteps,
                    ..DenoiserConfig::default()
                },
                schedule,
            },
            train: TrainConfig::default(),
            infer: InferenceConfig::default(),
            holdout: HoldoutConfig::default(),
            converge: ConvergeConfig::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Config::default().model
    }
}

impl Config {
    /// The desk-scale disambiguation setup: a ~1e5-parameter network trained
    /// from scratch for 3000 iterations on 2000 pairs + 2000 scenes.
    pub fn experiment() -> Self {
        let base = Self::default();
        Self {
            model: ModelConfig {
                denoiser: DenoiserConfig {
                    base_width: 8,
                    level_widths: vec![8, 16, 32],
                    time_hidden: 64,
                    token_dim: 32,
                    ..base.model.denoiser.clone()
                },
                ..base.model.clone()
            },
            train: TrainConfig {
                lr0: 1e-3,
                flip_prob: 0.0,
                checkpoint_interval: 1000,
                ..TrainConfig::default()
            },
            ..base
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Applies `(dotted key, value)` overrides. A value is read as JSON when
    /// it parses as JSON and as a plain string otherwise.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for (key, raw) in overrides {
            let slot = lookup(&mut doc, key)?;
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    fn resolved(mut self) -> Result<Self> {
        self.model.denoiser.timesteps = self.model.schedule.timesteps;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.model.denoiser.validate()?;
        self.model.schedule.build()?;
        self.train.validate()?;
        self.infer.validate(&Templates::shipped())?;
        if self.converge.steps == 0 {
            return Err(Error::Config("converge.steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Every settable dotted key of the default configuration, in document order.
pub fn leaf_keys() -> Vec<String> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(v, &key, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(&serde_json::to_value(Config::default()).expect("config serializes"), "", &mut out);
    out
}

fn lookup<'a>(doc: &'a mut Value, key: &str) -> Result<&'a mut Value> {
    let mut cur = doc;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(m) => m
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        };
    }
    if cur.is_object() {
        return Err(Error::Config(format!("{key:?} is a section, not a value")));
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_set_typed_values() {
        let c = Config::default()
            .with_overrides([
                ("train.lr0", "0.001"),
                ("model.denoiser.level_widths", "[8,16]"),
                ("infer.caption_mode", "blank"),
                ("infer.caption", "the left cube"),
                ("model.schedule.timesteps", "50"),
            ])
            .unwrap();
        assert_eq!(c.train.lr0, 1e-3);
        assert_eq!(c.model.denoiser.level_widths, vec![8, 16]);
        assert_eq!(c.infer.caption.as_deref(), Some("the left cube"));
        assert_eq!(c.model.denoiser.timesteps, 50);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let d = Config::default();
        for (k, v) in [
            ("train.lr", "1"),
            ("train", "1"),
            ("train.lr0.x", "1"),
            ("train.iterations", "many"),
            ("train.flip_prob", "2"),
            ("model.denoiser.groups", "3"),
        ] {
            let e = d.with_overrides([(k, v)]).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{k}={v}: {e}");
        }
        assert!(matches!(Config::from_json("{\"trian\": {}}"), Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip_and_keys() {
        let c = Config::experiment();
        assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(Config::from_json("{}").unwrap(), Config::default());
        let keys = leaf_keys();
        for k in ["seed", "train.lr0", "model.schedule.beta_end", "data.scene.width", "infer.caption"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
    }

    #[test]
    fn shipped_experiment_file_matches_preset() {
        let text = include_str!("../configs/experiment.json");
        assert_eq!(Config::from_json(text).unwrap(), Config::experiment());
    }

    #[test]
    fn experiment_model_has_about_1e5_parameters() {
        let layout = crate::denoiser::parameter_layout(&Config::experiment().model.denoiser);
        let n: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert!((80_000..=130_000).contains(&n), "{n}");
    }
}
