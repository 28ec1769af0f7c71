//! One configuration document for the whole pipeline. Every field has a
//! default, partial files merge against those defaults, and the
//! effective config is echoed into every artifact a run produces.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::FixedCamera;
use crate::datagen::AugConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Held-out PA-MPJPE cadence, in steps.
    pub eval_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            w1: 100.0,
            w2: 100.0,
            w3: 50.0,
            w4: 50.0,
            lr: 1e-3,
            epochs: 10,
            batch: 256,
            eval_every: 50,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3), ("w4", self.w4)] {
            if !(w >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} = {w}")));
            }
        }
        if self.batch < 2 {
            return Err(Error::InvalidParameter(format!("pretrain batch {}", self.batch)));
        }
        if !(self.lr >= 0.0) || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::InvalidParameter("pretrain schedule".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub w5: f64,
    pub w6: f64,
    pub w7: f64,
    /// Gradient-penalty weight γ.
    pub gamma: f64,
    pub k_critic: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Per domain; the critic sees twice this many rows.
    pub batch: usize,
    pub select_every: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            w5: 10.0,
            w6: 0.1,
            w7: 20.0,
            gamma: 10.0,
            k_critic: 3,
            lr: 1e-4,
            epochs: 5,
            batch: 256,
            select_every: 500,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w5", self.w5),
            ("w6", self.w6),
            ("w7", self.w7),
            ("gamma", self.gamma),
        ] {
            if !(w >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} = {w}")));
            }
        }
        if self.k_critic == 0 {
            return Err(Error::InvalidParameter("k_critic = 0".into()));
        }
        if self.batch < 2 {
            return Err(Error::InvalidParameter(format!("adapt batch {}", self.batch)));
        }
        if !(self.lr >= 0.0) || self.epochs == 0 || self.select_every == 0 {
            return Err(Error::InvalidParameter("adapt schedule".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub conf_threshold: f64,
    pub min_visible: usize,
    /// Keep per-frame arrays in the report.
    pub per_frame: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { conf_threshold: 0.05, min_visible: 6, per_frame: false }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::InvalidProbability(self.conf_threshold));
        }
        Ok(())
    }
}

/// Data files a command may resolve through the config instead of a
/// dedicated flag; adaptation reads the source pipeline from here.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub model: Option<PathBuf>,
    pub mocap: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Feature width d of all three networks.
    pub hidden_dim: usize,
    /// Worker threads; 0 defers to K2M_THREADS or single-threaded.
    pub threads: usize,
    pub camera: FixedCamera,
    pub aug: AugConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            hidden_dim: 1024,
            threads: 0,
            camera: FixedCamera::default(),
            aug: AugConfig::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a JSON config, filling absent fields from defaults. Unknown
    /// keys are rejected so typos fail loudly.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidParameter(format!("config: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::InvalidParameter("hidden_dim = 0".into()));
        }
        self.camera.validate()?;
        self.aug.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        self.eval.validate()
    }

    /// The default-merged document embedded in artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_schedule() {
        let cfg = RunConfig::default();
        assert_eq!(
            (cfg.pretrain.w1, cfg.pretrain.w2, cfg.pretrain.w3, cfg.pretrain.w4),
            (100.0, 100.0, 50.0, 50.0)
        );
        assert_eq!(cfg.pretrain.lr, 1e-3);
        assert_eq!((cfg.pretrain.epochs, cfg.pretrain.batch), (10, 256));
        assert_eq!((cfg.adapt.w5, cfg.adapt.w6, cfg.adapt.w7), (10.0, 0.1, 20.0));
        assert_eq!((cfg.adapt.gamma, cfg.adapt.k_critic), (10.0, 3));
        assert_eq!((cfg.adapt.lr, cfg.adapt.epochs), (1e-4, 5));
        assert_eq!((cfg.adapt.batch, cfg.adapt.select_every), (256, 500));
        assert_eq!(cfg.hidden_dim, 1024);
        assert_eq!(cfg.aug.jitter_sigma, 1.0);
        assert_eq!(cfg.aug.occlude_p, 0.2);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn partial_json_merges_against_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 9, "adapt": {"lr": 5e-5}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.adapt.lr, 5e-5);
        assert_eq!(cfg.adapt.w5, 10.0);
        assert_eq!(cfg.pretrain.batch, 256);

        // The echo materializes every field.
        let echo = cfg.echo();
        assert_eq!(echo["pretrain"]["w1"], 100.0);
        assert_eq!(echo["camera"]["f"], 1000.0);

        // Echo → parse → echo is a fixed point.
        let reparsed = RunConfig::from_json(&cfg.to_pretty_json()).unwrap();
        assert_eq!(reparsed.echo(), echo);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(matches!(
            RunConfig::from_json(r#"{"pertrain": {}}"#),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"pretrain": {"batch": 1}}"#),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"adapt": {"k_critic": 0}}"#),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"aug": {"occlude_p": 1.5}}"#),
            Err(Error::InvalidProbability(_))
        ));
        assert!(matches!(
            RunConfig::load(Path::new("/nonexistent/cfg.json")),
            Err(Error::MissingFile(_))
        ));
    }
}
