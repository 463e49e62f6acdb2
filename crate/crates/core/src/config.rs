//! JSON run configuration with a strict schema.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hmm::ball::BallSettings;
use crate::hmm::vbem::VbemPriors;
use crate::inference::ResampleScheme;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vbem: VbemConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_sequences: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub speed: f64,
    pub noise_sd: f64,
    pub persistence: f64,
    pub box_size: f64,
    pub n_headings: usize,
    pub heading_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    #[serde(rename = "S")]
    pub states: usize,
    pub obs_sd: f64,
    pub priors: VbemPriors,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(rename = "K")]
    pub particles: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub tau: f64,
    pub resample_scheme: SchemeName,
    pub moves_per_step: usize,
    /// Stages between move sweeps; 0 moves at the last stage only.
    pub move_stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Multinomial,
    Systematic,
}

impl From<SchemeName> for ResampleScheme {
    fn from(s: SchemeName) -> Self {
        match s {
            SchemeName::Multinomial => ResampleScheme::Multinomial,
            SchemeName::Systematic => ResampleScheme::Systematic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VbemConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            vbem: VbemConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        let b = BallSettings::default();
        DataConfig {
            n_sequences: 30,
            steps: 200,
            speed: b.speed,
            noise_sd: b.noise_sd,
            persistence: b.persistence,
            box_size: b.box_size,
            n_headings: b.n_headings,
            heading_offset: b.heading_offset,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            states: 4,
            obs_sd: 0.01,
            priors: VbemPriors::default(),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            particles: 128,
            epochs: 30,
            batch: 5,
            lr: 0.05,
            tau: 0.5,
            resample_scheme: SchemeName::Multinomial,
            moves_per_step: 1,
            move_stride: 0,
        }
    }
}

impl Default for VbemConfig {
    fn default() -> Self {
        VbemConfig {
            max_iters: 500,
            tol: 1e-6,
            restarts: 4,
        }
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            directory: "out".into(),
        }
    }
}

/// Failure to load a configuration, with the JSON path of the offending key.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config error at {path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        path: path.into(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, ConfigError> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| invalid("$", e.to_string()))?;
        let cfg: RunConfig = serde_json::from_value(raw.clone())
            .map_err(|e| invalid(&locate(&raw, &e.to_string()), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(canon.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        let counts = [
            ("$.data.n_sequences", d.n_sequences),
            ("$.data.n_headings", d.n_headings),
            ("$.model.S", self.model.states),
            ("$.train.K", self.train.particles),
            ("$.train.epochs", self.train.epochs),
            ("$.train.batch", self.train.batch),
            ("$.vbem.max_iters", self.vbem.max_iters),
            ("$.vbem.restarts", self.vbem.restarts),
        ];
        for (path, v) in counts {
            if v < 1 {
                return Err(invalid(path, "must be >= 1"));
            }
        }
        let positive = [
            ("$.data.box_size", d.box_size),
            ("$.model.obs_sd", self.model.obs_sd),
            ("$.model.priors.dirichlet_alpha", self.model.priors.dirichlet_alpha),
            ("$.model.priors.mean_prior_precision", self.model.priors.mean_prior_precision),
            ("$.train.lr", self.train.lr),
            ("$.vbem.tol", self.vbem.tol),
        ];
        for (path, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(path, "must be a finite number > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.train.tau) {
            return Err(invalid("$.train.tau", "must lie in [0, 1]"));
        }
        if !self.model.priors.mean_prior_mean.is_finite() || !d.heading_offset.is_finite() {
            return Err(invalid("$", "non-finite number"));
        }
        self.ball()
            .validate()
            .map_err(|e| invalid("$.data", e.to_string()))?;
        if self.output.directory.is_empty() {
            return Err(invalid("$.output.directory", "must not be empty"));
        }
        Ok(())
    }

    pub fn ball(&self) -> BallSettings {
        BallSettings {
            speed: self.data.speed,
            noise_sd: self.data.noise_sd,
            persistence: self.data.persistence,
            box_size: self.data.box_size,
            n_headings: self.data.n_headings,
            heading_offset: self.data.heading_offset,
        }
    }
}

impl From<Error> for ConfigError {
    fn from(e: Error) -> Self {
        invalid("$", e.to_string())
    }
}

/// Best-effort JSON path for a serde error: finds the section containing an
/// unknown or mistyped field named in the message.
fn locate(raw: &serde_json::Value, message: &str) -> String {
    let field = message
        .split('`')
        .nth(1)
        .map(str::to_string);
    let Some(field) = field else {
        return "$".into();
    };
    fn search(v: &serde_json::Value, field: &str, path: String) -> Option<String> {
        let obj = v.as_object()?;
        if obj.contains_key(field) {
            return Some(format!("{path}.{field}"));
        }
        obj.iter()
            .find_map(|(k, child)| search(child, field, format!("{path}.{k}")))
    }
    search(raw, &field, "$".into()).unwrap_or_else(|| "$".into())
}
