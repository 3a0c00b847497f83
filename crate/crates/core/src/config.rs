//! Attack configuration: the free parameters of the search.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// All tunable parameters of the embedding-space search.
///
/// Defaults are engineering choices surfaced here and in the CLI; they are
/// deliberately conservative and meant to be overridden per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Perturbation step size added along the normalized gradient.
    pub alpha: f64,
    /// L2 radius of the perturbation ball (flattened matrix norm).
    pub epsilon: f64,
    /// Weight of the decoding loss inside the composite objective.
    /// Must be negative: the search raises task loss while keeping the
    /// decoder able to reconstruct.
    pub beta: f64,
    /// Similarity threshold a successful adversary must strictly exceed.
    pub use_threshold: f64,
    /// Iteration cap per attack session.
    pub max_iterations: usize,
    /// Victim query budget per attack session.
    pub max_queries: usize,
    /// Replace one random content token with the mask token before searching.
    pub mask_one_token: bool,
    pub random_seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            epsilon: 5.0,
            beta: -1.0,
            use_threshold: 0.7,
            max_iterations: 50,
            max_queries: 30,
            mask_one_token: true,
            random_seed: 0,
        }
    }
}

impl AttackConfig {
    /// Check every field invariant, returning the config unchanged on success.
    pub fn validate(self) -> Result<Self> {
        validate_config(self)
    }

    /// Load and validate a JSON config file. Unknown keys are rejected.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        let cfg: AttackConfig = serde_json::from_str(&text)?;
        cfg.validate()
    }
}

/// Validate all [`AttackConfig`] invariants, naming the violated field.
pub fn validate_config(cfg: AttackConfig) -> Result<AttackConfig> {
    if !(cfg.alpha > 0.0 && cfg.alpha.is_finite()) {
        return Err(Error::InvalidConfig(
            "alpha",
            format!("step size must be positive and finite, got {}", cfg.alpha),
        ));
    }
    if !(cfg.epsilon > 0.0 && cfg.epsilon.is_finite()) {
        return Err(Error::InvalidConfig(
            "epsilon",
            format!("ball radius must be positive and finite, got {}", cfg.epsilon),
        ));
    }
    if !(cfg.beta < 0.0 && cfg.beta.is_finite()) {
        return Err(Error::InvalidConfig(
            "beta",
            format!("decoding-loss weight must be negative, got {}", cfg.beta),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.use_threshold) {
        return Err(Error::InvalidConfig(
            "use_threshold",
            format!("threshold must lie in [0, 1], got {}", cfg.use_threshold),
        ));
    }
    if cfg.max_iterations == 0 {
        return Err(Error::InvalidConfig(
            "max_iterations",
            "iteration cap must be at least 1".into(),
        ));
    }
    if cfg.max_queries == 0 {
        return Err(Error::InvalidConfig(
            "max_queries",
            "query budget must be at least 1".into(),
        ));
    }
    Ok(cfg)
}
