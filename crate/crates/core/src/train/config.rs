//! Training configuration, read from / written to TOML. Every field has a
//! default, so a config file only needs the values it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::densify::DensifyConfig;
use super::loss::LossWeights;
use crate::appearance::AppearanceConfig;
use crate::error::{Error, Result};

/// Per-group Adam learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Center rate at iteration 0, multiplied by the scene extent.
    pub center_init: f64,
    /// Center rate at the last iteration (log-linear decay), times extent.
    pub center_final: f64,
    /// SH DC rate; higher-order SH bands use `sh / sh_rest_divisor`.
    pub sh: f64,
    pub sh_rest_divisor: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    /// Appearance network weights and embeddings.
    pub appearance: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            center_init: 1.6e-4,
            center_final: 1.6e-6,
            sh: 2.5e-3,
            sh_rest_divisor: 20.0,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
            appearance: 1e-3,
        }
    }
}

impl LearningRates {
    /// Center learning rate at `iteration` of a run of `total` iterations.
    pub fn center_at(&self, iteration: usize, total: usize, extent: f64) -> f64 {
        let t = if total <= 1 {
            0.0
        } else {
            (iteration as f64 / (total - 1) as f64).clamp(0.0, 1.0)
        };
        extent * (self.center_init.ln() * (1.0 - t) + self.center_final.ln() * t).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// SH degree of the trained field (0–3).
    pub sh_degree: usize,
    /// One more SH band becomes trainable every this many iterations
    /// (0 = all bands from the start).
    pub sh_increase_interval: usize,
    pub background: [f64; 3],
    /// Train the appearance model alongside the field.
    pub use_appearance: bool,
    pub learning_rates: LearningRates,
    pub densify: DensifyConfig,
    pub loss: LossWeights,
    pub appearance: AppearanceConfig,
}

/// Full-scale defaults (60k iterations, densification 500–15000, λ1 = 100,
/// SH degree 2).
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 60000,
            sh_degree: 2,
            sh_increase_interval: 1000,
            background: [0.0; 3],
            use_appearance: true,
            learning_rates: LearningRates::default(),
            densify: DensifyConfig::default(),
            loss: LossWeights::default(),
            appearance: AppearanceConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset for small scenes (tens of splats, 64×64 views):
    /// 2000 iterations with densification stopping halfway (1000), and
    /// λ1 = 1 because the depth distortion is measured in world units — at
    /// λ1 = 100 it dominates small scenes (see the ledger for the sweep).
    pub fn desk() -> Self {
        let mut c = Self {
            iterations: 2000,
            ..Self::default()
        };
        c.densify.stop = 1000;
        c.loss.lambda1 = 1.0;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.sh_degree > 3 {
            return bad(format!("sh_degree must be ≤ 3, got {}", self.sh_degree));
        }
        let d = &self.densify;
        if d.interval == 0 {
            return bad("densify.interval must be ≥ 1".into());
        }
        if d.stop < d.start {
            return bad(format!("densify.stop ({}) < densify.start ({})", d.stop, d.start));
        }
        if !(d.grad_threshold.is_finite() && d.grad_threshold >= 0.0) {
            return bad("densify.grad_threshold must be finite and ≥ 0".into());
        }
        if !(d.split_scale_divisor > 1.0) {
            return bad("densify.split_scale_divisor must be > 1".into());
        }
        if !(d.opacity_reset_value > 0.0 && d.opacity_reset_value < 1.0) {
            return bad("densify.opacity_reset_value must lie in (0, 1)".into());
        }
        let lr = &self.learning_rates;
        for (name, v) in [
            ("center_init", lr.center_init),
            ("center_final", lr.center_final),
            ("sh", lr.sh),
            ("sh_rest_divisor", lr.sh_rest_divisor),
            ("opacity", lr.opacity),
            ("scale", lr.scale),
            ("rotation", lr.rotation),
            ("appearance", lr.appearance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("learning_rates.{name} must be finite and > 0, got {v}"));
            }
        }
        if self.background.iter().any(|v| !v.is_finite()) {
            return bad("background must be finite".into());
        }
        self.loss.validate()?;
        if self.use_appearance {
            self.appearance.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text` as overrides on top of `base`: tables are merged
    /// key by key, so a file holding only `[loss] lambda1 = 5.0` changes
    /// that one value of `base`.
    pub fn from_toml_over(base: &Self, text: &str) -> Result<Self> {
        let fmt = |e: &dyn std::fmt::Display| Error::Format(format!("train config: {e}"));
        let overrides: toml::Table = toml::from_str(text).map_err(|e| fmt(&e))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| fmt(&e))?;
        merge_tables(&mut merged, overrides);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e| fmt(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`TrainConfig::from_toml_over`] reading a file.
    pub fn load_over(base: &Self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_over(base, &text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn merge_tables(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        for c in [TrainConfig::default(), TrainConfig::desk()] {
            c.validate().unwrap();
            assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
        assert_eq!(TrainConfig::default().iterations, 60000);
        assert_eq!(TrainConfig::desk().iterations, 2000);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = TrainConfig::from_toml("iterations = 10\n[loss]\nlambda1 = 0.0\n").unwrap();
        assert_eq!(c.iterations, 10);
        assert_eq!(c.loss.lambda1, 0.0);
        assert_eq!(c.loss.lambda2, 0.05);
        assert_eq!(c.densify.stop, 15000);
    }

    #[test]
    fn overrides_merge_onto_a_base() {
        let c = TrainConfig::from_toml_over(&TrainConfig::desk(), "[loss]\nlambda2 = 0.5\n").unwrap();
        assert_eq!(c.loss.lambda2, 0.5);
        assert_eq!(c.loss.lambda1, 1.0);
        assert_eq!(c.densify.stop, 1000);
        assert_eq!(c.iterations, 2000);
        assert!(TrainConfig::from_toml_over(&TrainConfig::desk(), "[loss]\nlambda9 = 1.0\n").is_err());
        assert!(TrainConfig::from_toml_over(&TrainConfig::desk(), "[densify]\nstart = 2000\n").is_err());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml("[densify]\nstart = 10\nstop = 5\n").is_err());
        assert!(TrainConfig::from_toml("[loss]\nlambda2 = -1.0\n").is_err());
        assert!(TrainConfig::from_toml("iterationz = 3\n").is_err());
    }

    #[test]
    fn center_rate_decays_log_linearly() {
        let lr = LearningRates::default();
        assert!((lr.center_at(0, 101, 2.0) - 3.2e-4).abs() < 1e-15);
        assert!((lr.center_at(100, 101, 2.0) - 3.2e-6).abs() < 1e-15);
        assert!((lr.center_at(50, 101, 1.0) - 1.6e-5).abs() < 1e-15);
    }
}
