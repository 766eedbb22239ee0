//! Flat JSON configuration file for `zsbc correct`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use zsbc_core::{Architecture, CorrectionConfig, LossWeights, Neighborhood};

/// Every tunable of a correction run as one flat object. Missing keys take
/// their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatConfig {
    pub hc_iterations: usize,
    pub opt_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub downsample_factor: usize,
    pub seed: u64,
    pub channels: usize,
    pub blocks: usize,
    pub w_smo_alpha: f64,
    pub w_smo_bias: f64,
    pub w_spa: f64,
    pub w_exp: f64,
    pub w_fidelity: f64,
    pub exposure_target: f64,
    pub spa_region: usize,
    pub exp_region: usize,
    pub neighborhood: Neighborhood,
}

impl Default for FlatConfig {
    fn default() -> Self {
        CorrectionConfig::default().into()
    }
}

impl From<CorrectionConfig> for FlatConfig {
    fn from(c: CorrectionConfig) -> Self {
        let w = c.weights;
        FlatConfig {
            hc_iterations: c.hc_iterations,
            opt_steps: c.opt_steps,
            learning_rate: c.learning_rate,
            weight_decay: c.weight_decay,
            decoupled_weight_decay: c.decoupled_weight_decay,
            downsample_factor: c.downsample_factor,
            seed: c.seed,
            channels: c.architecture.channels,
            blocks: c.architecture.blocks,
            w_smo_alpha: w.w_smo_alpha,
            w_smo_bias: w.w_smo_bias,
            w_spa: w.w_spa,
            w_exp: w.w_exp,
            w_fidelity: w.w_fidelity,
            exposure_target: w.exposure_target,
            spa_region: w.spa_region,
            exp_region: w.exp_region,
            neighborhood: w.neighborhood,
        }
    }
}

impl From<FlatConfig> for CorrectionConfig {
    fn from(f: FlatConfig) -> Self {
        CorrectionConfig {
            hc_iterations: f.hc_iterations,
            opt_steps: f.opt_steps,
            learning_rate: f.learning_rate,
            weight_decay: f.weight_decay,
            decoupled_weight_decay: f.decoupled_weight_decay,
            downsample_factor: f.downsample_factor,
            seed: f.seed,
            architecture: Architecture {
                channels: f.channels,
                blocks: f.blocks,
            },
            weights: LossWeights {
                w_smo_alpha: f.w_smo_alpha,
                w_smo_bias: f.w_smo_bias,
                w_spa: f.w_spa,
                w_exp: f.w_exp,
                w_fidelity: f.w_fidelity,
                exposure_target: f.exposure_target,
                spa_region: f.spa_region,
                exp_region: f.exp_region,
                neighborhood: f.neighborhood,
            },
        }
    }
}

pub enum LoadError {
    Io(std::io::Error),
    Parse(serde_json::Error),
}

pub fn load(path: &Path) -> Result<FlatConfig, LoadError> {
    let text = std::fs::read_to_string(path).map_err(LoadError::Io)?;
    serde_json::from_str(&text).map_err(LoadError::Parse)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_core_config() {
        let c = CorrectionConfig::default();
        assert_eq!(CorrectionConfig::from(FlatConfig::from(c)), c);
    }

    #[test]
    fn partial_files_keep_defaults() {
        let f: FlatConfig =
            serde_json::from_str(r#"{"opt_steps": 7, "neighborhood": "edge18"}"#).unwrap();
        assert_eq!(f.opt_steps, 7);
        assert_eq!(f.neighborhood, Neighborhood::Edge18);
        assert_eq!(f.learning_rate, 0.005);
        assert!(serde_json::from_str::<FlatConfig>(r#"{"steps": 7}"#).is_err());
    }
}
