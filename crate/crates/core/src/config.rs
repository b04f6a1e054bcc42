//! TOML run configuration. Every section is optional and falls back to the
//! defaults of the corresponding component.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::{LawConfig, ParamBox};
use crate::dynamics::{FrictionParams, PlantParams};
use crate::error::Result;
use crate::experiment::{SigmaScanConfig, SweepSpec};
use crate::incrt::{Phase1Config, Phase1Protocol};
use crate::markov_gap::MarkovGapConfig;
use crate::shield::DEFAULT_ALPHA;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShieldConfig {
    pub alpha: f64,
    pub bounds: ParamBox,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            bounds: ParamBox::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub plant: PlantParams,
    pub friction: FrictionParams,
    pub law: LawConfig,
    pub shield: ShieldConfig,
    pub sweep: SweepSpec,
    pub sigma: SigmaScanConfig,
    pub phase1: Phase1Config,
    pub phase1_protocol: Phase1Protocol,
    pub markov_gap: MarkovGapConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 42,
            plant: PlantParams::default(),
            friction: FrictionParams::default(),
            law: LawConfig::default(),
            shield: ShieldConfig::default(),
            sweep: SweepSpec::default(),
            sigma: SigmaScanConfig::default(),
            phase1: Phase1Config::default(),
            phase1_protocol: Phase1Protocol::default(),
            markov_gap: MarkovGapConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.friction.validate()?;
        self.shield.bounds.validate()?;
        self.sweep.validate()?;
        self.phase1.validate()?;
        self.markov_gap.cost.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn partial_sections_override() {
        let c = Config::from_toml(
            "seed = 7\n[friction]\ntau_z = 2.0\n[sweep]\nrollouts_per_payload = 4\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.friction.tau_z, 2.0);
        assert_eq!(c.friction.coulomb, FrictionParams::default().coulomb);
        assert_eq!(c.sweep.rollouts_per_payload, 4);
    }

    #[test]
    fn rejects_unknown_sections_and_bad_values() {
        assert!(Config::from_toml("[plantt]\nm1 = 1.0\n").is_err());
        assert!(Config::from_toml("[phase1]\ngamma_prune = 0.5\n").is_err());
    }
}
