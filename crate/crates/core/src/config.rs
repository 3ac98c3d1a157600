//! TOML run configuration: `[plant]`, `[controller]` and `[run]` sections.
//!
//! ```toml
//! [plant]
//! noise_std = 0.01
//! seed = 7
//!
//! [controller]
//! rho = 30
//! ell = 40
//! q = 1.0
//! r = [0.1, 0.1, 0.1, 0.1]
//! reference = { kind = "zero_yaw" }
//!
//! [run]
//! seed = 11
//! control = true
//! scenario = { kind = "sinusoid", duration = 300.0 }
//! ```
//!
//! Missing plant and controller keys take their defaults; unknown keys are
//! rejected. `run.seed` drives the start-up excitation and `plant.seed` the
//! measurement noise, so neither is ever drawn from entropy.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::ControllerConfig;
use crate::error::{Result, RspcError};
use crate::plant::{PlantConfig, ProfileKind, ScenarioProfile};

fn yes() -> bool {
    true
}

fn default_settle() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    #[serde(default = "yes")]
    pub control: bool,
    pub scenario: ScenarioProfile,
    /// Unrecorded seconds between the end of the controller warm-up and `t = 0`.
    #[serde(default = "default_settle")]
    pub settle: f64,
    /// Output directory; the CLI flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    pub run: RunSection,
}

/// Command-line replacements applied on top of a loaded file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    /// Scenario kind name; replaces the profile with that kind's defaults.
    pub scenario: Option<String>,
    pub control: Option<bool>,
    /// Sets both the noise and the excitation seed.
    pub seed: Option<u64>,
    pub duration: Option<f64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(scenario: ScenarioProfile, control: bool, seed: u64) -> Self {
        Self {
            plant: PlantConfig { seed, ..PlantConfig::default() },
            controller: ControllerConfig::default(),
            run: RunSection { seed, control, scenario, settle: default_settle(), out: None },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| RspcError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            RspcError::ConfigParse(inner) => RspcError::Config(format!("{}: {inner}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.controller.validate()?;
        if !(self.run.settle >= 0.0 && self.run.settle.is_finite()) {
            return Err(RspcError::Config(format!("settle must be finite and >= 0, got {}", self.run.settle)));
        }
        self.run.scenario.validate()
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self> {
        if let Some(name) = &o.scenario {
            self.run.scenario.kind = ProfileKind::default_for(name)?;
        }
        if let Some(c) = o.control {
            self.run.control = c;
        }
        if let Some(s) = o.seed {
            self.run.seed = s;
            self.plant.seed = s;
        }
        if let Some(d) = o.duration {
            self.run.scenario.duration = d;
        }
        if let Some(out) = &o.out {
            self.run.out = Some(out.clone());
        }
        self.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::Weight;

    const SAMPLE: &str = r#"
[plant]
noise_std = 0.02

[controller]
ell = 20
r = [0.1, 0.2, 0.1, 0.2]

[run]
seed = 3
scenario = { kind = "steps", duration = 120.0 }
"#;

    #[test]
    fn parse_fills_defaults() {
        let cfg = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(cfg.plant.noise_std, 0.02);
        assert_eq!(cfg.plant.seed, PlantConfig::default().seed);
        assert_eq!(cfg.controller.ell, 20);
        assert_eq!(cfg.controller.rho, ControllerConfig::default().rho);
        assert_eq!(cfg.controller.r, Weight::Diagonal(vec![0.1, 0.2, 0.1, 0.2]));
        assert!(cfg.run.control);
        assert_eq!(cfg.run.scenario.kind.name(), "steps");
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::parse(SAMPLE).unwrap();
        let again = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_unknown_and_missing_seed() {
        assert!(RunConfig::parse(&SAMPLE.replace("ell = 20", "horizon = 20")).is_err());
        assert!(RunConfig::parse(&SAMPLE.replace("seed = 3", "")).is_err());
        assert!(RunConfig::parse(&SAMPLE.replace("120.0", "0.0")).is_err());
        assert!(RunConfig::parse(&SAMPLE.replace("duration = 120.0", "duration = 120.0, amplitude = 2.0")).is_err());
    }

    #[test]
    fn overrides_replace_fields() {
        let o = Overrides {
            scenario: Some("sinusoid".into()),
            control: Some(false),
            seed: Some(99),
            duration: Some(50.0),
            out: Some("x".into()),
        };
        let cfg = RunConfig::parse(SAMPLE).unwrap().apply(&o).unwrap();
        assert_eq!(cfg.run.scenario.kind.name(), "sinusoid");
        assert_eq!(cfg.run.scenario.duration, 50.0);
        assert!(!cfg.run.control);
        assert_eq!((cfg.run.seed, cfg.plant.seed), (99, 99));
        assert!(RunConfig::parse(SAMPLE).unwrap().apply(&Overrides { scenario: Some("ramp".into()), ..Default::default() }).is_err());
    }
}
