//! Scenario description, read from JSON. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{ControlSign, GainBounds};
use crate::error::{Error, Result};
use crate::net::Dims;
use crate::offline::{DatasetConfig, TrainConfig};
use crate::online::TriggerConfig;
use crate::plant::{DisturbanceSpec, PlantParams, ReferenceSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    #[serde(rename = "T")]
    pub t_div: f64,
    #[serde(rename = "K")]
    pub gain: f64,
    pub input_delay: usize,
}

impl Default for PlantConfig {
    fn default() -> Self {
        let p = PlantParams::default();
        PlantConfig {
            t_div: p.t_div,
            gain: p.gain,
            input_delay: p.input_delay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceConfig {
    pub noise_std: f64,
    pub sine_amp: f64,
    pub sine_freq_hz: f64,
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        let d = DisturbanceSpec::default();
        DisturbanceConfig {
            noise_std: d.noise_std,
            sine_amp: d.sine_amp,
            sine_freq_hz: d.sine_freq_hz,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    TgrbfNc,
    NcFixed,
    Pid,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::TgrbfNc, ControllerKind::NcFixed, ControllerKind::Pid];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::TgrbfNc => "tgrbf_nc",
            ControllerKind::NcFixed => "nc_fixed",
            ControllerKind::Pid => "pid",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// How the stability floor on k1 is used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloorMode {
    /// Raise the lower k1 bound to the floor.
    Bound,
    /// Only count violations.
    #[default]
    Diagnostic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NcConfig {
    pub k1: f64,
    pub k2: f64,
    pub alpha: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub bounds: GainBounds,
    pub control_sign: ControlSign,
    /// Integrate the law, `u_k = u_{k-1} + rate·law(e)`; otherwise `u_k = law(e)`.
    pub incremental: bool,
    pub rate: f64,
    pub floor_mode: FloorMode,
}

impl Default for NcConfig {
    fn default() -> Self {
        NcConfig {
            k1: 1.5,
            k2: 0.8,
            alpha: 0.7,
            eta1: 20.0,
            eta2: 4.0,
            bounds: GainBounds::default(),
            control_sign: ControlSign::Positive,
            incremental: true,
            rate: 0.02,
            floor_mode: FloorMode::Diagnostic,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PidTuning {
    /// Relay-feedback ultimate point, then classic Ziegler–Nichols.
    #[default]
    RelayZn,
    Manual,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PidConfig {
    pub tuning: PidTuning,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral_limit: f64,
    pub relay_amplitude: f64,
    pub relay_steps: usize,
}

impl Default for PidConfig {
    fn default() -> Self {
        PidConfig {
            tuning: PidTuning::RelayZn,
            kp: 0.0,
            ki: 30.0,
            kd: 0.0,
            integral_limit: 100.0,
            relay_amplitude: 1.0,
            relay_steps: 2000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub kind: Option<ControllerKind>,
    pub nc: NcConfig,
    pub pid: PidConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentifyConfig {
    pub dims: Dims,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        IdentifyConfig {
            dims: Dims { n_in: 3, m: 6, p: 6 },
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Trained network; when absent the network is identified from `identify`.
    pub checkpoint: Option<PathBuf>,
    pub identify: IdentifyConfig,
    pub trigger: TriggerConfig,
    pub online: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            checkpoint: None,
            identify: IdentifyConfig::default(),
            trigger: TriggerConfig::default(),
            online: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    #[serde(rename = "Ts")]
    pub ts: f64,
    pub plant: PlantConfig,
    pub disturbance: DisturbanceConfig,
    pub reference: ReferenceSpec,
    pub actuator_limit: f64,
    pub controller: ControllerConfig,
    pub network: NetworkConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::step()
    }
}

impl ScenarioConfig {
    /// Default step test: unit step at t = 0, 3 s.
    pub fn step() -> Self {
        ScenarioConfig {
            name: "step".into(),
            seed: 1,
            duration_s: 3.0,
            ts: 1e-3,
            plant: PlantConfig::default(),
            disturbance: DisturbanceConfig::default(),
            reference: ReferenceSpec::step(1.0),
            actuator_limit: 20.0,
            controller: ControllerConfig::default(),
            network: NetworkConfig::default(),
        }
    }

    /// Default sine test: unit amplitude at 0.25 Hz, 10 s.
    pub fn sine() -> Self {
        ScenarioConfig {
            name: "sine".into(),
            duration_s: 10.0,
            reference: ReferenceSpec::sine(1.0, 0.25),
            ..Self::step()
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ScenarioConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn plant_params(&self) -> PlantParams {
        PlantParams {
            t_div: self.plant.t_div,
            gain: self.plant.gain,
            ts: self.ts,
            input_delay: self.plant.input_delay,
        }
    }

    pub fn disturbance_spec(&self) -> DisturbanceSpec {
        DisturbanceSpec {
            noise_std: self.disturbance.noise_std,
            sine_amp: self.disturbance.sine_amp,
            sine_freq_hz: self.disturbance.sine_freq_hz,
            seed: self.seed,
        }
    }

    /// Number of control steps; `duration_s / Ts` must be an integer.
    pub fn steps(&self) -> Result<usize> {
        let n = self.duration_s / self.ts;
        let rounded = n.round();
        if !(n >= 0.0) || (n - rounded).abs() > 1e-6 * rounded.max(1.0) {
            return Err(Error::Config(format!(
                "duration {} s is not a whole number of {} s samples",
                self.duration_s, self.ts
            )));
        }
        Ok(rounded as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant_params().validate()?;
        self.disturbance_spec().validate()?;
        self.reference.validate()?;
        self.steps()?;
        if !(self.actuator_limit > 0.0) {
            return Err(Error::Config(format!(
                "actuator limit must be > 0, got {}",
                self.actuator_limit
            )));
        }
        let nc = &self.controller.nc;
        if !(nc.alpha > 0.0 && nc.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {}", nc.alpha)));
        }
        if !(nc.rate > 0.0) {
            return Err(Error::Config("controller rate must be > 0".into()));
        }
        self.network.trigger.validate()?;
        self.network.identify.dims.validate()?;
        self.network.identify.train.validate()?;
        if let Some(path) = &self.network.checkpoint {
            if !path.exists() {
                return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialisation.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).unwrap_or_default();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        for cfg in [ScenarioConfig::step(), ScenarioConfig::sine()] {
            let text = serde_json::to_string_pretty(&cfg).unwrap();
            let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
            back.validate().unwrap();
        }
        assert_eq!(ScenarioConfig::step().steps().unwrap(), 3000);
        assert_eq!(ScenarioConfig::sine().steps().unwrap(), 10000);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ScenarioConfig>(r#"{"durration_s": 1.0}"#).is_err());
        assert!(serde_json::from_str::<ScenarioConfig>(r#"{"plant": {"T": 3, "L": 1}}"#).is_err());
        let partial: ScenarioConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.duration_s, 3.0);
    }

    #[test]
    fn fractional_step_count_is_invalid() {
        let cfg = ScenarioConfig {
            duration_s: 0.0015,
            ..ScenarioConfig::step()
        };
        assert!(cfg.validate().is_err());
    }
}
