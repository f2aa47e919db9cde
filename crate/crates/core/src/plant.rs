//! Discrete-time benchmark plant, disturbances and reference signals.
//!
//! ```text
//! x1(k+1) = x2(k)
//! x2(k+1) = (-2 x2(k) - sin x1(k) + u(k - n_d)) / T + d(k)
//! y(k)    = K x1(k)
//! ```

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the generator behind [`disturbance_at`], recorded in run metadata.
pub const NOISE_ALGORITHM: &str = "chacha8(seed, stream=k) + normal (rand_distr ziggurat)";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantParams {
    /// Dynamics divisor.
    #[serde(rename = "T")]
    pub t_div: f64,
    /// Output gain.
    #[serde(rename = "K")]
    pub gain: f64,
    #[serde(rename = "Ts")]
    pub ts: f64,
    pub input_delay: usize,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            t_div: 3.0,
            gain: 0.5,
            ts: 1e-3,
            input_delay: 1,
        }
    }
}

impl PlantParams {
    /// Parameters of the idealised model used to generate training data.
    pub fn nominal(ts: f64, input_delay: usize) -> Self {
        PlantParams {
            t_div: 2.0,
            gain: 2.0,
            ts,
            input_delay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_div > 0.0) || !self.t_div.is_finite() {
            return Err(Error::InvalidParameter(format!("plant T must be > 0, got {}", self.t_div)));
        }
        if !(self.ts > 0.0) || !self.ts.is_finite() {
            return Err(Error::InvalidParameter(format!("sample time must be > 0, got {}", self.ts)));
        }
        if !self.gain.is_finite() {
            return Err(Error::InvalidParameter("plant K must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantState {
    pub x1: f64,
    pub x2: f64,
    /// Inputs issued but not yet applied, oldest first. Always `input_delay` long.
    pub u_queue: VecDeque<f64>,
    pub k: u64,
}

impl PlantState {
    /// Zero state with an empty (all-zero) input pipeline.
    pub fn new(p: &PlantParams) -> Self {
        PlantState {
            x1: 0.0,
            x2: 0.0,
            u_queue: std::iter::repeat_n(0.0, p.input_delay).collect(),
            k: 0,
        }
    }

    pub fn output(&self, p: &PlantParams) -> f64 {
        p.gain * self.x1
    }
}

/// Advances the plant by one sample; `u` enters the input pipeline and the
/// input issued `input_delay` steps ago drives the dynamics.
pub fn plant_step(state: &PlantState, u: f64, d: f64, p: &PlantParams) -> Result<PlantState> {
    if !u.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite plant input {u}")));
    }
    if !d.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite disturbance {d}")));
    }
    let mut queue = state.u_queue.clone();
    queue.push_back(u);
    let u_eff = queue.pop_front().unwrap_or(u);
    Ok(PlantState {
        x1: state.x2,
        x2: (-2.0 * state.x2 - state.x1.sin() + u_eff) / p.t_div + d,
        u_queue: queue,
        k: state.k + 1,
    })
}

/// Same dynamics with the nominal parameters (T = 2, K = 2); `w` is white
/// measurement-free process noise.
pub fn nominal_step(state: &PlantState, u: f64, w: f64, ts: f64, input_delay: usize) -> Result<PlantState> {
    plant_step(state, u, w, &PlantParams::nominal(ts, input_delay))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    pub noise_std: f64,
    pub sine_amp: f64,
    pub sine_freq_hz: f64,
    pub seed: u64,
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        DisturbanceSpec {
            noise_std: 0.001,
            sine_amp: 0.05,
            sine_freq_hz: 0.5,
            seed: 0,
        }
    }
}

impl DisturbanceSpec {
    pub fn zero() -> Self {
        DisturbanceSpec {
            noise_std: 0.0,
            sine_amp: 0.0,
            sine_freq_hz: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        if !self.sine_amp.is_finite() || !self.sine_freq_hz.is_finite() {
            return Err(Error::InvalidParameter("non-finite disturbance sine".into()));
        }
        Ok(())
    }
}

/// Standard normal draw number `k` of the stream identified by `seed`.
///
/// Each index gets its own ChaCha stream, so the value does not depend on
/// which other indices were evaluated before.
pub fn gaussian_at(seed: u64, k: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    // unit normal parameters are always valid
    Normal::new(0.0, 1.0).unwrap().sample(&mut rng)
}

/// `sine_amp · sin(2π f k Ts) + N(0, noise_std²)`.
pub fn disturbance_at(spec: &DisturbanceSpec, k: u64, ts: f64) -> f64 {
    let t = k as f64 * ts;
    let sine = spec.sine_amp * (2.0 * PI * spec.sine_freq_hz * t).sin();
    if spec.noise_std == 0.0 {
        sine
    } else {
        sine + spec.noise_std * gaussian_at(spec.seed, k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Step,
    Sine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub kind: ReferenceKind,
    pub amplitude: f64,
    #[serde(default)]
    pub freq_hz: f64,
    #[serde(default)]
    pub step_time_s: f64,
}

impl ReferenceSpec {
    pub fn step(amplitude: f64) -> Self {
        ReferenceSpec {
            kind: ReferenceKind::Step,
            amplitude,
            freq_hz: 0.0,
            step_time_s: 0.0,
        }
    }

    pub fn sine(amplitude: f64, freq_hz: f64) -> Self {
        ReferenceSpec {
            kind: ReferenceKind::Sine,
            amplitude,
            freq_hz,
            step_time_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.amplitude.is_finite() || !self.freq_hz.is_finite() || !self.step_time_s.is_finite() {
            return Err(Error::InvalidParameter("non-finite reference parameter".into()));
        }
        Ok(())
    }
}

pub fn reference_at(spec: &ReferenceSpec, t: f64) -> f64 {
    match spec.kind {
        ReferenceKind::Step if t < spec.step_time_s => 0.0,
        ReferenceKind::Step => spec.amplitude,
        ReferenceKind::Sine => spec.amplitude * (2.0 * PI * spec.freq_hz * t).sin(),
    }
}
