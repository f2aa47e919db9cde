//! Nonlinear tracking law with model-Jacobian gain adaptation, and the PID
//! baseline.
//!
//! The law is `k1·e + k2·sig^α(e)`. Gains adapt along the sensitivity
//! `∂y_m/∂u` taken from the identified network:
//!
//! ```text
//! k1 ← k1 + η1 · e² · ∂y_m/∂u
//! k2 ← k2 + η2 · e · sig^α(e) · ∂y_m/∂u
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{plant_step, PlantParams, PlantState};

/// `|e|^a · sign(e)`.
pub fn sig_alpha(e: f64, a: f64) -> f64 {
    if e == 0.0 {
        0.0
    } else {
        e.abs().powf(a) * e.signum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainBounds {
    pub k1_min: f64,
    pub k1_max: f64,
    pub k2_min: f64,
    pub k2_max: f64,
}

impl Default for GainBounds {
    fn default() -> Self {
        GainBounds {
            k1_min: 1.5,
            k1_max: 50.0,
            k2_min: 0.01,
            k2_max: 50.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainState {
    pub k1: f64,
    pub k2: f64,
    pub k1_prev: f64,
    pub k2_prev: f64,
    pub alpha_pow: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub bounds: GainBounds,
}

impl GainState {
    pub fn new(k1: f64, k2: f64, alpha_pow: f64, eta1: f64, eta2: f64, bounds: GainBounds) -> Result<Self> {
        let g = GainState {
            k1,
            k2,
            k1_prev: k1,
            k2_prev: k2,
            alpha_pow,
            eta1,
            eta2,
            bounds,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_pow > 0.0 && self.alpha_pow < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "sig exponent must be in (0, 1), got {}",
                self.alpha_pow
            )));
        }
        let b = &self.bounds;
        if !(b.k1_min <= b.k1_max && b.k2_min <= b.k2_max) {
            return Err(Error::InvalidParameter("gain bounds are inverted".into()));
        }
        if !(self.k1.is_finite() && self.k2.is_finite() && self.eta1.is_finite() && self.eta2.is_finite()) {
            return Err(Error::InvalidParameter("non-finite gain or learning rate".into()));
        }
        Ok(())
    }
}

/// Orientation of the law relative to `e = r − y`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSign {
    /// `u = +(k1·e + k2·sig^α(e))`, stabilising for a positive-gain plant.
    #[default]
    Positive,
    /// `u = −(k1·e + k2·sig^α(e))`, kept for auditing.
    Literal,
}

impl ControlSign {
    pub fn factor(self) -> f64 {
        match self {
            ControlSign::Positive => 1.0,
            ControlSign::Literal => -1.0,
        }
    }
}

/// `sign · (k1·e + k2·sig^α(e))` clamped to `±u_max`.
pub fn control_law(e: f64, g: &GainState, sign: ControlSign, u_max: f64) -> f64 {
    let u = sign.factor() * (g.k1 * e + g.k2 * sig_alpha(e, g.alpha_pow));
    u.clamp(-u_max, u_max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdaptStatus {
    Applied,
    /// `e = 0`; nothing to do.
    Unchanged,
    /// Non-finite sensitivity; the update was skipped.
    Skipped,
}

/// One gradient step on `½e²` through the model sensitivity, projected
/// onto the gain bounds.
pub fn adapt_gains(g: &GainState, e: f64, dym_du: f64) -> (GainState, AdaptStatus) {
    if !dym_du.is_finite() || !e.is_finite() {
        return (*g, AdaptStatus::Skipped);
    }
    if e == 0.0 {
        return (*g, AdaptStatus::Unchanged);
    }
    let b = &g.bounds;
    let k1 = (g.k1 + g.eta1 * e * e * dym_du).clamp(b.k1_min, b.k1_max);
    let k2 = (g.k2 + g.eta2 * e * sig_alpha(e, g.alpha_pow) * dym_du).clamp(b.k2_min, b.k2_max);
    (
        GainState {
            k1,
            k2,
            k1_prev: g.k1,
            k2_prev: g.k2,
            ..*g
        },
        AdaptStatus::Applied,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GainFloor {
    /// Lower bound on k1 from the Lyapunov difference condition.
    pub k1_floor: f64,
    /// Upper bound on each learning rate, `2 / |∂y_m/∂u|²`.
    pub eta_cap: f64,
}

/// `k1 > (1 + √(1 + 2L²)) / (2L)` and `η_i < 2 / |∂y_m/∂u|²`.
///
/// The floor decreases in `L`: it grows without bound as `L → 0` and tends
/// to `1/√2` as `L → ∞`.
pub fn stability_gain_floor(l_u: f64, dym_du: f64) -> Result<GainFloor> {
    if !(l_u > 0.0) || !l_u.is_finite() {
        return Err(Error::InvalidParameter(format!("L_u must be positive, got {l_u}")));
    }
    let d2 = dym_du * dym_du;
    Ok(GainFloor {
        k1_floor: (1.0 + (1.0 + 2.0 * l_u * l_u).sqrt()) / (2.0 * l_u),
        eta_cap: if d2 > 0.0 { 2.0 / d2 } else { f64::INFINITY },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral: f64,
    pub e_prev: f64,
    /// Anti-windup bound on `|integral|`.
    pub integral_limit: f64,
}

impl PidState {
    pub fn new(kp: f64, ki: f64, kd: f64, integral_limit: f64) -> Self {
        PidState {
            kp,
            ki,
            kd,
            integral: 0.0,
            e_prev: 0.0,
            integral_limit,
        }
    }
}

/// `kp·e + ki·∫e + kd·Δe/Ts` with a clamped rectangular integral.
pub fn pid_step(p: &PidState, e: f64, ts: f64) -> Result<(f64, PidState)> {
    if !(ts > 0.0) {
        return Err(Error::InvalidParameter(format!("sample time must be > 0, got {ts}")));
    }
    let integral = (p.integral + e * ts).clamp(-p.integral_limit, p.integral_limit);
    let u = p.kp * e + p.ki * integral + p.kd * (e - p.e_prev) / ts;
    Ok((
        u,
        PidState {
            integral,
            e_prev: e,
            ..*p
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelayEstimate {
    /// Ultimate gain `4h / (π a)`.
    pub ku: f64,
    /// Ultimate period in seconds.
    pub pu: f64,
    /// Half peak-to-peak output amplitude.
    pub amplitude: f64,
}

/// Relay-feedback experiment around the origin on a disturbance-free plant:
/// `u = h·sign(−y)`, discarding the first half as transient.
pub fn relay_experiment(plant: &PlantParams, h: f64, steps: usize) -> Result<RelayEstimate> {
    if steps < 20 || !(h > 0.0) {
        return Err(Error::InvalidParameter("relay test needs h > 0 and >= 20 steps".into()));
    }
    let mut s = PlantState::new(plant);
    let mut ys = Vec::with_capacity(steps);
    for _ in 0..steps {
        let y = s.output(plant);
        let u = if -y > 0.0 { h } else { -h };
        s = plant_step(&s, u, 0.0, plant)?;
        ys.push(s.output(plant));
    }
    let tail = &ys[steps / 2..];
    let hi = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = tail.iter().copied().fold(f64::INFINITY, f64::min);
    let amplitude = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    let crossings: Vec<usize> = tail
        .windows(2)
        .enumerate()
        .filter(|(_, w)| (w[0] - mid).signum() != (w[1] - mid).signum())
        .map(|(i, _)| i)
        .collect();
    if crossings.len() < 3 || !(amplitude > 0.0) {
        return Err(Error::InvalidInput("relay test produced no sustained oscillation".into()));
    }
    let span = (crossings[crossings.len() - 1] - crossings[0]) as f64;
    let half_periods = (crossings.len() - 1) as f64;
    let pu = 2.0 * span / half_periods * plant.ts;
    Ok(RelayEstimate {
        ku: 4.0 * h / (std::f64::consts::PI * amplitude),
        pu,
        amplitude,
    })
}

/// Classic Ziegler–Nichols PID gains `(kp, ki, kd)` from an ultimate point.
pub fn ziegler_nichols(est: &RelayEstimate) -> (f64, f64, f64) {
    let kp = 0.6 * est.ku;
    let ti = est.pu / 2.0;
    let td = est.pu / 8.0;
    (kp, kp / ti, kp * td)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gains() -> GainState {
        GainState::new(1.5, 0.8, 0.7, 0.1, 0.1, GainBounds::default()).unwrap()
    }

    #[test]
    fn sig_alpha_examples() {
        assert_eq!(sig_alpha(0.0, 0.7), 0.0);
        assert!((sig_alpha(2.0, 1.0 - 1e-9) - 2.0).abs() < 1e-8);
        assert!((sig_alpha(4.0, 0.5) - 2.0).abs() < 1e-15);
        assert!((sig_alpha(-4.0, 0.5) + 2.0).abs() < 1e-15);
    }

    #[test]
    fn control_law_examples() {
        let g = gains();
        assert_eq!(control_law(0.0, &g, ControlSign::Positive, 10.0), 0.0);
        assert!((control_law(1.0, &g, ControlSign::Positive, 10.0) - 2.3).abs() < 1e-15);
        assert_eq!(control_law(1.0, &g, ControlSign::Literal, 10.0), -2.3);
        assert_eq!(control_law(100.0, &g, ControlSign::Positive, 10.0), 10.0);
        for e in [0.01, 0.3, 2.0] {
            assert_eq!(
                control_law(-e, &g, ControlSign::Positive, 10.0),
                -control_law(e, &g, ControlSign::Positive, 10.0)
            );
        }
    }

    #[test]
    fn adapt_examples() {
        let g = gains();
        let (same, st) = adapt_gains(&g, 0.0, 3.0);
        assert_eq!((same, st), (g, AdaptStatus::Unchanged));
        let (next, _) = adapt_gains(&g, 0.5, 2.0);
        assert!((next.k1 - 1.55).abs() < 1e-15);
        assert_eq!(next.k1_prev, 1.5);
        let (_, st) = adapt_gains(&g, 0.5, f64::NAN);
        assert_eq!(st, AdaptStatus::Skipped);
        let wide = GainState {
            bounds: GainBounds {
                k1_min: 0.0,
                k1_max: 10.0,
                k2_min: 0.0,
                k2_max: 10.0,
            },
            ..g
        };
        let (down, _) = adapt_gains(&wide, -0.4, -1.0);
        assert!(down.k1 < g.k1 && down.k2 < g.k2);
    }

    #[test]
    fn floor_examples() {
        let f = stability_gain_floor(1.0, 1.0).unwrap();
        assert!((f.k1_floor - (1.0 + 3f64.sqrt()) / 2.0).abs() < 1e-15);
        assert!((f.k1_floor - 1.366).abs() < 1e-3);
        assert_eq!(f.eta_cap, 2.0);
        assert!(stability_gain_floor(0.0, 1.0).is_err());
        assert_eq!(stability_gain_floor(1.0, 0.0).unwrap().eta_cap, f64::INFINITY);
        // monotone decreasing towards 1/√2
        let mut last = f64::INFINITY;
        for l in [1e-3, 0.01, 0.1, 1.0, 10.0, 1e3, 1e6] {
            let v = stability_gain_floor(l, 1.0).unwrap().k1_floor;
            assert!(v < last);
            last = v;
        }
        assert!((last - 0.5f64.sqrt()).abs() < 1e-5);
    }

    #[test]
    fn pid_examples() {
        let p = PidState::new(2.0, 3.0, 4.0, 100.0);
        assert_eq!(pid_step(&p, 0.0, 1e-3).unwrap().0, 0.0);
        let p = PidState::new(2.5, 0.0, 0.0, 100.0);
        assert_eq!(pid_step(&p, 0.4, 1e-3).unwrap().0, 1.0);
        let mut p = PidState::new(0.0, 1.0, 0.0, 100.0);
        let mut u = 0.0;
        for _ in 0..250 {
            (u, p) = pid_step(&p, 1.0, 1e-3).unwrap();
        }
        assert!((u - 0.25).abs() < 1e-12);
        let p = PidState::new(0.0, 1.0, 0.0, 0.01);
        let (u, _) = pid_step(&PidState { integral: 0.01, ..p }, 1.0, 1e-3).unwrap();
        assert_eq!(u, 0.01);
        assert!(pid_step(&p, 1.0, 0.0).is_err());
    }

    #[test]
    fn relay_finds_the_fast_resonance() {
        let est = relay_experiment(&PlantParams::default(), 1.0, 2000).unwrap();
        assert!((est.pu - 0.006).abs() < 1e-3, "{est:?}");
        assert!(est.ku > 4.0 && est.ku < 8.0, "{est:?}");
        let (kp, ki, kd) = ziegler_nichols(&est);
        assert!((kp - 0.6 * est.ku).abs() < 1e-12);
        assert!((ki - kp / (est.pu / 2.0)).abs() < 1e-9);
        assert!((kd - kp * est.pu / 8.0).abs() < 1e-12);
    }
}
