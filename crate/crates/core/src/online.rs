//! Event-triggered online refinement of the network.
//!
//! When the instantaneous prediction error exceeds a threshold, a batch is
//! drawn from a bounded experience buffer and the online parameter subset
//! takes one momentum step whose size comes from the closed form
//! `η = vᵀF / vᵀv`, `v = J Jᵀ F`, limited by a singular-value bound.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ForwardTrace, TgrbfState};
use crate::offline::{deploy_input, Sample};

/// Relative threshold below which `vᵀv` is treated as zero.
pub const DEGENERATE_DENOM: f64 = 1e-12;

/// Smallest singular value for which the step-size cap is evaluated.
pub const SIGMA_MIN_DEGENERATE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerConfig {
    pub delta: f64,
    pub batch_s: usize,
    pub momentum_alpha: f64,
    pub eta_max: f64,
    pub cooldown_steps: u64,
    pub buffer_capacity: usize,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        TriggerConfig {
            delta: 0.01,
            batch_s: 32,
            momentum_alpha: 0.2,
            eta_max: 1.0,
            cooldown_steps: 0,
            buffer_capacity: 1000,
        }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::InvalidParameter(format!("delta must be > 0, got {}", self.delta)));
        }
        if self.batch_s == 0 {
            return Err(Error::InvalidParameter("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum_alpha) {
            return Err(Error::InvalidParameter(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum_alpha
            )));
        }
        if !(self.eta_max > 0.0) || !self.eta_max.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "eta_max must be > 0, got {}",
                self.eta_max
            )));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::InvalidParameter("buffer capacity must be >= 1".into()));
        }
        Ok(())
    }
}

/// `|e_t| > δ` once at least `cooldown_steps` steps have passed since the
/// last update.
pub fn should_trigger(e_t: f64, cfg: &TriggerConfig, steps_since_update: u64) -> bool {
    e_t.abs() > cfg.delta && steps_since_update >= cfg.cooldown_steps
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub index: u64,
    pub sample: Sample,
}

/// Bounded FIFO store that prefers to keep high-error samples.
///
/// When full, the entry with the smallest priority among the oldest
/// `⌈N/4⌉` entries is evicted (oldest first on ties).
#[derive(Clone, Debug, PartialEq)]
pub struct ExperienceBuffer {
    capacity: usize,
    entries: VecDeque<BufferEntry>,
    next_index: u64,
}

impl ExperienceBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        ExperienceBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            next_index: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Sample> {
        self.entries.get(i).map(|e| &e.sample)
    }

    pub fn set_priority(&mut self, i: usize, priority: f64) {
        if let Some(e) = self.entries.get_mut(i) {
            e.sample.err_priority = priority;
        }
    }

    /// Size of the eviction window for a full buffer.
    pub fn eviction_window(&self) -> usize {
        self.capacity.div_ceil(4)
    }

    /// Appends `sample`; returns the evicted entry if the buffer was full.
    pub fn push(&mut self, sample: Sample) -> Option<BufferEntry> {
        let evicted = if self.entries.len() >= self.capacity {
            let window = self.eviction_window().min(self.entries.len());
            let mut victim = 0;
            for i in 1..window {
                if self.entries[i].sample.err_priority < self.entries[victim].sample.err_priority {
                    victim = i;
                }
            }
            self.entries.remove(victim)
        } else {
            None
        };
        self.entries.push_back(BufferEntry {
            index: self.next_index,
            sample,
        });
        self.next_index += 1;
        evicted
    }
}

/// Up to `s` distinct buffer positions drawn uniformly without replacement.
/// `None` for an empty buffer.
pub fn sample_batch<R: rand::Rng + ?Sized>(buf: &ExperienceBuffer, s: usize, rng: &mut R) -> Option<Vec<usize>> {
    if buf.is_empty() {
        return None;
    }
    let amount = s.min(buf.len());
    Some(rand::seq::index::sample(rng, buf.len(), amount).into_vec())
}

/// Prediction and full-length gradient `∂ŷ/∂W` for a replayed sample.
///
/// The hidden state is rebuilt by one deploy-mode step from `h_init`, and the
/// gradient includes that step's dependence on the recurrent weights.
pub fn replay_gradient(net: &TgrbfState, sample: &Sample) -> Result<(f64, Vec<f64>)> {
    let (t0, t1) = replay_traces(net, &sample.x)?;
    let mut grad = net.jacobian_params(&t1);
    let dh = net.jacobian_hidden(&t1);
    net.accumulate_hidden_param_grad(&t0, &dh, &mut grad);
    Ok((t1.y, grad))
}

/// Replay prediction only.
pub fn replay_predict(net: &TgrbfState, sample: &Sample) -> Result<f64> {
    Ok(replay_traces(net, &sample.x)?.1.y)
}

/// The rebuild step from `h_init` and the evaluated step for input `x`.
pub fn replay_traces(net: &TgrbfState, x: &[f64]) -> Result<(ForwardTrace, ForwardTrace)> {
    if x.len() < 2 {
        return Err(Error::InvalidInput(format!("replay needs at least two input slots, got {}", x.len())));
    }
    let t0 = net.forward_from(&net.h_init, &deploy_input(x[0], x[1]))?;
    let t1 = net.forward_from(&t0.h_next, x)?;
    Ok((t0, t1))
}

/// Residuals `F_k = y_k − ŷ_k` and Jacobian rows `−∂ŷ_k/∂W` restricted to
/// the columns in `columns`.
pub fn residuals_and_jacobian(
    net: &TgrbfState,
    batch: &[&Sample],
    columns: &[usize],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut f = DVector::zeros(batch.len());
    let mut jac = DMatrix::zeros(batch.len(), columns.len());
    for (row, sample) in batch.iter().enumerate() {
        let (y_hat, grad) = replay_gradient(net, sample)?;
        f[row] = sample.target - y_hat;
        for (col, &idx) in columns.iter().enumerate() {
            jac[(row, col)] = -grad[idx];
        }
    }
    Ok((f, jac))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSize {
    pub eta: f64,
    /// The denominator vanished and `eta` is the fallback value.
    pub degenerate: bool,
}

/// `η = vᵀF / vᵀv` with `v = J Jᵀ F`; `fallback` when `vᵀv` is negligible.
pub fn explicit_step_size(f: &DVector<f64>, jac: &DMatrix<f64>, fallback: f64) -> StepSize {
    let v = jac * (jac.transpose() * f);
    let vv = v.dot(&v);
    let vf = v.dot(f);
    if !(vv >= DEGENERATE_DENOM * (1.0 + f.norm_squared())) || !vf.is_finite() {
        return StepSize {
            eta: fallback,
            degenerate: true,
        };
    }
    StepSize {
        eta: vf / vv,
        degenerate: false,
    }
}

/// `W_t − η·grad + α(W_t − W_prev)`; `None` if any entry is non-finite.
pub fn momentum_update(w: &[f64], w_prev: &[f64], grad: &[f64], eta: f64, alpha: f64) -> Option<Vec<f64>> {
    let next: Vec<f64> = w
        .iter()
        .zip(w_prev)
        .zip(grad)
        .map(|((wt, wp), g)| wt - eta * g + alpha * (wt - wp))
        .collect();
    next.iter().all(|v| v.is_finite()).then_some(next)
}

/// Extreme singular values of `jac` over its `min(rows, cols)` values.
pub fn singular_value_range(jac: &DMatrix<f64>) -> (f64, f64) {
    if jac.nrows() == 0 || jac.ncols() == 0 {
        return (0.0, 0.0);
    }
    let gram = if jac.nrows() <= jac.ncols() {
        jac * jac.transpose()
    } else {
        jac.transpose() * jac
    };
    let eig = gram.symmetric_eigenvalues();
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min).max(0.0);
    let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    (lo.sqrt(), hi.sqrt())
}

/// `max(0, (σ_min² − 2α²L²/σ_min²) / σ_max²)` with `L = σ_max`.
pub fn eta_cap(sigma_min: f64, sigma_max: f64, alpha: f64) -> f64 {
    let l = sigma_max;
    let s2 = sigma_min * sigma_min;
    ((s2 - 2.0 * alpha * alpha * l * l / s2) / (sigma_max * sigma_max)).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Safeguard {
    pub eta: f64,
    /// `None` on the degenerate path (σ_min ≤ 1e-6).
    pub cap: Option<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// The returned step is smaller than the requested one.
    pub hit: bool,
}

/// Limits `eta` by the singular-value cap and by `eta_max`.
pub fn step_size_safeguard(eta: f64, jac: &DMatrix<f64>, alpha: f64, eta_max: f64) -> Safeguard {
    let (sigma_min, sigma_max) = singular_value_range(jac);
    let cap = (sigma_min > SIGMA_MIN_DEGENERATE).then(|| eta_cap(sigma_min, sigma_max, alpha));
    let mut out = eta.min(eta_max);
    if let Some(c) = cap {
        out = out.min(c);
    }
    if !out.is_finite() {
        out = 0.0;
    }
    Safeguard {
        eta: out,
        cap,
        sigma_min,
        sigma_max,
        hit: out < eta,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpdateEvent {
    pub k: u64,
    /// Step size actually applied.
    pub eta: f64,
    pub eta_explicit: f64,
    pub eta_cap: Option<f64>,
    pub sigma_min: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub grad_norm: f64,
    pub safeguard_hit: bool,
    pub degenerate: bool,
    pub rejected: bool,
}

/// Online optimizer state: experience buffer, momentum history and the
/// batch-sampling stream.
#[derive(Clone, Debug)]
pub struct OnlineOptimizer {
    pub cfg: TriggerConfig,
    pub buffer: ExperienceBuffer,
    columns: Vec<usize>,
    w_prev: Option<Vec<f64>>,
    rng: ChaCha8Rng,
    steps_since_update: u64,
    pub events: Vec<UpdateEvent>,
}

impl OnlineOptimizer {
    pub fn new(net: &TgrbfState, cfg: TriggerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(OnlineOptimizer {
            cfg,
            buffer: ExperienceBuffer::new(cfg.buffer_capacity),
            columns: net.layout().online_indices(),
            w_prev: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            steps_since_update: u64::MAX,
            events: Vec::new(),
        })
    }

    /// Flat indices of the parameters this optimizer may change.
    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    /// Runs one trigger check and, if it fires, one update of `net`.
    pub fn online_update(&mut self, net: &mut TgrbfState, e_t: f64, k: u64) -> Result<Option<UpdateEvent>> {
        if !should_trigger(e_t, &self.cfg, self.steps_since_update) {
            self.steps_since_update = self.steps_since_update.saturating_add(1);
            return Ok(None);
        }
        let Some(picked) = sample_batch(&self.buffer, self.cfg.batch_s, &mut self.rng) else {
            self.steps_since_update = self.steps_since_update.saturating_add(1);
            return Ok(None);
        };
        self.steps_since_update = 0;
        let batch: Vec<&Sample> = picked.iter().filter_map(|&i| self.buffer.get(i)).collect();
        let s = batch.len() as f64;

        let (f, jac) = residuals_and_jacobian(net, &batch, &self.columns)?;
        let loss_before = 0.5 * f.norm_squared() / s;
        let step = explicit_step_size(&f, &jac, self.cfg.eta_max);
        let alpha = self.cfg.momentum_alpha;
        let guard = step_size_safeguard(step.eta, &jac, alpha, self.cfg.eta_max);
        let grad: Vec<f64> = (jac.transpose() * &f / s).iter().copied().collect();
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();

        let flat = net.flatten();
        let w: Vec<f64> = self.columns.iter().map(|&i| flat.values[i]).collect();
        let w_prev = self.w_prev.clone().unwrap_or_else(|| w.clone());

        let mut event = UpdateEvent {
            k,
            eta: guard.eta,
            eta_explicit: step.eta,
            eta_cap: guard.cap,
            sigma_min: guard.sigma_min,
            loss_before,
            loss_after: loss_before,
            grad_norm,
            safeguard_hit: guard.hit,
            degenerate: step.degenerate,
            rejected: false,
        };

        let candidate = momentum_update(&w, &w_prev, &grad, guard.eta, alpha);
        let mut applied = false;
        if let Some(next) = candidate {
            let mut values = flat.values.clone();
            for (&i, v) in self.columns.iter().zip(&next) {
                values[i] = *v;
            }
            let mut trial = net.clone();
            trial.unflatten(&values)?;
            if trial.rbf.validate().is_ok() {
                let preds: Result<Vec<f64>> = batch.iter().map(|s| replay_predict(&trial, s)).collect();
                if let Ok(preds) = preds {
                    let res: Vec<f64> = batch.iter().zip(&preds).map(|(s, p)| s.target - p).collect();
                    if res.iter().all(|r| r.is_finite()) {
                        event.loss_after = 0.5 * res.iter().map(|r| r * r).sum::<f64>() / s;
                        trial.h.clone_from(&net.h);
                        *net = trial;
                        self.w_prev = Some(w);
                        for (&i, r) in picked.iter().zip(&res) {
                            self.buffer.set_priority(i, r.abs());
                        }
                        applied = true;
                    }
                }
            }
        }
        if !applied {
            event.rejected = true;
            event.eta = 0.0;
            self.w_prev = None;
        }
        self.events.push(event.clone());
        Ok(Some(event))
    }
}

pub const UPDATE_EVENT_HEADER: [&str; 11] = [
    "k",
    "eta",
    "loss_before",
    "loss_after",
    "grad_norm",
    "safeguard",
    "eta_explicit",
    "eta_cap",
    "sigma_min",
    "degenerate",
    "rejected",
];

pub fn write_update_events(events: &[UpdateEvent], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(UPDATE_EVENT_HEADER)?;
    for ev in events {
        w.write_record([
            ev.k.to_string(),
            crate::harness::fmt_f64(ev.eta),
            crate::harness::fmt_f64(ev.loss_before),
            crate::harness::fmt_f64(ev.loss_after),
            crate::harness::fmt_f64(ev.grad_norm),
            u8::from(ev.safeguard_hit).to_string(),
            crate::harness::fmt_f64(ev.eta_explicit),
            ev.eta_cap.map_or_else(String::new, crate::harness::fmt_f64),
            crate::harness::fmt_f64(ev.sigma_min),
            u8::from(ev.degenerate).to_string(),
            u8::from(ev.rejected).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample(p: f64) -> Sample {
        Sample {
            x: vec![0.0, 0.0, 0.0],
            target: 0.0,
            err_priority: p,
        }
    }

    #[test]
    fn trigger_is_strict() {
        let cfg = TriggerConfig::default();
        assert!(!should_trigger(0.005, &cfg, u64::MAX));
        assert!(should_trigger(0.02, &cfg, u64::MAX));
        assert!(should_trigger(-0.02, &cfg, u64::MAX));
        assert!(!should_trigger(0.01, &cfg, u64::MAX));
        let cool = TriggerConfig {
            cooldown_steps: 5,
            ..cfg
        };
        assert!(!should_trigger(1.0, &cool, 4));
        assert!(should_trigger(1.0, &cool, 5));
    }

    #[test]
    fn eviction_walk_through() {
        let mut buf = ExperienceBuffer::new(2);
        for p in [5.0, 1.0, 9.0] {
            buf.push(sample(p));
        }
        let kept: Vec<f64> = buf.entries().map(|e| e.sample.err_priority).collect();
        assert_eq!(kept, vec![1.0, 9.0]);
    }

    #[test]
    fn equal_priorities_are_fifo() {
        let mut buf = ExperienceBuffer::new(4);
        for _ in 0..10 {
            buf.push(sample(1.0));
        }
        let idx: Vec<u64> = buf.entries().map(|e| e.index).collect();
        assert_eq!(idx, vec![6, 7, 8, 9]);
    }

    #[test]
    fn batch_sampling() {
        let mut buf = ExperienceBuffer::new(100);
        assert!(sample_batch(&buf, 3, &mut ChaCha8Rng::seed_from_u64(0)).is_none());
        buf.push(sample(0.0));
        assert_eq!(sample_batch(&buf, 32, &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), vec![0]);
        for _ in 0..60 {
            buf.push(sample(0.0));
        }
        let a = sample_batch(&buf, 32, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_batch(&buf, 32, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 32);
    }

    #[test]
    fn explicit_step_examples() {
        let f = DVector::from_vec(vec![2.0]);
        let j = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert_eq!(explicit_step_size(&f, &j, 9.0).eta, 1.0);
        let f = DVector::from_vec(vec![1.0]);
        let j = DMatrix::from_row_slice(1, 2, &[2.0, 0.0]);
        assert_eq!(explicit_step_size(&f, &j, 9.0).eta, 0.25);
        let j = DMatrix::zeros(1, 2);
        let s = explicit_step_size(&f, &j, 9.0);
        assert!(s.degenerate);
        assert_eq!(s.eta, 9.0);
    }

    #[test]
    fn momentum_examples() {
        let w = [1.0, -2.0];
        let wp = [0.5, -2.5];
        let g = [0.1, 0.2];
        assert_eq!(momentum_update(&w, &wp, &g, 0.5, 0.0).unwrap(), vec![0.95, -2.1]);
        assert_eq!(momentum_update(&w, &wp, &[0.0, 0.0], 0.5, 0.2).unwrap(), vec![1.1, -1.9]);
        assert!(momentum_update(&w, &wp, &[f64::INFINITY, 0.0], 0.5, 0.0).is_none());
    }

    #[test]
    fn scalar_newton_step() {
        // f = w - 3 as residual F = -(f), J = ∂F/∂w = -1
        let w = 0.0;
        let f = DVector::from_vec(vec![3.0 - w]);
        let j = DMatrix::from_row_slice(1, 1, &[-1.0]);
        let eta = explicit_step_size(&f, &j, 1.0).eta;
        assert_eq!(eta, 1.0);
        let grad: Vec<f64> = (j.transpose() * &f).iter().copied().collect();
        assert_eq!(grad, vec![-3.0]);
        let next = momentum_update(&[w], &[w], &grad, eta, 0.0).unwrap();
        assert_eq!(next, vec![3.0]);
    }

    #[test]
    fn safeguard_examples() {
        let j = DMatrix::<f64>::identity(3, 5);
        assert!((eta_cap(1.0, 1.0, 0.0) - 1.0).abs() < 1e-15);
        let g = step_size_safeguard(5.0, &j, 0.0, 10.0);
        assert!((g.eta - 1.0).abs() < 1e-12 && g.hit);
        let g = step_size_safeguard(0.3, &j, 0.0, 10.0);
        assert_eq!(g.eta, 0.3);
        assert!(!g.hit);
        let mut j = DMatrix::<f64>::identity(2, 3);
        j[(1, 1)] = 0.0;
        let g = step_size_safeguard(5.0, &j, 0.2, 2.0);
        assert_eq!(g.cap, None);
        assert_eq!(g.eta, 2.0);
    }

    #[test]
    fn singular_values_of_diagonal() {
        let mut j = DMatrix::zeros(2, 4);
        j[(0, 0)] = 3.0;
        j[(1, 2)] = -0.5;
        let (lo, hi) = singular_value_range(&j);
        assert!((lo - 0.5).abs() < 1e-12 && (hi - 3.0).abs() < 1e-12);
        let (lo, hi) = singular_value_range(&j.transpose());
        assert!((lo - 0.5).abs() < 1e-12 && (hi - 3.0).abs() < 1e-12);
    }

    #[test]
    fn brute_force_oracle_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cap in [1usize, 2, 3, 5, 8] {
            let mut buf = ExperienceBuffer::new(cap);
            let mut model: Vec<(u64, f64)> = Vec::new();
            for i in 0..200u64 {
                let p = f64::from(rng.random_range(0..4u8));
                buf.push(sample(p));
                if model.len() == cap {
                    let window = cap.div_ceil(4);
                    let victim = (0..window)
                        .min_by(|&a, &b| model[a].1.total_cmp(&model[b].1).then(model[a].0.cmp(&model[b].0)))
                        .unwrap();
                    model.remove(victim);
                }
                model.push((i, p));
                let got: Vec<(u64, f64)> = buf.entries().map(|e| (e.index, e.sample.err_priority)).collect();
                assert_eq!(got, model);
            }
        }
    }
}
