//! Offline identification: dataset generation from the nominal model,
//! teacher-forced mini-batch training and fit metrics.
//!
//! A training input is `[u_k, y_{k-1}, y_k]` with target `y_k`; at control
//! time the unavailable `y_k` is replaced by `y_{k-1}`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{SegmentKind, TgrbfState};
use crate::online::{explicit_step_size, momentum_update, replay_predict, replay_traces, residuals_and_jacobian};
use crate::plant::{gaussian_at, nominal_step, PlantParams, PlantState};

/// Gate bias used to pin the fusion gate at 1 for the RBF-only ablation.
pub const GATE_OPEN_BIAS: f64 = 800.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `[u_k, y_prev, y_teacher]`.
    pub x: Vec<f64>,
    pub target: f64,
    pub err_priority: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Index of the first holdout sample.
    pub split: usize,
}

impl Dataset {
    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.split]
    }

    pub fn holdout(&self) -> &[Sample] {
        &self.samples[self.split..]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitReport {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    /// NaN when the actual sequence has zero variance.
    pub r2: f64,
    pub loss_curve: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Excitation {
    /// Uniform random levels in `[lo, hi]`, each held for `dwell` steps.
    PiecewiseConstant { lo: f64, hi: f64, dwell: usize },
    Zero,
}

impl Default for Excitation {
    fn default() -> Self {
        Excitation::PiecewiseConstant {
            lo: -2.0,
            hi: 2.0,
            dwell: 50,
        }
    }
}

impl Excitation {
    pub fn sequence(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        match *self {
            Excitation::Zero => vec![0.0; n],
            Excitation::PiecewiseConstant { lo, hi, dwell } => {
                let dwell = dwell.max(1);
                let mut level = 0.0;
                (0..n)
                    .map(|k| {
                        if k % dwell == 0 {
                            level = if hi > lo { rng.random_range(lo..hi) } else { lo };
                        }
                        level
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n: usize,
    pub excitation: Excitation,
    /// Standard deviation of the nominal model's white process noise.
    pub noise_std: f64,
    pub holdout_frac: f64,
    pub input_delay: usize,
    #[serde(rename = "Ts")]
    pub ts: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n: 1000,
            excitation: Excitation::default(),
            noise_std: 0.001,
            holdout_frac: 0.2,
            input_delay: 1,
            ts: 1e-3,
            seed: 0,
        }
    }
}

/// Simulates the nominal model from rest and records teacher-forcing samples.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.n == 0 {
        return Err(Error::InvalidParameter("dataset needs n >= 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.holdout_frac) {
        return Err(Error::InvalidParameter(format!(
            "holdout fraction must be in [0, 1), got {}",
            cfg.holdout_frac
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inputs = cfg.excitation.sequence(cfg.n, &mut rng);
    let nominal = PlantParams::nominal(cfg.ts, cfg.input_delay);
    let mut state = PlantState::new(&nominal);
    let mut y_prev = state.output(&nominal);
    let noise_seed = cfg.seed ^ 0x6e6f_6d69_6e61_6c00;
    let mut samples = Vec::with_capacity(cfg.n);
    for (k, &u) in inputs.iter().enumerate() {
        let w = if cfg.noise_std > 0.0 {
            cfg.noise_std * gaussian_at(noise_seed, k as u64)
        } else {
            0.0
        };
        state = nominal_step(&state, u, w, cfg.ts, cfg.input_delay)?;
        let y = state.output(&nominal);
        samples.push(Sample {
            x: vec![u, y_prev, y],
            target: y,
            err_priority: 0.0,
        });
        y_prev = y;
    }
    let split = cfg.n - (cfg.holdout_frac * cfg.n as f64).round() as usize;
    Ok(Dataset { samples, split })
}

/// Control-time network input: the previous output stands in for the current one.
pub fn deploy_input(u_k: f64, y_prev: f64) -> Vec<f64> {
    vec![u_k, y_prev, y_prev]
}

pub fn fit_metrics(pred: &[f64], actual: &[f64]) -> Result<FitReport> {
    if pred.len() != actual.len() || pred.is_empty() {
        return Err(Error::InvalidInput(format!(
            "fit metrics need equal non-empty sequences, got {} and {}",
            pred.len(),
            actual.len()
        )));
    }
    let n = pred.len() as f64;
    let sse: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    let mae = pred.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum::<f64>() / n;
    let mean = actual.iter().sum::<f64>() / n;
    let sst: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    let mse = sse / n;
    Ok(FitReport {
        mse,
        rmse: mse.sqrt(),
        mae,
        r2: if sst > 0.0 { 1.0 - sse / sst } else { f64::NAN },
        loss_curve: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub momentum: f64,
    pub eta_max: f64,
    /// Consecutive rejected epochs after which training stops.
    pub max_rejected_epochs: usize,
    /// Pin the fusion gate at 1 and leave it untrained (RBF-only ablation).
    pub rbf_only: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch: 32,
            momentum: 0.2,
            eta_max: 1.0,
            max_rejected_epochs: 5,
            rbf_only: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidParameter("batch must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.eta_max > 0.0) || !self.eta_max.is_finite() {
            return Err(Error::InvalidParameter("eta_max must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    /// Teacher-forced fit on the holdout, with the per-epoch training loss.
    pub holdout: FitReport,
    /// Holdout fit with the teacher slot replaced by the previous output,
    /// evaluated as in closed loop.
    pub holdout_deploy: FitReport,
    pub epochs_run: usize,
    pub rejected_epochs: usize,
    /// Set when training stopped early because epochs kept increasing the loss.
    pub halted: Option<String>,
    pub fallback_steps: usize,
}

/// Pins the fusion gate at 1 so the network reduces to its RBF branch.
pub fn open_gate(net: &mut TgrbfState) {
    net.gate.w_g.fill(0.0);
    net.gate.b_g = GATE_OPEN_BIAS;
}

/// Teacher-forced predictions, each from a hidden state rebuilt by one
/// deploy-mode step from `h_init`.
pub fn predict_teacher(net: &TgrbfState, samples: &[Sample]) -> Result<Vec<f64>> {
    samples.iter().map(|s| replay_predict(net, s)).collect()
}

/// Predictions with the deployment input `[u, y_prev, y_prev]`, each
/// evaluated over the two-step window used in closed loop.
pub fn predict_deploy(net: &TgrbfState, samples: &[Sample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| Ok(replay_traces(net, &deploy_input(s.x[0], s.x[1]))?.1.y))
        .collect()
}

fn mse_on(net: &TgrbfState, samples: &[Sample]) -> Result<f64> {
    let pred = predict_teacher(net, samples)?;
    Ok(pred
        .iter()
        .zip(samples)
        .map(|(p, s)| (s.target - p) * (s.target - p))
        .sum::<f64>()
        / samples.len() as f64)
}

/// Flat indices trained offline.
fn trainable_columns(net: &TgrbfState, rbf_only: bool) -> Vec<usize> {
    let layout = net.layout();
    layout
        .segments()
        .iter()
        .filter(|seg| !(rbf_only && matches!(seg.kind, SegmentKind::GateWeights | SegmentKind::GateBias)))
        .flat_map(|seg| seg.range())
        .collect()
}

/// Mini-batch training with the explicit step size and momentum on every
/// trainable parameter.
///
/// Each batch draws samples from shuffled positions and evaluates them like
/// replayed online samples: the hidden state is rebuilt by one deploy-mode
/// step from `h_init` and the gradient covers both steps. An epoch that raises the training loss is
/// undone and the momentum history cleared; after `max_rejected_epochs`
/// consecutive rejections training stops with a diagnostic.
pub fn train_offline(net: &TgrbfState, data: &Dataset, cfg: &TrainConfig) -> Result<(TgrbfState, TrainOutcome)> {
    cfg.validate()?;
    let train = data.train();
    if train.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut net = net.clone();
    if cfg.rbf_only {
        open_gate(&mut net);
    }
    let columns = trainable_columns(&net, cfg.rbf_only);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut loss = mse_on(&net, train)?;
    let mut loss_curve = vec![loss];
    let mut w_prev: Option<Vec<f64>> = None;
    let mut rejected = 0;
    let mut rejected_total = 0;
    let mut fallback_steps = 0;
    let mut halted = None;
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        let saved = net.clone();
        order.shuffle(&mut rng);
        for batch_idx in order.chunks(cfg.batch) {
            let batch: Vec<&Sample> = batch_idx.iter().map(|&i| &train[i]).collect();
            let (f, jac) = residuals_and_jacobian(&net, &batch, &columns)?;
            let s = batch_idx.len() as f64;
            let step = explicit_step_size(&f, &jac, cfg.eta_max);
            if step.degenerate {
                fallback_steps += 1;
            }
            let eta = step.eta.min(cfg.eta_max);
            let grad: Vec<f64> = (jac.transpose() * &f / s).iter().copied().collect();
            let flat = net.flatten();
            let w: Vec<f64> = columns.iter().map(|&i| flat.values[i]).collect();
            let prev = w_prev.clone().unwrap_or_else(|| w.clone());
            let Some(next) = momentum_update(&w, &prev, &grad, eta, cfg.momentum) else {
                w_prev = None;
                continue;
            };
            let mut values = flat.values;
            for (&i, v) in columns.iter().zip(&next) {
                values[i] = *v;
            }
            let mut trial = net.clone();
            trial.unflatten(&values)?;
            if trial.rbf.validate().is_err() {
                // a width crossed zero; drop the step
                w_prev = None;
                continue;
            }
            net = trial;
            w_prev = Some(w);
        }

        let new_loss = mse_on(&net, train).unwrap_or(f64::INFINITY);
        if new_loss.is_finite() && new_loss <= loss {
            loss = new_loss;
            loss_curve.push(loss);
            rejected = 0;
        } else {
            net = saved;
            w_prev = None;
            rejected += 1;
            rejected_total += 1;
            loss_curve.push(loss);
            if rejected >= cfg.max_rejected_epochs.max(1) {
                halted = Some(format!(
                    "stopped after epoch {epochs_run}: {rejected} consecutive epochs increased the training loss"
                ));
                break;
            }
        }
    }

    net.reset();
    let holdout = if data.holdout().is_empty() { train } else { data.holdout() };
    let actual: Vec<f64> = holdout.iter().map(|s| s.target).collect();
    let mut report = fit_metrics(&predict_teacher(&net, holdout)?, &actual)?;
    report.loss_curve = loss_curve;
    let deploy = fit_metrics(&predict_deploy(&net, holdout)?, &actual)?;
    Ok((
        net,
        TrainOutcome {
            holdout: report,
            holdout_deploy: deploy,
            epochs_run,
            rejected_epochs: rejected_total,
            halted,
            fallback_steps,
        },
    ))
}

pub const DATASET_HEADER: [&str; 5] = ["k", "u", "y_prev", "y_teacher", "target"];

pub fn write_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DATASET_HEADER)?;
    for (k, s) in data.samples.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(s.x.iter().chain(std::iter::once(&s.target)).map(|v| crate::harness::fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset written by [`write_dataset`]; the split is placed at
/// `1 - holdout_frac` of the rows.
pub fn read_dataset(path: impl AsRef<Path>, holdout_frac: f64) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != DATASET_HEADER {
        return Err(Error::Config(format!("unexpected dataset header {header:?}")));
    }
    let mut samples = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| Error::Config(format!("bad number {v:?}: {e}"))))
            .collect::<Result<_>>()?;
        samples.push(Sample {
            x: vals[..3].to_vec(),
            target: vals[3],
            err_priority: 0.0,
        });
    }
    let n = samples.len();
    let split = n - (holdout_frac * n as f64).round() as usize;
    Ok(Dataset { samples, split })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Dims;

    #[test]
    fn dataset_shapes() {
        let d = generate_dataset(&DatasetConfig::default()).unwrap();
        assert_eq!(d.samples.len(), 1000);
        assert_eq!(d.split, 800);
        for w in d.samples.windows(2) {
            assert_eq!(w[1].x[1], w[0].target);
        }
        for s in &d.samples {
            assert_eq!(s.x[2], s.target);
        }
    }

    #[test]
    fn single_sample_is_one_nominal_step() {
        let cfg = DatasetConfig {
            n: 1,
            noise_std: 0.0,
            input_delay: 0,
            holdout_frac: 0.0,
            ..DatasetConfig::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        assert_eq!(d.samples.len(), 1);
        let p = PlantParams::nominal(cfg.ts, 0);
        let s = nominal_step(&PlantState::new(&p), d.samples[0].x[0], 0.0, cfg.ts, 0).unwrap();
        assert_eq!(d.samples[0].target, s.output(&p));
    }

    #[test]
    fn zero_excitation_gives_zero_targets() {
        let cfg = DatasetConfig {
            excitation: Excitation::Zero,
            noise_std: 0.0,
            ..DatasetConfig::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        assert!(d.samples.iter().all(|s| s.target == 0.0));
    }

    #[test]
    fn deploy_input_repeats_previous_output() {
        assert_eq!(deploy_input(0.5, 0.2), vec![0.5, 0.2, 0.2]);
        let teacher = Sample {
            x: vec![0.5, 0.2, 0.2],
            target: 0.2,
            err_priority: 0.0,
        };
        assert_eq!(deploy_input(teacher.x[0], teacher.x[1]), teacher.x);
    }

    #[test]
    fn fit_metric_examples() {
        let r = fit_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((r.mse, r.r2), (0.0, 1.0));
        let r = fit_metrics(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.r2, 0.0);
        let r = fit_metrics(&[0.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!((r.mse, r.mae, r.r2), (0.5, 0.5, 0.5));
        assert!((r.rmse * r.rmse - r.mse).abs() < 1e-15);
        assert!(fit_metrics(&[1.0, 1.0], &[1.0, 1.0]).unwrap().r2.is_nan());
        assert!(fit_metrics(&[], &[]).is_err());
    }

    #[test]
    fn perfect_net_is_left_alone() {
        // zero network on zero data: every residual and gradient vanishes
        let net = TgrbfState::zeros(Dims { n_in: 3, m: 2, p: 2 }).unwrap();
        let cfg = DatasetConfig {
            n: 64,
            excitation: Excitation::Zero,
            noise_std: 0.0,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let (out, _) = train_offline(
            &net,
            &data,
            &TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.flatten(), net.flatten());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let d = generate_dataset(&DatasetConfig {
            n: 50,
            ..DatasetConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_dataset(&d, &path).unwrap();
        let back = read_dataset(&path, 0.2).unwrap();
        assert_eq!(back, d);
    }
}
