//! Closed-loop run engine and controller comparison.

use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::control::{
    adapt_gains, control_law, pid_step, relay_experiment, stability_gain_floor, ziegler_nichols, AdaptStatus,
    GainState, PidState,
};
use crate::error::{Error, Result};
use crate::net::{load_checkpoint, TgrbfState};
use crate::offline::{deploy_input, generate_dataset, train_offline, Sample, TrainOutcome};
use crate::online::{replay_traces, OnlineOptimizer, UpdateEvent};
use crate::plant::{disturbance_at, plant_step, reference_at, PlantState, ReferenceKind, NOISE_ALGORITHM};

use super::config::{ControllerKind, FloorMode, NcConfig, PidTuning, ScenarioConfig};
use super::metrics::{compute_metrics, MetricsReport};

/// Output magnitude beyond which a run is aborted.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: f64,
    pub r: f64,
    pub y: f64,
    pub e: f64,
    pub u: f64,
    pub y_pred: f64,
    pub k1: f64,
    pub k2: f64,
    pub g: f64,
    pub triggered: bool,
    pub eta: f64,
    pub dym_du: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TraceMeta {
    pub scenario: String,
    pub controller: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub noise_algorithm: String,
    /// `Σ d² Ts` over the run.
    pub disturbance_energy: f64,
    /// Gains actually used by the PID baseline.
    pub pid_gains: Option<(f64, f64, f64)>,
    /// Steps at which k1 was below the stability floor.
    pub floor_violations: usize,
    /// Steps at which a learning rate exceeded `2 / |∂y_m/∂u|²`.
    pub eta_cap_violations: usize,
    pub skipped_adaptations: usize,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    pub events: Vec<UpdateEvent>,
    pub meta: TraceMeta,
}

/// Loads the configured checkpoint or identifies a network offline.
pub fn prepare_network(cfg: &ScenarioConfig) -> Result<(TgrbfState, Option<TrainOutcome>)> {
    if let Some(path) = &cfg.network.checkpoint {
        return Ok((load_checkpoint(path)?, None));
    }
    identify(cfg)
}

pub fn identify(cfg: &ScenarioConfig) -> Result<(TgrbfState, Option<TrainOutcome>)> {
    let id = &cfg.network.identify;
    let data = generate_dataset(&id.dataset)?;
    let inputs: Vec<Vec<f64>> = data.train().iter().map(|s| s.x.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(id.init_seed);
    let net = TgrbfState::init(id.dims, &inputs, &mut rng)?;
    let (net, outcome) = train_offline(&net, &data, &id.train)?;
    Ok((net, Some(outcome)))
}

enum Controller {
    Nc {
        gains: GainState,
        cfg: NcConfig,
        adapt: bool,
        u_prev: f64,
        l_u: f64,
        seen: usize,
    },
    Pid(PidState),
}

fn pid_gains(cfg: &ScenarioConfig) -> Result<(f64, f64, f64)> {
    let p = &cfg.controller.pid;
    match p.tuning {
        PidTuning::Manual => Ok((p.kp, p.ki, p.kd)),
        PidTuning::RelayZn => {
            let est = relay_experiment(&cfg.plant_params(), p.relay_amplitude, p.relay_steps)?;
            Ok(ziegler_nichols(&est))
        }
    }
}

/// Runs one closed-loop scenario with `kind` and a copy of `net`.
///
/// Per step: predict the current output from `[u_{k-1}, y_{k-1}, y_{k-1}]`,
/// store the realised sample, possibly update the network, compute the
/// control, then advance the plant. A run whose output leaves
/// `±DIVERGENCE_LIMIT` stops early with `meta.aborted` set.
pub fn run_scenario(cfg: &ScenarioConfig, kind: ControllerKind, net: &TgrbfState) -> Result<(RunTrace, MetricsReport)> {
    cfg.validate()?;
    let steps = cfg.steps()?;
    let plant = cfg.plant_params();
    let dist = cfg.disturbance_spec();
    let ts = cfg.ts;
    let u_max = cfg.actuator_limit;

    let mut net = net.clone();
    net.reset();
    let mut opt = OnlineOptimizer::new(&net, cfg.network.trigger, cfg.seed.wrapping_add(0x5eed))?;

    let nc = cfg.controller.nc;
    let mut meta = TraceMeta {
        scenario: cfg.name.clone(),
        controller: kind.name().into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        noise_algorithm: NOISE_ALGORITHM.into(),
        ..TraceMeta::default()
    };
    let mut ctrl = match kind {
        ControllerKind::TgrbfNc | ControllerKind::NcFixed => Controller::Nc {
            gains: GainState::new(nc.k1, nc.k2, nc.alpha, nc.eta1, nc.eta2, nc.bounds)?,
            cfg: nc,
            adapt: kind == ControllerKind::TgrbfNc,
            u_prev: 0.0,
            l_u: 0.0,
            seen: 0,
        },
        ControllerKind::Pid => {
            let (kp, ki, kd) = pid_gains(cfg)?;
            meta.pid_gains = Some((kp, ki, kd));
            Controller::Pid(PidState::new(kp, ki, kd, cfg.controller.pid.integral_limit))
        }
    };

    let mut state = PlantState::new(&plant);
    let mut y_prev = state.output(&plant);
    let mut u_last = 0.0;
    let mut rows = Vec::with_capacity(steps);

    for k in 0..steps {
        let t = k as f64 * ts;
        let r = reference_at(&cfg.reference, t);
        let y = state.output(&plant);

        let x = deploy_input(u_last, y_prev);
        // same hidden-state convention as replayed samples
        let trace = replay_traces(&net, &x)?.1;
        let dym_du = net.jacobian_input(&trace)[0];
        let pred_err = y - trace.y;
        opt.buffer.push(Sample {
            x,
            target: y,
            err_priority: pred_err.abs(),
        });
        let event = if cfg.network.online {
            opt.online_update(&mut net, pred_err, k as u64)?
        } else {
            None
        };

        let e = r - y;
        let (u, k1, k2) = match &mut ctrl {
            Controller::Nc {
                gains,
                cfg: c,
                adapt,
                u_prev,
                l_u,
                seen,
            } => {
                if *adapt {
                    // running mean of |∂y_m/∂u| as the sensitivity bound
                    *seen += 1;
                    *l_u += (dym_du.abs() - *l_u) / *seen as f64;
                    let mut g = *gains;
                    if let Ok(floor) = stability_gain_floor(*l_u, dym_du) {
                        if c.floor_mode == FloorMode::Bound {
                            g.bounds.k1_min = floor.k1_floor.clamp(c.bounds.k1_min, c.bounds.k1_max);
                        }
                        if g.eta1 >= floor.eta_cap || g.eta2 >= floor.eta_cap {
                            meta.eta_cap_violations += 1;
                            g.eta1 = g.eta1.min(floor.eta_cap);
                            g.eta2 = g.eta2.min(floor.eta_cap);
                        }
                        let (next, status) = adapt_gains(&g, e, dym_du);
                        if status == AdaptStatus::Skipped {
                            meta.skipped_adaptations += 1;
                        }
                        if next.k1 <= floor.k1_floor {
                            meta.floor_violations += 1;
                        }
                        *gains = GainState {
                            eta1: c.eta1,
                            eta2: c.eta2,
                            bounds: g.bounds,
                            ..next
                        };
                    } else {
                        let (next, status) = adapt_gains(gains, e, dym_du);
                        if status == AdaptStatus::Skipped {
                            meta.skipped_adaptations += 1;
                        }
                        *gains = next;
                    }
                }
                let u = if c.incremental {
                    let law = control_law(e, gains, c.control_sign, f64::INFINITY);
                    (*u_prev + c.rate * law).clamp(-u_max, u_max)
                } else {
                    control_law(e, gains, c.control_sign, u_max)
                };
                *u_prev = u;
                (u, gains.k1, gains.k2)
            }
            Controller::Pid(p) => {
                let (u, next) = pid_step(p, e, ts)?;
                *p = next;
                (u.clamp(-u_max, u_max), f64::NAN, f64::NAN)
            }
        };

        let d = disturbance_at(&dist, k as u64, ts);
        meta.disturbance_energy += d * d * ts;
        state = plant_step(&state, u, d, &plant)?;

        rows.push(TraceRow {
            t,
            r,
            y,
            e,
            u,
            y_pred: trace.y,
            k1,
            k2,
            g: trace.g,
            triggered: event.is_some(),
            eta: event.as_ref().map_or(0.0, |ev| ev.eta),
            dym_du,
        });

        let y_next = state.output(&plant);
        if !y_next.is_finite() || y_next.abs() > DIVERGENCE_LIMIT {
            meta.aborted = Some(format!("output {y_next} exceeded {DIVERGENCE_LIMIT} at step {}", k + 1));
            break;
        }
        y_prev = y;
        u_last = u;
    }

    let metrics = compute_metrics(&rows, &cfg.reference, ts);
    Ok((
        RunTrace {
            rows,
            events: opt.events,
            meta,
        },
        metrics,
    ))
}

/// Like [`run_scenario`] but turns an aborted run into an error.
pub fn run_checked(cfg: &ScenarioConfig, kind: ControllerKind, net: &TgrbfState) -> Result<(RunTrace, MetricsReport)> {
    let (trace, m) = run_scenario(cfg, kind, net)?;
    if let Some(reason) = &trace.meta.aborted {
        return Err(Error::Diverged {
            step: trace.rows.len(),
            reason: reason.clone(),
        });
    }
    Ok((trace, m))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ordering {
    pub name: String,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub controller: ControllerKind,
    pub metrics: MetricsReport,
    pub aborted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub orderings: Vec<Ordering>,
    #[serde(skip)]
    pub traces: Vec<RunTrace>,
}

impl Comparison {
    pub fn metrics(&self, kind: ControllerKind) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.controller == kind).map(|r| &r.metrics)
    }
}

/// Settling time with unsettled runs ranked at `+∞`.
fn settling_rank(m: &MetricsReport) -> f64 {
    match m.settling_time_s {
        Some(t) if m.settled => t,
        _ => f64::INFINITY,
    }
}

/// Runs the three controllers on the same plant, disturbance and network.
pub fn compare_controllers(cfg: &ScenarioConfig, net: &TgrbfState) -> Result<Comparison> {
    let results: Vec<Result<(RunTrace, MetricsReport)>> = thread::scope(|s| {
        let handles: Vec<_> = ControllerKind::ALL
            .iter()
            .map(|&kind| s.spawn(move || run_scenario(cfg, kind, net)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::InvalidInput("run panicked".into()))))
            .collect()
    });
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for (kind, res) in ControllerKind::ALL.into_iter().zip(results) {
        let (trace, metrics) = res?;
        rows.push(ComparisonRow {
            controller: kind,
            metrics,
            aborted: trace.meta.aborted.is_some(),
        });
        traces.push(trace);
    }
    let tg = &rows[0].metrics;
    let nc = &rows[1].metrics;
    let pid = &rows[2].metrics;
    let mut orderings = Vec::new();
    let mut add = |name: &str, holds: bool| {
        orderings.push(Ordering {
            name: name.into(),
            holds,
        })
    };
    match cfg.reference.kind {
        ReferenceKind::Step => {
            let os = |m: &MetricsReport| m.overshoot_pct.unwrap_or(f64::NAN);
            add("iae: tgrbf_nc < nc_fixed < pid", tg.iae < nc.iae && nc.iae < pid.iae);
            add(
                "overshoot: tgrbf_nc < nc_fixed < pid",
                os(tg) < os(nc) && os(nc) < os(pid),
            );
            add("settling: tgrbf_nc < pid", settling_rank(tg) < settling_rank(pid));
        }
        ReferenceKind::Sine => {
            add("itae: tgrbf_nc < nc_fixed < pid", tg.itae < nc.itae && nc.itae < pid.itae);
        }
    }
    Ok(Comparison {
        rows,
        orderings,
        traces,
    })
}
