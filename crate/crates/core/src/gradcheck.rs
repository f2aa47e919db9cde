//! Audit of the analytic Jacobians against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::net::{Dims, ForwardTrace, TgrbfState};
use crate::offline::Sample;
use crate::online::{replay_gradient, replay_traces};

/// Base step of the extrapolated central difference.
pub const FD_STEP: f64 = 1e-4;

/// Pre-activations closer than this to 0 or 1 are treated as at a kink.
pub const KINK_MARGIN: f64 = 1e-3;

/// Magnitude below which an entry's error is measured absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub pairs: usize,
    /// Candidates discarded because a gate pre-activation was near a kink.
    pub rejected: usize,
    pub max_rel_param: f64,
    pub max_rel_input: f64,
    pub max_rel_replay: f64,
}

impl GradcheckReport {
    pub fn max_rel(&self) -> f64 {
        self.max_rel_param.max(self.max_rel_input).max(self.max_rel_replay)
    }
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn near_kink(v: &[f64]) -> bool {
    v.iter().any(|&p| p.abs() < KINK_MARGIN || (p - 1.0).abs() < KINK_MARGIN)
}

/// True if any clamp pre-activation of `t` lies within the kink margin.
pub fn trace_near_kink(t: &ForwardTrace) -> bool {
    near_kink(&t.pre_z) || near_kink(&t.pre_r)
}

/// A random network with every weight, bias and width perturbed so that
/// both gates mix interior and saturated units.
pub fn random_network(dims: Dims, rng: &mut impl Rng) -> Result<TgrbfState> {
    let inputs: Vec<Vec<f64>> = (0..16)
        .map(|_| (0..dims.n_in).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let mut net = TgrbfState::init(dims, &inputs, rng)?;
    for w in net.rbf.widths.iter_mut() {
        *w = rng.random_range(0.4..1.5);
    }
    for b in net.lgru.b_z.iter_mut().chain(net.lgru.b_r.iter_mut()) {
        *b = rng.random_range(-0.2..1.2);
    }
    for b in net.lgru.b_h.iter_mut() {
        *b = rng.random_range(-0.5..0.5);
    }
    net.lgru.b_out = rng.random_range(-0.5..0.5);
    net.gate.b_g = rng.random_range(-1.0..1.0);
    net.h_init = (0..dims.p).map(|_| rng.random_range(-0.5..0.5)).collect();
    net.h = (0..dims.p).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(net)
}

/// Richardson-extrapolated central difference, `(4 D(h) − D(2h)) / 3`,
/// given `f(x + s)` for `s` in `[h, −h, 2h, −2h]`.
fn richardson(f: [f64; 4]) -> f64 {
    let d1 = (f[0] - f[1]) / (2.0 * FD_STEP);
    let d2 = (f[2] - f[3]) / (4.0 * FD_STEP);
    (4.0 * d1 - d2) / 3.0
}

const OFFSETS: [f64; 4] = [FD_STEP, -FD_STEP, 2.0 * FD_STEP, -2.0 * FD_STEP];

fn fd_over_params(net: &TgrbfState, eval: impl Fn(&TgrbfState) -> Result<f64>) -> Result<Vec<f64>> {
    let base = net.flatten().values;
    let mut probe = net.clone();
    let mut values = base.clone();
    let mut out = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut f = [0.0; 4];
        for (fk, off) in f.iter_mut().zip(OFFSETS) {
            values[i] = base[i] + off;
            probe.unflatten(&values)?;
            *fk = eval(&probe)?;
        }
        values[i] = base[i];
        out[i] = richardson(f);
    }
    Ok(out)
}

fn fd_params(net: &TgrbfState, h_prev: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    fd_over_params(net, |n| Ok(n.forward_from(h_prev, x)?.y))
}

fn fd_input(net: &TgrbfState, h_prev: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let mut xp = x.to_vec();
    let mut out = vec![0.0; x.len()];
    for j in 0..x.len() {
        let mut f = [0.0; 4];
        for (fk, off) in f.iter_mut().zip(OFFSETS) {
            xp[j] = x[j] + off;
            *fk = net.forward_from(h_prev, &xp)?.y;
        }
        xp[j] = x[j];
        out[j] = richardson(f);
    }
    Ok(out)
}

fn fd_replay(net: &TgrbfState, sample: &Sample) -> Result<Vec<f64>> {
    fd_over_params(net, |n| Ok(replay_gradient(n, sample)?.0))
}

fn max_rel(a: &[f64], n: &[f64]) -> f64 {
    a.iter().zip(n).map(|(a, n)| rel_error(*a, *n)).fold(0.0, f64::max)
}

/// Replay reconstruction kinks: both the rebuild step and the evaluated step.
fn replay_near_kink(net: &TgrbfState, sample: &Sample) -> Result<bool> {
    let (t0, t1) = replay_traces(net, &sample.x)?;
    Ok(trace_near_kink(&t0) || trace_near_kink(&t1))
}

/// Checks `pairs` random (network, input) pairs with `m, p ∈ 1..=8` and
/// `n_in ∈ 1..=4`. Candidates touching a clamp kink are redrawn.
pub fn run_gradcheck(pairs: usize, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport {
        pairs: 0,
        rejected: 0,
        max_rel_param: 0.0,
        max_rel_input: 0.0,
        max_rel_replay: 0.0,
    };
    while report.pairs < pairs {
        let dims = Dims {
            n_in: rng.random_range(1..=4),
            m: rng.random_range(1..=8),
            p: rng.random_range(1..=8),
        };
        let net = random_network(dims, &mut rng)?;
        let x: Vec<f64> = (0..dims.n_in).map(|_| rng.random_range(-1.5..1.5)).collect();
        let trace = net.forward(&x)?;
        let sample = Sample {
            x: x.clone(),
            target: 0.0,
            err_priority: 0.0,
        };
        if trace_near_kink(&trace) || (dims.n_in == 3 && replay_near_kink(&net, &sample)?) {
            report.rejected += 1;
            continue;
        }
        let jp = net.jacobian_params(&trace);
        let np = fd_params(&net, &net.h, &x)?;
        report.max_rel_param = report.max_rel_param.max(max_rel(&jp, &np));
        let ji = net.jacobian_input(&trace);
        let ni = fd_input(&net, &net.h, &x)?;
        report.max_rel_input = report.max_rel_input.max(max_rel(&ji, &ni));
        // replay rebuilds the state from a three-slot deploy input
        if dims.n_in == 3 {
            let (_, jr) = replay_gradient(&net, &sample)?;
            let nr = fd_replay(&net, &sample)?;
            report.max_rel_replay = report.max_rel_replay.max(max_rel(&jr, &nr));
        }
        report.pairs += 1;
    }
    Ok(report)
}
