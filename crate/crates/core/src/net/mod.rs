//! Temporal-gated RBF network.
//!
//! Two branches see the same input `x`:
//!
//! * an RBF branch, `y_rbf = Σ w_i · exp(-‖x - c_i‖² / (2 b_i²))`;
//! * a linearised GRU (LGRU) whose gates are hard-clamped affine maps and
//!   whose candidate state is affine, read out linearly to `y_gru`.
//!
//! A sigmoid gate over `[x; h_prev]` mixes them: `y = g·y_rbf + (1-g)·y_gru`.
//! All matrices are stored row-major in flat vectors.

mod checkpoint;
mod jacobian;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use params::{ParamLayout, ParamVector, Segment, SegmentKind};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Initial value of the fusion gate bias.
pub const GATE_BIAS_INIT: f64 = 0.5;

/// Lower bound on RBF widths chosen by [`TgrbfState::init`].
pub const MIN_INIT_WIDTH: f64 = 1e-2;

/// Half-range of the uniform initialisation of gate and LGRU weights.
pub const INIT_WEIGHT_RANGE: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_in: usize,
    pub m: usize,
    pub p: usize,
}

impl Dims {
    pub fn zeta(&self) -> usize {
        self.n_in + self.p
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidParameter("RBF branch needs m >= 1".into()));
        }
        if self.n_in == 0 {
            return Err(Error::InvalidParameter("input size must be >= 1".into()));
        }
        if self.p == 0 {
            return Err(Error::InvalidParameter("hidden size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RbfParams {
    pub n_in: usize,
    /// m × n_in, row i is center `c_i`.
    pub centers: Vec<f64>,
    pub widths: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RbfParams {
    pub fn m(&self) -> usize {
        self.weights.len()
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.n_in..(i + 1) * self.n_in]
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if m == 0 {
            return Err(Error::InvalidParameter("RBF branch needs m >= 1".into()));
        }
        check_len("rbf widths", m, self.widths.len())?;
        check_len("rbf centers", m * self.n_in, self.centers.len())?;
        if let Some(b) = self.widths.iter().find(|b| !(**b > 0.0) || !b.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "RBF width must be positive and finite, got {b}"
            )));
        }
        if self.centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("non-finite RBF center".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LgruParams {
    pub n_in: usize,
    pub p: usize,
    /// p × (n_in + p) each.
    pub w_z: Vec<f64>,
    pub w_r: Vec<f64>,
    pub w_h: Vec<f64>,
    pub b_z: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_h: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

impl LgruParams {
    pub fn zeros(n_in: usize, p: usize) -> Self {
        let z = n_in + p;
        LgruParams {
            n_in,
            p,
            w_z: vec![0.0; p * z],
            w_r: vec![0.0; p * z],
            w_h: vec![0.0; p * z],
            b_z: vec![0.0; p],
            b_r: vec![0.0; p],
            b_h: vec![0.0; p],
            w_out: vec![0.0; p],
            b_out: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let z = self.n_in + self.p;
        check_len("update gate weights", self.p * z, self.w_z.len())?;
        check_len("reset gate weights", self.p * z, self.w_r.len())?;
        check_len("candidate weights", self.p * z, self.w_h.len())?;
        check_len("update gate bias", self.p, self.b_z.len())?;
        check_len("reset gate bias", self.p, self.b_r.len())?;
        check_len("candidate bias", self.p, self.b_h.len())?;
        check_len("readout weights", self.p, self.w_out.len())?;
        let all = self
            .w_z
            .iter()
            .chain(&self.w_r)
            .chain(&self.w_h)
            .chain(&self.b_z)
            .chain(&self.b_r)
            .chain(&self.b_h)
            .chain(&self.w_out)
            .chain(std::iter::once(&self.b_out));
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite LGRU parameter".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    /// Length n_in + p.
    pub w_g: Vec<f64>,
    pub b_g: f64,
}

impl GateParams {
    pub fn new(zeta: usize) -> Self {
        GateParams {
            w_g: vec![0.0; zeta],
            b_g: GATE_BIAS_INIT,
        }
    }
}

/// Intermediate values of one LGRU step.
#[derive(Clone, Debug, PartialEq)]
pub struct LgruStep {
    pub pre_z: Vec<f64>,
    pub pre_r: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
    pub h_next: Vec<f64>,
    pub y_gru: f64,
}

/// Everything computed by one forward evaluation; consumed by the Jacobians.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub phi: Vec<f64>,
    pub y_rbf: f64,
    pub pre_z: Vec<f64>,
    pub pre_r: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
    pub h_next: Vec<f64>,
    pub y_gru: f64,
    pub g: f64,
    pub y: f64,
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Derivative of `clamp(v, 0, 1)`; zero at and beyond the kinks.
pub(crate) fn clamp_grad(v: f64) -> f64 {
    if v > 0.0 && v < 1.0 {
        1.0
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn affine(w: &[f64], b: &[f64], v: &[f64]) -> Vec<f64> {
    let cols = v.len();
    b.iter()
        .enumerate()
        .map(|(i, bi)| dot(&w[i * cols..(i + 1) * cols], v) + bi)
        .collect()
}

/// Gaussian kernel `exp(-‖x - center‖² / (2 width²))`.
pub fn rbf_kernel(x: &[f64], center: &[f64], width: f64) -> Result<f64> {
    if !(width > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "RBF width must be positive, got {width}"
        )));
    }
    check_len("rbf center", x.len(), center.len())?;
    let d2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
    Ok((-d2 / (2.0 * width * width)).exp())
}

/// RBF branch output and the kernel activations.
pub fn rbf_forward(x: &[f64], p: &RbfParams) -> Result<(f64, Vec<f64>)> {
    p.validate()?;
    check_len("rbf input", p.n_in, x.len())?;
    let phi = (0..p.m())
        .map(|i| rbf_kernel(x, p.center(i), p.widths[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok((dot(&p.weights, &phi), phi))
}

/// One LGRU step from `h_prev`.
pub fn lgru_step(x: &[f64], h_prev: &[f64], p: &LgruParams) -> Result<LgruStep> {
    check_len("lgru input", p.n_in, x.len())?;
    check_len("lgru hidden state", p.p, h_prev.len())?;
    p.validate()?;

    let zeta: Vec<f64> = x.iter().chain(h_prev).copied().collect();
    let pre_z = affine(&p.w_z, &p.b_z, &zeta);
    let pre_r = affine(&p.w_r, &p.b_r, &zeta);
    let z: Vec<f64> = pre_z.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let r: Vec<f64> = pre_r.iter().map(|v| v.clamp(0.0, 1.0)).collect();

    let zeta_r: Vec<f64> = x
        .iter()
        .copied()
        .chain(r.iter().zip(h_prev).map(|(r, h)| r * h))
        .collect();
    let n = affine(&p.w_h, &p.b_h, &zeta_r);
    let h_next: Vec<f64> = (0..p.p)
        .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * n[i])
        .collect();
    let y_gru = dot(&p.w_out, &h_next) + p.b_out;

    Ok(LgruStep {
        pre_z,
        pre_r,
        z,
        r,
        n,
        h_next,
        y_gru,
    })
}

/// Fusion gate `sigmoid(w_g · [x; h_prev] + b_g)`.
pub fn gate_value(x: &[f64], h_prev: &[f64], p: &GateParams) -> Result<f64> {
    check_len("gate weights", x.len() + h_prev.len(), p.w_g.len())?;
    let n_in = x.len();
    let act = dot(&p.w_g[..n_in], x) + dot(&p.w_g[n_in..], h_prev) + p.b_g;
    Ok(sigmoid(act))
}

/// Network weights plus recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub struct TgrbfState {
    pub rbf: RbfParams,
    pub lgru: LgruParams,
    pub gate: GateParams,
    pub h: Vec<f64>,
    pub h_init: Vec<f64>,
}

impl TgrbfState {
    /// A network with zero weights, unit widths, zero centers and the gate
    /// bias at its initial value. Mostly useful as a starting point for tests.
    pub fn zeros(dims: Dims) -> Result<Self> {
        dims.validate()?;
        let Dims { n_in, m, p } = dims;
        Ok(TgrbfState {
            rbf: RbfParams {
                n_in,
                centers: vec![0.0; m * n_in],
                widths: vec![1.0; m],
                weights: vec![0.0; m],
            },
            lgru: LgruParams::zeros(n_in, p),
            gate: GateParams::new(n_in + p),
            h: vec![0.0; p],
            h_init: vec![0.0; p],
        })
    }

    /// Data-driven initialisation.
    ///
    /// Centers are drawn uniformly from the bounding box of `inputs`; every
    /// width is half the mean nearest-neighbour distance between centers
    /// (at least [`MIN_INIT_WIDTH`]). Gate, LGRU and output weights are
    /// uniform in ±[`INIT_WEIGHT_RANGE`]; biases are zero except the gate bias.
    pub fn init<R: Rng + ?Sized>(dims: Dims, inputs: &[Vec<f64>], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let Dims { n_in, m, .. } = dims;
        let (lo, hi) = bounding_box(n_in, inputs)?;

        for i in 0..m {
            for j in 0..n_in {
                net.rbf.centers[i * n_in + j] = if hi[j] > lo[j] {
                    rng.random_range(lo[j]..hi[j])
                } else {
                    lo[j]
                };
            }
        }
        let width = if m > 1 {
            let mean_nn = (0..m)
                .map(|i| {
                    (0..m)
                        .filter(|&k| k != i)
                        .map(|k| {
                            net.rbf
                                .center(i)
                                .iter()
                                .zip(net.rbf.center(k))
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>()
                                .sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / m as f64;
            0.5 * mean_nn
        } else {
            // single kernel: half the box diagonal
            0.5 * lo
                .iter()
                .zip(&hi)
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                .sqrt()
        };
        net.rbf.widths.fill(width.max(MIN_INIT_WIDTH));

        let mut uniform = |v: &mut [f64]| {
            v.iter_mut()
                .for_each(|w| *w = rng.random_range(-INIT_WEIGHT_RANGE..INIT_WEIGHT_RANGE))
        };
        uniform(&mut net.rbf.weights);
        uniform(&mut net.lgru.w_z);
        uniform(&mut net.lgru.w_r);
        uniform(&mut net.lgru.w_h);
        uniform(&mut net.lgru.w_out);
        uniform(&mut net.gate.w_g);
        net.gate.b_g = GATE_BIAS_INIT;
        Ok(net)
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n_in: self.rbf.n_in,
            m: self.rbf.m(),
            p: self.lgru.p,
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.dims())
    }

    /// Restores the hidden state to `h_init`; call at the start of every
    /// independent sequence.
    pub fn reset(&mut self) {
        self.h.clone_from(&self.h_init);
    }

    pub fn count_parameters(&self) -> usize {
        count_parameters(self.dims())
    }

    /// Evaluates the network from the current hidden state without advancing it.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.forward_from(&self.h, x)
    }

    /// Evaluates the network from an explicit previous hidden state.
    pub fn forward_from(&self, h_prev: &[f64], x: &[f64]) -> Result<ForwardTrace> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite network input {x:?}")));
        }
        check_len("network input", self.rbf.n_in, x.len())?;
        let (y_rbf, phi) = rbf_forward(x, &self.rbf)?;
        let step = lgru_step(x, h_prev, &self.lgru)?;
        let g = gate_value(x, h_prev, &self.gate)?;
        let y = g * y_rbf + (1.0 - g) * step.y_gru;
        Ok(ForwardTrace {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            phi,
            y_rbf,
            pre_z: step.pre_z,
            pre_r: step.pre_r,
            z: step.z,
            r: step.r,
            n: step.n,
            h_next: step.h_next,
            y_gru: step.y_gru,
            g,
            y,
        })
    }

    /// Evaluates and advances the hidden state.
    pub fn step(&mut self, x: &[f64]) -> Result<ForwardTrace> {
        let trace = self.forward(x)?;
        self.h.clone_from(&trace.h_next);
        Ok(trace)
    }

    pub fn flatten(&self) -> ParamVector {
        let layout = self.layout();
        let mut values = vec![0.0; layout.len()];
        for seg in layout.segments() {
            values[seg.range()].copy_from_slice(self.segment(seg.kind));
        }
        ParamVector { values, layout }
    }

    /// Overwrites all weights from a flat vector in [`ParamLayout`] order.
    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        let layout = self.layout();
        check_len("parameter vector", layout.len(), values.len())?;
        for seg in layout.segments() {
            self.segment_mut(seg.kind)
                .copy_from_slice(&values[seg.range()]);
        }
        Ok(())
    }

    pub fn segment(&self, kind: SegmentKind) -> &[f64] {
        use SegmentKind::*;
        match kind {
            RbfWeights => &self.rbf.weights,
            RbfCenters => &self.rbf.centers,
            UpdateGateWeights => &self.lgru.w_z,
            ResetGateWeights => &self.lgru.w_r,
            CandidateWeights => &self.lgru.w_h,
            GateWeights => &self.gate.w_g,
            GateBias => std::slice::from_ref(&self.gate.b_g),
            ReadoutWeights => &self.lgru.w_out,
            ReadoutBias => std::slice::from_ref(&self.lgru.b_out),
            RbfWidths => &self.rbf.widths,
            UpdateGateBias => &self.lgru.b_z,
            ResetGateBias => &self.lgru.b_r,
            CandidateBias => &self.lgru.b_h,
        }
    }

    pub fn segment_mut(&mut self, kind: SegmentKind) -> &mut [f64] {
        use SegmentKind::*;
        match kind {
            RbfWeights => &mut self.rbf.weights,
            RbfCenters => &mut self.rbf.centers,
            UpdateGateWeights => &mut self.lgru.w_z,
            ResetGateWeights => &mut self.lgru.w_r,
            CandidateWeights => &mut self.lgru.w_h,
            GateWeights => &mut self.gate.w_g,
            GateBias => std::slice::from_mut(&mut self.gate.b_g),
            ReadoutWeights => &mut self.lgru.w_out,
            ReadoutBias => std::slice::from_mut(&mut self.lgru.b_out),
            RbfWidths => &mut self.rbf.widths,
            UpdateGateBias => &mut self.lgru.b_z,
            ResetGateBias => &mut self.lgru.b_r,
            CandidateBias => &mut self.lgru.b_h,
        }
    }
}

/// Number of trainable scalars for the given dimensions.
pub fn count_parameters(dims: Dims) -> usize {
    let Dims { n_in, m, p } = dims;
    let rbf = m * n_in + 2 * m;
    let lgru = 3 * (p * (n_in + p) + p);
    let readout = p + 1;
    let gate = n_in + p + 1;
    rbf + lgru + readout + gate
}

/// Checked variant of [`count_parameters`] that rejects degenerate sizes.
pub fn try_count_parameters(dims: Dims) -> Result<usize> {
    dims.validate()?;
    Ok(count_parameters(dims))
}

fn bounding_box(n_in: usize, inputs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput(
            "initialisation needs at least one input sample".into(),
        ));
    }
    let mut lo = vec![f64::INFINITY; n_in];
    let mut hi = vec![f64::NEG_INFINITY; n_in];
    for x in inputs {
        check_len("initialisation sample", n_in, x.len())?;
        for j in 0..n_in {
            lo[j] = lo[j].min(x[j]);
            hi[j] = hi[j].max(x[j]);
        }
    }
    Ok((lo, hi))
}
