//! Analytic derivatives of the network output.
//!
//! Parameter gradients are single-step: the previous hidden state is held
//! fixed. Clamp derivatives are 1 strictly inside (0, 1) and 0 elsewhere.

use super::{clamp_grad, ForwardTrace, SegmentKind, TgrbfState};

impl TgrbfState {
    /// `∂y/∂W` in [`ParamLayout`](super::ParamLayout) order.
    pub fn jacobian_params(&self, trace: &ForwardTrace) -> Vec<f64> {
        let layout = self.layout();
        let mut out = vec![0.0; layout.len()];
        let n_in = self.rbf.n_in;
        let g = trace.g;

        // RBF branch, scaled by the gate
        let w_off = layout.offset(SegmentKind::RbfWeights);
        let c_off = layout.offset(SegmentKind::RbfCenters);
        let b_off = layout.offset(SegmentKind::RbfWidths);
        for (i, &phi) in trace.phi.iter().enumerate() {
            let b = self.rbf.widths[i];
            let wi = self.rbf.weights[i];
            out[w_off + i] = g * phi;
            let center = self.rbf.center(i);
            let mut d2 = 0.0;
            for j in 0..n_in {
                let d = trace.x[j] - center[j];
                d2 += d * d;
                out[c_off + i * n_in + j] = g * wi * phi * d / (b * b);
            }
            out[b_off + i] = g * wi * phi * d2 / (b * b * b);
        }

        // readout and LGRU, scaled by (1 - g)
        let a = 1.0 - g;
        let ro = layout.offset(SegmentKind::ReadoutWeights);
        for (k, h) in trace.h_next.iter().enumerate() {
            out[ro + k] = a * h;
        }
        out[layout.offset(SegmentKind::ReadoutBias)] = a;
        let dh: Vec<f64> = self.lgru.w_out.iter().map(|w| a * w).collect();
        self.accumulate_hidden_param_grad(trace, &dh, &mut out);

        // fusion gate
        let dg = (trace.y_rbf - trace.y_gru) * g * (1.0 - g);
        let gw = layout.offset(SegmentKind::GateWeights);
        for (j, v) in zeta(trace).enumerate() {
            out[gw + j] = dg * v;
        }
        out[layout.offset(SegmentKind::GateBias)] = dg;
        out
    }

    /// `∂y/∂x` through the kernels, the LGRU step and the gate.
    pub fn jacobian_input(&self, trace: &ForwardTrace) -> Vec<f64> {
        let n_in = self.rbf.n_in;
        let zeta_len = n_in + self.lgru.p;
        let g = trace.g;
        let mut out = vec![0.0; n_in];

        for (i, &phi) in trace.phi.iter().enumerate() {
            let b = self.rbf.widths[i];
            let coef = g * self.rbf.weights[i] * phi / (b * b);
            for (j, c) in self.rbf.center(i).iter().enumerate() {
                out[j] += coef * (c - trace.x[j]);
            }
        }

        let dg = (trace.y_rbf - trace.y_gru) * g * (1.0 - g);
        for j in 0..n_in {
            out[j] += dg * self.gate.w_g[j];
        }

        let a = 1.0 - g;
        let dh: Vec<f64> = self.lgru.w_out.iter().map(|w| a * w).collect();
        let dr = self.reset_gate_sensitivity(trace, &dh);
        let p = self.lgru.p;
        for i in 0..p {
            let row = i * zeta_len;
            let via_n = dh[i] * trace.z[i];
            let via_z = dh[i] * (trace.n[i] - trace.h_prev[i]) * clamp_grad(trace.pre_z[i]);
            let via_r = dr[i] * clamp_grad(trace.pre_r[i]);
            for j in 0..n_in {
                out[j] += via_n * self.lgru.w_h[row + j]
                    + via_z * self.lgru.w_z[row + j]
                    + via_r * self.lgru.w_r[row + j];
            }
        }
        out
    }

    /// `∂y/∂h_prev`; used when a replayed sample's hidden state is itself a
    /// function of the parameters.
    pub fn jacobian_hidden(&self, trace: &ForwardTrace) -> Vec<f64> {
        let n_in = self.rbf.n_in;
        let p = self.lgru.p;
        let zeta_len = n_in + p;
        let g = trace.g;
        let dg = (trace.y_rbf - trace.y_gru) * g * (1.0 - g);
        let a = 1.0 - g;
        let dh: Vec<f64> = self.lgru.w_out.iter().map(|w| a * w).collect();
        let dr = self.reset_gate_sensitivity(trace, &dh);

        let mut out: Vec<f64> = (0..p)
            .map(|j| dg * self.gate.w_g[n_in + j] + dh[j] * (1.0 - trace.z[j]))
            .collect();
        for i in 0..p {
            let row = i * zeta_len + n_in;
            let via_n = dh[i] * trace.z[i];
            let via_z = dh[i] * (trace.n[i] - trace.h_prev[i]) * clamp_grad(trace.pre_z[i]);
            let via_r = dr[i] * clamp_grad(trace.pre_r[i]);
            for j in 0..p {
                out[j] += via_n * self.lgru.w_h[row + j] * trace.r[j]
                    + via_z * self.lgru.w_z[row + j]
                    + via_r * self.lgru.w_r[row + j];
            }
        }
        out
    }

    /// Adds `Σ_k coef_k · ∂h_next_k/∂W` into `out` (layout order). Only the
    /// LGRU gate and candidate segments are touched.
    pub fn accumulate_hidden_param_grad(&self, trace: &ForwardTrace, coef: &[f64], out: &mut [f64]) {
        let layout = self.layout();
        let n_in = self.rbf.n_in;
        let p = self.lgru.p;
        let zeta_len = n_in + p;
        let zeta: Vec<f64> = zeta(trace).collect();
        let zeta_r: Vec<f64> = trace
            .x
            .iter()
            .copied()
            .chain(trace.r.iter().zip(&trace.h_prev).map(|(r, h)| r * h))
            .collect();
        let dr = self.reset_gate_sensitivity(trace, coef);

        let wz = layout.offset(SegmentKind::UpdateGateWeights);
        let wr = layout.offset(SegmentKind::ResetGateWeights);
        let wh = layout.offset(SegmentKind::CandidateWeights);
        let bz = layout.offset(SegmentKind::UpdateGateBias);
        let br = layout.offset(SegmentKind::ResetGateBias);
        let bh = layout.offset(SegmentKind::CandidateBias);
        for k in 0..p {
            let dz = coef[k] * (trace.n[k] - trace.h_prev[k]) * clamp_grad(trace.pre_z[k]);
            let dn = coef[k] * trace.z[k];
            let dre = dr[k] * clamp_grad(trace.pre_r[k]);
            for j in 0..zeta_len {
                out[wz + k * zeta_len + j] += dz * zeta[j];
                out[wh + k * zeta_len + j] += dn * zeta_r[j];
                out[wr + k * zeta_len + j] += dre * zeta[j];
            }
            out[bz + k] += dz;
            out[bh + k] += dn;
            out[br + k] += dre;
        }
    }

    /// Sensitivity of `Σ_k coef_k h_next_k` to the clamped reset gate `r`.
    fn reset_gate_sensitivity(&self, trace: &ForwardTrace, coef: &[f64]) -> Vec<f64> {
        let n_in = self.rbf.n_in;
        let p = self.lgru.p;
        let zeta_len = n_in + p;
        (0..p)
            .map(|j| {
                let s: f64 = (0..p)
                    .map(|i| coef[i] * trace.z[i] * self.lgru.w_h[i * zeta_len + n_in + j])
                    .sum();
                s * trace.h_prev[j]
            })
            .collect()
    }
}

fn zeta(trace: &ForwardTrace) -> impl Iterator<Item = f64> + '_ {
    trace.x.iter().chain(&trace.h_prev).copied()
}
