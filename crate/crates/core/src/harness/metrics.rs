//! Tracking metrics over a closed-loop trace.

use serde::Serialize;

use crate::plant::{ReferenceKind, ReferenceSpec};

use super::TraceRow;

/// Width of the settling band relative to the final reference value.
pub const SETTLING_BAND: f64 = 0.02;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub iae: f64,
    pub ise: f64,
    pub itae: f64,
    /// Step references only; `None` for sine runs or a zero final value.
    pub overshoot_pct: Option<f64>,
    /// Step references only. Equals the run duration when `settled` is false.
    pub settling_time_s: Option<f64>,
    pub settled: bool,
    pub update_count: usize,
    /// Fraction of steps with an online update after t = 1 s.
    pub update_fraction_after_1s: f64,
    /// Mean squared prediction error `y − y_pred` over the whole run.
    pub fit_mse_online: f64,
    /// Same over the final half of the run.
    pub fit_mse_final_half: f64,
}

/// Integral metrics with rectangle rule, overshoot and 2% settling.
pub fn compute_metrics(rows: &[TraceRow], reference: &ReferenceSpec, ts: f64) -> MetricsReport {
    if rows.is_empty() {
        return MetricsReport {
            settled: true,
            ..MetricsReport::default()
        };
    }
    let mut m = MetricsReport::default();
    for row in rows {
        let a = row.e.abs();
        m.iae += a * ts;
        m.ise += row.e * row.e * ts;
        m.itae += row.t * a * ts;
    }
    m.update_count = rows.iter().filter(|r| r.triggered).count();
    let late: Vec<&TraceRow> = rows.iter().filter(|r| r.t >= 1.0).collect();
    m.update_fraction_after_1s = if late.is_empty() {
        0.0
    } else {
        late.iter().filter(|r| r.triggered).count() as f64 / late.len() as f64
    };
    let sq = |rs: &[TraceRow]| rs.iter().map(|r| (r.y - r.y_pred).powi(2)).sum::<f64>() / rs.len() as f64;
    m.fit_mse_online = sq(rows);
    m.fit_mse_final_half = sq(&rows[rows.len() / 2..]);

    m.settled = true;
    if reference.kind == ReferenceKind::Step {
        let r_final = reference.amplitude;
        if r_final != 0.0 {
            let peak = rows.iter().map(|r| r.y - r_final).fold(f64::NEG_INFINITY, f64::max);
            m.overshoot_pct = Some((100.0 * peak / r_final.abs()).max(0.0));
        }
        let band = SETTLING_BAND * r_final.abs();
        let duration = rows.len() as f64 * ts;
        let last_out = rows.iter().rposition(|r| (r.y - r_final).abs() > band);
        let (t, settled) = match last_out {
            None => (0.0, true),
            Some(i) if i + 1 < rows.len() => (rows[i + 1].t, true),
            Some(_) => (duration, false),
        };
        m.settling_time_s = Some(t);
        m.settled = settled;
    }
    m
}

/// `(metric, value)` pairs in the order written to the metrics CSV.
pub fn metric_pairs(m: &MetricsReport) -> Vec<(&'static str, f64)> {
    let mut out = vec![("iae", m.iae), ("ise", m.ise), ("itae", m.itae)];
    if let Some(v) = m.overshoot_pct {
        out.push(("overshoot_pct", v));
    }
    if let Some(v) = m.settling_time_s {
        out.push(("settling_time_s", v));
        out.push(("settled", if m.settled { 1.0 } else { 0.0 }));
    }
    out.push(("update_count", m.update_count as f64));
    out.push(("update_fraction_after_1s", m.update_fraction_after_1s));
    out.push(("fit_mse_online", m.fit_mse_online));
    out.push(("fit_mse_final_half", m.fit_mse_final_half));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(ys: &[f64], r: f64, ts: f64) -> Vec<TraceRow> {
        ys.iter()
            .enumerate()
            .map(|(k, &y)| TraceRow {
                t: k as f64 * ts,
                r,
                y,
                e: r - y,
                ..TraceRow::default()
            })
            .collect()
    }

    #[test]
    fn zero_error_gives_zero_metrics() {
        let m = compute_metrics(&rows(&[1.0; 10], 1.0, 0.1), &ReferenceSpec::step(1.0), 0.1);
        assert_eq!((m.iae, m.ise, m.itae), (0.0, 0.0, 0.0));
        assert_eq!(m.overshoot_pct, Some(0.0));
        assert_eq!(m.settling_time_s, Some(0.0));
        assert!(m.settled);
    }

    #[test]
    fn constant_unit_error() {
        let ts = 0.01;
        let n = 50;
        let rs = rows(&vec![0.0; n], 1.0, ts);
        let m = compute_metrics(&rs, &ReferenceSpec::sine(1.0, 1.0), ts);
        assert!((m.iae - n as f64 * ts).abs() < 1e-12);
        assert!((m.ise - n as f64 * ts).abs() < 1e-12);
        let sum_t: f64 = (0..n).map(|k| k as f64 * ts).sum();
        assert!((m.itae - ts * sum_t).abs() < 1e-12);
        assert_eq!(m.overshoot_pct, None);
        assert_eq!(m.settling_time_s, None);
    }

    #[test]
    fn overshoot_and_settling_on_constructed_trace() {
        let ys = [0.0, 0.6, 1.25, 1.1, 1.03, 1.01, 0.995, 1.0];
        let m = compute_metrics(&rows(&ys, 1.0, 0.1), &ReferenceSpec::step(1.0), 0.1);
        assert!((m.overshoot_pct.unwrap() - 25.0).abs() < 1e-9);
        assert!((m.settling_time_s.unwrap() - 0.5).abs() < 1e-12);
        assert!(m.settled);

        let ys = [0.0, 0.5, 0.9, 0.95];
        let m = compute_metrics(&rows(&ys, 1.0, 0.1), &ReferenceSpec::step(1.0), 0.1);
        assert!(!m.settled);
        assert!((m.settling_time_s.unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn zero_final_value_leaves_overshoot_undefined() {
        let m = compute_metrics(&rows(&[0.0, 0.1], 0.0, 0.1), &ReferenceSpec::step(0.0), 0.1);
        assert_eq!(m.overshoot_pct, None);
    }

    #[test]
    fn empty_trace() {
        let m = compute_metrics(&[], &ReferenceSpec::step(1.0), 0.1);
        assert_eq!(m.iae, 0.0);
        assert_eq!(m.update_count, 0);
    }
}
