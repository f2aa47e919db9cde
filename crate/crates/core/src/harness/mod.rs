//! Closed-loop scenarios, metrics, controller comparison and CSV export.

mod config;
mod metrics;
mod run;

use std::fs;
use std::path::Path;

pub use config::{
    ControllerConfig, ControllerKind, DisturbanceConfig, FloorMode, IdentifyConfig, NcConfig, NetworkConfig,
    PidConfig, PidTuning, PlantConfig, ScenarioConfig,
};
pub use metrics::{compute_metrics, metric_pairs, MetricsReport, SETTLING_BAND};
pub use run::{
    compare_controllers, identify, prepare_network, run_checked, run_scenario, Comparison, ComparisonRow, Ordering,
    RunTrace, TraceMeta, TraceRow, DIVERGENCE_LIMIT,
};

use crate::error::{Error, Result};

pub const TRACE_HEADER: [&str; 11] = ["t", "r", "y", "e", "u", "y_pred", "k1", "k2", "g", "triggered", "eta"];
pub const CONTROLLER_HEADER: [&str; 5] = ["k1", "k2", "u", "dym_du", "e"];
pub const METRICS_HEADER: [&str; 2] = ["metric", "value"];
pub const COMPARISON_HEADER: [&str; 9] = [
    "controller",
    "iae",
    "ise",
    "itae",
    "overshoot_pct",
    "settling_time_s",
    "settled",
    "update_count",
    "aborted",
];

/// Decimal with 17 significant digits; parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn flag(b: bool) -> String {
    u8::from(b).to_string()
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trace_csv(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_HEADER)?;
    for r in rows {
        w.write_record([
            fmt_f64(r.t),
            fmt_f64(r.r),
            fmt_f64(r.y),
            fmt_f64(r.e),
            fmt_f64(r.u),
            fmt_f64(r.y_pred),
            fmt_f64(r.k1),
            fmt_f64(r.k2),
            fmt_f64(r.g),
            flag(r.triggered),
            fmt_f64(r.eta),
        ])?;
    }
    finish(w, path)
}

/// Reads a trace CSV written by [`write_trace_csv`]; `dym_du` is not stored
/// there and comes back as zero.
pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != TRACE_HEADER {
        return Err(Error::Config(format!("unexpected trace header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad number {s:?}: {e}"))))
            .collect::<Result<_>>()?;
        rows.push(TraceRow {
            t: v[0],
            r: v[1],
            y: v[2],
            e: v[3],
            u: v[4],
            y_pred: v[5],
            k1: v[6],
            k2: v[7],
            g: v[8],
            triggered: v[9] != 0.0,
            eta: v[10],
            dym_du: 0.0,
        });
    }
    Ok(rows)
}

pub fn write_controller_csv(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CONTROLLER_HEADER)?;
    for r in rows {
        w.write_record([fmt_f64(r.k1), fmt_f64(r.k2), fmt_f64(r.u), fmt_f64(r.dym_du), fmt_f64(r.e)])?;
    }
    finish(w, path)
}

pub fn write_metrics_csv(m: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for (name, v) in metric_pairs(m) {
        w.write_record([name.to_string(), fmt_f64(v)])?;
    }
    finish(w, path)
}

pub fn write_comparison_csv(c: &Comparison, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COMPARISON_HEADER)?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, fmt_f64);
    for row in &c.rows {
        let m = &row.metrics;
        w.write_record([
            row.controller.name().to_string(),
            fmt_f64(m.iae),
            fmt_f64(m.ise),
            fmt_f64(m.itae),
            opt(m.overshoot_pct),
            opt(m.settling_time_s),
            flag(m.settled),
            m.update_count.to_string(),
            flag(row.aborted),
        ])?;
    }
    finish(w, path)
}

/// Writes `trace.csv`, `controller.csv`, `updates.csv`, `metrics.csv` and
/// `meta.json` into `dir`, prefixing file names with `prefix`.
pub fn export_run(trace: &RunTrace, metrics: &MetricsReport, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_trace_csv(&trace.rows, dir.join(format!("{prefix}trace.csv")))?;
    write_controller_csv(&trace.rows, dir.join(format!("{prefix}controller.csv")))?;
    crate::online::write_update_events(&trace.events, dir.join(format!("{prefix}updates.csv")))?;
    write_metrics_csv(metrics, dir.join(format!("{prefix}metrics.csv")))?;
    let meta_path = dir.join(format!("{prefix}meta.json"));
    let text = serde_json::to_string_pretty(&trace.meta)?;
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
}

/// Writes the comparison table and every run's files under `dir`.
pub fn export_comparison(c: &Comparison, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_comparison_csv(c, dir.join("comparison.csv"))?;
    for (row, trace) in c.rows.iter().zip(&c.traces) {
        export_run(trace, &row.metrics, dir, &format!("{}_", row.controller.name()))?;
    }
    let path = dir.join("orderings.json");
    let text = serde_json::to_string_pretty(&c.orderings)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456789.123, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(1.0 / 3.0), "3.3333333333333331e-1");
    }

    #[test]
    fn trace_csv_round_trip_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trace_csv(&[], &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "t,r,y,e,u,y_pred,k1,k2,g,triggered,eta\n");

        let rows = vec![
            TraceRow {
                t: 0.001,
                r: 1.0,
                y: 0.123456789,
                e: 1.0 - 0.123456789,
                u: -3.3,
                y_pred: 0.1,
                k1: 1.5,
                k2: 0.8,
                g: 0.6,
                triggered: true,
                eta: 1e-4,
                dym_du: 0.0,
            };
            3
        ];
        write_trace_csv(&rows, &path).unwrap();
        assert_eq!(read_trace_csv(&path).unwrap(), rows);
    }
}
