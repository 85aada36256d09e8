//! File formats: JSONL traces, per-episode batch CSV, convergence CSV and
//! filter replay logs. Every float written is rounded to 9 significant digits.

use std::io::{self, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dynamics::Trajectory;
use crate::estimator::{Measurement, ReplayStep};
use crate::simulator::{MetricsReport, RallyOutcome};

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Rounds to 9 significant decimal digits; non-finite values and zero pass
/// through.
pub fn sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(r) = n.as_f64().and_then(|x| serde_json::Number::from_f64(sig9(x))) {
                *n = r;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Compact JSON with every float rounded.
pub fn to_json_rounded<T: Serialize>(value: &T) -> Result<String, OutputError> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    Ok(serde_json::to_string(&v)?)
}

pub fn to_json_pretty_rounded<T: Serialize>(value: &T) -> Result<String, OutputError> {
    let mut v = serde_json::to_value(value)?;
    round_value(&mut v);
    Ok(serde_json::to_string_pretty(&v)?)
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> Result<(), OutputError> {
    for item in items {
        writeln!(w, "{}", to_json_rounded(item)?)?;
    }
    Ok(())
}

fn opt_sig9(x: Option<f64>) -> Option<f64> {
    x.map(sig9)
}

/// One row of the per-episode batch table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub seed: u64,
    pub episode: usize,
    pub detected: bool,
    pub hit: bool,
    pub returned: bool,
    pub success: bool,
    pub e_p: Option<f64>,
    pub e_v: Option<f64>,
    pub e_o: Option<f64>,
    pub e_predpos: Option<f64>,
    pub e_predvel: Option<f64>,
    pub e_predtau: Option<f64>,
    pub n_predictions: usize,
    pub landing_x: Option<f64>,
    pub landing_y: Option<f64>,
    pub landing_z: Option<f64>,
    pub landing_linear_x: Option<f64>,
    pub landing_linear_y: Option<f64>,
    pub landing_linear_z: Option<f64>,
    pub matched_clip: Option<usize>,
}

pub const BATCH_HEADER: [&str; 20] = [
    "seed",
    "episode",
    "detected",
    "hit",
    "returned",
    "success",
    "e_p",
    "e_v",
    "e_o",
    "e_predpos",
    "e_predvel",
    "e_predtau",
    "n_predictions",
    "landing_x",
    "landing_y",
    "landing_z",
    "landing_linear_x",
    "landing_linear_y",
    "landing_linear_z",
    "matched_clip",
];

impl BatchRow {
    pub fn from_outcome(seed: u64, o: &RallyOutcome) -> Self {
        let split = |v: Option<Vector3<f64>>| match v {
            Some(v) => (Some(sig9(v.x)), Some(sig9(v.y)), Some(sig9(v.z))),
            None => (None, None, None),
        };
        let (landing_x, landing_y, landing_z) = split(o.landing);
        let (landing_linear_x, landing_linear_y, landing_linear_z) = split(o.landing_linear_model);
        Self {
            seed,
            episode: o.episode,
            detected: o.detected,
            hit: o.hit,
            returned: o.returned,
            success: o.strike.is_some_and(|s| s.success),
            e_p: opt_sig9(o.strike.map(|s| s.e_p)),
            e_v: opt_sig9(o.strike.map(|s| s.e_v)),
            e_o: opt_sig9(o.strike.map(|s| s.e_o)),
            e_predpos: opt_sig9(o.e_predpos()),
            e_predvel: opt_sig9(o.e_predvel()),
            e_predtau: opt_sig9(o.e_predtau()),
            n_predictions: o.prediction_errors.len(),
            landing_x,
            landing_y,
            landing_z,
            landing_linear_x,
            landing_linear_y,
            landing_linear_z,
            matched_clip: o.matched_clip,
        }
    }
}

/// Aggregate rates and errors over batch rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub n_episodes: usize,
    pub sr_det: f64,
    pub sr_hit: f64,
    pub sr_return: f64,
    pub sr_strike: f64,
    pub e_predpos: Option<f64>,
    pub e_predvel: Option<f64>,
    pub e_predtau: Option<f64>,
}

impl BatchSummary {
    pub fn from_rows(rows: &[BatchRow]) -> Self {
        let n = rows.len();
        let rate = |f: fn(&BatchRow) -> bool| {
            if n == 0 {
                0.0
            } else {
                rows.iter().filter(|r| f(r)).count() as f64 / n as f64
            }
        };
        let mean = |f: fn(&BatchRow) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            n_episodes: n,
            sr_det: rate(|r| r.detected),
            sr_hit: rate(|r| r.hit),
            sr_return: rate(|r| r.returned),
            sr_strike: rate(|r| r.success),
            e_predpos: mean(|r| r.e_predpos),
            e_predvel: mean(|r| r.e_predvel),
            e_predtau: mean(|r| r.e_predtau),
        }
    }

    pub fn from_report(r: &MetricsReport) -> Self {
        Self {
            n_episodes: r.n_episodes,
            sr_det: r.sr_det,
            sr_hit: r.sr_hit,
            sr_return: r.sr_return,
            sr_strike: r.sr_strike,
            e_predpos: r.e_predpos,
            e_predvel: r.e_predvel,
            e_predtau: r.e_predtau,
        }
    }

    /// Field names and rounded values in column order.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        let opt = |x: Option<f64>| x.map(|v| sig9(v).to_string()).unwrap_or_default();
        vec![
            ("n_episodes", self.n_episodes.to_string()),
            ("sr_det", sig9(self.sr_det).to_string()),
            ("sr_hit", sig9(self.sr_hit).to_string()),
            ("sr_return", sig9(self.sr_return).to_string()),
            ("sr_strike", sig9(self.sr_strike).to_string()),
            ("e_predpos", opt(self.e_predpos)),
            ("e_predvel", opt(self.e_predvel)),
            ("e_predtau", opt(self.e_predtau)),
        ]
    }
}

/// Per-episode rows followed by `# key=value` summary lines. An empty batch
/// produces only the header.
pub fn write_batch_csv<W: Write>(
    mut w: W,
    seed: u64,
    outcomes: &[RallyOutcome],
    report: &MetricsReport,
) -> Result<(), OutputError> {
    let mut sorted: Vec<&RallyOutcome> = outcomes.iter().collect();
    sorted.sort_by_key(|o| o.episode);
    {
        let mut cw = csv::WriterBuilder::new().has_headers(false).from_writer(&mut w);
        cw.write_record(BATCH_HEADER)?;
        for o in &sorted {
            cw.serialize(BatchRow::from_outcome(seed, o))?;
        }
        cw.flush()?;
    }
    if !sorted.is_empty() {
        writeln!(w, "# seed={seed}")?;
        for (k, v) in BatchSummary::from_report(report).fields() {
            writeln!(w, "# {k}={v}")?;
        }
    }
    Ok(())
}

/// One summary row per labelled source.
pub fn write_summary_csv<W: Write>(w: W, rows: &[(String, BatchSummary)]) -> Result<(), OutputError> {
    let mut cw = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    let names = BatchSummary::from_rows(&[]).fields();
    let mut header = vec!["source"];
    header.extend(names.iter().map(|(k, _)| *k));
    cw.write_record(&header)?;
    for (source, summary) in rows {
        let mut rec = vec![source.clone()];
        rec.extend(summary.fields().into_iter().map(|(_, v)| v));
        cw.write_record(&rec)?;
    }
    cw.flush()?;
    Ok(())
}

pub fn read_batch_csv(path: &Path) -> Result<Vec<BatchRow>, OutputError> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// One line per time-to-strike bin with mean and spread of each error.
pub fn write_convergence_csv<W: Write>(mut w: W, seed: u64, report: &MetricsReport) -> Result<(), OutputError> {
    let c = &report.convergence;
    {
        let mut cw = csv::Writer::from_writer(&mut w);
        cw.write_record([
            "time_to_strike",
            "count",
            "pos_mean",
            "pos_std",
            "vel_mean",
            "vel_std",
            "tau_mean",
            "tau_std",
        ])?;
        let f = |x: f64| if x.is_finite() { sig9(x).to_string() } else { String::new() };
        for ((p, v), t) in c.position.iter().zip(&c.velocity).zip(&c.timing) {
            cw.write_record([
                f(p.center),
                p.count.to_string(),
                f(p.mean),
                f(p.std),
                f(v.mean),
                f(v.std),
                f(t.mean),
                f(t.std),
            ])?;
        }
        cw.flush()?;
    }
    writeln!(w, "# seed={seed}")?;
    Ok(())
}

/// Input row of a filter replay log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayInput {
    pub t: f64,
    pub zx: f64,
    pub zy: f64,
    pub zz: f64,
    pub d: f64,
}

impl From<ReplayInput> for Measurement {
    fn from(r: ReplayInput) -> Self {
        Measurement {
            z: Vector3::new(r.zx, r.zy, r.zz),
            t: r.t,
            d: r.d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutput {
    pub t: f64,
    pub px: Option<f64>,
    pub py: Option<f64>,
    pub pz: Option<f64>,
    pub vx: Option<f64>,
    pub vy: Option<f64>,
    pub vz: Option<f64>,
    pub reinit: bool,
    /// Rejection reason, empty when the row was accepted.
    pub rejected: Option<String>,
}

impl From<&ReplayStep> for ReplayOutput {
    fn from(s: &ReplayStep) -> Self {
        let c = |f: fn(&crate::dynamics::BallState) -> f64| s.estimate.as_ref().map(|b| sig9(f(b)));
        Self {
            t: sig9(s.t),
            px: c(|b| b.p.x),
            py: c(|b| b.p.y),
            pz: c(|b| b.p.z),
            vx: c(|b| b.v.x),
            vy: c(|b| b.v.y),
            vz: c(|b| b.v.z),
            reinit: s.event.is_some_and(|e| e.is_reinit()),
            rejected: s.rejected.as_ref().map(|e| e.to_string()),
        }
    }
}

/// Reads a JSONL measurement log; blank lines are skipped.
pub fn read_replay_jsonl(text: &str) -> Result<Vec<ReplayInput>, OutputError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(OutputError::from))
        .collect()
}

pub fn write_replay_jsonl<W: Write>(w: W, steps: &[ReplayStep]) -> Result<(), OutputError> {
    let rows: Vec<ReplayOutput> = steps.iter().map(ReplayOutput::from).collect();
    write_jsonl(w, &rows)
}

/// Trajectory export row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub bounced: bool,
}

pub fn write_trajectory_jsonl<W: Write>(w: W, traj: &Trajectory) -> Result<(), OutputError> {
    let rows: Vec<TrajectoryRow> = traj
        .samples
        .iter()
        .map(|s| TrajectoryRow {
            t: s.t,
            px: s.state.p.x,
            py: s.state.p.y,
            pz: s.state.p.z,
            vx: s.state.v.x,
            vy: s.state.v.y,
            vz: s.state.v.z,
            bounced: s.bounced,
        })
        .collect();
    write_jsonl(w, &rows)
}
