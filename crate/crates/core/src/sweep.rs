//! Multi-run experiment sweeps.
//!
//! Every (axis point, run) pair gets its own trace, seeded `base_seed + run`,
//! and every policy replays that same trace. Runs execute in parallel but
//! rows come out in spec order: axis points outermost, then policies.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{self, RunOptions, SimResult};
use crate::error::{Result, SimError};
use crate::metrics::{self, percentile_sorted, RunSummary};
use crate::model::{Catalog, Micros};
use crate::policy::PolicyConfig;
use crate::traffic::{self, InferenceRequest, LengthDistribution, TrafficConfig};

pub const DEFAULT_RUNS_PER_POINT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKind {
    RateQps,
    SlaUs,
    WindowUs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub kind: AxisKind,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub model: String,
    pub duration_ms: u64,
    #[serde(default = "default_runs")]
    pub runs_per_point: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Arrival rate for axes other than `rate_qps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_qps: Option<f64>,
    pub axis: Axis,
    pub policies: Vec<PolicyConfig>,
    /// Length CDF file for dynamic models; the shipped one when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_cdf: Option<std::path::PathBuf>,
}

fn default_runs() -> usize {
    DEFAULT_RUNS_PER_POINT
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SweepSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("sweep spec {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::Policy(format!("sweep: {m}")));
        if self.axis.values.is_empty() {
            return bad("axis has no values");
        }
        if self.policies.is_empty() {
            return bad("no policies");
        }
        if self.runs_per_point == 0 {
            return bad("runs_per_point must be >= 1");
        }
        if self.duration_ms == 0 {
            return bad("duration_ms must be >= 1");
        }
        if self.axis.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("axis values must be finite and non-negative");
        }
        if self.axis.kind != AxisKind::RateQps && self.rate_qps.is_none() {
            return bad("rate_qps is required unless the axis is rate_qps");
        }
        for p in &self.policies {
            p.validate()?;
        }
        Ok(())
    }

    pub fn duration_us(&self) -> Micros {
        self.duration_ms * 1000
    }

    fn rate_at(&self, point: f64) -> f64 {
        match self.axis.kind {
            AxisKind::RateQps => point,
            _ => self.rate_qps.unwrap_or(0.0),
        }
    }

    /// `policy` with the axis value applied.
    pub fn policy_at(&self, policy: &PolicyConfig, point: f64) -> PolicyConfig {
        let mut p = policy.clone();
        match self.axis.kind {
            AxisKind::RateQps => {}
            AxisKind::SlaUs => p.sla_target_us = point as Micros,
            AxisKind::WindowUs => {
                if p.kind.uses_window() {
                    p.window_us = Some(point as Micros);
                }
            }
        }
        p
    }
}

/// Mean and across-run quartiles of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub p25: f64,
    pub p75: f64,
}

impl Spread {
    /// Independent of input order: values are sorted before summing.
    pub fn of(values: &[f64]) -> Spread {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Spread {
            mean,
            p25: percentile_sorted(&v, 0.25),
            p75: percentile_sorted(&v, 0.75),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub axis: AxisKind,
    pub axis_value: f64,
    pub policy: String,
    pub model: String,
    pub runs: usize,
    pub avg_latency_us: Spread,
    pub p99_latency_us: Spread,
    pub throughput_rps: Spread,
    pub sla_violation_rate: Spread,
}

impl AggregateRow {
    pub fn from_summaries(axis: AxisKind, axis_value: f64, runs: &[RunSummary]) -> Result<Self> {
        let first = runs.first().ok_or(SimError::Empty("run summaries"))?;
        let col = |f: fn(&RunSummary) -> f64| Spread::of(&runs.iter().map(f).collect::<Vec<_>>());
        Ok(AggregateRow {
            axis,
            axis_value,
            policy: first.policy.clone(),
            model: first.model.clone(),
            runs: runs.len(),
            avg_latency_us: col(|s| s.avg_latency_us),
            p99_latency_us: col(|s| s.p99_latency_us as f64),
            throughput_rps: col(|s| s.throughput_rps),
            sla_violation_rate: col(|s| s.sla_violation_rate),
        })
    }
}

pub const SWEEP_HEADER: [&str; 17] = [
    "axis",
    "axis_value",
    "policy",
    "model",
    "runs",
    "avg_latency_us_mean",
    "avg_latency_us_p25",
    "avg_latency_us_p75",
    "p99_latency_us_mean",
    "p99_latency_us_p25",
    "p99_latency_us_p75",
    "throughput_rps_mean",
    "throughput_rps_p25",
    "throughput_rps_p75",
    "sla_violation_rate_mean",
    "sla_violation_rate_p25",
    "sla_violation_rate_p75",
];

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<AggregateRow>,
    /// Per-run summaries, `[point][policy][run]`.
    pub runs: Vec<Vec<Vec<RunSummary>>>,
}

impl SweepResult {
    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        wtr.write_record(SWEEP_HEADER)?;
        for r in &self.rows {
            let axis = serde_json::to_value(r.axis)?;
            let mut rec = vec![
                axis.as_str().unwrap_or_default().to_string(),
                r.axis_value.to_string(),
                r.policy.clone(),
                r.model.clone(),
                r.runs.to_string(),
            ];
            for s in [
                r.avg_latency_us,
                r.p99_latency_us,
                r.throughput_rps,
                r.sla_violation_rate,
            ] {
                rec.extend([s.mean.to_string(), s.p25.to_string(), s.p75.to_string()]);
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| SimError::io(path, e))?;
        self.write_csv_to(std::io::BufWriter::new(file))
    }

    pub fn row(&self, axis_value: f64, policy: &str) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.axis_value == axis_value && r.policy == policy)
    }
}

/// Generates the trace for one run of a sweep point.
pub fn point_trace(
    catalog: &Catalog,
    model: &str,
    rate_qps: f64,
    duration_us: Micros,
    seed: u64,
    dist: &LengthDistribution,
) -> Result<Vec<InferenceRequest>> {
    let m = catalog.get(model)?;
    let cfg = TrafficConfig {
        rate_qps,
        duration_us,
        seed,
        model_name: model.to_string(),
        length_dist: m.is_dynamic().then(|| dist.clone()),
    };
    traffic::gen_trace(&cfg, m)
}

/// Runs one policy on one generated trace.
pub fn run_once(
    catalog: &Catalog,
    trace: &[InferenceRequest],
    policy: &PolicyConfig,
    rate_qps: f64,
    duration_us: Micros,
    seed: u64,
) -> Result<SimResult> {
    let opts = RunOptions {
        seed,
        rate_qps,
        duration_us,
        ..RunOptions::default()
    };
    engine::run(catalog, trace, policy, &opts)
}

pub fn run_sweep(spec: &SweepSpec, catalog: &Catalog) -> Result<SweepResult> {
    spec.validate()?;
    catalog.get(&spec.model)?;
    let dist = match &spec.length_cdf {
        Some(p) => LengthDistribution::load(p)?,
        None => LengthDistribution::shipped_en_de(),
    };
    let duration = spec.duration_us();
    let jobs: Vec<(usize, usize)> = (0..spec.axis.values.len())
        .flat_map(|p| (0..spec.runs_per_point).map(move |r| (p, r)))
        .collect();

    // One job per (point, run): generate the trace once, replay every policy.
    let per_job: Vec<Vec<RunSummary>> = jobs
        .par_iter()
        .map(|&(p, r)| -> Result<Vec<RunSummary>> {
            let point = spec.axis.values[p];
            let rate = spec.rate_at(point);
            let seed = spec.base_seed.wrapping_add(r as u64);
            let ctx = || format!("sweep point {point}, run {r} (seed {seed})");
            let trace = point_trace(catalog, &spec.model, rate, duration, seed, &dist)
                .map_err(|e| e.context(ctx()))?;
            if trace.is_empty() {
                return Err(SimError::Empty("generated trace").context(ctx()));
            }
            spec.policies
                .iter()
                .map(|pol| {
                    let pol = spec.policy_at(pol, point);
                    let res = run_once(catalog, &trace, &pol, rate, duration, seed)
                        .map_err(|e| e.context(format!("{} at {}", pol.label(), ctx())))?;
                    metrics::summarize(&res, pol.sla_target_us, duration)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    log::debug!("sweep over {}: {} jobs finished", spec.model, jobs.len());
    let n_pol = spec.policies.len();
    let mut runs =
        vec![vec![Vec::with_capacity(spec.runs_per_point); n_pol]; spec.axis.values.len()];
    for (&(p, _), summaries) in jobs.iter().zip(per_job) {
        for (k, s) in summaries.into_iter().enumerate() {
            runs[p][k].push(s);
        }
    }
    let mut rows = Vec::with_capacity(spec.axis.values.len() * n_pol);
    for (p, per_policy) in runs.iter().enumerate() {
        for summaries in per_policy {
            rows.push(AggregateRow::from_summaries(
                spec.axis.kind,
                spec.axis.values[p],
                summaries,
            )?);
        }
    }
    Ok(SweepResult { rows, runs })
}
