//! Latency statistics over simulation results.
//!
//! Percentiles use the nearest-rank rule without interpolation, so results
//! are exact integers that any implementation can reproduce.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{RequestRecord, SimResult};
use crate::error::{Result, SimError};
use crate::model::Micros;

/// Element at index `ceil(p * n) - 1` of the sorted values.
pub fn percentile(values: &[Micros], p: f64) -> Result<Micros> {
    if values.is_empty() {
        return Err(SimError::Empty("latency list"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    Ok(percentile_sorted(&sorted, p))
}

pub(crate) fn percentile_sorted<T: Copy>(sorted: &[T], p: f64) -> T {
    let n = sorted.len();
    let rank = (p.clamp(0.0, 1.0) * n as f64).ceil() as usize;
    sorted[rank.saturating_sub(1).min(n - 1)]
}

/// Sorted distinct values with the fraction of samples at or below each.
pub fn cdf(values: &[Micros]) -> Result<Vec<(Micros, f64)>> {
    if values.is_empty() {
        return Err(SimError::Empty("latency list"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let mut out: Vec<(Micros, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: String,
    pub model: String,
    pub rate_qps: f64,
    pub seed: u64,
    pub sla_target_us: Micros,
    pub avg_latency_us: f64,
    pub p25_latency_us: Micros,
    pub p50_latency_us: Micros,
    pub p75_latency_us: Micros,
    pub p99_latency_us: Micros,
    /// Completions within the horizon per second of horizon.
    pub throughput_rps: f64,
    pub sla_violation_rate: f64,
    pub request_count: usize,
}

pub fn summarize(
    result: &SimResult,
    sla_target_us: Micros,
    horizon_us: Micros,
) -> Result<RunSummary> {
    let mut s = summarize_records(&result.records, sla_target_us, horizon_us)?;
    s.policy = result.meta.policy.clone();
    s.model = result.meta.model.clone();
    s.rate_qps = result.meta.rate_qps;
    s.seed = result.meta.seed;
    Ok(s)
}

/// Summary over bare records; run labels are left blank.
pub fn summarize_records(
    records: &[RequestRecord],
    sla_target_us: Micros,
    horizon_us: Micros,
) -> Result<RunSummary> {
    if records.is_empty() {
        return Err(SimError::Empty("simulation result"));
    }
    if horizon_us == 0 {
        return Err(SimError::Empty("horizon"));
    }
    let mut lat: Vec<Micros> = records.iter().map(|r| r.latency_us).collect();
    lat.sort_unstable();
    let n = lat.len();
    let total: u128 = lat.iter().map(|&l| u128::from(l)).sum();
    let completed = records
        .iter()
        .filter(|r| r.complete_us <= horizon_us)
        .count();
    let violated = lat.iter().filter(|&&l| l > sla_target_us).count();
    Ok(RunSummary {
        policy: String::new(),
        model: records[0].model.clone(),
        rate_qps: 0.0,
        seed: 0,
        sla_target_us,
        avg_latency_us: total as f64 / n as f64,
        p25_latency_us: percentile_sorted(&lat, 0.25),
        p50_latency_us: percentile_sorted(&lat, 0.50),
        p75_latency_us: percentile_sorted(&lat, 0.75),
        p99_latency_us: percentile_sorted(&lat, 0.99),
        throughput_rps: completed as f64 * 1e6 / horizon_us as f64,
        sla_violation_rate: violated as f64 / n as f64,
        request_count: n,
    })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| SimError::io(path, e))?;
    Ok(std::io::BufWriter::new(file))
}

fn lf_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

/// Writes `latency_us,cumulative_fraction` rows.
pub fn write_cdf_to<W: Write>(w: W, points: &[(Micros, f64)]) -> Result<()> {
    let mut wtr = lf_writer(w);
    wtr.write_record(["latency_us", "cumulative_fraction"])?;
    for (lat, frac) in points {
        wtr.write_record([lat.to_string(), frac.to_string()])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_cdf(path: impl AsRef<Path>, points: &[(Micros, f64)]) -> Result<()> {
    write_cdf_to(create(path.as_ref())?, points)
}

pub fn write_summaries_to<W: Write>(w: W, summaries: &[RunSummary]) -> Result<()> {
    let mut wtr = lf_writer(w);
    for s in summaries {
        wtr.serialize(s)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_summaries(path: impl AsRef<Path>, summaries: &[RunSummary]) -> Result<()> {
    write_summaries_to(create(path.as_ref())?, summaries)
}

/// Reads a result CSV written by [`SimResult::write_csv`].
pub fn read_results_from<R: Read>(r: R) -> Result<Vec<RequestRecord>> {
    #[derive(Deserialize)]
    struct Row {
        id: u64,
        model: String,
        arrival_us: Micros,
        first_issue_us: Micros,
        complete_us: Micros,
        latency_us: Micros,
        sla_violated: bool,
        max_observed_batch: u32,
    }
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| SimError::TraceRow {
            line: i + 2,
            reason: e.to_string(),
        })?;
        out.push(RequestRecord {
            id: row.id,
            model: row.model,
            arrival_us: row.arrival_us,
            first_issue_us: row.first_issue_us,
            complete_us: row.complete_us,
            latency_us: row.latency_us,
            sla_violated: row.sla_violated,
            max_observed_batch: row.max_observed_batch,
            admission_slack_us: None,
            actual_dec_timesteps: 0,
        });
    }
    Ok(out)
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<RequestRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| SimError::io(path, e))?;
    read_results_from(std::io::BufReader::new(file))
        .map_err(|e| e.context(format!("results {}", path.display())))
}
