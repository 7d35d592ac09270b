//! Analytic latency-vs-batch-size model.
//!
//! Each node costs `max(L1, ceil(L1 * b / S))` for batch size `b`, where `L1`
//! is its single-batch latency and `S` its saturation batch. Throughput grows
//! linearly up to `S` and is flat beyond it, and a batch never costs more than
//! running its inputs one by one.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Result, SimError};
use crate::model::{Micros, ModelGraph, NodeKind, NodeTemplate};

pub fn node_latency(node: &NodeTemplate, batch: u32) -> Result<Micros> {
    if batch == 0 {
        return Err(SimError::ZeroBatch);
    }
    Ok(batched_latency(node, batch))
}

/// `node_latency` for callers that already guarantee `batch >= 1`.
#[inline]
pub(crate) fn batched_latency(node: &NodeTemplate, batch: u32) -> Micros {
    debug_assert!(batch >= 1);
    let l1 = node.base_latency_us;
    let s = u64::from(node.saturation_batch);
    let scaled = (l1 * u64::from(batch)).div_ceil(s);
    l1.max(scaled)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub batch: u32,
    pub throughput_per_sec: f64,
    pub total_latency_us: Micros,
    pub avg_latency_per_input_us: f64,
}

/// Latency/throughput of pre-formed batches running the whole model at the
/// catalog's calibration lengths.
pub fn throughput_curve(model: &ModelGraph, batch_sizes: &[u32]) -> Result<Vec<CurvePoint>> {
    if batch_sizes.is_empty() {
        return Err(SimError::Empty("batch size list"));
    }
    batch_sizes
        .iter()
        .map(|&b| {
            if b == 0 {
                return Err(SimError::ZeroBatch);
            }
            let total: Micros = model
                .nodes
                .iter()
                .map(|n| {
                    let reps = match n.kind {
                        NodeKind::Static => 1,
                        NodeKind::Encoder => u64::from(model.enc_timesteps),
                        NodeKind::Decoder => u64::from(model.calibration_dec_timesteps),
                    };
                    batched_latency(n, b) * reps
                })
                .sum();
            Ok(CurvePoint {
                batch: b,
                throughput_per_sec: f64::from(b) * 1e6 / total as f64,
                total_latency_us: total,
                avg_latency_per_input_us: total as f64 / f64::from(b),
            })
        })
        .collect()
}

pub fn write_curve_to<W: Write>(w: W, curve: &[CurvePoint]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    for p in curve {
        wtr.serialize(p)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_curve(path: impl AsRef<Path>, curve: &[CurvePoint]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| SimError::io(path, e))?;
    write_curve_to(std::io::BufWriter::new(file), curve)
}

/// Splits `target_total_us` across nodes by share using largest-remainder
/// rounding. Equal remainders go to the lower index.
pub fn calibrate(node_shares: &[f64], target_total_us: Micros) -> Result<Vec<Micros>> {
    if node_shares.is_empty() {
        return Err(SimError::Empty("node shares"));
    }
    if node_shares.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(SimError::Calibration("every share must be positive".into()));
    }
    let sum: f64 = node_shares.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SimError::Calibration(format!("shares sum to {sum}, not 1")));
    }
    if target_total_us < node_shares.len() as u64 {
        return Err(SimError::Calibration(format!(
            "target {target_total_us} us is smaller than the node count {}",
            node_shares.len()
        )));
    }

    let exact: Vec<f64> = node_shares
        .iter()
        .map(|s| s * target_total_us as f64)
        .collect();
    let mut out: Vec<Micros> = exact.iter().map(|x| x.floor() as Micros).collect();
    let assigned: Micros = out.iter().sum();
    let mut leftover = target_total_us.saturating_sub(assigned);

    let mut order: Vec<usize> = (0..exact.len()).collect();
    // Remainders within 1e-9 count as ties so float noise cannot reorder them.
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        if (ra - rb).abs() <= 1e-9 {
            a.cmp(&b)
        } else {
            rb.total_cmp(&ra)
        }
    });
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        out[i] += 1;
        leftover -= 1;
    }
    if out.contains(&0) {
        return Err(SimError::Calibration(format!(
            "target {target_total_us} us too small: some node rounds to 0 us"
        )));
    }
    Ok(out)
}
