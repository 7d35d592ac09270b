//! Single-input latency estimation and SLA slack.
//!
//! The predictor assumes every request runs alone at batch size 1 with a
//! fixed decoder length, then charges a prospective batch the sum of those
//! single-input times. Because a batched node never costs more than running
//! its inputs one by one, the estimate can only overshoot.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::model::{Micros, ModelGraph, NodeKind};
use crate::traffic::LengthDistribution;

pub const DEFAULT_COVERAGE: f64 = 0.90;
pub const DEFAULT_SLA_US: Micros = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlackConfig {
    pub sla_target_us: Micros,
    /// Decoder length the predictor assumes for every request.
    pub dec_timesteps: u32,
    pub coverage_n: f64,
    /// Subtract work a request has already completed from its estimate.
    pub credit_progress: bool,
}

impl SlackConfig {
    pub fn new(sla_target_us: Micros, dec_timesteps: u32) -> Result<Self> {
        let cfg = SlackConfig {
            sla_target_us,
            dec_timesteps,
            coverage_n: DEFAULT_COVERAGE,
            credit_progress: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sla_target_us == 0 {
            return Err(SimError::Policy("sla_target_us must be >= 1".into()));
        }
        if self.dec_timesteps == 0 {
            return Err(SimError::Policy("dec_timesteps must be >= 1".into()));
        }
        if !(self.coverage_n > 0.0 && self.coverage_n <= 1.0) {
            return Err(SimError::Policy(format!(
                "coverage_n must lie in (0, 1], got {}",
                self.coverage_n
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlackEstimate {
    pub slack_us: i64,
    pub t_wait_us: Micros,
    pub predicted_exec_us: Micros,
}

/// Smallest length whose cumulative probability reaches `n`.
pub fn coverage_threshold(dist: &LengthDistribution, n: f64) -> u32 {
    // Tolerate float noise in hand-written or computed CDF values.
    let n = n - 1e-12;
    dist.points()
        .iter()
        .find(|&&(_, p)| p >= n)
        .map_or_else(|| dist.max_len(), |&(l, _)| l)
}

/// Latency of one request executed alone through the whole graph.
pub fn single_input_exec_time(model: &ModelGraph, enc_t: u32, dec_t: u32) -> Micros {
    if !model.is_dynamic() {
        return model.nodes.iter().map(|n| n.base_latency_us).sum();
    }
    model
        .nodes
        .iter()
        .map(|n| match n.kind {
            NodeKind::Static => n.base_latency_us,
            NodeKind::Encoder => n.base_latency_us * u64::from(enc_t),
            NodeKind::Decoder => n.base_latency_us * u64::from(dec_t),
        })
        .sum()
}

/// Predictor decoder length for `model`: the catalog override when present,
/// else the coverage quantile of `dist`, capped at the model's maximum.
pub fn default_dec_timesteps(
    model: &ModelGraph,
    dist: &LengthDistribution,
    coverage_n: f64,
) -> u32 {
    if !model.is_dynamic() {
        return 1;
    }
    model
        .dec_timesteps_override
        .unwrap_or_else(|| coverage_threshold(dist, coverage_n))
        .min(model.max_dec_timesteps)
}

/// `sla - (t_wait + sum(exec))`.
pub fn slack(
    cfg: &SlackConfig,
    t_wait_us: Micros,
    exec_times_us: &[Micros],
) -> Result<SlackEstimate> {
    if exec_times_us.is_empty() {
        return Err(SimError::Empty("execution time list"));
    }
    let predicted: Micros = exec_times_us.iter().sum();
    Ok(SlackEstimate {
        slack_us: slack_value(cfg.sla_target_us, t_wait_us, predicted),
        t_wait_us,
        predicted_exec_us: predicted,
    })
}

#[inline]
pub(crate) fn slack_value(sla_us: Micros, t_wait_us: Micros, exec_us: Micros) -> i64 {
    sla_us as i64 - (t_wait_us as i64 + exec_us as i64)
}
