//! Batching policies as pure decision functions.
//!
//! The engine owns all mutable state and asks a policy what to do whenever
//! the accelerator is idle or reaches a node boundary. Lazy batching and the
//! oracle share one admission routine and differ only in the execution-time
//! estimator they pass in.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::model::{Micros, ModelGraph, NodeCursor};
use crate::slack::{self, SlackConfig, DEFAULT_COVERAGE, DEFAULT_SLA_US};
use crate::traffic::LengthDistribution;

pub const DEFAULT_MAX_BATCH: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Serial,
    GraphB,
    Cellular,
    LazyB,
    Oracle,
}

impl PolicyKind {
    pub fn uses_window(self) -> bool {
        matches!(self, PolicyKind::GraphB | PolicyKind::Cellular)
    }

    pub fn is_lazy(self) -> bool {
        matches!(self, PolicyKind::LazyB | PolicyKind::Oracle)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Serial => "serial",
            PolicyKind::GraphB => "graphb",
            PolicyKind::Cellular => "cellular",
            PolicyKind::LazyB => "lazyb",
            PolicyKind::Oracle => "oracle",
        })
    }
}

/// How many queued candidates one admission check may take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdmissionMode {
    /// Every queued request (capped by the batch limit) or none.
    #[default]
    All,
    /// The longest oldest-first prefix that keeps slack non-negative.
    Prefix,
}

/// Waiting time charged to requests that are already in flight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaitAccounting {
    /// Arrival to first issue.
    #[default]
    FirstIssue,
    /// Time since arrival minus the single-input work already completed.
    Accumulated,
}

/// Decoder lengths the oracle assumes when simulating the remaining work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleLengths {
    /// The predictor's length, extended for requests already decoding past it.
    #[default]
    Predicted,
    /// Each request's true length.
    Actual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_us: Option<Micros>,
    #[serde(default = "default_max_batch")]
    pub max_batch: u32,
    #[serde(default = "default_sla")]
    pub sla_target_us: Micros,
    #[serde(default = "default_coverage")]
    pub coverage_n: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dec_timesteps: Option<u32>,
    #[serde(default)]
    pub credit_progress: bool,
    #[serde(default)]
    pub preempt_overhead_us: Micros,
    #[serde(default)]
    pub admission: AdmissionMode,
    #[serde(default)]
    pub wait_accounting: WaitAccounting,
    #[serde(default)]
    pub oracle_lengths: OracleLengths,
}

fn default_max_batch() -> u32 {
    DEFAULT_MAX_BATCH
}
fn default_sla() -> Micros {
    DEFAULT_SLA_US
}
fn default_coverage() -> f64 {
    DEFAULT_COVERAGE
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PolicyFile {
    Wrapped { policy: PolicyConfig },
    Bare(PolicyConfig),
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        PolicyConfig {
            kind,
            window_us: None,
            max_batch: DEFAULT_MAX_BATCH,
            sla_target_us: DEFAULT_SLA_US,
            coverage_n: DEFAULT_COVERAGE,
            dec_timesteps: None,
            credit_progress: false,
            preempt_overhead_us: 0,
            admission: AdmissionMode::default(),
            wait_accounting: WaitAccounting::default(),
            oracle_lengths: OracleLengths::default(),
        }
    }

    pub fn serial() -> Self {
        Self::new(PolicyKind::Serial)
    }

    pub fn graphb(window_us: Micros) -> Self {
        Self::new(PolicyKind::GraphB).with_window(window_us)
    }

    pub fn cellular(window_us: Micros) -> Self {
        Self::new(PolicyKind::Cellular).with_window(window_us)
    }

    pub fn lazyb() -> Self {
        Self::new(PolicyKind::LazyB)
    }

    pub fn oracle() -> Self {
        Self::new(PolicyKind::Oracle)
    }

    pub fn with_window(mut self, window_us: Micros) -> Self {
        self.window_us = Some(window_us);
        self
    }

    pub fn with_max_batch(mut self, max_batch: u32) -> Self {
        self.max_batch = max_batch;
        self
    }

    pub fn with_sla(mut self, sla_target_us: Micros) -> Self {
        self.sla_target_us = sla_target_us;
        self
    }

    pub fn with_dec_timesteps(mut self, dec: u32) -> Self {
        self.dec_timesteps = Some(dec);
        self
    }

    /// Accepts `{"policy": {...}}` or the bare policy object.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg = match serde_json::from_str::<PolicyFile>(text) {
            Ok(PolicyFile::Wrapped { policy }) | Ok(PolicyFile::Bare(policy)) => policy,
            // Re-parse as the bare form for a precise error message.
            Err(_) => serde_json::from_str::<PolicyConfig>(text)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("policy config {}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_batch == 0 {
            return Err(SimError::Policy("max_batch must be >= 1".into()));
        }
        if self.sla_target_us == 0 {
            return Err(SimError::Policy("sla_target_us must be >= 1".into()));
        }
        if !(self.coverage_n > 0.0 && self.coverage_n <= 1.0) {
            return Err(SimError::Policy(format!(
                "coverage_n must lie in (0, 1], got {}",
                self.coverage_n
            )));
        }
        if self.dec_timesteps == Some(0) {
            return Err(SimError::Policy("dec_timesteps must be >= 1".into()));
        }
        if self.kind.uses_window() && self.window_us.is_none() {
            return Err(SimError::Policy(format!("{} needs window_us", self.kind)));
        }
        Ok(())
    }

    /// Window for windowed policies; zero otherwise.
    pub fn window(&self) -> Micros {
        self.window_us.unwrap_or(0)
    }

    /// Short label such as `graphb-95ms` used in result tables.
    pub fn label(&self) -> String {
        match (self.kind.uses_window(), self.window_us) {
            (true, Some(w)) if w % 1000 == 0 => format!("{}-{}ms", self.kind, w / 1000),
            (true, Some(w)) => format!("{}-{}us", self.kind, w),
            _ => self.kind.to_string(),
        }
    }

    /// Slack predictor settings for `model`, taking the decoder length from
    /// this config, then the catalog, then the coverage quantile of `dist`.
    pub fn slack_config(
        &self,
        model: &ModelGraph,
        dist: &LengthDistribution,
    ) -> Result<SlackConfig> {
        let dec = if model.is_dynamic() {
            match self.dec_timesteps {
                Some(d) => d,
                None => slack::default_dec_timesteps(model, dist, self.coverage_n),
            }
        } else {
            1
        };
        let cfg = SlackConfig {
            sla_target_us: self.sla_target_us,
            dec_timesteps: dec,
            coverage_n: self.coverage_n,
            credit_progress: self.credit_progress,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    /// Start a new batch at `start`.
    Dispatch {
        requests: Vec<u64>,
        start: NodeCursor,
    },
    /// Push the requests on top of the active batch.
    AdmitLazy {
        requests: Vec<u64>,
    },
    Wait,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueuedRequest {
    pub id: u64,
    pub arrival_us: Micros,
}

fn head_ids(queue: &[QueuedRequest], n: usize) -> Vec<u64> {
    queue.iter().take(n).map(|q| q.id).collect()
}

pub fn serial_decide(queue: &[QueuedRequest], processor_idle: bool) -> Decision {
    match queue.first() {
        Some(q) if processor_idle => Decision::Dispatch {
            requests: vec![q.id],
            start: NodeCursor::new(0, 0),
        },
        _ => Decision::Wait,
    }
}

/// Dispatches the oldest requests once the batch is full or the window
/// opened by the oldest queued arrival has elapsed.
pub fn graphb_decide(
    queue: &[QueuedRequest],
    now: Micros,
    processor_idle: bool,
    max_batch: u32,
    window_us: Micros,
) -> Decision {
    let Some(oldest) = queue.first() else {
        return Decision::Wait;
    };
    if !processor_idle {
        return Decision::Wait;
    }
    let full = queue.len() >= max_batch as usize;
    let expired = now.saturating_sub(oldest.arrival_us) >= window_us;
    if full || expired {
        Decision::Dispatch {
            requests: head_ids(queue, max_batch as usize),
            start: NodeCursor::new(0, 0),
        }
    } else {
        Decision::Wait
    }
}

/// Whether two cursors can share one kernel launch: the same node, or nodes
/// sharing a weight group.
pub fn cellular_batchable(a: (&ModelGraph, NodeCursor), b: (&ModelGraph, NodeCursor)) -> bool {
    let ((ma, ca), (mb, cb)) = (a, b);
    if ma.name != mb.name {
        return false;
    }
    if ca.node == cb.node {
        return true;
    }
    match (ma.node(ca.node).weight_group, mb.node(cb.node).weight_group) {
        (Some(x), Some(y)) => x == y,
        _ => false,
    }
}

/// Graph batching while idle. While busy, queued requests join the running
/// batch at the boundary if their first cell is batchable with `lead`.
#[allow(clippy::too_many_arguments)]
pub fn cellular_decide(
    model: &ModelGraph,
    queue: &[QueuedRequest],
    now: Micros,
    processor_idle: bool,
    lead: Option<NodeCursor>,
    in_flight: usize,
    max_batch: u32,
    window_us: Micros,
) -> Decision {
    if processor_idle || lead.is_none() {
        return graphb_decide(queue, now, processor_idle, max_batch, window_us);
    }
    let lead = lead.expect("checked above");
    let room = (max_batch as usize).saturating_sub(in_flight);
    let first = model.first_cursor();
    if queue.is_empty() || room == 0 || !cellular_batchable((model, first), (model, lead)) {
        return Decision::Wait;
    }
    Decision::Dispatch {
        requests: head_ids(queue, room),
        start: first,
    }
}

/// What the lazy admission check sees at a node boundary.
#[derive(Debug, Clone, Copy)]
pub struct LazyView<'a> {
    pub now: Micros,
    pub queue: &'a [QueuedRequest],
    /// True when nothing is in flight.
    pub table_empty: bool,
    pub in_flight: usize,
    /// Largest waiting time charged to an in-flight request.
    pub max_in_flight_wait_us: Micros,
}

/// Outcome of the slack gate for the evaluated candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdmissionCheck {
    pub candidates: usize,
    pub max_wait_us: Micros,
    pub predicted_exec_us: Micros,
    pub min_slack_us: i64,
}

/// Shared lazy/oracle admission. `estimate(k)` predicts the remaining
/// execution of everything in flight plus the `k` oldest candidates.
pub fn lazy_decide(
    view: &LazyView<'_>,
    cfg: &PolicyConfig,
    mut estimate: impl FnMut(usize) -> Micros,
) -> (Decision, Option<AdmissionCheck>) {
    let Some(oldest) = view.queue.first() else {
        return (Decision::Wait, None);
    };
    let cand_wait = view.now.saturating_sub(oldest.arrival_us);
    let max_wait = if view.table_empty {
        cand_wait
    } else {
        cand_wait.max(view.max_in_flight_wait_us)
    };
    let mut check = |k: usize| {
        let exec = estimate(k);
        AdmissionCheck {
            candidates: k,
            max_wait_us: max_wait,
            predicted_exec_us: exec,
            min_slack_us: slack::slack_value(cfg.sla_target_us, max_wait, exec),
        }
    };

    if view.table_empty {
        // No window: an idle accelerator starts whatever is queued.
        let k = view.queue.len().min(cfg.max_batch as usize);
        let c = check(k);
        return (
            Decision::Dispatch {
                requests: head_ids(view.queue, k),
                start: NodeCursor::new(0, 0),
            },
            Some(c),
        );
    }

    let room = (cfg.max_batch as usize).saturating_sub(view.in_flight);
    let k_max = view.queue.len().min(room);
    if k_max == 0 {
        return (Decision::Wait, None);
    }
    let admit = |c: AdmissionCheck| {
        (
            Decision::AdmitLazy {
                requests: head_ids(view.queue, c.candidates),
            },
            Some(c),
        )
    };
    let full = check(k_max);
    if full.min_slack_us >= 0 {
        return admit(full);
    }
    if cfg.admission == AdmissionMode::All {
        return (Decision::Wait, Some(full));
    }
    // Slack shrinks as candidates are added; binary search the longest
    // admissible prefix.
    let first = check(1);
    if first.min_slack_us < 0 {
        return (Decision::Wait, Some(first));
    }
    let (mut lo, mut hi) = (first, k_max);
    while hi - lo.candidates > 1 {
        let mid = lo.candidates + (hi - lo.candidates) / 2;
        let c = check(mid);
        if c.min_slack_us >= 0 {
            lo = c;
        } else {
            hi = mid;
        }
    }
    admit(lo)
}

/// Lazy batching with the conservative sum of single-input times.
pub fn lazyb_decide(
    view: &LazyView<'_>,
    cfg: &PolicyConfig,
    in_flight_exec_us: Micros,
    single_exec_us: Micros,
) -> (Decision, Option<AdmissionCheck>) {
    lazy_decide(view, cfg, |k| {
        in_flight_exec_us + k as Micros * single_exec_us
    })
}

/// Lazy batching with an exact remaining-time simulation as estimator.
pub fn oracle_decide(
    view: &LazyView<'_>,
    cfg: &PolicyConfig,
    exact_remaining: impl FnMut(usize) -> Micros,
) -> (Decision, Option<AdmissionCheck>) {
    lazy_decide(view, cfg, exact_remaining)
}
