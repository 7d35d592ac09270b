//! Discrete-event simulation loop.
//!
//! One accelerator executes one node instance at a time. Events at equal
//! timestamps are handled as arrivals, then node completions, then window
//! expiries. Every decision and every batch mutation happens at a node
//! boundary or while the accelerator is idle.
//!
//! Serial, graph and cellular batching run through one code path that keeps
//! a list of groups, each a set of requests sharing a cursor. Lazy batching
//! and the oracle drive a [`BatchStateTable`].

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::bst::{dump_entries, BatchStateTable, MergeOutcome};
use crate::cost::batched_latency;
use crate::error::{Result, SimError};
use crate::model::{Catalog, Micros, ModelGraph, NodeCursor};
use crate::policy::{
    self, AdmissionCheck, Decision, LazyView, OracleLengths, PolicyConfig, PolicyKind,
    QueuedRequest, WaitAccounting,
};
use crate::slack::{self, SlackConfig};
use crate::traffic::{InferenceRequest, LengthDistribution};

/// Run-level labels carried into results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMeta {
    pub policy: String,
    pub model: String,
    pub seed: u64,
    pub rate_qps: f64,
    pub duration_us: Micros,
    pub sla_target_us: Micros,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: u64,
    pub rate_qps: f64,
    /// Arrival horizon. Defaults to the last arrival when zero.
    pub duration_us: Micros,
    pub record_events: bool,
    /// Also compute the oracle estimate at lazy-batching admissions.
    pub audit_admissions: bool,
    /// Distribution used to pick the predictor's decoder length when neither
    /// the policy nor the catalog fixes it. Defaults to the shipped one.
    pub length_dist: Option<LengthDistribution>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestRecord {
    pub id: u64,
    pub model: String,
    pub arrival_us: Micros,
    pub first_issue_us: Micros,
    pub complete_us: Micros,
    pub latency_us: Micros,
    pub sla_violated: bool,
    pub max_observed_batch: u32,
    /// The request's own predicted slack when it entered the accelerator
    /// (lazy policies only).
    #[serde(skip)]
    pub admission_slack_us: Option<i64>,
    #[serde(skip)]
    pub actual_dec_timesteps: u32,
}

/// One lazy admission or idle dispatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdmissionRecord {
    pub time_us: Micros,
    pub request_ids: Vec<u64>,
    /// Pushed on top of an active batch rather than dispatched on idle.
    pub preempted: bool,
    /// Sum of single-input times over the merged set.
    pub conservative_exec_us: Micros,
    /// Exact batched drain time of the merged set; computed for oracle runs
    /// and when [`RunOptions::audit_admissions`] is set.
    pub oracle_exec_us: Option<Micros>,
    /// Estimate the deciding policy used.
    pub check: AdmissionCheck,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEvent {
    pub time_us: Micros,
    pub event: &'static str,
    pub entry_dump: String,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub meta: RunMeta,
    pub records: Vec<RequestRecord>,
    pub admissions: Vec<AdmissionRecord>,
    pub events: Vec<LogEvent>,
    /// Total time the accelerator spent executing node instances.
    pub busy_us: Micros,
    pub node_instances: u64,
    /// Predictor decoder length in effect.
    pub dec_timesteps: u32,
}

impl SimResult {
    pub fn latencies(&self) -> Vec<Micros> {
        self.records.iter().map(|r| r.latency_us).collect()
    }

    pub fn write_csv_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        for r in &self.records {
            wtr.serialize(r)?;
        }
        if self.records.is_empty() {
            wtr.write_record(RESULT_HEADER)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| SimError::io(path, e))?;
        self.write_csv_to(std::io::BufWriter::new(file))
    }

    pub fn write_event_log_to<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        wtr.write_record(["time_us", "event", "entry_dump"])?;
        for e in &self.events {
            wtr.write_record([
                e.time_us.to_string().as_str(),
                e.event,
                e.entry_dump.as_str(),
            ])?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_event_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| SimError::io(path, e))?;
        self.write_event_log_to(std::io::BufWriter::new(file))
    }
}

pub const RESULT_HEADER: [&str; 8] = [
    "id",
    "model",
    "arrival_us",
    "first_issue_us",
    "complete_us",
    "latency_us",
    "sla_violated",
    "max_observed_batch",
];

#[derive(Debug, Clone)]
struct ReqState {
    id: u64,
    arrival: Micros,
    dec: u32,
    first_issue: Option<Micros>,
    complete: Option<Micros>,
    max_batch: u32,
    /// Single-batch latency of the node instances executed so far.
    done_single: Micros,
    admission_slack: Option<i64>,
}

/// Requests sharing one cursor on the group-based path.
#[derive(Debug, Clone)]
struct Group {
    ids: Vec<u64>,
    cursor: NodeCursor,
}

#[derive(Debug, Clone)]
struct Running {
    end: Micros,
    cursor: NodeCursor,
    /// Indices into `groups` on the group path; unused on the lazy path.
    groups: Vec<usize>,
}

struct Engine<'a> {
    model: &'a ModelGraph,
    cfg: &'a PolicyConfig,
    slack: SlackConfig,
    single_exec: Micros,
    reqs: Vec<ReqState>,
    index: HashMap<u64, usize>,
    queue: VecDeque<usize>,
    groups: Vec<Group>,
    bst: BatchStateTable,
    running: Option<Running>,
    expiries: BinaryHeap<Reverse<Micros>>,
    admissions: Vec<AdmissionRecord>,
    events: Vec<LogEvent>,
    record_events: bool,
    audit_admissions: bool,
    busy: Micros,
    instances: u64,
}

/// Simulates `trace` under `policy` until every request completes.
pub fn run(
    catalog: &Catalog,
    trace: &[InferenceRequest],
    policy: &PolicyConfig,
    opts: &RunOptions,
) -> Result<SimResult> {
    policy.validate()?;
    let model_name = trace
        .first()
        .map(|r| r.model_name.as_str())
        .ok_or(SimError::Empty("trace"))?;
    let model = catalog.get(model_name)?;
    let shipped;
    let dist = match &opts.length_dist {
        Some(d) => d,
        None => {
            shipped = LengthDistribution::shipped_en_de();
            &shipped
        }
    };
    let slack_cfg = policy.slack_config(model, dist)?;
    let mut engine = Engine::new(model, policy, slack_cfg, trace, opts.record_events)?;
    engine.audit_admissions = opts.audit_admissions;
    engine.simulate(trace)?;
    log::debug!(
        "{} on {}: {} requests, {} node instances",
        policy.label(),
        model.name,
        trace.len(),
        engine.instances
    );
    let duration = if opts.duration_us > 0 {
        opts.duration_us
    } else {
        trace.last().map_or(0, |r| r.arrival_us)
    };
    let meta = RunMeta {
        policy: policy.label(),
        model: model.name.clone(),
        seed: opts.seed,
        rate_qps: opts.rate_qps,
        duration_us: duration,
        sla_target_us: policy.sla_target_us,
    };
    Ok(engine.finish(meta))
}

/// Builds a trace of the given (arrival, decoder length) pairs with ids
/// `0..n`; convenient for small hand-written scenarios.
pub fn trace_of(model: &str, arrivals: &[(Micros, u32)]) -> Vec<InferenceRequest> {
    arrivals
        .iter()
        .enumerate()
        .map(|(i, &(arrival_us, dec))| InferenceRequest {
            id: i as u64,
            arrival_us,
            model_name: model.to_string(),
            actual_dec_timesteps: dec,
        })
        .collect()
}

impl<'a> Engine<'a> {
    fn new(
        model: &'a ModelGraph,
        cfg: &'a PolicyConfig,
        slack: SlackConfig,
        trace: &[InferenceRequest],
        record_events: bool,
    ) -> Result<Self> {
        let mut reqs = Vec::with_capacity(trace.len());
        let mut index = HashMap::with_capacity(trace.len());
        let mut prev_arrival = 0;
        for (i, r) in trace.iter().enumerate() {
            if r.model_name != model.name {
                return Err(SimError::Traffic(format!(
                    "request {} targets `{}` but the server hosts only `{}`",
                    r.id, r.model_name, model.name
                )));
            }
            if r.arrival_us < prev_arrival {
                return Err(SimError::Traffic(format!(
                    "request {} arrives out of order",
                    r.id
                )));
            }
            prev_arrival = r.arrival_us;
            if index.insert(r.id, i).is_some() {
                return Err(SimError::DuplicateRequest(r.id));
            }
            let dec = if model.is_dynamic() {
                model.unrolled_len(r.actual_dec_timesteps)?;
                r.actual_dec_timesteps
            } else {
                1
            };
            reqs.push(ReqState {
                id: r.id,
                arrival: r.arrival_us,
                dec,
                first_issue: None,
                complete: None,
                max_batch: 0,
                done_single: 0,
                admission_slack: None,
            });
        }
        let single_exec =
            slack::single_input_exec_time(model, model.enc_timesteps, slack.dec_timesteps);
        Ok(Engine {
            model,
            cfg,
            slack,
            single_exec,
            reqs,
            index,
            queue: VecDeque::new(),
            groups: Vec::new(),
            bst: BatchStateTable::new(),
            running: None,
            expiries: BinaryHeap::new(),
            admissions: Vec::new(),
            events: Vec::new(),
            record_events,
            audit_admissions: false,
            busy: 0,
            instances: 0,
        })
    }

    fn lazy(&self) -> bool {
        self.cfg.kind.is_lazy()
    }

    fn slot(&self, id: u64) -> usize {
        // Generated traces number requests by position.
        match self.reqs.get(id as usize) {
            Some(r) if r.id == id => id as usize,
            _ => self.index[&id],
        }
    }

    fn req(&self, id: u64) -> &ReqState {
        &self.reqs[self.slot(id)]
    }

    fn req_mut(&mut self, id: u64) -> &mut ReqState {
        let i = self.slot(id);
        &mut self.reqs[i]
    }

    fn log(&mut self, time: Micros, event: &'static str, dump: impl FnOnce(&Self) -> String) {
        if self.record_events {
            let entry_dump = dump(self);
            self.events.push(LogEvent {
                time_us: time,
                event,
                entry_dump,
            });
        }
    }

    fn simulate(&mut self, trace: &[InferenceRequest]) -> Result<()> {
        let mut next_arrival = 0usize;
        loop {
            let ta = trace.get(next_arrival).map(|r| r.arrival_us);
            let tc = self.running.as_ref().map(|r| r.end);
            let tw = self.expiries.peek().map(|r| r.0);
            let Some(now) = [ta, tc, tw].into_iter().flatten().min() else {
                break;
            };
            if ta == Some(now) {
                while next_arrival < trace.len() && trace[next_arrival].arrival_us == now {
                    self.queue.push_back(next_arrival);
                    next_arrival += 1;
                }
                if self.running.is_none() {
                    self.on_idle(now)?;
                }
            } else if tc == Some(now) {
                self.complete_node(now)?;
            } else {
                while self.expiries.peek().is_some_and(|r| r.0 <= now) {
                    self.expiries.pop();
                }
                if self.running.is_none() {
                    self.on_idle(now)?;
                }
            }
        }
        if !self.drain_check() {
            return Err(SimError::Invariant(
                "simulation ended with work outstanding".into(),
            ));
        }
        Ok(())
    }

    /// True when nothing is queued, in flight, or scheduled.
    fn drain_check(&self) -> bool {
        self.queue.is_empty()
            && self.groups.is_empty()
            && self.bst.is_empty()
            && self.running.is_none()
            && self.expiries.is_empty()
    }

    /// The queue head. Policies never look past `max_batch` entries except
    /// to compare the queue length against it.
    fn queued(&self) -> Vec<QueuedRequest> {
        self.queue
            .iter()
            .take(self.cfg.max_batch as usize)
            .map(|&i| QueuedRequest {
                id: self.reqs[i].id,
                arrival_us: self.reqs[i].arrival,
            })
            .collect()
    }

    fn take_from_queue(&mut self, ids: &[u64]) -> Result<()> {
        for &id in ids {
            let front = self.queue.pop_front().map(|i| self.reqs[i].id);
            if front != Some(id) {
                return Err(SimError::Invariant(format!(
                    "policy picked request {id} out of queue order"
                )));
            }
        }
        Ok(())
    }

    fn on_idle(&mut self, now: Micros) -> Result<()> {
        if self.lazy() {
            self.lazy_boundary(now, now)
        } else {
            self.group_decide(now, true)
        }
    }

    // ----- group path: serial, graph batching, cellular batching -----

    fn group_decide(&mut self, now: Micros, idle: bool) -> Result<()> {
        // Only cellular batching can act on a busy accelerator.
        if self.queue.is_empty() || (!idle && self.cfg.kind != PolicyKind::Cellular) {
            return if idle {
                Ok(())
            } else {
                self.start_group_node(now)
            };
        }
        let queue = self.queued();
        let decision = match self.cfg.kind {
            PolicyKind::Serial => policy::serial_decide(&queue, idle),
            PolicyKind::GraphB => {
                policy::graphb_decide(&queue, now, idle, self.cfg.max_batch, self.cfg.window())
            }
            PolicyKind::Cellular => {
                let in_flight = self.groups.iter().map(|g| g.ids.len()).sum();
                policy::cellular_decide(
                    self.model,
                    &queue,
                    now,
                    idle,
                    self.groups.first().map(|g| g.cursor),
                    in_flight,
                    self.cfg.max_batch,
                    self.cfg.window(),
                )
            }
            PolicyKind::LazyB | PolicyKind::Oracle => unreachable!("lazy policies use the table"),
        };
        match decision {
            Decision::Dispatch { requests, start } => {
                self.take_from_queue(&requests)?;
                self.groups.push(Group {
                    ids: requests,
                    cursor: start,
                });
                self.log(now, "push", Self::group_dump);
                self.start_group_node(now)
            }
            Decision::AdmitLazy { .. } => Err(SimError::Invariant(
                "group policies never admit lazily".into(),
            )),
            Decision::Wait => {
                if idle {
                    let expiry = self.reqs[self.queue[0]].arrival + self.cfg.window();
                    if expiry > now && !self.expiries.iter().any(|r| r.0 == expiry) {
                        self.expiries.push(Reverse(expiry));
                    }
                    Ok(())
                } else {
                    self.start_group_node(now)
                }
            }
        }
    }

    fn group_dump(&self) -> String {
        dump_entries(self.groups.iter().map(|g| (g.ids.as_slice(), g.cursor)))
    }

    fn start_group_node(&mut self, now: Micros) -> Result<()> {
        let Some(lead) = self.groups.first().map(|g| g.cursor) else {
            return Ok(());
        };
        let cellular = self.cfg.kind == PolicyKind::Cellular;
        let participants: Vec<usize> = self
            .groups
            .iter()
            .enumerate()
            .filter(|(i, g)| {
                *i == 0
                    || (cellular
                        && policy::cellular_batchable((self.model, g.cursor), (self.model, lead)))
            })
            .map(|(i, _)| i)
            .collect();
        let members: Vec<u64> = participants
            .iter()
            .flat_map(|&gi| {
                let g = &self.groups[gi];
                g.ids
                    .iter()
                    .copied()
                    .filter(|&id| self.model.has_work(g.cursor, self.req(id).dec))
                    .collect::<Vec<_>>()
            })
            .collect();
        let dump = if self.record_events {
            dump_entries(
                participants
                    .iter()
                    .map(|&gi| (self.groups[gi].ids.as_slice(), self.groups[gi].cursor)),
            )
        } else {
            String::new()
        };
        self.start_instance(now, lead, &members, participants, dump)
    }

    fn complete_group_node(&mut self, now: Micros, run: Running) -> Result<()> {
        let node_l1 = self.model.node(run.cursor.node).base_latency_us;
        let mut any_retired = false;
        for &gi in &run.groups {
            let cursor = self.groups[gi].cursor;
            let ids = std::mem::take(&mut self.groups[gi].ids);
            let ids_len = ids.len();
            let mut keep = Vec::with_capacity(ids.len());
            for id in ids {
                let dec = self.req(id).dec;
                if self.model.has_work(cursor, dec) {
                    self.req_mut(id).done_single += node_l1;
                }
                if self.model.is_last(cursor, dec) {
                    self.req_mut(id).complete = Some(now);
                } else {
                    keep.push(id);
                }
            }
            any_retired |= keep.len() != ids_len;
            self.groups[gi].ids = keep;
        }
        if any_retired {
            self.log(now, "retire", Self::group_dump);
        }
        for &gi in &run.groups {
            if self.groups[gi].ids.is_empty() {
                continue;
            }
            let max_dec = self.max_dec(&self.groups[gi].ids);
            let cursor = self.groups[gi].cursor;
            let next = self.model.step(cursor, max_dec).ok_or_else(|| {
                SimError::Invariant(format!("group at {cursor} has members but no next cursor"))
            })?;
            self.groups[gi].cursor = next;
        }
        self.groups.retain(|g| !g.ids.is_empty());
        self.log(now, "advance", Self::group_dump);
        if self.merge_groups() {
            self.log(now, "merge", Self::group_dump);
        }
        let idle = self.groups.is_empty();
        self.group_decide(now, idle)
    }

    /// Merges groups with equal cursors into the oldest of them.
    fn merge_groups(&mut self) -> bool {
        let mut merged = false;
        let mut i = 0;
        while i < self.groups.len() {
            let mut j = i + 1;
            while j < self.groups.len() {
                if self.groups[j].cursor == self.groups[i].cursor {
                    let g = self.groups.remove(j);
                    self.groups[i].ids.extend(g.ids);
                    self.groups[i].ids.sort_unstable();
                    merged = true;
                } else {
                    j += 1;
                }
            }
            i += 1;
        }
        merged
    }

    fn max_dec(&self, ids: &[u64]) -> u32 {
        ids.iter().map(|&id| self.req(id).dec).max().unwrap_or(1)
    }

    // ----- shared node execution -----

    fn start_instance(
        &mut self,
        start: Micros,
        cursor: NodeCursor,
        members: &[u64],
        groups: Vec<usize>,
        dump: String,
    ) -> Result<()> {
        if members.is_empty() {
            return Err(SimError::Invariant(format!(
                "node {cursor} started with no work"
            )));
        }
        if self.running.is_some() {
            return Err(SimError::Invariant("accelerator already busy".into()));
        }
        let batch = members.len() as u32;
        let duration = batched_latency(self.model.node(cursor.node), batch);
        for &id in members {
            let r = self.req_mut(id);
            if r.first_issue.is_none() {
                r.first_issue = Some(start);
            }
            r.max_batch = r.max_batch.max(batch);
        }
        self.busy += duration;
        self.instances += 1;
        if self.record_events {
            self.events.push(LogEvent {
                time_us: start,
                event: "start",
                entry_dump: format!("{dump} b={batch} d={duration}"),
            });
        }
        self.running = Some(Running {
            end: start + duration,
            cursor,
            groups,
        });
        Ok(())
    }

    fn complete_node(&mut self, now: Micros) -> Result<()> {
        let run = self
            .running
            .take()
            .ok_or_else(|| SimError::Invariant("completion without a running node".into()))?;
        self.log(now, "complete", |_| run.cursor.to_string());
        if self.lazy() {
            self.complete_lazy_node(now, run)
        } else {
            self.complete_group_node(now, run)
        }
    }

    // ----- lazy path: lazy batching and oracle -----

    fn complete_lazy_node(&mut self, now: Micros, run: Running) -> Result<()> {
        let cursor = run.cursor;
        let node_l1 = self.model.node(cursor.node).base_latency_us;
        let top = self
            .bst
            .active()
            .ok_or_else(|| SimError::Invariant("node completed with an empty table".into()))?;
        if top.next != cursor {
            return Err(SimError::Invariant(format!(
                "active entry moved from {cursor} to {} mid-node",
                top.next
            )));
        }
        let ids = top.request_ids.clone();
        let mut remaining = Vec::with_capacity(ids.len());
        for id in ids {
            let dec = self.req(id).dec;
            if self.model.has_work(cursor, dec) {
                self.req_mut(id).done_single += node_l1;
            }
            if self.model.is_last(cursor, dec) {
                self.req_mut(id).complete = Some(now);
                self.bst.retire(id)?;
                self.log(now, "retire", |e| e.bst.dump());
            } else {
                remaining.push(id);
            }
        }
        if !remaining.is_empty() {
            let next = self
                .model
                .step(cursor, self.max_dec(&remaining))
                .ok_or_else(|| {
                    SimError::Invariant(format!("entry at {cursor} has members but no next cursor"))
                })?;
            let outcome = self.bst.advance_top(next)?;
            if self.record_events {
                let ids = remaining
                    .iter()
                    .map(u64::to_string)
                    .collect::<Vec<_>>()
                    .join(" ");
                self.log(now, "advance", |_| format!("{ids}@{next}"));
                if let MergeOutcome::Merged { .. } = outcome {
                    self.log(now, "merge", |e| e.bst.dump());
                }
            }
        }
        self.lazy_boundary(now, now)
    }

    /// Admission check followed by starting the active entry.
    fn lazy_boundary(&mut self, now: Micros, mut start_at: Micros) -> Result<()> {
        if !self.queue.is_empty() {
            let was_empty = self.bst.is_empty();
            if let Some(ids) = self.lazy_admit(now)? {
                self.take_from_queue(&ids)?;
                let first = self.model.first_cursor();
                self.bst.push(ids, first, &self.model.name)?;
                self.log(now, "push", |e| e.bst.dump());
                if !was_empty {
                    start_at += self.cfg.preempt_overhead_us;
                }
            }
        }
        if cfg!(debug_assertions) {
            self.bst.check()?;
        }
        let Some(top) = self.bst.active() else {
            return Ok(());
        };
        let cursor = top.next;
        let members: Vec<u64> = top
            .request_ids
            .iter()
            .copied()
            .filter(|&id| self.model.has_work(cursor, self.req(id).dec))
            .collect();
        let dump = if self.record_events {
            dump_entries(std::iter::once((top.request_ids.as_slice(), cursor)))
        } else {
            String::new()
        };
        self.start_instance(start_at, cursor, &members, Vec::new(), dump)
    }

    fn in_flight_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.bst
            .entries()
            .iter()
            .flat_map(|e| e.request_ids.iter().copied())
    }

    fn charged_wait(&self, r: &ReqState, now: Micros) -> Micros {
        match (self.cfg.wait_accounting, r.first_issue) {
            (WaitAccounting::FirstIssue, Some(issue)) => issue - r.arrival,
            (WaitAccounting::Accumulated, Some(_)) => {
                (now - r.arrival).saturating_sub(r.done_single)
            }
            (_, None) => now - r.arrival,
        }
    }

    fn conservative_exec(&self, k: usize) -> Micros {
        let in_flight: Micros = if self.slack.credit_progress {
            self.in_flight_ids()
                .map(|id| self.single_exec.saturating_sub(self.req(id).done_single))
                .sum()
        } else {
            self.bst.in_flight() as Micros * self.single_exec
        };
        in_flight + k as Micros * self.single_exec
    }

    /// Exact batched time to drain the table plus `k` oldest queued
    /// requests, assuming no further admissions.
    fn oracle_exec(&self, k: usize) -> Micros {
        let assumed = |id: u64, cursor: NodeCursor| -> u32 {
            let r = self.req(id);
            match self.cfg.oracle_lengths {
                OracleLengths::Actual => r.dec,
                OracleLengths::Predicted => {
                    if !self.model.is_dynamic() {
                        1
                    } else if self.model.node(cursor.node).kind == crate::model::NodeKind::Decoder {
                        self.slack.dec_timesteps.max(cursor.timestep + 1)
                    } else {
                        self.slack.dec_timesteps
                    }
                }
            }
        };
        let mut stack: Vec<(Vec<u32>, NodeCursor)> = self
            .bst
            .entries()
            .iter()
            .map(|e| {
                (
                    e.request_ids
                        .iter()
                        .map(|&id| assumed(id, e.next))
                        .collect(),
                    e.next,
                )
            })
            .collect();
        if k > 0 {
            let first = self.model.first_cursor();
            let lens = self
                .queue
                .iter()
                .take(k)
                .map(|&i| assumed(self.reqs[i].id, first))
                .collect();
            stack.push((lens, first));
        }
        drain_time(self.model, stack)
    }

    fn lazy_admit(&mut self, now: Micros) -> Result<Option<Vec<u64>>> {
        let queue = self.queued();
        let max_wait = self
            .in_flight_ids()
            .map(|id| self.charged_wait(self.req(id), now))
            .max()
            .unwrap_or(0);
        let view = LazyView {
            now,
            queue: &queue,
            table_empty: self.bst.is_empty(),
            in_flight: self.bst.in_flight(),
            max_in_flight_wait_us: max_wait,
        };
        let (decision, check) = match self.cfg.kind {
            PolicyKind::LazyB => {
                let in_flight = self.conservative_exec(0);
                policy::lazyb_decide(&view, self.cfg, in_flight, self.single_exec)
            }
            PolicyKind::Oracle => policy::oracle_decide(&view, self.cfg, |k| self.oracle_exec(k)),
            _ => unreachable!("group policies do not use the table"),
        };
        let (ids, preempted) = match decision {
            Decision::Wait => return Ok(None),
            Decision::Dispatch { requests, .. } => (requests, false),
            Decision::AdmitLazy { requests } => (requests, true),
        };
        let check = check.ok_or_else(|| SimError::Invariant("admission without a check".into()))?;
        let k = ids.len();
        let conservative = self.conservative_exec(k);
        let oracle = (self.cfg.kind == PolicyKind::Oracle || self.audit_admissions)
            .then(|| self.oracle_exec(k));
        for &id in &ids {
            let wait = now - self.req(id).arrival;
            self.req_mut(id).admission_slack = Some(slack::slack_value(
                self.slack.sla_target_us,
                wait,
                check.predicted_exec_us,
            ));
        }
        self.admissions.push(AdmissionRecord {
            time_us: now,
            request_ids: ids.clone(),
            preempted,
            conservative_exec_us: conservative,
            oracle_exec_us: oracle,
            check,
        });
        Ok(Some(ids))
    }

    fn finish(self, meta: RunMeta) -> SimResult {
        let sla = self.cfg.sla_target_us;
        let records = self
            .reqs
            .iter()
            .map(|r| {
                let complete = r.complete.expect("drained");
                let latency = complete - r.arrival;
                RequestRecord {
                    id: r.id,
                    model: meta.model.clone(),
                    arrival_us: r.arrival,
                    first_issue_us: r.first_issue.expect("drained"),
                    complete_us: complete,
                    latency_us: latency,
                    sla_violated: latency > sla,
                    max_observed_batch: r.max_batch,
                    admission_slack_us: r.admission_slack,
                    actual_dec_timesteps: r.dec,
                }
            })
            .collect();
        SimResult {
            meta,
            records,
            admissions: self.admissions,
            events: self.events,
            busy_us: self.busy,
            node_instances: self.instances,
            dec_timesteps: self.slack.dec_timesteps,
        }
    }
}

/// Time to run a stack of (member decoder lengths, cursor) entries to
/// completion, top first, merging on equal cursors.
fn drain_time(model: &ModelGraph, mut stack: Vec<(Vec<u32>, NodeCursor)>) -> Micros {
    let mut total = 0;
    while let Some((lens, cursor)) = stack.last_mut() {
        let cur = *cursor;
        let working = lens.iter().filter(|&&d| model.has_work(cur, d)).count() as u32;
        if working > 0 {
            total += batched_latency(model.node(cur.node), working);
        }
        lens.retain(|&d| !model.is_last(cur, d));
        if lens.is_empty() {
            stack.pop();
            continue;
        }
        let max = lens.iter().copied().max().unwrap_or(1);
        match model.step(cur, max) {
            Some(next) => *cursor = next,
            None => {
                stack.pop();
                continue;
            }
        }
        while stack.len() >= 2 && stack[stack.len() - 1].1 == stack[stack.len() - 2].1 {
            let (top, _) = stack.pop().expect("two entries");
            let below = stack.last_mut().expect("two entries");
            below.0.extend(top);
        }
    }
    total
}
