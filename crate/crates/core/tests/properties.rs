//! Randomized checks of the structural invariants.

mod common;

use std::collections::BTreeSet;

use common::*;
use lazybatch::bst::{BatchStateTable, MergeOutcome};
use lazybatch::cost::{node_latency, throughput_curve};
use lazybatch::engine::{self, SimResult};
use lazybatch::metrics::{cdf, percentile, summarize_records};
use lazybatch::model::{build_model, ModelSpec, NodeSpec, NodeTemplate};
use lazybatch::policy::{PolicyConfig, PolicyKind};
use lazybatch::slack::{self, SlackConfig};
use lazybatch::sweep::Spread;
use lazybatch::traffic::{self, LengthDistribution, TrafficConfig};
use lazybatch::{Catalog, Micros, ModelGraph, NodeCursor, NodeKind};
use proptest::prelude::*;

fn arb_dynamic_spec() -> impl Strategy<Value = ModelSpec> {
    (
        0usize..3,
        1usize..3,
        1usize..3,
        0usize..2,
        1u32..4,
        1u32..6,
        prop::collection::vec(1u64..500, 10),
    )
        .prop_map(|(pro, enc, dec, epi, enc_t, max_dec, lat)| {
            let mut lat = lat.into_iter();
            let mut nodes = Vec::new();
            for (n, kind) in [
                (pro, NodeKind::Static),
                (enc, NodeKind::Encoder),
                (dec, NodeKind::Decoder),
                (epi, NodeKind::Static),
            ] {
                nodes.extend((0..n).map(|_| NodeSpec::new(kind, lat.next().unwrap())));
            }
            dynamic_spec("dyn", enc_t, max_dec, nodes)
        })
}

fn walk(model: &ModelGraph, dec: u32) -> Vec<NodeCursor> {
    let mut out = vec![model.first_cursor()];
    while let Some(next) = model.next_cursor(*out.last().unwrap(), dec).unwrap() {
        out.push(next);
    }
    out
}

fn template(l1: Micros, s: u32) -> NodeTemplate {
    NodeTemplate {
        id: 0,
        kind: NodeKind::Static,
        weight_group: None,
        base_latency_us: l1,
        saturation_batch: s,
    }
}

proptest! {
    #[test]
    fn cursor_walk_visits_unrolled_len_once(spec in arb_dynamic_spec(), d in 1u32..6) {
        let model = build_model(&spec).unwrap();
        let dec = d.min(model.max_dec_timesteps);
        let cursors = walk(&model, dec);
        prop_assert_eq!(cursors.len(), model.unrolled_len(dec).unwrap());
        let unique: BTreeSet<_> = cursors.iter().map(|c| (c.node, c.timestep)).collect();
        prop_assert_eq!(unique.len(), cursors.len());
        prop_assert_eq!(model.cursors(dec).collect::<Vec<_>>(), cursors);
        prop_assert_eq!(build_model(&spec).unwrap(), model);
    }

    #[test]
    fn shorter_walk_is_prefix_compatible(spec in arb_dynamic_spec(), a in 1u32..6, b in 1u32..6) {
        let model = build_model(&spec).unwrap();
        let (a, b) = (a.min(model.max_dec_timesteps), b.min(model.max_dec_timesteps));
        let (short, long) = (walk(&model, a.min(b)), walk(&model, a.max(b)));
        let shared = |cs: &[NodeCursor]| -> Vec<NodeCursor> {
            cs.iter()
                .copied()
                .filter(|c| model.node(c.node).kind != NodeKind::Decoder || c.timestep < a.min(b))
                .collect()
        };
        prop_assert_eq!(shared(&short), shared(&long));
    }

    #[test]
    fn batching_never_costs_more_than_singles(l1 in 1u64..5000, s in 1u32..64, b in 1u32..300) {
        let n = template(l1, s);
        let batched = node_latency(&n, b).unwrap();
        prop_assert!(batched <= u64::from(b) * l1);
        prop_assert!(batched >= l1);
        if b <= s {
            prop_assert_eq!(batched, l1);
        }
        // Past saturation the cost tracks L1*b/S to within one rounding step.
        let ideal = u128::from(l1) * u128::from(b);
        let scaled = u128::from(batched) * u128::from(s);
        if b >= s {
            prop_assert!(scaled >= ideal && scaled < ideal + u128::from(s));
        }
    }

    #[test]
    fn curve_latency_per_input_falls_until_saturation(l in prop::collection::vec(1u64..3000, 1..6)) {
        let spec = static_spec("m", &l);
        let model = build_model(&spec).unwrap();
        let batches: Vec<u32> = (1..=64).collect();
        let curve = throughput_curve(&model, &batches).unwrap();
        let single: u64 = l.iter().sum();
        for w in curve.windows(2).take(15) {
            prop_assert!(w[1].throughput_per_sec >= w[0].throughput_per_sec);
            prop_assert!(w[1].avg_latency_per_input_us <= w[0].avg_latency_per_input_us);
        }
        for p in &curve[15..] {
            let ideal = f64::from(p.batch) * single as f64 / 16.0;
            let total = p.total_latency_us as f64;
            prop_assert!(total >= ideal && total < ideal + l.len() as f64);
            if p.batch % 16 == 0 {
                prop_assert_eq!(p.throughput_per_sec, curve[15].throughput_per_sec);
            }
        }
    }

    #[test]
    fn slack_is_monotone(sla in 0u64..1_000_000, wait in 0u64..500_000, exec in prop::collection::vec(1u64..50_000, 1..8), extra in 1u64..1000) {
        let cfg = SlackConfig::new(sla, 1).unwrap();
        let base = slack::slack(&cfg, wait, &exec).unwrap();
        prop_assert!(slack::slack(&cfg, wait + extra, &exec).unwrap().slack_us < base.slack_us);
        let mut more = exec.clone();
        more[0] += extra;
        prop_assert!(slack::slack(&cfg, wait, &more).unwrap().slack_us < base.slack_us);
        let looser = SlackConfig::new(sla + extra, 1).unwrap();
        prop_assert!(slack::slack(&looser, wait, &exec).unwrap().slack_us > base.slack_us);
        let total: u64 = exec.iter().sum();
        prop_assert_eq!(base.slack_us, sla as i64 - (wait + total) as i64);
    }

    #[test]
    fn single_request_slack_is_sla_minus_latency(sla in 0u64..1_000_000, wait in 0u64..100_000, exec in 1u64..100_000) {
        let cfg = SlackConfig::new(sla, 1).unwrap();
        let s = slack::slack(&cfg, wait, &[exec]).unwrap();
        prop_assert_eq!(s.slack_us, sla as i64 - wait as i64 - exec as i64);
    }

    #[test]
    fn empirical_cdf_rises_to_one(v in prop::collection::vec(0u64..1000, 1..200)) {
        let c = cdf(&v).unwrap();
        prop_assert!(c.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
        prop_assert_eq!(c.last().unwrap().1, 1.0);
    }

    #[test]
    fn percentiles_are_ordered(v in prop::collection::vec(0u64..1_000_000, 1..300)) {
        let p = |q| percentile(&v, q).unwrap();
        prop_assert!(p(0.25) <= p(0.5) && p(0.5) <= p(0.75) && p(0.75) <= p(0.99));
        prop_assert!(v.contains(&p(0.99)));
    }

    #[test]
    fn spread_ignores_run_order(mut v in prop::collection::vec(0.0f64..1e7, 1..40), seed in any::<u64>()) {
        let a = Spread::of(&v);
        let n = v.len();
        v.rotate_left((seed as usize) % n);
        v.reverse();
        prop_assert_eq!(a, Spread::of(&v));
    }

    #[test]
    fn length_samples_stay_in_support(u in 0.0f64..1.0) {
        let d = LengthDistribution::shipped_en_de();
        let len = traffic::sample_length(&d, u);
        prop_assert!(d.points().iter().any(|&(l, _)| l == len));
        prop_assert!(d.cdf_at(len) >= u);
    }

    #[test]
    fn traces_are_seed_deterministic(seed in any::<u64>(), rate in 10.0f64..2000.0) {
        let cat = Catalog::shipped();
        let model = cat.get("gnmt").unwrap();
        let cfg = TrafficConfig {
            rate_qps: rate,
            duration_us: 50_000,
            seed,
            model_name: "gnmt".into(),
            length_dist: Some(LengthDistribution::shipped_en_de()),
        };
        let a = traffic::gen_trace(&cfg, model).unwrap();
        prop_assert_eq!(&a, &traffic::gen_trace(&cfg, model).unwrap());
        prop_assert!(a.windows(2).all(|w| w[0].arrival_us <= w[1].arrival_us));
        prop_assert!(a.iter().all(|r| r.arrival_us <= 50_000 && (1..=80).contains(&r.actual_dec_timesteps)));
    }
}

// ----- batch state table against a reference stack -----

#[derive(Debug, Clone)]
enum Op {
    Push(Vec<u64>, NodeCursor, bool),
    Advance(NodeCursor),
    Retire(usize),
}

fn arb_cursor() -> impl Strategy<Value = NodeCursor> {
    (0usize..3, 0u32..2).prop_map(|(n, t)| NodeCursor::new(n, t))
}

fn arb_op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (
            prop::collection::vec(0u64..40, 1..4),
            arb_cursor(),
            any::<bool>()
        )
            .prop_map(|(ids, c, alt)| Op::Push(ids, c, alt)),
        arb_cursor().prop_map(Op::Advance),
        (0usize..64).prop_map(Op::Retire),
    ]
}

type RefEntry = (BTreeSet<u64>, NodeCursor, &'static str);

fn ref_merge_adjacent(stack: &mut Vec<RefEntry>, upper: usize) {
    let (ids, ..) = stack.remove(upper);
    stack[upper - 1].0.extend(ids);
}

fn snapshot(t: &BatchStateTable) -> Vec<(Vec<u64>, NodeCursor, String)> {
    t.entries()
        .iter()
        .map(|e| (e.request_ids.clone(), e.next, e.model.clone()))
        .collect()
}

fn ref_snapshot(s: &[RefEntry]) -> Vec<(Vec<u64>, NodeCursor, String)> {
    s.iter()
        .map(|(ids, c, m)| (ids.iter().copied().collect(), *c, m.to_string()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn table_matches_reference_stack(ops in prop::collection::vec(arb_op(), 1..60)) {
        let mut t = BatchStateTable::new();
        let mut r: Vec<RefEntry> = Vec::new();
        for op in ops {
            match op {
                Op::Push(ids, cur, alt) => {
                    let model = if alt { "b" } else { "a" };
                    let set: BTreeSet<u64> = ids.iter().copied().collect();
                    let dup = set.len() != ids.len() || r.iter().any(|e| !e.0.is_disjoint(&set));
                    // Pushes happen only onto a top at a different position.
                    let same_as_top = r.last().is_some_and(|e| e.1 == cur && e.2 == model);
                    if same_as_top {
                        continue;
                    }
                    let res = t.push(ids, cur, model);
                    prop_assert_eq!(res.is_err(), dup);
                    if !dup {
                        r.push((set, cur, model));
                    }
                }
                Op::Advance(cur) => {
                    let res = t.advance_top(cur);
                    if r.is_empty() {
                        prop_assert!(res.is_err());
                        continue;
                    }
                    r.last_mut().unwrap().1 = cur;
                    let mut merges = 0;
                    while r.len() >= 2 && r[r.len() - 1].1 == r[r.len() - 2].1 && r[r.len() - 1].2 == r[r.len() - 2].2 {
                        let upper = r.len() - 1;
                        ref_merge_adjacent(&mut r, upper);
                        merges += 1;
                    }
                    let expect = if merges == 0 { MergeOutcome::NotMerged } else { MergeOutcome::Merged { merges } };
                    prop_assert_eq!(res.unwrap(), expect);
                }
                Op::Retire(k) => {
                    let all: Vec<u64> = r.iter().flat_map(|e| e.0.iter().copied()).collect();
                    if all.is_empty() {
                        prop_assert!(t.retire(k as u64).is_err());
                        continue;
                    }
                    let id = all[k % all.len()];
                    t.retire(id).unwrap();
                    let pos = r.iter().position(|e| e.0.contains(&id)).unwrap();
                    r[pos].0.remove(&id);
                    if r[pos].0.is_empty() {
                        r.remove(pos);
                        if pos > 0 && pos < r.len() && r[pos - 1].1 == r[pos].1 && r[pos - 1].2 == r[pos].2 {
                            ref_merge_adjacent(&mut r, pos);
                        }
                    }
                    prop_assert!(t.retire(id).is_err());
                }
            }
            prop_assert_eq!(snapshot(&t), ref_snapshot(&r));
            prop_assert_eq!(t.in_flight(), r.iter().map(|e| e.0.len()).sum::<usize>());
            t.check().unwrap();
            let before = t.probe_count();
            let _ = t.active();
            prop_assert_eq!(t.probe_count() - before, 1);
        }
    }
}

// ----- engine runs on random small traces -----

fn small_catalog() -> Catalog {
    catalog(&[
        static_spec("flat", &[300, 500, 200]),
        conv_rnn_fc(),
        dynamic_spec(
            "encdec",
            2,
            5,
            vec![
                NodeSpec::new(NodeKind::Static, 150),
                NodeSpec::new(NodeKind::Encoder, 90).with_weight_group(0),
                NodeSpec::new(NodeKind::Decoder, 110).with_weight_group(1),
                NodeSpec::new(NodeKind::Decoder, 70).with_saturation(2),
            ],
        ),
    ])
}

fn arb_policy() -> impl Strategy<Value = PolicyConfig> {
    (0usize..5, 0u64..3000, 1u32..6, 500u64..20_000).prop_map(|(k, w, mb, sla)| {
        let p = match k {
            0 => PolicyConfig::serial(),
            1 => PolicyConfig::graphb(w),
            2 => PolicyConfig::cellular(w),
            3 => PolicyConfig::lazyb(),
            _ => PolicyConfig::oracle(),
        };
        p.with_max_batch(mb).with_sla(sla)
    })
}

fn arb_arrivals() -> impl Strategy<Value = Vec<(Micros, u32)>> {
    prop::collection::vec((0u64..1500, 1u32..6), 1..14).prop_map(|v| {
        let mut t = 0;
        v.into_iter()
            .map(|(gap, dec)| {
                t += gap;
                (t, dec)
            })
            .collect()
    })
}

fn run_on(model: &str, arrivals: &[(Micros, u32)], policy: &PolicyConfig) -> SimResult {
    let cat = small_catalog();
    let m = cat.get(model).unwrap();
    let clipped: Vec<(Micros, u32)> = arrivals
        .iter()
        .map(|&(t, d)| {
            (
                t,
                if m.is_dynamic() {
                    d.min(m.max_dec_timesteps)
                } else {
                    1
                },
            )
        })
        .collect();
    engine::run(&cat, &engine::trace_of(model, &clipped), policy, &logged()).unwrap()
}

/// (start, duration) of every node instance, from the event log.
fn instances(res: &SimResult) -> Vec<(Micros, Micros)> {
    res.events
        .iter()
        .filter(|e| e.event == "start")
        .map(|e| {
            let d = e.entry_dump.rsplit("d=").next().unwrap().parse().unwrap();
            (e.time_us, d)
        })
        .collect()
}

fn single_path_latency(m: &ModelGraph, dec: u32) -> Micros {
    m.cursors(dec).map(|c| m.node(c.node).base_latency_us).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(192))]

    #[test]
    fn engine_invariants(model_ix in 0usize..3, arrivals in arb_arrivals(), policy in arb_policy()) {
        let model = ["flat", "speech", "encdec"][model_ix];
        let res = run_on(model, &arrivals, &policy);
        let cat = small_catalog();
        let m = cat.get(model).unwrap();
        prop_assert_eq!(res.records.len(), arrivals.len());

        for r in &res.records {
            prop_assert!(r.arrival_us <= r.first_issue_us && r.first_issue_us < r.complete_us);
            prop_assert_eq!(r.latency_us, r.complete_us - r.arrival_us);
            prop_assert_eq!(r.sla_violated, r.latency_us > policy.sla_target_us);
            prop_assert!(r.max_observed_batch >= 1 && r.max_observed_batch <= policy.max_batch);
            prop_assert!(r.complete_us - r.first_issue_us >= single_path_latency(m, r.actual_dec_timesteps));
        }

        // Nothing happens while a node runs.
        let ev = &res.events;
        for (i, e) in ev.iter().enumerate().filter(|(_, e)| e.event == "start") {
            let d: Micros = e.entry_dump.rsplit("d=").next().unwrap().parse().unwrap();
            let next = &ev[i + 1];
            prop_assert_eq!(next.event, "complete");
            prop_assert_eq!(next.time_us, e.time_us + d);
        }
        let inst = instances(&res);
        prop_assert_eq!(inst.iter().map(|i| i.1).sum::<Micros>(), res.busy_us);
        prop_assert_eq!(inst.len() as u64, res.node_instances);
        prop_assert!(res.events.windows(2).all(|w| w[0].time_us <= w[1].time_us));

        // Serial and lazy policies never idle with work in the system.
        if matches!(policy.kind, PolicyKind::Serial | PolicyKind::LazyB | PolicyKind::Oracle) {
            let mut free_at = 0;
            for &(start, d) in &inst {
                if start > free_at {
                    let waiting = res
                        .records
                        .iter()
                        .any(|r| r.arrival_us < start && r.complete_us > free_at);
                    prop_assert!(!waiting, "idle gap {}..{}", free_at, start);
                }
                free_at = start + d;
            }
        }

        // Lazy admissions onto a busy table pass the slack gate.
        for a in &res.admissions {
            if a.preempted {
                prop_assert!(a.check.min_slack_us >= 0);
            }
        }

        let again = run_on(model, &arrivals, &policy);
        let csv = |r: &SimResult| {
            let mut b = Vec::new();
            r.write_csv_to(&mut b).unwrap();
            b
        };
        prop_assert_eq!(csv(&res), csv(&again));
        prop_assert_eq!(event_log(&res), event_log(&again));
    }

    #[test]
    fn graph_batches_obey_their_triggers(arrivals in arb_arrivals(), w in 0u64..3000, mb in 1u32..5) {
        let policy = PolicyConfig::graphb(w).with_max_batch(mb);
        let res = run_on("flat", &arrivals, &policy);
        for e in res.events.iter().filter(|e| e.event == "push") {
            let top = e.entry_dump.rsplit(';').next().unwrap();
            let ids: Vec<u64> = top.split('@').next().unwrap().split(' ').map(|s| s.parse().unwrap()).collect();
            prop_assert!(ids.len() <= mb as usize);
            let oldest = res.records[ids[0] as usize].arrival_us;
            let queued_then = res
                .records
                .iter()
                .filter(|r| r.arrival_us <= e.time_us && r.first_issue_us >= e.time_us)
                .count();
            prop_assert!(e.time_us - oldest >= w || queued_then >= mb as usize);
        }
    }

    #[test]
    fn serial_matches_unit_graph_batching(model_ix in 0usize..3, arrivals in arb_arrivals()) {
        let model = ["flat", "speech", "encdec"][model_ix];
        let serial = run_on(model, &arrivals, &PolicyConfig::serial());
        let graph = run_on(model, &arrivals, &PolicyConfig::graphb(0).with_max_batch(1));
        prop_assert_eq!(event_log(&serial), event_log(&graph));
    }

    #[test]
    fn cellular_with_prologue_matches_graph_batching(arrivals in arb_arrivals(), w in 0u64..3000, mb in 1u32..6) {
        let cell = run_on("speech", &arrivals, &PolicyConfig::cellular(w).with_max_batch(mb));
        let graph = run_on("speech", &arrivals, &PolicyConfig::graphb(w).with_max_batch(mb));
        prop_assert_eq!(event_log(&cell), event_log(&graph));
    }

    #[test]
    fn violation_rate_falls_with_sla(arrivals in arb_arrivals(), slas in prop::collection::vec(100u64..20_000, 2..6)) {
        let res = run_on("encdec", &arrivals, &PolicyConfig::graphb(500));
        let mut slas = slas;
        slas.sort_unstable();
        let rates: Vec<f64> = slas
            .iter()
            .map(|&s| summarize_records(&res.records, s, 1_000_000).unwrap().sla_violation_rate)
            .collect();
        prop_assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    }
}
