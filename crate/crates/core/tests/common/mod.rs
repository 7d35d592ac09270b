//! Small models and run helpers shared by the integration tests.
#![allow(dead_code)]

use lazybatch::engine::{self, RunOptions, SimResult};
use lazybatch::model::{GraphKind, ModelSpec, NodeSpec};
use lazybatch::policy::PolicyConfig;
use lazybatch::{Catalog, Micros, NodeKind};

pub fn static_spec(name: &str, latencies: &[Micros]) -> ModelSpec {
    ModelSpec {
        name: name.into(),
        kind: GraphKind::StaticGraph,
        enc_timesteps: None,
        max_dec_timesteps: None,
        calibration_dec_timesteps: None,
        dec_timesteps: None,
        nodes: latencies
            .iter()
            .map(|&l| NodeSpec::new(NodeKind::Static, l))
            .collect(),
    }
}

pub fn dynamic_spec(name: &str, enc: u32, max_dec: u32, nodes: Vec<NodeSpec>) -> ModelSpec {
    ModelSpec {
        name: name.into(),
        kind: GraphKind::DynamicGraph,
        enc_timesteps: Some(enc),
        max_dec_timesteps: Some(max_dec),
        calibration_dec_timesteps: None,
        dec_timesteps: None,
        nodes,
    }
}

pub fn catalog(specs: &[ModelSpec]) -> Catalog {
    Catalog::from_specs(specs).expect("valid test catalog")
}

/// One encoder and one decoder cell sharing weights.
pub fn single_cell(max_dec: u32) -> ModelSpec {
    dynamic_spec(
        "cell",
        1,
        max_dec,
        vec![
            NodeSpec::new(NodeKind::Encoder, 100).with_weight_group(0),
            NodeSpec::new(NodeKind::Decoder, 100).with_weight_group(0),
        ],
    )
}

/// Convolutional prologue, recurrent cells, fully connected epilogue.
pub fn conv_rnn_fc() -> ModelSpec {
    dynamic_spec(
        "speech",
        3,
        6,
        vec![
            NodeSpec::new(NodeKind::Static, 300),
            NodeSpec::new(NodeKind::Encoder, 120).with_weight_group(0),
            NodeSpec::new(NodeKind::Decoder, 120).with_weight_group(0),
            NodeSpec::new(NodeKind::Static, 200),
        ],
    )
}

pub fn logged() -> RunOptions {
    RunOptions {
        record_events: true,
        ..RunOptions::default()
    }
}

pub fn run(cat: &Catalog, arrivals: &[(Micros, u32)], policy: &PolicyConfig) -> SimResult {
    let model = cat.models()[0].name.clone();
    engine::run(cat, &engine::trace_of(&model, arrivals), policy, &logged()).expect("run succeeds")
}

pub fn completions(res: &SimResult) -> Vec<Micros> {
    res.records.iter().map(|r| r.complete_us).collect()
}

pub fn event_log(res: &SimResult) -> String {
    let mut buf = Vec::new();
    res.write_event_log_to(&mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}
