//! DNN model graphs and their unrolled execution order.
//!
//! A model is a serialized list of node templates laid out as
//! `Static* Encoder+ Decoder+ Static*` (dynamic graphs) or `Static+` (static
//! graphs). Encoder nodes are unrolled over a fixed number of timesteps and
//! decoder nodes over the request's actual output length. Within each
//! recurrent run the unroll is timestep-major: every node of timestep `t`
//! runs before any node of timestep `t + 1`.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

pub type Micros = u64;

pub const DEFAULT_SATURATION_BATCH: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Static,
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GraphKind {
    #[serde(rename = "static")]
    StaticGraph,
    #[serde(rename = "dynamic")]
    DynamicGraph,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeTemplate {
    pub id: usize,
    pub kind: NodeKind,
    /// Nodes sharing a weight group share parameters across timesteps.
    pub weight_group: Option<u32>,
    /// Single-batch latency.
    pub base_latency_us: Micros,
    /// Batch size at which throughput stops improving.
    pub saturation_batch: u32,
}

/// Position in a request's unrolled execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeCursor {
    pub node: usize,
    pub timestep: u32,
}

impl NodeCursor {
    pub const fn new(node: usize, timestep: u32) -> Self {
        NodeCursor { node, timestep }
    }
}

impl fmt::Display for NodeCursor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.node, self.timestep)
    }
}

/// Catalog record describing one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub kind: GraphKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enc_timesteps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_dec_timesteps: Option<u32>,
    /// Decoder length at which the catalog latencies were calibrated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_dec_timesteps: Option<u32>,
    /// Predictor decoder length overriding the coverage-derived default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dec_timesteps: Option<u32>,
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub kind: NodeKind,
    pub base_latency_us: Micros,
    #[serde(default = "default_saturation")]
    pub saturation_batch: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_group: Option<u32>,
}

fn default_saturation() -> u32 {
    DEFAULT_SATURATION_BATCH
}

impl NodeSpec {
    pub fn new(kind: NodeKind, base_latency_us: Micros) -> Self {
        NodeSpec {
            kind,
            base_latency_us,
            saturation_batch: DEFAULT_SATURATION_BATCH,
            weight_group: None,
        }
    }

    pub fn with_weight_group(mut self, group: u32) -> Self {
        self.weight_group = Some(group);
        self
    }

    pub fn with_saturation(mut self, saturation_batch: u32) -> Self {
        self.saturation_batch = saturation_batch;
        self
    }
}

/// A validated, immutable model graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelGraph {
    pub name: String,
    pub nodes: Vec<NodeTemplate>,
    pub kind: GraphKind,
    pub enc_timesteps: u32,
    pub max_dec_timesteps: u32,
    pub calibration_dec_timesteps: u32,
    pub dec_timesteps_override: Option<u32>,
    prologue: Range<usize>,
    encoder: Range<usize>,
    decoder: Range<usize>,
    epilogue: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment {
    Prologue,
    Encoder,
    Decoder,
    Epilogue,
}

pub fn build_model(spec: &ModelSpec) -> Result<ModelGraph> {
    let invalid = |reason: String| SimError::InvalidModel {
        model: spec.name.clone(),
        reason,
    };
    if spec.name.is_empty() {
        return Err(invalid("empty model name".into()));
    }
    if spec.nodes.is_empty() {
        return Err(invalid("model has no nodes".into()));
    }

    let mut nodes = Vec::with_capacity(spec.nodes.len());
    for (id, n) in spec.nodes.iter().enumerate() {
        if n.base_latency_us == 0 {
            return Err(invalid(format!("node {id} has zero latency")));
        }
        if n.saturation_batch == 0 {
            return Err(invalid(format!("node {id} has zero saturation batch")));
        }
        nodes.push(NodeTemplate {
            id,
            kind: n.kind,
            weight_group: n.weight_group,
            base_latency_us: n.base_latency_us,
            saturation_batch: n.saturation_batch,
        });
    }

    let mut groups: HashMap<u32, (Micros, u32)> = HashMap::new();
    for n in &nodes {
        if let Some(g) = n.weight_group {
            let params = (n.base_latency_us, n.saturation_batch);
            if *groups.entry(g).or_insert(params) != params {
                return Err(invalid(format!(
                    "weight group {g} has mismatched latency/saturation parameters"
                )));
            }
        }
    }

    // Expected layout: Static* Encoder+ Decoder+ Static*.
    let kinds: Vec<NodeKind> = nodes.iter().map(|n| n.kind).collect();
    let mut i = 0;
    while i < kinds.len() && kinds[i] == NodeKind::Static {
        i += 1;
    }
    let prologue = 0..i;
    let enc_start = i;
    while i < kinds.len() && kinds[i] == NodeKind::Encoder {
        i += 1;
    }
    let encoder = enc_start..i;
    let dec_start = i;
    while i < kinds.len() && kinds[i] == NodeKind::Decoder {
        i += 1;
    }
    let decoder = dec_start..i;
    let epi_start = i;
    while i < kinds.len() && kinds[i] == NodeKind::Static {
        i += 1;
    }
    let epilogue = epi_start..i;
    if i != kinds.len() {
        return Err(invalid(format!(
            "node {i} ({:?}) breaks the static/encoder/decoder/static layout; \
             encoder and decoder nodes must each form one contiguous run, encoder first",
            kinds[i]
        )));
    }

    let (enc_timesteps, max_dec_timesteps, calibration_dec) = match spec.kind {
        GraphKind::StaticGraph => {
            if !encoder.is_empty() || !decoder.is_empty() {
                return Err(invalid(
                    "static graph contains encoder/decoder nodes".into(),
                ));
            }
            (1, 1, 1)
        }
        GraphKind::DynamicGraph => {
            if encoder.is_empty() || decoder.is_empty() {
                return Err(invalid(
                    "dynamic graph needs at least one encoder and one decoder node".into(),
                ));
            }
            let enc = spec
                .enc_timesteps
                .filter(|&t| t > 0)
                .ok_or_else(|| invalid("dynamic graph needs enc_timesteps >= 1".into()))?;
            let max_dec = spec
                .max_dec_timesteps
                .filter(|&t| t > 0)
                .ok_or_else(|| invalid("dynamic graph needs max_dec_timesteps >= 1".into()))?;
            let cal = spec.calibration_dec_timesteps.unwrap_or(max_dec);
            if cal == 0 || cal > max_dec {
                return Err(invalid(format!(
                    "calibration_dec_timesteps {cal} outside 1..={max_dec}"
                )));
            }
            (enc, max_dec, cal)
        }
    };
    if let Some(d) = spec.dec_timesteps {
        if d == 0 {
            return Err(invalid("dec_timesteps override must be >= 1".into()));
        }
    }

    Ok(ModelGraph {
        name: spec.name.clone(),
        nodes,
        kind: spec.kind,
        enc_timesteps,
        max_dec_timesteps,
        calibration_dec_timesteps: calibration_dec,
        dec_timesteps_override: spec.dec_timesteps,
        prologue,
        encoder,
        decoder,
        epilogue,
    })
}

impl ModelGraph {
    pub fn is_dynamic(&self) -> bool {
        self.kind == GraphKind::DynamicGraph
    }

    pub fn node(&self, id: usize) -> &NodeTemplate {
        &self.nodes[id]
    }

    pub fn has_epilogue(&self) -> bool {
        !self.epilogue.is_empty()
    }

    fn segment(&self, node: usize) -> Segment {
        if self.prologue.contains(&node) {
            Segment::Prologue
        } else if self.encoder.contains(&node) {
            Segment::Encoder
        } else if self.decoder.contains(&node) {
            Segment::Decoder
        } else {
            Segment::Epilogue
        }
    }

    fn check_dec(&self, actual_dec: u32) -> Result<u32> {
        if !self.is_dynamic() {
            return Ok(1);
        }
        if actual_dec == 0 || actual_dec > self.max_dec_timesteps {
            return Err(SimError::DecoderLength {
                model: self.name.clone(),
                len: actual_dec,
                max: self.max_dec_timesteps,
            });
        }
        Ok(actual_dec)
    }

    pub fn unrolled_len(&self, actual_dec: u32) -> Result<usize> {
        let dec = self.check_dec(actual_dec)? as usize;
        Ok(self.prologue.len()
            + self.epilogue.len()
            + self.encoder.len() * self.enc_timesteps as usize
            + self.decoder.len() * dec)
    }

    pub fn first_cursor(&self) -> NodeCursor {
        NodeCursor::new(0, 0)
    }

    /// Last cursor of a request with the given decoder length.
    pub fn last_cursor(&self, actual_dec: u32) -> NodeCursor {
        if self.has_epilogue() || !self.is_dynamic() {
            NodeCursor::new(self.nodes.len() - 1, 0)
        } else {
            NodeCursor::new(self.decoder.end - 1, actual_dec.max(1) - 1)
        }
    }

    pub fn is_valid(&self, cur: NodeCursor, actual_dec: u32) -> bool {
        if cur.node >= self.nodes.len() {
            return false;
        }
        match self.segment(cur.node) {
            Segment::Prologue | Segment::Epilogue => cur.timestep == 0,
            Segment::Encoder => cur.timestep < self.enc_timesteps,
            Segment::Decoder => cur.timestep < actual_dec,
        }
    }

    /// Successor of `cur` in the unrolled order, or `None` once the request
    /// is done.
    pub fn next_cursor(&self, cur: NodeCursor, actual_dec: u32) -> Result<Option<NodeCursor>> {
        let dec = self.check_dec(actual_dec)?;
        if !self.is_valid(cur, dec) {
            return Err(SimError::InvalidCursor {
                model: self.name.clone(),
                cursor: cur.to_string(),
            });
        }
        Ok(self.step(cur, dec))
    }

    /// Unchecked successor; `cur` must be valid for `dec`.
    pub(crate) fn step(&self, cur: NodeCursor, dec: u32) -> Option<NodeCursor> {
        let n = cur.node;
        let t = cur.timestep;
        match self.segment(n) {
            Segment::Prologue => {
                if n + 1 < self.nodes.len() {
                    Some(NodeCursor::new(n + 1, 0))
                } else {
                    None
                }
            }
            Segment::Encoder => {
                if n + 1 < self.encoder.end {
                    Some(NodeCursor::new(n + 1, t))
                } else if t + 1 < self.enc_timesteps {
                    Some(NodeCursor::new(self.encoder.start, t + 1))
                } else {
                    Some(NodeCursor::new(self.decoder.start, 0))
                }
            }
            Segment::Decoder => {
                if n + 1 < self.decoder.end {
                    Some(NodeCursor::new(n + 1, t))
                } else if t + 1 < dec {
                    Some(NodeCursor::new(self.decoder.start, t + 1))
                } else if self.has_epilogue() {
                    Some(NodeCursor::new(self.epilogue.start, 0))
                } else {
                    None
                }
            }
            Segment::Epilogue => {
                if n + 1 < self.nodes.len() {
                    Some(NodeCursor::new(n + 1, 0))
                } else {
                    None
                }
            }
        }
    }

    /// Whether a request with decoder length `dec` executes `cur`. Members of
    /// a shared batch whose decoding already ended skip the remaining decoder
    /// timesteps and wait for the epilogue.
    pub fn has_work(&self, cur: NodeCursor, dec: u32) -> bool {
        match self.segment(cur.node) {
            Segment::Decoder => cur.timestep < dec,
            _ => true,
        }
    }

    /// Whether `cur` is the final instance a request with length `dec` runs.
    pub fn is_last(&self, cur: NodeCursor, dec: u32) -> bool {
        cur == self.last_cursor(dec)
    }

    /// Zero-based rank of `cur` in the unrolled order for decoder length `dec`.
    pub fn position(&self, cur: NodeCursor, dec: u32) -> usize {
        let enc_t = self.enc_timesteps as usize;
        let t = cur.timestep as usize;
        match self.segment(cur.node) {
            Segment::Prologue => cur.node,
            Segment::Encoder => {
                self.prologue.len() + t * self.encoder.len() + (cur.node - self.encoder.start)
            }
            Segment::Decoder => {
                self.prologue.len()
                    + enc_t * self.encoder.len()
                    + t * self.decoder.len()
                    + (cur.node - self.decoder.start)
            }
            Segment::Epilogue => {
                self.prologue.len()
                    + enc_t * self.encoder.len()
                    + dec as usize * self.decoder.len()
                    + (cur.node - self.epilogue.start)
            }
        }
    }

    /// Iterates every cursor of a request with decoder length `dec`.
    pub fn cursors(&self, dec: u32) -> impl Iterator<Item = NodeCursor> + '_ {
        let dec = if self.is_dynamic() { dec.max(1) } else { 1 };
        std::iter::successors(Some(self.first_cursor()), move |&c| self.step(c, dec))
    }
}

/// Set of models a simulation can resolve by name.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    models: Vec<ModelGraph>,
}

const SHIPPED_CATALOG: &str = include_str!("../data/catalog.json");

impl Catalog {
    pub fn from_specs(specs: &[ModelSpec]) -> Result<Self> {
        let mut models: Vec<ModelGraph> = Vec::with_capacity(specs.len());
        for spec in specs {
            let model = build_model(spec)?;
            if models.iter().any(|m| m.name == model.name) {
                return Err(SimError::InvalidModel {
                    model: model.name,
                    reason: "duplicate model name in catalog".into(),
                });
            }
            models.push(model);
        }
        Ok(Catalog { models })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let specs: Vec<ModelSpec> = serde_json::from_str(text)?;
        Self::from_specs(&specs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("catalog {}", path.display())))
    }

    /// The calibrated resnet / gnmt / transformer catalog shipped with the crate.
    pub fn shipped() -> Self {
        Self::from_json(SHIPPED_CATALOG).expect("shipped catalog is valid")
    }

    pub fn shipped_json() -> &'static str {
        SHIPPED_CATALOG
    }

    pub fn get(&self, name: &str) -> Result<&ModelGraph> {
        self.models
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| SimError::UnknownModel(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.models.iter().any(|m| m.name == name)
    }

    pub fn models(&self) -> &[ModelGraph] {
        &self.models
    }
}
