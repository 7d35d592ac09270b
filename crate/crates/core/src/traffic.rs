//! Open-loop request generation and trace files.
//!
//! Arrivals follow a Poisson process: inter-arrival gaps are drawn by inverse
//! transform, `-ln(U) * 1e6 / rate` microseconds, rounded to the nearest
//! microsecond. Decoder lengths come from an inverse-CDF step lookup. The PRNG
//! is `Xoshiro256PlusPlus` seeded through SplitMix64 (`seed_from_u64`), so a
//! seed always yields the same trace.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::model::{Catalog, Micros, ModelGraph};

const SHIPPED_LENGTH_CDF: &str = include_str!("../data/length_cdf_en_de.json");

/// Empirical CDF over output lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LengthCdfFile", into = "LengthCdfFile")]
pub struct LengthDistribution {
    points: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LengthCdfFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    synthetic_points: Vec<u32>,
    cdf: Vec<(u32, f64)>,
}

impl TryFrom<LengthCdfFile> for LengthDistribution {
    type Error = SimError;
    fn try_from(f: LengthCdfFile) -> Result<Self> {
        LengthDistribution::new(f.cdf)
    }
}

impl From<LengthDistribution> for LengthCdfFile {
    fn from(d: LengthDistribution) -> Self {
        LengthCdfFile {
            description: None,
            synthetic_points: Vec::new(),
            cdf: d.points,
        }
    }
}

impl LengthDistribution {
    pub fn new(points: Vec<(u32, f64)>) -> Result<Self> {
        let bad = |m: String| Err(SimError::LengthDistribution(m));
        if points.is_empty() {
            return bad("empty distribution".into());
        }
        let mut prev: Option<(u32, f64)> = None;
        for &(len, p) in &points {
            if len == 0 {
                return bad("lengths must be positive".into());
            }
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("cumulative probability {p} outside (0, 1]"));
            }
            if let Some((pl, pp)) = prev {
                if len <= pl {
                    return bad(format!("lengths not strictly increasing at {len}"));
                }
                if p <= pp {
                    return bad(format!("probabilities not strictly increasing at {len}"));
                }
            }
            prev = Some((len, p));
        }
        if points.last().map(|&(_, p)| p) != Some(1.0) {
            return bad("final cumulative probability must be exactly 1.0".into());
        }
        Ok(LengthDistribution { points })
    }

    /// Distribution that always yields `len`.
    pub fn constant(len: u32) -> Result<Self> {
        Self::new(vec![(len, 1.0)])
    }

    /// English-to-German output lengths, truncated at 80 words.
    pub fn shipped_en_de() -> Self {
        Self::from_json(SHIPPED_LENGTH_CDF).expect("shipped length CDF is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(format!("length CDF {}", path.display())))
    }

    pub fn points(&self) -> &[(u32, f64)] {
        &self.points
    }

    pub fn max_len(&self) -> u32 {
        self.points.last().map(|p| p.0).unwrap_or(1)
    }

    /// P(length <= len).
    pub fn cdf_at(&self, len: u32) -> f64 {
        self.points
            .iter()
            .take_while(|&&(l, _)| l <= len)
            .last()
            .map_or(0.0, |&(_, p)| p)
    }

    /// Probability mass of each listed length.
    pub fn masses(&self) -> Vec<(u32, f64)> {
        let mut prev = 0.0;
        self.points
            .iter()
            .map(|&(l, p)| {
                let m = p - prev;
                prev = p;
                (l, m)
            })
            .collect()
    }

    pub fn mean(&self) -> f64 {
        self.masses().iter().map(|&(l, m)| f64::from(l) * m).sum()
    }
}

/// Smallest length whose cumulative probability exceeds `u`.
pub fn sample_length(dist: &LengthDistribution, u: f64) -> u32 {
    let u = if u.is_nan() {
        0.0
    } else {
        u.clamp(0.0, 1.0 - f64::EPSILON)
    };
    dist.points
        .iter()
        .find(|&&(_, p)| p > u)
        .map_or_else(|| dist.max_len(), |&(l, _)| l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadBand {
    Low,
    Medium,
    Heavy,
}

impl LoadBand {
    pub fn classify(rate_qps: f64) -> LoadBand {
        if rate_qps < 256.0 {
            LoadBand::Low
        } else if rate_qps <= 500.0 {
            LoadBand::Medium
        } else {
            LoadBand::Heavy
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficConfig {
    pub rate_qps: f64,
    pub duration_us: Micros,
    pub seed: u64,
    pub model_name: String,
    /// Required for dynamic models.
    pub length_dist: Option<LengthDistribution>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub id: u64,
    pub arrival_us: Micros,
    #[serde(rename = "model")]
    pub model_name: String,
    pub actual_dec_timesteps: u32,
}

pub fn gen_trace(cfg: &TrafficConfig, model: &ModelGraph) -> Result<Vec<InferenceRequest>> {
    if !(cfg.rate_qps.is_finite() && cfg.rate_qps > 0.0) {
        return Err(SimError::Traffic(format!(
            "rate must be > 0, got {}",
            cfg.rate_qps
        )));
    }
    if cfg.duration_us == 0 {
        return Err(SimError::Traffic("duration must be > 0".into()));
    }
    if cfg.model_name != model.name {
        return Err(SimError::Traffic(format!(
            "config names model `{}` but `{}` was supplied",
            cfg.model_name, model.name
        )));
    }
    let dist = if model.is_dynamic() {
        let d = cfg.length_dist.as_ref().ok_or_else(|| {
            SimError::Traffic(format!(
                "dynamic model `{}` needs a length distribution",
                model.name
            ))
        })?;
        if d.max_len() > model.max_dec_timesteps {
            return Err(SimError::Traffic(format!(
                "length distribution reaches {} but `{}` caps decoding at {}",
                d.max_len(),
                model.name,
                model.max_dec_timesteps
            )));
        }
        Some(d)
    } else {
        None
    };

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mean_gap_us = 1e6 / cfg.rate_qps;
    let mut out = Vec::with_capacity((cfg.rate_qps * cfg.duration_us as f64 / 1e6) as usize + 16);
    let mut now: Micros = 0;
    for id in 0u64.. {
        // 1 - [0, 1) keeps ln away from zero.
        let u: f64 = 1.0 - rng.random::<f64>();
        let gap = (-u.ln() * mean_gap_us).round() as Micros;
        // Drawn for static models too so arrivals do not depend on the model.
        let len_u: f64 = rng.random();
        now = now.saturating_add(gap);
        if now > cfg.duration_us {
            break;
        }
        let actual = dist.map_or(1, |d| sample_length(d, len_u));
        out.push(InferenceRequest {
            id,
            arrival_us: now,
            model_name: model.name.clone(),
            actual_dec_timesteps: actual,
        });
    }
    Ok(out)
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

pub fn write_trace_to<W: Write>(w: W, trace: &[InferenceRequest]) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(["id", "arrival_us", "model", "actual_dec_timesteps"])?;
    for r in trace {
        wtr.write_record([
            r.id.to_string(),
            r.arrival_us.to_string(),
            r.model_name.clone(),
            r.actual_dec_timesteps.to_string(),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_trace(path: impl AsRef<Path>, trace: &[InferenceRequest]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| SimError::io(path, e))?;
    write_trace_to(std::io::BufWriter::new(file), trace)
}

/// Parses a trace, checking ordering and (with a catalog) model names and
/// decoder lengths.
pub fn read_trace_from<R: Read>(r: R, catalog: Option<&Catalog>) -> Result<Vec<InferenceRequest>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let headers = rdr.headers()?.clone();
    let expected = ["id", "arrival_us", "model", "actual_dec_timesteps"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(SimError::TraceRow {
            line: 1,
            reason: format!("expected header `{}`", expected.join(",")),
        });
    }
    let mut out: Vec<InferenceRequest> = Vec::new();
    for (i, row) in rdr.deserialize::<InferenceRequest>().enumerate() {
        let line = i + 2;
        let req = row.map_err(|e| SimError::TraceRow {
            line,
            reason: e.to_string(),
        })?;
        if let Some(prev) = out.last() {
            if req.arrival_us < prev.arrival_us {
                return Err(SimError::TraceRow {
                    line,
                    reason: format!(
                        "arrival {} precedes previous arrival {}",
                        req.arrival_us, prev.arrival_us
                    ),
                });
            }
            if req.id <= prev.id {
                return Err(SimError::TraceRow {
                    line,
                    reason: format!("id {} not greater than previous id {}", req.id, prev.id),
                });
            }
        }
        if req.actual_dec_timesteps == 0 {
            return Err(SimError::TraceRow {
                line,
                reason: "actual_dec_timesteps must be >= 1".into(),
            });
        }
        if let Some(cat) = catalog {
            let model = cat.get(&req.model_name).map_err(|e| SimError::TraceRow {
                line,
                reason: e.to_string(),
            })?;
            if model.is_dynamic() && req.actual_dec_timesteps > model.max_dec_timesteps {
                return Err(SimError::TraceRow {
                    line,
                    reason: format!(
                        "decoder length {} exceeds the model cap {}",
                        req.actual_dec_timesteps, model.max_dec_timesteps
                    ),
                });
            }
        }
        out.push(req);
    }
    Ok(out)
}

pub fn read_trace(
    path: impl AsRef<Path>,
    catalog: Option<&Catalog>,
) -> Result<Vec<InferenceRequest>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| SimError::io(path, e))?;
    read_trace_from(std::io::BufReader::new(file), catalog)
        .map_err(|e| e.context(format!("trace {}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_point() -> LengthDistribution {
        LengthDistribution::new(vec![(20, 0.70), (30, 0.90), (80, 1.0)]).unwrap()
    }

    fn cfg(rate: f64, duration_us: Micros, seed: u64, model: &str) -> TrafficConfig {
        TrafficConfig {
            rate_qps: rate,
            duration_us,
            seed,
            model_name: model.into(),
            length_dist: Some(LengthDistribution::shipped_en_de()),
        }
    }

    #[test]
    fn sample_length_examples() {
        let d = three_point();
        assert_eq!(sample_length(&d, 0.5), 20);
        assert_eq!(sample_length(&d, 0.95), 80);
        assert_eq!(sample_length(&d, 0.70), 30);
        assert_eq!(sample_length(&d, -3.0), 20);
        assert_eq!(sample_length(&d, 1.0), 80);
        let one = LengthDistribution::constant(1).unwrap();
        for u in [0.0, 0.3, 0.999] {
            assert_eq!(sample_length(&one, u), 1);
        }
    }

    #[test]
    fn distribution_validation() {
        assert!(LengthDistribution::new(vec![]).is_err());
        assert!(LengthDistribution::new(vec![(5, 0.5), (4, 1.0)]).is_err());
        assert!(LengthDistribution::new(vec![(5, 0.5), (6, 0.5), (7, 1.0)]).is_err());
        assert!(LengthDistribution::new(vec![(5, 0.5), (6, 0.9)]).is_err());
        assert!(LengthDistribution::new(vec![(0, 1.0)]).is_err());
    }

    #[test]
    fn shipped_cdf_keeps_its_anchors() {
        let d = LengthDistribution::shipped_en_de();
        assert_eq!(d.points().len(), 9);
        assert_eq!(d.cdf_at(20), 0.70);
        assert_eq!(d.cdf_at(30), 0.90);
        assert_eq!(d.max_len(), 80);
        assert_eq!(d.mean().round(), 20.0);
    }

    #[test]
    fn load_bands() {
        assert_eq!(LoadBand::classify(16.0), LoadBand::Low);
        assert_eq!(LoadBand::classify(255.9), LoadBand::Low);
        assert_eq!(LoadBand::classify(256.0), LoadBand::Medium);
        assert_eq!(LoadBand::classify(500.0), LoadBand::Medium);
        assert_eq!(LoadBand::classify(501.0), LoadBand::Heavy);
    }

    #[test]
    fn mean_gap_matches_rate() {
        let cat = Catalog::shipped();
        let m = cat.get("resnet").unwrap();
        // ~1e5 arrivals at 16 qps.
        let trace = gen_trace(&cfg(16.0, 6_300_000_000, 7, "resnet"), m).unwrap();
        assert!(trace.len() >= 100_000, "{}", trace.len());
        let mean = trace.last().unwrap().arrival_us as f64 / trace.len() as f64;
        assert!((mean - 62_500.0).abs() / 62_500.0 < 0.02, "mean gap {mean}");
    }

    #[test]
    fn request_count_matches_rate_times_duration() {
        let cat = Catalog::shipped();
        let m = cat.get("resnet").unwrap();
        let trace = gen_trace(&cfg(1000.0, 1_000_000, 42, "resnet"), m).unwrap();
        let n = trace.len() as f64;
        assert!((n - 1000.0).abs() <= 100.0, "{n}");
        assert!(trace
            .windows(2)
            .all(|w| w[0].arrival_us <= w[1].arrival_us && w[0].id < w[1].id));
        assert!(trace
            .iter()
            .all(|r| r.arrival_us <= 1_000_000 && r.actual_dec_timesteps == 1));
    }

    #[test]
    fn same_seed_same_bytes() {
        let cat = Catalog::shipped();
        let m = cat.get("gnmt").unwrap();
        let render = |seed| {
            let t = gen_trace(&cfg(250.0, 2_000_000, seed, "gnmt"), m).unwrap();
            let mut buf = Vec::new();
            write_trace_to(&mut buf, &t).unwrap();
            buf
        };
        assert_eq!(render(9), render(9));
        assert_ne!(render(9), render(10));
    }

    #[test]
    fn gen_trace_errors() {
        let cat = Catalog::shipped();
        let g = cat.get("gnmt").unwrap();
        assert!(gen_trace(&cfg(0.0, 10, 1, "gnmt"), g).is_err());
        assert!(gen_trace(&cfg(-1.0, 10, 1, "gnmt"), g).is_err());
        assert!(gen_trace(&cfg(1.0, 0, 1, "gnmt"), g).is_err());
        let mut no_dist = cfg(10.0, 1_000_000, 1, "gnmt");
        no_dist.length_dist = None;
        assert!(gen_trace(&no_dist, g).is_err());
    }

    #[test]
    fn lengths_fit_the_cdf() {
        // Chi-squared goodness of fit, 8 degrees of freedom; the p = 0.01
        // critical value is 20.09.
        let d = LengthDistribution::shipped_en_de();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2024);
        let n = 100_000usize;
        let masses = d.masses();
        let mut counts = vec![0usize; masses.len()];
        for _ in 0..n {
            let l = sample_length(&d, rng.random());
            let idx = masses.iter().position(|&(ml, _)| ml == l).unwrap();
            counts[idx] += 1;
        }
        let chi2: f64 = masses
            .iter()
            .zip(&counts)
            .map(|(&(_, m), &c)| {
                let e = m * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        assert!(chi2 < 20.09, "chi2 = {chi2}");
    }

    #[test]
    fn trace_round_trip_and_errors() {
        let cat = Catalog::shipped();
        let trace = vec![
            InferenceRequest {
                id: 0,
                arrival_us: 5,
                model_name: "gnmt".into(),
                actual_dec_timesteps: 3,
            },
            InferenceRequest {
                id: 1,
                arrival_us: 5,
                model_name: "gnmt".into(),
                actual_dec_timesteps: 80,
            },
            InferenceRequest {
                id: 2,
                arrival_us: 90,
                model_name: "resnet".into(),
                actual_dec_timesteps: 1,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trace(&path, &trace).unwrap();
        assert_eq!(read_trace(&path, Some(&cat)).unwrap(), trace);

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,arrival_us,model,actual_dec_timesteps\n"));
        assert!(!text.contains('\r'));

        let header = "id,arrival_us,model,actual_dec_timesteps\n";
        assert!(read_trace_from(header.as_bytes(), Some(&cat))
            .unwrap()
            .is_empty());

        let backwards = format!("{header}0,10,resnet,1\n1,9,resnet,1\n");
        assert!(read_trace_from(backwards.as_bytes(), None).is_err());
        let unknown = format!("{header}0,10,vgg,1\n");
        assert!(read_trace_from(unknown.as_bytes(), Some(&cat)).is_err());
        assert!(read_trace_from(unknown.as_bytes(), None).is_ok());
        let malformed = format!("{header}0,abc,resnet,1\n");
        assert!(read_trace_from(malformed.as_bytes(), None).is_err());
        let too_long = format!("{header}0,1,gnmt,81\n");
        assert!(read_trace_from(too_long.as_bytes(), Some(&cat)).is_err());
    }
}
