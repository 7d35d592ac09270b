//! `lazyb`: command-line front end for the batching simulator.
//!
//! Exit codes: 0 on success, 1 on invalid input or configuration, 2 when the
//! simulator trips an internal invariant. `LAZYB_LOG=debug|info` enables
//! diagnostics on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lazybatch::engine::{self, RunOptions};
use lazybatch::policy::PolicyConfig;
use lazybatch::sweep::{self, SweepSpec};
use lazybatch::traffic::{self, LengthDistribution, TrafficConfig};
use lazybatch::{cost, metrics, Catalog, Micros, SimError};

#[derive(Debug, Parser)]
#[command(
    name = "lazyb",
    version,
    about = "Batching-policy simulator for a single inference accelerator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a Poisson arrival trace.
    GenTrace {
        /// Arrival rate in queries per second.
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        duration_ms: u64,
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Decoder-length CDF for dynamic models; the shipped one by default.
        #[arg(long)]
        length_cdf: Option<PathBuf>,
        /// Model catalog; the shipped one by default.
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Simulate one trace under one policy.
    Run {
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        policy_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        event_log: Option<PathBuf>,
        /// Length CDF the slack predictor derives its decoder length from.
        #[arg(long)]
        length_cdf: Option<PathBuf>,
        /// Seed label recorded in the run metadata.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a multi-run experiment sweep and write aggregate rows.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Tabulate throughput and latency of pre-formed batches.
    Curve {
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        model: String,
        /// Comma-separated batch sizes, or a range such as `1..64`.
        #[arg(long, default_value = "1,2,4,8,16,32,64")]
        batches: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a result CSV written by `run`.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: ReportKind,
        #[arg(long)]
        out: PathBuf,
        /// SLA target for the violation rate.
        #[arg(long, default_value_t = lazybatch::slack::DEFAULT_SLA_US)]
        sla_us: Micros,
        /// Throughput horizon; the last completion by default.
        #[arg(long)]
        horizon_ms: Option<u64>,
        /// Policy label written into the summary row.
        #[arg(long, default_value = "")]
        label: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportKind {
    Cdf,
    Summary,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LAZYB_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Simulator errors already render their own cause chain.
            match e.downcast_ref::<SimError>() {
                Some(sim) => {
                    eprintln!("error: {sim}");
                    ExitCode::from(if sim.is_invariant() { 2 } else { 1 })
                }
                None => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(1)
                }
            }
        }
    }
}

fn catalog(path: Option<&Path>) -> Result<Catalog> {
    match path {
        Some(p) => Ok(Catalog::load(p)?),
        None => Ok(Catalog::shipped()),
    }
}

fn length_dist(path: Option<&Path>) -> Result<LengthDistribution> {
    match path {
        Some(p) => Ok(LengthDistribution::load(p)?),
        None => Ok(LengthDistribution::shipped_en_de()),
    }
}

/// Parses `1,2,4` or an inclusive range `1..64`.
fn parse_batches(text: &str) -> Result<Vec<u32>> {
    let text = text.trim();
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: u32 = lo.trim().parse().context("range start")?;
        let hi: u32 = hi
            .trim()
            .trim_start_matches('=')
            .parse()
            .context("range end")?;
        if lo == 0 || lo > hi {
            bail!("batch range must satisfy 1 <= start <= end");
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<u32>()
                .with_context(|| format!("batch size `{t}`"))
        })
        .collect()
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenTrace {
            rate,
            duration_ms,
            model,
            seed,
            out,
            length_cdf,
            catalog: cat,
        } => {
            let cat = catalog(cat.as_deref())?;
            let graph = cat.get(&model)?;
            let cfg = TrafficConfig {
                rate_qps: rate,
                duration_us: duration_ms * 1000,
                seed,
                model_name: model,
                length_dist: graph
                    .is_dynamic()
                    .then(|| length_dist(length_cdf.as_deref()))
                    .transpose()?,
            };
            let trace = traffic::gen_trace(&cfg, graph)?;
            log::info!("generated {} requests", trace.len());
            traffic::write_trace(&out, &trace)?;
        }
        Command::Run {
            catalog: cat,
            trace,
            policy_config,
            out,
            event_log,
            length_cdf,
            seed,
        } => {
            let cat = catalog(cat.as_deref())?;
            let requests = traffic::read_trace(&trace, Some(&cat))?;
            let policy = PolicyConfig::load(&policy_config)?;
            let opts = RunOptions {
                seed,
                record_events: event_log.is_some(),
                length_dist: length_cdf
                    .as_deref()
                    .map(LengthDistribution::load)
                    .transpose()?,
                ..RunOptions::default()
            };
            let result = engine::run(&cat, &requests, &policy, &opts)?;
            log::info!(
                "{}: {} requests, busy {} us over {} node instances",
                result.meta.policy,
                result.records.len(),
                result.busy_us,
                result.node_instances
            );
            result.write_csv(&out)?;
            if let Some(path) = event_log {
                result.write_event_log(path)?;
            }
        }
        Command::Sweep {
            spec,
            out,
            catalog: cat,
        } => {
            let cat = catalog(cat.as_deref())?;
            let spec = SweepSpec::load(&spec)?;
            let result = sweep::run_sweep(&spec, &cat)?;
            log::info!("sweep produced {} rows", result.rows.len());
            result.write_csv(&out)?;
        }
        Command::Curve {
            catalog: cat,
            model,
            batches,
            out,
        } => {
            let cat = catalog(cat.as_deref())?;
            let batches = parse_batches(&batches)?;
            let curve = cost::throughput_curve(cat.get(&model)?, &batches)?;
            cost::write_curve(&out, &curve)?;
        }
        Command::Report {
            input,
            kind,
            out,
            sla_us,
            horizon_ms,
            label,
        } => {
            let records = metrics::read_results(&input)?;
            if records.is_empty() {
                return Err(SimError::Empty("result CSV").into());
            }
            match kind {
                ReportKind::Cdf => {
                    let lat: Vec<Micros> = records.iter().map(|r| r.latency_us).collect();
                    metrics::write_cdf(&out, &metrics::cdf(&lat)?)?;
                }
                ReportKind::Summary => {
                    let horizon = match horizon_ms {
                        Some(ms) => ms * 1000,
                        None => records.iter().map(|r| r.complete_us).max().unwrap_or(0),
                    };
                    let mut s = metrics::summarize_records(&records, sla_us, horizon)?;
                    s.policy = label;
                    metrics::write_summaries(&out, &[s])?;
                }
            }
        }
    }
    Ok(())
}
