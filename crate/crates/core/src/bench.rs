//! Round metrics, CSV output and signature microbenchmarks.
//!
//! Times are stored as seconds quantised to whole microseconds, which is
//! exactly what the CSV's six fractional digits can carry, so a CSV round
//! trip is lossless.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::RngCore;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::seed;
use crate::sig::{self, ParameterSet, SigError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("metrics sink unavailable: {0}")]
    SinkUnavailable(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("microbenchmarks need at least {min} iterations, got {got}")]
    TooFewIterations { min: usize, got: usize },
    #[error(transparent)]
    Sig(#[from] SigError),
}

pub const MIN_ITERATIONS: usize = 30;
const WARMUP_ITERATIONS: usize = 3;

pub const ROUND_CSV_HEADER: [&str; 12] = [
    "scheme",
    "round",
    "wall_time_s",
    "train_time_s",
    "sign_time_s",
    "verify_time_s",
    "serialize_time_s",
    "payload_bytes",
    "signature_bytes",
    "verified_count",
    "rejected_count",
    "global_loss",
];

/// Seconds rounded to the nearest microsecond.
pub fn quantize_secs(d: Duration) -> f64 {
    let micros = (d.as_nanos() + 500) / 1000;
    micros as f64 / 1e6
}

fn six_digits<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:.6}"))
}

/// One row per protocol round; field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub scheme: String,
    pub round: u32,
    #[serde(serialize_with = "six_digits")]
    pub wall_time_s: f64,
    #[serde(serialize_with = "six_digits")]
    pub train_time_s: f64,
    #[serde(serialize_with = "six_digits")]
    pub sign_time_s: f64,
    #[serde(serialize_with = "six_digits")]
    pub verify_time_s: f64,
    #[serde(serialize_with = "six_digits")]
    pub serialize_time_s: f64,
    pub payload_bytes: u64,
    pub signature_bytes: u64,
    pub verified_count: u32,
    pub rejected_count: u32,
    pub global_loss: f64,
}

impl RoundMetrics {
    pub fn signature_overhead_s(&self) -> f64 {
        self.sign_time_s + self.verify_time_s
    }
}

/// Destination for round records. Implementations accept records from
/// several threads.
pub trait RoundSink: Sync {
    fn record(&self, metrics: RoundMetrics) -> Result<(), BenchError>;
}

pub fn record_round(sink: &dyn RoundSink, metrics: RoundMetrics) -> Result<(), BenchError> {
    sink.record(metrics)
}

#[derive(Debug, Default)]
pub struct MemorySink {
    records: Mutex<Vec<RoundMetrics>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> Vec<RoundMetrics> {
        self.records.lock().map(|r| r.clone()).unwrap_or_default()
    }
}

impl RoundSink for MemorySink {
    fn record(&self, metrics: RoundMetrics) -> Result<(), BenchError> {
        self.records
            .lock()
            .map_err(|_| BenchError::SinkUnavailable("memory sink poisoned".into()))?
            .push(metrics);
        Ok(())
    }
}

/// Streams rows to a CSV file as they arrive, header first.
pub struct CsvSink {
    writer: Mutex<csv::Writer<File>>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self, BenchError> {
        let file = File::create(path)
            .map_err(|e| BenchError::SinkUnavailable(format!("{}: {e}", path.display())))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer.write_record(ROUND_CSV_HEADER)?;
        writer.flush()?;
        Ok(Self {
            writer: Mutex::new(writer),
        })
    }
}

impl RoundSink for CsvSink {
    fn record(&self, metrics: RoundMetrics) -> Result<(), BenchError> {
        let mut w = self
            .writer
            .lock()
            .map_err(|_| BenchError::SinkUnavailable("csv sink poisoned".into()))?;
        w.serialize(metrics)
            .map_err(|e| BenchError::SinkUnavailable(e.to_string()))?;
        w.flush()
            .map_err(|e| BenchError::SinkUnavailable(e.to_string()))?;
        Ok(())
    }
}

pub fn write_csv<W: Write>(records: &[RoundMetrics], out: W) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(ROUND_CSV_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(records: &[RoundMetrics], path: &Path) -> Result<(), BenchError> {
    write_csv(records, File::create(path)?)
}

pub fn parse_csv<R: Read>(input: R) -> Result<Vec<RoundMetrics>, BenchError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<Vec<_>, _>>()
        .map_err(BenchError::from)
}

pub fn read_csv(path: &Path) -> Result<Vec<RoundMetrics>, BenchError> {
    parse_csv(File::open(path)?)
}

#[derive(Debug, Clone, Default)]
struct SchemeTotals {
    rounds: usize,
    sign: f64,
    verify: f64,
    train: f64,
    wall: f64,
    serialize: f64,
    verified_min: u32,
    verified_max: u32,
    rejected: u64,
    signature_bytes: u64,
    payload_bytes: u64,
    final_loss: f64,
}

/// Per-scheme comparison of a set of run records, ending with a verdict
/// line naming the scheme with the least signature overhead.
pub fn summarize(records: &[RoundMetrics]) -> String {
    let mut per: BTreeMap<&str, SchemeTotals> = BTreeMap::new();
    for r in records {
        let t = per.entry(&r.scheme).or_insert_with(|| SchemeTotals {
            verified_min: u32::MAX,
            ..Default::default()
        });
        t.rounds += 1;
        t.sign += r.sign_time_s;
        t.verify += r.verify_time_s;
        t.train += r.train_time_s;
        t.wall += r.wall_time_s;
        t.serialize += r.serialize_time_s;
        t.verified_min = t.verified_min.min(r.verified_count);
        t.verified_max = t.verified_max.max(r.verified_count);
        t.rejected += u64::from(r.rejected_count);
        t.signature_bytes += r.signature_bytes;
        t.payload_bytes += r.payload_bytes;
        t.final_loss = r.global_loss;
    }
    let mut out = String::new();
    if per.is_empty() {
        out.push_str("no records\n");
        return out;
    }
    let _ = writeln!(
        out,
        "{:<12} {:>6} {:>12} {:>12} {:>14} {:>12} {:>12} {:>14} {:>10} {:>9} {:>12}",
        "scheme", "rounds", "sign_s", "verify_s", "sig_overhead_s", "train_s", "wall_s", "sig_bytes", "verified", "rejected", "final_loss"
    );
    for (scheme, t) in &per {
        let verified = if t.verified_min == t.verified_max {
            t.verified_min.to_string()
        } else {
            format!("{}-{}", t.verified_min, t.verified_max)
        };
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>12.6} {:>12.6} {:>14.6} {:>12.6} {:>12.6} {:>14} {:>10} {:>9} {:>12.6}",
            scheme,
            t.rounds,
            t.sign,
            t.verify,
            t.sign + t.verify,
            t.train,
            t.wall,
            t.signature_bytes,
            verified,
            t.rejected,
            t.final_loss
        );
    }
    for (scheme, t) in &per {
        if t.verified_min == t.verified_max {
            let _ = writeln!(
                out,
                "{scheme}: verified_count = {} in all {} rounds, {} rejected",
                t.verified_min, t.rounds, t.rejected
            );
        } else {
            let _ = writeln!(
                out,
                "{scheme}: verified_count between {} and {} over {} rounds, {} rejected",
                t.verified_min, t.verified_max, t.rounds, t.rejected
            );
        }
    }
    let mut ranked: Vec<(&str, f64)> = per.iter().map(|(s, t)| (*s, t.sign + t.verify)).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    let order: Vec<&str> = ranked.iter().map(|(s, _)| *s).collect();
    let _ = writeln!(out, "signature overhead ordering: {}", order.join(" < "));
    let _ = writeln!(out, "verdict: {} fastest", ranked[0].0);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchOp {
    Keygen,
    Sign,
    Verify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrobenchRecord {
    pub scheme: String,
    pub parameter_set: String,
    pub payload_bytes: usize,
    pub op: BenchOp,
    pub iterations: usize,
    #[serde(serialize_with = "six_digits")]
    pub median_s: f64,
    #[serde(serialize_with = "six_digits")]
    pub p10_s: f64,
    #[serde(serialize_with = "six_digits")]
    pub p90_s: f64,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[Duration], q: f64) -> Duration {
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Median, p10 and p90 of the samples in seconds. Uses full-precision
/// durations so that orderings between fast schemes are not lost to
/// rounding.
pub fn summarize_samples(mut samples: Vec<Duration>) -> (f64, f64, f64) {
    samples.sort();
    let median = if samples.len() % 2 == 1 {
        samples[samples.len() / 2]
    } else {
        (samples[samples.len() / 2 - 1] + samples[samples.len() / 2]) / 2
    };
    (
        median.as_secs_f64(),
        percentile(&samples, 0.1).as_secs_f64(),
        percentile(&samples, 0.9).as_secs_f64(),
    )
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

/// Times keygen, sign and verify for every parameter set and payload size.
/// Warm-up runs are discarded; each record reports the median of
/// `iterations` timed runs.
pub fn microbench(
    params: &[ParameterSet],
    payload_sizes: &[usize],
    iterations: usize,
) -> Result<Vec<MicrobenchRecord>, BenchError> {
    if iterations < MIN_ITERATIONS {
        return Err(BenchError::TooFewIterations {
            min: MIN_ITERATIONS,
            got: iterations,
        });
    }
    let mut out = Vec::new();
    for &p in params {
        let kp = sig::keygen(p, None)?;
        for &size in payload_sizes {
            let mut msg = vec![0u8; size.max(1)];
            seed::derived_rng(0, "microbench", &[size as u64]).fill_bytes(&mut msg);

            let mut samples = Vec::with_capacity(iterations);
            for i in 0..WARMUP_ITERATIONS + iterations {
                let (kp, d) = timed(|| sig::keygen(p, None));
                kp?;
                if i >= WARMUP_ITERATIONS {
                    samples.push(d);
                }
            }
            out.push(record(p, size, BenchOp::Keygen, iterations, samples));

            let mut samples = Vec::with_capacity(iterations);
            let mut signature = None;
            for i in 0..WARMUP_ITERATIONS + iterations {
                let (s, d) = timed(|| sig::sign(&kp, &msg));
                signature = Some(s?);
                if i >= WARMUP_ITERATIONS {
                    samples.push(d);
                }
            }
            out.push(record(p, size, BenchOp::Sign, iterations, samples));

            let signature = signature.expect("at least one iteration");
            let mut samples = Vec::with_capacity(iterations);
            for i in 0..WARMUP_ITERATIONS + iterations {
                let (ok, d) = timed(|| sig::verify(&kp.public_key, p, &msg, &signature));
                if !ok {
                    return Err(SigError::AdapterFailure(format!("{p}: fresh signature failed to verify")).into());
                }
                if i >= WARMUP_ITERATIONS {
                    samples.push(d);
                }
            }
            out.push(record(p, size, BenchOp::Verify, iterations, samples));
        }
    }
    Ok(out)
}

fn record(p: ParameterSet, size: usize, op: BenchOp, iterations: usize, samples: Vec<Duration>) -> MicrobenchRecord {
    let (median_s, p10_s, p90_s) = summarize_samples(samples);
    MicrobenchRecord {
        scheme: p.scheme().name().to_string(),
        parameter_set: p.name().to_string(),
        payload_bytes: size,
        op,
        iterations,
        median_s,
        p10_s,
        p90_s,
    }
}

pub fn write_microbench_csv<W: Write>(records: &[MicrobenchRecord], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(["scheme", "parameter_set", "payload_bytes", "op", "iterations", "median_s", "p10_s", "p90_s"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_microbench_csv<R: Read>(input: R) -> Result<Vec<MicrobenchRecord>, BenchError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<Vec<_>, _>>()
        .map_err(BenchError::from)
}

/// Table of medians per (scheme, size), with sign+verify totals and the
/// resulting speed ranking per payload size.
pub fn summarize_microbench(records: &[MicrobenchRecord]) -> String {
    let mut cells: BTreeMap<(usize, String), [f64; 3]> = BTreeMap::new();
    for r in records {
        let slot = match r.op {
            BenchOp::Keygen => 0,
            BenchOp::Sign => 1,
            BenchOp::Verify => 2,
        };
        cells.entry((r.payload_bytes, r.scheme.clone())).or_insert([f64::NAN; 3])[slot] = r.median_s;
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>12} {:>14} {:>14} {:>14} {:>16}",
        "scheme", "payload", "keygen_s", "sign_s", "verify_s", "sign+verify_s"
    );
    let mut by_size: BTreeMap<usize, Vec<(String, f64)>> = BTreeMap::new();
    for ((size, scheme), [k, s, v]) in &cells {
        let _ = writeln!(out, "{scheme:<12} {size:>12} {k:>14.6} {s:>14.6} {v:>14.6} {:>16.6}", s + v);
        by_size.entry(*size).or_default().push((scheme.clone(), s + v));
    }
    for (size, mut v) in by_size {
        v.sort_by(|a, b| a.1.total_cmp(&b.1));
        let names: Vec<&str> = v.iter().map(|(s, _)| s.as_str()).collect();
        let _ = writeln!(out, "{size} B sign+verify ordering: {}", names.join(" < "));
        let _ = writeln!(out, "verdict @ {size} B: {} fastest", names[0]);
    }
    out
}
