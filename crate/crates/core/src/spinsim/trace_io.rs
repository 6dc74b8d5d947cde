//! Trace files.
//!
//! CSV: one header line
//! `# sample_rate_hz=…; cycle_period_s=…; cycles=…; pump_s=…; probe_window_s=…; averages=…; start_s=…; envelope=…; seed=…`,
//! a `t_s,voltage_v` column line, then one row per sample.
//!
//! Binary (little endian): a 64-byte header followed by `f64` samples.
//!
//! | offset | type  | field            |
//! |--------|-------|------------------|
//! | 0      | [u8;8]| magic `DKTRACE1` |
//! | 8      | u32   | format version 1 |
//! | 12     | u32   | averages         |
//! | 16     | f64   | sample rate, Hz  |
//! | 24     | f64   | cycle period, s  |
//! | 32     | f64   | pump duration, s |
//! | 40     | f64   | probe window, s  |
//! | 48     | f64   | start time, s    |
//! | 56     | u64   | cycles           |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::format_f64;

use super::{PrecessionTrace, PumpProbeSchedule};

pub const TRACE_MAGIC: &[u8; 8] = b"DKTRACE1";
const HEADER_LEN: usize = 64;

pub fn write_trace_csv(trace: &PrecessionTrace, path: &Path) -> Result<()> {
    let s = &trace.schedule;
    let mut out = String::with_capacity(trace.samples.len() * 32 + 256);
    out.push_str(&format!(
        "# sample_rate_hz={}; cycle_period_s={}; cycles={}; pump_s={}; probe_window_s={}; averages={}; start_s={}; envelope={}; seed={}\n",
        format_f64(s.sample_rate),
        format_f64(s.cycle_period),
        s.cycles,
        format_f64(s.pump_duration),
        format_f64(s.probe_window),
        s.averages,
        format_f64(s.start_time),
        trace.envelope,
        trace.seed
    ));
    out.push_str("t_s,voltage_v\n");
    for (k, v) in trace.samples.iter().enumerate() {
        out.push_str(&format_f64(trace.time(k)));
        out.push(',');
        out.push_str(&format_f64(*v));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn header_fields(line: &str) -> Result<Vec<(String, String)>> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::parse(1, "trace header must start with `#`"))?;
    body.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::parse(1, format!("header field `{}` is not key=value", p.trim())))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

pub fn read_trace_csv(text: &str) -> Result<PrecessionTrace> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse(1, "empty trace file"))?;
    let fields = header_fields(header)?;
    let get = |k: &str| fields.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    let num = |k: &str| -> Result<Option<f64>> {
        match get(k) {
            None => Ok(None),
            Some(v) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| Error::parse(1, format!("header `{k}`: not a number: `{v}`"))),
        }
    };
    let req = |k: &str| -> Result<f64> { num(k)?.ok_or_else(|| Error::parse(1, format!("header lacks `{k}`"))) };
    let sample_rate = req("sample_rate_hz")?;
    let cycle_period = req("cycle_period_s")?;
    let cycles_raw = get("cycles").ok_or_else(|| Error::parse(1, "header lacks `cycles`"))?;
    let cycles: usize = cycles_raw
        .parse()
        .map_err(|_| Error::parse(1, format!("header `cycles`: not an integer: `{cycles_raw}`")))?;
    let defaults = PumpProbeSchedule::default();
    let pump = num("pump_s")?.unwrap_or(defaults.pump_duration);
    let schedule = PumpProbeSchedule {
        cycle_period,
        pump_duration: pump,
        cycles,
        averages: match get("averages") {
            None => 1,
            Some(v) => v
                .parse()
                .map_err(|_| Error::parse(1, format!("header `averages`: not an integer: `{v}`")))?,
        },
        sample_rate,
        probe_window: num("probe_window_s")?.unwrap_or(cycle_period - pump),
        start_time: num("start_s")?.unwrap_or(0.0),
    };
    schedule.validate().map_err(|e| Error::parse(1, e.to_string()))?;
    let seed = match get("seed") {
        None => 0,
        Some(v) => v.parse().map_err(|_| Error::parse(1, format!("header `seed`: not an integer: `{v}`")))?,
    };
    let mut samples = Vec::with_capacity(cycles * schedule.samples_per_cycle());
    let mut line_no = 1;
    for line in lines {
        line_no += 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (line_no == 2 && line.starts_with("t_s")) {
            continue;
        }
        let (_, v) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(line_no, format!("expected `t_s,voltage_v`, got `{line}`")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::parse(line_no, format!("voltage is not a number: `{}`", v.trim())))?;
        samples.push(v);
    }
    let trace = PrecessionTrace {
        schedule,
        samples,
        envelope: get("envelope").unwrap_or("unknown").to_string(),
        seed,
    };
    let expected = trace.schedule.cycles * trace.schedule.samples_per_cycle();
    if trace.samples.len() != expected {
        return Err(Error::parse(
            line_no,
            format!("file holds {} samples but the header implies {expected}", trace.samples.len()),
        ));
    }
    Ok(trace)
}

pub fn write_trace_binary(trace: &PrecessionTrace, path: &Path) -> Result<()> {
    let s = &trace.schedule;
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * trace.samples.len());
    buf.extend_from_slice(TRACE_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&s.averages.to_le_bytes());
    for v in [s.sample_rate, s.cycle_period, s.pump_duration, s.probe_window, s.start_time] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(s.cycles as u64).to_le_bytes());
    debug_assert_eq!(buf.len(), HEADER_LEN);
    for v in &trace.samples {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_trace_binary(bytes: &[u8]) -> Result<PrecessionTrace> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != TRACE_MAGIC {
        return Err(Error::parse(0, "not a binary trace (bad magic or short header)"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    if u32_at(8) != 1 {
        return Err(Error::parse(0, format!("unsupported binary trace version {}", u32_at(8))));
    }
    let schedule = PumpProbeSchedule {
        averages: u32_at(12),
        sample_rate: f64_at(16),
        cycle_period: f64_at(24),
        pump_duration: f64_at(32),
        probe_window: f64_at(40),
        start_time: f64_at(48),
        cycles: u64::from_le_bytes(bytes[56..64].try_into().expect("8 bytes")) as usize,
    };
    schedule.validate().map_err(|e| Error::parse(0, e.to_string()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() % 8 != 0 {
        return Err(Error::parse(0, "binary trace body is not a whole number of f64 samples"));
    }
    let samples: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let expected = schedule.cycles * schedule.samples_per_cycle();
    if samples.len() != expected {
        return Err(Error::parse(
            0,
            format!("binary trace holds {} samples, header implies {expected}", samples.len()),
        ));
    }
    Ok(PrecessionTrace {
        schedule,
        samples,
        envelope: "unknown".into(),
        seed: 0,
    })
}

/// Reads either format, chosen by the magic bytes.
pub fn read_trace(path: &Path) -> Result<PrecessionTrace> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(TRACE_MAGIC) {
        read_trace_binary(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::parse(0, "trace file is neither CSV text nor binary"))?;
        read_trace_csv(&text)
    }
}
