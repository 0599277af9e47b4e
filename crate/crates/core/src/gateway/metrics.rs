//! Per-transaction step timings, exported as CSV.
//!
//! One row per appended transaction:
//!
//! ```text
//! camera_id,sequence,extract_ms,store_ms,sign_ms,append_ms,total_ms
//! ```
//!
//! Timings come from a monotonic clock. The window opens when the chunk
//! frame is fully received and closes when the local append is durable and
//! the broadcast is handed to the transport.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use crate::identity::PublicKey;

pub const METRICS_CSV_HEADER: &str =
    "camera_id,sequence,extract_ms,store_ms,sign_ms,append_ms,total_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct TxTiming {
    pub camera: PublicKey,
    pub sequence: u64,
    pub extract_ms: f64,
    pub store_ms: f64,
    pub sign_ms: f64,
    pub append_ms: f64,
    pub total_ms: f64,
}

impl TxTiming {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{:.3},{:.3},{:.3}",
            self.camera.to_hex(),
            self.sequence,
            self.extract_ms,
            self.store_ms,
            self.sign_ms,
            self.append_ms,
            self.total_ms
        )
    }
}

/// CSV sink; a `None` path makes it a no-op.
pub struct MetricsWriter {
    out: Option<Mutex<BufWriter<File>>>,
}

impl MetricsWriter {
    pub fn create(path: Option<&Path>) -> std::io::Result<Self> {
        let out = match path {
            Some(p) => {
                let mut w = BufWriter::new(File::create(p)?);
                writeln!(w, "{METRICS_CSV_HEADER}")?;
                w.flush()?;
                Some(Mutex::new(w))
            }
            None => None,
        };
        Ok(Self { out })
    }

    pub fn record(&self, timing: &TxTiming) {
        if let Some(out) = &self.out {
            let mut w = out.lock().unwrap();
            let _ = writeln!(w, "{}", timing.csv_row());
            let _ = w.flush();
        }
    }
}

/// Parses a metrics CSV back into rows (header line required).
pub fn parse_metrics_csv(text: &str) -> Result<Vec<TxTiming>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == METRICS_CSV_HEADER => {}
        other => return Err(format!("bad metrics header: {other:?}")),
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(format!("line {}: expected 7 fields", lineno + 2));
        }
        let err = |what: &str| format!("line {}: bad {what}", lineno + 2);
        rows.push(TxTiming {
            camera: PublicKey::from_hex(fields[0]).map_err(|_| err("camera_id"))?,
            sequence: fields[1].parse().map_err(|_| err("sequence"))?,
            extract_ms: fields[2].parse().map_err(|_| err("extract_ms"))?,
            store_ms: fields[3].parse().map_err(|_| err("store_ms"))?,
            sign_ms: fields[4].parse().map_err(|_| err("sign_ms"))?,
            append_ms: fields[5].parse().map_err(|_| err("append_ms"))?,
            total_ms: fields[6].parse().map_err(|_| err("total_ms"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::DeviceIdentity;

    #[test]
    fn write_then_parse_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let writer = MetricsWriter::create(Some(&path)).unwrap();
        let camera = DeviceIdentity::generate().public_key();
        let t = TxTiming {
            camera,
            sequence: 7,
            extract_ms: 0.5,
            store_ms: 1.25,
            sign_ms: 0.031,
            append_ms: 0.125,
            total_ms: 1.906,
        };
        writer.record(&t);
        let rows = parse_metrics_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].camera, camera);
        assert_eq!(rows[0].sequence, 7);
        assert!((rows[0].store_ms - 1.25).abs() < 1e-9);
    }

    #[test]
    fn noop_writer_accepts_records() {
        let writer = MetricsWriter::create(None).unwrap();
        writer.record(&TxTiming {
            camera: DeviceIdentity::generate().public_key(),
            sequence: 0,
            extract_ms: 0.0,
            store_ms: 0.0,
            sign_ms: 0.0,
            append_ms: 0.0,
            total_ms: 0.0,
        });
    }

    #[test]
    fn malformed_csv_rejected() {
        assert!(parse_metrics_csv("nope\n1,2,3").is_err());
        let header_only = format!("{METRICS_CSV_HEADER}\n");
        assert!(parse_metrics_csv(&header_only).unwrap().is_empty());
    }
}
