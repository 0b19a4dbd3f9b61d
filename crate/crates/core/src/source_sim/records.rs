use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::SimError;

/// One write/read trial. Times are seconds from the start of the respective
/// window; both lists are sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    #[serde(rename = "delay_s")]
    pub delay: f64,
    #[serde(rename = "write_clicks_s")]
    pub write_clicks: Vec<f64>,
    #[serde(rename = "read_clicks_s")]
    pub read_clicks: Vec<f64>,
}

/// Metadata written as the first line of a record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub config_hash: String,
    pub seed: u64,
    pub trials: u64,
    /// Trials per locking period; trial `i` is cycle `i % cycles_per_sequence`.
    pub cycles_per_sequence: u32,
    pub delays_s: Vec<f64>,
    pub write_enabled: bool,
    pub write_duration_s: f64,
    pub read_duration_s: f64,
    pub record_tail_s: f64,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: RecordHeader,
}

pub fn write_header<W: Write>(out: &mut W, header: &RecordHeader) -> Result<(), SimError> {
    serde_json::to_writer(&mut *out, &HeaderLine { header: header.clone() })?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_record<W: Write>(out: &mut W, record: &TrialRecord) -> Result<(), SimError> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Reads a header line followed by one record per line. Blank lines are
/// skipped.
pub fn read_records<R: BufRead>(input: R) -> Result<(RecordHeader, Vec<TrialRecord>), SimError> {
    let mut lines = input.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Err(SimError::Format("missing header line".into())),
            Some((_, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let h: HeaderLine = serde_json::from_str(&line)
                    .map_err(|e| SimError::Format(format!("line 1: bad header: {e}")))?;
                break h.header;
            }
        }
    };
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TrialRecord =
            serde_json::from_str(&line).map_err(|e| SimError::Format(format!("line {}: {e}", i + 1)))?;
        records.push(r);
    }
    Ok((header, records))
}
