use serde_json::Value;

use super::RawBatch;
use crate::codebook::{validate_record, Codebook, RejectReason, SurveyRecord, Verdict};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedBatch {
    pub accepted: Vec<SurveyRecord>,
    pub rejected: usize,
    /// No row could be parsed at all.
    pub dead: bool,
    /// The record array ended early or was malformed past the salvaged rows.
    pub truncated: bool,
    /// Reasons per rejected row, by position in the parsed prefix.
    pub rejections: Vec<(usize, Vec<RejectReason>)>,
}

impl ParsedBatch {
    pub fn parsed_rows(&self) -> usize {
        self.accepted.len() + self.rejected
    }
}

/// Byte offset just past the `[` opening the record array: the value of a
/// `"records"` key when present, otherwise the first `[` in the payload.
fn array_start(payload: &str) -> Option<usize> {
    let mut search = 0;
    while let Some(k) = payload[search..].find("\"records\"") {
        let after = search + k + "\"records\"".len();
        let rest = payload[after..].trim_start();
        if let Some(rest) = rest.strip_prefix(':') {
            let rest = rest.trim_start();
            if rest.starts_with('[') {
                return Some(payload.len() - rest.len() + 1);
            }
        }
        search = after;
    }
    payload.find('[').map(|i| i + 1)
}

/// Parses array elements one by one, stopping at the first malformed one.
fn salvage_elements(payload: &str) -> (Vec<Value>, bool) {
    let Some(mut pos) = array_start(payload) else {
        return (Vec::new(), true);
    };
    let mut out = Vec::new();
    let skip_ws = |p: usize| p + payload[p..].len() - payload[p..].trim_start().len();
    loop {
        pos = skip_ws(pos);
        if payload[pos..].starts_with(']') {
            return (out, false);
        }
        let mut stream = serde_json::Deserializer::from_str(&payload[pos..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(v)) => {
                pos += stream.byte_offset();
                out.push(v);
            }
            _ => return (out, true),
        }
        pos = skip_ws(pos);
        let rest = &payload[pos..];
        if rest.starts_with(',') {
            pos += 1;
        } else if rest.starts_with(']') {
            return (out, false);
        } else {
            return (out, true);
        }
    }
}

fn to_record(value: &Value) -> Option<SurveyRecord> {
    let obj = value.as_object()?;
    let mut rec = SurveyRecord::new();
    for (k, v) in obj {
        rec.values.insert(k.clone(), v.as_i64()?);
    }
    Some(rec)
}

/// Leniently parses a provider payload and validates every salvaged row.
///
/// Rows failing validation are counted, never repaired. A payload yielding
/// no rows is flagged dead.
pub fn parse_and_validate_batch(raw: &RawBatch, codebook: &Codebook) -> ParsedBatch {
    let (elements, truncated) = salvage_elements(&raw.payload);
    let mut out = ParsedBatch {
        dead: elements.is_empty(),
        truncated,
        ..Default::default()
    };
    for (i, v) in elements.iter().enumerate() {
        match to_record(v) {
            Some(rec) => match validate_record(&rec, codebook) {
                Verdict::Accept => out.accepted.push(rec),
                Verdict::Reject(reasons) => {
                    out.rejected += 1;
                    out.rejections.push((i, reasons));
                }
            },
            None => {
                out.rejected += 1;
                out.rejections.push((i, Vec::new()));
            }
        }
    }
    out
}
