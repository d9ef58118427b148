//! Append-only label log.
//!
//! One JSON object per line, each carrying a strictly increasing `seq`:
//!
//! ```text
//! {"seq":1,"at_ms":1700000000000,"event":"publish","round":0,"items":[{"tuple_id":"t1","prompt_text":null,...}]}
//! {"seq":2,"at_ms":1700000004210,"event":"label","tuple_id":"t1","preference":1,"session":"alice"}
//! {"seq":3,"at_ms":1700000005003,"event":"skip","tuple_id":"t2","session":"bob"}
//! {"seq":4,"at_ms":1700000009000,"event":"extra","tuple_id":"t1","preference":2,"session":"bob"}
//! {"seq":5,"at_ms":1700000010000,"event":"report","round":0,"labels_used":5,"test_ll":-0.69}
//! {"seq":6,"at_ms":1700000011000,"event":"finish"}
//! ```
//!
//! `preference` is 1 when completion 1 is preferred and 2 otherwise. `extra`
//! records a submission for an already labeled tuple; it never changes the
//! stored label. Leases are not logged. A line that fails to parse is
//! tolerated only at the very end of the file (a torn final write).

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabelServiceError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemTexts {
    pub tuple_id: String,
    pub prompt_text: Option<String>,
    pub completion1_text: Option<String>,
    pub completion2_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Publish { round: usize, items: Vec<ItemTexts> },
    Label { tuple_id: String, preference: u8, session: String },
    Skip { tuple_id: String, session: String },
    Extra { tuple_id: String, preference: Option<u8>, session: String },
    Report { round: usize, labels_used: usize, test_ll: Option<f64> },
    Finish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub at_ms: u64,
    #[serde(flatten)]
    pub event: Event,
}

/// Parse a whole log. Sequence numbers must increase strictly.
pub fn parse_log(bytes: &[u8]) -> Result<Vec<LogRecord>> {
    let text = std::str::from_utf8(bytes).map_err(|e| LabelServiceError::Log(format!("not UTF-8: {e}")))?;
    let lines: Vec<(usize, &str)> = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).collect();
    let mut out: Vec<LogRecord> = Vec::with_capacity(lines.len());
    for (pos, (lineno, line)) in lines.iter().enumerate() {
        let rec: LogRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) if pos + 1 == lines.len() && !text.ends_with('\n') => {
                tracing::warn!(line = lineno + 1, error = %e, "dropping torn final log line");
                break;
            }
            Err(e) => return Err(LabelServiceError::Log(format!("line {}: {e}", lineno + 1))),
        };
        if let Some(prev) = out.last() {
            if rec.seq <= prev.seq {
                return Err(LabelServiceError::Log(format!("line {}: seq {} after {}", lineno + 1, rec.seq, prev.seq)));
            }
        }
        if let Event::Label { preference, .. } = &rec.event {
            if !matches!(preference, 1 | 2) {
                return Err(LabelServiceError::Log(format!("line {}: preference must be 1 or 2", lineno + 1)));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub(crate) struct LogWriter {
    file: File,
}

impl LogWriter {
    pub(crate) fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file })
    }

    /// Append and fsync before returning.
    pub(crate) fn append(&mut self, rec: &LogRecord) -> Result<()> {
        let mut line = serde_json::to_vec(rec).map_err(|e| LabelServiceError::Log(e.to_string()))?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses() {
        let text = concat!(
            r#"{"seq":1,"at_ms":1,"event":"publish","round":0,"items":[{"tuple_id":"t1","prompt_text":null,"completion1_text":"a","completion2_text":null}]}"#,
            "\n",
            r#"{"seq":2,"at_ms":2,"event":"label","tuple_id":"t1","preference":1,"session":"alice"}"#,
            "\n",
            r#"{"seq":4,"at_ms":9,"event":"extra","tuple_id":"t1","preference":2,"session":"bob"}"#,
            "\n",
            r#"{"seq":5,"at_ms":10,"event":"report","round":0,"labels_used":5,"test_ll":-0.69}"#,
            "\n",
            r#"{"seq":6,"at_ms":11,"event":"finish"}"#,
            "\n",
        );
        let recs = parse_log(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 5);
        assert_eq!(recs[4].event, Event::Finish);
    }

    #[test]
    fn torn_tail_tolerated_elsewhere_rejected() {
        let good = r#"{"seq":1,"at_ms":1,"event":"finish"}"#;
        let torn = format!("{good}\n{{\"seq\":2,\"at");
        assert_eq!(parse_log(torn.as_bytes()).unwrap().len(), 1);
        let middle = format!("{{\"seq\":2,\"at\n{good}\n");
        assert!(parse_log(middle.as_bytes()).is_err());
        let unordered = format!("{good}\n{good}\n");
        assert!(parse_log(unordered.as_bytes()).is_err());
        let bad_pref = r#"{"seq":1,"at_ms":1,"event":"label","tuple_id":"t","preference":3,"session":"s"}"#;
        assert!(parse_log(format!("{bad_pref}\n").as_bytes()).is_err());
        assert!(parse_log(&[0xff, 0xfe]).is_err());
    }
}
