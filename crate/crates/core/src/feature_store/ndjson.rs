use std::io::{BufRead, Write};

use super::{FeatureDataset, FeatureStoreError, PreferenceTuple, Result};
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    tuple_id: String,
    prompt_id: String,
    prompt_vec: Vec<f32>,
    pair1_vec: Vec<f32>,
    pair2_vec: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u8>,
}

/// Parse one JSON object per line. Blank lines are skipped; errors carry the
/// 1-based line number. Dimension errors report the record ordinal.
pub fn read_ndjson<R: BufRead>(name: impl Into<String>, reader: R) -> Result<FeatureDataset> {
    let mut tuples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| FeatureStoreError::Malformed {
            location: format!("line {}", lineno + 1),
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let label = match rec.label {
            None => None,
            Some(0) => Some(false),
            Some(1) => Some(true),
            Some(v) => return Err(malformed(format!("label must be 0 or 1, got {v}"))),
        };
        tuples.push(PreferenceTuple {
            tuple_id: rec.tuple_id,
            prompt_id: rec.prompt_id,
            prompt_vec: rec.prompt_vec,
            pair1_vec: rec.pair1_vec,
            pair2_vec: rec.pair2_vec,
            label,
        });
    }
    FeatureDataset::new(name, tuples)
}

pub fn write_ndjson<W: Write>(dataset: &FeatureDataset, w: &mut W) -> Result<()> {
    for t in dataset.tuples() {
        let rec = Record {
            tuple_id: t.tuple_id.clone(),
            prompt_id: t.prompt_id.clone(),
            prompt_vec: t.prompt_vec.clone(),
            pair1_vec: t.pair1_vec.clone(),
            pair2_vec: t.pair2_vec.clone(),
            label: t.label.map(u8::from),
        };
        serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::testutil::tuple;

    const THREE: &str = r#"{"tuple_id":"a","prompt_id":"p","prompt_vec":[0.5,1],"pair1_vec":[1,2,3],"pair2_vec":[3,2,1],"label":1}
{"tuple_id":"b","prompt_id":"p","prompt_vec":[0.5,1],"pair1_vec":[1,2,3],"pair2_vec":[3,2,1]}

{"tuple_id":"c","prompt_id":"q","prompt_vec":[2,1],"pair1_vec":[1,2,3],"pair2_vec":[3,2,1],"label":0}
"#;

    #[test]
    fn reads_three_records() {
        let ds = read_ndjson("t", THREE.as_bytes()).unwrap();
        assert_eq!((ds.len(), ds.d_p(), ds.d_c()), (3, 2, 3));
        assert_eq!(ds.tuples()[0].label, Some(true));
        assert_eq!(ds.tuples()[1].label, None);
        assert_eq!(ds.tuples()[2].label, Some(false));
    }

    #[test]
    fn dimension_error_names_record_two() {
        let bad = THREE.replacen(r#""prompt_vec":[0.5,1],"pair1_vec":[1,2,3],"pair2_vec":[3,2,1]}"#,
            r#""prompt_vec":[0.5,1,1,1,1],"pair1_vec":[1,2,3],"pair2_vec":[3,2,1]}"#, 1);
        let err = read_ndjson("t", bad.as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            FeatureStoreError::DimensionMismatch { record: 2, field: "prompt_vec", expected: 2, found: 5 }
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let bad = "{\"tuple_id\":\"a\"}\n";
        let err = read_ndjson("t", bad.as_bytes()).unwrap_err();
        match err {
            FeatureStoreError::Malformed { location, .. } => assert_eq!(location, "line 1"),
            e => panic!("{e:?}"),
        }
        let bad_label = THREE.replace(r#""label":0"#, r#""label":2"#);
        assert!(read_ndjson("t", bad_label.as_bytes()).is_err());
    }

    #[test]
    fn unlabeled_single_tuple_is_one_line_without_label() {
        let ds = FeatureDataset::new("t", vec![tuple("a", "p", &[1.0], &[2.0], &[3.0])]).unwrap();
        let mut buf = Vec::new();
        write_ndjson(&ds, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.matches('\n').count(), 1);
        assert!(s.ends_with('\n'));
        assert!(!s.contains("label"));
    }
}
