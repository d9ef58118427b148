//! Per-round metrics rows and acquired-batch statistics.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::acquisition::Selection;

/// One row of `metrics.csv`. Row `t` describes the model trained on the
/// initial set plus `t` acquired batches, and the batch that was added last
/// (the initial set itself for row 0). Missing values are empty cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub labels_used: usize,
    pub test_mean_ll: Option<f64>,
    pub val_mean_ll: Option<f64>,
    pub unique_prompt_ratio_batch: f64,
    pub unique_prompt_ratio_cumulative: f64,
    pub mean_u_score: Option<f64>,
    pub mean_e_score: Option<f64>,
    /// β·e / u of the first pick of the batch.
    pub first_pick_score_ratio: Option<f64>,
    pub wall_time_s: Option<f64>,
}

pub const METRICS_HEADER: [&str; 10] = [
    "round",
    "labels_used",
    "test_mean_ll",
    "val_mean_ll",
    "unique_prompt_ratio_batch",
    "unique_prompt_ratio_cumulative",
    "mean_u_score",
    "mean_e_score",
    "first_pick_score_ratio",
    "wall_time_s",
];

pub fn write_metrics<W: Write>(rows: &[RoundMetrics], w: W) -> Result<(), HarnessError> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record(METRICS_HEADER)?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(r: R) -> Result<Vec<RoundMetrics>, HarnessError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(HarnessError::Config(format!("unexpected metrics header {header:?}")));
    }
    Ok(rdr.deserialize().collect::<Result<Vec<RoundMetrics>, _>>()?)
}

/// Unique-prompt ratios over a sequence of acquired batches, each given as
/// the prompt ids of its tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    /// Distinct prompts / batch size, per batch.
    pub per_batch: Vec<f64>,
    /// Distinct prompts / tuples over all batches so far.
    pub cumulative: Vec<f64>,
    /// Distinct prompts acquired so far.
    pub unique_total: Vec<usize>,
}

pub fn batch_stats<S: AsRef<str>>(history: &[Vec<S>]) -> BatchStats {
    let mut seen: HashSet<&str> = HashSet::new();
    let mut tuples = 0usize;
    let mut out = BatchStats { per_batch: Vec::new(), cumulative: Vec::new(), unique_total: Vec::new() };
    for batch in history {
        let distinct: HashSet<&str> = batch.iter().map(|p| p.as_ref()).collect();
        out.per_batch.push(ratio(distinct.len(), batch.len()));
        seen.extend(distinct);
        tuples += batch.len();
        out.cumulative.push(ratio(seen.len(), tuples));
        out.unique_total.push(seen.len());
    }
    out
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Score summaries of one batch: mean u, mean e, and β·e/u for its first
/// pick.
pub fn score_summary(selections: &[Selection], beta: f64) -> (Option<f64>, Option<f64>, Option<f64>) {
    let mu = mean(selections.iter().filter_map(|s| s.u_score));
    let me = mean(selections.iter().filter_map(|s| s.e_score));
    let first = selections.first().and_then(|s| match (s.u_score, s.e_score) {
        (Some(u), Some(e)) => Some(beta * e / u).filter(|r| r.is_finite()),
        _ => None,
    });
    (mu, me, first)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios() {
        let distinct: Vec<String> = (0..10).map(|i| format!("p{i}")).collect();
        let same = vec!["p0".to_string(); 10];
        let s = batch_stats(std::slice::from_ref(&distinct));
        assert_eq!(s.per_batch, vec![1.0]);
        let s = batch_stats(std::slice::from_ref(&same));
        assert_eq!(s.per_batch, vec![0.1]);
        let s = batch_stats(&[distinct.clone(), distinct]);
        assert_eq!(s.per_batch, vec![1.0, 1.0]);
        assert_eq!(s.cumulative, vec![1.0, 0.5]);
        assert_eq!(s.unique_total, vec![10, 10]);
    }

    #[test]
    fn csv_round_trip_with_empty_cells() {
        let rows = vec![
            RoundMetrics {
                round: 0,
                labels_used: 5,
                test_mean_ll: Some(-std::f64::consts::LN_2),
                val_mean_ll: None,
                unique_prompt_ratio_batch: 1.0,
                unique_prompt_ratio_cumulative: 0.8,
                mean_u_score: None,
                mean_e_score: Some(f64::NEG_INFINITY),
                first_pick_score_ratio: None,
                wall_time_s: None,
            },
        ];
        let mut buf = Vec::new();
        write_metrics(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&METRICS_HEADER.join(",")));
        assert!(text.contains("0,5,-0.6931471805599453,,1.0,0.8,,-inf,,"));
        assert_eq!(read_metrics(&buf[..]).unwrap(), rows);
        let mut empty = Vec::new();
        write_metrics(&[], &mut empty).unwrap();
        assert_eq!(read_metrics(&empty[..]).unwrap(), vec![]);
    }

    #[test]
    fn summaries() {
        let sel = |u: Option<f64>, e: Option<f64>| Selection {
            tuple_id: "t".into(),
            prompt_id: "p".into(),
            u_score: u,
            e_score: e,
            combined: 0.0,
        };
        let (mu, me, r) = score_summary(&[sel(Some(0.2), Some(1.0)), sel(Some(0.4), Some(3.0))], 0.1);
        assert!((mu.unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(me, Some(2.0));
        assert!((r.unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(score_summary(&[sel(None, None)], 0.1), (None, None, None));
        assert_eq!(score_summary(&[sel(Some(0.0), Some(1.0))], 0.1).2, None);
    }
}
