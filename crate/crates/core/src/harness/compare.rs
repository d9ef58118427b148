//! Label-efficiency comparison between runs.
//!
//! The target is the reference policy's final test LL. For each policy the
//! report gives the smallest `labels_used` whose test LL reaches the target
//! and the saving relative to the reference.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{read_metrics, RoundMetrics};
use super::HarnessError;

/// Mean test-LL curve of one policy over its runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub policy: String,
    pub runs: usize,
    /// `(labels_used, mean test LL)` in increasing label order.
    pub points: Vec<(usize, f64)>,
}

impl Curve {
    /// Average runs at equal `labels_used`; points missing from some run are
    /// averaged over the runs that have them.
    pub fn from_runs(policy: impl Into<String>, runs: &[Vec<RoundMetrics>]) -> Self {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for run in runs {
            for r in run {
                if let Some(ll) = r.test_mean_ll {
                    let e = acc.entry(r.labels_used).or_insert((0.0, 0));
                    e.0 += ll;
                    e.1 += 1;
                }
            }
        }
        Self {
            policy: policy.into(),
            runs: runs.len(),
            points: acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect(),
        }
    }

    /// Replace each value by the mean of itself and up to two preceding
    /// observations.
    pub fn smoothed(&self) -> Self {
        let points = (0..self.points.len())
            .map(|i| {
                let lo = i.saturating_sub(2);
                let w = &self.points[lo..=i];
                (self.points[i].0, w.iter().map(|p| p.1).sum::<f64>() / w.len() as f64)
            })
            .collect();
        Self { points, ..self.clone() }
    }

    pub fn final_ll(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    /// First `labels_used` whose LL is at least `target`.
    pub fn labels_to_reach(&self, target: f64) -> Option<usize> {
        self.points.iter().find(|p| p.1 >= target).map(|p| p.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEfficiency {
    pub policy: String,
    pub runs: usize,
    pub final_ll: Option<f64>,
    pub labels_to_target: Option<usize>,
    /// `100 · (1 − labels / reference labels)`.
    pub reduction_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub reference: String,
    pub target_ll: f64,
    pub reference_labels: usize,
    pub policies: Vec<PolicyEfficiency>,
}

pub fn compare_curves(curves: &[Curve], reference: &str, smooth: bool) -> Result<EfficiencyReport, HarnessError> {
    let curves: Vec<Curve> = curves.iter().map(|c| if smooth { c.smoothed() } else { c.clone() }).collect();
    let reference_curve = curves
        .iter()
        .find(|c| c.policy == reference)
        .ok_or_else(|| HarnessError::Config(format!("no runs for reference policy {reference:?}")))?;
    let target_ll = reference_curve
        .final_ll()
        .ok_or_else(|| HarnessError::Config(format!("reference policy {reference:?} has no test LL")))?;
    let reference_labels = reference_curve.labels_to_reach(target_ll).expect("final point reaches itself");
    let policies = curves
        .iter()
        .map(|c| {
            let labels = c.labels_to_reach(target_ll);
            PolicyEfficiency {
                policy: c.policy.clone(),
                runs: c.runs,
                final_ll: c.final_ll(),
                labels_to_target: labels,
                reduction_pct: labels.map(|l| 100.0 * (1.0 - l as f64 / reference_labels as f64)),
            }
        })
        .collect();
    Ok(EfficiencyReport { reference: reference.to_string(), target_ll, reference_labels, policies })
}

/// Policy label of a metrics file: the `policy.policy` field of a
/// `config.json` next to it, else the file stem.
pub fn policy_label(metrics_path: &Path) -> String {
    let from_config = metrics_path
        .parent()
        .map(|d| d.join("config.json"))
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.pointer("/policy/policy").and_then(|p| p.as_str()).map(str::to_string));
    from_config.unwrap_or_else(|| {
        metrics_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("run")
            .to_string()
    })
}

/// Group metrics files by policy label and compare them.
pub fn compare_runs<P: AsRef<Path>>(paths: &[P], reference: &str, smooth: bool) -> Result<EfficiencyReport, HarnessError> {
    let mut groups: BTreeMap<String, Vec<Vec<RoundMetrics>>> = BTreeMap::new();
    for p in paths {
        let p = p.as_ref();
        let rows = read_metrics(std::fs::File::open(p)?)?;
        groups.entry(policy_label(p)).or_default().push(rows);
    }
    let curves: Vec<Curve> = groups.iter().map(|(k, v)| Curve::from_runs(k.clone(), v)).collect();
    compare_curves(&curves, reference, smooth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(policy: &str, pts: &[(usize, f64)]) -> Curve {
        Curve { policy: policy.into(), runs: 1, points: pts.to_vec() }
    }

    #[test]
    fn identical_runs_save_nothing() {
        let pts = [(100, -0.69), (200, -0.6), (300, -0.5)];
        let r = compare_curves(&[curve("a", &pts), curve("b", &pts)], "a", false).unwrap();
        assert_eq!(r.policies[1].reduction_pct, Some(0.0));
        assert_eq!(r.reference_labels, 300);
    }

    #[test]
    fn one_third_saving() {
        let reference: Vec<(usize, f64)> = (1..=6).map(|i| (i * 1000, -1.0 + 0.125 * i as f64)).collect();
        let fast: Vec<(usize, f64)> = (1..=6).map(|i| (i * 1000, -1.0 + 0.1875 * i as f64)).collect();
        let r = compare_curves(&[curve("fast", &fast), curve("ref", &reference)], "ref", false).unwrap();
        let f = &r.policies[0];
        assert_eq!(f.labels_to_target, Some(4000));
        assert!((f.reduction_pct.unwrap() - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn unreached_target_and_smoothing() {
        let r = compare_curves(
            &[curve("ref", &[(1, -0.9), (2, -0.5)]), curve("slow", &[(1, -0.9), (2, -0.8)])],
            "ref",
            false,
        )
        .unwrap();
        assert_eq!(r.policies[1].labels_to_target, None);
        let s = curve("x", &[(1, 0.0), (2, 3.0), (3, 6.0), (4, 0.0)]).smoothed();
        assert_eq!(s.points, vec![(1, 0.0), (2, 1.5), (3, 3.0), (4, 3.0)]);
        assert!(compare_curves(&[curve("a", &[])], "b", false).is_err());
    }

    #[test]
    fn averages_runs_by_labels() {
        let row = |l, ll| RoundMetrics {
            round: 0,
            labels_used: l,
            test_mean_ll: ll,
            val_mean_ll: None,
            unique_prompt_ratio_batch: 1.0,
            unique_prompt_ratio_cumulative: 1.0,
            mean_u_score: None,
            mean_e_score: None,
            first_pick_score_ratio: None,
            wall_time_s: None,
        };
        let c = Curve::from_runs("p", &[vec![row(10, Some(-1.0)), row(20, None)], vec![row(10, Some(-0.5))]]);
        assert_eq!(c.points, vec![(10, -0.75)]);
        assert_eq!(c.runs, 2);
    }
}
