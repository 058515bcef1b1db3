use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mann–Whitney AUC with ties counted one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "auc",
            format!("{} scores, {} labels", scores.len(), labels.len()),
        ));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Input("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum, so tied groups stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean (i + j + 2) / 2.
        let group_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += group_pos * (i + j + 2) as u128;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / 2.0 / (p * n) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(probs: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&p, &y) in probs.iter().zip(labels) {
            match (p >= threshold, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// Zero when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Zero when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Metrics of one platform, or of all samples under the name `merged`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the split holds a single class.
    pub auc: Option<f64>,
    pub auc_undefined: bool,
    pub positives: usize,
    pub negatives: usize,
    pub confusion: Confusion,
}

impl SplitMetrics {
    pub fn compute(split: &str, probs: &[f64], labels: &[u8], threshold: f64) -> Self {
        let confusion = Confusion::from_predictions(probs, labels, threshold);
        let auc = auc(probs, labels).ok();
        let positives = labels.iter().filter(|&&y| y == 1).count();
        Self {
            split: split.to_string(),
            accuracy: confusion.accuracy(),
            precision: confusion.precision(),
            recall: confusion.recall(),
            f1: confusion.f1(),
            auc,
            auc_undefined: auc.is_none(),
            positives,
            negatives: labels.len() - positives,
            confusion,
        }
    }
}

pub const MERGED: &str = "merged";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    /// Platforms in id order, then `merged`.
    pub splits: Vec<SplitMetrics>,
}

impl MetricsReport {
    /// Groups samples by platform and adds the merged split.
    pub fn from_predictions(
        probs: &[f64],
        labels: &[u8],
        platforms: &[String],
        threshold: f64,
    ) -> Result<Self> {
        if probs.len() != labels.len() || probs.len() != platforms.len() {
            return Err(Error::shape(
                "metrics",
                format!(
                    "{} probabilities, {} labels, {} platforms",
                    probs.len(),
                    labels.len(),
                    platforms.len()
                ),
            ));
        }
        let mut groups: BTreeMap<&str, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
        for i in 0..probs.len() {
            let g = groups.entry(platforms[i].as_str()).or_default();
            g.0.push(probs[i]);
            g.1.push(labels[i]);
        }
        let mut splits: Vec<SplitMetrics> = groups
            .iter()
            .map(|(p, (pr, ys))| SplitMetrics::compute(p, pr, ys, threshold))
            .collect();
        splits.push(SplitMetrics::compute(MERGED, probs, labels, threshold));
        Ok(Self { threshold, splits })
    }

    pub fn split(&self, name: &str) -> Option<&SplitMetrics> {
        self.splits.iter().find(|s| s.split == name)
    }

    pub fn merged(&self) -> &SplitMetrics {
        self.splits.last().expect("merged split is always present")
    }

    /// Metrics as rows, splits as columns; an undefined AUC is left empty.
    pub fn to_table_csv(&self) -> String {
        let mut out = String::from("metric");
        for s in &self.splits {
            out.push(',');
            out.push_str(&s.split);
        }
        out.push('\n');
        type Column = fn(&SplitMetrics) -> Option<f64>;
        let rows: [(&str, Column); 5] = [
            ("accuracy", |s| Some(s.accuracy)),
            ("precision", |s| Some(s.precision)),
            ("recall", |s| Some(s.recall)),
            ("f1", |s| Some(s.f1)),
            ("auc", |s| s.auc),
        ];
        for (name, get) in rows {
            out.push_str(name);
            for s in &self.splits {
                out.push(',');
                if let Some(v) = get(s) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn pairwise(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn confusion_arithmetic() {
        // Recall 1/2 with two true positives needs two false negatives.
        let c = Confusion {
            tp: 2,
            fp: 1,
            fn_: 2,
            tn: 6,
        };
        assert_eq!(c.precision(), 2.0 / 3.0);
        assert_eq!(c.recall(), 0.5);
        assert!((c.f1() - 4.0 / 7.0).abs() <= 1e-15);
        assert_eq!(c.accuracy(), 8.0 / 11.0);
    }

    #[test]
    fn perfect_predictions() {
        let labels = [1, 0, 1, 0];
        let probs = [0.9, 0.1, 0.7, 0.2];
        let m = SplitMetrics::compute("x", &probs, &labels, 0.5);
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn report_layout_and_single_class_flag() {
        let platforms: Vec<String> = ["B", "A", "C", "A", "B", "C"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let labels = [1, 0, 1, 1, 0, 1];
        let probs = [0.8, 0.3, 0.6, 0.4, 0.1, 0.9];
        let r = MetricsReport::from_predictions(&probs, &labels, &platforms, 0.5).unwrap();
        let names: Vec<&str> = r.splits.iter().map(|s| s.split.as_str()).collect();
        assert_eq!(names, ["A", "B", "C", MERGED]);
        let c = r.split("C").unwrap();
        assert!(c.auc.is_none() && c.auc_undefined);
        assert_eq!(r.merged().positives + r.merged().negatives, 6);
        let csv = r.to_table_csv();
        assert!(csv.starts_with("metric,A,B,C,merged\n"));
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().last().unwrap().starts_with("auc,1,1,,"));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise(vals in prop::collection::vec((0u8..6, 0u8..2), 2..200)) {
            let scores: Vec<f64> = vals.iter().map(|v| v.0 as f64 / 4.0).collect();
            let labels: Vec<u8> = vals.iter().map(|v| v.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            prop_assert_eq!(auc(&scores, &labels).unwrap(), pairwise(&scores, &labels));
        }

        #[test]
        fn auc_invariant_under_increasing_maps(vals in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..100)) {
            let scores: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let labels: Vec<u8> = vals.iter().map(|v| v.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let mapped: Vec<f64> = scores.iter().map(|s| s.powi(3) + 2.0 * s).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&mapped, &labels).unwrap());
        }

        #[test]
        fn metrics_in_unit_interval(vals in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..60)) {
            let probs: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let labels: Vec<u8> = vals.iter().map(|v| v.1).collect();
            let m = SplitMetrics::compute("x", &probs, &labels, 0.5);
            for v in [m.accuracy, m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let (p, r) = (m.precision, m.recall);
            if p + r > 0.0 {
                prop_assert!((m.f1 - 2.0 * p * r / (p + r)).abs() <= 1e-15);
            }
        }
    }
}
