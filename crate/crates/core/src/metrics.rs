//! Benchmark scoring.
//!
//! * gIoU: the mean of per-sample IoU. A sample with an empty ground truth
//!   scores 1 when the prediction is also empty and 0 otherwise.
//! * cIoU: total intersection over total union across all samples.
//!
//! Both are reported as percentages. The "All" column is computed over every
//! sample directly, so it is the sample-weighted mean of the concept columns.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{BinaryMask, MaskError};
use crate::sample::ConceptFamily;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no evaluation pairs")]
    Empty,
    #[error("sample `{sample_id}`: {source}")]
    Mask {
        sample_id: String,
        #[source]
        source: MaskError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub sample_id: String,
    pub concept: ConceptFamily,
    pub gt: BinaryMask,
    pub pred: BinaryMask,
}

impl EvalPair {
    fn counts(&self) -> Result<(u64, u64), MetricsError> {
        self.gt.intersection_union(&self.pred).map_err(|source| MetricsError::Mask {
            sample_id: self.sample_id.clone(),
            source,
        })
    }
}

/// Per-sample `(intersection, union)` counts.
pub fn pair_counts(pairs: &[EvalPair]) -> Result<Vec<(u64, u64)>, MetricsError> {
    pairs.iter().map(EvalPair::counts).collect()
}

fn giou_from_counts(counts: &[(u64, u64)]) -> f64 {
    let sum: f64 = counts
        .iter()
        .map(|&(i, u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
        .sum();
    100.0 * sum / counts.len() as f64
}

fn ciou_from_counts(counts: &[(u64, u64)]) -> f64 {
    let (i, u) = counts.iter().fold((0u64, 0u64), |(si, su), &(i, u)| (si + i, su + u));
    if u == 0 {
        return 100.0;
    }
    100.0 * i as f64 / u as f64
}

pub fn giou(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(giou_from_counts(&pair_counts(pairs)?))
}

/// Cumulative IoU. When every union is empty the result is 100.
pub fn ciou(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(ciou_from_counts(&pair_counts(pairs)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    pub overall_giou: f64,
    pub overall_ciou: f64,
    /// Concepts with no samples are absent rather than zero.
    pub per_concept_giou: BTreeMap<ConceptFamily, f64>,
    pub per_concept_ciou: BTreeMap<ConceptFamily, f64>,
    pub n_total: usize,
    pub n: BTreeMap<ConceptFamily, usize>,
}

pub fn per_concept_report(pairs: &[EvalPair]) -> Result<ConceptReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let counts = pair_counts(pairs)?;
    let mut buckets: BTreeMap<ConceptFamily, Vec<(u64, u64)>> = BTreeMap::new();
    for (pair, c) in pairs.iter().zip(&counts) {
        buckets.entry(pair.concept).or_default().push(*c);
    }
    Ok(ConceptReport {
        overall_giou: giou_from_counts(&counts),
        overall_ciou: ciou_from_counts(&counts),
        per_concept_giou: buckets.iter().map(|(k, v)| (*k, giou_from_counts(v))).collect(),
        per_concept_ciou: buckets.iter().map(|(k, v)| (*k, ciou_from_counts(v))).collect(),
        n_total: pairs.len(),
        n: buckets.iter().map(|(k, v)| (*k, v.len())).collect(),
    })
}

impl ConceptReport {
    /// Column headers in report order.
    pub fn columns() -> Vec<&'static str> {
        std::iter::once("All")
            .chain(ConceptFamily::ALL.iter().map(|c| c.short_label()))
            .collect()
    }

    fn row(&self, overall: f64, per: &BTreeMap<ConceptFamily, f64>) -> Vec<String> {
        std::iter::once(format!("{overall:.1}"))
            .chain(
                ConceptFamily::ALL
                    .iter()
                    .map(|c| per.get(c).map_or_else(|| "-".to_string(), |v| format!("{v:.1}"))),
            )
            .collect()
    }

    /// Aligned plain-text table with gIoU, cIoU and count rows.
    pub fn to_table(&self) -> String {
        let mut rows = vec![
            (
                "",
                Self::columns().into_iter().map(String::from).collect::<Vec<_>>(),
            ),
            ("gIoU", self.row(self.overall_giou, &self.per_concept_giou)),
            ("cIoU", self.row(self.overall_ciou, &self.per_concept_ciou)),
        ];
        let n_row = std::iter::once(self.n_total.to_string())
            .chain(
                ConceptFamily::ALL
                    .iter()
                    .map(|c| self.n.get(c).map_or_else(|| "0".to_string(), |v| v.to_string())),
            )
            .collect();
        rows.push(("n", n_row));
        let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let col_w = rows.iter().flat_map(|r| r.1.iter().map(String::len)).max().unwrap_or(0);
        let mut out = String::new();
        for (label, cells) in rows {
            let _ = write!(out, "{label:<label_w$}");
            for c in cells {
                let _ = write!(out, "  {c:>col_w$}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mask of size 1 x `len` whose first `fg` pixels are set.
    fn strip(len: usize, fg: usize) -> BinaryMask {
        BinaryMask::from_fn(1, len, |_, x| x < fg)
    }

    fn pair(concept: ConceptFamily, gt: BinaryMask, pred: BinaryMask) -> EvalPair {
        EvalPair {
            sample_id: "s".into(),
            concept,
            gt,
            pred,
        }
    }

    /// Pair with prescribed intersection and union sizes.
    fn pair_iu(concept: ConceptFamily, len: usize, i: usize, u: usize) -> EvalPair {
        pair(concept, strip(len, u), strip(len, i))
    }

    #[test]
    fn perfect_and_mean() {
        let e = ConceptFamily::Entities;
        assert_eq!(giou(&[pair_iu(e, 8, 4, 4)]).unwrap(), 100.0);
        assert_eq!(ciou(&[pair_iu(e, 8, 4, 4)]).unwrap(), 100.0);
        assert_eq!(giou(&[pair_iu(e, 8, 4, 4), pair_iu(e, 8, 2, 4)]).unwrap(), 75.0);
    }

    #[test]
    fn empty_gt_conventions() {
        let e = ConceptFamily::Entities;
        let neg_hit = pair(e, BinaryMask::zeros(1, 8), BinaryMask::zeros(1, 8));
        let half = pair_iu(e, 8, 2, 4);
        assert_eq!(giou(&[neg_hit.clone(), half.clone()]).unwrap(), 75.0);
        let neg_miss = pair(e, BinaryMask::zeros(1, 8), strip(8, 1));
        assert_eq!(giou(&[neg_miss]).unwrap(), 0.0);
        // both-empty pairs add nothing to cIoU sums
        assert_eq!(ciou(&[neg_hit.clone(), half]).unwrap(), 50.0);
        assert_eq!(ciou(&[neg_hit.clone(), neg_hit]).unwrap(), 100.0);
    }

    #[test]
    fn sum_versus_mean_divergence() {
        let e = ConceptFamily::Entities;
        let pairs = [pair_iu(e, 128, 4, 4), pair_iu(e, 128, 50, 100)];
        assert_eq!(giou(&pairs).unwrap(), 75.0);
        let c = ciou(&pairs).unwrap();
        assert!((c - 5400.0 / 104.0).abs() < 1e-12);
        assert!((c - 51.92).abs() < 0.01);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert_eq!(giou(&[]).unwrap_err(), MetricsError::Empty);
        assert_eq!(ciou(&[]).unwrap_err(), MetricsError::Empty);
        assert_eq!(per_concept_report(&[]).unwrap_err(), MetricsError::Empty);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = pair(ConceptFamily::Entities, BinaryMask::zeros(2, 2), BinaryMask::zeros(2, 3));
        assert!(matches!(giou(&[p]).unwrap_err(), MetricsError::Mask { .. }));
    }

    #[test]
    fn overall_is_sample_weighted() {
        let e = ConceptFamily::Entities;
        let s = ConceptFamily::SpatialLayout;
        // three entity pairs at 0.8 and one spatial pair at 0.6
        let mut pairs: Vec<EvalPair> = (0..3).map(|_| pair_iu(e, 10, 8, 10)).collect();
        pairs.push(pair_iu(s, 10, 6, 10));
        let r = per_concept_report(&pairs).unwrap();
        assert!((r.per_concept_giou[&e] - 80.0).abs() < 1e-9);
        assert!((r.per_concept_giou[&s] - 60.0).abs() < 1e-9);
        assert!((r.overall_giou - 75.0).abs() < 1e-9);
        assert!(!r.per_concept_giou.contains_key(&ConceptFamily::PhysicsSafety));
        assert_eq!(r.n[&e], 3);
    }

    #[test]
    fn single_concept_bucket_equals_overall() {
        let a = ConceptFamily::AffordancesFunctions;
        let pairs = [pair_iu(a, 10, 3, 9), pair_iu(a, 10, 7, 7)];
        let r = per_concept_report(&pairs).unwrap();
        assert_eq!(r.per_concept_giou[&a], r.overall_giou);
        assert_eq!(r.per_concept_ciou[&a], r.overall_ciou);
    }

    #[test]
    fn table_column_order() {
        assert_eq!(ConceptReport::columns(), vec!["All", "Ent.", "Spat.", "Rel.", "Aff.", "Phys."]);
        let r = per_concept_report(&[pair_iu(ConceptFamily::PhysicsSafety, 4, 2, 4)]).unwrap();
        let table = r.to_table();
        let header = table.lines().next().unwrap();
        let positions: Vec<usize> = ["All", "Ent.", "Spat.", "Rel.", "Aff.", "Phys."]
            .iter()
            .map(|c| header.find(c).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        let giou_row = table.lines().nth(1).unwrap();
        assert!(giou_row.starts_with("gIoU"));
        assert!(giou_row.trim_end().ends_with("50.0"));
        assert!(giou_row.contains('-'));
    }
}
