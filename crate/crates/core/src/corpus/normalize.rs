use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Orientation, Result, RunRecord};

/// Observed value range of one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
    pub orientation: Orientation,
}

impl Range {
    fn widen(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }
}

/// Per-dataset min/max scaling into `[0, 1]` with "higher is better"
/// orientation. Datasets without their own range fall back to the range
/// pooled over all datasets of the same orientation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    datasets: BTreeMap<String, Range>,
    pooled: Vec<Range>,
}

impl NormalizationStats {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> Self {
        let mut stats = NormalizationStats::default();
        for r in records {
            for &v in &r.curve {
                stats
                    .datasets
                    .entry(r.dataset_id.clone())
                    .or_insert(Range {
                        min: v,
                        max: v,
                        orientation: r.metric_orientation,
                    })
                    .widen(v);
                match stats.pooled.iter_mut().find(|p| p.orientation == r.metric_orientation) {
                    Some(p) => p.widen(v),
                    None => stats.pooled.push(Range {
                        min: v,
                        max: v,
                        orientation: r.metric_orientation,
                    }),
                }
            }
        }
        stats
    }

    pub fn insert(&mut self, dataset_id: impl Into<String>, range: Range) {
        self.datasets.insert(dataset_id.into(), range);
    }

    pub fn dataset_range(&self, dataset_id: &str) -> Option<&Range> {
        self.datasets.get(dataset_id)
    }

    pub fn range_for(&self, dataset_id: &str, orientation: Orientation) -> Option<Range> {
        self.datasets
            .get(dataset_id)
            .copied()
            .or_else(|| self.pooled.iter().find(|p| p.orientation == orientation).copied())
    }

    pub fn normalize_value(&self, dataset_id: &str, orientation: Orientation, v: f64) -> Result<f64> {
        let range = self
            .range_for(dataset_id, orientation)
            .ok_or_else(|| CorpusError::UnknownDataset(dataset_id.to_string()))?;
        if range.max <= range.min {
            return Err(CorpusError::DegenerateDataset(dataset_id.to_string()));
        }
        let scaled = (v - range.min) / (range.max - range.min);
        let oriented = match orientation {
            Orientation::HigherBetter => scaled,
            Orientation::LowerBetter => 1.0 - scaled,
        };
        Ok(oriented.clamp(0.0, 1.0))
    }

    /// Inverse of [`normalize_value`](Self::normalize_value) on `[0, 1]`.
    pub fn denormalize_value(&self, dataset_id: &str, orientation: Orientation, v: f64) -> Result<f64> {
        let range = self
            .range_for(dataset_id, orientation)
            .ok_or_else(|| CorpusError::UnknownDataset(dataset_id.to_string()))?;
        let scaled = match orientation {
            Orientation::HigherBetter => v,
            Orientation::LowerBetter => 1.0 - v,
        };
        Ok(range.min + scaled * (range.max - range.min))
    }

    /// Normalized partial curve `y_1..y_l` of `record`.
    pub fn normalize(&self, record: &RunRecord, l: usize) -> Result<Vec<f64>> {
        record
            .truncate(l)?
            .iter()
            .map(|&v| self.normalize_value(&record.dataset_id, record.metric_orientation, v))
            .collect()
    }

    pub fn normalized_final(&self, record: &RunRecord) -> Result<f64> {
        self.normalize_value(&record.dataset_id, record.metric_orientation, record.final_value())
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::record;
    use super::*;

    #[test]
    fn unit_range_higher_better_is_identity() {
        let r = record("d", "r", &["a"], &[0.0, 0.3, 0.7, 1.0]);
        let stats = NormalizationStats::from_records([&r]);
        assert_eq!(stats.normalize(&r, 4).unwrap(), r.curve);
    }

    #[test]
    fn lower_better_minimum_maps_to_one() {
        let mut r = record("d", "r", &["a"], &[3.0, 2.0, 1.5]);
        r.metric_orientation = Orientation::LowerBetter;
        let stats = NormalizationStats::from_records([&r]);
        assert_eq!(stats.normalize_value("d", Orientation::LowerBetter, 1.5).unwrap(), 1.0);
        assert_eq!(stats.normalize_value("d", Orientation::LowerBetter, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn affine_map_and_clipping() {
        let mut stats = NormalizationStats::default();
        stats.insert(
            "d",
            Range {
                min: 0.0,
                max: 2.0,
                orientation: Orientation::HigherBetter,
            },
        );
        assert_eq!(stats.normalize_value("d", Orientation::HigherBetter, 0.5).unwrap(), 0.25);
        assert_eq!(stats.normalize_value("d", Orientation::HigherBetter, 3.0).unwrap(), 1.0);
        assert_eq!(stats.normalize_value("d", Orientation::HigherBetter, -1.0).unwrap(), 0.0);
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let mut r = record("d", "r", &["a"], &[3.0, 2.0, 1.5]);
        r.metric_orientation = Orientation::LowerBetter;
        let stats = NormalizationStats::from_records([&r]);
        for v in [1.5, 2.2, 3.0] {
            let n = stats.normalize_value("d", Orientation::LowerBetter, v).unwrap();
            let back = stats.denormalize_value("d", Orientation::LowerBetter, n).unwrap();
            assert!((back - v).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_dataset_is_an_error() {
        let r = record("flat", "r", &["a"], &[0.4, 0.4]);
        let stats = NormalizationStats::from_records([&r]);
        assert!(matches!(stats.normalize(&r, 2), Err(CorpusError::DegenerateDataset(d)) if d == "flat"));
    }

    #[test]
    fn unseen_dataset_uses_pooled_range() {
        let a = record("a", "1", &["t"], &[0.2, 0.4]);
        let b = record("b", "2", &["t"], &[0.1, 0.9]);
        let stats = NormalizationStats::from_records([&a, &b]);
        let v = stats.normalize_value("new", Orientation::HigherBetter, 0.5).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert!(stats.normalize_value("new", Orientation::LowerBetter, 0.5).is_err());
    }
}
