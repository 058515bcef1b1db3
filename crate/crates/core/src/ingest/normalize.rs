use serde::{Deserialize, Serialize};

use super::events::{EventRecord, NUM_ATTRS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    MinMax,
    ZScore,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum ColumnStats {
    MinMax {
        min: f64,
        max: f64,
        degenerate: bool,
    },
    ZScore {
        mean: f64,
        std: f64,
        degenerate: bool,
    },
}

impl ColumnStats {
    pub fn fit(scheme: Scheme, column: &[f64]) -> Result<Self> {
        if column.is_empty() {
            return Err(Error::Input(
                "cannot fit a normalizer on zero values".into(),
            ));
        }
        Ok(match scheme {
            Scheme::MinMax => {
                let min = column.iter().copied().fold(f64::INFINITY, f64::min);
                let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                ColumnStats::MinMax {
                    min,
                    max,
                    degenerate: max == min,
                }
            }
            Scheme::ZScore => {
                let n = column.len() as f64;
                let mean = column.iter().sum::<f64>() / n;
                let std = if column.len() > 1 {
                    (column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                ColumnStats::ZScore {
                    mean,
                    std,
                    degenerate: std == 0.0,
                }
            }
        })
    }

    pub fn is_degenerate(&self) -> bool {
        match *self {
            ColumnStats::MinMax { degenerate, .. } | ColumnStats::ZScore { degenerate, .. } => {
                degenerate
            }
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            _ if self.is_degenerate() => 0.0,
            ColumnStats::MinMax { min, max, .. } => ((x - min) / (max - min)).clamp(0.0, 1.0),
            ColumnStats::ZScore { mean, std, .. } => (x - mean) / std,
        }
    }
}

/// Default per-attribute schemes: timestamps min-max, conversion group and
/// ad weight z-scored, bounded codes min-max, unbounded counts z-scored.
pub fn default_schema() -> [Scheme; NUM_ATTRS] {
    use Scheme::*;
    [
        MinMax, ZScore, ZScore, ZScore, MinMax, ZScore, MinMax, MinMax, ZScore, MinMax, MinMax,
        MinMax,
    ]
}

/// Fitted statistics for every attribute column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub columns: Vec<ColumnStats>,
}

impl NormalizerStats {
    pub fn fit_columns(columns: &[Vec<f64>], schema: &[Scheme]) -> Result<Self> {
        if columns.len() != schema.len() {
            return Err(Error::Config(format!(
                "{} columns but {} schemes",
                columns.len(),
                schema.len()
            )));
        }
        let columns = columns
            .iter()
            .zip(schema)
            .map(|(c, &s)| ColumnStats::fit(s, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { columns })
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for (v, s) in row.iter_mut().zip(&self.columns) {
            *v = s.apply(*v);
        }
    }
}

pub fn fit_normalizer(
    events: &[EventRecord],
    schema: &[Scheme; NUM_ATTRS],
) -> Result<NormalizerStats> {
    if events.is_empty() {
        return Err(Error::Input(
            "cannot fit a normalizer on an empty event set".into(),
        ));
    }
    let columns: Vec<Vec<f64>> = (0..NUM_ATTRS)
        .map(|c| events.iter().map(|e| e.attrs[c]).collect())
        .collect();
    NormalizerStats::fit_columns(&columns, schema)
}

pub fn apply_normalizer(stats: &NormalizerStats, events: &[EventRecord]) -> Vec<EventRecord> {
    events
        .iter()
        .map(|e| {
            let mut e = e.clone();
            stats.apply_row(&mut e.attrs);
            e
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn timestamps_default_to_minmax() {
        assert_eq!(
            default_schema()[crate::ingest::attr::TIMESTAMP],
            Scheme::MinMax
        );
        assert_eq!(
            default_schema()[crate::ingest::attr::CONVERSION_GROUP],
            Scheme::ZScore
        );
        assert_eq!(
            default_schema()[crate::ingest::attr::AD_WEIGHT],
            Scheme::ZScore
        );
    }

    #[test]
    fn zscore_fit_uses_sample_std() {
        match ColumnStats::fit(Scheme::ZScore, &[1.0, 2.0, 3.0]).unwrap() {
            ColumnStats::ZScore {
                mean,
                std,
                degenerate,
            } => {
                assert_eq!(mean, 2.0);
                assert_eq!(std, 1.0);
                assert!(!degenerate);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constant_columns_are_degenerate() {
        let s = ColumnStats::fit(Scheme::MinMax, &[4.0, 4.0]).unwrap();
        assert!(s.is_degenerate());
        assert_eq!(s.apply(4.0), 0.0);
        let z = ColumnStats::fit(Scheme::ZScore, &[4.0]).unwrap();
        assert!(z.is_degenerate());
        assert_eq!(z.apply(10.0), 0.0);
    }

    #[test]
    fn apply_examples() {
        let col = [1.0, 2.0, 3.0];
        let mm = ColumnStats::fit(Scheme::MinMax, &col).unwrap();
        assert_eq!(col.map(|v| mm.apply(v)), [0.0, 0.5, 1.0]);
        let z = ColumnStats::fit(Scheme::ZScore, &col).unwrap();
        assert_eq!(col.map(|v| z.apply(v)), [-1.0, 0.0, 1.0]);
        assert_eq!(mm.apply(-5.0), 0.0);
        assert_eq!(mm.apply(9.0), 1.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(fit_normalizer(&[], &default_schema()).is_err());
    }

    proptest! {
        #[test]
        fn fitted_set_is_standardised(col in prop::collection::vec(-1e4f64..1e4, 2..200)) {
            let mm = ColumnStats::fit(Scheme::MinMax, &col).unwrap();
            prop_assert!(col.iter().all(|&v| (0.0..=1.0).contains(&mm.apply(v))));
            let z = ColumnStats::fit(Scheme::ZScore, &col).unwrap();
            if !z.is_degenerate() {
                let out: Vec<f64> = col.iter().map(|&v| z.apply(v)).collect();
                let n = out.len() as f64;
                let mean = out.iter().sum::<f64>() / n;
                let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                prop_assert!(mean.abs() <= 1e-9);
                prop_assert!((sd - 1.0).abs() <= 1e-9);
            }
        }
    }
}
