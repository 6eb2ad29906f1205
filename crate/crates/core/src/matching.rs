//! Greedy 1:1 nearest-neighbour matching without replacement on trend
//! features, with a caliper in pooled standard-deviation units.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::panel::{Panel, UnitId, UnitWeights};
use crate::trends::TrendMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("trend matrices differ in kind or feature count")]
    MismatchedTrends,
    #[error("caliper must be positive, got {0}")]
    InvalidCaliper(f64),
    #[error("no treated unit found a match within the caliper")]
    EmptyMatchSet,
    #[error("match set does not belong to this panel: {0}")]
    ForeignMatchSet(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Single feature: absolute difference.
    Absolute,
    /// Several features, each divided by its pooled SD.
    StandardizedEuclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchPair {
    pub treated: UnitId,
    pub comparison: UnitId,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchSet {
    pub pairs: Vec<MatchPair>,
    pub unmatched_treated: Vec<UnitId>,
    pub caliper_sd: f64,
    /// Largest admissible pair distance, in the metric's own units.
    pub caliper_distance: f64,
    pub metric: DistanceMetric,
}

impl MatchSet {
    pub fn n_treated(&self) -> usize {
        self.pairs.len() + self.unmatched_treated.len()
    }

    /// Fraction of treated units left unmatched.
    pub fn failure_rate(&self) -> f64 {
        self.unmatched_treated.len() as f64 / self.n_treated().max(1) as f64
    }

    /// `treated,comparison,distance`
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["treated", "comparison", "distance"])?;
        for p in &self.pairs {
            w.write_record([p.treated.to_string(), p.comparison.to_string(), p.distance.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn pooled_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    if n > 1.0 {
        (ss / (n - 1.0)).sqrt()
    } else {
        0.0
    }
}

/// Matches treated units in their given (ascending id) order, each to the
/// nearest still-available comparison unit, provided the distance is within
/// `caliper_sd` pooled standard deviations. Ties go to the earlier
/// comparison unit.
///
/// The pooled SD of a feature is the sample SD over treated and comparison
/// units together. With several features each is divided by its pooled SD and
/// the caliper applies to the Euclidean distance in those units.
pub fn match_nearest(
    treated: &TrendMatrix,
    comparison: &TrendMatrix,
    caliper_sd: f64,
) -> Result<MatchSet, MatchError> {
    if treated.kind != comparison.kind || treated.n_features() != comparison.n_features() {
        return Err(MatchError::MismatchedTrends);
    }
    if !(caliper_sd > 0.0 && caliper_sd.is_finite()) {
        return Err(MatchError::InvalidCaliper(caliper_sd));
    }
    let m = treated.n_features();
    let scales: Vec<f64> = (0..m)
        .map(|f| {
            let col: Vec<f64> =
                treated.features.column(f).iter().chain(comparison.features.column(f).iter()).copied().collect();
            pooled_sd(&col)
        })
        .collect();

    let (metric, caliper_distance) = if m == 1 {
        (DistanceMetric::Absolute, caliper_sd * scales[0])
    } else {
        (DistanceMetric::StandardizedEuclidean, caliper_sd)
    };
    let scale_of = |f: usize| if m == 1 || scales[f] == 0.0 { 1.0 } else { scales[f] };
    let distance = |i: usize, j: usize| -> f64 {
        if m == 1 {
            return (treated.features[(i, 0)] - comparison.features[(j, 0)]).abs();
        }
        (0..m)
            .map(|f| ((treated.features[(i, f)] - comparison.features[(j, f)]) / scale_of(f)).powi(2))
            .sum::<f64>()
            .sqrt()
    };

    let mut used = vec![false; comparison.n_units()];
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for i in 0..treated.n_units() {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..comparison.n_units()).filter(|&j| !used[j]) {
            let d = distance(i, j);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        match best {
            Some((j, d)) if d <= caliper_distance => {
                used[j] = true;
                pairs.push(MatchPair {
                    treated: treated.unit_ids[i].clone(),
                    comparison: comparison.unit_ids[j].clone(),
                    distance: d,
                });
            }
            _ => unmatched.push(treated.unit_ids[i].clone()),
        }
    }
    Ok(MatchSet { pairs, unmatched_treated: unmatched, caliper_sd, caliper_distance, metric })
}

/// Uniform weights on the matched units of both groups, zero elsewhere, so a
/// weighted DD fit runs on matched pairs only.
pub fn match_weights(ms: &MatchSet, panel: &Panel) -> Result<UnitWeights, MatchError> {
    if ms.pairs.is_empty() {
        return Err(MatchError::EmptyMatchSet);
    }
    let ids = panel.unit_ids();
    let index = |id: &UnitId| ids.binary_search(id).map_err(|_| MatchError::ForeignMatchSet(id.to_string()));
    let share = 1.0 / ms.pairs.len() as f64;
    let mut values = vec![0.0; panel.n_units()];
    for p in &ms.pairs {
        let (t, c) = (index(&p.treated)?, index(&p.comparison)?);
        if !panel.is_treated(t) || panel.is_treated(c) {
            return Err(MatchError::ForeignMatchSet(format!("pair {} / {}", p.treated, p.comparison)));
        }
        values[t] = share;
        values[c] = share;
    }
    Ok(UnitWeights::new("match", values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trends::TrendKind;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn trends(prefix: &str, rows: &[Vec<f64>]) -> TrendMatrix {
        let m = rows.first().map_or(1, Vec::len);
        TrendMatrix {
            unit_ids: (0..rows.len()).map(|i| UnitId::new(format!("{prefix}{i}"))).collect(),
            features: DMatrix::from_fn(rows.len(), m, |i, f| rows[i][f]),
            kind: TrendKind::LINEAR,
            time_basis: vec![1.0, 2.0, 3.0, 4.0],
            warnings: vec![],
        }
    }

    fn scalar(prefix: &str, v: &[f64]) -> TrendMatrix {
        trends(prefix, &v.iter().map(|&x| vec![x]).collect::<Vec<_>>())
    }

    #[test]
    fn matches_nearest_within_caliper() {
        let ms = match_nearest(&scalar("t", &[0.0]), &scalar("c", &[0.0, 5.0]), 0.2).unwrap();
        assert_eq!(ms.pairs.len(), 1);
        assert_eq!(ms.pairs[0].comparison.as_str(), "c0");
        assert_eq!(ms.metric, DistanceMetric::Absolute);
    }

    #[test]
    fn without_replacement_leaves_second_treated_unmatched() {
        let ms = match_nearest(&scalar("t", &[0.0, 0.0]), &scalar("c", &[0.01]), 2.0).unwrap();
        assert_eq!(ms.pairs.len(), 1);
        assert_eq!(ms.unmatched_treated, vec![UnitId::new("t1")]);
        assert!((ms.failure_rate() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn separated_groups_do_not_match() {
        let t: Vec<f64> = (0..50).map(|i| 0.001 * i as f64).collect();
        let c: Vec<f64> = (0..100).map(|i| -0.2 - 0.001 * i as f64).collect();
        let ms = match_nearest(&scalar("t", &t), &scalar("c", &c), 0.2).unwrap();
        assert!(ms.pairs.is_empty());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(
            match_nearest(&scalar("t", &[0.0]), &scalar("c", &[0.0]), 0.0),
            Err(MatchError::InvalidCaliper(0.0))
        );
        let two = trends("c", &[vec![0.0, 1.0]]);
        assert_eq!(match_nearest(&scalar("t", &[0.0]), &two, 0.2), Err(MatchError::MismatchedTrends));
    }

    #[test]
    fn weights_cover_pairs_only() {
        let y = DMatrix::from_fn(4, 3, |i, t| (i + t) as f64);
        let panel = Panel::new(
            ["c0", "c1", "t0", "t1"].iter().map(|&s| UnitId::new(s)).collect(),
            vec![false, false, true, true],
            vec![1.0, 2.0, 3.0],
            3.0,
            y,
            None,
        )
        .unwrap();
        let ms = match_nearest(&scalar("t", &[0.0, 0.0]), &scalar("c", &[0.01, 3.0]), 0.2).unwrap();
        let w = match_weights(&ms, &panel).unwrap();
        assert_eq!(w.values, vec![1.0, 0.0, 1.0, 0.0]);
        let empty = MatchSet { pairs: vec![], ..ms };
        assert_eq!(match_weights(&empty, &panel), Err(MatchError::EmptyMatchSet));
    }

    #[test]
    fn csv_pairs() {
        let ms = match_nearest(&scalar("t", &[0.0]), &scalar("c", &[0.0, 5.0]), 0.2).unwrap();
        let mut buf = Vec::new();
        ms.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "treated,comparison,distance\nt0,c0,0\n");
    }

    proptest! {
        #[test]
        fn pairs_are_injective_within_caliper_and_deterministic(
            t in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 1..30),
            c in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 1..40),
            caliper in 0.05f64..1.0,
            one_dim in any::<bool>(),
        ) {
            let pick = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                if one_dim { rows.iter().map(|r| vec![r[0]]).collect() } else { rows.clone() }
            };
            let (tm, cm) = (trends("t", &pick(&t)), trends("c", &pick(&c)));
            let ms = match_nearest(&tm, &cm, caliper).unwrap();
            let mut seen = std::collections::HashSet::new();
            for p in &ms.pairs {
                prop_assert!(seen.insert(p.comparison.clone()));
                prop_assert!(p.distance <= ms.caliper_distance);
            }
            prop_assert_eq!(ms.n_treated(), t.len());
            prop_assert_eq!(match_nearest(&tm, &cm, caliper).unwrap(), ms);
        }
    }
}
