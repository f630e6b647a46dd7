//! Local (geometric) similarity of activity sequences.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{DistanceMatrix, MatrixError};
use crate::series::{resample, CategorizedSeries, SeriesError};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("indel penalty must be positive, got {0}")]
    BadIndel(f64),
    #[error("agenda parameter must be non-negative, got {0}")]
    BadAgenda(f64),
    #[error("weights must be non-negative with a positive sum, got ({0}, {1})")]
    BadWeights(f64, f64),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    /// Insertion/deletion penalty `d`. Substitution costs 1 between distinct codes.
    pub indel: f64,
    /// Agenda parameter `Y`; `None` uses the compared sequence length.
    pub agenda: Option<f64>,
    pub w1: f64,
    pub w2: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { indel: 1.0, agenda: None, w1: 0.5, w2: 0.5 }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.indel > 0.0) {
            return Err(GeometryError::BadIndel(self.indel));
        }
        if let Some(y) = self.agenda {
            if !(y >= 0.0) {
                return Err(GeometryError::BadAgenda(y));
            }
        }
        if !(self.w1 >= 0.0 && self.w2 >= 0.0 && self.w1 + self.w2 > 0.0) {
            return Err(GeometryError::BadWeights(self.w1, self.w2));
        }
        Ok(())
    }

    fn agenda_for(&self, x: &[u8], y: &[u8]) -> f64 {
        self.agenda.unwrap_or_else(|| x.len().max(y.len()) as f64)
    }
}

/// Needleman-Wunsch edit distance with indel cost `indel` and 0/1 substitution.
pub fn edit_distance(x: &[u8], y: &[u8], indel: f64) -> f64 {
    let mut prev: Vec<f64> = (0..=y.len()).map(|j| j as f64 * indel).collect();
    let mut cur = vec![0.0; y.len() + 1];
    for (i, &a) in x.iter().enumerate() {
        cur[0] = (i + 1) as f64 * indel;
        for (j, &b) in y.iter().enumerate() {
            let sub = prev[j] + if a == b { 0.0 } else { 1.0 };
            let del = prev[j + 1] + indel;
            let ins = cur[j] + indel;
            cur[j + 1] = sub.min(del).min(ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[y.len()]
}

#[derive(Clone, Copy, Default, PartialEq, Eq)]
struct CodeSet([u64; 4]);

impl CodeSet {
    fn of(codes: &[u8]) -> Self {
        let mut s = CodeSet::default();
        for &c in codes {
            s.0[(c >> 6) as usize] |= 1 << (c & 63);
        }
        s
    }

    fn intersection_len(&self, other: &Self) -> u32 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a & b).count_ones()).sum()
    }

    fn union_len(&self, other: &Self) -> u32 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a | b).count_ones()).sum()
    }
}

/// `Y * (1 - |A n B| / |A u B|)` over the sets of codes present. Two empty
/// sequences count as identical agendas.
pub fn agenda_dissimilarity(x: &[u8], y: &[u8], agenda: f64) -> f64 {
    let (a, b) = (CodeSet::of(x), CodeSet::of(y));
    let union = a.union_len(&b);
    if union == 0 {
        return 0.0;
    }
    agenda * (1.0 - a.intersection_len(&b) as f64 / union as f64)
}

/// `w1 * edit + w2 * agenda`.
pub fn combined_distance(x: &[u8], y: &[u8], config: &GeometryConfig) -> f64 {
    let mut total = 0.0;
    if config.w1 != 0.0 {
        total += config.w1 * edit_distance(x, y, config.indel);
    }
    if config.w2 != 0.0 {
        total += config.w2 * agenda_dissimilarity(x, y, config.agenda_for(x, y));
    }
    total
}

/// Pairwise combined distances after resampling every series by `factor`.
pub fn geometric_distance_matrix(
    series: &[CategorizedSeries],
    config: &GeometryConfig,
    factor: usize,
) -> Result<DistanceMatrix, GeometryError> {
    config.validate()?;
    if let Some(first) = series.first() {
        if let Some(bad) = series.iter().find(|s| s.len() != first.len()) {
            return Err(GeometryError::LengthMismatch(first.len(), bad.len()));
        }
    }
    let coarse = series.iter().map(|s| resample(s, factor).map(|r| r.values)).collect::<Result<Vec<_>, _>>()?;
    let n = coarse.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| ((i + 1)..n).map(|j| combined_distance(&coarse[i], &coarse[j], config)).collect())
        .collect();
    let mut data = vec![0.0; n * n];
    for (i, row) in rows.into_iter().enumerate() {
        for (off, d) in row.into_iter().enumerate() {
            let j = i + 1 + off;
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    let ids = series.iter().map(|s| s.pid.clone()).collect();
    Ok(DistanceMatrix::new(ids, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    /// Minimum edit-script cost by plain recursion.
    fn exhaustive(x: &[u8], y: &[u8], d: f64) -> f64 {
        match (x.split_first(), y.split_first()) {
            (None, _) => y.len() as f64 * d,
            (_, None) => x.len() as f64 * d,
            (Some((a, xr)), Some((b, yr))) => {
                let sub = exhaustive(xr, yr, d) + if a == b { 0.0 } else { 1.0 };
                let del = exhaustive(xr, y, d) + d;
                let ins = exhaustive(x, yr, d) + d;
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn edit_examples() {
        assert_eq!(edit_distance(&[1, 2, 1, 2], &[1, 2, 1, 2], 1.0), 0.0);
        assert_eq!(exhaustive(&[1, 2], &[2, 1], 1.0), 2.0);
        assert_eq!(edit_distance(&[1, 2], &[2, 1], 1.0), 2.0);
        assert_eq!(edit_distance(&[1, 2, 3], &[], 1.0), 3.0);
        assert_eq!(edit_distance(&[], &[], 1.0), 0.0);
        assert_eq!(edit_distance(&[1, 2, 3], &[], 2.5), 7.5);
        // large indel makes substitution the only sensible move
        assert_eq!(edit_distance(&[1, 2], &[2, 1], 5.0), 2.0);
    }

    #[test]
    fn agenda_examples() {
        assert_eq!(agenda_dissimilarity(&[1, 1, 2, 2], &[2, 2, 1, 1], 16.0), 0.0);
        assert_eq!(agenda_dissimilarity(&[1, 1], &[2], 16.0), 16.0);
        assert!((agenda_dissimilarity(&[1, 2], &[1, 3], 16.0) - 32.0 / 3.0).abs() < 1e-12);
        assert_eq!(agenda_dissimilarity(&[], &[], 16.0), 0.0);
        assert_eq!(agenda_dissimilarity(&[200, 7], &[7], 2.0), 1.0);
    }

    #[test]
    fn combined_degenerate_weights() {
        let (x, y) = ([1u8, 1, 2, 2, 0], [1u8, 2, 2, 3]);
        let only_edit = GeometryConfig { w1: 1.0, w2: 0.0, ..Default::default() };
        assert_eq!(combined_distance(&x, &y, &only_edit), edit_distance(&x, &y, 1.0));
        let only_agenda = GeometryConfig { w1: 0.0, w2: 1.0, agenda: Some(16.0), ..Default::default() };
        assert_eq!(combined_distance(&x, &y, &only_agenda), agenda_dissimilarity(&x, &y, 16.0));
        let both = GeometryConfig { w1: 0.3, w2: 0.7, agenda: Some(16.0), ..Default::default() };
        assert_eq!(combined_distance(&x, &x, &both), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(GeometryConfig::default().validate().is_ok());
        assert_eq!(GeometryConfig { indel: 0.0, ..Default::default() }.validate(), Err(GeometryError::BadIndel(0.0)));
        assert!(GeometryConfig { w1: 0.0, w2: 0.0, ..Default::default() }.validate().is_err());
        assert!(GeometryConfig { agenda: Some(-1.0), ..Default::default() }.validate().is_err());
    }

    /// Same agenda at swapped times versus an entirely different agenda:
    /// equal edit distances, agenda terms 0 and Y.
    #[test]
    fn agenda_separates_what_alignment_cannot() {
        let x: Vec<u8> = [1u8; 8].iter().chain(&[2u8; 8]).copied().collect();
        let swapped: Vec<u8> = [2u8; 8].iter().chain(&[1u8; 8]).copied().collect();
        let novel: Vec<u8> = [0u8; 8].iter().chain(&[3u8; 8]).copied().collect();
        assert_eq!(edit_distance(&x, &swapped, 1.0), 16.0);
        assert_eq!(edit_distance(&x, &novel, 1.0), 16.0);
        assert_eq!(agenda_dissimilarity(&x, &swapped, 16.0), 0.0);
        assert_eq!(agenda_dissimilarity(&x, &novel, 16.0), 16.0);
    }

    fn series(pid: &str, values: Vec<u8>) -> CategorizedSeries {
        let start = NaiveDate::from_ymd_opt(2019, 8, 5).unwrap().and_hms_opt(0, 0, 0).unwrap();
        CategorizedSeries::new(pid, start, 10, values, 1.0).unwrap()
    }

    #[test]
    fn identical_series_give_zero_matrix() {
        let s: Vec<_> = (0..4).map(|i| series(&format!("p{i}"), vec![1, 1, 2, 2, 3, 0])).collect();
        let m = geometric_distance_matrix(&s, &GeometryConfig::default(), 2).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matrix_matches_pairwise_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s: Vec<_> =
            (0..5).map(|i| series(&format!("p{i}"), (0..24).map(|_| rng.random_range(0..4)).collect())).collect();
        let config = GeometryConfig::default();
        let m = geometric_distance_matrix(&s, &config, 3).unwrap();
        for i in 0..5 {
            assert_eq!(m.get(i, i), 0.0);
            for j in 0..5 {
                let a = resample(&s[i], 3).unwrap().values;
                let b = resample(&s[j], 3).unwrap().values;
                let y = a.len() as f64;
                let expect = 0.5 * edit_distance(&a, &b, 1.0) + 0.5 * agenda_dissimilarity(&a, &b, y);
                assert_eq!(m.get(i, j), expect);
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
        assert_eq!(m.ids()[4], "p4");
    }

    #[test]
    fn matrix_rejects_bad_factor_and_lengths() {
        let s = vec![series("a", vec![1; 6]), series("b", vec![1; 6])];
        assert!(matches!(geometric_distance_matrix(&s, &GeometryConfig::default(), 4), Err(GeometryError::Series(_))));
        let s = vec![series("a", vec![1; 6]), series("b", vec![1; 4])];
        assert_eq!(
            geometric_distance_matrix(&s, &GeometryConfig::default(), 2).unwrap_err(),
            GeometryError::LengthMismatch(6, 4)
        );
    }

    fn seq(max: usize) -> impl Strategy<Value = Vec<u8>> {
        proptest::collection::vec(0u8..4, 0..=max)
    }

    proptest! {
        #[test]
        fn dp_equals_exhaustive(x in seq(6), y in seq(6)) {
            prop_assert_eq!(edit_distance(&x, &y, 1.0), exhaustive(&x, &y, 1.0));
        }

        #[test]
        fn bounded_by_hamming(pair in (0usize..16).prop_flat_map(|n| (
            proptest::collection::vec(0u8..4, n), proptest::collection::vec(0u8..4, n)))
        ) {
            let (x, y) = pair;
            let hamming = x.iter().zip(&y).filter(|(a, b)| a != b).count() as f64;
            let d = edit_distance(&x, &y, 1.0);
            prop_assert!(d <= hamming && hamming <= x.len() as f64);
        }

        #[test]
        fn agenda_range_and_linearity(x in seq(10), y in seq(10), agenda in 0.0f64..50.0) {
            let m = agenda_dissimilarity(&x, &y, agenda);
            prop_assert!((0.0..=agenda).contains(&m));
            prop_assert!((agenda_dissimilarity(&x, &y, 2.0 * agenda) - 2.0 * m).abs() < 1e-9);
            let same = CodeSet::of(&x) == CodeSet::of(&y);
            prop_assert_eq!(agenda_dissimilarity(&x, &y, 1.0) == 0.0, same);
        }
    }
}
