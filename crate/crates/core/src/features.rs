//! Per-person topological features: Walsh spectrum, sublevel persistence of
//! its profile, and landscapes sampled on one grid shared by the dataset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{DistanceMatrix, MatrixError};
use crate::series::{Activity, CategorizedSeries};
use crate::topology::{
    landscape, spectrum_profile, sublevel_persistence, vector_distance, LandscapeGrid, PersistenceDiagram,
    PersistenceLandscape, TopologyError,
};
use crate::walsh::{fwft_padded, WalshError, WalshSpectrum};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("no series given")]
    Empty,
    #[error("series {pid} has length {len}, expected {expected}")]
    LengthMismatch { pid: String, len: usize, expected: usize },
    #[error(transparent)]
    Walsh(#[from] WalshError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WalshMode {
    /// Transform the activity codes themselves.
    #[default]
    Integer,
    /// One spectrum per activity indicator, features concatenated.
    OneHot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeConfig {
    pub k_levels: usize,
    pub grid_size: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig { k_levels: 5, grid_size: 64 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopoFeatures {
    pub ids: Vec<String>,
    /// Per person, one spectrum per channel (one channel in integer mode).
    pub spectra: Vec<Vec<WalshSpectrum>>,
    pub diagrams: Vec<Vec<PersistenceDiagram>>,
    pub landscapes: Vec<Vec<PersistenceLandscape>>,
    pub grid: LandscapeGrid,
    /// Concatenated landscape vectors.
    pub vectors: Vec<Vec<f64>>,
}

fn channels(series: &CategorizedSeries, mode: WalshMode) -> Vec<Vec<f64>> {
    match mode {
        WalshMode::Integer => vec![series.as_f64()],
        WalshMode::OneHot => Activity::ALL.iter().map(|a| series.indicator(a.code())).collect(),
    }
}

/// Two passes: diagrams for everyone, then landscapes on the grid spanning
/// all of them.
pub fn topological_features(
    series: &[CategorizedSeries],
    mode: WalshMode,
    config: &LandscapeConfig,
) -> Result<TopoFeatures, FeatureError> {
    let expected = series.first().ok_or(FeatureError::Empty)?.len();
    if let Some(bad) = series.iter().find(|s| s.len() != expected) {
        return Err(FeatureError::LengthMismatch { pid: bad.pid.clone(), len: bad.len(), expected });
    }
    let per_person: Vec<(Vec<WalshSpectrum>, Vec<PersistenceDiagram>)> = series
        .par_iter()
        .map(|s| -> Result<_, FeatureError> {
            let mut spectra = Vec::new();
            let mut diagrams = Vec::new();
            for values in channels(s, mode) {
                let spectrum = fwft_padded(&values)?;
                let profile = spectrum_profile(&spectrum);
                // a length-1 series has an empty profile; treat it as flat zero
                let profile = if profile.is_empty() { vec![0.0] } else { profile };
                diagrams.push(sublevel_persistence(&profile)?);
                spectra.push(spectrum);
            }
            Ok((spectra, diagrams))
        })
        .collect::<Result<_, _>>()?;
    let (spectra, diagrams): (Vec<_>, Vec<_>) = per_person.into_iter().unzip();
    let grid = LandscapeGrid::spanning(diagrams.iter().flatten(), config.grid_size)?;
    let landscapes: Vec<Vec<PersistenceLandscape>> = diagrams
        .par_iter()
        .map(|ds| ds.iter().map(|d| landscape(d, config.k_levels, &grid)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<_, _>>()?;
    let vectors = landscapes.iter().map(|ls| ls.iter().flat_map(|l| l.values.iter().copied()).collect()).collect();
    Ok(TopoFeatures {
        ids: series.iter().map(|s| s.pid.clone()).collect(),
        spectra,
        diagrams,
        landscapes,
        grid,
        vectors,
    })
}

/// Pairwise discretized L2 landscape distances.
pub fn topological_distance_matrix(features: &TopoFeatures) -> Result<DistanceMatrix, FeatureError> {
    let n = features.vectors.len();
    let step = features.grid.step();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| ((i + 1)..n).map(|j| vector_distance(&features.vectors[i], &features.vectors[j], step)).collect())
        .collect();
    let mut data = vec![0.0; n * n];
    for (i, row) in rows.into_iter().enumerate() {
        for (off, d) in row.into_iter().enumerate() {
            let j = i + 1 + off;
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix::new(features.ids.clone(), data)?)
}
