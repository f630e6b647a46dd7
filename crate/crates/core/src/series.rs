//! Categorized activity series, the common currency of every stage.

use std::fmt;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Analysis activity code. The numeric values are the ones every downstream
/// formula operates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Activity {
    Other = 0,
    Home = 1,
    Work = 2,
    Trip = 3,
}

impl Activity {
    pub const ALL: [Activity; 4] = [Activity::Other, Activity::Home, Activity::Work, Activity::Trip];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Activity> {
        match code {
            0 => Some(Activity::Other),
            1 => Some(Activity::Home),
            2 => Some(Activity::Work),
            3 => Some(Activity::Trip),
            _ => None,
        }
    }

    /// Tie-break rank used when resampling: larger wins.
    pub(crate) fn priority(code: u8) -> u8 {
        match code {
            3 => 3,
            2 => 2,
            1 => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for Activity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Activity::Other => "other",
            Activity::Home => "home",
            Activity::Work => "work",
            Activity::Trip => "trip",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SeriesError {
    #[error("resample factor {factor} does not divide series length {len}")]
    BadFactor { factor: usize, len: usize },
    #[error("invalid activity code {0}")]
    BadCode(u8),
}

/// One person's fixed-granularity activity sequence over the analysis window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorizedSeries {
    pub pid: String,
    pub start: NaiveDateTime,
    /// Bin length in minutes.
    pub granularity: u32,
    pub values: Vec<u8>,
    /// Fraction of bins directly observed rather than gap-filled.
    pub coverage: f64,
}

impl CategorizedSeries {
    pub fn new(
        pid: impl Into<String>,
        start: NaiveDateTime,
        granularity: u32,
        values: Vec<u8>,
        coverage: f64,
    ) -> Result<Self, SeriesError> {
        if let Some(&bad) = values.iter().find(|&&v| v > 3) {
            return Err(SeriesError::BadCode(bad));
        }
        Ok(CategorizedSeries { pid: pid.into(), start, granularity, values, coverage: coverage.clamp(0.0, 1.0) })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Start timestamp of bin `i`.
    pub fn bin_start(&self, i: usize) -> NaiveDateTime {
        self.start + Duration::minutes(i as i64 * self.granularity as i64)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// 0/1 indicator series for one code.
    pub fn indicator(&self, code: u8) -> Vec<f64> {
        self.values.iter().map(|&v| if v == code { 1.0 } else { 0.0 }).collect()
    }
}

/// Coarsen a series by `factor`: each output bin takes the majority code of
/// its input span, ties going to trip > work > home > other.
pub fn resample(series: &CategorizedSeries, factor: usize) -> Result<CategorizedSeries, SeriesError> {
    let len = series.values.len();
    if factor == 0 || len % factor != 0 {
        return Err(SeriesError::BadFactor { factor, len });
    }
    if factor == 1 {
        return Ok(series.clone());
    }
    let values = series.values.chunks(factor).map(majority_code).collect();
    Ok(CategorizedSeries {
        pid: series.pid.clone(),
        start: series.start,
        granularity: series.granularity * factor as u32,
        values,
        coverage: series.coverage,
    })
}

fn majority_code(span: &[u8]) -> u8 {
    let mut counts = [0usize; 256];
    for &v in span {
        counts[v as usize] += 1;
    }
    let mut best = span[0];
    for &v in span {
        let (cv, cb) = (counts[v as usize], counts[best as usize]);
        if cv > cb || (cv == cb && Activity::priority(v) > Activity::priority(best)) {
            best = v;
        }
    }
    best
}
