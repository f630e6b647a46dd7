//! Descriptive outputs per cluster: hourly activity shares over the week and
//! demographic cross-tabulations.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use chrono::{Datelike, Duration, Timelike};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Gender, PersonProfile};
use crate::series::{Activity, CategorizedSeries};

/// Weekday-hour cells in a week.
pub const WEEK_CELLS: usize = 7 * 24;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("cluster has no members")]
    EmptyCluster,
    #[error("members mix granularities {0} and {1}")]
    MixedGranularity(u32, u32),
    #[error("{labels} labels for {items} items")]
    LengthMismatch { labels: usize, items: usize },
}

/// Code counts and shares per (weekday, hour) cell, Monday = 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShareTable {
    /// `counts[cell][code]`
    pub counts: Vec<[u64; 4]>,
}

impl ShareTable {
    pub fn cell(weekday: usize, hour: usize) -> usize {
        weekday * 24 + hour
    }

    pub fn total(&self, cell: usize) -> u64 {
        self.counts[cell].iter().sum()
    }

    /// Shares for one cell, or `None` when no bin falls in it.
    pub fn shares(&self, cell: usize) -> Option<[f64; 4]> {
        let total = self.total(cell);
        (total > 0).then(|| self.counts[cell].map(|c| c as f64 / total as f64))
    }
}

/// Share of each code among all member bins whose start falls in each
/// (weekday, hour) cell.
pub fn activity_shares(members: &[&CategorizedSeries]) -> Result<ShareTable, ReportError> {
    let first = members.first().ok_or(ReportError::EmptyCluster)?;
    if let Some(other) = members.iter().find(|s| s.granularity != first.granularity) {
        return Err(ReportError::MixedGranularity(first.granularity, other.granularity));
    }
    let partial: Vec<Vec<[u64; 4]>> = members
        .par_iter()
        .map(|s| {
            let mut counts = vec![[0u64; 4]; WEEK_CELLS];
            for (i, &code) in s.values.iter().enumerate() {
                let t = s.start + Duration::minutes(i as i64 * s.granularity as i64);
                let cell = ShareTable::cell(t.weekday().num_days_from_monday() as usize, t.hour() as usize);
                counts[cell][code as usize] += 1;
            }
            counts
        })
        .collect();
    let mut counts = vec![[0u64; 4]; WEEK_CELLS];
    for p in partial {
        for (acc, c) in counts.iter_mut().zip(p) {
            for k in 0..4 {
                acc[k] += c[k];
            }
        }
    }
    Ok(ShareTable { counts })
}

/// `cluster,weekday,hour,code,share` rows; cells without bins are omitted.
pub fn write_shares_csv<W: Write>(out: W, tables: &[ShareTable]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["cluster", "weekday", "hour", "code", "share"])?;
    for (c, table) in tables.iter().enumerate() {
        for cell in 0..WEEK_CELLS {
            let Some(shares) = table.shares(cell) else { continue };
            for a in Activity::ALL {
                w.write_record([
                    c.to_string(),
                    (cell / 24).to_string(),
                    (cell % 24).to_string(),
                    a.code().to_string(),
                    format!("{:.6}", shares[a.code() as usize]),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Whether the work share among waking-hour bins (07:00-23:00) exceeds `threshold`.
pub fn employment_proxy(series: &CategorizedSeries, threshold: f64) -> bool {
    let (mut waking, mut work) = (0usize, 0usize);
    for (i, &code) in series.values.iter().enumerate() {
        let hour = series.bin_start(i).hour();
        if (7..23).contains(&hour) {
            waking += 1;
            if code == Activity::Work.code() {
                work += 1;
            }
        }
    }
    waking > 0 && work as f64 / waking as f64 > threshold
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RowKind {
    /// Percentage of members with a known value.
    Percent,
    /// Members with no known value (count).
    Unknown,
    Mean,
    StdDev,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemographicRow {
    pub variable: String,
    pub level: String,
    pub kind: RowKind,
    /// One value per cluster, then the overall column.
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemographicsTable {
    pub sizes: Vec<usize>,
    pub rows: Vec<DemographicRow>,
}

impl DemographicsTable {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["variable".to_string(), "level".to_string()];
        header.extend((0..self.sizes.len()).map(|c| format!("cluster_{c}")));
        header.push("overall".into());
        w.write_record(&header)?;
        let mut size_row = vec!["size".to_string(), "n".to_string()];
        size_row.extend(self.sizes.iter().map(|s| s.to_string()));
        size_row.push(self.sizes.iter().sum::<usize>().to_string());
        w.write_record(&size_row)?;
        for row in &self.rows {
            let mut rec = vec![row.variable.clone(), row.level.clone()];
            rec.extend(row.values.iter().map(|v| v.map(|x| format!("{x:.4}")).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A categorical attribute of one person; `None` means unknown.
type Extract<'a> = Box<dyn Fn(usize) -> Option<String> + Sync + 'a>;

fn categorical_rows(
    variable: &str,
    extract: &Extract<'_>,
    groups: &[Vec<usize>],
    levels: Option<Vec<String>>,
) -> Vec<DemographicRow> {
    let values: Vec<Vec<Option<String>>> = groups.iter().map(|g| g.iter().map(|&i| extract(i)).collect()).collect();
    let levels = levels
        .unwrap_or_else(|| values.iter().flatten().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect());
    let mut rows: Vec<DemographicRow> = levels
        .iter()
        .map(|level| DemographicRow {
            variable: variable.into(),
            level: level.clone(),
            kind: RowKind::Percent,
            values: values
                .iter()
                .map(|vs| {
                    let known = vs.iter().flatten().count();
                    (known > 0)
                        .then(|| 100.0 * vs.iter().flatten().filter(|v| *v == level).count() as f64 / known as f64)
                })
                .collect(),
        })
        .collect();
    rows.push(DemographicRow {
        variable: variable.into(),
        level: "unknown".into(),
        kind: RowKind::Unknown,
        values: values.iter().map(|vs| Some(vs.iter().filter(|v| v.is_none()).count() as f64)).collect(),
    });
    rows
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

/// Per-cluster breakdown of gender, age group, employment proxy and brand
/// (percent of members with a known value, unknowns counted separately),
/// plus ARPU mean and sample standard deviation. The last column covers
/// everyone.
pub fn demographics_table(
    labels: &[usize],
    series: &[CategorizedSeries],
    profiles: &[PersonProfile],
    employment_threshold: f64,
) -> Result<DemographicsTable, ReportError> {
    if labels.len() != series.len() {
        return Err(ReportError::LengthMismatch { labels: labels.len(), items: series.len() });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    let sizes = groups.iter().map(Vec::len).collect();
    groups.push((0..labels.len()).collect());

    let by_pid: HashMap<&str, &PersonProfile> = profiles.iter().map(|p| (p.pid.as_str(), p)).collect();
    let profile = |i: usize| by_pid.get(series[i].pid.as_str()).copied();
    let non_empty = |s: &str| (!s.is_empty()).then(|| s.to_string());

    let gender: Extract = Box::new(|i| match profile(i)?.gender {
        Gender::Unknown => None,
        g => Some(g.label().to_string()),
    });
    let age: Extract = Box::new(|i| non_empty(&profile(i)?.age_group));
    let employed: Extract = Box::new(|i| {
        Some(if employment_proxy(&series[i], employment_threshold) { "employed" } else { "not employed" }.to_string())
    });
    let brand: Extract = Box::new(|i| non_empty(&profile(i)?.brand));

    let mut rows = Vec::new();
    rows.extend(categorical_rows(
        "gender",
        &gender,
        &groups,
        Some(vec![Gender::Male.label().into(), Gender::Female.label().into()]),
    ));
    rows.extend(categorical_rows("age", &age, &groups, None));
    rows.extend(categorical_rows(
        "employment",
        &employed,
        &groups,
        Some(vec!["employed".into(), "not employed".into()]),
    ));
    rows.extend(categorical_rows("brand", &brand, &groups, None));

    let arpu: Vec<(Option<f64>, Option<f64>, usize)> = groups
        .iter()
        .map(|g| {
            let xs: Vec<f64> = g.iter().filter_map(|&i| profile(i).and_then(|p| p.arpu)).collect();
            let (m, s) = mean_std(&xs);
            (m, s, g.len() - xs.len())
        })
        .collect();
    rows.push(DemographicRow {
        variable: "arpu".into(),
        level: "mean".into(),
        kind: RowKind::Mean,
        values: arpu.iter().map(|a| a.0).collect(),
    });
    rows.push(DemographicRow {
        variable: "arpu".into(),
        level: "std".into(),
        kind: RowKind::StdDev,
        values: arpu.iter().map(|a| a.1).collect(),
    });
    rows.push(DemographicRow {
        variable: "arpu".into(),
        level: "unknown".into(),
        kind: RowKind::Unknown,
        values: arpu.iter().map(|a| Some(a.2 as f64)).collect(),
    });
    Ok(DemographicsTable { sizes, rows })
}
