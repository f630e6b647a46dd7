//! Parsing, cleaning and binning of segmented stay/trip records.
//!
//! Input files carry the operator's category codebook (`0` home, `1` travel,
//! `2` work or study, `3` other). Everything downstream of this module uses
//! the analysis codebook of [`Activity`], so [`remap_ptype`] is applied at the
//! boundary when series are built.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;

use chrono::{Duration, NaiveDate, NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series::{Activity, CategorizedSeries};

pub const ACTIVITY_COLUMNS: [&str; 7] = ["pid", "date", "t_start", "t_end", "longitude", "latitude", "ptype"];
pub const PROFILE_COLUMNS: [&str; 5] = ["pid", "age", "gender", "arpu", "brand"];

const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M";
const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Raw travel code in the input codebook.
const RAW_TRAVEL: u8 = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("raw activity code {0} outside 0..=3")]
    BadPtype(u8),
    #[error("analysis activity code {0} outside 0..=3")]
    BadCode(u8),
    #[error("empty person: no records for `{0}` inside the window")]
    EmptyPerson(String),
    #[error("window of {minutes} minutes is not a multiple of the {granularity}-minute granularity")]
    Misaligned { minutes: i64, granularity: u32 },
    #[error("granularity must be positive")]
    ZeroGranularity,
}

/// A malformed data row; kept so callers can report rather than lose it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct Parsed<T> {
    pub rows: Vec<T>,
    pub errors: Vec<RowError>,
}

/// One segmented stay or trip as delivered in `activities.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivityRecord {
    pub pid: String,
    pub date: NaiveDate,
    pub t_start: NaiveDateTime,
    pub t_end: NaiveDateTime,
    pub longitude: f64,
    pub latitude: f64,
    /// Raw category code, input codebook.
    pub ptype: u8,
}

impl ActivityRecord {
    pub fn is_trip(&self) -> bool {
        self.ptype == RAW_TRAVEL
    }

    pub fn minutes(&self) -> i64 {
        (self.t_end - self.t_start).num_minutes()
    }

    fn dedup_key(&self) -> (String, NaiveDate, NaiveDateTime, NaiveDateTime, u64, u64, u8) {
        (
            self.pid.clone(),
            self.date,
            self.t_start,
            self.t_end,
            self.longitude.to_bits(),
            self.latitude.to_bits(),
            self.ptype,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl Gender {
    pub fn parse(code: &str) -> Option<Gender> {
        match code.trim() {
            "01" | "1" => Some(Gender::Male),
            "02" | "2" => Some(Gender::Female),
            "03" | "3" | "" => Some(Gender::Unknown),
            _ => None,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Gender::Male => "01",
            Gender::Female => "02",
            Gender::Unknown => "03",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Unknown => "unknown",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonProfile {
    pub pid: String,
    /// Operator age-band code, e.g. `5` for ages 19-24.
    pub age_group: String,
    pub gender: Gender,
    pub arpu: Option<f64>,
    pub brand: String,
}

/// Map an input-file category code to the analysis codebook.
pub fn remap_ptype(raw: u8) -> Result<Activity, IngestError> {
    match raw {
        0 => Ok(Activity::Home),
        1 => Ok(Activity::Trip),
        2 => Ok(Activity::Work),
        3 => Ok(Activity::Other),
        _ => Err(IngestError::BadPtype(raw)),
    }
}

/// Inverse of [`remap_ptype`].
pub fn unmap_ptype(activity: Activity) -> u8 {
    match activity {
        Activity::Home => 0,
        Activity::Trip => 1,
        Activity::Work => 2,
        Activity::Other => 3,
    }
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .ok()
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

fn column_indices(headers: &csv::StringRecord, wanted: &[&str]) -> Result<Vec<usize>, IngestError> {
    wanted
        .iter()
        .map(|&name| {
            headers.iter().position(|h| h.trim() == name).ok_or_else(|| IngestError::MissingColumn(name.to_string()))
        })
        .collect()
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes())
}

/// Parse `activities.csv` content. Malformed rows are returned in
/// [`Parsed::errors`] with their line numbers.
pub fn parse_activity_records(text: &str) -> Result<Parsed<ActivityRecord>, IngestError> {
    let mut rdr = reader(text);
    let idx = column_indices(rdr.headers()?, &ACTIVITY_COLUMNS)?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for result in rdr.records() {
        let record = match result {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                errors.push(RowError { line, message: e.to_string() });
                continue;
            }
        };
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        match activity_from_row(&record, &idx) {
            Ok(r) => rows.push(r),
            Err(message) => errors.push(RowError { line, message }),
        }
    }
    Ok(Parsed { rows, errors })
}

fn activity_from_row(record: &csv::StringRecord, idx: &[usize]) -> Result<ActivityRecord, String> {
    let field = |i: usize| record.get(idx[i]).ok_or_else(|| format!("missing field `{}`", ACTIVITY_COLUMNS[i]));
    let pid = field(0)?.to_string();
    if pid.is_empty() {
        return Err("empty pid".into());
    }
    let date = NaiveDate::parse_from_str(field(1)?, "%Y-%m-%d").map_err(|e| format!("bad date: {e}"))?;
    let t_start = parse_timestamp(field(2)?).ok_or_else(|| format!("bad t_start `{}`", field(2).unwrap_or("")))?;
    let t_end = parse_timestamp(field(3)?).ok_or_else(|| format!("bad t_end `{}`", field(3).unwrap_or("")))?;
    let longitude: f64 = field(4)?.parse().map_err(|e| format!("bad longitude: {e}"))?;
    let latitude: f64 = field(5)?.parse().map_err(|e| format!("bad latitude: {e}"))?;
    let ptype: u8 = field(6)?.parse().map_err(|e| format!("bad ptype: {e}"))?;
    if t_start >= t_end {
        return Err(format!("t_start {t_start} is not before t_end {t_end}"));
    }
    if !(-180.0..=180.0).contains(&longitude) {
        return Err(format!("longitude {longitude} out of range"));
    }
    if !(-90.0..=90.0).contains(&latitude) {
        return Err(format!("latitude {latitude} out of range"));
    }
    if ptype > 3 {
        return Err(format!("ptype {ptype} out of range"));
    }
    Ok(ActivityRecord { pid, date, t_start, t_end, longitude, latitude, ptype })
}

/// Parse `profiles.csv` content. Duplicate pids are row errors.
pub fn parse_profiles(text: &str) -> Result<Parsed<PersonProfile>, IngestError> {
    let mut rdr = reader(text);
    let idx = column_indices(rdr.headers()?, &PROFILE_COLUMNS)?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for result in rdr.records() {
        let record = match result {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                errors.push(RowError { line, message: e.to_string() });
                continue;
            }
        };
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let parsed = profile_from_row(&record, &idx).and_then(|p| {
            if seen.insert(p.pid.clone()) {
                Ok(p)
            } else {
                Err(format!("duplicate pid `{}`", p.pid))
            }
        });
        match parsed {
            Ok(p) => rows.push(p),
            Err(message) => errors.push(RowError { line, message }),
        }
    }
    Ok(Parsed { rows, errors })
}

fn profile_from_row(record: &csv::StringRecord, idx: &[usize]) -> Result<PersonProfile, String> {
    let field = |i: usize| record.get(idx[i]).unwrap_or("");
    let pid = field(0).to_string();
    if pid.is_empty() {
        return Err("empty pid".into());
    }
    let gender = Gender::parse(field(2)).ok_or_else(|| format!("bad gender code `{}`", field(2)))?;
    let arpu = match field(3) {
        "" => None,
        s => {
            let v: f64 = s.parse().map_err(|e| format!("bad arpu: {e}"))?;
            if !(v >= 0.0) {
                return Err(format!("negative arpu {v}"));
            }
            Some(v)
        }
    };
    Ok(PersonProfile { pid, age_group: field(1).to_string(), gender, arpu, brand: field(4).to_string() })
}

pub fn write_activity_csv<W: Write>(out: W, records: &[ActivityRecord]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ACTIVITY_COLUMNS)?;
    for r in records {
        w.write_record([
            r.pid.clone(),
            r.date.format("%Y-%m-%d").to_string(),
            format_timestamp(r.t_start),
            format_timestamp(r.t_end),
            format!("{:.6}", r.longitude),
            format!("{:.6}", r.latitude),
            r.ptype.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_profile_csv<W: Write>(out: W, profiles: &[PersonProfile]) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PROFILE_COLUMNS)?;
    for p in profiles {
        w.write_record([
            p.pid.clone(),
            p.age_group.clone(),
            p.gender.code().to_string(),
            p.arpu.map(|a| format!("{a:.2}")).unwrap_or_default(),
            p.brand.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Great-circle distance in kilometres.
pub fn haversine_km(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = (lat2 - lat1).to_radians();
    let dlambda = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningConfig {
    pub max_speed_kmh: f64,
    pub min_days: usize,
    pub home_night_share: f64,
    /// Night locations closer than this count as the same place.
    pub anchor_radius_km: f64,
    /// Applied after binning; persons below it are dropped.
    pub min_coverage: f64,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        CleaningConfig {
            max_speed_kmh: 150.0,
            min_days: 20,
            home_night_share: 0.6,
            anchor_radius_km: 0.5,
            min_coverage: 0.8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub input_records: usize,
    pub input_users: usize,
    pub duplicates: usize,
    pub overlapping_stays: usize,
    pub speed_trips: usize,
    pub few_days_users: usize,
    pub no_anchor_users: usize,
    pub low_coverage_users: usize,
    pub profiles_without_records: usize,
    pub retained_records: usize,
    pub retained_users: usize,
}

impl CleaningReport {
    pub fn dropped_users(&self) -> usize {
        self.few_days_users + self.no_anchor_users + self.low_coverage_users
    }

    /// Move `n` users from retained to the low-coverage bucket.
    pub fn record_low_coverage(&mut self, n: usize) {
        let n = n.min(self.retained_users);
        self.low_coverage_users += n;
        self.retained_users -= n;
    }
}

#[derive(Clone, Debug)]
pub struct Cleaned {
    pub records: Vec<ActivityRecord>,
    pub profiles: Vec<PersonProfile>,
    pub report: CleaningReport,
}

/// Apply the cleaning rules in order: exact duplicates, overlapping stays,
/// speed-implausible trips, too few observed days, missing night anchor.
/// Output records are sorted by pid then start time.
pub fn clean(records: &[ActivityRecord], profiles: &[PersonProfile], config: &CleaningConfig) -> Cleaned {
    let mut report = CleaningReport { input_records: records.len(), ..Default::default() };

    let mut seen = HashSet::new();
    let mut by_pid: BTreeMap<String, Vec<ActivityRecord>> = BTreeMap::new();
    for r in records {
        if seen.insert(r.dedup_key()) {
            by_pid.entry(r.pid.clone()).or_default().push(r.clone());
        } else {
            report.duplicates += 1;
        }
    }
    report.input_users = by_pid.len();
    let input_pids: HashSet<String> = by_pid.keys().cloned().collect();

    let mut kept = Vec::new();
    let mut kept_pids = BTreeSet::new();
    for (pid, mut recs) in by_pid {
        recs.sort_by(|a, b| (a.t_start, a.t_end, a.ptype).cmp(&(b.t_start, b.t_end, b.ptype)));
        let (trips, stays): (Vec<_>, Vec<_>) = recs.into_iter().partition(|r| r.is_trip());

        let stays = resolve_overlaps(stays, &mut report.overlapping_stays);
        let trips = drop_fast_trips(&stays, trips, config.max_speed_kmh, &mut report.speed_trips);

        let days: BTreeSet<NaiveDate> = stays.iter().chain(trips.iter()).map(|r| r.date).collect();
        if days.len() < config.min_days {
            report.few_days_users += 1;
            continue;
        }
        if !has_night_anchor(&stays, config) {
            report.no_anchor_users += 1;
            continue;
        }

        let mut recs: Vec<_> = stays.into_iter().chain(trips).collect();
        recs.sort_by(|a, b| (a.t_start, a.t_end, a.ptype).cmp(&(b.t_start, b.t_end, b.ptype)));
        kept_pids.insert(pid);
        kept.extend(recs);
    }

    report.retained_users = kept_pids.len();
    report.retained_records = kept.len();
    let mut kept_profiles = Vec::new();
    for p in profiles {
        if kept_pids.contains(&p.pid) {
            kept_profiles.push(p.clone());
        } else if !input_pids.contains(&p.pid) {
            report.profiles_without_records += 1;
        }
    }
    kept_profiles.sort_by(|a, b| a.pid.cmp(&b.pid));
    Cleaned { records: kept, profiles: kept_profiles, report }
}

/// Stays are sorted by start. Of two overlapping stays the longer survives,
/// the earlier one on equal length.
fn resolve_overlaps(stays: Vec<ActivityRecord>, dropped: &mut usize) -> Vec<ActivityRecord> {
    let mut out: Vec<ActivityRecord> = Vec::with_capacity(stays.len());
    for s in stays {
        match out.last_mut() {
            Some(last) if s.t_start < last.t_end => {
                *dropped += 1;
                if s.minutes() > last.minutes() {
                    *last = s;
                }
            }
            _ => out.push(s),
        }
    }
    out
}

fn drop_fast_trips(
    stays: &[ActivityRecord],
    trips: Vec<ActivityRecord>,
    max_speed_kmh: f64,
    dropped: &mut usize,
) -> Vec<ActivityRecord> {
    let mut windows = Vec::new();
    for pair in stays.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let km = haversine_km(a.longitude, a.latitude, b.longitude, b.latitude);
        let hours = (b.t_start - a.t_end).num_seconds() as f64 / 3600.0;
        let speed = if hours > 0.0 {
            km / hours
        } else if km > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if speed > max_speed_kmh {
            windows.push((a.t_end, b.t_start));
        }
    }
    trips
        .into_iter()
        .filter(|t| {
            let bad = windows.iter().any(|&(from, to)| t.t_start >= from && t.t_end <= to);
            if bad {
                *dropped += 1;
            }
            !bad
        })
        .collect()
}

/// A night is a date whose 00:00-06:00 span overlaps at least one stay; its
/// location is the stay covering most of that span.
fn has_night_anchor(stays: &[ActivityRecord], config: &CleaningConfig) -> bool {
    if config.home_night_share <= 0.0 {
        return true;
    }
    let dates: BTreeSet<NaiveDate> = stays
        .iter()
        .flat_map(|s| {
            let first = s.t_start.date();
            let last = s.t_end.date();
            first.iter_days().take_while(move |d| *d <= last)
        })
        .collect();
    let six = NaiveTime::from_hms_opt(6, 0, 0).unwrap();
    let mut nights: Vec<(f64, f64)> = Vec::new();
    for d in dates {
        let from = d.and_time(NaiveTime::MIN);
        let to = d.and_time(six);
        let best = stays
            .iter()
            .map(|s| {
                let overlap = (s.t_end.min(to) - s.t_start.max(from)).num_seconds();
                (overlap, s)
            })
            .filter(|(o, _)| *o > 0)
            .fold(None::<(i64, &ActivityRecord)>, |acc, (o, s)| match acc {
                Some((bo, _)) if bo >= o => acc,
                _ => Some((o, s)),
            });
        if let Some((_, s)) = best {
            nights.push((s.longitude, s.latitude));
        }
    }
    if nights.is_empty() {
        return false;
    }
    let best = nights
        .iter()
        .map(|&(lon, lat)| {
            nights.iter().filter(|&&(lon2, lat2)| haversine_km(lon, lat, lon2, lat2) <= config.anchor_radius_km).count()
        })
        .max()
        .unwrap_or(0);
    best as f64 / nights.len() as f64 >= config.home_night_share
}

/// Analysis window: `days` whole days from `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: NaiveDateTime,
    pub days: u32,
}

impl Window {
    pub fn minutes(&self) -> i64 {
        self.days as i64 * 24 * 60
    }

    pub fn end(&self) -> NaiveDateTime {
        self.start + Duration::minutes(self.minutes())
    }

    pub fn bins(&self, granularity: u32) -> Result<usize, IngestError> {
        if granularity == 0 {
            return Err(IngestError::ZeroGranularity);
        }
        let minutes = self.minutes();
        if minutes % granularity as i64 != 0 {
            return Err(IngestError::Misaligned { minutes, granularity });
        }
        Ok((minutes / granularity as i64) as usize)
    }
}

/// Bin one person's records. A bin takes the code of the record covering its
/// midpoint (later-starting records win); uncovered bins carry the preceding
/// observation forward, and leading uncovered bins take the first observed code.
pub fn build_series(
    pid: &str,
    records: &[ActivityRecord],
    window: &Window,
    granularity: u32,
) -> Result<CategorizedSeries, IngestError> {
    let n = window.bins(granularity)?;
    let mut ordered: Vec<&ActivityRecord> =
        records.iter().filter(|r| r.pid == pid && r.t_end > window.start && r.t_start < window.end()).collect();
    if ordered.is_empty() {
        return Err(IngestError::EmptyPerson(pid.to_string()));
    }
    ordered.sort_by_key(|r| (r.t_start, r.t_end));

    let bin_secs = granularity as i64 * 60;
    let half = bin_secs / 2;
    // first bin whose midpoint is at or after `secs` (seconds from window start)
    let first_bin_at_or_after = |secs: i64| -> i64 {
        let x = secs - half;
        if x <= 0 {
            0
        } else {
            (x + bin_secs - 1) / bin_secs
        }
    };

    let mut values: Vec<Option<u8>> = vec![None; n];
    for r in ordered {
        let code = remap_ptype(r.ptype)?.code();
        let s = (r.t_start - window.start).num_seconds();
        let e = (r.t_end - window.start).num_seconds();
        let lo = first_bin_at_or_after(s).clamp(0, n as i64) as usize;
        let hi = first_bin_at_or_after(e).clamp(0, n as i64) as usize;
        for v in &mut values[lo..hi] {
            *v = Some(code);
        }
    }

    let observed = values.iter().filter(|v| v.is_some()).count();
    let Some(first) = values.iter().flatten().next().copied() else {
        return Err(IngestError::EmptyPerson(pid.to_string()));
    };
    let mut carry = first;
    let filled = values
        .into_iter()
        .map(|v| {
            if let Some(code) = v {
                carry = code;
            }
            carry
        })
        .collect();
    let coverage = observed as f64 / n as f64;
    CategorizedSeries::new(pid, window.start, granularity, filled, coverage).map_err(|e| match e {
        crate::series::SeriesError::BadCode(c) => IngestError::BadCode(c),
        crate::series::SeriesError::BadFactor { .. } => unreachable!("no resampling here"),
    })
}

/// Bin every pid present in `records`, ordered by pid.
pub fn build_all_series(
    records: &[ActivityRecord],
    window: &Window,
    granularity: u32,
) -> Vec<(String, Result<CategorizedSeries, IngestError>)> {
    use rayon::prelude::*;
    let mut by_pid: BTreeMap<&str, Vec<ActivityRecord>> = BTreeMap::new();
    for r in records {
        by_pid.entry(r.pid.as_str()).or_default().push(r.clone());
    }
    let groups: Vec<_> = by_pid.into_iter().collect();
    groups.into_par_iter().map(|(pid, recs)| (pid.to_string(), build_series(pid, &recs, window, granularity))).collect()
}
