//! Synthetic populations drawn from schedule archetypes, with known labels.

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{unmap_ptype, ActivityRecord, Gender, PersonProfile, Window};
use crate::series::{Activity, CategorizedSeries};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("no archetypes given")]
    NoSpecs,
    #[error("archetype {name}: {reason}")]
    BadSpec { name: String, reason: String },
    #[error("granularity {0} must divide a day")]
    BadGranularity(u32),
    #[error("population needs at least one day")]
    NoDays,
}

/// `[start_h, end_h)` hours of the day spent on `code`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub start_h: f64,
    pub end_h: f64,
    pub code: u8,
}

const fn b(start_h: f64, end_h: f64, code: u8) -> Block {
    Block { start_h, end_h, code }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchetypeSpec {
    pub name: String,
    pub weekday: Vec<Block>,
    pub weekend: Vec<Block>,
    /// Standard deviation of the daily schedule shift, in minutes.
    pub jitter_minutes: f64,
    /// Per-bin probability of replacing the code with a different one.
    pub flip_prob: f64,
    /// Trip inserted at every change between two stay activities.
    pub trip_minutes: u32,
}

const HOME: u8 = Activity::Home as u8;
const WORK: u8 = Activity::Work as u8;
const OTHER: u8 = Activity::Other as u8;

impl ArchetypeSpec {
    fn new(name: &str, weekday: Vec<Block>, weekend: Vec<Block>) -> Self {
        ArchetypeSpec { name: name.into(), weekday, weekend, jitter_minutes: 15.0, flip_prob: 0.05, trip_minutes: 30 }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |reason: String| SynthError::BadSpec { name: self.name.clone(), reason };
        for (label, blocks) in [("weekday", &self.weekday), ("weekend", &self.weekend)] {
            let (Some(first), Some(last)) = (blocks.first(), blocks.last()) else {
                return Err(bad(format!("{label} template is empty")));
            };
            if first.start_h != 0.0 || last.end_h != 24.0 {
                return Err(bad(format!("{label} template must span 0h to 24h")));
            }
            for pair in blocks.windows(2) {
                if pair[0].end_h != pair[1].start_h {
                    return Err(bad(format!("{label} blocks leave a gap or overlap at {}h", pair[0].end_h)));
                }
            }
            if let Some(blk) = blocks.iter().find(|blk| blk.end_h <= blk.start_h || blk.code > 3) {
                return Err(bad(format!("{label} block {}h-{}h is invalid", blk.start_h, blk.end_h)));
            }
        }
        if !(0.0..0.5).contains(&self.flip_prob) {
            return Err(bad(format!("flip_prob {} outside [0, 0.5)", self.flip_prob)));
        }
        if !(self.jitter_minutes >= 0.0 && self.jitter_minutes.is_finite()) {
            return Err(bad(format!("jitter_minutes {} is invalid", self.jitter_minutes)));
        }
        Ok(())
    }
}

/// Five stylized patterns: multitasking, work-dominant, balanced, reverse
/// rhythm and home-dominant. Everyone is home overnight.
pub fn default_archetypes() -> Vec<ArchetypeSpec> {
    vec![
        ArchetypeSpec::new(
            "multitasking",
            vec![
                b(0.0, 7.0, HOME),
                b(7.0, 12.0, WORK),
                b(12.0, 13.5, OTHER),
                b(13.5, 17.0, WORK),
                b(17.0, 20.0, OTHER),
                b(20.0, 24.0, HOME),
            ],
            vec![
                b(0.0, 9.0, HOME),
                b(9.0, 12.0, OTHER),
                b(12.0, 14.0, HOME),
                b(14.0, 18.0, OTHER),
                b(18.0, 24.0, HOME),
            ],
        ),
        ArchetypeSpec::new(
            "work-dominant",
            vec![b(0.0, 7.0, HOME), b(7.0, 21.0, WORK), b(21.0, 24.0, HOME)],
            vec![b(0.0, 8.0, HOME), b(8.0, 18.0, WORK), b(18.0, 24.0, HOME)],
        ),
        ArchetypeSpec::new(
            "balanced",
            vec![b(0.0, 8.0, HOME), b(8.0, 17.0, WORK), b(17.0, 24.0, HOME)],
            vec![b(0.0, 10.0, HOME), b(10.0, 16.0, OTHER), b(16.0, 24.0, HOME)],
        ),
        ArchetypeSpec::new(
            "reverse rhythm",
            vec![b(0.0, 10.0, HOME), b(10.0, 12.0, OTHER), b(12.0, 24.0, HOME)],
            vec![b(0.0, 8.0, HOME), b(8.0, 20.0, WORK), b(20.0, 24.0, HOME)],
        ),
        ArchetypeSpec::new(
            "home-dominant",
            vec![b(0.0, 15.0, HOME), b(15.0, 16.5, OTHER), b(16.5, 24.0, HOME)],
            vec![b(0.0, 24.0, HOME)],
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub per_spec: usize,
    pub days: u32,
    pub granularity: u32,
    pub seed: u64,
    /// First day of the window; the default is a Monday.
    pub start: NaiveDate,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            per_spec: 40,
            days: 7,
            granularity: 10,
            seed: 0,
            start: NaiveDate::from_ymd_opt(2019, 8, 5).expect("valid date"),
        }
    }
}

impl PopulationConfig {
    pub fn window(&self) -> Window {
        Window { start: self.start.and_hms_opt(0, 0, 0).expect("midnight"), days: self.days }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub series: Vec<CategorizedSeries>,
    /// Archetype index per series.
    pub labels: Vec<usize>,
    pub window: Window,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for person `index` under `seed`.
pub fn person_seed(seed: u64, index: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ index as u64)
}

pub fn person_id(index: usize) -> String {
    format!("P{index:05}")
}

fn is_weekend(day: NaiveDate) -> bool {
    matches!(day.weekday(), Weekday::Sat | Weekday::Sun)
}

/// Code at minute-of-day `m` for a template shifted by `shift` minutes.
/// Boundaries move; the day's first and last blocks stretch to absorb it.
fn code_at(blocks: &[Block], trip_minutes: f64, shift: f64, m: f64) -> u8 {
    let bounds: Vec<f64> = blocks.iter().skip(1).map(|blk| (blk.start_h * 60.0 + shift).clamp(0.0, 1440.0)).collect();
    let idx = bounds.iter().take_while(|&&t| t <= m).count();
    if idx > 0 {
        let prev = blocks[idx - 1].code;
        let cur = blocks[idx].code;
        let since = m - bounds[idx - 1];
        if prev != cur && prev != Activity::Trip as u8 && cur != Activity::Trip as u8 && since < trip_minutes {
            return Activity::Trip as u8;
        }
    }
    blocks[idx].code
}

fn generate_person(spec: &ArchetypeSpec, config: &PopulationConfig, index: usize) -> CategorizedSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(person_seed(config.seed, index));
    let g = config.granularity;
    let per_day = (1440 / g) as usize;
    let jitter = Normal::new(0.0, spec.jitter_minutes).expect("validated jitter");
    let mut values = Vec::with_capacity(per_day * config.days as usize);
    for d in 0..config.days {
        let day = config.start + Duration::days(d as i64);
        let blocks = if is_weekend(day) { &spec.weekend } else { &spec.weekday };
        let shift = jitter.sample(&mut rng);
        for i in 0..per_day {
            let mid = (i as f64 + 0.5) * g as f64;
            let mut code = code_at(blocks, spec.trip_minutes as f64, shift, mid);
            if rng.random::<f64>() < spec.flip_prob {
                let other: u8 = rng.random_range(0..3);
                code = if other >= code { other + 1 } else { other };
            }
            values.push(code);
        }
    }
    let start = config.window().start;
    CategorizedSeries::new(person_id(index), start, g, values, 1.0).expect("codes are in range")
}

/// `per_spec` persons per archetype, labelled by archetype index, pids in
/// generation order.
pub fn generate_population(specs: &[ArchetypeSpec], config: &PopulationConfig) -> Result<Population, SynthError> {
    if specs.is_empty() {
        return Err(SynthError::NoSpecs);
    }
    if config.granularity == 0 || 1440 % config.granularity != 0 {
        return Err(SynthError::BadGranularity(config.granularity));
    }
    if config.days == 0 {
        return Err(SynthError::NoDays);
    }
    specs.iter().try_for_each(ArchetypeSpec::validate)?;
    let labels: Vec<usize> = (0..specs.len()).flat_map(|s| std::iter::repeat_n(s, config.per_spec)).collect();
    let series = labels.par_iter().enumerate().map(|(i, &s)| generate_person(&specs[s], config, i)).collect();
    Ok(Population { series, labels, window: config.window() })
}

/// Mean share of each code over a series, indexed by code.
pub fn activity_share_vector(series: &CategorizedSeries) -> [f64; 4] {
    let mut counts = [0.0; 4];
    series.values.iter().for_each(|&v| counts[v as usize] += 1.0);
    let n = series.len().max(1) as f64;
    counts.map(|c| c / n)
}

const CENTER: (f64, f64) = (114.06, 22.55);
const KM_PER_DEG_LAT: f64 = 111.195;

fn offset(origin: (f64, f64), km: f64, bearing: f64) -> (f64, f64) {
    let dlat = km * bearing.cos() / KM_PER_DEG_LAT;
    let dlon = km * bearing.sin() / (KM_PER_DEG_LAT * origin.1.to_radians().cos());
    (origin.0 + dlon, origin.1 + dlat)
}

/// Raw activity records equivalent to the population's series: one record
/// per run of equal codes, split at midnight, with plausible coordinates
/// (work 5-15 km from home, other places within 5 km).
pub fn to_records(population: &Population, seed: u64) -> Vec<ActivityRecord> {
    population
        .series
        .par_iter()
        .enumerate()
        .flat_map_iter(|(index, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(person_seed(seed ^ 0x5EED_0F_C0DE, index));
            let home = offset(CENTER, rng.random_range(0.0..3.0), rng.random_range(0.0..std::f64::consts::TAU));
            let work = offset(home, rng.random_range(5.0..15.0), rng.random_range(0.0..std::f64::consts::TAU));
            let other = offset(home, rng.random_range(1.0..5.0), rng.random_range(0.0..std::f64::consts::TAU));
            let place = |code: u8| match code {
                1 => home,
                2 => work,
                0 => other,
                _ => ((home.0 + work.0) / 2.0, (home.1 + work.1) / 2.0),
            };
            let per_day = (1440 / s.granularity) as usize;
            let mut out = Vec::new();
            let mut i = 0;
            while i < s.len() {
                let day_end = (i / per_day + 1) * per_day;
                let code = s.values[i];
                let mut j = i + 1;
                while j < day_end && s.values[j] == code {
                    j += 1;
                }
                let (t_start, t_end): (NaiveDateTime, NaiveDateTime) = (s.bin_start(i), s.bin_start(j));
                let (lon, lat) = place(code);
                out.push(ActivityRecord {
                    pid: s.pid.clone(),
                    date: t_start.date(),
                    t_start,
                    t_end,
                    longitude: lon,
                    latitude: lat,
                    ptype: unmap_ptype(Activity::from_code(code).expect("valid code")),
                });
                i = j;
            }
            out
        })
        .collect()
}

/// Placeholder demographics, independent of the archetype.
pub fn placeholder_profiles(population: &Population, seed: u64) -> Vec<PersonProfile> {
    let brands = ["A", "B", "C"];
    population
        .series
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(person_seed(seed ^ 0xD3_40_6A, index));
            let gender = if rng.random_bool(0.5) { Gender::Male } else { Gender::Female };
            PersonProfile {
                pid: s.pid.clone(),
                age_group: rng.random_range(2..8u8).to_string(),
                gender,
                arpu: Some((rng.random_range(20.0..200.0f64) * 100.0).round() / 100.0),
                brand: brands[rng.random_range(0..brands.len())].to_string(),
            }
        })
        .collect()
}
