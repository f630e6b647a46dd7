//! Declarative run configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{CakConfig, RefineMode};
use crate::eval::HarnessConfig;
use crate::features::{LandscapeConfig, WalshMode};
use crate::geometry::GeometryConfig;
use crate::ingest::{CleaningConfig, Window};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot read manifest: {0}")]
    Manifest(String),
    #[error("input file {0} does not exist")]
    MissingPath(PathBuf),
    #[error("{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, reason: reason.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub activities: PathBuf,
    pub profiles: Option<PathBuf>,
    /// Optional `pid,label` reference partition, scored with ARI.
    pub truth: Option<PathBuf>,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig { activities: PathBuf::from("activities.csv"), profiles: None, truth: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub start: NaiveDate,
    pub days: u32,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { start: NaiveDate::from_ymd_opt(2019, 8, 5).expect("valid date"), days: 28 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalshConfig {
    pub mode: WalshMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_min: usize,
    pub k_max: usize,
    /// MDS dimensions used as vector features in matrix mode.
    pub embed_dims: usize,
    pub harness: HarnessConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k_min: 1, k_max: 10, embed_dims: 10, harness: HarnessConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Work share of waking-hour bins above which a person counts as employed.
    pub employment_threshold: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { employment_threshold: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Diagnostics {
    pub spectra: bool,
    pub diagrams: bool,
    pub landscapes: bool,
    pub matrices: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputConfig,
    pub window: WindowConfig,
    /// Bin length in minutes.
    pub granularity: u32,
    /// Coarsening before sequence alignment; `None` means hourly.
    pub resample_factor: Option<usize>,
    pub cleaning: CleaningConfig,
    pub walsh: WalshConfig,
    pub landscape: LandscapeConfig,
    pub geometry: GeometryConfig,
    /// Weight of the topological distance when mixing with the geometric one.
    pub gamma: f64,
    /// `cluster.ap.seed` is replaced by the top-level `seed` at run time.
    pub cluster: CakConfig,
    pub eval: EvalConfig,
    pub report: ReportConfig,
    pub seed: u64,
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
    pub diagnostics: Diagnostics,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: InputConfig::default(),
            window: WindowConfig::default(),
            granularity: 1,
            resample_factor: None,
            cleaning: CleaningConfig::default(),
            walsh: WalshConfig::default(),
            landscape: LandscapeConfig::default(),
            geometry: GeometryConfig::default(),
            gamma: 0.5,
            cluster: CakConfig::default(),
            eval: EvalConfig::default(),
            report: ReportConfig::default(),
            seed: 0,
            threads: None,
            output_dir: PathBuf::from("output"),
            diagnostics: Diagnostics::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The configuration echoed in a run manifest.
    pub fn from_manifest(text: &str) -> Result<Self, ConfigError> {
        #[derive(Deserialize)]
        struct Echo {
            config: RunConfig,
        }
        serde_json::from_str::<Echo>(text).map(|e| e.config).map_err(|e| ConfigError::Manifest(e.to_string()))
    }

    /// Parse a TOML file (or a run manifest, by `.json` extension), resolve
    /// relative paths against the file's directory, and validate including
    /// input existence.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let is_manifest = path.extension().is_some_and(|e| e == "json");
        let mut config = if is_manifest { Self::from_manifest(&text)? } else { Self::from_toml(&text)? };
        if !is_manifest {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            config.resolve_paths(base);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.input.activities);
        if let Some(p) = self.input.profiles.as_mut() {
            fix(p);
        }
        if let Some(p) = self.input.truth.as_mut() {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn window(&self) -> Window {
        Window { start: self.window.start.and_hms_opt(0, 0, 0).expect("midnight"), days: self.window.days }
    }

    pub fn series_len(&self) -> usize {
        (self.window.days as usize * 1440) / self.granularity.max(1) as usize
    }

    /// Configured factor, else whatever turns bins into hours (1 if the bin
    /// length does not divide an hour).
    pub fn effective_resample_factor(&self) -> usize {
        self.resample_factor.unwrap_or_else(|| {
            let g = self.granularity.max(1);
            if 60 % g == 0 {
                (60 / g) as usize
            } else {
                1
            }
        })
    }

    /// Numeric and structural checks, without touching the filesystem.
    pub fn validate_values(&self) -> Result<(), ConfigError> {
        let g = self.granularity;
        if g == 0 || 1440 % g != 0 {
            return Err(invalid("granularity", format!("{g} must be a positive divisor of 1440 minutes")));
        }
        if self.window.days == 0 {
            return Err(invalid("window.days", "must be at least 1"));
        }
        let factor = self.effective_resample_factor();
        if factor == 0 || self.series_len() % factor != 0 {
            return Err(invalid(
                "resample_factor",
                format!("{factor} does not divide the series length {}", self.series_len()),
            ));
        }
        let c = &self.cleaning;
        if !(c.max_speed_kmh > 0.0) {
            return Err(invalid("cleaning.max_speed_kmh", "must be positive"));
        }
        if !(0.0..=1.0).contains(&c.home_night_share) {
            return Err(invalid("cleaning.home_night_share", "must lie in [0, 1]"));
        }
        if !(c.anchor_radius_km >= 0.0) {
            return Err(invalid("cleaning.anchor_radius_km", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&c.min_coverage) {
            return Err(invalid("cleaning.min_coverage", "must lie in [0, 1]"));
        }
        if self.landscape.k_levels == 0 {
            return Err(invalid("landscape.k_levels", "must be at least 1"));
        }
        if self.landscape.grid_size < 2 {
            return Err(invalid("landscape.grid_size", "must be at least 2"));
        }
        self.geometry.validate().map_err(|e| invalid("geometry", e.to_string()))?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid("gamma", "must lie in [0, 1]"));
        }
        let ap = &self.cluster.ap;
        if !(0.5..1.0).contains(&ap.damping) {
            return Err(invalid("cluster.ap.damping", "must lie in [0.5, 1)"));
        }
        if ap.max_iter == 0 || ap.convergence_window == 0 {
            return Err(invalid("cluster.ap", "max_iter and convergence_window must be positive"));
        }
        if self.cluster.min_size == Some(0) {
            return Err(invalid("cluster.min_size", "must be at least 1"));
        }
        if self.cluster.max_iter == 0 {
            return Err(invalid("cluster.max_iter", "must be positive"));
        }
        let e = &self.eval;
        if e.k_min == 0 || e.k_max < e.k_min {
            return Err(invalid("eval", "need 1 <= k_min <= k_max"));
        }
        if e.embed_dims == 0 {
            return Err(invalid("eval.embed_dims", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.report.employment_threshold) {
            return Err(invalid("report.employment_threshold", "must lie in [0, 1]"));
        }
        if self.threads == Some(0) {
            return Err(invalid("threads", "must be at least 1"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_values()?;
        let mut inputs = vec![&self.input.activities];
        inputs.extend(self.input.profiles.iter());
        inputs.extend(self.input.truth.iter());
        if let Some(missing) = inputs.into_iter().find(|p| !p.is_file()) {
            return Err(ConfigError::MissingPath(missing.clone()));
        }
        Ok(())
    }

    pub fn refine_mode(&self) -> RefineMode {
        self.cluster.mode
    }
}
