//! Stage orchestration and on-disk artifacts.
//!
//! Every stage reads what earlier stages left in the output directory, so the
//! CLI subcommands can run them one at a time. [`run_pipeline`] chains them
//! and always leaves a `manifest.json`, marking the failing stage if any.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{cak_cluster, combine_matrices, representative, CakOutcome, ClusterError, Merge, RefineMode};
use crate::config::{ConfigError, RunConfig};
use crate::eval::{
    adjusted_rand_index, ch_score, classical_mds, comparison_harness, kmeans_scan, select_k, silhouette, EvalError,
    HarnessConfig, HarnessTable, ScanPoint, Selection,
};
use crate::features::{topological_distance_matrix, topological_features, FeatureError, TopoFeatures};
use crate::geometry::{geometric_distance_matrix, GeometryError};
use crate::ingest::{
    build_all_series, clean, format_timestamp, parse_activity_records, parse_profiles, parse_timestamp,
    write_profile_csv, CleaningReport, IngestError, PersonProfile,
};
use crate::matrix::{DistanceMatrix, MatrixError};
use crate::report::{activity_shares, demographics_table, write_shares_csv, ReportError};
use crate::series::{CategorizedSeries, SeriesError};

pub const SERIES_FILE: &str = "series.csv";
pub const CLEANING_FILE: &str = "cleaning_report.json";
pub const PROFILES_FILE: &str = "profiles_clean.csv";
pub const ASSIGNMENTS_FILE: &str = "assignments.csv";
pub const CLUSTER_FILE: &str = "cluster.json";
pub const REPRESENTATIVES_FILE: &str = "representatives.csv";
pub const VALIDITY_FILE: &str = "validity.json";
pub const MDS_FILE: &str = "mds.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const SHARES_FILE: &str = "shares.csv";
pub const DEMOGRAPHICS_FILE: &str = "demographics.csv";
pub const CLUSTER_PROFILES_FILE: &str = "cluster_profiles.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    /// Walsh spectra, persistence diagrams and landscapes.
    Features,
    Geometry,
    Cluster,
    Eval,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Ingest => "ingest",
            Stage::Features => "features",
            Stage::Geometry => "geometry",
            Stage::Cluster => "cluster",
            Stage::Eval => "eval",
            Stage::Report => "report",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path} line {line}: {message}")]
    Malformed { path: PathBuf, line: u64, message: String },
    #[error("required artifact {0} is missing; run the earlier stage first")]
    MissingArtifact(PathBuf),
    #[error("no persons left after cleaning")]
    NoPersons,
    #[error("clustering needs at least 2 persons, got {0}")]
    TooFewPersons(usize),
    #[error("could not build thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Report(#[from] ReportError),
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<StageError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError { stage, source: e.into() })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StageError + '_ {
    move |source| StageError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> StageError + '_ {
    move |source| StageError::Csv { path: path.to_path_buf(), source }
}

fn read_text(path: &Path) -> Result<String, StageError> {
    if !path.exists() {
        return Err(StageError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        });
    }
    fs::read_to_string(path).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, StageError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StageError> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)
        .map_err(|source| StageError::Json { path: path.to_path_buf(), source })?;
    out.write_all(b"\n").and_then(|_| out.flush()).map_err(io_err(path))
}

fn require(path: PathBuf) -> Result<PathBuf, StageError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(StageError::MissingArtifact(path))
    }
}

/// `pid,start,granularity,coverage,values` with values as a digit string.
pub fn write_series_csv<W: Write>(out: W, series: &[CategorizedSeries]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pid", "start", "granularity", "coverage", "values"])?;
    for s in series {
        let values: String = s.values.iter().map(|&v| char::from(b'0' + v)).collect();
        w.write_record([
            s.pid.clone(),
            format_timestamp(s.start),
            s.granularity.to_string(),
            s.coverage.to_string(),
            values,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series_csv(path: &Path) -> Result<Vec<CategorizedSeries>, StageError> {
    let text = read_text(path)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = i as u64 + 2;
        let bad = |message: &str| StageError::Malformed { path: path.to_path_buf(), line, message: message.into() };
        if rec.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let start = parse_timestamp(&rec[1]).ok_or_else(|| bad("bad start timestamp"))?;
        let granularity: u32 = rec[2].parse().map_err(|_| bad("bad granularity"))?;
        let coverage: f64 = rec[3].parse().map_err(|_| bad("bad coverage"))?;
        let values = rec[4]
            .bytes()
            .map(|b| b.checked_sub(b'0').filter(|&v| v <= 3))
            .collect::<Option<Vec<u8>>>()
            .ok_or_else(|| bad("values must be digits 0-3"))?;
        out.push(CategorizedSeries::new(&rec[0], start, granularity, values, coverage)?);
    }
    Ok(out)
}

fn write_assignments(path: &Path, pids: &[String], labels: &[usize]) -> Result<(), StageError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["pid", "cluster"]).map_err(csv_err(path))?;
    for (pid, l) in pids.iter().zip(labels) {
        w.write_record([pid.as_str(), &l.to_string()]).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads `pid,cluster` pairs in file order.
pub fn read_assignments(path: &Path) -> Result<Vec<(String, usize)>, StageError> {
    let text = read_text(path)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(csv_err(path))?;
            let label = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| StageError::Malformed {
                path: path.to_path_buf(),
                line: i as u64 + 2,
                message: "bad cluster id".into(),
            })?;
            Ok((rec[0].to_string(), label))
        })
        .collect()
}

/// `pid,label` reference partition; labels are arbitrary strings.
pub fn read_truth(path: &Path) -> Result<HashMap<String, String>, StageError> {
    let text = read_text(path)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        if rec.len() >= 2 {
            out.insert(rec[0].to_string(), rec[1].to_string());
        }
    }
    Ok(out)
}

fn write_matrix(path: &Path, d: &DistanceMatrix) -> Result<(), StageError> {
    let mut out = create(path)?;
    d.write_csv(&mut out).and_then(|_| out.flush()).map_err(io_err(path))
}

#[derive(Clone, Debug)]
pub struct IngestOutput {
    pub series: Vec<CategorizedSeries>,
    pub profiles: Vec<PersonProfile>,
    pub report: CleaningReport,
}

#[derive(Serialize)]
struct CleaningArtifact<'a> {
    #[serde(flatten)]
    report: &'a CleaningReport,
    malformed_activity_rows: usize,
    malformed_profile_rows: usize,
    series_errors: Vec<String>,
}

/// Parse, clean and bin the raw inputs; writes `series.csv`,
/// `cleaning_report.json` and `profiles_clean.csv`.
pub fn ingest_stage(config: &RunConfig, out_dir: &Path) -> Result<IngestOutput, StageError> {
    let activities = parse_activity_records(&read_text(&config.input.activities)?)?;
    let profiles = match &config.input.profiles {
        Some(p) => Some(parse_profiles(&read_text(p)?)?),
        None => None,
    };
    let profile_errors = profiles.as_ref().map_or(0, |p| p.errors.len());
    let cleaned = clean(&activities.rows, profiles.as_ref().map_or(&[][..], |p| &p.rows[..]), &config.cleaning);
    let mut report = cleaned.report;
    let window = config.window();
    let mut series = Vec::new();
    let mut series_errors = Vec::new();
    let mut dropped = 0;
    for (pid, built) in build_all_series(&cleaned.records, &window, config.granularity) {
        match built {
            Ok(s) if s.coverage >= config.cleaning.min_coverage => series.push(s),
            Ok(_) => dropped += 1,
            Err(IngestError::EmptyPerson(_)) => {
                dropped += 1;
                series_errors.push(format!("{pid}: no records inside the window"));
            }
            Err(e) => return Err(e.into()),
        }
    }
    report.record_low_coverage(dropped);
    let kept: HashSet<&str> = series.iter().map(|s| s.pid.as_str()).collect();
    let profiles: Vec<PersonProfile> = cleaned.profiles.into_iter().filter(|p| kept.contains(p.pid.as_str())).collect();

    let path = out_dir.join(SERIES_FILE);
    let mut out = create(&path)?;
    write_series_csv(&mut out, &series).map_err(csv_err(&path))?;
    out.flush().map_err(io_err(&path))?;

    let path = out_dir.join(PROFILES_FILE);
    let mut out = create(&path)?;
    write_profile_csv(&mut out, &profiles)?;
    out.flush().map_err(io_err(&path))?;

    write_json(
        &out_dir.join(CLEANING_FILE),
        &CleaningArtifact {
            report: &report,
            malformed_activity_rows: activities.errors.len(),
            malformed_profile_rows: profile_errors,
            series_errors,
        },
    )?;
    if series.is_empty() {
        return Err(StageError::NoPersons);
    }
    Ok(IngestOutput { series, profiles, report })
}

/// Walsh spectra, persistence diagrams and landscapes plus the topological
/// distance matrix.
pub fn features_stage(
    config: &RunConfig,
    series: &[CategorizedSeries],
    out_dir: &Path,
) -> Result<(TopoFeatures, DistanceMatrix), StageError> {
    let features = topological_features(series, config.walsh.mode, &config.landscape)?;
    let d = topological_distance_matrix(&features)?;
    let diag = out_dir.join("diagnostics");
    if config.diagnostics.spectra {
        let path = diag.join("spectra.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        w.write_record(["pid", "channel", "sequency", "coefficient"]).map_err(csv_err(&path))?;
        for (pid, spectra) in features.ids.iter().zip(&features.spectra) {
            for (c, s) in spectra.iter().enumerate() {
                for (m, v) in s.coefficients.iter().enumerate() {
                    w.write_record([pid.clone(), c.to_string(), m.to_string(), v.to_string()])
                        .map_err(csv_err(&path))?;
                }
            }
        }
        w.flush().map_err(io_err(&path))?;
    }
    if config.diagnostics.diagrams {
        let path = diag.join("diagrams.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        w.write_record(["pid", "channel", "birth", "death", "essential"]).map_err(csv_err(&path))?;
        for (pid, diagrams) in features.ids.iter().zip(&features.diagrams) {
            for (c, dgm) in diagrams.iter().enumerate() {
                for p in &dgm.pairs {
                    w.write_record([
                        pid.clone(),
                        c.to_string(),
                        p.birth.to_string(),
                        p.death.to_string(),
                        p.essential.to_string(),
                    ])
                    .map_err(csv_err(&path))?;
                }
            }
        }
        w.flush().map_err(io_err(&path))?;
    }
    if config.diagnostics.landscapes {
        let path = diag.join("landscapes.csv");
        let mut w = csv::Writer::from_writer(create(&path)?);
        for (pid, v) in features.ids.iter().zip(&features.vectors) {
            let mut rec = vec![pid.clone()];
            rec.extend(v.iter().map(|x| x.to_string()));
            w.write_record(&rec).map_err(csv_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
    }
    if config.diagnostics.matrices {
        write_matrix(&diag.join("topological_distance.csv"), &d)?;
    }
    Ok((features, d))
}

pub fn geometry_stage(
    config: &RunConfig,
    series: &[CategorizedSeries],
    out_dir: &Path,
) -> Result<DistanceMatrix, StageError> {
    let d = geometric_distance_matrix(series, &config.geometry, config.effective_resample_factor())?;
    if config.diagnostics.matrices {
        write_matrix(&out_dir.join("diagnostics").join("geometric_distance.csv"), &d)?;
    }
    Ok(d)
}

/// The clustering configuration actually used: the run seed drives AP.
pub fn effective_cak(config: &RunConfig) -> crate::cluster::CakConfig {
    let mut cak = config.cluster.clone();
    cak.ap.seed = config.seed;
    cak
}

#[derive(Clone, Debug)]
pub struct ClusterOutput {
    pub pids: Vec<String>,
    pub combined: DistanceMatrix,
    pub outcome: CakOutcome,
    /// Representative item per final cluster.
    pub representatives: Vec<usize>,
}

#[derive(Serialize)]
struct ClusterArtifact<'a> {
    k: usize,
    sizes: &'a [usize],
    min_size: usize,
    representatives: Vec<&'a str>,
    /// Cluster ids before merging.
    merge_log: &'a [Merge],
    ap_exemplars: Vec<&'a str>,
}

/// Combine the two distances and run CAK; writes `assignments.csv`,
/// `cluster.json` and `representatives.csv`.
pub fn cluster_stage(
    config: &RunConfig,
    series: &[CategorizedSeries],
    topo: &TopoFeatures,
    topo_d: &DistanceMatrix,
    geo_d: &DistanceMatrix,
    out_dir: &Path,
) -> Result<ClusterOutput, StageError> {
    if series.len() < 2 {
        return Err(StageError::TooFewPersons(series.len()));
    }
    let combined = combine_matrices(topo_d, geo_d, config.gamma)?;
    if config.diagnostics.matrices {
        write_matrix(&out_dir.join("diagnostics").join("combined_distance.csv"), &combined)?;
    }
    let features = (config.cluster.mode == RefineMode::Vector).then_some(&topo.vectors[..]);
    let outcome = cak_cluster(features, &combined, &effective_cak(config))?;
    let result = &outcome.result;
    let representatives = (0..result.k).map(|c| representative(result, &combined, c)).collect::<Result<Vec<_>, _>>()?;
    let pids: Vec<String> = series.iter().map(|s| s.pid.clone()).collect();

    write_assignments(&out_dir.join(ASSIGNMENTS_FILE), &pids, &result.labels)?;
    write_json(
        &out_dir.join(CLUSTER_FILE),
        &ClusterArtifact {
            k: result.k,
            sizes: &result.sizes,
            min_size: outcome.min_size,
            representatives: representatives.iter().map(|&i| pids[i].as_str()).collect(),
            merge_log: &result.merge_log,
            ap_exemplars: outcome.ap.exemplars.iter().map(|&i| pids[i].as_str()).collect(),
        },
    )?;
    let path = out_dir.join(REPRESENTATIVES_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["cluster", "size", "pid", "values"]).map_err(csv_err(&path))?;
    for (c, &i) in representatives.iter().enumerate() {
        let values: String = series[i].values.iter().map(|&v| char::from(b'0' + v)).collect();
        w.write_record([c.to_string(), result.sizes[c].to_string(), pids[i].clone(), values])
            .map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(ClusterOutput { pids, combined, outcome, representatives })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CakSummary {
    pub k: usize,
    pub sizes: Vec<usize>,
    pub min_size: usize,
    pub merge_log: Vec<Merge>,
    pub ap_clusters: usize,
    pub ap_iterations: usize,
    pub ap_converged: bool,
    pub ap_preference: f64,
    pub refine_iterations: usize,
    pub refine_converged: bool,
    pub objective_trace: Vec<f64>,
    pub silhouette: Option<f64>,
    pub ch: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanSummary {
    pub k: usize,
    pub sse: f64,
    pub silhouette: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HarnessSummary {
    pub cak_ch: Option<f64>,
    pub kmeans_median_ch: Option<f64>,
    pub kmedoids_median_ch: Option<f64>,
    pub cak_at_least_kmeans_median: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Validity {
    pub n: usize,
    /// `mds` (embedding of the combined distance) or `landscape`.
    pub feature_space: String,
    pub cak: CakSummary,
    pub scan: Vec<ScanSummary>,
    pub selection: Selection,
    pub harness: HarnessSummary,
    pub ari_vs_truth: Option<f64>,
    pub truth_matched: Option<usize>,
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len();
    Some(if m % 2 == 1 { xs[m / 2] } else { 0.5 * (xs[m / 2 - 1] + xs[m / 2]) })
}

/// Validity curves, model selection, the baseline comparison and the 2-D
/// embedding; writes `validity.json`, `mds.csv` and `comparison.csv`.
pub fn eval_stage(
    config: &RunConfig,
    topo: &TopoFeatures,
    clustered: &ClusterOutput,
    out_dir: &Path,
) -> Result<Validity, StageError> {
    let d = &clustered.combined;
    let n = d.n();
    let (features, feature_space) = match config.cluster.mode {
        RefineMode::Matrix => (classical_mds(d, config.eval.embed_dims.min(n - 1))?, "mds"),
        RefineMode::Vector => (topo.vectors.clone(), "landscape"),
    };

    let scan: Vec<ScanPoint> =
        kmeans_scan(&features, d, config.eval.k_min, config.eval.k_max, config.cluster.max_iter)?;
    let selection = select_k(&scan);

    let harness_cfg = HarnessConfig { seed: config.seed, ..config.eval.harness.clone() };
    let table: HarnessTable = comparison_harness(&features, d, &effective_cak(config), &harness_cfg);
    let path = out_dir.join(COMPARISON_FILE);
    let mut out = create(&path)?;
    table.write_csv(&mut out).map_err(csv_err(&path))?;
    out.flush().map_err(io_err(&path))?;
    let kmedoids: Vec<f64> = table.rows.iter().filter(|r| r.method == "kmedoids").filter_map(|r| r.ch).collect();
    let harness = HarnessSummary {
        cak_ch: table.cak_ch(),
        kmeans_median_ch: table.kmeans_median_ch(),
        kmedoids_median_ch: median(kmedoids),
        cak_at_least_kmeans_median: table.cak_ch().zip(table.kmeans_median_ch()).map(|(a, b)| a >= b),
    };

    let out = &clustered.outcome;
    let labels = &out.result.labels;
    let cak = CakSummary {
        k: out.result.k,
        sizes: out.result.sizes.clone(),
        min_size: out.min_size,
        merge_log: out.result.merge_log.clone(),
        ap_clusters: out.ap.exemplars.len(),
        ap_iterations: out.ap.iterations,
        ap_converged: out.ap.converged,
        ap_preference: out.ap.preference,
        refine_iterations: out.refinement.iterations,
        refine_converged: out.refinement.converged,
        objective_trace: out.refinement.objective_trace.clone(),
        silhouette: silhouette(d, labels).ok(),
        ch: ch_score(&features, labels).ok(),
    };

    let (ari_vs_truth, truth_matched) = match &config.input.truth {
        Some(path) => {
            let truth = read_truth(path)?;
            let mut codes: BTreeMap<&str, usize> = BTreeMap::new();
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (pid, &l) in clustered.pids.iter().zip(labels) {
                if let Some(t) = truth.get(pid) {
                    let next = codes.len();
                    a.push(*codes.entry(t.as_str()).or_insert(next));
                    b.push(l);
                }
            }
            let ari = if a.is_empty() { None } else { Some(adjusted_rand_index(&a, &b)?) };
            (ari, Some(a.len()))
        }
        None => (None, None),
    };

    let coords = classical_mds(d, 2.min(n - 1))?;
    let path = out_dir.join(MDS_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["pid", "x", "y"]).map_err(csv_err(&path))?;
    for (pid, c) in clustered.pids.iter().zip(&coords) {
        let x = c.first().copied().unwrap_or(0.0);
        let y = c.get(1).copied().unwrap_or(0.0);
        w.write_record([pid.clone(), x.to_string(), y.to_string()]).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let validity = Validity {
        n,
        feature_space: feature_space.into(),
        cak,
        scan: scan.iter().map(|p| ScanSummary { k: p.k, sse: p.sse, silhouette: p.silhouette }).collect(),
        selection,
        harness,
        ari_vs_truth,
        truth_matched,
    };
    write_json(&out_dir.join(VALIDITY_FILE), &validity)?;
    Ok(validity)
}

/// Activity shares, demographics and per-cluster profile lists, built from
/// the artifacts of the ingest and cluster stages.
pub fn report_stage(config: &RunConfig, out_dir: &Path) -> Result<usize, StageError> {
    let series = read_series_csv(&require(out_dir.join(SERIES_FILE))?)?;
    let assignments = read_assignments(&require(out_dir.join(ASSIGNMENTS_FILE))?)?;
    let profiles_path = require(out_dir.join(PROFILES_FILE))?;
    let profiles = parse_profiles(&read_text(&profiles_path)?)?.rows;
    let reps_path = require(out_dir.join(REPRESENTATIVES_FILE))?;

    let by_pid: HashMap<&str, &CategorizedSeries> = series.iter().map(|s| (s.pid.as_str(), s)).collect();
    let mut members = Vec::with_capacity(assignments.len());
    let mut labels = Vec::with_capacity(assignments.len());
    for (i, (pid, l)) in assignments.iter().enumerate() {
        let s = by_pid.get(pid.as_str()).ok_or_else(|| StageError::Malformed {
            path: out_dir.join(ASSIGNMENTS_FILE),
            line: i as u64 + 2,
            message: format!("pid {pid} has no series"),
        })?;
        members.push((*s).clone());
        labels.push(*l);
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);

    use rayon::prelude::*;
    let tables = (0..k)
        .into_par_iter()
        .map(|c| {
            let group: Vec<&CategorizedSeries> =
                members.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(s, _)| s).collect();
            activity_shares(&group)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let path = out_dir.join(SHARES_FILE);
    let mut out = create(&path)?;
    write_shares_csv(&mut out, &tables).map_err(csv_err(&path))?;
    out.flush().map_err(io_err(&path))?;

    let table = demographics_table(&labels, &members, &profiles, config.report.employment_threshold)?;
    let path = out_dir.join(DEMOGRAPHICS_FILE);
    let mut out = create(&path)?;
    table.write_csv(&mut out).map_err(csv_err(&path))?;
    out.flush().map_err(io_err(&path))?;

    let text = read_text(&reps_path)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut reps: BTreeMap<usize, String> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(&reps_path))?;
        if let Ok(c) = rec[0].parse() {
            reps.insert(c, rec.get(2).unwrap_or_default().to_string());
        }
    }
    let path = out_dir.join(CLUSTER_PROFILES_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["cluster", "size", "representative"]).map_err(csv_err(&path))?;
    for c in 0..k {
        let size = labels.iter().filter(|&&l| l == c).count();
        w.write_record([c.to_string(), size.to_string(), reps.get(&c).cloned().unwrap_or_default()])
            .map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let profile_of: HashMap<&str, &PersonProfile> = profiles.iter().map(|p| (p.pid.as_str(), p)).collect();
    for c in 0..k {
        let group: Vec<PersonProfile> = members
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == c)
            .filter_map(|(s, _)| profile_of.get(s.pid.as_str()).map(|p| (*p).clone()))
            .collect();
        let path = out_dir.join("profiles").join(format!("cluster_{c}.csv"));
        let mut out = create(&path)?;
        write_profile_csv(&mut out, &group)?;
        out.flush().map_err(io_err(&path))?;
    }
    Ok(k)
}

/// Which stages a run executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Ingest,
    /// Features through eval; runs ingest first when `series.csv` is absent.
    Cluster,
    Report,
    /// Everything in order.
    Run,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seconds: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub status: RunStatus,
    pub failed_stage: Option<Stage>,
    pub error: Option<String>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub stages: Vec<StageRecord>,
    /// The full configuration; `RunConfig::load` accepts this file directly.
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub persons: Option<usize>,
    pub k: Option<usize>,
    pub validity: Option<Validity>,
    pub stages: Vec<StageRecord>,
}

struct Timer {
    records: Vec<StageRecord>,
}

impl Timer {
    fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> Result<T, StageError>) -> Result<T, PipelineError> {
        let started = Instant::now();
        let result = f();
        self.records.push(StageRecord { stage, seconds: started.elapsed().as_secs_f64(), ok: result.is_ok() });
        result.at(stage)
    }
}

fn execute(config: &RunConfig, command: Command, timer: &mut Timer) -> Result<RunSummary, PipelineError> {
    let out_dir = config.output_dir.as_path();
    let mut summary =
        RunSummary { output_dir: out_dir.to_path_buf(), persons: None, k: None, validity: None, stages: Vec::new() };
    let series_path = out_dir.join(SERIES_FILE);
    let run_ingest =
        matches!(command, Command::Ingest | Command::Run) || (command == Command::Cluster && !series_path.is_file());
    let series = if run_ingest {
        let ingested = timer.time(Stage::Ingest, || ingest_stage(config, out_dir))?;
        Some(ingested.series)
    } else {
        None
    };
    if command == Command::Ingest {
        summary.persons = series.map(|s| s.len());
        return Ok(summary);
    }
    if matches!(command, Command::Cluster | Command::Run) {
        let series = match series {
            Some(s) => s,
            None => timer.time(Stage::Ingest, || read_series_csv(&series_path))?,
        };
        summary.persons = Some(series.len());
        let (topo, topo_d) = timer.time(Stage::Features, || features_stage(config, &series, out_dir))?;
        let geo_d = timer.time(Stage::Geometry, || geometry_stage(config, &series, out_dir))?;
        let clustered =
            timer.time(Stage::Cluster, || cluster_stage(config, &series, &topo, &topo_d, &geo_d, out_dir))?;
        summary.k = Some(clustered.outcome.result.k);
        let validity = timer.time(Stage::Eval, || eval_stage(config, &topo, &clustered, out_dir))?;
        summary.validity = Some(validity);
    }
    if matches!(command, Command::Report | Command::Run) {
        let k = timer.time(Stage::Report, || report_stage(config, out_dir))?;
        summary.k.get_or_insert(k);
    }
    Ok(summary)
}

fn first_stage(command: Command) -> Stage {
    match command {
        Command::Report => Stage::Report,
        Command::Cluster => Stage::Features,
        _ => Stage::Ingest,
    }
}

/// Run `command` inside a pool of `config.threads` workers and record the
/// outcome in `manifest.json`, which is written on failure as well.
pub fn run_command(config: &RunConfig, command: Command) -> Result<RunSummary, PipelineError> {
    let mut timer = Timer { records: Vec::new() };
    let result = (|| {
        config.validate_values().at(first_stage(command))?;
        fs::create_dir_all(&config.output_dir).map_err(io_err(&config.output_dir)).at(first_stage(command))?;
        match config.threads {
            Some(t) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build()
                    .map_err(|e| StageError::ThreadPool(e.to_string()))
                    .at(first_stage(command))?;
                pool.install(|| execute(config, command, &mut timer))
            }
            None => execute(config, command, &mut timer),
        }
    })();

    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command,
        status: if result.is_ok() { RunStatus::Ok } else { RunStatus::Failed },
        failed_stage: result.as_ref().err().map(|e| e.stage),
        error: result.as_ref().err().map(|e| e.to_string()),
        seed: config.seed,
        threads: config.threads,
        stages: timer.records.clone(),
        config: config.clone(),
    };
    let written =
        if config.output_dir.is_dir() { write_json(&config.output_dir.join(MANIFEST_FILE), &manifest) } else { Ok(()) };
    let mut summary = result?;
    let last = timer.records.last().map_or(first_stage(command), |r| r.stage);
    written.at(last)?;
    summary.stages = timer.records;
    Ok(summary)
}

/// All stages, ingest through report.
pub fn run_pipeline(config: &RunConfig) -> Result<RunSummary, PipelineError> {
    run_command(config, Command::Run)
}

/// Write a synthetic population in the raw input formats (`activities.csv`,
/// `profiles.csv`, `truth.csv`) plus a `config.toml` that runs it. Returns
/// the configuration with paths resolved against `dir`.
pub fn write_synthetic_inputs(
    dir: &Path,
    specs: &[crate::synth::ArchetypeSpec],
    population: &crate::synth::PopulationConfig,
) -> Result<RunConfig, StageError> {
    use crate::ingest::write_activity_csv;
    use crate::synth::{generate_population, placeholder_profiles, to_records};

    let pop = generate_population(specs, population).map_err(|e| StageError::Malformed {
        path: dir.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let path = dir.join("activities.csv");
    let mut out = create(&path)?;
    write_activity_csv(&mut out, &to_records(&pop, population.seed))?;
    out.flush().map_err(io_err(&path))?;

    let path = dir.join("profiles.csv");
    let mut out = create(&path)?;
    write_profile_csv(&mut out, &placeholder_profiles(&pop, population.seed))?;
    out.flush().map_err(io_err(&path))?;

    let path = dir.join("truth.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["pid", "label"]).map_err(csv_err(&path))?;
    for (s, &l) in pop.series.iter().zip(&pop.labels) {
        w.write_record([s.pid.as_str(), specs[l].name.as_str()]).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let mut config = RunConfig {
        input: crate::config::InputConfig {
            activities: "activities.csv".into(),
            profiles: Some("profiles.csv".into()),
            truth: Some("truth.csv".into()),
        },
        window: crate::config::WindowConfig { start: population.start, days: population.days },
        granularity: population.granularity,
        seed: population.seed,
        ..RunConfig::default()
    };
    config.walsh.mode = crate::features::WalshMode::OneHot;
    config.cleaning.min_days = config.cleaning.min_days.min(population.days as usize);
    let path = dir.join("config.toml");
    fs::write(&path, config.to_toml()).map_err(io_err(&path))?;
    config.resolve_paths(dir);
    Ok(config)
}
