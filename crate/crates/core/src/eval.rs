//! Cluster validity: SSE curves, silhouette, Calinski-Harabasz, adjusted Rand
//! index, elbow selection, classical MDS and a method-comparison harness.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{cak_cluster, kmeans_refine_vector, kmedoids_refine_matrix, CakConfig, ClusterError};
use crate::matrix::DistanceMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("label {label} out of range for {k} clusters")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("{0} labels for {1} items")]
    LengthMismatch(usize, usize),
    #[error("feature rows have inconsistent dimensions")]
    FeatureShape,
    #[error("silhouette undefined for k=1")]
    SingleCluster,
    #[error("score needs 2 <= k < n, got k={k}, n={n}")]
    BadClusterCount { k: usize, n: usize },
    #[error("degenerate zero within-cluster dispersion")]
    ZeroDispersion,
    #[error("elbow selection needs at least 3 points, got {0}")]
    ShortCurve(usize),
    #[error("cannot embed {n} items in {dims} dimensions")]
    TooManyDims { n: usize, dims: usize },
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Number of clusters implied by the labels (max label + 1).
fn label_span(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

fn nonempty_clusters(labels: &[usize]) -> usize {
    let mut seen = vec![false; label_span(labels)];
    labels.iter().for_each(|&l| seen[l] = true);
    seen.into_iter().filter(|&s| s).count()
}

/// Sum of squared distances from each point to its cluster centroid.
pub fn sse(features: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> Result<f64, EvalError> {
    if features.len() != labels.len() {
        return Err(EvalError::LengthMismatch(labels.len(), features.len()));
    }
    let mut total = 0.0;
    for (x, &l) in features.iter().zip(labels) {
        let c = centroids.get(l).ok_or(EvalError::LabelOutOfRange { label: l, k: centroids.len() })?;
        if c.len() != x.len() {
            return Err(EvalError::FeatureShape);
        }
        total += squared_distance(x, c);
    }
    Ok(total)
}

/// Mean silhouette over all items; members of singleton clusters score 0.
pub fn silhouette(d: &DistanceMatrix, labels: &[usize]) -> Result<f64, EvalError> {
    let n = d.n();
    if labels.len() != n {
        return Err(EvalError::LengthMismatch(labels.len(), n));
    }
    if nonempty_clusters(labels) < 2 {
        return Err(EvalError::SingleCluster);
    }
    let k = label_span(labels);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..n {
                sums[labels[j]] += d.get(i, j);
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}

/// Calinski-Harabasz index `(B / (k - 1)) / (W / (n - k))`.
pub fn ch_score(features: &[Vec<f64>], labels: &[usize]) -> Result<f64, EvalError> {
    let n = features.len();
    if labels.len() != n {
        return Err(EvalError::LengthMismatch(labels.len(), n));
    }
    let dim = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != dim) {
        return Err(EvalError::FeatureShape);
    }
    let k = nonempty_clusters(labels);
    if k < 2 || k >= n {
        return Err(EvalError::BadClusterCount { k, n });
    }
    let span = label_span(labels);
    let mut sums = vec![vec![0.0; dim]; span];
    let mut sizes = vec![0usize; span];
    let mut global = vec![0.0; dim];
    for (x, &l) in features.iter().zip(labels) {
        sizes[l] += 1;
        for j in 0..dim {
            sums[l][j] += x[j];
            global[j] += x[j];
        }
    }
    global.iter_mut().for_each(|g| *g /= n as f64);
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(&sizes)
        .map(|(s, &c)| s.iter().map(|v| if c > 0 { v / c as f64 } else { 0.0 }).collect())
        .collect();
    let between: f64 =
        (0..span).filter(|&c| sizes[c] > 0).map(|c| sizes[c] as f64 * squared_distance(&centroids[c], &global)).sum();
    let within: f64 = features.iter().zip(labels).map(|(x, &l)| squared_distance(x, &centroids[l])).sum();
    if within == 0.0 {
        return Err(EvalError::ZeroDispersion);
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Interior point lying farthest below the chord joining the first and last
/// points of the curve; ties go to the smallest `k`.
pub fn elbow_select(curve: &[(usize, f64)]) -> Result<usize, EvalError> {
    if curve.len() < 3 {
        return Err(EvalError::ShortCurve(curve.len()));
    }
    let (k0, y0) = (curve[0].0 as f64, curve[0].1);
    let (k1, y1) = (curve[curve.len() - 1].0 as f64, curve[curve.len() - 1].1);
    let slope = (y1 - y0) / (k1 - k0);
    let mut best = curve[1].0;
    let mut best_gap = f64::NEG_INFINITY;
    for &(k, y) in &curve[1..curve.len() - 1] {
        let gap = y0 + slope * (k as f64 - k0) - y;
        if gap > best_gap {
            best_gap = gap;
            best = k;
        }
    }
    Ok(best)
}

fn choose2(x: usize) -> f64 {
    (x as f64) * (x as f64 - 1.0) / 2.0
}

/// Adjusted Rand index from the pair-counting contingency table. Two
/// partitions that leave no room for chance agreement (both trivial) score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    let (ka, kb) = (label_span(a), label_span(b));
    let mut table = vec![0usize; ka * kb];
    let mut rows = vec![0usize; ka];
    let mut cols = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let index: f64 = table.iter().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.iter().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.iter().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if max_index == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

/// Classical (Torgerson) scaling. Eigenvectors are sign-normalized so their
/// largest-magnitude entry is positive; non-positive eigenvalues yield zero
/// coordinates.
pub fn classical_mds(d: &DistanceMatrix, dims: usize) -> Result<Vec<Vec<f64>>, EvalError> {
    let n = d.n();
    if n == 0 || dims > n - 1 {
        return Err(EvalError::TooManyDims { n, dims });
    }
    let sq = DMatrix::from_fn(n, n, |i, j| d.get(i, j) * d.get(i, j));
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + grand));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]).then(x.cmp(&y)));

    let mut coords = vec![vec![0.0; dims]; n];
    for (axis, &e) in order.iter().take(dims).enumerate() {
        let lambda = eig.eigenvalues[e];
        if lambda <= 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(e);
        let mut pivot = 0;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() + 1e-12 {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        let scale = sign * lambda.sqrt();
        for i in 0..n {
            coords[i][axis] = v[i] * scale;
        }
    }
    Ok(coords)
}

/// Index of the point lying farthest from its assigned centroid (lowest index on ties).
fn farthest_point(features: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for (i, (x, &l)) in features.iter().zip(labels).enumerate() {
        let d = squared_distance(x, &centroids[l]);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub k: usize,
    pub sse: f64,
    /// `None` for k = 1 or when undefined.
    pub silhouette: Option<f64>,
    pub labels: Vec<usize>,
}

/// K-means for every k in `k_min..=k_max` with nested initialization: k = 1
/// starts at the mean, each next k keeps the previous centroids and adds the
/// point farthest from its centroid. This makes the SSE curve non-increasing.
pub fn kmeans_scan(
    features: &[Vec<f64>],
    d: &DistanceMatrix,
    k_min: usize,
    k_max: usize,
    max_iter: usize,
) -> Result<Vec<ScanPoint>, EvalError> {
    let n = features.len();
    if n == 0 {
        return Err(EvalError::Cluster(ClusterError::Empty));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(EvalError::FeatureShape);
    }
    let mean: Vec<f64> = (0..dim).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n as f64).collect();
    let mut centroids = vec![mean];
    let mut labels = vec![0usize; n];
    let mut out = Vec::new();
    for k in 1..=k_max.min(n) {
        if k > 1 {
            let far = farthest_point(features, &labels, &centroids);
            centroids.push(features[far].clone());
        }
        let refined = kmeans_refine_vector(features, &centroids, max_iter)?;
        labels = refined.result.labels;
        centroids = match refined.result.centers {
            crate::cluster::Centers::Centroids(c) => c,
            crate::cluster::Centers::Medoids(_) => unreachable!("vector refinement yields centroids"),
        };
        if k >= k_min {
            let sil = if k >= 2 { silhouette(d, &labels).ok() } else { None };
            out.push(ScanPoint {
                k,
                sse: sse(features, &labels, &centroids)?,
                silhouette: sil,
                labels: labels.clone(),
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub elbow_k: Option<usize>,
    pub silhouette_k: Option<usize>,
    pub chosen_k: Option<usize>,
}

/// Elbow k, unless the silhouette maximum sits more than one step away, in
/// which case the silhouette maximum wins.
pub fn select_k(scan: &[ScanPoint]) -> Selection {
    let curve: Vec<(usize, f64)> = scan.iter().map(|p| (p.k, p.sse)).collect();
    let elbow_k = elbow_select(&curve).ok();
    let silhouette_k = scan
        .iter()
        .filter_map(|p| p.silhouette.map(|s| (p.k, s)))
        .fold(None::<(usize, f64)>, |best, (k, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((k, s)),
        })
        .map(|(k, _)| k);
    let chosen_k = match (elbow_k, silhouette_k) {
        (Some(e), Some(s)) if e.abs_diff(s) > 1 => Some(s),
        (Some(e), _) => Some(e),
        (None, s) => s,
    };
    Selection { elbow_k, silhouette_k, chosen_k }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Random restarts per baseline method.
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig { restarts: 10, seed: 0, max_iter: 300 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessRow {
    pub method: String,
    pub run: usize,
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub ch: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessTable {
    pub rows: Vec<HarnessRow>,
}

impl HarnessTable {
    fn scores(&self, method: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.method == method).filter_map(|r| r.ch).collect()
    }

    pub fn cak_ch(&self) -> Option<f64> {
        self.scores("cak").first().copied()
    }

    /// Median CH of the random-init K-means runs that produced a score.
    pub fn kmeans_median_ch(&self) -> Option<f64> {
        let mut s = self.scores("kmeans");
        if s.is_empty() {
            return None;
        }
        s.sort_by(f64::total_cmp);
        let m = s.len();
        Some(if m % 2 == 1 { s[m / 2] } else { 0.5 * (s[m / 2 - 1] + s[m / 2]) })
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "run", "seed", "k", "ch", "error"])?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.run.to_string(),
                r.seed.map(|s| s.to_string()).unwrap_or_default(),
                r.k.map(|k| k.to_string()).unwrap_or_default(),
                r.ch.map(|c| c.to_string()).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn run_seed(base: u64, method: u64, run: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (method << 32) ^ run as u64
}

/// CAK against random-init K-means and random-init K-medoids, each baseline
/// using CAK's cluster count. CH is scored on `features` for every method;
/// a method that fails contributes a row carrying the error.
pub fn comparison_harness(
    features: &[Vec<f64>],
    d: &DistanceMatrix,
    cak: &CakConfig,
    config: &HarnessConfig,
) -> HarnessTable {
    let n = features.len();
    let mut rows = Vec::new();
    let cak_out = cak_cluster(Some(features), d, cak);
    let k = match &cak_out {
        Ok(out) => {
            let ch = ch_score(features, &out.result.labels);
            rows.push(HarnessRow {
                method: "cak".into(),
                run: 0,
                seed: Some(cak.ap.seed),
                k: Some(out.result.k),
                ch: ch.as_ref().ok().copied(),
                error: ch.err().map(|e| e.to_string()),
            });
            out.result.k
        }
        Err(e) => {
            rows.push(HarnessRow {
                method: "cak".into(),
                run: 0,
                seed: Some(cak.ap.seed),
                k: None,
                ch: None,
                error: Some(e.to_string()),
            });
            return HarnessTable { rows };
        }
    };

    let jobs: Vec<(&str, usize)> =
        ["kmeans", "kmedoids"].iter().flat_map(|&m| (0..config.restarts).map(move |r| (m, r))).collect();
    let baseline: Vec<HarnessRow> = jobs
        .par_iter()
        .map(|&(method, run)| {
            let seed = run_seed(config.seed, u64::from(method == "kmedoids"), run);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picked = if k <= n { sample(&mut rng, n, k).into_vec() } else { Vec::new() };
            let labels = if method == "kmeans" {
                let init: Vec<Vec<f64>> = picked.iter().map(|&i| features[i].clone()).collect();
                kmeans_refine_vector(features, &init, config.max_iter).map(|r| r.result.labels)
            } else {
                kmedoids_refine_matrix(d, &picked, config.max_iter).map(|r| r.result.labels)
            };
            let (ch, error) = match labels.map_err(EvalError::from).and_then(|l| ch_score(features, &l)) {
                Ok(c) => (Some(c), None),
                Err(e) => (None, Some(e.to_string())),
            };
            HarnessRow { method: method.into(), run, seed: Some(seed), k: Some(k), ch, error }
        })
        .collect();
    rows.extend(baseline);
    HarnessTable { rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    fn euclid(f: &[Vec<f64>]) -> DistanceMatrix {
        DistanceMatrix::anonymous(f.len(), |i, j| squared_distance(&f[i], &f[j]).sqrt()).unwrap()
    }

    #[test]
    fn sse_examples() {
        assert_eq!(sse(&pts(&[0.0, 2.0]), &[0, 0], &pts(&[1.0])).unwrap(), 2.0);
        assert_eq!(sse(&pts(&[3.0, 3.0]), &[0, 0], &pts(&[3.0])).unwrap(), 0.0);
        assert_eq!(sse(&pts(&[0.0, 4.0]), &[0, 0], &pts(&[2.0])).unwrap(), 4.0 * 2.0);
        assert_eq!(sse(&pts(&[0.0]), &[3], &pts(&[1.0])), Err(EvalError::LabelOutOfRange { label: 3, k: 1 }));
    }

    #[test]
    fn silhouette_two_pairs() {
        let f = pts(&[0.0, 0.1, 10.0, 10.1]);
        let s = silhouette(&euclid(&f), &[0, 0, 1, 1]).unwrap();
        // a = 0.1 for everyone; b = mean of {10, 10.1} or {9.9, 10}
        let oracle = [(10.05f64, 0.1f64), (9.95, 0.1), (9.95, 0.1), (10.05, 0.1)]
            .iter()
            .map(|(b, a)| (b - a) / b.max(*a))
            .sum::<f64>()
            / 4.0;
        assert!((s - oracle).abs() < 1e-12);
        assert!(s > 0.9);
        assert_eq!(silhouette(&euclid(&f), &[1, 1, 0, 0]).unwrap(), s);
    }

    #[test]
    fn silhouette_singletons_and_single_cluster() {
        let f = pts(&[0.0, 1.0, 5.0]);
        assert_eq!(silhouette(&euclid(&f), &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(silhouette(&euclid(&f), &[0, 0, 0]), Err(EvalError::SingleCluster));
    }

    #[test]
    fn ch_hand_formula() {
        // {0,1} {5} {9}: global mean 3.75
        let f = pts(&[0.0, 1.0, 5.0, 9.0]);
        let labels = [0, 0, 1, 2];
        let b = 2.0 * (0.5f64 - 3.75).powi(2) + (5.0f64 - 3.75).powi(2) + (9.0f64 - 3.75).powi(2);
        let w = 0.25 + 0.25;
        let expected = (b / 2.0) / (w / 1.0);
        assert!((ch_score(&f, &labels).unwrap() - expected).abs() < 1e-9);
        let scaled: Vec<Vec<f64>> = f.iter().map(|x| vec![x[0] * 7.5]).collect();
        assert!((ch_score(&scaled, &labels).unwrap() - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn ch_errors() {
        let f = pts(&[0.0, 0.0, 5.0, 5.0]);
        assert_eq!(ch_score(&f, &[0, 0, 1, 1]), Err(EvalError::ZeroDispersion));
        assert_eq!(ch_score(&f, &[0, 0, 0, 0]), Err(EvalError::BadClusterCount { k: 1, n: 4 }));
    }

    #[test]
    fn elbow_examples() {
        let curve: Vec<(usize, f64)> =
            [100.0, 50.0, 20.0, 18.0, 17.0, 16.0].iter().enumerate().map(|(i, &v)| (i + 1, v)).collect();
        assert_eq!(elbow_select(&curve).unwrap(), 3);
        let linear: Vec<(usize, f64)> = (1..=5).map(|k| (k, 50.0 - 10.0 * k as f64)).collect();
        assert_eq!(elbow_select(&linear).unwrap(), 2);
        assert_eq!(elbow_select(&curve[..2]), Err(EvalError::ShortCurve(2)));
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert!((adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() + 0.5).abs() < 1e-12);
        assert!(adjusted_rand_index(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn mds_collinear() {
        let d = DistanceMatrix::anonymous(3, |i, j| (i as f64 - j as f64).abs()).unwrap();
        let x = classical_mds(&d, 1).unwrap();
        let gaps = [(x[1][0] - x[0][0]).abs(), (x[2][0] - x[1][0]).abs(), (x[2][0] - x[0][0]).abs()];
        for (g, e) in gaps.iter().zip([1.0, 1.0, 2.0]) {
            assert!((g - e).abs() < 1e-9);
        }
        let z = DistanceMatrix::anonymous(4, |_, _| 0.0).unwrap();
        assert!(classical_mds(&z, 2).unwrap().iter().flatten().all(|&v| v == 0.0));
        assert_eq!(classical_mds(&d, 3), Err(EvalError::TooManyDims { n: 3, dims: 3 }));
    }

    #[test]
    fn select_protocol() {
        let mk = |k: usize, sse: f64, sil: Option<f64>| ScanPoint { k, sse, silhouette: sil, labels: vec![] };
        let scan = vec![
            mk(1, 100.0, None),
            mk(2, 50.0, Some(0.3)),
            mk(3, 20.0, Some(0.5)),
            mk(4, 18.0, Some(0.45)),
            mk(5, 17.0, Some(0.2)),
            mk(6, 16.0, Some(0.1)),
        ];
        let s = select_k(&scan);
        assert_eq!((s.elbow_k, s.silhouette_k, s.chosen_k), (Some(3), Some(3), Some(3)));
        let mut far = scan.clone();
        far[4].silhouette = Some(0.9);
        let s = select_k(&far);
        assert_eq!((s.elbow_k, s.silhouette_k, s.chosen_k), (Some(3), Some(5), Some(5)));
    }
}
