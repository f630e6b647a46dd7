//! Two-stage clustering: affinity propagation picks the number of clusters and
//! the starting centers, then a K-means (vector space) or K-medoids (distance
//! matrix) refinement settles the labels. Undersized clusters are folded into
//! their nearest neighbour afterwards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{DistanceMatrix, MatrixError};

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("nothing to cluster")]
    Empty,
    #[error("damping must lie in [0.5, 1), got {0}")]
    BadDamping(f64),
    #[error("similarity matrix has {len} entries, expected {n}x{n}")]
    BadSimilarity { n: usize, len: usize },
    #[error("{k} clusters requested for {n} items")]
    TooManyClusters { k: usize, n: usize },
    #[error("feature rows have inconsistent or mismatched dimensions")]
    FeatureShape,
    #[error("mixing weight must lie in [0, 1], got {0}")]
    BadGamma(f64),
    #[error("unknown or empty cluster {0}")]
    UnknownCluster(usize),
    #[error("vector refinement needs feature vectors")]
    MissingFeatures,
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preference {
    /// Median of the off-diagonal similarities.
    Median,
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApParams {
    pub damping: f64,
    pub max_iter: usize,
    pub convergence_window: usize,
    pub preference: Preference,
    /// Seeds the tie-breaking jitter added to the similarities.
    pub seed: u64,
}

impl Default for ApParams {
    fn default() -> Self {
        ApParams { damping: 0.9, max_iter: 1000, convergence_window: 50, preference: Preference::Median, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApOutcome {
    /// Sorted exemplar indices.
    pub exemplars: Vec<usize>,
    /// Index into `exemplars` for every item.
    pub labels: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
    pub preference: f64,
}

/// Negated distances, row-major.
pub fn similarity_from_distances(d: &DistanceMatrix) -> Vec<f64> {
    d.data().iter().map(|v| -v).collect()
}

fn median_off_diagonal(s: &[f64], n: usize) -> f64 {
    let mut off: Vec<f64> =
        (0..n).flat_map(|i| (0..n).filter(move |&k| k != i).map(move |k| (i, k))).map(|(i, k)| s[i * n + k]).collect();
    if off.is_empty() {
        return 0.0;
    }
    off.sort_by(f64::total_cmp);
    let m = off.len();
    if m % 2 == 1 {
        off[m / 2]
    } else {
        0.5 * (off[m / 2 - 1] + off[m / 2])
    }
}

/// Damped responsibility/availability message passing on an `n x n`
/// similarity matrix. Never fails on non-convergence; `converged` reports it.
pub fn affinity_propagation(similarity: &[f64], n: usize, params: &ApParams) -> Result<ApOutcome, ClusterError> {
    if n == 0 {
        return Err(ClusterError::Empty);
    }
    if similarity.len() != n * n {
        return Err(ClusterError::BadSimilarity { n, len: similarity.len() });
    }
    if !(0.5..1.0).contains(&params.damping) {
        return Err(ClusterError::BadDamping(params.damping));
    }
    let preference = match params.preference {
        Preference::Median => median_off_diagonal(similarity, n),
        Preference::Value(v) => v,
    };
    if n == 1 {
        return Ok(ApOutcome { exemplars: vec![0], labels: vec![0], converged: true, iterations: 0, preference });
    }

    // All off-diagonal similarities equal: the messages cannot break the tie.
    let first_off = similarity[1];
    let flat = (0..n).all(|i| (0..n).all(|k| i == k || similarity[i * n + k] == first_off));
    if flat {
        let (exemplars, labels) =
            if preference > first_off { ((0..n).collect(), (0..n).collect()) } else { (vec![0], vec![0; n]) };
        return Ok(ApOutcome { exemplars, labels, converged: true, iterations: 0, preference });
    }

    let mut s = similarity.to_vec();
    for i in 0..n {
        s[i * n + i] = preference;
    }
    // Jitter proportional to the similarity scale, so exact ties (duplicate
    // items at distance zero) are broken too.
    let scale = s.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for v in s.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += f64::EPSILON * (v.abs() + scale) * z;
    }

    let damping = params.damping;
    let keep = 1.0 - damping;
    let mut r = vec![0.0; n * n];
    let mut a = vec![0.0; n * n];
    let mut last_set: Vec<bool> = vec![false; n];
    let mut stable_for = 0usize;
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..params.max_iter {
        iterations = it + 1;
        r.par_chunks_mut(n).enumerate().for_each(|(i, r_row)| {
            let s_row = &s[i * n..(i + 1) * n];
            let a_row = &a[i * n..(i + 1) * n];
            let (mut best, mut best_k, mut second) = (f64::NEG_INFINITY, 0, f64::NEG_INFINITY);
            for k in 0..n {
                let v = a_row[k] + s_row[k];
                if v > best {
                    second = best;
                    best = v;
                    best_k = k;
                } else if v > second {
                    second = v;
                }
            }
            for k in 0..n {
                let target = s_row[k] - if k == best_k { second } else { best };
                r_row[k] = damping * r_row[k] + keep * target;
            }
        });

        let col_sums: Vec<f64> =
            (0..n).map(|k| (0..n).map(|i| if i == k { r[k * n + k] } else { r[i * n + k].max(0.0) }).sum()).collect();
        a.par_chunks_mut(n).enumerate().for_each(|(i, a_row)| {
            for k in 0..n {
                let target =
                    if i == k { col_sums[k] - r[k * n + k] } else { (col_sums[k] - r[i * n + k].max(0.0)).min(0.0) };
                a_row[k] = damping * a_row[k] + keep * target;
            }
        });

        let set: Vec<bool> = (0..n).map(|k| a[k * n + k] + r[k * n + k] > 0.0).collect();
        if set == last_set {
            stable_for += 1;
        } else {
            stable_for = 0;
            last_set = set;
        }
        if stable_for >= params.convergence_window && last_set.iter().any(|&e| e) {
            converged = true;
            break;
        }
    }

    let mut exemplars: Vec<usize> = (0..n).filter(|&k| last_set[k]).collect();
    if exemplars.is_empty() {
        // no exemplar emerged; fall back to the single most central item
        let center = (0..n)
            .max_by(|&x, &y| {
                let sx: f64 = (0..n).filter(|&i| i != x).map(|i| similarity[i * n + x]).sum();
                let sy: f64 = (0..n).filter(|&i| i != y).map(|i| similarity[i * n + y]).sum();
                sx.total_cmp(&sy).then(y.cmp(&x))
            })
            .unwrap_or(0);
        return Ok(ApOutcome { exemplars: vec![center], labels: vec![0; n], converged: false, iterations, preference });
    }

    // Assign, then let each cluster re-elect the member with the largest
    // summed similarity, then assign again.
    let assign = |ex: &[usize]| -> Vec<usize> {
        (0..n)
            .map(|i| {
                if let Some(pos) = ex.iter().position(|&e| e == i) {
                    return pos;
                }
                let mut best = 0;
                for (c, &e) in ex.iter().enumerate() {
                    if s[i * n + e] > s[i * n + ex[best]] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    };
    let labels = assign(&exemplars);
    for (c, ex) in exemplars.iter_mut().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let mut best = *ex;
        let mut best_sum = f64::NEG_INFINITY;
        for &j in &members {
            let sum: f64 = members.iter().map(|&i| s[i * n + j]).sum();
            if sum > best_sum {
                best_sum = sum;
                best = j;
            }
        }
        *ex = best;
    }
    exemplars.sort_unstable();
    exemplars.dedup();
    let labels = assign(&exemplars);
    Ok(ApOutcome { exemplars, labels, converged, iterations, preference })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Centers {
    /// Item indices (matrix mode).
    Medoids(Vec<usize>),
    /// Mean vectors (vector mode).
    Centroids(Vec<Vec<f64>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Merge {
    pub source: usize,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusteringResult {
    pub labels: Vec<usize>,
    pub centers: Centers,
    pub k: usize,
    pub sizes: Vec<usize>,
    /// Cluster ids in these entries refer to the numbering before merging.
    pub merge_log: Vec<Merge>,
}

impl ClusteringResult {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }
}

fn sizes_of(labels: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &l in labels {
        sizes[l] += 1;
    }
    sizes
}

/// Renumber non-empty clusters consecutively; returns the kept old ids.
fn compact(labels: &mut [usize], k: usize) -> Vec<usize> {
    let sizes = sizes_of(labels, k);
    let kept: Vec<usize> = (0..k).filter(|&c| sizes[c] > 0).collect();
    let mut map = vec![usize::MAX; k];
    for (new, &old) in kept.iter().enumerate() {
        map[old] = new;
    }
    for l in labels.iter_mut() {
        *l = map[*l];
    }
    kept
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Refinement {
    pub result: ClusteringResult,
    /// Lloyd rounds (vector mode) or medoid-changing rounds (matrix mode).
    pub iterations: usize,
    pub converged: bool,
    /// Within-cluster objective after every round, starting with the initial state.
    pub objective_trace: Vec<f64>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_features(features: &[Vec<f64>]) -> Result<usize, ClusterError> {
    let dim = features.first().map(Vec::len).ok_or(ClusterError::Empty)?;
    if features.iter().any(|f| f.len() != dim) {
        return Err(ClusterError::FeatureShape);
    }
    Ok(dim)
}

fn nearest_centroid(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, m) in centroids.iter().enumerate() {
        let d = squared_distance(x, m);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn means(features: &[Vec<f64>], labels: &[usize], k: usize, previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = features[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (x, &l) in features.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(x) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .enumerate()
        .map(
            |(c, (s, cnt))| {
                if cnt == 0 {
                    previous[c].clone()
                } else {
                    s.into_iter().map(|v| v / cnt as f64).collect()
                }
            },
        )
        .collect()
}

fn sse_of(features: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    features.iter().zip(labels).map(|(x, &l)| squared_distance(x, &centroids[l])).sum()
}

/// Give every empty cluster the point lying farthest from its own centroid,
/// taken from a cluster that can spare it.
fn reseed_empty(features: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let sizes = sizes_of(labels, k);
        let Some(empty) = (0..k).find(|&c| sizes[c] == 0) else { return };
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, x) in features.iter().enumerate() {
            if sizes[labels[i]] < 2 {
                continue;
            }
            let d = squared_distance(x, &centroids[labels[i]]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let Some(i) = far else { return };
        labels[i] = empty;
        centroids[empty] = features[i].clone();
    }
}

/// Lloyd iterations from the given centroids until the labels stop changing
/// or `max_iter` rounds pass.
pub fn kmeans_refine_vector(
    features: &[Vec<f64>],
    init_centroids: &[Vec<f64>],
    max_iter: usize,
) -> Result<Refinement, ClusterError> {
    let dim = check_features(features)?;
    let (n, k) = (features.len(), init_centroids.len());
    if k == 0 {
        return Err(ClusterError::Empty);
    }
    if k > n {
        return Err(ClusterError::TooManyClusters { k, n });
    }
    if init_centroids.iter().any(|c| c.len() != dim) {
        return Err(ClusterError::FeatureShape);
    }
    let mut centroids = init_centroids.to_vec();
    let mut labels: Vec<usize> = features.par_iter().map(|x| nearest_centroid(x, &centroids)).collect();
    reseed_empty(features, &mut labels, &mut centroids);
    centroids = means(features, &labels, k, &centroids);
    let mut trace = vec![sse_of(features, &labels, &centroids)];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut next: Vec<usize> = features.par_iter().map(|x| nearest_centroid(x, &centroids)).collect();
        reseed_empty(features, &mut next, &mut centroids);
        let unchanged = next == labels;
        labels = next;
        centroids = means(features, &labels, k, &centroids);
        trace.push(sse_of(features, &labels, &centroids));
        if unchanged {
            converged = true;
            break;
        }
    }
    let sizes = sizes_of(&labels, k);
    Ok(Refinement {
        result: ClusteringResult { labels, centers: Centers::Centroids(centroids), k, sizes, merge_log: Vec::new() },
        iterations,
        converged,
        objective_trace: trace,
    })
}

fn nearest_medoid(d: &DistanceMatrix, i: usize, medoids: &[usize]) -> usize {
    let mut best = 0;
    for (c, &m) in medoids.iter().enumerate() {
        if d.get(i, m) < d.get(i, medoids[best]) {
            best = c;
        }
    }
    best
}

fn medoid_objective(d: &DistanceMatrix, labels: &[usize], medoids: &[usize]) -> f64 {
    labels.iter().enumerate().map(|(i, &l)| d.get(i, medoids[l])).sum()
}

/// Member with the smallest summed distance to the other members. `prefer`
/// wins ties when it is among the minimizers, otherwise the lowest index does.
fn cluster_medoid(d: &DistanceMatrix, members: &[usize], prefer: Option<usize>) -> Option<usize> {
    let sums: Vec<f64> = members.iter().map(|&j| members.iter().map(|&i| d.get(i, j)).sum()).collect();
    let best = sums.iter().copied().fold(f64::INFINITY, f64::min);
    if let Some(p) = prefer {
        if let Some(pos) = members.iter().position(|&m| m == p) {
            if sums[pos] == best {
                return Some(p);
            }
        }
    }
    members.iter().zip(&sums).filter(|(_, &s)| s == best).map(|(&m, _)| m).min()
}

/// Alternate nearest-medoid assignment and medoid re-election until no
/// medoid moves. Assignment ties go to the lower cluster index; clusters
/// left empty are dropped from the result.
pub fn kmedoids_refine_matrix(
    d: &DistanceMatrix,
    init_medoids: &[usize],
    max_iter: usize,
) -> Result<Refinement, ClusterError> {
    let (n, k) = (d.n(), init_medoids.len());
    if n == 0 || k == 0 {
        return Err(ClusterError::Empty);
    }
    if k > n {
        return Err(ClusterError::TooManyClusters { k, n });
    }
    if let Some(&bad) = init_medoids.iter().find(|&&m| m >= n) {
        return Err(ClusterError::UnknownCluster(bad));
    }
    let mut medoids = init_medoids.to_vec();
    let assign =
        |medoids: &[usize]| -> Vec<usize> { (0..n).into_par_iter().map(|i| nearest_medoid(d, i, medoids)).collect() };
    let mut labels = assign(&medoids);
    let mut trace = vec![medoid_objective(d, &labels, &medoids)];
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..max_iter {
        let mut changed = false;
        for (c, m) in medoids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if let Some(best) = cluster_medoid(d, &members, Some(*m)) {
                if best != *m {
                    *m = best;
                    changed = true;
                }
            }
        }
        if !changed {
            converged = true;
            break;
        }
        iterations += 1;
        labels = assign(&medoids);
        trace.push(medoid_objective(d, &labels, &medoids));
    }
    let kept = compact(&mut labels, k);
    let medoids: Vec<usize> = kept.iter().map(|&c| medoids[c]).collect();
    let k = medoids.len();
    let sizes = sizes_of(&labels, k);
    Ok(Refinement {
        result: ClusteringResult { labels, centers: Centers::Medoids(medoids), k, sizes, merge_log: Vec::new() },
        iterations,
        converged,
        objective_trace: trace,
    })
}

/// Medoid of a cluster: the member with the smallest summed within-cluster
/// distance, lowest index on ties.
pub fn representative(result: &ClusteringResult, d: &DistanceMatrix, cluster: usize) -> Result<usize, ClusterError> {
    let members = result.members(cluster);
    cluster_medoid(d, &members, None).ok_or(ClusterError::UnknownCluster(cluster))
}

/// Fold every cluster smaller than `min_size` into the cluster whose medoid
/// is nearest to its own, smallest clusters first, until none is undersized
/// or a single cluster remains.
pub fn merge_small_clusters(result: &ClusteringResult, d: &DistanceMatrix, min_size: usize) -> ClusteringResult {
    let k = result.k;
    let mut labels = result.labels.clone();
    let mut log = result.merge_log.clone();
    let mut centroids = match &result.centers {
        Centers::Centroids(c) => Some(c.clone()),
        Centers::Medoids(_) => None,
    };
    loop {
        let sizes = sizes_of(&labels, k);
        let alive: Vec<usize> = (0..k).filter(|&c| sizes[c] > 0).collect();
        if alive.len() <= 1 {
            break;
        }
        let Some(&source) = alive.iter().filter(|&&c| sizes[c] < min_size).min_by_key(|&&c| (sizes[c], c)) else {
            break;
        };
        let medoid_of = |c: usize| {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            cluster_medoid(d, &members, None).expect("alive cluster has members")
        };
        let from = medoid_of(source);
        let mut target = None;
        let mut target_d = f64::INFINITY;
        for &c in alive.iter().filter(|&&c| c != source) {
            let dist = d.get(from, medoid_of(c));
            if dist < target_d {
                target_d = dist;
                target = Some(c);
            }
        }
        let target = target.expect("at least two clusters alive");
        if let Some(cs) = centroids.as_mut() {
            let (ns, nt) = (sizes[source] as f64, sizes[target] as f64);
            let merged: Vec<f64> =
                cs[source].iter().zip(&cs[target]).map(|(a, b)| (a * ns + b * nt) / (ns + nt)).collect();
            cs[target] = merged;
        }
        for l in labels.iter_mut().filter(|l| **l == source) {
            *l = target;
        }
        log.push(Merge { source, target });
    }
    let kept = compact(&mut labels, k);
    let new_k = kept.len();
    let sizes = sizes_of(&labels, new_k);
    let centers = match centroids {
        Some(cs) => Centers::Centroids(kept.iter().map(|&c| cs[c].clone()).collect()),
        None => {
            let tmp = ClusteringResult {
                labels: labels.clone(),
                centers: Centers::Medoids(Vec::new()),
                k: new_k,
                sizes: sizes.clone(),
                merge_log: Vec::new(),
            };
            Centers::Medoids(
                (0..new_k).map(|c| representative(&tmp, d, c).expect("compacted clusters are non-empty")).collect(),
            )
        }
    };
    ClusteringResult { labels, centers, k: new_k, sizes, merge_log: log }
}

/// Max-normalize both matrices and mix them: `gamma * topo + (1 - gamma) * geo`.
pub fn combine_matrices(
    topo: &DistanceMatrix,
    geo: &DistanceMatrix,
    gamma: f64,
) -> Result<DistanceMatrix, ClusterError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(ClusterError::BadGamma(gamma));
    }
    if topo.ids() != geo.ids() {
        return Err(ClusterError::Matrix(MatrixError::IdMismatch));
    }
    let (t, g) = (topo.max_normalized(), geo.max_normalized());
    let data = t.data().iter().zip(g.data()).map(|(a, b)| gamma * a + (1.0 - gamma) * b).collect();
    Ok(DistanceMatrix::new(topo.ids().to_vec(), data)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMode {
    /// K-medoids on the combined distance matrix.
    #[default]
    Matrix,
    /// Euclidean K-means on the topological feature vectors.
    Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CakConfig {
    pub mode: RefineMode,
    pub ap: ApParams,
    /// `None` means `max(5, ceil(0.05 n))`.
    pub min_size: Option<usize>,
    pub max_iter: usize,
}

impl Default for CakConfig {
    fn default() -> Self {
        CakConfig { mode: RefineMode::Matrix, ap: ApParams::default(), min_size: None, max_iter: 300 }
    }
}

pub fn default_min_size(n: usize) -> usize {
    5.max((0.05 * n as f64).ceil() as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CakOutcome {
    pub result: ClusteringResult,
    pub ap: ApOutcome,
    pub refinement: Refinement,
    pub min_size: usize,
}

/// Affinity propagation on `-d`, refinement from its exemplars, then merging
/// of undersized clusters.
pub fn cak_cluster(
    features: Option<&[Vec<f64>]>,
    d: &DistanceMatrix,
    config: &CakConfig,
) -> Result<CakOutcome, ClusterError> {
    let n = d.n();
    if n == 0 {
        return Err(ClusterError::Empty);
    }
    let ap = affinity_propagation(&similarity_from_distances(d), n, &config.ap)?;
    let refinement = match config.mode {
        RefineMode::Matrix => kmedoids_refine_matrix(d, &ap.exemplars, config.max_iter)?,
        RefineMode::Vector => {
            let features = features.ok_or(ClusterError::MissingFeatures)?;
            if features.len() != n {
                return Err(ClusterError::FeatureShape);
            }
            let init: Vec<Vec<f64>> = ap.exemplars.iter().map(|&e| features[e].clone()).collect();
            kmeans_refine_vector(features, &init, config.max_iter)?
        }
    };
    let min_size = config.min_size.unwrap_or_else(|| default_min_size(n));
    let mut result = merge_small_clusters(&refinement.result, d, min_size);
    if let (Some(features), Centers::Centroids(_)) = (features, &result.centers) {
        let placeholder = vec![vec![0.0; features[0].len()]; result.k];
        result.centers = Centers::Centroids(means(features, &result.labels, result.k, &placeholder));
    }
    Ok(CakOutcome { result, ap, refinement, min_size })
}
