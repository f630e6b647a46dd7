//! Zero-dimensional sublevel persistence of a sampled function and its
//! persistence landscape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::walsh::WalshSpectrum;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("cannot compute persistence of an empty sequence")]
    Empty,
    #[error("landscape needs at least one level")]
    NoLevels,
    #[error("landscape grid needs at least two points, got {0}")]
    GridTooSmall(usize),
    #[error("landscape grids or level counts differ")]
    GridMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersistencePair {
    pub birth: f64,
    pub death: f64,
    /// The component that never dies; its death is capped at the global maximum.
    pub essential: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PersistenceDiagram {
    pub pairs: Vec<PersistencePair>,
}

impl PersistenceDiagram {
    pub fn finite(&self) -> impl Iterator<Item = &PersistencePair> {
        self.pairs.iter().filter(|p| !p.essential)
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// The function handed to persistence: `|F(m)| / T2` for every coefficient
/// but the sequency-zero one, which only reflects the mean code value.
pub fn spectrum_profile(spectrum: &WalshSpectrum) -> Vec<f64> {
    let scale = 1.0 / spectrum.t2.max(1) as f64;
    spectrum.coefficients.iter().skip(1).map(|c| c.abs() * scale).collect()
}

struct Components {
    parent: Vec<usize>,
}

impl Components {
    fn new(n: usize) -> Self {
        Components { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// H0 persistence of the sublevel filtration on the path graph through
/// `values`. Vertices enter in (value, index) order; on a merge the component
/// with the lower birth survives, the lower vertex index breaking ties.
/// Zero-length pairs are not reported.
pub fn sublevel_persistence(values: &[f64]) -> Result<PersistenceDiagram, TopologyError> {
    let n = values.len();
    if n == 0 {
        return Err(TopologyError::Empty);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));

    // Roots are always the birth vertex of their component.
    let mut uf = Components::new(n);
    let mut active = vec![false; n];
    let mut pairs = Vec::new();
    let elder = |a: usize, b: usize| -> bool {
        // true when root a is older than root b
        values[a] < values[b] || (values[a] == values[b] && a < b)
    };

    for &v in &order {
        active[v] = true;
        let mut roots: Vec<usize> = Vec::with_capacity(2);
        if v > 0 && active[v - 1] {
            roots.push(uf.find(v - 1));
        }
        if v + 1 < n && active[v + 1] {
            roots.push(uf.find(v + 1));
        }
        match roots.as_slice() {
            [] => {}
            [r] => uf.parent[v] = *r,
            [a, b] => {
                let (old, young) = if elder(*a, *b) { (*a, *b) } else { (*b, *a) };
                uf.parent[v] = old;
                uf.parent[young] = old;
                if values[young] < values[v] {
                    pairs.push(PersistencePair { birth: values[young], death: values[v], essential: false });
                }
            }
            _ => unreachable!(),
        }
    }

    let global_min = order[0];
    let global_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    pairs.push(PersistencePair { birth: values[global_min], death: global_max, essential: true });
    Ok(PersistenceDiagram { pairs })
}

/// Uniform sample points shared by every landscape of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub t_min: f64,
    pub t_max: f64,
    pub size: usize,
}

impl LandscapeGrid {
    pub fn new(t_min: f64, t_max: f64, size: usize) -> Result<Self, TopologyError> {
        if size < 2 {
            return Err(TopologyError::GridTooSmall(size));
        }
        let t_max = if t_max > t_min { t_max } else { t_min + 1.0 };
        Ok(LandscapeGrid { t_min, t_max, size })
    }

    /// Grid over `[min birth, max death]` of all diagrams. A degenerate span
    /// is widened to unit length.
    pub fn spanning<'a>(
        diagrams: impl IntoIterator<Item = &'a PersistenceDiagram>,
        size: usize,
    ) -> Result<Self, TopologyError> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in diagrams.into_iter().flat_map(|d| d.pairs.iter()) {
            lo = lo.min(p.birth);
            hi = hi.max(p.death);
        }
        if !lo.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        Self::new(lo, hi, size)
    }

    pub fn step(&self) -> f64 {
        (self.t_max - self.t_min) / (self.size - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        if i + 1 == self.size {
            self.t_max
        } else {
            self.t_min + i as f64 * self.step()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.size).map(|i| self.point(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersistenceLandscape {
    pub k_levels: usize,
    pub grid: LandscapeGrid,
    /// Row-major `k_levels x grid.size`.
    pub values: Vec<f64>,
}

impl PersistenceLandscape {
    pub fn level(&self, k: usize) -> &[f64] {
        let g = self.grid.size;
        &self.values[k * g..(k + 1) * g]
    }

    /// `lambda(k, t_i)` with 0-based level `k`.
    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.grid.size + i]
    }
}

/// Tent function of a birth-death pair.
#[inline]
pub fn tent(pair: &PersistencePair, t: f64) -> f64 {
    let mid = 0.5 * (pair.birth + pair.death);
    if t <= pair.birth || t >= pair.death {
        0.0
    } else if t <= mid {
        t - pair.birth
    } else {
        pair.death - t
    }
}

/// `lambda(k, t)` = k-th largest tent value at `t`, sampled on `grid`.
/// Levels beyond the number of pairs are zero.
pub fn landscape(
    diagram: &PersistenceDiagram,
    k_levels: usize,
    grid: &LandscapeGrid,
) -> Result<PersistenceLandscape, TopologyError> {
    if k_levels == 0 {
        return Err(TopologyError::NoLevels);
    }
    if grid.size < 2 {
        return Err(TopologyError::GridTooSmall(grid.size));
    }
    let g = grid.size;
    let mut values = vec![0.0; k_levels * g];
    let mut top = vec![0.0f64; k_levels];
    for i in 0..g {
        let t = grid.point(i);
        top.iter_mut().for_each(|v| *v = 0.0);
        for pair in &diagram.pairs {
            let h = tent(pair, t);
            if h > top[k_levels - 1] {
                // insertion into the descending top-k buffer
                let mut j = k_levels - 1;
                while j > 0 && top[j - 1] < h {
                    top[j] = top[j - 1];
                    j -= 1;
                }
                top[j] = h;
            }
        }
        for (k, &v) in top.iter().enumerate() {
            values[k * g + i] = v;
        }
    }
    Ok(PersistenceLandscape { k_levels, grid: *grid, values })
}

/// Row-major flattening of the sampled landscape.
pub fn landscape_vector(landscape: &PersistenceLandscape) -> Vec<f64> {
    landscape.values.clone()
}

/// Discretized L2 distance: Euclidean norm of the difference times sqrt(step).
pub fn landscape_distance(a: &PersistenceLandscape, b: &PersistenceLandscape) -> Result<f64, TopologyError> {
    if a.k_levels != b.k_levels || a.grid != b.grid {
        return Err(TopologyError::GridMismatch);
    }
    Ok(vector_distance(&a.values, &b.values, a.grid.step()))
}

pub(crate) fn vector_distance(a: &[f64], b: &[f64], step: f64) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq * step).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(b: f64, d: f64) -> PersistencePair {
        PersistencePair { birth: b, death: d, essential: false }
    }

    fn sorted(d: &PersistenceDiagram) -> Vec<(f64, f64, bool)> {
        let mut v: Vec<_> = d.pairs.iter().map(|p| (p.birth, p.death, p.essential)).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn profile_drops_dc_and_scales() {
        let s = WalshSpectrum { coefficients: vec![4.0, 0.0, 0.0, 0.0], t2: 4, original_length: 4 };
        assert_eq!(spectrum_profile(&s), vec![0.0, 0.0, 0.0]);
        let s = WalshSpectrum { coefficients: vec![0.0, 4.0, 0.0, 0.0], t2: 4, original_length: 4 };
        assert_eq!(spectrum_profile(&s), vec![1.0, 0.0, 0.0]);
        let s = WalshSpectrum { coefficients: vec![0.0, -4.0, 2.0, 0.0], t2: 4, original_length: 4 };
        assert_eq!(spectrum_profile(&s), vec![1.0, 0.5, 0.0]);
    }

    #[test]
    fn diagram_examples() {
        let d = sublevel_persistence(&[0.0, 2.0, 1.0, 3.0]).unwrap();
        assert_eq!(sorted(&d), vec![(0.0, 3.0, true), (1.0, 2.0, false)]);

        let d = sublevel_persistence(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(sorted(&d), vec![(1.0, 4.0, true)]);

        let d = sublevel_persistence(&[1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(sorted(&d), vec![(0.0, 1.0, false), (0.0, 1.0, true)]);

        let d = sublevel_persistence(&[5.0]).unwrap();
        assert_eq!(sorted(&d), vec![(5.0, 5.0, true)]);

        assert_eq!(sublevel_persistence(&[]), Err(TopologyError::Empty));
    }

    #[test]
    fn plateau_birth_leaves_no_zero_pair() {
        let d = sublevel_persistence(&[1.0, 1.0, 0.0]).unwrap();
        assert_eq!(sorted(&d), vec![(0.0, 1.0, true)]);
    }

    #[test]
    fn equal_minima_keep_leftmost_as_essential() {
        let d = sublevel_persistence(&[0.0, 3.0, 0.0]).unwrap();
        assert_eq!(sorted(&d), vec![(0.0, 3.0, false), (0.0, 3.0, true)]);
    }

    #[test]
    fn single_tent() {
        let dgm = PersistenceDiagram { pairs: vec![pair(0.0, 2.0)] };
        let grid = LandscapeGrid::new(0.0, 2.0, 5).unwrap();
        let l = landscape(&dgm, 2, &grid).unwrap();
        assert_eq!(l.level(0), &[0.0, 0.5, 1.0, 0.5, 0.0]);
        assert_eq!(l.level(1), &[0.0; 5]);
    }

    #[test]
    fn two_tents_cross() {
        let dgm = PersistenceDiagram { pairs: vec![pair(0.0, 2.0), pair(1.0, 3.0)] };
        let grid = LandscapeGrid::new(0.0, 3.0, 7).unwrap();
        let l = landscape(&dgm, 3, &grid).unwrap();
        // t = 1.5 is grid index 3
        assert!((l.get(0, 3) - 0.5).abs() < 1e-12);
        assert!((l.get(1, 3) - 0.5).abs() < 1e-12);
        assert_eq!(l.get(2, 3), 0.0);
    }

    #[test]
    fn landscape_arguments_checked() {
        let dgm = PersistenceDiagram::default();
        let grid = LandscapeGrid::new(0.0, 1.0, 4).unwrap();
        assert_eq!(landscape(&dgm, 0, &grid), Err(TopologyError::NoLevels));
        assert_eq!(LandscapeGrid::new(0.0, 1.0, 1), Err(TopologyError::GridTooSmall(1)));
        let zero = landscape(&dgm, 2, &grid).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flatten_is_row_major() {
        let grid = LandscapeGrid::new(0.0, 2.0, 3).unwrap();
        let l = PersistenceLandscape { k_levels: 1, grid, values: vec![0.0, 1.0, 0.0] };
        assert_eq!(landscape_vector(&l), vec![0.0, 1.0, 0.0]);
        let dgm = PersistenceDiagram { pairs: vec![pair(0.0, 2.0), pair(0.5, 1.5)] };
        let l = landscape(&dgm, 2, &grid).unwrap();
        assert_eq!(landscape_vector(&l), vec![0.0, 1.0, 0.0, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn distance_to_single_tent() {
        let grid = LandscapeGrid::new(0.0, 2.0, 3).unwrap();
        let tent = landscape(&PersistenceDiagram { pairs: vec![pair(0.0, 2.0)] }, 1, &grid).unwrap();
        let zero = landscape(&PersistenceDiagram::default(), 1, &grid).unwrap();
        assert_eq!(landscape_distance(&zero, &tent).unwrap(), 1.0);
        assert_eq!(landscape_distance(&tent, &tent).unwrap(), 0.0);
        let other = landscape(&PersistenceDiagram::default(), 2, &grid).unwrap();
        assert_eq!(landscape_distance(&zero, &other), Err(TopologyError::GridMismatch));
    }

    #[test]
    fn spanning_grid() {
        let a = PersistenceDiagram { pairs: vec![pair(0.2, 0.9)] };
        let b = PersistenceDiagram { pairs: vec![pair(0.1, 0.5)] };
        let g = LandscapeGrid::spanning([&a, &b], 10).unwrap();
        assert_eq!((g.t_min, g.t_max), (0.1, 0.9));
        let flat = PersistenceDiagram { pairs: vec![PersistencePair { birth: 0.0, death: 0.0, essential: true }] };
        let g = LandscapeGrid::spanning([&flat], 10).unwrap();
        assert_eq!((g.t_min, g.t_max), (0.0, 1.0));
    }

    proptest! {
        #[test]
        fn distance_symmetric(
            a in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..10),
            b in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..10),
        ) {
            let mk = |v: &Vec<(f64, f64)>| PersistenceDiagram {
                pairs: v.iter().map(|&(x, y)| pair(x.min(y), x.max(y))).collect(),
            };
            let grid = LandscapeGrid::new(0.0, 1.0, 16).unwrap();
            let la = landscape(&mk(&a), 3, &grid).unwrap();
            let lb = landscape(&mk(&b), 3, &grid).unwrap();
            prop_assert_eq!(landscape_distance(&la, &lb).unwrap(), landscape_distance(&lb, &la).unwrap());
        }

        #[test]
        fn small_perturbation_moves_landscape_a_little(
            values in proptest::collection::vec(0.0f64..1.0, 1..48),
            noise in proptest::collection::vec(-0.01f64..0.01, 48),
        ) {
            let eps = noise.iter().take(values.len()).fold(0.0f64, |m, v| m.max(v.abs()));
            let moved: Vec<f64> = values.iter().zip(&noise).map(|(v, n)| v + n).collect();
            let da = sublevel_persistence(&values).unwrap();
            let db = sublevel_persistence(&moved).unwrap();
            let grid = LandscapeGrid::new(-0.05, 1.05, 64).unwrap();
            let la = landscape(&da, 5, &grid).unwrap();
            let lb = landscape(&db, 5, &grid).unwrap();
            let sup = la.values.iter().zip(&lb.values).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            prop_assert!(sup <= eps + grid.step() + 1e-12, "sup {} eps {}", sup, eps);
        }
    }
}
