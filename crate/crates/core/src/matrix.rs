use std::io::Write;

use thiserror::Error;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MatrixError {
    #[error("{ids} ids but {len} entries; expected ids^2")]
    Shape { ids: usize, len: usize },
    #[error("entry ({0}, {1}) is negative or not finite")]
    BadEntry(usize, usize),
    #[error("diagonal entry {0} is not zero")]
    Diagonal(usize),
    #[error("entries ({0}, {1}) and ({1}, {0}) differ")]
    Asymmetric(usize, usize),
    #[error("matrices describe different items")]
    IdMismatch,
}

/// Symmetric, non-negative, zero-diagonal pairwise dissimilarities over
/// identified items.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    ids: Vec<String>,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(ids: Vec<String>, data: Vec<f64>) -> Result<Self, MatrixError> {
        let n = ids.len();
        if data.len() != n * n {
            return Err(MatrixError::Shape { ids: n, len: data.len() });
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(MatrixError::Diagonal(i));
            }
            for j in 0..n {
                let v = data[i * n + j];
                if !(v.is_finite() && v >= 0.0) {
                    return Err(MatrixError::BadEntry(i, j));
                }
                if j > i && (v - data[j * n + i]).abs() > SYMMETRY_TOL {
                    return Err(MatrixError::Asymmetric(i, j));
                }
            }
        }
        Ok(DistanceMatrix { ids, data })
    }

    /// Build from a distance function evaluated on the upper triangle.
    pub fn from_fn(ids: Vec<String>, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self, MatrixError> {
        let n = ids.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = f(i, j);
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        Self::new(ids, data)
    }

    /// Items labelled `0..n`.
    pub fn anonymous(n: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self, MatrixError> {
        Self::from_fn((0..n).map(|i| i.to_string()).collect(), f)
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.ids.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.ids.len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Divide by the largest entry; a zero matrix stays zero.
    pub fn max_normalized(&self) -> DistanceMatrix {
        let m = self.max();
        if m == 0.0 {
            return self.clone();
        }
        DistanceMatrix { ids: self.ids.clone(), data: self.data.iter().map(|v| v / m).collect() }
    }

    /// Keep only the listed items, in the given order.
    pub fn subset(&self, keep: &[usize]) -> DistanceMatrix {
        let ids = keep.iter().map(|&i| self.ids[i].clone()).collect();
        let data = keep.iter().flat_map(|&i| keep.iter().map(move |&j| (i, j))).map(|(i, j)| self.get(i, j)).collect();
        DistanceMatrix { ids, data }
    }

    /// CSV with a `pid` header row and one row per item.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(out);
        write!(w, "pid")?;
        for id in &self.ids {
            write!(w, ",{id}")?;
        }
        writeln!(w)?;
        for (i, id) in self.ids.iter().enumerate() {
            write!(w, "{id}")?;
            for v in self.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    }
}
