//! Sparse storage and a profile (skyline) Cholesky factorization for the
//! symmetric positive definite systems produced by structured plate meshes.
//!
//! Matrices are stored in CSR form with both triangles present. The factor
//! keeps, for every row, the contiguous band from the first structurally
//! nonzero column up to the diagonal; Cholesky fill never leaves that
//! profile, so the factorization needs no symbolic phase.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Square sparse matrix in compressed sparse row layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            row_ptr: vec![0; n + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds the matrix from `(row, col, value)` triplets. Duplicates are summed
    /// in insertion order, so identical triplet streams give identical bits.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&k| (triplets[k].0, triplets[k].1));

        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for k in order {
            let (r, c, v) = triplets[k];
            assert!(r < n && c < n, "triplet ({r}, {c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                row_ptr[r + 1] += 1;
                col_idx.push(c);
                values.push(v);
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// True if `(i, j)` is a stored entry (zero-valued entries included).
    pub fn has_entry(&self, i: usize, j: usize) -> bool {
        self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
            .binary_search(&j)
            .is_ok()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| x[i] * self.row(i).map(|(j, v)| v * x[j]).sum::<f64>())
            .sum()
    }

    pub fn bilinear_form(&self, x: &[f64], y: &[f64]) -> f64 {
        self.mul_vec(y).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    /// Replaces each pair `(i, j)`, `(j, i)` with their mean. Pairs with a
    /// missing mirror entry are left untouched.
    pub fn symmetrize(&mut self) {
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                if j <= i {
                    continue;
                }
                let range = self.row_ptr[j]..self.row_ptr[j + 1];
                if let Ok(m) = self.col_idx[range.clone()].binary_search(&i) {
                    let mirror = range.start + m;
                    let mean = 0.5 * (self.values[k] + self.values[mirror]);
                    self.values[k] = mean;
                    self.values[mirror] = mean;
                }
            }
        }
    }

    pub fn max_asymmetry(&self) -> f64 {
        self.entries()
            .map(|(i, j, v)| (v - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.entries() {
            m[(i, j)] = v;
        }
        m
    }

    /// Coordinate text dump, one `row col value` line per stored entry.
    pub fn write_coordinate<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "% {} {} {}", self.n, self.n, self.nnz())?;
        for (i, j, v) in self.entries() {
            writeln!(out, "{i} {j} {v:e}")?;
        }
        Ok(())
    }
}

/// Lower-triangular Cholesky factor `A = L Lᵀ` in row-profile storage.
#[derive(Debug, Clone)]
pub struct SkylineCholesky {
    n: usize,
    first_col: Vec<usize>,
    row_start: Vec<usize>,
    data: Vec<f64>,
}

/// Pivots below this fraction of the original diagonal are treated as a
/// loss of positive definiteness.
const PIVOT_TOLERANCE: f64 = 1e-12;

impl SkylineCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.dim();
        if n == 0 {
            return Err(Error::EmptySystem);
        }
        let first_col: Vec<usize> = (0..n)
            .map(|i| {
                a.row(i)
                    .map(|(j, _)| j)
                    .filter(|&j| j <= i)
                    .min()
                    .unwrap_or(i)
            })
            .collect();
        let mut row_start = Vec::with_capacity(n + 1);
        let mut total = 0;
        for i in 0..n {
            row_start.push(total);
            total += i - first_col[i] + 1;
        }
        row_start.push(total);
        let mut data = vec![0.0; total];
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    data[row_start[i] + j - first_col[i]] = v;
                }
            }
        }

        for i in 0..n {
            let fi = first_col[i];
            let ri = row_start[i];
            for j in fi..i {
                let fj = first_col[j];
                let rj = row_start[j];
                let start = fi.max(fj);
                let mut s = data[ri + j - fi];
                for k in start..j {
                    s -= data[ri + k - fi] * data[rj + k - fj];
                }
                data[ri + j - fi] = s / data[rj + j - fj];
            }
            let original = data[ri + i - fi];
            let mut d = original;
            for k in fi..i {
                let l = data[ri + k - fi];
                d -= l * l;
            }
            if !(d > PIVOT_TOLERANCE * original.abs()) || !d.is_finite() {
                return Err(Error::SingularSystem { pivot: i });
            }
            data[ri + i - fi] = d.sqrt();
        }
        Ok(Self {
            n,
            first_col,
            row_start,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored factor entries.
    pub fn profile_len(&self) -> usize {
        self.data.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        // L y = b
        for i in 0..self.n {
            let fi = self.first_col[i];
            let ri = self.row_start[i];
            let mut s = x[i];
            for k in fi..i {
                s -= self.data[ri + k - fi] * x[k];
            }
            x[i] = s / self.data[ri + i - fi];
        }
        // Lᵀ x = y, column sweep over the row-stored factor
        for i in (0..self.n).rev() {
            let fi = self.first_col[i];
            let ri = self.row_start[i];
            x[i] /= self.data[ri + i - fi];
            let xi = x[i];
            for k in fi..i {
                x[k] -= self.data[ri + k - fi] * xi;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
