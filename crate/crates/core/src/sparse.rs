//! Compressed sparse row matrices.

use crate::scalar::Real;
use faer::{Mat, MatRef};
use std::collections::BTreeMap;
use std::io::{self, Write};

#[derive(Clone, Debug, PartialEq)]
pub struct Csr<T> {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> Csr<T> {
    /// Builds from `(row, col, value)` triplets; duplicates are summed in
    /// input order, so the result is deterministic.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, T)]) -> Self {
        let mut rows: Vec<BTreeMap<usize, T>> = vec![BTreeMap::new(); nrows];
        for &(i, j, v) in triplets {
            assert!(i < nrows && j < ncols, "triplet ({i}, {j}) out of bounds");
            let e = rows[i].entry(j).or_insert(T::zero());
            *e += v;
        }
        Self::from_rows(nrows, ncols, rows)
    }

    fn from_rows(nrows: usize, ncols: usize, rows: Vec<BTreeMap<usize, T>>) -> Self {
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for (j, v) in row {
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Csr { nrows, ncols, indptr, indices, values }
    }

    pub fn identity(n: usize) -> Self {
        Csr {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![T::one(); n],
        }
    }

    pub fn diagonal(d: &[T]) -> Self {
        let n = d.len();
        Csr { nrows: n, ncols: n, indptr: (0..=n).collect(), indices: (0..n).collect(), values: d.to_vec() }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        let r = self.indptr[i]..self.indptr[i + 1];
        match self.indices[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => T::zero(),
        }
    }

    pub fn triplets(&self) -> Vec<(usize, usize, T)> {
        (0..self.nrows).flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v))).collect()
    }

    pub fn matvec(&self, x: &[T], y: &mut [T]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = T::zero();
            for k in self.indptr[i]..self.indptr[i + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            *yi = acc;
        }
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.nrows];
        self.matvec(x, &mut y);
        y
    }

    /// `A^T x`
    pub fn mul_t_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![T::zero(); self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            for k in self.indptr[i]..self.indptr[i + 1] {
                y[self.indices[k]] += self.values[k] * xi;
            }
        }
        y
    }

    /// Sparse times dense.
    pub fn mul_dense(&self, b: MatRef<'_, T>) -> Mat<T> {
        assert_eq!(b.nrows(), self.ncols);
        let mut out = Mat::zeros(self.nrows, b.ncols());
        for c in 0..b.ncols() {
            let col = b.col(c);
            for i in 0..self.nrows {
                let mut acc = T::zero();
                for k in self.indptr[i]..self.indptr[i + 1] {
                    acc += self.values[k] * col[self.indices[k]];
                }
                out[(i, c)] = acc;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut rows: Vec<BTreeMap<usize, T>> = vec![BTreeMap::new(); self.ncols];
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                rows[j].insert(i, v);
            }
        }
        Self::from_rows(self.ncols, self.nrows, rows)
    }

    /// Sparse product `self * rhs`.
    pub fn mul(&self, rhs: &Csr<T>) -> Self {
        assert_eq!(self.ncols, rhs.nrows);
        let mut rows = Vec::with_capacity(self.nrows);
        for i in 0..self.nrows {
            let mut acc: BTreeMap<usize, T> = BTreeMap::new();
            for (k, a) in self.row(i) {
                for (j, b) in rhs.row(k) {
                    let e = acc.entry(j).or_insert(T::zero());
                    *e += a * b;
                }
            }
            rows.push(acc);
        }
        Self::from_rows(self.nrows, rhs.ncols, rows)
    }

    /// `alpha * self + beta * rhs`
    pub fn combine(&self, alpha: T, rhs: &Csr<T>, beta: T) -> Self {
        assert_eq!((self.nrows, self.ncols), (rhs.nrows, rhs.ncols));
        let mut rows = Vec::with_capacity(self.nrows);
        for i in 0..self.nrows {
            let mut acc: BTreeMap<usize, T> = BTreeMap::new();
            for (j, v) in self.row(i) {
                acc.insert(j, alpha * v);
            }
            for (j, v) in rhs.row(i) {
                let e = acc.entry(j).or_insert(T::zero());
                *e += beta * v;
            }
            rows.push(acc);
        }
        Self::from_rows(self.nrows, self.ncols, rows)
    }

    /// `diag(left) * self * diag(right)`
    pub fn scale_rows_cols(&self, left: &[T], right: &[T]) -> Self {
        let mut out = self.clone();
        for i in 0..self.nrows {
            for k in self.indptr[i]..self.indptr[i + 1] {
                out.values[k] = left[i] * self.values[k] * right[self.indices[k]];
            }
        }
        out
    }

    /// Keeps the listed rows and columns, in the given order.
    pub fn restrict(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut col_map = vec![usize::MAX; self.ncols];
        for (new, &old) in cols.iter().enumerate() {
            col_map[old] = new;
        }
        let out_rows = rows
            .iter()
            .map(|&i| {
                self.row(i)
                    .filter(|&(j, _)| col_map[j] != usize::MAX)
                    .map(|(j, v)| (col_map[j], v))
                    .collect::<BTreeMap<_, _>>()
            })
            .collect();
        Self::from_rows(rows.len(), cols.len(), out_rows)
    }

    pub fn to_dense(&self) -> Mat<T> {
        let mut m = Mat::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// `max |A_ij - sign * A_ji|`; `sign = 1` measures asymmetry, `-1` measures
    /// departure from antisymmetry.
    pub fn symmetry_defect(&self, sign: T) -> T {
        let mut worst = T::zero();
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                worst = worst.max((v - sign * self.get(j, i)).abs());
            }
        }
        worst
    }

    /// Gershgorin bound on the spectral radius.
    pub fn gershgorin_bound(&self) -> T {
        (0..self.nrows)
            .map(|i| self.row(i).fold(T::zero(), |acc, (_, v)| acc + v.abs()))
            .fold(T::zero(), T::max)
    }

    /// Text dump: a `rows cols nnz` header, then one `row col value` line per entry.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for (i, j, v) in self.triplets() {
            writeln!(w, "{} {} {:.17e}", i, j, v.f64())?;
        }
        Ok(())
    }
}

/// Accumulates entries of a symmetric (or antisymmetric) matrix by their
/// upper-triangle key, so the mirrored entries are bitwise equal.
pub struct PairAssembler<T> {
    n: usize,
    antisymmetric: bool,
    entries: BTreeMap<(usize, usize), T>,
}

impl<T: Real> PairAssembler<T> {
    pub fn symmetric(n: usize) -> Self {
        PairAssembler { n, antisymmetric: false, entries: BTreeMap::new() }
    }

    pub fn antisymmetric(n: usize) -> Self {
        PairAssembler { n, antisymmetric: true, entries: BTreeMap::new() }
    }

    /// Adds `v` to entry `(i, j)` and the mirrored value to `(j, i)`.
    /// On the diagonal the value is added once.
    pub fn add(&mut self, i: usize, j: usize, v: T) {
        let (key, v) = if i <= j {
            ((i, j), v)
        } else if self.antisymmetric {
            ((j, i), -v)
        } else {
            ((j, i), v)
        };
        let e = self.entries.entry(key).or_insert(T::zero());
        *e += v;
    }

    pub fn finish(self) -> Csr<T> {
        let mut rows: Vec<BTreeMap<usize, T>> = vec![BTreeMap::new(); self.n];
        for ((i, j), v) in self.entries {
            if i == j {
                if !self.antisymmetric {
                    rows[i].insert(j, v);
                }
            } else {
                rows[i].insert(j, v);
                rows[j].insert(i, if self.antisymmetric { -v } else { v });
            }
        }
        Csr::from_rows(self.n, self.n, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates() {
        let a = Csr::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, -1.0)]);
        assert_eq!(a.get(0, 0), 3.0);
        assert_eq!(a.get(1, 0), -1.0);
        assert_eq!(a.get(1, 1), 0.0);
        assert_eq!(a.nnz(), 2);
    }

    #[test]
    fn product_matches_dense() {
        let a = Csr::from_triplets(2, 3, &[(0, 0, 1.0), (0, 2, 2.0), (1, 1, 3.0)]);
        let b = Csr::from_triplets(3, 2, &[(0, 1, 4.0), (1, 0, 5.0), (2, 0, 6.0)]);
        let c = a.mul(&b).to_dense();
        let d = &a.to_dense() * &b.to_dense();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(c[(i, j)], d[(i, j)]);
            }
        }
    }

    #[test]
    fn assembler_mirrors_bitwise() {
        let mut s = PairAssembler::symmetric(3);
        s.add(0, 1, 0.1);
        s.add(1, 0, 0.2);
        s.add(2, 2, 1.0);
        let m = s.finish();
        assert_eq!(m.get(0, 1), m.get(1, 0));
        assert_eq!(m.symmetry_defect(1.0), 0.0);
        let mut a = PairAssembler::antisymmetric(3);
        a.add(0, 2, 0.7);
        a.add(2, 1, 0.3);
        let m = a.finish();
        assert_eq!(m.get(2, 0), -0.7);
        assert_eq!(m.get(1, 2), -0.3);
        assert_eq!(m.symmetry_defect(-1.0), 0.0);
    }

    #[test]
    fn triplet_dump_header() {
        let a = Csr::from_triplets(3, 3, &[(0, 0, 2.0), (2, 1, -1.0)]);
        let mut buf = Vec::new();
        a.write_triplets(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("3 3 2"));
        assert!(lines.next().unwrap().starts_with("0 0 2.0"));
    }
}
