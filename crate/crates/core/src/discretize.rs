//! Truncated grid and assembled lattice operators.
//!
//! Nodes sit at `-L + i h`, `i = 0..N`, with homogeneous Dirichlet values on a
//! ghost layer just outside the box. Axis 0 varies fastest in the flattened
//! index.

use crate::metric::MetricField;
use crate::scalar::Real;
use crate::sparse::{Csr, PairAssembler};
use std::collections::HashMap;
use std::io::{self, Write};
use std::sync::{Arc, Mutex, OnceLock};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscretizeError {
    #[error("unsupported dimension {0}; only 1, 2 and 3 are available")]
    UnsupportedDimension(usize),
    #[error("need at least {min} points per axis, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("half width must be positive, got {0}")]
    BadHalfWidth(f64),
    #[error("metric dimension {metric} does not match grid dimension {grid}")]
    DimensionMismatch { metric: usize, grid: usize },
    #[error("coefficient is singular at {0:?}")]
    SingularCoefficient(Vec<f64>),
}

pub const MIN_POINTS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    dim: usize,
    n: usize,
    half_width: T,
    spacing: T,
}

pub fn build_grid<T: Real>(d: usize, n: usize, half_width: T) -> Result<Grid<T>, DiscretizeError> {
    if !(1..=3).contains(&d) {
        return Err(DiscretizeError::UnsupportedDimension(d));
    }
    if n < MIN_POINTS {
        return Err(DiscretizeError::TooFewPoints { min: MIN_POINTS, got: n });
    }
    if !(half_width > T::zero()) || !half_width.is_finite() {
        return Err(DiscretizeError::BadHalfWidth(half_width.f64()));
    }
    let spacing = T::lit(2.0) * half_width / T::of(n - 1);
    Ok(Grid { dim: d, n, half_width, spacing })
}

impl<T: Real> Grid<T> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    pub fn half_width(&self) -> T {
        self.half_width
    }

    pub fn spacing(&self) -> T {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Coordinate of lattice position `i` (may lie outside `0..N`).
    #[inline]
    pub fn coord_of(&self, i: isize) -> T {
        -self.half_width + T::lit(i as f64) * self.spacing
    }

    pub fn multi_index(&self, idx: usize) -> [usize; 3] {
        let mut out = [0; 3];
        let mut r = idx;
        for slot in out.iter_mut().take(self.dim) {
            *slot = r % self.n;
            r /= self.n;
        }
        out
    }

    pub fn flat_index(&self, mi: &[usize]) -> usize {
        mi.iter().take(self.dim).rev().fold(0, |acc, &i| acc * self.n + i)
    }

    pub fn point(&self, idx: usize) -> Vec<T> {
        let mi = self.multi_index(idx);
        (0..self.dim).map(|a| self.coord_of(mi[a] as isize)).collect()
    }

    pub fn coord(&self, idx: usize, axis: usize) -> T {
        self.coord_of(self.multi_index(idx)[axis] as isize)
    }

    pub fn radius(&self, idx: usize) -> T {
        self.point(idx).iter().fold(T::zero(), |a, &v| a + v * v).sqrt()
    }

    /// Node shifted by `step` along `axis`, if it stays inside the grid.
    pub fn shifted(&self, idx: usize, axis: usize, step: isize) -> Option<usize> {
        let mut mi = self.multi_index(idx);
        let v = mi[axis] as isize + step;
        if v < 0 || v >= self.n as isize {
            return None;
        }
        mi[axis] = v as usize;
        Some(self.flat_index(&mi))
    }

    /// Number of edges along `axis`, including the two boundary edges that
    /// touch the ghost layer.
    pub fn edge_count(&self) -> usize {
        (self.n + 1) * self.n.pow(self.dim as u32 - 1)
    }

    /// Edge `e` along `axis` joins lattice positions `k - 1` and `k`, where `k`
    /// is the axis component of its index; the other components are nodal.
    pub fn edge_index(&self, node_mi: &[usize], axis: usize, k: usize) -> usize {
        let mut acc = 0;
        for a in (0..self.dim).rev() {
            let (len, v) = if a == axis { (self.n + 1, k) } else { (self.n, node_mi[a]) };
            acc = acc * len + v;
        }
        acc
    }

    pub fn edge_midpoint(&self, e: usize, axis: usize) -> Vec<T> {
        let mut r = e;
        let mut x = vec![T::zero(); self.dim];
        for (a, xa) in x.iter_mut().enumerate() {
            let len = if a == axis { self.n + 1 } else { self.n };
            let v = r % len;
            r /= len;
            *xa = if a == axis {
                self.coord_of(v as isize) - self.spacing / T::lit(2.0)
            } else {
                self.coord_of(v as isize)
            };
        }
        x
    }

    /// Grid with one extra layer of nodes on every side and the same spacing.
    pub fn extended(&self) -> Grid<T> {
        Grid { dim: self.dim, n: self.n + 2, half_width: self.half_width + self.spacing, spacing: self.spacing }
    }

    /// Volume element `h^d`.
    pub fn cell_volume(&self) -> T {
        self.spacing.powi(self.dim as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operator {
    P,
    P0,
    Ptilde,
}

/// Assembled lattice operators for one metric on one grid.
pub struct DiscreteModel<T> {
    pub grid: Grid<T>,
    pub metric: MetricField<T>,
    /// Conformally transformed operator `g^-1 Ptilde g^-1`.
    pub p: Csr<T>,
    /// Flat Dirichlet Laplacian.
    pub p0: Csr<T>,
    pub ptilde: Csr<T>,
    /// Conformal factor at the nodes.
    pub conformal: Vec<T>,
    /// Forward edge differences of `g^-1 u`, one matrix per axis (edges x nodes).
    pub dtilde: Vec<Csr<T>>,
    /// Forward edge differences without the conformal factor.
    pub dforward: Vec<Csr<T>>,
    /// Centered node-to-node derivatives of `u`.
    pub dcentered: Vec<Csr<T>>,
    /// Centered node-to-node derivatives of `g^-1 u`.
    pub dcentered_tilde: Vec<Csr<T>>,
    /// Rotation fields `x_k ∂_l - x_l ∂_k` for `k < l`.
    pub rot: Vec<((usize, usize), Csr<T>)>,
    /// Rotation fields built from the centered `g^-1`-derivative.
    pub rot_tilde: Vec<((usize, usize), Csr<T>)>,
    /// Real antisymmetric `S` with dilation generator `A0 = -i S`.
    pub dilation: Csr<T>,
    c_max: T,
    weights: Mutex<HashMap<u64, Arc<Vec<T>>>>,
    commutator: OnceLock<Csr<T>>,
}

impl<T: Real> std::fmt::Debug for DiscreteModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiscreteModel").field("grid", &self.grid).field("metric", &self.metric).finish()
    }
}

struct Assembled<T> {
    p: Csr<T>,
    ptilde: Csr<T>,
    conformal: Vec<T>,
}

fn assemble_p<T: Real>(m: &MetricField<T>, grid: &Grid<T>) -> Result<Assembled<T>, DiscretizeError> {
    let d = grid.dim();
    let n_nodes = grid.len();
    let h = grid.spacing();
    let h2 = h * h;
    let coeff = |x: &[T]| -> Result<Vec<T>, DiscretizeError> {
        let sing = || DiscretizeError::SingularCoefficient(x.iter().map(|v| v.f64()).collect());
        let g = m.conformal_factor(x).filter(|g| *g > T::zero()).ok_or_else(sing)?;
        let ginv = m.inverse(x).ok_or_else(sing)?;
        Ok(ginv.into_iter().map(|v| g * g * v).collect())
    };
    let mut conformal = Vec::with_capacity(n_nodes);
    for idx in 0..n_nodes {
        let x = grid.point(idx);
        let g = m
            .conformal_factor(&x)
            .filter(|g| *g > T::zero())
            .ok_or_else(|| DiscretizeError::SingularCoefficient(x.iter().map(|v| v.f64()).collect()))?;
        conformal.push(g);
    }

    let mut asm = PairAssembler::symmetric(n_nodes);
    for axis in 0..d {
        for idx in 0..n_nodes {
            let mi = grid.multi_index(idx);
            // edge on the low side of this node, plus the far boundary edge
            let ks: &[usize] = if mi[axis] + 1 == grid.points_per_axis() { &[0, 1] } else { &[0] };
            for &off in ks {
                let k = mi[axis] + off;
                let e = grid.edge_index(&mi, axis, k);
                let a = coeff(&grid.edge_midpoint(e, axis))?;
                let w = a[axis * d + axis] / h2;
                let lo = if k == 0 { None } else { grid.shifted(idx, axis, off as isize - 1) };
                let hi = if off == 1 { None } else { Some(idx) };
                if let Some(p) = lo {
                    asm.add(p, p, w);
                }
                if let Some(q) = hi {
                    asm.add(q, q, w);
                }
                if let (Some(p), Some(q)) = (lo, hi) {
                    asm.add(p, q, -w);
                }
            }
        }
    }
    if d > 1 {
        let quarter = T::lit(0.25) / h2;
        for idx in 0..n_nodes {
            let a = coeff(&grid.point(idx))?;
            for j in 0..d {
                for k in (j + 1)..d {
                    let w = a[j * d + k];
                    if w == T::zero() {
                        continue;
                    }
                    for s in [-1isize, 1] {
                        for t in [-1isize, 1] {
                            let (Some(p), Some(q)) = (grid.shifted(idx, j, s), grid.shifted(idx, k, t)) else { continue };
                            asm.add(p, q, T::lit((s * t) as f64) * w * quarter);
                        }
                    }
                }
            }
        }
    }
    let ptilde = asm.finish();
    let ginv: Vec<T> = conformal.iter().map(|g| g.recip()).collect();
    let trip: Vec<(usize, usize, T)> = ptilde
        .triplets()
        .into_iter()
        .map(|(i, j, v)| (i, j, v * (ginv[i.min(j)] * ginv[i.max(j)])))
        .collect();
    let p = Csr::from_triplets(n_nodes, n_nodes, &trip);
    Ok(Assembled { p, ptilde, conformal })
}

fn flat_laplacian<T: Real>(grid: &Grid<T>) -> Csr<T> {
    let n_nodes = grid.len();
    let w = (grid.spacing() * grid.spacing()).recip();
    let mut asm = PairAssembler::symmetric(n_nodes);
    for axis in 0..grid.dim() {
        for idx in 0..n_nodes {
            asm.add(idx, idx, w + w);
            if let Some(q) = grid.shifted(idx, axis, 1) {
                asm.add(idx, q, -w);
            }
        }
    }
    asm.finish()
}

fn forward_differences<T: Real>(grid: &Grid<T>, scale: &[T]) -> Vec<Csr<T>> {
    let h = grid.spacing();
    (0..grid.dim())
        .map(|axis| {
            let mut trip = Vec::new();
            for idx in 0..grid.len() {
                let mi = grid.multi_index(idx);
                // node idx is the high end of edge k = mi and the low end of edge k = mi + 1
                let e_hi = grid.edge_index(&mi, axis, mi[axis]);
                trip.push((e_hi, idx, scale[idx] / h));
                let e_lo = grid.edge_index(&mi, axis, mi[axis] + 1);
                trip.push((e_lo, idx, -scale[idx] / h));
            }
            Csr::from_triplets(grid.edge_count(), grid.len(), &trip)
        })
        .collect()
}

fn centered_differences<T: Real>(grid: &Grid<T>, scale: &[T]) -> Vec<Csr<T>> {
    let c = (grid.spacing() + grid.spacing()).recip();
    (0..grid.dim())
        .map(|axis| {
            let mut trip = Vec::new();
            for idx in 0..grid.len() {
                if let Some(q) = grid.shifted(idx, axis, 1) {
                    trip.push((idx, q, c * scale[q]));
                }
                if let Some(q) = grid.shifted(idx, axis, -1) {
                    trip.push((idx, q, -c * scale[q]));
                }
            }
            Csr::from_triplets(grid.len(), grid.len(), &trip)
        })
        .collect()
}

fn rotations<T: Real>(grid: &Grid<T>, centered: &[Csr<T>]) -> Vec<((usize, usize), Csr<T>)> {
    let d = grid.dim();
    let coords: Vec<Vec<T>> = (0..d).map(|a| (0..grid.len()).map(|i| grid.coord(i, a)).collect()).collect();
    let ones = vec![T::one(); grid.len()];
    let mut out = Vec::new();
    for k in 0..d {
        for l in (k + 1)..d {
            let a = centered[l].scale_rows_cols(&coords[k], &ones);
            let b = centered[k].scale_rows_cols(&coords[l], &ones);
            out.push(((k, l), a.combine(T::one(), &b, -T::one())));
        }
    }
    out
}

/// `S = (X D_c + D_c X)/2` summed over axes.
fn dilation_matrix<T: Real>(grid: &Grid<T>) -> Csr<T> {
    let mut asm = PairAssembler::antisymmetric(grid.len());
    let four_h = T::lit(4.0) * grid.spacing();
    for axis in 0..grid.dim() {
        for idx in 0..grid.len() {
            if let Some(q) = grid.shifted(idx, axis, 1) {
                asm.add(idx, q, (grid.coord(idx, axis) + grid.coord(q, axis)) / four_h);
            }
        }
    }
    asm.finish()
}

pub fn assemble_dilation<T: Real>(grid: &Grid<T>) -> Csr<T> {
    dilation_matrix(grid)
}

pub fn assemble_operators<T: Real>(m: &MetricField<T>, grid: &Grid<T>) -> Result<DiscreteModel<T>, DiscretizeError> {
    if m.dim() != grid.dim() {
        return Err(DiscretizeError::DimensionMismatch { metric: m.dim(), grid: grid.dim() });
    }
    let Assembled { p, ptilde, conformal } = assemble_p(m, grid)?;
    let p0 = if m.is_flat() { p.clone() } else { flat_laplacian(grid) };
    let ginv: Vec<T> = conformal.iter().map(|g| g.recip()).collect();
    let ones = vec![T::one(); grid.len()];
    let dtilde = forward_differences(grid, &ginv);
    let dforward = forward_differences(grid, &ones);
    let dcentered = centered_differences(grid, &ones);
    let dcentered_tilde = centered_differences(grid, &ginv);
    let rot = rotations(grid, &dcentered);
    let rot_tilde = rotations(grid, &dcentered_tilde);
    let dilation = dilation_matrix(grid);
    let c_max = (0..grid.len()).map(|i| m.speed(&grid.point(i))).fold(T::zero(), T::max);
    Ok(DiscreteModel {
        grid: grid.clone(),
        metric: m.clone(),
        p,
        p0,
        ptilde,
        conformal,
        dtilde,
        dforward,
        dcentered,
        dcentered_tilde,
        rot,
        rot_tilde,
        dilation,
        c_max,
        weights: Mutex::new(HashMap::new()),
        commutator: OnceLock::new(),
    })
}

impl<T: Real> DiscreteModel<T> {
    pub fn operator(&self, which: Operator) -> &Csr<T> {
        match which {
            Operator::P => &self.p,
            Operator::P0 => &self.p0,
            Operator::Ptilde => &self.ptilde,
        }
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// Largest local propagation speed over the grid.
    pub fn c_max(&self) -> T {
        self.c_max
    }

    /// Longest time for which data supported in `|x| <= r_data` cannot reach
    /// the truncation boundary.
    pub fn causal_window(&self, r_data: T) -> T {
        (self.grid.half_width() - r_data) / self.c_max
    }

    /// `<x>^s` at the nodes (cached per exponent).
    pub fn weight(&self, s: T) -> Arc<Vec<T>> {
        let key = s.f64().to_bits();
        let mut cache = self.weights.lock().expect("weight cache poisoned");
        cache
            .entry(key)
            .or_insert_with(|| {
                Arc::new((0..self.grid.len()).map(|i| self.grid.radius(i).bracket().powf(s)).collect())
            })
            .clone()
    }

    /// `<x>^s` at the edge midpoints along `axis`.
    pub fn edge_weight(&self, axis: usize, s: T) -> Vec<T> {
        (0..self.grid.edge_count())
            .map(|e| {
                let x = self.grid.edge_midpoint(e, axis);
                x.iter().fold(T::zero(), |a, &v| a + v * v).sqrt().bracket().powf(s)
            })
            .collect()
    }

    /// Commutator `[P, S]` of the infinite lattice operators, compressed to
    /// the box. It is computed on a grid with one extra layer, which holds
    /// every node a box row or column can couple to.
    pub fn dilation_commutator(&self) -> &Csr<T> {
        self.commutator.get_or_init(|| {
            let ext = self.grid.extended();
            let pe = assemble_p(&self.metric, &ext).expect("metric was valid on the smaller box").p;
            let se = dilation_matrix(&ext);
            let c = pe.mul(&se).combine(T::one(), &se.mul(&pe), -T::one());
            let inner: Vec<usize> = (0..self.grid.len())
                .map(|i| {
                    let mi = self.grid.multi_index(i);
                    let shifted: Vec<usize> = (0..self.grid.dim()).map(|a| mi[a] + 1).collect();
                    ext.flat_index(&shifted)
                })
                .collect();
            let c = c.restrict(&inner, &inner);
            // symmetrize the rounding noise of the two products
            let t = c.transpose();
            c.combine(T::lit(0.5), &t, T::lit(0.5))
        })
    }

    pub fn dump_operator<W: Write>(&self, which: Operator, w: W) -> io::Result<()> {
        self.operator(which).write_triplets(w)
    }

    /// Discrete `L^2` norm including the volume element.
    pub fn l2(&self, v: &[T]) -> T {
        crate::linalg::norm(v) * self.grid.cell_volume().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{make_metric, MetricFamily};

    #[test]
    fn grid_examples() {
        let g = build_grid::<f64>(1, 9, 4.0).unwrap();
        assert_eq!(g.spacing(), 1.0);
        assert_eq!(g.point(0), vec![-4.0]);
        assert_eq!(g.point(8), vec![4.0]);
        let g = build_grid::<f64>(3, 16, 8.0).unwrap();
        assert_eq!(g.len(), 4096);
        assert!((g.spacing() - 16.0 / 15.0).abs() < 1e-15);
        assert_eq!(build_grid::<f64>(4, 8, 4.0), Err(DiscretizeError::UnsupportedDimension(4)));
    }

    #[test]
    fn index_roundtrip() {
        let g = build_grid::<f64>(3, 5, 1.0).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.flat_index(&g.multi_index(i)), i);
        }
        assert_eq!(g.shifted(0, 1, 1), Some(5));
        assert_eq!(g.shifted(0, 2, -1), None);
    }

    #[test]
    fn flat_one_dimensional_stencil() {
        let m = make_metric::<f64>(MetricFamily::Flat, 1, 2.0, 0.0).unwrap();
        let g = build_grid(1, 5, 2.0).unwrap();
        let model = assemble_operators(&m, &g).unwrap();
        let h2 = g.spacing() * g.spacing();
        for i in 0..5usize {
            for j in 0..5usize {
                let expect = match i.abs_diff(j) {
                    0 => 2.0 / h2,
                    1 => -1.0 / h2,
                    _ => 0.0,
                };
                assert_eq!(model.p.get(i, j), expect);
            }
        }
        assert_eq!(model.p, model.p0);
        assert_eq!(model.p, model.ptilde);
    }

    #[test]
    fn dilation_entries() {
        let g = build_grid::<f64>(1, 5, 2.0).unwrap();
        let s = assemble_dilation(&g);
        let h = g.spacing();
        for i in 0..4 {
            let expect = (g.coord(i, 0) + g.coord(i + 1, 0)) / (4.0 * h);
            assert_eq!(s.get(i, i + 1), expect);
            assert_eq!(s.get(i + 1, i), -expect);
        }
        assert_eq!(s.symmetry_defect(-1.0), 0.0);
    }

    #[test]
    fn forward_differences_reproduce_flat_laplacian() {
        let m = make_metric::<f64>(MetricFamily::Flat, 2, 2.0, 0.0).unwrap();
        let g = build_grid(2, 6, 2.0).unwrap();
        let model = assemble_operators(&m, &g).unwrap();
        let mut sum = model.dforward[0].transpose().mul(&model.dforward[0]);
        sum = sum.combine(1.0, &model.dforward[1].transpose().mul(&model.dforward[1]), 1.0);
        for i in 0..g.len() {
            for j in 0..g.len() {
                assert!((sum.get(i, j) - model.p0.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn anisotropic_assembly_is_symmetric() {
        let m = make_metric::<f64>(MetricFamily::AnisotropicBump, 3, 2.0, 0.3).unwrap();
        let g = build_grid(3, 6, 3.0).unwrap();
        let model = assemble_operators(&m, &g).unwrap();
        assert_eq!(model.p.symmetry_defect(1.0), 0.0);
        assert_eq!(model.ptilde.symmetry_defect(1.0), 0.0);
        assert!(model.p.nnz() > model.p0.nnz());
    }
}
