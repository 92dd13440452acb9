//! Variation-of-constants sums on a uniform grid.
//!
//! Bounded solutions of `z' = A(t) z + g(t)` split into a forward part living
//! in the range of `P` and a backward part living in the range of `Q`:
//!
//! ```text
//! forward:  w(t) = T(t, t0) w0 + ∫_{t0}^{t} T(t, τ) P(τ) g(τ) dτ
//! backward: w(t) = T(t, t1) w1 + ∫_{t}^{t1} T(t, τ) Q(τ) g(τ) dτ
//! ```
//!
//! Both are advanced one cell at a time with Simpson's rule on the cell, using
//! the cached one-cell propagators, so no long-span operator is ever formed.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dichotomy::ProjectionFamily;
use crate::error::{Error, Result};
use crate::evolution::EvolutionOperator;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformGrid {
    pub t0: f64,
    pub h: f64,
    /// Number of cells; nodes are `t0 + i h` for `i = 0..=n`.
    pub n: usize,
}

impl UniformGrid {
    pub fn new(t0: f64, t1: f64, h: f64) -> Result<Self> {
        if !(t1 > t0 && h > 0.0) {
            return Err(Error::InvalidParam(format!("bad grid [{t0}, {t1}] with step {h}")));
        }
        let n = ((t1 - t0) / h).round() as usize;
        if ((t0 + n as f64 * h) - t1).abs() > 1e-9 * h.max(1.0) {
            return Err(Error::InvalidParam(format!("step {h} does not divide [{t0}, {t1}]")));
        }
        Ok(UniformGrid { t0, h, n: n.max(1) })
    }

    pub fn node(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.h
    }

    pub fn mid(&self, i: usize) -> f64 {
        self.t0 + (i as f64 + 0.5) * self.h
    }

    pub fn end(&self) -> f64 {
        self.node(self.n)
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = (t - self.t0) / self.h;
        let i = x.round();
        if i < 0.0 || i > self.n as f64 || (x - i).abs() > 1e-7 {
            None
        } else {
            Some(i as usize)
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.node(i)).collect()
    }
}

/// One-cell propagators on a grid.
#[derive(Debug, Clone)]
pub struct CellPropagators {
    pub grid: UniformGrid,
    /// `T(t_{i+1}, t_i)`
    pub fwd: Vec<DMatrix<f64>>,
    /// `T(t_{i+1}, m_i)`
    pub fwd_mid: Vec<DMatrix<f64>>,
    /// `T(t_i, t_{i+1})`
    pub bwd: Vec<DMatrix<f64>>,
    /// `T(t_i, m_i)`
    pub bwd_mid: Vec<DMatrix<f64>>,
}

impl CellPropagators {
    pub fn new(op: &EvolutionOperator, grid: UniformGrid) -> Result<Self> {
        let cells: Result<Vec<[DMatrix<f64>; 4]>> = (0..grid.n)
            .into_par_iter()
            .map(|i| {
                let (a, m, b) = (grid.node(i), grid.mid(i), grid.node(i + 1));
                Ok([op.integrate_direct(b, a)?, op.integrate_direct(b, m)?, op.integrate_direct(a, b)?, op.integrate_direct(a, m)?])
            })
            .collect();
        let mut p = CellPropagators { grid, fwd: vec![], fwd_mid: vec![], bwd: vec![], bwd_mid: vec![] };
        for [f, fm, b, bm] in cells? {
            p.fwd.push(f);
            p.fwd_mid.push(fm);
            p.bwd.push(b);
            p.bwd_mid.push(bm);
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.fwd[0].nrows()
    }

    /// `T(t_j, t_i)` as a product of cells.
    pub fn transport(&self, j: usize, i: usize) -> DMatrix<f64> {
        let n = self.dim();
        let mut acc = DMatrix::identity(n, n);
        if j >= i {
            for c in i..j {
                acc = &self.fwd[c] * acc;
            }
        } else {
            for c in (j..i).rev() {
                acc = &self.bwd[c] * acc;
            }
        }
        acc
    }
}

/// Projection values at the nodes and cell midpoints of a grid.
#[derive(Debug, Clone)]
pub struct GridProjections {
    pub p: Vec<DMatrix<f64>>,
    pub p_mid: Vec<DMatrix<f64>>,
    pub q: Vec<DMatrix<f64>>,
    pub q_mid: Vec<DMatrix<f64>>,
}

impl GridProjections {
    pub fn new(fam: &ProjectionFamily, grid: &UniformGrid) -> Self {
        let p: Vec<_> = (0..=grid.n).map(|i| fam.at(grid.node(i))).collect();
        let p_mid: Vec<_> = (0..grid.n).map(|i| fam.at(grid.mid(i))).collect();
        let id = DMatrix::identity(fam.dim(), fam.dim());
        let q = p.iter().map(|m| &id - m).collect();
        let q_mid = p_mid.iter().map(|m| &id - m).collect();
        GridProjections { p, p_mid, q, q_mid }
    }
}

/// Forward sum on nodes `i0..=i1`. `g` holds node values `i0..=i1`, `gm` the
/// midpoint values of cells `i0..i1`; the integral term is multiplied by `sign`.
pub fn forward_stable(
    cells: &CellPropagators,
    proj: &GridProjections,
    g: &[DMatrix<f64>],
    gm: &[DMatrix<f64>],
    i0: usize,
    i1: usize,
    init: &DMatrix<f64>,
    sign: f64,
) -> Vec<DMatrix<f64>> {
    debug_assert_eq!(g.len(), i1 - i0 + 1);
    debug_assert_eq!(gm.len(), i1 - i0);
    let h = cells.grid.h;
    let mut out = Vec::with_capacity(i1 - i0 + 1);
    out.push(&proj.p[i0] * init);
    for i in i0..i1 {
        let k = i - i0;
        let f = &cells.fwd[i];
        let fm = &cells.fwd_mid[i];
        let quad = f * (&proj.p[i] * &g[k]) * (h / 6.0)
            + fm * (&proj.p_mid[i] * &gm[k]) * (4.0 * h / 6.0)
            + &proj.p[i + 1] * &g[k + 1] * (h / 6.0);
        let next = &proj.p[i + 1] * (f * &out[k] + quad * sign);
        out.push(next);
    }
    out
}

/// Backward sum on nodes `i0..=i1`, started from `init` at `i1`.
pub fn backward_unstable(
    cells: &CellPropagators,
    proj: &GridProjections,
    g: &[DMatrix<f64>],
    gm: &[DMatrix<f64>],
    i0: usize,
    i1: usize,
    init: &DMatrix<f64>,
    sign: f64,
) -> Vec<DMatrix<f64>> {
    debug_assert_eq!(g.len(), i1 - i0 + 1);
    debug_assert_eq!(gm.len(), i1 - i0);
    let h = cells.grid.h;
    let len = i1 - i0 + 1;
    let mut out = vec![DMatrix::zeros(init.nrows(), init.ncols()); len];
    out[len - 1] = &proj.q[i1] * init;
    for i in (i0..i1).rev() {
        let k = i - i0;
        let b = &cells.bwd[i];
        let bm = &cells.bwd_mid[i];
        let quad = b * (&proj.q[i + 1] * &g[k + 1]) * (h / 6.0)
            + bm * (&proj.q_mid[i] * &gm[k]) * (4.0 * h / 6.0)
            + &proj.q[i] * &g[k] * (h / 6.0);
        out[k] = &proj.q[i] * (b * &out[k + 1] + quad * sign);
    }
    out
}

/// Value at the midpoint of cell `i` from node values by cubic interpolation
/// (quadratic or linear when fewer nodes exist).
pub fn interp_mid(v: &[DMatrix<f64>], i: usize) -> DMatrix<f64> {
    let n = v.len();
    match n {
        0 | 1 => panic!("interp_mid needs at least two nodes"),
        2 => (&v[0] + &v[1]) * 0.5,
        3 => {
            // quadratic through the three nodes
            let (a, b, c) = (&v[0], &v[1], &v[2]);
            if i == 0 {
                a * (3.0 / 8.0) + b * (6.0 / 8.0) - c * (1.0 / 8.0)
            } else {
                -a * (1.0 / 8.0) + b * (6.0 / 8.0) + c * (3.0 / 8.0)
            }
        }
        _ => {
            if i == 0 {
                &v[0] * (5.0 / 16.0) + &v[1] * (15.0 / 16.0) - &v[2] * (5.0 / 16.0) + &v[3] * (1.0 / 16.0)
            } else if i + 2 >= n {
                &v[n - 4] * (1.0 / 16.0) - &v[n - 3] * (5.0 / 16.0) + &v[n - 2] * (15.0 / 16.0) + &v[n - 1] * (5.0 / 16.0)
            } else {
                (&v[i] + &v[i + 1]) * (9.0 / 16.0) - (&v[i - 1] + &v[i + 2]) * (1.0 / 16.0)
            }
        }
    }
}

/// Midpoint values for all cells of a node sequence.
pub fn interp_mids(v: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    (0..v.len().saturating_sub(1)).map(|i| interp_mid(v, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::IntegratorConfig;
    use crate::system::CoefficientField;

    fn setup() -> (CellPropagators, GridProjections) {
        let op = EvolutionOperator::new(CoefficientField::const_diag(&[-1.0, 1.0]).unwrap(), IntegratorConfig::default()).unwrap();
        let grid = UniformGrid::new(-4.0, 4.0, 0.05).unwrap();
        let cells = CellPropagators::new(&op, grid).unwrap();
        let proj = GridProjections::new(&ProjectionFamily::leading(2, 1), &grid);
        (cells, proj)
    }

    #[test]
    fn grid_indexing() {
        let g = UniformGrid::new(-1.0, 1.0, 0.25).unwrap();
        assert_eq!(g.n, 8);
        assert_eq!(g.index_of(0.0), Some(4));
        assert_eq!(g.index_of(0.1), None);
        assert!(UniformGrid::new(0.0, 1.0, 0.3).is_err());
    }

    #[test]
    fn forward_sum_matches_closed_form() {
        // z' = -z + cos t from z(-4) = 1: first component of the stable sum
        let (cells, proj) = setup();
        let g: Vec<_> = cells.grid.nodes().iter().map(|t| DMatrix::from_column_slice(2, 1, &[t.cos(), 7.0])).collect();
        let gm: Vec<_> = (0..cells.grid.n)
            .map(|i| {
                let t = cells.grid.mid(i);
                DMatrix::from_column_slice(2, 1, &[t.cos(), 7.0])
            })
            .collect();
        let init = DMatrix::from_column_slice(2, 1, &[1.0, 5.0]);
        let w = forward_stable(&cells, &proj, &g, &gm, 0, cells.grid.n, &init, 1.0);
        let exact = |t: f64| {
            let c = 1.0 - ((-4.0f64).cos() + (-4.0f64).sin()) / 2.0;
            c * (-(t + 4.0)).exp() + (t.cos() + t.sin()) / 2.0
        };
        for (i, wi) in w.iter().enumerate() {
            let t = cells.grid.node(i);
            assert!((wi[0] - exact(t)).abs() < 1e-8, "t={t}: {} vs {}", wi[0], exact(t));
            assert_eq!(wi[1], 0.0);
        }
    }

    #[test]
    fn backward_sum_matches_closed_form() {
        // w(t) = ∫_t^4 e^{t - τ} e^{-τ} dτ in the unstable component
        let (cells, proj) = setup();
        let f = |t: f64| DMatrix::from_column_slice(2, 1, &[3.0, (-t).exp()]);
        let g: Vec<_> = cells.grid.nodes().iter().map(|&t| f(t)).collect();
        let gm: Vec<_> = (0..cells.grid.n).map(|i| f(cells.grid.mid(i))).collect();
        let w = backward_unstable(&cells, &proj, &g, &gm, 0, cells.grid.n, &DMatrix::zeros(2, 1), 1.0);
        for (i, wi) in w.iter().enumerate() {
            let t = cells.grid.node(i);
            let exact = t.exp() * ((-2.0 * t).exp() - (-8.0f64).exp()) / 2.0;
            // Simpson on e^{-2τ} with h = 0.05 has relative error about h^4 16 / 2880
            assert!((wi[1] - exact).abs() < 1e-7 * exact.abs().max(1.0), "t={t}");
            assert_eq!(wi[0], 0.0);
        }
    }

    #[test]
    fn midpoint_interpolation_is_cubic_exact() {
        let v: Vec<DMatrix<f64>> = (0..6)
            .map(|i| {
                let x = i as f64;
                DMatrix::from_element(1, 1, x * x * x - 2.0 * x)
            })
            .collect();
        for i in 0..5 {
            let x = i as f64 + 0.5;
            assert!((interp_mid(&v, i)[0] - (x * x * x - 2.0 * x)).abs() < 1e-12);
        }
    }

    #[test]
    fn transport_products() {
        let (cells, _) = setup();
        let m = cells.transport(40, 0);
        assert!((m[(0, 0)] - (-2f64).exp()).abs() < 1e-9);
        let m = cells.transport(0, 40);
        assert!((m[(1, 1)] - (-2f64).exp()).abs() < 1e-9);
    }
}
