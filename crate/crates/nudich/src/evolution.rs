//! Evolution operators `T(t, s)` of `x' = A(t) x` and nonlinear flows.
//!
//! Long spans are never integrated as one fundamental matrix. The time axis is
//! cut at multiples of `spacing`; the one-cell propagators `T(k+1, k)` and their
//! backward counterparts `T(k, k+1)` are cached, and `T(t, s)` is the product
//! of the partial end pieces with the cached cells in between.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use parking_lot::RwLock;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::growth::Domain;
use crate::system::{CoefficientField, NonlinearTerm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    /// Norm beyond which nonlinear trajectories are declared escaped.
    pub blowup: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig { rel_tol: 1e-9, abs_tol: 1e-12, max_step: 0.5, blowup: 1e12 }
    }
}

impl IntegratorConfig {
    pub fn with_tol(rel_tol: f64, abs_tol: f64) -> Self {
        IntegratorConfig { rel_tol, abs_tol, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0 && self.max_step > 0.0 && self.blowup > 0.0) {
            return Err(Error::InvalidParam("integrator tolerances and step bound must be positive".into()));
        }
        Ok(())
    }
}

// Dormand–Prince 5(4) tableau; the last row of A is the 5th-order solution (FSAL).
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0];

/// Integrates `y' = rhs(t, y)` from `t0` to `t1` (either direction).
/// Returns the final state and the last accepted step size.
pub fn dopri5<F>(
    mut rhs: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    cfg: &IntegratorConfig,
    h_hint: Option<f64>,
    guard: Option<f64>,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let mut y = y0.to_vec();
    if t1 == t0 {
        return Ok((y, h_hint.unwrap_or(0.0)));
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut t = t0;
    // Endpoint evaluations are nudged inside the span so that fields with a
    // jump at an endpoint are sampled from the correct side.
    let nudge = (1e-13 * span).max(8.0 * f64::EPSILON * t0.abs().max(t1.abs()).max(1.0));
    let inside = |tau: f64| {
        if (tau - t0).abs() < nudge {
            t0 + dir * nudge
        } else if (t1 - tau).abs() < nudge {
            t1 - dir * nudge
        } else {
            tau
        }
    };
    rhs(inside(t), &y, &mut k[0]);

    let scale = |a: f64, b: f64| cfg.abs_tol + cfg.rel_tol * a.abs().max(b.abs());
    let mut h = match h_hint {
        Some(h) if h > 0.0 => h,
        _ => {
            // Hairer's starting step heuristic.
            let d0 = rms(y.iter().map(|&v| v / scale(v, v)));
            let d1 = rms(y.iter().zip(&k[0]).map(|(&v, &f)| f / scale(v, v)));
            let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
            for i in 0..n {
                tmp[i] = y[i] + dir * h0 * k[0][i];
            }
            rhs(inside(t + dir * h0), &tmp, &mut k[1]);
            let d2 = rms(y.iter().enumerate().map(|(i, &v)| (k[1][i] - k[0][i]) / scale(v, v))) / h0;
            let m = d1.max(d2);
            let h1 = if m <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / m).powf(0.2) };
            (100.0 * h0).min(h1)
        }
    };
    h = h.min(cfg.max_step).min(span);
    let mut last_ok = h;
    let min_step = 1e-13 * (1.0 + t0.abs().max(t1.abs()));

    loop {
        let remaining = (t1 - t) * dir;
        if remaining <= 0.0 {
            break;
        }
        let mut final_step = false;
        if h >= remaining || remaining - h < 1e-12 * span {
            h = remaining;
            final_step = true;
        }
        if h < min_step {
            return Err(Error::StepUnderflow { t });
        }
        let hs = dir * h;
        for s in 1..7 {
            for i in 0..n {
                let mut acc = y[i];
                for j in 0..s {
                    acc += hs * A[s][j] * k[j][i];
                }
                tmp[i] = acc;
            }
            rhs(inside(t + C[s] * hs), &tmp, &mut k[s]);
            if s == 6 {
                ynew.copy_from_slice(&tmp);
            }
        }
        let mut err = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for s in 0..7 {
                e += E[s] * k[s][i];
            }
            let sc = scale(y[i], ynew[i]);
            err += (hs * e / sc).powi(2);
        }
        let err = (err / n as f64).sqrt();
        if !err.is_finite() {
            h *= 0.2;
            continue;
        }
        if err <= 1.0 {
            t = if final_step { t1 } else { t + hs };
            y.copy_from_slice(&ynew);
            let last = k[6].clone();
            k[0].copy_from_slice(&last);
            last_ok = h;
            if let Some(g) = guard {
                let nrm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(nrm <= g) {
                    return Err(Error::Escape { t, bound: g });
                }
            }
            if final_step {
                break;
            }
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h * fac).min(cfg.max_step);
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
        }
    }
    Ok((y, last_ok))
}

fn rms(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0, 0usize);
    for v in it {
        s += v * v;
        c += 1;
    }
    (s / c.max(1) as f64).sqrt()
}

/// Matrix right-hand side `dY = A(t) Y` on column-major storage.
fn matrix_rhs(field: &CoefficientField, cols: usize) -> impl FnMut(f64, &[f64], &mut [f64]) + '_ {
    let n = field.dim();
    move |t, y, dy| {
        let a = field.eval(t);
        for c in 0..cols {
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += a[(i, j)] * y[c * n + j];
                }
                dy[c * n + i] = acc;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Dir {
    Forward,
    Backward,
}

pub struct EvolutionOperator {
    field: CoefficientField,
    config: IntegratorConfig,
    spacing: f64,
    anchor: f64,
    cells: RwLock<BTreeMap<(i64, Dir), DMatrix<f64>>>,
}

impl std::fmt::Debug for EvolutionOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EvolutionOperator")
            .field("field", &self.field)
            .field("config", &self.config)
            .field("spacing", &self.spacing)
            .finish()
    }
}

impl EvolutionOperator {
    pub fn new(field: CoefficientField, config: IntegratorConfig) -> Result<Self> {
        Self::with_spacing(field, config, 1.0)
    }

    pub fn with_spacing(field: CoefficientField, config: IntegratorConfig, spacing: f64) -> Result<Self> {
        config.validate()?;
        if !(spacing > 0.0 && spacing <= 1.0) {
            return Err(Error::InvalidParam("checkpoint spacing must lie in (0, 1]".into()));
        }
        Ok(EvolutionOperator { field, config, spacing, anchor: 0.0, cells: RwLock::new(BTreeMap::new()) })
    }

    pub fn field(&self) -> &CoefficientField {
        &self.field
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn domain(&self) -> Domain {
        self.field.domain()
    }

    fn check(&self, t: f64) -> Result<()> {
        if self.field.domain().contains(t) {
            Ok(())
        } else {
            Err(Error::Domain { name: self.field.name().to_string(), t, domain: self.field.domain().as_str() })
        }
    }

    /// Direct integration of `T(t, s)`; intended for spans of at most one cell.
    pub fn integrate_direct(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        let n = self.dim();
        if t == s {
            return Ok(DMatrix::identity(n, n));
        }
        let id = DMatrix::<f64>::identity(n, n);
        let (y, _) = dopri5(matrix_rhs(&self.field, n), s, id.as_slice(), t, &self.config, None, None)?;
        Ok(DMatrix::from_column_slice(n, n, &y))
    }

    fn node(&self, k: i64) -> f64 {
        self.anchor + k as f64 * self.spacing
    }

    fn cell(&self, k: i64, dir: Dir) -> Result<DMatrix<f64>> {
        if let Some(m) = self.cells.read().get(&(k, dir)) {
            return Ok(m.clone());
        }
        let (a, b) = (self.node(k), self.node(k + 1));
        let m = match dir {
            Dir::Forward => self.integrate_direct(b, a)?,
            Dir::Backward => self.integrate_direct(a, b)?,
        };
        self.cells.write().entry((k, dir)).or_insert_with(|| m.clone());
        Ok(m)
    }

    /// `T(t, s)`, either time order.
    pub fn evolve(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        self.check(t)?;
        self.check(s)?;
        let n = self.dim();
        if t == s {
            return Ok(DMatrix::identity(n, n));
        }
        let (lo, hi) = if t > s { (s, t) } else { (t, s) };
        let klo = ((lo - self.anchor) / self.spacing).ceil() as i64;
        let khi = ((hi - self.anchor) / self.spacing).floor() as i64;
        if khi <= klo {
            // at most one node in between: two short pieces or one
            if khi == klo && self.node(klo) > lo && self.node(klo) < hi {
                let m = self.node(klo);
                return Ok(self.integrate_direct(t, m)? * self.integrate_direct(m, s)?);
            }
            return self.integrate_direct(t, s);
        }
        if t > s {
            let mut acc = self.integrate_direct(self.node(klo), s)?;
            for k in klo..khi {
                acc = self.cell(k, Dir::Forward)? * acc;
            }
            Ok(self.integrate_direct(t, self.node(khi))? * acc)
        } else {
            let mut acc = self.integrate_direct(self.node(khi), s)?;
            for k in (klo..khi).rev() {
                acc = self.cell(k, Dir::Backward)? * acc;
            }
            Ok(self.integrate_direct(t, self.node(klo))? * acc)
        }
    }

    /// `T(t, s)^{-1} Q(t) = T(s, t) Q(t)` for `t >= s`, by backward integration.
    pub fn evolve_inverse_unstable(&self, t: f64, s: f64, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if t < s {
            return Err(Error::Precondition(format!("evolve_inverse_unstable needs t >= s, got t={t}, s={s}")));
        }
        Ok(self.evolve(s, t)? * q)
    }

    /// Condition numbers of the cached cell propagators.
    pub fn checkpoint_conditions(&self) -> Vec<(f64, f64)> {
        self.cells
            .read()
            .iter()
            .filter(|((_, d), _)| *d == Dir::Forward)
            .map(|((k, _), m)| (self.node(*k), crate::linalg::condition_number(m)))
            .collect()
    }

    pub fn cached_cells(&self) -> usize {
        self.cells.read().len()
    }

    /// `X(t, tbar, xi)` for `x' = A(t) x + f(t, x, lambda)`.
    pub fn solve_nonlinear(&self, t: f64, tbar: f64, xi: &DVector<f64>, f: &NonlinearTerm, lambda: &[f64]) -> Result<DVector<f64>> {
        let path = self.nonlinear_path(tbar, xi, &[t], f, lambda)?;
        Ok(path.into_iter().next().expect("one output"))
    }

    /// States of the nonlinear flow through `(tbar, xi)` at `times`, which must
    /// be monotone moving away from `tbar`.
    pub fn nonlinear_path(
        &self,
        tbar: f64,
        xi: &DVector<f64>,
        times: &[f64],
        f: &NonlinearTerm,
        lambda: &[f64],
    ) -> Result<Vec<DVector<f64>>> {
        self.check(tbar)?;
        let n = self.dim();
        if xi.len() != n || f.dim() != n {
            return Err(Error::InvalidParam("dimension mismatch in nonlinear flow".into()));
        }
        let rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
            let a = self.field.eval(t);
            let x = DVector::from_column_slice(y);
            let fx = f.eval(t, &x, lambda);
            let ax = a * &x;
            for i in 0..n {
                dy[i] = ax[i] + fx[i];
            }
        };
        let mut rhs = rhs;
        let mut out = Vec::with_capacity(times.len());
        let mut cur = xi.as_slice().to_vec();
        let mut tc = tbar;
        let mut hint = None;
        for &t in times {
            self.check(t)?;
            let (y, h) = dopri5(&mut rhs, tc, &cur, t, &self.config, hint, Some(self.config.blowup))?;
            if h > 0.0 {
                hint = Some(h);
            }
            cur = y;
            tc = t;
            out.push(DVector::from_column_slice(&cur));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{make_oscillating, LipschitzKind, OscillatingParams};

    fn diag_op() -> EvolutionOperator {
        EvolutionOperator::new(CoefficientField::const_diag(&[-1.0, 1.0]).unwrap(), IntegratorConfig::default()).unwrap()
    }

    #[test]
    fn constant_diagonal() {
        let op = diag_op();
        let t = op.evolve(2.0, 0.0).unwrap();
        assert!((t[(0, 0)] - (-2f64).exp()).abs() < 1e-9 * 1.0);
        assert!((t[(1, 1)] - 2f64.exp()).abs() < 1e-8);
        assert_eq!(t[(0, 1)], 0.0);
        assert_eq!(op.evolve(1.3, 1.3).unwrap(), DMatrix::identity(2, 2));
        let back = op.evolve(-3.2, 4.1).unwrap();
        assert!((back[(0, 0)] - 7.3f64.exp()).abs() < 1e-8 * 7.3f64.exp());
    }

    #[test]
    fn inverse_unstable() {
        let op = diag_op();
        let q = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let m = op.evolve_inverse_unstable(2.0, 0.0, &q).unwrap();
        assert!((m[(1, 1)] - (-2f64).exp()).abs() < 1e-10);
        assert_eq!(m[(0, 0)], 0.0);
        let z = op.evolve_inverse_unstable(2.0, 0.0, &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(z, DMatrix::zeros(2, 2));
        assert!(op.evolve_inverse_unstable(0.0, 2.0, &q).is_err());
    }

    #[test]
    fn oscillating_matches_closed_form() {
        let ex = make_oscillating(&OscillatingParams::exponential(1.0, 0.1, 1.0), Domain::FullLine).unwrap();
        let op = EvolutionOperator::new(ex.field.clone(), IntegratorConfig::with_tol(1e-10, 1e-13)).unwrap();
        let num = op.evolve(3.0, 1.0).unwrap();
        let an = (ex.analytic)(3.0, 1.0);
        assert!((num - &an).norm() <= 1e-7 * an.norm());
        let q = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let inv = op.evolve_inverse_unstable(3.0, 1.0, &q).unwrap();
        let an = (ex.analytic)(1.0, 3.0) * &q;
        assert!((inv - &an).norm() <= 1e-7 * an.norm());
    }

    #[test]
    fn half_line_rejects_negative_times() {
        let f = CoefficientField::new("h", 1, Domain::HalfLine, |_| DMatrix::from_element(1, 1, -1.0)).unwrap();
        let op = EvolutionOperator::new(f, IntegratorConfig::default()).unwrap();
        assert!(op.evolve(1.0, -0.5).is_err());
    }

    #[test]
    fn nonlinear_zero_term_is_linear() {
        let op = diag_op();
        let f = NonlinearTerm::zero(2, LipschitzKind::Conjugacy { alpha: 0.0, gamma: 0.0 });
        let xi = DVector::from_vec(vec![0.3, -0.2]);
        let x = op.solve_nonlinear(1.7, -0.4, &xi, &f, &[]).unwrap();
        let y = op.evolve(1.7, -0.4).unwrap() * &xi;
        assert!((x - y).norm() < 1e-9);
    }

    #[test]
    fn nonlinear_escape_guard() {
        let f = CoefficientField::const_diag(&[0.0]).unwrap();
        let cfg = IntegratorConfig { blowup: 1e6, ..Default::default() };
        let op = EvolutionOperator::new(f, cfg).unwrap();
        // x' = x^2 blows up at t = 1 from x(0) = 1
        let g = NonlinearTerm::new("sq", 1, LipschitzKind::Conjugacy { alpha: 0.0, gamma: 0.0 }, true, |_, x, _| x.map(|v| v * v));
        let r = op.solve_nonlinear(2.0, 0.0, &DVector::from_element(1, 1.0), &g, &[]);
        match r {
            Err(Error::Escape { t, .. }) => assert!(t < 1.0 + 1e-3),
            Err(Error::StepUnderflow { t }) => assert!(t < 1.0 + 1e-3),
            other => panic!("expected escape, got {other:?}"),
        }
    }

    #[test]
    fn nonlinear_against_fixed_step_rk4() {
        let f = CoefficientField::const_diag(&[-1.0]).unwrap();
        let op = EvolutionOperator::new(f, IntegratorConfig::with_tol(1e-11, 1e-14)).unwrap();
        let g =
            NonlinearTerm::new("tanh", 1, LipschitzKind::Conjugacy { alpha: 0.1, gamma: 0.1 }, true, |_, x, _| x.map(|v| 0.1 * v.tanh()));
        let x = op.solve_nonlinear(1.0, 0.0, &DVector::from_element(1, 1.0), &g, &[]).unwrap()[0];
        // independent oracle: classical RK4 at h = 1e-5
        let rhs = |v: f64| -v + 0.1 * v.tanh();
        let (mut y, h) = (1.0f64, 1e-5);
        for _ in 0..100_000 {
            let k1 = rhs(y);
            let k2 = rhs(y + 0.5 * h * k1);
            let k3 = rhs(y + 0.5 * h * k2);
            let k4 = rhs(y + h * k3);
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!((x - y).abs() < 1e-7, "{x} vs {y}");
    }

    #[test]
    fn adjoint_fundamental_matrix_is_inverse_transpose() {
        let f = CoefficientField::new("tv", 2, Domain::FullLine, |t| {
            DMatrix::from_row_slice(2, 2, &[-1.0 + 0.3 * t.sin(), 0.5, 0.2 * t.cos(), 0.7])
        })
        .unwrap();
        let cfg = IntegratorConfig::with_tol(1e-10, 1e-13);
        let x = EvolutionOperator::new(f.clone(), cfg).unwrap().evolve(2.5, 0.0).unwrap();
        let y = EvolutionOperator::new(crate::system::adjoint(&f), cfg).unwrap().evolve(2.5, 0.0).unwrap();
        let xinv_t = x.transpose().try_inverse().unwrap();
        assert!((y - &xinv_t).norm() < 1e-7 * xinv_t.norm());
    }

    #[test]
    fn tolerance_refinement_reduces_error() {
        let ex = make_oscillating(&OscillatingParams::exponential(1.0, 0.1, 1.0), Domain::FullLine).unwrap();
        let an = (ex.analytic)(4.3, -2.6);
        let mut prev = f64::INFINITY;
        for tol in [1e-6, 5e-7, 2.5e-7] {
            let op = EvolutionOperator::new(ex.field.clone(), IntegratorConfig::with_tol(tol, 1e-14)).unwrap();
            let err = (op.evolve(4.3, -2.6).unwrap() - &an).norm() / an.norm();
            assert!(err <= 2.0 * prev, "tol {tol}: {err} vs {prev}");
            prev = err;
        }
    }

    #[test]
    fn concurrent_readers_share_cache() {
        use rayon::prelude::*;
        let op = diag_op();
        let res: Vec<f64> = (0..64).into_par_iter().map(|i| op.evolve(5.0, -5.0 + 0.01 * i as f64).unwrap()[(0, 0)]).collect();
        for (i, v) in res.iter().enumerate() {
            let expect = (-(10.0 - 0.01 * i as f64)).exp();
            assert!((v - expect).abs() < 1e-8 * expect);
        }
        assert!(op.cached_cells() >= 9);
        assert!(op.checkpoint_conditions().iter().all(|(_, c)| c.is_finite()));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn op() -> EvolutionOperator {
            let ex = make_oscillating(&OscillatingParams::exponential(1.0, 0.1, 1.0), Domain::FullLine).unwrap();
            EvolutionOperator::new(ex.field, IntegratorConfig::default()).unwrap()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn cocycle(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0) {
                let mut v = [a, b, c];
                v.sort_by(f64::total_cmp);
                let (s, r, t) = (v[0], v[1], v[2]);
                let op = op();
                let ts = op.evolve(t, s).unwrap();
                let prod = op.evolve(t, r).unwrap() * op.evolve(r, s).unwrap();
                prop_assert!((&ts - prod).norm() <= 1e-7 * ts.norm());
            }

            #[test]
            fn inverse_consistency(t in -5.0f64..5.0, s in -5.0f64..5.0) {
                let op = op();
                let m = op.evolve(t, s).unwrap() * op.evolve(s, t).unwrap();
                prop_assert!((m - DMatrix::identity(2, 2)).norm() <= 1e-7);
            }
        }
    }
}
