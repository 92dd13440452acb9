//! Numerical linearizing conjugacy between `x' = A(t) x + f(t, x)` and `x' = A(t) x`.
//!
//! `H(t, x) = x + h(t, (t, x))` where `h` is the bounded solution of
//! `z' = A z - f(t, X(t))` along the nonlinear orbit through `(t, x)`, given by
//! an explicit pair of integrals. `L(t, y) = y + l(t, (t, y))` where `l` is the
//! bounded solution of `z' = A z + f(t, Y(t) + z)` along the linear orbit,
//! obtained by Picard iteration. Both integrals run on one uniform grid.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use parking_lot::RwLock;
use rayon::prelude::*;
use serde::Serialize;

use crate::dichotomy::DichotomySpec;
use crate::error::{Error, Result};
use crate::evolution::EvolutionOperator;
use crate::quad::truncation_length;
use crate::system::{LipschitzKind, NonlinearTerm};
use crate::varconst::{backward_unstable, forward_stable, interp_mids, CellPropagators, GridProjections, UniformGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConjugacyConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// One-sided truncation length; derived from the tail envelope when `None`.
    pub truncation: Option<f64>,
    pub tail_tol: f64,
    pub fp_tol: f64,
    pub max_iter: usize,
    pub step: f64,
    /// Times at which `H` and `L` may be evaluated.
    pub t_range: (f64, f64),
    pub roundtrip_tol: f64,
    pub contraction_slack: f64,
}

impl ConjugacyConfig {
    /// Constants taken from the term's declared conjugacy bounds.
    pub fn for_term(f: &NonlinearTerm, t_range: (f64, f64)) -> Result<Self> {
        match f.kind {
            LipschitzKind::Conjugacy { alpha, gamma } => Ok(ConjugacyConfig {
                alpha,
                gamma,
                truncation: None,
                tail_tol: 1e-8,
                fp_tol: 1e-11,
                max_iter: 200,
                step: 0.02,
                t_range,
                roundtrip_tol: 1e-5,
                contraction_slack: 0.05,
            }),
            LipschitzKind::Manifold { .. } => {
                Err(Error::InvalidParam(format!("term `{}` carries manifold constants, not conjugacy ones", f.name())))
            }
        }
    }
}

/// `(1/|a| if P != 0) + (1/b if Q != 0)`.
fn inverse_rate_sum(spec: &DichotomySpec) -> Result<f64> {
    let n = spec.p.dim();
    let r = spec.p.rank();
    let mut s = 0.0;
    if r > 0 {
        s += 1.0 / spec.a.abs();
    }
    if r < n {
        if spec.b <= 0.0 {
            return Err(Error::Precondition("b = 0 makes the unstable integral unbounded; unusable for the conjugacy".into()));
        }
        s += 1.0 / spec.b;
    }
    Ok(s)
}

/// `min(h'/h mu(|t|)^{-ε}, k'/k nu(|t|)^{-ε})`.
fn weight(spec: &DichotomySpec, t: f64) -> f64 {
    let r = &spec.rates;
    let e = spec.eps;
    (r.h.log_deriv(t) * (-e * r.mu.ln_eval(t.abs())).exp()).min(r.k.log_deriv(t) * (-e * r.nu.ln_eval(t.abs())).exp())
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    /// Largest `|f(t, x)| / (α weight(t))`.
    pub alpha_ratio: f64,
    /// Largest `|f(t, x1) - f(t, x2)| / (γ weight(t) |x1 - x2|)`.
    pub gamma_ratio: f64,
    /// `1 - K γ (1/|a| + 1/b)`
    pub margin: f64,
    pub pass: bool,
}

/// Samples both growth conditions on `f` and the smallness margin.
pub fn check_hypotheses(
    f: &NonlinearTerm,
    spec: &DichotomySpec,
    alpha: f64,
    gamma: f64,
    times: &[f64],
    points: &[DVector<f64>],
) -> Result<HypothesisReport> {
    let s = inverse_rate_sum(spec)?;
    let margin = 1.0 - spec.k_const * gamma * s;
    let mut ar = 0.0f64;
    let mut gr = 0.0f64;
    for &t in times {
        let w = weight(spec, t);
        let vals: Vec<DVector<f64>> = points.iter().map(|x| f.eval(t, x, &[])).collect();
        for v in &vals {
            let n = v.norm();
            if n > 0.0 {
                ar = ar.max(n / (alpha * w));
            }
        }
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let dx = (&points[i] - &points[j]).norm();
                let df = (&vals[i] - &vals[j]).norm();
                if dx > 0.0 && df > 0.0 {
                    gr = gr.max(df / (gamma * w * dx));
                }
            }
        }
    }
    let pass = ar <= 1.0 + 1e-12 && gr <= 1.0 + 1e-12 && margin > 0.0;
    Ok(HypothesisReport { alpha_ratio: ar, gamma_ratio: gr, margin, pass })
}

/// A solution sampled on consecutive grid nodes.
#[derive(Debug, Clone)]
pub struct GridTrajectory {
    pub first: usize,
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    pub iterations: usize,
    pub contraction: Option<f64>,
}

impl GridTrajectory {
    pub fn at_index(&self, i: usize) -> Option<&DVector<f64>> {
        i.checked_sub(self.first).and_then(|k| self.values.get(k))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest `|z' - rhs(t, z)|` with a fourth-order difference for `z'`,
    /// over nodes at least two steps from both ends and inside `[lo, hi]`.
    pub fn ode_residual(&self, lo: f64, hi: f64, rhs: impl Fn(usize, f64, &DVector<f64>) -> DVector<f64>) -> f64 {
        let m = self.values.len();
        if m < 5 {
            return f64::NAN;
        }
        let d = self.times[1] - self.times[0];
        let mut worst = 0.0f64;
        for k in 2..m - 2 {
            let t = self.times[k];
            if t < lo || t > hi {
                continue;
            }
            let v = &self.values;
            let der = (&v[k - 2] - &v[k - 1] * 8.0 + &v[k + 1] * 8.0 - &v[k + 2]) / (12.0 * d);
            worst = worst.max((der - rhs(self.first + k, t, &v[k])).norm());
        }
        worst
    }
}

type MemoKey = (usize, Vec<u64>);

pub struct ConjugacyPair {
    pub spec: DichotomySpec,
    pub f: NonlinearTerm,
    pub config: ConjugacyConfig,
    /// `K α (1/|a| + 1/b)`
    pub bound: f64,
    /// `K γ (1/|a| + 1/b)`
    pub contraction_theory: f64,
    pub truncation: f64,
    pub grid: UniformGrid,
    op: Arc<EvolutionOperator>,
    cells: CellPropagators,
    proj: GridProjections,
    /// `T(m_i, t_i)` for linear orbits at cell midpoints.
    half_fwd: Vec<DMatrix<f64>>,
    memo_h: RwLock<HashMap<MemoKey, DVector<f64>>>,
    memo_l: RwLock<HashMap<MemoKey, DVector<f64>>>,
    worst_contraction: RwLock<f64>,
}

impl std::fmt::Debug for ConjugacyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConjugacyPair").field("bound", &self.bound).field("truncation", &self.truncation).field("grid", &self.grid).finish()
    }
}

fn key(i: usize, x: &DVector<f64>) -> MemoKey {
    (i, x.iter().map(|v| v.to_bits()).collect())
}

/// Truncation length with both dichotomy tails below `tail_tol` at every time in `range`.
fn envelope_length(spec: &DichotomySpec, alpha: f64, range: (f64, f64), tol: f64) -> Result<f64> {
    let r = &spec.rates;
    let kc = spec.k_const;
    let n = spec.p.dim();
    let rank = spec.p.rank();
    let probes = [range.0, 0.5 * (range.0 + range.1), range.1];
    let mut best = 1.0f64;
    for &t in &probes {
        let env = |l: f64| {
            let mut e = 0.0f64;
            if rank > 0 {
                e = e.max(kc * alpha * (spec.a * (r.h.ln_eval(t) - r.h.ln_eval(t - l))).exp() / spec.a.abs());
            }
            if rank < n {
                e = e.max(kc * alpha * (-spec.b * (r.k.ln_eval(t + l) - r.k.ln_eval(t))).exp() / spec.b);
            }
            e
        };
        best = best.max(truncation_length(env, tol, 1e3)?);
    }
    Ok(best)
}

impl ConjugacyPair {
    pub fn new(spec: &DichotomySpec, op: Arc<EvolutionOperator>, f: &NonlinearTerm, config: &ConjugacyConfig) -> Result<Self> {
        if f.dim() != op.dim() || spec.p.dim() != op.dim() {
            return Err(Error::InvalidParam("term, spec and system dimensions differ".into()));
        }
        let s = inverse_rate_sum(spec)?;
        let contraction_theory = spec.k_const * config.gamma * s;
        if contraction_theory >= 1.0 {
            return Err(Error::Precondition(format!("K γ (1/|a| + 1/b) = {contraction_theory:.4} is not below 1")));
        }
        let (lo, hi) = config.t_range;
        if !(hi >= lo) {
            return Err(Error::InvalidParam("empty time range".into()));
        }
        let truncation = match config.truncation {
            Some(t) => t,
            None if config.alpha == 0.0 => 1.0,
            None => envelope_length(spec, config.alpha, config.t_range, config.tail_tol)?,
        };
        let st = config.step;
        let g0 = ((lo - truncation) / st).floor() * st;
        let g1 = ((hi + truncation) / st).ceil() * st;
        let grid = UniformGrid::new(g0, g1, st)?;
        let cells = CellPropagators::new(&op, grid)?;
        let proj = GridProjections::new(&spec.p, &grid);
        let half_fwd = cells
            .bwd_mid
            .iter()
            .map(|m| m.clone().try_inverse().ok_or_else(|| Error::Precondition("singular half-cell propagator".into())))
            .collect::<Result<_>>()?;
        Ok(ConjugacyPair {
            spec: spec.clone(),
            f: f.clone(),
            config: *config,
            bound: spec.k_const * config.alpha * s,
            contraction_theory,
            truncation,
            grid,
            op,
            cells,
            proj,
            half_fwd,
            memo_h: RwLock::new(HashMap::new()),
            memo_l: RwLock::new(HashMap::new()),
            worst_contraction: RwLock::new(0.0),
        })
    }

    pub fn operator(&self) -> &EvolutionOperator {
        &self.op
    }

    pub fn index(&self, t: f64) -> Result<usize> {
        let (lo, hi) = self.config.t_range;
        if t < lo - 1e-9 || t > hi + 1e-9 {
            return Err(Error::InvalidParam(format!("t = {t} outside the certified range [{lo}, {hi}]")));
        }
        self.grid.index_of(t).ok_or_else(|| Error::InvalidParam(format!("t = {t} is not a grid node")))
    }

    /// Node window `[i - m, i + m]` of one truncation length around `i`.
    fn window(&self, i: usize) -> (usize, usize) {
        let m = (self.truncation / self.grid.h).ceil() as usize;
        (i.saturating_sub(m), (i + m).min(self.grid.n))
    }

    /// Largest measured Picard contraction so far.
    pub fn measured_contraction(&self) -> f64 {
        *self.worst_contraction.read()
    }

    fn col(v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v.as_slice())
    }

    /// `h(t, (tbar, ξ))` on the truncation window around `tbar`.
    pub fn bounded_h(&self, tbar: f64, xi: &DVector<f64>) -> Result<GridTrajectory> {
        let ib = self.index(tbar)?;
        let (i0, i1) = self.window(ib);
        let n = self.op.dim();
        // orbit samples at nodes and midpoints, outward from tbar
        let fwd_times: Vec<f64> = (ib..i1).flat_map(|i| [self.grid.mid(i), self.grid.node(i + 1)]).collect();
        let bwd_times: Vec<f64> = (i0..ib).rev().flat_map(|i| [self.grid.mid(i), self.grid.node(i)]).collect();
        let fw = self.op.nonlinear_path(tbar, xi, &fwd_times, &self.f, &[])?;
        let bw = self.op.nonlinear_path(tbar, xi, &bwd_times, &self.f, &[])?;
        let len = i1 - i0 + 1;
        let mut g = vec![DMatrix::zeros(n, 1); len];
        let mut gm = vec![DMatrix::zeros(n, 1); len - 1];
        g[ib - i0] = Self::col(&self.f.eval(tbar, xi, &[]));
        for (k, i) in (ib..i1).enumerate() {
            gm[i - i0] = Self::col(&self.f.eval(self.grid.mid(i), &fw[2 * k], &[]));
            g[i + 1 - i0] = Self::col(&self.f.eval(self.grid.node(i + 1), &fw[2 * k + 1], &[]));
        }
        for (k, i) in (i0..ib).rev().enumerate() {
            gm[i - i0] = Self::col(&self.f.eval(self.grid.mid(i), &bw[2 * k], &[]));
            g[i - i0] = Self::col(&self.f.eval(self.grid.node(i), &bw[2 * k + 1], &[]));
        }
        let zero = DMatrix::zeros(n, 1);
        let p = forward_stable(&self.cells, &self.proj, &g, &gm, i0, i1, &zero, -1.0);
        let q = backward_unstable(&self.cells, &self.proj, &g, &gm, i0, i1, &zero, 1.0);
        let values = p.iter().zip(&q).map(|(a, b)| DVector::from_column_slice((a + b).as_slice())).collect();
        Ok(GridTrajectory { first: i0, times: (i0..=i1).map(|i| self.grid.node(i)).collect(), values, iterations: 0, contraction: None })
    }

    /// `l(t, (tbar, y))` on the truncation window around `tbar`.
    pub fn bounded_l(&self, tbar: f64, y: &DVector<f64>) -> Result<GridTrajectory> {
        let ib = self.index(tbar)?;
        let (i0, i1) = self.window(ib);
        let n = self.op.dim();
        let len = i1 - i0 + 1;
        let mut ys = vec![DVector::zeros(n); len];
        ys[ib - i0] = y.clone();
        for i in ib..i1 {
            ys[i + 1 - i0] = &self.cells.fwd[i] * &ys[i - i0];
        }
        for i in (i0..ib).rev() {
            ys[i - i0] = &self.cells.bwd[i] * &ys[i + 1 - i0];
        }
        let ym: Vec<DVector<f64>> = (i0..i1).map(|i| &self.half_fwd[i] * &ys[i - i0]).collect();
        let zero = DMatrix::zeros(n, 1);
        let apply = |z: &[DMatrix<f64>]| -> Vec<DMatrix<f64>> {
            let zm = interp_mids(z);
            let g: Vec<_> = (0..len)
                .map(|k| {
                    let x = &ys[k] + DVector::from_column_slice(z[k].as_slice());
                    Self::col(&self.f.eval(self.grid.node(i0 + k), &x, &[]))
                })
                .collect();
            let gm: Vec<_> = (0..len - 1)
                .map(|k| {
                    let x = &ym[k] + DVector::from_column_slice(zm[k].as_slice());
                    Self::col(&self.f.eval(self.grid.mid(i0 + k), &x, &[]))
                })
                .collect();
            let p = forward_stable(&self.cells, &self.proj, &g, &gm, i0, i1, &zero, 1.0);
            let q = backward_unstable(&self.cells, &self.proj, &g, &gm, i0, i1, &zero, -1.0);
            p.iter().zip(&q).map(|(a, b)| a + b).collect()
        };
        let sup = |v: &[DMatrix<f64>]| v.iter().map(|m| m.norm()).fold(0.0, f64::max);
        let mut cur = vec![zero.clone(); len];
        let mut prev = f64::NAN;
        let mut contraction: Option<f64> = None;
        for it in 1..=self.config.max_iter {
            let next = apply(&cur);
            let d: Vec<_> = next.iter().zip(&cur).map(|(a, b)| a - b).collect();
            let diff = sup(&d);
            if prev.is_finite() && prev > 1e3 * f64::EPSILON * sup(&next).max(1e-300) {
                let r = diff / prev;
                contraction = Some(contraction.map_or(r, |c: f64| c.max(r)));
            }
            cur = next;
            if diff < self.config.fp_tol {
                if let Some(r) = contraction {
                    if r >= 1.0 {
                        return Err(Error::NoContraction(format!("measured contraction {r:.4}")));
                    }
                    let mut w = self.worst_contraction.write();
                    *w = w.max(r);
                }
                return Ok(GridTrajectory {
                    first: i0,
                    times: (i0..=i1).map(|i| self.grid.node(i)).collect(),
                    values: cur.iter().map(|m| DVector::from_column_slice(m.as_slice())).collect(),
                    iterations: it,
                    contraction,
                });
            }
            prev = diff;
        }
        Err(Error::NoContraction(format!("no convergence in {} iterations", self.config.max_iter)))
    }

    /// `H(t, x) = x + h(t, (t, x))`.
    pub fn h_map(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let i = self.index(t)?;
        let k = key(i, x);
        if let Some(v) = self.memo_h.read().get(&k) {
            return Ok(v.clone());
        }
        let tr = self.bounded_h(t, x)?;
        let v = x + tr.at_index(i).expect("tbar node");
        self.memo_h.write().insert(k, v.clone());
        Ok(v)
    }

    /// `L(t, y) = y + l(t, (t, y))`.
    pub fn l_map(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let i = self.index(t)?;
        let k = key(i, y);
        if let Some(v) = self.memo_l.read().get(&k) {
            return Ok(v.clone());
        }
        let tr = self.bounded_l(t, y)?;
        let v = y + tr.at_index(i).expect("tbar node");
        self.memo_l.write().insert(k, v.clone());
        Ok(v)
    }

    /// `(|L(t, H(t, x)) - x|, |H(t, L(t, x)) - x|)`.
    pub fn roundtrip(&self, t: f64, x: &DVector<f64>) -> Result<(f64, f64)> {
        let lh = self.l_map(t, &self.h_map(t, x)?)?;
        let hl = self.h_map(t, &self.l_map(t, x)?)?;
        Ok(((lh - x).norm(), (hl - x).norm()))
    }

    /// Largest `|H(t, X(t)) + offset(t) - Y(t, tbar, H(tbar, x) + offset(tbar))|`
    /// over eleven equally spaced nodes of `[tbar, tbar + horizon]`.
    pub fn conjugation_residual_with(
        &self,
        tbar: f64,
        x: &DVector<f64>,
        horizon: f64,
        offset: impl Fn(f64) -> DVector<f64> + Sync,
    ) -> Result<f64> {
        let times: Vec<f64> = (0..=10).map(|j| tbar + horizon * j as f64 / 10.0).collect();
        let xs = self.op.nonlinear_path(tbar, x, &times[1..], &self.f, &[])?;
        let h0 = self.h_map(tbar, x)? + offset(tbar);
        let res: Vec<f64> = times[1..]
            .par_iter()
            .zip(xs.par_iter())
            .map(|(&t, xt)| {
                let lhs = self.h_map(t, xt)? + offset(t);
                let rhs = self.op.evolve(t, tbar)? * &h0;
                Ok((lhs - rhs).norm())
            })
            .collect::<Result<_>>()?;
        Ok(res.into_iter().fold(0.0, f64::max))
    }

    pub fn conjugation_residual(&self, tbar: f64, x: &DVector<f64>, horizon: f64) -> Result<f64> {
        let n = x.len();
        self.conjugation_residual_with(tbar, x, horizon, |_| DVector::zeros(n))
    }
}

/// `points_per_axis^n` points of the box `[-r, r]^n`.
pub fn box_samples(n: usize, r: f64, points_per_axis: usize) -> Vec<DVector<f64>> {
    let m = points_per_axis.max(2);
    let axis: Vec<f64> = (0..m).map(|i| -r + 2.0 * r * i as f64 / (m - 1) as f64).collect();
    let total = m.pow(n as u32);
    (0..total)
        .map(|mut k| {
            DVector::from_fn(n, |_, _| {
                let v = axis[k % m];
                k /= m;
                v
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SamplePoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub roundtrip: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConjugacyCertificate {
    pub window: (f64, f64),
    pub truncation: f64,
    pub bound: f64,
    pub max_displacement: f64,
    pub max_roundtrip_lh: f64,
    pub max_roundtrip_hl: f64,
    pub conjugation_residual: f64,
    pub conjugation_tol: f64,
    pub measured_contraction: f64,
    pub contraction_theory: f64,
    /// Smallest distance between images of distinct samples.
    pub min_image_separation: f64,
    /// `|H(t, x)| >= |x| - bound` at every sample.
    pub growth_ok: bool,
    #[serde(skip)]
    pub samples: Vec<SamplePoint>,
    pub pass: bool,
}

/// Displacement, roundtrip, injectivity and growth over `times × box`, and the
/// conjugation residual along orbits from `(times[0], x)` for a few box points.
pub fn certify(pair: &ConjugacyPair, times: &[f64], box_radius: f64, points_per_axis: usize, horizon: f64) -> Result<ConjugacyCertificate> {
    if times.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let n = pair.op.dim();
    let pts = box_samples(n, box_radius, points_per_axis);
    let jobs: Vec<(f64, DVector<f64>)> = times.iter().flat_map(|&t| pts.iter().map(move |x| (t, x.clone()))).collect();
    let samples: Vec<(SamplePoint, f64, f64)> = jobs
        .par_iter()
        .map(|(t, x)| {
            let hx = pair.h_map(*t, x)?;
            let (a, b) = pair.roundtrip(*t, x)?;
            Ok((SamplePoint { t: *t, x: x.as_slice().to_vec(), h: hx.as_slice().to_vec(), roundtrip: a.max(b) }, a, b))
        })
        .collect::<Result<_>>()?;
    let mut disp = 0.0f64;
    let (mut rlh, mut rhl) = (0.0f64, 0.0f64);
    let mut growth_ok = true;
    for (s, a, b) in &samples {
        let x = DVector::from_column_slice(&s.x);
        let h = DVector::from_column_slice(&s.h);
        disp = disp.max((&h - &x).norm());
        rlh = rlh.max(*a);
        rhl = rhl.max(*b);
        growth_ok &= h.norm() >= x.norm() - pair.bound - 1e-12;
    }
    let mut sep = f64::INFINITY;
    for &t in times {
        let imgs: Vec<&SamplePoint> = samples.iter().map(|s| &s.0).filter(|s| s.t == t).collect();
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                let d: f64 = imgs[i].h.iter().zip(&imgs[j].h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                sep = sep.min(d);
            }
        }
    }
    // orbits from the first time through the corners and the center of the box
    let tbar = times[0];
    let mut starts = vec![DVector::zeros(n)];
    starts.push(DVector::from_element(n, box_radius));
    starts.push(DVector::from_fn(n, |i, _| if i % 2 == 0 { box_radius } else { -box_radius }));
    let mut conj = 0.0f64;
    let mut conj_tol_ok = true;
    for x in &starts {
        let r = pair.conjugation_residual(tbar, x, horizon)?;
        conj = conj.max(r);
        conj_tol_ok &= r <= 1e-5 * (1.0 + x.norm());
    }
    let measured = pair.measured_contraction();
    let pass = disp <= pair.bound * (1.0 + 1e-9)
        && rlh <= pair.config.roundtrip_tol
        && rhl <= pair.config.roundtrip_tol
        && conj_tol_ok
        && measured <= pair.contraction_theory + pair.config.contraction_slack
        && sep > 1e-9
        && growth_ok;
    Ok(ConjugacyCertificate {
        window: (pair.grid.t0, pair.grid.end()),
        truncation: pair.truncation,
        bound: pair.bound,
        max_displacement: disp,
        max_roundtrip_lh: rlh,
        max_roundtrip_hl: rhl,
        conjugation_residual: conj,
        conjugation_tol: 1e-5 * (1.0 + box_radius * (n as f64).sqrt()),
        measured_contraction: measured,
        contraction_theory: pair.contraction_theory,
        min_image_separation: sep,
        growth_ok,
        samples: samples.into_iter().map(|s| s.0).collect(),
        pass,
    })
}
