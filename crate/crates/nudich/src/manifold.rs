//! Lipschitz stable manifolds of `x' = A(t) x + f(t, x, λ)` on the half-line.
//!
//! The manifold is the graph of `Φ(s, ·) : E(s) -> F(s)` over a shrinking ball
//! of radius `β(s)^{-ε}`. For fixed `Φ` the stable component `u` solves a
//! forward integral equation (inner Picard loop); `Φ` is then updated by the
//! backward integral of the unstable part along `u` (outer graph transform).

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dichotomy::DichotomySpec;
use crate::error::{Error, Result};
use crate::evolution::EvolutionOperator;
use crate::linalg::range_basis;
use crate::quad::{integrate_to_infinity, truncation_length, QuadConfig, TailIntegral};
use crate::system::{LipschitzKind, NonlinearTerm, ParameterSpace};
use crate::varconst::{backward_unstable, forward_stable, interp_mids, CellPropagators, GridProjections, UniformGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ManifoldConfig {
    /// Certified slices lie in `[0, s_max]`.
    pub s_max: f64,
    /// Spacing of the `s` slices; a multiple of `step`.
    pub ds: f64,
    pub step: f64,
    /// Grid points per axis of `E(s)`.
    pub xi_points: usize,
    pub tail_tol: f64,
    pub fp_tol: f64,
    pub inner_tol: f64,
    pub max_iter: usize,
    pub inner_max_iter: usize,
    /// Longest flow time used by the invariance and Lipschitz checks.
    pub horizon: f64,
    /// Constant radius used when `ε = 0`.
    pub fallback_radius: Option<f64>,
    pub inv_tol: f64,
    pub contraction_slack: f64,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        ManifoldConfig {
            s_max: 1.0,
            ds: 0.05,
            step: 0.01,
            xi_points: 41,
            tail_tol: 1e-10,
            fp_tol: 1e-10,
            inner_tol: 1e-13,
            max_iter: 60,
            inner_max_iter: 100,
            horizon: 2.0,
            fallback_radius: None,
            inv_tol: 1e-4,
            contraction_slack: 0.05,
        }
    }
}

/// Constants of the existence proof for given `ĉ`, `q` and `K`.
#[derive(Debug, Clone, Serialize)]
pub struct ManifoldConstants {
    pub c_hat: f64,
    pub q: f64,
    pub k: f64,
    /// `6^{q+1} ĉ K^{q+1}`
    pub smallness: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    /// `2 · 3^{q+1} K² ĉ`
    pub h_prime: f64,
    pub h_const: f64,
    /// `2 · 6^q ĉ K^q (2K + 3 K2)`
    pub outer_theory: f64,
    /// `3 K1`
    pub d_bound: f64,
    /// `3 K3 + 2 K H (1 + K3/K)`
    pub d_star_bound: f64,
    pub margins: Vec<(String, f64)>,
}

impl ManifoldConstants {
    pub fn new(c_hat: f64, q: f64, k: f64) -> Result<Self> {
        if !(c_hat >= 0.0 && q > 0.0 && k >= 1.0) {
            return Err(Error::InvalidParam(format!("need ĉ >= 0, q > 0, K >= 1 (got {c_hat}, {q}, {k})")));
        }
        let smallness = 6f64.powf(q + 1.0) * c_hat * k.powf(q + 1.0);
        let k1 = k / (1.0 - smallness);
        let k2 = 4.0 * 6f64.powf(q) * c_hat * k.powf(q + 2.0) / (1.0 - smallness);
        let outer_theory = 2.0 * 6f64.powf(q) * c_hat * k.powf(q) * (2.0 * k + 3.0 * k2);
        let h_prime = 2.0 * 3f64.powf(q + 1.0) * k * k * c_hat;
        let h_const = h_prime / (1.0 - 2.0 * h_prime / 3.0);
        let g = h_prime * (1.0 + 2.0 * h_const / 3.0);
        let k3 = g / (1.0 - g / k);
        let margins = vec![
            ("6^(q+1) c K^(q+1) < 1".to_string(), 1.0 - smallness),
            ("outer contraction < 1".to_string(), 1.0 - outer_theory),
            ("(2/3) h' < 1".to_string(), 1.0 - 2.0 * h_prime / 3.0),
            ("h'(1 + 2H/3) < K".to_string(), 1.0 - g / k),
        ];
        Ok(ManifoldConstants {
            c_hat,
            q,
            k,
            smallness,
            k1,
            k2,
            k3,
            h_prime,
            h_const,
            outer_theory,
            d_bound: 3.0 * k1,
            d_star_bound: 3.0 * k3 + 2.0 * k * h_const * (1.0 + k3 / k),
            margins,
        })
    }

    pub fn ok(&self) -> bool {
        self.margins.iter().all(|(_, m)| *m > 0.0)
    }
}

/// `C(t) = ∫_t^∞ h^{aq} max(μ^ε, ν^ε)`.
pub fn c_integral(spec: &DichotomySpec, q: f64, t: f64, quad: &QuadConfig) -> Result<TailIntegral> {
    let r = &spec.rates;
    let (a, e) = (spec.a, spec.eps);
    integrate_to_infinity(|s| (a * q * r.h.ln_eval(s) + e * r.mu.ln_eval(s).max(r.nu.ln_eval(s))).exp(), t, quad)
}

/// `ln β(t)` from `ln C(t)`; needs `ε > 0`.
fn ln_beta(spec: &DichotomySpec, q: f64, t: f64, ln_c: f64) -> f64 {
    let r = &spec.rates;
    let eq = spec.eps * q;
    (spec.b * r.k.ln_eval(t) - spec.a * (q + 1.0) * r.h.ln_eval(t) + ln_c) / eq + (1.0 + 1.0 / q) * r.mu.ln_eval(t)
}

#[derive(Debug, Clone, Serialize)]
pub struct RadiusFunction {
    pub times: Vec<f64>,
    /// `C(t)`; empty under the constant-radius fallback.
    pub c: Vec<f64>,
    pub ln_beta: Vec<f64>,
    /// `β(t)^{-ε}`
    pub radius: Vec<f64>,
    pub fallback: bool,
}

/// `C`, `β` and the ball radius at `times`. With `ε = 0` the constant
/// `fallback` is used and `C`, `β` are left empty.
pub fn compute_radius(spec: &DichotomySpec, q: f64, times: &[f64], fallback: Option<f64>, quad: &QuadConfig) -> Result<RadiusFunction> {
    if times.iter().any(|&t| t < 0.0) {
        return Err(Error::InvalidParam("radius times must be >= 0".into()));
    }
    if spec.eps == 0.0 {
        let r = fallback.ok_or_else(|| Error::Precondition("ε = 0 leaves β undefined; supply a constant fallback radius".into()))?;
        if !(r > 0.0) {
            return Err(Error::InvalidParam("fallback radius must be positive".into()));
        }
        return Ok(RadiusFunction { times: times.to_vec(), c: vec![], ln_beta: vec![], radius: vec![r; times.len()], fallback: true });
    }
    if !(q > 0.0) {
        return Err(Error::InvalidParam("q must be positive".into()));
    }
    let c: Vec<f64> = times.iter().map(|&t| c_integral(spec, q, t, quad).map(|v| v.value)).collect::<Result<_>>()?;
    if c.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Divergent("C(t) is not positive and finite".into()));
    }
    let lb: Vec<f64> = times.iter().zip(&c).map(|(&t, cv)| ln_beta(spec, q, t, cv.ln())).collect();
    let radius = lb.iter().map(|l| (-spec.eps * l).exp()).collect();
    Ok(RadiusFunction { times: times.to_vec(), c, ln_beta: lb, radius, fallback: false })
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifoldHypotheses {
    /// `k^{-b} h^a ν^ε` at the last probe relative to the first.
    pub integrand_decay: f64,
    pub integrand_decay_ok: bool,
    /// Largest increase of `ln(h^a β^ε)` between consecutive probes.
    pub envelope_worst_increase: f64,
    pub envelope_ok: bool,
    pub zero_at_origin: bool,
    pub constants_ok: bool,
    pub pass: bool,
}

pub struct ManifoldProblem {
    pub spec: DichotomySpec,
    pub f: NonlinearTerm,
    pub params: Option<ParameterSpace>,
    pub config: ManifoldConfig,
    pub constants: ManifoldConstants,
    pub hypotheses: ManifoldHypotheses,
    pub radius: RadiusFunction,
    /// Truncation length of the forward and backward integrals.
    pub tail: f64,
    pub grid: UniformGrid,
    op: Arc<EvolutionOperator>,
    quad: QuadConfig,
    cells: CellPropagators,
    proj: GridProjections,
    every: usize,
    bases: Vec<DMatrix<f64>>,
    coords: Vec<DMatrix<f64>>,
    m: usize,
}

impl std::fmt::Debug for ManifoldProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ManifoldProblem")
            .field("constants", &self.constants)
            .field("hypotheses", &self.hypotheses)
            .field("tail", &self.tail)
            .field("grid", &self.grid)
            .finish()
    }
}

impl ManifoldProblem {
    pub fn new(
        spec: &DichotomySpec,
        op: Arc<EvolutionOperator>,
        f: &NonlinearTerm,
        params: Option<ParameterSpace>,
        config: &ManifoldConfig,
        quad: &QuadConfig,
    ) -> Result<Self> {
        let (c_hat, q) = match f.kind {
            LipschitzKind::Manifold { c_hat, q } => (c_hat, q),
            LipschitzKind::Conjugacy { .. } => {
                return Err(Error::InvalidParam(format!("term `{}` carries conjugacy constants, not manifold ones", f.name())))
            }
        };
        let n = op.dim();
        if f.dim() != n || spec.p.dim() != n {
            return Err(Error::InvalidParam("term, spec and system dimensions differ".into()));
        }
        let m = spec.p.rank();
        if m == 0 {
            return Err(Error::InvalidParam("the stable space is trivial".into()));
        }
        if !(spec.a < 0.0) {
            return Err(Error::Precondition("the stable exponent a must be negative".into()));
        }
        let every = (config.ds / config.step).round() as usize;
        if every == 0 || (every as f64 * config.step - config.ds).abs() > 1e-9 * config.ds {
            return Err(Error::InvalidParam("ds must be a positive multiple of step".into()));
        }
        if config.xi_points < 2 {
            return Err(Error::InvalidParam("need at least two points per axis".into()));
        }
        let constants = ManifoldConstants::new(c_hat, q, spec.k_const)?;
        let r = &spec.rates;
        let (a, b, e) = (spec.a, spec.b, spec.eps);
        // integrand envelope of the backward integral relative to its value at s
        let mut tail = 1.0f64;
        for s in [0.0, config.s_max] {
            let env = |l: f64| {
                let t = s + l;
                (constants.smallness * spec.k_const)
                    * (-b * (r.k.ln_eval(t) - r.k.ln_eval(s))
                        + a * (q + 1.0) * (r.h.ln_eval(t) - r.h.ln_eval(s))
                        + e * (r.nu.ln_eval(t) - r.nu.ln_eval(s)))
                    .exp()
            };
            tail = tail.max(truncation_length(env, config.tail_tol, 1e3)?);
        }
        let end = ((config.s_max + config.horizon + tail) / config.ds).ceil() * config.ds;
        let grid = UniformGrid::new(0.0, end, config.step)?;
        let slices = grid.n / every + 1;
        let slice_times: Vec<f64> = (0..slices).map(|j| grid.node(j * every)).collect();
        let radius = compute_radius(spec, q, &slice_times, config.fallback_radius, quad)?;

        // hypotheses on probes
        let probes: Vec<f64> = (0..=40).map(|i| i as f64 * end.max(10.0) / 40.0).collect();
        let integrand: Vec<f64> = probes.iter().map(|&t| -b * r.k.ln_eval(t) + a * r.h.ln_eval(t) + e * r.nu.ln_eval(t)).collect();
        let integrand_decay = (integrand[integrand.len() - 1] - integrand[0]).exp();
        let integrand_decay_ok = integrand_decay < 1e-3 && integrand[integrand.len() / 2..].windows(2).all(|w| w[1] <= w[0] + 1e-12);
        let envelope: Vec<f64> = if spec.eps == 0.0 {
            probes.iter().map(|&t| a * r.h.ln_eval(t)).collect()
        } else {
            probes
                .iter()
                .map(|&t| Ok(a * r.h.ln_eval(t) + e * ln_beta(spec, q, t, c_integral(spec, q, t, quad)?.value.ln())))
                .collect::<Result<_>>()?
        };
        let envelope_worst_increase = envelope.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        let envelope_ok = envelope_worst_increase <= 1e-10;
        let zero_at_origin = f.check_zero_at_origin(&probes, &params_probe(params.as_ref()))? == 0.0;
        let constants_ok = constants.ok();
        let hypotheses = ManifoldHypotheses {
            integrand_decay,
            integrand_decay_ok,
            envelope_worst_increase,
            envelope_ok,
            zero_at_origin,
            constants_ok,
            pass: integrand_decay_ok && envelope_ok && zero_at_origin && constants_ok,
        };

        let cells = CellPropagators::new(&op, grid)?;
        let proj = GridProjections::new(&spec.p, &grid);
        let bases: Vec<DMatrix<f64>> = slice_times.iter().map(|&t| range_basis(&spec.p.at(t), m)).collect();
        let coords = bases.iter().zip(&slice_times).map(|(bm, &t)| bm.transpose() * spec.p.at(t)).collect();
        Ok(ManifoldProblem {
            spec: spec.clone(),
            f: f.clone(),
            params,
            config: *config,
            constants,
            hypotheses,
            radius,
            tail,
            grid,
            op,
            quad: *quad,
            cells,
            proj,
            every,
            bases,
            coords,
            m,
        })
    }

    pub fn operator(&self) -> &EvolutionOperator {
        &self.op
    }

    pub fn stable_dim(&self) -> usize {
        self.m
    }

    pub fn slices(&self) -> usize {
        self.radius.times.len()
    }

    /// Largest `|ξ|` admitted by the invariance statement at `s`:
    /// `(β(s) μ(s))^{-ε} / (2K)`.
    pub fn admissible_radius(&self, s: f64) -> Result<f64> {
        let k = self.spec.k_const;
        if self.spec.eps == 0.0 {
            return Ok(self.radius.radius[0] / (2.0 * k));
        }
        let q = self.constants.q;
        let lc = c_integral(&self.spec, q, s, &self.quad)?.value.ln();
        let lb = ln_beta(&self.spec, q, s, lc);
        Ok((-self.spec.eps * (lb + self.spec.rates.mu.ln_eval(s))).exp() / (2.0 * k))
    }

    fn check_lambda(&self, lambda: &[f64]) -> Result<()> {
        if let Some(p) = &self.params {
            if !p.contains(lambda) {
                return Err(Error::InvalidParam(format!("λ = {lambda:?} outside the parameter box")));
            }
        }
        Ok(())
    }

    /// `(h(t)/h(s))^a μ(s)^ε`
    fn weight(&self, t: f64, s: f64) -> f64 {
        let r = &self.spec.rates;
        (self.spec.a * (r.h.ln_eval(t) - r.h.ln_eval(s)) + self.spec.eps * r.mu.ln_eval(s)).exp()
    }

    /// Zero graph for `λ`.
    pub fn zero_graph(&self, lambda: &[f64]) -> ManifoldGraph {
        let n = self.op.dim();
        let per = self.config.xi_points.pow(self.m as u32);
        ManifoldGraph {
            lambda: lambda.to_vec(),
            slice_times: self.radius.times.clone(),
            radii: self.radius.radius.clone(),
            bases: self.bases.clone(),
            coords: self.coords.clone(),
            points: self.config.xi_points,
            values: vec![vec![DVector::zeros(n); per]; self.slices()],
        }
    }

    /// Stable component `u(·, s, ξ)` on the grid nodes of `[s, s + tail]`, with
    /// `s` a slice time.
    pub fn solve_u(&self, graph: &ManifoldGraph, lambda: &[f64], s: f64, xi: &DVector<f64>) -> Result<UTrajectory> {
        let i0 = self
            .grid
            .index_of(s)
            .filter(|i| i % self.every == 0)
            .ok_or_else(|| Error::InvalidParam(format!("s = {s} is not a slice time")))?;
        let r = self.radius.radius[i0 / self.every];
        if xi.norm() > r * (1.0 + 1e-12) {
            return Err(Error::Precondition(format!("|ξ| = {:.6} exceeds the radius {r:.6} at s = {s}", xi.norm())));
        }
        self.solve_u_at(graph, lambda, i0, xi)
    }

    fn solve_u_at(&self, graph: &ManifoldGraph, lambda: &[f64], i0: usize, xi: &DVector<f64>) -> Result<UTrajectory> {
        let n = self.op.dim();
        let i1 = (i0 + (self.tail / self.grid.h).ceil() as usize).min(self.grid.n);
        let len = i1 - i0 + 1;
        let s = self.grid.node(i0);
        let wts: Vec<f64> = (i0..=i1).map(|i| 1.0 / self.weight(self.grid.node(i), s)).collect();
        let init = DMatrix::from_column_slice(n, 1, xi.as_slice());
        let mut u = Vec::with_capacity(len);
        u.push(&self.proj.p[i0] * &init);
        for i in i0..i1 {
            let next = &self.cells.fwd[i] * &u[i - i0];
            u.push(next);
        }
        let forcing = |u: &[DMatrix<f64>]| -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
            let um = interp_mids(u);
            let at = |t: f64, v: &DMatrix<f64>| {
                let x = DVector::from_column_slice(v.as_slice());
                let full = &x + graph.eval(t, &x);
                let fv = self.f.eval(t, &full, lambda);
                DMatrix::from_column_slice(n, 1, fv.as_slice())
            };
            let g = (0..len).map(|k| at(self.grid.node(i0 + k), &u[k])).collect();
            let gm = (0..len - 1).map(|k| at(self.grid.mid(i0 + k), &um[k])).collect();
            (g, gm)
        };
        let scale = xi.norm().max(1e-300);
        let mut prev = f64::NAN;
        let mut contraction: Option<f64> = None;
        for it in 1..=self.config.inner_max_iter {
            let (g, gm) = forcing(&u);
            let next = forward_stable(&self.cells, &self.proj, &g, &gm, i0, i1, &init, 1.0);
            let diff = next.iter().zip(&u).zip(&wts).map(|((a, b), w)| (a - b).norm() * w).fold(0.0, f64::max);
            if prev.is_finite() && prev > 1e-14 * scale {
                let r = diff / prev;
                contraction = Some(contraction.map_or(r, |c: f64| c.max(r)));
            }
            u = next;
            if diff <= self.config.inner_tol * scale {
                if matches!(contraction, Some(c) if c >= 1.0) {
                    return Err(Error::NoContraction(format!("inner contraction {:.4}", contraction.unwrap())));
                }
                let (g, gm) = forcing(&u);
                let k2 = 2.0 * self.spec.k_const;
                let bound_ratio =
                    u.iter().enumerate().map(|(k, v)| v.norm() / (k2 * self.weight(self.grid.node(i0 + k), s) * scale)).fold(0.0, f64::max);
                return Ok(UTrajectory {
                    first: i0,
                    values: u.iter().map(|v| DVector::from_column_slice(v.as_slice())).collect(),
                    iterations: it,
                    contraction,
                    bound_ratio: if xi.norm() > 0.0 { bound_ratio } else { 0.0 },
                    forcing: (g, gm),
                });
            }
            prev = diff;
        }
        Err(Error::NoContraction(format!("inner loop did not converge in {} iterations", self.config.inner_max_iter)))
    }

    /// One application of the graph transform. Returns the new graph and `|Φ' - Φ|'`.
    pub fn graph_transform(&self, graph: &ManifoldGraph, lambda: &[f64]) -> Result<(ManifoldGraph, TransformStats)> {
        self.check_lambda(lambda)?;
        let n = self.op.dim();
        let per = self.config.xi_points.pow(self.m as u32);
        let jobs: Vec<(usize, usize)> = (0..self.slices()).flat_map(|j| (0..per).map(move |k| (j, k))).collect();
        let out: Vec<(DVector<f64>, f64, usize, f64, f64)> = jobs
            .par_iter()
            .map(|&(j, k)| {
                let xi = graph.node_xi(j, k);
                let xn = xi.norm();
                if xn == 0.0 {
                    return Ok((DVector::zeros(n), 0.0, 0, 0.0, 0.0));
                }
                let i0 = j * self.every;
                let u = self.solve_u_at(graph, lambda, i0, &xi)?;
                let i1 = i0 + u.values.len() - 1;
                let zero = DMatrix::zeros(n, 1);
                let w = backward_unstable(&self.cells, &self.proj, &u.forcing.0, &u.forcing.1, i0, i1, &zero, -1.0);
                let v = DVector::from_column_slice(w[0].as_slice());
                let dist = (&v - &graph.values[j][k]).norm() / xn;
                Ok((v, dist, u.iterations, u.contraction.unwrap_or(0.0), u.bound_ratio))
            })
            .collect::<Result<_>>()?;
        let mut next = graph.clone();
        next.lambda = lambda.to_vec();
        let mut stats = TransformStats::default();
        for (&(j, k), (v, d, it, c, br)) in jobs.iter().zip(out) {
            next.values[j][k] = v;
            stats.distance = stats.distance.max(d);
            stats.inner_iterations = stats.inner_iterations.max(it);
            stats.inner_contraction = stats.inner_contraction.max(c);
            stats.bound_ratio = stats.bound_ratio.max(br);
        }
        Ok((next, stats))
    }

    /// Iterates the graph transform from `Φ = 0` until `|Φ' - Φ|' < fp_tol`.
    pub fn solve_manifold(&self, lambda: &[f64]) -> Result<(ManifoldGraph, SolveStats)> {
        if !self.hypotheses.pass {
            return Err(Error::Precondition(format!("manifold hypotheses fail: {:?}", self.hypotheses)));
        }
        let mut g = self.zero_graph(lambda);
        let mut stats = SolveStats::default();
        let mut prev = f64::NAN;
        for it in 1..=self.config.max_iter {
            let (next, ts) = self.graph_transform(&g, lambda)?;
            g = next;
            stats.distances.push(ts.distance);
            stats.inner_iterations = stats.inner_iterations.max(ts.inner_iterations);
            stats.inner_contraction = stats.inner_contraction.max(ts.inner_contraction);
            stats.bound_ratio = stats.bound_ratio.max(ts.bound_ratio);
            if prev.is_finite() && prev > 1e2 * f64::EPSILON {
                stats.outer_contraction = stats.outer_contraction.max(ts.distance / prev);
            }
            stats.iterations = it;
            if ts.distance < self.config.fp_tol {
                return Ok((g, stats));
            }
            prev = ts.distance;
        }
        Err(Error::NoContraction(format!(
            "graph transform did not converge in {} iterations (last contraction {:.4})",
            self.config.max_iter, stats.outer_contraction
        )))
    }

    /// Starting points `(s, ξ)` with `|ξ| = frac · admissible_radius(s)` along
    /// `±` basis directions and one diagonal direction of `E(s)`.
    pub fn admissible_samples(&self, times: &[f64], fracs: &[f64]) -> Result<Vec<(f64, DVector<f64>)>> {
        let mut out = Vec::new();
        for &s in times {
            if s < 0.0 || s > self.config.s_max + 1e-12 {
                return Err(Error::InvalidParam(format!("sample time {s} outside [0, s_max]")));
            }
            let rho = self.admissible_radius(s)?;
            let b = range_basis(&self.spec.p.at(s), self.m);
            let mut dirs: Vec<DVector<f64>> = Vec::new();
            for i in 0..self.m {
                dirs.push(b.column(i).into_owned());
                dirs.push(-b.column(i).into_owned());
            }
            if self.m > 1 {
                let d: DVector<f64> = b.column_sum();
                dirs.push(&d / d.norm());
            }
            for &fr in fracs {
                for d in &dirs {
                    out.push((s, d * (fr * rho)));
                }
            }
        }
        Ok(out)
    }

    /// Evolves `ξ + Φ(s, ξ) + offset · e_F` under the full system and returns
    /// `(u(t), v(t))` for each `t = s + κ`.
    fn flow_on_graph(
        &self,
        graph: &ManifoldGraph,
        s: f64,
        xi: &DVector<f64>,
        kappas: &[f64],
        offset: f64,
    ) -> Result<Vec<(f64, DVector<f64>, DVector<f64>)>> {
        let n = self.op.dim();
        let mut x0 = xi + graph.eval(s, xi);
        if offset != 0.0 && self.m < n {
            let fq = range_basis(&self.spec.p.complement_at(s), n - self.m);
            x0 += fq.column(0) * offset;
        }
        let times: Vec<f64> = kappas.iter().map(|k| s + k).collect();
        let xs = self.op.nonlinear_path(s, &x0, &times, &self.f, &graph.lambda)?;
        Ok(times
            .into_iter()
            .zip(xs)
            .map(|(t, x)| {
                let p = self.spec.p.at(t);
                let u = &p * &x;
                let v = &x - &u;
                (t, u, v)
            })
            .collect())
    }

    /// `|v(t) - Φ(t, u(t))|` along the flow from graph points; `offset` moves the
    /// start off the graph in a unit direction of `F(s)`.
    pub fn invariance_check(
        &self,
        graph: &ManifoldGraph,
        samples: &[(f64, DVector<f64>)],
        kappas: &[f64],
        offset: f64,
    ) -> Result<InvarianceReport> {
        let mut kap: Vec<f64> = kappas.to_vec();
        kap.sort_by(|a, b| a.total_cmp(b));
        let last = graph.slice_times[graph.slice_times.len() - 1];
        let rows: Vec<Vec<(f64, f64, Option<f64>)>> = samples
            .par_iter()
            .map(|(s, xi)| {
                let flows = self.flow_on_graph(graph, *s, xi, &kap, offset)?;
                Ok(flows
                    .into_iter()
                    .zip(&kap)
                    .map(|((t, u, v), k)| {
                        if t > last {
                            return (*s, *k, None);
                        }
                        let r = (v - graph.eval(t, &u)).norm() / (xi.norm() + self.config.fp_tol);
                        (*s, *k, Some(r))
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let mut worst = 0.0f64;
        let mut least = f64::INFINITY;
        let mut skipped = 0;
        let mut residuals = Vec::new();
        for row in rows {
            for (s, k, r) in row {
                match r {
                    Some(r) => {
                        worst = worst.max(r);
                        least = least.min(r);
                        residuals.push((s, k, r));
                    }
                    None => skipped += 1,
                }
            }
        }
        Ok(InvarianceReport { worst, least, skipped, residuals, pass: worst <= self.config.inv_tol })
    }

    /// Largest `|Ψ(s, ξ1) - Ψ(s, ξ2)| / ((h(t)/h(s))^a μ(s)^ε |ξ1 - ξ2|)` over
    /// sample pairs sharing `s`.
    pub fn lipschitz_d(&self, graph: &ManifoldGraph, samples: &[(f64, DVector<f64>)], kappas: &[f64]) -> Result<f64> {
        let flows: Vec<Vec<(f64, DVector<f64>, DVector<f64>)>> =
            samples.par_iter().map(|(s, xi)| self.flow_on_graph(graph, *s, xi, kappas, 0.0)).collect::<Result<_>>()?;
        let mut d = 0.0f64;
        for i in 0..samples.len() {
            for j in i + 1..samples.len() {
                let (s, x1) = &samples[i];
                let (s2, x2) = &samples[j];
                let dx = (x1 - x2).norm();
                if s != s2 || dx == 0.0 {
                    continue;
                }
                for (a, b) in flows[i].iter().zip(&flows[j]) {
                    let diff = (&a.1 - &b.1).norm_squared() + (&a.2 - &b.2).norm_squared();
                    d = d.max(diff.sqrt() / (self.weight(a.0, *s) * dx));
                }
            }
        }
        Ok(d)
    }

    /// Largest `|Ψ^{λ1}(s, ξ) - Ψ^{λ2}(s, ξ)| / ((h(t)/h(s))^a μ(s)^ε |λ1 - λ2| |ξ|)`.
    pub fn lipschitz_d_star(&self, g1: &ManifoldGraph, g2: &ManifoldGraph, samples: &[(f64, DVector<f64>)], kappas: &[f64]) -> Result<f64> {
        let dl: f64 = g1.lambda.iter().zip(&g2.lambda).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dl == 0.0 {
            return Err(Error::InvalidParam("the two graphs share λ".into()));
        }
        let vals: Vec<f64> = samples
            .par_iter()
            .map(|(s, xi)| {
                let a = self.flow_on_graph(g1, *s, xi, kappas, 0.0)?;
                let b = self.flow_on_graph(g2, *s, xi, kappas, 0.0)?;
                let xn = xi.norm();
                if xn == 0.0 {
                    return Ok(0.0);
                }
                Ok(a.iter()
                    .zip(&b)
                    .map(|(p, q)| {
                        let diff = ((&p.1 - &q.1).norm_squared() + (&p.2 - &q.2).norm_squared()).sqrt();
                        diff / (self.weight(p.0, *s) * dl * xn)
                    })
                    .fold(0.0, f64::max))
            })
            .collect::<Result<_>>()?;
        Ok(vals.into_iter().fold(0.0, f64::max))
    }
}

fn params_probe(p: Option<&ParameterSpace>) -> Vec<Vec<f64>> {
    match p {
        Some(p) => vec![p.lo.clone(), p.hi.clone()],
        None => vec![vec![]],
    }
}

#[derive(Debug, Clone)]
pub struct UTrajectory {
    pub first: usize,
    pub values: Vec<DVector<f64>>,
    pub iterations: usize,
    pub contraction: Option<f64>,
    /// Largest `|u(t)| / (2K (h(t)/h(s))^a μ(s)^ε |ξ|)`.
    pub bound_ratio: f64,
    forcing: (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>),
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TransformStats {
    pub distance: f64,
    pub inner_iterations: usize,
    pub inner_contraction: f64,
    pub bound_ratio: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub distances: Vec<f64>,
    pub outer_contraction: f64,
    pub inner_iterations: usize,
    pub inner_contraction: f64,
    pub bound_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvarianceReport {
    /// Largest residual divided by `|ξ| + fp_tol`.
    pub worst: f64,
    pub least: f64,
    /// Flows that left the slice range.
    pub skipped: usize,
    #[serde(skip)]
    pub residuals: Vec<(f64, f64, f64)>,
    pub pass: bool,
}

/// `Φ(s, ·)` stored on tensor grids in normalized coordinates of `E(s)`,
/// multilinear in `ξ` and linear in `s` between slices.
#[derive(Debug, Clone)]
pub struct ManifoldGraph {
    pub lambda: Vec<f64>,
    pub slice_times: Vec<f64>,
    pub radii: Vec<f64>,
    bases: Vec<DMatrix<f64>>,
    coords: Vec<DMatrix<f64>>,
    points: usize,
    pub values: Vec<Vec<DVector<f64>>>,
}

impl ManifoldGraph {
    fn axis(&self, i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / (self.points - 1) as f64
    }

    /// Grid node `k` of slice `j` in `E(s_j)`, pulled radially into the ball.
    pub fn node_xi(&self, j: usize, mut k: usize) -> DVector<f64> {
        let m = self.bases[j].ncols();
        let r = self.radii[j];
        let mut c = DVector::from_fn(m, |_, _| {
            let v = self.axis(k % self.points);
            k /= self.points;
            v * r
        });
        let cn = c.norm();
        if cn > r {
            c *= r / cn;
        }
        &self.bases[j] * c
    }

    fn eval_slice(&self, j: usize, x: &DVector<f64>) -> DVector<f64> {
        let mut c = &self.coords[j] * x;
        let r = self.radii[j];
        let cn = c.norm();
        if cn > r {
            c *= r / cn;
        }
        let m = c.len();
        let np = self.points;
        let mut idx = vec![0usize; m];
        let mut w = vec![0.0f64; m];
        for d in 0..m {
            let pos = ((c[d] / r).clamp(-1.0, 1.0) + 1.0) * 0.5 * (np - 1) as f64;
            let i = (pos.floor() as usize).min(np - 2);
            idx[d] = i;
            w[d] = pos - i as f64;
        }
        let vals = &self.values[j];
        let mut out = DVector::zeros(vals[0].len());
        for corner in 0..(1usize << m) {
            let mut k = 0;
            let mut stride = 1;
            let mut wt = 1.0;
            for d in 0..m {
                let bit = (corner >> d) & 1;
                k += (idx[d] + bit) * stride;
                stride *= np;
                wt *= if bit == 1 { w[d] } else { 1.0 - w[d] };
            }
            if wt != 0.0 {
                out += &vals[k] * wt;
            }
        }
        out
    }

    /// `Φ(t, x)` for `x` in `E(t)`; times past the last slice use the last slice.
    pub fn eval(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let last = self.slice_times.len() - 1;
        let ds = if last > 0 { self.slice_times[1] - self.slice_times[0] } else { 1.0 };
        let pos = ((t - self.slice_times[0]) / ds).max(0.0);
        let j = (pos.floor() as usize).min(last);
        let w = pos - j as f64;
        if j == last || w < 1e-12 {
            return self.eval_slice(j, x);
        }
        if w > 1.0 - 1e-12 {
            return self.eval_slice(j + 1, x);
        }
        self.eval_slice(j, x) * (1.0 - w) + self.eval_slice(j + 1, x) * w
    }

    /// `|Φ1 - Φ2|'` over the grid nodes of slices at times `<= s_max`.
    pub fn distance(&self, other: &ManifoldGraph, s_max: f64) -> f64 {
        let mut d = 0.0f64;
        for j in 0..self.values.len() {
            if self.slice_times[j] > s_max + 1e-12 {
                break;
            }
            for k in 0..self.values[j].len() {
                let xn = self.node_xi(j, k).norm();
                if xn > 0.0 {
                    d = d.max((&self.values[j][k] - &other.values[j][k]).norm() / xn);
                }
            }
        }
        d
    }

    /// Largest difference quotient between grid nodes of one slice, over slices `<= s_max`.
    pub fn lipschitz(&self, s_max: f64) -> f64 {
        let mut l = 0.0f64;
        for j in 0..self.values.len() {
            if self.slice_times[j] > s_max + 1e-12 {
                break;
            }
            let xs: Vec<DVector<f64>> = (0..self.values[j].len()).map(|k| self.node_xi(j, k)).collect();
            for a in 0..xs.len() {
                for b in a + 1..xs.len() {
                    let dx = (&xs[a] - &xs[b]).norm();
                    if dx > 1e-14 {
                        l = l.max((&self.values[j][a] - &self.values[j][b]).norm() / dx);
                    }
                }
            }
        }
        l
    }

    /// Largest `|P(s) Φ(s, ξ)|` over all nodes.
    pub fn containment(&self, spec: &DichotomySpec) -> f64 {
        let mut w = 0.0f64;
        for (j, vals) in self.values.iter().enumerate() {
            let p = spec.p.at(self.slice_times[j]);
            for v in vals {
                w = w.max((&p * v).norm());
            }
        }
        w
    }

    /// Rows `s, ξ coordinates, Φ coordinates` for slices `<= s_max`.
    pub fn write_csv<W: Write>(&self, w: W, s_max: f64) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let n = self.values[0][0].len();
        let mut header = vec!["s".to_string()];
        header.extend((0..n).map(|i| format!("xi{i}")));
        header.extend((0..n).map(|i| format!("phi{i}")));
        wr.write_record(&header)?;
        for (j, vals) in self.values.iter().enumerate() {
            if self.slice_times[j] > s_max + 1e-12 {
                break;
            }
            for (k, v) in vals.iter().enumerate() {
                let xi = self.node_xi(j, k);
                let mut row = vec![format!("{}", self.slice_times[j])];
                row.extend(xi.iter().map(|x| format!("{x:.12e}")));
                row.extend(v.iter().map(|x| format!("{x:.12e}")));
                wr.write_record(&row)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub dlambda: f64,
    /// Largest flow discrepancy divided by `(h(t)/h(s))^a μ(s)^ε |ξ|`.
    pub discrepancy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifoldCertificate {
    pub constants: ManifoldConstants,
    pub hypotheses: ManifoldHypotheses,
    pub tail: f64,
    pub iterations: Vec<usize>,
    pub outer_contraction: f64,
    pub inner_contraction: f64,
    pub inner_bound_ratio: f64,
    pub graph_lipschitz: f64,
    /// `6^{q+1} ĉ K^{q+1} K1`
    pub graph_lipschitz_bound: f64,
    pub containment: f64,
    pub invariance: InvarianceReport,
    /// Smallest residual ratio of the off-graph control.
    pub off_graph_least: f64,
    pub d: f64,
    pub d_star: Option<f64>,
    /// `|Φ^{λ1} - Φ^{λ2}|' / (H |λ1 - λ2|)` over consecutive sweep values.
    pub phi_lambda_ratio: Option<f64>,
    pub sweep: Vec<SweepPoint>,
    /// Largest relative residual of the fit `discrepancy = slope · Δλ`.
    pub sweep_linear_residual: Option<f64>,
    pub pass: bool,
}

/// Solves for every `λ` in `lambdas` and fills the certificate. The first
/// value drives the invariance and `d` checks; the others form the sweep.
pub fn certify(problem: &ManifoldProblem, lambdas: &[Vec<f64>], kappas: &[f64]) -> Result<(Vec<ManifoldGraph>, ManifoldCertificate)> {
    if lambdas.is_empty() {
        return Err(Error::InvalidParam("no parameter values".into()));
    }
    let cfg = &problem.config;
    let mut graphs = Vec::new();
    let mut iterations = Vec::new();
    let (mut outer, mut inner, mut bound) = (0.0f64, 0.0f64, 0.0f64);
    for l in lambdas {
        let (g, st) = problem.solve_manifold(l)?;
        iterations.push(st.iterations);
        outer = outer.max(st.outer_contraction);
        inner = inner.max(st.inner_contraction);
        bound = bound.max(st.bound_ratio);
        graphs.push(g);
    }
    let g0 = &graphs[0];
    let times = [0.0, 0.5 * cfg.s_max, cfg.s_max];
    let samples = problem.admissible_samples(&times, &[0.37, 0.81])?;
    let invariance = problem.invariance_check(g0, &samples, kappas, 0.0)?;
    let off = problem.invariance_check(g0, &samples, kappas, 0.1)?;
    let d = problem.lipschitz_d(g0, &samples, kappas)?;
    let c = &problem.constants;
    let graph_lipschitz = graphs.iter().map(|g| g.lipschitz(cfg.s_max)).fold(0.0, f64::max);
    let containment = graphs.iter().map(|g| g.containment(&problem.spec)).fold(0.0, f64::max);
    let mut d_star = None;
    let mut phi_ratio = None;
    let mut sweep = Vec::new();
    let mut lin = None;
    if graphs.len() > 1 {
        let mut ds = 0.0f64;
        let mut pr = 0.0f64;
        for w in graphs.windows(2) {
            let dl: f64 = w[0].lambda.iter().zip(&w[1].lambda).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            ds = ds.max(problem.lipschitz_d_star(&w[0], &w[1], &samples, kappas)?);
            pr = pr.max(w[0].distance(&w[1], cfg.s_max) / (c.h_const * dl));
        }
        for g in &graphs[1..] {
            let dl: f64 = g0.lambda.iter().zip(&g.lambda).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let dstar = problem.lipschitz_d_star(g0, g, &samples, kappas)?;
            sweep.push(SweepPoint { dlambda: dl, discrepancy: dstar * dl });
        }
        let sxx: f64 = sweep.iter().map(|p| p.dlambda * p.dlambda).sum();
        let sxy: f64 = sweep.iter().map(|p| p.dlambda * p.discrepancy).sum();
        let slope = sxy / sxx;
        lin = Some(
            sweep
                .iter()
                .map(|p| if p.discrepancy > 0.0 { (p.discrepancy - slope * p.dlambda).abs() / p.discrepancy } else { 0.0 })
                .fold(0.0, f64::max),
        );
        d_star = Some(ds);
        phi_ratio = Some(pr);
    }
    let graph_lipschitz_bound = c.smallness * c.k1;
    let pass = problem.hypotheses.pass
        && outer <= c.outer_theory + cfg.contraction_slack
        && inner <= c.smallness + cfg.contraction_slack
        && bound <= 1.0 + 1e-9
        && graph_lipschitz <= 1.0
        && graph_lipschitz <= graph_lipschitz_bound * (1.0 + 1e-9)
        && containment <= 1e-9
        && invariance.pass
        && off.least > cfg.inv_tol
        && d <= c.d_bound
        && d_star.map_or(true, |v| v <= c.d_star_bound)
        && phi_ratio.map_or(true, |v| v <= 1.0)
        && lin.map_or(true, |v| v <= 0.1);
    let cert = ManifoldCertificate {
        constants: c.clone(),
        hypotheses: problem.hypotheses.clone(),
        tail: problem.tail,
        iterations,
        outer_contraction: outer,
        inner_contraction: inner,
        inner_bound_ratio: bound,
        graph_lipschitz,
        graph_lipschitz_bound,
        containment,
        invariance,
        off_graph_least: off.least,
        d,
        d_star,
        phi_lambda_ratio: phi_ratio,
        sweep,
        sweep_linear_residual: lin,
        pass,
    };
    Ok((graphs, cert))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dichotomy::ProjectionFamily;
    use crate::evolution::IntegratorConfig;
    use crate::growth::{GrowthRate, RateQuadruple};
    use crate::system::CoefficientField;

    fn half_line(a: f64, b: f64, eps: f64) -> (DichotomySpec, Arc<EvolutionOperator>) {
        let spec = DichotomySpec::new(
            ProjectionFamily::leading(2, 1),
            RateQuadruple::new(GrowthRate::exp(), GrowthRate::exp(), GrowthRate::exp(), GrowthRate::exp()),
            1.0,
            a,
            b,
            eps,
        )
        .unwrap();
        let op = EvolutionOperator::new(CoefficientField::const_diag(&[a, b]).unwrap(), IntegratorConfig::default()).unwrap();
        (spec, Arc::new(op))
    }

    fn small_config() -> ManifoldConfig {
        ManifoldConfig { s_max: 0.5, ds: 0.1, step: 0.01, xi_points: 41, horizon: 2.0, ..ManifoldConfig::default() }
    }

    #[test]
    fn c_integral_closed_form() {
        let (spec, _) = half_line(-1.0, 1.0, 0.1);
        let q = QuadConfig::default();
        for t in [0.0, 0.7, 2.0] {
            let c = c_integral(&spec, 2.0, t, &q).unwrap().value;
            let exact = (-1.9 * t).exp() / 1.9;
            assert!((c - exact).abs() < 1e-9 * exact, "{c} vs {exact}");
        }
        // β by hand for the same data: ln β = (t + 3t - 1.9t - ln 1.9)/0.2 + 1.5 t
        let r = compute_radius(&spec, 2.0, &[0.0, 1.0], None, &q).unwrap();
        for (i, t) in [0.0f64, 1.0].iter().enumerate() {
            let lb = (2.1 * t - 1.9f64.ln()) / 0.2 + 1.5 * t;
            assert!((r.ln_beta[i] - lb).abs() < 1e-8);
        }
    }

    #[test]
    fn envelope_needs_fast_stable_rate() {
        let q = QuadConfig::default();
        let cfg = small_config();
        let f = NonlinearTerm::cubic_feed(2, 1e-3, 1.0);
        let (spec, op) = half_line(-1.0, 1.0, 0.1);
        let p = ManifoldProblem::new(&spec, op, &f, None, &cfg, &q).unwrap();
        assert!(!p.hypotheses.envelope_ok && p.hypotheses.integrand_decay_ok);
        assert!(matches!(p.solve_manifold(&[1.0]), Err(Error::Precondition(_))));
        let (spec, op) = half_line(-2.0, 1.0, 0.1);
        let p = ManifoldProblem::new(&spec, op, &f, None, &cfg, &q).unwrap();
        assert!(p.hypotheses.pass, "{:?}", p.hypotheses);
    }

    #[test]
    fn zero_eps_needs_fallback() {
        let q = QuadConfig::default();
        let (spec, op) = half_line(-2.0, 1.0, 0.0);
        let f = NonlinearTerm::cubic_feed(2, 1e-3, 1.0);
        let cfg = small_config();
        assert!(matches!(ManifoldProblem::new(&spec, op.clone(), &f, None, &cfg, &q), Err(Error::Precondition(_))));
        let cfg = ManifoldConfig { fallback_radius: Some(0.5), ..cfg };
        let p = ManifoldProblem::new(&spec, op, &f, None, &cfg, &q).unwrap();
        assert!(p.radius.fallback && p.radius.radius.iter().all(|&r| r == 0.5));
    }

    #[test]
    fn zero_term_gives_zero_graph() {
        let q = QuadConfig::default();
        let (spec, op) = half_line(-2.0, 1.0, 0.1);
        let f = NonlinearTerm::zero(2, LipschitzKind::Manifold { c_hat: 0.0, q: 2.0 });
        let p = ManifoldProblem::new(&spec, op, &f, None, &small_config(), &q).unwrap();
        let g0 = p.zero_graph(&[]);
        let xi = DVector::from_row_slice(&[0.5, 0.0]);
        let u = p.solve_u(&g0, &[], 0.0, &xi).unwrap();
        assert_eq!(u.iterations, 1);
        for (k, v) in u.values.iter().enumerate() {
            let t = p.grid.node(k);
            assert!((v[0] - 0.5 * (-2.0 * t).exp()).abs() < 1e-8);
        }
        let (g, st) = p.solve_manifold(&[]).unwrap();
        assert_eq!(st.iterations, 1);
        assert!(g.values.iter().flatten().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn stable_component_matches_bernoulli_solution() {
        // u' = -u + c u^3 in E, nothing in F; Φ = 0
        let q = QuadConfig::default();
        let (spec, op) = half_line(-1.0, 1.0, 0.1);
        let c0 = 2e-3;
        let f = NonlinearTerm::new("cube_e", 2, LipschitzKind::Manifold { c_hat: 1.5 * c0, q: 2.0 }, true, move |_, x, _| {
            DVector::from_row_slice(&[c0 * x[0].powi(3), 0.0])
        });
        let p = ManifoldProblem::new(&spec, op, &f, None, &small_config(), &q).unwrap();
        let g0 = p.zero_graph(&[]);
        let r = p.radius.radius[0];
        let xi0 = 0.9 * r;
        let u = p.solve_u(&g0, &[], 0.0, &DVector::from_row_slice(&[xi0, 0.0])).unwrap();
        let exact = |t: f64| xi0 * (-t).exp() / (1.0 - c0 * xi0 * xi0 * (1.0 - (-2.0 * t).exp())).sqrt();
        for (k, v) in u.values.iter().enumerate() {
            let t = p.grid.node(k);
            assert!((v[0] - exact(t)).abs() < 1e-9, "t = {t}");
            assert!(v.norm() <= 2.0 * (-t).exp() * xi0);
        }
        assert!(u.contraction.unwrap() <= p.constants.smallness + 0.05);
        // halving ξ halves u up to the cubic correction
        let h = p.solve_u(&g0, &[], 0.0, &DVector::from_row_slice(&[xi0 / 2.0, 0.0])).unwrap();
        let dev = u.values.iter().zip(&h.values).map(|(a, b)| (a * 0.5 - b).norm()).fold(0.0, f64::max);
        assert!(dev <= 1.5 * c0 * xi0.powi(3), "{dev}");
        // boundary accepted, beyond rejected
        assert!(p.solve_u(&g0, &[], 0.0, &DVector::from_row_slice(&[r, 0.0])).is_ok());
        assert!(matches!(p.solve_u(&g0, &[], 0.0, &DVector::from_row_slice(&[1.01 * r, 0.0])), Err(Error::Precondition(_))));
    }

    #[test]
    fn first_transform_matches_quadrature() {
        let q = QuadConfig::default();
        let (spec, op) = half_line(-1.0, 1.0, 0.1);
        let c0 = 2e-3;
        let f = NonlinearTerm::cubic_feed(2, c0, 1.0);
        let cfg = ManifoldConfig { s_max: 0.2, ..small_config() };
        let p = ManifoldProblem::new(&spec, op.clone(), &f, None, &cfg, &q).unwrap();
        let g0 = p.zero_graph(&[1.0]);
        let (g1, _) = p.graph_transform(&g0, &[1.0]).unwrap();
        // -∫_s^∞ T(τ,s)^{-1} Q f(u(τ)) with u(τ) = e^{-(τ-s)} ξ, by adaptive quadrature
        let e2 = DVector::from_row_slice(&[0.0, 1.0]);
        for k in [0usize, 5, 30, 40] {
            let xi = g1.node_xi(0, k);
            let qm = spec.p.complement_at(0.0);
            let oracle = crate::quad::integrate(
                |tau| {
                    let inv = op.evolve_inverse_unstable(tau, 0.0, &qm).unwrap();
                    Ok(-(inv * &e2)[1] * c0 * (xi[0] * (-tau).exp()).powi(3))
                },
                0.0,
                p.tail,
                &[],
                &q,
            )
            .unwrap()
            .value;
            assert!((g1.values[0][k][1] - oracle).abs() < 1e-6 * xi.norm().max(1e-3), "k = {k}");
        }
    }

    fn cubic_problem(c0: f64) -> ManifoldProblem {
        let (spec, op) = half_line(-2.0, 1.0, 0.1);
        let f = NonlinearTerm::cubic_feed(2, c0, 1.0);
        let params = ParameterSpace::new(vec![0.0], vec![1.0]).unwrap();
        ManifoldProblem::new(&spec, op, &f, Some(params), &small_config(), &QuadConfig::default()).unwrap()
    }

    #[test]
    fn cubic_graph_against_closed_form() {
        let c0 = 1.5e-3;
        let p = cubic_problem(c0);
        assert!(p.constants.smallness <= 0.5);
        let (g, st) = p.solve_manifold(&[1.0]).unwrap();
        assert!(st.iterations <= 30);
        assert!(st.outer_contraction <= p.constants.outer_theory + 0.05);
        // Φ(s, ξ) = -c0 ξ^3 / 7 for the autonomous cubic feed
        for j in 0..=5 {
            for k in 0..41 {
                let xi = g.node_xi(j, k);
                let exact = -c0 * xi[0].powi(3) / 7.0;
                assert!((g.values[j][k][1] - exact).abs() < 1e-9 * (1.0 + xi[0].abs()), "slice {j} node {k}");
                assert!(g.values[j][k][0].abs() < 1e-12);
            }
        }
        assert!(g.lipschitz(0.5) <= 1.0);
        assert!(g.containment(&p.spec) <= 1e-9);
    }

    #[test]
    fn certificate_for_cubic_feed() {
        let p = cubic_problem(1.5e-3);
        let lambdas: Vec<Vec<f64>> = [1.0, 0.75, 0.5, 0.25].iter().map(|&l| vec![l]).collect();
        let (_, c) = certify(&p, &lambdas, &[0.5, 1.0, 2.0]).unwrap();
        assert!(c.invariance.worst <= 1e-4, "{:?}", c.invariance);
        assert!(c.off_graph_least > 1e-2);
        assert!(c.d <= c.constants.d_bound && c.d > 0.5);
        assert!(c.d_star.unwrap() <= c.constants.d_star_bound);
        assert!(c.sweep_linear_residual.unwrap() <= 0.1);
        assert!(c.pass, "{c:#?}");
    }

    #[test]
    fn constants_arithmetic() {
        let c = ManifoldConstants::new(1e-3, 2.0, 1.0).unwrap();
        assert!((c.smallness - 0.216).abs() < 1e-12);
        assert!((c.k1 - 1.0 / 0.784).abs() < 1e-12);
        assert!((c.h_prime - 0.054).abs() < 1e-12);
        assert!((c.h_const - 0.054 / 0.964).abs() < 1e-12);
        assert!(c.ok());
        assert!(!ManifoldConstants::new(5e-3, 2.0, 1.0).unwrap().ok());
    }
}
