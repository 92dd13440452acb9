//! Persistence of a dichotomy under small linear perturbations `x' = (A + B(t, λ)) x`.
//!
//! The bounded solutions `U^λ(t, s)` (forward, stable side) and `V^λ(t, s)`
//! (backward, unstable side) are fixed points of integral operators that are
//! iterated on a uniform grid. Their values at `s = 0` give the invertible
//! `S(0, λ)` that conjugates the unperturbed projection into the perturbed one.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::dichotomy::{certify_with, Certificate, DichotomySpec};
use crate::error::{Error, Result};
use crate::evolution::EvolutionOperator;
use crate::growth::RateQuadruple;
use crate::linalg::{max_principal_angle, min_sym_eigenvalue, range_basis, spectral_norm};
use crate::quad::{integrate_to_infinity, truncation_length, QuadConfig};
use crate::system::CoefficientField;
use crate::varconst::{backward_unstable, forward_stable, interp_mids, CellPropagators, GridProjections, UniformGrid};

pub type PerturbationFn = Arc<dyn Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync>;

/// `B(t, λ)` with the decay constant `c` and exponent `ω` it is claimed to satisfy.
#[derive(Clone)]
pub struct PerturbationSpec {
    name: String,
    dim: usize,
    b: PerturbationFn,
    pub c: f64,
    pub omega: f64,
    pub finite_dim_delta: Option<f64>,
}

impl std::fmt::Debug for PerturbationSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PerturbationSpec").field("name", &self.name).field("c", &self.c).field("omega", &self.omega).finish()
    }
}

impl PerturbationSpec {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        c: f64,
        omega: f64,
        b: impl Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(c >= 0.0 && c.is_finite() && omega > 0.0) {
            return Err(Error::InvalidParam(format!("need c >= 0 and omega > 0, got c = {c}, omega = {omega}")));
        }
        Ok(PerturbationSpec { name: name.into(), dim, b: Arc::new(b), c, omega, finite_dim_delta: None })
    }

    pub fn zero(dim: usize, omega: f64) -> Self {
        Self::new("zero", dim, 0.0, omega, move |_, _| DMatrix::zeros(dim, dim)).expect("valid")
    }

    /// `λ amp e^{-decay |t|}` times the all-ones off-diagonal pattern; `λ = 1`
    /// when no parameter is given.
    pub fn offdiag_exp(dim: usize, amp: f64, decay: f64, c: f64, omega: f64) -> Result<Self> {
        let pattern = DMatrix::from_fn(dim, dim, |i, j| if i == j { 0.0 } else { 1.0 });
        Self::new("offdiag_exp", dim, c, omega, move |t, l| {
            let lam = l.first().copied().unwrap_or(1.0);
            &pattern * (lam * amp * (-decay * t.abs()).exp())
        })
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.finite_dim_delta = Some(delta);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, t: f64, lambda: &[f64]) -> DMatrix<f64> {
        (self.b)(t, lambda)
    }

    /// The perturbation at a fixed parameter as a coefficient field.
    pub fn field(&self, lambda: &[f64]) -> Result<CoefficientField> {
        let b = self.b.clone();
        let l = lambda.to_vec();
        CoefficientField::new(self.name.clone(), self.dim, crate::growth::Domain::FullLine, move |t| b(t, &l))
    }

    /// `min(mu(|t|)^{-ω-ε}, nu(|t|)^{-ω-ε})`, the decay profile in the bound.
    pub fn profile(&self, rates: &RateQuadruple, eps: f64, t: f64) -> f64 {
        let e = -(self.omega + eps);
        (e * rates.mu.ln_eval(t.abs())).exp().min((e * rates.nu.ln_eval(t.abs())).exp())
    }

    /// Worst ratios of `|B(t, λ)|` and of `|B(t, λ1) - B(t, λ2)| / |λ1 - λ2|`
    /// against `c` times the profile.
    pub fn decay_check(&self, rates: &RateQuadruple, eps: f64, probes: &[f64], lambdas: &[Vec<f64>]) -> DecayCheck {
        let mut worst = 0.0f64;
        let mut worst_lip = 0.0f64;
        let no_param: Vec<Vec<f64>> = vec![vec![]];
        let ls = if lambdas.is_empty() { &no_param } else { lambdas };
        for &t in probes {
            let env = self.c * self.profile(rates, eps, t);
            let mats: Vec<_> = ls.iter().map(|l| self.eval(t, l)).collect();
            for m in &mats {
                worst = worst.max(ratio(spectral_norm(m), env));
            }
            for i in 0..ls.len() {
                for j in i + 1..ls.len() {
                    let dl = ls[i].iter().zip(&ls[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    if dl > 0.0 {
                        worst_lip = worst_lip.max(ratio(spectral_norm(&(&mats[i] - &mats[j])), env * dl));
                    }
                }
            }
        }
        DecayCheck { worst_ratio: worst, worst_lipschitz_ratio: worst_lip, pass: worst <= 1.0 + 1e-12 && worst_lip <= 1.0 + 1e-12 }
    }
}

fn ratio(x: f64, bound: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x / bound
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayCheck {
    pub worst_ratio: f64,
    pub worst_lipschitz_ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct NReport {
    pub n: f64,
    pub argmax: f64,
    /// Largest discarded tail added into `n`.
    pub tail: f64,
}

/// `sup_t [nu(|t|)^ε ∫_{-∞}^t mu(|τ|)^{-ω} dτ + mu(|t|)^ε ∫_t^∞ nu(|τ|)^{-ω} dτ]` over `times`.
pub fn compute_n(rates: &RateQuadruple, omega: f64, eps: f64, times: &[f64], quad: &QuadConfig) -> Result<NReport> {
    if times.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mu_w = |x: f64| (-omega * rates.mu.ln_eval(x.abs())).exp();
    let nu_w = |x: f64| (-omega * rates.nu.ln_eval(x.abs())).exp();
    let rows: Vec<(f64, f64, f64)> = times
        .par_iter()
        .map(|&t| {
            // the lower integral is mirrored onto [-t, ∞)
            let lower = integrate_to_infinity(|u| mu_w(-u), -t, quad)?;
            let upper = integrate_to_infinity(nu_w, t, quad)?;
            let pre_nu = (eps * rates.nu.ln_eval(t.abs())).exp();
            let pre_mu = (eps * rates.mu.ln_eval(t.abs())).exp();
            let val = pre_nu * (lower.value + lower.remainder) + pre_mu * (upper.value + upper.remainder);
            Ok((t, val, pre_nu * lower.remainder + pre_mu * upper.remainder))
        })
        .collect::<Result<_>>()?;
    let mut rep = NReport { n: f64::NEG_INFINITY, argmax: times[0], tail: 0.0 };
    for (t, v, tl) in rows {
        if v > rep.n {
            rep.n = v;
            rep.argmax = t;
        }
        rep.tail = rep.tail.max(tl);
    }
    Ok(rep)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Smallness {
    pub ok: bool,
    /// `1 - c K N (2K + 1)`
    pub margin: f64,
    /// `K c N`, the contraction constant of the fixed-point maps.
    pub kcn: f64,
    /// `K / (1 - K c N)`
    pub k_hat: f64,
}

pub fn check_smallness(c: f64, k: f64, n: f64) -> Smallness {
    let kcn = k * c * n;
    let margin = 1.0 - kcn * (2.0 * k + 1.0);
    let k_hat = if kcn < 1.0 { k / (1.0 - kcn) } else { f64::INFINITY };
    Smallness { ok: margin > 0.0, margin, kcn, k_hat }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RobustConfig {
    pub step: f64,
    pub fp_tol: f64,
    pub max_iter: usize,
    pub tail_tol: f64,
    /// Slack allowed above `K c N` for the measured contraction.
    pub contraction_slack: f64,
    /// Extra half-width kept around the times of interest.
    pub extent: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        RobustConfig { step: 0.05, fp_tol: 1e-10, max_iter: 200, tail_tol: 1e-8, contraction_slack: 0.05, extent: 5.0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundedSolution {
    pub s: f64,
    /// Grid index of the first stored node.
    #[serde(skip)]
    pub first: usize,
    #[serde(skip)]
    pub times: Vec<f64>,
    #[serde(skip)]
    pub values: Vec<DMatrix<f64>>,
    pub weighted_norm: f64,
    pub iterations: usize,
    /// Largest ratio of successive weighted changes; `None` when the first
    /// iterate was already a fixed point.
    pub contraction: Option<f64>,
    pub contraction_within_theory: bool,
    pub residual: f64,
}

impl BoundedSolution {
    pub fn at_index(&self, i: usize) -> Option<&DMatrix<f64>> {
        i.checked_sub(self.first).and_then(|k| self.values.get(k))
    }
}

/// Grid data shared by every solve at one parameter value.
pub struct BoundedSolver<'a> {
    spec: &'a DichotomySpec,
    pub grid: UniformGrid,
    cells: CellPropagators,
    proj: GridProjections,
    b_nodes: Vec<DMatrix<f64>>,
    b_mids: Vec<DMatrix<f64>>,
    pub lambda: Vec<f64>,
    pub smallness: Smallness,
    pub n_const: f64,
    pub c: f64,
    /// Bound on the weighted effect of truncating the improper integrals.
    pub tail_bound: f64,
    cfg: RobustConfig,
}

/// Half-width `W` with both truncated tails below `tail_tol`.
fn window_half_width(
    spec: &DichotomySpec,
    pert: &PerturbationSpec,
    k_hat: f64,
    cfg: &RobustConfig,
    quad: &QuadConfig,
) -> Result<(f64, f64)> {
    let r = &spec.rates;
    let pre = spec.k_const * pert.c * k_hat;
    if pre == 0.0 {
        return Ok((cfg.step.max(1.0), 0.0));
    }
    let tail = |w: f64| -> f64 {
        let up = integrate_to_infinity(|x| (-pert.omega * r.nu.ln_eval(x)).exp(), w, quad);
        let lo = integrate_to_infinity(|x| (-pert.omega * r.mu.ln_eval(x)).exp(), w, quad);
        match (up, lo) {
            (Ok(u), Ok(l)) => {
                let wu = (spec.eps * r.mu.ln_eval(w)).exp();
                let wv = (spec.eps * r.nu.ln_eval(w)).exp();
                pre * (wu * (u.value + u.remainder)).max(wv * (l.value + l.remainder))
            }
            _ => f64::INFINITY,
        }
    };
    let w = truncation_length(tail, cfg.tail_tol, 1e3)?;
    Ok((w, tail(w)))
}

impl<'a> BoundedSolver<'a> {
    pub fn new(
        spec: &'a DichotomySpec,
        op: &EvolutionOperator,
        pert: &PerturbationSpec,
        lambda: &[f64],
        n_const: f64,
        cfg: &RobustConfig,
        quad: &QuadConfig,
    ) -> Result<Self> {
        if pert.dim() != op.dim() || spec.p.dim() != op.dim() {
            return Err(Error::InvalidParam("perturbation, spec and system dimensions differ".into()));
        }
        let smallness = check_smallness(pert.c, spec.k_const, n_const);
        if !smallness.ok {
            return Err(Error::Precondition(format!("smallness fails: c K N (2K + 1) = {:.6} >= 1", 1.0 - smallness.margin)));
        }
        let (w, tail_bound) = window_half_width(spec, pert, smallness.k_hat, cfg, quad)?;
        let half = ((w + cfg.extent) / cfg.step).ceil() * cfg.step;
        let grid = UniformGrid::new(-half, half, cfg.step)?;
        let cells = CellPropagators::new(op, grid)?;
        let proj = GridProjections::new(&spec.p, &grid);
        let b_nodes = (0..=grid.n).map(|i| pert.eval(grid.node(i), lambda)).collect();
        let b_mids = (0..grid.n).map(|i| pert.eval(grid.mid(i), lambda)).collect();
        Ok(BoundedSolver {
            spec,
            grid,
            cells,
            proj,
            b_nodes,
            b_mids,
            lambda: lambda.to_vec(),
            smallness,
            n_const,
            c: pert.c,
            tail_bound,
            cfg: *cfg,
        })
    }

    pub fn index(&self, s: f64) -> Result<usize> {
        self.grid.index_of(s).ok_or_else(|| Error::InvalidParam(format!("s = {s} is not a node of the solver grid")))
    }

    fn forcing(&self, vals: &[DMatrix<f64>], i0: usize) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let g: Vec<_> = vals.iter().enumerate().map(|(k, u)| &self.b_nodes[i0 + k] * u).collect();
        let mids = interp_mids(vals);
        let gm = mids.iter().enumerate().map(|(k, u)| &self.b_mids[i0 + k] * u).collect();
        (g, gm)
    }

    fn iterate<F, W>(&self, s: f64, first: usize, len: usize, step: F, weight: W) -> Result<BoundedSolution>
    where
        F: Fn(&[DMatrix<f64>]) -> Vec<DMatrix<f64>>,
        W: Fn(usize) -> f64,
    {
        let n = self.cells.dim();
        let wnorm = |v: &[DMatrix<f64>]| v.iter().enumerate().map(|(k, m)| spectral_norm(m) * weight(first + k)).fold(0.0, f64::max);
        let zeros = vec![DMatrix::zeros(n, n); len];
        let mut cur = step(&zeros);
        let mut prev_diff = f64::NAN;
        let mut contraction: Option<f64> = None;
        for it in 1..=self.cfg.max_iter {
            let next = step(&cur);
            let d: Vec<_> = next.iter().zip(&cur).map(|(a, b)| a - b).collect();
            let diff = wnorm(&d);
            let size = wnorm(&next);
            if prev_diff.is_finite() && prev_diff > 1e-12 * size.max(1.0) {
                let r = diff / prev_diff;
                contraction = Some(contraction.map_or(r, |c: f64| c.max(r)));
            }
            cur = next;
            if diff < self.cfg.fp_tol {
                let est = contraction;
                if est.is_some_and(|r| r >= 1.0) {
                    return Err(Error::NoContraction(format!("measured contraction {:.4} at s = {s}", est.unwrap_or(0.0))));
                }
                return Ok(BoundedSolution {
                    s,
                    first,
                    times: (first..first + len).map(|i| self.grid.node(i)).collect(),
                    weighted_norm: size,
                    values: cur,
                    iterations: it,
                    contraction: est,
                    contraction_within_theory: est.map_or(true, |r| r <= self.smallness.kcn + self.cfg.contraction_slack),
                    residual: diff,
                });
            }
            prev_diff = diff;
        }
        Err(Error::NoContraction(format!("no convergence in {} iterations at s = {s}", self.cfg.max_iter)))
    }

    /// `U^λ(t, s)` for grid nodes `t >= s`.
    pub fn solve_u(&self, s: f64) -> Result<BoundedSolution> {
        let i0 = self.index(s)?;
        let i1 = self.grid.n;
        let n = self.cells.dim();
        let id = DMatrix::<f64>::identity(n, n);
        let zero = DMatrix::<f64>::zeros(n, n);
        let r = &self.spec.rates;
        let (a, eps) = (self.spec.a, self.spec.eps);
        let lhs = r.h.ln_eval(s);
        let lmu = r.mu.ln_eval(s.abs());
        let weight = |i: usize| (-a * (r.h.ln_eval(self.grid.node(i)) - lhs) - eps * lmu).exp();
        let step = |u: &[DMatrix<f64>]| {
            let (g, gm) = self.forcing(u, i0);
            let f = forward_stable(&self.cells, &self.proj, &g, &gm, i0, i1, &id, 1.0);
            let b = backward_unstable(&self.cells, &self.proj, &g, &gm, i0, i1, &zero, -1.0);
            f.iter().zip(&b).map(|(x, y)| x + y).collect()
        };
        self.iterate(s, i0, i1 - i0 + 1, step, weight)
    }

    /// `V^λ(t, s)` for grid nodes `t <= s`.
    pub fn solve_v(&self, s: f64) -> Result<BoundedSolution> {
        let i1 = self.index(s)?;
        let n = self.cells.dim();
        let id = DMatrix::<f64>::identity(n, n);
        let zero = DMatrix::<f64>::zeros(n, n);
        let r = &self.spec.rates;
        let (b, eps) = (self.spec.b, self.spec.eps);
        let lks = r.k.ln_eval(s);
        let lnu = r.nu.ln_eval(s.abs());
        let weight = |i: usize| (b * (lks - r.k.ln_eval(self.grid.node(i))) - eps * lnu).exp();
        let step = |v: &[DMatrix<f64>]| {
            let (g, gm) = self.forcing(v, 0);
            let f = forward_stable(&self.cells, &self.proj, &g, &gm, 0, i1, &zero, 1.0);
            let bw = backward_unstable(&self.cells, &self.proj, &g, &gm, 0, i1, &id, -1.0);
            f.iter().zip(&bw).map(|(x, y)| x + y).collect()
        };
        self.iterate(s, 0, i1 + 1, step, weight)
    }

    /// Largest relative semigroup defect over the listed start times and the
    /// grid nodes in `[lo, hi]`.
    pub fn semigroup_residual(&self, starts: &[f64], lo: f64, hi: f64) -> Result<f64> {
        let mut starts = starts.to_vec();
        starts.sort_by(f64::total_cmp);
        let us: Vec<BoundedSolution> = starts.par_iter().map(|&s| self.solve_u(s)).collect::<Result<_>>()?;
        let vs: Vec<BoundedSolution> = starts.par_iter().map(|&s| self.solve_v(s)).collect::<Result<_>>()?;
        let idx: Vec<usize> = starts.iter().map(|&s| self.index(s)).collect::<Result<_>>()?;
        let (ilo, ihi) = (self.index(lo)?, self.index(hi)?);
        let mut worst = 0.0f64;
        for a in 0..starts.len() {
            for b in a..starts.len() {
                // U(t, σ) U(σ, s) with s = starts[a] <= σ = starts[b] <= t
                for t in idx[b]..=ihi {
                    let (Some(u_ts), Some(u_tsig), Some(u_sigs)) = (us[a].at_index(t), us[b].at_index(t), us[a].at_index(idx[b])) else {
                        continue;
                    };
                    let d = spectral_norm(&(u_tsig * u_sigs - u_ts));
                    let scale = spectral_norm(u_ts);
                    if scale > 0.0 {
                        worst = worst.max(d / scale);
                    }
                }
                // V(t, σ) V(σ, s) with t <= σ = starts[a] <= s = starts[b]
                for t in ilo..=idx[a] {
                    let (Some(v_ts), Some(v_tsig), Some(v_sigs)) = (vs[b].at_index(t), vs[a].at_index(t), vs[b].at_index(idx[a])) else {
                        continue;
                    };
                    let d = spectral_norm(&(v_tsig * v_sigs - v_ts));
                    let scale = spectral_norm(v_ts);
                    if scale > 0.0 {
                        worst = worst.max(d / scale);
                    }
                }
            }
        }
        Ok(worst)
    }
}

/// Perturbed projections `P̂(t, λ) = T̂(t, 0) S P(0) S^{-1} T̂(0, t)`.
#[derive(Clone, Serialize)]
pub struct RobustProjections {
    pub lambda: Vec<f64>,
    #[serde(skip)]
    pub s0: DMatrix<f64>,
    #[serde(skip)]
    pub s0_inv: DMatrix<f64>,
    /// `|S(0, λ) - Id|` and the bound `K K̂ c N` it must respect.
    pub s0_deviation: f64,
    pub s0_bound: f64,
    /// Largest defect among the six product identities relating `P(0)`, `Q(0)`
    /// and the bounded-solution values at zero.
    pub identity_residual: f64,
    pub k_hat: f64,
    /// `K K̂ / (1 - 2 K K̂ c N)`
    pub evolution_prefactor: f64,
    /// `K / (1 - 2 K K̂ c N)`
    pub projection_prefactor: f64,
    pub u0: BoundedSolution,
    pub v0: BoundedSolution,
    #[serde(skip)]
    m0: DMatrix<f64>,
    #[serde(skip)]
    op_hat: Arc<EvolutionOperator>,
    #[serde(skip)]
    spec_eps: f64,
    #[serde(skip)]
    exps: (f64, f64),
    #[serde(skip)]
    rates: RateQuadruple,
}

impl std::fmt::Debug for RobustProjections {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RobustProjections")
            .field("lambda", &self.lambda)
            .field("s0_deviation", &self.s0_deviation)
            .field("k_hat", &self.k_hat)
            .finish()
    }
}

impl RobustProjections {
    pub fn p_hat(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(self.op_hat.evolve(t, 0.0)? * &self.m0 * self.op_hat.evolve(0.0, t)?)
    }

    pub fn q_hat(&self, t: f64) -> Result<DMatrix<f64>> {
        let n = self.m0.nrows();
        Ok(DMatrix::identity(n, n) - self.p_hat(t)?)
    }

    pub fn perturbed(&self) -> &EvolutionOperator {
        &self.op_hat
    }
}

pub fn build_projections(solver: &BoundedSolver<'_>, op_hat: Arc<EvolutionOperator>) -> Result<RobustProjections> {
    let spec = solver.spec;
    let n = spec.p.dim();
    let id = DMatrix::<f64>::identity(n, n);
    let i0 = solver.index(0.0)?;
    let u0 = solver.solve_u(0.0)?;
    let v0 = solver.solve_v(0.0)?;
    let pt = u0.at_index(i0).expect("s node").clone();
    let qt = v0.at_index(i0).expect("s node").clone();
    let p0 = spec.p.at(0.0);
    let q0 = &id - &p0;
    let s0 = &pt + &qt;
    let dev = spectral_norm(&(&s0 - &id));
    let sm = solver.smallness;
    let s0_bound = spec.k_const * sm.k_hat * solver.c * solver.n_const;
    if dev >= 1.0 {
        return Err(Error::Precondition(format!("S(0) is not certified invertible: |S(0) - Id| = {dev:.4}")));
    }
    let s0_inv = s0.clone().try_inverse().ok_or_else(|| Error::Precondition("S(0) is singular".into()))?;
    let ids = [
        spectral_norm(&(&p0 * &pt - &p0)),
        spectral_norm(&(&pt * &p0 - &pt)),
        spectral_norm(&(&p0 * (&id - &qt) - (&id - &qt))),
        spectral_norm(&(&q0 * &qt - &q0)),
        spectral_norm(&(&qt * &q0 - &qt)),
        spectral_norm(&(&q0 * (&id - &pt) - (&id - &pt))),
    ];
    let m0 = &s0 * &p0 * &s0_inv;
    let denom = 1.0 - 2.0 * spec.k_const * sm.k_hat * solver.c * solver.n_const;
    Ok(RobustProjections {
        lambda: solver.lambda.clone(),
        s0,
        s0_inv,
        s0_deviation: dev,
        s0_bound,
        identity_residual: ids.iter().copied().fold(0.0, f64::max),
        k_hat: sm.k_hat,
        evolution_prefactor: spec.k_const * sm.k_hat / denom,
        projection_prefactor: spec.k_const / denom,
        u0,
        v0,
        m0,
        op_hat,
        spec_eps: spec.eps,
        exps: (spec.a, spec.b),
        rates: spec.rates.clone(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustCertificate {
    pub certificate: Certificate,
    /// Largest `|P̂² - P̂|` on the time samples.
    pub projector_residual: f64,
    /// Largest `|P̂(t)|` or `|Q̂(t)|` over its bound.
    pub projection_norm_ratio: f64,
    /// Largest difference between `P̂(t)` and `U(t, t) (U(t, t) + V(t, t))^{-1}`.
    pub cross_check: Option<f64>,
    pub pass: bool,
}

/// Grid certificate of the perturbed bounds with the enlarged prefactor.
pub fn verify_robust(proj: &RobustProjections, grid: &[(f64, f64)], tol: f64) -> Result<RobustCertificate> {
    let r = &proj.rates;
    let eps = proj.spec_eps;
    let (a, b) = proj.exps;
    let lnpre = proj.evolution_prefactor.ln();
    let mix = |s: f64| ((eps * r.mu.ln_eval(s.abs())).exp() + (eps * r.nu.ln_eval(s.abs())).exp()).ln();
    let op = proj.perturbed();
    let cert = certify_with(
        grid,
        tol,
        |t, s| op.evolve(t, s),
        |t| proj.p_hat(t),
        |t, s| Ok(lnpre + a * (r.h.ln_eval(t) - r.h.ln_eval(s)) + eps * r.mu.ln_eval(s.abs()) + mix(s)),
        |t, s| Ok(lnpre - b * (r.k.ln_eval(s) - r.k.ln_eval(t)) + eps * r.nu.ln_eval(s.abs()) + mix(s)),
    )?;
    let mut times: Vec<f64> = grid.iter().flat_map(|&(t, s)| [t, s]).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut proj_res = 0.0f64;
    let mut norm_ratio = 0.0f64;
    for &t in &times {
        let p = proj.p_hat(t)?;
        proj_res = proj_res.max(spectral_norm(&(&p * &p - &p)));
        let n = p.nrows();
        let q = DMatrix::identity(n, n) - &p;
        let bound = proj.projection_prefactor * mix(t).exp();
        norm_ratio = norm_ratio.max(spectral_norm(&p) / bound).max(spectral_norm(&q) / bound);
    }
    let pass = cert.pass && proj_res <= 1e-8 && norm_ratio <= 1.0 + tol;
    Ok(RobustCertificate { certificate: cert, projector_residual: proj_res, projection_norm_ratio: norm_ratio, cross_check: None, pass })
}

/// `P̂(t)` from the bounded solutions started at `t`: `U(t, t) (U(t, t) + V(t, t))^{-1}`.
/// Avoids the long-span conjugation and serves as an independent check.
pub fn direct_projection(solver: &BoundedSolver<'_>, t: f64) -> Result<DMatrix<f64>> {
    let i = solver.index(t)?;
    let u = solver.solve_u(t)?;
    let v = solver.solve_v(t)?;
    let pt = u.at_index(i).expect("start node").clone();
    let s = &pt + v.at_index(i).expect("start node");
    let inv = s.try_inverse().ok_or_else(|| Error::Precondition(format!("S({t}) is singular")))?;
    Ok(pt * inv)
}

fn perturbed_operator(op: &EvolutionOperator, pert: &PerturbationSpec, lambda: &[f64]) -> Result<Arc<EvolutionOperator>> {
    let field = op.field().plus(&pert.field(lambda)?)?.with_name("perturbed");
    Ok(Arc::new(EvolutionOperator::new(field, *op.config())?))
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustReport {
    pub lambda: Vec<f64>,
    pub c: f64,
    pub omega: f64,
    pub n: NReport,
    pub decay: DecayCheck,
    pub smallness: Smallness,
    pub window: (f64, f64),
    pub tail_bound: f64,
    pub projections: RobustProjections,
    /// `|U|_1 <= K̂` and `|V|_2 <= K̂` at `s = 0`.
    pub bound_chain_ok: bool,
    pub semigroup_residual: f64,
    pub robust: RobustCertificate,
    pub pass: bool,
}

/// Everything at one parameter value: `N`, smallness, the bounded solutions,
/// the projections and the grid certificate.
#[allow(clippy::too_many_arguments)]
pub fn robust(
    spec: &DichotomySpec,
    op: &EvolutionOperator,
    pert: &PerturbationSpec,
    lambda: &[f64],
    n_times: &[f64],
    grid: &[(f64, f64)],
    cfg: &RobustConfig,
    quad: &QuadConfig,
    tol: f64,
) -> Result<RobustReport> {
    spec.rates.check_domain(op.domain())?;
    let n = compute_n(&spec.rates, pert.omega, spec.eps, n_times, quad)?;
    let decay = pert.decay_check(&spec.rates, spec.eps, n_times, &[lambda.to_vec()]);
    let solver = BoundedSolver::new(spec, op, pert, lambda, n.n, cfg, quad)?;
    let op_hat = perturbed_operator(op, pert, lambda)?;
    let projections = build_projections(&solver, op_hat)?;
    let kh = projections.k_hat * (1.0 + 1e-9);
    let bound_chain_ok = projections.u0.weighted_norm <= kh && projections.v0.weighted_norm <= kh;
    let semigroup_residual = solver.semigroup_residual(&[-1.0, 0.0, 1.0], -3.0, 3.0)?;
    let mut cert = verify_robust(&projections, grid, tol)?;
    let mut times: Vec<f64> = grid.iter().flat_map(|&(t, s)| [t, s]).filter(|t| solver.grid.index_of(*t).is_some()).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let diffs: Vec<f64> =
        times.par_iter().map(|&t| Ok(spectral_norm(&(direct_projection(&solver, t)? - projections.p_hat(t)?)))).collect::<Result<_>>()?;
    cert.cross_check = diffs.into_iter().reduce(f64::max);
    let pass = decay.pass
        && solver.smallness.ok
        && bound_chain_ok
        && projections.u0.contraction_within_theory
        && projections.v0.contraction_within_theory
        && projections.s0_deviation <= projections.s0_bound * (1.0 + 1e-9) + 1e-12
        && cert.pass;
    Ok(RobustReport {
        lambda: lambda.to_vec(),
        c: pert.c,
        omega: pert.omega,
        n,
        decay,
        smallness: solver.smallness,
        window: (solver.grid.t0, solver.grid.end()),
        tail_bound: solver.tail_bound,
        projections,
        bound_chain_ok,
        semigroup_residual,
        robust: cert,
        pass,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPair {
    pub l1: f64,
    pub l2: f64,
    /// `max(|ΔU|_1, |ΔV|_2) / |Δλ|` at `s = 0`.
    pub solution_ratio: f64,
    /// Largest principal angle between the stable (or unstable) ranges over `|Δλ|`.
    pub angle_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaSweep {
    pub lambdas: Vec<f64>,
    pub times: Vec<f64>,
    /// `angles[i][j]`: stable-range angle between `λ_i` and `λ_0` at `times[j]`.
    pub angles: Vec<Vec<f64>>,
    pub pairs: Vec<SweepPair>,
    /// `K̂ K c N / (1 - K c N)`
    pub solution_bound: f64,
    /// Angle constant, available when `ε = 0` where it is uniform in `t`.
    pub angle_bound: Option<f64>,
    pub worst_solution_ratio: f64,
    pub worst_angle_ratio: f64,
    pub pass: bool,
}

/// Runs the construction at each `λ` of a one-dimensional sweep with
/// `B(t, λ)` evaluated at `[λ]`, and measures Lipschitz ratios between
/// neighbouring parameter values.
#[allow(clippy::too_many_arguments)]
pub fn lambda_sweep(
    spec: &DichotomySpec,
    op: &EvolutionOperator,
    pert: &PerturbationSpec,
    lambdas: &[f64],
    n_const: f64,
    times: &[f64],
    cfg: &RobustConfig,
    quad: &QuadConfig,
) -> Result<LambdaSweep> {
    if lambdas.len() < 2 {
        return Err(Error::InvalidParam("a sweep needs at least two parameter values".into()));
    }
    let runs: Vec<(RobustProjections, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> = lambdas
        .par_iter()
        .map(|&l| {
            let solver = BoundedSolver::new(spec, op, pert, &[l], n_const, cfg, quad)?;
            let proj = build_projections(&solver, perturbed_operator(op, pert, &[l])?)?;
            let r = spec.p.rank();
            let n = spec.p.dim();
            let mut ps = Vec::new();
            let mut qs = Vec::new();
            for &t in times {
                let p = proj.p_hat(t)?;
                qs.push(range_basis(&(DMatrix::identity(n, n) - &p), n - r));
                ps.push(range_basis(&p, r));
            }
            Ok((proj, ps, qs))
        })
        .collect::<Result<_>>()?;
    let sm = check_smallness(pert.c, spec.k_const, n_const);
    let solution_bound = sm.k_hat * sm.kcn / (1.0 - sm.kcn);
    let angle_bound = (spec.eps == 0.0).then(|| {
        let sigma = 1.0 / (1.0 - spec.k_const * sm.k_hat * pert.c * n_const);
        // arcsin x <= (π/2) x converts the projection difference into an angle
        std::f64::consts::FRAC_PI_2 * solution_bound * sigma * (1.0 + 2.0 * sm.k_hat * sigma)
    });
    let r = &spec.rates;
    let wu = |t: f64| (-spec.a * (r.h.ln_eval(t) - r.h.ln_eval(0.0)) - spec.eps * r.mu.ln_eval(0.0)).exp();
    let wv = |t: f64| (spec.b * (r.k.ln_eval(0.0) - r.k.ln_eval(t)) - spec.eps * r.nu.ln_eval(0.0)).exp();
    let diff_norm = |x: &BoundedSolution, y: &BoundedSolution, w: &dyn Fn(f64) -> f64| {
        x.values.iter().zip(&y.values).zip(&x.times).map(|((a, b), &t)| spectral_norm(&(a - b)) * w(t)).fold(0.0, f64::max)
    };
    let mut pairs = Vec::new();
    for i in 1..lambdas.len() {
        let dl = (lambdas[i] - lambdas[i - 1]).abs();
        let (a, b) = (&runs[i - 1], &runs[i]);
        let du = diff_norm(&a.0.u0, &b.0.u0, &wu).max(diff_norm(&a.0.v0, &b.0.v0, &wv));
        let mut ang = 0.0f64;
        for j in 0..times.len() {
            ang = ang.max(max_principal_angle(&a.1[j], &b.1[j])).max(max_principal_angle(&a.2[j], &b.2[j]));
        }
        pairs.push(SweepPair { l1: lambdas[i - 1], l2: lambdas[i], solution_ratio: du / dl, angle_ratio: ang / dl });
    }
    let angles = runs.iter().map(|run| (0..times.len()).map(|j| max_principal_angle(&runs[0].1[j], &run.1[j])).collect()).collect();
    let worst_solution_ratio = pairs.iter().map(|p| p.solution_ratio).fold(0.0, f64::max);
    let worst_angle_ratio = pairs.iter().map(|p| p.angle_ratio).fold(0.0, f64::max);
    let pass = worst_solution_ratio <= solution_bound * (1.0 + 1e-6) + 1e-9 && angle_bound.map_or(true, |b| worst_angle_ratio <= 1.5 * b);
    Ok(LambdaSweep {
        lambdas: lambdas.to_vec(),
        times: times.to_vec(),
        angles,
        pairs,
        solution_bound,
        angle_bound,
        worst_solution_ratio,
        worst_angle_ratio,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiniteDimInputs {
    pub delta_hat: f64,
    pub l_hat: f64,
    pub d_hat: f64,
    pub dbar: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FiniteDimReport {
    /// Largest `|T(t, τ)| / (l min(mu^{2ε}, nu^{2ε}))` over `|t - τ| <= d`.
    pub local_growth_ratio: f64,
    /// Largest `|B(t)| / (δ (mu(|t|) + nu(|t|))^{-2ε})`.
    pub decay_ratio: f64,
    /// Smallest eigenvalue of `P^T P h'/h + Q^T Q k'/k - (δ K² / dbar) Id` minus one.
    pub matrix_margin: f64,
    /// Margin is zero up to rounding.
    pub boundary: bool,
    pub rate_order_worst: f64,
    pub pass: bool,
}

/// Finite-dimensional sufficient conditions for persistence, report only.
/// The growth factors in the local bound are evaluated at `|t|`.
pub fn finite_dim_conditions(
    spec: &DichotomySpec,
    op: &EvolutionOperator,
    pert: &PerturbationSpec,
    inputs: &FiniteDimInputs,
    probes: &[f64],
) -> Result<FiniteDimReport> {
    let fi = inputs;
    if !(fi.dbar > 0.0 && fi.dbar < (-spec.a).min(spec.b)) {
        return Err(Error::InvalidParam(format!("dbar = {} must lie in (0, {})", fi.dbar, (-spec.a).min(spec.b))));
    }
    if !(fi.delta_hat >= 0.0 && fi.l_hat > 0.0 && fi.d_hat > 0.0) {
        return Err(Error::InvalidParam("need delta >= 0 and positive l, d".into()));
    }
    if probes.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let r = &spec.rates;
    let eps = spec.eps;
    let n = spec.p.dim();
    let mut local = 0.0f64;
    let mut decay = 0.0f64;
    let mut margin = f64::INFINITY;
    for &tau in probes {
        for j in 0..=20 {
            let t = tau - fi.d_hat + 2.0 * fi.d_hat * j as f64 / 20.0;
            if !op.domain().contains(t) {
                continue;
            }
            let bound = fi.l_hat * (2.0 * eps * r.mu.ln_eval(t.abs())).exp().min((2.0 * eps * r.nu.ln_eval(t.abs())).exp());
            local = local.max(spectral_norm(&op.evolve(t, tau)?) / bound);
        }
        let env = fi.delta_hat * (r.mu.eval(tau.abs()) + r.nu.eval(tau.abs())).powf(-2.0 * eps);
        decay = decay.max(ratio(spectral_norm(&pert.eval(tau, &[])), env));
        let p = spec.p.at(tau);
        let q = DMatrix::identity(n, n) - &p;
        let m = p.transpose() * &p * r.h.log_deriv(tau) + q.transpose() * &q * r.k.log_deriv(tau)
            - DMatrix::identity(n, n) * (fi.delta_hat * spec.k_const * spec.k_const / fi.dbar);
        margin = margin.min(min_sym_eigenvalue(&((&m + m.transpose()) * 0.5)) - 1.0);
    }
    let mut iv = f64::INFINITY;
    for &tau in probes {
        for &t in probes.iter().filter(|&&t| t >= tau) {
            iv = iv.min((r.h.ln_eval(t) - r.h.ln_eval(tau) - r.mu.ln_eval(t) + r.mu.ln_eval(tau)).exp());
        }
    }
    let boundary = margin.abs() <= 1e-12;
    let pass = local <= 1.0 + 1e-9 && decay <= 1.0 + 1e-12 && margin >= -1e-12;
    Ok(FiniteDimReport { local_growth_ratio: local, decay_ratio: decay, matrix_margin: margin, boundary, rate_order_worst: iv, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dichotomy::{linspace_step, square_grid, ProjectionFamily};
    use crate::evolution::IntegratorConfig;
    use crate::growth::GrowthRate;

    fn saddle() -> (DichotomySpec, EvolutionOperator) {
        let spec =
            DichotomySpec::new(ProjectionFamily::leading(2, 1), RateQuadruple::uniform(GrowthRate::exp()), 1.0, -1.0, 1.0, 0.0).unwrap();
        let op = EvolutionOperator::new(CoefficientField::const_diag(&[-1.0, 1.0]).unwrap(), IntegratorConfig::default()).unwrap();
        (spec, op)
    }

    fn quick() -> RobustConfig {
        RobustConfig { extent: 4.0, ..RobustConfig::default() }
    }

    #[test]
    fn n_for_exponential_profile() {
        let rates = RateQuadruple::uniform(GrowthRate::exp());
        let r = compute_n(&rates, 2.0, 0.0, &linspace_step(-3.0, 3.0, 0.5), &QuadConfig::default()).unwrap();
        // the whole-line integral of e^{-2|τ|}
        assert!((r.n - 1.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn n_diverges_for_slow_profile() {
        let rates = RateQuadruple::uniform(GrowthRate::poly());
        let r = compute_n(&rates, 0.1, 0.0, &[0.0], &QuadConfig::default());
        assert!(matches!(r, Err(Error::Divergent(_))), "{r:?}");
    }

    #[test]
    fn smallness_arithmetic() {
        let s = check_smallness(0.1, 1.0, 1.0);
        assert!(s.ok && (s.margin - 0.7).abs() < 1e-15 && (s.k_hat - 1.0 / 0.9).abs() < 1e-15);
        let s = check_smallness(0.0, 2.0, 3.0);
        assert!(s.ok && s.margin == 1.0 && s.k_hat == 2.0);
        let s = check_smallness(1.0 / 3.0, 1.0, 1.0);
        assert!(!s.ok);
    }

    #[test]
    fn zero_perturbation_is_identity_of_the_construction() {
        let (spec, _) = saddle();
        // conjugating along T̂ over |t| = 3 needs a tighter integrator than the default
        let op =
            EvolutionOperator::new(CoefficientField::const_diag(&[-1.0, 1.0]).unwrap(), IntegratorConfig::with_tol(1e-12, 1e-14)).unwrap();
        let pert = PerturbationSpec::zero(2, 2.0);
        let solver = BoundedSolver::new(&spec, &op, &pert, &[], 1.0, &quick(), &QuadConfig::default()).unwrap();
        let u = solver.solve_u(0.0).unwrap();
        assert_eq!(u.iterations, 1);
        let i0 = solver.index(0.0).unwrap();
        for (k, m) in u.values.iter().enumerate() {
            let t = solver.grid.node(i0 + k);
            let exact = DMatrix::from_row_slice(2, 2, &[(-t).exp(), 0.0, 0.0, 0.0]);
            assert!((m - exact).amax() < 1e-9);
        }
        let proj = build_projections(&solver, perturbed_operator(&op, &pert, &[]).unwrap()).unwrap();
        assert!(proj.s0_deviation < 1e-12);
        for t in [-2.0, 0.0, 3.0] {
            let e = (proj.p_hat(t).unwrap() - spec.p.at(t)).amax();
            assert!(e < 1e-9, "t = {t}: {e:e}");
        }
    }

    #[test]
    fn small_offdiagonal_perturbation() {
        let (spec, op) = saddle();
        let pert = PerturbationSpec::offdiag_exp(2, 0.05, 2.0, 0.05, 2.0).unwrap();
        let grid = square_grid(-3.0, 3.0, 0.5);
        let rep = robust(&spec, &op, &pert, &[], &linspace_step(-4.0, 4.0, 0.5), &grid, &quick(), &QuadConfig::default(), 1e-6).unwrap();
        assert!((rep.n.n - 1.0).abs() < 1e-6);
        assert!(rep.smallness.ok && rep.bound_chain_ok);
        let u0 = &rep.projections.u0;
        assert!(u0.contraction.unwrap() <= rep.smallness.kcn + 0.05, "{u0:?}");
        assert!(u0.residual <= 2.0 * 1e-10);
        assert!(rep.semigroup_residual <= 1e-6, "{}", rep.semigroup_residual);
        assert!(rep.projections.s0_deviation <= rep.projections.s0_bound);
        assert!(rep.projections.s0_deviation > 0.0);
        assert!(rep.projections.identity_residual < 1e-9);
        assert!(rep.robust.projector_residual <= 1e-8);
        assert!(rep.robust.cross_check.unwrap() < 1e-5, "{:?}", rep.robust.cross_check);
        assert!(rep.pass, "{:?}", rep.robust.certificate);
    }

    #[test]
    fn conjugation_agrees_with_direct_formula() {
        // the conjugated projection inherits the O(h^4) error of S(0), amplified by
        // e^{2|t|}; halving the step must shrink the gap by roughly 16
        let (spec, op) = saddle();
        let pert = PerturbationSpec::offdiag_exp(2, 0.05, 2.0, 0.05, 2.0).unwrap();
        let gap = |step: f64| {
            let cfg = RobustConfig { step, ..quick() };
            let solver = BoundedSolver::new(&spec, &op, &pert, &[], 1.0, &cfg, &QuadConfig::default()).unwrap();
            let proj = build_projections(&solver, perturbed_operator(&op, &pert, &[]).unwrap()).unwrap();
            [-3.0, -1.0, 0.0, 2.0, 3.0]
                .iter()
                .map(|&t| (direct_projection(&solver, t).unwrap() - proj.p_hat(t).unwrap()).amax())
                .fold(0.0, f64::max)
        };
        let (g1, g2) = (gap(0.05), gap(0.025));
        assert!(g2 < 1e-6 && g1 / g2 > 10.0, "{g1:e} {g2:e}");
    }

    #[test]
    fn halving_the_step_changes_little() {
        let (spec, op) = saddle();
        let pert = PerturbationSpec::offdiag_exp(2, 0.05, 2.0, 0.05, 2.0).unwrap();
        let q = QuadConfig::default();
        let coarse = BoundedSolver::new(&spec, &op, &pert, &[], 1.0, &quick(), &q).unwrap();
        let fine = BoundedSolver::new(&spec, &op, &pert, &[], 1.0, &RobustConfig { step: 0.025, ..quick() }, &q).unwrap();
        let a = coarse.solve_u(0.0).unwrap();
        let b = fine.solve_u(0.0).unwrap();
        for t in [0.0, 0.5, 1.0, 2.0] {
            let x = a.at_index(coarse.index(t).unwrap()).unwrap();
            let y = b.at_index(fine.index(t).unwrap()).unwrap();
            assert!((x - y).amax() < 1e-7, "t = {t}: {}", (x - y).amax());
        }
    }

    #[test]
    fn near_the_smallness_boundary() {
        let (spec, op) = saddle();
        // 0.9 of the admissible c for K = N = 1
        let c = 0.9 / 3.0;
        let pert = PerturbationSpec::offdiag_exp(2, c, 2.0, c, 2.0).unwrap();
        let grid = square_grid(-2.0, 2.0, 0.5);
        let rep = robust(&spec, &op, &pert, &[], &linspace_step(-3.0, 3.0, 0.5), &grid, &quick(), &QuadConfig::default(), 1e-6).unwrap();
        assert!((rep.smallness.margin - 0.1).abs() < 1e-6);
        assert!(rep.pass, "{:?}", rep.robust);
    }

    #[test]
    fn smallness_violation_rejected() {
        let (spec, op) = saddle();
        let pert = PerturbationSpec::offdiag_exp(2, 0.4, 2.0, 0.4, 2.0).unwrap();
        let r = BoundedSolver::new(&spec, &op, &pert, &[], 1.0, &quick(), &QuadConfig::default());
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn lipschitz_in_parameter() {
        let (spec, op) = saddle();
        let pert = PerturbationSpec::offdiag_exp(2, 0.05, 2.0, 0.05, 2.0).unwrap();
        let sweep = lambda_sweep(&spec, &op, &pert, &[0.0, 0.25, 0.5, 0.75, 1.0], 1.0, &[-1.0, 0.0, 1.0], &quick(), &QuadConfig::default())
            .unwrap();
        assert!(sweep.pass, "{sweep:?}");
        assert!(sweep.worst_angle_ratio > 0.0);
    }

    #[test]
    fn decay_check_flags_slow_perturbation() {
        let rates = RateQuadruple::uniform(GrowthRate::exp());
        let ok = PerturbationSpec::offdiag_exp(2, 0.05, 2.0, 0.05, 2.0).unwrap();
        assert!(ok.decay_check(&rates, 0.0, &linspace_step(-5.0, 5.0, 0.5), &[]).pass);
        let slow = PerturbationSpec::offdiag_exp(2, 0.05, 1.0, 0.05, 2.0).unwrap();
        assert!(!slow.decay_check(&rates, 0.0, &linspace_step(-5.0, 5.0, 0.5), &[]).pass);
    }

    #[test]
    fn finite_dim_boundary_and_weighted_projection() {
        let (spec, op) = saddle();
        let zero = PerturbationSpec::zero(2, 2.0);
        let inputs = FiniteDimInputs { delta_hat: 0.0, l_hat: 1f64.exp(), d_hat: 1.0, dbar: 0.5 };
        let probes = linspace_step(-2.0, 2.0, 0.5);
        let r = finite_dim_conditions(&spec, &op, &zero, &inputs, &probes).unwrap();
        assert!(r.pass && r.boundary, "{r:?}");
        let with_delta = FiniteDimInputs { delta_hat: 0.01, ..inputs };
        let r = finite_dim_conditions(&spec, &op, &zero, &with_delta, &probes).unwrap();
        assert!(!r.pass && (r.matrix_margin + 0.02).abs() < 1e-12);

        // oblique projection with |P| > 1 and faster rates; the margin is
        // 3 (1.25 - sqrt(1.25 * 0.25)) - δ K² / dbar - 1 by hand
        let m = 0.5;
        let p = DMatrix::from_row_slice(2, 2, &[1.0, m, 0.0, 0.0]);
        let fast = RateQuadruple::uniform(GrowthRate::exp_rate(3.0).unwrap());
        let spec = DichotomySpec::new(ProjectionFamily::constant(p).unwrap(), fast, 1.0, -1.0, 1.0, 0.0).unwrap();
        let r = finite_dim_conditions(&spec, &op, &zero, &with_delta, &probes).unwrap();
        let expected = 3.0 * (1.25 - (1.25f64 * 0.25).sqrt()) - 0.02 - 1.0;
        assert!((r.matrix_margin - expected).abs() < 1e-12 && r.matrix_margin > 0.0);
    }
}
