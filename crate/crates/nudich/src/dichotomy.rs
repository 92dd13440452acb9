//! Dichotomy bounds: projection families, the four constants `(K, a, b, eps)`,
//! grid certificates and least-squares estimation of the constants.
//!
//! For `t >= s` the stable bound is `|T(t,s)P(s)| <= K (h(t)/h(s))^a mu(|s|)^eps`,
//! for `s >= t` the unstable bound is `|T(t,s)Q(s)| <= K (k(s)/k(t))^{-b} nu(|s|)^eps`.
//! Pairs with `t = s` are checked against both.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evolution::EvolutionOperator;
use crate::growth::{ratio_power, Domain, RateQuadruple};
use crate::linalg::spectral_norm;
use crate::system::MatrixFn;

pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Clone)]
pub enum ProjectionFamily {
    Constant(DMatrix<f64>),
    Analytic { dim: usize, rank: usize, f: MatrixFn },
}

impl fmt::Debug for ProjectionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProjectionFamily::Constant(m) => write!(f, "Constant({m:?})"),
            ProjectionFamily::Analytic { dim, rank, .. } => write!(f, "Analytic(dim={dim}, rank={rank})"),
        }
    }
}

impl ProjectionFamily {
    pub fn constant(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidParam("projection must be square".into()));
        }
        let res = spectral_norm(&(&m * &m - &m));
        if res > 1e-10 * spectral_norm(&m).max(1.0) {
            return Err(Error::InvalidParam(format!("matrix is not idempotent (|P^2 - P| = {res:e})")));
        }
        Ok(ProjectionFamily::Constant(m))
    }

    /// Orthogonal projection onto the first `rank` coordinates.
    pub fn leading(dim: usize, rank: usize) -> Self {
        ProjectionFamily::Constant(DMatrix::from_fn(dim, dim, |i, j| if i == j && i < rank { 1.0 } else { 0.0 }))
    }

    pub fn analytic(dim: usize, rank: usize, f: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        ProjectionFamily::Analytic { dim, rank, f: Arc::new(f) }
    }

    pub fn at(&self, t: f64) -> DMatrix<f64> {
        match self {
            ProjectionFamily::Constant(m) => m.clone(),
            ProjectionFamily::Analytic { f, .. } => f(t),
        }
    }

    pub fn complement_at(&self, t: f64) -> DMatrix<f64> {
        let p = self.at(t);
        DMatrix::identity(p.nrows(), p.nrows()) - p
    }

    pub fn dim(&self) -> usize {
        match self {
            ProjectionFamily::Constant(m) => m.nrows(),
            ProjectionFamily::Analytic { dim, .. } => *dim,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            ProjectionFamily::Constant(m) => m.trace().round() as usize,
            ProjectionFamily::Analytic { rank, .. } => *rank,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, ProjectionFamily::Constant(_))
    }
}

#[derive(Debug, Clone)]
pub struct DichotomySpec {
    pub p: ProjectionFamily,
    pub rates: RateQuadruple,
    pub k_const: f64,
    pub a: f64,
    pub b: f64,
    pub eps: f64,
}

/// Serializable view of a spec.
#[derive(Debug, Clone, Serialize)]
pub struct SpecSummary {
    pub k: f64,
    pub a: f64,
    pub b: f64,
    pub eps: f64,
    pub rank: usize,
    pub rates: [String; 4],
}

impl DichotomySpec {
    pub fn new(p: ProjectionFamily, rates: RateQuadruple, k_const: f64, a: f64, b: f64, eps: f64) -> Result<Self> {
        if !(k_const > 0.0 && k_const.is_finite()) {
            return Err(Error::InvalidParam(format!("K must be positive, got {k_const}")));
        }
        if !(a < 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidParam(format!("need a < 0 <= b, got a = {a}, b = {b}")));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::InvalidParam(format!("eps must be nonnegative, got {eps}")));
        }
        Ok(DichotomySpec { p, rates, k_const, a, b, eps })
    }

    pub fn with_k(&self, k: f64) -> Result<Self> {
        Self::new(self.p.clone(), self.rates.clone(), k, self.a, self.b, self.eps)
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        Self::new(self.p.clone(), self.rates.clone(), self.k_const, self.a, self.b, eps)
    }

    pub fn summary(&self) -> SpecSummary {
        let r = &self.rates;
        SpecSummary {
            k: self.k_const,
            a: self.a,
            b: self.b,
            eps: self.eps,
            rank: self.p.rank(),
            rates: [r.h.name().into(), r.k.name().into(), r.mu.name().into(), r.nu.name().into()],
        }
    }

    /// `ln` of the stable bound at `t >= s`.
    pub fn ln_stable_bound(&self, t: f64, s: f64) -> Result<f64> {
        Ok(self.k_const.ln() + ratio_power(&self.rates.h, t, s, self.a)?.log + self.eps * self.rates.mu.ln_eval(s.abs()))
    }

    /// `ln` of the unstable bound at `s >= t`.
    pub fn ln_unstable_bound(&self, t: f64, s: f64) -> Result<f64> {
        Ok(self.k_const.ln() + ratio_power(&self.rates.k, s, t, -self.b)?.log + self.eps * self.rates.nu.ln_eval(s.abs()))
    }
}

/// One checked `(t, s)` pair.
#[derive(Debug, Clone, Serialize)]
pub struct PairCheck {
    pub t: f64,
    pub s: f64,
    pub stable_ratio: Option<f64>,
    pub unstable_ratio: Option<f64>,
    pub commute_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub pairs: usize,
    pub tol: f64,
    pub worst_stable_ratio: f64,
    pub worst_stable_at: Option<(f64, f64)>,
    pub worst_unstable_ratio: f64,
    pub worst_unstable_at: Option<(f64, f64)>,
    pub worst_commute_residual: f64,
    pub violations: usize,
    pub pass: bool,
    #[serde(skip)]
    pub rows: Vec<PairCheck>,
}

impl Certificate {
    pub fn from_rows(rows: Vec<PairCheck>, tol: f64) -> Self {
        let mut c = Certificate {
            pairs: rows.len(),
            tol,
            worst_stable_ratio: 0.0,
            worst_stable_at: None,
            worst_unstable_ratio: 0.0,
            worst_unstable_at: None,
            worst_commute_residual: 0.0,
            violations: 0,
            pass: true,
            rows: Vec::new(),
        };
        for r in &rows {
            if let Some(v) = r.stable_ratio {
                if v > c.worst_stable_ratio || c.worst_stable_at.is_none() {
                    c.worst_stable_ratio = v;
                    c.worst_stable_at = Some((r.t, r.s));
                }
            }
            if let Some(v) = r.unstable_ratio {
                if v > c.worst_unstable_ratio || c.worst_unstable_at.is_none() {
                    c.worst_unstable_ratio = v;
                    c.worst_unstable_at = Some((r.t, r.s));
                }
            }
            c.worst_commute_residual = c.worst_commute_residual.max(r.commute_residual);
            let bad = r.stable_ratio.is_some_and(|v| !(v <= 1.0 + tol))
                || r.unstable_ratio.is_some_and(|v| !(v <= 1.0 + tol))
                || !(r.commute_residual <= tol);
            if bad {
                c.violations += 1;
            }
        }
        c.pass = c.violations == 0;
        c.rows = rows;
        c
    }
}

/// All ordered pairs of a 1-D grid `lo, lo+step, ..., hi`.
pub fn square_grid(lo: f64, hi: f64, step: f64) -> Vec<(f64, f64)> {
    let pts = linspace_step(lo, hi, step);
    pts.iter().flat_map(|&t| pts.iter().map(move |&s| (t, s))).collect()
}

pub fn linspace_step(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

fn ratio_of(norm: f64, ln_bound: f64) -> f64 {
    if norm == 0.0 {
        0.0
    } else {
        (norm.ln() - ln_bound).exp()
    }
}

/// Checks the bounds with a caller-supplied evolution and bound.
pub(crate) fn certify_with<FT, FP, FS, FU>(
    grid: &[(f64, f64)],
    tol: f64,
    evolve: FT,
    proj: FP,
    ln_stable: FS,
    ln_unstable: FU,
) -> Result<Certificate>
where
    FT: Fn(f64, f64) -> Result<DMatrix<f64>> + Sync,
    FP: Fn(f64) -> Result<DMatrix<f64>> + Sync,
    FS: Fn(f64, f64) -> Result<f64> + Sync,
    FU: Fn(f64, f64) -> Result<f64> + Sync,
{
    let rows: Result<Vec<PairCheck>> = grid
        .par_iter()
        .map(|&(t, s)| {
            let tm = evolve(t, s)?;
            let ps = proj(s)?;
            let pt = proj(t)?;
            let qs = DMatrix::identity(ps.nrows(), ps.nrows()) - &ps;
            let stable_ratio = if t >= s { Some(ratio_of(spectral_norm(&(&tm * &ps)), ln_stable(t, s)?)) } else { None };
            let unstable_ratio = if s >= t { Some(ratio_of(spectral_norm(&(&tm * &qs)), ln_unstable(t, s)?)) } else { None };
            let commute = spectral_norm(&(&pt * &tm - &tm * &ps)) / spectral_norm(&tm).max(1.0);
            Ok(PairCheck { t, s, stable_ratio, unstable_ratio, commute_residual: commute })
        })
        .collect();
    Ok(Certificate::from_rows(rows?, tol))
}

/// Grid certificate for `spec` against the numerically computed `T(t, s)`.
pub fn verify(spec: &DichotomySpec, op: &EvolutionOperator, grid: &[(f64, f64)], tol: f64) -> Result<Certificate> {
    spec.rates.check_domain(op.domain())?;
    if spec.p.dim() != op.dim() {
        return Err(Error::InvalidParam("projection and system dimensions differ".into()));
    }
    certify_with(
        grid,
        tol,
        |t, s| op.evolve(t, s),
        |t| Ok(spec.p.at(t)),
        |t, s| spec.ln_stable_bound(t, s),
        |t, s| spec.ln_unstable_bound(t, s),
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct SideFit {
    pub samples: usize,
    pub ln_k: f64,
    pub exponent: f64,
    pub eps: f64,
    pub max_residual: f64,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub spec: DichotomySpec,
    pub stable: SideFit,
    pub unstable: Option<SideFit>,
    pub warnings: Vec<String>,
}

/// Solves `min |X beta - y|` and rejects rank-deficient designs.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    // column scaling keeps the rank test meaningful
    let scales: Vec<f64> = (0..x.ncols()).map(|j| x.column(j).norm().max(f64::MIN_POSITIVE)).collect();
    let xs = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] / scales[j]);
    let svd = xs.svd(true, true);
    let sv = &svd.singular_values;
    if sv.min() <= 1e-10 * sv.max() {
        return Err(Error::Degenerate("design matrix is rank deficient; widen the grid".into()));
    }
    let beta = svd.solve(y, 0.0).map_err(|e| Error::Degenerate(e.to_string()))?;
    Ok(DVector::from_fn(beta.len(), |j, _| beta[j] / scales[j]))
}

/// `y ≈ lnK + c x + e z` with `e >= 0` (or fixed), returning `(lnK, c, e, max residual)`.
fn fit_side(xs: &[f64], zs: &[f64], ys: &[f64], eps_fixed: Option<f64>) -> Result<(f64, f64, f64, f64)> {
    let m = ys.len();
    let solve_fixed = |e: f64| -> Result<(f64, f64, f64)> {
        let x = DMatrix::from_fn(m, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        let y = DVector::from_fn(m, |i, _| ys[i] - e * zs[i]);
        let b = least_squares(&x, &y)?;
        Ok((b[0], b[1], e))
    };
    let (mut lnk, c, e) = match eps_fixed {
        Some(e) => solve_fixed(e)?,
        None => {
            let x = DMatrix::from_fn(m, 3, |i, j| match j {
                0 => 1.0,
                1 => xs[i],
                _ => zs[i],
            });
            let b = least_squares(&x, &DVector::from_column_slice(ys))?;
            if b[2] < 0.0 {
                solve_fixed(0.0)?
            } else {
                (b[0], b[1], b[2])
            }
        }
    };
    let max_res = (0..m).map(|i| ys[i] - (lnk + c * xs[i] + e * zs[i])).fold(f64::NEG_INFINITY, f64::max);
    lnk += max_res.max(0.0);
    Ok((lnk, c, e, max_res))
}

pub const MIN_PAIRS_PER_REGIME: usize = 20;

/// Fits `(K, a, b, eps)` to computed norms, inflating `K` so the result
/// verifies on the training grid.
pub fn estimate_constants(
    op: &EvolutionOperator,
    p: &ProjectionFamily,
    rates: &RateQuadruple,
    grid: &[(f64, f64)],
    eps_fixed: Option<f64>,
) -> Result<Estimate> {
    rates.check_domain(op.domain())?;
    if let Some(e) = eps_fixed {
        if !(e >= 0.0) {
            return Err(Error::InvalidParam("fixed eps must be nonnegative".into()));
        }
    }
    let n_st = grid.iter().filter(|(t, s)| t >= s).count();
    let n_un = grid.iter().filter(|(t, s)| s >= t).count();
    if n_st < MIN_PAIRS_PER_REGIME || n_un < MIN_PAIRS_PER_REGIME {
        return Err(Error::Precondition(format!(
            "need at least {MIN_PAIRS_PER_REGIME} pairs per regime, got {n_st} stable and {n_un} unstable"
        )));
    }
    let norms: Result<Vec<(f64, f64, f64, f64)>> = grid
        .par_iter()
        .map(|&(t, s)| {
            let tm = op.evolve(t, s)?;
            let ps = p.at(s);
            let qs = DMatrix::identity(ps.nrows(), ps.nrows()) - &ps;
            Ok((t, s, spectral_norm(&(&tm * &ps)), spectral_norm(&(&tm * qs))))
        })
        .collect();
    let norms = norms?;
    let mut warnings = Vec::new();

    let tiny = |v: f64| v <= 1e-300;
    let (mut xs, mut zs, mut ys) = (Vec::new(), Vec::new(), Vec::new());
    for &(t, s, np, _) in &norms {
        if t >= s && !tiny(np) {
            xs.push(rates.h.ln_eval(t) - rates.h.ln_eval(s));
            zs.push(rates.mu.ln_eval(s.abs()));
            ys.push(np.ln());
        }
    }
    if ys.len() < 3 {
        return Err(Error::Degenerate("stable side has no data (P = 0?)".into()));
    }
    let (lnk_s, a, eps_s, res_s) = fit_side(&xs, &zs, &ys, eps_fixed)?;
    if !(a < 0.0) {
        return Err(Error::Precondition(format!("fitted stable exponent a = {a} is not negative")));
    }
    let stable = SideFit { samples: ys.len(), ln_k: lnk_s, exponent: a, eps: eps_s, max_residual: res_s };

    let (mut xs, mut zs, mut ys) = (Vec::new(), Vec::new(), Vec::new());
    for &(t, s, _, nq) in &norms {
        if s >= t && !tiny(nq) {
            xs.push(-(rates.k.ln_eval(s) - rates.k.ln_eval(t)));
            zs.push(rates.nu.ln_eval(s.abs()));
            ys.push(nq.ln());
        }
    }
    let unstable = if ys.len() < 3 {
        warnings.push("unstable side has no data; returning b = 0".to_string());
        None
    } else {
        let (mut lnk, mut b, mut e, mut res) = fit_side(&xs, &zs, &ys, eps_fixed)?;
        if b < 0.0 {
            warnings.push(format!("fitted b = {b} < 0 clamped to 0"));
            b = 0.0;
            let fixed = eps_fixed.unwrap_or(e.max(0.0));
            e = fixed;
            let r = (0..ys.len()).map(|i| ys[i] - e * zs[i]).fold(f64::NEG_INFINITY, f64::max);
            lnk = r;
            res = 0.0;
        }
        Some(SideFit { samples: ys.len(), ln_k: lnk, exponent: b, eps: e, max_residual: res })
    };

    let eps = unstable.as_ref().map_or(stable.eps, |u| u.eps.max(stable.eps));
    let ln_k = unstable.as_ref().map_or(stable.ln_k, |u| u.ln_k.max(stable.ln_k));
    let b = unstable.as_ref().map_or(0.0, |u| u.exponent);
    let spec = DichotomySpec::new(p.clone(), rates.clone(), ln_k.exp(), a, b, eps)?;
    Ok(Estimate { spec, stable, unstable, warnings })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProjectionReport {
    pub max_commute_residual: f64,
    pub worst_commute_at: Option<(f64, f64)>,
    pub max_idempotence_residual: f64,
    pub rank_constant: bool,
    pub pass: bool,
}

/// Commutation `P(t)T(t,s) = T(t,s)P(s)` (scaled by `max(1, |T|)`) and idempotence.
pub fn check_projection(p: &ProjectionFamily, op: &EvolutionOperator, grid: &[(f64, f64)]) -> Result<ProjectionReport> {
    let rows: Result<Vec<(f64, f64, f64)>> = grid
        .par_iter()
        .map(|&(t, s)| {
            let tm = op.evolve(t, s)?;
            let r = spectral_norm(&(p.at(t) * &tm - &tm * p.at(s))) / spectral_norm(&tm).max(1.0);
            Ok((t, s, r))
        })
        .collect();
    let mut worst = 0.0;
    let mut at = None;
    for (t, s, r) in rows? {
        if r > worst || at.is_none() {
            worst = r;
            at = Some((t, s));
        }
    }
    let mut idem = 0.0f64;
    let mut ranks = std::collections::BTreeSet::new();
    let mut times: Vec<f64> = grid.iter().flat_map(|&(t, s)| [t, s]).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    for &t in &times {
        let m = p.at(t);
        idem = idem.max(spectral_norm(&(&m * &m - &m)));
        ranks.insert(crate::linalg::rank(&m, 1e-8));
    }
    let rank_constant = ranks.len() <= 1;
    Ok(ProjectionReport {
        max_commute_residual: worst,
        worst_commute_at: at,
        max_idempotence_residual: idem,
        rank_constant,
        pass: worst <= DEFAULT_TOL && idem <= 1e-10 && rank_constant,
    })
}

/// Domain a spec can be checked on.
pub fn spec_domain(spec: &DichotomySpec) -> Domain {
    spec.rates.h.domain().meet(spec.rates.k.domain())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::IntegratorConfig;
    use crate::growth::GrowthRate;
    use crate::system::{make_oscillating, CoefficientField, OscillatingParams};

    fn diag_op() -> EvolutionOperator {
        EvolutionOperator::new(CoefficientField::const_diag(&[-1.0, 1.0]).unwrap(), IntegratorConfig::default()).unwrap()
    }

    fn diag_spec(k: f64) -> DichotomySpec {
        DichotomySpec::new(ProjectionFamily::leading(2, 1), RateQuadruple::uniform(GrowthRate::exp()), k, -1.0, 1.0, 0.0).unwrap()
    }

    #[test]
    fn spec_constraints() {
        let p = ProjectionFamily::leading(2, 1);
        let r = RateQuadruple::uniform(GrowthRate::exp());
        assert!(DichotomySpec::new(p.clone(), r.clone(), 1.0, 0.0, 1.0, 0.0).is_err());
        assert!(DichotomySpec::new(p.clone(), r.clone(), 1.0, -1.0, -0.1, 0.0).is_err());
        assert!(DichotomySpec::new(p.clone(), r.clone(), 0.0, -1.0, 1.0, 0.0).is_err());
        assert!(DichotomySpec::new(p, r, 1.0, -1.0, 0.0, 0.0).is_ok());
        assert!(ProjectionFamily::constant(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.5])).is_err());
    }

    #[test]
    fn tight_uniform_bound() {
        let cert = verify(&diag_spec(1.0), &diag_op(), &square_grid(-3.0, 3.0, 0.5), DEFAULT_TOL).unwrap();
        assert!(cert.pass, "{cert:?}");
        assert!((cert.worst_stable_ratio - 1.0).abs() < 1e-8);
        assert!((cert.worst_unstable_ratio - 1.0).abs() < 1e-8);
        for r in &cert.rows {
            if let Some(v) = r.stable_ratio {
                assert!((v - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn halved_k_fails_at_diagonal() {
        let ex = make_oscillating(&OscillatingParams::exponential(1.0, 0.1, 1.0), Domain::FullLine).unwrap();
        let op = EvolutionOperator::new(ex.field, IntegratorConfig::default()).unwrap();
        let g = square_grid(-6.0, 6.0, 0.5);
        let full = verify(&ex.spec, &op, &g, DEFAULT_TOL).unwrap();
        let spec = ex.spec.with_k(ex.spec.k_const / 2.0).unwrap();
        let cert = verify(&spec, &op, &g, DEFAULT_TOL).unwrap();
        assert!(!cert.pass && cert.violations > 0);
        // halving K doubles every ratio
        assert!((cert.worst_stable_ratio - 2.0 * full.worst_stable_ratio).abs() < 1e-9);
        // oracle at t = s = 0: |P| = 1 against K/2
        let row = cert.rows.iter().find(|r| r.t == 0.0 && r.s == 0.0).unwrap();
        let oracle = 2.0 / 0.2f64.exp();
        assert!((row.stable_ratio.unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_k_and_eps() {
        let ex = make_oscillating(&OscillatingParams::exponential(1.0, 0.1, 1.0), Domain::FullLine).unwrap();
        let op = EvolutionOperator::new(ex.field, IntegratorConfig::default()).unwrap();
        let g = square_grid(-4.0, 4.0, 1.0);
        assert!(verify(&ex.spec, &op, &g, DEFAULT_TOL).unwrap().pass);
        assert!(verify(&ex.spec.with_k(2.0).unwrap(), &op, &g, DEFAULT_TOL).unwrap().pass);
        assert!(verify(&ex.spec.with_eps(0.5).unwrap(), &op, &g, DEFAULT_TOL).unwrap().pass);
    }

    #[test]
    fn estimate_diag() {
        let op = diag_op();
        let grid = square_grid(-4.0, 4.0, 0.5);
        let est =
            estimate_constants(&op, &ProjectionFamily::leading(2, 1), &RateQuadruple::uniform(GrowthRate::exp()), &grid, None).unwrap();
        let s = &est.spec;
        assert!((-1.05..=-0.95).contains(&s.a), "{s:?}");
        assert!((0.95..=1.05).contains(&s.b));
        assert!(s.eps <= 0.05);
        assert!((0.95..=1.2).contains(&s.k_const));
        assert!(verify(s, &op, &grid, DEFAULT_TOL).unwrap().pass);
    }

    #[test]
    fn estimate_contracting_scalar_has_no_unstable_side() {
        let f = CoefficientField::const_diag(&[-1.0]).unwrap();
        let op = EvolutionOperator::new(f, IntegratorConfig::default()).unwrap();
        let p = ProjectionFamily::Constant(DMatrix::identity(1, 1));
        let est = estimate_constants(&op, &p, &RateQuadruple::uniform(GrowthRate::exp()), &square_grid(-3.0, 3.0, 0.5), None).unwrap();
        assert_eq!(est.spec.b, 0.0);
        assert!(!est.warnings.is_empty());
    }

    #[test]
    fn estimate_rejects_degenerate_grid() {
        let op = diag_op();
        let grid: Vec<(f64, f64)> = (0..30).map(|i| (i as f64 * 0.1, 0.0)).chain((0..30).map(|i| (0.0, i as f64 * 0.1))).collect();
        let r = estimate_constants(&op, &ProjectionFamily::leading(2, 1), &RateQuadruple::uniform(GrowthRate::exp()), &grid, None);
        assert!(matches!(r, Err(Error::Degenerate(_))), "{r:?}");
        let r = estimate_constants(&op, &ProjectionFamily::leading(2, 1), &RateQuadruple::uniform(GrowthRate::exp()), &grid[..10], None);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn projection_checks() {
        let op = diag_op();
        let grid = square_grid(-3.0, 3.0, 1.0);
        let rep = check_projection(&ProjectionFamily::leading(2, 1), &op, &grid).unwrap();
        assert!(rep.pass && rep.max_commute_residual < 1e-10);
        let line = ProjectionFamily::constant(DMatrix::from_element(2, 2, 0.5)).unwrap();
        let rep = check_projection(&line, &op, &grid).unwrap();
        assert!(!rep.pass);
        // closed form: |P T - T P| = |sinh(t - s)| for this P, scaled by max(1, e^{|t-s|})
        let tau = 6.0f64;
        let expect = tau.sinh() / tau.exp();
        assert!((rep.max_commute_residual - expect).abs() < 1e-7, "{} vs {expect}", rep.max_commute_residual);
    }

    #[test]
    fn domain_mismatch() {
        let f = CoefficientField::const_diag(&[-1.0, 1.0]).unwrap();
        let op = EvolutionOperator::new(f, IntegratorConfig::default()).unwrap();
        let spec =
            DichotomySpec::new(ProjectionFamily::leading(2, 1), RateQuadruple::uniform(GrowthRate::poly()), 1.0, -1.0, 1.0, 0.0).unwrap();
        assert!(matches!(verify(&spec, &op, &[(1.0, 0.0)], DEFAULT_TOL), Err(Error::Domain { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn larger_constants_still_pass(dk in 0.0f64..3.0, de in 0.0f64..1.0) {
                let op = diag_op();
                let g = square_grid(-2.0, 2.0, 1.0);
                let spec = diag_spec(1.0);
                prop_assume!(verify(&spec, &op, &g, DEFAULT_TOL).unwrap().pass);
                let bigger = DichotomySpec::new(spec.p.clone(), spec.rates.clone(), 1.0 + dk, -1.0, 1.0, de).unwrap();
                prop_assert!(verify(&bigger, &op, &g, DEFAULT_TOL).unwrap().pass);
            }

            #[test]
            fn estimate_always_reverifies(l1 in -2.0f64..-0.3, l2 in 0.3f64..2.0) {
                let f = CoefficientField::const_diag(&[l1, l2]).unwrap();
                let op = EvolutionOperator::new(f, IntegratorConfig::default()).unwrap();
                let grid = square_grid(-3.0, 3.0, 0.5);
                let est = estimate_constants(&op, &ProjectionFamily::leading(2, 1), &RateQuadruple::uniform(GrowthRate::exp()), &grid, None).unwrap();
                prop_assert!(verify(&est.spec, &op, &grid, DEFAULT_TOL).unwrap().pass);
            }
        }
    }
}
