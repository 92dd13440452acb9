//! Generalized Lyapunov exponents measured against growth rates, regularity
//! coefficients over candidate dual bases, and the dichotomy they imply.
//!
//! Exponents are limsups, so every estimate here is a tail-window supremum of
//! `log|x(t)| / log u(t)` together with the spread over that window.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dichotomy::{DichotomySpec, ProjectionFamily};
use crate::error::{Error, Result};
use crate::evolution::{EvolutionOperator, IntegratorConfig};
use crate::growth::{GrowthRate, RateQuadruple};
use crate::system::{adjoint, BlockSystem, CoefficientField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectrumConfig {
    pub horizon: f64,
    /// Tail window as a fraction of the horizon.
    pub window: f64,
    pub samples: usize,
    /// Values closer than this are one spectral value.
    pub gap: f64,
    /// Window spread above which an estimate is unreliable.
    pub spread_limit: f64,
    /// Required `log u(horizon)` for a reliable estimate.
    pub min_log_rate: f64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig { horizon: 50.0, window: 0.2, samples: 400, gap: 0.05, spread_limit: 0.2, min_log_rate: 10.0 }
    }
}

impl SpectrumConfig {
    pub fn with_horizon(horizon: f64) -> Self {
        SpectrumConfig { horizon, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.window > 0.0 && self.window <= 1.0 && self.samples >= 10) {
            return Err(Error::InvalidParam("spectrum horizon, window or sample count out of range".into()));
        }
        Ok(())
    }

    fn times(&self) -> Vec<f64> {
        (0..=self.samples).map(|i| self.horizon * i as f64 / self.samples as f64).collect()
    }
}

/// Rates for the two blocks and their adjoints.
#[derive(Debug, Clone)]
pub struct SpectrumRates {
    pub h: GrowthRate,
    pub k: GrowthRate,
    pub hbar: GrowthRate,
    pub kbar: GrowthRate,
}

impl SpectrumRates {
    pub fn uniform(r: GrowthRate) -> Self {
        SpectrumRates { h: r.clone(), k: r.clone(), hbar: r.clone(), kbar: r }
    }

    /// `(h, k, h hbar, k kbar)`.
    pub fn quadruple(&self) -> RateQuadruple {
        RateQuadruple::new(
            self.h.clone(),
            self.k.clone(),
            GrowthRate::product(&self.h, &self.hbar),
            GrowthRate::product(&self.k, &self.kbar),
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExponentTrace {
    pub value: f64,
    pub spread: f64,
    pub reliable: bool,
    pub times: Vec<f64>,
    /// `log(|x(t)| / |x(0)|)` at `times`.
    pub log_norms: Vec<f64>,
    /// `(t, log|x(t)| / log u(t))` over the tail window.
    pub tail: Vec<(f64, f64)>,
}

impl ExponentTrace {
    fn zero_vector() -> Self {
        ExponentTrace { value: f64::NEG_INFINITY, spread: 0.0, reliable: true, times: vec![], log_norms: vec![], tail: vec![] }
    }
}

fn tail_stats(times: &[f64], logs: &[f64], rate: &GrowthRate, cfg: &SpectrumConfig) -> (f64, f64, bool, Vec<(f64, f64)>) {
    let start = (1.0 - cfg.window) * cfg.horizon;
    let mut tail = Vec::new();
    for (&t, &l) in times.iter().zip(logs) {
        let lh = rate.ln_eval(t);
        if t >= start - 1e-12 && lh > 1e-12 {
            tail.push((t, l / lh));
        }
    }
    let hi = tail.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = tail.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let spread = if tail.is_empty() { f64::INFINITY } else { hi - lo };
    let reliable = spread <= cfg.spread_limit && rate.ln_eval(cfg.horizon) > cfg.min_log_rate && hi.is_finite();
    (hi, spread, reliable, tail)
}

fn check_rate(rate: &GrowthRate, cfg: &SpectrumConfig) -> Result<()> {
    rate.check_domain(0.0)?;
    rate.check_domain(cfg.horizon)
}

/// Exponent of one solution, using a prepared evolution operator.
pub fn exponent_with(op: &EvolutionOperator, rate: &GrowthRate, x0: &DVector<f64>, cfg: &SpectrumConfig) -> Result<ExponentTrace> {
    cfg.validate()?;
    check_rate(rate, cfg)?;
    if x0.len() != op.dim() {
        return Err(Error::InvalidParam("initial vector has the wrong dimension".into()));
    }
    let n0 = x0.norm();
    if n0 == 0.0 {
        return Ok(ExponentTrace::zero_vector());
    }
    let times = cfg.times();
    // growth is measured relative to |x0|; the limsup is unchanged and scaling
    // invariance then holds exactly at finite horizons
    let mut z = x0 / n0;
    let mut scale = 0.0;
    let mut logs = vec![scale];
    for w in times.windows(2) {
        z = op.evolve(w[1], w[0])? * z;
        let nz = z.norm();
        if nz == 0.0 || !nz.is_finite() {
            return Err(Error::Degenerate(format!("solution norm became {nz} at t = {}", w[1])));
        }
        scale += nz.ln();
        z /= nz;
        logs.push(scale);
    }
    let (value, spread, reliable, tail) = tail_stats(&times, &logs, rate, cfg);
    Ok(ExponentTrace { value, spread, reliable, times, log_norms: logs, tail })
}

/// `limsup log|x(t)| / log u(t)` for the solution of `x' = W(t) x` from `x0` at time 0.
pub fn lyapunov_exponent(field: &CoefficientField, rate: &GrowthRate, x0: &DVector<f64>, cfg: &SpectrumConfig) -> Result<ExponentTrace> {
    let op = EvolutionOperator::new(field.clone(), IntegratorConfig::default())?;
    exponent_with(&op, rate, x0, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralValue {
    pub value: f64,
    pub multiplicity: usize,
}

fn cluster(mut vals: Vec<f64>, gap: f64) -> Vec<SpectralValue> {
    vals.sort_by(f64::total_cmp);
    let mut out: Vec<(f64, usize, f64)> = Vec::new();
    for v in vals {
        match out.last_mut() {
            Some((sum, m, last)) if (v - *last).abs() < gap => {
                *sum += v;
                *m += 1;
                *last = v;
            }
            _ => out.push((v, 1, v)),
        }
    }
    out.into_iter().map(|(s, m, _)| SpectralValue { value: s / m as f64, multiplicity: m }).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct QrEstimate {
    pub values: Vec<f64>,
    pub spreads: Vec<f64>,
    pub reliable: bool,
}

/// Full exponent list by repeated QR of the propagated orthonormal frame.
pub fn qr_exponents(op: &EvolutionOperator, rate: &GrowthRate, cfg: &SpectrumConfig) -> Result<QrEstimate> {
    cfg.validate()?;
    check_rate(rate, cfg)?;
    let n = op.dim();
    let times = cfg.times();
    let mut q = DMatrix::<f64>::identity(n, n);
    let mut sums = vec![0.0; n];
    let mut logs: Vec<Vec<f64>> = vec![vec![0.0]; n];
    for w in times.windows(2) {
        let z = op.evolve(w[1], w[0])? * &q;
        let qr = z.qr();
        let r = qr.r();
        let mut qn = qr.q();
        for i in 0..n {
            let d = r[(i, i)];
            if d == 0.0 || !d.is_finite() {
                return Err(Error::Degenerate(format!("frame collapsed at t = {}", w[1])));
            }
            sums[i] += d.abs().ln();
            if d < 0.0 {
                let mut c = qn.column_mut(i);
                c.neg_mut();
            }
            logs[i].push(sums[i]);
        }
        q = qn;
    }
    let mut values = Vec::with_capacity(n);
    let mut spreads = Vec::with_capacity(n);
    let mut reliable = true;
    for l in &logs {
        let (v, s, ok, _) = tail_stats(&times, l, rate, cfg);
        values.push(v);
        spreads.push(s);
        reliable &= ok;
    }
    Ok(QrEstimate { values, spreads, reliable })
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    pub values_e: Vec<SpectralValue>,
    pub values_f: Vec<SpectralValue>,
    pub adjoint_e: Vec<SpectralValue>,
    pub adjoint_f: Vec<SpectralValue>,
    pub horizon: f64,
    pub reliable: bool,
    pub notes: Vec<String>,
    pub split: usize,
    pub dim: usize,
    /// Exponents of the fundamental-matrix columns and of the adjoint columns.
    pub columns_e: Vec<ExponentTrace>,
    pub columns_f: Vec<ExponentTrace>,
    pub adjoint_columns_e: Vec<ExponentTrace>,
    pub adjoint_columns_f: Vec<ExponentTrace>,
}

impl SpectrumReport {
    pub fn lambda_r(&self) -> f64 {
        self.values_e.last().map(|v| v.value).unwrap_or(f64::NEG_INFINITY)
    }

    pub fn chi_1(&self) -> f64 {
        self.values_f.first().map(|v| v.value).unwrap_or(f64::INFINITY)
    }
}

struct Side {
    op: EvolutionOperator,
    adj: EvolutionOperator,
}

impl Side {
    fn new(w: &CoefficientField) -> Result<Self> {
        Ok(Side {
            op: EvolutionOperator::new(w.clone(), IntegratorConfig::default())?,
            adj: EvolutionOperator::new(adjoint(w), IntegratorConfig::default())?,
        })
    }

    fn columns(op: &EvolutionOperator, rate: &GrowthRate, cfg: &SpectrumConfig) -> Result<Vec<ExponentTrace>> {
        let n = op.dim();
        (0..n)
            .into_par_iter()
            .map(|j| {
                let mut e = DVector::zeros(n);
                e[j] = 1.0;
                exponent_with(op, rate, &e, cfg)
            })
            .collect()
    }
}

pub fn spectrum(block: &BlockSystem, rates: &SpectrumRates, cfg: &SpectrumConfig) -> Result<SpectrumReport> {
    let e = Side::new(&block.w1)?;
    let f = Side::new(&block.w2)?;
    let jobs: Vec<(&EvolutionOperator, &GrowthRate)> =
        vec![(&e.op, &rates.h), (&f.op, &rates.k), (&e.adj, &rates.hbar), (&f.adj, &rates.kbar)];
    let qr: Vec<QrEstimate> = jobs.par_iter().map(|(op, r)| qr_exponents(op, r, cfg)).collect::<Result<_>>()?;
    let cols: Vec<Vec<ExponentTrace>> = jobs.par_iter().map(|(op, r)| Side::columns(op, r, cfg)).collect::<Result<_>>()?;
    let mut notes = Vec::new();
    let names = ["E", "F", "adjoint E", "adjoint F"];
    for (name, q) in names.iter().zip(&qr) {
        if q.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!("infinite exponent estimate on block {name}")));
        }
        if !q.reliable {
            notes.push(format!(
                "block {name}: tail spread {:.3} or horizon too short for a converged estimate",
                q.spreads.iter().cloned().fold(0.0, f64::max)
            ));
        }
    }
    let reliable = qr.iter().all(|q| q.reliable);
    let mut cols = cols.into_iter();
    Ok(SpectrumReport {
        values_e: cluster(qr[0].values.clone(), cfg.gap),
        values_f: cluster(qr[1].values.clone(), cfg.gap),
        adjoint_e: cluster(qr[2].values.clone(), cfg.gap),
        adjoint_f: cluster(qr[3].values.clone(), cfg.gap),
        horizon: cfg.horizon,
        reliable,
        notes,
        split: block.split(),
        dim: block.dim(),
        columns_e: cols.next().expect("four jobs"),
        columns_f: cols.next().expect("four jobs"),
        adjoint_columns_e: cols.next().expect("four jobs"),
        adjoint_columns_f: cols.next().expect("four jobs"),
    })
}

/// Two bases with `(basis_i, dual_j) = delta_ij`, stored as matrix columns.
#[derive(Debug, Clone)]
pub struct DualBasisPair {
    pub basis: DMatrix<f64>,
    pub dual: DMatrix<f64>,
}

impl DualBasisPair {
    pub fn new(basis: DMatrix<f64>, dual: DMatrix<f64>) -> Result<Self> {
        if !basis.is_square() || basis.shape() != dual.shape() {
            return Err(Error::InvalidParam("dual basis pair needs two square matrices of one size".into()));
        }
        let gram = basis.transpose() * &dual;
        let n = basis.nrows();
        let dev = (gram - DMatrix::<f64>::identity(n, n)).amax();
        if dev > 1e-10 {
            return Err(Error::InvalidParam(format!("bases are not dual (deviation {dev:e})")));
        }
        Ok(DualBasisPair { basis, dual })
    }

    pub fn from_basis(basis: DMatrix<f64>) -> Result<Self> {
        let inv = basis.transpose().try_inverse().ok_or_else(|| Error::Degenerate("candidate basis is singular".into()))?;
        Self::new(basis, inv)
    }

    pub fn standard(n: usize) -> Self {
        DualBasisPair { basis: DMatrix::identity(n, n), dual: DMatrix::identity(n, n) }
    }
}

/// Standard basis plus the right singular vectors of `X(t1)` for a moderate `t1`.
pub fn default_candidates(w: &CoefficientField, cfg: &SpectrumConfig) -> Result<Vec<DualBasisPair>> {
    let n = w.dim();
    let mut out = vec![DualBasisPair::standard(n)];
    if n > 1 {
        let op = EvolutionOperator::new(w.clone(), IntegratorConfig::default())?;
        let x = op.evolve(cfg.horizon.min(10.0), 0.0)?;
        let svd = x.svd(false, true);
        if let Some(vt) = svd.v_t {
            out.push(DualBasisPair::from_basis(vt.transpose())?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateScore {
    /// `phi(delta_i) + phibar(deltabar_i)` per basis index.
    pub sums: Vec<f64>,
    pub max_sum: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    /// Upper bounds: minimum over the candidates only.
    pub gamma: f64,
    pub gamma_bar: f64,
    pub best_e: usize,
    pub best_f: usize,
    pub candidates_e: Vec<CandidateScore>,
    pub candidates_f: Vec<CandidateScore>,
    /// `max_i (lambda_i + lambdabar_i)` with opposite orderings.
    pub pairing_lower_e: f64,
    pub pairing_lower_f: f64,
}

fn score_candidates(
    w: &CoefficientField,
    rate: &GrowthRate,
    rate_bar: &GrowthRate,
    cands: &[DualBasisPair],
    cfg: &SpectrumConfig,
) -> Result<(Vec<CandidateScore>, f64, usize)> {
    if cands.is_empty() {
        return Err(Error::InvalidParam("no candidate dual bases".into()));
    }
    let side = Side::new(w)?;
    let mut scores = Vec::new();
    for c in cands {
        if c.basis.nrows() != w.dim() {
            return Err(Error::InvalidParam("candidate basis has the wrong dimension".into()));
        }
        DualBasisPair::new(c.basis.clone(), c.dual.clone())?;
        let sums: Vec<f64> = (0..w.dim())
            .into_par_iter()
            .map(|i| {
                let a = exponent_with(&side.op, rate, &c.basis.column(i).into_owned(), cfg)?;
                let b = exponent_with(&side.adj, rate_bar, &c.dual.column(i).into_owned(), cfg)?;
                Ok(a.value + b.value)
            })
            .collect::<Result<_>>()?;
        let max_sum = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        scores.push(CandidateScore { sums, max_sum });
    }
    let (best, g) = scores.iter().enumerate().map(|(i, s)| (i, s.max_sum)).min_by(|a, b| a.1.total_cmp(&b.1)).expect("nonempty");
    Ok((scores, g, best))
}

fn pairing_bound(vals: &[SpectralValue], adj: &[SpectralValue]) -> f64 {
    let expand = |v: &[SpectralValue]| -> Vec<f64> { v.iter().flat_map(|s| std::iter::repeat(s.value).take(s.multiplicity)).collect() };
    let a = expand(vals);
    let mut b = expand(adj);
    b.reverse();
    a.iter().zip(&b).map(|(x, y)| x + y).fold(f64::NEG_INFINITY, f64::max)
}

pub fn regularity(
    block: &BlockSystem,
    rates: &SpectrumRates,
    report: &SpectrumReport,
    cand_e: &[DualBasisPair],
    cand_f: &[DualBasisPair],
    cfg: &SpectrumConfig,
) -> Result<RegularityReport> {
    let (candidates_e, gamma, best_e) = score_candidates(&block.w1, &rates.h, &rates.hbar, cand_e, cfg)?;
    let (candidates_f, gamma_bar, best_f) = score_candidates(&block.w2, &rates.k, &rates.kbar, cand_f, cfg)?;
    Ok(RegularityReport {
        gamma,
        gamma_bar,
        best_e,
        best_f,
        candidates_e,
        candidates_f,
        pairing_lower_e: pairing_bound(&report.values_e, &report.adjoint_e),
        pairing_lower_f: pairing_bound(&report.values_f, &report.adjoint_f),
    })
}

/// `sup_t max_j |x_j(t)| / u(t)^{m_j + epst}` over sampled column traces.
fn column_constant(cols: &[ExponentTrace], rate: &GrowthRate, eps_tilde: f64) -> f64 {
    let mut k = 0.0f64;
    for c in cols {
        for (&t, &l) in c.times.iter().zip(&c.log_norms) {
            let v = l - (c.value + eps_tilde) * rate.ln_eval(t);
            k = k.max(v.exp());
        }
    }
    k
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralDichotomy {
    pub k_const: f64,
    pub a: f64,
    pub b: f64,
    pub eps: f64,
    pub kbar_e: f64,
    pub kbar_f: f64,
}

/// Dichotomy constants from exponents and regularity coefficients. The constant
/// `K = max(Kbar_1^2 l^2, Kbar_2^2 (n-l)^2)` is built from the column traces.
pub fn dichotomy_from_spectrum(
    report: &SpectrumReport,
    reg: &RegularityReport,
    rates: &SpectrumRates,
    eps_tilde: f64,
) -> Result<(DichotomySpec, SpectralDichotomy)> {
    if !(eps_tilde > 0.0) {
        return Err(Error::InvalidParam("eps_tilde must be positive".into()));
    }
    let lr = report.lambda_r();
    let c1 = report.chi_1();
    if !(lr < 0.0 && c1 > 0.0) {
        return Err(Error::Precondition(format!("sign condition fails: lambda_r = {lr}, chi_1 = {c1}")));
    }
    let a = lr + eps_tilde;
    if a >= 0.0 {
        return Err(Error::Precondition(format!("eps_tilde {eps_tilde} too large: a = {a} is not negative")));
    }
    let b = c1 + eps_tilde;
    let eps = (reg.gamma.max(reg.gamma_bar) + eps_tilde).max(0.0);
    let l = report.split as f64;
    let m = (report.dim - report.split) as f64;
    let k1 =
        column_constant(&report.columns_e, &rates.h, eps_tilde).max(column_constant(&report.adjoint_columns_e, &rates.hbar, eps_tilde));
    let k2 =
        column_constant(&report.columns_f, &rates.k, eps_tilde).max(column_constant(&report.adjoint_columns_f, &rates.kbar, eps_tilde));
    let k_const = (k1 * k1 * l * l).max(k2 * k2 * m * m);
    let spec = DichotomySpec::new(ProjectionFamily::leading(report.dim, report.split), rates.quadruple(), k_const, a, b, eps)?;
    Ok((spec, SpectralDichotomy { k_const, a, b, eps, kbar_e: k1, kbar_f: k2 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dichotomy::{square_grid, verify, DEFAULT_TOL};
    use crate::growth::builtin;
    use crate::growth::Domain;
    use crate::system::{make_oscillating, OscillatingParams};

    fn diag_block(e: &[f64], f: &[f64]) -> BlockSystem {
        BlockSystem::new(CoefficientField::const_diag(e).unwrap(), CoefficientField::const_diag(f).unwrap()).unwrap()
    }

    #[test]
    fn scalar_contraction_exponent() {
        let w = CoefficientField::const_diag(&[-1.0]).unwrap();
        let r = lyapunov_exponent(&w, &GrowthRate::exp(), &DVector::from_element(1, 1.0), &SpectrumConfig::with_horizon(50.0)).unwrap();
        assert!((r.value + 1.0).abs() < 0.02, "{}", r.value);
        assert!(r.reliable);
    }

    #[test]
    fn polynomial_rate_exponent() {
        // x = (t+1)^{-2}
        let w = CoefficientField::new("inv", 1, Domain::HalfLine, |t| DMatrix::from_element(1, 1, -2.0 / (t + 1.0))).unwrap();
        let r = lyapunov_exponent(&w, &builtin("poly", &[]).unwrap(), &DVector::from_element(1, 1.0), &SpectrumConfig::with_horizon(1e4))
            .unwrap();
        assert!((r.value + 2.0).abs() < 0.05, "{}", r.value);
        // log(1e4 + 1) < 10, so the horizon is flagged
        assert!(!r.reliable);
    }

    #[test]
    fn zero_vector_is_minus_infinity() {
        let w = CoefficientField::const_diag(&[-1.0]).unwrap();
        let r = lyapunov_exponent(&w, &GrowthRate::exp(), &DVector::zeros(1), &SpectrumConfig::default()).unwrap();
        assert_eq!(r.value, f64::NEG_INFINITY);
    }

    #[test]
    fn constant_block_spectrum() {
        let b = diag_block(&[-1.0, -2.0], &[3.0]);
        let r = spectrum(&b, &SpectrumRates::uniform(GrowthRate::exp()), &SpectrumConfig::with_horizon(50.0)).unwrap();
        let e: Vec<f64> = r.values_e.iter().map(|v| v.value).collect();
        assert_eq!(e.len(), 2);
        assert!((e[0] + 2.0).abs() < 0.05 && (e[1] + 1.0).abs() < 0.05, "{e:?}");
        assert!((r.values_f[0].value - 3.0).abs() < 0.05);
        let a: Vec<f64> = r.adjoint_e.iter().map(|v| v.value).collect();
        assert!((a[0] - 1.0).abs() < 0.05 && (a[1] - 2.0).abs() < 0.05, "{a:?}");
        assert!(r.reliable);
    }

    #[test]
    fn oscillating_first_component() {
        // closed form: log x1(t) = -t + 0.1 (t (sin t - 1) + cos t - 1) for mu^ = e^t, so the
        // tail sup of the ratio tends to -1
        let mut p = OscillatingParams::exponential(1.0, 0.1, 1.0);
        p.hats.mu = GrowthRate::exp();
        p.hats.nu = GrowthRate::exp();
        let ex = make_oscillating(&p, Domain::FullLine).unwrap();
        let w1 = CoefficientField::new("ex22_w1", 1, Domain::FullLine, {
            let f = ex.field.clone();
            move |t| DMatrix::from_element(1, 1, f.eval(t)[(0, 0)])
        })
        .unwrap();
        let cfg = SpectrumConfig { samples: 2000, ..SpectrumConfig::with_horizon(50.0) };
        let r = lyapunov_exponent(&w1, &GrowthRate::exp(), &DVector::from_element(1, 1.0), &cfg).unwrap();
        let oracle = cfg
            .times()
            .into_iter()
            .filter(|&t| t >= 40.0)
            .map(|t| (-t + 0.1 * (t * (t.sin() - 1.0) + t.cos() - 1.0)) / t)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((r.value - oracle).abs() < 1e-6, "{} vs {oracle}", r.value);
        assert!((r.value + 1.0).abs() < 0.05, "{}", r.value);
    }

    #[test]
    fn regularity_of_diagonal_block() {
        let b = diag_block(&[-1.0, -2.0], &[3.0]);
        let rates = SpectrumRates::uniform(GrowthRate::exp());
        let cfg = SpectrumConfig::with_horizon(50.0);
        let r = spectrum(&b, &rates, &cfg).unwrap();
        let reg = regularity(&b, &rates, &r, &[DualBasisPair::standard(2)], &[DualBasisPair::standard(1)], &cfg).unwrap();
        assert!(reg.gamma.abs() < 0.02 && reg.gamma_bar.abs() < 0.02, "{reg:?}");
        assert!(reg.gamma >= reg.pairing_lower_e - 0.05);
    }

    #[test]
    fn rotated_system_prefers_diagonalizing_basis() {
        let th = 0.6f64;
        let rot = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let a = &rot * DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0])) * rot.transpose();
        let b = BlockSystem::new(CoefficientField::constant(a).unwrap(), CoefficientField::const_diag(&[3.0]).unwrap()).unwrap();
        let rates = SpectrumRates::uniform(GrowthRate::exp());
        // short enough that rounding along the fast adjoint direction stays invisible
        let cfg = SpectrumConfig::with_horizon(20.0);
        let r = spectrum(&b, &rates, &cfg).unwrap();
        let cands = [DualBasisPair::standard(2), DualBasisPair::from_basis(rot.clone()).unwrap()];
        let reg = regularity(&b, &rates, &r, &cands, &[DualBasisPair::standard(1)], &cfg).unwrap();
        assert!(reg.candidates_e[0].max_sum >= reg.candidates_e[1].max_sum);
        assert!((reg.candidates_e[0].max_sum - 1.0).abs() < 0.05);
        assert!(reg.candidates_e[1].max_sum.abs() < 0.05);
        // the singular-vector candidate finds the diagonalizing basis on its own
        let def = default_candidates(&b.w1, &cfg).unwrap();
        let reg2 = regularity(&b, &rates, &r, &def, &[DualBasisPair::standard(1)], &cfg).unwrap();
        assert!(reg2.gamma.abs() < 0.05, "{reg2:?}");
    }

    #[test]
    fn non_dual_candidates_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(DualBasisPair::new(m.clone(), m.clone()).is_err());
        let p = DualBasisPair::from_basis(m).unwrap();
        assert!((p.basis.transpose() * &p.dual - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn dichotomy_from_constant_blocks_verifies() {
        let b = diag_block(&[-1.0], &[1.0]);
        let rates = SpectrumRates::uniform(GrowthRate::exp());
        let cfg = SpectrumConfig::with_horizon(50.0);
        let r = spectrum(&b, &rates, &cfg).unwrap();
        let reg = regularity(&b, &rates, &r, &[DualBasisPair::standard(1)], &[DualBasisPair::standard(1)], &cfg).unwrap();
        let (spec, c) = dichotomy_from_spectrum(&r, &reg, &rates, 0.1).unwrap();
        assert!((c.a + 0.9).abs() < 0.02 && (c.b - 1.1).abs() < 0.02);
        assert!((c.eps - 0.1 - reg.gamma.max(reg.gamma_bar)).abs() < 1e-12);
        let op = EvolutionOperator::new(b.full(), IntegratorConfig::default()).unwrap();
        let cert = verify(&spec, &op, &square_grid(0.0, 10.0, 0.5), DEFAULT_TOL).unwrap();
        assert!(cert.pass, "{cert:?}");
    }

    #[test]
    fn sign_condition_and_arithmetic() {
        let b = diag_block(&[-2.0], &[0.5]);
        let rates = SpectrumRates::uniform(GrowthRate::exp());
        let cfg = SpectrumConfig::with_horizon(50.0);
        let r = spectrum(&b, &rates, &cfg).unwrap();
        let reg = regularity(&b, &rates, &r, &[DualBasisPair::standard(1)], &[DualBasisPair::standard(1)], &cfg).unwrap();
        let (_, c) = dichotomy_from_spectrum(&r, &reg, &rates, 0.5).unwrap();
        assert!((c.a + 1.5).abs() < 0.02);
        let bad = diag_block(&[0.1], &[1.0]);
        let r = spectrum(&bad, &rates, &cfg).unwrap();
        let reg = regularity(&bad, &rates, &r, &[DualBasisPair::standard(1)], &[DualBasisPair::standard(1)], &cfg).unwrap();
        assert!(matches!(dichotomy_from_spectrum(&r, &reg, &rates, 0.1), Err(Error::Precondition(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]
            #[test]
            fn scale_invariance_and_max_rule(c in prop_oneof![-5.0f64..-0.2, 0.2f64..5.0], u in -1.0f64..1.0, v in -1.0f64..1.0) {
                prop_assume!(u.abs() > 0.05 && v.abs() > 0.05);
                let w = CoefficientField::const_diag(&[-1.0, -2.0]).unwrap();
                let cfg = SpectrumConfig::with_horizon(30.0);
                let r = GrowthRate::exp();
                let x = DVector::from_vec(vec![u, v]);
                let a = lyapunov_exponent(&w, &r, &x, &cfg).unwrap().value;
                let b = lyapunov_exponent(&w, &r, &(&x * c), &cfg).unwrap().value;
                prop_assert!((a - b).abs() < 0.01);
                let e1 = DVector::from_vec(vec![u, 0.0]);
                let e2 = DVector::from_vec(vec![0.0, v]);
                let p1 = lyapunov_exponent(&w, &r, &e1, &cfg).unwrap().value;
                let p2 = lyapunov_exponent(&w, &r, &e2, &cfg).unwrap().value;
                prop_assert!(a <= p1.max(p2) + 0.02);
            }

            #[test]
            fn adjoint_duality(d1 in -3.0f64..-0.3, d2 in -3.0f64..-0.3) {
                let b = diag_block(&[d1, d2], &[1.0]);
                let r = spectrum(&b, &SpectrumRates::uniform(GrowthRate::exp()), &SpectrumConfig::with_horizon(40.0)).unwrap();
                let mut e: Vec<f64> = r.values_e.iter().flat_map(|s| std::iter::repeat(s.value).take(s.multiplicity)).collect();
                let mut a: Vec<f64> = r.adjoint_e.iter().flat_map(|s| std::iter::repeat(-s.value).take(s.multiplicity)).collect();
                e.sort_by(f64::total_cmp);
                a.sort_by(f64::total_cmp);
                for (x, y) in e.iter().zip(&a) {
                    prop_assert!((x - y).abs() < 0.05);
                }
            }
        }
    }
}
