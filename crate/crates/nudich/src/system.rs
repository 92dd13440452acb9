//! Coefficient fields `A(t)`, block systems, nonlinear terms and the worked
//! two-dimensional example with a closed-form evolution operator.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dichotomy::{DichotomySpec, ProjectionFamily};
use crate::error::{Error, Result};
use crate::growth::{Domain, GrowthRate, RateQuadruple};

pub const MAX_DIM: usize = 16;

pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type VectorFieldFn = Arc<dyn Fn(f64, &DVector<f64>, &[f64]) -> DVector<f64> + Send + Sync>;
pub type EvolutionFn = Arc<dyn Fn(f64, f64) -> DMatrix<f64> + Send + Sync>;

#[derive(Clone)]
pub struct CoefficientField {
    name: String,
    dim: usize,
    domain: Domain,
    continuous: bool,
    eval: MatrixFn,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField").field("name", &self.name).field("dim", &self.dim).field("domain", &self.domain).finish()
    }
}

impl CoefficientField {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        domain: Domain,
        eval: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidParam(format!("dimension {dim} outside 1..={MAX_DIM}")));
        }
        Ok(CoefficientField { name: name.into(), dim, domain, continuous: true, eval: Arc::new(eval) })
    }

    pub fn constant(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidParam("coefficient matrix must be square".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("non-finite coefficient".into()));
        }
        let n = m.nrows();
        Self::new("const_block", n, Domain::FullLine, move |_| m.clone())
    }

    pub fn const_diag(d: &[f64]) -> Result<Self> {
        let mut f = Self::constant(DMatrix::from_diagonal(&DVector::from_column_slice(d)))?;
        f.name = "const_diag".into();
        Ok(f)
    }

    /// Linear interpolation between samples `(t_i, A_i)`, constant beyond the ends.
    pub fn tabulated(ts: Vec<f64>, mats: Vec<DMatrix<f64>>, domain: Domain) -> Result<Self> {
        if ts.len() < 2 || ts.len() != mats.len() {
            return Err(Error::Data("need at least two samples of A(t)".into()));
        }
        if ts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("sample times must be strictly increasing".into()));
        }
        let n = mats[0].nrows();
        if mats.iter().any(|m| m.nrows() != n || m.ncols() != n) {
            return Err(Error::Data("inconsistent matrix sizes".into()));
        }
        if mats.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data("non-finite entry in tabulated field".into()));
        }
        Self::new("user_tabulated", n, domain, move |t| {
            if t <= ts[0] {
                return mats[0].clone();
            }
            let last = ts.len() - 1;
            if t >= ts[last] {
                return mats[last].clone();
            }
            let i = ts.partition_point(|&x| x <= t) - 1;
            let w = (t - ts[i]) / (ts[i + 1] - ts[i]);
            &mats[i] * (1.0 - w) + &mats[i + 1] * w
        })
    }

    /// CSV with header and columns `t, a11, a12, ..., ann` (row-major).
    pub fn tabulated_csv(path: &Path, domain: Domain) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut ts = Vec::new();
        let mut mats = Vec::new();
        let mut n = 0;
        for rec in rdr.records() {
            let rec = rec?;
            let cols = rec.len() - 1;
            let dim = (cols as f64).sqrt().round() as usize;
            if dim * dim != cols || dim == 0 {
                return Err(Error::Data(format!("{}: {cols} matrix columns is not a square count", path.display())));
            }
            if n != 0 && dim != n {
                return Err(Error::Data(format!("{}: ragged rows", path.display())));
            }
            n = dim;
            let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            ts.push(vals[0]);
            mats.push(DMatrix::from_row_slice(n, n, &vals[1..]));
        }
        Self::tabulated(ts, mats, domain)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn is_continuous(&self) -> bool {
        self.continuous
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        (self.eval)(t)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// `t -> A(t) + B(t)`.
    pub fn plus(&self, other: &CoefficientField) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::InvalidParam("dimension mismatch in field sum".into()));
        }
        let (a, b) = (self.eval.clone(), other.eval.clone());
        Self::new(format!("{}+{}", self.name, other.name), self.dim, self.domain.meet(other.domain), move |t| a(t) + b(t))
    }

    /// Finite entries at every probe.
    pub fn check_finite(&self, probes: &[f64]) -> Result<()> {
        for &t in probes {
            let m = self.eval(t);
            if m.nrows() != self.dim || m.ncols() != self.dim {
                return Err(Error::Data(format!("A({t}) has shape {}x{}", m.nrows(), m.ncols())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("A({t}) has a non-finite entry")));
            }
        }
        Ok(())
    }
}

/// `t -> -A(t)^T`.
pub fn adjoint(field: &CoefficientField) -> CoefficientField {
    let f = field.eval.clone();
    let name = match field.name.strip_prefix("adjoint(").and_then(|s| s.strip_suffix(')')) {
        Some(inner) => inner.to_string(),
        None => format!("adjoint({})", field.name),
    };
    CoefficientField {
        name,
        dim: field.dim,
        domain: field.domain,
        continuous: field.continuous,
        eval: Arc::new(move |t| -f(t).transpose()),
    }
}

#[derive(Debug, Clone)]
pub struct BlockSystem {
    pub w1: CoefficientField,
    pub w2: CoefficientField,
}

impl BlockSystem {
    pub fn new(w1: CoefficientField, w2: CoefficientField) -> Result<Self> {
        if w1.dim + w2.dim > MAX_DIM {
            return Err(Error::InvalidParam("block system too large".into()));
        }
        Ok(BlockSystem { w1, w2 })
    }

    pub fn split(&self) -> usize {
        self.w1.dim
    }

    pub fn dim(&self) -> usize {
        self.w1.dim + self.w2.dim
    }

    pub fn domain(&self) -> Domain {
        self.w1.domain.meet(self.w2.domain)
    }

    /// `diag(W1, W2)`.
    pub fn full(&self) -> CoefficientField {
        let (l, n) = (self.split(), self.dim());
        let (a, b) = (self.w1.eval.clone(), self.w2.eval.clone());
        CoefficientField {
            name: format!("blockdiag({},{})", self.w1.name, self.w2.name),
            dim: n,
            domain: self.domain(),
            continuous: true,
            eval: Arc::new(move |t| {
                let mut m = DMatrix::zeros(n, n);
                m.view_mut((0, 0), (l, l)).copy_from(&a(t));
                m.view_mut((l, l), (n - l, n - l)).copy_from(&b(t));
                m
            }),
        }
    }

    /// Projection onto the first block along the second.
    pub fn projection(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| if i == j && i < self.split() { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LipschitzKind {
    Conjugacy { alpha: f64, gamma: f64 },
    Manifold { c_hat: f64, q: f64 },
}

#[derive(Clone)]
pub struct NonlinearTerm {
    name: String,
    dim: usize,
    pub kind: LipschitzKind,
    pub zero_at_origin: bool,
    eval: VectorFieldFn,
}

impl fmt::Debug for NonlinearTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearTerm").field("name", &self.name).field("dim", &self.dim).field("kind", &self.kind).finish()
    }
}

impl NonlinearTerm {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        kind: LipschitzKind,
        zero_at_origin: bool,
        eval: impl Fn(f64, &DVector<f64>, &[f64]) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        NonlinearTerm { name: name.into(), dim, kind, zero_at_origin, eval: Arc::new(eval) }
    }

    pub fn zero(dim: usize, kind: LipschitzKind) -> Self {
        Self::new("zero", dim, kind, true, move |_, _, _| DVector::zeros(dim))
    }

    /// `gamma0 * e^{-t^2} * tanh(x)` componentwise.
    pub fn gauss_tanh(dim: usize, gamma0: f64) -> Self {
        let kind = LipschitzKind::Conjugacy { alpha: gamma0 * (dim as f64).sqrt(), gamma: gamma0 };
        Self::new("gauss_tanh", dim, kind, true, move |t, x, _| x.map(|v| gamma0 * (-t * t).exp() * v.tanh()))
    }

    /// `lambda * c0 * x_{i+1}^3` in component `i` (cyclic).
    pub fn cubic_cross(dim: usize, c0: f64, lambda_max: f64) -> Self {
        let kind = LipschitzKind::Manifold { c_hat: cubic_c_hat(c0, lambda_max), q: 2.0 };
        Self::new("cubic_cross", dim, kind, true, move |_, x, lam| {
            let l = lam.first().copied().unwrap_or(1.0);
            DVector::from_fn(dim, |i, _| l * c0 * x[(i + 1) % dim].powi(3))
        })
    }

    /// `lambda * c0 * x_1^3` in the last component, zero elsewhere.
    pub fn cubic_feed(dim: usize, c0: f64, lambda_max: f64) -> Self {
        let kind = LipschitzKind::Manifold { c_hat: cubic_c_hat(c0, lambda_max), q: 2.0 };
        Self::new("cubic_feed", dim, kind, true, move |_, x, lam| {
            let l = lam.first().copied().unwrap_or(1.0);
            let mut v = DVector::zeros(dim);
            v[dim - 1] = l * c0 * x[0].powi(3);
            v
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, t: f64, x: &DVector<f64>, lambda: &[f64]) -> DVector<f64> {
        (self.eval)(t, x, lambda)
    }

    /// Scales the term by a constant factor (and its constants accordingly).
    pub fn scaled(&self, c: f64) -> Self {
        let f = self.eval.clone();
        let kind = match self.kind {
            LipschitzKind::Conjugacy { alpha, gamma } => LipschitzKind::Conjugacy { alpha: alpha * c.abs(), gamma: gamma * c.abs() },
            LipschitzKind::Manifold { c_hat, q } => LipschitzKind::Manifold { c_hat: c_hat * c.abs(), q },
        };
        NonlinearTerm {
            name: format!("{}*{c}", self.name),
            dim: self.dim,
            kind,
            zero_at_origin: self.zero_at_origin,
            eval: Arc::new(move |t, x, l| f(t, x, l) * c),
        }
    }

    /// Worst `|f(t, 0, lambda)|` over probes; errors if the flag is set and violated.
    pub fn check_zero_at_origin(&self, times: &[f64], params: &[Vec<f64>]) -> Result<f64> {
        let zero = DVector::zeros(self.dim);
        let mut worst = 0.0f64;
        let default = vec![Vec::new()];
        let params = if params.is_empty() { &default } else { params };
        for &t in times {
            for l in params {
                worst = worst.max(self.eval(t, &zero, l).norm());
            }
        }
        if self.zero_at_origin && worst > 1e-14 {
            return Err(Error::Precondition(format!("f(t, 0) has norm {worst:e}")));
        }
        Ok(worst)
    }
}

/// `|a^3 - b^3| <= 1.5 |a - b| (a^2 + b^2)`, and the lambda-difference needs `c0`.
fn cubic_c_hat(c0: f64, lambda_max: f64) -> f64 {
    (1.5 * c0.abs() * lambda_max.abs()).max(c0.abs())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ParameterSpace {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ParameterSpace {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidParam("parameter bounds must have equal nonzero length".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidParam("parameter box needs lo < hi".into()));
        }
        Ok(ParameterSpace { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, l: &[f64]) -> bool {
        l.len() == self.dim() && l.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| a <= v && v <= b)
    }
}

#[derive(Debug, Clone)]
pub struct OscillatingParams {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub hats: RateQuadruple,
}

impl OscillatingParams {
    /// `h^ = k^ = e^t`, `mu^ = nu^ = e^{|t|}`.
    pub fn exponential(eta1: f64, eta2: f64, eta3: f64) -> Self {
        let e = GrowthRate::exp();
        let ea = crate::growth::builtin("expabs", &[]).expect("builtin");
        OscillatingParams { eta1, eta2, eta3, hats: RateQuadruple::new(e.clone(), e, ea.clone(), ea) }
    }
}

pub struct Oscillating {
    pub field: CoefficientField,
    pub analytic: EvolutionFn,
    pub spec: DichotomySpec,
}

fn oscillation(l: f64) -> f64 {
    l * (l.sin() - 1.0) + l.cos()
}

pub fn make_oscillating(params: &OscillatingParams, domain: Domain) -> Result<Oscillating> {
    let OscillatingParams { eta1, eta2, eta3, ref hats } = *params;
    if !(eta1 > 0.0 && eta3 > 0.0 && eta2 >= 0.0) {
        return Err(Error::InvalidParam("eta1, eta3 must be positive and eta2 nonnegative".into()));
    }
    for r in [&hats.h, &hats.k, &hats.mu, &hats.nu] {
        if !r.domain().covers(domain) {
            return Err(Error::Domain { name: r.name().to_string(), t: -1.0, domain: r.domain().as_str() });
        }
    }
    let h = hats.clone();
    let field = CoefficientField::new("oscillating", 2, domain, move |t| {
        let l1 = h.mu.ln_eval(t);
        let l2 = h.nu.ln_eval(t);
        let z1 = eta2 * h.mu.log_deriv(t) * (l1 * l1.cos() - 1.0);
        let z2 = eta2 * h.nu.log_deriv(t) * (l2 * l2.cos() - 1.0);
        DMatrix::from_row_slice(2, 2, &[-eta1 * h.h.log_deriv(t) + z1, 0.0, 0.0, eta3 * h.k.log_deriv(t) + z2])
    })?;
    let h = hats.clone();
    let analytic: EvolutionFn = Arc::new(move |t, s| {
        let d1 = oscillation(h.mu.ln_eval(t)) - oscillation(h.mu.ln_eval(s));
        let d2 = oscillation(h.nu.ln_eval(t)) - oscillation(h.nu.ln_eval(s));
        let p = (-eta1 * (h.h.ln_eval(t) - h.h.ln_eval(s)) + eta2 * d1).exp();
        let q = (eta3 * (h.k.ln_eval(t) - h.k.ln_eval(s)) + eta2 * d2).exp();
        DMatrix::from_row_slice(2, 2, &[p, 0.0, 0.0, q])
    });
    let spec = DichotomySpec::new(
        ProjectionFamily::constant(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]))?,
        hats.clone(),
        (2.0 * eta2).exp(),
        -eta1,
        eta3,
        2.0 * eta2,
    )?;
    Ok(Oscillating { field, analytic, spec })
}
