//! Growth rates and the ratio algebra used by every bound.
//!
//! A growth rate is a positive nondecreasing `u` with `u(0) = 1`. Bounds only
//! ever need powers of ratios `(u(t)/u(s))^p`, which are evaluated through
//! `ln u` so that rates like `e^{t^2}` stay usable far past `f64` range.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};

/// Exponent magnitude beyond which `ratio_power` saturates.
pub const SATURATION_LOG: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    FullLine,
    HalfLine,
}

impl Domain {
    pub fn contains(self, t: f64) -> bool {
        match self {
            Domain::FullLine => t.is_finite(),
            Domain::HalfLine => t.is_finite() && t >= 0.0,
        }
    }

    /// True when every time admissible in `other` is admissible here.
    pub fn covers(self, other: Domain) -> bool {
        !(self == Domain::HalfLine && other == Domain::FullLine)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::FullLine => "full-line",
            Domain::HalfLine => "half-line",
        }
    }

    /// The smaller of two domains.
    pub fn meet(self, other: Domain) -> Domain {
        if self == Domain::HalfLine || other == Domain::HalfLine {
            Domain::HalfLine
        } else {
            Domain::FullLine
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Exp(f64),
    Poly,
    PolySq,
    ExpAbs,
    ExpSq,
    Rho(Arc<MonotoneCubic>),
    Product(Arc<GrowthRate>, Arc<GrowthRate>),
}

#[derive(Debug, Clone)]
pub struct GrowthRate {
    name: String,
    domain: Domain,
    params: Vec<(String, f64)>,
    kind: Kind,
}

/// Result of `ratio_power`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioPower {
    pub value: f64,
    /// `p * (ln u(t) - ln u(s))`, never clamped.
    pub log: f64,
    pub saturated: bool,
}

impl GrowthRate {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn params(&self) -> &[(String, f64)] {
        &self.params
    }

    /// Raw formula value; defined (possibly nonpositive) outside the domain.
    pub fn eval(&self, t: f64) -> f64 {
        match &self.kind {
            Kind::Poly => t + 1.0,
            Kind::PolySq => t * t + 1.0,
            _ => self.ln_eval(t).exp(),
        }
    }

    pub fn deriv(&self, t: f64) -> f64 {
        match &self.kind {
            Kind::Poly => 1.0,
            Kind::PolySq => 2.0 * t,
            Kind::Product(a, b) => a.deriv(t) * b.eval(t) + a.eval(t) * b.deriv(t),
            _ => self.log_deriv(t) * self.eval(t),
        }
    }

    /// `ln u(t)`.
    pub fn ln_eval(&self, t: f64) -> f64 {
        match &self.kind {
            Kind::Exp(r) => r * t,
            Kind::Poly => (t + 1.0).ln(),
            Kind::PolySq => (t * t).ln_1p(),
            Kind::ExpAbs => t.abs(),
            Kind::ExpSq => t * t,
            Kind::Rho(c) => c.eval(t),
            Kind::Product(a, b) => a.ln_eval(t) + b.ln_eval(t),
        }
    }

    /// `u'(t) / u(t)`.
    pub fn log_deriv(&self, t: f64) -> f64 {
        match &self.kind {
            Kind::Exp(r) => *r,
            Kind::Poly => 1.0 / (t + 1.0),
            Kind::PolySq => 2.0 * t / (t * t + 1.0),
            Kind::ExpAbs => {
                if t > 0.0 {
                    1.0
                } else if t < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Kind::ExpSq => 2.0 * t,
            Kind::Rho(c) => c.deriv(t),
            Kind::Product(a, b) => a.log_deriv(t) + b.log_deriv(t),
        }
    }

    pub fn check_domain(&self, t: f64) -> Result<()> {
        if self.domain.contains(t) {
            Ok(())
        } else {
            Err(Error::Domain { name: self.name.clone(), t, domain: self.domain.as_str() })
        }
    }

    /// `u^p` evaluated at `|t|`, the form taken by nonuniform factors.
    pub fn abs_power(&self, t: f64, p: f64) -> f64 {
        (p * self.ln_eval(t.abs())).exp()
    }

    /// Pointwise product of two rates, itself a growth rate.
    pub fn product(a: &GrowthRate, b: &GrowthRate) -> GrowthRate {
        GrowthRate {
            name: format!("{}*{}", a.name, b.name),
            domain: a.domain.meet(b.domain),
            params: Vec::new(),
            kind: Kind::Product(Arc::new(a.clone()), Arc::new(b.clone())),
        }
    }

    pub fn exp() -> GrowthRate {
        builtin("exp", &[]).expect("builtin exp")
    }

    /// `e^{r t}`.
    pub fn exp_rate(r: f64) -> Result<GrowthRate> {
        builtin("exp", &[("rate", r)])
    }

    pub fn poly() -> GrowthRate {
        builtin("poly", &[]).expect("builtin poly")
    }

    /// `e^{rho(t)}` from samples `(t_i, rho_i)` with `rho(0) = 0`.
    pub fn rho_exp(ts: &[f64], rho: &[f64]) -> Result<GrowthRate> {
        let c = MonotoneCubic::new(ts, rho)?;
        if ts[0] > 0.0 {
            return Err(Error::InvalidParam("rho samples must start at t <= 0".into()));
        }
        let r0 = c.eval(0.0);
        if r0.abs() > 1e-12 {
            return Err(Error::InvalidParam(format!("rho(0) = {r0} but a growth rate needs u(0) = 1")));
        }
        if rho.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParam("rho samples must be nondecreasing".into()));
        }
        Ok(GrowthRate { name: "rho_exp".into(), domain: Domain::HalfLine, params: Vec::new(), kind: Kind::Rho(Arc::new(c)) })
    }

    /// Reads a two-column CSV (`t`, `rho`) with a header row.
    pub fn rho_exp_csv(path: &Path) -> Result<GrowthRate> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut ts = Vec::new();
        let mut rs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::Data(format!("{}: expected 2 columns, got {}", path.display(), rec.len())));
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Data(format!("{}: `{s}`: {e}", path.display())));
            ts.push(parse(&rec[0])?);
            rs.push(parse(&rec[1])?);
        }
        Self::rho_exp(&ts, &rs)
    }
}

/// Builtin rates: `exp` (optional `rate`), `poly`, `polysq`, `expabs`, `expsq`.
/// `rho_exp` needs samples and is built with [`GrowthRate::rho_exp`].
pub fn builtin(name: &str, params: &[(&str, f64)]) -> Result<GrowthRate> {
    let take = |allowed: &[&str]| -> Result<Vec<(String, f64)>> {
        for (k, _) in params {
            if !allowed.contains(k) {
                return Err(Error::InvalidParam(format!("rate `{name}` has no parameter `{k}`")));
            }
        }
        Ok(params.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    };
    let (domain, kind, ps) = match name {
        "exp" => {
            let ps = take(&["rate"])?;
            let r = ps.iter().find(|(k, _)| k == "rate").map(|p| p.1).unwrap_or(1.0);
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidParam(format!("exp rate must be positive, got {r}")));
            }
            (Domain::FullLine, Kind::Exp(r), ps)
        }
        "poly" => (Domain::HalfLine, Kind::Poly, take(&[])?),
        "polysq" => (Domain::HalfLine, Kind::PolySq, take(&[])?),
        "expabs" => (Domain::FullLine, Kind::ExpAbs, take(&[])?),
        "expsq" => (Domain::HalfLine, Kind::ExpSq, take(&[])?),
        "rho_exp" => {
            return Err(Error::InvalidParam("rho_exp needs tabulated samples".into()));
        }
        other => return Err(Error::UnknownRate(other.to_string())),
    };
    Ok(GrowthRate { name: name.to_string(), domain, params: ps, kind })
}

/// `(u(t)/u(s))^p` through logarithms.
pub fn ratio_power(rate: &GrowthRate, t: f64, s: f64, p: f64) -> Result<RatioPower> {
    rate.check_domain(t)?;
    rate.check_domain(s)?;
    let log = if p == 0.0 { 0.0 } else { p * (rate.ln_eval(t) - rate.ln_eval(s)) };
    let saturated = log.abs() > SATURATION_LOG;
    let value = if log > SATURATION_LOG { f64::INFINITY } else { log.max(-SATURATION_LOG).exp() };
    Ok(RatioPower { value, log, saturated })
}

#[derive(Debug, Clone)]
pub struct RateQuadruple {
    pub h: GrowthRate,
    pub k: GrowthRate,
    pub mu: GrowthRate,
    pub nu: GrowthRate,
}

impl RateQuadruple {
    pub fn new(h: GrowthRate, k: GrowthRate, mu: GrowthRate, nu: GrowthRate) -> Self {
        RateQuadruple { h, k, mu, nu }
    }

    pub fn uniform(rate: GrowthRate) -> Self {
        RateQuadruple { h: rate.clone(), k: rate.clone(), mu: rate.clone(), nu: rate }
    }

    /// `h` and `k` act on signed time and must cover `domain`; `mu`, `nu` are
    /// only ever evaluated at `|s|`.
    pub fn check_domain(&self, domain: Domain) -> Result<()> {
        for r in [&self.h, &self.k] {
            if !r.domain().covers(domain) {
                return Err(Error::Domain { name: r.name().to_string(), t: -1.0, domain: r.domain().as_str() });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub pass: bool,
    pub worst_residual: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub rate: String,
    pub checks: Vec<InvariantCheck>,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Threshold for the limit checks at the extreme probes.
pub const LIMIT_TOL: f64 = 1e-3;

pub fn validate(rate: &GrowthRate, probes: &[f64]) -> Result<ValidationReport> {
    if probes.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut ts = probes.to_vec();
    ts.sort_by(f64::total_cmp);
    let mut checks = Vec::new();

    let outside: Vec<f64> = ts.iter().copied().filter(|&t| !rate.domain.contains(t)).collect();
    checks.push(InvariantCheck {
        name: "domain",
        pass: outside.is_empty(),
        worst_residual: outside.iter().fold(0.0, |m, t| m.max(t.abs())),
        detail: if outside.is_empty() { String::new() } else { format!("{} probes outside the {} domain", outside.len(), rate.domain) },
    });

    let mut worst = 0.0f64;
    let mut bad = None;
    for &t in &ts {
        let u = rate.eval(t);
        if !(u > 0.0 && u.is_finite()) {
            worst = worst.max(if u.is_finite() { -u } else { f64::INFINITY });
            bad.get_or_insert((t, u));
        }
    }
    checks.push(InvariantCheck {
        name: "positivity",
        pass: bad.is_none(),
        worst_residual: worst,
        detail: bad.map(|(t, u)| format!("u({t}) = {u}")).unwrap_or_default(),
    });

    let u0 = rate.eval(0.0);
    checks.push(InvariantCheck {
        name: "unit_at_zero",
        pass: (u0 - 1.0).abs() <= 1e-12,
        worst_residual: (u0 - 1.0).abs(),
        detail: String::new(),
    });

    let mut worst = 0.0f64;
    let mut bad = None;
    for w in ts.windows(2) {
        let (a, b) = (rate.eval(w[0]), rate.eval(w[1]));
        let drop = a - b - 1e-12 * a.abs();
        if drop > 0.0 {
            worst = worst.max(drop / a.abs().max(f64::MIN_POSITIVE));
            bad.get_or_insert(w[0]);
        }
    }
    checks.push(InvariantCheck {
        name: "monotone",
        pass: bad.is_none(),
        worst_residual: worst,
        detail: bad.map(|t| format!("decreasing after t = {t}")).unwrap_or_default(),
    });

    if rate.domain == Domain::FullLine {
        let (lo, hi) = (ts[0], ts[ts.len() - 1]);
        let (ulo, uhi) = (rate.eval(lo), rate.eval(hi));
        let pass = uhi > 1.0 / LIMIT_TOL && ulo < LIMIT_TOL;
        checks.push(InvariantCheck {
            name: "limits",
            pass,
            worst_residual: (ulo / LIMIT_TOL).max(1.0 / (LIMIT_TOL * uhi)),
            detail: format!("u({lo}) = {ulo:e}, u({hi}) = {uhi:e}"),
        });
    }

    let mut worst = 0.0f64;
    let mut bad = None;
    for &t in &ts {
        let d = rate.deriv(t);
        let delta = 1e-5 * t.abs().max(1.0);
        let fd = (rate.eval(t + delta) - rate.eval(t - delta)) / (2.0 * delta);
        let r = (d - fd).abs() / d.abs().max(1.0);
        if r.is_nan() || r > 1e-6 {
            bad.get_or_insert(t);
        }
        if r.is_finite() {
            worst = worst.max(r);
        }
    }
    checks.push(InvariantCheck {
        name: "derivative",
        pass: bad.is_none(),
        worst_residual: worst,
        detail: bad.map(|t| format!("mismatch at t = {t}")).unwrap_or_default(),
    });

    Ok(ValidationReport { rate: rate.name.clone(), checks })
}

/// Fritsch–Carlson monotone cubic Hermite interpolant; linear beyond the ends.
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() || x.len() < 2 {
            return Err(Error::Data("need at least two (t, value) samples".into()));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) || x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::Data("sample times must be finite and strictly increasing".into()));
        }
        let n = x.len();
        let d: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / (x[i + 1] - x[i])).collect();
        let mut m = vec![0.0; n];
        m[0] = d[0];
        m[n - 1] = d[n - 2];
        for i in 1..n - 1 {
            m[i] = if d[i - 1] * d[i] <= 0.0 { 0.0 } else { (d[i - 1] + d[i]) / 2.0 };
        }
        for i in 0..n - 1 {
            if d[i] == 0.0 {
                m[i] = 0.0;
                m[i + 1] = 0.0;
                continue;
            }
            let a = m[i] / d[i];
            let b = m[i + 1] / d[i];
            let s = a * a + b * b;
            if s > 9.0 {
                let tau = 3.0 / s.sqrt();
                m[i] = tau * a * d[i];
                m[i + 1] = tau * b * d[i];
            }
        }
        Ok(MonotoneCubic { x: x.to_vec(), y: y.to_vec(), m })
    }

    fn locate(&self, t: f64) -> usize {
        match self.x.binary_search_by(|v| v.total_cmp(&t)) {
            Ok(i) => i.min(self.x.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.x.len() - 2),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            return self.y[0] + self.m[0] * (t - self.x[0]);
        }
        if t >= self.x[n - 1] {
            return self.y[n - 1] + self.m[n - 1] * (t - self.x[n - 1]);
        }
        let i = self.locate(t);
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let (s2, s3) = (s * s, s * s * s);
        (2.0 * s3 - 3.0 * s2 + 1.0) * self.y[i]
            + (s3 - 2.0 * s2 + s) * h * self.m[i]
            + (-2.0 * s3 + 3.0 * s2) * self.y[i + 1]
            + (s3 - s2) * h * self.m[i + 1]
    }

    pub fn deriv(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            return self.m[0];
        }
        if t >= self.x[n - 1] {
            return self.m[n - 1];
        }
        let i = self.locate(t);
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let s2 = s * s;
        ((6.0 * s2 - 6.0 * s) * self.y[i]
            + (3.0 * s2 - 4.0 * s + 1.0) * h * self.m[i]
            + (-6.0 * s2 + 6.0 * s) * self.y[i + 1]
            + (3.0 * s2 - 2.0 * s) * h * self.m[i + 1])
            / h
    }
}
