//! Quadratic Lyapunov functions `H(t, x) = <S(t) x, x>` built from a dichotomy,
//! together with the sign classification of vectors and the differential and
//! integrated decay checks.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dichotomy::{DichotomySpec, SpecSummary};
use crate::error::{Error, Result};
use crate::evolution::EvolutionOperator;
use crate::linalg::{max_sym_eigenvalue, range_basis, spectral_norm, sym_eigenvalues};
use crate::quad::{integrate, truncation_length, QuadConfig};
use crate::system::CoefficientField;

/// `S(t)` on a time grid, interpolated linearly in between.
#[derive(Debug, Clone, Serialize)]
pub struct QuadraticLyapunov {
    #[serde(skip)]
    pub s: Vec<DMatrix<f64>>,
    pub times: Vec<f64>,
    pub dbar: Option<f64>,
    pub source: Option<SpecSummary>,
    /// `min |eigenvalue|` of `S` at each grid time.
    pub min_abs_eig: Vec<f64>,
    /// Largest `|S| / ((K^2 / 2 dbar)(mu^{2 eps} + nu^{2 eps}))` over the grid.
    pub worst_norm_ratio: f64,
    /// Largest asymmetry before symmetrization.
    pub asymmetry: f64,
    /// Discarded tail mass bound per grid time.
    pub tail_bound: f64,
}

impl QuadraticLyapunov {
    pub fn from_samples(times: Vec<f64>, s: Vec<DMatrix<f64>>) -> Result<Self> {
        if times.is_empty() || times.len() != s.len() {
            return Err(Error::EmptyGrid);
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParam("Lyapunov grid times must increase".into()));
        }
        let asymmetry = s.iter().map(|m| (m - m.transpose()).amax()).fold(0.0, f64::max);
        let s: Vec<_> = s.into_iter().map(|m| (&m + m.transpose()) * 0.5).collect();
        let min_abs_eig = s.iter().map(|m| sym_eigenvalues(m).iter().map(|e| e.abs()).fold(f64::INFINITY, f64::min)).collect();
        Ok(QuadraticLyapunov { s, times, dbar: None, source: None, min_abs_eig, worst_norm_ratio: f64::NAN, asymmetry, tail_bound: 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.s[0].nrows()
    }

    pub fn at(&self, t: f64) -> Result<DMatrix<f64>> {
        let (lo, hi) = (self.times[0], *self.times.last().expect("nonempty"));
        let slack = 1e-9 * (1.0 + t.abs());
        if t < lo - slack || t > hi + slack {
            return Err(Error::InvalidParam(format!("t = {t} outside the Lyapunov grid [{lo}, {hi}]")));
        }
        if self.times.len() == 1 {
            return Ok(self.s[0].clone());
        }
        let i = match self.times.binary_search_by(|x| x.total_cmp(&t)) {
            Ok(i) => return Ok(self.s[i].clone()),
            Err(i) => i.clamp(1, self.times.len() - 1),
        };
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        Ok(&self.s[i - 1] * (1.0 - w) + &self.s[i] * w)
    }

    /// `H(t, x) = <S(t) x, x>`.
    pub fn form(&self, t: f64, x: &DVector<f64>) -> Result<f64> {
        Ok(x.dot(&(self.at(t)? * x)))
    }

    pub fn is_symmetric(&self) -> bool {
        self.s.iter().all(|m| (m - m.transpose()).amax() <= 1e-10)
    }
}

/// Builds `S(t)` at each grid time from the two weighted integrals of the
/// dichotomy. Each integral is truncated where the dichotomy envelope puts the
/// remainder below `quad.tail_tol` relative to the envelope's total.
pub fn construct_s(spec: &DichotomySpec, op: &EvolutionOperator, dbar: f64, times: &[f64], quad: &QuadConfig) -> Result<QuadraticLyapunov> {
    if !(dbar > 0.0 && dbar < (-spec.a).min(spec.b)) {
        return Err(Error::InvalidParam(format!("dbar = {dbar} must lie in (0, {})", (-spec.a).min(spec.b))));
    }
    if times.is_empty() {
        return Err(Error::EmptyGrid);
    }
    spec.rates.check_domain(op.domain())?;
    let n = op.dim();
    let rates = &spec.rates;
    let (a, b, eps, kc) = (spec.a, spec.b, spec.eps, spec.k_const);
    let has_p = spec.p.rank() > 0;
    let has_q = spec.p.rank() < n;
    let domain = op.domain();
    let one = |t: f64| -> Result<(DMatrix<f64>, f64, f64)> {
        let mut s = DMatrix::<f64>::zeros(n, n);
        let mut tail = 0.0;
        let base_mu = kc * kc * rates.mu.abs_power(t, 2.0 * eps) / (2.0 * dbar);
        let base_nu = kc * kc * rates.nu.abs_power(t, 2.0 * eps) / (2.0 * dbar);
        if has_p {
            let lh = rates.h.ln_eval(t);
            let env = |l: f64| base_mu * (-2.0 * dbar * (rates.h.ln_eval(t + l) - lh)).exp();
            let len = truncation_length(env, quad.tail_tol * base_mu.max(1.0), 1e4)?;
            tail += env(len);
            let integrand = |v: f64| -> Result<DMatrix<f64>> {
                let tp = spec.p.at(v) * op.evolve(v, t)?;
                let w = (-2.0 * (a + dbar) * (rates.h.ln_eval(v) - lh)).exp() * rates.h.log_deriv(v);
                Ok(tp.transpose() * tp * w)
            };
            let breaks = unit_breaks(t, t + len);
            s += integrate(integrand, t, t + len, &breaks, quad)?.value;
        }
        if has_q {
            let lk = rates.k.ln_eval(t);
            let env = |l: f64| base_nu * (-2.0 * dbar * (lk - rates.k.ln_eval(t - l))).exp();
            let mut len = truncation_length(env, quad.tail_tol * base_nu.max(1.0), 1e4)?;
            if !domain.contains(t - len) {
                // half-line system: the lower limit stops at the domain edge
                len = t.max(0.0);
            } else {
                tail += env(len);
            }
            let integrand = |v: f64| -> Result<DMatrix<f64>> {
                let tq = spec.p.complement_at(v) * op.evolve(v, t)?;
                let w = (2.0 * (b - dbar) * (lk - rates.k.ln_eval(v))).exp() * rates.k.log_deriv(v);
                Ok(tq.transpose() * tq * w)
            };
            let breaks = unit_breaks(t - len, t);
            s -= integrate(integrand, t - len, t, &breaks, quad)?.value;
        }
        let bound = base_mu + base_nu;
        let r = spectral_norm(&s) / bound;
        Ok((s, r, tail))
    };
    let rows: Vec<(DMatrix<f64>, f64, f64)> = times.par_iter().map(|&t| one(t)).collect::<Result<_>>()?;
    let mut worst = 0.0f64;
    let mut tail = 0.0f64;
    let mut mats = Vec::with_capacity(rows.len());
    for (m, r, tl) in rows {
        worst = worst.max(r);
        tail = tail.max(tl);
        mats.push(m);
    }
    let mut lyap = QuadraticLyapunov::from_samples(times.to_vec(), mats)?;
    lyap.dbar = Some(dbar);
    lyap.source = Some(spec.summary());
    lyap.worst_norm_ratio = worst;
    lyap.tail_bound = tail;
    Ok(lyap)
}

fn unit_breaks(lo: f64, hi: f64) -> Vec<f64> {
    let mut v = Vec::new();
    let mut k = lo.ceil();
    while k < hi {
        v.push(k);
        k += 1.0;
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeForm {
    /// `S' + S A + A^T S <= -Id`
    Identity,
    /// `S' + S A + A^T S <= -(P^T P h'/h + Q^T Q k'/k)`
    Projections,
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeReport {
    pub form: DerivativeForm,
    /// `(t, max eigenvalue of S' + S A + A^T S + R)`.
    pub points: Vec<(f64, f64)>,
    pub worst: f64,
    pub margin: f64,
    /// Largest Richardson estimate of the finite-difference error in `S'`.
    pub fd_error: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Checks the differential inequality at interior grid points. `S'` uses central
/// differences with the grid spacing; a second difference at twice the spacing
/// gives the Richardson error estimate where the grid allows it.
pub fn derivative_condition(
    lyap: &QuadraticLyapunov,
    field: &CoefficientField,
    form: DerivativeForm,
    spec: Option<&DichotomySpec>,
    tol: f64,
) -> Result<DerivativeReport> {
    let m = lyap.times.len();
    if m < 3 {
        return Err(Error::InvalidParam("derivative check needs at least three grid times".into()));
    }
    if form == DerivativeForm::Projections && spec.is_none() {
        return Err(Error::InvalidParam("projection form needs the dichotomy spec".into()));
    }
    let n = lyap.dim();
    let mut points = Vec::new();
    let mut fd_error = 0.0f64;
    let mut worst = f64::NEG_INFINITY;
    for i in 1..m - 1 {
        let t = lyap.times[i];
        let (tl, tr) = (lyap.times[i - 1], lyap.times[i + 1]);
        let d1 = (&lyap.s[i + 1] - &lyap.s[i - 1]) / (tr - tl);
        let mut err = 0.0;
        if i >= 2 && i + 2 < m {
            let d2 = (&lyap.s[i + 2] - &lyap.s[i - 2]) / (lyap.times[i + 2] - lyap.times[i - 2]);
            err = spectral_norm(&(&d1 - d2)) / 3.0;
        }
        let a = field.eval(t);
        let s = &lyap.s[i];
        let mut lhs = &d1 + s * &a + a.transpose() * s;
        match form {
            DerivativeForm::Identity => lhs += DMatrix::<f64>::identity(n, n),
            DerivativeForm::Projections => {
                let sp = spec.expect("checked");
                let p = sp.p.at(t);
                let q = sp.p.complement_at(t);
                lhs += p.transpose() * &p * sp.rates.h.log_deriv(t) + q.transpose() * &q * sp.rates.k.log_deriv(t);
            }
        }
        let lhs = (&lhs + lhs.transpose()) * 0.5;
        let e = max_sym_eigenvalue(&lhs);
        worst = worst.max(e);
        fd_error = fd_error.max(err);
        points.push((t, e));
    }
    let margin = -worst;
    if fd_error > margin.abs().max(tol) {
        return Err(Error::Precondition(format!("grid too coarse: derivative error estimate {fd_error:e} exceeds the margin {margin:e}")));
    }
    Ok(DerivativeReport { form, points, worst, margin, fd_error, tol, pass: worst <= tol })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Stable,
    Unstable,
    Undetermined,
}

pub const CLASSIFY_SAMPLES: usize = 40;

/// Sign of `H(t, T(t, tau) x)` on `(tau, tau + horizon]`. The start point is
/// excluded because `H(tau, x)` may vanish for mixed vectors.
pub fn classify(
    lyap: &QuadraticLyapunov,
    op: &EvolutionOperator,
    tau: f64,
    x: &DVector<f64>,
    horizon: f64,
    margin: Option<f64>,
) -> Result<Classification> {
    let nx = x.norm();
    if nx == 0.0 {
        return Err(Error::InvalidParam("cannot classify the zero vector".into()));
    }
    let margin = margin.unwrap_or(1e-8 * nx * nx);
    let (mut pos, mut neg) = (true, true);
    for j in 1..=CLASSIFY_SAMPLES {
        let t = tau + horizon * j as f64 / CLASSIFY_SAMPLES as f64;
        let y = op.evolve(t, tau)? * x;
        let hv = lyap.form(t, &y)?;
        pos &= hv > margin;
        neg &= hv < -margin;
    }
    Ok(if pos {
        Classification::Stable
    } else if neg {
        Classification::Unstable
    } else {
        Classification::Undetermined
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LyapunovHypotheses {
    pub eta1: f64,
    pub eta2: f64,
    pub d_hat: f64,
    pub k1: f64,
    pub k2: f64,
    pub l1: f64,
    pub l2: f64,
}

impl LyapunovHypotheses {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eta1 > 0.0 && self.eta2 > 0.0 && self.d_hat > 0.0 && [self.k1, self.k2, self.l1, self.l2].iter().all(|v| *v >= 0.0);
        if !ok {
            return Err(Error::InvalidParam("Lyapunov hypotheses need positive eta, d and nonnegative k, l".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayReport {
    /// Largest `(Hdot + eta1 (h'/h) |H|) / ((h'/h) |H|)` along stable orbits.
    pub stable_slack: f64,
    pub unstable_slack: f64,
    /// Largest `H(t) / [(h(t)/h(tau))^{-eta1} H(tau)]`; at most 1 when the integrated form holds.
    pub stable_gronwall: f64,
    /// Smallest `|H(t)| / [(k(t)/k(tau))^{eta2} |H(tau)|]`; at least 1 when it holds.
    pub unstable_gronwall: f64,
    /// Largest `|U(t, tau)| / (l1 mu(t)^{k1})` over `|t - tau| <= d`.
    pub local_u_ratio: f64,
    pub local_v_ratio: f64,
    /// Whether `h(t)/h(tau) >= mu(t)/mu(tau)` was required and its worst ratio.
    pub rate_order_required: bool,
    pub rate_order_worst: f64,
    /// Same ratio for `k` and `nu`, reported only.
    pub nu_side_worst: f64,
    /// Smallest `|H(tau, x)| / [(d/l^2) mu(tau)^{-2k} |x|^2]` over samples.
    pub lower_bound_ratio: f64,
    pub misclassified: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Checks the hypotheses of the sufficient conditions for a dichotomy along orbits from each `tau`
/// in `taus`, using the spec's projections for the stable and unstable spaces.
#[allow(clippy::too_many_arguments)]
pub fn decay_inequalities(
    lyap: &QuadraticLyapunov,
    op: &EvolutionOperator,
    spec: &DichotomySpec,
    hyp: &LyapunovHypotheses,
    taus: &[f64],
    horizon: f64,
    samples: usize,
    tol: f64,
) -> Result<DecayReport> {
    hyp.validate()?;
    if taus.is_empty() || samples < 2 {
        return Err(Error::EmptyGrid);
    }
    let rates = &spec.rates;
    let n = op.dim();
    let dt = horizon / samples as f64;
    let delta = 1e-4 * dt.min(1.0);
    let mut rep = DecayReport {
        stable_slack: f64::NEG_INFINITY,
        unstable_slack: f64::NEG_INFINITY,
        stable_gronwall: 0.0,
        unstable_gronwall: f64::INFINITY,
        local_u_ratio: 0.0,
        local_v_ratio: 0.0,
        rate_order_required: hyp.eta1 > 2.0 * hyp.k1,
        rate_order_worst: f64::INFINITY,
        nu_side_worst: f64::INFINITY,
        lower_bound_ratio: f64::INFINITY,
        misclassified: 0,
        tol,
        pass: false,
    };
    for &tau in taus {
        let p = spec.p.at(tau);
        let r = spec.p.rank();
        let bases = [(range_basis(&p, r), true), (range_basis(&(DMatrix::identity(n, n) - &p), n - r), false)];
        for (basis, stable) in &bases {
            if basis.ncols() == 0 {
                continue;
            }
            // local bound on the restriction over |t - tau| <= d
            let mut worst_local = 0.0f64;
            for j in 0..=20 {
                let t = tau - hyp.d_hat + 2.0 * hyp.d_hat * j as f64 / 20.0;
                if !op.domain().contains(t) {
                    continue;
                }
                let norm = spectral_norm(&(op.evolve(t, tau)? * basis));
                let bound = if *stable { hyp.l1 * rates.mu.eval(t).powf(hyp.k1) } else { hyp.l2 * rates.nu.eval(t).powf(hyp.k2) };
                worst_local = worst_local.max(norm / bound);
            }
            if *stable {
                rep.local_u_ratio = rep.local_u_ratio.max(worst_local);
            } else {
                rep.local_v_ratio = rep.local_v_ratio.max(worst_local);
            }
            for c in 0..basis.ncols() {
                let x = basis.column(c).into_owned();
                let class = classify(lyap, op, tau, &x, horizon, None)?;
                let expected = if *stable { Classification::Stable } else { Classification::Unstable };
                if class != expected {
                    rep.misclassified += 1;
                }
                let h0 = lyap.form(tau, &x)?;
                let lb = if *stable {
                    hyp.d_hat / (hyp.l1 * hyp.l1) * rates.mu.eval(tau).powf(-2.0 * hyp.k1)
                } else {
                    hyp.d_hat / (hyp.l2 * hyp.l2) * rates.nu.eval(tau).powf(-2.0 * hyp.k2)
                };
                rep.lower_bound_ratio = rep.lower_bound_ratio.min(h0.abs() / (lb * x.norm_squared()));
                let hval = |t: f64| -> Result<f64> { lyap.form(t, &(op.evolve(t, tau)? * &x)) };
                for j in 1..samples {
                    let t = tau + dt * j as f64;
                    let hv = hval(t)?;
                    let hdot = (hval(t + delta)? - hval(t - delta)?) / (2.0 * delta);
                    if *stable {
                        let w = rates.h.log_deriv(t) * hv.abs();
                        rep.stable_slack = rep.stable_slack.max((hdot + hyp.eta1 * w) / w.max(1e-300));
                        let g = (-hyp.eta1 * (rates.h.ln_eval(t) - rates.h.ln_eval(tau))).exp() * h0;
                        rep.stable_gronwall = rep.stable_gronwall.max(hv / g);
                    } else {
                        let w = rates.k.log_deriv(t) * hv.abs();
                        rep.unstable_slack = rep.unstable_slack.max((hdot + hyp.eta2 * w) / w.max(1e-300));
                        let g = (hyp.eta2 * (rates.k.ln_eval(t) - rates.k.ln_eval(tau))).exp() * h0.abs();
                        rep.unstable_gronwall = rep.unstable_gronwall.min(hv.abs() / g);
                    }
                }
            }
        }
        for j in 0..=samples {
            let t = tau + dt * j as f64;
            let hr = rates.h.ln_eval(t) - rates.h.ln_eval(tau);
            let mr = rates.mu.ln_eval(t) - rates.mu.ln_eval(tau);
            rep.rate_order_worst = rep.rate_order_worst.min((hr - mr).exp());
            let kr = rates.k.ln_eval(t) - rates.k.ln_eval(tau);
            let nr = rates.nu.ln_eval(t) - rates.nu.ln_eval(tau);
            rep.nu_side_worst = rep.nu_side_worst.min((kr - nr).exp());
        }
    }
    let order_ok = !rep.rate_order_required || rep.rate_order_worst >= 1.0 - tol;
    rep.pass = rep.stable_slack <= tol
        && rep.unstable_slack <= tol
        && rep.stable_gronwall <= 1.0 + tol
        && rep.unstable_gronwall >= 1.0 - tol
        && rep.local_u_ratio <= 1.0 + tol
        && rep.local_v_ratio <= 1.0 + tol
        && rep.misclassified == 0
        && order_ok;
    Ok(rep)
}

#[derive(Debug, Clone, Serialize)]
pub struct CombinedReport {
    pub identity_form: DerivativeReport,
    pub projection_form: DerivativeReport,
    pub decay: DecayReport,
    pub pass: bool,
}

/// Both derivative forms and the decay checks in one report.
#[allow(clippy::too_many_arguments)]
pub fn combined_check(
    lyap: &QuadraticLyapunov,
    op: &EvolutionOperator,
    spec: &DichotomySpec,
    hyp: &LyapunovHypotheses,
    taus: &[f64],
    horizon: f64,
    samples: usize,
    tol: f64,
) -> Result<CombinedReport> {
    let identity_form = derivative_condition(lyap, op.field(), DerivativeForm::Identity, None, tol)?;
    let projection_form = derivative_condition(lyap, op.field(), DerivativeForm::Projections, Some(spec), tol)?;
    let decay = decay_inequalities(lyap, op, spec, hyp, taus, horizon, samples, tol)?;
    let pass = identity_form.pass && projection_form.pass && decay.pass;
    Ok(CombinedReport { identity_form, projection_form, decay, pass })
}
