//! One function per command. Each resolves what it needs from the config,
//! writes the resolved values back so the report echoes them, and returns a
//! JSON result, a pass flag and its CSV tables.

use std::sync::Arc;

use anyhow::{anyhow, bail, Context as _};
use nalgebra::{DMatrix, DVector};
use nudich::conjugacy::{self, ConjugacyConfig, ConjugacyPair};
use nudich::dichotomy::{estimate_constants, linspace_step, square_grid, verify, Certificate, DichotomySpec, ProjectionFamily};
use nudich::growth::{self, validate, GrowthRate, RateQuadruple};
use nudich::linalg::spectral_norm;
use nudich::lyapfun::{construct_s, decay_inequalities, derivative_condition, DerivativeForm, LyapunovHypotheses};
use nudich::manifold::{self, ManifoldConfig, ManifoldProblem};
use nudich::quad::QuadConfig;
use nudich::robustness::{robust, PerturbationSpec, RobustConfig};
use nudich::spectrum::{default_candidates, dichotomy_from_spectrum, regularity, spectrum, SpectrumConfig, SpectrumRates};
use nudich::system::{make_oscillating, BlockSystem, EvolutionFn, LipschitzKind, OscillatingParams, ParameterSpace};
use nudich::{CoefficientField, Domain, EvolutionOperator, IntegratorConfig, NonlinearTerm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{DomainCfg, GridCfg, PerturbationKind, RateCfg, RunConfig, SystemKind, TermKind};
use crate::output::{num, opt, Table};

pub struct Outcome {
    pub result: Value,
    pub pass: bool,
    pub tables: Vec<Table>,
}

struct System {
    field: CoefficientField,
    analytic: Option<EvolutionFn>,
    example: Option<DichotomySpec>,
    block: Option<BlockSystem>,
}

fn grid_points(g: &GridCfg) -> Vec<f64> {
    linspace_step(g.lo, g.hi, g.step)
}

fn domain(d: DomainCfg) -> Domain {
    match d {
        DomainCfg::FullLine => Domain::FullLine,
        DomainCfg::HalfLine => Domain::HalfLine,
    }
}

fn matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

fn integrator(cfg: &RunConfig) -> IntegratorConfig {
    let i = &cfg.integrator;
    IntegratorConfig { rel_tol: i.rel_tol, abs_tol: i.abs_tol, max_step: i.max_step, blowup: i.blowup }
}

fn quad(cfg: &RunConfig) -> QuadConfig {
    let q = &cfg.quad;
    QuadConfig { rel_tol: q.rel_tol, abs_tol: q.abs_tol, tail_tol: q.tail_tol, max_intervals: q.max_intervals }
}

fn build_rate(r: &RateCfg) -> anyhow::Result<GrowthRate> {
    if r.name == "rho_exp" {
        let p = r.path.as_ref().ok_or_else(|| anyhow!("rate rho_exp needs `path`"))?;
        if !p.exists() {
            bail!("rate samples {} not found", p.display());
        }
        return Ok(GrowthRate::rho_exp_csv(p)?);
    }
    let params: Vec<(&str, f64)> = r.params.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    Ok(growth::builtin(&r.name, &params)?)
}

/// Fills unset rates and builds the quadruple.
fn resolve_rates(cfg: &mut RunConfig) -> anyhow::Result<RateQuadruple> {
    let ex = cfg.system.kind == SystemKind::Oscillating;
    let r = &mut cfg.rates;
    let side = if ex { "expabs" } else { "exp" };
    let h = r.h.get_or_insert_with(|| RateCfg::named("exp")).clone();
    let k = r.k.get_or_insert_with(|| RateCfg::named("exp")).clone();
    let mu = r.mu.get_or_insert_with(|| RateCfg::named(side)).clone();
    let nu = r.nu.get_or_insert_with(|| RateCfg::named(side)).clone();
    Ok(RateQuadruple::new(
        build_rate(&h).context("rates.h")?,
        build_rate(&k).context("rates.k")?,
        build_rate(&mu).context("rates.mu")?,
        build_rate(&nu).context("rates.nu")?,
    ))
}

fn build_system(cfg: &RunConfig, rates: &RateQuadruple) -> anyhow::Result<System> {
    let s = &cfg.system;
    let dom = domain(s.domain);
    let constant = |m: DMatrix<f64>| -> anyhow::Result<CoefficientField> {
        let n = m.nrows();
        Ok(CoefficientField::new("const", n, dom, move |_| m.clone())?)
    };
    let plain = |field| System { field, analytic: None, example: None, block: None };
    Ok(match s.kind {
        SystemKind::Diag => plain(constant(DMatrix::from_diagonal(&DVector::from_column_slice(&s.diag)))?),
        SystemKind::Matrix => plain(constant(matrix(&s.matrix))?),
        SystemKind::Csv => {
            let p = s.path.as_ref().ok_or_else(|| anyhow!("system.path is required"))?;
            if !p.exists() {
                bail!("coefficient table {} not found", p.display());
            }
            plain(CoefficientField::tabulated_csv(p, dom)?)
        }
        SystemKind::Oscillating => {
            let [eta1, eta2, eta3] = s.eta;
            let params = OscillatingParams { eta1, eta2, eta3, hats: rates.clone() };
            let ex = make_oscillating(&params, dom)?;
            System { field: ex.field, analytic: Some(ex.analytic), example: Some(ex.spec), block: None }
        }
        SystemKind::Block => {
            let block = BlockSystem::new(CoefficientField::constant(matrix(&s.w1))?, CoefficientField::constant(matrix(&s.w2))?)?;
            System { field: block.full(), analytic: None, example: None, block: Some(block) }
        }
    })
}

fn stable_count(a: &DMatrix<f64>) -> usize {
    a.complex_eigenvalues().iter().filter(|z| z.re < 0.0).count()
}

/// Resolves the projection and constants, writing them back into the config.
fn resolve_spec(cfg: &mut RunConfig, sys: &System, rates: &RateQuadruple) -> anyhow::Result<DichotomySpec> {
    let n = sys.field.dim();
    let d = &mut cfg.dichotomy;
    let (p, rates, base) = match &sys.example {
        Some(ex) => (ex.p.clone(), ex.rates.clone(), (ex.k_const, ex.a, ex.b, ex.eps)),
        None => {
            let p = match &d.projection {
                Some(m) => {
                    if m.len() != n {
                        bail!("dichotomy.projection: expected a {n}x{n} matrix");
                    }
                    ProjectionFamily::constant(matrix(m))?
                }
                None => {
                    let r = match (&sys.block, d.rank) {
                        (_, Some(r)) => r,
                        (Some(b), None) => b.split(),
                        (None, None) => stable_count(&sys.field.eval(0.0)),
                    };
                    if r > n {
                        bail!("dichotomy.rank: {r} exceeds the dimension {n}");
                    }
                    d.rank = Some(r);
                    ProjectionFamily::leading(n, r)
                }
            };
            (p, rates.clone(), (1.0, -1.0, 1.0, 0.0))
        }
    };
    let k = *d.k.get_or_insert(base.0);
    let a = *d.a.get_or_insert(base.1);
    let b = *d.b.get_or_insert(base.2);
    let eps = *d.eps.get_or_insert(base.3);
    Ok(DichotomySpec::new(p, rates, k * d.k_scale, a, b, eps)?)
}

fn operator(cfg: &RunConfig, sys: &System) -> anyhow::Result<EvolutionOperator> {
    Ok(EvolutionOperator::new(sys.field.clone(), integrator(cfg))?)
}

fn spec_json(spec: &DichotomySpec) -> Value {
    json!(spec.summary())
}

fn ratios_table(cert: &Certificate) -> Table {
    let mut t = Table::new("ratios.csv", &["t", "s", "stable_ratio", "unstable_ratio"]);
    for r in &cert.rows {
        t.push(vec![num(r.t), num(r.s), opt(r.stable_ratio), opt(r.unstable_ratio)]);
    }
    t
}

pub fn rates(cfg: &mut RunConfig) -> anyhow::Result<Outcome> {
    let q = resolve_rates(cfg)?;
    let probes = grid_points(&cfg.rates.probes);
    let named = [("h", &q.h), ("k", &q.k), ("mu", &q.mu), ("nu", &q.nu)];
    let mut reports = serde_json::Map::new();
    let mut pass = true;
    for (name, r) in named {
        let inside: Vec<f64> = probes.iter().copied().filter(|t| r.domain().contains(*t)).collect();
        let rep = validate(r, &inside)?;
        pass &= rep.pass();
        reports.insert(name.to_string(), json!({ "domain": r.domain().as_str(), "validation": rep, "pass": rep.pass() }));
    }
    let mut table = Table::new("rates.csv", &["t", "h", "k", "mu", "nu"]);
    for &t in &probes {
        let mut row = vec![num(t)];
        row.extend(named.iter().map(|(_, r)| if r.domain().contains(t) { num(r.eval(t)) } else { String::new() }));
        table.push(row);
    }
    Ok(Outcome { result: Value::Object(reports), pass, tables: vec![table] })
}

pub fn evolve(cfg: &mut RunConfig) -> anyhow::Result<Outcome> {
    let rates = resolve_rates(cfg)?;
    let sys = build_system(cfg, &rates)?;
    let op = operator(cfg, &sys)?;
    let e = cfg.evolve;
    let lo = if op.domain() == Domain::HalfLine { e.lo.max(0.0) } else { e.lo };
    if lo >= e.hi {
        bail!("evolve: empty sampling interval on the system's domain");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let triples: Vec<(f64, f64, f64)> =
        (0..e.pairs).map(|_| (rng.gen_range(lo..e.hi), rng.gen_range(lo..e.hi), rng.gen_range(lo..e.hi))).collect();
    let reference = if sys.analytic.is_some() { "closed_form" } else { "direct_integration" };
    let rows: Vec<(f64, f64, f64, f64, f64)> = triples
        .par_iter()
        .map(|&(t, s, r)| -> anyhow::Result<_> {
            let num_ts = op.evolve(t, s)?;
            let exact = match &sys.analytic {
                Some(f) => f(t, s),
                None => op.integrate_direct(t, s)?,
            };
            let rel = spectral_norm(&(&num_ts - &exact)) / spectral_norm(&exact);
            let a = op.evolve(t, r)?;
            let b = op.evolve(r, s)?;
            let cocycle = spectral_norm(&(&a * &b - &num_ts)) / (spectral_norm(&a) * spectral_norm(&b));
            Ok((t, s, r, rel, cocycle))
        })
        .collect::<anyhow::Result<_>>()?;
    let worst_rel = rows.iter().map(|r| r.3).fold(0.0, f64::max);
    let worst_cocycle = rows.iter().map(|r| r.4).fold(0.0, f64::max);
    let pass = worst_rel <= e.tol && worst_cocycle <= e.tol;
    let mut table = Table::new("evolve.csv", &["t", "s", "r", "rel_error", "cocycle_residual"]);
    for &(t, s, r, rel, c) in &rows {
        table.push(vec![num(t), num(s), num(r), num(rel), num(c)]);
    }
    Ok(Outcome {
        result: json!({
            "reference": reference,
            "pairs": rows.len(),
            "worst_rel_error": worst_rel,
            "worst_cocycle_residual": worst_cocycle,
            "tol": e.tol,
            "cached_cells": op.cached_cells(),
        }),
        pass,
        tables: vec![table],
    })
}

pub fn dichotomy_verify(cfg: &mut RunConfig) -> anyhow::Result<Outcome> {
    let rates = resolve_rates(cfg)?;
    let sys = build_system(cfg, &rates)?;
    let spec = resolve_spec(cfg, &sys, &rates)?;
    let op = operator(cfg, &sys)?;
    let g = &cfg.dichotomy.grid;
    let cert = verify(&spec, &op, &square_grid(g.lo, g.hi, g.step), cfg.dichotomy.tol)?;
    Ok(Outcome { result: json!({ "spec": spec_json(&spec), "certificate": cert }), pass: cert.pass, tables: vec![ratios_table(&cert)] })
}

pub fn dichotomy_estimate(cfg: &mut RunConfig) -> anyhow::Result<Outcome> {
    let rates = resolve_rates(cfg)?;
    let sys = build_system(cfg, &rates)?;
    let spec = resolve_spec(cfg, &sys, &rates)?;
    let op = operator(cfg, &sys)?;
    let g = cfg.dichotomy.grid;
    let grid = square_grid(g.lo, g.hi, g.step);
    let est = estimate_constants(&op, &spec.p, &spec.rates, &grid, cfg.dichotomy.eps_fixed)?;
    let cert = verify(&est.spec, &op, &grid, cfg.dichotomy.tol)?;
    Ok(Outcome {
        result: json!({
            "fitted": spec_json(&est.spec),
            "stable_fit": est.stable,
            "unstable_fit": est.unstable,
            "warnings": est.warnings,
            "reverification": cert,
        }),
        pass: cert.pass,
        tables: vec![ratios_table(&cert)],
    })
}

pub fn spectrum_cmd(cfg: &mut RunConfig) -> anyhow::Result<Outcome> {
    if cfg.system.kind != SystemKind::Block {
        bail!("system.kind: the spectrum pipeline needs kind = \"block\"");
    }
    let rates = resolve_rates(cfg)?;
    let sys = build_system(cfg, &rates)?;
    let block = sys.block.as_ref().expect("block system");
    let c = &cfg.spectrum;
    let scfg = SpectrumConfig {
        horizon: c.horizon,
        window: c.window,
        samples: c.samples,
        gap: c.gap,
        spread_limit: c.spread_limit,
        min_log_rate: c.min_log_rate,
    };
    let srates = SpectrumRates { h: rates.h.clone(), k: rates.k.clone(), hbar: rates.h.clone(), kbar: rates.k.clone() };
    let report = spectrum(block, &srates, &scfg)?;
    let cand_e = default_candidates(&block.w1, &scfg)?;
    let cand_f = default_candidates(&block.w2, &scfg)?;
    let reg = regularity(block, &srates, &report, &cand_e, &cand_f, &scfg)?;
    let (spec, derived) = dichotomy_from_spectrum(&report, &reg, &srates, c.eps_tilde)?;
    let op = operator(cfg, &sys)?;
    let cert = verify(&spec, &op, &square_grid(c.verify.lo, c.verify.hi, c.verify.step), c.tol)?;
    let mut table = Table::new("exponents.csv", &["block", "kind", "value", "multiplicity"]);
    for (block_name, kind, vals) in [
        ("e", "direct", &report.values_e),
        ("f", "direct", &report.values_f),
        ("e", "adjoint", &report.adjoint_e),
        ("f", "adjoint", &report.adjoint_f),
    ] {
        for v in vals {
            table.push(vec![block_name.into(), kind.into(), num(v.value), v.multiplicity.to_string()]);
        }
    }
    Ok(Outcome {
        result: json!({
            "values_e": report.values_e,
            "values_f": report.values_f,
            "adjoint_e": report.adjoint_e,
            "adjoint_f": report.adjoint_f,
            "reliable": report.reliable,
            "notes": report.notes,
            "regularity": { "gamma": reg.gamma, "gamma_bar": reg.gamma_bar, "best_e": reg.best_e, "best_f": reg.best_f },
            "derived": derived,
            "spec": spec_json(&spec),
            "certificate": cert,
        }),
        pass: report.reliable && cert.pass,
        tables: vec![table, ratios_table(&cert)],
    })
}

pub fn lyapunov(cfg: &mut RunConfig) -> anyhow::Result<Outcome> {
    let rates = resolve_rates(cfg)?;
    let sys = build_system(cfg, &rates)?;
    let spec = resolve_spec(cfg, &sys, &rates)?;
    let op = operator(cfg, &sys)?;
    let l = cfg.lyapunov.clone();
    let times = grid_points(&l.times);
    let lyap = construct_s(&spec, &op, l.dbar, &times, &quad(cfg))?;
    let id = derivative_condition(&lyap, op.field(), DerivativeForm::Identity, None, l.tol)?;
    let pr = derivative_condition(&lyap, op.field(), DerivativeForm::Projections, Some(&spec), l.tol)?;
    let mut pass = id.pass && pr.pass;
    let decay = match &l.decay {
        Some(d) => {
            let hyp = LyapunovHypotheses { eta1: d.eta1, eta2: d.eta2, d_hat: d.d_hat, k1: d.k1, k2: d.k2, l1: d.l1, l2: d.l2 };
            let rep = decay_inequalities(&lyap, &op, &spec, &hyp, &d.taus, d.horizon, d.samples, l.tol)?;
            pass &= rep.pass;
            Some(rep)
        }
        None => None,
    };
    let n = op.dim();
    let mut header = vec!["t".to_string()];
    for i in 0..n {
        for j in 0..n {
            header.push(format!("s{i}{j}"));
        }
    }
    header.push("identity_eig".into());
    header.push("projection_eig".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut table = Table::new("lyapunov.csv", &header);
    for (i, (&t, s)) in lyap.times.iter().zip(&lyap.s).enumerate() {
        let mut row = vec![num(t)];
        for r in 0..n {
            for c in 0..n {
                row.push(num(s[(r, c)]));
            }
        }
        let at = |pts: &[(f64, f64)]| {
            if i == 0 || i + 1 == lyap.times.len() {
                String::new()
            } else {
                num(pts[i - 1].1)
            }
        };
        row.push(at(&id.points));
        row.push(at(&pr.points));
        table.push(row);
    }
    Ok(Outcome {
        result: json!({
            "spec": spec_json(&spec),
            "lyapunov": lyap,
            "identity_form": id,
            "projection_form": pr,
            "decay": decay,
        }),
        pass,
        tables: vec![table],
    })
}

pub fn robust_cmd(cfg: &mut RunConfig) -> anyhow::Result<Outcome> {
    let rates = resolve_rates(cfg)?;
    let sys = build_system(cfg, &rates)?;
    let spec = resolve_spec(cfg, &sys, &rates)?;
    let op = operator(cfg, &sys)?;
    let r = cfg.robust.clone();
    let n = op.dim();
    let pert = match r.perturbation {
        PerturbationKind::OffdiagExp => PerturbationSpec::offdiag_exp(n, r.amp, r.decay, r.c, r.omega)?,
        PerturbationKind::Zero => PerturbationSpec::zero(n, r.omega),
    };
    let rcfg = RobustConfig {
        step: r.step,
        fp_tol: r.fp_tol,
        max_iter: r.max_iter,
        tail_tol: r.tail_tol,
        contraction_slack: r.contraction_slack,
        extent: r.extent,
    };
    let grid = square_grid(r.grid.lo, r.grid.hi, r.grid.step);
    let rep = robust(&spec, &op, &pert, &r.lambda, &grid_points(&r.n_times), &grid, &rcfg, &quad(cfg), r.tol)?;
    let table = ratios_table(&rep.robust.certificate);
    let pass = rep.pass;
    Ok(Outcome { result: json!({ "spec": spec_json(&spec), "report": rep }), pass, tables: vec![table] })
}

pub fn conjugacy_cmd(cfg: &mut RunConfig) -> anyhow::Result<Outcome> {
    let rates = resolve_rates(cfg)?;
    let sys = build_system(cfg, &rates)?;
    let spec = resolve_spec(cfg, &sys, &rates)?;
    let op = Arc::new(operator(cfg, &sys)?);
    let c = cfg.conjugacy.clone();
    let n = op.dim();
    let f = match c.term {
        TermKind::Zero => NonlinearTerm::zero(n, LipschitzKind::Conjugacy { alpha: 0.0, gamma: 0.0 }),
        TermKind::GaussTanh => NonlinearTerm::gauss_tanh(n, c.gamma0),
        _ => bail!("conjugacy.term: unsupported term"),
    };
    let t_range = (c.t_range[0], c.t_range[1]);
    let mut ccfg = ConjugacyConfig::for_term(&f, t_range)?;
    ccfg.truncation = c.truncation;
    ccfg.tail_tol = c.tail_tol;
    ccfg.fp_tol = c.fp_tol;
    ccfg.max_iter = c.max_iter;
    ccfg.step = c.step;
    ccfg.roundtrip_tol = c.roundtrip_tol;
    ccfg.contraction_slack = c.contraction_slack;
    let points = conjugacy::box_samples(n, c.box_radius, c.points_per_axis);
    let hyp = conjugacy::check_hypotheses(&f, &spec, ccfg.alpha, ccfg.gamma, &c.times, &points)?;
    let pair = ConjugacyPair::new(&spec, op, &f, &ccfg)?;
    let cert = conjugacy::certify(&pair, &c.times, c.box_radius, c.points_per_axis, c.horizon)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..n).map(|i| format!("h{i}")));
    header.push("displacement".into());
    header.push("roundtrip".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut table = Table::new("conjugacy.csv", &header);
    for s in &cert.samples {
        let mut row = vec![num(s.t)];
        row.extend(s.x.iter().map(|v| num(*v)));
        row.extend(s.h.iter().map(|v| num(*v)));
        let disp = s.x.iter().zip(&s.h).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        row.push(num(disp));
        row.push(num(s.roundtrip));
        table.push(row);
    }
    Ok(Outcome {
        result: json!({
            "spec": spec_json(&spec),
            "term": f.name(),
            "alpha": ccfg.alpha,
            "gamma": ccfg.gamma,
            "hypotheses": hyp,
            "certificate": cert,
        }),
        pass: hyp.pass && cert.pass,
        tables: vec![table],
    })
}

pub fn manifold_cmd(cfg: &mut RunConfig) -> anyhow::Result<Outcome> {
    let rates = resolve_rates(cfg)?;
    let sys = build_system(cfg, &rates)?;
    let spec = resolve_spec(cfg, &sys, &rates)?;
    let op = Arc::new(operator(cfg, &sys)?);
    let m = cfg.manifold.clone();
    let n = op.dim();
    let f = match m.term {
        TermKind::Zero => NonlinearTerm::zero(n, LipschitzKind::Manifold { c_hat: 0.0, q: 2.0 }),
        TermKind::CubicFeed => NonlinearTerm::cubic_feed(n, m.c0, m.lambda_max),
        TermKind::CubicCross => NonlinearTerm::cubic_cross(n, m.c0, m.lambda_max),
        TermKind::GaussTanh => bail!("manifold.term: unsupported term"),
    };
    let params = match m.term {
        TermKind::Zero => None,
        _ => Some(ParameterSpace::new(vec![0.0], vec![m.lambda_max])?),
    };
    let mcfg = ManifoldConfig {
        s_max: m.s_max,
        ds: m.ds,
        step: m.step,
        xi_points: m.xi_points,
        tail_tol: m.tail_tol,
        fp_tol: m.fp_tol,
        inner_tol: m.inner_tol,
        max_iter: m.max_iter,
        inner_max_iter: m.inner_max_iter,
        horizon: m.horizon,
        fallback_radius: m.fallback_radius,
        inv_tol: m.inv_tol,
        contraction_slack: m.contraction_slack,
    };
    let problem = ManifoldProblem::new(&spec, op, &f, params, &mcfg, &quad(cfg))?;
    let lambdas: Vec<Vec<f64>> = match m.term {
        TermKind::Zero => vec![Vec::new()],
        _ => m.lambdas.iter().map(|&l| vec![l]).collect(),
    };
    let (graphs, cert) = manifold::certify(&problem, &lambdas, &m.kappas)?;
    let g = &graphs[0];
    let mut full = Vec::new();
    g.write_csv(&mut full, m.s_max)?;
    let mut slice = Vec::new();
    g.write_csv(&mut slice, 0.0)?;
    Ok(Outcome {
        result: json!({
            "spec": spec_json(&spec),
            "term": f.name(),
            "radius": problem.radius,
            "slices": problem.slices(),
            "certificate": cert,
        }),
        pass: cert.pass,
        tables: vec![Table::raw("phi_slice_s0.csv", slice), Table::raw("phi_grid.csv", full)],
    })
}
