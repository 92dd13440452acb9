//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails. Most criteria drive the `nudich` binary with the
//! shipped configs and check its report against independently computed values.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::DMatrix;
use nudich::dichotomy::{linspace_step, square_grid, DichotomySpec, ProjectionFamily};
use nudich::quad::QuadConfig;
use nudich::robustness::{robust, PerturbationSpec, RobustConfig};
use nudich::{CoefficientField, EvolutionOperator, GrowthRate, IntegratorConfig, RateQuadruple};
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

struct Run {
    code: i32,
    secs: f64,
    dir: tempfile::TempDir,
    stderr: String,
}

impl Run {
    fn report(&self) -> Result<Value, String> {
        let text = std::fs::read_to_string(self.dir.path().join("report.json")).map_err(|e| format!("no report: {e}"))?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }

    fn csv(&self, name: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), String> {
        let mut rdr = csv::Reader::from_path(self.dir.path().join(name)).map_err(|e| format!("{name}: {e}"))?;
        let header = rdr.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            rows.push(rec.iter().map(|s| if s.is_empty() { f64::NAN } else { s.parse().unwrap_or(f64::NAN) }).collect());
        }
        Ok((header, rows))
    }
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn nudich(cfg: &str, args: &[&str], env: &[(&str, &str)]) -> Result<Run, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nudich"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("NUDICH_")) {
        cmd.env_remove(k);
    }
    cmd.arg("--config").arg(config(cfg)).arg("--out").arg(dir.path()).args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    let start = Instant::now();
    let out = cmd.output().map_err(|e| e.to_string())?;
    Ok(Run {
        code: out.status.code().unwrap_or(-1),
        secs: start.elapsed().as_secs_f64(),
        dir,
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    })
}

fn f(v: &Value, path: &str) -> Result<f64, String> {
    let mut cur = v;
    for key in path.split('.') {
        cur = match key.parse::<usize>() {
            Ok(i) => &cur[i],
            Err(_) => &cur[key],
        };
    }
    cur.as_f64().ok_or_else(|| format!("`{path}` is not a number: {cur}"))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn oscillating_certificate() -> Outcome {
    let run = nudich("oscillating_verify.toml", &["dichotomy", "verify"], &[])?;
    ensure!(run.code == 0, "exit code {} ({})", run.code, run.stderr.trim());
    ensure!(run.secs < 10.0, "runtime {:.2} s", run.secs);
    let r = run.report()?;
    let k = f(&r, "result.spec.k")?;
    ensure!(close(k, 0.2f64.exp(), 1e-12), "K = {k}");
    ensure!(f(&r, "result.spec.a")? == -1.0 && f(&r, "result.spec.b")? == 1.0, "a, b differ");
    ensure!(close(f(&r, "result.spec.eps")?, 0.2, 1e-15), "eps differs");
    let g = &r["config"]["dichotomy"]["grid"];
    ensure!(f(g, "lo")? == -6.0 && f(g, "hi")? == 6.0 && f(g, "step")? == 0.5, "grid echo {g}");
    let pairs = f(&r, "result.certificate.pairs")?;
    ensure!(pairs == 625.0, "{pairs} pairs instead of 25^2");
    let violations = f(&r, "result.certificate.violations")?;
    ensure!(violations == 0.0, "{violations} violations");
    let commute = f(&r, "result.certificate.worst_commute_residual")?;
    ensure!(commute <= 1e-8, "commute residual {commute:e}");
    let (header, rows) = run.csv("ratios.csv")?;
    ensure!(header == ["t", "s", "stable_ratio", "unstable_ratio"], "header {header:?}");
    let worst = rows.iter().flat_map(|r| [r[2], r[3]]).filter(|v| !v.is_nan()).fold(0.0, f64::max);
    ensure!(rows.len() == 625 && worst <= 1.0 + 1e-6, "csv rows {} worst ratio {worst}", rows.len());
    Ok(format!("K = e^0.2, 0 violations, commute {commute:.1e}, {:.2} s", run.secs))
}

fn evolution_fidelity() -> Outcome {
    let run = nudich("oscillating_verify.toml", &["evolve"], &[])?;
    ensure!(run.code == 0, "exit code {} ({})", run.code, run.stderr.trim());
    let r = run.report()?;
    ensure!(r["result"]["reference"] == "closed_form", "reference {}", r["result"]["reference"]);
    let (_, rows) = run.csv("evolve.csv")?;
    ensure!(rows.len() == 50, "{} pairs", rows.len());
    ensure!(rows.iter().all(|r| r[..3].iter().all(|t| (-5.0..=5.0).contains(t))), "pair outside [-5, 5]");
    let rel = rows.iter().map(|r| r[3]).fold(0.0, f64::max);
    let cocycle = rows.iter().map(|r| r[4]).fold(0.0, f64::max);
    ensure!(rel <= 1e-7, "relative error {rel:e}");
    ensure!(cocycle <= 1e-7, "cocycle residual {cocycle:e}");
    Ok(format!("50 pairs, rel error {rel:.1e}, cocycle {cocycle:.1e}"))
}

fn constant_recovery() -> Outcome {
    let run = nudich("saddle_estimate.toml", &["dichotomy", "estimate"], &[])?;
    ensure!(run.code == 0, "exit code {} ({})", run.code, run.stderr.trim());
    let r = run.report()?;
    let (a, b, eps) = (f(&r, "result.fitted.a")?, f(&r, "result.fitted.b")?, f(&r, "result.fitted.eps")?);
    ensure!((-1.05..=-0.95).contains(&a), "a = {a}");
    ensure!((0.95..=1.05).contains(&b), "b = {b}");
    ensure!(eps <= 0.05, "eps = {eps}");
    let v = f(&r, "result.reverification.violations")?;
    ensure!(v == 0.0 && r["result"]["reverification"]["pass"] == true, "{v} violations on the training grid");
    Ok(format!("a = {a:.4}, b = {b:.4}, eps = {eps:.1e}, re-verified"))
}

fn lyapunov_construction() -> Outcome {
    let run = nudich("saddle_lyapunov.toml", &["lyapunov"], &[])?;
    ensure!(run.code == 0, "exit code {} ({})", run.code, run.stderr.trim());
    // closed form for diag(-1, 1), K = 1, eps = 0: S = diag(1, -1) / (2 dbar)
    let dbar = 0.5;
    let expect = [1.0 / (2.0 * dbar), 0.0, 0.0, -1.0 / (2.0 * dbar)];
    let (header, rows) = run.csv("lyapunov.csv")?;
    ensure!(header[1..5] == ["s00", "s01", "s10", "s11"], "header {header:?}");
    ensure!(rows.len() == 25, "{} grid points", rows.len());
    let dev = rows.iter().flat_map(|r| (0..4).map(move |i| (r[1 + i] - expect[i]).abs())).fold(0.0, f64::max);
    ensure!(dev <= 1e-6, "S deviates by {dev:e}");
    let r = run.report()?;
    let mi = f(&r, "result.identity_form.margin")?;
    let mp = f(&r, "result.projection_form.margin")?;
    ensure!(mi >= 0.9 && mp >= 0.9, "margins {mi} and {mp}");
    ensure!(r["result"]["identity_form"]["pass"] == true && r["result"]["projection_form"]["pass"] == true, "form failed");
    Ok(format!("|S - diag(1,-1)| <= {dev:.1e}, margins {mi:.4} / {mp:.4}"))
}

fn spectrum_to_dichotomy() -> Outcome {
    let run = nudich("block_spectrum.toml", &["spectrum"], &[])?;
    ensure!(run.code == 0, "exit code {} ({})", run.code, run.stderr.trim());
    let r = run.report()?;
    let vals = |key: &str| -> Vec<f64> {
        r["result"][key].as_array().map(|a| a.iter().filter_map(|v| v["value"].as_f64()).collect()).unwrap_or_default()
    };
    let (e, fv) = (vals("values_e"), vals("values_f"));
    ensure!(e.len() == 2 && close(e[0], -2.0, 0.05) && close(e[1], -1.0, 0.05), "E exponents {e:?}");
    ensure!(fv.len() == 1 && close(fv[0], 3.0, 0.05), "F exponents {fv:?}");
    ensure!(f(&r, "config.spectrum.horizon")? == 50.0 && f(&r, "config.spectrum.eps_tilde")? == 0.1, "config echo");
    let v = &r["config"]["spectrum"]["verify"];
    ensure!(f(v, "lo")? == 0.0 && f(v, "hi")? == 10.0, "verify grid {v}");
    let viol = f(&r, "result.certificate.violations")?;
    ensure!(viol == 0.0 && r["result"]["certificate"]["pass"] == true, "{viol} violations");
    Ok(format!("E = {e:.3?}, F = {fv:.3?}, derived spec verifies on [0,10]^2"))
}

fn robustness_end_to_end() -> Outcome {
    let run = nudich("saddle_robust.toml", &["robust"], &[])?;
    ensure!(run.code == 0, "exit code {} ({})", run.code, run.stderr.trim());
    let r = run.report()?;
    let rep = &r["result"]["report"];
    let n = f(rep, "n.n")?;
    ensure!(close(n, 1.0, 1e-6), "N = {n}");
    let (k, c) = (1.0, 0.05);
    let kcn = k * c * n;
    let margin = f(rep, "smallness.margin")?;
    ensure!(margin > 0.0, "smallness margin {margin}");
    let k_hat = k / (1.0 - kcn);
    ensure!(close(f(rep, "projections.k_hat")?, k_hat, 1e-9), "K^ differs from K/(1-KcN)");
    for side in ["u0", "v0"] {
        let contraction = f(rep, &format!("projections.{side}.contraction"))?;
        ensure!(contraction <= kcn + 0.05, "{side} contraction {contraction}");
        let w = f(rep, &format!("projections.{side}.weighted_norm"))?;
        ensure!(w <= k_hat * (1.0 + 1e-9), "{side} norm {w} above K^ = {k_hat}");
    }
    let semigroup = f(rep, "semigroup_residual")?;
    ensure!(semigroup <= 1e-6, "semigroup residual {semigroup:e}");
    let prefactor = k * k_hat / (1.0 - 2.0 * k * k_hat * kcn);
    ensure!(close(f(rep, "projections.evolution_prefactor")?, prefactor, 1e-12), "prefactor differs");
    let cert = &rep["robust"]["certificate"];
    ensure!(f(cert, "violations")? == 0.0 && cert["pass"] == true, "perturbed bounds fail: {cert}");

    // B = 0 control at integrator tolerance 1e-12
    let spec = DichotomySpec::new(ProjectionFamily::leading(2, 1), RateQuadruple::uniform(GrowthRate::exp()), 1.0, -1.0, 1.0, 0.0)
        .map_err(|e| e.to_string())?;
    let field = CoefficientField::const_diag(&[-1.0, 1.0]).map_err(|e| e.to_string())?;
    let op = EvolutionOperator::new(field, IntegratorConfig::with_tol(1e-12, 1e-15)).map_err(|e| e.to_string())?;
    let zero = PerturbationSpec::zero(2, 2.0);
    let cfg = RobustConfig { extent: 4.0, ..RobustConfig::default() };
    let ctl =
        robust(&spec, &op, &zero, &[], &linspace_step(-4.0, 4.0, 0.5), &square_grid(-3.0, 3.0, 0.5), &cfg, &QuadConfig::default(), 1e-6)
            .map_err(|e| e.to_string())?;
    let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
    let mut worst = 0.0f64;
    for t in linspace_step(-3.0, 3.0, 0.5) {
        let ph = ctl.projections.p_hat(t).map_err(|e| e.to_string())?;
        worst = worst.max((ph - &p).abs().max());
    }
    ensure!(worst <= 1e-9, "B = 0 control: |P^ - P| = {worst:e}");
    Ok(format!("N = {n:.9}, margin {margin:.3}, semigroup {semigroup:.1e}, B=0 control {worst:.1e}"))
}

fn conjugacy() -> Outcome {
    let zero = nudich("saddle_conjugacy.toml", &["conjugacy"], &[("NUDICH_CONJUGACY__TERM", "zero")])?;
    ensure!(zero.code == 0, "f = 0: exit code {} ({})", zero.code, zero.stderr.trim());
    let z = zero.report()?;
    for key in ["max_displacement", "max_roundtrip_lh", "max_roundtrip_hl"] {
        let v = f(&z, &format!("result.certificate.{key}"))?;
        ensure!(v == 0.0, "f = 0 gives {key} = {v:e}");
    }

    let run = nudich("saddle_conjugacy.toml", &["conjugacy"], &[])?;
    ensure!(run.code == 0, "exit code {} ({})", run.code, run.stderr.trim());
    let r = run.report()?;
    let gamma0 = f(&r, "config.conjugacy.gamma0")?;
    // gauss_tanh: |f| <= gamma0 sqrt(n) and Lip f <= gamma0; K = 1, a = -1, b = 1
    let (a, b) = (-1.0f64, 1.0f64);
    let inv = 1.0 / a.abs() + 1.0 / b;
    let bound = gamma0 * 2f64.sqrt() * inv;
    let theory = gamma0 * inv;
    ensure!(theory <= 0.5, "smallness K gamma (1/|a| + 1/b) = {theory}");
    ensure!(close(f(&r, "result.certificate.bound")?, bound, 1e-12), "bound differs from K alpha (1/|a| + 1/b)");
    let (_, rows) = run.csv("conjugacy.csv")?;
    ensure!(rows.len() == 25, "{} samples", rows.len());
    let corner = rows.iter().any(|r| r[1] == -1.0 && r[2] == -1.0) && rows.iter().any(|r| r[1] == 1.0 && r[2] == 1.0);
    ensure!(corner, "samples do not span [-1, 1]^2");
    let disp = rows.iter().map(|r| ((r[1] - r[3]).powi(2) + (r[2] - r[4]).powi(2)).sqrt()).fold(0.0, f64::max);
    ensure!(disp <= bound, "displacement {disp} above {bound}");
    let lh = f(&r, "result.certificate.max_roundtrip_lh")?;
    let hl = f(&r, "result.certificate.max_roundtrip_hl")?;
    ensure!(lh <= 1e-5 && hl <= 1e-5, "roundtrip {lh:e} / {hl:e}");
    let conj = f(&r, "result.certificate.conjugation_residual")?;
    ensure!(conj <= 1e-5 && f(&r, "config.conjugacy.horizon")? == 5.0, "conjugation residual {conj:e}");
    let measured = f(&r, "result.certificate.measured_contraction")?;
    ensure!(measured <= theory + 0.05, "contraction {measured} above {theory} + 0.05");
    Ok(format!("f=0 exact; disp {disp:.3} <= {bound:.3}, roundtrip {:.1e}, conj {conj:.1e}, contraction {measured:.3}", lh.max(hl)))
}

fn manifold() -> Outcome {
    let zero = nudich("cubic_manifold.toml", &["manifold"], &[("NUDICH_MANIFOLD__TERM", "zero")])?;
    ensure!(zero.code == 0, "f = 0: exit code {} ({})", zero.code, zero.stderr.trim());
    let z = zero.report()?;
    ensure!(
        z["result"]["certificate"]["iterations"] == serde_json::json!([1]),
        "f = 0 sweeps {}",
        z["result"]["certificate"]["iterations"]
    );
    let (header, rows) = zero.csv("phi_grid.csv")?;
    let phi: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("phi")).collect();
    ensure!(rows.iter().all(|r| phi.iter().all(|&i| r[i] == 0.0)), "f = 0 graph is not zero");

    let run = nudich("cubic_manifold.toml", &["manifold"], &[])?;
    ensure!(run.code == 0, "exit code {} ({})", run.code, run.stderr.trim());
    let r = run.report()?;
    let c = &r["result"]["certificate"];
    let (c_hat, q, k) = (f(c, "constants.c_hat")?, f(c, "constants.q")?, f(c, "constants.k")?);
    let s = 6f64.powf(q + 1.0) * c_hat * k.powf(q + 1.0);
    ensure!(s <= 0.5, "6^(q+1) c K^(q+1) = {s}");
    let lip = f(c, "graph_lipschitz")?;
    ensure!(lip <= 1.0, "graph Lipschitz constant {lip}");
    let kappas: Vec<f64> = r["config"]["manifold"]["kappas"].as_array().unwrap().iter().filter_map(Value::as_f64).collect();
    ensure!(kappas == [0.5, 1.0, 2.0], "kappas {kappas:?}");
    let inv = f(c, "invariance.worst")?;
    ensure!(inv <= 1e-4, "invariance residual {inv:e}");
    let k1 = k / (1.0 - s);
    let d = f(c, "d")?;
    ensure!(d <= 3.0 * k1, "d = {d} above 3 K1 = {}", 3.0 * k1);
    let d_star = f(c, "d_star")?;
    ensure!(d_star.is_finite(), "d* = {d_star}");
    let lin = f(c, "sweep_linear_residual")?;
    ensure!(lin <= 0.1, "sweep regression residual {lin}");
    ensure!(c["pass"] == true, "certificate failed");
    let (_, slice) = run.csv("phi_slice_s0.csv")?;
    ensure!(!slice.is_empty() && slice.iter().all(|r| r[0] == 0.0), "phi_slice_s0.csv rows");
    Ok(format!("S = {s:.3}, Lip {lip:.1e}, invariance {inv:.1e}, d {d:.4} <= {:.3}, d* {d_star:.1e}, fit {lin:.1e}", 3.0 * k1))
}

fn strip_timings(run: &Run) -> Result<String, String> {
    let mut v = run.report()?;
    v.as_object_mut().ok_or("report is not an object")?.remove("timings_ms").ok_or("no timings block")?;
    serde_json::to_string_pretty(&v).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    for (cfg, args, csv) in [
        ("oscillating_verify.toml", &["dichotomy", "verify"][..], "ratios.csv"),
        ("oscillating_verify.toml", &["evolve"][..], "evolve.csv"),
        ("saddle_conjugacy.toml", &["conjugacy"][..], "conjugacy.csv"),
    ] {
        let a = nudich(cfg, args, &[])?;
        let b = nudich(cfg, &[args, &["--threads", "2"]].concat(), &[])?;
        ensure!(a.code == b.code, "{args:?}: exit codes differ");
        ensure!(strip_timings(&a)? == strip_timings(&b)?, "{args:?}: reports differ");
        let read = |r: &Run| std::fs::read(r.dir.path().join(csv)).map_err(|e| e.to_string());
        ensure!(read(&a)? == read(&b)?, "{args:?}: {csv} differs");
    }
    Ok("verify, evolve and conjugacy reports byte-identical across runs".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oscillating system certificate", oscillating_certificate),
        ("evolution fidelity", evolution_fidelity),
        ("constant recovery", constant_recovery),
        ("Lyapunov construction", lyapunov_construction),
        ("spectrum to dichotomy", spectrum_to_dichotomy),
        ("robustness end to end", robustness_end_to_end),
        ("conjugacy", conjugacy),
        ("stable manifold", manifold),
        ("determinism", determinism),
    ];
    let results: Vec<(usize, &str, Outcome, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .enumerate()
            .map(|(i, (name, check))| {
                s.spawn(move || {
                    let t = Instant::now();
                    let out = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
                    (i + 1, *name, out, t.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("joined")).collect()
    });
    let mut failed = 0;
    for (i, name, out, secs) in &results {
        match out {
            Ok(msg) => println!("criterion {i} ({name}): PASS [{secs:.1} s] {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {i} ({name}): FAIL [{secs:.1} s] {msg}");
            }
        }
    }
    println!("acceptance: {} of {} criteria pass", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
