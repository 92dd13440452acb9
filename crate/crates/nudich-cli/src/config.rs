//! Run configuration: TOML schema, environment overrides and semantic checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

/// Prefix of environment overrides. `NUDICH_DICHOTOMY__TOL=1e-8` sets `dichotomy.tol`.
pub const ENV_PREFIX: &str = "NUDICH_";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for every sampled quantity (random pairs in `evolve`).
    pub seed: u64,
    pub system: SystemCfg,
    pub rates: RatesCfg,
    pub integrator: IntegratorCfg,
    pub quad: QuadCfg,
    pub dichotomy: DichotomyCfg,
    pub evolve: EvolveCfg,
    pub spectrum: SpectrumCfg,
    pub lyapunov: LyapunovCfg,
    pub robust: RobustCfg,
    pub conjugacy: ConjugacyCfg,
    pub manifold: ManifoldCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 20240601,
            system: SystemCfg::default(),
            rates: RatesCfg::default(),
            integrator: IntegratorCfg::default(),
            quad: QuadCfg::default(),
            dichotomy: DichotomyCfg::default(),
            evolve: EvolveCfg::default(),
            spectrum: SpectrumCfg::default(),
            lyapunov: LyapunovCfg::default(),
            robust: RobustCfg::default(),
            conjugacy: ConjugacyCfg::default(),
            manifold: ManifoldCfg::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    Diag,
    Matrix,
    Oscillating,
    Csv,
    Block,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum DomainCfg {
    FullLine,
    HalfLine,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SystemCfg {
    pub kind: SystemKind,
    pub diag: Vec<f64>,
    pub matrix: Vec<Vec<f64>>,
    /// `(eta1, eta2, eta3)` of the oscillating example.
    pub eta: [f64; 3],
    /// Tabulated coefficients, columns `t, a11, ..., ann`.
    pub path: Option<PathBuf>,
    pub domain: DomainCfg,
    pub w1: Vec<Vec<f64>>,
    pub w2: Vec<Vec<f64>>,
}

impl Default for SystemCfg {
    fn default() -> Self {
        SystemCfg {
            kind: SystemKind::Diag,
            diag: vec![-1.0, 1.0],
            matrix: Vec::new(),
            eta: [1.0, 0.1, 1.0],
            path: None,
            domain: DomainCfg::FullLine,
            w1: vec![vec![-1.0, 0.0], vec![0.0, -2.0]],
            w2: vec![vec![3.0]],
        }
    }
}

/// A rate given either by name (`"exp"`) or as a table.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(from = "RateInput")]
pub struct RateCfg {
    pub name: String,
    pub params: BTreeMap<String, f64>,
    /// Samples `t, rho` for `rho_exp`.
    pub path: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RateInput {
    Name(String),
    Table(RateTable),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RateTable {
    name: String,
    #[serde(default)]
    params: BTreeMap<String, f64>,
    #[serde(default)]
    path: Option<PathBuf>,
}

impl From<RateInput> for RateCfg {
    fn from(r: RateInput) -> Self {
        match r {
            RateInput::Name(name) => RateCfg::named(&name),
            RateInput::Table(t) => RateCfg { name: t.name, params: t.params, path: t.path },
        }
    }
}

impl RateCfg {
    pub fn named(name: &str) -> Self {
        RateCfg { name: name.to_string(), params: BTreeMap::new(), path: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RatesCfg {
    /// Unset rates are filled per system: `exp` everywhere, except `expabs`
    /// for `mu` and `nu` of the oscillating example.
    pub h: Option<RateCfg>,
    pub k: Option<RateCfg>,
    pub mu: Option<RateCfg>,
    pub nu: Option<RateCfg>,
    /// Probe times for `rates`.
    pub probes: GridCfg,
}

impl Default for RatesCfg {
    fn default() -> Self {
        RatesCfg { h: None, k: None, mu: None, nu: None, probes: GridCfg::new(-10.0, 10.0, 0.5) }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridCfg {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl GridCfg {
    pub const fn new(lo: f64, hi: f64, step: f64) -> Self {
        GridCfg { lo, hi, step }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorCfg {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub blowup: f64,
}

impl Default for IntegratorCfg {
    fn default() -> Self {
        let d = nudich::IntegratorConfig::default();
        IntegratorCfg { rel_tol: d.rel_tol, abs_tol: d.abs_tol, max_step: d.max_step, blowup: d.blowup }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct QuadCfg {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub tail_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadCfg {
    fn default() -> Self {
        let d = nudich::quad::QuadConfig::default();
        QuadCfg { rel_tol: d.rel_tol, abs_tol: d.abs_tol, tail_tol: d.tail_tol, max_intervals: d.max_intervals }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DichotomyCfg {
    /// Unset constants come from the oscillating example when that system is
    /// selected, and from `(1, -1, 1, 0)` otherwise.
    pub k: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub eps: Option<f64>,
    /// Multiplies `K` after resolution.
    pub k_scale: f64,
    /// Rank of the leading-coordinate projection; defaults to the number of
    /// eigenvalues of `A(0)` with negative real part.
    pub rank: Option<usize>,
    /// Constant projection matrix, overriding `rank`.
    pub projection: Option<Vec<Vec<f64>>>,
    pub grid: GridCfg,
    pub tol: f64,
    /// Fix `eps` in `dichotomy estimate` instead of fitting it.
    pub eps_fixed: Option<f64>,
}

impl Default for DichotomyCfg {
    fn default() -> Self {
        DichotomyCfg {
            k: None,
            a: None,
            b: None,
            eps: None,
            k_scale: 1.0,
            rank: None,
            projection: None,
            grid: GridCfg::new(-6.0, 6.0, 0.5),
            tol: nudich::dichotomy::DEFAULT_TOL,
            eps_fixed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveCfg {
    pub pairs: usize,
    pub lo: f64,
    pub hi: f64,
    pub tol: f64,
}

impl Default for EvolveCfg {
    fn default() -> Self {
        EvolveCfg { pairs: 50, lo: -5.0, hi: 5.0, tol: 1e-7 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumCfg {
    pub horizon: f64,
    pub window: f64,
    pub samples: usize,
    pub gap: f64,
    pub spread_limit: f64,
    pub min_log_rate: f64,
    pub eps_tilde: f64,
    /// Square grid on which the derived spec is verified.
    pub verify: GridCfg,
    pub tol: f64,
}

impl Default for SpectrumCfg {
    fn default() -> Self {
        let d = nudich::spectrum::SpectrumConfig::default();
        SpectrumCfg {
            horizon: d.horizon,
            window: d.window,
            samples: d.samples,
            gap: d.gap,
            spread_limit: d.spread_limit,
            min_log_rate: d.min_log_rate,
            eps_tilde: 0.1,
            verify: GridCfg::new(0.0, 10.0, 0.5),
            tol: nudich::dichotomy::DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LyapunovCfg {
    pub dbar: f64,
    pub times: GridCfg,
    pub tol: f64,
    /// Orbit decay checks; skipped when absent.
    pub decay: Option<DecayCfg>,
}

impl Default for LyapunovCfg {
    fn default() -> Self {
        LyapunovCfg { dbar: 0.5, times: GridCfg::new(-3.0, 3.0, 0.25), tol: 1e-6, decay: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecayCfg {
    pub eta1: f64,
    pub eta2: f64,
    pub d_hat: f64,
    pub k1: f64,
    pub k2: f64,
    pub l1: f64,
    pub l2: f64,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
    #[serde(default = "default_decay_horizon")]
    pub horizon: f64,
    #[serde(default = "default_decay_samples")]
    pub samples: usize,
}

fn default_taus() -> Vec<f64> {
    vec![0.0]
}

fn default_decay_horizon() -> f64 {
    4.0
}

fn default_decay_samples() -> usize {
    40
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    OffdiagExp,
    Zero,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RobustCfg {
    pub perturbation: PerturbationKind,
    /// `B(t) = amp e^{-decay |t|}` on the off-diagonal.
    pub amp: f64,
    pub decay: f64,
    pub c: f64,
    pub omega: f64,
    pub lambda: Vec<f64>,
    /// Times at which `N` is evaluated.
    pub n_times: GridCfg,
    pub grid: GridCfg,
    pub step: f64,
    pub fp_tol: f64,
    pub max_iter: usize,
    pub tail_tol: f64,
    pub contraction_slack: f64,
    pub extent: f64,
    pub tol: f64,
}

impl Default for RobustCfg {
    fn default() -> Self {
        let d = nudich::robustness::RobustConfig::default();
        RobustCfg {
            perturbation: PerturbationKind::OffdiagExp,
            amp: 0.05,
            decay: 2.0,
            c: 0.05,
            omega: 2.0,
            lambda: Vec::new(),
            n_times: GridCfg::new(-4.0, 4.0, 0.5),
            grid: GridCfg::new(-3.0, 3.0, 0.5),
            step: d.step,
            fp_tol: d.fp_tol,
            max_iter: d.max_iter,
            tail_tol: d.tail_tol,
            contraction_slack: d.contraction_slack,
            extent: 4.0,
            tol: nudich::dichotomy::DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Zero,
    GaussTanh,
    CubicFeed,
    CubicCross,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ConjugacyCfg {
    pub term: TermKind,
    pub gamma0: f64,
    pub t_range: [f64; 2],
    /// Sample times; the first one also starts the conjugation orbits.
    pub times: Vec<f64>,
    pub box_radius: f64,
    pub points_per_axis: usize,
    pub horizon: f64,
    pub step: f64,
    pub truncation: Option<f64>,
    pub tail_tol: f64,
    pub fp_tol: f64,
    pub max_iter: usize,
    pub roundtrip_tol: f64,
    pub contraction_slack: f64,
}

impl Default for ConjugacyCfg {
    fn default() -> Self {
        ConjugacyCfg {
            term: TermKind::GaussTanh,
            gamma0: 0.2,
            t_range: [0.0, 5.0],
            times: vec![0.0],
            box_radius: 1.0,
            points_per_axis: 5,
            horizon: 5.0,
            step: 0.02,
            truncation: None,
            tail_tol: 1e-8,
            fp_tol: 1e-11,
            max_iter: 200,
            roundtrip_tol: 1e-5,
            contraction_slack: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldCfg {
    pub term: TermKind,
    pub c0: f64,
    pub lambda_max: f64,
    /// The first value is certified; the rest form the parameter sweep.
    pub lambdas: Vec<f64>,
    pub kappas: Vec<f64>,
    pub s_max: f64,
    pub ds: f64,
    pub step: f64,
    pub xi_points: usize,
    pub tail_tol: f64,
    pub fp_tol: f64,
    pub inner_tol: f64,
    pub max_iter: usize,
    pub inner_max_iter: usize,
    pub horizon: f64,
    pub fallback_radius: Option<f64>,
    pub inv_tol: f64,
    pub contraction_slack: f64,
}

impl Default for ManifoldCfg {
    fn default() -> Self {
        let d = nudich::manifold::ManifoldConfig::default();
        ManifoldCfg {
            term: TermKind::CubicFeed,
            c0: 1.5e-3,
            lambda_max: 1.0,
            lambdas: vec![1.0, 0.75, 0.5, 0.25],
            kappas: vec![0.5, 1.0, 2.0],
            s_max: 0.5,
            ds: 0.1,
            step: d.step,
            xi_points: d.xi_points,
            tail_tol: d.tail_tol,
            fp_tol: d.fp_tol,
            inner_tol: d.inner_tol,
            max_iter: d.max_iter,
            inner_max_iter: d.inner_max_iter,
            horizon: d.horizon,
            fallback_radius: d.fallback_radius,
            inv_tol: d.inv_tol,
            contraction_slack: d.contraction_slack,
        }
    }
}

/// Reads the file (if any), applies environment overrides and deserializes.
/// Relative data paths are resolved against the config file's directory.
pub fn load(path: Option<&Path>, env: &[(String, String)]) -> anyhow::Result<(RunConfig, Vec<String>)> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            text.parse::<toml::Table>().map_err(|e| anyhow!("{}: {e}", p.display()))?
        }
        None => toml::Table::new(),
    };
    let applied = apply_env(&mut value, env)?;
    let de = toml::Value::Table(value);
    let mut cfg: RunConfig =
        serde_path_to_error::deserialize(de).map_err(|e| anyhow!("schema violation at `{}`: {}", e.path(), e.inner()))?;
    let base = path.map(|p| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()));
    if let Some(dir) = base.as_deref().and_then(Path::parent) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(p) = cfg.system.path.as_mut() {
            fix(p);
        }
        for r in [&mut cfg.rates.h, &mut cfg.rates.k, &mut cfg.rates.mu, &mut cfg.rates.nu].into_iter().flatten() {
            if let Some(p) = r.path.as_mut() {
                fix(p);
            }
        }
    }
    Ok((cfg, applied))
}

/// Applies `NUDICH_SECTION__KEY=value` pairs in sorted order. Only variables
/// with a `__` separator are config overrides; the rest belong to the flags.
fn apply_env(table: &mut toml::Table, env: &[(String, String)]) -> anyhow::Result<Vec<String>> {
    let mut vars: Vec<&(String, String)> = env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.contains("__")).collect();
    vars.sort();
    let mut applied = Vec::new();
    for (k, v) in vars {
        let keys: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
        if keys.iter().any(String::is_empty) {
            return Err(anyhow!("malformed override variable {k}"));
        }
        let parsed = format!("v = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.clone()));
        let mut cur = &mut *table;
        for key in &keys[..keys.len() - 1] {
            let entry = cur.entry(key.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry.as_table_mut().ok_or_else(|| anyhow!("override {k}: `{key}` is not a table"))?;
        }
        cur.insert(keys[keys.len() - 1].clone(), parsed);
        applied.push(format!("{}={v}", keys.join(".")));
    }
    Ok(applied)
}

impl RunConfig {
    /// Semantic checks that the schema cannot express. Returns every problem
    /// with its path.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, path: &str, msg: &str| {
            if !ok {
                errs.push(format!("{path}: {msg}"));
            }
        };
        let grid = |g: &GridCfg| g.step > 0.0 && g.lo <= g.hi && g.lo.is_finite() && g.hi.is_finite();
        let s = &self.system;
        match s.kind {
            SystemKind::Diag => need(!s.diag.is_empty(), "system.diag", "must be nonempty"),
            SystemKind::Matrix => need(is_square(&s.matrix), "system.matrix", "must be a nonempty square matrix"),
            SystemKind::Csv => need(s.path.is_some(), "system.path", "required for kind = \"csv\""),
            SystemKind::Block => {
                need(is_square(&s.w1), "system.w1", "must be a nonempty square matrix");
                need(is_square(&s.w2), "system.w2", "must be a nonempty square matrix");
            }
            SystemKind::Oscillating => {}
        }
        need(grid(&self.rates.probes), "rates.probes", "needs lo <= hi and step > 0");
        let i = &self.integrator;
        need(i.rel_tol > 0.0 && i.abs_tol > 0.0, "integrator", "tolerances must be positive");
        need(i.max_step > 0.0 && i.blowup > 0.0, "integrator", "max_step and blowup must be positive");
        let q = &self.quad;
        need(q.rel_tol > 0.0 && q.abs_tol > 0.0 && q.tail_tol > 0.0, "quad", "tolerances must be positive");
        need(q.max_intervals > 0, "quad.max_intervals", "must be positive");
        let d = &self.dichotomy;
        need(d.k_scale > 0.0, "dichotomy.k_scale", "must be positive");
        need(grid(&d.grid), "dichotomy.grid", "needs lo <= hi and step > 0");
        need(d.tol >= 0.0, "dichotomy.tol", "must be nonnegative");
        if let Some(p) = &d.projection {
            need(is_square(p), "dichotomy.projection", "must be a nonempty square matrix");
        }
        let e = &self.evolve;
        need(e.pairs > 0 && e.lo < e.hi && e.tol > 0.0, "evolve", "needs pairs > 0, lo < hi and tol > 0");
        let sp = &self.spectrum;
        need(sp.horizon > 0.0 && sp.eps_tilde > 0.0, "spectrum", "horizon and eps_tilde must be positive");
        need(grid(&sp.verify), "spectrum.verify", "needs lo <= hi and step > 0");
        let l = &self.lyapunov;
        need(l.dbar > 0.0, "lyapunov.dbar", "must be positive");
        need(grid(&l.times), "lyapunov.times", "needs lo <= hi and step > 0");
        let r = &self.robust;
        need(grid(&r.n_times), "robust.n_times", "needs lo <= hi and step > 0");
        need(grid(&r.grid), "robust.grid", "needs lo <= hi and step > 0");
        need(r.step > 0.0 && r.extent >= 0.0, "robust", "step must be positive and extent nonnegative");
        let c = &self.conjugacy;
        need(c.t_range[0] < c.t_range[1], "conjugacy.t_range", "needs lo < hi");
        need(!c.times.is_empty(), "conjugacy.times", "must be nonempty");
        need(c.points_per_axis >= 1 && c.box_radius > 0.0, "conjugacy", "box needs points and a positive radius");
        need(matches!(c.term, TermKind::Zero | TermKind::GaussTanh), "conjugacy.term", "must be \"zero\" or \"gauss_tanh\"");
        let m = &self.manifold;
        need(!m.lambdas.is_empty(), "manifold.lambdas", "must be nonempty");
        need(!m.kappas.is_empty(), "manifold.kappas", "must be nonempty");
        need(m.term != TermKind::GaussTanh, "manifold.term", "must be \"zero\", \"cubic_feed\" or \"cubic_cross\"");
        need(m.s_max > 0.0 && m.ds > 0.0 && m.step > 0.0, "manifold", "s_max, ds and step must be positive");
        errs
    }
}

fn is_square(m: &[Vec<f64>]) -> bool {
    !m.is_empty() && m.iter().all(|r| r.len() == m.len())
}
