//! Adaptive Gauss–Kronrod quadrature for scalar, vector and matrix integrands,
//! plus helpers for truncating improper integrals with explicit tail bounds.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Bound on any discarded improper tail.
    pub tail_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig { rel_tol: 1e-10, abs_tol: 1e-13, tail_tol: 1e-8, max_intervals: 4000 }
    }
}

pub trait QuadValue: Clone {
    fn zeros_like(&self) -> Self;
    fn axpy(&mut self, c: f64, x: &Self);
    fn size(&self) -> f64;
}

impl QuadValue for f64 {
    fn zeros_like(&self) -> Self {
        0.0
    }
    fn axpy(&mut self, c: f64, x: &Self) {
        *self += c * x;
    }
    fn size(&self) -> f64 {
        self.abs()
    }
}

impl QuadValue for DMatrix<f64> {
    fn zeros_like(&self) -> Self {
        DMatrix::zeros(self.nrows(), self.ncols())
    }
    fn axpy(&mut self, c: f64, x: &Self) {
        *self += x * c;
    }
    fn size(&self) -> f64 {
        self.amax()
    }
}

impl QuadValue for DVector<f64> {
    fn zeros_like(&self) -> Self {
        DVector::zeros(self.len())
    }
    fn axpy(&mut self, c: f64, x: &Self) {
        *self += x * c;
    }
    fn size(&self) -> f64 {
        self.amax()
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

struct Segment<V> {
    a: f64,
    b: f64,
    value: V,
    error: f64,
}

fn gk15<V: QuadValue, F: FnMut(f64) -> Result<V>>(f: &mut F, a: f64, b: f64) -> Result<(V, f64)> {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c)?;
    let mut kron = fc.zeros_like();
    kron.axpy(WGK[7], &fc);
    let mut gauss = fc.zeros_like();
    gauss.axpy(WG[3], &fc);
    for j in 0..7 {
        let x = h * XGK[j];
        let f1 = f(c - x)?;
        let f2 = f(c + x)?;
        kron.axpy(WGK[j], &f1);
        kron.axpy(WGK[j], &f2);
        if j % 2 == 1 {
            gauss.axpy(WG[j / 2], &f1);
            gauss.axpy(WG[j / 2], &f2);
        }
    }
    let mut diff = kron.clone();
    diff.axpy(-1.0, &gauss);
    let mut value = kron.zeros_like();
    value.axpy(h, &kron);
    Ok((value, diff.size() * h.abs()))
}

#[derive(Debug, Clone)]
pub struct QuadResult<V> {
    pub value: V,
    pub error: f64,
    pub intervals: usize,
}

/// Adaptive G7/K15 on `[a, b]` with optional interior breakpoints.
pub fn integrate<V, F>(mut f: F, a: f64, b: f64, breaks: &[f64], cfg: &QuadConfig) -> Result<QuadResult<V>>
where
    V: QuadValue,
    F: FnMut(f64) -> Result<V>,
{
    if a == b {
        let v = f(a)?;
        return Ok(QuadResult { value: v.zeros_like(), error: 0.0, intervals: 0 });
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut cuts = vec![lo];
    let mut inner: Vec<f64> = breaks.iter().copied().filter(|&x| x > lo && x < hi).collect();
    inner.sort_by(f64::total_cmp);
    cuts.extend(inner);
    cuts.push(hi);
    let mut segs = Vec::new();
    for w in cuts.windows(2) {
        let (v, e) = gk15(&mut f, w[0], w[1])?;
        segs.push(Segment { a: w[0], b: w[1], value: v, error: e });
    }
    loop {
        let mut total = segs[0].value.zeros_like();
        let mut err = 0.0;
        for s in &segs {
            total.axpy(1.0, &s.value);
            err += s.error;
        }
        let target = cfg.abs_tol.max(cfg.rel_tol * total.size());
        if err <= target || segs.len() >= cfg.max_intervals {
            if err > target && err > 1e3 * target {
                return Err(Error::Tail(format!("quadrature on [{lo}, {hi}] did not converge (error {err:e})")));
            }
            let mut v = total.zeros_like();
            v.axpy(sign, &total);
            return Ok(QuadResult { value: v, error: err, intervals: segs.len() });
        }
        let (idx, _) = segs.iter().enumerate().max_by(|x, y| x.1.error.total_cmp(&y.1.error)).expect("nonempty");
        let s = segs.swap_remove(idx);
        let m = 0.5 * (s.a + s.b);
        if m <= s.a || m >= s.b {
            // interval cannot be split further
            segs.push(Segment { error: 0.0, ..s });
            continue;
        }
        let (v1, e1) = gk15(&mut f, s.a, m)?;
        let (v2, e2) = gk15(&mut f, m, s.b)?;
        segs.push(Segment { a: s.a, b: m, value: v1, error: e1 });
        segs.push(Segment { a: m, b: s.b, value: v2, error: e2 });
    }
}

/// Smallest `L` on a doubling ladder (refined by bisection) with `envelope(L) <= tol`,
/// where `envelope(L)` bounds the tail beyond `L` and is nonincreasing.
pub fn truncation_length<F: Fn(f64) -> f64>(envelope: F, tol: f64, max_len: f64) -> Result<f64> {
    let mut hi = 1.0;
    while envelope(hi) > tol {
        hi *= 2.0;
        if hi > max_len {
            return Err(Error::Tail(format!("envelope still above {tol:e} at length {max_len}")));
        }
    }
    let mut lo = hi / 2.0;
    if envelope(lo) <= tol {
        return Ok(lo);
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if envelope(mid) > tol {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TailIntegral {
    pub value: f64,
    /// Bound on the discarded remainder.
    pub remainder: f64,
    pub length: f64,
}

/// `∫_a^∞ g` for a nonnegative integrand that is eventually decreasing.
///
/// Pieces of doubling length are added until a piece is negligible and the
/// pieces shrink geometrically; the geometric remainder is reported. Pieces
/// that keep growing, or a total beyond `1e12`, are reported as divergence.
pub fn integrate_to_infinity<F: FnMut(f64) -> f64>(mut g: F, a: f64, cfg: &QuadConfig) -> Result<TailIntegral> {
    let mut total = 0.0;
    let mut prev_piece = f64::INFINITY;
    let mut start = a;
    let mut len = 1.0;
    let mut growing = 0;
    for _ in 0..60 {
        let piece = integrate(|x| Ok(g(x)), start, start + len, &[0.0], cfg)?.value;
        if !piece.is_finite() {
            return Err(Error::Divergent(format!("integrand not finite on [{start}, {}]", start + len)));
        }
        total += piece;
        if total > 1e12 {
            return Err(Error::Divergent(format!("partial integral exceeds 1e12 by t = {}", start + len)));
        }
        let ratio = if prev_piece.is_finite() && prev_piece > 0.0 { piece / prev_piece } else { f64::NAN };
        if ratio >= 0.95 {
            growing += 1;
            if growing >= 6 {
                return Err(Error::Divergent(format!("tail pieces do not shrink (ratio {ratio:.3} near t = {})", start + len)));
            }
        } else {
            growing = 0;
        }
        start += len;
        let small = piece <= cfg.tail_tol * 1e-2 * total.max(1e-300) || piece == 0.0;
        if small && ratio < 0.5 {
            let rem = if ratio > 0.0 { piece * ratio / (1.0 - ratio) } else { 0.0 };
            return Ok(TailIntegral { value: total, remainder: rem, length: start - a });
        }
        if piece == 0.0 && total == 0.0 {
            return Ok(TailIntegral { value: 0.0, remainder: 0.0, length: start - a });
        }
        prev_piece = piece;
        len *= 2.0;
    }
    Err(Error::Divergent("tail integration did not settle".into()))
}
