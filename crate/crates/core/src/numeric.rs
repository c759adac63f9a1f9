//! Small numerical kernels shared by the modules: standard-normal functions,
//! adaptive Gauss–Kronrod quadrature, a Nelder–Mead simplex, ranks and
//! empirical quantiles.

use statrs::function::erf::erfc_inv;

use crate::{Error, Result};

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal quantile for `p` in (0, 1).
pub fn norm_ppf(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

// Kronrod 15-point nodes on [0, 1] half-interval (symmetric), with the
// embedded 7-point Gauss weights.
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
const WG: [f64; 4] =
    [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

/// One G7/K15 panel: (Kronrod estimate, error estimate). The error uses the
/// QUADPACK scaling of |K - G| together with its roundoff floor.
pub fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut fv = [0.0; 15];
    fv[7] = f(c);
    for i in 0..7 {
        let dx = h * XGK[i];
        fv[i] = f(c - dx);
        fv[14 - i] = f(c + dx);
    }
    let w = |i: usize| if i <= 7 { WGK[i] } else { WGK[14 - i] };
    let mut k = 0.0;
    let mut abs = 0.0;
    for (i, &v) in fv.iter().enumerate() {
        k += w(i) * v;
        abs += w(i) * v.abs();
    }
    let mut g = WG[3] * fv[7];
    for (j, wg) in WG.iter().take(3).enumerate() {
        let i = 2 * j + 1;
        g += wg * (fv[i] + fv[14 - i]);
    }
    let mean = 0.5 * k;
    let asc: f64 = fv.iter().enumerate().map(|(i, &v)| w(i) * (v - mean).abs()).sum();
    let h = h.abs();
    let (resasc, resabs) = (asc * h, abs * h);
    let mut err = ((k - g) * h).abs();
    if resasc != 0.0 && err != 0.0 {
        err = resasc * (200.0 * err / resasc).powf(1.5).min(1.0);
    }
    if resabs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * resabs);
    }
    (k * h * (b - a).signum(), err)
}

/// Globally adaptive G7/K15 quadrature of `f` over a finite `[a, b]`.
///
/// The panel with the largest error estimate is bisected until the summed
/// estimate drops below `abs_tol` (or below roundoff of the total), with a
/// hard cap on the number of panels.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, abs_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    const MAX_PANELS: usize = 400;
    const START_PANELS: usize = 4;
    let width = (b - a) / START_PANELS as f64;
    let mut panels = Vec::with_capacity(2 * MAX_PANELS);
    let (mut total, mut err) = (0.0, 0.0);
    for i in 0..START_PANELS {
        let lo = a + i as f64 * width;
        let hi = if i + 1 == START_PANELS { b } else { lo + width };
        let (v, e) = gk15(f, lo, hi);
        total += v;
        err += e;
        panels.push((lo, hi, v, e));
    }
    while err > abs_tol.max(50.0 * f64::EPSILON * total.abs()) && panels.len() < MAX_PANELS {
        let (i, _) = panels.iter().enumerate().max_by(|x, y| x.1 .3.total_cmp(&y.1 .3)).expect("non-empty");
        let (lo, hi, pv, pe) = panels.swap_remove(i);
        let m = 0.5 * (lo + hi);
        if m <= lo || m >= hi {
            panels.push((lo, hi, pv, 0.0));
            err -= pe;
            continue;
        }
        let (v1, e1) = gk15(f, lo, m);
        let (v2, e2) = gk15(f, m, hi);
        total += v1 + v2 - pv;
        err += e1 + e2 - pe;
        panels.push((lo, m, v1, e1));
        panels.push((m, hi, v2, e2));
    }
    // re-sum to shed accumulated cancellation in the running total
    panels.iter().map(|p| p.2).sum()
}

/// ∫_{-∞}^{x} f via the substitution t = x − (1 − s)/s.
pub fn integrate_lower_tail<F: Fn(f64) -> f64>(f: &F, x: f64, abs_tol: f64) -> f64 {
    let g = |s: f64| {
        if s <= 0.0 {
            0.0
        } else {
            let t = x - (1.0 - s) / s;
            f(t) / (s * s)
        }
    };
    integrate(&g, 0.0, 1.0, abs_tol)
}

/// ∫_{x}^{∞} f via the substitution t = x + (1 − s)/s.
pub fn integrate_upper_tail<F: Fn(f64) -> f64>(f: &F, x: f64, abs_tol: f64) -> f64 {
    let g = |s: f64| {
        if s <= 0.0 {
            0.0
        } else {
            let t = x + (1.0 - s) / s;
            f(t) / (s * s)
        }
    };
    integrate(&g, 0.0, 1.0, abs_tol)
}

/// Result of a Nelder–Mead run.
#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Nelder–Mead simplex minimisation with standard coefficients.
///
/// Stops when the spread of function values across the simplex falls below
/// `f_tol` (absolute) or its diameter below `x_tol`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    step: &[f64],
    f_tol: f64,
    x_tol: f64,
    max_iter: usize,
) -> SimplexResult {
    let n = start.len();
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    pts.push(start.to_vec());
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += step[i];
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| f(p)).collect();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let spread = vals[n] - vals[0];
        let diam = pts[1..]
            .iter()
            .map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= f_tol || diam <= x_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n).map(|j| pts[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&pts[n]).map(|(c, w)| c + t * (w - c)).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
            continue;
        }
        if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[n] {
            let xc = along(-0.5);
            let fc = f(&xc);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = f(&xc);
            (xc, fc)
        };
        if fc < vals[n].min(fr) {
            pts[n] = xc;
            vals[n] = fc;
            continue;
        }
        // shrink toward the best vertex
        for i in 1..=n {
            let p: Vec<f64> = pts[i].iter().zip(&pts[0]).map(|(a, b)| b + 0.5 * (a - b)).collect();
            vals[i] = f(&p);
            pts[i] = p;
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    SimplexResult { x: pts[best].clone(), value: vals[best], iterations, converged }
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with denominator `n − 1`.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Linear-interpolation empirical quantile of *sorted* data (R type 7).
pub fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median of unsorted data.
pub fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    sorted_quantile(&v, 0.5)
}

pub(crate) fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Domain(format!("{name} must be finite, got {v}")))
    }
}
