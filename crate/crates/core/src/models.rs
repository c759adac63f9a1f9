//! Direct multi-step forecasting models and the bivariate VAR(1) simulator
//! used to generate data for them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dists::{fit_skewt_to_quantiles, Marginal, Normal, QuantileGrid, SkewShape, Univariate};
use crate::{Error, Result};

/// Quantile levels of the direct quantile regressions.
pub const QR_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

const IRLS_EPS: f64 = 1e-6;
const IRLS_MAX_ITER: usize = 200;
const RIDGE_PENALTY: f64 = 1e-8;
const BIC_MAX_LAGS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShockFamily {
    #[default]
    Normal,
    SkewNormal,
    SkewT,
}

impl ShockFamily {
    /// Shock law for the `Y` equation: mean 0 and sd `sd`, with shape
    /// `alpha = -3` (and `nu = 8` for the skew-t).
    pub fn law(self, sd: f64) -> Result<Marginal> {
        Ok(match self {
            ShockFamily::Normal => Normal::new(0.0, sd)?.into(),
            ShockFamily::SkewNormal => SkewShape::calibrated(-3.0, None, 0.0, sd)?.into(),
            ShockFamily::SkewT => SkewShape::calibrated(-3.0, Some(8.0), 0.0, sd)?.into(),
        })
    }
}

fn default_sigma_eps1() -> f64 {
    0.5
}

/// `Y_t = tau1 + theta1 Y_{t-1} + theta2 X_{t-1} + eps1`,
/// `X_t = tau2 + gamma X_{t-1} + eps2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarDgpParams {
    pub tau1: f64,
    pub tau2: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub gamma: f64,
    #[serde(default = "default_sigma_eps1")]
    pub sigma_eps1: f64,
    pub sigma_eps2: f64,
    #[serde(default)]
    pub shock_family: ShockFamily,
}

impl VarDgpParams {
    pub fn with_theta1(theta1: f64) -> Self {
        VarDgpParams {
            tau1: 0.2,
            tau2: 0.0,
            theta1,
            theta2: 0.5,
            gamma: 0.5,
            sigma_eps1: 0.5,
            sigma_eps2: 0.3,
            shock_family: ShockFamily::Normal,
        }
    }

    pub fn with_family(mut self, family: ShockFamily) -> Self {
        self.shock_family = family;
        self
    }

    /// The companion matrix is upper triangular, so its eigenvalues are
    /// `theta1` and `gamma`.
    pub fn spectral_radius(&self) -> f64 {
        self.theta1.abs().max(self.gamma.abs())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("theta1", self.theta1),
            ("theta2", self.theta2),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be finite")));
            }
        }
        if self.spectral_radius() >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "VAR(1) is not stationary: spectral radius {}",
                self.spectral_radius()
            )));
        }
        if !(self.sigma_eps1 > 0.0 && self.sigma_eps2 > 0.0) {
            return Err(Error::InvalidParameter("shock sds must be > 0".into()));
        }
        Ok(())
    }

    /// Unconditional means `(E Y, E X)`.
    pub fn stationary_mean(&self) -> (f64, f64) {
        let mx = self.tau2 / (1.0 - self.gamma);
        ((self.tau1 + self.theta2 * mx) / (1.0 - self.theta1), mx)
    }

    /// One transition from `(y, x)` with the given shocks.
    #[inline]
    pub fn step(&self, y: f64, x: f64, e1: f64, e2: f64) -> (f64, f64) {
        (self.tau1 + self.theta1 * y + self.theta2 * x + e1, self.tau2 + self.gamma * x + e2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSeries {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
}

/// Draw `t` periods after discarding `burn_in`, starting from the
/// unconditional mean.
pub fn simulate_dgp<R: Rng + ?Sized>(p: &VarDgpParams, t: usize, burn_in: usize, rng: &mut R) -> Result<DgpSeries> {
    p.validate()?;
    if burn_in < 100 {
        return Err(Error::InvalidParameter(format!("burn-in must be >= 100, got {burn_in}")));
    }
    let law = p.shock_family.law(p.sigma_eps1)?;
    let total = t + burn_in;
    let e1 = law.sample(rng, total);
    let e2: Vec<f64> = (0..total)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            p.sigma_eps2 * z
        })
        .collect();
    let (mut y, mut x) = p.stationary_mean();
    let mut out = DgpSeries { y: Vec::with_capacity(t), x: Vec::with_capacity(t) };
    for i in 0..total {
        (y, x) = p.step(y, x, e1[i], e2[i]);
        if i >= burn_in {
            out.y.push(y);
            out.x.push(x);
        }
    }
    Ok(out)
}

/// `s` forward paths `(Y_{t+1}, ..., Y_{t+h})` from state `(y_t, x_t)`,
/// stored draw-major.
pub fn simulate_forward<R: Rng + ?Sized>(
    p: &VarDgpParams,
    y_t: f64,
    x_t: f64,
    h: usize,
    s: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    p.validate()?;
    let law = p.shock_family.law(p.sigma_eps1)?;
    let e1 = law.sample(rng, h * s);
    let mut out = Vec::with_capacity(h * s);
    for d in 0..s {
        let (mut y, mut x) = (y_t, x_t);
        for j in 0..h {
            let e2: f64 = StandardNormal.sample(rng);
            (y, x) = p.step(y, x, e1[d * h + j], p.sigma_eps2 * e2);
            out.push(y);
        }
    }
    Ok(out)
}

/// Rolling in-sample windows of fixed length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollingWindowSpec {
    pub length: usize,
    pub step: usize,
    /// Index of the first forecast origin (the last in-sample observation
    /// of the first window).
    pub first_origin: usize,
}

impl RollingWindowSpec {
    pub fn new(length: usize, step: usize, first_origin: usize) -> Result<Self> {
        if length < 20 {
            return Err(Error::InvalidParameter(format!("window length must be >= 20, got {length}")));
        }
        if step == 0 {
            return Err(Error::InvalidParameter("window step must be >= 1".into()));
        }
        if first_origin + 1 < length {
            return Err(Error::InvalidParameter(format!(
                "first origin {first_origin} leaves fewer than {length} in-sample observations"
            )));
        }
        Ok(RollingWindowSpec { length, step, first_origin })
    }

    /// Origins `first_origin, first_origin + step, ...` below `series_len`.
    pub fn origins(&self, series_len: usize) -> Vec<usize> {
        (self.first_origin..series_len).step_by(self.step).collect()
    }

    /// The in-sample window ending at (and including) `origin`.
    pub fn window<'a>(&self, y: &'a [f64], origin: usize) -> Result<&'a [f64]> {
        if origin >= y.len() || origin + 1 < self.length {
            return Err(Error::Data(format!("origin {origin} has no full window in a series of {}", y.len())));
        }
        Ok(&y[origin + 1 - self.length..=origin])
    }
}

/// Least-squares solution. `ridge` is set when the regressors were
/// collinear and a tiny ridge penalty was added.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsSolution {
    pub coef: DVector<f64>,
    pub rss: f64,
    pub n: usize,
    pub ridge: bool,
}

/// OLS via SVD; falls back to a `1e-8` ridge when the design is
/// numerically rank deficient.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsSolution> {
    let (n, k) = x.shape();
    if n != y.len() || n < k {
        return Err(Error::Estimation(format!("OLS needs n >= k, got n={n}, k={k}")));
    }
    let svd = x.clone().svd(false, false);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    // NaN singular values also take the ridge path.
    let ridge = smin.partial_cmp(&(1e-10 * smax)) != Some(std::cmp::Ordering::Greater);
    let mut xtx = x.transpose() * x;
    if ridge {
        for i in 0..k {
            xtx[(i, i)] += RIDGE_PENALTY;
        }
    }
    let xty = x.transpose() * y;
    let coef = xtx
        .cholesky()
        .map(|c| c.solve(&xty))
        .ok_or_else(|| Error::Numerical("normal equations are not positive definite".into()))?;
    let resid = y - x * &coef;
    Ok(OlsSolution { coef, rss: resid.norm_squared(), n, ridge })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OlsHorizon {
    pub tau: f64,
    pub beta: f64,
    pub sigma2: f64,
    pub n: usize,
}

/// Per-horizon fits of `y_{t+h} = tau_h + beta_h y_t + u`, `h = 1..H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectOlsFit {
    pub horizons: Vec<OlsHorizon>,
}

fn lag_pairs(y: &[f64], h: usize) -> (Vec<f64>, Vec<f64>) {
    let n = y.len().saturating_sub(h);
    (y[..n].to_vec(), y[h..h + n].to_vec())
}

/// Fit the direct autoregressions on one in-sample window.
pub fn fit_direct_ols(y: &[f64], max_h: usize) -> Result<DirectOlsFit> {
    if max_h == 0 {
        return Err(Error::InvalidParameter("need at least one horizon".into()));
    }
    let mut horizons = Vec::with_capacity(max_h);
    for h in 1..=max_h {
        let (x, t) = lag_pairs(y, h);
        let n = x.len();
        if n <= 3 {
            return Err(Error::Estimation(format!("horizon {h}: only {n} usable pairs")));
        }
        let mx = x.iter().sum::<f64>() / n as f64;
        let mt = t.iter().sum::<f64>() / n as f64;
        let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
        let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
        if sxx <= (1e-12 * scale).powi(2) * n as f64 {
            return Err(Error::Degenerate(format!("horizon {h}: regressor is constant")));
        }
        let sxt: f64 = x.iter().zip(&t).map(|(a, b)| (a - mx) * (b - mt)).sum();
        let beta = sxt / sxx;
        let tau = mt - beta * mx;
        let rss: f64 = x.iter().zip(&t).map(|(a, b)| (b - tau - beta * a).powi(2)).sum();
        horizons.push(OlsHorizon { tau, beta, sigma2: rss / (n - 2) as f64, n });
    }
    Ok(DirectOlsFit { horizons })
}

impl DirectOlsFit {
    pub fn max_horizon(&self) -> usize {
        self.horizons.len()
    }

    /// Plug-in Normal predictive law. A zero residual variance gives a
    /// point mass (see [`Normal::is_degenerate`]).
    pub fn predict(&self, y_origin: f64, h: usize) -> Result<Normal> {
        let f = h
            .checked_sub(1)
            .and_then(|i| self.horizons.get(i))
            .ok_or_else(|| Error::InvalidParameter(format!("horizon {h} outside 1..={}", self.horizons.len())))?;
        Normal::new(f.tau + f.beta * y_origin, f.sigma2.max(0.0).sqrt())
    }
}

/// Fits on every rolling window, in origin order.
pub fn rolling_ols(y: &[f64], max_h: usize, spec: &RollingWindowSpec) -> Result<Vec<(usize, DirectOlsFit)>> {
    spec.origins(y.len()).into_par_iter().map(|o| Ok((o, fit_direct_ols(spec.window(y, o)?, max_h)?))).collect()
}

/// Tick-loss minimiser for one quantile level.
#[derive(Debug, Clone, PartialEq)]
pub struct QrSolution {
    pub coef: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

fn tick_objective(x: &DMatrix<f64>, y: &DVector<f64>, coef: &DVector<f64>, q: f64) -> f64 {
    (y - x * coef).iter().map(|&r| if r >= 0.0 { q * r } else { (q - 1.0) * r }).sum()
}

/// Linear quantile regression by iteratively reweighted least squares on
/// the `eps`-smoothed tick loss, followed by a polish onto the basic
/// solution through the `k` smallest residuals when that lowers the loss.
pub fn quantile_regression(x: &DMatrix<f64>, y: &DVector<f64>, q: f64) -> Result<QrSolution> {
    let (n, k) = x.shape();
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("quantile level must lie in (0, 1), got {q}")));
    }
    if n != y.len() || n <= k {
        return Err(Error::Estimation(format!("quantile regression needs n > k, got n={n}, k={k}")));
    }
    let mut coef = ols(x, y)?.coef;
    let mut obj = tick_objective(x, y, &coef, q);
    let mut iterations = 0;
    let scale = y.amax().max(1.0);
    for it in 1..=IRLS_MAX_ITER {
        iterations = it;
        let resid = y - x * &coef;
        let w = DVector::from_iterator(
            n,
            resid.iter().map(|&r| (if r >= 0.0 { q } else { 1.0 - q }) / r.abs().max(IRLS_EPS)),
        );
        let mut xtwx = DMatrix::<f64>::zeros(k, k);
        let mut xtwy = DVector::<f64>::zeros(k);
        for i in 0..n {
            let row = x.row(i);
            for a in 0..k {
                xtwy[a] += w[i] * row[a] * y[i];
                for b in 0..=a {
                    xtwx[(a, b)] += w[i] * row[a] * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                xtwx[(b, a)] = xtwx[(a, b)];
            }
        }
        let Some(next): Option<DVector<f64>> = xtwx.cholesky().map(|c| c.solve(&xtwy)) else {
            break;
        };
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        let delta = (&next - &coef).amax();
        coef = next;
        let new_obj = tick_objective(x, y, &coef, q);
        let settled = (obj - new_obj).abs() <= 1e-14 * obj.max(1e-300);
        obj = new_obj;
        if delta <= 1e-12 * scale || settled {
            break;
        }
    }
    if coef.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonConvergence {
            method: "quantile regression",
            iterations,
            residual: obj,
            best: coef.iter().copied().collect(),
        });
    }
    // the tick-loss optimum sits on a vertex that interpolates k points
    let resid = y - x * &coef;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| resid[a].abs().total_cmp(&resid[b].abs()));
    let sub = DMatrix::from_fn(k, k, |i, j| x[(idx[i], j)]);
    let rhs = DVector::from_fn(k, |i, _| y[idx[i]]);
    if let Some(vertex) = sub.lu().solve(&rhs) {
        if vertex.iter().all(|v| v.is_finite()) {
            let v_obj = tick_objective(x, y, &vertex, q);
            if v_obj <= obj {
                coef = vertex;
                obj = v_obj;
            }
        }
    }
    Ok(QrSolution { coef, objective: obj, iterations })
}

/// Per horizon and level: `(tau_h(q), beta_h(q))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectQrFit {
    pub levels: Vec<f64>,
    /// `coef[h - 1][i] = [tau, beta]` for level `levels[i]`.
    pub coef: Vec<Vec<[f64; 2]>>,
}

/// Direct quantile autoregressions on one in-sample window.
pub fn fit_direct_qr(y: &[f64], max_h: usize, levels: &[f64]) -> Result<DirectQrFit> {
    if y.len() < 40 {
        return Err(Error::Estimation(format!("quantile regression window needs >= 40 points, got {}", y.len())));
    }
    if max_h == 0 || levels.is_empty() {
        return Err(Error::InvalidParameter("need at least one horizon and one level".into()));
    }
    let mut coef = Vec::with_capacity(max_h);
    for h in 1..=max_h {
        let (x, t) = lag_pairs(y, h);
        if x.len() < 10 {
            return Err(Error::Estimation(format!("horizon {h}: only {} usable pairs", x.len())));
        }
        let xm = DMatrix::from_fn(x.len(), 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let tv = DVector::from_vec(t);
        let row = levels
            .iter()
            .map(|&q| quantile_regression(&xm, &tv, q).map(|s| [s.coef[0], s.coef[1]]))
            .collect::<Result<Vec<_>>>()?;
        coef.push(row);
    }
    Ok(DirectQrFit { levels: levels.to_vec(), coef })
}

impl DirectQrFit {
    pub fn max_horizon(&self) -> usize {
        self.coef.len()
    }

    /// Raw (possibly crossing) predicted quantiles.
    pub fn raw_quantiles(&self, y_origin: f64, h: usize) -> Result<Vec<f64>> {
        let row = h
            .checked_sub(1)
            .and_then(|i| self.coef.get(i))
            .ok_or_else(|| Error::InvalidParameter(format!("horizon {h} outside 1..={}", self.coef.len())))?;
        Ok(row.iter().map(|c| c[0] + c[1] * y_origin).collect())
    }

    /// Sorted quantile grid and its skew-t smoothing.
    pub fn predict(&self, y_origin: f64, h: usize) -> Result<(QuantileGrid, SkewShape)> {
        let grid = QuantileGrid::repair_crossing(self.levels.clone(), self.raw_quantiles(y_origin, h)?)?;
        let fit = fit_skewt_to_quantiles(grid.levels(), grid.values())?;
        Ok((grid, fit.params))
    }
}

pub fn rolling_qr(
    y: &[f64],
    max_h: usize,
    levels: &[f64],
    spec: &RollingWindowSpec,
) -> Result<Vec<(usize, DirectQrFit)>> {
    spec.origins(y.len()).into_par_iter().map(|o| Ok((o, fit_direct_qr(spec.window(y, o)?, max_h, levels)?))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagChoice {
    Fixed(usize),
    /// Minimise the BIC over `1..=12` lags on a common sample.
    Bic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdlHorizon {
    pub lags: usize,
    /// `[alpha, beta_0..beta_{p-1}, gamma_0..gamma_{p-1}]`, lag `j` meaning
    /// `y_{t-j}`.
    pub coef: Vec<f64>,
    pub sigma2: f64,
    pub n: usize,
    pub bic: f64,
    pub ridge: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdlFit {
    pub horizons: Vec<ArdlHorizon>,
}

fn ardl_design(y1: &[f64], y2: &[f64], h: usize, p: usize, start: usize) -> (DMatrix<f64>, DVector<f64>) {
    let ts: Vec<usize> = (start..y1.len() - h).collect();
    let x = DMatrix::from_fn(ts.len(), 2 * p + 1, |i, c| {
        let t = ts[i];
        match c {
            0 => 1.0,
            c if c <= p => y1[t - (c - 1)],
            c => y2[t - (c - 1 - p)],
        }
    });
    let y = DVector::from_iterator(ts.len(), ts.iter().map(|&t| y1[t + h]));
    (x, y)
}

/// Direct ARDL regressions of `y1_{t+h}` on a constant and `p` lags of
/// `y1` and `y2`.
pub fn fit_direct_ardl(y1: &[f64], y2: &[f64], lags: LagChoice, max_h: usize) -> Result<ArdlFit> {
    if y1.len() != y2.len() {
        return Err(Error::Data("ARDL series differ in length".into()));
    }
    if max_h == 0 {
        return Err(Error::InvalidParameter("need at least one horizon".into()));
    }
    let candidates: Vec<usize> = match lags {
        LagChoice::Fixed(0) => return Err(Error::InvalidParameter("ARDL needs p >= 1".into())),
        LagChoice::Fixed(p) => vec![p],
        LagChoice::Bic => (1..=BIC_MAX_LAGS).collect(),
    };
    let p_max = *candidates.last().unwrap();
    let start = p_max - 1;
    let mut horizons = Vec::with_capacity(max_h);
    for h in 1..=max_h {
        let n = y1.len().saturating_sub(h + start);
        if n <= 2 * p_max + 2 {
            return Err(Error::Estimation(format!("horizon {h}: {n} observations for up to {p_max} lags")));
        }
        let mut best: Option<ArdlHorizon> = None;
        for &p in &candidates {
            let (x, y) = ardl_design(y1, y2, h, p, start);
            let sol = ols(&x, &y)?;
            let k = 2 * p + 1;
            let nf = sol.n as f64;
            let bic = nf * (sol.rss.max(1e-300) / nf).ln() + k as f64 * nf.ln();
            if sol.ridge {
                log::warn!("ARDL horizon {h}, p={p}: collinear regressors, ridge fallback");
            }
            let cand = ArdlHorizon {
                lags: p,
                coef: sol.coef.iter().copied().collect(),
                sigma2: sol.rss / (sol.n - k) as f64,
                n: sol.n,
                bic,
                ridge: sol.ridge,
            };
            if best.as_ref().is_none_or(|b: &ArdlHorizon| cand.bic < b.bic) {
                best = Some(cand);
            }
        }
        horizons.push(best.unwrap());
    }
    Ok(ArdlFit { horizons })
}

impl ArdlFit {
    /// Plug-in Normal law at origin index `t` of the full series.
    pub fn predict(&self, y1: &[f64], y2: &[f64], t: usize, h: usize) -> Result<Normal> {
        let f = h
            .checked_sub(1)
            .and_then(|i| self.horizons.get(i))
            .ok_or_else(|| Error::InvalidParameter(format!("horizon {h} outside 1..={}", self.horizons.len())))?;
        let p = f.lags;
        if t + 1 < p || t >= y1.len() || t >= y2.len() {
            return Err(Error::Data(format!("origin {t} lacks {p} lags")));
        }
        let mut m = f.coef[0];
        for j in 0..p {
            m += f.coef[1 + j] * y1[t - j] + f.coef[1 + p + j] * y2[t - j];
        }
        Normal::new(m, f.sigma2.max(0.0).sqrt())
    }
}
