//! Univariate predictive distributions.
//!
//! Three families cover every marginal used downstream:
//!
//! * [`Normal`], including the degenerate `sigma = 0` point mass produced by
//!   a noiseless regression fit;
//! * [`SkewShape`], the location-scale-shape skew-t (or skew-normal when the
//!   degrees of freedom are absent);
//! * [`QuantileGrid`], a density given by predicted quantiles with linear
//!   interpolation between knots and slope extrapolation beyond them.
//!
//! [`Marginal`] wraps the three behind one enum so that horizon-specific
//! densities of different kinds can sit side by side in a forecast archive.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

use crate::numeric::{
    self, integrate, integrate_lower_tail, integrate_upper_tail, nelder_mead, norm_cdf, norm_pdf, norm_ppf,
};
use crate::{Error, Result};

const CDF_TOL: f64 = 1e-12;

/// Common interface of the univariate families.
pub trait Univariate {
    fn pdf(&self, y: f64) -> f64;
    fn cdf(&self, y: f64) -> Result<f64>;
    fn quantile(&self, p: f64) -> Result<f64>;
    fn mean(&self) -> f64;
    fn variance(&self) -> f64;
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64>;

    fn sd(&self) -> f64 {
        self.variance().sqrt()
    }
}

fn check_prob_open(p: f64) -> Result<f64> {
    if p > 0.0 && p < 1.0 {
        Ok(p)
    } else {
        Err(Error::Domain(format!("probability must lie in (0, 1), got {p}")))
    }
}

/// A realised probability integral transform, `G(y)` for predictive CDF `G`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct PitValue(f64);

impl PitValue {
    pub fn new(u: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&u) {
            Ok(PitValue(u))
        } else {
            Err(Error::Domain(format!("PIT must lie in [0, 1], got {u}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for PitValue {
    type Error = Error;
    fn try_from(u: f64) -> Result<Self> {
        PitValue::new(u)
    }
}

impl From<PitValue> for f64 {
    fn from(p: PitValue) -> f64 {
        p.0
    }
}

// ---------------------------------------------------------------------------
// Normal

/// Normal law `N(mu, sigma^2)`. `sigma == 0` is allowed and represents a
/// point mass; its CDF is a right-continuous step at `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NormalRaw")]
pub struct Normal {
    mu: f64,
    sigma: f64,
}

#[derive(Deserialize)]
struct NormalRaw {
    mu: f64,
    sigma: f64,
}

impl TryFrom<NormalRaw> for Normal {
    type Error = Error;
    fn try_from(r: NormalRaw) -> Result<Self> {
        Normal::new(r.mu, r.sigma)
    }
}

impl Normal {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        numeric::check_finite("mu", mu)?;
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!("sigma must be finite and non-negative, got {sigma}")));
        }
        Ok(Normal { mu, sigma })
    }

    pub fn standard() -> Self {
        Normal { mu: 0.0, sigma: 1.0 }
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Point-mass forecast (zero residual variance).
    pub fn is_degenerate(&self) -> bool {
        self.sigma == 0.0
    }
}

impl Univariate for Normal {
    fn pdf(&self, y: f64) -> f64 {
        if self.is_degenerate() {
            return if y == self.mu { f64::INFINITY } else { 0.0 };
        }
        norm_pdf((y - self.mu) / self.sigma) / self.sigma
    }

    fn cdf(&self, y: f64) -> Result<f64> {
        numeric::check_finite("y", y)?;
        if self.is_degenerate() {
            return Ok(if y >= self.mu { 1.0 } else { 0.0 });
        }
        Ok(norm_cdf((y - self.mu) / self.sigma))
    }

    fn quantile(&self, p: f64) -> Result<f64> {
        check_prob_open(p)?;
        Ok(self.mu + self.sigma * norm_ppf(p))
    }

    fn mean(&self) -> f64 {
        self.mu
    }

    fn variance(&self) -> f64 {
        self.sigma * self.sigma
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                self.mu + self.sigma * z
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Skew-normal / skew-t

/// Location-scale-shape skew-t with location `xi`, scale `omega`, shape
/// `alpha` and degrees of freedom `nu`. `nu == None` is the skew-normal.
///
/// The standardised density is `2 t_nu(z) T_{nu+1}(alpha z sqrt((nu+1)/(nu+z^2)))`
/// (skew-normal: `2 phi(z) Phi(alpha z)`), with `z = (y - xi) / omega`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkewRaw")]
pub struct SkewShape {
    xi: f64,
    omega: f64,
    alpha: f64,
    nu: Option<f64>,
    #[serde(skip)]
    log_t_const: f64,
}

#[derive(Deserialize)]
struct SkewRaw {
    xi: f64,
    omega: f64,
    alpha: f64,
    #[serde(default)]
    nu: Option<f64>,
}

impl TryFrom<SkewRaw> for SkewShape {
    type Error = Error;
    fn try_from(r: SkewRaw) -> Result<Self> {
        SkewShape::new(r.xi, r.omega, r.alpha, r.nu)
    }
}

impl SkewShape {
    pub fn new(xi: f64, omega: f64, alpha: f64, nu: Option<f64>) -> Result<Self> {
        numeric::check_finite("xi", xi)?;
        numeric::check_finite("alpha", alpha)?;
        if !(omega.is_finite() && omega > 0.0) {
            return Err(Error::InvalidParameter(format!("omega must be > 0, got {omega}")));
        }
        let log_t_const = match nu {
            Some(v) if !(v.is_finite() && v > 2.0) => {
                return Err(Error::InvalidParameter(format!("degrees of freedom must exceed 2, got {v}")))
            }
            Some(v) => ln_gamma(0.5 * (v + 1.0)) - ln_gamma(0.5 * v) - 0.5 * (v * std::f64::consts::PI).ln(),
            None => 0.0,
        };
        Ok(SkewShape { xi, omega, alpha, nu, log_t_const })
    }

    pub fn skew_normal(xi: f64, omega: f64, alpha: f64) -> Result<Self> {
        Self::new(xi, omega, alpha, None)
    }

    /// Solve for `(xi, omega)` so that the law has the requested mean and
    /// standard deviation, given the shape `alpha` and tail `nu`.
    pub fn calibrated(alpha: f64, nu: Option<f64>, mean: f64, sd: f64) -> Result<Self> {
        let unit = Self::new(0.0, 1.0, alpha, nu)?;
        let omega = sd / unit.variance().sqrt();
        let xi = mean - omega * unit.mean();
        Self::new(xi, omega, alpha, nu)
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }
    pub fn omega(&self) -> f64 {
        self.omega
    }
    pub fn alpha(&self) -> f64 {
        self.alpha
    }
    pub fn nu(&self) -> Option<f64> {
        self.nu
    }

    fn delta(&self) -> f64 {
        self.alpha / (1.0 + self.alpha * self.alpha).sqrt()
    }

    /// E|T|-type constant: mean of the standardised law is `delta * b`.
    fn b_nu(&self) -> f64 {
        match self.nu {
            None => (2.0 / std::f64::consts::PI).sqrt(),
            Some(v) => (v / std::f64::consts::PI).sqrt() * (ln_gamma(0.5 * (v - 1.0)) - ln_gamma(0.5 * v)).exp(),
        }
    }

    fn std_pdf(&self, z: f64) -> f64 {
        match self.nu {
            None => 2.0 * norm_pdf(z) * norm_cdf(self.alpha * z),
            Some(v) => {
                let t = (self.log_t_const - 0.5 * (v + 1.0) * (z * z / v).ln_1p()).exp();
                let arg = self.alpha * z * ((v + 1.0) / (v + z * z)).sqrt();
                2.0 * t * student_t_cdf(arg, v + 1.0)
            }
        }
    }

    fn std_cdf(&self, z: f64) -> f64 {
        let f = |t: f64| self.std_pdf(t);
        let p =
            if z <= 0.0 { integrate_lower_tail(&f, z, CDF_TOL) } else { 1.0 - integrate_upper_tail(&f, z, CDF_TOL) };
        p.clamp(0.0, 1.0)
    }

    /// Standardised quantile by bracketed, safeguarded Newton iterations.
    /// CDF values after the first evaluation are carried forward by
    /// integrating the density between successive iterates.
    fn std_quantile(&self, p: f64) -> Result<f64> {
        let f = |t: f64| self.std_pdf(t);
        let (m, s) = (self.delta() * self.b_nu(), self.unit_variance().sqrt());
        let mut x = m + s * norm_ppf(p);
        let mut fx = self.std_cdf(x);

        // bracket
        let (mut lo, mut flo, mut hi, mut fhi);
        let mut step = s.max(0.5);
        if fx < p {
            lo = x;
            flo = fx;
            loop {
                let nx = lo + step;
                let nf = (flo + integrate(&f, lo, nx, CDF_TOL)).min(1.0);
                if nf >= p {
                    hi = nx;
                    fhi = nf;
                    break;
                }
                lo = nx;
                flo = nf;
                step *= 2.0;
                if step > 1e12 {
                    return Err(Error::Numerical(format!("cannot bracket quantile at p={p}")));
                }
            }
        } else {
            hi = x;
            fhi = fx;
            loop {
                let nx = hi - step;
                let nf = (fhi - integrate(&f, nx, hi, CDF_TOL)).max(0.0);
                if nf <= p {
                    lo = nx;
                    flo = nf;
                    break;
                }
                hi = nx;
                fhi = nf;
                step *= 2.0;
                if step > 1e12 {
                    return Err(Error::Numerical(format!("cannot bracket quantile at p={p}")));
                }
            }
        }
        if (p - flo).abs() <= (fhi - p).abs() {
            x = lo;
            fx = flo;
        } else {
            x = hi;
            fx = fhi;
        }

        for _ in 0..100 {
            let err = fx - p;
            if err.abs() < 1e-13 || (hi - lo) < 1e-13 * (1.0 + x.abs()) {
                return Ok(x);
            }
            let d = f(x);
            let mut nx = if d > 0.0 { x - err / d } else { f64::NAN };
            if !(nx > lo && nx < hi) {
                nx = 0.5 * (lo + hi);
            }
            let nf = (fx + integrate(&f, x, nx, CDF_TOL)).clamp(0.0, 1.0);
            if nf < p {
                lo = nx;
            } else {
                hi = nx;
            }
            x = nx;
            fx = nf;
        }
        Ok(x)
    }

    fn unit_variance(&self) -> f64 {
        let d = self.delta();
        let b = self.b_nu();
        match self.nu {
            None => 1.0 - d * d * b * b,
            Some(v) => v / (v - 2.0) - d * d * b * b,
        }
    }
}

/// Student-t CDF with `df` degrees of freedom.
pub(crate) fn student_t_cdf(x: f64, df: f64) -> f64 {
    if x == 0.0 {
        return 0.5;
    }
    let x2 = x * x;
    if x2 < df {
        // central form keeps precision when x^2 / df is small
        let half = 0.5 * beta_reg(0.5, 0.5 * df, x2 / (df + x2));
        return if x > 0.0 { 0.5 + half } else { 0.5 - half };
    }
    let tail = 0.5 * beta_reg(0.5 * df, 0.5, df / (df + x2));
    if x > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

impl Univariate for SkewShape {
    fn pdf(&self, y: f64) -> f64 {
        self.std_pdf((y - self.xi) / self.omega) / self.omega
    }

    fn cdf(&self, y: f64) -> Result<f64> {
        numeric::check_finite("y", y)?;
        Ok(self.std_cdf((y - self.xi) / self.omega))
    }

    fn quantile(&self, p: f64) -> Result<f64> {
        check_prob_open(p)?;
        Ok(self.xi + self.omega * self.std_quantile(p)?)
    }

    fn mean(&self) -> f64 {
        self.xi + self.omega * self.delta() * self.b_nu()
    }

    fn variance(&self) -> f64 {
        self.omega * self.omega * self.unit_variance()
    }

    /// Stochastic representation: `delta |U0| + sqrt(1 - delta^2) U1`,
    /// divided by `sqrt(W / nu)` with `W ~ chi^2_nu` for the skew-t.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        let d = self.delta();
        let c = (1.0 - d * d).sqrt();
        let chi = self.nu.map(|v| ChiSquared::new(v).expect("nu > 2 validated"));
        (0..n)
            .map(|_| {
                let u0: f64 = StandardNormal.sample(rng);
                let u1: f64 = StandardNormal.sample(rng);
                let mut z = d * u0.abs() + c * u1;
                if let (Some(chi), Some(v)) = (&chi, self.nu) {
                    let w: f64 = chi.sample(rng);
                    z /= (w / v).sqrt();
                }
                self.xi + self.omega * z
            })
            .collect()
    }
}

/// Outcome of [`fit_skewt_to_quantiles`].
#[derive(Debug, Clone, Copy)]
pub struct SkewFit {
    pub params: SkewShape,
    /// Sum of squared differences between fitted and target quantiles.
    pub residual: f64,
    pub iterations: usize,
}

const ALPHA_BOUND: f64 = 30.0;
const LOG_NU_EXCESS_MIN: f64 = -std::f64::consts::LN_10; // nu >= 2.1
const LOG_NU_EXCESS_MAX: f64 = 6.907_755_278_982_137; // nu <= 1002

/// Least-squares fit of a skew-t quantile function to `(level, value)` pairs.
///
/// For a fixed shape `(alpha, nu)` the model quantiles are affine in
/// `(xi, omega)`, so those two are profiled out in closed form and the
/// simplex only searches over `(alpha, log(nu - 2))`, starting from
/// `alpha = 0, nu = 30`.
pub fn fit_skewt_to_quantiles(levels: &[f64], values: &[f64]) -> Result<SkewFit> {
    if levels.len() != values.len() {
        return Err(Error::InvalidParameter("levels and values differ in length".into()));
    }
    if levels.len() < 4 {
        return Err(Error::InvalidParameter(format!(
            "need at least 4 quantiles to fit 4 parameters, got {}",
            levels.len()
        )));
    }
    for &p in levels {
        check_prob_open(p)?;
    }
    for &v in values {
        numeric::check_finite("quantile value", v)?;
    }
    let vbar = numeric::mean(values);
    let tss: f64 = values.iter().map(|v| (v - vbar) * (v - vbar)).sum();
    let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    if tss.sqrt() <= 1e-12 * scale {
        return Err(Error::Degenerate("all quantiles are equal; scale collapses to 0".into()));
    }

    let profile = |alpha: f64, eta: f64| -> Option<(f64, f64, f64, f64, f64)> {
        let alpha = alpha.clamp(-ALPHA_BOUND, ALPHA_BOUND);
        let nu = 2.0 + eta.clamp(LOG_NU_EXCESS_MIN, LOG_NU_EXCESS_MAX).exp();
        let unit = SkewShape::new(0.0, 1.0, alpha, Some(nu)).ok()?;
        let z: Vec<f64> = levels.iter().map(|&p| unit.std_quantile(p)).collect::<Result<_>>().ok()?;
        let zbar = numeric::mean(&z);
        let szz: f64 = z.iter().map(|a| (a - zbar) * (a - zbar)).sum();
        let szv: f64 = z.iter().zip(values).map(|(a, v)| (a - zbar) * (v - vbar)).sum();
        let omega = (szv / szz).max(0.0);
        let xi = vbar - omega * zbar;
        let ssr: f64 = z.iter().zip(values).map(|(a, v)| (v - xi - omega * a).powi(2)).sum();
        Some((xi, omega, alpha, nu, ssr))
    };

    let res = nelder_mead(
        |p| profile(p[0], p[1]).map_or(f64::INFINITY, |r| r.4),
        &[0.0, (30.0_f64 - 2.0).ln()],
        &[1.0, 1.0],
        1e-20 * tss,
        1e-9,
        1000,
    );
    let (xi, omega, alpha, nu, ssr) =
        profile(res.x[0], res.x[1]).ok_or_else(|| Error::Numerical("skew-t profile evaluation failed".into()))?;
    if !res.converged || omega <= 0.0 {
        return Err(Error::NonConvergence {
            method: "skew-t quantile fit",
            iterations: res.iterations,
            residual: ssr,
            best: vec![xi, omega, alpha, nu],
        });
    }
    Ok(SkewFit { params: SkewShape::new(xi, omega, alpha, Some(nu))?, residual: ssr, iterations: res.iterations })
}

// ---------------------------------------------------------------------------
// Quantile grid

/// A predictive density described by quantiles `values[i]` at probability
/// levels `levels[i]`.
///
/// The CDF interpolates linearly between knots and extends the first/last
/// segment slope beyond the outermost knots, clamped to `[0, 1]`. A
/// zero-width segment (tied values) acts as an atom: the CDF jumps there and
/// is right-continuous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRaw")]
pub struct QuantileGrid {
    levels: Vec<f64>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct GridRaw {
    levels: Vec<f64>,
    values: Vec<f64>,
}

impl TryFrom<GridRaw> for QuantileGrid {
    type Error = Error;
    fn try_from(r: GridRaw) -> Result<Self> {
        QuantileGrid::new(r.levels, r.values)
    }
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.len() < 2 {
        return Err(Error::InvalidParameter("a quantile grid needs at least 2 knots".into()));
    }
    for &p in levels {
        check_prob_open(p)?;
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("quantile levels must be strictly increasing".into()));
    }
    Ok(())
}

impl QuantileGrid {
    pub fn new(levels: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if levels.len() != values.len() {
            return Err(Error::InvalidParameter("levels and values differ in length".into()));
        }
        check_levels(&levels)?;
        for &v in &values {
            numeric::check_finite("quantile value", v)?;
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter("quantile values must be non-decreasing (see repair_crossing)".into()));
        }
        Ok(QuantileGrid { levels, values })
    }

    /// Build a grid from possibly crossing predicted quantiles by sorting
    /// the values.
    pub fn repair_crossing(levels: Vec<f64>, mut raw_values: Vec<f64>) -> Result<Self> {
        raw_values.sort_by(f64::total_cmp);
        Self::new(levels, raw_values)
    }

    /// Evenly spaced levels `1/(n+1), …, n/(n+1)`; `n = 99` gives the
    /// percentile grid.
    pub fn uniform_levels(n: usize) -> Vec<f64> {
        (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Probability per unit value on the first/last segment.
    fn end_slopes(&self) -> (f64, f64) {
        let (t, q) = (&self.levels, &self.values);
        let n = t.len();
        ((t[1] - t[0]) / (q[1] - q[0]), (t[n - 1] - t[n - 2]) / (q[n - 1] - q[n - 2]))
    }

    pub fn interp_cdf(&self, y: f64) -> f64 {
        let (t, q) = (&self.levels, &self.values);
        let n = t.len();
        let k = q.partition_point(|&v| v <= y);
        let p = if k == 0 {
            let (s, _) = self.end_slopes();
            t[0] - s * (q[0] - y)
        } else if k == n {
            if q[n - 1] == q[n - 2] {
                1.0
            } else {
                let (_, s) = self.end_slopes();
                t[n - 1] + s * (y - q[n - 1])
            }
        } else {
            let i = k - 1;
            t[i] + (t[i + 1] - t[i]) / (q[i + 1] - q[i]) * (y - q[i])
        };
        if p.is_nan() {
            // infinite slope times zero distance on an atom at an endpoint
            return if y >= q[0] { t[0] } else { 0.0 };
        }
        p.clamp(0.0, 1.0)
    }

    pub fn interp_sample(&self, u: f64) -> f64 {
        let (t, q) = (&self.levels, &self.values);
        let n = t.len();
        if u <= t[0] {
            return q[0] - (q[1] - q[0]) / (t[1] - t[0]) * (t[0] - u);
        }
        if u >= t[n - 1] {
            return q[n - 1] + (q[n - 1] - q[n - 2]) / (t[n - 1] - t[n - 2]) * (u - t[n - 1]);
        }
        let i = t.partition_point(|&p| p <= u) - 1;
        q[i] + (q[i + 1] - q[i]) / (t[i + 1] - t[i]) * (u - t[i])
    }

    /// Pieces of the quantile function on `[0, 1]` as `(u0, u1, Q(u0), dQ/du)`.
    fn quantile_pieces(&self) -> Vec<(f64, f64, f64, f64)> {
        let (t, q) = (&self.levels, &self.values);
        let n = t.len();
        let mut pieces = Vec::with_capacity(n + 1);
        let s0 = (q[1] - q[0]) / (t[1] - t[0]);
        pieces.push((0.0, t[0], q[0] - s0 * t[0], s0));
        for i in 0..n - 1 {
            pieces.push((t[i], t[i + 1], q[i], (q[i + 1] - q[i]) / (t[i + 1] - t[i])));
        }
        let s1 = (q[n - 1] - q[n - 2]) / (t[n - 1] - t[n - 2]);
        pieces.push((t[n - 1], 1.0, q[n - 1], s1));
        pieces
    }
}

impl Univariate for QuantileGrid {
    fn pdf(&self, y: f64) -> f64 {
        let (t, q) = (&self.levels, &self.values);
        let n = t.len();
        let k = q.partition_point(|&v| v <= y);
        if k == 0 || k == n {
            let (s0, s1) = self.end_slopes();
            let s = if k == 0 { s0 } else { s1 };
            let p = self.interp_cdf(y);
            if p <= 0.0 || p >= 1.0 {
                0.0
            } else {
                s
            }
        } else {
            (t[k] - t[k - 1]) / (q[k] - q[k - 1])
        }
    }

    fn cdf(&self, y: f64) -> Result<f64> {
        numeric::check_finite("y", y)?;
        Ok(self.interp_cdf(y))
    }

    fn quantile(&self, p: f64) -> Result<f64> {
        check_prob_open(p)?;
        Ok(self.interp_sample(p))
    }

    /// Exact mean of the piecewise-linear quantile function.
    fn mean(&self) -> f64 {
        self.quantile_pieces()
            .iter()
            .map(|&(u0, u1, a, b)| {
                let l = u1 - u0;
                a * l + 0.5 * b * l * l
            })
            .sum()
    }

    fn variance(&self) -> f64 {
        let m = self.mean();
        self.quantile_pieces()
            .iter()
            .map(|&(u0, u1, a, b)| {
                let l = u1 - u0;
                let a = a - m;
                a * a * l + a * b * l * l + b * b * l * l * l / 3.0
            })
            .sum::<f64>()
            .max(0.0)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.interp_sample(open_unit(rng))).collect()
    }
}

/// Uniform draw on the open interval (0, 1).
pub fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

// ---------------------------------------------------------------------------
// Marginal

/// One horizon's predictive density, tagged by family for serialization:
/// `{"type": "normal", "mu": .., "sigma": ..}`,
/// `{"type": "skew_t", "xi": .., "omega": .., "alpha": .., "nu": ..}` or
/// `{"type": "quantile_grid", "levels": [..], "values": [..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Marginal {
    Normal(Normal),
    SkewT(SkewShape),
    QuantileGrid(QuantileGrid),
}

impl From<Normal> for Marginal {
    fn from(d: Normal) -> Self {
        Marginal::Normal(d)
    }
}

impl From<SkewShape> for Marginal {
    fn from(d: SkewShape) -> Self {
        Marginal::SkewT(d)
    }
}

impl From<QuantileGrid> for Marginal {
    fn from(d: QuantileGrid) -> Self {
        Marginal::QuantileGrid(d)
    }
}

impl Marginal {
    /// Quantile that also accepts the closed endpoints, used after clamping
    /// copula uniforms. Degenerate Normals return their mean everywhere.
    pub fn quantile_clamped(&self, u: f64) -> Result<f64> {
        self.quantile(u.clamp(1e-12, 1.0 - 1e-12))
    }
}

impl Univariate for Marginal {
    fn pdf(&self, y: f64) -> f64 {
        match self {
            Marginal::Normal(d) => d.pdf(y),
            Marginal::SkewT(d) => d.pdf(y),
            Marginal::QuantileGrid(d) => d.pdf(y),
        }
    }

    fn cdf(&self, y: f64) -> Result<f64> {
        match self {
            Marginal::Normal(d) => d.cdf(y),
            Marginal::SkewT(d) => d.cdf(y),
            Marginal::QuantileGrid(d) => d.cdf(y),
        }
    }

    fn quantile(&self, p: f64) -> Result<f64> {
        match self {
            Marginal::Normal(d) => d.quantile(p),
            Marginal::SkewT(d) => d.quantile(p),
            Marginal::QuantileGrid(d) => d.quantile(p),
        }
    }

    fn mean(&self) -> f64 {
        match self {
            Marginal::Normal(d) => d.mean(),
            Marginal::SkewT(d) => d.mean(),
            Marginal::QuantileGrid(d) => d.mean(),
        }
    }

    fn variance(&self) -> f64 {
        match self {
            Marginal::Normal(d) => d.variance(),
            Marginal::SkewT(d) => d.variance(),
            Marginal::QuantileGrid(d) => d.variance(),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        match self {
            Marginal::Normal(d) => d.sample(rng, n),
            Marginal::SkewT(d) => d.sample(rng, n),
            Marginal::QuantileGrid(d) => d.sample(rng, n),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Seed;

    fn ks_distance<F: Fn(f64) -> f64>(mut xs: Vec<f64>, cdf: F) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn normal_cdf_and_quantile_examples() {
        assert_eq!(Normal::standard().cdf(0.0).unwrap(), 0.5);
        assert_eq!(Normal::new(2.0, 3.0).unwrap().cdf(2.0).unwrap(), 0.5);
        assert_eq!(Normal::standard().quantile(0.5).unwrap(), 0.0);
        // reference value from the rational inverse-CDF series
        assert!((Normal::standard().quantile(0.975).unwrap() - 1.959_964).abs() < 1e-6);
        assert!(Normal::standard().cdf(f64::NAN).is_err());
        assert!(Normal::standard().quantile(1.0).is_err());
        assert!(Normal::new(0.0, -1.0).is_err());
    }

    #[test]
    fn degenerate_normal_is_a_step() {
        let d = Normal::new(0.7, 0.0).unwrap();
        assert!(d.is_degenerate());
        assert_eq!(d.cdf(0.69).unwrap(), 0.0);
        assert_eq!(d.cdf(0.7).unwrap(), 1.0);
        assert_eq!(d.quantile(0.3).unwrap(), 0.7);
    }

    /// Trapezoid oracle for the skew-t CDF on a fine grid, independent of the
    /// adaptive quadrature in `std_cdf`.
    fn trapezoid_cdf(d: &SkewShape, y: f64) -> f64 {
        let lo = y - 60.0 * d.omega();
        let n = 600_000;
        let h = (y - lo) / n as f64;
        let mut s = 0.5 * (d.pdf(lo) + d.pdf(y));
        for i in 1..n {
            s += d.pdf(lo + i as f64 * h);
        }
        s * h
    }

    #[test]
    fn skew_t_cdf_against_trapezoid_oracle() {
        let d = SkewShape::new(0.0, 1.0, -3.0, Some(8.0)).unwrap();
        let at0 = d.cdf(0.0).unwrap();
        assert!(at0 > 0.5);
        // closed form at the location: 1/2 - atan(alpha)/pi
        assert!((at0 - (0.5 - (-3.0_f64).atan() / std::f64::consts::PI)).abs() < 1e-10);
        for &y in &[-3.0, -1.0, -0.2, 0.4, 1.5] {
            let oracle = trapezoid_cdf(&d, y);
            assert!((d.cdf(y).unwrap() - oracle).abs() < 1e-6, "y={y}");
        }
    }

    #[test]
    fn skew_quantile_inverts_cdf() {
        for d in [
            SkewShape::new(1.0, 2.0, -3.0, Some(8.0)).unwrap(),
            SkewShape::skew_normal(0.0, 0.5, 4.0).unwrap(),
            SkewShape::new(0.0, 1.0, 0.0, Some(2.5)).unwrap(),
        ] {
            for &p in &[1e-6, 0.01, 0.05, 0.3, 0.5, 0.8, 0.95, 0.999] {
                let q = d.quantile(p).unwrap();
                assert!((d.cdf(q).unwrap() - p).abs() < 1e-8, "{d:?} p={p}");
            }
        }
    }

    #[test]
    fn skew_normal_cdf_matches_owen_t_identity() {
        // F(z) = Phi(z) - 2 T(z, alpha), with Owen's T by fine trapezoid
        let alpha = 2.0;
        let d = SkewShape::skew_normal(0.0, 1.0, alpha).unwrap();
        for &z in &[-1.5, 0.0, 0.7, 2.0] {
            let n = 200_000;
            let h = alpha / n as f64;
            let g = |x: f64| (-0.5 * z * z * (1.0 + x * x)).exp() / (1.0 + x * x);
            let mut s = 0.5 * (g(0.0) + g(alpha));
            for i in 1..n {
                s += g(i as f64 * h);
            }
            let owen = s * h / (2.0 * std::f64::consts::PI);
            let expected = norm_cdf(z) - 2.0 * owen;
            assert!((d.cdf(z).unwrap() - expected).abs() < 1e-9, "z={z}");
        }
    }

    #[test]
    fn calibration_hits_mean_and_sd() {
        for nu in [None, Some(8.0)] {
            let d = SkewShape::calibrated(-3.0, nu, 0.0, 0.5).unwrap();
            assert!(d.mean().abs() < 1e-8);
            assert!((d.sd() - 0.5).abs() < 1e-8);
        }
    }

    #[test]
    fn calibrated_skew_t_sample_sd() {
        let d = SkewShape::calibrated(-3.0, Some(8.0), 0.0, 0.5).unwrap();
        let xs = d.sample(&mut Seed(11).rng(), 100_000);
        let sd = numeric::variance(&xs).sqrt();
        assert!((sd - 0.5).abs() < 0.02, "sd={sd}");
        assert!(numeric::mean(&xs).abs() < 0.01);
    }

    #[test]
    fn samplers_match_cdfs() {
        let mut rng = Seed(5).rng();
        let n = Normal::standard();
        let xs = n.sample(&mut rng, 100_000);
        assert!(numeric::mean(&xs).abs() < 0.02);
        assert!(ks_distance(xs, |x| n.cdf(x).unwrap()) < 0.02);

        let st = SkewShape::new(0.0, 1.0, -3.0, Some(8.0)).unwrap();
        let xs = st.sample(&mut rng, 20_000);
        assert!(ks_distance(xs, |x| st.cdf(x).unwrap()) < 0.02);

        let id = identity_grid();
        let xs = id.sample(&mut rng, 100_000);
        assert!(ks_distance(xs, |x| x.clamp(0.0, 1.0)) < 0.02);
    }

    fn identity_grid() -> QuantileGrid {
        let l = QuantileGrid::uniform_levels(99);
        QuantileGrid::new(l.clone(), l).unwrap()
    }

    #[test]
    fn grid_interpolation_examples() {
        let id = identity_grid();
        assert!((id.interp_cdf(0.37) - 0.37).abs() < 1e-15);
        assert!((id.interp_sample(0.42) - 0.42).abs() < 1e-15);

        let g = QuantileGrid::new(vec![0.25, 0.75], vec![1.0, 3.0]).unwrap();
        assert_eq!(g.interp_cdf(2.0), 0.5);
        assert_eq!(g.quantile(0.5).unwrap(), 2.0);
        assert_eq!(g.interp_cdf(0.0), 0.0);
        assert_eq!(g.interp_sample(0.75), 3.0);
        assert!((g.interp_sample(0.9) - 3.6).abs() < 1e-12);
        assert_eq!(g.interp_cdf(100.0), 1.0);
    }

    #[test]
    fn ties_form_right_continuous_atoms() {
        let g = QuantileGrid::new(vec![0.2, 0.4, 0.6, 0.8], vec![0.0, 1.0, 1.0, 2.0]).unwrap();
        assert_eq!(g.interp_cdf(1.0), 0.6);
        assert!((g.interp_cdf(1.0 - 1e-9) - 0.4).abs() < 1e-6);
        assert_eq!(g.interp_sample(0.5), 1.0);

        let point = QuantileGrid::new(vec![0.25, 0.75], vec![2.0, 2.0]).unwrap();
        assert_eq!(point.interp_cdf(1.9), 0.0);
        assert_eq!(point.interp_cdf(2.0), 1.0);
        assert_eq!(point.interp_sample(0.1), 2.0);
    }

    #[test]
    fn repair_crossing_examples() {
        let g = QuantileGrid::repair_crossing(vec![0.25, 0.5, 0.75], vec![2.0, 1.0, 3.0]).unwrap();
        assert_eq!(g.values(), &[1.0, 2.0, 3.0]);
        let g = QuantileGrid::repair_crossing(vec![0.25, 0.5, 0.75], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.values(), &[1.0, 2.0, 3.0]);
        let g = QuantileGrid::repair_crossing(vec![0.25, 0.5, 0.75], vec![4.0; 3]).unwrap();
        assert_eq!(g.values(), &[4.0; 3]);
    }

    #[test]
    fn grid_moments_are_exact() {
        // identity grid with slope-1 extrapolation is Uniform(0, 1)
        let id = identity_grid();
        assert!((id.mean() - 0.5).abs() < 1e-12);
        assert!((id.variance() - 1.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn grid_json_shape() {
        let g: QuantileGrid = serde_json::from_str(r#"{"levels":[0.1,0.9],"values":[-1,1]}"#).unwrap();
        assert_eq!(g.values(), &[-1.0, 1.0]);
        assert!(serde_json::from_str::<QuantileGrid>(r#"{"levels":[0.9,0.1],"values":[-1,1]}"#).is_err());
        let m: Marginal = serde_json::from_str(r#"{"type":"normal","mu":1,"sigma":2}"#).unwrap();
        assert_eq!(m, Marginal::Normal(Normal::new(1.0, 2.0).unwrap()));
    }

    #[test]
    fn skewt_fit_recovers_normal_quantiles() {
        let levels = [0.05, 0.25, 0.5, 0.75, 0.95];
        let values: Vec<f64> = levels.iter().map(|&p| norm_ppf(p)).collect();
        let fit = fit_skewt_to_quantiles(&levels, &values).unwrap();
        let d = fit.params;
        assert!(d.xi().abs() < 0.05 && (d.omega() - 1.0).abs() < 0.05, "{d:?}");
        assert!(d.alpha().abs() < 0.1 && d.nu().unwrap() > 50.0, "{d:?}");
        for (&p, &v) in levels.iter().zip(&values) {
            assert!((d.quantile(p).unwrap() - v).abs() < 1e-3);
        }
    }

    #[test]
    fn skewt_fit_reproduces_skewed_quantiles() {
        let truth = SkewShape::new(1.0, 2.0, -3.0, Some(8.0)).unwrap();
        let levels = [0.05, 0.25, 0.5, 0.75, 0.95];
        let values: Vec<f64> = levels.iter().map(|&p| truth.quantile(p).unwrap()).collect();
        let fit = fit_skewt_to_quantiles(&levels, &values).unwrap();
        for (&p, &v) in levels.iter().zip(&values) {
            assert!((fit.params.quantile(p).unwrap() - v).abs() < 1e-3, "p={p}");
        }
    }

    #[test]
    fn skewt_fit_rejects_degenerate_and_short_input() {
        let levels = [0.05, 0.25, 0.5, 0.75, 0.95];
        assert!(matches!(fit_skewt_to_quantiles(&levels, &[1.0; 5]), Err(Error::Degenerate(_))));
        assert!(fit_skewt_to_quantiles(&levels[..3], &[1.0, 2.0, 3.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn grid_cdf_monotone_and_exact_at_knots(
                raw in proptest::collection::vec(-5.0f64..5.0, 3..12),
                probe in proptest::collection::vec(-8.0f64..8.0, 10),
            ) {
                let levels = QuantileGrid::uniform_levels(raw.len());
                let g = QuantileGrid::repair_crossing(levels.clone(), raw.clone()).unwrap();
                let mut sorted = raw.clone();
                sorted.sort_by(f64::total_cmp);
                prop_assert_eq!(g.values(), &sorted[..]);
                let mut ys = probe.clone();
                ys.sort_by(f64::total_cmp);
                let ps: Vec<f64> = ys.iter().map(|&y| g.interp_cdf(y)).collect();
                prop_assert!(ps.windows(2).all(|w| w[1] >= w[0]));
                let distinct = g.values().windows(2).all(|w| w[1] > w[0]);
                if distinct {
                    for (t, q) in g.levels().iter().zip(g.values()) {
                        prop_assert!((g.interp_cdf(*q) - t).abs() < 1e-12);
                    }
                }
            }

            #[test]
            fn grid_sample_inverts_cdf(
                raw in proptest::collection::vec(-5.0f64..5.0, 3..12),
                u in 0.0f64..1.0,
            ) {
                let levels = QuantileGrid::uniform_levels(raw.len());
                let g = QuantileGrid::repair_crossing(levels.clone(), raw).unwrap();
                prop_assume!(g.values().windows(2).all(|w| w[1] - w[0] > 1e-6));
                let lo = levels[0];
                let hi = levels[levels.len() - 1];
                let u = lo + u * (hi - lo);
                prop_assert!((g.interp_cdf(g.interp_sample(u)) - u).abs() < 1e-12);
            }

            #[test]
            fn normal_quantile_cdf_roundtrip(mu in -10.0f64..10.0, sigma in 0.01f64..10.0, p in 0.0001f64..0.9999) {
                let d = Normal::new(mu, sigma).unwrap();
                prop_assert!((d.cdf(d.quantile(p).unwrap()).unwrap() - p).abs() < 1e-10);
            }
        }
    }
}
