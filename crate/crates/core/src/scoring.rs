//! Proper scoring rules and forecast-evaluation tests.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dists::Normal;
use crate::numeric::{self, norm_cdf, norm_pdf, norm_ppf, sorted_quantile};
use crate::rng::Seed;
use crate::{Error, Result};

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// Closed-form CRPS of `N(mu, sigma^2)` at `y`.
pub fn crps_normal(d: &Normal, y: f64) -> f64 {
    let s = d.sigma();
    if s == 0.0 {
        return (y - d.mu()).abs();
    }
    let z = (y - d.mu()) / s;
    s * (z * (2.0 * norm_cdf(z) - 1.0) + 2.0 * norm_pdf(z) - FRAC_1_SQRT_PI)
}

/// CRPS of an ensemble: `mean|X - y| - E|X - X'| / 2` with the unbiased
/// pairwise estimator of `E|X - X'|`. `sorted` must be in ascending order.
pub fn crps_sorted_draws(sorted: &[f64], y: f64) -> Result<f64> {
    let n = sorted.len();
    if n < 2 {
        return Err(Error::InvalidParameter("CRPS from draws needs at least 2 draws".into()));
    }
    let nf = n as f64;
    let mae = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / nf;
    let pair: f64 = sorted.iter().enumerate().map(|(k, x)| x * (2.0 * (k + 1) as f64 - nf - 1.0)).sum::<f64>() * 2.0
        / (nf * (nf - 1.0));
    Ok((mae - 0.5 * pair).max(0.0))
}

/// [`crps_sorted_draws`] for unsorted draws.
pub fn crps_draws(draws: &[f64], y: f64) -> Result<f64> {
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    crps_sorted_draws(&s, y)
}

/// Tick loss `(q - 1{y <= pred}) (y - pred)`.
pub fn quantile_score(q: f64, pred: f64, y: f64) -> f64 {
    let ind = if y <= pred { 1.0 } else { 0.0 };
    (q - ind) * (y - pred)
}

/// Weight function over quantile levels for [`qw_crps`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// `w = 1`: the plain CRPS.
    Uniform,
    /// `w = (2 tau - 1)^2`, both tails.
    #[default]
    Tails,
    /// `w = tau (1 - tau)`.
    Center,
    /// `w = (1 - tau)^2`.
    LeftTail,
    /// `w = tau^2`.
    RightTail,
}

impl WeightScheme {
    pub fn weight(self, tau: f64) -> f64 {
        match self {
            WeightScheme::Uniform => 1.0,
            WeightScheme::Tails => (2.0 * tau - 1.0).powi(2),
            WeightScheme::Center => tau * (1.0 - tau),
            WeightScheme::LeftTail => (1.0 - tau).powi(2),
            WeightScheme::RightTail => tau * tau,
        }
    }
}

/// Quadrature levels `1/100, ..., 99/100`.
pub const QW_LEVELS: usize = 99;

fn qw_level(i: usize) -> f64 {
    (i + 1) as f64 / (QW_LEVELS + 1) as f64
}

fn std_normal_levels() -> &'static [f64; QW_LEVELS] {
    static Z: OnceLock<[f64; QW_LEVELS]> = OnceLock::new();
    Z.get_or_init(|| std::array::from_fn(|i| norm_ppf(qw_level(i))))
}

/// Quantile-weighted CRPS, `2 * integral of w(tau) QS_tau(Q(tau), y)`,
/// by the trapezoid rule on the 99-point grid `tau = i/100` (the integrand
/// vanishes at both ends). With [`WeightScheme::Uniform`] this approximates
/// the CRPS.
pub fn qw_crps<Q: Fn(f64) -> f64>(quantile: Q, y: f64, weight: WeightScheme) -> f64 {
    qw_crps_on_grid(quantile, y, weight, QW_LEVELS)
}

/// [`qw_crps`] on the grid `tau = i/(levels+1)`, `i = 1..=levels`.
pub fn qw_crps_on_grid<Q: Fn(f64) -> f64>(quantile: Q, y: f64, weight: WeightScheme, levels: usize) -> f64 {
    let h = 1.0 / (levels + 1) as f64;
    2.0 * h
        * (1..=levels)
            .map(|i| {
                let t = i as f64 / (levels + 1) as f64;
                weight.weight(t) * quantile_score(t, quantile(t), y)
            })
            .sum::<f64>()
}

/// [`qw_crps`] for a Normal forecast, using cached standard-normal levels.
pub fn qw_crps_normal(d: &Normal, y: f64, weight: WeightScheme) -> f64 {
    let z = std_normal_levels();
    let h = 1.0 / (QW_LEVELS + 1) as f64;
    2.0 * h
        * (0..QW_LEVELS)
            .map(|i| {
                let t = qw_level(i);
                weight.weight(t) * quantile_score(t, d.mu() + d.sigma() * z[i], y)
            })
            .sum::<f64>()
}

/// [`qw_crps`] for an ensemble, with type-7 empirical quantiles of the
/// sorted draws.
pub fn qw_crps_sorted_draws(sorted: &[f64], y: f64, weight: WeightScheme) -> f64 {
    qw_crps(|t| sorted_quantile(sorted, t), y, weight)
}

/// Quantile score of a Normal forecast at level `q`.
pub fn qs_normal(d: &Normal, q: f64, y: f64) -> f64 {
    quantile_score(q, d.mu() + d.sigma() * norm_ppf(q), y)
}

// ---------------------------------------------------------------------------
// PIT uniformity

/// Result of [`pit_uniformity_test`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitTestResult {
    pub statistic: f64,
    pub n: usize,
    pub block: usize,
    /// Critical values at the 1%, 5% and 10% levels.
    pub critical: [f64; 3],
    pub reject: [bool; 3],
}

pub const PIT_SIZES: [f64; 3] = [0.01, 0.05, 0.10];
pub const PIT_NULL_REPS: usize = 5000;
const MIN_PITS: usize = 20;

/// PIT of a draw-based forecast: the share of sorted draws `<= y`.
pub fn pit_sorted_draws(sorted: &[f64], y: f64) -> f64 {
    sorted.partition_point(|&v| v <= y) as f64 / sorted.len() as f64
}

/// `sup_u |F_n(u) - u|` of the sample.
pub fn ks_uniform_statistic(pits: &[f64]) -> f64 {
    let mut s = pits.to_vec();
    s.sort_by(f64::total_cmp);
    ks_sorted(&s)
}

fn ks_sorted(s: &[f64]) -> f64 {
    let n = s.len() as f64;
    s.iter().enumerate().map(|(i, &u)| ((i + 1) as f64 / n - u).max(u - i as f64 / n)).fold(0.0, f64::max)
}

/// Null critical values of the uniformity statistic for `n` PITs whose
/// serial dependence extends over `block` periods.
///
/// Null samples are `U_t = Phi(sum of `block` consecutive iid normals /
/// sqrt(block))`: exactly uniform marginals with the moving-window overlap
/// of `block`-step forecast errors. `block = 1` is the iid case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitNull {
    pub n: usize,
    pub block: usize,
    pub critical: [f64; 3],
}

impl PitNull {
    pub fn simulate(n: usize, block: usize, reps: usize, seed: Seed) -> Result<Self> {
        if n < MIN_PITS {
            return Err(Error::InvalidParameter(format!(
                "PIT uniformity test needs at least {MIN_PITS} PITs, got {n}"
            )));
        }
        if block == 0 || reps < 100 {
            return Err(Error::InvalidParameter("block must be >= 1 and reps >= 100".into()));
        }
        let chunk = 250;
        let mut stats: Vec<f64> = (0..reps.div_ceil(chunk))
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut rng = seed.stream(c as u64);
                let m = chunk.min(reps - c * chunk);
                let scale = 1.0 / (block as f64).sqrt();
                let mut e = vec![0.0; n + block - 1];
                let mut u = vec![0.0; n];
                (0..m)
                    .map(|_| {
                        for v in e.iter_mut() {
                            *v = StandardNormal.sample(&mut rng);
                        }
                        let mut window: f64 = e[..block].iter().sum();
                        for t in 0..n {
                            if t > 0 {
                                window += e[t + block - 1] - e[t - 1];
                            }
                            u[t] = norm_cdf(window * scale);
                        }
                        let mut s = u.clone();
                        s.sort_by(f64::total_cmp);
                        ks_sorted(&s)
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        stats.sort_by(f64::total_cmp);
        let critical = PIT_SIZES.map(|a| sorted_quantile(&stats, 1.0 - a));
        Ok(PitNull { n, block, critical })
    }

    pub fn test(&self, pits: &[f64]) -> Result<PitTestResult> {
        if pits.len() != self.n {
            return Err(Error::InvalidParameter(format!(
                "critical values were simulated for n = {}, got {} PITs",
                self.n,
                pits.len()
            )));
        }
        for &u in pits {
            if !(0.0..=1.0).contains(&u) {
                return Err(Error::Domain(format!("PIT {u} outside [0, 1]")));
            }
        }
        let statistic = ks_uniform_statistic(pits);
        Ok(PitTestResult {
            statistic,
            n: self.n,
            block: self.block,
            critical: self.critical,
            reject: self.critical.map(|c| statistic > c),
        })
    }
}

/// Kolmogorov-type test of PIT uniformity with critical values simulated
/// for dependence over `block` periods (see [`PitNull`]).
pub fn pit_uniformity_test(pits: &[f64], block: usize, seed: Seed) -> Result<PitTestResult> {
    PitNull::simulate(pits.len(), block, PIT_NULL_REPS, seed)?.test(pits)
}

// ---------------------------------------------------------------------------
// Equal predictive ability

/// Per-origin losses of one method on one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub method: String,
    pub horizon: String,
    pub origins: Vec<i64>,
    pub losses: Vec<f64>,
}

impl ScoreSeries {
    pub fn new(
        method: impl Into<String>,
        horizon: impl Into<String>,
        origins: Vec<i64>,
        losses: Vec<f64>,
    ) -> Result<Self> {
        if origins.len() != losses.len() {
            return Err(Error::InvalidParameter("origins and losses differ in length".into()));
        }
        for &l in &losses {
            numeric::check_finite("loss", l)?;
        }
        Ok(ScoreSeries { method: method.into(), horizon: horizon.into(), origins, losses })
    }

    pub fn mean(&self) -> f64 {
        numeric::mean(&self.losses)
    }
}

/// Outcome of [`epa_test`]. `d = loss_a - loss_b`, so a positive statistic
/// means method `a` has larger losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpaResult {
    pub statistic: f64,
    pub p_value: f64,
    pub mean_diff: f64,
    pub bandwidth: usize,
    pub n: usize,
    /// Set when the loss differential has zero variance and a nonzero mean.
    pub degenerate: bool,
}

/// Bartlett-kernel Newey–West long-run variance.
pub fn newey_west_variance(x: &[f64], bandwidth: usize) -> f64 {
    let n = x.len();
    let m = numeric::mean(x);
    let gamma = |k: usize| (k..n).map(|t| (x[t] - m) * (x[t - k] - m)).sum::<f64>() / n as f64;
    let mut v = gamma(0);
    for k in 1..=bandwidth.min(n.saturating_sub(1)) {
        v += 2.0 * (1.0 - k as f64 / (bandwidth as f64 + 1.0)) * gamma(k);
    }
    v
}

/// Unconditional equal-predictive-ability test on aligned loss series.
pub fn epa_test(loss_a: &[f64], loss_b: &[f64], bandwidth: usize) -> Result<EpaResult> {
    if loss_a.len() != loss_b.len() {
        return Err(Error::InvalidParameter(format!(
            "loss series differ in length ({} vs {})",
            loss_a.len(),
            loss_b.len()
        )));
    }
    let n = loss_a.len();
    if n < 10 {
        return Err(Error::InvalidParameter(format!("EPA test needs n >= 10, got {n}")));
    }
    let d: Vec<f64> = loss_a.iter().zip(loss_b).map(|(a, b)| a - b).collect();
    for &v in &d {
        numeric::check_finite("loss differential", v)?;
    }
    let mean_diff = numeric::mean(&d);
    let var = newey_west_variance(&d, bandwidth);
    let scale = d.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if var <= 1e-28 * scale * scale || var <= 0.0 {
        let (statistic, degenerate) =
            if mean_diff == 0.0 || scale == 0.0 { (0.0, false) } else { (f64::INFINITY.copysign(mean_diff), true) };
        let p_value = if degenerate { 0.0 } else { 1.0 };
        return Ok(EpaResult { statistic, p_value, mean_diff, bandwidth, n, degenerate });
    }
    let statistic = mean_diff / (var / n as f64).sqrt();
    let p_value = (2.0 * norm_cdf(-statistic.abs())).min(1.0);
    Ok(EpaResult { statistic, p_value, mean_diff, bandwidth, n, degenerate: false })
}

/// EPA test on two [`ScoreSeries`], which must share origins.
pub fn epa_test_series(a: &ScoreSeries, b: &ScoreSeries, bandwidth: usize) -> Result<EpaResult> {
    if a.origins != b.origins {
        let missing: Vec<i64> = a
            .origins
            .iter()
            .filter(|o| !b.origins.contains(o))
            .chain(b.origins.iter().filter(|o| !a.origins.contains(o)))
            .copied()
            .collect();
        return Err(Error::Data(format!(
            "score series '{}' and '{}' are not aligned; unmatched origins {:?}",
            a.method, b.method, missing
        )));
    }
    epa_test(&a.losses, &b.losses, bandwidth)
}

/// Standard error of the mean by iid resampling: sd of `reps` resampled
/// means.
pub fn bootstrap_se(values: &[f64], reps: usize, seed: Seed) -> Result<f64> {
    if reps < 200 {
        return Err(Error::InvalidParameter(format!("bootstrap needs B >= 200, got {reps}")));
    }
    if values.is_empty() {
        return Err(Error::InvalidParameter("bootstrap of an empty sequence".into()));
    }
    let n = values.len();
    let mut rng = seed.rng();
    let means: Vec<f64> =
        (0..reps).map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64).collect();
    let m = numeric::mean(&means);
    Ok((means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (reps as f64 - 1.0)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::Univariate;

    #[test]
    fn crps_examples() {
        let c = crps_normal(&Normal::standard(), 0.0);
        assert!((c - (2f64.sqrt() - 1.0) / std::f64::consts::PI.sqrt()).abs() < 1e-15);
        assert!((c - 0.23370).abs() < 1e-5);
        assert_eq!(crps_normal(&Normal::new(1.5, 0.0).unwrap(), 1.5), 0.0);
        assert_eq!(crps_draws(&[3.0; 10], 4.0).unwrap(), 1.0);
        assert!(crps_draws(&[1.0], 0.0).is_err());
    }

    /// Numerical oracle: CRPS = integral of (F(x) - 1{x >= y})^2 dx.
    #[test]
    fn crps_normal_matches_integral_definition() {
        let d = Normal::new(0.3, 1.7).unwrap();
        for &y in &[-2.0, 0.0, 0.3, 4.0] {
            let f = |x: f64| {
                let ind = if x >= y { 1.0 } else { 0.0 };
                (d.cdf(x).unwrap() - ind).powi(2)
            };
            let v = numeric::integrate(&f, -20.0, y, 1e-12) + numeric::integrate(&f, y, 20.0, 1e-12);
            assert!((crps_normal(&d, y) - v).abs() < 1e-9);
        }
    }

    #[test]
    fn quantile_score_examples() {
        assert_eq!(quantile_score(0.5, 0.0, 2.0), 1.0);
        assert!((quantile_score(0.1, 0.0, -1.0) - 0.9).abs() < 1e-15);
        assert!((quantile_score(0.1, 0.0, 1.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn qw_crps_examples() {
        let n = Normal::standard();
        let q = |t: f64| n.quantile(t).unwrap();
        let u = qw_crps(q, 0.0, WeightScheme::Uniform);
        let c = crps_normal(&n, 0.0);
        assert!(((u - c) / c).abs() < 1e-2, "{u} vs {c}");
        // frozen from the 99-point sum
        assert!((u - 0.233_553).abs() < 1e-6);
        assert_eq!(qw_crps(|_| 1.0, 1.0, WeightScheme::Tails), 0.0);
        assert!(qw_crps(q, 0.0, WeightScheme::Tails) < u);
        assert!((qw_crps_normal(&n, 0.7, WeightScheme::Tails) - qw_crps(q, 0.7, WeightScheme::Tails)).abs() < 1e-12);
    }

    #[test]
    fn qw_draws_follow_empirical_quantiles() {
        let draws: Vec<f64> = (0..1001).map(|i| i as f64 / 1000.0).collect();
        let v = qw_crps_sorted_draws(&draws, 0.25, WeightScheme::Uniform);
        let exact = qw_crps(|t| t, 0.25, WeightScheme::Uniform);
        assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn ks_examples() {
        let n = 40;
        let grid: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        assert!((ks_uniform_statistic(&grid) - 0.5 / n as f64).abs() < 1e-15);
        let null = PitNull::simulate(n, 1, 2000, Seed(1)).unwrap();
        assert!(!null.test(&grid).unwrap().reject.iter().any(|&r| r));
        let low: Vec<f64> = grid.iter().map(|u| u * 0.49).collect();
        let r = null.test(&low).unwrap();
        assert!(r.statistic >= 0.5 && r.reject.iter().all(|&x| x));
        assert!(PitNull::simulate(19, 1, 2000, Seed(1)).is_err());
    }

    #[test]
    fn iid_critical_values_match_kolmogorov_asymptotics() {
        // sqrt(n) D_n -> Kolmogorov; 5% point 1.358, finite-n value ~ 1.358 / (sqrt(n) + 0.12 + 0.11/sqrt(n))
        let n = 200;
        let null = PitNull::simulate(n, 1, 5000, Seed(2)).unwrap();
        let sn = (n as f64).sqrt();
        let approx = 1.358 / (sn + 0.12 + 0.11 / sn);
        assert!((null.critical[1] - approx).abs() < 0.004, "{:?} vs {approx}", null.critical);
        assert!(null.critical[0] > null.critical[1] && null.critical[1] > null.critical[2]);
    }

    #[test]
    fn dependence_widens_critical_values() {
        let a = PitNull::simulate(60, 1, 3000, Seed(5)).unwrap();
        let b = PitNull::simulate(60, 4, 3000, Seed(5)).unwrap();
        assert!(b.critical[1] > a.critical[1]);
    }

    #[test]
    fn epa_examples() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let r = epa_test(&a, &a, 2).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        let b: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
        let r = epa_test(&b, &a, 0).unwrap();
        assert!(r.degenerate && r.statistic == f64::INFINITY);
        assert!(epa_test(&a[..9], &a[..9], 0).is_err());
    }

    #[test]
    fn epa_invariant_to_common_shift() {
        let a: Vec<f64> = (0..40).map(|i| ((i * 13 % 7) as f64).sqrt()).collect();
        let b: Vec<f64> = (0..40).map(|i| ((i * 5 % 11) as f64).ln_1p()).collect();
        let r1 = epa_test(&a, &b, 3).unwrap();
        let a2: Vec<f64> = a.iter().map(|x| x + 7.5).collect();
        let b2: Vec<f64> = b.iter().map(|x| x + 7.5).collect();
        let r2 = epa_test(&a2, &b2, 3).unwrap();
        assert!((r1.statistic - r2.statistic).abs() < 1e-9);
    }

    #[test]
    fn newey_west_by_hand() {
        let x = [1.0, -1.0, 2.0, 0.0];
        // mean 0.5; gamma0 = 5/4 * ... computed directly
        let m = 0.5;
        let g0 = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0;
        let g1 = (1..4).map(|t| (x[t] - m) * (x[t - 1] - m)).sum::<f64>() / 4.0;
        assert!((newey_west_variance(&x, 1) - (g0 + g1)).abs() < 1e-15);
        assert_eq!(newey_west_variance(&x, 0), g0);
    }

    #[test]
    fn bootstrap_examples() {
        assert_eq!(bootstrap_se(&[2.5; 30], 500, Seed(1)).unwrap(), 0.0);
        let mut rng = Seed(2).rng();
        let v: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
        let se = bootstrap_se(&v, 2000, Seed(3)).unwrap();
        assert!((se - 0.1).abs() < 0.02, "{se}");
        // resampling two points: sd of the mean is sqrt(1/2) * population sd (= 1)
        let se2 = bootstrap_se(&[0.0, 2.0], 20_000, Seed(4)).unwrap();
        assert!((se2 - 0.5f64.sqrt()).abs() < 0.02, "{se2}");
        assert!(bootstrap_se(&v, 100, Seed(3)).is_err());
    }

    #[test]
    fn series_alignment_reports_gaps() {
        let a = ScoreSeries::new("a", "h1", (0..12).collect(), vec![1.0; 12]).unwrap();
        let b = ScoreSeries::new("b", "h1", (1..13).collect(), vec![1.0; 12]).unwrap();
        match epa_test_series(&a, &b, 0) {
            Err(Error::Data(m)) => assert!(m.contains('0') && m.contains("12")),
            other => panic!("{other:?}"),
        }
    }
}
