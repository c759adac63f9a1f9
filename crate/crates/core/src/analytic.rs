//! Closed forms for a mean-zero Gaussian AR(1), `Y_{t+1} = rho Y_t + eps`,
//! where the joint law of multi-step forecasts is known exactly.
//!
//! Provides the forecast-error moments, the predictive law of a weighted sum
//! of horizon forecasts with and without cross-horizon dependence, the
//! simulated score gains of the dependence-aware law, and the MSFE ratio of
//! the path-based versus a direct annual-average regression forecast.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copula::pit_corr_theoretical;
use crate::dists::Normal;
use crate::rng::Seed;
use crate::scoring::{crps_normal, qs_normal, qw_crps_normal, WeightScheme};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ar1 {
    rho: f64,
    sigma_eps: f64,
}

impl Ar1 {
    pub fn new(rho: f64, sigma_eps: f64) -> Result<Self> {
        if !(rho.is_finite() && rho.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!("AR(1) needs |rho| < 1, got {rho}")));
        }
        if !(sigma_eps.is_finite() && sigma_eps > 0.0) {
            return Err(Error::InvalidParameter(format!("shock sd must be > 0, got {sigma_eps}")));
        }
        Ok(Ar1 { rho, sigma_eps })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn sigma_eps(&self) -> f64 {
        self.sigma_eps
    }

    /// `(1 - rho^{2n}) / (1 - rho^2)`, i.e. `sum_{i<n} rho^{2i}`.
    fn geom2(&self, n: usize) -> f64 {
        (1.0 - self.rho.powi(2 * n as i32)) / (1.0 - self.rho * self.rho)
    }

    pub fn stationary_variance(&self) -> f64 {
        self.sigma_eps * self.sigma_eps / (1.0 - self.rho * self.rho)
    }

    /// Variance of the `h`-step forecast error.
    pub fn error_variance(&self, h: usize) -> f64 {
        self.sigma_eps * self.sigma_eps * self.geom2(h)
    }

    /// Covariance of the `h`- and `(h-k)`-step errors from the same origin.
    pub fn error_autocov(&self, h: usize, k: usize) -> Result<f64> {
        check_hk(h, k)?;
        Ok(self.sigma_eps * self.sigma_eps * self.rho.powi(k as i32) * self.geom2(h - k))
    }

    /// `rho^k sqrt((1 - rho^{2(h-k)}) / (1 - rho^{2h}))`.
    pub fn error_autocorr(&self, h: usize, k: usize) -> Result<f64> {
        check_hk(h, k)?;
        Ok(self.rho.powi(k as i32) * (self.geom2(h - k) / self.geom2(h)).sqrt())
    }

    /// Pearson correlation of the PITs of the `h`- and `(h-k)`-step
    /// forecasts.
    pub fn pit_autocorr(&self, h: usize, k: usize) -> Result<f64> {
        Ok(pit_corr_theoretical(self.error_autocorr(h, k)?))
    }

    /// Conditional law of `sum_j w_j Y_{t+j}` given `y_t`, including the
    /// cross-horizon covariances.
    pub fn attentive_law(&self, w: &[f64], y_t: f64) -> Result<Normal> {
        check_weights(w)?;
        let mut var = 0.0;
        for (j, &wj) in w.iter().enumerate() {
            var += wj * wj * self.geom2(j + 1);
        }
        for j in 2..=w.len() {
            for k in 1..j {
                var += 2.0 * w[j - 1] * w[j - k - 1] * self.rho.powi(k as i32) * self.geom2(j - k);
            }
        }
        Normal::new(self.weighted_mean(w, y_t), self.sigma_eps * var.max(0.0).sqrt())
    }

    /// Same mean as [`Ar1::attentive_law`], variance summing the marginal
    /// error variances only.
    pub fn inattentive_law(&self, w: &[f64], y_t: f64) -> Result<Normal> {
        check_weights(w)?;
        let var: f64 = w.iter().enumerate().map(|(j, wj)| wj * wj * self.geom2(j + 1)).sum();
        Normal::new(self.weighted_mean(w, y_t), self.sigma_eps * var.sqrt())
    }

    fn weighted_mean(&self, w: &[f64], y_t: f64) -> f64 {
        w.iter().enumerate().map(|(j, wj)| wj * self.rho.powi(j as i32 + 1) * y_t).sum()
    }

    /// Mean vector and covariance of `(Y_{t+1}, ..., Y_{t+h})` given `y_t`.
    pub fn joint_law(&self, h: usize, y_t: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if h == 0 {
            return Err(Error::InvalidParameter("joint law needs h >= 1".into()));
        }
        let mean = DVector::from_fn(h, |j, _| self.rho.powi(j as i32 + 1) * y_t);
        let s2 = self.sigma_eps * self.sigma_eps;
        let cov = DMatrix::from_fn(h, h, |i, j| {
            let lag = i.abs_diff(j) as i32;
            s2 * self.rho.powi(lag) * self.geom2(i.min(j) + 1)
        });
        Ok((mean, cov))
    }

    /// MSFE of the path-based forecast relative to the direct regression of
    /// the annual average on its own lag, for a two-period calendar year.
    pub fn msfe_ratio(&self, case: MsfeCase) -> f64 {
        let r = self.rho;
        match case {
            MsfeCase::OneYear => (r * r + 4.0 * r + 5.0) / (6.0 * r * r + 8.0 * r + 6.0),
            MsfeCase::TwoYear => {
                let p = |k: i32| r.powi(k);
                (p(6) + 4.0 * p(5) + 7.0 * p(4) + 8.0 * (p(3) + p(2) + r) + 6.0)
                    / (6.0 * p(6) + 8.0 * (p(5) + p(4) + p(3) + p(2) + r) + 6.0)
            }
        }
    }

    /// Monte Carlo version of [`Ar1::msfe_ratio`]. Returns the ratio of mean
    /// squared errors and its delta-method standard error.
    ///
    /// The year is two periods, so the annual average at `t` is
    /// `Z_t = Y_{t-2}/2 + Y_{t-1} + Y_t/2`. The path forecast of `Z_{t+2}`
    /// (`Z_{t+4}`) is its conditional mean given `Y_t`; the direct forecast
    /// is `rho^2 Z_t` (`rho^4 Z_t`).
    pub fn simulate_msfe_ratio(&self, case: MsfeCase, reps: usize, seed: Seed) -> Result<(f64, f64)> {
        if reps < 100 {
            return Err(Error::InvalidParameter("simulation needs at least 100 replications".into()));
        }
        let r = self.rho;
        let s = self.sigma_eps;
        let sd_y = s / (1.0 - r * r).sqrt();
        let chunk = 4096;
        let pairs: Vec<(f64, f64)> = (0..reps.div_ceil(chunk))
            .into_par_iter()
            .flat_map_iter(|c| {
                let mut rng = seed.stream(c as u64);
                let m = chunk.min(reps - c * chunk);
                (0..m)
                    .map(|_| {
                        let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
                        // y[0] = Y_{t-2}, ..., y[2] = Y_t, ..., y[6] = Y_{t+4}
                        let mut y = [0.0; 7];
                        y[0] = sd_y * z();
                        for i in 1..7 {
                            y[i] = r * y[i - 1] + s * z();
                        }
                        let z_t = 0.5 * y[0] + y[1] + 0.5 * y[2];
                        let yt = y[2];
                        match case {
                            MsfeCase::OneYear => {
                                let target = 0.5 * y[2] + y[3] + 0.5 * y[4];
                                let path = (0.5 + r + 0.5 * r * r) * yt;
                                let direct = r * r * z_t;
                                ((target - path).powi(2), (target - direct).powi(2))
                            }
                            MsfeCase::TwoYear => {
                                let target = 0.5 * y[4] + y[5] + 0.5 * y[6];
                                let path = (0.5 * r * r + r.powi(3) + 0.5 * r.powi(4)) * yt;
                                let direct = r.powi(4) * z_t;
                                ((target - path).powi(2), (target - direct).powi(2))
                            }
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let n = pairs.len() as f64;
        let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
        let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
        let ratio = ma / mb;
        let lin: Vec<f64> = pairs.iter().map(|p| (p.0 - ratio * p.1) / mb).collect();
        let var = lin.iter().map(|v| v * v).sum::<f64>() / (n - 1.0);
        Ok((ratio, (var / n).sqrt()))
    }
}

fn check_hk(h: usize, k: usize) -> Result<()> {
    if k == 0 || k >= h {
        return Err(Error::InvalidParameter(format!("need h > k > 0, got h={h}, k={k}")));
    }
    Ok(())
}

fn check_weights(w: &[f64]) -> Result<()> {
    if w.is_empty() || w.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("weights must be a non-empty finite vector".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsfeCase {
    OneYear,
    TwoYear,
}

/// Percentage score gains of the dependence-aware over the dependence-blind
/// predictive law of the `h`-period sum, at one `(rho, h)` point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainSurfacePoint {
    pub rho: f64,
    pub h: usize,
    pub crps_gain_pct: f64,
    pub qwcrps_gain_pct: f64,
    pub qs10_gain_pct: f64,
}

/// Simulated score gains over a `(rho, h)` grid with unit weights and unit
/// shock variance. Each replication draws `y_t` from the stationary law and
/// the realised sum from the dependence-aware law, scores both predictive
/// laws on it, and the gain is `100 (1 - mean aware / mean blind)`.
pub fn gain_surface(rhos: &[f64], hs: &[usize], reps: usize, seed: Seed) -> Result<Vec<GainSurfacePoint>> {
    if reps == 0 {
        return Err(Error::InvalidParameter("gain surface needs at least one replication".into()));
    }
    let grid: Vec<(f64, usize)> = rhos.iter().flat_map(|&r| hs.iter().map(move |&h| (r, h))).collect();
    grid.par_iter().map(|&(rho, h)| gain_point(rho, h, reps, seed)).collect()
}

fn gain_point(rho: f64, h: usize, reps: usize, seed: Seed) -> Result<GainSurfacePoint> {
    if h == 0 {
        return Err(Error::InvalidParameter("horizon must be >= 1".into()));
    }
    let p = Ar1::new(rho, 1.0)?;
    let w = vec![1.0; h];
    let point_seed = seed.derive(&format!("gain:{rho}:{h}"), 0);
    let mut rng = point_seed.rng();
    let sd_y = p.stationary_variance().sqrt();
    let mut sums = [0.0; 6];
    for _ in 0..reps {
        let zy: f64 = StandardNormal.sample(&mut rng);
        let y_t = sd_y * zy;
        let aware = p.attentive_law(&w, y_t)?;
        let blind = p.inattentive_law(&w, y_t)?;
        let e: f64 = StandardNormal.sample(&mut rng);
        let truth = aware.mu() + aware.sigma() * e;
        sums[0] += crps_normal(&aware, truth);
        sums[1] += crps_normal(&blind, truth);
        sums[2] += qw_crps_normal(&aware, truth, WeightScheme::Tails);
        sums[3] += qw_crps_normal(&blind, truth, WeightScheme::Tails);
        sums[4] += qs_normal(&aware, 0.1, truth);
        sums[5] += qs_normal(&blind, 0.1, truth);
    }
    let gain = |a: f64, b: f64| 100.0 * (1.0 - a / b);
    Ok(GainSurfacePoint {
        rho,
        h,
        crps_gain_pct: gain(sums[0], sums[1]),
        qwcrps_gain_pct: gain(sums[2], sums[3]),
        qs10_gain_pct: gain(sums[4], sums[5]),
    })
}

/// CSV `rho,h,crps_gain_pct,qwcrps_gain_pct,qs10_gain_pct`.
pub fn write_gain_csv<W: Write>(points: &[GainSurfacePoint], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for p in points {
        wr.serialize(p)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::Univariate;

    fn ar(rho: f64) -> Ar1 {
        Ar1::new(rho, 1.0).unwrap()
    }

    #[test]
    fn error_moments() {
        for h in 1..6 {
            assert_eq!(ar(0.0).error_variance(h), 1.0);
        }
        assert_eq!(ar(0.7).error_variance(1), 1.0);
        assert!((ar(0.5).error_variance(2) - 1.25).abs() < 1e-15);
        assert!((ar(0.6).error_autocorr(2, 1).unwrap() - 0.6 / 1.36f64.sqrt()).abs() < 1e-15);
        assert!((ar(0.6).error_autocorr(2, 1).unwrap() - 0.514_495_755_4).abs() < 1e-9);
        assert_eq!(ar(0.0).error_autocorr(5, 2).unwrap(), 0.0);
        assert!(ar(-0.5).error_autocorr(4, 1).unwrap() < 0.0);
        assert!(ar(0.5).error_autocorr(3, 3).is_err());
        let near = ar(0.999).error_autocorr(6, 1).unwrap();
        assert!(near > 0.9 && near < 1.0);
    }

    #[test]
    fn laws_by_hand() {
        let p = ar(0.5);
        let a = p.attentive_law(&[1.0, 1.0], 2.0).unwrap();
        let b = p.inattentive_law(&[1.0, 1.0], 2.0).unwrap();
        assert!((a.variance() - 3.25).abs() < 1e-14);
        assert!((b.variance() - 2.25).abs() < 1e-14);
        assert_eq!(a.mu(), b.mu());
        assert!((a.mu() - (0.5 + 0.25) * 2.0).abs() < 1e-15);

        let q = ar(0.0);
        let w = [0.3, -1.2, 2.0];
        let a = q.attentive_law(&w, 5.0).unwrap();
        assert_eq!(a.mu(), 0.0);
        assert!((a.variance() - w.iter().map(|v| v * v).sum::<f64>()).abs() < 1e-14);
        assert_eq!(a, q.inattentive_law(&w, 5.0).unwrap());

        let one = p.attentive_law(&[1.7], 1.0).unwrap();
        assert!((one.mu() - 0.85).abs() < 1e-15 && (one.sigma() - 1.7).abs() < 1e-15);
    }

    #[test]
    fn unit_weight_simplification() {
        for &rho in &[-0.7, 0.2, 0.6, 0.9] {
            let p = ar(rho);
            for h in 1..=12 {
                let v = p.attentive_law(&vec![1.0; h], 0.0).unwrap().variance();
                let simple: f64 = (1..=h).map(|j| ((1.0 - rho.powi(j as i32)) / (1.0 - rho)).powi(2)).sum();
                assert!((v - simple).abs() < 1e-10 * simple);
            }
        }
    }

    #[test]
    fn joint_law_aggregates_to_attentive() {
        let p = ar(0.5);
        let (m, c) = p.joint_law(2, 1.0).unwrap();
        let ones = DVector::from_element(2, 1.0);
        assert!(((ones.transpose() * &c * &ones)[(0, 0)] - 3.25).abs() < 1e-14);
        assert_eq!(m[1], 0.25);
        let (_, c0) = ar(0.0).joint_law(3, 1.0).unwrap();
        assert_eq!(c0, DMatrix::identity(3, 3));
        for h in 1..6 {
            assert!((c[(1, 1)] - p.error_variance(2)).abs() < 1e-15);
            let (_, ch) = p.joint_law(h, 0.0).unwrap();
            assert!((ch[(h - 1, h - 1)] - p.error_variance(h)).abs() < 1e-15);
        }
    }

    #[test]
    fn pit_autocorr_matches_composition() {
        let p = ar(0.6);
        let inner = 0.6 * ((1.0 - 0.6f64.powi(2)) / (1.0 - 0.6f64.powi(4))).sqrt();
        let full = (6.0 / std::f64::consts::PI) * (inner / 2.0).asin();
        assert!((p.pit_autocorr(2, 1).unwrap() - full).abs() < 1e-12);
    }

    #[test]
    fn msfe_examples() {
        assert!((ar(0.0).msfe_ratio(MsfeCase::OneYear) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(ar(0.0).msfe_ratio(MsfeCase::TwoYear), 1.0);
        let v = ar(0.7).msfe_ratio(MsfeCase::OneYear);
        assert!((v - 8.29 / 14.54).abs() < 1e-14);
        assert!((ar(0.1).msfe_ratio(MsfeCase::OneYear) - 5.41 / 6.86).abs() < 1e-14);
    }

    /// The closed forms were derived for a two-period year; an exact
    /// covariance computation from the joint law is the oracle here.
    #[test]
    fn msfe_closed_form_matches_exact_moments() {
        for &rho in &[-0.5, 0.1, 0.4, 0.8] {
            let p = ar(rho);
            // stationary joint covariance of (Y_{t-2}, ..., Y_{t+4})
            let v = p.stationary_variance();
            let cov = |i: usize, j: usize| v * rho.powi(i.abs_diff(j) as i32);
            let quad = |a: &[f64; 7]| {
                let mut s = 0.0;
                for i in 0..7 {
                    for j in 0..7 {
                        s += a[i] * a[j] * cov(i, j);
                    }
                }
                s
            };
            let r2 = rho * rho;
            // error = target - forecast as coefficient vectors on y[0..7]
            let c1 = [0.0, 0.0, 0.5 - (0.5 + rho + 0.5 * r2), 1.0, 0.5, 0.0, 0.0];
            let d1 = [-0.5 * r2, -r2, 0.5 - 0.5 * r2, 1.0, 0.5, 0.0, 0.0];
            let ratio1 = quad(&c1) / quad(&d1);
            assert!((ratio1 - p.msfe_ratio(MsfeCase::OneYear)).abs() < 1e-12, "rho {rho}");
            let r4 = r2 * r2;
            let c2 = [0.0, 0.0, -(0.5 * r2 + rho * r2 + 0.5 * r4), 0.0, 0.5, 1.0, 0.5];
            let d2 = [-0.5 * r4, -r4, -0.5 * r4, 0.0, 0.5, 1.0, 0.5];
            let ratio2 = quad(&c2) / quad(&d2);
            assert!((ratio2 - p.msfe_ratio(MsfeCase::TwoYear)).abs() < 1e-12, "rho {rho}");
        }
    }

    #[test]
    fn msfe_simulation_agrees() {
        let p = ar(0.5);
        for case in [MsfeCase::OneYear, MsfeCase::TwoYear] {
            let (r, se) = p.simulate_msfe_ratio(case, 200_000, Seed(3)).unwrap();
            assert!((r - p.msfe_ratio(case)).abs() < 3.0 * se, "{case:?}: {r} ± {se}");
        }
    }

    #[test]
    fn gain_surface_zero_rho_is_zero() {
        let g = gain_surface(&[0.0], &[4], 20_000, Seed(1)).unwrap();
        assert_eq!(g[0].crps_gain_pct, 0.0);
        assert_eq!(g[0].qs10_gain_pct, 0.0);
    }

    #[test]
    fn gain_csv_header() {
        let g = [GainSurfacePoint { rho: 0.5, h: 2, crps_gain_pct: 1.0, qwcrps_gain_pct: 2.0, qs10_gain_pct: 3.0 }];
        let mut buf = Vec::new();
        write_gain_csv(&g, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "rho,h,crps_gain_pct,qwcrps_gain_pct,qs10_gain_pct\n0.5,2,1.0,2.0,3.0\n"
        );
    }
}
