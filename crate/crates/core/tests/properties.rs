use horizon_fuse::analytic::{Ar1, MsfeCase};
use horizon_fuse::copula::{fit_copula, sample_joint, CorrelationMatrix, PitPanel, RankMethod};
use horizon_fuse::dists::{Marginal, Normal, QuantileGrid, SkewShape, Univariate};
use horizon_fuse::models::fit_direct_ols;
use horizon_fuse::numeric::{self, norm_cdf};
use horizon_fuse::rng::Seed;
use horizon_fuse::scoring::{crps_normal, epa_test, quantile_score, qw_crps_on_grid, WeightScheme};
use horizon_fuse::transform::{apply_transform, ObservedHistory, TransformSpec};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

/// Correlation matrix from a random factor loading: every off-diagonal
/// entry is nonnegative when `nonneg` is set.
fn random_corr(h: usize, seed: u64, nonneg: bool) -> CorrelationMatrix {
    let mut rng = Seed(seed).rng();
    let a: Vec<f64> = (0..h * 2)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            if nonneg {
                v.abs()
            } else {
                v
            }
        })
        .collect();
    let mut c = vec![0.0; h * h];
    for i in 0..h {
        for j in 0..h {
            c[i * h + j] = a[i * 2] * a[j * 2] + a[i * 2 + 1] * a[j * 2 + 1] + if i == j { 0.3 } else { 0.0 };
        }
    }
    let e = (0..h * h).map(|k| c[k] / (c[(k / h) * (h + 1)] * c[(k % h) * (h + 1)]).sqrt()).collect();
    CorrelationMatrix::new(h, e).unwrap()
}

fn normals(mus: &[f64], sds: &[f64]) -> Vec<Marginal> {
    mus.iter().zip(sds).map(|(&m, &s)| Marginal::Normal(Normal::new(m, s).unwrap())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn skew_t_quantile_inverts_cdf(
        xi in -3.0f64..3.0,
        omega in 0.2f64..3.0,
        alpha in -6.0f64..6.0,
        nu in prop::option::of(3.0f64..30.0),
        p in 0.001f64..0.999,
    ) {
        let d = SkewShape::new(xi, omega, alpha, nu).unwrap();
        let x = d.quantile(p).unwrap();
        prop_assert!((d.cdf(x).unwrap() - p).abs() < 1e-7);
    }

    #[test]
    fn calibration_hits_target_moments(alpha in -8.0f64..8.0, nu in prop::option::of(4.5f64..40.0), sd in 0.1f64..3.0) {
        let d = SkewShape::calibrated(alpha, nu, 0.0, sd).unwrap();
        prop_assert!(d.mean().abs() < 1e-8);
        prop_assert!((d.variance().sqrt() - sd).abs() < 1e-8);
    }

    #[test]
    fn repair_crossing_sorts_and_keeps_values(raw in prop::collection::vec(-10.0f64..10.0, 3..20)) {
        let n = raw.len();
        let levels: Vec<f64> = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
        let g = QuantileGrid::repair_crossing(levels, raw.clone()).unwrap();
        prop_assert!(g.values().windows(2).all(|w| w[0] <= w[1]));
        let mut a = raw;
        a.sort_by(f64::total_cmp);
        prop_assert_eq!(a.as_slice(), g.values());
    }

    #[test]
    fn copula_fit_ignores_monotone_column_transforms(seed in 0u64..1000, scale in 0.1f64..5.0) {
        let mut rng = Seed(seed).rng();
        let n = 80;
        let mut vals = Vec::with_capacity(3 * n);
        for _ in 0..n {
            let f: f64 = rng.sample(StandardNormal);
            for _ in 0..3 {
                let e: f64 = rng.sample(StandardNormal);
                vals.push(norm_cdf(0.8 * f + 0.6 * e));
            }
        }
        let base = fit_copula(&PitPanel::from_rows((0..n as i64).collect(), 3, &vals).unwrap(), RankMethod::Spearman).unwrap();
        // Strictly increasing map of column 1 that stays inside (0, 1).
        let warped: Vec<f64> = vals
            .iter()
            .enumerate()
            .map(|(k, &u)| if k % 3 == 1 { u.powf(scale) } else { u })
            .collect();
        let w = fit_copula(&PitPanel::from_rows((0..n as i64).collect(), 3, &warped).unwrap(), RankMethod::Spearman).unwrap();
        for (a, b) in base.entries().iter().zip(w.entries()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transformed_mean_matches_transform_of_means(
        seed in 0u64..1000,
        mus in prop::collection::vec(-3.0f64..3.0, 4),
        sds in prop::collection::vec(0.2f64..2.0, 4),
        w in prop::collection::vec(-1.0f64..2.0, 4),
    ) {
        let r = random_corr(4, seed, false);
        let s = 20_000;
        let d = sample_joint(&normals(&mus, &sds), &r, s, Seed(seed).derive("mean", 0)).unwrap();
        let spec = TransformSpec::new(w.clone(), vec![(0, 0.5)], "t").unwrap();
        let hist = ObservedHistory::new(vec![1.5]).unwrap();
        let z = apply_transform(&d, &spec, &hist).unwrap();
        let want = spec.apply_path(&mus, &hist).unwrap();
        let got = numeric::mean(&z);
        let se = numeric::variance(&z).sqrt() / (s as f64).sqrt();
        prop_assert!((got - want).abs() < 3.0 * se + 1e-12, "mean {got} vs {want}, se {se}");
    }

    #[test]
    fn positive_dependence_widens_positive_aggregates(
        seed in 0u64..1000,
        sds in prop::collection::vec(0.2f64..2.0, 4),
        w in prop::collection::vec(0.1f64..2.0, 4),
    ) {
        let r = random_corr(4, seed, true);
        let s = 20_000;
        let m = normals(&[0.0; 4], &sds);
        let spec = TransformSpec::new(w, vec![], "t").unwrap();
        let hist = ObservedHistory::empty();
        let zc = apply_transform(&sample_joint(&m, &r, s, Seed(seed)).unwrap(), &spec, &hist).unwrap();
        let zi = apply_transform(&sample_joint(&m, &CorrelationMatrix::identity(4), s, Seed(seed)).unwrap(), &spec, &hist).unwrap();
        let (vc, vi) = (numeric::variance(&zc), numeric::variance(&zi));
        // Sample variance of a Normal has sd sigma^2 sqrt(2/(S-1)).
        let se = ((vc * vc + vi * vi) * 2.0 / (s as f64 - 1.0)).sqrt();
        prop_assert!(vc - vi > -3.0 * se, "copula {vc} vs identity {vi}");
    }

    #[test]
    fn attentive_variance_dominates(rho in 0.0f64..0.99, w in prop::collection::vec(0.0f64..2.0, 2..12), y in -3.0f64..3.0) {
        let p = Ar1::new(rho, 1.0).unwrap();
        let a = p.attentive_law(&w, y).unwrap();
        let b = p.inattentive_law(&w, y).unwrap();
        prop_assert!(a.variance() >= b.variance() - 1e-12);
        prop_assert!((a.mu() - b.mu()).abs() < 1e-12);
        let positive = w.iter().filter(|&&v| v > 0.0).count();
        if rho > 0.01 && positive >= 2 && w.iter().all(|&v| v > 0.01) {
            prop_assert!(a.variance() > b.variance());
        }
    }

    #[test]
    fn joint_law_aggregates_exactly(rho in -0.95f64..0.95, w in prop::collection::vec(-2.0f64..2.0, 1..12), y in -3.0f64..3.0) {
        let p = Ar1::new(rho, 0.7).unwrap();
        let (mu, cov) = p.joint_law(w.len(), y).unwrap();
        let wv = nalgebra::DVector::from_vec(w.clone());
        let a = p.attentive_law(&w, y).unwrap();
        prop_assert!((wv.dot(&mu) - a.mu()).abs() < 1e-10);
        prop_assert!(((&wv.transpose() * &cov * &wv)[0] - a.variance()).abs() < 1e-10 * (1.0 + a.variance()));
    }

    #[test]
    fn ols_forecast_is_affine_in_origin(seed in 0u64..500, a in -3.0f64..3.0, b in -3.0f64..3.0, h in 1usize..6) {
        let mut rng = Seed(seed).rng();
        let mut y = vec![0.0f64];
        for _ in 0..80 {
            let e: f64 = rng.sample(StandardNormal);
            y.push(0.5 * y.last().unwrap() + e);
        }
        let f = fit_direct_ols(&y, 6).unwrap();
        let fh = &f.horizons[h - 1];
        let (pa, pb) = (f.predict(a, h).unwrap(), f.predict(b, h).unwrap());
        prop_assert!((pa.mu() - (fh.tau + fh.beta * a)).abs() < 1e-14 * (1.0 + pa.mu().abs()) + 1e-14);
        if (a - b).abs() > 1e-3 {
            prop_assert!(((pa.mu() - pb.mu()) / (a - b) - fh.beta).abs() < 1e-9);
        }
        prop_assert_eq!(pa.sigma(), pb.sigma());
    }

    #[test]
    fn quantile_score_is_convex_in_prediction(q in 0.01f64..0.99, y in -5.0f64..5.0, a in -5.0f64..5.0, b in -5.0f64..5.0, t in 0.0f64..1.0) {
        let m = t * a + (1.0 - t) * b;
        let lhs = quantile_score(q, m, y);
        let rhs = t * quantile_score(q, a, y) + (1.0 - t) * quantile_score(q, b, y);
        prop_assert!(lhs <= rhs + 1e-12);
    }

    #[test]
    fn epa_ignores_common_shift(seed in 0u64..500, c in -50.0f64..50.0, bw in 0usize..5) {
        let mut rng = Seed(seed).rng();
        let a: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..2.0)).collect();
        let b: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..2.2)).collect();
        let r0 = epa_test(&a, &b, bw).unwrap();
        let a2: Vec<f64> = a.iter().map(|v| v + c).collect();
        let b2: Vec<f64> = b.iter().map(|v| v + c).collect();
        let r1 = epa_test(&a2, &b2, bw).unwrap();
        prop_assert!((r0.statistic - r1.statistic).abs() < 1e-6 * (1.0 + r0.statistic.abs()));
    }
}

#[test]
fn msfe_one_year_ratio_below_one_on_dense_grid() {
    for i in 1..2000 {
        let r = -1.0 + i as f64 / 1000.0;
        let m = Ar1::new(r, 1.0).unwrap().msfe_ratio(MsfeCase::OneYear);
        assert!(m < 1.0, "rho {r}: {m}");
    }
}

fn refit_from_samples(marg: &[Marginal], r: &CorrelationMatrix, n: usize, seed: Seed) -> CorrelationMatrix {
    let h = marg.len();
    let d = sample_joint(marg, r, n, seed).unwrap();
    let mut pits = Vec::with_capacity(h * n);
    for s in 0..n {
        for (j, m) in marg.iter().enumerate() {
            pits.push(m.cdf(d.row(s)[j]).unwrap());
        }
    }
    fit_copula(&PitPanel::from_rows((0..n as i64).collect(), h, &pits).unwrap(), RankMethod::Spearman).unwrap()
}

#[test]
fn sampled_pits_refit_recover_correlation() {
    let n = 1000;
    let pair = CorrelationMatrix::new(2, vec![1.0, 0.8, 0.8, 1.0]).unwrap();
    for k in 0..10 {
        let fit = refit_from_samples(&normals(&[1.0, -1.0], &[0.5, 2.0]), &pair, n, Seed(20 + k));
        assert!((fit.get(0, 1) - 0.8).abs() < 0.05, "seed {k}: {}", fit.get(0, 1));
    }
    // Arbitrary R: each entry within 4 standard errors (1 - r^2) / sqrt(T).
    let r = random_corr(4, 9, false);
    let fit = refit_from_samples(&normals(&[1.0, -1.0, 0.0, 2.0], &[0.5, 1.0, 2.0, 0.7]), &r, n, Seed(10));
    for i in 0..4 {
        for j in 0..4 {
            let se = (1.0 - r.get(i, j).powi(2)) / (n as f64).sqrt();
            assert!(
                (fit.get(i, j) - r.get(i, j)).abs() <= 4.0 * se + 1e-12,
                "({i},{j}): {} vs {}",
                fit.get(i, j),
                r.get(i, j)
            );
        }
    }
}

#[test]
fn unit_weight_qw_crps_converges_to_crps() {
    let d = Normal::new(0.3, 1.2).unwrap();
    let q = |t: f64| d.quantile(t).unwrap();
    // The kink of the pinball loss at Q(tau) = y makes the error at a single
    // y oscillate, so average over a spread of outcomes.
    let ys: Vec<f64> = (0..41).map(|i| -3.0 + 0.15 * i as f64).collect();
    let errs: Vec<f64> = [24, 49, 99, 199, 399]
        .iter()
        .map(|&n| {
            ys.iter()
                .map(|&y| (qw_crps_on_grid(q, y, WeightScheme::Uniform, n) - crps_normal(&d, y)).abs())
                .sum::<f64>()
        })
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] <= 0.55 * w[0], "errors {errs:?}");
    }
}

#[test]
fn epa_size_under_true_null() {
    // Two forecasters drawing fresh ensembles from the same predictive law.
    let reps = 1000;
    let n = 50;
    let mut rejections = 0;
    for k in 0..reps {
        let mut rng = Seed(77).stream(k);
        let mut la = Vec::with_capacity(n);
        let mut lb = Vec::with_capacity(n);
        let mut y = 0.0f64;
        for _ in 0..n {
            let mu = 0.7 * y;
            let e: f64 = rng.sample(StandardNormal);
            y = mu + e;
            for losses in [&mut la, &mut lb] {
                let mut draws: Vec<f64> = (0..200).map(|_| mu + rng.sample::<f64, _>(StandardNormal)).collect();
                draws.sort_by(f64::total_cmp);
                losses.push(horizon_fuse::scoring::qw_crps_sorted_draws(&draws, y, WeightScheme::Tails));
            }
        }
        if epa_test(&la, &lb, 0).unwrap().p_value < 0.05 {
            rejections += 1;
        }
    }
    let f = rejections as f64 / reps as f64;
    assert!((f - 0.05).abs() <= 0.02, "rejection frequency {f}");
}

#[test]
fn quantile_score_minimized_at_sample_quantile() {
    let mut rng = Seed(31).rng();
    let mut y: Vec<f64> = (0..2001).map(|_| rng.sample::<f64, _>(StandardNormal).exp()).collect();
    y.sort_by(f64::total_cmp);
    let step = 0.005;
    for q in [0.05, 0.1, 0.5, 0.9] {
        let grid: Vec<f64> = (0..2000).map(|i| i as f64 * step).collect();
        let loss = |p: f64| y.iter().map(|&v| quantile_score(q, p, v)).sum::<f64>();
        let best = grid.iter().copied().min_by(|a, b| loss(*a).total_cmp(&loss(*b))).unwrap();
        let target = numeric::sorted_quantile(&y, q);
        assert!((best - target).abs() <= step, "q {q}: minimizer {best}, sample quantile {target}");
    }
}
