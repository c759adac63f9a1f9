//! Linear maps from joint horizon paths (plus trailing observations) to
//! target-frequency quantities: year-on-year, quarter-on-quarter from
//! monthly, annual averages, and the monthly/yearly growth conversions.
//!
//! Growth rates are treated as log growth, so aggregation is additive.

use serde::{Deserialize, Serialize};

use crate::copula::JointDraws;
use crate::numeric::check_finite;
use crate::{Error, Result};

/// `z = sum_j w_j Y_{t+j} + sum_l v_l y_{t-l}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRaw")]
pub struct TransformSpec {
    forecast_weights: Vec<f64>,
    observed_terms: Vec<(usize, f64)>,
    label: String,
}

#[derive(Deserialize)]
struct SpecRaw {
    forecast_weights: Vec<f64>,
    #[serde(default)]
    observed_terms: Vec<(usize, f64)>,
    #[serde(default)]
    label: String,
}

impl TryFrom<SpecRaw> for TransformSpec {
    type Error = Error;
    fn try_from(r: SpecRaw) -> Result<Self> {
        TransformSpec::new(r.forecast_weights, r.observed_terms, r.label)
    }
}

impl TransformSpec {
    pub fn new(
        forecast_weights: Vec<f64>,
        observed_terms: Vec<(usize, f64)>,
        label: impl Into<String>,
    ) -> Result<Self> {
        if forecast_weights.is_empty() {
            return Err(Error::InvalidParameter("forecast weights must cover at least one horizon".into()));
        }
        for &w in &forecast_weights {
            check_finite("forecast weight", w)?;
        }
        for &(_, v) in &observed_terms {
            check_finite("observed weight", v)?;
        }
        if forecast_weights.iter().chain(observed_terms.iter().map(|t| &t.1)).all(|&w| w == 0.0) {
            return Err(Error::InvalidParameter("transform has no nonzero weight".into()));
        }
        Ok(TransformSpec { forecast_weights, observed_terms, label: label.into() })
    }

    pub fn forecast_weights(&self) -> &[f64] {
        &self.forecast_weights
    }

    pub fn observed_terms(&self) -> &[(usize, f64)] {
        &self.observed_terms
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn horizons(&self) -> usize {
        self.forecast_weights.len()
    }

    /// Number of trailing observations the transform reads (largest lag + 1).
    pub fn history_needed(&self) -> usize {
        self.observed_terms.iter().map(|&(l, _)| l + 1).max().unwrap_or(0)
    }

    /// Same transform with the weight vector zero-padded to `h` horizons.
    pub fn padded(&self, h: usize) -> Result<Self> {
        let last = self.forecast_weights.iter().rposition(|&w| w != 0.0).map_or(0, |i| i + 1);
        if h < last {
            return Err(Error::InvalidParameter(format!(
                "cannot shrink transform '{}' to {h} horizons; weights reach horizon {last}",
                self.label
            )));
        }
        let mut w = self.forecast_weights.clone();
        w.resize(h, 0.0);
        w.truncate(h);
        Ok(TransformSpec { forecast_weights: w, ..self.clone() })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Observed-term contribution `sum_l v_l y_{t-l}`.
    pub fn observed_part(&self, hist: &ObservedHistory) -> Result<f64> {
        self.observed_terms.iter().map(|&(l, v)| Ok(v * hist.lag(l)?)).sum()
    }

    /// Transform of one path of horizon values.
    pub fn apply_path(&self, path: &[f64], hist: &ObservedHistory) -> Result<f64> {
        if path.len() != self.horizons() {
            return Err(Error::InvalidParameter(format!(
                "path has {} horizons, transform '{}' expects {}",
                path.len(),
                self.label,
                self.horizons()
            )));
        }
        let f: f64 = path.iter().zip(&self.forecast_weights).map(|(y, w)| y * w).sum();
        Ok(f + self.observed_part(hist)?)
    }
}

/// Realised history at the origin, most recent value last.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObservedHistory {
    values: Vec<f64>,
}

impl ObservedHistory {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for &v in &values {
            check_finite("history value", v)?;
        }
        Ok(ObservedHistory { values })
    }

    pub fn empty() -> Self {
        ObservedHistory::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `y_{t-l}`.
    pub fn lag(&self, l: usize) -> Result<f64> {
        let n = self.values.len();
        if l >= n {
            return Err(Error::Data(format!("observed history too short: lag {l} needs {} values, have {n}", l + 1)));
        }
        Ok(self.values[n - 1 - l])
    }
}

/// Apply `spec` to every joint path.
pub fn apply_transform(draws: &JointDraws, spec: &TransformSpec, hist: &ObservedHistory) -> Result<Vec<f64>> {
    if draws.horizons() != spec.horizons() {
        return Err(Error::InvalidParameter(format!(
            "transform '{}' has {} weights but draws span {} horizons",
            spec.label,
            spec.horizons(),
            draws.horizons()
        )));
    }
    let obs = spec.observed_part(hist)?;
    let w = spec.forecast_weights();
    Ok((0..draws.draws()).map(|s| draws.row(s).iter().zip(w).map(|(y, w)| y * w).sum::<f64>() + obs).collect())
}

/// Quarter-on-quarter growth from monthly growth (Mariano–Murasawa):
/// weights `(0, 1/3, 2/3, 1, 2/3, 1/3)` on horizons 1..6.
pub fn spec_qoq_from_mom() -> TransformSpec {
    TransformSpec::new(vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 2.0 / 3.0, 1.0 / 3.0], vec![], "qoq")
        .expect("static weights")
}

/// Calendar-year average growth for year `year` ahead, built from growth
/// rates at `periods` per year, with the origin in the last period of a
/// year. Forecast horizons cover `1..=periods * year`; the first year also
/// loads on the `periods - 1` latest observations.
///
/// The weight on `m_{t+j}` is the number of within-year positions whose
/// `periods`-term window contains `j`, divided by `periods`.
pub fn spec_annual_average(periods: usize, year: usize) -> Result<TransformSpec> {
    if periods < 2 || year == 0 {
        return Err(Error::InvalidParameter(format!(
            "annual average needs periods >= 2 and year >= 1, got {periods}, {year}"
        )));
    }
    let (p, k) = (periods as i64, year as i64);
    let coef = |j: i64| -> f64 {
        let hi = (p * k).min(j + p - 1);
        let lo = (p * (k - 1) + 1).max(j);
        ((hi - lo + 1).max(0)) as f64 / p as f64
    };
    let weights: Vec<f64> = (1..=p * k).map(coef).collect();
    let observed: Vec<(usize, f64)> = (0..p - 1).map(|l| (l as usize, coef(-l))).filter(|&(_, w)| w != 0.0).collect();
    TransformSpec::new(weights, observed, format!("annual-average-y{year}"))
}

/// One-year-ahead annual average from quarterly growth. Only defined at a
/// Q4 origin; other origins need a custom spec.
pub fn spec_annual_avg_from_qoq(origin_is_q4: bool) -> Result<TransformSpec> {
    if !origin_is_q4 {
        return Err(Error::Unsupported(
            "annual-average weights are only generated for fourth-quarter origins; supply a custom transform".into(),
        ));
    }
    Ok(spec_annual_average(4, 1)?.with_label("annual-average"))
}

/// Year-on-year growth `year` years ahead: ones on horizons
/// `periods*(year-1)+1 ..= periods*year`.
pub fn spec_yoy(periods: usize, year: usize) -> Result<TransformSpec> {
    if periods == 0 || year == 0 {
        return Err(Error::InvalidParameter("year-on-year needs periods >= 1 and year >= 1".into()));
    }
    let mut w = vec![0.0; periods * year];
    for v in &mut w[periods * (year - 1)..] {
        *v = 1.0;
    }
    TransformSpec::new(w, vec![], format!("yoy-y{year}"))
}

/// Four-quarter year-on-year growth: weights `(1, 1, 1, 1)`.
pub fn spec_yoy_from_qoq() -> TransformSpec {
    spec_yoy(4, 1).expect("static weights").with_label("yoy")
}

const WINDOW: usize = 12;

/// Recover month-on-month paths from year-on-year paths through
/// `yoy_j = sum of mom over months j-11..=j`, using 11 trailing observed
/// monthly rates (most recent last). Later horizons reuse the recovered
/// months of the same path.
pub fn yoy_to_mom(yoy: &JointDraws, trailing_mom: &[f64]) -> Result<JointDraws> {
    check_trailing(trailing_mom)?;
    let h = yoy.horizons();
    let mut out = Vec::with_capacity(yoy.values().len());
    let mut path = Vec::with_capacity(WINDOW - 1 + h);
    for s in 0..yoy.draws() {
        path.clear();
        path.extend_from_slice(trailing_mom);
        for (j, &y) in yoy.row(s).iter().enumerate() {
            let others: f64 = path[j..j + WINDOW - 1].iter().sum();
            path.push(y - others);
        }
        out.extend_from_slice(&path[WINDOW - 1..]);
    }
    JointDraws::new(h, out)
}

/// Rolling 12-month sums of monthly paths, prefixed by 11 trailing months.
pub fn mom_to_yoy(mom: &JointDraws, trailing_mom: &[f64]) -> Result<JointDraws> {
    check_trailing(trailing_mom)?;
    let h = mom.horizons();
    let mut out = Vec::with_capacity(mom.values().len());
    let mut path = Vec::with_capacity(WINDOW - 1 + h);
    for s in 0..mom.draws() {
        path.clear();
        path.extend_from_slice(trailing_mom);
        path.extend_from_slice(mom.row(s));
        for j in 0..h {
            out.push(path[j..j + WINDOW].iter().sum());
        }
    }
    JointDraws::new(h, out)
}

fn check_trailing(trailing: &[f64]) -> Result<()> {
    if trailing.len() != WINDOW - 1 {
        return Err(Error::Data(format!("need {} trailing monthly rates, got {}", WINDOW - 1, trailing.len())));
    }
    for &v in trailing {
        check_finite("trailing rate", v)?;
    }
    Ok(())
}

/// Integration order of the (log-)level series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    I1,
    I2,
}

/// Cumulative growth between `t` and `t + h`: `Y_{t+h} - Y_t` for I(1),
/// and `Y_{t+h} - Y_t - h (Y_t - Y_{t-1})` for I(2).
pub fn cum_growth(levels: &[f64], t: usize, h: usize, order: Order) -> Result<f64> {
    if t + h >= levels.len() {
        return Err(Error::Domain(format!("index t+h = {} beyond series of length {}", t + h, levels.len())));
    }
    let g = levels[t + h] - levels[t];
    match order {
        Order::I1 => Ok(g),
        Order::I2 => {
            if t == 0 {
                return Err(Error::Domain("I(2) growth needs the change at t, undefined at t = 0".into()));
            }
            Ok(g - h as f64 * (levels[t] - levels[t - 1]))
        }
    }
}

/// Average monthly level paths within each quarter. Horizons must come in
/// complete groups of three.
pub fn quarterly_avg_from_monthly_levels(levels: &JointDraws) -> Result<JointDraws> {
    let h = levels.horizons();
    if !h.is_multiple_of(3) {
        return Err(Error::Data(format!("{h} monthly horizons do not form complete quarters")));
    }
    let q = h / 3;
    let mut out = Vec::with_capacity(levels.draws() * q);
    for s in 0..levels.draws() {
        let row = levels.row(s);
        out.extend(row.chunks(3).map(|c| c.iter().sum::<f64>() / 3.0));
    }
    JointDraws::new(q, out)
}
