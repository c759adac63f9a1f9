//! Gaussian copula: estimation of the cross-horizon correlation matrix from a
//! panel of realised PITs, repair to a valid correlation matrix, and joint
//! sampling through the Cholesky factor.

use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dists::{Marginal, Univariate};
use crate::numeric::{self, average_ranks, norm_cdf, norm_ppf, pearson};
use crate::rng::Seed;
use crate::{Error, Result};

/// Off-diagonal entries are kept strictly inside (-1, 1) by this margin.
pub const PERFECT_CORR_SHRINK: f64 = 1e-8;
const CHOLESKY_JITTER: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;
const REPAIR_TOL: f64 = 1e-10;
const REPAIR_MAX_SWEEPS: usize = 200;
/// Draws per independently seeded block in [`sample_joint`].
pub const SAMPLE_BLOCK: usize = 512;

/// A validated correlation matrix, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CorrRaw")]
pub struct CorrelationMatrix {
    dim: usize,
    entries: Vec<f64>,
}

#[derive(Deserialize)]
struct CorrRaw {
    dim: usize,
    entries: Vec<f64>,
}

impl TryFrom<CorrRaw> for CorrelationMatrix {
    type Error = Error;
    fn try_from(r: CorrRaw) -> Result<Self> {
        CorrelationMatrix::new(r.dim, r.entries)
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

impl CorrelationMatrix {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("correlation matrix must have dim >= 1".into()));
        }
        if entries.len() != dim * dim {
            return Err(Error::InvalidParameter(format!(
                "expected {} entries for dim {dim}, got {}",
                dim * dim,
                entries.len()
            )));
        }
        for i in 0..dim {
            if entries[i * dim + i] != 1.0 {
                return Err(Error::InvalidParameter(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..dim {
                let v = entries[i * dim + j];
                if !v.is_finite() || v.abs() > 1.0 {
                    return Err(Error::InvalidParameter(format!("entry ({i},{j}) = {v} outside [-1, 1]")));
                }
                if (v - entries[j * dim + i]).abs() > 1e-12 {
                    return Err(Error::InvalidParameter(format!("matrix not symmetric at ({i},{j})")));
                }
            }
        }
        let m = DMatrix::from_row_slice(dim, dim, &entries);
        let lmin = min_eigenvalue(&m);
        if lmin < -PSD_TOL {
            return Err(Error::InvalidParameter(format!(
                "matrix is not positive semi-definite (min eigenvalue {lmin:e})"
            )));
        }
        Ok(CorrelationMatrix { dim, entries })
    }

    pub fn identity(dim: usize) -> Self {
        let mut entries = vec![0.0; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = 1.0;
        }
        CorrelationMatrix { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.entries)
    }

    /// Leading `k x k` block (horizons `1..=k`).
    pub fn leading(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.dim {
            return Err(Error::InvalidParameter(format!("leading block size {k} outside 1..={}", self.dim)));
        }
        let mut entries = Vec::with_capacity(k * k);
        for i in 0..k {
            entries.extend_from_slice(&self.entries[i * self.dim..i * self.dim + k]);
        }
        Ok(CorrelationMatrix { dim: k, entries })
    }

    /// Determinant as the product of squared Cholesky pivots; 1 under
    /// independence and towards 0 under strong cross-horizon dependence.
    pub fn determinant(&self) -> Result<f64> {
        let p = cholesky(self)?;
        Ok((0..self.dim).map(|i| p[(i, i)] * p[(i, i)]).product())
    }
}

/// Project a symmetric matrix onto the set of correlation matrices (Higham's
/// alternating projections with Dykstra's correction).
///
/// A matrix that already has unit diagonal and is PSD (min eigenvalue at
/// least `-1e-10`) is returned unchanged.
pub fn nearest_correlation(dim: usize, raw: &[f64]) -> Result<CorrelationMatrix> {
    if raw.len() != dim * dim || dim == 0 {
        return Err(Error::InvalidParameter("raw matrix has the wrong size".into()));
    }
    for i in 0..dim {
        for j in 0..i {
            let (a, b) = (raw[i * dim + j], raw[j * dim + i]);
            if !a.is_finite() || (a - b).abs() > 1e-12 * (1.0 + a.abs()) {
                return Err(Error::InvalidParameter(format!("raw matrix not symmetric at ({i},{j})")));
            }
        }
    }
    if let Ok(ok) = CorrelationMatrix::new(dim, raw.to_vec()) {
        return Ok(ok);
    }

    let a = DMatrix::from_row_slice(dim, dim, raw);
    let mut y = a.clone();
    let mut correction = DMatrix::<f64>::zeros(dim, dim);
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < REPAIR_MAX_SWEEPS {
        sweeps += 1;
        let r = &y - &correction;
        let x = project_psd(&r);
        correction = &x - &r;
        let mut next = x.clone();
        for i in 0..dim {
            next[(i, i)] = 1.0;
        }
        residual = (&next - &y).norm() / next.norm().max(1.0);
        let gap = (&next - &x).norm() / next.norm().max(1.0);
        y = next;
        if residual < REPAIR_TOL && gap < REPAIR_TOL.sqrt() {
            break;
        }
    }
    let best = finish_correlation(&y);
    if residual >= REPAIR_TOL {
        return Err(Error::NonConvergence {
            method: "nearest correlation",
            iterations: sweeps,
            residual,
            best: best.as_slice().to_vec(),
        });
    }
    let entries: Vec<f64> = best.transpose().as_slice().to_vec();
    CorrelationMatrix::new(dim, entries)
}

fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = 0.5 * (m + m.transpose());
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&clipped) * q.transpose()
}

/// Last PSD projection followed by diagonal rescaling, so the result is
/// exactly symmetric with unit diagonal.
fn finish_correlation(y: &DMatrix<f64>) -> DMatrix<f64> {
    let x = project_psd(y);
    let n = x.nrows();
    let d: Vec<f64> = (0..n).map(|i| x[(i, i)].max(f64::MIN_POSITIVE).sqrt()).collect();
    let mut out = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = 1.0;
        for j in 0..i {
            let v = (x[(i, j)] / (d[i] * d[j])).clamp(-1.0, 1.0);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Lower Cholesky factor `P` with `P P' = R`. If the factorisation fails
/// (a zero or negative pivot on a singular PSD matrix) it is retried once
/// with `1e-10 I` added.
pub fn cholesky(r: &CorrelationMatrix) -> Result<DMatrix<f64>> {
    let m = r.to_matrix();
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.l());
    }
    let jittered = m + DMatrix::<f64>::identity(r.dim, r.dim) * CHOLESKY_JITTER;
    jittered.cholesky().map(|c| c.l()).ok_or_else(|| Error::Numerical("Cholesky pivot failure after jitter".into()))
}

/// Pearson correlation of PITs implied by a Gaussian copula correlation `r`.
pub fn pit_corr_theoretical(r: f64) -> f64 {
    (6.0 / std::f64::consts::PI) * (0.5 * r.clamp(-1.0, 1.0)).asin()
}

/// Inverse of [`pit_corr_theoretical`]: Gaussian correlation from a rank
/// (Spearman) correlation.
pub fn gaussian_from_spearman(rho_s: f64) -> f64 {
    2.0 * (std::f64::consts::PI * rho_s / 6.0).sin()
}

/// T forecast origins by H horizons of realised PITs; `None` marks a
/// missing cell (e.g. a long horizon not yet realised).
#[derive(Debug, Clone, PartialEq)]
pub struct PitPanel {
    origins: Vec<i64>,
    horizons: usize,
    cells: Vec<Option<f64>>,
}

impl PitPanel {
    pub fn new(origins: Vec<i64>, horizons: usize, cells: Vec<Option<f64>>) -> Result<Self> {
        if horizons == 0 {
            return Err(Error::InvalidParameter("PIT panel needs at least one horizon".into()));
        }
        if cells.len() != origins.len() * horizons {
            return Err(Error::InvalidParameter(format!(
                "PIT panel has {} cells, expected {} x {}",
                cells.len(),
                origins.len(),
                horizons
            )));
        }
        for (k, c) in cells.iter().enumerate() {
            if let Some(u) = c {
                if !(0.0..=1.0).contains(u) {
                    return Err(Error::Domain(format!(
                        "PIT {u} at origin {} horizon h{} outside [0, 1]",
                        origins[k / horizons],
                        k % horizons + 1
                    )));
                }
            }
        }
        Ok(PitPanel { origins, horizons, cells })
    }

    /// Rectangular panel without missing cells from row-major values.
    pub fn from_rows(origins: Vec<i64>, horizons: usize, values: &[f64]) -> Result<Self> {
        Self::new(origins, horizons, values.iter().map(|&u| Some(u)).collect())
    }

    pub fn origins(&self) -> &[i64] {
        &self.origins
    }

    pub fn horizons(&self) -> usize {
        self.horizons
    }

    pub fn rows(&self) -> usize {
        self.origins.len()
    }

    pub fn get(&self, row: usize, h: usize) -> Option<f64> {
        self.cells[row * self.horizons + h]
    }

    pub fn column(&self, h: usize) -> Vec<Option<f64>> {
        (0..self.rows()).map(|t| self.get(t, h)).collect()
    }

    /// CSV with header `origin,h1,...,hH`; empty cells are missing.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["origin".to_string()];
        header.extend((1..=self.horizons).map(|h| format!("h{h}")));
        wr.write_record(&header)?;
        for t in 0..self.rows() {
            let mut rec = vec![self.origins[t].to_string()];
            rec.extend((0..self.horizons).map(|h| self.get(t, h).map_or(String::new(), |u| format!("{u}"))));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let horizons = header.len().saturating_sub(1);
        if header.get(0) != Some("origin") || horizons == 0 {
            return Err(Error::Data("PIT panel header must be origin,h1,...,hH".into()));
        }
        for (k, name) in header.iter().skip(1).enumerate() {
            if name != format!("h{}", k + 1) {
                return Err(Error::Data(format!("unexpected PIT panel column '{name}'")));
            }
        }
        let mut origins = Vec::new();
        let mut cells = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let o = rec[0]
                .trim()
                .parse::<i64>()
                .map_err(|_| Error::Data(format!("row {}: bad origin '{}'", line + 1, &rec[0])))?;
            origins.push(o);
            for h in 0..horizons {
                let s = rec.get(h + 1).unwrap_or("").trim();
                if s.is_empty() {
                    cells.push(None);
                } else {
                    let u =
                        s.parse::<f64>().map_err(|_| Error::Data(format!("origin {o} h{}: bad PIT '{s}'", h + 1)))?;
                    cells.push(Some(u));
                }
            }
        }
        Self::new(origins, horizons, cells)
    }
}

/// How pairwise dependence is measured on the PIT panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    /// Spearman correlation mapped through `2 sin(pi rho / 6)`.
    #[default]
    Spearman,
    /// Pearson correlation of the normal scores `Phi^{-1}(u)`.
    NormalScores,
}

const MIN_PAIRS: usize = 3;

/// Estimate the copula correlation matrix from a PIT panel, using all
/// pairwise-complete rows for each entry, then repair it to a valid
/// correlation matrix.
pub fn fit_copula(panel: &PitPanel, method: RankMethod) -> Result<CorrelationMatrix> {
    let h = panel.horizons();
    for j in 0..h {
        let n = panel.column(j).iter().filter(|c| c.is_some()).count();
        if n < MIN_PAIRS {
            return Err(Error::Estimation(format!(
                "horizon h{} has {n} realised PITs; at least {MIN_PAIRS} are needed",
                j + 1
            )));
        }
    }
    let mut raw = vec![0.0; h * h];
    for i in 0..h {
        raw[i * h + i] = 1.0;
        for j in 0..i {
            let (a, b): (Vec<f64>, Vec<f64>) =
                (0..panel.rows()).filter_map(|t| Some((panel.get(t, i)?, panel.get(t, j)?))).unzip();
            if a.len() < MIN_PAIRS {
                return Err(Error::Estimation(format!(
                    "horizons h{} and h{} share only {} realised PITs",
                    j + 1,
                    i + 1,
                    a.len()
                )));
            }
            let r = match method {
                RankMethod::Spearman => pearson(&average_ranks(&a), &average_ranks(&b)).map(gaussian_from_spearman),
                RankMethod::NormalScores => {
                    let score = |u: &f64| norm_ppf(u.clamp(1e-12, 1.0 - 1e-12));
                    let za: Vec<f64> = a.iter().map(score).collect();
                    let zb: Vec<f64> = b.iter().map(score).collect();
                    pearson(&za, &zb)
                }
            }
            .ok_or_else(|| {
                Error::Estimation(format!("PITs of h{} or h{} are constant; correlation undefined", j + 1, i + 1))
            })?;
            let r = r.clamp(-1.0 + PERFECT_CORR_SHRINK, 1.0 - PERFECT_CORR_SHRINK);
            raw[i * h + j] = r;
            raw[j * h + i] = r;
        }
    }
    nearest_correlation(h, &raw)
}

/// `S x H` joint draws, stored draw-major.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDraws {
    horizons: usize,
    values: Vec<f64>,
}

impl JointDraws {
    pub fn new(horizons: usize, values: Vec<f64>) -> Result<Self> {
        if horizons == 0 || !values.len().is_multiple_of(horizons) {
            return Err(Error::InvalidParameter("joint draws are not a full S x H array".into()));
        }
        Ok(JointDraws { horizons, values })
    }

    pub fn horizons(&self) -> usize {
        self.horizons
    }

    pub fn draws(&self) -> usize {
        self.values.len() / self.horizons
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.horizons..(s + 1) * self.horizons]
    }

    pub fn column(&self, h: usize) -> Vec<f64> {
        self.values.iter().skip(h).step_by(self.horizons).copied().collect()
    }
}

/// Copula uniforms: `U = Phi(P X)` for iid standard normal `X`, clamped to
/// `[1e-12, 1 - 1e-12]`. Draws are generated in blocks of
/// [`SAMPLE_BLOCK`], each from its own sub-stream of `seed`, so the output
/// does not depend on the number of worker threads.
pub fn sample_uniforms(r: &CorrelationMatrix, s: usize, seed: Seed) -> Result<JointDraws> {
    if s == 0 {
        return Err(Error::InvalidParameter("draw count must be >= 1".into()));
    }
    let h = r.dim();
    let p = cholesky(r)?;
    let blocks = s.div_ceil(SAMPLE_BLOCK);
    let parts: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let n = SAMPLE_BLOCK.min(s - b * SAMPLE_BLOCK);
            let mut rng = seed.stream(b as u64);
            let mut out = vec![0.0; n * h];
            let mut x = vec![0.0; h];
            for d in 0..n {
                for v in x.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                for i in 0..h {
                    let mut z = 0.0;
                    for k in 0..=i {
                        z += p[(i, k)] * x[k];
                    }
                    out[d * h + i] = norm_cdf(z).clamp(1e-12, 1.0 - 1e-12);
                }
            }
            out
        })
        .collect();
    JointDraws::new(h, parts.concat())
}

/// Joint draws of the horizon marginals coupled by the Gaussian copula `r`:
/// column `j` is `quantile_j(U_j)` for the uniforms of [`sample_uniforms`].
pub fn sample_joint(marginals: &[Marginal], r: &CorrelationMatrix, s: usize, seed: Seed) -> Result<JointDraws> {
    if marginals.len() != r.dim() {
        return Err(Error::InvalidParameter(format!(
            "{} marginals for a {}-dimensional copula",
            marginals.len(),
            r.dim()
        )));
    }
    let mut u = sample_uniforms(r, s, seed)?;
    let h = r.dim();
    let cols: Vec<Vec<f64>> =
        (0..h).into_par_iter().map(|j| invert_column(&marginals[j], &u.column(j))).collect::<Result<_>>()?;
    for (j, col) in cols.iter().enumerate() {
        for (d, &v) in col.iter().enumerate() {
            u.values[d * h + j] = v;
        }
    }
    Ok(u)
}

fn invert_column(m: &Marginal, u: &[f64]) -> Result<Vec<f64>> {
    u.iter().map(|&p| m.quantile_clamped(p)).collect()
}

/// Realised PIT `G(y)` of each horizon's marginal; `None` realisations stay
/// missing.
pub fn pits_for_origin(marginals: &[Marginal], realized: &[Option<f64>]) -> Result<Vec<Option<f64>>> {
    marginals.iter().zip(realized).map(|(m, y)| y.map(|y| m.cdf(y)).transpose()).collect()
}

/// Sample covariance of two columns, used by tests and diagnostics.
pub fn sample_cov(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (numeric::mean(a), numeric::mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 - 1.0)
}
