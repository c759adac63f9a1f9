use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use horizon_fuse::analytic::{gain_surface, Ar1, MsfeCase};
use horizon_fuse::copula::{fit_copula, sample_joint, CorrelationMatrix, PitPanel, RankMethod};
use horizon_fuse::dists::{Marginal, Univariate};
use horizon_fuse::mc::{
    det_bins, det_records, iteration_rows, robustness_table, run_alternative_regression, run_detr_experiment,
    run_mc_study, run_robustness_grid, summarize_ratios, summarize_rejections, Approach, ExperimentConfig, ModelKind,
    RatioRow, RejectionRow, StudyResult, Target, TestKind,
};
use horizon_fuse::models::{fit_direct_ols, fit_direct_qr, simulate_dgp, ShockFamily, VarDgpParams, QR_LEVELS};
use horizon_fuse::numeric::sorted_quantile;
use horizon_fuse::rng::Seed;
use horizon_fuse::scoring::{
    crps_sorted_draws, epa_test_series, pit_sorted_draws, quantile_score, qw_crps_sorted_draws, EpaResult, PitNull,
    PitTestResult, ScoreSeries, WeightScheme, PIT_NULL_REPS,
};
use horizon_fuse::transform::{spec_annual_average, spec_qoq_from_mom, spec_yoy, ObservedHistory, TransformSpec};
use serde::{Deserialize, Serialize};

use crate::archive::{ForecastArchive, OriginForecasts};
use crate::error::{CliError, CliResult};
use crate::output::{write_csv, write_csv_with_header, write_json};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// analytic

#[derive(Debug, Clone, Args)]
pub struct AnalyticArgs {
    /// Autoregressive coefficients; each is also run with the opposite sign.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.4, 0.6, 0.8])]
    pub rho: Vec<f64>,
    /// Horizons of the summed forecast.
    #[arg(long = "h", value_delimiter = ',', default_values_t = vec![4, 8, 12])]
    pub h: Vec<usize>,
    /// Replications per grid point.
    #[arg(long, default_value_t = 100_000)]
    pub draws: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_analytic(args: &AnalyticArgs, seed: u64) -> CliResult<()> {
    if args.rho.is_empty() || args.h.is_empty() {
        return Err(usage("rho and h grids must be non-empty"));
    }
    if let Some(r) = args.rho.iter().find(|r| r.is_nan() || r.abs() >= 1.0) {
        return Err(usage(format!("rho values must lie in (-1, 1), got {r}")));
    }
    if args.h.contains(&0) {
        return Err(usage("horizons must be >= 1"));
    }
    if args.draws == 0 {
        return Err(usage("--draws must be >= 1"));
    }
    let neg: Vec<f64> = args.rho.iter().map(|r| -r).collect();
    let pos = gain_surface(&args.rho, &args.h, args.draws, Seed(seed))?;
    let negs = gain_surface(&neg, &args.h, args.draws, Seed(seed))?;
    write_csv(&args.out.join("gain_surface_positive.csv"), &pos)?;
    write_csv(&args.out.join("gain_surface_negative.csv"), &negs)?;
    let msfe: Vec<(f64, f64, f64)> = (0..199)
        .map(|i| {
            let r = -0.99 + 0.01 * i as f64;
            let p = Ar1::new(r, 1.0).expect("grid inside (-1, 1)");
            (r, p.msfe_ratio(MsfeCase::OneYear), p.msfe_ratio(MsfeCase::TwoYear))
        })
        .collect();
    write_csv_with_header(&args.out.join("msfe_ratios.csv"), &["rho", "one_year", "two_year"], &msfe)?;
    write_json(
        &args.out.join("manifest.json"),
        &serde_json::json!({
            "command": "analytic",
            "version": VERSION,
            "seed": seed,
            "rho": args.rho,
            "h": args.h,
            "draws": args.draws,
        }),
    )
}

// ---------------------------------------------------------------------------
// montecarlo

#[derive(Debug, Clone, Args)]
pub struct MonteCarloArgs {
    /// TOML experiment file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Main,
    Alternative,
    Robustness,
    Detr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessSection {
    pub theta1: Vec<f64>,
    pub t_is: Vec<usize>,
    pub t_r: Vec<usize>,
    pub iterations: usize,
}

impl Default for RobustnessSection {
    fn default() -> Self {
        RobustnessSection { theta1: vec![0.4], t_is: vec![100, 200, 400], t_r: vec![25, 50, 100, 200], iterations: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetrSection {
    pub t_is: usize,
    pub t_r: usize,
    pub t_oos: usize,
    pub iterations: usize,
}

impl Default for DetrSection {
    fn default() -> Self {
        DetrSection { t_is: 500, t_r: 500, t_oos: 100, iterations: 100 }
    }
}

/// Experiment file: which experiments to run, the shared study settings
/// and the per-experiment overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloFile {
    pub experiments: Vec<Experiment>,
    pub study: ExperimentConfig,
    pub robustness: RobustnessSection,
    pub detr: DetrSection,
}

impl Default for MonteCarloFile {
    fn default() -> Self {
        MonteCarloFile {
            experiments: vec![Experiment::Main],
            study: ExperimentConfig::default(),
            robustness: RobustnessSection::default(),
            detr: DetrSection::default(),
        }
    }
}

fn unknown_keys(user: &toml::Table, reference: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match reference.get(k) {
            None => out.push(path),
            Some(toml::Value::Table(r)) => {
                if let toml::Value::Table(u) = v {
                    unknown_keys(u, r, &path, out);
                }
            }
            Some(_) => {}
        }
    }
}

impl MonteCarloFile {
    /// Parse, listing every unrecognised key at once.
    pub fn parse(text: &str) -> CliResult<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| usage(format!("config is not valid TOML: {e}")))?;
        let reference = toml::Table::try_from(MonteCarloFile::default()).expect("default config serializes");
        let mut bad = Vec::new();
        unknown_keys(&table, &reference, "", &mut bad);
        if !bad.is_empty() {
            return Err(usage(format!("unknown configuration keys: {}", bad.join(", "))));
        }
        let cfg: MonteCarloFile = table.try_into().map_err(|e: toml::de::Error| usage(format!("config: {e}")))?;
        if cfg.experiments.is_empty() {
            return Err(usage("experiments list is empty"));
        }
        cfg.study.validate()?;
        Ok(cfg)
    }
}

fn write_ratio_split(out: &Path, rows: Vec<RatioRow>, prefix_by_target: bool, name: &str) -> CliResult<()> {
    if prefix_by_target {
        for (t, label) in [(Target::AnnualAverage, "annual_average"), (Target::Yoy, "yoy")] {
            let part: Vec<&RatioRow> = rows.iter().filter(|r| r.target == t).collect();
            if !part.is_empty() {
                write_csv(&out.join(format!("{label}_{name}.csv")), &part)?;
            }
        }
        Ok(())
    } else {
        write_csv(&out.join(format!("{name}.csv")), &rows)
    }
}

fn rejection_rows<'a>(rows: &'a [RejectionRow], f: impl Fn(&RejectionRow) -> bool + 'a) -> Vec<&'a RejectionRow> {
    rows.iter().filter(|r| f(r)).collect()
}

fn report_main(out: &Path, res: &StudyResult, cfg: &ExperimentConfig, seed: Seed) -> CliResult<()> {
    write_csv(&out.join("iterations_main.csv"), &iteration_rows(res))?;
    let mut ratios = Vec::new();
    for (a, b) in [
        (Approach::Copula, Approach::Benchmark),
        (Approach::Copula, Approach::Oracle),
        (Approach::Benchmark, Approach::Oracle),
    ] {
        ratios.extend(summarize_ratios(res, a, b, cfg.bootstrap_reps, seed)?);
    }
    write_ratio_split(out, ratios, true, "ratios")?;
    let rej = summarize_rejections(res, cfg.bootstrap_reps, seed)?;
    for (t, label) in [(Target::AnnualAverage, "annual_average"), (Target::Yoy, "yoy")] {
        let part = rejection_rows(&rej, |r| r.target == t && r.test != TestKind::Pit);
        if !part.is_empty() {
            write_csv(&out.join(format!("{label}_epa.csv")), &part)?;
        }
    }
    write_csv(&out.join("pit_rejections.csv"), &rejection_rows(&rej, |r| r.test == TestKind::Pit))
}

fn report_alternative(out: &Path, res: &StudyResult, cfg: &ExperimentConfig, seed: Seed) -> CliResult<()> {
    write_csv(&out.join("iterations_alternative.csv"), &iteration_rows(res))?;
    let ratios = summarize_ratios(res, Approach::Copula, Approach::Alternative, cfg.bootstrap_reps, seed)?;
    write_csv(&out.join("alternative_ratios.csv"), &ratios)?;
    let rej = summarize_rejections(res, cfg.bootstrap_reps, seed)?;
    write_csv(
        &out.join("alternative_pit.csv"),
        &rejection_rows(&rej, |r| r.test == TestKind::Pit && r.approach == Approach::Alternative),
    )
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    version: &'static str,
    seed: u64,
    config: &'a MonteCarloFile,
    skipped: BTreeMap<String, Vec<String>>,
}

pub fn cmd_montecarlo(args: &MonteCarloArgs, seed: Option<u64>) -> CliResult<()> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", args.config.display())))?;
    let mut file = MonteCarloFile::parse(&text)?;
    if let Some(s) = seed {
        file.study.seed = s;
    }
    let cfg = file.study.clone();
    let summary_seed = Seed(cfg.seed).derive("summaries", 0);
    let mut skipped = BTreeMap::new();
    let note = |name: &str, res: &StudyResult, skipped: &mut BTreeMap<String, Vec<String>>| {
        skipped.insert(
            name.to_string(),
            res.skipped.iter().map(|s| format!("iteration {}: {}", s.iteration, s.error)).collect(),
        );
    };
    for exp in &file.experiments {
        match exp {
            Experiment::Main => {
                let res = run_mc_study(&cfg)?;
                report_main(&args.out, &res, &cfg, summary_seed)?;
                note("main", &res, &mut skipped);
            }
            Experiment::Alternative => {
                let res = run_alternative_regression(&cfg)?;
                report_alternative(&args.out, &res, &cfg, summary_seed)?;
                note("alternative", &res, &mut skipped);
            }
            Experiment::Robustness => {
                let r = &file.robustness;
                let c = ExperimentConfig { theta1: r.theta1.clone(), iterations: r.iterations, ..cfg.clone() };
                let res = run_robustness_grid(&c, &r.t_is, &r.t_r)?;
                write_csv(&args.out.join("iterations_robustness.csv"), &iteration_rows(&res))?;
                write_csv(
                    &args.out.join("robustness_gains.csv"),
                    &robustness_table(&res, c.bootstrap_reps, summary_seed)?,
                )?;
                note("robustness", &res, &mut skipped);
            }
            Experiment::Detr => {
                let d = &file.detr;
                let c = ExperimentConfig {
                    t_is: d.t_is,
                    t_r: d.t_r,
                    t_oos: d.t_oos,
                    iterations: d.iterations,
                    targets: vec![Target::AnnualAverage],
                    approaches: vec![Approach::Copula, Approach::Benchmark],
                    ..cfg.clone()
                };
                let res = run_detr_experiment(&c)?;
                let recs = det_records(&res);
                write_csv(&args.out.join("iterations_detr.csv"), &iteration_rows(&res))?;
                write_csv(&args.out.join("det_records.csv"), &recs)?;
                write_csv(&args.out.join("det_bins.csv"), &det_bins(&recs))?;
                note("detr", &res, &mut skipped);
            }
        }
    }
    write_json(
        &args.out.join("manifest.json"),
        &Manifest { command: "montecarlo", version: VERSION, seed: cfg.seed, config: &file, skipped },
    )
}

// ---------------------------------------------------------------------------
// fit-copula

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RankArg {
    Spearman,
    NormalScores,
}

impl From<RankArg> for RankMethod {
    fn from(r: RankArg) -> Self {
        match r {
            RankArg::Spearman => RankMethod::Spearman,
            RankArg::NormalScores => RankMethod::NormalScores,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitCopulaArgs {
    /// Forecast archive (JSON lines).
    #[arg(long)]
    pub archive: PathBuf,
    /// First training origin (default: first in the archive).
    #[arg(long)]
    pub first_origin: Option<i64>,
    /// Last training origin (default: last in the archive).
    #[arg(long)]
    pub last_origin: Option<i64>,
    #[arg(long, value_enum, default_value_t = RankArg::Spearman)]
    pub rank_method: RankArg,
    #[arg(long)]
    pub out: PathBuf,
}

fn read_archive(path: &Path) -> CliResult<ForecastArchive> {
    ForecastArchive::read(open(path)?)
}

#[derive(Serialize)]
struct DetSummary {
    dim: usize,
    rows: usize,
    first_origin: i64,
    last_origin: i64,
    determinant: f64,
    /// Determinant of each leading block `1..=dim`.
    leading_determinants: Vec<f64>,
}

pub fn cmd_fit_copula(args: &FitCopulaArgs) -> CliResult<()> {
    let archive = read_archive(&args.archive)?;
    let first = args.first_origin.unwrap_or(i64::MIN);
    let last = args.last_origin.unwrap_or(i64::MAX);
    let origins: Vec<i64> = archive.origins().filter(|o| (first..=last).contains(o)).collect();
    if origins.is_empty() {
        return Err(CliError::Data("no archive origins in the training window".into()));
    }
    let h = archive.get(origins[0]).unwrap().marginals.len();
    let mut cells = Vec::with_capacity(origins.len() * h);
    for &o in &origins {
        let f = archive.get(o).unwrap();
        if f.marginals.len() < h {
            return Err(CliError::Data(format!("origin {o} has {} horizons, expected {h}", f.marginals.len())));
        }
        for j in 0..h {
            let y = f.realized[j]
                .ok_or_else(|| CliError::Data(format!("missing realization at origin {o}, horizon {}", j + 1)))?;
            cells.push(Some(f.marginals[j].cdf(y)?));
        }
    }
    let panel = PitPanel::new(origins.clone(), h, cells)?;
    let r = fit_copula(&panel, args.rank_method.into())?;
    std::fs::create_dir_all(&args.out)?;
    crate::output::write_atomic(&args.out.join("pit_panel.csv"), |w| Ok(panel.write_csv(w)?))?;
    write_json(&args.out.join("correlation.json"), &r)?;
    let leading = (1..=h).map(|k| r.leading(k).and_then(|m| m.determinant())).collect::<Result<Vec<_>, _>>()?;
    write_json(
        &args.out.join("det_summary.json"),
        &DetSummary {
            dim: h,
            rows: origins.len(),
            first_origin: origins[0],
            last_origin: *origins.last().unwrap(),
            determinant: r.determinant()?,
            leading_determinants: leading,
        },
    )
}

// ---------------------------------------------------------------------------
// transform

#[derive(Debug, Clone, Args)]
pub struct TransformArgs {
    #[arg(long)]
    pub archive: PathBuf,
    /// Correlation JSON from `fit-copula`, or `identity` for independent
    /// horizons.
    #[arg(long)]
    pub correlation: String,
    /// Transform JSON file, or a built-in: `annual_average:P:K`, `yoy:P:K`,
    /// `qoq_from_mom`.
    #[arg(long)]
    pub spec: String,
    /// Origins: `a:b` (inclusive), `a:b:step` or a comma list.
    #[arg(long)]
    pub origins: String,
    #[arg(long, default_value_t = 2000)]
    pub draws: usize,
    /// Extra observed history, CSV `period,value`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_origins(s: &str) -> CliResult<Vec<i64>> {
    let bad = || usage(format!("cannot parse origins '{s}'"));
    if s.contains(':') {
        let parts: Vec<i64> = s.split(':').map(|p| p.trim().parse().map_err(|_| bad())).collect::<CliResult<_>>()?;
        let (a, b, step) = match parts[..] {
            [a, b] => (a, b, 1),
            [a, b, c] if c > 0 => (a, b, c),
            _ => return Err(bad()),
        };
        if b < a {
            return Err(bad());
        }
        Ok((a..=b).step_by(step as usize).collect())
    } else {
        s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
    }
}

pub fn parse_spec(s: &str) -> CliResult<TransformSpec> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |p: &str| p.parse::<usize>().map_err(|_| usage(format!("bad number in spec '{s}'")));
    match parts[..] {
        ["annual_average", p, k] => Ok(spec_annual_average(num(p)?, num(k)?)?),
        ["yoy", p, k] => Ok(spec_yoy(num(p)?, num(k)?)?),
        ["qoq_from_mom"] => Ok(spec_qoq_from_mom()),
        _ => {
            let text = std::fs::read_to_string(s)
                .map_err(|e| usage(format!("spec '{s}' is neither built-in nor readable: {e}")))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("spec {s}: {e}")))
        }
    }
}

fn read_history(path: &Path) -> CliResult<BTreeMap<i64, f64>> {
    let mut rd = csv::Reader::from_reader(open(path)?);
    let mut out = BTreeMap::new();
    for row in rd.deserialize::<(i64, f64)>() {
        let (p, v) = row?;
        out.insert(p, v);
    }
    Ok(out)
}

fn history_at(obs: &BTreeMap<i64, f64>, origin: i64, needed: usize) -> CliResult<ObservedHistory> {
    let vals = (0..needed as i64)
        .rev()
        .map(|l| {
            obs.get(&(origin - l))
                .copied()
                .ok_or_else(|| CliError::Data(format!("origin {origin}: no observation for period {}", origin - l)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(ObservedHistory::new(vals)?)
}

#[derive(Serialize)]
struct DrawRow {
    origin: i64,
    draw: usize,
    value: f64,
}

#[derive(Serialize)]
struct QuantileRow {
    origin: i64,
    level: f64,
    value: f64,
}

#[derive(Serialize)]
struct SummaryRow {
    origin: i64,
    mean: f64,
    sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub origin: i64,
    pub value: f64,
}

/// Target draws at one origin. The copula and the identity construction
/// share the per-origin seed, so `identity` is the copula path with `R = I`.
pub fn transform_origin(
    f: &OriginForecasts,
    r: &CorrelationMatrix,
    spec: &TransformSpec,
    hist: &ObservedHistory,
    draws: usize,
    seed: Seed,
) -> CliResult<Vec<f64>> {
    let k = spec.horizons();
    if f.marginals.len() < k {
        return Err(CliError::Data(format!(
            "transform needs horizons 1..={k}, forecasts only cover 1..={}",
            f.marginals.len()
        )));
    }
    let r = r.leading(k)?;
    let marg: Vec<Marginal> = f.marginals[..k].to_vec();
    let joint = sample_joint(&marg, &r, draws, seed)?;
    Ok(horizon_fuse::transform::apply_transform(&joint, spec, hist)?)
}

pub fn cmd_transform(args: &TransformArgs, seed: u64) -> CliResult<()> {
    let archive = read_archive(&args.archive)?;
    let spec = parse_spec(&args.spec)?;
    let origins = parse_origins(&args.origins)?;
    if args.draws < 2 {
        return Err(usage("--draws must be >= 2"));
    }
    let k = spec.horizons();
    let r = if args.correlation == "identity" {
        CorrelationMatrix::identity(k)
    } else {
        let r: CorrelationMatrix = serde_json::from_reader(open(Path::new(&args.correlation))?)?;
        if r.dim() < k {
            return Err(CliError::Data(format!("correlation matrix covers {} horizons, transform needs {k}", r.dim())));
        }
        r
    };
    let mut obs = archive.observations()?;
    if let Some(h) = &args.history {
        obs.extend(read_history(h)?);
    }
    let needed = spec.history_needed();
    let root = Seed(seed).derive("transform", 0);
    let mut draw_rows = Vec::new();
    let mut q_rows = Vec::new();
    let mut s_rows = Vec::new();
    let mut realized = Vec::new();
    for &o in &origins {
        let f = archive.get(o).ok_or_else(|| CliError::Data(format!("origin {o} is not in the archive")))?;
        let hist = history_at(&obs, o, needed)?;
        let z = transform_origin(f, &r, &spec, &hist, args.draws, root.derive("origin", o as u64))?;
        let mut sorted = z.clone();
        sorted.sort_by(f64::total_cmp);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        s_rows.push(SummaryRow { origin: o, mean, sd });
        for i in 1..=99 {
            let level = i as f64 / 100.0;
            q_rows.push(QuantileRow { origin: o, level, value: sorted_quantile(&sorted, level) });
        }
        draw_rows.extend(z.into_iter().enumerate().map(|(d, value)| DrawRow { origin: o, draw: d, value }));
        let future: Option<Vec<f64>> = (1..=k as i64).map(|j| obs.get(&(o + j)).copied()).collect();
        if let Some(path) = future {
            realized.push(Realization { origin: o, value: spec.apply_path(&path, &hist)? });
        }
    }
    write_csv(&args.out.join("draws.csv"), &draw_rows)?;
    write_csv(&args.out.join("quantiles.csv"), &q_rows)?;
    write_csv(&args.out.join("summary.csv"), &s_rows)?;
    write_csv(&args.out.join("realized.csv"), &realized)?;
    write_json(
        &args.out.join("manifest.json"),
        &serde_json::json!({
            "command": "transform",
            "version": VERSION,
            "seed": seed,
            "spec": spec,
            "correlation": args.correlation,
            "origins": origins.len(),
            "draws": args.draws,
        }),
    )
}

// ---------------------------------------------------------------------------
// score

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightArg {
    Uniform,
    Tails,
    Center,
    LeftTail,
    RightTail,
}

impl From<WeightArg> for WeightScheme {
    fn from(w: WeightArg) -> Self {
        match w {
            WeightArg::Uniform => WeightScheme::Uniform,
            WeightArg::Tails => WeightScheme::Tails,
            WeightArg::Center => WeightScheme::Center,
            WeightArg::LeftTail => WeightScheme::LeftTail,
            WeightArg::RightTail => WeightScheme::RightTail,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    /// `name=path` of a draws CSV (`origin,draw,value`); repeat per method.
    #[arg(long = "forecast", required = true)]
    pub forecasts: Vec<String>,
    /// CSV `origin,value`.
    #[arg(long)]
    pub realizations: PathBuf,
    /// Comma list of `qw_crps`, `crps`, `qs10`.
    #[arg(long, default_value = "qw_crps,crps,qs10")]
    pub metrics: String,
    #[arg(long, value_enum, default_value_t = WeightArg::Tails)]
    pub weight: WeightArg,
    /// HAC bandwidth of the EPA test.
    #[arg(long, default_value_t = 0)]
    pub bandwidth: usize,
    /// Dependence length for the PIT test's null.
    #[arg(long, default_value_t = 1)]
    pub pit_block: usize,
    /// Label written in the horizon column.
    #[arg(long, default_value = "target")]
    pub horizon: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    QwCrps,
    Crps,
    Qs10,
}

impl ScoreMetric {
    fn parse(s: &str) -> CliResult<Self> {
        match s.trim() {
            "qw_crps" => Ok(ScoreMetric::QwCrps),
            "crps" => Ok(ScoreMetric::Crps),
            "qs10" => Ok(ScoreMetric::Qs10),
            other => Err(usage(format!("unknown metric '{other}' (expected qw_crps, crps, qs10)"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ScoreMetric::QwCrps => "qw_crps",
            ScoreMetric::Crps => "crps",
            ScoreMetric::Qs10 => "qs10",
        }
    }

    fn loss(self, sorted: &[f64], y: f64, w: WeightScheme) -> CliResult<f64> {
        Ok(match self {
            ScoreMetric::QwCrps => qw_crps_sorted_draws(sorted, y, w),
            ScoreMetric::Crps => crps_sorted_draws(sorted, y)?,
            ScoreMetric::Qs10 => quantile_score(0.1, sorted_quantile(sorted, 0.1), y),
        })
    }
}

fn read_draws(path: &Path) -> CliResult<BTreeMap<i64, Vec<f64>>> {
    #[derive(Deserialize)]
    struct Row {
        origin: i64,
        #[allow(dead_code)]
        draw: usize,
        value: f64,
    }
    let mut rd = csv::Reader::from_reader(open(path)?);
    let mut out: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for row in rd.deserialize::<Row>() {
        let r = row?;
        out.entry(r.origin).or_default().push(r.value);
    }
    Ok(out)
}

pub fn read_realizations(path: &Path) -> CliResult<BTreeMap<i64, f64>> {
    let mut rd = csv::Reader::from_reader(open(path)?);
    let mut out = BTreeMap::new();
    for row in rd.deserialize::<Realization>() {
        let r = row?;
        out.insert(r.origin, r.value);
    }
    Ok(out)
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    origin: i64,
    method: &'a str,
    horizon: &'a str,
    metric: &'static str,
    value: f64,
}

#[derive(Serialize)]
struct ScoreSummary<'a> {
    method: &'a str,
    horizon: &'a str,
    metric: &'static str,
    mean: f64,
    n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpaReport {
    pub method_a: String,
    pub method_b: String,
    pub metric: String,
    /// Mean loss of `method_a` over mean loss of `method_b`.
    pub ratio: f64,
    pub result: EpaResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PitReport {
    pub method: String,
    pub result: Option<PitTestResult>,
    pub note: Option<String>,
}

fn gap_list(label: &str, origins: impl Iterator<Item = i64>) -> Option<String> {
    let v: Vec<String> = origins.map(|o| o.to_string()).collect();
    (!v.is_empty()).then(|| format!("{label}: {}", v.join(", ")))
}

pub fn cmd_score(args: &ScoreArgs, seed: u64) -> CliResult<()> {
    let metrics: Vec<ScoreMetric> = args.metrics.split(',').map(ScoreMetric::parse).collect::<CliResult<_>>()?;
    let weight: WeightScheme = args.weight.into();
    let mut methods: Vec<(String, BTreeMap<i64, Vec<f64>>)> = Vec::new();
    for f in &args.forecasts {
        let (name, path) =
            f.split_once('=').ok_or_else(|| usage(format!("--forecast expects name=path, got '{f}'")))?;
        if methods.iter().any(|(n, _)| n == name) {
            return Err(usage(format!("method '{name}' given twice")));
        }
        methods.push((name.to_string(), read_draws(Path::new(path))?));
    }
    let truth = read_realizations(&args.realizations)?;
    let origins: Vec<i64> = methods[0].1.keys().copied().collect();
    let mut gaps = Vec::new();
    for (name, m) in &methods {
        gaps.extend(gap_list(
            &format!("origins of {} without '{name}' forecasts", methods[0].0),
            origins.iter().copied().filter(|o| !m.contains_key(o)),
        ));
        gaps.extend(gap_list(
            &format!("origins of '{name}' without {} forecasts", methods[0].0),
            m.keys().copied().filter(|o| !methods[0].1.contains_key(o)),
        ));
    }
    gaps.extend(gap_list("origins without realizations", origins.iter().copied().filter(|o| !truth.contains_key(o))));
    if !gaps.is_empty() {
        return Err(CliError::Data(format!("misaligned origins; {}", gaps.join("; "))));
    }

    let mut rows = Vec::new();
    let mut series: Vec<(usize, ScoreMetric, ScoreSeries)> = Vec::new();
    let mut pits: Vec<Vec<f64>> = Vec::new();
    for (mi, (name, m)) in methods.iter().enumerate() {
        let mut losses: Vec<Vec<f64>> = vec![Vec::with_capacity(origins.len()); metrics.len()];
        let mut pit = Vec::with_capacity(origins.len());
        for &o in &origins {
            let mut d = m[&o].clone();
            if d.len() < 2 {
                return Err(CliError::Data(format!("method '{name}', origin {o}: fewer than 2 draws")));
            }
            d.sort_by(f64::total_cmp);
            let y = truth[&o];
            pit.push(pit_sorted_draws(&d, y));
            for (k, &metric) in metrics.iter().enumerate() {
                let v = metric.loss(&d, y, weight)?;
                losses[k].push(v);
                rows.push(ScoreRow {
                    origin: o,
                    method: name,
                    horizon: &args.horizon,
                    metric: metric.name(),
                    value: v,
                });
            }
        }
        for (k, &metric) in metrics.iter().enumerate() {
            let s =
                ScoreSeries::new(name.clone(), args.horizon.clone(), origins.clone(), std::mem::take(&mut losses[k]))?;
            series.push((mi, metric, s));
        }
        pits.push(pit);
    }
    let summaries: Vec<ScoreSummary> = series
        .iter()
        .map(|(mi, metric, s)| ScoreSummary {
            method: &methods[*mi].0,
            horizon: &args.horizon,
            metric: metric.name(),
            mean: s.mean(),
            n: s.losses.len(),
        })
        .collect();

    let mut epa = Vec::new();
    for a in 0..methods.len() {
        for b in a + 1..methods.len() {
            for &metric in &metrics {
                let sa = &series.iter().find(|(m, k, _)| *m == a && *k == metric).unwrap().2;
                let sb = &series.iter().find(|(m, k, _)| *m == b && *k == metric).unwrap().2;
                if origins.len() < 10 {
                    continue;
                }
                epa.push(EpaReport {
                    method_a: methods[a].0.clone(),
                    method_b: methods[b].0.clone(),
                    metric: metric.name().into(),
                    ratio: sa.mean() / sb.mean(),
                    result: epa_test_series(sa, sb, args.bandwidth)?,
                });
            }
        }
    }
    let null = if origins.len() >= 20 {
        Some(PitNull::simulate(origins.len(), args.pit_block.max(1), PIT_NULL_REPS, Seed(seed).derive("pit-null", 0))?)
    } else {
        None
    };
    let pit_reports: Vec<PitReport> = methods
        .iter()
        .zip(&pits)
        .map(|((name, _), p)| {
            Ok(match &null {
                Some(n) => PitReport { method: name.clone(), result: Some(n.test(p)?), note: None },
                None => PitReport {
                    method: name.clone(),
                    result: None,
                    note: Some(format!("{} origins; the uniformity test needs at least 20", p.len())),
                },
            })
        })
        .collect::<CliResult<_>>()?;
    write_csv(&args.out.join("scores.csv"), &rows)?;
    write_csv(&args.out.join("summary.csv"), &summaries)?;
    write_json(&args.out.join("epa.json"), &epa)?;
    write_json(&args.out.join("pit.json"), &pit_reports)
}

// ---------------------------------------------------------------------------
// simulate-archive

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Normal,
    SkewNormal,
    SkewT,
}

impl From<FamilyArg> for ShockFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Normal => ShockFamily::Normal,
            FamilyArg::SkewNormal => ShockFamily::SkewNormal,
            FamilyArg::SkewT => ShockFamily::SkewT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Auto,
    Ols,
    Qr,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArchiveArgs {
    #[arg(long, default_value_t = 0.7)]
    pub theta1: f64,
    #[arg(long, value_enum, default_value_t = FamilyArg::Normal)]
    pub family: FamilyArg,
    /// Rolling estimation window.
    #[arg(long, default_value_t = 200)]
    pub t_is: usize,
    /// Number of forecast origins.
    #[arg(long, default_value_t = 400)]
    pub origins: usize,
    #[arg(long, default_value_t = 12)]
    pub horizons: usize,
    #[arg(long, value_enum, default_value_t = ModelArg::Auto)]
    pub model: ModelArg,
    /// Output archive path (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
}

/// Simulate the VAR(1) with default parameters and `theta1`, and archive
/// the direct forecasts made at each origin with their realizations.
/// Origin ids are period indices of the simulated series.
pub fn simulate_archive(args: &SimulateArchiveArgs, seed: u64) -> CliResult<ForecastArchive> {
    if args.origins == 0 || args.horizons == 0 {
        return Err(usage("--origins and --horizons must be >= 1"));
    }
    let p = VarDgpParams::with_theta1(args.theta1).with_family(args.family.into());
    p.validate()?;
    let model = match args.model {
        ModelArg::Auto => ModelKind::Auto,
        ModelArg::Ols => ModelKind::Ols,
        ModelArg::Qr => ModelKind::Qr,
    };
    let use_ols = match model {
        ModelKind::Ols => true,
        ModelKind::Qr => false,
        ModelKind::Auto => p.shock_family == ShockFamily::Normal,
    };
    let len = args.t_is + args.origins + args.horizons;
    let s = simulate_dgp(&p, len, 200, &mut Seed(seed).derive("simulate-archive", 0).rng())?;
    let mut archive = ForecastArchive::default();
    for o in args.t_is - 1..args.t_is - 1 + args.origins {
        let window = &s.y[o + 1 - args.t_is..=o];
        let marginals: Vec<Marginal> = if use_ols {
            let f = fit_direct_ols(window, args.horizons)?;
            (1..=args.horizons).map(|h| f.predict(s.y[o], h).map(Marginal::from)).collect::<Result<_, _>>()?
        } else {
            let f = fit_direct_qr(window, args.horizons, &QR_LEVELS)?;
            (1..=args.horizons)
                .map(|h| f.predict(s.y[o], h).map(|(_, d)| Marginal::from(d)))
                .collect::<Result<_, _>>()?
        };
        let realized = (1..=args.horizons).map(|h| Some(s.y[o + h])).collect();
        archive.insert(o as i64, OriginForecasts { marginals, realized });
    }
    Ok(archive)
}

pub fn cmd_simulate_archive(args: &SimulateArchiveArgs, seed: u64) -> CliResult<()> {
    if args.t_is < 20 {
        return Err(usage("--t-is must be >= 20"));
    }
    let archive = simulate_archive(args, seed)?;
    crate::output::write_atomic(&args.out, |w| archive.write(w))
}
