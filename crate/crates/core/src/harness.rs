//! Experiment runner: c-sweeps over seeds and unlabeled sizes, resampling
//! baselines, decomposition runs, and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::baselines::{lr_scores, preferential_sampling, uniform_sampling};
use crate::dataset::{load_csv, split, Dataset, Split, SplitSpec};
use crate::decomposition::{estimate_decomposition, DecompositionReport};
use crate::error::{FairError, Result};
use crate::fairness::{discrimination_level, FairnessConstraintSpec, Metric, Scope};
use crate::graph::build_laplacian;
use crate::losses::{design_matrix, predict, Model};
use crate::solver::{solve_w_unconstrained, train, SolverConfig, TrainReport, TrainingRows};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for OutputFormat {
    type Err = FairError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(OutputFormat::Csv),
            "jsonl" => Ok(OutputFormat::Jsonl),
            other => Err(FairError::Config(format!("unknown format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Uniform,
    Preferential,
}

impl std::str::FromStr for Baseline {
    type Err = FairError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "us" | "uniform" => Ok(Baseline::Uniform),
            "ps" | "preferential" => Ok(Baseline::Preferential),
            other => Err(FairError::Config(format!("unknown baseline `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: PathBuf,
    pub sensitive_column: String,
    pub label_column: String,
    pub model: Model,
    pub metric: Metric,
    pub scope: Scope,
    pub c_grid: Vec<f64>,
    /// Unlabeled threshold for the combined scope; defaults to each `c`.
    pub c2: Option<f64>,
    /// Unlabeled row counts to sweep; `None` uses every remaining row.
    pub unlabeled_sizes: Option<Vec<usize>>,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub n_labeled: usize,
    pub n_test: usize,
    pub sigma: f64,
    pub solver: SolverConfig,
    pub format: OutputFormat,
    pub out: Option<PathBuf>,
    pub n_bootstrap: usize,
    pub baseline: Baseline,
}

impl ExperimentConfig {
    /// Defaults for everything except the data location.
    pub fn new(data: impl Into<PathBuf>, sensitive_column: &str, label_column: &str) -> Self {
        ExperimentConfig {
            data: data.into(),
            sensitive_column: sensitive_column.into(),
            label_column: label_column.into(),
            model: Model::Lr,
            metric: Metric::DisparateImpact,
            scope: Scope::Mixed,
            c_grid: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25],
            c2: None,
            unlabeled_sizes: None,
            n_seeds: 10,
            base_seed: 0,
            n_labeled: 200,
            n_test: 200,
            sigma: 1.0,
            solver: SolverConfig::default(),
            format: OutputFormat::Csv,
            out: None,
            n_bootstrap: 50,
            baseline: Baseline::Uniform,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment and list values are
    /// comma-separated. A relative `data` path is resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| FairError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim().to_string();
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(FairError::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        let take = |map: &mut BTreeMap<String, String>, key: &str| -> Result<String> {
            map.remove(key).ok_or_else(|| FairError::Config(format!("missing key `{key}`")))
        };
        let data = PathBuf::from(take(&mut map, "data")?);
        let data = if data.is_relative() { base_dir.join(data) } else { data };
        let sensitive = take(&mut map, "sensitive")?;
        let label = take(&mut map, "label")?;
        let mut cfg = ExperimentConfig::new(data, &sensitive, &label);

        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| FairError::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            v.split(',').map(|p| num(key, p.trim())).collect()
        }
        for (key, v) in &map {
            let v = v.as_str();
            let s = &mut cfg.solver;
            match key.as_str() {
                "model" => cfg.model = v.parse()?,
                "metric" => cfg.metric = v.parse()?,
                "scope" => cfg.scope = v.parse()?,
                "c_grid" => cfg.c_grid = list(key, v)?,
                "c2" => cfg.c2 = Some(num(key, v)?),
                "unlabeled_sizes" => cfg.unlabeled_sizes = Some(list(key, v)?),
                "seeds" => cfg.n_seeds = num(key, v)?,
                "seed" => cfg.base_seed = num(key, v)?,
                "n_labeled" => cfg.n_labeled = num(key, v)?,
                "n_test" => cfg.n_test = num(key, v)?,
                "sigma" => cfg.sigma = num(key, v)?,
                "alpha" => s.alpha = num(key, v)?,
                "threshold" => s.threshold = num(key, v)?,
                "max_outer_iters" => s.max_outer_iters = num(key, v)?,
                "outer_tol" => s.outer_tol = num(key, v)?,
                "ccp_tau" => s.ccp_tau = num(key, v)?,
                "ccp_mu" => s.ccp_mu = num(key, v)?,
                "ccp_max_iters" => s.ccp_max_iters = num(key, v)?,
                "wstep_tol" => s.wstep_tol = num(key, v)?,
                "ridge_eps" => s.ridge_eps = num(key, v)?,
                "weight_ridge" => s.weight_ridge = num(key, v)?,
                "format" => cfg.format = v.parse()?,
                "out" => cfg.out = Some(PathBuf::from(v)),
                "n_bootstrap" => cfg.n_bootstrap = num(key, v)?,
                "baseline" => cfg.baseline = v.parse()?,
                other => return Err(FairError::Config(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FairError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FairError::Config(m.to_string()));
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(*c >= 0.0)) {
            return bad("c_grid must be non-empty and non-negative");
        }
        if self.c2.is_some_and(|c| !(c >= 0.0)) {
            return bad("c2 must be non-negative");
        }
        if self.n_seeds == 0 {
            return bad("seeds must be at least 1");
        }
        if self.unlabeled_sizes.as_ref().is_some_and(|s| s.is_empty()) {
            return bad("unlabeled_sizes must not be empty");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if self.n_bootstrap < 2 {
            return bad("n_bootstrap must be at least 2");
        }
        self.solver.validate().map_err(|e| FairError::Config(e.to_string()))
    }

    /// Constraint for one sweep point. Without unlabeled rows every scope
    /// collapses to the labeled one.
    pub fn constraint(&self, c: f64, n_unlabeled: usize) -> Result<FairnessConstraintSpec> {
        let scope = if n_unlabeled == 0 { Scope::Labeled } else { self.scope };
        let c2 = (scope == Scope::Combined).then(|| self.c2.unwrap_or(c));
        FairnessConstraintSpec::new(self.metric, scope, c, c2)
    }

    pub fn load(&self) -> Result<Dataset> {
        load_csv(&self.data, &self.sensitive_column, &self.label_column)
    }
}

/// Identifies one row of a sweep report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SeedKey {
    Run(u64),
    Mean,
    Sd,
}

impl std::fmt::Display for SeedKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SeedKey::Run(s) => write!(f, "{s}"),
            SeedKey::Mean => f.write_str("mean"),
            SeedKey::Sd => f.write_str("sd"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub c: f64,
    pub size: usize,
    pub seed: SeedKey,
    pub acc: f64,
    /// Discrimination level for disparate impact, OMR, FPR, FNR.
    pub dis: [f64; 4],
    pub status: String,
}

impl ResultRow {
    fn failed(c: f64, size: usize, seed: u64, status: String) -> Self {
        ResultRow {
            c,
            size,
            seed: SeedKey::Run(seed),
            acc: f64::NAN,
            dis: [f64::NAN; 4],
            status,
        }
    }

    fn sort_key(&self) -> (u64, usize, SeedKey) {
        // c values are non-negative, so their bit patterns order like the values.
        (self.c.to_bits(), self.size, self.seed)
    }
}

/// Accuracy and the four discrimination levels of `pred` on `test`.
pub fn evaluate(pred: &[u8], test: &Dataset) -> Result<(f64, [f64; 4])> {
    let y = test.require_labels()?;
    if pred.len() != y.len() {
        return Err(FairError::Dimension("prediction count".into()));
    }
    let acc = pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len().max(1) as f64;
    let mut dis = [f64::NAN; 4];
    for (slot, metric) in dis.iter_mut().zip(Metric::ALL) {
        // A group without the conditioning label leaves the metric undefined.
        if let Ok(r) = discrimination_level(metric, pred, y, test.sensitive()) {
            *slot = r.level;
        }
    }
    Ok((acc, dis))
}

/// Labeled/unlabeled/test split for one seed; `size` fixes the unlabeled count.
pub fn split_for(data: &Dataset, cfg: &ExperimentConfig, size: Option<usize>, seed: u64) -> Result<Split> {
    let mut spec = SplitSpec::new(cfg.n_labeled, cfg.n_test, seed);
    if let Some(n) = size {
        spec = spec.with_unlabeled(n);
    }
    split(data, &spec)
}

/// Trains the constrained model of `cfg` on `labeled` plus `unlabeled`.
pub fn fit(cfg: &ExperimentConfig, labeled: &Dataset, unlabeled: &Dataset, c: f64, seed: u64) -> Result<TrainReport> {
    let spec = cfg.constraint(c, unlabeled.n_rows())?;
    let solver = SolverConfig { seed, ..cfg.solver };
    if unlabeled.n_rows() == 0 {
        return train(labeled, unlabeled, None, cfg.model, &spec, &solver);
    }
    let pool = labeled.concat(unlabeled)?;
    let lap = build_laplacian(pool.features(), labeled.n_rows(), cfg.sigma)?;
    train(labeled, unlabeled, Some(&lap), cfg.model, &spec, &solver)
}

/// [`fit`] followed by hard predictions on `test`.
pub fn fit_predict(
    cfg: &ExperimentConfig,
    labeled: &Dataset,
    unlabeled: &Dataset,
    test: &Dataset,
    c: f64,
    seed: u64,
) -> Result<Vec<u8>> {
    let report = fit(cfg, labeled, unlabeled, c, seed)?;
    Ok(predict(cfg.model, &report.w, &design_matrix(test.features()), cfg.solver.threshold)?.labels)
}

fn run_cell(data: &Dataset, cfg: &ExperimentConfig, c: f64, size: Option<usize>, seed: u64) -> ResultRow {
    let outcome = split_for(data, cfg, size, seed).and_then(|parts| {
        let n_u = parts.unlabeled.n_rows();
        let pred = fit_predict(cfg, &parts.labeled, &parts.unlabeled, &parts.test, c, seed)?;
        Ok((n_u, evaluate(&pred, &parts.test)?))
    });
    let size_label = size.unwrap_or(0);
    match outcome {
        Ok((n_u, (acc, dis))) => ResultRow {
            c,
            size: n_u,
            seed: SeedKey::Run(seed),
            acc,
            dis,
            status: "ok".into(),
        },
        Err(e) if e.is_infeasible() => ResultRow::failed(c, size_label, seed, "infeasible".into()),
        Err(e) => ResultRow::failed(c, size_label, seed, format!("error: {e}")),
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let n = finite.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = finite.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 {
        f64::NAN
    } else {
        (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    (mean, sd)
}

/// Appends a mean and a sample-standard-deviation row per `(c, size)` and
/// sorts. Aggregates use the successful seeds only.
pub fn aggregate(mut rows: Vec<ResultRow>) -> Vec<ResultRow> {
    let mut groups: BTreeMap<(u64, usize), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| matches!(r.seed, SeedKey::Run(_))) {
        groups.entry((r.c.to_bits(), r.size)).or_default().push(r);
    }
    let mut extra = Vec::new();
    for ((c_bits, size), members) in groups {
        let ok: Vec<&&ResultRow> = members.iter().filter(|r| r.status == "ok").collect();
        let status = match ok.len() {
            0 => "infeasible".to_string(),
            n if n == members.len() => "ok".to_string(),
            n => format!("partial {n}/{}", members.len()),
        };
        let col = |f: &dyn Fn(&ResultRow) -> f64| mean_sd(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        let acc = col(&|r| r.acc);
        let dis: Vec<(f64, f64)> = (0..4).map(|j| col(&|r| r.dis[j])).collect();
        for (seed, pick) in [(SeedKey::Mean, 0), (SeedKey::Sd, 1)] {
            let get = |p: (f64, f64)| if pick == 0 { p.0 } else { p.1 };
            extra.push(ResultRow {
                c: f64::from_bits(c_bits),
                size,
                seed,
                acc: get(acc),
                dis: [get(dis[0]), get(dis[1]), get(dis[2]), get(dis[3])],
                status: status.clone(),
            });
        }
    }
    rows.extend(extra);
    rows.sort_by_key(|r| r.sort_key());
    rows
}

/// Runs every `(c, size, seed)` cell and returns per-seed rows followed,
/// within each `(c, size)`, by mean and sd rows. Failed cells are recorded
/// with their status instead of aborting the sweep.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let data = cfg.load()?;
    run_sweep_on(&data, cfg)
}

/// [`run_sweep`] over an already loaded dataset.
pub fn run_sweep_on(data: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let sizes: Vec<Option<usize>> = match &cfg.unlabeled_sizes {
        Some(s) => s.iter().map(|&n| Some(n)).collect(),
        None => vec![None],
    };
    let mut cells = Vec::new();
    for &c in &cfg.c_grid {
        for &size in &sizes {
            for run in 0..cfg.n_seeds {
                cells.push((c, size, cfg.base_seed + run as u64));
            }
        }
    }
    let rows: Vec<ResultRow> = cells
        .par_iter()
        .map(|&(c, size, seed)| run_cell(data, cfg, c, size, seed))
        .collect();
    Ok(aggregate(rows))
}

/// Unconstrained logistic models on US- or PS-resampled labeled sets, one
/// row per seed plus aggregates. `c` is reported as NaN.
pub fn run_baseline(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let data = cfg.load()?;
    run_baseline_on(&data, cfg)
}

pub fn run_baseline_on(data: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let rows: Vec<ResultRow> = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|run| {
            let seed = cfg.base_seed + run as u64;
            let outcome = split_for(data, cfg, Some(0), seed).and_then(|parts| {
                let solver = SolverConfig { seed, ..cfg.solver };
                let resampled = match cfg.baseline {
                    Baseline::Uniform => uniform_sampling(&parts.labeled, seed)?,
                    Baseline::Preferential => {
                        let scores = lr_scores(&parts.labeled, &solver)?;
                        preferential_sampling(&parts.labeled, &scores)?
                    }
                };
                let fit = solve_w_unconstrained(cfg.model, &TrainingRows::labeled(&resampled)?, &solver)?;
                let pred = predict(cfg.model, &fit.w, &design_matrix(parts.test.features()), solver.threshold)?;
                evaluate(&pred.labels, &parts.test)
            });
            match outcome {
                Ok((acc, dis)) => ResultRow {
                    c: f64::NAN,
                    size: 0,
                    seed: SeedKey::Run(seed),
                    acc,
                    dis,
                    status: "ok".into(),
                },
                Err(e) => ResultRow::failed(f64::NAN, 0, seed, format!("error: {e}")),
            }
        })
        .collect();
    Ok(aggregate(rows))
}

/// One decomposition per `c`: the constrained model is retrained on
/// bootstrap resamples of the labeled rows (keeping the unlabeled rows) and
/// decomposed on the test rows.
pub fn run_decomposition(cfg: &ExperimentConfig) -> Result<Vec<(f64, DecompositionReport)>> {
    cfg.validate()?;
    let data = cfg.load()?;
    let size = cfg.unlabeled_sizes.as_ref().and_then(|s| s.first().copied());
    let parts = split_for(&data, cfg, size, cfg.base_seed)?;
    cfg.c_grid
        .iter()
        .map(|&c| {
            let trainer = |train: &Dataset, eval: &Dataset, seed: u64| {
                fit_predict(cfg, train, &parts.unlabeled, eval, c, seed)
            };
            let report = estimate_decomposition(&trainer, &parts.labeled, &parts.test, cfg.n_bootstrap, cfg.base_seed, None)?;
            Ok((c, report))
        })
        .collect()
}

/// Six significant digits, shortest form.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{v:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

fn json_float(v: f64) -> String {
    if v.is_finite() {
        format_float(v)
    } else {
        "null".into()
    }
}

pub const COLUMNS: [&str; 9] = ["c", "size", "seed", "acc", "dis_di", "dis_omr", "dis_fpr", "dis_fnr", "status"];

/// Serializes rows as CSV (with header) or JSON lines.
pub fn render(rows: &[ResultRow], format: OutputFormat) -> String {
    let mut out = String::new();
    match format {
        OutputFormat::Csv => {
            out.push_str(&COLUMNS.join(","));
            out.push('\n');
            for r in rows {
                let status = if r.status.contains([',', '"', '\n']) {
                    format!("\"{}\"", r.status.replace('"', "\"\"").replace('\n', " "))
                } else {
                    r.status.clone()
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    format_float(r.c),
                    r.size,
                    r.seed,
                    format_float(r.acc),
                    format_float(r.dis[0]),
                    format_float(r.dis[1]),
                    format_float(r.dis[2]),
                    format_float(r.dis[3]),
                    status
                );
            }
        }
        OutputFormat::Jsonl => {
            for r in rows {
                let seed = match r.seed {
                    SeedKey::Run(s) => s.to_string(),
                    other => format!("\"{other}\""),
                };
                let _ = writeln!(
                    out,
                    "{{\"c\":{},\"size\":{},\"seed\":{},\"acc\":{},\"dis_di\":{},\"dis_omr\":{},\"dis_fpr\":{},\"dis_fnr\":{},\"status\":{}}}",
                    json_float(r.c),
                    r.size,
                    seed,
                    json_float(r.acc),
                    json_float(r.dis[0]),
                    json_float(r.dis[1]),
                    json_float(r.dis[2]),
                    json_float(r.dis[3]),
                    serde_json::Value::String(r.status.clone())
                );
            }
        }
    }
    out
}

fn write_text(text: &str, path: &Path) -> Result<()> {
    std::fs::write(path, text).map_err(|e| FairError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn emit_report(rows: &[ResultRow], format: OutputFormat, path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(FairError::Empty("report rows".into()));
    }
    write_text(&render(rows, format), path)
}

/// Decomposition results, one row per `c`.
pub fn render_decomposition(results: &[(f64, DecompositionReport)], format: OutputFormat) -> String {
    let cols = [
        "c", "bias0", "bias1", "var0", "var1", "noise0", "noise1", "err0", "err1", "level", "n_bootstrap",
    ];
    let mut out = String::new();
    if format == OutputFormat::Csv {
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    for (c, r) in results {
        let vals = [
            *c,
            r.bias[0],
            r.bias[1],
            r.variance[0],
            r.variance[1],
            r.noise[0],
            r.noise[1],
            r.error[0],
            r.error[1],
            r.level_decomposed,
        ];
        match format {
            OutputFormat::Csv => {
                let fields: Vec<String> = vals.iter().map(|&v| format_float(v)).collect();
                let _ = writeln!(out, "{},{}", fields.join(","), r.n_bootstrap);
            }
            OutputFormat::Jsonl => {
                let fields: Vec<String> = cols
                    .iter()
                    .zip(vals.iter())
                    .map(|(k, &v)| format!("\"{k}\":{}", json_float(v)))
                    .collect();
                let _ = writeln!(out, "{{{},\"n_bootstrap\":{}}}", fields.join(","), r.n_bootstrap);
            }
        }
    }
    out
}

pub fn emit_decomposition(results: &[(f64, DecompositionReport)], format: OutputFormat, path: &Path) -> Result<()> {
    write_text(&render_decomposition(results, format), path)
}
