//! Experiment driver: dataset generation, estimator comparison, training, report tables
//! and the gradient check, configured by one JSON document with flag overrides.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::ConicSolver;
use crate::grid::{parse_case, AdmittanceModel, GridCase};
use crate::learn::{
    self, evaluate, huber_loss, mse, LearnError, LossBreakdown, ModelKind, Physics, TrainConfig,
    TrainedModel,
};
use crate::powerflow::{generate_dataset, Dataset, DatasetConfig, MeasurementSample};
use crate::rse::{estimate_wlav_direct, estimate_wls, RseError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        match e {
            LearnError::Config(_) | LearnError::Invalid(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// What a run covers: learned models and direct estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSelector {
    OptLayer,
    FcnnHybrid,
    FcnnMse,
    WlavDirect,
    WlsDirect,
}

impl ModelSelector {
    pub const ALL: [ModelSelector; 5] = [
        ModelSelector::OptLayer,
        ModelSelector::FcnnHybrid,
        ModelSelector::FcnnMse,
        ModelSelector::WlavDirect,
        ModelSelector::WlsDirect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelSelector::OptLayer => "opt_layer",
            ModelSelector::FcnnHybrid => "fcnn_hybrid",
            ModelSelector::FcnnMse => "fcnn_mse",
            ModelSelector::WlavDirect => "wlav_direct",
            ModelSelector::WlsDirect => "wls_direct",
        }
    }

    pub fn learned(self) -> Option<ModelKind> {
        match self {
            ModelSelector::OptLayer => Some(ModelKind::OptLayer),
            ModelSelector::FcnnHybrid => Some(ModelKind::FcnnHybrid),
            ModelSelector::FcnnMse => Some(ModelKind::FcnnMse),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub n: usize,
    pub sigma: f64,
    pub eta: f64,
    pub k: f64,
    pub seed: u64,
    pub train_ratio: f64,
    pub load_scale: (f64, f64),
}

impl Default for DatasetParams {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            n: 200,
            sigma: d.sigma,
            eta: 0.15,
            k: 10.0,
            seed: 0,
            train_ratio: d.train_ratio,
            load_scale: d.load_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Bundled case id (`case9`, `case14`, ...) or a path to a Matpower file.
    pub case_id: String,
    pub dataset: DatasetParams,
    pub models: Vec<ModelSelector>,
    pub train: TrainConfig,
    /// Samples taken from the front of the train split; `null` uses all of it.
    pub train_samples: Option<usize>,
    /// Samples taken from the front of the test split for reports; `null` uses all.
    pub test_samples: Option<usize>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            case_id: "case9".into(),
            dataset: DatasetParams::default(),
            models: ModelSelector::ALL.to_vec(),
            train: TrainConfig::default(),
            train_samples: Some(50),
            test_samples: Some(20),
            out: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.dataset;
        DatasetConfig {
            case_id: self.case_id.clone(),
            n_samples: d.n,
            load_scale: d.load_scale,
            sigma: d.sigma,
            eta: d.eta,
            k: d.k,
            seed: d.seed,
            train_ratio: d.train_ratio,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        load_case(&self.case_id)?;
        self.dataset_config()
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.train.validate()?;
        if self.models.is_empty() {
            return Err(CliError::Validation("model list is empty".into()));
        }
        for (i, m) in self.models.iter().enumerate() {
            if self.models[..i].contains(m) {
                return Err(CliError::Validation(format!(
                    "model {} listed twice",
                    m.name()
                )));
            }
        }
        if self.train_samples == Some(0) || self.test_samples == Some(0) {
            return Err(CliError::Validation(
                "sample limits must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Batch 32, 300 epochs and the full splits; ρ and the seed are kept.
    pub fn to_full_scale(&mut self) {
        self.train = TrainConfig {
            rho: self.train.rho,
            seed: self.train.seed,
            ..TrainConfig::full_scale()
        };
        self.dataset.n = self.dataset.n.max(500);
        self.train_samples = None;
        self.test_samples = None;
    }
}

/// Resolves a bundled id or a Matpower file path.
pub fn load_case(case_id: &str) -> Result<GridCase, CliError> {
    let text = match crate::cases::bundled(case_id) {
        Some(t) => t.to_string(),
        None => {
            let p = Path::new(case_id);
            if !p.is_file() {
                return Err(CliError::Validation(format!(
                    "unknown case '{case_id}' (not bundled, no such file)"
                )));
            }
            fs::read_to_string(p).map_err(|e| io_err(p, e))?
        }
    };
    parse_case(&text).map_err(|e| CliError::Validation(format!("case {case_id}: {e}")))
}

pub fn load_model(case_id: &str) -> Result<AdmittanceModel, CliError> {
    AdmittanceModel::from_case(&load_case(case_id)?)
        .map_err(|e| CliError::Validation(format!("case {case_id}: {e}")))
}

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

// --- gen-data -----------------------------------------------------------------------

pub fn build_dataset(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<Dataset, CliError> {
    let case = load_case(&cfg.case_id)?;
    let dc = cfg.dataset_config();
    dc.validate()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    pool(workers)?
        .install(|| generate_dataset(&case, &dc))
        .map_err(|e| CliError::Runtime(e.to_string()))
}

/// Reads `path`, or generates the configured dataset when none is given.
pub fn obtain_dataset(
    cfg: &ExperimentConfig,
    path: Option<&Path>,
    workers: Option<usize>,
) -> Result<Dataset, CliError> {
    match path {
        Some(p) => Dataset::from_json(&read(p)?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", p.display()))),
        None => build_dataset(cfg, workers),
    }
}

// --- compare ------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    /// Linear interpolation between order statistics; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self {
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFailure {
    pub scenario: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: ModelSelector,
    /// Per scenario; `null` where the estimator failed.
    pub v_rmse: Vec<Option<f64>>,
    pub theta_rmse: Vec<Option<f64>>,
    pub v_stats: Option<Quartiles>,
    pub theta_stats: Option<Quartiles>,
    pub failures: Vec<ScenarioFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub case_id: String,
    pub seed: u64,
    pub eta: f64,
    pub k: f64,
    pub sigma: f64,
    pub n_scenarios: usize,
    pub estimators: Vec<EstimatorSummary>,
}

impl CompareReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{} | {} scenarios | eta {} k {} sigma {}\n",
            self.case_id, self.n_scenarios, self.eta, self.k, self.sigma
        );
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
            "estimator", "failed", "V_q1", "V_median", "V_q3", "th_q1", "th_median", "th_q3"
        );
        for e in &self.estimators {
            let f = |q: Option<Quartiles>, pick: fn(&Quartiles) -> f64| {
                q.map_or("-".to_string(), |q| format!("{:.6e}", pick(&q)))
            };
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
                e.estimator.name(),
                e.failures.len(),
                f(e.v_stats, |q| q.q1),
                f(e.v_stats, |q| q.median),
                f(e.v_stats, |q| q.q3),
                f(e.theta_stats, |q| q.q1),
                f(e.theta_stats, |q| q.median),
                f(e.theta_stats, |q| q.q3),
            );
        }
        s
    }
}

fn run_estimator(
    which: ModelSelector,
    model: &AdmittanceModel,
    ds: &Dataset,
    s: &MeasurementSample,
    solver: &mut ConicSolver,
) -> Result<crate::StateVector, RseError> {
    let sigma = ds.nominal_sigma(s);
    match which {
        ModelSelector::WlavDirect => {
            estimate_wlav_direct(model, &s.meta, &s.z, &sigma, solver).map(|(_, r)| r.state)
        }
        ModelSelector::WlsDirect => estimate_wls(model, &s.meta, &s.z, &sigma, None),
        _ => unreachable!("not a direct estimator"),
    }
}

/// Runs the selected direct estimators over every scenario of the dataset.
pub fn compare(
    ds: &Dataset,
    estimators: &[ModelSelector],
    workers: Option<usize>,
) -> Result<CompareReport, CliError> {
    if estimators.is_empty() {
        return Err(CliError::Validation("no estimators selected".into()));
    }
    if let Some(m) = estimators.iter().find(|m| m.learned().is_some()) {
        return Err(CliError::Validation(format!(
            "{} is not a direct estimator",
            m.name()
        )));
    }
    let model = load_model(&ds.case_id)?;
    let pool = pool(workers)?;
    let mut out = Vec::new();
    for &which in estimators {
        let t = Instant::now();
        let results: Vec<Result<(f64, f64), String>> = pool.install(|| {
            ds.samples
                .par_iter()
                .map_init(ConicSolver::default, |solver, s| {
                    run_estimator(which, &model, ds, s, solver)
                        .map(|st| st.rmse(&s.true_state))
                        .map_err(|e| e.to_string())
                })
                .collect()
        });
        let mut failures = Vec::new();
        let (mut v_rmse, mut theta_rmse) = (Vec::new(), Vec::new());
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok((v, th)) => {
                    v_rmse.push(Some(v));
                    theta_rmse.push(Some(th));
                }
                Err(reason) => {
                    log::warn!("{} failed on scenario {i}: {reason}", which.name());
                    failures.push(ScenarioFailure {
                        scenario: i,
                        reason,
                    });
                    v_rmse.push(None);
                    theta_rmse.push(None);
                }
            }
        }
        log::info!(
            "{}: {} scenarios in {:.2}s",
            which.name(),
            ds.samples.len(),
            t.elapsed().as_secs_f64()
        );
        let ok = |v: &[Option<f64>]| v.iter().flatten().copied().collect::<Vec<_>>();
        out.push(EstimatorSummary {
            estimator: which,
            v_stats: Quartiles::of(&ok(&v_rmse)),
            theta_stats: Quartiles::of(&ok(&theta_rmse)),
            v_rmse,
            theta_rmse,
            failures,
        });
    }
    Ok(CompareReport {
        case_id: ds.case_id.clone(),
        seed: ds.seed,
        eta: ds.eta,
        k: ds.k,
        sigma: ds.sigma,
        n_scenarios: ds.samples.len(),
        estimators: out,
    })
}

// --- train --------------------------------------------------------------------------

/// Keeps the first `limit` entries of the train split (`None` keeps all).
pub fn limit_train(ds: &Dataset, limit: Option<usize>) -> Dataset {
    let mut d = ds.clone();
    if let Some(n) = limit {
        d.split.train.truncate(n);
    }
    d
}

fn test_samples(ds: &Dataset, limit: Option<usize>) -> Vec<&MeasurementSample> {
    ds.test().take(limit.unwrap_or(usize::MAX)).collect()
}

pub fn model_path(out: &Path, kind: ModelKind) -> PathBuf {
    out.join(format!("model_{}.json", kind.name()))
}

pub fn history_path(out: &Path, kind: ModelKind) -> PathBuf {
    out.join(format!("history_{}.csv", kind.name()))
}

/// Trains every selected learned model; returns them in selection order.
pub fn train_models(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    workers: Option<usize>,
) -> Result<Vec<TrainedModel>, CliError> {
    let kinds: Vec<ModelKind> = cfg.models.iter().filter_map(|m| m.learned()).collect();
    if kinds.is_empty() {
        return Err(CliError::Validation("no learned model selected".into()));
    }
    let model = load_model(&ds.case_id)?;
    let ds = limit_train(ds, cfg.train_samples);
    let mut out = Vec::new();
    for kind in kinds {
        let t = Instant::now();
        let tm = learn::train(&model, &ds, kind, &cfg.train, workers)?;
        log::info!(
            "{} trained in {:.1}s",
            kind.name(),
            t.elapsed().as_secs_f64()
        );
        out.push(tm);
    }
    Ok(out)
}

// --- report -------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub loss: LossBreakdown,
}

/// Four-metric table, one row per model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

const COLUMNS: [&str; 4] = ["L_hybrid", "L_acc", "L_huber", "L_reg"];

fn columns(l: &LossBreakdown) -> [f64; 4] {
    [l.l_hybrid, l.l_acc, l.l_huber, l.l_reg]
}

fn parse_row(model: &str, cells: &[&str]) -> Result<ReportRow, CliError> {
    if cells.len() != 4 {
        return Err(CliError::Validation(format!(
            "row '{model}' has {} values",
            cells.len()
        )));
    }
    let mut v = [0.0; 4];
    for (slot, c) in v.iter_mut().zip(cells) {
        *slot = c
            .trim_end_matches('*')
            .parse()
            .map_err(|_| CliError::Validation(format!("bad number '{c}' in row '{model}'")))?;
    }
    Ok(ReportRow {
        model: model.to_string(),
        loss: LossBreakdown {
            l_hybrid: v[0],
            l_acc: v[1],
            l_huber: v[2],
            l_reg: v[3],
        },
    })
}

impl ReportTable {
    /// Per column, the index of the lowest value among learned models (all rows when no
    /// learned model is present).
    pub fn best(&self) -> [Option<usize>; 4] {
        let learned: Vec<usize> = (0..self.rows.len())
            .filter(|&i| ModelKind::parse(&self.rows[i].model).is_some())
            .collect();
        let pool: Vec<usize> = if learned.is_empty() {
            (0..self.rows.len()).collect()
        } else {
            learned
        };
        let mut out = [None; 4];
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = pool.iter().copied().min_by(|&a, &b| {
                columns(&self.rows[a].loss)[c].total_cmp(&columns(&self.rows[b].loss)[c])
            });
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("model,{}\n", COLUMNS.join(","));
        for r in &self.rows {
            let v = columns(&r.loss);
            let _ = writeln!(s, "{},{:e},{:e},{:e},{:e}", r.model, v[0], v[1], v[2], v[3]);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, CliError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != format!("model,{}", COLUMNS.join(",")) {
            return Err(CliError::Validation(format!(
                "unexpected report header '{header}'"
            )));
        }
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let cells: Vec<&str> = l.split(',').collect();
                parse_row(cells[0], &cells[1..])
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }

    /// Aligned plain text; `*` marks each column's best learned model.
    pub fn to_text(&self) -> String {
        let best = self.best();
        let w = self
            .rows
            .iter()
            .map(|r| r.model.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = format!("{:<w$}", "model");
        for c in COLUMNS {
            let _ = write!(s, "  {c:>24}");
        }
        s.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(s, "{:<w$}", r.model);
            for (c, v) in columns(&r.loss).iter().enumerate() {
                let mark = if best[c] == Some(i) { "*" } else { " " };
                let _ = write!(s, "  {:>23}{mark}", format!("{v:e}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .unwrap_or_default()
            .split_whitespace()
            .collect();
        if header.len() != 5 || header[0] != "model" || header[1..] != COLUMNS {
            return Err(CliError::Validation("unexpected report header".into()));
        }
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let cells: Vec<&str> = l.split_whitespace().collect();
                parse_row(cells[0], &cells[1..])
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }
}

/// Test-split metrics of a direct estimator, with unit Huber weights like the learned
/// rows. WLAV residuals and `X` come from the relaxed solution; WLS uses `X = vvᴴ` of its
/// estimate.
fn direct_metrics(
    which: ModelSelector,
    model: &AdmittanceModel,
    ds: &Dataset,
    samples: &[&MeasurementSample],
    cfg: &TrainConfig,
    workers: Option<usize>,
) -> Result<LossBreakdown, CliError> {
    let phys = Physics::new(model, &samples[0].meta)?;
    let unit = vec![1.0; phys.n_meas()];
    let losses: Vec<Result<LossBreakdown, String>> = pool(workers)?.install(|| {
        samples
            .par_iter()
            .map_init(ConicSolver::default, |solver, s| {
                let truth = s.true_state.stacked();
                let sigma = ds.nominal_sigma(s);
                let (state, eps, x) = match which {
                    ModelSelector::WlavDirect => {
                        let (sol, rec) = estimate_wlav_direct(model, &s.meta, &s.z, &sigma, solver)
                            .map_err(|e| e.to_string())?;
                        let p = phys.x_dim();
                        (rec.state, sol.eps, sol.x[..p].to_vec())
                    }
                    _ => {
                        let st = estimate_wls(model, &s.meta, &s.z, &sigma, None)
                            .map_err(|e| e.to_string())?;
                        let x = phys.state_x(&st.stacked());
                        let eps = phys.residuals_at(&s.z, &x);
                        (st, eps, x)
                    }
                };
                Ok(LossBreakdown::new(
                    mse(&state.stacked(), &truth),
                    huber_loss(&eps, &unit, cfg.delta),
                    phys.power_loss(&x),
                    cfg.rho,
                ))
            })
            .collect()
    });
    let mut ok = Vec::new();
    for (i, l) in losses.into_iter().enumerate() {
        match l {
            Ok(l) => ok.push(l),
            Err(e) => log::warn!("{} failed on test sample {i}: {e}", which.name()),
        }
    }
    if ok.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} failed on every test sample",
            which.name()
        )));
    }
    Ok(LossBreakdown::mean(&ok))
}

/// Evaluates trained models and direct estimators on the test split.
pub fn report(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    trained: &[TrainedModel],
    workers: Option<usize>,
) -> Result<ReportTable, CliError> {
    let model = load_model(&ds.case_id)?;
    let samples = test_samples(ds, cfg.test_samples);
    if samples.is_empty() {
        return Err(CliError::Validation("test split is empty".into()));
    }
    let mut rows = Vec::new();
    for &sel in &cfg.models {
        let loss = match sel.learned() {
            Some(kind) => {
                let tm = trained.iter().find(|t| t.kind == kind).ok_or_else(|| {
                    CliError::Runtime(format!("no trained {} model", kind.name()))
                })?;
                if tm.case_id != ds.case_id {
                    return Err(CliError::Validation(format!(
                        "{} model was trained on {} but the dataset is {}",
                        kind.name(),
                        tm.case_id,
                        ds.case_id
                    )));
                }
                evaluate(tm, &model, &samples, workers)?.mean
            }
            None => direct_metrics(sel, &model, ds, &samples, &cfg.train, workers)?,
        };
        rows.push(ReportRow {
            model: sel.name().to_string(),
            loss,
        });
    }
    Ok(ReportTable { rows })
}

// --- command line -------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "rse", version, about = "Robust state estimation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the dataset and training seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the scenario dataset (`dataset.json`).
    GenData,
    /// WLAV vs WLS RMSE over all scenarios (`compare.json`, `compare.txt`).
    Compare {
        /// Dataset file; generated from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train the selected learned models (`model_<kind>.json`, `history_<kind>.csv`).
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Batch 32, 300 epochs, at least 500 scenarios, full splits.
        #[arg(long)]
        full_scale: bool,
    },
    /// Four-metric test table from trained models in the output directory
    /// (`report.csv`, `report.txt`).
    Report {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Match the limits used by `train --full-scale`.
        #[arg(long)]
        full_scale: bool,
    },
    /// Finite-difference check of all learnable parameters on the 3-bus toy
    /// (`gradcheck.json`).
    Gradcheck {
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

/// Largest accepted relative gradient error.
pub const GRADCHECK_TOL: f64 = 1e-3;

fn config_from(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_json(&read(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if cli.workers == Some(0) {
        return Err(CliError::Validation("--workers must be at least 1".into()));
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = config_from(&cli)?;
    if let Command::Train {
        full_scale: true, ..
    }
    | Command::Report {
        full_scale: true, ..
    } = cli.command
    {
        cfg.to_full_scale();
    }
    cfg.validate()?;
    let workers = cli.workers;
    let out = cfg.out.clone();
    match &cli.command {
        Command::GenData => {
            let ds = build_dataset(&cfg, workers)?;
            let path = out.join("dataset.json");
            write(&path, &ds.to_json())?;
            println!(
                "{}: {} scenarios ({} train / {} test) -> {}",
                ds.case_id,
                ds.samples.len(),
                ds.split.train.len(),
                ds.split.test.len(),
                path.display()
            );
        }
        Command::Compare { dataset } => {
            let ds = obtain_dataset(&cfg, dataset.as_deref(), workers)?;
            let est: Vec<ModelSelector> = cfg
                .models
                .iter()
                .copied()
                .filter(|m| m.learned().is_none())
                .collect();
            let rep = compare(&ds, &est, workers)?;
            let json = serde_json::to_string_pretty(&rep).expect("report serializes");
            write(&out.join("compare.json"), &json)?;
            let text = rep.to_text();
            write(&out.join("compare.txt"), &text)?;
            print!("{text}");
        }
        Command::Train { dataset, .. } => {
            let ds = obtain_dataset(&cfg, dataset.as_deref(), workers)?;
            for tm in train_models(&cfg, &ds, workers)? {
                write(&model_path(&out, tm.kind), &tm.to_json())?;
                write(&history_path(&out, tm.kind), &tm.history_csv())?;
                if let (Some(a), Some(b)) = (tm.history.first(), tm.history.last()) {
                    println!(
                        "{}: rho {} | L_hybrid {:.6e} (epoch {}) -> {:.6e} (epoch {})",
                        tm.kind.name(),
                        tm.config.rho,
                        a.loss.l_hybrid,
                        a.epoch,
                        b.loss.l_hybrid,
                        b.epoch
                    );
                }
            }
        }
        Command::Report { dataset, .. } => {
            let ds = obtain_dataset(&cfg, dataset.as_deref(), workers)?;
            let mut trained = Vec::new();
            for kind in cfg.models.iter().filter_map(|m| m.learned()) {
                let text = read(&model_path(&out, kind))?;
                trained.push(TrainedModel::from_json(&text)?);
            }
            let table = report(&cfg, &ds, &trained, workers)?;
            write(&out.join("report.csv"), &table.to_csv())?;
            let text = table.to_text();
            write(&out.join("report.txt"), &text)?;
            print!("{text}");
        }
        Command::Gradcheck { step } => {
            if !(*step > 0.0) {
                return Err(CliError::Validation(format!(
                    "step must be positive, got {step}"
                )));
            }
            let (model, meta, z, target) = learn::toy_check_sample(cfg.train.seed)?;
            let rep = learn::gradient_check(&model, &meta, &z, &target, &cfg.train, *step)?;
            let json = serde_json::to_string_pretty(&rep).expect("report serializes");
            write(&out.join("gradcheck.json"), &json)?;
            for g in &rep.groups {
                println!(
                    "{:<16} n={:<4} |g|={:.3e} rel={:.3e}",
                    g.name, g.n, g.norm, g.rel_error
                );
            }
            if rep.max_rel_error >= GRADCHECK_TOL {
                return Err(CliError::Runtime(format!(
                    "gradient check failed: max relative error {:.3e}",
                    rep.max_rel_error
                )));
            }
            println!("max relative error {:.3e} (ok)", rep.max_rel_error);
        }
    }
    Ok(())
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_interpolate() {
        let q = Quartiles::of(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap();
        assert_eq!(
            (q.min, q.q1, q.median, q.q3, q.max),
            (1.0, 2.0, 3.0, 4.0, 5.0)
        );
        let q = Quartiles::of(&[1.0, 2.0]).unwrap();
        assert_eq!(q.median, 1.5);
        assert!(Quartiles::of(&[]).is_none());
    }

    #[test]
    fn report_roundtrips_through_csv_and_text() {
        let row = |m: &str, a: f64, h: f64| ReportRow {
            model: m.into(),
            loss: LossBreakdown::new(a, h, 0.046_313_2, 1.0),
        };
        let t = ReportTable {
            rows: vec![
                row("opt_layer", 4.59e-6, 1.156_789e-6),
                row("fcnn_mse", 1.000_7e-5, 2.14e-5),
                row("wlav_direct", 1e-7, 0.1 + 0.2),
            ],
        };
        assert_eq!(ReportTable::from_csv(&t.to_csv()).unwrap(), t);
        assert_eq!(ReportTable::from_text(&t.to_text()).unwrap(), t);
        // best markers ignore the direct estimator row
        assert_eq!(t.best()[1], Some(0));
        let text = t.to_text();
        assert!(text.lines().nth(1).unwrap().contains("e-6*"));
        let widths: Vec<usize> = text.lines().map(|l| l.chars().count()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{text}");
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.dataset.eta = 1.2;
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        let mut c = ExperimentConfig::default();
        c.case_id = "no_such_case".into();
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
        let mut c = ExperimentConfig::default();
        c.models.clear();
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_json(r#"{"models": ["gurobi"]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let c =
            ExperimentConfig::from_json(r#"{"case_id": "case14", "train": {"rho": 10}}"#).unwrap();
        assert_eq!((c.train.rho, c.train.epochs, c.dataset.n), (10.0, 30, 200));
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn full_scale_keeps_rho_and_seed() {
        let mut c = ExperimentConfig::default();
        c.train.rho = 0.1;
        c.train.seed = 9;
        c.to_full_scale();
        assert_eq!(
            (c.train.batch, c.train.epochs, c.train.rho, c.train.seed),
            (32, 300, 0.1, 9)
        );
        assert_eq!((c.train_samples, c.dataset.n), (None, 500));
    }

    #[test]
    fn compare_rejects_empty_and_learned_selectors() {
        let cfg = ExperimentConfig {
            dataset: DatasetParams {
                n: 2,
                ..DatasetParams::default()
            },
            ..ExperimentConfig::default()
        };
        let ds = build_dataset(&cfg, Some(1)).unwrap();
        assert_eq!(compare(&ds, &[], None).unwrap_err().exit_code(), 2);
        assert!(compare(&ds, &[ModelSelector::OptLayer], None).is_err());
    }
}
