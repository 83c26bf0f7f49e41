//! Run drivers behind the command line: fit, simulate, diagnose, evaluate.
//!
//! Each driver takes a serializable config, writes `manifest.json` plus its
//! tables into an output directory, and stamps every table with the manifest
//! hash. Output bytes depend only on the config and the input files, never on
//! the worker count or completion order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{rhat_report, RhatReport, DEFAULT_RHAT_THRESHOLD};
use crate::distributions::stream_key;
use crate::gibbs::{run_chains_from, DrawStore, Quantity};
use crate::io::{self, fmt_f64, load_panel, InputFile, Manifest, Table};
use crate::metrics::{best_model_counts, negative_truths, score, Distribution6, FitScore, Measure};
use crate::model::{ModelTag, Monitor, SamplerSettings, SourcePanel};
use crate::simgen::{generate, load_spec_grid, spec_table, synthetic_observed_v, DeltaScope, SimSpec, VSource};
use crate::summary::{kappa_posterior_mean, mean, phi_distribution, summarize};
use crate::{Error, Result};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "GLSHRINK_WORKERS";

/// Stream domain of simulation fits.
const FIT_DOMAIN: u64 = 0x4649_5453;

pub const PROGRESS_FILE: &str = "progress.jsonl";

/// Worker count from the environment, if set.
pub fn workers_from_env() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("{WORKERS_ENV}={s:?} is not a positive integer"))),
        Err(_) => Ok(None),
    }
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Execution controls that do not affect output bytes.
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    pub workers: Option<usize>,
    /// Continue from an existing progress log in the output directory.
    pub resume: bool,
    /// Stop after this many new simulation work items (for staged runs).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Complete,
    /// Stopped early; `remaining` work items are left for a resumed run.
    Stopped { remaining: usize },
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest_hash: String,
    pub files: Vec<PathBuf>,
    /// Human-readable report for the terminal.
    pub report: String,
    pub status: RunStatus,
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub panel: InputFile,
    pub models: Vec<ModelTag>,
    /// Source used by the single-source model.
    pub source: Option<String>,
    pub settings: SamplerSettings,
    /// Credible level of the intervals.
    pub level: f64,
    pub save_draws: bool,
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("no models requested".into()));
        }
        let distinct: BTreeSet<_> = self.models.iter().collect();
        if distinct.len() != self.models.len() {
            return Err(Error::Config("a model is requested twice".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("credible level {} is not in (0, 1)", self.level)));
        }
        self.settings.validate()
    }
}

/// File-name stem of a model.
pub fn model_stem(tag: ModelTag) -> String {
    tag.name().to_ascii_lowercase()
}

fn panel_for(panel: &SourcePanel, tag: ModelTag, source: Option<&str>) -> Result<SourcePanel> {
    if tag != ModelTag::OneSource {
        return Ok(panel.clone());
    }
    let j = match source {
        Some(name) => panel
            .source_index(name)
            .ok_or_else(|| Error::Config(format!("source {name:?} is not in the panel ({:?})", panel.sources())))?,
        None if panel.n_sources() == 1 => 0,
        None => {
            return Err(Error::Config(format!(
                "the single-source model needs --source, one of {:?}",
                panel.sources()
            )))
        }
    };
    panel.select_source(j)
}

pub fn run_fit(config: &FitConfig, out: &Path, control: &RunControl) -> Result<RunOutcome> {
    config.validate()?;
    config.panel.verify()?;
    let panel = load_panel(&config.panel.path)?;
    let manifest = Manifest::new("fit", config)?;
    let hash = manifest.hash();
    create_dir(out)?;

    let mut settings = config.settings.clone();
    settings.monitor = Monitor::default();
    let mut files = vec![manifest.write(out)?];
    let mut report = String::new();

    for &tag in &config.models {
        let stem = model_stem(tag);
        let p = panel_for(&panel, tag, config.source.as_deref()).map_err(|e| e.context(format!("fitting {tag}")))?;
        let store = with_pool(control.workers, || run_chains_from(&p, tag, &settings, 0, true))?
            .map_err(|e| e.context(format!("fitting {tag}")))?;

        let sums = summarize(&store, Quantity::Mu, config.level)?;
        let mut t = Table::new(&hash, &["area", "mean", "sd", "lower", "upper"]);
        for (a, s) in p.areas().iter().zip(&sums) {
            t.row([a.clone(), fmt_f64(s.mean), fmt_f64(s.sd), fmt_f64(s.lower), fmt_f64(s.upper)]);
        }
        files.push(write_table(&t, out, &format!("summary_{stem}.csv"))?);

        let phi = phi_distribution(&store)?;
        let mut t = Table::new(&hash, &["area", "min", "q1", "median", "q3", "max"]);
        for (a, f) in p.areas().iter().zip(&phi) {
            t.row([a.clone(), fmt_f64(f.min), fmt_f64(f.q1), fmt_f64(f.median), fmt_f64(f.q3), fmt_f64(f.max)]);
        }
        files.push(write_table(&t, out, &format!("phi_{stem}.csv"))?);

        if let Ok(kappa) = kappa_posterior_mean(&store, &p) {
            let mut t = Table::new(&hash, &["area", "source", "kappa"]);
            let n_j = p.n_sources();
            for (cell, k) in kappa.iter().enumerate() {
                t.row([p.areas()[cell / n_j].clone(), p.sources()[cell % n_j].clone(), fmt_f64(*k)]);
            }
            files.push(write_table(&t, out, &format!("kappa_{stem}.csv"))?);
        }

        let _ = writeln!(report, "{tag}: {} areas, {} chains x {} kept draws", p.n_areas(), store.n_chains(), store.kept_per_chain());
        if store.n_chains() > 1 {
            let mut qs = vec![Quantity::Mu, Quantity::Eta];
            if tag.has_theta() {
                qs.push(Quantity::Tau1Sq);
            }
            qs.push(Quantity::Tau2Sq);
            let rh = rhat_report(&store, &qs, DEFAULT_RHAT_THRESHOLD)?;
            let t = rhat_table(&hash, &rh);
            report.push_str(&render_rhat(&rh));
            files.push(write_table(&t, out, &format!("rhat_{stem}.csv"))?);
        }

        if config.save_draws {
            let dir = out.join("draws").join(&stem);
            create_dir(&dir)?;
            for q in store.traces.keys() {
                files.push(write_draws(&store, *q, &hash, &dir)?);
            }
        }
    }
    Ok(RunOutcome {
        manifest_hash: hash,
        files,
        report,
        status: RunStatus::Complete,
    })
}

fn write_table(t: &Table, dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    t.write(&path)?;
    Ok(path)
}

fn rhat_table(hash: &str, rh: &RhatReport) -> Table {
    let mut t = Table::new(hash, &["parameter", "rhat", "pass"]);
    for e in &rh.entries {
        t.row([e.parameter.clone(), fmt_f64(e.rhat), e.pass.to_string()]);
    }
    t
}

fn render_rhat(rh: &RhatReport) -> String {
    let mut s = format!("{:<16} {:>10}  pass (R-hat < {})\n", "parameter", "rhat", rh.threshold);
    for e in &rh.entries {
        let _ = writeln!(s, "{:<16} {:>10.5}  {}", e.parameter, e.rhat, if e.pass { "yes" } else { "NO" });
    }
    let _ = writeln!(s, "max R-hat {:.5}: {}", rh.max(), if rh.pass() { "pass" } else { "FAIL" });
    s
}

/// Writes the draws of one quantity as `chain,iteration,<q>[1],...`.
fn write_draws(store: &DrawStore, q: Quantity, hash: &str, dir: &Path) -> Result<PathBuf> {
    let trace = store.trace(q).ok_or(Error::NotMonitored(q.name()))?;
    let names: Vec<String> = (0..trace.dim).map(|k| format!("{}[{}]", q.name(), k + 1)).collect();
    let mut header = vec!["chain", "iteration"];
    header.extend(names.iter().map(String::as_str));
    let mut t = Table::new(hash, &header);
    let s = &store.settings;
    for c in 0..trace.n_chains() {
        for k in 0..trace.kept() {
            let iteration = s.n_burnin + (k + 1) * s.thin;
            let mut row = vec![(c + 1).to_string(), iteration.to_string()];
            row.extend(trace.draw(c, k).iter().map(|x| fmt_f64(*x)));
            t.row(row);
        }
    }
    write_table(&t, dir, &format!("{}.csv", q.name()))
}

// ---------------------------------------------------------------- diagnose

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseConfig {
    /// Draw files, one per quantity, as written by `fit --save-draws`.
    pub draws: Vec<InputFile>,
    pub threshold: f64,
}

impl DiagnoseConfig {
    /// Every `.csv` file of `dir`, in name order.
    pub fn from_dir(dir: &Path, threshold: f64) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Config(format!("no draw files in {}", dir.display())));
        }
        Ok(Self {
            draws: paths.iter().map(|p| InputFile::new(p)).collect::<Result<_>>()?,
            threshold,
        })
    }
}

/// Parses a draw file into `(column name, per-chain series)`.
pub fn read_draws(path: &Path) -> Result<Vec<(String, Vec<Vec<f64>>)>> {
    let err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "chain" {
        return Err(err(1, "expected columns chain,iteration,<values>".into()));
    }
    let names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
    let mut chains: BTreeMap<u64, Vec<Vec<f64>>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let chain: u64 = rec[0].parse().map_err(|_| err(line, "bad chain id".into()))?;
        let cols = chains.entry(chain).or_insert_with(|| vec![Vec::new(); names.len()]);
        for (k, field) in rec.iter().skip(2).enumerate() {
            let x: f64 = field.parse().map_err(|_| err(line, format!("{field:?} is not a number")))?;
            cols.get_mut(k).ok_or_else(|| err(line, "too many fields".into()))?.push(x);
        }
    }
    Ok(names
        .into_iter()
        .enumerate()
        .map(|(k, n)| (n, chains.values().map(|c| c[k].clone()).collect()))
        .collect())
}

pub fn run_diagnose(config: &DiagnoseConfig, out: Option<&Path>) -> Result<RunOutcome> {
    let manifest = Manifest::new("diagnose", config)?;
    let hash = manifest.hash();
    let mut rh = RhatReport {
        threshold: config.threshold,
        entries: Vec::new(),
    };
    for f in &config.draws {
        f.verify()?;
        for (name, chains) in read_draws(&f.path)? {
            rh.push(name.clone(), &chains)
                .map_err(|e| e.context(format!("{}: {name}", f.path.display())))?;
        }
    }
    let mut files = Vec::new();
    if let Some(dir) = out {
        create_dir(dir)?;
        files.push(manifest.write(dir)?);
        files.push(write_table(&rhat_table(&hash, &rh), dir, "rhat.csv")?);
    }
    Ok(RunOutcome {
        manifest_hash: hash,
        files,
        report: render_rhat(&rh),
        status: RunStatus::Complete,
    })
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateConfig {
    /// `area` plus one of `mean`, `estimate`, `value`.
    pub estimates: InputFile,
    /// `area` plus one of `truth`, `value`.
    pub truths: InputFile,
}

pub fn run_evaluate(config: &EvaluateConfig, out: Option<&Path>) -> Result<RunOutcome> {
    config.estimates.verify()?;
    config.truths.verify()?;
    let est = io::read_keyed_column(&config.estimates.path, "area", &["mean", "estimate", "value"])?;
    let truth = io::read_keyed_column(&config.truths.path, "area", &["truth", "value"])?;
    let lookup: BTreeMap<&str, f64> = est.iter().map(|(a, v)| (a.as_str(), *v)).collect();
    if lookup.len() != est.len() {
        return Err(Error::Config("an area appears twice among the estimates".into()));
    }
    let mut e = Vec::with_capacity(truth.len());
    for (a, _) in &truth {
        e.push(*lookup.get(a.as_str()).ok_or_else(|| Error::Config(format!("no estimate for area {a}")))?);
    }
    let t: Vec<f64> = truth.iter().map(|(_, v)| *v).collect();
    let s = score(&e, &t)?;
    let neg = negative_truths(&t);

    let manifest = Manifest::new("evaluate", config)?;
    let hash = manifest.hash();
    let mut table = Table::new(&hash, &["measure", "value"]);
    let mut report = String::new();
    for m in Measure::ALL {
        table.row([m.name().to_string(), fmt_f64(s.get(m))]);
        let _ = writeln!(report, "{:<5} {}", m.name(), s.get(m));
    }
    table.row(["areas".to_string(), t.len().to_string()]);
    table.row(["negative_truths".to_string(), neg.to_string()]);
    let _ = writeln!(report, "{} areas, {} negative truths", t.len(), neg);
    let mut files = Vec::new();
    if let Some(dir) = out {
        create_dir(dir)?;
        files.push(manifest.write(dir)?);
        files.push(write_table(&table, dir, "evaluate.csv")?);
    }
    Ok(RunOutcome {
        manifest_hash: hash,
        files,
        report,
        status: RunStatus::Complete,
    })
}

// ---------------------------------------------------------------- simulate

/// A model as fitted in the simulation study. The single-source fits use
/// source 1 (`Mbr`) or source 2 (`Msa`) of the generated panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimModel {
    M11a,
    M11b,
    M1a,
    M1b,
    M12,
    Mbr,
    Msa,
}

impl SimModel {
    pub fn name(self) -> &'static str {
        match self {
            SimModel::M11a => "M11a",
            SimModel::M11b => "M11b",
            SimModel::M1a => "M1a",
            SimModel::M1b => "M1b",
            SimModel::M12 => "M12",
            SimModel::Mbr => "MBR",
            SimModel::Msa => "MSA",
        }
    }

    pub fn tag(self) -> ModelTag {
        match self {
            SimModel::M11a => ModelTag::M11a,
            SimModel::M11b => ModelTag::M11b,
            SimModel::M1a => ModelTag::M1a,
            SimModel::M1b => ModelTag::M1b,
            SimModel::M12 => ModelTag::M12,
            SimModel::Mbr | SimModel::Msa => ModelTag::OneSource,
        }
    }

    fn source(self) -> Option<usize> {
        match self {
            SimModel::Mbr => Some(0),
            SimModel::Msa => Some(1),
            _ => None,
        }
    }

    fn code(self) -> u64 {
        self as u64
    }

    /// Default model list and base model for a case.
    pub fn defaults_for_case(case_id: u8) -> (Vec<SimModel>, SimModel) {
        if case_id >= 5 {
            (vec![SimModel::M12, SimModel::M1a, SimModel::Msa, SimModel::Mbr], SimModel::M1a)
        } else {
            (
                vec![SimModel::M11a, SimModel::M11b, SimModel::M1a, SimModel::M1b, SimModel::M12],
                SimModel::M12,
            )
        }
    }
}

impl FromStr for SimModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m11a" => Ok(SimModel::M11a),
            "m11b" => Ok(SimModel::M11b),
            "m1a" => Ok(SimModel::M1a),
            "m1b" => Ok(SimModel::M1b),
            "m12" => Ok(SimModel::M12),
            "mbr" => Ok(SimModel::Mbr),
            "msa" => Ok(SimModel::Msa),
            other => Err(Error::Config(format!("unknown simulation model {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// 30 replicates, 6 000 sweeps, 1 000 burn-in.
    Desk,
    /// 100 replicates, 18 000 sweeps, 3 000 burn-in.
    Paper,
}

impl Preset {
    /// `(replicates, n_iter, n_burnin)`
    pub fn values(self) -> (usize, usize, usize) {
        match self {
            Preset::Desk => (30, 6_000, 1_000),
            Preset::Paper => (100, 18_000, 3_000),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpecSelection {
    All,
    /// 1-based rows of the case table.
    Rows(Vec<usize>),
    File(InputFile),
}

/// Sampling variances of the simulated panels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VarianceInput {
    /// Synthetic matrix from the run seed, fixed across replicates.
    Synthetic,
    /// Squared standard errors of a panel file, fixed across replicates.
    Panel(InputFile),
    /// Fresh resample per replicate from the squared standard errors of a
    /// panel file.
    BootstrapPanel(InputFile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub case_id: u8,
    pub specs: SpecSelection,
    pub replicates: usize,
    pub models: Vec<SimModel>,
    pub base: SimModel,
    pub n_iter: usize,
    pub n_burnin: usize,
    pub thin: usize,
    pub seed: u64,
    pub variances: VarianceInput,
    pub delta_scope: DeltaScope,
}

impl SimConfig {
    /// Config with the case defaults and preset sizes.
    pub fn new(case_id: u8, preset: Preset, seed: u64) -> Self {
        let (replicates, n_iter, n_burnin) = preset.values();
        let (models, base) = SimModel::defaults_for_case(case_id);
        Self {
            case_id,
            specs: SpecSelection::All,
            replicates,
            models,
            base,
            n_iter,
            n_burnin,
            thin: 1,
            seed,
            variances: VarianceInput::Synthetic,
            delta_scope: DeltaScope::Unit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.case_id) {
            return Err(Error::Config(format!("case must be 1-6, got {}", self.case_id)));
        }
        if self.replicates == 0 {
            return Err(Error::Config("at least one replicate is needed".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("no models requested".into()));
        }
        let distinct: BTreeSet<_> = self.models.iter().collect();
        if distinct.len() != self.models.len() {
            return Err(Error::Config("a model is requested twice".into()));
        }
        if !self.models.contains(&self.base) {
            return Err(Error::Config(format!("base model {} is not among the models", self.base.name())));
        }
        self.sampler_settings().validate()
    }

    fn sampler_settings(&self) -> SamplerSettings {
        SamplerSettings {
            n_iter: self.n_iter,
            n_burnin: self.n_burnin,
            n_chains: 1,
            thin: self.thin,
            seed: self.seed,
            overdispersion: 0.0,
            monitor: Monitor::mu_only(),
            scan: Default::default(),
        }
    }

    /// Selected specification rows with panel dimensions filled in.
    pub fn resolve_specs(&self) -> Result<Vec<SimSpec>> {
        let table = match &self.specs {
            SpecSelection::File(f) => {
                f.verify()?;
                let s = load_spec_grid(&f.path)?;
                if let Some(bad) = s.iter().find(|s| s.case_id != self.case_id) {
                    return Err(Error::Config(format!(
                        "specification file row {} belongs to case {}, not {}",
                        bad.row, bad.case_id, self.case_id
                    )));
                }
                s
            }
            _ => spec_table(self.case_id)?,
        };
        let mut specs = match &self.specs {
            SpecSelection::Rows(rows) => rows
                .iter()
                .map(|r| {
                    table.iter().find(|s| s.row == *r).cloned().ok_or_else(|| {
                        Error::Config(format!("case {} has no row {r} (1-{})", self.case_id, table.len()))
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            _ => table,
        };
        let dims = match &self.variances {
            VarianceInput::Panel(f) | VarianceInput::BootstrapPanel(f) => {
                f.verify()?;
                let p = load_panel(&f.path)?;
                Some((p.n_areas(), p.n_sources()))
            }
            VarianceInput::Synthetic => None,
        };
        for s in &mut specs {
            if let Some((i, j)) = dims {
                s.n_areas = i;
                s.n_sources = j;
            }
            s.delta_scope = self.delta_scope;
        }
        for m in &self.models {
            if let Some(j) = m.source() {
                if specs.iter().any(|s| s.n_sources <= j) {
                    return Err(Error::Config(format!("{} needs a panel with at least {} sources", m.name(), j + 1)));
                }
            }
        }
        Ok(specs)
    }

    fn variance_source(&self, specs: &[SimSpec]) -> Result<VSource> {
        let (n_i, n_j) = specs.first().map_or((0, 0), |s| (s.n_areas, s.n_sources));
        Ok(match &self.variances {
            VarianceInput::Synthetic => VSource::Fixed(synthetic_observed_v(n_i, n_j, self.seed)),
            VarianceInput::Panel(f) => VSource::Fixed(load_panel(&f.path)?.v_values().to_vec()),
            VarianceInput::BootstrapPanel(f) => VSource::Bootstrap(load_panel(&f.path)?.v_values().to_vec()),
        })
    }
}

/// One (specification, replicate, model) fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WorkItem {
    pub row: usize,
    pub replicate: usize,
    pub model: SimModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ItemResult {
    Scored { score: FitScore, negative_truths: usize },
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProgressLine {
    item: WorkItem,
    result: ItemResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProgressHeader {
    manifest: String,
}

/// Posterior means of μ for one work item together with the truth.
pub fn fit_work_item(config: &SimConfig, spec: &SimSpec, v: &VSource, item: WorkItem) -> Result<(Vec<f64>, Vec<f64>)> {
    let sim = generate(spec, v, config.seed, item.replicate as u64)?;
    let panel = match item.model.source() {
        Some(j) => sim.panel.select_source(j)?,
        None => sim.panel,
    };
    let stream = stream_key(&[
        FIT_DOMAIN,
        spec.case_id as u64,
        spec.row as u64,
        item.replicate as u64,
        item.model.code(),
    ]);
    let store = run_chains_from(&panel, item.model.tag(), &config.sampler_settings(), stream, false)?;
    let trace = store.trace(Quantity::Mu).ok_or(Error::NotMonitored("mu"))?;
    let est = (0..trace.dim).map(|i| mean(&trace.pooled(i))).collect();
    Ok((est, sim.truth_mu))
}

fn evaluate_item(config: &SimConfig, spec: &SimSpec, v: &VSource, item: WorkItem) -> ItemResult {
    match fit_work_item(config, spec, v, item).and_then(|(e, t)| Ok((score(&e, &t)?, negative_truths(&t)))) {
        Ok((score, negative_truths)) => ItemResult::Scored { score, negative_truths },
        Err(e) => ItemResult::Failed(one_line(&e.to_string())),
    }
}

/// Joins a multi-line error into one table cell of bounded length.
fn one_line(msg: &str) -> String {
    const MAX: usize = 300;
    let joined = msg
        .lines()
        .map(|l| l.trim().trim_start_matches("- "))
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ");
    match joined.char_indices().nth(MAX) {
        Some((cut, _)) => format!("{}...", &joined[..cut]),
        None => joined,
    }
}

fn read_progress(path: &Path, hash: &str) -> Result<BTreeMap<WorkItem, ItemResult>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header: ProgressHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l.map_err(|e| Error::io(path, e))?)?,
        None => return Ok(BTreeMap::new()),
    };
    if header.manifest != hash {
        return Err(Error::Config(format!(
            "{} belongs to a different run (manifest {}), refusing to resume",
            path.display(),
            header.manifest
        )));
    }
    let mut done = BTreeMap::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        // A torn final line from an interrupted write is dropped.
        if let Ok(p) = serde_json::from_str::<ProgressLine>(&line) {
            done.insert(p.item, p.result);
        }
    }
    Ok(done)
}

pub fn run_simulation(config: &SimConfig, out: &Path, control: &RunControl) -> Result<RunOutcome> {
    config.validate()?;
    let specs = config.resolve_specs()?;
    let v = config.variance_source(&specs)?;
    let manifest = Manifest::new("simulate", config)?;
    let hash = manifest.hash();
    create_dir(out)?;
    let progress_path = out.join(PROGRESS_FILE);

    let mut done = if control.resume && progress_path.exists() {
        read_progress(&progress_path, &hash)?
    } else {
        BTreeMap::new()
    };
    // Rewrite the log so that it holds exactly the known results.
    {
        let mut f = File::create(&progress_path).map_err(|e| Error::io(&progress_path, e))?;
        let mut text = serde_json::to_string(&ProgressHeader { manifest: hash.clone() })?;
        text.push('\n');
        for (item, result) in &done {
            text.push_str(&serde_json::to_string(&ProgressLine {
                item: *item,
                result: result.clone(),
            })?);
            text.push('\n');
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&progress_path, e))?;
    }

    let all_items: Vec<(usize, WorkItem)> = specs
        .iter()
        .enumerate()
        .flat_map(|(k, s)| {
            (0..config.replicates).flat_map(move |r| {
                config.models.iter().map(move |&m| {
                    (
                        k,
                        WorkItem {
                            row: s.row,
                            replicate: r,
                            model: m,
                        },
                    )
                })
            })
        })
        .collect();
    let mut todo: Vec<(usize, WorkItem)> = all_items.iter().filter(|(_, it)| !done.contains_key(it)).copied().collect();
    let remaining_after = match control.stop_after {
        Some(n) if n < todo.len() => {
            let rest = todo.len() - n;
            todo.truncate(n);
            rest
        }
        _ => 0,
    };

    let log = Mutex::new(
        OpenOptions::new()
            .append(true)
            .open(&progress_path)
            .map_err(|e| Error::io(&progress_path, e))?,
    );
    let new_results: Vec<(WorkItem, ItemResult)> = with_pool(control.workers, || {
        todo.par_iter()
            .map(|&(k, item)| {
                let result = evaluate_item(config, &specs[k], &v, item);
                let mut line = serde_json::to_string(&ProgressLine {
                    item,
                    result: result.clone(),
                })?;
                line.push('\n');
                let mut f = log.lock().expect("progress log lock");
                f.write_all(line.as_bytes()).map_err(|e| Error::io(&progress_path, e))?;
                Ok((item, result))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    done.extend(new_results);

    if remaining_after > 0 {
        return Ok(RunOutcome {
            manifest_hash: hash,
            files: vec![progress_path],
            report: format!("stopped with {remaining_after} work items left; rerun with --resume\n"),
            status: RunStatus::Stopped {
                remaining: remaining_after,
            },
        });
    }

    let tables = SimTables::assemble(config, &specs, &done, &hash)?;
    let mut files = vec![manifest.write(out)?];
    for (name, t) in &tables.tables {
        files.push(write_table(t, out, name)?);
    }
    fs::remove_file(&progress_path).map_err(|e| Error::io(&progress_path, e))?;
    Ok(RunOutcome {
        manifest_hash: hash,
        files,
        report: tables.report,
        status: RunStatus::Complete,
    })
}

/// Aggregated simulation output.
#[derive(Debug, Clone)]
pub struct SimTables {
    pub tables: Vec<(String, Table)>,
    pub report: String,
    /// Replicate medians per (row, model); `None` when no replicate scored.
    pub medians: BTreeMap<(usize, SimModel), Option<FitScore>>,
}

fn ratio_name(m: SimModel, base: SimModel) -> String {
    format!("{}/{}", m.name(), base.name())
}

impl SimTables {
    fn assemble(config: &SimConfig, specs: &[SimSpec], done: &BTreeMap<WorkItem, ItemResult>, hash: &str) -> Result<Self> {
        let mut scores = Table::new(
            hash,
            &["row", "replicate", "model", "ARB", "ASRB", "AAD", "ASD", "negative_truths"],
        );
        let mut failures = Table::new(hash, &["row", "replicate", "model", "error"]);
        let mut medians_t = Table::new(hash, &["row", "model", "replicates", "ARB", "ASRB", "AAD", "ASD", "complete"]);
        let mut medians = BTreeMap::new();
        let mut complete = BTreeMap::new();
        let mut n_failed = 0usize;

        for s in specs {
            let mut spec_complete = true;
            for &m in &config.models {
                let mut ok = Vec::new();
                for r in 0..config.replicates {
                    let item = WorkItem {
                        row: s.row,
                        replicate: r,
                        model: m,
                    };
                    match done.get(&item) {
                        Some(ItemResult::Scored { score, negative_truths }) => {
                            scores.row(
                                [s.row.to_string(), r.to_string(), m.name().to_string()]
                                    .into_iter()
                                    .chain(Measure::ALL.iter().map(|q| fmt_f64(score.get(*q))))
                                    .chain([negative_truths.to_string()]),
                            );
                            ok.push(*score);
                        }
                        Some(ItemResult::Failed(msg)) => {
                            failures.row([s.row.to_string(), r.to_string(), m.name().to_string(), msg.clone()]);
                            spec_complete = false;
                            n_failed += 1;
                        }
                        None => return Err(Error::Config(format!("missing result for {item:?}"))),
                    }
                }
                let med = crate::metrics::aggregate(&ok).ok();
                medians_t.row(
                    [s.row.to_string(), m.name().to_string(), ok.len().to_string()]
                        .into_iter()
                        .chain(Measure::ALL.iter().map(|q| med.map_or("NA".to_string(), |x| fmt_f64(x.get(*q)))))
                        .chain([(ok.len() == config.replicates).to_string()]),
                );
                medians.insert((s.row, m), med);
            }
            complete.insert(s.row, spec_complete);
        }

        let others: Vec<SimModel> = config.models.iter().copied().filter(|m| *m != config.base).collect();
        let params: Vec<&str> = specs.first().map_or(Vec::new(), |s| s.parameters().iter().map(|p| p.0).collect());
        let ratio = |row: usize, m: SimModel, q: Measure| -> Option<f64> {
            let num = medians[&(row, m)]?.get(q);
            let den = medians[&(row, config.base)]?.get(q);
            let r = num / den;
            r.is_finite().then_some(r)
        };

        let mut tables = vec![("scores.csv".to_string(), scores), ("medians.csv".to_string(), medians_t)];
        let mut summary_t = Table::new(hash, &["measure", "ratio", "specs", "min", "q1", "median", "mean", "q3", "max"]);
        let mut best_t = Table::new(hash, &["measure", "model", "count", "tied_specs", "specs"]);
        let mut report = String::new();
        for q in Measure::ALL {
            let names: Vec<String> = others.iter().map(|m| ratio_name(*m, config.base)).collect();
            let mut header: Vec<&str> = vec!["row"];
            header.extend(params.iter().copied());
            header.extend(names.iter().map(String::as_str));
            header.push("complete");
            let mut t = Table::new(hash, &header);
            for s in specs {
                let mut row = vec![s.row.to_string()];
                row.extend(s.parameters().iter().map(|p| fmt_f64(p.1)));
                row.extend(others.iter().map(|m| ratio(s.row, *m, q).map_or("NA".to_string(), fmt_f64)));
                row.push(complete[&s.row].to_string());
                t.row(row);
            }
            tables.push((format!("ratios_{}.csv", q.name().to_ascii_lowercase()), t));

            for (m, name) in others.iter().zip(&names) {
                let rs: Vec<f64> = specs.iter().filter_map(|s| ratio(s.row, *m, q)).collect();
                if rs.is_empty() {
                    summary_t.row([q.name().to_string(), name.clone(), "0".to_string()].into_iter().chain(std::iter::repeat_n("NA".to_string(), 6)));
                    continue;
                }
                let d = Distribution6::of(&rs);
                summary_t.row(
                    [q.name().to_string(), name.clone(), rs.len().to_string()]
                        .into_iter()
                        .chain([d.min, d.q1, d.median, d.mean, d.q3, d.max].map(fmt_f64)),
                );
                if q == Measure::Arb {
                    let _ = writeln!(report, "{name:<10} ARB ratio median {:.3} over {} specs", d.median, rs.len());
                }
            }

            if others.len() >= 2 {
                let usable: Vec<&SimSpec> = specs
                    .iter()
                    .filter(|s| others.iter().all(|m| ratio(s.row, *m, q).is_some()))
                    .collect();
                if !usable.is_empty() {
                    let input: Vec<(String, Vec<f64>)> = others
                        .iter()
                        .map(|m| {
                            (
                                m.name().to_string(),
                                usable.iter().map(|s| ratio(s.row, *m, q).expect("filtered")).collect(),
                            )
                        })
                        .collect();
                    let best = best_model_counts(&input)?;
                    for m in &others {
                        best_t.row([
                            q.name().to_string(),
                            m.name().to_string(),
                            best.counts[m.name()].to_string(),
                            best.tied.len().to_string(),
                            usable.len().to_string(),
                        ]);
                    }
                }
            }
        }
        tables.push(("ratio_summary.csv".to_string(), summary_t));
        tables.push(("best_counts.csv".to_string(), best_t));
        tables.push(("failures.csv".to_string(), failures));
        let _ = writeln!(
            report,
            "{} specifications x {} replicates x {} models, {} failed fits",
            specs.len(),
            config.replicates,
            config.models.len(),
            n_failed
        );
        Ok(Self { tables, report, medians })
    }
}

/// Reads back a `ratios_*.csv` table as `row -> column -> value`.
pub fn read_ratio_table(path: &Path) -> Result<BTreeMap<usize, BTreeMap<String, f64>>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut out = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let row: usize = rec[0].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: rec.position().map_or(0, |p| p.line()),
            message: "bad row number".into(),
        })?;
        let cols = headers
            .iter()
            .zip(rec.iter())
            .skip(1)
            .filter_map(|(h, v)| v.parse::<f64>().ok().map(|x| (h.to_string(), x)))
            .collect();
        out.insert(row, cols);
    }
    Ok(out)
}

// ---------------------------------------------------------------- replay

/// Re-runs the command recorded in a manifest.
pub fn run_manifest(manifest: &Manifest, out: &Path, control: &RunControl) -> Result<RunOutcome> {
    let c = manifest.config.clone();
    if manifest.version != env!("CARGO_PKG_VERSION") {
        return Err(Error::Config(format!(
            "manifest was written by version {}, this is {}",
            manifest.version,
            env!("CARGO_PKG_VERSION")
        )));
    }
    match manifest.command.as_str() {
        "fit" => run_fit(&serde_json::from_value(c)?, out, control),
        "simulate" => run_simulation(&serde_json::from_value(c)?, out, control),
        "diagnose" => run_diagnose(&serde_json::from_value(c)?, Some(out)),
        "evaluate" => run_evaluate(&serde_json::from_value(c)?, Some(out)),
        other => Err(Error::Config(format!("unknown command {other:?} in manifest"))),
    }
}
