use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use glshrink_core::io::{InputFile, Manifest};
use glshrink_core::pipeline::{
    run_diagnose, run_evaluate, run_fit, run_manifest, run_simulation, workers_from_env, DiagnoseConfig,
    EvaluateConfig, FitConfig, Preset, RunControl, RunOutcome, RunStatus, SimConfig, SimModel, SpecSelection,
    VarianceInput, WORKERS_ENV,
};
use glshrink_core::simgen::DeltaScope;
use glshrink_core::{ModelTag, Monitor, SamplerSettings, Scan};

/// Global-local shrinkage models for multi-source small-area estimates.
#[derive(Parser)]
#[command(name = "glshrink", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one or more models to a panel and write posterior summaries.
    Fit(FitArgs),
    /// Run a simulation study and write discrepancy-ratio tables.
    Simulate(SimulateArgs),
    /// Split-R-hat of draw files written by `fit --save-draws`.
    Diagnose(DiagnoseArgs),
    /// Deviation measures of estimates against known truths.
    Evaluate(EvaluateArgs),
    /// Re-run the command recorded in a manifest.json.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct Exec {
    /// Worker threads (default: $GLSHRINK_WORKERS, else all cores).
    #[arg(long)]
    workers: Option<usize>,
}

impl Exec {
    fn workers(&self) -> Result<Option<usize>> {
        match self.workers {
            Some(0) => bail!("--workers must be positive"),
            Some(n) => Ok(Some(n)),
            None => Ok(workers_from_env()?),
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Panel file with header area,source,estimate,se.
    #[arg(long)]
    panel: PathBuf,
    /// Models to fit: m11a, m11b, m1a, m1b, m12, one-source (repeatable or comma-separated).
    #[arg(long = "model", required = true, value_delimiter = ',')]
    models: Vec<String>,
    /// Source used by the one-source model.
    #[arg(long)]
    source: Option<String>,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    /// Total sweeps per chain, burn-in included.
    #[arg(long, default_value_t = 7_000)]
    iters: usize,
    #[arg(long, default_value_t = 2_000)]
    burnin: usize,
    #[arg(long, default_value_t = 1)]
    thin: usize,
    #[arg(long)]
    seed: u64,
    /// Credible level of the reported intervals.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Standard deviation of the starting-point jitter of each chain.
    #[arg(long, default_value_t = 0.05)]
    overdispersion: f64,
    /// Also write every kept draw under OUT/draws/<model>/.
    #[arg(long)]
    save_draws: bool,
    /// Update θ, μ and η one block at a time instead of jointly.
    #[arg(long)]
    single_site: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    exec: Exec,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long = "case", value_parser = clap::value_parser!(u8).range(1..=6))]
    case_id: u8,
    /// `all`, a row list such as `1,4` or `1-4`, or a specification file.
    #[arg(long, default_value = "all")]
    specs: String,
    /// desk: 30 replicates, 6000/1000 sweeps; paper: 100 replicates, 18000/3000.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    /// Models to fit, e.g. m11a,m11b,m1a,m1b,m12 or m12,m1a,msa,mbr.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Denominator model of the ratios (default m12; m1a for cases 5 and 6).
    #[arg(long)]
    base: Option<String>,
    #[arg(long)]
    seed: u64,
    /// Panel file whose squared standard errors serve as the sampling variances.
    #[arg(long)]
    variances: Option<PathBuf>,
    /// Resample the variances of --variances for every replicate.
    #[arg(long, requires = "variances")]
    bootstrap: bool,
    /// Draw aberration indicators once per panel instead of per unit.
    #[arg(long)]
    panel_delta: bool,
    /// Continue an interrupted run in the same output directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many fits; finish later with --resume.
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    exec: Exec,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Directory of draw files.
    #[arg(long)]
    draws: PathBuf,
    #[arg(long, default_value_t = glshrink_core::diagnostics::DEFAULT_RHAT_THRESHOLD)]
    threshold: f64,
    /// Also write rhat.csv and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Table with `area` and `mean`, `estimate` or `value`.
    #[arg(long)]
    estimates: PathBuf,
    /// Table with `area` and `truth` or `value`.
    #[arg(long)]
    truths: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    exec: Exec,
}

fn parse_specs(s: &str) -> Result<SpecSelection> {
    if s == "all" {
        return Ok(SpecSelection::All);
    }
    if !s.is_empty() && s.chars().all(|c| c.is_ascii_digit() || c == ',' || c == '-') {
        let mut rows = Vec::new();
        for part in s.split(',').filter(|p| !p.is_empty()) {
            match part.split_once('-') {
                Some((a, b)) => {
                    let (a, b): (usize, usize) = (a.parse()?, b.parse()?);
                    if a > b {
                        bail!("empty row range {part}");
                    }
                    rows.extend(a..=b);
                }
                None => rows.push(part.parse()?),
            }
        }
        return Ok(SpecSelection::Rows(rows));
    }
    Ok(SpecSelection::File(InputFile::new(Path::new(s))?))
}

fn fit(a: FitArgs) -> Result<RunOutcome> {
    let models = a
        .models
        .iter()
        .map(|m| m.parse::<ModelTag>())
        .collect::<Result<Vec<_>, _>>()?;
    let config = FitConfig {
        panel: InputFile::new(&a.panel).with_context(|| format!("reading {}", a.panel.display()))?,
        models,
        source: a.source,
        settings: SamplerSettings {
            n_iter: a.iters,
            n_burnin: a.burnin,
            n_chains: a.chains,
            thin: a.thin,
            seed: a.seed,
            overdispersion: a.overdispersion,
            monitor: Monitor::default(),
            scan: if a.single_site { Scan::SingleSite } else { Scan::Blocked },
        },
        level: a.level,
        save_draws: a.save_draws,
    };
    let control = RunControl {
        workers: a.exec.workers()?,
        ..Default::default()
    };
    Ok(run_fit(&config, &a.out, &control)?)
}

fn simulate(a: SimulateArgs) -> Result<RunOutcome> {
    let preset: Preset = a.preset.parse()?;
    let mut config = SimConfig::new(a.case_id, preset, a.seed);
    config.specs = parse_specs(&a.specs)?;
    if let Some(r) = a.replicates {
        config.replicates = r;
    }
    if let Some(n) = a.iters {
        config.n_iter = n;
    }
    if let Some(n) = a.burnin {
        config.n_burnin = n;
    }
    if let Some(ms) = &a.models {
        config.models = ms.iter().map(|m| m.parse::<SimModel>()).collect::<Result<_, _>>()?;
        if a.base.is_none() && !config.models.contains(&config.base) {
            bail!("the default base model {} is not in --models; pass --base", config.base.name());
        }
    }
    if let Some(b) = &a.base {
        config.base = b.parse()?;
    }
    if let Some(p) = &a.variances {
        let f = InputFile::new(p)?;
        config.variances = if a.bootstrap {
            VarianceInput::BootstrapPanel(f)
        } else {
            VarianceInput::Panel(f)
        };
    }
    if a.panel_delta {
        config.delta_scope = DeltaScope::Panel;
    }
    let control = RunControl {
        workers: a.exec.workers()?,
        resume: a.resume,
        stop_after: a.stop_after,
    };
    Ok(run_simulation(&config, &a.out, &control)?)
}

fn run(cli: Cli) -> Result<RunOutcome> {
    match cli.command {
        Command::Fit(a) => fit(a),
        Command::Simulate(a) => simulate(a),
        Command::Diagnose(a) => {
            let config = DiagnoseConfig::from_dir(&a.draws, a.threshold)?;
            Ok(run_diagnose(&config, a.out.as_deref())?)
        }
        Command::Evaluate(a) => {
            let config = EvaluateConfig {
                estimates: InputFile::new(&a.estimates)?,
                truths: InputFile::new(&a.truths)?,
            };
            Ok(run_evaluate(&config, a.out.as_deref())?)
        }
        Command::Replay(a) => {
            let manifest = Manifest::read(&a.manifest)?;
            let control = RunControl {
                workers: a.exec.workers()?,
                resume: a.resume,
                stop_after: None,
            };
            Ok(run_manifest(&manifest, &a.out, &control)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            // A closed pipe (e.g. `| head`) is not an error of the run.
            let mut out = std::io::stdout().lock();
            let _ = write!(out, "{}", outcome.report);
            for f in &outcome.files {
                let _ = writeln!(out, "wrote {}", f.display());
            }
            let _ = writeln!(out, "manifest {}", outcome.manifest_hash);
            match outcome.status {
                RunStatus::Complete => ExitCode::SUCCESS,
                RunStatus::Stopped { .. } => ExitCode::from(3),
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.to_string().contains(WORKERS_ENV) {
                eprintln!("unset {WORKERS_ENV} or set it to a positive integer");
            }
            ExitCode::FAILURE
        }
    }
}
