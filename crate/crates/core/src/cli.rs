//! Command-line front end: argument parsing, run metadata and CSV/JSON output.
//!
//! Numeric artifacts go to CSV (stdout or a file). Run metadata (seeds,
//! generator version, engine, build tag, timestamp) goes to a JSON file when
//! one is configured, otherwise to stderr as a single line. The timestamp only
//! ever appears in the JSON, so CSV bodies are byte-stable across reruns.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::clt::{clt_discrepancy, CltReport, RhsReading};
use crate::config::{load_config, ExperimentConfig, WeightSource};
use crate::disorder::{nu_many, DisorderPlan, Observable};
use crate::error::{Error, Result};
use crate::interpolation::{catalog_observable, check_derivative, CavityPath, ExpectationPlan, DEFAULT_FD_STEP, DEFAULT_QUADRATURE_NODES};
use crate::mcmc::{batch_means, run_replica_pair, Schedule, UpdateRule, DEFAULT_BURN_IN, MIN_BATCHES};
use crate::model::{sample_disorder, ModelParams, DEFAULT_BETA_CEILING};
use crate::qsolver::{QSolver, DEFAULT_NODES, DEFAULT_TOL};
use crate::seed::GENERATOR_VERSION;
use crate::stats::fit_line;

pub const BUILD_TAG: &str = env!("SKCLT_BUILD_TAG");

pub const CLT_COLUMNS: [&str; 11] = ["N", "profile", "k_spec", "max_t", "lhs", "lhs_se", "rhs", "rhs_se", "delta", "delta_se", "ratio"];
pub const SWEEP_EXTRA_COLUMNS: [&str; 3] = ["reading", "delta_alt", "delta_alt_se"];
pub const SIMULATE_COLUMNS: [&str; 6] = ["N", "profile", "observable", "value", "stderr", "n_disorders"];
pub const MCMC_COLUMNS: [&str; 2] = ["sweep", "value"];
pub const DERIVATIVE_COLUMNS: [&str; 13] = [
    "path", "observable", "t", "nu", "nu_se", "finite_difference", "richardson", "analytic", "analytic_se", "difference", "difference_se", "component_i", "component_ii",
];

#[derive(Debug, Parser)]
#[command(name = "skclt", version = BUILD_TAG, about = "Weighted spin averages in the high-temperature SK model")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Highest β accepted by the simulation commands.
    #[arg(long, global = true, default_value_t = DEFAULT_BETA_CEILING)]
    pub beta_ceiling: f64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PathArg {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlanArg {
    Quadrature,
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SeriesArg {
    X,
    Y,
    Overlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    HeatBath,
    Metropolis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Uniform,
    OneHot,
    PowerLaw,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve q = E th²(βz√q + h).
    SolveQ {
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        h: f64,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_NODES)]
        nodes: usize,
    },
    /// Disorder averages of basic observables for every size and profile of a config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// One replica-pair MCMC run on one disorder; CSV `sweep,value`.
    Mcmc {
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        h: f64,
        #[arg(long = "n")]
        n_spins: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Disorder seed (default: the chain seed).
        #[arg(long)]
        disorder_seed: Option<u64>,
        #[arg(long, default_value_t = 10_000)]
        sweeps: usize,
        #[arg(long, default_value_t = DEFAULT_BURN_IN)]
        burn_in: usize,
        #[arg(long, default_value_t = 1)]
        thin: usize,
        #[arg(long, value_enum, default_value_t = RuleArg::HeatBath)]
        rule: RuleArg,
        #[arg(long, value_enum, default_value_t = SeriesArg::Y)]
        observable: SeriesArg,
        #[arg(long, value_enum, default_value_t = ProfileArg::Uniform)]
        weights: ProfileArg,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Finite differences of ν_t against the analytic derivative.
    CheckDerivative {
        #[arg(long, value_enum, default_value_t = PathArg::One)]
        path: PathArg,
        /// Catalogue name; repeat or comma-separate. Default: the whole catalogue.
        #[arg(long, value_delimiter = ',')]
        observable: Vec<String>,
        /// Comma-separated t values.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        t_grid: Vec<f64>,
        #[arg(long, value_enum, default_value_t = PlanArg::Quadrature)]
        plan: PlanArg,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        #[arg(long, default_value_t = 0.3)]
        h: f64,
        #[arg(long = "n", default_value_t = 3)]
        n_spins: usize,
        #[arg(long, default_value_t = DEFAULT_QUADRATURE_NODES)]
        nodes: usize,
        #[arg(long, default_value_t = 4000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_FD_STEP)]
        step: f64,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Gaussian-moment discrepancy table for a config.
    CltReport {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutputArgs,
    },
    /// Discrepancy over all sizes with both readings and the log-log slope.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutputArgs,
    },
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct OutputArgs {
    /// CSV destination (default: the config's, else stdout).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// JSON metadata destination (default: the config's, else stderr).
    #[arg(long)]
    pub json: Option<PathBuf>,
}

impl OutputArgs {
    fn resolve(&self, config: Option<&ExperimentConfig>) -> (Option<PathBuf>, Option<PathBuf>) {
        (
            self.csv.clone().or_else(|| config.and_then(|c| c.csv.clone())),
            self.json.clone().or_else(|| config.and_then(|c| c.json.clone())),
        )
    }
}

/// Parses `args`, runs, and returns the process exit code. Errors are written
/// to stderr as `{"error": {...}}`.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let report = json!({"error": {"kind": "usage", "message": e.to_string().trim_end()}});
            eprintln!("{report}");
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let mut err = json!({"kind": e.kind(), "message": e.to_string()});
            if let Error::Config(list) = &e {
                err["violations"] = json!(list);
            }
            if let Error::AtDisorder { index, .. } = &e {
                err["disorder"] = json!(index);
            }
            eprintln!("{}", json!({ "error": err }));
            1
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::InvalidParameter("--jobs must be at least 1".into()));
        }
        // Fails only if the global pool already exists (e.g. repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match &cli.command {
        Command::SolveQ { beta, h, tol, nodes } => {
            let solver = QSolver {
                nodes: *nodes,
                ..QSolver::default()
            };
            let sol = solver.solve(*beta, *h, *tol)?;
            println!("q = {}", sol.q);
            let meta = metadata(None, "quadrature", json!({"beta": beta, "h": h, "tol": tol}));
            emit_metadata(&json!({"meta": meta, "solution": sol}), None)
        }
        Command::Simulate { config, out } => {
            let cfg = load(config, cli.beta_ceiling)?;
            simulate(&cfg, out)
        }
        Command::CltReport { config, out } => {
            let cfg = load(config, cli.beta_ceiling)?;
            clt_report(&cfg, out, false)
        }
        Command::Sweep { config, out } => {
            let cfg = load(config, cli.beta_ceiling)?;
            clt_report(&cfg, out, true)
        }
        Command::Mcmc {
            beta,
            h,
            n_spins,
            seed,
            disorder_seed,
            sweeps,
            burn_in,
            thin,
            rule,
            observable,
            weights,
            alpha,
            out,
        } => {
            let params = ModelParams::new(*beta, *h, *n_spins)?;
            params.ensure_high_temperature(cli.beta_ceiling)?;
            let schedule = Schedule::new(*sweeps, *burn_in, *thin)?;
            let source = match weights {
                ProfileArg::Uniform => WeightSource::Uniform,
                ProfileArg::OneHot => WeightSource::OneHot,
                ProfileArg::PowerLaw => WeightSource::PowerLaw { alpha: *alpha },
            };
            let w = source.build(*n_spins)?;
            let rule = match rule {
                RuleArg::HeatBath => UpdateRule::HeatBath,
                RuleArg::Metropolis => UpdateRule::Metropolis,
            };
            let dseed = disorder_seed.unwrap_or(*seed);
            let disorder = sample_disorder(dseed, *n_spins);
            let run = run_replica_pair(&params, &disorder, &w, &schedule, *seed, rule)?;
            let series = match observable {
                SeriesArg::X => run.x,
                SeriesArg::Y => run.y,
                SeriesArg::Overlap => run.overlap,
            };
            let (csv_path, json_path) = out.resolve(None);
            let rows = series
                .sweep_indices()
                .zip(&series.values)
                .map(|(s, v)| vec![s.to_string(), fmt(*v)])
                .collect::<Vec<_>>();
            write_csv(csv_path.as_deref(), &MCMC_COLUMNS, &rows)?;
            let summary = (series.len() >= MIN_BATCHES).then(|| batch_means(&series, MIN_BATCHES)).transpose()?;
            let meta = metadata(
                Some(*seed),
                "mcmc",
                json!({"beta": beta, "h": h, "N": n_spins, "disorder_seed": dseed, "schedule": schedule, "rule": rule, "weights": source.label(), "observable": format!("{observable:?}").to_lowercase()}),
            );
            emit_metadata(&json!({"meta": meta, "batch_means": summary}), json_path.as_deref())
        }
        Command::CheckDerivative {
            path,
            observable,
            t_grid,
            plan,
            beta,
            h,
            n_spins,
            nodes,
            samples,
            seed,
            step,
            out,
        } => {
            let params = ModelParams::new(*beta, *h, *n_spins)?;
            let q = QSolver::default().solve(*beta, *h, DEFAULT_TOL)?.q;
            let weights = WeightSource::Uniform.build(*n_spins)?;
            let names: Vec<String> = if observable.is_empty() {
                crate::interpolation::OBSERVABLE_CATALOG.iter().map(|s| s.to_string()).collect()
            } else {
                observable.clone()
            };
            let observables = names
                .iter()
                .map(|name| catalog_observable(name, *n_spins, &weights, q))
                .collect::<Result<Vec<_>>>()?;
            let cavity = match path {
                PathArg::One => CavityPath::One,
                PathArg::Two => CavityPath::Two,
            };
            let plan = match plan {
                PlanArg::Quadrature => ExpectationPlan::Quadrature { nodes: *nodes },
                PlanArg::Mc => ExpectationPlan::MonteCarlo {
                    samples: *samples,
                    seed: *seed,
                    antithetic: true,
                    z_nodes: *nodes,
                },
            };
            let checks = check_derivative(&observables, cavity, t_grid, &params, q, &plan, *step)?;
            let label = format!("{path:?}").to_lowercase();
            let rows = checks
                .iter()
                .map(|c| {
                    let (ci, cii) = c
                        .components
                        .map_or((String::new(), String::new()), |p| (fmt(p[0].value), fmt(p[1].value)));
                    vec![
                        label.clone(),
                        c.observable.clone(),
                        fmt(c.t),
                        fmt(c.nu.value),
                        fmt(c.nu.stderr),
                        fmt(c.finite_difference.value),
                        fmt(c.richardson.value),
                        fmt(c.analytic.value),
                        fmt(c.analytic.stderr),
                        fmt(c.difference.value),
                        fmt(c.difference.stderr),
                        ci,
                        cii,
                    ]
                })
                .collect::<Vec<_>>();
            let (csv_path, json_path) = out.resolve(None);
            write_csv(csv_path.as_deref(), &DERIVATIVE_COLUMNS, &rows)?;
            let worst = checks.iter().map(|c| c.difference.value.abs()).fold(0.0, f64::max);
            let seed_field = matches!(plan, ExpectationPlan::MonteCarlo { .. }).then_some(*seed);
            let meta = metadata(seed_field, "interpolation", json!({"beta": beta, "h": h, "N": n_spins, "q": q, "plan": plan, "step": step}));
            emit_metadata(&json!({"meta": meta, "max_abs_difference": worst}), json_path.as_deref())
        }
    }
}

fn load(path: &Path, beta_ceiling: f64) -> Result<ExperimentConfig> {
    let cfg = load_config(path)?.with_env_seed()?;
    ModelParams::new(cfg.beta, cfg.h, 1)?.ensure_high_temperature(beta_ceiling)?;
    Ok(cfg)
}

fn plan_of(cfg: &ExperimentConfig) -> Result<DisorderPlan> {
    DisorderPlan::new(cfg.disorders, cfg.seed, cfg.engine)
}

fn config_metadata(cfg: &ExperimentConfig) -> Value {
    metadata(
        Some(cfg.seed),
        cfg.engine.label(),
        json!({
            "beta": cfg.beta,
            "h": cfg.h,
            "sizes": cfg.sizes,
            "profiles": cfg.profiles.iter().map(WeightSource::label).collect::<Vec<_>>(),
            "engine_settings": cfg.engine,
            "M": cfg.disorders,
            "spec": cfg.spec.exponents(),
            "reading": cfg.reading,
            "config": cfg.to_text(),
        }),
    )
}

fn simulate(cfg: &ExperimentConfig, out: &OutputArgs) -> Result<()> {
    let plan = plan_of(cfg)?;
    let q = QSolver::default().solve(cfg.beta, cfg.h, DEFAULT_TOL)?.q;
    let observables = [
        Observable::XPower(1),
        Observable::XPower(2),
        Observable::YPower(2),
        Observable::YPower(4),
        Observable::OverlapPower(1),
        Observable::CenteredOverlap { q, order: 2 },
    ];
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        let params = ModelParams::new(cfg.beta, cfg.h, n)?;
        for source in &cfg.profiles {
            let w = source.build(n)?;
            let est = nu_many(&observables, &params, &w, &plan)?;
            for (obs, e) in observables.iter().zip(est) {
                rows.push(vec![n.to_string(), source.label(), obs.label(), fmt(e.value), fmt(e.stderr), e.n_samples.to_string()]);
            }
        }
    }
    let (csv_path, json_path) = out.resolve(Some(cfg));
    write_csv(csv_path.as_deref(), &SIMULATE_COLUMNS, &rows)?;
    emit_metadata(&json!({"meta": config_metadata(cfg), "q": q}), json_path.as_deref())
}

fn clt_report(cfg: &ExperimentConfig, out: &OutputArgs, sweep: bool) -> Result<()> {
    let plan = plan_of(cfg)?;
    let mut reports: Vec<(String, CltReport)> = Vec::new();
    for source in &cfg.profiles {
        for &n in &cfg.sizes {
            let params = ModelParams::new(cfg.beta, cfg.h, n)?;
            let w = source.build(n)?;
            reports.push((source.label(), clt_discrepancy(&cfg.spec, &params, &w, &plan, cfg.reading)?));
        }
    }
    let mut columns: Vec<&str> = CLT_COLUMNS.to_vec();
    if sweep {
        columns.extend(SWEEP_EXTRA_COLUMNS);
    }
    let reading_label = |r: RhsReading| match r {
        RhsReading::PowerInside => "power-inside",
        RhsReading::PowerOutside => "power-outside",
    };
    let rows = reports
        .iter()
        .map(|(label, r)| {
            let mut row = vec![
                r.n_spins.to_string(),
                label.clone(),
                cfg.spec.label(),
                fmt(r.max_t),
                fmt(r.lhs.value),
                fmt(r.lhs.stderr),
                fmt(r.rhs.value),
                fmt(r.rhs.stderr),
                fmt(r.delta.value),
                fmt(r.delta.stderr),
                fmt(r.ratio),
            ];
            if sweep {
                row.push(reading_label(r.reading).to_string());
                row.push(fmt(r.delta_other_reading.value));
                row.push(fmt(r.delta_other_reading.stderr));
            }
            row
        })
        .collect::<Vec<_>>();
    let (csv_path, json_path) = out.resolve(Some(cfg));
    write_csv(csv_path.as_deref(), &columns, &rows)?;
    let mut summary = json!({"meta": config_metadata(cfg)});
    if sweep {
        let slopes: Vec<Value> = cfg
            .profiles
            .iter()
            .map(|source| {
                let label = source.label();
                let pts: Vec<(f64, f64)> = reports
                    .iter()
                    .filter(|(l, _)| *l == label)
                    .map(|(_, r)| (r.max_t.ln(), r.delta.value.ln()))
                    .collect();
                let varies = pts.iter().any(|p| (p.0 - pts[0].0).abs() > 1e-12);
                let fit = (pts.len() >= 2 && varies && pts.iter().all(|p| p.1.is_finite())).then(|| {
                    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
                    fit_line(&x, &y)
                });
                json!({"profile": label, "log_delta_vs_log_max_t": fit})
            })
            .collect();
        summary["slopes"] = json!(slopes);
    }
    emit_metadata(&summary, json_path.as_deref())
}

/// Shortest round-trip decimal; identical bits give identical text.
fn fmt(x: f64) -> String {
    format!("{x:?}")
}

fn write_csv(path: Option<&Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let sink: Box<dyn Write> = match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Box::new(std::fs::File::create(p)?)
        }
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(header).map_err(to_io)?;
    for row in rows {
        w.write_record(row).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

fn metadata(seed: Option<u64>, engine: &str, params: Value) -> Value {
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    json!({
        "seed": seed,
        "seed_env_override": std::env::var(crate::config::SEED_ENV).ok(),
        "generator_version": GENERATOR_VERSION,
        "engine": engine,
        "build_tag": BUILD_TAG,
        "params": params,
        "timestamp": timestamp,
    })
}

fn emit_metadata(value: &Value, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let mut text = serde_json::to_string_pretty(value)?;
            text.push('\n');
            std::fs::write(p, text)?;
        }
        None => eprintln!("{value}"),
    }
    Ok(())
}
