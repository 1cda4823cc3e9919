//! Command-line front end: a JSON config file, flat flag overrides on top,
//! and one subcommand per experiment.

use std::path::PathBuf;

use bdlab_core::{catalog_entries, field_entries, PolicyFamily, PolicySpec};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, EXPERIMENTS};
use crate::error::CliError;
use crate::experiments;
use crate::output;
use crate::suite::{self, CriterionOutcome};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub const LIST_KINDS: [&str; 5] = [
    "functionals",
    "policies",
    "families",
    "fields",
    "experiments",
];

#[derive(Debug, Parser)]
#[command(
    name = "bdlab",
    version,
    about = "Numerical lab for the Boué–Dupuis variational formula"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate log E[e^F].
    Lhs(RunArgs),
    /// Estimate E[F(B^v)] − ½‖v‖² for a fixed policy.
    Rhs(RunArgs),
    /// Duality gap of a fixed policy.
    Gap(RunArgs),
    /// Optimize a parametric policy family.
    Optimize(RunArgs),
    /// Föllmer entropy identity and zero-variance check.
    Follmer(RunArgs),
    /// Marginal entropy bound and Donsker–Varadhan slack.
    Entropy(RunArgs),
    /// Truncation sweep F ∧ M or F ∨ (−N).
    TruncationSweep(RunArgs),
    /// Exponential hypercontractivity of the OU semigroup.
    OuEhc(RunArgs),
    /// Conditional hypercontractivity along Brownian paths.
    OuRehc(RunArgs),
    /// Gaussian log-Sobolev inequality.
    Lsi(RunArgs),
    /// Run a named suite (`acceptance` or `acceptance:1,4`).
    Suite(RunArgs),
    /// List catalog entries with their parameters.
    List {
        /// functionals, policies, families, fields or experiments
        kind: String,
    },
    /// Re-execute the config of a stored record and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub functional: Option<String>,
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Monte Carlo paths; accepts `1e6`.
    #[arg(long, value_parser = parse_count)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// auto, mc, quadrature or oracle
    #[arg(long)]
    pub lhs_method: Option<String>,
    /// Föllmer drift form: auto, ratio or score
    #[arg(long)]
    pub form: Option<String>,
    #[arg(long)]
    pub field: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    /// cap or floor
    #[arg(long)]
    pub truncation: Option<String>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, value_parser = parse_count)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = parse_count)]
    pub heldout: Option<usize>,
    #[arg(long)]
    pub n_se: Option<f64>,
    #[arg(long)]
    pub abs_tol: Option<f64>,
    #[arg(long)]
    pub max_gap: Option<f64>,
    /// Suite name.
    #[arg(long)]
    pub name: Option<String>,
    #[command(flatten)]
    pub exec: ExecArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ExecArgs {
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    /// Root directory for run directories.
    #[arg(long, env = "BDLAB_OUT_DIR")]
    pub out: Option<PathBuf>,
    /// Skip writing the run directory.
    #[arg(long)]
    pub no_write: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// A `record.json` or the run directory holding it.
    pub record: PathBuf,
    #[command(flatten)]
    pub exec: ExecArgs,
}

/// Non-negative integer, written plainly or as `1e6`.
pub fn parse_count(s: &str) -> Result<usize, String> {
    if let Ok(n) = s.replace('_', "").parse::<usize>() {
        return Ok(n);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v <= usize::MAX as f64 => Ok(v as usize),
        _ => Err(format!("expected a non-negative integer, got {s:?}")),
    }
}

/// File config (if any), then the subcommand, then flag overrides.
pub fn build_config(experiment: &str, args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    cfg.experiment = experiment.to_string();
    macro_rules! set {
        ($($field:ident <- $arg:expr),* $(,)?) => {
            $(if let Some(v) = &$arg { cfg.$field = v.clone(); })*
        };
    }
    set!(
        functional <- args.functional,
        policy <- args.policy,
        family <- args.family,
        horizon <- args.horizon,
        steps <- args.steps,
        n <- args.n,
        seed <- args.seed,
        lhs_method <- args.lhs_method,
        drift_form <- args.form,
        field <- args.field,
        times <- args.times,
        levels <- args.levels,
        truncation <- args.truncation,
        suite <- args.name,
    );
    if let Some(v) = args.iters {
        cfg.opt.iters = v;
    }
    if let Some(v) = args.batch {
        cfg.opt.batch = v;
    }
    if let Some(v) = args.lr {
        cfg.opt.lr = v;
    }
    if let Some(v) = args.heldout {
        cfg.opt.heldout = v;
    }
    if let Some(v) = args.n_se {
        cfg.tolerance.n_se = v;
    }
    if let Some(v) = args.abs_tol {
        cfg.tolerance.abs = v;
    }
    if args.max_gap.is_some() {
        cfg.tolerance.max_gap = args.max_gap;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn list(kind: &str) -> Result<Value, CliError> {
    Ok(match kind {
        "functionals" => serde_json::to_value(catalog_entries())?,
        "fields" => Value::Array(
            field_entries()
                .into_iter()
                .map(|e| json!({ "name": e.name, "params": e.params, "summary": e.summary }))
                .collect(),
        ),
        "policies" => json!(PolicySpec::NAMES),
        "families" => json!(PolicyFamily::NAMES),
        "experiments" => {
            let mut names: Vec<&str> = EXPERIMENTS.to_vec();
            names.push("acceptance");
            json!(names)
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown list kind {other:?}; expected one of {LIST_KINDS:?}"
            )))
        }
    })
}

fn experiment_name(cmd: &Command) -> Option<(&'static str, &RunArgs)> {
    Some(match cmd {
        Command::Lhs(a) => ("lhs", a),
        Command::Rhs(a) => ("rhs", a),
        Command::Gap(a) => ("gap", a),
        Command::Optimize(a) => ("optimize", a),
        Command::Follmer(a) => ("follmer", a),
        Command::Entropy(a) => ("entropy", a),
        Command::TruncationSweep(a) => ("truncation-sweep", a),
        Command::OuEhc(a) => ("ou-ehc", a),
        Command::OuRehc(a) => ("ou-rehc", a),
        Command::Lsi(a) => ("lsi", a),
        Command::Suite(a) => ("suite", a),
        Command::List { .. } | Command::Replay(_) => return None,
    })
}

fn report(record: &crate::record::RunRecord) {
    if record.experiment == "suite" {
        if let Ok(outcomes) = serde_json::from_value::<Vec<Value>>(record.results.clone()) {
            for o in outcomes {
                let checks: Vec<crate::record::Check> =
                    serde_json::from_value(o["checks"].clone()).unwrap_or_default();
                let outcome = CriterionOutcome {
                    id: o["id"].as_u64().unwrap_or(0) as u32,
                    title: o["title"].as_str().unwrap_or_default().to_string(),
                    checks,
                    details: Value::Null,
                    error: o["error"].as_str().map(str::to_string),
                    seconds: o["seconds"].as_f64().unwrap_or(0.0),
                };
                eprintln!("{}", outcome.summary());
            }
        }
    } else {
        for c in &record.checks {
            eprintln!(
                "{} {}: {} ({:?})",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.bound
            );
        }
    }
    if let Some(e) = &record.error {
        eprintln!("error: {e}");
    }
}

fn persist(
    exec: &ExecArgs,
    record: &crate::record::RunRecord,
    files: &[(String, String)],
) -> Result<(), CliError> {
    if !exec.no_write {
        let root = exec
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(output::DEFAULT_ROOT));
        let dir = output::write_run(&root, record, files)?;
        eprintln!("wrote {}", dir.display());
    }
    Ok(())
}

/// Executes a parsed command and returns the process exit code.
pub fn dispatch(cli: Cli) -> Result<i32, CliError> {
    if let Some((name, args)) = experiment_name(&cli.command) {
        let cfg = build_config(name, args)?;
        if name == "suite" {
            suite::suite_ids(&cfg.suite)?;
        }
        let (record, files) = experiments::run(&cfg, args.exec.threads)?;
        println!("{}", serde_json::to_string_pretty(&record)?);
        report(&record);
        persist(&args.exec, &record, &files)?;
        return Ok(if record.passed { EXIT_PASS } else { EXIT_FAIL });
    }
    match cli.command {
        Command::List { kind } => {
            println!("{}", serde_json::to_string_pretty(&list(&kind)?)?);
            Ok(EXIT_PASS)
        }
        Command::Replay(args) => {
            let stored = output::load_record(&args.record)?;
            let (fresh, files) = experiments::run(&stored.config, args.exec.threads)?;
            let identical = stored.stochastic_outputs() == fresh.stochastic_outputs();
            let consistent = stored.passed == stored.recompute_passed();
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "record": args.record,
                    "config_hash": stored.config_hash,
                    "identical": identical,
                    "stored_pass_consistent": consistent,
                    "passed": fresh.passed,
                }))?
            );
            eprintln!(
                "replay: {}",
                if identical {
                    "identical"
                } else {
                    "outputs differ"
                }
            );
            persist(&args.exec, &fresh, &files)?;
            Ok(if identical && consistent {
                EXIT_PASS
            } else {
                EXIT_FAIL
            })
        }
        _ => unreachable!("experiment commands are handled above"),
    }
}
