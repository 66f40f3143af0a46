use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::json;

use sparsebump::bumps::{self, DualRho};
use sparsebump::lab::{self, ExperimentConfig, ExperimentKind};
use sparsebump::{operators, prooftrace};
use sparsebump::{DyadicCube, EntropyFunction, EpsilonShape, ExponentConfig, SparseFamily, TheoremMode, Weight};

const SEED_VAR: &str = "SPARSEBUMP_SEED";

#[derive(Parser)]
#[command(name = "sparsebump", version, about = "Bump and testing constants for dyadic sparse operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print A, E, E* (or A, D, D*) as JSON.
    Constants {
        #[command(flatten)]
        weights: WeightArgs,
        #[command(flatten)]
        exps: ExpArgs,
        #[arg(long, default_value = "entropy:1")]
        eps: EntropyFunction,
        /// Which maximal function the dual entropy bump uses: symmetric or as-printed.
        #[arg(long, default_value = "symmetric", value_parser = parse_dual_rho)]
        dual_rho: DualRho,
    },
    /// Lower bound for the operator norm, and the exact norm when p = q = 2.
    Norm {
        #[arg(long)]
        family: PathBuf,
        #[command(flatten)]
        weights: WeightArgs,
        #[command(flatten)]
        exps: ExpArgs,
        #[arg(long, default_value_t = 20)]
        budget: usize,
        /// Seed of the random ascent starts; defaults to $SPARSEBUMP_SEED.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
    /// Print the testing constants T and T* as JSON.
    Testing {
        #[arg(long)]
        family: PathBuf,
        #[command(flatten)]
        weights: WeightArgs,
        #[command(flatten)]
        exps: ExpArgs,
    },
    /// Run the entropy or direct certificate chain on one root cube.
    Trace {
        #[arg(long)]
        family: PathBuf,
        #[command(flatten)]
        weights: WeightArgs,
        #[command(flatten)]
        exps: ExpArgs,
        #[arg(long, default_value = "entropy:1")]
        eps: EntropyFunction,
        /// Root cube such as "0:0" or "2:(1,3)"; defaults to the family root.
        #[arg(long)]
        root: Option<DyadicCube>,
        /// Trace the dual inequality instead.
        #[arg(long)]
        dual: bool,
    },
    /// Randomized verification suite.
    #[command(name = "verify-bounds")]
    VerifyBounds(SuiteArgs),
    /// Counterexample study over increasing leaf levels.
    Counterexample(SuiteArgs),
    /// Verification suite repeated over the configured leaf levels.
    Sweep(SuiteArgs),
}

#[derive(Args)]
struct WeightArgs {
    /// Weight file used for both σ and w.
    #[arg(long, conflicts_with_all = ["sigma", "w"])]
    weights: Option<PathBuf>,
    #[arg(long, requires = "w")]
    sigma: Option<PathBuf>,
    #[arg(long, requires = "sigma")]
    w: Option<PathBuf>,
}

#[derive(Args)]
struct ExpArgs {
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    #[arg(long, default_value_t = 3.0)]
    q: f64,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    /// strict or extended
    #[arg(long, default_value = "strict")]
    mode: TheoremMode,
}

#[derive(Args)]
struct SuiteArgs {
    /// `--config FILE` loads a JSON config; any config field (seed, instances,
    /// leaf_level, levels, p, q, alpha, mode, delta, lambda, family, out_dir, ...)
    /// can then be overridden as `--field value`. Values are read as JSON when
    /// they parse, as strings otherwise.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    args: Vec<String>,
}

fn parse_dual_rho(s: &str) -> Result<DualRho, String> {
    match s {
        "symmetric" => Ok(DualRho::Symmetric),
        "as-printed" | "as_printed" => Ok(DualRho::AsPrinted),
        _ => Err(format!("expected symmetric or as-printed, got {s:?}")),
    }
}

/// Failures that should be reported as a usage error.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| Usage(format!("{SEED_VAR}={s:?} is not a u64")).into()),
        Err(_) => Ok(None),
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_weight(path: &Path) -> anyhow::Result<Weight> {
    Weight::from_json(&read(path)?).with_context(|| format!("loading weight {}", path.display()))
}

impl WeightArgs {
    fn load(&self) -> anyhow::Result<(Weight, Weight)> {
        match (&self.weights, &self.sigma, &self.w) {
            (Some(both), _, _) => {
                let w = load_weight(both)?;
                Ok((w.clone(), w))
            }
            (None, Some(s), Some(w)) => Ok((load_weight(s)?, load_weight(w)?)),
            _ => Err(Usage("pass --weights FILE or both --sigma FILE and --w FILE".into()).into()),
        }
    }
}

impl ExpArgs {
    fn config(&self, dimension: u32) -> anyhow::Result<ExponentConfig> {
        Ok(ExponentConfig::new(self.p, self.q, self.alpha, dimension, self.mode)?)
    }
}

fn load_family(path: &Path, sigma: &Weight) -> anyhow::Result<SparseFamily> {
    SparseFamily::from_json(&read(path)?, *sigma.grid()).with_context(|| format!("loading family {}", path.display()))
}

fn print_json(text: &str) {
    println!("{text}");
}

fn constants(weights: &WeightArgs, exps: &ExpArgs, eps: &EntropyFunction, dual_rho: DualRho) -> anyhow::Result<bool> {
    let (sigma, w) = weights.load()?;
    let cfg = exps.config(sigma.grid().dimension())?;
    let report = match eps.shape() {
        EpsilonShape::Entropy => bumps::entropy_bumps(&sigma, &w, &cfg, eps, dual_rho)?,
        EpsilonShape::Direct => bumps::direct_bumps(&sigma, &w, &cfg, eps)?,
    };
    print_json(&serde_json::to_string_pretty(&report)?);
    Ok(true)
}

fn norm(
    family: &Path,
    weights: &WeightArgs,
    exps: &ExpArgs,
    budget: usize,
    seed: Option<u64>,
    tol: f64,
) -> anyhow::Result<bool> {
    let (sigma, w) = weights.load()?;
    let cfg = exps.config(sigma.grid().dimension())?;
    let family = load_family(family, &sigma)?;
    let seed = match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(lab::DEFAULT_SEED),
    };
    let lower = operators::norm_lower_bound_seeded(&family, &sigma, &w, &cfg, budget, seed)?;
    let exact = if cfg.p() == 2.0 && cfg.q() == 2.0 {
        Some(operators::exact_norm_l2(&family, &sigma, &w, cfg.alpha(), tol)?)
    } else {
        None
    };
    let out = json!({
        "p": cfg.p(),
        "q": cfg.q(),
        "alpha": cfg.alpha(),
        "budget": budget,
        "seed": seed,
        "lower_bound": lower,
        "exact_l2": exact,
    });
    print_json(&serde_json::to_string_pretty(&out)?);
    Ok(true)
}

fn testing(family: &Path, weights: &WeightArgs, exps: &ExpArgs) -> anyhow::Result<bool> {
    let (sigma, w) = weights.load()?;
    let cfg = exps.config(sigma.grid().dimension())?;
    let family = load_family(family, &sigma)?;
    print_json(&operators::testing_constants(&family, &sigma, &w, &cfg)?.to_json()?);
    Ok(true)
}

fn trace(
    family: &Path,
    weights: &WeightArgs,
    exps: &ExpArgs,
    eps: &EntropyFunction,
    root: Option<DyadicCube>,
    dual: bool,
) -> anyhow::Result<bool> {
    let (sigma, w) = weights.load()?;
    let cfg = exps.config(sigma.grid().dimension())?;
    let family = load_family(family, &sigma)?;
    let root = root.unwrap_or_else(|| family.root());
    let report = match (eps.shape(), dual) {
        (EpsilonShape::Entropy, false) => prooftrace::entropy_trace(&family, &sigma, &w, &cfg, eps, &root)?,
        (EpsilonShape::Entropy, true) => prooftrace::dual_entropy_trace(&family, &sigma, &w, &cfg, eps, &root)?,
        (EpsilonShape::Direct, false) => prooftrace::direct_trace(&family, &sigma, &w, &cfg, eps, &root)?,
        (EpsilonShape::Direct, true) => prooftrace::dual_direct_trace(&family, &sigma, &w, &cfg, eps, &root)?,
    };
    print_json(&report.to_json()?);
    Ok(report.pass)
}

type Overrides = Vec<(String, String)>;

/// Splits `--key value` / `--key=value` pairs, pulling out `--config`.
fn split_overrides(args: &[String]) -> anyhow::Result<(Option<PathBuf>, Overrides)> {
    let mut config = None;
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            bail!(Usage(format!("unexpected argument {arg:?}")));
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Usage(format!("--{flag} needs a value")))?;
                (flag.to_string(), v.clone())
            }
        };
        if key.is_empty() {
            bail!(Usage(format!("unexpected argument {arg:?}")));
        }
        if key == "config" {
            config = Some(PathBuf::from(value));
        } else {
            pairs.push((key, value));
        }
    }
    Ok((config, pairs))
}

fn suite(kind: ExperimentKind, stem: &str, args: &SuiteArgs) -> anyhow::Result<bool> {
    let (file, overrides) = split_overrides(&args.args)?;
    let text = file.as_deref().map(read).transpose()?;
    let cfg = ExperimentConfig::from_sources(Some(kind), text.as_deref(), &overrides, env_seed()?)
        .map_err(|e| Usage(e.to_string()))?;
    let (csv, json, ok, summary) = match kind {
        ExperimentKind::Counterexample => {
            let r = lab::run_counterexample_config(&cfg)?;
            let ok = r.llogl_increasing && r.e_increasing;
            let summary = format!(
                "levels {:?}: llogl increasing {}, E increasing {}, max |D ratio - 1| {:.3e}",
                cfg.levels,
                r.llogl_increasing,
                r.e_increasing,
                r.d_drift()
            );
            (r.to_csv()?, r.to_json()?, ok, summary)
        }
        _ => {
            let r = if kind == ExperimentKind::Sweep {
                lab::run_sweep(&cfg)?
            } else {
                lab::run_verify_bounds(&cfg)?
            };
            let summary = format!("{} instances, {} violations", r.aggregate.instances, r.violations());
            (r.to_csv()?, r.to_json()?, r.violations() == 0, summary)
        }
    };
    match &cfg.out_dir {
        Some(dir) => {
            for path in lab::write_reports(dir, stem, &csv, &json)?.values() {
                eprintln!("wrote {}", path.display());
            }
        }
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    eprintln!("{stem}: {summary}");
    Ok(ok)
}

fn dispatch(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Constants { weights, exps, eps, dual_rho } => constants(weights, exps, eps, *dual_rho),
        Command::Norm { family, weights, exps, budget, seed, tol } => norm(family, weights, exps, *budget, *seed, *tol),
        Command::Testing { family, weights, exps } => testing(family, weights, exps),
        Command::Trace { family, weights, exps, eps, root, dual } => trace(family, weights, exps, eps, *root, *dual),
        Command::VerifyBounds(args) => suite(ExperimentKind::VerifyBounds, "verify-bounds", args),
        Command::Counterexample(args) => suite(ExperimentKind::Counterexample, "counterexample", args),
        Command::Sweep(args) => suite(ExperimentKind::Sweep, "sweep", args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                let name = std::env::args().nth(1).unwrap_or_default();
                let mut cmd = Cli::command();
                cmd.build();
                if let Some(sub) = cmd.find_subcommand_mut(&name) {
                    eprintln!("\n{}", sub.render_usage());
                }
            }
            ExitCode::from(2)
        }
    }
}
