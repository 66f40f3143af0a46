//! Experiment runner: seeded verification suites, the counterexample study
//! and level sweeps, with CSV and JSON reports.
//!
//! Reports are a pure function of the configuration: instances run in
//! parallel but each draws from its own generator seeded by
//! `master_seed ^ instance_id`, and rows are assembled in instance order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bumps::{self, DualRho, EntropyFunction, ExponentConfig, TheoremMode};
use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::maximal;
use crate::operators;
use crate::prooftrace;
use crate::sparse::{self, SparseFamily};
use crate::weights::{Weight, WeightKind};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Master seed used when neither the config nor the environment sets one.
pub const DEFAULT_SEED: u64 = 42;

/// `x` in scientific notation with 17 significant digits.
pub fn fmt_sig17(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    VerifyBounds,
    Counterexample,
    Sweep,
    Trace,
    Constants,
    Norm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Random,
    Stopping,
    /// Random for even instance ids, stopping for odd ones.
    Mixed,
}

fn default_kind() -> ExperimentKind {
    ExperimentKind::VerifyBounds
}
fn default_dimension() -> u32 {
    1
}
fn default_leaf_level() -> u32 {
    8
}
fn default_levels() -> Vec<u32> {
    vec![8, 12, 16, 20]
}
fn default_p() -> f64 {
    2.0
}
fn default_q() -> f64 {
    3.0
}
fn default_delta() -> f64 {
    1.0
}
fn default_lambda() -> f64 {
    0.5
}
fn default_family() -> FamilyKind {
    FamilyKind::Mixed
}
fn default_family_size() -> usize {
    24
}
fn default_volatility() -> f64 {
    0.8
}
fn default_instances() -> usize {
    100
}
fn default_norm_budget() -> usize {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_kind")]
    pub kind: ExperimentKind,
    #[serde(default = "default_dimension")]
    pub dimension: u32,
    #[serde(default = "default_leaf_level")]
    pub leaf_level: u32,
    /// Leaf levels of the counterexample study and of sweeps.
    #[serde(default = "default_levels")]
    pub levels: Vec<u32>,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub mode: TheoremMode,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_family")]
    pub family: FamilyKind,
    /// Target size of random families.
    #[serde(default = "default_family_size")]
    pub family_size: usize,
    #[serde(default = "default_volatility")]
    pub volatility: f64,
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_norm_budget")]
    pub norm_budget: usize,
    #[serde(default)]
    pub dual_rho: DualRho,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl ExperimentConfig {
    /// Merges a JSON config (if any) with `--key value` overrides; override
    /// values are read as JSON when they parse, as strings otherwise.
    /// `env_seed` fills in the seed when neither source sets it. A given
    /// `kind` wins over the sources and brings its own defaults.
    pub fn from_sources(
        kind: Option<ExperimentKind>,
        file: Option<&str>,
        overrides: &[(String, String)],
        env_seed: Option<u64>,
    ) -> Result<Self> {
        let mut value = match file {
            Some(text) => serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?,
            None => Value::Object(Default::default()),
        };
        let map = value
            .as_object_mut()
            .ok_or_else(|| Error::InvalidConfig("config must be a JSON object".into()))?;
        if let Some(kind) = kind {
            map.insert("kind".into(), serde_json::to_value(kind)?);
            if kind == ExperimentKind::Counterexample {
                let defaults = [("p", json!(2.0)), ("q", json!(2.0)), ("mode", json!("extended")), ("delta", json!(0.5))];
                for (k, v) in defaults {
                    map.entry(k).or_insert(v);
                }
            }
        }
        for (key, raw) in overrides {
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            map.insert(key.replace('-', "_"), parsed);
        }
        let mut cfg: Self = serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if cfg.seed.is_none() {
            cfg.seed = env_seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn master_seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn grid(&self) -> Result<GridConfig> {
        GridConfig::new(self.dimension, self.leaf_level)
    }

    pub fn exponents(&self) -> Result<ExponentConfig> {
        ExponentConfig::new(self.p, self.q, self.alpha, self.dimension, self.mode)
    }

    pub fn entropy_eps(&self) -> Result<EntropyFunction> {
        EntropyFunction::entropy(self.delta)
    }

    pub fn direct_eps(&self) -> Result<EntropyFunction> {
        EntropyFunction::direct(self.delta)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.exponents()?;
        self.entropy_eps()?;
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::InvalidConfig(format!("lambda {} must lie in (0, 1)", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.volatility) {
            return Err(Error::InvalidConfig(format!("volatility {} must lie in [0, 1)", self.volatility)));
        }
        if self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("levels must be strictly increasing".into()));
        }
        for &n in &self.levels {
            GridConfig::new(self.dimension, n)?;
        }
        Ok(())
    }
}

/// Seed of the generator owned by one instance.
pub fn instance_seed(master: u64, instance_id: u64) -> u64 {
    master ^ instance_id
}

pub const CSV_COLUMNS: [&str; 20] = [
    "instance_id",
    "seed",
    "N",
    "lambda",
    "p",
    "q",
    "alpha",
    "delta",
    "A",
    "E",
    "E_star_sym",
    "D",
    "D_star",
    "T",
    "T_star",
    "norm_lb",
    "trace_entropy_pass",
    "trace_direct_pass",
    "certified_CE_ratio",
    "certified_CD_ratio",
];

/// One verified instance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InstanceRow {
    pub instance_id: u64,
    pub seed: u64,
    pub leaf_level: u32,
    pub lambda: f64,
    pub p: f64,
    pub q: f64,
    pub alpha: f64,
    pub delta: f64,
    pub family: FamilyKind,
    pub family_size: usize,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "E_star_printed")]
    pub e_star_printed: f64,
    #[serde(rename = "E_star_sym")]
    pub e_star_sym: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "D_star")]
    pub d_star: f64,
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "T_star")]
    pub t_star: f64,
    pub norm_lb: f64,
    /// Primal and dual entropy traces all pass.
    pub trace_entropy_pass: bool,
    /// Primal and dual direct traces all pass.
    pub trace_direct_pass: bool,
    /// `max_R T_R / ((2Σ_ε/(1-λ))^{1/q} E)`.
    #[serde(rename = "certified_CE_ratio")]
    pub certified_ce_ratio: f64,
    /// `max_R T_R / (C^{1/q} D)` with the direct trace constant `C`.
    #[serde(rename = "certified_CD_ratio")]
    pub certified_cd_ratio: f64,
    /// `max_R T_R / ((2Σ_ε/(1-λ))^{1/q} D)`.
    #[serde(rename = "nominal_CD_ratio")]
    pub nominal_cd_ratio: f64,
    #[serde(rename = "certified_CE_star_ratio")]
    pub certified_ce_star_ratio: f64,
    #[serde(rename = "certified_CD_star_ratio")]
    pub certified_cd_star_ratio: f64,
    #[serde(rename = "nominal_CD_star_ratio")]
    pub nominal_cd_star_ratio: f64,
    /// Largest stage-(ii) realized constant over all traces, against `2/(1-λ)`.
    pub max_realized_constant: f64,
    /// `(T + T*) / norm_lb`, a diagnostic only.
    pub testing_over_norm: f64,
    pub violations: Vec<String>,
}

impl InstanceRow {
    pub fn csv_record(&self) -> Vec<String> {
        let f = |x: f64| fmt_sig17(x);
        vec![
            self.instance_id.to_string(),
            self.seed.to_string(),
            self.leaf_level.to_string(),
            f(self.lambda),
            f(self.p),
            f(self.q),
            f(self.alpha),
            f(self.delta),
            f(self.a),
            f(self.e),
            f(self.e_star_sym),
            f(self.d),
            f(self.d_star),
            f(self.t),
            f(self.t_star),
            f(self.norm_lb),
            self.trace_entropy_pass.to_string(),
            self.trace_direct_pass.to_string(),
            f(self.certified_ce_ratio),
            f(self.certified_cd_ratio),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub instances: usize,
    pub violations: usize,
    pub violating_instances: usize,
    pub max_certified_ce_ratio: f64,
    pub max_certified_cd_ratio: f64,
    pub max_nominal_cd_ratio: f64,
    pub max_certified_ce_star_ratio: f64,
    pub max_certified_cd_star_ratio: f64,
    pub max_nominal_cd_star_ratio: f64,
    pub max_realized_constant: f64,
    pub max_testing_over_norm: f64,
}

impl Aggregate {
    fn of(rows: &[InstanceRow]) -> Self {
        let max = |f: fn(&InstanceRow) -> f64| rows.iter().map(f).fold(0.0, f64::max);
        Self {
            instances: rows.len(),
            violations: rows.iter().map(|r| r.violations.len()).sum(),
            violating_instances: rows.iter().filter(|r| !r.violations.is_empty()).count(),
            max_certified_ce_ratio: max(|r| r.certified_ce_ratio),
            max_certified_cd_ratio: max(|r| r.certified_cd_ratio),
            max_nominal_cd_ratio: max(|r| r.nominal_cd_ratio),
            max_certified_ce_star_ratio: max(|r| r.certified_ce_star_ratio),
            max_certified_cd_star_ratio: max(|r| r.certified_cd_star_ratio),
            max_nominal_cd_star_ratio: max(|r| r.nominal_cd_star_ratio),
            max_realized_constant: max(|r| r.max_realized_constant),
            max_testing_over_norm: max(|r| r.testing_over_norm),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub experiment: ExperimentKind,
    pub version: &'static str,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub aggregate: Aggregate,
    pub rows: Vec<InstanceRow>,
}

impl SuiteReport {
    fn new(cfg: &ExperimentConfig, rows: Vec<InstanceRow>) -> Self {
        Self {
            experiment: cfg.kind,
            version: VERSION,
            seed: cfg.master_seed(),
            config: cfg.clone(),
            aggregate: Aggregate::of(&rows),
            rows,
        }
    }

    pub fn violations(&self) -> usize {
        self.aggregate.violations
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for row in &self.rows {
            w.write_record(row.csv_record())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// The weights and family of one instance.
pub struct Instance {
    pub sigma: Weight,
    pub w: Weight,
    pub family: SparseFamily,
    pub family_kind: FamilyKind,
    pub rng: ChaCha8Rng,
}

/// Cascade weights and a λ-sparse family drawn from the instance generator.
pub fn make_instance(cfg: &ExperimentConfig, grid: GridConfig, instance_id: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(cfg.master_seed(), instance_id));
    let cascade = |seed| Weight::generate(grid, WeightKind::RandomCascade { seed, volatility: cfg.volatility });
    let sigma = cascade(rng.next_u64())?;
    let w = cascade(rng.next_u64())?;
    let family_seed = rng.next_u64();
    let family_kind = match cfg.family {
        FamilyKind::Mixed if instance_id.is_multiple_of(2) => FamilyKind::Random,
        FamilyKind::Mixed => FamilyKind::Stopping,
        other => other,
    };
    let family = match family_kind {
        FamilyKind::Stopping => sparse::stopping_family(&sigma, 1.0 / cfg.lambda, &grid.root())?,
        _ => sparse::random_sparse(grid, cfg.lambda, family_seed, cfg.family_size)?,
    };
    Ok(Instance { sigma, w, family, family_kind, rng })
}

/// All constants, traces and domination checks of one instance.
pub fn verify_instance(cfg: &ExperimentConfig, grid: GridConfig, instance_id: u64) -> Result<InstanceRow> {
    let exps = cfg.exponents()?;
    let (e_eps, d_eps) = (cfg.entropy_eps()?, cfg.direct_eps()?);
    let Instance { sigma, w, family, family_kind, mut rng } = make_instance(cfg, grid, instance_id)?;
    let rho_s = maximal::rho_all(&sigma);
    let rho_w = maximal::rho_all(&w);
    let eb = bumps::entropy_bumps_with(&sigma, &w, &exps, &e_eps, cfg.dual_rho, &rho_s, &rho_w)?;
    let db = bumps::direct_bumps(&sigma, &w, &exps, &d_eps)?;
    let testing = operators::testing_constants(&family, &sigma, &w, &exps)?;
    let norm_lb = operators::norm_lower_bound_seeded(&family, &sigma, &w, &exps, cfg.norm_budget, rng.next_u64())?;
    let et = prooftrace::entropy_traces(&family, &sigma, &w, &exps, &e_eps)?;
    let dt = prooftrace::direct_traces(&family, &sigma, &w, &exps, &d_eps)?;

    let mut violations = Vec::new();
    for (name, traces) in [("entropy", &et), ("direct", &dt)] {
        for (side, list) in [("primal", &traces.primal), ("dual", &traces.dual)] {
            for t in list.iter().filter(|t| !t.pass) {
                violations.push(format!("{name} {side} trace fails on {}", t.root));
            }
        }
    }
    let dual = exps.dual();
    for term in &testing.per_r {
        let r = term.cube;
        let ratio = operators::indicator_ratio(&family, &sigma, &w, &exps, &r)?;
        if norm_lb < ratio {
            violations.push(format!("norm lower bound {norm_lb} below indicator ratio {ratio} of {r}"));
        }
        if let Some(t) = term.t {
            if t > ratio * (1.0 + prooftrace::INEQ_RTOL) {
                violations.push(format!("testing term {t} exceeds indicator ratio {ratio} on {r}"));
            }
        }
        if let Some(t) = term.t_star {
            let dual_ratio = operators::indicator_ratio(&family, &w, &sigma, &dual, &r)?;
            if t > dual_ratio * (1.0 + prooftrace::INEQ_RTOL) {
                violations.push(format!("dual testing term {t} exceeds dual indicator ratio {dual_ratio} on {r}"));
            }
        }
    }
    let max_realized_constant = [&et, &dt]
        .iter()
        .flat_map(|t| t.primal.iter().chain(&t.dual))
        .map(|t| t.inner.max_realized_constant)
        .fold(0.0, f64::max);
    Ok(InstanceRow {
        instance_id,
        seed: instance_seed(cfg.master_seed(), instance_id),
        leaf_level: grid.leaf_level(),
        lambda: cfg.lambda,
        p: cfg.p,
        q: cfg.q,
        alpha: cfg.alpha,
        delta: cfg.delta,
        family: family_kind,
        family_size: family.len(),
        a: eb.a,
        e: eb.e.unwrap_or(0.0),
        e_star_printed: eb.e_star_printed.unwrap_or(0.0),
        e_star_sym: eb.e_star_symmetric.unwrap_or(0.0),
        d: db.d.unwrap_or(0.0),
        d_star: db.d_star.unwrap_or(0.0),
        t: testing.t,
        t_star: testing.t_star,
        norm_lb,
        trace_entropy_pass: et.pass(),
        trace_direct_pass: dt.pass(),
        certified_ce_ratio: et.max_ratio(),
        certified_cd_ratio: dt.max_ratio(),
        nominal_cd_ratio: dt.max_nominal_ratio(),
        certified_ce_star_ratio: et.max_dual_ratio(),
        certified_cd_star_ratio: dt.max_dual_ratio(),
        nominal_cd_star_ratio: dt.max_dual_nominal_ratio(),
        max_realized_constant,
        testing_over_norm: if norm_lb > 0.0 { (testing.t + testing.t_star) / norm_lb } else { f64::INFINITY },
        violations,
    })
}

fn run_instances(cfg: &ExperimentConfig, grid: GridConfig, ids: std::ops::Range<u64>) -> Result<Vec<InstanceRow>> {
    ids.into_par_iter().map(|i| verify_instance(cfg, grid, i)).collect()
}

/// The randomized verification suite at `cfg.leaf_level`.
pub fn run_verify_bounds(cfg: &ExperimentConfig) -> Result<SuiteReport> {
    cfg.validate()?;
    let rows = run_instances(cfg, cfg.grid()?, 0..cfg.instances as u64)?;
    Ok(SuiteReport::new(cfg, rows))
}

/// The verification suite repeated at each of `cfg.levels`; instance ids run
/// on across levels.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SuiteReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let n = cfg.instances as u64;
    for (k, &level) in cfg.levels.iter().enumerate() {
        let grid = GridConfig::new(cfg.dimension, level)?;
        let start = k as u64 * n;
        rows.extend(run_instances(cfg, grid, start..start + n)?);
    }
    Ok(SuiteReport::new(cfg, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CounterexampleRow {
    #[serde(rename = "N")]
    pub leaf_level: u32,
    pub llogl: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "D")]
    pub d: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CounterexampleReport {
    pub version: &'static str,
    pub delta: f64,
    pub rows: Vec<CounterexampleRow>,
    pub llogl_increasing: bool,
    pub e_increasing: bool,
    /// `D(N_{k+1}) / D(N_k)`.
    pub d_ratios: Vec<f64>,
}

pub const COUNTEREXAMPLE_COLUMNS: [&str; 5] = ["N", "llogl", "A", "E", "D"];

impl CounterexampleReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(COUNTEREXAMPLE_COLUMNS)?;
        for r in &self.rows {
            w.write_record([r.leaf_level.to_string(), fmt_sig17(r.llogl), fmt_sig17(r.a), fmt_sig17(r.e), fmt_sig17(r.d)])?;
        }
        let buf = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Largest `|D(N_{k+1})/D(N_k) - 1|` over the successive pairs.
    pub fn d_drift(&self) -> f64 {
        self.d_ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// `L log L` integral and the bumps `A`, `E`, `D` of the counterexample pair
/// at each leaf level, in dimension one.
pub fn run_counterexample(levels: &[u32], delta: f64, exps: &ExponentConfig) -> Result<CounterexampleReport> {
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("levels must be strictly increasing".into()));
    }
    if exps.dimension() != 1 || exps.p() != 2.0 || exps.q() != 2.0 || exps.alpha() != 0.0 {
        return Err(Error::InvalidConfig("the counterexample runs at d = 1, p = q = 2, alpha = 0".into()));
    }
    let e_eps = EntropyFunction::entropy(delta)?;
    let d_eps = EntropyFunction::direct(delta)?;
    let rows = levels
        .iter()
        .map(|&n| {
            let grid = GridConfig::new(1, n)?;
            let sigma = Weight::generate(grid, WeightKind::CounterexampleSigma)?;
            let w = Weight::generate(grid, WeightKind::CounterexampleW)?;
            let rho = maximal::rho_all(&sigma);
            Ok(CounterexampleRow {
                leaf_level: n,
                llogl: sigma.llogl_integral(),
                a: bumps::joint_apq_constant(&sigma, &w, exps)?.value,
                e: bumps::entropy_bump(&sigma, &w, exps, &e_eps, &rho)?.value,
                d: bumps::direct_bump(&sigma, &w, exps, &d_eps)?.value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let increasing = |f: fn(&CounterexampleRow) -> f64| rows.windows(2).all(|w| f(&w[1]) > f(&w[0]));
    Ok(CounterexampleReport {
        version: VERSION,
        delta,
        llogl_increasing: increasing(|r| r.llogl),
        e_increasing: increasing(|r| r.e),
        d_ratios: rows.windows(2).map(|w| w[1].d / w[0].d).collect(),
        rows,
    })
}

/// [`run_counterexample`] with the levels, `δ` and exponents of `cfg`.
pub fn run_counterexample_config(cfg: &ExperimentConfig) -> Result<CounterexampleReport> {
    cfg.validate()?;
    run_counterexample(&cfg.levels, cfg.delta, &cfg.exponents()?)
}

/// Files produced by [`write_reports`], keyed by extension.
pub type Written = BTreeMap<&'static str, PathBuf>;

/// Writes `<stem>.csv` and `<stem>.json` into `dir`.
pub fn write_reports(dir: &std::path::Path, stem: &str, csv: &str, json: &str) -> Result<Written> {
    std::fs::create_dir_all(dir)?;
    let mut out = Written::new();
    for (ext, body) in [("csv", csv), ("json", json)] {
        let path = dir.join(format!("{stem}.{ext}"));
        std::fs::write(&path, body)?;
        out.insert(ext, path);
    }
    Ok(out)
}
