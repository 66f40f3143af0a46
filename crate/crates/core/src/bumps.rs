//! Bump functionals: the joint `A_{p,q}^α` constant, entropy bumps
//! (`E`, `E*`) and direct-comparison bumps (`D`, `D*`).
//!
//! Every supremum over cubes is a maximum over the cubes of the grid; ties go
//! to the smallest `(level, index)` cube.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CubeMap, DyadicCube, GridConfig};
use crate::maximal;
use crate::weights::Weight;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TheoremMode {
    /// `1 < p < q < ∞`.
    #[default]
    Strict,
    /// `p = q` also allowed.
    Extended,
}

impl FromStr for TheoremMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(Self::Strict),
            "extended" => Ok(Self::Extended),
            other => Err(Error::Parse(format!("unknown mode {other:?} (strict|extended)"))),
        }
    }
}

/// `(p, q, α, d)` with the Hölder duals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExponentConfig {
    p: f64,
    q: f64,
    alpha: f64,
    dimension: u32,
    mode: TheoremMode,
}

impl ExponentConfig {
    pub fn new(p: f64, q: f64, alpha: f64, dimension: u32, mode: TheoremMode) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidExponents(m));
        if !(p > 1.0 && p.is_finite()) {
            return bad(format!("p = {p} must satisfy 1 < p < ∞"));
        }
        if !q.is_finite() {
            return bad(format!("q = {q} must be finite"));
        }
        match mode {
            TheoremMode::Strict if q <= p => return bad(format!("strict mode needs p < q, got p = {p}, q = {q}")),
            TheoremMode::Extended if q < p => return bad(format!("need p <= q, got p = {p}, q = {q}")),
            _ => {}
        }
        if !(1..=2).contains(&dimension) {
            return bad(format!("dimension {dimension} not in {{1, 2}}"));
        }
        if !(alpha >= 0.0 && alpha < dimension as f64) {
            return Err(Error::InvalidFractionalOrder { alpha, dimension });
        }
        Ok(Self { p, q, alpha, dimension, mode })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dimension(&self) -> u32 {
        self.dimension
    }

    pub fn mode(&self) -> TheoremMode {
        self.mode
    }

    /// `p' = p / (p - 1)`.
    pub fn p_dual(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    /// `q' = q / (q - 1)`.
    pub fn q_dual(&self) -> f64 {
        self.q / (self.q - 1.0)
    }

    /// The exponent pair `(q', p')` that plays `(p, q)` once the roles of the
    /// two weights are swapped.
    pub fn dual(&self) -> Self {
        Self { p: self.q_dual(), q: self.p_dual(), ..*self }
    }

    /// `α/d`.
    pub fn alpha_over_d(&self) -> f64 {
        self.alpha / self.dimension as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonShape {
    /// Increasing on `[1, ∞)`, summed over `r ≥ 0`.
    Entropy,
    /// Decreasing on `(0, 1)`, increasing on `(1, ∞)`, summed over all `r`.
    Direct,
}

#[derive(Clone, Debug, PartialEq)]
enum EpsilonForm {
    /// `(1 + log⁺ t)^{1+δ}` or `(1 + |log t|)^{1+δ}`.
    Log { delta: f64 },
    /// Values `ε(2^r)` for `r = first, first+1, ...`, interpolated linearly in
    /// `log₂ t` and held constant past either end. `declared_tail` bounds the
    /// inverse sum over the exponents the table does not list.
    Tabulated { first_exponent: i32, values: Vec<f64>, declared_tail: f64 },
}

/// An admissible `ε` together with `Σ_ε = Σ_r ε(2^r)^{-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntropyFunction {
    shape: EpsilonShape,
    form: EpsilonForm,
    tail_sum: f64,
}

/// Number of explicitly summed terms per side in [`EntropyFunction::tail_sum`].
const TAIL_TERMS: u32 = 100_000;

impl EntropyFunction {
    pub fn entropy(delta: f64) -> Result<Self> {
        Self::log(EpsilonShape::Entropy, delta)
    }

    pub fn direct(delta: f64) -> Result<Self> {
        Self::log(EpsilonShape::Direct, delta)
    }

    pub fn log(shape: EpsilonShape, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidEpsilon(format!("delta = {delta} must be positive")));
        }
        let one_side = log_tail_sum(delta);
        let tail_sum = match shape {
            EpsilonShape::Entropy => one_side,
            EpsilonShape::Direct => 2.0 * one_side - 1.0,
        };
        Ok(Self { shape, form: EpsilonForm::Log { delta }, tail_sum })
    }

    /// A user-supplied `ε` given by its dyadic values `ε(2^r)`,
    /// `r = first_exponent, first_exponent + 1, ...`.
    pub fn tabulated(shape: EpsilonShape, first_exponent: i32, values: Vec<f64>, declared_tail: f64) -> Result<Self> {
        let bad = |m: &str| Err(Error::InvalidEpsilon(m.to_string()));
        if values.iter().any(|v| !(v.is_finite() && *v >= 1.0)) {
            return bad("tabulated values must be finite and >= 1");
        }
        if !(declared_tail >= 0.0 && declared_tail.is_finite()) {
            return bad("declared tail must be finite and nonnegative");
        }
        let last = first_exponent + values.len() as i32 - 1;
        if first_exponent > 0 || last < 0 {
            return bad("table must contain the exponent r = 0");
        }
        if values[(-first_exponent) as usize] != 1.0 {
            return bad("table must satisfy eps(1) = 1");
        }
        if shape == EpsilonShape::Entropy && first_exponent != 0 {
            return bad("entropy-shaped table starts at r = 0");
        }
        let zero = (-first_exponent) as usize;
        if values[zero..].windows(2).any(|w| w[1] < w[0]) || values[..=zero].windows(2).any(|w| w[1] > w[0]) {
            return bad("tabulated values must be monotone away from r = 0");
        }
        let tail_sum = values.iter().map(|v| 1.0 / v).sum::<f64>() + declared_tail;
        Ok(Self { shape, form: EpsilonForm::Tabulated { first_exponent, values, declared_tail }, tail_sum })
    }

    pub fn shape(&self) -> EpsilonShape {
        self.shape
    }

    pub fn delta(&self) -> Option<f64> {
        match self.form {
            EpsilonForm::Log { delta } => Some(delta),
            EpsilonForm::Tabulated { .. } => None,
        }
    }

    /// `ε(t)` for `t > 0`; `ε(1) = 1`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        if t.is_nan() || t <= 0.0 {
            return Err(Error::EpsilonDomain(t));
        }
        Ok(self.eval_unchecked(t))
    }

    pub(crate) fn eval_unchecked(&self, t: f64) -> f64 {
        match &self.form {
            EpsilonForm::Log { delta } => {
                let l = match self.shape {
                    EpsilonShape::Entropy => t.ln().max(0.0),
                    EpsilonShape::Direct => t.ln().abs(),
                };
                (1.0 + l).powf(1.0 + delta)
            }
            EpsilonForm::Tabulated { first_exponent, values, .. } => {
                let x = t.log2() - *first_exponent as f64;
                if x <= 0.0 {
                    return values[0];
                }
                let i = x.floor() as usize;
                if i + 1 >= values.len() {
                    return values[values.len() - 1];
                }
                let frac = x - i as f64;
                values[i] + frac * (values[i + 1] - values[i])
            }
        }
    }

    /// `ε(2^r)`.
    pub fn at_dyadic(&self, r: i32) -> f64 {
        self.eval_unchecked(f64::powi(2.0, r))
    }

    /// Upper bound for `Σ_r ε(2^r)^{-1}` (over `r ≥ 0` for the entropy
    /// shape, over all integers for the direct shape).
    pub fn tail_sum(&self) -> f64 {
        self.tail_sum
    }

    pub fn summary(&self) -> EpsilonSummary {
        EpsilonSummary { kind: self.shape, delta: self.delta(), tail_sum: self.tail_sum }
    }

    fn require(&self, shape: EpsilonShape, message: &'static str) -> Result<()> {
        if self.shape == shape {
            Ok(())
        } else {
            Err(Error::WrongEpsilonKind(message))
        }
    }
}

/// `Σ_{r ≥ 0} (1 + r ln 2)^{-(1+δ)}`: explicit terms for `r ≤ R₀` plus
/// `∫_{R₀+1/2}^∞`, which dominates the remaining terms by convexity.
fn log_tail_sum(delta: f64) -> f64 {
    let ln2 = std::f64::consts::LN_2;
    let term = |r: f64| (1.0 + r * ln2).powf(-(1.0 + delta));
    let partial: f64 = (0..=TAIL_TERMS).rev().map(|r| term(r as f64)).sum();
    let x = TAIL_TERMS as f64 + 0.5;
    partial + (1.0 + x * ln2).powf(-delta) / (delta * ln2)
}

/// `Σ_ε` of `ε`.
pub fn eps_tail_sum(eps: &EntropyFunction) -> f64 {
    eps.tail_sum()
}

impl FromStr for EntropyFunction {
    type Err = Error;

    /// `"entropy:<δ>"` or `"direct:<δ>"`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, delta) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("bad epsilon {s:?}, expected entropy:<delta> or direct:<delta>")))?;
        let delta: f64 = delta.trim().parse().map_err(|_| Error::Parse(format!("bad delta in {s:?}")))?;
        match kind.trim() {
            "entropy" => Self::entropy(delta),
            "direct" => Self::direct(delta),
            other => Err(Error::Parse(format!("unknown epsilon kind {other:?}"))),
        }
    }
}

impl fmt::Display for EntropyFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.shape {
            EpsilonShape::Entropy => "entropy",
            EpsilonShape::Direct => "direct",
        };
        match self.delta() {
            Some(d) => write!(f, "{kind}:{d}"),
            None => write!(f, "{kind}:tabulated"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpsilonSummary {
    pub kind: EpsilonShape,
    pub delta: Option<f64>,
    pub tail_sum: f64,
}

/// Which local characteristic enters the dual entropy bump.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualRho {
    /// `ρ(Q;σ)`, literally as in the displayed `E*`.
    AsPrinted,
    /// `ρ(Q;w)`, the reading consistent with duality.
    #[default]
    Symmetric,
}

/// Per-cube witness of a maximum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Argmax {
    pub cube: DyadicCube,
    pub value: f64,
    pub rho_sigma: Option<f64>,
    pub rho_w: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BumpReport {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "E")]
    pub e: Option<f64>,
    /// The dual entropy bump selected by [`DualRho`].
    #[serde(rename = "E_star")]
    pub e_star: Option<f64>,
    #[serde(rename = "E_star_printed")]
    pub e_star_printed: Option<f64>,
    #[serde(rename = "E_star_symmetric")]
    pub e_star_symmetric: Option<f64>,
    #[serde(rename = "D")]
    pub d: Option<f64>,
    #[serde(rename = "D_star")]
    pub d_star: Option<f64>,
    pub argmax: std::collections::BTreeMap<String, Argmax>,
    pub eps: EpsilonSummary,
}

/// A maximum over the cubes of the grid and the cube attaining it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CubeMax {
    pub value: f64,
    pub argmax: DyadicCube,
}

/// `w(Q)^{1/q} σ(Q)^{1/p'} / |Q|^{1-α/d}`.
pub fn joint_factor(sigma: &Weight, w: &Weight, cfg: &ExponentConfig, cube: &DyadicCube) -> f64 {
    let vol = cube.volume();
    w.mass(cube).powf(1.0 / cfg.q()) * sigma.mass(cube).powf(1.0 / cfg.p_dual()) / vol.powf(1.0 - cfg.alpha_over_d())
}

/// Entropy-bump integrand `joint · (ρ ε(ρ))^{1/s}`; zero when `ρ` is undefined.
pub fn entropy_term(joint: f64, rho: Option<f64>, eps: &EntropyFunction, power: f64) -> f64 {
    match rho {
        Some(r) => joint * (r * eps.eval_unchecked(r)).powf(1.0 / power),
        None => 0.0,
    }
}

/// Direct-bump integrand `joint · ε(avg)^{1/s}`; zero when `avg = 0`.
pub fn direct_term(joint: f64, avg: f64, eps: &EntropyFunction, power: f64) -> f64 {
    if avg > 0.0 {
        joint * eps.eval_unchecked(avg).powf(1.0 / power)
    } else {
        0.0
    }
}

fn check_grids(sigma: &Weight, w: &Weight, cfg: &ExponentConfig) -> Result<GridConfig> {
    if sigma.grid() != w.grid() {
        return Err(Error::GridMismatch("sigma and w live on different grids".into()));
    }
    if cfg.dimension() != sigma.grid().dimension() {
        return Err(Error::GridMismatch("exponent dimension differs from the grid".into()));
    }
    Ok(*sigma.grid())
}

/// Values within `TIE_RTOL` of the running best count as ties.
const TIE_RTOL: f64 = 1e-14;

fn argmax_over<F: Fn(&DyadicCube) -> f64>(grid: &GridConfig, f: F) -> (f64, DyadicCube) {
    let root = grid.root();
    let mut best = (f(&root), root);
    for q in grid.cubes().skip(1) {
        let v = f(&q);
        if v > best.0 + TIE_RTOL * best.0.abs() {
            best = (v, q);
        }
    }
    best
}

/// `A = max_Q w(Q)^{1/q} σ(Q)^{1/p'} / |Q|^{1-α/d}`.
pub fn joint_apq_constant(sigma: &Weight, w: &Weight, cfg: &ExponentConfig) -> Result<CubeMax> {
    let grid = check_grids(sigma, w, cfg)?;
    let (value, argmax) = argmax_over(&grid, |q| joint_factor(sigma, w, cfg, q));
    Ok(CubeMax { value, argmax })
}

/// `E`, `E*` (both readings) and `A`.
pub fn entropy_bumps(
    sigma: &Weight,
    w: &Weight,
    cfg: &ExponentConfig,
    eps: &EntropyFunction,
    dual_rho: DualRho,
) -> Result<BumpReport> {
    check_grids(sigma, w, cfg)?;
    eps.require(EpsilonShape::Entropy, "direct ε passed to entropy bump")?;
    let rho_sigma = maximal::rho_all(sigma);
    let rho_w = maximal::rho_all(w);
    entropy_bumps_with(sigma, w, cfg, eps, dual_rho, &rho_sigma, &rho_w)
}

/// [`entropy_bumps`] with precomputed `ρ(·;σ)` and `ρ(·;w)` maps.
pub fn entropy_bumps_with(
    sigma: &Weight,
    w: &Weight,
    cfg: &ExponentConfig,
    eps: &EntropyFunction,
    dual_rho: DualRho,
    rho_sigma: &CubeMap<Option<f64>>,
    rho_w: &CubeMap<Option<f64>>,
) -> Result<BumpReport> {
    let grid = check_grids(sigma, w, cfg)?;
    eps.require(EpsilonShape::Entropy, "direct ε passed to entropy bump")?;
    let (q, pd) = (cfg.q(), cfg.p_dual());
    let witness = |cube: DyadicCube, value: f64| Argmax {
        cube,
        value,
        rho_sigma: *rho_sigma.get(&cube),
        rho_w: *rho_w.get(&cube),
    };
    let joint = |c: &DyadicCube| joint_factor(sigma, w, cfg, c);
    let a = argmax_over(&grid, joint);
    let e = argmax_over(&grid, |c| entropy_term(joint(c), *rho_sigma.get(c), eps, q));
    let printed = argmax_over(&grid, |c| entropy_term(joint(c), *rho_sigma.get(c), eps, pd));
    let symmetric = argmax_over(&grid, |c| entropy_term(joint(c), *rho_w.get(c), eps, pd));
    let chosen = match dual_rho {
        DualRho::AsPrinted => printed.0,
        DualRho::Symmetric => symmetric.0,
    };
    let argmax = [
        ("A", witness(a.1, a.0)),
        ("E", witness(e.1, e.0)),
        ("E_star_printed", witness(printed.1, printed.0)),
        ("E_star_symmetric", witness(symmetric.1, symmetric.0)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok(BumpReport {
        a: a.0,
        e: Some(e.0),
        e_star: Some(chosen),
        e_star_printed: Some(printed.0),
        e_star_symmetric: Some(symmetric.0),
        d: None,
        d_star: None,
        argmax,
        eps: eps.summary(),
    })
}

/// `max_Q joint(Q) (ρ(Q;σ) ε(ρ(Q;σ)))^{1/q}`, i.e. `E` alone.
pub fn entropy_bump(
    sigma: &Weight,
    w: &Weight,
    cfg: &ExponentConfig,
    eps: &EntropyFunction,
    rho_sigma: &CubeMap<Option<f64>>,
) -> Result<CubeMax> {
    let grid = check_grids(sigma, w, cfg)?;
    eps.require(EpsilonShape::Entropy, "direct ε passed to entropy bump")?;
    let (value, argmax) =
        argmax_over(&grid, |c| entropy_term(joint_factor(sigma, w, cfg, c), *rho_sigma.get(c), eps, cfg.q()));
    Ok(CubeMax { value, argmax })
}

/// `max_Q joint(Q) ε(⟨σ⟩_Q)^{1/q}`, i.e. `D` alone.
pub fn direct_bump(sigma: &Weight, w: &Weight, cfg: &ExponentConfig, eps: &EntropyFunction) -> Result<CubeMax> {
    let grid = check_grids(sigma, w, cfg)?;
    eps.require(EpsilonShape::Direct, "entropy ε passed to direct bump")?;
    let (value, argmax) =
        argmax_over(&grid, |c| direct_term(joint_factor(sigma, w, cfg, c), sigma.average(c), eps, cfg.q()));
    Ok(CubeMax { value, argmax })
}

/// `D`, `D*` and `A`.
pub fn direct_bumps(sigma: &Weight, w: &Weight, cfg: &ExponentConfig, eps: &EntropyFunction) -> Result<BumpReport> {
    let grid = check_grids(sigma, w, cfg)?;
    eps.require(EpsilonShape::Direct, "entropy ε passed to direct bump")?;
    let (q, pd) = (cfg.q(), cfg.p_dual());
    let joint = |c: &DyadicCube| joint_factor(sigma, w, cfg, c);
    let a = argmax_over(&grid, joint);
    let d = argmax_over(&grid, |c| direct_term(joint(c), sigma.average(c), eps, q));
    let d_star = argmax_over(&grid, |c| direct_term(joint(c), w.average(c), eps, pd));
    let witness = |cube: DyadicCube, value: f64| Argmax { cube, value, rho_sigma: None, rho_w: None };
    let argmax = [("A", witness(a.1, a.0)), ("D", witness(d.1, d.0)), ("D_star", witness(d_star.1, d_star.0))]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    Ok(BumpReport {
        a: a.0,
        e: None,
        e_star: None,
        e_star_printed: None,
        e_star_symmetric: None,
        d: Some(d.0),
        d_star: Some(d_star.0),
        argmax,
        eps: eps.summary(),
    })
}
