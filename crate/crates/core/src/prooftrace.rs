//! Machine-checked versions of the two bump-to-testing proofs.
//!
//! A trace stratifies the family members inside `R` by `ρ(Q;σ)` (entropy) or
//! by `⟨σ⟩_Q` (direct) into bands `[2^a, 2^{a+1})`, then checks every link of
//! the chain
//!
//! ```text
//! Σ_{Q ⊆ R} |Q|^{qα/d} ⟨σ⟩_Q^q w(Q)  =  Σ_a Σ_{Q* ∈ S_a*} Σ_{Q ∈ S_a, Q ⊆ Q*} (...)
//!                                    ≤  Σ_a (2/(1-λ)) B^q σ(Q*)^{q/p} / ε_a
//!                                    ≤  (2 Σ/(1-λ)) B^q σ(R)^{q/p}
//! ```
//!
//! with `B` the bump. Dual traces are the same traces with `(σ, w)` swapped
//! and [`ExponentConfig::dual`] in place of the exponents.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::bumps::{self, EntropyFunction, EpsilonShape, EpsilonSummary, ExponentConfig};
use crate::error::{Error, Result};
use crate::grid::{exp2i, CubeMap, DyadicCube};
use crate::maximal;
use crate::operators;
use crate::sparse::{carleson_with_rho, CarlesonCheck, SparseFamily};
use crate::weights::Weight;

/// Relative slack allowed on every checked inequality.
pub const INEQ_RTOL: f64 = 1e-12;

/// Relative tolerance of the partition identity.
pub const PARTITION_RTOL: f64 = 1e-12;

pub const SCHEMA: &str = "trace/v1";

fn le(x: f64, y: f64) -> bool {
    x <= y + INEQ_RTOL * y.abs()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StrataKey {
    Rho,
    Average,
}

/// `a = ⌊log₂ x⌋`, exact at powers of two.
pub fn band(x: f64) -> i32 {
    let mut a = x.log2().floor() as i32;
    while exp2i(a) > x {
        a -= 1;
    }
    while exp2i(a + 1) <= x {
        a += 1;
    }
    a
}

#[derive(Clone, Debug, PartialEq)]
pub struct Strata {
    key: StrataKey,
    buckets: BTreeMap<i32, Vec<DyadicCube>>,
    maximal: BTreeMap<i32, Vec<DyadicCube>>,
    top: HashMap<DyadicCube, DyadicCube>,
}

impl Strata {
    fn build(key: StrataKey, keyed: Vec<(DyadicCube, f64)>) -> Self {
        let mut buckets: BTreeMap<i32, Vec<DyadicCube>> = BTreeMap::new();
        for (q, v) in keyed {
            buckets.entry(band(v)).or_default().push(q);
        }
        let mut maximal = BTreeMap::new();
        let mut top = HashMap::new();
        for (a, cubes) in buckets.iter_mut() {
            cubes.sort();
            let set: std::collections::HashSet<_> = cubes.iter().copied().collect();
            let mut tops = Vec::new();
            for q in cubes.iter() {
                let t = q.ancestors().filter(|c| set.contains(c)).last().unwrap_or(*q);
                if t == *q {
                    tops.push(*q);
                }
                top.insert(*q, t);
            }
            maximal.insert(*a, tops);
        }
        Self { key, buckets, maximal, top }
    }

    pub fn key(&self) -> StrataKey {
        self.key
    }

    /// `a ↦ S_a`, cubes sorted.
    pub fn buckets(&self) -> &BTreeMap<i32, Vec<DyadicCube>> {
        &self.buckets
    }

    /// `a ↦ S_a*`, the maximal cubes of each bucket.
    pub fn maximal_cubes(&self) -> &BTreeMap<i32, Vec<DyadicCube>> {
        &self.maximal
    }

    /// The maximal cube of its own bucket containing `cube`.
    pub fn top(&self, cube: &DyadicCube) -> Option<DyadicCube> {
        self.top.get(cube).copied()
    }
}

fn key_values(
    cubes: impl Iterator<Item = DyadicCube>,
    sigma: &Weight,
    key: StrataKey,
    rho: Option<&CubeMap<Option<f64>>>,
) -> Result<Vec<(DyadicCube, f64)>> {
    cubes
        .map(|q| {
            if sigma.mass(&q) <= 0.0 {
                return Err(Error::DegenerateWeight(q));
            }
            let v = match (key, rho) {
                (StrataKey::Average, _) => sigma.average(&q),
                (StrataKey::Rho, Some(map)) => map.get(&q).ok_or(Error::DegenerateWeight(q))?,
                (StrataKey::Rho, None) => maximal::rho(sigma, &q)?,
            };
            Ok((q, v))
        })
        .collect()
}

/// Buckets `a ↦ {Q ∈ S : key(Q) ∈ [2^a, 2^{a+1})}` and their maximal cubes.
pub fn stratify(family: &SparseFamily, sigma: &Weight, key: StrataKey) -> Result<Strata> {
    if family.grid() != sigma.grid() {
        return Err(Error::GridMismatch("sigma and the family live on different grids".into()));
    }
    let keyed = key_values(family.cubes().iter().copied(), sigma, key, None)?;
    Ok(Strata::build(key, keyed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Entropy,
    Direct,
}

/// One `(a, Q*)` inner sum and the links bounding it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StratumRecord {
    pub a: i32,
    pub q_star: DyadicCube,
    pub members: usize,
    /// `ε_a`: `ε(2^a)`, or `ε(2^{a+1})` for direct bands below 1.
    pub eps_a: f64,
    pub inner_lhs: f64,
    /// `Σ B^q σ(Q)^{q/p} / (2^a ε_a)` (entropy) or `/ ε_a` (direct).
    pub term_bound: f64,
    /// `Σ σ(Q)^{q/p}`.
    pub power_sum: f64,
    /// `σ(Q*)^{q/p - 1} Σ σ(Q)`.
    pub superadditive_bound: f64,
    /// `Σ σ(Q)` over the inner sum.
    pub mass_sum: f64,
    /// Carleson bound over all members inside `Q*` (entropy only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub carleson: Option<CarlesonCheck>,
    /// `Σ |Q|` over members inside `Q*` and its bound `|Q*|/(1-λ)` (direct only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub volume: Option<(f64, f64)>,
    /// `2 σ(Q*) / (1-λ)`.
    pub mass_bound: f64,
    pub inner_bound: f64,
    /// `inner_lhs · ε_a / (B^q σ(Q*)^{q/p})`, at most `2/(1-λ)`.
    pub realized_constant: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartitionStage {
    pub pass: bool,
    pub lhs_total: f64,
    pub strata_total: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InnerStage {
    pub pass: bool,
    /// `2/(1-λ)`.
    pub constant: f64,
    pub max_realized_constant: f64,
    pub strata: Vec<StratumRecord>,
    /// First failing `(a, Q*)`.
    pub violation: Option<(i32, DyadicCube)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalStage {
    pub pass: bool,
    /// `a ↦ Σ_{Q* ∈ S_a*} σ(Q*)^{q/p}`, each at most `σ(R)^{q/p}`.
    pub maximal_power_sums: BTreeMap<i32, f64>,
    /// `Σ_a 1/ε_a` over the occurring bands.
    pub inverse_eps_sum: f64,
    /// Bound for `Σ_a 1/ε_a` over all bands.
    pub eps_sum: f64,
    /// `Σ` of the inner bounds.
    pub strata_bound: f64,
    /// `2 eps_sum / (1-λ)`.
    pub final_constant: f64,
    pub final_bound: f64,
    /// First band whose maximal cubes break `Σ σ(Q*)^{q/p} ≤ σ(R)^{q/p}`.
    pub violation: Option<i32>,
}

/// `T_R ≤ final_constant^{1/q} · B`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certificate {
    pub pass: bool,
    /// `T_R`, with `w(E_Q)` masses.
    pub testing_value: f64,
    /// The `q`-th power sum of `T_R` against `lhs_total`.
    pub exceptional_lhs: f64,
    pub certified_constant: f64,
    pub bound: f64,
    /// `testing_value / bound`.
    pub ratio: f64,
    /// `(2 Σ_ε/(1-λ))^{1/q}`, equal to `certified_constant` for entropy traces.
    pub nominal_constant: f64,
    /// `testing_value / (nominal_constant · B)`.
    pub nominal_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceReport {
    pub schema: &'static str,
    pub kind: TraceKind,
    pub root: DyadicCube,
    pub p: f64,
    pub q: f64,
    pub alpha: f64,
    pub lambda: f64,
    /// `E` or `D` (or their duals for swapped arguments).
    pub bump: f64,
    pub bump_argmax: DyadicCube,
    pub eps: EpsilonSummary,
    pub lhs_total: f64,
    pub partition: PartitionStage,
    pub inner: InnerStage,
    #[serde(rename = "final")]
    pub final_stage: FinalStage,
    pub certificate: Certificate,
    pub pass: bool,
}

impl TraceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_root(family: &SparseFamily, sigma: &Weight, w: &Weight, r: &DyadicCube) -> Result<()> {
    if family.grid() != sigma.grid() || family.grid() != w.grid() {
        return Err(Error::GridMismatch("weights and the family live on different grids".into()));
    }
    if !family.contains(r) {
        return Err(Error::NotInFamily(*r));
    }
    Ok(())
}

/// Entropy trace on `R`; the bump is `E` over the whole grid.
pub fn entropy_trace(
    family: &SparseFamily,
    sigma: &Weight,
    w: &Weight,
    cfg: &ExponentConfig,
    eps: &EntropyFunction,
    r: &DyadicCube,
) -> Result<TraceReport> {
    check_root(family, sigma, w, r)?;
    let rho = maximal::rho_all(sigma);
    let bump = bumps::entropy_bump(sigma, w, cfg, eps, &rho)?;
    entropy_trace_with(family, sigma, w, cfg, eps, r, &rho, bump)
}

/// [`entropy_trace`] with `ρ(·;σ)` and `E` supplied.
#[allow(clippy::too_many_arguments)]
pub fn entropy_trace_with(
    family: &SparseFamily,
    sigma: &Weight,
    w: &Weight,
    cfg: &ExponentConfig,
    eps: &EntropyFunction,
    r: &DyadicCube,
    rho: &CubeMap<Option<f64>>,
    bump: bumps::CubeMax,
) -> Result<TraceReport> {
    check_root(family, sigma, w, r)?;
    if eps.shape() != EpsilonShape::Entropy {
        return Err(Error::WrongEpsilonKind("direct ε passed to entropy trace"));
    }
    let keyed = key_values(family.members_within(r), sigma, StrataKey::Rho, Some(rho))?;
    let strata = Strata::build(StrataKey::Rho, keyed);
    Ok(run(TraceKind::Entropy, family, sigma, w, cfg, eps, r, &strata, Some(rho), bump))
}

/// Direct trace on `R`; the bump is `D` over the whole grid.
pub fn direct_trace(
    family: &SparseFamily,
    sigma: &Weight,
    w: &Weight,
    cfg: &ExponentConfig,
    eps: &EntropyFunction,
    r: &DyadicCube,
) -> Result<TraceReport> {
    check_root(family, sigma, w, r)?;
    let bump = bumps::direct_bump(sigma, w, cfg, eps)?;
    direct_trace_with(family, sigma, w, cfg, eps, r, bump)
}

/// [`direct_trace`] with `D` supplied.
pub fn direct_trace_with(
    family: &SparseFamily,
    sigma: &Weight,
    w: &Weight,
    cfg: &ExponentConfig,
    eps: &EntropyFunction,
    r: &DyadicCube,
    bump: bumps::CubeMax,
) -> Result<TraceReport> {
    check_root(family, sigma, w, r)?;
    if eps.shape() != EpsilonShape::Direct {
        return Err(Error::WrongEpsilonKind("entropy ε passed to direct trace"));
    }
    let keyed = key_values(family.members_within(r), sigma, StrataKey::Average, None)?;
    let strata = Strata::build(StrataKey::Average, keyed);
    Ok(run(TraceKind::Direct, family, sigma, w, cfg, eps, r, &strata, None, bump))
}

/// The dual entropy trace: `T*_R` against `E*` with `ρ(Q;w)`.
pub fn dual_entropy_trace(
    family: &SparseFamily,
    sigma: &Weight,
    w: &Weight,
    cfg: &ExponentConfig,
    eps: &EntropyFunction,
    r: &DyadicCube,
) -> Result<TraceReport> {
    entropy_trace(family, w, sigma, &cfg.dual(), eps, r)
}

/// The dual direct trace: `T*_R` against `D*`.
pub fn dual_direct_trace(
    family: &SparseFamily,
    sigma: &Weight,
    w: &Weight,
    cfg: &ExponentConfig,
    eps: &EntropyFunction,
    r: &DyadicCube,
) -> Result<TraceReport> {
    direct_trace(family, w, sigma, &cfg.dual(), eps, r)
}

/// `ε_a` of the band `[2^a, 2^{a+1})`: the smallest value of `ε` on it.
fn band_eps(kind: TraceKind, eps: &EntropyFunction, a: i32) -> f64 {
    match kind {
        TraceKind::Direct if a < 0 => eps.at_dyadic(a + 1),
        _ => eps.at_dyadic(a),
    }
}

/// Upper bound for `Σ_a 1/ε_a` over every band that can occur.
fn eps_sum(kind: TraceKind, eps: &EntropyFunction) -> f64 {
    match kind {
        TraceKind::Entropy => eps.tail_sum(),
        // bands a = -1 and a = 0 both use ε(1) = 1
        TraceKind::Direct => eps.tail_sum() + 1.0,
    }
}

#[allow(clippy::too_many_arguments)]
fn run(
    kind: TraceKind,
    family: &SparseFamily,
    sigma: &Weight,
    w: &Weight,
    cfg: &ExponentConfig,
    eps: &EntropyFunction,
    r: &DyadicCube,
    strata: &Strata,
    rho: Option<&CubeMap<Option<f64>>>,
    bump: bumps::CubeMax,
) -> TraceReport {
    let (p, q, lambda) = (cfg.p(), cfg.q(), family.lambda());
    let qp = q / p;
    let b = bump.value;
    let bq = b.powf(q);
    let ad = cfg.alpha_over_d();
    let term = |c: &DyadicCube| (c.volume().powf(ad) * sigma.average(c)).powf(q) * w.mass(c);
    let two = 2.0 / (1.0 - lambda);

    // stage (i)
    let lhs_total: f64 = family.members_within(r).map(|c| term(&c)).sum();
    let mut inner_sums: BTreeMap<(i32, DyadicCube), Vec<DyadicCube>> = BTreeMap::new();
    for (a, cubes) in strata.buckets() {
        for c in cubes {
            let top = strata.top(c).unwrap_or(*c);
            inner_sums.entry((*a, top)).or_default().push(*c);
        }
    }
    let strata_total: f64 = inner_sums.values().flat_map(|cs| cs.iter().map(&term)).sum();
    let relative_error = if lhs_total > 0.0 { (lhs_total - strata_total).abs() / lhs_total } else { strata_total.abs() };
    let partition = PartitionStage { pass: relative_error <= PARTITION_RTOL, lhs_total, strata_total, relative_error };

    // stage (ii)
    let mut records = Vec::new();
    for ((a, q_star), cubes) in &inner_sums {
        let (a, q_star) = (*a, *q_star);
        let eps_a = band_eps(kind, eps, a);
        let inner_lhs: f64 = cubes.iter().map(&term).sum();
        let power_sum: f64 = cubes.iter().map(|c| sigma.mass(c).powf(qp)).sum();
        let mass_sum: f64 = cubes.iter().map(|c| sigma.mass(c)).sum();
        let s_star = sigma.mass(&q_star);
        let band_floor = match kind {
            TraceKind::Entropy => exp2i(a),
            TraceKind::Direct => 1.0,
        };
        let term_bound = bq * power_sum / (band_floor * eps_a);
        let superadditive_bound = s_star.powf(qp - 1.0) * mass_sum;
        let mass_bound = two * s_star * match kind {
            TraceKind::Entropy => exp2i(a),
            TraceKind::Direct => 1.0,
        };
        let mut ok = le(inner_lhs, term_bound) && le(power_sum, superadditive_bound);
        let (carleson, volume) = match kind {
            TraceKind::Entropy => {
                let rho_star = rho.and_then(|m| *m.get(&q_star)).unwrap_or(f64::INFINITY);
                let c = carleson_with_rho(family, sigma, &q_star, rho_star);
                ok &= le(mass_sum, c.lhs) && le(c.lhs, c.rhs) && rho_star < exp2i(a + 1);
                ok &= le(c.rhs, mass_bound);
                (Some(c), None)
            }
            TraceKind::Direct => {
                let vol: f64 = family.members_within(&q_star).map(|c| c.volume()).sum();
                let vol_bound = q_star.volume() / (1.0 - lambda);
                ok &= le(vol, vol_bound);
                ok &= le(mass_sum, exp2i(a + 1) * cubes.iter().map(DyadicCube::volume).sum::<f64>());
                ok &= le(exp2i(a + 1) * vol_bound, mass_bound);
                (None, Some((vol, vol_bound)))
            }
        };
        let inner_bound = two * bq * s_star.powf(qp) / eps_a;
        ok &= le(inner_lhs, inner_bound);
        let scale = bq * s_star.powf(qp) / eps_a;
        let realized_constant = if scale > 0.0 { inner_lhs / scale } else { 0.0 };
        records.push(StratumRecord {
            a,
            q_star,
            members: cubes.len(),
            eps_a,
            inner_lhs,
            term_bound,
            power_sum,
            superadditive_bound,
            mass_sum,
            carleson,
            volume,
            mass_bound,
            inner_bound,
            realized_constant,
            pass: ok,
        });
    }
    let violation = records.iter().find(|s| !s.pass).map(|s| (s.a, s.q_star));
    let max_realized_constant = records.iter().map(|s| s.realized_constant).fold(0.0, f64::max);
    let inner = InnerStage { pass: violation.is_none(), constant: two, max_realized_constant, strata: records, violation };

    // stage (iii)
    let s_r = sigma.mass(r);
    let maximal_power_sums: BTreeMap<i32, f64> = strata
        .maximal_cubes()
        .iter()
        .map(|(a, tops)| (*a, tops.iter().map(|c| sigma.mass(c).powf(qp)).sum()))
        .collect();
    let final_violation = maximal_power_sums.iter().find(|(_, v)| !le(**v, s_r.powf(qp))).map(|(a, _)| *a);
    let inverse_eps_sum: f64 = strata.buckets().keys().map(|a| 1.0 / band_eps(kind, eps, *a)).sum();
    let eps_bound = eps_sum(kind, eps);
    let strata_bound: f64 = inner.strata.iter().map(|s| s.inner_bound).sum();
    let final_constant = 2.0 * eps_bound / (1.0 - lambda);
    let final_bound = final_constant * bq * s_r.powf(qp);
    let mid = two * bq * s_r.powf(qp) * inverse_eps_sum;
    let final_pass = final_violation.is_none()
        && le(inverse_eps_sum, eps_bound)
        && le(lhs_total, strata_bound)
        && le(strata_bound, mid)
        && le(mid, final_bound)
        && le(lhs_total, final_bound);
    let final_stage = FinalStage {
        pass: final_pass,
        maximal_power_sums,
        inverse_eps_sum,
        eps_sum: eps_bound,
        strata_bound,
        final_constant,
        final_bound,
        violation: final_violation,
    };

    // certificate
    let exceptional_lhs: f64 = family
        .members_within(r)
        .map(|c| {
            let e = family.exceptional(&c).map_or(0.0, |e| e.mass(w));
            (c.volume().powf(ad) * sigma.average(&c)).powf(q) * e
        })
        .sum();
    let testing_value = operators::testing_term(family, sigma, w, cfg, r).unwrap_or(0.0);
    let certified_constant = final_constant.powf(1.0 / q);
    let bound = certified_constant * b;
    let ratio = if bound > 0.0 { testing_value / bound } else { f64::INFINITY };
    let nominal_constant = (2.0 * eps.tail_sum() / (1.0 - lambda)).powf(1.0 / q);
    let nominal_ratio = if b > 0.0 { testing_value / (nominal_constant * b) } else { f64::INFINITY };
    let certificate = Certificate {
        pass: le(exceptional_lhs, lhs_total) && le(testing_value, bound),
        testing_value,
        exceptional_lhs,
        certified_constant,
        bound,
        ratio,
        nominal_constant,
        nominal_ratio,
    };

    let pass = partition.pass && inner.pass && final_stage.pass && certificate.pass;
    TraceReport {
        schema: SCHEMA,
        kind,
        root: *r,
        p,
        q,
        alpha: cfg.alpha(),
        lambda,
        bump: b,
        bump_argmax: bump.argmax,
        eps: eps.summary(),
        lhs_total,
        partition,
        inner,
        final_stage,
        certificate,
        pass,
    }
}

/// Traces over every `R ∈ S`, primal and dual, sharing the bump and `ρ`
/// computations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilyTraces {
    pub primal: Vec<TraceReport>,
    pub dual: Vec<TraceReport>,
}

impl FamilyTraces {
    pub fn pass(&self) -> bool {
        self.primal.iter().chain(&self.dual).all(|t| t.pass)
    }

    /// Largest `T_R / bound` over the primal traces.
    pub fn max_ratio(&self) -> f64 {
        self.primal.iter().map(|t| t.certificate.ratio).fold(0.0, f64::max)
    }

    /// Largest `T*_R / bound` over the dual traces.
    pub fn max_dual_ratio(&self) -> f64 {
        self.dual.iter().map(|t| t.certificate.ratio).fold(0.0, f64::max)
    }

    /// Largest `T_R / (nominal_constant · B)` over the primal traces.
    pub fn max_nominal_ratio(&self) -> f64 {
        self.primal.iter().map(|t| t.certificate.nominal_ratio).fold(0.0, f64::max)
    }

    /// Largest `T*_R / (nominal_constant · B*)` over the dual traces.
    pub fn max_dual_nominal_ratio(&self) -> f64 {
        self.dual.iter().map(|t| t.certificate.nominal_ratio).fold(0.0, f64::max)
    }
}

/// Entropy traces for all `R ∈ S` with `σ(R) > 0` (primal) and `w(R) > 0`
/// (dual).
pub fn entropy_traces(
    family: &SparseFamily,
    sigma: &Weight,
    w: &Weight,
    cfg: &ExponentConfig,
    eps: &EntropyFunction,
) -> Result<FamilyTraces> {
    let rho_s = maximal::rho_all(sigma);
    let rho_w = maximal::rho_all(w);
    let dual = cfg.dual();
    let e = bumps::entropy_bump(sigma, w, cfg, eps, &rho_s)?;
    let e_star = bumps::entropy_bump(w, sigma, &dual, eps, &rho_w)?;
    let mut out = FamilyTraces { primal: Vec::new(), dual: Vec::new() };
    for r in family.cubes() {
        if sigma.mass(r) > 0.0 {
            out.primal.push(entropy_trace_with(family, sigma, w, cfg, eps, r, &rho_s, e)?);
        }
        if w.mass(r) > 0.0 {
            out.dual.push(entropy_trace_with(family, w, sigma, &dual, eps, r, &rho_w, e_star)?);
        }
    }
    Ok(out)
}

/// Direct traces for all `R ∈ S`, primal and dual.
pub fn direct_traces(
    family: &SparseFamily,
    sigma: &Weight,
    w: &Weight,
    cfg: &ExponentConfig,
    eps: &EntropyFunction,
) -> Result<FamilyTraces> {
    let dual = cfg.dual();
    let d = bumps::direct_bump(sigma, w, cfg, eps)?;
    let d_star = bumps::direct_bump(w, sigma, &dual, eps)?;
    let mut out = FamilyTraces { primal: Vec::new(), dual: Vec::new() };
    for r in family.cubes() {
        if sigma.mass(r) > 0.0 {
            out.primal.push(direct_trace_with(family, sigma, w, cfg, eps, r, d)?);
        }
        if w.mass(r) > 0.0 {
            out.dual.push(direct_trace_with(family, w, sigma, &dual, eps, r, d_star)?);
        }
    }
    Ok(out)
}
