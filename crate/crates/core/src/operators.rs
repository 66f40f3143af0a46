//! The sparse operator `T_{α,S}(σ·)`, its norms and the testing constants
//! `T`, `T*`.
//!
//! Norms are taken from `L^p(σ)` to `L^q(w)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bumps::{ExponentConfig, TheoremMode};
use crate::error::{Error, Result};
use crate::grid::{DyadicCube, GridConfig};
use crate::sparse::SparseFamily;
use crate::weights::{LeafFunction, Weight};

/// Power iteration gives up after this many steps.
pub const MAX_POWER_ITERATIONS: usize = 200_000;

/// Random starts used by [`norm_lower_bound`] besides the constant start.
pub const RANDOM_STARTS: usize = 3;

/// Leaf ranges and scale factors `|Q|^{α/d} · 2^{-dN} / |Q|` of the family.
struct Kernel {
    blocks: Vec<(std::ops::Range<usize>, f64)>,
    leaves: usize,
}

impl Kernel {
    fn new(family: &SparseFamily, alpha: f64) -> Result<Self> {
        let grid = family.grid();
        let d = grid.dimension();
        if !(alpha >= 0.0 && alpha < d as f64) {
            return Err(Error::InvalidFractionalOrder { alpha, dimension: d });
        }
        let lv = grid.leaf_volume();
        let blocks = family
            .cubes()
            .iter()
            .map(|q| {
                let vol = q.volume();
                (grid.leaf_range(q), vol.powf(alpha / d as f64) * lv / vol)
            })
            .collect();
        Ok(Self { blocks, leaves: grid.leaf_count() })
    }

    /// `out = Σ_Q s_Q (Σ_{i ∈ Q} density_i f_i) 1_Q`.
    fn apply(&self, density: &[f64], f: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (range, scale) in &self.blocks {
            let s: f64 = density[range.clone()].iter().zip(&f[range.clone()]).map(|(a, b)| a * b).sum();
            let c = s * scale;
            if c != 0.0 {
                out[range.clone()].iter_mut().for_each(|o| *o += c);
            }
        }
    }
}

fn check_grid(family: &SparseFamily, grid: &GridConfig, what: &str) -> Result<()> {
    if family.grid() != grid {
        return Err(Error::GridMismatch(format!("{what} and the family live on different grids")));
    }
    Ok(())
}

/// `T_{α,S}(σf) = Σ_{Q ∈ S} |Q|^{α/d} ⟨σ|f|⟩_Q 1_Q`.
pub fn apply_sparse(family: &SparseFamily, sigma: &Weight, f: &LeafFunction, alpha: f64) -> Result<LeafFunction> {
    check_grid(family, sigma.grid(), "sigma")?;
    check_grid(family, f.grid(), "f")?;
    let kernel = Kernel::new(family, alpha)?;
    let abs: Vec<f64> = f.values().iter().map(|x| x.abs()).collect();
    let mut out = vec![0.0; kernel.leaves];
    kernel.apply(sigma.densities(), &abs, &mut out);
    LeafFunction::new(*family.grid(), out)
}

fn weighted_norm(density: &[f64], f: &[f64], power: f64, lv: f64) -> f64 {
    let s: f64 = density.iter().zip(f).map(|(w, x)| w * x.abs().powf(power)).sum();
    (s * lv).powf(1.0 / power)
}

fn weighted_dot(density: &[f64], f: &[f64], g: &[f64]) -> f64 {
    density.iter().zip(f).zip(g).map(|((w, a), b)| w * a * b).sum()
}

/// Norm of `f ↦ T_{α,S}(σf)` from `L²(σ)` to `L²(w)`, by power iteration on
/// `f ↦ T(w · T(σf))`, self-adjoint on `L²(σ)`. Stops once the relative
/// residual of the eigen-equation drops below `tol`.
pub fn exact_norm_l2(family: &SparseFamily, sigma: &Weight, w: &Weight, alpha: f64, tol: f64) -> Result<f64> {
    check_grid(family, sigma.grid(), "sigma")?;
    check_grid(family, w.grid(), "w")?;
    let root = family.root();
    if sigma.mass(&root) <= 0.0 {
        return Err(Error::DegenerateWeight(root));
    }
    if w.mass(&root) <= 0.0 {
        return Err(Error::DegenerateWeight(root));
    }
    let kernel = Kernel::new(family, alpha)?;
    let s = sigma.densities();
    let n = kernel.leaves;
    let support: Vec<bool> = s.iter().map(|&x| x > 0.0).collect();
    let mut x: Vec<f64> = support.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let mut mid = vec![0.0; n];
    let mut y = vec![0.0; n];
    let (mut last, mut previous) = (0.0, 0.0);
    for _ in 0..MAX_POWER_ITERATIONS {
        let norm = weighted_dot(s, &x, &x).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        x.iter_mut().for_each(|v| *v /= norm);
        kernel.apply(s, &x, &mut mid);
        kernel.apply(w.densities(), &mid, &mut y);
        for (v, &p) in y.iter_mut().zip(&support) {
            if !p {
                *v = 0.0;
            }
        }
        let mu = weighted_dot(s, &x, &y);
        previous = last;
        last = mu.max(0.0).sqrt();
        let residual: f64 = s.iter().zip(&y).zip(&x).map(|((w, a), b)| w * (a - mu * b).powi(2)).sum::<f64>().sqrt();
        if mu == 0.0 || residual <= tol * mu {
            return Ok(last);
        }
        std::mem::swap(&mut x, &mut y);
    }
    Err(Error::NonConvergence { iterations: MAX_POWER_ITERATIONS, last, previous })
}

/// `‖T(σf)‖_{L^q(w)} / ‖f‖_{L^p(σ)}`; zero when the denominator vanishes.
pub fn norm_ratio(family: &SparseFamily, sigma: &Weight, w: &Weight, cfg: &ExponentConfig, f: &LeafFunction) -> Result<f64> {
    check_grid(family, w.grid(), "w")?;
    let lv = family.grid().leaf_volume();
    let tf = apply_sparse(family, sigma, f, cfg.alpha())?;
    let den = weighted_norm(sigma.densities(), f.values(), cfg.p(), lv);
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(weighted_norm(w.densities(), tf.values(), cfg.q(), lv) / den)
}

/// `σ(R)^{-1/p} ‖T(σ1_R)‖_{L^q(w)}`.
pub fn indicator_ratio(family: &SparseFamily, sigma: &Weight, w: &Weight, cfg: &ExponentConfig, r: &DyadicCube) -> Result<f64> {
    norm_ratio(family, sigma, w, cfg, &LeafFunction::indicator(*family.grid(), r))
}

/// [`norm_lower_bound_seeded`] with seed 0.
pub fn norm_lower_bound(family: &SparseFamily, sigma: &Weight, w: &Weight, cfg: &ExponentConfig, budget: usize) -> Result<f64> {
    norm_lower_bound_seeded(family, sigma, w, cfg, budget, 0)
}

/// Lower bound for the `L^p(σ) → L^q(w)` norm: the best ratio over the
/// family indicators, the constant function and `budget` steps of the
/// ascent `f ← (T(w · T(σf)^{q-1}))^{1/(p-1)}` from the constant start and
/// from [`RANDOM_STARTS`] seeded random starts.
pub fn norm_lower_bound_seeded(
    family: &SparseFamily,
    sigma: &Weight,
    w: &Weight,
    cfg: &ExponentConfig,
    budget: usize,
    seed: u64,
) -> Result<f64> {
    check_grid(family, sigma.grid(), "sigma")?;
    check_grid(family, w.grid(), "w")?;
    let grid = *family.grid();
    if sigma.mass(&grid.root()) <= 0.0 {
        return Ok(0.0);
    }
    let kernel = Kernel::new(family, cfg.alpha())?;
    let (p, q, lv) = (cfg.p(), cfg.q(), grid.leaf_volume());
    let (s, wd) = (sigma.densities(), w.densities());
    let n = grid.leaf_count();
    let mut tf = vec![0.0; n];
    let ratio = |f: &[f64], tf: &mut Vec<f64>| {
        kernel.apply(s, f, tf);
        let den = weighted_norm(s, f, p, lv);
        if den > 0.0 {
            weighted_norm(wd, tf, q, lv) / den
        } else {
            0.0
        }
    };

    let mut best: f64 = 0.0;
    for r in family.cubes() {
        let mut f = vec![0.0; n];
        f[grid.leaf_range(r)].fill(1.0);
        best = best.max(ratio(&f, &mut tf));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![vec![1.0; n]];
    for _ in 0..RANDOM_STARTS {
        starts.push((0..n).map(|_| rng.random_range(0.0..1.0)).collect());
    }
    let mut back = vec![0.0; n];
    for mut f in starts {
        best = best.max(ratio(&f, &mut tf));
        for _ in 0..budget {
            let g: Vec<f64> = tf.iter().map(|v| v.powf(q - 1.0)).collect();
            kernel.apply(wd, &g, &mut back);
            f.iter_mut().zip(&back).for_each(|(x, b)| *x = b.powf(1.0 / (p - 1.0)));
            let norm = weighted_norm(s, &f, p, lv);
            if !(norm > 0.0 && norm.is_finite()) {
                break;
            }
            f.iter_mut().for_each(|x| *x /= norm);
            best = best.max(ratio(&f, &mut tf));
        }
    }
    Ok(best)
}

/// Per-cube values of the testing constants; `None` where `σ(R) = 0`
/// (resp. `w(R) = 0`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TestingTerm {
    pub cube: DyadicCube,
    #[serde(rename = "T")]
    pub t: Option<f64>,
    #[serde(rename = "T_star")]
    pub t_star: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TestingReport {
    pub p: f64,
    pub q: f64,
    pub alpha: f64,
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "T_star")]
    pub t_star: f64,
    pub argmax_r: Option<DyadicCube>,
    pub argmax_r_star: Option<DyadicCube>,
    pub mode: TheoremMode,
    /// Set when `p = q`, where the testing characterization is not licensed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub per_r: Vec<TestingTerm>,
}

/// `σ(R)^{-1/p} [Σ_{Q ∈ S, Q ⊆ R} (|Q|^{α/d} ⟨σ⟩_Q)^q w(E_Q)]^{1/q}`.
pub fn testing_term(family: &SparseFamily, sigma: &Weight, w: &Weight, cfg: &ExponentConfig, r: &DyadicCube) -> Option<f64> {
    let sr = sigma.mass(r);
    if sr <= 0.0 {
        return None;
    }
    let ad = cfg.alpha_over_d();
    let sum: f64 = family
        .members_within(r)
        .map(|q| {
            let e = family.exceptional(&q).map_or(0.0, |e| e.mass(w));
            (q.volume().powf(ad) * sigma.average(&q)).powf(cfg.q()) * e
        })
        .sum();
    Some(sr.powf(-1.0 / cfg.p()) * sum.powf(1.0 / cfg.q()))
}

/// `w(R)^{-1/q'} [Σ_{Q ∈ S, Q ⊆ R} (|Q|^{α/d-1} w(Q))^{p'} σ(E_Q)]^{1/p'}`.
pub fn dual_testing_term(family: &SparseFamily, sigma: &Weight, w: &Weight, cfg: &ExponentConfig, r: &DyadicCube) -> Option<f64> {
    let wr = w.mass(r);
    if wr <= 0.0 {
        return None;
    }
    let (ad, pd) = (cfg.alpha_over_d(), cfg.p_dual());
    let sum: f64 = family
        .members_within(r)
        .map(|q| {
            let e = family.exceptional(&q).map_or(0.0, |e| e.mass(sigma));
            (q.volume().powf(ad - 1.0) * w.mass(&q)).powf(pd) * e
        })
        .sum();
    Some(wr.powf(-1.0 / cfg.q_dual()) * sum.powf(1.0 / pd))
}

pub fn testing_constants(family: &SparseFamily, sigma: &Weight, w: &Weight, cfg: &ExponentConfig) -> Result<TestingReport> {
    check_grid(family, sigma.grid(), "sigma")?;
    check_grid(family, w.grid(), "w")?;
    if cfg.dimension() != family.grid().dimension() {
        return Err(Error::GridMismatch("exponent dimension differs from the grid".into()));
    }
    let per_r: Vec<TestingTerm> = family
        .cubes()
        .par_iter()
        .map(|r| TestingTerm {
            cube: *r,
            t: testing_term(family, sigma, w, cfg, r),
            t_star: dual_testing_term(family, sigma, w, cfg, r),
        })
        .collect();
    let best = |pick: fn(&TestingTerm) -> Option<f64>| {
        let mut out: Option<(f64, DyadicCube)> = None;
        for term in &per_r {
            if let Some(v) = pick(term) {
                if out.is_none_or(|(b, _)| v > b) {
                    out = Some((v, term.cube));
                }
            }
        }
        out
    };
    let t = best(|t| t.t);
    let t_star = best(|t| t.t_star);
    let warning = (cfg.p() == cfg.q())
        .then(|| "p = q: the testing constants do not characterize the norm in this regime".to_string());
    Ok(TestingReport {
        p: cfg.p(),
        q: cfg.q(),
        alpha: cfg.alpha(),
        t: t.map_or(0.0, |x| x.0),
        t_star: t_star.map_or(0.0, |x| x.0),
        argmax_r: t.map(|x| x.1),
        argmax_r_star: t_star.map(|x| x.1),
        mode: cfg.mode(),
        warning,
        per_r,
    })
}

impl TestingReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::random_sparse;
    use crate::weights::WeightKind;
    use proptest::prelude::*;
    use rand::Rng;

    fn g1(n: u32) -> GridConfig {
        GridConfig::new(1, n).unwrap()
    }

    fn chain(n: u32) -> SparseFamily {
        let cubes: Vec<_> = (0..=n).map(|k| DyadicCube::new(1, k, &[0]).unwrap()).collect();
        SparseFamily::new(g1(n), g1(n).root(), 0.5, &cubes).unwrap()
    }

    fn singleton(g: GridConfig) -> SparseFamily {
        SparseFamily::new(g, g.root(), 0.5, &[g.root()]).unwrap()
    }

    fn cfg(p: f64, q: f64, alpha: f64) -> ExponentConfig {
        let mode = if p == q { TheoremMode::Extended } else { TheoremMode::Strict };
        ExponentConfig::new(p, q, alpha, 1, mode).unwrap()
    }

    fn cascade(n: u32, seed: u64) -> Weight {
        Weight::generate(g1(n), WeightKind::RandomCascade { seed, volatility: 0.7 }).unwrap()
    }

    #[test]
    fn apply_examples() {
        let g = g1(4);
        let one = Weight::constant(g, 1.0).unwrap();
        let f = LeafFunction::constant(g, 1.0);
        let out = apply_sparse(&singleton(g), &one, &f, 0.0).unwrap();
        assert!(out.values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let out = apply_sparse(&singleton(g), &one, &f, 0.5).unwrap();
        assert!(out.values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        // value k+1 on E_{[0,2^{-k})}, 5 on the bottom leaf
        let out = apply_sparse(&chain(4), &one, &f, 0.0).unwrap();
        // leaf 0 lies in all five cubes, leaf 1 in four, ...
        let mut counts = vec![0.0; 16];
        for k in 0..=4u32 {
            for c in counts.iter_mut().take(16 >> k) {
                *c += 1.0;
            }
        }
        assert_eq!(out.values(), counts.as_slice());
        assert!(apply_sparse(&chain(4), &Weight::constant(g1(3), 1.0).unwrap(), &f, 0.0).is_err());
        assert!(apply_sparse(&chain(4), &one, &f, 1.0).is_err());
    }

    #[test]
    fn exact_norm_examples() {
        let g = g1(4);
        let one = Weight::constant(g, 1.0).unwrap();
        let n = exact_norm_l2(&singleton(g), &one, &one, 0.0, 1e-12).unwrap();
        assert!((n - 1.0).abs() < 1e-12);
        let c = exact_norm_l2(&chain(4), &one, &one, 0.0, 1e-12).unwrap();
        assert!(c > 1.0 && c.is_finite());
    }

    #[test]
    fn exact_norm_homogeneity() {
        let s = cascade(6, 3);
        let w = cascade(6, 4);
        let fam = random_sparse(g1(6), 0.5, 9, 20).unwrap();
        let base = exact_norm_l2(&fam, &s, &w, 0.2, 1e-12).unwrap();
        let scaled = exact_norm_l2(&fam, &s.scaled(4.0).unwrap(), &w, 0.2, 1e-12).unwrap();
        assert!((scaled / base - 2.0).abs() < 1e-8);
    }

    #[test]
    fn exact_norm_ignores_sigma_null_leaves() {
        let g = g1(3);
        let s = Weight::from_densities(g, vec![2.0, 1.0, 0.0, 0.0, 3.0, 1.0, 0.0, 1.0]).unwrap();
        let w = cascade(3, 1);
        let fam = random_sparse(g, 0.5, 2, 6).unwrap();
        let n = exact_norm_l2(&fam, &s, &w, 0.0, 1e-12).unwrap();
        let lb = norm_lower_bound(&fam, &s, &w, &cfg(2.0, 2.0, 0.0), 300).unwrap();
        assert!(lb <= n * (1.0 + 1e-8));
        assert!(lb >= 0.99 * n);
    }

    #[test]
    fn lower_bound_examples() {
        let g = g1(4);
        let one = Weight::constant(g, 1.0).unwrap();
        let lb = norm_lower_bound(&singleton(g), &one, &one, &cfg(2.0, 4.0, 0.0), 10).unwrap();
        assert!((lb - 1.0).abs() < 1e-12);
        let exact = exact_norm_l2(&chain(4), &one, &one, 0.0, 1e-12).unwrap();
        let lb = norm_lower_bound(&chain(4), &one, &one, &cfg(2.0, 2.0, 0.0), 200).unwrap();
        assert!(lb <= exact + 1e-8);
        assert!(lb >= 0.99 * exact);
        let zero = Weight::from_densities(g, vec![0.0; 16]);
        assert!(zero.is_err());
    }

    #[test]
    fn testing_examples() {
        let g = g1(4);
        let one = Weight::constant(g, 1.0).unwrap();
        let r = testing_constants(&singleton(g), &one, &one, &cfg(2.0, 4.0, 0.0)).unwrap();
        assert!((r.t - 1.0).abs() < 1e-15);
        assert_eq!(r.argmax_r, Some(g.root()));
        assert!(r.warning.is_none());
        let r = testing_constants(&chain(4), &one, &one, &cfg(2.0, 2.0, 0.0)).unwrap();
        for term in &r.per_r {
            assert!((term.t.unwrap() - 1.0).abs() < 1e-14, "{term:?}");
        }
        assert!(r.warning.is_some());
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for key in ["p", "q", "alpha", "T", "T_star", "argmax_r", "argmax_r_star", "mode"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["mode"], "extended");
    }

    #[test]
    fn testing_skips_null_cubes() {
        let g = g1(2);
        let s = Weight::from_densities(g, vec![4.0, 0.0, 0.0, 0.0]).unwrap();
        let w = Weight::constant(g, 1.0).unwrap();
        let fam = SparseFamily::new(g, g.root(), 0.5, &["0:0".parse().unwrap(), "1:1".parse().unwrap()]).unwrap();
        let r = testing_constants(&fam, &s, &w, &cfg(2.0, 3.0, 0.0)).unwrap();
        assert_eq!(r.per_r[1].t, None);
        assert!(r.per_r[1].t_star.is_some());
        assert_eq!(r.argmax_r, Some(g.root()));
    }

    proptest! {
        #[test]
        fn apply_is_monotone_and_self_transpose(seed in any::<u64>(), alpha in 0.0f64..0.9) {
            let g = g1(6);
            let s = cascade(6, seed);
            let fam = random_sparse(g, 0.5, seed ^ 1, 25).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..2.0)).collect();
            let h: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..2.0)).collect();
            let bigger: Vec<f64> = f.iter().map(|x| x + rng.random_range(0.0..1.0)).collect();
            let tf = apply_sparse(&fam, &s, &LeafFunction::new(g, f.clone()).unwrap(), alpha).unwrap();
            let tb = apply_sparse(&fam, &s, &LeafFunction::new(g, bigger).unwrap(), alpha).unwrap();
            prop_assert!(tf.values().iter().zip(tb.values()).all(|(a, b)| a <= b));
            let th = apply_sparse(&fam, &s, &LeafFunction::new(g, h.clone()).unwrap(), alpha).unwrap();
            // ∫ T(σf) σh = ∫ σf T(σh)
            let lhs = weighted_dot(s.densities(), tf.values(), &h);
            let rhs = weighted_dot(s.densities(), &f, th.values());
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }

        #[test]
        fn lower_bound_dominates_indicators_and_testing(seed in any::<u64>()) {
            let g = g1(6);
            let (s, w) = (cascade(6, seed), cascade(6, seed.rotate_left(7)));
            let fam = random_sparse(g, 0.5, seed, 15).unwrap();
            let c = cfg(2.0, 3.0, 0.3);
            let lb = norm_lower_bound_seeded(&fam, &s, &w, &c, 5, seed).unwrap();
            for r in fam.cubes() {
                let ir = indicator_ratio(&fam, &s, &w, &c, r).unwrap();
                prop_assert!(lb >= ir);
                let t = testing_term(&fam, &s, &w, &c, r).unwrap();
                prop_assert!(ir >= t * (1.0 - 1e-12));
            }
        }

        #[test]
        fn lower_bound_monotone_in_budget(seed in any::<u64>(), budget in 0usize..10) {
            let g = g1(5);
            let (s, w) = (cascade(5, seed), cascade(5, seed ^ 99));
            let fam = random_sparse(g, 0.5, seed, 10).unwrap();
            let c = cfg(1.5, 4.0, 0.0);
            let a = norm_lower_bound_seeded(&fam, &s, &w, &c, budget, seed).unwrap();
            let b = norm_lower_bound_seeded(&fam, &s, &w, &c, budget + 1, seed).unwrap();
            prop_assert!(b >= a);
        }
    }
}
