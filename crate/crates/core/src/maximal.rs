//! Dyadic maximal function, the local A∞ characteristic `ρ(Q;σ)` and the
//! fractional maximal operator `M_α`, all over the cubes of one grid.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{exp2i, CubeMap, DyadicCube, GridConfig};
use crate::weights::{pyramid, LeafFunction, Weight};

/// `M(σ 1_Q)` evaluated on every leaf; zero outside `Q`.
///
/// Cubes strictly containing `Q` never beat `⟨σ⟩_Q`, so on a leaf `L ⊆ Q` the
/// supremum runs over the chain `L ⊆ Q' ⊆ Q`.
pub fn dyadic_maximal(sigma: &Weight, cube: &DyadicCube) -> Result<LeafFunction> {
    let grid = *sigma.grid();
    grid.check(cube)?;
    let mut out = LeafFunction::zeros(grid);
    let range = grid.leaf_range(cube);
    let mut scratch = Vec::new();
    chain_maxima(sigma, cube, &mut scratch);
    out.values_mut()[range].copy_from_slice(&scratch);
    Ok(out)
}

/// `ρ(Q;σ) = σ(Q)^{-1} ∫_Q M(σ 1_Q)`.
pub fn rho(sigma: &Weight, cube: &DyadicCube) -> Result<f64> {
    sigma.grid().check(cube)?;
    let mut scratch = Vec::new();
    rho_with(sigma, cube, &mut scratch).ok_or(Error::DegenerateWeight(*cube))
}

/// `ρ(Q;σ)` for every cube of the grid; `None` where `σ(Q) = 0`.
pub fn rho_all(sigma: &Weight) -> CubeMap<Option<f64>> {
    let grid = *sigma.grid();
    let levels = (0..=grid.leaf_level())
        .map(|k| {
            (0..grid.cubes_at_level(k))
                .into_par_iter()
                .map_init(Vec::new, |scratch, m| {
                    let q = DyadicCube::from_morton(grid.dimension(), k, m);
                    rho_with(sigma, &q, scratch)
                })
                .collect()
        })
        .collect();
    CubeMap::from_levels(levels)
}

fn rho_with(sigma: &Weight, cube: &DyadicCube, scratch: &mut Vec<f64>) -> Option<f64> {
    let mass = sigma.mass(cube);
    if mass <= 0.0 {
        return None;
    }
    chain_maxima(sigma, cube, scratch);
    let integral = scratch.iter().sum::<f64>() * sigma.grid().leaf_volume();
    // M(σ1_Q) ≥ ⟨σ⟩_Q on Q, so the ratio is ≥ 1 up to rounding
    Some((integral / mass).max(1.0))
}

/// Leaves of `cube` (Morton order) receive the running maximum of averages
/// along their ancestor chain, starting at `cube`.
fn chain_maxima(sigma: &Weight, cube: &DyadicCube, buf: &mut Vec<f64>) {
    let grid = sigma.grid();
    let fan = 1usize << grid.dimension();
    let masses = sigma.masses();
    buf.clear();
    buf.push(sigma.average(cube));
    let mut next = Vec::new();
    let mut width = 1usize;
    for level in cube.level() + 1..=grid.leaf_level() {
        let inv_vol = exp2i((grid.dimension() * level) as i32);
        let first = cube.morton() << (grid.dimension() * (level - cube.level()));
        width *= fan;
        let row = &masses.level(level)[first..first + width];
        next.clear();
        next.extend(row.iter().enumerate().map(|(i, m)| f64::max(buf[i / fan], m * inv_vol)));
        std::mem::swap(buf, &mut next);
    }
}

/// `M_α g(x) = sup_{Q ∋ x} |Q|^{α/d} ⟨|g|⟩_Q` over the cubes of the grid.
pub fn fractional_maximal(g: &LeafFunction, alpha: f64, grid: &GridConfig) -> Result<LeafFunction> {
    let d = grid.dimension();
    if !(alpha >= 0.0 && alpha < d as f64) {
        return Err(Error::InvalidFractionalOrder { alpha, dimension: d });
    }
    if g.grid() != grid {
        return Err(Error::GridMismatch("leaf function lives on a different grid".into()));
    }
    let lv = grid.leaf_volume();
    let sums = pyramid(grid, g.values().iter().map(|x| x.abs() * lv).collect());
    let fan = 1usize << d;
    let mut running = vec![sums.level(0)[0]];
    for level in 1..=grid.leaf_level() {
        let vol = exp2i(-((d * level) as i32));
        let scale = vol.powf(alpha / d as f64) / vol;
        running = sums
            .level(level)
            .iter()
            .enumerate()
            .map(|(i, s)| f64::max(running[i / fan], s * scale))
            .collect();
    }
    LeafFunction::new(*grid, running)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::WeightKind;
    use proptest::prelude::*;

    fn g1(n: u32) -> GridConfig {
        GridConfig::new(1, n).unwrap()
    }

    fn root(dim: u32) -> DyadicCube {
        DyadicCube::unit(dim)
    }

    /// Direct definition: every grid cube containing the leaf, average of σ1_Q.
    fn brute_maximal(sigma: &Weight, q: &DyadicCube) -> Vec<f64> {
        let grid = sigma.grid();
        (0..grid.leaf_count())
            .map(|i| {
                let leaf = grid.leaf(i);
                if !q.contains(&leaf) {
                    return 0.0;
                }
                grid.cubes()
                    .filter(|c| c.contains(&leaf))
                    .map(|c| {
                        let inside: f64 = (0..grid.leaf_count())
                            .filter(|&j| c.contains(&grid.leaf(j)) && q.contains(&grid.leaf(j)))
                            .map(|j| sigma.densities()[j] * grid.leaf_volume())
                            .sum();
                        inside / c.volume()
                    })
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    #[test]
    fn constant_weight_maximal_is_constant() {
        let s = Weight::constant(g1(4), 1.0).unwrap();
        let m = dyadic_maximal(&s, &root(1)).unwrap();
        assert!(m.values().iter().all(|&v| v == 1.0));
        for q in g1(4).cubes() {
            assert_eq!(rho(&s, &q).unwrap(), 1.0);
        }
    }

    #[test]
    fn half_fixture() {
        let s = Weight::from_densities(g1(2), vec![2.0, 2.0, 0.0, 0.0]).unwrap();
        let m = dyadic_maximal(&s, &root(1)).unwrap();
        assert_eq!(m.values(), &[2.0, 2.0, 1.0, 1.0]);
        assert_eq!(rho(&s, &root(1)).unwrap(), 1.5);
    }

    #[test]
    fn spike_fixture() {
        let s = Weight::from_densities(g1(2), vec![4.0, 0.0, 0.0, 0.0]).unwrap();
        let m = dyadic_maximal(&s, &root(1)).unwrap();
        assert_eq!(m.values(), &[4.0, 2.0, 1.0, 1.0]);
        assert_eq!(rho(&s, &root(1)).unwrap(), 2.0);
        let err = rho(&s, &"1:1".parse().unwrap()).unwrap_err();
        assert!(err.to_string().contains("degenerate weight on cube"));
    }

    #[test]
    fn maximal_matches_brute_force() {
        for dim in [1, 2] {
            let g = GridConfig::new(dim, if dim == 1 { 5 } else { 3 }).unwrap();
            let s = Weight::generate(g, WeightKind::RandomCascade { seed: 11, volatility: 0.8 }).unwrap();
            for q in g.cubes().step_by(3) {
                let fast = dyadic_maximal(&s, &q).unwrap();
                let slow = brute_maximal(&s, &q);
                for (a, b) in fast.values().iter().zip(&slow) {
                    assert!((a - b).abs() <= 1e-12 * b.max(1.0));
                }
            }
        }
    }

    #[test]
    fn rho_all_agrees_with_single_queries() {
        let g = GridConfig::new(2, 3).unwrap();
        let s = Weight::generate(g, WeightKind::RandomCascade { seed: 4, volatility: 0.9 }).unwrap();
        let all = rho_all(&s);
        for q in g.cubes() {
            assert_eq!(all.get(&q).unwrap(), rho(&s, &q).unwrap());
        }
        let spike = Weight::from_densities(g1(2), vec![4.0, 0.0, 0.0, 0.0]).unwrap();
        let all = rho_all(&spike);
        assert_eq!(*all.get(&"1:1".parse().unwrap()), None);
        assert_eq!(*all.get(&"2:0".parse().unwrap()), Some(1.0));
    }

    #[test]
    fn fractional_examples() {
        let g = g1(2);
        let one = LeafFunction::constant(g, 1.0);
        for alpha in [0.0, 0.3, 0.9] {
            assert!(fractional_maximal(&one, alpha, &g).unwrap().values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        }
        let spike = LeafFunction::new(g, vec![4.0, 0.0, 0.0, 0.0]).unwrap();
        let m = fractional_maximal(&spike, 0.5, &g).unwrap();
        assert!((m.values()[0] - 2.0).abs() < 1e-15);
        // leaf 1: chain {1, sqrt(1/2)*2}; leaves 2,3: root only
        assert!((m.values()[1] - 2f64.sqrt()).abs() < 1e-15);
        assert!((m.values()[3] - 1.0).abs() < 1e-15);
        assert!(fractional_maximal(&spike, 1.0, &g).is_err());
        assert!(fractional_maximal(&spike, -0.1, &g).is_err());
        let err = fractional_maximal(&spike, 1.5, &g).unwrap_err();
        assert!(err.to_string().contains("invalid fractional order"));
        let g2 = GridConfig::new(2, 2).unwrap();
        assert!(fractional_maximal(&LeafFunction::constant(g2, 1.0), 1.5, &g2).is_ok());
    }

    #[test]
    fn fractional_order_zero_is_dyadic_maximal() {
        let g = GridConfig::new(2, 3).unwrap();
        let s = Weight::generate(g, WeightKind::RandomCascade { seed: 8, volatility: 0.5 }).unwrap();
        let f = LeafFunction::new(g, s.densities().to_vec()).unwrap();
        let a = fractional_maximal(&f, 0.0, &g).unwrap();
        let b = dyadic_maximal(&s, &g.root()).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= 1e-12 * y);
        }
    }

    proptest! {
        #[test]
        fn maximal_dominates_average_and_rho_is_scale_free(seed in any::<u64>(), v in 0.05f64..0.95, c in 0.01f64..100.0) {
            let g = g1(6);
            let s = Weight::generate(g, WeightKind::RandomCascade { seed, volatility: v }).unwrap();
            let scaled = s.scaled(c).unwrap();
            for q in g.cubes().step_by(5) {
                let m = dyadic_maximal(&s, &q).unwrap();
                let avg = s.average(&q);
                prop_assert!(g.leaf_range(&q).all(|i| m.values()[i] >= avg * (1.0 - 1e-12)));
                let r = rho(&s, &q).unwrap();
                prop_assert!(r >= 1.0);
                prop_assert!((rho(&scaled, &q).unwrap() - r).abs() <= 1e-12 * r);
            }
        }

        #[test]
        fn maximal_is_local(seed in any::<u64>(), bump in 0.1f64..10.0) {
            // changing σ outside Q leaves M(σ1_Q) unchanged
            let g = g1(5);
            let s = Weight::generate(g, WeightKind::RandomCascade { seed, volatility: 0.5 }).unwrap();
            let q: DyadicCube = "2:1".parse().unwrap();
            let mut d = s.densities().to_vec();
            for i in g.leaf_range(&"1:1".parse().unwrap()) {
                d[i] *= bump;
            }
            let t = Weight::from_densities(g, d).unwrap();
            prop_assert_eq!(dyadic_maximal(&s, &q).unwrap(), dyadic_maximal(&t, &q).unwrap());
        }
    }
}
