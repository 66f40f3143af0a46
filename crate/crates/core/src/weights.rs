//! Weights as piecewise-constant densities on the leaves of a grid.
//!
//! Continuum weights are discretized by exact interval masses (closed-form
//! antiderivatives), never by quadrature. The per-cube mass cache is built
//! eagerly by pairwise summation up the tree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grid::{CubeMap, DyadicCube, GridConfig};

/// Generator descriptor for [`Weight::generate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parameters", rename_all = "snake_case")]
pub enum WeightKind {
    /// Density `c > 0` everywhere.
    Constant { value: f64 },
    /// Density `x^beta` in the first coordinate, `beta > -1`.
    Power { beta: f64 },
    /// `1 / (x (1 - ln x)^2)` on `(0, 1)`.
    CounterexampleSigma,
    /// `x^2`.
    CounterexampleW,
    /// Multiplicative cascade with root mass 1. Each cube splits its mass
    /// among its children in proportion to i.i.d. `U[1-v, 1+v]` draws.
    RandomCascade { seed: u64, volatility: f64 },
    /// Arbitrary leaf densities supplied by the caller.
    Custom,
}

#[derive(Clone, Debug)]
pub struct Weight {
    grid: GridConfig,
    kind: WeightKind,
    density: Vec<f64>,
    masses: CubeMap<f64>,
}

impl Weight {
    pub fn generate(grid: GridConfig, kind: WeightKind) -> Result<Self> {
        let n = grid.leaf_count();
        let leaf_masses: Vec<f64> = match kind {
            WeightKind::Constant { value } => {
                if !(value > 0.0 && value.is_finite()) {
                    return Err(bad(format!("constant value {value} must be positive")));
                }
                vec![value * grid.leaf_volume(); n]
            }
            WeightKind::Power { beta } => {
                if !(beta > -1.0 && beta.is_finite()) {
                    return Err(bad(format!("power exponent {beta} must exceed -1")));
                }
                interval_masses(&grid, |a, b| power_mass(beta, a, b))
            }
            WeightKind::CounterexampleW => interval_masses(&grid, |a, b| power_mass(2.0, a, b)),
            WeightKind::CounterexampleSigma => interval_masses(&grid, counterexample_mass),
            WeightKind::RandomCascade { seed, volatility } => {
                if !(volatility > 0.0 && volatility < 1.0) {
                    return Err(bad(format!("cascade volatility {volatility} must lie in (0, 1)")));
                }
                cascade_masses(&grid, seed, volatility)
            }
            WeightKind::Custom => return Err(bad("custom weights are built with Weight::from_densities".into())),
        };
        let lv = grid.leaf_volume();
        let density = leaf_masses.iter().map(|m| m / lv).collect();
        Self::build(grid, kind, density)
    }

    pub fn constant(grid: GridConfig, value: f64) -> Result<Self> {
        Self::generate(grid, WeightKind::Constant { value })
    }

    /// Leaf densities in Morton order.
    pub fn from_densities(grid: GridConfig, density: Vec<f64>) -> Result<Self> {
        Self::build(grid, WeightKind::Custom, density)
    }

    fn build(grid: GridConfig, kind: WeightKind, density: Vec<f64>) -> Result<Self> {
        if density.len() != grid.leaf_count() {
            return Err(bad(format!("expected {} leaf densities, got {}", grid.leaf_count(), density.len())));
        }
        if let Some(x) = density.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(bad(format!("density {x} is not a finite nonnegative number")));
        }
        let lv = grid.leaf_volume();
        let masses = pyramid(&grid, density.iter().map(|d| d * lv).collect());
        let w = Self { grid, kind, density, masses };
        if w.mass(&grid.root()) <= 0.0 {
            return Err(Error::DegenerateWeight(grid.root()));
        }
        Ok(w)
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn kind(&self) -> &WeightKind {
        &self.kind
    }

    pub fn densities(&self) -> &[f64] {
        &self.density
    }

    pub fn masses(&self) -> &CubeMap<f64> {
        &self.masses
    }

    /// `σ(Q)`, from the cache.
    pub fn mass(&self, cube: &DyadicCube) -> f64 {
        *self.masses.get(cube)
    }

    /// `⟨σ⟩_Q = σ(Q) / |Q|`.
    pub fn average(&self, cube: &DyadicCube) -> f64 {
        self.mass(cube) / cube.volume()
    }

    /// The same weight multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(bad(format!("scale factor {c} must be positive")));
        }
        Self::build(self.grid, WeightKind::Custom, self.density.iter().map(|d| d * c).collect())
    }

    /// Discrete `∫ σ log(e + σ)`.
    pub fn llogl_integral(&self) -> f64 {
        let lv = self.grid.leaf_volume();
        self.density.iter().map(|&s| s * (std::f64::consts::E + s).ln()).sum::<f64>() * lv
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// A real function constant on each leaf, stored in Morton order.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafFunction {
    grid: GridConfig,
    values: Vec<f64>,
}

impl LeafFunction {
    pub fn new(grid: GridConfig, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.leaf_count() {
            return Err(Error::GridMismatch(format!(
                "leaf function has {} values, grid has {} leaves",
                values.len(),
                grid.leaf_count()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: GridConfig, value: f64) -> Self {
        Self { grid, values: vec![value; grid.leaf_count()] }
    }

    pub fn zeros(grid: GridConfig) -> Self {
        Self::constant(grid, 0.0)
    }

    /// `1_Q`.
    pub fn indicator(grid: GridConfig, cube: &DyadicCube) -> Self {
        let mut f = Self::zeros(grid);
        f.values[grid.leaf_range(cube)].fill(1.0);
        f
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// `∫ f` with respect to Lebesgue measure.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.leaf_volume()
    }
}

/// Sum leaf values up the tree: `levels[k][m]` is the total over cube `(k, m)`.
pub(crate) fn pyramid(grid: &GridConfig, leaves: Vec<f64>) -> CubeMap<f64> {
    let n = grid.leaf_level() as usize;
    let fan = 1usize << grid.dimension();
    let mut levels = vec![Vec::new(); n + 1];
    levels[n] = leaves;
    for k in (0..n).rev() {
        let below = &levels[k + 1];
        let up: Vec<f64> = below.chunks_exact(fan).map(|c| c.iter().sum()).collect();
        levels[k] = up;
    }
    CubeMap::from_levels(levels)
}

fn bad(msg: String) -> Error {
    Error::BadGeneratorParameter(msg)
}

/// Leaf masses of a weight depending on the first coordinate only.
fn interval_masses(grid: &GridConfig, mass_1d: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let n = grid.leaf_level();
    let side = crate::grid::exp2i(-(n as i32));
    // extent of a leaf in the remaining coordinate
    let cross = if grid.dimension() == 2 { side } else { 1.0 };
    let per_column: Vec<f64> = (0..1u64 << n)
        .map(|j| {
            let a = j as f64 * side;
            mass_1d(a, a + side) * cross
        })
        .collect();
    (0..grid.leaf_count()).map(|i| per_column[grid.leaf(i).index()[0] as usize]).collect()
}

/// `∫_a^b x^β dx`, written to avoid cancellation when `b - a ≪ a`.
pub fn power_mass(beta: f64, a: f64, b: f64) -> f64 {
    let e = beta + 1.0;
    if a == 0.0 {
        b.powf(e) / e
    } else {
        a.powf(e) * (e * ((b - a) / a).ln_1p()).exp_m1() / e
    }
}

/// `∫_a^b dx / (x (1 - ln x)^2) = 1/(1 - ln b) - 1/(1 - ln a)` for `0 ≤ a < b ≤ 1`.
pub fn counterexample_mass(a: f64, b: f64) -> f64 {
    let fb = 1.0 - b.ln();
    if a == 0.0 {
        return 1.0 / fb;
    }
    let fa = 1.0 - a.ln();
    ((b - a) / a).ln_1p() / (fa * fb)
}

fn cascade_masses(grid: &GridConfig, seed: u64, volatility: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fan = 1usize << grid.dimension();
    let mut level = vec![1.0f64];
    let mut draws = vec![0.0f64; fan];
    for _ in 0..grid.leaf_level() {
        let mut next = Vec::with_capacity(level.len() * fan);
        for &m in &level {
            for d in draws.iter_mut() {
                *d = rng.random_range(1.0 - volatility..=1.0 + volatility);
            }
            let total: f64 = draws.iter().sum();
            next.extend(draws.iter().map(|d| m * d / total));
        }
        level = next;
    }
    level
}

#[derive(Serialize, Deserialize)]
struct WeightRecord {
    dimension: u32,
    leaf_level: u32,
    #[serde(flatten)]
    kind: WeightKind,
    leaf_density: Densities,
}

struct Densities(Vec<f64>);

impl Serialize for Densities {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = serializer.serialize_seq(Some(self.0.len()))?;
        for &x in &self.0 {
            let raw = serde_json::value::RawValue::from_string(crate::lab::fmt_sig17(x)).map_err(serde::ser::Error::custom)?;
            seq.serialize_element(&raw)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Densities {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        Ok(Densities(Vec::deserialize(deserializer)?))
    }
}

impl Serialize for Weight {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        WeightRecord {
            dimension: self.grid.dimension(),
            leaf_level: self.grid.leaf_level(),
            kind: self.kind.clone(),
            leaf_density: Densities(self.density.clone()),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Weight {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rec = WeightRecord::deserialize(deserializer)?;
        let grid = GridConfig::new(rec.dimension, rec.leaf_level).map_err(D::Error::custom)?;
        Weight::build(grid, rec.kind, rec.leaf_density.0).map_err(D::Error::custom)
    }
}
