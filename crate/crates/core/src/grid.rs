//! Dyadic geometry on the unit cube `[0,1)^d`.
//!
//! Cubes are half-open products `∏ [j_i 2^-k, (j_i + 1) 2^-k)`. Inside a
//! level, storage is in Morton (Z-order) so that the leaves of any cube form
//! one contiguous index range. The public ordering of cubes is
//! `(level, j1, j2)` lexicographic.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Largest leaf level allowed in one dimension.
pub const MAX_LEVEL_1D: u32 = 24;
/// Largest leaf level allowed in two dimensions.
pub const MAX_LEVEL_2D: u32 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridConfig {
    dimension: u32,
    leaf_level: u32,
}

impl GridConfig {
    pub fn new(dimension: u32, leaf_level: u32) -> Result<Self> {
        let max = match dimension {
            1 => MAX_LEVEL_1D,
            2 => MAX_LEVEL_2D,
            _ => return Err(Error::InvalidGrid(format!("dimension {dimension} not in {{1, 2}}"))),
        };
        if leaf_level < 1 || leaf_level > max {
            return Err(Error::InvalidGrid(format!(
                "leaf level {leaf_level} outside 1..={max} for d={dimension}"
            )));
        }
        Ok(Self { dimension, leaf_level })
    }

    pub fn dimension(&self) -> u32 {
        self.dimension
    }

    pub fn leaf_level(&self) -> u32 {
        self.leaf_level
    }

    /// Number of cubes at `level`, `2^{d k}`.
    pub fn cubes_at_level(&self, level: u32) -> usize {
        1usize << (self.dimension * level)
    }

    pub fn leaf_count(&self) -> usize {
        self.cubes_at_level(self.leaf_level)
    }

    /// `Σ_{k=0}^{N} 2^{dk}`.
    pub fn cube_count(&self) -> usize {
        (0..=self.leaf_level).map(|k| self.cubes_at_level(k)).sum()
    }

    pub fn leaf_volume(&self) -> f64 {
        exp2i(-((self.dimension * self.leaf_level) as i32))
    }

    pub fn root(&self) -> DyadicCube {
        DyadicCube::unit(self.dimension)
    }

    pub fn is_leaf(&self, cube: &DyadicCube) -> bool {
        cube.level() == self.leaf_level
    }

    /// True if `cube` is a cube of this grid.
    pub fn holds(&self, cube: &DyadicCube) -> bool {
        cube.dimension() == self.dimension && cube.level() <= self.leaf_level
    }

    pub fn check(&self, cube: &DyadicCube) -> Result<()> {
        if self.holds(cube) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("cube {cube} is not on grid d={} N={}", self.dimension, self.leaf_level)))
        }
    }

    /// The `2^d` dyadic children of `cube`.
    pub fn children(&self, cube: &DyadicCube) -> Result<Vec<DyadicCube>> {
        self.check(cube)?;
        if self.is_leaf(cube) {
            return Err(Error::NoChildren(*cube));
        }
        Ok(cube.children().collect())
    }

    /// Leaf index range (Morton order) covered by `cube`.
    pub fn leaf_range(&self, cube: &DyadicCube) -> Range<usize> {
        let shift = self.dimension * (self.leaf_level - cube.level());
        let start = cube.morton() << shift;
        start..start + (1usize << shift)
    }

    /// The leaf cube at Morton position `index`.
    pub fn leaf(&self, index: usize) -> DyadicCube {
        DyadicCube::from_morton(self.dimension, self.leaf_level, index)
    }

    /// Every cube of levels `0..=N`, ordered by `(level, index)`.
    pub fn cubes(&self) -> impl Iterator<Item = DyadicCube> + '_ {
        (0..=self.leaf_level).flat_map(move |k| self.cubes_at(k))
    }

    /// Cubes of one level in `(j1, j2)` lexicographic order.
    pub fn cubes_at(&self, level: u32) -> impl Iterator<Item = DyadicCube> {
        let dim = self.dimension;
        let side = 1u32 << level;
        let rows = if dim == 2 { side } else { 1 };
        (0..side).flat_map(move |i| {
            (0..rows).map(move |j| {
                if dim == 2 {
                    DyadicCube::new_unchecked(2, level, [i, j])
                } else {
                    DyadicCube::new_unchecked(1, level, [i, 0])
                }
            })
        })
    }
}

/// A dyadic subcube of `[0,1)^d`.
///
/// Derived ordering compares level first, then the index tuple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DyadicCube {
    dim: u8,
    level: u8,
    index: [u32; 2],
}

impl DyadicCube {
    pub fn unit(dimension: u32) -> Self {
        Self::new_unchecked(dimension, 0, [0, 0])
    }

    pub fn new(dimension: u32, level: u32, index: &[u32]) -> Result<Self> {
        if !(1..=2).contains(&dimension) || index.len() != dimension as usize {
            return Err(Error::Parse(format!("cube index {index:?} does not match dimension {dimension}")));
        }
        if level > MAX_LEVEL_1D {
            return Err(Error::Parse(format!("cube level {level} too deep")));
        }
        let side = 1u64 << level;
        if index.iter().any(|&j| j as u64 >= side) {
            return Err(Error::Parse(format!("cube index {index:?} out of range at level {level}")));
        }
        let mut ix = [0u32; 2];
        ix[..index.len()].copy_from_slice(index);
        Ok(Self::new_unchecked(dimension, level, ix))
    }

    pub(crate) fn new_unchecked(dimension: u32, level: u32, index: [u32; 2]) -> Self {
        Self { dim: dimension as u8, level: level as u8, index }
    }

    pub fn dimension(&self) -> u32 {
        self.dim as u32
    }

    pub fn level(&self) -> u32 {
        self.level as u32
    }

    pub fn index(&self) -> &[u32] {
        &self.index[..self.dim as usize]
    }

    /// `|Q| = 2^{-dk}`, exact in binary floating point.
    pub fn volume(&self) -> f64 {
        exp2i(-((self.dim as u32 * self.level as u32) as i32))
    }

    /// Side length `2^{-k}`.
    pub fn side(&self) -> f64 {
        exp2i(-(self.level as i32))
    }

    /// Lower-left corner.
    pub fn corner(&self) -> [f64; 2] {
        let s = self.side();
        [self.index[0] as f64 * s, self.index[1] as f64 * s]
    }

    pub fn parent(&self) -> Option<Self> {
        if self.level == 0 {
            return None;
        }
        let ix = [self.index[0] >> 1, self.index[1] >> 1];
        Some(Self { level: self.level - 1, index: ix, ..*self })
    }

    /// Ancestor at `level` (self when levels agree).
    pub fn ancestor_at(&self, level: u32) -> Option<Self> {
        if level > self.level() {
            return None;
        }
        let shift = self.level() - level;
        Some(Self { level: level as u8, index: [self.index[0] >> shift, self.index[1] >> shift], ..*self })
    }

    /// Strict ancestors, nearest first.
    pub fn ancestors(&self) -> impl Iterator<Item = Self> {
        std::iter::successors(self.parent(), |c| c.parent())
    }

    /// The `2^d` children in Morton order. No leaf check: see
    /// [`GridConfig::children`].
    pub fn children(&self) -> impl Iterator<Item = Self> + '_ {
        let count = 1u32 << self.dim;
        (0..count).map(move |c| {
            let ix = if self.dim == 2 {
                [(self.index[0] << 1) | (c & 1), (self.index[1] << 1) | (c >> 1)]
            } else {
                [(self.index[0] << 1) | c, 0]
            };
            Self { level: self.level + 1, index: ix, ..*self }
        })
    }

    /// `inner ⊆ self`. Reflexive.
    pub fn contains(&self, inner: &Self) -> bool {
        if self.dim != inner.dim || inner.level < self.level {
            return false;
        }
        let shift = inner.level - self.level;
        (0..self.dim as usize).all(|i| inner.index[i] >> shift == self.index[i])
    }

    /// Position of the cube inside its level in Morton order.
    pub fn morton(&self) -> usize {
        if self.dim == 1 {
            self.index[0] as usize
        } else {
            interleave(self.index[0]) | (interleave(self.index[1]) << 1)
        }
    }

    pub fn from_morton(dimension: u32, level: u32, m: usize) -> Self {
        if dimension == 1 {
            Self::new_unchecked(1, level, [m as u32, 0])
        } else {
            Self::new_unchecked(2, level, [deinterleave(m), deinterleave(m >> 1)])
        }
    }
}

impl fmt::Display for DyadicCube {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.dim == 1 {
            write!(f, "{}:{}", self.level, self.index[0])
        } else {
            write!(f, "{}:({},{})", self.level, self.index[0], self.index[1])
        }
    }
}

impl FromStr for DyadicCube {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad cube literal {s:?}, expected \"k:j\" or \"k:(j1,j2)\""));
        let (level, rest) = s.trim().split_once(':').ok_or_else(bad)?;
        let level: u32 = level.trim().parse().map_err(|_| bad())?;
        let rest = rest.trim();
        if let Some(inner) = rest.strip_prefix('(').and_then(|r| r.strip_suffix(')')) {
            let parts: Vec<u32> = inner
                .split(',')
                .map(|p| p.trim().parse::<u32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            if parts.len() != 2 {
                return Err(bad());
            }
            DyadicCube::new(2, level, &parts)
        } else {
            let j: u32 = rest.parse().map_err(|_| bad())?;
            DyadicCube::new(1, level, &[j])
        }
    }
}

impl Serialize for DyadicCube {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DyadicCube {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-cube storage for a whole grid, indexed `[level][morton]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeMap<T> {
    levels: Vec<Vec<T>>,
}

impl<T: Clone> CubeMap<T> {
    pub fn filled(grid: &GridConfig, value: T) -> Self {
        let levels = (0..=grid.leaf_level()).map(|k| vec![value.clone(); grid.cubes_at_level(k)]).collect();
        Self { levels }
    }
}

impl<T> CubeMap<T> {
    pub(crate) fn from_levels(levels: Vec<Vec<T>>) -> Self {
        Self { levels }
    }

    pub fn get(&self, cube: &DyadicCube) -> &T {
        &self.levels[cube.level() as usize][cube.morton()]
    }

    pub fn get_mut(&mut self, cube: &DyadicCube) -> &mut T {
        &mut self.levels[cube.level() as usize][cube.morton()]
    }

    pub fn level(&self, level: u32) -> &[T] {
        &self.levels[level as usize]
    }
}

/// `2^e` for integer `e`, exact.
pub(crate) fn exp2i(e: i32) -> f64 {
    f64::powi(2.0, e)
}

fn interleave(x: u32) -> usize {
    let mut x = x as u64 & 0xFFFF_FFFF;
    x = (x | (x << 16)) & 0x0000_FFFF_0000_FFFF;
    x = (x | (x << 8)) & 0x00FF_00FF_00FF_00FF;
    x = (x | (x << 4)) & 0x0F0F_0F0F_0F0F_0F0F;
    x = (x | (x << 2)) & 0x3333_3333_3333_3333;
    x = (x | (x << 1)) & 0x5555_5555_5555_5555;
    x as usize
}

fn deinterleave(m: usize) -> u32 {
    let mut x = m as u64 & 0x5555_5555_5555_5555;
    x = (x | (x >> 1)) & 0x3333_3333_3333_3333;
    x = (x | (x >> 2)) & 0x0F0F_0F0F_0F0F_0F0F;
    x = (x | (x >> 4)) & 0x00FF_00FF_00FF_00FF;
    x = (x | (x >> 8)) & 0x0000_FFFF_0000_FFFF;
    x = (x | (x >> 16)) & 0x0000_0000_FFFF_FFFF;
    x as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(s: &str) -> DyadicCube {
        s.parse().unwrap()
    }

    #[test]
    fn children_of_unit_interval() {
        let g = GridConfig::new(1, 4).unwrap();
        let kids = g.children(&g.root()).unwrap();
        assert_eq!(kids, vec![cube("1:0"), cube("1:1")]);
        assert_eq!(kids[0].corner()[0], 0.0);
        assert_eq!(kids[1].corner()[0], 0.5);
    }

    #[test]
    fn children_of_unit_square() {
        let g = GridConfig::new(2, 3).unwrap();
        let kids = g.children(&g.root()).unwrap();
        assert_eq!(kids.len(), 4);
        assert!(kids.iter().all(|c| c.volume() == 0.25));
        let mut idx: Vec<_> = kids.iter().map(|c| c.index().to_vec()).collect();
        idx.sort();
        assert_eq!(idx, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn leaf_has_no_children() {
        let g = GridConfig::new(1, 4).unwrap();
        let err = g.children(&cube("4:0")).unwrap_err();
        assert!(err.to_string().contains("no children"));
    }

    #[test]
    fn containment_examples() {
        assert!(cube("1:0").contains(&cube("2:0")));
        assert!(!cube("1:0").contains(&cube("2:2")));
        assert!(cube("3:5").contains(&cube("3:5")));
        assert!(!cube("2:0").contains(&cube("1:0")));
        assert!(cube("1:(1,0)").contains(&cube("3:(5,2)")));
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(GridConfig::new(1, 1).unwrap().cubes().collect::<Vec<_>>(), vec![cube("0:0"), cube("1:0"), cube("1:1")]);
        assert_eq!(GridConfig::new(1, 4).unwrap().cubes().count(), 31);
        assert_eq!(GridConfig::new(2, 2).unwrap().cubes().count(), 21);
    }

    #[test]
    fn enumeration_is_sorted_and_unique() {
        let g = GridConfig::new(2, 3).unwrap();
        let all: Vec<_> = g.cubes().collect();
        assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn grid_bounds() {
        assert!(GridConfig::new(1, 0).is_err());
        assert!(GridConfig::new(1, 25).is_err());
        assert!(GridConfig::new(2, 13).is_err());
        assert!(GridConfig::new(3, 2).is_err());
        assert!(GridConfig::new(2, 12).is_ok());
    }

    #[test]
    fn text_form() {
        assert_eq!(cube("3:5").to_string(), "3:5");
        assert_eq!(cube(" 2:(1, 3)").to_string(), "2:(1,3)");
        assert!("2:4".parse::<DyadicCube>().is_err());
        assert!("x".parse::<DyadicCube>().is_err());
        assert!("1:(0)".parse::<DyadicCube>().is_err());
    }

    #[test]
    fn leaf_ranges_are_contiguous_in_2d() {
        let g = GridConfig::new(2, 3).unwrap();
        for q in g.cubes() {
            let leaves: Vec<_> = g.leaf_range(&q).map(|i| g.leaf(i)).collect();
            assert_eq!(leaves.len() as f64 * g.leaf_volume(), q.volume());
            assert!(leaves.iter().all(|l| q.contains(l)));
        }
    }

    proptest! {
        #[test]
        fn children_volumes_sum(dim in 1u32..=2, level in 0u32..10, seed in any::<u64>()) {
            let side = 1u64 << level;
            let ix = [(seed % side) as u32, ((seed >> 20) % side) as u32];
            let q = DyadicCube::new(dim, level, &ix[..dim as usize]).unwrap();
            let total: f64 = q.children().map(|c| c.volume()).sum();
            prop_assert_eq!(total, q.volume());
            prop_assert!(q.children().all(|c| q.contains(&c) && c.parent() == Some(q)));
        }

        #[test]
        fn mutual_containment_is_equality(
            la in 0u32..6, lb in 0u32..6, ja in any::<u32>(), jb in any::<u32>(), ka in any::<u32>(), kb in any::<u32>()
        ) {
            let a = DyadicCube::new(2, la, &[ja % (1 << la), ka % (1 << la)]).unwrap();
            let b = DyadicCube::new(2, lb, &[jb % (1 << lb), kb % (1 << lb)]).unwrap();
            prop_assert_eq!(a.contains(&b) && b.contains(&a), a == b);
            // nested or disjoint: containment exactly when the ancestor matches
            let nested = a.contains(&b) || b.contains(&a);
            let disjoint_by_coords = {
                let lvl = la.min(lb);
                a.ancestor_at(lvl) != b.ancestor_at(lvl)
            };
            prop_assert_eq!(nested, !disjoint_by_coords);
        }

        #[test]
        fn morton_round_trip(level in 0u32..12, i in any::<u32>(), j in any::<u32>()) {
            let side = 1u32 << level;
            let q = DyadicCube::new(2, level, &[i % side, j % side]).unwrap();
            prop_assert_eq!(DyadicCube::from_morton(2, level, q.morton()), q);
            let s = q.to_string();
            prop_assert_eq!(s.parse::<DyadicCube>().unwrap(), q);
        }

        #[test]
        fn cube_count_closed_form(dim in 1u32..=2, n in 1u32..=8) {
            let g = GridConfig::new(dim, n).unwrap();
            let closed = ((1usize << (dim * (n + 1))) - 1) / ((1usize << dim) - 1);
            prop_assert_eq!(g.cubes().count(), closed);
            prop_assert_eq!(g.cube_count(), closed);
        }
    }
}
