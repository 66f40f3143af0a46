//! λ-sparse families of dyadic cubes.
//!
//! Sparseness is measured on *maximal* proper subcubes: for each member
//! `Q₀`, the members `Q ⊊ Q₀` with no member strictly between them and `Q₀`
//! must cover at most `λ|Q₀|`. The exceptional set `E_Q` is `Q` minus those
//! maximal subcubes.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DyadicCube, GridConfig};
use crate::maximal;
use crate::weights::Weight;

/// Outcome of [`verify_sparse`].
#[derive(Clone, Debug, PartialEq)]
pub struct SparsenessCheck {
    pub ok: bool,
    pub worst_ratio: f64,
    /// First cube (in `(level, index)` order) attaining the worst ratio when
    /// the check fails.
    pub witness: Option<DyadicCube>,
}

/// `max_{Q₀} Σ_{maximal Q ⊊ Q₀} |Q| / |Q₀|` over the given cubes.
pub fn verify_sparse(cubes: &[DyadicCube], lambda: f64) -> SparsenessCheck {
    let tree = FamilyTree::new(cubes);
    let mut worst = 0.0;
    let mut witness = None;
    for q in &tree.sorted {
        let covered: f64 = tree.children.get(q).map_or(0.0, |c| c.iter().map(DyadicCube::volume).sum());
        let ratio = covered / q.volume();
        if ratio > worst {
            worst = ratio;
            witness = Some(*q);
        }
    }
    let ok = worst <= lambda;
    SparsenessCheck { ok, worst_ratio: worst, witness: if ok { None } else { witness } }
}

/// Nearest-member parent/child links of a set of cubes.
struct FamilyTree {
    sorted: Vec<DyadicCube>,
    members: HashSet<DyadicCube>,
    parent: HashMap<DyadicCube, DyadicCube>,
    children: BTreeMap<DyadicCube, Vec<DyadicCube>>,
}

impl FamilyTree {
    fn new(cubes: &[DyadicCube]) -> Self {
        let mut sorted = cubes.to_vec();
        sorted.sort();
        sorted.dedup();
        let members: HashSet<_> = sorted.iter().copied().collect();
        let mut parent = HashMap::new();
        let mut children: BTreeMap<DyadicCube, Vec<DyadicCube>> = BTreeMap::new();
        for q in &sorted {
            if let Some(p) = q.ancestors().find(|a| members.contains(a)) {
                parent.insert(*q, p);
                children.entry(p).or_default().push(*q);
            }
        }
        Self { sorted, members, parent, children }
    }
}

/// `E_Q` as a disjoint union of dyadic cubes.
#[derive(Clone, Debug, PartialEq)]
pub struct ExceptionalSet {
    pieces: Vec<DyadicCube>,
}

impl ExceptionalSet {
    pub fn pieces(&self) -> &[DyadicCube] {
        &self.pieces
    }

    pub fn volume(&self) -> f64 {
        self.pieces.iter().map(DyadicCube::volume).sum()
    }

    /// `σ(E_Q)`, summed over the pieces.
    pub fn mass(&self, weight: &Weight) -> f64 {
        self.pieces.iter().map(|p| weight.mass(p)).sum()
    }

    /// Leaf indices (Morton order), ascending.
    pub fn leaves(&self, grid: &GridConfig) -> Vec<usize> {
        let mut out: Vec<usize> = self.pieces.iter().flat_map(|p| grid.leaf_range(p)).collect();
        out.sort_unstable();
        out
    }
}

#[derive(Clone, Debug)]
pub struct SparseFamily {
    grid: GridConfig,
    root: DyadicCube,
    lambda: f64,
    cubes: Vec<DyadicCube>,
    members: HashSet<DyadicCube>,
    parent: HashMap<DyadicCube, DyadicCube>,
    children: BTreeMap<DyadicCube, Vec<DyadicCube>>,
    exceptional: BTreeMap<DyadicCube, ExceptionalSet>,
}

impl SparseFamily {
    /// Validates grid membership, containment in `root` and λ-sparseness.
    pub fn new(grid: GridConfig, root: DyadicCube, lambda: f64, cubes: &[DyadicCube]) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::InvalidFamily(format!("lambda {lambda} must lie in (0, 1)")));
        }
        if cubes.is_empty() {
            return Err(Error::InvalidFamily("empty family".into()));
        }
        grid.check(&root)?;
        for q in cubes {
            grid.check(q)?;
            if !root.contains(q) {
                return Err(Error::InvalidFamily(format!("cube {q} lies outside the root {root}")));
            }
        }
        let check = verify_sparse(cubes, lambda);
        if let Some(witness) = check.witness {
            return Err(Error::NotSparse { lambda, witness, ratio: check.worst_ratio });
        }
        let tree = FamilyTree::new(cubes);
        let mut family = Self {
            grid,
            root,
            lambda,
            cubes: tree.sorted,
            members: tree.members,
            parent: tree.parent,
            children: tree.children,
            exceptional: BTreeMap::new(),
        };
        family.exceptional = family.compute_exceptional();
        Ok(family)
    }

    fn compute_exceptional(&self) -> BTreeMap<DyadicCube, ExceptionalSet> {
        // cubes that strictly contain some member
        let mut above: HashSet<DyadicCube> = HashSet::new();
        for q in &self.cubes {
            for a in q.ancestors() {
                if !above.insert(a) {
                    break;
                }
            }
        }
        let mut out = BTreeMap::new();
        for q in &self.cubes {
            let mut pieces = Vec::new();
            let mut stack = vec![*q];
            while let Some(c) = stack.pop() {
                if c != *q && self.members.contains(&c) {
                    continue;
                }
                if above.contains(&c) {
                    stack.extend(c.children());
                } else {
                    pieces.push(c);
                }
            }
            pieces.sort();
            out.insert(*q, ExceptionalSet { pieces });
        }
        out
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn root(&self) -> DyadicCube {
        self.root
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Members in `(level, index)` order.
    pub fn cubes(&self) -> &[DyadicCube] {
        &self.cubes
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    pub fn contains(&self, cube: &DyadicCube) -> bool {
        self.members.contains(cube)
    }

    /// Members `Q ⊆ r`, including `r` itself when it is a member.
    pub fn members_within<'a>(&'a self, r: &'a DyadicCube) -> impl Iterator<Item = DyadicCube> + 'a {
        self.cubes.iter().copied().filter(move |q| r.contains(q))
    }

    /// Maximal members strictly inside `cube`.
    pub fn maximal_children(&self, cube: &DyadicCube) -> &[DyadicCube] {
        self.children.get(cube).map_or(&[], Vec::as_slice)
    }

    /// Smallest member strictly containing `cube`.
    pub fn family_parent(&self, cube: &DyadicCube) -> Option<DyadicCube> {
        self.parent.get(cube).copied()
    }

    pub fn exceptional(&self, cube: &DyadicCube) -> Option<&ExceptionalSet> {
        self.exceptional.get(cube)
    }

    pub fn exceptional_sets(&self) -> &BTreeMap<DyadicCube, ExceptionalSet> {
        &self.exceptional
    }

    pub fn check(&self) -> SparsenessCheck {
        verify_sparse(&self.cubes, self.lambda)
    }

    pub fn to_json(&self) -> Result<String> {
        let rec = FamilyRecord {
            lambda: self.lambda,
            root: self.root,
            cubes: self.cubes.clone(),
            dimension: Some(self.grid.dimension()),
            leaf_level: Some(self.grid.leaf_level()),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    /// Parses a family record and binds it to `grid`.
    pub fn from_json(text: &str, grid: GridConfig) -> Result<Self> {
        let rec: FamilyRecord = serde_json::from_str(text)?;
        if rec.dimension.is_some_and(|d| d != grid.dimension())
            || rec.leaf_level.is_some_and(|n| n != grid.leaf_level())
        {
            return Err(Error::GridMismatch(format!(
                "family declares d={:?} N={:?}, weights use d={} N={}",
                rec.dimension,
                rec.leaf_level,
                grid.dimension(),
                grid.leaf_level()
            )));
        }
        Self::new(grid, rec.root, rec.lambda, &rec.cubes)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilyRecord {
    lambda: f64,
    root: DyadicCube,
    cubes: Vec<DyadicCube>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dimension: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    leaf_level: Option<u32>,
}

/// Corona decomposition: below each selected `Q`, select the maximal
/// `Q' ⊊ Q` with `⟨σ⟩_{Q'} > Λ ⟨σ⟩_Q`. The result is `1/Λ`-sparse.
pub fn stopping_family(sigma: &Weight, big_lambda: f64, root: &DyadicCube) -> Result<SparseFamily> {
    if !(big_lambda > 1.0 && big_lambda.is_finite()) {
        return Err(Error::InvalidFamily(format!("stopping ratio {big_lambda} must exceed 1")));
    }
    let grid = *sigma.grid();
    grid.check(root)?;
    if sigma.mass(root) <= 0.0 {
        return Err(Error::DegenerateWeight(*root));
    }
    let mut selected = vec![*root];
    let mut queue = vec![*root];
    while let Some(top) = queue.pop() {
        let threshold = big_lambda * sigma.average(&top);
        let mut stack: Vec<DyadicCube> =
            if grid.is_leaf(&top) { Vec::new() } else { top.children().collect() };
        while let Some(c) = stack.pop() {
            if sigma.average(&c) > threshold {
                selected.push(c);
                queue.push(c);
            } else if !grid.is_leaf(&c) {
                stack.extend(c.children());
            }
        }
    }
    SparseFamily::new(grid, *root, 1.0 / big_lambda, &selected)
}

/// Greedy randomized family on the unit cube: candidates are visited in a
/// seeded random order and kept only when the family stays λ-sparse.
pub fn random_sparse(grid: GridConfig, lambda: f64, seed: u64, target_size: usize) -> Result<SparseFamily> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidFamily(format!("lambda {lambda} must lie in (0, 1)")));
    }
    let root = grid.root();
    let mut candidates: Vec<DyadicCube> = grid.cubes().skip(1).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);

    let mut members: HashSet<DyadicCube> = HashSet::from([root]);
    let mut children: HashMap<DyadicCube, Vec<DyadicCube>> = HashMap::new();
    let mut accepted = vec![root];
    for c in candidates {
        if accepted.len() >= target_size.max(1) {
            break;
        }
        let parent = match c.ancestors().find(|a| members.contains(a)) {
            Some(p) => p,
            None => continue,
        };
        let siblings = children.get(&parent).map_or(&[][..], Vec::as_slice);
        let (moved, kept): (Vec<DyadicCube>, Vec<DyadicCube>) = siblings.iter().partition(|s| c.contains(s));
        let moved_volume: f64 = moved.iter().map(DyadicCube::volume).sum();
        let parent_cover: f64 = kept.iter().map(DyadicCube::volume).sum::<f64>() + c.volume();
        if parent_cover > lambda * parent.volume() || moved_volume > lambda * c.volume() {
            continue;
        }
        let mut kept = kept;
        kept.push(c);
        children.insert(parent, kept);
        children.insert(c, moved);
        members.insert(c);
        accepted.push(c);
    }
    SparseFamily::new(grid, root, lambda, &accepted)
}

/// Both sides of `Σ_{Q ⊆ Q₀} σ(Q) ≤ (1-λ)^{-1} ρ(Q₀;σ) σ(Q₀)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CarlesonCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

pub fn carleson_check(family: &SparseFamily, sigma: &Weight, q0: &DyadicCube) -> Result<CarlesonCheck> {
    if !family.contains(q0) {
        return Err(Error::NotInFamily(*q0));
    }
    let rho = maximal::rho(sigma, q0)?;
    Ok(carleson_with_rho(family, sigma, q0, rho))
}

pub(crate) fn carleson_with_rho(family: &SparseFamily, sigma: &Weight, q0: &DyadicCube, rho: f64) -> CarlesonCheck {
    let lhs: f64 = family.members_within(q0).map(|q| sigma.mass(&q)).sum();
    let rhs = rho * sigma.mass(q0) / (1.0 - family.lambda());
    CarlesonCheck { lhs, rhs, ratio: lhs / rhs }
}
