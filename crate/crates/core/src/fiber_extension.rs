//! Fiber extensions `T(x, i) = (T_o(x), Phi(x, i))` with cell-constant fiber
//! actions, either on a finite fiber set or on `Z^d` (group extensions).

use crate::check::CheckReport;
use crate::error::{Error, Result};
use crate::graph;
use crate::lattice;
use crate::rational::{fmt_q, Q};
use crate::symbolic_base::{validate_base, SymbolicBaseSystem};
use num_traits::{Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Surjective,
    Bijective,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FiberSet {
    /// `{0, ..., k-1}`.
    Finite { size: usize },
    /// `Z^dim`, computed on the window `|i_j| <= window`.
    Lattice { dim: usize, window: i64 },
}

impl FiberSet {
    /// Number of fiber points carried explicitly.
    pub fn window_size(&self) -> usize {
        match *self {
            FiberSet::Finite { size } => size,
            FiberSet::Lattice { dim, window } => ((2 * window + 1) as usize).pow(dim as u32),
        }
    }

    pub fn is_lattice(&self) -> bool {
        matches!(self, FiberSet::Lattice { .. })
    }

    pub fn point(&self, idx: usize) -> Vec<i64> {
        match *self {
            FiberSet::Finite { .. } => vec![idx as i64],
            FiberSet::Lattice { dim, window } => {
                let side = (2 * window + 1) as usize;
                let mut rest = idx;
                let mut p = vec![0; dim];
                for k in (0..dim).rev() {
                    p[k] = (rest % side) as i64 - window;
                    rest /= side;
                }
                p
            }
        }
    }

    pub fn index(&self, p: &[i64]) -> Option<usize> {
        match *self {
            FiberSet::Finite { size } => (p.len() == 1 && p[0] >= 0 && (p[0] as usize) < size).then(|| p[0] as usize),
            FiberSet::Lattice { dim, window } => {
                if p.len() != dim || p.iter().any(|x| x.abs() > window) {
                    return None;
                }
                let side = 2 * window + 1;
                Some(p.iter().fold(0i64, |acc, &x| acc * side + x + window) as usize)
            }
        }
    }

    fn check(&self) -> Vec<String> {
        match *self {
            FiberSet::Finite { size } if size == 0 => vec!["finite fiber set must have k >= 1".into()],
            FiberSet::Lattice { dim, window } => {
                let mut bad = Vec::new();
                if !(1..=3).contains(&dim) {
                    bad.push(format!("lattice dimension {dim} not in 1..=3"));
                }
                if window < 1 {
                    bad.push(format!("window L = {window} must be >= 1"));
                }
                bad
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FiberAction {
    /// One map `sigma_c : F -> F` per base cell.
    Maps { mode: ActionMode, maps: Vec<Vec<usize>> },
    /// Group extension `Phi(x, i) = i + psi_c` with one vector per base cell.
    Displacements { psi: Vec<Vec<i64>> },
}

impl FiberAction {
    pub fn bijective(maps: Vec<Vec<usize>>) -> Self {
        FiberAction::Maps { mode: ActionMode::Bijective, maps }
    }

    pub fn mode(&self) -> ActionMode {
        match self {
            FiberAction::Maps { mode, .. } => *mode,
            FiberAction::Displacements { .. } => ActionMode::Bijective,
        }
    }

    /// Image of fiber point `p` over cell `c`.
    pub fn apply(&self, c: usize, p: &[i64]) -> Vec<i64> {
        match self {
            FiberAction::Maps { maps, .. } => vec![maps[c][p[0] as usize] as i64],
            FiberAction::Displacements { psi } => p.iter().zip(&psi[c]).map(|(a, b)| a + b).collect(),
        }
    }

    /// Number of fiber points over cell `c` mapped to `p` (infinite fibers
    /// are translations, so exactly one).
    pub fn preimage_count(&self, c: usize, p: &[i64]) -> usize {
        match self {
            FiberAction::Maps { maps, .. } => maps[c].iter().filter(|&&v| v as i64 == p[0]).count(),
            FiberAction::Displacements { .. } => 1,
        }
    }

    pub fn cells(&self) -> usize {
        match self {
            FiberAction::Maps { maps, .. } => maps.len(),
            FiberAction::Displacements { psi } => psi.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionValidation {
    pub report: CheckReport,
    /// Hermite basis of the subgroup of `Z^d` generated by displacement
    /// differences and cycle sums (lattice actions only).
    pub subgroup: Option<Vec<Vec<i64>>>,
    /// Index of that subgroup in `Z^d`; `None` when infinite or not a lattice.
    pub subgroup_index: Option<u64>,
}

/// Confirms the declared surjectivity/bijectivity cell by cell.
pub fn validate_action(
    action: &FiberAction,
    fiber: &FiberSet,
    base: &SymbolicBaseSystem,
) -> Result<ActionValidation> {
    let mut bad = fiber.check();
    if action.cells() != base.len() {
        bad.push(format!("action has {} cells, base has {}", action.cells(), base.len()));
    }
    if !bad.is_empty() {
        return Err(Error::InvalidAction(bad));
    }
    let mut report = CheckReport::new("validate_action");
    match (action, fiber) {
        (FiberAction::Maps { mode, maps }, FiberSet::Finite { size }) => {
            let k = *size;
            for (c, map) in maps.iter().enumerate() {
                let name = &base.cells[c];
                if map.len() != k {
                    bad.push(format!("cell {name}: map has {} entries, fiber has {k}", map.len()));
                    continue;
                }
                if let Some(v) = map.iter().find(|&&v| v >= k) {
                    bad.push(format!("cell {name}: value {v} outside fiber"));
                    continue;
                }
                let mut hits = vec![0usize; k];
                for &v in map {
                    hits[v] += 1;
                }
                for (v, &h) in hits.iter().enumerate() {
                    if h == 0 {
                        bad.push(format!("cell {name}: value {v} unreached"));
                    }
                    if h > 1 && *mode == ActionMode::Bijective {
                        bad.push(format!("cell {name}: value {v} duplicated"));
                    }
                }
            }
            if !bad.is_empty() {
                return Err(Error::InvalidAction(bad));
            }
            report.pass("mode", format!("every sigma_c is {:?}", mode).to_lowercase());
            Ok(ActionValidation { report, subgroup: None, subgroup_index: None })
        }
        (FiberAction::Displacements { psi }, FiberSet::Lattice { dim, .. }) => {
            for (c, p) in psi.iter().enumerate() {
                if p.len() != *dim {
                    bad.push(format!("cell {}: displacement has dimension {}, expected {dim}", base.cells[c], p.len()));
                }
            }
            if !bad.is_empty() {
                return Err(Error::InvalidAction(bad));
            }
            let mut gens: Vec<Vec<i64>> = psi
                .windows(2)
                .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| a - b).collect())
                .collect();
            gens.extend(cycle_displacements(base, psi).into_iter().map(|(d, _)| d));
            let basis = lattice::hnf(&gens, *dim);
            let index = lattice::index(&basis, *dim);
            report.pass("mode", "translations are bijective");
            report.pass("subgroup", format!("generated subgroup basis {basis:?}, index {index:?}"));
            Ok(ActionValidation { report, subgroup: Some(basis), subgroup_index: index })
        }
        _ => Err(Error::InvalidAction(vec!["fiber set and action kinds differ".into()])),
    }
}

/// Cycle generators of the base graph, SCC by SCC: for every internal edge
/// `c -> c'` the pair `(kappa(c) + psi_c - kappa(c'), tau(c) + 1 - tau(c'))`
/// where `kappa`, `tau` are displacement and depth along a BFS tree.
pub(crate) fn cycle_displacements(base: &SymbolicBaseSystem, psi: &[Vec<i64>]) -> Vec<(Vec<i64>, i64)> {
    let adj = base.adjacency();
    let comps = graph::sccs(&adj);
    let of = graph::membership(base.len(), &comps);
    let mut out = Vec::new();
    for comp in &comps {
        let pot = tree_potentials(comp, &adj, &of, psi);
        for &c in comp {
            for &t in &adj[c] {
                if of[t] == of[c] {
                    let (kc, tc) = &pot[&c];
                    let (kt, tt) = &pot[&t];
                    let d = (0..psi[c].len()).map(|k| kc[k] + psi[c][k] - kt[k]).collect();
                    out.push((d, tc + 1 - tt));
                }
            }
        }
    }
    out
}

pub(crate) fn tree_potentials(
    comp: &[usize],
    adj: &[Vec<usize>],
    of: &[usize],
    psi: &[Vec<i64>],
) -> std::collections::HashMap<usize, (Vec<i64>, i64)> {
    let dim = psi.first().map_or(0, |p| p.len());
    let mut pot = std::collections::HashMap::new();
    pot.insert(comp[0], (vec![0; dim], 0i64));
    let mut queue = std::collections::VecDeque::from([comp[0]]);
    while let Some(u) = queue.pop_front() {
        let (ku, tu) = pot[&u].clone();
        for &v in &adj[u] {
            if of[v] == of[u] && !pot.contains_key(&v) {
                let kv = ku.iter().zip(&psi[u]).map(|(a, b)| a + b).collect();
                pot.insert(v, (kv, tu + 1));
                queue.push_back(v);
            }
        }
    }
    pot
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeTarget {
    State(usize),
    /// Target fiber lies outside the lattice window.
    Boundary { cell: usize, fiber: Vec<i64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductEdge {
    pub target: EdgeTarget,
    pub weight: Q,
}

/// The extension on `cells x fiber window`, state index `cell * |W| + fiber`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductSystem {
    pub base: SymbolicBaseSystem,
    pub fiber: FiberSet,
    pub action: FiberAction,
    pub edges: Vec<Vec<ProductEdge>>,
}

impl ProductSystem {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn fiber_len(&self) -> usize {
        self.fiber.window_size()
    }

    pub fn state(&self, cell: usize, fiber_idx: usize) -> usize {
        cell * self.fiber_len() + fiber_idx
    }

    pub fn cell_of(&self, s: usize) -> usize {
        s / self.fiber_len()
    }

    pub fn fiber_idx(&self, s: usize) -> usize {
        s % self.fiber_len()
    }

    pub fn fiber_point(&self, s: usize) -> Vec<i64> {
        self.fiber.point(self.fiber_idx(s))
    }

    pub fn lifted_measure(&self, s: usize) -> &Q {
        &self.base.cell_measure[self.cell_of(s)]
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Interior adjacency lists (boundary edges omitted).
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        self.edges
            .iter()
            .map(|es| {
                es.iter()
                    .filter_map(|e| match e.target {
                        EdgeTarget::State(t) => Some(t),
                        EdgeTarget::Boundary { .. } => None,
                    })
                    .collect()
            })
            .collect()
    }

    /// Whether each state has at least one boundary edge.
    pub fn leaks(&self) -> Vec<bool> {
        self.edges
            .iter()
            .map(|es| es.iter().any(|e| matches!(e.target, EdgeTarget::Boundary { .. })))
            .collect()
    }

    pub fn boundary_edge_count(&self) -> usize {
        self.edges.iter().flatten().filter(|e| matches!(e.target, EdgeTarget::Boundary { .. })).count()
    }

    /// Human-readable label `cell:fiber`.
    pub fn label(&self, s: usize) -> String {
        let p = self.fiber_point(s);
        let f: Vec<String> = p.iter().map(i64::to_string).collect();
        format!("{}:{}", self.base.cells[self.cell_of(s)], f.join(","))
    }

    /// Collapse along the projection: per state, outgoing weight summed by
    /// target cell (boundary edges included).
    pub fn projected_row(&self, s: usize) -> Vec<Q> {
        let mut row = vec![Q::zero(); self.base.len()];
        for e in &self.edges[s] {
            let c = match &e.target {
                EdgeTarget::State(t) => self.cell_of(*t),
                EdgeTarget::Boundary { cell, .. } => *cell,
            };
            row[c] += &e.weight;
        }
        row
    }
}

/// Builds the product graph after validating base and action.
pub fn build_product(base: &SymbolicBaseSystem, fiber: &FiberSet, action: &FiberAction) -> Result<ProductSystem> {
    validate_base(base)?;
    validate_action(action, fiber, base)?;
    if let (FiberAction::Displacements { psi }, FiberSet::Lattice { window, .. }) = (action, fiber) {
        let widest = psi.iter().flatten().map(|x| x.abs()).max().unwrap_or(0);
        if widest > *window {
            return Err(Error::WindowUnderflow(format!(
                "a displacement of size {widest} leaves the window |i| <= {window} in one step"
            )));
        }
    }
    let adj = base.adjacency();
    let w = fiber.window_size();
    let mut edges = Vec::with_capacity(base.len() * w);
    for c in 0..base.len() {
        for f in 0..w {
            let image = action.apply(c, &fiber.point(f));
            let out = adj[c]
                .iter()
                .map(|&t| ProductEdge {
                    target: match fiber.index(&image) {
                        Some(fi) => EdgeTarget::State(t * w + fi),
                        None => EdgeTarget::Boundary { cell: t, fiber: image.clone() },
                    },
                    weight: base.transition[c][t].clone(),
                })
                .collect();
            edges.push(out);
        }
    }
    Ok(ProductSystem { base: base.clone(), fiber: fiber.clone(), action: action.clone(), edges })
}

/// A union of `(cylinder word, fiber point)` pairs, all words of length `depth`.
/// Word `w` stands for `{x : x in w_0, T_o x in w_1, ...}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolicSet {
    pub depth: usize,
    pub members: BTreeSet<(Vec<usize>, Vec<i64>)>,
}

/// Admissible words of a given length.
pub fn admissible_words(base: &SymbolicBaseSystem, len: usize) -> Vec<Vec<usize>> {
    let adj = base.adjacency();
    let mut words: Vec<Vec<usize>> = (0..base.len()).map(|c| vec![c]).collect();
    for _ in 1..len {
        words = words
            .into_iter()
            .flat_map(|w| {
                let last = *w.last().unwrap();
                adj[last].iter().map(move |&t| {
                    let mut w2 = w.clone();
                    w2.push(t);
                    w2
                })
            })
            .collect();
    }
    words
}

impl SymbolicSet {
    pub fn empty(depth: usize) -> Self {
        SymbolicSet { depth, members: BTreeSet::new() }
    }

    pub fn full(ps: &ProductSystem, depth: usize) -> Self {
        let words = admissible_words(&ps.base, depth);
        let members = words
            .iter()
            .flat_map(|w| (0..ps.fiber_len()).map(move |f| (w.clone(), ps.fiber.point(f))))
            .collect();
        SymbolicSet { depth, members }
    }

    /// `pi(A)` as a set of words.
    pub fn project(&self) -> BTreeSet<Vec<usize>> {
        self.members.iter().map(|(w, _)| w.clone()).collect()
    }
}

/// `pi(T^{-1} A)`: words `(c, w)` with an edge `c -> w_0` and some fiber
/// point over `c` mapped into the fiber of a member over `w`.
pub fn projected_preimage(ps: &ProductSystem, a: &SymbolicSet) -> BTreeSet<Vec<usize>> {
    let adj = ps.base.adjacency();
    let mut out = BTreeSet::new();
    for (w, j) in &a.members {
        for c in 0..ps.base.len() {
            if adj[c].contains(&w[0]) && ps.action.preimage_count(c, j) > 0 {
                let mut cw = vec![c];
                cw.extend_from_slice(w);
                out.insert(cw);
            }
        }
    }
    out
}

/// `T_o^{-1}(pi A)` as words of length `depth + 1`.
pub fn base_preimage(base: &SymbolicBaseSystem, words: &BTreeSet<Vec<usize>>) -> BTreeSet<Vec<usize>> {
    let adj = base.adjacency();
    let mut out = BTreeSet::new();
    for w in words {
        for c in 0..base.len() {
            if adj[c].contains(&w[0]) {
                let mut cw = vec![c];
                cw.extend_from_slice(w);
                out.insert(cw);
            }
        }
    }
    out
}

pub fn random_symbolic_set(ps: &ProductSystem, depth: usize, rng: &mut impl Rng) -> SymbolicSet {
    let density: f64 = rng.random();
    let mut set = SymbolicSet::empty(depth);
    for w in admissible_words(&ps.base, depth) {
        for f in 0..ps.fiber_len() {
            if rng.random::<f64>() < density {
                set.members.insert((w.clone(), ps.fiber.point(f)));
            }
        }
    }
    set
}

/// Checks `pi T^{-1} A = T_o^{-1} pi A` on one symbolic set.
pub fn projection_identity_holds(ps: &ProductSystem, a: &SymbolicSet) -> bool {
    projected_preimage(ps, a) == base_preimage(&ps.base, &a.project())
}

/// Checks the projection identity on `trials` random symbolic sets of
/// refinement depth 1 to `max_depth` (3 by default in the CLI).
pub fn check_projection_identity(ps: &ProductSystem, trials: usize, max_depth: usize, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("projection_identity");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for trial in 0..trials {
        let depth = rng.random_range(1..=max_depth.max(1));
        let a = random_symbolic_set(ps, depth, &mut rng);
        if !projection_identity_holds(ps, &a) {
            failures += 1;
            if failures <= 5 {
                report.fail("counterexample", format!("trial {trial}: depth {depth}, {} members", a.members.len()));
            }
        }
    }
    if failures == 0 {
        report.pass("identity", format!("{trials} random sets up to depth {max_depth}"));
    }
    report
}

/// Exact stationarity of the lifted measure `m(c, i) = mu_o(c)`.
pub fn check_measure_preservation(ps: &ProductSystem) -> Result<CheckReport> {
    if ps.action.mode() != ActionMode::Bijective {
        return Err(Error::HypothesisNotMet {
            module: "fiber_extension",
            reason: "measure preservation of the lift requires a fiber-bijective action".into(),
        });
    }
    let mut report = CheckReport::new("measure_preservation");
    if !ps.base.measure_preserving {
        report.fail("base", "base measure is not stationary, so the lifted measure cannot be");
    }
    let adj = ps.base.adjacency();
    let mut boundary = 0usize;
    let mut violations = 0usize;
    for t in 0..ps.len() {
        let (ct, j) = (ps.cell_of(t), ps.fiber_point(t));
        let mut inflow = Q::zero();
        let mut touches_boundary = false;
        for c in 0..ps.base.len() {
            if !adj[c].contains(&ct) {
                continue;
            }
            let count = match &ps.action {
                FiberAction::Displacements { psi } => {
                    let src: Vec<i64> = j.iter().zip(&psi[c]).map(|(a, b)| a - b).collect();
                    if ps.fiber.index(&src).is_none() {
                        touches_boundary = true;
                    }
                    1
                }
                FiberAction::Maps { .. } => ps.action.preimage_count(c, &j),
            };
            inflow += &ps.base.cell_measure[c] * &ps.base.transition[c][ct] * Q::from_integer(count.into());
        }
        if touches_boundary {
            boundary += 1;
            continue;
        }
        if &inflow != ps.lifted_measure(t) {
            violations += 1;
            if violations <= 5 {
                report.fail(
                    "balance",
                    format!("state {}: inflow {} vs measure {}", ps.label(t), fmt_q(&inflow), fmt_q(ps.lifted_measure(t))),
                );
            }
        }
    }
    if violations == 0 {
        report.pass("balance", format!("{} interior states balanced exactly", ps.len() - boundary));
    }
    if boundary > 0 {
        report.pass("boundary", format!("{boundary} states with predecessors outside the window flagged"));
    }
    Ok(report)
}
