//! Invertible K-mixing bases presented as two-sided Markov shifts.
//!
//! Coordinates are indexed by `Z`; the step moves every symbol one place up,
//! `(T x)_k = x_{k-1}`, so `x_{-1}` becomes the present. The past algebra
//! `B_o = sigma(x_k : k <= 0)` then satisfies `T B_o ⊃ B_o`. Transitions read
//! toward the past: `P(x_{-1} = b | x_0 = a) = transition[a][b]`.
//!
//! The quotient by `B_o` at depth `k` is the one-sided `k`-block system on
//! words `(x_0, x_{-1}, ..., x_{-k+1})`.

use crate::check::CheckReport;
use crate::decomposition::{certify_exactness, decompose, Certificate, DecompositionReport};
use crate::error::{Error, Result};
use crate::fiber_extension::{admissible_words, build_product, FiberAction, FiberSet, ProductSystem};
use crate::rational::{fmt_q, Q};
use crate::symbolic_base::{validate_base, SymbolicBaseSystem};
use num_traits::Zero;
use serde::Serialize;
use std::collections::{BTreeSet, HashMap};

#[derive(Debug, Clone, PartialEq)]
pub struct TwoSidedSymbolicSystem {
    pub base: SymbolicBaseSystem,
    /// Truncation depth `k` of past cylinders.
    pub depth: usize,
}

impl TwoSidedSymbolicSystem {
    pub fn new(base: SymbolicBaseSystem, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Quotient("depth must be at least 1".into()));
        }
        validate_base(&base)?;
        Ok(TwoSidedSymbolicSystem { base, depth })
    }
}

/// A cell-constant fiber action read off the symbol at `coordinate`
/// (0 is the present, negative is the past, positive the future).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KeyedAction {
    pub action: FiberAction,
    pub coordinate: i64,
}

impl KeyedAction {
    pub fn present(action: FiberAction) -> Self {
        KeyedAction { action, coordinate: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct QuotientResult {
    /// Product system over the `k`-block base with the induced action.
    pub quotient: ProductSystem,
    /// `words[c]` is the past cylinder `(x_0, ..., x_{-k+1})` of quotient cell `c`.
    pub words: Vec<Vec<usize>>,
    pub depth_used: usize,
    pub checks: CheckReport,
}

impl QuotientResult {
    /// Quotient cell of a two-sided word given from the present backwards,
    /// `(x_0, x_{-1}, ...)`; future coordinates are simply not part of it.
    pub fn class_of(&self, past: &[usize]) -> Option<usize> {
        let key = past.get(..self.depth_used)?;
        self.words.iter().position(|w| w == key)
    }

    /// Class map on truncated product states.
    pub fn class_map(&self, past: &[usize], fiber_idx: usize) -> Option<usize> {
        self.class_of(past).map(|c| self.quotient.state(c, fiber_idx))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuotientSummary {
    pub depth: usize,
    pub class_count: usize,
    pub key_coordinate: i64,
    pub checks: CheckReport,
}

fn word_name(base: &SymbolicBaseSystem, w: &[usize]) -> String {
    let parts: Vec<&str> = w.iter().map(|&c| base.cells[c].as_str()).collect();
    parts.join(".")
}

fn check_key(coordinate: i64, depth: usize) -> Result<usize> {
    if coordinate > 0 {
        return Err(Error::NotBMeasurable(format!(
            "action keyed to future coordinate {coordinate} is not measurable w.r.t. the past algebra"
        )));
    }
    let back = (-coordinate) as usize;
    if back >= depth {
        return Err(Error::Quotient(format!(
            "action keyed to coordinate {coordinate} needs depth at least {}, got {depth}",
            back + 1
        )));
    }
    Ok(back)
}

fn word_measure(base: &SymbolicBaseSystem, w: &[usize]) -> Q {
    let mut m = base.cell_measure[w[0]].clone();
    for p in w.windows(2) {
        m *= &base.transition[p[0]][p[1]];
    }
    m
}

/// The `k`-block base over past cylinders.
pub fn block_base(base: &SymbolicBaseSystem, depth: usize) -> Result<(SymbolicBaseSystem, Vec<Vec<usize>>)> {
    let words = admissible_words(base, depth);
    let index: HashMap<&[usize], usize> = words.iter().enumerate().map(|(i, w)| (w.as_slice(), i)).collect();
    let n = words.len();
    let mut transition = vec![vec![Q::zero(); n]; n];
    for (i, w) in words.iter().enumerate() {
        let last = w[depth - 1];
        for (b, p) in base.transition[last].iter().enumerate() {
            if p.is_zero() {
                continue;
            }
            let mut next = w[1..].to_vec();
            next.push(b);
            transition[i][index[next.as_slice()]] = p.clone();
        }
    }
    let measure = words.iter().map(|w| word_measure(base, w)).collect();
    let names = words.iter().map(|w| word_name(base, w)).collect();
    let q = SymbolicBaseSystem::new(names, transition, measure, Some(base.measure_preserving))?;
    Ok((q, words))
}

/// Quotients the two-sided product by the past algebra at the system depth.
pub fn build_quotient(ts: &TwoSidedSymbolicSystem, action: &KeyedAction) -> Result<QuotientResult> {
    let back = check_key(action.coordinate, ts.depth)?;
    let k = ts.depth;
    let base = &ts.base;
    let (qbase, words) = block_base(base, k)?;
    let (fiber, induced) = match &action.action {
        FiberAction::Maps { mode, maps } => {
            let size = maps.first().map_or(0, Vec::len);
            let m = words.iter().map(|w| maps[w[back]].clone()).collect();
            (FiberSet::Finite { size }, FiberAction::Maps { mode: *mode, maps: m })
        }
        FiberAction::Displacements { .. } => {
            return Err(Error::Unsupported("the two-sided quotient handles finite fibers only".into()))
        }
    };
    if action.action.cells() != base.len() {
        return Err(Error::InvalidAction(vec![format!(
            "action has {} cells, base has {}",
            action.action.cells(),
            base.len()
        )]));
    }
    let quotient = build_product(&qbase, &fiber, &induced)?;
    let mut result = QuotientResult { quotient, words, depth_used: k, checks: CheckReport::new("quotient") };
    result.checks = quotient_checks(ts, action, &result);
    Ok(result)
}

/// Roundtrip (collapse to the present symbol returns the base exactly) and
/// factor commutation on every truncated two-sided state.
fn quotient_checks(ts: &TwoSidedSymbolicSystem, action: &KeyedAction, q: &QuotientResult) -> CheckReport {
    let mut out = CheckReport::new("quotient");
    let base = &ts.base;
    let qb = &q.quotient.base;
    let n = base.len();
    // Measure-flow collapse to x_0.
    let mut mu = vec![Q::zero(); n];
    let mut flow = vec![vec![Q::zero(); n]; n];
    for (i, w) in q.words.iter().enumerate() {
        mu[w[0]] += &qb.cell_measure[i];
        for (j, v) in q.words.iter().enumerate() {
            if !qb.transition[i][j].is_zero() {
                flow[w[0]][v[0]] += &qb.cell_measure[i] * &qb.transition[i][j];
            }
        }
    }
    let measure_ok = mu == base.cell_measure;
    out.record("roundtrip_measure", measure_ok, "cell measures collapse to the base measure");
    let mut trans_ok = true;
    for a in 0..n {
        for b in 0..n {
            if mu[a].is_zero() {
                trans_ok = false;
                continue;
            }
            let p = &flow[a][b] / &mu[a];
            if p != base.transition[a][b] {
                trans_ok = false;
                out.fail(
                    "roundtrip_transition",
                    format!("collapsed P({a},{b}) = {} vs {}", fmt_q(&p), fmt_q(&base.transition[a][b])),
                );
            }
        }
    }
    out.record("roundtrip_transition", trans_ok, "collapsed transitions equal the base matrix");
    // Two-sided words over coordinates [-k, 1], listed from coordinate 1 down.
    let k = q.depth_used;
    let FiberAction::Maps { maps, .. } = &action.action else { return out };
    let back = (-action.coordinate) as usize;
    let fsize = q.quotient.fiber_len();
    let mut commute = true;
    let mut checked = 0usize;
    for w in admissible_words(base, k + 2) {
        // w[0] = x_1, w[1] = x_0, ..., w[k+1] = x_{-k}
        let past = &w[1..];
        for i in 0..fsize {
            let Some(s) = q.class_map(past, i) else {
                commute = false;
                continue;
            };
            // Two-sided step: present becomes x_{-1}, fiber moves by the key symbol.
            let image_past = &w[2..];
            let image_fiber = maps[past[back]][i];
            let lhs = q.class_map(image_past, image_fiber);
            let target_cell = q.class_of(image_past);
            let rhs = target_cell.and_then(|c| {
                q.quotient.edges[s].iter().find_map(|e| match e.target {
                    crate::fiber_extension::EdgeTarget::State(t) if q.quotient.cell_of(t) == c => Some(t),
                    _ => None,
                })
            });
            commute &= lhs.is_some() && lhs == rhs;
            checked += 1;
        }
    }
    out.record("factor_commutation", commute, format!("{checked} truncated states, all future extensions"));
    out
}

/// Two-sided dynamics used by the filtration checks; `Identity` is a
/// negative control without any expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dynamics {
    Shift,
    Identity,
}

/// Whether the partition given by `fine` refines the one given by `coarse`,
/// i.e. `coarse` is a function of `fine`.
fn refines<A: std::hash::Hash + Eq, B: PartialEq>(fine: &[A], coarse: &[B]) -> bool {
    let mut seen: HashMap<&A, &B> = HashMap::new();
    fine.iter().zip(coarse).all(|(f, c)| *seen.entry(f).or_insert(c) == c)
}

fn class_count<A: std::hash::Hash + Eq>(labels: &[A]) -> usize {
    labels.iter().collect::<std::collections::HashSet<_>>().len()
}

/// Checks the filtration identities behind the K-property at truncation
/// `depth`, on admissible words over coordinates `[-depth+1, depth]`:
/// (a) `B^(D-1) ⊂ T B^(D)` and `T B^(D) ⊄ B^(D)`;
/// (b) `T^n B = T_o^n B_o ⊗ P(F)` for `1 <= n <= D + kappa`;
/// (c) the join of `T^n B` over `0 <= n <= D` separates every state.
pub fn check_filtration_inclusions(
    ts: &TwoSidedSymbolicSystem,
    action: &KeyedAction,
    depth: usize,
    dynamics: Dynamics,
) -> Result<CheckReport> {
    let back = check_key(action.coordinate, depth.max(1))?;
    let maps = match &action.action {
        FiberAction::Maps { maps, .. } => maps,
        FiberAction::Displacements { .. } => {
            return Err(Error::Unsupported("filtration checks handle finite fibers only".into()))
        }
    };
    let fsize = maps.first().map_or(0, Vec::len);
    let mut inverse = vec![vec![usize::MAX; fsize]; maps.len()];
    for (c, m) in maps.iter().enumerate() {
        for (i, &j) in m.iter().enumerate() {
            inverse[c][j] = i;
        }
    }
    if inverse.iter().flatten().any(|&v| v == usize::MAX) {
        return Err(Error::HypothesisNotMet {
            module: "k_quotient",
            reason: "filtration checks need a bijective fiber action".into(),
        });
    }
    let d = depth.max(1) as i64;
    let kappa = -(back as i64);
    // A point: word over coordinates [-d+1, d] (stored by coordinate) and a fiber.
    let raw = admissible_words(&ts.base, (2 * d) as usize);
    // admissible_words reads forward along the chain; coordinate order is backward.
    let points: Vec<(Vec<usize>, usize)> = raw
        .into_iter()
        .flat_map(|w| {
            let mut by_coord = w;
            by_coord.reverse();
            (0..fsize).map(move |i| (by_coord.clone(), i))
        })
        .collect();
    let at = |w: &Vec<usize>, coord: i64| w[(coord + d - 1) as usize];
    // Label of T^n B^(D') at a point: the B^(D') label of T^{-n} of the point.
    let label = |p: &(Vec<usize>, usize), n: i64, dd: i64| -> (Vec<usize>, usize) {
        let (w, j) = p;
        match dynamics {
            Dynamics::Identity => (((-dd + 1)..=0).map(|c| at(w, c)).collect(), *j),
            Dynamics::Shift => {
                let mut f = *j;
                for s in 1..=n {
                    f = inverse[at(w, kappa + s)][f];
                }
                (((-dd + 1 + n)..=n).map(|c| at(w, c)).collect(), f)
            }
        }
    };
    let base_label = |p: &(Vec<usize>, usize), n: i64| -> Vec<usize> {
        match dynamics {
            Dynamics::Identity => ((-d + 1)..=0).map(|c| at(&p.0, c)).collect(),
            Dynamics::Shift => ((-d + 1 + n)..=n).map(|c| at(&p.0, c)).collect(),
        }
    };
    let mut out = CheckReport::new("filtration");
    let b_full: Vec<_> = points.iter().map(|p| label(p, 0, d)).collect();
    let b_short: Vec<_> = points.iter().map(|p| label(p, 0, d - 1)).collect();
    let tb: Vec<_> = points.iter().map(|p| label(p, 1, d)).collect();
    let inclusion = refines(&tb, &b_short);
    let strict = !refines(&b_full, &tb);
    out.record(
        "a_TB_refines_B",
        inclusion && strict,
        format!(
            "B^(D-1) inside TB^(D): {inclusion}; TB^(D) not inside B^(D): {strict} ({} vs {} classes)",
            class_count(&tb),
            class_count(&b_full)
        ),
    );
    // the fiber coordinate of T^n B reads x_{kappa+1..kappa+n}; inside the
    // truncated window only while n <= D + kappa
    let reach = d + kappa;
    let mut b_ok = true;
    for n in 1..=reach {
        let tn: Vec<_> = points.iter().map(|p| label(p, n, d)).collect();
        let lifted: Vec<_> = points.iter().map(|p| (base_label(p, n), p.1)).collect();
        b_ok &= refines(&tn, &lifted) && refines(&lifted, &tn);
    }
    out.record("b_TnB_is_lift", b_ok, format!("T^n B = T_o^n B_o x P(F) for n = 1..{reach}"));
    let joined: Vec<Vec<(Vec<usize>, usize)>> =
        points.iter().map(|p| (0..=d).map(|n| label(p, n, d)).collect()).collect();
    let separated = class_count(&joined) == points.len();
    out.record(
        "c_join_recovers_all",
        separated,
        format!("{} join classes for {} states", class_count(&joined), points.len()),
    );
    Ok(out)
}

/// Decomposes the quotient and relabels its exactness certificates as
/// K-mixing certificates for the two-sided system.
pub fn decompose_k(ts: &TwoSidedSymbolicSystem, action: &KeyedAction) -> Result<(DecompositionReport, QuotientResult)> {
    let q = build_quotient(ts, action)?;
    let mut report = decompose(&q.quotient)?;
    certify_exactness(&mut report, &q.quotient, 1e-9, 10_000)?;
    for comp in &mut report.components {
        for cert in &mut comp.certificates {
            *cert = Certificate {
                kind: "k_mixing_via_quotient_exactness".into(),
                ..cert.clone()
            };
        }
    }
    Ok((report, q))
}

/// Atom shapes projected to `(x_0, fiber)`, for comparisons across depths.
pub fn present_projection(report: &DecompositionReport, q: &QuotientResult) -> Vec<(Option<usize>, Vec<BTreeSet<(usize, usize)>>)> {
    let mut out: Vec<_> = report
        .components
        .iter()
        .map(|c| {
            let atoms = c
                .atoms
                .iter()
                .map(|a| {
                    a.index
                        .iter()
                        .map(|&s| (q.words[q.quotient.cell_of(s)][0], q.quotient.fiber_idx(s)))
                        .collect()
                })
                .collect();
            (c.kind.period(), atoms)
        })
        .collect();
    out.sort();
    out
}

impl QuotientResult {
    pub fn summary(&self, key_coordinate: i64) -> QuotientSummary {
        QuotientSummary {
            depth: self.depth_used,
            class_count: self.words.len(),
            key_coordinate,
            checks: self.checks.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::ComponentKind;
    use crate::rational::{q, qi};

    fn full(n: usize, depth: usize) -> TwoSidedSymbolicSystem {
        TwoSidedSymbolicSystem::new(SymbolicBaseSystem::full_shift(n), depth).unwrap()
    }

    fn maps(m: Vec<Vec<usize>>) -> KeyedAction {
        KeyedAction::present(FiberAction::bijective(m))
    }

    #[test]
    fn depth_three_quotient_of_full_shift() {
        let swap = maps(vec![vec![1, 0], vec![1, 0]]);
        let qr = build_quotient(&full(2, 3), &swap).unwrap();
        assert_eq!(qr.words.len(), 8);
        assert!(qr.checks.passed, "{:?}", qr.checks.failures().collect::<Vec<_>>());
        for (i, row) in qr.quotient.base.transition.iter().enumerate() {
            let nz: Vec<&Q> = row.iter().filter(|p| !p.is_zero()).collect();
            assert_eq!(nz, vec![&q(1, 2), &q(1, 2)], "word {i}");
        }
        assert!(qr.quotient.base.cell_measure.iter().all(|m| *m == q(1, 8)));
        let FiberAction::Maps { maps, .. } = &qr.quotient.action else { panic!() };
        assert!(maps.iter().all(|m| *m == vec![1, 0]));
    }

    #[test]
    fn quotient_decomposition_does_not_depend_on_depth() {
        let parity = maps(vec![vec![1, 0], vec![1, 0]]);
        let (r1, q1) = decompose_k(&full(2, 1), &parity).unwrap();
        let (r4, q4) = decompose_k(&full(2, 4), &parity).unwrap();
        assert_eq!(present_projection(&r1, &q1), present_projection(&r4, &q4));
    }

    #[test]
    fn future_key_is_rejected() {
        let a = KeyedAction { action: FiberAction::bijective(vec![vec![1, 0], vec![0, 1]]), coordinate: 1 };
        assert!(matches!(build_quotient(&full(2, 3), &a), Err(Error::NotBMeasurable(_))));
    }

    #[test]
    fn past_key_needs_enough_depth() {
        let a = KeyedAction { action: FiberAction::bijective(vec![vec![1, 0], vec![0, 1]]), coordinate: -2 };
        assert!(matches!(build_quotient(&full(2, 2), &a), Err(Error::Quotient(_))));
        let q = build_quotient(&full(2, 3), &a).unwrap();
        assert!(q.checks.passed);
    }

    #[test]
    fn filtration_holds_for_the_shift() {
        for depth in 1..=3 {
            let a = maps(vec![vec![1, 0, 2], vec![0, 2, 1]]);
            let r = check_filtration_inclusions(&full(2, depth), &a, depth, Dynamics::Shift).unwrap();
            assert!(r.passed, "depth {depth}: {:?}", r.failures().collect::<Vec<_>>());
        }
    }

    #[test]
    fn filtration_holds_for_a_past_key() {
        for depth in 2..=4 {
            let a = KeyedAction { coordinate: -1, ..maps(vec![vec![1, 0], vec![0, 1]]) };
            let r = check_filtration_inclusions(&full(2, depth), &a, depth, Dynamics::Shift).unwrap();
            assert!(r.passed, "depth {depth}: {:?}", r.failures().collect::<Vec<_>>());
        }
    }

    #[test]
    fn identity_dynamics_breaks_strict_refinement() {
        let a = maps(vec![vec![1, 0], vec![1, 0]]);
        let r = check_filtration_inclusions(&full(2, 3), &a, 3, Dynamics::Identity).unwrap();
        let failed: Vec<&str> = r.failures().map(|f| f.check.as_str()).collect();
        assert!(failed.contains(&"a_TB_refines_B"));
    }

    #[test]
    fn parity_quotient_has_two_level_atoms() {
        let (r, q) = decompose_k(&full(2, 3), &maps(vec![vec![1, 0], vec![1, 0]])).unwrap();
        assert_eq!(r.components.len(), 1);
        assert_eq!(r.components[0].kind, ComponentKind::Cycle { period: 2 });
        for atom in &r.components[0].atoms {
            let levels: BTreeSet<usize> = atom.index.iter().map(|&s| q.quotient.fiber_idx(s)).collect();
            assert_eq!(levels.len(), 1);
        }
        assert!(r.components[0].certificates.iter().all(|c| c.kind == "k_mixing_via_quotient_exactness"));
    }

    #[test]
    fn identity_action_gives_level_components() {
        let (r, _) = decompose_k(&full(2, 2), &maps(vec![vec![0, 1, 2], vec![0, 1, 2]])).unwrap();
        assert_eq!(r.components.len(), 3);
        assert!(r.components.iter().all(|c| c.kind == ComponentKind::Cycle { period: 1 }));
    }

    #[test]
    fn reducible_two_sided_base_projects_to_base_atoms() {
        let h = q(1, 2);
        let z = qi(0);
        let t = vec![
            vec![h.clone(), h.clone(), z.clone(), z.clone()],
            vec![h.clone(), h.clone(), z.clone(), z.clone()],
            vec![z.clone(), z.clone(), h.clone(), h.clone()],
            vec![z.clone(), z, h.clone(), h],
        ];
        let base = SymbolicBaseSystem::new(
            (0..4).map(crate::symbolic_base::cell_name).collect(),
            t,
            vec![q(1, 4); 4],
            None,
        )
        .unwrap();
        let ts = TwoSidedSymbolicSystem::new(base.clone(), 2).unwrap();
        let (r, q) = decompose_k(&ts, &maps(vec![vec![1, 0]; 4])).unwrap();
        let base_atoms = base.tail_structure().atoms();
        assert_eq!(r.components.len(), 2);
        for c in &r.components {
            for a in &c.atoms {
                let present: Vec<usize> = a
                    .index
                    .iter()
                    .map(|&s| q.words[q.quotient.cell_of(s)][0])
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                assert!(base_atoms.contains(&present));
            }
        }
    }
}
