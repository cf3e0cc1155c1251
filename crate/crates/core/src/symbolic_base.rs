//! The base system: a finite Markov presentation with exact weights, and an
//! optional piecewise-linear interval map realizing it pointwise.

use crate::check::CheckReport;
use crate::error::{Error, Result};
use crate::graph;
use crate::rational::{fmt_q, q, qi, to_f64, Q};
use num_traits::{One, Signed, Zero};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicBaseSystem {
    pub cells: Vec<String>,
    /// Row-stochastic: `transition[c][c']` is the conditional mass flowing
    /// from cell `c` to cell `c'` in one step.
    pub transition: Vec<Vec<Q>>,
    pub cell_measure: Vec<Q>,
    pub total_measure: Q,
    pub measure_preserving: bool,
}

impl SymbolicBaseSystem {
    /// Builds a base system. Only the shape is checked here; invariants are
    /// checked by [`validate_base`]. When `measure_preserving` is `None` it
    /// is set to whether `cell_measure` is stationary.
    pub fn new(
        cells: Vec<String>,
        transition: Vec<Vec<Q>>,
        cell_measure: Vec<Q>,
        measure_preserving: Option<bool>,
    ) -> Result<Self> {
        let n = cells.len();
        let mut bad = Vec::new();
        if n == 0 {
            bad.push("no cells".to_string());
        }
        if transition.len() != n {
            bad.push(format!("transition has {} rows for {n} cells", transition.len()));
        }
        for (r, row) in transition.iter().enumerate() {
            if row.len() != n {
                bad.push(format!("transition[{r}] has {} entries for {n} cells", row.len()));
            }
        }
        if cell_measure.len() != n {
            bad.push(format!("cell_measure has {} entries for {n} cells", cell_measure.len()));
        }
        if !bad.is_empty() {
            return Err(Error::InvalidBase(bad));
        }
        let total_measure = cell_measure.iter().fold(Q::zero(), |a, b| a + b);
        let mut base = SymbolicBaseSystem {
            cells,
            transition,
            cell_measure,
            total_measure,
            measure_preserving: false,
        };
        base.measure_preserving = measure_preserving.unwrap_or_else(|| base.is_stationary());
        Ok(base)
    }

    /// Full shift on `n` cells with uniform weights and uniform measure.
    pub fn full_shift(n: usize) -> Self {
        let cells = (0..n).map(cell_name).collect();
        let w = q(1, n as i64);
        Self::new(cells, vec![vec![w.clone(); n]; n], vec![w; n], Some(true)).expect("well-formed")
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Adjacency lists of positive-weight transitions.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        self.transition
            .iter()
            .map(|row| (0..row.len()).filter(|&c| row[c].is_positive()).collect())
            .collect()
    }

    /// `cell_measure · transition`.
    pub fn push_measure(&self) -> Vec<Q> {
        let n = self.len();
        (0..n)
            .map(|t| {
                (0..n).fold(Q::zero(), |acc, c| acc + &self.cell_measure[c] * &self.transition[c][t])
            })
            .collect()
    }

    pub fn is_stationary(&self) -> bool {
        self.push_measure() == self.cell_measure
    }

    pub fn measure_of(&self, cells: &[usize]) -> Q {
        cells.iter().fold(Q::zero(), |a, &c| a + &self.cell_measure[c])
    }

    /// Closed classes of the transition graph with their cyclic classes, which
    /// are the atoms of the base tail partition; cells outside all closed
    /// classes are transient.
    pub fn tail_structure(&self) -> BaseTail {
        let adj = self.adjacency();
        let comps = graph::sccs(&adj);
        let of = graph::membership(self.len(), &comps);
        let leaks = vec![false; self.len()];
        let mut classes = Vec::new();
        let mut transient = Vec::new();
        for comp in &comps {
            if graph::is_closed(comp, &adj, &of, &leaks) && graph::has_cycle(comp, &adj) {
                let (period, cyclic) = graph::cyclic_classes(comp, &adj, &of);
                classes.push(BaseClass { cells: comp.clone(), period, cyclic });
            } else {
                transient.extend(comp.iter().copied());
            }
        }
        transient.sort_unstable();
        BaseTail { classes, transient }
    }
}

pub(crate) fn cell_name(i: usize) -> String {
    let letters = b"abcdefghijklmnopqrstuvwxyz";
    if i < letters.len() {
        (letters[i] as char).to_string()
    } else {
        format!("c{i}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaseClass {
    pub cells: Vec<usize>,
    pub period: usize,
    /// Cyclic classes, class 0 containing the smallest cell.
    pub cyclic: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaseTail {
    pub classes: Vec<BaseClass>,
    pub transient: Vec<usize>,
}

impl BaseTail {
    /// Base atoms in canonical order: by class, then by cyclic index.
    pub fn atoms(&self) -> Vec<Vec<usize>> {
        self.classes.iter().flat_map(|c| c.cyclic.iter().cloned()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaseValidation {
    pub report: CheckReport,
    pub irreducible: bool,
    pub closed_classes: usize,
    pub period: Option<usize>,
    pub exactness_candidate: bool,
    pub tail: BaseTail,
}

/// Checks the base invariants and classifies the transition graph.
pub fn validate_base(base: &SymbolicBaseSystem) -> Result<BaseValidation> {
    let mut report = CheckReport::new("validate_base");
    let mut bad = Vec::new();
    for (r, row) in base.transition.iter().enumerate() {
        for (c, w) in row.iter().enumerate() {
            if w.is_negative() {
                bad.push(format!("transition[{r}][{c}] = {} is negative", fmt_q(w)));
            }
        }
        let sum = row.iter().fold(Q::zero(), |a, b| a + b);
        if !sum.is_one() {
            bad.push(format!("transition[{r}] sums to {}", fmt_q(&sum)));
        }
    }
    for (c, m) in base.cell_measure.iter().enumerate() {
        if !m.is_positive() {
            bad.push(format!("cell_measure[{c}] = {} is not positive", fmt_q(m)));
        }
    }
    if base.measure_preserving && !base.is_stationary() {
        bad.push("declared measure preserving but cell_measure is not stationary".into());
    }
    if !bad.is_empty() {
        return Err(Error::InvalidBase(bad));
    }
    report.pass("row_sums", "every transition row sums to 1");
    report.pass("positive_measure", "every cell measure is positive");
    report.pass(
        "stationarity",
        if base.measure_preserving { "cell_measure is stationary" } else { "not declared measure preserving" },
    );

    let tail = base.tail_structure();
    let irreducible = tail.classes.len() == 1 && tail.transient.is_empty();
    let period = irreducible.then(|| tail.classes[0].period);
    let exactness_candidate = period == Some(1);
    report.pass(
        "classification",
        format!(
            "{} closed class(es), {} transient cell(s), irreducible={irreducible}, period={period:?}",
            tail.classes.len(),
            tail.transient.len()
        ),
    );
    Ok(BaseValidation {
        report,
        irreducible,
        closed_classes: tail.classes.len(),
        period,
        exactness_candidate,
        tail,
    })
}

/// An affine Markov interval map on `[0,1)` realizing a base system.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinearRealization {
    /// `breakpoints[c]..breakpoints[c+1]` is cell `c`; first is 0, last is 1.
    pub breakpoints: Vec<Q>,
    /// Inclusive range of cells covered by the image of each branch.
    pub branch_images: Vec<(usize, usize)>,
    pub slopes: Vec<Q>,
}

impl PiecewiseLinearRealization {
    /// From cell lengths (normalized to total length 1) and branch images.
    pub fn new(lengths: &[Q], branch_images: Vec<(usize, usize)>) -> Result<Self> {
        let n = lengths.len();
        let mut bad = Vec::new();
        if branch_images.len() != n {
            bad.push(format!("{} branch images for {n} cells", branch_images.len()));
        }
        if lengths.iter().any(|l| !l.is_positive()) {
            bad.push("cell lengths must be positive".into());
        }
        for (c, &(lo, hi)) in branch_images.iter().enumerate() {
            if lo > hi || hi >= n {
                bad.push(format!("branch image of cell {c} is not a cell range: [{lo},{hi}]"));
            }
        }
        if !bad.is_empty() {
            return Err(Error::InvalidBase(bad));
        }
        let total = lengths.iter().fold(Q::zero(), |a, b| a + b);
        let mut breakpoints = vec![Q::zero()];
        for l in lengths {
            let next = breakpoints.last().unwrap() + l / &total;
            breakpoints.push(next);
        }
        let len = |c: usize| &breakpoints[c + 1] - &breakpoints[c];
        let slopes = branch_images
            .iter()
            .enumerate()
            .map(|(c, &(lo, hi))| (&breakpoints[hi + 1] - &breakpoints[lo]) / len(c))
            .collect();
        Ok(PiecewiseLinearRealization { breakpoints, branch_images, slopes })
    }

    /// Doubling map `x -> 2x mod 1` on two cells.
    pub fn doubling() -> Self {
        Self::new(&[q(1, 2), q(1, 2)], vec![(0, 1), (0, 1)]).expect("well-formed")
    }

    pub fn cell_len(&self, c: usize) -> Q {
        &self.breakpoints[c + 1] - &self.breakpoints[c]
    }

    /// Transition matrix induced by Lebesgue measure: an affine branch
    /// spreads cell `c` uniformly over its image.
    pub fn induced_transition(&self) -> Vec<Vec<Q>> {
        let n = self.slopes.len();
        (0..n)
            .map(|c| {
                let (lo, hi) = self.branch_images[c];
                let img = &self.breakpoints[hi + 1] - &self.breakpoints[lo];
                (0..n)
                    .map(|t| if (lo..=hi).contains(&t) { self.cell_len(t) / &img } else { Q::zero() })
                    .collect()
            })
            .collect()
    }

    /// The matching symbolic base with cell measures equal to cell lengths.
    pub fn to_base(&self) -> Result<SymbolicBaseSystem> {
        let n = self.slopes.len();
        SymbolicBaseSystem::new(
            (0..n).map(cell_name).collect(),
            self.induced_transition(),
            (0..n).map(|c| self.cell_len(c)).collect(),
            None,
        )
    }

    pub fn cell_of(&self, x: f64) -> Result<usize> {
        if !(0.0..1.0).contains(&x) {
            return Err(Error::OutOfDomain { x });
        }
        let bps: Vec<f64> = self.breakpoints.iter().map(to_f64).collect();
        if bps.iter().any(|&b| b == x) {
            return Err(Error::SingularPoint { x });
        }
        Ok(bps.partition_point(|&b| b < x) - 1)
    }
}

/// One application of the base map: `(T_o(x), cell of x)`.
pub fn step_base(realization: &PiecewiseLinearRealization, x: f64) -> Result<(f64, usize)> {
    let c = realization.cell_of(x)?;
    let (lo, _) = realization.branch_images[c];
    let start = to_f64(&realization.breakpoints[c]);
    let target = to_f64(&realization.breakpoints[lo]);
    let y = target + to_f64(&realization.slopes[c]) * (x - start);
    // Rounding at the top of the last branch.
    let y = if y >= 1.0 { y - 1.0 } else { y };
    Ok((y, c))
}

impl Default for SymbolicBaseSystem {
    fn default() -> Self {
        Self::full_shift(2)
    }
}

/// Two cells with forced alternation `a -> b -> a`.
pub fn two_cycle() -> SymbolicBaseSystem {
    SymbolicBaseSystem::new(
        vec!["a".into(), "b".into()],
        vec![vec![qi(0), qi(1)], vec![qi(1), qi(0)]],
        vec![q(1, 2), q(1, 2)],
        Some(true),
    )
    .expect("well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block_base() -> SymbolicBaseSystem {
        let h = q(1, 2);
        let z = Q::zero();
        SymbolicBaseSystem::new(
            ["a", "b", "c", "d"].map(String::from).to_vec(),
            vec![
                vec![h.clone(), h.clone(), z.clone(), z.clone()],
                vec![h.clone(), h.clone(), z.clone(), z.clone()],
                vec![z.clone(), z.clone(), h.clone(), h.clone()],
                vec![z.clone(), z, h.clone(), h],
            ],
            vec![q(1, 4); 4],
            None,
        )
        .unwrap()
    }

    #[test]
    fn full_shift_is_exactness_candidate() {
        let v = validate_base(&SymbolicBaseSystem::full_shift(2)).unwrap();
        assert!(v.irreducible);
        assert_eq!(v.period, Some(1));
        assert!(v.exactness_candidate);
    }

    #[test]
    fn bipartite_two_cycle_has_period_two() {
        let v = validate_base(&two_cycle()).unwrap();
        assert!(v.irreducible);
        assert_eq!(v.period, Some(2));
        assert!(!v.exactness_candidate);
    }

    #[test]
    fn block_matrix_is_reducible_with_two_closed_classes() {
        let v = validate_base(&block_base()).unwrap();
        assert!(!v.irreducible);
        assert_eq!(v.closed_classes, 2);
        assert_eq!(v.tail.classes[0].cells, vec![0, 1]);
        assert_eq!(v.tail.classes[1].cells, vec![2, 3]);
        assert!(!v.exactness_candidate);
    }

    #[test]
    fn malformed_rows_and_measures_are_listed() {
        let base = SymbolicBaseSystem::new(
            vec!["a".into(), "b".into()],
            vec![vec![q(1, 2), q(1, 3)], vec![q(1, 2), q(1, 2)]],
            vec![qi(0), qi(1)],
            Some(false),
        )
        .unwrap();
        match validate_base(&base) {
            Err(Error::InvalidBase(list)) => {
                assert!(list.iter().any(|m| m.contains("transition[0] sums to 5/6")));
                assert!(list.iter().any(|m| m.contains("cell_measure[0]")));
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn validation_is_deterministic() {
        let b = block_base();
        assert_eq!(validate_base(&b).unwrap(), validate_base(&b).unwrap());
    }

    #[test]
    fn stationary_measure_pushes_forward_exactly() {
        let b = SymbolicBaseSystem::full_shift(3);
        assert_eq!(b.push_measure(), b.cell_measure);
        assert!(b.measure_preserving);
    }

    #[test]
    fn doubling_map_steps() {
        let r = PiecewiseLinearRealization::doubling();
        let (y, c) = step_base(&r, 0.3).unwrap();
        assert!((y - 0.6).abs() < 1e-15);
        assert_eq!(c, 0);
        let (y, c) = step_base(&r, 0.75).unwrap();
        assert!((y - 0.5).abs() < 1e-15);
        assert_eq!(c, 1);
        assert_eq!(step_base(&r, 0.5), Err(Error::SingularPoint { x: 0.5 }));
    }

    #[test]
    fn realization_matches_its_base() {
        let r = PiecewiseLinearRealization::new(&[q(1, 3), q(2, 3)], vec![(1, 1), (0, 1)]).unwrap();
        let base = r.to_base().unwrap();
        assert_eq!(base.transition, vec![vec![qi(0), qi(1)], vec![q(1, 3), q(2, 3)]]);
        assert_eq!(r.slopes, vec![q(2, 1), q(3, 2)]);
        validate_base(&base).unwrap();
    }

    fn empirical_agreement(r: &PiecewiseLinearRealization, seed: u64) {
        let base = r.to_base().unwrap();
        let n = base.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = 100_000usize;
        let mut counts = vec![vec![0usize; n]; n];
        let mut from = vec![0usize; n];
        let bps: Vec<f64> = r.breakpoints.iter().map(to_f64).collect();
        for _ in 0..samples {
            // Lebesgue-distributed start.
            let x: f64 = rng.random();
            let Ok((y, c)) = step_base(r, x) else { continue };
            let Ok(t) = r.cell_of(y) else { continue };
            counts[c][t] += 1;
            from[c] += 1;
        }
        assert!(bps.len() == n + 1);
        for c in 0..n {
            for t in 0..n {
                let p = to_f64(&base.transition[c][t]);
                let freq = counts[c][t] as f64 / from[c] as f64;
                let se = (p * (1.0 - p) / from[c] as f64).sqrt().max(1e-12);
                assert!((freq - p).abs() <= 4.0 * se, "entry ({c},{t}): {freq} vs {p}");
            }
        }
    }

    #[test]
    fn empirical_transitions_match_symbolic_matrix() {
        empirical_agreement(&PiecewiseLinearRealization::doubling(), 1);
        let r = PiecewiseLinearRealization::new(&[q(1, 3), q(1, 3), q(1, 3)], vec![(1, 2), (0, 2), (0, 1)])
            .unwrap();
        empirical_agreement(&r, 2);
    }
}
