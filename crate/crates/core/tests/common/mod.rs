//! Generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use num_integer::Integer;
use num_traits::{One, Zero};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet};
use tailatlas::fiber_extension::{FiberAction, FiberSet, ProductSystem};
use tailatlas::rational::{q, stationary, to_f64, Q};
use tailatlas::symbolic_base::SymbolicBaseSystem;
use tailatlas::{build_product, DecompositionReport};

/// A finite configuration: base transition, base measure and per-cell permutations.
#[derive(Debug, Clone)]
pub struct FiniteConfig {
    pub transition: Vec<Vec<Q>>,
    pub measure: Vec<Q>,
    pub maps: Vec<Vec<usize>>,
}

impl FiniteConfig {
    pub fn base(&self) -> SymbolicBaseSystem {
        let cells = (0..self.transition.len()).map(|c| format!("c{c}")).collect();
        SymbolicBaseSystem::new(cells, self.transition.clone(), self.measure.clone(), None).unwrap()
    }

    pub fn product(&self) -> ProductSystem {
        let fiber = FiberSet::Finite { size: self.maps[0].len() };
        build_product(&self.base(), &fiber, &FiberAction::bijective(self.maps.clone())).unwrap()
    }

    pub fn fiber_size(&self) -> usize {
        self.maps[0].len()
    }
}

pub fn bool_primitive(adj: &[Vec<bool>]) -> bool {
    let n = adj.len();
    let mut p = adj.to_vec();
    for _ in 0..(n - 1) * (n - 1) + 1 {
        if p.iter().all(|r| r.iter().all(|&x| x)) {
            return true;
        }
        p = bool_mul(&p, adj);
    }
    p.iter().all(|r| r.iter().all(|&x| x))
}

pub fn bool_mul(a: &[Vec<bool>], b: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let n = a.len();
    let mut out = vec![vec![false; n]; n];
    for i in 0..n {
        for k in 0..n {
            if a[i][k] {
                for j in 0..n {
                    out[i][j] |= b[k][j];
                }
            }
        }
    }
    out
}

fn weights(pattern: &[Vec<bool>], rng: &mut impl Rng) -> Vec<Vec<Q>> {
    pattern
        .iter()
        .map(|row| {
            let w: Vec<i64> = row.iter().map(|&b| if b { rng.random_range(1..=4) } else { 0 }).collect();
            let s: i64 = w.iter().sum();
            w.iter().map(|&x| q(x, s)).collect()
        })
        .collect()
}

/// Irreducible aperiodic transition on `n` cells.
pub fn primitive_transition(n: usize, rng: &mut impl Rng) -> Vec<Vec<Q>> {
    loop {
        let density = rng.random_range(0.3..0.9);
        let pattern: Vec<Vec<bool>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>() < density).collect()).collect();
        if bool_primitive(&pattern) {
            return weights(&pattern, rng);
        }
    }
}

pub fn random_perm(k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..k).collect();
    p.shuffle(rng);
    p
}

/// Irreducible aperiodic base with `|C| <= max_cells`, bijective cell-constant
/// action with `|F| <= max_fiber`, base measure stationary.
pub fn random_finite(rng: &mut impl Rng, max_cells: usize, max_fiber: usize) -> FiniteConfig {
    random_finite_from(rng, 1, max_cells, max_fiber)
}

pub fn random_finite_from(rng: &mut impl Rng, min_cells: usize, max_cells: usize, max_fiber: usize) -> FiniteConfig {
    let n = rng.random_range(min_cells..=max_cells);
    let k = rng.random_range(1..=max_fiber);
    let transition = primitive_transition(n, rng);
    let measure = stationary(&transition, &Q::one()).unwrap();
    let maps = (0..n).map(|_| random_perm(k, rng)).collect();
    FiniteConfig { transition, measure, maps }
}

/// Block-diagonal base with 2 or 3 closed primitive classes and up to two
/// transient cells feeding them; uniform cell measure.
pub fn random_reducible(rng: &mut impl Rng) -> (FiniteConfig, Vec<Vec<usize>>) {
    let blocks: Vec<usize> = (0..rng.random_range(2..=3)).map(|_| rng.random_range(1..=3)).collect();
    let transient = rng.random_range(0..=2);
    let n: usize = blocks.iter().sum::<usize>() + transient;
    let mut t = vec![vec![Q::zero(); n]; n];
    let mut classes = Vec::new();
    let mut start = 0;
    for &b in &blocks {
        let sub = primitive_transition(b, rng);
        for i in 0..b {
            for j in 0..b {
                t[start + i][start + j] = sub[i][j].clone();
            }
        }
        classes.push((start..start + b).collect::<Vec<_>>());
        start += b;
    }
    for tc in start..n {
        let mut pattern = vec![false; n];
        pattern[rng.random_range(0..start)] = true;
        for p in pattern.iter_mut().take(tc + 1).skip(start) {
            *p = rng.random::<f64>() < 0.4;
        }
        let row = weights(&[pattern], rng).remove(0);
        t[tc] = row;
    }
    let k = rng.random_range(1..=4);
    let maps = (0..n).map(|_| random_perm(k, rng)).collect();
    (FiniteConfig { transition: t, measure: vec![q(1, n as i64); n], maps }, classes)
}

/// Product transition in floating point, state `c * k + i`.
pub fn product_matrix(cfg: &FiniteConfig) -> Vec<Vec<f64>> {
    let n = cfg.transition.len();
    let k = cfg.fiber_size();
    let mut m = vec![vec![0.0; n * k]; n * k];
    for c in 0..n {
        for c2 in 0..n {
            let p = to_f64(&cfg.transition[c][c2]);
            if p > 0.0 {
                for i in 0..k {
                    m[c * k + i][c2 * k + cfg.maps[c][i]] += p;
                }
            }
        }
    }
    m
}

pub fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let x = a[i][k];
            if x != 0.0 {
                for j in 0..n {
                    out[i][j] += x * b[k][j];
                }
            }
        }
    }
    out
}

pub fn mat_pow(a: &[Vec<f64>], mut e: usize) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut result: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let mut base = a.to_vec();
    while e > 0 {
        if e & 1 == 1 {
            result = mat_mul(&result, &base);
        }
        base = mat_mul(&base, &base);
        e >>= 1;
    }
    result
}

pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Period of every state: gcd of return times up to `2N`, from boolean powers.
pub fn state_periods(m: &[Vec<f64>]) -> Vec<usize> {
    let n = m.len();
    let adj: Vec<Vec<bool>> = m.iter().map(|r| r.iter().map(|&x| x > 0.0).collect()).collect();
    let mut p = adj.clone();
    let mut g = vec![0usize; n];
    for len in 1..=2 * n {
        for s in 0..n {
            if p[s][s] {
                g[s] = g[s].gcd(&len);
            }
        }
        p = bool_mul(&p, &adj);
    }
    g
}

/// Transfer-matrix equivalence classes: rows of `Q^n`, `Q = M^L` with `L` the
/// lcm of the state periods. `n` doubles until `Q^{2n}` agrees with `Q^n`
/// entrywise (at most `n = 2^13 < 10^4`); the partition is then read off by
/// total variation: below `tol` inside a class, above `1 - tol` across.
pub fn oracle_atoms(m: &[Vec<f64>], tol: f64) -> Option<(Vec<BTreeSet<usize>>, usize)> {
    let periods = state_periods(m);
    let l = periods.iter().fold(1usize, |a, &p| a.lcm(&p.max(1)));
    let n = m.len();
    let mut r = mat_pow(m, l);
    let mut power = 1;
    loop {
        let next = mat_mul(&r, &r);
        let gap = r.iter().zip(&next).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max);
        r = next;
        power *= 2;
        if gap < 1e-13 {
            break;
        }
        if power > 10_000 / 2 {
            return None;
        }
    }
    let mut classes: Vec<BTreeSet<usize>> = Vec::new();
    for s in 0..n {
        match classes.iter_mut().find(|cl| tv(&r[s], &r[*cl.iter().next().unwrap()]) < tol) {
            Some(cl) => {
                cl.insert(s);
            }
            None => classes.push(BTreeSet::from([s])),
        }
    }
    for (a, ca) in classes.iter().enumerate() {
        for &x in ca {
            if ca.iter().any(|&y| tv(&r[x], &r[y]) >= tol) {
                return None;
            }
            for cb in &classes[a + 1..] {
                if cb.iter().any(|&y| tv(&r[x], &r[y]) <= 1.0 - tol) {
                    return None;
                }
            }
        }
    }
    classes.sort();
    Some((classes, power * l))
}

pub fn graph_atoms(report: &DecompositionReport) -> Vec<BTreeSet<usize>> {
    let mut v: Vec<BTreeSet<usize>> = report
        .components
        .iter()
        .flat_map(|c| c.atoms.iter().map(|a| a.index.iter().copied().collect()))
        .collect();
    v.sort();
    v
}

/// One-step image of a state set under the raw definition.
pub fn image(cfg: &FiniteConfig, states: &BTreeSet<usize>) -> BTreeSet<usize> {
    let k = cfg.fiber_size();
    let mut out = BTreeSet::new();
    for &s in states {
        let (c, i) = (s / k, s % k);
        for (c2, p) in cfg.transition[c].iter().enumerate() {
            if !p.is_zero() {
                out.insert(c2 * k + cfg.maps[c][i]);
            }
        }
    }
    out
}

/// Fiber count per cell of a state set.
pub fn per_cell(k: usize, states: &BTreeSet<usize>) -> BTreeMap<usize, u64> {
    let mut m = BTreeMap::new();
    for &s in states {
        *m.entry(s / k).or_insert(0) += 1;
    }
    m
}

/// Closed classes of a base by reachability.
pub fn closed_classes(t: &[Vec<Q>]) -> Vec<BTreeSet<usize>> {
    let n = t.len();
    let mut reach: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| i == j || !t[i][j].is_zero()).collect()).collect();
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    let mut out: Vec<BTreeSet<usize>> = Vec::new();
    for i in 0..n {
        let closed = (0..n).all(|j| !reach[i][j] || reach[j][i]);
        if closed {
            let cl: BTreeSet<usize> = (0..n).filter(|&j| reach[i][j]).collect();
            if !out.contains(&cl) {
                out.push(cl);
            }
        }
    }
    out.sort();
    out
}

/// Exact stationarity of the lifted counting measure from the raw definition.
pub fn lifted_stationary(cfg: &FiniteConfig) -> bool {
    let n = cfg.transition.len();
    let k = cfg.fiber_size();
    let mut mass = vec![vec![Q::zero(); k]; n];
    for c in 0..n {
        for c2 in 0..n {
            for i in 0..k {
                mass[c2][cfg.maps[c][i]] += &cfg.measure[c] * &cfg.transition[c][c2];
            }
        }
    }
    (0..n).all(|c| mass[c].iter().all(|m| *m == cfg.measure[c]))
}
