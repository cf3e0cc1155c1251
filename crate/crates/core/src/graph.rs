//! Strongly connected components, closed classes and cyclic classes of
//! finite directed graphs given as adjacency lists.

use num_integer::Integer;
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use std::collections::VecDeque;

/// Strongly connected components, each sorted, ordered by smallest member.
pub fn sccs(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut g = DiGraph::<(), ()>::with_capacity(adj.len(), 0);
    let nodes: Vec<_> = (0..adj.len()).map(|_| g.add_node(())).collect();
    for (u, outs) in adj.iter().enumerate() {
        for &v in outs {
            g.add_edge(nodes[u], nodes[v], ());
        }
    }
    let mut comps: Vec<Vec<usize>> = tarjan_scc(&g)
        .into_iter()
        .map(|c| {
            let mut c: Vec<usize> = c.into_iter().map(|n| n.index()).collect();
            c.sort_unstable();
            c
        })
        .collect();
    comps.sort_by_key(|c| c[0]);
    comps
}

/// Per-node component index for a list of components.
pub fn membership(n: usize, comps: &[Vec<usize>]) -> Vec<usize> {
    let mut of = vec![usize::MAX; n];
    for (k, c) in comps.iter().enumerate() {
        for &v in c {
            of[v] = k;
        }
    }
    of
}

/// Whether a component has no edge leaving it. `leaks` marks nodes that have
/// an edge leaving the graph (e.g. out of a finite window); such nodes are
/// never part of a closed class.
pub fn is_closed(comp: &[usize], adj: &[Vec<usize>], of: &[usize], leaks: &[bool]) -> bool {
    let id = of[comp[0]];
    comp.iter().all(|&u| !leaks[u] && adj[u].iter().all(|&v| of[v] == id))
}

/// A component carries a cycle iff it has more than one node or a self-loop.
pub fn has_cycle(comp: &[usize], adj: &[Vec<usize>]) -> bool {
    comp.len() > 1 || adj[comp[0]].contains(&comp[0])
}

/// Period of a strongly connected component and the cyclic class of each
/// member: BFS levels from the smallest member, period = gcd over internal
/// edges of `level(u) + 1 - level(v)`. Returns `(period, classes)` where
/// `classes[j]` is the sorted list of members with level = j (mod period),
/// class 0 containing the smallest member. Period 0 means no cycle.
pub fn cyclic_classes(comp: &[usize], adj: &[Vec<usize>], of: &[usize]) -> (usize, Vec<Vec<usize>>) {
    let id = of[comp[0]];
    let root = comp[0];
    let mut level = std::collections::HashMap::with_capacity(comp.len());
    level.insert(root, 0i64);
    let mut queue = VecDeque::from([root]);
    let mut g: i64 = 0;
    while let Some(u) = queue.pop_front() {
        let lu = level[&u];
        for &v in &adj[u] {
            if of[v] != id {
                continue;
            }
            match level.get(&v) {
                Some(&lv) => g = g.gcd(&(lu + 1 - lv)),
                None => {
                    level.insert(v, lu + 1);
                    queue.push_back(v);
                }
            }
        }
    }
    let period = g.unsigned_abs() as usize;
    if period == 0 {
        return (0, vec![comp.to_vec()]);
    }
    let mut classes = vec![Vec::new(); period];
    for &v in comp {
        classes[(level[&v].rem_euclid(period as i64)) as usize].push(v);
    }
    (period, classes)
}
