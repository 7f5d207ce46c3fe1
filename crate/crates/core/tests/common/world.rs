#![allow(dead_code)]

//! Random valid decompositions with all-pairs distance tables computed by
//! Floyd-Warshall over the explicit edge list.

use collabtrace_core::decomposition::{Decomposition, DependencyKind, DistanceMode, NodeRecord, TemporalDependency};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct World {
    pub d: Decomposition,
    pub ids: Vec<String>,
    /// Parent index of every node, `None` for the root.
    pub parent_of: Vec<Option<usize>>,
    /// Sibling groups, one per internal node.
    pub groups: Vec<Vec<usize>>,
    /// All-pairs distances: hierarchy only, and with dependency edges.
    pub tree: Vec<Vec<u32>>,
    pub with_deps: Vec<Vec<u32>>,
}

impl World {
    pub fn ix(&self, id: &str) -> usize {
        self.ids.iter().position(|x| x == id).unwrap()
    }

    pub fn dist(&self, a: &str, b: &str, mode: DistanceMode) -> u32 {
        let m = match mode {
            DistanceMode::Hierarchy => &self.tree,
            DistanceMode::HierarchyAndDependencies => &self.with_deps,
        };
        m[self.ix(a)][self.ix(b)]
    }
}

pub fn floyd(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<u32>> {
    const INF: u32 = u32::MAX / 4;
    let mut d = vec![vec![INF; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in edges {
        d[a][b] = 1;
        d[b][a] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

pub fn random_world(rng: &mut ChaCha8Rng) -> World {
    let mut records = vec![NodeRecord::new("R", "root", None)];
    let mut parent_of = vec![None];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let max_depth = rng.random_range(1..=4);
    let mut frontier = vec![(0usize, 0usize)];
    while let Some((node, depth)) = frontier.pop() {
        let expand = node == 0 || (depth < max_depth && rng.random_bool(0.45));
        if !expand {
            continue;
        }
        let k = rng.random_range(2..=4);
        let mut group = Vec::new();
        for _ in 0..k {
            let i = records.len();
            let id = format!("N{i}");
            records.push(NodeRecord::new(&id, &id, Some(&records[node].id.clone())));
            parent_of.push(Some(node));
            group.push(i);
            frontier.push((i, depth + 1));
        }
        groups.push(group);
    }
    let mut deps = Vec::new();
    let mut dep_edges = Vec::new();
    for g in &groups {
        for a in 0..g.len() {
            for b in a + 1..g.len() {
                if rng.random_bool(0.2) {
                    // must-dependencies only run forward, so they stay acyclic
                    let (kind, from, to) = if rng.random_bool(0.5) {
                        (DependencyKind::Must, g[a], g[b])
                    } else {
                        (DependencyKind::Equivocal, g[b], g[a])
                    };
                    deps.push(TemporalDependency {
                        from_id: records[from].id.clone(),
                        to_id: records[to].id.clone(),
                        kind,
                    });
                    dep_edges.push((from, to));
                }
            }
        }
    }
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let tree_edges: Vec<(usize, usize)> = parent_of
        .iter()
        .enumerate()
        .filter_map(|(c, p)| p.map(|p| (c, p)))
        .collect();
    let all_edges: Vec<(usize, usize)> = tree_edges.iter().chain(&dep_edges).copied().collect();
    let d = Decomposition::from_parts("R", records, deps).unwrap();
    assert!(d.validate().is_valid());
    World {
        tree: floyd(ids.len(), &tree_edges),
        with_deps: floyd(ids.len(), &all_edges),
        d,
        ids,
        parent_of,
        groups,
    }
}
