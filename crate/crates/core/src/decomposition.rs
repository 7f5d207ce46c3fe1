//! Task decomposition: a rooted tree of subtasks plus temporal dependencies
//! between siblings.
//!
//! The decomposition is the coordinate system for every traversal metric:
//! distances between subtasks are path lengths over the hierarchy.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DecompositionError {
    #[error("failed to read decomposition: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed decomposition file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported decomposition format_version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("duplicate subtask id `{0}`")]
    DuplicateId(String),
    #[error("subtask `{node}` references missing parent `{parent}`")]
    DanglingParent { node: String, parent: String },
    #[error("dependency {from} -> {to} references a missing subtask")]
    DanglingDependency { from: String, to: String },
    #[error("dependency on `{0}` points at itself")]
    SelfDependency(String),
    #[error("root `{0}` is not a node of the decomposition")]
    MissingRoot(String),
    #[error("root `{0}` must not have a parent")]
    RootHasParent(String),
    #[error("parent links form a cycle through `{0}`")]
    ParentCycle(String),
    #[error("unknown subtask id `{0}`")]
    UnknownId(String),
    #[error("no path between `{0}` and `{1}`")]
    NoPath(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DependencyKind {
    Must,
    Equivocal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubtaskNode {
    pub id: String,
    pub label: String,
    pub parent_id: Option<String>,
    pub level: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalDependency {
    #[serde(rename = "from")]
    pub from_id: String,
    #[serde(rename = "to")]
    pub to_id: String,
    pub kind: DependencyKind,
}

/// One node as written in the decomposition file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
}

impl NodeRecord {
    pub fn new(id: &str, label: &str, parent_id: Option<&str>) -> Self {
        Self {
            id: id.to_string(),
            label: label.to_string(),
            parent_id: parent_id.map(str::to_string),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DecompositionFile {
    format_version: u32,
    root_id: String,
    nodes: Vec<NodeRecord>,
    #[serde(default)]
    dependencies: Vec<TemporalDependency>,
}

/// Whether temporal dependencies count as edges when measuring distance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    #[default]
    Hierarchy,
    HierarchyAndDependencies,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    root_id: String,
    nodes: Vec<SubtaskNode>,
    dependencies: Vec<TemporalDependency>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    depth: Vec<u32>,
    top: Vec<usize>,
}

impl PartialEq for Decomposition {
    fn eq(&self, other: &Self) -> bool {
        self.root_id == other.root_id && self.nodes == other.nodes && self.dependencies == other.dependencies
    }
}

pub fn load_decomposition<R: Read>(source: R) -> Result<Decomposition, DecompositionError> {
    let file: DecompositionFile = serde_json::from_reader(source)?;
    if file.format_version != FORMAT_VERSION {
        return Err(DecompositionError::UnsupportedVersion(file.format_version));
    }
    Decomposition::from_parts(&file.root_id, file.nodes, file.dependencies)
}

impl Decomposition {
    /// Builds a decomposition and checks referential integrity. Structural
    /// rule violations (single-child nodes, orphans, cross-group or cyclic
    /// dependencies) are left for [`Decomposition::validate`].
    pub fn from_parts(
        root_id: &str,
        records: Vec<NodeRecord>,
        dependencies: Vec<TemporalDependency>,
    ) -> Result<Self, DecompositionError> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(DecompositionError::DuplicateId(r.id.clone()));
            }
        }
        let root = *index
            .get(root_id)
            .ok_or_else(|| DecompositionError::MissingRoot(root_id.to_string()))?;
        if records[root].parent_id.is_some() {
            return Err(DecompositionError::RootHasParent(root_id.to_string()));
        }

        let mut parent = vec![None; records.len()];
        let mut children = vec![Vec::new(); records.len()];
        for (i, r) in records.iter().enumerate() {
            if let Some(p) = &r.parent_id {
                let pi = *index.get(p).ok_or_else(|| DecompositionError::DanglingParent {
                    node: r.id.clone(),
                    parent: p.clone(),
                })?;
                parent[i] = Some(pi);
                children[pi].push(i);
            }
        }
        for d in &dependencies {
            if !index.contains_key(&d.from_id) || !index.contains_key(&d.to_id) {
                return Err(DecompositionError::DanglingDependency {
                    from: d.from_id.clone(),
                    to: d.to_id.clone(),
                });
            }
            if d.from_id == d.to_id {
                return Err(DecompositionError::SelfDependency(d.from_id.clone()));
            }
        }

        // depth and top-most ancestor; a parent cycle never reaches a top
        let n = records.len();
        let mut depth = vec![u32::MAX; n];
        let mut top = vec![usize::MAX; n];
        for start in 0..n {
            let mut chain = Vec::new();
            let mut cur = start;
            while depth[cur] == u32::MAX {
                if chain.len() > n {
                    return Err(DecompositionError::ParentCycle(records[start].id.clone()));
                }
                chain.push(cur);
                match parent[cur] {
                    Some(p) => cur = p,
                    None => {
                        depth[cur] = 0;
                        top[cur] = cur;
                        chain.pop();
                        break;
                    }
                }
            }
            while let Some(c) = chain.pop() {
                let p = parent[c].expect("non-top nodes have parents");
                depth[c] = depth[p] + 1;
                top[c] = top[p];
            }
        }

        let nodes = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| SubtaskNode {
                id: r.id,
                label: r.label,
                parent_id: r.parent_id,
                level: depth[i],
            })
            .collect();

        Ok(Self {
            root_id: root_id.to_string(),
            nodes,
            dependencies,
            index,
            parent,
            children,
            depth,
            top,
        })
    }

    pub fn root_id(&self) -> &str {
        &self.root_id
    }

    pub fn nodes(&self) -> &[SubtaskNode] {
        &self.nodes
    }

    pub fn dependencies(&self) -> &[TemporalDependency] {
        &self.dependencies
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn node(&self, id: &str) -> Option<&SubtaskNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    fn idx(&self, id: &str) -> Result<usize, DecompositionError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| DecompositionError::UnknownId(id.to_string()))
    }

    pub fn children(&self, id: &str) -> Result<Vec<&str>, DecompositionError> {
        let i = self.idx(id)?;
        Ok(self.children[i].iter().map(|&c| self.nodes[c].id.as_str()).collect())
    }

    pub fn is_leaf(&self, id: &str) -> Result<bool, DecompositionError> {
        Ok(self.children[self.idx(id)?].is_empty())
    }

    pub fn leaves(&self) -> impl Iterator<Item = &SubtaskNode> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(i, _)| self.children[*i].is_empty())
            .map(|(_, n)| n)
    }

    /// Nodes one level below the root (the "phases").
    pub fn phases(&self) -> impl Iterator<Item = &SubtaskNode> {
        let root = self.index[&self.root_id];
        self.children[root].iter().map(|&c| &self.nodes[c])
    }

    /// Shortest path length over the hierarchy edges, treated as undirected.
    pub fn distance(&self, a: &str, b: &str) -> Result<u32, DecompositionError> {
        self.distance_with(a, b, DistanceMode::Hierarchy)
    }

    pub fn distance_with(&self, a: &str, b: &str, mode: DistanceMode) -> Result<u32, DecompositionError> {
        let ia = self.idx(a)?;
        let ib = self.idx(b)?;
        match mode {
            DistanceMode::Hierarchy => self
                .tree_distance(ia, ib)
                .ok_or_else(|| DecompositionError::NoPath(a.to_string(), b.to_string())),
            DistanceMode::HierarchyAndDependencies => self
                .bfs_distance(ia, ib)
                .ok_or_else(|| DecompositionError::NoPath(a.to_string(), b.to_string())),
        }
    }

    fn tree_distance(&self, mut a: usize, mut b: usize) -> Option<u32> {
        if self.top[a] != self.top[b] {
            return None;
        }
        let mut steps = 0;
        while self.depth[a] > self.depth[b] {
            a = self.parent[a]?;
            steps += 1;
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b]?;
            steps += 1;
        }
        while a != b {
            a = self.parent[a]?;
            b = self.parent[b]?;
            steps += 2;
        }
        Some(steps)
    }

    fn bfs_distance(&self, a: usize, b: usize) -> Option<u32> {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for (c, p) in self.parent.iter().enumerate() {
            if let Some(p) = *p {
                adj[c].push(p);
                adj[p].push(c);
            }
        }
        for d in &self.dependencies {
            let (f, t) = (self.index[&d.from_id], self.index[&d.to_id]);
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut dist = vec![u32::MAX; n];
        dist[a] = 0;
        let mut queue = VecDeque::from([a]);
        while let Some(u) = queue.pop_front() {
            if u == b {
                return Some(dist[u]);
            }
            for &v in &adj[u] {
                if dist[v] == u32::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        None
    }

    /// Checks the structural decomposition rules and reports every violation.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();

        for (i, node) in self.nodes.iter().enumerate() {
            if self.children[i].len() == 1 {
                violations.push(Violation::TooFewChildren {
                    node: node.id.clone(),
                    children: 1,
                });
            }
        }

        // sibling groups keyed by parent index; orphan tops share no group
        let mut groups: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for d in &self.dependencies {
            let (f, t) = (self.index[&d.from_id], self.index[&d.to_id]);
            match (self.parent[f], self.parent[t]) {
                (Some(pf), Some(pt)) if pf == pt => {
                    if d.kind == DependencyKind::Must {
                        groups.entry(pf).or_default().push((f, t));
                    }
                }
                _ => violations.push(Violation::NonSiblingDependency {
                    from: d.from_id.clone(),
                    to: d.to_id.clone(),
                }),
            }
        }
        for (parent, edges) in groups {
            for members in cyclic_components(&edges) {
                let mut ids: Vec<String> = members.iter().map(|&m| self.nodes[m].id.clone()).collect();
                ids.sort();
                violations.push(Violation::MustCycle {
                    parent: self.nodes[parent].id.clone(),
                    members: ids,
                });
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if self.parent[i].is_none() && node.id != self.root_id {
                violations.push(Violation::MissingParent { node: node.id.clone() });
            }
        }

        ValidationReport { violations }
    }

    pub fn to_json_string(&self) -> String {
        let file = DecompositionFile {
            format_version: FORMAT_VERSION,
            root_id: self.root_id.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    id: n.id.clone(),
                    label: n.label.clone(),
                    parent_id: n.parent_id.clone(),
                })
                .collect(),
            dependencies: self.dependencies.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("decomposition serializes");
        s.push('\n');
        s
    }
}

/// Strongly connected components with more than one member.
fn cyclic_components(edges: &[(usize, usize)]) -> Vec<BTreeSet<usize>> {
    let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(f, t) in edges {
        adj.entry(f).or_default().push(t);
        adj.entry(t).or_default();
    }
    let reach = |start: usize| -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &v in &adj[&u] {
                if seen.insert(v) {
                    stack.push(v);
                }
            }
        }
        seen
    };
    let reachable: BTreeMap<usize, BTreeSet<usize>> = adj.keys().map(|&u| (u, reach(u))).collect();
    let mut assigned = BTreeSet::new();
    let mut out = Vec::new();
    for &u in adj.keys() {
        if assigned.contains(&u) || !reachable[&u].contains(&u) {
            continue;
        }
        let comp: BTreeSet<usize> = reachable[&u]
            .iter()
            .copied()
            .filter(|v| reachable[v].contains(&u))
            .collect();
        assigned.extend(comp.iter().copied());
        out.push(comp);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Violation {
    /// A decomposed node must break into at least two subtasks.
    TooFewChildren { node: String, children: usize },
    /// Dependencies may only connect subtasks sharing a parent.
    NonSiblingDependency { from: String, to: String },
    /// Must-dependencies within one sibling group form a cycle.
    MustCycle { parent: String, members: Vec<String> },
    /// A non-root node without a parent.
    MissingParent { node: String },
}

impl Violation {
    pub fn rule(&self) -> char {
        match self {
            Violation::TooFewChildren { .. } => 'a',
            Violation::NonSiblingDependency { .. } => 'b',
            Violation::MustCycle { .. } => 'c',
            Violation::MissingParent { .. } => 'd',
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}
