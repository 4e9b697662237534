//! Share-graph construction and the timestamp edge sets.
//!
//! Two replicas are joined by a share edge when they store a common variable.
//! Clients induce extra (augmented) edges between every pair of replicas they
//! may contact; those edges carry no variables but create loops, and loops are
//! what force a replica to track counters for edges it is not incident to.
//! For replica `i` the tracked set is
//!
//! ```text
//! E'_i = (L'_i ∩ E) ∪ (N'_i ∩ E)      L'_i: edges on simple loops through i in G'
//!                                     N'_i: edges incident to i in G'
//! E_i  = both directions of E'_i
//! ```
//!
//! and a client tracks `C_p = ⋃ E_j` over the replicas `j` it accesses.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

/// Name of a replica (server). Ordered lexicographically everywhere.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ReplicaId(String);

/// Name of a client.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ClientId(String);

/// Name of a variable.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct VarName(String);

macro_rules! string_id {
    ($ty:ident) => {
        impl $ty {
            pub fn new(name: impl Into<String>) -> Self {
                Self(name.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $ty {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

string_id!(ReplicaId);
string_id!(ClientId);
string_id!(VarName);

/// An undirected edge, stored with endpoints in sorted order.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct UndirectedEdge {
    a: ReplicaId,
    b: ReplicaId,
}

impl UndirectedEdge {
    /// Canonicalizes endpoint order; `a == b` (self-loop) is rejected by the
    /// graph constructors, not here.
    pub fn new(x: ReplicaId, y: ReplicaId) -> Self {
        if x <= y {
            Self { a: x, b: y }
        } else {
            Self { a: y, b: x }
        }
    }

    pub fn endpoints(&self) -> (&ReplicaId, &ReplicaId) {
        (&self.a, &self.b)
    }

    pub fn touches(&self, v: &ReplicaId) -> bool {
        &self.a == v || &self.b == v
    }

    pub fn other(&self, v: &ReplicaId) -> Option<&ReplicaId> {
        if &self.a == v {
            Some(&self.b)
        } else if &self.b == v {
            Some(&self.a)
        } else {
            None
        }
    }

    /// The two directed edges behind this undirected edge.
    pub fn directions(&self) -> [DirectedEdge; 2] {
        [
            DirectedEdge::new(self.a.clone(), self.b.clone()),
            DirectedEdge::new(self.b.clone(), self.a.clone()),
        ]
    }
}

impl fmt::Display for UndirectedEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}--{}", self.a, self.b)
    }
}

/// A directed edge `from->to`. Clock domains are sets of these.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct DirectedEdge {
    pub from: ReplicaId,
    pub to: ReplicaId,
}

impl DirectedEdge {
    pub fn new(from: ReplicaId, to: ReplicaId) -> Self {
        Self { from, to }
    }

    pub fn undirected(&self) -> UndirectedEdge {
        UndirectedEdge::new(self.from.clone(), self.to.clone())
    }
}

impl fmt::Display for DirectedEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("duplicate replica id {0}")]
    DuplicateReplica(ReplicaId),
    #[error("duplicate client id {0}")]
    DuplicateClient(ClientId),
    #[error("client {client} references unknown replica {replica}")]
    UnknownReplicaInAccess { client: ClientId, replica: ReplicaId },
    #[error("client {0} has an empty replica set")]
    EmptyAccessSet(ClientId),
    #[error("unknown vertex {0}")]
    UnknownVertex(ReplicaId),
    #[error("graph has {0} vertices, brute-force cycle search is capped at {1}")]
    TooLarge(usize, usize),
}

/// Which replica stores which variables (the per-replica sets `X_i`).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct VariableAssignment {
    stores: BTreeMap<ReplicaId, BTreeSet<VarName>>,
}

impl VariableAssignment {
    pub fn new(
        entries: impl IntoIterator<Item = (ReplicaId, Vec<VarName>)>,
    ) -> Result<Self, GraphError> {
        let mut stores: BTreeMap<ReplicaId, BTreeSet<VarName>> = BTreeMap::new();
        for (id, vars) in entries {
            if stores.contains_key(&id) {
                return Err(GraphError::DuplicateReplica(id));
            }
            stores.insert(id, vars.into_iter().collect());
        }
        Ok(Self { stores })
    }

    pub fn replicas(&self) -> impl Iterator<Item = &ReplicaId> {
        self.stores.keys()
    }

    pub fn contains(&self, id: &ReplicaId) -> bool {
        self.stores.contains_key(id)
    }

    pub fn variables_of(&self, id: &ReplicaId) -> Option<&BTreeSet<VarName>> {
        self.stores.get(id)
    }

    pub fn stores_var(&self, id: &ReplicaId, x: &VarName) -> bool {
        self.stores.get(id).is_some_and(|s| s.contains(x))
    }

    /// All replicas storing `x`, in id order.
    pub fn holders_of(&self, x: &VarName) -> Vec<ReplicaId> {
        self.stores
            .iter()
            .filter(|(_, vars)| vars.contains(x))
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.stores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stores.is_empty()
    }
}

/// Which client may talk to which replicas (the per-client sets `R_i`).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ClientAccessMap {
    access: BTreeMap<ClientId, BTreeSet<ReplicaId>>,
}

impl ClientAccessMap {
    pub fn new(
        entries: impl IntoIterator<Item = (ClientId, Vec<ReplicaId>)>,
        assign: &VariableAssignment,
    ) -> Result<Self, GraphError> {
        let mut access: BTreeMap<ClientId, BTreeSet<ReplicaId>> = BTreeMap::new();
        for (client, replicas) in entries {
            if access.contains_key(&client) {
                return Err(GraphError::DuplicateClient(client));
            }
            if replicas.is_empty() {
                return Err(GraphError::EmptyAccessSet(client));
            }
            for r in &replicas {
                if !assign.contains(r) {
                    return Err(GraphError::UnknownReplicaInAccess {
                        client,
                        replica: r.clone(),
                    });
                }
            }
            access.insert(client, replicas.into_iter().collect());
        }
        Ok(Self { access })
    }

    pub fn clients(&self) -> impl Iterator<Item = &ClientId> {
        self.access.keys()
    }

    pub fn replicas_of(&self, c: &ClientId) -> Option<&BTreeSet<ReplicaId>> {
        self.access.get(c)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ClientId, &BTreeSet<ReplicaId>)> {
        self.access.iter()
    }
}

/// The share graph: an edge wherever two replicas store a common variable,
/// labeled with the shared set `X_{jk}`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ShareGraph {
    vertices: BTreeSet<ReplicaId>,
    edges: BTreeMap<UndirectedEdge, BTreeSet<VarName>>,
}

impl ShareGraph {
    /// Builds the share graph of an assignment: `e_{j,k}` is present exactly
    /// when `X_j ∩ X_k ≠ ∅` and carries the intersection.
    pub fn build(assign: &VariableAssignment) -> Self {
        let vertices: BTreeSet<ReplicaId> = assign.replicas().cloned().collect();
        let mut edges = BTreeMap::new();
        let ids: Vec<&ReplicaId> = assign.replicas().collect();
        for (idx, j) in ids.iter().enumerate() {
            for k in &ids[idx + 1..] {
                let shared: BTreeSet<VarName> = assign
                    .variables_of(j)
                    .unwrap()
                    .intersection(assign.variables_of(k).unwrap())
                    .cloned()
                    .collect();
                if !shared.is_empty() {
                    edges.insert(UndirectedEdge::new((*j).clone(), (*k).clone()), shared);
                }
            }
        }
        Self { vertices, edges }
    }

    pub fn vertices(&self) -> &BTreeSet<ReplicaId> {
        &self.vertices
    }

    pub fn edges(&self) -> &BTreeMap<UndirectedEdge, BTreeSet<VarName>> {
        &self.edges
    }

    pub fn has_edge(&self, e: &UndirectedEdge) -> bool {
        self.edges.contains_key(e)
    }

    pub fn shared_vars(&self, e: &UndirectedEdge) -> Option<&BTreeSet<VarName>> {
        self.edges.get(e)
    }

    /// Share-graph neighbors of `v`, in id order.
    pub fn neighbors(&self, v: &ReplicaId) -> Vec<ReplicaId> {
        self.edges
            .keys()
            .filter_map(|e| e.other(v))
            .cloned()
            .collect()
    }
}

/// How an augmented-graph edge arose.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EdgeLabel {
    /// Share edge not induced by any client pair.
    Share,
    /// Client-induced only; carries no variables.
    AugmentedOnly,
    /// Share edge that is also induced by a client pair.
    Both,
}

/// The augmented share graph `G'`: share edges plus an edge between every
/// pair of replicas accessed by a common client.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct AugmentedShareGraph {
    vertices: BTreeSet<ReplicaId>,
    edges: BTreeMap<UndirectedEdge, EdgeLabel>,
}

impl AugmentedShareGraph {
    pub fn augment(share: &ShareGraph, access: &ClientAccessMap) -> Result<Self, GraphError> {
        let mut edges: BTreeMap<UndirectedEdge, EdgeLabel> = share
            .edges()
            .keys()
            .map(|e| (e.clone(), EdgeLabel::Share))
            .collect();
        for (client, replicas) in access.iter() {
            for r in replicas {
                if !share.vertices().contains(r) {
                    return Err(GraphError::UnknownReplicaInAccess {
                        client: client.clone(),
                        replica: r.clone(),
                    });
                }
            }
            let rs: Vec<&ReplicaId> = replicas.iter().collect();
            for (idx, s) in rs.iter().enumerate() {
                for t in &rs[idx + 1..] {
                    let e = UndirectedEdge::new((*s).clone(), (*t).clone());
                    edges
                        .entry(e)
                        .and_modify(|l| {
                            if *l == EdgeLabel::Share {
                                *l = EdgeLabel::Both;
                            }
                        })
                        .or_insert(EdgeLabel::AugmentedOnly);
                }
            }
        }
        Ok(Self {
            vertices: share.vertices().clone(),
            edges,
        })
    }

    pub fn vertices(&self) -> &BTreeSet<ReplicaId> {
        &self.vertices
    }

    pub fn edges(&self) -> &BTreeMap<UndirectedEdge, EdgeLabel> {
        &self.edges
    }

    /// Edges of `G'` that are client-induced only.
    pub fn augmented_only(&self) -> Vec<UndirectedEdge> {
        self.edges
            .iter()
            .filter(|(_, l)| **l == EdgeLabel::AugmentedOnly)
            .map(|(e, _)| e.clone())
            .collect()
    }

    fn adjacency(&self) -> BTreeMap<ReplicaId, Vec<(ReplicaId, UndirectedEdge)>> {
        let mut adj: BTreeMap<ReplicaId, Vec<(ReplicaId, UndirectedEdge)>> = self
            .vertices
            .iter()
            .map(|v| (v.clone(), Vec::new()))
            .collect();
        for e in self.edges.keys() {
            let (a, b) = e.endpoints();
            adj.get_mut(a).unwrap().push((b.clone(), e.clone()));
            adj.get_mut(b).unwrap().push((a.clone(), e.clone()));
        }
        adj
    }

    /// `L'_i`: the edges lying on at least one simple cycle through `i`.
    ///
    /// An edge lies on a simple cycle through `i` iff its biconnected
    /// component contains `i` and is not a lone bridge, so one Hopcroft-Tarjan
    /// pass suffices. Equivalence with exhaustive cycle enumeration is pinned
    /// by tests against [`AugmentedShareGraph::brute_force_loop_edges`].
    pub fn loop_edges(&self, i: &ReplicaId) -> Result<BTreeSet<UndirectedEdge>, GraphError> {
        if !self.vertices.contains(i) {
            return Err(GraphError::UnknownVertex(i.clone()));
        }
        let components = self.biconnected_components();
        let mut out = BTreeSet::new();
        for comp in components {
            if comp.len() < 2 {
                continue; // a lone bridge edge is on no cycle
            }
            let touches_i = comp.iter().any(|e| e.touches(i));
            if touches_i {
                out.extend(comp);
            }
        }
        Ok(out)
    }

    /// Partitions the edge set into biconnected components (Hopcroft-Tarjan).
    fn biconnected_components(&self) -> Vec<Vec<UndirectedEdge>> {
        let adj = self.adjacency();
        let order: Vec<ReplicaId> = self.vertices.iter().cloned().collect();

        struct Dfs<'a> {
            adj: &'a BTreeMap<ReplicaId, Vec<(ReplicaId, UndirectedEdge)>>,
            disc: BTreeMap<ReplicaId, usize>,
            low: BTreeMap<ReplicaId, usize>,
            time: usize,
            stack: Vec<UndirectedEdge>,
            out: Vec<Vec<UndirectedEdge>>,
        }

        impl Dfs<'_> {
            fn visit(&mut self, v: &ReplicaId, parent_edge: Option<&UndirectedEdge>) {
                self.time += 1;
                self.disc.insert(v.clone(), self.time);
                self.low.insert(v.clone(), self.time);
                for (w, e) in &self.adj[v] {
                    if Some(e) == parent_edge {
                        continue;
                    }
                    if let Some(&dw) = self.disc.get(w) {
                        // back edge
                        if dw < self.disc[v] {
                            self.stack.push(e.clone());
                            let lv = self.low[v].min(dw);
                            self.low.insert(v.clone(), lv);
                        }
                    } else {
                        self.stack.push(e.clone());
                        self.visit(w, Some(e));
                        let lv = self.low[v].min(self.low[w]);
                        self.low.insert(v.clone(), lv);
                        if self.low[w] >= self.disc[v] {
                            // v separates w's subtree: pop one component
                            let mut comp = Vec::new();
                            while let Some(top) = self.stack.pop() {
                                let done = top == *e;
                                comp.push(top);
                                if done {
                                    break;
                                }
                            }
                            self.out.push(comp);
                        }
                    }
                }
            }
        }

        let mut dfs = Dfs {
            adj: &adj,
            disc: BTreeMap::new(),
            low: BTreeMap::new(),
            time: 0,
            stack: Vec::new(),
            out: Vec::new(),
        };
        for v in &order {
            if !dfs.disc.contains_key(v) {
                dfs.visit(v, None);
            }
        }
        dfs.out
    }

    /// Test oracle for [`AugmentedShareGraph::loop_edges`]: enumerate every
    /// simple cycle through `i` by exhaustive path search and return the
    /// union of their edges. Capped at 10 vertices.
    pub fn brute_force_loop_edges(
        &self,
        i: &ReplicaId,
    ) -> Result<BTreeSet<UndirectedEdge>, GraphError> {
        const CAP: usize = 10;
        if !self.vertices.contains(i) {
            return Err(GraphError::UnknownVertex(i.clone()));
        }
        if self.vertices.len() > CAP {
            return Err(GraphError::TooLarge(self.vertices.len(), CAP));
        }
        let adj = self.adjacency();
        let mut found = BTreeSet::new();
        let mut path_edges: Vec<UndirectedEdge> = Vec::new();
        let mut visited: BTreeSet<ReplicaId> = BTreeSet::new();

        fn search(
            adj: &BTreeMap<ReplicaId, Vec<(ReplicaId, UndirectedEdge)>>,
            start: &ReplicaId,
            v: &ReplicaId,
            visited: &mut BTreeSet<ReplicaId>,
            path_edges: &mut Vec<UndirectedEdge>,
            found: &mut BTreeSet<UndirectedEdge>,
        ) {
            for (w, e) in &adj[v] {
                if w == start {
                    // closing edge; a simple cycle needs at least 3 vertices
                    if path_edges.len() >= 2 {
                        found.extend(path_edges.iter().cloned());
                        found.insert(e.clone());
                    }
                } else if !visited.contains(w) {
                    visited.insert(w.clone());
                    path_edges.push(e.clone());
                    search(adj, start, w, visited, path_edges, found);
                    path_edges.pop();
                    visited.remove(w);
                }
            }
        }

        visited.insert(i.clone());
        search(&adj, i, i, &mut visited, &mut path_edges, &mut found);
        Ok(found)
    }
}

/// Per-replica edge sets: loops and incident edges in `G'`, their share-edge
/// restrictions, and the directed set `E_i` the replica keeps counters for.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ReplicaEdges {
    /// `L'_i`: edges on simple loops through `i` in `G'`.
    pub loops_augmented: BTreeSet<UndirectedEdge>,
    /// `L_i = L'_i ∩ E`.
    pub loops: BTreeSet<UndirectedEdge>,
    /// `N'_i`: edges incident to `i` in `G'`.
    pub incident_augmented: BTreeSet<UndirectedEdge>,
    /// `N_i = N'_i ∩ E`.
    pub incident: BTreeSet<UndirectedEdge>,
    /// `E'_i = L_i ∪ N_i`.
    pub undirected: BTreeSet<UndirectedEdge>,
    /// `E_i`: both directions of every edge in `E'_i`.
    pub directed: BTreeSet<DirectedEdge>,
}

/// `E_i` for every replica of a topology.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ReplicaEdgeSets {
    sets: BTreeMap<ReplicaId, ReplicaEdges>,
}

impl ReplicaEdgeSets {
    /// Applies the set algebra of the timestamp construction to all replicas.
    pub fn compute(share: &ShareGraph, augmented: &AugmentedShareGraph) -> Self {
        let mut sets = BTreeMap::new();
        for i in augmented.vertices() {
            let loops_augmented = augmented
                .loop_edges(i)
                .expect("vertex sets of G and G' coincide");
            let loops: BTreeSet<UndirectedEdge> = loops_augmented
                .iter()
                .filter(|e| share.has_edge(e))
                .cloned()
                .collect();
            let incident_augmented: BTreeSet<UndirectedEdge> = augmented
                .edges()
                .keys()
                .filter(|e| e.touches(i))
                .cloned()
                .collect();
            let incident: BTreeSet<UndirectedEdge> = incident_augmented
                .iter()
                .filter(|e| share.has_edge(e))
                .cloned()
                .collect();
            let undirected: BTreeSet<UndirectedEdge> =
                loops.union(&incident).cloned().collect();
            let directed: BTreeSet<DirectedEdge> = undirected
                .iter()
                .flat_map(|e| e.directions())
                .collect();
            sets.insert(
                i.clone(),
                ReplicaEdges {
                    loops_augmented,
                    loops,
                    incident_augmented,
                    incident,
                    undirected,
                    directed,
                },
            );
        }
        Self { sets }
    }

    pub fn get(&self, i: &ReplicaId) -> Option<&ReplicaEdges> {
        self.sets.get(i)
    }

    /// `E_i` as a directed edge set.
    pub fn directed(&self, i: &ReplicaId) -> Option<&BTreeSet<DirectedEdge>> {
        self.sets.get(i).map(|s| &s.directed)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ReplicaId, &ReplicaEdges)> {
        self.sets.iter()
    }
}

/// `C_p = ⋃_{j ∈ R_p} E_j` for every client.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ClientEdgeSets {
    sets: BTreeMap<ClientId, BTreeSet<DirectedEdge>>,
}

impl ClientEdgeSets {
    pub fn compute(access: &ClientAccessMap, replica_sets: &ReplicaEdgeSets) -> Self {
        let mut sets = BTreeMap::new();
        for (client, replicas) in access.iter() {
            let mut union = BTreeSet::new();
            for j in replicas {
                if let Some(e_j) = replica_sets.directed(j) {
                    union.extend(e_j.iter().cloned());
                }
            }
            sets.insert(client.clone(), union);
        }
        Self { sets }
    }

    pub fn get(&self, c: &ClientId) -> Option<&BTreeSet<DirectedEdge>> {
        self.sets.get(c)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ClientId, &BTreeSet<DirectedEdge>)> {
        self.sets.iter()
    }
}
