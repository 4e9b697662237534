//! Rank-based timestamp compression.
//!
//! Group the edges of `E_i` by their source replica `j`. Each edge `e_{jk}`
//! gets the 0/1 incidence vector of its shared-variable set over the group's
//! variable universe `X_j = ⋃ X_{jk}`. Updates issued at `j` drive every
//! counter of the group through those vectors, so whenever a vector is a
//! linear combination of others, its counter is a fixed linear combination of
//! theirs and never needs to be stored. The basis `ℰ_i` keeps one edge per
//! independent vector; every dropped counter is reconstructed exactly with
//! rational coefficients.
//!
//! All arithmetic is exact (`BigRational`); a non-integral reconstruction is
//! reported as an internal inconsistency rather than rounded.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use thiserror::Error;

use crate::clock::EdgeClock;
use crate::graph::{DirectedEdge, ReplicaEdgeSets, ReplicaId, ShareGraph, VarName};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReductionError {
    #[error("edge {0} is not covered by the reduction basis")]
    UnknownEdge(DirectedEdge),
    #[error("reconstruction of {edge} is not a non-negative integer ({value})")]
    Inconsistent { edge: DirectedEdge, value: String },
}

/// Incidence vectors of one source replica `j`: its outgoing edges within
/// `E_i` and their 0/1 vectors over the ordered universe `X_j`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SourceGroup {
    pub universe: Vec<VarName>,
    pub edges: Vec<DirectedEdge>,
    /// `vectors[k][v] == 1` iff `universe[v]` is shared on `edges[k]`.
    pub vectors: Vec<Vec<u8>>,
}

/// The per-source incidence vectors feeding the basis computation for one
/// replica's edge set.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct IncidenceSystem {
    pub replica: ReplicaId,
    pub groups: BTreeMap<ReplicaId, SourceGroup>,
}

impl IncidenceSystem {
    /// Builds the incidence vectors for replica `i` from its computed edge
    /// set. Sources are the nodes touched by `E'_i` plus `i` itself; an edge
    /// belongs to the group of its source endpoint.
    pub fn build(share: &ShareGraph, sets: &ReplicaEdgeSets, i: &ReplicaId) -> Self {
        let edges = sets.get(i).expect("edge sets computed for replica");
        let mut sources: BTreeSet<ReplicaId> = BTreeSet::from([i.clone()]);
        for e in &edges.undirected {
            let (a, b) = e.endpoints();
            sources.insert(a.clone());
            sources.insert(b.clone());
        }
        let mut groups = BTreeMap::new();
        for j in sources {
            let outgoing: Vec<DirectedEdge> = edges
                .directed
                .iter()
                .filter(|e| e.from == j)
                .cloned()
                .collect();
            if outgoing.is_empty() {
                continue;
            }
            let mut universe: BTreeSet<VarName> = BTreeSet::new();
            for e in &outgoing {
                universe.extend(
                    share
                        .shared_vars(&e.undirected())
                        .expect("E_i edges are share edges")
                        .iter()
                        .cloned(),
                );
            }
            let universe: Vec<VarName> = universe.into_iter().collect();
            let vectors = outgoing
                .iter()
                .map(|e| {
                    let shared = share.shared_vars(&e.undirected()).unwrap();
                    universe
                        .iter()
                        .map(|x| u8::from(shared.contains(x)))
                        .collect()
                })
                .collect();
            groups.insert(
                j,
                SourceGroup {
                    universe,
                    edges: outgoing,
                    vectors,
                },
            );
        }
        Self {
            replica: i.clone(),
            groups,
        }
    }
}

/// Basis and reconstruction coefficients for one source group.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct GroupBasis {
    /// `τ_j`: rank of the group's vector family.
    pub rank: usize,
    /// Basis edges in selection order (first independent vector wins).
    pub basis: Vec<DirectedEdge>,
    /// For each dropped edge, coefficients over `basis` with
    /// `ts[e] = Σ coeff[p] · ts[basis[p]]`, exactly.
    pub coefficients: BTreeMap<DirectedEdge, Vec<BigRational>>,
}

/// The reduced edge set `ℰ_i` and everything needed to rebuild full clocks.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ReductionBasis {
    pub replica: ReplicaId,
    pub groups: BTreeMap<ReplicaId, GroupBasis>,
    /// `ℰ_i = ⋃_j ℰ_i^j`.
    pub basis_edges: BTreeSet<DirectedEdge>,
}

impl ReductionBasis {
    /// Gaussian elimination over exact rationals, per group, walking edges in
    /// canonical order so the selection is deterministic.
    pub fn compute(sys: &IncidenceSystem) -> Self {
        let mut groups = BTreeMap::new();
        let mut basis_edges = BTreeSet::new();
        for (j, group) in &sys.groups {
            let dims = group.universe.len();
            let to_rational = |row: &Vec<u8>| -> Vec<BigRational> {
                row.iter()
                    .map(|&b| BigRational::from_integer(BigInt::from(b)))
                    .collect()
            };
            // Echelon rows for the independence test; original columns for
            // the coefficient solve.
            let mut echelon: Vec<(usize, Vec<BigRational>)> = Vec::new();
            let mut basis: Vec<DirectedEdge> = Vec::new();
            let mut basis_vectors: Vec<Vec<BigRational>> = Vec::new();
            let mut coefficients = BTreeMap::new();
            for (edge, raw) in group.edges.iter().zip(&group.vectors) {
                let mut vec = to_rational(raw);
                for (pivot, row) in &echelon {
                    if !vec[*pivot].is_zero() {
                        let factor = vec[*pivot].clone();
                        for d in 0..dims {
                            let sub = &row[d] * &factor;
                            vec[d] = &vec[d] - sub;
                        }
                    }
                }
                match vec.iter().position(|x| !x.is_zero()) {
                    Some(pivot) => {
                        let lead = vec[pivot].clone();
                        for x in vec.iter_mut() {
                            *x = &*x / &lead;
                        }
                        echelon.push((pivot, vec));
                        basis.push(edge.clone());
                        basis_vectors.push(to_rational(raw));
                    }
                    None => {
                        let coeffs = solve_exact(&basis_vectors, &to_rational(raw));
                        coefficients.insert(edge.clone(), coeffs);
                    }
                }
            }
            basis_edges.extend(basis.iter().cloned());
            groups.insert(
                j.clone(),
                GroupBasis {
                    rank: basis.len(),
                    basis,
                    coefficients,
                },
            );
        }
        Self {
            replica: sys.replica.clone(),
            groups,
            basis_edges,
        }
    }

    /// Number of counters the reduced clock keeps.
    pub fn reduced_len(&self) -> usize {
        self.basis_edges.len()
    }

    /// Human-readable reconstruction equations, one per dropped counter:
    /// `(edge, "c1*ts[b1] + c2*ts[b2]")` with zero terms omitted.
    pub fn equations(&self) -> Vec<(DirectedEdge, String)> {
        let mut out = Vec::new();
        for group in self.groups.values() {
            for (edge, coeffs) in &group.coefficients {
                let terms: Vec<String> = coeffs
                    .iter()
                    .zip(&group.basis)
                    .filter(|(c, _)| !c.is_zero())
                    .map(|(c, b)| format!("{c}*ts[{b}]"))
                    .collect();
                let sum = if terms.is_empty() {
                    "0".to_owned()
                } else {
                    terms.join(" + ")
                };
                out.push((edge.clone(), sum));
            }
        }
        out
    }

    /// Rebuilds the counter of `e` from a clock over `ℰ_i` (a clock over any
    /// superset works too). Exact; a fractional or negative result means the
    /// basis and the counters disagree and is surfaced as an error.
    pub fn reconstruct(&self, reduced: &EdgeClock, e: &DirectedEdge) -> Result<u64, ReductionError> {
        if self.basis_edges.contains(e) {
            return Ok(reduced.get(e));
        }
        let group = self
            .groups
            .get(&e.from)
            .ok_or_else(|| ReductionError::UnknownEdge(e.clone()))?;
        let coeffs = group
            .coefficients
            .get(e)
            .ok_or_else(|| ReductionError::UnknownEdge(e.clone()))?;
        let mut acc = BigRational::zero();
        for (a, basis_edge) in coeffs.iter().zip(&group.basis) {
            let ts = BigRational::from_integer(BigInt::from(reduced.get(basis_edge)));
            acc += a * ts;
        }
        if !acc.is_integer() || acc.is_negative() {
            return Err(ReductionError::Inconsistent {
                edge: e.clone(),
                value: acc.to_string(),
            });
        }
        let as_int = acc.to_integer();
        Ok(u64::try_from(&as_int).expect("counter fits u64"))
    }
}

/// Solves `Σ a_p · basis[p] = target` for the unique `a`; the caller
/// guarantees consistency (the target reduced to zero against the basis).
fn solve_exact(basis: &[Vec<BigRational>], target: &[BigRational]) -> Vec<BigRational> {
    let rows = target.len();
    let cols = basis.len();
    // Augmented matrix [basisᵀ | target], one row per universe dimension.
    let mut m: Vec<Vec<BigRational>> = (0..rows)
        .map(|d| {
            let mut row: Vec<BigRational> = basis.iter().map(|b| b[d].clone()).collect();
            row.push(target[d].clone());
            row
        })
        .collect();
    let mut pivot_row_of_col: Vec<Option<usize>> = vec![None; cols];
    let mut next_row = 0;
    for col in 0..cols {
        let Some(pr) = (next_row..rows).find(|&r| !m[r][col].is_zero()) else {
            continue;
        };
        m.swap(next_row, pr);
        let lead = m[next_row][col].clone();
        for x in m[next_row].iter_mut() {
            *x = &*x / &lead;
        }
        for r in 0..rows {
            if r != next_row && !m[r][col].is_zero() {
                let f = m[r][col].clone();
                for cc in 0..=cols {
                    let sub = &m[next_row][cc] * &f;
                    m[r][cc] = &m[r][cc] - sub;
                }
            }
        }
        pivot_row_of_col[col] = Some(next_row);
        next_row += 1;
    }
    (0..cols)
        .map(|col| match pivot_row_of_col[col] {
            Some(r) => m[r][cols].clone(),
            None => BigRational::zero(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{AugmentedShareGraph, ClientAccessMap, ClientId, VariableAssignment};

    fn r(s: &str) -> ReplicaId {
        ReplicaId::new(s)
    }

    fn v(s: &str) -> VarName {
        VarName::new(s)
    }

    fn de(a: &str, b: &str) -> DirectedEdge {
        DirectedEdge::new(r(a), r(b))
    }

    fn topology(
        stores: Vec<(&str, Vec<&str>)>,
        clients: Vec<(&str, Vec<&str>)>,
    ) -> (ShareGraph, ReplicaEdgeSets) {
        let assign = VariableAssignment::new(
            stores
                .into_iter()
                .map(|(id, vars)| (r(id), vars.into_iter().map(v).collect())),
        )
        .unwrap();
        let access = ClientAccessMap::new(
            clients
                .into_iter()
                .map(|(id, rs)| (ClientId::new(id), rs.into_iter().map(r).collect())),
            &assign,
        )
        .unwrap();
        let share = ShareGraph::build(&assign);
        let aug = AugmentedShareGraph::augment(&share, &access).unwrap();
        let sets = ReplicaEdgeSets::compute(&share, &aug);
        (share, sets)
    }

    fn ratio(n: i64) -> BigRational {
        BigRational::from_integer(BigInt::from(n))
    }

    #[test]
    fn equal_vectors_collapse_to_one_counter() {
        // r1 shares {x,y} with both r2 and r3.
        let (share, sets) = topology(
            vec![
                ("r1", vec!["x", "y"]),
                ("r2", vec!["x", "y"]),
                ("r3", vec!["x", "y"]),
            ],
            vec![("c1", vec!["r1"])],
        );
        let sys = IncidenceSystem::build(&share, &sets, &r("r1"));
        let g1 = &sys.groups[&r("r1")];
        assert_eq!(g1.universe, vec![v("x"), v("y")]);
        assert_eq!(g1.vectors, vec![vec![1, 1], vec![1, 1]]);

        let basis = ReductionBasis::compute(&sys);
        let b1 = &basis.groups[&r("r1")];
        assert_eq!(b1.rank, 1);
        assert_eq!(b1.basis, vec![de("r1", "r2")]);
        assert_eq!(b1.coefficients[&de("r1", "r3")], vec![ratio(1)]);
    }

    #[test]
    fn disjoint_vectors_stay_independent() {
        // Chain r1{x} - r2{x,y} - r3{y}: for i = r2 the group of r2 has
        // α_21 = (1,0), α_23 = (0,1) over universe (x, y).
        let (share, sets) = topology(
            vec![("r1", vec!["x"]), ("r2", vec!["x", "y"]), ("r3", vec!["y"])],
            vec![("c1", vec!["r2"])],
        );
        let sys = IncidenceSystem::build(&share, &sets, &r("r2"));
        let g2 = &sys.groups[&r("r2")];
        assert_eq!(g2.universe, vec![v("x"), v("y")]);
        assert_eq!(g2.vectors, vec![vec![1, 0], vec![0, 1]]);
        let basis = ReductionBasis::compute(&sys);
        let b2 = &basis.groups[&r("r2")];
        assert_eq!(b2.rank, 2);
        assert!(b2.coefficients.is_empty());
    }

    /// Source with vectors (1,0), (0,1), (1,1): rank 2, the third counter is
    /// the sum of the first two.
    fn sum_system() -> (ShareGraph, ReplicaEdgeSets) {
        topology(
            vec![
                ("ra", vec!["x"]),
                ("rb", vec!["x", "y"]),
                ("rc", vec!["y"]),
                ("rd", vec!["x", "y"]),
            ],
            vec![("c1", vec!["ra", "rb", "rc", "rd"])],
        )
    }

    #[test]
    fn dependent_vector_gets_sum_coefficients() {
        let (share, sets) = sum_system();
        let sys = IncidenceSystem::build(&share, &sets, &r("rb"));
        let gb = &sys.groups[&r("rb")];
        assert_eq!(gb.edges, vec![de("rb", "ra"), de("rb", "rc"), de("rb", "rd")]);
        assert_eq!(gb.vectors, vec![vec![1, 0], vec![0, 1], vec![1, 1]]);
        let basis = ReductionBasis::compute(&sys);
        let bb = &basis.groups[&r("rb")];
        assert_eq!(bb.rank, 2);
        assert_eq!(bb.basis, vec![de("rb", "ra"), de("rb", "rc")]);
        assert_eq!(bb.coefficients[&de("rb", "rd")], vec![ratio(1), ratio(1)]);
    }

    #[test]
    fn reconstruct_sums_basis_counters() {
        let (share, sets) = sum_system();
        let sys = IncidenceSystem::build(&share, &sets, &r("rb"));
        let basis = ReductionBasis::compute(&sys);
        let mut reduced = EdgeClock::zero(&basis.basis_edges);
        reduced.set(&de("rb", "ra"), 3);
        reduced.set(&de("rb", "rc"), 4);
        assert_eq!(basis.reconstruct(&reduced, &de("rb", "rd")).unwrap(), 7);
        // basis edges come back unchanged
        assert_eq!(basis.reconstruct(&reduced, &de("rb", "ra")).unwrap(), 3);
        // all-zero clock reconstructs to zero
        let zeros = EdgeClock::zero(&basis.basis_edges);
        assert_eq!(basis.reconstruct(&zeros, &de("rb", "rd")).unwrap(), 0);
    }

    #[test]
    fn reconstruct_unknown_edge_is_an_error() {
        let (share, sets) = sum_system();
        let sys = IncidenceSystem::build(&share, &sets, &r("rb"));
        let basis = ReductionBasis::compute(&sys);
        let reduced = EdgeClock::zero(&basis.basis_edges);
        let foreign = de("zz", "rb");
        assert_eq!(
            basis.reconstruct(&reduced, &foreign).unwrap_err(),
            ReductionError::UnknownEdge(foreign)
        );
    }

    #[test]
    fn full_replication_keeps_one_counter_per_source() {
        let (share, sets) = topology(
            vec![
                ("r1", vec!["x", "y"]),
                ("r2", vec!["x", "y"]),
                ("r3", vec!["x", "y"]),
            ],
            vec![("c1", vec!["r1", "r2", "r3"])],
        );
        let sys = IncidenceSystem::build(&share, &sets, &r("r1"));
        let basis = ReductionBasis::compute(&sys);
        assert_eq!(sets.directed(&r("r1")).unwrap().len(), 6);
        assert_eq!(basis.reduced_len(), 3);
        for group in basis.groups.values() {
            assert_eq!(group.rank, 1);
        }
    }

    /// The four-replica topology where exactly two counters are redundant at
    /// r1: its own pair of {x,y} edges collapses, and r2's edge toward r4 is
    /// the difference of its other two.
    #[test]
    fn shared_xy_two_neighbors_drops_exactly_two_counters() {
        let (share, sets) = topology(
            vec![
                ("r1", vec!["x", "y"]),
                ("r2", vec!["s", "x", "y"]),
                ("r3", vec!["s", "t", "x", "y"]),
                ("r4", vec!["s", "t"]),
            ],
            vec![("c1", vec!["r1"])],
        );
        let e1 = sets.directed(&r("r1")).unwrap();
        assert_eq!(e1.len(), 10);
        let sys = IncidenceSystem::build(&share, &sets, &r("r1"));
        let basis = ReductionBasis::compute(&sys);
        assert_eq!(basis.reduced_len(), e1.len() - 2);
        assert_eq!(basis.groups[&r("r1")].rank, 1);
        assert_eq!(basis.groups[&r("r2")].rank, 2);
        assert_eq!(basis.groups[&r("r3")].rank, 3);
        assert_eq!(basis.groups[&r("r4")].rank, 2);
    }

    #[test]
    fn basis_is_deterministic() {
        let (share, sets) = sum_system();
        let a = ReductionBasis::compute(&IncidenceSystem::build(&share, &sets, &r("rb")));
        let b = ReductionBasis::compute(&IncidenceSystem::build(&share, &sets, &r("rb")));
        assert_eq!(a, b);
    }
}
