//! Edge-indexed vector clocks.
//!
//! An [`EdgeClock`] holds one non-negative counter per directed edge of a
//! fixed domain. Client clocks range over `C_p`, replica clocks over `E_i`,
//! and dependency vectors over the target replica's `E_i`; all of them are
//! values of this one type. Merging is asymmetric: the result keeps the left
//! operand's domain and takes componentwise maxima where the domains overlap,
//! so `merge(a, b) == merge(b, a)` only when the domains coincide.
//!
//! Lookups outside the domain are contract violations and panic rather than
//! defaulting to zero; the set algebra between `E_i` and `C_p` is exactly
//! where silent zeros would hide bugs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

pub use crate::graph::DirectedEdge;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClockError {
    #[error("edge {0} is not part of the clock domain")]
    OutOfDomain(DirectedEdge),
}

/// A mapping from each edge of a fixed domain to a counter.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct EdgeClock {
    counters: BTreeMap<DirectedEdge, u64>,
}

impl EdgeClock {
    /// The all-zero clock over `domain`.
    pub fn zero(domain: &BTreeSet<DirectedEdge>) -> Self {
        Self {
            counters: domain.iter().map(|e| (e.clone(), 0)).collect(),
        }
    }

    pub fn domain(&self) -> impl Iterator<Item = &DirectedEdge> {
        self.counters.keys()
    }

    pub fn domain_set(&self) -> BTreeSet<DirectedEdge> {
        self.counters.keys().cloned().collect()
    }

    pub fn contains(&self, e: &DirectedEdge) -> bool {
        self.counters.contains_key(e)
    }

    pub fn len(&self) -> usize {
        self.counters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counters.is_empty()
    }

    /// Counter at `e`.
    ///
    /// Panics if `e` is outside the domain; missing edges are never zero.
    pub fn get(&self, e: &DirectedEdge) -> u64 {
        match self.counters.get(e) {
            Some(v) => *v,
            None => panic!("clock lookup outside domain: {e}"),
        }
    }

    /// Bumps the counter at `e` by one.
    ///
    /// Panics if `e` is outside the domain.
    pub fn increment(&mut self, e: &DirectedEdge) {
        match self.counters.get_mut(e) {
            Some(v) => *v += 1,
            None => panic!("clock increment outside domain: {e}"),
        }
    }

    /// Overwrites the counter at `e`. Panics if `e` is outside the domain.
    pub fn set(&mut self, e: &DirectedEdge, value: u64) {
        match self.counters.get_mut(e) {
            Some(v) => *v = value,
            None => panic!("clock write outside domain: {e}"),
        }
    }

    /// `merge(a, b)`: domain of `a`; max of the two counters on shared edges,
    /// `a`'s counter elsewhere.
    pub fn merge(&self, other: &EdgeClock) -> EdgeClock {
        let counters = self
            .counters
            .iter()
            .map(|(e, &v)| {
                let m = match other.counters.get(e) {
                    Some(&w) => v.max(w),
                    None => v,
                };
                (e.clone(), m)
            })
            .collect();
        EdgeClock { counters }
    }

    /// In-place form of [`EdgeClock::merge`]; the domain stays fixed.
    pub fn merge_from(&mut self, other: &EdgeClock) {
        for (e, v) in self.counters.iter_mut() {
            if let Some(&w) = other.counters.get(e) {
                *v = (*v).max(w);
            }
        }
    }

    /// The clock restricted to `domain2 ⊆ domain`. This is the paper's
    /// `c|_{r_j}` once `domain2 = E_j`.
    pub fn restrict(&self, domain2: &BTreeSet<DirectedEdge>) -> Result<EdgeClock, ClockError> {
        let mut counters = BTreeMap::new();
        for e in domain2 {
            match self.counters.get(e) {
                Some(&v) => {
                    counters.insert(e.clone(), v);
                }
                None => return Err(ClockError::OutOfDomain(e.clone())),
            }
        }
        Ok(EdgeClock { counters })
    }

    /// `a[e] <= b[e]` for every `e` in `edges` (vacuously true when empty).
    ///
    /// Panics if some edge is missing from either domain.
    pub fn leq_on(&self, other: &EdgeClock, edges: &BTreeSet<DirectedEdge>) -> bool {
        edges.iter().all(|e| self.get(e) <= other.get(e))
    }

    /// Componentwise `<=` over the full (shared) domain.
    pub fn leq(&self, other: &EdgeClock) -> bool {
        self.counters.iter().all(|(e, &v)| v <= other.get(e))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DirectedEdge, u64)> {
        self.counters.iter().map(|(e, &v)| (e, v))
    }

    /// Canonical rendering: `{from->to:count,...}` sorted lexicographically.
    /// Used verbatim in traces and golden files.
    pub fn render(&self) -> String {
        let mut s = String::from("{");
        for (idx, (e, v)) in self.counters.iter().enumerate() {
            if idx > 0 {
                s.push(',');
            }
            s.push_str(&format!("{e}:{v}"));
        }
        s.push('}');
        s
    }
}

impl fmt::Display for EdgeClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ReplicaId;
    use proptest::prelude::*;

    fn de(a: &str, b: &str) -> DirectedEdge {
        DirectedEdge::new(ReplicaId::new(a), ReplicaId::new(b))
    }

    fn clock(entries: &[(&str, &str, u64)]) -> EdgeClock {
        let domain: BTreeSet<DirectedEdge> =
            entries.iter().map(|(a, b, _)| de(a, b)).collect();
        let mut c = EdgeClock::zero(&domain);
        for (a, b, v) in entries {
            c.set(&de(a, b), *v);
        }
        c
    }

    #[test]
    fn zero_clock_over_domain() {
        let c = clock(&[("r1", "r2", 0), ("r2", "r1", 0)]);
        assert_eq!(c.get(&de("r1", "r2")), 0);
        assert_eq!(c.len(), 2);
        let empty = EdgeClock::zero(&BTreeSet::new());
        assert!(empty.is_empty());
    }

    #[test]
    fn merge_keeps_left_domain() {
        let a = clock(&[("x", "y", 2), ("y", "z", 0)]);
        let b = clock(&[("y", "z", 5), ("z", "w", 9)]);
        let m = a.merge(&b);
        assert_eq!(m, clock(&[("x", "y", 2), ("y", "z", 5)]));
        let m2 = b.merge(&a);
        assert_eq!(m2, clock(&[("y", "z", 5), ("z", "w", 9)]));
    }

    #[test]
    fn merge_is_idempotent() {
        let a = clock(&[("x", "y", 3), ("y", "x", 1)]);
        assert_eq!(a.merge(&a), a);
    }

    #[test]
    fn merge_commutes_only_on_equal_domains() {
        let a = clock(&[("x", "y", 1), ("y", "x", 7)]);
        let b = clock(&[("x", "y", 4), ("y", "x", 2)]);
        assert_eq!(a.merge(&b), b.merge(&a));
    }

    #[test]
    fn restrict_copies_counters() {
        let c = clock(&[("r1", "r2", 3), ("r2", "r1", 1), ("r2", "r3", 9)]);
        let sub: BTreeSet<DirectedEdge> = [de("r1", "r2"), de("r2", "r3")].into();
        let r = c.restrict(&sub).unwrap();
        assert_eq!(r, clock(&[("r1", "r2", 3), ("r2", "r3", 9)]));
        assert_eq!(c.restrict(&c.domain_set()).unwrap(), c);
        assert!(c.restrict(&BTreeSet::new()).unwrap().is_empty());
    }

    #[test]
    fn restrict_rejects_foreign_edges() {
        let c = clock(&[("r1", "r2", 3)]);
        let sub: BTreeSet<DirectedEdge> = [de("r9", "r2")].into();
        assert_eq!(
            c.restrict(&sub).unwrap_err(),
            ClockError::OutOfDomain(de("r9", "r2"))
        );
    }

    #[test]
    fn leq_on_checks_named_edges_only() {
        let a = clock(&[("x", "y", 2), ("y", "x", 0)]);
        let b = clock(&[("x", "y", 1), ("y", "x", 5)]);
        assert!(!a.leq_on(&b, &[de("x", "y")].into()));
        assert!(a.leq_on(&b, &[de("y", "x")].into()));
        assert!(a.leq_on(&b, &BTreeSet::new()));
    }

    #[test]
    fn increment_bumps_one_edge() {
        let mut c = clock(&[("r1", "r2", 7), ("r2", "r1", 3)]);
        c.increment(&de("r2", "r1"));
        assert_eq!(c, clock(&[("r1", "r2", 7), ("r2", "r1", 4)]));
        let orig = clock(&[("r1", "r2", 7), ("r2", "r1", 3)]);
        assert!(!c.leq_on(&orig, &[de("r2", "r1")].into()));
    }

    #[test]
    #[should_panic(expected = "outside domain")]
    fn lookup_outside_domain_panics() {
        let c = clock(&[("r1", "r2", 0)]);
        c.get(&de("r2", "r1"));
    }

    #[test]
    fn render_is_sorted_and_stable() {
        let c = clock(&[("r2", "r1", 4), ("r1", "r2", 7)]);
        assert_eq!(c.render(), "{r1->r2:7,r2->r1:4}");
        assert_eq!(EdgeClock::zero(&BTreeSet::new()).render(), "{}");
    }

    fn arb_clock(domain: &'static [(&'static str, &'static str)]) -> impl Strategy<Value = EdgeClock> {
        proptest::collection::vec(0u64..50, domain.len()).prop_map(move |vals| {
            let dom: BTreeSet<DirectedEdge> = domain.iter().map(|(a, b)| de(a, b)).collect();
            let mut c = EdgeClock::zero(&dom);
            for ((a, b), v) in domain.iter().zip(vals) {
                c.set(&de(a, b), v);
            }
            c
        })
    }

    const DOM: &[(&str, &str)] = &[("p", "q"), ("q", "p"), ("q", "r"), ("r", "q")];

    proptest! {
        #[test]
        fn merge_absorbs_on_shared_components(a in arb_clock(DOM), b in arb_clock(DOM)) {
            let m = a.merge(&b);
            for (e, v) in a.iter() {
                prop_assert!(m.get(e) >= v);
                prop_assert!(m.get(e) >= b.get(e));
            }
        }

        #[test]
        fn merge_associative_on_equal_domains(
            a in arb_clock(DOM), b in arb_clock(DOM), c in arb_clock(DOM)
        ) {
            prop_assert_eq!(a.merge(&b).merge(&c), a.merge(&b.merge(&c)));
        }

        #[test]
        fn restrict_commutes_with_merge(a in arb_clock(DOM), b in arb_clock(DOM)) {
            let sub: BTreeSet<DirectedEdge> = [de("p", "q"), ("q", "r").into_edge()].into();
            let left = a.merge(&b).restrict(&sub).unwrap();
            let b_dom: BTreeSet<DirectedEdge> =
                sub.intersection(&b.domain_set()).cloned().collect();
            let right = a.restrict(&sub).unwrap().merge(&b.restrict(&b_dom).unwrap());
            prop_assert_eq!(left, right);
        }

        #[test]
        fn leq_is_a_partial_order(a in arb_clock(DOM), b in arb_clock(DOM), c in arb_clock(DOM)) {
            prop_assert!(a.leq(&a));
            if a.leq(&b) && b.leq(&a) {
                prop_assert_eq!(&a, &b);
            }
            if a.leq(&b) && b.leq(&c) {
                prop_assert!(a.leq(&c));
            }
        }
    }

    trait IntoEdge {
        fn into_edge(self) -> DirectedEdge;
    }

    impl IntoEdge for (&str, &str) {
        fn into_edge(self) -> DirectedEdge {
            de(self.0, self.1)
        }
    }
}
