//! Directed acyclic graphs over named nodes, arc constraints, and the move
//! primitives used by structure search.
//!
//! `Dag` values are immutable: every accepted move produces a new graph, so
//! concurrent readers never observe a half-applied move.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};

/// A directed acyclic graph over named nodes. Node order is the declaration
/// order and drives every deterministic tie-break.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dag {
    nodes: Vec<String>,
    index: BTreeMap<String, usize>,
    /// `parents[c]` holds the parent indices of node `c`.
    parents: Vec<BTreeSet<usize>>,
}

/// One candidate structure change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MoveKind {
    Add,
    Delete,
    Reverse,
}

impl fmt::Display for MoveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MoveKind::Add => "add",
            MoveKind::Delete => "delete",
            MoveKind::Reverse => "reverse",
        };
        f.write_str(s)
    }
}

/// An arc move, named by the arc's current direction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Move {
    pub kind: MoveKind,
    pub parent: String,
    pub child: String,
}

impl Move {
    pub fn add(parent: impl Into<String>, child: impl Into<String>) -> Self {
        Move {
            kind: MoveKind::Add,
            parent: parent.into(),
            child: child.into(),
        }
    }

    pub fn delete(parent: impl Into<String>, child: impl Into<String>) -> Self {
        Move {
            kind: MoveKind::Delete,
            parent: parent.into(),
            child: child.into(),
        }
    }

    pub fn reverse(parent: impl Into<String>, child: impl Into<String>) -> Self {
        Move {
            kind: MoveKind::Reverse,
            parent: parent.into(),
            child: child.into(),
        }
    }
}

impl fmt::Display for Move {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}->{}", self.kind, self.parent, self.child)
    }
}

/// Why a structurally valid move was refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    /// The resulting graph would contain a directed cycle.
    Cycle,
    /// The added or reversed arc is blacklisted.
    Blacklisted,
    /// The move would delete or reverse a whitelisted arc.
    WhitelistViolation,
}

/// Result of [`Dag::apply_move`]: either the modified graph or a typed
/// refusal. Hard input errors (unknown nodes, absent arcs) are `Err`.
#[derive(Debug, Clone, PartialEq)]
pub enum MoveOutcome {
    Accepted(Dag),
    Rejected(Rejection),
}

impl MoveOutcome {
    pub fn accepted(self) -> Option<Dag> {
        match self {
            MoveOutcome::Accepted(g) => Some(g),
            MoveOutcome::Rejected(_) => None,
        }
    }
}

/// Forbidden and forced arcs for structure search. Whitelisted arcs are
/// placed in the initial graph and are immutable thereafter.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConstraintSet {
    blacklist: BTreeSet<(String, String)>,
    whitelist: BTreeSet<(String, String)>,
}

impl ConstraintSet {
    /// Builds a constraint set, rejecting overlapping lists and cyclic
    /// whitelists.
    pub fn new(
        blacklist: impl IntoIterator<Item = (String, String)>,
        whitelist: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let blacklist: BTreeSet<_> = blacklist.into_iter().collect();
        let whitelist: BTreeSet<_> = whitelist.into_iter().collect();
        if let Some(arc) = whitelist.intersection(&blacklist).next() {
            return Err(Error::ConstraintConflict(arc.clone()));
        }
        // The whitelist on its own must admit a DAG.
        let mut nodes: Vec<String> = Vec::new();
        for (p, c) in &whitelist {
            for name in [p, c] {
                if !nodes.contains(name) {
                    nodes.push(name.clone());
                }
            }
        }
        let mut probe = Dag::new(nodes)?;
        for (p, c) in &whitelist {
            if !probe.try_add_arc(p, c)? {
                return Err(Error::CyclicWhitelist);
            }
        }
        Ok(ConstraintSet {
            blacklist,
            whitelist,
        })
    }

    /// Merges two constraint sets, revalidating the combined invariants.
    pub fn merged(&self, other: &ConstraintSet) -> Result<ConstraintSet> {
        ConstraintSet::new(
            self.blacklist.iter().chain(&other.blacklist).cloned(),
            self.whitelist.iter().chain(&other.whitelist).cloned(),
        )
    }

    pub fn blacklist(&self) -> impl Iterator<Item = &(String, String)> {
        self.blacklist.iter()
    }

    pub fn whitelist(&self) -> impl Iterator<Item = &(String, String)> {
        self.whitelist.iter()
    }

    pub fn is_blacklisted(&self, parent: &str, child: &str) -> bool {
        self.blacklist
            .contains(&(parent.to_string(), child.to_string()))
    }

    pub fn is_whitelisted(&self, parent: &str, child: &str) -> bool {
        self.whitelist
            .contains(&(parent.to_string(), child.to_string()))
    }
}

impl Dag {
    /// An arc-free graph over `nodes` (declaration order retained).
    pub fn new(nodes: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, name) in nodes.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::invalid("empty node name"));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate node name {name}")));
            }
        }
        let parents = vec![BTreeSet::new(); nodes.len()];
        Ok(Dag {
            nodes,
            index,
            parents,
        })
    }

    pub fn node_names(&self) -> &[String] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn idx(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn has_arc(&self, parent: &str, child: &str) -> bool {
        match (self.index.get(parent), self.index.get(child)) {
            (Some(&p), Some(&c)) => self.parents[c].contains(&p),
            _ => false,
        }
    }

    /// Parents of `node`, in declaration order.
    pub fn parents_of(&self, node: &str) -> Result<Vec<&str>> {
        let c = self.idx(node)?;
        Ok(self.parents[c].iter().map(|&p| self.nodes[p].as_str()).collect())
    }

    /// Children of `node`, in declaration order.
    pub fn children_of(&self, node: &str) -> Result<Vec<&str>> {
        let p = self.idx(node)?;
        Ok((0..self.nodes.len())
            .filter(|&c| self.parents[c].contains(&p))
            .map(|c| self.nodes[c].as_str())
            .collect())
    }

    /// All arcs sorted by (parent name, child name); the deterministic
    /// export order.
    pub fn arcs(&self) -> Vec<(String, String)> {
        let mut arcs: Vec<(String, String)> = Vec::new();
        for (c, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                arcs.push((self.nodes[p].clone(), self.nodes[c].clone()));
            }
        }
        arcs.sort();
        arcs
    }

    pub fn arc_count(&self) -> usize {
        self.parents.iter().map(|ps| ps.len()).sum()
    }

    /// True if a directed path `from ~> to` exists.
    fn reachable(&self, from: usize, to: usize) -> bool {
        if from == to {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![from];
        seen[from] = true;
        while let Some(u) = stack.pop() {
            for (c, ps) in self.parents.iter().enumerate() {
                if ps.contains(&u) && !seen[c] {
                    if c == to {
                        return true;
                    }
                    seen[c] = true;
                    stack.push(c);
                }
            }
        }
        false
    }

    /// Adds `parent -> child` unless it would close a cycle (returns whether
    /// the arc was added). Errors on unknown nodes or duplicate arcs.
    /// Used for seeding initial graphs; search goes through [`apply_move`].
    ///
    /// [`apply_move`]: Dag::apply_move
    pub fn try_add_arc(&mut self, parent: &str, child: &str) -> Result<bool> {
        let p = self.idx(parent)?;
        let c = self.idx(child)?;
        if self.parents[c].contains(&p) {
            return Err(Error::invalid(format!(
                "duplicate arc {parent}->{child}"
            )));
        }
        if self.reachable(c, p) {
            return Ok(false);
        }
        self.parents[c].insert(p);
        Ok(true)
    }

    /// Applies one move under the constraints. Constraint refusals are
    /// checked before acyclicity, so a move that breaks both reports the
    /// constraint.
    pub fn apply_move(&self, mv: &Move, constraints: &ConstraintSet) -> Result<MoveOutcome> {
        let p = self.idx(&mv.parent)?;
        let c = self.idx(&mv.child)?;
        match mv.kind {
            MoveKind::Add => {
                if self.parents[c].contains(&p) {
                    return Err(Error::invalid(format!(
                        "arc {}->{} already present",
                        mv.parent, mv.child
                    )));
                }
                if constraints.is_blacklisted(&mv.parent, &mv.child) {
                    return Ok(MoveOutcome::Rejected(Rejection::Blacklisted));
                }
                // A self loop is a length-1 cycle.
                if p == c || self.reachable(c, p) {
                    return Ok(MoveOutcome::Rejected(Rejection::Cycle));
                }
                let mut next = self.clone();
                next.parents[c].insert(p);
                Ok(MoveOutcome::Accepted(next))
            }
            MoveKind::Delete => {
                if !self.parents[c].contains(&p) {
                    return Err(Error::invalid(format!(
                        "arc {}->{} not present",
                        mv.parent, mv.child
                    )));
                }
                if constraints.is_whitelisted(&mv.parent, &mv.child) {
                    return Ok(MoveOutcome::Rejected(Rejection::WhitelistViolation));
                }
                let mut next = self.clone();
                next.parents[c].remove(&p);
                Ok(MoveOutcome::Accepted(next))
            }
            MoveKind::Reverse => {
                if !self.parents[c].contains(&p) {
                    return Err(Error::invalid(format!(
                        "arc {}->{} not present",
                        mv.parent, mv.child
                    )));
                }
                if constraints.is_whitelisted(&mv.parent, &mv.child) {
                    return Ok(MoveOutcome::Rejected(Rejection::WhitelistViolation));
                }
                if constraints.is_blacklisted(&mv.child, &mv.parent) {
                    return Ok(MoveOutcome::Rejected(Rejection::Blacklisted));
                }
                let mut next = self.clone();
                next.parents[c].remove(&p);
                // Any remaining path p ~> c would close a cycle with c -> p.
                if next.reachable(p, c) {
                    return Ok(MoveOutcome::Rejected(Rejection::Cycle));
                }
                next.parents[p].insert(c);
                Ok(MoveOutcome::Accepted(next))
            }
        }
    }

    /// Topological order; ties broken by declaration order.
    pub fn topological_order(&self) -> Vec<&str> {
        let n = self.nodes.len();
        let mut remaining: Vec<usize> = self.parents.iter().map(|ps| ps.len()).collect();
        let mut placed = vec![false; n];
        let mut order = Vec::with_capacity(n);
        for _ in 0..n {
            let next = (0..n)
                .find(|&i| !placed[i] && remaining[i] == 0)
                .expect("acyclic by invariant");
            placed[next] = true;
            order.push(self.nodes[next].as_str());
            for (c, ps) in self.parents.iter().enumerate() {
                if ps.contains(&next) {
                    remaining[c] -= 1;
                }
            }
        }
        order
    }

    /// Parents, children and co-parents of `node`, in declaration order.
    pub fn markov_blanket(&self, node: &str) -> Result<Vec<&str>> {
        let x = self.idx(node)?;
        let mut blanket = BTreeSet::new();
        blanket.extend(self.parents[x].iter().copied());
        for (c, ps) in self.parents.iter().enumerate() {
            if ps.contains(&x) {
                blanket.insert(c);
                blanket.extend(ps.iter().copied());
            }
        }
        blanket.remove(&x);
        let mut sorted: Vec<usize> = blanket.into_iter().collect();
        sorted.sort_unstable();
        Ok(sorted.into_iter().map(|i| self.nodes[i].as_str()).collect())
    }

    /// Graphviz rendering with nodes in declaration order and arcs in the
    /// deterministic export order.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph g {\n");
        for name in &self.nodes {
            out.push_str(&format!("  \"{name}\";\n"));
        }
        for (p, c) in self.arcs() {
            out.push_str(&format!("  \"{p}\" -> \"{c}\";\n"));
        }
        out.push_str("}\n");
        out
    }

    /// `parent,child` CSV in the deterministic export order.
    pub fn arcs_csv(&self) -> String {
        let mut out = String::from("parent,child\n");
        for (p, c) in self.arcs() {
            out.push_str(&format!("{p},{c}\n"));
        }
        out
    }
}

/// Structural Hamming distance between the skeletons (undirected edge sets)
/// of two graphs over the same node set.
pub fn skeleton_shd(a: &Dag, b: &Dag) -> Result<usize> {
    let mut named: Vec<&String> = a.nodes.iter().collect();
    named.sort();
    let mut other: Vec<&String> = b.nodes.iter().collect();
    other.sort();
    if named != other {
        return Err(Error::invalid("skeleton distance needs identical node sets"));
    }
    let undirected = |g: &Dag| -> BTreeSet<(String, String)> {
        g.arcs()
            .into_iter()
            .map(|(p, c)| if p <= c { (p, c) } else { (c, p) })
            .collect()
    };
    let ea = undirected(a);
    let eb = undirected(b);
    Ok(ea.symmetric_difference(&eb).count())
}
