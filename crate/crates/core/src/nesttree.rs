//! Nesting trees over a universal choice set.
//!
//! Node ids: `0` is the root, `1..=p` are nest slots and `p+1..=p+m` are the
//! leaves, with `p = m - 2` slots (a non-degenerate tree never needs more).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Edge = (usize, usize);

/// Largest choice set accepted by [`enumerate_trees`].
pub const MAX_ENUMERATION: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("partition contains singleton subset {0:?}")]
    DegeneratePartition(Vec<usize>),
    #[error("partition is not laminar or misses the full set")]
    InvalidPartition,
    #[error("tree is invalid: {0:?}")]
    Invalid(Vec<Violation>),
    #[error("scale parameters decrease along edge {0:?}")]
    ScaleViolation(Edge),
    #[error("enumeration is limited to m <= {MAX_ENUMERATION}, got {0}")]
    TooLarge(usize),
    #[error("need at least two alternatives, got {0}")]
    TooSmall(usize),
    #[error("cannot parse tree: {0}")]
    Parse(String),
}

/// A broken structural invariant.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Violation {
    NodeOutOfRange(Edge),
    SelfArc(usize),
    RootHasParent,
    LeafHasChildren(usize),
    LeafInDegree { leaf: usize, count: usize },
    NestInDegree { nest: usize, count: usize },
    ExcludedNestHasEdges(usize),
    DegenerateNest { nest: usize, children: usize },
    RootDegree(usize),
    EdgeCount { edges: usize, nodes: usize },
    Cycle(Vec<usize>),
    Disconnected(usize),
    TooManyNests(usize),
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct NestingTree {
    m: usize,
    included: Vec<bool>,
    out: Vec<Vec<usize>>,
    inn: Vec<Vec<usize>>,
}

impl fmt::Debug for NestingTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NestingTree")
            .field("m", &self.m)
            .field("included", &self.included)
            .field("edges", &self.edges())
            .finish()
    }
}

impl NestingTree {
    pub fn slots_for(m: usize) -> usize {
        m.saturating_sub(2)
    }

    /// Builds a graph without checking tree invariants; see [`NestingTree::validate`].
    pub fn from_edges(m: usize, included: Vec<bool>, edges: &[Edge]) -> Self {
        let p = Self::slots_for(m);
        let mut included = included;
        included.resize(p, false);
        let n = 1 + p + m;
        let mut out = vec![Vec::new(); n];
        let mut inn = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u < n && v < n {
                out[u].push(v);
                inn[v].push(u);
            } else {
                // keep out-of-range edges visible to validation via a sentinel
                out.resize(n.max(u + 1).max(v + 1), Vec::new());
                inn.resize(out.len(), Vec::new());
                out[u].push(v);
                inn[v].push(u);
            }
        }
        for l in out.iter_mut().chain(inn.iter_mut()) {
            l.sort_unstable();
            l.dedup();
        }
        Self {
            m,
            included,
            out,
            inn,
        }
    }

    /// Builds and validates.
    pub fn new(m: usize, included: Vec<bool>, edges: &[Edge]) -> Result<Self, TreeError> {
        let t = Self::from_edges(m, included, edges);
        let v = t.validate();
        if v.is_empty() {
            Ok(t)
        } else {
            Err(TreeError::Invalid(v))
        }
    }

    /// All leaves directly under the root.
    pub fn flat(m: usize) -> Self {
        let p = Self::slots_for(m);
        let edges: Vec<Edge> = (0..m).map(|a| (0, 1 + p + a)).collect();
        Self::from_edges(m, vec![false; p], &edges)
    }

    pub fn n_alternatives(&self) -> usize {
        self.m
    }

    pub fn nest_slots(&self) -> usize {
        self.included.len()
    }

    pub fn n_nodes(&self) -> usize {
        1 + self.nest_slots() + self.m
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn nest_node(&self, slot: usize) -> usize {
        1 + slot
    }

    pub fn leaf_node(&self, alt: usize) -> usize {
        1 + self.nest_slots() + alt
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        node > self.nest_slots() && node < self.n_nodes()
    }

    pub fn is_nest(&self, node: usize) -> bool {
        node >= 1 && node <= self.nest_slots()
    }

    /// Alternative index of a leaf node.
    pub fn leaf_alt(&self, node: usize) -> usize {
        node - 1 - self.nest_slots()
    }

    pub fn included(&self) -> &[bool] {
        &self.included
    }

    pub fn is_included(&self, node: usize) -> bool {
        node == 0 || (self.is_nest(node) && self.included[node - 1])
    }

    pub fn n_nests(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.out[node]
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.inn.get(node).and_then(|v| v.first().copied())
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.out.get(u).is_some_and(|c| c.binary_search(&v).is_ok())
    }

    pub fn edges(&self) -> Vec<Edge> {
        let mut e = Vec::new();
        for (u, ch) in self.out.iter().enumerate() {
            for &v in ch {
                e.push((u, v));
            }
        }
        e
    }

    /// Internal nodes (root and included nests) in preorder from the root.
    pub fn internal_preorder(&self) -> Vec<usize> {
        let mut order = Vec::new();
        let mut stack = vec![0];
        while let Some(u) = stack.pop() {
            order.push(u);
            for &c in self.out[u].iter().rev() {
                if !self.is_leaf(c) {
                    stack.push(c);
                }
            }
        }
        order
    }

    pub fn depth(&self, node: usize) -> usize {
        let mut d = 0;
        let mut cur = node;
        while let Some(p) = self.parent(cur) {
            d += 1;
            cur = p;
            if d > self.n_nodes() {
                break;
            }
        }
        d
    }

    /// Maximum number of edges on a root-to-leaf path.
    pub fn height(&self) -> usize {
        (0..self.m).map(|a| self.depth(self.leaf_node(a))).max().unwrap_or(0)
    }

    /// Nodes from `node` up to and including the root.
    pub fn ancestry(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.parent(cur) {
            path.push(p);
            cur = p;
            if path.len() > self.n_nodes() {
                break;
            }
        }
        path
    }

    /// Deepest internal node containing both leaves (alternative indices).
    pub fn smallest_common_nest(&self, i: usize, j: usize) -> usize {
        let ai = self.ancestry(self.leaf_node(i));
        let aj: HashSet<usize> = self.ancestry(self.leaf_node(j)).into_iter().collect();
        ai.into_iter()
            .skip(1)
            .find(|n| aj.contains(n))
            .unwrap_or(0)
    }

    /// Alternative indices below `node`, sorted.
    pub fn leaves_under(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        let mut guard = 0;
        while let Some(u) = stack.pop() {
            guard += 1;
            if guard > 4 * self.n_nodes() {
                break;
            }
            if self.is_leaf(u) {
                out.push(self.leaf_alt(u));
            } else {
                stack.extend(self.out[u].iter().copied());
            }
        }
        out.sort_unstable();
        out
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let n = self.n_nodes();
        let p = self.nest_slots();
        let mut edge_count = 0;
        for (u, ch) in self.out.iter().enumerate() {
            for &c in ch {
                edge_count += 1;
                if u >= n || c >= n {
                    v.push(Violation::NodeOutOfRange((u, c)));
                } else if u == c {
                    v.push(Violation::SelfArc(u));
                }
            }
        }
        if !v.is_empty() {
            return v;
        }
        if !self.inn[0].is_empty() {
            v.push(Violation::RootHasParent);
        }
        for a in 0..self.m {
            let leaf = self.leaf_node(a);
            if !self.out[leaf].is_empty() {
                v.push(Violation::LeafHasChildren(leaf));
            }
            if self.inn[leaf].len() != 1 {
                v.push(Violation::LeafInDegree {
                    leaf,
                    count: self.inn[leaf].len(),
                });
            }
        }
        for s in 0..p {
            let node = 1 + s;
            if self.included[s] {
                if self.inn[node].len() != 1 {
                    v.push(Violation::NestInDegree {
                        nest: node,
                        count: self.inn[node].len(),
                    });
                }
                if self.out[node].len() < 2 {
                    v.push(Violation::DegenerateNest {
                        nest: node,
                        children: self.out[node].len(),
                    });
                }
            } else if !self.inn[node].is_empty() || !self.out[node].is_empty() {
                v.push(Violation::ExcludedNestHasEdges(node));
            }
        }
        if self.out[0].len() < 2 {
            v.push(Violation::RootDegree(self.out[0].len()));
        }
        let n_included = 1 + self.n_nests() + self.m;
        if edge_count != n_included - 1 {
            v.push(Violation::EdgeCount {
                edges: edge_count,
                nodes: n_included,
            });
        }
        if self.n_nests() > p {
            v.push(Violation::TooManyNests(self.n_nests()));
        }
        if let Some(cycle) = self.find_cycle() {
            v.push(Violation::Cycle(cycle));
        }
        // connectivity: every leaf reaches the root by parent chasing
        for a in 0..self.m {
            let anc = self.ancestry(self.leaf_node(a));
            if anc.last() != Some(&0) || anc.len() > n {
                v.push(Violation::Disconnected(self.leaf_node(a)));
            }
        }
        v
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// Depth-first search for a back edge; returns the cycle's nodes.
    pub fn find_cycle(&self) -> Option<Vec<usize>> {
        let n = self.out.len();
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; n];
        let mut stack_path: Vec<usize> = Vec::new();
        for start in 0..n {
            if state[start] != 0 {
                continue;
            }
            let mut iters: Vec<(usize, usize)> = vec![(start, 0)];
            state[start] = 1;
            stack_path.push(start);
            while let Some(&mut (u, ref mut i)) = iters.last_mut() {
                if *i < self.out[u].len() {
                    let c = self.out[u][*i];
                    *i += 1;
                    match state[c] {
                        0 => {
                            state[c] = 1;
                            stack_path.push(c);
                            iters.push((c, 0));
                        }
                        1 => {
                            let pos = stack_path.iter().position(|&x| x == c).unwrap_or(0);
                            return Some(stack_path[pos..].to_vec());
                        }
                        _ => {}
                    }
                } else {
                    state[u] = 2;
                    stack_path.pop();
                    iters.pop();
                }
            }
        }
        None
    }

    pub fn to_partition(&self) -> NestedPartition {
        let mut subsets = BTreeSet::new();
        for u in self.internal_preorder() {
            subsets.insert(self.leaves_under(u));
        }
        NestedPartition {
            m: self.m,
            subsets,
        }
    }

    pub fn from_partition(p: &NestedPartition) -> Result<Self, TreeError> {
        p.check()?;
        let m = p.m;
        let slots = Self::slots_for(m);
        let full: Vec<usize> = (0..m).collect();
        // sort subsets so that supersets come first, then assign the parent of
        // each subset as the smallest strict superset
        let mut sets: Vec<&Vec<usize>> = p.subsets.iter().filter(|s| **s != full).collect();
        sets.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        let mut node_of: Vec<(Vec<usize>, usize)> = vec![(full.clone(), 0)];
        let mut edges = Vec::new();
        let mut included = vec![false; slots];
        for (i, s) in sets.iter().enumerate() {
            let node = 1 + i;
            included[i] = true;
            let parent = node_of
                .iter()
                .filter(|(sup, _)| sup.len() > s.len() && s.iter().all(|x| sup.binary_search(x).is_ok()))
                .min_by_key(|(sup, _)| sup.len())
                .map(|(_, n)| *n)
                .ok_or(TreeError::InvalidPartition)?;
            edges.push((parent, node));
            node_of.push(((*s).clone(), node));
        }
        for a in 0..m {
            let parent = node_of
                .iter()
                .filter(|(sup, _)| sup.binary_search(&a).is_ok())
                .min_by_key(|(sup, _)| sup.len())
                .map(|(_, n)| *n)
                .unwrap_or(0);
            edges.push((parent, 1 + slots + a));
        }
        Self::new(m, included, &edges)
    }

    pub fn signature(&self) -> TreeSignature {
        fn sig(t: &NestingTree, u: usize) -> String {
            if t.is_leaf(u) {
                return t.leaf_alt(u).to_string();
            }
            let mut parts: Vec<String> = t.out[u].iter().map(|&c| sig(t, c)).collect();
            parts.sort();
            format!("({})", parts.join(" "))
        }
        TreeSignature(sig(self, 0))
    }

    /// Reassigns nest slots so that included nests occupy the first slots in preorder.
    pub fn canonical(&self) -> NestingTree {
        let order: Vec<usize> = self.internal_preorder().into_iter().skip(1).collect();
        let p = self.nest_slots();
        let mut map = vec![usize::MAX; self.n_nodes()];
        map[0] = 0;
        for (i, &u) in order.iter().enumerate() {
            map[u] = 1 + i;
        }
        for a in 0..self.m {
            map[1 + p + a] = 1 + p + a;
        }
        let mut included = vec![false; p];
        for i in 0..order.len() {
            included[i] = true;
        }
        let edges: Vec<Edge> = self
            .edges()
            .into_iter()
            .map(|(u, v)| (map[u], map[v]))
            .collect();
        NestingTree::from_edges(self.m, included, &edges)
    }

    /// Nested-list text form, e.g. `(root a1 (n1 a2 (n2 a3 a4)))`.
    pub fn to_text(&self, names: &[String]) -> String {
        fn rec(t: &NestingTree, u: usize, names: &[String], out: &mut String) {
            if t.is_leaf(u) {
                out.push_str(&names[t.leaf_alt(u)]);
                return;
            }
            out.push('(');
            if u == 0 {
                out.push_str("root");
            } else {
                out.push_str(&format!("n{u}"));
            }
            for &c in &t.out[u] {
                out.push(' ');
                rec(t, c, names, out);
            }
            out.push(')');
        }
        let mut s = String::new();
        rec(self, 0, names, &mut s);
        s
    }

    /// Parses the text form; nest slots are assigned in preorder.
    pub fn parse_text(text: &str, names: &[String]) -> Result<Self, TreeError> {
        let sexp = Sexp::parse(text)?;
        Self::from_sexp(&sexp, names)
    }

    fn from_sexp(sexp: &Sexp, names: &[String]) -> Result<Self, TreeError> {
        let m = names.len();
        if m < 2 {
            return Err(TreeError::TooSmall(m));
        }
        let slots = Self::slots_for(m);
        let mut edges = Vec::new();
        let mut next_nest = 1;
        let mut seen = vec![false; m];
        fn walk(
            s: &Sexp,
            node: usize,
            names: &[String],
            slots: usize,
            next_nest: &mut usize,
            edges: &mut Vec<Edge>,
            seen: &mut [bool],
        ) -> Result<(), TreeError> {
            let Sexp::List(items) = s else {
                return Err(TreeError::Parse("expected a list".into()));
            };
            for item in items.iter().skip(1) {
                match item {
                    Sexp::Atom(name) => {
                        let a = names
                            .iter()
                            .position(|n| n == name)
                            .ok_or_else(|| TreeError::Parse(format!("unknown alternative `{name}`")))?;
                        if seen[a] {
                            return Err(TreeError::Parse(format!("alternative `{name}` appears twice")));
                        }
                        seen[a] = true;
                        edges.push((node, 1 + slots + a));
                    }
                    Sexp::List(_) => {
                        if *next_nest > slots {
                            return Err(TreeError::Parse("too many nests".into()));
                        }
                        let child = *next_nest;
                        *next_nest += 1;
                        edges.push((node, child));
                        walk(item, child, names, slots, next_nest, edges, seen)?;
                    }
                }
            }
            Ok(())
        }
        walk(sexp, 0, names, slots, &mut next_nest, &mut edges, &mut seen)?;
        if let Some(a) = seen.iter().position(|s| !s) {
            return Err(TreeError::Parse(format!("alternative `{}` missing", names[a])));
        }
        let mut included = vec![false; slots];
        for s in included.iter_mut().take(next_nest - 1) {
            *s = true;
        }
        Self::new(m, included, &edges)
    }

    /// Structured form with scale parameters attached (`mu` indexed by internal node).
    pub fn to_json(&self, names: &[String], mu: Option<&[f64]>) -> TreeJson {
        fn rec(t: &NestingTree, u: usize, names: &[String], mu: Option<&[f64]>) -> TreeJson {
            if t.is_leaf(u) {
                return TreeJson::Leaf(names[t.leaf_alt(u)].clone());
            }
            TreeJson::Nest {
                label: if u == 0 { "root".into() } else { format!("n{u}") },
                mu: mu.map(|m| m[u]),
                children: t.out[u].iter().map(|&c| rec(t, c, names, mu)).collect(),
            }
        }
        rec(self, 0, names, mu)
    }

    /// Inverse of [`NestingTree::to_json`]; returns the tree and a scale vector when present.
    pub fn from_json(json: &TreeJson, names: &[String]) -> Result<(Self, Option<Vec<f64>>), TreeError> {
        fn to_sexp(j: &TreeJson, mus: &mut Vec<Option<f64>>) -> Sexp {
            match j {
                TreeJson::Leaf(n) => Sexp::Atom(n.clone()),
                TreeJson::Nest { label, mu, children } => {
                    mus.push(*mu);
                    let mut items = vec![Sexp::Atom(label.clone())];
                    items.extend(children.iter().map(|c| to_sexp(c, mus)));
                    Sexp::List(items)
                }
            }
        }
        let mut mus = Vec::new();
        let sexp = to_sexp(json, &mut mus);
        let tree = Self::from_sexp(&sexp, names)?;
        let mu = if mus.iter().all(|m| m.is_some()) {
            // preorder of lists matches slot assignment order
            let mut v = vec![1.0; 1 + tree.nest_slots()];
            for (i, m) in mus.iter().enumerate() {
                v[i] = m.unwrap_or(1.0);
            }
            Some(v)
        } else {
            None
        };
        Ok((tree, mu))
    }
}

/// Serializable tree: a leaf is its alternative name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeJson {
    Leaf(String),
    Nest {
        label: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mu: Option<f64>,
        children: Vec<TreeJson>,
    },
}

#[derive(Debug)]
enum Sexp {
    Atom(String),
    List(Vec<Sexp>),
}

impl Sexp {
    fn parse(text: &str) -> Result<Sexp, TreeError> {
        let tokens: Vec<String> = text
            .replace('(', " ( ")
            .replace(')', " ) ")
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let mut pos = 0;
        let s = Self::parse_at(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(TreeError::Parse("trailing input".into()));
        }
        if !matches!(s, Sexp::List(_)) {
            return Err(TreeError::Parse("tree must be a list".into()));
        }
        Ok(s)
    }

    fn parse_at(tokens: &[String], pos: &mut usize) -> Result<Sexp, TreeError> {
        let tok = tokens
            .get(*pos)
            .ok_or_else(|| TreeError::Parse("unexpected end of input".into()))?;
        *pos += 1;
        match tok.as_str() {
            "(" => {
                let mut items = Vec::new();
                loop {
                    match tokens.get(*pos).map(String::as_str) {
                        Some(")") => {
                            *pos += 1;
                            break;
                        }
                        Some(_) => items.push(Self::parse_at(tokens, pos)?),
                        None => return Err(TreeError::Parse("unbalanced parentheses".into())),
                    }
                }
                if items.is_empty() || !matches!(items[0], Sexp::Atom(_)) {
                    return Err(TreeError::Parse("list must start with a label".into()));
                }
                Ok(Sexp::List(items))
            }
            ")" => Err(TreeError::Parse("unexpected `)`".into())),
            atom => Ok(Sexp::Atom(atom.to_string())),
        }
    }
}

/// Laminar family of alternative subsets, each stored sorted.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NestedPartition {
    pub m: usize,
    pub subsets: BTreeSet<Vec<usize>>,
}

impl NestedPartition {
    /// Normalizes input: sorts members, drops singletons, adds the full set.
    pub fn new(m: usize, subsets: impl IntoIterator<Item = Vec<usize>>) -> Result<Self, TreeError> {
        let mut out = BTreeSet::new();
        out.insert((0..m).collect::<Vec<_>>());
        for mut s in subsets {
            s.sort_unstable();
            s.dedup();
            if s.len() >= 2 {
                out.insert(s);
            }
        }
        let p = Self { m, subsets: out };
        p.check()?;
        Ok(p)
    }

    /// Strict construction: singletons are an error.
    pub fn strict(m: usize, subsets: impl IntoIterator<Item = Vec<usize>>) -> Result<Self, TreeError> {
        let mut out = BTreeSet::new();
        for mut s in subsets {
            s.sort_unstable();
            s.dedup();
            out.insert(s);
        }
        let p = Self { m, subsets: out };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<(), TreeError> {
        let full: Vec<usize> = (0..self.m).collect();
        if !self.subsets.contains(&full) {
            return Err(TreeError::InvalidPartition);
        }
        for s in &self.subsets {
            if s.len() < 2 {
                return Err(TreeError::DegeneratePartition(s.clone()));
            }
            if s.iter().any(|&x| x >= self.m) {
                return Err(TreeError::InvalidPartition);
            }
        }
        let sets: Vec<&Vec<usize>> = self.subsets.iter().collect();
        for (i, a) in sets.iter().enumerate() {
            for b in &sets[i + 1..] {
                let inter = a.iter().filter(|x| b.binary_search(x).is_ok()).count();
                if inter > 0 && inter != a.len() && inter != b.len() {
                    return Err(TreeError::InvalidPartition);
                }
            }
        }
        Ok(())
    }
}

/// Canonical form keyed only by leaf labels.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TreeSignature(pub String);

impl fmt::Display for TreeSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Symmetric `m x m` error covariance implied by a tree and its scales.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceMatrix {
    pub m: usize,
    /// Row-major, in utility² units.
    pub raw: Vec<f64>,
}

impl CovarianceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.raw[i * self.m + j]
    }

    /// Entries divided by `π²/6`.
    pub fn in_gumbel_units(&self) -> Vec<f64> {
        let c = PI * PI / 6.0;
        self.raw.iter().map(|x| x / c).collect()
    }
}

/// `mu` is indexed by internal node id (root first, then nest slots).
pub fn covariance_from_tree(tree: &NestingTree, mu: &[f64]) -> Result<CovarianceMatrix, TreeError> {
    check_scales(tree, mu)?;
    let m = tree.n_alternatives();
    let c = PI * PI / 6.0;
    let mr = mu[0];
    let mut raw = vec![0.0; m * m];
    for i in 0..m {
        raw[i * m + i] = c / (mr * mr);
        for j in i + 1..m {
            let b = tree.smallest_common_nest(i, j);
            let v = c * (1.0 / (mr * mr) - 1.0 / (mu[b] * mu[b]));
            raw[i * m + j] = v;
            raw[j * m + i] = v;
        }
    }
    Ok(CovarianceMatrix { m, raw })
}

/// Fails when a child nest has a smaller scale than its parent.
pub fn check_scales(tree: &NestingTree, mu: &[f64]) -> Result<(), TreeError> {
    for (u, v) in tree.edges() {
        if tree.is_leaf(v) {
            continue;
        }
        if mu[v] < mu[u] - 1e-12 {
            return Err(TreeError::ScaleViolation((u, v)));
        }
    }
    Ok(())
}

/// Structural shape used during enumeration: leaf index or a nest of children.
#[derive(Clone, Debug)]
enum Shape {
    Leaf(usize),
    Nest(Vec<Shape>),
}

fn set_partitions(items: &[usize]) -> Vec<Vec<Vec<usize>>> {
    // restricted growth strings keep each partition unique
    let mut out = Vec::new();
    let n = items.len();
    let mut assign = vec![0usize; n];
    fn rec(i: usize, blocks: usize, items: &[usize], assign: &mut [usize], out: &mut Vec<Vec<Vec<usize>>>) {
        if i == items.len() {
            let mut parts = vec![Vec::new(); blocks];
            for (k, &b) in assign.iter().enumerate() {
                parts[b].push(items[k]);
            }
            out.push(parts);
            return;
        }
        for b in 0..=blocks {
            assign[i] = b;
            rec(i + 1, blocks.max(b + 1), items, assign, out);
        }
    }
    if n > 0 {
        assign[0] = 0;
        rec(1, 1, items, &mut assign, &mut out);
    }
    out
}

fn shapes_for(items: &[usize], memo: &mut BTreeMap<Vec<usize>, Vec<Shape>>) -> Vec<Shape> {
    if items.len() == 1 {
        return vec![Shape::Leaf(items[0])];
    }
    if let Some(s) = memo.get(items) {
        return s.clone();
    }
    let mut result = Vec::new();
    for parts in set_partitions(items) {
        if parts.len() < 2 {
            continue;
        }
        let options: Vec<Vec<Shape>> = parts.iter().map(|p| shapes_for(p, memo)).collect();
        let mut idx = vec![0usize; options.len()];
        loop {
            result.push(Shape::Nest(
                idx.iter().enumerate().map(|(k, &i)| options[k][i].clone()).collect(),
            ));
            let mut k = 0;
            loop {
                if k == idx.len() {
                    break;
                }
                idx[k] += 1;
                if idx[k] < options[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == idx.len() {
                break;
            }
        }
    }
    memo.insert(items.to_vec(), result.clone());
    result
}

fn shape_to_tree(shape: &Shape, m: usize) -> NestingTree {
    let slots = NestingTree::slots_for(m);
    let mut edges = Vec::new();
    let mut next = 1;
    fn walk(s: &Shape, node: usize, slots: usize, next: &mut usize, edges: &mut Vec<Edge>) {
        if let Shape::Nest(children) = s {
            for c in children {
                match c {
                    Shape::Leaf(a) => edges.push((node, 1 + slots + a)),
                    Shape::Nest(_) => {
                        let child = *next;
                        *next += 1;
                        edges.push((node, child));
                        walk(c, child, slots, next, edges);
                    }
                }
            }
        }
    }
    walk(shape, 0, slots, &mut next, &mut edges);
    let included = (0..slots).map(|s| s + 1 < next).collect();
    NestingTree::from_edges(m, included, &edges)
}

/// Every non-degenerate nesting tree on `m` alternatives, optionally keeping
/// only trees with at most `max_nests` nests and height at most `max_height`.
pub fn enumerate_trees(
    m: usize,
    max_nests: Option<usize>,
    max_height: Option<usize>,
) -> Result<Vec<NestingTree>, TreeError> {
    if m > MAX_ENUMERATION {
        return Err(TreeError::TooLarge(m));
    }
    if m < 2 {
        return Err(TreeError::TooSmall(m));
    }
    let items: Vec<usize> = (0..m).collect();
    let mut memo = BTreeMap::new();
    let shapes = shapes_for(&items, &mut memo);
    drop(memo);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for s in &shapes {
        let t = shape_to_tree(s, m);
        if max_nests.is_some_and(|k| t.n_nests() > k) || max_height.is_some_and(|h| t.height() > h) {
            continue;
        }
        if seen.insert(t.signature()) {
            out.push(t);
        }
    }
    Ok(out)
}

/// Candidate edges of the complete graph: root and nests to nests and leaves.
pub fn candidate_edges(m: usize) -> Vec<Edge> {
    let p = NestingTree::slots_for(m);
    let mut e = Vec::new();
    for u in 0..=p {
        for v in 1..=p + m {
            if u != v {
                e.push((u, v));
            }
        }
    }
    e
}
