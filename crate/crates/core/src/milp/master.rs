//! The structure-learning master problem and its lazy constraint loop.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{MilpBackend, MilpError, MilpProblem, Row};
use crate::likelihood::{loglik_edges, ChoiceGroups, LikelihoodError, ModelParams, TreeLayout};
use crate::nesttree::{candidate_edges, Edge, NestingTree, TreeSignature};

/// Box on taste coefficients inside the master.
pub const BETA_BOX: f64 = 50.0;
const SLACK_UB: f64 = 1e6;
const ETA_UB: f64 = 1e6;
const MAX_LAZY_ROUNDS: usize = 20_000;

/// Whether a tree on `m` alternatives with exactly `nests` nests and height
/// exactly `levels` is admitted by the regularization grid.
pub fn cell_feasible(m: usize, nests: usize, levels: usize) -> bool {
    if m < 2 {
        return false;
    }
    if nests == 0 {
        return levels == 1;
    }
    nests <= m - 2 && levels >= 2 && levels <= nests + 1
}

/// Supporting hyperplane of `-L` at an estimated tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearizationCut {
    pub anchor_edges: Vec<Edge>,
    pub beta: Vec<f64>,
    /// Indexed by internal node.
    pub mu: Vec<f64>,
    /// `-L` at the anchor.
    pub value: f64,
    pub grad_edges: BTreeMap<Edge, f64>,
    pub grad_beta: Vec<f64>,
    /// Indexed by internal node; zero for the root and excluded slots.
    pub grad_mu: Vec<f64>,
}

impl LinearizationCut {
    pub fn at(groups: &ChoiceGroups, tree: &NestingTree, params: &ModelParams) -> Result<Self, LikelihoodError> {
        let layout = TreeLayout::new(tree)?;
        let (ll, gb, gm, ge) = loglik_edges(groups, &layout, params)?;
        Ok(Self {
            anchor_edges: tree.edges(),
            beta: params.beta.clone(),
            mu: params.mu.clone(),
            value: -ll,
            grad_edges: ge.into_iter().map(|(e, g)| (e, -g)).collect(),
            grad_beta: gb.iter().map(|g| -g).collect(),
            grad_mu: gm.iter().map(|g| -g).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LazyKind {
    Cycle,
    Height,
    NoGood,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LazyCut {
    pub kind: LazyKind,
    pub row: Row,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MasterSolution {
    pub tree: NestingTree,
    /// Epigraph value in units of `-L`.
    pub eta: f64,
    /// Master objective including the slack penalty, per observation.
    pub objective: f64,
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
    pub lazy_rounds: usize,
    pub nodes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MasterOutcome {
    Tree(MasterSolution),
    /// No unvisited tree satisfies the cut pool.
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct MasterProblem {
    m: usize,
    nests: usize,
    levels: usize,
    q: usize,
    mu_max: f64,
    /// Penalty on linearization slacks.
    pub rho: f64,
    /// Multiplies cut values and gradients; `1/N` keeps the master well scaled.
    pub scale: f64,
    edges: Vec<Edge>,
    edge_index: BTreeMap<Edge, usize>,
    base: MilpProblem,
    y_var: Vec<usize>,
    eta: usize,
    beta_var: Vec<usize>,
    /// Indexed by slot.
    mu_var: Vec<usize>,
    cuts: Vec<LinearizationCut>,
    lazy: Vec<LazyCut>,
    trace: Vec<f64>,
}

impl MasterProblem {
    /// Static constraints for a cell with exactly `nests` nests and height
    /// `levels`, over `q` taste coefficients.
    pub fn new(m: usize, nests: usize, levels: usize, q: usize, mu_max: f64) -> Result<Self, MilpError> {
        if !cell_feasible(m, nests, levels) {
            return Err(MilpError::InfeasibleRegularization { m, nests, levels });
        }
        let p = NestingTree::slots_for(m);
        let edges = candidate_edges(m);
        let mut base = MilpProblem::default();
        let included = |node: usize| node == 0 || node > p || node <= nests;
        // chain root -> n1 -> ... -> n_{L-1} fixes the deepest path
        let chain: BTreeSet<Edge> = (0..levels.saturating_sub(1)).map(|i| (i, i + 1)).collect();
        for &(u, v) in &edges {
            let lb = if chain.contains(&(u, v)) { 1.0 } else { 0.0 };
            let ub = if included(u) && included(v) { 1.0 } else { 0.0 };
            base.add_var(&format!("x_{u}_{v}"), 0.0, lb, ub, true);
        }
        let edge_index: BTreeMap<Edge, usize> = edges.iter().enumerate().map(|(j, &e)| (e, j)).collect();
        let y_var: Vec<usize> = (1..=p)
            .map(|s| {
                let on = if s <= nests { 1.0 } else { 0.0 };
                base.add_var(&format!("y_{s}"), 0.0, on, on, true)
            })
            .collect();
        let delta = base.add_var("delta", 0.0, 0.0, if p > 0 { 1.0 } else { 0.0 }, true);
        let eta = base.add_var("eta", 1.0, -10.0 * (m as f64).ln(), ETA_UB, false);
        let beta_var: Vec<usize> = (0..q)
            .map(|k| base.add_var(&format!("beta_{k}"), 0.0, -BETA_BOX, BETA_BOX, false))
            .collect();
        let mu_var: Vec<usize> = (1..=p)
            .map(|s| {
                let hi = if s <= nests { mu_max } else { 1.0 };
                base.add_var(&format!("mu_{s}"), 0.0, 1.0, hi, false)
            })
            .collect();
        let x = |u: usize, v: usize| edge_index[&(u, v)];
        let nest_nodes: Vec<usize> = (1..=p).collect();
        let all_children: Vec<usize> = (1..=p + m).collect();

        // total edge count: one less than the number of included nodes
        let mut coefs: Vec<(usize, f64)> = (0..edges.len()).map(|j| (j, 1.0)).collect();
        coefs.extend(y_var.iter().map(|&j| (j, -1.0)));
        base.rows.push(Row::eq(coefs, m as f64));
        // scales rise along nest-to-nest edges
        for &i in &nest_nodes {
            for &j in &nest_nodes {
                if i != j && i <= nests && j <= nests {
                    let big = mu_max - 1.0;
                    base.rows.push(Row::ge(
                        vec![(mu_var[j - 1], 1.0), (mu_var[i - 1], -1.0), (x(i, j), -big)],
                        -big,
                    ));
                }
            }
        }
        // each leaf has one parent
        for leaf in p + 1..=p + m {
            let coefs = (0..=p).map(|u| (x(u, leaf), 1.0)).collect();
            base.rows.push(Row::eq(coefs, 1.0));
        }
        for &n in &nest_nodes {
            let y = y_var[n - 1];
            // in-degree equals inclusion
            let mut coefs: Vec<(usize, f64)> = (0..=p).filter(|&u| u != n).map(|u| (x(u, n), 1.0)).collect();
            coefs.push((y, -1.0));
            base.rows.push(Row::eq(coefs, 0.0));
            // at least two and at most m - 1 children when included
            let out: Vec<(usize, f64)> = all_children.iter().filter(|&&v| v != n).map(|&v| (x(n, v), 1.0)).collect();
            let mut lo = out.clone();
            lo.push((y, -2.0));
            base.rows.push(Row::ge(lo, 0.0));
            let mut hi = out;
            hi.push((y, -((m - 1) as f64)));
            base.rows.push(Row::le(hi, 0.0));
        }
        base.rows.push(Row::ge(all_children.iter().map(|&v| (x(0, v), 1.0)).collect(), 2.0));
        // delta flags the presence of any nest
        let mut coefs: Vec<(usize, f64)> = nest_nodes.iter().map(|&n| (x(0, n), -1.0)).collect();
        coefs.push((delta, 1.0));
        base.rows.push(Row::le(coefs, 0.0));
        let mut coefs: Vec<(usize, f64)> = y_var.iter().map(|&j| (j, 1.0)).collect();
        coefs.push((delta, -(p as f64)));
        base.rows.push(Row::le(coefs, 0.0));
        base.rows.push(Row::eq(y_var.iter().map(|&j| (j, 1.0)).collect(), nests as f64));

        Ok(Self {
            m,
            nests,
            levels,
            q,
            mu_max,
            rho: 1000.0,
            scale: 1.0,
            edges,
            edge_index,
            base,
            y_var,
            eta,
            beta_var,
            mu_var,
            cuts: Vec::new(),
            lazy: Vec::new(),
            trace: Vec::new(),
        })
    }

    pub fn n_alternatives(&self) -> usize {
        self.m
    }

    pub fn nests(&self) -> usize {
        self.nests
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn mu_max(&self) -> f64 {
        self.mu_max
    }

    pub fn cuts(&self) -> &[LinearizationCut] {
        &self.cuts
    }

    pub fn lazy_cuts(&self) -> &[LazyCut] {
        &self.lazy
    }

    /// Master objective after each re-solve of the last [`MasterProblem::solve`].
    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn add_linearization(&mut self, cut: LinearizationCut) {
        assert_eq!(cut.beta.len(), self.q, "cut has wrong taste dimension");
        self.cuts.push(cut);
    }

    /// Excludes exactly this 0/1 edge vector.
    pub fn add_no_good(&mut self, tree: &NestingTree) {
        let active: BTreeSet<Edge> = tree.edges().into_iter().collect();
        let mut coefs = Vec::with_capacity(self.edges.len());
        let mut ones = 0.0;
        for (j, e) in self.edges.iter().enumerate() {
            if active.contains(e) {
                coefs.push((j, 1.0));
                ones += 1.0;
            } else {
                coefs.push((j, -1.0));
            }
        }
        self.push_lazy(LazyKind::NoGood, Row::le(coefs, ones - 1.0));
    }

    fn push_lazy(&mut self, kind: LazyKind, row: Row) {
        if !self.lazy.iter().any(|c| c.row == row) {
            self.lazy.push(LazyCut { kind, row });
        }
    }

    /// The full MILP: static rows, one slack per linearization and the lazy pool.
    pub fn problem(&self) -> MilpProblem {
        let mut p = self.base.clone();
        for (i, cut) in self.cuts.iter().enumerate() {
            let s = p.add_var(&format!("s_{i}"), self.rho, 0.0, SLACK_UB, false);
            // eta + s - g.z >= f - g.z0, everything multiplied by scale
            let mut coefs = vec![(self.eta, 1.0), (s, 1.0)];
            let mut rhs = cut.value;
            let anchor: BTreeSet<Edge> = cut.anchor_edges.iter().copied().collect();
            for (e, &g) in &cut.grad_edges {
                let Some(&j) = self.edge_index.get(e) else { continue };
                if g == 0.0 {
                    continue;
                }
                coefs.push((j, -g * self.scale));
                if anchor.contains(e) {
                    rhs -= g;
                }
            }
            for (k, &g) in cut.grad_beta.iter().enumerate() {
                if g != 0.0 {
                    coefs.push((self.beta_var[k], -g * self.scale));
                    rhs -= g * cut.beta[k];
                }
            }
            for (node, &g) in cut.grad_mu.iter().enumerate().skip(1) {
                if g != 0.0 && node <= self.mu_var.len() {
                    coefs.push((self.mu_var[node - 1], -g * self.scale));
                    rhs -= g * cut.mu[node];
                }
            }
            p.rows.push(Row::ge(coefs, rhs * self.scale));
        }
        p.rows.extend(self.lazy.iter().map(|c| c.row.clone()));
        p
    }

    fn tree_from(&self, x: &[f64]) -> NestingTree {
        let edges: Vec<Edge> = self
            .edges
            .iter()
            .enumerate()
            .filter(|&(j, _)| x[j] > 0.5)
            .map(|(_, &e)| e)
            .collect();
        let included = self.y_var.iter().map(|&j| x[j] > 0.5).collect();
        NestingTree::from_edges(self.m, included, &edges)
    }

    /// Nest sets of cycles found by chasing parents from every nest.
    fn cycles(&self, tree: &NestingTree) -> Vec<Vec<usize>> {
        let mut found: BTreeSet<Vec<usize>> = BTreeSet::new();
        for start in 1..=NestingTree::slots_for(self.m) {
            let mut path = vec![start];
            let mut u = start;
            while let Some(par) = tree.parent(u) {
                if par == 0 {
                    break;
                }
                if let Some(pos) = path.iter().position(|&n| n == par) {
                    let mut cyc = path[pos..].to_vec();
                    cyc.sort_unstable();
                    found.insert(cyc);
                    break;
                }
                path.push(par);
                u = par;
            }
        }
        found.into_iter().collect()
    }

    /// Cut-and-resolve until the master yields a valid, unvisited tree of
    /// the cell's shape, or proves none is left.
    pub fn solve(
        &mut self,
        backend: &dyn MilpBackend,
        visited: &BTreeSet<TreeSignature>,
    ) -> Result<MasterOutcome, MilpError> {
        self.trace.clear();
        for round in 0..MAX_LAZY_ROUNDS {
            let problem = self.problem();
            let sol = match backend.solve(&problem) {
                Ok(s) => s,
                Err(MilpError::Infeasible) => return Ok(MasterOutcome::Infeasible),
                Err(e) => return Err(e),
            };
            self.trace.push(sol.objective);
            let tree = self.tree_from(&sol.x);
            let cycles = self.cycles(&tree);
            if !cycles.is_empty() {
                for nodes in cycles {
                    let coefs = self
                        .edges
                        .iter()
                        .enumerate()
                        .filter(|(_, (u, v))| nodes.contains(u) && nodes.contains(v))
                        .map(|(j, _)| (j, 1.0))
                        .collect();
                    self.push_lazy(LazyKind::Cycle, Row::le(coefs, nodes.len() as f64 - 1.0));
                }
                continue;
            }
            let violations = tree.validate();
            if !violations.is_empty() {
                return Err(MilpError::InvalidTree(format!("{violations:?}")));
            }
            if tree.height() > self.levels {
                self.add_height_cut(&tree);
                continue;
            }
            if visited.contains(&tree.signature()) {
                self.add_no_good(&tree);
                continue;
            }
            if tree.n_nests() != self.nests {
                return Err(MilpError::InvalidTree(format!(
                    "{} nests, expected {}",
                    tree.n_nests(),
                    self.nests
                )));
            }
            let mut mu = vec![1.0; 1 + self.mu_var.len()];
            for (s, &j) in self.mu_var.iter().enumerate() {
                mu[s + 1] = sol.x[j];
            }
            return Ok(MasterOutcome::Tree(MasterSolution {
                tree,
                eta: sol.x[self.eta] / self.scale,
                objective: sol.objective,
                beta: self.beta_var.iter().map(|&j| sol.x[j]).collect(),
                mu,
                lazy_rounds: round,
                nodes: sol.nodes,
            }));
        }
        Err(MilpError::LazyLimit(MAX_LAZY_ROUNDS))
    }

    /// The first `L + 1` edges on a path that is too deep can't all be present.
    fn add_height_cut(&mut self, tree: &NestingTree) {
        let deep = (0..self.m)
            .map(|a| tree.leaf_node(a))
            .find(|&u| tree.depth(u) > self.levels)
            .expect("height exceeds the limit");
        let mut path = tree.ancestry(deep);
        path.reverse();
        let coefs = path[..self.levels + 2]
            .windows(2)
            .map(|w| (self.edge_index[&(w[0], w[1])], 1.0))
            .collect();
        self.push_lazy(LazyKind::Height, Row::le(coefs, self.levels as f64));
    }
}

/// Any valid tree with exactly `nests` nests and height `levels`.
pub fn find_initial_tree(
    m: usize,
    nests: usize,
    levels: usize,
    backend: &dyn MilpBackend,
) -> Result<NestingTree, MilpError> {
    let mut mp = MasterProblem::new(m, nests, levels, 0, 10.0)?;
    match mp.solve(backend, &BTreeSet::new())? {
        MasterOutcome::Tree(s) => Ok(s.tree),
        MasterOutcome::Infeasible => Err(MilpError::InfeasibleRegularization { m, nests, levels }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::milp::BranchAndBound;
    use crate::nesttree::enumerate_trees;

    /// Loops the master, cutting every emitted tree, until it is exhausted.
    fn exhaust(m: usize, nests: usize, levels: usize) -> Vec<NestingTree> {
        let bb = BranchAndBound::default();
        let mut mp = MasterProblem::new(m, nests, levels, 0, 10.0).unwrap();
        let mut visited = BTreeSet::new();
        let mut out = Vec::new();
        while let MasterOutcome::Tree(s) = mp.solve(&bb, &visited).unwrap() {
            assert!(s.tree.is_valid());
            assert_eq!(s.tree.n_nests(), nests);
            assert_eq!(s.tree.height(), levels);
            assert!(visited.insert(s.tree.signature()), "signature emitted twice");
            mp.add_no_good(&s.tree);
            out.push(s.tree);
            assert!(out.len() < 1000);
        }
        out
    }

    fn exact_cell(m: usize, nests: usize, levels: usize) -> BTreeSet<TreeSignature> {
        enumerate_trees(m, Some(nests), Some(levels))
            .unwrap()
            .into_iter()
            .filter(|t| t.n_nests() == nests && t.height() == levels)
            .map(|t| t.signature())
            .collect()
    }

    #[test]
    fn grid_rule() {
        assert!(cell_feasible(4, 0, 1));
        assert!(!cell_feasible(4, 0, 2));
        assert!(cell_feasible(4, 2, 3));
        assert!(!cell_feasible(4, 2, 4));
        assert!(!cell_feasible(4, 3, 2));
        assert!(!cell_feasible(4, 1, 1));
        assert!(matches!(
            MasterProblem::new(4, 3, 2, 0, 10.0),
            Err(MilpError::InfeasibleRegularization { .. })
        ));
    }

    #[test]
    fn three_alternatives_one_nest() {
        let trees = exhaust(3, 1, 2);
        assert_eq!(trees.len(), 3);
    }

    #[test]
    fn exhausting_matches_enumeration() {
        for m in 2..=4 {
            for nests in 0..=m - 2 {
                for levels in 1..=nests + 1 {
                    if !cell_feasible(m, nests, levels) {
                        continue;
                    }
                    let got: BTreeSet<_> = exhaust(m, nests, levels).iter().map(|t| t.signature()).collect();
                    assert_eq!(got, exact_cell(m, nests, levels), "m={m} M={nests} L={levels}");
                }
            }
        }
    }

    #[test]
    fn flat_cell_is_unique() {
        let t = find_initial_tree(5, 0, 1, &BranchAndBound::default()).unwrap();
        assert_eq!(t.signature(), NestingTree::flat(5).signature());
        assert_eq!(exhaust(5, 0, 1).len(), 1);
    }

    #[test]
    fn initial_trees() {
        let bb = BranchAndBound::default();
        let t = find_initial_tree(6, 4, 5, &bb).unwrap();
        assert!(t.is_valid());
        assert_eq!((t.n_nests(), t.height()), (4, 5));
        let t = find_initial_tree(4, 2, 2, &bb).unwrap();
        assert_eq!((t.n_nests(), t.height()), (2, 2));
        assert_eq!(t.children(0).iter().filter(|&&c| t.is_nest(c)).count(), 2);
    }

    #[test]
    fn no_good_excludes_its_tree() {
        let bb = BranchAndBound::default();
        let mut mp = MasterProblem::new(4, 1, 2, 0, 10.0).unwrap();
        let MasterOutcome::Tree(s) = mp.solve(&bb, &BTreeSet::new()).unwrap() else {
            panic!("expected a tree")
        };
        mp.add_no_good(&s.tree);
        let row = &mp.lazy_cuts().last().unwrap().row;
        let x: Vec<f64> = mp
            .edges
            .iter()
            .map(|e| if s.tree.has_edge(e.0, e.1) { 1.0 } else { 0.0 })
            .collect();
        assert!(row.activity(&x) > row.hi);
    }

    #[test]
    fn lazy_objective_is_monotone() {
        let bb = BranchAndBound::default();
        let mut mp = MasterProblem::new(5, 2, 3, 0, 10.0).unwrap();
        let cut = LinearizationCut {
            anchor_edges: vec![],
            beta: vec![],
            mu: vec![1.0; 4],
            value: 0.0,
            grad_edges: candidate_edges(5)
                .into_iter()
                .enumerate()
                .map(|(i, e)| (e, ((i * 7) % 11) as f64 - 5.0))
                .collect(),
            grad_beta: vec![],
            grad_mu: vec![0.0; 4],
        };
        mp.add_linearization(cut);
        let mut visited = BTreeSet::new();
        for _ in 0..5 {
            let MasterOutcome::Tree(s) = mp.solve(&bb, &visited).unwrap() else { break };
            for w in mp.trace().windows(2) {
                assert!(w[1] >= w[0] - 1e-9);
            }
            visited.insert(s.tree.signature());
        }
    }

    #[test]
    fn convex_surrogate_sandwich() {
        // f(x, beta) = c.x + (beta - 1)^2 is convex, so every cut underestimates
        // it and the master bound cannot exceed the best remaining tree.
        let m = 4;
        let p = NestingTree::slots_for(m);
        // leaf weights paid when a leaf sits in any nest: invariant to relabeling
        let c: BTreeMap<Edge, f64> = candidate_edges(m)
            .into_iter()
            .map(|(u, v)| (
                (u, v),
                if v > p && u != 0 { ((v * 5) % 9) as f64 * 0.3 } else { 0.0 },
            ))
            .collect();
        let f = |t: &NestingTree, b: f64| t.edges().iter().map(|e| c[e]).sum::<f64>() + (b - 1.0).powi(2);
        let pool: Vec<NestingTree> = enumerate_trees(m, Some(2), Some(3))
            .unwrap()
            .into_iter()
            .filter(|t| t.n_nests() == 2 && t.height() == 3)
            .collect();
        let bb = BranchAndBound::default();
        let mut mp = MasterProblem::new(m, 2, 3, 1, 10.0).unwrap();
        let mut visited = BTreeSet::new();
        let mut trees_seen = Vec::new();
        let mut tree = find_initial_tree(m, 2, 3, &bb).unwrap();
        let mut b = -2.0;
        loop {
            visited.insert(tree.signature());
            trees_seen.push(tree.clone());
            mp.add_linearization(LinearizationCut {
                anchor_edges: tree.edges(),
                beta: vec![b],
                mu: vec![1.0; 3],
                value: f(&tree, b),
                grad_edges: c.clone(),
                grad_beta: vec![2.0 * (b - 1.0)],
                grad_mu: vec![0.0; 3],
            });
            match mp.solve(&bb, &visited).unwrap() {
                MasterOutcome::Infeasible => break,
                MasterOutcome::Tree(s) => {
                    let best_left = pool
                        .iter()
                        .filter(|t| !visited.contains(&t.signature()))
                        .map(|t| f(t, 1.0))
                        .fold(f64::INFINITY, f64::min);
                    assert!(s.eta <= best_left + 1e-6, "{} > {best_left}", s.eta);
                    tree = s.tree;
                    b = s.beta[0];
                }
            }
        }
        assert_eq!(trees_seen.len(), pool.len());
    }
}
