//! Best-first branch and bound over the dual simplex kernel.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::lp::{Basis, Tableau};
use super::{LpStatus, MilpBackend, MilpError, MilpProblem, MilpSolution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchAndBound {
    /// Absolute optimality gap.
    pub gap: f64,
    pub int_tol: f64,
    pub max_nodes: usize,
    pub max_lp_iter: usize,
}

impl Default for BranchAndBound {
    fn default() -> Self {
        Self {
            gap: 1e-6,
            int_tol: 1e-6,
            max_nodes: 200_000,
            max_lp_iter: 50_000,
        }
    }
}

struct Node {
    bound: f64,
    depth: usize,
    id: usize,
    lb: Vec<f64>,
    ub: Vec<f64>,
    basis: Basis,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // max-heap: smallest bound first, then deepest, then newest
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then(self.depth.cmp(&other.depth))
            .then(self.id.cmp(&other.id))
    }
}

impl MilpBackend for BranchAndBound {
    fn solve(&self, p: &MilpProblem) -> Result<MilpSolution, MilpError> {
        let mut tab = Tableau::new(p);
        let root_basis = tab.basis().clone();
        let mut heap = BinaryHeap::new();
        heap.push(Node {
            bound: f64::NEG_INFINITY,
            depth: 0,
            id: 0,
            lb: p.lb.clone(),
            ub: p.ub.clone(),
            basis: root_basis,
        });
        let mut next_id = 1;
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut nodes = 0;
        while let Some(node) = heap.pop() {
            if let Some((inc, _)) = &best {
                if node.bound >= inc - self.gap {
                    continue;
                }
            }
            nodes += 1;
            if nodes > self.max_nodes {
                return Err(MilpError::NodeLimit);
            }
            // one-slot cache: the tableau still holds the last solved basis
            if tab.basis().basic != node.basis.basic {
                tab.install(node.basis.clone());
            }
            let out = tab.solve(p, &node.lb, &node.ub, self.max_lp_iter);
            match out.status {
                LpStatus::Infeasible => continue,
                LpStatus::Unbounded => return Err(MilpError::Unbounded),
                LpStatus::IterLimit => return Err(MilpError::IterLimit),
                LpStatus::Optimal => {}
            }
            if let Some((inc, _)) = &best {
                if out.objective >= inc - self.gap {
                    continue;
                }
            }
            // most fractional integer variable, lowest index on ties
            let mut branch: Option<(usize, f64)> = None;
            for j in 0..p.n_vars() {
                if !p.integer[j] {
                    continue;
                }
                let v = out.x[j];
                let frac = (v - v.floor()).min(v.ceil() - v);
                if frac > self.int_tol && branch.is_none_or(|(_, f)| frac > f + 1e-12) {
                    branch = Some((j, frac));
                }
            }
            let Some((j, _)) = branch else {
                let mut x = out.x;
                for k in 0..p.n_vars() {
                    if p.integer[k] {
                        x[k] = x[k].round();
                    }
                }
                best = Some((out.objective, x));
                continue;
            };
            let v = out.x[j];
            let basis = tab.basis().clone();
            let mut down_ub = node.ub.clone();
            down_ub[j] = v.floor();
            let mut up_lb = node.lb.clone();
            up_lb[j] = v.ceil();
            // the child pushed last is explored first among equal bounds
            let (first, second) = if v - v.floor() >= 0.5 {
                ((node.lb.clone(), down_ub), (up_lb, node.ub.clone()))
            } else {
                ((up_lb, node.ub.clone()), (node.lb.clone(), down_ub))
            };
            for (lb, ub) in [first, second] {
                heap.push(Node {
                    bound: out.objective,
                    depth: node.depth + 1,
                    id: next_id,
                    lb,
                    ub,
                    basis: basis.clone(),
                });
                next_id += 1;
            }
        }
        match best {
            Some((objective, x)) => Ok(MilpSolution { x, objective, nodes }),
            None => Err(MilpError::Infeasible),
        }
    }
}
