//! Mixed-integer linear programming: an embedded LP / branch-and-bound
//! kernel and the structure-learning master problem built on it.

mod bnb;
mod lp;
mod master;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bnb::BranchAndBound;
pub use master::{
    cell_feasible, find_initial_tree, LazyCut, LazyKind, LinearizationCut, MasterOutcome, MasterProblem, MasterSolution,
};

#[derive(Debug, Error, PartialEq)]
pub enum MilpError {
    #[error("problem is infeasible")]
    Infeasible,
    #[error("problem is unbounded")]
    Unbounded,
    #[error("branch-and-bound node limit reached")]
    NodeLimit,
    #[error("simplex iteration limit reached")]
    IterLimit,
    #[error("regularization (M={nests}, L={levels}) admits no tree on {m} alternatives")]
    InfeasibleRegularization { m: usize, nests: usize, levels: usize },
    #[error("lazy constraint loop exceeded {0} rounds")]
    LazyLimit(usize),
    #[error("master returned an invalid tree: {0}")]
    InvalidTree(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterLimit,
}

/// `lo <= sum coef * x <= hi`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub coefs: Vec<(usize, f64)>,
    pub lo: f64,
    pub hi: f64,
}

impl Row {
    pub fn le(coefs: Vec<(usize, f64)>, hi: f64) -> Self {
        Self {
            coefs,
            lo: f64::NEG_INFINITY,
            hi,
        }
    }

    pub fn ge(coefs: Vec<(usize, f64)>, lo: f64) -> Self {
        Self {
            coefs,
            lo,
            hi: f64::INFINITY,
        }
    }

    pub fn eq(coefs: Vec<(usize, f64)>, rhs: f64) -> Self {
        Self { coefs, lo: rhs, hi: rhs }
    }

    pub fn activity(&self, x: &[f64]) -> f64 {
        self.coefs.iter().map(|&(j, a)| a * x[j]).sum()
    }
}

/// Minimize `cost . x` subject to rows and bounds, with integer markers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MilpProblem {
    pub cost: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub integer: Vec<bool>,
    pub rows: Vec<Row>,
    /// Optional variable names for the text dump.
    pub names: Vec<String>,
}

impl MilpProblem {
    pub fn n_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn add_var(&mut self, name: &str, cost: f64, lb: f64, ub: f64, integer: bool) -> usize {
        self.cost.push(cost);
        self.lb.push(lb);
        self.ub.push(ub);
        self.integer.push(integer);
        self.names.push(name.to_string());
        self.cost.len() - 1
    }

    pub fn binary(&mut self, name: &str, cost: f64) -> usize {
        self.add_var(name, cost, 0.0, 1.0, true)
    }

    /// Plain-text dump in an LP-like layout, for debugging only.
    ///
    /// ```text
    /// minimize
    ///   obj: c1 x1 + c2 x2 ...
    /// subject to
    ///   r0: lo <= a1 x1 + ... <= hi
    /// bounds
    ///   lb <= x <= ub
    /// binaries
    ///   x1 x2 ...
    /// end
    /// ```
    pub fn to_lp_text(&self) -> String {
        let name = |j: usize| self.names.get(j).cloned().unwrap_or_else(|| format!("v{j}"));
        let mut s = String::from("minimize\n  obj:");
        for (j, &c) in self.cost.iter().enumerate() {
            if c != 0.0 {
                let _ = write!(s, " {c:+} {}", name(j));
            }
        }
        s.push_str("\nsubject to\n");
        for (r, row) in self.rows.iter().enumerate() {
            let _ = write!(s, "  r{r}: {} <=", row.lo);
            for &(j, a) in &row.coefs {
                let _ = write!(s, " {a:+} {}", name(j));
            }
            let _ = writeln!(s, " <= {}", row.hi);
        }
        s.push_str("bounds\n");
        for j in 0..self.n_vars() {
            let _ = writeln!(s, "  {} <= {} <= {}", self.lb[j], name(j), self.ub[j]);
        }
        s.push_str("binaries\n ");
        for j in (0..self.n_vars()).filter(|&j| self.integer[j]) {
            let _ = write!(s, " {}", name(j));
        }
        s.push_str("\nend\n");
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub nodes: usize,
}

/// Anything that can minimize a linear objective over linear constraints
/// with declared integer variables.
pub trait MilpBackend: Sync {
    fn solve(&self, problem: &MilpProblem) -> Result<MilpSolution, MilpError>;
}

/// Solves `problem` with the default kernel.
pub fn milp_kernel_solve(problem: &MilpProblem) -> Result<MilpSolution, MilpError> {
    BranchAndBound::default().solve(problem)
}
