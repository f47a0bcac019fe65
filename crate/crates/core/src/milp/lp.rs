//! Bounded-variable dual simplex on a dense tableau.
//!
//! Every row `lo <= a.x <= hi` gets a logical column `s = a.x`, so the
//! system is `[A | -I] (x, s) = 0` with bounds on all columns. Starting
//! from the all-logical basis, placing each structural at the bound its
//! cost prefers gives a dual-feasible start.

use super::{MilpProblem, LpStatus};

const PIVOT_TOL: f64 = 1e-7;
const DUAL_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-9;
/// Stand-in for an infinite bound on the side dual feasibility needs.
pub(crate) const BIG_BOX: f64 = 1e7;
const REFACTOR_EVERY: usize = 100;
const STALL_PIVOTS: usize = 50;

/// Basis description that can rebuild a tableau.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Basis {
    /// Column index basic in each row.
    pub basic: Vec<usize>,
    /// For nonbasic columns: sitting at the upper bound.
    pub at_upper: Vec<bool>,
}

/// A linear program in bounded form plus its current tableau.
#[derive(Clone, Debug)]
pub struct Tableau {
    rows: usize,
    cols: usize,
    /// Original `[A | -I]`, row-major.
    orig: Vec<f64>,
    cost: Vec<f64>,
    /// `B^-1 [A | -I]`, row-major.
    t: Vec<f64>,
    /// Reduced costs.
    d: Vec<f64>,
    basis: Basis,
    is_basic: Vec<bool>,
    pivots: usize,
}

pub struct LpOutcome {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
}

impl Tableau {
    pub fn new(p: &MilpProblem) -> Self {
        let rows = p.rows.len();
        let n = p.n_vars();
        let cols = n + rows;
        let mut orig = vec![0.0; rows * cols];
        for (r, row) in p.rows.iter().enumerate() {
            for &(j, a) in &row.coefs {
                orig[r * cols + j] += a;
            }
            orig[r * cols + n + r] = -1.0;
        }
        let mut cost = p.cost.clone();
        cost.resize(cols, 0.0);
        let basis = Basis {
            basic: (n..cols).collect(),
            at_upper: (0..cols).map(|j| j < n && cost[j] < 0.0).collect(),
        };
        let mut tab = Self {
            rows,
            cols,
            orig,
            cost,
            t: Vec::new(),
            d: Vec::new(),
            basis: basis.clone(),
            is_basic: vec![false; cols],
            pivots: 0,
        };
        tab.install(basis);
        tab
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    /// Rebuilds the tableau for `basis` from the original matrix.
    pub fn install(&mut self, basis: Basis) {
        let (m, c) = (self.rows, self.cols);
        let mut is_basic = vec![false; c];
        for &j in &basis.basic {
            is_basic[j] = true;
        }
        // Gauss-Jordan on [B | orig]
        let mut b = vec![0.0; m * m];
        for r in 0..m {
            for (k, &j) in basis.basic.iter().enumerate() {
                b[r * m + k] = self.orig[r * c + j];
            }
        }
        let mut t = self.orig.clone();
        for k in 0..m {
            let piv = (k..m)
                .max_by(|&a, &bb| b[a * m + k].abs().total_cmp(&b[bb * m + k].abs()))
                .unwrap_or(k);
            if piv != k {
                for col in 0..m {
                    b.swap(k * m + col, piv * m + col);
                }
                for col in 0..c {
                    t.swap(k * c + col, piv * c + col);
                }
            }
            let pv = b[k * m + k];
            if pv.abs() < 1e-14 {
                continue;
            }
            let inv = 1.0 / pv;
            for col in 0..m {
                b[k * m + col] *= inv;
            }
            for col in 0..c {
                t[k * c + col] *= inv;
            }
            for r in 0..m {
                if r == k {
                    continue;
                }
                let f = b[r * m + k];
                if f == 0.0 {
                    continue;
                }
                for col in 0..m {
                    b[r * m + col] -= f * b[k * m + col];
                }
                for col in 0..c {
                    t[r * c + col] -= f * t[k * c + col];
                }
            }
        }
        self.t = t;
        self.basis = basis;
        self.is_basic = is_basic;
        self.recompute_costs();
    }

    fn recompute_costs(&mut self) {
        let c = self.cols;
        let mut d = self.cost.clone();
        for (r, &j) in self.basis.basic.iter().enumerate() {
            let cb = self.cost[j];
            if cb != 0.0 {
                for col in 0..c {
                    d[col] -= cb * self.t[r * c + col];
                }
            }
        }
        for &j in &self.basis.basic {
            d[j] = 0.0;
        }
        self.d = d;
    }

    fn bounds(&self, p: &MilpProblem, lb: &[f64], ub: &[f64], j: usize) -> (f64, f64) {
        let n = p.n_vars();
        if j < n {
            (lb[j].max(-BIG_BOX), ub[j].min(BIG_BOX))
        } else {
            let row = &p.rows[j - n];
            (row.lo, row.hi)
        }
    }

    /// Repairs nonbasic positions so reduced costs have the right sign.
    fn fix_dual_feasibility(&mut self, p: &MilpProblem, lb: &[f64], ub: &[f64]) {
        for j in 0..self.cols {
            if self.is_basic[j] {
                continue;
            }
            let (l, u) = self.bounds(p, lb, ub, j);
            if self.d[j] > 1e-12 && l.is_finite() {
                self.basis.at_upper[j] = false;
            } else if self.d[j] < -1e-12 && u.is_finite() {
                self.basis.at_upper[j] = true;
            } else if !l.is_finite() {
                self.basis.at_upper[j] = true;
            } else if !u.is_finite() {
                self.basis.at_upper[j] = false;
            }
        }
    }

    fn nonbasic_value(&self, p: &MilpProblem, lb: &[f64], ub: &[f64], j: usize) -> f64 {
        let (l, u) = self.bounds(p, lb, ub, j);
        if self.basis.at_upper[j] {
            u
        } else {
            l
        }
    }

    fn basic_values(&self, p: &MilpProblem, lb: &[f64], ub: &[f64]) -> Vec<f64> {
        let c = self.cols;
        let nb: Vec<(usize, f64)> = (0..c)
            .filter(|&j| !self.is_basic[j])
            .map(|j| (j, self.nonbasic_value(p, lb, ub, j)))
            .filter(|&(_, v)| v != 0.0)
            .collect();
        (0..self.rows)
            .map(|r| -nb.iter().map(|&(j, v)| self.t[r * c + j] * v).sum::<f64>())
            .collect()
    }

    fn pivot(&mut self, r: usize, q: usize) {
        let c = self.cols;
        let pv = self.t[r * c + q];
        let inv = 1.0 / pv;
        for col in 0..c {
            self.t[r * c + col] *= inv;
        }
        let prow: Vec<f64> = self.t[r * c..(r + 1) * c].to_vec();
        for rr in 0..self.rows {
            if rr == r {
                continue;
            }
            let f = self.t[rr * c + q];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.t[rr * c..(rr + 1) * c];
            for (x, &pr) in row.iter_mut().zip(&prow) {
                *x -= f * pr;
            }
            row[q] = 0.0;
        }
        let dq = self.d[q];
        if dq != 0.0 {
            for (x, &pr) in self.d.iter_mut().zip(&prow) {
                *x -= dq * pr;
            }
        }
        self.d[q] = 0.0;
        let leaving = self.basis.basic[r];
        self.basis.basic[r] = q;
        self.is_basic[leaving] = false;
        self.is_basic[q] = true;
        self.pivots += 1;
        if self.pivots % REFACTOR_EVERY == 0 {
            let at_upper = self.basis.at_upper.clone();
            let basic = self.basis.basic.clone();
            self.install(Basis { basic, at_upper });
        }
    }

    /// Dual simplex from the current (dual-feasible) basis under bounds `lb`, `ub`.
    pub fn solve(&mut self, p: &MilpProblem, lb: &[f64], ub: &[f64], max_iter: usize) -> LpOutcome {
        let n = p.n_vars();
        let c = self.cols;
        self.fix_dual_feasibility(p, lb, ub);
        let mut bland = false;
        let mut last_obj = f64::NEG_INFINITY;
        let mut stall = 0;
        // pivots since the last refactorization; conclusions are only drawn on a fresh one
        let mut since_refactor = 0;
        for _ in 0..max_iter {
            let xb = self.basic_values(p, lb, ub);
            // leaving row
            let mut leave: Option<(usize, f64, bool)> = None;
            for (r, &v) in xb.iter().enumerate() {
                let j = self.basis.basic[r];
                let (l, u) = self.bounds(p, lb, ub, j);
                let (viol, to_upper) = if v < l - FEAS_TOL {
                    (l - v, false)
                } else if v > u + FEAS_TOL {
                    (v - u, true)
                } else {
                    continue;
                };
                let better = match leave {
                    None => true,
                    Some((lr, lv, _)) => {
                        if bland {
                            j < self.basis.basic[lr]
                        } else {
                            viol > lv
                        }
                    }
                };
                if better {
                    leave = Some((r, viol, to_upper));
                }
            }
            let Some((r, _, to_upper)) = leave else {
                if since_refactor > 0 {
                    self.refactor(p, lb, ub);
                    since_refactor = 0;
                    continue;
                }
                return self.finish(p, lb, ub, &xb);
            };
            // the dual objective never decreases; a flat run means degeneracy
            let obj: f64 = xb
                .iter()
                .zip(&self.basis.basic)
                .map(|(v, &j)| self.cost[j] * v)
                .sum::<f64>()
                + (0..n)
                    .filter(|&j| !self.is_basic[j])
                    .map(|j| self.cost[j] * self.nonbasic_value(p, lb, ub, j))
                    .sum::<f64>();
            if obj <= last_obj + 1e-12 {
                stall += 1;
                if stall >= STALL_PIVOTS {
                    bland = true;
                }
            } else {
                stall = 0;
            }
            last_obj = last_obj.max(obj);
            // entering column by a two-pass (Harris) dual ratio test
            let mut eligible: Vec<(usize, f64, f64)> = Vec::new();
            for j in 0..c {
                if self.is_basic[j] {
                    continue;
                }
                let (l, u) = self.bounds(p, lb, ub, j);
                if u - l <= 0.0 {
                    continue;
                }
                let a = self.t[r * c + j];
                if a.abs() < PIVOT_TOL {
                    continue;
                }
                // x_r must move up when below its lower bound
                let ok = if !to_upper {
                    (!self.basis.at_upper[j] && a < 0.0) || (self.basis.at_upper[j] && a > 0.0)
                } else {
                    (!self.basis.at_upper[j] && a > 0.0) || (self.basis.at_upper[j] && a < 0.0)
                };
                if ok {
                    eligible.push((j, self.d[j].abs(), a.abs()));
                }
            }
            if eligible.is_empty() {
                if since_refactor > 0 {
                    self.refactor(p, lb, ub);
                    since_refactor = 0;
                    continue;
                }
                return LpOutcome {
                    status: LpStatus::Infeasible,
                    x: Vec::new(),
                    objective: f64::INFINITY,
                };
            }
            let q = if bland {
                let min = eligible.iter().map(|e| e.1 / e.2).fold(f64::INFINITY, f64::min);
                eligible
                    .iter()
                    .filter(|e| e.1 / e.2 <= min + 1e-12)
                    .map(|e| e.0)
                    .min()
                    .expect("nonempty")
            } else {
                let bound = eligible
                    .iter()
                    .map(|e| (e.1 + DUAL_TOL) / e.2)
                    .fold(f64::INFINITY, f64::min);
                eligible
                    .iter()
                    .filter(|e| e.1 / e.2 <= bound)
                    .max_by(|x, y| x.2.total_cmp(&y.2).then(y.0.cmp(&x.0)))
                    .expect("nonempty")
                    .0
            };
            let leaving = self.basis.basic[r];
            self.pivot(r, q);
            since_refactor += 1;
            if self.pivots % REFACTOR_EVERY == 0 {
                since_refactor = 0;
            }
            self.basis.at_upper[leaving] = to_upper;
        }
        LpOutcome {
            status: LpStatus::IterLimit,
            x: Vec::new(),
            objective: f64::NAN,
        }
    }

    fn refactor(&mut self, p: &MilpProblem, lb: &[f64], ub: &[f64]) {
        let basis = self.basis.clone();
        self.install(basis);
        self.fix_dual_feasibility(p, lb, ub);
    }

    fn finish(&self, p: &MilpProblem, lb: &[f64], ub: &[f64], xb: &[f64]) -> LpOutcome {
        let n = p.n_vars();
        let mut x = vec![0.0; n];
        for j in 0..n {
            if !self.is_basic[j] {
                x[j] = self.nonbasic_value(p, lb, ub, j);
            }
        }
        for (r, &j) in self.basis.basic.iter().enumerate() {
            if j < n {
                x[j] = xb[r].clamp(lb[j].max(-BIG_BOX), ub[j].min(BIG_BOX));
            }
        }
        let unbounded = (0..n).any(|j| {
            (lb[j] == f64::NEG_INFINITY && x[j] <= -BIG_BOX + 1.0) || (ub[j] == f64::INFINITY && x[j] >= BIG_BOX - 1.0)
        });
        let objective = (0..n).map(|j| p.cost[j] * x[j]).sum();
        LpOutcome {
            status: if unbounded { LpStatus::Unbounded } else { LpStatus::Optimal },
            x,
            objective,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::milp::Row;

    fn lp(cost: Vec<f64>, lb: Vec<f64>, ub: Vec<f64>, rows: Vec<Row>) -> MilpProblem {
        MilpProblem {
            integer: vec![false; cost.len()],
            cost,
            lb,
            ub,
            rows,
            names: Vec::new(),
        }
    }

    #[test]
    fn small_lp() {
        // max x + y s.t. x + 2y <= 4, 3x + y <= 6, x, y >= 0 -> (1.6, 1.2)
        let p = lp(
            vec![-1.0, -1.0],
            vec![0.0, 0.0],
            vec![f64::INFINITY, f64::INFINITY],
            vec![
                Row::le(vec![(0, 1.0), (1, 2.0)], 4.0),
                Row::le(vec![(0, 3.0), (1, 1.0)], 6.0),
            ],
        );
        let mut t = Tableau::new(&p);
        let out = t.solve(&p, &p.lb, &p.ub, 1000);
        assert_eq!(out.status, LpStatus::Optimal);
        assert!((out.x[0] - 1.6).abs() < 1e-9 && (out.x[1] - 1.2).abs() < 1e-9);
        assert!((out.objective + 2.8).abs() < 1e-9);
    }

    #[test]
    fn equality_and_infeasible() {
        let p = lp(
            vec![1.0, 2.0],
            vec![0.0, 0.0],
            vec![10.0, 10.0],
            vec![Row::eq(vec![(0, 1.0), (1, 1.0)], 3.0)],
        );
        let mut t = Tableau::new(&p);
        let out = t.solve(&p, &p.lb, &p.ub, 1000);
        assert!((out.objective - 3.0).abs() < 1e-9);
        let q = lp(
            vec![1.0],
            vec![0.0],
            vec![1.0],
            vec![Row::ge(vec![(0, 1.0)], 2.0)],
        );
        let mut t = Tableau::new(&q);
        assert_eq!(t.solve(&q, &q.lb, &q.ub, 1000).status, LpStatus::Infeasible);
    }

    #[test]
    fn unbounded_detected() {
        let p = lp(vec![-1.0], vec![0.0], vec![f64::INFINITY], vec![Row::ge(vec![(0, 1.0)], 1.0)]);
        let mut t = Tableau::new(&p);
        assert_eq!(t.solve(&p, &p.lb, &p.ub, 1000).status, LpStatus::Unbounded);
    }

    /// Reads the text dump back; test fixtures only.
    fn parse_dump(text: &str) -> MilpProblem {
        let mut p = MilpProblem::default();
        let mut index = std::collections::HashMap::new();
        let mut var = |p: &mut MilpProblem, name: &str| -> usize {
            *index.entry(name.to_string()).or_insert_with(|| p.add_var(name, 0.0, 0.0, 0.0, false))
        };
        let num = |s: &str| s.parse::<f64>().unwrap();
        let mut section = "";
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if ["minimize", "subject to", "bounds", "binaries", "end"].contains(&line) {
                section = line;
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            match section {
                "minimize" => {
                    for pair in toks[1..].chunks(2) {
                        let j = var(&mut p, pair[1]);
                        p.cost[j] = num(pair[0]);
                    }
                }
                "subject to" => {
                    let body = &toks[3..toks.len() - 2];
                    let coefs = body.chunks(2).map(|c| (var(&mut p, c[1]), num(c[0]))).collect();
                    p.rows.push(Row {
                        coefs,
                        lo: num(toks[1]),
                        hi: num(toks[toks.len() - 1]),
                    });
                }
                "bounds" => {
                    let j = var(&mut p, toks[2]);
                    p.lb[j] = num(toks[0]);
                    p.ub[j] = num(toks[4]);
                }
                "binaries" => {
                    for t in toks {
                        let j = var(&mut p, t);
                        p.integer[j] = true;
                    }
                }
                _ => {}
            }
        }
        p
    }

    #[test]
    fn degenerate_master_relaxation() {
        // optimum 1.3935471353848434 cross-checked with an external solver
        let p = parse_dump(include_str!("testdata/master_relaxation.lp"));
        let mut t = Tableau::new(&p);
        let out = t.solve(&p, &p.lb, &p.ub, 10_000);
        assert_eq!(out.status, LpStatus::Optimal);
        assert!((out.objective - 1.3935471353848434).abs() < 1e-7, "{}", out.objective);
        for row in &p.rows {
            let a = row.activity(&out.x);
            assert!(a >= row.lo - 1e-7 && a <= row.hi + 1e-7);
        }
    }

    #[test]
    fn warm_start_after_bound_change() {
        let p = lp(
            vec![-1.0, -1.0],
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![Row::le(vec![(0, 2.0), (1, 2.0)], 3.0)],
        );
        let mut t = Tableau::new(&p);
        let out = t.solve(&p, &p.lb, &p.ub, 100);
        assert!((out.objective + 1.5).abs() < 1e-9);
        let mut ub = p.ub.clone();
        ub[0] = 0.0;
        let out = t.solve(&p, &p.lb, &ub, 100);
        assert!((out.objective + 1.0).abs() < 1e-9);
    }
}
