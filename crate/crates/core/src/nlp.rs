//! Fixed-tree maximum likelihood under scale constraints.
//!
//! Scales are reparameterized as nonnegative increments over the parent's
//! scale, so monotonicity becomes simple bounds handled by projection. The
//! upper bound on scales is enforced with a logarithmic barrier.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::likelihood::{loglik_and_grad, loglik_and_grad_unchecked, ChoiceGroups, LikelihoodError, ModelParams, TreeLayout};
use crate::nesttree::NestingTree;

/// Scale increments at or below this are tested exactly on the bound.
const SNAP_DISTANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NlpError {
    #[error("likelihood is not finite at the starting point")]
    NumericalFailure,
    #[error("observed information is not positive definite")]
    SingularInformation,
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlpConfig {
    pub mu_max: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub memory: usize,
    pub barrier_init: f64,
    pub barrier_factor: f64,
    pub standard_errors: bool,
}

impl Default for NlpConfig {
    fn default() -> Self {
        Self {
            mu_max: 10.0,
            tol: 1e-6,
            max_iter: 500,
            memory: 10,
            barrier_init: 1e-3,
            barrier_factor: 0.2,
            standard_errors: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NlpStatus {
    Converged,
    IterLimit,
    Degenerate,
}

/// A scale constraint holding with equality at the solution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActiveConstraint {
    /// `mu[child] = mu[parent]`; with the root as parent this is `mu = 1`.
    Monotone { parent: usize, child: usize },
    Upper { node: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardErrors {
    pub beta: Vec<f64>,
    /// Indexed by internal node; `None` for the root and excluded slots.
    pub mu: Vec<Option<f64>>,
    /// Nodes whose scale sits on a bound; their errors are unreliable.
    pub boundary: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlpResult {
    pub params: ModelParams,
    /// `-L` at `params`.
    pub negloglik: f64,
    pub status: NlpStatus,
    pub iterations: usize,
    /// Infinity norm of the projected gradient of `-L/N`.
    pub kkt_residual: f64,
    pub active_constraints: Vec<ActiveConstraint>,
    pub std_errors: Option<StandardErrors>,
    pub std_error_failure: Option<String>,
}

/// Mapping between the optimizer vector and model parameters.
struct Coords {
    q: usize,
    slots: usize,
    /// Included nests in preorder with their parent.
    nests: Vec<(usize, usize)>,
    mu_max: f64,
}

impl Coords {
    fn new(tree: &NestingTree, q: usize, mu_max: f64) -> Self {
        let nests = tree
            .internal_preorder()
            .into_iter()
            .skip(1)
            .map(|u| (u, tree.parent(u).unwrap_or(0)))
            .collect();
        Self {
            q,
            slots: tree.nest_slots(),
            nests,
            mu_max,
        }
    }

    fn lower(&self) -> Vec<f64> {
        let mut l = vec![f64::NEG_INFINITY; self.q];
        l.extend(std::iter::repeat_n(0.0, self.nests.len()));
        l
    }

    fn params(&self, x: &[f64]) -> ModelParams {
        let mut mu = vec![1.0; 1 + self.slots];
        for (k, &(u, parent)) in self.nests.iter().enumerate() {
            mu[u] = mu[parent] + x[self.q + k];
        }
        ModelParams {
            beta: x[..self.q].to_vec(),
            mu,
        }
    }

    fn from_params(&self, p: &ModelParams) -> Vec<f64> {
        let mut x = p.beta.clone();
        let mut mu = p.mu.clone();
        for &(u, parent) in &self.nests {
            // repair infeasible starts: clamp to [mu_parent, mu_max)
            let cap = self.mu_max - 1e-3 * (self.mu_max - mu[parent]).max(0.0);
            mu[u] = mu[u].max(mu[parent]).min(cap.max(mu[parent]));
            x.push(mu[u] - mu[parent]);
        }
        x
    }

    /// Chain rule from node scales to increments.
    fn grad(&self, gb: &[f64], gmu: &[f64]) -> Vec<f64> {
        let mut acc = gmu.to_vec();
        for &(u, parent) in self.nests.iter().rev() {
            if parent != 0 {
                acc[parent] += acc[u];
            }
        }
        let mut g = gb.to_vec();
        g.extend(self.nests.iter().map(|&(u, _)| acc[u]));
        g
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], lower: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lower)
        .map(|((&xi, &gi), &li)| ((xi - gi).max(li) - xi).abs())
        .fold(0.0, f64::max)
}

enum Stop {
    Converged,
    IterLimit,
    Stalled,
}

/// Projected limited-memory BFGS on `{x >= lower}`; `f` returns `None`
/// outside its domain.
fn minimize<F>(f: &mut F, x0: Vec<f64>, lower: &[f64], tol: f64, max_iter: usize, memory: usize) -> (Vec<f64>, f64, Vec<f64>, usize, Stop)
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let project = |x: &mut [f64]| {
        for (xi, &li) in x.iter_mut().zip(lower) {
            if *xi < li {
                *xi = li;
            }
        }
    };
    let mut x = x0;
    project(&mut x);
    let Some((mut fx, mut g)) = f(&x) else {
        return (x, f64::NAN, Vec::new(), 0, Stop::Stalled);
    };
    let n = x.len();
    let mut mem: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> = Default::default();
    for iter in 0..max_iter {
        if projected_gradient_norm(&x, &g, lower) <= tol {
            return (x, fx, g, iter, Stop::Converged);
        }
        // variables held at their bound by the gradient
        let active: Vec<bool> = (0..n).map(|i| x[i] <= lower[i] && g[i] > 0.0).collect();
        let mut step_found = false;
        for attempt in 0..2 {
            let mut d: Vec<f64> = (0..n).map(|i| if active[i] { 0.0 } else { -g[i] }).collect();
            if attempt == 0 && !mem.is_empty() {
                let mut alphas = Vec::with_capacity(mem.len());
                for (s, y, rho) in mem.iter().rev() {
                    let a = rho * dot(s, &d);
                    for i in 0..n {
                        d[i] -= a * y[i];
                    }
                    alphas.push(a);
                }
                let (s, y, _) = mem.back().unwrap();
                let gamma = dot(s, y) / dot(y, y);
                d.iter_mut().for_each(|di| *di *= gamma);
                for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
                    let b = rho * dot(y, &d);
                    for i in 0..n {
                        d[i] += (a - b) * s[i];
                    }
                }
                for i in 0..n {
                    if active[i] {
                        d[i] = 0.0;
                    }
                }
            } else if attempt == 1 {
                mem.clear();
            }
            let mut alpha = if mem.is_empty() {
                let norm = d.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
                if norm > 1.0 {
                    1.0 / norm
                } else {
                    1.0
                }
            } else {
                1.0
            };
            if dot(&d, &g) >= 0.0 {
                continue;
            }
            for _ in 0..60 {
                let mut xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
                project(&mut xn);
                let dx: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
                let slope = dot(&g, &dx);
                if slope >= 0.0 {
                    alpha *= 0.5;
                    continue;
                }
                if let Some((fn_, gn)) = f(&xn) {
                    if fn_ <= fx + 1e-4 * slope {
                        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
                        let sy = dot(&dx, &y);
                        if sy > 1e-12 * dot(&dx, &dx).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
                            if mem.len() == memory {
                                mem.pop_front();
                            }
                            mem.push_back((dx, y, 1.0 / sy));
                        }
                        x = xn;
                        fx = fn_;
                        g = gn;
                        step_found = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if step_found {
                break;
            }
        }
        if !step_found {
            return (x, fx, g, iter, Stop::Stalled);
        }
    }
    let stop = if projected_gradient_norm(&x, &g, lower) <= tol {
        Stop::Converged
    } else {
        Stop::IterLimit
    };
    (x, fx, g, max_iter, stop)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn start_is_feasible(coords: &Coords, p: &ModelParams) -> bool {
    p.mu.len() == 1 + coords.slots
        && p.mu[0] == 1.0
        && coords
            .nests
            .iter()
            .all(|&(u, parent)| p.mu[u] >= p.mu[parent] && p.mu[u] < coords.mu_max)
}

/// Default start: zero tastes and scales rising by 0.1 per level.
pub fn default_start(tree: &NestingTree, q: usize) -> ModelParams {
    let mut mu = vec![1.0; 1 + tree.nest_slots()];
    for u in tree.internal_preorder().into_iter().skip(1) {
        mu[u] = 1.0 + 0.1 * tree.depth(u) as f64;
    }
    ModelParams {
        beta: vec![0.0; q],
        mu,
    }
}

pub fn estimate(
    groups: &ChoiceGroups,
    tree: &NestingTree,
    init: Option<&ModelParams>,
    config: &NlpConfig,
) -> Result<NlpResult, NlpError> {
    let layout = TreeLayout::new(tree)?;
    let q = groups.n_params();
    let coords = Coords::new(tree, q, config.mu_max);
    let lower = coords.lower();
    let n_obs = groups.n_observations().max(1) as f64;
    let start = init.cloned().unwrap_or_else(|| default_start(tree, q));
    if start.beta.len() != q {
        return Err(LikelihoodError::Dimension {
            expected: q,
            got: start.beta.len(),
        }
        .into());
    }
    let start_nll = {
        let ll = crate::likelihood::log_likelihood_with(groups, &layout, &start).ok();
        ll.filter(|v| v.is_finite()).map(|v| -v)
    };
    let mut x = coords.from_params(&start);
    let eval = |x: &[f64], t: f64| -> Option<(f64, Vec<f64>)> {
        let p = coords.params(x);
        let mut barrier = 0.0;
        let mut gmu_b = vec![0.0; p.mu.len()];
        for &(u, _) in &coords.nests {
            let gap = config.mu_max - p.mu[u];
            if gap <= 0.0 {
                return None;
            }
            barrier -= t * gap.ln();
            gmu_b[u] = t / gap;
        }
        let (ll, gb, gmu) = loglik_and_grad(groups, &layout, &p).ok()?;
        if !ll.is_finite() {
            return None;
        }
        let gb: Vec<f64> = gb.iter().map(|v| -v / n_obs).collect();
        let gmu: Vec<f64> = gmu.iter().zip(&gmu_b).map(|(v, b)| -v / n_obs + b).collect();
        let g = coords.grad(&gb, &gmu);
        if g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((-ll / n_obs + barrier, g))
    };
    if eval(&x, config.barrier_init).is_none() {
        return Err(NlpError::NumericalFailure);
    }

    let mut t = if coords.nests.is_empty() { 0.0 } else { config.barrier_init };
    let mut iterations = 0;
    let mut status;
    loop {
        let mut f = |x: &[f64]| eval(x, t);
        let (xn, _, _, it, stop) = minimize(&mut f, x.clone(), &lower, config.tol, config.max_iter, config.memory);
        iterations += it;
        x = xn;
        status = match stop {
            Stop::Converged => NlpStatus::Converged,
            Stop::IterLimit => NlpStatus::IterLimit,
            Stop::Stalled => NlpStatus::Degenerate,
        };
        if t <= config.tol {
            break;
        }
        t *= config.barrier_factor;
    }

    // increments left just above zero by the tolerance are tried on the bound
    for k in 0..coords.nests.len() {
        let i = q + k;
        if x[i] > 0.0 && x[i] <= SNAP_DISTANCE {
            let mut y = x.clone();
            y[i] = 0.0;
            if let (Some((fy, _)), Some((fx, _))) = (eval(&y, 0.0), eval(&x, 0.0)) {
                if fy <= fx + 1e-12 {
                    x = y;
                }
            }
        }
    }
    let (nll_scaled, g_plain) = eval(&x, 0.0).ok_or(NlpError::NumericalFailure)?;
    let kkt_residual = projected_gradient_norm(&x, &g_plain, &lower);
    if status == NlpStatus::Degenerate && kkt_residual <= config.tol {
        status = NlpStatus::Converged;
    }
    let mut params = coords.params(&x);
    let mut negloglik = nll_scaled * n_obs;
    if let Some(s) = start_nll {
        // never return something worse than a feasible supplied start
        if s < negloglik && start_is_feasible(&coords, &start) {
            params = start;
            negloglik = s;
        }
    }

    let mut active = Vec::new();
    for &(u, parent) in &coords.nests {
        if params.mu[u] - params.mu[parent] <= 1e-8 {
            active.push(ActiveConstraint::Monotone { parent, child: u });
        }
        if config.mu_max - params.mu[u] <= 1e-4 {
            active.push(ActiveConstraint::Upper { node: u });
        }
    }

    let (std_errors, std_error_failure) = if config.standard_errors {
        match standard_errors(groups, tree, &params, config.mu_max) {
            Ok(se) => (Some(se), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };

    Ok(NlpResult {
        params,
        negloglik,
        status,
        iterations,
        kkt_residual,
        active_constraints: active,
        std_errors,
        std_error_failure,
    })
}

/// Square roots of the diagonal of the inverse observed information,
/// from central differences of the analytic gradient.
pub fn standard_errors(
    groups: &ChoiceGroups,
    tree: &NestingTree,
    params: &ModelParams,
    mu_max: f64,
) -> Result<StandardErrors, NlpError> {
    let layout = TreeLayout::new(tree)?;
    let q = groups.n_params();
    let nests: Vec<usize> = tree.internal_preorder().into_iter().skip(1).collect();
    let dim = q + nests.len();
    let theta_of = |p: &ModelParams| -> Vec<f64> {
        let mut v = p.beta.clone();
        v.extend(nests.iter().map(|&u| p.mu[u]));
        v
    };
    let params_of = |v: &[f64]| -> ModelParams {
        let mut p = params.clone();
        p.beta.copy_from_slice(&v[..q]);
        for (k, &u) in nests.iter().enumerate() {
            p.mu[u] = v[q + k];
        }
        p
    };
    let grad_of = |v: &[f64]| -> Result<Vec<f64>, NlpError> {
        let (_, gb, gm) = loglik_and_grad_unchecked(groups, &layout, &params_of(v))?;
        let mut g: Vec<f64> = gb.iter().map(|x| -x).collect();
        g.extend(nests.iter().map(|&u| -gm[u]));
        Ok(g)
    };
    let theta = theta_of(params);
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for j in 0..dim {
        let step = 1e-5 * theta[j].abs().max(1.0);
        let mut up = theta.clone();
        up[j] += step;
        let mut dn = theta.clone();
        dn[j] -= step;
        let gu = grad_of(&up)?;
        let gd = grad_of(&dn)?;
        for i in 0..dim {
            h[(i, j)] = (gu[i] - gd[i]) / (2.0 * step);
        }
    }
    let h = (&h + h.transpose()) * 0.5;
    let chol = h.cholesky().ok_or(NlpError::SingularInformation)?;
    let inv = chol.inverse();
    let se: Vec<f64> = (0..dim).map(|i| inv[(i, i)].max(0.0).sqrt()).collect();
    let mut mu_se = vec![None; params.mu.len()];
    let mut boundary = Vec::new();
    for (k, &u) in nests.iter().enumerate() {
        mu_se[u] = Some(se[q + k]);
        let parent = tree.parent(u).unwrap_or(0);
        if params.mu[u] - params.mu[parent] <= 1e-6 || mu_max - params.mu[u] <= 1e-4 {
            boundary.push(u);
        }
    }
    Ok(StandardErrors {
        beta: se[..q].to_vec(),
        mu: mu_se,
        boundary,
    })
}
