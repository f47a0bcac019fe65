//! Nested logit log-likelihood, its gradients at tree solutions, and a
//! path-enumeration evaluator for small relaxed graphs.
//!
//! Observations sharing availability and design rows are pooled into
//! weighted groups, so every sum below runs over groups in a fixed order.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choicedata::{ChoiceDataset, CompiledSpec, DataError, UtilitySpec};
use crate::nesttree::{candidate_edges, Edge, NestingTree, TreeError};

/// Largest choice set accepted by the path-enumeration evaluator.
pub const MAX_BRUTE_FORCE: usize = 4;

/// Groups below this count are evaluated serially.
const PAR_THRESHOLD: usize = 512;

#[derive(Debug, Error)]
pub enum LikelihoodError {
    #[error("observation has no available alternative")]
    EmptyChoiceSet,
    #[error("scale parameters violate monotonicity on edge {0:?}")]
    ScaleViolation(Edge),
    #[error("path enumeration is limited to m <= {MAX_BRUTE_FORCE}, got {0}")]
    TooLarge(usize),
    #[error("parameter vector has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Taste parameters and scales. `mu` is indexed by internal node id:
/// `mu[0]` is the root (fixed at 1), `mu[s + 1]` is nest slot `s`.
/// Entries of excluded slots are carried along but never read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
}

impl ModelParams {
    pub fn new(beta: Vec<f64>, mu: Vec<f64>) -> Self {
        Self { beta, mu }
    }

    /// All scales equal to one.
    pub fn unit(n_beta: usize, nest_slots: usize) -> Self {
        Self {
            beta: vec![0.0; n_beta],
            mu: vec![1.0; 1 + nest_slots],
        }
    }
}

/// Observations pooled by identical availability and design rows.
#[derive(Clone, Debug)]
pub struct ChoiceGroups {
    m: usize,
    q: usize,
    parameter_names: Vec<String>,
    groups: Vec<Group>,
    obs_group: Vec<usize>,
    obs_chosen: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Group {
    avail: Vec<bool>,
    /// `design[a * q + j] = dV_a / d beta_j`.
    design: Vec<f64>,
    counts: Vec<f64>,
}

impl ChoiceGroups {
    pub fn new(dataset: &ChoiceDataset, spec: &UtilitySpec) -> Result<Self, LikelihoodError> {
        let compiled = CompiledSpec::new(spec, dataset)?;
        let m = dataset.n_alternatives();
        let q = compiled.n_params();
        let mut index: BTreeMap<(Vec<bool>, Vec<u64>), Vec<usize>> = BTreeMap::new();
        let mut designs = Vec::with_capacity(dataset.len());
        for (n, obs) in dataset.observations().iter().enumerate() {
            let mut design = vec![0.0; m * q];
            for t in &compiled.terms {
                if obs.available[t.alt] {
                    design[t.alt * q + t.param] += compiled.regressor(t, obs);
                }
            }
            let bits: Vec<u64> = design.iter().map(|x| x.to_bits()).collect();
            index.entry((obs.available.clone(), bits)).or_default().push(n);
            designs.push(design);
        }
        let mut groups = Vec::with_capacity(index.len());
        let mut obs_group = vec![0; dataset.len()];
        for ((avail, _), members) in index {
            let g = groups.len();
            let mut counts = vec![0.0; m];
            for &n in &members {
                obs_group[n] = g;
                counts[dataset.observations()[n].chosen] += 1.0;
            }
            groups.push(Group {
                avail,
                design: std::mem::take(&mut designs[members[0]]),
                counts,
            });
        }
        Ok(Self {
            m,
            q,
            parameter_names: compiled.parameter_names,
            groups,
            obs_group,
            obs_chosen: dataset.observations().iter().map(|o| o.chosen).collect(),
        })
    }

    pub fn n_alternatives(&self) -> usize {
        self.m
    }

    pub fn n_params(&self) -> usize {
        self.q
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.parameter_names
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_observations(&self) -> usize {
        self.obs_group.len()
    }

    fn utilities(&self, g: &Group, beta: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|a| {
                if g.avail[a] {
                    g.design[a * self.q..(a + 1) * self.q]
                        .iter()
                        .zip(beta)
                        .map(|(x, b)| x * b)
                        .sum()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }
}

/// Precomputed adjacency of a valid tree.
#[derive(Clone, Debug)]
pub struct TreeLayout {
    m: usize,
    p: usize,
    /// Internal nodes with children before parents.
    post: Vec<usize>,
    children: Vec<Vec<usize>>,
    included: Vec<bool>,
    /// `ancestor[u * n + v]`: u is a proper ancestor of v.
    ancestor: Vec<bool>,
}

impl TreeLayout {
    pub fn new(tree: &NestingTree) -> Result<Self, LikelihoodError> {
        let violations = tree.validate();
        if !violations.is_empty() {
            return Err(TreeError::Invalid(violations).into());
        }
        let n = tree.n_nodes();
        let mut post = tree.internal_preorder();
        post.reverse();
        let children: Vec<Vec<usize>> = (0..n).map(|u| tree.children(u).to_vec()).collect();
        let mut ancestor = vec![false; n * n];
        for v in 0..n {
            if !tree.is_included(v) && !tree.is_leaf(v) {
                continue;
            }
            for &u in tree.ancestry(v).iter().skip(1) {
                ancestor[u * n + v] = true;
            }
        }
        Ok(Self {
            m: tree.n_alternatives(),
            p: tree.nest_slots(),
            post,
            children,
            included: (0..n).map(|u| tree.is_included(u)).collect(),
            ancestor,
        })
    }

    fn n(&self) -> usize {
        1 + self.p + self.m
    }

    fn is_leaf(&self, u: usize) -> bool {
        u > self.p
    }

    pub(crate) fn check_scales(&self, mu: &[f64]) -> Result<(), LikelihoodError> {
        if mu.len() != 1 + self.p {
            return Err(LikelihoodError::Dimension {
                expected: 1 + self.p,
                got: mu.len(),
            });
        }
        for &u in &self.post {
            for &c in &self.children[u] {
                if !self.is_leaf(c) && mu[c] < mu[u] - 1e-12 {
                    return Err(LikelihoodError::ScaleViolation((u, c)));
                }
            }
        }
        Ok(())
    }
}

/// Inclusive values of one observation; `None` for leaves, excluded slots
/// and nests without available descendants.
#[derive(Clone, Debug, PartialEq)]
pub struct InclusiveValues {
    pub gamma: Vec<Option<f64>>,
}

impl InclusiveValues {
    pub fn root(&self) -> f64 {
        self.gamma[0].unwrap_or(f64::NEG_INFINITY)
    }
}

/// Values produced by one group pass.
struct Pass {
    /// `w[v]`: utility for leaves, inclusive value for internal nodes.
    w: Vec<f64>,
    k: Vec<f64>,
}

fn forward(layout: &TreeLayout, mu: &[f64], v: &[f64], counts: Option<&[f64]>) -> Pass {
    let n = layout.n();
    let p = layout.p;
    let mut w = vec![f64::NEG_INFINITY; n];
    let mut k = vec![0.0; n];
    for a in 0..layout.m {
        w[1 + p + a] = v[a];
        if let Some(c) = counts {
            k[1 + p + a] = c[a];
        }
    }
    for &u in &layout.post {
        let ch = &layout.children[u];
        let mx = ch.iter().map(|&c| w[c]).fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let mu_u = mu[u];
        let s: f64 = ch.iter().map(|&c| (mu_u * (w[c] - mx)).exp()).sum();
        w[u] = mx + s.ln() / mu_u;
        k[u] = ch.iter().map(|&c| k[c]).sum();
    }
    Pass { w, k }
}

fn group_loglik(layout: &TreeLayout, mu: &[f64], pass: &Pass) -> f64 {
    let mut ll = 0.0;
    for &u in &layout.post {
        if pass.k[u] == 0.0 {
            continue;
        }
        let inner: f64 = layout.children[u]
            .iter()
            .filter(|&&c| pass.k[c] > 0.0)
            .map(|&c| pass.k[c] * pass.w[c])
            .sum();
        ll += mu[u] * (inner - pass.k[u] * pass.w[u]);
    }
    ll
}

struct GroupGrad {
    ll: f64,
    dv: Vec<f64>,
    dmu: Vec<f64>,
    edges: Option<Vec<f64>>,
}

fn group_gradient(layout: &TreeLayout, mu: &[f64], pass: &Pass, cand: Option<&[Edge]>) -> GroupGrad {
    let n = layout.n();
    let p = layout.p;
    let (w, k) = (&pass.w, &pass.k);
    let ll = group_loglik(layout, mu, pass);
    let mut adj = vec![0.0; n];
    let mut dv = vec![0.0; layout.m];
    let mut dmu = vec![0.0; 1 + p];
    adj[0] = -mu[0] * k[0];
    for &u in layout.post.iter().rev() {
        if w[u] == f64::NEG_INFINITY {
            continue;
        }
        let mu_u = mu[u];
        let mut inner = 0.0;
        let mut qw = 0.0;
        for &c in &layout.children[u] {
            if w[c] == f64::NEG_INFINITY {
                continue;
            }
            let q = (mu_u * (w[c] - w[u])).exp();
            qw += q * w[c];
            if k[c] > 0.0 {
                inner += k[c] * w[c];
            }
            if layout.is_leaf(c) {
                dv[c - 1 - p] = mu_u * k[c] + adj[u] * q;
            } else {
                adj[c] = (mu_u - mu[c]) * k[c] + adj[u] * q;
            }
        }
        let explicit = if k[u] > 0.0 { inner - k[u] * w[u] } else { 0.0 };
        dmu[u] = explicit + adj[u] * (qw - w[u]) / mu_u;
    }

    let edges = cand.map(|cand| {
        // path log-probability from the root to every node
        let mut lp = vec![f64::NEG_INFINITY; n];
        lp[0] = 0.0;
        for &u in layout.post.iter().rev() {
            if w[u] == f64::NEG_INFINITY {
                continue;
            }
            for &c in &layout.children[u] {
                if w[c] > f64::NEG_INFINITY {
                    lp[c] = lp[u] + mu[u] * (w[c] - w[u]);
                }
            }
        }
        // chosen-weighted conditional log-probabilities below each node
        let mut s = vec![0.0; n];
        for &u in &layout.post {
            if w[u] == f64::NEG_INFINITY {
                continue;
            }
            s[u] = layout.children[u]
                .iter()
                .filter(|&&c| k[c] > 0.0)
                .map(|&c| s[c] + k[c] * mu[u] * (w[c] - w[u]))
                .sum();
        }
        cand.iter()
            .map(|&(u, v)| {
                if !layout.included[u] || !(layout.included[v] || layout.is_leaf(v)) {
                    return 0.0;
                }
                if w[u] == f64::NEG_INFINITY || w[v] == f64::NEG_INFINITY {
                    return 0.0;
                }
                let mu_u = mu[u];
                let rel = mu_u * (w[v] - w[u]);
                let mut g = adj[u] * rel.exp() / mu_u;
                if !layout.ancestor[v * n + u] && k[v] > 0.0 {
                    g += k[v] * (lp[u] + rel) + s[v];
                }
                g
            })
            .collect()
    });
    GroupGrad { ll, dv, dmu, edges }
}

/// Full evaluation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodReport {
    pub loglik: f64,
    pub grad_beta: Vec<f64>,
    /// Indexed like `ModelParams::mu`; the root entry is always zero.
    pub grad_mu: Vec<f64>,
    pub grad_edges: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_observation: Option<Vec<f64>>,
}

/// Compensated running sum.
#[derive(Default, Clone, Copy)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }
}

fn map_groups<T: Send>(groups: &ChoiceGroups, f: impl Fn(&Group) -> T + Sync + Send) -> Vec<T> {
    if groups.groups.len() >= PAR_THRESHOLD {
        groups.groups.par_iter().map(&f).collect()
    } else {
        groups.groups.iter().map(f).collect()
    }
}

fn check_beta(groups: &ChoiceGroups, params: &ModelParams) -> Result<(), LikelihoodError> {
    if params.beta.len() != groups.q {
        return Err(LikelihoodError::Dimension {
            expected: groups.q,
            got: params.beta.len(),
        });
    }
    Ok(())
}

fn check_nonempty(groups: &ChoiceGroups) -> Result<(), LikelihoodError> {
    if groups.groups.iter().any(|g| !g.avail.iter().any(|&a| a)) {
        return Err(LikelihoodError::EmptyChoiceSet);
    }
    Ok(())
}

pub fn inclusive_values(
    tree: &NestingTree,
    params: &ModelParams,
    v: &[f64],
    available: &[bool],
) -> Result<InclusiveValues, LikelihoodError> {
    let layout = TreeLayout::new(tree)?;
    layout.check_scales(&params.mu)?;
    if !available.iter().any(|&a| a) {
        return Err(LikelihoodError::EmptyChoiceSet);
    }
    let masked: Vec<f64> = v
        .iter()
        .zip(available)
        .map(|(&x, &a)| if a { x } else { f64::NEG_INFINITY })
        .collect();
    let pass = forward(&layout, &params.mu, &masked, None);
    let gamma = (0..layout.n())
        .map(|u| {
            (!layout.is_leaf(u) && layout.included[u] && pass.w[u] > f64::NEG_INFINITY).then_some(pass.w[u])
        })
        .collect();
    Ok(InclusiveValues { gamma })
}

/// Log choice probability of every alternative for one observation
/// (`-inf` for unavailable ones).
pub fn log_probabilities(
    tree: &NestingTree,
    params: &ModelParams,
    v: &[f64],
    available: &[bool],
) -> Result<Vec<f64>, LikelihoodError> {
    let layout = TreeLayout::new(tree)?;
    layout.check_scales(&params.mu)?;
    if !available.iter().any(|&a| a) {
        return Err(LikelihoodError::EmptyChoiceSet);
    }
    let masked: Vec<f64> = v
        .iter()
        .zip(available)
        .map(|(&x, &a)| if a { x } else { f64::NEG_INFINITY })
        .collect();
    Ok(leaf_log_probs(&layout, &params.mu, &masked))
}

pub(crate) fn leaf_log_probs(layout: &TreeLayout, mu: &[f64], v: &[f64]) -> Vec<f64> {
    let pass = forward(layout, mu, v, None);
    let n = layout.n();
    let mut lp = vec![f64::NEG_INFINITY; n];
    lp[0] = 0.0;
    for &u in layout.post.iter().rev() {
        if pass.w[u] == f64::NEG_INFINITY {
            continue;
        }
        for &c in &layout.children[u] {
            if pass.w[c] > f64::NEG_INFINITY {
                lp[c] = lp[u] + mu[u] * (pass.w[c] - pass.w[u]);
            }
        }
    }
    lp[1 + layout.p..].to_vec()
}

/// Sum of chosen log-probabilities.
pub fn log_likelihood(groups: &ChoiceGroups, tree: &NestingTree, params: &ModelParams) -> Result<f64, LikelihoodError> {
    let layout = TreeLayout::new(tree)?;
    log_likelihood_with(groups, &layout, params)
}

/// As [`log_likelihood`] with a prebuilt layout.
pub fn log_likelihood_with(
    groups: &ChoiceGroups,
    layout: &TreeLayout,
    params: &ModelParams,
) -> Result<f64, LikelihoodError> {
    check_beta(groups, params)?;
    check_nonempty(groups)?;
    layout.check_scales(&params.mu)?;
    let parts = map_groups(groups, |g| {
        let v = groups.utilities(g, &params.beta);
        group_loglik(layout, &params.mu, &forward(layout, &params.mu, &v, Some(&g.counts)))
    });
    let mut acc = Kahan::default();
    for x in parts {
        acc.add(x);
    }
    Ok(acc.sum)
}

/// Convenience wrapper pooling a dataset on the fly.
pub fn dataset_log_likelihood(
    dataset: &ChoiceDataset,
    spec: &UtilitySpec,
    tree: &NestingTree,
    params: &ModelParams,
) -> Result<f64, LikelihoodError> {
    log_likelihood(&ChoiceGroups::new(dataset, spec)?, tree, params)
}

/// Loglik with gradients in beta and all scale slots (root entry zeroed).
pub fn loglik_and_grad(
    groups: &ChoiceGroups,
    layout: &TreeLayout,
    params: &ModelParams,
) -> Result<(f64, Vec<f64>, Vec<f64>), LikelihoodError> {
    let (ll, gb, gm, _) = accumulate(groups, layout, params, None, true)?;
    Ok((ll, gb, gm))
}

/// As [`loglik_and_grad`] without the scale-monotonicity check; used for
/// finite differences around boundary points.
pub(crate) fn loglik_and_grad_unchecked(
    groups: &ChoiceGroups,
    layout: &TreeLayout,
    params: &ModelParams,
) -> Result<(f64, Vec<f64>, Vec<f64>), LikelihoodError> {
    let (ll, gb, gm, _) = accumulate(groups, layout, params, None, false)?;
    Ok((ll, gb, gm))
}

fn accumulate(
    groups: &ChoiceGroups,
    layout: &TreeLayout,
    params: &ModelParams,
    cand: Option<&[Edge]>,
    check: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>, Option<Vec<f64>>), LikelihoodError> {
    check_beta(groups, params)?;
    check_nonempty(groups)?;
    if check {
        layout.check_scales(&params.mu)?;
    }
    let q = groups.q;
    let parts = map_groups(groups, |g| {
        let v = groups.utilities(g, &params.beta);
        let pass = forward(layout, &params.mu, &v, Some(&g.counts));
        let gg = group_gradient(layout, &params.mu, &pass, cand);
        let mut gb = vec![0.0; q];
        for a in 0..groups.m {
            if g.avail[a] && gg.dv[a] != 0.0 {
                for j in 0..q {
                    gb[j] += gg.dv[a] * g.design[a * q + j];
                }
            }
        }
        (gg.ll, gb, gg.dmu, gg.edges)
    });
    let mut ll = Kahan::default();
    let mut gb = vec![Kahan::default(); q];
    let mut gm = vec![Kahan::default(); params.mu.len()];
    let mut ge = cand.map(|c| vec![Kahan::default(); c.len()]);
    for (l, b, m, e) in parts {
        ll.add(l);
        for (acc, x) in gb.iter_mut().zip(b) {
            acc.add(x);
        }
        for (acc, x) in gm.iter_mut().zip(m) {
            acc.add(x);
        }
        if let (Some(acc), Some(e)) = (ge.as_mut(), e) {
            for (a, x) in acc.iter_mut().zip(e) {
                a.add(x);
            }
        }
    }
    let mut grad_mu: Vec<f64> = gm.iter().map(|k| k.sum).collect();
    grad_mu[0] = 0.0;
    for (s, inc) in layout.included.iter().enumerate().take(1 + layout.p).skip(1) {
        if !inc {
            grad_mu[s] = 0.0;
        }
    }
    Ok((
        ll.sum,
        gb.iter().map(|k| k.sum).collect(),
        grad_mu,
        ge.map(|v| v.iter().map(|k| k.sum).collect()),
    ))
}

/// Analytic gradient in beta and the scales of included nests.
pub fn grad_continuous(
    groups: &ChoiceGroups,
    tree: &NestingTree,
    params: &ModelParams,
) -> Result<(Vec<f64>, Vec<f64>), LikelihoodError> {
    let layout = TreeLayout::new(tree)?;
    let (_, gb, gm) = loglik_and_grad(groups, &layout, params)?;
    Ok((gb, gm))
}

/// Derivative of the relaxed likelihood in every candidate edge indicator.
pub fn grad_edges(
    groups: &ChoiceGroups,
    tree: &NestingTree,
    params: &ModelParams,
) -> Result<BTreeMap<Edge, f64>, LikelihoodError> {
    let layout = TreeLayout::new(tree)?;
    let (_, _, _, e) = loglik_edges(groups, &layout, params)?;
    Ok(e)
}

/// Loglik, continuous gradients and edge gradients in one pass.
pub fn loglik_edges(
    groups: &ChoiceGroups,
    layout: &TreeLayout,
    params: &ModelParams,
) -> Result<(f64, Vec<f64>, Vec<f64>, BTreeMap<Edge, f64>), LikelihoodError> {
    let cand = candidate_edges(layout.m);
    let (ll, gb, gm, ge) = accumulate(groups, layout, params, Some(&cand), true)?;
    let edges = cand.into_iter().zip(ge.unwrap_or_default()).collect();
    Ok((ll, gb, gm, edges))
}

/// Everything at once, with edges keyed as `"u->v"` for serialization.
pub fn evaluate(
    groups: &ChoiceGroups,
    tree: &NestingTree,
    params: &ModelParams,
    per_observation: bool,
) -> Result<LikelihoodReport, LikelihoodError> {
    let layout = TreeLayout::new(tree)?;
    let (loglik, grad_beta, grad_mu, edges) = loglik_edges(groups, &layout, params)?;
    let per_observation = per_observation.then(|| {
        let lps: Vec<Vec<f64>> = groups
            .groups
            .iter()
            .map(|g| leaf_log_probs(&layout, &params.mu, &groups.utilities(g, &params.beta)))
            .collect();
        groups
            .obs_group
            .iter()
            .zip(&groups.obs_chosen)
            .map(|(&g, &a)| lps[g][a])
            .collect()
    });
    Ok(LikelihoodReport {
        loglik,
        grad_beta,
        grad_mu,
        grad_edges: edges.into_iter().map(|((u, v), g)| (format!("{u}->{v}"), g)).collect(),
        per_observation,
    })
}

/// Edge weights over the complete candidate graph.
pub type RelaxedEdges = BTreeMap<Edge, f64>;

/// Indicator vector of a tree over all candidate edges.
pub fn relaxed_from_tree(tree: &NestingTree) -> RelaxedEdges {
    candidate_edges(tree.n_alternatives())
        .into_iter()
        .map(|(u, v)| ((u, v), if tree.has_edge(u, v) { 1.0 } else { 0.0 }))
        .collect()
}

/// Every simple root-to-leaf path of the complete candidate graph on `m` alternatives.
pub fn candidate_paths(m: usize) -> Vec<Vec<usize>> {
    let p = NestingTree::slots_for(m);
    let mut out = Vec::new();
    let mut path = vec![0];
    fn rec(p: usize, m: usize, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        let u = *path.last().unwrap_or(&0);
        for a in 0..m {
            path.push(1 + p + a);
            out.push(path.clone());
            path.pop();
        }
        for nest in 1..=p {
            if nest != u && !path.contains(&nest) {
                path.push(nest);
                rec(p, m, path, out);
                path.pop();
            }
        }
    }
    rec(p, m, &mut path, &mut out);
    out
}

/// Relaxed inclusive values by fixed-point iteration from `-inf`;
/// handles cyclic support arising from fractional edge weights.
fn relaxed_gamma(m: usize, x: &RelaxedEdges, mu: &[f64], v: &[f64]) -> Vec<f64> {
    let p = NestingTree::slots_for(m);
    let n = 1 + p + m;
    let mut w = vec![f64::NEG_INFINITY; n];
    w[1 + p..].copy_from_slice(v);
    for _ in 0..10_000 {
        let mut change: f64 = 0.0;
        let mut next = w.clone();
        for u in 0..=p {
            let terms: Vec<(f64, f64)> = (1..n)
                .filter(|&c| c != u)
                .filter_map(|c| {
                    let xe = x.get(&(u, c)).copied().unwrap_or(0.0);
                    (xe > 0.0 && w[c] > f64::NEG_INFINITY).then_some((xe, w[c]))
                })
                .collect();
            if terms.is_empty() {
                continue;
            }
            let mx = terms.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = terms.iter().map(|&(xe, wc)| xe * (mu[u] * (wc - mx)).exp()).sum();
            next[u] = mx + s.ln() / mu[u];
            let d = if w[u] == f64::NEG_INFINITY {
                f64::INFINITY
            } else {
                (next[u] - w[u]).abs()
            };
            change = change.max(d);
        }
        w = next;
        if change < 1e-15 {
            break;
        }
    }
    w
}

/// Relaxed likelihood by explicit path enumeration: every path contributes
/// its weight (product of edge values) times its log-probability.
pub fn brute_force_loglik(
    groups: &ChoiceGroups,
    x: &RelaxedEdges,
    params: &ModelParams,
) -> Result<f64, LikelihoodError> {
    let m = groups.m;
    if m > MAX_BRUTE_FORCE {
        return Err(LikelihoodError::TooLarge(m));
    }
    check_beta(groups, params)?;
    check_nonempty(groups)?;
    let p = NestingTree::slots_for(m);
    let paths: Vec<(Vec<usize>, f64)> = candidate_paths(m)
        .into_iter()
        .filter_map(|path| {
            let weight: f64 = path
                .windows(2)
                .map(|e| x.get(&(e[0], e[1])).copied().unwrap_or(0.0))
                .product();
            (weight != 0.0).then_some((path, weight))
        })
        .collect();
    let mut acc = Kahan::default();
    for g in &groups.groups {
        let v = groups.utilities(g, &params.beta);
        let w = relaxed_gamma(m, x, &params.mu, &v);
        for (path, weight) in &paths {
            let leaf = *path.last().unwrap_or(&0);
            let count = g.counts[leaf - 1 - p];
            if count == 0.0 {
                continue;
            }
            let lp: f64 = path.windows(2).map(|e| params.mu[e[0]] * (w[e[1]] - w[e[0]])).sum();
            acc.add(count * weight * lp);
        }
    }
    Ok(acc.sum)
}
