//! Linear outer approximation over the regularization grid.
//!
//! Each `(M, L)` cell alternates fixed-tree estimation with master pivots
//! until the master runs out of unvisited trees or the iteration budget is
//! spent. The cell with the best held-out likelihood is refit on all data.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choicedata::{ChoiceDataset, UtilitySpec};
use crate::likelihood::{log_likelihood, ChoiceGroups, LikelihoodError, ModelParams};
use crate::milp::{cell_feasible, find_initial_tree, BranchAndBound, LinearizationCut, MasterOutcome, MasterProblem, MilpError};
use crate::nesttree::{covariance_from_tree, CovarianceMatrix, NestingTree, TreeSignature};
use crate::nlp::{default_start, estimate, NlpConfig, NlpError, NlpResult, NlpStatus};

#[derive(Debug, Error)]
pub enum OaError {
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Milp(#[from] MilpError),
    #[error(transparent)]
    Nlp(#[from] NlpError),
    #[error("training split is empty")]
    EmptyTraining,
    #[error("no feasible (M, L) cell matches the grid restriction")]
    EmptyGrid,
    #[error("every grid cell failed: {0:?}")]
    AllCellsFailed(Vec<String>),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// Stop after `max_iterations` estimated trees.
    IterLimit,
    /// Also stop as soon as an estimate is worse than the previous one.
    WorseningNlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OaConfig {
    pub max_iterations: usize,
    pub mu_max: f64,
    /// Penalty on linearization slacks in the master.
    pub rho: f64,
    /// Share of observations held out for validation.
    pub cv_split: f64,
    pub seed: u64,
    pub termination: Termination,
    /// `None` uses the global rayon pool.
    pub threads: Option<usize>,
    pub max_nests: Option<usize>,
    pub max_levels: Option<usize>,
    /// Keep only cells with exactly this many nests.
    pub only_nests: Option<usize>,
    /// Keep only cells with exactly this many levels.
    pub only_levels: Option<usize>,
    pub nlp: NlpConfig,
    pub milp: BranchAndBound,
}

impl Default for OaConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            mu_max: 10.0,
            rho: 1000.0,
            cv_split: 0.25,
            seed: 0,
            termination: Termination::IterLimit,
            threads: None,
            max_nests: None,
            max_levels: None,
            only_nests: None,
            only_levels: None,
            nlp: NlpConfig::default(),
            milp: BranchAndBound::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellStop {
    /// The master proved no unvisited tree remains.
    Exhausted,
    IterLimit,
    Worsening,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub signature: String,
    /// Training `-L` of the estimated tree; `None` if estimation failed.
    pub z_nlp: Option<f64>,
    /// Master epigraph value that proposed this tree; `None` for the start.
    pub z_milp: Option<f64>,
    /// Best `z_nlp` so far.
    pub incumbent: Option<f64>,
    pub nlp_status: Option<NlpStatus>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub nests: usize,
    pub levels: usize,
    pub tree: Option<NestingTree>,
    pub params: Option<ModelParams>,
    pub train_negloglik: Option<f64>,
    pub validation_negloglik: Option<f64>,
    pub visited: usize,
    pub stop: Option<CellStop>,
    pub trace: Vec<IterationRecord>,
    pub error: Option<String>,
}

impl CellResult {
    fn failed(nests: usize, levels: usize, error: String) -> Self {
        Self {
            nests,
            levels,
            tree: None,
            params: None,
            train_negloglik: None,
            validation_negloglik: None,
            visited: 0,
            stop: None,
            trace: Vec::new(),
            error: Some(error),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OaResult {
    pub cells: Vec<CellResult>,
    /// Index into `cells`.
    pub selected: Option<usize>,
    pub tree: Option<NestingTree>,
    /// Full-data fit of the selected tree, with standard errors.
    pub refit: Option<NlpResult>,
    pub refit_error: Option<String>,
    pub covariance: Option<CovarianceMatrix>,
    pub n_train: usize,
    pub n_validation: usize,
}

impl OaResult {
    pub fn total_visited(&self) -> usize {
        self.cells.iter().map(|c| c.visited).sum()
    }

    pub fn selected_cell(&self) -> Option<&CellResult> {
        self.selected.map(|i| &self.cells[i])
    }
}

/// Seeded split into sorted `(train, validation)` observation indices.
pub fn split(n: usize, validation_share: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * validation_share.clamp(0.0, 1.0)).round() as usize;
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Feasible `(M, L)` pairs in grid order: by nests, then levels.
pub fn grid(m: usize, max_nests: Option<usize>, max_levels: Option<usize>) -> Vec<(usize, usize)> {
    let p = NestingTree::slots_for(m);
    let top = max_nests.map_or(p, |k| k.min(p));
    let mut cells = Vec::new();
    for nests in 0..=top {
        for levels in 1..=nests + 1 {
            if max_levels.is_some_and(|h| levels > h) {
                continue;
            }
            if cell_feasible(m, nests, levels) {
                cells.push((nests, levels));
            }
        }
    }
    cells
}

/// Outer approximation within one cell of the grid.
pub fn run_cell(
    train: &ChoiceGroups,
    validation: Option<&ChoiceGroups>,
    nests: usize,
    levels: usize,
    config: &OaConfig,
) -> Result<CellResult, OaError> {
    let m = train.n_alternatives();
    let q = train.n_params();
    if train.n_observations() == 0 {
        return Err(OaError::EmptyTraining);
    }
    let backend = &config.milp;
    let mut tree = find_initial_tree(m, nests, levels, backend)?;
    let mut master = MasterProblem::new(m, nests, levels, q, config.mu_max)?;
    master.rho = config.rho;
    master.scale = 1.0 / train.n_observations() as f64;
    let nlp_config = NlpConfig {
        mu_max: config.mu_max,
        standard_errors: false,
        ..config.nlp.clone()
    };

    let mut visited: BTreeSet<TreeSignature> = BTreeSet::new();
    let mut trace = Vec::new();
    let mut best: Option<(f64, NestingTree, ModelParams)> = None;
    let mut warm_beta = vec![0.0; q];
    let mut z_milp = None;
    let mut previous: Option<f64> = None;
    let mut stop = CellStop::IterLimit;
    for k in 0..config.max_iterations {
        let signature = tree.signature();
        visited.insert(signature.clone());
        let mut init = default_start(&tree, q);
        init.beta = warm_beta.clone();
        let mut record = IterationRecord {
            iteration: k,
            signature: signature.0.clone(),
            z_nlp: None,
            z_milp,
            incumbent: best.as_ref().map(|b| b.0),
            nlp_status: None,
            error: None,
        };
        let mut worse = false;
        match estimate(train, &tree, Some(&init), &nlp_config) {
            Ok(fit) => {
                record.z_nlp = Some(fit.negloglik);
                record.nlp_status = Some(fit.status);
                if best.as_ref().is_none_or(|b| fit.negloglik < b.0) {
                    best = Some((fit.negloglik, tree.clone(), fit.params.clone()));
                }
                record.incumbent = best.as_ref().map(|b| b.0);
                worse = previous.is_some_and(|p| fit.negloglik > p);
                previous = Some(fit.negloglik);
                warm_beta = fit.params.beta.clone();
                master.add_linearization(LinearizationCut::at(train, &tree, &fit.params)?);
            }
            Err(e) => record.error = Some(e.to_string()),
        }
        master.add_no_good(&tree);
        trace.push(record);
        if config.termination == Termination::WorseningNlp && worse {
            stop = CellStop::Worsening;
            break;
        }
        if k + 1 == config.max_iterations {
            break;
        }
        match master.solve(backend, &visited)? {
            MasterOutcome::Infeasible => {
                stop = CellStop::Exhausted;
                break;
            }
            MasterOutcome::Tree(s) => {
                z_milp = Some(s.eta);
                tree = s.tree;
            }
        }
    }

    let Some((train_nll, best_tree, params)) = best else {
        let msg = trace.iter().filter_map(|r| r.error.clone()).next().unwrap_or_default();
        return Ok(CellResult {
            visited: visited.len(),
            stop: Some(stop),
            trace,
            ..CellResult::failed(nests, levels, format!("no tree could be estimated: {msg}"))
        });
    };
    let validation_negloglik = match validation {
        Some(v) if v.n_observations() > 0 => Some(-log_likelihood(v, &best_tree, &params)?),
        _ => None,
    };
    Ok(CellResult {
        nests,
        levels,
        tree: Some(best_tree),
        params: Some(params),
        train_negloglik: Some(train_nll),
        validation_negloglik,
        visited: visited.len(),
        stop: Some(stop),
        trace,
        error: None,
    })
}

/// Relative gap below which two validation scores count as tied; matches
/// the estimator's stopping tolerance.
pub const TIE_TOLERANCE: f64 = 1e-6;

/// Index of the winning cell: least validation `-L` (training `-L` when no
/// validation data), ties going to the earlier cell.
fn select(cells: &[CellResult]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in cells.iter().enumerate() {
        let Some(score) = c.validation_negloglik.or(c.train_negloglik) else { continue };
        if !score.is_finite() {
            continue;
        }
        match best {
            Some((_, b)) if score >= b - TIE_TOLERANCE * b.abs().max(1.0) => {}
            _ => best = Some((i, score)),
        }
    }
    best.map(|(i, _)| i)
}

/// Runs every feasible cell, selects on held-out likelihood and refits the
/// winner on the full data.
pub fn run_grid(dataset: &ChoiceDataset, spec: &UtilitySpec, config: &OaConfig) -> Result<OaResult, OaError> {
    let (train_idx, val_idx) = split(dataset.len(), config.cv_split, config.seed);
    if train_idx.is_empty() {
        return Err(OaError::EmptyTraining);
    }
    let full = ChoiceGroups::new(dataset, spec)?;
    let train = ChoiceGroups::new(&dataset.subset(&train_idx), spec)?;
    let validation = if val_idx.is_empty() {
        None
    } else {
        Some(ChoiceGroups::new(&dataset.subset(&val_idx), spec)?)
    };
    let cells: Vec<_> = grid(dataset.n_alternatives(), config.max_nests, config.max_levels)
        .into_iter()
        .filter(|&(k, h)| config.only_nests.is_none_or(|x| x == k) && config.only_levels.is_none_or(|x| x == h))
        .collect();
    if cells.is_empty() {
        return Err(OaError::EmptyGrid);
    }
    let run = || -> Vec<CellResult> {
        cells
            .par_iter()
            .map(|&(nests, levels)| {
                run_cell(&train, validation.as_ref(), nests, levels, config)
                    .unwrap_or_else(|e| CellResult::failed(nests, levels, e.to_string()))
            })
            .collect()
    };
    let results = match config.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| OaError::ThreadPool(e.to_string()))?
            .install(run),
        None => run(),
    };
    let Some(selected) = select(&results) else {
        return Err(OaError::AllCellsFailed(
            results
                .iter()
                .map(|c| format!("M={} L={}: {}", c.nests, c.levels, c.error.clone().unwrap_or_default()))
                .collect(),
        ));
    };
    let cell = &results[selected];
    let tree = cell.tree.clone().expect("selected cell has a tree");
    let refit_config = NlpConfig {
        mu_max: config.mu_max,
        standard_errors: true,
        ..config.nlp.clone()
    };
    let (refit, refit_error) = match estimate(&full, &tree, cell.params.as_ref(), &refit_config) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let covariance = refit
        .as_ref()
        .and_then(|r| covariance_from_tree(&tree, &r.params.mu).ok());
    Ok(OaResult {
        cells: results,
        selected: Some(selected),
        tree: Some(tree),
        refit,
        refit_error,
        covariance,
        n_train: train_idx.len(),
        n_validation: val_idx.len(),
    })
}
