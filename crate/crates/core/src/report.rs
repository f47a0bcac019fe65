//! Run reports: a JSON document that is the single source of truth, and a
//! text rendering derived from it.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::choicedata::{ChoiceDataset, UtilitySpec};
use crate::likelihood::{log_likelihood, ChoiceGroups};
use crate::nesttree::{covariance_from_tree, NestingTree, TreeJson};
use crate::nlp::{estimate, NlpConfig, NlpResult, NlpStatus};
use crate::oa::{split, CellStop, IterationRecord, OaConfig, OaError, OaResult};

/// Bumped whenever a field changes meaning or disappears.
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub observations: usize,
    pub alternatives: Vec<String>,
    pub parameters: Vec<String>,
    pub n_train: usize,
    pub n_validation: usize,
    pub choice_shares: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub nests: usize,
    pub levels: usize,
    pub train_negloglik: Option<f64>,
    pub validation_negloglik: Option<f64>,
    pub visited: usize,
    pub stop: Option<CellStop>,
    pub tree: Option<String>,
    pub signature: Option<String>,
    pub error: Option<String>,
    pub trace: Vec<IterationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub nest: String,
    pub alternatives: Vec<String>,
    pub estimate: f64,
    pub std_error: Option<f64>,
    /// The scale sits on a constraint, so its error is unreliable.
    pub boundary: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub nests: usize,
    pub levels: usize,
    pub tree: String,
    pub tree_json: TreeJson,
    pub signature: String,
    pub negloglik: f64,
    pub status: NlpStatus,
    pub kkt_residual: f64,
    pub parameters: Vec<ParamRow>,
    pub scales: Vec<ScaleRow>,
    /// Row-major, in utility² units.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub std_error_failure: Option<String>,
}

impl FittedModel {
    pub fn new(tree: &NestingTree, fit: &NlpResult, alternatives: &[String], parameter_names: &[String]) -> Self {
        let se = fit.std_errors.as_ref();
        let parameters = parameter_names
            .iter()
            .enumerate()
            .map(|(k, name)| ParamRow {
                name: name.clone(),
                estimate: fit.params.beta[k],
                std_error: se.map(|s| s.beta[k]),
            })
            .collect();
        // labels follow the text form: nests numbered in preorder
        let scales = tree
            .internal_preorder()
            .into_iter()
            .skip(1)
            .enumerate()
            .map(|(i, u)| ScaleRow {
                nest: format!("n{}", i + 1),
                alternatives: tree.leaves_under(u).into_iter().map(|a| alternatives[a].clone()).collect(),
                estimate: fit.params.mu[u],
                std_error: se.and_then(|s| s.mu[u]),
                boundary: se.is_some_and(|s| s.boundary.contains(&u)),
            })
            .collect();
        let covariance = covariance_from_tree(tree, &fit.params.mu).ok().map(|c| {
            (0..c.m).map(|i| (0..c.m).map(|j| c.get(i, j)).collect()).collect()
        });
        Self {
            nests: tree.n_nests(),
            levels: tree.height(),
            tree: tree.to_text(alternatives),
            tree_json: tree.to_json(alternatives, Some(&fit.params.mu)),
            signature: tree.signature().0,
            negloglik: fit.negloglik,
            status: fit.status,
            kkt_residual: fit.kkt_residual,
            parameters,
            scales,
            covariance,
            std_error_failure: fit.std_error_failure.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub tree: String,
    pub signature: String,
    pub nests: usize,
    pub levels: usize,
    pub n_parameters: usize,
    pub train_negloglik: Option<f64>,
    pub validation_negloglik: Option<f64>,
    pub full_negloglik: Option<f64>,
    pub error: Option<String>,
}

/// Facts about the run that legitimately differ between identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Runtime {
    pub threads: Option<usize>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub command: String,
    pub config: OaConfig,
    pub dataset: DatasetSummary,
    pub cells: Vec<CellRow>,
    pub selected: Option<FittedModel>,
    pub refit_error: Option<String>,
    pub comparison: Vec<ComparisonRow>,
    pub notes: Vec<String>,
    pub runtime: Option<Runtime>,
}

fn dataset_summary(dataset: &ChoiceDataset, spec: &UtilitySpec, n_train: usize, n_validation: usize) -> DatasetSummary {
    DatasetSummary {
        observations: dataset.len(),
        alternatives: dataset.alternatives().to_vec(),
        parameters: spec.free_parameters(),
        n_train,
        n_validation,
        choice_shares: dataset.choice_shares(),
    }
}

impl RunReport {
    pub fn from_grid(
        command: &str,
        dataset: &ChoiceDataset,
        spec: &UtilitySpec,
        config: &OaConfig,
        result: &OaResult,
    ) -> Self {
        let names = dataset.alternatives();
        let cells = result
            .cells
            .iter()
            .map(|c| CellRow {
                nests: c.nests,
                levels: c.levels,
                train_negloglik: c.train_negloglik,
                validation_negloglik: c.validation_negloglik,
                visited: c.visited,
                stop: c.stop,
                tree: c.tree.as_ref().map(|t| t.to_text(names)),
                signature: c.tree.as_ref().map(|t| t.signature().0),
                error: c.error.clone(),
                trace: c.trace.clone(),
            })
            .collect();
        let selected = match (&result.tree, &result.refit) {
            (Some(t), Some(fit)) => Some(FittedModel::new(t, fit, names, &spec.free_parameters())),
            _ => None,
        };
        Self {
            version: REPORT_VERSION,
            command: command.to_string(),
            config: config_echo(config),
            dataset: dataset_summary(dataset, spec, result.n_train, result.n_validation),
            cells,
            selected,
            refit_error: result.refit_error.clone(),
            comparison: Vec::new(),
            notes: vec![
                "ties in validation -L within a relative 1e-6 go to fewer nests, then fewer levels".into(),
                format!("at most {} estimated trees per cell", config.max_iterations),
            ],
            runtime: None,
        }
    }

    /// A report for fixed trees: the first is fitted on all data with
    /// standard errors, and every tree gets a comparison row.
    pub fn from_trees(
        command: &str,
        dataset: &ChoiceDataset,
        spec: &UtilitySpec,
        config: &OaConfig,
        trees: &[(String, NestingTree)],
    ) -> Result<Self, OaError> {
        let (train_idx, val_idx) = split(dataset.len(), config.cv_split, config.seed);
        let comparison = compare_trees(dataset, spec, config, trees)?;
        let full = ChoiceGroups::new(dataset, spec)?;
        let nlp = NlpConfig {
            mu_max: config.mu_max,
            standard_errors: true,
            ..config.nlp.clone()
        };
        let (selected, refit_error) = match trees.first() {
            Some((_, t)) => match estimate(&full, t, None, &nlp) {
                Ok(fit) => (
                    Some(FittedModel::new(t, &fit, dataset.alternatives(), &spec.free_parameters())),
                    None,
                ),
                Err(e) => (None, Some(e.to_string())),
            },
            None => (None, None),
        };
        Ok(Self {
            version: REPORT_VERSION,
            command: command.to_string(),
            config: config_echo(config),
            dataset: dataset_summary(dataset, spec, train_idx.len(), val_idx.len()),
            cells: Vec::new(),
            selected,
            refit_error,
            comparison,
            notes: Vec::new(),
            runtime: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON without the runtime block; equal for identical runs.
    pub fn deterministic_json(&self) -> String {
        let mut r = self.clone();
        r.runtime = None;
        r.to_json()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = &self.dataset;
        let _ = writeln!(s, "nestlearn report v{} ({})", self.version, self.command);
        let _ = writeln!(
            s,
            "observations {} (train {}, validation {}), alternatives {}",
            d.observations,
            d.n_train,
            d.n_validation,
            d.alternatives.join(" ")
        );
        if !self.cells.is_empty() {
            let _ = writeln!(s, "\n{:>3} {:>3} {:>16} {:>16} {:>8}  tree", "M", "L", "train -L", "valid -L", "visited");
            for c in &self.cells {
                let _ = writeln!(
                    s,
                    "{:>3} {:>3} {:>16} {:>16} {:>8}  {}",
                    c.nests,
                    c.levels,
                    fmt_opt(c.train_negloglik),
                    fmt_opt(c.validation_negloglik),
                    c.visited,
                    c.tree.clone().or_else(|| c.error.clone()).unwrap_or_default()
                );
            }
        }
        if let Some(m) = &self.selected {
            let _ = writeln!(s, "\nselected M={} L={}: {}", m.nests, m.levels, m.tree);
            let _ = writeln!(s, "-L {} ({:?}, kkt {:e})", m.negloglik, m.status, m.kkt_residual);
            let _ = writeln!(s, "{:<20} {:>14} {:>14}", "parameter", "estimate", "std. error");
            for p in &m.parameters {
                let _ = writeln!(s, "{:<20} {:>14.6} {:>14}", p.name, p.estimate, fmt_opt(p.std_error));
            }
            for sc in &m.scales {
                let _ = writeln!(
                    s,
                    "{:<20} {:>14.6} {:>14}{}",
                    format!("mu_{} ({})", sc.nest, sc.alternatives.join(",")),
                    sc.estimate,
                    fmt_opt(sc.std_error),
                    if sc.boundary { "  [boundary]" } else { "" }
                );
            }
            if let Some(cov) = &m.covariance {
                let _ = writeln!(s, "covariance:");
                for row in cov {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:>10.6}")).collect();
                    let _ = writeln!(s, "  {}", cells.join(" "));
                }
            }
        }
        if let Some(e) = &self.refit_error {
            let _ = writeln!(s, "\nrefit failed: {e}");
        }
        if !self.comparison.is_empty() {
            let _ = writeln!(
                s,
                "\n{:<12} {:>3} {:>3} {:>6} {:>16} {:>16} {:>16}  tree",
                "model", "M", "L", "params", "train -L", "valid -L", "full -L"
            );
            for r in &self.comparison {
                let _ = writeln!(
                    s,
                    "{:<12} {:>3} {:>3} {:>6} {:>16} {:>16} {:>16}  {}",
                    r.name,
                    r.nests,
                    r.levels,
                    r.n_parameters,
                    fmt_opt(r.train_negloglik),
                    fmt_opt(r.validation_negloglik),
                    fmt_opt(r.full_negloglik),
                    r.tree
                );
            }
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

fn config_echo(config: &OaConfig) -> OaConfig {
    // thread count is a runtime fact, not part of the result
    OaConfig {
        threads: None,
        ..config.clone()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

/// Train / validation / full-data fit of each named tree.
pub fn compare_trees(
    dataset: &ChoiceDataset,
    spec: &UtilitySpec,
    config: &OaConfig,
    trees: &[(String, NestingTree)],
) -> Result<Vec<ComparisonRow>, OaError> {
    let (train_idx, val_idx) = split(dataset.len(), config.cv_split, config.seed);
    let full = ChoiceGroups::new(dataset, spec)?;
    let train = ChoiceGroups::new(&dataset.subset(&train_idx), spec)?;
    let val = if val_idx.is_empty() {
        None
    } else {
        Some(ChoiceGroups::new(&dataset.subset(&val_idx), spec)?)
    };
    let nlp = NlpConfig {
        mu_max: config.mu_max,
        standard_errors: false,
        ..config.nlp.clone()
    };
    let names = dataset.alternatives();
    Ok(trees
        .iter()
        .map(|(name, t)| {
            let mut row = ComparisonRow {
                name: name.clone(),
                tree: t.to_text(names),
                signature: t.signature().0,
                nests: t.n_nests(),
                levels: t.height(),
                n_parameters: full.n_params() + t.n_nests(),
                train_negloglik: None,
                validation_negloglik: None,
                full_negloglik: None,
                error: None,
            };
            match estimate(&train, t, None, &nlp) {
                Ok(fit) => {
                    row.train_negloglik = Some(fit.negloglik);
                    row.validation_negloglik = val
                        .as_ref()
                        .and_then(|v| log_likelihood(v, t, &fit.params).ok())
                        .map(|ll| -ll);
                    match estimate(&full, t, Some(&fit.params), &nlp) {
                        Ok(f) => row.full_negloglik = Some(f.negloglik),
                        Err(e) => row.error = Some(e.to_string()),
                    }
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect())
}
