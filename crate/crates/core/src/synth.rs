//! Synthetic choice data from a planted tree, and seeded recovery studies.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choicedata::{ChoiceDataset, CompiledSpec, DataError, Observation, UtilitySpec};
use crate::likelihood::{leaf_log_probs, LikelihoodError, ModelParams, TreeLayout};
use crate::nesttree::{covariance_from_tree, NestingTree, TreeError};
use crate::oa::{run_grid, OaConfig};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("no value for parameter `{0}`")]
    MissingParameter(String),
    #[error("no scale for nest `{0}`")]
    MissingScale(String),
    #[error("unknown nest label `{0}`")]
    UnknownNest(String),
}

/// Distribution of one attribute, drawn independently per agent and alternative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeGen {
    Bernoulli(f64),
    Normal { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl AttributeGen {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            AttributeGen::Bernoulli(p) => f64::from(u8::from(rng.random_bool(p))),
            AttributeGen::Normal { mean, sd } => {
                // Box-Muller keeps the stream to plain uniforms
                let u1: f64 = 1.0 - rng.random::<f64>();
                let u2: f64 = rng.random();
                mean + sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            }
            AttributeGen::Uniform { lo, hi } => rng.random_range(lo..hi),
        }
    }
}

/// A planted model.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub alternatives: Vec<String>,
    pub tree: NestingTree,
    pub params: ModelParams,
    pub spec: UtilitySpec,
    pub attributes: Vec<(String, AttributeGen)>,
    pub n_agents: usize,
    pub seed: u64,
}

/// On-disk scenario description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub alternatives: Vec<String>,
    /// Nested-list tree; nest labels key the `mu` map.
    pub tree: String,
    #[serde(default)]
    pub mu: BTreeMap<String, f64>,
    /// Utility specification in the spec-file format; defaults to constants
    /// plus one generic coefficient `b_<attr>` per attribute.
    #[serde(default)]
    pub spec: Option<serde_json::Value>,
    pub beta: BTreeMap<String, f64>,
    #[serde(default)]
    pub attributes: BTreeMap<String, AttributeGen>,
    #[serde(default = "default_agents")]
    pub n_agents: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_agents() -> usize {
    1000
}

/// Labels of the lists in a tree text, in preorder (root first).
fn list_labels(text: &str) -> Vec<String> {
    let spaced = text.replace('(', " ( ").replace(')', " ) ");
    let tokens: Vec<&str> = spaced.split_whitespace().collect();
    tokens
        .windows(2)
        .filter(|w| w[0] == "(")
        .map(|w| w[1].to_string())
        .collect()
}

impl Scenario {
    /// Constants on every alternative but the first, plus a generic
    /// coefficient `b_x` on one attribute `x` drawn from `gen`.
    pub fn new(
        alternatives: Vec<String>,
        tree_text: &str,
        mu: &[(&str, f64)],
        beta: &[(&str, f64)],
        gen: AttributeGen,
    ) -> Result<Self, SynthError> {
        let file = ScenarioFile {
            alternatives,
            tree: tree_text.to_string(),
            mu: mu.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            spec: None,
            beta: beta.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            attributes: [("x".to_string(), gen)].into_iter().collect(),
            n_agents: default_agents(),
            seed: 0,
        };
        Self::from_file(&file)
    }

    pub fn from_file(file: &ScenarioFile) -> Result<Self, SynthError> {
        let tree = NestingTree::parse_text(&file.tree, &file.alternatives)?;
        let labels = list_labels(&file.tree);
        for k in file.mu.keys() {
            if !labels.iter().skip(1).any(|l| l == k) {
                return Err(SynthError::UnknownNest(k.clone()));
            }
        }
        let mut mu = vec![1.0; 1 + tree.nest_slots()];
        // list order in the text is the slot assignment order
        for (node, label) in labels.iter().enumerate().skip(1) {
            mu[node] = *file.mu.get(label).ok_or_else(|| SynthError::MissingScale(label.clone()))?;
        }
        let spec = match &file.spec {
            Some(v) => UtilitySpec::from_json(&v.to_string())?,
            None => file.attributes.keys().fold(UtilitySpec::asc_only(&file.alternatives), |s, a| {
                s.with_generic(&format!("b_{a}"), a, &file.alternatives)
            }),
        };
        let beta = spec
            .free_parameters()
            .iter()
            .map(|p| file.beta.get(p).copied().ok_or_else(|| SynthError::MissingParameter(p.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        crate::nesttree::check_scales(&tree, &mu)?;
        Ok(Self {
            alternatives: file.alternatives.clone(),
            tree,
            params: ModelParams { beta, mu },
            spec,
            attributes: file.attributes.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            n_agents: file.n_agents,
            seed: file.seed,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path)?;
        let file: ScenarioFile = serde_json::from_str(&text)?;
        Self::from_file(&file)
    }

    pub fn variable_names(&self) -> Vec<String> {
        self.attributes.iter().map(|(k, _)| k.clone()).collect()
    }
}

/// Draws the scenario's own `n_agents` with its own seed.
pub fn simulate(scenario: &Scenario) -> Result<ChoiceDataset, SynthError> {
    simulate_choices(scenario, scenario.n_agents, scenario.seed)
}

/// Every agent faces all alternatives; choices are sampled from the exact
/// closed-form probabilities.
pub fn simulate_choices(scenario: &Scenario, n_agents: usize, seed: u64) -> Result<ChoiceDataset, SynthError> {
    let m = scenario.alternatives.len();
    let vars = scenario.variable_names();
    let n_vars = vars.len();
    let shell = ChoiceDataset::new(scenario.alternatives.clone(), vars.clone(), Vec::new())?;
    let compiled = CompiledSpec::new(&scenario.spec, &shell)?;
    let layout = TreeLayout::new(&scenario.tree)?;
    layout.check_scales(&scenario.params.mu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let mut attributes = vec![0.0; m * n_vars];
        for a in 0..m {
            for (v, (_, gen)) in scenario.attributes.iter().enumerate() {
                attributes[a * n_vars + v] = gen.draw(&mut rng);
            }
        }
        let mut o = Observation {
            id: i.to_string(),
            available: vec![true; m],
            chosen: 0,
            attributes,
        };
        let mut utilities = vec![0.0; m];
        for t in &compiled.terms {
            utilities[t.alt] += scenario.params.beta[t.param] * compiled.regressor(t, &o);
        }
        let lp = leaf_log_probs(&layout, &scenario.params.mu, &utilities);
        let u: f64 = rng.random();
        let mut cum = 0.0;
        o.chosen = m - 1;
        for (a, l) in lp.iter().enumerate() {
            cum += l.exp();
            if u < cum {
                o.chosen = a;
                break;
            }
        }
        obs.push(o);
    }
    Ok(ChoiceDataset::new(scenario.alternatives.clone(), vars, obs)?)
}

/// One replication of a recovery study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub replication: usize,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub signature: Option<String>,
    pub tree: Option<String>,
    pub recovered: bool,
    pub nests: Option<usize>,
    pub levels: Option<usize>,
    pub beta: Vec<f64>,
    /// Estimated scales keyed by the nest's leaf set.
    pub mu: BTreeMap<String, f64>,
    /// Row-major covariance in utility² units.
    pub covariance: Vec<f64>,
    pub visited: usize,
}

/// Mean with across-replication standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub planted_signature: String,
    pub n_agents: usize,
    pub replications: Vec<Replication>,
    pub recovery_rate: f64,
    /// Share of replications selecting the flat model.
    pub flat_rate: f64,
    pub parameter_names: Vec<String>,
    pub beta: Vec<Moment>,
    pub covariance: Vec<Moment>,
}

fn moments(rows: &[&[f64]], dim: usize) -> Vec<Moment> {
    (0..dim)
        .map(|j| {
            let n = rows.len() as f64;
            if rows.is_empty() {
                return Moment { mean: f64::NAN, sd: f64::NAN };
            }
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = if rows.len() > 1 {
                rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            Moment { mean, sd: var.sqrt() }
        })
        .collect()
}

/// Simulate and learn `replications` times; replication `r` draws data with
/// seed `base_seed + r`.
pub fn monte_carlo(
    scenario: &Scenario,
    n_agents: usize,
    replications: usize,
    base_seed: u64,
    config: &OaConfig,
) -> Result<MonteCarloReport, SynthError> {
    let planted = scenario.tree.signature();
    let m = scenario.alternatives.len();
    let reps: Vec<Replication> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let seed = base_seed + r as u64;
            let mut rep = Replication {
                replication: r,
                seed,
                ok: false,
                error: None,
                signature: None,
                tree: None,
                recovered: false,
                nests: None,
                levels: None,
                beta: Vec::new(),
                mu: BTreeMap::new(),
                covariance: Vec::new(),
                visited: 0,
            };
            let outcome = simulate_choices(scenario, n_agents, seed)
                .map_err(|e| e.to_string())
                .and_then(|ds| run_grid(&ds, &scenario.spec, config).map_err(|e| e.to_string()));
            match outcome {
                Ok(res) => {
                    rep.visited = res.total_visited();
                    if let (Some(sel), Some(tree), Some(refit)) = (res.selected_cell(), &res.tree, &res.refit) {
                        let sig = tree.signature();
                        rep.recovered = sig == planted;
                        rep.signature = Some(sig.0);
                        rep.tree = Some(tree.to_text(&scenario.alternatives));
                        rep.nests = Some(sel.nests);
                        rep.levels = Some(sel.levels);
                        rep.beta = refit.params.beta.clone();
                        for u in tree.internal_preorder().into_iter().skip(1) {
                            let key = format!("{:?}", tree.leaves_under(u));
                            rep.mu.insert(key, refit.params.mu[u]);
                        }
                        match covariance_from_tree(tree, &refit.params.mu) {
                            Ok(c) => {
                                rep.covariance = c.raw;
                                rep.ok = true;
                            }
                            Err(e) => rep.error = Some(e.to_string()),
                        }
                    } else {
                        rep.error = Some("no cell produced a model".into());
                    }
                }
                Err(e) => rep.error = Some(e),
            }
            rep
        })
        .collect();
    let ok: Vec<&Replication> = reps.iter().filter(|r| r.ok).collect();
    let n = replications.max(1) as f64;
    let recovery_rate = reps.iter().filter(|r| r.recovered).count() as f64 / n;
    let flat_rate = reps.iter().filter(|r| r.nests == Some(0)).count() as f64 / n;
    let q = scenario.params.beta.len();
    let beta_rows: Vec<&[f64]> = ok.iter().map(|r| r.beta.as_slice()).collect();
    let cov_rows: Vec<&[f64]> = ok.iter().map(|r| r.covariance.as_slice()).collect();
    Ok(MonteCarloReport {
        planted_signature: planted.0,
        n_agents,
        replications: reps.clone(),
        recovery_rate,
        flat_rate,
        parameter_names: scenario.spec.free_parameters(),
        beta: moments(&beta_rows, q),
        covariance: moments(&cov_rows, m * m),
    })
}

impl MonteCarloReport {
    /// One row per replication.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("replication,seed,ok,recovered,nests,levels,visited,signature\n");
        for r in &self.replications {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},\"{}\"\n",
                r.replication,
                r.seed,
                r.ok,
                r.recovered,
                r.nests.map(|v| v.to_string()).unwrap_or_default(),
                r.levels.map(|v| v.to_string()).unwrap_or_default(),
                r.visited,
                r.signature.clone().unwrap_or_default()
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(m: usize) -> Vec<String> {
        (1..=m).map(|i| format!("a{i}")).collect()
    }

    fn shares(ds: &ChoiceDataset) -> Vec<f64> {
        ds.choice_shares()
    }

    #[test]
    fn constants_reproduce_shares() {
        let file = ScenarioFile {
            alternatives: names(2),
            tree: "(root a1 a2)".into(),
            mu: BTreeMap::new(),
            spec: None,
            beta: [("asc_a2".to_string(), 3f64.ln())].into_iter().collect(),
            attributes: BTreeMap::new(),
            n_agents: 100_000,
            seed: 4,
        };
        let sc = Scenario::from_file(&file).unwrap();
        let ds = simulate(&sc).unwrap();
        assert!((shares(&ds)[1] - 0.75).abs() < 0.005);
    }

    #[test]
    fn frequencies_match_probabilities() {
        let file = ScenarioFile {
            alternatives: names(4),
            tree: "(root a1 (n a2 a3 a4))".into(),
            mu: [("n".to_string(), 2.5)].into_iter().collect(),
            spec: None,
            beta: [("asc_a2", 0.2), ("asc_a3", -0.5), ("asc_a4", 0.4)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            attributes: BTreeMap::new(),
            n_agents: 50_000,
            seed: 9,
        };
        let sc = Scenario::from_file(&file).unwrap();
        let ds = simulate(&sc).unwrap();
        let v = [0.0, 0.2, -0.5, 0.4];
        let lp = crate::likelihood::log_probabilities(&sc.tree, &sc.params, &v, &[true; 4]).unwrap();
        let n = ds.len() as f64;
        for (a, s) in shares(&ds).iter().enumerate() {
            let p = lp[a].exp();
            assert!((s - p).abs() < 3.0 * (p * (1.0 - p) / n).sqrt(), "alt {a}: {s} vs {p}");
        }
    }

    #[test]
    fn unit_scale_nest_matches_flat_shares() {
        let beta = [("asc_a2", 0.3), ("asc_a3", -0.2)];
        let nested = Scenario::new(names(3), "(root a1 (n a2 a3))", &[("n", 1.0)], &[beta[0], beta[1], ("b_x", 0.0)], AttributeGen::Bernoulli(0.5)).unwrap();
        let flat = Scenario::new(names(3), "(root a1 a2 a3)", &[], &[beta[0], beta[1], ("b_x", 0.0)], AttributeGen::Bernoulli(0.5)).unwrap();
        let a = simulate_choices(&nested, 40_000, 1).unwrap();
        let b = simulate_choices(&flat, 40_000, 1).unwrap();
        // identical probabilities and streams give identical draws
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let sc = Scenario::new(
            names(3),
            "(root a1 (n a2 a3))",
            &[("n", 2.0)],
            &[("asc_a2", 0.3), ("asc_a3", -0.2), ("b_x", 1.0)],
            AttributeGen::Normal { mean: 0.0, sd: 1.0 },
        )
        .unwrap();
        assert_eq!(simulate_choices(&sc, 500, 3).unwrap(), simulate_choices(&sc, 500, 3).unwrap());
        assert_ne!(simulate_choices(&sc, 500, 3).unwrap(), simulate_choices(&sc, 500, 4).unwrap());
    }

    #[test]
    fn scenario_file_errors() {
        let mut file = ScenarioFile {
            alternatives: names(3),
            tree: "(root a1 (n a2 a3))".into(),
            mu: BTreeMap::new(),
            spec: None,
            beta: BTreeMap::new(),
            attributes: BTreeMap::new(),
            n_agents: 10,
            seed: 0,
        };
        assert!(matches!(Scenario::from_file(&file), Err(SynthError::MissingScale(_))));
        file.mu.insert("n".into(), 2.0);
        assert!(matches!(Scenario::from_file(&file), Err(SynthError::MissingParameter(_))));
        file.mu.insert("zz".into(), 2.0);
        assert!(matches!(Scenario::from_file(&file), Err(SynthError::UnknownNest(_))));
    }

    #[test]
    fn scenario_json_round_trip() {
        let text = r#"{
            "alternatives": ["a1", "a2", "a3"],
            "tree": "(root a1 (n a2 a3))",
            "mu": {"n": 2.0},
            "beta": {"asc_a2": 0.1, "asc_a3": 0.2, "b_x": -1.0},
            "attributes": {"x": {"bernoulli": 0.5}},
            "n_agents": 20,
            "seed": 3
        }"#;
        let file: ScenarioFile = serde_json::from_str(text).unwrap();
        let sc = Scenario::from_file(&file).unwrap();
        assert_eq!(sc.params.mu, vec![1.0, 2.0]);
        assert_eq!(simulate(&sc).unwrap().len(), 20);
    }
}
