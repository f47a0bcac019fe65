//! Choice observations and linear-in-parameters utility specifications.
//!
//! Data is read from long-format CSV: one row per (observation, alternative)
//! with `obs_id`, `alt_id`, `chosen`, `avail` and numeric attribute columns.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("observation `{0}` has more than one chosen alternative")]
    DuplicateChoice(String),
    #[error("observation `{0}` has no chosen alternative")]
    NoChoice(String),
    #[error("observation `{0}` chose an unavailable alternative")]
    ChosenUnavailable(String),
    #[error("row {row}: column `{column}` is not a finite number")]
    NonNumericAttribute { row: usize, column: String },
    #[error("row {row}: column `{column}` must be 0 or 1")]
    InvalidFlag { row: usize, column: String },
    #[error("observation `{obs}` lists alternative `{alt}` twice")]
    DuplicateRow { obs: String, alt: String },
    #[error("observation `{0}` has no available alternative")]
    EmptyAvailability(String),
    #[error("need at least two alternatives, found {0}")]
    TooFewAlternatives(usize),
    #[error("unknown alternative `{0}`")]
    UnknownAlternative(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("specification is not identified: {0}")]
    Unidentified(String),
}

/// One decision maker facing a subset of the universal choice set.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub id: String,
    /// Availability flag per alternative of the universal set.
    pub available: Vec<bool>,
    /// Index of the chosen alternative.
    pub chosen: usize,
    /// Alternative-major attribute block: `attributes[a * n_vars + v]`.
    /// Entries of unavailable alternatives are zero and never read.
    pub attributes: Vec<f64>,
}

impl Observation {
    pub fn attribute(&self, alt: usize, var: usize, n_vars: usize) -> f64 {
        self.attributes[alt * n_vars + var]
    }

    pub fn is_chosen(&self, alt: usize) -> bool {
        self.chosen == alt
    }
}

/// Validated, immutable collection of choice observations.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceDataset {
    alternatives: Vec<String>,
    variable_names: Vec<String>,
    observations: Vec<Observation>,
}

/// Column names of the reserved CSV fields.
#[derive(Clone, Debug)]
pub struct CsvSchema {
    pub obs_id: String,
    pub alt_id: String,
    pub chosen: String,
    pub avail: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            obs_id: "obs_id".into(),
            alt_id: "alt_id".into(),
            chosen: "chosen".into(),
            avail: "avail".into(),
        }
    }
}

impl ChoiceDataset {
    pub fn new(
        alternatives: Vec<String>,
        variable_names: Vec<String>,
        observations: Vec<Observation>,
    ) -> Result<Self, DataError> {
        let m = alternatives.len();
        if m < 2 {
            return Err(DataError::TooFewAlternatives(m));
        }
        let n_vars = variable_names.len();
        for obs in &observations {
            if obs.available.len() != m {
                return Err(DataError::DimensionMismatch {
                    expected: m,
                    got: obs.available.len(),
                });
            }
            if obs.attributes.len() != m * n_vars {
                return Err(DataError::DimensionMismatch {
                    expected: m * n_vars,
                    got: obs.attributes.len(),
                });
            }
            if !obs.available.iter().any(|&a| a) {
                return Err(DataError::EmptyAvailability(obs.id.clone()));
            }
            if obs.chosen >= m || !obs.available[obs.chosen] {
                return Err(DataError::ChosenUnavailable(obs.id.clone()));
            }
            for a in 0..m {
                if obs.available[a] {
                    for v in 0..n_vars {
                        if !obs.attribute(a, v, n_vars).is_finite() {
                            return Err(DataError::NonNumericAttribute {
                                row: 0,
                                column: variable_names[v].clone(),
                            });
                        }
                    }
                }
            }
        }
        Ok(Self {
            alternatives,
            variable_names,
            observations,
        })
    }

    pub fn alternatives(&self) -> &[String] {
        &self.alternatives
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn n_alternatives(&self) -> usize {
        self.alternatives.len()
    }

    pub fn n_vars(&self) -> usize {
        self.variable_names.len()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn alternative_index(&self, name: &str) -> Option<usize> {
        self.alternatives.iter().position(|a| a == name)
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variable_names.iter().position(|v| v == name)
    }

    /// Dataset restricted to the given observation indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> ChoiceDataset {
        ChoiceDataset {
            alternatives: self.alternatives.clone(),
            variable_names: self.variable_names.clone(),
            observations: indices.iter().map(|&i| self.observations[i].clone()).collect(),
        }
    }

    /// Empirical share of each alternative among chosen outcomes.
    pub fn choice_shares(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_alternatives()];
        for obs in &self.observations {
            counts[obs.chosen] += 1.0;
        }
        let n = self.observations.len().max(1) as f64;
        counts.iter().map(|c| c / n).collect()
    }

    pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Self, DataError> {
        let file = File::open(path)?;
        Self::read_csv(file, schema)
    }

    pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| DataError::MissingColumn(name.to_string()))
        };
        let obs_col = find(&schema.obs_id)?;
        let alt_col = find(&schema.alt_id)?;
        let chosen_col = find(&schema.chosen)?;
        let avail_col = find(&schema.avail)?;
        let reserved = [obs_col, alt_col, chosen_col, avail_col];
        let attr_cols: Vec<usize> = (0..headers.len()).filter(|c| !reserved.contains(c)).collect();
        let variable_names: Vec<String> =
            attr_cols.iter().map(|&c| headers[c].trim().to_string()).collect();
        let n_vars = variable_names.len();

        struct RawRow {
            alt: usize,
            chosen: bool,
            avail: bool,
            values: Vec<f64>,
        }
        let mut alternatives: Vec<String> = Vec::new();
        let mut alt_lookup: HashMap<String, usize> = HashMap::new();
        let mut obs_order: Vec<String> = Vec::new();
        let mut obs_rows: HashMap<String, Vec<RawRow>> = HashMap::new();

        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            let row = i + 2; // header is line 1
            let obs_id = record.get(obs_col).unwrap_or("").trim().to_string();
            let alt_id = record.get(alt_col).unwrap_or("").trim().to_string();
            let flag = |col: usize, name: &str| -> Result<bool, DataError> {
                match record.get(col).map(str::trim) {
                    Some("1") => Ok(true),
                    Some("0") => Ok(false),
                    _ => Err(DataError::InvalidFlag {
                        row,
                        column: name.to_string(),
                    }),
                }
            };
            let chosen = flag(chosen_col, &schema.chosen)?;
            let avail = flag(avail_col, &schema.avail)?;
            let mut values = Vec::with_capacity(n_vars);
            for (k, &c) in attr_cols.iter().enumerate() {
                let raw = record.get(c).unwrap_or("").trim();
                match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => values.push(v),
                    _ if !avail => values.push(0.0),
                    _ => {
                        return Err(DataError::NonNumericAttribute {
                            row,
                            column: variable_names[k].clone(),
                        })
                    }
                }
            }
            let alt = *alt_lookup.entry(alt_id.clone()).or_insert_with(|| {
                alternatives.push(alt_id.clone());
                alternatives.len() - 1
            });
            let rows = obs_rows.entry(obs_id.clone()).or_insert_with(|| {
                obs_order.push(obs_id.clone());
                Vec::new()
            });
            if rows.iter().any(|r| r.alt == alt) {
                return Err(DataError::DuplicateRow {
                    obs: obs_id,
                    alt: alt_id,
                });
            }
            rows.push(RawRow {
                alt,
                chosen,
                avail,
                values,
            });
        }

        let m = alternatives.len();
        let mut observations = Vec::with_capacity(obs_order.len());
        for id in obs_order {
            let rows = obs_rows.remove(&id).unwrap_or_default();
            let mut available = vec![false; m];
            let mut attributes = vec![0.0; m * n_vars];
            let mut chosen: Option<usize> = None;
            for r in rows {
                if r.chosen {
                    if chosen.is_some() {
                        return Err(DataError::DuplicateChoice(id));
                    }
                    if !r.avail {
                        return Err(DataError::ChosenUnavailable(id));
                    }
                    chosen = Some(r.alt);
                }
                if r.avail {
                    available[r.alt] = true;
                    attributes[r.alt * n_vars..(r.alt + 1) * n_vars].copy_from_slice(&r.values);
                }
            }
            let chosen = chosen.ok_or_else(|| DataError::NoChoice(id.clone()))?;
            observations.push(Observation {
                id,
                available,
                chosen,
                attributes,
            });
        }
        Self::new(alternatives, variable_names, observations)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec![
            "obs_id".to_string(),
            "alt_id".to_string(),
            "chosen".to_string(),
            "avail".to_string(),
        ];
        header.extend(self.variable_names.iter().cloned());
        wtr.write_record(&header)?;
        let n_vars = self.n_vars();
        for obs in &self.observations {
            for (a, alt) in self.alternatives.iter().enumerate() {
                let mut rec = vec![
                    obs.id.clone(),
                    alt.clone(),
                    u8::from(obs.chosen == a).to_string(),
                    u8::from(obs.available[a]).to_string(),
                ];
                for v in 0..n_vars {
                    rec.push(obs.attribute(a, v, n_vars).to_string());
                }
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let file = File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Right-hand side of a utility term.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Regressor {
    Constant,
    Variable(String),
}

/// `parameter * regressor` entering the utility of one alternative.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub parameter: String,
    pub alternative: String,
    pub regressor: Regressor,
}

/// Linear-in-parameters systematic utility: `V_a = sum of beta * attribute`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UtilitySpec {
    pub terms: Vec<Term>,
    /// Parameters normalized to zero for identification.
    pub fixed_zero: BTreeSet<String>,
}

#[derive(Serialize, Deserialize)]
struct SpecFile {
    parameters: Vec<SpecEntry>,
}

#[derive(Serialize, Deserialize)]
struct SpecEntry {
    name: String,
    alternative: String,
    variable: String,
    #[serde(default)]
    fixed: bool,
}

impl UtilitySpec {
    /// One constant per alternative, the first normalized to zero.
    pub fn asc_only(alternatives: &[String]) -> Self {
        let mut spec = UtilitySpec::default();
        for (i, alt) in alternatives.iter().enumerate() {
            let name = format!("asc_{alt}");
            spec.terms.push(Term {
                parameter: name.clone(),
                alternative: alt.clone(),
                regressor: Regressor::Constant,
            });
            if i == 0 {
                spec.fixed_zero.insert(name);
            }
        }
        spec
    }

    /// Adds one coefficient shared by every alternative for `variable`.
    pub fn with_generic(mut self, parameter: &str, variable: &str, alternatives: &[String]) -> Self {
        for alt in alternatives {
            self.terms.push(Term {
                parameter: parameter.to_string(),
                alternative: alt.clone(),
                regressor: Regressor::Variable(variable.to_string()),
            });
        }
        self
    }

    /// Free parameter names in order of first appearance.
    pub fn free_parameters(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for t in &self.terms {
            if !self.fixed_zero.contains(&t.parameter) && seen.insert(t.parameter.clone()) {
                out.push(t.parameter.clone());
            }
        }
        out
    }

    /// All parameter names (free and fixed) in order of first appearance.
    pub fn all_parameters(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.terms
            .iter()
            .filter(|t| seen.insert(t.parameter.clone()))
            .map(|t| t.parameter.clone())
            .collect()
    }

    pub fn n_free(&self) -> usize {
        self.free_parameters().len()
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let file: SpecFile = serde_json::from_str(text)?;
        let mut spec = UtilitySpec::default();
        for e in file.parameters {
            let regressor = if e.variable == "constant" {
                Regressor::Constant
            } else {
                Regressor::Variable(e.variable)
            };
            if e.fixed {
                spec.fixed_zero.insert(e.name.clone());
            }
            spec.terms.push(Term {
                parameter: e.name,
                alternative: e.alternative,
                regressor,
            });
        }
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        let file = SpecFile {
            parameters: self
                .terms
                .iter()
                .map(|t| SpecEntry {
                    name: t.parameter.clone(),
                    alternative: t.alternative.clone(),
                    variable: match &t.regressor {
                        Regressor::Constant => "constant".into(),
                        Regressor::Variable(v) => v.clone(),
                    },
                    fixed: self.fixed_zero.contains(&t.parameter),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("spec serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Resolves names against the dataset and checks identification.
    ///
    /// Returns warnings for alternative-invariant variables that enter every
    /// alternative freely; constants on every alternative is a hard error.
    pub fn validate(&self, dataset: &ChoiceDataset) -> Result<Vec<String>, DataError> {
        let compiled = CompiledSpec::new(self, dataset)?;
        let m = dataset.n_alternatives();

        let mut free_const = vec![false; m];
        for t in &compiled.terms {
            if t.var.is_none() {
                free_const[t.alt] = true;
            }
        }
        if free_const.iter().all(|&c| c) {
            return Err(DataError::Unidentified(
                "every alternative carries a free constant; fix one to zero".into(),
            ));
        }

        let mut warnings = Vec::new();
        let n_vars = dataset.n_vars();
        for v in 0..n_vars {
            let invariant = dataset.observations().iter().all(|obs| {
                let mut vals = (0..m)
                    .filter(|&a| obs.available[a])
                    .map(|a| obs.attribute(a, v, n_vars));
                let first = vals.next();
                vals.all(|x| Some(x) == first)
            });
            if !invariant {
                continue;
            }
            let mut covered = vec![false; m];
            for t in &compiled.terms {
                if t.var == Some(v) {
                    covered[t.alt] = true;
                }
            }
            if covered.iter().all(|&c| c) {
                warnings.push(format!(
                    "variable `{}` does not vary across alternatives but enters every alternative with a free coefficient",
                    dataset.variable_names()[v]
                ));
            }
        }
        Ok(warnings)
    }
}

/// A utility term resolved to indices; only free parameters survive.
#[derive(Clone, Debug)]
pub struct CompiledTerm {
    pub param: usize,
    pub alt: usize,
    /// `None` for the constant regressor.
    pub var: Option<usize>,
}

/// Index-resolved utility specification for one dataset layout.
#[derive(Clone, Debug)]
pub struct CompiledSpec {
    pub parameter_names: Vec<String>,
    pub terms: Vec<CompiledTerm>,
    pub n_alts: usize,
    pub n_vars: usize,
}

impl CompiledSpec {
    pub fn new(spec: &UtilitySpec, dataset: &ChoiceDataset) -> Result<Self, DataError> {
        let parameter_names = spec.free_parameters();
        let index: BTreeMap<&str, usize> = parameter_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut terms = Vec::new();
        for t in &spec.terms {
            let alt = dataset
                .alternative_index(&t.alternative)
                .ok_or_else(|| DataError::UnknownAlternative(t.alternative.clone()))?;
            let var = match &t.regressor {
                Regressor::Constant => None,
                Regressor::Variable(v) => Some(
                    dataset
                        .variable_index(v)
                        .ok_or_else(|| DataError::UnknownVariable(v.clone()))?,
                ),
            };
            if let Some(&param) = index.get(t.parameter.as_str()) {
                terms.push(CompiledTerm { param, alt, var });
            }
        }
        Ok(Self {
            parameter_names,
            terms,
            n_alts: dataset.n_alternatives(),
            n_vars: dataset.n_vars(),
        })
    }

    pub fn n_params(&self) -> usize {
        self.parameter_names.len()
    }

    /// Regressor value of a term for one observation.
    pub fn regressor(&self, term: &CompiledTerm, obs: &Observation) -> f64 {
        match term.var {
            None => 1.0,
            Some(v) => obs.attribute(term.alt, v, self.n_vars),
        }
    }
}

/// Systematic utilities, row-major `[observation][alternative]`; NaN where unavailable.
#[derive(Clone, Debug, PartialEq)]
pub struct Utilities {
    n_alts: usize,
    values: Vec<f64>,
}

impl Utilities {
    pub fn get(&self, obs: usize, alt: usize) -> Option<f64> {
        let v = self.values[obs * self.n_alts + alt];
        (!v.is_nan()).then_some(v)
    }

    pub fn row(&self, obs: usize) -> &[f64] {
        &self.values[obs * self.n_alts..(obs + 1) * self.n_alts]
    }

    pub fn n_observations(&self) -> usize {
        self.values.len() / self.n_alts
    }
}

pub fn systematic_utilities(
    dataset: &ChoiceDataset,
    spec: &UtilitySpec,
    beta: &[f64],
) -> Result<Utilities, DataError> {
    let compiled = CompiledSpec::new(spec, dataset)?;
    if beta.len() != compiled.n_params() {
        return Err(DataError::DimensionMismatch {
            expected: compiled.n_params(),
            got: beta.len(),
        });
    }
    let m = dataset.n_alternatives();
    let mut values = vec![f64::NAN; dataset.len() * m];
    for (n, obs) in dataset.observations().iter().enumerate() {
        for a in 0..m {
            if obs.available[a] {
                values[n * m + a] = 0.0;
            }
        }
        for t in &compiled.terms {
            if obs.available[t.alt] {
                values[n * m + t.alt] += beta[t.param] * compiled.regressor(t, obs);
            }
        }
    }
    Ok(Utilities { n_alts: m, values })
}
