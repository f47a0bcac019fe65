//! Nested logit structure learning by linear outer approximation.

pub mod choicedata;
pub mod likelihood;
pub mod milp;
pub mod nesttree;
pub mod nlp;
pub mod oa;
pub mod report;
pub mod synth;

pub use choicedata::{ChoiceDataset, CsvSchema, DataError, Observation, Regressor, Term, UtilitySpec};
pub use nesttree::{
    covariance_from_tree, enumerate_trees, CovarianceMatrix, Edge, NestedPartition, NestingTree, TreeError,
    TreeJson, TreeSignature, Violation,
};
pub use likelihood::{ChoiceGroups, LikelihoodError, LikelihoodReport, ModelParams};
pub use milp::{BranchAndBound, MasterProblem, MilpBackend, MilpError};
pub use nlp::{NlpConfig, NlpError, NlpResult, NlpStatus};
pub use oa::{run_grid, CellResult, OaConfig, OaError, OaResult, Termination};
pub use synth::{monte_carlo, simulate, AttributeGen, MonteCarloReport, Scenario, ScenarioFile, SynthError};
pub use report::{compare_trees, ComparisonRow, FittedModel, RunReport, Runtime};
