use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nestlearn::nesttree::MAX_ENUMERATION;
use nestlearn::synth::simulate_choices;
use nestlearn::{
    enumerate_trees, monte_carlo, run_grid, simulate, ChoiceDataset, CsvSchema, NestingTree, OaConfig, OaError,
    RunReport, Runtime, Scenario, TreeJson, UtilitySpec,
};

/// Nested logit structure learning.
#[derive(Parser)]
#[command(name = "nestlearn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a nesting tree over the (M, L) grid.
    Learn(LearnArgs),
    /// Estimate fixed trees and compare their fit.
    Estimate(EstimateArgs),
    /// Draw a dataset from a scenario file.
    Simulate(SimulateArgs),
    /// Repeat simulate-and-learn and report structure recovery.
    Montecarlo(MonteCarloArgs),
    /// Count (and optionally list) the nesting trees on m alternatives.
    Enumerate(EnumerateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Args)]
struct Common {
    /// Long-format choice CSV.
    #[arg(long)]
    data: PathBuf,
    /// Utility specification JSON; constants only when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Validation share.
    #[arg(long, default_value_t = 0.25)]
    split: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "mu-max", default_value_t = 10.0)]
    mu_max: f64,
    #[arg(long, default_value_t = 1000.0)]
    rho: f64,
    /// Estimated trees per grid cell.
    #[arg(long = "max-iter", default_value_t = 30)]
    max_iter: usize,
    /// Branch-and-bound node budget per master solve.
    #[arg(long = "max-nodes", default_value_t = 200_000)]
    max_nodes: usize,
    #[arg(long, env = "NESTLEARN_THREADS")]
    threads: Option<usize>,
    /// Report destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args)]
struct LearnArgs {
    #[command(flatten)]
    common: Common,
    /// Only grid cells with exactly this many nests.
    #[arg(long)]
    nests: Option<usize>,
    /// Only grid cells with exactly this many levels.
    #[arg(long)]
    levels: Option<usize>,
    /// Stop a cell as soon as an estimate is worse than the previous one.
    #[arg(long)]
    stop_on_worse: bool,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: Common,
    /// Tree to fit with standard errors (text or JSON file).
    #[arg(long)]
    tree: PathBuf,
    /// Further trees for the comparison block.
    #[arg(long, num_args = 1..)]
    compare: Vec<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    agents: Option<usize>,
    /// Dataset CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MonteCarloArgs {
    scenario: PathBuf,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long)]
    agents: Option<usize>,
    /// Replication r uses seed + r.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.25)]
    split: f64,
    #[arg(long = "mu-max", default_value_t = 10.0)]
    mu_max: f64,
    #[arg(long = "max-iter", default_value_t = 30)]
    max_iter: usize,
    #[arg(long, env = "NESTLEARN_THREADS")]
    threads: Option<usize>,
    /// Per-replication CSV destination.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct EnumerateArgs {
    m: usize,
    /// Print every tree.
    #[arg(long)]
    list: bool,
    #[arg(long)]
    nests: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
}

enum Failure {
    Input(anyhow::Error),
    Compute(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Learn(a) => learn(a),
        Command::Estimate(a) => estimate(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Montecarlo(a) => montecarlo(a),
        Command::Enumerate(a) => enumerate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
        Err(Failure::Compute(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(3)
        }
    }
}

/// The error chain, skipping causes already quoted by their wrapper.
fn describe(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if parts.last().is_none_or(|p| !p.ends_with(&msg)) {
            parts.push(msg);
        }
    }
    parts.join(": ")
}

fn install_threads(threads: Option<usize>) -> Outcome {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Input(anyhow!("--threads must be positive")));
        }
        // a second build in the same process is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn load_inputs(c: &Common) -> Result<(ChoiceDataset, UtilitySpec), Failure> {
    let dataset = ChoiceDataset::load_csv(&c.data, &CsvSchema::default())
        .with_context(|| format!("reading {}", c.data.display()))?;
    let spec = match &c.spec {
        Some(p) => UtilitySpec::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => UtilitySpec::asc_only(dataset.alternatives()),
    };
    for w in spec.validate(&dataset)? {
        eprintln!("warning: {w}");
    }
    if !(0.0..1.0).contains(&c.split) {
        return Err(Failure::Input(anyhow!("--split must lie in [0, 1)")));
    }
    if c.max_iter == 0 || c.max_nodes == 0 {
        return Err(Failure::Input(anyhow!("--max-iter and --max-nodes must be positive")));
    }
    if c.mu_max <= 1.0 {
        return Err(Failure::Input(anyhow!("--mu-max must exceed 1")));
    }
    Ok((dataset, spec))
}

fn config(c: &Common) -> OaConfig {
    let mut cfg = OaConfig {
        max_iterations: c.max_iter,
        mu_max: c.mu_max,
        rho: c.rho,
        cv_split: c.split,
        seed: c.seed,
        threads: c.threads,
        ..OaConfig::default()
    };
    cfg.nlp.mu_max = c.mu_max;
    cfg.milp.max_nodes = c.max_nodes;
    cfg
}

fn write_output(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn emit(report: &RunReport, c: &Common) -> Outcome {
    let body = match c.format {
        Format::Json => report.to_json() + "\n",
        Format::Text => report.to_text(),
    };
    write_output(c.out.as_deref(), &body)?;
    // with a JSON file written, still show the table on stderr
    if c.out.is_some() && matches!(c.format, Format::Json) {
        eprint!("{}", report.to_text());
    }
    Ok(())
}

fn learn(a: LearnArgs) -> Outcome {
    let c = &a.common;
    install_threads(c.threads)?;
    let (dataset, spec) = load_inputs(c)?;
    let mut cfg = config(c);
    cfg.only_nests = a.nests;
    cfg.only_levels = a.levels;
    if a.stop_on_worse {
        cfg.termination = nestlearn::Termination::WorseningNlp;
    }
    let start = Instant::now();
    let result = run_grid(&dataset, &spec, &cfg).map_err(|e| match e {
        OaError::EmptyTraining | OaError::EmptyGrid => Failure::Input(e.into()),
        e => Failure::Compute(e.into()),
    })?;
    let mut report = RunReport::from_grid("learn", &dataset, &spec, &cfg, &result);
    report.runtime = Some(Runtime {
        threads: c.threads,
        seconds: start.elapsed().as_secs_f64(),
    });
    emit(&report, c)
}

/// Text files start with `(`; anything else is read as tree JSON.
fn load_tree(path: &Path, names: &[String]) -> Result<NestingTree, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let trimmed = text.trim();
    let tree = if trimmed.starts_with('(') {
        NestingTree::parse_text(trimmed, names)
    } else {
        let json: TreeJson = serde_json::from_str(trimmed).with_context(|| format!("parsing {}", path.display()))?;
        NestingTree::from_json(&json, names).map(|(t, _)| t)
    };
    Ok(tree.with_context(|| format!("tree in {}", path.display()))?)
}

fn estimate(a: EstimateArgs) -> Outcome {
    let c = &a.common;
    install_threads(c.threads)?;
    let (dataset, spec) = load_inputs(c)?;
    let cfg = config(c);
    let names = dataset.alternatives().to_vec();
    let mut trees = vec![(stem(&a.tree), load_tree(&a.tree, &names)?)];
    for p in &a.compare {
        trees.push((stem(p), load_tree(p, &names)?));
    }
    let start = Instant::now();
    let mut report =
        RunReport::from_trees("estimate", &dataset, &spec, &cfg, &trees).map_err(|e| Failure::Compute(e.into()))?;
    report.runtime = Some(Runtime {
        threads: c.threads,
        seconds: start.elapsed().as_secs_f64(),
    });
    emit(&report, c)?;
    match &report.refit_error {
        Some(e) => Err(Failure::Compute(anyhow!("estimation failed: {e}"))),
        None => Ok(()),
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    Ok(Scenario::load(path).with_context(|| format!("scenario {}", path.display()))?)
}

fn simulate_cmd(a: SimulateArgs) -> Outcome {
    let mut sc = load_scenario(&a.scenario)?;
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    if let Some(n) = a.agents {
        sc.n_agents = n;
    }
    let ds = simulate(&sc).map_err(|e| Failure::Compute(e.into()))?;
    let mut buf = Vec::new();
    ds.write_csv(&mut buf)?;
    write_output(a.out.as_deref(), &String::from_utf8(buf)?)
}

fn montecarlo(a: MonteCarloArgs) -> Outcome {
    install_threads(a.threads)?;
    let sc = load_scenario(&a.scenario)?;
    // fail on an unusable scenario before spending time on replications
    simulate_choices(&sc, 1, a.seed).map_err(|e| Failure::Input(e.into()))?;
    let mut cfg = OaConfig {
        max_iterations: a.max_iter,
        mu_max: a.mu_max,
        cv_split: a.split,
        ..OaConfig::default()
    };
    cfg.nlp.mu_max = a.mu_max;
    let n = a.agents.unwrap_or(sc.n_agents);
    let rep = monte_carlo(&sc, n, a.reps, a.seed, &cfg).map_err(|e| Failure::Compute(e.into()))?;
    if let Some(p) = &a.json {
        fs::write(p, serde_json::to_string_pretty(&rep)? + "\n")?;
    }
    let ok = rep.replications.iter().filter(|r| r.ok).count();
    let recovered = rep.replications.iter().filter(|r| r.recovered).count();
    match &a.out {
        Some(p) => fs::write(p, rep.to_csv()).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{}", rep.to_csv()),
    }
    println!();
    println!("planted,n_agents,replications,succeeded,recovered,rate,flat_rate");
    println!(
        "\"{}\",{},{},{},{},{},{}",
        rep.planted_signature,
        rep.n_agents,
        rep.replications.len(),
        ok,
        recovered,
        rep.recovery_rate,
        rep.flat_rate
    );
    Ok(())
}

/// Paper-reported count of trees on six alternatives.
const REPORTED_SIX: usize = 2712;

fn enumerate(a: EnumerateArgs) -> Outcome {
    if a.m > MAX_ENUMERATION {
        return Err(Failure::Input(anyhow!("enumeration is limited to m <= {MAX_ENUMERATION}")));
    }
    let trees = enumerate_trees(a.m, a.nests, a.levels)?;
    let names: Vec<String> = (1..=a.m).map(|i| format!("a{i}")).collect();
    let mut cells: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for t in &trees {
        *cells.entry((t.n_nests(), t.height())).or_default() += 1;
    }
    println!("m={} trees={}", a.m, trees.len());
    println!("nests,levels,count");
    for ((k, h), n) in &cells {
        println!("{k},{h},{n}");
    }
    if a.m == 6 && a.nests.is_none() && a.levels.is_none() && trees.len() != REPORTED_SIX {
        println!(
            "note: {} trees differ from the {REPORTED_SIX} reported in the literature for six alternatives",
            trees.len()
        );
    }
    if a.list {
        for t in &trees {
            println!("{}", t.to_text(&names));
        }
    }
    Ok(())
}
