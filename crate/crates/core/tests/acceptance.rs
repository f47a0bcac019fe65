//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 8 and 9 are Monte Carlo recovery studies. They are reported
//! like the rest but do not set the exit status; every other criterion does.
//! `ACCEPTANCE_ONLY=3,5` restricts the run to the listed criteria.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use nestlearn::likelihood::{
    brute_force_loglik, grad_continuous, grad_edges, log_likelihood, log_probabilities, relaxed_from_tree,
};
use nestlearn::milp::{cell_feasible, MasterOutcome};
use nestlearn::nlp::estimate;
use nestlearn::synth::{monte_carlo, simulate_choices};
use nestlearn::{
    covariance_from_tree, enumerate_trees, run_grid, AttributeGen, BranchAndBound, ChoiceDataset, ChoiceGroups,
    MasterProblem, ModelParams, NestingTree, NlpConfig, OaConfig, Observation, Regressor, RunReport, Scenario,
    TreeSignature, UtilitySpec,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GUMBEL_VAR: f64 = PI * PI / 6.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn names(m: usize) -> Vec<String> {
    (1..=m).map(|i| format!("a{i}")).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Random observations with one attribute `x`; `avail` is the chance that
/// each unchosen alternative is offered.
fn random_data(m: usize, n: usize, avail: f64, rng: &mut ChaCha8Rng) -> (ChoiceDataset, UtilitySpec) {
    let alts = names(m);
    let obs = (0..n)
        .map(|i| {
            let chosen = rng.random_range(0..m);
            let mut available: Vec<bool> = (0..m).map(|_| rng.random_bool(avail)).collect();
            available[chosen] = true;
            let attributes = (0..m)
                .map(|a| if available[a] { rng.random_range(-1.5..1.5) } else { 0.0 })
                .collect();
            Observation {
                id: i.to_string(),
                available,
                chosen,
                attributes,
            }
        })
        .collect();
    let ds = ChoiceDataset::new(alts.clone(), vec!["x".into()], obs).unwrap();
    let spec = UtilitySpec::asc_only(&alts).with_generic("b_x", "x", &alts);
    (ds, spec)
}

fn random_tree(m: usize, rng: &mut ChaCha8Rng) -> NestingTree {
    let trees = enumerate_trees(m, None, None).unwrap();
    trees[rng.random_range(0..trees.len())].clone()
}

/// Scales nondecreasing with depth, each at least `gap` above its parent.
fn random_params(tree: &NestingTree, q: usize, gap: f64, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut mu = vec![1.0; 1 + tree.nest_slots()];
    for u in tree.internal_preorder().into_iter().skip(1) {
        let parent = tree.parent(u).unwrap_or(0);
        mu[u] = mu[parent] + gap + rng.random_range(0.0..1.5);
    }
    ModelParams {
        beta: (0..q).map(|_| rng.random_range(-1.0..1.0)).collect(),
        mu,
    }
}

fn planted(m: usize, tree: &str, mu: &[(&str, f64)]) -> Scenario {
    let ascs: Vec<String> = (2..=m).map(|i| format!("asc_a{i}")).collect();
    let vals = [0.3, -0.2, 0.1, 0.0, 0.2];
    let mut beta: Vec<(&str, f64)> = ascs.iter().enumerate().map(|(k, a)| (a.as_str(), vals[k])).collect();
    beta.push(("b_x", -1.0));
    Scenario::new(names(m), tree, mu, &beta, AttributeGen::Bernoulli(0.5)).unwrap()
}

fn one_nest() -> Scenario {
    planted(5, "(root a1 a2 (n1 a3 a4 a5))", &[("n1", 2.0)])
}

/// Leaf sets of the non-root nests.
fn nest_sets(tree: &NestingTree) -> BTreeSet<Vec<usize>> {
    let m = tree.n_alternatives();
    tree.to_partition().subsets.into_iter().filter(|s| s.len() < m).collect()
}

// ---------------------------------------------------------------- 1

/// Every way to split `items` into unordered nonempty blocks.
fn set_partitions(items: &[usize]) -> Vec<Vec<Vec<usize>>> {
    let Some((&first, rest)) = items.split_first() else {
        return vec![Vec::new()];
    };
    let mut out = Vec::new();
    for p in set_partitions(rest) {
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i].insert(0, first);
            out.push(q);
        }
        let mut q = p;
        q.push(vec![first]);
        out.push(q);
    }
    out
}

/// Nest families below a set: split it into at least two blocks and nest
/// each block of size two or more recursively.
fn nest_families(items: &[usize]) -> Vec<BTreeSet<Vec<usize>>> {
    let mut out = Vec::new();
    for blocks in set_partitions(items).into_iter().filter(|p| p.len() >= 2) {
        let mut acc = vec![BTreeSet::new()];
        for b in blocks.iter().filter(|b| b.len() >= 2) {
            let mut sorted = b.clone();
            sorted.sort_unstable();
            let subs = nest_families(&sorted);
            let mut next = Vec::new();
            for a in &acc {
                for s in &subs {
                    let mut f = a.clone();
                    f.insert(sorted.clone());
                    f.extend(s.iter().cloned());
                    next.push(f);
                }
            }
            acc = next;
        }
        out.extend(acc);
    }
    out
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let c2 = enumerate_trees(2, None, None).unwrap().len();
    let c3 = enumerate_trees(3, None, None).unwrap().len();
    let got: BTreeSet<_> = enumerate_trees(4, None, None).unwrap().iter().map(nest_sets).collect();
    let secs = start.elapsed().as_secs_f64();
    let oracle: BTreeSet<_> = nest_families(&[0, 1, 2, 3]).into_iter().collect();
    let n4 = enumerate_trees(4, None, None).unwrap().len();
    verdict(
        c2 == 1 && c3 == 4 && got == oracle && n4 == oracle.len() && secs < 1.0,
        format!("m=2: {c2}, m=3: {c3}, m=4: {n4} vs oracle {} (same families: {}), {secs:.3}s", oracle.len(), got == oracle),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Verdict {
    let flat = NestingTree::flat(4);
    let c = covariance_from_tree(&flat, &[1.0; 3]).unwrap();
    let mut flat_err: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let want = if i == j { GUMBEL_VAR } else { 0.0 };
            flat_err = flat_err.max((c.get(i, j) - want).abs());
        }
    }
    let tree = NestingTree::parse_text("(root a1 (b1 a2 (b2 a3 a4)))", &names(4)).unwrap();
    let nest_of = |size: usize| {
        tree.internal_preorder()
            .into_iter()
            .find(|&u| tree.leaves_under(u).len() == size)
            .unwrap()
    };
    let (b1, b2) = (nest_of(3), nest_of(2));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut fig3_err: f64 = 0.0;
    for _ in 0..100 {
        let mu1 = rng.random_range(1.0..5.0);
        let mu2 = mu1 + rng.random_range(0.0..5.0);
        let mut mu = vec![1.0; 3];
        mu[b1] = mu1;
        mu[b2] = mu2;
        let c = covariance_from_tree(&tree, &mu).unwrap();
        let s1 = GUMBEL_VAR * (1.0 - 1.0 / (mu1 * mu1));
        let s2 = GUMBEL_VAR * (1.0 - 1.0 / (mu2 * mu2));
        #[rustfmt::skip]
        let want = [
            [GUMBEL_VAR, 0.0, 0.0, 0.0],
            [0.0, GUMBEL_VAR, s1, s1],
            [0.0, s1, GUMBEL_VAR, s2],
            [0.0, s1, s2, GUMBEL_VAR],
        ];
        for i in 0..4 {
            for j in 0..4 {
                fig3_err = fig3_err.max((c.get(i, j) - want[i][j]).abs());
            }
        }
    }
    verdict(
        flat_err <= 1e-12 && fig3_err <= 1e-12,
        format!("flat max error {flat_err:.1e}, chain tree max error {fig3_err:.1e} over 100 scale draws"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let m = rng.random_range(2..=4);
        let (ds, spec) = random_data(m, 40, 0.8, &mut rng);
        let groups = ChoiceGroups::new(&ds, &spec).unwrap();
        let tree = random_tree(m, &mut rng);
        let params = random_params(&tree, groups.n_params(), 0.0, &mut rng);
        let fast = log_likelihood(&groups, &tree, &params).unwrap();
        let slow = brute_force_loglik(&groups, &relaxed_from_tree(&tree), &params).unwrap();
        worst = worst.max((fast - slow).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst <= 1e-10 && secs < 10.0, format!("max |difference| {worst:.1e} over 50 instances, {secs:.2}s"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let m = rng.random_range(2..=6);
        let (ds, spec) = random_data(m, 60, 0.8, &mut rng);
        let groups = ChoiceGroups::new(&ds, &spec).unwrap();
        let tree = random_tree(m, &mut rng);
        let mut params = random_params(&tree, groups.n_params(), 0.0, &mut rng);
        params.mu.iter_mut().for_each(|x| *x = 1.0);
        let nested = log_likelihood(&groups, &tree, &params).unwrap();
        let flat = log_likelihood(&groups, &NestingTree::flat(m), &params).unwrap();
        worst = worst.max((nested - flat).abs());
    }
    verdict(worst <= 1e-10, format!("max |difference| {worst:.1e} over 20 instances"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cont_worst: f64 = 0.0;
    let (ds, spec) = random_data(5, 50, 0.8, &mut rng);
    let groups = ChoiceGroups::new(&ds, &spec).unwrap();
    let h = 1e-5;
    for _ in 0..100 {
        let tree = random_tree(5, &mut rng);
        let params = random_params(&tree, groups.n_params(), 0.05, &mut rng);
        let (gb, gm) = grad_continuous(&groups, &tree, &params).unwrap();
        let f = |p: &ModelParams| log_likelihood(&groups, &tree, p).unwrap();
        for k in 0..params.beta.len() {
            let (mut up, mut dn) = (params.clone(), params.clone());
            up.beta[k] += h;
            dn.beta[k] -= h;
            cont_worst = cont_worst.max(rel_err((f(&up) - f(&dn)) / (2.0 * h), gb[k]));
        }
        for u in tree.internal_preorder().into_iter().skip(1) {
            let (mut up, mut dn) = (params.clone(), params.clone());
            up.mu[u] += h;
            dn.mu[u] -= h;
            cont_worst = cont_worst.max(rel_err((f(&up) - f(&dn)) / (2.0 * h), gm[u]));
        }
    }
    let mut edge_worst: f64 = 0.0;
    let mut edges_checked = 0;
    let mut edges_skipped = 0;
    for _ in 0..20 {
        let m = rng.random_range(3..=4);
        let (ds, spec) = random_data(m, 15, 0.8, &mut rng);
        let groups = ChoiceGroups::new(&ds, &spec).unwrap();
        let tree = random_tree(m, &mut rng);
        let mut params = random_params(&tree, groups.n_params(), 0.0, &mut rng);
        // unused slots still carry a scale in the relaxation
        for s in 0..tree.nest_slots() {
            if !tree.included()[s] {
                params.mu[s + 1] = 1.0 + rng.random_range(0.0..1.0);
            }
        }
        let base = relaxed_from_tree(&tree);
        let f = |x: &BTreeMap<(usize, usize), f64>| brute_force_loglik(&groups, x, &params).unwrap();
        let g = grad_edges(&groups, &tree, &params).unwrap();
        let he = 1e-6;
        // a nest with nothing available has inclusive value -inf; raising an
        // edge out of it behaves like h^(1/mu), which has no derivative at 0
        let empty_somewhere = |u: usize| {
            u != 0
                && tree.is_included(u)
                && ds.observations().iter().any(|o| {
                    tree.leaves_under(u).iter().all(|&a| !o.available[a])
                })
        };
        for (&e, &ge) in &g {
            if empty_somewhere(e.0) {
                edges_skipped += 1;
                continue;
            }
            let shifted = |d: f64| {
                let mut x = base.clone();
                *x.get_mut(&e).unwrap() += d;
                f(&x)
            };
            let fd = if base[&e] > 0.0 {
                (shifted(he) - shifted(-he)) / (2.0 * he)
            } else {
                // second-order one-sided difference off the lower bound
                (-3.0 * f(&base) + 4.0 * shifted(he) - shifted(2.0 * he)) / (2.0 * he)
            };
            edge_worst = edge_worst.max(rel_err(fd, ge));
            edges_checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        cont_worst < 1e-6 && edge_worst < 1e-5 && secs < 60.0,
        format!(
            "continuous max rel. error {cont_worst:.1e} (m=5, 100 points); edge max rel. error {edge_worst:.1e} ({edges_checked} edges, {edges_skipped} out of empty nests skipped); {secs:.1}s"
        ),
    )
}

// ---------------------------------------------------------------- 6

/// Trees returned while exhausting each m=4 cell, kept for criterion 12.
static MASTER_TREES: Mutex<Vec<(usize, usize, NestingTree)>> = Mutex::new(Vec::new());

fn exhaust(m: usize, nests: usize, levels: usize, limit: usize) -> Result<Vec<NestingTree>, String> {
    let bb = BranchAndBound::default();
    let mut mp = MasterProblem::new(m, nests, levels, 0, 10.0).map_err(|e| e.to_string())?;
    let mut visited = BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < limit {
        match mp.solve(&bb, &visited).map_err(|e| e.to_string())? {
            MasterOutcome::Infeasible => break,
            MasterOutcome::Tree(s) => {
                if !visited.insert(s.tree.signature()) {
                    return Err(format!("master repeated {}", s.tree.signature().0));
                }
                mp.add_no_good(&s.tree);
                out.push(s.tree);
            }
        }
    }
    Ok(out)
}

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let all = enumerate_trees(4, None, None).unwrap();
    let mut lines = Vec::new();
    let mut ok = true;
    for nests in 0..=2 {
        for levels in 1..=nests + 1 {
            if !cell_feasible(4, nests, levels) {
                continue;
            }
            let want: BTreeSet<TreeSignature> = all
                .iter()
                .filter(|t| t.n_nests() == nests && t.height() == levels)
                .map(|t| t.signature())
                .collect();
            match exhaust(4, nests, levels, usize::MAX) {
                Ok(trees) => {
                    let got: BTreeSet<_> = trees.iter().map(|t| t.signature()).collect();
                    ok &= got == want && got.len() == trees.len();
                    lines.push(format!("M={nests} L={levels}: {}/{}", got.len(), want.len()));
                    let mut store = MASTER_TREES.lock().unwrap();
                    store.extend(trees.into_iter().map(|t| (nests, levels, t)));
                }
                Err(e) => {
                    ok = false;
                    lines.push(format!("M={nests} L={levels}: {e}"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(ok && secs < 120.0, format!("{}; {secs:.1}s", lines.join(", ")))
}

// ---------------------------------------------------------------- 7

/// Flat-logit Newton-Raphson straight from the utility terms.
fn mnl_oracle(ds: &ChoiceDataset, spec: &UtilitySpec) -> (f64, Vec<f64>) {
    let free = spec.free_parameters();
    let q = free.len();
    let idx: HashMap<&str, usize> = free.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let m = ds.n_alternatives();
    let nv = ds.n_vars();
    // design[o][a] = dV_a / d beta
    let design: Vec<Vec<DVector<f64>>> = ds
        .observations()
        .iter()
        .map(|o| {
            (0..m)
                .map(|a| {
                    let mut z = DVector::zeros(q);
                    for t in &spec.terms {
                        if ds.alternative_index(&t.alternative) != Some(a) {
                            continue;
                        }
                        let Some(&k) = idx.get(t.parameter.as_str()) else { continue };
                        z[k] += match &t.regressor {
                            Regressor::Constant => 1.0,
                            Regressor::Variable(v) => o.attributes[a * nv + ds.variable_index(v).unwrap()],
                        };
                    }
                    z
                })
                .collect()
        })
        .collect();
    let eval = |beta: &DVector<f64>| {
        let mut ll = 0.0;
        let mut g = DVector::zeros(q);
        let mut h = DMatrix::zeros(q, q);
        for (o, z) in ds.observations().iter().zip(&design) {
            let avail: Vec<usize> = (0..m).filter(|&a| o.available[a]).collect();
            let v: Vec<f64> = avail.iter().map(|&a| z[a].dot(beta)).collect();
            let vmax = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = v.iter().map(|x| (x - vmax).exp()).sum();
            let p: Vec<f64> = v.iter().map(|x| (x - vmax).exp() / denom).collect();
            let zbar = avail.iter().zip(&p).fold(DVector::zeros(q), |acc, (&a, &pa)| acc + &z[a] * pa);
            ll += z[o.chosen].dot(beta) - vmax - denom.ln();
            g += &z[o.chosen] - &zbar;
            for (&a, &pa) in avail.iter().zip(&p) {
                let d = &z[a] - &zbar;
                h -= &d * d.transpose() * pa;
            }
        }
        (ll, g, h)
    };
    let mut beta = DVector::zeros(q);
    for _ in 0..100 {
        let (_, g, h) = eval(&beta);
        let step = (-h).lu().solve(&g).expect("information is invertible");
        beta += &step;
        if step.amax() < 1e-12 {
            break;
        }
    }
    let (ll, _, _) = eval(&beta);
    (-ll, beta.iter().cloned().collect())
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (ds, spec) = random_data(4, 3000, 0.75, &mut rng);
    let groups = ChoiceGroups::new(&ds, &spec).unwrap();
    let fit = estimate(&groups, &NestingTree::flat(4), None, &NlpConfig::default()).unwrap();
    let (oracle, _) = mnl_oracle(&ds, &spec);
    let nll_gap = (fit.negloglik - oracle).abs();

    // constants only, everything offered
    let (ds, _) = random_data(4, 2000, 1.0, &mut rng);
    let spec = UtilitySpec::asc_only(ds.alternatives());
    let groups = ChoiceGroups::new(&ds, &spec).unwrap();
    let fit = estimate(&groups, &NestingTree::flat(4), None, &NlpConfig::default()).unwrap();
    let shares = ds.choice_shares();
    let free = spec.free_parameters();
    let mut asc_gap: f64 = 0.0;
    for (k, name) in free.iter().enumerate() {
        let a = ds.alternative_index(name.trim_start_matches("asc_")).unwrap();
        asc_gap = asc_gap.max((fit.params.beta[k] - (shares[a] / shares[0]).ln()).abs());
    }
    verdict(
        nll_gap <= 1e-4 && asc_gap <= 1e-4,
        format!("|-L - oracle -L| {nll_gap:.1e}; max |ASC - ln share ratio| {asc_gap:.1e}"),
    )
}

// ---------------------------------------------------------------- 8, 9

/// One-nest recovery rates by sample size, shared by criteria 8 and 9.
static ONE_NEST_RATES: Mutex<BTreeMap<usize, f64>> = Mutex::new(BTreeMap::new());

const REPLICATIONS: usize = 20;
const BASE_SEED: u64 = 1000;

fn one_nest_rate(n: usize) -> f64 {
    if let Some(&r) = ONE_NEST_RATES.lock().unwrap().get(&n) {
        return r;
    }
    let rep = monte_carlo(&one_nest(), n, REPLICATIONS, BASE_SEED, &OaConfig::default()).unwrap();
    ONE_NEST_RATES.lock().unwrap().insert(n, rep.recovery_rate);
    rep.recovery_rate
}

fn criterion_8() -> Verdict {
    let start = Instant::now();
    let cfg = OaConfig::default();
    let one = one_nest_rate(20000);
    let chain = planted(4, "(root a1 (n1 a2 (n2 a3 a4)))", &[("n1", 2.0), ("n2", 4.0)]);
    let chain = monte_carlo(&chain, 20000, REPLICATIONS, BASE_SEED, &cfg).unwrap().recovery_rate;
    let flat = planted(4, "(root a1 a2 a3 a4)", &[]);
    let flat = monte_carlo(&flat, 10000, REPLICATIONS, BASE_SEED, &cfg).unwrap().flat_rate;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        one >= 0.9 && chain >= 0.9 && flat >= 0.8 && secs < 1800.0,
        format!("one-nest {one:.2} (need 0.90), chain {chain:.2} (need 0.90), flat M=0 {flat:.2} (need 0.80); {secs:.0}s"),
    )
}

fn criterion_9() -> Verdict {
    let rates: Vec<(usize, f64)> = [2000, 7500, 20000].into_iter().map(|n| (n, one_nest_rate(n))).collect();
    let monotone = rates.windows(2).all(|w| w[1].1 >= w[0].1);
    let shown: Vec<String> = rates.iter().map(|(n, r)| format!("N={n}: {r:.2}")).collect();
    verdict(monotone, shown.join(", "))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Verdict {
    let sc = planted(6, "(root a1 a2 (n1 a3 a4) (n2 a5 a6))", &[("n1", 2.0), ("n2", 3.0)]);
    let ds = simulate_choices(&sc, 5000, 10).unwrap();
    let res = run_grid(&ds, &sc.spec, &OaConfig::default()).unwrap();
    let total = enumerate_trees(6, None, None).unwrap().len();
    let visited = res.total_visited();
    let share = visited as f64 / total as f64;
    verdict(
        share < 0.15,
        format!("{visited} of {total} trees visited ({:.1}%) over {} cells", 100.0 * share, res.cells.len()),
    )
}

// ---------------------------------------------------------------- 11

fn criterion_11() -> Verdict {
    let sc = planted(4, "(root a1 (n1 a2 (n2 a3 a4)))", &[("n1", 2.0), ("n2", 4.0)]);
    let ds = simulate_choices(&sc, 4000, 11).unwrap();
    let report = |threads: usize| {
        let cfg = OaConfig {
            seed: 11,
            threads: Some(threads),
            ..OaConfig::default()
        };
        let res = run_grid(&ds, &sc.spec, &cfg).unwrap();
        RunReport::from_grid("learn", &ds, &sc.spec, &cfg, &res).deterministic_json()
    };
    let (a, b, c) = (report(1), report(1), report(4));
    verdict(
        a == b && a == c,
        format!("run 1 vs run 2 identical: {}; 1 vs 4 threads identical: {}; {} bytes", a == b, a == c, a.len()),
    )
}

// ---------------------------------------------------------------- 12

fn criterion_12() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut notes = Vec::new();
    let mut ok = true;

    // scale monotonicity at NLP solutions
    let cfg = NlpConfig::default();
    let mut slack = f64::INFINITY;
    let mut fits = 0;
    let sc = planted(4, "(root a1 (n1 a2 (n2 a3 a4)))", &[("n1", 2.0), ("n2", 4.0)]);
    let ds4 = simulate_choices(&sc, 1500, 12).unwrap();
    let g4 = ChoiceGroups::new(&ds4, &sc.spec).unwrap();
    let (ds5, spec5) = random_data(5, 800, 0.8, &mut rng);
    let g5 = ChoiceGroups::new(&ds5, &spec5).unwrap();
    let mut jobs: Vec<(&ChoiceGroups, NestingTree)> =
        enumerate_trees(4, None, None).unwrap().into_iter().map(|t| (&g4, t)).collect();
    for _ in 0..24 {
        jobs.push((&g5, random_tree(5, &mut rng)));
    }
    for (g, tree) in &jobs {
        let fit = estimate(g, tree, None, &cfg).unwrap();
        fits += 1;
        for u in tree.internal_preorder().into_iter().skip(1) {
            let parent = tree.parent(u).unwrap_or(0);
            slack = slack.min(fit.params.mu[u] - fit.params.mu[parent]);
            slack = slack.min(cfg.mu_max - fit.params.mu[u]);
        }
    }
    ok &= slack >= -1e-8;
    notes.push(format!("min scale slack {slack:.1e} over {fits} fits"));

    // probability normalization
    let mut norm_err: f64 = 0.0;
    for _ in 0..1000 {
        let m = rng.random_range(2..=7);
        let tree = random_tree(m.min(6), &mut rng);
        let m = tree.n_alternatives();
        let params = random_params(&tree, 0, 0.0, &mut rng);
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut avail: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
        avail[rng.random_range(0..m)] = true;
        let lp = log_probabilities(&tree, &params, &v, &avail).unwrap();
        let total: f64 = lp.iter().zip(&avail).filter(|(_, &a)| a).map(|(l, _)| l.exp()).sum();
        let leak: f64 = lp.iter().zip(&avail).filter(|(_, &a)| !a).map(|(l, _)| l.exp()).sum();
        norm_err = norm_err.max((total - 1.0).abs()).max(leak);
    }
    ok &= norm_err <= 1e-10;
    notes.push(format!("probability sum error {norm_err:.1e}"));

    // relabeling nests and alternatives
    let mut relabel_err: f64 = 0.0;
    for _ in 0..30 {
        let m = rng.random_range(3..=6);
        let (ds, spec) = random_data(m, 80, 0.8, &mut rng);
        let groups = ChoiceGroups::new(&ds, &spec).unwrap();
        let tree = random_tree(m, &mut rng);
        let params = random_params(&tree, groups.n_params(), 0.0, &mut rng);
        let base = log_likelihood(&groups, &tree, &params).unwrap();
        let p = tree.nest_slots();
        let mut slot_perm: Vec<usize> = (0..p).collect();
        slot_perm.shuffle(&mut rng);
        let mut alt_perm: Vec<usize> = (0..m).collect();
        alt_perm.shuffle(&mut rng);
        let map = |u: usize| {
            if u == 0 {
                0
            } else if u <= p {
                slot_perm[u - 1] + 1
            } else {
                p + 1 + alt_perm[u - p - 1]
            }
        };
        let edges: Vec<_> = tree.edges().into_iter().map(|(u, v)| (map(u), map(v))).collect();
        let mut included = vec![false; p];
        let mut mu = vec![1.0; p + 1];
        for s in 0..p {
            included[slot_perm[s]] = tree.included()[s];
            mu[slot_perm[s] + 1] = params.mu[s + 1];
        }
        let moved = NestingTree::new(m, included, &edges).unwrap();
        // alternative a of the old order sits at position alt_perm[a]
        let mut order = vec![0; m];
        for a in 0..m {
            order[alt_perm[a]] = a;
        }
        let alts: Vec<String> = order.iter().map(|&a| ds.alternatives()[a].clone()).collect();
        let obs = ds
            .observations()
            .iter()
            .map(|o| Observation {
                id: o.id.clone(),
                available: order.iter().map(|&a| o.available[a]).collect(),
                chosen: alt_perm[o.chosen],
                attributes: order.iter().map(|&a| o.attributes[a]).collect(),
            })
            .collect();
        let ds2 = ChoiceDataset::new(alts, vec!["x".into()], obs).unwrap();
        let g2 = ChoiceGroups::new(&ds2, &spec).unwrap();
        let moved_ll = log_likelihood(&g2, &moved, &ModelParams::new(params.beta.clone(), mu)).unwrap();
        relabel_err = relabel_err.max((moved_ll - base).abs() / base.abs().max(1.0));
    }
    ok &= relabel_err <= 1e-12;
    notes.push(format!("relabel rel. error {relabel_err:.1e}"));

    // master trees: m=4 exhaustion from criterion 6 plus m=5 and m=6 cells
    let mut trees = std::mem::take(&mut *MASTER_TREES.lock().unwrap());
    for (m, nests, levels) in [(5, 2, 2), (5, 2, 3), (5, 3, 3), (6, 3, 4), (6, 4, 5)] {
        match exhaust(m, nests, levels, 25) {
            Ok(ts) => trees.extend(ts.into_iter().map(|t| (nests, levels, t))),
            Err(e) => {
                ok = false;
                notes.push(format!("m={m} M={nests} L={levels}: {e}"));
            }
        }
    }
    let bad = trees
        .iter()
        .filter(|(k, h, t)| !t.validate().is_empty() || t.n_nests() != *k || t.height() != *h)
        .count();
    ok &= bad == 0 && !trees.is_empty();
    notes.push(format!("{} master trees, {bad} invalid", trees.len()));
    verdict(ok, notes.join("; "))
}

// ----------------------------------------------------------------

type Criterion = (usize, &'static str, bool, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "enumeration ground truth", true, criterion_1),
        (2, "covariance correctness", true, criterion_2),
        (3, "likelihood oracle equivalence", true, criterion_3),
        (4, "MNL collapse", true, criterion_4),
        (5, "gradient checks", true, criterion_5),
        (6, "MILP completeness (m=4)", true, criterion_6),
        (7, "NLP correctness", true, criterion_7),
        (8, "structure recovery", false, criterion_8),
        (9, "consistency trend", false, criterion_9),
        (10, "search efficiency (m=6)", true, criterion_10),
        (11, "determinism", true, criterion_11),
        (12, "invariant suite", true, criterion_12),
    ];
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // quiet the default hook; panics become FAIL lines
    panic::set_hook(Box::new(|_| {}));
    let mut gated_failures = 0;
    let mut reported = 0;
    for (id, name, gated, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let kind = if gated { "" } else { " [monte carlo, not gating]" };
        println!(
            "criterion {id:>2} {tag}: {name}{kind}: {} ({:.1}s)",
            v.detail,
            start.elapsed().as_secs_f64()
        );
        reported += 1;
        if !v.pass && gated {
            gated_failures += 1;
        }
    }
    println!("acceptance: {reported} criteria run, {gated_failures} gating failures");
    if gated_failures > 0 {
        std::process::exit(1);
    }
}
