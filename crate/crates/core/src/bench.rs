//! Desk-scale reproductions of the three experiments and a cost simulator
//! for running GBCD with blocks spread over several machines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::blockstore::{BlockInverses, BlockSource, BlockStore};
use crate::error::{Error, Result};
use crate::partition::{dominant_partition, random_partition, rate_bound, Partition, RateReport};
use crate::problem::{
    gen_block_dominant_to_store, gen_scaled_rows, in_memory_source, solve_direct, Oracle,
    UqpProblem, DIRECT_SOLVE_CAP,
};
use crate::solvers::{
    run, BcdStrategy, BkStrategy, Method, OracleMetrics, Solver, SolverConfig, StopRule,
};
use crate::trace::{write_csv, TraceRecord};

/// Seed offset separating randomized-method runs from instance seeds.
const RUN_SEED_STRIDE: u64 = 1_000_003;

/// First `k` whose `e_pnorm` is below `eps`.
pub fn iterations_to_eps(trace: &[TraceRecord], eps: f64) -> Option<usize> {
    trace
        .iter()
        .find(|r| r.e_pnorm.is_some_and(|e| e < eps))
        .map(|r| r.k)
}

/// Median of finite or infinite values; `NaN` for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        sum += v?;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

/// Pointwise mean of several traces. Shorter traces hold their last record.
pub fn average_traces(traces: &[Vec<TraceRecord>]) -> Vec<TraceRecord> {
    let len = traces.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|k| {
            let at = |t: &Vec<TraceRecord>| t[k.min(t.len() - 1)].clone();
            let rows: Vec<TraceRecord> = traces.iter().map(at).collect();
            let count = rows.len() as f64;
            TraceRecord {
                k,
                wall_nanos: (rows.iter().map(|r| r.wall_nanos as f64).sum::<f64>() / count) as u64,
                e_pnorm: mean_of(rows.iter().map(|r| r.e_pnorm)),
                e_2norm: mean_of(rows.iter().map(|r| r.e_2norm)),
                f_gap: mean_of(rows.iter().map(|r| r.f_gap)),
                block: None,
                beta: None,
                blocks_fetched: rows[0].blocks_fetched,
                rows_touched: rows[0].rows_touched,
            }
        })
        .collect()
}

/// One method's outcome on one instance. Randomized methods report means
/// over their runs.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub label: String,
    /// Iterations until `E_k < eps`; infinite if the budget ran out.
    pub iterations_to_eps: f64,
    pub final_e_pnorm: f64,
    pub final_e_2norm: f64,
    /// Rows of `P` touched per iteration.
    pub rows_touched_per_iter: u64,
    pub trace: Vec<TraceRecord>,
    /// Block chosen at each iteration, concatenated over runs.
    pub picks: Vec<usize>,
}

struct RunSpec<'a> {
    label: &'a str,
    method: Method,
    runs: usize,
    max_iters: usize,
    eps: Option<f64>,
}

fn run_method(
    source: &dyn BlockSource,
    q: &[f64],
    inverses: Option<&BlockInverses>,
    metrics: OracleMetrics<'_>,
    spec: &RunSpec<'_>,
    seed: u64,
) -> Result<MethodRun> {
    let mut traces = Vec::with_capacity(spec.runs);
    let mut iters = Vec::with_capacity(spec.runs);
    let mut picks = Vec::new();
    for j in 0..spec.runs {
        let cfg = SolverConfig::new(spec.method).seed(seed.wrapping_mul(RUN_SEED_STRIDE).wrapping_add(j as u64));
        let mut solver = Solver::new(source, q, inverses, cfg)?;
        let stop = StopRule {
            max_iters: spec.max_iters,
            grad_tol: None,
            eps: spec.eps,
            residual_check_every: None,
        };
        let mut trace = Vec::new();
        run(&mut solver, &stop, Some(metrics), &mut trace)?;
        let eps = spec.eps.unwrap_or(0.0);
        iters.push(iterations_to_eps(&trace, eps).map_or(f64::INFINITY, |k| k as f64));
        picks.extend(trace.iter().filter_map(|r| r.block));
        traces.push(trace);
    }
    let trace = if traces.len() == 1 {
        traces.pop().expect("one run")
    } else {
        average_traces(&traces)
    };
    let last = trace.last().expect("k = 0 row");
    Ok(MethodRun {
        label: spec.label.to_string(),
        iterations_to_eps: iters.iter().sum::<f64>() / iters.len() as f64,
        final_e_pnorm: last.e_pnorm.unwrap_or(f64::NAN),
        final_e_2norm: last.e_2norm.unwrap_or(f64::NAN),
        rows_touched_per_iter: trace.get(1).map_or(0, |r| r.rows_touched),
        trace,
        picks,
    })
}

fn fmt_iters(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.1}")
    } else {
        "not reached".to_string()
    }
}

fn write_traces(out: &Path, prefix: &str, runs: &[MethodRun]) -> Result<()> {
    for r in runs {
        write_csv(&r.trace, &out.join(format!("{prefix}_{}.csv", r.label)))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone)]
pub struct Experiment1Config {
    pub n: usize,
    pub block: usize,
    pub diag_scale: f64,
    pub off_scale: f64,
    pub seeds: Vec<u64>,
    pub eps: f64,
    /// Iteration budget for block methods.
    pub max_block_iters: usize,
    /// Iteration budget for steepest descent and conjugate gradient.
    pub max_full_iters: usize,
    /// Runs averaged for randomized BCD.
    pub randomized_runs: usize,
    /// Methods to run, a subset of [`EXP1_LABELS`].
    pub methods: Vec<String>,
}

pub const EXP1_LABELS: [&str; 6] = ["cg", "sd", "rbcd", "rr-bcd", "gbcd-bs", "gbcd"];

impl Default for Experiment1Config {
    fn default() -> Self {
        Self {
            n: 2048,
            block: 64,
            diag_scale: 10.0,
            off_scale: 0.1,
            seeds: vec![0],
            eps: 1e-3,
            max_block_iters: 20_000,
            max_full_iters: 5_000,
            randomized_runs: 25,
            methods: EXP1_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedRuns {
    pub seed: u64,
    pub runs: Vec<MethodRun>,
}

impl SeedRuns {
    pub fn get(&self, label: &str) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.label == label)
    }
}

fn median_by(per_seed: &[SeedRuns], label: &str, f: impl Fn(&MethodRun) -> f64) -> f64 {
    let v: Vec<f64> = per_seed
        .iter()
        .filter_map(|s| s.get(label))
        .map(f)
        .collect();
    median(&v)
}

#[derive(Debug, Clone)]
pub struct Experiment1Report {
    pub config: Experiment1Config,
    pub per_seed: Vec<SeedRuns>,
}

impl Experiment1Report {
    pub fn median_iterations(&self, label: &str) -> f64 {
        median_by(&self.per_seed, label, |r| r.iterations_to_eps)
    }

    pub fn summary(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        writeln!(
            s,
            "experiment 1: block-dominant n={} block={} diag={} off={} eps={:e} seeds={:?}",
            c.n, c.block, c.diag_scale, c.off_scale, c.eps, c.seeds
        )
        .unwrap();
        writeln!(s, "{:<10} {:>16} {:>14}", "method", "median iters", "rows/iter").unwrap();
        if let Some(first) = self.per_seed.first() {
            for r in &first.runs {
                writeln!(
                    s,
                    "{:<10} {:>16} {:>14}",
                    r.label,
                    fmt_iters(self.median_iterations(&r.label)),
                    r.rows_touched_per_iter
                )
                .unwrap();
            }
        }
        s
    }
}

/// Block-dominant instance stored on disk, solved by CG, SD, randomized BCD,
/// cyclic BCD, GBCD-BS and GBCD under the contiguous partition.
pub fn experiment1(config: &Experiment1Config, work_dir: &Path, out: Option<&Path>) -> Result<Experiment1Report> {
    if let Some(bad) = config.methods.iter().find(|m| !EXP1_LABELS.contains(&m.as_str())) {
        return Err(Error::InvalidStrategyConfig(format!("unknown experiment-1 method {bad:?}")));
    }
    let mut per_seed = Vec::new();
    for &seed in &config.seeds {
        let root = work_dir.join(format!("exp1_seed{seed}_store"));
        let (mut store, generated) = gen_block_dominant_to_store(
            config.n,
            config.block,
            config.diag_scale,
            config.off_scale,
            seed,
            &root,
        )?;
        let inverses = store.precompute_inverses(1)?;
        let store = Arc::new(store);
        let prob = UqpProblem::from_store(Arc::clone(&store), 0.0)?;
        let oracle = if config.n <= DIRECT_SOLVE_CAP {
            solve_direct(&prob)?
        } else {
            generated
        };
        let metrics = OracleMetrics {
            oracle: &oracle,
            p: None,
        };
        let eps = Some(config.eps);
        let specs: Vec<RunSpec<'_>> = EXP1_LABELS
            .iter()
            .filter(|l| config.methods.iter().any(|m| m == *l))
            .map(|&label| {
                let (method, runs, max_iters) = match label {
                    "cg" => (Method::ConjugateGradient, 1, config.max_full_iters),
                    "sd" => (Method::SteepestDescent, 1, config.max_full_iters),
                    "rbcd" => (Method::Bcd(BcdStrategy::RandEigWeighted), config.randomized_runs, config.max_block_iters),
                    "rr-bcd" => (Method::Bcd(BcdStrategy::RoundRobin), 1, config.max_block_iters),
                    "gbcd-bs" => (Method::GbcdBs { r: config.block }, 1, config.max_block_iters),
                    _ => (Method::Gbcd, 1, config.max_block_iters),
                };
                RunSpec { label, method, runs, max_iters, eps }
            })
            .collect();
        let runs = specs
            .iter()
            .map(|spec| run_method(&*store, prob.q(), Some(&inverses), metrics, spec, seed))
            .collect::<Result<Vec<_>>>()?;
        if let Some(out) = out {
            ensure_dir(out)?;
            write_traces(out, &format!("exp1_seed{seed}"), &runs)?;
        }
        drop(store);
        fs::remove_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        per_seed.push(SeedRuns { seed, runs });
    }
    let report = Experiment1Report {
        config: config.clone(),
        per_seed,
    };
    if let Some(out) = out {
        write_text(&out.join("exp1_summary.txt"), &report.summary())?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct Experiment2Config {
    pub n: usize,
    pub heavy: usize,
    pub factor: f64,
    pub seeds: Vec<u64>,
    pub budget: usize,
    pub randomized_runs: usize,
}

impl Default for Experiment2Config {
    fn default() -> Self {
        Self {
            n: 256,
            heavy: 8,
            factor: 1000.0,
            seeds: vec![0],
            budget: 2000,
            randomized_runs: 25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Experiment2Seed {
    pub seed: u64,
    pub heavy: Vec<usize>,
    pub runs: Vec<MethodRun>,
}

impl Experiment2Seed {
    pub fn get(&self, label: &str) -> Option<&MethodRun> {
        self.runs.iter().find(|r| r.label == label)
    }

    /// Fraction of a method's picks that landed on the heavy rows.
    pub fn heavy_pick_fraction(&self, label: &str) -> f64 {
        let Some(run) = self.get(label) else {
            return f64::NAN;
        };
        let hits = run.picks.iter().filter(|b| self.heavy.binary_search(b).is_ok()).count();
        hits as f64 / run.picks.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct Experiment2Report {
    pub config: Experiment2Config,
    pub per_seed: Vec<Experiment2Seed>,
}

pub const EXP2_LABELS: [&str; 3] = ["rk", "rcd", "gbcd"];

impl Experiment2Report {
    pub fn median_final_e2(&self, label: &str) -> f64 {
        median(
            &self
                .per_seed
                .iter()
                .filter_map(|s| s.get(label).map(|r| r.final_e_2norm))
                .collect::<Vec<_>>(),
        )
    }

    pub fn median_final_ep(&self, label: &str) -> f64 {
        median(
            &self
                .per_seed
                .iter()
                .filter_map(|s| s.get(label).map(|r| r.final_e_pnorm))
                .collect::<Vec<_>>(),
        )
    }

    pub fn median_heavy_fraction(&self, label: &str) -> f64 {
        median(
            &self
                .per_seed
                .iter()
                .map(|s| s.heavy_pick_fraction(label))
                .collect::<Vec<_>>(),
        )
    }

    pub fn summary(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        writeln!(
            s,
            "experiment 2: scaled rows n={} heavy={} factor={} budget={} runs={} seeds={:?}",
            c.n, c.heavy, c.factor, c.budget, c.randomized_runs, c.seeds
        )
        .unwrap();
        writeln!(s, "{:<6} {:>22} {:>22} {:>14}", "method", "median final e_2norm", "median final e_pnorm", "picks on heavy").unwrap();
        for label in EXP2_LABELS {
            writeln!(
                s,
                "{:<6} {:>22.6e} {:>22.6e} {:>14.4}",
                label,
                self.median_final_e2(label),
                self.median_final_ep(label),
                self.median_heavy_fraction(label)
            )
            .unwrap();
        }
        s
    }
}

fn histogram_csv(n: usize, seed: &Experiment2Seed) -> String {
    let mut s = String::from("row,heavy");
    for label in EXP2_LABELS {
        write!(s, ",{label}").unwrap();
    }
    s.push('\n');
    let counts: Vec<Vec<usize>> = EXP2_LABELS
        .iter()
        .map(|l| {
            let mut c = vec![0usize; n];
            if let Some(r) = seed.get(l) {
                for &b in &r.picks {
                    c[b] += 1;
                }
            }
            c
        })
        .collect();
    for i in 0..n {
        write!(s, "{i},{}", u8::from(seed.heavy.binary_search(&i).is_ok())).unwrap();
        for c in &counts {
            write!(s, ",{}", c[i]).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Scaled-rows instance under the singleton partition: randomized Kaczmarz,
/// randomized coordinate descent and GBCD for a fixed budget.
pub fn experiment2(config: &Experiment2Config, out: Option<&Path>) -> Result<Experiment2Report> {
    let mut per_seed = Vec::new();
    for &seed in &config.seeds {
        let (prob, heavy) = gen_scaled_rows(config.n, config.heavy, config.factor, seed)?;
        let oracle = solve_direct(&prob)?;
        let source = in_memory_source(&prob, Partition::singletons(config.n))?;
        let inverses = BlockInverses::compute(&source, 1)?;
        let p = prob.dense().expect("generated in memory");
        let metrics = OracleMetrics {
            oracle: &oracle,
            p: Some(p),
        };
        let specs = [
            RunSpec { label: "rk", method: Method::Bk(BkStrategy::RandRowNormSq), runs: config.randomized_runs, max_iters: config.budget, eps: None },
            RunSpec { label: "rcd", method: Method::Bcd(BcdStrategy::RandDiagSingleRow), runs: config.randomized_runs, max_iters: config.budget, eps: None },
            RunSpec { label: "gbcd", method: Method::Gbcd, runs: 1, max_iters: config.budget, eps: None },
        ];
        let runs = specs
            .iter()
            .map(|spec| run_method(&source, prob.q(), Some(&inverses), metrics, spec, seed))
            .collect::<Result<Vec<_>>>()?;
        let seed_report = Experiment2Seed { seed, heavy, runs };
        if let Some(out) = out {
            ensure_dir(out)?;
            write_traces(out, &format!("exp2_seed{seed}"), &seed_report.runs)?;
            write_text(
                &out.join(format!("exp2_seed{seed}_picks.csv")),
                &histogram_csv(config.n, &seed_report),
            )?;
        }
        per_seed.push(seed_report);
    }
    let report = Experiment2Report {
        config: config.clone(),
        per_seed,
    };
    if let Some(out) = out {
        write_text(&out.join("exp2_summary.txt"), &report.summary())?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct Experiment3Config {
    pub n: usize,
    pub heavy: usize,
    pub factor: f64,
    pub block: usize,
    pub seeds: Vec<u64>,
    pub eps: f64,
    pub max_iters: usize,
}

impl Default for Experiment3Config {
    fn default() -> Self {
        Self {
            n: 256,
            heavy: 8,
            factor: 1000.0,
            block: 16,
            seeds: vec![0],
            eps: 1e-3,
            max_iters: 200_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PartitionRun {
    pub label: &'static str,
    pub partition: Partition,
    pub bound: RateReport,
    pub run: MethodRun,
}

#[derive(Debug, Clone)]
pub struct Experiment3Seed {
    pub seed: u64,
    pub random: PartitionRun,
    pub dominant: PartitionRun,
}

#[derive(Debug, Clone)]
pub struct Experiment3Report {
    pub config: Experiment3Config,
    pub per_seed: Vec<Experiment3Seed>,
}

impl Experiment3Report {
    fn median_of(&self, f: impl Fn(&Experiment3Seed) -> f64) -> f64 {
        median(&self.per_seed.iter().map(f).collect::<Vec<_>>())
    }

    pub fn median_iterations(&self) -> (f64, f64) {
        (
            self.median_of(|s| s.random.run.iterations_to_eps),
            self.median_of(|s| s.dominant.run.iterations_to_eps),
        )
    }

    pub fn median_bound_exact(&self) -> (f64, f64) {
        (
            self.median_of(|s| s.random.bound.bound_exact),
            self.median_of(|s| s.dominant.bound.bound_exact),
        )
    }

    pub fn summary(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        writeln!(
            s,
            "experiment 3: scaled rows n={} heavy={} factor={} block={} eps={:e} seeds={:?}",
            c.n, c.heavy, c.factor, c.block, c.eps, c.seeds
        )
        .unwrap();
        writeln!(
            s,
            "{:<6} {:<9} {:>4} {:>12} {:>24} {:>24} {:>14}",
            "seed", "partition", "m", "iters", "lambda_min", "bound_exact", "dominance_gap"
        )
        .unwrap();
        for seed in &self.per_seed {
            for pr in [&seed.random, &seed.dominant] {
                writeln!(
                    s,
                    "{:<6} {:<9} {:>4} {:>12} {:>24.16e} {:>24.16e} {:>14.6e}",
                    seed.seed,
                    pr.label,
                    pr.bound.m,
                    fmt_iters(pr.run.iterations_to_eps),
                    pr.bound.lambda_min_pb,
                    pr.bound.bound_exact,
                    pr.bound.dominance_gap
                )
                .unwrap();
            }
        }
        let (ri, di) = self.median_iterations();
        let (rb, db) = self.median_bound_exact();
        writeln!(s, "median iterations: random {} dominant {}", fmt_iters(ri), fmt_iters(di)).unwrap();
        writeln!(s, "median bound_exact: random {rb:.16e} dominant {db:.16e}").unwrap();
        s
    }
}

fn partition_run(
    prob: &UqpProblem,
    oracle: &Oracle,
    label: &'static str,
    partition: Partition,
    config: &Experiment3Config,
    seed: u64,
) -> Result<PartitionRun> {
    let bound = rate_bound(prob, &partition)?;
    let source = in_memory_source(prob, partition.clone())?;
    let inverses = BlockInverses::compute(&source, 1)?;
    let metrics = OracleMetrics { oracle, p: None };
    let spec = RunSpec {
        label,
        method: Method::Gbcd,
        runs: 1,
        max_iters: config.max_iters,
        eps: Some(config.eps),
    };
    let run = run_method(&source, prob.q(), Some(&inverses), metrics, &spec, seed)?;
    Ok(PartitionRun {
        label,
        partition,
        bound,
        run,
    })
}

/// GBCD on a scaled-rows instance under a random partition and under a
/// partition that keeps the heavy rows together, with both rate bounds.
pub fn experiment3(config: &Experiment3Config, out: Option<&Path>) -> Result<Experiment3Report> {
    let mut per_seed = Vec::new();
    for &seed in &config.seeds {
        let (prob, heavy) = gen_scaled_rows(config.n, config.heavy, config.factor, seed)?;
        let oracle = solve_direct(&prob)?;
        let random = random_partition(config.n, config.block, seed)?;
        let dominant = dominant_partition(config.n, config.block, &heavy, seed)?;
        let random = partition_run(&prob, &oracle, "random", random, config, seed)?;
        let dominant = partition_run(&prob, &oracle, "dominant", dominant, config, seed)?;
        if let Some(out) = out {
            ensure_dir(out)?;
            for pr in [&random, &dominant] {
                let stem = format!("exp3_seed{seed}_{}", pr.label);
                write_csv(&pr.run.trace, &out.join(format!("{stem}.csv")))?;
                write_text(&out.join(format!("{stem}_partition.txt")), &pr.partition.to_text())?;
            }
        }
        per_seed.push(Experiment3Seed {
            seed,
            random,
            dominant,
        });
    }
    let report = Experiment3Report {
        config: config.clone(),
        per_seed,
    };
    if let Some(out) = out {
        write_text(&out.join("exp3_summary.txt"), &report.summary())?;
    }
    Ok(report)
}

/// Cost of replaying a block-choice sequence with blocks spread over nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DistCostReport {
    pub n_nodes: usize,
    /// Entries moved before each iteration: `2n` on a handoff, else `0`.
    pub transfer_units: Vec<u64>,
    /// `n·d_i` per iteration.
    pub compute_units: Vec<u64>,
    /// Node active at each iteration.
    pub active_node: Vec<usize>,
}

impl DistCostReport {
    pub fn total_transfer(&self) -> u64 {
        self.transfer_units.iter().sum()
    }

    pub fn total_compute(&self) -> u64 {
        self.compute_units.iter().sum()
    }

    /// One-hot activity vector for iteration `k`.
    pub fn utilization(&self, k: usize) -> Vec<f64> {
        let mut u = vec![0.0; self.n_nodes];
        u[self.active_node[k]] = 1.0;
        u
    }

    /// Fraction of iterations each node was active.
    pub fn node_share(&self) -> Vec<f64> {
        let mut share = vec![0.0; self.n_nodes];
        for &a in &self.active_node {
            share[a] += 1.0;
        }
        let k = self.active_node.len().max(1) as f64;
        share.iter_mut().for_each(|s| *s /= k);
        share
    }
}

/// Replays `blocks` (the chosen block per iteration) with block `i` held on
/// node `assignment[i]`. The iterate and gradient start on `start_node`; each
/// change of node costs `2n` transferred entries.
pub fn simulate_distributed(
    blocks: &[usize],
    block_sizes: &[usize],
    assignment: &[usize],
    n_nodes: usize,
    start_node: usize,
) -> Result<DistCostReport> {
    if assignment.len() != block_sizes.len() {
        return Err(Error::InvalidAssignment(format!(
            "{} assignments for {} blocks",
            assignment.len(),
            block_sizes.len()
        )));
    }
    if let Some(&bad) = assignment.iter().chain([&start_node]).find(|&&a| a >= n_nodes) {
        return Err(Error::InvalidAssignment(format!(
            "node {bad} out of range for {n_nodes} nodes"
        )));
    }
    let n: usize = block_sizes.iter().sum();
    let mut current = start_node;
    let mut report = DistCostReport {
        n_nodes,
        transfer_units: Vec::with_capacity(blocks.len()),
        compute_units: Vec::with_capacity(blocks.len()),
        active_node: Vec::with_capacity(blocks.len()),
    };
    for &b in blocks {
        let node = *assignment.get(b).ok_or_else(|| {
            Error::InvalidAssignment(format!("block {b} has no assigned node"))
        })?;
        report
            .transfer_units
            .push(if node != current { 2 * n as u64 } else { 0 });
        report.compute_units.push((n * block_sizes[b]) as u64);
        report.active_node.push(node);
        current = node;
    }
    Ok(report)
}

/// Block sequence of a trace, skipping the `k = 0` row.
pub fn block_sequence(trace: &[TraceRecord]) -> Vec<usize> {
    trace.iter().filter_map(|r| r.block).collect()
}

/// Where experiment 1 keeps its temporary stores when no directory is given.
pub fn default_work_dir() -> PathBuf {
    std::env::temp_dir().join(format!("gbcd-bench-{}", std::process::id()))
}

/// Opens a store for benchmarks, computing inverses on first use.
pub fn open_with_inverses(root: &Path, cache: Option<&Path>) -> Result<(BlockStore, BlockInverses)> {
    let mut store = BlockStore::open_with_cache_dir(root, cache)?;
    let inv = store.ensure_inverses(1)?;
    Ok((store, inv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[1.0, f64::INFINITY, f64::INFINITY]), f64::INFINITY);
    }

    #[test]
    fn one_node_never_transfers() {
        let r = simulate_distributed(&[0, 1, 2, 1, 0], &[2, 2, 2], &[0, 0, 0], 1, 0).unwrap();
        assert_eq!(r.total_transfer(), 0);
        assert_eq!(r.total_compute(), 5 * 6 * 2);
    }

    #[test]
    fn alternating_nodes_transfer_every_step() {
        let k = 10;
        let seq: Vec<usize> = (0..k).map(|i| i % 2).collect();
        let r = simulate_distributed(&seq, &[3, 3], &[1, 0], 2, 0).unwrap();
        assert_eq!(r.total_transfer(), 2 * 6 * k as u64);
        for i in 0..k {
            assert_eq!(r.utilization(i).iter().sum::<f64>(), 1.0);
        }
        assert_eq!(r.node_share(), vec![0.5, 0.5]);
    }

    #[test]
    fn bad_assignments() {
        assert!(matches!(
            simulate_distributed(&[0], &[1, 1], &[0], 1, 0),
            Err(Error::InvalidAssignment(_))
        ));
        assert!(matches!(
            simulate_distributed(&[0], &[1], &[3], 2, 0),
            Err(Error::InvalidAssignment(_))
        ));
        assert!(matches!(
            simulate_distributed(&[5], &[1], &[0], 1, 0),
            Err(Error::InvalidAssignment(_))
        ));
    }

    #[test]
    fn averaged_trace_holds_last_values() {
        let rec = |k, e| TraceRecord {
            k,
            wall_nanos: 0,
            e_pnorm: Some(e),
            e_2norm: Some(e),
            f_gap: None,
            block: Some(0),
            beta: None,
            blocks_fetched: 1,
            rows_touched: 1,
        };
        let avg = average_traces(&[vec![rec(0, 1.0), rec(1, 0.5)], vec![rec(0, 1.0)]]);
        assert_eq!(avg.len(), 2);
        assert_eq!(avg[1].e_pnorm, Some(0.75));
        assert_eq!(iterations_to_eps(&avg, 0.8), Some(1));
    }
}
