//! Command-line front end: `gen`, `solve`, `bound` and `bench`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use crate::bench::{self, Experiment1Config, Experiment2Config, Experiment3Config};
use crate::blockstore::{write_store, BlockSource, BlockStore};
use crate::error::{Error, Result};
use crate::partition::{
    contiguous_partition, dominant_partition, random_partition, rate_bound, HdcLimits, Partition,
};
use crate::problem::{
    gen_block_dominant, gen_block_dominant_to_store, gen_random_spd, gen_scaled_rows,
    solve_direct, Oracle, UqpProblem, DIRECT_SOLVE_CAP,
};
use crate::solvers::{
    run, BcdStrategy, BkStrategy, Method, OracleMetrics, Solver, SolverConfig, StopRule,
    GREEDY_BK_CAP,
};
use crate::trace::write_csv;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NOT_CONVERGED: i32 = 4;
pub const EXIT_CAPABILITY: i32 = 5;

pub const ORACLE_FILE: &str = "oracle.bin";
pub const HEAVY_FILE: &str = "heavy.txt";
pub const PARTITION_FILE: &str = "partition.txt";
pub const CACHE_DIR_ENV: &str = "UQP_CACHE_DIR";
const ORACLE_MAGIC: &[u8; 4] = b"UQPO";

#[derive(Debug, Parser)]
#[command(name = "gbcd", version, about = "Out-of-core solvers for dense quadratic programs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    BlockDominant,
    ScaledRows,
    RandomSpd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartitionKind {
    Contiguous,
    Random,
    Dominant,
    Singleton,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Gbcd,
    Bcd,
    Bk,
    Sd,
    Cg,
    GbcdBs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    RoundRobin,
    RandEig,
    RandDiag,
    RandRowNorm,
    Greedy,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an instance and write it as a block store.
    Gen {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        n: usize,
        /// Tile size of the block-dominant generator and partition block size.
        #[arg(long, default_value_t = 64)]
        block: usize,
        #[arg(long, default_value_t = 10.0)]
        diag_scale: f64,
        #[arg(long, default_value_t = 0.1)]
        off_scale: f64,
        #[arg(long, default_value_t = 8)]
        heavy: usize,
        #[arg(long, default_value_t = 1000.0)]
        factor: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = PartitionKind::Contiguous)]
        partition: PartitionKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a solver on a store.
    Solve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Target `E_k` with an oracle sidecar, else relative gradient norm.
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, default_value_t = 10_000)]
        max_iters: usize,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Row count for gbcd-bs.
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        grad_tol: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Permit methods whose iterations cost O(n²).
        #[arg(long)]
        allow_quadratic: bool,
    },
    /// Print the convergence-rate bound of a partition.
    Bound {
        #[arg(long)]
        store: PathBuf,
        /// Partition file; defaults to the store's partition.
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Reproduce one of the experiments.
    Bench {
        #[arg(long)]
        experiment: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Allow dimensions beyond the direct-solve cap.
        #[arg(long)]
        full_scale: bool,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        block: Option<usize>,
        /// Runs averaged for randomized methods.
        #[arg(long)]
        runs: Option<usize>,
        /// Iteration budget.
        #[arg(long)]
        budget: Option<usize>,
        /// Comma-separated experiment-1 methods; defaults to all.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Corrupt { .. } => EXIT_IO,
        Error::TooLargeForDirect { .. } => EXIT_CAPABILITY,
        Error::InvalidShape(_)
        | Error::InvalidPartition(_)
        | Error::InvalidStrategyConfig(_)
        | Error::InvalidAssignment(_)
        | Error::Parse(_)
        | Error::DimensionMismatch { .. }
        | Error::IndexOutOfRange { .. } => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Usage error carrying its own message.
struct Usage(String);

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let res = match cmd {
        Command::Gen {
            kind,
            n,
            block,
            diag_scale,
            off_scale,
            heavy,
            factor,
            seed,
            partition,
            out: dir,
        } => cmd_gen(
            &GenArgs { kind, n, block, diag_scale, off_scale, heavy, factor, seed, partition },
            &dir,
            out,
        ),
        Command::Solve {
            store,
            method,
            strategy,
            eps,
            max_iters,
            trace,
            rows,
            workers,
            grad_tol,
            seed,
            allow_quadratic,
        } => cmd_solve(
            &SolveArgs {
                store,
                method,
                strategy,
                eps,
                max_iters,
                trace,
                rows,
                workers,
                grad_tol,
                seed,
                allow_quadratic,
            },
            out,
            err,
        ),
        Command::Bound { store, partition } => cmd_bound(&store, partition.as_deref(), out),
        Command::Bench {
            experiment,
            out: dir,
            seeds,
            full_scale,
            n,
            block,
            runs,
            budget,
            methods,
        } => cmd_bench(experiment, &dir, seeds, full_scale, n, block, runs, budget, &methods, out),
    };
    match res {
        Ok(code) => Ok(code),
        Err(CmdError::Usage(Usage(msg))) => {
            let _ = writeln!(err, "usage error: {msg}");
            Ok(EXIT_USAGE)
        }
        Err(CmdError::Capability(msg)) => {
            let _ = writeln!(err, "refused: {msg}");
            Ok(EXIT_CAPABILITY)
        }
        Err(CmdError::Lib(e)) => Err(e),
    }
}

enum CmdError {
    Usage(Usage),
    Capability(String),
    Lib(Error),
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        CmdError::Lib(e)
    }
}

fn usage(msg: impl Into<String>) -> CmdError {
    CmdError::Usage(Usage(msg.into()))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(text)
        .and_then(|_| out.write_all(b"\n"))
        .map_err(io_err(Path::new("<stdout>")))
}

macro_rules! outln {
    ($out:expr, $($arg:tt)*) => {
        say($out, format_args!($($arg)*))
    };
}

pub fn write_oracle(path: &Path, oracle: &Oracle) -> Result<()> {
    let mut bytes = Vec::with_capacity(24 + 8 * oracle.x_opt.len());
    bytes.extend_from_slice(ORACLE_MAGIC);
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&(oracle.x_opt.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&oracle.f_opt.to_le_bytes());
    for v in &oracle.x_opt {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_oracle(path: &Path) -> Result<Oracle> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 28 {
        return Err(corrupt("truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(corrupt("checksum mismatch"));
    }
    if &body[..4] != ORACLE_MAGIC || body[4..8] != 1u32.to_le_bytes() {
        return Err(corrupt("bad header"));
    }
    let n = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    if body.len() != 24 + 8 * n {
        return Err(corrupt("unexpected length"));
    }
    let f_opt = f64::from_le_bytes(body[16..24].try_into().expect("8 bytes"));
    let x_opt = body[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Oracle { x_opt, f_opt })
}

fn write_indices(path: &Path, idx: &[usize]) -> Result<()> {
    let text: String = idx.iter().map(|i| format!("{i}\n")).collect();
    fs::write(path, text).map_err(io_err(path))
}

fn read_indices(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad index {l:?} in {}", path.display())))
        })
        .collect()
}

struct GenArgs {
    kind: Kind,
    n: usize,
    block: usize,
    diag_scale: f64,
    off_scale: f64,
    heavy: usize,
    factor: f64,
    seed: u64,
    partition: PartitionKind,
}

fn kind_name(kind: Kind) -> &'static str {
    match kind {
        Kind::BlockDominant => "block-dominant",
        Kind::ScaledRows => "scaled-rows",
        Kind::RandomSpd => "random-spd",
    }
}

fn partition_name(p: PartitionKind) -> &'static str {
    match p {
        PartitionKind::Contiguous => "contiguous",
        PartitionKind::Random => "random",
        PartitionKind::Dominant => "dominant",
        PartitionKind::Singleton => "singleton",
    }
}

fn cmd_gen(a: &GenArgs, dir: &Path, out: &mut dyn Write) -> std::result::Result<i32, CmdError> {
    outln!(
        out,
        "config: command=gen kind={} n={} block={} diag_scale={} off_scale={} heavy={} factor={} seed={} partition={} out={}",
        kind_name(a.kind), a.n, a.block, a.diag_scale, a.off_scale, a.heavy, a.factor, a.seed,
        partition_name(a.partition), dir.display()
    )?;
    if a.block == 0 || a.block > a.n {
        return Err(usage(format!("block size {} must be in 1..={}", a.block, a.n)));
    }
    let streamed = a.kind == Kind::BlockDominant
        && a.n > DIRECT_SOLVE_CAP
        && a.partition == PartitionKind::Contiguous;
    if streamed {
        let (store, _) =
            gen_block_dominant_to_store(a.n, a.block, a.diag_scale, a.off_scale, a.seed, dir)?;
        write_text(&dir.join(PARTITION_FILE), &store.partition().to_text())?;
        outln!(out, "store: n={} blocks={} oracle=none", store.n(), store.partition().len())?;
        return Ok(EXIT_OK);
    }

    let (prob, heavy) = match a.kind {
        Kind::BlockDominant => (
            gen_block_dominant(a.n, a.block, a.diag_scale, a.off_scale, a.seed)?,
            None,
        ),
        Kind::ScaledRows => {
            let (p, h) = gen_scaled_rows(a.n, a.heavy, a.factor, a.seed)?;
            (p, Some(h))
        }
        Kind::RandomSpd => (gen_random_spd(a.n, a.seed)?, None),
    };
    let part = match a.partition {
        PartitionKind::Contiguous => contiguous_partition(a.n, a.block)?,
        PartitionKind::Random => random_partition(a.n, a.block, a.seed)?,
        PartitionKind::Singleton => Partition::singletons(a.n),
        PartitionKind::Dominant => {
            let heavy = heavy
                .clone()
                .ok_or_else(|| usage("the dominant partition needs --kind scaled-rows"))?;
            dominant_partition(a.n, a.block, &heavy, a.seed)?
        }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let store = write_store(&prob, &part, dir)?;
    write_text(&dir.join(PARTITION_FILE), &part.to_text())?;
    if let Some(h) = &heavy {
        write_indices(&dir.join(HEAVY_FILE), h)?;
    }
    let oracle = if a.n <= DIRECT_SOLVE_CAP {
        let o = solve_direct(&prob)?;
        write_oracle(&dir.join(ORACLE_FILE), &o)?;
        "oracle.bin"
    } else {
        "none"
    };
    outln!(
        out,
        "store: n={} blocks={} max_block={} oracle={}{}",
        store.n(),
        part.len(),
        part.max_block_size(),
        oracle,
        if heavy.is_some() { " heavy=heavy.txt" } else { "" }
    )?;
    Ok(EXIT_OK)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

struct SolveArgs {
    store: PathBuf,
    method: MethodArg,
    strategy: Option<StrategyArg>,
    eps: f64,
    max_iters: usize,
    trace: Option<PathBuf>,
    rows: Option<usize>,
    workers: usize,
    grad_tol: Option<f64>,
    seed: u64,
    allow_quadratic: bool,
}

fn strategy_name(s: StrategyArg) -> &'static str {
    match s {
        StrategyArg::RoundRobin => "round-robin",
        StrategyArg::RandEig => "rand-eig",
        StrategyArg::RandDiag => "rand-diag",
        StrategyArg::RandRowNorm => "rand-row-norm",
        StrategyArg::Greedy => "greedy",
    }
}

fn method_name(m: MethodArg) -> &'static str {
    match m {
        MethodArg::Gbcd => "gbcd",
        MethodArg::Bcd => "bcd",
        MethodArg::Bk => "bk",
        MethodArg::Sd => "sd",
        MethodArg::Cg => "cg",
        MethodArg::GbcdBs => "gbcd-bs",
    }
}

/// Maps the method and strategy flags to a solver method.
pub fn resolve_method(
    method: MethodArg,
    strategy: Option<StrategyArg>,
    rows: Option<usize>,
) -> std::result::Result<Method, String> {
    use StrategyArg as S;
    let no_strategy = |m: Method| match strategy {
        None => Ok(m),
        Some(s) => Err(format!(
            "--strategy {} does not apply to --method {}",
            strategy_name(s),
            method_name(method)
        )),
    };
    let bad = |s: StrategyArg| {
        Err(format!(
            "--strategy {} is not valid for --method {}",
            strategy_name(s),
            method_name(method)
        ))
    };
    if rows.is_some() && method != MethodArg::GbcdBs {
        return Err("--rows applies only to --method gbcd-bs".into());
    }
    match method {
        MethodArg::Gbcd => no_strategy(Method::Gbcd),
        MethodArg::Sd => no_strategy(Method::SteepestDescent),
        MethodArg::Cg => no_strategy(Method::ConjugateGradient),
        MethodArg::GbcdBs => {
            let r = rows.ok_or("--method gbcd-bs needs --rows")?;
            no_strategy(Method::GbcdBs { r })
        }
        MethodArg::Bcd => match strategy.unwrap_or(S::RoundRobin) {
            S::RoundRobin => Ok(Method::Bcd(BcdStrategy::RoundRobin)),
            S::RandEig => Ok(Method::Bcd(BcdStrategy::RandEigWeighted)),
            S::RandDiag => Ok(Method::Bcd(BcdStrategy::RandDiagSingleRow)),
            s => bad(s),
        },
        MethodArg::Bk => match strategy.unwrap_or(S::RoundRobin) {
            S::RoundRobin => Ok(Method::Bk(BkStrategy::RoundRobin)),
            S::RandRowNorm => Ok(Method::Bk(BkStrategy::RandRowNormSq)),
            S::Greedy => Ok(Method::Bk(BkStrategy::Greedy)),
            s => bad(s),
        },
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.16e}"))
}

fn cmd_solve(a: &SolveArgs, out: &mut dyn Write, err: &mut dyn Write) -> std::result::Result<i32, CmdError> {
    let method = resolve_method(a.method, a.strategy, a.rows).map_err(usage)?;
    if !(a.eps > 0.0) {
        return Err(usage("--eps must be positive"));
    }
    let cache = std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from);
    outln!(
        out,
        "config: command=solve store={} method={} strategy={} eps={:e} max_iters={} rows={} workers={} grad_tol={} seed={} allow_quadratic={} cache_dir={}",
        a.store.display(),
        method_name(a.method),
        a.strategy.map_or("default", strategy_name),
        a.eps,
        a.max_iters,
        a.rows.map_or("none".to_string(), |r| r.to_string()),
        a.workers,
        a.grad_tol.map_or("none".to_string(), |t| format!("{t:e}")),
        a.seed,
        a.allow_quadratic,
        cache.as_ref().map_or("store".to_string(), |c| c.display().to_string()),
    )?;

    let mut store = BlockStore::open_with_cache_dir(&a.store, cache.as_deref())?;
    let n = store.n();
    if method == Method::Bk(BkStrategy::Greedy) && n > GREEDY_BK_CAP {
        return Err(CmdError::Capability(format!(
            "greedy block Kaczmarz is non-HDC and limited to n <= {GREEDY_BK_CAP} (n = {n})"
        )));
    }
    if method.is_quadratic() && !a.allow_quadratic {
        return Err(CmdError::Capability(format!(
            "--method {} costs O(n^2) per iteration and is not high-dimension compliant; pass --allow-quadratic",
            method_name(a.method)
        )));
    }
    let inverses = if method.needs_inverses() {
        Some(store.ensure_inverses(a.workers)?)
    } else {
        None
    };
    let store = Arc::new(store);
    let prob = UqpProblem::from_store(Arc::clone(&store), 0.0)?;
    let oracle_path = a.store.join(ORACLE_FILE);
    let oracle = if oracle_path.exists() {
        Some(read_oracle(&oracle_path)?)
    } else {
        None
    };
    let dense_p = match (&oracle, method.maintains_gradient()) {
        (Some(_), false) if n <= DIRECT_SOLVE_CAP => Some(prob.dense_p(DIRECT_SOLVE_CAP)?.into_owned()),
        _ => None,
    };

    let cfg = SolverConfig::new(method).seed(a.seed).workers(a.workers);
    let mut solver = Solver::new(&*store, prob.q(), inverses.as_ref(), cfg)?;
    if !method.is_quadratic() && !solver.hdc_admissible(HdcLimits::unbounded()) {
        let _ = writeln!(
            err,
            "warning: block size {} exceeds the high-dimension cap for n = {n}",
            store.partition().max_block_size()
        );
    }
    let stop = StopRule {
        max_iters: a.max_iters,
        grad_tol: if oracle.is_some() { a.grad_tol } else { Some(a.grad_tol.unwrap_or(a.eps)) },
        eps: oracle.as_ref().map(|_| a.eps),
        residual_check_every: None,
    };
    let metrics = oracle.as_ref().map(|o| OracleMetrics {
        oracle: o,
        p: dense_p.as_ref(),
    });
    let mut trace = Vec::new();
    let result = run(&mut solver, &stop, metrics, &mut trace)?;
    if let Some(path) = &a.trace {
        write_csv(&trace, path)?;
    }
    outln!(out, "iterations: {}", result.iterations)?;
    outln!(out, "stop: {:?}", result.reason)?;
    outln!(out, "e_pnorm: {}", fmt_opt(result.e_pnorm))?;
    outln!(out, "e_2norm: {}", fmt_opt(result.e_2norm))?;
    outln!(out, "grad_norm: {}", fmt_opt(result.grad_norm))?;
    outln!(out, "blocks_fetched: {}", result.blocks_fetched)?;
    Ok(if result.converged() {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    })
}

fn cmd_bound(store: &Path, partition: Option<&Path>, out: &mut dyn Write) -> std::result::Result<i32, CmdError> {
    outln!(
        out,
        "config: command=bound store={} partition={}",
        store.display(),
        partition.map_or("store".to_string(), |p| p.display().to_string())
    )?;
    let store = Arc::new(BlockStore::open(store)?);
    let part = match partition {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let part = Partition::from_text(&text)
                .map_err(|e| usage(format!("malformed partition file: {e}")))?;
            if part.n() != store.n() {
                return Err(usage(format!(
                    "partition covers {} rows but the store has {}",
                    part.n(),
                    store.n()
                )));
            }
            part
        }
        None => store.partition().clone(),
    };
    let prob = UqpProblem::from_store(store, 0.0)?;
    let r = rate_bound(&prob, &part)?;
    outln!(out, "m: {}", r.m)?;
    outln!(out, "lambda_min_pb: {:.16e}", r.lambda_min_pb)?;
    outln!(out, "bound_exact: {:.16e}", r.bound_exact)?;
    outln!(out, "bound_simple: {:.16e}", r.bound_simple)?;
    outln!(out, "dominance_gap: {:.16e}", r.dominance_gap)?;
    outln!(out, "iterations_for_1e-3: {}", r.iterations_for(1e-3))?;
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    experiment: u32,
    dir: &Path,
    seeds: u64,
    full_scale: bool,
    n: Option<usize>,
    block: Option<usize>,
    runs: Option<usize>,
    budget: Option<usize>,
    methods: &[String],
    out: &mut dyn Write,
) -> std::result::Result<i32, CmdError> {
    if !(1..=3).contains(&experiment) {
        return Err(usage(format!("unknown experiment {experiment}; expected 1, 2 or 3")));
    }
    if seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    if let Some(bad) = methods.iter().find(|m| !bench::EXP1_LABELS.contains(&m.as_str())) {
        return Err(usage(format!(
            "unknown method {bad:?}; expected one of {}",
            bench::EXP1_LABELS.join(", ")
        )));
    }
    if !methods.is_empty() && experiment != 1 {
        return Err(usage("--methods applies to experiment 1 only"));
    }
    if let Some(n) = n {
        if n > DIRECT_SOLVE_CAP && !full_scale {
            return Err(usage(format!(
                "n = {n} exceeds {DIRECT_SOLVE_CAP}; pass --full-scale"
            )));
        }
        if n > DIRECT_SOLVE_CAP && experiment != 1 {
            return Err(CmdError::Capability(format!(
                "experiment {experiment} needs a direct solve and is limited to n <= {DIRECT_SOLVE_CAP}"
            )));
        }
    }
    let seed_list: Vec<u64> = (0..seeds).collect();
    outln!(
        out,
        "config: command=bench experiment={experiment} out={} seeds={seeds} full_scale={full_scale} n={} block={} runs={} budget={} methods={}",
        dir.display(),
        n.map_or("default".to_string(), |v| v.to_string()),
        block.map_or("default".to_string(), |v| v.to_string()),
        runs.map_or("default".to_string(), |v| v.to_string()),
        budget.map_or("default".to_string(), |v| v.to_string()),
        if methods.is_empty() { "all".to_string() } else { methods.join(",") },
    )?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let summary = match experiment {
        1 => {
            let mut c = Experiment1Config {
                seeds: seed_list,
                ..Default::default()
            };
            if let Some(n) = n {
                c.n = n;
            }
            if let Some(b) = block {
                c.block = b;
            }
            if let Some(r) = runs {
                c.randomized_runs = r;
            }
            if !methods.is_empty() {
                c.methods = methods.to_vec();
            }
            if let Some(b) = budget {
                c.max_block_iters = b;
                c.max_full_iters = b;
            }
            let work = dir.join("work");
            let report = bench::experiment1(&c, &work, Some(dir))?;
            let _ = fs::remove_dir(&work);
            report.summary()
        }
        2 => {
            let mut c = Experiment2Config {
                seeds: seed_list,
                ..Default::default()
            };
            if let Some(n) = n {
                c.n = n;
            }
            if let Some(r) = runs {
                c.randomized_runs = r;
            }
            if let Some(b) = budget {
                c.budget = b;
            }
            bench::experiment2(&c, Some(dir))?.summary()
        }
        _ => {
            let mut c = Experiment3Config {
                seeds: seed_list,
                ..Default::default()
            };
            if let Some(n) = n {
                c.n = n;
            }
            if let Some(b) = block {
                c.block = b;
            }
            if let Some(b) = budget {
                c.max_iters = b;
            }
            bench::experiment3(&c, Some(dir))?.summary()
        }
    };
    out.write_all(summary.as_bytes())
        .map_err(io_err(Path::new("<stdout>")))?;
    Ok(EXIT_OK)
}

/// Reads a heavy-row index file written by `gen`.
pub fn load_heavy(dir: &Path) -> Result<Vec<usize>> {
    read_indices(&dir.join(HEAVY_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_resolution() {
        assert_eq!(resolve_method(MethodArg::Gbcd, None, None), Ok(Method::Gbcd));
        assert!(resolve_method(MethodArg::Gbcd, Some(StrategyArg::Greedy), None).is_err());
        assert!(resolve_method(MethodArg::Bcd, Some(StrategyArg::Greedy), None).is_err());
        assert!(resolve_method(MethodArg::Bk, Some(StrategyArg::RandEig), None).is_err());
        assert_eq!(
            resolve_method(MethodArg::Bk, Some(StrategyArg::Greedy), None),
            Ok(Method::Bk(BkStrategy::Greedy))
        );
        assert!(resolve_method(MethodArg::GbcdBs, None, None).is_err());
        assert_eq!(
            resolve_method(MethodArg::GbcdBs, None, Some(3)),
            Ok(Method::GbcdBs { r: 3 })
        );
    }

    #[test]
    fn oracle_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(ORACLE_FILE);
        let o = Oracle {
            x_opt: vec![1.0, -2.5, 3.25],
            f_opt: -7.0,
        };
        write_oracle(&path, &o).unwrap();
        assert_eq!(read_oracle(&path).unwrap(), o);
        let mut bytes = fs::read(&path).unwrap();
        bytes[20] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_oracle(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn missing_out_is_usage_error() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = main_with_args(["gbcd", "gen", "--kind", "random-spd", "--n", "4"], &mut o, &mut e);
        assert_eq!(code, EXIT_USAGE);
    }
}
