//! Iterative UQP solvers behind one stepper: greedy block coordinate descent
//! and its baselines.

use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blockstore::{BlockInverses, BlockSource};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, LowerTriangular};
use crate::partition::{hdc_admissible, HdcLimits, HdcMethod};
use crate::problem::Oracle;
use crate::trace::{TraceRecord, TraceSink};

/// Largest `n` for which greedy block Kaczmarz is allowed.
pub const GREEDY_BK_CAP: usize = 4096;

/// Slack used when asserting the two DLDR P-norm routes agree.
pub const DLDR_ROUTE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcdStrategy {
    RoundRobin,
    /// Blocks drawn with probability proportional to `λ_max(P_ππ)`.
    RandEigWeighted,
    /// Singleton blocks drawn with probability proportional to `P_ii`.
    RandDiagSingleRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BkStrategy {
    RoundRobin,
    /// Blocks drawn with probability proportional to `‖P_π‖_F²`.
    RandRowNormSq,
    /// Block with the largest residual quadratic form; `O(n²)` per step.
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Gbcd,
    Bcd(BcdStrategy),
    Bk(BkStrategy),
    /// Greedy update of the `r` best single coordinates at once.
    GbcdBs { r: usize },
    SteepestDescent,
    ConjugateGradient,
}

impl Method {
    pub fn maintains_gradient(&self) -> bool {
        !matches!(self, Method::Bk(_))
    }

    pub fn needs_inverses(&self) -> bool {
        matches!(self, Method::Gbcd | Method::Bcd(_))
    }

    /// Whether each step costs `O(n²)` work.
    pub fn is_quadratic(&self) -> bool {
        matches!(
            self,
            Method::Bk(BkStrategy::Greedy) | Method::SteepestDescent | Method::ConjugateGradient
        )
    }

    pub fn hdc_method(&self) -> Option<HdcMethod> {
        match self {
            Method::Gbcd => Some(HdcMethod::GreedyBlockCoordinateDescent),
            Method::Bcd(_) | Method::GbcdBs { .. } => Some(HdcMethod::BlockCoordinateDescent),
            Method::Bk(BkStrategy::Greedy) => None,
            Method::Bk(_) => Some(HdcMethod::BlockKaczmarz),
            Method::SteepestDescent | Method::ConjugateGradient => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub method: Method,
    pub seed: u64,
    /// Starting point; the origin when `None`.
    pub x0: Option<Vec<f64>>,
    /// Threads used to score blocks; `1` scores serially.
    pub workers: usize,
}

impl SolverConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            seed: 0,
            x0: None,
            workers: 1,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn x0(mut self, x0: Vec<f64>) -> Self {
        self.x0 = Some(x0);
        self
    }

    pub fn workers(mut self, workers: usize) -> Self {
        self.workers = workers;
        self
    }
}

#[derive(Debug, Clone)]
struct CgState {
    direction: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub x: Vec<f64>,
    /// `∇f(x)`, kept current by recursion for every method except BK.
    pub grad: Option<Vec<f64>>,
    pub k: usize,
    rng: ChaCha8Rng,
    cursor: usize,
    cg: Option<CgState>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockScore {
    pub block: usize,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub block: Option<usize>,
    pub beta: Option<f64>,
    /// Realized decrease of `‖x − x_opt‖_P²`; filled in by [`run`] when an
    /// oracle is supplied.
    pub delta_pnormsq: Option<f64>,
    pub blocks_fetched: u64,
    pub rows_touched: u64,
    /// `false` when rows were gathered from scattered positions.
    pub contiguous: bool,
}

/// `∇_π f`, the `π` entries of a current gradient.
pub fn partial_grad(grad: &[f64], pi: &[usize]) -> Result<Vec<f64>> {
    pi.iter()
        .map(|&i| {
            grad.get(i).copied().ok_or(Error::IndexOutOfRange {
                index: i,
                len: grad.len(),
            })
        })
        .collect()
}

fn block_score(grad: &[f64], block: &[usize], inv: &DenseMatrix) -> f64 {
    let g: Vec<f64> = block.iter().map(|&i| grad[i]).collect();
    let beta: f64 = (0..g.len())
        .map(|a| g[a] * linalg::dot(inv.row(a), &g))
        .sum();
    beta.max(0.0)
}

/// `β_i = ∇_{π_i}fᵗ P_{π_iπ_i}⁻¹ ∇_{π_i}f` for every block.
pub fn score_blocks(grad: &[f64], source: &dyn BlockSource, inverses: &BlockInverses) -> Vec<BlockScore> {
    source
        .partition()
        .blocks()
        .iter()
        .enumerate()
        .map(|(i, block)| BlockScore {
            block: i,
            beta: block_score(grad, block, inverses.get(i)),
        })
        .collect()
}

/// [`score_blocks`] with the blocks split over `n_workers` threads. Each
/// score is computed exactly as in the serial version.
pub fn parallel_score_blocks(
    grad: &[f64],
    source: &dyn BlockSource,
    inverses: &BlockInverses,
    n_workers: usize,
) -> Vec<BlockScore> {
    let blocks = source.partition().blocks();
    let m = blocks.len();
    let workers = n_workers.clamp(1, m.max(1));
    if workers == 1 {
        return score_blocks(grad, source, inverses);
    }
    let chunk = m.div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..m)
            .step_by(chunk)
            .map(|start| {
                s.spawn(move || {
                    (start..(start + chunk).min(m))
                        .map(|i| BlockScore {
                            block: i,
                            beta: block_score(grad, &blocks[i], inverses.get(i)),
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("scoring worker panicked"))
            .collect()
    })
}

/// Highest score, ties going to the lowest block index.
fn argmax(scores: &[BlockScore]) -> BlockScore {
    let mut best = scores[0];
    for s in &scores[1..] {
        if s.beta > best.beta {
            best = *s;
        }
    }
    best
}

/// `P·x` streamed block by block; returns the product and the fetch count.
pub fn stream_matvec(source: &dyn BlockSource, x: &[f64]) -> Result<(Vec<f64>, u64)> {
    let n = source.n();
    if x.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x.len(),
        });
    }
    let mut out = vec![0.0; n];
    let m = source.partition().len();
    for b in 0..m {
        let block = source.fetch_block(b)?;
        for (a, &i) in block.indices().iter().enumerate() {
            out[i] = linalg::dot(block.rows().row(a), x);
        }
    }
    Ok((out, m as u64))
}

/// Applies `x_σ += α`, `g += P_σᵗα` with `α = solve(q_σ − P_σx)`.
/// Returns `(q_σ − P_σx)ᵗα`.
fn coordinate_update(
    x: &mut [f64],
    grad: Option<&mut Vec<f64>>,
    indices: &[usize],
    rows: &DenseMatrix,
    q_sub: &[f64],
    solve: impl FnOnce(&[f64]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let resid: Vec<f64> = (0..indices.len())
        .map(|a| q_sub[a] - linalg::dot(rows.row(a), x))
        .collect();
    let alpha = solve(&resid)?;
    for (a, &i) in indices.iter().enumerate() {
        x[i] += alpha[a];
    }
    if let Some(g) = grad {
        for a in 0..indices.len() {
            linalg::axpy(alpha[a], rows.row(a), g);
        }
    }
    Ok(linalg::dot(&resid, &alpha))
}

fn row_gram(rows: &DenseMatrix) -> DenseMatrix {
    let d = rows.rows();
    let mut g = DenseMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v = linalg::dot(rows.row(a), rows.row(b));
            g.set(a, b, v);
            g.set(b, a, v);
        }
    }
    g
}

pub struct Solver<'a> {
    source: &'a dyn BlockSource,
    q: &'a [f64],
    inverses: Option<&'a BlockInverses>,
    method: Method,
    workers: usize,
    state: SolverState,
    sampler: Option<WeightedIndex<f64>>,
    bk_grams: Vec<Option<LowerTriangular>>,
    diagonal: Option<Vec<f64>>,
}

impl<'a> Solver<'a> {
    pub fn new(
        source: &'a dyn BlockSource,
        q: &'a [f64],
        inverses: Option<&'a BlockInverses>,
        config: SolverConfig,
    ) -> Result<Self> {
        let part = source.partition();
        let (n, m) = (part.n(), part.len());
        if q.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: q.len(),
            });
        }
        let method = config.method;
        let inverses = if method.needs_inverses() {
            let inv = inverses.ok_or_else(|| {
                Error::InvalidStrategyConfig("block inverses are required".into())
            })?;
            if inv.len() != m {
                return Err(Error::InvalidStrategyConfig(format!(
                    "{} inverses for {m} blocks",
                    inv.len()
                )));
            }
            Some(inv)
        } else {
            inverses
        };

        let x = match config.x0 {
            Some(x0) if x0.len() != n => {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: x0.len(),
                })
            }
            Some(x0) => x0,
            None => vec![0.0; n],
        };
        let grad = if method.maintains_gradient() {
            if x.iter().all(|&v| v == 0.0) {
                Some(q.iter().map(|v| -v).collect())
            } else {
                let (px, _) = stream_matvec(source, &x)?;
                Some(linalg::sub(&px, q))
            }
        } else {
            None
        };

        let weights: Option<Vec<f64>> = match method {
            Method::Bcd(BcdStrategy::RandEigWeighted) => {
                let inv = inverses.expect("checked above");
                Some(
                    inv.iter()
                        .map(|m| linalg::sym_eigvals(m).map(|ev| 1.0 / ev[0]))
                        .collect::<Result<_>>()?,
                )
            }
            Method::Bcd(BcdStrategy::RandDiagSingleRow) => {
                if part.max_block_size() != 1 {
                    return Err(Error::InvalidStrategyConfig(
                        "diagonal sampling needs a singleton partition".into(),
                    ));
                }
                let inv = inverses.expect("checked above");
                Some(inv.iter().map(|m| 1.0 / m.get(0, 0)).collect())
            }
            Method::Bk(BkStrategy::RandRowNormSq) => {
                let mut w = Vec::with_capacity(m);
                for b in 0..m {
                    let block = source.fetch_block(b)?;
                    w.push(block.rows().data().iter().map(|v| v * v).sum());
                }
                Some(w)
            }
            _ => None,
        };
        let sampler = weights
            .map(|w| {
                WeightedIndex::new(&w)
                    .map_err(|e| Error::InvalidStrategyConfig(format!("sampling weights: {e}")))
            })
            .transpose()?;

        if method == Method::Bk(BkStrategy::Greedy) && n > GREEDY_BK_CAP {
            return Err(Error::InvalidStrategyConfig(format!(
                "greedy block Kaczmarz is limited to n <= {GREEDY_BK_CAP}"
            )));
        }
        let diagonal = if let Method::GbcdBs { r } = method {
            let cap = (n as f64).powf(2.0 / 3.0);
            if r == 0 || r as f64 >= cap {
                return Err(Error::InvalidShape(format!(
                    "row count {r} must be in 1..{cap:.3} for n = {n}"
                )));
            }
            let mut diag = vec![0.0; n];
            for b in 0..m {
                let block = source.fetch_block(b)?;
                for (a, &i) in block.indices().iter().enumerate() {
                    diag[i] = block.rows().get(a, i);
                }
            }
            Some(diag)
        } else {
            None
        };
        let cg = (method == Method::ConjugateGradient).then(|| CgState {
            direction: grad.as_ref().expect("CG keeps a gradient").iter().map(|v| -v).collect(),
        });

        Ok(Self {
            source,
            q,
            inverses,
            method,
            workers: config.workers.max(1),
            state: SolverState {
                x,
                grad,
                k: 0,
                rng: ChaCha8Rng::seed_from_u64(config.seed),
                cursor: 0,
                cg,
            },
            sampler,
            bk_grams: vec![None; m],
            diagonal,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn state(&self) -> &SolverState {
        &self.state
    }

    pub fn x(&self) -> &[f64] {
        &self.state.x
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.state.grad.as_deref()
    }

    pub fn source(&self) -> &dyn BlockSource {
        self.source
    }

    /// Whether the partition satisfies the method's size cap for `limits`.
    pub fn hdc_admissible(&self, limits: HdcLimits) -> bool {
        self.method
            .hdc_method()
            .is_some_and(|m| hdc_admissible(self.source.partition(), limits, m))
    }

    /// Current block scores; requires a gradient-maintaining block method.
    pub fn scores(&self) -> Result<Vec<BlockScore>> {
        let (grad, inv) = self.grad_and_inverses()?;
        Ok(if self.workers > 1 {
            parallel_score_blocks(grad, self.source, inv, self.workers)
        } else {
            score_blocks(grad, self.source, inv)
        })
    }

    fn grad_and_inverses(&self) -> Result<(&[f64], &BlockInverses)> {
        match (self.state.grad.as_deref(), self.inverses) {
            (Some(g), Some(inv)) => Ok((g, inv)),
            _ => Err(Error::InvalidStrategyConfig(
                "scoring needs a maintained gradient and block inverses".into(),
            )),
        }
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let report = match self.method {
            Method::Gbcd => self.gbcd_step(),
            Method::Bcd(s) => self.bcd_step(s),
            Method::Bk(s) => self.bk_step(s),
            Method::GbcdBs { r } => self.gbcd_bs_step(r),
            Method::SteepestDescent => self.steepest_descent_step(),
            Method::ConjugateGradient => self.conjugate_gradient_step(),
        }?;
        self.state.k += 1;
        Ok(report)
    }

    fn block_update(&mut self, i: usize) -> Result<(f64, u64)> {
        let inv = self.inverses.expect("block methods carry inverses").get(i);
        let block = self.source.fetch_block(i)?;
        let beta = coordinate_update(
            &mut self.state.x,
            self.state.grad.as_mut(),
            block.indices(),
            block.rows(),
            block.q(),
            |r| inv.matvec(r),
        )?;
        Ok((beta, block.indices().len() as u64))
    }

    fn gbcd_step(&mut self) -> Result<StepReport> {
        let best = argmax(&self.scores()?);
        let (_, rows) = self.block_update(best.block)?;
        Ok(StepReport {
            block: Some(best.block),
            beta: Some(best.beta),
            delta_pnormsq: None,
            blocks_fetched: 1,
            rows_touched: rows,
            contiguous: true,
        })
    }

    fn next_cursor(&mut self) -> usize {
        let i = self.state.cursor;
        self.state.cursor = (i + 1) % self.source.partition().len();
        i
    }

    fn sample(&mut self) -> usize {
        self.sampler
            .as_ref()
            .expect("sampler configured for randomized strategies")
            .sample(&mut self.state.rng)
    }

    fn bcd_step(&mut self, strategy: BcdStrategy) -> Result<StepReport> {
        let i = match strategy {
            BcdStrategy::RoundRobin => self.next_cursor(),
            BcdStrategy::RandEigWeighted | BcdStrategy::RandDiagSingleRow => self.sample(),
        };
        let (beta, rows) = self.block_update(i)?;
        Ok(StepReport {
            block: Some(i),
            beta: Some(beta),
            delta_pnormsq: None,
            blocks_fetched: 1,
            rows_touched: rows,
            contiguous: true,
        })
    }

    fn bk_factor(&mut self, i: usize, rows: &DenseMatrix) -> Result<&LowerTriangular> {
        if self.bk_grams[i].is_none() {
            let l = linalg::cholesky(&row_gram(rows))
                .map_err(|_| Error::SingularBlockGram { block: i })?;
            self.bk_grams[i] = Some(l);
        }
        Ok(self.bk_grams[i].as_ref().expect("just filled"))
    }

    /// `y = (P_πP_πᵗ)⁻¹(q_π − P_πx)` and the residual quadratic form `rᵗy`.
    fn bk_direction(&mut self, i: usize, rows: &DenseMatrix, q_sub: &[f64]) -> Result<(Vec<f64>, f64)> {
        let resid: Vec<f64> = (0..rows.rows())
            .map(|a| q_sub[a] - linalg::dot(rows.row(a), &self.state.x))
            .collect();
        let y = self.bk_factor(i, rows)?.solve(&resid)?;
        let form = linalg::dot(&resid, &y).max(0.0);
        Ok((y, form))
    }

    fn bk_step(&mut self, strategy: BkStrategy) -> Result<StepReport> {
        let m = self.source.partition().len();
        let (block, y, form, fetched, rows_touched) = match strategy {
            BkStrategy::Greedy => {
                let mut best: Option<(crate::blockstore::FetchedBlock, Vec<f64>, f64)> = None;
                for b in 0..m {
                    let fetched = self.source.fetch_block(b)?;
                    let (y, form) = self.bk_direction(b, fetched.rows(), fetched.q())?;
                    if best.as_ref().is_none_or(|(_, _, f)| form > *f) {
                        best = Some((fetched, y, form));
                    }
                }
                let (block, y, form) = best.expect("at least one block");
                (block, y, form, m as u64, self.source.n() as u64)
            }
            BkStrategy::RoundRobin | BkStrategy::RandRowNormSq => {
                let i = if strategy == BkStrategy::RoundRobin {
                    self.next_cursor()
                } else {
                    self.sample()
                };
                let block = self.source.fetch_block(i)?;
                let (y, form) = self.bk_direction(i, block.rows(), block.q())?;
                let d = block.indices().len() as u64;
                (block, y, form, 1, d)
            }
        };
        for (a, &ya) in y.iter().enumerate() {
            linalg::axpy(ya, block.rows().row(a), &mut self.state.x);
        }
        Ok(StepReport {
            block: Some(block.index()),
            beta: Some(form),
            delta_pnormsq: None,
            blocks_fetched: fetched,
            rows_touched,
            contiguous: true,
        })
    }

    /// Indices of the `r` largest `(∇_i f)²/P_ii`, ties to the lower index,
    /// returned in ascending order.
    pub fn best_rows(&self, r: usize) -> Result<Vec<usize>> {
        let grad = self
            .state
            .grad
            .as_deref()
            .ok_or_else(|| Error::InvalidStrategyConfig("needs a maintained gradient".into()))?;
        let diag = match &self.diagonal {
            Some(d) => d.clone(),
            None => {
                let mut d = vec![0.0; grad.len()];
                for b in 0..self.source.partition().len() {
                    let block = self.source.fetch_block(b)?;
                    for (a, &i) in block.indices().iter().enumerate() {
                        d[i] = block.rows().get(a, i);
                    }
                }
                d
            }
        };
        let mut order: Vec<(f64, usize)> = grad
            .iter()
            .zip(&diag)
            .enumerate()
            .map(|(i, (g, p))| (g * g / p, i))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut sigma: Vec<usize> = order.iter().take(r).map(|&(_, i)| i).collect();
        sigma.sort_unstable();
        Ok(sigma)
    }

    fn gbcd_bs_step(&mut self, r: usize) -> Result<StepReport> {
        let sigma = self.best_rows(r)?;
        let gathered = self.source.gather_rows(&sigma)?;
        let p_ss = gathered
            .rows
            .submatrix(&(0..sigma.len()).collect::<Vec<_>>(), &sigma);
        let chol = linalg::cholesky(&p_ss)?;
        let q_sub: Vec<f64> = sigma.iter().map(|&i| self.q[i]).collect();
        let beta = coordinate_update(
            &mut self.state.x,
            self.state.grad.as_mut(),
            &sigma,
            &gathered.rows,
            &q_sub,
            |res| chol.solve(res),
        )?;
        Ok(StepReport {
            block: None,
            beta: Some(beta),
            delta_pnormsq: None,
            blocks_fetched: 0,
            rows_touched: sigma.len() as u64,
            contiguous: false,
        })
    }

    fn full_pass_report(&self, fetched: u64) -> StepReport {
        StepReport {
            block: None,
            beta: None,
            delta_pnormsq: None,
            blocks_fetched: fetched,
            rows_touched: self.source.n() as u64,
            contiguous: true,
        }
    }

    /// Exact line search along `−∇f`.
    fn steepest_descent_step(&mut self) -> Result<StepReport> {
        let g = self.state.grad.clone().expect("SD keeps a gradient");
        let (pg, fetched) = stream_matvec(self.source, &g)?;
        let gg = linalg::dot(&g, &g);
        let gpg = linalg::dot(&g, &pg);
        if gpg > 0.0 {
            let alpha = gg / gpg;
            linalg::axpy(-alpha, &g, &mut self.state.x);
            let grad = self.state.grad.as_mut().expect("SD keeps a gradient");
            linalg::axpy(-alpha, &pg, grad);
        }
        Ok(self.full_pass_report(fetched))
    }

    fn conjugate_gradient_step(&mut self) -> Result<StepReport> {
        let d = self.state.cg.as_ref().expect("CG state").direction.clone();
        let (pd, fetched) = stream_matvec(self.source, &d)?;
        let dpd = linalg::dot(&d, &pd);
        if dpd > 0.0 {
            let grad = self.state.grad.as_mut().expect("CG keeps a gradient");
            let gg_old = linalg::dot(grad, grad);
            let alpha = gg_old / dpd;
            linalg::axpy(alpha, &d, &mut self.state.x);
            linalg::axpy(alpha, &pd, grad);
            let gg_new = linalg::dot(grad, grad);
            let beta = gg_new / gg_old;
            let direction: Vec<f64> = grad
                .iter()
                .zip(&d)
                .map(|(g, dv)| -g + beta * dv)
                .collect();
            self.state.cg = Some(CgState { direction });
        }
        Ok(self.full_pass_report(fetched))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DldrObjective {
    /// Minimize `‖x − x_opt‖_2` over the slice.
    TwoNorm,
    /// Minimize `‖x − x_opt‖_P` over the slice.
    PNorm,
}

/// Minimizer of the chosen norm of `x − x_opt` over `x + range(m_k)`.
///
/// For `PNorm` the oracle-backed form and the oracle-free form
/// `M(MᵗPM)⁻¹(Mᵗq − MᵗPx)` are both evaluated and must agree.
pub fn dldr_step(
    x: &[f64],
    p: &DenseMatrix,
    q: &[f64],
    m_k: &DenseMatrix,
    objective: DldrObjective,
    oracle: &Oracle,
) -> Result<Vec<f64>> {
    let n = x.len();
    for len in [p.rows(), q.len(), m_k.rows(), oracle.x_opt.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    let err = linalg::sub(&oracle.x_opt, x);
    let mt = m_k.transpose();
    let step = |gram: &DenseMatrix, rhs: &[f64]| -> Result<Vec<f64>> {
        let chol = linalg::cholesky(gram).map_err(|_| Error::RankDeficient)?;
        let y = chol.solve(rhs)?;
        let mut out = x.to_vec();
        linalg::axpy(1.0, &m_k.matvec(&y)?, &mut out);
        Ok(out)
    };
    match objective {
        DldrObjective::TwoNorm => {
            let gram = mt.matmul(m_k)?;
            step(&gram, &mt.matvec(&err)?)
        }
        DldrObjective::PNorm => {
            let pm = p.matmul(m_k)?;
            let pmt = pm.transpose();
            let gram = mt.matmul(&pm)?;
            let with_oracle = step(&gram, &pmt.matvec(&err)?)?;
            let mtq = mt.matvec(q)?;
            let mtpx = pmt.matvec(x)?;
            let oracle_free = step(&gram, &linalg::sub(&mtq, &mtpx))?;
            let gap = with_oracle
                .iter()
                .zip(&oracle_free)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let scale = linalg::norm_inf(&with_oracle).max(1.0);
            if gap > DLDR_ROUTE_TOLERANCE * scale {
                return Err(Error::RouteMismatch(gap));
            }
            Ok(oracle_free)
        }
    }
}

/// When to stop [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct StopRule {
    pub max_iters: usize,
    /// Stop once `‖∇f‖_2 ≤ grad_tol·‖q‖_2`.
    pub grad_tol: Option<f64>,
    /// Stop once `E_k < eps`; needs an oracle.
    pub eps: Option<f64>,
    /// For methods without a maintained gradient, check the residual by a
    /// streamed pass every this many iterations (default `m`).
    pub residual_check_every: Option<usize>,
}

impl StopRule {
    pub fn iterations(max_iters: usize) -> Self {
        Self {
            max_iters,
            grad_tol: None,
            eps: None,
            residual_check_every: None,
        }
    }

    pub fn eps(mut self, eps: f64) -> Self {
        self.eps = Some(eps);
        self
    }

    pub fn grad_tol(mut self, tol: f64) -> Self {
        self.grad_tol = Some(tol);
        self
    }
}

/// Oracle access for error metrics. `p` is needed only for methods that do
/// not maintain a gradient.
#[derive(Debug, Clone, Copy)]
pub struct OracleMetrics<'a> {
    pub oracle: &'a Oracle,
    pub p: Option<&'a DenseMatrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Eps,
    GradTol,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub reason: StopReason,
    pub e_pnorm: Option<f64>,
    pub e_2norm: Option<f64>,
    pub grad_norm: Option<f64>,
    pub blocks_fetched: u64,
}

impl SolveResult {
    pub fn converged(&self) -> bool {
        self.reason != StopReason::MaxIters
    }
}

struct Metrics {
    pnormsq: Option<f64>,
    twonorm: f64,
}

fn measure(solver: &Solver<'_>, om: &OracleMetrics<'_>) -> Result<Metrics> {
    let err = linalg::sub(solver.x(), &om.oracle.x_opt);
    let pnormsq = match (solver.grad(), om.p) {
        (Some(g), _) => Some(linalg::dot(&err, g).max(0.0)),
        (None, Some(p)) => Some(linalg::p_norm_sq(&err, p)?),
        (None, None) => None,
    };
    Ok(Metrics {
        pnormsq,
        twonorm: linalg::norm2(&err),
    })
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Steps `solver` until `stop` fires, emitting one trace record for `k = 0`
/// and one per iteration.
pub fn run(
    solver: &mut Solver<'_>,
    stop: &StopRule,
    oracle: Option<OracleMetrics<'_>>,
    sink: &mut dyn TraceSink,
) -> Result<SolveResult> {
    let start = Instant::now();
    let counters = std::sync::Arc::clone(solver.source().counters());
    let fetches_before = counters.fetches();
    let q_norm = linalg::norm2(solver.q);
    let m = solver.source().partition().len();
    let check_every = stop.residual_check_every.unwrap_or(m).max(1);

    let initial = oracle.as_ref().map(|om| measure(solver, om)).transpose()?;
    let e_of = |now: &Metrics| -> (Option<f64>, Option<f64>, Option<f64>) {
        let init = initial.as_ref().expect("oracle present");
        let e_p = match (now.pnormsq, init.pnormsq) {
            (Some(a), Some(b)) => Some(ratio(a.sqrt(), b.sqrt())),
            _ => None,
        };
        (e_p, Some(ratio(now.twonorm, init.twonorm)), now.pnormsq.map(|v| 0.5 * v))
    };

    let (mut e_p, mut e_2, f_gap) = match &initial {
        Some(init) => e_of(init),
        None => (None, None, None),
    };
    sink.record(TraceRecord {
        k: 0,
        wall_nanos: start.elapsed().as_nanos() as u64,
        e_pnorm: e_p,
        e_2norm: e_2,
        f_gap,
        block: None,
        beta: None,
        blocks_fetched: 0,
        rows_touched: 0,
    });
    let mut last_pnormsq = initial.as_ref().and_then(|i| i.pnormsq);

    let grad_norm = |s: &Solver<'_>| s.grad().map(linalg::norm2);
    let grad_done = |gn: Option<f64>| match (stop.grad_tol, gn) {
        (Some(tol), Some(gn)) => gn <= tol * q_norm,
        _ => false,
    };
    let eps_done = |e: Option<f64>| matches!((stop.eps, e), (Some(eps), Some(e)) if e < eps);

    let mut reason = StopReason::MaxIters;
    if eps_done(e_p) {
        reason = StopReason::Eps;
    } else if grad_done(grad_norm(solver)) {
        reason = StopReason::GradTol;
    }
    let mut k = 0;
    while reason == StopReason::MaxIters && k < stop.max_iters {
        let mut report = solver.step()?;
        k += 1;
        if solver.x().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { k });
        }
        let mut f_gap = None;
        if let Some(om) = &oracle {
            let now = measure(solver, om)?;
            if let (Some(before), Some(after)) = (last_pnormsq, now.pnormsq) {
                report.delta_pnormsq = Some(before - after);
            }
            last_pnormsq = now.pnormsq;
            (e_p, e_2, f_gap) = e_of(&now);
        }
        sink.record(TraceRecord {
            k,
            wall_nanos: start.elapsed().as_nanos() as u64,
            e_pnorm: e_p,
            e_2norm: e_2,
            f_gap,
            block: report.block,
            beta: report.beta,
            blocks_fetched: report.blocks_fetched,
            rows_touched: report.rows_touched,
        });
        if eps_done(e_p) {
            reason = StopReason::Eps;
        } else if solver.grad().is_some() {
            if grad_done(grad_norm(solver)) {
                reason = StopReason::GradTol;
            }
        } else if let Some(tol) = stop.grad_tol {
            if k % check_every == 0 {
                let (px, _) = stream_matvec(solver.source(), solver.x())?;
                if linalg::norm2(&linalg::sub(&px, solver.q)) <= tol * q_norm {
                    reason = StopReason::GradTol;
                }
            }
        }
    }

    Ok(SolveResult {
        x: solver.x().to_vec(),
        iterations: k,
        reason,
        e_pnorm: e_p,
        e_2norm: e_2,
        grad_norm: grad_norm(solver),
        blocks_fetched: counters.fetches() - fetches_before,
    })
}
