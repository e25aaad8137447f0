//! The quadratic program `f(x) = ½xᵗPx − xᵗq + r`, its direct-solve oracle,
//! and seeded instance generators.

use std::borrow::Cow;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blockstore::{BlockSource, BlockStore, InMemoryBlocks, StoreWriter};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, SpdMatrix};
use crate::partition::{contiguous_partition, Partition};

/// Largest `n` accepted by [`solve_direct`] and by dense assembly of a stored `P`.
pub const DIRECT_SOLVE_CAP: usize = 4096;

/// Ridge `ε` added as `n·ε·I` by [`gen_random_spd`].
pub const RANDOM_SPD_RIDGE: f64 = 1e-9;

const X_OPT_STREAM: u64 = u64::MAX;
const HEAVY_SET_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone)]
pub enum MatrixSource {
    Dense(Arc<SpdMatrix>),
    Store(Arc<BlockStore>),
}

#[derive(Debug, Clone)]
pub struct UqpProblem {
    p: MatrixSource,
    q: Vec<f64>,
    r: f64,
}

/// Direct solution `(x_opt, f_opt)`, used only to measure true error.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub x_opt: Vec<f64>,
    pub f_opt: f64,
}

impl Oracle {
    /// Oracle from a known minimizer, with `f_opt = r − ½ qᵗx_opt`.
    pub fn from_minimizer(prob: &UqpProblem, x_opt: Vec<f64>) -> Self {
        let f_opt = prob.r - 0.5 * linalg::dot(&prob.q, &x_opt);
        Self { x_opt, f_opt }
    }
}

impl UqpProblem {
    /// Validates `p` as SPD (symmetry plus Cholesky) before accepting it.
    pub fn new(p: DenseMatrix, q: Vec<f64>, r: f64) -> Result<Self> {
        let p = SpdMatrix::new(p)?;
        Self::from_spd(p, q, r)
    }

    pub fn from_spd(p: SpdMatrix, q: Vec<f64>, r: f64) -> Result<Self> {
        if p.dim() != q.len() {
            return Err(Error::DimensionMismatch {
                expected: p.dim(),
                got: q.len(),
            });
        }
        if q.iter().any(|v| !v.is_finite()) || !r.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self {
            p: MatrixSource::Dense(Arc::new(p)),
            q,
            r,
        })
    }

    /// Store-backed problem; `q` is read from the block files.
    pub fn from_store(store: Arc<BlockStore>, r: f64) -> Result<Self> {
        let q = store.read_q()?;
        Ok(Self {
            p: MatrixSource::Store(store),
            q,
            r,
        })
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn source(&self) -> &MatrixSource {
        &self.p
    }

    pub fn dense(&self) -> Option<&Arc<SpdMatrix>> {
        match &self.p {
            MatrixSource::Dense(p) => Some(p),
            MatrixSource::Store(_) => None,
        }
    }

    /// `P` as a dense matrix, assembling it from the store when needed.
    pub fn dense_p(&self, cap: usize) -> Result<Cow<'_, DenseMatrix>> {
        match &self.p {
            MatrixSource::Dense(p) => Ok(Cow::Borrowed(p)),
            MatrixSource::Store(store) => {
                let n = self.n();
                if n > cap {
                    return Err(Error::TooLargeForDirect { n, cap });
                }
                let mut p = DenseMatrix::zeros(n, n);
                for b in 0..store.partition().len() {
                    let block = store.fetch_block(b)?;
                    for (k, &i) in block.indices().iter().enumerate() {
                        p.row_mut(i).copy_from_slice(block.rows().row(k));
                    }
                }
                Ok(Cow::Owned(p))
            }
        }
    }

    /// `P·x`, streamed block by block for store-backed problems.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x)?;
        match &self.p {
            MatrixSource::Dense(p) => p.matvec(x),
            MatrixSource::Store(store) => {
                let mut out = vec![0.0; self.n()];
                for b in 0..store.partition().len() {
                    let block = store.fetch_block(b)?;
                    for (k, &i) in block.indices().iter().enumerate() {
                        out[i] = linalg::dot(block.rows().row(k), x);
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn eval_f(&self, x: &[f64]) -> Result<f64> {
        let px = self.matvec(x)?;
        Ok(0.5 * linalg::dot(x, &px) - linalg::dot(x, &self.q) + self.r)
    }

    /// `∇f(x) = Px − q`
    pub fn eval_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.matvec(x)?;
        for (gi, qi) in g.iter_mut().zip(&self.q) {
            *gi -= qi;
        }
        Ok(g)
    }

    pub fn diagonal(&self) -> Result<Vec<f64>> {
        match &self.p {
            MatrixSource::Dense(p) => Ok(p.diagonal()),
            MatrixSource::Store(store) => store.diagonal(),
        }
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Cholesky solve of `Px = q` with one step of iterative refinement.
pub fn solve_direct(prob: &UqpProblem) -> Result<Oracle> {
    let n = prob.n();
    if n > DIRECT_SOLVE_CAP {
        return Err(Error::TooLargeForDirect {
            n,
            cap: DIRECT_SOLVE_CAP,
        });
    }
    let p = prob.dense_p(DIRECT_SOLVE_CAP)?;
    let chol = linalg::cholesky(&p)?;
    let mut x = chol.solve(prob.q())?;
    let px = p.matvec(&x)?;
    let resid = linalg::sub(prob.q(), &px);
    let correction = chol.solve(&resid)?;
    linalg::axpy(1.0, &correction, &mut x);
    Ok(Oracle::from_minimizer(prob, x))
}

fn normal_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn standard_normals(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Accumulates rows `rows` of `VᵗV` from the row strip `strip` of `V`, whose
/// rows are consecutive rows of `V` in ascending order. Every entry is summed
/// in ascending row-of-`V` order regardless of how `V` is strip-mined, so
/// dense and streamed generation agree bit for bit.
fn accumulate_gram_rows(strip: &DenseMatrix, rows: &[usize], acc: &mut DenseMatrix) {
    for k in 0..strip.rows() {
        let vk = strip.row(k);
        for (a, &i) in rows.iter().enumerate() {
            let c = vk[i];
            if c != 0.0 {
                linalg::axpy(c, vk, acc.row_mut(a));
            }
        }
    }
}

/// Dense `VᵗV`, computing the upper triangle and mirroring it.
fn gram(v: &DenseMatrix) -> DenseMatrix {
    let n = v.cols();
    let mut p = DenseMatrix::zeros(n, n);
    for k in 0..v.rows() {
        let vk = v.row(k);
        for i in 0..n {
            let c = vk[i];
            if c != 0.0 {
                linalg::axpy(c, &vk[i..], &mut p.row_mut(i)[i..]);
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            let v = p.get(j, i);
            p.set(i, j, v);
        }
    }
    p
}

/// Tile layout of the block-dominant generator: `V` is an `nt x nt` grid of
/// `b x b` tiles; tile `(ti, tj)` draws from ChaCha stream `ti·nt + tj`.
#[derive(Debug, Clone, Copy)]
struct TileLayout {
    n: usize,
    b: usize,
    diag_scale: f64,
    off_scale: f64,
    seed: u64,
}

impl TileLayout {
    fn new(n: usize, b: usize, diag_scale: f64, off_scale: f64, seed: u64) -> Result<Self> {
        if b == 0 || n == 0 || n % b != 0 {
            return Err(Error::InvalidShape(format!(
                "tile size {b} must divide n = {n}"
            )));
        }
        if !(diag_scale > off_scale && off_scale > 0.0) {
            return Err(Error::InvalidShape(format!(
                "need diag_scale > off_scale > 0, got {diag_scale} and {off_scale}"
            )));
        }
        Ok(Self {
            n,
            b,
            diag_scale,
            off_scale,
            seed,
        })
    }

    fn tiles(&self) -> usize {
        self.n / self.b
    }

    /// Rows `ti·b .. (ti+1)·b` of `V`.
    fn strip(&self, ti: usize) -> DenseMatrix {
        let (n, b, nt) = (self.n, self.b, self.tiles());
        let mut strip = DenseMatrix::zeros(b, n);
        for tj in 0..nt {
            let scale = if ti == tj {
                self.diag_scale
            } else {
                self.off_scale
            };
            let mut rng = normal_rng(self.seed, (ti * nt + tj) as u64);
            for r in 0..b {
                let row = &mut strip.row_mut(r)[tj * b..(tj + 1) * b];
                for v in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = scale * z;
                }
            }
        }
        strip
    }

    fn dense_v(&self) -> DenseMatrix {
        let n = self.n;
        let mut data = Vec::with_capacity(n * n);
        for ti in 0..self.tiles() {
            data.extend_from_slice(self.strip(ti).data());
        }
        DenseMatrix::new(n, n, data).expect("finite normals")
    }
}

fn x_opt_for(n: usize, seed: u64) -> Vec<f64> {
    standard_normals(&mut normal_rng(seed, X_OPT_STREAM), n)
}

fn finish_generated(p: DenseMatrix, seed: u64) -> UqpProblem {
    let n = p.rows();
    let x_opt = x_opt_for(n, seed);
    let q = p.matvec(&x_opt).expect("square");
    UqpProblem {
        p: MatrixSource::Dense(Arc::new(SpdMatrix::new_unchecked(p))),
        q,
        r: 0.0,
    }
}

/// `P = VᵗV` with `V` built from `b x b` standard-normal tiles scaled by
/// `diag_scale` on the tile diagonal and `off_scale` elsewhere;
/// `q = P·x_opt` for a standard-normal `x_opt`.
pub fn gen_block_dominant(
    n: usize,
    b: usize,
    diag_scale: f64,
    off_scale: f64,
    seed: u64,
) -> Result<UqpProblem> {
    let layout = TileLayout::new(n, b, diag_scale, off_scale, seed)?;
    Ok(finish_generated(gram(&layout.dense_v()), seed))
}

/// Streams the [`gen_block_dominant`] instance straight into a block store
/// with the contiguous partition of block size `b`, holding `O(n·b)` values
/// in memory. The minimizer is known by construction and returned as the
/// oracle. `P` and `q` are bit-identical to the in-memory generator.
pub fn gen_block_dominant_to_store(
    n: usize,
    b: usize,
    diag_scale: f64,
    off_scale: f64,
    seed: u64,
    root: &Path,
) -> Result<(BlockStore, Oracle)> {
    let layout = TileLayout::new(n, b, diag_scale, off_scale, seed)?;
    let partition = contiguous_partition(n, b)?;
    let x_opt = x_opt_for(n, seed);
    let mut writer = StoreWriter::create(root, partition.clone())?;
    let mut q = vec![0.0; n];
    for (bi, block) in partition.blocks().iter().enumerate() {
        let mut acc = DenseMatrix::zeros(block.len(), n);
        for ti in 0..layout.tiles() {
            accumulate_gram_rows(&layout.strip(ti), block, &mut acc);
        }
        let q_block: Vec<f64> = (0..block.len())
            .map(|a| linalg::dot(acc.row(a), &x_opt))
            .collect();
        for (a, &i) in block.iter().enumerate() {
            q[i] = q_block[a];
        }
        writer.write_block(bi, &acc, &q_block)?;
    }
    let store = writer.finish()?;
    let f_opt = -0.5 * linalg::dot(&q, &x_opt);
    Ok((store, Oracle { x_opt, f_opt }))
}

/// `P = D·(VᵗV)·D` with standard-normal `V` and `D` equal to `factor` on a
/// seeded index set `τ` of size `heavy_count` and 1 elsewhere. Returns `τ`
/// in ascending order.
pub fn gen_scaled_rows(
    n: usize,
    heavy_count: usize,
    factor: f64,
    seed: u64,
) -> Result<(UqpProblem, Vec<usize>)> {
    if n == 0 || heavy_count >= n {
        return Err(Error::InvalidShape(format!(
            "heavy_count {heavy_count} must be below n = {n}"
        )));
    }
    if !(factor >= 1.0) {
        return Err(Error::InvalidShape(format!("scaling factor {factor} < 1")));
    }
    let v = DenseMatrix::new(n, n, standard_normals(&mut normal_rng(seed, 0), n * n))?;
    let mut p = gram(&v);
    let mut heavy = index::sample(&mut normal_rng(seed, HEAVY_SET_STREAM), n, heavy_count).into_vec();
    heavy.sort_unstable();
    let mut scale = vec![1.0; n];
    for &i in &heavy {
        scale[i] = factor;
    }
    if factor != 1.0 {
        for i in 0..n {
            for j in 0..n {
                p.set(i, j, p.get(i, j) * scale[i] * scale[j]);
            }
        }
    }
    Ok((finish_generated(p, seed), heavy))
}

/// `P = VᵗV + n·ε·I` with standard-normal `V` and `ε = RANDOM_SPD_RIDGE`.
pub fn gen_random_spd(n: usize, seed: u64) -> Result<UqpProblem> {
    if n == 0 {
        return Err(Error::InvalidShape("n must be at least 1".into()));
    }
    let v = DenseMatrix::new(n, n, standard_normals(&mut normal_rng(seed, 0), n * n))?;
    let mut p = gram(&v);
    let ridge = n as f64 * RANDOM_SPD_RIDGE;
    for i in 0..n {
        p.set(i, i, p.get(i, i) + ridge);
    }
    Ok(finish_generated(p, seed))
}

/// A dense problem's matrix as a block source over `part`.
pub fn in_memory_source(prob: &UqpProblem, part: Partition) -> Result<InMemoryBlocks> {
    let p = prob
        .dense()
        .ok_or_else(|| Error::InvalidStrategyConfig("problem is store-backed".into()))?;
    InMemoryBlocks::new(Arc::clone(p), prob.q().to_vec(), part)
}
