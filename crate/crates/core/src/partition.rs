//! Row partitions of `P`, the size limits that keep a method high-dimension
//! compliant, and the convergence-rate bounds of greedy BCD for a partition.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::problem::UqpProblem;

/// Largest `n` for which [`rate_bound`] runs its dense eigensolves.
pub const RATE_BOUND_CAP: usize = 2048;

/// Ordered, disjoint cover of the row indices `0..n` by nonempty blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    n: usize,
    blocks: Vec<Vec<usize>>,
    max_block: usize,
}

impl Partition {
    pub fn new(n: usize, blocks: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; n];
        let mut covered = 0;
        for (b, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::InvalidPartition(format!("block {b} is empty")));
            }
            for &i in block {
                if i >= n {
                    return Err(Error::InvalidPartition(format!(
                        "index {i} in block {b} is out of range for n = {n}"
                    )));
                }
                if seen[i] {
                    return Err(Error::InvalidPartition(format!(
                        "index {i} appears more than once"
                    )));
                }
                seen[i] = true;
                covered += 1;
            }
        }
        if covered != n {
            return Err(Error::InvalidPartition(format!(
                "blocks cover {covered} of {n} indices"
            )));
        }
        let max_block = blocks.iter().map(Vec::len).max().unwrap_or(0);
        Ok(Self {
            n,
            blocks,
            max_block,
        })
    }

    pub fn singletons(n: usize) -> Self {
        Self {
            n,
            blocks: (0..n).map(|i| vec![i]).collect(),
            max_block: n.min(1),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of blocks `m`.
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &[usize] {
        &self.blocks[i]
    }

    /// `d`, the size of the largest block.
    pub fn max_block_size(&self) -> usize {
        self.max_block
    }

    /// For each row, the block holding it and its position inside that block.
    pub fn row_locations(&self) -> Vec<(usize, usize)> {
        let mut loc = vec![(0, 0); self.n];
        for (b, block) in self.blocks.iter().enumerate() {
            for (pos, &i) in block.iter().enumerate() {
                loc[i] = (b, pos);
            }
        }
        loc
    }

    /// Rows in block order; the permutation behind `P_Π`.
    pub fn permutation(&self) -> Vec<usize> {
        self.blocks.iter().flatten().copied().collect()
    }

    /// One line per block, comma-separated zero-based indices.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for block in &self.blocks {
            for (k, i) in block.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write!(out, "{i}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`Partition::to_text`] output; `n` is the total index count.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut blocks = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let block = line
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<usize>().map_err(|e| {
                        Error::Parse(format!("line {}: bad index {tok:?}: {e}", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(block);
        }
        let n = blocks.iter().map(Vec::len).sum();
        Self::new(n, blocks)
    }
}

pub fn contiguous_partition(n: usize, d: usize) -> Result<Partition> {
    if d == 0 || d > n {
        return Err(Error::InvalidShape(format!("block size {d} for n = {n}")));
    }
    let blocks = (0..n)
        .step_by(d)
        .map(|start| (start..(start + d).min(n)).collect())
        .collect();
    Partition::new(n, blocks)
}

/// Seeded shuffle of `0..n` cut into consecutive blocks of size `d` (the last may be smaller).
pub fn random_partition(n: usize, d: usize, seed: u64) -> Result<Partition> {
    if d == 0 || d > n {
        return Err(Error::InvalidShape(format!("block size {d} for n = {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Partition::new(n, order.chunks(d).map(<[usize]>::to_vec).collect())
}

/// Places `heavy` verbatim as the first block and shuffles the remaining rows
/// into blocks of size at most `d`. The heavy block is not padded.
pub fn dominant_partition(n: usize, d: usize, heavy: &[usize], seed: u64) -> Result<Partition> {
    if heavy.is_empty() {
        return random_partition(n, d, seed);
    }
    if heavy.len() > d || d > n {
        return Err(Error::InvalidShape(format!(
            "heavy set of {} rows does not fit blocks of size {d}",
            heavy.len()
        )));
    }
    let mut is_heavy = vec![false; n];
    for &i in heavy {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, len: n });
        }
        is_heavy[i] = true;
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| !is_heavy[i]).collect();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut blocks = vec![heavy.to_vec()];
    blocks.extend(rest.chunks(d).map(<[usize]>::to_vec));
    Partition::new(n, blocks)
}

/// Heuristic heavy-row detector: the `count` rows with the largest diagonal
/// entries, returned in ascending index order.
pub fn detect_heavy_rows(diagonal: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..diagonal.len()).collect();
    idx.sort_by(|&a, &b| diagonal[b].abs().total_cmp(&diagonal[a].abs()).then(a.cmp(&b)));
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HdcMethod {
    BlockKaczmarz,
    BlockCoordinateDescent,
    GreedyBlockCoordinateDescent,
}

/// Main-memory budget `rho`, in rows of `P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HdcLimits {
    pub rho: usize,
}

impl HdcLimits {
    pub fn new(rho: usize) -> Self {
        Self { rho: rho.max(1) }
    }

    pub fn unbounded() -> Self {
        Self { rho: usize::MAX }
    }

    /// Block sizes must stay strictly below this.
    pub fn d_cap(&self, n: usize, method: HdcMethod) -> f64 {
        let n = n as f64;
        let structural = match method {
            HdcMethod::BlockKaczmarz | HdcMethod::GreedyBlockCoordinateDescent => n.sqrt(),
            HdcMethod::BlockCoordinateDescent => n.powf(2.0 / 3.0),
        };
        structural.min(self.rho as f64)
    }
}

pub fn hdc_admissible(part: &Partition, limits: HdcLimits, method: HdcMethod) -> bool {
    (part.max_block_size() as f64) < limits.d_cap(part.n(), method)
}

/// Rate bounds of greedy BCD for one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub m: usize,
    /// `λ_min(P_Π B_Π⁻¹)`
    pub lambda_min_pb: f64,
    /// `λ_min(B_Π)`
    pub lambda_min_b: f64,
    /// `||P_Π − B_Π||_2`
    pub off_block_norm: f64,
    /// `1 − λ_min(P_Π B_Π⁻¹) / m`
    pub bound_exact: f64,
    /// `1 − (1 − dominance_gap) / m`
    pub bound_simple: f64,
    /// `||P_Π − B_Π||_2 / λ_min(B_Π)`
    pub dominance_gap: f64,
}

impl RateReport {
    /// Iterations after which `E_k < eps` is guaranteed by `bound_exact`.
    pub fn iterations_for(&self, eps: f64) -> f64 {
        (2.0 * (1.0 / eps).ln() / -self.bound_exact.ln()).ceil()
    }
}

pub fn rate_bound(prob: &UqpProblem, part: &Partition) -> Result<RateReport> {
    let p = prob.dense_p(RATE_BOUND_CAP)?;
    rate_bound_dense(&p, part)
}

/// `λ_min` is taken from the symmetric similarity transform
/// `B_Π^{-1/2} P_Π B_Π^{-1/2}`, which shares its spectrum with `P_Π B_Π⁻¹`.
pub fn rate_bound_dense(p: &DenseMatrix, part: &Partition) -> Result<RateReport> {
    let n = p.rows();
    if part.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: part.n(),
        });
    }
    if n > RATE_BOUND_CAP {
        return Err(Error::TooLargeForDirect {
            n,
            cap: RATE_BOUND_CAP,
        });
    }
    let perm = part.permutation();
    let permuted = p.submatrix(&perm, &perm);

    let mut inv_sqrt = DenseMatrix::zeros(n, n);
    let mut off_block = permuted.clone();
    let mut lambda_min_b = f64::INFINITY;
    let mut offset = 0;
    for block in part.blocks() {
        let d = block.len();
        let local: Vec<usize> = (offset..offset + d).collect();
        let diag_block = permuted.submatrix(&local, &local);
        let (vals, vecs) = linalg::sym_eigen(&diag_block)?;
        if vals[0] <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                pivot: offset,
                value: vals[0],
            });
        }
        lambda_min_b = lambda_min_b.min(vals[0]);
        for a in 0..d {
            for b in 0..d {
                let v: f64 = (0..d)
                    .map(|k| vecs.get(a, k) * vecs.get(b, k) / vals[k].sqrt())
                    .sum();
                inv_sqrt.set(offset + a, offset + b, v);
                off_block.set(offset + a, offset + b, 0.0);
            }
        }
        offset += d;
    }

    let mut similar = inv_sqrt.matmul(&permuted)?.matmul(&inv_sqrt)?;
    symmetrize(&mut similar);
    let lambda_min_pb = linalg::sym_eigvals(&similar)?[0];
    if lambda_min_pb <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            pivot: 0,
            value: lambda_min_pb,
        });
    }
    // P_Π − B_Π is symmetric, so its spectral norm is its largest |eigenvalue|.
    let off_vals = linalg::sym_eigvals(&off_block)?;
    let off_block_norm = off_vals[0].abs().max(off_vals[n - 1].abs());

    let m = part.len() as f64;
    let dominance_gap = off_block_norm / lambda_min_b;
    Ok(RateReport {
        m: part.len(),
        lambda_min_pb,
        lambda_min_b,
        off_block_norm,
        bound_exact: 1.0 - lambda_min_pb / m,
        bound_simple: 1.0 - (1.0 - dominance_gap) / m,
        dominance_gap,
    })
}

fn symmetrize(a: &mut DenseMatrix) {
    let n = a.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contiguous_examples() {
        let p = contiguous_partition(4, 2).unwrap();
        assert_eq!(p.blocks(), &[vec![0, 1], vec![2, 3]]);
        let p = contiguous_partition(5, 2).unwrap();
        assert_eq!(p.blocks(), &[vec![0, 1], vec![2, 3], vec![4]]);
        let p = contiguous_partition(3, 3).unwrap();
        assert_eq!(p.len(), 1);
        assert!(!hdc_admissible(
            &p,
            HdcLimits::unbounded(),
            HdcMethod::GreedyBlockCoordinateDescent
        ));
        assert!(contiguous_partition(3, 0).is_err());
        assert!(contiguous_partition(3, 4).is_err());
    }

    #[test]
    fn random_partition_is_a_deterministic_cover() {
        let a = random_partition(64, 8, 2).unwrap();
        let b = random_partition(64, 8, 2).unwrap();
        assert_eq!(a, b);
        let mut all = a.permutation();
        all.sort_unstable();
        assert_eq!(all, (0..64).collect::<Vec<_>>());
        assert!(a.blocks().iter().all(|b| b.len() <= 8));
        assert_ne!(a, random_partition(64, 8, 3).unwrap());
    }

    #[test]
    fn dominant_partition_examples() {
        let heavy = [3, 7, 9, 12];
        let p = dominant_partition(16, 4, &heavy, 1).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.block(0), &heavy);
        assert!(p.blocks()[1..].iter().all(|b| b.len() == 4));
        assert_eq!(
            dominant_partition(16, 4, &[], 5).unwrap(),
            random_partition(16, 4, 5).unwrap()
        );
        assert!(dominant_partition(16, 2, &heavy, 1).is_err());
    }

    #[test]
    fn rejects_invalid_partitions() {
        assert!(Partition::new(3, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(Partition::new(3, vec![vec![0, 1]]).is_err());
        assert!(Partition::new(3, vec![vec![0, 1, 2], vec![]]).is_err());
        assert!(Partition::new(3, vec![vec![0, 1, 3]]).is_err());
    }

    #[test]
    fn hdc_caps() {
        let limits = HdcLimits::new(50);
        let part = |d| contiguous_partition(100, d).unwrap();
        assert!(hdc_admissible(&part(9), limits, HdcMethod::GreedyBlockCoordinateDescent));
        assert!(!hdc_admissible(
            &part(10),
            HdcLimits::unbounded(),
            HdcMethod::GreedyBlockCoordinateDescent
        ));
        assert!(hdc_admissible(&part(20), limits, HdcMethod::BlockCoordinateDescent));
        assert!(!hdc_admissible(&part(22), limits, HdcMethod::BlockCoordinateDescent));
        assert!(!hdc_admissible(&part(20), limits, HdcMethod::BlockKaczmarz));
        assert!(!hdc_admissible(&part(9), HdcLimits::new(9), HdcMethod::BlockKaczmarz));
    }

    #[test]
    fn text_round_trip() {
        let p = random_partition(10, 3, 4).unwrap();
        assert_eq!(Partition::from_text(&p.to_text()).unwrap(), p);
        assert!(matches!(Partition::from_text("0,1\n2,x\n"), Err(Error::Parse(_))));
        assert!(matches!(
            Partition::from_text("0,1\n1,2\n"),
            Err(Error::InvalidPartition(_))
        ));
    }

    #[test]
    fn heavy_row_detection() {
        assert_eq!(detect_heavy_rows(&[1.0, 50.0, 2.0, 40.0, 3.0], 2), vec![1, 3]);
    }

    #[test]
    fn rate_bound_diagonal_singletons() {
        let p = DenseMatrix::from_diag(&[1.0, 2.0, 3.0, 5.0]);
        let r = rate_bound_dense(&p, &Partition::singletons(4)).unwrap();
        assert!((r.lambda_min_pb - 1.0).abs() < 1e-14);
        assert!((r.bound_exact - 0.75).abs() < 1e-14);
        assert_eq!(r.dominance_gap, 0.0);
        assert!((r.bound_simple - 0.75).abs() < 1e-14);
    }

    #[test]
    fn rate_bound_two_by_two() {
        let p = DenseMatrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let r = rate_bound_dense(&p, &Partition::singletons(2)).unwrap();
        assert!((r.lambda_min_pb - 0.5).abs() < 1e-14);
        assert!((r.bound_exact - 0.75).abs() < 1e-14);
        // ||P − B||_2 = 1, λ_min(B) = 2
        assert!((r.dominance_gap - 0.5).abs() < 1e-14);
        assert!((r.bound_simple - 0.75).abs() < 1e-14);
    }

    #[test]
    fn identity_bound_is_one_minus_one_over_m() {
        let p = DenseMatrix::identity(6);
        let part = contiguous_partition(6, 2).unwrap();
        let r = rate_bound_dense(&p, &part).unwrap();
        assert!((r.lambda_min_pb - 1.0).abs() < 1e-14);
        assert!((r.bound_exact - (1.0 - 1.0 / 3.0)).abs() < 1e-14);
    }
}
