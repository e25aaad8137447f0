//! Chunk-per-block on-disk storage of `(P, q)` with cached block-diagonal
//! inverses and I/O accounting.
//!
//! Layout of a store directory:
//!
//! * `manifest.bin`: magic `UQPB`, version `1` (u32), `n` and `m` (u64), then
//!   for each block its length and row indices (u64), the CRC32 of every block
//!   file (u32 each), the number of inverse CRCs (u32, `0` or `m`) followed by
//!   those CRCs, and finally the CRC32 of all preceding manifest bytes.
//! * `block_<i>.bin`: the `d_i x n` rows of `P` in listed order, row-major,
//!   then the `d_i` entries of `q`.
//! * `inv_<i>.bin`: the `d_i x d_i` inverse of `P_ππ`.
//!
//! All integers and reals are little-endian.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, SpdMatrix};
use crate::partition::Partition;
use crate::problem::{MatrixSource, UqpProblem};

pub const MAGIC: &[u8; 4] = b"UQPB";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.bin";

thread_local! {
    /// Raw bytes of the last block read on this thread.
    static READ_BUFFER: std::cell::RefCell<Vec<u8>> = const { std::cell::RefCell::new(Vec::new()) };
}

pub fn block_file_name(i: usize) -> String {
    format!("block_{i}.bin")
}

pub fn inverse_file_name(i: usize) -> String {
    format!("inv_{i}.bin")
}

/// Fetch and residency counters shared by every handle on a block source.
#[derive(Debug, Default)]
pub struct AccessCounters {
    fetches: AtomicU64,
    bytes_read: AtomicU64,
    resident_rows: AtomicUsize,
    peak_resident_rows: AtomicUsize,
}

impl AccessCounters {
    pub fn fetches(&self) -> u64 {
        self.fetches.load(Ordering::SeqCst)
    }

    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::SeqCst)
    }

    /// Rows of `P` currently held by live [`FetchedBlock`]s.
    pub fn resident_rows(&self) -> usize {
        self.resident_rows.load(Ordering::SeqCst)
    }

    pub fn peak_resident_rows(&self) -> usize {
        self.peak_resident_rows.load(Ordering::SeqCst)
    }

    /// Restarts peak tracking from the current residency.
    pub fn reset_peak(&self) {
        self.peak_resident_rows
            .store(self.resident_rows(), Ordering::SeqCst);
    }

    fn record_read(&self, bytes: u64) {
        self.bytes_read.fetch_add(bytes, Ordering::SeqCst);
    }

    fn acquire(self: &Arc<Self>, rows: usize) -> ResidencyGuard {
        let now = self.resident_rows.fetch_add(rows, Ordering::SeqCst) + rows;
        self.peak_resident_rows.fetch_max(now, Ordering::SeqCst);
        ResidencyGuard {
            counters: Arc::clone(self),
            rows,
        }
    }
}

/// Decrements the resident row count when the rows it covers are dropped.
#[derive(Debug)]
pub struct ResidencyGuard {
    counters: Arc<AccessCounters>,
    rows: usize,
}

impl Drop for ResidencyGuard {
    fn drop(&mut self) {
        self.counters
            .resident_rows
            .fetch_sub(self.rows, Ordering::SeqCst);
    }
}

/// Rows `P_π` and entries `q_π` of one block.
#[derive(Debug)]
pub struct FetchedBlock {
    index: usize,
    indices: Vec<usize>,
    rows: DenseMatrix,
    q: Vec<f64>,
    _guard: ResidencyGuard,
}

impl FetchedBlock {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn rows(&self) -> &DenseMatrix {
        &self.rows
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// `P_ππ`, the columns of the fetched rows that lie in the block.
    pub fn diagonal_block(&self) -> DenseMatrix {
        let local: Vec<usize> = (0..self.indices.len()).collect();
        self.rows.submatrix(&local, &self.indices)
    }
}

/// Rows gathered from arbitrary positions, possibly spanning several blocks.
#[derive(Debug)]
pub struct GatheredRows {
    pub rows: DenseMatrix,
    _guard: ResidencyGuard,
}

/// Anything that can hand out blocks of rows of `P` under a partition.
pub trait BlockSource: Send + Sync {
    fn partition(&self) -> &Partition;

    fn fetch_block(&self, i: usize) -> Result<FetchedBlock>;

    /// Rows of `P` at arbitrary indices. Not a contiguous block read.
    fn gather_rows(&self, rows: &[usize]) -> Result<GatheredRows>;

    fn counters(&self) -> &Arc<AccessCounters>;

    fn n(&self) -> usize {
        self.partition().n()
    }
}

/// Block source over an in-memory matrix, with the same accounting as a store.
#[derive(Debug, Clone)]
pub struct InMemoryBlocks {
    p: Arc<SpdMatrix>,
    q: Vec<f64>,
    partition: Partition,
    counters: Arc<AccessCounters>,
}

impl InMemoryBlocks {
    pub fn new(p: Arc<SpdMatrix>, q: Vec<f64>, partition: Partition) -> Result<Self> {
        if p.dim() != partition.n() {
            return Err(Error::DimensionMismatch {
                expected: partition.n(),
                got: p.dim(),
            });
        }
        if q.len() != p.dim() {
            return Err(Error::DimensionMismatch {
                expected: p.dim(),
                got: q.len(),
            });
        }
        Ok(Self {
            p,
            q,
            partition,
            counters: Arc::default(),
        })
    }

    pub fn matrix(&self) -> &Arc<SpdMatrix> {
        &self.p
    }
}

impl BlockSource for InMemoryBlocks {
    fn partition(&self) -> &Partition {
        &self.partition
    }

    fn fetch_block(&self, i: usize) -> Result<FetchedBlock> {
        if i >= self.partition.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.partition.len(),
            });
        }
        let indices = self.partition.block(i).to_vec();
        let n = self.p.dim();
        let guard = self.counters.acquire(indices.len());
        let mut data = Vec::with_capacity(indices.len() * n);
        for &r in &indices {
            data.extend_from_slice(self.p.row(r));
        }
        let q = indices.iter().map(|&r| self.q[r]).collect();
        self.counters.fetches.fetch_add(1, Ordering::SeqCst);
        self.counters
            .record_read((indices.len() * (n + 1) * 8) as u64);
        Ok(FetchedBlock {
            index: i,
            rows: DenseMatrix::new(indices.len(), n, data)?,
            indices,
            q,
            _guard: guard,
        })
    }

    fn gather_rows(&self, rows: &[usize]) -> Result<GatheredRows> {
        let n = self.p.dim();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let guard = self.counters.acquire(rows.len());
        let all: Vec<usize> = (0..n).collect();
        self.counters.record_read((rows.len() * n * 8) as u64);
        Ok(GatheredRows {
            rows: self.p.submatrix(rows, &all),
            _guard: guard,
        })
    }

    fn counters(&self) -> &Arc<AccessCounters> {
        &self.counters
    }
}

fn f64s_to_bytes(values: &[f64], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Manifest {
    partition: Partition,
    block_crcs: Vec<u32>,
    inverse_crcs: Vec<u32>,
}

impl Manifest {
    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.partition.n() as u64).to_le_bytes());
        out.extend_from_slice(&(self.partition.len() as u64).to_le_bytes());
        for block in self.partition.blocks() {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for &i in block {
                out.extend_from_slice(&(i as u64).to_le_bytes());
            }
        }
        for crc in &self.block_crcs {
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out.extend_from_slice(&(self.inverse_crcs.len() as u32).to_le_bytes());
        for crc in &self.inverse_crcs {
            out.extend_from_slice(&crc.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(corrupt(path, "manifest truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt(path, "manifest checksum mismatch"));
        }
        let mut cur = Cursor { bytes: body, pos: 0, path };
        if cur.take(4)? != MAGIC {
            return Err(corrupt(path, "bad magic"));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(path, format!("unsupported version {version}")));
        }
        let n = cur.u64()? as usize;
        let m = cur.u64()? as usize;
        if m > n {
            return Err(corrupt(path, "more blocks than rows"));
        }
        let mut blocks = Vec::with_capacity(m);
        for _ in 0..m {
            let d = cur.u64()? as usize;
            if d > n {
                return Err(corrupt(path, "block longer than n"));
            }
            let mut block = Vec::with_capacity(d);
            for _ in 0..d {
                block.push(cur.u64()? as usize);
            }
            blocks.push(block);
        }
        let partition = Partition::new(n, blocks)
            .map_err(|e| corrupt(path, format!("manifest partition: {e}")))?;
        let block_crcs = (0..m).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let inv_count = cur.u32()? as usize;
        if inv_count != 0 && inv_count != m {
            return Err(corrupt(path, "inverse checksum count"));
        }
        let inverse_crcs = (0..inv_count)
            .map(|_| cur.u32())
            .collect::<Result<Vec<_>>>()?;
        if cur.pos != body.len() {
            return Err(corrupt(path, "trailing bytes"));
        }
        Ok(Self {
            partition,
            block_crcs,
            inverse_crcs,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(self.path, "manifest truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Writes block files one at a time, then the manifest.
#[derive(Debug)]
pub struct StoreWriter {
    root: PathBuf,
    partition: Partition,
    crcs: Vec<Option<u32>>,
}

impl StoreWriter {
    pub fn create(root: &Path, partition: Partition) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let m = partition.len();
        Ok(Self {
            root: root.to_path_buf(),
            partition,
            crcs: vec![None; m],
        })
    }

    /// Writes `block_<i>.bin` from the block's rows of `P` and entries of `q`.
    pub fn write_block(&mut self, i: usize, rows: &DenseMatrix, q: &[f64]) -> Result<()> {
        let m = self.partition.len();
        if i >= m {
            return Err(Error::IndexOutOfRange { index: i, len: m });
        }
        let d = self.partition.block(i).len();
        let n = self.partition.n();
        if rows.rows() != d || q.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: rows.rows().min(q.len()),
            });
        }
        if rows.cols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: rows.cols(),
            });
        }
        let mut bytes = Vec::with_capacity(d * (n + 1) * 8);
        f64s_to_bytes(rows.data(), &mut bytes);
        f64s_to_bytes(q, &mut bytes);
        write_file(&self.root.join(block_file_name(i)), &bytes)?;
        self.crcs[i] = Some(crc32fast::hash(&bytes));
        Ok(())
    }

    pub fn finish(self) -> Result<BlockStore> {
        let block_crcs = self
            .crcs
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.ok_or_else(|| Error::InvalidPartition(format!("block {i} was never written")))
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            partition: self.partition,
            block_crcs,
            inverse_crcs: Vec::new(),
        };
        let path = self.root.join(MANIFEST_FILE);
        write_file(&path, &manifest.encode())?;
        BlockStore::open(&self.root)
    }
}

/// Rows of `P` for a problem, whichever way `P` is held.
fn problem_rows(prob: &UqpProblem, rows: &[usize]) -> Result<DenseMatrix> {
    match prob.source() {
        MatrixSource::Dense(p) => {
            let all: Vec<usize> = (0..p.dim()).collect();
            Ok(p.submatrix(rows, &all))
        }
        MatrixSource::Store(store) => Ok(store.gather_rows(rows)?.rows),
    }
}

/// Writes `(P, q)` of `prob` under `part` to a new store at `root`.
pub fn write_store(prob: &UqpProblem, part: &Partition, root: &Path) -> Result<BlockStore> {
    if part.n() != prob.n() {
        return Err(Error::InvalidPartition(format!(
            "partition covers {} rows, problem has {}",
            part.n(),
            prob.n()
        )));
    }
    let mut writer = StoreWriter::create(root, part.clone())?;
    for (i, block) in part.blocks().iter().enumerate() {
        let rows = problem_rows(prob, block)?;
        let q: Vec<f64> = block.iter().map(|&r| prob.q()[r]).collect();
        writer.write_block(i, &rows, &q)?;
    }
    writer.finish()
}

/// Read handle on a store directory.
#[derive(Debug)]
pub struct BlockStore {
    root: PathBuf,
    inverse_dir: PathBuf,
    manifest: Manifest,
    row_locations: Vec<(usize, usize)>,
    counters: Arc<AccessCounters>,
}

impl BlockStore {
    /// Opens a store and verifies the checksum of every block file.
    pub fn open(root: &Path) -> Result<Self> {
        Self::open_with_cache_dir(root, None)
    }

    /// As [`BlockStore::open`], keeping inverse files in `cache_dir` if given.
    pub fn open_with_cache_dir(root: &Path, cache_dir: Option<&Path>) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let manifest = Manifest::decode(&read_file(&path)?, &path)?;
        let n = manifest.partition.n();
        for (i, block) in manifest.partition.blocks().iter().enumerate() {
            let path = root.join(block_file_name(i));
            let bytes = read_file(&path)?;
            if bytes.len() != block.len() * (n + 1) * 8 {
                return Err(corrupt(&path, "unexpected length"));
            }
            if crc32fast::hash(&bytes) != manifest.block_crcs[i] {
                return Err(corrupt(&path, "checksum mismatch"));
            }
        }
        let inverse_dir = cache_dir.unwrap_or(root).to_path_buf();
        Ok(Self {
            root: root.to_path_buf(),
            inverse_dir,
            row_locations: manifest.partition.row_locations(),
            manifest,
            counters: Arc::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn n(&self) -> usize {
        self.manifest.partition.n()
    }

    pub fn block_crcs(&self) -> &[u32] {
        &self.manifest.block_crcs
    }

    pub fn has_inverses(&self) -> bool {
        !self.manifest.inverse_crcs.is_empty()
    }

    fn check_index(&self, i: usize) -> Result<()> {
        let m = self.manifest.partition.len();
        if i >= m {
            return Err(Error::IndexOutOfRange { index: i, len: m });
        }
        Ok(())
    }

    /// `q`, read by seeking past the rows in each block file.
    pub fn read_q(&self) -> Result<Vec<f64>> {
        let n = self.n();
        let mut q = vec![0.0; n];
        for (i, block) in self.manifest.partition.blocks().iter().enumerate() {
            let path = self.root.join(block_file_name(i));
            let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            file.seek(SeekFrom::Start((block.len() * n * 8) as u64))
                .map_err(|e| Error::io(&path, e))?;
            let mut buf = vec![0u8; block.len() * 8];
            file.read_exact(&mut buf).map_err(|e| Error::io(&path, e))?;
            self.counters.record_read(buf.len() as u64);
            for (&r, v) in block.iter().zip(bytes_to_f64s(&buf)) {
                q[r] = v;
            }
        }
        Ok(q)
    }

    /// Diagonal of `P`, streamed one block at a time.
    pub fn diagonal(&self) -> Result<Vec<f64>> {
        let mut diag = vec![0.0; self.n()];
        for i in 0..self.manifest.partition.len() {
            let block = self.fetch_block(i)?;
            for (k, &r) in block.indices().iter().enumerate() {
                diag[r] = block.rows().get(k, r);
            }
        }
        Ok(diag)
    }

    /// Computes, persists and returns `P_ππ⁻¹` for every block, spreading the
    /// blocks over `workers` threads. Files do not depend on `workers`.
    pub fn precompute_inverses(&mut self, workers: usize) -> Result<BlockInverses> {
        let inverses = BlockInverses::compute(&*self, workers)?;
        fs::create_dir_all(&self.inverse_dir).map_err(|e| Error::io(&self.inverse_dir, e))?;
        let mut crcs = Vec::with_capacity(inverses.len());
        for (i, inv) in inverses.iter().enumerate() {
            let mut bytes = Vec::with_capacity(inv.data().len() * 8);
            f64s_to_bytes(inv.data(), &mut bytes);
            write_file(&self.inverse_dir.join(inverse_file_name(i)), &bytes)?;
            crcs.push(crc32fast::hash(&bytes));
        }
        self.manifest.inverse_crcs = crcs;
        write_file(&self.root.join(MANIFEST_FILE), &self.manifest.encode())?;
        Ok(inverses)
    }

    /// Loads persisted inverses; `None` if they were never computed or a file
    /// is absent. A file that is present but fails its checksum is an error.
    pub fn load_inverses(&self) -> Result<Option<BlockInverses>> {
        if !self.has_inverses() {
            return Ok(None);
        }
        let mut out = Vec::with_capacity(self.manifest.partition.len());
        for (i, block) in self.manifest.partition.blocks().iter().enumerate() {
            let path = self.inverse_dir.join(inverse_file_name(i));
            let bytes = match fs::read(&path) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
                Err(e) => return Err(Error::io(&path, e)),
            };
            let d = block.len();
            if bytes.len() != d * d * 8 {
                return Err(corrupt(&path, "unexpected length"));
            }
            if crc32fast::hash(&bytes) != self.manifest.inverse_crcs[i] {
                return Err(corrupt(&path, "checksum mismatch"));
            }
            self.counters.record_read(bytes.len() as u64);
            out.push(DenseMatrix::new(d, d, bytes_to_f64s(&bytes))?);
        }
        Ok(Some(BlockInverses { inverses: out }))
    }

    /// Loaded inverses, computing and persisting them first if needed.
    pub fn ensure_inverses(&mut self, workers: usize) -> Result<BlockInverses> {
        match self.load_inverses()? {
            Some(inv) => Ok(inv),
            None => self.precompute_inverses(workers),
        }
    }
}

impl BlockSource for BlockStore {
    fn partition(&self) -> &Partition {
        &self.manifest.partition
    }

    fn fetch_block(&self, i: usize) -> Result<FetchedBlock> {
        self.check_index(i)?;
        let indices = self.manifest.partition.block(i).to_vec();
        let n = self.n();
        let d = indices.len();
        let guard = self.counters.acquire(d);
        let path = self.root.join(block_file_name(i));
        let (values, q) = READ_BUFFER.with_borrow_mut(|bytes| -> Result<_> {
            bytes.clear();
            File::open(&path)
                .and_then(|mut f| f.read_to_end(bytes))
                .map_err(|e| Error::io(&path, e))?;
            self.counters.record_read(bytes.len() as u64);
            if bytes.len() != d * (n + 1) * 8 {
                return Err(corrupt(&path, "unexpected length"));
            }
            if crc32fast::hash(bytes) != self.manifest.block_crcs[i] {
                return Err(corrupt(&path, "checksum mismatch"));
            }
            let (rows, q) = bytes.split_at(d * n * 8);
            Ok((bytes_to_f64s(rows), bytes_to_f64s(q)))
        })?;
        self.counters.fetches.fetch_add(1, Ordering::SeqCst);
        Ok(FetchedBlock {
            index: i,
            rows: DenseMatrix::new(d, n, values)
                .map_err(|_| corrupt(&path, "non-finite entry"))?,
            indices,
            q,
            _guard: guard,
        })
    }

    fn gather_rows(&self, rows: &[usize]) -> Result<GatheredRows> {
        let n = self.n();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let guard = self.counters.acquire(rows.len());
        let mut data = Vec::with_capacity(rows.len() * n);
        let mut buf = vec![0u8; n * 8];
        for &r in rows {
            let (block, pos) = self.row_locations[r];
            let path = self.root.join(block_file_name(block));
            let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            file.seek(SeekFrom::Start((pos * n * 8) as u64))
                .map_err(|e| Error::io(&path, e))?;
            file.read_exact(&mut buf).map_err(|e| Error::io(&path, e))?;
            self.counters.record_read(buf.len() as u64);
            data.extend(bytes_to_f64s(&buf));
        }
        Ok(GatheredRows {
            rows: DenseMatrix::new(rows.len(), n, data)?,
            _guard: guard,
        })
    }

    fn counters(&self) -> &Arc<AccessCounters> {
        &self.counters
    }
}

/// The inverses `P_ππ⁻¹` of all diagonal blocks, in block order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockInverses {
    inverses: Vec<DenseMatrix>,
}

impl BlockInverses {
    /// Fetches every block once and inverts its diagonal block. Blocks are
    /// split into `workers` contiguous groups, each handled by one thread.
    pub fn compute(source: &dyn BlockSource, workers: usize) -> Result<Self> {
        let m = source.partition().len();
        let workers = workers.clamp(1, m.max(1));
        let invert = |i: usize| -> Result<DenseMatrix> {
            let block = source.fetch_block(i)?;
            linalg::spd_invert(&block.diagonal_block())
        };
        if workers == 1 {
            let inverses = (0..m).map(invert).collect::<Result<Vec<_>>>()?;
            return Ok(Self { inverses });
        }
        let chunk = m.div_ceil(workers);
        let groups: Vec<Result<Vec<DenseMatrix>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..m)
                .step_by(chunk)
                .map(|start| {
                    let invert = &invert;
                    s.spawn(move || (start..(start + chunk).min(m)).map(invert).collect())
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("inverse worker panicked"))
                .collect()
        });
        let mut inverses = Vec::with_capacity(m);
        for g in groups {
            inverses.extend(g?);
        }
        Ok(Self { inverses })
    }

    pub fn get(&self, i: usize) -> &DenseMatrix {
        &self.inverses[i]
    }

    pub fn len(&self) -> usize {
        self.inverses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inverses.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DenseMatrix> {
        self.inverses.iter()
    }

    /// Total stored values, `Σ d_i²`.
    pub fn stored_values(&self) -> usize {
        self.inverses.iter().map(|m| m.data().len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{contiguous_partition, random_partition};
    use crate::problem::gen_random_spd;

    fn toy() -> UqpProblem {
        UqpProblem::new(DenseMatrix::from_diag(&[2.0, 4.0]), vec![2.0, 4.0], 0.0).unwrap()
    }

    #[test]
    fn singleton_store_layout() {
        let dir = tempfile::tempdir().unwrap();
        let store = write_store(&toy(), &Partition::singletons(2), dir.path()).unwrap();
        assert_eq!(store.partition().len(), 2);
        for i in 0..2 {
            let len = fs::metadata(dir.path().join(block_file_name(i))).unwrap().len();
            assert_eq!(len, (2 + 1) * 8);
        }
        let b = store.fetch_block(1).unwrap();
        assert_eq!(b.rows().row(0), &[0.0, 4.0]);
        assert_eq!(b.q(), &[4.0]);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let prob = gen_random_spd(24, 3).unwrap();
        let part = random_partition(24, 5, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(write_store(&prob, &part, dir.path()).unwrap());
        let reopened = UqpProblem::from_store(Arc::clone(&store), 0.0).unwrap();
        assert_eq!(reopened.q(), prob.q());
        let p = reopened.dense_p(64).unwrap();
        assert_eq!(*p, ***prob.dense().unwrap());
        assert_eq!(store.partition(), &part);
    }

    #[test]
    fn fetch_out_of_range_and_counters() {
        let dir = tempfile::tempdir().unwrap();
        let store = write_store(&toy(), &Partition::singletons(2), dir.path()).unwrap();
        assert!(matches!(
            store.fetch_block(2),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
        let before = store.counters().fetches();
        {
            let _a = store.fetch_block(0).unwrap();
            assert_eq!(store.counters().resident_rows(), 1);
        }
        assert_eq!(store.counters().resident_rows(), 0);
        assert_eq!(store.counters().fetches(), before + 1);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_store(&toy(), &Partition::singletons(2), dir.path()).unwrap();
        let path = dir.path().join(block_file_name(0));
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            BlockStore::open(dir.path()),
            Err(Error::Corrupt { .. })
        ));

        let mpath = dir.path().join(MANIFEST_FILE);
        let mut bytes = fs::read(&mpath).unwrap();
        bytes[9] ^= 1;
        fs::write(&mpath, bytes).unwrap();
        assert!(matches!(
            BlockStore::open(dir.path()),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn manifest_header_bytes() {
        let dir = tempfile::tempdir().unwrap();
        write_store(&toy(), &Partition::singletons(2), dir.path()).unwrap();
        let bytes = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(&bytes[..4], b"UQPB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
    }

    #[test]
    fn diagonal_inverses_are_reciprocals() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = write_store(&toy(), &Partition::singletons(2), dir.path()).unwrap();
        let inv = store.precompute_inverses(1).unwrap();
        assert_eq!(inv.get(0).data(), &[0.5]);
        assert_eq!(inv.get(1).data(), &[0.25]);
        let reopened = BlockStore::open(dir.path()).unwrap();
        assert_eq!(reopened.load_inverses().unwrap().unwrap(), inv);
    }

    #[test]
    fn inverses_multiply_to_identity() {
        let prob = gen_random_spd(40, 8).unwrap();
        let part = contiguous_partition(40, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut store = write_store(&prob, &part, dir.path()).unwrap();
        let inv = store.precompute_inverses(1).unwrap();
        let p = prob.dense().unwrap();
        for (i, block) in part.blocks().iter().enumerate() {
            let pbb = p.submatrix(block, block);
            let prod = pbb.matmul(inv.get(i)).unwrap();
            assert!(prod.max_abs_diff(&DenseMatrix::identity(block.len())) <= 1e-10);
        }
        assert!(inv.stored_values() <= part.max_block_size() * 40);
    }

    #[test]
    fn parallel_precompute_matches_serial_files() {
        let prob = gen_random_spd(30, 2).unwrap();
        let part = contiguous_partition(30, 4).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_store(&prob, &part, a.path()).unwrap().precompute_inverses(1).unwrap();
        write_store(&prob, &part, b.path()).unwrap().precompute_inverses(4).unwrap();
        for i in 0..part.len() {
            let fa = fs::read(a.path().join(inverse_file_name(i))).unwrap();
            let fb = fs::read(b.path().join(inverse_file_name(i))).unwrap();
            assert_eq!(fa, fb);
        }
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn cache_dir_and_missing_inverses() {
        let prob = gen_random_spd(12, 4).unwrap();
        let part = contiguous_partition(12, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cache = tempfile::tempdir().unwrap();
        write_store(&prob, &part, dir.path()).unwrap();
        let mut store = BlockStore::open_with_cache_dir(dir.path(), Some(cache.path())).unwrap();
        assert!(store.load_inverses().unwrap().is_none());
        store.precompute_inverses(2).unwrap();
        assert!(cache.path().join(inverse_file_name(0)).exists());
        assert!(!dir.path().join(inverse_file_name(0)).exists());
        let plain = BlockStore::open(dir.path()).unwrap();
        assert!(plain.load_inverses().unwrap().is_none());
    }

    #[test]
    fn gather_rows_reads_across_blocks() {
        let prob = gen_random_spd(10, 6).unwrap();
        let part = random_partition(10, 3, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let store = write_store(&prob, &part, dir.path()).unwrap();
        let got = store.gather_rows(&[7, 2, 9]).unwrap();
        let all: Vec<usize> = (0..10).collect();
        assert_eq!(got.rows, prob.dense().unwrap().submatrix(&[7, 2, 9], &all));
        assert_eq!(store.counters().fetches(), 0);
    }
}
