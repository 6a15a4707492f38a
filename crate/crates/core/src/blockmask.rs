//! Block-sparse dropout masks.
//!
//! A [`BlockMask`] holds one keep/drop bit per `m_blk x k_blk` block of an
//! activation matrix. Bit `b = r * block_cols + c` for block `(r, c)` is stored
//! in `words[b / 64]` at position `b % 64`, least-significant bit first. A set
//! bit means KEEP. Bits past the last block are always zero, so `keep_count`
//! is the popcount of `words`.
//!
//! The same layout is written to disk by [`BlockMask::write_to`]:
//!
//! ```text
//! "BMSK" | 0x01 | block_rows u32le | block_cols u32le | m_blk u32le | k_blk u32le | words u64le...
//! ```

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Matrix, Scalar};

pub const MASK_MAGIC: &[u8; 4] = b"BMSK";
pub const MASK_VERSION: u8 = 0x01;

/// GEMM block sizes `(M_blk, N_blk, K_blk)` in elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub m_blk: usize,
    pub n_blk: usize,
    pub k_blk: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            m_blk: 32,
            n_blk: 32,
            k_blk: 32,
        }
    }
}

impl TileConfig {
    pub fn new(m_blk: usize, n_blk: usize, k_blk: usize) -> Result<Self> {
        for (dim, v) in [("m_blk", m_blk), ("n_blk", n_blk), ("k_blk", k_blk)] {
            if v == 0 {
                return Err(Error::Config(format!("{dim} must be positive")));
            }
        }
        Ok(Self {
            m_blk,
            n_blk,
            k_blk,
        })
    }

    pub fn square(blk: usize) -> Self {
        Self {
            m_blk: blk,
            n_blk: blk,
            k_blk: blk,
        }
    }

    /// Checks that every block size divides its problem dimension.
    pub fn check(&self, m: usize, n: usize, k: usize) -> Result<()> {
        divides("M", m, self.m_blk)?;
        divides("N", n, self.n_blk)?;
        divides("K", k, self.k_blk)
    }

    /// Shrinks each block size to `gcd(block, dim)` so the tiling divides
    /// the problem. Used for shapes that are not known up front, such as a
    /// trailing evaluation batch.
    pub fn fit(&self, m: usize, n: usize, k: usize) -> Self {
        Self {
            m_blk: gcd(self.m_blk, m),
            n_blk: gcd(self.n_blk, n),
            k_blk: gcd(self.k_blk, k),
        }
    }
}

pub(crate) fn divides(dim: &'static str, size: usize, block: usize) -> Result<()> {
    if block == 0 || size == 0 || !size.is_multiple_of(block) {
        return Err(Error::Indivisible { dim, size, block });
    }
    Ok(())
}

pub(crate) fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Parameters of one sampled dropout instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub p: f64,
    pub m_blk: usize,
    pub k_blk: usize,
    pub seed: u64,
}

impl DropoutSpec {
    pub fn new(p: f64, m_blk: usize, k_blk: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            p,
            m_blk,
            k_blk,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::InvalidRate(self.p));
        }
        if self.m_blk == 0 || self.k_blk == 0 {
            return Err(Error::Config("mask block sizes must be positive".into()));
        }
        Ok(())
    }

    /// `1 / (1 - p)`, the scale applied to kept values.
    pub fn keep_scale(&self) -> f64 {
        1.0 / (1.0 - self.p)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    block_rows: usize,
    block_cols: usize,
    m_blk: usize,
    k_blk: usize,
    words: Vec<u64>,
    keep_count: usize,
}

fn word_count(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl BlockMask {
    /// Builds a mask from a per-block predicate.
    pub fn from_fn(
        block_rows: usize,
        block_cols: usize,
        m_blk: usize,
        k_blk: usize,
        f: impl Fn(usize, usize) -> bool + Sync,
    ) -> Result<Self> {
        Self::check_dims(block_rows, block_cols, m_blk, k_blk)?;
        let total = block_rows * block_cols;
        let mut words = vec![0u64; word_count(total)];
        crate::par::for_each_chunk(&mut words, 64, |chunk_idx, chunk| {
            for (wi, word) in chunk.iter_mut().enumerate() {
                let base = (chunk_idx * 64 + wi) * 64;
                let mut w = 0u64;
                for bit in 0..64.min(total.saturating_sub(base)) {
                    let b = base + bit;
                    if f(b / block_cols, b % block_cols) {
                        w |= 1 << bit;
                    }
                }
                *word = w;
            }
            0
        });
        Ok(Self::from_parts(block_rows, block_cols, m_blk, k_blk, words))
    }

    fn from_parts(
        block_rows: usize,
        block_cols: usize,
        m_blk: usize,
        k_blk: usize,
        words: Vec<u64>,
    ) -> Self {
        let keep_count = words.iter().map(|w| w.count_ones() as usize).sum();
        Self {
            block_rows,
            block_cols,
            m_blk,
            k_blk,
            words,
            keep_count,
        }
    }

    fn check_dims(block_rows: usize, block_cols: usize, m_blk: usize, k_blk: usize) -> Result<()> {
        if block_rows == 0 || block_cols == 0 || m_blk == 0 || k_blk == 0 {
            return Err(Error::MaskGeometry(format!(
                "grid {block_rows}x{block_cols} with blocks {m_blk}x{k_blk} must be non-empty"
            )));
        }
        Ok(())
    }

    /// Reassembles a mask from packed words, rejecting set bits past the grid.
    pub fn from_words(
        block_rows: usize,
        block_cols: usize,
        m_blk: usize,
        k_blk: usize,
        words: Vec<u64>,
    ) -> Result<Self> {
        Self::check_dims(block_rows, block_cols, m_blk, k_blk)?;
        let total = block_rows * block_cols;
        if words.len() != word_count(total) {
            return Err(Error::MaskGeometry(format!(
                "{} words for {total} blocks",
                words.len()
            )));
        }
        if !total.is_multiple_of(64) && words[words.len() - 1] >> (total % 64) != 0 {
            return Err(Error::MaskGeometry("bits set past the last block".into()));
        }
        Ok(Self::from_parts(block_rows, block_cols, m_blk, k_blk, words))
    }

    pub fn full(block_rows: usize, block_cols: usize, m_blk: usize, k_blk: usize) -> Result<Self> {
        Self::from_fn(block_rows, block_cols, m_blk, k_blk, |_, _| true)
    }

    pub fn empty(block_rows: usize, block_cols: usize, m_blk: usize, k_blk: usize) -> Result<Self> {
        Self::from_fn(block_rows, block_cols, m_blk, k_blk, |_, _| false)
    }

    /// Samples an i.i.d. Bernoulli(1 - p) keep bit per block of a
    /// `rows x cols` activation. The bit for block `(r, c)` depends only on
    /// `(seed, r, c)`.
    pub fn sample(spec: &DropoutSpec, rows: usize, cols: usize) -> Result<Self> {
        spec.validate()?;
        divides("rows", rows, spec.m_blk)?;
        divides("cols", cols, spec.k_blk)?;
        let (seed, p) = (spec.seed, spec.p);
        Self::from_fn(rows / spec.m_blk, cols / spec.k_blk, spec.m_blk, spec.k_blk, |r, c| {
            rng::keep(seed, r as u64, c as u64, p)
        })
    }

    pub fn block_rows(&self) -> usize {
        self.block_rows
    }

    pub fn block_cols(&self) -> usize {
        self.block_cols
    }

    pub fn m_blk(&self) -> usize {
        self.m_blk
    }

    pub fn k_blk(&self) -> usize {
        self.k_blk
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn keep_count(&self) -> usize {
        self.keep_count
    }

    pub fn total_blocks(&self) -> usize {
        self.block_rows * self.block_cols
    }

    /// Element shape `(rows, cols)` of the activation this mask covers.
    pub fn element_shape(&self) -> (usize, usize) {
        (self.block_rows * self.m_blk, self.block_cols * self.k_blk)
    }

    /// Fraction of dropped blocks.
    pub fn realized_sparsity(&self) -> f64 {
        1.0 - self.keep_count as f64 / self.total_blocks() as f64
    }

    #[inline]
    pub fn is_kept(&self, r: usize, c: usize) -> bool {
        debug_assert!(r < self.block_rows && c < self.block_cols);
        let b = r * self.block_cols + c;
        self.words[b / 64] >> (b % 64) & 1 == 1
    }

    /// Kept block columns of `block_row`, in increasing order.
    pub fn kept_blocks_in_row(&self, block_row: usize) -> Result<Vec<usize>> {
        if block_row >= self.block_rows {
            return Err(Error::OutOfRange {
                what: "block row",
                index: block_row,
                len: self.block_rows,
            });
        }
        Ok(self.kept_in_row(block_row).collect())
    }

    /// Walks the set bits of one row word by word.
    pub(crate) fn kept_in_row(&self, block_row: usize) -> KeptBlocks<'_> {
        let start = block_row * self.block_cols;
        KeptBlocks {
            words: &self.words,
            start,
            end: start + self.block_cols,
            word_idx: start / 64,
            current: self.words.get(start / 64).map_or(0, |w| w & (!0u64 << (start % 64))),
        }
    }

    /// The logical elementwise 0/1 mask.
    pub fn expand<T: Scalar>(&self) -> Matrix<T> {
        let (rows, cols) = self.element_shape();
        Matrix::from_fn(rows, cols, |i, j| {
            if self.is_kept(i / self.m_blk, j / self.k_blk) {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Packs an elementwise 0/1 mask back into blocks. Every block must be
    /// uniformly zero or uniformly non-zero.
    pub fn from_dense<T: Scalar>(mask: &Matrix<T>, m_blk: usize, k_blk: usize) -> Result<Self> {
        divides("rows", mask.rows(), m_blk)?;
        divides("cols", mask.cols(), k_blk)?;
        let block_rows = mask.rows() / m_blk;
        let block_cols = mask.cols() / k_blk;
        let mut uniform = true;
        let mut keep = vec![false; block_rows * block_cols];
        for r in 0..block_rows {
            for c in 0..block_cols {
                let first = mask.get(r * m_blk, c * k_blk) != T::zero();
                for i in r * m_blk..(r + 1) * m_blk {
                    for j in c * k_blk..(c + 1) * k_blk {
                        uniform &= (mask.get(i, j) != T::zero()) == first;
                    }
                }
                keep[r * block_cols + c] = first;
            }
        }
        if !uniform {
            return Err(Error::MaskGeometry(format!(
                "elementwise mask is not constant over {m_blk}x{k_blk} blocks"
            )));
        }
        Self::from_fn(block_rows, block_cols, m_blk, k_blk, |r, c| keep[r * block_cols + c])
    }

    /// Re-expresses the mask with blocks `(m_blk / split_m, k_blk / split_k)`,
    /// repeating each bit `split_m x split_k` times. The elementwise mask is
    /// unchanged.
    pub fn retile(&self, split_m: usize, split_k: usize) -> Result<Self> {
        divides("m_blk", self.m_blk, split_m)?;
        divides("k_blk", self.k_blk, split_k)?;
        if split_m == 1 && split_k == 1 {
            return Ok(self.clone());
        }
        Self::from_fn(
            self.block_rows * split_m,
            self.block_cols * split_k,
            self.m_blk / split_m,
            self.k_blk / split_k,
            |r, c| self.is_kept(r / split_m, c / split_k),
        )
    }

    /// Mask of the transposed activation: grid `(block_cols, block_rows)`,
    /// blocks `(k_blk, m_blk)`.
    pub fn transpose(&self) -> Self {
        Self::from_fn(
            self.block_cols,
            self.block_rows,
            self.k_blk,
            self.m_blk,
            |r, c| self.is_kept(c, r),
        )
        .expect("transposed geometry is valid")
    }

    /// The block grid as rows of `0`/`1` characters.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity(self.total_blocks() + self.block_rows);
        for r in 0..self.block_rows {
            for c in 0..self.block_cols {
                out.push(if self.is_kept(r, c) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn stats(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "grid: {}x{}", self.block_rows, self.block_cols);
        let _ = writeln!(s, "block: {}x{}", self.m_blk, self.k_blk);
        let _ = writeln!(s, "keep_count: {}", self.keep_count);
        let _ = writeln!(s, "total_blocks: {}", self.total_blocks());
        let _ = writeln!(s, "realized_sparsity: {}", self.realized_sparsity());
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + 8 * self.words.len());
        out.extend_from_slice(MASK_MAGIC);
        out.push(MASK_VERSION);
        for v in [self.block_rows, self.block_cols, self.m_blk, self.k_blk] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 21 {
            return Err(Error::MaskFormat(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MASK_MAGIC {
            return Err(Error::MaskFormat(format!("bad magic {:?}", &bytes[..4])));
        }
        if bytes[4] != MASK_VERSION {
            return Err(Error::MaskFormat(format!("unsupported version {:#04x}", bytes[4])));
        }
        let field = |i: usize| {
            let o = 5 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
        };
        let (block_rows, block_cols, m_blk, k_blk) = (field(0), field(1), field(2), field(3));
        let payload = &bytes[21..];
        let expected = word_count(block_rows * block_cols) * 8;
        if payload.len() != expected {
            return Err(Error::MaskFormat(format!(
                "expected {expected} payload bytes, found {}",
                payload.len()
            )));
        }
        let words = payload
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_words(block_rows, block_cols, m_blk, k_blk, words)
            .map_err(|e| Error::MaskFormat(e.to_string()))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::MaskFormat(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Iterator over the kept block columns of one mask row.
pub(crate) struct KeptBlocks<'a> {
    words: &'a [u64],
    start: usize,
    end: usize,
    word_idx: usize,
    current: u64,
}

impl Iterator for KeptBlocks<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        loop {
            if self.current != 0 {
                let b = self.word_idx * 64 + self.current.trailing_zeros() as usize;
                if b >= self.end {
                    return None;
                }
                self.current &= self.current - 1;
                return Some(b - self.start);
            }
            self.word_idx += 1;
            if self.word_idx * 64 >= self.end {
                return None;
            }
            self.current = self.words[self.word_idx];
        }
    }
}
