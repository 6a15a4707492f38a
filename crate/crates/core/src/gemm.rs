//! Tiled GEMM kernels.
//!
//! All three kernels share one accumulation order, which is what makes the
//! masked-oracle tests bitwise:
//!
//! 1. The output is split into `m_blk x n_blk` tiles. Tile rows are the unit
//!    of parallel work; tiles never share an accumulator.
//! 2. Each tile owns a zeroed `m_blk x n_blk` accumulator. K-blocks are
//!    visited in increasing index order.
//! 3. Inside a K-block the loop order is `i` (tile row), then `k`, then `j`,
//!    i.e. `acc[i][j] += a[i][k] * b[k][j]` with `k` increasing.
//! 4. The accumulator is written out once, multiplied by the kernel scale
//!    (plain copy for [`dense_gemm`]).
//!
//! Skipping a K-block whose `a` values are all zero only removes additions
//! of exact zeros, so [`dsd_matmul`] matches the dense kernel applied to the
//! zero-masked input bit for bit.

use crate::blockmask::{BlockMask, TileConfig};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Matrix, Scalar};

/// A GEMM of size `(m, n, k)`: `(m x k) * (k x n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GemmProblem {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub tiles: TileConfig,
}

impl GemmProblem {
    pub fn new(m: usize, n: usize, k: usize, tiles: TileConfig) -> Result<Self> {
        tiles.check(m, n, k)?;
        Ok(Self { m, n, k, tiles })
    }

    pub fn dense_flops(&self) -> u64 {
        2 * (self.m * self.n * self.k) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    /// Sparse input, dense input, dense output.
    Dsd,
    /// Dense inputs, sparse output.
    Sdd,
}

/// Instrumentation counters returned by the `*_with_stats` kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WorkStats {
    /// Number of `(output tile, K-block)` pairs multiplied.
    pub kblock_visits: u64,
}

impl WorkStats {
    pub fn merge(self, other: Self) -> Self {
        Self {
            kblock_visits: self.kblock_visits + other.kblock_visits,
        }
    }
}

fn shape_problem<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, tiles: TileConfig) -> Result<GemmProblem> {
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    GemmProblem::new(a.rows(), b.cols(), a.cols(), tiles)
}

/// `acc += a[row0.., k0..k0+kb] * b[k0..k0+kb, col0..]` for one tile.
#[inline]
fn accumulate_block<T: Scalar>(
    acc: &mut [T],
    a: &Matrix<T>,
    b: &Matrix<T>,
    row0: usize,
    col0: usize,
    k0: usize,
    tiles: TileConfig,
) {
    if tiles.m_blk.is_multiple_of(MR) && tiles.n_blk.is_multiple_of(NR) {
        accumulate_block_register(acc, a, b, row0, col0, k0, tiles);
        return;
    }
    let (lda, ldb) = (a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let nb = tiles.n_blk;
    for (i, acc_row) in acc.chunks_exact_mut(nb).enumerate() {
        let a_row = &ad[(row0 + i) * lda + k0..][..tiles.k_blk];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &bd[(k0 + kk) * ldb + col0..][..nb];
            for (c, &bv) in acc_row.iter_mut().zip(b_row) {
                *c += aik * bv;
            }
        }
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// Same arithmetic as the scalar path, with an `MR x NR` slice of the
/// accumulator held in registers across the K-block. Each element still sees
/// `c += a * b` with `k` increasing, so the two paths agree bitwise.
#[inline]
fn accumulate_block_register<T: Scalar>(
    acc: &mut [T],
    a: &Matrix<T>,
    b: &Matrix<T>,
    row0: usize,
    col0: usize,
    k0: usize,
    tiles: TileConfig,
) {
    let (lda, ldb) = (a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let (nb, kb) = (tiles.n_blk, tiles.k_blk);
    for i0 in (0..tiles.m_blk).step_by(MR) {
        let a_rows: [&[T]; MR] = std::array::from_fn(|r| &ad[(row0 + i0 + r) * lda + k0..][..kb]);
        for j0 in (0..nb).step_by(NR) {
            let mut c = [[T::zero(); NR]; MR];
            for (r, row) in c.iter_mut().enumerate() {
                row.copy_from_slice(&acc[(i0 + r) * nb + j0..][..NR]);
            }
            for kk in 0..kb {
                let b_vec: &[T; NR] = bd[(k0 + kk) * ldb + col0 + j0..][..NR]
                    .try_into()
                    .expect("NR-wide slice");
                for (r, row) in c.iter_mut().enumerate() {
                    let aik = a_rows[r][kk];
                    for (cv, &bv) in row.iter_mut().zip(b_vec) {
                        *cv += aik * bv;
                    }
                }
            }
            for (r, row) in c.iter().enumerate() {
                acc[(i0 + r) * nb + j0..][..NR].copy_from_slice(row);
            }
        }
    }
}

#[inline]
fn store_tile<T: Scalar>(panel: &mut [T], acc: &[T], ldc: usize, col0: usize, nb: usize, scale: Option<T>) {
    for (i, acc_row) in acc.chunks_exact(nb).enumerate() {
        let out = &mut panel[i * ldc + col0..][..nb];
        match scale {
            Some(s) => out.iter_mut().zip(acc_row).for_each(|(o, &v)| *o = v * s),
            None => out.copy_from_slice(acc_row),
        }
    }
}

/// Shared driver. `k_blocks(I)` yields the K-blocks visited for tile row
/// `I`; `col_blocks(I)` the output tile columns computed.
fn tiled<T, KB, CB, KI, CI>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    p: GemmProblem,
    scale: Option<T>,
    col_blocks: CB,
    k_blocks: KB,
) -> (Matrix<T>, WorkStats)
where
    T: Scalar,
    CB: Fn(usize) -> CI + Sync + Send,
    CI: Iterator<Item = usize>,
    KB: Fn(usize) -> KI + Sync + Send,
    KI: Iterator<Item = usize>,
{
    let t = p.tiles;
    let mut out = Matrix::zeros(p.m, p.n);
    let visits = par::for_each_chunk(out.data_mut(), t.m_blk * p.n, |tile_row, panel| {
        let row0 = tile_row * t.m_blk;
        let mut acc = vec![T::zero(); t.m_blk * t.n_blk];
        let mut visits = 0u64;
        for tile_col in col_blocks(tile_row) {
            let col0 = tile_col * t.n_blk;
            acc.fill(T::zero());
            for kb in k_blocks(tile_row) {
                accumulate_block(&mut acc, a, b, row0, col0, kb * t.k_blk, t);
                visits += 1;
            }
            store_tile(panel, &acc, p.n, col0, t.n_blk, scale);
        }
        visits
    });
    (out, WorkStats { kblock_visits: visits })
}

/// Dense tiled GEMM `a * b`.
pub fn dense_gemm<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, tiles: TileConfig) -> Result<Matrix<T>> {
    dense_gemm_with_stats(a, b, tiles).map(|(c, _)| c)
}

pub fn dense_gemm_with_stats<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    tiles: TileConfig,
) -> Result<(Matrix<T>, WorkStats)> {
    let p = shape_problem(a, b, tiles)?;
    let (nt, kt) = (p.n / tiles.n_blk, p.k / tiles.k_blk);
    Ok(tiled(a, b, p, None, |_| 0..nt, |_| 0..kt))
}

fn check_input_mask(mask: &BlockMask, p: &GemmProblem) -> Result<()> {
    let t = p.tiles;
    if mask.m_blk() != t.m_blk
        || mask.k_blk() != t.k_blk
        || mask.block_rows() * t.m_blk != p.m
        || mask.block_cols() * t.k_blk != p.k
    {
        return Err(Error::MaskGeometry(format!(
            "input mask grid {}x{} of {}x{} blocks does not tile a {}x{} operand with m_blk={} k_blk={}",
            mask.block_rows(),
            mask.block_cols(),
            mask.m_blk(),
            mask.k_blk(),
            p.m,
            p.k,
            t.m_blk,
            t.k_blk
        )));
    }
    Ok(())
}

fn check_output_mask(mask: &BlockMask, p: &GemmProblem) -> Result<()> {
    let t = p.tiles;
    if mask.m_blk() != t.m_blk
        || mask.k_blk() != t.n_blk
        || mask.block_rows() * t.m_blk != p.m
        || mask.block_cols() * t.n_blk != p.n
    {
        return Err(Error::MaskGeometry(format!(
            "output mask grid {}x{} of {}x{} blocks does not tile a {}x{} output with m_blk={} n_blk={}",
            mask.block_rows(),
            mask.block_cols(),
            mask.m_blk(),
            mask.k_blk(),
            p.m,
            p.n,
            t.m_blk,
            t.n_blk
        )));
    }
    Ok(())
}

/// `scale * (a ⊙ expand(mask)) * b`, reading only the kept K-blocks of `a`
/// and the matching row-blocks of `b`.
pub fn dsd_matmul<T: Scalar>(
    a: &Matrix<T>,
    mask: &BlockMask,
    b: &Matrix<T>,
    scale: T,
    tiles: TileConfig,
) -> Result<Matrix<T>> {
    dsd_matmul_with_stats(a, mask, b, scale, tiles).map(|(c, _)| c)
}

pub fn dsd_matmul_with_stats<T: Scalar>(
    a: &Matrix<T>,
    mask: &BlockMask,
    b: &Matrix<T>,
    scale: T,
    tiles: TileConfig,
) -> Result<(Matrix<T>, WorkStats)> {
    let p = shape_problem(a, b, tiles)?;
    check_input_mask(mask, &p)?;
    let nt = p.n / tiles.n_blk;
    Ok(tiled(a, b, p, Some(scale), |_| 0..nt, |row| mask.kept_in_row(row)))
}

/// `scale * (a * b) ⊙ expand(mask)` where the mask lives on the `m x n`
/// output. Dropped output tiles stay zero and are never computed.
pub fn sdd_matmul<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    mask: &BlockMask,
    scale: T,
    tiles: TileConfig,
) -> Result<Matrix<T>> {
    sdd_matmul_with_stats(a, b, mask, scale, tiles).map(|(c, _)| c)
}

pub fn sdd_matmul_with_stats<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    mask: &BlockMask,
    scale: T,
    tiles: TileConfig,
) -> Result<(Matrix<T>, WorkStats)> {
    let p = shape_problem(a, b, tiles)?;
    check_output_mask(mask, &p)?;
    let kt = p.k / tiles.k_blk;
    Ok(tiled(a, b, p, Some(scale), |row| mask.kept_in_row(row), |_| 0..kt))
}

/// Multiply-add count actually executed by a masked kernel (2 flops per
/// multiply-add). The dense equivalent is [`GemmProblem::dense_flops`].
pub fn flops_effective(problem: &GemmProblem, mask: &BlockMask, kind: KernelKind) -> u64 {
    let keep = mask.keep_count() as u64;
    let t = problem.tiles;
    match kind {
        KernelKind::Dsd => 2 * (problem.n * t.m_blk * t.k_blk) as u64 * keep,
        KernelKind::Sdd => 2 * (problem.k * t.m_blk * t.n_blk) as u64 * keep,
    }
}

/// Expected K-block visits for a masked kernel: every kept block is paired
/// with `N / n_blk` output tiles (dsd) or `K / k_blk` K-blocks (sdd).
pub fn expected_visits(problem: &GemmProblem, mask: &BlockMask, kind: KernelKind) -> u64 {
    let keep = mask.keep_count() as u64;
    match kind {
        KernelKind::Dsd => (problem.n / problem.tiles.n_blk) as u64 * keep,
        KernelKind::Sdd => (problem.k / problem.tiles.k_blk) as u64 * keep,
    }
}
