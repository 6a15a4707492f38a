//! The fused dropout + linear layer and its two baselines.
//!
//! All variants compute `Y = X W` with `X: M x K` and `W: K x N`, no bias.
//! With dropout active and `s = 1 / (1 - p)`:
//!
//! ```text
//! Y     = s (X ⊙ m) W
//! dL/dX = s (dL/dY Wᵀ) ⊙ m
//! dL/dW = s (X ⊙ m)ᵀ dL/dY
//! ```
//!
//! [`LinearKind::SparseDrop`] uses a block mask whose blocks coincide with the
//! GEMM tiles, so the forward and weight-gradient products are `dsd` kernels
//! and the input gradient is an `sdd` kernel. The same mask object, kept in
//! the [`LayerContext`], feeds all three products.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blockmask::{BlockMask, DropoutSpec, TileConfig};
use crate::error::{Error, Result};
use crate::gemm::{self, GemmProblem, KernelKind, WorkStats};
use crate::rng;
use crate::tensor::{Matrix, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinearKind {
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "dropout_dense")]
    DropoutDense,
    #[serde(rename = "sparsedrop")]
    SparseDrop,
}

impl LinearKind {
    pub const ALL: [LinearKind; 3] = [LinearKind::Dense, LinearKind::DropoutDense, LinearKind::SparseDrop];

    pub fn as_str(self) -> &'static str {
        match self {
            LinearKind::Dense => "dense",
            LinearKind::DropoutDense => "dropout_dense",
            LinearKind::SparseDrop => "sparsedrop",
        }
    }
}

impl fmt::Display for LinearKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LinearKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LinearKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown layer variant {s:?}")))
    }
}

/// The mask a forward pass drew, kept for the matching backward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerMask<T: Scalar> {
    /// No dropout was applied (dense variant or inference).
    None,
    /// Per-element 0/1 mask.
    Elementwise(Matrix<T>),
    Block(BlockMask),
}

#[derive(Clone, Debug)]
pub struct LayerContext<T: Scalar> {
    pub input: Matrix<T>,
    pub mask: LayerMask<T>,
    pub step_seed: u64,
    /// K-block visits of the forward product.
    pub forward_work: WorkStats,
}

/// Work done by the two backward products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardWork {
    pub dx: WorkStats,
    pub dw: WorkStats,
}

#[derive(Clone, Debug)]
pub struct LinearVariant<T: Scalar = f32> {
    pub kind: LinearKind,
    /// `K x N` weight.
    pub weight: Matrix<T>,
    /// Ignored by [`LinearKind::Dense`].
    pub spec: DropoutSpec,
    pub tiles: TileConfig,
    /// Mixed into the mask seed so stacked layers draw independent masks.
    pub layer_index: u64,
    /// Run the forward `dsd` on half-width K-blocks and the weight-gradient
    /// `dsd` on half-height M-blocks, via [`BlockMask::retile`].
    pub block_split: bool,
}

impl<T: Scalar> LinearVariant<T> {
    pub fn new(kind: LinearKind, weight: Matrix<T>, spec: DropoutSpec, tiles: TileConfig) -> Result<Self> {
        spec.validate()?;
        if kind == LinearKind::SparseDrop {
            if spec.m_blk != tiles.m_blk || spec.k_blk != tiles.k_blk {
                return Err(Error::Config(format!(
                    "mask blocks {}x{} must equal the GEMM tiles {}x{}",
                    spec.m_blk, spec.k_blk, tiles.m_blk, tiles.k_blk
                )));
            }
            crate::blockmask::divides("K", weight.rows(), tiles.k_blk)?;
        }
        crate::blockmask::divides("N", weight.cols(), tiles.n_blk)?;
        Ok(Self {
            kind,
            weight,
            spec,
            tiles,
            layer_index: 0,
            block_split: false,
        })
    }

    pub fn with_layer_index(mut self, index: u64) -> Self {
        self.layer_index = index;
        self
    }

    pub fn with_block_split(mut self, on: bool) -> Self {
        self.block_split = on;
        self
    }

    pub fn in_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_features(&self) -> usize {
        self.weight.cols()
    }

    /// `1 / (1 - p)` from the nominal rate.
    pub fn keep_scale(&self) -> T {
        T::from_f64_lossy(self.spec.keep_scale())
    }

    pub fn mask_seed(&self, step_seed: u64) -> u64 {
        rng::mix_seed(self.spec.seed, step_seed, self.layer_index)
    }

    /// Draws the mask a training forward pass with `step_seed` would use.
    pub fn sample_mask(&self, rows: usize, step_seed: u64) -> Result<LayerMask<T>> {
        let seed = self.mask_seed(step_seed);
        let cols = self.in_features();
        match self.kind {
            LinearKind::Dense => Ok(LayerMask::None),
            LinearKind::DropoutDense => {
                let p = self.spec.p;
                Ok(LayerMask::Elementwise(Matrix::from_fn(rows, cols, |i, j| {
                    if rng::keep(seed, i as u64, j as u64, p) {
                        T::one()
                    } else {
                        T::zero()
                    }
                })))
            }
            LinearKind::SparseDrop => Ok(LayerMask::Block(BlockMask::sample(
                &self.spec.with_seed(seed),
                rows,
                cols,
            )?)),
        }
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.cols() != self.in_features() {
            return Err(Error::ShapeMismatch {
                left: x.shape(),
                right: self.weight.shape(),
            });
        }
        Ok(())
    }

    fn dense_tiles(&self, m: usize, n: usize, k: usize) -> TileConfig {
        self.tiles.fit(m, n, k)
    }

    /// Forward pass. With `train` off every variant computes `x W`.
    pub fn forward(&self, x: &Matrix<T>, train: bool, step_seed: u64) -> Result<(Matrix<T>, LayerContext<T>)> {
        self.check_input(x)?;
        let mask = if train {
            self.sample_mask(x.rows(), step_seed)?
        } else {
            LayerMask::None
        };
        self.forward_with_mask(x, mask, step_seed)
    }

    /// Forward pass with an explicitly supplied mask.
    pub fn forward_with_mask(
        &self,
        x: &Matrix<T>,
        mask: LayerMask<T>,
        step_seed: u64,
    ) -> Result<(Matrix<T>, LayerContext<T>)> {
        self.check_input(x)?;
        let (m, k, n) = (x.rows(), self.in_features(), self.out_features());
        let (y, work) = match &mask {
            LayerMask::None => gemm::dense_gemm_with_stats(x, &self.weight, self.dense_tiles(m, n, k))?,
            LayerMask::Elementwise(e) => {
                let (y, w) = gemm::dense_gemm_with_stats(&x.elementwise_mul(e)?, &self.weight, self.dense_tiles(m, n, k))?;
                (y.scale(self.keep_scale()), w)
            }
            LayerMask::Block(bm) => {
                let (mask, tiles) = self.forward_geometry(bm)?;
                gemm::dsd_matmul_with_stats(x, &mask, &self.weight, self.keep_scale(), tiles)?
            }
        };
        Ok((
            y,
            LayerContext {
                input: x.clone(),
                mask,
                step_seed,
                forward_work: work,
            },
        ))
    }

    fn forward_geometry(&self, mask: &BlockMask) -> Result<(BlockMask, TileConfig)> {
        if self.block_split {
            let tiles = TileConfig {
                k_blk: self.tiles.k_blk / 2,
                ..self.tiles
            };
            Ok((mask.retile(1, 2)?, tiles))
        } else {
            Ok((mask.clone(), self.tiles))
        }
    }

    /// Mask and tiles of the `(K, N, M)` weight-gradient problem.
    fn dw_geometry(&self, mask: &BlockMask) -> Result<(BlockMask, TileConfig)> {
        let t = self.tiles;
        if self.block_split {
            let tiles = TileConfig {
                m_blk: t.k_blk,
                n_blk: t.n_blk,
                k_blk: t.m_blk / 2,
            };
            Ok((mask.retile(2, 1)?.transpose(), tiles))
        } else {
            let tiles = TileConfig {
                m_blk: t.k_blk,
                n_blk: t.n_blk,
                k_blk: t.m_blk,
            };
            Ok((mask.transpose(), tiles))
        }
    }

    /// Tiles of the `(M, K, N)` input-gradient `sdd` problem: the output is
    /// tiled exactly like the mask and the inner dimension `N` by `n_blk`.
    fn dx_tiles(&self) -> TileConfig {
        TileConfig {
            m_blk: self.tiles.m_blk,
            n_blk: self.tiles.k_blk,
            k_blk: self.tiles.n_blk,
        }
    }

    pub fn backward(&self, ctx: &LayerContext<T>, dy: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        self.backward_with_work(ctx, dy).map(|(dx, dw, _)| (dx, dw))
    }

    pub fn backward_with_work(
        &self,
        ctx: &LayerContext<T>,
        dy: &Matrix<T>,
    ) -> Result<(Matrix<T>, Matrix<T>, BackwardWork)> {
        let x = &ctx.input;
        let (m, k, n) = (x.rows(), self.in_features(), self.out_features());
        if x.cols() != k {
            return Err(Error::Context(format!("saved input is {:?}, weight is {:?}", x.shape(), self.weight.shape())));
        }
        if dy.shape() != (m, n) {
            return Err(Error::ShapeMismatch {
                left: dy.shape(),
                right: (m, n),
            });
        }
        let wt = self.weight.transpose();
        match (&ctx.mask, self.kind) {
            (LayerMask::None, _) => {
                let (dx, wdx) = gemm::dense_gemm_with_stats(dy, &wt, dx_dense_tiles(self.tiles, m, n, k))?;
                let (dw, wdw) = gemm::dense_gemm_with_stats(&x.transpose(), dy, dw_dense_tiles(self.tiles, m, n, k))?;
                Ok((dx, dw, BackwardWork { dx: wdx, dw: wdw }))
            }
            (LayerMask::Elementwise(e), LinearKind::DropoutDense) => {
                if e.shape() != x.shape() {
                    return Err(Error::Context(format!("mask {:?} vs input {:?}", e.shape(), x.shape())));
                }
                let s = self.keep_scale();
                let (g, wdx) = gemm::dense_gemm_with_stats(dy, &wt, dx_dense_tiles(self.tiles, m, n, k))?;
                // Select rather than multiply so dropped entries are +0, as in `sdd`.
                let dx = g.scale(s).zip_with(e, |v, keep| if keep == T::zero() { T::zero() } else { v })?;
                let (dw, wdw) =
                    gemm::dense_gemm_with_stats(&x.elementwise_mul(e)?.transpose(), dy, dw_dense_tiles(self.tiles, m, n, k))?;
                Ok((dx, dw.scale(s), BackwardWork { dx: wdx, dw: wdw }))
            }
            (LayerMask::Block(bm), LinearKind::SparseDrop) => {
                if bm.element_shape() != x.shape() {
                    return Err(Error::Context(format!(
                        "mask covers {:?}, input is {:?}",
                        bm.element_shape(),
                        x.shape()
                    )));
                }
                let s = self.keep_scale();
                let (dx, wdx) = gemm::sdd_matmul_with_stats(dy, &wt, bm, s, self.dx_tiles())?;
                let (mask_t, tiles_t) = self.dw_geometry(bm)?;
                let (dw, wdw) = gemm::dsd_matmul_with_stats(&x.transpose(), &mask_t, dy, s, tiles_t)?;
                Ok((dx, dw, BackwardWork { dx: wdx, dw: wdw }))
            }
            (mask, kind) => Err(Error::Context(format!(
                "{kind} layer cannot use a {} mask",
                match mask {
                    LayerMask::None => "missing",
                    LayerMask::Elementwise(_) => "elementwise",
                    LayerMask::Block(_) => "block",
                }
            ))),
        }
    }

    /// Expected K-block visits for the three products of a sparse layer
    /// given its mask; `None` for non-block masks.
    pub fn predicted_work(&self, ctx: &LayerContext<T>) -> Result<Option<(WorkStats, BackwardWork)>> {
        let LayerMask::Block(bm) = &ctx.mask else {
            return Ok(None);
        };
        let (m, k, n) = (ctx.input.rows(), self.in_features(), self.out_features());
        let (fmask, ftiles) = self.forward_geometry(bm)?;
        let fwd = GemmProblem::new(m, n, k, ftiles)?;
        let dxp = GemmProblem::new(m, k, n, self.dx_tiles())?;
        let (wmask, wtiles) = self.dw_geometry(bm)?;
        let dwp = GemmProblem::new(k, n, m, wtiles)?;
        let visits = |p, mask, kind| WorkStats {
            kblock_visits: gemm::expected_visits(p, mask, kind),
        };
        Ok(Some((
            visits(&fwd, &fmask, KernelKind::Dsd),
            BackwardWork {
                dx: visits(&dxp, bm, KernelKind::Sdd),
                dw: visits(&dwp, &wmask, KernelKind::Dsd),
            },
        )))
    }

    /// Mean and standard error of `n_samples` training forwards with step
    /// seeds `0..n_samples`.
    pub fn forward_moments(&self, x: &Matrix<T>, n_samples: usize) -> Result<MonteCarloMoments> {
        if n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        let len = x.rows() * self.out_features();
        let mut sum = vec![0.0f64; len];
        let mut sum_sq = vec![0.0f64; len];
        for step in 0..n_samples as u64 {
            let (y, _) = self.forward(x, true, step)?;
            for ((s, q), v) in sum.iter_mut().zip(&mut sum_sq).zip(y.data()) {
                let v = v.to_f64().unwrap_or(f64::NAN);
                *s += v;
                *q += v * v;
            }
        }
        let n = n_samples as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std_error = if n_samples > 1 {
            sum_sq
                .iter()
                .zip(&mean)
                .map(|(q, mu)| ((q / n - mu * mu).max(0.0) * n / (n - 1.0) / n).sqrt())
                .collect()
        } else {
            vec![f64::INFINITY; len]
        };
        let shape = (x.rows(), self.out_features());
        Ok(MonteCarloMoments {
            mean: Matrix::new(shape.0, shape.1, mean)?,
            std_error: Matrix::new(shape.0, shape.1, std_error)?,
        })
    }

    /// Monte Carlo estimate of `E[forward(x, train = true)]`.
    pub fn expectation_check(&self, x: &Matrix<T>, n_samples: usize) -> Result<Matrix<T>> {
        Ok(self.forward_moments(x, n_samples)?.mean.convert())
    }
}

#[derive(Clone, Debug)]
pub struct MonteCarloMoments {
    pub mean: Matrix<f64>,
    pub std_error: Matrix<f64>,
}

fn gcd_fit(blk: usize, dim: usize) -> usize {
    crate::blockmask::gcd(blk, dim)
}

fn dx_dense_tiles(t: TileConfig, m: usize, n: usize, k: usize) -> TileConfig {
    TileConfig {
        m_blk: gcd_fit(t.m_blk, m),
        n_blk: gcd_fit(t.k_blk, k),
        k_blk: gcd_fit(t.n_blk, n),
    }
}

fn dw_dense_tiles(t: TileConfig, m: usize, n: usize, k: usize) -> TileConfig {
    TileConfig {
        m_blk: gcd_fit(t.k_blk, k),
        n_blk: gcd_fit(t.n_blk, n),
        k_blk: gcd_fit(t.m_blk, m),
    }
}
