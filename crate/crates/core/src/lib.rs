//! Structured block-sparse dropout fused with tiled matrix multiplication.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense row-major [`Matrix`] storage and elementwise helpers.
//! - [`rng`]: the counter-based hash used for every random keep/drop decision.
//! - [`blockmask`]: bit-packed block masks, retiling and the `BMSK` file format.
//! - [`gemm`]: the dense, `dsd` and `sdd` tiled kernels sharing one accumulation order.
//! - [`layer`]: the dropout + linear layer variants with manual backward.
//! - [`gradcheck`]: central finite-difference checks of the layer gradients.
//! - [`trainer`]: a small MLP classifier harness, dataset loaders and p-sweeps.
//! - [`bench`]: timing harness and CSV output.
//!
//! Tile-level parallelism comes from rayon when the `parallel` feature is
//! enabled (the default). Results are bitwise identical with or without it.

pub mod bench;
pub mod blockmask;
mod error;
pub mod gemm;
pub mod gradcheck;
pub mod layer;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use blockmask::{BlockMask, DropoutSpec, TileConfig};
pub use error::{Error, Result};
pub use gemm::{dense_gemm, dsd_matmul, sdd_matmul, GemmProblem, KernelKind, WorkStats};
pub use layer::{LayerContext, LayerMask, LinearKind, LinearVariant};
pub use tensor::{Matrix, Scalar};

/// Library version echoed into training reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
