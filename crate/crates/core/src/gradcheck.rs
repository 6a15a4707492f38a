//! Central finite-difference checks of the layer gradients.
//!
//! The loss is `L = sum(Y ⊙ R)` for a fixed random `R`, so `dL/dY = R`. For
//! a fixed mask `L` is linear in both `X` and `W`, which makes central
//! differences exact up to rounding. Each perturbed forward reuses the step
//! seed of the analytic pass and therefore the same mask.

use std::fmt;

use crate::blockmask::{DropoutSpec, TileConfig};
use crate::error::Result;
use crate::layer::{LinearKind, LinearVariant};
use crate::rng;
use crate::tensor::Matrix;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckCase {
    pub kind: LinearKind,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub m_blk: usize,
    pub k_blk: usize,
    pub n_blk: usize,
    pub p: f64,
    pub seed: u64,
}

impl fmt::Display for GradcheckCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} M={} K={} N={} blocks={}x{} n_blk={} p={} seed={}",
            self.kind, self.m, self.k, self.n, self.m_blk, self.k_blk, self.n_blk, self.p, self.seed
        )
    }
}

const SIZES: [usize; 8] = [8, 16, 24, 32, 40, 48, 56, 64];
const BLOCKS: [usize; 3] = [1, 2, 4];
const RATES: [f64; 5] = [0.1, 0.3, 0.5, 0.6, 0.7];

impl GradcheckCase {
    /// A random geometry: sizes from `{8, 16, .., 64}`, mask blocks from
    /// `{1, 2, 4}`. `p` is drawn from a fixed list unless given.
    pub fn random(kind: LinearKind, seed: u64, p: Option<f64>) -> Self {
        let pick = |salt: u64, n: usize| (rng::hash2(seed, salt) % n as u64) as usize;
        Self {
            kind,
            m: SIZES[pick(1, SIZES.len())],
            k: SIZES[pick(2, SIZES.len())],
            n: SIZES[pick(3, SIZES.len())],
            m_blk: BLOCKS[pick(4, BLOCKS.len())],
            k_blk: BLOCKS[pick(5, BLOCKS.len())],
            n_blk: 8,
            p: p.unwrap_or(RATES[pick(6, RATES.len())]),
            seed,
        }
    }

    pub fn layer(&self) -> Result<LinearVariant<f64>> {
        let weight = Matrix::<f64>::random(self.k, self.n, rng::hash2(self.seed, 10));
        let spec = DropoutSpec::new(self.p, self.m_blk, self.k_blk, rng::hash2(self.seed, 11))?;
        let tiles = TileConfig::new(self.m_blk, self.n_blk, self.k_blk)?;
        LinearVariant::new(self.kind, weight, spec, tiles)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOutcome {
    pub case: GradcheckCase,
    pub max_rel_dx: f64,
    pub max_rel_dw: f64,
}

impl GradcheckOutcome {
    pub fn max_rel(&self) -> f64 {
        self.max_rel_dx.max(self.max_rel_dw)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel() < tolerance
    }
}

/// Knobs for negative controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Multiplies the analytic `dW` before comparison; 1 for a real check.
    pub dw_factor: f64,
    /// Step seed for the analytic backward. `None` reuses the forward seed;
    /// anything else reruns the forward with a different mask.
    pub backward_step_seed: Option<u64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            dw_factor: 1.0,
            backward_step_seed: None,
        }
    }
}

/// `|a - f| / max(1, |a|, |f|)`: relative for entries of magnitude above
/// one, absolute below.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn max_rel(analytic: &Matrix<f64>, numeric: &[f64]) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric)
        .map(|(&a, &f)| rel_error(a, f))
        .fold(0.0, f64::max)
}

fn loss(y: &Matrix<f64>, r: &Matrix<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

pub fn check_case(case: &GradcheckCase, opts: GradcheckOptions) -> Result<GradcheckOutcome> {
    let mut layer = case.layer()?;
    let x = Matrix::<f64>::random(case.m, case.k, rng::hash2(case.seed, 12));
    let r = Matrix::<f64>::random(case.m, case.n, rng::hash2(case.seed, 13));
    let step_seed = rng::hash2(case.seed, 14);

    let backward_seed = opts.backward_step_seed.unwrap_or(step_seed);
    let (_, ctx) = layer.forward(&x, true, backward_seed)?;
    let (dx, dw) = layer.backward(&ctx, &r)?;
    let dw = dw.scale(opts.dw_factor);

    let h = opts.step;
    let mut xp = x.clone();
    let mut num_dx = vec![0.0; x.data().len()];
    for (idx, slot) in num_dx.iter_mut().enumerate() {
        let orig = xp.data()[idx];
        xp.data_mut()[idx] = orig + h;
        let plus = loss(&layer.forward(&xp, true, step_seed)?.0, &r);
        xp.data_mut()[idx] = orig - h;
        let minus = loss(&layer.forward(&xp, true, step_seed)?.0, &r);
        xp.data_mut()[idx] = orig;
        *slot = (plus - minus) / (2.0 * h);
    }

    let mut num_dw = vec![0.0; layer.weight.data().len()];
    for (idx, slot) in num_dw.iter_mut().enumerate() {
        let orig = layer.weight.data()[idx];
        layer.weight.data_mut()[idx] = orig + h;
        let plus = loss(&layer.forward(&x, true, step_seed)?.0, &r);
        layer.weight.data_mut()[idx] = orig - h;
        let minus = loss(&layer.forward(&x, true, step_seed)?.0, &r);
        layer.weight.data_mut()[idx] = orig;
        *slot = (plus - minus) / (2.0 * h);
    }

    Ok(GradcheckOutcome {
        case: *case,
        max_rel_dx: max_rel(&dx, &num_dx),
        max_rel_dw: max_rel(&dw, &num_dw),
    })
}

/// Runs `trials` random cases per variant, seeded from `seed`.
pub fn run_suite(
    kinds: &[LinearKind],
    seed: u64,
    trials: usize,
    p: Option<f64>,
    opts: GradcheckOptions,
) -> Result<Vec<GradcheckOutcome>> {
    let mut out = Vec::with_capacity(kinds.len() * trials);
    for &kind in kinds {
        for t in 0..trials as u64 {
            let case = GradcheckCase::random(kind, rng::hash3(seed, t, kind as u64), p);
            out.push(check_case(&case, opts)?);
        }
    }
    Ok(out)
}
