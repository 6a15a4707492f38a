//! A ReLU MLP whose every linear layer is one [`LinearVariant`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blockmask::{DropoutSpec, TileConfig};
use crate::error::Result;
use crate::layer::{LayerContext, LinearKind, LinearVariant};
use crate::rng;
use crate::tensor::Matrix;

/// Tile width used along N when the layer width allows it.
const N_BLK_CAP: usize = 32;

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<LinearVariant<f32>>,
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, seed: u64) -> Matrix<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit))
}

impl Mlp {
    /// `widths` lists every activation width, input first, logits last.
    pub fn new(
        kind: LinearKind,
        widths: &[usize],
        p: f64,
        m_blk: usize,
        k_blk: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weight = glorot_uniform(fan_in, fan_out, rng::hash2(seed, i as u64));
            let spec = DropoutSpec::new(p, m_blk, k_blk, seed)?;
            let tiles = TileConfig::new(m_blk, largest_divisor_at_most(fan_out, N_BLK_CAP), k_blk)?;
            layers.push(LinearVariant::new(kind, weight, spec, tiles)?.with_layer_index(i as u64));
        }
        Ok(Self { layers })
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_features())
    }

    /// Logits for a batch in inference mode.
    pub fn predict(&self, x: &Matrix<f32>) -> Result<Matrix<f32>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, _) = layer.forward(&h, false, 0)?;
            h = if i + 1 < self.layers.len() { relu(&y) } else { y };
        }
        Ok(h)
    }

    /// Mean cross-entropy and accuracy over `x` in inference mode.
    pub fn evaluate(&self, x: &Matrix<f32>, labels: &[u8], batch: usize) -> Result<(f64, f64)> {
        let (n, dim) = x.shape();
        let mut loss = 0.0;
        let mut correct = 0usize;
        for start in (0..n).step_by(batch.max(1)) {
            let end = (start + batch).min(n);
            let xb = Matrix::new(end - start, dim, x.data()[start * dim..end * dim].to_vec())?;
            let logits = self.predict(&xb)?;
            let (l, _) = softmax_cross_entropy(&logits, &labels[start..end]);
            loss += l * (end - start) as f64;
            correct += (0..end - start)
                .filter(|&i| argmax(logits.row(i)) == labels[start + i] as usize)
                .count();
        }
        Ok((loss / n as f64, correct as f64 / n as f64))
    }

    /// One SGD step on a batch; returns the training loss (dropout active).
    pub fn train_step(&mut self, x: &Matrix<f32>, labels: &[u8], step_seed: u64, lr: f32) -> Result<f64> {
        let depth = self.layers.len();
        let mut ctxs: Vec<LayerContext<f32>> = Vec::with_capacity(depth);
        let mut pre_acts: Vec<Matrix<f32>> = Vec::with_capacity(depth - 1);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, ctx) = layer.forward(&h, true, step_seed)?;
            ctxs.push(ctx);
            if i + 1 < depth {
                h = relu(&y);
                pre_acts.push(y);
            } else {
                h = y;
            }
        }
        let (loss, mut grad) = softmax_cross_entropy(&h, labels);

        // All gradients are computed before any weight changes.
        let mut weight_grads = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            let (dx, dw) = self.layers[i].backward(&ctxs[i], &grad)?;
            weight_grads.push(dw);
            if i > 0 {
                grad = dx.zip_with(&pre_acts[i - 1], |g, z| if z > 0.0 { g } else { 0.0 })?;
            }
        }
        for (layer, dw) in self.layers.iter_mut().rev().zip(&weight_grads) {
            for (w, g) in layer.weight.data_mut().iter_mut().zip(dw.data()) {
                *w -= lr * g;
            }
        }
        Ok(loss)
    }
}

pub fn relu(x: &Matrix<f32>) -> Matrix<f32> {
    x.map(|v| v.max(0.0))
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Matrix<f32>, labels: &[u8]) -> (f64, Matrix<f32>) {
    let (b, c) = logits.shape();
    let mut grad = Matrix::zeros(b, c);
    let mut total = 0.0f64;
    for (i, &label) in labels.iter().enumerate().take(b) {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = row.iter().map(|&z| (z as f64 - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[label as usize] as f64;
        for (j, &z) in row.iter().enumerate() {
            let prob = (z as f64 - log_z).exp();
            let target = if j == label as usize { 1.0 } else { 0.0 };
            grad.set(i, j, ((prob - target) / b as f64) as f32);
        }
    }
    (total / b as f64, grad)
}
