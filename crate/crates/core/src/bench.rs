//! Latency benchmarks of the layer variants and their CSV form.
//!
//! Each `(method, size, sparsity)` cell runs `warmup` untimed
//! forward + backward passes, then `repeats` timed ones with a fresh mask
//! per repeat; within a method the sparsity levels take turns. Mask generation is inside the timed forward region. A 64 MiB
//! buffer is swept between repeats to evict the operands from cache.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::blockmask::{BlockMask, DropoutSpec, TileConfig};
use crate::error::{Error, Result};
use crate::gemm::{self, WorkStats};
use crate::layer::{LinearKind, LinearVariant};
use crate::rng;
use crate::tensor::Matrix;

pub const CSV_HEADER: &str =
    "method,m,n,k,sparsity,realized_sparsity,pass,nanos_median,nanos_p10,nanos_p90,effective_gflops,repeats";

const CACHE_FLUSH_BYTES: usize = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BenchMethod {
    Dense,
    DropoutDense,
    /// Block mask sampled, expanded and applied elementwise before a dense GEMM.
    BlockDropoutDense,
    SparseDrop,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 4] = [
        BenchMethod::Dense,
        BenchMethod::DropoutDense,
        BenchMethod::BlockDropoutDense,
        BenchMethod::SparseDrop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchMethod::Dense => "dense",
            BenchMethod::DropoutDense => "dropout_dense",
            BenchMethod::BlockDropoutDense => "block_dropout_dense",
            BenchMethod::SparseDrop => "sparsedrop",
        }
    }
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown bench method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pass {
    Forward,
    Backward,
    Total,
}

impl Pass {
    pub const ALL: [Pass; 3] = [Pass::Forward, Pass::Backward, Pass::Total];

    pub fn as_str(self) -> &'static str {
        match self {
            Pass::Forward => "forward",
            Pass::Backward => "backward",
            Pass::Total => "total",
        }
    }
}

impl FromStr for Pass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pass::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pass {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub method: BenchMethod,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Requested fraction of dropped blocks (elements for `dropout_dense`).
    pub sparsity: f64,
    /// Mean dropped fraction actually drawn over the timed repeats.
    pub realized_sparsity: f64,
    pub pass: Pass,
    pub nanos_median: u64,
    pub nanos_p10: u64,
    pub nanos_p90: u64,
    pub effective_gflops: f64,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<(usize, usize, usize)>,
    pub sparsities: Vec<f64>,
    pub tiles: TileConfig,
    pub repeats: usize,
    pub warmup: usize,
    pub methods: Vec<BenchMethod>,
    pub block_split: bool,
    pub seed: u64,
    pub flush_cache: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![(1024, 1024, 1024)],
            sparsities: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            tiles: TileConfig::new(128, 128, 32).expect("valid tiles"),
            repeats: 9,
            warmup: 1,
            methods: BenchMethod::ALL.to_vec(),
            block_split: false,
            seed: 0,
            flush_cache: true,
        }
    }
}

/// Nearest-rank percentile of an ascending slice, `q` in `[0, 1]`.
pub fn percentile(sorted: &[u64], q: f64) -> u64 {
    assert!(!sorted.is_empty());
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Lower median of an ascending slice.
pub fn median(sorted: &[u64]) -> u64 {
    sorted[(sorted.len() - 1) / 2]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = intercept + slope * x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let r_squared = if sxx == 0.0 || syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    }
}

struct CacheFlusher {
    buf: Vec<u8>,
    round: u8,
}

impl CacheFlusher {
    fn new() -> Self {
        Self {
            buf: vec![0; CACHE_FLUSH_BYTES],
            round: 0,
        }
    }

    fn flush(&mut self) {
        self.round = self.round.wrapping_add(1);
        for line in self.buf.chunks_mut(64) {
            line[0] = line[0].wrapping_add(self.round);
        }
        std::hint::black_box(&self.buf);
    }
}

/// One timed forward + backward sample.
struct Sample {
    forward_ns: u64,
    backward_ns: u64,
    dropped_fraction: f64,
    forward_flops: u64,
    backward_flops: u64,
}

struct Operands {
    x: Matrix<f32>,
    dy: Matrix<f32>,
}

fn visit_flops(work: WorkStats, t: TileConfig) -> u64 {
    2 * (t.m_blk * t.n_blk * t.k_blk) as u64 * work.kblock_visits
}

fn layer_for(method: BenchMethod, weight: &Matrix<f32>, sparsity: f64, cfg: &BenchConfig) -> Result<LinearVariant<f32>> {
    let kind = match method {
        BenchMethod::Dense | BenchMethod::BlockDropoutDense => LinearKind::Dense,
        BenchMethod::DropoutDense => LinearKind::DropoutDense,
        BenchMethod::SparseDrop => LinearKind::SparseDrop,
    };
    let spec = DropoutSpec::new(sparsity, cfg.tiles.m_blk, cfg.tiles.k_blk, cfg.seed)?;
    Ok(LinearVariant::new(kind, weight.clone(), spec, cfg.tiles)?.with_block_split(cfg.block_split))
}

fn run_once(
    method: BenchMethod,
    layer: &LinearVariant<f32>,
    ops: &Operands,
    step: u64,
) -> Result<Sample> {
    let (m, k) = ops.x.shape();
    let n = layer.out_features();
    let dense_flops = 2 * (m * n * k) as u64;
    match method {
        BenchMethod::BlockDropoutDense => {
            let t0 = Instant::now();
            let mask = BlockMask::sample(&layer.spec.with_seed(layer.mask_seed(step)), m, k)?;
            let e = mask.expand::<f32>();
            let s = layer.keep_scale();
            let xm = ops.x.elementwise_mul(&e)?;
            let y = gemm::dense_gemm(&xm, &layer.weight, layer.tiles)?.scale(s);
            let forward_ns = t0.elapsed().as_nanos() as u64;
            std::hint::black_box(&y);
            let t1 = Instant::now();
            let wt = layer.weight.transpose();
            let dx_tiles = TileConfig::new(layer.tiles.m_blk, layer.tiles.k_blk, layer.tiles.n_blk)?;
            let dx = gemm::dense_gemm(&ops.dy, &wt, dx_tiles)?.scale(s).elementwise_mul(&e)?;
            let dw_tiles = TileConfig::new(layer.tiles.k_blk, layer.tiles.n_blk, layer.tiles.m_blk)?;
            let dw = gemm::dense_gemm(&xm.transpose(), &ops.dy, dw_tiles)?.scale(s);
            let backward_ns = t1.elapsed().as_nanos() as u64;
            std::hint::black_box((&dx, &dw));
            Ok(Sample {
                forward_ns,
                backward_ns,
                dropped_fraction: mask.realized_sparsity(),
                forward_flops: dense_flops,
                backward_flops: 2 * dense_flops,
            })
        }
        _ => {
            let t0 = Instant::now();
            let (y, ctx) = layer.forward(&ops.x, true, step)?;
            let forward_ns = t0.elapsed().as_nanos() as u64;
            std::hint::black_box(&y);
            let t1 = Instant::now();
            let (dx, dw, work) = layer.backward_with_work(&ctx, &ops.dy)?;
            let backward_ns = t1.elapsed().as_nanos() as u64;
            std::hint::black_box((&dx, &dw));

            let (dropped_fraction, forward_flops, backward_flops) = match &ctx.mask {
                crate::layer::LayerMask::Block(bm) => {
                    check_work(layer, &ctx, ctx.forward_work, work)?;
                    let t = layer.tiles;
                    let fwd_tiles = if layer.block_split {
                        TileConfig { k_blk: t.k_blk / 2, ..t }
                    } else {
                        t
                    };
                    let dx_tiles = TileConfig::new(t.m_blk, t.k_blk, t.n_blk)?;
                    let dw_tiles = TileConfig {
                        m_blk: t.k_blk,
                        n_blk: t.n_blk,
                        k_blk: if layer.block_split { t.m_blk / 2 } else { t.m_blk },
                    };
                    (
                        bm.realized_sparsity(),
                        visit_flops(ctx.forward_work, fwd_tiles),
                        visit_flops(work.dx, dx_tiles) + visit_flops(work.dw, dw_tiles),
                    )
                }
                crate::layer::LayerMask::Elementwise(e) => {
                    let dropped = e.data().iter().filter(|&&v| v == 0.0).count();
                    (dropped as f64 / e.data().len() as f64, dense_flops, 2 * dense_flops)
                }
                crate::layer::LayerMask::None => (0.0, dense_flops, 2 * dense_flops),
            };
            Ok(Sample {
                forward_ns,
                backward_ns,
                dropped_fraction,
                forward_flops,
                backward_flops,
            })
        }
    }
}

/// Fails if the sparse kernels did not do exactly the keep-count work.
fn check_work(
    layer: &LinearVariant<f32>,
    ctx: &crate::layer::LayerContext<f32>,
    forward: WorkStats,
    backward: crate::layer::BackwardWork,
) -> Result<()> {
    let Some((pf, pb)) = layer.predicted_work(ctx)? else {
        return Ok(());
    };
    for (what, expected, observed) in [
        ("forward dsd", pf, forward),
        ("backward dx sdd", pb.dx, backward.dx),
        ("backward dw dsd", pb.dw, backward.dw),
    ] {
        if expected != observed {
            return Err(Error::WorkMismatch {
                what: what.to_string(),
                expected: expected.kblock_visits,
                observed: observed.kblock_visits,
            });
        }
    }
    Ok(())
}

fn summarise(
    method: BenchMethod,
    (m, n, k): (usize, usize, usize),
    sparsity: f64,
    samples: &[Sample],
) -> Vec<BenchRecord> {
    let realized = samples.iter().map(|s| s.dropped_fraction).sum::<f64>() / samples.len() as f64;
    Pass::ALL
        .into_iter()
        .map(|pass| {
            let pick = |s: &Sample| match pass {
                Pass::Forward => (s.forward_ns, s.forward_flops),
                Pass::Backward => (s.backward_ns, s.backward_flops),
                Pass::Total => (s.forward_ns + s.backward_ns, s.forward_flops + s.backward_flops),
            };
            let mut times: Vec<u64> = samples.iter().map(|s| pick(s).0).collect();
            times.sort_unstable();
            let flops = samples.iter().map(|s| pick(s).1 as f64).sum::<f64>() / samples.len() as f64;
            let nanos_median = median(&times);
            BenchRecord {
                method,
                m,
                n,
                k,
                sparsity,
                realized_sparsity: realized.clamp(0.0, 1.0),
                pass,
                nanos_median,
                nanos_p10: percentile(&times, 0.1),
                nanos_p90: percentile(&times, 0.9),
                effective_gflops: if nanos_median == 0 { 0.0 } else { flops / nanos_median as f64 },
                repeats: samples.len(),
            }
        })
        .collect()
}

/// Runs every `(method, size, sparsity)` combination; three records
/// (forward, backward, total) per combination.
pub fn bench_sweep(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.repeats < 3 {
        return Err(Error::Config(format!("repeats must be at least 3, got {}", cfg.repeats)));
    }
    for &(m, n, k) in &cfg.sizes {
        cfg.tiles.check(m, n, k)?;
        if cfg.block_split && (!cfg.tiles.m_blk.is_multiple_of(2) || !cfg.tiles.k_blk.is_multiple_of(2)) {
            return Err(Error::Config("block splitting needs even m_blk and k_blk".into()));
        }
    }
    let mut flusher = cfg.flush_cache.then(CacheFlusher::new);
    let mut records = Vec::new();
    for &(m, n, k) in &cfg.sizes {
        let ops = Operands {
            x: Matrix::random(m, k, rng::hash2(cfg.seed, 1)),
            dy: Matrix::random(m, n, rng::hash2(cfg.seed, 2)),
        };
        let weight = Matrix::random(k, n, rng::hash2(cfg.seed, 3));
        for &method in &cfg.methods {
            let layers = cfg
                .sparsities
                .iter()
                .map(|&sp| layer_for(method, &weight, sp, cfg))
                .collect::<Result<Vec<_>>>()?;
            let mut samples: Vec<Vec<Sample>> = layers.iter().map(|_| Vec::with_capacity(cfg.repeats)).collect();
            let mut step = 0u64;
            for _ in 0..cfg.warmup {
                for layer in &layers {
                    run_once(method, layer, &ops, step)?;
                }
                step += 1;
            }
            // Sparsity levels are interleaved so that slow drift in machine
            // speed is shared by every level instead of biasing one.
            for _ in 0..cfg.repeats {
                for (layer, out) in layers.iter().zip(&mut samples) {
                    if let Some(f) = flusher.as_mut() {
                        f.flush();
                    }
                    out.push(run_once(method, layer, &ops, step)?);
                }
                step += 1;
            }
            for (&sparsity, s) in cfg.sparsities.iter().zip(&samples) {
                records.extend(summarise(method, (m, n, k), sparsity, s));
            }
        }
    }
    Ok(records)
}

pub fn write_csv(records: &[BenchRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.m,
            r.n,
            r.k,
            r.sparsity,
            r.realized_sparsity,
            r.pass.as_str(),
            r.nanos_median,
            r.nanos_p10,
            r.nanos_p90,
            r.effective_gflops,
            r.repeats
        )?;
    }
    Ok(())
}

pub fn emit_csv(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_csv(records, &mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn csv_err(line: usize, msg: impl fmt::Display) -> Error {
    Error::Config(format!("csv line {line}: {msg}"))
}

pub fn parse_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(csv_err(1, format!("unexpected header {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let lineno = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 12 {
                return Err(csv_err(lineno, format!("{} fields", f.len())));
            }
            let int = |s: &str| s.parse::<u64>().map_err(|e| csv_err(lineno, e));
            let float = |s: &str| s.parse::<f64>().map_err(|e| csv_err(lineno, e));
            Ok(BenchRecord {
                method: f[0].parse()?,
                m: int(f[1])? as usize,
                n: int(f[2])? as usize,
                k: int(f[3])? as usize,
                sparsity: float(f[4])?,
                realized_sparsity: float(f[5])?,
                pass: f[6].parse()?,
                nanos_median: int(f[7])?,
                nanos_p10: int(f[8])?,
                nanos_p90: int(f[9])?,
                effective_gflops: float(f[10])?,
                repeats: int(f[11])? as usize,
            })
        })
        .collect()
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<BenchRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let v: Vec<u64> = (1..=10).collect();
        assert_eq!(percentile(&v, 0.1), 1);
        assert_eq!(percentile(&v, 0.9), 9);
        assert_eq!(median(&v), 5);
        assert_eq!(median(&[3, 4, 9]), 4);
    }

    #[test]
    fn fit_recovers_a_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 3.0, 5.0, 7.0];
        let f = linear_fit(&xs, &ys);
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn header_only_csv() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn single_record_csv_has_two_lines_of_twelve_fields() {
        let r = BenchRecord {
            method: BenchMethod::SparseDrop,
            m: 64,
            n: 32,
            k: 128,
            sparsity: 0.25,
            realized_sparsity: 0.1875,
            pass: Pass::Total,
            nanos_median: 1_234_567,
            nanos_p10: 1_000_000,
            nanos_p90: 2_000_000,
            effective_gflops: 3.5,
            repeats: 9,
        };
        let mut buf = Vec::new();
        write_csv(std::slice::from_ref(&r), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.contains('\r'));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines.iter().all(|l| l.split(',').count() == 12));
        assert_eq!(parse_csv(&text).unwrap(), vec![r]);
    }

    #[test]
    fn small_sweep_is_consistent() {
        let cfg = BenchConfig {
            sizes: vec![(64, 32, 64)],
            sparsities: vec![0.0, 0.5],
            tiles: TileConfig::square(16),
            repeats: 3,
            warmup: 0,
            flush_cache: false,
            ..Default::default()
        };
        let recs = bench_sweep(&cfg).unwrap();
        assert_eq!(recs.len(), 4 * 2 * 3);
        for r in &recs {
            assert!(r.nanos_p10 <= r.nanos_median && r.nanos_median <= r.nanos_p90);
            assert!((0.0..=1.0).contains(&r.realized_sparsity));
        }
        let dense: Vec<_> = recs.iter().filter(|r| r.method == BenchMethod::Dense).collect();
        assert!(dense.iter().all(|r| r.realized_sparsity == 0.0));
    }

    #[test]
    fn sweep_rejects_bad_config() {
        let cfg = BenchConfig {
            sizes: vec![(60, 64, 64)],
            tiles: TileConfig::square(16),
            repeats: 3,
            ..Default::default()
        };
        assert!(matches!(bench_sweep(&cfg), Err(Error::Indivisible { .. })));
        let cfg = BenchConfig { repeats: 2, ..cfg };
        assert!(bench_sweep(&cfg).is_err());
    }
}
