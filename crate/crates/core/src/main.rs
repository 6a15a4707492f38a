use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sparsedrop::bench::{self, BenchConfig, BenchMethod};
use sparsedrop::gradcheck::{self, GradcheckOptions, DEFAULT_TOLERANCE};
use sparsedrop::trainer::{self, DataSource, DatasetKind, ReportDocument, SyntheticParams, TrainConfig};
use sparsedrop::{par, rng, BlockMask, DropoutSpec, Error, LinearKind, Matrix, TileConfig};

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "sparsedrop", version, about = "Block-sparse dropout kernels, benchmarks and training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time forward + backward passes and write a CSV.
    Bench(BenchArgs),
    /// Train one MLP and write a JSON report.
    Train(TrainArgs),
    /// Train over variants, rates and seeds.
    Sweep(SweepArgs),
    /// Finite-difference check of the layer gradients.
    Gradcheck(GradcheckArgs),
    /// Mask file tools.
    Mask {
        #[command(subcommand)]
        action: MaskAction,
    },
    /// Fast end-to-end sanity checks.
    Selftest,
}

#[derive(Args)]
struct BenchArgs {
    /// Problem sizes as MxNxK (or a single N for a cube), comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_size, default_value = "1024")]
    sizes: Vec<(usize, usize, usize)>,
    /// Requested sparsities, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8")]
    sparsity: Vec<f64>,
    /// Tile shape as MxNxK.
    #[arg(long, value_parser = parse_tiles, default_value = "128x128x32")]
    tiles: TileConfig,
    #[arg(long, default_value_t = 9)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, value_delimiter = ',', value_parser = parse_method,
          default_value = "dense,dropout_dense,block_dropout_dense,sparsedrop")]
    methods: Vec<BenchMethod>,
    /// Run the sparse kernels on blocks split in half along K.
    #[arg(long)]
    block_split: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the cache-thrashing sweep between repeats.
    #[arg(long)]
    no_flush: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// CSV destination; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// JSON training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Full-size geometry preset.
    #[arg(long)]
    paper_scale: bool,
    /// IDX image file; selects the IDX dataset.
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    /// Seed of the synthetic dataset.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// JSON destination; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_parser = parse_kind)]
    variant: Option<LinearKind>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind, default_value = "dense,dropout_dense,sparsedrop")]
    variants: Vec<LinearKind>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
    p: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random geometries per variant.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Fixed dropout rate; drawn per trial if absent.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_kind, default_value = "dense,dropout_dense,sparsedrop")]
    variants: Vec<LinearKind>,
    /// Multiply the analytic dW by this factor (negative control).
    #[arg(long, default_value_t = 1.0)]
    corrupt_dw: f64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Subcommand)]
enum MaskAction {
    /// Sample a mask and write it as a BMSK file.
    Sample {
        /// Element rows of the masked matrix.
        #[arg(long)]
        rows: usize,
        /// Element columns of the masked matrix.
        #[arg(long)]
        cols: usize,
        /// Block shape as MxK.
        #[arg(long, value_parser = parse_pair, default_value = "32x32")]
        block: (usize, usize),
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the block grid as 0/1 text.
    Dump { file: PathBuf },
    /// Split every block by the given factors.
    Retile {
        file: PathBuf,
        /// Split factors as SMxSK.
        #[arg(long, value_parser = parse_pair)]
        split: (usize, usize),
        #[arg(long)]
        out: PathBuf,
    },
    /// Print keep count and realized sparsity.
    Stats { file: PathBuf },
}

fn parse_dims(s: &str, n: usize) -> Result<Vec<usize>, String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != n {
        return Err(format!("expected {n} values separated by 'x', got {s:?}"));
    }
    parts
        .iter()
        .map(|p| match p.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("invalid dimension {p:?}")),
            Ok(v) => Ok(v),
        })
        .collect()
}

fn parse_size(s: &str) -> Result<(usize, usize, usize), String> {
    if !s.contains('x') {
        let d = parse_dims(s, 1)?[0];
        return Ok((d, d, d));
    }
    let d = parse_dims(s, 3)?;
    Ok((d[0], d[1], d[2]))
}

fn parse_tiles(s: &str) -> Result<TileConfig, String> {
    let (m, n, k) = parse_size(s)?;
    TileConfig::new(m, n, k).map_err(|e| e.to_string())
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let d = parse_dims(s, 2)?;
    Ok((d[0], d[1]))
}

fn parse_method(s: &str) -> Result<BenchMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<LinearKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Error reported by a subcommand, with its exit status.
enum Failure {
    Verify(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Dataset { .. } | Error::MaskFormat(_) => EXIT_IO,
        Error::WorkMismatch { .. } | Error::Diverged { .. } => EXIT_VERIFY,
        _ => EXIT_USAGE,
    }
}

type CmdResult = Result<(), Failure>;

fn write_output(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_bench(a: BenchArgs) -> CmdResult {
    let cfg = BenchConfig {
        sizes: a.sizes,
        sparsities: a.sparsity,
        tiles: a.tiles,
        repeats: a.repeats,
        warmup: a.warmup,
        methods: a.methods,
        block_split: a.block_split,
        seed: a.seed,
        flush_cache: !a.no_flush,
    };
    let threads = a.threads.max(1);
    let records = par::with_threads(threads, || bench::bench_sweep(&cfg))?;
    let mut csv = Vec::new();
    bench::write_csv(&records, &mut csv).map_err(|e| Error::io("<csv buffer>", e))?;
    write_output(a.out.as_deref(), &String::from_utf8_lossy(&csv))?;
    eprintln!("threads: {threads}");
    for &(m, n, k) in &cfg.sizes {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.method == BenchMethod::SparseDrop && r.pass == bench::Pass::Total && (r.m, r.n, r.k) == (m, n, k))
            .map(|r| (r.sparsity, r.nanos_median as f64))
            .collect();
        if pts.len() >= 2 {
            let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let fit = bench::linear_fit(&xs, &ys);
            eprintln!(
                "sparsedrop {m}x{n}x{k}: total ns = {:.0} + {:.0} * sparsity, r2 = {:.4}",
                fit.intercept, fit.slope, fit.r_squared
            );
        }
    }
    Ok(())
}

fn load_config(d: &DataArgs) -> Result<TrainConfig, Error> {
    let mut cfg = match &d.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            TrainConfig::from_json(&text)?
        }
        None => TrainConfig::default(),
    };
    if d.paper_scale {
        cfg = cfg.paper_scale();
    }
    if d.images.is_some() {
        cfg.dataset = DatasetKind::MnistIdx;
    }
    Ok(cfg)
}

fn load_data(d: &DataArgs, cfg: &TrainConfig) -> Result<trainer::Dataset, Error> {
    let source = match (cfg.dataset, &d.images, &d.labels) {
        (_, Some(images), Some(labels)) => DataSource::Idx {
            images: images.clone(),
            labels: labels.clone(),
        },
        (DatasetKind::MnistIdx, _, _) => {
            return Err(Error::Config("dataset mnist_idx needs --images and --labels".into()));
        }
        (DatasetKind::Synthetic, _, _) => {
            DataSource::Synthetic(SyntheticParams::new(d.data_seed, cfg.train_subset, 10, 1024))
        }
    };
    source.load(cfg.train_subset)
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, Error> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::Config(e.to_string()))
}

fn run_train(a: TrainArgs) -> CmdResult {
    let mut cfg = load_config(&a.data)?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(p) = a.p {
        cfg.p = p;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = load_data(&a.data, &cfg)?;
    let report = par::with_threads(a.data.threads, || trainer::train(&cfg, &data))?;
    eprintln!(
        "{} p={}: best val acc {:.4} at epoch {}, gap {:.4}, {:.1}s",
        cfg.variant,
        cfg.p,
        report.best_val_accuracy,
        report.best_epoch,
        report.generalisation_gap(),
        report.wall_time_seconds
    );
    write_output(a.data.out.as_deref(), &to_json(&ReportDocument::new(cfg, report))?)?;
    Ok(())
}

fn run_sweep(a: SweepArgs) -> CmdResult {
    let cfg = load_config(&a.data)?;
    cfg.validate()?;
    let data = load_data(&a.data, &cfg)?;
    let table = par::with_threads(a.data.threads, || trainer::sweep(&cfg, &a.variants, &a.p, &a.seeds, &data))?;
    for c in table.cells() {
        eprintln!(
            "{:<14} p={:<4} runs={} val_acc={:.4}+-{:.4} val_loss={:.4}",
            c.variant.as_str(),
            c.p,
            c.runs,
            c.mean_val_accuracy,
            c.std_val_accuracy,
            c.mean_val_loss
        );
    }
    for v in &a.variants {
        if let Some(b) = table.best(*v) {
            eprintln!("best {}: p={} ({:.4})", v, b.p, b.mean_val_accuracy);
        }
    }
    write_output(a.data.out.as_deref(), &to_json(&table)?)?;
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> CmdResult {
    if a.trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()).into());
    }
    let opts = GradcheckOptions {
        dw_factor: a.corrupt_dw,
        ..Default::default()
    };
    let outcomes = gradcheck::run_suite(&a.variants, a.seed, a.trials, a.p, opts)?;
    let mut failed = Vec::new();
    for o in &outcomes {
        let ok = o.passed(a.tolerance);
        println!(
            "{} {}: dx {:.3e} dw {:.3e}",
            if ok { "ok  " } else { "FAIL" },
            o.case,
            o.max_rel_dx,
            o.max_rel_dw
        );
        if !ok {
            failed.push(o.case.to_string());
        }
    }
    if failed.is_empty() {
        println!("all {} trials below {:e}", outcomes.len(), a.tolerance);
        Ok(())
    } else {
        Err(Failure::Verify(format!("{} of {} trials failed: {}", failed.len(), outcomes.len(), failed.join("; "))))
    }
}

fn run_mask(action: MaskAction) -> CmdResult {
    match action {
        MaskAction::Sample {
            rows,
            cols,
            block: (m_blk, k_blk),
            p,
            seed,
            out,
        } => {
            let mask = BlockMask::sample(&DropoutSpec::new(p, m_blk, k_blk, seed)?, rows, cols)?;
            mask.save(&out)?;
            print!("{}", mask.stats());
        }
        MaskAction::Dump { file } => print!("{}", BlockMask::load(&file)?.dump()),
        MaskAction::Retile {
            file,
            split: (sm, sk),
            out,
        } => {
            let mask = BlockMask::load(&file)?.retile(sm, sk)?;
            mask.save(&out)?;
            print!("{}", mask.stats());
        }
        MaskAction::Stats { file } => print!("{}", BlockMask::load(&file)?.stats()),
    }
    Ok(())
}

fn selftest_checks() -> Vec<(&'static str, Result<bool, Error>)> {
    let kernels = || -> Result<bool, Error> {
        let tiles = TileConfig::square(16);
        let a = Matrix::<f32>::random(64, 48, 1);
        let b = Matrix::<f32>::random(48, 32, 2);
        let mask = BlockMask::sample(&DropoutSpec::new(0.4, 16, 16, 3)?, 64, 48)?;
        let s = 1.0 / 0.6;
        let got = sparsedrop::dsd_matmul(&a, &mask, &b, s, tiles)?;
        let want = sparsedrop::dense_gemm(&a.elementwise_mul(&mask.expand())?, &b, tiles)?.scale(s);
        Ok(got.bitwise_eq(&want))
    };
    let mask_io = || -> Result<bool, Error> {
        let mask = BlockMask::sample(&DropoutSpec::new(0.3, 4, 8, 9)?, 40, 64)?;
        let back = BlockMask::from_bytes(&mask.to_bytes())?;
        Ok(back == mask && mask.retile(1, 1)? == mask)
    };
    let grads = || -> Result<bool, Error> {
        let out = gradcheck::run_suite(&LinearKind::ALL, 0, 2, None, GradcheckOptions::default())?;
        Ok(out.iter().all(|o| o.passed(DEFAULT_TOLERANCE)))
    };
    let unbiased = || -> Result<bool, Error> {
        let spec = DropoutSpec::new(0.5, 2, 2, 5)?;
        let layer = sparsedrop::LinearVariant::new(
            LinearKind::SparseDrop,
            Matrix::<f32>::random(16, 8, 6),
            spec,
            TileConfig::new(2, 8, 2)?,
        )?;
        let x = Matrix::<f32>::random(16, 16, 7);
        let (inference, _) = layer.forward(&x, false, 0)?;
        let mc = layer.forward_moments(&x, 2000)?;
        Ok(mc
            .mean
            .data()
            .iter()
            .zip(mc.std_error.data())
            .zip(inference.data())
            .all(|((m, se), y)| (m - *y as f64).abs() <= 5.0 * se + 1e-6))
    };
    let csv = || -> Result<bool, Error> {
        let cfg = BenchConfig {
            sizes: vec![(32, 32, 32)],
            sparsities: vec![0.0, 0.5],
            tiles: TileConfig::square(16),
            repeats: 3,
            warmup: 0,
            flush_cache: false,
            seed: rng::hash2(0, 1),
            ..Default::default()
        };
        let recs = bench::bench_sweep(&cfg)?;
        let mut buf = Vec::new();
        bench::write_csv(&recs, &mut buf).map_err(|e| Error::io("<csv buffer>", e))?;
        Ok(bench::parse_csv(&String::from_utf8_lossy(&buf))? == recs)
    };
    vec![
        ("kernel matches masked dense oracle", kernels()),
        ("mask file roundtrip", mask_io()),
        ("layer gradients", grads()),
        ("forward is unbiased", unbiased()),
        ("bench csv roundtrip", csv()),
    ]
}

fn run_selftest() -> CmdResult {
    let mut failed = 0;
    for (name, result) in selftest_checks() {
        match result {
            Ok(true) => println!("PASS {name}"),
            Ok(false) => {
                failed += 1;
                println!("FAIL {name}");
            }
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Verify(format!("{failed} selftest checks failed")))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Bench(a) => run_bench(a),
        Command::Train(a) => run_train(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Mask { action } => run_mask(action),
        Command::Selftest => run_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(EXIT_VERIFY)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
