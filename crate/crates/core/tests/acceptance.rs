//! Acceptance suite. One PASS/FAIL line per criterion; exits nonzero if any
//! criterion fails. Run with `cargo test --test acceptance`.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsedrop::bench::{self, BenchConfig, BenchMethod, BenchRecord, Pass};
use sparsedrop::gradcheck::{self, GradcheckOptions, DEFAULT_TOLERANCE};
use sparsedrop::trainer::{self, SyntheticParams, SweepTable, TrainConfig};
use sparsedrop::gemm::{dsd_matmul_with_stats, sdd_matmul_with_stats};
use sparsedrop::{dense_gemm, par, BlockMask, DropoutSpec, LinearKind, LinearVariant, Matrix, TileConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

const DIMS: [usize; 4] = [32, 64, 96, 128];
const RATES: [f64; 3] = [0.0, 0.3, 0.7];

/// Shared by criteria 1 and 2: 200 random dsd/sdd cases.
fn kernel_cases(check_values: bool) -> Outcome {
    let tiles = TileConfig::square(32);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut visits = 0u64;
    for case in 0..200u64 {
        let m = DIMS[rng.random_range(0..4)];
        let n = DIMS[rng.random_range(0..4)];
        let k = DIMS[rng.random_range(0..4)];
        let p = RATES[rng.random_range(0..3)];
        let s = (1.0 / (1.0 - p)) as f32;
        let a = Matrix::<f32>::random(m, k, rng.random());
        let b = Matrix::<f32>::random(k, n, rng.random());
        let tag = || format!("case {case}: {m}x{n}x{k} p={p}");

        let in_mask = BlockMask::sample(&DropoutSpec::new(p, 32, 32, rng.random()).map_err(e2s)?, m, k).map_err(e2s)?;
        let (got, work) = dsd_matmul_with_stats(&a, &in_mask, &b, s, tiles).map_err(e2s)?;
        let expected = (n / 32) as u64 * in_mask.keep_count() as u64;
        ensure(work.kblock_visits == expected, || {
            format!("{}: dsd visited {} K-blocks, expected {expected}", tag(), work.kblock_visits)
        })?;
        if check_values {
            let oracle = dense_gemm(&a.elementwise_mul(&in_mask.expand()).map_err(e2s)?, &b, tiles)
                .map_err(e2s)?
                .scale(s);
            ensure(got.bitwise_eq(&oracle), || format!("{}: dsd differs from oracle", tag()))?;
        }

        let out_mask = BlockMask::sample(&DropoutSpec::new(p, 32, 32, rng.random()).map_err(e2s)?, m, n).map_err(e2s)?;
        let (got, work) = sdd_matmul_with_stats(&a, &b, &out_mask, s, tiles).map_err(e2s)?;
        let expected = (k / 32) as u64 * out_mask.keep_count() as u64;
        ensure(work.kblock_visits == expected, || {
            format!("{}: sdd visited {} K-blocks, expected {expected}", tag(), work.kblock_visits)
        })?;
        if check_values {
            let oracle = dense_gemm(&a, &b, tiles)
                .map_err(e2s)?
                .scale(s)
                .elementwise_mul(&out_mask.expand())
                .map_err(e2s)?;
            ensure(got.bitwise_eq_up_to_zero_sign(&oracle), || format!("{}: sdd differs from oracle", tag()))?;
        }
        visits += 2;
    }
    Ok(format!("{} kernel calls", visits))
}

fn c1_kernel_oracle() -> Outcome {
    kernel_cases(true).map(|s| format!("{s} bitwise equal to masked dense oracles"))
}

fn c2_work_scaling() -> Outcome {
    kernel_cases(false).map(|s| format!("{s} with exact keep-count work"))
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

fn c3_retile() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checks = 0usize;
    let mut worst = 0.0f64;
    for &(blk, max_grid) in &[(4usize, 6usize), (8, 6), (128, 2)] {
        for i in 0..100 {
            let (gr, gc) = (rng.random_range(1..=max_grid), rng.random_range(1..=max_grid));
            let p = rng.random_range(0.0..0.9);
            let mask = BlockMask::sample(&DropoutSpec::new(p, blk, blk, rng.random()).map_err(e2s)?, gr * blk, gc * blk)
                .map_err(e2s)?;
            let (m, k) = mask.element_shape();
            let n = 16;
            let a = Matrix::<f32>::random(m, k, rng.random());
            let b = Matrix::<f32>::random(k, n, rng.random());
            let e = mask.expand::<f32>();
            let base = sparsedrop::dsd_matmul(&a, &mask, &b, 2.0, TileConfig::new(blk, 8, blk).map_err(e2s)?)
                .map_err(e2s)?;
            for sm in divisors(blk) {
                for sk in divisors(blk) {
                    let r = mask.retile(sm, sk).map_err(e2s)?;
                    ensure(r.expand::<f32>().bitwise_eq(&e), || format!("blk {blk} mask {i}: expand differs at split {sm}x{sk}"))?;
                    let tiles = TileConfig::new(blk / sm, 8, blk / sk).map_err(e2s)?;
                    let got = sparsedrop::dsd_matmul(&a, &r, &b, 2.0, tiles).map_err(e2s)?;
                    let err = got.rel_frobenius_error(&base).map_err(e2s)?;
                    worst = worst.max(err);
                    ensure(err <= 1e-4, || format!("blk {blk} mask {i}: dsd error {err:e} at split {sm}x{sk}"))?;
                    checks += 1;
                }
            }
        }
    }
    Ok(format!("{checks} retilings, max dsd rel error {worst:.1e}"))
}

fn c4_gradcheck() -> Outcome {
    let outcomes = gradcheck::run_suite(&LinearKind::ALL, 4, 20, None, GradcheckOptions::default()).map_err(e2s)?;
    let worst = outcomes.iter().map(|o| o.max_rel()).fold(0.0, f64::max);
    if let Some(bad) = outcomes.iter().find(|o| !o.passed(DEFAULT_TOLERANCE)) {
        return Err(format!("{}: dx {:.2e} dw {:.2e}", bad.case, bad.max_rel_dx, bad.max_rel_dw));
    }
    Ok(format!("{} instances, max rel error {worst:.2e} < 1e-6", outcomes.len()))
}

fn c5_unbiased() -> Outcome {
    let spec = DropoutSpec::new(0.5, 2, 2, 5).map_err(e2s)?;
    let layer = LinearVariant::new(
        LinearKind::SparseDrop,
        Matrix::<f32>::random(16, 8, 51),
        spec,
        TileConfig::new(2, 8, 2).map_err(e2s)?,
    )
    .map_err(e2s)?;
    let x = Matrix::<f32>::random(16, 16, 52);
    let inference = layer.forward(&x, false, 0).map_err(e2s)?.0;
    let mc = layer.forward_moments(&x, 10_000).map_err(e2s)?;
    let mut worst = 0.0f64;
    for ((m, se), y) in mc.mean.data().iter().zip(mc.std_error.data()).zip(inference.data()) {
        let diff = (m - *y as f64).abs();
        let z = if *se > 0.0 { diff / se } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
        ensure(z <= 5.0, || format!("mean {m} vs inference {y}: {z:.2} standard errors"))?;
    }
    Ok(format!("8x8 block grid, 10000 samples, max |z| = {worst:.2}"))
}

fn c6_mask_stats() -> Outcome {
    let mut parts = Vec::new();
    for p in [0.1, 0.3, 0.5, 0.7] {
        let mut dropped = 0usize;
        let mut total = 0usize;
        for seed in 0..1000 {
            let spec = DropoutSpec::new(p, 4, 4, seed).map_err(e2s)?;
            let m = BlockMask::sample(&spec, 64, 64).map_err(e2s)?;
            let again = BlockMask::sample(&spec, 64, 64).map_err(e2s)?;
            let threaded = par::with_threads(4, || BlockMask::sample(&spec, 64, 64)).map_err(e2s)?;
            ensure(m.words() == again.words() && m.words() == threaded.words(), || {
                format!("p={p} seed={seed}: sampling is not deterministic")
            })?;
            dropped += m.total_blocks() - m.keep_count();
            total += m.total_blocks();
        }
        let rate = dropped as f64 / total as f64;
        let sigma = (p * (1.0 - p) / total as f64).sqrt();
        let z = (rate - p) / sigma;
        ensure(z.abs() <= 3.0, || format!("p={p}: drop rate {rate:.5} is {z:.2} sigma away"))?;
        parts.push(format!("p={p}: {rate:.4} ({z:+.2}s)"));
    }
    Ok(parts.join(", "))
}

fn c7_latency() -> Outcome {
    let sparsities: Vec<f64> = (0..=8).map(|i| i as f64 / 10.0).collect();
    let cfg = BenchConfig {
        sizes: vec![(1024, 1024, 1024)],
        sparsities: sparsities.clone(),
        tiles: TileConfig::new(128, 128, 32).map_err(e2s)?,
        repeats: 9,
        warmup: 1,
        methods: vec![BenchMethod::SparseDrop],
        ..Default::default()
    };
    let recs = par::with_threads(1, || bench::bench_sweep(&cfg)).map_err(e2s)?;
    let totals: Vec<f64> = recs
        .iter()
        .filter(|r| r.pass == Pass::Total)
        .map(|r| r.nanos_median as f64)
        .collect();
    let ms: Vec<String> = totals.iter().map(|t| format!("{:.0}", t / 1e6)).collect();
    for w in totals.windows(2).enumerate() {
        let (i, pair) = w;
        ensure(pair[1] <= pair[0], || {
            format!("not monotone at sparsity {}: {} ms", sparsities[i + 1], ms.join("/"))
        })?;
    }
    let ratio = totals[5] / totals[0];
    ensure(ratio <= 0.75, || format!("t(0.5)/t(0) = {ratio:.3} > 0.75"))?;
    let fit = bench::linear_fit(&sparsities, &totals);
    Ok(format!("median total ms {}; t(0.5)/t(0) = {ratio:.3}; linear fit r2 = {:.3}", ms.join("/"), fit.r_squared))
}

const DATA_SEED: u64 = 7;
const SEEDS: [u64; 3] = [0, 1, 2];

fn regularisation_data() -> Result<trainer::Dataset, String> {
    SyntheticParams::new(DATA_SEED, 5120, 10, 1024).generate().map_err(e2s)
}

fn base_config() -> TrainConfig {
    TrainConfig {
        hidden_dim: 256,
        max_epochs: 40,
        train_subset: 5120,
        ..TrainConfig::default()
    }
}

fn c8_regularisation(table: &SweepTable) -> Outcome {
    let dense = table.best(LinearKind::Dense).ok_or("no dense runs")?;
    let sd = table.best(LinearKind::SparseDrop).ok_or("no sparsedrop runs")?;
    let margin = (sd.mean_val_accuracy - dense.mean_val_accuracy) * 100.0;
    let mut shrunk = 0;
    for seed in SEEDS {
        let gap = |v, p| {
            table
                .runs
                .iter()
                .find(|r| r.variant == v && r.p == p && r.seed == seed)
                .map(|r| r.report.generalisation_gap())
        };
        if let (Some(d), Some(s)) = (gap(LinearKind::Dense, 0.0), gap(LinearKind::SparseDrop, sd.p)) {
            if s < d {
                shrunk += 1;
            }
        }
    }
    let detail = format!(
        "dense {:.2}±{:.2}, sparsedrop p={} {:.2}±{:.2} (+{margin:.2} points), gap shrinks in {shrunk}/3 seeds",
        dense.mean_val_accuracy * 100.0,
        dense.std_val_accuracy * 100.0,
        sd.p,
        sd.mean_val_accuracy * 100.0,
        sd.std_val_accuracy * 100.0,
    );
    ensure(margin >= 0.3 && shrunk >= 2, || detail.clone())?;
    Ok(detail)
}

fn c9_stronger(table: &SweepTable) -> Outcome {
    let mut higher = 0;
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let loss = |v| {
            table
                .runs
                .iter()
                .find(|r| r.variant == v && r.seed == seed)
                .map(|r| r.report.final_train_loss)
        };
        let (Some(sd), Some(dd)) = (loss(LinearKind::SparseDrop), loss(LinearKind::DropoutDense)) else {
            return Err(format!("missing runs for seed {seed}"));
        };
        if sd >= dd {
            higher += 1;
        }
        pairs.push(format!("{sd:.3} vs {dd:.3}"));
    }
    let detail = format!("final train loss sparsedrop vs dropout_dense: {}; higher in {higher}/3", pairs.join(", "));
    ensure(higher >= 2, || detail.clone())?;
    Ok(detail)
}

fn random_record(rng: &mut ChaCha8Rng) -> BenchRecord {
    let mut t = [rng.random_range(0..u64::MAX / 4), rng.random_range(0..u64::MAX / 4), rng.random_range(0..u64::MAX / 4)];
    t.sort_unstable();
    BenchRecord {
        method: BenchMethod::ALL[rng.random_range(0..4)],
        m: rng.random_range(1..100_000),
        n: rng.random_range(1..100_000),
        k: rng.random_range(1..100_000),
        sparsity: rng.random(),
        realized_sparsity: rng.random(),
        pass: Pass::ALL[rng.random_range(0..3)],
        nanos_median: t[1],
        nanos_p10: t[0],
        nanos_p90: t[2],
        effective_gflops: rng.random::<f64>() * 1e3,
        repeats: rng.random_range(3..1000),
    }
}

fn c10_roundtrips() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in 0..100 {
        let (mb, kb) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (gr, gc) = (rng.random_range(1..=40), rng.random_range(1..=40));
        let spec = DropoutSpec::new(rng.random_range(0.0..0.99), mb, kb, rng.random()).map_err(e2s)?;
        let mask = BlockMask::sample(&spec, gr * mb, gc * kb).map_err(e2s)?;
        let path = dir.path().join(format!("m{i}.bmsk"));
        mask.save(&path).map_err(e2s)?;
        let back = BlockMask::load(&path).map_err(e2s)?;
        ensure(back == mask && back.to_bytes() == std::fs::read(&path).unwrap_or_default(), || {
            format!("mask {i} ({gr}x{gc} blocks of {mb}x{kb}) did not roundtrip")
        })?;

        let n = rng.random_range(0..20);
        let records: Vec<BenchRecord> = (0..n).map(|_| random_record(&mut rng)).collect();
        let csv = dir.path().join(format!("r{i}.csv"));
        bench::emit_csv(&records, &csv).map_err(e2s)?;
        let parsed = bench::read_csv(&csv).map_err(e2s)?;
        ensure(parsed == records, || format!("csv instance {i} with {n} records did not roundtrip"))?;
    }
    Ok("100 mask files and 100 csv files roundtrip losslessly".into())
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--nocapture`; only a
    // listing request changes behaviour.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut failures = 0;
    let mut report = |id: u32, name: &str, started: Instant, outcome: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{id}] {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL [{id}] {name} ({secs:.1}s): {detail}");
            }
        }
    };

    let t = Instant::now();
    report(1, "kernel oracle equivalence", t, c1_kernel_oracle());
    let t = Instant::now();
    report(2, "work scaling", t, c2_work_scaling());
    let t = Instant::now();
    report(3, "retile equivalence", t, c3_retile());
    let t = Instant::now();
    report(4, "gradient correctness", t, c4_gradcheck());
    let t = Instant::now();
    report(5, "unbiasedness", t, c5_unbiased());
    let t = Instant::now();
    report(6, "mask statistics", t, c6_mask_stats());
    let t = Instant::now();
    report(7, "latency trend", t, c7_latency());

    let data = regularisation_data();
    let base = base_config();
    let t = Instant::now();
    let outcome = data.as_ref().map_err(Clone::clone).and_then(|d| {
        let table = trainer::sweep(&base, &[LinearKind::Dense, LinearKind::SparseDrop], &[0.1, 0.2, 0.3], &SEEDS, d)
            .map_err(e2s)?;
        c8_regularisation(&table)
    });
    report(8, "regularisation direction", t, outcome);
    let t = Instant::now();
    let outcome = data.as_ref().map_err(Clone::clone).and_then(|d| {
        let table = trainer::sweep(&base, &[LinearKind::DropoutDense, LinearKind::SparseDrop], &[0.5], &SEEDS, d)
            .map_err(e2s)?;
        c9_stronger(&table)
    });
    report(9, "stronger regulariser", t, outcome);
    let t = Instant::now();
    report(10, "format roundtrips", t, c10_roundtrips());

    if failures == 0 {
        println!("acceptance: all 10 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
