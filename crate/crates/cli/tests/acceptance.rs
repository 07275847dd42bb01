//! End-to-end acceptance checks. Runs every criterion, prints one line per
//! criterion and exits non-zero if any of them failed.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use equarx::analysis::{error_ordering, size_sweep, tradeoff_study, StudyParams};
use equarx::collectives::{all_reduce, baseline_allreduce_bf16};
use equarx::layout::{Lanes, CHUNK_LEN};
use equarx::quant::{qp1_scan, qp2_apply, AbsMaxGrid};
use equarx::simnet::{idle_time, lower_bound, simulate, simulate_plan, ComputeParams, LinkParams, Preset, SimPlan};
use equarx::{CodecKind, CollectiveConfig, PartitionSpec, TensorBuf, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const MIB: usize = 1 << 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn preset() -> Preset {
    Preset::named("v5e-like").expect("shipped preset")
}

fn functional_correctness() -> Outcome {
    let start = Instant::now();
    let (rows, cols) = (64, 1024);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = Vec::new();
    for n in [2, 4, 8] {
        let spec = PartitionSpec::new(n, 2, 2).unwrap();
        let inputs: Vec<TensorBuf> = (0..n)
            .map(|_| TensorBuf::new((0..rows * cols).map(|_| rng.random_range(-16i32..=16) as f32).collect(), rows, cols).unwrap())
            .collect();
        let mut expected = vec![0f32; rows * cols];
        for t in &inputs {
            for (e, &x) in expected.iter_mut().zip(&t.data) {
                *e += x;
            }
        }
        let mut outputs = vec![("baseline", baseline_allreduce_bf16(&inputs, &spec).unwrap())];
        for variant in [Variant::FullLoop, Variant::SemiLoop] {
            let cfg = CollectiveConfig { variant, ..CollectiveConfig::baseline(spec) };
            outputs.push((variant.name(), all_reduce(&inputs, &cfg).unwrap()));
        }
        for (name, per_device) in outputs {
            for (d, out) in per_device.iter().enumerate() {
                let exact = out.data.iter().zip(&expected).all(|(a, b)| a.to_bits() == b.to_bits());
                if !exact {
                    mismatches.push(format!("{name} N={n} device {d}"));
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches.is_empty() && secs < 10.0;
    outcome(pass, format!("bit-exact for N in {{2,4,8}}, mismatches {:?}, {secs:.2} s", mismatches))
}

fn mse_reproduction() -> Outcome {
    let start = Instant::now();
    let params = StudyParams::from_preset(&preset(), 4096, 4096, 0).unwrap();
    let rows = tradeoff_study(&params).unwrap();
    let bands = [("full-both", 0.0007, 0.0028), ("semi-both", 0.0005, 0.002), ("full-ag", 0.00015, 0.0006), ("naive", 0.065, 0.26)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, lo, hi) in bands {
        let mse = rows.iter().find(|r| r.flavor == name).expect("flavor present").mse;
        let ok = (lo..=hi).contains(&mse);
        pass &= ok;
        parts.push(format!("{name} {mse:.6} in [{lo}, {hi}] {}", if ok { "ok" } else { "out" }));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    outcome(pass, format!("{}; {secs:.1} s", parts.join(", ")))
}

fn error_orderings() -> Outcome {
    let spec = PartitionSpec::for_block_size(1 << 20, 8, 64, 2).unwrap();
    let checks = error_ordering(1024, 1024, &spec, CodecKind::Int8, 0..20).unwrap();
    let required = [
        "semi-rs <= full-rs",
        "semi-ag <= full-ag",
        "semi-both <= full-both",
        "full-ag <= full-both",
        "semi-ag <= semi-both",
        "10 x full-both < naive",
        "10 x semi-both < naive",
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for name in required {
        let c = checks.iter().find(|c| c.name == name).expect("known check");
        let ok = c.holds >= 19;
        pass &= ok;
        parts.push(format!("{name} {}/{}", c.holds, c.seeds));
    }
    outcome(pass, format!("need >= 19/20: {}", parts.join(", ")))
}

fn bound_convergence() -> Outcome {
    let fast = ComputeParams::uniform(1e15);
    let link = LinkParams { bandwidth: 45e9, hop_latency: 0.0 };
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for variant in [Variant::FullLoop, Variant::SemiLoop] {
        for n in [4, 8, 16] {
            for bytes in [8 * MIB, 64 * MIB] {
                let spec = PartitionSpec::for_block_size(bytes / 2, n, 64, 2).unwrap();
                let plan = SimPlan { variant, ..SimPlan::baseline(spec) }.reduce_scatter_only();
                let t = simulate_plan(&plan, bytes, &link, &fast).unwrap().total_time;
                let lb = lower_bound(variant, n, bytes as f64, link.bandwidth);
                let rel = (t - lb).abs() / lb;
                worst = worst.max(rel);
                pass &= rel <= 0.01;
            }
        }
    }
    outcome(pass, format!("worst relative gap {:.4}% (limit 1%)", worst * 100.0))
}

fn calibrated_speedup() -> Outcome {
    let p = preset();
    let spec = p.spec_for_bytes(MIB).unwrap();
    let cfg = CollectiveConfig { variant: Variant::FullLoop, quantize_rs: true, quantize_ag: true, kind: CodecKind::Int8, spec };
    let pts = size_sweep(&[MIB, 256 * MIB], &cfg, &p.link, &p.compute, p.block_size).unwrap();
    let (small, large) = (&pts[0], &pts[1]);
    let ok_small = (small.time_ratio - 1.0).abs() <= 0.05;
    let ok_large = (large.time_ratio - 0.55).abs() <= 0.05;
    let ok_ideal = large.ideal_ratio <= 1.10;
    outcome(
        ok_small && ok_large && ok_ideal,
        format!(
            "ratio at 1 MiB {:.3} (1.00 +/- 0.05), at 256 MiB {:.3} (0.55 +/- 0.05), vs ideal {:.3} (<= 1.10)",
            small.time_ratio, large.time_ratio, large.ideal_ratio
        ),
    )
}

fn pipeline_property() -> Outcome {
    let p = preset();
    let bytes = 4096 * 4096 * 2;
    let m = p.spec_for_bytes(bytes).unwrap().minishards;
    let mut runs = Vec::new();
    for u in [1, 2, 4] {
        let spec = PartitionSpec::new(8, m, u).unwrap();
        let cfg = CollectiveConfig { variant: Variant::FullLoop, quantize_rs: true, quantize_ag: true, kind: CodecKind::Int8, spec };
        let t = simulate(&cfg, bytes, &p.link, &p.compute).unwrap();
        runs.push((u, idle_time(&t).total(), t.total_time));
    }
    let idle_ok = runs[1].1 <= runs[0].1;
    let total_ok = runs.windows(2).all(|w| w[1].2 <= w[0].2);
    let desc: Vec<String> = runs.iter().map(|(u, i, t)| format!("u={u} idle {i:.3e} s total {t:.4e} s")).collect();
    outcome(idle_ok && total_ok, format!("m={m}: {}", desc.join(", ")))
}

fn quantization_bounds() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;

    for kind in [CodecKind::F8E4M3, CodecKind::F8E5M2] {
        let mut total = 0;
        let mut good = 0;
        for c in 0..=255u8 {
            if kind.is_nan_bits(c) {
                continue;
            }
            total += 1;
            good += (kind.encode_bits(kind.decode_bits(c)) == c) as usize;
        }
        pass &= good == total;
        parts.push(format!("{} round-trip {good}/{total}", kind.name()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let table = CodecKind::Int8.decode_table();
    let mut violations = 0usize;
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let chunks = rng.random_range(1..=3);
        let magnitude = 10f64.powf(rng.random_range(-6.0..6.0));
        let data: Vec<f32> = (0..chunks * CHUNK_LEN)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                (z * magnitude) as f32
            })
            .collect();
        let grid = qp1_scan(&data, CodecKind::Int8);
        let codes = qp2_apply(&data, &grid, CodecKind::Int8);
        for (i, (&x, &c)) in data.iter().zip(&codes).enumerate() {
            let s = grid.scales()[i % CHUNK_LEN] as f64;
            let err = (x as f64 - table[c as usize] as f64 * s).abs();
            if err > s / 2.0 {
                violations += 1;
            }
            worst = worst.max(err / s);
        }
    }
    pass &= violations == 0;
    parts.push(format!("INT8 over 1e5 minishards: {violations} violations, worst err/scale {worst:.4}"));

    let mut merge_failures = 0;
    for _ in 0..10_000 {
        let chunks = rng.random_range(2..=6);
        let data: Vec<f32> = (0..chunks * CHUNK_LEN).map(|_| rng.sample::<f32, _>(StandardNormal) * 100.0).collect();
        let whole = AbsMaxGrid::scan(&data, &Lanes::all());
        let cut = rng.random_range(1..chunks) * CHUNK_LEN;
        let mut parts_grid = AbsMaxGrid::scan(&data[..cut], &Lanes::all());
        parts_grid.merge(&AbsMaxGrid::scan(&data[cut..], &Lanes::all()));
        let mut halves = AbsMaxGrid::scan(&data, &Lanes::upper());
        halves.merge(&AbsMaxGrid::scan(&data, &Lanes::lower()));
        for g in [&parts_grid, &halves] {
            if g != &whole || g.to_scales(CodecKind::Int8) != whole.to_scales(CodecKind::Int8) {
                merge_failures += 1;
            }
        }
    }
    pass &= merge_failures == 0;
    parts.push(format!("partial-grid merge mismatches {merge_failures}/20000"));
    outcome(pass, parts.join(", "))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |path: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_equarx"))
            .args(["--seed", "7", "--output"])
            .arg(path)
            .args(["tradeoff", "--rows", "1024", "--cols", "1024"])
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(path).unwrap()
    };
    let a = run(&dir.path().join("a.csv"));
    let b = run(&dir.path().join("b.csv"));
    outcome(!a.is_empty() && a == b, format!("two tradeoff runs with seed 7: {} and {} bytes, identical {}", a.len(), b.len(), a == b))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "functional correctness", functional_correctness),
        (2, "4096x4096 MSE bands", mse_reproduction),
        (3, "error ordering over 20 seeds", error_orderings),
        (4, "bandwidth bound convergence", bound_convergence),
        (5, "calibrated speedup shape", calibrated_speedup),
        (6, "microshard pipelining", pipeline_property),
        (7, "quantization unit bounds", quantization_bounds),
        (8, "tradeoff determinism", determinism),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let o = check();
        println!("criterion {id} ({name}): {} : {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.pass as usize;
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion check(s) failed");
        ExitCode::FAILURE
    }
}
