//! Error metrics and the experiment harnesses built on them.
//!
//! Inputs come from [`device_inputs`]: ChaCha8 (`rand_chacha`) seeded with
//! `seed + device` through `SeedableRng::seed_from_u64`, standard normal
//! samples via `rand_distr::StandardNormal` as `f32`, row-major, rounded to
//! BF16. The generator is identified by [`GENERATOR`].

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::collectives::{all_reduce_one, baseline_allreduce_bf16_one, naive_lowp_allreduce_one, CollectiveConfig, Variant};
use crate::error::{Error, Result};
use crate::layout::{PartitionSpec, TensorBuf};
use crate::numerics::{round_to_bf16, CodecKind};
use crate::simnet::{simulate_plan, ComputeParams, LinkParams, Preset, SimPlan};

pub const GENERATOR: &str = "chacha8-stdnormal-bf16/1";

/// Per-device N(0,1) inputs, BF16-exact.
pub fn device_inputs(n: usize, rows: usize, cols: usize, seed: u64) -> Vec<TensorBuf> {
    (0..n)
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(d as u64));
            let data = (0..rows * cols).map(|_| round_to_bf16(rng.sample::<f32, _>(StandardNormal))).collect();
            TensorBuf { data, rows, cols }
        })
        .collect()
}

/// Mean squared difference, accumulated in f64.
pub fn mse(a: &TensorBuf, b: &TensorBuf) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    Baseline,
    Naive(CodecKind),
    Equarx { variant: Variant, rs: bool, ag: bool },
}

impl Flavor {
    /// Baseline, naive E5M2, then {full, semi} x {rs, ag, both}.
    pub fn study_order() -> Vec<Flavor> {
        let mut v = vec![Flavor::Baseline, Flavor::Naive(CodecKind::F8E5M2)];
        for variant in [Variant::FullLoop, Variant::SemiLoop] {
            for (rs, ag) in [(true, false), (false, true), (true, true)] {
                v.push(Flavor::Equarx { variant, rs, ag });
            }
        }
        v
    }

    pub fn name(&self) -> &'static str {
        match self {
            Flavor::Baseline => "baseline",
            Flavor::Naive(_) => "naive",
            Flavor::Equarx { variant, rs, ag } => match (variant, rs, ag) {
                (Variant::FullLoop, false, false) => "full-bf16",
                (Variant::SemiLoop, false, false) => "semi-bf16",
                (Variant::FullLoop, true, false) => "full-rs",
                (Variant::FullLoop, false, true) => "full-ag",
                (Variant::FullLoop, _, _) => "full-both",
                (Variant::SemiLoop, true, false) => "semi-rs",
                (Variant::SemiLoop, false, true) => "semi-ag",
                (Variant::SemiLoop, _, _) => "semi-both",
            },
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            Flavor::Equarx { variant, .. } => *variant,
            _ => Variant::FullLoop,
        }
    }

    pub fn stages(&self) -> &'static str {
        match self {
            Flavor::Baseline => "none",
            Flavor::Naive(_) => "both",
            Flavor::Equarx { rs: true, ag: false, .. } => "rs",
            Flavor::Equarx { rs: false, ag: true, .. } => "ag",
            Flavor::Equarx { rs: true, ag: true, .. } => "both",
            Flavor::Equarx { .. } => "none",
        }
    }

    pub fn codec(&self, kind: CodecKind) -> &'static str {
        match self {
            Flavor::Baseline => "bf16",
            Flavor::Naive(k) => k.name(),
            Flavor::Equarx { .. } => kind.name(),
        }
    }

    pub fn config(&self, kind: CodecKind, spec: PartitionSpec) -> Option<CollectiveConfig> {
        match *self {
            Flavor::Equarx { variant, rs, ag } => Some(CollectiveConfig { variant, quantize_rs: rs, quantize_ag: ag, kind, spec }),
            _ => None,
        }
    }

    /// Output of this flavor's AllReduce on one device.
    pub fn run(&self, inputs: &[TensorBuf], kind: CodecKind, spec: &PartitionSpec) -> Result<TensorBuf> {
        match self {
            Flavor::Baseline => baseline_allreduce_bf16_one(inputs, spec),
            Flavor::Naive(k) => naive_lowp_allreduce_one(inputs, *k, spec),
            Flavor::Equarx { .. } => all_reduce_one(inputs, &self.config(kind, *spec).expect("equarx flavor")),
        }
    }

    pub fn plan(&self, kind: CodecKind, spec: PartitionSpec) -> SimPlan {
        match self {
            Flavor::Baseline => SimPlan::baseline(spec),
            Flavor::Naive(k) => SimPlan::naive(*k, spec),
            Flavor::Equarx { .. } => SimPlan::from_config(&self.config(kind, spec).expect("equarx flavor")),
        }
    }
}

/// One CSV/JSON row of a study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlavorResult {
    pub flavor: String,
    pub variant: String,
    pub stages: String,
    pub codec: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub m: usize,
    pub u: usize,
    pub seed: u64,
    pub mse: f64,
    pub predicted_speedup: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyParams {
    pub rows: usize,
    pub cols: usize,
    pub spec: PartitionSpec,
    pub kind: CodecKind,
    pub seed: u64,
    pub link: LinkParams,
    pub compute: ComputeParams,
}

impl StudyParams {
    /// Partitioning from the preset's block size, timing from its rates.
    pub fn from_preset(preset: &Preset, rows: usize, cols: usize, seed: u64) -> Result<Self> {
        let spec = PartitionSpec::for_block_size(rows * cols, preset.num_devices, preset.block_size, preset.microshards)?;
        Ok(StudyParams { rows, cols, spec, kind: CodecKind::Int8, seed, link: preset.link, compute: preset.compute })
    }

    fn tensor_bytes(&self) -> usize {
        self.rows * self.cols * 2
    }
}

/// Baseline, naive and every EQuARX flavor on the same inputs: MSE against
/// the baseline output and predicted speedup over the baseline.
pub fn tradeoff_study(p: &StudyParams) -> Result<Vec<FlavorResult>> {
    let flavors = Flavor::study_order();
    for f in &flavors {
        if let Some(cfg) = f.config(p.kind, p.spec) {
            cfg.validate()?;
        }
    }
    p.spec.check(p.rows * p.cols)?;
    let inputs = device_inputs(p.spec.num_devices, p.rows, p.cols, p.seed);
    let baseline = Flavor::Baseline.run(&inputs, p.kind, &p.spec)?;
    let t_base = simulate_plan(&SimPlan::baseline(p.spec), p.tensor_bytes(), &p.link, &p.compute)?.total_time;
    let mut out = Vec::with_capacity(flavors.len());
    for f in flavors {
        let err = if f == Flavor::Baseline { 0.0 } else { mse(&baseline, &f.run(&inputs, p.kind, &p.spec)?)? };
        let t = simulate_plan(&f.plan(p.kind, p.spec), p.tensor_bytes(), &p.link, &p.compute)?.total_time;
        out.push(FlavorResult {
            flavor: f.name().into(),
            variant: f.variant().name().into(),
            stages: f.stages().into(),
            codec: f.codec(p.kind).into(),
            n: p.spec.num_devices,
            rows: p.rows,
            cols: p.cols,
            m: p.spec.minishards,
            u: p.spec.microshards,
            seed: p.seed,
            mse: err,
            predicted_speedup: t_base / t,
        });
    }
    Ok(out)
}

/// MSE of every EQuARX flavor and naive E5M2 against the baseline, by name.
pub fn flavor_errors(rows: usize, cols: usize, spec: &PartitionSpec, kind: CodecKind, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let inputs = device_inputs(spec.num_devices, rows, cols, seed);
    let baseline = Flavor::Baseline.run(&inputs, kind, spec)?;
    Flavor::study_order()
        .into_iter()
        .skip(1)
        .map(|f| Ok((f.name(), mse(&baseline, &f.run(&inputs, kind, spec)?)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingCheck {
    pub name: String,
    pub holds: usize,
    pub seeds: usize,
}

impl OrderingCheck {
    pub fn passes(&self, min_fraction: f64) -> bool {
        self.holds as f64 >= min_fraction * self.seeds as f64
    }
}

/// How often each expected error ordering holds over `seeds`.
pub fn error_ordering(rows: usize, cols: usize, spec: &PartitionSpec, kind: CodecKind, seeds: impl IntoIterator<Item = u64>) -> Result<Vec<OrderingCheck>> {
    type Check = (&'static str, fn(&dyn Fn(&str) -> f64) -> bool);
    let checks: [Check; 10] = [
        ("semi-rs <= full-rs", |e| e("semi-rs") <= e("full-rs")),
        ("semi-ag <= full-ag", |e| e("semi-ag") <= e("full-ag")),
        ("semi-both <= full-both", |e| e("semi-both") <= e("full-both")),
        ("full-ag <= full-both", |e| e("full-ag") <= e("full-both")),
        ("semi-ag <= semi-both", |e| e("semi-ag") <= e("semi-both")),
        ("full-rs <= full-both", |e| e("full-rs") <= e("full-both")),
        ("semi-rs <= semi-both", |e| e("semi-rs") <= e("semi-both")),
        ("10 x full-both < naive", |e| 10.0 * e("full-both") < e("naive")),
        ("10 x semi-both < naive", |e| 10.0 * e("semi-both") < e("naive")),
        ("naive is finite", |e| e("naive").is_finite()),
    ];
    let mut out: Vec<OrderingCheck> = checks.iter().map(|(name, _)| OrderingCheck { name: name.to_string(), holds: 0, seeds: 0 }).collect();
    for seed in seeds {
        let errors = flavor_errors(rows, cols, spec, kind, seed)?;
        let lookup = |name: &str| errors.iter().find(|(n, _)| *n == name).map(|(_, v)| *v).expect("known flavor");
        for (c, (_, check)) in out.iter_mut().zip(&checks) {
            c.seeds += 1;
            c.holds += check(&lookup) as usize;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub bytes: usize,
    pub m: usize,
    pub baseline_s: f64,
    pub equarx_s: f64,
    pub ideal_s: f64,
    pub time_ratio: f64,
    pub ideal_ratio: f64,
}

/// Predicted EQuARX/baseline time per tensor size. Each size gets
/// `preset.block_size` chunks per scale factor; `cfg.spec` only supplies the
/// microshard count and device count.
pub fn size_sweep(sizes: &[usize], cfg: &CollectiveConfig, link: &LinkParams, compute: &ComputeParams, block_size: usize) -> Result<Vec<SweepPoint>> {
    cfg.validate()?;
    sizes
        .iter()
        .map(|&bytes| {
            let spec = PartitionSpec::for_block_size(bytes / 2, cfg.spec.num_devices, block_size, cfg.spec.microshards)?;
            let run = |plan: SimPlan| simulate_plan(&plan, bytes, link, compute).map(|t| t.total_time);
            let baseline_s = run(SimPlan::baseline(spec))?;
            let equarx_s = run(SimPlan::from_config(&CollectiveConfig { spec, ..*cfg }))?;
            let ideal_s = run(SimPlan::ideal_compressed(spec))?;
            Ok(SweepPoint { bytes, m: spec.minishards, baseline_s, equarx_s, ideal_s, time_ratio: equarx_s / baseline_s, ideal_ratio: equarx_s / ideal_s })
        })
        .collect()
}

pub fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Malformed(e.to_string()))?;
    }
    out.flush().map_err(|e| Error::Malformed(e.to_string()))
}

pub fn write_json<W: Write, T: Serialize>(mut w: W, rows: &[T]) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, rows).map_err(|e| Error::Malformed(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::Malformed(e.to_string()))
}
