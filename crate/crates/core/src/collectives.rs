//! Value-level ring collectives: reduce-scatter (full-loop and semi-loop),
//! all-gather, and their AllReduce composition, with optional block-wise
//! quantization on either stage. Also the BF16 baseline and the naive
//! cast-to-8-bit strawman.
//!
//! Ring direction `Cw` moves data from device `d` to `d + 1`, `Ccw` from
//! `d` to `d - 1`. Full-loop runs two counter-rotating rings: sublane rows
//! 0..4 of every chunk travel clockwise, rows 4..8 counter-clockwise. Scale
//! factors are per chunk position, so splitting by rows leaves block sizes
//! untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{Lanes, PartitionSpec, ShardView, TensorBuf};
use crate::numerics::{round_to_bf16, CodecKind};
use crate::quant::QuantizedShard;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    FullLoop,
    SemiLoop,
}

impl Variant {
    pub const fn name(self) -> &'static str {
        match self {
            Variant::FullLoop => "full-loop",
            Variant::SemiLoop => "semi-loop",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" | "full-loop" | "full_loop" => Ok(Variant::FullLoop),
            "semi" | "semi-loop" | "semi_loop" => Ok(Variant::SemiLoop),
            other => Err(format!("unknown variant `{other}` (expected full-loop or semi-loop)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// `d -> d + 1`
    Cw,
    /// `d -> d - 1`
    Ccw,
}

impl Direction {
    pub fn next(self, device: usize, n: usize) -> usize {
        match self {
            Direction::Cw => (device + 1) % n,
            Direction::Ccw => (device + n - 1) % n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveConfig {
    pub variant: Variant,
    pub quantize_rs: bool,
    pub quantize_ag: bool,
    pub kind: CodecKind,
    pub spec: PartitionSpec,
}

impl CollectiveConfig {
    /// Unquantized full-loop, i.e. the BF16 baseline.
    pub fn baseline(spec: PartitionSpec) -> Self {
        CollectiveConfig { variant: Variant::FullLoop, quantize_rs: false, quantize_ag: false, kind: CodecKind::Int8, spec }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.variant == Variant::SemiLoop && self.spec.num_devices % 2 != 0 {
            return Err(Error::SemiLoopOddN(self.spec.num_devices));
        }
        Ok(())
    }

    pub fn stages_label(&self) -> &'static str {
        match (self.quantize_rs, self.quantize_ag) {
            (false, false) => "none",
            (true, false) => "rs",
            (false, true) => "ag",
            (true, true) => "both",
        }
    }
}

/// Devices feeding one arc of a reduction, in the order partial sums flow.
/// The last device sends to the shard's owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub devices: Vec<usize>,
    pub direction: Direction,
}

/// How the lanes `lanes` of shard `shard` are reduced: every chain runs to
/// completion and the owner adds the chains' results in the listed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    pub shard: usize,
    pub lanes: Lanes,
    pub chains: Vec<Chain>,
}

/// One path a finished shard takes during all-gather, starting at its owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatherRoute {
    pub shard: usize,
    pub lanes: Lanes,
    pub direction: Direction,
    pub path: Vec<usize>,
}

fn ring(n: usize, start: usize, direction: Direction, len: usize) -> Vec<usize> {
    std::iter::successors(Some(start % n), |&d| Some(direction.next(d, n))).take(len).collect()
}

/// Reduce-scatter plan for every shard.
pub fn reduction_plan(variant: Variant, n: usize) -> Result<Vec<ShardPlan>> {
    if n < 2 {
        return Err(Error::InvalidSpec(format!("need at least 2 devices, got {n}")));
    }
    let mut plans = Vec::new();
    for s in 0..n {
        match variant {
            Variant::FullLoop => {
                plans.push(ShardPlan {
                    shard: s,
                    lanes: Lanes::upper(),
                    chains: vec![Chain { devices: ring(n, s + 1, Direction::Cw, n - 1), direction: Direction::Cw }],
                });
                plans.push(ShardPlan {
                    shard: s,
                    lanes: Lanes::lower(),
                    chains: vec![Chain { devices: ring(n, s + n - 1, Direction::Ccw, n - 1), direction: Direction::Ccw }],
                });
            }
            Variant::SemiLoop => {
                if n % 2 != 0 {
                    return Err(Error::SemiLoopOddN(n));
                }
                let half = n / 2;
                let mut chains = Vec::with_capacity(2);
                if half > 1 {
                    // s-(N/2-1) -> ... -> s-1 -> s
                    chains.push(Chain { devices: ring(n, s + n - (half - 1), Direction::Cw, half - 1), direction: Direction::Cw });
                }
                // s+N/2 -> ... -> s+1 -> s, merged last
                chains.push(Chain { devices: ring(n, s + half, Direction::Ccw, half), direction: Direction::Ccw });
                plans.push(ShardPlan { shard: s, lanes: Lanes::all(), chains });
            }
        }
    }
    Ok(plans)
}

/// All-gather routes for every shard: both reduce-scatter variants finish
/// with the same two counter-rotating half-lane rings. Quantized shards are
/// forwarded unchanged along each route.
pub fn gather_plan(n: usize) -> Result<Vec<GatherRoute>> {
    if n < 2 {
        return Err(Error::InvalidSpec(format!("need at least 2 devices, got {n}")));
    }
    let mut routes = Vec::new();
    for s in 0..n {
        routes.push(GatherRoute { shard: s, lanes: Lanes::upper(), direction: Direction::Cw, path: ring(n, s, Direction::Cw, n) });
        routes.push(GatherRoute { shard: s, lanes: Lanes::lower(), direction: Direction::Ccw, path: ring(n, s, Direction::Ccw, n) });
    }
    Ok(routes)
}

/// What a single reduce-scatter hop does to the data it carries.
#[derive(Debug, Clone, Copy)]
enum Hop {
    /// BF16 wire format, FP32 addition.
    Bf16,
    /// Block-wise quantized wire format, FP32 addition.
    Quantized(CodecKind),
    /// Raw 8-bit casts, no scaling.
    Cast(CodecKind),
}

impl Hop {
    #[inline]
    fn inject(self, x: f32) -> f32 {
        match self {
            Hop::Bf16 | Hop::Quantized(_) => round_to_bf16(x),
            Hop::Cast(kind) => kind.decode_bits(kind.encode_bits(x)),
        }
    }

    /// Replace the lanes of `buf` with what the receiver sees.
    fn transmit(self, buf: &mut [f32], lanes: &Lanes, minishards: usize, shard: usize) {
        let r = lanes.range();
        match self {
            Hop::Bf16 => for_lanes(buf, &r, |x| *x = round_to_bf16(*x)),
            Hop::Cast(kind) => for_lanes(buf, &r, |x| *x = kind.decode_bits(kind.encode_bits(*x))),
            Hop::Quantized(kind) => {
                let q = QuantizedShard::quantize(buf, minishards, lanes.clone(), kind, shard);
                q.dequantize_into(buf);
            }
        }
    }
}

fn for_lanes(buf: &mut [f32], r: &std::ops::Range<usize>, mut f: impl FnMut(&mut f32)) {
    for chunk in buf.chunks_exact_mut(crate::layout::CHUNK_LEN) {
        chunk[r.clone()].iter_mut().for_each(&mut f);
    }
}

fn for_lanes_zip(buf: &mut [f32], src: &[f32], r: &std::ops::Range<usize>, mut f: impl FnMut(&mut f32, f32)) {
    let len = crate::layout::CHUNK_LEN;
    for (chunk, s) in buf.chunks_exact_mut(len).zip(src.chunks_exact(len)) {
        for (y, &x) in chunk[r.clone()].iter_mut().zip(&s[r.clone()]) {
            f(y, x);
        }
    }
}

fn check_inputs(inputs: &[TensorBuf], spec: &PartitionSpec) -> Result<()> {
    spec.validate()?;
    if inputs.len() != spec.num_devices {
        return Err(Error::ShapeMismatch(format!("{} inputs for {} devices", inputs.len(), spec.num_devices)));
    }
    let first = &inputs[0];
    if let Some(bad) = inputs.iter().position(|t| !t.same_shape(first) || t.len() != t.rows * t.cols) {
        return Err(Error::ShapeMismatch(format!("input {bad} differs in shape from input 0")));
    }
    spec.check(first.len())
}

fn reduce_scatter_with(inputs: &[TensorBuf], variant: Variant, spec: &PartitionSpec, hop: Hop) -> Result<Vec<ShardView>> {
    check_inputs(inputs, spec)?;
    let n = spec.num_devices;
    let elements = inputs[0].len();
    let shard_len = spec.shard_len(elements);
    let mut results: Vec<ShardView> = (0..n)
        .map(|s| ShardView { shard_index: s, data: vec![0.0; shard_len], spec: *spec })
        .collect();
    let mut partial = vec![0.0f32; shard_len];
    for plan in reduction_plan(variant, n)? {
        let s = plan.shard;
        let range = spec.shard_range(elements, s);
        let local = |d: usize| &inputs[d].data[range.clone()];
        let r = plan.lanes.range();
        let acc = &mut results[s].data;
        for_lanes_zip(acc, local(s), &r, |y, x| *y = hop.inject(x));
        for chain in &plan.chains {
            let (first, rest) = chain.devices.split_first().expect("chains are never empty");
            for_lanes_zip(&mut partial, local(*first), &r, |y, x| *y = hop.inject(x));
            for &d in rest {
                hop.transmit(&mut partial, &plan.lanes, spec.minishards, s);
                for_lanes_zip(&mut partial, local(d), &r, |y, x| *y += hop.inject(x));
            }
            hop.transmit(&mut partial, &plan.lanes, spec.minishards, s);
            for_lanes_zip(acc, &partial, &r, |y, x| *y += x);
        }
    }
    Ok(results)
}

/// Reduce-scatter in the variant and quantization mode `cfg` selects.
/// Shard `i` of the sum lands on device `i`, in FP32.
pub fn reduce_scatter(inputs: &[TensorBuf], cfg: &CollectiveConfig) -> Result<Vec<ShardView>> {
    cfg.validate()?;
    let hop = if cfg.quantize_rs { Hop::Quantized(cfg.kind) } else { Hop::Bf16 };
    reduce_scatter_with(inputs, cfg.variant, &cfg.spec, hop)
}

pub fn reduce_scatter_full_loop(inputs: &[TensorBuf], cfg: &CollectiveConfig) -> Result<Vec<ShardView>> {
    if cfg.variant != Variant::FullLoop {
        return Err(Error::InvalidParams("reduce_scatter_full_loop called with a semi-loop config".into()));
    }
    reduce_scatter(inputs, cfg)
}

pub fn reduce_scatter_semi_loop(inputs: &[TensorBuf], cfg: &CollectiveConfig) -> Result<Vec<ShardView>> {
    if cfg.variant != Variant::SemiLoop {
        return Err(Error::InvalidParams("reduce_scatter_semi_loop called with a full-loop config".into()));
    }
    reduce_scatter(inputs, cfg)
}

fn gather_one(shards: &[ShardView], quantize: bool, kind: CodecKind, spec: &PartitionSpec, rows: usize, cols: usize) -> Result<TensorBuf> {
    let n = spec.num_devices;
    let mut slots: Vec<Option<&ShardView>> = vec![None; n];
    for s in shards {
        if s.shard_index < n {
            slots[s.shard_index] = Some(s);
        }
    }
    if let Some(missing) = slots.iter().position(Option::is_none) {
        return Err(Error::MissingShard(missing));
    }
    let total: usize = slots.iter().flatten().map(|s| s.data.len()).sum();
    if total != rows * cols {
        return Err(Error::ShapeMismatch(format!("{total} gathered elements for a {rows}x{cols} tensor")));
    }
    let mut data = Vec::with_capacity(total);
    for shard in slots.into_iter().flatten() {
        if quantize {
            // quantized once at the owner, forwarded unchanged, dequantized on arrival
            let q = QuantizedShard::quantize(&shard.data, spec.minishards, Lanes::all(), kind, shard.shard_index);
            let start = data.len();
            data.resize(start + shard.data.len(), 0.0);
            q.dequantize_into(&mut data[start..]);
        } else {
            data.extend_from_slice(&shard.data);
        }
    }
    data.iter_mut().for_each(|x| *x = round_to_bf16(*x));
    TensorBuf::new(data, rows, cols)
}

/// All-gather of reduce-scatter results. Every device ends with the same
/// BF16-rounded tensor.
pub fn all_gather(shards: &[ShardView], quantize: bool, kind: CodecKind, spec: &PartitionSpec, rows: usize, cols: usize) -> Result<Vec<TensorBuf>> {
    let t = gather_one(shards, quantize, kind, spec, rows, cols)?;
    Ok(vec![t; spec.num_devices])
}

/// AllReduce as reduce-scatter then all-gather; returns every device's copy.
pub fn all_reduce(inputs: &[TensorBuf], cfg: &CollectiveConfig) -> Result<Vec<TensorBuf>> {
    let t = all_reduce_one(inputs, cfg)?;
    Ok(vec![t; cfg.spec.num_devices])
}

/// Like [`all_reduce`] but returns a single device's copy (all are identical).
pub fn all_reduce_one(inputs: &[TensorBuf], cfg: &CollectiveConfig) -> Result<TensorBuf> {
    let shards = reduce_scatter(inputs, cfg)?;
    gather_one(&shards, cfg.quantize_ag, cfg.kind, &cfg.spec, inputs[0].rows, inputs[0].cols)
}

/// Reference BF16 AllReduce: full-loop, BF16 on every hop.
pub fn baseline_allreduce_bf16(inputs: &[TensorBuf], spec: &PartitionSpec) -> Result<Vec<TensorBuf>> {
    all_reduce(inputs, &CollectiveConfig::baseline(*spec))
}

pub fn baseline_allreduce_bf16_one(inputs: &[TensorBuf], spec: &PartitionSpec) -> Result<TensorBuf> {
    all_reduce_one(inputs, &CollectiveConfig::baseline(*spec))
}

/// Cast inputs straight to `kind`, add in FP32 and re-cast at every hop,
/// forward codes during all-gather. No scaling, so sums saturate.
pub fn naive_lowp_allreduce(inputs: &[TensorBuf], kind: CodecKind, spec: &PartitionSpec) -> Result<Vec<TensorBuf>> {
    let t = naive_lowp_allreduce_one(inputs, kind, spec)?;
    Ok(vec![t; spec.num_devices])
}

pub fn naive_lowp_allreduce_one(inputs: &[TensorBuf], kind: CodecKind, spec: &PartitionSpec) -> Result<TensorBuf> {
    let hop = Hop::Cast(kind);
    let mut shards = reduce_scatter_with(inputs, Variant::FullLoop, spec, hop)?;
    for s in &mut shards {
        hop.transmit(&mut s.data, &Lanes::all(), spec.minishards, s.shard_index);
    }
    gather_one(&shards, false, kind, spec, inputs[0].rows, inputs[0].cols)
}
