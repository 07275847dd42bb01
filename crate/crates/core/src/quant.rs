//! Two-pass block-wise symmetric quantization.
//!
//! Pass one (`qp1`) reduces a minishard's chunks with abs/max into one 8x128
//! grid; each position's scale is `abs_max / format_max`. Pass two (`qp2`)
//! divides every element by the scale at its position and encodes it. A scale
//! therefore covers one position across all chunks of a minishard, so the
//! block size equals the minishard's chunk count.

use crate::error::{Error, Result};
use crate::layout::{Lanes, ShardView, CHUNK_LEN};
use crate::numerics::CodecKind;

/// Running abs-max per chunk position. Partial grids from microshards merge
/// by elementwise max before scales are derived. NaN is sticky.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsMaxGrid {
    values: [f32; CHUNK_LEN],
}

impl Default for AbsMaxGrid {
    fn default() -> Self {
        AbsMaxGrid { values: [0.0; CHUNK_LEN] }
    }
}

#[inline]
fn nan_max(a: f32, b: f32) -> f32 {
    if a.is_nan() || b.is_nan() {
        f32::NAN
    } else {
        a.max(b)
    }
}

impl AbsMaxGrid {
    pub fn scan(chunks: &[f32], lanes: &Lanes) -> Self {
        let mut g = AbsMaxGrid::default();
        g.accumulate(chunks, lanes);
        g
    }

    pub fn accumulate(&mut self, chunks: &[f32], lanes: &Lanes) {
        debug_assert_eq!(chunks.len() % CHUNK_LEN, 0);
        let r = lanes.range();
        for chunk in chunks.chunks_exact(CHUNK_LEN) {
            for (acc, &x) in self.values[r.clone()].iter_mut().zip(&chunk[r.clone()]) {
                *acc = nan_max(*acc, x.abs());
            }
        }
    }

    pub fn merge(&mut self, other: &AbsMaxGrid) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = nan_max(*a, b);
        }
    }

    pub fn values(&self) -> &[f32; CHUNK_LEN] {
        &self.values
    }

    pub fn to_scales(&self, kind: CodecKind) -> ScaleGrid {
        let max = kind.max_magnitude();
        let mut scales = [1.0f32; CHUNK_LEN];
        for (s, &a) in scales.iter_mut().zip(&self.values) {
            // zero abs-max keeps scale 1.0: every code is 0 anyway
            if a != 0.0 {
                *s = a / max;
            }
        }
        ScaleGrid { scales }
    }
}

/// Per-position scale factors for one minishard. All entries are positive
/// (or NaN when the minishard contained NaN at that position).
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGrid {
    scales: [f32; CHUNK_LEN],
}

impl ScaleGrid {
    pub fn from_scales(scales: [f32; CHUNK_LEN]) -> Result<Self> {
        if scales.iter().any(|&s| s <= 0.0 || s.is_infinite()) {
            return Err(Error::InvalidParams("scale factors must be positive and finite".into()));
        }
        Ok(ScaleGrid { scales })
    }

    pub fn uniform(scale: f32) -> Self {
        ScaleGrid { scales: [scale; CHUNK_LEN] }
    }

    pub fn scales(&self) -> &[f32; CHUNK_LEN] {
        &self.scales
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.scales[row * crate::layout::CHUNK_COLS + col]
    }

    pub fn max_scale(&self) -> f32 {
        self.scales.iter().copied().fold(0.0, f32::max)
    }
}

/// Encode `x / scale`. The quotient is formed in f64 so the int8 rounding
/// decision is exact for f32 operands.
#[inline]
fn encode_scaled(kind: CodecKind, x: f32, scale: f32) -> u8 {
    let q = x as f64 / scale as f64;
    match kind {
        CodecKind::Int8 => {
            if q.is_nan() {
                0
            } else {
                q.round_ties_even().clamp(-127.0, 127.0) as i8 as u8
            }
        }
        _ => kind.encode_bits(q as f32),
    }
}

/// Qp1 over a whole minishard.
pub fn qp1_scan(chunks: &[f32], kind: CodecKind) -> ScaleGrid {
    AbsMaxGrid::scan(chunks, &Lanes::all()).to_scales(kind)
}

/// Qp2 over a whole minishard; returns one code byte per element.
pub fn qp2_apply(chunks: &[f32], grid: &ScaleGrid, kind: CodecKind) -> Vec<u8> {
    let mut out = Vec::with_capacity(chunks.len());
    qp2_apply_lanes(chunks, grid, &Lanes::all(), kind, &mut out);
    out
}

/// Qp2 restricted to `lanes`; appends `chunks x lanes.len()` codes.
pub fn qp2_apply_lanes(chunks: &[f32], grid: &ScaleGrid, lanes: &Lanes, kind: CodecKind, out: &mut Vec<u8>) {
    let r = lanes.range();
    let scales = &grid.scales[r.clone()];
    for chunk in chunks.chunks_exact(CHUNK_LEN) {
        out.extend(chunk[r.clone()].iter().zip(scales).map(|(&x, &s)| encode_scaled(kind, x, s)));
    }
}

/// Inverse of [`qp2_apply_lanes`]: writes `code * scale` into the lane
/// positions of the chunk-strided `out`.
pub fn dequantize_lanes(codes: &[u8], grid: &ScaleGrid, lanes: &Lanes, kind: CodecKind, out: &mut [f32]) {
    let r = lanes.range();
    let table = kind.decode_table();
    let scales = &grid.scales[r.clone()];
    for (chunk, codes) in out.chunks_exact_mut(CHUNK_LEN).zip(codes.chunks_exact(lanes.len())) {
        for ((y, &c), &s) in chunk[r.clone()].iter_mut().zip(codes).zip(scales) {
            *y = table[c as usize] * s;
        }
    }
}

/// Quantize then immediately dequantize `data` in place, minishard by
/// minishard, touching only `lanes`. Equivalent to a wire round trip.
pub fn round_trip_in_place(data: &mut [f32], minishards: usize, lanes: &Lanes, kind: CodecKind) {
    let r = lanes.range();
    let table = kind.decode_table();
    for mini in data.chunks_exact_mut(data.len() / minishards) {
        let grid = AbsMaxGrid::scan(mini, lanes).to_scales(kind);
        let scales = &grid.scales[r.clone()];
        for chunk in mini.chunks_exact_mut(CHUNK_LEN) {
            for (x, &s) in chunk[r.clone()].iter_mut().zip(scales) {
                *x = table[encode_scaled(kind, *x, s) as usize] * s;
            }
        }
    }
}

/// The wire unit: scale grids for every minishard followed by the codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedShard {
    pub kind: CodecKind,
    pub shard_index: usize,
    pub lanes: Lanes,
    pub chunks: usize,
    pub grids: Vec<ScaleGrid>,
    pub payload: Vec<u8>,
}

const MAGIC: &[u8; 4] = b"EQX1";

/// Bytes of framing ahead of the metadata in [`QuantizedShard::to_bytes`].
pub const HEADER_LEN: usize = 4 + 1 + 2 + 2 + 4 + 4 + 4;

impl QuantizedShard {
    /// Quantize chunk-strided `data` split into `minishards` equal minishards.
    pub fn quantize(data: &[f32], minishards: usize, lanes: Lanes, kind: CodecKind, shard_index: usize) -> Self {
        let chunks = data.len() / CHUNK_LEN;
        let mut payload = Vec::with_capacity(chunks * lanes.len());
        let mut grids = Vec::with_capacity(minishards);
        for mini in data.chunks_exact(data.len() / minishards) {
            let grid = AbsMaxGrid::scan(mini, &lanes).to_scales(kind);
            qp2_apply_lanes(mini, &grid, &lanes, kind, &mut payload);
            grids.push(grid);
        }
        QuantizedShard { kind, shard_index, lanes, chunks, grids, payload }
    }

    pub fn from_shard(shard: &ShardView, kind: CodecKind) -> Self {
        Self::quantize(&shard.data, shard.spec.minishards, Lanes::all(), kind, shard.shard_index)
    }

    pub fn minishards(&self) -> usize {
        self.grids.len()
    }

    /// Dequantize into a chunk-strided buffer of `chunks x 1024` elements;
    /// positions outside `lanes` are left untouched.
    pub fn dequantize_into(&self, out: &mut [f32]) {
        assert_eq!(out.len(), self.chunks * CHUNK_LEN, "output buffer size");
        let m = self.grids.len();
        let out_len = out.len() / m;
        let code_len = self.payload.len() / m;
        for ((grid, dst), codes) in self
            .grids
            .iter()
            .zip(out.chunks_exact_mut(out_len))
            .zip(self.payload.chunks_exact(code_len))
        {
            dequantize_lanes(codes, grid, &self.lanes, self.kind, dst);
        }
    }

    /// Dequantized chunks; positions outside `lanes` are zero.
    pub fn dequantize(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.chunks * CHUNK_LEN];
        self.dequantize_into(&mut out);
        out
    }

    pub fn metadata_bytes(&self) -> usize {
        self.grids.len() * self.lanes.len() * 4
    }

    pub fn payload_bytes(&self) -> usize {
        self.payload.len()
    }

    /// Bytes charged on the wire: codes plus 32-bit scales.
    pub fn wire_bytes(&self) -> usize {
        self.payload_bytes() + self.metadata_bytes()
    }

    /// Serialize: header, then every minishard's scales in minishard order,
    /// then the codes. Metadata always precedes payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.wire_bytes());
        out.extend_from_slice(MAGIC);
        out.push(match self.kind {
            CodecKind::Int8 => 0,
            CodecKind::F8E4M3 => 1,
            CodecKind::F8E5M2 => 2,
        });
        let r = self.lanes.range();
        out.extend_from_slice(&(r.start as u16).to_le_bytes());
        out.extend_from_slice(&(r.end as u16).to_le_bytes());
        out.extend_from_slice(&(self.shard_index as u32).to_le_bytes());
        out.extend_from_slice(&(self.grids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.chunks as u32).to_le_bytes());
        for g in &self.grids {
            for s in &g.scales[r.clone()] {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let malformed = |m: &str| Error::Malformed(m.to_string());
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(malformed("missing header"));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let kind = match bytes[4] {
            0 => CodecKind::Int8,
            1 => CodecKind::F8E4M3,
            2 => CodecKind::F8E5M2,
            k => return Err(Error::Malformed(format!("unknown codec tag {k}"))),
        };
        let lanes = Lanes::new(u16_at(5)..u16_at(7)).map_err(|_| malformed("bad lane range"))?;
        let shard_index = u32_at(9);
        let minishards = u32_at(13);
        let chunks = u32_at(17);
        if minishards == 0 || chunks % minishards != 0 {
            return Err(malformed("chunk count not divisible by minishard count"));
        }
        let meta = minishards * lanes.len() * 4;
        let payload_len = chunks * lanes.len();
        if bytes.len() != HEADER_LEN + meta + payload_len {
            return Err(Error::Malformed(format!(
                "expected {} bytes, got {}",
                HEADER_LEN + meta + payload_len,
                bytes.len()
            )));
        }
        let mut grids = Vec::with_capacity(minishards);
        let mut at = HEADER_LEN;
        for _ in 0..minishards {
            let mut scales = [1.0f32; CHUNK_LEN];
            for s in &mut scales[lanes.range()] {
                *s = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
                at += 4;
            }
            grids.push(ScaleGrid { scales });
        }
        Ok(QuantizedShard {
            kind,
            shard_index,
            lanes,
            chunks,
            grids,
            payload: bytes[at..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{partition, PartitionSpec, TensorBuf};
    use crate::numerics::{decode, encode};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_chunks(chunks: usize, seed: u64) -> Vec<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..chunks * CHUNK_LEN).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn uniform_and_zero_inputs() {
        let ones = vec![1.0f32; 4 * CHUNK_LEN];
        let g = qp1_scan(&ones, CodecKind::Int8);
        assert!(g.scales().iter().all(|&s| s == 1.0 / 127.0));
        let zeros = vec![0.0f32; 4 * CHUNK_LEN];
        let g = qp1_scan(&zeros, CodecKind::Int8);
        assert!(g.scales().iter().all(|&s| s == 1.0));
        assert!(qp2_apply(&zeros, &g, CodecKind::Int8).iter().all(|&c| c == 0));
    }

    #[test]
    fn abs_max_over_64_chunks() {
        let mut data = vec![0.0f32; 64 * CHUNK_LEN];
        for k in 0..64 {
            data[k * CHUNK_LEN] = k as f32;
        }
        // oracle: direct max over the 64 values at (0,0)
        let expect = (0..64).map(|k| k as f32).fold(0.0, f32::max) / 127.0;
        assert_eq!(qp1_scan(&data, CodecKind::Int8).at(0, 0), expect);
        assert_eq!(expect, 63.0 / 127.0);
    }

    #[test]
    fn extremal_and_half_step() {
        let mut data = vec![0.0f32; CHUNK_LEN];
        data[0] = -2.0;
        data[CHUNK_LEN / 2] = -2.0;
        let mut second = vec![0.0f32; CHUNK_LEN];
        second[0] = 1.0;
        second[CHUNK_LEN / 2] = 2.0;
        data.extend_from_slice(&second);
        let g = qp1_scan(&data, CodecKind::Int8);
        assert_eq!(g.at(0, 0), 2.0 / 127.0);
        let codes = qp2_apply(&data, &g, CodecKind::Int8);
        assert_eq!(codes[0] as i8, -127);
        assert_eq!(codes[CHUNK_LEN / 2 + CHUNK_LEN] as i8, 127);
        // 1 / (2/127) = 63.5 -> ties to even -> 64
        assert_eq!(codes[CHUNK_LEN] as i8, 64);
        let mut out = vec![0.0; data.len()];
        dequantize_lanes(&codes, &g, &Lanes::all(), CodecKind::Int8, &mut out);
        assert_eq!(out[CHUNK_LEN], 64.0 * (2.0f32 / 127.0));
        assert!((out[CHUNK_LEN] - 128.0 / 127.0).abs() < 1e-6);
        assert_eq!(out[1], 0.0);
    }

    #[test]
    fn all_ones_round_trip_exactly() {
        for kind in CodecKind::ALL {
            let t = TensorBuf::filled(16, 128, 1.0);
            let shards = partition(&t, &PartitionSpec::new(2, 1, 1).unwrap()).unwrap();
            let q = QuantizedShard::from_shard(&shards[0], kind);
            assert!(q.dequantize().iter().all(|&x| x == 1.0), "{kind}");
        }
    }

    #[test]
    fn zero_payload_dequantizes_to_zero() {
        let q = QuantizedShard {
            kind: CodecKind::Int8,
            shard_index: 0,
            lanes: Lanes::all(),
            chunks: 2,
            grids: vec![ScaleGrid::uniform(3.5)],
            payload: vec![0; 2 * CHUNK_LEN],
        };
        assert!(q.dequantize().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normal_minishard_error_bound() {
        let data = normal_chunks(64, 11);
        let q = QuantizedShard::quantize(&data, 1, Lanes::all(), CodecKind::Int8, 0);
        let bound = 0.5 * q.grids[0].max_scale();
        let back = q.dequantize();
        let worst = data.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(worst <= bound, "{worst} > {bound}");
    }

    #[test]
    fn nan_poisons_only_its_position() {
        let mut data = normal_chunks(2, 3);
        data[5] = f32::NAN;
        let q = QuantizedShard::quantize(&data, 1, Lanes::all(), CodecKind::Int8, 0);
        let back = q.dequantize();
        assert!(back[5].is_nan() && back[CHUNK_LEN + 5].is_nan());
        assert!(back[6].is_finite());
    }

    #[test]
    fn wire_size_and_serialization() {
        let data = normal_chunks(8, 5);
        let q = QuantizedShard::quantize(&data, 2, Lanes::all(), CodecKind::F8E4M3, 3);
        assert_eq!(q.wire_bytes(), 8 * CHUNK_LEN + 2 * CHUNK_LEN * 4);
        let bytes = q.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + q.wire_bytes());
        // metadata sits between the header and the codes
        assert_eq!(&bytes[HEADER_LEN..HEADER_LEN + 4], &q.grids[0].scales()[0].to_le_bytes());
        assert_eq!(QuantizedShard::from_bytes(&bytes).unwrap(), q);

        let half = QuantizedShard::quantize(&data, 2, Lanes::lower(), CodecKind::Int8, 1);
        assert_eq!(half.wire_bytes(), 8 * 512 + 2 * 512 * 4);
        assert_eq!(QuantizedShard::from_bytes(&half.to_bytes()).unwrap(), half);
        assert!(QuantizedShard::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn lane_subsets_match_full_quantization() {
        let data = normal_chunks(4, 9);
        let full = QuantizedShard::quantize(&data, 2, Lanes::all(), CodecKind::Int8, 0).dequantize();
        let mut split = vec![0.0; data.len()];
        QuantizedShard::quantize(&data, 2, Lanes::upper(), CodecKind::Int8, 0).dequantize_into(&mut split);
        QuantizedShard::quantize(&data, 2, Lanes::lower(), CodecKind::Int8, 0).dequantize_into(&mut split);
        assert_eq!(full, split);
        let mut in_place = data.clone();
        round_trip_in_place(&mut in_place, 2, &Lanes::all(), CodecKind::Int8);
        assert_eq!(full, in_place);
    }

    #[test]
    fn smaller_blocks_do_not_hurt_on_average() {
        let mut wins = 0;
        let (mut e1, mut e2) = (0.0f64, 0.0f64);
        for seed in 0..100 {
            let data = normal_chunks(64, 1000 + seed);
            let err = |m: usize| {
                let back = QuantizedShard::quantize(&data, m, Lanes::all(), CodecKind::Int8, 0).dequantize();
                data.iter().zip(&back).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / data.len() as f64
            };
            let (a, b) = (err(1), err(2));
            e1 += a;
            e2 += b;
            if b <= a {
                wins += 1;
            }
        }
        assert!(e2 <= e1);
        assert!(wins >= 95, "m=2 beat m=1 in only {wins}/100 shards");
    }

    fn minishard() -> impl Strategy<Value = (Vec<f32>, usize)> {
        (1usize..5, 1usize..4).prop_flat_map(|(per_micro, u)| {
            (prop::collection::vec(-50.0f32..50.0, per_micro * u * CHUNK_LEN), Just(u))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn int8_error_within_half_scale((data, _u) in minishard()) {
            let grid = qp1_scan(&data, CodecKind::Int8);
            let codes = qp2_apply(&data, &grid, CodecKind::Int8);
            for (i, (&x, &c)) in data.iter().zip(&codes).enumerate() {
                let s = grid.scales()[i % CHUNK_LEN];
                // exact quantization error, before the f32 rounding of code * scale
                let y = decode(crate::numerics::Code8 { bits: c, kind: CodecKind::Int8 }) as f64 * s as f64;
                prop_assert!((x as f64 - y).abs() <= s as f64 / 2.0, "x={} y={} s={}", x, y, s);
                prop_assert!((c as i8) != -128);
            }
        }

        #[test]
        fn partial_grid_merge_is_exact((data, u) in minishard()) {
            let whole = AbsMaxGrid::scan(&data, &Lanes::all());
            let mut merged = AbsMaxGrid::default();
            let len = data.len() / u;
            for micro in data.chunks_exact(len).rev() {
                merged.merge(&AbsMaxGrid::scan(micro, &Lanes::all()));
            }
            prop_assert_eq!(&whole, &merged);
            prop_assert_eq!(whole.to_scales(CodecKind::F8E5M2), merged.to_scales(CodecKind::F8E5M2));
        }

        #[test]
        fn blocks_are_independent((data, _u) in minishard(), delta in 1.0f32..100.0) {
            let mut other = data.clone();
            other.extend(std::iter::repeat_n(0.5f32, data.len()));
            let before = QuantizedShard::quantize(&other, 2, Lanes::all(), CodecKind::Int8, 0);
            let half = data.len();
            for x in &mut other[half..] {
                *x += delta;
            }
            let after = QuantizedShard::quantize(&other, 2, Lanes::all(), CodecKind::Int8, 0);
            prop_assert_eq!(&before.grids[0], &after.grids[0]);
            prop_assert_eq!(&before.payload[..half], &after.payload[..half]);
        }

        #[test]
        fn abs_max_elements_round_trip(scale_exp in -20i32..20, v in 0.5f32..1.0) {
            // abs-max maps to +-127 and back up to one rounding
            let x = v * 2f32.powi(scale_exp);
            let mut data = vec![0.0f32; 2 * CHUNK_LEN];
            data[3] = x;
            data[CHUNK_LEN + 4] = -x;
            let grid = qp1_scan(&data, CodecKind::Int8);
            let c = encode(x / grid.scales()[3], CodecKind::Int8);
            prop_assert_eq!(c.bits as i8, 127);
            let y = decode(c) * grid.scales()[3];
            prop_assert!((x - y).abs() <= x * f32::EPSILON);
        }
    }
}
