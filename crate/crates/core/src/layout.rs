//! Shard / minishard / microshard partitioning over 8x128 chunks.
//!
//! A tensor is linearized row-major and cut into consecutive 1024-element
//! chunks (one 8x128 vector register each). Shard `i` is the `i`-th
//! contiguous run of `chunks / N` chunks, each shard splits into `m`
//! minishards, and each minishard into `u` microshards.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHUNK_ROWS: usize = 8;
pub const CHUNK_COLS: usize = 128;
pub const CHUNK_LEN: usize = CHUNK_ROWS * CHUNK_COLS;

/// A contiguous range of positions inside a chunk (row-major within the 8x128
/// tile). Scale factors are per position, so lanes are independent units of
/// quantization.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Lanes(Range<usize>);

impl Lanes {
    pub const fn all() -> Self {
        Lanes(0..CHUNK_LEN)
    }

    /// Sublane rows 0..4 of every chunk.
    pub const fn upper() -> Self {
        Lanes(0..CHUNK_LEN / 2)
    }

    /// Sublane rows 4..8 of every chunk.
    pub const fn lower() -> Self {
        Lanes(CHUNK_LEN / 2..CHUNK_LEN)
    }

    pub fn new(range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > CHUNK_LEN {
            return Err(Error::InvalidParams(format!("lane range {range:?} outside 0..{CHUNK_LEN}")));
        }
        Ok(Lanes(range))
    }

    pub fn range(&self) -> Range<usize> {
        self.0.clone()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_all(&self) -> bool {
        self.0 == (0..CHUNK_LEN)
    }
}

/// Flat row-major buffer with a logical 2-D shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBuf {
    pub data: Vec<f32>,
    pub rows: usize,
    pub cols: usize,
}

impl TensorBuf {
    pub fn new(data: Vec<f32>, rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} elements for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(TensorBuf { data, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        TensorBuf { data: vec![0.0; rows * cols], rows, cols }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        TensorBuf { data: vec![value; rows * cols], rows, cols }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &TensorBuf) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// How a tensor is split across devices and inside each shard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_devices: usize,
    pub minishards: usize,
    pub microshards: usize,
}

/// Where one element of the linearized tensor lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ElementLocation {
    pub shard: usize,
    pub minishard: usize,
    pub microshard: usize,
    /// Chunk index within the microshard.
    pub chunk: usize,
    /// Position within the 8x128 chunk, row-major.
    pub position: usize,
}

impl PartitionSpec {
    pub fn new(num_devices: usize, minishards: usize, microshards: usize) -> Result<Self> {
        let spec = PartitionSpec { num_devices, minishards, microshards };
        spec.validate()?;
        Ok(spec)
    }

    /// Picks `m` so each scale factor covers `block_size` chunks.
    pub fn for_block_size(elements: usize, num_devices: usize, block_size: usize, microshards: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidSpec("block size must be positive".into()));
        }
        let probe = PartitionSpec::new(num_devices, 1, 1)?;
        probe.check(elements)?;
        let per_shard = elements / (num_devices * CHUNK_LEN);
        if per_shard % block_size != 0 {
            return Err(Error::Divisibility {
                elements,
                factor: "block_size",
                detail: format!("{per_shard} chunks per shard not a multiple of block size {block_size}"),
            });
        }
        let spec = PartitionSpec::new(num_devices, per_shard / block_size, microshards)?;
        spec.check(elements)?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_devices < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 devices, got {}", self.num_devices)));
        }
        if self.minishards == 0 || self.microshards == 0 {
            return Err(Error::InvalidSpec("minishards and microshards must be at least 1".into()));
        }
        Ok(())
    }

    /// Checks that `elements` splits evenly at every level, naming the first
    /// factor that does not.
    pub fn check(&self, elements: usize) -> Result<()> {
        self.validate()?;
        if elements == 0 || elements % CHUNK_LEN != 0 {
            return Err(Error::Divisibility {
                elements,
                factor: "chunk",
                detail: format!("not a whole number of {CHUNK_ROWS}x{CHUNK_COLS} chunks"),
            });
        }
        let chunks = elements / CHUNK_LEN;
        if chunks % self.num_devices != 0 {
            return Err(Error::Divisibility {
                elements,
                factor: "num_devices",
                detail: format!("{chunks} chunks across {} devices", self.num_devices),
            });
        }
        let per_shard = chunks / self.num_devices;
        if per_shard % self.minishards != 0 {
            return Err(Error::Divisibility {
                elements,
                factor: "minishards",
                detail: format!("{per_shard} chunks per shard into {} minishards", self.minishards),
            });
        }
        let per_mini = per_shard / self.minishards;
        if per_mini % self.microshards != 0 {
            return Err(Error::Divisibility {
                elements,
                factor: "microshards",
                detail: format!("{per_mini} chunks per minishard into {} microshards", self.microshards),
            });
        }
        Ok(())
    }

    pub fn chunks_per_shard(&self, elements: usize) -> usize {
        elements / (self.num_devices * CHUNK_LEN)
    }

    /// Chunks reduced into one scale factor.
    pub fn block_size(&self, elements: usize) -> usize {
        self.chunks_per_shard(elements) / self.minishards
    }

    pub fn shard_len(&self, elements: usize) -> usize {
        elements / self.num_devices
    }

    pub fn minishard_len(&self, elements: usize) -> usize {
        self.shard_len(elements) / self.minishards
    }

    pub fn microshard_len(&self, elements: usize) -> usize {
        self.minishard_len(elements) / self.microshards
    }

    pub fn shard_range(&self, elements: usize, shard: usize) -> Range<usize> {
        let len = self.shard_len(elements);
        shard * len..(shard + 1) * len
    }

    pub fn locate(&self, elements: usize, index: usize) -> ElementLocation {
        let shard_len = self.shard_len(elements);
        let mini_len = self.minishard_len(elements);
        let micro_len = self.microshard_len(elements);
        let within_shard = index % shard_len;
        let within_mini = within_shard % mini_len;
        let within_micro = within_mini % micro_len;
        ElementLocation {
            shard: index / shard_len,
            minishard: within_shard / mini_len,
            microshard: within_mini / micro_len,
            chunk: within_micro / CHUNK_LEN,
            position: within_micro % CHUNK_LEN,
        }
    }
}

/// One device's shard, stored as consecutive 8x128 chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardView {
    pub shard_index: usize,
    pub data: Vec<f32>,
    pub spec: PartitionSpec,
}

impl ShardView {
    pub fn num_chunks(&self) -> usize {
        self.data.len() / CHUNK_LEN
    }

    pub fn chunks_per_minishard(&self) -> usize {
        self.num_chunks() / self.spec.minishards
    }

    pub fn block_size(&self) -> usize {
        self.chunks_per_minishard()
    }

    pub fn chunk(&self, i: usize) -> &[f32] {
        &self.data[i * CHUNK_LEN..(i + 1) * CHUNK_LEN]
    }

    pub fn chunks(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(CHUNK_LEN)
    }

    pub fn minishard(&self, k: usize) -> &[f32] {
        let len = self.data.len() / self.spec.minishards;
        &self.data[k * len..(k + 1) * len]
    }

    pub fn minishards(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.data.len() / self.spec.minishards)
    }

    pub fn microshard(&self, k: usize, j: usize) -> &[f32] {
        let mini = self.minishard(k);
        let len = mini.len() / self.spec.microshards;
        &mini[j * len..(j + 1) * len]
    }
}

pub fn partition(t: &TensorBuf, spec: &PartitionSpec) -> Result<Vec<ShardView>> {
    spec.check(t.len())?;
    Ok(t.data
        .chunks_exact(spec.shard_len(t.len()))
        .enumerate()
        .map(|(i, d)| ShardView { shard_index: i, data: d.to_vec(), spec: *spec })
        .collect())
}

/// Inverse of [`partition`]; shards may arrive in any order.
pub fn reassemble(shards: &[ShardView], rows: usize, cols: usize) -> Result<TensorBuf> {
    let Some(first) = shards.first() else {
        return Err(Error::MissingShard(0));
    };
    let n = first.spec.num_devices;
    let mut slots: Vec<Option<&ShardView>> = vec![None; n];
    for s in shards {
        if s.shard_index >= n {
            return Err(Error::ShapeMismatch(format!("shard index {} out of range for {n} devices", s.shard_index)));
        }
        if slots[s.shard_index].replace(s).is_some() {
            return Err(Error::ShapeMismatch(format!("shard {} supplied twice", s.shard_index)));
        }
    }
    if let Some(missing) = slots.iter().position(Option::is_none) {
        return Err(Error::MissingShard(missing));
    }
    let total: usize = shards.iter().map(|s| s.data.len()).sum();
    if total != rows * cols {
        return Err(Error::ShapeMismatch(format!("{total} elements cannot fill {rows}x{cols}")));
    }
    let mut data = Vec::with_capacity(total);
    for s in slots.into_iter().flatten() {
        data.extend_from_slice(&s.data);
    }
    TensorBuf::new(data, rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(rows: usize, cols: usize) -> TensorBuf {
        TensorBuf::new((0..rows * cols).map(|i| i as f32).collect(), rows, cols).unwrap()
    }

    #[test]
    fn fig3_shapes() {
        let t = ramp(512, 512);
        let shards = partition(&t, &PartitionSpec::new(4, 1, 1).unwrap()).unwrap();
        assert_eq!(shards.len(), 4);
        assert!(shards.iter().all(|s| s.num_chunks() == 64 && s.block_size() == 64));

        let shards = partition(&t, &PartitionSpec::new(4, 2, 1).unwrap()).unwrap();
        assert!(shards.iter().all(|s| s.chunks_per_minishard() == 32 && s.block_size() == 32));
    }

    #[test]
    fn single_chunk_cannot_split() {
        let t = ramp(8, 128);
        let err = partition(&t, &PartitionSpec::new(2, 1, 1).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Divisibility { factor: "num_devices", .. }), "{err}");
    }

    #[test]
    fn divisibility_names_factor() {
        let spec = PartitionSpec::new(2, 3, 1).unwrap();
        let err = spec.check(8 * CHUNK_LEN).unwrap_err();
        assert!(matches!(err, Error::Divisibility { factor: "minishards", .. }));
        let spec = PartitionSpec::new(2, 2, 3).unwrap();
        let err = spec.check(8 * CHUNK_LEN).unwrap_err();
        assert!(matches!(err, Error::Divisibility { factor: "microshards", .. }));
        assert!(matches!(spec.check(100).unwrap_err(), Error::Divisibility { factor: "chunk", .. }));
    }

    #[test]
    fn spec_rejects_degenerate_counts() {
        assert!(PartitionSpec::new(1, 1, 1).is_err());
        assert!(PartitionSpec::new(4, 0, 1).is_err());
        assert!(PartitionSpec::new(4, 1, 0).is_err());
    }

    #[test]
    fn block_size_spec() {
        let spec = PartitionSpec::for_block_size(4096 * 4096, 8, 64, 2).unwrap();
        assert_eq!(spec.minishards, 32);
        assert_eq!(spec.block_size(4096 * 4096), 64);
        assert!(PartitionSpec::for_block_size(1024 * 1024, 8, 48, 1).is_err());
    }

    #[test]
    fn reassemble_order_insensitive_and_missing() {
        let t = ramp(64, 128);
        let spec = PartitionSpec::new(4, 1, 1).unwrap();
        let mut shards = partition(&t, &spec).unwrap();
        shards.reverse();
        assert_eq!(reassemble(&shards, 64, 128).unwrap(), t);
        shards.remove(1);
        assert_eq!(reassemble(&shards, 64, 128).unwrap_err(), Error::MissingShard(2));
    }

    #[test]
    fn reassemble_shape_mismatch() {
        let t = ramp(64, 128);
        let shards = partition(&t, &PartitionSpec::new(4, 1, 1).unwrap()).unwrap();
        assert!(matches!(reassemble(&shards, 32, 128), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn every_element_located_once() {
        let elements = 4 * 2 * 2 * 3 * CHUNK_LEN;
        let spec = PartitionSpec::new(4, 2, 2).unwrap();
        spec.check(elements).unwrap();
        let mut seen = std::collections::HashSet::new();
        let micro_chunks = spec.microshard_len(elements) / CHUNK_LEN;
        for i in 0..elements {
            let loc = spec.locate(elements, i);
            assert!(loc.shard < 4 && loc.minishard < 2 && loc.microshard < 2);
            assert!(loc.chunk < micro_chunks && loc.position < CHUNK_LEN);
            assert!(seen.insert(loc), "duplicate location for {i}");
        }
        assert_eq!(seen.len(), elements);
    }

    #[test]
    fn views_agree_with_locate() {
        let elements = 4 * 2 * 2 * CHUNK_LEN;
        let spec = PartitionSpec::new(2, 2, 2).unwrap();
        let t = TensorBuf::new((0..elements).map(|i| i as f32).collect(), elements / 128, 128).unwrap();
        let shards = partition(&t, &spec).unwrap();
        for i in (0..elements).step_by(97) {
            let loc = spec.locate(elements, i);
            let micro = shards[loc.shard].microshard(loc.minishard, loc.microshard);
            assert_eq!(micro[loc.chunk * CHUNK_LEN + loc.position], i as f32);
        }
    }

    proptest! {
        #[test]
        fn partition_round_trips(n in 2usize..6, m in 1usize..4, u in 1usize..4, k in 1usize..3, seed in any::<u64>()) {
            let elements = n * m * u * k * CHUNK_LEN;
            let spec = PartitionSpec::new(n, m, u).unwrap();
            let data: Vec<f32> = (0..elements)
                .map(|i| f32::from_bits((i as u64).wrapping_mul(seed | 1) as u32 & 0x7F7F_FFFF))
                .collect();
            let t = TensorBuf::new(data, elements / 128, 128).unwrap();
            let shards = partition(&t, &spec).unwrap();
            let back = reassemble(&shards, t.rows, t.cols).unwrap();
            prop_assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
