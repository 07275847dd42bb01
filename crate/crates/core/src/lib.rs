//! Dynamic block-wise quantized ring AllReduce.
//!
//! The crate has two halves. The functional half ([`numerics`], [`layout`],
//! [`quant`], [`collectives`]) computes exactly what every device would hold
//! after each collective, so quantization error can be measured bit-for-bit.
//! The timing half ([`simnet`]) schedules the same collectives on a ring of
//! devices with finite link bandwidth, hop latency and vector-unit throughput.
//! [`analysis`] ties the two together into error/speedup studies.

pub mod analysis;
pub mod collectives;
pub mod error;
pub mod layout;
pub mod numerics;
pub mod quant;
pub mod simnet;

pub use collectives::{CollectiveConfig, Direction, Variant};
pub use error::{Error, Result};
pub use layout::{PartitionSpec, ShardView, TensorBuf};
pub use numerics::CodecKind;
pub use quant::{QuantizedShard, ScaleGrid};
