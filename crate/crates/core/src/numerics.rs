//! Scalar codecs: BF16 rounding, symmetric int8, and the two FP8 formats.
//!
//! All conversions round to nearest, ties to even. Narrow encodes saturate at
//! the format maximum instead of overflowing. NaN is carried through wherever
//! the target format can represent it.

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

/// Largest finite BF16 value (0x7F7F).
pub const BF16_MAX: f32 = f32::from_bits(0x7F7F_0000);

/// Target format of a quantized payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    Int8,
    F8E4M3,
    F8E5M2,
}

impl CodecKind {
    pub const ALL: [CodecKind; 3] = [CodecKind::Int8, CodecKind::F8E4M3, CodecKind::F8E5M2];

    /// Largest finite magnitude the format can hold.
    pub const fn max_magnitude(self) -> f32 {
        match self {
            CodecKind::Int8 => 127.0,
            CodecKind::F8E4M3 => 448.0,
            CodecKind::F8E5M2 => 57344.0,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            CodecKind::Int8 => "int8",
            CodecKind::F8E4M3 => "e4m3",
            CodecKind::F8E5M2 => "e5m2",
        }
    }

    /// Whether `bits` is a NaN encoding. Int8 has none.
    pub fn is_nan_bits(self, bits: u8) -> bool {
        match self {
            CodecKind::Int8 => false,
            CodecKind::F8E4M3 => bits & 0x7F == 0x7F,
            CodecKind::F8E5M2 => bits & 0x7F > 0x7C,
        }
    }

    /// Encode to raw code bits. Int8 has no NaN code, so NaN encodes as 0;
    /// quantized paths carry NaN through the scale grid instead. Finite
    /// overflow saturates; E5M2 keeps infinite inputs infinite.
    #[inline]
    pub fn encode_bits(self, x: f32) -> u8 {
        match self {
            CodecKind::Int8 => {
                if x.is_nan() {
                    return 0;
                }
                x.round_ties_even().clamp(-127.0, 127.0) as i8 as u8
            }
            CodecKind::F8E4M3 => encode_minifloat(x, &E4M3),
            CodecKind::F8E5M2 => encode_minifloat(x, &E5M2),
        }
    }

    #[inline]
    pub fn decode_bits(self, bits: u8) -> f32 {
        match self {
            CodecKind::Int8 => bits as i8 as f32,
            CodecKind::F8E4M3 | CodecKind::F8E5M2 => self.decode_table()[bits as usize],
        }
    }

    /// 256-entry decode table. Int8 is included so hot loops can use one path.
    pub fn decode_table(self) -> &'static [f32; 256] {
        static INT8: OnceLock<[f32; 256]> = OnceLock::new();
        static E4: OnceLock<[f32; 256]> = OnceLock::new();
        static E5: OnceLock<[f32; 256]> = OnceLock::new();
        match self {
            CodecKind::Int8 => INT8.get_or_init(|| std::array::from_fn(|b| b as u8 as i8 as f32)),
            CodecKind::F8E4M3 => E4.get_or_init(|| std::array::from_fn(|b| decode_minifloat(b as u8, &E4M3))),
            CodecKind::F8E5M2 => E5.get_or_init(|| std::array::from_fn(|b| decode_minifloat(b as u8, &E5M2))),
        }
    }
}

impl fmt::Display for CodecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CodecKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "int8" => Ok(CodecKind::Int8),
            "e4m3" | "f8e4m3" | "fp8-e4m3" => Ok(CodecKind::F8E4M3),
            "e5m2" | "f8e5m2" | "fp8-e5m2" => Ok(CodecKind::F8E5M2),
            other => Err(format!("unknown codec `{other}` (expected int8, e4m3 or e5m2)")),
        }
    }
}

/// One 8-bit code tagged with its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Code8 {
    pub bits: u8,
    pub kind: CodecKind,
}

pub fn encode(x: f32, kind: CodecKind) -> Code8 {
    Code8 { bits: kind.encode_bits(x), kind }
}

pub fn decode(c: Code8) -> f32 {
    c.kind.decode_bits(c.bits)
}

/// Round an f32 to the nearest BF16 value (returned widened to f32).
///
/// Finite inputs that would round past the BF16 range saturate to
/// `±BF16_MAX`. NaN stays NaN (quieted); infinities pass through.
#[inline]
pub fn round_to_bf16(x: f32) -> f32 {
    let bits = x.to_bits();
    if x.is_nan() {
        return f32::from_bits((bits | 0x0040_0000) & 0xFFFF_0000);
    }
    if x.is_infinite() {
        return x;
    }
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7FFF + lsb) & 0xFFFF_0000;
    let y = f32::from_bits(rounded);
    if y.is_infinite() {
        BF16_MAX.copysign(x)
    } else {
        y
    }
}

struct MiniFloat {
    mantissa_bits: u32,
    bias: i32,
    max: f32,
    max_code: u8,
    nan_code: u8,
    /// E4M3 reuses the top exponent for normals (no infinities).
    ieee_specials: bool,
}

const E4M3: MiniFloat = MiniFloat {
    mantissa_bits: 3,
    bias: 7,
    max: 448.0,
    max_code: 0x7E,
    nan_code: 0x7F,
    ieee_specials: false,
};

const E5M2: MiniFloat = MiniFloat {
    mantissa_bits: 2,
    bias: 15,
    max: 57344.0,
    max_code: 0x7B,
    nan_code: 0x7F,
    ieee_specials: true,
};

fn pow2(e: i32) -> f32 {
    // Exponents used here stay well inside the f32 normal range.
    f32::from_bits(((e + 127) as u32) << 23)
}

fn encode_minifloat(x: f32, fmt: &MiniFloat) -> u8 {
    let sign = if x.is_sign_negative() { 0x80u8 } else { 0 };
    if x.is_nan() {
        return sign | fmt.nan_code;
    }
    let a = x.abs();
    if a.is_infinite() && fmt.ieee_specials {
        return sign | 0x7C;
    }
    if a >= fmt.max {
        return sign | fmt.max_code;
    }
    let min_normal_exp = 1 - fmt.bias;
    let m = fmt.mantissa_bits as i32;
    // Binade exponent of `a`, clamped into the subnormal range.
    let exp = if a == 0.0 {
        min_normal_exp
    } else {
        let e = ((a.to_bits() >> 23) as i32) - 127;
        e.max(min_normal_exp)
    };
    let quantum = pow2(exp - m);
    // Power-of-two scaling is exact, so this is a correctly rounded RNE.
    let steps = (a / quantum).round_ties_even();
    let r = steps * quantum;
    if r > fmt.max {
        return sign | fmt.max_code;
    }
    if r == 0.0 {
        return sign;
    }
    let code = if r < pow2(min_normal_exp) {
        steps as u32
    } else {
        let e = ((r.to_bits() >> 23) as i32) - 127;
        let mant = (r / pow2(e - m)) as u32 - (1 << m);
        (((e + fmt.bias) as u32) << m) | mant
    };
    sign | code as u8
}

fn decode_minifloat(bits: u8, fmt: &MiniFloat) -> f32 {
    let m = fmt.mantissa_bits;
    let sign = if bits & 0x80 != 0 { -1.0f32 } else { 1.0 };
    let exp_field = ((bits & 0x7F) >> m) as i32;
    let mant = (bits & ((1 << m) - 1)) as u32;
    let top_exp = (0x7F >> m) as i32;
    if fmt.ieee_specials && exp_field == top_exp {
        return if mant == 0 { sign * f32::INFINITY } else { f32::NAN };
    }
    if !fmt.ieee_specials && bits & 0x7F == 0x7F {
        return f32::NAN;
    }
    let min_normal_exp = 1 - fmt.bias;
    let value = if exp_field == 0 {
        mant as f32 * pow2(min_normal_exp - m as i32)
    } else {
        (mant + (1 << m)) as f32 * pow2(exp_field - fmt.bias - m as i32)
    };
    sign * value
}
