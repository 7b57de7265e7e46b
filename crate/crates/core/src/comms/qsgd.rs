//! QSGD stochastic gradient quantization.
//!
//! Each coordinate is sent as a sign bit and an integer level in `[0, s]`
//! relative to the vector's ℓ2 norm. Rounding between adjacent levels is
//! randomized so the decoded vector is an unbiased estimate of the input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ml::GradientVector;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedGradient {
    pub norm: f64,
    /// `true` marks a negative coordinate.
    pub signs: Vec<bool>,
    pub levels: Vec<u32>,
    pub s: u32,
    pub length: usize,
}

/// Bits needed to store a level in `[0, s]`.
pub fn level_bits(s: u32) -> u32 {
    32 - s.leading_zeros()
}

pub fn qsgd_encode(grad: &GradientVector, s: u32, seed: u64) -> Result<QuantizedGradient> {
    if s == 0 {
        return Err(Error::Codec("QSGD needs at least one quantization level".into()));
    }
    if let Some(i) = grad.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("cannot quantize non-finite coordinate {i}")));
    }
    let length = grad.len();
    let norm = grad.l2_norm();
    if !norm.is_finite() {
        return Err(Error::Numeric("gradient norm overflows".into()));
    }
    let signs: Vec<bool> = grad.values.iter().map(|v| v.is_sign_negative() && *v != 0.0).collect();
    if norm == 0.0 {
        return Ok(QuantizedGradient {
            norm,
            signs,
            levels: vec![0; length],
            s,
            length,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = s as f64 / norm;
    let levels = grad
        .values
        .iter()
        .map(|v| {
            let u = v.abs() * scale;
            let floor = u.floor();
            let bump = rng.random::<f64>() < u - floor;
            ((floor as u32) + bump as u32).min(s)
        })
        .collect();
    Ok(QuantizedGradient {
        norm,
        signs,
        levels,
        s,
        length,
    })
}

/// `values[i] = norm * sign[i] * level[i] / s`. The result carries source
/// version 0; callers stamp the version they know.
pub fn qsgd_decode(q: &QuantizedGradient) -> Result<GradientVector> {
    if q.s == 0 {
        return Err(Error::Decode("quantization level count is zero".into()));
    }
    if q.signs.len() != q.length || q.levels.len() != q.length {
        return Err(Error::Decode(format!(
            "length {} but {} signs and {} levels",
            q.length,
            q.signs.len(),
            q.levels.len()
        )));
    }
    if !(q.norm.is_finite() && q.norm >= 0.0) {
        return Err(Error::Decode(format!("invalid norm {}", q.norm)));
    }
    if let Some(i) = q.levels.iter().position(|&l| l > q.s) {
        return Err(Error::Decode(format!(
            "level {} at coordinate {i} exceeds s = {}",
            q.levels[i], q.s
        )));
    }
    let unit = q.norm / q.s as f64;
    let values = q
        .levels
        .iter()
        .zip(&q.signs)
        .map(|(&l, &neg)| {
            let v = unit * l as f64;
            if neg {
                -v
            } else {
                v
            }
        })
        .collect();
    Ok(GradientVector::new(values, 0))
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    fn with_capacity(bits: usize) -> Self {
        Self {
            bytes: Vec::with_capacity(bits.div_ceil(8)),
            bit: 0,
        }
    }

    /// Appends the low `width` bits of `value`, least significant first.
    fn push(&mut self, value: u32, width: u32) {
        for b in 0..width {
            if self.bit.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (value >> b) & 1 == 1 {
                *self.bytes.last_mut().expect("byte pushed") |= 1 << (self.bit % 8);
            }
            self.bit += 1;
        }
    }
}

fn read_bits(bytes: &[u8], start_bit: usize, width: u32) -> u32 {
    let mut v = 0;
    for b in 0..width as usize {
        let pos = start_bit + b;
        if (bytes[pos / 8] >> (pos % 8)) & 1 == 1 {
            v |= 1 << b;
        }
    }
    v
}

const QSGD_HEADER: usize = 8 + 4 + 8;

/// Packed form: `norm f64, s u32, length u64`, then one sign bit per
/// coordinate, then `level_bits(s)` bits per level. Each bit section is
/// padded to a whole byte.
pub fn pack(q: &QuantizedGradient) -> Vec<u8> {
    let width = level_bits(q.s);
    let mut out = Vec::with_capacity(packed_len(q.length, q.s));
    out.extend_from_slice(&q.norm.to_le_bytes());
    out.extend_from_slice(&q.s.to_le_bytes());
    out.extend_from_slice(&(q.length as u64).to_le_bytes());
    let mut signs = BitWriter::with_capacity(q.length);
    for &neg in &q.signs {
        signs.push(neg as u32, 1);
    }
    out.extend_from_slice(&signs.bytes);
    let mut levels = BitWriter::with_capacity(q.length * width as usize);
    for &l in &q.levels {
        levels.push(l, width);
    }
    out.extend_from_slice(&levels.bytes);
    out
}

pub fn packed_len(length: usize, s: u32) -> usize {
    QSGD_HEADER + length.div_ceil(8) + (length * level_bits(s) as usize).div_ceil(8)
}

pub fn unpack(bytes: &[u8]) -> Result<QuantizedGradient> {
    if bytes.len() < QSGD_HEADER {
        return Err(Error::Decode(format!("QSGD payload of {} bytes is truncated", bytes.len())));
    }
    let norm = f64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes"));
    let s = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let length = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if s == 0 {
        return Err(Error::Decode("quantization level count is zero".into()));
    }
    let expected = length
        .checked_mul(level_bits(s) as usize)
        .map(|bits| QSGD_HEADER + length.div_ceil(8) + bits.div_ceil(8))
        .ok_or_else(|| Error::Decode("QSGD length overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Decode(format!(
            "QSGD payload has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let sign_bytes = &bytes[QSGD_HEADER..QSGD_HEADER + length.div_ceil(8)];
    let level_bytes = &bytes[QSGD_HEADER + length.div_ceil(8)..];
    let width = level_bits(s);
    let signs = (0..length).map(|i| read_bits(sign_bytes, i, 1) == 1).collect();
    let levels = (0..length)
        .map(|i| read_bits(level_bytes, i * width as usize, width))
        .collect();
    Ok(QuantizedGradient {
        norm,
        signs,
        levels,
        s,
        length,
    })
}
