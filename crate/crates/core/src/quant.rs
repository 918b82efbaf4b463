//! 4-bit NormalFloat quantization of latent matrices with per-column absmax
//! scales stored as FP8 (e4m3fn).

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// NF4 levels: normal quantiles normalized to [−1, 1], with an exact zero.
pub const NF4_CODEBOOK: [f32; 16] = [
    -1.0,
    -0.696_192_8,
    -0.525_073_05,
    -0.394_917_5,
    -0.284_441_38,
    -0.184_773_43,
    -0.091_050_036,
    0.0,
    0.079_580_3,
    0.160_930_2,
    0.246_112_3,
    0.337_915_24,
    0.440_709_83,
    0.562_617,
    0.722_956_84,
    1.0,
];

pub const NF4_ZERO_INDEX: u8 = 7;

pub const DEFAULT_EPS: f32 = 1e-8;

/// Largest distance between adjacent codebook levels.
pub fn nf4_max_gap() -> f32 {
    NF4_CODEBOOK.windows(2).map(|w| w[1] - w[0]).fold(0.0, f32::max)
}

/// Nearest level for a normalized value; exact midpoints go to the lower
/// index. Values outside [−1, 1] clamp to the end levels.
pub fn nf4_index(x: f32) -> u8 {
    let mut best = 0u8;
    let mut best_d = f32::INFINITY;
    for (k, &c) in NF4_CODEBOOK.iter().enumerate() {
        let d = (x - c).abs();
        if d < best_d {
            best_d = d;
            best = k as u8;
        }
    }
    best
}

pub const FP8_MAX: f32 = 448.0;
pub const FP8_NAN: u8 = 0x7f;

/// Decodes an e4m3fn byte: bias 7, subnormals at exponent 0, no
/// infinities, `S.1111.111` is NaN.
pub fn fp8_decode(b: u8) -> f32 {
    let sign = if b & 0x80 != 0 { -1.0 } else { 1.0 };
    let exp = (b >> 3) & 0x0f;
    let man = (b & 0x07) as f32;
    if exp == 0x0f && b & 0x07 == 0x07 {
        return f32::NAN;
    }
    let mag = if exp == 0 {
        man / 8.0 * 2f32.powi(-6)
    } else {
        (1.0 + man / 8.0) * 2f32.powi(exp as i32 - 7)
    };
    sign * mag
}

fn positive_lattice() -> &'static [f32; 127] {
    static TABLE: OnceLock<[f32; 127]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|i| fp8_decode(i as u8)))
}

/// Rounds to the nearest e4m3fn value, ties to the even code. Magnitudes
/// beyond 448 (including infinities) saturate to ±448; NaN maps to 0x7f.
pub fn fp8_encode(x: f32) -> u8 {
    if x.is_nan() {
        return FP8_NAN;
    }
    let sign = if x.is_sign_negative() { 0x80 } else { 0 };
    let a = x.abs();
    if a >= FP8_MAX {
        return sign | 0x7e;
    }
    let table = positive_lattice();
    // first code whose value is ≥ a
    let hi = table.partition_point(|&v| v < a);
    let code = if hi == 0 {
        0
    } else {
        let lo = hi - 1;
        let (dl, dh) = (a as f64 - table[lo] as f64, table[hi] as f64 - a as f64);
        if dl < dh || (dl == dh && lo % 2 == 0) {
            lo
        } else {
            hi
        }
    };
    sign | code as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantOptions {
    pub eps: f32,
    /// Per-column absmax scaling; when false every scale is 1.
    pub scaling: bool,
}

impl Default for QuantOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            scaling: true,
        }
    }
}

/// Packed NF4 indices (row-major, two per byte, even flat index in the low
/// nibble) and one FP8 scale byte per column.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QuantizedLatent {
    pub rows: usize,
    pub cols: usize,
    pub packed: Vec<u8>,
    pub scales: Vec<u8>,
    pub eps_bits: u32,
}

impl QuantizedLatent {
    pub fn packed_len(rows: usize, cols: usize) -> usize {
        (rows * cols).div_ceil(2)
    }

    /// Payload bytes: packed nibbles plus scales.
    pub fn storage_bytes(&self) -> usize {
        self.packed.len() + self.scales.len()
    }

    pub fn eps(&self) -> f32 {
        f32::from_bits(self.eps_bits)
    }

    pub fn index(&self, i: usize, j: usize) -> u8 {
        let t = i * self.cols + j;
        let b = self.packed[t / 2];
        if t % 2 == 0 {
            b & 0x0f
        } else {
            b >> 4
        }
    }

    pub fn indices(&self) -> Vec<u8> {
        (0..self.rows * self.cols).map(|t| self.index(t / self.cols, t % self.cols)).collect()
    }

    pub fn from_indices(rows: usize, cols: usize, indices: &[u8], scales: Vec<u8>, eps: f32) -> Result<Self> {
        if indices.len() != rows * cols || scales.len() != cols {
            return Err(Error::shape("quantized_latent", "index or scale count does not match shape"));
        }
        if let Some(&bad) = indices.iter().find(|&&k| k > 15) {
            return Err(Error::invalid(format!("nf4 index {bad} exceeds 15")));
        }
        let mut packed = vec![0u8; Self::packed_len(rows, cols)];
        for (t, &k) in indices.iter().enumerate() {
            packed[t / 2] |= if t % 2 == 0 { k } else { k << 4 };
        }
        let q = Self {
            rows,
            cols,
            packed,
            scales,
            eps_bits: eps.to_bits(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.packed.len() != Self::packed_len(self.rows, self.cols) {
            return Err(Error::shape(
                "quantized_latent",
                format!(
                    "{} packed bytes for {}×{}",
                    self.packed.len(),
                    self.rows,
                    self.cols
                ),
            ));
        }
        if self.scales.len() != self.cols {
            return Err(Error::shape(
                "quantized_latent",
                format!("{} scales for {} columns", self.scales.len(), self.cols),
            ));
        }
        if (self.rows * self.cols) % 2 == 1 && self.packed.last().is_some_and(|b| b >> 4 != 0) {
            return Err(Error::invalid("padding nibble of packed indices is not zero"));
        }
        for &s in &self.scales {
            let v = fp8_decode(s);
            if !(v.is_finite() && v >= 0.0) || s & 0x80 != 0 {
                return Err(Error::invalid(format!("scale byte {s:#04x} is not a non-negative finite value")));
            }
        }
        Ok(())
    }
}

/// Per-column absmax NF4 quantization.
///
/// Entries are normalized by the FP8-rounded scale, the value that
/// dequantization multiplies back, so the reconstruction error of every
/// entry stays within `ŝ_j · gap/2` with `ŝ_j` the stored scale.
pub fn nf4_quantize(h: &Matrix, opts: QuantOptions) -> Result<QuantizedLatent> {
    h.check_finite("quantization input")?;
    if !(opts.eps >= 0.0 && opts.eps.is_finite()) {
        return Err(Error::invalid("quantization eps must be non-negative"));
    }
    let (rows, cols) = h.shape();
    let scales: Vec<u8> = (0..cols)
        .map(|j| {
            if opts.scaling {
                fp8_encode((0..rows).map(|i| h.get(i, j).abs()).fold(0.0, f32::max))
            } else {
                fp8_encode(1.0)
            }
        })
        .collect();
    // a column whose scale rounds to zero dequantizes to zero whatever the
    // index, so it stores the zero level to keep re-quantization stable
    let denom: Vec<Option<f32>> = scales
        .iter()
        .map(|&s| {
            let v = fp8_decode(s);
            (v > 0.0).then_some(v + opts.eps)
        })
        .collect();
    let mut indices = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for (j, d) in denom.iter().enumerate() {
            indices.push(d.map_or(NF4_ZERO_INDEX, |d| nf4_index(h.get(i, j) / d)));
        }
    }
    QuantizedLatent::from_indices(rows, cols, &indices, scales, opts.eps)
}

/// `Ĥ[i,j] = fp8(scales[j]) · c[index[i,j]]`.
pub fn nf4_dequantize(q: &QuantizedLatent) -> Result<Matrix> {
    q.validate()?;
    let s: Vec<f32> = q.scales.iter().map(|&b| fp8_decode(b)).collect();
    Ok(Matrix::from_fn(q.rows, q.cols, |i, j| s[j] * NF4_CODEBOOK[q.index(i, j) as usize]))
}

#[cfg(test)]
mod tests;
