//! Uniform quantizers for weights and activations and the clipped
//! straight-through gradient rule.
//!
//! Weights are clamped to `[-1, 1]` and mapped onto the symmetric signed grid
//! `{-(2^(b-1)-1), ..., 2^(b-1)-1}`; activations are clamped to `[0, 1]` and
//! mapped onto `{0, ..., 2^b-1}`. Ties round half away from zero. A bit width
//! of 32 means full precision: values pass through untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_BITS: u32 = 2;
pub const FULL_PRECISION_BITS: u32 = 32;

/// Clip range of the weight quantizer.
pub const WEIGHT_RANGE: (f64, f64) = (-1.0, 1.0);
/// Clip range of the activation quantizer.
pub const ACT_RANGE: (f64, f64) = (0.0, 1.0);

/// Precision pair for the weight and activation operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    weight_bits: u32,
    act_bits: u32,
}

impl QuantSpec {
    pub const FULL_PRECISION: QuantSpec = QuantSpec {
        weight_bits: FULL_PRECISION_BITS,
        act_bits: FULL_PRECISION_BITS,
    };

    pub fn new(weight_bits: u32, act_bits: u32) -> Result<Self> {
        check_bits(weight_bits)?;
        check_bits(act_bits)?;
        Ok(QuantSpec {
            weight_bits,
            act_bits,
        })
    }

    pub fn weight_bits(&self) -> u32 {
        self.weight_bits
    }

    pub fn act_bits(&self) -> u32 {
        self.act_bits
    }

    pub fn is_full_precision(&self) -> bool {
        self.weight_bits == FULL_PRECISION_BITS && self.act_bits == FULL_PRECISION_BITS
    }
}

impl Default for QuantSpec {
    fn default() -> Self {
        QuantSpec::FULL_PRECISION
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=FULL_PRECISION_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::spec(format!(
            "bit width {bits} outside [{MIN_BITS}, {FULL_PRECISION_BITS}]"
        )))
    }
}

/// Largest positive weight code for `bits`.
pub fn weight_qmax(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Largest activation code for `bits`.
pub fn act_qmax(bits: u32) -> u64 {
    (1u64 << bits) - 1
}

/// Quantized weight tensor. Full precision tensors are carried verbatim.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantizedWeights {
    Codes { codes: Vec<i32>, bits: u32 },
    Passthrough(Vec<f64>),
}

/// Quantized activation tensor. Full precision tensors are carried verbatim.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantizedActivations {
    Codes { codes: Vec<u32>, bits: u32 },
    Passthrough(Vec<f64>),
}

impl QuantizedWeights {
    pub fn bits(&self) -> u32 {
        match self {
            QuantizedWeights::Codes { bits, .. } => *bits,
            QuantizedWeights::Passthrough(_) => FULL_PRECISION_BITS,
        }
    }

    /// Grid step; 1 for passthrough tensors.
    pub fn scale(&self) -> f64 {
        match self {
            QuantizedWeights::Codes { bits, .. } => 1.0 / weight_qmax(*bits) as f64,
            QuantizedWeights::Passthrough(_) => 1.0,
        }
    }

    pub fn codes(&self) -> Option<&[i32]> {
        match self {
            QuantizedWeights::Codes { codes, .. } => Some(codes),
            QuantizedWeights::Passthrough(_) => None,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            QuantizedWeights::Codes { codes, .. } => codes.len(),
            QuantizedWeights::Passthrough(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl QuantizedActivations {
    pub fn bits(&self) -> u32 {
        match self {
            QuantizedActivations::Codes { bits, .. } => *bits,
            QuantizedActivations::Passthrough(_) => FULL_PRECISION_BITS,
        }
    }

    pub fn scale(&self) -> f64 {
        match self {
            QuantizedActivations::Codes { bits, .. } => 1.0 / act_qmax(*bits) as f64,
            QuantizedActivations::Passthrough(_) => 1.0,
        }
    }

    pub fn codes(&self) -> Option<&[u32]> {
        match self {
            QuantizedActivations::Codes { codes, .. } => Some(codes),
            QuantizedActivations::Passthrough(_) => None,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            QuantizedActivations::Codes { codes, .. } => codes.len(),
            QuantizedActivations::Passthrough(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_not_nan(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| v.is_nan()) {
        Some(index) => Err(Error::InvalidValue {
            index,
            reason: "NaN".into(),
        }),
        None => Ok(()),
    }
}

/// Code of a single weight value (no validation).
#[inline]
pub fn weight_code(w: f64, bits: u32) -> i32 {
    let q = weight_qmax(bits) as f64;
    // f64::round rounds half away from zero.
    (w.clamp(WEIGHT_RANGE.0, WEIGHT_RANGE.1) * q).round() as i32
}

/// Code of a single activation value (no validation).
#[inline]
pub fn act_code(a: f64, bits: u32) -> u32 {
    let q = act_qmax(bits) as f64;
    (a.clamp(ACT_RANGE.0, ACT_RANGE.1) * q).round() as u32
}

pub fn quantize_weights(w: &[f64], bits: u32) -> Result<QuantizedWeights> {
    check_bits(bits)?;
    check_not_nan(w)?;
    if bits == FULL_PRECISION_BITS {
        return Ok(QuantizedWeights::Passthrough(w.to_vec()));
    }
    let codes = w.iter().map(|&x| weight_code(x, bits)).collect();
    Ok(QuantizedWeights::Codes { codes, bits })
}

pub fn quantize_activations(a: &[f64], bits: u32) -> Result<QuantizedActivations> {
    check_bits(bits)?;
    check_not_nan(a)?;
    if bits == FULL_PRECISION_BITS {
        return Ok(QuantizedActivations::Passthrough(a.to_vec()));
    }
    let codes = a.iter().map(|&x| act_code(x, bits)).collect();
    Ok(QuantizedActivations::Codes { codes, bits })
}

/// Maps codes back onto the real grid.
pub trait Dequantize {
    fn dequantize(&self) -> Vec<f64>;
}

impl Dequantize for QuantizedWeights {
    fn dequantize(&self) -> Vec<f64> {
        match self {
            QuantizedWeights::Codes { codes, .. } => {
                let s = self.scale();
                codes.iter().map(|&c| c as f64 * s).collect()
            }
            QuantizedWeights::Passthrough(v) => v.clone(),
        }
    }
}

impl Dequantize for QuantizedActivations {
    fn dequantize(&self) -> Vec<f64> {
        match self {
            QuantizedActivations::Codes { codes, .. } => {
                let s = self.scale();
                codes.iter().map(|&c| c as f64 * s).collect()
            }
            QuantizedActivations::Passthrough(v) => v.clone(),
        }
    }
}

pub fn dequantize<Q: Dequantize>(q: &Q) -> Vec<f64> {
    q.dequantize()
}

/// Quantize-dequantize round trip for weights, the value the forward pass sees.
pub fn fake_quantize_weights(w: &[f64], bits: u32) -> Result<Vec<f64>> {
    Ok(quantize_weights(w, bits)?.dequantize())
}

pub fn fake_quantize_activations(a: &[f64], bits: u32) -> Result<Vec<f64>> {
    Ok(quantize_activations(a, bits)?.dequantize())
}

/// Clipped straight-through estimator: passes `upstream` where the
/// pre-quantization input lies in `[lo, hi]`, zero elsewhere.
pub fn ste_grad(upstream: &[f64], prequant_input: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    if upstream.len() != prequant_input.len() {
        return Err(Error::shape(format!(
            "upstream has {} elements, input has {}",
            upstream.len(),
            prequant_input.len()
        )));
    }
    if !(lo < hi) {
        return Err(Error::spec(format!("clip range [{lo}, {hi}] is empty")));
    }
    Ok(upstream
        .iter()
        .zip(prequant_input)
        .map(|(&g, &x)| if (lo..=hi).contains(&x) { g } else { 0.0 })
        .collect())
}
