//! Per-tensor symmetric integer fake quantization.
//!
//! A `B`-bit format encodes the integers `−(2^{B−1}−1) ..= 2^{B−1}−1`; the
//! most negative two's-complement code is never produced, so INT2 is ternary.
//! Rounding is half-away-from-zero. The scale of each tensor is the member of
//! a fixed 512-point grid with the smallest total squared quantization error.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{LayerId, Parameters};
use crate::tensor::{Scalar, Tensor};

pub const SUPPORTED_BITS: [u8; 5] = [2, 3, 4, 6, 8];
pub const SCALE_GRID_POINTS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct QuantFormat {
    bits: u8,
}

impl QuantFormat {
    pub fn new(bits: u8) -> Result<Self> {
        if SUPPORTED_BITS.contains(&bits) {
            Ok(Self { bits })
        } else {
            Err(Error::Config(format!(
                "unsupported bit width {bits}; expected one of {SUPPORTED_BITS:?}"
            )))
        }
    }

    pub fn all() -> Vec<QuantFormat> {
        SUPPORTED_BITS.iter().map(|&b| QuantFormat { bits: b }).collect()
    }

    pub fn bits(self) -> u8 {
        self.bits
    }

    /// Largest representable integer, `2^{B−1} − 1`.
    pub fn max_level(self) -> i32 {
        (1 << (self.bits - 1)) - 1
    }
}

impl fmt::Display for QuantFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "int{}", self.bits)
    }
}

impl FromStr for QuantFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .strip_prefix("int")
            .and_then(|b| b.parse::<u8>().ok())
            .ok_or_else(|| Error::Config(format!("unknown format {s:?}; expected int2..int8")))?;
        QuantFormat::new(bits)
    }
}

impl TryFrom<String> for QuantFormat {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<QuantFormat> for String {
    fn from(f: QuantFormat) -> String {
        f.to_string()
    }
}

pub fn quant_levels(format: QuantFormat) -> RangeInclusive<i32> {
    let m = format.max_level();
    -m..=m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedQuantizer {
    pub format: QuantFormat,
    pub scale: f32,
}

impl CalibratedQuantizer {
    pub fn new(format: QuantFormat, scale: f32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("quantizer scale must be positive, got {scale}")));
        }
        Ok(Self { format, scale })
    }

    /// `a · clamp(round(x / a))` for a single value.
    #[inline]
    pub fn apply<T: Scalar>(&self, x: T) -> T {
        let a = T::of_f64(self.scale as f64);
        let m = T::of_f64(self.format.max_level() as f64);
        a * (x / a).round().max(-m).min(m)
    }

    pub fn apply_slice<T: Scalar>(&self, xs: &[T]) -> Vec<T> {
        xs.iter().map(|&x| self.apply(x)).collect()
    }
}

pub fn fake_quantize(w: &Tensor, q: &CalibratedQuantizer) -> Result<Tensor> {
    w.check_finite("fake_quantize")?;
    Tensor::new(w.shape().to_vec(), q.apply_slice(w.data()))
}

/// Total squared error `‖Q_a(w) − w‖²` for one candidate scale.
pub fn quantization_sq_error(w: &[f32], q: &CalibratedQuantizer) -> f64 {
    w.iter()
        .map(|&x| {
            let e = (q.apply(x) - x) as f64;
            e * e
        })
        .sum()
}

/// Candidate scales `(i/512)·max|w| / (2^{B−1}−1)` for `i = 1..=512`; the last
/// candidate maps `max|w|` exactly onto the top level.
pub fn scale_candidates(max_abs: f32, format: QuantFormat) -> Vec<f32> {
    let top = max_abs as f64 / format.max_level() as f64;
    (1..=SCALE_GRID_POINTS)
        .map(|i| (i as f64 / SCALE_GRID_POINTS as f64 * top) as f32)
        .collect()
}

pub fn calibrate_scale(w: &Tensor, format: QuantFormat) -> Result<CalibratedQuantizer> {
    if w.is_empty() {
        return Err(Error::degenerate("calibrate_scale", "empty tensor"));
    }
    w.check_finite("calibrate_scale")?;
    let max_abs = w.data().iter().fold(0.0f32, |m, &x| m.max(x.abs()));
    if max_abs == 0.0 {
        return Err(Error::degenerate("calibrate_scale", "all-zero tensor has no scale"));
    }
    let mut best: Option<(f64, CalibratedQuantizer)> = None;
    for scale in scale_candidates(max_abs, format) {
        if scale <= 0.0 {
            continue;
        }
        let q = CalibratedQuantizer { format, scale };
        let err = quantization_sq_error(w.data(), &q);
        // strict comparison keeps the smaller scale on ties
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, q));
        }
    }
    best.map(|(_, q)| q)
        .ok_or_else(|| Error::degenerate("calibrate_scale", "no positive candidate scale"))
}

/// One frozen quantizer per quantized linear layer, in layer order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelQuantizers {
    pub format: QuantFormat,
    pub layers: Vec<(LayerId, CalibratedQuantizer)>,
}

impl ModelQuantizers {
    pub fn get(&self, layer: LayerId) -> Option<&CalibratedQuantizer> {
        self.layers.iter().find(|(l, _)| *l == layer).map(|(_, q)| q)
    }
}

pub fn calibrate_model(params: &Parameters, format: QuantFormat) -> Result<ModelQuantizers> {
    let layers = params
        .config()
        .quantized_layers()
        .into_iter()
        .map(|layer| Ok((layer, calibrate_scale(params.linear_weight(layer), format)?)))
        .collect::<Result<_>>()?;
    Ok(ModelQuantizers { format, layers })
}

/// Applies the quantizers to every transformer-stack linear weight, leaving
/// embeddings, head, layernorms and biases untouched.
pub fn apply_quantizers(params: &Parameters, quantizers: &ModelQuantizers) -> Result<Parameters> {
    let mut out = params.clone();
    for (layer, q) in &quantizers.layers {
        let w = fake_quantize(params.linear_weight(*layer), q)?;
        *out.linear_weight_mut(*layer) = w;
    }
    Ok(out)
}

/// Round-to-nearest: calibrate each layer on the given weights and fake-quantize.
pub fn quantize_model_rtn(params: &Parameters, format: QuantFormat) -> Result<(Parameters, ModelQuantizers)> {
    let quantizers = calibrate_model(params, format)?;
    let quantized = apply_quantizers(params, &quantizers)?;
    Ok((quantized, quantizers))
}
