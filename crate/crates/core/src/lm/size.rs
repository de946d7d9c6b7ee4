use super::config::ModelConfig;
use super::params::{layout, ParamRole};
use crate::quant::QuantFormat;

/// Bytes of the transformer stack: quantized weights at `B/8` bytes per value
/// (rounded up per tensor), every other block tensor at 4 bytes per value.
/// Embeddings, final layernorm and head are excluded. `None` means full precision.
pub fn weight_size_bytes(config: &ModelConfig, format: Option<QuantFormat>) -> u64 {
    layout(config)
        .into_iter()
        .filter(|(_, _, role)| role.in_transformer_stack())
        .map(|(_, shape, role)| {
            let count = shape.iter().product::<usize>() as u64;
            match (role, format) {
                (ParamRole::Weight(_), Some(f)) => (count * f.bits() as u64).div_ceil(8),
                _ => count * 4,
            }
        })
        .sum()
}

/// Bytes of the quantized weights alone.
pub fn quantized_weight_bytes(config: &ModelConfig, format: Option<QuantFormat>) -> u64 {
    config
        .quantized_layers()
        .into_iter()
        .map(|l| {
            let (o, i) = config.linear_shape(l.kind);
            let count = (o * i) as u64;
            match format {
                Some(f) => (count * f.bits() as u64).div_ceil(8),
                None => count * 4,
            }
        })
        .sum()
}
