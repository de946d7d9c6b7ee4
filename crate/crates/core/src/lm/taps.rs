//! Capture of the inputs `x_l` seen by each quantized linear layer.

use super::config::{LayerId, LinearKind};
use super::model::{build_block_graph, Trainable};
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::par;
use crate::quant::{calibrate_scale, fake_quantize, QuantFormat};
use crate::tensor::Tensor;

/// Input activations of one layer over the calibration blocks.
///
/// Logically `X_l` is `d_in × n_columns`; storage keeps each column
/// contiguous, i.e. a row-major `n_columns × d_in` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTap {
    pub layer: LayerId,
    d_in: usize,
    columns: Vec<f32>,
}

impl LayerTap {
    pub fn new(layer: LayerId, d_in: usize, columns: Vec<f32>) -> Result<Self> {
        if d_in == 0 || !columns.len().is_multiple_of(d_in) {
            return Err(Error::contract(
                "LayerTap::new",
                "column data is not a multiple of d_in",
            ));
        }
        Ok(Self { layer, d_in, columns })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len() / self.d_in
    }

    pub fn column(&self, i: usize) -> &[f32] {
        &self.columns[i * self.d_in..(i + 1) * self.d_in]
    }

    /// Column-major view of `X_l` (`n_columns × d_in` row-major).
    pub fn columns(&self) -> &[f32] {
        &self.columns
    }

    /// `X_l` as a `d_in × n_columns` tensor.
    pub fn to_matrix(&self) -> Tensor {
        let t =
            Tensor::new(vec![self.n_columns(), self.d_in], self.columns.clone()).expect("tap storage is consistent");
        t.transpose2().expect("2-D")
    }

    pub fn scaled(&self, c: f32) -> LayerTap {
        LayerTap {
            layer: self.layer,
            d_in: self.d_in,
            columns: self.columns.iter().map(|v| v * c).collect(),
        }
    }
}

/// How calibration inputs reach each layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Propagation {
    /// Through the unmodified full-precision network.
    FullPrecision,
    /// Through a network whose earlier layers are already quantized.
    SequentialQuantized,
}

/// Records the inputs of `layers` while running every block through `params`.
pub fn capture_taps(params: &Parameters, blocks: &[&[u16]], layers: &[LayerId]) -> Result<Vec<LayerTap>> {
    if blocks.is_empty() {
        return Err(Error::contract("capture_layer_taps", "no calibration blocks"));
    }
    let per_block = par::map(blocks, |b| -> Result<Vec<Vec<f32>>> {
        let mut seen: Vec<Vec<f32>> = vec![Vec::new(); layers.len()];
        let mut hook = |layer: LayerId, x: &Tensor| {
            if let Some(slot) = layers.iter().position(|l| *l == layer) {
                seen[slot] = x.data().to_vec();
            }
        };
        build_block_graph(
            params.config(),
            params.roles(),
            params.tensors(),
            b,
            None,
            Trainable::Nothing,
            Some(&mut hook),
        )?;
        Ok(seen)
    });
    let mut merged: Vec<Vec<f32>> = vec![Vec::new(); layers.len()];
    for r in per_block {
        for (acc, cols) in merged.iter_mut().zip(r?) {
            acc.extend_from_slice(&cols);
        }
    }
    layers
        .iter()
        .zip(merged)
        .map(|(&layer, cols)| {
            let (_, d_in) = params.config().linear_shape(layer.kind);
            LayerTap::new(layer, d_in, cols)
        })
        .collect()
}

/// Layers sharing an input are captured together: `{q, k, v}`, `{out}`, `{fc1}`, `{fc2}` per block.
pub fn layer_groups(params: &Parameters) -> Vec<Vec<LayerId>> {
    let mut groups = Vec::new();
    for block in 0..params.config().n_layers {
        let id = |kind| LayerId { block, kind };
        groups.push(vec![id(LinearKind::Q), id(LinearKind::K), id(LinearKind::V)]);
        groups.push(vec![id(LinearKind::Out)]);
        groups.push(vec![id(LinearKind::Fc1)]);
        groups.push(vec![id(LinearKind::Fc2)]);
    }
    groups
}

/// Lazily produces taps group by group so the caller can quantize each
/// group before the next one is captured.
pub struct SequentialTaps<'a> {
    blocks: &'a [&'a [u16]],
    groups: Vec<Vec<LayerId>>,
    next: usize,
}

impl<'a> SequentialTaps<'a> {
    pub fn new(params: &Parameters, blocks: &'a [&'a [u16]]) -> Self {
        Self {
            blocks,
            groups: layer_groups(params),
            next: 0,
        }
    }

    /// Taps for the next group, propagated through `current`, which must
    /// already hold the quantized weights of every earlier group.
    pub fn next_group(&mut self, current: &Parameters) -> Result<Option<Vec<LayerTap>>> {
        let Some(group) = self.groups.get(self.next) else {
            return Ok(None);
        };
        self.next += 1;
        capture_taps(current, self.blocks, group).map(Some)
    }
}

/// Taps for every quantized layer, in canonical layer order.
///
/// In sequential mode the earlier layers are round-to-nearest quantized in
/// `format` (scales calibrated on the original weights) before each capture.
pub fn capture_layer_taps(
    params: &Parameters,
    blocks: &[&[u16]],
    propagation: Propagation,
    format: Option<QuantFormat>,
) -> Result<Vec<LayerTap>> {
    match propagation {
        Propagation::FullPrecision => capture_taps(params, blocks, &params.config().quantized_layers()),
        Propagation::SequentialQuantized => {
            let format =
                format.ok_or_else(|| Error::Config("sequential tap propagation needs a quantization format".into()))?;
            let mut working = params.clone();
            let mut session = SequentialTaps::new(params, blocks);
            let mut out = Vec::new();
            while let Some(taps) = session.next_group(&working)? {
                for tap in &taps {
                    let w = params.linear_weight(tap.layer);
                    let q = calibrate_scale(w, format)?;
                    *working.linear_weight_mut(tap.layer) = fake_quantize(w, &q)?;
                }
                out.extend(taps);
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 257,
            seq_len: 8,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 24,
            seed: 1,
        }
    }

    fn blocks() -> Vec<Vec<u16>> {
        vec![
            (0..8).map(|i| i * 13 % 256).collect(),
            (0..8).map(|i| i * 31 % 256).collect(),
        ]
    }

    fn frob(a: &LayerTap, b: &LayerTap) -> f64 {
        a.columns()
            .iter()
            .zip(b.columns())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn tap_shape_is_examples_times_seq() {
        let p = Parameters::init(&cfg()).unwrap();
        let b = blocks();
        let refs: Vec<&[u16]> = b.iter().map(|x| x.as_slice()).collect();
        let taps = capture_layer_taps(&p, &refs, Propagation::FullPrecision, None).unwrap();
        assert_eq!(taps.len(), 12);
        let q = &taps[0];
        assert_eq!(q.to_matrix().shape(), &[16, 16]);
        let fc2 = taps.iter().find(|t| t.layer.kind == LinearKind::Fc2).unwrap();
        assert_eq!((fc2.d_in(), fc2.n_columns()), (24, 16));
    }

    #[test]
    fn full_precision_taps_ignore_format_and_int8_sequential_is_close() {
        let p = Parameters::init(&cfg()).unwrap();
        let b = blocks();
        let refs: Vec<&[u16]> = b.iter().map(|x| x.as_slice()).collect();
        let fp = capture_layer_taps(&p, &refs, Propagation::FullPrecision, None).unwrap();
        let fp2 = capture_layer_taps(&p, &refs, Propagation::FullPrecision, QuantFormat::new(2).ok()).unwrap();
        assert_eq!(fp, fp2);
        let s8 = capture_layer_taps(&p, &refs, Propagation::SequentialQuantized, QuantFormat::new(8).ok()).unwrap();
        let s2 = capture_layer_taps(&p, &refs, Propagation::SequentialQuantized, QuantFormat::new(2).ok()).unwrap();
        // first group sees no quantized layer at all
        assert_eq!(fp[0], s8[0]);
        for i in 3..fp.len() {
            let norm = fp[i].columns().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let d8 = frob(&fp[i], &s8[i]);
            let d2 = frob(&fp[i], &s2[i]);
            assert!(d8 < 0.05 * norm, "layer {}: {d8} vs norm {norm}", fp[i].layer);
            assert!(d8 < d2);
        }
    }

    #[test]
    fn sequential_needs_format() {
        let p = Parameters::init(&cfg()).unwrap();
        let b = blocks();
        let refs: Vec<&[u16]> = b.iter().map(|x| x.as_slice()).collect();
        assert!(capture_layer_taps(&p, &refs, Propagation::SequentialQuantized, None).is_err());
    }
}
