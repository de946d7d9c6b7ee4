//! Decoder-only transformer forward pass and NLL evaluation.
//!
//! Pre-layernorm blocks: `x += attn(ln1(x))`, `x += fc2(gelu(fc1(ln2(x))))`,
//! then a final layernorm and an untied head. A block of `seq_len` tokens is
//! processed in full; the loss averages over the `seq_len − 1` positions that
//! have a next token.

use super::config::{LayerId, LinearKind, ModelConfig};
use super::params::{ParamRole, Parameters};
use crate::error::{Error, Result};
use crate::graph::{GradientMap, Graph, Var};
use crate::par;
use crate::quant::{apply_quantizers, ModelQuantizers};
use crate::tensor::{Scalar, Tensor};

/// Which parameter tensors become trainable leaves of the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    All,
    /// Only the transformer-stack linear weights (the quantized set).
    QuantizedWeights,
}

impl Trainable {
    fn includes(self, role: ParamRole) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::All => true,
            Trainable::QuantizedWeights => matches!(role, ParamRole::Weight(_)),
        }
    }
}

pub type TapHook<'h, T> = &'h mut dyn FnMut(LayerId, &Tensor<T>);

pub struct BlockGraph<T: Scalar> {
    pub graph: Graph<T>,
    pub loss: Var,
    pub logits: Var,
}

/// Builds the computation graph for one block of tokens.
///
/// `tensors` are the parameters in manifest order (possibly cast to `f64`).
/// With `quantizers`, each quantized weight passes through a fake-quantize
/// node before its matmul. `hook` sees the input of every quantized linear layer.
pub fn build_block_graph<T: Scalar>(
    config: &ModelConfig,
    roles: &[ParamRole],
    tensors: &[Tensor<T>],
    block: &[u16],
    quantizers: Option<&ModelQuantizers>,
    trainable: Trainable,
    mut hook: Option<TapHook<'_, T>>,
) -> Result<BlockGraph<T>> {
    if block.len() != config.seq_len {
        return Err(Error::contract(
            "forward",
            format!("block of {} tokens, expected {}", block.len(), config.seq_len),
        ));
    }
    if let Some(&bad) = block.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::contract("forward", format!("token id {bad} outside vocabulary")));
    }
    let mut g = Graph::new();
    let leaves: Vec<Var> = tensors
        .iter()
        .zip(roles)
        .enumerate()
        .map(|(i, (t, &role))| {
            if trainable.includes(role) {
                g.param(i, t.clone())
            } else {
                g.input(t.clone())
            }
        })
        .collect();

    let ids: Vec<usize> = block.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..block.len()).collect();
    let tok = g.gather(leaves[0], &ids)?;
    let pos = g.gather(leaves[1], &positions)?;
    let mut x = g.add(tok, pos)?;

    let mut linear = |g: &mut Graph<T>, input: Var, layer: LayerId| -> Result<Var> {
        if let Some(h) = hook.as_mut() {
            h(layer, g.value(input));
        }
        let mut w = leaves[Parameters::weight_index(layer)];
        if let Some(q) = quantizers.and_then(|qs| qs.get(layer)) {
            w = g.fake_quant(w, q)?;
        }
        let y = g.matmul(input, w, true)?;
        g.add_row(y, leaves[Parameters::bias_index(layer)])
    };

    for block_idx in 0..config.n_layers {
        let id = |kind| LayerId { block: block_idx, kind };
        let (g1, b1) = Parameters::block_ln_indices(block_idx, false);
        let h = g.layernorm(x, leaves[g1], leaves[b1])?;
        let q = linear(&mut g, h, id(LinearKind::Q))?;
        let k = linear(&mut g, h, id(LinearKind::K))?;
        let v = linear(&mut g, h, id(LinearKind::V))?;
        let att = g.causal_attention(q, k, v, config.n_heads)?;
        let o = linear(&mut g, att, id(LinearKind::Out))?;
        x = g.add(x, o)?;

        let (g2, b2) = Parameters::block_ln_indices(block_idx, true);
        let h2 = g.layernorm(x, leaves[g2], leaves[b2])?;
        let f = linear(&mut g, h2, id(LinearKind::Fc1))?;
        let f = g.gelu(f)?;
        let m = linear(&mut g, f, id(LinearKind::Fc2))?;
        x = g.add(x, m)?;
    }

    let n = config.n_layers;
    let (gf, bf) = (2 + n * 16, 2 + n * 16 + 1);
    let xf = g.layernorm(x, leaves[gf], leaves[bf])?;
    let logits = g.matmul(xf, leaves[gf + 2], true)?;
    let loss = g.cross_entropy(logits, &ids[1..])?;
    Ok(BlockGraph { graph: g, loss, logits })
}

/// Mean next-token NLL of one block with the weights exactly as given.
pub fn block_nll(params: &Parameters, block: &[u16]) -> Result<f64> {
    let bg = build_block_graph(
        params.config(),
        params.roles(),
        params.tensors(),
        block,
        None,
        Trainable::Nothing,
        None,
    )?;
    Ok(bg.graph.value(bg.loss).item() as f64)
}

pub fn block_logits(params: &Parameters, block: &[u16]) -> Result<Tensor> {
    let bg = build_block_graph(
        params.config(),
        params.roles(),
        params.tensors(),
        block,
        None,
        Trainable::Nothing,
        None,
    )?;
    Ok(bg.graph.value(bg.logits).clone())
}

/// Mean NLL over blocks of equal length; with `quantizers`, every quantized
/// layer uses `Q(W_l)`. Blocks are evaluated in parallel and reduced in order.
pub fn forward_nll(params: &Parameters, quantizers: Option<&ModelQuantizers>, blocks: &[&[u16]]) -> Result<f64> {
    if blocks.is_empty() {
        return Err(Error::contract("forward_nll", "no blocks to evaluate"));
    }
    let quantized;
    let effective = match quantizers {
        Some(q) => {
            quantized = apply_quantizers(params, q)?;
            &quantized
        }
        None => params,
    };
    let losses = par::map(blocks, |b| block_nll(effective, b));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    let nll = total / blocks.len() as f64;
    if nll.is_finite() {
        Ok(nll)
    } else {
        Err(Error::numeric("forward_nll"))
    }
}

/// Loss and gradients of one block.
pub fn block_loss_and_grad(
    params: &Parameters,
    quantizers: Option<&ModelQuantizers>,
    block: &[u16],
    trainable: Trainable,
) -> Result<(f64, GradientMap)> {
    let bg = build_block_graph(
        params.config(),
        params.roles(),
        params.tensors(),
        block,
        quantizers,
        trainable,
        None,
    )?;
    let grads = bg.graph.backward(bg.loss)?;
    Ok((bg.graph.value(bg.loss).item() as f64, grads))
}

/// Batch-mean loss and gradients; per-block work runs in parallel and is summed in block order.
pub fn batch_loss_and_grad(
    params: &Parameters,
    quantizers: Option<&ModelQuantizers>,
    blocks: &[&[u16]],
    trainable: Trainable,
) -> Result<(f64, Vec<(usize, Tensor)>)> {
    let per_block = par::map(blocks, |b| block_loss_and_grad(params, quantizers, b, trainable));
    let mut total = 0.0;
    let mut acc: Option<Vec<(usize, Tensor)>> = None;
    for r in per_block {
        let (loss, grads) = r?;
        total += loss;
        let entries = grads.into_entries();
        match &mut acc {
            None => acc = Some(entries),
            Some(a) => {
                for ((_, t), (_, g)) in a.iter_mut().zip(&entries) {
                    t.add_assign(g);
                }
            }
        }
    }
    let inv = 1.0 / blocks.len() as f32;
    let mut grads = acc.unwrap_or_default();
    for (_, g) in &mut grads {
        g.scale_assign(inv);
    }
    Ok((total / blocks.len() as f64, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::finite_difference_at;
    use crate::quant::{calibrate_model, QuantFormat};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 257,
            seq_len: 8,
            d_model: 16,
            n_heads: 4,
            n_layers: 2,
            d_ff: 32,
            seed: 11,
        }
    }

    fn block(seed: u64, len: usize) -> Vec<u16> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(0..256)).collect()
    }

    #[test]
    fn zero_head_gives_uniform_nll() {
        let mut p = Parameters::init(&tiny()).unwrap();
        let h = p.head_index();
        p.tensors_mut()[h].data_mut().fill(0.0);
        let nll = block_nll(&p, &block(1, 8)).unwrap();
        assert!((nll - 257f64.ln()).abs() < 1e-6, "{nll}");
    }

    #[test]
    fn causal_masking_is_exact() {
        let p = Parameters::init(&tiny()).unwrap();
        let b = block(2, 8);
        let base = block_logits(&p, &b).unwrap();
        for t in 0..7 {
            let mut changed = b.clone();
            changed[t + 1] = (changed[t + 1] + 17) % 256;
            let logits = block_logits(&p, &changed).unwrap();
            let v = 257;
            assert_eq!(&base.data()[..(t + 1) * v], &logits.data()[..(t + 1) * v]);
        }
    }

    #[test]
    fn quantized_forward_equals_prequantized_weights() {
        let p = Parameters::init(&tiny()).unwrap();
        let qs = calibrate_model(&p, QuantFormat::new(3).unwrap()).unwrap();
        let blocks = [block(3, 8), block(4, 8)];
        let refs: Vec<&[u16]> = blocks.iter().map(|b| b.as_slice()).collect();
        let a = forward_nll(&p, Some(&qs), &refs).unwrap();
        let manual = apply_quantizers(&p, &qs).unwrap();
        let b = forward_nll(&manual, None, &refs).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        // the graph's own fake-quant nodes agree with pre-quantized weights
        let (l, _) = block_loss_and_grad(&p, Some(&qs), &blocks[0], Trainable::QuantizedWeights).unwrap();
        assert_eq!(l.to_bits(), block_nll(&manual, &blocks[0]).unwrap().to_bits());
    }

    #[test]
    fn wrong_block_length_rejected() {
        let p = Parameters::init(&tiny()).unwrap();
        assert!(block_nll(&p, &block(1, 5)).is_err());
    }

    #[test]
    fn quantized_weight_gradients_only() {
        let p = Parameters::init(&tiny()).unwrap();
        let (_, g) = block_loss_and_grad(&p, None, &block(5, 8), Trainable::QuantizedWeights).unwrap();
        assert_eq!(g.len(), tiny().quantized_layers().len());
        for (id, t) in g.iter() {
            assert!(matches!(p.roles()[id], ParamRole::Weight(_)));
            assert_eq!(t.shape(), p.tensors()[id].shape());
        }
    }

    #[test]
    fn sequential_and_parallel_nll_agree_bitwise() {
        let p = Parameters::init(&tiny()).unwrap();
        let blocks: Vec<Vec<u16>> = (0..6).map(|s| block(s, 8)).collect();
        let refs: Vec<&[u16]> = blocks.iter().map(|b| b.as_slice()).collect();
        let a = forward_nll(&p, None, &refs).unwrap();
        let b = par::sequential(|| forward_nll(&p, None, &refs)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn small_transformer_gradient_matches_finite_differences() {
        let cfg = tiny();
        let p = Parameters::init(&cfg).unwrap();
        // larger weights than the 0.02 init so every path carries signal
        let tensors: Vec<Tensor<f64>> = p
            .tensors()
            .iter()
            .zip(p.roles())
            .map(|(t, r)| match r {
                ParamRole::LayerNormGamma | ParamRole::FinalNormGamma => t.cast::<f64>(),
                _ => t.cast::<f64>().map(|v| v * 10.0),
            })
            .collect();
        let b = block(6, 8);
        let roles = p.roles().to_vec();
        let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
            let bg = build_block_graph(&cfg, &roles, ts, &b, None, Trainable::Nothing, None)?;
            Ok(bg.graph.value(bg.loss).item())
        };
        let bg = build_block_graph(&cfg, &roles, &tensors, &b, None, Trainable::All, None).unwrap();
        let grads = bg.graph.backward(bg.loss).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coords: Vec<(usize, usize)> = (0..40)
            .map(|_| {
                let t = rng.gen_range(0..tensors.len());
                (t, rng.gen_range(0..tensors[t].len()))
            })
            .collect();
        let numeric = finite_difference_at(eval, &tensors, &coords, 1e-3).unwrap();
        for (&(t, i), n) in coords.iter().zip(numeric) {
            let a = grads.get(t).unwrap().data()[i];
            if a.abs() < 1e-6 {
                continue;
            }
            assert!(
                (a - n).abs() / a.abs().max(n.abs()) < 1e-3,
                "tensor {t}[{i}]: {a} vs {n}"
            );
        }
    }
}
