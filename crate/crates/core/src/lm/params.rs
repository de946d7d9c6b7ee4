use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{LayerId, LinearKind, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;
const TENSORS_PER_BLOCK: usize = 16;

/// What a parameter tensor is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    TokenEmbedding,
    PositionEmbedding,
    LayerNormGamma,
    LayerNormBeta,
    Weight(LayerId),
    Bias(LayerId),
    FinalNormGamma,
    FinalNormBeta,
    Head,
}

impl ParamRole {
    /// Inside a transformer block (embeddings, final layernorm and head are not).
    pub fn in_transformer_stack(self) -> bool {
        !matches!(
            self,
            ParamRole::TokenEmbedding
                | ParamRole::PositionEmbedding
                | ParamRole::FinalNormGamma
                | ParamRole::FinalNormBeta
                | ParamRole::Head
        )
    }
}

/// Named tensors of the network, in manifest order:
/// `tok_emb, pos_emb, blocks.{i}.{ln1, attn.q, attn.k, attn.v, attn.out, ln2, mlp.fc1, mlp.fc2}, ln_f, head`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    names: Vec<String>,
    roles: Vec<ParamRole>,
    tensors: Vec<Tensor>,
}

pub(crate) fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, ParamRole)> {
    let d = c.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), vec![c.vocab_size, d], ParamRole::TokenEmbedding),
        ("pos_emb".to_string(), vec![c.seq_len, d], ParamRole::PositionEmbedding),
    ];
    for block in 0..c.n_layers {
        let ln = |out: &mut Vec<_>, name: &str| {
            out.push((
                format!("blocks.{block}.{name}.gamma"),
                vec![d],
                ParamRole::LayerNormGamma,
            ));
            out.push((format!("blocks.{block}.{name}.beta"), vec![d], ParamRole::LayerNormBeta));
        };
        let linear = |out: &mut Vec<_>, kind: LinearKind| {
            let id = LayerId { block, kind };
            let (o, i) = c.linear_shape(kind);
            out.push((format!("{id}.weight"), vec![o, i], ParamRole::Weight(id)));
            out.push((format!("{id}.bias"), vec![o], ParamRole::Bias(id)));
        };
        ln(&mut out, "ln1");
        for kind in [LinearKind::Q, LinearKind::K, LinearKind::V, LinearKind::Out] {
            linear(&mut out, kind);
        }
        ln(&mut out, "ln2");
        linear(&mut out, LinearKind::Fc1);
        linear(&mut out, LinearKind::Fc2);
    }
    out.push(("ln_f.gamma".to_string(), vec![d], ParamRole::FinalNormGamma));
    out.push(("ln_f.beta".to_string(), vec![d], ParamRole::FinalNormBeta));
    out.push(("head.weight".to_string(), vec![c.vocab_size, d], ParamRole::Head));
    out
}

impl Parameters {
    /// Fresh GPT-2 style initialization seeded from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let residual_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let mut names = Vec::new();
        let mut roles = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, role) in layout(config) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match role {
                ParamRole::LayerNormGamma | ParamRole::FinalNormGamma => vec![1.0; n],
                ParamRole::LayerNormBeta | ParamRole::FinalNormBeta | ParamRole::Bias(_) => {
                    vec![0.0; n]
                }
                _ => {
                    let std = match role {
                        ParamRole::Weight(LayerId {
                            kind: LinearKind::Out | LinearKind::Fc2,
                            ..
                        }) => residual_std,
                        _ => INIT_STD,
                    };
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
                }
            };
            names.push(name);
            roles.push(role);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self {
            config: config.clone(),
            names,
            roles,
            tensors,
        })
    }

    /// Rebuilds parameters from tensors given in manifest order.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let lay = layout(config);
        if lay.len() != tensors.len() {
            return Err(Error::contract(
                "Parameters::from_tensors",
                format!("expected {} tensors, got {}", lay.len(), tensors.len()),
            ));
        }
        for ((name, shape, _), t) in lay.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::contract(
                    "Parameters::from_tensors",
                    format!("{name}: expected shape {shape:?}, got {:?}", t.shape()),
                ));
            }
        }
        let (names, roles) = lay.into_iter().map(|(n, _, r)| (n, r)).unzip();
        Ok(Self {
            config: config.clone(),
            names,
            roles,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn roles(&self) -> &[ParamRole] {
        &self.roles
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn block_base(block: usize) -> usize {
        2 + block * TENSORS_PER_BLOCK
    }

    fn linear_offset(kind: LinearKind) -> usize {
        match kind {
            LinearKind::Q => 2,
            LinearKind::K => 4,
            LinearKind::V => 6,
            LinearKind::Out => 8,
            LinearKind::Fc1 => 12,
            LinearKind::Fc2 => 14,
        }
    }

    pub fn weight_index(layer: LayerId) -> usize {
        Self::block_base(layer.block) + Self::linear_offset(layer.kind)
    }

    pub fn bias_index(layer: LayerId) -> usize {
        Self::weight_index(layer) + 1
    }

    /// Indices of `(gamma, beta)` for `ln1` (`second == false`) or `ln2`.
    pub fn block_ln_indices(block: usize, second: bool) -> (usize, usize) {
        let base = Self::block_base(block) + if second { 10 } else { 0 };
        (base, base + 1)
    }

    pub fn final_ln_indices(&self) -> (usize, usize) {
        let base = Self::block_base(self.config.n_layers);
        (base, base + 1)
    }

    pub fn head_index(&self) -> usize {
        Self::block_base(self.config.n_layers) + 2
    }

    pub fn linear_weight(&self, layer: LayerId) -> &Tensor {
        &self.tensors[Self::weight_index(layer)]
    }

    pub fn linear_weight_mut(&mut self, layer: LayerId) -> &mut Tensor {
        &mut self.tensors[Self::weight_index(layer)]
    }

    /// Dimension `D` of the quantized-weight subvector.
    pub fn quantized_dim(&self) -> usize {
        self.config
            .quantized_layers()
            .into_iter()
            .map(|l| self.linear_weight(l).len())
            .sum()
    }

    /// The quantized-weight subvector `w ∈ R^D`: layers in canonical order, each row-major.
    pub fn flatten_quantized(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.quantized_dim());
        for layer in self.config.quantized_layers() {
            out.extend_from_slice(self.linear_weight(layer).data());
        }
        out
    }

    /// Copy of `self` with the quantized-weight subvector replaced by `w`.
    pub fn with_quantized(&self, w: &[f32]) -> Result<Parameters> {
        if w.len() != self.quantized_dim() {
            return Err(Error::contract(
                "with_quantized",
                format!("vector of length {} for D = {}", w.len(), self.quantized_dim()),
            ));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for layer in self.config.quantized_layers() {
            let t = out.linear_weight_mut(layer);
            let n = t.len();
            t.data_mut().copy_from_slice(&w[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    /// Every parameter value, concatenated in manifest order.
    pub fn flatten_all(&self) -> Vec<f32> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}
