//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the tape, so the
//! node vector is already in topological order. [`Graph::backward`] walks it
//! in reverse. Fake-quantization nodes use the straight-through rule: their
//! Jacobian is the identity, clamped or not.

use crate::error::{Error, Result};
use crate::kernels::{self, LayerNormCache};
use crate::quant::CalibratedQuantizer;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        row: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        a: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: LayerNormCache<T>,
    },
    Gelu {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    FakeQuant {
        x: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::Mul { .. } => "mul",
            Op::Sum { .. } => "sum",
            Op::Gather { .. } => "embedding_gather",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu { .. } => "gelu",
            Op::Attention { .. } => "causal_attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::FakeQuant { .. } => "fake_quantize",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<usize>,
}

/// Gradients keyed by parameter id, one entry per registered parameter.
#[derive(Debug, Clone)]
pub struct GradientMap<T = f32> {
    entries: Vec<(usize, Tensor<T>)>,
}

impl<T: Scalar> GradientMap<T> {
    pub(crate) fn from_entries(mut entries: Vec<(usize, Tensor<T>)>) -> Self {
        entries.sort_by_key(|(id, _)| *id);
        Self { entries }
    }

    pub fn get(&self, param: usize) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(id, _)| *id == param).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.entries.iter().map(|(id, t)| (*id, t))
    }

    pub fn into_entries(self) -> Vec<(usize, Tensor<T>)> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, None)
    }

    /// Trainable leaf identified by `id` in the resulting [`GradientMap`].
    pub fn param(&mut self, id: usize, value: Tensor<T>) -> Var {
        self.push_leaf(value, Some(id))
    }

    fn push_leaf(&mut self, value: Tensor<T>, param: Option<usize>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: param.is_some(),
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op.name())?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    /// `a·b`, or `a·bᵀ` when `trans_b` is set.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n, bstride) = if trans_b { (bc, br, (1, bc)) } else { (br, bc, (bc, 1)) };
        if k != kb {
            return Err(Error::contract(
                "matmul",
                format!("inner dimensions differ: [{m}, {k}] x [{br}, {bc}] (trans_b={trans_b})"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            bstride,
            T::zero(),
            &mut out,
            (n, 1),
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::contract("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    /// Adds a length-`cols` vector to every row of a 2-D tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.dims2(a, "add_row")?;
        if self.value(row).len() != cols {
            return Err(Error::contract(
                "add_row",
                format!("row of length {} for {cols} columns", self.value(row).len()),
            ));
        }
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (x, &b) in chunk.iter_mut().zip(&r) {
                *x = *x + b;
            }
        }
        self.push(value, Op::AddRow { a, row }, &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale { a, c }, &[a])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::contract("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Mul { a, b }, &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.push(Tensor::scalar(T::of_f64(s)), Op::Sum { a }, &[a])
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "embedding_gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(
                "embedding_gather",
                format!("id {bad} out of range for {rows} rows"),
            ));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Row-wise layer normalization (epsilon 1e-5) with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, d) = self.dims2(x, "layernorm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::contract("layernorm", "affine parameters must match width"));
        }
        let (y, cache) = kernels::layernorm(
            self.value(x).data(),
            d,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(vec![rows, d], y)?;
        self.push(value, Op::LayerNorm { x, gamma, beta, cache }, &[x, gamma, beta])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(kernels::gelu);
        self.push(value, Op::Gelu { x }, &[x])
    }

    /// Multi-head causal softmax attention on `[seq, d]` projections.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (seq, d) = self.dims2(q, "causal_attention")?;
        if self.value(k).shape() != [seq, d] || self.value(v).shape() != [seq, d] {
            return Err(Error::contract("causal_attention", "q, k, v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(
                "causal_attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        let (out, probs) = kernels::causal_attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            seq,
            d,
            heads,
        );
        let value = Tensor::new(vec![seq, d], out)?;
        self.push(value, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Mean cross-entropy of the first `targets.len()` rows of `logits`
    /// (`[positions, vocab]`); any further rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if rows < targets.len() || targets.is_empty() {
            return Err(Error::contract(
                "cross_entropy",
                format!("{rows} rows for {} targets", targets.len()),
            ));
        }
        if targets.iter().any(|&t| t >= vocab) {
            return Err(Error::contract("cross_entropy", "target id out of vocabulary"));
        }
        let (loss, probs) = kernels::cross_entropy(self.value(logits).data(), vocab, targets);
        self.push(
            Tensor::scalar(T::of_f64(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Fake quantization with a straight-through gradient.
    pub fn fake_quant(&mut self, x: Var, q: &CalibratedQuantizer) -> Result<Var> {
        self.value(x).check_finite("fake_quantize")?;
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), q.apply_slice(v.data()))?;
        self.push(value, Op::FakeQuant { x }, &[x])
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<GradientMap<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract("backward", "loss must be a scalar node"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            g.check_finite(&format!("backward {}#{idx}", node.op.name()))?;
            if node.param.is_some() {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(&node.op, &g, &mut grads)?;
        }

        let mut entries: Vec<(usize, Tensor<T>)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                n.param.map(|id| {
                    let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                    (id, g)
                })
            })
            .collect();
        entries.sort_by_key(|(id, _)| *id);
        Ok(GradientMap { entries })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims2(*a, "matmul")?;
                let n = g.shape()[1];
                if self.wants(*a) {
                    // dA = G·Bᵀ (or G·B when B was used transposed)
                    let bstride = if *trans_b { (k, 1) } else { (1, n) };
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        (n, 1),
                        self.value(*b).data(),
                        bstride,
                        T::zero(),
                        &mut da,
                        (k, 1),
                    );
                    Self::accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    if *trans_b {
                        // dB = Gᵀ·A, shape [n, k]
                        let mut db = vec![T::zero(); n * k];
                        kernels::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            g.data(),
                            (1, n),
                            av,
                            (k, 1),
                            T::zero(),
                            &mut db,
                            (k, 1),
                        );
                        Self::accumulate(grads, *b, Tensor::new(vec![n, k], db)?);
                    } else {
                        // dB = Aᵀ·G, shape [k, n]
                        let mut db = vec![T::zero(); k * n];
                        kernels::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            av,
                            (1, k),
                            g.data(),
                            (n, 1),
                            T::zero(),
                            &mut db,
                            (n, 1),
                        );
                        Self::accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                    }
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow { a, row } => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.wants(*row) {
                    let cols = self.value(*row).len();
                    let mut dr = vec![T::zero(); cols];
                    for chunk in g.data().chunks(cols) {
                        for (d, &x) in dr.iter_mut().zip(chunk) {
                            *d = *d + x;
                        }
                    }
                    let shape = self.value(*row).shape().to_vec();
                    Self::accumulate(grads, *row, Tensor::new(shape, dr)?);
                }
            }
            Op::Scale { a, c } => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.map(|x| x * *c));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    Self::accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    Self::accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Sum { a } => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, Tensor::full(self.value(*a).shape(), g.item()));
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let (rows, cols) = self.dims2(*table, "embedding_gather")?;
                    let mut dt = vec![T::zero(); rows * cols];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..cols {
                            dt[i * cols + j] = dt[i * cols + j] + g.data()[r * cols + j];
                        }
                    }
                    Self::accumulate(grads, *table, Tensor::new(vec![rows, cols], dt)?);
                }
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let (rows, d) = self.dims2(*x, "layernorm")?;
                let (dx, dgamma, dbeta) = kernels::layernorm_backward(g.data(), d, self.value(*gamma).data(), cache);
                if self.wants(*x) {
                    Self::accumulate(grads, *x, Tensor::new(vec![rows, d], dx)?);
                }
                if self.wants(*gamma) {
                    let shape = self.value(*gamma).shape().to_vec();
                    Self::accumulate(grads, *gamma, Tensor::new(shape, dgamma)?);
                }
                if self.wants(*beta) {
                    let shape = self.value(*beta).shape().to_vec();
                    Self::accumulate(grads, *beta, Tensor::new(shape, dbeta)?);
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let d = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &xi)| gi * kernels::gelu_grad(xi))
                        .collect();
                    Self::accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (seq, d) = self.dims2(*q, "causal_attention")?;
                let (dq, dk, dv) = kernels::causal_attention_backward(
                    g.data(),
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    seq,
                    d,
                    *heads,
                );
                for (var, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(var) {
                        Self::accumulate(grads, var, Tensor::new(vec![seq, d], grad)?);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.wants(*logits) {
                    let shape = self.value(*logits).shape().to_vec();
                    let d = kernels::cross_entropy_backward(g.item(), probs, shape[1], targets);
                    Self::accumulate(grads, *logits, Tensor::new(shape, d)?);
                }
            }
            Op::FakeQuant { x } => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, crate::qaft::ste_gradient(g));
                }
            }
        }
        Ok(())
    }
}
