//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Tape`] records every operation of one forward pass; [`Var`]s are cheap
//! handles into it. The tape is rebuilt from scratch on every forward pass,
//! so control flow in model code is ordinary Rust. [`Var::backward`] runs the
//! recorded ops in reverse creation order (each node visited exactly once),
//! seeding the scalar loss with 1. Interior gradients are scratch storage of
//! a single backward call; leaf gradients accumulate across calls, so two
//! `backward()` calls without collecting yield exactly doubled leaf grads.
//!
//! Shape or index misuse panics with a message naming the offending shapes;
//! these are programming errors, not runtime conditions. A tape and its vars
//! are confined to one thread; tensors themselves move freely.

use std::cell::RefCell;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::{gemm_slices, Tensor};

pub type NodeId = usize;

/// Reduction applied by the loss ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over counted (non-excluded) rows. The spec'd loss semantics.
    TokenMean,
    /// Plain sum over counted rows.
    Sum,
}

/// Row layout of several variable-length sequences packed into one rank-2
/// tensor (no padding rows).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackLayout {
    lens: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl PackLayout {
    pub fn new(lens: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut total = 0;
        for &l in &lens {
            offsets.push(total);
            total += l;
        }
        PackLayout { lens, offsets, total }
    }

    pub fn n_seqs(&self) -> usize {
        self.lens.len()
    }

    pub fn len(&self, s: usize) -> usize {
        self.lens[s]
    }

    pub fn offset(&self, s: usize) -> usize {
        self.offsets[s]
    }

    pub fn total_rows(&self) -> usize {
        self.total
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }
}

/// Configuration of one fused multi-head attention application.
///
/// Query rows and key/value rows are packed sequences; sequence `s` of the
/// query pack attends to sequence `s` of the key/value pack. `causal`
/// restricts query position `a` to key positions `b <= a` (self-attention
/// only). `key_mask` marks attendable key rows (`false` rows are skipped
/// entirely, equivalent to a -inf pre-softmax logit).
#[derive(Clone)]
pub struct AttentionSpec<S> {
    pub n_heads: usize,
    pub scale: S,
    pub q_layout: Rc<PackLayout>,
    pub kv_layout: Rc<PackLayout>,
    pub causal: bool,
    pub key_mask: Option<Rc<Vec<bool>>>,
}

enum Op<S> {
    Leaf,
    Add(NodeId, NodeId),
    /// Row-broadcast add: rank-2 x + rank-1 bias.
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    Matmul(NodeId, NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        pad: Option<usize>,
        reduction: Reduction,
        n_counted: usize,
    },
    SoftCrossEntropy {
        logits: NodeId,
        probs: Tensor<S>,
        row_mask: Option<Rc<Vec<bool>>>,
        reduction: Reduction,
        n_counted: usize,
    },
    GatherRows {
        src: NodeId,
        idx: Rc<Vec<usize>>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: S,
    },
    Relu(NodeId),
    Transpose(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    MaskFill {
        x: NodeId,
        mask: Rc<Vec<bool>>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttentionSpec<S>,
        /// Attention probabilities saved by the forward pass, one
        /// `Tq_s x Tk_s` block per (sequence, head) in iteration order.
        probs: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    /// Persistent gradient accumulator; leaves only.
    acc_grad: Option<Vec<S>>,
}

pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: NodeId,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Register a differentiable leaf (a parameter).
    pub fn leaf(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// Register a non-differentiable input.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, op, requires_grad, acc_grad: None });
        Var { tape: self, id }
    }

    /// Concatenate along `axis` (rank-2: axis 0 or 1; rank-1: axis 0).
    pub fn concat<'t>(&'t self, parts: &[Var<'t, S>], axis: usize) -> Var<'t, S> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        for p in parts {
            assert!(std::ptr::eq(p.tape, self), "concat parts must share the tape");
        }
        let (value, requires) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].id].value;
            let rank = first.rank();
            assert!(
                (rank == 2 && axis <= 1) || (rank == 1 && axis == 0),
                "concat: unsupported rank {rank} axis {axis}"
            );
            let requires = parts.iter().any(|p| nodes[p.id].requires_grad);
            let value = if rank == 1 || axis == 0 {
                let cols = if rank == 1 { 1 } else { first.cols() };
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let t = &nodes[p.id].value;
                    assert_eq!(t.rank(), rank, "concat: mixed ranks");
                    if rank == 2 {
                        assert_eq!(
                            t.cols(),
                            cols,
                            "concat axis 0: column mismatch {} vs {}",
                            t.cols(),
                            cols
                        );
                        rows += t.shape()[0];
                    }
                    data.extend_from_slice(t.data());
                }
                if rank == 1 {
                    Tensor::new(vec![data.len()], data)
                } else {
                    Tensor::new(vec![rows, cols], data)
                }
            } else {
                let rows = first.shape()[0];
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| {
                        let t = &nodes[p.id].value;
                        assert_eq!(
                            t.shape()[0],
                            rows,
                            "concat axis 1: row mismatch {} vs {}",
                            t.shape()[0],
                            rows
                        );
                        t.cols()
                    })
                    .collect();
                let total: usize = widths.iter().sum();
                let mut data = vec![S::zero(); rows * total];
                let mut col0 = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    let t = &nodes[p.id].value;
                    for r in 0..rows {
                        data[r * total + col0..r * total + col0 + w]
                            .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
                    }
                    col0 += w;
                }
                Tensor::new(vec![rows, total], data)
            };
            (value, requires)
        };
        self.push(value, Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis }, requires)
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Clone of this node's value.
    pub fn value(&self) -> Tensor<S> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn scalar_value(&self) -> S {
        self.tape.nodes.borrow()[self.id].value.scalar_value()
    }

    /// Accumulated gradient of a differentiable leaf; zeros if no backward
    /// pass reached it, `None` for constants and interior nodes.
    pub fn grad(&self) -> Option<Tensor<S>> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        Some(match &node.acc_grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()),
            None => Tensor::zeros(node.value.shape().to_vec()),
        })
    }

    fn same_tape(&self, other: &Var<'t, S>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(
        self,
        f: impl FnOnce(&Tensor<S>) -> Tensor<S>,
        op: impl FnOnce(NodeId) -> Op<S>,
    ) -> Var<'t, S> {
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            (f(&nodes[self.id].value), nodes[self.id].requires_grad)
        };
        self.tape.push(value, op(self.id), requires)
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(self, rhs: Var<'t, S>) -> Var<'t, S> {
        self.same_tape(&rhs);
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            assert_eq!(
                a.shape(),
                b.shape(),
                "add shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            );
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
            (
                Tensor::new(a.shape().to_vec(), data),
                nodes[self.id].requires_grad || nodes[rhs.id].requires_grad,
            )
        };
        self.tape.push(value, Op::Add(self.id, rhs.id), requires)
    }

    /// Add a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_bias(self, bias: Var<'t, S>) -> Var<'t, S> {
        self.same_tape(&bias);
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            assert_eq!(x.rank(), 2, "add_bias input must be rank 2, got {:?}", x.shape());
            assert_eq!(
                b.shape(),
                &[x.cols()],
                "add_bias bias shape {:?} does not match row width {}",
                b.shape(),
                x.cols()
            );
            let cols = x.cols();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v + b.data()[i % cols])
                .collect();
            (
                Tensor::new(x.shape().to_vec(), data),
                nodes[self.id].requires_grad || nodes[bias.id].requires_grad,
            )
        };
        self.tape.push(value, Op::AddBias(self.id, bias.id), requires)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(self, rhs: Var<'t, S>) -> Var<'t, S> {
        self.same_tape(&rhs);
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            assert_eq!(
                a.shape(),
                b.shape(),
                "mul shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            );
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
            (
                Tensor::new(a.shape().to_vec(), data),
                nodes[self.id].requires_grad || nodes[rhs.id].requires_grad,
            )
        };
        self.tape.push(value, Op::Mul(self.id, rhs.id), requires)
    }

    /// Multiply by a compile-time constant scalar.
    pub fn scale(self, c: S) -> Var<'t, S> {
        self.unary(
            |x| Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * c).collect()),
            |id| Op::Scale(id, c),
        )
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(self, rhs: Var<'t, S>) -> Var<'t, S> {
        self.same_tape(&rhs);
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            (a.matmul(b), nodes[self.id].requires_grad || nodes[rhs.id].requires_grad)
        };
        self.tape.push(value, Op::Matmul(self.id, rhs.id), requires)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Var<'t, S> {
        self.unary(
            |x| {
                assert!(axis < x.rank().max(1), "softmax axis {} on shape {:?}", axis, x.shape());
                Tensor::new(x.shape().to_vec(), softmax_lanes(x.data(), x.shape(), axis))
            },
            |id| Op::Softmax { x: id, axis },
        )
    }

    /// Token-level cross-entropy of rank-2 logits `[T x V]` against `targets`
    /// (`len T`). Rows whose target equals `pad` are excluded from both the
    /// loss and the mean. Returns a scalar.
    pub fn cross_entropy(
        self,
        targets: &[usize],
        pad: Option<usize>,
        reduction: Reduction,
    ) -> Var<'t, S> {
        let (value, requires, n_counted) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            assert_eq!(x.rank(), 2, "cross_entropy logits must be rank 2, got {:?}", x.shape());
            let (t, v) = (x.shape()[0], x.shape()[1]);
            assert_eq!(targets.len(), t, "cross_entropy: {} targets for {} rows", targets.len(), t);
            let mut total = S::zero();
            let mut n_counted = 0usize;
            for (r, &tgt) in targets.iter().enumerate() {
                if Some(tgt) == pad {
                    continue;
                }
                assert!(tgt < v, "vocabulary error: target id {tgt} >= vocab size {v}");
                let row = x.row(r);
                total += log_sum_exp(row) - row[tgt];
                n_counted += 1;
            }
            let loss = match reduction {
                Reduction::TokenMean if n_counted > 0 => total / S::from_f64(n_counted as f64),
                _ => total,
            };
            (Tensor::scalar(loss), nodes[self.id].requires_grad, n_counted)
        };
        self.tape.push(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                pad,
                reduction,
                n_counted,
            },
            requires,
        )
    }

    /// Cross-entropy of rank-2 logits against full target distributions
    /// (`probs`, same shape, each counted row summing to 1 within 1e-6).
    /// `row_mask` marks counted rows (`None` counts all). The distributions
    /// are constants: gradient flows only into the logits. Returns a scalar.
    pub fn soft_cross_entropy(
        self,
        probs: Tensor<S>,
        row_mask: Option<Rc<Vec<bool>>>,
        reduction: Reduction,
    ) -> Var<'t, S> {
        let (value, requires, n_counted) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            assert_eq!(x.rank(), 2, "soft_cross_entropy logits must be rank 2");
            assert_eq!(
                x.shape(),
                probs.shape(),
                "soft_cross_entropy shape mismatch: logits {:?} vs probs {:?}",
                x.shape(),
                probs.shape()
            );
            if let Some(m) = &row_mask {
                assert_eq!(m.len(), x.shape()[0], "soft_cross_entropy row mask length");
            }
            let tol = S::from_f64(1e-6);
            let mut total = S::zero();
            let mut n_counted = 0usize;
            for r in 0..x.shape()[0] {
                if let Some(m) = &row_mask {
                    if !m[r] {
                        continue;
                    }
                }
                let q = probs.row(r);
                let sum: S = q.iter().copied().sum();
                assert!(
                    (sum - S::one()).abs() <= tol,
                    "contract violation: target distribution row {r} sums to {sum}, not 1"
                );
                let row = x.row(r);
                let dot: S = q.iter().zip(row).map(|(&a, &b)| a * b).sum();
                total += log_sum_exp(row) - dot;
                n_counted += 1;
            }
            let loss = match reduction {
                Reduction::TokenMean if n_counted > 0 => total / S::from_f64(n_counted as f64),
                _ => total,
            };
            (Tensor::scalar(loss), nodes[self.id].requires_grad, n_counted)
        };
        self.tape.push(
            value,
            Op::SoftCrossEntropy { logits: self.id, probs, row_mask, reduction, n_counted },
            requires,
        )
    }

    /// Gather rows of a rank-2 tensor; the backward pass scatter-adds.
    /// With an embedding table as `self`, this is embedding lookup.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t, S> {
        let idx = Rc::new(idx.to_vec());
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            assert_eq!(x.rank(), 2, "gather_rows input must be rank 2, got {:?}", x.shape());
            let (rows, cols) = (x.shape()[0], x.cols());
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx.iter() {
                assert!(i < rows, "row index {i} out of range for {rows} rows");
                data.extend_from_slice(x.row(i));
            }
            (Tensor::new(vec![idx.len(), cols], data), nodes[self.id].requires_grad)
        };
        self.tape.push(value, Op::GatherRows { src: self.id, idx }, requires)
    }

    /// Embedding lookup: `self` is the `[V x d]` table.
    pub fn embedding_lookup(self, ids: &[usize]) -> Var<'t, S> {
        self.gather_rows(ids)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'t, S>, bias: Var<'t, S>, eps: S) -> Var<'t, S> {
        self.same_tape(&gain);
        self.same_tape(&bias);
        let (value, requires) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let g = &nodes[gain.id].value;
            let b = &nodes[bias.id].value;
            let d = *x.shape().last().expect("layer_norm on scalar");
            assert_eq!(g.shape(), &[d], "layer_norm gain shape {:?}, want [{d}]", g.shape());
            assert_eq!(b.shape(), &[d], "layer_norm bias shape {:?}, want [{d}]", b.shape());
            let mut out = vec![S::zero(); x.numel()];
            for (row_out, row_in) in out.chunks_mut(d).zip(x.data().chunks(d)) {
                let (mean, rstd) = row_moments(row_in, eps);
                for j in 0..d {
                    row_out[j] = (row_in[j] - mean) * rstd * g.data()[j] + b.data()[j];
                }
            }
            let requires = nodes[self.id].requires_grad
                || nodes[gain.id].requires_grad
                || nodes[bias.id].requires_grad;
            (Tensor::new(x.shape().to_vec(), out), requires)
        };
        self.tape
            .push(value, Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, eps }, requires)
    }

    /// ReLU activation (the original transformer feed-forward choice).
    pub fn relu(self) -> Var<'t, S> {
        self.unary(
            |x| {
                Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect(),
                )
            },
            Op::Relu,
        )
    }

    /// Rank-2 transpose: `[r, c]` becomes `[c, r]`. Used to score hidden
    /// states against an embedding table without storing a second copy of
    /// its weights.
    pub fn transpose(self) -> Var<'t, S> {
        self.unary(
            |x| {
                assert_eq!(x.rank(), 2, "transpose expects rank 2, got {:?}", x.shape());
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![S::zero(); x.numel()];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = x.data()[i * c + j];
                    }
                }
                Tensor::new(vec![c, r], out)
            },
            Op::Transpose,
        )
    }

    /// Replace masked elements (mask `true`) with a finite fill value; the
    /// conventional pre-softmax fill is -1e9, not -inf, to keep the data
    /// NaN-free.
    pub fn mask_fill(self, mask: Rc<Vec<bool>>, value: S) -> Var<'t, S> {
        let (out, requires) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            assert_eq!(
                mask.len(),
                x.numel(),
                "mask_fill: mask has {} entries for {} elements",
                mask.len(),
                x.numel()
            );
            let data = x
                .data()
                .iter()
                .zip(mask.iter())
                .map(|(&v, &m)| if m { value } else { v })
                .collect();
            (Tensor::new(x.shape().to_vec(), data), nodes[self.id].requires_grad)
        };
        self.tape.push(out, Op::MaskFill { x: self.id, mask }, requires)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(self) -> Var<'t, S> {
        self.unary(
            |x| Tensor::scalar(x.data().iter().copied().sum()),
            Op::SumAll,
        )
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(self) -> Var<'t, S> {
        self.unary(
            |x| {
                assert!(x.numel() > 0, "mean of empty tensor");
                let sum: S = x.data().iter().copied().sum();
                Tensor::scalar(sum / S::from_f64(x.numel() as f64))
            },
            Op::MeanAll,
        )
    }

    /// Run the backward pass from this scalar. Leaf gradients accumulate.
    pub fn backward(self) {
        let n = {
            let nodes = self.tape.nodes.borrow();
            let loss = &nodes[self.id].value;
            assert!(
                loss.numel() == 1,
                "contract violation: backward() needs a scalar loss, got shape {:?}",
                loss.shape()
            );
            nodes.len()
        };
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[self.id] = Some(vec![S::one()]);
        {
            let nodes = self.tape.nodes.borrow();
            for id in (0..=self.id).rev() {
                if !nodes[id].requires_grad {
                    grads[id] = None;
                    continue;
                }
                let Some(g) = grads[id].take() else { continue };
                backward_op(&nodes, id, &g, &mut grads);
                if matches!(nodes[id].op, Op::Leaf) {
                    grads[id] = Some(g);
                }
            }
        }
        let mut nodes = self.tape.nodes.borrow_mut();
        for (id, slot) in grads.into_iter().enumerate() {
            if let Some(g) = slot {
                if matches!(nodes[id].op, Op::Leaf) && nodes[id].requires_grad {
                    match &mut nodes[id].acc_grad {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a += *b;
                            }
                        }
                        None => nodes[id].acc_grad = Some(g),
                    }
                }
            }
        }
    }
}

impl<'t, S: Scalar> std::ops::Add for Var<'t, S> {
    type Output = Var<'t, S>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'t, S: Scalar> std::ops::Mul for Var<'t, S> {
    type Output = Var<'t, S>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

/// Fused multi-head attention over packed sequences. `q`, `k`, `v` are
/// `[rows x d]` with `d = n_heads * head_dim`; see [`AttentionSpec`].
pub fn attention<'t, S: Scalar>(
    q: Var<'t, S>,
    k: Var<'t, S>,
    v: Var<'t, S>,
    spec: AttentionSpec<S>,
) -> Var<'t, S> {
    q.same_tape(&k);
    q.same_tape(&v);
    let (value, probs, requires) = {
        let nodes = q.tape.nodes.borrow();
        let qt = &nodes[q.id].value;
        let kt = &nodes[k.id].value;
        let vt = &nodes[v.id].value;
        assert_eq!(qt.rank(), 2, "attention q must be rank 2");
        assert_eq!(kt.shape(), vt.shape(), "attention k/v shape mismatch");
        assert_eq!(qt.cols(), kt.cols(), "attention q/k width mismatch");
        let d = qt.cols();
        assert_eq!(d % spec.n_heads, 0, "width {d} not divisible by {} heads", spec.n_heads);
        assert_eq!(qt.shape()[0], spec.q_layout.total_rows(), "attention q layout rows");
        assert_eq!(kt.shape()[0], spec.kv_layout.total_rows(), "attention kv layout rows");
        assert_eq!(spec.q_layout.n_seqs(), spec.kv_layout.n_seqs(), "attention pack count");
        if let Some(m) = &spec.key_mask {
            assert_eq!(m.len(), kt.shape()[0], "attention key mask length");
        }
        if spec.causal {
            assert_eq!(
                spec.q_layout.lens(),
                spec.kv_layout.lens(),
                "causal attention requires matching query/key lengths"
            );
        }
        let (out, probs) = attention_forward(
            qt.data(),
            kt.data(),
            vt.data(),
            d,
            &spec,
        );
        let requires = nodes[q.id].requires_grad
            || nodes[k.id].requires_grad
            || nodes[v.id].requires_grad;
        (Tensor::new(vec![qt.shape()[0], d], out), probs, requires)
    };
    q.tape.push(value, Op::Attention { q: q.id, k: k.id, v: v.id, spec, probs }, requires)
}

fn attention_forward<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    d: usize,
    spec: &AttentionSpec<S>,
) -> (Vec<S>, Vec<S>) {
    let h = spec.n_heads;
    let dh = d / h;
    let mut out = vec![S::zero(); q.len()];
    let mut probs = Vec::new();
    let mut scores: Vec<S> = Vec::new();
    for s in 0..spec.q_layout.n_seqs() {
        let (qo, tq) = (spec.q_layout.offset(s), spec.q_layout.len(s));
        let (ko, tk) = (spec.kv_layout.offset(s), spec.kv_layout.len(s));
        for head in 0..h {
            let c0 = head * dh;
            for a in 0..tq {
                scores.clear();
                scores.resize(tk, S::zero());
                let qrow = &q[(qo + a) * d + c0..(qo + a) * d + c0 + dh];
                let mut max = S::neg_infinity();
                for b in 0..tk {
                    if !key_allowed(spec, a, b, ko) {
                        continue;
                    }
                    let krow = &k[(ko + b) * d + c0..(ko + b) * d + c0 + dh];
                    let mut dot = S::zero();
                    for c in 0..dh {
                        dot += qrow[c] * krow[c];
                    }
                    let sc = dot * spec.scale;
                    scores[b] = sc;
                    if sc > max {
                        max = sc;
                    }
                }
                debug_assert!(max > S::neg_infinity(), "attention row with no attendable keys");
                let mut z = S::zero();
                for b in 0..tk {
                    if key_allowed(spec, a, b, ko) {
                        let e = (scores[b] - max).exp();
                        scores[b] = e;
                        z += e;
                    } else {
                        scores[b] = S::zero();
                    }
                }
                let orow = &mut out[(qo + a) * d + c0..(qo + a) * d + c0 + dh];
                for b in 0..tk {
                    let p = scores[b] / z;
                    scores[b] = p;
                    if p != S::zero() {
                        let vrow = &v[(ko + b) * d + c0..(ko + b) * d + c0 + dh];
                        for c in 0..dh {
                            orow[c] += p * vrow[c];
                        }
                    }
                }
                probs.extend_from_slice(&scores);
            }
        }
    }
    (out, probs)
}

fn key_allowed<S: Scalar>(spec: &AttentionSpec<S>, a: usize, b: usize, ko: usize) -> bool {
    (!spec.causal || b <= a) && spec.key_mask.as_ref().map_or(true, |m| m[ko + b])
}

fn attention_backward<S: Scalar>(
    nodes: &[Node<S>],
    qid: NodeId,
    kid: NodeId,
    vid: NodeId,
    spec: &AttentionSpec<S>,
    probs: &[S],
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let q = nodes[qid].value.data();
    let k = nodes[kid].value.data();
    let v = nodes[vid].value.data();
    let d = nodes[qid].value.cols();
    let h = spec.n_heads;
    let dh = d / h;
    let need_q = nodes[qid].requires_grad;
    let need_k = nodes[kid].requires_grad;
    let need_v = nodes[vid].requires_grad;
    let mut gq = if need_q { Some(take_or_zeros(&mut grads[qid], q.len())) } else { None };
    let mut gk = if need_k { Some(take_or_zeros(&mut grads[kid], k.len())) } else { None };
    let mut gv = if need_v { Some(take_or_zeros(&mut grads[vid], v.len())) } else { None };
    let mut po = 0usize; // cursor into saved probs
    let mut dp: Vec<S> = Vec::new();
    for s in 0..spec.q_layout.n_seqs() {
        let (qo, tq) = (spec.q_layout.offset(s), spec.q_layout.len(s));
        let (ko, tk) = (spec.kv_layout.offset(s), spec.kv_layout.len(s));
        for head in 0..h {
            let c0 = head * dh;
            for a in 0..tq {
                let p = &probs[po..po + tk];
                po += tk;
                let grow = &g[(qo + a) * d + c0..(qo + a) * d + c0 + dh];
                // dV and dP
                dp.clear();
                dp.resize(tk, S::zero());
                for b in 0..tk {
                    if p[b] == S::zero() {
                        continue;
                    }
                    let vrow = &v[(ko + b) * d + c0..(ko + b) * d + c0 + dh];
                    let mut acc = S::zero();
                    for c in 0..dh {
                        acc += grow[c] * vrow[c];
                    }
                    dp[b] = acc;
                    if let Some(gv) = &mut gv {
                        let gvrow = &mut gv[(ko + b) * d + c0..(ko + b) * d + c0 + dh];
                        for c in 0..dh {
                            gvrow[c] += p[b] * grow[c];
                        }
                    }
                }
                if !need_q && !need_k {
                    continue;
                }
                // softmax jacobian: dS = P o (dP - <dP, P>)
                let mut dot = S::zero();
                for b in 0..tk {
                    dot += dp[b] * p[b];
                }
                let qrow = &q[(qo + a) * d + c0..(qo + a) * d + c0 + dh];
                for b in 0..tk {
                    if p[b] == S::zero() {
                        continue;
                    }
                    let ds = p[b] * (dp[b] - dot) * spec.scale;
                    let krow = &k[(ko + b) * d + c0..(ko + b) * d + c0 + dh];
                    if let Some(gq) = &mut gq {
                        let gqrow = &mut gq[(qo + a) * d + c0..(qo + a) * d + c0 + dh];
                        for c in 0..dh {
                            gqrow[c] += ds * krow[c];
                        }
                    }
                    if let Some(gk) = &mut gk {
                        let gkrow = &mut gk[(ko + b) * d + c0..(ko + b) * d + c0 + dh];
                        for c in 0..dh {
                            gkrow[c] += ds * qrow[c];
                        }
                    }
                }
            }
        }
    }
    if let Some(gq) = gq {
        grads[qid] = Some(gq);
    }
    if let Some(gk) = gk {
        grads[kid] = Some(gk);
    }
    if let Some(gv) = gv {
        grads[vid] = Some(gv);
    }
}

fn take_or_zeros<S: Scalar>(slot: &mut Option<Vec<S>>, n: usize) -> Vec<S> {
    slot.take().unwrap_or_else(|| vec![S::zero(); n])
}

fn acc_into<'a, S: Scalar>(slot: &'a mut Option<Vec<S>>, n: usize) -> &'a mut Vec<S> {
    slot.get_or_insert_with(|| vec![S::zero(); n])
}

fn backward_op<S: Scalar>(nodes: &[Node<S>], id: NodeId, g: &[S], grads: &mut [Option<Vec<S>>]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &p in &[*a, *b] {
                if nodes[p].requires_grad {
                    let acc = acc_into(&mut grads[p], g.len());
                    for (x, y) in acc.iter_mut().zip(g) {
                        *x += *y;
                    }
                }
            }
        }
        Op::AddBias(x, b) => {
            if nodes[*x].requires_grad {
                let acc = acc_into(&mut grads[*x], g.len());
                for (a, y) in acc.iter_mut().zip(g) {
                    *a += *y;
                }
            }
            if nodes[*b].requires_grad {
                let cols = nodes[*b].value.numel();
                let acc = acc_into(&mut grads[*b], cols);
                for (i, y) in g.iter().enumerate() {
                    acc[i % cols] += *y;
                }
            }
        }
        Op::Mul(a, b) => {
            if nodes[*a].requires_grad {
                let bv = nodes[*b].value.data();
                let acc = acc_into(&mut grads[*a], g.len());
                for i in 0..g.len() {
                    acc[i] += g[i] * bv[i];
                }
            }
            if nodes[*b].requires_grad {
                let av = nodes[*a].value.data();
                let acc = acc_into(&mut grads[*b], g.len());
                for i in 0..g.len() {
                    acc[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale(x, c) => {
            if nodes[*x].requires_grad {
                let acc = acc_into(&mut grads[*x], g.len());
                for (a, y) in acc.iter_mut().zip(g) {
                    *a += *y * *c;
                }
            }
        }
        Op::Matmul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[*a].requires_grad {
                let acc = acc_into(&mut grads[*a], m * k);
                gemm_slices(m, n, k, S::one(), g, false, bv.data(), true, S::one(), acc);
            }
            if nodes[*b].requires_grad {
                let acc = acc_into(&mut grads[*b], k * n);
                gemm_slices(k, m, n, S::one(), av.data(), true, g, false, S::one(), acc);
            }
        }
        Op::Softmax { x, axis } => {
            if nodes[*x].requires_grad {
                let out = &nodes[id].value;
                let shape = out.shape();
                let axis = *axis;
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let p = out.data();
                let acc = acc_into(&mut grads[*x], g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = S::zero();
                        for j in 0..len {
                            let ix = base + j * inner;
                            dot += g[ix] * p[ix];
                        }
                        for j in 0..len {
                            let ix = base + j * inner;
                            acc[ix] += p[ix] * (g[ix] - dot);
                        }
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, pad, reduction, n_counted } => {
            if nodes[*logits].requires_grad && *n_counted > 0 {
                let x = &nodes[*logits].value;
                let v = x.shape()[1];
                let w = match reduction {
                    Reduction::TokenMean => g[0] / S::from_f64(*n_counted as f64),
                    Reduction::Sum => g[0],
                };
                let acc = acc_into(&mut grads[*logits], x.numel());
                for (r, &tgt) in targets.iter().enumerate() {
                    if Some(tgt) == *pad {
                        continue;
                    }
                    let row = x.row(r);
                    softmax_minus_onehot(row, Some(tgt), None, w, &mut acc[r * v..(r + 1) * v]);
                }
            }
        }
        Op::SoftCrossEntropy { logits, probs, row_mask, reduction, n_counted } => {
            if nodes[*logits].requires_grad && *n_counted > 0 {
                let x = &nodes[*logits].value;
                let v = x.shape()[1];
                let w = match reduction {
                    Reduction::TokenMean => g[0] / S::from_f64(*n_counted as f64),
                    Reduction::Sum => g[0],
                };
                let acc = acc_into(&mut grads[*logits], x.numel());
                for r in 0..x.shape()[0] {
                    if let Some(m) = row_mask {
                        if !m[r] {
                            continue;
                        }
                    }
                    let row = x.row(r);
                    softmax_minus_onehot(
                        row,
                        None,
                        Some(probs.row(r)),
                        w,
                        &mut acc[r * v..(r + 1) * v],
                    );
                }
            }
        }
        Op::GatherRows { src, idx } => {
            if nodes[*src].requires_grad {
                let cols = nodes[*src].value.cols();
                let n = nodes[*src].value.numel();
                let acc = acc_into(&mut grads[*src], n);
                for (out_row, &src_row) in idx.iter().enumerate() {
                    let grow = &g[out_row * cols..(out_row + 1) * cols];
                    let arow = &mut acc[src_row * cols..(src_row + 1) * cols];
                    for c in 0..cols {
                        arow[c] += grow[c];
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let xv = &nodes[*x].value;
            let gv = &nodes[*gain].value;
            let d = *xv.shape().last().unwrap();
            let need_x = nodes[*x].requires_grad;
            let need_g = nodes[*gain].requires_grad;
            let need_b = nodes[*bias].requires_grad;
            let mut gx = if need_x { Some(take_or_zeros(&mut grads[*x], xv.numel())) } else { None };
            let mut gg = if need_g { Some(take_or_zeros(&mut grads[*gain], d)) } else { None };
            let mut gb = if need_b { Some(take_or_zeros(&mut grads[*bias], d)) } else { None };
            let dim = S::from_f64(d as f64);
            for (r, row) in xv.data().chunks(d).enumerate() {
                let (mean, rstd) = row_moments(row, *eps);
                let grow = &g[r * d..(r + 1) * d];
                let mut sum_dxhat = S::zero();
                let mut sum_dxhat_xhat = S::zero();
                for j in 0..d {
                    let xhat = (row[j] - mean) * rstd;
                    let dxhat = grow[j] * gv.data()[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    if let Some(gg) = &mut gg {
                        gg[j] += grow[j] * xhat;
                    }
                    if let Some(gb) = &mut gb {
                        gb[j] += grow[j];
                    }
                }
                if let Some(gx) = &mut gx {
                    let gxrow = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = grow[j] * gv.data()[j];
                        gxrow[j] +=
                            (dxhat - sum_dxhat / dim - xhat * sum_dxhat_xhat / dim) * rstd;
                    }
                }
            }
            if let Some(gx) = gx {
                grads[*x] = Some(gx);
            }
            if let Some(gg) = gg {
                grads[*gain] = Some(gg);
            }
            if let Some(gb) = gb {
                grads[*bias] = Some(gb);
            }
        }
        Op::Relu(x) => {
            if nodes[*x].requires_grad {
                let xv = nodes[*x].value.data();
                let acc = acc_into(&mut grads[*x], g.len());
                for i in 0..g.len() {
                    if xv[i] > S::zero() {
                        acc[i] += g[i];
                    }
                }
            }
        }
        Op::Transpose(x) => {
            if nodes[*x].requires_grad {
                // g is laid out as the transposed shape [c, r].
                let (r, c) = (nodes[*x].value.shape()[0], nodes[*x].value.shape()[1]);
                let acc = acc_into(&mut grads[*x], g.len());
                for i in 0..r {
                    for j in 0..c {
                        acc[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            if *axis == 0 || nodes[id].value.rank() == 1 {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.numel();
                    if nodes[p].requires_grad {
                        let acc = acc_into(&mut grads[p], n);
                        for (a, y) in acc.iter_mut().zip(&g[off..off + n]) {
                            *a += *y;
                        }
                    }
                    off += n;
                }
            } else {
                let rows = nodes[id].value.shape()[0];
                let total = nodes[id].value.cols();
                let mut col0 = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    if nodes[p].requires_grad {
                        let acc = acc_into(&mut grads[p], rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                acc[r * w + c] += g[r * total + col0 + c];
                            }
                        }
                    }
                    col0 += w;
                }
            }
        }
        Op::MaskFill { x, mask } => {
            if nodes[*x].requires_grad {
                let acc = acc_into(&mut grads[*x], g.len());
                for i in 0..g.len() {
                    if !mask[i] {
                        acc[i] += g[i];
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if nodes[*x].requires_grad {
                let n = nodes[*x].value.numel();
                let acc = acc_into(&mut grads[*x], n);
                for a in acc.iter_mut() {
                    *a += g[0];
                }
            }
        }
        Op::MeanAll(x) => {
            if nodes[*x].requires_grad {
                let n = nodes[*x].value.numel();
                let w = g[0] / S::from_f64(n as f64);
                let acc = acc_into(&mut grads[*x], n);
                for a in acc.iter_mut() {
                    *a += w;
                }
            }
        }
        Op::Attention { q, k, v, spec, probs } => {
            attention_backward(nodes, *q, *k, *v, spec, probs, g, grads);
        }
    }
}

/// `out += w * (softmax(row) - target)` where the target is a one-hot index
/// or a full distribution.
fn softmax_minus_onehot<S: Scalar>(
    row: &[S],
    onehot: Option<usize>,
    dist: Option<&[S]>,
    w: S,
    out: &mut [S],
) {
    let mut max = S::neg_infinity();
    for &x in row {
        if x > max {
            max = x;
        }
    }
    let mut z = S::zero();
    for &x in row {
        z += (x - max).exp();
    }
    for (j, &x) in row.iter().enumerate() {
        let mut p = (x - max).exp() / z;
        if let Some(t) = onehot {
            if j == t {
                p -= S::one();
            }
        }
        if let Some(q) = dist {
            p -= q[j];
        }
        out[j] += w * p;
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let mut max = S::neg_infinity();
    for &x in row {
        if x > max {
            max = x;
        }
    }
    let mut z = S::zero();
    for &x in row {
        z += (x - max).exp();
    }
    max + z.ln()
}

fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let d = S::from_f64(row.len() as f64);
    let mut mean = S::zero();
    for &x in row {
        mean += x;
    }
    mean = mean / d;
    let mut var = S::zero();
    for &x in row {
        let c = x - mean;
        var += c * c;
    }
    var = var / d;
    (mean, (var + eps).sqrt().recip())
}

fn softmax_lanes<S: Scalar>(data: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let len = if shape.is_empty() { 1 } else { shape[axis] };
    let inner: usize = shape[axis.min(shape.len())..].iter().skip(1).product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![S::zero(); data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = S::neg_infinity();
            for j in 0..len {
                let x = data[base + j * inner];
                if x > max {
                    max = x;
                }
            }
            let mut z = S::zero();
            for j in 0..len {
                let e = (data[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                z += e;
            }
            for j in 0..len {
                out[base + j * inner] /= z;
            }
        }
    }
    out
}
