//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records coarse operations (linear layers, layer norm, fused
//! multi-head attention, soft-target cross-entropy, ...) together with the
//! values they produced. [`Tape::backward`] walks the tape in reverse and
//! returns gradients for every parameter leaf that was recorded with
//! `requires_grad`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, softmax_in_place, MatMut, MatRef, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddTiled {
        x: Var,
        table: Var,
    },
    Scale(Var, T),
    ScaleRows(Var, Var),
    SumScalars(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Attention {
        qkv: Var,
        seqs: usize,
        tokens: usize,
        heads: usize,
        probs: Vec<T>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    PrependRow {
        x: Var,
        row: Var,
        per_seq: usize,
    },
    MaskRows {
        x: Var,
        embed: Var,
        mask: Vec<bool>,
    },
    L2NormRows {
        x: Var,
        norms: Vec<T>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
        inv_temp: T,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<String>,
}

/// Gradients keyed by parameter name.
pub type Gradients<T> = BTreeMap<String, Vec<T>>;

const LN_EPS: f64 = 1e-6;
const L2_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(t: &Tensor<impl Scalar>) -> (usize, usize) {
    (t.rows(), t.cols())
}

// 0.5 * (1 + tanh(u)) is the logistic function at 2u, which costs one exp.
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let two = T::of(2.0);
    let inner = c * (x + a * x * x * x);
    let s = T::one() / (T::one() + (-two * inner).exp());
    let y = x * s;
    let dy = s + two * x * s * (T::one() - s) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, &[])
    }

    /// Records a named parameter; it is differentiated iff `t.requires_grad`.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        let value = Tensor::raw(t.shape().to_vec(), t.data().to_vec());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: t.requires_grad,
            param: Some(name.to_string()),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = dims(self.value(a));
        let (k2, c) = dims(self.value(b));
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); r * c];
        gemm(
            T::one(),
            MatRef::dense(self.value(a).data(), r, k),
            MatRef::dense(self.value(b).data(), k, c),
            T::zero(),
            MatMut::dense(&mut out, r, c),
        );
        Ok(self.push(Tensor::raw(vec![r, c], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T` with `a: [r, k]`, `b: [c, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = dims(self.value(a));
        let (c, k2) = dims(self.value(b));
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); r * c];
        gemm(
            T::one(),
            MatRef::dense(self.value(a).data(), r, k),
            MatRef::dense(self.value(b).data(), c, k).t(),
            T::zero(),
            MatMut::dense(&mut out, r, c),
        );
        Ok(self.push(Tensor::raw(vec![r, c], out), Op::MatMulNt(a, b), &[a, b]))
    }

    /// `x * w + b` with `x: [n, i]`, `w: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = dims(self.value(x));
        let (i2, o) = dims(self.value(w));
        if i != i2 {
            return Err(Error::Dimension(format!(
                "linear input {:?} vs weight {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != o {
                return Err(Error::Dimension(format!(
                    "bias of length {} for {o} outputs",
                    bias.len()
                )));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            T::one(),
            MatRef::dense(self.value(x).data(), n, i),
            MatRef::dense(self.value(w).data(), i, o),
            T::one(),
            MatMut::dense(&mut out, n, o),
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            Tensor::raw(vec![n, o], out),
            Op::Linear { x, w, b },
            &parents,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = va.shape().to_vec();
        Ok(self.push(Tensor::raw(shape, data), Op::Add(a, b), &[a, b]))
    }

    /// Adds `table` (`[p, d]`) to every consecutive block of `p` rows of `x`.
    pub fn add_tiled(&mut self, x: Var, table: Var) -> Result<Var> {
        let (r, d) = dims(self.value(x));
        let (p, d2) = dims(self.value(table));
        if d != d2 || p == 0 || r % p != 0 {
            return Err(Error::Dimension(format!(
                "cannot tile {:?} over {:?}",
                self.value(table).shape(),
                self.value(x).shape()
            )));
        }
        let tab = self.value(table).data();
        let mut out = self.value(x).data().to_vec();
        for (i, row) in out.chunks_mut(d).enumerate() {
            let t = &tab[(i % p) * d..(i % p + 1) * d];
            row.iter_mut().zip(t).for_each(|(o, &v)| *o += v);
        }
        Ok(self.push(
            Tensor::raw(vec![r, d], out),
            Op::AddTiled { x, table },
            &[x, table],
        ))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * s).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::raw(shape, data), Op::Scale(x, s), &[x])
    }

    /// Row `i` of `x: [r, c]` times `s[i]`, with `s: [r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        let sv = self.value(s);
        if sv.data().len() != r {
            return Err(Error::Dimension(format!(
                "scale_rows of {:?} by {:?}",
                self.value(x).shape(),
                sv.shape()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        for (row, &f) in data.chunks_mut(c).zip(sv.data()) {
            row.iter_mut().for_each(|e| *e *= f);
        }
        Ok(self.push(Tensor::raw(vec![r, c], data), Op::ScaleRows(x, s), &[x, s]))
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut total = T::zero();
        for &x in xs {
            let v = self.value(x);
            if !v.is_scalar() {
                return Err(Error::Contract(format!(
                    "sum_scalars operand has shape {:?}",
                    v.shape()
                )));
            }
            total += v.data()[0];
        }
        Ok(self.push(Tensor::scalar(total), Op::SumScalars(xs.to_vec()), xs))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, d) = dims(self.value(x));
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::Dimension(format!("layer norm over width {d}")));
        }
        let eps = T::of(LN_EPS);
        let inv_d = T::of(1.0 / d as f64);
        let mut xhat = vec![T::zero(); r * d];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * d];
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for (i, row) in self.value(x).data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = (var + eps).sqrt().recip();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::raw(vec![r, d], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU (tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| gelu(e).0).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::raw(shape, data), Op::Gelu(x), &[x])
    }

    /// Fused multi-head self-attention core.
    ///
    /// `qkv` holds `seqs * tokens` rows of `[q | k | v]`, each of width `d`,
    /// head `h` owning columns `h*d/heads..(h+1)*d/heads` of each block.
    /// Returns the concatenated head outputs (`[seqs * tokens, d]`); the
    /// post-softmax attention matrices are kept and exposed through
    /// [`Tape::attention_probs`].
    pub fn attention(&mut self, qkv: Var, seqs: usize, tokens: usize, heads: usize) -> Result<Var> {
        let (r, w) = dims(self.value(qkv));
        if r != seqs * tokens || w % 3 != 0 || heads == 0 || (w / 3) % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention over {:?} with {seqs} sequences of {tokens} tokens and {heads} heads",
                self.value(qkv).shape()
            )));
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let src = self.value(qkv).data();
        let mut probs = vec![T::zero(); seqs * heads * tokens * tokens];
        let mut out = vec![T::zero(); r * d];
        let tt = tokens * tokens;
        for s in 0..seqs {
            for h in 0..heads {
                let base = s * tokens * w + h * dh;
                let q = MatRef {
                    data: src,
                    offset: base,
                    rows: tokens,
                    cols: dh,
                    rs: w,
                    cs: 1,
                };
                let k = MatRef {
                    offset: base + d,
                    ..q
                };
                let v = MatRef {
                    offset: base + 2 * d,
                    ..q
                };
                let p = &mut probs[(s * heads + h) * tt..(s * heads + h + 1) * tt];
                gemm(scale, q, k.t(), T::zero(), MatMut::dense(p, tokens, tokens));
                for row in p.chunks_mut(tokens) {
                    softmax_in_place(row, T::one());
                }
                gemm(
                    T::one(),
                    MatRef::dense(p, tokens, tokens),
                    v,
                    T::zero(),
                    MatMut {
                        data: &mut out,
                        offset: s * tokens * d + h * dh,
                        rows: tokens,
                        cols: dh,
                        rs: d,
                        cs: 1,
                    },
                );
            }
        }
        Ok(self.push(
            Tensor::raw(vec![r, d], out),
            Op::Attention {
                qkv,
                seqs,
                tokens,
                heads,
                probs,
            },
            &[qkv],
        ))
    }

    /// Attention matrices stored by an [`Tape::attention`] node, laid out as
    /// `[seqs][heads][tokens][tokens]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, d) = dims(self.value(x));
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension(format!("row {bad} out of {r}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::raw(vec![idx.len(), d], out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let d = xs
            .first()
            .map(|&x| self.value(x).cols())
            .ok_or_else(|| Error::Contract("concat of zero operands".into()))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let v = self.value(x);
            if v.cols() != d {
                return Err(Error::Dimension(format!(
                    "concat width {} vs {d}",
                    v.cols()
                )));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        Ok(self.push(
            Tensor::raw(vec![rows, d], out),
            Op::ConcatRows(xs.to_vec()),
            xs,
        ))
    }

    /// Inserts `row` (`[1, d]`) before every block of `per_seq` rows of `x`.
    pub fn prepend_row(&mut self, x: Var, row: Var, per_seq: usize) -> Result<Var> {
        let (r, d) = dims(self.value(x));
        if self.value(row).numel() != d || per_seq == 0 || r % per_seq != 0 {
            return Err(Error::Dimension(format!(
                "prepend {:?} to blocks of {per_seq} rows of {:?}",
                self.value(row).shape(),
                self.value(x).shape()
            )));
        }
        let seqs = r / per_seq;
        let head = self.value(row).data();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity((r + seqs) * d);
        for block in src.chunks(per_seq * d) {
            out.extend_from_slice(head);
            out.extend_from_slice(block);
        }
        Ok(self.push(
            Tensor::raw(vec![r + seqs, d], out),
            Op::PrependRow { x, row, per_seq },
            &[x, row],
        ))
    }

    /// Replaces the rows of `x` flagged in `mask` by `embed`.
    pub fn mask_rows(&mut self, x: Var, embed: Var, mask: &[bool]) -> Result<Var> {
        let (r, d) = dims(self.value(x));
        if mask.len() != r || self.value(embed).numel() != d {
            return Err(Error::Dimension(format!(
                "mask of length {} over {:?}",
                mask.len(),
                self.value(x).shape()
            )));
        }
        let e = self.value(embed).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &m) in out.chunks_mut(d).zip(mask) {
            if m {
                row.copy_from_slice(e);
            }
        }
        Ok(self.push(
            Tensor::raw(vec![r, d], out),
            Op::MaskRows {
                x,
                embed,
                mask: mask.to_vec(),
            },
            &[x, embed],
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (r, d) = dims(self.value(x));
        let mut out = self.value(x).data().to_vec();
        let mut norms = vec![T::zero(); r];
        for (i, row) in out.chunks_mut(d).enumerate() {
            let n = (row.iter().map(|&v| v * v).sum::<T>() + T::of(L2_EPS)).sqrt();
            norms[i] = n;
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.push(
            Tensor::raw(vec![r, d], out),
            Op::L2NormRows { x, norms },
            &[x],
        )
    }

    /// `sum_r weights[r] * H(targets[r], softmax(logits[r] / temperature))`,
    /// the soft-target cross-entropy. Targets are constants.
    pub fn soft_cross_entropy(
        &mut self,
        logits: Var,
        targets: &Tensor<T>,
        weights: &[T],
        temperature: f64,
    ) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let (r, k) = dims(self.value(logits));
        if targets.numel() != r * k || weights.len() != r {
            return Err(Error::Dimension(format!(
                "cross-entropy logits {:?}, targets {:?}, {} weights",
                self.value(logits).shape(),
                targets.shape(),
                weights.len()
            )));
        }
        let inv_temp = T::of(1.0 / temperature);
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (i, row) in probs.chunks_mut(k).enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row
                .iter()
                .map(|&x| ((x - max) * inv_temp).exp())
                .sum::<T>()
                .ln();
            let t = &targets.data()[i * k..(i + 1) * k];
            let mut ce = T::zero();
            for (x, &tj) in row.iter().zip(t) {
                let logp = (*x - max) * inv_temp - lse;
                ce -= tj * logp;
            }
            total += (weights[i] * ce).as_f64();
            softmax_in_place(row, inv_temp);
        }
        Ok(self.push(
            Tensor::scalar(T::of(total)),
            Op::SoftCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                weights: weights.to_vec(),
                inv_temp,
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// differentiable parameter leaf, zero-filled when the graph does not
    /// reach it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let mut out = Gradients::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), true) = (&node.param, node.needs_grad) {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                match out.get_mut(name) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        macro_rules! grad_of {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.nodes[v.0].value.numel();
                grads[v.0]
                    .get_or_insert_with(|| vec![T::zero(); len])
                    .as_mut_slice()
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = dims(self.value(*a));
                let c = self.value(*b).cols();
                let gm = MatRef::dense(g, r, c);
                if needs(a) {
                    let ga = grad_of!(*a);
                    let bm = MatRef::dense(self.value(*b).data(), k, c);
                    gemm(T::one(), gm, bm.t(), T::one(), MatMut::dense(ga, r, k));
                }
                if needs(b) {
                    let gb = grad_of!(*b);
                    let am = MatRef::dense(self.value(*a).data(), r, k);
                    gemm(T::one(), am.t(), gm, T::one(), MatMut::dense(gb, k, c));
                }
            }
            Op::MatMulNt(a, b) => {
                let (r, k) = dims(self.value(*a));
                let c = self.value(*b).rows();
                let gm = MatRef::dense(g, r, c);
                if needs(a) {
                    let ga = grad_of!(*a);
                    let bm = MatRef::dense(self.value(*b).data(), c, k);
                    gemm(T::one(), gm, bm, T::one(), MatMut::dense(ga, r, k));
                }
                if needs(b) {
                    let gb = grad_of!(*b);
                    let am = MatRef::dense(self.value(*a).data(), r, k);
                    gemm(T::one(), gm.t(), am, T::one(), MatMut::dense(gb, c, k));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = dims(self.value(*x));
                let o = self.value(*w).cols();
                let gm = MatRef::dense(g, n, o);
                if needs(x) {
                    let gx = grad_of!(*x);
                    let wm = MatRef::dense(self.value(*w).data(), i, o);
                    gemm(T::one(), gm, wm.t(), T::one(), MatMut::dense(gx, n, i));
                }
                if needs(w) {
                    let gw = grad_of!(*w);
                    let xm = MatRef::dense(self.value(*x).data(), n, i);
                    gemm(T::one(), xm.t(), gm, T::one(), MatMut::dense(gw, i, o));
                }
                if let Some(b) = b.filter(|b| needs(b)) {
                    let gb = grad_of!(b);
                    for row in g.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if needs(p) {
                        let gp = grad_of!(*p);
                        gp.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
                    }
                }
            }
            Op::AddTiled { x, table } => {
                if needs(x) {
                    let gx = grad_of!(*x);
                    gx.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
                }
                if needs(table) {
                    let p = self.value(*table).rows();
                    let d = self.value(*table).cols();
                    let gt = grad_of!(*table);
                    for (i, row) in g.chunks(d).enumerate() {
                        let t = &mut gt[(i % p) * d..(i % p + 1) * d];
                        t.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                }
            }
            Op::Scale(x, s) => {
                if needs(x) {
                    let gx = grad_of!(*x);
                    gx.iter_mut().zip(g).for_each(|(a, &v)| *a += v * *s);
                }
            }
            Op::ScaleRows(x, s) => {
                let c = self.value(*x).cols();
                if needs(x) {
                    let sv = self.value(*s).data();
                    let gx = grad_of!(*x);
                    for ((row, gr), &f) in gx.chunks_mut(c).zip(g.chunks(c)).zip(sv) {
                        row.iter_mut().zip(gr).for_each(|(a, &v)| *a += v * f);
                    }
                }
                if needs(s) {
                    let xv = self.value(*x).data();
                    let gs = grad_of!(*s);
                    for ((a, xr), gr) in gs.iter_mut().zip(xv.chunks(c)).zip(g.chunks(c)) {
                        *a += xr
                            .iter()
                            .zip(gr)
                            .fold(T::zero(), |acc, (&u, &v)| acc + u * v);
                    }
                }
            }
            Op::SumScalars(xs) => {
                for x in xs {
                    if needs(x) {
                        grad_of!(*x)[0] += g[0];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*x).cols();
                let gv = self.value(*gain).data();
                if needs(gain) {
                    let gg = grad_of!(*gain);
                    for (row, h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row[j] * h[j];
                        }
                    }
                }
                if needs(bias) {
                    let gb = grad_of!(*bias);
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                }
                if needs(x) {
                    let gx = grad_of!(*x);
                    let inv_d = T::of(1.0 / d as f64);
                    let mut dh = vec![T::zero(); d];
                    for (i, (row, h)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            dh[j] = row[j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * h[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        let out = &mut gx[i * d..(i + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[i] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if needs(x) {
                    let xv = self.value(*x).data();
                    let gx = grad_of!(*x);
                    for ((a, &v), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *a += v * gelu(xi).1;
                    }
                }
            }
            Op::Attention {
                qkv,
                seqs,
                tokens,
                heads,
                probs,
            } => {
                if !needs(qkv) {
                    return;
                }
                let (seqs, tokens, heads) = (*seqs, *tokens, *heads);
                let w = self.value(*qkv).cols();
                let d = w / 3;
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let src = self.value(*qkv).data();
                let gq = grad_of!(*qkv);
                let tt = tokens * tokens;
                let mut dp = vec![T::zero(); tt];
                for s in 0..seqs {
                    for h in 0..heads {
                        let base = s * tokens * w + h * dh;
                        let view = |offset| MatRef {
                            data: src,
                            offset,
                            rows: tokens,
                            cols: dh,
                            rs: w,
                            cs: 1,
                        };
                        let (q, k, v) = (view(base), view(base + d), view(base + 2 * d));
                        let p = &probs[(s * heads + h) * tt..(s * heads + h + 1) * tt];
                        let go = MatRef {
                            data: g,
                            offset: s * tokens * d + h * dh,
                            rows: tokens,
                            cols: dh,
                            rs: d,
                            cs: 1,
                        };
                        let pm = MatRef::dense(p, tokens, tokens);
                        // dV = P^T dO
                        gemm(
                            T::one(),
                            pm.t(),
                            go,
                            T::one(),
                            MatMut {
                                data: gq,
                                offset: base + 2 * d,
                                rows: tokens,
                                cols: dh,
                                rs: w,
                                cs: 1,
                            },
                        );
                        // dP = dO V^T, then softmax backward in place
                        gemm(
                            T::one(),
                            go,
                            v.t(),
                            T::zero(),
                            MatMut::dense(&mut dp, tokens, tokens),
                        );
                        for (drow, prow) in dp.chunks_mut(tokens).zip(p.chunks(tokens)) {
                            let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                            for (dv, &pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - dot);
                            }
                        }
                        let ds = MatRef::dense(&dp, tokens, tokens);
                        // dQ = scale * dS K ; dK = scale * dS^T Q
                        gemm(
                            scale,
                            ds,
                            k,
                            T::one(),
                            MatMut {
                                data: gq,
                                offset: base,
                                rows: tokens,
                                cols: dh,
                                rs: w,
                                cs: 1,
                            },
                        );
                        gemm(
                            scale,
                            ds.t(),
                            q,
                            T::one(),
                            MatMut {
                                data: gq,
                                offset: base + d,
                                rows: tokens,
                                cols: dh,
                                rs: w,
                                cs: 1,
                            },
                        );
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if needs(x) {
                    let d = self.value(*x).cols();
                    let gx = grad_of!(*x);
                    for (row, &i) in g.chunks(d).zip(idx) {
                        let t = &mut gx[i * d..(i + 1) * d];
                        t.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let n = self.value(*x).numel();
                    if needs(x) {
                        let gx = grad_of!(*x);
                        gx.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(a, &v)| *a += v);
                    }
                    offset += n;
                }
            }
            Op::PrependRow { x, row, per_seq } => {
                let d = self.value(*x).cols();
                let block = (per_seq + 1) * d;
                if needs(row) {
                    let gr = grad_of!(*row);
                    for chunk in g.chunks(block) {
                        gr.iter_mut().zip(&chunk[..d]).for_each(|(a, &v)| *a += v);
                    }
                }
                if needs(x) {
                    let gx = grad_of!(*x);
                    for (dst, chunk) in gx.chunks_mut(per_seq * d).zip(g.chunks(block)) {
                        dst.iter_mut().zip(&chunk[d..]).for_each(|(a, &v)| *a += v);
                    }
                }
            }
            Op::MaskRows { x, embed, mask } => {
                let d = self.value(*x).cols();
                if needs(embed) {
                    let ge = grad_of!(*embed);
                    for (row, _) in g.chunks(d).zip(mask).filter(|(_, &m)| m) {
                        ge.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                }
                if needs(x) {
                    let gx = grad_of!(*x);
                    for ((dst, row), &m) in gx.chunks_mut(d).zip(g.chunks(d)).zip(mask) {
                        if !m {
                            dst.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                    }
                }
            }
            Op::L2NormRows { x, norms } => {
                if needs(x) {
                    let d = self.value(*x).cols();
                    let y = node.value.data();
                    let gx = grad_of!(*x);
                    for (i, (row, yr)) in g.chunks(d).zip(y.chunks(d)).enumerate() {
                        let dot: T = row.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        let dst = &mut gx[i * d..(i + 1) * d];
                        for j in 0..d {
                            dst[j] += (row[j] - yr[j] * dot) / norms[i];
                        }
                    }
                }
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                weights,
                inv_temp,
                probs,
            } => {
                if needs(logits) {
                    let k = self.value(*logits).cols();
                    let gl = grad_of!(*logits);
                    for (i, (p, t)) in probs.chunks(k).zip(targets.chunks(k)).enumerate() {
                        let tsum: T = t.iter().copied().sum();
                        let coef = g[0] * weights[i] * *inv_temp;
                        let dst = &mut gl[i * k..(i + 1) * k];
                        for j in 0..k {
                            dst[j] += coef * (p[j] * tsum - t[j]);
                        }
                    }
                }
            }
        }
    }
}

/// Computes the gradient of `loss` and stores it in the `grad` field of each
/// named parameter; parameters the graph never reached get zeros.
pub fn reverse_mode_gradient<T: Scalar>(
    tape: &Tape<T>,
    loss: Var,
    params: &mut BTreeMap<String, Tensor<T>>,
) -> Result<()> {
    let mut grads = tape.backward(loss)?;
    for (name, p) in params.iter_mut() {
        if !p.requires_grad {
            continue;
        }
        p.grad = Some(
            grads
                .remove(name)
                .unwrap_or_else(|| vec![T::zero(); p.numel()]),
        );
    }
    Ok(())
}
