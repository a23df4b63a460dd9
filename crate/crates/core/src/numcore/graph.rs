//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order, so the node list is a topological order by construction and
//! [`Graph::backward`] is a single reverse sweep. Parameters are borrowed
//! from a [`ParamStore`] rather than copied into the tape.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, gelu, gelu_grad, sigmoid};
use super::{AttnMask, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

enum Op<S> {
    Param(ParamId),
    Input,
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    Affine(Var, S),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Clamp01(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    AddRowsAt {
        base: Var,
        upd: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Var, Var),
    MulCol(Var, Var),
    Outer(Var, Var),
    MaskedSoftmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<S>,
    },
    Dropout {
        x: Var,
        keep: Vec<S>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    KlToTarget {
        logits: Var,
        target: Vec<S>,
        probs: Vec<S>,
    },
    Mse {
        pred: Var,
        target: Vec<S>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<S> {
    value: Option<Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    params: Vec<Option<Tensor<S>>>,
    leaves: HashMap<Var, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Sum of squares over all parameter gradients.
    pub fn sq_norm(&self) -> f64 {
        self.params()
            .flat_map(|(_, g)| g.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum()
    }
}

pub struct Graph<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_grads: bool,
}

impl<'p, S: Scalar> Graph<'p, S> {
    /// A graph whose parameter leaves receive gradients.
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_grads: true,
        }
    }

    /// A graph that treats every parameter as a constant. Used wherever a
    /// model must stay frozen (probes, gate training, evaluation).
    pub fn frozen(params: &'p ParamStore<S>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_grads: false,
        }
    }

    pub fn store(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        let node = &self.nodes[v.0];
        match &node.op {
            Op::Param(id) => self.params.get(*id),
            _ => node.value.as_ref().expect("non-parameter node has a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.param_grads,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Differentiable input whose gradient is reported by [`Gradients::leaf`].
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn check2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape(format!("{what}: expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.check2(a, "matmul lhs")?;
        let (k2, n) = self.check2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.check2(x, "add_bias")?;
        if self.value(bias).len() != n {
            return Err(Error::Shape(format!(
                "bias of {} values for {n} columns",
                self.value(bias).len()
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for r in 0..m {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    /// `x * w + b` for a weight `[in, out]` and bias `[out]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = self.param(w);
        let bv = self.param(b);
        let y = self.matmul(x, wv)?;
        self.add_bias(y, bv)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<S>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::Shape(format!(
                "add_const: {:?} vs {:?}",
                self.shape(x),
                c.shape()
            )));
        }
        let mut out = self.value(x).clone();
        out.add_assign(c);
        let ng = self.ng(x);
        Ok(self.push(out, Op::AddConst(x), ng))
    }

    /// `a * x + b` with constant scalars.
    pub fn affine(&mut self, x: Var, a: S, b: S) -> Var {
        let vx = self.value(x);
        let out = Tensor::from_fn(vx.shape(), |i| a * vx.data()[i] + b);
        let ng = self.ng(x);
        self.push(out, Op::Affine(x, a), ng)
    }

    pub fn scale(&mut self, x: Var, a: S) -> Var {
        self.affine(x, a, S::zero())
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let vx = self.value(x);
        let out = Tensor::from_fn(vx.shape(), |i| f(vx.data()[i]));
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, S::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Hard rectification to `[0, 1]`; gradient passes only strictly inside.
    pub fn clamp01(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(S::zero()).min(S::one()), Op::Clamp01(x))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
        let (m, n) = self.check2(x, "layer_norm")?;
        let gv = self.param(gain);
        let bv = self.param(bias);
        if self.value(gv).len() != n || self.value(bv).len() != n {
            return Err(Error::Shape("layer_norm gain/bias width".into()));
        }
        let eps = S::of(1e-5);
        let nf = S::of(n as f64);
        let vx = self.value(x);
        let g = self.value(gv).data();
        let b = self.value(bv).data();
        let mut xhat = vec![S::zero(); m * n];
        let mut rstd = vec![S::zero(); m];
        let mut out = vec![S::zero(); m * n];
        for r in 0..m {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<S>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let ng = self.ng(x) || self.ng(gv) || self.ng(bv);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain: gv,
                bias: bv,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Rows of an embedding table.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let tv = self.param(table);
        let t = self.value(tv);
        let (v, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Shape(format!("row {id} out of table with {v} rows")));
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.ng(tv);
        Ok(self.push(
            out,
            Op::Gather {
                table: tv,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.check2(x, "select_rows")?;
        let vx = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Shape(format!("row {r} out of {m}")));
            }
            out.extend_from_slice(vx.row(r));
        }
        let out = Tensor::new(vec![rows.len(), n], out)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// `base` with `upd[i]` added to row `rows[i]`.
    pub fn add_rows_at(&mut self, base: Var, upd: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.check2(base, "add_rows_at base")?;
        let (u, n2) = self.check2(upd, "add_rows_at update")?;
        if n != n2 || u != rows.len() {
            return Err(Error::Shape(format!(
                "add_rows_at: base [{m},{n}], update [{u},{n2}], {} rows",
                rows.len()
            )));
        }
        let mut out = self.value(base).clone();
        let vu = self.value(upd);
        for (i, &r) in rows.iter().enumerate() {
            if r >= m {
                return Err(Error::Shape(format!("row {r} out of {m}")));
            }
            for (o, &d) in out.row_mut(r).iter_mut().zip(vu.row(i)) {
                *o += d;
            }
        }
        let ng = self.ng(base) || self.ng(upd);
        Ok(self.push(
            out,
            Op::AddRowsAt {
                base,
                upd,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n1) = self.check2(a, "concat lhs")?;
        let (m2, n2) = self.check2(b, "concat rhs")?;
        if m != m2 {
            return Err(Error::Shape(format!("concat rows {m} vs {m2}")));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * (n1 + n2));
        for r in 0..m {
            out.extend_from_slice(va.row(r));
            out.extend_from_slice(vb.row(r));
        }
        let out = Tensor::new(vec![m, n1 + n2], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::ConcatCols(a, b), ng))
    }

    /// Scales each row of `x[m,n]` by the matching entry of `col[m,1]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = self.check2(x, "mul_col")?;
        if self.value(col).len() != m {
            return Err(Error::Shape("mul_col column length".into()));
        }
        let mut out = self.value(x).clone();
        let c = self.value(col).data();
        for r in 0..m {
            for o in out.row_mut(r) {
                *o *= c[r];
            }
        }
        let _ = n;
        let ng = self.ng(x) || self.ng(col);
        Ok(self.push(out, Op::MulCol(x, col), ng))
    }

    /// Outer product of a column `[m,1]` with a row vector of `n` values.
    pub fn outer(&mut self, col: Var, row: Var) -> Result<Var> {
        let c = self.value(col).data();
        let r = self.value(row).data();
        let (m, n) = (c.len(), r.len());
        let mut out = Vec::with_capacity(m * n);
        for &cv in c {
            out.extend(r.iter().map(|&rv| cv * rv));
        }
        let out = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(col) || self.ng(row);
        Ok(self.push(out, Op::Outer(col, row), ng))
    }

    /// Row-wise softmax of `x + mask`; masked entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let (m, n) = self.check2(x, "masked_softmax")?;
        let out = masked_softmax_impl(self.value(x), mask, m, n)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaskedSoftmax(x), ng))
    }

    /// Multi-head scaled dot-product attention over `q, k, v: [T, d]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&Arc<AttnMask>>,
    ) -> Result<Var> {
        let (t, d) = self.check2(q, "attention q")?;
        if self.shape(k) != [t, d] || self.shape(v) != [t, d] {
            return Err(Error::Shape("attention q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("{d} not divisible into {heads} heads")));
        }
        if let Some(mk) = mask {
            if mk.size() != t {
                return Err(Error::Shape(format!(
                    "mask of size {} for sequence of {t}",
                    mk.size()
                )));
            }
        }
        let dh = d / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![S::zero(); t * d];
        let mut probs = vec![S::zero(); heads * t * t];
        let visible = mask.filter(|m| !m.is_full()).map(|m| m.pattern());
        let mut scores = vec![S::zero(); t * t];
        let mut oh = vec![S::zero(); t * dh];
        for h in 0..heads {
            let qh = head_slice(vq.data(), t, d, h, dh);
            let kh = head_slice(vk.data(), t, d, h, dh);
            let vh = head_slice(vv.data(), t, d, h, dh);
            scores.iter_mut().for_each(|s| *s = S::zero());
            kernels::matmul_bt_acc(&qh, &kh, &mut scores, t, dh, t);
            for s in scores.iter_mut() {
                *s *= scale;
            }
            let ph = &mut probs[h * t * t..(h + 1) * t * t];
            kernels::masked_softmax_rows(&scores, visible, ph, t, t)
                .map_err(|row| Error::FullyMaskedRow { row })?;
            oh.iter_mut().for_each(|s| *s = S::zero());
            kernels::matmul_acc(ph, &vh, &mut oh, t, t, dh);
            for r in 0..t {
                out[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&oh[r * dh..(r + 1) * dh]);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let out = Tensor::new(vec![t, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Inverted dropout. A rate of zero returns `x` unchanged.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep_scale = S::of(1.0 / (1.0 - rate));
        let vx = self.value(x);
        let keep: Vec<S> = (0..vx.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    S::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let out = Tensor::from_fn(vx.shape(), |i| vx.data()[i] * keep[i]);
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, keep }, ng)
    }

    /// Mean cross-entropy of `logits[n,K]` against class indices.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.check2(logits, "softmax_xent")?;
        if targets.len() != n || n == 0 {
            return Err(Error::Shape(format!("{} targets for {n} rows", targets.len())));
        }
        let vl = self.value(logits);
        let mut probs = vec![S::zero(); n * k];
        let mut loss = S::zero();
        let mut lp = vec![S::zero(); k];
        for r in 0..n {
            if targets[r] >= k {
                return Err(Error::Shape(format!("target {} for {k} classes", targets[r])));
            }
            kernels::log_softmax_row(vl.row(r), &mut lp);
            loss -= lp[targets[r]];
            for c in 0..k {
                probs[r * k + c] = lp[c].exp();
            }
        }
        loss /= S::of(n as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean over rows of `KL(target || softmax(logits))`.
    pub fn kl_to_target(&mut self, logits: Var, target: &Tensor<S>) -> Result<Var> {
        let (n, k) = self.check2(logits, "kl_to_target")?;
        if target.shape() != [n, k] {
            return Err(Error::Shape("kl target shape".into()));
        }
        let vl = self.value(logits);
        let mut probs = vec![S::zero(); n * k];
        let mut lp = vec![S::zero(); k];
        let mut loss = S::zero();
        for r in 0..n {
            kernels::log_softmax_row(vl.row(r), &mut lp);
            for c in 0..k {
                let t = target.data()[r * k + c];
                if t > S::zero() {
                    loss += t * (t.ln() - lp[c]);
                }
                probs[r * k + c] = lp[c].exp();
            }
        }
        loss /= S::of(n as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlToTarget {
                logits,
                target: target.data().to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean squared error against constant targets.
    pub fn mse(&mut self, pred: Var, target: &[S]) -> Result<Var> {
        let vp = self.value(pred);
        if vp.len() != target.len() || target.is_empty() {
            return Err(Error::Shape(format!(
                "mse: {} predictions, {} targets",
                vp.len(),
                target.len()
            )));
        }
        let n = S::of(target.len() as f64);
        let loss = vp
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<S>()
            / n;
        let ng = self.ng(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<S>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<S>() / S::of(v.len() as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Sum of several scalar nodes, left to right.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut it = xs.iter();
        let mut acc = *it
            .next()
            .ok_or_else(|| Error::Shape("add_all of nothing".into()))?;
        for &x in it {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));
        let mut out = Gradients {
            params: vec![None; self.params.len()],
            leaves: HashMap::new(),
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(i, &node.op, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor<S>>], v: Var) -> Option<&'a mut Tensor<S>> {
        if !self.ng(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut()
    }

    fn backprop(
        &self,
        i: usize,
        op: &Op<S>,
        g: Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        out: &mut Gradients<S>,
    ) -> Result<()> {
        let y = Var(i);
        match op {
            Op::Param(id) => match &mut out.params[id.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            },
            Op::Leaf => {
                out.leaves
                    .entry(y)
                    .and_modify(|acc| acc.add_assign(&g))
                    .or_insert(g);
            }
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    kernels::matmul_bt_acc(g.data(), vb, ga.data_mut(), m, n, k);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    kernels::matmul_at_acc(va, g.data(), gb.data_mut(), m, k, n);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.add_assign(&g);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    let n = g.cols();
                    let gbd = gb.data_mut();
                    for r in 0..g.rows() {
                        for c in 0..n {
                            gbd[c] += g.data()[r * n + c];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.add_assign(&g);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    gb.add_assign(&g);
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((o, &gv), &bv) in ga.data_mut().iter_mut().zip(g.data()).zip(vb) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for ((o, &gv), &av) in gb.data_mut().iter_mut().zip(g.data()).zip(va) {
                        *o += gv * av;
                    }
                }
            }
            Op::AddConst(x) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.add_assign(&g);
                }
            }
            Op::Affine(x, a) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (o, &gv) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += *a * gv;
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((o, &gv), &xv) in gx.data_mut().iter_mut().zip(g.data()).zip(vx) {
                        *o += gv * gelu_grad(xv);
                    }
                }
            }
            Op::Tanh(x) | Op::Sigmoid(x) => {
                let is_tanh = matches!(op, Op::Tanh(_));
                let vy = self.value(y).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((o, &gv), &yv) in gx.data_mut().iter_mut().zip(g.data()).zip(vy) {
                        let d = if is_tanh {
                            S::one() - yv * yv
                        } else {
                            yv * (S::one() - yv)
                        };
                        *o += gv * d;
                    }
                }
            }
            Op::Clamp01(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((o, &gv), &xv) in gx.data_mut().iter_mut().zip(g.data()).zip(vx) {
                        if xv > S::zero() && xv < S::one() {
                            *o += gv;
                        }
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
                let n = g.cols();
                let m = g.rows();
                let gd = g.data();
                let gainv = self.value(*gain).data();
                if let Some(gg) = self.grad_slot(grads, *gain) {
                    let ggd = gg.data_mut();
                    for r in 0..m {
                        for c in 0..n {
                            ggd[c] += gd[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    let gbd = gb.data_mut();
                    for r in 0..m {
                        for c in 0..n {
                            gbd[c] += gd[r * n + c];
                        }
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let nf = S::of(n as f64);
                    let gxd = gx.data_mut();
                    let mut dxhat = vec![S::zero(); n];
                    for r in 0..m {
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for c in 0..n {
                            let d = gd[r * n + c] * gainv[c];
                            dxhat[c] = d;
                            mean_d += d;
                            mean_dx += d * xhat[r * n + c];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        for c in 0..n {
                            gxd[r * n + c] +=
                                rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &gv) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (r, &src) in rows.iter().enumerate() {
                        for (o, &gv) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::AddRowsAt { base, upd, rows } => {
                if let Some(gb) = self.grad_slot(grads, *base) {
                    gb.add_assign(&g);
                }
                if let Some(gu) = self.grad_slot(grads, *upd) {
                    for (r, &dst) in rows.iter().enumerate() {
                        for (o, &gv) in gu.row_mut(r).iter_mut().zip(g.row(dst)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let n1 = self.shape(*a)[1];
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for r in 0..g.rows() {
                        for (o, &gv) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..n1]) {
                            *o += gv;
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for r in 0..g.rows() {
                        for (o, &gv) in gb.row_mut(r).iter_mut().zip(&g.row(r)[n1..]) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::MulCol(x, col) => {
                let vx = self.value(*x);
                let vc = self.value(*col).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for r in 0..g.rows() {
                        for (o, &gv) in gx.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o += gv * vc[r];
                        }
                    }
                }
                if let Some(gc) = self.grad_slot(grads, *col) {
                    let gcd = gc.data_mut();
                    for r in 0..g.rows() {
                        gcd[r] += g.row(r).iter().zip(vx.row(r)).map(|(&a, &b)| a * b).sum::<S>();
                    }
                }
            }
            Op::Outer(col, row) => {
                let vc = self.value(*col).data();
                let vr = self.value(*row).data();
                let n = vr.len();
                if let Some(gc) = self.grad_slot(grads, *col) {
                    let gcd = gc.data_mut();
                    for (r, o) in gcd.iter_mut().enumerate() {
                        *o += g.data()[r * n..(r + 1) * n]
                            .iter()
                            .zip(vr)
                            .map(|(&a, &b)| a * b)
                            .sum::<S>();
                    }
                }
                if let Some(gr) = self.grad_slot(grads, *row) {
                    let grd = gr.data_mut();
                    for (r, &cv) in vc.iter().enumerate() {
                        for (o, &gv) in grd.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *o += gv * cv;
                        }
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let vy = self.value(y);
                let (m, n) = (vy.rows(), vy.cols());
                if let Some(gx) = self.grad_slot(grads, *x) {
                    kernels::softmax_rows_backward(vy.data(), g.data(), gx.data_mut(), m, n);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (t, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let heads = *heads;
                let dh = d / heads;
                let scale = S::one() / S::of(dh as f64).sqrt();
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![S::zero(); t * d];
                let mut dk = vec![S::zero(); t * d];
                let mut dv = vec![S::zero(); t * d];
                let mut dp = vec![S::zero(); t * t];
                let mut ds = vec![S::zero(); t * t];
                for h in 0..heads {
                    let qh = head_slice(vq.data(), t, d, h, dh);
                    let kh = head_slice(vk.data(), t, d, h, dh);
                    let vh = head_slice(vv.data(), t, d, h, dh);
                    let goh = head_slice(g.data(), t, d, h, dh);
                    let ph = &probs[h * t * t..(h + 1) * t * t];
                    let mut dvh = vec![S::zero(); t * dh];
                    kernels::matmul_at_acc(ph, &goh, &mut dvh, t, t, dh);
                    dp.iter_mut().for_each(|s| *s = S::zero());
                    kernels::matmul_bt_acc(&goh, &vh, &mut dp, t, dh, t);
                    ds.iter_mut().for_each(|s| *s = S::zero());
                    kernels::softmax_rows_backward(ph, &dp, &mut ds, t, t);
                    for s in ds.iter_mut() {
                        *s *= scale;
                    }
                    let mut dqh = vec![S::zero(); t * dh];
                    kernels::matmul_acc(&ds, &kh, &mut dqh, t, t, dh);
                    let mut dkh = vec![S::zero(); t * dh];
                    kernels::matmul_at_acc(&ds, &qh, &mut dkh, t, t, dh);
                    scatter_head(&mut dq, &dqh, t, d, h, dh);
                    scatter_head(&mut dk, &dkh, t, d, h, dh);
                    scatter_head(&mut dv, &dvh, t, d, h, dh);
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(gv) = self.grad_slot(grads, var) {
                        for (o, &b) in gv.data_mut().iter_mut().zip(&buf) {
                            *o += b;
                        }
                    }
                }
            }
            Op::Dropout { x, keep } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((o, &gv), &kv) in gx.data_mut().iter_mut().zip(g.data()).zip(keep) {
                        *o += gv * kv;
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let gl = g.item();
                let n = targets.len();
                let k = probs.len() / n;
                let scale = gl / S::of(n as f64);
                if let Some(gx) = self.grad_slot(grads, *logits) {
                    let gxd = gx.data_mut();
                    for r in 0..n {
                        for c in 0..k {
                            let onehot = if c == targets[r] { S::one() } else { S::zero() };
                            gxd[r * k + c] += scale * (probs[r * k + c] - onehot);
                        }
                    }
                }
            }
            Op::KlToTarget {
                logits,
                target,
                probs,
            } => {
                let gl = g.item();
                let n = self.shape(*logits)[0];
                let scale = gl / S::of(n as f64);
                if let Some(gx) = self.grad_slot(grads, *logits) {
                    for ((o, &p), &t) in gx.data_mut().iter_mut().zip(probs).zip(target) {
                        *o += scale * (p - t);
                    }
                }
            }
            Op::Mse { pred, target } => {
                let gl = g.item();
                let vp = self.value(*pred).data();
                let scale = S::of(2.0) * gl / S::of(target.len() as f64);
                if let Some(gx) = self.grad_slot(grads, *pred) {
                    for ((o, &p), &t) in gx.data_mut().iter_mut().zip(vp).zip(target) {
                        *o += scale * (p - t);
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = self.value(*x).len();
                let mut gv = g.item();
                if matches!(op, Op::Mean(_)) {
                    gv /= S::of(n as f64);
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for o in gx.data_mut() {
                        *o += gv;
                    }
                }
            }
        }
        Ok(())
    }
}

fn head_slice<S: Scalar>(x: &[S], t: usize, d: usize, h: usize, dh: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(t * dh);
    for r in 0..t {
        out.extend_from_slice(&x[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head<S: Scalar>(dst: &mut [S], src: &[S], t: usize, d: usize, h: usize, dh: usize) {
    for r in 0..t {
        for c in 0..dh {
            dst[r * d + h * dh + c] += src[r * dh + c];
        }
    }
}

fn masked_softmax_impl<S: Scalar>(
    logits: &Tensor<S>,
    mask: Option<&AttnMask>,
    m: usize,
    n: usize,
) -> Result<Tensor<S>> {
    if let Some(mk) = mask {
        if mk.size() != n || m != n {
            return Err(Error::Shape(format!(
                "mask of size {} for logits [{m},{n}]",
                mk.size()
            )));
        }
    }
    let mut out = vec![S::zero(); m * n];
    kernels::masked_softmax_rows(logits.data(), mask.map(|mk| mk.pattern()), &mut out, m, n)
        .map_err(|row| Error::FullyMaskedRow { row })?;
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax of `logits + mask` over a square logit matrix. Entries
/// hidden by the mask come out as exactly zero; a row with no visible entry
/// is rejected.
pub fn masked_softmax<S: Scalar>(logits: &Tensor<S>, mask: &AttnMask) -> Result<Tensor<S>> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape(format!("expected a matrix, got {:?}", logits.shape())));
    }
    masked_softmax_impl(logits, Some(mask), logits.rows(), logits.cols())
}
