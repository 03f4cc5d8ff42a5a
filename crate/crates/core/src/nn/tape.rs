//! Reverse-mode differentiation over a recorded sequence of tensor ops.
//!
//! Every op appends a node whose inputs were created earlier, so walking the
//! nodes backwards visits each one after all of its consumers. Layer ops expect
//! a leading batch dimension.

use rand::Rng;

use super::kernels::{self, Conv2dGeom};
use super::params::ParamId;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: Conv2dGeom,
    },
    Relu(NodeId),
    AvgPool2d {
        x: NodeId,
        ph: usize,
        pw: usize,
    },
    MaxPool1d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Pad2d {
        x: NodeId,
        pads: [usize; 4],
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Reshape(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    SoftmaxXent {
        logits: NodeId,
        probs: Vec<f64>,
        labels: Vec<usize>,
        denom: f64,
    },
    Embedding {
        table: NodeId,
        indices: Vec<Option<usize>>,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Parameter nodes read their values from the slice the
/// tape was created with.
#[derive(Debug)]
pub struct Tape<'p> {
    params: &'p [Tensor],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => &self.params[p.0],
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        assert!(
            id.0 < self.params.len(),
            "parameter {id:?} not in this tape's store"
        );
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Valid 2-D convolution of `[B, C, H, W]` with filters `[O, C, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride_h: usize,
        stride_w: usize,
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || bs != [ws[0]] || ws[1] != xs[1] {
            return Err(Error::shape(format!(
                "conv2d input {xs:?}, filters {ws:?}, bias {bs:?}"
            )));
        }
        let geom = Conv2dGeom {
            batch: xs[0],
            in_ch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ws[0],
            k_h: ws[2],
            k_w: ws[3],
            stride_h,
            stride_w,
        };
        geom.validate()?;
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        self.conv(x, w, b, geom, shape)
    }

    /// Valid 1-D convolution of `[B, C, L]` with filters `[O, C, k]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 3 || bs != [ws[0]] || ws[1] != xs[1] {
            return Err(Error::shape(format!(
                "conv1d input {xs:?}, filters {ws:?}, bias {bs:?}"
            )));
        }
        let geom = Conv2dGeom {
            batch: xs[0],
            in_ch: xs[1],
            height: 1,
            width: xs[2],
            out_ch: ws[0],
            k_h: 1,
            k_w: ws[2],
            stride_h: 1,
            stride_w: stride,
        };
        geom.validate()?;
        let shape = vec![geom.batch, geom.out_ch, geom.out_w()];
        self.conv(x, w, b, geom, shape)
    }

    fn conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: Conv2dGeom,
        shape: Vec<usize>,
    ) -> Result<NodeId> {
        let mut out = Tensor::zeros(&shape);
        kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            out.data_mut(),
        );
        Ok(self.push(out, Op::Conv { x, w, b, geom }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(x), &[x])
    }

    /// Non-overlapping average pooling over the last two axes.
    pub fn avg_pool2d(&mut self, x: NodeId, ph: usize, pw: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 || ph == 0 || pw == 0 || !s[s.len() - 2].is_multiple_of(ph) || !s[s.len() - 1].is_multiple_of(pw)
        {
            return Err(Error::shape(format!(
                "cannot average-pool {s:?} by {ph}x{pw}"
            )));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = s[..s.len() - 2].iter().product();
        let mut shape = s.clone();
        shape[s.len() - 2] = h / ph;
        shape[s.len() - 1] = w / pw;
        let mut out = Tensor::zeros(&shape);
        kernels::avg_pool2d_forward(planes, h, w, ph, pw, self.value(x).data(), out.data_mut());
        Ok(self.push(out, Op::AvgPool2d { x, ph, pw }, &[x]))
    }

    /// Non-overlapping max pooling over the last axis; a trailing remainder
    /// shorter than `window` is dropped.
    pub fn max_pool1d(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let len = *s.last().expect("rank >= 1");
        if s.len() < 2 || window == 0 || window > len {
            return Err(Error::shape(format!(
                "cannot max-pool {s:?} with window {window}"
            )));
        }
        let rows = s[..s.len() - 1].iter().product();
        let mut shape = s.clone();
        *shape.last_mut().expect("rank >= 1") = len / window;
        let mut out = Tensor::zeros(&shape);
        let argmax =
            kernels::max_pool1d_forward(rows, len, window, self.value(x).data(), out.data_mut());
        Ok(self.push(out, Op::MaxPool1d { x, argmax }, &[x]))
    }

    /// Zero padding of the last two axes by `[top, bottom, left, right]`.
    pub fn pad2d(&mut self, x: NodeId, pads: [usize; 4]) -> Result<NodeId> {
        if pads == [0; 4] {
            return Ok(x);
        }
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::shape(format!("pad2d needs rank >= 3, got {s:?}")));
        }
        let r = s.len();
        let (h, w) = (s[r - 2], s[r - 1]);
        let planes = s[..r - 2].iter().product();
        let mut shape = s.clone();
        shape[r - 2] = h + pads[0] + pads[1];
        shape[r - 1] = w + pads[2] + pads[3];
        let mut out = Tensor::zeros(&shape);
        kernels::pad2d_forward(planes, h, w, pads, self.value(x).data(), out.data_mut());
        Ok(self.push(out, Op::Pad2d { x, pads }, &[x]))
    }

    /// Concatenate along axis 1 (channels or features).
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(format!(
                "cannot concatenate {sa:?} and {sb:?}"
            )));
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let mut data = Vec::with_capacity(sa[0] * (ca + cb));
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..sa[0] {
            data.extend_from_slice(&va[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat { a, b }, &[a, b]))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let batch = v.shape()[0];
        let out = v
            .clone()
            .reshape(&[batch, v.len() / batch])
            .expect("same size");
        self.push(out, Op::Reshape(x), &[x])
    }

    /// `x W^T + b` for `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(Error::shape(format!(
                "linear input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
        let mut out = Tensor::zeros(&[batch, fan_out]);
        kernels::gemm(
            batch,
            fan_in,
            fan_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            out.data_mut(),
            false,
        );
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_exact_mut(fan_out) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Inverted dropout: survivors are scaled by `1/keep`. Identity when not
    /// training or when `keep == 1`.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        keep: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<NodeId> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::invalid(format!(
                "dropout keep rate {keep} outside (0, 1]"
            )));
        }
        if !training || keep == 1.0 {
            return Ok(x);
        }
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    /// Mean cross-entropy of `[B, K]` logits.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let batch = self.shape(logits).first().copied().unwrap_or(0);
        self.softmax_xent_over(logits, labels, batch)
    }

    /// Summed cross-entropy divided by `denom`, so that micro-batches of one
    /// optimizer batch each contribute their share of the batch mean.
    pub fn softmax_xent_over(
        &mut self,
        logits: NodeId,
        labels: &[usize],
        denom: usize,
    ) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || denom == 0 {
            return Err(Error::shape(format!(
                "softmax_xent logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = Vec::with_capacity(s[0] * k);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).data().chunks_exact(k).zip(labels) {
            let logp = kernels::log_softmax(row);
            loss -= logp[label];
            probs.extend(logp.iter().map(|v| v.exp()));
        }
        let denom = denom as f64;
        let op = Op::SoftmaxXent {
            logits,
            probs,
            labels: labels.to_vec(),
            denom,
        };
        Ok(self.push(Tensor::scalar(loss / denom), op, &[logits]))
    }

    /// Gather columns of a `[d, V]` table: `indices` has `B * n` entries and the
    /// result is `[B, d, n]`, zero where the index is `None`.
    pub fn embedding(
        &mut self,
        table: NodeId,
        indices: &[Option<usize>],
        n: usize,
    ) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || n == 0 || indices.is_empty() || !indices.len().is_multiple_of(n) {
            return Err(Error::shape(format!(
                "embedding table {ts:?} with {} indices in rows of {n}",
                indices.len()
            )));
        }
        let (d, vocab) = (ts[0], ts[1]);
        if let Some(bad) = indices.iter().flatten().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!(
                "word index {bad} outside a vocabulary of {vocab}"
            )));
        }
        let batch = indices.len() / n;
        let mut out = Tensor::zeros(&[batch, d, n]);
        let t = self.value(table).data();
        let o = out.data_mut();
        for b in 0..batch {
            for (pos, idx) in indices[b * n..(b + 1) * n].iter().enumerate() {
                if let Some(i) = idx {
                    for r in 0..d {
                        o[(b * d + r) * n + pos] = t[r * vocab + i];
                    }
                }
            }
        }
        let op = Op::Embedding {
            table,
            indices: indices.to_vec(),
        };
        Ok(self.push(out, op, &[table]))
    }

    /// `sum_i weights[i] * x[i]` as a scalar.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId> {
        let v = self.value(x);
        if weights.len() != v.len() {
            return Err(Error::shape(
                "weighted_sum weights do not match the input size",
            ));
        }
        let s = v.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    /// Accumulate `d loss / d param` into `grads` (indexed like the parameter
    /// slice this tape was built on).
    pub fn backward(&self, loss: NodeId, grads: &mut [Tensor]) -> Result<()> {
        self.sweep(loss, |op, g| {
            if let Op::Param(p) = op {
                let dst = grads[p.0].data_mut();
                dst.iter_mut().zip(g.data()).for_each(|(d, s)| *d += s);
            }
        })
    }

    /// Gradient of `loss` with respect to an arbitrary node; mainly a testing
    /// aid. Nodes that do not depend on a parameter get `None`.
    pub fn gradient_of(&self, loss: NodeId, target: NodeId) -> Result<Option<Tensor>> {
        let mut all = self.propagate(loss, true)?;
        Ok(all.get_mut(target.0).and_then(Option::take))
    }

    fn sweep<F: FnMut(&Op, &Tensor)>(&self, loss: NodeId, mut on_leaf: F) -> Result<()> {
        self.propagate_with(loss, false, &mut on_leaf).map(drop)
    }

    fn propagate(&self, loss: NodeId, keep: bool) -> Result<Vec<Option<Tensor>>> {
        self.propagate_with(loss, keep, &mut |_, _| {})
    }

    fn propagate_with(
        &self,
        loss: NodeId,
        keep: bool,
        on_leaf: &mut dyn FnMut(&Op, &Tensor),
    ) -> Result<Vec<Option<Tensor>>> {
        if self.shape(loss) != [1] {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = (if keep {
                grads[i].clone()
            } else {
                grads[i].take()
            }) else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(_) => on_leaf(&node.op, &g),
                op => self.node_backward(op, &g, &mut grads),
            }
        }
        Ok(grads)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn node_backward(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Input | Op::Param(_) => {}
            Op::Conv { x, w, b, geom } => {
                let mut dw = Tensor::zeros(self.shape(*w));
                let mut db = Tensor::zeros(self.shape(*b));
                let mut dx = self.wants(*x).then(|| Tensor::zeros(self.shape(*x)));
                kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.data_mut(),
                    db.data_mut(),
                );
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
            }
            Op::Relu(x) => {
                let v = self.value(*x);
                let data = v
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &d)| if a > 0.0 { d } else { 0.0 })
                    .collect();
                accumulate(
                    grads,
                    *x,
                    Tensor::new(v.shape().to_vec(), data).expect("shape"),
                );
            }
            Op::AvgPool2d { x, ph, pw } => {
                let s = self.shape(*x);
                let r = s.len();
                let planes = s[..r - 2].iter().product();
                let mut dx = Tensor::zeros(s);
                kernels::avg_pool2d_backward(
                    planes,
                    s[r - 2],
                    s[r - 1],
                    *ph,
                    *pw,
                    g.data(),
                    dx.data_mut(),
                );
                accumulate(grads, *x, dx);
            }
            Op::MaxPool1d { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (&i, &v) in argmax.iter().zip(g.data()) {
                    d[i] += v;
                }
                accumulate(grads, *x, dx);
            }
            Op::Pad2d { x, pads } => {
                let s = self.shape(*x);
                let r = s.len();
                let planes = s[..r - 2].iter().product();
                let mut dx = Tensor::zeros(s);
                kernels::pad2d_backward(planes, s[r - 2], s[r - 1], *pads, g.data(), dx.data_mut());
                accumulate(grads, *x, dx);
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let inner: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                let mut da = Vec::with_capacity(sa[0] * ca);
                let mut db = Vec::with_capacity(sa[0] * cb);
                for chunk in g.data().chunks_exact(ca + cb) {
                    da.extend_from_slice(&chunk[..ca]);
                    db.extend_from_slice(&chunk[ca..]);
                }
                if self.wants(*a) {
                    accumulate(grads, *a, Tensor::new(sa.to_vec(), da).expect("shape"));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, Tensor::new(sb.to_vec(), db).expect("shape"));
                }
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshape(self.shape(*x)).expect("same size");
                accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[0]);
                let mut dw = Tensor::zeros(ws);
                kernels::gemm(
                    fan_out,
                    batch,
                    fan_in,
                    g.data(),
                    true,
                    self.value(*x).data(),
                    false,
                    dw.data_mut(),
                    false,
                );
                let mut db = Tensor::zeros(&[fan_out]);
                for row in g.data().chunks_exact(fan_out) {
                    db.data_mut().iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xs);
                    kernels::gemm(
                        batch,
                        fan_out,
                        fan_in,
                        g.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        dx.data_mut(),
                        false,
                    );
                    accumulate(grads, *x, dx);
                }
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(d, m)| d * m).collect();
                accumulate(
                    grads,
                    *x,
                    Tensor::new(g.shape().to_vec(), data).expect("shape"),
                );
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
                denom,
            } => {
                let upstream = g.data()[0];
                let k = self.shape(*logits)[1];
                let mut d = probs.clone();
                for (row, &label) in d.chunks_exact_mut(k).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= upstream / denom);
                }
                accumulate(
                    grads,
                    *logits,
                    Tensor::new(self.shape(*logits).to_vec(), d).expect("shape"),
                );
            }
            Op::Embedding { table, indices } => {
                let ts = self.shape(*table);
                let (d, vocab) = (ts[0], ts[1]);
                let n = g.shape()[2];
                let mut dt = Tensor::zeros(ts);
                let dtd = dt.data_mut();
                let gd = g.data();
                for (k, idx) in indices.iter().enumerate() {
                    let Some(i) = idx else { continue };
                    let (b, pos) = (k / n, k % n);
                    for r in 0..d {
                        dtd[r * vocab + i] += gd[(b * d + r) * n + pos];
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::WeightedSum { x, weights } => {
                let upstream = g.data()[0];
                let data = weights.iter().map(|w| w * upstream).collect();
                accumulate(
                    grads,
                    *x,
                    Tensor::new(self.shape(*x).to_vec(), data).expect("shape"),
                );
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use crate::nn::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Direct sliding-window convolution, one output at a time.
    fn conv2d_oracle(x: &Tensor, w: &Tensor, b: &Tensor, sh: usize, sw: usize) -> Tensor {
        let (xs, ws) = (x.shape(), w.shape());
        let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (oh, ow) = ((h - kh) / sh + 1, (wd - kw) / sw + 1);
        let mut y = Tensor::zeros(&[batch, o, oh, ow]);
        for n in 0..batch {
            for f in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.get(&[f]);
                        for ch in 0..c {
                            for p in 0..kh {
                                for q in 0..kw {
                                    acc += w.get(&[f, ch, p, q])
                                        * x.get(&[n, ch, i * sh + p, j * sw + q]);
                                }
                            }
                        }
                        y.set(&[n, f, i, j], acc);
                    }
                }
            }
        }
        y
    }

    fn run_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, sh: usize, sw: usize) -> Tensor {
        let mut t = Tape::new(&[]);
        let (xi, wi, bi) = (t.input(x.clone()), t.input(w.clone()), t.input(b.clone()));
        let y = t.conv2d(xi, wi, bi, sh, sw).unwrap();
        t.value(y).clone()
    }

    #[test]
    fn conv2d_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 2, 4, 6], &mut rng);
        let w = random(&[3, 2, 2, 2], &mut rng);
        let b = random(&[3], &mut rng);
        for (sh, sw) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            let got = run_conv2d(&x, &w, &b, sh, sw);
            let want = conv2d_oracle(&x, &w, &b, sh, sw);
            assert!(got.max_abs_diff(&want) <= 1e-12, "strides {sh},{sw}");
        }
        let xb = random(&[3, 4, 5, 7], &mut rng);
        let wb = random(&[6, 4, 3, 2], &mut rng);
        let bb = random(&[6], &mut rng);
        assert!(
            run_conv2d(&xb, &wb, &bb, 1, 2).max_abs_diff(&conv2d_oracle(&xb, &wb, &bb, 1, 2))
                <= 1e-12
        );
    }

    #[test]
    fn conv2d_unit_filter_sums_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 5, 3, 4], &mut rng);
        let y = run_conv2d(
            &x,
            &Tensor::full(&[1, 5, 1, 1], 1.0),
            &Tensor::zeros(&[1]),
            1,
            1,
        );
        for n in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    let mut sum = 0.0;
                    for c in 0..5 {
                        sum += x.get(&[n, c, i, j]);
                    }
                    assert_eq!(y.get(&[n, 0, i, j]), sum);
                }
            }
        }
    }

    #[test]
    fn conv2d_stride_two_subsamples_stride_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3, 4, 9], &mut rng);
        let w = random(&[4, 3, 2, 2], &mut rng);
        let b = random(&[4], &mut rng);
        let dense = run_conv2d(&x, &w, &b, 1, 1);
        let strided = run_conv2d(&x, &w, &b, 1, 2);
        let s = strided.shape();
        for n in 0..s[0] {
            for f in 0..s[1] {
                for i in 0..s[2] {
                    for j in 0..s[3] {
                        assert_eq!(strided.get(&[n, f, i, j]), dense.get(&[n, f, i, 2 * j]));
                    }
                }
            }
        }
    }

    #[test]
    fn conv1d_is_height_one_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 3, 10], &mut rng);
        let w = random(&[5, 3, 4], &mut rng);
        let b = random(&[5], &mut rng);
        for stride in [1, 2, 3] {
            let mut t = Tape::new(&[]);
            let (xi, wi, bi) = (t.input(x.clone()), t.input(w.clone()), t.input(b.clone()));
            let y1 = t.conv1d(xi, wi, bi, stride).unwrap();
            let y2 = run_conv2d(
                &x.clone().reshape(&[2, 3, 1, 10]).unwrap(),
                &w.clone().reshape(&[5, 3, 1, 4]).unwrap(),
                &b,
                1,
                stride,
            );
            assert_eq!(t.value(y1).data(), y2.data());
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let params = [Tensor::full(&[2, 2], 1.0)];
        let mut t = Tape::new(&params);
        let p = t.param(ParamId(0));
        let r = t.relu(p);
        let mut grads = [Tensor::zeros(&[2, 2])];
        assert!(t.backward(r, &mut grads).is_err());
    }

    #[test]
    fn backward_leaves_inputs_alone_and_accumulates() {
        let params = [Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()];
        let mut t = Tape::new(&params);
        let p = t.param(ParamId(0));
        let x = t.input(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let c = t.concat_channels(p, x).unwrap();
        let loss = t.weighted_sum(c, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.gradient_of(loss, x).unwrap(), None);
        let mut grads = [Tensor::new(vec![1, 2], vec![10.0, 10.0]).unwrap()];
        t.backward(loss, &mut grads).unwrap();
        assert_eq!(grads[0].data(), [11.0, 11.0]);
    }

    #[test]
    fn dropout_expectation_matches_input() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let trials = 10_000;
        let mut sum = [0.0; 4];
        for _ in 0..trials {
            let mut t = Tape::new(&[]);
            let xi = t.input(batch_of_one(&x));
            let y = t.dropout(xi, 0.5, &mut rng, true).unwrap();
            sum.iter_mut()
                .zip(t.value(y).data())
                .for_each(|(s, v)| *s += v);
        }
        for (s, v) in sum.iter().zip(x.data()) {
            let mean = s / trials as f64;
            assert!(((mean - v) / v).abs() < 0.02, "mean {mean} vs {v}");
        }
        let mut t = Tape::new(&[]);
        let xi = t.input(batch_of_one(&x));
        let y = t.dropout(xi, 0.5, &mut rng, false).unwrap();
        assert_eq!(t.value(y).data(), x.data());
    }

    fn batch_of_one(x: &Tensor) -> Tensor {
        x.clone().reshape(&[1, x.len()]).unwrap()
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn softmax_xent_matches_high_precision_reference() {
        let logits = [
            0.37, -1.25, 2.5, 0.0, -0.125, 3.75, 3.5, -2.0, 1.0, 0.625, -0.5, -0.75, -0.25, 12.0,
            -8.0,
        ];
        // 50-digit recomputation of the same batch.
        let want_loss = 7.048_823_076_836_223_940_1;
        let want_grad = [
            0.030_544_412_385_528_692_652,
            0.006_044_699_475_369_575_993_7,
            -0.076_306_171_275_407_107_498,
            0.021_098_074_243_829_486_866,
            0.018_618_985_170_679_351_987,
            0.176_380_994_696_831_750_42,
            -0.195_967_676_544_527_456_8,
            0.000_561_382_042_790_349_521_68,
            0.011_275_659_748_480_084_566,
            0.007_749_640_056_425_272_299_8,
            1.242_203_542_841_606_531_5e-6,
            9.674_290_918_991_165_919_9e-7,
            1.595_020_921_708_182_556_7e-6,
            0.333_329_527_992_733_520_34,
            -0.333_333_332_646_289_969_25,
        ];
        let params = [Tensor::new(vec![3, 5], logits.to_vec()).unwrap()];
        let mut t = Tape::new(&params);
        let l = t.param(ParamId(0));
        let loss = t.softmax_xent(l, &[2, 1, 4]).unwrap();
        assert!((t.value(loss).data()[0] - want_loss).abs() < 1e-10);
        let mut grads = [Tensor::zeros(&[3, 5])];
        t.backward(loss, &mut grads).unwrap();
        for (g, w) in grads[0].data().iter().zip(want_grad) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn micro_batches_sum_to_full_batch_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = [random(&[6, 3], &mut rng)];
        let labels = [0, 2, 1, 1, 0, 2];
        let full = {
            let mut t = Tape::new(&params);
            let l = t.param(ParamId(0));
            let loss = t.softmax_xent(l, &labels).unwrap();
            let mut g = [Tensor::zeros(&[6, 3])];
            t.backward(loss, &mut g).unwrap();
            g
        };
        let mut parts = [Tensor::zeros(&[6, 3])];
        for (k, (chunk, lab)) in params[0].data().chunks(9).zip(labels.chunks(3)).enumerate() {
            let local = [Tensor::new(vec![3, 3], chunk.to_vec()).unwrap()];
            let mut t = Tape::new(&local);
            let l = t.param(ParamId(0));
            let loss = t.softmax_xent_over(l, lab, 6).unwrap();
            let mut g = [Tensor::zeros(&[3, 3])];
            t.backward(loss, &mut g).unwrap();
            parts[0].data_mut()[k * 9..(k + 1) * 9].copy_from_slice(g[0].data());
        }
        assert!(parts[0].max_abs_diff(&full[0]) < 1e-15);
    }

    fn check(store: &mut ParamStore, loss_fn: impl Fn(&mut Tape) -> Result<NodeId>) -> f64 {
        grad_check(store, 1e-6, 40, 1, loss_fn)
            .unwrap()
            .max_rel_error
    }

    #[test]
    fn grad_check_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let w = store.add_uniform("w", &[4, 6], 6, &mut rng).unwrap();
        let b = store.add_uniform("b", &[4], 6, &mut rng).unwrap();
        let x = random(&[3, 6], &mut rng);
        let err = check(&mut store, |t| {
            let (xi, wi, bi) = (t.input(x.clone()), t.param(w), t.param(b));
            let y = t.linear(xi, wi, bi)?;
            t.softmax_xent(y, &[0, 3, 1])
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_strided_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut store = ParamStore::new();
        let w = store.add_uniform("w", &[3, 2, 3, 2], 12, &mut rng).unwrap();
        let b = store.add_uniform("b", &[3], 12, &mut rng).unwrap();
        let x = store.add_uniform("x", &[2, 2, 5, 8], 1, &mut rng).unwrap();
        let weights = random(&[2 * 3 * 3 * 4], &mut rng).into_data();
        let err = check(&mut store, |t| {
            let (xi, wi, bi) = (t.param(x), t.param(w), t.param(b));
            let y = t.conv2d(xi, wi, bi, 1, 2)?;
            t.weighted_sum(y, weights.clone())
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn grad_check_conv1d_pooling_and_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut store = ParamStore::new();
        let table = store.add_uniform("table", &[4, 7], 1, &mut rng).unwrap();
        let w = store.add_uniform("w", &[5, 4, 3], 12, &mut rng).unwrap();
        let b = store.add_uniform("b", &[5], 12, &mut rng).unwrap();
        let fc = store.add_uniform("fc", &[3, 10], 10, &mut rng).unwrap();
        let fb = store.add_zeros("fb", &[3]).unwrap();
        let indices = [
            Some(1),
            Some(4),
            None,
            Some(6),
            Some(0),
            Some(4),
            Some(2),
            Some(3),
            None,
            Some(5),
            Some(5),
            Some(1),
            Some(0),
            None,
        ];
        let err = check(&mut store, |t| {
            let ti = t.param(table);
            let e = t.embedding(ti, &indices, 7)?;
            let (wi, bi) = (t.param(w), t.param(b));
            let c = t.conv1d(e, wi, bi, 1)?;
            let p = t.max_pool1d(c, 2)?;
            let f = t.flatten(p);
            let (fi, fbi) = (t.param(fc), t.param(fb));
            let y = t.linear(f, fi, fbi)?;
            t.softmax_xent(y, &[2, 0])
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn grad_check_dense_block_with_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut store = ParamStore::new();
        let x = store.add_uniform("x", &[2, 3, 4, 4], 1, &mut rng).unwrap();
        let w1 = store
            .add_uniform("w1", &[2, 3, 3, 2], 18, &mut rng)
            .unwrap();
        let b1 = store.add_uniform("b1", &[2], 18, &mut rng).unwrap();
        let w2 = store
            .add_uniform("w2", &[2, 5, 3, 2], 30, &mut rng)
            .unwrap();
        let b2 = store.add_uniform("b2", &[2], 30, &mut rng).unwrap();
        let fc = store.add_uniform("fc", &[3, 28], 28, &mut rng).unwrap();
        let fb = store.add_zeros("fb", &[3]).unwrap();
        let err = check(&mut store, |t| {
            let mut h = t.param(x);
            for (w, b) in [(w1, b1), (w2, b2)] {
                let padded = t.pad2d(h, [1, 1, 0, 1])?;
                let (wi, bi) = (t.param(w), t.param(b));
                let c = t.conv2d(padded, wi, bi, 1, 1)?;
                let r = t.relu(c);
                h = t.concat_channels(h, r)?;
            }
            let pooled = t.avg_pool2d(h, 2, 2)?;
            let f = t.flatten(pooled);
            let mut mask_rng = ChaCha8Rng::seed_from_u64(7);
            let d = t.dropout(f, 0.5, &mut mask_rng, true)?;
            let (fi, fbi) = (t.param(fc), t.param(fb));
            let y = t.linear(d, fi, fbi)?;
            t.softmax_xent(y, &[1, 2])
        });
        assert!(err < 1e-4, "{err}");
    }
}
