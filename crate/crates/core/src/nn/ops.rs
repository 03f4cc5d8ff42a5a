//! Single-sample forms of the tape ops, without gradient recording.
//!
//! Inputs carry no batch axis; the wrappers add a batch of one, run the tape
//! op and strip the axis again.

use rand::Rng;

use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn batched(x: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(&shape).expect("same size")
}

fn unbatched(x: &Tensor) -> Tensor {
    let shape = if x.rank() > 1 {
        &x.shape()[1..]
    } else {
        x.shape()
    };
    x.clone().reshape(shape).expect("same size")
}

fn need_rank(x: &Tensor, rank: usize, op: &str) -> Result<()> {
    if x.rank() == rank {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{op} expects rank {rank}, got {:?}",
            x.shape()
        )))
    }
}

/// `[C, L]` input, `[O, C, k]` filters -> `[O, L']`.
pub fn conv1d(input: &Tensor, filters: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    need_rank(input, 2, "conv1d")?;
    let mut t = Tape::new(&[]);
    let (x, w, b) = (
        t.input(batched(input)),
        t.input(filters.clone()),
        t.input(bias.clone()),
    );
    let y = t.conv1d(x, w, b, stride)?;
    Ok(unbatched(t.value(y)))
}

/// `[C, H, W]` input, `[O, C, k1, k2]` filters -> `[O, H', W']`.
pub fn conv2d(
    input: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    stride_h: usize,
    stride_w: usize,
) -> Result<Tensor> {
    need_rank(input, 3, "conv2d")?;
    let mut t = Tape::new(&[]);
    let (x, w, b) = (
        t.input(batched(input)),
        t.input(filters.clone()),
        t.input(bias.clone()),
    );
    let y = t.conv2d(x, w, b, stride_h, stride_w)?;
    Ok(unbatched(t.value(y)))
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Pools the last two axes of a tensor of rank at least 2.
pub fn avg_pool2d(x: &Tensor, pool_h: usize, pool_w: usize) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::shape(format!(
            "avg_pool2d needs rank >= 2, got {:?}",
            x.shape()
        )));
    }
    let mut t = Tape::new(&[]);
    let xi = t.input(batched(x));
    let y = t.avg_pool2d(xi, pool_h, pool_w)?;
    Ok(unbatched(t.value(y)))
}

/// Concatenate along the first axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut t = Tape::new(&[]);
    let (ai, bi) = (t.input(batched(a)), t.input(batched(b)));
    let y = t.concat_channels(ai, bi)?;
    Ok(unbatched(t.value(y)))
}

pub fn flatten(x: &Tensor) -> Tensor {
    x.clone().reshape(&[x.len()]).expect("same size")
}

/// `W x + b` for `x: [in]`, `W: [out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    need_rank(x, 1, "linear")?;
    let mut t = Tape::new(&[]);
    let (xi, wi, bi) = (t.input(batched(x)), t.input(w.clone()), t.input(b.clone()));
    let y = t.linear(xi, wi, bi)?;
    Ok(unbatched(t.value(y)))
}

pub fn dropout<R: Rng>(x: &Tensor, keep_rate: f64, rng: &mut R, training: bool) -> Result<Tensor> {
    let mut t = Tape::new(&[]);
    let xi = t.input(x.clone());
    let y = t.dropout(xi, keep_rate, rng, training)?;
    Ok(t.value(y).clone())
}

/// Mean cross-entropy of `[B, K]` logits and its gradient with respect to
/// the logits.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    // A parameter-backed tape so the gradient reaches the logits leaf.
    let params = [logits.clone()];
    let mut t = Tape::new(&params);
    let l = t.param(super::params::ParamId(0));
    let loss = t.softmax_xent(l, labels)?;
    let mut grads = [Tensor::zeros(logits.shape())];
    t.backward(loss, &mut grads)?;
    let [grad] = grads;
    Ok((t.value(loss).data()[0], grad))
}
