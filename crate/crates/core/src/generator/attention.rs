//! ℓ2-distance attention and the multi-head wrapper used for self- and
//! cross-attention in the attention block.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{self, Builder, Linear, LinearInit};

/// Attention weights from negative squared distances:
/// `logits[i][j] = -‖q_i - k_j‖² / sqrt(d)`.
///
/// `q` is `(..., Lq, d)`, `k` and `v` are `(..., Lk, d)` and `(..., Lk, dv)`.
/// `key_mask`, when given, broadcasts against `(..., Lq, Lk)` with 1.0 for
/// usable keys; masked keys get `-inf` logits.
pub fn l2_attention_weights(q: &Tensor, k: &Tensor, key_mask: Option<&Tensor>) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    if k.dim(D::Minus1)? != d {
        return Err(Error::Shape(format!(
            "query width {d} != key width {}",
            k.dim(D::Minus1)?
        )));
    }
    let qq = q.sqr()?.sum_keepdim(D::Minus1)?;
    let kk = k.sqr()?.sum_keepdim(D::Minus1)?.transpose(D::Minus1, D::Minus2)?;
    let qk = q.matmul(&k.transpose(D::Minus1, D::Minus2)?.contiguous()?)?;
    let dist = qq.broadcast_add(&kk)?.broadcast_sub(&(qk * 2.0)?)?;
    let mut logits = (dist.neg()? / (d as f64).sqrt())?;
    if let Some(mask) = key_mask {
        let mask = mask.broadcast_as(logits.shape())?;
        let ninf = Tensor::full(f32::NEG_INFINITY, logits.shape(), logits.device())?;
        logits = mask.gt(0.5)?.where_cond(&logits, &ninf)?;
    }
    nn::softmax_last(&logits)
}

pub fn l2_attention(q: &Tensor, k: &Tensor, v: &Tensor, key_mask: Option<&Tensor>) -> Result<Tensor> {
    if k.dim(D::Minus2)? != v.dim(D::Minus2)? {
        return Err(Error::Shape("keys and values differ in length".into()));
    }
    let w = l2_attention_weights(q, k, key_mask)?;
    Ok(w.matmul(&v.contiguous()?)?)
}

/// Multi-head ℓ2 attention with a zero-initialized output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(&mut b.pp("q"), dim, dim, LinearInit::DEFAULT)?,
            k: Linear::new(&mut b.pp("k"), kv_dim, dim, LinearInit::DEFAULT)?,
            v: Linear::new(&mut b.pp("v"), kv_dim, dim, LinearInit::DEFAULT)?,
            out: Linear::new(&mut b.pp("out"), dim, dim, LinearInit::ZERO)?,
            heads,
        })
    }

    /// `x` is `(B, Lq, C)`, `ctx` is `(B, Lk, Ckv)`, `key_mask` is `(B, Lk)`.
    pub fn forward(&self, x: &Tensor, ctx: &Tensor, key_mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, lq, c) = x.dims3()?;
        let lk = ctx.dim(1)?;
        let hd = c / self.heads;
        let split = |t: Tensor, l: usize| -> Result<Tensor> {
            Ok(t.reshape((b, l, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?, lq)?;
        let k = split(self.k.forward(ctx)?, lk)?;
        let v = split(self.v.forward(ctx)?, lk)?;
        let mask = match key_mask {
            Some(m) => Some(m.reshape((b, 1, 1, lk))?),
            None => None,
        };
        let o = l2_attention(&q, &k, &v, mask.as_ref())?
            .transpose(1, 2)?
            .reshape((b, lq, c))?;
        self.out.forward(&o)
    }
}
