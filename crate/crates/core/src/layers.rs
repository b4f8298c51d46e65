//! Transformer blocks and the two residual/normalization wirings.
//!
//! `V1` (post-norm): `out = LN(x + F(x))`.
//! `V2` (pre-norm):  `out = x + F(LN(x))`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Stabilizer added to the variance inside layer normalization.
pub const DEFAULT_LN_EPS: f64 = 1e-6;

/// Score assigned to masked attention logits before the softmax.
pub const MASKED_SCORE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormOrder {
    /// Post-norm: residual add, then layer normalization.
    V1,
    /// Pre-norm: layer normalization on the sublayer input, then residual add.
    V2,
}

impl NormOrder {
    pub fn name(self) -> &'static str {
        match self {
            NormOrder::V1 => "v1",
            NormOrder::V2 => "v2",
        }
    }
}

impl std::str::FromStr for NormOrder {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "v1" | "post" | "post-norm" => Ok(NormOrder::V1),
            "v2" | "pre" | "pre-norm" => Ok(NormOrder::V2),
            other => Err(format!("unknown norm order `{other}` (expected v1|v2)")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub w: Var,
    pub b: Var,
    pub eps: f64,
}

pub fn layer_norm(g: &mut Graph, x: Var, p: &LayerNormParams) -> Result<Var> {
    g.layer_norm(x, p.w, p.b, p.eps)
}

/// Values around one residual sublayer.
#[derive(Clone, Copy, Debug)]
pub struct SublayerIO {
    /// Incoming residual stream.
    pub in_res: Var,
    /// Output of the sublayer function.
    pub in_model: Var,
    /// `in_res + in_model`.
    pub sum: Var,
    /// Residual stream handed to the next sublayer.
    pub out_res: Var,
}

/// `out_res = LN(in_res + F(in_res))`.
pub fn sublayer_v1<F>(g: &mut Graph, in_res: Var, f: F, p: &LayerNormParams) -> Result<SublayerIO>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let in_model = f(g, in_res)?;
    check_preserves_shape(g, in_res, in_model)?;
    let sum = g.add(in_res, in_model)?;
    let out_res = layer_norm(g, sum, p)?;
    Ok(SublayerIO {
        in_res,
        in_model,
        sum,
        out_res,
    })
}

/// `out_res = in_res + F(LN(in_res))`.
pub fn sublayer_v2<F>(g: &mut Graph, in_res: Var, f: F, p: &LayerNormParams) -> Result<SublayerIO>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    let normed = layer_norm(g, in_res, p)?;
    let in_model = f(g, normed)?;
    check_preserves_shape(g, in_res, in_model)?;
    let sum = g.add(in_res, in_model)?;
    Ok(SublayerIO {
        in_res,
        in_model,
        sum,
        out_res: sum,
    })
}

pub fn sublayer<F>(g: &mut Graph, order: NormOrder, in_res: Var, f: F, p: &LayerNormParams) -> Result<SublayerIO>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    match order {
        NormOrder::V1 => sublayer_v1(g, in_res, f, p),
        NormOrder::V2 => sublayer_v2(g, in_res, f, p),
    }
}

fn check_preserves_shape(g: &Graph, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape {
            op: "sublayer",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Attention mask of shape `[batch, q_len, k_len]`; `true` hides a key.
/// The same mask applies to every head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub masked: Vec<bool>,
}

impl AttnMask {
    pub fn none(batch: usize, q_len: usize, k_len: usize) -> Self {
        AttnMask {
            batch,
            q_len,
            k_len,
            masked: vec![false; batch * q_len * k_len],
        }
    }

    /// Hides padded keys; `key_pad` is `[batch, k_len]`.
    pub fn key_padding(key_pad: &[bool], batch: usize, q_len: usize) -> Self {
        let k_len = key_pad.len() / batch;
        let mut m = Self::none(batch, q_len, k_len);
        for b in 0..batch {
            for q in 0..q_len {
                for k in 0..k_len {
                    m.masked[(b * q_len + q) * k_len + k] = key_pad[b * k_len + k];
                }
            }
        }
        m
    }

    /// Hides keys after the query position, plus padded keys.
    pub fn causal(key_pad: &[bool], batch: usize, len: usize) -> Self {
        let mut m = Self::key_padding(key_pad, batch, len);
        for b in 0..batch {
            for q in 0..len {
                for k in q + 1..len {
                    m.masked[(b * len + q) * len + k] = true;
                }
            }
        }
        m
    }

    fn expand_heads(&self, heads: usize) -> Vec<bool> {
        let per = self.q_len * self.k_len;
        let mut out = Vec::with_capacity(self.batch * heads * per);
        for b in 0..self.batch {
            let row = &self.masked[b * per..(b + 1) * per];
            for _ in 0..heads {
                out.extend_from_slice(row);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    /// Post-softmax weights, `[batch * heads, q_len, k_len]`.
    pub weights: Var,
}

/// Scaled dot-product attention over `n_heads` heads with output projection.
///
/// `q_in` is `[batch, q_len, d_model]`, `kv_in` is `[batch, k_len, d_model]`.
pub fn multi_head_attention(
    g: &mut Graph,
    q_in: Var,
    kv_in: Var,
    mask: &AttnMask,
    n_heads: usize,
    p: &AttentionParams,
) -> Result<AttentionOutput> {
    let sq = g.shape(q_in).to_vec();
    let sk = g.shape(kv_in).to_vec();
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::Shape {
            op: "multi_head_attention",
            lhs: sq,
            rhs: sk,
        });
    }
    let (batch, q_len, d_model) = (sq[0], sq[1], sq[2]);
    let k_len = sk[1];
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::config(
            "n_heads",
            format!("d_model {d_model} is not divisible by {n_heads} heads"),
        ));
    }
    if (mask.batch, mask.q_len, mask.k_len) != (batch, q_len, k_len) {
        return Err(Error::Shape {
            op: "attention mask",
            lhs: vec![batch, q_len, k_len],
            rhs: vec![mask.batch, mask.q_len, mask.k_len],
        });
    }
    if mask.masked.chunks(k_len).any(|row| row.iter().all(|&m| m)) {
        return Err(Error::contract("attention row has no unmasked key"));
    }
    let dh = d_model / n_heads;

    let split = |g: &mut Graph, x: Var, len: usize| -> Result<Var> {
        let x = g.reshape(x, &[batch, len, n_heads, dh])?;
        let x = g.swap_axes_12(x)?;
        g.reshape(x, &[batch * n_heads, len, dh])
    };
    let q = g.matmul(q_in, p.wq)?;
    let k = g.matmul(kv_in, p.wk)?;
    let v = g.matmul(kv_in, p.wv)?;
    let q = split(g, q, q_len)?;
    let k = split(g, k, k_len)?;
    let v = split(g, v, k_len)?;

    let scores = g.batch_matmul(q, k, true, 1.0 / (dh as f64).sqrt())?;
    let scores = g.masked_fill(scores, Rc::new(mask.expand_heads(n_heads)), MASKED_SCORE)?;
    let weights = g.softmax(scores, 2)?;
    let ctx = g.batch_matmul(weights, v, false, 1.0)?;
    let ctx = g.reshape(ctx, &[batch, n_heads, q_len, dh])?;
    let ctx = g.swap_axes_12(ctx)?;
    let ctx = g.reshape(ctx, &[batch, q_len, d_model])?;
    let out = g.matmul(ctx, p.wo)?;
    Ok(AttentionOutput { out, weights })
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Position-wise `relu(x W1 + b1) W2 + b2`.
pub fn ffn(g: &mut Graph, x: Var, p: &FfnParams) -> Result<Var> {
    let h = g.matmul(x, p.w1)?;
    let h = g.add_bias(h, p.b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, p.w2)?;
    g.add_bias(o, p.b2)
}
