//! Transformer building blocks (post-LN, BERT style).

use candle_core::{Tensor, Var};

use super::params::Scope;
use crate::ops::{layer_norm, softmax_last};
use crate::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(scope: &Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.normal((out_dim, in_dim), "weight")?,
            bias: scope.zeros(out_dim, "bias")?,
        })
    }

    /// New parameters initialised as a copy of `src`.
    pub fn copy_of(scope: &Scope, src: &Linear) -> Result<Self> {
        Ok(Self {
            weight: scope.copy_of(&src.weight, "weight")?,
            bias: scope.copy_of(&src.bias, "bias")?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let dims = xs.dims().to_vec();
        let in_dim = dims[dims.len() - 1];
        let rows = xs.elem_count() / in_dim.max(1);
        let flat = xs
            .reshape((rows, in_dim))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out = dims;
        let last = out.len() - 1;
        out[last] = self.weight.dim(0)?;
        Ok(flat.reshape(out)?)
    }

    pub fn num_parameters(&self) -> usize {
        self.weight.elem_count() + self.bias.elem_count()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-12;

    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.constant(dim, 1.0, "gamma")?,
            beta: scope.zeros(dim, "beta")?,
        })
    }

    pub fn copy_of(scope: &Scope, src: &LayerNorm) -> Result<Self> {
        Ok(Self {
            gamma: scope.copy_of(&src.gamma, "gamma")?,
            beta: scope.copy_of(&src.beta, "beta")?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        layer_norm(xs, &self.gamma, &self.beta, Self::EPS)
    }

    pub fn num_parameters(&self) -> usize {
        self.gamma.elem_count() + self.beta.elem_count()
    }
}

/// Records attention probabilities of one layer and exposes a zero-valued
/// probe variable added to them, so backward yields d(loss)/d(probs).
#[derive(Debug, Default)]
pub struct AttentionCapture {
    pub probs: Option<Tensor>,
    pub probe: Option<Var>,
    /// Initial value of the probe; zeros when unset. Lets callers perturb the
    /// attention probabilities directly.
    pub offset: Option<Tensor>,
}

/// Turns a [B, L] validity mask (1 = attend, 0 = padding) into an additive
/// bias of shape [B, 1, 1, L].
pub fn attention_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, l) = mask.dims2()?;
    Ok(((mask - 1.0)? * 1e9)?.reshape((b, 1, 1, l))?)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub num_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(scope: &Scope, hidden: usize, num_heads: usize) -> Result<Self> {
        Ok(Self {
            query: Linear::new(&scope.pp("query"), hidden, hidden)?,
            key: Linear::new(&scope.pp("key"), hidden, hidden)?,
            value: Linear::new(&scope.pp("value"), hidden, hidden)?,
            output: Linear::new(&scope.pp("output"), hidden, hidden)?,
            num_heads,
        })
    }

    fn split_heads(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, l, h) = xs.dims3()?;
        Ok(xs
            .reshape((b, l, self.num_heads, h / self.num_heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Attention of `queries` [B, Lq, H] over `keys_values` [B, Lk, H].
    /// `key_mask` is a [B, Lk] validity mask.
    pub fn forward(
        &self,
        queries: &Tensor,
        keys_values: &Tensor,
        key_mask: Option<&Tensor>,
        capture: Option<&mut AttentionCapture>,
    ) -> Result<Tensor> {
        let (b, lq, hidden) = queries.dims3()?;
        let head_dim = hidden / self.num_heads;
        let q = self.split_heads(&self.query.forward(queries)?)?;
        let k = self.split_heads(&self.key.forward(keys_values)?)?;
        let v = self.split_heads(&self.value.forward(keys_values)?)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? / (head_dim as f64).sqrt())?;
        if let Some(mask) = key_mask {
            scores = scores.broadcast_add(&attention_bias(mask)?)?;
        }
        let mut probs = softmax_last(&scores)?;
        if let Some(cap) = capture {
            let probe = match cap.offset.take() {
                Some(offset) => Var::from_tensor(&offset.reshape(probs.shape())?)?,
                None => Var::zeros(probs.shape(), probs.dtype(), probs.device())?,
            };
            cap.probs = Some(probs.detach());
            probs = probs.broadcast_add(probe.as_tensor())?;
            cap.probe = Some(probe);
        }
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, hidden))?;
        self.output.forward(&ctx)
    }

    pub fn num_parameters(&self) -> usize {
        self.query.num_parameters()
            + self.key.num_parameters()
            + self.value.num_parameters()
            + self.output.num_parameters()
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(scope: &Scope, hidden: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&scope.pp("fc1"), hidden, hidden * ratio)?,
            fc2: Linear::new(&scope.pp("fc2"), hidden * ratio, hidden)?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(xs)?.gelu_erf()?)
    }
}

/// Self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub mlp: Mlp,
    pub mlp_norm: LayerNorm,
}

impl EncoderBlock {
    pub fn new(scope: &Scope, hidden: usize, heads: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(&scope.pp("attention"), hidden, heads)?,
            attention_norm: LayerNorm::new(&scope.pp("attention_norm"), hidden)?,
            mlp: Mlp::new(&scope.pp("mlp"), hidden, ratio)?,
            mlp_norm: LayerNorm::new(&scope.pp("mlp_norm"), hidden)?,
        })
    }

    pub fn forward(&self, xs: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let attn = self.attention.forward(xs, xs, mask, None)?;
        let h = self.attention_norm.forward(&(xs + attn)?)?;
        let out = self.mlp.forward(&h)?;
        self.mlp_norm.forward(&(h + out)?)
    }
}

/// Self-attention over the queries followed by cross-attention to a second
/// sequence.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attention: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub mlp: Mlp,
    pub mlp_norm: LayerNorm,
}

impl DecoderBlock {
    pub fn new(scope: &Scope, hidden: usize, heads: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            self_attention: MultiHeadAttention::new(&scope.pp("self_attention"), hidden, heads)?,
            self_norm: LayerNorm::new(&scope.pp("self_norm"), hidden)?,
            cross_attention: MultiHeadAttention::new(&scope.pp("cross_attention"), hidden, heads)?,
            cross_norm: LayerNorm::new(&scope.pp("cross_norm"), hidden)?,
            mlp: Mlp::new(&scope.pp("mlp"), hidden, ratio)?,
            mlp_norm: LayerNorm::new(&scope.pp("mlp_norm"), hidden)?,
        })
    }

    pub fn forward(
        &self,
        queries: &Tensor,
        query_mask: Option<&Tensor>,
        keys_values: &Tensor,
        key_mask: Option<&Tensor>,
        capture: Option<&mut AttentionCapture>,
    ) -> Result<Tensor> {
        let attn = self
            .self_attention
            .forward(queries, queries, query_mask, None)?;
        let h = self.self_norm.forward(&(queries + attn)?)?;
        let cross = self
            .cross_attention
            .forward(&h, keys_values, key_mask, capture)?;
        let h = self.cross_norm.forward(&(h + cross)?)?;
        let out = self.mlp.forward(&h)?;
        self.mlp_norm.forward(&(h + out)?)
    }
}
