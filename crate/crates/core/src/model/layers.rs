//! Transformer building blocks. All blocks are pre-norm.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{attention, ops, AttnSegment};
use crate::error::Result;
use crate::Tensor;

/// Standard deviation of the scaled-uniform initializer.
pub const INIT_STD: f64 = 0.02;

pub(crate) struct Init {
    pub rng: ChaCha8Rng,
}

impl Init {
    pub fn uniform(&mut self, shape: &[usize]) -> Tensor {
        let a = INIT_STD * 3f64.sqrt();
        let n = shape.iter().product();
        let v = (0..n).map(|_| self.rng.random_range(-a..a)).collect();
        Tensor::param(v, shape).expect("init shape")
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Tensor {
        Tensor::param(vec![value; shape.iter().product()], shape).expect("init shape")
    }
}

/// Collects `(name, tensor)` pairs in a fixed order.
pub(crate) type ParamSink = Vec<(String, Tensor)>;

/// Dropout state threaded through a forward pass.
pub struct ForwardCtx<'a> {
    rng: Option<&'a mut dyn RngCore>,
    p: f64,
}

impl<'a> ForwardCtx<'a> {
    /// No dropout.
    pub fn eval() -> Self {
        Self { rng: None, p: 0.0 }
    }

    pub fn train(p: f64, rng: &'a mut dyn RngCore) -> Self {
        Self { rng: Some(rng), p }
    }

    pub fn dropout(&mut self, x: &Tensor) -> Tensor {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => ops::dropout(x, self.p, rng),
            _ => x.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub(crate) fn new(init: &mut Init, d_in: usize, d_out: usize) -> Self {
        Self { weight: init.uniform(&[d_in, d_out]), bias: init.constant(&[d_out], 0.0) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::add_row(&ops::matmul(x, &self.weight)?, &self.bias)
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut ParamSink) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub(crate) fn new(init: &mut Init, d: usize) -> Self {
        Self { gain: init.constant(&[d], 1.0), bias: init.constant(&[d], 0.0) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.gain, &self.bias, ops::LAYER_NORM_EPS)
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut ParamSink) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub(crate) fn new(init: &mut Init, d: usize, n_heads: usize) -> Self {
        Self {
            query: Linear::new(init, d, d),
            key: Linear::new(init, d, d),
            value: Linear::new(init, d, d),
            output: Linear::new(init, d, d),
            n_heads,
        }
    }

    pub fn forward(&self, xq: &Tensor, xkv: &Tensor, segments: &[AttnSegment], causal: bool) -> Result<Tensor> {
        let q = self.query.forward(xq)?;
        let k = self.key.forward(xkv)?;
        let v = self.value.forward(xkv)?;
        self.output.forward(&attention(&q, &k, &v, self.n_heads, segments, causal)?)
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut ParamSink) {
        self.query.collect(&format!("{prefix}.query"), out);
        self.key.collect(&format!("{prefix}.key"), out);
        self.value.collect(&format!("{prefix}.value"), out);
        self.output.collect(&format!("{prefix}.output"), out);
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub(crate) fn new(init: &mut Init, d: usize, d_ff: usize) -> Self {
        Self { up: Linear::new(init, d, d_ff), down: Linear::new(init, d_ff, d) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&ops::gelu(&self.up.forward(x)?))
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut ParamSink) {
        self.up.collect(&format!("{prefix}.up"), out);
        self.down.collect(&format!("{prefix}.down"), out);
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub(crate) fn new(init: &mut Init, d: usize, n_heads: usize, d_ff: usize) -> Self {
        Self {
            norm_attn: LayerNorm::new(init, d),
            attn: MultiHeadAttention::new(init, d, n_heads),
            norm_ff: LayerNorm::new(init, d),
            ff: FeedForward::new(init, d, d_ff),
        }
    }

    pub fn forward(&self, x: &Tensor, segments: &[AttnSegment], ctx: &mut ForwardCtx) -> Result<Tensor> {
        let h = self.norm_attn.forward(x)?;
        let x = ops::add(x, &ctx.dropout(&self.attn.forward(&h, &h, segments, false)?))?;
        let h = self.norm_ff.forward(&x)?;
        ops::add(&x, &ctx.dropout(&self.ff.forward(&h)?))
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut ParamSink) {
        self.norm_attn.collect(&format!("{prefix}.norm_attn"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.norm_ff.collect(&format!("{prefix}.norm_ff"), out);
        self.ff.collect(&format!("{prefix}.ff"), out);
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub(crate) fn new(init: &mut Init, d: usize, n_heads: usize, d_ff: usize) -> Self {
        Self {
            norm_self: LayerNorm::new(init, d),
            self_attn: MultiHeadAttention::new(init, d, n_heads),
            norm_cross: LayerNorm::new(init, d),
            cross_attn: MultiHeadAttention::new(init, d, n_heads),
            norm_ff: LayerNorm::new(init, d),
            ff: FeedForward::new(init, d, d_ff),
        }
    }

    pub fn forward(
        &self,
        y: &Tensor,
        memory: &Tensor,
        self_segments: &[AttnSegment],
        cross_segments: &[AttnSegment],
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        let h = self.norm_self.forward(y)?;
        let y = ops::add(y, &ctx.dropout(&self.self_attn.forward(&h, &h, self_segments, true)?))?;
        let h = self.norm_cross.forward(&y)?;
        let y = ops::add(&y, &ctx.dropout(&self.cross_attn.forward(&h, memory, cross_segments, false)?))?;
        let h = self.norm_ff.forward(&y)?;
        ops::add(&y, &ctx.dropout(&self.ff.forward(&h)?))
    }

    pub(crate) fn collect(&self, prefix: &str, out: &mut ParamSink) {
        self.norm_self.collect(&format!("{prefix}.norm_self"), out);
        self.self_attn.collect(&format!("{prefix}.self_attn"), out);
        self.norm_cross.collect(&format!("{prefix}.norm_cross"), out);
        self.cross_attn.collect(&format!("{prefix}.cross_attn"), out);
        self.norm_ff.collect(&format!("{prefix}.norm_ff"), out);
        self.ff.collect(&format!("{prefix}.ff"), out);
    }
}
