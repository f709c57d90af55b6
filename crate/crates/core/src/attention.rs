//! Multi-head attention, the hybrid self/cross attention layer, and a
//! post-LN transformer encoder block with sinusoidal positions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{const_param, join, Linear, Module};
use crate::tensor::{Elem, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Scaled dot-product attention split over `heads` heads of width
/// `d_model / heads`.
#[derive(Debug, Clone)]
pub struct AttentionParams<E: Elem = f32> {
    pub heads: usize,
    pub d_model: usize,
    pub query: Linear<E>,
    pub key: Linear<E>,
    pub value: Linear<E>,
    pub output: Linear<E>,
}

impl<E: Elem> AttentionParams<E> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {d_model} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            d_model,
            query: Linear::new(rng, d_model, d_model),
            key: Linear::new(rng, d_model, d_model),
            value: Linear::new(rng, d_model, d_model),
            output: Linear::new(rng, d_model, d_model),
        })
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.heads
    }
}

impl<E: Elem> Module<E> for AttentionParams<E> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.query.collect_params(&join(prefix, "query"), out);
        self.key.collect_params(&join(prefix, "key"), out);
        self.value.collect_params(&join(prefix, "value"), out);
        self.output.collect_params(&join(prefix, "output"), out);
    }
}

/// Attention output together with the per-head weight matrices (`T_q x T_k`).
pub struct AttentionOutput<E: Elem> {
    pub output: Tensor<E>,
    pub weights: Vec<Tensor<E>>,
}

fn check_width<E: Elem>(what: &str, t: &Tensor<E>, d: usize) -> Result<usize> {
    match t.shape() {
        [rows, w] if *w == d => Ok(*rows),
        s => Err(Error::shape(format!("{what}: expected [_, {d}], got {s:?}"))),
    }
}

pub fn multi_head_attention_with_weights<E: Elem>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    params: &AttentionParams<E>,
) -> Result<AttentionOutput<E>> {
    let d = params.d_model;
    check_width("query", q, d)?;
    let tk = check_width("key", k, d)?;
    if check_width("value", v, d)? != tk {
        return Err(Error::shape("key and value row counts differ"));
    }
    let qp = params.query.forward(q)?;
    let kp = params.key.forward(k)?;
    let vp = params.value.forward(v)?;
    let dh = params.head_width();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = qp.narrow(1, h * dh, dh)?;
        let kh = kp.narrow(1, h * dh, dh)?;
        let vh = vp.narrow(1, h * dh, dh)?;
        let attn = qh.matmul(&kh.transpose()?)?.scale(scale)?.softmax(1)?;
        heads.push(attn.matmul(&vh)?);
        weights.push(attn);
    }
    let merged = if heads.len() == 1 {
        heads.pop().expect("one head")
    } else {
        Tensor::concat(&heads, 1)?
    };
    Ok(AttentionOutput {
        output: params.output.forward(&merged)?,
        weights,
    })
}

/// `Q: T_q x d`, `K, V: T_k x d` to `T_q x d`.
pub fn multi_head_attention<E: Elem>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    params: &AttentionParams<E>,
) -> Result<Tensor<E>> {
    Ok(multi_head_attention_with_weights(q, k, v, params)?.output)
}

/// The four attentions of the hybrid layer.
#[derive(Debug, Clone)]
pub struct HanLayerParams<E: Elem = f32> {
    pub visual_self: AttentionParams<E>,
    pub visual_cross: AttentionParams<E>,
    pub audio_self: AttentionParams<E>,
    pub audio_cross: AttentionParams<E>,
}

impl<E: Elem> HanLayerParams<E> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_model: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            visual_self: AttentionParams::new(rng, d_model, heads)?,
            visual_cross: AttentionParams::new(rng, d_model, heads)?,
            audio_self: AttentionParams::new(rng, d_model, heads)?,
            audio_cross: AttentionParams::new(rng, d_model, heads)?,
        })
    }

    pub fn zero_output_projections(&self) {
        for a in [&self.visual_self, &self.visual_cross, &self.audio_self, &self.audio_cross] {
            a.output.zero_out();
        }
    }
}

impl<E: Elem> Module<E> for HanLayerParams<E> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.visual_self.collect_params(&join(prefix, "visual_self"), out);
        self.visual_cross.collect_params(&join(prefix, "visual_cross"), out);
        self.audio_self.collect_params(&join(prefix, "audio_self"), out);
        self.audio_cross.collect_params(&join(prefix, "audio_cross"), out);
    }
}

/// Each stream attends to itself and to the other stream; both results are
/// added to the input residual.
pub fn han_layer<E: Elem>(
    f_v: &Tensor<E>,
    f_a: &Tensor<E>,
    params: &HanLayerParams<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    if f_v.shape() != f_a.shape() {
        return Err(Error::shape(format!(
            "visual {:?} and audio {:?} streams differ in shape",
            f_v.shape(),
            f_a.shape()
        )));
    }
    let v = Tensor::add_n(&[
        f_v.clone(),
        multi_head_attention(f_v, f_v, f_v, &params.visual_self)?,
        multi_head_attention(f_v, f_a, f_a, &params.visual_cross)?,
    ])?;
    let a = Tensor::add_n(&[
        f_a.clone(),
        multi_head_attention(f_a, f_a, f_a, &params.audio_self)?,
        multi_head_attention(f_a, f_v, f_v, &params.audio_cross)?,
    ])?;
    Ok((v, a))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub blocks: usize,
    pub positional_encoding: bool,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            ffn_multiplier: 4,
            blocks: 5,
            positional_encoding: true,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.ffn_multiplier == 0 {
            return Err(Error::Config("feed-forward width multiplier must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlockParams<E: Elem = f32> {
    pub attention: AttentionParams<E>,
    pub norm1_gain: Tensor<E>,
    pub norm1_bias: Tensor<E>,
    pub ffn_in: Linear<E>,
    pub ffn_out: Linear<E>,
    pub norm2_gain: Tensor<E>,
    pub norm2_bias: Tensor<E>,
    pub dropout: f64,
}

impl<E: Elem> EncoderBlockParams<E> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_model: usize, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.ffn_multiplier * d_model;
        Ok(Self {
            attention: AttentionParams::new(rng, d_model, cfg.heads)?,
            norm1_gain: const_param(&[d_model], 1.0),
            norm1_bias: const_param(&[d_model], 0.0),
            ffn_in: Linear::new(rng, d_model, hidden),
            ffn_out: Linear::new(rng, hidden, d_model),
            norm2_gain: const_param(&[d_model], 1.0),
            norm2_bias: const_param(&[d_model], 0.0),
            dropout: cfg.dropout,
        })
    }

    pub fn d_model(&self) -> usize {
        self.attention.d_model
    }
}

impl<E: Elem> Module<E> for EncoderBlockParams<E> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.attention.collect_params(&join(prefix, "attention"), out);
        out.push((join(prefix, "norm1.gain"), self.norm1_gain.clone()));
        out.push((join(prefix, "norm1.bias"), self.norm1_bias.clone()));
        self.ffn_in.collect_params(&join(prefix, "ffn_in"), out);
        self.ffn_out.collect_params(&join(prefix, "ffn_out"), out);
        out.push((join(prefix, "norm2.gain"), self.norm2_gain.clone()));
        out.push((join(prefix, "norm2.bias"), self.norm2_bias.clone()));
    }
}

/// Inverted dropout. Identity when `rng` is `None` (evaluation) or `p == 0`.
pub fn dropout<E: Elem, R: Rng + ?Sized>(x: &Tensor<E>, p: f64, rng: Option<&mut R>) -> Result<Tensor<E>> {
    let Some(rng) = rng else { return Ok(x.clone()) };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<E> = (0..x.numel())
        .map(|_| E::from_f64(if rng.random::<f64>() < p { 0.0 } else { keep }))
        .collect();
    x.mul(&Tensor::new(x.shape().to_vec(), mask)?)
}

/// `G~ = LN(G + Attn(G, G, G))`, then `LN(G~ + FFN(G~))`.
pub fn encoder_block<E: Elem>(g: &Tensor<E>, params: &EncoderBlockParams<E>) -> Result<Tensor<E>> {
    encoder_block_train::<E, rand_chacha::ChaCha8Rng>(g, params, None)
}

pub fn encoder_block_train<E: Elem, R: Rng + ?Sized>(
    g: &Tensor<E>,
    params: &EncoderBlockParams<E>,
    mut rng: Option<&mut R>,
) -> Result<Tensor<E>> {
    check_width("encoder input", g, params.d_model())?;
    let attn = multi_head_attention(g, g, g, &params.attention)?;
    let attn = dropout(&attn, params.dropout, rng.as_deref_mut())?;
    let mid = g.add(&attn)?.layer_norm(&params.norm1_gain, &params.norm1_bias, LN_EPS)?;
    let ff = params.ffn_out.forward(&params.ffn_in.forward(&mid)?.relu()?)?;
    let ff = dropout(&ff, params.dropout, rng)?;
    mid.add(&ff)?.layer_norm(&params.norm2_gain, &params.norm2_bias, LN_EPS)
}

/// Interleaved sinusoidal table: even columns `sin(t / 10000^(2i/d))`, odd
/// columns the matching cosine.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for pos in 0..t {
        for col in 0..d {
            let pair = (col / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            out[pos * d + col] = if col % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

pub fn positional_encoding_tensor<E: Elem>(t: usize, d: usize) -> Tensor<E> {
    Tensor::from_f64(vec![t, d], &positional_encoding(t, d)).expect("table shape")
}
