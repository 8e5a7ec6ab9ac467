//! Attention encoder mapping look-back windows to per-asset embeddings.
//!
//! Input is a batch of normalized windows `[B, N, tau, F]`; output is
//! `[B, N, d_s]`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Self-attention over the time steps of each asset separately.
    Temporal,
    /// Self-attention across assets within each time step.
    Variate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub mode: AttentionMode,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub t_pred: usize,
    pub d_s: usize,
    pub dropout: f64,
    /// Constant multiplier applied to the normalized window before the
    /// input projection.
    pub input_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mode: AttentionMode::Variate,
            d_model: 64,
            heads: 4,
            layers: 2,
            t_pred: 4,
            d_s: 64,
            dropout: 0.1,
            input_scale: 10.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, lookback: usize) -> Result<()> {
        for (field, v) in [
            ("encoder.d_model", self.d_model),
            ("encoder.heads", self.heads),
            ("encoder.layers", self.layers),
            ("encoder.t_pred", self.t_pred),
            ("encoder.d_s", self.d_s),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(
                "encoder.heads",
                format!("d_model {} not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if self.t_pred > lookback {
            return Err(Error::config(
                "encoder.t_pred",
                format!("{} exceeds the look-back window {lookback}", self.t_pred),
            ));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::config("encoder.input_scale", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("encoder.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: store.register_weight(&format!("{name}.w"), &[fan_in, fan_out], fan_in, rng)?,
            b: store.register_zeros(&format!("{name}.b"), &[fan_out])?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register_full(&format!("{name}.gain"), &[dim], 1.0)?,
            bias: store.register_zeros(&format!("{name}.bias"), &[dim])?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm_last(x, LAYER_NORM_EPS)?;
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul(n, gain)?;
        g.add(y, bias)
    }
}

#[derive(Debug, Clone)]
struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

/// Parameters of the encoder, registered in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    lookback: usize,
    n_features: usize,
    input: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    pool_query: ParamId,
    head1: Linear,
    head2: Linear,
    head_norm: LayerNorm,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[B, N, d_s]`.
    pub embeddings: Var,
    /// Temporal pooling weights, `[B * N, T_pred]`.
    pub pool_weights: Var,
    /// Attention nodes, one per head per layer.
    pub attention: Vec<Var>,
}

struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?)?;
        g.mul(x, m)
    }
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        config: EncoderConfig,
        lookback: usize,
        n_features: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(lookback)?;
        if n_features == 0 {
            return Err(Error::config("data", "feature schema is empty"));
        }
        let d = config.d_model;
        let hidden = 2 * d;
        let input = Linear::new(store, "encoder.input", n_features, d, rng)?;
        let pos = store.register_weight("encoder.pos", &[lookback, d], d, rng)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("encoder.layer{l}");
            blocks.push(Block {
                q: Linear::new(store, &format!("{p}.q"), d, d, rng)?,
                k: Linear::new(store, &format!("{p}.k"), d, d, rng)?,
                v: Linear::new(store, &format!("{p}.v"), d, d, rng)?,
                o: Linear::new(store, &format!("{p}.o"), d, d, rng)?,
                norm1: LayerNorm::new(store, &format!("{p}.norm1"), d)?,
                ff1: Linear::new(store, &format!("{p}.ff1"), d, hidden, rng)?,
                ff2: Linear::new(store, &format!("{p}.ff2"), hidden, d, rng)?,
                norm2: LayerNorm::new(store, &format!("{p}.norm2"), d)?,
            });
        }
        let pool_query = store.register_weight("encoder.pool_query", &[d, 1], d, rng)?;
        let head1 = Linear::new(store, "encoder.ffn1", d, d, rng)?;
        let head2 = Linear::new(store, "encoder.ffn2", d, config.d_s, rng)?;
        let head_norm = LayerNorm::new(store, "encoder.ffn_norm", config.d_s)?;
        Ok(Self {
            config,
            lookback,
            n_features,
            input,
            pos,
            blocks,
            pool_query,
            head1,
            head2,
            head_norm,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Run the encoder on `input` of shape `[B, N, tau, F]`. Passing an rng
    /// enables dropout at the configured rate.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<EncoderOutput> {
        let (h, attention, b, n) = self.hidden(g, store, input, dropout_rng)?;
        let d = self.config.d_model;
        let tp = self.config.t_pred;
        // temporal pooling with a learned query
        let q = g.param(store, self.pool_query);
        let scores = g.matmul(h, q)?;
        let scores = g.reshape(scores, &[b * n, tp])?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let pool_weights = g.softmax_last(scores)?;
        let wts = g.reshape(pool_weights, &[b * n, 1, tp])?;
        let pooled = g.matmul(wts, h)?;
        let pooled = g.reshape(pooled, &[b * n, d])?;
        // feed-forward block
        let z = self.head1.forward(g, store, pooled)?;
        let z = g.tanh(z)?;
        let z = self.head2.forward(g, store, z)?;
        let e = self.head_norm.forward(g, store, z)?;
        let embeddings = g.reshape(e, &[b, n, self.config.d_s])?;
        Ok(EncoderOutput {
            embeddings,
            pool_weights,
            attention,
        })
    }

    /// Hidden states `[B * N, T_pred, d_model]` and attention nodes.
    fn hidden(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var, Vec<Var>, usize, usize)> {
        let s = g.shape(input).to_vec();
        if s.len() != 4 || s[2] != self.lookback || s[3] != self.n_features {
            return Err(Error::shape(
                "encoder",
                format!(
                    "expected [B, N, {}, {}], got {s:?}",
                    self.lookback, self.n_features
                ),
            ));
        }
        let (b, n, tau, f) = (s[0], s[1], s[2], s[3]);
        let d = self.config.d_model;
        let mut drop = Dropout {
            rate: self.config.dropout,
            rng: dropout_rng,
        };
        let input = g.scale(input, self.config.input_scale)?;
        let pos = g.param(store, self.pos);
        // tokens: [batch, seq, d]
        let tokens = match self.config.mode {
            AttentionMode::Temporal => {
                let x = g.reshape(input, &[b * n, tau, f])?;
                let x = self.input.forward(g, store, x)?;
                g.add(x, pos)?
            }
            AttentionMode::Variate => {
                let x = g.swap_axes(input, 1, 2)?;
                let x = self.input.forward(g, store, x)?;
                // broadcast the [tau, d] table over assets: [tau, N, 1] x [tau, 1, d]
                let ones = g.constant(Tensor::full(&[tau, n, 1], 1.0))?;
                let p = g.reshape(pos, &[tau, 1, d])?;
                let p = g.matmul(ones, p)?;
                let x = g.add(x, p)?;
                g.reshape(x, &[b * tau, n, d])?
            }
        };
        let mut x = tokens;
        let mut attention = Vec::new();
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for block in &self.blocks {
            let q = block.q.forward(g, store, x)?;
            let k = block.k.forward(g, store, x)?;
            let v = block.v.forward(g, store, x)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let last = g.shape(q).len() - 1;
                let qh = g.slice(q, last, hd * dh, dh)?;
                let kh = g.slice(k, last, hd * dh, dh)?;
                let vh = g.slice(v, last, hd * dh, dh)?;
                let a = g.attention(qh, kh, vh, scale)?;
                attention.push(a);
                outs.push(a);
            }
            let cat = if heads == 1 {
                outs[0]
            } else {
                let last = g.shape(outs[0]).len() - 1;
                g.concat(&outs, last)?
            };
            let att = block.o.forward(g, store, cat)?;
            let att = drop.apply(g, att)?;
            let r = g.add(x, att)?;
            let x1 = block.norm1.forward(g, store, r)?;
            let hdn = block.ff1.forward(g, store, x1)?;
            let hdn = g.tanh(hdn)?;
            let ff = block.ff2.forward(g, store, hdn)?;
            let ff = drop.apply(g, ff)?;
            let r = g.add(x1, ff)?;
            x = block.norm2.forward(g, store, r)?;
        }
        let seq = match self.config.mode {
            AttentionMode::Temporal => x,
            AttentionMode::Variate => {
                let y = g.reshape(x, &[b, tau, n, d])?;
                let y = g.swap_axes(y, 1, 2)?;
                g.reshape(y, &[b * n, tau, d])?
            }
        };
        let tp = self.config.t_pred;
        let h = g.slice(seq, 1, tau - tp, tp)?;
        Ok((h, attention, b, n))
    }
}
