//! Autoregressive transformer decoder.
//!
//! One parameter set serves every memory it is pointed at: during training
//! the same decoder consumes the final-layer memory and, for the
//! regularized regime, the intermediate tap memory. Parameter sharing is
//! structural — both passes leaf the identical named parameters onto the
//! tape, so gradients from the two passes accumulate into one buffer.

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::fwd::{
    attention, attention_core, causal_mask, feed_forward, layer_norm_p, linear,
    register_attention_params, register_ffn_params, register_layer_norm_params,
    sinusoidal_pe, sinusoidal_pe_row, ForwardCtx, Mode,
};
use crate::params::{Init, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_p: f64,
    /// Softmax width including blank, sos, eos.
    pub vocab_size: usize,
}

impl DecoderConfig {
    pub fn desk_default(vocab_size: usize) -> Self {
        DecoderConfig {
            num_layers: 2,
            d_model: 32,
            num_heads: 2,
            ffn_dim: 64,
            dropout_p: 0.1,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.d_model == 0 || self.ffn_dim == 0 {
            return Err(Error::config("decoder dimensions must be positive"));
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::config(format!(
                "decoder.num_heads={} must divide d_model={}",
                self.num_heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("decoder.dropout_p must be in [0,1)"));
        }
        if self.vocab_size < 4 {
            return Err(Error::config(
                "decoder.vocab_size must cover blank, sos, eos and content",
            ));
        }
        Ok(())
    }
}

fn layer_prefix(i: usize) -> String {
    format!("dec.l{i:02}")
}

pub fn register_decoder_params<F: Scalar>(
    store: &mut ParamStore<F>,
    cfg: &DecoderConfig,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    store.register(
        "dec.embed",
        &[v, d],
        Init::GlorotUniform { fan_in: v, fan_out: d },
    )?;
    for i in 0..cfg.num_layers {
        let p = layer_prefix(i);
        register_layer_norm_params(store, &format!("{p}.sa.ln"), d)?;
        register_attention_params(store, &format!("{p}.sa"), d)?;
        register_layer_norm_params(store, &format!("{p}.ca.ln"), d)?;
        register_attention_params(store, &format!("{p}.ca"), d)?;
        register_ffn_params(store, &format!("{p}.ffn"), d, cfg.ffn_dim)?;
    }
    register_layer_norm_params(store, "dec.final_ln", d)?;
    store.register(
        "dec.out.w",
        &[d, v],
        Init::GlorotUniform { fan_in: d, fan_out: v },
    )?;
    store.register("dec.out.b", &[v], Init::Zeros)?;
    Ok(())
}

/// Teacher-forced pass: sos-prefixed targets in, per-position logits out,
/// shape `[(L+1) x vocab_size]`.
pub fn decoder_forward<F: Scalar>(
    fx: &ForwardCtx<F>,
    cfg: &DecoderConfig,
    memory: &Tensor<F>,
    body: &[usize],
    vocab: &Vocab,
) -> Result<Tensor<F>> {
    if memory.rank() != 2 || memory.shape()[1] != cfg.d_model {
        return Err(Error::ShapeMismatch {
            op: "decoder_forward",
            lhs: memory.shape().to_vec(),
            rhs: vec![0, cfg.d_model],
        });
    }
    vocab.validate_body(body)?;
    let d = cfg.d_model;
    let mut ids = Vec::with_capacity(body.len() + 1);
    ids.push(vocab.sos());
    ids.extend_from_slice(body);
    let len = ids.len();

    let embed = fx.param("dec.embed")?;
    let x = Tensor::embedding(&embed, &ids)?.scale((d as f64).sqrt());
    let pe = fx.tape().leaf_f64(&sinusoidal_pe(len, d), &[len, d])?;
    let mut x = fx.dropout(&x.add(&pe)?, cfg.dropout_p)?;
    let mask = causal_mask(fx.tape(), len)?;

    for i in 0..cfg.num_layers {
        let p = layer_prefix(i);
        let sa_in = layer_norm_p(fx, &x, &format!("{p}.sa.ln"))?;
        let sa = attention(fx, &format!("{p}.sa"), &sa_in, &sa_in, cfg.num_heads, Some(&mask))?;
        x = x.add(&fx.dropout(&sa, cfg.dropout_p)?)?;

        let ca_in = layer_norm_p(fx, &x, &format!("{p}.ca.ln"))?;
        let ca = attention(fx, &format!("{p}.ca"), &ca_in, memory, cfg.num_heads, None)?;
        x = x.add(&fx.dropout(&ca, cfg.dropout_p)?)?;

        let ffn = feed_forward(fx, &x, &format!("{p}.ffn"), cfg.dropout_p)?;
        x = x.add(&ffn)?;
    }
    let x = layer_norm_p(fx, &x, "dec.final_ln")?;
    linear(fx, &x, "dec.out")
}

// ---------------------------------------------------------------------------
// Incremental decoding
// ---------------------------------------------------------------------------

/// Encoder memory extracted to a plain buffer so decode steps can run on
/// short-lived tapes.
#[derive(Debug, Clone)]
pub struct MemoryData<F> {
    pub rows: usize,
    pub d: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> MemoryData<F> {
    pub fn from_tensor(t: &Tensor<F>) -> Self {
        MemoryData {
            rows: t.shape()[0],
            d: t.shape()[1],
            data: t.data(),
        }
    }
}

/// Per-layer self-attention key/value rows for the positions fed so far.
#[derive(Debug, Clone)]
pub struct StepCache<F> {
    pos: usize,
    layers: Vec<LayerKv<F>>,
}

#[derive(Debug, Clone)]
struct LayerKv<F> {
    k: Vec<F>,
    v: Vec<F>,
}

impl<F: Scalar> StepCache<F> {
    pub fn positions_fed(&self) -> usize {
        self.pos
    }
}

/// Runs the decoder one position at a time. Each step records a fresh
/// throwaway tape in eval mode; the numerics per position are those of
/// `decoder_forward`.
pub struct DecoderStepper<'a, F: Scalar> {
    params: &'a ParamStore<F>,
    cfg: &'a DecoderConfig,
    memory: MemoryData<F>,
}

impl<'a, F: Scalar> DecoderStepper<'a, F> {
    pub fn new(
        params: &'a ParamStore<F>,
        cfg: &'a DecoderConfig,
        memory: MemoryData<F>,
    ) -> Result<Self> {
        cfg.validate()?;
        if memory.d != cfg.d_model {
            return Err(Error::ShapeMismatch {
                op: "decoder_step",
                lhs: vec![memory.rows, memory.d],
                rhs: vec![0, cfg.d_model],
            });
        }
        if memory.rows == 0 {
            return Err(Error::contract("decoder_step: empty memory"));
        }
        Ok(DecoderStepper { params, cfg, memory })
    }

    pub fn begin(&self) -> StepCache<F> {
        StepCache {
            pos: 0,
            layers: vec![
                LayerKv { k: Vec::new(), v: Vec::new() };
                self.cfg.num_layers
            ],
        }
    }

    /// Feed `token` at the next position; returns log-probabilities over the
    /// vocabulary for the position after it.
    pub fn step(&self, cache: &mut StepCache<F>, token: usize) -> Result<Vec<f64>> {
        let cfg = self.cfg;
        let d = cfg.d_model;
        if token >= cfg.vocab_size {
            return Err(Error::contract(format!(
                "token {token} outside vocabulary {}",
                cfg.vocab_size
            )));
        }
        let pos = cache.pos;
        let fx = ForwardCtx::new(self.params, Mode::Eval, 0);

        let embed = self.params.get("dec.embed")?;
        let scale = F::from_f64((d as f64).sqrt());
        let pe = sinusoidal_pe_row(pos, d);
        let row: Vec<F> = embed.data[token * d..(token + 1) * d]
            .iter()
            .zip(&pe)
            .map(|(&e, &p)| e * scale + F::from_f64(p))
            .collect();
        let mut x = fx.tape().leaf(row, &[1, d])?;
        let mem = fx
            .tape()
            .leaf(self.memory.data.clone(), &[self.memory.rows, d])?;

        for i in 0..cfg.num_layers {
            let p = layer_prefix(i);
            let sa_in = layer_norm_p(&fx, &x, &format!("{p}.sa.ln"))?;
            let q = linear(&fx, &sa_in, &format!("{p}.sa.q"))?;
            let k_new = linear(&fx, &sa_in, &format!("{p}.sa.k"))?;
            let v_new = linear(&fx, &sa_in, &format!("{p}.sa.v"))?;
            cache.layers[i].k.extend(k_new.data());
            cache.layers[i].v.extend(v_new.data());
            let k_all = fx.tape().leaf(cache.layers[i].k.clone(), &[pos + 1, d])?;
            let v_all = fx.tape().leaf(cache.layers[i].v.clone(), &[pos + 1, d])?;
            let sa = attention_core(&q, &k_all, &v_all, cfg.num_heads, None)?;
            let sa = linear(&fx, &sa, &format!("{p}.sa.o"))?;
            x = x.add(&sa)?;

            let ca_in = layer_norm_p(&fx, &x, &format!("{p}.ca.ln"))?;
            let q2 = linear(&fx, &ca_in, &format!("{p}.ca.q"))?;
            let k_mem = linear(&fx, &mem, &format!("{p}.ca.k"))?;
            let v_mem = linear(&fx, &mem, &format!("{p}.ca.v"))?;
            let ca = attention_core(&q2, &k_mem, &v_mem, cfg.num_heads, None)?;
            let ca = linear(&fx, &ca, &format!("{p}.ca.o"))?;
            x = x.add(&ca)?;

            let ffn = feed_forward(&fx, &x, &format!("{p}.ffn"), cfg.dropout_p)?;
            x = x.add(&ffn)?;
        }
        let x = layer_norm_p(&fx, &x, "dec.final_ln")?;
        let logits = linear(&fx, &x, "dec.out")?;
        let lp = logits.log_softmax_rows()?.data_f64();
        cache.pos += 1;
        Ok(lp)
    }
}

/// Next-token log-probabilities after a sos-prefixed prefix.
///
/// With a cache the call consumes only the last prefix token (the cache must
/// already hold the positions before it); without one the whole prefix is
/// replayed through the same step path.
pub fn decoder_step<F: Scalar>(
    params: &ParamStore<F>,
    cfg: &DecoderConfig,
    memory: &MemoryData<F>,
    prefix: &[usize],
    vocab: &Vocab,
    cache: Option<&mut StepCache<F>>,
) -> Result<Vec<f64>> {
    if prefix.is_empty() {
        return Err(Error::contract("decoder_step: empty prefix"));
    }
    if prefix[0] != vocab.sos() {
        return Err(Error::contract("decoder_step: prefix must start with sos"));
    }
    let stepper = DecoderStepper::new(params, cfg, memory.clone())?;
    match cache {
        Some(c) => {
            if c.positions_fed() != prefix.len() - 1 {
                return Err(Error::contract(format!(
                    "decoder_step: cache holds {} positions for prefix of length {}",
                    c.positions_fed(),
                    prefix.len()
                )));
            }
            stepper.step(c, *prefix.last().unwrap())
        }
        None => {
            let mut c = stepper.begin();
            let mut out = Vec::new();
            for &tok in prefix {
                out = stepper.step(&mut c, tok)?;
            }
            Ok(out)
        }
    }
}
