//! Conformer-style encoder with a configurable intermediate tap.
//!
//! Each layer computes, in order:
//!   x~  = x  + 1/2 FFN(x)
//!   x'  = x~ + MHSA(x~)
//!   x'' = x' + Conv(x')
//!   y   = Layernorm(x'') + 1/2 FFN(x'')     (default "parallel" form)
//!
//! The tap exposes the output y_i of one layer i (1 <= i < N) as a second
//! memory. It is read-only: configuring it changes neither the computation
//! nor the parameter count.

use crate::error::{Error, Result};
use crate::fwd::{
    attention, feed_forward, layer_norm_p, linear, register_attention_params,
    register_ffn_params, register_layer_norm_params, sinusoidal_pe, ForwardCtx,
};
use crate::corpus::FeatureSequence;
use crate::params::{Init, ParamStore};
use crate::tensor::{Scalar, Tensor};
use std::cell::Cell;

/// Placement of the block-final layer norm relative to the closing
/// half-step feed-forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalNorm {
    /// y = LN(x'') + 1/2 FFN(x'') — the norm and the feed-forward act on
    /// x'' in parallel.
    Parallel,
    /// y = LN(x'' + 1/2 FFN(x'')) — the conventional block-closing norm,
    /// kept behind a switch so the two forms can be compared.
    Wrapped,
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub dropout_p: f64,
    pub subsample_factor: usize,
    pub feat_dim: usize,
    /// 1-based tap layer, 1 <= i < num_layers.
    pub ilo_layer: Option<usize>,
    pub final_norm: FinalNorm,
}

impl EncoderConfig {
    pub fn desk_default(feat_dim: usize) -> Self {
        EncoderConfig {
            num_layers: 6,
            d_model: 32,
            num_heads: 2,
            ffn_dim: 64,
            conv_kernel: 7,
            dropout_p: 0.1,
            subsample_factor: 4,
            feat_dim,
            ilo_layer: None,
            final_norm: FinalNorm::Parallel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.d_model == 0 || self.ffn_dim == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::config(format!(
                "encoder.num_heads={} must divide d_model={}",
                self.num_heads, self.d_model
            )));
        }
        if self.conv_kernel % 2 == 0 || self.conv_kernel == 0 {
            return Err(Error::config(format!(
                "encoder.conv_kernel={} must be odd",
                self.conv_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("encoder.dropout_p must be in [0,1)"));
        }
        if self.subsample_factor == 0 {
            return Err(Error::config("encoder.subsample_factor must be positive"));
        }
        if let Some(i) = self.ilo_layer {
            if i < 1 || i >= self.num_layers {
                return Err(Error::config(format!(
                    "encoder.ilo_layer={} must satisfy 1 <= i < {}",
                    i, self.num_layers
                )));
            }
        }
        Ok(())
    }
}

/// Intermediate activations of one layer, all `[T' x d_model]`.
pub struct EncoderLayerState<F: Scalar> {
    pub input: Tensor<F>,
    pub after_ffn: Tensor<F>,
    pub after_attn: Tensor<F>,
    pub after_conv: Tensor<F>,
    pub output: Tensor<F>,
}

/// The tap memory, instrumented: every read through `get()` is counted so
/// decode paths can prove they never touch it.
pub struct IloMemory<F: Scalar> {
    inner: Tensor<F>,
    hits: Cell<u64>,
}

impl<F: Scalar> IloMemory<F> {
    fn new(inner: Tensor<F>) -> Self {
        IloMemory {
            inner,
            hits: Cell::new(0),
        }
    }

    pub fn get(&self) -> &Tensor<F> {
        self.hits.set(self.hits.get() + 1);
        &self.inner
    }

    pub fn access_count(&self) -> u64 {
        self.hits.get()
    }

    pub fn shape(&self) -> &[usize] {
        self.inner.shape()
    }
}

pub struct EncoderOutput<F: Scalar> {
    pub final_memory: Tensor<F>,
    pub ilo_memory: Option<IloMemory<F>>,
    pub frame_count: usize,
}

impl<F: Scalar> EncoderOutput<F> {
    pub fn ilo_access_count(&self) -> u64 {
        self.ilo_memory.as_ref().map_or(0, |m| m.access_count())
    }
}

fn layer_prefix(i: usize) -> String {
    format!("enc.l{i:02}")
}

pub fn register_encoder_params<F: Scalar>(
    store: &mut ParamStore<F>,
    cfg: &EncoderConfig,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let in_dim = cfg.subsample_factor * cfg.feat_dim;
    store.register(
        "enc.front.w",
        &[in_dim, d],
        Init::GlorotUniform { fan_in: in_dim, fan_out: d },
    )?;
    store.register("enc.front.b", &[d], Init::Zeros)?;
    for i in 0..cfg.num_layers {
        let p = layer_prefix(i);
        register_ffn_params(store, &format!("{p}.ffn1"), d, cfg.ffn_dim)?;
        register_layer_norm_params(store, &format!("{p}.attn.ln"), d)?;
        register_attention_params(store, &format!("{p}.attn"), d)?;
        store.register(
            &format!("{p}.conv.in.w"),
            &[d, 2 * d],
            Init::GlorotUniform { fan_in: d, fan_out: 2 * d },
        )?;
        store.register(&format!("{p}.conv.in.b"), &[2 * d], Init::Zeros)?;
        store.register(
            &format!("{p}.conv.kernel"),
            &[cfg.conv_kernel, d],
            Init::GlorotUniform { fan_in: cfg.conv_kernel, fan_out: cfg.conv_kernel },
        )?;
        register_layer_norm_params(store, &format!("{p}.conv.ln"), d)?;
        store.register(
            &format!("{p}.conv.out.w"),
            &[d, d],
            Init::GlorotUniform { fan_in: d, fan_out: d },
        )?;
        store.register(&format!("{p}.conv.out.b"), &[d], Init::Zeros)?;
        register_ffn_params(store, &format!("{p}.ffn2"), d, cfg.ffn_dim)?;
        register_layer_norm_params(store, &format!("{p}.out_ln"), d)?;
    }
    Ok(())
}

/// Frame-rate reduction by non-overlapping frame stacking plus a linear
/// projection to d_model, then positional encoding.
pub fn subsample_frontend<F: Scalar>(
    fx: &ForwardCtx<F>,
    cfg: &EncoderConfig,
    feats: &FeatureSequence,
) -> Result<Tensor<F>> {
    let t = feats.len();
    let f = cfg.subsample_factor;
    if t < f {
        return Err(Error::TooShortInput(format!(
            "utterance {}: {} frames < subsample factor {}",
            feats.id, t, f
        )));
    }
    if feats.dim != cfg.feat_dim {
        return Err(Error::ShapeMismatch {
            op: "subsample_frontend",
            lhs: vec![t, feats.dim],
            rhs: vec![t, cfg.feat_dim],
        });
    }
    let t_out = t / f;
    let data: Vec<F> = feats.frames.iter().map(|&v| F::from_f64(v as f64)).collect();
    let mut x = fx.tape().leaf(data, &[t, feats.dim])?;
    if t_out * f < t {
        x = x.slice_rows(0, t_out * f)?;
    }
    let x = x.reshape(&[t_out, f * feats.dim])?;
    let x = linear(fx, &x, "enc.front")?;
    let pe = fx
        .tape()
        .leaf_f64(&sinusoidal_pe(t_out, cfg.d_model), &[t_out, cfg.d_model])?;
    let x = x.add(&pe)?;
    fx.dropout(&x, cfg.dropout_p)
}

/// Convolution sub-block: pointwise expansion -> gated activation ->
/// depthwise conv -> layer norm -> pointwise projection.
fn conv_block<F: Scalar>(
    fx: &ForwardCtx<F>,
    x: &Tensor<F>,
    prefix: &str,
    dropout_p: f64,
) -> Result<Tensor<F>> {
    let d = x.shape()[1];
    let h = linear(fx, x, &format!("{prefix}.in"))?;
    let a = h.narrow_cols(0, d)?;
    let gate = h.narrow_cols(d, d)?.sigmoid();
    let gated = a.mul(&gate)?;
    let kernel = fx.param(&format!("{prefix}.kernel"))?;
    let c = gated.depthwise_conv1d(&kernel)?;
    let n = layer_norm_p(fx, &c, &format!("{prefix}.ln"))?;
    let out = linear(fx, &n, &format!("{prefix}.out"))?;
    fx.dropout(&out, dropout_p)
}

pub fn encoder_layer_forward<F: Scalar>(
    fx: &ForwardCtx<F>,
    cfg: &EncoderConfig,
    layer: usize,
    x: &Tensor<F>,
) -> Result<(Tensor<F>, EncoderLayerState<F>)> {
    if x.rank() != 2 || x.shape()[1] != cfg.d_model {
        return Err(Error::ShapeMismatch {
            op: "encoder_layer_forward",
            lhs: x.shape().to_vec(),
            rhs: vec![0, cfg.d_model],
        });
    }
    let p = layer_prefix(layer);
    let drop = cfg.dropout_p;

    let ffn1 = feed_forward(fx, x, &format!("{p}.ffn1"), drop)?;
    let after_ffn = x.add(&ffn1.scale(0.5))?;

    let attn_in = layer_norm_p(fx, &after_ffn, &format!("{p}.attn.ln"))?;
    let attn = attention(fx, &format!("{p}.attn"), &attn_in, &attn_in, cfg.num_heads, None)?;
    let attn = fx.dropout(&attn, drop)?;
    let after_attn = after_ffn.add(&attn)?;

    let conv = conv_block(fx, &after_attn, &format!("{p}.conv"), drop)?;
    let after_conv = after_attn.add(&conv)?;

    let ffn2 = feed_forward(fx, &after_conv, &format!("{p}.ffn2"), drop)?;
    let output = match cfg.final_norm {
        FinalNorm::Parallel => {
            let normed = layer_norm_p(fx, &after_conv, &format!("{p}.out_ln"))?;
            normed.add(&ffn2.scale(0.5))?
        }
        FinalNorm::Wrapped => {
            let summed = after_conv.add(&ffn2.scale(0.5))?;
            layer_norm_p(fx, &summed, &format!("{p}.out_ln"))?
        }
    };

    let state = EncoderLayerState {
        input: x.clone(),
        after_ffn,
        after_attn,
        after_conv,
        output: output.clone(),
    };
    Ok((output, state))
}

/// Full encoder pass: frontend, N layers, tap capture.
pub fn encoder_forward<F: Scalar>(
    fx: &ForwardCtx<F>,
    cfg: &EncoderConfig,
    feats: &FeatureSequence,
) -> Result<EncoderOutput<F>> {
    cfg.validate()?;
    if feats.is_empty() {
        return Err(Error::TooShortInput(format!("utterance {}: empty", feats.id)));
    }
    let mut x = subsample_frontend(fx, cfg, feats)?;
    let frame_count = x.shape()[0];
    let mut ilo = None;
    for i in 0..cfg.num_layers {
        let (y, _state) = encoder_layer_forward(fx, cfg, i, &x)?;
        if cfg.ilo_layer == Some(i + 1) {
            ilo = Some(y.clone());
        }
        x = y;
    }
    Ok(EncoderOutput {
        final_memory: x,
        ilo_memory: ilo.map(IloMemory::new),
        frame_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fwd::{ForwardCtx, Mode, LN_EPS};
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            d_model: 16,
            num_heads: 2,
            ffn_dim: 12,
            conv_kernel: 3,
            dropout_p: 0.0,
            subsample_factor: 4,
            feat_dim: 5,
            ilo_layer: Some(1),
            final_norm: FinalNorm::Parallel,
        }
    }

    fn feats(id: &str, t: usize, d: usize, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence {
            id: id.to_string(),
            dim: d,
            frames: (0..t * d).map(|_| rng.gen::<f32>() - 0.5).collect(),
        }
    }

    #[test]
    fn layer_preserves_shape() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new(3);
        register_encoder_params(&mut store, &cfg).unwrap();
        let fx = ForwardCtx::new(&store, Mode::Eval, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = fx
            .tape()
            .leaf_f64(
                &(0..7 * 16).map(|_| rng.gen::<f64>() - 0.5).collect::<Vec<_>>(),
                &[7, 16],
            )
            .unwrap();
        let (y, state) = encoder_layer_forward(&fx, &cfg, 0, &x).unwrap();
        assert_eq!(y.shape(), &[7, 16]);
        for s in [
            &state.input,
            &state.after_ffn,
            &state.after_attn,
            &state.after_conv,
            &state.output,
        ] {
            assert_eq!(s.shape(), &[7, 16]);
        }
    }

    #[test]
    fn zeroed_sub_blocks_reduce_to_standardization() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new(3);
        register_encoder_params(&mut store, &cfg).unwrap();
        // zero every weight matrix and conv kernel in layer 0; norms keep
        // gain 1 / bias 0 from init, biases are zero from init
        for name in store.names() {
            if name.starts_with("enc.l00") && (name.ends_with(".w") || name.ends_with("kernel")) {
                let p = store.get_mut(&name).unwrap();
                p.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let fx = ForwardCtx::new(&store, Mode::Eval, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xdata: Vec<f64> = (0..5 * 16).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let x = fx.tape().leaf_f64(&xdata, &[5, 16]).unwrap();
        let (y, _) = encoder_layer_forward(&fx, &cfg, 0, &x).unwrap();
        let got = y.data_f64();
        for r in 0..5 {
            let row = &xdata[r * 16..(r + 1) * 16];
            let mu: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..16 {
                let want = (row[j] - mu) * inv;
                assert!((got[r * 16 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_gradient_matches_finite_differences() {
        let cfg = EncoderConfig {
            num_layers: 1,
            d_model: 4,
            num_heads: 2,
            ffn_dim: 6,
            conv_kernel: 3,
            dropout_p: 0.0,
            subsample_factor: 1,
            feat_dim: 4,
            ilo_layer: None,
            final_norm: FinalNorm::Parallel,
        };
        let mut store = ParamStore::<f64>::new(5);
        register_encoder_params(&mut store, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0: Vec<f64> = (0..3 * 4).map(|_| rng.gen::<f64>() - 0.5).collect();
        let f = |p: &[f64]| {
            let fx = ForwardCtx::new(&store, Mode::Eval, 0);
            let x = fx.tape().leaf_f64(p, &[3, 4]).unwrap();
            let (y, _) = encoder_layer_forward(&fx, &cfg, 0, &x).unwrap();
            y.sum_all().item_f64().unwrap()
        };
        let numeric = central_diff(&f, &x0, 1e-6);
        let fx = ForwardCtx::new(&store, Mode::Eval, 0);
        let x = fx.tape().leaf_f64(&x0, &[3, 4]).unwrap();
        let (y, _) = encoder_layer_forward(&fx, &cfg, 0, &x).unwrap();
        let loss = y.sum_all();
        fx.backward(&loss).unwrap();
        let analytic = x.grad().unwrap();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn tap_returns_requested_layer_and_is_transparent() {
        let mut cfg = tiny_cfg();
        cfg.ilo_layer = Some(1);
        let mut store = ParamStore::<f32>::new(11);
        register_encoder_params(&mut store, &cfg).unwrap();
        let u = feats("u", 12, 5, 4);

        let fx = ForwardCtx::new(&store, Mode::Eval, 0);
        let with_tap = encoder_forward(&fx, &cfg, &u).unwrap();
        assert!(with_tap.ilo_memory.is_some());
        assert_eq!(
            with_tap.ilo_memory.as_ref().unwrap().shape(),
            with_tap.final_memory.shape()
        );

        let mut cfg_plain = cfg.clone();
        cfg_plain.ilo_layer = None;
        let fx2 = ForwardCtx::new(&store, Mode::Eval, 0);
        let plain = encoder_forward(&fx2, &cfg_plain, &u).unwrap();
        assert!(plain.ilo_memory.is_none());

        let a: Vec<u32> = with_tap.final_memory.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = plain.final_memory.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "tap must not perturb the final memory");
    }

    #[test]
    fn subsampling_arithmetic() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new(1);
        register_encoder_params(&mut store, &cfg).unwrap();

        let fx = ForwardCtx::new(&store, Mode::Eval, 0);
        let out = encoder_forward(&fx, &cfg, &feats("a", 40, 5, 1)).unwrap();
        assert_eq!(out.frame_count, 10);
        assert_eq!(out.final_memory.shape(), &[10, 16]);

        let fx = ForwardCtx::new(&store, Mode::Eval, 0);
        let x = subsample_frontend(&fx, &cfg, &feats("b", 8, 5, 2)).unwrap();
        assert_eq!(x.shape(), &[2, 16]);

        let fx = ForwardCtx::new(&store, Mode::Eval, 0);
        let err = subsample_frontend(&fx, &cfg, &feats("c", 3, 5, 3)).unwrap_err();
        assert!(matches!(err, Error::TooShortInput(_)));
    }

    #[test]
    fn ilo_layer_bounds_checked() {
        let mut cfg = tiny_cfg();
        cfg.ilo_layer = Some(2); // == num_layers
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.ilo_layer = Some(0);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn param_count_independent_of_tap() {
        let mut with_tap = ParamStore::<f32>::new(7);
        let mut cfg = tiny_cfg();
        register_encoder_params(&mut with_tap, &cfg).unwrap();
        let mut without = ParamStore::<f32>::new(7);
        cfg.ilo_layer = None;
        register_encoder_params(&mut without, &cfg).unwrap();
        assert_eq!(with_tap.count(), without.count());
        assert_eq!(with_tap.names(), without.names());
    }

    #[test]
    fn ilo_access_counter_counts_reads() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f32>::new(11);
        register_encoder_params(&mut store, &cfg).unwrap();
        let fx = ForwardCtx::new(&store, Mode::Eval, 0);
        let out = encoder_forward(&fx, &cfg, &feats("u", 12, 5, 4)).unwrap();
        assert_eq!(out.ilo_access_count(), 0);
        let _ = out.ilo_memory.as_ref().unwrap().get();
        let _ = out.ilo_memory.as_ref().unwrap().get();
        assert_eq!(out.ilo_access_count(), 2);
    }
}
