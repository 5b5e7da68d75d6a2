//! Forward-pass context: binds a tape to a parameter store.
//!
//! Parameters are leafed onto the tape lazily and cached by name, so a
//! parameter used by two passes in the same step (the shared decoder) maps
//! to one tape node and its gradient accumulates across both passes.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tape, Tensor};
use std::cell::RefCell;
use std::collections::BTreeMap;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct ForwardCtx<'p, F: Scalar> {
    tape: Tape<F>,
    params: &'p ParamStore<F>,
    cache: RefCell<BTreeMap<String, Tensor<F>>>,
    mode: Mode,
}

impl<'p, F: Scalar> ForwardCtx<'p, F> {
    pub fn new(params: &'p ParamStore<F>, mode: Mode, seed: u64) -> Self {
        ForwardCtx {
            tape: Tape::new(seed),
            params,
            cache: RefCell::new(BTreeMap::new()),
            mode,
        }
    }

    pub fn tape(&self) -> &Tape<F> {
        &self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Leaf for a named parameter; one tape node per name per context.
    pub fn param(&self, name: &str) -> Result<Tensor<F>> {
        if let Some(t) = self.cache.borrow().get(name) {
            return Ok(t.clone());
        }
        let p = self.params.get(name)?;
        let t = self.tape.leaf(p.data.clone(), &p.shape)?;
        self.cache.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Node id a parameter is bound to, if it has been leafed.
    pub fn param_node(&self, name: &str) -> Option<usize> {
        self.cache.borrow().get(name).map(|t| t.id())
    }

    /// Number of distinct parameters leafed so far.
    pub fn leafed_params(&self) -> usize {
        self.cache.borrow().len()
    }

    /// Train-time inverted dropout; identity in eval mode.
    pub fn dropout(&self, x: &Tensor<F>, p: f64) -> Result<Tensor<F>> {
        match self.mode {
            Mode::Train => x.dropout(p),
            Mode::Eval => Ok(x.clone()),
        }
    }

    pub fn backward(&self, loss: &Tensor<F>) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradient for a named parameter; `None` when the parameter was never
    /// touched by the forward pass or received no gradient.
    pub fn param_grad(&self, name: &str) -> Option<Vec<F>> {
        self.cache.borrow().get(name).and_then(|t| t.grad())
    }
}

// ---------------------------------------------------------------------------
// Shared blocks
// ---------------------------------------------------------------------------

/// `x . {prefix}.w + {prefix}.b`
pub fn linear<F: Scalar>(fx: &ForwardCtx<F>, x: &Tensor<F>, prefix: &str) -> Result<Tensor<F>> {
    let w = fx.param(&format!("{prefix}.w"))?;
    let b = fx.param(&format!("{prefix}.b"))?;
    x.matmul(&w)?.add_row(&b)
}

/// Layer norm with `{prefix}.g` / `{prefix}.b`.
pub fn layer_norm_p<F: Scalar>(
    fx: &ForwardCtx<F>,
    x: &Tensor<F>,
    prefix: &str,
) -> Result<Tensor<F>> {
    let g = fx.param(&format!("{prefix}.g"))?;
    let b = fx.param(&format!("{prefix}.b"))?;
    x.layer_norm(&g, &b, LN_EPS)
}

/// Pre-norm feed-forward: LN -> linear -> swish -> dropout -> linear -> dropout.
/// Parameter names: `{prefix}.ln.{g,b}`, `{prefix}.in.{w,b}`, `{prefix}.out.{w,b}`.
pub fn feed_forward<F: Scalar>(
    fx: &ForwardCtx<F>,
    x: &Tensor<F>,
    prefix: &str,
    dropout_p: f64,
) -> Result<Tensor<F>> {
    let h = layer_norm_p(fx, x, &format!("{prefix}.ln"))?;
    let h = linear(fx, &h, &format!("{prefix}.in"))?.swish();
    let h = fx.dropout(&h, dropout_p)?;
    let h = linear(fx, &h, &format!("{prefix}.out"))?;
    fx.dropout(&h, dropout_p)
}

/// Scaled dot-product attention over already-projected q/k/v, all `[.. x d]`.
/// Splits into heads, applies the optional additive `[Tq x Tk]` mask before
/// each softmax, and returns the concatenated head outputs (no output
/// projection).
pub fn attention_core<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    num_heads: usize,
    mask: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    let d = q.shape()[1];
    if k.shape()[1] != d || v.shape()[1] != d || k.shape()[0] != v.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "attention_core",
            lhs: k.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let dk = d / num_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = q.narrow_cols(h * dk, dk)?;
        let kh = k.narrow_cols(h * dk, dk)?;
        let vh = v.narrow_cols(h * dk, dk)?;
        let mut scores = qh.matmul_tb(&kh)?.scale(scale);
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        let attn = scores.softmax(1)?;
        heads.push(attn.matmul(&vh)?);
    }
    let refs: Vec<&Tensor<F>> = heads.iter().collect();
    Tensor::concat_cols(&refs)
}

/// Multi-head scaled dot-product attention over already-normalized inputs.
/// Query rows come from `q_in`, keys/values from `kv_in`; `mask` is an
/// additive `[Tq x Tk]` bias applied before the softmax.
/// Parameter names: `{prefix}.{q,k,v,o}.{w,b}`.
pub fn attention<F: Scalar>(
    fx: &ForwardCtx<F>,
    prefix: &str,
    q_in: &Tensor<F>,
    kv_in: &Tensor<F>,
    num_heads: usize,
    mask: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    let d = q_in.shape()[1];
    if kv_in.shape()[1] != d {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: q_in.shape().to_vec(),
            rhs: kv_in.shape().to_vec(),
        });
    }
    let q = linear(fx, q_in, &format!("{prefix}.q"))?;
    let k = linear(fx, kv_in, &format!("{prefix}.k"))?;
    let v = linear(fx, kv_in, &format!("{prefix}.v"))?;
    let merged = attention_core(&q, &k, &v, num_heads, mask)?;
    linear(fx, &merged, &format!("{prefix}.o"))
}

/// Additive causal mask: 0 where key index <= query index, LOG_ZERO above.
pub fn causal_mask<F: Scalar>(tape: &Tape<F>, len: usize) -> Result<Tensor<F>> {
    let mut m = vec![0.0f64; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            m[i * len + j] = crate::tensor::LOG_ZERO;
        }
    }
    tape.leaf_f64(&m, &[len, len])
}

/// Absolute sinusoidal positional encoding, `[t x d]` row-major.
pub fn sinusoidal_pe(t: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t * d];
    for pos in 0..t {
        pe[pos * d..(pos + 1) * d].copy_from_slice(&sinusoidal_pe_row(pos, d));
    }
    pe
}

/// One row of the sinusoidal encoding.
pub fn sinusoidal_pe_row(pos: usize, d: usize) -> Vec<f64> {
    let mut row = vec![0.0; d];
    for i in 0..d / 2 {
        let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
        row[2 * i] = rate.sin();
        if 2 * i + 1 < d {
            row[2 * i + 1] = rate.cos();
        }
    }
    row
}

/// Register the parameter set used by [`attention`].
pub fn register_attention_params<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    d: usize,
) -> Result<()> {
    use crate::params::Init;
    for part in ["q", "k", "v", "o"] {
        store.register(
            &format!("{prefix}.{part}.w"),
            &[d, d],
            Init::GlorotUniform { fan_in: d, fan_out: d },
        )?;
        store.register(&format!("{prefix}.{part}.b"), &[d], Init::Zeros)?;
    }
    Ok(())
}

/// Register the parameter set used by [`feed_forward`].
pub fn register_ffn_params<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    d: usize,
    hidden: usize,
) -> Result<()> {
    use crate::params::Init;
    store.register(&format!("{prefix}.ln.g"), &[d], Init::Ones)?;
    store.register(&format!("{prefix}.ln.b"), &[d], Init::Zeros)?;
    store.register(
        &format!("{prefix}.in.w"),
        &[d, hidden],
        Init::GlorotUniform { fan_in: d, fan_out: hidden },
    )?;
    store.register(&format!("{prefix}.in.b"), &[hidden], Init::Zeros)?;
    store.register(
        &format!("{prefix}.out.w"),
        &[hidden, d],
        Init::GlorotUniform { fan_in: hidden, fan_out: d },
    )?;
    store.register(&format!("{prefix}.out.b"), &[d], Init::Zeros)?;
    Ok(())
}

pub fn register_layer_norm_params<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    d: usize,
) -> Result<()> {
    use crate::params::Init;
    store.register(&format!("{prefix}.g"), &[d], Init::Ones)?;
    store.register(&format!("{prefix}.b"), &[d], Init::Zeros)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamStore};

    #[test]
    fn param_leaf_is_cached_per_name() {
        let mut store = ParamStore::<f64>::new(1);
        store.register("w", &[2, 2], Init::Ones).unwrap();
        let fx = ForwardCtx::new(&store, Mode::Eval, 0);
        let a = fx.param("w").unwrap();
        let b = fx.param("w").unwrap();
        assert_eq!(a.id(), b.id());
        assert_eq!(fx.leafed_params(), 1);
    }

    #[test]
    fn eval_dropout_is_identity() {
        let store = ParamStore::<f64>::new(1);
        let fx = ForwardCtx::new(&store, Mode::Eval, 7);
        let x = fx.tape().leaf_f64(&[1.0, 2.0, 3.0], &[3]).unwrap();
        let y = fx.dropout(&x, 0.9).unwrap();
        assert_eq!(y.data_f64(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let tape = crate::tensor::Tape::<f64>::new(0);
        let m = causal_mask(&tape, 3).unwrap().data_f64();
        assert_eq!(m[0 * 3 + 0], 0.0);
        assert!(m[0 * 3 + 1] < -1e29);
        assert_eq!(m[2 * 3 + 1], 0.0);
    }

    #[test]
    fn pe_is_bounded_and_position_dependent() {
        let pe = sinusoidal_pe(5, 8);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(pe[0..8], pe[8..16]);
    }
}
