//! Full transduction model: encoder, shared decoder, CTC heads.

use crate::corpus::{CoarseVocab, FeatureSequence, Vocab};
use crate::decoder::{decoder_forward, register_decoder_params, DecoderConfig};
use crate::encoder::{encoder_forward, register_encoder_params, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::fwd::{linear, ForwardCtx, Mode};
use crate::params::{Init, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Output units of the intermediate CTC head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IloUnits {
    Fine,
    Coarse,
}

impl IloUnits {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(IloUnits::Fine),
            "coarse" => Ok(IloUnits::Coarse),
            _ => Err(Error::config(format!(
                "unknown ilo_units {s:?} (expected fine | coarse)"
            ))),
        }
    }

    pub fn ctc_vocab(&self, vocab: &Vocab) -> usize {
        match self {
            IloUnits::Fine => vocab.ctc_vocab(),
            IloUnits::Coarse => CoarseVocab::new(vocab.fine).ctc_vocab(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub vocab: Vocab,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Width of the intermediate CTC projection (including blank), present
    /// only for the regime that attaches an extra head to the tap.
    pub inter_ctc_vocab: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.d_model != self.decoder.d_model {
            return Err(Error::config(format!(
                "decoder d_model {} must match encoder d_model {} (memories feed cross-attention directly)",
                self.decoder.d_model, self.encoder.d_model
            )));
        }
        if self.decoder.vocab_size != self.vocab.decoder_vocab() {
            return Err(Error::config(format!(
                "decoder.vocab_size {} does not match vocabulary ({} content tokens + blank/sos/eos)",
                self.decoder.vocab_size, self.vocab.fine
            )));
        }
        if let Some(v) = self.inter_ctc_vocab {
            if v < 2 {
                return Err(Error::config("inter CTC vocabulary must cover blank + content"));
            }
        }
        Ok(())
    }
}

pub struct AsrModel<F: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
}

impl<F: Scalar> AsrModel<F> {
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(seed);
        register_encoder_params(&mut params, &cfg.encoder)?;
        register_decoder_params(&mut params, &cfg.decoder)?;
        let d = cfg.encoder.d_model;
        let cv = cfg.vocab.ctc_vocab();
        params.register(
            "ctc.w",
            &[d, cv],
            Init::GlorotUniform { fan_in: d, fan_out: cv },
        )?;
        params.register("ctc.b", &[cv], Init::Zeros)?;
        if let Some(iv) = cfg.inter_ctc_vocab {
            params.register(
                "ictc.w",
                &[d, iv],
                Init::GlorotUniform { fan_in: d, fan_out: iv },
            )?;
            params.register("ictc.b", &[iv], Init::Zeros)?;
        }
        Ok(AsrModel { cfg, params })
    }

    pub fn ctx(&self, mode: Mode, seed: u64) -> ForwardCtx<'_, F> {
        ForwardCtx::new(&self.params, mode, seed)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn encode(&self, fx: &ForwardCtx<F>, feats: &FeatureSequence) -> Result<EncoderOutput<F>> {
        encoder_forward(fx, &self.cfg.encoder, feats)
    }

    /// Final-layer CTC posteriors `[T' x ctc_vocab]`.
    pub fn ctc_log_probs(&self, fx: &ForwardCtx<F>, memory: &Tensor<F>) -> Result<Tensor<F>> {
        linear(fx, memory, "ctc")?.log_softmax_rows()
    }

    /// Intermediate-tap CTC posteriors through the extra projection.
    pub fn inter_ctc_log_probs(
        &self,
        fx: &ForwardCtx<F>,
        memory: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        if self.cfg.inter_ctc_vocab.is_none() {
            return Err(Error::contract(
                "model has no intermediate CTC head configured",
            ));
        }
        linear(fx, memory, "ictc")?.log_softmax_rows()
    }

    /// Teacher-forced decoder logits over a memory (final or intermediate —
    /// the same parameters serve both).
    pub fn decoder_logits(
        &self,
        fx: &ForwardCtx<F>,
        memory: &Tensor<F>,
        body: &[usize],
    ) -> Result<Tensor<F>> {
        decoder_forward(fx, &self.cfg.decoder, memory, body, &self.cfg.vocab)
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::encoder::{EncoderConfig, FinalNorm};

    /// Small f32 model with a configured tap, for decode-side tests.
    pub(crate) fn tiny_tapped_model(fine: usize, seed: u64) -> AsrModel<f32> {
        let vocab = Vocab::new(fine).unwrap();
        let cfg = ModelConfig {
            vocab,
            encoder: EncoderConfig {
                num_layers: 2,
                d_model: 16,
                num_heads: 2,
                ffn_dim: 24,
                conv_kernel: 3,
                dropout_p: 0.1,
                subsample_factor: 4,
                feat_dim: 6,
                ilo_layer: Some(1),
                final_norm: FinalNorm::Parallel,
            },
            decoder: DecoderConfig {
                num_layers: 1,
                d_model: 16,
                num_heads: 2,
                ffn_dim: 24,
                dropout_p: 0.1,
                vocab_size: vocab.decoder_vocab(),
            },
            inter_ctc_vocab: None,
        };
        AsrModel::build(cfg, seed).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::FinalNorm;
    use crate::losses::att_ce_loss;

    pub(crate) fn tiny_model_cfg(
        fine_vocab: usize,
        inter: Option<IloUnits>,
    ) -> ModelConfig {
        let vocab = Vocab::new(fine_vocab).unwrap();
        let encoder = EncoderConfig {
            num_layers: 3,
            d_model: 8,
            num_heads: 2,
            ffn_dim: 12,
            conv_kernel: 3,
            dropout_p: 0.0,
            subsample_factor: 2,
            feat_dim: 4,
            ilo_layer: Some(2),
            final_norm: FinalNorm::Parallel,
        };
        let decoder = DecoderConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            ffn_dim: 12,
            dropout_p: 0.0,
            vocab_size: vocab.decoder_vocab(),
        };
        ModelConfig {
            vocab,
            encoder,
            decoder,
            inter_ctc_vocab: inter.map(|u| u.ctc_vocab(&vocab)),
        }
    }

    fn feats(t: usize, d: usize, seed: u64) -> FeatureSequence {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence {
            id: format!("t{seed}"),
            dim: d,
            frames: (0..t * d).map(|_| rng.gen::<f32>() - 0.5).collect(),
        }
    }

    #[test]
    fn regularized_regime_adds_zero_parameters() {
        // tap on vs off: identical parameter sets
        let mut with_tap = tiny_model_cfg(5, None);
        with_tap.encoder.ilo_layer = Some(2);
        let mut without = tiny_model_cfg(5, None);
        without.encoder.ilo_layer = None;
        let a = AsrModel::<f32>::build(with_tap, 1).unwrap();
        let b = AsrModel::<f32>::build(without, 1).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_eq!(a.params.names(), b.params.names());
    }

    #[test]
    fn inter_ctc_head_adds_exactly_projection_parameters() {
        let base = AsrModel::<f32>::build(tiny_model_cfg(5, None), 1).unwrap();
        let with_head =
            AsrModel::<f32>::build(tiny_model_cfg(5, Some(IloUnits::Fine)), 1).unwrap();
        let d = 8;
        let v = Vocab::new(5).unwrap().ctc_vocab();
        assert_eq!(with_head.param_count() - base.param_count(), d * v + v);

        let coarse =
            AsrModel::<f32>::build(tiny_model_cfg(5, Some(IloUnits::Coarse)), 1).unwrap();
        let cv = CoarseVocab::new(5).ctc_vocab();
        assert_eq!(coarse.param_count() - base.param_count(), d * cv + cv);
    }

    #[test]
    fn shared_init_across_regime_shapes() {
        // same seed: every parameter the two models share is bitwise equal
        let base = AsrModel::<f32>::build(tiny_model_cfg(5, None), 42).unwrap();
        let head = AsrModel::<f32>::build(tiny_model_cfg(5, Some(IloUnits::Fine)), 42).unwrap();
        for (name, p) in base.params.iter() {
            let q = head.params.get(name).unwrap();
            let a: Vec<u32> = p.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = q.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn intermediate_path_reaches_only_layers_at_or_below_tap() {
        // loss through the tap memory alone: layers above the tap and the
        // final CTC head must receive no gradient; something at or below
        // the tap must.
        let cfg = tiny_model_cfg(5, None);
        let tap = cfg.encoder.ilo_layer.unwrap();
        let model = AsrModel::<f64>::build(cfg, 3).unwrap();
        let fx = model.ctx(Mode::Eval, 0);
        let enc = model.encode(&fx, &feats(6, 4, 9)).unwrap();
        let ilo = enc.ilo_memory.as_ref().unwrap().get();
        let logits = model.decoder_logits(&fx, ilo, &[1, 2]).unwrap();
        let eos = model.cfg.vocab.eos();
        let loss = att_ce_loss(&logits, &[1, 2, eos], 0.0).unwrap();
        fx.backward(&loss).unwrap();

        let mut saw_below = false;
        for name in model.params.names() {
            let g = fx.param_grad(&name);
            if let Some(layer) = name
                .strip_prefix("enc.l")
                .and_then(|s| s[..2].parse::<usize>().ok())
            {
                let layer = layer + 1; // names are 0-based, tap is 1-based
                if layer > tap {
                    let zero = g.map_or(true, |v| v.iter().all(|&x| x == 0.0));
                    assert!(zero, "{name} above the tap received gradient");
                } else if g.is_some_and(|v| v.iter().any(|&x| x != 0.0)) {
                    saw_below = true;
                }
            }
            if name.starts_with("ctc.") {
                assert!(
                    fx.param_grad(&name).is_none(),
                    "final CTC head is not on the intermediate path"
                );
            }
        }
        assert!(saw_below, "no gradient reached layers at or below the tap");
    }

    #[test]
    fn inter_head_requires_configuration() {
        let model = AsrModel::<f64>::build(tiny_model_cfg(5, None), 3).unwrap();
        let fx = model.ctx(Mode::Eval, 0);
        let enc = model.encode(&fx, &feats(6, 4, 9)).unwrap();
        assert!(model
            .inter_ctc_log_probs(&fx, &enc.final_memory)
            .is_err());
    }

    #[test]
    fn mismatched_d_model_rejected() {
        let mut cfg = tiny_model_cfg(5, None);
        cfg.decoder.d_model = 16;
        assert!(AsrModel::<f32>::build(cfg, 1).is_err());
    }
}
