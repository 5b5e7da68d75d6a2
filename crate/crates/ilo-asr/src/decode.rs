//! Inference: hybrid CTC/attention beam search, pure attention search, and
//! greedy CTC decoding.
//!
//! Decoding reads the final-layer memory only. The intermediate tap, if the
//! encoder config carries one, is produced but never accessed; the access
//! counter on it stays at zero and is reported with every decode outcome.

use crate::corpus::{Vocab, BLANK};
use crate::ctc::CtcPrefixScorer;
use crate::decoder::{DecoderConfig, DecoderStepper, MemoryData, StepCache};
use crate::error::{Error, Result};
use crate::fwd::Mode;
use crate::model::AsrModel;
use crate::params::ParamStore;
use crate::tensor::Scalar;
use std::cmp::Ordering;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Ctc,
    Attention,
    Hybrid,
}

impl DecodeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ctc" => Ok(DecodeMode::Ctc),
            "attention" => Ok(DecodeMode::Attention),
            "hybrid" => Ok(DecodeMode::Hybrid),
            _ => Err(Error::config(format!(
                "unknown decode mode {s:?} (expected ctc | attention | hybrid)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DecodeMode::Ctc => "ctc",
            DecodeMode::Attention => "attention",
            DecodeMode::Hybrid => "hybrid",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub lambda_ctc: f64,
    pub lambda_att: f64,
    pub max_len_ratio: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Hybrid,
            beam_size: 10,
            lambda_ctc: 0.2,
            lambda_att: 0.8,
            max_len_ratio: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::config("decode.beam_size must be >= 1"));
        }
        if self.lambda_ctc < 0.0 || self.lambda_att < 0.0 {
            return Err(Error::config("decode interpolation weights must be nonnegative"));
        }
        if (self.lambda_ctc + self.lambda_att - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "decode.lambda_ctc + decode.lambda_att must be 1 (got {} + {})",
                self.lambda_ctc, self.lambda_att
            )));
        }
        if self.max_len_ratio <= 0.0 {
            return Err(Error::config("decode.max_len_ratio must be positive"));
        }
        Ok(())
    }
}

/// One beam entry. `combined_score` is always
/// lambda_ctc * ctc_prefix_logprob + lambda_att * att_logprob.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub att_logprob: f64,
    pub ctc_prefix_logprob: f64,
    pub combined_score: f64,
    pub finished: bool,
}

/// Deterministic ordering: higher score first, then shorter, then
/// lexicographically smaller token sequence.
pub fn rank_hypotheses(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.combined_score
        .partial_cmp(&a.combined_score)
        .unwrap_or(Ordering::Equal)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then(a.tokens.cmp(&b.tokens))
}

/// Per-frame argmax, collapse repeats, drop blanks.
pub fn ctc_greedy_decode(log_probs: &[f64], t_len: usize, vocab: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..t_len {
        let row = &log_probs[t * vocab..(t + 1) * vocab];
        let mut best = 0usize;
        for c in 1..vocab {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best != prev && best != BLANK {
            out.push(best);
        }
        prev = best;
    }
    out
}

struct Active<F: Scalar> {
    hyp: Hypothesis,
    cache: StepCache<F>,
    /// log-probabilities for the next position after `hyp.tokens`
    next_dist: Vec<f64>,
}

/// Beam search over decoder steps, each candidate scored by the fixed
/// interpolation of attention log-probability and CTC prefix score. With
/// no scorer the CTC term is zero (pure attention search).
pub fn hybrid_beam_search<F: Scalar>(
    params: &ParamStore<F>,
    dec_cfg: &DecoderConfig,
    vocab: &Vocab,
    memory: &MemoryData<F>,
    ctc: Option<&CtcPrefixScorer>,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    cfg.validate()?;
    if memory.rows == 0 {
        return Err(Error::contract("hybrid_beam_search: empty memory"));
    }
    let max_len = ((cfg.max_len_ratio * memory.rows as f64).ceil() as usize).max(1);
    let (lc, la) = (cfg.lambda_ctc, cfg.lambda_att);
    let eos = vocab.eos();

    let stepper = DecoderStepper::new(params, dec_cfg, memory.clone())?;
    let mut cache0 = stepper.begin();
    let dist0 = stepper.step(&mut cache0, vocab.sos())?;
    let mut active = vec![Active {
        hyp: Hypothesis {
            tokens: Vec::new(),
            att_logprob: 0.0,
            ctc_prefix_logprob: 0.0,
            combined_score: 0.0,
            finished: false,
        },
        cache: cache0,
        next_dist: dist0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    while !active.is_empty() {
        // candidate extensions, eos competing for beam slots like any token
        let mut candidates: Vec<(usize, usize, Hypothesis)> = Vec::new();
        for (pi, a) in active.iter().enumerate() {
            let at_cap = a.hyp.tokens.len() >= max_len;
            if !at_cap {
                for c in 1..=vocab.fine {
                    let att = a.hyp.att_logprob + a.next_dist[c];
                    let mut tokens = a.hyp.tokens.clone();
                    tokens.push(c);
                    let ctc_lp = match ctc {
                        Some(s) => s.score_prefix(&tokens)?,
                        None => 0.0,
                    };
                    candidates.push((
                        pi,
                        c,
                        Hypothesis {
                            tokens,
                            att_logprob: att,
                            ctc_prefix_logprob: ctc_lp,
                            combined_score: lc * ctc_lp + la * att,
                            finished: false,
                        },
                    ));
                }
            }
            // eos ends the sequence here (the only candidate once capped)
            let att = a.hyp.att_logprob + a.next_dist[eos];
            let ctc_lp = match ctc {
                Some(s) => s.score_complete(&a.hyp.tokens)?,
                None => 0.0,
            };
            candidates.push((
                pi,
                eos,
                Hypothesis {
                    tokens: a.hyp.tokens.clone(),
                    att_logprob: att,
                    ctc_prefix_logprob: ctc_lp,
                    combined_score: lc * ctc_lp + la * att,
                    finished: true,
                },
            ));
        }

        candidates.sort_by(|x, y| rank_hypotheses(&x.2, &y.2));
        candidates.truncate(cfg.beam_size);

        let mut next_active = Vec::new();
        for (pi, token, hyp) in candidates {
            if hyp.finished {
                finished.push(hyp);
            } else {
                let mut cache = active[pi].cache.clone();
                let dist = stepper.step(&mut cache, token)?;
                next_active.push(Active {
                    hyp,
                    cache,
                    next_dist: dist,
                });
            }
        }

        // end detection: scores only fall under extension, so once the best
        // finished hypothesis beats every survivor the search is done
        let best_finished = finished
            .iter()
            .map(|h| h.combined_score)
            .fold(f64::NEG_INFINITY, f64::max);
        let best_active = next_active
            .iter()
            .map(|a| a.hyp.combined_score)
            .fold(f64::NEG_INFINITY, f64::max);
        if next_active.is_empty() || best_finished >= best_active {
            break;
        }
        active = next_active;
    }

    finished.sort_by(rank_hypotheses);
    finished
        .into_iter()
        .next()
        .ok_or_else(|| Error::contract("beam search produced no finished hypothesis"))
}

/// Pure attention search: the hybrid path with lambda_ctc = 0 and no CTC
/// scorer consulted.
pub fn attention_beam_search<F: Scalar>(
    params: &ParamStore<F>,
    dec_cfg: &DecoderConfig,
    vocab: &Vocab,
    memory: &MemoryData<F>,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    let att_cfg = DecodeConfig {
        mode: DecodeMode::Attention,
        lambda_ctc: 0.0,
        lambda_att: 1.0,
        ..cfg.clone()
    };
    hybrid_beam_search(params, dec_cfg, vocab, memory, None, &att_cfg)
}

#[derive(Debug, Clone)]
pub struct UttDecodeOutcome {
    pub tokens: Vec<usize>,
    pub combined_score: Option<f64>,
    pub ilo_accesses: u64,
    pub encoder_ops: usize,
}

/// Encode one utterance and decode it in the requested mode.
pub fn decode_utterance<F: Scalar>(
    model: &AsrModel<F>,
    feats: &crate::corpus::FeatureSequence,
    cfg: &DecodeConfig,
) -> Result<UttDecodeOutcome> {
    cfg.validate()?;
    let vocab = model.cfg.vocab;
    let fx = model.ctx(Mode::Eval, 0);
    let enc = model.encode(&fx, feats)?;
    let encoder_ops = fx.tape().num_ops();
    let outcome = match cfg.mode {
        DecodeMode::Ctc => {
            let lp = model.ctc_log_probs(&fx, &enc.final_memory)?;
            let tokens = ctc_greedy_decode(&lp.data_f64(), lp.shape()[0], lp.shape()[1]);
            UttDecodeOutcome {
                tokens,
                combined_score: None,
                ilo_accesses: enc.ilo_access_count(),
                encoder_ops,
            }
        }
        DecodeMode::Attention => {
            let memory = MemoryData::from_tensor(&enc.final_memory);
            let hyp =
                attention_beam_search(&model.params, &model.cfg.decoder, &vocab, &memory, cfg)?;
            UttDecodeOutcome {
                tokens: hyp.tokens,
                combined_score: Some(hyp.combined_score),
                ilo_accesses: enc.ilo_access_count(),
                encoder_ops,
            }
        }
        DecodeMode::Hybrid => {
            let lp = model.ctc_log_probs(&fx, &enc.final_memory)?;
            let scorer = CtcPrefixScorer::from_tensor(&lp)?;
            let memory = MemoryData::from_tensor(&enc.final_memory);
            let hyp = hybrid_beam_search(
                &model.params,
                &model.cfg.decoder,
                &vocab,
                &memory,
                Some(&scorer),
                cfg,
            )?;
            UttDecodeOutcome {
                tokens: hyp.tokens,
                combined_score: Some(hyp.combined_score),
                ilo_accesses: enc.ilo_access_count(),
                encoder_ops,
            }
        }
    };
    Ok(outcome)
}
