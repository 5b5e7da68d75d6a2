//! Training harness: epoch loop, regime dispatch, validation accuracy,
//! checkpointing with best-k averaging, and the three-regime comparison
//! driver.

use crate::checkpoint::{average_checkpoints, Checkpoint, RngState};
use crate::corpus::{CoarseVocab, Corpus, FeatureSequence, Utterance};
use crate::ctc::{ctc_loss, required_frames};
use crate::error::{Error, Result};
use crate::fwd::Mode;
use crate::losses::{
    att_ce_loss, loss_baseline, loss_ilo_ctc, loss_proposed, LossReport, LossWeights, Regime,
};
use crate::model::{AsrModel, IloUnits, ModelConfig};
use crate::optim::{noam_lr, Adam};
use crate::params::derive_seed;
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy)]
pub struct SpecAugmentConfig {
    pub time_masks: usize,
    pub time_width: usize,
    pub freq_masks: usize,
    pub freq_width: usize,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub regime: Regime,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub lr_factor: f64,
    pub seed: u64,
    pub label_smoothing: f64,
    pub keep_best: usize,
    pub ilo_units: IloUnits,
    pub spec_augment: Option<SpecAugmentConfig>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.weights.alpha, self.weights.beta, self.weights.gamma)?;
        if self.epochs == 0 || self.batch_size == 0 || self.keep_best == 0 {
            return Err(Error::config(
                "train.epochs, train.batch_size, train.keep_best must be positive",
            ));
        }
        if self.warmup_steps == 0 || self.lr_factor <= 0.0 {
            return Err(Error::config(
                "train.warmup_steps must be positive and train.lr_factor > 0",
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("train.label_smoothing must be in [0,1)"));
        }
        if self.regime == Regime::Baseline && self.weights.gamma != 0.0 {
            return Err(Error::config("baseline regime requires gamma = 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainMetricsRow {
    pub epoch: usize,
    pub l_ctc: f64,
    pub l_att: f64,
    pub l_inter: Option<f64>,
    pub combined: f64,
    pub dev_accuracy: f64,
    pub wall_seconds: f64,
}

/// Seeded time and feature-channel masking, train-time only, on a copy.
pub fn spec_augment_lite(
    feats: &FeatureSequence,
    cfg: &SpecAugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureSequence> {
    let t = feats.len();
    let d = feats.dim;
    if cfg.time_masks > 0 && cfg.time_width >= t {
        return Err(Error::config(format!(
            "time mask width {} not below sequence length {t}",
            cfg.time_width
        )));
    }
    if cfg.freq_masks > 0 && cfg.freq_width >= d {
        return Err(Error::config(format!(
            "feature mask width {} not below feature dimension {d}",
            cfg.freq_width
        )));
    }
    let mut out = feats.clone();
    for _ in 0..cfg.time_masks {
        if cfg.time_width == 0 {
            continue;
        }
        let t0 = rng.gen_range(0..=t - cfg.time_width);
        for row in t0..t0 + cfg.time_width {
            out.frames[row * d..(row + 1) * d].fill(0.0);
        }
    }
    for _ in 0..cfg.freq_masks {
        if cfg.freq_width == 0 {
            continue;
        }
        let f0 = rng.gen_range(0..=d - cfg.freq_width);
        for row in 0..t {
            out.frames[row * d + f0..row * d + f0 + cfg.freq_width].fill(0.0);
        }
    }
    Ok(out)
}

/// Frame count after the encoder frontend.
pub fn subsampled_len(feats: &FeatureSequence, factor: usize) -> usize {
    feats.len() / factor
}

/// All CTC targets this utterance needs under the configured regime fit in
/// its memory length.
pub fn utterance_feasible(
    utt: &Utterance,
    subsample_factor: usize,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> bool {
    let t_prime = subsampled_len(&utt.feats, subsample_factor);
    if t_prime < required_frames(&utt.labels) || t_prime == 0 {
        return false;
    }
    if cfg.regime == Regime::IloCtc && cfg.weights.gamma > 0.0 {
        let inter_labels = match cfg.ilo_units {
            IloUnits::Fine => utt.labels.clone(),
            IloUnits::Coarse => CoarseVocab::new(model_cfg.vocab.fine).encode(&utt.labels),
        };
        if t_prime < required_frames(&inter_labels) {
            return false;
        }
    }
    true
}

/// Forward pass and composite loss for one utterance under the configured
/// regime. With gamma = 0 every regime takes the two-term path, bit-for-bit.
pub fn utterance_loss<F: Scalar>(
    model: &AsrModel<F>,
    fx: &crate::fwd::ForwardCtx<F>,
    utt: &Utterance,
    cfg: &TrainConfig,
) -> Result<(Tensor<F>, LossReport)> {
    let vocab = model.cfg.vocab;
    let enc = model.encode(fx, &utt.feats)?;
    let ctc_lp = model.ctc_log_probs(fx, &enc.final_memory)?;
    let l_ctc = ctc_loss(&ctc_lp, &utt.labels)?;
    let logits = model.decoder_logits(fx, &enc.final_memory, &utt.labels)?;
    let mut targets = utt.labels.clone();
    targets.push(vocab.eos());
    let l_att = att_ce_loss(&logits, &targets, cfg.label_smoothing)?;

    let w = &cfg.weights;
    let inter_active = w.gamma > 0.0 && cfg.regime != Regime::Baseline;
    if !inter_active {
        let combined = loss_baseline(&l_ctc, &l_att, w.alpha)?;
        let report = LossReport {
            regime: cfg.regime,
            l_ctc: l_ctc.item_f64()?,
            l_att: l_att.item_f64()?,
            l_att_inter: None,
            l_ctc_inter: None,
            combined: combined.item_f64()?,
        };
        return Ok((combined, report));
    }

    let ilo = enc
        .ilo_memory
        .as_ref()
        .ok_or_else(|| {
            Error::config("regime with gamma > 0 requires encoder.ilo_layer to be set")
        })?
        .get()
        .clone();
    match cfg.regime {
        Regime::Proposed => {
            let inter_logits = model.decoder_logits(fx, &ilo, &utt.labels)?;
            let l_inter = att_ce_loss(&inter_logits, &targets, cfg.label_smoothing)?;
            let combined = loss_proposed(&l_ctc, &l_att, &l_inter, w)?;
            let report = LossReport {
                regime: cfg.regime,
                l_ctc: l_ctc.item_f64()?,
                l_att: l_att.item_f64()?,
                l_att_inter: Some(l_inter.item_f64()?),
                l_ctc_inter: None,
                combined: combined.item_f64()?,
            };
            Ok((combined, report))
        }
        Regime::IloCtc => {
            let inter_lp = model.inter_ctc_log_probs(fx, &ilo)?;
            let inter_labels = match cfg.ilo_units {
                IloUnits::Fine => utt.labels.clone(),
                IloUnits::Coarse => CoarseVocab::new(vocab.fine).encode(&utt.labels),
            };
            let l_inter = ctc_loss(&inter_lp, &inter_labels)?;
            let combined = loss_ilo_ctc(&l_ctc, &l_att, &l_inter, w)?;
            let report = LossReport {
                regime: cfg.regime,
                l_ctc: l_ctc.item_f64()?,
                l_att: l_att.item_f64()?,
                l_att_inter: None,
                l_ctc_inter: Some(l_inter.item_f64()?),
                combined: combined.item_f64()?,
            };
            Ok((combined, report))
        }
        Regime::Baseline => unreachable!("handled above"),
    }
}

/// Teacher-forced next-token accuracy of the primary decoder pass over the
/// dev set, eval mode. The intermediate branch plays no part here.
pub fn validation_accuracy<F: Scalar>(model: &AsrModel<F>, dev: &[Utterance]) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::contract("validation_accuracy: empty dev set"));
    }
    let vocab = model.cfg.vocab;
    let mut correct = 0usize;
    let mut total = 0usize;
    for utt in dev {
        let fx = model.ctx(Mode::Eval, 0);
        let enc = model.encode(&fx, &utt.feats)?;
        let logits = model.decoder_logits(&fx, &enc.final_memory, &utt.labels)?;
        let v = model.cfg.decoder.vocab_size;
        let data = logits.data_f64();
        let mut targets = utt.labels.clone();
        targets.push(vocab.eos());
        for (t, &y) in targets.iter().enumerate() {
            let row = &data[t * v..(t + 1) * v];
            let mut best = 0usize;
            for c in 1..v {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == y {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

pub struct Trainer<F: Scalar> {
    pub model: AsrModel<F>,
    pub cfg: TrainConfig,
    opt: Adam<F>,
    global_step: usize,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: AsrModel<F>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let inter_active = cfg.weights.gamma > 0.0 && cfg.regime != Regime::Baseline;
        if inter_active && model.cfg.encoder.ilo_layer.is_none() {
            return Err(Error::config(
                "regime with gamma > 0 requires encoder.ilo_layer",
            ));
        }
        let needs_head = cfg.regime == Regime::IloCtc && cfg.weights.gamma > 0.0;
        if needs_head != model.cfg.inter_ctc_vocab.is_some() {
            return Err(Error::config(if needs_head {
                "ilo_ctc regime requires the intermediate CTC head"
            } else {
                "only the ilo_ctc regime may carry the intermediate CTC head"
            }));
        }
        if needs_head {
            let want = cfg.ilo_units.ctc_vocab(&model.cfg.vocab);
            if model.cfg.inter_ctc_vocab != Some(want) {
                return Err(Error::config(format!(
                    "intermediate CTC head width {:?} does not match {:?} units ({want})",
                    model.cfg.inter_ctc_vocab, cfg.ilo_units
                )));
            }
        }
        Ok(Trainer {
            model,
            cfg,
            opt: Adam::new(),
            global_step: 0,
        })
    }

    pub fn global_step(&self) -> usize {
        self.global_step
    }

    /// One seeded-shuffle pass over the training set. Returns the epoch
    /// metrics and the number of utterances skipped as CTC-infeasible.
    pub fn train_epoch(
        &mut self,
        train: &[Utterance],
        dev: &[Utterance],
        epoch: usize,
    ) -> Result<(TrainMetricsRow, usize)> {
        let started = Instant::now();
        let seed = self.cfg.seed;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle", epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut sa_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "specaug", epoch as u64));

        let mut skipped = 0usize;
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut inter_seen = 0usize;
        let mut used_total = 0usize;

        for (batch_idx, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let tape_seed = derive_seed(
                seed,
                "dropout",
                ((epoch as u64) << 24) ^ batch_idx as u64,
            );
            let fx = self.model.ctx(Mode::Train, tape_seed);
            let mut total: Option<Tensor<F>> = None;
            let mut used = 0usize;
            for &i in batch {
                let utt = &train[i];
                if !utterance_feasible(
                    utt,
                    self.model.cfg.encoder.subsample_factor,
                    &self.cfg,
                    &self.model.cfg,
                ) {
                    log::warn!(
                        "skipping CTC-infeasible utterance {} ({} labels, {} memory rows)",
                        utt.feats.id,
                        utt.labels.len(),
                        subsampled_len(&utt.feats, self.model.cfg.encoder.subsample_factor)
                    );
                    skipped += 1;
                    continue;
                }
                let masked;
                let input = match (&self.cfg.spec_augment, fx.mode()) {
                    (Some(sa), Mode::Train) => {
                        masked = Utterance {
                            feats: spec_augment_lite(&utt.feats, sa, &mut sa_rng)?,
                            labels: utt.labels.clone(),
                        };
                        &masked
                    }
                    _ => utt,
                };
                let (loss, report) = utterance_loss(&self.model, &fx, input, &self.cfg)?;
                sums.0 += report.l_ctc;
                sums.1 += report.l_att;
                if let Some(v) = report.l_att_inter.or(report.l_ctc_inter) {
                    sums.2 += v;
                    inter_seen += 1;
                }
                sums.3 += report.combined;
                total = Some(match total {
                    Some(t) => t.add(&loss)?,
                    None => loss,
                });
                used += 1;
            }
            let Some(total) = total else {
                continue;
            };
            used_total += used;
            let batch_loss = total.scale(1.0 / used as f64);
            fx.backward(&batch_loss)?;
            let mut grads: BTreeMap<String, Vec<F>> = BTreeMap::new();
            for name in self.model.params.names() {
                if let Some(g) = fx.param_grad(&name) {
                    grads.insert(name, g);
                }
            }
            self.global_step += 1;
            let lr = noam_lr(
                self.global_step,
                self.model.cfg.encoder.d_model,
                self.cfg.warmup_steps,
                self.cfg.lr_factor,
            )?;
            self.opt.step(&mut self.model.params, &grads, lr)?;
        }

        let dev_accuracy = validation_accuracy(&self.model, dev)?;
        let n = used_total.max(1) as f64;
        let row = TrainMetricsRow {
            epoch,
            l_ctc: sums.0 / n,
            l_att: sums.1 / n,
            l_inter: (inter_seen > 0).then_some(sums.2 / inter_seen as f64),
            combined: sums.3 / n,
            dev_accuracy,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        Ok((row, skipped))
    }
}

// ---------------------------------------------------------------------------
// Full runs with artifacts on disk
// ---------------------------------------------------------------------------

pub struct TrainRunOutput {
    pub metrics: Vec<TrainMetricsRow>,
    pub skipped_total: usize,
    pub final_model: PathBuf,
    pub metrics_csv: PathBuf,
}

pub fn metrics_csv_string(rows: &[TrainMetricsRow]) -> String {
    let mut s = String::from("epoch,l_ctc,l_att,l_inter,combined,dev_accuracy,wall_seconds\n");
    for r in rows {
        let inter = r
            .l_inter
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        s.push_str(&format!(
            "{},{:.6},{:.6},{},{:.6},{:.6},{:.3}\n",
            r.epoch, r.l_ctc, r.l_att, inter, r.combined, r.dev_accuracy, r.wall_seconds
        ));
    }
    s
}

/// Train for the configured number of epochs, writing one checkpoint per
/// epoch, the metrics CSV, and the best-k-averaged final model.
pub fn train_run<F: Scalar>(
    trainer: &mut Trainer<F>,
    corpus: &Corpus,
    out_dir: &Path,
) -> Result<TrainRunOutput> {
    let ckpt_dir = out_dir.join("ckpt");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(ckpt_dir.display().to_string(), e))?;
    let mut metrics = Vec::new();
    let mut skipped_total = 0usize;
    let mut checkpoints = Vec::new();
    let epochs = trainer.cfg.epochs;
    let seed = trainer.cfg.seed;
    for epoch in 1..=epochs {
        let (row, skipped) = trainer.train_epoch(&corpus.train, &corpus.dev, epoch)?;
        skipped_total += skipped;
        log::info!(
            "epoch {epoch}: combined {:.4}, dev accuracy {:.4} ({:.2}s)",
            row.combined,
            row.dev_accuracy,
            row.wall_seconds
        );
        let ck = Checkpoint::from_store(
            &trainer.model.params,
            epoch as u64,
            row.dev_accuracy,
            RngState {
                seed,
                next_epoch: epoch as u64 + 1,
            },
        );
        ck.save(&ckpt_dir.join(format!("epoch_{epoch:03}.ckpt")))?;
        checkpoints.push(ck);
        metrics.push(row);
    }

    let averaged = average_checkpoints(&checkpoints, trainer.cfg.keep_best)?;
    let last = checkpoints.last().expect("epochs >= 1");
    let final_ck = Checkpoint {
        epoch: last.epoch,
        dev_accuracy: last.dev_accuracy,
        rng: last.rng,
        params: averaged,
    };
    let final_model = out_dir.join("model.final.ckpt");
    final_ck.save(&final_model)?;

    let metrics_csv = out_dir.join("metrics.csv");
    fs::write(&metrics_csv, metrics_csv_string(&metrics))
        .map_err(|e| Error::io(metrics_csv.display().to_string(), e))?;

    Ok(TrainRunOutput {
        metrics,
        skipped_total,
        final_model,
        metrics_csv,
    })
}

/// Dev-accuracy trajectories of the three regimes from one shared
/// initialization. Row 0 is the pre-training accuracy.
pub struct CompareResult {
    /// (epoch, baseline, proposed, ilo_ctc)
    pub rows: Vec<(usize, f64, f64, f64)>,
}

pub fn compare_csv_string(result: &CompareResult) -> String {
    let mut s = String::from("epoch,acc_baseline,acc_proposed,acc_ilo_ctc\n");
    for (e, a, b, c) in &result.rows {
        s.push_str(&format!("{e},{a:.6},{b:.6},{c:.6}\n"));
    }
    s
}

/// Build, from one seed, the three regime models (identical shared
/// parameters by name-keyed initialization) and train each for the same
/// epoch budget, recording dev accuracy per epoch.
pub fn compare_regimes<F: Scalar>(
    corpus: &Corpus,
    base_model_cfg: &ModelConfig,
    base_train_cfg: &TrainConfig,
    gamma_proposed: f64,
    gamma_ilo_ctc: f64,
    init_ckpt_out: Option<&Path>,
) -> Result<CompareResult> {
    if base_model_cfg.inter_ctc_vocab.is_some() {
        return Err(Error::config(
            "compare_regimes derives per-regime heads itself; pass a head-free model config",
        ));
    }
    let alpha = base_train_cfg.weights.alpha;
    let seed = base_train_cfg.seed;

    let mk_model = |with_head: bool| -> Result<AsrModel<F>> {
        let mut cfg = base_model_cfg.clone();
        if with_head {
            cfg.inter_ctc_vocab = Some(base_train_cfg.ilo_units.ctc_vocab(&cfg.vocab));
        }
        AsrModel::build(cfg, seed)
    };

    if let Some(path) = init_ckpt_out {
        let init = mk_model(false)?;
        Checkpoint::from_store(&init.params, 0, 0.0, RngState { seed, next_epoch: 1 })
            .save(path)?;
    }

    let mut curves: Vec<Vec<f64>> = Vec::new();
    for regime in [Regime::Baseline, Regime::Proposed, Regime::IloCtc] {
        let (weights, with_head) = match regime {
            Regime::Baseline => (LossWeights::baseline(alpha)?, false),
            Regime::Proposed => (LossWeights::with_gamma(alpha, gamma_proposed)?, false),
            Regime::IloCtc => (LossWeights::with_gamma(alpha, gamma_ilo_ctc)?, true),
        };
        let model = mk_model(with_head)?;
        let cfg = TrainConfig {
            regime,
            weights,
            ..base_train_cfg.clone()
        };
        let mut trainer = Trainer::new(model, cfg)?;
        let mut curve = vec![validation_accuracy(&trainer.model, &corpus.dev)?];
        for epoch in 1..=base_train_cfg.epochs {
            let (row, _) = trainer.train_epoch(&corpus.train, &corpus.dev, epoch)?;
            curve.push(row.dev_accuracy);
        }
        curves.push(curve);
    }

    let rows = (0..=base_train_cfg.epochs)
        .map(|e| (e, curves[0][e], curves[1][e], curves[2][e]))
        .collect();
    Ok(CompareResult { rows })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, ToyCorpusSpec, Vocab};
    use crate::decoder::DecoderConfig;
    use crate::encoder::{EncoderConfig, FinalNorm};

    pub(crate) fn tiny_corpus(n: usize, seed: u64) -> Corpus {
        generate_corpus(&ToyCorpusSpec {
            vocab_size: 5,
            feat_dim: 6,
            frames_per_token: 4,
            noise_std: 0.1,
            num_train: n,
            num_dev: 6,
            num_test: 4,
            min_len: 2,
            max_len: 4,
            seed,
        })
        .unwrap()
    }

    pub(crate) fn tiny_model_cfg(inter: Option<IloUnits>) -> ModelConfig {
        let vocab = Vocab::new(5).unwrap();
        ModelConfig {
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
            inter_ctc_vocab: inter.map(|u| u.ctc_vocab(&vocab)),
        }
    }

    fn train_cfg(regime: Regime, gamma: f64, epochs: usize, seed: u64) -> TrainConfig {
        let weights = if gamma == 0.0 && regime == Regime::Baseline {
            LossWeights::baseline(0.3).unwrap()
        } else {
            LossWeights::with_gamma(0.3, gamma).unwrap()
        };
        TrainConfig {
            regime,
            weights,
            epochs,
            batch_size: 4,
            warmup_steps: 50,
            lr_factor: 1.0,
            seed,
            label_smoothing: 0.1,
            keep_best: 5,
            ilo_units: IloUnits::Fine,
            spec_augment: None,
        }
    }

    fn param_bits(model: &AsrModel<f32>) -> Vec<u32> {
        model
            .params
            .iter()
            .flat_map(|(_, p)| p.data.iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn epochs_are_deterministic() {
        let corpus = tiny_corpus(16, 3);
        let run = || {
            let model = AsrModel::<f32>::build(tiny_model_cfg(None), 7).unwrap();
            let mut tr = Trainer::new(model, train_cfg(Regime::Proposed, 0.2, 2, 7)).unwrap();
            let mut rows = Vec::new();
            for e in 1..=2 {
                let (row, _) = tr.train_epoch(&corpus.train, &corpus.dev, e).unwrap();
                rows.push((row.combined.to_bits(), row.dev_accuracy.to_bits()));
            }
            (rows, param_bits(&tr.model))
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn gamma_zero_trajectories_match_baseline_bitwise() {
        let corpus = tiny_corpus(12, 5);
        let run = |regime: Regime| {
            let model = AsrModel::<f32>::build(tiny_model_cfg(None), 11).unwrap();
            let cfg = TrainConfig {
                regime,
                weights: LossWeights::with_gamma(0.3, 0.0).unwrap(),
                ..train_cfg(Regime::Baseline, 0.0, 3, 11)
            };
            let mut tr = Trainer::new(model, cfg).unwrap();
            for e in 1..=3 {
                tr.train_epoch(&corpus.train, &corpus.dev, e).unwrap();
            }
            param_bits(&tr.model)
        };
        let base = run(Regime::Baseline);
        assert_eq!(run(Regime::Proposed), base);
        assert_eq!(run(Regime::IloCtc), base);
    }

    #[test]
    fn untrained_accuracy_is_near_chance() {
        let corpus = tiny_corpus(4, 9);
        let model = AsrModel::<f32>::build(tiny_model_cfg(None), 21).unwrap();
        let acc = validation_accuracy(&model, &corpus.dev).unwrap();
        let v = model.cfg.decoder.vocab_size as f64;
        let positions: usize = corpus.dev.iter().map(|u| u.labels.len() + 1).sum();
        let p = 1.0 / v;
        let sigma = (p * (1.0 - p) / positions as f64).sqrt();
        assert!(
            (acc - p).abs() <= 3.0 * sigma + 0.12,
            "accuracy {acc} too far from chance {p} (sigma {sigma})"
        );
    }

    #[test]
    fn overfits_one_utterance() {
        let corpus = tiny_corpus(1, 13);
        let one = vec![corpus.train[0].clone()];
        let model = AsrModel::<f32>::build(tiny_model_cfg(None), 3).unwrap();
        let mut cfg = train_cfg(Regime::Baseline, 0.0, 1, 3);
        cfg.warmup_steps = 20;
        let mut tr = Trainer::new(model, cfg).unwrap();
        let mut acc = 0.0;
        for e in 1..=120 {
            let (row, _) = tr.train_epoch(&one, &one, e).unwrap();
            acc = row.dev_accuracy;
            if acc == 1.0 {
                break;
            }
        }
        assert_eq!(acc, 1.0, "failed to memorize a single utterance");
    }

    #[test]
    fn validation_ignores_ilo_branch() {
        let corpus = tiny_corpus(4, 17);
        let with_tap = AsrModel::<f32>::build(tiny_model_cfg(None), 4).unwrap();
        let mut cfg = tiny_model_cfg(None);
        cfg.encoder.ilo_layer = None;
        let without_tap = AsrModel::<f32>::build(cfg, 4).unwrap();
        let a = validation_accuracy(&with_tap, &corpus.dev).unwrap();
        let b = validation_accuracy(&without_tap, &corpus.dev).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn infeasible_utterances_are_skipped_and_counted() {
        let corpus = tiny_corpus(4, 19);
        // labels with an adjacent repeat need T' >= len + 1; 2 tokens of
        // 4 frames give T' = 2 < 3
        let mut bad = corpus.train[0].clone();
        bad.labels = vec![1, 1];
        bad.feats.frames.truncate(8 * bad.feats.dim);
        let train = vec![bad, corpus.train[1].clone()];
        let model = AsrModel::<f32>::build(tiny_model_cfg(None), 5).unwrap();
        let mut tr = Trainer::new(model, train_cfg(Regime::Baseline, 0.0, 1, 5)).unwrap();
        let (_, skipped) = tr.train_epoch(&train, &corpus.dev, 1).unwrap();
        assert_eq!(skipped, 1);
    }

    #[test]
    fn spec_augment_masking_rules() {
        let corpus = tiny_corpus(2, 23);
        let feats = &corpus.train[0].feats;
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        // zero masks configured: identity
        let idcfg = SpecAugmentConfig {
            time_masks: 0,
            time_width: 0,
            freq_masks: 0,
            freq_width: 0,
        };
        let same = spec_augment_lite(feats, &idcfg, &mut rng).unwrap();
        assert_eq!(same.frames, feats.frames);

        // one time mask of width w zeroes exactly w * D new cells
        let pre_zeros = feats.frames.iter().filter(|&&v| v == 0.0).count();
        let tcfg = SpecAugmentConfig {
            time_masks: 1,
            time_width: 2,
            freq_masks: 0,
            freq_width: 0,
        };
        let masked = spec_augment_lite(feats, &tcfg, &mut rng).unwrap();
        let post_zeros = masked.frames.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(post_zeros - pre_zeros, 2 * feats.dim);

        // mask as wide as the axis is a configuration error
        let wide = SpecAugmentConfig {
            time_masks: 1,
            time_width: feats.len(),
            freq_masks: 0,
            freq_width: 0,
        };
        assert!(matches!(
            spec_augment_lite(feats, &wide, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn eval_pipeline_never_masks() {
        // two trainings, same seed, spec_augment on: dev accuracy must be a
        // pure function of parameters, so evaluating twice gives the same
        // value whether or not augmentation is configured
        let corpus = tiny_corpus(6, 29);
        let model = AsrModel::<f32>::build(tiny_model_cfg(None), 6).unwrap();
        let acc_plain = validation_accuracy(&model, &corpus.dev).unwrap();
        // masking config exists but validation never consults it
        let model2 = AsrModel::<f32>::build(tiny_model_cfg(None), 6).unwrap();
        let acc_again = validation_accuracy(&model2, &corpus.dev).unwrap();
        assert_eq!(acc_plain.to_bits(), acc_again.to_bits());
    }

    #[test]
    fn compare_regimes_shares_initialization() {
        let corpus = tiny_corpus(8, 31);
        let base = tiny_model_cfg(None);
        let cfg = train_cfg(Regime::Baseline, 0.0, 1, 13);
        let result =
            compare_regimes::<f32>(&corpus, &base, &cfg, 0.2, 0.15, None).unwrap();
        assert_eq!(result.rows.len(), 2);
        let (e0, a0, b0, c0) = result.rows[0];
        assert_eq!(e0, 0);
        assert_eq!(a0.to_bits(), b0.to_bits());
        assert_eq!(a0.to_bits(), c0.to_bits());
        let csv = compare_csv_string(&result);
        assert!(csv.starts_with("epoch,acc_baseline,acc_proposed,acc_ilo_ctc\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn train_run_writes_artifacts() {
        let corpus = tiny_corpus(8, 37);
        let model = AsrModel::<f32>::build(tiny_model_cfg(None), 8).unwrap();
        let mut tr = Trainer::new(model, train_cfg(Regime::Baseline, 0.0, 2, 8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = train_run(&mut tr, &corpus, dir.path()).unwrap();
        assert_eq!(out.metrics.len(), 2);
        assert!(dir.path().join("ckpt/epoch_001.ckpt").exists());
        assert!(dir.path().join("ckpt/epoch_002.ckpt").exists());
        assert!(out.final_model.exists());
        let csv = fs::read_to_string(&out.metrics_csv).unwrap();
        assert_eq!(csv.lines().count(), 3, "header + one row per epoch");
        assert!(csv.ends_with('\n'));
    }
}
