//! Flat dotted-key run configuration.
//!
//! One text file of `key = value` lines (# comments allowed) covering every
//! knob; any key can be overridden on the command line with `--set
//! key=value`. Unknown keys are hard errors, and the fully resolved
//! configuration is echoed into each command's output directory.

use crate::corpus::{ToyCorpusSpec, Vocab};
use crate::decode::{DecodeConfig, DecodeMode};
use crate::decoder::DecoderConfig;
use crate::encoder::{EncoderConfig, FinalNorm};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, Regime};
use crate::model::{IloUnits, ModelConfig};
use crate::train::{SpecAugmentConfig, TrainConfig};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

fn default_entries() -> Vec<(&'static str, &'static str)> {
    vec![
        ("seed", "17"),
        ("out_dir", "runs/out"),
        ("corpus.dir", "data/toy"),
        ("corpus.vocab_size", "12"),
        ("corpus.feat_dim", "16"),
        ("corpus.frames_per_token", "4"),
        ("corpus.noise_std", "0.3"),
        ("corpus.num_train", "500"),
        ("corpus.num_dev", "50"),
        ("corpus.num_test", "50"),
        ("corpus.min_len", "3"),
        ("corpus.max_len", "8"),
        ("encoder.num_layers", "6"),
        ("encoder.d_model", "32"),
        ("encoder.num_heads", "2"),
        ("encoder.ffn_dim", "64"),
        ("encoder.conv_kernel", "7"),
        ("encoder.dropout_p", "0.1"),
        ("encoder.subsample_factor", "4"),
        // auto resolves to ceil(0.75 * num_layers), clamped to [1, N-1]
        ("encoder.ilo_layer", "auto"),
        // parallel: y = LN(x'') + FFN(x'')/2; wrapped: y = LN(x'' + FFN(x'')/2)
        ("encoder.final_layernorm", "parallel"),
        ("decoder.num_layers", "2"),
        ("decoder.num_heads", "2"),
        ("decoder.ffn_dim", "64"),
        ("decoder.dropout_p", "0.1"),
        ("train.regime", "proposed"),
        ("train.alpha", "0.3"),
        // auto: 0.2 for proposed, 0.15 / 0.1 for ilo_ctc fine / coarse units
        ("train.gamma", "auto"),
        ("train.epochs", "30"),
        ("train.batch_size", "10"),
        ("train.warmup_steps", "400"),
        ("train.lr_factor", "1.0"),
        ("train.label_smoothing", "0.1"),
        ("train.keep_best", "5"),
        ("train.ilo_units", "fine"),
        ("train.spec_augment", "false"),
        ("train.sa_time_masks", "1"),
        ("train.sa_time_width", "4"),
        ("train.sa_freq_masks", "1"),
        ("train.sa_freq_width", "2"),
        ("decode.mode", "hybrid"),
        ("decode.beam_size", "10"),
        ("decode.lambda_ctc", "0.2"),
        ("decode.lambda_att", "0.8"),
        ("decode.max_len_ratio", "1.0"),
        // auto: <out_dir>/model.final.ckpt
        ("decode.model", "auto"),
        ("compare.gamma_proposed", "0.2"),
        ("compare.gamma_ilo_ctc", "0.15"),
        // auto: every valid tap 1..num_layers-1
        ("sweep.layers", "auto"),
    ]
}

#[derive(Debug, Clone)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn defaults() -> Self {
        RawConfig {
            values: default_entries()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    fn set_checked(&mut self, key: &str, value: &str, origin: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(Error::config(format!("unknown configuration key {key:?} ({origin})")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn apply_line(&mut self, line: &str, origin: &str) -> Result<()> {
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "expected key = value, got {line:?} ({origin})"
            )));
        };
        self.set_checked(key.trim(), value.trim(), origin)
    }

    /// Defaults, then the optional file, then --set overrides, then --seed.
    pub fn load(
        file: Option<&Path>,
        sets: &[String],
        seed: Option<u64>,
    ) -> Result<Self> {
        let mut cfg = RawConfig::defaults();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            for (idx, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                cfg.apply_line(line, &format!("{}:{}", path.display(), idx + 1))?;
            }
        }
        for s in sets {
            cfg.apply_line(s, "--set")?;
        }
        if let Some(s) = seed {
            cfg.values.insert("seed".into(), s.to_string());
        }
        Ok(cfg)
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::config(format!("unknown configuration key {key:?}")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.get_str(key)?;
        raw.parse::<T>().map_err(|e| {
            Error::config(format!("key {key} = {raw:?} did not parse: {e}"))
        })
    }
}

/// Fully resolved, validated settings for one command invocation.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus_dir: PathBuf,
    pub corpus: ToyCorpusSpec,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    /// None means "model.final.ckpt under out_dir"
    pub decode_model: Option<PathBuf>,
    pub compare_gamma_proposed: f64,
    pub compare_gamma_ilo_ctc: f64,
    /// None means every valid tap layer
    pub sweep_layers: Option<Vec<usize>>,
}

fn auto_tap(num_layers: usize) -> usize {
    ((0.75 * num_layers as f64).ceil() as usize).clamp(1, num_layers.saturating_sub(1).max(1))
}

impl RunSettings {
    pub fn resolve(raw: &RawConfig) -> Result<Self> {
        let seed: u64 = raw.get("seed")?;

        let corpus = ToyCorpusSpec {
            vocab_size: raw.get("corpus.vocab_size")?,
            feat_dim: raw.get("corpus.feat_dim")?,
            frames_per_token: raw.get("corpus.frames_per_token")?,
            noise_std: raw.get("corpus.noise_std")?,
            num_train: raw.get("corpus.num_train")?,
            num_dev: raw.get("corpus.num_dev")?,
            num_test: raw.get("corpus.num_test")?,
            min_len: raw.get("corpus.min_len")?,
            max_len: raw.get("corpus.max_len")?,
            seed,
        };
        corpus.validate()?;
        let vocab = corpus.vocab();

        let num_layers: usize = raw.get("encoder.num_layers")?;
        let ilo_layer = match raw.get_str("encoder.ilo_layer")? {
            "auto" => Some(auto_tap(num_layers)),
            "none" => None,
            other => Some(other.parse::<usize>().map_err(|_| {
                Error::config(format!(
                    "key encoder.ilo_layer = {other:?} did not parse (auto | none | integer)"
                ))
            })?),
        };
        let final_norm = match raw.get_str("encoder.final_layernorm")? {
            "parallel" => FinalNorm::Parallel,
            "wrapped" => FinalNorm::Wrapped,
            other => {
                return Err(Error::config(format!(
                    "key encoder.final_layernorm = {other:?} (expected parallel | wrapped)"
                )))
            }
        };
        let encoder = EncoderConfig {
            num_layers,
            d_model: raw.get("encoder.d_model")?,
            num_heads: raw.get("encoder.num_heads")?,
            ffn_dim: raw.get("encoder.ffn_dim")?,
            conv_kernel: raw.get("encoder.conv_kernel")?,
            dropout_p: raw.get("encoder.dropout_p")?,
            subsample_factor: raw.get("encoder.subsample_factor")?,
            feat_dim: corpus.feat_dim,
            ilo_layer,
            final_norm,
        };
        encoder.validate()?;

        let decoder = DecoderConfig {
            num_layers: raw.get("decoder.num_layers")?,
            d_model: encoder.d_model,
            num_heads: raw.get("decoder.num_heads")?,
            ffn_dim: raw.get("decoder.ffn_dim")?,
            dropout_p: raw.get("decoder.dropout_p")?,
            vocab_size: vocab.decoder_vocab(),
        };
        decoder.validate()?;

        let regime = Regime::parse(raw.get_str("train.regime")?)?;
        let ilo_units = IloUnits::parse(raw.get_str("train.ilo_units")?)?;
        let alpha: f64 = raw.get("train.alpha")?;
        let gamma = match (regime, raw.get_str("train.gamma")?) {
            (Regime::Baseline, _) => 0.0,
            (Regime::Proposed, "auto") => 0.2,
            (Regime::IloCtc, "auto") => match ilo_units {
                IloUnits::Fine => 0.15,
                IloUnits::Coarse => 0.1,
            },
            (_, other) => other.parse::<f64>().map_err(|_| {
                Error::config(format!(
                    "key train.gamma = {other:?} did not parse (auto | float)"
                ))
            })?,
        };
        let weights = LossWeights::with_gamma(alpha, gamma)?;
        let spec_augment = if raw.get::<bool>("train.spec_augment")? {
            Some(SpecAugmentConfig {
                time_masks: raw.get("train.sa_time_masks")?,
                time_width: raw.get("train.sa_time_width")?,
                freq_masks: raw.get("train.sa_freq_masks")?,
                freq_width: raw.get("train.sa_freq_width")?,
            })
        } else {
            None
        };
        let train = TrainConfig {
            regime,
            weights,
            epochs: raw.get("train.epochs")?,
            batch_size: raw.get("train.batch_size")?,
            warmup_steps: raw.get("train.warmup_steps")?,
            lr_factor: raw.get("train.lr_factor")?,
            seed,
            label_smoothing: raw.get("train.label_smoothing")?,
            keep_best: raw.get("train.keep_best")?,
            ilo_units,
            spec_augment,
        };
        train.validate()?;

        let decode = DecodeConfig {
            mode: DecodeMode::parse(raw.get_str("decode.mode")?)?,
            beam_size: raw.get("decode.beam_size")?,
            lambda_ctc: raw.get("decode.lambda_ctc")?,
            lambda_att: raw.get("decode.lambda_att")?,
            max_len_ratio: raw.get("decode.max_len_ratio")?,
        };
        decode.validate()?;
        let decode_model = match raw.get_str("decode.model")? {
            "auto" => None,
            path => Some(PathBuf::from(path)),
        };

        let sweep_layers = match raw.get_str("sweep.layers")? {
            "auto" => None,
            list => Some(
                list.split(',')
                    .map(|s| {
                        s.trim().parse::<usize>().map_err(|_| {
                            Error::config(format!(
                                "key sweep.layers = {list:?}: {s:?} is not an integer"
                            ))
                        })
                    })
                    .collect::<Result<Vec<usize>>>()?,
            ),
        };

        Ok(RunSettings {
            seed,
            out_dir: PathBuf::from(raw.get_str("out_dir")?),
            corpus_dir: PathBuf::from(raw.get_str("corpus.dir")?),
            corpus,
            encoder,
            decoder,
            train,
            decode,
            decode_model,
            compare_gamma_proposed: raw.get("compare.gamma_proposed")?,
            compare_gamma_ilo_ctc: raw.get("compare.gamma_ilo_ctc")?,
            sweep_layers,
        })
    }

    pub fn vocab(&self) -> Vocab {
        self.corpus.vocab()
    }

    /// Model layout for this run's regime: the tap is dropped for the
    /// baseline and the intermediate CTC head exists only for ilo_ctc.
    pub fn model_config(&self) -> ModelConfig {
        self.model_config_for(self.train.regime, self.train.weights.gamma)
    }

    pub fn model_config_for(&self, regime: Regime, gamma: f64) -> ModelConfig {
        let mut encoder = self.encoder.clone();
        if regime == Regime::Baseline {
            encoder.ilo_layer = None;
        }
        let inter_ctc_vocab = (regime == Regime::IloCtc && gamma > 0.0)
            .then(|| self.train.ilo_units.ctc_vocab(&self.vocab()));
        ModelConfig {
            vocab: self.vocab(),
            encoder,
            decoder: self.decoder.clone(),
            inter_ctc_vocab,
        }
    }

    /// The resolved configuration as echoable `key = value` lines.
    pub fn echo_string(&self) -> String {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("out_dir", self.out_dir.display().to_string());
        put("corpus.dir", self.corpus_dir.display().to_string());
        put("corpus.vocab_size", self.corpus.vocab_size.to_string());
        put("corpus.feat_dim", self.corpus.feat_dim.to_string());
        put(
            "corpus.frames_per_token",
            self.corpus.frames_per_token.to_string(),
        );
        put("corpus.noise_std", self.corpus.noise_std.to_string());
        put("corpus.num_train", self.corpus.num_train.to_string());
        put("corpus.num_dev", self.corpus.num_dev.to_string());
        put("corpus.num_test", self.corpus.num_test.to_string());
        put("corpus.min_len", self.corpus.min_len.to_string());
        put("corpus.max_len", self.corpus.max_len.to_string());
        put("encoder.num_layers", self.encoder.num_layers.to_string());
        put("encoder.d_model", self.encoder.d_model.to_string());
        put("encoder.num_heads", self.encoder.num_heads.to_string());
        put("encoder.ffn_dim", self.encoder.ffn_dim.to_string());
        put("encoder.conv_kernel", self.encoder.conv_kernel.to_string());
        put("encoder.dropout_p", self.encoder.dropout_p.to_string());
        put(
            "encoder.subsample_factor",
            self.encoder.subsample_factor.to_string(),
        );
        put(
            "encoder.ilo_layer",
            self.encoder
                .ilo_layer
                .map(|i| i.to_string())
                .unwrap_or_else(|| "none".into()),
        );
        put(
            "encoder.final_layernorm",
            match self.encoder.final_norm {
                FinalNorm::Parallel => "parallel".into(),
                FinalNorm::Wrapped => "wrapped".into(),
            },
        );
        put("decoder.num_layers", self.decoder.num_layers.to_string());
        put("decoder.num_heads", self.decoder.num_heads.to_string());
        put("decoder.ffn_dim", self.decoder.ffn_dim.to_string());
        put("decoder.dropout_p", self.decoder.dropout_p.to_string());
        put("train.regime", self.train.regime.as_str().to_string());
        put("train.alpha", self.train.weights.alpha.to_string());
        put("train.gamma", self.train.weights.gamma.to_string());
        put("train.epochs", self.train.epochs.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.warmup_steps", self.train.warmup_steps.to_string());
        put("train.lr_factor", self.train.lr_factor.to_string());
        put(
            "train.label_smoothing",
            self.train.label_smoothing.to_string(),
        );
        put("train.keep_best", self.train.keep_best.to_string());
        put(
            "train.ilo_units",
            match self.train.ilo_units {
                IloUnits::Fine => "fine".into(),
                IloUnits::Coarse => "coarse".into(),
            },
        );
        put(
            "train.spec_augment",
            self.train.spec_augment.is_some().to_string(),
        );
        if let Some(sa) = &self.train.spec_augment {
            put("train.sa_time_masks", sa.time_masks.to_string());
            put("train.sa_time_width", sa.time_width.to_string());
            put("train.sa_freq_masks", sa.freq_masks.to_string());
            put("train.sa_freq_width", sa.freq_width.to_string());
        }
        put("decode.mode", self.decode.mode.as_str().to_string());
        put("decode.beam_size", self.decode.beam_size.to_string());
        put("decode.lambda_ctc", self.decode.lambda_ctc.to_string());
        put("decode.lambda_att", self.decode.lambda_att.to_string());
        put(
            "decode.max_len_ratio",
            self.decode.max_len_ratio.to_string(),
        );
        put(
            "decode.model",
            self.decode_model
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| {
                    self.out_dir.join("model.final.ckpt").display().to_string()
                }),
        );
        put(
            "compare.gamma_proposed",
            self.compare_gamma_proposed.to_string(),
        );
        put(
            "compare.gamma_ilo_ctc",
            self.compare_gamma_ilo_ctc.to_string(),
        );
        put(
            "sweep.layers",
            self.sweep_layers
                .as_ref()
                .map(|ls| {
                    ls.iter()
                        .map(|l| l.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .unwrap_or_else(|| {
                    (1..self.encoder.num_layers)
                        .map(|l| l.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                }),
        );
        let mut s = String::new();
        for (k, v) in &map {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = dir.join("config.resolved");
        fs::write(&path, self.echo_string())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let raw = RawConfig::defaults();
        let rs = RunSettings::resolve(&raw).unwrap();
        assert_eq!(rs.encoder.num_layers, 6);
        // auto tap: ceil(0.75 * 6) = 5
        assert_eq!(rs.encoder.ilo_layer, Some(5));
        assert_eq!(rs.train.weights.gamma, 0.2);
        assert!((rs.train.weights.beta - 0.5).abs() < 1e-12);
        assert_eq!(rs.decode.beam_size, 10);
        assert_eq!(rs.decoder.vocab_size, 15);
    }

    #[test]
    fn unknown_key_is_hard_error() {
        let err = RawConfig::load(None, &["train.epoch=3".into()], None).unwrap_err();
        assert!(err.to_string().contains("train.epoch"), "{err}");
    }

    #[test]
    fn file_and_set_overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# comment\ntrain.epochs = 7\nseed = 3\n").unwrap();
        let raw = RawConfig::load(
            Some(&path),
            &["train.epochs=9".into()],
            Some(99),
        )
        .unwrap();
        let rs = RunSettings::resolve(&raw).unwrap();
        assert_eq!(rs.train.epochs, 9);
        assert_eq!(rs.seed, 99);
    }

    #[test]
    fn gamma_auto_tracks_regime_and_units() {
        let pick = |sets: &[&str]| {
            let raw =
                RawConfig::load(None, &sets.iter().map(|s| s.to_string()).collect::<Vec<_>>(), None)
                    .unwrap();
            RunSettings::resolve(&raw).unwrap().train.weights.gamma
        };
        assert_eq!(pick(&["train.regime=baseline"]), 0.0);
        assert_eq!(pick(&["train.regime=proposed"]), 0.2);
        assert_eq!(pick(&["train.regime=ilo_ctc"]), 0.15);
        assert_eq!(pick(&["train.regime=ilo_ctc", "train.ilo_units=coarse"]), 0.1);
        assert_eq!(pick(&["train.regime=proposed", "train.gamma=0.05"]), 0.05);
    }

    #[test]
    fn regime_shapes_the_model_config() {
        let raw = RawConfig::load(None, &["train.regime=baseline".into()], None).unwrap();
        let rs = RunSettings::resolve(&raw).unwrap();
        assert_eq!(rs.model_config().encoder.ilo_layer, None);
        assert_eq!(rs.model_config().inter_ctc_vocab, None);

        let raw = RawConfig::load(None, &["train.regime=ilo_ctc".into()], None).unwrap();
        let rs = RunSettings::resolve(&raw).unwrap();
        assert_eq!(rs.model_config().encoder.ilo_layer, Some(5));
        assert_eq!(rs.model_config().inter_ctc_vocab, Some(13));
    }

    #[test]
    fn echo_is_deterministic_and_reloadable() {
        let raw = RawConfig::load(None, &["train.epochs=3".into()], Some(5)).unwrap();
        let rs = RunSettings::resolve(&raw).unwrap();
        let a = rs.echo_string();
        let b = rs.echo_string();
        assert_eq!(a, b);
        // the echo itself parses back through the loader
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.resolved");
        fs::write(&path, &a).unwrap();
        let reloaded = RawConfig::load(Some(&path), &[], None).unwrap();
        let rs2 = RunSettings::resolve(&reloaded).unwrap();
        assert_eq!(rs2.train.epochs, 3);
        assert_eq!(rs2.seed, 5);
        assert_eq!(rs2.echo_string(), a);
    }

    #[test]
    fn invalid_values_name_the_key() {
        let err = RawConfig::load(None, &["train.epochs=three".into()], None)
            .and_then(|raw| RunSettings::resolve(&raw))
            .unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
    }
}
