//! Synthetic transduction corpus and evaluation metrics.
//!
//! Each vocabulary token owns a fixed random prototype block of frames;
//! an utterance is the concatenation of its tokens' prototypes plus white
//! noise. With zero noise the mapping from features to labels is exact by
//! construction.

use crate::error::{Error, Result};
use crate::params::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

pub const BLANK: usize = 0;

/// Token id layout: 0 = blank, 1..=fine are content tokens, then sos, eos.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub fine: usize,
}

impl Vocab {
    pub fn new(fine: usize) -> Result<Self> {
        if fine == 0 {
            return Err(Error::config("vocab_size must be positive"));
        }
        Ok(Vocab { fine })
    }

    pub fn sos(&self) -> usize {
        self.fine + 1
    }

    pub fn eos(&self) -> usize {
        self.fine + 2
    }

    /// Decoder softmax width: blank + fine + sos + eos.
    pub fn decoder_vocab(&self) -> usize {
        self.fine + 3
    }

    /// CTC softmax width: blank + fine.
    pub fn ctc_vocab(&self) -> usize {
        self.fine + 1
    }

    pub fn is_content(&self, tok: usize) -> bool {
        (1..=self.fine).contains(&tok)
    }

    /// A label body must be non-empty content tokens only (no specials).
    pub fn validate_body(&self, toks: &[usize]) -> Result<()> {
        if toks.is_empty() {
            return Err(Error::contract("empty label body"));
        }
        for &t in toks {
            if !self.is_content(t) {
                return Err(Error::contract(format!(
                    "token {t} is not a content token (1..={})",
                    self.fine
                )));
            }
        }
        Ok(())
    }

    pub fn detok(&self, toks: &[usize]) -> String {
        toks.iter()
            .map(|&t| {
                if self.is_content(t) && t <= 26 {
                    char::from(b'a' + (t as u8 - 1)).to_string()
                } else {
                    format!("<{t}>")
                }
            })
            .collect()
    }
}

/// Merged-bigram view of the fine vocabulary: adjacent token pairs become
/// single units, an odd trailing token passes through. Lossless.
#[derive(Debug, Clone, Copy)]
pub struct CoarseVocab {
    pub fine: usize,
}

impl CoarseVocab {
    pub fn new(fine: usize) -> Self {
        CoarseVocab { fine }
    }

    /// CTC softmax width over coarse units: blank + singles + all bigrams.
    pub fn ctc_vocab(&self) -> usize {
        1 + self.fine + self.fine * self.fine
    }

    fn bigram_id(&self, a: usize, b: usize) -> usize {
        self.fine + (a - 1) * self.fine + b
    }

    /// Greedy left-to-right pairing.
    pub fn encode(&self, body: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(body.len().div_ceil(2));
        let mut i = 0;
        while i + 1 < body.len() {
            out.push(self.bigram_id(body[i], body[i + 1]));
            i += 2;
        }
        if i < body.len() {
            out.push(body[i]);
        }
        out
    }

    pub fn expand(&self, coarse: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(coarse.len() * 2);
        for &u in coarse {
            if u <= self.fine {
                out.push(u);
            } else {
                let z = u - self.fine - 1;
                out.push(z / self.fine + 1);
                out.push(z % self.fine + 1);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub id: String,
    pub dim: usize,
    /// Row-major `[t x dim]`.
    pub frames: Vec<f32>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub feats: FeatureSequence,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ToyCorpusSpec {
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub frames_per_token: usize,
    pub noise_std: f64,
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            vocab_size: 12,
            feat_dim: 16,
            frames_per_token: 4,
            noise_std: 0.3,
            num_train: 500,
            num_dev: 50,
            num_test: 50,
            min_len: 3,
            max_len: 8,
            seed: 17,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("corpus.vocab_size must be positive"));
        }
        if self.feat_dim == 0 || self.frames_per_token == 0 {
            return Err(Error::config(
                "corpus.feat_dim and corpus.frames_per_token must be positive",
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "corpus.min_len={} corpus.max_len={} invalid",
                self.min_len, self.max_len
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("corpus.noise_std must be nonnegative"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab { fine: self.vocab_size }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Token prototypes: one `[frames_per_token x feat_dim]` block per token,
/// drawn once per corpus seed.
fn prototypes(spec: &ToyCorpusSpec) -> Vec<Vec<f64>> {
    (1..=spec.vocab_size)
        .map(|tok| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "proto", tok as u64));
            (0..spec.frames_per_token * spec.feat_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn sample_utterance(
    spec: &ToyCorpusSpec,
    protos: &[Vec<f64>],
    split: &str,
    idx: usize,
) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        spec.seed,
        split,
        idx as u64,
    ));
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    // no immediate repeats: keeps the noise-free corpus exactly decodable
    // through CTC collapse at one memory row per token
    let mut labels = Vec::with_capacity(len);
    for _ in 0..len {
        let tok = match labels.last() {
            None => rng.gen_range(1..=spec.vocab_size),
            Some(&prev) => {
                if spec.vocab_size == 1 {
                    prev
                } else {
                    let step = rng.gen_range(1..spec.vocab_size);
                    (prev - 1 + step) % spec.vocab_size + 1
                }
            }
        };
        labels.push(tok);
    }
    let mut frames = Vec::with_capacity(len * spec.frames_per_token * spec.feat_dim);
    for &tok in &labels {
        for &v in &protos[tok - 1] {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal);
            frames.push((v + spec.noise_std * noise) as f32);
        }
    }
    Utterance {
        feats: FeatureSequence {
            id: format!("{split}-{idx:04}"),
            dim: spec.feat_dim,
            frames,
        },
        labels,
    }
}

/// Pure function of the spec: same spec, same corpus.
pub fn generate_corpus(spec: &ToyCorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let protos = prototypes(spec);
    let gen = |split: &str, n: usize| -> Vec<Utterance> {
        (0..n)
            .map(|i| sample_utterance(spec, &protos, split, i))
            .collect()
    };
    Ok(Corpus {
        train: gen("train", spec.num_train),
        dev: gen("dev", spec.num_dev),
        test: gen("test", spec.num_test),
    })
}

// ---------------------------------------------------------------------------
// On-disk format: manifest.tsv + per-utterance little-endian float files
// with a (T, D) u32 header.
// ---------------------------------------------------------------------------

fn write_feature_file(path: &Path, feats: &FeatureSequence) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + feats.frames.len() * 4);
    buf.extend_from_slice(&(feats.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(feats.dim as u32).to_le_bytes());
    for v in &feats.frames {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_feature_file(path: &Path, id: &str) -> Result<FeatureSequence> {
    let mut file =
        fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if buf.len() < 8 {
        return Err(Error::Corpus(format!("{}: truncated header", path.display())));
    }
    let t = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    if buf.len() != 8 + t * d * 4 {
        return Err(Error::Corpus(format!(
            "{}: payload size {} does not match header {}x{}",
            path.display(),
            buf.len() - 8,
            t,
            d
        )));
    }
    let frames = buf[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureSequence {
        id: id.to_string(),
        dim: d,
        frames,
    })
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let feat_dir = dir.join("feats");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(feat_dir.display().to_string(), e))?;
    let mut manifest = String::new();
    for utt in corpus
        .train
        .iter()
        .chain(corpus.dev.iter())
        .chain(corpus.test.iter())
    {
        let rel = format!("feats/{}.fea", utt.feats.id);
        write_feature_file(&dir.join(&rel), &utt.feats)?;
        let labels: Vec<String> = utt.labels.iter().map(|t| t.to_string()).collect();
        manifest.push_str(&format!("{}\t{}\t{}\n", utt.feats.id, labels.join(" "), rel));
    }
    let mpath = dir.join("manifest.tsv");
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let mpath = dir.join("manifest.tsv");
    let text =
        fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let mut splits: BTreeMap<&str, Vec<Utterance>> = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Corpus(format!(
                "manifest line {}: expected 3 tab-separated fields",
                lineno + 1
            )));
        }
        let id = fields[0];
        let labels: Vec<usize> = fields[1]
            .split_whitespace()
            .map(|s| {
                s.parse::<usize>().map_err(|_| {
                    Error::Corpus(format!("manifest line {}: bad label {s}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        let split = id.split('-').next().unwrap_or("");
        if !matches!(split, "train" | "dev" | "test") {
            return Err(Error::Corpus(format!(
                "utterance id {id} does not carry a train-/dev-/test- prefix"
            )));
        }
        let feats = read_feature_file(&dir.join(fields[2]), id)?;
        splits.entry(match split {
            "train" => "train",
            "dev" => "dev",
            _ => "test",
        })
        .or_default()
        .push(Utterance { feats, labels });
    }
    Ok(Corpus {
        train: splits.remove("train").unwrap_or_default(),
        dev: splits.remove("dev").unwrap_or_default(),
        test: splits.remove("test").unwrap_or_default(),
    })
}

pub fn corpus_dir_manifest(dir: &Path) -> PathBuf {
    dir.join("manifest.tsv")
}

// ---------------------------------------------------------------------------
// Word error rate
// ---------------------------------------------------------------------------

/// Levenshtein distance with unit substitution/insertion/deletion costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Edit distance over reference length, as a percentage.
pub fn wer(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("wer: empty reference"));
    }
    Ok(100.0 * edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus-level WER: total edits over total reference tokens.
pub fn corpus_wer(pairs: &[(&[usize], &[usize])]) -> Result<f64> {
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    for (r, h) in pairs {
        if r.is_empty() {
            return Err(Error::contract("wer: empty reference"));
        }
        edits += edit_distance(r, h);
        ref_len += r.len();
    }
    if ref_len == 0 {
        return Err(Error::contract("wer: empty reference set"));
    }
    Ok(100.0 * edits as f64 / ref_len as f64)
}
