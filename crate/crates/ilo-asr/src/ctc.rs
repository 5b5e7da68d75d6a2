//! CTC negative log-likelihood and prefix scoring.
//!
//! The loss is the forward dynamic program over the blank-extended label in
//! log space, built out of differentiable scalar primitives (gather,
//! log-add-exp, add), so its gradient comes from the tape rather than a
//! hand-derived rule. A path-enumeration oracle and a standalone prefix
//! scorer (used by hybrid decoding) live alongside.

use crate::corpus::BLANK;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, LOG_ZERO};
use std::collections::HashMap;

/// blank, l1, blank, l2, ..., blank
pub fn extended_label(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Minimum frame count for a feasible alignment: one slot per label plus a
/// separating blank per adjacent repeat.
pub fn required_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn validate_labels(labels: &[usize], vocab: usize) -> Result<()> {
    for &l in labels {
        if l == BLANK || l >= vocab {
            return Err(Error::contract(format!(
                "CTC label {l} outside content range 1..{vocab}"
            )));
        }
    }
    Ok(())
}

struct GatherCache<'a, F: Scalar> {
    lp: &'a Tensor<F>,
    map: HashMap<(usize, usize), Tensor<F>>,
}

impl<'a, F: Scalar> GatherCache<'a, F> {
    fn get(&mut self, t: usize, c: usize) -> Result<Tensor<F>> {
        if let Some(x) = self.map.get(&(t, c)) {
            return Ok(x.clone());
        }
        let x = self.lp.gather2(t, c)?;
        self.map.insert((t, c), x.clone());
        Ok(x)
    }
}

fn opt_lae<F: Scalar>(
    a: Option<Tensor<F>>,
    b: Option<Tensor<F>>,
) -> Result<Option<Tensor<F>>> {
    Ok(match (a, b) {
        (None, x) => x,
        (x, None) => x,
        (Some(x), Some(y)) => Some(x.logaddexp(&y)?),
    })
}

/// -log sum over all alignments collapsing to `labels`, differentiable
/// through `log_probs` (`[T' x vocab]`, blank = class 0).
pub fn ctc_loss<F: Scalar>(log_probs: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
    if log_probs.rank() != 2 {
        return Err(Error::contract("ctc_loss expects [T x vocab] log-probs"));
    }
    let t_len = log_probs.shape()[0];
    let vocab = log_probs.shape()[1];
    validate_labels(labels, vocab)?;
    let required = required_frames(labels);
    if t_len < required {
        return Err(Error::CtcInfeasible {
            frames: t_len,
            required,
        });
    }

    let ext = extended_label(labels);
    let s_len = ext.len();
    let mut gather = GatherCache {
        lp: log_probs,
        map: HashMap::new(),
    };

    // alpha[s]: None encodes log-zero (unreachable state)
    let mut alpha: Vec<Option<Tensor<F>>> = vec![None; s_len];
    alpha[0] = Some(gather.get(0, BLANK)?);
    if s_len > 1 {
        alpha[1] = Some(gather.get(0, ext[1])?);
    }
    for t in 1..t_len {
        let mut next: Vec<Option<Tensor<F>>> = vec![None; s_len];
        for s in 0..s_len {
            let mut acc = alpha[s].clone();
            if s >= 1 {
                acc = opt_lae(acc, alpha[s - 1].clone())?;
            }
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                acc = opt_lae(acc, alpha[s - 2].clone())?;
            }
            next[s] = match acc {
                Some(a) => Some(a.add(&gather.get(t, ext[s])?)?),
                None => None,
            };
        }
        alpha = next;
    }
    let mut fin = alpha[s_len - 1].clone();
    if s_len >= 2 {
        fin = opt_lae(fin, alpha[s_len - 2].clone())?;
    }
    let fin = fin.ok_or(Error::CtcInfeasible {
        frames: t_len,
        required,
    })?;
    Ok(fin.scale(-1.0))
}

/// Path-enumeration oracle: sums the probability of every frame-label path
/// whose collapse (dedup repeats, then drop blanks) equals `labels`.
/// Guarded to tiny instances.
pub fn ctc_loss_bruteforce(
    log_probs: &[f64],
    t_len: usize,
    vocab: usize,
    labels: &[usize],
) -> Result<f64> {
    if t_len > 6 || vocab > 4 {
        return Err(Error::OracleTooLarge(format!(
            "ctc brute force limited to T<=6, vocab<=4 (got {t_len}, {vocab})"
        )));
    }
    if log_probs.len() != t_len * vocab {
        return Err(Error::contract("log_probs length mismatch"));
    }
    validate_labels(labels, vocab)?;
    let required = required_frames(labels);
    if t_len < required {
        return Err(Error::CtcInfeasible {
            frames: t_len,
            required,
        });
    }
    let mut total = 0.0f64;
    let paths = vocab.pow(t_len as u32);
    let mut collapsed = Vec::with_capacity(t_len);
    for code in 0..paths {
        let mut c = code;
        let mut logp = 0.0;
        collapsed.clear();
        let mut prev = usize::MAX;
        for t in 0..t_len {
            let sym = c % vocab;
            c /= vocab;
            logp += log_probs[t * vocab + sym];
            if sym != prev {
                if sym != BLANK {
                    collapsed.push(sym);
                }
                prev = sym;
            }
        }
        if collapsed == labels {
            total += logp.exp();
        }
    }
    Ok(-total.ln())
}

// ---------------------------------------------------------------------------
// Prefix scoring (decode side, plain f64)
// ---------------------------------------------------------------------------

fn lae(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// CTC prefix/complete probabilities over one utterance's posteriors.
pub struct CtcPrefixScorer {
    t_len: usize,
    vocab: usize,
    lp: Vec<f64>,
}

impl CtcPrefixScorer {
    pub fn new(lp: Vec<f64>, t_len: usize, vocab: usize) -> Result<Self> {
        if lp.len() != t_len * vocab {
            return Err(Error::contract("log_probs length mismatch"));
        }
        Ok(CtcPrefixScorer { t_len, vocab, lp })
    }

    pub fn from_tensor<F: Scalar>(t: &Tensor<F>) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::contract("prefix scorer expects [T x vocab]"));
        }
        Self::new(t.data_f64(), t.shape()[0], t.shape()[1])
    }

    fn lp(&self, t: usize, c: usize) -> f64 {
        self.lp[t * self.vocab + c]
    }

    /// Runs the blank/non-blank prefix recursion over `prefix`, returning
    /// (begins-with log-prob, end-in-blank, end-in-nonblank at final frame).
    fn run(&self, prefix: &[usize]) -> Result<(f64, f64, f64)> {
        validate_labels(prefix, self.vocab)?;
        let t_len = self.t_len;
        // exact-collapse masses for the growing prefix
        let mut pb = vec![LOG_ZERO; t_len];
        let mut pn = vec![LOG_ZERO; t_len];
        pb[0] = self.lp(0, BLANK);
        for t in 1..t_len {
            pb[t] = pb[t - 1] + self.lp(t, BLANK);
        }
        let mut psi = 0.0; // log P(begins with empty prefix) = log 1
        let mut last = None::<usize>;
        let mut empty = true;
        for &c in prefix {
            let mut new_n = vec![LOG_ZERO; t_len];
            let mut new_b = vec![LOG_ZERO; t_len];
            // phi[t]: mass able to start emitting c after frame t
            let phi = |t: usize| -> f64 {
                let mut m = pb[t];
                if last != Some(c) {
                    m = lae(m, pn[t]);
                }
                m
            };
            let phi_start = if empty { 0.0 } else { LOG_ZERO };
            new_n[0] = phi_start + self.lp(0, c);
            let mut psi_new = new_n[0];
            for t in 1..t_len {
                let fresh = phi(t - 1) + self.lp(t, c);
                new_n[t] = lae(new_n[t - 1] + self.lp(t, c), fresh);
                psi_new = lae(psi_new, fresh);
                new_b[t] = lae(new_b[t - 1], new_n[t - 1]) + self.lp(t, BLANK);
            }
            pb = new_b;
            pn = new_n;
            psi = psi_new;
            last = Some(c);
            empty = false;
        }
        Ok((psi, pb[t_len - 1], pn[t_len - 1]))
    }

    /// log P(the collapsed output begins with `prefix`).
    pub fn score_prefix(&self, prefix: &[usize]) -> Result<f64> {
        Ok(self.run(prefix)?.0)
    }

    /// log P(the collapsed output equals `labels` exactly); agrees with
    /// -ctc_loss on the same posteriors.
    pub fn score_complete(&self, labels: &[usize]) -> Result<f64> {
        let (_, b, n) = self.run(labels)?;
        Ok(lae(b, n))
    }
}

/// log probability that the CTC output begins with `prefix`.
pub fn ctc_prefix_score(
    log_probs: &[f64],
    t_len: usize,
    vocab: usize,
    prefix: &[usize],
) -> Result<f64> {
    let required = required_frames(prefix);
    if t_len < required {
        return Err(Error::CtcInfeasible {
            frames: t_len,
            required,
        });
    }
    CtcPrefixScorer::new(log_probs.to_vec(), t_len, vocab)?.score_prefix(prefix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use crate::tensor::Tape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_lp(t: usize, v: usize) -> Vec<f64> {
        vec![(1.0 / v as f64).ln(); t * v]
    }

    /// Random normalized per-frame log-distributions.
    fn random_lp(t: usize, v: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lp = vec![0.0; t * v];
        for row in 0..t {
            let raw: Vec<f64> = (0..v).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + raw.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for c in 0..v {
                lp[row * v + c] = raw[c] - lse;
            }
        }
        lp
    }

    fn loss_on_tape(lp: &[f64], t: usize, v: usize, labels: &[usize]) -> Result<f64> {
        let tape = Tape::<f64>::new(0);
        let x = tape.leaf_f64(lp, &[t, v]).unwrap();
        ctc_loss(&x, labels)?.item_f64()
    }

    #[test]
    fn single_frame_single_label() {
        // uniform over {blank, a}: P(a) = 0.5
        let lp = uniform_lp(1, 2);
        let loss = loss_on_tape(&lp, 1, 2, &[1]).unwrap();
        assert!((loss - 0.5f64.ln().abs()).abs() < 1e-12);
        assert!((loss - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn two_frames_three_alignments() {
        // uniform 0.5: alignments (a,a), (a,-), (-,a) sum to 0.75
        let lp = uniform_lp(2, 2);
        let loss = loss_on_tape(&lp, 2, 2, &[1]).unwrap();
        assert!((loss - (-0.75f64.ln())).abs() < 1e-12);
        assert!((loss - 0.2877).abs() < 1e-4);
        let brute = ctc_loss_bruteforce(&lp, 2, 2, &[1]).unwrap();
        assert!((loss - brute).abs() < 1e-12);
    }

    #[test]
    fn empty_label_all_blank_path() {
        let lp = random_lp(2, 3, 9);
        let loss = loss_on_tape(&lp, 2, 3, &[]).unwrap();
        let want = -(lp[0 * 3 + BLANK] + lp[1 * 3 + BLANK]);
        assert!((loss - want).abs() < 1e-12);
        let brute = ctc_loss_bruteforce(&lp, 2, 3, &[]).unwrap();
        assert!((loss - brute).abs() < 1e-9);
    }

    #[test]
    fn infeasible_label_errors() {
        let lp = uniform_lp(2, 3);
        assert!(matches!(
            loss_on_tape(&lp, 2, 3, &[1, 2, 1]),
            Err(Error::CtcInfeasible { .. })
        ));
        // adjacent repeat needs a separating blank
        assert!(matches!(
            loss_on_tape(&lp, 2, 3, &[1, 1]),
            Err(Error::CtcInfeasible { .. })
        ));
        assert!(matches!(
            ctc_loss_bruteforce(&lp, 2, 3, &[1, 2, 1]),
            Err(Error::CtcInfeasible { .. })
        ));
    }

    #[test]
    fn oracle_guard() {
        let lp = uniform_lp(7, 2);
        assert!(matches!(
            ctc_loss_bruteforce(&lp, 7, 2, &[1]),
            Err(Error::OracleTooLarge(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let lp0 = random_lp(4, 3, 31);
        let labels = [1, 2];
        let f = |p: &[f64]| loss_on_tape(p, 4, 3, &labels).unwrap();
        let numeric = central_diff(&f, &lp0, 1e-6);
        let tape = Tape::<f64>::new(0);
        let x = tape.leaf_f64(&lp0, &[4, 3]).unwrap();
        let loss = ctc_loss(&x, &labels).unwrap();
        tape.backward(&loss).unwrap();
        let analytic = x.grad().unwrap();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn total_probability_over_label_space_is_one() {
        // T=2, vocab {blank, a}: sum of exp(-loss) over feasible label
        // sequences must be 1
        let lp = random_lp(2, 2, 55);
        let mut total = 0.0;
        for labels in [vec![], vec![1], vec![1, 1]] {
            match loss_on_tape(&lp, 2, 2, &labels) {
                Ok(l) => total += (-l).exp(),
                Err(Error::CtcInfeasible { .. }) => {}
                Err(e) => panic!("{e}"),
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "total {total}");
    }

    #[test]
    fn prefix_score_examples() {
        let lp = random_lp(4, 3, 77);
        let scorer = CtcPrefixScorer::new(lp.clone(), 4, 3).unwrap();
        // empty prefix: every output begins with it
        assert_eq!(scorer.score_prefix(&[]).unwrap(), 0.0);
        // complete-sequence score equals -ctc_loss
        for labels in [vec![1], vec![1, 2], vec![2, 1, 2]] {
            let loss = loss_on_tape(&lp, 4, 3, &labels).unwrap();
            let complete = scorer.score_complete(&labels).unwrap();
            assert!(
                (complete + loss).abs() < 1e-6,
                "labels {labels:?}: {complete} vs {}",
                -loss
            );
        }
        // free function agrees with the scorer
        let via_fn = ctc_prefix_score(&lp, 4, 3, &[1, 2]).unwrap();
        assert_eq!(via_fn, scorer.score_prefix(&[1, 2]).unwrap());
        // infeasible prefix errors through the public entry point
        assert!(matches!(
            ctc_prefix_score(&lp, 2, 3, &[1, 1, 2, 2, 1]),
            Err(Error::CtcInfeasible { .. })
        ));
    }

    #[test]
    fn prefix_score_against_enumeration() {
        // P(begins with prefix) = sum over complete labels extending it
        let lp = random_lp(3, 3, 91);
        let scorer = CtcPrefixScorer::new(lp.clone(), 3, 3).unwrap();
        let prefix = [2];
        let mut total = 0.0;
        // enumerate all label sequences of length <= 3 over {1,2}
        let mut seqs: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..3 {
            let mut next = Vec::new();
            for s in &seqs {
                for c in 1..3 {
                    let mut e = s.clone();
                    e.push(c);
                    next.push(e);
                }
            }
            seqs.extend(next);
        }
        seqs.dedup();
        let mut seen = std::collections::BTreeSet::new();
        for s in seqs {
            if !seen.insert(s.clone()) {
                continue;
            }
            if s.first() == Some(&prefix[0]) {
                if let Ok(l) = ctc_loss_bruteforce(&lp, 3, 3, &s) {
                    total += (-l).exp();
                }
            }
        }
        let got = scorer.score_prefix(&prefix).unwrap().exp();
        assert!((got - total).abs() < 1e-9, "{got} vs {total}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn dp_matches_bruteforce(
            t in 1usize..5,
            seed in 0u64..10_000,
            l0 in 1usize..3,
            l1 in 0usize..3,
        ) {
            let v = 3;
            let lp = random_lp(t, v, seed);
            let mut labels = vec![l0];
            if l1 > 0 {
                labels.push(l1);
            }
            let dp = loss_on_tape(&lp, t, v, &labels);
            let brute = ctc_loss_bruteforce(&lp, t, v, &labels);
            match (dp, brute) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}"),
                (Err(Error::CtcInfeasible { .. }), Err(Error::CtcInfeasible { .. })) => {}
                (a, b) => prop_assert!(false, "disagree: {a:?} vs {b:?}"),
            }
        }

        #[test]
        fn prefix_extension_never_gains(
            t in 2usize..5,
            seed in 0u64..5_000,
            ext in proptest::collection::vec(1usize..3, 1..4),
        ) {
            let v = 3;
            let lp = random_lp(t, v, seed);
            let scorer = CtcPrefixScorer::new(lp, t, v).unwrap();
            let mut prefix: Vec<usize> = Vec::new();
            let mut prev = scorer.score_prefix(&prefix).unwrap();
            for c in ext {
                prefix.push(c);
                let cur = scorer.score_prefix(&prefix).unwrap();
                prop_assert!(cur <= prev + 1e-12, "{cur} > {prev}");
                let complete = scorer.score_complete(&prefix).unwrap();
                prop_assert!(complete <= cur + 1e-12);
                prev = cur;
            }
        }
    }
}
