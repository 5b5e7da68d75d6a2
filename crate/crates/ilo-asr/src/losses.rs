//! Training objectives: the CTC/attention baseline combination, the
//! shared-decoder intermediate-attention variant, and the intermediate-CTC
//! comparison variant, plus label-smoothed attention cross entropy.
//!
//! All three combiners keep one summation order — (alpha-term + beta-term)
//! + gamma-term — so the gamma = 0 degeneracies are bitwise, not just
//! approximate.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Baseline,
    Proposed,
    IloCtc,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::Proposed => "proposed",
            Regime::IloCtc => "ilo_ctc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Regime::Baseline),
            "proposed" => Ok(Regime::Proposed),
            "ilo_ctc" => Ok(Regime::IloCtc),
            _ => Err(Error::config(format!(
                "unknown regime {s:?} (expected baseline | proposed | ilo_ctc)"
            ))),
        }
    }
}

/// Simplex weights (alpha, beta, gamma) with alpha + beta + gamma = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 || gamma < 0.0 {
            return Err(Error::config(format!(
                "loss weights must be nonnegative: ({alpha}, {beta}, {gamma})"
            )));
        }
        if (alpha + beta + gamma - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "loss weights must sum to 1: ({alpha}, {beta}, {gamma})"
            )));
        }
        Ok(LossWeights { alpha, beta, gamma })
    }

    /// The two-term regime: gamma = 0, beta = 1 - alpha.
    pub fn baseline(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("alpha={alpha} outside [0,1]")));
        }
        Ok(LossWeights {
            alpha,
            beta: 1.0 - alpha,
            gamma: 0.0,
        })
    }

    /// beta is forced by the simplex constraint.
    pub fn with_gamma(alpha: f64, gamma: f64) -> Result<Self> {
        let beta = 1.0 - alpha - gamma;
        LossWeights::new(alpha, beta, gamma)
    }
}

/// Per-utterance (or per-batch) component values, for metrics.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub regime: Regime,
    pub l_ctc: f64,
    pub l_att: f64,
    pub l_att_inter: Option<f64>,
    pub l_ctc_inter: Option<f64>,
    pub combined: f64,
}

impl LossReport {
    /// `combined` must reproduce the regime formula from the components.
    pub fn is_consistent(&self, w: &LossWeights) -> bool {
        let expect = match self.regime {
            Regime::Baseline => w.alpha * self.l_ctc + (1.0 - w.alpha) * self.l_att,
            Regime::Proposed => {
                w.alpha * self.l_ctc
                    + w.beta * self.l_att
                    + w.gamma * self.l_att_inter.unwrap_or(0.0)
            }
            Regime::IloCtc => {
                w.alpha * self.l_ctc
                    + w.beta * self.l_att
                    + w.gamma * self.l_ctc_inter.unwrap_or(0.0)
            }
        };
        (self.combined - expect).abs() <= 1e-9 * expect.abs().max(1.0)
    }
}

/// Label-smoothed cross entropy averaged over target positions.
///
/// `targets` is the eos-terminated target sequence, one id per logits row.
/// The smoothed target distribution mixes (1 - smoothing) on the target with
/// smoothing spread uniformly over the whole vocabulary.
pub fn att_ce_loss<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[usize],
    smoothing: f64,
) -> Result<Tensor<F>> {
    if logits.rank() != 2 {
        return Err(Error::contract("att_ce_loss expects [L x vocab] logits"));
    }
    let rows = logits.shape()[0];
    let vocab = logits.shape()[1];
    if rows != targets.len() {
        return Err(Error::contract(format!(
            "att_ce_loss: {rows} logit rows vs {} targets",
            targets.len()
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::config(format!(
            "label smoothing {smoothing} outside [0,1)"
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::contract(format!(
            "target id {bad} outside vocabulary {vocab}"
        )));
    }
    let logp = logits.log_softmax_rows()?;
    let base = -smoothing / vocab as f64 / rows as f64;
    let hit = -(1.0 - smoothing) / rows as f64;
    let mut weights = vec![F::from_f64(base); rows * vocab];
    for (t, &y) in targets.iter().enumerate() {
        weights[t * vocab + y] = F::from_f64(base + hit);
    }
    logp.dot_const(&weights)
}

/// alpha * l_ctc + (1 - alpha) * l_att
pub fn loss_baseline<F: Scalar>(
    l_ctc: &Tensor<F>,
    l_att: &Tensor<F>,
    alpha: f64,
) -> Result<Tensor<F>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha={alpha} outside [0,1]")));
    }
    l_ctc.scale(alpha).add(&l_att.scale(1.0 - alpha))
}

/// alpha * l_ctc + beta * l_att + gamma * l_att_inter
pub fn loss_proposed<F: Scalar>(
    l_ctc: &Tensor<F>,
    l_att: &Tensor<F>,
    l_att_inter: &Tensor<F>,
    w: &LossWeights,
) -> Result<Tensor<F>> {
    LossWeights::new(w.alpha, w.beta, w.gamma)?;
    l_ctc
        .scale(w.alpha)
        .add(&l_att.scale(w.beta))?
        .add(&l_att_inter.scale(w.gamma))
}

/// alpha * l_ctc + beta * l_att + gamma * l_ctc_inter
pub fn loss_ilo_ctc<F: Scalar>(
    l_ctc: &Tensor<F>,
    l_att: &Tensor<F>,
    l_ctc_inter: &Tensor<F>,
    w: &LossWeights,
) -> Result<Tensor<F>> {
    LossWeights::new(w.alpha, w.beta, w.gamma)?;
    l_ctc
        .scale(w.alpha)
        .add(&l_att.scale(w.beta))?
        .add(&l_ctc_inter.scale(w.gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn ce_perfect_prediction_approaches_zero() {
        let tape = Tape::<f64>::new(0);
        let v = 5;
        let targets = [2usize, 4];
        let mut data = vec![0.0; 2 * v];
        for (t, &y) in targets.iter().enumerate() {
            data[t * v + y] = 100.0;
        }
        let logits = tape.leaf_f64(&data, &[2, v]).unwrap();
        let loss = att_ce_loss(&logits, &targets, 0.0).unwrap().item_f64().unwrap();
        assert!(loss.abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn ce_uniform_prediction_is_log_vocab() {
        let tape = Tape::<f64>::new(0);
        let v = 7;
        let logits = tape.leaf_f64(&vec![0.3; 3 * v], &[3, v]).unwrap();
        let loss = att_ce_loss(&logits, &[1, 2, 3], 0.0).unwrap().item_f64().unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
        // uniform prediction is invariant to the smoothing mix
        let smoothed = att_ce_loss(&logits, &[1, 2, 3], 0.1).unwrap().item_f64().unwrap();
        assert!((smoothed - loss).abs() < 1e-12);
    }

    #[test]
    fn ce_length_mismatch_is_contract_error() {
        let tape = Tape::<f64>::new(0);
        let logits = tape.leaf_f64(&vec![0.0; 10], &[2, 5]).unwrap();
        assert!(matches!(
            att_ce_loss(&logits, &[1, 2, 3], 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn baseline_arithmetic() {
        let tape = Tape::<f64>::new(0);
        let ctc = tape.scalar(2.0);
        let att = tape.scalar(1.0);
        let v = loss_baseline(&ctc, &att, 0.3).unwrap().item_f64().unwrap();
        assert!((v - 1.3).abs() < 1e-12);
        assert_eq!(loss_baseline(&ctc, &att, 0.0).unwrap().item_f64().unwrap(), 1.0);
        assert_eq!(loss_baseline(&ctc, &att, 1.0).unwrap().item_f64().unwrap(), 2.0);
        assert!(loss_baseline(&ctc, &att, 1.5).is_err());
    }

    #[test]
    fn proposed_arithmetic_and_degeneracy() {
        let tape = Tape::<f64>::new(0);
        let ctc = tape.scalar(2.0);
        let att = tape.scalar(1.0);
        let inter = tape.scalar(1.5);
        let w = LossWeights::new(0.3, 0.5, 0.2).unwrap();
        let v = loss_proposed(&ctc, &att, &inter, &w).unwrap().item_f64().unwrap();
        assert!((v - 1.4).abs() < 1e-12);

        // gamma = 0 reduces to the baseline bitwise
        let w0 = LossWeights::baseline(0.3).unwrap();
        let a = loss_proposed(&ctc, &att, &inter, &w0).unwrap().item_f64().unwrap();
        let b = loss_baseline(&ctc, &att, 0.3).unwrap().item_f64().unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn ilo_ctc_arithmetic_and_degeneracy() {
        let tape = Tape::<f64>::new(0);
        let ctc = tape.scalar(2.0);
        let att = tape.scalar(1.0);
        let inter = tape.scalar(1.8);
        let w = LossWeights::new(0.3, 0.55, 0.15).unwrap();
        let v = loss_ilo_ctc(&ctc, &att, &inter, &w).unwrap().item_f64().unwrap();
        assert!((v - 1.42).abs() < 1e-12);

        // gamma = 0.1 configuration is accepted
        assert!(LossWeights::with_gamma(0.3, 0.1).is_ok());

        let w0 = LossWeights::baseline(0.3).unwrap();
        let a = loss_ilo_ctc(&ctc, &att, &inter, &w0).unwrap().item_f64().unwrap();
        let b = loss_baseline(&ctc, &att, 0.3).unwrap().item_f64().unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn combined_gradient_uses_exact_weights() {
        let tape = Tape::<f64>::new(0);
        let ctc = tape.scalar(2.0);
        let att = tape.scalar(1.0);
        let inter = tape.scalar(1.5);
        let w = LossWeights::new(0.3, 0.5, 0.2).unwrap();
        let loss = loss_proposed(&ctc, &att, &inter, &w).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(ctc.grad().unwrap(), vec![0.3]);
        assert_eq!(att.grad().unwrap(), vec![0.5]);
        assert_eq!(inter.grad().unwrap(), vec![0.2]);
    }

    #[test]
    fn simplex_violation_rejected() {
        assert!(LossWeights::new(0.3, 0.5, 0.3).is_err());
        assert!(LossWeights::new(0.3, -0.1, 0.8).is_err());
        assert!(LossWeights::with_gamma(0.3, 0.8).is_err());
    }

    #[test]
    fn report_consistency() {
        let w = LossWeights::new(0.3, 0.5, 0.2).unwrap();
        let r = LossReport {
            regime: Regime::Proposed,
            l_ctc: 2.0,
            l_att: 1.0,
            l_att_inter: Some(1.5),
            l_ctc_inter: None,
            combined: 1.4,
        };
        assert!(r.is_consistent(&w));
        let bad = LossReport { combined: 1.5, ..r };
        assert!(!bad.is_consistent(&w));
    }
}
