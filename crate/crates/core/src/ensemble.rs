//! Geometric ensemble of in-vocabulary and prior-injected predictions.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::softmax;
use crate::{Error, Result};

pub const DEFAULT_BETA_SEEN: f64 = 0.4;
pub const DEFAULT_BETA_UNSEEN: f64 = 0.8;

/// Probabilities are clamped to this before exponentiation.
pub const PROB_FLOOR: f64 = 1e-12;

const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub beta_seen: f64,
    pub beta_unseen: f64,
    pub seen_mask: Vec<bool>,
}

impl EnsembleConfig {
    pub fn new(beta_seen: f64, beta_unseen: f64, seen_mask: Vec<bool>) -> Result<Self> {
        let cfg = Self { beta_seen, beta_unseen, seen_mask };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("beta_seen", self.beta_seen), ("beta_unseen", self.beta_unseen)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::BadBeta { name, value });
            }
        }
        Ok(())
    }

    fn beta(&self, class: usize) -> f64 {
        if self.seen_mask[class] {
            self.beta_seen
        } else {
            self.beta_unseen
        }
    }
}

fn check_probabilities(p: &[f64]) -> Result<()> {
    if let Some(i) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NotAProbabilityVector(format!("entry {i} is {}", p[i])));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::NotAProbabilityVector(format!("sum is {sum}")));
    }
    Ok(())
}

/// `fused_c ~ p_in[c]^(1 - beta_c) * p_out[c]^beta_c`, renormalized.
pub fn fuse(p_in: &[f64], p_out: &[f64], cfg: &EnsembleConfig) -> Result<Vec<f64>> {
    if p_in.len() != p_out.len() {
        return Err(Error::LengthMismatch { left: p_in.len(), right: p_out.len() });
    }
    if cfg.seen_mask.len() != p_in.len() {
        return Err(Error::LengthMismatch { left: p_in.len(), right: cfg.seen_mask.len() });
    }
    cfg.validate()?;
    check_probabilities(p_in)?;
    check_probabilities(p_out)?;

    let raw: Vec<f64> = p_in
        .iter()
        .zip(p_out)
        .enumerate()
        .map(|(c, (&a, &b))| {
            let beta = cfg.beta(c);
            // exact endpoints keep beta = 0 / 1 bit-faithful to the chosen branch
            if beta == 0.0 {
                a.max(PROB_FLOOR)
            } else if beta == 1.0 {
                b.max(PROB_FLOOR)
            } else {
                libm::pow(a.max(PROB_FLOOR), 1.0 - beta) * libm::pow(b.max(PROB_FLOOR), beta)
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Fused class decision for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probability: f64,
    pub probabilities: Vec<f64>,
}

/// Softmax of each branch at `temperature`, fused, then argmax (ties to
/// the lower class index).
pub fn final_prediction(
    in_vocab_logits: &[f64],
    pip_logits: &[f64],
    cfg: &EnsembleConfig,
    temperature: f64,
) -> Result<Prediction> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::BadTemperature(temperature));
    }
    let scale = |v: &[f64]| v.iter().map(|x| x / temperature).collect::<Vec<_>>();
    let p_in = softmax(&scale(in_vocab_logits))?;
    let p_out = softmax(&scale(pip_logits))?;
    let fused = fuse(&p_in, &p_out, cfg)?;
    let class = argmax(&fused);
    Ok(Prediction { class, probability: fused[class], probabilities: fused })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cfg(bs: f64, bu: f64) -> EnsembleConfig {
        EnsembleConfig::new(bs, bu, vec![true, true, false]).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn beta_endpoints_select_a_branch() {
        let p_in = [0.2, 0.5, 0.3];
        let p_out = [0.6, 0.1, 0.3];
        assert!(close(&fuse(&p_in, &p_out, &cfg(0.0, 0.0)).unwrap(), &p_in, 1e-15));
        assert!(close(&fuse(&p_in, &p_out, &cfg(1.0, 1.0)).unwrap(), &p_out, 1e-15));
    }

    #[test]
    fn equal_inputs_pass_through() {
        let p = [0.1, 0.7, 0.2];
        assert!(close(&fuse(&p, &p, &cfg(0.4, 0.8)).unwrap(), &p, 1e-12));
    }

    #[test]
    fn geometric_formula() {
        let p_in = [0.2, 0.5, 0.3];
        let p_out = [0.6, 0.1, 0.3];
        let got = fuse(&p_in, &p_out, &cfg(0.4, 0.8)).unwrap();
        let raw = [
            libm::pow(0.2, 0.6) * libm::pow(0.6, 0.4),
            libm::pow(0.5, 0.6) * libm::pow(0.1, 0.4),
            libm::pow(0.3, 0.2) * libm::pow(0.3, 0.8),
        ];
        let z: f64 = raw.iter().sum();
        assert!(close(&got, &raw.map(|r| r / z), 1e-12));
    }

    #[test]
    fn zero_probabilities_are_floored() {
        let got = fuse(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &cfg(0.5, 0.5)).unwrap();
        assert!(got.iter().all(|v| v.is_finite()));
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(fuse(&[0.5, 0.6, 0.0], &[0.2, 0.3, 0.5], &cfg(0.4, 0.8)), Err(Error::NotAProbabilityVector(_))));
        assert!(matches!(fuse(&[-0.1, 0.6, 0.5], &[0.2, 0.3, 0.5], &cfg(0.4, 0.8)), Err(Error::NotAProbabilityVector(_))));
        assert!(matches!(fuse(&[0.5, 0.5], &[0.2, 0.3, 0.5], &cfg(0.4, 0.8)), Err(Error::LengthMismatch { .. })));
        assert!(EnsembleConfig::new(1.2, 0.5, vec![true]).is_err());
    }

    #[test]
    fn dominant_class_wins() {
        let p = final_prediction(&[0.1, 0.9, 0.0], &[0.0, 0.8, 0.1], &cfg(0.4, 0.8), 0.01).unwrap();
        assert_eq!(p.class, 1);
        assert!(p.probability > 0.5);
    }

    #[test]
    fn beta_zero_follows_in_vocab() {
        let p = final_prediction(&[0.3, 0.1, 0.2], &[0.0, 0.9, 0.5], &cfg(0.0, 0.0), 0.05).unwrap();
        assert_eq!(p.class, 0);
        assert!(matches!(final_prediction(&[0.0], &[0.0], &cfg(0.0, 0.0), 0.0), Err(Error::BadTemperature(_))));
    }

    #[test]
    fn five_class_composition() {
        let c = EnsembleConfig::new(0.4, 0.8, vec![true, true, true, false, false]).unwrap();
        let a = [0.31, 0.22, 0.05, 0.28, 0.12];
        let b = [0.10, 0.25, 0.02, 0.33, 0.30];
        let t = 0.05;
        let pa = softmax(&a.map(|x| x / t)).unwrap();
        let pb = softmax(&b.map(|x| x / t)).unwrap();
        let raw: Vec<f64> = (0..5)
            .map(|i| {
                let beta = if i < 3 { 0.4 } else { 0.8 };
                libm::pow(pa[i], 1.0 - beta) * libm::pow(pb[i], beta)
            })
            .collect();
        let z: f64 = raw.iter().sum();
        let mut best = 0;
        for i in 1..5 {
            if raw[i] > raw[best] {
                best = i;
            }
        }
        let p = final_prediction(&a, &b, &c, t).unwrap();
        assert_eq!(p.class, best);
        assert!((p.probability - raw[best] / z).abs() < 1e-12);
    }
}
