//! Closed-form loss values and gradients, independent of the tape.

use super::graph::{bce_with_logit, sigmoid};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Mean of `-log p(target)` over rows of a log-probability matrix.
pub fn generator_loss(log_probs: &Tensor, targets: &[usize]) -> Result<f64> {
    let (m, n) = log_probs.dims2();
    if targets.len() != m || m == 0 {
        return Err(Error::Shape(format!("{} targets for {m} rows", targets.len())));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= n {
            return Err(Error::Index { index: t, len: n });
        }
        total -= log_probs.row(r)[t];
    }
    Ok(total / m as f64)
}

/// Per-token BCE for probabilities `d` against targets in {0, 1}.
pub fn bce_from_prob(d: f64, target: f64) -> f64 {
    -(target * d.ln() + (1.0 - target) * (1.0 - d).ln())
}

/// Batch loss (mean over examples of token means) and the per-example losses,
/// from per-token probabilities of "original".
pub fn discriminator_loss(probs: &[&[f64]], targets: &[&[f64]]) -> Result<(f64, Vec<f64>)> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::Shape("probability/target batch mismatch".into()));
    }
    let mut per = Vec::with_capacity(probs.len());
    for (p, y) in probs.iter().zip(targets) {
        if p.len() != y.len() || p.is_empty() {
            return Err(Error::Shape("probability/target length mismatch".into()));
        }
        per.push(p.iter().zip(*y).map(|(&d, &t)| bce_from_prob(d, t)).sum::<f64>() / p.len() as f64);
    }
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((mean, per))
}

/// Token-mean BCE of one example from its pre-activations.
pub fn example_loss_from_logits(z: &[f64], targets: &[f64]) -> f64 {
    z.iter().zip(targets).map(|(&z, &y)| bce_with_logit(z, y)).sum::<f64>() / z.len() as f64
}

/// Gradient of an example's token-mean BCE with respect to each pre-activation.
pub fn bce_logit_grads(z: &[f64], targets: &[f64]) -> Vec<f64> {
    let n = z.len() as f64;
    z.iter().zip(targets).map(|(&z, &y)| (sigmoid(z) - y) / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::log_softmax_rows;

    #[test]
    fn uniform_mlm_loss_is_log_vocab() {
        let lp = log_softmax_rows(&Tensor::zeros(&[3, 100]));
        let l = generator_loss(&lp, &[4, 50, 99]).unwrap();
        assert!((l - 4.605_170_185_988_091).abs() < 1e-12);
    }

    #[test]
    fn hand_mlm_case() {
        let lp = Tensor::from_vec(&[2, 2], vec![0.5f64.ln(), 0.5f64.ln(), 0.25f64.ln(), 0.75f64.ln()]).unwrap();
        let l = generator_loss(&lp, &[0, 0]).unwrap();
        assert!((l - 1.039_720_770_839_917_9).abs() < 1e-12);
        let certain = Tensor::from_vec(&[1, 2], vec![0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(generator_loss(&certain, &[0]).unwrap(), 0.0);
    }

    #[test]
    fn shift_invariance() {
        let logits = Tensor::from_vec(&[1, 4], vec![0.3, -1.2, 2.0, 0.1]).unwrap();
        let shifted = Tensor::from_vec(&[1, 4], logits.data().iter().map(|v| v + 17.5).collect()).unwrap();
        let a = log_softmax_rows(&logits);
        let b = log_softmax_rows(&shifted);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x.exp() - y.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_hand_cases() {
        let (l, _) = discriminator_loss(&[&[0.5]], &[&[1.0]]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let (l, per) = discriminator_loss(&[&[0.9, 0.2]], &[&[1.0, 0.0]]).unwrap();
        assert!((l - 0.164_252_033_486_018).abs() < 1e-9);
        assert_eq!(per.len(), 1);
        assert!(example_loss_from_logits(&[20.0, -20.0], &[1.0, 0.0]) < 1e-6);
    }

    #[test]
    fn logit_grad_single_token() {
        let g = bce_logit_grads(&[0.0], &[1.0]);
        assert!((g[0] + 0.5).abs() < 1e-15);
        let g = bce_logit_grads(&[40.0, -40.0], &[1.0, 0.0]);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }
}
