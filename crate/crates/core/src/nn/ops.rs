//! Softmax, losses and the optimizer.

use super::tensor::{Matrix, Parameterized};
use crate::error::{Error, Result};

/// Clamp applied to predicted probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Softmax of `logits + mask`, where `mask` holds `0` or `-inf` per entry.
///
/// Masked positions come out as exactly `0.0`. A mask of all zeros yields the
/// same bits as the unmasked softmax.
pub fn masked_softmax(logits: &[f64], mask: Option<&[f64]>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; logits.len()];
    masked_softmax_into(logits, mask, &mut out)?;
    Ok(out)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    masked_softmax(logits, None).expect("unmasked softmax cannot be degenerate")
}

pub(crate) fn masked_softmax_into(
    logits: &[f64],
    mask: Option<&[f64]>,
    out: &mut [f64],
) -> Result<()> {
    if let Some(m) = mask {
        if m.len() != logits.len() {
            return Err(Error::Usage(format!(
                "mask length {} != logits length {}",
                m.len(),
                logits.len()
            )));
        }
    }
    let shifted = |i: usize| match mask {
        Some(m) => logits[i] + m[i],
        None => logits[i],
    };
    let mut max = f64::NEG_INFINITY;
    for i in 0..logits.len() {
        let z = shifted(i);
        if z > max {
            max = z;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateMask);
    }
    let mut total = 0.0;
    for (i, o) in out.iter_mut().enumerate() {
        let z = shifted(i);
        *o = if z == f64::NEG_INFINITY {
            0.0
        } else {
            (z - max).exp()
        };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

/// Gradient of a softmax w.r.t. its logits given the softmax output `probs`
/// and the upstream gradient `grad_probs`. Masked entries (probability 0) get 0.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

/// Mean binary cross-entropy and its gradient w.r.t. the predictions.
///
/// Predictions are clamped to `[PROB_EPS, 1 - PROB_EPS]`; entries outside
/// the clamp get a zero gradient.
pub fn bce_loss(preds: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if preds.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let n = preds.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(preds.len());
    for (&p, &y) in preds.iter().zip(labels) {
        let c = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        total -= y * c.ln() + (1.0 - y) * (1.0 - c).ln();
        let g = if c == p {
            -(y / c - (1.0 - y) / (1.0 - c)) / n
        } else {
            0.0
        };
        grad.push(g);
    }
    Ok((total / n, grad))
}

/// Squared L2 norm of `h - h_hat` with gradients w.r.t. both arguments.
pub fn l2_rec_loss(h: &Matrix, h_hat: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if h.shape() != h_hat.shape() {
        return Err(Error::Usage(format!(
            "shape mismatch {:?} vs {:?}",
            h.shape(),
            h_hat.shape()
        )));
    }
    let (r, c) = h.shape();
    let mut diff = Matrix::zeros(r, c);
    let mut loss = 0.0;
    for ((d, a), b) in diff
        .as_mut_slice()
        .iter_mut()
        .zip(h.as_slice())
        .zip(h_hat.as_slice())
    {
        let v = a - b;
        loss += v * v;
        *d = 2.0 * v;
    }
    let mut neg = diff.clone();
    neg.as_mut_slice().iter_mut().for_each(|v| *v = -*v);
    Ok((loss, diff, neg))
}

/// Plain gradient descent `w <- w - lr * grad`, then zeroes the grads.
///
/// Nothing is updated if any gradient is non-finite.
pub fn optimizer_step<P: Parameterized + ?Sized>(params: &mut P, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    let mut bad: Option<String> = None;
    params.visit_params(&mut |p| {
        if bad.is_none() && !p.grad.is_finite() {
            bad = Some(p.key.clone());
        }
    });
    if let Some(name) = bad {
        return Err(Error::NonFinite { name });
    }
    params.visit_params_mut(&mut |p| {
        for (w, g) in p.value.as_mut_slice().iter_mut().zip(p.grad.as_slice()) {
            *w -= lr * g;
        }
        p.zero_grad();
    });
    Ok(())
}
