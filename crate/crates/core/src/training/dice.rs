//! Soft Dice loss on sigmoid probabilities.

use ndarray::{Array2, ArrayView2};

use crate::error::{MasonError, Result};

pub const DEFAULT_SMOOTH: f64 = 1.0;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss value and its gradient with respect to each logit.
#[derive(Clone, Debug, PartialEq)]
pub struct DiceOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)` with `p = sigmoid(logits)`,
/// summed over every element of the slice.
pub fn dice_with_grad(logits: &[f64], targets: &[u8], smooth: f64) -> Result<DiceOutput> {
    if logits.len() != targets.len() {
        return Err(MasonError::ShapeMismatch(format!(
            "{} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let p: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let (mut inter, mut sum_p, mut sum_t) = (0.0, 0.0, 0.0);
    for (&pi, &ti) in p.iter().zip(targets) {
        let t = f64::from(ti);
        inter += pi * t;
        sum_p += pi;
        sum_t += t;
    }
    let num = 2.0 * inter + smooth;
    let den = sum_p + sum_t + smooth;
    let grad = p
        .iter()
        .zip(targets)
        .map(|(&pi, &ti)| {
            let dp = -(2.0 * f64::from(ti) * den - num) / (den * den);
            dp * pi * (1.0 - pi)
        })
        .collect();
    Ok(DiceOutput {
        loss: 1.0 - num / den,
        grad,
    })
}

pub fn dice_loss(logits: ArrayView2<f32>, target: ArrayView2<u8>, smooth: f64) -> Result<f64> {
    if logits.dim() != target.dim() {
        return Err(MasonError::ShapeMismatch(format!(
            "logits {:?} vs target {:?}",
            logits.dim(),
            target.dim()
        )));
    }
    let l: Vec<f64> = logits.iter().map(|&v| f64::from(v)).collect();
    let t: Vec<u8> = target.iter().copied().collect();
    Ok(dice_with_grad(&l, &t, smooth)?.loss)
}

/// One Dice term over a whole batch of maps, with per-map gradients.
pub fn batch_dice(
    logits: &[Array2<f32>],
    targets: &[ArrayView2<u8>],
    smooth: f64,
) -> Result<(f64, Vec<Array2<f32>>)> {
    if logits.len() != targets.len() {
        return Err(MasonError::ShapeMismatch(format!(
            "{} prediction maps vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut flat_l = Vec::new();
    let mut flat_t = Vec::new();
    for (l, t) in logits.iter().zip(targets) {
        if l.dim() != t.dim() {
            return Err(MasonError::ShapeMismatch(format!(
                "logits {:?} vs target {:?}",
                l.dim(),
                t.dim()
            )));
        }
        flat_l.extend(l.iter().map(|&v| f64::from(v)));
        flat_t.extend(t.iter().copied());
    }
    let out = dice_with_grad(&flat_l, &flat_t, smooth)?;
    let mut grads = Vec::with_capacity(logits.len());
    let mut offset = 0;
    for l in logits {
        let n = l.len();
        let g = Array2::from_shape_vec(
            l.dim(),
            out.grad[offset..offset + n]
                .iter()
                .map(|&v| v as f32)
                .collect(),
        )
        .expect("matching length");
        grads.push(g);
        offset += n;
    }
    Ok((out.loss, grads))
}
