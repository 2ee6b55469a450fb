//! Segmentation losses on `[N, classes, H, W]` logits.

use moct_autodiff::{Real, Tape, Var};

use crate::error::{Error, Result};

/// Default smoothing of the soft Dice term.
pub const DICE_EPS: f64 = 1.0;

/// One-hot encoding of `[N, H*W]` labels into `[N, classes, H*W]` order.
pub fn one_hot<T: Real>(labels: &[usize], n: usize, classes: usize) -> Result<Vec<T>> {
    if n == 0 || labels.len() % n != 0 {
        return Err(Error::Data(format!("{} labels do not split into {n} samples", labels.len())));
    }
    let px = labels.len() / n;
    let mut out = vec![T::zero(); n * classes * px];
    for b in 0..n {
        for i in 0..px {
            let c = labels[b * px + i];
            if c >= classes {
                return Err(Error::Data(format!("label {c} at sample {b}, pixel {i} exceeds {classes} classes")));
            }
            out[(b * classes + c) * px + i] = T::one();
        }
    }
    Ok(out)
}

/// Soft Dice loss of probabilities against a one-hot target, averaged over
/// classes and batch.
pub fn soft_dice_loss<T: Real>(tape: &mut Tape<T>, probs: Var, target: &[T], eps: T) -> Result<Var> {
    let per_sample = tape.soft_dice(probs, target, eps)?;
    Ok(tape.mean(per_sample))
}

/// Pixel-mean cross-entropy, averaged over the batch.
pub fn cross_entropy_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let per_sample = tape.cross_entropy(logits, labels)?;
    Ok(tape.mean(per_sample))
}

/// `mean_n w_n * (dice_n + ce_n) / 2`, with softmax over the class axis for
/// the Dice term. `weights` holds one weight per sample.
pub fn combined_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize], weights: &[T], eps: T) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 4 {
        return Err(Error::Data(format!("logits must be [N, classes, H, W], got {shape:?}")));
    }
    let (n, classes) = (shape[0], shape[1]);
    if weights.len() != n {
        return Err(Error::Data(format!("{} sample weights for a batch of {n}", weights.len())));
    }
    if labels.len() != n * shape[2] * shape[3] {
        return Err(Error::Data(format!("{} labels for logits {shape:?}", labels.len())));
    }
    let target = one_hot::<T>(labels, n, classes)?;
    let probs = tape.softmax(logits, 1)?;
    let dice = tape.soft_dice(probs, &target, eps)?;
    let ce = tape.cross_entropy(logits, labels)?;
    let both = tape.add(dice, ce)?;
    let half = T::lit(0.5);
    let w = tape.constant(&[n], weights.iter().map(|&w| w * half).collect())?;
    let weighted = tape.mul(both, w)?;
    Ok(tape.mean(weighted))
}
