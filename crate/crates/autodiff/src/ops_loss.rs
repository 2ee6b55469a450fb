//! Fused segmentation losses. Both return one value per sample, shape `[N]`.

use crate::error::{arg_err, shape_err, Result};
use crate::real::Real;
use crate::tape::{Op, Tape, Var};

fn class_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    Some((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Real> Tape<T> {
    /// Per-sample mean over pixels of `-log softmax(logits)[label]`, with the
    /// class axis at position 1. `labels` holds one class id per pixel.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let Some((n, cls, px)) = class_layout(&shape) else {
            return shape_err("cross_entropy", format!("logits need rank >= 2, got {shape:?}"));
        };
        if labels.len() != n * px {
            return shape_err("cross_entropy", format!("{} labels for {} pixels", labels.len(), n * px));
        }
        if let Some(pos) = labels.iter().position(|&l| l >= cls) {
            let (b, rest) = (pos / px, pos % px);
            let coords = unravel(rest, &shape[2..]);
            return arg_err(
                "cross_entropy",
                format!("label {} out of range [0, {cls}) at sample {b}, pixel {coords:?}", labels[pos]),
            );
        }
        let x = self.value(logits);
        let mut probs = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); n];
        let pxf = T::from_usize(px).unwrap();
        for b in 0..n {
            let mut acc = T::zero();
            for i in 0..px {
                let at = |c: usize| (b * cls + c) * px + i;
                let mx = (0..cls).map(|c| x[at(c)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for c in 0..cls {
                    let e = (x[at(c)] - mx).exp();
                    probs[at(c)] = e;
                    s += e;
                }
                for c in 0..cls {
                    probs[at(c)] = probs[at(c)] / s;
                }
                let lse = mx + s.ln();
                acc += lse - x[at(labels[b * px + i])];
            }
            out[b] = acc / pxf;
        }
        Ok(self.push(vec![n], out, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Per-sample soft Dice loss averaged over classes:
    /// `1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)`.
    pub fn soft_dice(&mut self, probs: Var, target: &[T], eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return arg_err("soft_dice", "smoothing must be positive");
        }
        let shape = self.shape(probs).to_vec();
        let Some((n, cls, px)) = class_layout(&shape) else {
            return shape_err("soft_dice", format!("probabilities need rank >= 2, got {shape:?}"));
        };
        if target.len() != n * cls * px {
            return shape_err("soft_dice", format!("target has {} values, expected {}", target.len(), n * cls * px));
        }
        let p = self.value(probs);
        let two = T::lit(2.0);
        let mut out = vec![T::zero(); n];
        for b in 0..n {
            let mut acc = T::zero();
            for c in 0..cls {
                let r = (b * cls + c) * px..(b * cls + c + 1) * px;
                let (mut inter, mut pp, mut gg) = (T::zero(), T::zero(), T::zero());
                for i in r {
                    inter += p[i] * target[i];
                    pp += p[i] * p[i];
                    gg += target[i] * target[i];
                }
                acc += T::one() - (two * inter + eps) / (pp + gg + eps);
            }
            out[b] = acc / T::from_usize(cls).unwrap();
        }
        Ok(self.push(vec![n], out, Op::SoftDice { probs, target: target.to_vec(), eps }))
    }
}

fn unravel(mut idx: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for (o, &d) in out.iter_mut().zip(dims).rev() {
        *o = idx % d;
        idx /= d;
    }
    out
}

pub(crate) fn cross_entropy_backward<T: Real>(
    tape: &Tape<T>,
    g: &[T],
    logits: Var,
    labels: &[usize],
    probs: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let shape = tape.shape(logits);
    let (n, cls, px) = class_layout(shape).unwrap();
    let Some(dx) = tape.grad_buf(logits, grads) else { return };
    let pxf = T::from_usize(px).unwrap();
    for b in 0..n {
        let s = g[b] / pxf;
        for c in 0..cls {
            for i in 0..px {
                let j = (b * cls + c) * px + i;
                let onehot = if labels[b * px + i] == c { T::one() } else { T::zero() };
                dx[j] += s * (probs[j] - onehot);
            }
        }
    }
}

pub(crate) fn soft_dice_backward<T: Real>(
    tape: &Tape<T>,
    g: &[T],
    probs: Var,
    target: &[T],
    eps: T,
    grads: &mut [Option<Vec<T>>],
) {
    let shape = tape.shape(probs);
    let (n, cls, px) = class_layout(shape).unwrap();
    let p = tape.value(probs);
    let Some(dx) = tape.grad_buf(probs, grads) else { return };
    let two = T::lit(2.0);
    let clsf = T::from_usize(cls).unwrap();
    for b in 0..n {
        let s = g[b] / clsf;
        for c in 0..cls {
            let r = (b * cls + c) * px..(b * cls + c + 1) * px;
            let (mut inter, mut pp, mut gg) = (T::zero(), T::zero(), T::zero());
            for i in r.clone() {
                inter += p[i] * target[i];
                pp += p[i] * p[i];
                gg += target[i] * target[i];
            }
            let num = two * inter + eps;
            let den = pp + gg + eps;
            // d/dp [1 - num/den] = -(2 g den - num 2 p) / den^2
            for i in r {
                dx[i] += s * (two * num * p[i] - two * target[i] * den) / (den * den);
            }
        }
    }
}
