//! Dice overlap and average symmetric surface distance on 2D masks.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    /// Row-major pixels.
    pub pixels: Vec<bool>,
    /// Millimetres per pixel (y, x).
    pub spacing: (f64, f64),
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>, spacing: (f64, f64)) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::Data(format!("mask of {} pixels does not match {height}x{width}", pixels.len())));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
            return Err(Error::Data(format!("mask spacing {spacing:?} must be positive")));
        }
        Ok(Self { height, width, pixels, spacing })
    }

    pub fn from_fn(height: usize, width: usize, spacing: (f64, f64), f: impl Fn(usize, usize) -> bool) -> Self {
        let pixels = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, pixels, spacing }
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.pixels.contains(&true)
    }

    fn at(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x]
    }
}

fn same_grid(a: &BinaryMask, b: &BinaryMask, op: &str) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Data(format!(
            "{op}: mask dims {}x{} and {}x{} differ",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)`; two empty masks agree perfectly (1.0).
pub fn dice_coefficient(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_grid(pred, gt, "dice")?;
    let inter = pred.pixels.iter().zip(&gt.pixels).filter(|(&p, &g)| p && g).count();
    let total = pred.count() + gt.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Foreground pixels with a 4-neighbour that is background or off the image.
pub fn boundary_points(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.at(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask.at(y - 1, x)
                || !mask.at(y + 1, x)
                || !mask.at(y, x - 1)
                || !mask.at(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Result of a surface-distance evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Assd {
    /// Millimetres.
    Value(f64),
    /// Nothing predicted; excluded from means and counted.
    EmptyPrediction,
    /// Prediction without ground truth; excluded from means.
    EmptyGroundTruth,
}

impl Assd {
    pub fn value(self) -> Option<f64> {
        match self {
            Assd::Value(v) => Some(v),
            _ => None,
        }
    }
}

fn directed_sum(from: &[(usize, usize)], to: &[(usize, usize)], (sy, sx): (f64, f64)) -> f64 {
    from.iter()
        .map(|&(ay, ax)| {
            to.iter()
                .map(|&(by, bx)| {
                    let dy = (ay as f64 - by as f64) * sy;
                    let dx = (ax as f64 - bx as f64) * sx;
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum()
}

/// Average symmetric surface distance between boundary sets, in mm.
pub fn assd(pred: &BinaryMask, gt: &BinaryMask) -> Result<Assd> {
    same_grid(pred, gt, "assd")?;
    if pred.spacing != gt.spacing {
        return Err(Error::Data(format!("assd: spacings {:?} and {:?} differ", pred.spacing, gt.spacing)));
    }
    let (sp, sg) = (boundary_points(pred), boundary_points(gt));
    if sp.is_empty() {
        return Ok(Assd::EmptyPrediction);
    }
    if sg.is_empty() {
        return Ok(Assd::EmptyGroundTruth);
    }
    let total = directed_sum(&sp, &sg, pred.spacing) + directed_sum(&sg, &sp, pred.spacing);
    Ok(Assd::Value(total / (sp.len() + sg.len()) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solid_block_perimeter() {
        let m = BinaryMask::from_fn(6, 6, (1.0, 1.0), |y, x| (1..5).contains(&y) && (1..5).contains(&x));
        assert_eq!(boundary_points(&m).len(), 12);
        let single = BinaryMask::from_fn(3, 3, (1.0, 1.0), |y, x| y == 1 && x == 1);
        assert_eq!(boundary_points(&single), vec![(1, 1)]);
    }
}
