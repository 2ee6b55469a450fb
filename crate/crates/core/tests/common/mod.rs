//! Brute-force oracles shared by the metric tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::HashSet;

use moct_core::metrics::BinaryMask;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64, spacing: (f64, f64)) -> BinaryMask {
    let pixels: Vec<bool> = (0..h * w).map(|_| rng.random_bool(density)).collect();
    BinaryMask::new(h, w, pixels, spacing).unwrap()
}

pub fn oracle_dice(p: &BinaryMask, g: &BinaryMask) -> f64 {
    let set = |m: &BinaryMask| -> HashSet<usize> { (0..m.pixels.len()).filter(|&i| m.pixels[i]).collect() };
    let (a, b) = (set(p), set(g));
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

/// Boundary via a zero-padded copy of the grid.
pub fn oracle_boundary(m: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (m.height, m.width);
    let mut pad = vec![vec![false; w + 2]; h + 2];
    for y in 0..h {
        for x in 0..w {
            pad[y + 1][x + 1] = m.pixels[y * w + x];
        }
    }
    let mut out = Vec::new();
    for y in 1..=h {
        for x in 1..=w {
            if pad[y][x] && !(pad[y - 1][x] && pad[y + 1][x] && pad[y][x - 1] && pad[y][x + 1]) {
                out.push((y - 1, x - 1));
            }
        }
    }
    out
}

pub fn oracle_assd(p: &BinaryMask, g: &BinaryMask) -> Option<f64> {
    let (bp, bg) = (oracle_boundary(p), oracle_boundary(g));
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let (sy, sx) = p.spacing;
    let dist = |a: (usize, usize), b: (usize, usize)| {
        let dy = (a.0 as f64 - b.0 as f64) * sy;
        let dx = (a.1 as f64 - b.1 as f64) * sx;
        (dy * dy + dx * dx).sqrt()
    };
    let nearest = |a: (usize, usize), set: &[(usize, usize)]| set.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min);
    let s1: f64 = bp.iter().map(|&a| nearest(a, &bg)).sum();
    let s2: f64 = bg.iter().map(|&b| nearest(b, &bp)).sum();
    Some((s1 + s2) / (bp.len() + bg.len()) as f64)
}

/// Two-sided p-value by sweeping every sign assignment of the ranks.
pub fn enumeration_p(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|a| {
            let below = abs.iter().filter(|b| *b < a).count() as f64;
            let equal = abs.iter().filter(|b| *b == a).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w = plus.min(total - plus);
    let mut extreme = 0u64;
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s.min(total - s) <= w + 1e-9 {
            extreme += 1;
        }
    }
    extreme as f64 / (1u64 << n) as f64
}
